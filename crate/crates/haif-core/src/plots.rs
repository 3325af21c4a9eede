//! Plot emission: per-stage bar data, a top-view scene/trajectory/map
//! overlay, and the mixture snapshot — structured data files plus a minimal
//! static SVG writer, renderer-agnostic.

use std::io::Write;
use std::path::Path;

use crate::runner::{EpisodeOutcome, RunConfig, StageReport};
use crate::sim::episode::generate_episode;

/// Writes `stage_rates.csv`, `map_components.csv` and `topview.svg` under the
/// run's output directory.
pub fn emit_plots(
    config: &RunConfig,
    report: &StageReport,
    outcomes: &[EpisodeOutcome],
) -> std::io::Result<()> {
    let dir = &config.out_dir;

    // Bar-chart data: one row per stage.
    let mut bars = String::from("task,stage_index,label,rate\n");
    for (i, label) in report.labels.iter().enumerate() {
        bars.push_str(&format!(
            "{},{},{},{:.6}\n",
            report.task,
            i,
            label,
            report.completions[i] as f64 / report.episodes.max(1) as f64
        ));
    }
    std::fs::write(dir.join("stage_rates.csv"), bars)?;

    // Mixture snapshot of the first episode's map, one component per row.
    let mut map_csv = std::fs::File::create(dir.join("map_components.csv"))?;
    writeln!(map_csv, "weight,mx,my,mz,cr,cg,cb")?;
    if let Some(records) = outcomes.first().and_then(|o| o.map_records.as_ref()) {
        for r in records {
            writeln!(
                map_csv,
                "{:.9},{:.6},{:.6},{:.6},{:.4},{:.4},{:.4}",
                r.weight, r.mean[0], r.mean[1], r.mean[2], r.mean[3], r.mean[4], r.mean[5]
            )?;
        }
    }

    // Top view of the first episode.
    let svg = match outcomes.first() {
        Some(first) => topview_svg(config, first),
        None => empty_svg(),
    };
    std::fs::write(dir.join("topview.svg"), svg)?;
    Ok(())
}

fn empty_svg() -> String {
    "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"10\" height=\"10\"></svg>\n".into()
}

/// Scene footprint, planned paths, driven trajectory, and map component
/// means, projected to the floor.
pub fn topview_svg(config: &RunConfig, outcome: &EpisodeOutcome) -> String {
    let Ok(episode) = generate_episode(config.task, outcome.seed) else {
        return empty_svg();
    };
    let min = episode.scene.bounds_min;
    let max = episode.scene.bounds_max;
    let scale = 80.0;
    let w = (max.x - min.x) * scale;
    let h = (max.y - min.y) * scale;
    let tx = |x: f64| (x - min.x) * scale;
    let ty = |y: f64| (max.y - y) * scale; // +y up

    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w:.0}\" height=\"{h:.0}\" viewBox=\"0 0 {w:.0} {h:.0}\">\n"
    );
    s.push_str(&format!(
        "<rect x=\"0\" y=\"0\" width=\"{w:.0}\" height=\"{h:.0}\" fill=\"#fafafa\"/>\n"
    ));

    for b in &episode.scene.obstacles {
        let x0 = tx(b.center.x - b.half.x);
        let y0 = ty(b.center.y + b.half.y);
        let bw = 2.0 * b.half.x * scale;
        let bh = 2.0 * b.half.y * scale;
        let rgb = format!(
            "rgb({},{},{})",
            (b.color[0] * 255.0) as u8,
            (b.color[1] * 255.0) as u8,
            (b.color[2] * 255.0) as u8
        );
        s.push_str(&format!(
            "<rect x=\"{x0:.1}\" y=\"{y0:.1}\" width=\"{bw:.1}\" height=\"{bh:.1}\" fill=\"{rgb}\" fill-opacity=\"0.7\"/>\n"
        ));
    }

    // Map component means.
    if let Some(records) = &outcome.map_records {
        for r in records {
            s.push_str(&format!(
                "<circle cx=\"{:.1}\" cy=\"{:.1}\" r=\"2.5\" fill=\"purple\" fill-opacity=\"0.5\"/>\n",
                tx(r.mean[0]),
                ty(r.mean[1])
            ));
        }
    }

    // Planned paths.
    for path in &outcome.paths {
        if path.len() < 2 {
            continue;
        }
        let pts: Vec<String> =
            path.iter().map(|(x, y)| format!("{:.1},{:.1}", tx(*x), ty(*y))).collect();
        s.push_str(&format!(
            "<polyline points=\"{}\" fill=\"none\" stroke=\"#4488cc\" stroke-width=\"1.5\" stroke-dasharray=\"4 3\"/>\n",
            pts.join(" ")
        ));
    }

    // Driven base trajectory.
    if outcome.trajectory.len() >= 2 {
        let pts: Vec<String> = outcome
            .trajectory
            .iter()
            .map(|(x, y)| format!("{:.1},{:.1}", tx(*x), ty(*y)))
            .collect();
        s.push_str(&format!(
            "<polyline points=\"{}\" fill=\"none\" stroke=\"#cc3333\" stroke-width=\"2\"/>\n",
            pts.join(" ")
        ));
    }

    // Subgoal markers.
    for sg in &episode.subgoals {
        s.push_str(&format!(
            "<circle cx=\"{:.1}\" cy=\"{:.1}\" r=\"4\" fill=\"none\" stroke=\"green\" stroke-width=\"1.5\"/>\n",
            tx(sg.start.x),
            ty(sg.start.y)
        ));
        s.push_str(&format!(
            "<rect x=\"{:.1}\" y=\"{:.1}\" width=\"8\" height=\"8\" fill=\"none\" stroke=\"orange\" stroke-width=\"1.5\"/>\n",
            tx(sg.goal.x) - 4.0,
            ty(sg.goal.y) - 4.0
        ));
    }

    s.push_str("</svg>\n");
    s
}

/// Writes the bar data for an empty report (valid files with headers only).
pub fn emit_empty(dir: &Path) -> std::io::Result<()> {
    std::fs::write(dir.join("stage_rates.csv"), "task,stage_index,label,rate\n")?;
    std::fs::write(dir.join("map_components.csv"), "weight,mx,my,mz,cr,cg,cb\n")?;
    std::fs::write(dir.join("topview.svg"), empty_svg())?;
    Ok(())
}
