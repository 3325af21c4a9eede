use haif_core::logging::JsonlLog;
use haif_core::runner::run_episode;
use haif_core::scenario::Scenario;
use haif_core::sim::episode::{generate_episode, TaskKind};

#[test]
fn dbg_one_episode() {
    let mut scenario = Scenario::default();
    scenario.runner.ground_truth_map = true;
    let episode = generate_episode(TaskKind::TidyHouse, 1).unwrap();
    for (i, sg) in episode.subgoals.iter().enumerate() {
        eprintln!("sg{i}: start=({:.3},{:.3},{:.3}) goal=({:.3},{:.3},{:.3})",
            sg.start.x, sg.start.y, sg.start.z, sg.goal.x, sg.goal.y, sg.goal.z);
    }
    let log = JsonlLog::create(std::path::Path::new("/tmp/ep_debug.jsonl")).unwrap();
    let outcome = run_episode(&episode, &scenario, log, false);
    eprintln!("sim: {:.1}s stages: {:?}", outcome.sim_time, outcome.stage_flags);
}

#[test]
fn dbg_collision_at_stuck_pose() {
    let episode = generate_episode(TaskKind::TidyHouse, 1).unwrap();
    let world = episode.build_world(haif_core::sim::SimConfig::default());
    eprintln!("collides at (1.45,-1.76): {}", world.base_collides(1.45, -1.76));
    eprintln!("collides at (1.55,-1.76): {}", world.base_collides(1.55, -1.76));
    eprintln!("collides at (1.45,-1.86): {}", world.base_collides(1.45, -1.86));
    for (i, b) in episode.scene.obstacles.iter().enumerate() {
        if b.half.z <= 0.3 && b.center.z <= 0.3 {
            eprintln!("clutter {i}: center=({:.2},{:.2}) half=({:.2},{:.2})", b.center.x, b.center.y, b.half.x, b.half.y);
        }
    }
}
