//! Global path planning: A* over an inflated occupancy grid, and the active
//! subgoal feed for base motion.
//!
//! A* runs on 8-connected cells with unit straight cost and √2 diagonal
//! cost; the Euclidean heuristic (in cell units) is admissible for those
//! costs, so path cost is optimal on the inflated grid.

use serde::{Deserialize, Serialize};
use std::cmp::Ordering;
use std::collections::BinaryHeap;
use thiserror::Error;

use crate::base::BaseExtrinsic;

#[derive(Debug, Error, PartialEq)]
pub enum NavError {
    #[error("no path between start and goal on the inflated grid")]
    NoPath,
    #[error("goal cell is occupied after inflation")]
    GoalBlocked,
    #[error("start cell is occupied after inflation")]
    StartBlocked,
    #[error("{0} lies outside the grid")]
    OutOfBounds(String),
}

/// Cell occupancy states.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Cell {
    Free,
    Occupied,
}

/// A rectangular occupancy grid with world-frame placement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OccupancyGrid {
    cells: Vec<Cell>,
    width: usize,
    height: usize,
    /// Meters per cell.
    pub resolution: f64,
    /// World coordinates of the center of cell (0, 0).
    pub origin: (f64, f64),
}

impl OccupancyGrid {
    pub fn new_free(width: usize, height: usize, resolution: f64, origin: (f64, f64)) -> Self {
        assert!(resolution > 0.0 && width > 0 && height > 0);
        Self { cells: vec![Cell::Free; width * height], width, height, resolution, origin }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn get(&self, ix: usize, iy: usize) -> Cell {
        self.cells[iy * self.width + ix]
    }

    pub fn set(&mut self, ix: usize, iy: usize, cell: Cell) {
        self.cells[iy * self.width + ix] = cell;
    }

    pub fn is_free(&self, ix: usize, iy: usize) -> bool {
        self.get(ix, iy) == Cell::Free
    }

    /// World position of a cell center.
    pub fn cell_center(&self, ix: usize, iy: usize) -> (f64, f64) {
        (
            self.origin.0 + ix as f64 * self.resolution,
            self.origin.1 + iy as f64 * self.resolution,
        )
    }

    /// Cell containing a world position, if inside the grid.
    pub fn cell_of(&self, x: f64, y: f64) -> Option<(usize, usize)> {
        let fx = (x - self.origin.0) / self.resolution + 0.5;
        let fy = (y - self.origin.1) / self.resolution + 0.5;
        if fx < 0.0 || fy < 0.0 {
            return None;
        }
        let (ix, iy) = (fx as usize, fy as usize);
        if ix >= self.width || iy >= self.height {
            None
        } else {
            Some((ix, iy))
        }
    }

    /// Copy of the grid with occupied cells dilated by `radius` meters
    /// (disc dilation, cell-center metric).
    pub fn inflated(&self, radius: f64) -> OccupancyGrid {
        let r_cells = (radius / self.resolution).ceil() as i64;
        let r2 = (radius / self.resolution).powi(2);
        let mut out = self.clone();
        if r_cells == 0 {
            return out;
        }
        for iy in 0..self.height as i64 {
            for ix in 0..self.width as i64 {
                if self.get(ix as usize, iy as usize) != Cell::Occupied {
                    continue;
                }
                for dy in -r_cells..=r_cells {
                    for dx in -r_cells..=r_cells {
                        if (dx * dx + dy * dy) as f64 > r2 {
                            continue;
                        }
                        let (nx, ny) = (ix + dx, iy + dy);
                        if nx >= 0 && ny >= 0 && nx < self.width as i64 && ny < self.height as i64 {
                            out.set(nx as usize, ny as usize, Cell::Occupied);
                        }
                    }
                }
            }
        }
        out
    }

    /// PGM-style text dump for debugging: one row per line, `.` free and `#`
    /// occupied, row 0 last so +y points up.
    pub fn to_text(&self) -> String {
        let mut s = String::with_capacity((self.width + 1) * self.height);
        for iy in (0..self.height).rev() {
            for ix in 0..self.width {
                s.push(if self.is_free(ix, iy) { '.' } else { '#' });
            }
            s.push('\n');
        }
        s
    }
}

/// A planned path: world-frame waypoints from start to goal cell centers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Path {
    pub waypoints: Vec<(f64, f64)>,
    pub final_heading: f64,
    /// Total cost in cell units (1 per straight step, √2 per diagonal).
    pub cost: f64,
}

const SQRT2: f64 = std::f64::consts::SQRT_2;

#[derive(PartialEq)]
struct QueueEntry {
    f: f64,
    g: f64,
    idx: usize,
}

impl Eq for QueueEntry {}

impl Ord for QueueEntry {
    fn cmp(&self, other: &Self) -> Ordering {
        // Min-heap on f, tie-break on g (prefer larger g = closer to goal),
        // then index for determinism.
        other
            .f
            .partial_cmp(&self.f)
            .unwrap_or(Ordering::Equal)
            .then_with(|| self.g.partial_cmp(&other.g).unwrap_or(Ordering::Equal))
            .then_with(|| other.idx.cmp(&self.idx))
    }
}

impl PartialOrd for QueueEntry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Plans on the grid inflated by `inflation` meters. The returned waypoints
/// are cell centers including both endpoints; `final_heading` is copied from
/// `goal_heading`.
pub fn plan(
    grid: &OccupancyGrid,
    start: (f64, f64),
    goal: (f64, f64),
    goal_heading: f64,
    inflation: f64,
) -> Result<Path, NavError> {
    let inflated = grid.inflated(inflation);
    let s = inflated
        .cell_of(start.0, start.1)
        .ok_or_else(|| NavError::OutOfBounds(format!("start {start:?}")))?;
    let g = inflated
        .cell_of(goal.0, goal.1)
        .ok_or_else(|| NavError::OutOfBounds(format!("goal {goal:?}")))?;
    if !inflated.is_free(g.0, g.1) {
        return Err(NavError::GoalBlocked);
    }
    if !inflated.is_free(s.0, s.1) {
        return Err(NavError::StartBlocked);
    }
    let cells = astar_cells(&inflated, s, g)?;
    let waypoints = cells.iter().map(|&(ix, iy)| inflated.cell_center(ix, iy)).collect();
    let cost = path_cost(&cells);
    Ok(Path { waypoints, final_heading: goal_heading, cost })
}

/// Like [`plan`], but when the start or goal cell is blocked after inflation,
/// snaps it to the nearest free cell within `snap` meters. Used by the
/// episode runner where the robot legitimately stands inside the inflation
/// ring of nearby furniture.
pub fn plan_with_snap(
    grid: &OccupancyGrid,
    start: (f64, f64),
    goal: (f64, f64),
    goal_heading: f64,
    inflation: f64,
    snap: f64,
) -> Result<Path, NavError> {
    let inflated = grid.inflated(inflation);
    let s = inflated
        .cell_of(start.0, start.1)
        .ok_or_else(|| NavError::OutOfBounds(format!("start {start:?}")))?;
    let g = inflated
        .cell_of(goal.0, goal.1)
        .ok_or_else(|| NavError::OutOfBounds(format!("goal {goal:?}")))?;
    let s = nearest_free(&inflated, s, snap).ok_or(NavError::StartBlocked)?;
    let g = nearest_free(&inflated, g, snap).ok_or(NavError::GoalBlocked)?;
    let cells = astar_cells(&inflated, s, g)?;
    let waypoints = cells.iter().map(|&(ix, iy)| inflated.cell_center(ix, iy)).collect();
    let cost = path_cost(&cells);
    Ok(Path { waypoints, final_heading: goal_heading, cost })
}

fn nearest_free(grid: &OccupancyGrid, cell: (usize, usize), radius: f64) -> Option<(usize, usize)> {
    if grid.is_free(cell.0, cell.1) {
        return Some(cell);
    }
    let r_cells = (radius / grid.resolution).ceil() as i64;
    let mut best: Option<((usize, usize), f64)> = None;
    for dy in -r_cells..=r_cells {
        for dx in -r_cells..=r_cells {
            let nx = cell.0 as i64 + dx;
            let ny = cell.1 as i64 + dy;
            if nx < 0 || ny < 0 || nx >= grid.width() as i64 || ny >= grid.height() as i64 {
                continue;
            }
            let d2 = (dx * dx + dy * dy) as f64;
            if d2 > (radius / grid.resolution).powi(2) {
                continue;
            }
            if grid.is_free(nx as usize, ny as usize)
                && best.map_or(true, |(_, bd)| d2 < bd)
            {
                best = Some(((nx as usize, ny as usize), d2));
            }
        }
    }
    best.map(|(c, _)| c)
}

fn path_cost(cells: &[(usize, usize)]) -> f64 {
    cells
        .windows(2)
        .map(|w| {
            let dx = (w[1].0 as i64 - w[0].0 as i64).abs();
            let dy = (w[1].1 as i64 - w[0].1 as i64).abs();
            if dx + dy == 2 {
                SQRT2
            } else {
                1.0
            }
        })
        .sum()
}

fn astar_cells(
    grid: &OccupancyGrid,
    start: (usize, usize),
    goal: (usize, usize),
) -> Result<Vec<(usize, usize)>, NavError> {
    let (w, h) = (grid.width(), grid.height());
    let idx = |c: (usize, usize)| c.1 * w + c.0;
    let mut g_score = vec![f64::INFINITY; w * h];
    let mut parent = vec![usize::MAX; w * h];
    let mut closed = vec![false; w * h];
    let heuristic = |c: (usize, usize)| {
        let dx = c.0 as f64 - goal.0 as f64;
        let dy = c.1 as f64 - goal.1 as f64;
        (dx * dx + dy * dy).sqrt()
    };

    let mut open = BinaryHeap::new();
    g_score[idx(start)] = 0.0;
    open.push(QueueEntry { f: heuristic(start), g: 0.0, idx: idx(start) });

    while let Some(entry) = open.pop() {
        let cur = entry.idx;
        if closed[cur] {
            continue;
        }
        closed[cur] = true;
        let c = (cur % w, cur / w);
        if c == goal {
            let mut cells = vec![c];
            let mut node = cur;
            while parent[node] != usize::MAX {
                node = parent[node];
                cells.push((node % w, node / w));
            }
            cells.reverse();
            return Ok(cells);
        }
        for dy in -1i64..=1 {
            for dx in -1i64..=1 {
                if dx == 0 && dy == 0 {
                    continue;
                }
                let nx = c.0 as i64 + dx;
                let ny = c.1 as i64 + dy;
                if nx < 0 || ny < 0 || nx >= w as i64 || ny >= h as i64 {
                    continue;
                }
                let n = (nx as usize, ny as usize);
                if !grid.is_free(n.0, n.1) {
                    continue;
                }
                // No corner cutting: a diagonal move requires both adjacent
                // straight cells to be free.
                if dx != 0 && dy != 0 {
                    let a = ((c.0 as i64 + dx) as usize, c.1);
                    let b = (c.0, (c.1 as i64 + dy) as usize);
                    if !grid.is_free(a.0, a.1) || !grid.is_free(b.0, b.1) {
                        continue;
                    }
                }
                let step = if dx != 0 && dy != 0 { SQRT2 } else { 1.0 };
                let tentative = g_score[cur] + step;
                let ni = idx(n);
                if tentative < g_score[ni] - 1e-12 {
                    g_score[ni] = tentative;
                    parent[ni] = cur;
                    open.push(QueueEntry { f: tentative + heuristic(n), g: tentative, idx: ni });
                }
            }
        }
    }
    Err(NavError::NoPath)
}

/// Dijkstra cost over the same move set, as an independent optimality oracle.
pub fn dijkstra_cost(
    grid: &OccupancyGrid,
    start: (usize, usize),
    goal: (usize, usize),
) -> Option<f64> {
    let (w, h) = (grid.width(), grid.height());
    let idx = |c: (usize, usize)| c.1 * w + c.0;
    if !grid.is_free(start.0, start.1) || !grid.is_free(goal.0, goal.1) {
        return None;
    }
    let mut dist = vec![f64::INFINITY; w * h];
    let mut closed = vec![false; w * h];
    dist[idx(start)] = 0.0;
    let mut open = BinaryHeap::new();
    open.push(QueueEntry { f: 0.0, g: 0.0, idx: idx(start) });
    while let Some(entry) = open.pop() {
        let cur = entry.idx;
        if closed[cur] {
            continue;
        }
        closed[cur] = true;
        let c = (cur % w, cur / w);
        if c == goal {
            return Some(dist[cur]);
        }
        for dy in -1i64..=1 {
            for dx in -1i64..=1 {
                if dx == 0 && dy == 0 {
                    continue;
                }
                let nx = c.0 as i64 + dx;
                let ny = c.1 as i64 + dy;
                if nx < 0 || ny < 0 || nx >= w as i64 || ny >= h as i64 {
                    continue;
                }
                let n = (nx as usize, ny as usize);
                if !grid.is_free(n.0, n.1) {
                    continue;
                }
                if dx != 0 && dy != 0 {
                    let a = ((c.0 as i64 + dx) as usize, c.1);
                    let b = (c.0, (c.1 as i64 + dy) as usize);
                    if !grid.is_free(a.0, a.1) || !grid.is_free(b.0, b.1) {
                        continue;
                    }
                }
                let step = if dx != 0 && dy != 0 { SQRT2 } else { 1.0 };
                let nd = dist[cur] + step;
                let ni = idx(n);
                if nd < dist[ni] - 1e-12 {
                    dist[ni] = nd;
                    open.push(QueueEntry { f: nd, g: nd, idx: ni });
                }
            }
        }
    }
    None
}

/// The first waypoint farther than `lookahead` from the pose (or the final
/// waypoint), scanning forward from the waypoint nearest the pose, with the
/// desired heading toward it. The flag marks that the final waypoint is
/// active.
pub fn active_subgoal(
    path: &Path,
    pose: &BaseExtrinsic,
    lookahead: f64,
) -> ((f64, f64), f64, bool) {
    let nearest = path
        .waypoints
        .iter()
        .enumerate()
        .min_by(|(_, a), (_, b)| {
            let da = (a.0 - pose.x).powi(2) + (a.1 - pose.y).powi(2);
            let db = (b.0 - pose.x).powi(2) + (b.1 - pose.y).powi(2);
            da.partial_cmp(&db).unwrap_or(Ordering::Equal)
        })
        .map(|(i, _)| i)
        .unwrap_or(0);
    active_subgoal_from(path, pose, lookahead, nearest)
}

/// [`active_subgoal`] scanning from `min_index`; callers that track progress
/// pass their cursor to make the subgoal index monotone.
pub fn active_subgoal_from(
    path: &Path,
    pose: &BaseExtrinsic,
    lookahead: f64,
    min_index: usize,
) -> ((f64, f64), f64, bool) {
    assert!(!path.waypoints.is_empty(), "active_subgoal on empty path");
    let last = path.waypoints.len() - 1;
    let mut chosen = last;
    for (i, wp) in path.waypoints.iter().enumerate().skip(min_index.min(last)) {
        let d = ((wp.0 - pose.x).powi(2) + (wp.1 - pose.y).powi(2)).sqrt();
        if d > lookahead {
            chosen = i;
            break;
        }
    }
    let wp = path.waypoints[chosen];
    let heading = (wp.1 - pose.y).atan2(wp.0 - pose.x);
    (wp, heading, chosen == last)
}

/// Index variant of the subgoal scan, for progress tracking.
pub fn active_subgoal_index(path: &Path, pose: &BaseExtrinsic, lookahead: f64, min_index: usize) -> usize {
    let last = path.waypoints.len() - 1;
    for (i, wp) in path.waypoints.iter().enumerate().skip(min_index.min(last)) {
        let d = ((wp.0 - pose.x).powi(2) + (wp.1 - pose.y).powi(2)).sqrt();
        if d > lookahead {
            return i;
        }
    }
    last
}

/// True when any path waypoint lands on an occupied cell of the (inflated)
/// grid; used to trigger replanning after map updates.
pub fn path_blocked(grid: &OccupancyGrid, path: &Path, inflation: f64) -> bool {
    let inflated = grid.inflated(inflation);
    path.waypoints.iter().any(|&(x, y)| match inflated.cell_of(x, y) {
        Some((ix, iy)) => !inflated.is_free(ix, iy),
        None => true,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn grid10() -> OccupancyGrid {
        OccupancyGrid::new_free(10, 10, 1.0, (0.0, 0.0))
    }

    #[test]
    fn open_grid_diagonal_cost() {
        let path = plan(&grid10(), (0.0, 0.0), (9.0, 9.0), 0.0, 0.0).unwrap();
        assert_relative_eq!(path.cost, 9.0 * SQRT2, epsilon = 1e-9);
        assert_eq!(path.waypoints.first(), Some(&(0.0, 0.0)));
        assert_eq!(path.waypoints.last(), Some(&(9.0, 9.0)));
    }

    #[test]
    fn wall_with_gap() {
        let mut g = grid10();
        for iy in 0..10 {
            if iy != 4 {
                g.set(5, iy, Cell::Occupied);
            }
        }
        let path = plan(&g, (0.0, 4.0), (9.0, 4.0), 0.0, 0.0).unwrap();
        assert!(path.waypoints.contains(&(5.0, 4.0)), "path must pass the gap");
        let oracle = dijkstra_cost(&g, (0, 4), (9, 4)).unwrap();
        assert_relative_eq!(path.cost, oracle, epsilon = 1e-9);
    }

    #[test]
    fn walled_goal_is_no_path() {
        let mut g = grid10();
        for (dx, dy) in [(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)] {
            g.set((8 + dx) as usize, (8 + dy) as usize, Cell::Occupied);
        }
        assert_eq!(plan(&g, (0.0, 0.0), (8.0, 8.0), 0.0, 0.0), Err(NavError::NoPath));
        g.set(8, 8, Cell::Occupied);
        assert_eq!(plan(&g, (0.0, 0.0), (8.0, 8.0), 0.0, 0.0), Err(NavError::GoalBlocked));
    }

    #[test]
    fn astar_matches_dijkstra_on_random_grids() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut compared = 0;
        for _ in 0..200 {
            let w = rng.gen_range(8..32);
            let h = rng.gen_range(8..32);
            let mut g = OccupancyGrid::new_free(w, h, 0.5, (0.0, 0.0));
            for iy in 0..h {
                for ix in 0..w {
                    if rng.gen_bool(0.25) {
                        g.set(ix, iy, Cell::Occupied);
                    }
                }
            }
            let s = (rng.gen_range(0..w), rng.gen_range(0..h));
            let t = (rng.gen_range(0..w), rng.gen_range(0..h));
            if !g.is_free(s.0, s.1) || !g.is_free(t.0, t.1) {
                continue;
            }
            let oracle = dijkstra_cost(&g, s, t);
            let sc = g.cell_center(s.0, s.1);
            let tc = g.cell_center(t.0, t.1);
            match (plan(&g, sc, tc, 0.0, 0.0), oracle) {
                (Ok(p), Some(c)) => {
                    assert_relative_eq!(p.cost, c, epsilon = 1e-9);
                    compared += 1;
                }
                (Err(NavError::NoPath), None) => {}
                (a, b) => panic!("disagreement: {a:?} vs {b:?}"),
            }
        }
        assert!(compared > 50, "too few comparable cases: {compared}");
    }

    #[test]
    fn planned_paths_avoid_inflated_cells() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..50 {
            let mut g = OccupancyGrid::new_free(24, 24, 0.25, (0.0, 0.0));
            for _ in 0..30 {
                let ix = rng.gen_range(4..20);
                let iy = rng.gen_range(4..20);
                g.set(ix, iy, Cell::Occupied);
            }
            let inflated = g.inflated(0.3);
            if let Ok(p) = plan(&g, (0.0, 0.0), (5.75, 5.75), 0.0, 0.3) {
                for &(x, y) in &p.waypoints {
                    let (ix, iy) = inflated.cell_of(x, y).unwrap();
                    assert!(inflated.is_free(ix, iy), "waypoint on inflated-occupied cell");
                }
            }
        }
    }

    #[test]
    fn subgoal_scan_cases() {
        let path = Path {
            waypoints: (0..10).map(|i| (i as f64 * 0.2, 0.0)).collect(),
            final_heading: 0.5,
            cost: 9.0,
        };
        // At path start with zero lookahead: the first waypoint beyond
        // distance zero is waypoint 1 (waypoint 0 is at distance exactly 0).
        let pose = BaseExtrinsic::new(0.0, 0.0, 0.0);
        let ((x, _), _, last) = active_subgoal(&path, &pose, 0.0);
        assert_relative_eq!(x, 0.2, epsilon = 1e-12);
        assert!(!last);

        // At the final waypoint: final flag set.
        let pose = BaseExtrinsic::new(1.8, 0.0, 0.0);
        let (wp, _, last) = active_subgoal(&path, &pose, 0.5);
        assert_relative_eq!(wp.0, 1.8, epsilon = 1e-12);
        assert!(last);

        // Mid-path: matches the linear-scan oracle (forward from the nearest
        // waypoint).
        let pose = BaseExtrinsic::new(0.9, 0.1, 0.0);
        let lookahead = 0.45;
        let (wp, heading, _) = active_subgoal(&path, &pose, lookahead);
        let dist = |w: &(f64, f64)| ((w.0 - 0.9f64).powi(2) + (w.1 - 0.1f64).powi(2)).sqrt();
        let nearest = (0..path.waypoints.len())
            .min_by(|&a, &b| {
                dist(&path.waypoints[a]).partial_cmp(&dist(&path.waypoints[b])).unwrap()
            })
            .unwrap();
        let oracle = path.waypoints[nearest..]
            .iter()
            .find(|w| dist(w) > lookahead)
            .unwrap();
        assert_relative_eq!(wp.0, oracle.0, epsilon = 1e-12);
        assert_relative_eq!(heading, (0.0 - 0.1f64).atan2(wp.0 - 0.9), epsilon = 1e-12);
    }

    #[test]
    fn subgoal_index_monotone_under_progress() {
        let path = Path {
            waypoints: (0..40).map(|i| (i as f64 * 0.1, (i as f64 * 0.3).sin() * 0.4)).collect(),
            final_heading: 0.0,
            cost: 0.0,
        };
        let mut cursor = 0;
        let mut prev = 0;
        // March the pose along the path; the cursor-tracked index never
        // decreases.
        for i in 0..40 {
            let pose = BaseExtrinsic::new(path.waypoints[i].0, path.waypoints[i].1, 0.0);
            let idx = active_subgoal_index(&path, &pose, 0.25, cursor);
            assert!(idx >= prev, "index regressed: {idx} < {prev}");
            cursor = idx;
            prev = idx;
        }
    }

    #[test]
    fn blocked_path_detection() {
        let mut g = grid10();
        let path = plan(&g, (0.0, 0.0), (9.0, 0.0), 0.0, 0.0).unwrap();
        assert!(!path_blocked(&g, &path, 0.0));
        g.set(5, 0, Cell::Occupied);
        assert!(path_blocked(&g, &path, 0.0));
    }

    #[test]
    fn grid_text_dump() {
        let mut g = OccupancyGrid::new_free(3, 2, 1.0, (0.0, 0.0));
        g.set(1, 0, Cell::Occupied);
        assert_eq!(g.to_text(), "...\n.#.\n");
    }
}
