//! Procedural benchmark episodes: a two-room toy apartment with tables, a
//! counter, a drawer unit and a fridge, plus the three long-horizon task
//! layouts (object relocation, groceries, table setting) built from
//! subgoal tuples `(s1, s*)` and cascading stage conditions.

use nalgebra::{DVector, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{
    BoxObstacle, Container, Drawer, FridgeDoor, Scene, SceneObject, SimConfig, SupportSurface,
    WorldState,
};
use crate::base::BaseExtrinsic;
use crate::geometry::{DHLink, KinematicChain, Pose, UnitQuaternion};

#[derive(Debug, Error, PartialEq)]
pub enum GenerationError {
    #[error("no collision-free base spawn found in {0} tries")]
    SpawnSampling(usize),
    #[error("no valid placement found on surfaces in {0} tries")]
    PlacementSampling(usize),
}

/// Benchmark task families.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TaskKind {
    TidyHouse,
    Groceries,
    SetTable,
}

impl TaskKind {
    pub fn name(&self) -> &'static str {
        match self {
            TaskKind::TidyHouse => "tidyhouse",
            TaskKind::Groceries => "groceries",
            TaskKind::SetTable => "settable",
        }
    }
}

impl std::str::FromStr for TaskKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "tidyhouse" => Ok(TaskKind::TidyHouse),
            "groceries" => Ok(TaskKind::Groceries),
            "settable" => Ok(TaskKind::SetTable),
            other => Err(format!("unknown task '{other}'")),
        }
    }
}

/// One pick-and-place subgoal: object index, start and goal positions, and
/// whether either end involves an articulated container.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Subgoal {
    pub object: usize,
    pub start: Vector3<f64>,
    pub goal: Vector3<f64>,
    pub pick_container: Option<Container>,
    pub place_container: Option<Container>,
}

/// Stage predicate over the current world state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum StageCondition {
    /// Object currently held (latched once achieved).
    ObjectPicked { object: usize },
    /// Object released within tolerance of its goal.
    ObjectPlaced { object: usize, goal: Vector3<f64>, tolerance: f64 },
    DrawerOpen { threshold: f64 },
    DrawerClosed { threshold: f64 },
    FridgeOpen { threshold: f64 },
    FridgeClosed { threshold: f64 },
}

/// A labeled benchmark stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageSpec {
    pub label: String,
    pub condition: StageCondition,
}

/// A generated episode: everything needed to build the world and score it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub kind: TaskKind,
    pub seed: u64,
    pub scene: Scene,
    pub objects: Vec<SceneObject>,
    pub drawer: Option<Drawer>,
    pub fridge: Option<FridgeDoor>,
    pub subgoals: Vec<Subgoal>,
    pub stages: Vec<StageSpec>,
    pub spawn: BaseExtrinsic,
    pub chain: KinematicChain,
    pub joint_limits: Vec<(f64, f64)>,
    pub resting_joints: Vec<f64>,
    /// Place tolerance used by the stage conditions, meters.
    pub place_tolerance: f64,
}

impl Episode {
    pub fn build_world(&self, config: SimConfig) -> WorldState {
        WorldState::new(
            self.scene.clone(),
            self.objects.clone(),
            self.drawer.clone(),
            self.fridge.clone(),
            self.chain.clone(),
            self.joint_limits.clone(),
            self.spawn,
            DVector::from_column_slice(&self.resting_joints),
            config,
            self.stages.len(),
        )
    }

    /// Evaluates one stage's own condition against the current state (or its
    /// latch).
    pub fn stage_condition_holds(&self, state: &WorldState, idx: usize) -> bool {
        if state.stage_latch.get(idx).copied().unwrap_or(false) {
            return true;
        }
        match &self.stages[idx].condition {
            StageCondition::ObjectPicked { object } => state.holding() == Some(*object),
            StageCondition::ObjectPlaced { object, goal, tolerance } => {
                state.holding() != Some(*object)
                    && (state.objects[*object].position - goal).norm() <= *tolerance
            }
            StageCondition::DrawerOpen { threshold } => {
                state.drawer.as_ref().map_or(false, |d| d.extension >= *threshold)
            }
            StageCondition::DrawerClosed { threshold } => {
                state.drawer.as_ref().map_or(false, |d| d.extension <= *threshold)
            }
            StageCondition::FridgeOpen { threshold } => {
                state.fridge.as_ref().map_or(false, |f| f.angle >= *threshold)
            }
            StageCondition::FridgeClosed { threshold } => {
                state.fridge.as_ref().map_or(false, |f| f.angle <= *threshold)
            }
        }
    }

    /// Latches the conditions that currently hold, in stage order. A closing
    /// stage only latches after its matching opening stage, so transient
    /// initial states don't pre-complete later stages.
    pub fn update_stage_latches(&self, state: &mut WorldState) {
        for idx in 0..self.stages.len() {
            if state.stage_latch[idx] {
                continue;
            }
            let prior_ok = (0..idx).all(|k| state.stage_latch[k]);
            let gated = matches!(
                self.stages[idx].condition,
                StageCondition::DrawerClosed { .. } | StageCondition::FridgeClosed { .. }
            );
            if gated && !prior_ok {
                continue;
            }
            if self.stage_condition_holds(state, idx) {
                state.stage_latch[idx] = true;
            }
        }
    }

    /// Cascading stage metric: a stage succeeds only if its condition holds
    /// (now or latched) and every prior stage succeeds.
    pub fn evaluate_stage(&self, state: &WorldState, idx: usize) -> bool {
        assert!(idx < self.stages.len(), "stage index out of range");
        (0..=idx).all(|k| {
            let gated = matches!(
                self.stages[k].condition,
                StageCondition::DrawerClosed { .. } | StageCondition::FridgeClosed { .. }
            );
            if gated {
                state.stage_latch[k]
            } else {
                self.stage_condition_holds(state, k)
            }
        })
    }
}

/// Default 7-DoF arm: length-dominated anthropomorphic chain (yaw, two long
/// pitch links, then a wrist cluster), mounted 0.3 m up and 0.1 m forward on
/// the base.
pub fn default_chain() -> KinematicChain {
    let half_pi = std::f64::consts::FRAC_PI_2;
    let links = vec![
        DHLink::new(0.0, half_pi, 0.05, 0.25, true),
        DHLink::new(0.0, 0.0, 0.30, 0.0, true),
        DHLink::new(0.0, 0.0, 0.28, 0.0, true),
        DHLink::new(0.0, half_pi, 0.10, 0.0, true),
        DHLink::new(0.0, -half_pi, 0.05, 0.15, true),
        DHLink::new(0.0, half_pi, 0.05, 0.0, true),
        DHLink::new(0.0, 0.0, 0.12, 0.0, true),
    ];
    KinematicChain::new(
        links,
        Pose::new(Vector3::new(0.1, 0.0, 0.3), UnitQuaternion::IDENTITY),
    )
    .expect("default chain is nonempty")
}

pub fn default_joint_limits() -> Vec<(f64, f64)> {
    vec![
        (-2.9, 2.9),
        (-0.9, 2.4),
        (-2.4, 2.4),
        (-2.9, 2.9),
        (-2.9, 2.9),
        (-2.4, 2.4),
        (-2.9, 2.9),
    ]
}

pub fn default_resting_joints() -> Vec<f64> {
    vec![0.0, 0.6, -0.4, 0.9, 0.1, 0.3, 0.0]
}

struct Apartment {
    scene: Scene,
    drawer: Drawer,
    fridge: FridgeDoor,
    /// Indices into `scene.surfaces`: table1 (left room), table2 (right
    /// room), counter (right room).
    table1: usize,
    table2: usize,
    counter: usize,
    fridge_shelf: Vector3<f64>,
}

/// Fixed furniture layout plus seeded floor clutter.
fn build_apartment(rng: &mut ChaCha8Rng) -> Apartment {
    let mut obstacles = Vec::new();
    let wall_color = [0.75, 0.73, 0.70];
    // Boundary walls (staying just inside the nav bounds so surface samples
    // land inside the mapped box).
    obstacles.push(BoxObstacle::new(
        Vector3::new(0.0, 3.0, 1.0),
        Vector3::new(4.0, 0.06, 1.0),
        wall_color,
    ));
    obstacles.push(BoxObstacle::new(
        Vector3::new(0.0, -3.0, 1.0),
        Vector3::new(4.0, 0.06, 1.0),
        wall_color,
    ));
    obstacles.push(BoxObstacle::new(
        Vector3::new(4.0, 0.0, 1.0),
        Vector3::new(0.06, 3.0, 1.0),
        wall_color,
    ));
    obstacles.push(BoxObstacle::new(
        Vector3::new(-4.0, 0.0, 1.0),
        Vector3::new(0.06, 3.0, 1.0),
        wall_color,
    ));
    // Divider wall with a doorway at the north end.
    obstacles.push(BoxObstacle::new(
        Vector3::new(0.0, -0.9, 1.0),
        Vector3::new(0.06, 2.1, 1.0),
        wall_color,
    ));

    // Tables and counter.
    let table_color = [0.55, 0.38, 0.22];
    let table1_box = BoxObstacle::new(
        Vector3::new(-2.6, 1.8, 0.36),
        Vector3::new(0.6, 0.4, 0.36),
        table_color,
    );
    let table2_box = BoxObstacle::new(
        Vector3::new(2.6, 1.8, 0.36),
        Vector3::new(0.6, 0.4, 0.36),
        table_color,
    );
    let counter_box = BoxObstacle::new(
        Vector3::new(2.6, -2.4, 0.45),
        Vector3::new(1.0, 0.3, 0.45),
        [0.6, 0.6, 0.62],
    );
    obstacles.push(table1_box);
    obstacles.push(table2_box);
    obstacles.push(counter_box);

    // Drawer unit (left room, south wall).
    let drawer_body = BoxObstacle::new(
        Vector3::new(-2.6, -2.45, 0.375),
        Vector3::new(0.25, 0.25, 0.375),
        [0.45, 0.3, 0.2],
    );
    obstacles.push(drawer_body);
    let drawer = Drawer {
        body: drawer_body,
        axis: Vector2::new(0.0, 1.0),
        extension: 0.0,
        max_extension: 0.35,
        handle_closed: Vector3::new(-2.6, -2.17, 0.58),
        inner_anchor: Vector3::new(-2.6, -2.35, 0.50),
    };

    // Fridge (right room, east wall).
    let fridge_body = BoxObstacle::new(
        Vector3::new(3.55, -0.9, 0.7),
        Vector3::new(0.35, 0.35, 0.7),
        [0.85, 0.87, 0.9],
    );
    obstacles.push(fridge_body);
    let fridge = FridgeDoor {
        body: fridge_body,
        hinge: Vector2::new(3.2, -1.25),
        closed_dir: Vector2::new(0.0, 1.0),
        width: 0.7,
        angle: 0.0,
        max_angle: 2.6,
        handle_height: 0.9,
        shelf_z: 0.78,
    };

    // Seeded floor clutter, kept away from furniture and the doorway.
    for _ in 0..2 {
        for _try in 0..50 {
            let cx = rng.gen_range(-3.2..3.2);
            let cy = rng.gen_range(-1.6..1.0);
            let hx = rng.gen_range(0.12..0.2);
            let hy = rng.gen_range(0.12..0.2);
            let candidate = BoxObstacle::new(
                Vector3::new(cx, cy, 0.25),
                Vector3::new(hx, hy, 0.25),
                [0.3, 0.5, 0.35],
            );
            let clear = obstacles.iter().all(|o| {
                let dx = (o.center.x - cx).abs() - (o.half.x + hx);
                let dy = (o.center.y - cy).abs() - (o.half.y + hy);
                dx.max(dy) > 0.55
            }) && (cx.abs() > 0.7 || cy < 0.2); // keep the doorway open
            if clear {
                obstacles.push(candidate);
                break;
            }
        }
    }

    // Placement bands cover the reachable zone of each top: tables take
    // their front half (open floor on the +y side), the counter a strip
    // along its front face.
    let surfaces = vec![
        SupportSurface { center: Vector2::new(-2.6, 1.65), half: Vector2::new(0.55, 0.22), z: 0.72 },
        SupportSurface { center: Vector2::new(2.6, 1.65), half: Vector2::new(0.55, 0.22), z: 0.72 },
        SupportSurface { center: Vector2::new(2.6, -2.26), half: Vector2::new(0.9, 0.14), z: 0.9 },
    ];

    Apartment {
        scene: Scene {
            bounds_min: Vector2::new(-4.0, -3.0),
            bounds_max: Vector2::new(4.0, 3.0),
            obstacles,
            surfaces,
        },
        drawer,
        fridge,
        table1: 0,
        table2: 1,
        counter: 2,
        fridge_shelf: Vector3::new(3.42, -0.9, 0.78),
    }
}

const PALETTE: [[f64; 3]; 6] = [
    [0.9, 0.2, 0.2],
    [0.2, 0.6, 0.9],
    [0.95, 0.75, 0.1],
    [0.5, 0.25, 0.7],
    [0.15, 0.7, 0.4],
    [0.9, 0.45, 0.15],
];

/// Samples a placement on a surface, keeping a margin from its edge and a
/// minimum spacing from the already-taken spots.
fn sample_on_surface(
    rng: &mut ChaCha8Rng,
    surface: &SupportSurface,
    taken: &[Vector3<f64>],
    radius: f64,
) -> Result<Vector3<f64>, GenerationError> {
    let margin = 0.06;
    // Prefer generous spacing; relax when the band is crowded.
    for spacing in [0.22, 0.16, 0.12] {
        for _ in 0..400 {
            let x = surface.center.x
                + rng.gen_range(-1.0..1.0) * (surface.half.x - margin).max(0.01);
            let y = surface.center.y
                + rng.gen_range(-1.0..1.0) * (surface.half.y - margin).max(0.01);
            let p = Vector3::new(x, y, surface.z + radius);
            if taken.iter().all(|t| (t - p).norm() > spacing) {
                return Ok(p);
            }
        }
    }
    Err(GenerationError::PlacementSampling(1200))
}

fn sample_spawn(
    rng: &mut ChaCha8Rng,
    world_probe: &WorldState,
) -> Result<BaseExtrinsic, GenerationError> {
    for _ in 0..1000 {
        let x = rng.gen_range(-3.4..3.4);
        let y = rng.gen_range(-2.4..2.4);
        let theta = rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
        if !world_probe.base_collides(x, y) {
            return Ok(BaseExtrinsic::new(x, y, theta));
        }
    }
    Err(GenerationError::SpawnSampling(1000))
}

/// Generates a benchmark episode: the apartment layout, task-specific object
/// placements and subgoal tuples, stage labels, and a collision-free base
/// spawn. Deterministic per `(kind, seed)`.
pub fn generate_episode(kind: TaskKind, seed: u64) -> Result<Episode, GenerationError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut apt = build_apartment(&mut rng);
    let radius = 0.035;

    let mut objects = Vec::new();
    let mut subgoals = Vec::new();
    let mut stages = Vec::new();
    let place_tol = 0.15;

    match kind {
        TaskKind::TidyHouse => {
            let surface_ids = [apt.table1, apt.table2, apt.counter];
            let mut taken: Vec<Vector3<f64>> = Vec::new();
            for i in 0..5 {
                let s_from = apt.scene.surfaces[surface_ids[rng.gen_range(0..3)]];
                let start = sample_on_surface(&mut rng, &s_from, &taken, radius)?;
                taken.push(start);
                let s_to = apt.scene.surfaces[surface_ids[rng.gen_range(0..3)]];
                let goal = sample_on_surface(&mut rng, &s_to, &taken, radius)?;
                taken.push(goal);
                objects.push(SceneObject {
                    name: format!("obj{}", i + 1),
                    position: start,
                    radius,
                    color: PALETTE[i % PALETTE.len()],
                    container: None,
                });
                subgoals.push(Subgoal {
                    object: i,
                    start,
                    goal,
                    pick_container: None,
                    place_container: None,
                });
                stages.push(StageSpec {
                    label: format!("Pick obj {}", i + 1),
                    condition: StageCondition::ObjectPicked { object: i },
                });
                stages.push(StageSpec {
                    label: format!("Place obj {}", i + 1),
                    condition: StageCondition::ObjectPlaced {
                        object: i,
                        goal,
                        tolerance: place_tol,
                    },
                });
            }
        }
        TaskKind::Groceries => {
            // Fridge starts open; two shelf items go to the counter, one
            // counter item returns into the fridge.
            apt.fridge.angle = 2.0;
            let mut taken: Vec<Vector3<f64>> = Vec::new();
            let counter = apt.scene.surfaces[apt.counter];
            for i in 0..2 {
                let start = apt.fridge_shelf
                    + Vector3::new(0.0, -0.12 + 0.24 * i as f64, radius);
                let goal = sample_on_surface(&mut rng, &counter, &taken, radius)?;
                taken.push(goal);
                objects.push(SceneObject {
                    name: format!("obj{}", i + 1),
                    position: start,
                    radius,
                    color: PALETTE[i],
                    container: Some(Container::Fridge),
                });
                subgoals.push(Subgoal {
                    object: i,
                    start,
                    goal,
                    pick_container: Some(Container::Fridge),
                    place_container: None,
                });
            }
            let start = sample_on_surface(&mut rng, &counter, &taken, radius)?;
            taken.push(start);
            let goal = apt.fridge_shelf + Vector3::new(0.0, 0.0, radius);
            objects.push(SceneObject {
                name: "obj3".into(),
                position: start,
                radius,
                color: PALETTE[2],
                container: None,
            });
            subgoals.push(Subgoal {
                object: 2,
                start,
                goal,
                pick_container: None,
                place_container: Some(Container::Fridge),
            });
            for (i, sg) in subgoals.iter().enumerate() {
                stages.push(StageSpec {
                    label: format!("Pick obj {}", i + 1),
                    condition: StageCondition::ObjectPicked { object: sg.object },
                });
                stages.push(StageSpec {
                    label: format!("Place obj {}", i + 1),
                    condition: StageCondition::ObjectPlaced {
                        object: sg.object,
                        goal: sg.goal,
                        tolerance: place_tol,
                    },
                });
            }
        }
        TaskKind::SetTable => {
            let table = apt.scene.surfaces[apt.table1];
            let mut taken: Vec<Vector3<f64>> = Vec::new();
            // Bowl rides in the closed drawer.
            let bowl_start = apt.drawer.inner_position() + Vector3::new(0.0, 0.0, radius);
            let bowl_goal = sample_on_surface(&mut rng, &table, &taken, radius)?;
            taken.push(bowl_goal);
            objects.push(SceneObject {
                name: "bowl".into(),
                position: bowl_start,
                radius,
                color: [0.92, 0.92, 0.95],
                container: Some(Container::Drawer),
            });
            subgoals.push(Subgoal {
                object: 0,
                start: bowl_start,
                goal: bowl_goal,
                pick_container: Some(Container::Drawer),
                place_container: None,
            });
            // Apple waits in the closed fridge.
            let apple_start = apt.fridge_shelf + Vector3::new(0.0, 0.0, radius);
            let apple_goal = sample_on_surface(&mut rng, &table, &taken, radius)?;
            taken.push(apple_goal);
            objects.push(SceneObject {
                name: "apple".into(),
                position: apple_start,
                radius,
                color: [0.85, 0.15, 0.1],
                container: Some(Container::Fridge),
            });
            subgoals.push(Subgoal {
                object: 1,
                start: apple_start,
                goal: apple_goal,
                pick_container: Some(Container::Fridge),
                place_container: None,
            });

            stages.push(StageSpec {
                label: "Open drawer".into(),
                condition: StageCondition::DrawerOpen { threshold: 0.25 },
            });
            stages.push(StageSpec {
                label: "Pick bowl".into(),
                condition: StageCondition::ObjectPicked { object: 0 },
            });
            stages.push(StageSpec {
                label: "Place bowl".into(),
                condition: StageCondition::ObjectPlaced {
                    object: 0,
                    goal: bowl_goal,
                    tolerance: place_tol,
                },
            });
            stages.push(StageSpec {
                label: "Close drawer".into(),
                condition: StageCondition::DrawerClosed { threshold: 0.05 },
            });
            stages.push(StageSpec {
                label: "Open fridge".into(),
                condition: StageCondition::FridgeOpen { threshold: 1.6 },
            });
            stages.push(StageSpec {
                label: "Pick apple".into(),
                condition: StageCondition::ObjectPicked { object: 1 },
            });
            stages.push(StageSpec {
                label: "Place apple".into(),
                condition: StageCondition::ObjectPlaced {
                    object: 1,
                    goal: apple_goal,
                    tolerance: place_tol,
                },
            });
            stages.push(StageSpec {
                label: "Close fridge".into(),
                condition: StageCondition::FridgeClosed { threshold: 0.05 },
            });
        }
    }

    // Probe world for spawn sampling (final spawn replaces the placeholder).
    let chain = default_chain();
    let probe = WorldState::new(
        apt.scene.clone(),
        objects.clone(),
        Some(apt.drawer.clone()),
        Some(apt.fridge.clone()),
        chain.clone(),
        default_joint_limits(),
        BaseExtrinsic::default(),
        DVector::from_column_slice(&default_resting_joints()),
        SimConfig::default(),
        stages.len(),
    );
    let spawn = sample_spawn(&mut rng, &probe)?;

    Ok(Episode {
        kind,
        seed,
        scene: apt.scene,
        objects,
        drawer: Some(apt.drawer),
        fridge: Some(apt.fridge),
        subgoals,
        stages,
        spawn,
        chain,
        joint_limits: default_joint_limits(),
        resting_joints: default_resting_joints(),
        place_tolerance: place_tol,
    })
}
