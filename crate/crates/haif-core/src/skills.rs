//! The five whole-body skills as fixed goal sequences with termination
//! predicates, driving the continuous controller.
//!
//! A skill is an ordered list of phases; each phase contributes attractors
//! (end-effector positions, joint configurations, base poses, or a path
//! follower), an optional gated gripper command, and a conjunction of
//! termination rules. A phase whose predicate already holds at entry is
//! skipped within the same tick; a phase that exceeds its timeout or stalls
//! (no end-effector progress over a watch window) fails the skill.

use nalgebra::{Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::base::BaseExtrinsic;
use crate::controller::{GoalSpec, WholeBodyModel};
use crate::geometry::angle_diff;
use crate::nav::{active_subgoal_index, Path};
use crate::sim::{Attachment, WorldState};

/// Positions that skills reference; resolved against the live world each
/// tick (drawer handles travel, held objects follow the hand).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Anchor {
    Fixed(Vector3<f64>),
    Object(usize),
    DrawerHandle,
    FridgeHandle,
}

impl Anchor {
    pub fn resolve(&self, world: &WorldState) -> Vector3<f64> {
        match self {
            Anchor::Fixed(p) => *p,
            Anchor::Object(i) => world.objects[*i].position,
            Anchor::DrawerHandle => world
                .drawer
                .as_ref()
                .map(|d| d.handle_position())
                .unwrap_or_else(Vector3::zeros),
            Anchor::FridgeHandle => world
                .fridge
                .as_ref()
                .map(|f| f.handle_position())
                .unwrap_or_else(Vector3::zeros),
        }
    }
}

/// One attractor contributed by a phase.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum PhaseGoal {
    /// End-effector position goal at `anchor + offset`. With `snapshot`, the
    /// anchor is resolved once at phase entry and frozen.
    EndEffector { anchor: Anchor, offset: Vector3<f64>, kappa: f64, snapshot: bool },
    /// Drives a carried object to `anchor + offset` by offsetting the
    /// end-effector goal by the current hand-to-object displacement.
    CarryTo { object: usize, anchor: Anchor, offset: Vector3<f64>, kappa: f64 },
    /// Arm joint configuration goal, in joint coordinates (added to each
    /// link's θ offset).
    Joints { config: Vec<f64>, kappa: f64 },
    /// Base pose goal.
    Base { x: f64, y: f64, theta: f64, kappa: f64 },
    /// Base follows a planned path through the active-subgoal feed.
    FollowPath { path: Path, lookahead: f64, kappa: f64 },
}

/// Gate condition for a gripper command.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum GripperGate {
    /// Always emit.
    Always,
    /// Emit while the end-effector is within `dist` of the anchor.
    EeNear(Anchor, f64),
    /// Emit while object `object` is within `dist` of the anchor (used for
    /// releases: the payload hangs at its grasp offset, not at the hand).
    ObjectNear { object: usize, anchor: Anchor, dist: f64 },
}

/// Gated gripper command.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GripperRule {
    pub command: f64,
    pub gate: GripperGate,
}

/// Termination predicates; a phase completes when all of them hold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum TermRule {
    EeWithin { anchor: Anchor, offset: Vector3<f64>, dist: f64 },
    JointsWithin { config: Vec<f64>, tol: f64 },
    HoldingObject { object: Option<usize> },
    NotHolding,
    HoldingHandle { which: Attachment },
    DrawerExtAtLeast(f64),
    DrawerExtAtMost(f64),
    FridgeAngleAtLeast(f64),
    FridgeAngleAtMost(f64),
    BaseWithin { x: f64, y: f64, theta: f64, dist: f64, angle: f64 },
}

impl TermRule {
    fn holds(&self, world: &WorldState) -> bool {
        match self {
            TermRule::EeWithin { anchor, offset, dist } => {
                let target = anchor.resolve(world) + offset;
                (world.ee_pose().t - target).norm() <= *dist
            }
            TermRule::JointsWithin { config, tol } => world
                .joints
                .iter()
                .zip(config)
                .all(|(q, t)| (q - t).abs() <= *tol),
            TermRule::HoldingObject { object } => match object {
                Some(i) => world.holding() == Some(*i),
                None => world.holding().is_some(),
            },
            TermRule::NotHolding => world.held.is_none(),
            TermRule::HoldingHandle { which } => world.holding_handle() == Some(*which),
            TermRule::DrawerExtAtLeast(v) => {
                world.drawer.as_ref().map_or(false, |d| d.extension >= *v)
            }
            TermRule::DrawerExtAtMost(v) => {
                world.drawer.as_ref().map_or(false, |d| d.extension <= *v)
            }
            TermRule::FridgeAngleAtLeast(v) => {
                world.fridge.as_ref().map_or(false, |f| f.angle >= *v)
            }
            TermRule::FridgeAngleAtMost(v) => {
                world.fridge.as_ref().map_or(false, |f| f.angle <= *v)
            }
            TermRule::BaseWithin { x, y, theta, dist, angle } => {
                let dp = ((world.base.x - x).powi(2) + (world.base.y - y).powi(2)).sqrt();
                dp <= *dist && angle_diff(world.base.theta, *theta).abs() <= *angle
            }
        }
    }
}

/// One phase of a skill.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkillPhase {
    pub name: String,
    pub goals: Vec<PhaseGoal>,
    pub gripper: Option<GripperRule>,
    pub termination: Vec<TermRule>,
    /// Seconds; infinite for path following.
    pub timeout: f64,
}

impl SkillPhase {
    fn terminated(&self, world: &WorldState) -> bool {
        !self.termination.is_empty() && self.termination.iter().all(|t| t.holds(world))
    }
}

/// Skill families.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SkillKind {
    Pick,
    Place,
    PickFromDrawer,
    PickFromFridge,
    Move,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SkillStatus {
    Running,
    Success,
    Failure,
}

/// Gains shared by the skill builders; hand-tuned per skill family.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SkillGains {
    pub kappa_reach: f64,
    pub kappa_joint: f64,
    pub kappa_posture: f64,
    pub kappa_base: f64,
    /// Pre-grasp height above the target, meters.
    pub pregrasp_height: f64,
    /// Post-grasp retreat height, meters.
    pub retreat_height: f64,
    /// Gate radius for the grasp command.
    pub attach_gate: f64,
    pub phase_timeout: f64,
    /// Arrival thresholds of the Move skill.
    pub move_dist_tol: f64,
    pub move_angle_tol: f64,
    pub lookahead: f64,
}

impl Default for SkillGains {
    fn default() -> Self {
        Self {
            kappa_reach: 22.0,
            kappa_joint: 5.0,
            kappa_posture: 0.25,
            kappa_base: 5.0,
            pregrasp_height: 0.15,
            retreat_height: 0.20,
            attach_gate: 0.145,
            phase_timeout: 25.0,
            move_dist_tol: 0.8,
            move_angle_tol: 0.3,
            lookahead: 0.5,
        }
    }
}

/// A built skill with its execution state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkillProgram {
    pub kind: SkillKind,
    pub phases: Vec<SkillPhase>,
    pub active: usize,
    pub phase_time: f64,
    pub status: SkillStatus,
    /// Snapshots of entry-resolved anchors, keyed by (phase, goal index).
    entry_snapshots: Vec<Option<Vector3<f64>>>,
    /// Path-follower cursor for monotone subgoal progress.
    path_cursor: usize,
    /// Stall watch: last checked end-effector position and time.
    watch_ee: Option<Vector3<f64>>,
    watch_time: f64,
}

/// What a tick hands to the controller.
#[derive(Debug, Clone, PartialEq)]
pub struct SkillTick {
    pub status: SkillStatus,
    pub gripper: f64,
    pub base_goals: Vec<GoalSpec>,
    pub arm_intrinsic: Vec<(usize, GoalSpec)>,
    pub ee_goal: Option<GoalSpec>,
    pub active_phase: Option<String>,
}

impl SkillProgram {
    /// Name of the phase that was active when the skill ended.
    pub fn last_phase(&self) -> Option<&str> {
        self.phases.get(self.active.min(self.phases.len() - 1)).map(|p| p.name.as_str())
    }

    fn new(kind: SkillKind, phases: Vec<SkillPhase>) -> Self {
        assert!(!phases.is_empty(), "skill programs are nonempty");
        let n: usize = phases.iter().map(|p| p.goals.len()).sum();
        Self {
            kind,
            phases,
            active: 0,
            phase_time: 0.0,
            status: SkillStatus::Running,
            entry_snapshots: vec![None; n],
            path_cursor: 0,
            watch_ee: None,
            watch_time: 0.0,
        }
    }

    fn snapshot_slot(&self, phase: usize, goal: usize) -> usize {
        self.phases[..phase].iter().map(|p| p.goals.len()).sum::<usize>() + goal
    }

    /// Advances the phase machine and emits this tick's goals. Call once per
    /// control tick with the current world.
    pub fn tick(&mut self, world: &WorldState, chain_thetas: &[f64], dt: f64) -> SkillTick {
        if self.status != SkillStatus::Running {
            return self.idle_tick();
        }

        // Skip phases whose predicates already hold (possibly several).
        while self.active < self.phases.len() && self.phases[self.active].terminated(world) {
            self.active += 1;
            self.phase_time = 0.0;
            self.watch_ee = None;
        }
        if self.active >= self.phases.len() {
            self.status = SkillStatus::Success;
            return self.idle_tick();
        }

        self.phase_time += dt;
        let phase_timeout = self.phases[self.active].timeout;
        if self.phase_time > phase_timeout {
            self.status = SkillStatus::Failure;
            return self.idle_tick();
        }

        // Stall watch (end-effector phases of manipulation skills): under
        // 2 cm of progress over the watch window fails the skill. Joint and
        // base phases move the hand arbitrarily slowly near their targets,
        // so only their timeouts apply.
        let ee_phase = self.phases[self.active].goals.iter().any(|g| {
            matches!(g, PhaseGoal::EndEffector { .. } | PhaseGoal::CarryTo { .. })
        });
        if self.kind != SkillKind::Move && ee_phase {
            let ee = world.ee_pose().t;
            match self.watch_ee {
                None => {
                    self.watch_ee = Some(ee);
                    self.watch_time = 0.0;
                }
                Some(prev) => {
                    self.watch_time += dt;
                    if self.watch_time >= 4.0 {
                        if (ee - prev).norm() < 0.015 {
                            self.status = SkillStatus::Failure;
                            return self.idle_tick();
                        }
                        self.watch_ee = Some(ee);
                        self.watch_time = 0.0;
                    }
                }
            }
        }

        let active = self.active;
        let mut out = SkillTick {
            status: SkillStatus::Running,
            gripper: 0.0,
            base_goals: Vec::new(),
            arm_intrinsic: Vec::new(),
            ee_goal: None,
            active_phase: Some(self.phases[active].name.clone()),
        };

        let goals = self.phases[active].goals.clone();
        for (gi, goal) in goals.iter().enumerate() {
            match goal {
                PhaseGoal::EndEffector { anchor, offset, kappa, snapshot } => {
                    let target = if *snapshot {
                        let slot = self.snapshot_slot(active, gi);
                        match self.entry_snapshots[slot] {
                            Some(p) => p,
                            None => {
                                let p = anchor.resolve(world) + offset;
                                self.entry_snapshots[slot] = Some(p);
                                p
                            }
                        }
                    } else {
                        anchor.resolve(world) + offset
                    };
                    out.ee_goal = Some(GoalSpec::position(target, *kappa));
                }
                PhaseGoal::CarryTo { object, anchor, offset, kappa } => {
                    let hang = world.ee_pose().t - world.objects[*object].position;
                    let target = anchor.resolve(world) + offset + hang;
                    out.ee_goal = Some(GoalSpec::position(target, *kappa));
                }
                PhaseGoal::Joints { config, kappa } => {
                    for (level, q) in config.iter().enumerate() {
                        out.arm_intrinsic
                            .push((level, GoalSpec::joint(chain_thetas[level] + q, *kappa)));
                    }
                }
                PhaseGoal::Base { x, y, theta, kappa } => {
                    out.base_goals.push(pursuit_goal(&world.base, (*x, *y), *theta, *kappa));
                }
                PhaseGoal::FollowPath { path, lookahead, kappa } => {
                    let pose = world.base;
                    let idx = active_subgoal_index(path, &pose, *lookahead, self.path_cursor);
                    self.path_cursor = idx.max(self.path_cursor);
                    let wp = path.waypoints[self.path_cursor.min(path.waypoints.len() - 1)];
                    out.base_goals.push(pursuit_goal(&pose, wp, path.final_heading, *kappa));
                }
            }
        }

        if let Some(rule) = &self.phases[active].gripper {
            let emit = match rule.gate {
                GripperGate::Always => true,
                GripperGate::EeNear(anchor, dist) => {
                    (world.ee_pose().t - anchor.resolve(world)).norm() <= dist
                }
                GripperGate::ObjectNear { object, anchor, dist } => {
                    (world.objects[object].position - anchor.resolve(world)).norm() <= dist
                }
            };
            if emit {
                out.gripper = rule.command;
            }
        }

        out
    }

    fn idle_tick(&self) -> SkillTick {
        SkillTick {
            status: self.status,
            gripper: 0.0,
            base_goals: Vec::new(),
            arm_intrinsic: Vec::new(),
            ee_goal: None,
            active_phase: None,
        }
    }

    /// Writes this tick's goals into the whole-body model, replacing previous
    /// goal assignments (repulsors are left untouched).
    pub fn apply_goals(tick: &SkillTick, model: &mut WholeBodyModel) {
        model.set_base_goals(tick.base_goals.clone());
        for lv in 0..model.num_arm_levels() {
            model.set_arm_level_goals(lv, Vec::new());
        }
        for (level, g) in &tick.arm_intrinsic {
            model.push_arm_level_goal(*level, g.clone());
        }
        if let Some(g) = &tick.ee_goal {
            let ee = model.ee_level();
            model.push_arm_level_goal(ee, g.clone());
        }
    }
}

/// Differential-drive pursuit goal: face the target and translate only once
/// roughly aligned (turn in place first when the target is behind), then
/// settle on the final heading near the goal point.
fn pursuit_goal(
    pose: &BaseExtrinsic,
    target: (f64, f64),
    final_heading: f64,
    kappa: f64,
) -> GoalSpec {
    let dist = ((pose.x - target.0).powi(2) + (pose.y - target.1).powi(2)).sqrt();
    if dist <= 0.25 {
        return GoalSpec::base_pose(target.0, target.1, final_heading, kappa);
    }
    let bearing = (target.1 - pose.y).atan2(target.0 - pose.x);
    if angle_diff(bearing, pose.theta).abs() > 1.0 {
        // Misaligned: rotate in place toward the bearing.
        GoalSpec::base_pose(pose.x, pose.y, bearing, kappa)
    } else {
        GoalSpec::base_pose(target.0, target.1, bearing, kappa)
    }
}

/// Compact arm configuration used while driving; matches the resting pose.
pub fn tuck_config() -> Vec<f64> {
    vec![0.0, 0.6, -0.4, 0.9, 0.1, 0.3, 0.0]
}

/// Extended configuration putting the end-effector forward at working
/// height.
pub fn unfold_config() -> Vec<f64> {
    vec![0.0, 1.0, -0.5, 0.7, 0.0, 0.4, 0.0]
}

/// Pre-grasp offset for an approach: vertical height plus the yaw-rotated
/// lateral offset.
fn approach_offset(offset: Vector3<f64>, yaw: f64) -> Vector3<f64> {
    let (s, c) = yaw.sin_cos();
    Vector3::new(c * offset.x - s * offset.y, s * offset.x + c * offset.y, offset.z)
}

/// Optional base station goal shared by a skill's phases.
fn station_goal(station: Option<(f64, f64, f64)>, kappa: f64) -> Vec<PhaseGoal> {
    match station {
        Some((x, y, theta)) => vec![PhaseGoal::Base { x, y, theta, kappa }],
        None => Vec::new(),
    }
}

/// Pick: unfold → pre-grasp above the target → grasp once close → retreat →
/// fold. With a `station`, the base is actively held on a reachable standoff
/// pose throughout.
pub fn build_pick(
    object: usize,
    approach: (Vector3<f64>, f64),
    station: Option<(f64, f64, f64)>,
    gains: &SkillGains,
) -> SkillProgram {
    let (offset, yaw) = approach;
    let pre = approach_offset(
        Vector3::new(offset.x, offset.y, offset.z.max(gains.pregrasp_height)),
        yaw,
    );
    let anchor = Anchor::Object(object);
    let st = |mut goals: Vec<PhaseGoal>| -> Vec<PhaseGoal> {
        goals.extend(station_goal(station, gains.kappa_base));
        goals
    };
    let phases = vec![
        // Skipped instantly unless a previous attempt snapped the wrong
        // thing; drops it so the grasp below can bind the right object.
        SkillPhase {
            name: "drop-wrong".into(),
            goals: st(vec![PhaseGoal::Joints { config: unfold_config(), kappa: gains.kappa_joint }]),
            gripper: Some(GripperRule { command: -1.0, gate: GripperGate::Always }),
            termination: vec![TermRule::NotHolding],
            timeout: 3.0,
        },
        SkillPhase {
            name: "unfold".into(),
            goals: st(vec![PhaseGoal::Joints { config: unfold_config(), kappa: gains.kappa_joint }]),
            gripper: None,
            termination: vec![TermRule::JointsWithin { config: unfold_config(), tol: 0.35 }],
            timeout: gains.phase_timeout,
        },
        SkillPhase {
            name: "pre-grasp".into(),
            goals: st(vec![
                PhaseGoal::EndEffector { anchor, offset: pre, kappa: gains.kappa_reach, snapshot: false },
                PhaseGoal::Joints { config: unfold_config(), kappa: gains.kappa_posture },
            ]),
            gripper: None,
            termination: vec![TermRule::EeWithin { anchor, offset: pre, dist: 0.16 }],
            timeout: gains.phase_timeout,
        },
        SkillPhase {
            name: "grasp".into(),
            goals: st(vec![PhaseGoal::EndEffector {
                anchor,
                offset: Vector3::new(0.0, 0.0, 0.01),
                kappa: gains.kappa_reach,
                snapshot: false,
            }]),
            gripper: Some(GripperRule { command: 1.0, gate: GripperGate::EeNear(anchor, gains.attach_gate) }),
            termination: vec![TermRule::HoldingObject { object: Some(object) }],
            timeout: gains.phase_timeout,
        },
        SkillPhase {
            name: "retreat".into(),
            goals: st(vec![PhaseGoal::EndEffector {
                anchor,
                offset: Vector3::new(0.0, 0.0, 1.0) * gains.retreat_height,
                kappa: gains.kappa_reach,
                snapshot: true,
            }]),
            gripper: None,
            termination: vec![TermRule::EeWithin {
                anchor,
                offset: Vector3::new(0.0, 0.0, 1.0) * gains.retreat_height,
                dist: 0.15,
            }],
            timeout: gains.phase_timeout,
        },
        SkillPhase {
            name: "fold".into(),
            goals: st(vec![PhaseGoal::Joints { config: tuck_config(), kappa: gains.kappa_joint }]),
            gripper: None,
            termination: vec![TermRule::JointsWithin { config: tuck_config(), tol: 0.3 }],
            timeout: gains.phase_timeout,
        },
    ];
    SkillProgram::new(SkillKind::Pick, phases)
}

/// Place mirrors Pick with a release instead of the grasp.
pub fn build_place(
    object: usize,
    goal: Vector3<f64>,
    approach: (Vector3<f64>, f64),
    station: Option<(f64, f64, f64)>,
    gains: &SkillGains,
) -> SkillProgram {
    let (offset, yaw) = approach;
    let pre = approach_offset(
        Vector3::new(offset.x, offset.y, offset.z.max(gains.pregrasp_height)),
        yaw,
    );
    let anchor = Anchor::Fixed(goal);
    let release_off = Vector3::new(0.0, 0.0, 0.03);
    let st = |mut goals: Vec<PhaseGoal>| -> Vec<PhaseGoal> {
        goals.extend(station_goal(station, gains.kappa_base));
        goals
    };
    let phases = vec![
        SkillPhase {
            name: "unfold".into(),
            goals: st(vec![PhaseGoal::Joints { config: unfold_config(), kappa: gains.kappa_joint }]),
            gripper: None,
            termination: vec![TermRule::JointsWithin { config: unfold_config(), tol: 0.35 }],
            timeout: gains.phase_timeout,
        },
        SkillPhase {
            name: "pre-place".into(),
            goals: st(vec![
                PhaseGoal::EndEffector { anchor, offset: pre, kappa: gains.kappa_reach, snapshot: false },
                PhaseGoal::Joints { config: unfold_config(), kappa: gains.kappa_posture },
            ]),
            gripper: None,
            termination: vec![TermRule::EeWithin { anchor, offset: pre, dist: 0.16 }],
            timeout: gains.phase_timeout,
        },
        SkillPhase {
            name: "release".into(),
            goals: st(vec![PhaseGoal::CarryTo {
                object,
                anchor,
                offset: release_off,
                kappa: gains.kappa_reach,
            }]),
            gripper: Some(GripperRule {
                command: -1.0,
                gate: GripperGate::ObjectNear { object, anchor, dist: 0.13 },
            }),
            termination: vec![TermRule::NotHolding],
            timeout: gains.phase_timeout,
        },
        SkillPhase {
            name: "retreat".into(),
            goals: st(vec![PhaseGoal::EndEffector {
                anchor,
                offset: Vector3::new(0.0, 0.0, 1.0) * gains.retreat_height,
                kappa: gains.kappa_reach,
                snapshot: true,
            }]),
            gripper: None,
            termination: vec![TermRule::EeWithin {
                anchor,
                offset: Vector3::new(0.0, 0.0, 1.0) * gains.retreat_height,
                dist: 0.15,
            }],
            timeout: gains.phase_timeout,
        },
        SkillPhase {
            name: "fold".into(),
            goals: st(vec![PhaseGoal::Joints { config: tuck_config(), kappa: gains.kappa_joint }]),
            gripper: None,
            termination: vec![TermRule::JointsWithin { config: tuck_config(), tol: 0.3 }],
            timeout: gains.phase_timeout,
        },
    ];
    SkillProgram::new(SkillKind::Place, phases)
}

/// Drawer geometry the builder needs.
pub struct DrawerInfo {
    pub handle_closed: Vector3<f64>,
    pub axis: Vector2<f64>,
    pub open_target: f64,
}

/// PickFromDrawer: grasp the handle, pull open along the axis, pick the
/// object inside, re-approach the handle line and push the drawer closed.
pub fn build_pick_from_drawer(
    drawer: &DrawerInfo,
    object: usize,
    gains: &SkillGains,
) -> SkillProgram {
    let axis3 = Vector3::new(drawer.axis.x, drawer.axis.y, 0.0);
    let handle = Anchor::DrawerHandle;
    let obj = Anchor::Object(object);
    let pull_target = drawer.handle_closed + axis3 * drawer.open_target;
    let push_target = drawer.handle_closed - axis3 * 0.03;
    // Base station in front of the fully opened drawer, facing the unit.
    let station_point = drawer.handle_closed + axis3 * (drawer.open_target + 0.55);
    let face = (-axis3.y).atan2(-axis3.x);
    let station = Some((station_point.x, station_point.y, face));
    let st = |mut goals: Vec<PhaseGoal>| -> Vec<PhaseGoal> {
        goals.extend(station_goal(station, gains.kappa_base));
        goals
    };
    let phases = vec![
        SkillPhase {
            name: "unfold".into(),
            goals: st(vec![PhaseGoal::Joints { config: unfold_config(), kappa: gains.kappa_joint }]),
            gripper: None,
            termination: vec![TermRule::JointsWithin { config: unfold_config(), tol: 0.35 }],
            timeout: gains.phase_timeout,
        },
        SkillPhase {
            name: "approach-handle".into(),
            goals: st(vec![PhaseGoal::EndEffector {
                anchor: handle,
                offset: axis3 * 0.12,
                kappa: gains.kappa_reach,
                snapshot: false,
            }]),
            gripper: None,
            termination: vec![TermRule::EeWithin { anchor: handle, offset: axis3 * 0.12, dist: 0.12 }],
            timeout: gains.phase_timeout,
        },
        SkillPhase {
            name: "grasp-handle".into(),
            goals: st(vec![PhaseGoal::EndEffector {
                anchor: handle,
                offset: Vector3::zeros(),
                kappa: gains.kappa_reach,
                snapshot: false,
            }]),
            gripper: Some(GripperRule { command: 1.0, gate: GripperGate::EeNear(handle, gains.attach_gate) }),
            termination: vec![TermRule::HoldingHandle { which: Attachment::DrawerHandle }],
            timeout: gains.phase_timeout,
        },
        SkillPhase {
            name: "pull-open".into(),
            goals: st(vec![PhaseGoal::EndEffector {
                anchor: Anchor::Fixed(pull_target),
                offset: Vector3::zeros(),
                kappa: gains.kappa_reach,
                snapshot: false,
            }]),
            gripper: None,
            termination: vec![TermRule::DrawerExtAtLeast(drawer.open_target - 0.06)],
            timeout: gains.phase_timeout,
        },
        SkillPhase {
            name: "release-handle".into(),
            goals: st(vec![PhaseGoal::EndEffector {
                anchor: handle,
                offset: Vector3::zeros(),
                kappa: 1.0,
                snapshot: true,
            }]),
            gripper: Some(GripperRule { command: -1.0, gate: GripperGate::Always }),
            termination: vec![TermRule::NotHolding],
            timeout: 4.0,
        },
        SkillPhase {
            name: "clear-above".into(),
            goals: st(vec![PhaseGoal::EndEffector {
                anchor: obj,
                offset: Vector3::new(0.0, 0.0, 0.22),
                kappa: gains.kappa_reach,
                snapshot: false,
            }]),
            gripper: None,
            termination: vec![TermRule::EeWithin {
                anchor: obj,
                offset: Vector3::new(0.0, 0.0, 0.22),
                dist: 0.14,
            }],
            timeout: gains.phase_timeout,
        },
        SkillPhase {
            name: "grasp".into(),
            goals: st(vec![PhaseGoal::EndEffector {
                anchor: obj,
                offset: Vector3::new(0.0, 0.0, 0.01),
                kappa: gains.kappa_reach,
                snapshot: false,
            }]),
            gripper: Some(GripperRule { command: 1.0, gate: GripperGate::EeNear(obj, gains.attach_gate) }),
            termination: vec![TermRule::HoldingObject { object: Some(object) }],
            timeout: gains.phase_timeout,
        },
        SkillPhase {
            name: "lift-out".into(),
            goals: st(vec![PhaseGoal::EndEffector {
                anchor: obj,
                offset: Vector3::new(0.0, 0.0, 0.28),
                kappa: gains.kappa_reach,
                snapshot: true,
            }]),
            gripper: None,
            termination: vec![TermRule::EeWithin {
                anchor: obj,
                offset: Vector3::new(0.0, 0.0, 0.28),
                dist: 0.15,
            }],
            timeout: gains.phase_timeout,
        },
        SkillPhase {
            name: "approach-front".into(),
            goals: st(vec![PhaseGoal::EndEffector {
                anchor: handle,
                offset: axis3 * 0.10 + Vector3::new(0.0, 0.0, 0.02),
                kappa: gains.kappa_reach,
                snapshot: false,
            }]),
            gripper: None,
            termination: vec![TermRule::EeWithin {
                anchor: handle,
                offset: axis3 * 0.10 + Vector3::new(0.0, 0.0, 0.02),
                dist: 0.06,
            }],
            timeout: gains.phase_timeout,
        },
        SkillPhase {
            name: "push-close".into(),
            goals: st(vec![PhaseGoal::EndEffector {
                anchor: Anchor::Fixed(push_target),
                offset: Vector3::zeros(),
                kappa: gains.kappa_reach,
                snapshot: false,
            }]),
            gripper: None,
            termination: vec![TermRule::DrawerExtAtMost(0.02)],
            timeout: gains.phase_timeout,
        },
        SkillPhase {
            name: "fold".into(),
            goals: st(vec![PhaseGoal::Joints { config: tuck_config(), kappa: gains.kappa_joint }]),
            gripper: None,
            termination: vec![TermRule::JointsWithin { config: tuck_config(), tol: 0.3 }],
            timeout: gains.phase_timeout,
        },
    ];
    SkillProgram::new(SkillKind::PickFromDrawer, phases)
}

/// Fridge geometry the builder needs.
pub struct FridgeInfo {
    pub hinge: Vector2<f64>,
    pub closed_dir: Vector2<f64>,
    pub width: f64,
    pub handle_height: f64,
    pub current_angle: f64,
    pub partial_angle: f64,
    pub open_angle: f64,
    /// Base staging pose left of the door for the closing push.
    pub close_stage: (f64, f64, f64),
}

/// Point on the hinge circle at a given door angle and radius.
pub fn hinge_circle_point(info: &FridgeInfo, angle: f64, radius: f64, z: f64) -> Vector3<f64> {
    let (s, c) = angle.sin_cos();
    let dir = Vector2::new(
        c * info.closed_dir.x - s * info.closed_dir.y,
        s * info.closed_dir.x + c * info.closed_dir.y,
    );
    Vector3::new(info.hinge.x + dir.x * radius, info.hinge.y + dir.y * radius, z)
}

/// PickFromFridge: grasp the handle, open along an arc of hinge-circle
/// attractors, retreat, push to fully open from behind the door, pick the
/// object, stage the base beside the door, and push it closed.
pub fn build_pick_from_fridge(
    fridge: &FridgeInfo,
    object: usize,
    gains: &SkillGains,
) -> SkillProgram {
    let handle = Anchor::FridgeHandle;
    let obj = Anchor::Object(object);
    let radius = fridge.width;
    let z = fridge.handle_height;
    // Outward normal of the closed door.
    let normal = Vector2::new(-fridge.closed_dir.y, fridge.closed_dir.x);
    let normal3 = Vector3::new(normal.x, normal.y, 0.0);
    // Station facing the handle for the opening sequence; the closing push
    // stages from `close_stage`.
    let door_mid = Vector3::new(
        fridge.hinge.x + fridge.closed_dir.x * 0.5 * fridge.width,
        fridge.hinge.y + fridge.closed_dir.y * 0.5 * fridge.width,
        0.0,
    );
    let open_station_p = door_mid + normal3 * 0.62;
    let open_face = (door_mid.y - open_station_p.y).atan2(door_mid.x - open_station_p.x);
    let open_station = Some((open_station_p.x, open_station_p.y, open_face));
    let st = |mut goals: Vec<PhaseGoal>| -> Vec<PhaseGoal> {
        goals.extend(station_goal(open_station, gains.kappa_base));
        goals
    };

    let mut phases = vec![
        SkillPhase {
            name: "unfold".into(),
            goals: st(vec![PhaseGoal::Joints { config: unfold_config(), kappa: gains.kappa_joint }]),
            gripper: None,
            termination: vec![TermRule::JointsWithin { config: unfold_config(), tol: 0.35 }],
            timeout: gains.phase_timeout,
        },
        SkillPhase {
            name: "approach-handle".into(),
            goals: st(vec![PhaseGoal::EndEffector {
                anchor: handle,
                offset: normal3 * 0.12,
                kappa: gains.kappa_reach,
                snapshot: false,
            }]),
            gripper: None,
            termination: vec![TermRule::EeWithin {
                anchor: handle,
                offset: normal3 * 0.12,
                dist: 0.07,
            }],
            timeout: gains.phase_timeout,
        },
        SkillPhase {
            name: "grasp-handle".into(),
            goals: st(vec![PhaseGoal::EndEffector {
                anchor: handle,
                offset: Vector3::zeros(),
                kappa: gains.kappa_reach,
                snapshot: false,
            }]),
            gripper: Some(GripperRule { command: 1.0, gate: GripperGate::EeNear(handle, gains.attach_gate) }),
            termination: vec![TermRule::HoldingHandle { which: Attachment::FridgeHandle }],
            timeout: gains.phase_timeout,
        },
    ];

    // Circular-arc partial open: equally spaced attractors on the hinge
    // circle at the handle radius.
    let arc_steps = 8;
    let a0 = fridge.current_angle;
    for k in 1..=arc_steps {
        let angle = a0 + (fridge.partial_angle - a0) * k as f64 / arc_steps as f64;
        phases.push(SkillPhase {
            name: format!("arc-open-{k}"),
            goals: st(vec![PhaseGoal::EndEffector {
                anchor: Anchor::Fixed(hinge_circle_point(fridge, angle, radius, z)),
                offset: Vector3::zeros(),
                kappa: gains.kappa_reach,
                snapshot: false,
            }]),
            gripper: None,
            termination: vec![TermRule::FridgeAngleAtLeast(angle - 0.08)],
            timeout: 6.0,
        });
    }

    phases.push(SkillPhase {
        name: "release-handle".into(),
        goals: st(vec![PhaseGoal::EndEffector {
            anchor: handle,
            offset: Vector3::zeros(),
            kappa: 1.0,
            snapshot: true,
        }]),
        gripper: Some(GripperRule { command: -1.0, gate: GripperGate::Always }),
        termination: vec![TermRule::NotHolding],
        timeout: 4.0,
    });
    phases.push(SkillPhase {
        name: "retreat-arm".into(),
        goals: st(vec![PhaseGoal::Joints { config: unfold_config(), kappa: gains.kappa_joint }]),
        gripper: None,
        termination: vec![TermRule::JointsWithin { config: unfold_config(), tol: 0.3 }],
        timeout: gains.phase_timeout,
    });

    // Linear push from behind the half-open door to full open: sweep
    // waypoints on the panel at mid-radius.
    let push_steps = 4;
    for k in 1..=push_steps {
        let angle =
            fridge.partial_angle + (fridge.open_angle - fridge.partial_angle) * k as f64 / push_steps as f64;
        phases.push(SkillPhase {
            name: format!("push-open-{k}"),
            goals: st(vec![PhaseGoal::EndEffector {
                anchor: Anchor::Fixed(hinge_circle_point(fridge, angle, 0.55 * radius, z)),
                offset: Vector3::zeros(),
                kappa: gains.kappa_reach,
                snapshot: false,
            }]),
            gripper: None,
            termination: vec![TermRule::FridgeAngleAtLeast(angle - 0.10)],
            timeout: 6.0,
        });
    }

    // Inner pick.
    phases.push(SkillPhase {
        name: "pre-grasp".into(),
        goals: st(vec![PhaseGoal::EndEffector {
            anchor: obj,
            offset: normal3 * 0.10 + Vector3::new(0.0, 0.0, 0.10),
            kappa: gains.kappa_reach,
            snapshot: false,
        }]),
        gripper: None,
        termination: vec![TermRule::EeWithin {
            anchor: obj,
            offset: normal3 * 0.10 + Vector3::new(0.0, 0.0, 0.10),
            dist: 0.07,
        }],
        timeout: gains.phase_timeout,
    });
    phases.push(SkillPhase {
        name: "grasp".into(),
        goals: st(vec![PhaseGoal::EndEffector {
            anchor: obj,
            offset: Vector3::new(0.0, 0.0, 0.01),
            kappa: gains.kappa_reach,
            snapshot: false,
        }]),
        gripper: Some(GripperRule { command: 1.0, gate: GripperGate::EeNear(obj, gains.attach_gate) }),
        termination: vec![TermRule::HoldingObject { object: Some(object) }],
        timeout: gains.phase_timeout,
    });
    phases.push(SkillPhase {
        name: "lift-out".into(),
        goals: st(vec![PhaseGoal::EndEffector {
            anchor: obj,
            offset: normal3 * 0.25 + Vector3::new(0.0, 0.0, 0.12),
            kappa: gains.kappa_reach,
            snapshot: true,
        }]),
        gripper: None,
        termination: vec![TermRule::EeWithin {
            anchor: obj,
            offset: normal3 * 0.25 + Vector3::new(0.0, 0.0, 0.12),
            dist: 0.10,
        }],
        timeout: gains.phase_timeout,
    });

    // Stage the base beside the door (hinge side) with a tucked arm, then
    // push the door closed along the reverse arc.
    let (sx, sy, stheta) = fridge.close_stage;
    phases.push(SkillPhase {
        name: "stage-close".into(),
        goals: st(vec![
            PhaseGoal::Base { x: sx, y: sy, theta: stheta, kappa: gains.kappa_base },
            PhaseGoal::Joints { config: unfold_config(), kappa: gains.kappa_posture },
        ]),
        gripper: None,
        termination: vec![TermRule::BaseWithin { x: sx, y: sy, theta: stheta, dist: 0.3, angle: 0.5 }],
        timeout: 30.0,
    });
    let close_steps = 6;
    for k in 1..=close_steps {
        let angle = fridge.open_angle * (1.0 - k as f64 / close_steps as f64);
        phases.push(SkillPhase {
            name: format!("push-close-{k}"),
            goals: st(vec![PhaseGoal::EndEffector {
                anchor: Anchor::Fixed(hinge_circle_point(fridge, angle, 0.6 * radius, z)),
                offset: Vector3::zeros(),
                kappa: gains.kappa_reach,
                snapshot: false,
            }]),
            gripper: None,
            termination: vec![TermRule::FridgeAngleAtMost(angle + 0.10)],
            timeout: 6.0,
        });
    }
    phases.push(SkillPhase {
        name: "fold".into(),
        goals: st(vec![PhaseGoal::Joints { config: tuck_config(), kappa: gains.kappa_joint }]),
        gripper: None,
        termination: vec![TermRule::JointsWithin { config: tuck_config(), tol: 0.3 }],
        timeout: gains.phase_timeout,
    });

    SkillProgram::new(SkillKind::PickFromFridge, phases)
}

/// Move: follow the planned path with the arm tucked; terminates inside the
/// position/heading tolerances of the final pose.
pub fn build_move(path: Path, final_pose: (f64, f64, f64), gains: &SkillGains) -> SkillProgram {
    let (x, y, theta) = final_pose;
    let phases = vec![SkillPhase {
        name: "follow-path".into(),
        goals: vec![
            PhaseGoal::FollowPath { path, lookahead: gains.lookahead, kappa: gains.kappa_base },
            PhaseGoal::Joints { config: tuck_config(), kappa: gains.kappa_joint },
        ],
        gripper: None,
        termination: vec![TermRule::BaseWithin {
            x,
            y,
            theta,
            dist: gains.move_dist_tol,
            angle: gains.move_angle_tol,
        }],
        timeout: f64::INFINITY,
    }];
    SkillProgram::new(SkillKind::Move, phases)
}

/// Convenience check used by the Move caller.
pub fn within_move_tolerance(pose: &BaseExtrinsic, target: (f64, f64, f64), gains: &SkillGains) -> bool {
    let dp = ((pose.x - target.0).powi(2) + (pose.y - target.1).powi(2)).sqrt();
    dp <= gains.move_dist_tol && angle_diff(pose.theta, target.2).abs() <= gains.move_angle_tol
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::episode::{generate_episode, TaskKind};
    use crate::sim::SimConfig;
    use approx::assert_relative_eq;

    fn world() -> crate::sim::WorldState {
        generate_episode(TaskKind::TidyHouse, 1).unwrap().build_world(SimConfig::default())
    }

    #[test]
    fn pick_has_five_phases_in_order() {
        let p = build_pick(0, (Vector3::new(0.0, 0.0, 0.15), 0.0), None, &SkillGains::default());
        let names: Vec<&str> = p.phases.iter().map(|ph| ph.name.as_str()).collect();
        assert_eq!(names, vec!["drop-wrong", "unfold", "pre-grasp", "grasp", "retreat", "fold"]);
        // Joint goals bracket the program; the middle is end-effector work.
        assert!(matches!(p.phases[1].goals[0], PhaseGoal::Joints { .. }));
        assert!(matches!(p.phases[5].goals[0], PhaseGoal::Joints { .. }));
        assert!(matches!(p.phases[3].goals[0], PhaseGoal::EndEffector { .. }));
    }

    #[test]
    fn approach_offset_lands_above_target() {
        let w = world();
        let mut p = build_pick(0, (Vector3::new(0.0, 0.0, 0.15), 0.0), None, &SkillGains::default());
        // Fast-forward into the pre-grasp phase.
        p.active = 2;
        let thetas: Vec<f64> = w.chain.links.iter().map(|l| l.theta).collect();
        let tick = p.tick(&w, &thetas, 0.05);
        let goal = tick.ee_goal.expect("pre-grasp sets an end-effector goal");
        let target = w.objects[0].position + Vector3::new(0.0, 0.0, 0.15);
        assert_relative_eq!(goal.n_star[0], target.x, epsilon = 1e-12);
        assert_relative_eq!(goal.n_star[2], target.z, epsilon = 1e-12);
    }

    #[test]
    fn place_mirrors_pick_with_release() {
        let pick = build_pick(0, (Vector3::zeros(), 0.0), None, &SkillGains::default());
        let place = build_place(0, Vector3::new(1.0, 0.0, 0.8), (Vector3::zeros(), 0.0), None, &SkillGains::default());
        assert_eq!(pick.phases.len(), place.phases.len());
        let g_pick = pick.phases[2].gripper.unwrap();
        let g_place = place.phases[2].gripper.unwrap();
        assert!(g_pick.command > 0.0 && g_place.command < 0.0, "gripper sign flips");
    }

    #[test]
    fn gripper_commands_only_in_grasp_release_phases() {
        for p in [
            build_pick(0, (Vector3::zeros(), 0.0), None, &SkillGains::default()),
            build_place(0, Vector3::zeros(), (Vector3::zeros(), 0.0), None, &SkillGains::default()),
        ] {
            for phase in &p.phases {
                let is_grasp_or_release = phase.name == "grasp"
                    || phase.name == "release"
                    || phase.name == "drop-wrong";
                assert_eq!(
                    phase.gripper.is_some(),
                    is_grasp_or_release,
                    "phase {} gripper placement",
                    phase.name
                );
                if let Some(rule) = &phase.gripper {
                    // Sign convention: positive grasps, negative releases.
                    if phase.name == "grasp" {
                        assert!(rule.command > 0.0);
                    } else {
                        assert!(rule.command < 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn predicate_true_at_entry_skips_phase() {
        let w = world();
        // A program whose first phase requires the joints to be at the
        // resting pose, which they already are.
        let gains = SkillGains::default();
        let mut p = SkillProgram::new(
            SkillKind::Pick,
            vec![
                SkillPhase {
                    name: "already-done".into(),
                    goals: vec![PhaseGoal::Joints { config: tuck_config(), kappa: 1.0 }],
                    gripper: None,
                    termination: vec![TermRule::JointsWithin { config: tuck_config(), tol: 0.05 }],
                    timeout: gains.phase_timeout,
                },
                SkillPhase {
                    name: "work".into(),
                    goals: vec![PhaseGoal::Joints { config: unfold_config(), kappa: 1.0 }],
                    gripper: None,
                    termination: vec![TermRule::JointsWithin { config: unfold_config(), tol: 0.05 }],
                    timeout: gains.phase_timeout,
                },
            ],
        );
        let thetas: Vec<f64> = w.chain.links.iter().map(|l| l.theta).collect();
        let tick = p.tick(&w, &thetas, 0.05);
        assert_eq!(tick.active_phase.as_deref(), Some("work"));
    }

    #[test]
    fn timeout_fails_the_skill() {
        let w = world();
        let mut p = SkillProgram::new(
            SkillKind::Pick,
            vec![SkillPhase {
                name: "unreachable".into(),
                goals: vec![PhaseGoal::EndEffector {
                    anchor: Anchor::Fixed(Vector3::new(100.0, 0.0, 0.5)),
                    offset: Vector3::zeros(),
                    kappa: 1.0,
                    snapshot: false,
                }],
                gripper: None,
                termination: vec![TermRule::EeWithin {
                    anchor: Anchor::Fixed(Vector3::new(100.0, 0.0, 0.5)),
                    offset: Vector3::zeros(),
                    dist: 0.05,
                }],
                timeout: 0.5,
            }],
        );
        let thetas: Vec<f64> = w.chain.links.iter().map(|l| l.theta).collect();
        let mut status = SkillStatus::Running;
        for _ in 0..20 {
            status = p.tick(&w, &thetas, 0.05).status;
            if status != SkillStatus::Running {
                break;
            }
        }
        assert_eq!(status, SkillStatus::Failure);
    }

    #[test]
    fn move_within_tolerance_succeeds_immediately() {
        let w = world();
        let path = Path {
            waypoints: vec![(w.base.x, w.base.y)],
            final_heading: w.base.theta,
            cost: 0.0,
        };
        let mut p = build_move(path, (w.base.x + 0.3, w.base.y, w.base.theta), &SkillGains::default());
        let thetas: Vec<f64> = w.chain.links.iter().map(|l| l.theta).collect();
        let tick = p.tick(&w, &thetas, 0.05);
        assert_eq!(tick.status, SkillStatus::Success);
    }

    #[test]
    fn arc_waypoints_sit_on_hinge_circle_equally_spaced() {
        let info = FridgeInfo {
            hinge: Vector2::new(3.2, -1.25),
            closed_dir: Vector2::new(0.0, 1.0),
            width: 0.7,
            handle_height: 0.9,
            current_angle: 0.0,
            partial_angle: 1.2,
            open_angle: 2.2,
            close_stage: (2.4, -1.9, 0.4),
        };
        let p = build_pick_from_fridge(&info, 0, &SkillGains::default());
        let arc_phases: Vec<&SkillPhase> =
            p.phases.iter().filter(|ph| ph.name.starts_with("arc-open")).collect();
        assert_eq!(arc_phases.len(), 8);
        let mut prev_angle = None;
        for (k, ph) in arc_phases.iter().enumerate() {
            let PhaseGoal::EndEffector { anchor: Anchor::Fixed(p), .. } = ph.goals[0] else {
                panic!("arc phases use fixed attractors");
            };
            let rel = Vector2::new(p.x - info.hinge.x, p.y - info.hinge.y);
            assert_relative_eq!(rel.norm(), info.width, epsilon = 1e-9);
            let angle = rel.y.atan2(rel.x);
            if let Some(prev) = prev_angle {
                let expected_step = 1.2 / 8.0;
                assert_relative_eq!(
                    crate::geometry::angle_diff(angle, prev).abs(),
                    expected_step,
                    epsilon = 1e-9
                );
            }
            prev_angle = Some(angle);
            let _ = k;
        }
    }

    #[test]
    fn drawer_program_phase_ordering() {
        let info = DrawerInfo {
            handle_closed: Vector3::new(-2.6, -2.17, 0.58),
            axis: Vector2::new(0.0, 1.0),
            open_target: 0.32,
        };
        let p = build_pick_from_drawer(&info, 0, &SkillGains::default());
        let names: Vec<&str> = p.phases.iter().map(|ph| ph.name.as_str()).collect();
        assert_eq!(
            names,
            vec![
                "unfold",
                "approach-handle",
                "grasp-handle",
                "pull-open",
                "release-handle",
                "clear-above",
                "grasp",
                "lift-out",
                "approach-front",
                "push-close",
                "fold"
            ]
        );
    }
}
