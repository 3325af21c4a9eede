//! Episode executive and benchmark harness: wires the discrete planner,
//! retry layer, skills, continuous controller, mapping and navigation into
//! closed-loop episodes, and aggregates cascading stage metrics.

use nalgebra::{DVector, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;
use std::path::{Path, PathBuf};

use crate::controller::{GoalSpec, RepulsorSpec, WholeBodyModel};
use crate::discrete::{
    DiscreteObservation, Outcome, PlannerAction, PlannerDecision, SubgoalPlanner, OBJ_AT_GOAL,
    OBJ_AT_START, OBJ_IN_INVENTORY, ROBOT_AT_PICK, ROBOT_AT_PLACE, ROBOT_OTHER,
};
use crate::logging::JsonlLog;
use crate::mapping::{ComponentRecord, MixtureMap};
use crate::nav::{self, Cell, OccupancyGrid};
use crate::retry::{ApproachSet, RetryDirective, RetryState};
use crate::scenario::Scenario;
use crate::sim::episode::{generate_episode, Episode, TaskKind};
use crate::sim::{Action10, Container, WorldState};
use crate::skills::{
    build_move, build_pick, build_pick_from_drawer, build_pick_from_fridge, build_place,
    DrawerInfo, FridgeInfo, SkillProgram, SkillStatus,
};

/// Harness configuration for one run.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub task: TaskKind,
    pub episodes: usize,
    pub seeds: Vec<u64>,
    pub scenario: Scenario,
    pub out_dir: PathBuf,
    pub emit_plots: bool,
    pub parallel: bool,
}

impl RunConfig {
    /// Seed of episode `i`: the seed list cycles, shifted each full cycle.
    pub fn episode_seed(&self, i: usize) -> u64 {
        let n = self.seeds.len().max(1);
        let base = self.seeds.get(i % n).copied().unwrap_or(0);
        base.wrapping_add(1000 * (i / n) as u64)
    }
}

/// Result of one episode.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpisodeOutcome {
    pub index: usize,
    pub seed: u64,
    pub stage_flags: Vec<bool>,
    pub sim_time: f64,
    pub ticks: usize,
    pub error: Option<String>,
    /// Decimated base trajectory for plotting.
    pub trajectory: Vec<(f64, f64)>,
    /// Mixture snapshot (first episode only, for the map overlay plot).
    pub map_records: Option<Vec<ComponentRecord>>,
    /// The planned paths taken, for plotting.
    pub paths: Vec<Vec<(f64, f64)>>,
}

/// Aggregated cascading stage completion over a run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageReport {
    pub task: String,
    pub labels: Vec<String>,
    pub completions: Vec<usize>,
    pub episodes: usize,
}

impl StageReport {
    pub fn rates(&self) -> Vec<f64> {
        self.completions.iter().map(|c| *c as f64 / self.episodes.max(1) as f64).collect()
    }

    /// Cascading metrics are non-increasing across stages by construction;
    /// enforced here as a structural check.
    pub fn assert_monotone(&self) {
        for w in self.completions.windows(2) {
            assert!(w[1] <= w[0], "stage completions must be non-increasing: {:?}", self.completions);
        }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("task,stage,completions,episodes,rate\n");
        for (i, label) in self.labels.iter().enumerate() {
            out.push_str(&format!(
                "{},{},{},{},{:.6}\n",
                self.task,
                label,
                self.completions[i],
                self.episodes,
                self.completions[i] as f64 / self.episodes.max(1) as f64
            ));
        }
        out
    }
}

/// Rasterizes the ground-truth obstacle footprints onto a planning grid.
pub fn ground_truth_grid(world: &WorldState, resolution: f64) -> OccupancyGrid {
    let min = world.scene.bounds_min;
    let max = world.scene.bounds_max;
    let width = (((max.x - min.x) / resolution).ceil() as usize).max(1);
    let height = (((max.y - min.y) / resolution).ceil() as usize).max(1);
    let mut grid = OccupancyGrid::new_free(width, height, resolution, (min.x, min.y));
    for iy in 0..height {
        for ix in 0..width {
            let (cx, cy) = grid.cell_center(ix, iy);
            let blocked = world.scene.obstacles.iter().any(|b| {
                b.blocks_disc(cx, cy, resolution * 0.5, 0.02, world.config.base_height)
            });
            if blocked {
                grid.set(ix, iy, Cell::Occupied);
            }
        }
    }
    grid
}

struct Executive<'a> {
    episode: &'a Episode,
    scenario: &'a Scenario,
    world: WorldState,
    model: WholeBodyModel,
    planner: SubgoalPlanner,
    retry: RetryState,
    grid: OccupancyGrid,
    map: Option<MixtureMap>,
    /// Cached per-subgoal standoffs: (pick, place) base poses.
    standoffs: Vec<(Option<(f64, f64, f64)>, Option<(f64, f64, f64)>)>,
    log: JsonlLog,
    tick_count: usize,
    trajectory: Vec<(f64, f64)>,
    paths: Vec<Vec<(f64, f64)>>,
    hold_pose: (f64, f64, f64),
}

impl<'a> Executive<'a> {
    fn new(episode: &'a Episode, scenario: &'a Scenario, log: JsonlLog) -> Self {
        let mut sim_config = scenario.sim.clone();
        sim_config.base_geometry = scenario.robot.base_geometry;
        sim_config.max_joint_rate = scenario.controller.joint_rate_limit;
        let world = episode.build_world(sim_config);

        let mut controller = scenario.controller.clone();
        controller.dt = scenario.controller.dt;
        let mut model = WholeBodyModel::new(
            episode.chain.clone(),
            scenario.robot.base_geometry,
            controller,
        );
        model
            .align_to_observations(&world.observe())
            .expect("episode world matches the model shape");

        // World map: streaming mixture or privileged rasterization.
        let rc = &scenario.runner;
        let (map, grid) = if rc.ground_truth_map {
            (None, ground_truth_grid(&world, rc.grid_resolution))
        } else {
            let mut cfg = scenario.map.clone();
            cfg.bounds_min = [world.scene.bounds_min.x, world.scene.bounds_min.y, 0.0];
            cfg.bounds_max = [world.scene.bounds_max.x, world.scene.bounds_max.y, 2.2];
            cfg.seed = episode.seed;
            let map = MixtureMap::new(&cfg);
            let points = world.sample_surface_points(rc.mapping_points, episode.seed ^ 0x5eed);
            let map = if points.is_empty() { map } else { map.cavi_update(&points) };
            let grid = map.occupancy_grid(
                (world.scene.bounds_min.x, world.scene.bounds_min.y),
                (world.scene.bounds_max.x, world.scene.bounds_max.y),
                rc.grid_resolution,
                &cfg,
            );
            (Some(map), grid)
        };

        let planner = SubgoalPlanner::new(episode.subgoals.len(), rc.model_p_succ, rc.horizon);
        let retry = RetryState::new(ApproachSet::default_grasp_set(), rc.retry_budget);
        let standoffs = vec![(None, None); episode.subgoals.len()];
        let hold_pose = (world.base.x, world.base.y, world.base.theta);

        Self {
            episode,
            scenario,
            world,
            model,
            planner,
            retry,
            grid,
            map,
            standoffs,
            log,
            tick_count: 0,
            trajectory: Vec::new(),
            paths: Vec::new(),
            hold_pose,
        }
    }

    fn time_cap(&self) -> f64 {
        self.scenario.runner.episode_time_limit
    }

    /// Free standoff pose near a manipulation target: candidates on rings
    /// around the target, free after inflation, nearest to the robot.
    fn find_standoff(&self, target: Vector3<f64>) -> Option<(f64, f64, f64)> {
        let inflated = self.grid.inflated(self.scenario.runner.inflation);
        let mut best: Option<((f64, f64, f64), f64)> = None;
        for radius in [0.5, 0.58, 0.68, 0.8] {
            for k in 0..24 {
                let ang = 2.0 * std::f64::consts::PI * k as f64 / 24.0;
                let x = target.x + radius * ang.cos();
                let y = target.y + radius * ang.sin();
                let Some((ix, iy)) = inflated.cell_of(x, y) else { continue };
                if !inflated.is_free(ix, iy) {
                    continue;
                }
                if self.world.base_collides(x, y) {
                    continue;
                }
                let face = (target.y - y).atan2(target.x - x);
                let d = ((x - self.world.base.x).powi(2) + (y - self.world.base.y).powi(2)).sqrt();
                if best.map_or(true, |(_, bd)| d < bd) {
                    best = Some(((x, y, face), d));
                }
            }
            if best.is_some() {
                break;
            }
        }
        best.map(|(p, _)| p)
    }

    /// Standoff for the current subgoal's pick or place side, cached.
    fn standoff_for(&mut self, pick: bool) -> Option<(f64, f64, f64)> {
        let idx = self.planner.subgoal_index.min(self.episode.subgoals.len() - 1);
        let cached = if pick { self.standoffs[idx].0 } else { self.standoffs[idx].1 };
        if let Some(p) = cached {
            return Some(p);
        }
        let sg = &self.episode.subgoals[idx];
        let target = if pick {
            match sg.pick_container {
                Some(Container::Drawer) => {
                    self.world.drawer.as_ref().map(|d| d.handle_closed).unwrap_or(sg.start)
                }
                // Stand off from the shelf position rather than the handle,
                // which sits at the swinging door edge.
                Some(Container::Fridge) => sg.start,
                None => self.world.objects[sg.object].position,
            }
        } else {
            sg.goal
        };
        let found = self.find_standoff(target);
        if pick {
            self.standoffs[idx].0 = found;
        } else {
            self.standoffs[idx].1 = found;
        }
        found
    }

    /// Runs one built skill to a terminal status or the episode time cap.
    /// When `objective` holds, trailing phases get a short grace period and
    /// the skill then counts as done.
    fn run_skill_with(
        &mut self,
        skill: &mut SkillProgram,
        objective: Option<&dyn Fn(&WorldState) -> bool>,
    ) -> SkillStatus {
        let dt = self.scenario.controller.dt;
        let thetas: Vec<f64> = self.episode.chain.links.iter().map(|l| l.theta).collect();
        self.hold_pose = (self.world.base.x, self.world.base.y, self.world.base.theta);
        let mut achieved_since: Option<f64> = None;
        loop {
            if self.world.time >= self.time_cap() {
                return SkillStatus::Failure;
            }
            if let Some(check) = objective {
                match achieved_since {
                    None if check(&self.world) => achieved_since = Some(self.world.time),
                    Some(t0) if self.world.time - t0 > 6.0 => return SkillStatus::Success,
                    _ => {}
                }
            }
            let tick = skill.tick(&self.world, &thetas, dt);
            if tick.status != SkillStatus::Running {
                return tick.status;
            }
            SkillProgram::apply_goals(&tick, &mut self.model);
            if tick.base_goals.is_empty() {
                if tick.ee_goal.is_some() {
                    // Leave the base free: the whole-body coupling closes
                    // reach gaps the Move tolerance leaves open.
                    self.hold_pose = (self.world.base.x, self.world.base.y, self.world.base.theta);
                } else {
                    // Joint-only phases hold the base still.
                    self.model.set_base_goals(vec![GoalSpec::base_pose(
                        self.hold_pose.0,
                        self.hold_pose.1,
                        self.hold_pose.2,
                        2.0,
                    )]);
                }
            }
            if self.tick_count % self.scenario.runner.repulsor_every == 0 {
                let avoid_near = tick.ee_goal.as_ref().map(|g| {
                    Vector3::new(g.n_star[0], g.n_star[1], g.n_star[2])
                });
                self.refresh_repulsors(avoid_near);
            }

            let obs = self.world.observe();
            let cmd = match self.model.step(&obs, tick.gripper) {
                Ok(c) => c,
                Err(_) => return SkillStatus::Failure,
            };
            let action = Action10 {
                base_v: cmd.base_v,
                base_omega: cmd.base_omega,
                joint_rates: cmd.joint_rates,
                gripper: cmd.gripper,
            };
            self.world.step(&action, dt);
            self.episode.update_stage_latches(&mut self.world);

            self.tick_count += 1;
            if self.tick_count % self.scenario.runner.log_every == 0 {
                let energies = self
                    .model
                    .free_energy_breakdown(&self.world.observe())
                    .map(|es| es.iter().map(|e| e.total()).collect::<Vec<f64>>())
                    .unwrap_or_default();
                let ee = self.world.ee_pose().t;
                self.log.record(
                    "tick",
                    self.world.time,
                    &json!({
                        "base": [self.world.base.x, self.world.base.y, self.world.base.theta],
                        "ee": [ee.x, ee.y, ee.z],
                        "joints": self.world.joints.as_slice(),
                        "gripper_held": self.world.holding(),
                        "phase": tick.active_phase,
                        "free_energy": energies,
                    }),
                );
                self.trajectory.push((self.world.base.x, self.world.base.y));
            }
        }
    }

    /// Repulsors from the map (or ground truth) for every arm level, skipping
    /// sources near the active end-effector target.
    fn refresh_repulsors(&mut self, avoid_near: Option<Vector3<f64>>) {
        let rc = &self.scenario.runner;
        let obs = self.world.observe();
        for lv in 0..self.model.num_arm_levels() {
            let link = obs.link_positions[lv];
            let source = match &self.map {
                Some(map) => map
                    .nearest_obstacles(link, rc.repulsor_gamma, self.scenario.map.min_points)
                    .into_iter()
                    .next()
                    .map(|h| h.position),
                None => self
                    .world
                    .nearest_obstacle_point(link)
                    .filter(|(_, d)| *d <= rc.repulsor_gamma)
                    .map(|(p, _)| p),
            };
            let mut reps = match source {
                Some(p) => {
                    let skip = avoid_near.map_or(false, |t| (p - t).norm() < 1.2);
                    if skip {
                        Vec::new()
                    } else {
                        vec![RepulsorSpec::obstacle(
                            DVector::from_column_slice(p.as_slice()),
                            rc.repulsor_gamma,
                            rc.repulsor_gain,
                        )]
                    }
                }
                None => Vec::new(),
            };
            // Joint-limit avoidance, in chain angle coordinates.
            let (lo, hi) = self.episode.joint_limits[lv];
            let theta0 = self.episode.chain.links[lv].theta;
            reps.push(RepulsorSpec::joint_limit(theta0 + lo, -1.0, 0.2, 0.3));
            reps.push(RepulsorSpec::joint_limit(theta0 + hi, 1.0, 0.2, 0.3));
            self.model.set_arm_level_repulsors(lv, reps);
        }
    }

    /// Builds the Move skill toward the current subgoal's pick or place
    /// standoff, planning on the inflated grid.
    fn build_move_skill(&mut self, pick: bool) -> Option<SkillProgram> {
        let standoff = self.standoff_for(pick)?;
        let path = nav::plan_with_snap(
            &self.grid,
            (self.world.base.x, self.world.base.y),
            (standoff.0, standoff.1),
            standoff.2,
            self.scenario.runner.inflation,
            0.45,
        )
        .ok()?;
        self.paths.push(path.waypoints.clone());
        self.log.record(
            "plan",
            self.world.time,
            &json!({
                "target": [standoff.0, standoff.1, standoff.2],
                "waypoints": path.waypoints.len(),
                "cost": path.cost,
            }),
        );
        Some(build_move(path, standoff, &self.scenario.skills))
    }

    fn build_manipulation_skill(&mut self, pick: bool) -> SkillProgram {
        let idx = self.planner.subgoal_index.min(self.episode.subgoals.len() - 1);
        let sg = self.episode.subgoals[idx].clone();
        let gains = self.scenario.skills;
        let approach = {
            let a = self.retry.active();
            (a.offset, a.yaw)
        };
        let station = self.standoff_for(pick);
        if pick {
            match sg.pick_container {
                Some(Container::Drawer) => {
                    let d = self.world.drawer.as_ref().expect("drawer present");
                    build_pick_from_drawer(
                        &DrawerInfo {
                            handle_closed: d.handle_closed,
                            axis: d.axis,
                            open_target: d.max_extension - 0.03,
                        },
                        sg.object,
                        &gains,
                    )
                }
                Some(Container::Fridge)
                    if self
                        .world
                        .fridge
                        .as_ref()
                        .map_or(false, |f| f.angle < self.world.config.fridge_open_threshold) =>
                {
                    let f = self.world.fridge.as_ref().expect("fridge present");
                    // Stage the closing push from beside the hinge.
                    let hinge_out = Vector3::new(
                        f.hinge.x - 0.85,
                        f.hinge.y - 0.55,
                        0.0,
                    );
                    let face = (f.hinge.y - hinge_out.y).atan2(f.hinge.x - hinge_out.x);
                    build_pick_from_fridge(
                        &FridgeInfo {
                            hinge: f.hinge,
                            closed_dir: f.closed_dir,
                            width: f.width,
                            handle_height: f.handle_height,
                            current_angle: f.angle,
                            partial_angle: 1.3,
                            open_angle: 2.2,
                            close_stage: (hinge_out.x, hinge_out.y, face),
                        },
                        sg.object,
                        &gains,
                    )
                }
                _ => build_pick(sg.object, approach, station, &gains),
            }
        } else {
            build_place(sg.object, sg.goal, approach, station, &gains)
        }
    }

    /// Extracts the discrete observation for the planner after a skill.
    fn extract_observation(&mut self, outcome: Outcome) -> DiscreteObservation {
        let idx = self.planner.subgoal_index.min(self.episode.subgoals.len() - 1);
        let sg = self.episode.subgoals[idx].clone();
        let holding = self.world.holding() == Some(sg.object);
        let obj_pos = self.world.objects[sg.object].position;
        let goal = sg.goal;
        let tol = self.episode.place_tolerance;
        let pick_sd = self.standoff_for(true);
        let place_sd = self.standoff_for(false);
        let (bx, by) = (self.world.base.x, self.world.base.y);
        let near = |p: Option<(f64, f64, f64)>| {
            p.map_or(false, |(x, y, _)| ((bx - x).powi(2) + (by - y).powi(2)).sqrt() <= 0.9)
        };
        let robot_at = if near(pick_sd) {
            Some(ROBOT_AT_PICK)
        } else if near(place_sd) {
            Some(ROBOT_AT_PLACE)
        } else {
            Some(ROBOT_OTHER)
        };
        let object_seen = if holding {
            OBJ_IN_INVENTORY
        } else if (obj_pos - goal).norm() <= tol {
            OBJ_AT_GOAL
        } else {
            OBJ_AT_START
        };
        DiscreteObservation { holding, robot_at, object_seen, skill_outcome: outcome }
    }

    /// The main episode loop.
    fn run(&mut self) -> (Vec<bool>, Option<String>) {
        let mut error = None;
        let mut move_failures = 0u32;
        let max_guard = 400; // decision-loop guard against livelock
        for _guard in 0..max_guard {
            if self.world.time >= self.time_cap() {
                break;
            }
            let decision = match self.planner.decide() {
                Ok(d) => d,
                Err(e) => {
                    error = Some(e.to_string());
                    break;
                }
            };
            self.log.record(
                "plan_decision",
                self.world.time,
                &json!({
                    "subgoal": self.planner.subgoal_index,
                    "decision": format!("{decision:?}"),
                    "belief_robot": self.planner.belief[0].as_slice(),
                    "belief_object": self.planner.belief[1].as_slice(),
                }),
            );
            match decision {
                PlannerDecision::TaskComplete => break,
                PlannerDecision::SubgoalComplete => {
                    self.retry.reset_for_subtask();
                    move_failures = 0;
                    continue;
                }
                PlannerDecision::Execute(action) => {
                    let outcome = self.execute(action, &mut move_failures);
                    let obs = self.extract_observation(outcome);
                    if let Err(e) = self.planner.observe(action, obs) {
                        error = Some(e.to_string());
                        break;
                    }
                }
            }
        }
        let flags: Vec<bool> = (0..self.episode.stages.len())
            .map(|i| self.episode.evaluate_stage(&self.world, i))
            .collect();
        self.log.record(
            "stages",
            self.world.time,
            &json!({
                "flags": flags,
                "labels": self.episode.stages.iter().map(|s| s.label.clone()).collect::<Vec<_>>(),
            }),
        );
        self.log.flush();
        (flags, error)
    }

    /// Executes one abstract planner action, including the retry loop for
    /// manipulation skills.
    fn execute(&mut self, action: PlannerAction, move_failures: &mut u32) -> Outcome {
        match action {
            PlannerAction::MoveToPick | PlannerAction::MoveToPlace => {
                let pick = action == PlannerAction::MoveToPick;
                // The arm-to-base coupling exists to extend reach during
                // manipulation; while driving with a tucked arm it only
                // brakes the base against motion-induced arm lag.
                self.model.config.kappa_arm = 0.0;
                match self.build_move_skill(pick) {
                    Some(mut skill) => {
                        let status = self.run_skill_with(&mut skill, None);
                        self.log_skill("move", status, &skill);
                        if status == SkillStatus::Success {
                            *move_failures = 0;
                            Outcome::Success
                        } else {
                            *move_failures += 1;
                            if *move_failures >= self.scenario.runner.move_attempts {
                                self.planner.skip_subgoal();
                                self.retry.reset_for_subtask();
                                *move_failures = 0;
                            }
                            Outcome::Failure
                        }
                    }
                    None => {
                        *move_failures += 1;
                        if *move_failures >= self.scenario.runner.move_attempts {
                            self.planner.skip_subgoal();
                            self.retry.reset_for_subtask();
                            *move_failures = 0;
                        }
                        Outcome::Failure
                    }
                }
            }
            PlannerAction::Pick | PlannerAction::Place => {
                let pick = action == PlannerAction::Pick;
                self.model.config.kappa_arm = self.scenario.controller.kappa_arm;
                loop {
                    let mut skill = self.build_manipulation_skill(pick);
                    let idx =
                        self.planner.subgoal_index.min(self.episode.subgoals.len() - 1);
                    let sg = self.episode.subgoals[idx].clone();
                    let tol = self.episode.place_tolerance;
                    let objective: Box<dyn Fn(&WorldState) -> bool> = if pick {
                        let obj = sg.object;
                        Box::new(move |w: &WorldState| w.holding() == Some(obj))
                    } else {
                        let obj = sg.object;
                        let goal = sg.goal;
                        Box::new(move |w: &WorldState| {
                            w.holding() != Some(obj)
                                && (w.objects[obj].position - goal).norm() <= tol
                        })
                    };
                    let status = self.run_skill_with(&mut skill, Some(objective.as_ref()));
                    let achieved = objective(&self.world);
                    // The manipulation objective is what counts; a timed-out
                    // trailing fold/retreat does not undo a secured grasp or
                    // placement.
                    let success = achieved;
                    self.log_skill(if pick { "pick" } else { "place" }, status, &skill);
                    if success {
                        self.retry.observe_outcome(true);
                        self.log.record(
                            "retry",
                            self.world.time,
                            &json!({"approach": self.retry.active_index, "outcome": "success"}),
                        );
                        return Outcome::Success;
                    }
                    if self.scenario.runner.disable_retry {
                        return Outcome::Failure;
                    }
                    if self.world.time >= self.time_cap() {
                        return Outcome::Failure;
                    }
                    match self.retry.observe_outcome(false) {
                        RetryDirective::Switched => {
                            self.log.record(
                                "retry",
                                self.world.time,
                                &json!({"approach": self.retry.active_index, "outcome": "failure"}),
                            );
                            continue;
                        }
                        RetryDirective::AbortSubtask | RetryDirective::Retain => {
                            self.log.record(
                                "retry",
                                self.world.time,
                                &json!({"approach": self.retry.active_index, "outcome": "abort"}),
                            );
                            self.planner.skip_subgoal();
                            self.retry.reset_for_subtask();
                            return Outcome::Failure;
                        }
                    }
                }
            }
        }
    }

    fn log_skill(&mut self, kind: &str, status: SkillStatus, skill: &SkillProgram) {
        let ee = self.world.ee_pose().t;
        self.log.record(
            "skill",
            self.world.time,
            &json!({
                "kind": kind,
                "status": format!("{status:?}"),
                "phase": skill.last_phase(),
                "ee": [ee.x, ee.y, ee.z],
                "held": self.world.holding(),
            }),
        );
    }
}

/// Runs one episode against a scenario, writing its JSONL trace to `log`.
pub fn run_episode(
    episode: &Episode,
    scenario: &Scenario,
    log: JsonlLog,
    keep_map_snapshot: bool,
) -> EpisodeOutcome {
    let mut exec = Executive::new(episode, scenario, log);
    let (flags, error) = exec.run();
    let map_records = if keep_map_snapshot {
        exec.map.as_ref().map(|m| m.snapshot(scenario.map.min_points))
    } else {
        None
    };
    EpisodeOutcome {
        index: 0,
        seed: episode.seed,
        stage_flags: flags,
        sim_time: exec.world.time,
        ticks: exec.tick_count,
        error,
        trajectory: exec.trajectory,
        map_records,
        paths: exec.paths,
    }
}

/// Runs a full benchmark: `episodes` episodes of `task`, aggregated into a
/// cascading stage report; writes JSONL traces, the metrics CSV, a run
/// summary, and optional plot data under `out_dir`.
pub fn run(config: &RunConfig) -> std::io::Result<(StageReport, Vec<EpisodeOutcome>)> {
    std::fs::create_dir_all(&config.out_dir)?;
    let indices: Vec<usize> = (0..config.episodes).collect();

    let run_one = |i: &usize| -> EpisodeOutcome {
        let i = *i;
        let seed = config.episode_seed(i);
        let episode = match generate_episode(config.task, seed) {
            Ok(e) => e,
            Err(e) => {
                return EpisodeOutcome {
                    index: i,
                    seed,
                    stage_flags: Vec::new(),
                    sim_time: 0.0,
                    ticks: 0,
                    error: Some(e.to_string()),
                    trajectory: Vec::new(),
                    map_records: None,
                    paths: Vec::new(),
                }
            }
        };
        let log_path = config
            .out_dir
            .join(format!("episode_{}_{:04}_{}.jsonl", config.task.name(), i, seed));
        let log = JsonlLog::create(&log_path).unwrap_or_else(|_| JsonlLog::sink());
        let mut outcome = run_episode(&episode, &config.scenario, log, i == 0);
        outcome.index = i;
        outcome
    };

    let mut outcomes: Vec<EpisodeOutcome> = if config.parallel {
        indices.par_iter().map(run_one).collect()
    } else {
        indices.iter().map(run_one).collect()
    };
    outcomes.sort_by_key(|o| o.index);

    // Aggregate; episodes that failed to generate count as all-stage failures.
    let labels: Vec<String> = generate_episode(config.task, config.episode_seed(0))
        .map(|e| e.stages.iter().map(|s| s.label.clone()).collect())
        .unwrap_or_default();
    let mut completions = vec![0usize; labels.len()];
    for o in &outcomes {
        for (i, flag) in o.stage_flags.iter().enumerate() {
            if *flag && i < completions.len() {
                completions[i] += 1;
            }
        }
    }
    let report = StageReport {
        task: config.task.name().to_string(),
        labels,
        completions,
        episodes: config.episodes,
    };
    report.assert_monotone();

    std::fs::write(config.out_dir.join("metrics.csv"), report.to_csv())?;
    let summary = json!({
        "task": report.task,
        "episodes": report.episodes,
        "rates": report.rates(),
        "errors": outcomes.iter().filter(|o| o.error.is_some()).count(),
        "mean_sim_time": outcomes.iter().map(|o| o.sim_time).sum::<f64>()
            / outcomes.len().max(1) as f64,
    });
    std::fs::write(
        config.out_dir.join("run_summary.json"),
        serde_json::to_string_pretty(&summary)?,
    )?;

    if config.emit_plots {
        crate::plots::emit_plots(config, &report, &outcomes)?;
    }

    Ok((report, outcomes))
}

/// Convenience wrapper used by tests: single episode, in-memory log sink.
pub fn run_episode_quiet(task: TaskKind, seed: u64, scenario: &Scenario) -> EpisodeOutcome {
    let episode = generate_episode(task, seed).expect("episode generates");
    run_episode(&episode, scenario, JsonlLog::sink(), false)
}

/// Writes `grid` (for debugging) as PGM-style text.
pub fn dump_grid(grid: &OccupancyGrid, path: &Path) -> std::io::Result<()> {
    std::fs::write(path, grid.to_text())
}
