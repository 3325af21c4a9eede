//! Deterministic kinematic world: differential-drive base, 7-DoF arm,
//! abstract parallel-jaw gripper, articulated drawer and fridge door, and
//! synthetic surface sampling for the mapping module.
//!
//! All bodies are axis-aligned at desk scale. The base is a disc whose motion
//! is blocked along penetration normals (kinematic stop with wall sliding);
//! the arm is purely kinematic. Grasping snaps the nearest attachable thing
//! within 15 cm on a positive gripper command and releases on a negative one.
//! Articulated parts move only through deliberate interaction: pulls require
//! an attached handle grasp, pushes require end-effector contact moving in
//! the closing/opening direction.

pub mod episode;

pub use episode::{generate_episode, Episode, GenerationError, StageSpec, TaskKind};

use nalgebra::{DVector, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::base::{wheel_rates_from_velocity, BaseExtrinsic, BaseGeometry, BaseIntrinsic};
use crate::controller::Observations;
use crate::geometry::{KinematicChain, Pose, UnitQuaternion};

/// The 10-DoF continuous action: base twist, seven joint rates, gripper.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Action10 {
    pub base_v: f64,
    pub base_omega: f64,
    pub joint_rates: DVector<f64>,
    pub gripper: f64,
}

impl Action10 {
    pub fn zero(dof: usize) -> Self {
        Self { base_v: 0.0, base_omega: 0.0, joint_rates: DVector::zeros(dof), gripper: 0.0 }
    }
}

/// Axis-aligned box obstacle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxObstacle {
    pub center: Vector3<f64>,
    pub half: Vector3<f64>,
    pub color: [f64; 3],
}

impl BoxObstacle {
    pub fn new(center: Vector3<f64>, half: Vector3<f64>, color: [f64; 3]) -> Self {
        Self { center, half, color }
    }

    /// Signed distance from a point to the box surface (negative inside).
    pub fn signed_distance(&self, p: Vector3<f64>) -> f64 {
        let d = (p - self.center).abs() - self.half;
        let outside = Vector3::new(d.x.max(0.0), d.y.max(0.0), d.z.max(0.0));
        let inside = d.x.max(d.y).max(d.z).min(0.0);
        outside.norm() + inside
    }

    /// Closest point on the box surface to `p`.
    pub fn closest_surface_point(&self, p: Vector3<f64>) -> Vector3<f64> {
        let rel = p - self.center;
        let clamped = Vector3::new(
            rel.x.clamp(-self.half.x, self.half.x),
            rel.y.clamp(-self.half.y, self.half.y),
            rel.z.clamp(-self.half.z, self.half.z),
        );
        if clamped != rel {
            return self.center + clamped;
        }
        // Inside: project to the nearest face.
        let gaps = [
            (self.half.x - rel.x.abs(), 0),
            (self.half.y - rel.y.abs(), 1),
            (self.half.z - rel.z.abs(), 2),
        ];
        let (_, axis) = gaps.iter().fold((f64::INFINITY, 0usize), |acc, &(g, a)| {
            if g < acc.0 {
                (g, a)
            } else {
                acc
            }
        });
        let mut out = rel;
        out[axis] = self.half[axis] * rel[axis].signum().max(-1.0).min(1.0);
        if rel[axis] == 0.0 {
            out[axis] = self.half[axis];
        }
        self.center + out
    }

    /// Whether a disc at `(x, y)` with radius `r` overlaps the box footprint,
    /// for bodies overlapping the height band `[z0, z1]`.
    pub fn blocks_disc(&self, x: f64, y: f64, r: f64, z0: f64, z1: f64) -> bool {
        if self.center.z + self.half.z < z0 || self.center.z - self.half.z > z1 {
            return false;
        }
        let dx = (x - self.center.x).abs() - self.half.x;
        let dy = (y - self.center.y).abs() - self.half.y;
        let ox = dx.max(0.0);
        let oy = dy.max(0.0);
        (ox * ox + oy * oy).sqrt() < r && dx < r && dy < r
    }

    fn face_areas(&self) -> [f64; 6] {
        let (hx, hy, hz) = (self.half.x, self.half.y, self.half.z);
        let ax = 4.0 * hy * hz;
        let ay = 4.0 * hx * hz;
        let az = 4.0 * hx * hy;
        [ax, ax, ay, ay, az, az]
    }

    fn sample_face_point<R: Rng>(&self, face: usize, rng: &mut R) -> Vector3<f64> {
        let (hx, hy, hz) = (self.half.x, self.half.y, self.half.z);
        let (u, v) = (rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
        let local = match face {
            0 => Vector3::new(hx, u * hy, v * hz),
            1 => Vector3::new(-hx, u * hy, v * hz),
            2 => Vector3::new(u * hx, hy, v * hz),
            3 => Vector3::new(u * hx, -hy, v * hz),
            4 => Vector3::new(u * hx, v * hy, hz),
            _ => Vector3::new(u * hx, v * hy, -hz),
        };
        self.center + local
    }
}

/// A sliding drawer in a chest body, opening along a horizontal unit axis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Drawer {
    pub body: BoxObstacle,
    /// Outward (opening) direction, unit, planar.
    pub axis: Vector2<f64>,
    pub extension: f64,
    pub max_extension: f64,
    /// Handle position at zero extension.
    pub handle_closed: Vector3<f64>,
    /// Anchor of contained objects at zero extension.
    pub inner_anchor: Vector3<f64>,
}

impl Drawer {
    pub fn handle_position(&self) -> Vector3<f64> {
        self.handle_closed + Vector3::new(self.axis.x, self.axis.y, 0.0) * self.extension
    }

    pub fn inner_position(&self) -> Vector3<f64> {
        self.inner_anchor + Vector3::new(self.axis.x, self.axis.y, 0.0) * self.extension
    }
}

/// A revolute fridge door on a vertical hinge. Angle 0 is closed; positive
/// angles swing the door outward.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FridgeDoor {
    pub body: BoxObstacle,
    /// Hinge position (vertical line through this xy).
    pub hinge: Vector2<f64>,
    /// Planar direction from the hinge along the closed door face, unit.
    pub closed_dir: Vector2<f64>,
    /// Door panel width from hinge to outer edge, meters.
    pub width: f64,
    pub angle: f64,
    pub max_angle: f64,
    /// Height of the handle on the outer door edge.
    pub handle_height: f64,
    /// Shelf height for contained objects.
    pub shelf_z: f64,
}

impl FridgeDoor {
    fn edge_dir(&self) -> Vector2<f64> {
        // Closed direction rotated by the current angle.
        let (s, c) = self.angle.sin_cos();
        Vector2::new(
            c * self.closed_dir.x - s * self.closed_dir.y,
            s * self.closed_dir.x + c * self.closed_dir.y,
        )
    }

    /// Handle position on the outer edge of the door panel.
    pub fn handle_position(&self) -> Vector3<f64> {
        let e = self.edge_dir() * self.width;
        Vector3::new(self.hinge.x + e.x, self.hinge.y + e.y, self.handle_height)
    }

    /// Believed-door tangential direction (increasing angle) at the handle.
    pub fn open_tangent(&self) -> Vector2<f64> {
        let e = self.edge_dir();
        Vector2::new(-e.y, e.x)
    }
}

/// What the gripper is attached to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Attachment {
    Object(usize),
    DrawerHandle,
    FridgeHandle,
}

/// A free rigid object, modeled as a small sphere.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub name: String,
    pub position: Vector3<f64>,
    pub radius: f64,
    pub color: [f64; 3],
    /// Container the object rides in until first picked.
    pub container: Option<Container>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Container {
    Drawer,
    Fridge,
}

/// Static scene: room bounds, walls/furniture/clutter boxes, annotated
/// support surfaces.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub bounds_min: Vector2<f64>,
    pub bounds_max: Vector2<f64>,
    pub obstacles: Vec<BoxObstacle>,
    pub surfaces: Vec<SupportSurface>,
}

/// A horizontal rectangle objects can rest on.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SupportSurface {
    pub center: Vector2<f64>,
    pub half: Vector2<f64>,
    pub z: f64,
}

impl SupportSurface {
    pub fn contains(&self, p: Vector3<f64>, tol: f64) -> bool {
        (p.x - self.center.x).abs() <= self.half.x + tol
            && (p.y - self.center.y).abs() <= self.half.y + tol
            && (p.z - self.z).abs() <= 0.12
    }
}

/// Simulator tuning shared across episodes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub base_geometry: BaseGeometry,
    /// Base body disc radius, meters.
    pub base_radius: f64,
    /// Height band of the base body for footprint collision.
    pub base_height: f64,
    /// Abstract grasp snap radius (m).
    pub grasp_radius: f64,
    /// Contact radius for pushing articulated parts.
    pub contact_radius: f64,
    /// Drawer extension below which contained objects cannot be grasped.
    pub drawer_open_threshold: f64,
    /// Fridge angle below which contained objects cannot be grasped.
    pub fridge_open_threshold: f64,
    pub max_base_speed: f64,
    pub max_base_spin: f64,
    pub max_joint_rate: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            base_geometry: BaseGeometry::default(),
            base_radius: 0.25,
            base_height: 0.4,
            grasp_radius: 0.15,
            contact_radius: 0.10,
            drawer_open_threshold: 0.15,
            fridge_open_threshold: 0.9,
            max_base_speed: 0.8,
            max_base_spin: 2.0,
            max_joint_rate: 1.8,
        }
    }
}

/// Full mutable world state for one episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldState {
    pub base: BaseExtrinsic,
    pub wheels: BaseIntrinsic,
    pub joints: DVector<f64>,
    pub joint_rates: DVector<f64>,
    pub wheel_rates: Vector2<f64>,
    pub held: Option<(Attachment, Vector3<f64>)>,
    pub objects: Vec<SceneObject>,
    pub drawer: Option<Drawer>,
    pub fridge: Option<FridgeDoor>,
    pub scene: Scene,
    pub chain: KinematicChain,
    pub joint_limits: Vec<(f64, f64)>,
    pub config: SimConfig,
    pub time: f64,
    /// Latched per-stage achievement flags, updated by the runner.
    pub stage_latch: Vec<bool>,
}

impl WorldState {
    pub fn new(
        scene: Scene,
        objects: Vec<SceneObject>,
        drawer: Option<Drawer>,
        fridge: Option<FridgeDoor>,
        chain: KinematicChain,
        joint_limits: Vec<(f64, f64)>,
        spawn: BaseExtrinsic,
        resting_joints: DVector<f64>,
        config: SimConfig,
        num_stages: usize,
    ) -> Self {
        let dof = chain.dof();
        assert_eq!(resting_joints.len(), dof);
        assert_eq!(joint_limits.len(), dof);
        Self {
            base: spawn,
            wheels: BaseIntrinsic::default(),
            joints: resting_joints,
            joint_rates: DVector::zeros(dof),
            wheel_rates: Vector2::zeros(),
            held: None,
            objects,
            drawer,
            fridge,
            scene,
            chain,
            joint_limits,
            config,
            time: 0.0,
            stage_latch: vec![false; num_stages],
        }
    }

    /// World pose of the chain root (base pose lifted, then the mount).
    pub fn root_pose(&self) -> Pose {
        let lifted = Pose::new(
            Vector3::new(self.base.x, self.base.y, 0.0),
            UnitQuaternion::from_yaw(self.base.theta),
        );
        lifted.compose(&self.chain.base_pose)
    }

    /// World poses of every arm link via the homogeneous-composition route.
    pub fn link_poses(&self) -> Vec<Pose> {
        let mut chain = self.chain.clone();
        chain.base_pose = self.root_pose();
        chain.forward(self.joints.as_slice())
    }

    /// End-effector world pose.
    pub fn ee_pose(&self) -> Pose {
        *self.link_poses().last().expect("nonempty chain")
    }

    /// Sensor snapshot in the controller's conventions (DH joint angles).
    pub fn observe(&self) -> Observations {
        let poses = self.link_poses();
        Observations {
            wheel_angles: Vector2::new(self.wheels.phi_r, self.wheels.phi_l),
            wheel_rates: self.wheel_rates,
            base_pose: Vector3::new(self.base.x, self.base.y, self.base.theta),
            joint_angles: DVector::from_iterator(
                self.joints.len(),
                self.joints.iter().zip(&self.chain.links).map(|(q, l)| l.theta + q),
            ),
            joint_rates: self.joint_rates.clone(),
            link_positions: poses.iter().map(|p| p.t).collect(),
        }
    }

    fn clamp_action(&self, action: &Action10) -> Action10 {
        let c = &self.config;
        Action10 {
            base_v: action.base_v.clamp(-c.max_base_speed, c.max_base_speed),
            base_omega: action.base_omega.clamp(-c.max_base_spin, c.max_base_spin),
            joint_rates: action
                .joint_rates
                .map(|r| r.clamp(-c.max_joint_rate, c.max_joint_rate)),
            gripper: action.gripper,
        }
    }

    /// Whether the base disc collides at `(x, y)`.
    pub fn base_collides(&self, x: f64, y: f64) -> bool {
        let c = &self.config;
        if x - c.base_radius < self.scene.bounds_min.x
            || y - c.base_radius < self.scene.bounds_min.y
            || x + c.base_radius > self.scene.bounds_max.x
            || y + c.base_radius > self.scene.bounds_max.y
        {
            return true;
        }
        let footprint_blockers = self.footprint_obstacles();
        footprint_blockers
            .iter()
            .any(|b| b.blocks_disc(x, y, c.base_radius, 0.02, c.base_height))
    }

    /// Obstacles relevant for base footprint checks, including the drawer's
    /// extended volume.
    fn footprint_obstacles(&self) -> Vec<BoxObstacle> {
        let mut out = self.scene.obstacles.clone();
        if let Some(d) = &self.drawer {
            if d.extension > 0.0 {
                let dir = Vector3::new(d.axis.x, d.axis.y, 0.0);
                let mut ext = d.body;
                ext.center += dir * (d.body.half.xy().dot(&d.axis).abs() + d.extension / 2.0);
                ext.half = Vector3::new(
                    d.body.half.x.min(0.25),
                    d.body.half.y.min(0.25),
                    d.body.half.z,
                );
                out.push(ext);
            }
        }
        out
    }

    /// One Euler tick. Returns the clamped action actually applied.
    pub fn step(&mut self, action: &Action10, dt: f64) -> Action10 {
        assert!(dt > 0.0);
        let ee_before = self.ee_pose();
        let action = self.clamp_action(action);

        // Base motion with kinematic stop and wall sliding.
        let (v, omega) = (action.base_v, action.base_omega);
        let theta = self.base.theta;
        let nx = self.base.x + v * theta.cos() * dt;
        let ny = self.base.y + v * theta.sin() * dt;
        let ntheta = theta + omega * dt;
        let (ax, ay) = if !self.base_collides(nx, ny) {
            (nx, ny)
        } else if !self.base_collides(nx, self.base.y) {
            (nx, self.base.y)
        } else if !self.base_collides(self.base.x, ny) {
            (self.base.x, ny)
        } else {
            (self.base.x, self.base.y)
        };
        self.base = BaseExtrinsic::new(ax, ay, ntheta);

        // Wheel odometry from the applied twist.
        let (rate_r, rate_l) = wheel_rates_from_velocity(v, omega, &self.config.base_geometry);
        self.wheels.phi_r += rate_r * dt;
        self.wheels.phi_l += rate_l * dt;
        self.wheel_rates = Vector2::new(rate_r, rate_l);

        // Arm joints.
        for j in 0..self.joints.len() {
            let q = self.joints[j] + action.joint_rates[j] * dt;
            let (lo, hi) = self.joint_limits[j];
            self.joints[j] = q.clamp(lo, hi);
            self.joint_rates[j] = action.joint_rates[j];
        }

        // Articulation driven by the end-effector.
        let ee_after = self.ee_pose();
        self.update_articulation(ee_before.t, ee_after.t);

        // Held object follows rigidly; contained objects ride their
        // container.
        self.settle_attachments(&ee_after);

        // Gripper command is part of every action.
        self.apply_gripper(action.gripper);

        self.time += dt;
        action
    }

    fn update_articulation(&mut self, ee_before: Vector3<f64>, ee_after: Vector3<f64>) {
        let held = self.held.map(|(a, _)| a);
        let contact = self.config.contact_radius;
        if let Some(d) = &mut self.drawer {
            let axis3 = Vector3::new(d.axis.x, d.axis.y, 0.0);
            if held == Some(Attachment::DrawerHandle) {
                // Pulled or pushed through the grasp: extension tracks the
                // hand's axis projection.
                let rel = ee_after - d.handle_closed;
                d.extension = rel.dot(&axis3).clamp(0.0, d.max_extension);
            } else {
                // Contact push: only inward motion near the handle face.
                let handle = d.handle_position();
                if (ee_before - handle).norm() <= contact {
                    let delta = (ee_after - ee_before).dot(&axis3);
                    if delta < 0.0 {
                        d.extension = (d.extension + delta).max(0.0);
                    }
                }
            }
        }
        if let Some(f) = &mut self.fridge {
            if held == Some(Attachment::FridgeHandle) {
                // Angle follows the hand's azimuth around the hinge.
                let rel = Vector2::new(ee_after.x - f.hinge.x, ee_after.y - f.hinge.y);
                if rel.norm() > 1e-6 {
                    let closed = f.closed_dir;
                    let cross = closed.x * rel.y - closed.y * rel.x;
                    let dot = closed.dot(&rel);
                    f.angle = cross.atan2(dot).clamp(0.0, f.max_angle);
                }
            } else {
                // Contact push anywhere along the door panel near its height.
                let hinge3 = Vector3::new(f.hinge.x, f.hinge.y, 0.0);
                let rel = ee_before - hinge3;
                let planar = Vector2::new(rel.x, rel.y);
                let radius = planar.norm();
                let along = planar.normalize().dot(&f.edge_dir());
                let panel_dist = {
                    // Distance from the door panel (a vertical strip from the
                    // hinge to the edge).
                    let r_clamped = radius.clamp(0.0, f.width);
                    let on_panel = hinge3
                        + Vector3::new(f.edge_dir().x, f.edge_dir().y, 0.0) * r_clamped
                        + Vector3::new(0.0, 0.0, ee_before.z);
                    (ee_before - on_panel).norm()
                };
                if radius > 0.15 && radius <= f.width + contact && along > 0.6 && panel_dist <= contact
                {
                    let tangent = f.open_tangent();
                    let delta = ee_after - ee_before;
                    let tangential = delta.x * tangent.x + delta.y * tangent.y;
                    f.angle = (f.angle + tangential / radius.max(0.15)).clamp(0.0, f.max_angle);
                }
            }
        }
    }

    fn settle_attachments(&mut self, ee: &Pose) {
        if let Some((attachment, offset)) = self.held {
            if let Attachment::Object(i) = attachment {
                let world_off = crate::geometry::rotate_vector(&ee.q, offset);
                self.objects[i].position = ee.t + world_off;
            }
        }
        // Objects still inside their container ride with it.
        for obj in &mut self.objects {
            match obj.container {
                Some(Container::Drawer) => {
                    if let Some(d) = &self.drawer {
                        obj.position = d.inner_position() + Vector3::new(0.0, 0.0, obj.radius);
                    }
                }
                Some(Container::Fridge) => {}
                None => {}
            }
        }
    }

    /// Abstract grasp rule: positive snaps the nearest attachable thing
    /// within the grasp radius, negative releases, zero is a no-op.
    pub fn apply_gripper(&mut self, scalar: f64) {
        if scalar == 0.0 {
            return;
        }
        if scalar < 0.0 {
            if let Some((Attachment::Object(i), _)) = self.held {
                self.objects[i].container = None;
                // Minimal gravity: settle onto a support surface directly
                // below the release pose, if one is there.
                let p = self.objects[i].position;
                let rest = self
                    .scene
                    .surfaces
                    .iter()
                    .filter(|s| {
                        (p.x - s.center.x).abs() <= s.half.x + 0.05
                            && (p.y - s.center.y).abs() <= s.half.y + 0.05
                            && p.z >= s.z - 0.05
                            && p.z <= s.z + 0.45
                    })
                    .map(|s| s.z)
                    .fold(f64::NEG_INFINITY, f64::max);
                if rest.is_finite() {
                    self.objects[i].position.z = rest + self.objects[i].radius;
                }
            }
            self.held = None;
            return;
        }
        if self.held.is_some() {
            return;
        }
        let ee = self.ee_pose();
        let mut best: Option<(Attachment, f64)> = None;
        for (i, obj) in self.objects.iter().enumerate() {
            if !self.object_graspable(obj) {
                continue;
            }
            let d = (obj.position - ee.t).norm();
            if d <= self.config.grasp_radius && best.map_or(true, |(_, bd)| d < bd) {
                best = Some((Attachment::Object(i), d));
            }
        }
        if let Some(dr) = &self.drawer {
            let d = (dr.handle_position() - ee.t).norm();
            if d <= self.config.grasp_radius && best.map_or(true, |(_, bd)| d < bd) {
                best = Some((Attachment::DrawerHandle, d));
            }
        }
        if let Some(f) = &self.fridge {
            let d = (f.handle_position() - ee.t).norm();
            if d <= self.config.grasp_radius && best.map_or(true, |(_, bd)| d < bd) {
                best = Some((Attachment::FridgeHandle, d));
            }
        }
        if let Some((attachment, _)) = best {
            let offset = match attachment {
                Attachment::Object(i) => {
                    let world = self.objects[i].position - ee.t;
                    crate::geometry::rotate_vector(&ee.q.conjugate(), world)
                }
                _ => Vector3::zeros(),
            };
            if let Attachment::Object(i) = attachment {
                self.objects[i].container = None;
            }
            self.held = Some((attachment, offset));
        }
    }

    /// Containment rule: objects in a closed drawer or fridge cannot be
    /// grasped until the container is open.
    fn object_graspable(&self, obj: &SceneObject) -> bool {
        match obj.container {
            Some(Container::Drawer) => self
                .drawer
                .as_ref()
                .map_or(true, |d| d.extension >= self.config.drawer_open_threshold),
            Some(Container::Fridge) => self
                .fridge
                .as_ref()
                .map_or(true, |f| f.angle >= self.config.fridge_open_threshold),
            None => true,
        }
    }

    /// Whether an object is currently held.
    pub fn holding(&self) -> Option<usize> {
        match self.held {
            Some((Attachment::Object(i), _)) => Some(i),
            _ => None,
        }
    }

    pub fn holding_handle(&self) -> Option<Attachment> {
        match self.held {
            Some((a @ Attachment::DrawerHandle, _)) | Some((a @ Attachment::FridgeHandle, _)) => {
                Some(a)
            }
            _ => None,
        }
    }

    /// Minimum clearance from a point to all obstacle surfaces (negative
    /// inside some obstacle).
    pub fn obstacle_clearance(&self, p: Vector3<f64>) -> f64 {
        self.scene
            .obstacles
            .iter()
            .map(|b| b.signed_distance(p))
            .fold(f64::INFINITY, f64::min)
    }

    /// Closest obstacle surface point to `p`, with its signed distance.
    pub fn nearest_obstacle_point(&self, p: Vector3<f64>) -> Option<(Vector3<f64>, f64)> {
        self.scene
            .obstacles
            .iter()
            .map(|b| (b.closest_surface_point(p), b.signed_distance(p)))
            .min_by(|a, b| a.1.partial_cmp(&b.1).unwrap())
    }

    /// Uniform area-weighted samples of obstacle surfaces with their colors,
    /// as 6-D map points. Deterministic per seed.
    pub fn sample_surface_points(&self, n: usize, seed: u64) -> Vec<DVector<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = Vec::with_capacity(n);
        if self.scene.obstacles.is_empty() || n == 0 {
            return out;
        }
        let areas: Vec<f64> = self
            .scene
            .obstacles
            .iter()
            .map(|b| b.face_areas().iter().sum::<f64>())
            .collect();
        let total: f64 = areas.iter().sum();
        for _ in 0..n {
            let mut pick = rng.gen_range(0.0..total);
            let mut bi = 0;
            for (i, a) in areas.iter().enumerate() {
                if pick < *a {
                    bi = i;
                    break;
                }
                pick -= a;
            }
            let b = &self.scene.obstacles[bi];
            let faces = b.face_areas();
            let ftotal: f64 = faces.iter().sum();
            let mut fpick = rng.gen_range(0.0..ftotal);
            let mut fi = 0;
            for (i, a) in faces.iter().enumerate() {
                if fpick < *a {
                    fi = i;
                    break;
                }
                fpick -= a;
            }
            let p = b.sample_face_point(fi, &mut rng);
            out.push(DVector::from_vec(vec![
                p.x, p.y, p.z, b.color[0], b.color[1], b.color[2],
            ]));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::DHLink;
    use approx::assert_relative_eq;

    fn simple_chain() -> KinematicChain {
        KinematicChain::new(
            vec![
                DHLink::new(0.0, 0.0, 0.3, 0.3, true),
                DHLink::new(0.0, 0.0, 0.3, 0.0, true),
            ],
            Pose::new(Vector3::new(0.1, 0.0, 0.2), UnitQuaternion::IDENTITY),
        )
        .unwrap()
    }

    fn empty_scene() -> Scene {
        Scene {
            bounds_min: Vector2::new(-5.0, -5.0),
            bounds_max: Vector2::new(5.0, 5.0),
            obstacles: vec![],
            surfaces: vec![],
        }
    }

    fn world_with(objects: Vec<SceneObject>, scene: Scene) -> WorldState {
        WorldState::new(
            scene,
            objects,
            None,
            None,
            simple_chain(),
            vec![(-3.0, 3.0); 2],
            BaseExtrinsic::default(),
            DVector::zeros(2),
            SimConfig::default(),
            4,
        )
    }

    #[test]
    fn zero_action_keeps_state() {
        let mut w = world_with(vec![], empty_scene());
        let before = w.clone();
        w.step(&Action10::zero(2), 0.05);
        assert_eq!(w.base, before.base);
        assert_eq!(w.joints, before.joints);
        assert_eq!(w.objects, before.objects);
    }

    #[test]
    fn forward_drive_advances_x() {
        let mut w = world_with(vec![], empty_scene());
        let mut action = Action10::zero(2);
        action.base_v = 0.5;
        for _ in 0..40 {
            w.step(&action, 0.05);
        }
        assert_relative_eq!(w.base.x, 1.0, epsilon = 1e-9);
        assert_relative_eq!(w.base.y, 0.0, epsilon = 1e-9);
    }

    #[test]
    fn wall_blocks_motion_kinematically() {
        let mut scene = empty_scene();
        scene.obstacles.push(BoxObstacle::new(
            Vector3::new(1.0, 0.0, 0.5),
            Vector3::new(0.05, 2.0, 0.5),
            [0.5; 3],
        ));
        let mut w = world_with(vec![], scene);
        let mut action = Action10::zero(2);
        action.base_v = 0.8;
        for _ in 0..100 {
            w.step(&action, 0.05);
        }
        // Stopped in front of the wall: x ≤ wall face − base radius.
        assert!(w.base.x <= 1.0 - 0.05 - 0.25 + 1e-9, "x = {}", w.base.x);
        assert!(w.base.x > 0.5, "should have advanced before stopping");
    }

    #[test]
    fn gripper_snap_rules() {
        let obj_near = SceneObject {
            name: "near".into(),
            position: Vector3::new(0.0, 0.0, 0.0),
            radius: 0.03,
            color: [1.0, 0.0, 0.0],
            container: None,
        };
        let mut w = world_with(vec![obj_near], empty_scene());
        let ee = w.ee_pose().t;
        // Place the object 0.10 m from the end-effector: attaches.
        w.objects[0].position = ee + Vector3::new(0.10, 0.0, 0.0);
        w.apply_gripper(1.0);
        assert_eq!(w.holding(), Some(0));
        // Release.
        w.apply_gripper(-1.0);
        assert_eq!(w.holding(), None);
        // 0.20 m away: outside the snap radius.
        w.objects[0].position = ee + Vector3::new(0.20, 0.0, 0.0);
        w.apply_gripper(1.0);
        assert_eq!(w.holding(), None);
        // Zero is a no-op.
        w.objects[0].position = ee + Vector3::new(0.05, 0.0, 0.0);
        w.apply_gripper(0.0);
        assert_eq!(w.holding(), None);
    }

    #[test]
    fn held_object_follows_rigidly() {
        let obj = SceneObject {
            name: "o".into(),
            position: Vector3::zeros(),
            radius: 0.03,
            color: [0.0, 1.0, 0.0],
            container: None,
        };
        let mut w = world_with(vec![obj], empty_scene());
        let ee = w.ee_pose();
        w.objects[0].position = ee.t + Vector3::new(0.08, 0.02, 0.0);
        w.apply_gripper(1.0);
        assert_eq!(w.holding(), Some(0));
        let rel0 = w.objects[0].position - w.ee_pose().t;
        let mut action = Action10::zero(2);
        action.base_v = 0.3;
        action.joint_rates[0] = 0.4;
        for _ in 0..60 {
            w.step(&action, 0.05);
        }
        let ee1 = w.ee_pose();
        let rel1 = w.objects[0].position - ee1.t;
        // Relative offset in the end-effector frame is constant.
        let local0 = crate::geometry::rotate_vector(&ee.q.conjugate(), rel0);
        let local1 = crate::geometry::rotate_vector(&ee1.q.conjugate(), rel1);
        assert!((local0 - local1).norm() < 1e-9, "drift {}", (local0 - local1).norm());
    }

    #[test]
    fn drawer_pull_tracks_axis_projection() {
        let drawer = Drawer {
            body: BoxObstacle::new(Vector3::new(0.0, -2.0, 0.4), Vector3::new(0.25, 0.25, 0.4), [0.4; 3]),
            axis: Vector2::new(0.0, 1.0),
            extension: 0.0,
            max_extension: 0.35,
            handle_closed: Vector3::new(0.0, -1.73, 0.55),
            inner_anchor: Vector3::new(0.0, -1.9, 0.5),
        };
        let mut w = world_with(vec![], empty_scene());
        w.drawer = Some(drawer);
        // Face +y first, then place the base so the end-effector sits
        // exactly on the handle, and grasp it.
        let handle = w.drawer.as_ref().unwrap().handle_position();
        w.base = BaseExtrinsic::new(0.0, 0.0, std::f64::consts::FRAC_PI_2);
        let ee_local = w.ee_pose().t;
        w.base = BaseExtrinsic::new(
            handle.x - ee_local.x,
            handle.y - ee_local.y,
            std::f64::consts::FRAC_PI_2,
        );
        // x/y aligned exactly; a small constant z offset remains, which the
        // axis projection ignores.
        let d = (w.ee_pose().t - handle).norm();
        assert!(d < 0.12, "setup: EE near handle, d = {d}");
        w.apply_gripper(1.0);
        assert_eq!(w.holding_handle(), Some(Attachment::DrawerHandle));
        // Pull along +y by 0.3 m over many steps.
        let mut action = Action10::zero(2);
        action.base_v = 0.2;
        for _ in 0..30 {
            w.step(&action, 0.05);
        }
        let ext = w.drawer.as_ref().unwrap().extension;
        assert_relative_eq!(ext, 0.3, epsilon = 0.02);
    }

    #[test]
    fn surface_sampling_is_area_proportional_and_deterministic() {
        let mut scene = empty_scene();
        scene.obstacles.push(BoxObstacle::new(
            Vector3::new(0.0, 0.0, 0.5),
            Vector3::new(0.5, 0.5, 0.5),
            [0.2, 0.4, 0.6],
        ));
        let w = world_with(vec![], scene);
        assert!(w.sample_surface_points(0, 7).is_empty());
        let pts = w.sample_surface_points(6000, 7);
        assert_eq!(pts.len(), 6000);
        // Unit cube: every face has equal area, so expect ~1000 per face.
        let mut counts = [0usize; 6];
        for p in &pts {
            let v = Vector3::new(p[0], p[1], p[2]);
            let r = v - Vector3::new(0.0, 0.0, 0.5);
            if (r.x - 0.5).abs() < 1e-9 {
                counts[0] += 1;
            } else if (r.x + 0.5).abs() < 1e-9 {
                counts[1] += 1;
            } else if (r.y - 0.5).abs() < 1e-9 {
                counts[2] += 1;
            } else if (r.y + 0.5).abs() < 1e-9 {
                counts[3] += 1;
            } else if (r.z - 0.5).abs() < 1e-9 {
                counts[4] += 1;
            } else {
                counts[5] += 1;
            }
        }
        for c in counts {
            let frac = c as f64 / 6000.0;
            assert!((frac - 1.0 / 6.0).abs() < 0.05 / 6.0 * 6.0, "face fraction {frac}");
        }
        // Determinism.
        let again = w.sample_surface_points(6000, 7);
        assert_eq!(pts, again);
        let other = w.sample_surface_points(6000, 8);
        assert_ne!(pts, other);
    }

    #[test]
    fn contained_object_not_graspable_until_open() {
        let drawer = Drawer {
            body: BoxObstacle::new(Vector3::new(0.0, -2.0, 0.4), Vector3::new(0.25, 0.25, 0.4), [0.4; 3]),
            axis: Vector2::new(0.0, 1.0),
            extension: 0.0,
            max_extension: 0.35,
            handle_closed: Vector3::new(0.0, -1.73, 0.55),
            inner_anchor: Vector3::new(0.0, -1.9, 0.5),
        };
        let bowl = SceneObject {
            name: "bowl".into(),
            position: drawer.inner_position(),
            radius: 0.04,
            color: [0.9, 0.9, 0.9],
            container: Some(Container::Drawer),
        };
        let mut w = world_with(vec![bowl], empty_scene());
        w.drawer = Some(drawer);
        // Move the EE right onto the bowl.
        let pos = w.objects[0].position;
        let ee_local = w.ee_pose().t;
        w.base = BaseExtrinsic::new(pos.x - ee_local.x, pos.y - ee_local.y, 0.0);
        w.apply_gripper(1.0);
        assert_eq!(w.holding(), None, "closed drawer must block the grasp");
        w.drawer.as_mut().unwrap().extension = 0.2;
        // Object rides with the drawer.
        w.settle_attachments(&w.ee_pose().clone());
        let pos = w.objects[0].position;
        let ee_local_now = w.ee_pose().t;
        w.base = BaseExtrinsic::new(
            w.base.x + (pos.x - ee_local_now.x),
            w.base.y + (pos.y - ee_local_now.y),
            0.0,
        );
        w.apply_gripper(1.0);
        assert_eq!(w.holding(), Some(0), "open drawer allows the grasp");
    }
}
