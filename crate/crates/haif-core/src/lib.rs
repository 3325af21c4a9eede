//! Hierarchical active-inference control stack for a simulated
//! differential-drive mobile manipulator.
//!
//! The stack has three layers plus supporting machinery:
//!
//! - a discrete skill sequencer ([`discrete`]) choosing among whole-body
//!   skills by expected free energy, with a retry layer ([`retry`]) that
//!   switches grasp approaches on failure;
//! - global navigation ([`nav`]): A* over an occupancy grid projected from a
//!   streaming Gaussian-mixture world map ([`mapping`]);
//! - a continuous whole-body controller ([`controller`]) that runs
//!   free-energy gradient flow over a hierarchy of intrinsic/extrinsic
//!   beliefs, built on quaternion chain kinematics ([`geometry`]) and a
//!   differential-drive model ([`base`]).
//!
//! [`sim`] provides the kinematic world the stack is exercised in, and
//! [`runner`] executes benchmark episodes and aggregates stage metrics.

pub mod base;
pub mod controller;
pub mod discrete;
pub mod geometry;
pub mod logging;
pub mod mapping;
pub mod nav;
pub mod plots;
pub mod retry;
pub mod runner;
pub mod scenario;
pub mod sim;
pub mod skills;

pub use base::{BaseExtrinsic, BaseGeometry, BaseIntrinsic};
pub use controller::{ActionCommand, ControllerConfig, GoalSpec, Observations, WholeBodyModel};
pub use geometry::{DHLink, KinematicChain, Pose, UnitQuaternion};
pub use scenario::Scenario;
pub use sim::{Action10, WorldState};
