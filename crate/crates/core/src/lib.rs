//! Multi-robot collaboration through dialog: a tabletop world, arm kinematics,
//! plan validation with feedback, a round-robin dialog protocol, joint-space
//! motion planning, a 3D grid path toy and an experiment harness.

pub mod agents;
pub mod bench;
pub mod dialog;
pub mod geometry;
pub mod gridpath;
pub mod kinematics;
pub mod plan;
pub mod planner;
pub mod scalar;
pub mod world;

pub use scalar::Real;

pub type Vec3f = geometry::Vec3<f64>;
pub type Arm = kinematics::ArmModel<f64>;
pub type Joints = kinematics::JointConfig<f64>;
pub type Composite = kinematics::CompositeConfig<f64>;
pub type Obstacle = geometry::Obstacle<f64>;
