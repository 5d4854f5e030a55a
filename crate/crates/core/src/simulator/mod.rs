//! Primitive scenes, ray-cast LiDAR scans with a parametric intensity model,
//! and image-space degradations that define a pseudo-real domain with a
//! known sparsity gap.

mod degrade;
mod raycast;
mod scene;

pub use degrade::{degrade, DegradeSpec};
pub use raycast::{
    cast_ray, intensity_predict, parse_trajectory, raycast_scan, raycast_scan_with, Hit, IntensityModel, SensorPose,
    DEFAULT_SENSOR_HEIGHT,
};
pub use scene::{build_scene, Primitive, Scene, Shape, MAX_PRIMITIVES};

/// The bundled street scene.
pub const TOY_SCENE: &str = include_str!("../../data/toy_scene.txt");

/// Five poses driving along the street of [`TOY_SCENE`].
pub const TOY_TRAJECTORY: &str = include_str!("../../data/toy_trajectory.txt");
