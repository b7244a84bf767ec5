//! Monte-Carlo localization of a depth camera inside a Gaussian mixture map.
//!
//! The environment is a compact [`gmm_map::GmmMap`]. Each pose hypothesis
//! projects the map's components into the image, keeps per-patch lists of the
//! components that can matter ([`likelihood::MembershipTable`]) and scores the
//! depth scan against those components only. A particle filter with stratified
//! low-variance resampling and deprivation recovery tracks position and yaw,
//! with pitch and roll supplied by an attitude reference.

// `!(x > y)` is the NaN-rejecting comparison used throughout.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod datasets;
pub mod evaluation;
pub mod gmm_map;
pub mod likelihood;
pub mod particle_filter;
pub mod projection;
pub mod rng;
pub mod runner;
pub mod sim;

pub use gmm_map::{GmmComponent, GmmMap, PointCloud};
pub use likelihood::{DepthImage, MembershipTable};
pub use particle_filter::{FilterConfig, FilterState, OdometryDelta, Particle};
pub use projection::{CameraIntrinsics, Pose};
