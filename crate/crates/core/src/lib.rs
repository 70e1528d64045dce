//! Generative point-cloud completion with a hypernetwork decoder.
//!
//! A partial cloud is encoded, paired with a latent code for its missing
//! part, and decoded into the weights of a small MLP that maps noise points
//! onto the completed surface.

pub mod assignment;
pub mod autodiff;
pub mod dataset;
pub mod cloud;
pub mod distances;
pub mod error;
pub mod generation;
pub mod io;
pub mod kdtree;
pub mod metrics;
pub mod model;
pub mod seed;
pub mod training;
pub mod verify;

pub use cloud::{PartitionedCloud, Point, PointCloud, SplitPlane};
pub use error::{Error, Result};
pub use model::{Architecture, HyperPocket, TargetWeights, Variant};
