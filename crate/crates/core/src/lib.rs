//! Range-view LiDAR rectification toolkit.
//!
//! - [`geometry`]: exact range-view projection and back-projection, radial offsets
//! - [`scene`]: procedural scenes and controlled range-view artifacts
//! - [`rectify`]: Welsch-loss training of a per-pixel radial regressor and inference
//! - [`diffusion`]: DDIM sampling harness and spatial-Lipschitz verification
//! - [`metrics`]: BEV JSD / MMD and gradient-norm distributions
//! - [`io`], [`config`], [`report`], [`cli`]: file formats and the batch command line

pub mod cli;
pub mod config;
pub mod diffusion;
pub mod error;
pub mod geometry;
pub mod io;
pub mod metrics;
pub mod rectify;
pub mod report;
pub mod scene;

pub use error::{Error, Result};
