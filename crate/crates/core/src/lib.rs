//! Deformable registration of 3-D volumes with a small convolutional
//! displacement estimator trained on simulated deformations.
//!
//! * [`grid`]: volumes, displacement fields, label and probability maps,
//!   preprocessing.
//! * [`simulator`]: random affine + elastic deformations with ground truth.
//! * [`resample`]: backward warping, field composition and inversion.
//! * [`metrics`]: EPE, MSE, NLCC, mutual information, Dice, voting.
//! * [`autodiff`]: tape-based reverse-mode engine, the network, losses,
//!   Adam and checkpoints.
//! * [`pipeline`]: training, registration and atlas-based segmentation.
//! * [`io`]: NIfTI-1, datasets on disk, run configuration, CSV reports.
//! * [`cli`]: the `deformreg` command line.
//!
//! Arrays are row-major with axis 0 slowest; voxel centers sit at integer
//! coordinates and displacements are in voxels.

pub mod autodiff;
pub mod cli;
pub mod error;
pub mod grid;
pub mod io;
pub mod metrics;
pub mod pipeline;
pub mod resample;
pub mod simulator;

pub use error::{Error, Result};
pub use grid::{Dims, DisplacementField, LabelMap, ProbabilityMap, Volume};
