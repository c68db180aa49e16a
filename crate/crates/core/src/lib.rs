//! Desk-scale laboratory for 2D-to-3D human pose lifting with a trainable
//! energy critic.
//!
//! The crate provides:
//!
//! - a scalar reverse-mode autodiff tape and Adam optimizer ([`tape`],
//!   [`adam`], [`params`]),
//! - skeleton topology with shortest-path distances ([`skeleton`]),
//! - a forward-kinematics synthetic dataset generator with a pinhole camera
//!   ([`synthdata`]),
//! - a residual-MLP pose lifter ([`posenet`]) and an energy network in MLP
//!   and graph-attention variants ([`lossnet`]),
//! - training objectives including margin and NCE energy shaping with
//!   negative sampling ([`objectives`]),
//! - the alternating training loop and greedy hyperparameter sweep
//!   ([`trainer`]),
//! - evaluation metrics including structural-consistency measures
//!   ([`metrics`]),
//! - gradient-based inference-time refinement ([`gbi`]).

pub mod adam;
pub mod error;
pub mod gbi;
pub mod gradcheck;
pub mod lossnet;
pub mod metrics;
pub mod nn;
pub mod objectives;
pub mod params;
pub mod pose;
pub mod posenet;
pub mod seeds;
pub mod skeleton;
pub mod synthdata;
pub mod tape;
pub mod trainer;

pub use adam::{adam_step, AdamState};
pub use error::{Error, Result};
pub use params::ParamStore;
pub use pose::{Pose2D, Pose3D};
pub use skeleton::{canonical_17, compute_spd, SkeletonSpec, SpdMatrix};
pub use synthdata::{CameraModel, Dataset, GeneratorConfig, Sample};
pub use tape::{Ix, NodeRange, Space, Tape, Var};
