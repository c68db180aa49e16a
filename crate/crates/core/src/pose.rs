//! Pose containers: per-joint 2D pixel and 3D millimeter coordinates.

use crate::error::{Error, Result};

/// J x 2 keypoint coordinates (pixels unless stated otherwise).
#[derive(Clone, Debug, PartialEq)]
pub struct Pose2D(pub Vec<[f64; 2]>);

/// J x 3 joint coordinates, root-relative (millimeters unless stated
/// otherwise; normalized units inside training code).
#[derive(Clone, Debug, PartialEq)]
pub struct Pose3D(pub Vec<[f64; 3]>);

impl Pose2D {
    pub fn zeros(j: usize) -> Pose2D {
        Pose2D(vec![[0.0; 2]; j])
    }

    pub fn joints(&self) -> usize {
        self.0.len()
    }

    pub fn flat(&self) -> Vec<f64> {
        self.0.iter().flat_map(|p| p.iter().copied()).collect()
    }

    pub fn from_flat(flat: &[f64]) -> Result<Pose2D> {
        if flat.len() % 2 != 0 {
            return Err(Error::Contract("flat 2D pose length must be even".into()));
        }
        Ok(Pose2D(flat.chunks_exact(2).map(|c| [c[0], c[1]]).collect()))
    }

    /// Mean per-joint euclidean distance to another 2D pose.
    pub fn mean_joint_distance(&self, other: &Pose2D) -> Result<f64> {
        if self.joints() != other.joints() {
            return Err(Error::Contract("2D poses have different joint counts".into()));
        }
        let j = self.joints() as f64;
        Ok(self
            .0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt())
            .sum::<f64>()
            / j)
    }
}

impl Pose3D {
    pub fn zeros(j: usize) -> Pose3D {
        Pose3D(vec![[0.0; 3]; j])
    }

    pub fn joints(&self) -> usize {
        self.0.len()
    }

    pub fn flat(&self) -> Vec<f64> {
        self.0.iter().flat_map(|p| p.iter().copied()).collect()
    }

    pub fn from_flat(flat: &[f64]) -> Result<Pose3D> {
        if flat.len() % 3 != 0 {
            return Err(Error::Contract("flat 3D pose length must be a multiple of 3".into()));
        }
        Ok(Pose3D(flat.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect()))
    }

    pub fn scaled(&self, s: f64) -> Pose3D {
        Pose3D(self.0.iter().map(|p| [p[0] * s, p[1] * s, p[2] * s]).collect())
    }

    /// Translate so the given root joint sits at the origin.
    pub fn root_relative(&self, root: usize) -> Pose3D {
        let r = self.0[root];
        Pose3D(self.0.iter().map(|p| [p[0] - r[0], p[1] - r[1], p[2] - r[2]]).collect())
    }

    pub fn segment_length(&self, edge: (usize, usize)) -> f64 {
        let (a, b) = (self.0[edge.0], self.0[edge.1]);
        ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
    }
}
