//! Evaluation metrics: Fréchet distance over learned motion features,
//! intra/inter diversity, foot penetration and sliding, and trajectory
//! error.
//!
//! All metrics are pure functions over immutable inputs. Foot metrics and
//! diversity operate on FK global positions in meters with the ground
//! plane at `y = 0`.

pub mod classifier;

use nalgebra::{DMatrix, DVector, Matrix3};
use ndarray::{Array2, Array3};

use crate::dataio::{MotionClip, TrajectorySignal};
use crate::error::{Error, Result};
use crate::skeleton::{rot6d_to_matrix, Rotation6D};

/// Default penetration tolerance below the ground plane, meters.
pub const PENETRATION_EPS: f64 = 0.005;
/// Toe-height threshold for the sliding metric, meters.
pub const SLIDING_HEIGHT: f64 = 0.01;

/// Gaussian feature statistics of a set of motion embeddings.
#[derive(Debug, Clone)]
pub struct FeatureStats {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl FeatureStats {
    /// Sample mean and covariance of row-stacked features `(N, D)`.
    pub fn from_features(features: &Array2<f64>) -> Result<Self> {
        let (n, d) = (features.shape()[0], features.shape()[1]);
        if n == 0 {
            return Err(Error::Validation("no feature rows".into()));
        }
        let mut mean = DVector::zeros(d);
        for row in features.rows() {
            for i in 0..d {
                mean[i] += row[i];
            }
        }
        mean /= n as f64;
        let mut cov = DMatrix::zeros(d, d);
        if n > 1 {
            for row in features.rows() {
                let c = DVector::from_iterator(d, row.iter().copied()) - &mean;
                cov += &c * c.transpose();
            }
            cov /= (n - 1) as f64;
        }
        Ok(FeatureStats { mean, cov })
    }
}

/// Symmetric PSD matrix square root with small negative eigenvalues
/// clamped to zero.
fn sqrt_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let mut vals = eig.eigenvalues.clone();
    for v in vals.iter_mut() {
        *v = v.max(0.0).sqrt();
    }
    &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose()
}

/// Fréchet distance between two Gaussians:
/// `|mu_a - mu_b|^2 + Tr(S_a + S_b - 2 (S_a S_b)^(1/2))`.
pub fn frechet_distance(a: &FeatureStats, b: &FeatureStats) -> Result<f64> {
    if a.mean.len() != b.mean.len() {
        return Err(Error::Shape(format!(
            "feature dims differ: {} vs {}",
            a.mean.len(),
            b.mean.len()
        )));
    }
    let diff = &a.mean - &b.mean;
    let mean_term = diff.dot(&diff);
    // sqrt(S_a S_b) via the symmetrized product sqrt(S_a) S_b sqrt(S_a)
    let ra = sqrt_psd(&a.cov);
    let inner = &ra * &b.cov * &ra;
    let sqrt_prod = sqrt_psd(&inner);
    let cov_term = a.cov.trace() + b.cov.trace() - 2.0 * sqrt_prod.trace();
    Ok(mean_term + cov_term)
}

/// Per-joint population variance of global position over time (summed
/// over x, y, z), averaged across joints.
pub fn diversity_intra(positions: &Array3<f64>) -> Result<f64> {
    let (f, j) = (positions.shape()[0], positions.shape()[1]);
    if f < 2 {
        return Err(Error::Validation("intra diversity needs at least 2 frames".into()));
    }
    let mut acc = 0.0;
    for jj in 0..j {
        for axis in 0..3 {
            let col: Vec<f64> = (0..f).map(|ff| positions[[ff, jj, axis]]).collect();
            let mean = col.iter().sum::<f64>() / f as f64;
            acc += col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / f as f64;
        }
    }
    Ok(acc / j as f64)
}

/// Intra diversity averaged over a set of clips.
pub fn diversity_intra_set(clips: &[&MotionClip]) -> Result<f64> {
    if clips.is_empty() {
        return Err(Error::Validation("no clips".into()));
    }
    let mut acc = 0.0;
    for c in clips {
        acc += diversity_intra(&c.global_positions()?)?;
    }
    Ok(acc / clips.len() as f64)
}

/// Variance of per-clip time-mean joint positions across clips (summed
/// over x, y, z), averaged across joints. Clips must share a skeleton.
pub fn diversity_inter(clips: &[&MotionClip]) -> Result<f64> {
    if clips.len() < 2 {
        return Err(Error::Validation("inter diversity needs at least 2 clips".into()));
    }
    let j = clips[0].topology.num_joints();
    for c in clips {
        if c.topology.num_joints() != j {
            return Err(Error::Shape("inter diversity requires matching skeletons".into()));
        }
    }
    // per clip and joint: time-mean position
    let mut means = vec![vec![[0.0f64; 3]; j]; clips.len()];
    for (ci, c) in clips.iter().enumerate() {
        let pos = c.global_positions()?;
        let f = pos.shape()[0];
        for jj in 0..j {
            for axis in 0..3 {
                let mut m = 0.0;
                for ff in 0..f {
                    m += pos[[ff, jj, axis]];
                }
                means[ci][jj][axis] = m / f as f64;
            }
        }
    }
    let n = clips.len() as f64;
    let mut acc = 0.0;
    for jj in 0..j {
        for axis in 0..3 {
            let vals: Vec<f64> = means.iter().map(|m| m[jj][axis]).collect();
            let mean = vals.iter().sum::<f64>() / n;
            acc += vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        }
    }
    Ok(acc / j as f64)
}

/// Percentage of frames (per toe) where the toe sinks strictly below
/// `-eps`.
pub fn foot_penetration(clip: &MotionClip, eps: f64) -> Result<Vec<f64>> {
    let toes = clip.topology.toe_joint_ids();
    if toes.is_empty() {
        return Err(Error::Labeling("no toe joints configured".into()));
    }
    let pos = clip.global_positions()?;
    let f = clip.frames();
    Ok(toes
        .iter()
        .map(|&toe| {
            let below = (0..f).filter(|&ff| pos[[ff, toe, 1]] < -eps).count();
            100.0 * below as f64 / f as f64
        })
        .collect())
}

/// Horizontal toe travel accumulated while the toe is below
/// `height_threshold`, averaged over feet, meters.
pub fn foot_sliding(clip: &MotionClip, height_threshold: f64) -> Result<f64> {
    let toes = clip.topology.toe_joint_ids();
    if toes.is_empty() {
        return Err(Error::Labeling("no toe joints configured".into()));
    }
    let pos = clip.global_positions()?;
    let f = clip.frames();
    let mut per_foot = 0.0;
    for &toe in toes {
        let mut dist = 0.0;
        for ff in 1..f {
            if pos[[ff, toe, 1]] < height_threshold {
                let dx = pos[[ff, toe, 0]] - pos[[ff - 1, toe, 0]];
                let dz = pos[[ff, toe, 2]] - pos[[ff - 1, toe, 2]];
                dist += (dx * dx + dz * dz).sqrt();
            }
        }
        per_foot += dist;
    }
    Ok(per_foot / toes.len() as f64)
}

/// Geodesic angle between two rotations, degrees.
pub fn geodesic_deg(a: &Matrix3<f64>, b: &Matrix3<f64>) -> f64 {
    let m = a.transpose() * b;
    let c = ((m.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
    c.acos().to_degrees()
}

/// Mean xz position error (meters) and mean geodesic root-rotation error
/// (degrees) against a target trajectory in the same denormalized space.
pub fn trajectory_error(clip: &MotionClip, traj: &TrajectorySignal) -> Result<(f64, f64)> {
    let f = clip.frames();
    if traj.frames() != f {
        return Err(Error::Shape(format!(
            "trajectory has {} frames, clip has {f}",
            traj.frames()
        )));
    }
    let mut pos_err = 0.0;
    let mut rot_err = 0.0;
    for ff in 0..f {
        let dx = clip.root_pos[[ff, 0]] - traj.positions[[ff, 0]];
        let dz = clip.root_pos[[ff, 2]] - traj.positions[[ff, 1]];
        pos_err += (dx * dx + dz * dz).sqrt();
        let rc: Rotation6D = std::array::from_fn(|i| clip.joint_rot[[ff, 0, i]]);
        let rt: Rotation6D = std::array::from_fn(|i| traj.rotations[[ff, i]]);
        rot_err += geodesic_deg(&rot6d_to_matrix(&rc)?, &rot6d_to_matrix(&rt)?);
    }
    Ok((pos_err / f as f64, rot_err / f as f64))
}
