//! Everything between files on disk and training batches: motion clips,
//! min-max root normalization, trajectory extraction, contact labeling,
//! sliding windows, style balancing, and trajectory augmentation.

pub mod bvh;
pub mod dataset;

use ndarray::{Array2, Array3, ArrayView2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::ops::Range;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::skeleton::{
    forward_kinematics, matrix_to_rot6d, rot6d_to_matrix, rot_y, Rotation6D, SkeletonTopology,
};

/// Default contact-labeling thresholds: toe height below `CONTACT_HEIGHT`
/// meters and per-frame speed below `CONTACT_SPEED` meters.
pub const CONTACT_HEIGHT: f64 = 0.05;
pub const CONTACT_SPEED: f64 = 0.01;

/// A motion clip in raw units: root positions in meters, per-joint 6D
/// rotations, at a fixed frame rate.
#[derive(Debug, Clone)]
pub struct MotionClip {
    pub topology: Arc<SkeletonTopology>,
    pub frame_rate: f64,
    /// `F x 3` root positions, meters.
    pub root_pos: Array2<f64>,
    /// `F x J x 6` local joint rotations.
    pub joint_rot: Array3<f64>,
    pub style_id: usize,
    pub dataset_id: usize,
}

impl MotionClip {
    pub fn new(
        topology: Arc<SkeletonTopology>,
        frame_rate: f64,
        root_pos: Array2<f64>,
        joint_rot: Array3<f64>,
        style_id: usize,
        dataset_id: usize,
    ) -> Result<Self> {
        let frames = root_pos.shape()[0];
        if frames < 2 {
            return Err(Error::Validation(format!(
                "clip needs at least 2 frames, got {frames}"
            )));
        }
        if frame_rate <= 0.0 {
            return Err(Error::Validation(format!("frame rate must be positive, got {frame_rate}")));
        }
        let j = topology.num_joints();
        if root_pos.shape()[1] != 3 || joint_rot.shape() != [frames, j, 6] {
            return Err(Error::Shape(format!(
                "clip arrays inconsistent: root {:?}, rot {:?}, J = {j}",
                root_pos.shape(),
                joint_rot.shape()
            )));
        }
        for f in 0..frames {
            for jj in 0..j {
                let v: Rotation6D = std::array::from_fn(|i| joint_rot[[f, jj, i]]);
                rot6d_to_matrix(&v)?;
            }
        }
        Ok(MotionClip { topology, frame_rate, root_pos, joint_rot, style_id, dataset_id })
    }

    pub fn frames(&self) -> usize {
        self.root_pos.shape()[0]
    }

    /// Global joint positions of the whole clip, meters.
    pub fn global_positions(&self) -> Result<Array3<f64>> {
        forward_kinematics(&self.topology, self.root_pos.view(), self.joint_rot.view())
    }
}

/// Per-axis min/max of root positions over the training split; maps
/// positions into `[-1, 1]` per axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl NormStats {
    pub fn new(min: [f64; 3], max: [f64; 3]) -> Result<Self> {
        for a in 0..3 {
            if !(min[a] < max[a]) {
                return Err(Error::Stats(format!(
                    "axis {a}: min ({}) must be below max ({})",
                    min[a], max[a]
                )));
            }
        }
        Ok(NormStats { min, max })
    }

    /// Stats under which normalization is the identity map.
    pub fn identity() -> Self {
        NormStats { min: [-1.0; 3], max: [1.0; 3] }
    }

    pub fn normalize_point(&self, p: [f64; 3]) -> [f64; 3] {
        std::array::from_fn(|a| 2.0 * (p[a] - self.min[a]) / (self.max[a] - self.min[a]) - 1.0)
    }

    pub fn denormalize_point(&self, p: [f64; 3]) -> [f64; 3] {
        std::array::from_fn(|a| (p[a] + 1.0) * 0.5 * (self.max[a] - self.min[a]) + self.min[a])
    }

    pub fn normalize(&self, pos: ArrayView2<f64>) -> Array2<f64> {
        let mut out = pos.to_owned();
        for mut row in out.rows_mut() {
            let p = self.normalize_point([row[0], row[1], row[2]]);
            row[0] = p[0];
            row[1] = p[1];
            row[2] = p[2];
        }
        out
    }

    pub fn denormalize(&self, pos: ArrayView2<f64>) -> Array2<f64> {
        let mut out = pos.to_owned();
        for mut row in out.rows_mut() {
            let p = self.denormalize_point([row[0], row[1], row[2]]);
            row[0] = p[0];
            row[1] = p[1];
            row[2] = p[2];
        }
        out
    }

    /// Per-axis scale `(max - min) / 2` used to map normalized-space
    /// offsets back to meters.
    pub fn half_range(&self) -> [f64; 3] {
        std::array::from_fn(|a| (self.max[a] - self.min[a]) * 0.5)
    }
}

/// Per-axis global min/max over all frames of the given (training) clips.
pub fn compute_norm_stats<'a>(clips: impl IntoIterator<Item = &'a MotionClip>) -> Result<NormStats> {
    let mut min = [f64::INFINITY; 3];
    let mut max = [f64::NEG_INFINITY; 3];
    let mut any = false;
    for clip in clips {
        any = true;
        for row in clip.root_pos.rows() {
            for a in 0..3 {
                min[a] = min[a].min(row[a]);
                max[a] = max[a].max(row[a]);
            }
        }
    }
    if !any {
        return Err(Error::Stats("no clips to compute stats from".into()));
    }
    NormStats::new(min, max)
}

/// The conditioning trajectory over a window's current frames: ground
/// plane positions `(x, z)` and per-frame root rotations in 6D.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectorySignal {
    /// `F x 2` positions, normalized space.
    pub positions: Array2<f64>,
    /// `F x 6` root rotations.
    pub rotations: Array2<f64>,
}

impl TrajectorySignal {
    pub fn frames(&self) -> usize {
        self.positions.shape()[0]
    }
}

/// Extracts the trajectory over `span`: `(x, z)` root positions in the
/// space induced by `stats` plus the root joint rotation rows.
pub fn extract_trajectory(
    clip: &MotionClip,
    span: Range<usize>,
    stats: &NormStats,
) -> Result<TrajectorySignal> {
    if span.end > clip.frames() || span.start >= span.end {
        return Err(Error::Validation(format!(
            "span {span:?} out of bounds for clip with {} frames",
            clip.frames()
        )));
    }
    let n = span.len();
    let mut positions = Array2::zeros((n, 2));
    let mut rotations = Array2::zeros((n, 6));
    for (i, f) in span.enumerate() {
        let p = stats.normalize_point([
            clip.root_pos[[f, 0]],
            clip.root_pos[[f, 1]],
            clip.root_pos[[f, 2]],
        ]);
        positions[[i, 0]] = p[0];
        positions[[i, 1]] = p[2];
        for k in 0..6 {
            rotations[[i, k]] = clip.joint_rot[[f, 0, k]];
        }
    }
    Ok(TrajectorySignal { positions, rotations })
}

/// Labels toe-ground contact: height below `h_c` AND per-frame speed
/// below `v_c`. Speed at frame 0 is defined as zero (height-only gate).
pub fn label_foot_contacts(
    clip: &MotionClip,
    h_c: f64,
    v_c: f64,
) -> Result<Array2<bool>> {
    let toes = clip.topology.toe_joint_ids();
    if toes.is_empty() {
        return Err(Error::Labeling("no toe joints configured on this skeleton".into()));
    }
    let pos = clip.global_positions()?;
    let frames = clip.frames();
    let mut out = Array2::from_elem((frames, toes.len()), false);
    for (ti, &toe) in toes.iter().enumerate() {
        for f in 0..frames {
            let height = pos[[f, toe, 1]];
            let speed = if f == 0 {
                0.0
            } else {
                let dx = pos[[f, toe, 0]] - pos[[f - 1, toe, 0]];
                let dy = pos[[f, toe, 1]] - pos[[f - 1, toe, 1]];
                let dz = pos[[f, toe, 2]] - pos[[f - 1, toe, 2]];
                (dx * dx + dy * dy + dz * dz).sqrt()
            };
            out[[f, ti]] = height < h_c && speed < v_c;
        }
    }
    Ok(out)
}

/// One training sample: `F'` past frames, `F` current frames, trajectory,
/// style, and per-frame toe contacts. Root positions are in normalized
/// space; rotations are raw 6D.
#[derive(Debug, Clone)]
pub struct MotionWindow {
    pub past_root: Array2<f64>,
    pub past_rot: Array3<f64>,
    pub cur_root: Array2<f64>,
    pub cur_rot: Array3<f64>,
    pub trajectory: TrajectorySignal,
    pub style_id: usize,
    pub contact: Array2<bool>,
}

impl MotionWindow {
    pub fn past_frames(&self) -> usize {
        self.past_root.shape()[0]
    }

    pub fn cur_frames(&self) -> usize {
        self.cur_root.shape()[0]
    }
}

/// Sliding windows of `past + cur` contiguous frames at the given stride.
///
/// Start indices are `0, stride, 2*stride, ...` while the full window
/// fits; a clip shorter than one window yields an empty list.
pub fn make_windows(
    clip: &MotionClip,
    stats: &NormStats,
    cur: usize,
    past: usize,
    stride: usize,
) -> Result<Vec<MotionWindow>> {
    if cur == 0 || stride == 0 {
        return Err(Error::Config("window length and stride must be positive".into()));
    }
    let total = past + cur;
    if clip.frames() < total {
        return Ok(Vec::new());
    }
    let contacts = if clip.topology.toe_joint_ids().is_empty() {
        Array2::from_elem((clip.frames(), 0), false)
    } else {
        label_foot_contacts(clip, CONTACT_HEIGHT, CONTACT_SPEED)?
    };
    let norm_root = stats.normalize(clip.root_pos.view());

    let mut out = Vec::new();
    let mut start = 0;
    while start + total <= clip.frames() {
        let cur_span = (start + past)..(start + total);
        out.push(MotionWindow {
            past_root: norm_root.slice(ndarray::s![start..start + past, ..]).to_owned(),
            past_rot: clip.joint_rot.slice(ndarray::s![start..start + past, .., ..]).to_owned(),
            cur_root: norm_root.slice(ndarray::s![cur_span.clone(), ..]).to_owned(),
            cur_rot: clip.joint_rot.slice(ndarray::s![cur_span.clone(), .., ..]).to_owned(),
            trajectory: extract_trajectory(clip, cur_span.clone(), stats)?,
            style_id: clip.style_id,
            contact: contacts.slice(ndarray::s![cur_span, ..]).to_owned(),
        });
        start += stride;
    }
    Ok(out)
}

/// Inverse-frequency sampling weights per window; weights sum to 1, so
/// expected style frequency under weighted sampling is uniform.
pub fn balance_styles(style_ids: &[usize]) -> Vec<f64> {
    if style_ids.is_empty() {
        return Vec::new();
    }
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for &s in style_ids {
        *counts.entry(s).or_insert(0) += 1;
    }
    let styles = counts.len() as f64;
    style_ids
        .iter()
        .map(|s| 1.0 / (counts[s] as f64 * styles))
        .collect()
}

/// Gaussian smoothing and yaw-rotation augmentation of a trajectory.
///
/// With probability `p_smooth` the positions are convolved per axis with
/// a Gaussian kernel (`sigma` frames, reflected boundaries); with
/// probability `p_rotate` a single yaw angle in `[0, 2pi)` rotates every
/// position about the vertical axis and left-multiplies every decoded
/// rotation by that yaw.
pub fn augment_trajectory(
    traj: &TrajectorySignal,
    rng: &mut ChaCha8Rng,
    p_smooth: f64,
    p_rotate: f64,
    sigma: f64,
) -> Result<TrajectorySignal> {
    let mut out = traj.clone();
    if rng.random::<f64>() < p_smooth {
        out.positions = gaussian_smooth(&out.positions, sigma);
    }
    if rng.random::<f64>() < p_rotate {
        let theta = rng.random::<f64>() * std::f64::consts::TAU;
        let (s, c) = theta.sin_cos();
        for mut row in out.positions.rows_mut() {
            let (x, z) = (row[0], row[1]);
            row[0] = c * x + s * z;
            row[1] = -s * x + c * z;
        }
        let ry = rot_y(theta);
        for mut row in out.rotations.rows_mut() {
            let v: Rotation6D = std::array::from_fn(|i| row[i]);
            let rotated = ry * rot6d_to_matrix(&v)?;
            let enc = matrix_to_rot6d(&rotated)?;
            for i in 0..6 {
                row[i] = enc[i];
            }
        }
    }
    Ok(out)
}

/// Per-axis Gaussian filter, kernel truncated at `ceil(3 sigma)`,
/// reflected boundaries (edge sample repeated).
fn gaussian_smooth(pos: &Array2<f64>, sigma: f64) -> Array2<f64> {
    let n = pos.shape()[0] as isize;
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel = Vec::with_capacity((2 * radius + 1) as usize);
    for k in -radius..=radius {
        kernel.push((-(k * k) as f64 / (2.0 * sigma * sigma)).exp());
    }
    let ksum: f64 = kernel.iter().sum();
    let reflect = |mut i: isize| -> usize {
        while i < 0 || i >= n {
            if i < 0 {
                i = -i - 1;
            }
            if i >= n {
                i = 2 * n - i - 1;
            }
        }
        i as usize
    };
    let mut out = pos.clone();
    for axis in 0..pos.shape()[1] {
        for f in 0..n {
            let mut acc = 0.0;
            for (ki, k) in (-radius..=radius).enumerate() {
                acc += kernel[ki] * pos[[reflect(f + k), axis]];
            }
            out[[f as usize, axis]] = acc / ksum;
        }
    }
    out
}

/// Dataset split.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// One record of the JSON-lines dataset manifest.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: String,
    pub style_name: String,
    pub dataset_name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<Split>,
}

/// Reads a JSON-lines manifest; blank lines and `#` comments are skipped.
pub fn read_manifest(text: &str) -> Result<Vec<ManifestEntry>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let entry: ManifestEntry = serde_json::from_str(line).map_err(|e| Error::Parse {
            line: i + 1,
            msg: format!("manifest record: {e}"),
        })?;
        out.push(entry);
    }
    Ok(out)
}

/// Assigns 75/15/10 splits stratified by (dataset, style).
///
/// Groups are processed in sorted order with cascaded rounding so global
/// split sizes land on the exact fractions; groups of one or two clips go
/// entirely to train. Entries that already carry a split keep it.
pub fn assign_splits(entries: &mut [ManifestEntry], seed: u64) {
    let fractions = [0.10, 0.15]; // test, val; train is the remainder
    let mut groups: BTreeMap<(String, String), Vec<usize>> = BTreeMap::new();
    for (i, e) in entries.iter().enumerate() {
        if e.split.is_none() {
            groups
                .entry((e.dataset_name.clone(), e.style_name.clone()))
                .or_default()
                .push(i);
        }
    }
    let mut rng = crate::rngs::derive_rng(seed, "split-assign");
    for members in groups.values_mut() {
        // deterministic shuffle within each group
        for i in (1..members.len()).rev() {
            let j = rng.random_range(0..=i);
            members.swap(i, j);
        }
    }

    let mut take_counts: BTreeMap<(String, String), [usize; 2]> = BTreeMap::new();
    for (si, frac) in fractions.iter().enumerate() {
        let mut target = 0.0f64;
        let mut taken = 0usize;
        for (key, members) in &groups {
            let counts = take_counts.entry(key.clone()).or_insert([0, 0]);
            if members.len() <= 2 {
                continue;
            }
            target += frac * members.len() as f64;
            let already: usize = counts[..si].iter().sum();
            let want = ((target + 0.5).floor() as usize).saturating_sub(taken);
            let take = want.min(members.len() - already);
            counts[si] = take;
            taken += take;
        }
    }
    for (key, members) in &groups {
        let counts = take_counts[key];
        for (rank, &idx) in members.iter().enumerate() {
            let split = if rank < counts[0] {
                Split::Test
            } else if rank < counts[0] + counts[1] {
                Split::Val
            } else {
                Split::Train
            };
            entries[idx].split = Some(split);
        }
    }
}
