//! Training: the diffusion loss, four auxiliary losses over forward
//! kinematics, condition dropout, and the Adam optimization loop.
//!
//! All losses are built on the autodiff graph, including a fully
//! differentiable FK chain (Gram-Schmidt decode plus the kinematic
//! recursion), so gradients flow from global-position errors back into
//! the network. Global-position quantities are compared in denormalized
//! meters so thresholds stay physical.

pub mod checkpoint;

use ndarray::{Array2, Array3, Array4, ArrayD, IxDyn};
use rand::distr::weighted::WeightedIndex;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::sync::Arc;

use crate::dataio::{augment_trajectory, MotionWindow, NormStats};
use crate::denoiser::{Denoiser, DenoiserInputs, StyleCond};
use crate::error::{Error, Result};
use crate::nn::graph::{Graph, Var};
use crate::nn::params::{Adam, Binding, ParamStore};
use crate::schedule::DiffusionSchedule;
use crate::skeleton::SkeletonTopology;

/// Weights of the composite training loss; the diffusion term must stay
/// positive.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LossWeights {
    pub w_d: f64,
    pub w_av: f64,
    pub w_gp: f64,
    pub w_vgp: f64,
    pub w_foot: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { w_d: 1.0, w_av: 1.0, w_gp: 1.0, w_vgp: 1.0, w_foot: 1.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.w_d <= 0.0 {
            return Err(Error::Config("diffusion loss weight must be positive".into()));
        }
        for (name, w) in [
            ("w_av", self.w_av),
            ("w_gp", self.w_gp),
            ("w_vgp", self.w_vgp),
            ("w_foot", self.w_foot),
        ] {
            if w < 0.0 {
                return Err(Error::Config(format!("{name} must be nonnegative, got {w}")));
            }
        }
        Ok(())
    }
}

/// Scalar values of every loss term at one step.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossComponents {
    pub total: f64,
    pub diffusion: f64,
    pub angular_velocity: f64,
    pub global_position: f64,
    pub global_velocity: f64,
    pub foot_contact: f64,
}

/// Mean squared error over all elements.
pub fn mse(g: &mut Graph, a: Var, b: Var) -> Var {
    let d = g.sub(a, b);
    let sq = g.mul(d, d);
    g.mean_all(sq)
}

/// Diffusion loss: summed MSE of the root-position and joint-rotation
/// streams against the clean targets.
pub fn diffusion_loss(
    g: &mut Graph,
    pred_root: Var,
    pred_rot: Var,
    tgt_root: Var,
    tgt_rot: Var,
) -> Var {
    let a = mse(g, pred_root, tgt_root);
    let b = mse(g, pred_rot, tgt_rot);
    g.add(a, b)
}

/// First-order frame difference along axis 1.
fn frame_diff(g: &mut Graph, x: Var) -> Var {
    let t = g.value(x).shape()[1];
    let hi = g.narrow(x, 1, 1, t - 1);
    let lo = g.narrow(x, 1, 0, t - 1);
    g.sub(hi, lo)
}

/// MSE between frame differences of the 6D rotation features.
pub fn angular_velocity_loss(g: &mut Graph, pred_rot: Var, tgt_rot: Var) -> Result<Var> {
    if g.value(pred_rot).shape()[1] < 2 {
        return Err(Error::Validation("angular velocity needs at least 2 frames".into()));
    }
    let dp = frame_diff(g, pred_rot);
    let dt = frame_diff(g, tgt_rot);
    Ok(mse(g, dp, dt))
}

/// Differentiable Gram-Schmidt decode: `(..., 6) -> (..., 3, 3)` rotation
/// matrices (columns orthonormal). A tiny epsilon guards the norms so
/// noisy network outputs cannot produce NaNs.
pub fn rot6d_to_matrix_graph(g: &mut Graph, rot6: Var) -> Var {
    let shape = g.value(rot6).shape().to_vec();
    let last = shape.len() - 1;
    debug_assert_eq!(shape[last], 6);
    let a = g.narrow(rot6, last, 0, 3);
    let b = g.narrow(rot6, last, 3, 3);
    let normalize = |g: &mut Graph, v: Var| {
        let sq = g.mul(v, v);
        let n2 = g.sum_axes(sq, &[last]);
        let n2e = g.add_scalar(n2, 1e-12);
        let rnorm = g.powf(n2e, -0.5);
        g.mul(v, rnorm)
    };
    let c1 = normalize(g, a);
    let prod = g.mul(c1, b);
    let dot = g.sum_axes(prod, &[last]);
    let proj = g.mul(c1, dot);
    let u2 = g.sub(b, proj);
    let c2 = normalize(g, u2);
    let c3 = g.cross3(c1, c2);

    // columns (c1, c2, c3) -> (..., 3 rows, 3 cols)
    let mut col_shape = shape.clone();
    col_shape[last] = 3;
    col_shape.push(1);
    let c1 = g.reshape(c1, &col_shape);
    let c2 = g.reshape(c2, &col_shape);
    let c3 = g.reshape(c3, &col_shape);
    g.concat(col_shape.len() - 1, &[c1, c2, c3])
}

/// Maps normalized root positions back to meters inside the graph.
pub fn denormalize_graph(g: &mut Graph, root: Var, stats: &NormStats) -> Var {
    let h = stats.half_range();
    let scale = g.constant(ArrayD::from_shape_vec(IxDyn(&[3]), h.to_vec()).expect("3"));
    let offset = g.constant(
        ArrayD::from_shape_vec(
            IxDyn(&[3]),
            (0..3).map(|a| stats.min[a] + h[a]).collect(),
        )
        .expect("3"),
    );
    let scaled = g.mul(root, scale);
    g.add(scaled, offset)
}

/// Differentiable forward kinematics.
///
/// `root_m` is `(B, F, 3)` in meters, `rot6` is `(B, F, J, 6)`; returns
/// global positions `(B, F, J, 3)`.
pub fn fk_graph(
    g: &mut Graph,
    topo: &SkeletonTopology,
    root_m: Var,
    rot6: Var,
) -> Var {
    let (b, f, j) = {
        let s = g.value(rot6).shape();
        (s[0], s[1], s[2])
    };
    let mats = rot6d_to_matrix_graph(g, rot6); // (B, F, J, 3, 3)

    let mut glob_rot: Vec<Var> = Vec::with_capacity(j);
    let mut glob_pos: Vec<Var> = Vec::with_capacity(j);
    for jj in 0..j {
        let local = g.narrow(mats, 2, jj, 1);
        let local = g.reshape(local, &[b, f, 3, 3]);
        match topo.parent(jj) {
            None => {
                glob_rot.push(local);
                glob_pos.push(root_m);
            }
            Some(p) => {
                let off = topo.rest_offset(jj);
                let off = g.constant(
                    ArrayD::from_shape_vec(IxDyn(&[3, 1]), vec![off[0], off[1], off[2]])
                        .expect("3x1"),
                );
                let moved = g.matmul(glob_rot[p], off); // (B, F, 3, 1)
                let moved = g.reshape(moved, &[b, f, 3]);
                let pos = g.add(glob_pos[p], moved);
                glob_pos.push(pos);
                let rot = g.matmul(glob_rot[p], local);
                glob_rot.push(rot);
            }
        }
    }
    let stacked: Vec<Var> = glob_pos
        .into_iter()
        .map(|p| g.reshape(p, &[b, f, 1, 3]))
        .collect();
    g.concat(2, &stacked)
}

/// MSE over FK global positions, in meters.
#[allow(clippy::too_many_arguments)]
pub fn global_position_loss(
    g: &mut Graph,
    topo: &SkeletonTopology,
    stats: &NormStats,
    pred_root: Var,
    pred_rot: Var,
    tgt_root: Var,
    tgt_rot: Var,
) -> Var {
    let pm = denormalize_graph(g, pred_root, stats);
    let tm = denormalize_graph(g, tgt_root, stats);
    let pf = fk_graph(g, topo, pm, pred_rot);
    let tf = fk_graph(g, topo, tm, tgt_rot);
    mse(g, pf, tf)
}

/// MSE between frame differences of FK global positions.
#[allow(clippy::too_many_arguments)]
pub fn global_velocity_loss(
    g: &mut Graph,
    topo: &SkeletonTopology,
    stats: &NormStats,
    pred_root: Var,
    pred_rot: Var,
    tgt_root: Var,
    tgt_rot: Var,
) -> Result<Var> {
    if g.value(pred_root).shape()[1] < 2 {
        return Err(Error::Validation("global velocity needs at least 2 frames".into()));
    }
    let pm = denormalize_graph(g, pred_root, stats);
    let tm = denormalize_graph(g, tgt_root, stats);
    let pf = fk_graph(g, topo, pm, pred_rot);
    let tf = fk_graph(g, topo, tm, tgt_rot);
    let dp = frame_diff(g, pf);
    let dt = frame_diff(g, tf);
    Ok(mse(g, dp, dt))
}

/// Mean Euclidean norm of predicted toe velocities on contact frames;
/// zero when no contacts are set.
pub fn foot_contact_loss(
    g: &mut Graph,
    topo: &SkeletonTopology,
    stats: &NormStats,
    pred_root: Var,
    pred_rot: Var,
    contact: &Array3<f64>,
) -> Result<Var> {
    let toes = topo.toe_joint_ids();
    let f = g.value(pred_root).shape()[1];
    if contact.shape()[1] != f || contact.shape()[2] != toes.len() {
        return Err(Error::Shape(format!(
            "contact {:?} vs (F={f}, toes={})",
            contact.shape(),
            toes.len()
        )));
    }
    let active: f64 = contact
        .slice(ndarray::s![.., 1.., ..])
        .iter()
        .sum();
    if toes.is_empty() || active == 0.0 {
        return Ok(g.constant(ArrayD::zeros(IxDyn(&[1]))));
    }
    let pm = denormalize_graph(g, pred_root, stats);
    let pf = fk_graph(g, topo, pm, pred_rot); // (B, F, J, 3)
    let toe_cols: Vec<Var> = toes.iter().map(|&t| g.narrow(pf, 2, t, 1)).collect();
    let toe_pos = g.concat(2, &toe_cols); // (B, F, toes, 3)
    let vel = frame_diff(g, toe_pos); // (B, F-1, toes, 3)
    let sq = g.mul(vel, vel);
    let sumsq = g.sum_axes(sq, &[3]);
    let eps = g.add_scalar(sumsq, 1e-12);
    let norm = g.powf(eps, 0.5); // (B, F-1, toes, 1)
    // velocity f-1 -> f is charged to the arrival frame's contact flag
    let mask = contact.slice(ndarray::s![.., 1.., ..]).to_owned();
    let mask_shape = [mask.shape()[0], mask.shape()[1], mask.shape()[2], 1];
    let mask = g.constant(
        mask.into_dyn()
            .into_shape_with_order(IxDyn(&mask_shape))
            .expect("mask reshape"),
    );
    let gated = g.mul(norm, mask);
    let total = g.sum_all(gated);
    Ok(g.scale(total, 1.0 / active))
}

/// One same-skeleton batch of stacked windows.
#[derive(Debug, Clone)]
pub struct WindowBatch {
    pub past_root: Array3<f64>,
    pub past_rot: Array4<f64>,
    pub cur_root: Array3<f64>,
    pub cur_rot: Array4<f64>,
    /// `(B, F, 8)` trajectory rows `Tp || Tr`.
    pub traj: Array3<f64>,
    pub style_ids: Vec<usize>,
    /// `(B, F, toes)` contact flags as 0/1.
    pub contact: Array3<f64>,
    pub topology: Arc<SkeletonTopology>,
    pub stats: NormStats,
}

impl WindowBatch {
    /// Stacks same-skeleton windows into batch arrays.
    pub fn stack(
        windows: &[&MotionWindow],
        topology: Arc<SkeletonTopology>,
        stats: NormStats,
    ) -> Result<Self> {
        let b = windows.len();
        if b == 0 {
            return Err(Error::Validation("empty batch".into()));
        }
        let (fp, f, j) = (
            windows[0].past_frames(),
            windows[0].cur_frames(),
            topology.num_joints(),
        );
        let toes = windows[0].contact.shape()[1];
        let mut past_root = Array3::zeros((b, fp, 3));
        let mut past_rot = Array4::zeros((b, fp, j, 6));
        let mut cur_root = Array3::zeros((b, f, 3));
        let mut cur_rot = Array4::zeros((b, f, j, 6));
        let mut traj = Array3::zeros((b, f, 8));
        let mut contact = Array3::zeros((b, f, toes));
        let mut style_ids = Vec::with_capacity(b);
        for (i, w) in windows.iter().enumerate() {
            if w.past_frames() != fp || w.cur_frames() != f || w.past_rot.shape()[1] != j {
                return Err(Error::Shape("windows in a batch must share shape".into()));
            }
            past_root.slice_mut(ndarray::s![i, .., ..]).assign(&w.past_root);
            past_rot.slice_mut(ndarray::s![i, .., .., ..]).assign(&w.past_rot);
            cur_root.slice_mut(ndarray::s![i, .., ..]).assign(&w.cur_root);
            cur_rot.slice_mut(ndarray::s![i, .., .., ..]).assign(&w.cur_rot);
            traj.slice_mut(ndarray::s![i, .., 0..2]).assign(&w.trajectory.positions);
            traj.slice_mut(ndarray::s![i, .., 2..8]).assign(&w.trajectory.rotations);
            for ff in 0..f {
                for t in 0..toes {
                    contact[[i, ff, t]] = f64::from(w.contact[[ff, t]]);
                }
            }
            style_ids.push(w.style_id);
        }
        Ok(WindowBatch {
            past_root,
            past_rot,
            cur_root,
            cur_rot,
            traj,
            style_ids,
            contact,
            topology,
            stats,
        })
    }
}

/// Condition-dropout probabilities.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct DropoutConfig {
    /// Probability of replacing the style row with the null embedding.
    pub p_style: f64,
    /// Probability of dropping the past frames for the whole batch.
    pub p_past: f64,
}

impl Default for DropoutConfig {
    fn default() -> Self {
        DropoutConfig { p_style: 0.1, p_past: 0.5 }
    }
}

/// Builds the full training loss on `g` for one batch.
///
/// Per sample: draws `t` uniform in `[1, T]`, noises the current frames
/// with [`crate::schedule::q_sample`], applies style dropout; the past
/// context is dropped for the whole batch with probability `p_past`.
/// Returns the weighted total plus each component's value.
#[allow(clippy::too_many_arguments)]
pub fn total_loss(
    g: &mut Graph,
    bind: &Binding,
    model: &Denoiser,
    batch: &WindowBatch,
    schedule: &DiffusionSchedule,
    weights: &LossWeights,
    dropout: &DropoutConfig,
    rng_noise: &mut ChaCha8Rng,
    rng_dropout: &mut ChaCha8Rng,
) -> Result<(Var, LossComponents)> {
    weights.validate()?;
    let b = batch.cur_root.shape()[0];
    let big_t = schedule.steps();

    // fixed draw order keeps checkpoint resume bit-exact:
    // timesteps, root noise, rotation noise, style dropout, past dropout
    let ts: Vec<usize> = (0..b).map(|_| rng_noise.random_range(1..=big_t)).collect();
    let mut noisy_root = batch.cur_root.clone();
    let mut noisy_rot = batch.cur_rot.clone();
    for i in 0..b {
        let ab = schedule.alpha_bar(ts[i]);
        let (sa, sn) = (ab.sqrt(), (1.0 - ab).sqrt());
        noisy_root
            .slice_mut(ndarray::s![i, .., ..])
            .mapv_inplace(|x| x * sa);
        for v in noisy_root.slice_mut(ndarray::s![i, .., ..]).iter_mut() {
            let e: f64 = rng_noise.sample(rand_distr::StandardNormal);
            *v += sn * e;
        }
        noisy_rot
            .slice_mut(ndarray::s![i, .., .., ..])
            .mapv_inplace(|x| x * sa);
        for v in noisy_rot.slice_mut(ndarray::s![i, .., .., ..]).iter_mut() {
            let e: f64 = rng_noise.sample(rand_distr::StandardNormal);
            *v += sn * e;
        }
    }

    let null_id = model.config.null_style_id();
    let styles: Vec<usize> = batch
        .style_ids
        .iter()
        .map(|&s| {
            if rng_dropout.random::<f64>() < dropout.p_style {
                null_id
            } else {
                s
            }
        })
        .collect();
    let drop_past = rng_dropout.random::<f64>() < dropout.p_past;

    let inputs = DenoiserInputs {
        past_root: (!drop_past).then_some(&batch.past_root),
        past_rot: (!drop_past).then_some(&batch.past_rot),
        cur_root: &noisy_root,
        cur_rot: &noisy_rot,
        traj: &batch.traj,
        t: &ts,
    };
    let (pred_root, pred_rot, _stats) =
        model.forward(g, bind, &inputs, &StyleCond::Ids(&styles), &batch.topology)?;

    let tgt_root = g.constant(batch.cur_root.clone().into_dyn());
    let tgt_rot = g.constant(batch.cur_rot.clone().into_dyn());

    let l_d = diffusion_loss(g, pred_root, pred_rot, tgt_root, tgt_rot);
    let l_av = angular_velocity_loss(g, pred_rot, tgt_rot)?;

    // FK for position-space losses, computed once and shared
    let pm = denormalize_graph(g, pred_root, &batch.stats);
    let tm = denormalize_graph(g, tgt_root, &batch.stats);
    let pf = fk_graph(g, &batch.topology, pm, pred_rot);
    let tf = fk_graph(g, &batch.topology, tm, tgt_rot);
    let l_gp = mse(g, pf, tf);
    let dp = frame_diff(g, pf);
    let dt = frame_diff(g, tf);
    let l_vgp = mse(g, dp, dt);
    let l_foot = foot_contact_loss(
        g,
        &batch.topology,
        &batch.stats,
        pred_root,
        pred_rot,
        &batch.contact,
    )?;

    let mut total = g.scale(l_d, weights.w_d);
    for (w, l) in [
        (weights.w_av, l_av),
        (weights.w_gp, l_gp),
        (weights.w_vgp, l_vgp),
        (weights.w_foot, l_foot),
    ] {
        if w != 0.0 {
            let term = g.scale(l, w);
            total = g.add(total, term);
        }
    }

    let components = LossComponents {
        total: g.scalar(total),
        diffusion: g.scalar(l_d),
        angular_velocity: g.scalar(l_av),
        global_position: g.scalar(l_gp),
        global_velocity: g.scalar(l_vgp),
        foot_contact: g.scalar(l_foot),
    };
    Ok((total, components))
}

/// Windows of one dataset prepared for sampling.
pub struct DatasetWindows {
    pub windows: Vec<MotionWindow>,
    pub topology: Arc<SkeletonTopology>,
    pub stats: NormStats,
    /// Sampling weights (balanced or uniform), summing to 1.
    pub weights: Vec<f64>,
}

/// Training-loop settings (mirrors the `optim.*` / `loss.*` config keys).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainSettings {
    pub batch_size: usize,
    pub lr: f64,
    pub lr_gamma: f64,
    pub balance_styles: bool,
    pub dropout: DropoutConfig,
    pub weights: LossWeights,
    pub p_smooth: f64,
    pub p_rotate: f64,
    pub augment_sigma: f64,
    pub seed: u64,
}

impl Default for TrainSettings {
    fn default() -> Self {
        TrainSettings {
            batch_size: 16,
            lr: 1e-4,
            lr_gamma: 0.9999,
            balance_styles: true,
            dropout: DropoutConfig::default(),
            weights: LossWeights::default(),
            p_smooth: 0.5,
            p_rotate: 0.5,
            augment_sigma: 2.0,
            seed: 0,
        }
    }
}

/// Per-role RNG streams owned by the trainer; all are checkpointed so a
/// resumed run reproduces the next step bit-identically.
pub struct TrainRngs {
    pub sampler: ChaCha8Rng,
    pub noise: ChaCha8Rng,
    pub dropout: ChaCha8Rng,
    pub augment: ChaCha8Rng,
}

impl TrainRngs {
    pub fn from_seed(seed: u64) -> Self {
        TrainRngs {
            sampler: crate::rngs::derive_rng(seed, "train-sampler"),
            noise: crate::rngs::derive_rng(seed, "train-noise"),
            dropout: crate::rngs::derive_rng(seed, "train-dropout"),
            augment: crate::rngs::derive_rng(seed, "train-augment"),
        }
    }
}

/// Single-writer training loop state.
pub struct Trainer {
    pub model: Denoiser,
    pub store: ParamStore,
    pub adam: Adam,
    pub schedule: DiffusionSchedule,
    pub settings: TrainSettings,
    pub rngs: TrainRngs,
    pub step: u64,
}

impl Trainer {
    pub fn new(
        model: Denoiser,
        store: ParamStore,
        schedule: DiffusionSchedule,
        settings: TrainSettings,
    ) -> Self {
        let adam = Adam::new(settings.lr, settings.lr_gamma);
        let rngs = TrainRngs::from_seed(settings.seed);
        Trainer { model, store, adam, schedule, settings, rngs, step: 0 }
    }

    /// Picks a dataset (proportional to window count), samples a batch
    /// (balanced or uniform), augments trajectories, and applies one
    /// optimizer update. Aborts on non-finite loss.
    pub fn train_step(&mut self, data: &[DatasetWindows]) -> Result<LossComponents> {
        let sizes: Vec<usize> = data.iter().map(|d| d.windows.len()).collect();
        if sizes.iter().all(|&s| s == 0) {
            return Err(Error::Training("no training windows".into()));
        }
        let ds_idx = if data.len() == 1 {
            0
        } else {
            let dist = WeightedIndex::new(sizes.iter().map(|&s| s as f64))
                .map_err(|e| Error::Training(format!("dataset weights: {e}")))?;
            dist.sample(&mut self.rngs.sampler)
        };
        let ds = &data[ds_idx];

        let picks: Vec<usize> = if self.settings.balance_styles {
            let dist = WeightedIndex::new(&ds.weights)
                .map_err(|e| Error::Training(format!("balance weights: {e}")))?;
            (0..self.settings.batch_size)
                .map(|_| dist.sample(&mut self.rngs.sampler))
                .collect()
        } else {
            (0..self.settings.batch_size)
                .map(|_| self.rngs.sampler.random_range(0..ds.windows.len()))
                .collect()
        };

        let mut picked: Vec<MotionWindow> =
            picks.iter().map(|&i| ds.windows[i].clone()).collect();
        for w in &mut picked {
            w.trajectory = augment_trajectory(
                &w.trajectory,
                &mut self.rngs.augment,
                self.settings.p_smooth,
                self.settings.p_rotate,
                self.settings.augment_sigma,
            )?;
        }
        let refs: Vec<&MotionWindow> = picked.iter().collect();
        let batch = WindowBatch::stack(&refs, ds.topology.clone(), ds.stats)?;

        let mut g = Graph::new();
        let bind = self.store.bind(&mut g);
        let (total, components) = total_loss(
            &mut g,
            &bind,
            &self.model,
            &batch,
            &self.schedule,
            &self.settings.weights,
            &self.settings.dropout,
            &mut self.rngs.noise,
            &mut self.rngs.dropout,
        )?;
        if !components.total.is_finite() {
            return Err(Error::Training(format!(
                "non-finite loss at step {}: {components:?}",
                self.step
            )));
        }

        let grads = g.backward(total);
        let mut by_name = indexmap::IndexMap::new();
        for (name, var) in bind.iter() {
            if let Some(grad) = grads.get(var) {
                by_name.insert(name.to_string(), grad.clone());
            }
        }
        self.adam.update(&mut self.store, &by_name);
        self.step += 1;
        Ok(components)
    }

    /// Loss components on held-out windows: no dropout, no augmentation,
    /// noise drawn from a stream derived from the step (the training
    /// streams stay untouched).
    pub fn validate(&self, data: &[DatasetWindows], max_batches: usize) -> Result<LossComponents> {
        let mut rng_noise = crate::rngs::derive_rng(self.settings.seed ^ self.step, "val-noise");
        let mut rng_dropout = crate::rngs::derive_rng(0, "val-dropout-unused");
        let no_dropout = DropoutConfig { p_style: 0.0, p_past: 0.0 };
        let mut acc = LossComponents::default();
        let mut batches = 0usize;
        for ds in data {
            let mut at = 0;
            while at + self.settings.batch_size <= ds.windows.len() && batches < max_batches {
                let refs: Vec<&MotionWindow> = ds.windows
                    [at..at + self.settings.batch_size]
                    .iter()
                    .collect();
                let batch = WindowBatch::stack(&refs, ds.topology.clone(), ds.stats)?;
                let mut g = Graph::new();
                let bind = self.store.bind(&mut g);
                let (_, c) = total_loss(
                    &mut g,
                    &bind,
                    &self.model,
                    &batch,
                    &self.schedule,
                    &self.settings.weights,
                    &no_dropout,
                    &mut rng_noise,
                    &mut rng_dropout,
                )?;
                acc.total += c.total;
                acc.diffusion += c.diffusion;
                acc.angular_velocity += c.angular_velocity;
                acc.global_position += c.global_position;
                acc.global_velocity += c.global_velocity;
                acc.foot_contact += c.foot_contact;
                at += self.settings.batch_size;
                batches += 1;
            }
        }
        if batches == 0 {
            return Err(Error::Validation("no full validation batches available".into()));
        }
        let n = batches as f64;
        Ok(LossComponents {
            total: acc.total / n,
            diffusion: acc.diffusion / n,
            angular_velocity: acc.angular_velocity / n,
            global_position: acc.global_position / n,
            global_velocity: acc.global_velocity / n,
            foot_contact: acc.foot_contact / n,
        })
    }

    /// Learning rate the next update will use.
    pub fn lr(&self) -> f64 {
        self.adam.lr()
    }
}

/// Builds per-dataset window collections with sampling weights.
pub fn prepare_dataset_windows(
    sets: Vec<(Vec<MotionWindow>, Arc<SkeletonTopology>, NormStats)>,
    balance: bool,
) -> Vec<DatasetWindows> {
    sets.into_iter()
        .filter(|(w, _, _)| !w.is_empty())
        .map(|(windows, topology, stats)| {
            let weights = if balance {
                crate::dataio::balance_styles(
                    &windows.iter().map(|w| w.style_id).collect::<Vec<_>>(),
                )
            } else {
                vec![1.0 / windows.len() as f64; windows.len()]
            };
            DatasetWindows { windows, topology, stats, weights }
        })
        .collect()
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::denoiser::DenoiserConfig;
    use crate::rngs::derive_rng;
    use crate::schedule::ScheduleKind;
    use crate::skeleton::{forward_kinematics, matrix_to_rot6d, rot_z};
    use approx::assert_abs_diff_eq;
    use ndarray::{Array2, Array3 as A3};

    fn leafd(g: &mut Graph, a: ArrayD<f64>) -> Var {
        g.leaf(a)
    }

    fn rand_arr(shape: &[usize], seed: u64) -> ArrayD<f64> {
        let mut rng = derive_rng(seed, "train-test");
        ArrayD::from_shape_fn(IxDyn(shape), |_| rng.random::<f64>() * 2.0 - 1.0)
    }

    #[test]
    fn diffusion_loss_examples() {
        let mut g = Graph::new();
        let a = leafd(&mut g, rand_arr(&[2, 3, 3], 1));
        let b = leafd(&mut g, rand_arr(&[2, 3, 2, 6], 2));
        let zero = diffusion_loss(&mut g, a, b, a, b);
        assert_eq!(g.scalar(zero), 0.0);

        let one = leafd(&mut g, ArrayD::from_elem(IxDyn(&[1]), 1.0));
        let zero_t = leafd(&mut g, ArrayD::zeros(IxDyn(&[1])));
        let l = mse(&mut g, one, zero_t);
        assert_eq!(g.scalar(l), 1.0);

        // random pair equals hand-computed mean of squared diffs
        let x = rand_arr(&[4, 5], 3);
        let y = rand_arr(&[4, 5], 4);
        let hand: f64 =
            x.iter().zip(y.iter()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / 20.0;
        let xv = leafd(&mut g, x);
        let yv = leafd(&mut g, y);
        let l = mse(&mut g, xv, yv);
        assert_abs_diff_eq!(g.scalar(l), hand, epsilon = 1e-9);
    }

    #[test]
    fn angular_velocity_examples() {
        let mut g = Graph::new();
        // constant rotations both sides -> 0
        let c = ArrayD::from_elem(IxDyn(&[1, 4, 1, 6]), 0.3);
        let cv = leafd(&mut g, c.clone());
        let cv2 = leafd(&mut g, c);
        let l = angular_velocity_loss(&mut g, cv, cv2).unwrap();
        assert_eq!(g.scalar(l), 0.0);

        // constant prediction vs ramp of slope s in every component -> s^2
        let s = 0.25;
        let ramp = ArrayD::from_shape_fn(IxDyn(&[1, 5, 1, 6]), |ix| s * ix[1] as f64);
        let flat = ArrayD::zeros(IxDyn(&[1, 5, 1, 6]));
        let rv = leafd(&mut g, ramp.clone());
        let fv = leafd(&mut g, flat);
        let l = angular_velocity_loss(&mut g, fv, rv).unwrap();
        assert_abs_diff_eq!(g.scalar(l), s * s, epsilon = 1e-12);

        // invariant to adding a constant offset to both sequences
        let shifted = &ramp + 5.0;
        let rv2 = leafd(&mut g, shifted);
        let fv2 = leafd(&mut g, ArrayD::from_elem(IxDyn(&[1, 5, 1, 6]), 5.0));
        let l2 = angular_velocity_loss(&mut g, fv2, rv2).unwrap();
        assert_abs_diff_eq!(g.scalar(l2), s * s, epsilon = 1e-12);

        // F < 2 is an error
        let short = leafd(&mut g, ArrayD::zeros(IxDyn(&[1, 1, 1, 6])));
        assert!(angular_velocity_loss(&mut g, short, short).is_err());
    }

    fn chain3() -> Arc<SkeletonTopology> {
        Arc::new(
            SkeletonTopology::new(
                (0..3).map(|i| format!("j{i}")).collect(),
                vec![-1, 0, 1],
                vec![[0.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 1.0, 0.0]],
                &[],
            )
            .unwrap(),
        )
    }

    fn identity_rot6(b: usize, f: usize, j: usize) -> ArrayD<f64> {
        let mut a = ArrayD::zeros(IxDyn(&[b, f, j, 6]));
        for idx in 0..b * f * j {
            let (bb, rest) = (idx / (f * j), idx % (f * j));
            let (ff, jj) = (rest / j, rest % j);
            a[[bb, ff, jj, 0]] = 1.0;
            a[[bb, ff, jj, 4]] = 1.0;
        }
        a
    }

    #[test]
    fn fk_graph_matches_skeleton_fk() {
        let topo = chain3();
        let mut rng = derive_rng(7, "fkg");
        let (b, f) = (2, 3);
        let root = rand_arr(&[b, f, 3], 8);
        let mut rot = identity_rot6(b, f, 3);
        // random valid rotations on some joints
        for bb in 0..b {
            for ff in 0..f {
                let axis = nalgebra::Unit::new_normalize(nalgebra::Vector3::new(
                    rng.random::<f64>() - 0.5,
                    rng.random::<f64>() - 0.5,
                    rng.random::<f64>() - 0.5,
                ));
                let m = nalgebra::Rotation3::from_axis_angle(&axis, rng.random::<f64>() * 3.0)
                    .into_inner();
                let enc = matrix_to_rot6d(&m).unwrap();
                for (i, x) in enc.iter().enumerate() {
                    rot[[bb, ff, 0, i]] = *x;
                }
            }
        }
        let mut g = Graph::new();
        let rv = leafd(&mut g, root.clone());
        let qv = leafd(&mut g, rot.clone());
        let pos = fk_graph(&mut g, &topo, rv, qv);
        for bb in 0..b {
            let r2: Array2<f64> = root
                .slice(ndarray::s![bb, .., ..])
                .to_owned()
                .into_dimensionality()
                .unwrap();
            let q3: A3<f64> = rot
                .slice(ndarray::s![bb, .., .., ..])
                .to_owned()
                .into_dimensionality()
                .unwrap();
            let expect = forward_kinematics(&topo, r2.view(), q3.view()).unwrap();
            for ff in 0..f {
                for jj in 0..3 {
                    for k in 0..3 {
                        assert_abs_diff_eq!(
                            g.value(pos)[[bb, ff, jj, k]],
                            expect[[ff, jj, k]],
                            epsilon = 1e-9
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn global_position_loss_root_offset_fixture() {
        // root offset by (1,0,0) with identity rotations: squared error 1
        // on x per joint, 0 elsewhere -> mean 1/3
        let topo = chain3();
        let stats = NormStats::identity();
        let (b, f) = (1, 2);
        let rot = identity_rot6(b, f, 3);
        let zero_root = ArrayD::zeros(IxDyn(&[b, f, 3]));
        let mut off_root = ArrayD::zeros(IxDyn(&[b, f, 3]));
        for ff in 0..f {
            off_root[[0, ff, 0]] = 1.0;
        }
        let mut g = Graph::new();
        let pr = leafd(&mut g, off_root);
        let tr = leafd(&mut g, zero_root);
        let rq = leafd(&mut g, rot.clone());
        let tq = leafd(&mut g, rot);
        let l = global_position_loss(&mut g, &topo, &stats, pr, rq, tr, tq);
        assert_abs_diff_eq!(g.scalar(l), 1.0 / 3.0, epsilon = 1e-12);
    }

    #[test]
    fn global_position_loss_rotating_midchain_vs_leaf() {
        let topo = chain3();
        let stats = NormStats::identity();
        let (b, f) = (1, 2);
        let base = identity_rot6(b, f, 3);
        let root = ArrayD::zeros(IxDyn(&[b, f, 3]));
        let twist = matrix_to_rot6d(&rot_z(0.5)).unwrap();
        let run = |joint: usize| {
            let mut rot = base.clone();
            for ff in 0..f {
                for (i, x) in twist.iter().enumerate() {
                    rot[[0, ff, joint, i]] = *x;
                }
            }
            let mut g = Graph::new();
            let pr = leafd(&mut g, root.clone());
            let tr = leafd(&mut g, root.clone());
            let rq = leafd(&mut g, rot);
            let tq = leafd(&mut g, base.clone());
            let l = global_position_loss(&mut g, &topo, &stats, pr, rq, tr, tq);
            g.scalar(l)
        };
        assert!(run(1) > 1e-3, "mid-chain rotation moves the child joint");
        assert_abs_diff_eq!(run(2), 0.0, epsilon = 1e-12); // leaf has no children
    }

    #[test]
    fn global_velocity_loss_fixture() {
        // prediction slides root +0.1 m/frame in x vs static truth:
        // per-frame velocity error 0.1 in x -> loss 0.01/3
        let topo = chain3();
        let stats = NormStats::identity();
        let (b, f) = (1, 4);
        let rot = identity_rot6(b, f, 3);
        let mut moving = ArrayD::zeros(IxDyn(&[b, f, 3]));
        for ff in 0..f {
            moving[[0, ff, 0]] = 0.1 * ff as f64;
        }
        let mut g = Graph::new();
        let pr = leafd(&mut g, moving);
        let tr = leafd(&mut g, ArrayD::zeros(IxDyn(&[b, f, 3])));
        let rq = leafd(&mut g, rot.clone());
        let tq = leafd(&mut g, rot.clone());
        let l = global_velocity_loss(&mut g, &topo, &stats, pr, rq, tr, tq).unwrap();
        assert_abs_diff_eq!(g.scalar(l), 0.01 / 3.0, epsilon = 1e-12);

        // invariant to a constant global offset on the prediction
        let mut shifted = ArrayD::zeros(IxDyn(&[b, f, 3]));
        for ff in 0..f {
            shifted[[0, ff, 0]] = 0.1 * ff as f64 + 5.0;
            shifted[[0, ff, 2]] = 2.0;
        }
        let pr2 = leafd(&mut g, shifted);
        let rq2 = leafd(&mut g, rot.clone());
        let tr2 = leafd(&mut g, ArrayD::zeros(IxDyn(&[b, f, 3])));
        let tq2 = leafd(&mut g, rot);
        let l2 = global_velocity_loss(&mut g, &topo, &stats, pr2, rq2, tr2, tq2).unwrap();
        assert_abs_diff_eq!(g.scalar(l2), 0.01 / 3.0, epsilon = 1e-12);
    }

    fn toe_chain() -> Arc<SkeletonTopology> {
        Arc::new(
            SkeletonTopology::new(
                vec!["root".into(), "toe".into()],
                vec![-1, 0],
                vec![[0.0; 3], [0.0, 0.0, 0.0]],
                &["toe".to_string()],
            )
            .unwrap(),
        )
    }

    #[test]
    fn foot_contact_loss_fixtures() {
        let topo = toe_chain();
        let stats = NormStats::identity();
        let (b, f) = (1, 6);
        let rot = identity_rot6(b, f, 2);

        // all contacts false -> 0
        let mut g = Graph::new();
        let root = leafd(&mut g, ArrayD::zeros(IxDyn(&[b, f, 3])));
        let rq = leafd(&mut g, rot.clone());
        let contact = A3::zeros((b, f, 1));
        let l = foot_contact_loss(&mut g, &topo, &stats, root, rq, &contact).unwrap();
        assert_eq!(g.scalar(l), 0.0);

        // toe sliding 0.05 m/frame horizontally with contact true -> 0.05
        let mut moving = ArrayD::zeros(IxDyn(&[b, f, 3]));
        for ff in 0..f {
            moving[[0, ff, 0]] = 0.05 * ff as f64;
        }
        let mv = leafd(&mut g, moving);
        let rq2 = leafd(&mut g, rot.clone());
        let ones = A3::from_elem((b, f, 1), 1.0);
        let l2 = foot_contact_loss(&mut g, &topo, &stats, mv, rq2, &ones).unwrap();
        assert_abs_diff_eq!(g.scalar(l2), 0.05, epsilon = 1e-9);

        // static prediction with contacts true -> ~0
        let sv = leafd(&mut g, ArrayD::zeros(IxDyn(&[b, f, 3])));
        let rq3 = leafd(&mut g, rot);
        let l3 = foot_contact_loss(&mut g, &topo, &stats, sv, rq3, &ones).unwrap();
        assert!(g.scalar(l3) < 1e-5);
    }

    fn tiny_trainer(style_count: usize, seed: u64) -> Trainer {
        let cfg = DenoiserConfig {
            base_channels: 16,
            heads: 4,
            groupnorm_groups: 8,
            style_count,
            style_embed_dim: 8,
            time_embed_dim: 8,
            cur_frames: 8,
            past_frames: 4,
            depth_table: 8,
        };
        let mut rng = derive_rng(seed, "trainer-init");
        let (model, store) = Denoiser::new(cfg, &mut rng).unwrap();
        let schedule = DiffusionSchedule::new(ScheduleKind::Cosine, 50).unwrap();
        let settings = TrainSettings {
            batch_size: 2,
            lr: 1e-3,
            lr_gamma: 1.0,
            balance_styles: false,
            dropout: DropoutConfig { p_style: 0.0, p_past: 0.0 },
            p_smooth: 0.0,
            p_rotate: 0.0,
            seed,
            ..TrainSettings::default()
        };
        Trainer::new(model, store, schedule, settings)
    }

    pub(crate) fn synthetic_windows(n: usize, styles: usize) -> Vec<MotionWindow> {
        use crate::dataio::TrajectorySignal;
        let mut out = Vec::new();
        for i in 0..n {
            let (fp, f) = (4, 8);
            let mut cur_root = Array2::zeros((f, 3));
            for ff in 0..f {
                cur_root[[ff, 0]] = (ff as f64 * 0.3 + i as f64).sin() * 0.5;
                cur_root[[ff, 1]] = 0.1;
            }
            let past_root = Array2::zeros((fp, 3));
            let rot = |frames: usize| {
                let mut r = A3::zeros((frames, 2, 6));
                for ff in 0..frames {
                    for j in 0..2 {
                        r[[ff, j, 0]] = 1.0;
                        r[[ff, j, 4]] = 1.0;
                    }
                }
                r
            };
            let positions =
                Array2::from_shape_fn((f, 2), |(ff, a)| if a == 0 { cur_root[[ff, 0]] } else { 0.0 });
            let mut rotations = Array2::zeros((f, 6));
            for ff in 0..f {
                rotations[[ff, 0]] = 1.0;
                rotations[[ff, 4]] = 1.0;
            }
            out.push(MotionWindow {
                past_root,
                past_rot: rot(fp),
                cur_root,
                cur_rot: rot(f),
                trajectory: TrajectorySignal { positions, rotations },
                style_id: i % styles,
                contact: ndarray::Array2::from_elem((f, 1), false),
            });
        }
        out
    }

    #[test]
    fn train_step_decreases_loss_on_tiny_overfit() {
        let mut trainer = tiny_trainer(2, 42);
        let data = prepare_dataset_windows(
            vec![(synthetic_windows(4, 2), toe_chain(), NormStats::identity())],
            false,
        );
        let first = trainer.train_step(&data).unwrap();
        assert!(first.total.is_finite());
        let mut last = first;
        for _ in 0..60 {
            last = trainer.train_step(&data).unwrap();
        }
        assert!(
            last.total < first.total * 0.8,
            "loss should drop: {} -> {}",
            first.total,
            last.total
        );
        assert_eq!(trainer.step, 61);
    }

    #[test]
    fn identical_rngs_give_identical_losses() {
        // dropout probabilities zero; two fresh trainers with the same
        // seed produce the same first-step loss
        let mut a = tiny_trainer(2, 9);
        let mut b = tiny_trainer(2, 9);
        let data = prepare_dataset_windows(
            vec![(synthetic_windows(4, 2), toe_chain(), NormStats::identity())],
            false,
        );
        let la = a.train_step(&data).unwrap();
        let lb = b.train_step(&data).unwrap();
        assert_eq!(la, lb);
    }

    #[test]
    fn style_dropout_frequency_matches_probability() {
        let mut rng = derive_rng(3, "dropout-mc");
        let p = 0.1;
        let n = 10_000;
        let mut dropped = 0;
        for _ in 0..n {
            if rng.random::<f64>() < p {
                dropped += 1;
            }
        }
        let freq = dropped as f64 / n as f64;
        assert!((freq - p).abs() < 0.01, "frequency {freq}");
    }

    #[test]
    fn gradients_match_finite_differences_on_slice() {
        // full pipeline gradcheck on a small random parameter slice
        let mut trainer = tiny_trainer(2, 5);
        let mut rng = derive_rng(6, "gradcheck");
        trainer.store.randomize(&mut rng, 0.1);
        let windows = synthetic_windows(2, 2);
        let refs: Vec<&MotionWindow> = windows.iter().collect();
        let batch = WindowBatch::stack(&refs, toe_chain(), NormStats::identity()).unwrap();

        let loss_of = |store: &ParamStore, trainer: &Trainer| -> f64 {
            let mut g = Graph::new();
            let bind = store.bind(&mut g);
            let mut rng_noise = derive_rng(77, "gc-noise");
            let mut rng_drop = derive_rng(78, "gc-drop");
            let (_, c) = total_loss(
                &mut g,
                &bind,
                &trainer.model,
                &batch,
                &trainer.schedule,
                &LossWeights::default(),
                &DropoutConfig { p_style: 0.0, p_past: 0.0 },
                &mut rng_noise,
                &mut rng_drop,
            )
            .unwrap();
            c.total
        };

        // analytic gradients
        let mut g = Graph::new();
        let bind = trainer.store.bind(&mut g);
        let mut rng_noise = derive_rng(77, "gc-noise");
        let mut rng_drop = derive_rng(78, "gc-drop");
        let (total, _) = total_loss(
            &mut g,
            &bind,
            &trainer.model,
            &batch,
            &trainer.schedule,
            &LossWeights::default(),
            &DropoutConfig { p_style: 0.0, p_past: 0.0 },
            &mut rng_noise,
            &mut rng_drop,
        )
        .unwrap();
        let grads = g.backward(total);

        // probe 30 random scalars across all tensors
        let names: Vec<String> = trainer.store.names().map(String::from).collect();
        let mut checked = 0;
        let h = 1e-5;
        let mut probe_rng = derive_rng(11, "probe");
        while checked < 30 {
            let name = &names[probe_rng.random_range(0..names.len())];
            let len = trainer.store.get(name).len();
            let at = probe_rng.random_range(0..len);
            let analytic = grads
                .get(bind.var(name))
                .map(|a| a.as_slice().unwrap()[at])
                .unwrap_or(0.0);
            let orig = trainer.store.get(name).as_slice().unwrap()[at];
            trainer.store.get_mut(name).as_slice_mut().unwrap()[at] = orig + h;
            let up = loss_of(&trainer.store, &trainer);
            trainer.store.get_mut(name).as_slice_mut().unwrap()[at] = orig - h;
            let down = loss_of(&trainer.store, &trainer);
            trainer.store.get_mut(name).as_slice_mut().unwrap()[at] = orig;
            let fd = (up - down) / (2.0 * h);
            let denom = analytic.abs().max(fd.abs()).max(1e-6);
            assert!(
                (fd - analytic).abs() / denom <= 1e-3,
                "{name}[{at}]: fd {fd} vs analytic {analytic}"
            );
            checked += 1;
        }
    }

    #[test]
    fn loss_invariant_to_style_relabeling_with_permuted_table() {
        let mut trainer = tiny_trainer(2, 13);
        let mut rng = derive_rng(14, "perm");
        trainer.store.randomize(&mut rng, 0.1);
        let windows = synthetic_windows(2, 2);
        let refs: Vec<&MotionWindow> = windows.iter().collect();
        let mut batch = WindowBatch::stack(&refs, toe_chain(), NormStats::identity()).unwrap();

        let eval = |trainer: &Trainer, batch: &WindowBatch| {
            let mut g = Graph::new();
            let bind = trainer.store.bind(&mut g);
            let mut rng_noise = derive_rng(21, "perm-noise");
            let mut rng_drop = derive_rng(22, "perm-drop");
            let (_, c) = total_loss(
                &mut g,
                &bind,
                &trainer.model,
                batch,
                &trainer.schedule,
                &LossWeights::default(),
                &DropoutConfig { p_style: 0.0, p_past: 0.0 },
                &mut rng_noise,
                &mut rng_drop,
            )
            .unwrap();
            c.total
        };
        let before = eval(&trainer, &batch);

        // swap style rows 0 and 1 in the table AND relabel the batch ids
        {
            let table = trainer.store.get_mut(crate::denoiser::STYLE_TABLE);
            let dim = table.shape()[1];
            for d in 0..dim {
                table.swap(IxDyn(&[0, d]), IxDyn(&[1, d]));
            }
        }
        for id in batch.style_ids.iter_mut() {
            *id = 1 - *id;
        }
        let after = eval(&trainer, &batch);
        assert_abs_diff_eq!(before, after, epsilon = 1e-12);
    }
}
