//! Inference-time orchestration: style blending, single-window DDIM
//! sampling with guidance, autoregressive chaining, and BVH export.
//!
//! Chaining runs in normalized space: the past context of window `k + 1`
//! is a bit-exact copy of the last `F'` generated frames of window `k`.
//! The final clip is denormalized once at the end.

use ndarray::{Array2, Array3, Array4, ArrayD, IxDyn};
use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use crate::dataio::bvh::write_bvh;
use crate::dataio::{MotionClip, NormStats, TrajectorySignal};
use crate::denoiser::{Denoiser, DenoiserInputs, StyleCond, STYLE_TABLE};
use crate::error::{Error, Result};
use crate::nn::params::ParamStore;
use crate::schedule::{ddim_sample_loop, CondMode, DiffusionSchedule, GuidanceConfig};
use crate::skeleton::SkeletonTopology;

/// Convex style combination: global (one entry) or per-chunk.
pub type StyleWeights = Vec<(usize, f64)>;

/// A resolved generation request. The trajectory is in normalized space
/// and its length must be a positive multiple of the model's `F`.
pub struct GenerationRequest {
    /// One entry applies to every chunk; otherwise one entry per chunk.
    pub styles: Vec<StyleWeights>,
    pub trajectory: TrajectorySignal,
    /// Optional seed motion in meters (`F'` frames); normalized with the
    /// checkpoint stats before use.
    pub seed_motion: Option<(Array2<f64>, Array3<f64>)>,
    pub guidance_scale: f64,
    pub seed: u64,
}

/// Per-window detail kept for chaining diagnostics (normalized space).
pub struct WindowRecord {
    pub past_root: Option<Array2<f64>>,
    pub past_rot: Option<Array3<f64>>,
    pub out_root: Array2<f64>,
    pub out_rot: Array3<f64>,
    pub millis: f64,
}

/// Convex combination of style embedding rows.
///
/// Weights must be nonnegative over known (real, non-null) styles and sum
/// to 1 within `1e-6`.
pub fn blend_styles(store: &ParamStore, style_count: usize, weights: &StyleWeights) -> Result<Array2<f64>> {
    if weights.is_empty() {
        return Err(Error::Config("style weights must not be empty".into()));
    }
    let sum: f64 = weights.iter().map(|(_, w)| w).sum();
    if (sum - 1.0).abs() > 1e-6 {
        return Err(Error::Config(format!("style weights must sum to 1, got {sum}")));
    }
    let table = store.get(STYLE_TABLE);
    let dim = table.shape()[1];
    let mut out = Array2::zeros((1, dim));
    for &(id, w) in weights {
        if id >= style_count {
            return Err(Error::Config(format!(
                "unknown style id {id} (table has {style_count} styles)"
            )));
        }
        if w < 0.0 {
            return Err(Error::Config(format!("style weight for id {id} is negative")));
        }
        for d in 0..dim {
            out[[0, d]] += w * table[[id, d]];
        }
    }
    Ok(out)
}

/// Samples one `F`-frame window with DDIM and classifier-free guidance.
///
/// `traj_chunk` is `(F, 8)` in normalized space; `past`, when given, is
/// `F'` normalized frames. Returns denormalized root positions and the
/// 6D rotations.
#[allow(clippy::too_many_arguments)]
pub fn generate_window(
    model: &Denoiser,
    store: &ParamStore,
    schedule: &DiffusionSchedule,
    ddim_steps: usize,
    style_emb: &Array2<f64>,
    traj_chunk: &Array2<f64>,
    past: Option<(&Array2<f64>, &Array3<f64>)>,
    topo: &SkeletonTopology,
    stats: &NormStats,
    guidance_scale: f64,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Result<(Array2<f64>, Array3<f64>)> {
    let (root_norm, rot) =
        generate_window_normalized(
            model, store, schedule, ddim_steps, style_emb, traj_chunk, past, topo,
            guidance_scale, rng,
        )?;
    Ok((stats.denormalize(root_norm.view()), rot))
}

/// As [`generate_window`] but keeps the root in normalized space (used
/// for chaining).
#[allow(clippy::too_many_arguments)]
pub fn generate_window_normalized(
    model: &Denoiser,
    store: &ParamStore,
    schedule: &DiffusionSchedule,
    ddim_steps: usize,
    style_emb: &Array2<f64>,
    traj_chunk: &Array2<f64>,
    past: Option<(&Array2<f64>, &Array3<f64>)>,
    topo: &SkeletonTopology,
    guidance_scale: f64,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Result<(Array2<f64>, Array3<f64>)> {
    let f = model.config.cur_frames;
    let j = topo.num_joints();
    if traj_chunk.shape() != [f, 8] {
        return Err(Error::Shape(format!(
            "trajectory chunk {:?} vs (F={f}, 8)",
            traj_chunk.shape()
        )));
    }
    let fp = model.config.past_frames;
    let past_arrays = match past {
        Some((root, rot)) => {
            if root.shape() != [fp, 3] || rot.shape() != [fp, j, 6] {
                return Err(Error::Shape(format!(
                    "past arrays {:?}/{:?} vs (F'={fp}, J={j})",
                    root.shape(),
                    rot.shape()
                )));
            }
            let mut r3 = Array3::zeros((1, fp, 3));
            r3.slice_mut(ndarray::s![0, .., ..]).assign(root);
            let mut q4 = Array4::zeros((1, fp, j, 6));
            q4.slice_mut(ndarray::s![0, .., .., ..]).assign(rot);
            Some((r3, q4))
        }
        None => None,
    };

    let mut traj = Array3::zeros((1, f, 8));
    traj.slice_mut(ndarray::s![0, .., ..]).assign(traj_chunk);

    let guidance = GuidanceConfig {
        scale: guidance_scale,
        null_style_id: model.config.null_style_id(),
    };
    let null_emb = {
        let table = store.get(STYLE_TABLE);
        let dim = table.shape()[1];
        let mut e = Array2::zeros((1, dim));
        for d in 0..dim {
            e[[0, d]] = table[[guidance.null_style_id, d]];
        }
        e
    };

    let shapes = vec![vec![1, f, 3], vec![1, f, j, 6]];
    let n_steps = ddim_steps.min(schedule.steps());
    let out = ddim_sample_loop(&shapes, schedule, n_steps, &guidance, rng, |x, t, mode| {
        let cur_root: Array3<f64> = x[0]
            .clone()
            .into_dimensionality()
            .map_err(|e| Error::Shape(e.to_string()))?;
        let cur_rot: Array4<f64> = x[1]
            .clone()
            .into_dimensionality()
            .map_err(|e| Error::Shape(e.to_string()))?;
        let emb = match mode {
            CondMode::Conditional => style_emb,
            CondMode::Unconditional => &null_emb,
        };
        let inputs = DenoiserInputs {
            past_root: past_arrays.as_ref().map(|(r, _)| r),
            past_rot: past_arrays.as_ref().map(|(_, q)| q),
            cur_root: &cur_root,
            cur_rot: &cur_rot,
            traj: &traj,
            t: &[t],
        };
        let (root, rot, _) = crate::denoiser::denoise_forward(
            model,
            store,
            &inputs,
            &StyleCond::Embedding(emb),
            topo,
        )?;
        Ok(vec![root.into_dyn(), rot.into_dyn()])
    })?;

    let root: Array3<f64> = out[0]
        .clone()
        .into_dimensionality()
        .map_err(|e| Error::Shape(e.to_string()))?;
    let rot: Array4<f64> = out[1]
        .clone()
        .into_dimensionality()
        .map_err(|e| Error::Shape(e.to_string()))?;
    Ok((
        root.index_axis(ndarray::Axis(0), 0).to_owned(),
        rot.index_axis(ndarray::Axis(0), 0).to_owned(),
    ))
}

/// Generates an `n * F`-frame clip by chaining windows: each window after
/// the first reuses the last `F'` generated frames as past context.
#[allow(clippy::too_many_arguments)]
pub fn autoregressive_generate(
    model: &Denoiser,
    store: &ParamStore,
    schedule: &DiffusionSchedule,
    ddim_steps: usize,
    request: &GenerationRequest,
    topo: Arc<SkeletonTopology>,
    stats: &NormStats,
    frame_rate: f64,
) -> Result<(MotionClip, Vec<WindowRecord>)> {
    let f = model.config.cur_frames;
    let fp = model.config.past_frames;
    let total = request.trajectory.frames();
    if total == 0 || total % f != 0 {
        return Err(Error::Validation(format!(
            "trajectory length {total} must be a positive multiple of F = {f}"
        )));
    }
    let chunks = total / f;
    if request.styles.len() != 1 && request.styles.len() != chunks {
        return Err(Error::Config(format!(
            "need 1 or {chunks} style entries, got {}",
            request.styles.len()
        )));
    }

    let seed_norm = match &request.seed_motion {
        Some((root_m, rot)) => {
            if root_m.shape() != [fp, 3] || rot.shape() != [fp, topo.num_joints(), 6] {
                return Err(Error::Shape(format!(
                    "seed motion {:?}/{:?} vs (F'={fp}, J={})",
                    root_m.shape(),
                    rot.shape(),
                    topo.num_joints()
                )));
            }
            Some((stats.normalize(root_m.view()), rot.clone()))
        }
        None => None,
    };

    let mut rng = crate::rngs::derive_rng(request.seed, "generation");
    let mut records: Vec<WindowRecord> = Vec::with_capacity(chunks);
    for chunk in 0..chunks {
        let weights = if request.styles.len() == 1 {
            &request.styles[0]
        } else {
            &request.styles[chunk]
        };
        let style_emb = blend_styles(store, model.config.style_count, weights)?;
        let mut traj_chunk = Array2::zeros((f, 8));
        for i in 0..f {
            let src = chunk * f + i;
            traj_chunk[[i, 0]] = request.trajectory.positions[[src, 0]];
            traj_chunk[[i, 1]] = request.trajectory.positions[[src, 1]];
            for k in 0..6 {
                traj_chunk[[i, 2 + k]] = request.trajectory.rotations[[src, k]];
            }
        }
        // past context: seed motion for the first window, then an exact
        // copy of the previous window's last F' frames
        let past: Option<(Array2<f64>, Array3<f64>)> = if chunk == 0 {
            seed_norm.clone()
        } else {
            let prev = records.last().expect("previous window exists");
            let start = f - fp;
            Some((
                prev.out_root.slice(ndarray::s![start.., ..]).to_owned(),
                prev.out_rot.slice(ndarray::s![start.., .., ..]).to_owned(),
            ))
        };

        let begin = Instant::now();
        let (out_root, out_rot) = generate_window_normalized(
            model,
            store,
            schedule,
            ddim_steps,
            &style_emb,
            &traj_chunk,
            past.as_ref().map(|(r, q)| (r, q)),
            &topo,
            request.guidance_scale,
            &mut rng,
        )?;
        let millis = begin.elapsed().as_secs_f64() * 1e3;
        records.push(WindowRecord {
            past_root: past.as_ref().map(|(r, _)| r.clone()),
            past_rot: past.map(|(_, q)| q),
            out_root,
            out_rot,
            millis,
        });
    }

    let j = topo.num_joints();
    let mut root_norm = Array2::zeros((total, 3));
    let mut rot = Array3::zeros((total, j, 6));
    for (chunk, rec) in records.iter().enumerate() {
        root_norm
            .slice_mut(ndarray::s![chunk * f..(chunk + 1) * f, ..])
            .assign(&rec.out_root);
        rot.slice_mut(ndarray::s![chunk * f..(chunk + 1) * f, .., ..])
            .assign(&rec.out_rot);
    }
    let root_m = stats.denormalize(root_norm.view());
    let clip = MotionClip::new(topo, frame_rate, root_m, rot, 0, 0)?;
    Ok((clip, records))
}

/// Writes a generated clip as BVH; re-parsing reproduces FK positions
/// within `1e-4`.
pub fn export_generation(clip: &MotionClip, topo: &SkeletonTopology, path: &Path) -> Result<()> {
    if clip.frames() == 0 {
        return Err(Error::Export("refusing to export an empty clip".into()));
    }
    let bytes = write_bvh(topo, clip)?;
    std::fs::write(path, bytes)?;
    Ok(())
}

/// Resolves name-keyed style weights against a style table.
pub fn resolve_style_weights(
    names: &BTreeMap<String, f64>,
    lookup: impl Fn(&str) -> Result<usize>,
) -> Result<StyleWeights> {
    let mut out: StyleWeights = Vec::with_capacity(names.len());
    for (name, w) in names {
        out.push((lookup(name)?, *w));
    }
    out.sort_by_key(|(id, _)| *id);
    Ok(out)
}
