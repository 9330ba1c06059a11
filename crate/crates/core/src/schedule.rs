//! Diffusion machinery: noise schedules, forward noising, deterministic
//! DDIM stepping, and classifier-free guidance.
//!
//! The model predicts the clean sample (`x0`-prediction), so guidance and
//! DDIM both operate in `x0` space. Sampling is deterministic (`eta = 0`):
//! the whole reverse loop is a pure function of the initial noise.

use ndarray::ArrayD;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::str::FromStr;

use crate::error::{Error, Result};

/// Noise schedule family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    /// `alpha_bar(t) = f(t)/f(0)` with `f(t) = cos^2(((t/T + s)/(1 + s)) * pi/2)`,
    /// `s = 0.008`, betas clamped at 0.999.
    Cosine,
    /// Betas evenly spaced in `[1e-4, 0.02]`.
    Linear,
}

impl FromStr for ScheduleKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cosine" => Ok(ScheduleKind::Cosine),
            "linear" => Ok(ScheduleKind::Linear),
            other => Err(Error::Config(format!("unknown schedule kind {other:?}"))),
        }
    }
}

/// Per-step cumulative signal coefficients for DDPM training and DDIM
/// inference.
///
/// `alpha_bar` has length `T + 1` with `alpha_bar[0] = 1` and is strictly
/// decreasing in `(0, 1]`.
#[derive(Debug, Clone)]
pub struct DiffusionSchedule {
    kind: ScheduleKind,
    alpha_bar: Vec<f64>,
}

impl DiffusionSchedule {
    pub fn new(kind: ScheduleKind, steps: usize) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Config("schedule needs at least one step".into()));
        }
        let alpha_bar = match kind {
            ScheduleKind::Cosine => {
                let s = 0.008;
                let f = |t: f64| {
                    let x = ((t / steps as f64 + s) / (1.0 + s)) * std::f64::consts::FRAC_PI_2;
                    x.cos().powi(2)
                };
                let f0 = f(0.0);
                let mut bar = Vec::with_capacity(steps + 1);
                bar.push(1.0);
                let mut cur = 1.0;
                for t in 1..=steps {
                    let beta = (1.0 - (f(t as f64) / f0) / (f((t - 1) as f64) / f0)).min(0.999);
                    cur *= 1.0 - beta;
                    bar.push(cur);
                }
                bar
            }
            ScheduleKind::Linear => {
                let (lo, hi) = (1e-4, 0.02);
                let mut bar = Vec::with_capacity(steps + 1);
                bar.push(1.0);
                let mut cur = 1.0;
                for t in 1..=steps {
                    let beta = if steps == 1 {
                        lo
                    } else {
                        lo + (hi - lo) * (t - 1) as f64 / (steps - 1) as f64
                    };
                    cur *= 1.0 - beta;
                    bar.push(cur);
                }
                bar
            }
        };
        debug_assert!(alpha_bar.windows(2).all(|w| w[1] < w[0]));
        Ok(DiffusionSchedule { kind, alpha_bar })
    }

    /// Schedule with explicit `alpha_bar` values (tests and fixtures).
    pub fn from_alpha_bar(kind: ScheduleKind, alpha_bar: Vec<f64>) -> Result<Self> {
        if alpha_bar.len() < 2 || (alpha_bar[0] - 1.0).abs() > 1e-12 {
            return Err(Error::Config("alpha_bar must start at 1 with length T+1".into()));
        }
        Ok(DiffusionSchedule { kind, alpha_bar })
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    /// Training step count `T`.
    pub fn steps(&self) -> usize {
        self.alpha_bar.len() - 1
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }
}

/// Classifier-free guidance parameters.
///
/// `null_style_id` is the reserved embedding row used for the
/// unconditional branch; it lies outside the real style table.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct GuidanceConfig {
    pub scale: f64,
    pub null_style_id: usize,
}

/// Forward noising: `x_t = sqrt(alpha_bar[t]) * x0 + sqrt(1 - alpha_bar[t]) * eps`.
pub fn q_sample(
    x0: &ArrayD<f64>,
    t: usize,
    eps: &ArrayD<f64>,
    schedule: &DiffusionSchedule,
) -> Result<ArrayD<f64>> {
    if x0.shape() != eps.shape() {
        return Err(Error::Shape(format!(
            "x0 {:?} vs eps {:?}",
            x0.shape(),
            eps.shape()
        )));
    }
    let ab = schedule.alpha_bar(t);
    Ok(x0 * ab.sqrt() + eps * (1.0 - ab).sqrt())
}

/// Guidance in x0-prediction space:
/// `x0 = x0_uncond + w * (x0_cond - x0_uncond)`.
pub fn cfg_combine(cond: &ArrayD<f64>, uncond: &ArrayD<f64>, w: f64) -> ArrayD<f64> {
    uncond + &((cond - uncond) * w)
}

/// One deterministic DDIM step from `t` down to `t_prev`.
///
/// Recovers the implied noise `eps = (x_t - sqrt(ab_t) x0) / sqrt(1 - ab_t)`
/// and re-applies it at `t_prev`.
pub fn ddim_step(
    x_t: &ArrayD<f64>,
    x0_hat: &ArrayD<f64>,
    t: usize,
    t_prev: usize,
    schedule: &DiffusionSchedule,
) -> Result<ArrayD<f64>> {
    if t == 0 {
        return Err(Error::Validation("ddim_step cannot start from t = 0".into()));
    }
    if t_prev >= t {
        return Err(Error::Validation(format!(
            "t_prev ({t_prev}) must be below t ({t})"
        )));
    }
    let ab_t = schedule.alpha_bar(t);
    let ab_p = schedule.alpha_bar(t_prev);
    let eps = (x_t - &(x0_hat * ab_t.sqrt())) / (1.0 - ab_t).sqrt();
    Ok(x0_hat * ab_p.sqrt() + &(eps * (1.0 - ab_p).sqrt()))
}

/// Evenly spaced descending timesteps `T = tau_0 > tau_1 > ... > tau_n = 0`.
pub fn ddim_timesteps(train_steps: usize, n_steps: usize) -> Result<Vec<usize>> {
    if n_steps == 0 || n_steps > train_steps {
        return Err(Error::Config(format!(
            "n_steps ({n_steps}) must be in 1..={train_steps}"
        )));
    }
    let mut taus: Vec<usize> = (0..=n_steps)
        .map(|i| ((train_steps as f64) * (n_steps - i) as f64 / n_steps as f64).round() as usize)
        .collect();
    taus.dedup();
    Ok(taus)
}

/// Which branch of the denoiser a sampling call should run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CondMode {
    Conditional,
    Unconditional,
}

/// Runs the full deterministic DDIM loop over one or more equally shaped
/// sample streams (e.g. root positions and joint rotations).
///
/// Starts from unit Gaussian noise drawn from `rng`, visits `n_steps`
/// evenly spaced timesteps descending to 0, and applies [`cfg_combine`]
/// whenever `guidance.scale != 1`. `denoise` maps
/// `(streams at x_t, t, mode)` to the predicted clean streams.
pub fn ddim_sample_loop<F>(
    shapes: &[Vec<usize>],
    schedule: &DiffusionSchedule,
    n_steps: usize,
    guidance: &GuidanceConfig,
    rng: &mut ChaCha8Rng,
    mut denoise: F,
) -> Result<Vec<ArrayD<f64>>>
where
    F: FnMut(&[ArrayD<f64>], usize, CondMode) -> Result<Vec<ArrayD<f64>>>,
{
    let taus = ddim_timesteps(schedule.steps(), n_steps)?;
    let mut x: Vec<ArrayD<f64>> = shapes
        .iter()
        .map(|s| {
            let n: usize = s.iter().product();
            let data: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
            ArrayD::from_shape_vec(ndarray::IxDyn(s), data).expect("shape/product mismatch")
        })
        .collect();

    for pair in taus.windows(2) {
        let (t, t_prev) = (pair[0], pair[1]);
        let cond = denoise(&x, t, CondMode::Conditional)?;
        let x0_hat = if (guidance.scale - 1.0).abs() > 1e-12 {
            let uncond = denoise(&x, t, CondMode::Unconditional)?;
            cond.iter()
                .zip(&uncond)
                .map(|(c, u)| cfg_combine(c, u, guidance.scale))
                .collect()
        } else {
            cond
        };
        x = x
            .iter()
            .zip(&x0_hat)
            .map(|(xt, x0)| ddim_step(xt, x0, t, t_prev, schedule))
            .collect::<Result<Vec<_>>>()?;
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::IxDyn;
    use rand_chacha::rand_core::SeedableRng;

    fn arr(vals: &[f64]) -> ArrayD<f64> {
        ArrayD::from_shape_vec(IxDyn(&[vals.len()]), vals.to_vec()).unwrap()
    }

    #[test]
    fn cosine_endpoints() {
        for steps in [1usize, 10, 50, 100] {
            let s = DiffusionSchedule::new(ScheduleKind::Cosine, steps).unwrap();
            assert_eq!(s.alpha_bar(0), 1.0);
            assert!(s.alpha_bar(steps) > 0.0);
            for t in 1..=steps {
                assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
                assert!(s.alpha_bar(t) > 0.0 && s.alpha_bar(t) <= 1.0);
            }
        }
        let s = DiffusionSchedule::new(ScheduleKind::Cosine, 50).unwrap();
        assert!(s.alpha_bar(50) < 0.01, "alpha_bar[50] = {}", s.alpha_bar(50));
    }

    #[test]
    fn linear_schedule_strictly_decreasing() {
        let s = DiffusionSchedule::new(ScheduleKind::Linear, 1000).unwrap();
        for t in 1..=1000 {
            assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
        }
    }

    #[test]
    fn unknown_kind_rejected() {
        assert!("quadratic".parse::<ScheduleKind>().is_err());
        assert_eq!("cosine".parse::<ScheduleKind>().unwrap(), ScheduleKind::Cosine);
    }

    #[test]
    fn q_sample_identity_at_t0() {
        let s = DiffusionSchedule::new(ScheduleKind::Cosine, 50).unwrap();
        let x0 = arr(&[1.0, -2.0, 0.5]);
        let eps = arr(&[0.3, 0.7, -0.2]);
        let xt = q_sample(&x0, 0, &eps, &s).unwrap();
        assert_eq!(xt, x0);
    }

    #[test]
    fn q_sample_pure_noise_for_zero_signal() {
        let s = DiffusionSchedule::new(ScheduleKind::Cosine, 50).unwrap();
        let x0 = arr(&[0.0, 0.0]);
        let eps = arr(&[1.0, -1.0]);
        let t = 20;
        let xt = q_sample(&x0, t, &eps, &s).unwrap();
        let c = (1.0 - s.alpha_bar(t)).sqrt();
        assert_abs_diff_eq!(xt[[0]], c, epsilon = 1e-15);
        assert_abs_diff_eq!(xt[[1]], -c, epsilon = 1e-15);
    }

    #[test]
    fn q_sample_monte_carlo_moments() {
        let s = DiffusionSchedule::new(ScheduleKind::Cosine, 50).unwrap();
        let t = 25;
        let x0 = arr(&[0.8]);
        let mut rng = crate::rngs::derive_rng(11, "qsample-mc");
        let n = 100_000;
        let (mut sum, mut sumsq) = (0.0, 0.0);
        for _ in 0..n {
            let e: f64 = rng.sample(StandardNormal);
            let xt = q_sample(&x0, t, &arr(&[e]), &s).unwrap()[[0]];
            sum += xt;
            sumsq += xt * xt;
        }
        let mean = sum / n as f64;
        let var = sumsq / n as f64 - mean * mean;
        let expect_mean = s.alpha_bar(t).sqrt() * 0.8;
        let expect_var = 1.0 - s.alpha_bar(t);
        assert!((mean - expect_mean).abs() < 0.01 * expect_mean.abs().max(1.0));
        assert!((var - expect_var).abs() < 0.01 * expect_var);
    }

    #[test]
    fn cfg_combine_endpoints_and_linearity() {
        let c = arr(&[1.0]);
        let u = arr(&[0.0]);
        assert_eq!(cfg_combine(&c, &u, 1.0), c);
        assert_eq!(cfg_combine(&c, &u, 0.0), u);
        assert_eq!(cfg_combine(&c, &u, 2.0)[[0]], 2.0);
        // swapping branches with w -> 1 - w gives the same combination
        let w = 1.7;
        let a = cfg_combine(&c, &u, w);
        let b = cfg_combine(&u, &c, 1.0 - w);
        assert_abs_diff_eq!(a[[0]], b[[0]], epsilon = 1e-12);
    }

    #[test]
    fn ddim_step_returns_x0_at_zero() {
        let s = DiffusionSchedule::new(ScheduleKind::Cosine, 50).unwrap();
        let x0 = arr(&[0.4, -0.9]);
        let xt = arr(&[1.5, 0.2]);
        let out = ddim_step(&xt, &x0, 50, 0, &s).unwrap();
        for i in 0..2 {
            assert_abs_diff_eq!(out[[i]], x0[[i]], epsilon = 1e-12);
        }
    }

    #[test]
    fn ddim_step_scalar_fixture() {
        // alpha_bar = [1, 0.81, 0.25]; step from t=2 to t_prev=1
        let s =
            DiffusionSchedule::from_alpha_bar(ScheduleKind::Cosine, vec![1.0, 0.81, 0.25]).unwrap();
        let out = ddim_step(&arr(&[1.0]), &arr(&[0.0]), 2, 1, &s).unwrap();
        let expect = (0.19f64 / 0.75).sqrt();
        assert_abs_diff_eq!(out[[0]], expect, epsilon = 1e-12);
    }

    #[test]
    fn ddim_step_rejects_bad_timesteps() {
        let s = DiffusionSchedule::new(ScheduleKind::Cosine, 50).unwrap();
        let x = arr(&[0.0]);
        assert!(ddim_step(&x, &x, 0, 0, &s).is_err());
        assert!(ddim_step(&x, &x, 10, 10, &s).is_err());
    }

    #[test]
    fn timesteps_cover_every_step_when_full() {
        let taus = ddim_timesteps(50, 50).unwrap();
        assert_eq!(taus, (0..=50).rev().collect::<Vec<_>>());
        let taus4 = ddim_timesteps(50, 4).unwrap();
        assert_eq!(taus4.first(), Some(&50));
        assert_eq!(taus4.last(), Some(&0));
        assert_eq!(taus4.len(), 5);
    }

    #[test]
    fn perfect_oracle_reconstructs_x0_through_chain() {
        // x_T on the q_sample path; oracle always answers the true x0.
        let s = DiffusionSchedule::new(ScheduleKind::Cosine, 50).unwrap();
        let x0 = arr(&[0.7, -0.3, 1.2]);
        let eps = arr(&[0.5, 1.1, -0.8]);
        let mut x = q_sample(&x0, 50, &eps, &s).unwrap();
        for pair in ddim_timesteps(50, 50).unwrap().windows(2) {
            x = ddim_step(&x, &x0, pair[0], pair[1], &s).unwrap();
        }
        for i in 0..3 {
            assert_abs_diff_eq!(x[[i]], x0[[i]], epsilon = 1e-5);
        }
    }

    #[test]
    fn sample_loop_perfect_oracle_and_determinism() {
        let s = DiffusionSchedule::new(ScheduleKind::Cosine, 50).unwrap();
        let x0 = arr(&[0.25, -0.5]);
        let g = GuidanceConfig { scale: 1.0, null_style_id: 0 };
        let run = |seed: u64| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            ddim_sample_loop(&[vec![2]], &s, 4, &g, &mut rng, |_x, _t, _m| {
                Ok(vec![x0.clone()])
            })
            .unwrap()
        };
        let a = run(3);
        let b = run(3);
        assert_eq!(a[0], b[0], "same seed must be bit-identical");
        for i in 0..2 {
            assert_abs_diff_eq!(a[0][[i]], x0[[i]], epsilon = 1e-5);
        }
    }

    #[test]
    fn sample_loop_applies_guidance() {
        let s = DiffusionSchedule::new(ScheduleKind::Cosine, 50).unwrap();
        let g = GuidanceConfig { scale: 2.0, null_style_id: 0 };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        // cond = 1, uncond = 0 -> guided x0 = 2 everywhere
        let out = ddim_sample_loop(&[vec![1]], &s, 4, &g, &mut rng, |_x, _t, m| {
            Ok(vec![arr(&[if m == CondMode::Conditional { 1.0 } else { 0.0 }])])
        })
        .unwrap();
        assert_abs_diff_eq!(out[0][[0]], 2.0, epsilon = 1e-5);
    }
}
