//! Versioned checkpoint container.
//!
//! One archive file holds a JSON header (format version, model config,
//! schedule, style table, per-dataset topology registry with norm stats,
//! optimizer hyperparameters, RNG states, step counter) plus raw f64
//! blobs for every weight tensor and both Adam moments. Loading rebuilds
//! a [`Trainer`] whose next forward pass is bit-identical to the saved
//! one.

use indexmap::IndexMap;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::container::{Container, ContainerWriter};
use crate::dataio::dataset::{DatasetInfo, StyleEntry};
use crate::denoiser::{Denoiser, DenoiserConfig};
use crate::error::{Error, Result};
use crate::nn::params::AdamState;
use crate::schedule::{DiffusionSchedule, ScheduleKind};

use super::{TrainRngs, TrainSettings, Trainer};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct RngStates {
    sampler: ChaCha8Rng,
    noise: ChaCha8Rng,
    dropout: ChaCha8Rng,
    augment: ChaCha8Rng,
}

/// Everything in the header except weight data.
#[derive(Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub model: DenoiserConfig,
    pub schedule_kind: ScheduleKind,
    pub schedule_steps: usize,
    pub settings: TrainSettings,
    pub styles: Vec<StyleEntry>,
    pub datasets: Vec<DatasetInfo>,
    pub step: u64,
    pub adam_step: u64,
    rngs: RngStates,
    param_names: Vec<String>,
}

/// A loaded checkpoint: trainer state plus the data-space registry.
pub struct Checkpoint {
    pub trainer: Trainer,
    pub styles: Vec<StyleEntry>,
    pub datasets: Vec<DatasetInfo>,
}

/// Writes the trainer and registry to `path`.
pub fn save_checkpoint(
    path: &Path,
    trainer: &Trainer,
    styles: &[StyleEntry],
    datasets: &[DatasetInfo],
) -> Result<()> {
    let meta = CheckpointMeta {
        format_version: CHECKPOINT_FORMAT_VERSION,
        model: trainer.model.config.clone(),
        schedule_kind: trainer.schedule.kind(),
        schedule_steps: trainer.schedule.steps(),
        settings: trainer.settings.clone(),
        styles: styles.to_vec(),
        datasets: datasets.to_vec(),
        step: trainer.step,
        adam_step: trainer.adam.state.step,
        rngs: RngStates {
            sampler: trainer.rngs.sampler.clone(),
            noise: trainer.rngs.noise.clone(),
            dropout: trainer.rngs.dropout.clone(),
            augment: trainer.rngs.augment.clone(),
        },
        param_names: trainer.store.names().map(String::from).collect(),
    };
    let mut w = ContainerWriter::new(&meta)?;
    for (name, arr) in trainer.store.iter() {
        w.add_f64(&format!("param/{name}"), arr)?;
    }
    for (name, arr) in &trainer.adam.state.m {
        w.add_f64(&format!("adam_m/{name}"), arr)?;
    }
    for (name, arr) in &trainer.adam.state.v {
        w.add_f64(&format!("adam_v/{name}"), arr)?;
    }
    w.write_to(path)
}

/// Loads a checkpoint, rebuilding the model and optimizer exactly.
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let c = Container::read_from(path)?;
    let meta: CheckpointMeta = c.meta()?;
    if meta.format_version != CHECKPOINT_FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "checkpoint version {} unsupported (expected {CHECKPOINT_FORMAT_VERSION})",
            meta.format_version
        )));
    }
    // construct with a throwaway rng; every tensor is overwritten below
    let mut init_rng = crate::rngs::derive_rng(0, "checkpoint-reload");
    let (model, mut store) = Denoiser::new(meta.model.clone(), &mut init_rng)?;

    let mut values = IndexMap::new();
    let mut adam_m = IndexMap::new();
    let mut adam_v = IndexMap::new();
    for name in &meta.param_names {
        values.insert(name.clone(), c.get_f64(&format!("param/{name}"))?);
        if c.names().any(|n| n == format!("adam_m/{name}")) {
            adam_m.insert(name.clone(), c.get_f64(&format!("adam_m/{name}"))?);
            adam_v.insert(name.clone(), c.get_f64(&format!("adam_v/{name}"))?);
        }
    }
    store.load_values(values)?;

    let schedule = DiffusionSchedule::new(meta.schedule_kind, meta.schedule_steps)?;
    let mut trainer = Trainer::new(model, store, schedule, meta.settings);
    trainer.step = meta.step;
    trainer.adam.state = AdamState { step: meta.adam_step, m: adam_m, v: adam_v };
    trainer.rngs = TrainRngs {
        sampler: meta.rngs.sampler,
        noise: meta.rngs.noise,
        dropout: meta.rngs.dropout,
        augment: meta.rngs.augment,
    };
    Ok(Checkpoint { trainer, styles: meta.styles, datasets: meta.datasets })
}
