//! Prepared dataset: parsed clips grouped by source dataset with a global
//! style table, per-dataset normalization stats, splits, and a binary
//! cache file.
//!
//! Styles from different datasets never collide: the global table is
//! ordered by `(dataset, style)` and entry `i` is addressed externally as
//! `"{dataset}/{style}"`. Each dataset keeps one skeleton and one set of
//! min-max root stats computed from its training split.

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use crate::container::{Container, ContainerWriter};
use crate::error::{Error, Result};
use crate::skeleton::SkeletonTopology;

use super::{
    compute_norm_stats, make_windows, ManifestEntry, MotionClip, MotionWindow, NormStats, Split,
};

pub const CACHE_FORMAT_VERSION: u32 = 1;

/// Per-source-dataset metadata.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetInfo {
    pub name: String,
    pub topology: SkeletonTopology,
    pub frame_rate: f64,
    pub norm_stats: NormStats,
}

/// One global style entry.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StyleEntry {
    pub dataset: String,
    pub style: String,
}

impl StyleEntry {
    pub fn qualified(&self) -> String {
        format!("{}/{}", self.dataset, self.style)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClipRecord {
    pub source_path: String,
    pub dataset_id: usize,
    pub style_id: usize,
    pub split: Split,
    pub frames: usize,
}

#[derive(Serialize, Deserialize)]
struct CacheMeta {
    format_version: u32,
    datasets: Vec<DatasetInfo>,
    styles: Vec<StyleEntry>,
    clips: Vec<ClipRecord>,
}

/// All clips of a corpus, ready for windowing and training.
pub struct PreparedDataset {
    pub datasets: Vec<DatasetInfo>,
    pub styles: Vec<StyleEntry>,
    pub records: Vec<ClipRecord>,
    pub clips: Vec<MotionClip>,
    topologies: Vec<Arc<SkeletonTopology>>,
}

/// Windows grouped by dataset (same-skeleton batches come from one group).
pub struct WindowSet {
    pub per_dataset: Vec<Vec<MotionWindow>>,
}

impl WindowSet {
    pub fn total(&self) -> usize {
        self.per_dataset.iter().map(Vec::len).sum()
    }
}

impl PreparedDataset {
    /// Assembles a dataset from manifest entries (with splits assigned)
    /// and the clips parsed from them, in matching order.
    ///
    /// `toe_names` is the pool of toe joint names; each dataset flags the
    /// subset present in its skeleton. With `normalize` off, stats are the
    /// identity map (ablation support).
    pub fn build(
        entries: &[ManifestEntry],
        parsed: Vec<(Arc<SkeletonTopology>, MotionClip)>,
        toe_names: &[String],
        normalize: bool,
    ) -> Result<Self> {
        if entries.len() != parsed.len() || entries.is_empty() {
            return Err(Error::Config(format!(
                "manifest entries ({}) and parsed clips ({}) must match and be nonempty",
                entries.len(),
                parsed.len()
            )));
        }
        for e in entries {
            if e.split.is_none() {
                return Err(Error::Config(format!("clip {:?} has no split assigned", e.path)));
            }
        }

        let mut dataset_names: Vec<String> =
            entries.iter().map(|e| e.dataset_name.clone()).collect();
        dataset_names.sort();
        dataset_names.dedup();

        let mut style_keys: Vec<(String, String)> = entries
            .iter()
            .map(|e| (e.dataset_name.clone(), e.style_name.clone()))
            .collect();
        style_keys.sort();
        style_keys.dedup();
        let styles: Vec<StyleEntry> = style_keys
            .iter()
            .map(|(d, s)| StyleEntry { dataset: d.clone(), style: s.clone() })
            .collect();

        // one topology per dataset, re-validated with its toe subset
        let mut topo_by_dataset: BTreeMap<String, Arc<SkeletonTopology>> = BTreeMap::new();
        for (e, (topo, _)) in entries.iter().zip(&parsed) {
            match topo_by_dataset.get(&e.dataset_name) {
                None => {
                    let present: Vec<String> = toe_names
                        .iter()
                        .filter(|n| topo.joint_index(n).is_some())
                        .cloned()
                        .collect();
                    let with_toes = SkeletonTopology::new(
                        topo.joint_names().to_vec(),
                        topo.parent_index().to_vec(),
                        topo.rest_offsets().to_vec(),
                        &present,
                    )?;
                    topo_by_dataset.insert(e.dataset_name.clone(), Arc::new(with_toes));
                }
                Some(existing) => {
                    if existing.joint_names() != topo.joint_names()
                        || existing.parent_index() != topo.parent_index()
                    {
                        return Err(Error::Config(format!(
                            "dataset {:?} mixes different skeletons (clip {:?})",
                            e.dataset_name, e.path
                        )));
                    }
                }
            }
        }

        let style_id = |e: &ManifestEntry| {
            styles
                .iter()
                .position(|s| s.dataset == e.dataset_name && s.style == e.style_name)
                .expect("style table covers all entries")
        };
        let dataset_id =
            |e: &ManifestEntry| dataset_names.iter().position(|d| *d == e.dataset_name).expect("known dataset");

        let mut records = Vec::with_capacity(entries.len());
        let mut clips = Vec::with_capacity(entries.len());
        for (e, (_, clip)) in entries.iter().zip(parsed.into_iter()) {
            let did = dataset_id(e);
            let topo = topo_by_dataset[&e.dataset_name].clone();
            let clip = MotionClip::new(
                topo,
                clip.frame_rate,
                clip.root_pos,
                clip.joint_rot,
                style_id(e),
                did,
            )?;
            records.push(ClipRecord {
                source_path: e.path.clone(),
                dataset_id: did,
                style_id: style_id(e),
                split: e.split.expect("split checked above"),
                frames: clip.frames(),
            });
            clips.push(clip);
        }

        let mut datasets = Vec::with_capacity(dataset_names.len());
        for (did, name) in dataset_names.iter().enumerate() {
            let train_clips: Vec<&MotionClip> = records
                .iter()
                .zip(&clips)
                .filter(|(r, _)| r.dataset_id == did && r.split == Split::Train)
                .map(|(_, c)| c)
                .collect();
            if train_clips.is_empty() {
                return Err(Error::Config(format!("dataset {name:?} has no training clips")));
            }
            let norm_stats = if normalize {
                compute_norm_stats(train_clips.into_iter())?
            } else {
                NormStats::identity()
            };
            let frame_rate = records
                .iter()
                .zip(&clips)
                .find(|(r, _)| r.dataset_id == did)
                .map(|(_, c)| c.frame_rate)
                .expect("dataset has clips");
            datasets.push(DatasetInfo {
                name: name.clone(),
                topology: (*topo_by_dataset[name]).clone(),
                frame_rate,
                norm_stats,
            });
        }

        let topologies = datasets.iter().map(|d| Arc::new(d.topology.clone())).collect();
        Ok(PreparedDataset { datasets, styles, records, clips, topologies })
    }

    pub fn topology(&self, dataset_id: usize) -> Arc<SkeletonTopology> {
        self.topologies[dataset_id].clone()
    }

    pub fn style_id(&self, name: &str) -> Result<usize> {
        // qualified "dataset/style" first, then bare style when unambiguous
        if let Some(i) = self.styles.iter().position(|s| s.qualified() == name) {
            return Ok(i);
        }
        let matches: Vec<usize> = self
            .styles
            .iter()
            .enumerate()
            .filter(|(_, s)| s.style == name)
            .map(|(i, _)| i)
            .collect();
        match matches.as_slice() {
            [one] => Ok(*one),
            [] => Err(Error::Config(format!("unknown style {name:?}"))),
            _ => Err(Error::Config(format!(
                "style {name:?} is ambiguous across datasets; qualify as dataset/style"
            ))),
        }
    }

    /// Builds sliding windows for a split, grouped by dataset.
    pub fn windows(&self, split: Split, cur: usize, past: usize, stride: usize) -> Result<WindowSet> {
        let mut per_dataset: Vec<Vec<MotionWindow>> = vec![Vec::new(); self.datasets.len()];
        for (rec, clip) in self.records.iter().zip(&self.clips) {
            if rec.split != split {
                continue;
            }
            let stats = &self.datasets[rec.dataset_id].norm_stats;
            per_dataset[rec.dataset_id]
                .extend(make_windows(clip, stats, cur, past, stride)?);
        }
        Ok(WindowSet { per_dataset })
    }

    /// Clips of one split (records paired with data).
    pub fn split_clips(&self, split: Split) -> Vec<(&ClipRecord, &MotionClip)> {
        self.records
            .iter()
            .zip(&self.clips)
            .filter(|(r, _)| r.split == split)
            .collect()
    }

    /// Human-readable per-split summary: clips, frames, distinct styles.
    pub fn summary(&self) -> String {
        let mut out = String::new();
        for split in [Split::Train, Split::Val, Split::Test] {
            let rows: Vec<&ClipRecord> =
                self.records.iter().filter(|r| r.split == split).collect();
            let frames: usize = rows.iter().map(|r| r.frames).sum();
            let styles: std::collections::BTreeSet<usize> =
                rows.iter().map(|r| r.style_id).collect();
            out.push_str(&format!(
                "{:?}: {} clips, {} frames, {} styles\n",
                split,
                rows.len(),
                frames,
                styles.len()
            ));
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = CacheMeta {
            format_version: CACHE_FORMAT_VERSION,
            datasets: self.datasets.clone(),
            styles: self.styles.clone(),
            clips: self.records.clone(),
        };
        let mut w = ContainerWriter::new(&meta)?;
        for (i, clip) in self.clips.iter().enumerate() {
            w.add_f64(&format!("clip{i}/root_pos"), &clip.root_pos.clone().into_dyn())?;
            w.add_f64(&format!("clip{i}/joint_rot"), &clip.joint_rot.clone().into_dyn())?;
        }
        w.write_to(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let c = Container::read_from(path)?;
        let meta: CacheMeta = c.meta()?;
        if meta.format_version != CACHE_FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "dataset cache version {} unsupported (expected {CACHE_FORMAT_VERSION})",
                meta.format_version
            )));
        }
        let topologies: Vec<Arc<SkeletonTopology>> =
            meta.datasets.iter().map(|d| Arc::new(d.topology.clone())).collect();
        let mut clips = Vec::with_capacity(meta.clips.len());
        for (i, rec) in meta.clips.iter().enumerate() {
            let root = c.get_f64(&format!("clip{i}/root_pos"))?;
            let rot = c.get_f64(&format!("clip{i}/joint_rot"))?;
            let root: Array2<f64> = root
                .into_dimensionality()
                .map_err(|e| Error::Checkpoint(format!("clip{i} root: {e}")))?;
            let rot: Array3<f64> = rot
                .into_dimensionality()
                .map_err(|e| Error::Checkpoint(format!("clip{i} rot: {e}")))?;
            clips.push(MotionClip::new(
                topologies[rec.dataset_id].clone(),
                meta.datasets[rec.dataset_id].frame_rate,
                root,
                rot,
                rec.style_id,
                rec.dataset_id,
            )?);
        }
        Ok(PreparedDataset {
            datasets: meta.datasets,
            styles: meta.styles,
            records: meta.clips,
            clips,
            topologies,
        })
    }
}
