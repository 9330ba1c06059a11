//! The skeleton-agnostic UNet denoiser.
//!
//! Motion is embedded as a `(time x joint-token)` grid with one dedicated
//! root-position pseudo-token per frame, so a single weight set processes
//! any joint count without padding. Temporal 1D convolutions (shared
//! across joint tokens) run at every level; the downsampled levels add an
//! attention stack: FiLM conditioning on (time step, style), temporal
//! self-attention per joint token, ancestor-masked joint self-attention
//! per frame, cross-attention into the trajectory tokens, and a pointwise
//! feed-forward, each residual.
//!
//! Encoder levels operate at temporal lengths `(T, T/2, T/2)` where
//! `T = F' + F`; the decoder mirrors them and skip connections are
//! concatenated channel-wise. The network predicts the clean sample
//! (`x0`) for the `F` current frames only.

use ndarray::{Array2, Array3, Array4, ArrayD, IxDyn};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::graph::{Graph, Var};
use crate::nn::layers::{
    group_norm, sinusoidal_encoding, timestep_embedding, Conv1d, FeedForward, Linear,
    MultiHeadAttn,
};
use crate::nn::params::{Binding, Init, ParamStore};
use crate::skeleton::{AncestorMask, SkeletonTopology};

/// Architecture hyperparameters.
///
/// Channel widths per level are `base_channels * [1, 2, 4]`; three levels
/// in encoder and decoder each.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DenoiserConfig {
    pub base_channels: usize,
    pub heads: usize,
    pub groupnorm_groups: usize,
    pub style_count: usize,
    pub style_embed_dim: usize,
    pub time_embed_dim: usize,
    /// Current (generated) frames per window.
    pub cur_frames: usize,
    /// Past (context) frames per window.
    pub past_frames: usize,
    /// Rows in the learned joint-depth table (depths clamp to the last row).
    pub depth_table: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        DenoiserConfig {
            base_channels: 64,
            heads: 4,
            groupnorm_groups: 8,
            style_count: 1,
            style_embed_dim: 64,
            time_embed_dim: 64,
            cur_frames: 56,
            past_frames: 8,
            depth_table: 16,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        let t = self.cur_frames + self.past_frames;
        if t % 4 != 0 || self.cur_frames % 4 != 0 {
            return Err(Error::Config(format!(
                "F ({}) and F + F' ({t}) must be divisible by 4",
                self.cur_frames
            )));
        }
        if self.base_channels % self.groupnorm_groups != 0 {
            return Err(Error::Config(format!(
                "base_channels ({}) must divide into {} groupnorm groups",
                self.base_channels, self.groupnorm_groups
            )));
        }
        if self.base_channels % self.heads != 0 {
            return Err(Error::Config(format!(
                "base_channels ({}) must divide into {} heads",
                self.base_channels, self.heads
            )));
        }
        if self.style_count == 0 || self.style_embed_dim == 0 || self.time_embed_dim == 0 {
            return Err(Error::Config("style/time embedding sizes must be positive".into()));
        }
        if self.depth_table < 2 {
            return Err(Error::Config("depth table needs at least 2 rows".into()));
        }
        Ok(())
    }

    /// Reserved unconditional row: one past the real style table.
    pub fn null_style_id(&self) -> usize {
        self.style_count
    }
}

/// Sizes observed during one forward pass (skeleton-agnosticism checks).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ForwardStats {
    /// Joint-token axis length `J + 1`.
    pub joint_tokens: usize,
    /// Total key rows consumed by joint attention across the batch.
    pub joint_attn_kv_rows: usize,
    /// Temporal lengths at each encoder level.
    pub level_lengths: [usize; 3],
}

/// Batch inputs to the denoiser. Current frames are noisy; past frames,
/// when present, are clean context.
pub struct DenoiserInputs<'a> {
    pub past_root: Option<&'a Array3<f64>>,
    pub past_rot: Option<&'a Array4<f64>>,
    pub cur_root: &'a Array3<f64>,
    pub cur_rot: &'a Array4<f64>,
    /// `(B, F, 8)` trajectory rows `Tp || Tr`.
    pub traj: &'a Array3<f64>,
    /// Per-sample diffusion timesteps.
    pub t: &'a [usize],
}

/// Style conditioning: table rows by id, or an explicit (blended)
/// embedding matrix.
pub enum StyleCond<'a> {
    Ids(&'a [usize]),
    Embedding(&'a Array2<f64>),
}

/// Embeddings shared by every attention stack in one forward pass.
pub struct ConditionBundle {
    pub style_emb: Var,
    pub time_emb: Var,
    pub traj_tokens: Var,
}

/// The token grid at one UNet level plus the metadata attention needs.
pub struct TokenGrid {
    pub features: Var,
    /// Original-resolution coordinate of each frame in the grid.
    pub frame_pos: Vec<f64>,
}

struct ConvBlock {
    norm_groups: usize,
    conv1: Conv1d,
    conv2: Conv1d,
    skip: Option<Linear>,
    in_ch: usize,
    out_ch: usize,
}

impl ConvBlock {
    fn new(name: &str, in_ch: usize, out_ch: usize, groups: usize) -> Self {
        ConvBlock {
            norm_groups: groups,
            conv1: Conv1d::new(format!("{name}.conv1"), in_ch, out_ch, 1),
            conv2: Conv1d::new(format!("{name}.conv2"), out_ch, out_ch, 1),
            skip: (in_ch != out_ch).then(|| Linear::new(format!("{name}.skip"), in_ch, out_ch)),
            in_ch,
            out_ch,
        }
    }

    fn init(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) {
        self.conv1.init(store, rng);
        self.conv2.init(store, rng);
        if let Some(s) = &self.skip {
            s.init(store, rng);
        }
    }

    /// `(B, T, J', Cin) -> (B, T, J', Cout)`; convs run along time with
    /// joint tokens folded into the batch.
    fn forward(&self, g: &mut Graph, bind: &Binding, x: Var) -> Var {
        let (b, t, j, _c) = grid_dims(g, x);
        let groups = self.norm_groups.min(self.in_ch);
        let h = group_norm(g, x, groups, 1e-5);
        let h = g.silu(h);
        let folded = fold_joints(g, h, b, t, j, self.in_ch);
        let h = self.conv1.forward(g, bind, folded);
        let h = g.silu(h);
        let h = self.conv2.forward(g, bind, h);
        let h = unfold_joints(g, h, b, t, j, self.out_ch);
        let res = match &self.skip {
            Some(s) => s.forward(g, bind, x),
            None => x,
        };
        g.add(res, h)
    }
}

/// FiLM + temporal/joint/cross attention + feed-forward, all residual.
pub struct AttnStack {
    dim: usize,
    groups: usize,
    film: Linear,
    temporal: MultiHeadAttn,
    joint: MultiHeadAttn,
    cross: MultiHeadAttn,
    ffn: FeedForward,
    depth_name: String,
    depth_rows: usize,
}

impl AttnStack {
    fn new(name: &str, dim: usize, cond_dim: usize, traj_dim: usize, heads: usize, groups: usize, depth_rows: usize) -> Self {
        AttnStack {
            dim,
            groups,
            film: Linear::new(format!("{name}.film"), cond_dim, 2 * dim),
            temporal: MultiHeadAttn::new(&format!("{name}.tattn"), dim, dim, heads),
            joint: MultiHeadAttn::new(&format!("{name}.jattn"), dim, dim, heads),
            cross: MultiHeadAttn::new(&format!("{name}.xattn"), dim, traj_dim, heads),
            ffn: FeedForward::new(name, dim, 2 * dim),
            depth_name: format!("{name}.depth_emb"),
            depth_rows,
        }
    }

    fn init(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) {
        self.film.init_with(store, rng, Init::Zero);
        self.temporal.init(store, rng);
        self.joint.init(store, rng);
        self.cross.init(store, rng);
        self.ffn.init(store, rng);
        store.create(&self.depth_name, &[self.depth_rows, self.dim], Init::Normal(0.02), rng);
    }

    /// GroupNorm then `(1 + gamma) * h + beta`, with gamma/beta predicted
    /// from the concatenated time and style embeddings. Zero-initialized
    /// weights make this exactly GroupNorm.
    pub fn film_modulate(&self, g: &mut Graph, bind: &Binding, x: Var, cond: &ConditionBundle) -> Var {
        let (b, _t, _j, c) = grid_dims(g, x);
        let h = group_norm(g, x, self.groups, 1e-5);
        let emb = g.concat(1, &[cond.time_emb, cond.style_emb]);
        let gb = self.film.forward(g, bind, emb);
        let gamma = g.narrow(gb, 1, 0, c);
        let beta = g.narrow(gb, 1, c, c);
        let gamma = g.reshape(gamma, &[b, 1, 1, c]);
        let beta = g.reshape(beta, &[b, 1, 1, c]);
        let gamma1 = g.add_scalar(gamma, 1.0);
        let scaled = g.mul(h, gamma1);
        g.add(scaled, beta)
    }

    /// Residual self-attention along the frame axis, independently per
    /// joint token, with sinusoidal frame encodings on queries/keys.
    pub fn temporal_attention(
        &self,
        g: &mut Graph,
        bind: &Binding,
        x: Var,
        frame_pos: &[f64],
        with_pe: bool,
    ) -> Var {
        let (b, t, j, c) = grid_dims(g, x);
        let qk_src = if with_pe {
            let pe = sinusoidal_encoding(frame_pos, c);
            let pe = g.constant(pe.into_dyn().into_shape_with_order(IxDyn(&[t, 1, c])).expect("pe"));
            g.add(x, pe)
        } else {
            x
        };
        let qk = fold_joints(g, qk_src, b, t, j, c);
        let v = fold_joints(g, x, b, t, j, c);
        let out = self.temporal.forward(g, bind, qk, qk, v, None);
        let out = unfold_joints(g, out, b, t, j, c);
        g.add(x, out)
    }

    /// Residual ancestor-masked self-attention along the joint-token axis,
    /// independently per frame, with learned depth encodings on
    /// queries/keys.
    pub fn joint_attention(
        &self,
        g: &mut Graph,
        bind: &Binding,
        x: Var,
        mask: &ArrayD<f64>,
        depths: &[usize],
        stats: &mut ForwardStats,
    ) -> Var {
        let (b, t, j, c) = grid_dims(g, x);
        debug_assert_eq!(j, depths.len());
        let table = bind.var(&self.depth_name);
        let rows = g.value(table).shape()[0];
        let clamped: Vec<usize> = depths.iter().map(|&d| d.min(rows - 1)).collect();
        let pe = g.embedding(table, &clamped);
        let qk_src = g.add(x, pe);
        let qk = g.reshape(qk_src, &[b * t, j, c]);
        let v = g.reshape(x, &[b * t, j, c]);
        let out = self.joint.forward(g, bind, qk, qk, v, Some(mask));
        let out = g.reshape(out, &[b, t, j, c]);
        stats.joint_attn_kv_rows += b * t * j;
        g.add(x, out)
    }

    /// Residual cross-attention from every grid token into the trajectory
    /// tokens; both sides carry the same sinusoidal frame-position family.
    pub fn trajectory_cross_attention(
        &self,
        g: &mut Graph,
        bind: &Binding,
        x: Var,
        cond: &ConditionBundle,
        frame_pos: &[f64],
        traj_pos: &[f64],
    ) -> Var {
        let (b, t, j, c) = grid_dims(g, x);
        let traj_dim = g.value(cond.traj_tokens).shape()[2];
        let pe_q = sinusoidal_encoding(frame_pos, c);
        let pe_q = g.constant(pe_q.into_dyn().into_shape_with_order(IxDyn(&[t, 1, c])).expect("pe"));
        let q_src = g.add(x, pe_q);
        let q = g.reshape(q_src, &[b, t * j, c]);
        let pe_k = sinusoidal_encoding(traj_pos, traj_dim);
        let pe_k = g.constant(pe_k.into_dyn());
        let k_src = g.add(cond.traj_tokens, pe_k);
        let out = self.cross.forward(g, bind, q, k_src, cond.traj_tokens, None);
        let out = g.reshape(out, &[b, t, j, c]);
        g.add(x, out)
    }

    #[allow(clippy::too_many_arguments)]
    fn forward(
        &self,
        g: &mut Graph,
        bind: &Binding,
        x: Var,
        cond: &ConditionBundle,
        mask: &ArrayD<f64>,
        depths: &[usize],
        frame_pos: &[f64],
        traj_pos: &[f64],
        stats: &mut ForwardStats,
    ) -> Var {
        let h = self.film_modulate(g, bind, x, cond);
        let h = self.temporal_attention(g, bind, h, frame_pos, true);
        let h = self.joint_attention(g, bind, h, mask, depths, stats);
        let h = self.trajectory_cross_attention(g, bind, h, cond, frame_pos, traj_pos);
        let out = self.ffn_forward(g, bind, h);
        g.add(h, out)
    }

    fn ffn_forward(&self, g: &mut Graph, bind: &Binding, x: Var) -> Var {
        self.ffn.forward(g, bind, x)
    }
}

fn grid_dims(g: &Graph, x: Var) -> (usize, usize, usize, usize) {
    let s = g.value(x).shape();
    debug_assert_eq!(s.len(), 4, "grid must be (B, T, J', C)");
    (s[0], s[1], s[2], s[3])
}

/// `(B, T, J, C) -> (B*J, T, C)` so time ops share weights across joints.
fn fold_joints(g: &mut Graph, x: Var, b: usize, t: usize, j: usize, c: usize) -> Var {
    let p = g.permute(x, &[0, 2, 1, 3]);
    g.reshape(p, &[b * j, t, c])
}

fn unfold_joints(g: &mut Graph, x: Var, b: usize, t: usize, j: usize, c: usize) -> Var {
    let r = g.reshape(x, &[b, j, t, c]);
    g.permute(r, &[0, 2, 1, 3])
}

/// The full UNet denoiser. Weights are skeleton-independent; the joint
/// count enters only through the token grid and the ancestor mask.
pub struct Denoiser {
    pub config: DenoiserConfig,
    root_in: Linear,
    joint_in: Linear,
    traj_in: Linear,
    enc1: ConvBlock,
    down: Conv1d,
    enc2: ConvBlock,
    enc2_attn: AttnStack,
    enc3: ConvBlock,
    enc3_attn: AttnStack,
    dec3: ConvBlock,
    dec3_attn: AttnStack,
    dec2: ConvBlock,
    dec2_attn: AttnStack,
    up: Conv1d,
    dec1: ConvBlock,
    head_root: Linear,
    head_joint: Linear,
}

pub const STYLE_TABLE: &str = "style_table";
pub const FLAG_TABLE: &str = "past_flag";

impl Denoiser {
    /// Builds layer definitions and initializes a fresh parameter store.
    pub fn new(config: DenoiserConfig, rng: &mut ChaCha8Rng) -> Result<(Self, ParamStore)> {
        config.validate()?;
        let c1 = config.base_channels;
        let (c2, c3) = (2 * c1, 4 * c1);
        let (h, gr) = (config.heads, config.groupnorm_groups);
        let cond = config.time_embed_dim + config.style_embed_dim;
        let dt = config.depth_table;
        let model = Denoiser {
            root_in: Linear::new("root_in", 3, c1),
            joint_in: Linear::new("joint_in", 6, c1),
            traj_in: Linear::new("traj_in", 8, c1),
            enc1: ConvBlock::new("enc1", c1, c1, gr),
            down: Conv1d::new("down", c1, c2, 2),
            enc2: ConvBlock::new("enc2", c2, c2, gr),
            enc2_attn: AttnStack::new("enc2", c2, cond, c1, h, gr, dt),
            enc3: ConvBlock::new("enc3", c2, c3, gr),
            enc3_attn: AttnStack::new("enc3", c3, cond, c1, h, gr, dt),
            dec3: ConvBlock::new("dec3", c3 + c2, c2, gr),
            dec3_attn: AttnStack::new("dec3", c2, cond, c1, h, gr, dt),
            dec2: ConvBlock::new("dec2", c2, c2, gr),
            dec2_attn: AttnStack::new("dec2", c2, cond, c1, h, gr, dt),
            up: Conv1d::new("up", c2, c1, 1),
            dec1: ConvBlock::new("dec1", c1 + c1, c1, gr),
            head_root: Linear::new("head_root", c1, 3),
            head_joint: Linear::new("head_joint", c1, 6),
            config,
        };

        let mut store = ParamStore::new();
        let cfg = &model.config;
        store.create(
            STYLE_TABLE,
            &[cfg.style_count + 1, cfg.style_embed_dim],
            Init::Normal(0.02),
            rng,
        );
        store.create(FLAG_TABLE, &[2, c1], Init::Normal(0.02), rng);
        model.root_in.init(&mut store, rng);
        model.joint_in.init(&mut store, rng);
        model.traj_in.init(&mut store, rng);
        model.enc1.init(&mut store, rng);
        model.down.init(&mut store, rng);
        model.enc2.init(&mut store, rng);
        model.enc2_attn.init(&mut store, rng);
        model.enc3.init(&mut store, rng);
        model.enc3_attn.init(&mut store, rng);
        model.dec3.init(&mut store, rng);
        model.dec3_attn.init(&mut store, rng);
        model.dec2.init(&mut store, rng);
        model.dec2_attn.init(&mut store, rng);
        model.up.init(&mut store, rng);
        model.dec1.init(&mut store, rng);
        model.head_root.init(&mut store, rng);
        model.head_joint.init(&mut store, rng);
        Ok((model, store))
    }

    /// Resolves style conditioning into an embedding matrix `(B, Ds)`.
    pub fn style_embedding(
        &self,
        g: &mut Graph,
        bind: &Binding,
        style: &StyleCond,
        batch: usize,
    ) -> Result<Var> {
        match style {
            StyleCond::Ids(ids) => {
                if ids.len() != batch {
                    return Err(Error::Shape(format!(
                        "style ids ({}) vs batch ({batch})",
                        ids.len()
                    )));
                }
                for &id in ids.iter() {
                    if id > self.config.style_count {
                        return Err(Error::Validation(format!(
                            "unknown style id {id} (table has {} + null)",
                            self.config.style_count
                        )));
                    }
                }
                Ok(g.embedding(bind.var(STYLE_TABLE), ids))
            }
            StyleCond::Embedding(e) => {
                if e.shape() != [batch, self.config.style_embed_dim] {
                    return Err(Error::Shape(format!(
                        "style embedding {:?} vs (B={batch}, {})",
                        e.shape(),
                        self.config.style_embed_dim
                    )));
                }
                Ok(g.constant((*e).clone().into_dyn()))
            }
        }
    }

    /// Builds the condition bundle: style row, sinusoidal timestep
    /// embedding, and projected trajectory tokens.
    pub fn build_condition(
        &self,
        g: &mut Graph,
        bind: &Binding,
        style_emb: Var,
        t: &[usize],
        traj: &Array3<f64>,
    ) -> Result<ConditionBundle> {
        let b = traj.shape()[0];
        if t.len() != b {
            return Err(Error::Shape(format!("t ({}) vs batch ({b})", t.len())));
        }
        if traj.shape()[2] != 8 {
            return Err(Error::Shape(format!(
                "trajectory rows must be 8-dim (Tp || Tr), got {}",
                traj.shape()[2]
            )));
        }
        let time_emb = g.constant(timestep_embedding(t, self.config.time_embed_dim));
        let traj_var = g.constant(traj.clone().into_dyn());
        let traj_tokens = self.traj_in.forward(g, bind, traj_var);
        Ok(ConditionBundle { style_emb, time_emb, traj_tokens })
    }

    /// Temporal concatenation of past and noisy current frames into the
    /// `(B, T, J+1, C)` token grid, with the past/current flag embedding
    /// added per frame.
    pub fn embed_inputs(
        &self,
        g: &mut Graph,
        bind: &Binding,
        inputs: &DenoiserInputs,
        topo: &SkeletonTopology,
    ) -> Result<TokenGrid> {
        let (b, f, j) = (
            inputs.cur_root.shape()[0],
            inputs.cur_root.shape()[1],
            topo.num_joints(),
        );
        if inputs.cur_rot.shape() != [b, f, j, 6] || inputs.cur_root.shape()[2] != 3 {
            return Err(Error::Shape(format!(
                "current arrays inconsistent: root {:?}, rot {:?}, J = {j}",
                inputs.cur_root.shape(),
                inputs.cur_rot.shape()
            )));
        }
        let fp = match (inputs.past_root, inputs.past_rot) {
            (Some(pr), Some(pq)) => {
                let fp = pr.shape()[1];
                if pr.shape() != [b, fp, 3] || pq.shape() != [b, fp, j, 6] {
                    return Err(Error::Shape(format!(
                        "past arrays inconsistent: root {:?}, rot {:?}",
                        pr.shape(),
                        pq.shape()
                    )));
                }
                fp
            }
            (None, None) => 0,
            _ => {
                return Err(Error::Shape(
                    "past root and past rotations must be given together".into(),
                ))
            }
        };
        let t = fp + f;
        if t % 4 != 0 {
            return Err(Error::Config(format!(
                "grid length F' + F = {t} must be divisible by 4"
            )));
        }

        // root stream: (B, T, 3) -> (B, T, 1, C)
        let cur_root = g.constant(inputs.cur_root.clone().into_dyn());
        let root = match inputs.past_root {
            Some(p) => {
                let past = g.constant(p.clone().into_dyn());
                g.concat(1, &[past, cur_root])
            }
            None => cur_root,
        };
        let root = self.root_in.forward(g, bind, root);
        let c1 = self.config.base_channels;
        let root = g.reshape(root, &[b, t, 1, c1]);

        // joint stream: (B, T, J, 6) -> (B, T, J, C)
        let cur_rot = g.constant(inputs.cur_rot.clone().into_dyn());
        let rot = match inputs.past_rot {
            Some(p) => {
                let past = g.constant(p.clone().into_dyn());
                g.concat(1, &[past, cur_rot])
            }
            None => cur_rot,
        };
        let joints = self.joint_in.forward(g, bind, rot);

        let grid = g.concat(2, &[root, joints]);

        // learned past/current flag per frame
        let flag_ids: Vec<usize> = (0..t).map(|i| usize::from(i >= fp)).collect();
        let flags = g.embedding(bind.var(FLAG_TABLE), &flag_ids);
        let flags = g.reshape(flags, &[t, 1, c1]);
        let grid = g.add(grid, flags);

        Ok(TokenGrid { features: grid, frame_pos: (0..t).map(|i| i as f64).collect() })
    }

    /// Full denoising forward pass: predicts clean root positions
    /// `(B, F, 3)` and joint rotations `(B, F, J, 6)` for the current
    /// frames.
    pub fn forward(
        &self,
        g: &mut Graph,
        bind: &Binding,
        inputs: &DenoiserInputs,
        style: &StyleCond,
        topo: &SkeletonTopology,
    ) -> Result<(Var, Var, ForwardStats)> {
        let b = inputs.cur_root.shape()[0];
        let f = inputs.cur_root.shape()[1];
        let j = topo.num_joints();
        if inputs.traj.shape()[0] != b || inputs.traj.shape()[1] != f {
            return Err(Error::Shape(format!(
                "trajectory {:?} vs (B={b}, F={f})",
                inputs.traj.shape()
            )));
        }
        let style_emb = self.style_embedding(g, bind, style, b)?;
        let cond = self.build_condition(g, bind, style_emb, inputs.t, inputs.traj)?;
        let grid = self.embed_inputs(g, bind, inputs, topo)?;
        let fp = grid.frame_pos.len() - f;

        let mask = AncestorMask::from_topology(topo)?.to_additive().into_dyn();
        let mut depths = vec![0usize];
        depths.extend(topo.depths().iter().map(|d| d + 1));
        let traj_pos: Vec<f64> = (0..f).map(|i| (fp + i) as f64).collect();

        let mut stats = ForwardStats {
            joint_tokens: j + 1,
            joint_attn_kv_rows: 0,
            level_lengths: [0; 3],
        };

        let t_full = grid.frame_pos.len();
        let jt = j + 1;
        let c1 = self.config.base_channels;
        let c2 = 2 * c1;
        stats.level_lengths[0] = t_full;

        // encoder level 1: conv only, full resolution
        let e1 = self.enc1.forward(g, bind, grid.features);

        // encoder level 2: strided conv halves time, then attention
        let folded = fold_joints(g, e1, b, t_full, jt, c1);
        let downed = self.down.forward(g, bind, folded);
        let t_half = t_full / 2;
        let half_pos: Vec<f64> = (0..t_half).map(|i| (2 * i) as f64).collect();
        let downed = unfold_joints(g, downed, b, t_half, jt, c2);
        stats.level_lengths[1] = t_half;
        stats.level_lengths[2] = t_half;
        let e2 = self.enc2.forward(g, bind, downed);
        let e2 = self.enc2_attn.forward(
            g, bind, e2, &cond, &mask, &depths, &half_pos, &traj_pos, &mut stats,
        );

        // encoder level 3: conv widens channels, same resolution
        let e3 = self.enc3.forward(g, bind, e2);
        let e3 = self.enc3_attn.forward(
            g, bind, e3, &cond, &mask, &depths, &half_pos, &traj_pos, &mut stats,
        );

        // decoder level 3: skip from encoder level 2
        let d3_in = g.concat(3, &[e3, e2]);
        let d3 = self.dec3.forward(g, bind, d3_in);
        let d3 = self.dec3_attn.forward(
            g, bind, d3, &cond, &mask, &depths, &half_pos, &traj_pos, &mut stats,
        );

        // decoder level 2: attention then upsample back to full resolution
        let d2 = self.dec2.forward(g, bind, d3);
        let d2 = self.dec2_attn.forward(
            g, bind, d2, &cond, &mask, &depths, &half_pos, &traj_pos, &mut stats,
        );
        let folded = fold_joints(g, d2, b, t_half, jt, c2);
        let upped = g.upsample_nearest(folded, 1, 2);
        let upped = self.up.forward(g, bind, upped);
        let upped = unfold_joints(g, upped, b, t_full, jt, c1);

        // decoder level 1: skip from encoder level 1, conv only
        let d1_in = g.concat(3, &[upped, e1]);
        let d1 = self.dec1.forward(g, bind, d1_in);

        // heads over the last F frames
        let cur = g.narrow(d1, 1, fp, f);
        let root_rows = g.narrow(cur, 2, 0, 1);
        let root_rows = g.reshape(root_rows, &[b, f, c1]);
        let x0_root = self.head_root.forward(g, bind, root_rows);
        let joint_rows = g.narrow(cur, 2, 1, j);
        let x0_rot = self.head_joint.forward(g, bind, joint_rows);

        Ok((x0_root, x0_rot, stats))
    }
}

/// Convenience: raw-array forward for inference-style callers.
pub fn denoise_forward(
    model: &Denoiser,
    store: &ParamStore,
    inputs: &DenoiserInputs,
    style: &StyleCond,
    topo: &SkeletonTopology,
) -> Result<(Array3<f64>, Array4<f64>, ForwardStats)> {
    let mut g = Graph::new();
    let bind = store.bind(&mut g);
    let (root, rot, stats) = model.forward(&mut g, &bind, inputs, style, topo)?;
    let root: Array3<f64> = g
        .value(root)
        .clone()
        .into_dimensionality()
        .map_err(|e| Error::Shape(e.to_string()))?;
    let rot: Array4<f64> = g
        .value(rot)
        .clone()
        .into_dimensionality()
        .map_err(|e| Error::Shape(e.to_string()))?;
    Ok((root, rot, stats))
}
