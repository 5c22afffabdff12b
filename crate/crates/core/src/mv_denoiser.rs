//! Multi-view UNet denoiser with joint (view x spatial) self-attention.
//!
//! Every slot of an object's sequence is convolved independently; attention
//! layers flatten the tokens of all slots into one sequence so views, and the
//! noise-free reference slot when present, attend to each other. Per-slot
//! timestep and camera embeddings are summed with a projection of the image
//! embedding; the embedding is also cross-attended at every resolution.

use std::f64::consts::PI;
use std::path::Path;

use lift3d_autograd::{Array, Graph, Var};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::camera::RelativePose;
use crate::checkpoint::Checkpoint;
use crate::diffusion::{Cond, NoiseModel, NoiseSchedule, ScheduleConfig};
use crate::error::{ensure, Error, Result};
use crate::latent_codec::{CodecConfig, EmbeddingEncoder, LatentImage};
use crate::params::{init_fan_in, init_normal, Bound, ParamStore};
use crate::seeding::{substream, Rng};

pub const DENOISER_PARAMS_VERSION: u32 = 1;
pub const SINGLE_VIEW_PROBABILITY: f64 = 0.3;
const CAMERA_FEATURES: usize = 5;
const NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionMode {
    EmaJoint,
    PlainMultiview,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DenoiserConfig {
    pub base_channels: usize,
    pub depth: usize,
    pub attn_heads: usize,
    pub time_embed_dim: usize,
    pub camera_embed_dim: usize,
    pub max_views: usize,
    pub attention_mode: AttentionMode,
    pub latent_channels: usize,
    pub latent_size: usize,
    pub embed_dim: usize,
    pub context_tokens: usize,
    pub norm_groups: usize,
    pub init_seed: u64,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            base_channels: 32,
            depth: 2,
            attn_heads: 4,
            time_embed_dim: 64,
            camera_embed_dim: 32,
            max_views: 5,
            attention_mode: AttentionMode::EmaJoint,
            latent_channels: 3,
            latent_size: 16,
            embed_dim: 64,
            context_tokens: 4,
            norm_groups: 8,
            init_seed: 0,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.depth == 0 {
            return bad("denoiser depth must be >= 1".into());
        }
        if !self.latent_size.is_multiple_of(1 << self.depth) {
            return bad(format!(
                "latent_size {} not divisible by 2^depth = {}",
                self.latent_size,
                1 << self.depth
            ));
        }
        for c in self.level_channels() {
            if c % self.attn_heads != 0 {
                return bad(format!("channels {c} not divisible by attn_heads {}", self.attn_heads));
            }
        }
        if !self.time_embed_dim.is_multiple_of(2) {
            return bad("time_embed_dim must be even".into());
        }
        if self.attention_mode == AttentionMode::EmaJoint && self.max_views < 2 {
            return bad("ema_joint needs max_views >= 2 (reference + target)".into());
        }
        if self.max_views == 0 || self.context_tokens == 0 || self.base_channels == 0 {
            return bad("max_views, context_tokens and base_channels must be positive".into());
        }
        Ok(())
    }

    pub fn level_channels(&self) -> Vec<usize> {
        (0..self.depth)
            .map(|i| if i == 0 { self.base_channels } else { 2 * self.base_channels })
            .collect()
    }

    fn groups(&self, c: usize) -> usize {
        if c.is_multiple_of(self.norm_groups) {
            self.norm_groups
        } else {
            1
        }
    }
}

/// Per-slot metadata of a joint sequence.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SlotMeta {
    pub timestep: usize,
    pub pose: RelativePose,
    pub is_reference: bool,
}

impl SlotMeta {
    pub fn target(timestep: usize, pose: RelativePose) -> Self {
        Self {
            timestep,
            pose,
            is_reference: false,
        }
    }

    pub fn reference(distance: f64) -> Self {
        Self {
            timestep: 0,
            pose: RelativePose::zero(distance),
            is_reference: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.is_reference {
            ensure!(self.timestep == 0, "reference slot timestep must be 0, got {}", self.timestep);
            ensure!(self.pose.is_zero_angle(), "reference slot pose must have zero elevation and azimuth");
        }
        Ok(())
    }
}

/// Prepends the noise-free reference at slot 0: `[V, C, h, w]` targets give a
/// `[V + 1, C, h, w]` sequence.
pub fn assemble_ema_sequence(
    reference: &LatentImage,
    targets: &Array,
    target_meta: &[SlotMeta],
) -> Result<(Array, Vec<SlotMeta>)> {
    ensure!(targets.ndim() == 4, "targets must be [V, C, h, w]");
    let v = targets.shape()[0];
    ensure!(target_meta.len() == v, "{} metas for {v} targets", target_meta.len());
    ensure!(reference.shape() == &targets.shape()[1..], "reference/target latent shape mismatch");
    for m in target_meta {
        ensure!(!m.is_reference, "target slot flagged as reference");
        ensure!(m.timestep >= 1, "target timesteps must be >= 1");
    }
    let distance = target_meta.first().map_or(crate::camera::CAMERA_DISTANCE, |m| m.pose.distance);
    let mut s = vec![1];
    s.extend_from_slice(reference.shape());
    let r = reference.data.clone().reshape(&s);
    let seq = Array::concat(&[&r, targets], 0);
    let mut metas = Vec::with_capacity(v + 1);
    metas.push(SlotMeta::reference(distance));
    metas.extend_from_slice(target_meta);
    Ok((seq, metas))
}

/// Raw sinusoidal timestep features `[cos(t f_i), sin(t f_i)]`,
/// `f_i = 10000^(-i / (dim / 2))`.
pub fn timestep_features(t: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let f = (-(10000f64.ln()) * i as f64 / half as f64).exp();
        out[i] = (t as f64 * f).cos();
        out[half + i] = (t as f64 * f).sin();
    }
    out
}

/// `(sin de, cos de, sin da, cos da, d)`.
pub fn camera_features(pose: &RelativePose) -> [f64; CAMERA_FEATURES] {
    [
        pose.d_elevation.sin(),
        pose.d_elevation.cos(),
        pose.d_azimuth.sin(),
        pose.d_azimuth.cos(),
        pose.distance,
    ]
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Branch {
    SingleView,
    MultiView,
}

pub fn branch_selector(rng: &mut Rng, p_single: f64) -> Branch {
    if rng.random::<f64>() < p_single {
        Branch::SingleView
    } else {
        Branch::MultiView
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Denoiser {
    config: DenoiserConfig,
    params: ParamStore,
}

struct Init<'a> {
    p: &'a mut ParamStore,
    rng: &'a mut Rng,
}

impl Init<'_> {
    fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize, gain: f64) {
        self.p
            .insert(format!("{name}.w"), init_fan_in(self.rng, &[cout, cin, k, k], cin * k * k, gain));
        self.p.insert(format!("{name}.b"), Array::zeros(&[cout]));
    }

    fn linear(&mut self, name: &str, din: usize, dout: usize, gain: f64) {
        self.p.insert(format!("{name}.w"), init_fan_in(self.rng, &[din, dout], din, gain));
        self.p.insert(format!("{name}.b"), Array::zeros(&[dout]));
    }

    fn norm(&mut self, name: &str, c: usize) {
        self.p.insert(format!("{name}.g"), Array::ones(&[c]));
        self.p.insert(format!("{name}.b"), Array::zeros(&[c]));
    }

    fn res(&mut self, name: &str, cin: usize, cout: usize, emb: usize) {
        self.norm(&format!("{name}.n1"), cin);
        self.conv(&format!("{name}.c1"), cin, cout, 3, 1.0);
        self.linear(&format!("{name}.emb"), emb, cout, 1.0);
        self.norm(&format!("{name}.n2"), cout);
        self.conv(&format!("{name}.c2"), cout, cout, 3, 0.3);
        if cin != cout {
            self.conv(&format!("{name}.skip"), cin, cout, 1, 1.0);
        }
    }

    fn attn(&mut self, name: &str, c: usize, ctx: usize, joint: bool) {
        if joint {
            self.norm(&format!("{name}.sn"), c);
            for p in ["q", "k", "v"] {
                self.linear(&format!("{name}.s{p}"), c, c, 1.0);
            }
            self.linear(&format!("{name}.so"), c, c, 0.3);
        }
        self.norm(&format!("{name}.cn"), c);
        self.linear(&format!("{name}.cq"), c, c, 1.0);
        self.linear(&format!("{name}.ck"), ctx, c, 1.0);
        self.linear(&format!("{name}.cv"), ctx, c, 1.0);
        self.linear(&format!("{name}.co"), c, c, 0.3);
    }
}

impl Denoiser {
    pub fn new(config: DenoiserConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = substream(config.init_seed, "denoiser-init", 0);
        let mut params = ParamStore::new();
        let mut init = Init {
            p: &mut params,
            rng: &mut rng,
        };
        let e = config.time_embed_dim;
        let ch = config.level_channels();
        init.linear("time.l1", e, e, 1.0);
        init.linear("time.l2", e, e, 1.0);
        init.linear("cam.l1", CAMERA_FEATURES, config.camera_embed_dim, 1.0);
        init.linear("cam.l2", config.camera_embed_dim, e, 1.0);
        init.linear("cond.proj", config.embed_dim, e, 1.0);
        init.linear("ctx.proj", config.embed_dim, config.context_tokens * e, 1.0);
        init.p.insert(
            "null_embedding",
            init_normal(init.rng, &[config.embed_dim], 1.0 / (config.embed_dim as f64).sqrt()),
        );
        init.conv("conv_in", config.latent_channels, ch[0], 3, 1.0);
        let mut cin = ch[0];
        for (i, &c) in ch.iter().enumerate() {
            init.res(&format!("down{i}.res"), cin, c, e);
            init.attn(&format!("down{i}.attn"), c, e, i > 0);
            init.conv(&format!("down{i}.down"), c, c, 3, 1.0);
            cin = c;
        }
        init.res("mid.res1", cin, cin, e);
        init.attn("mid.attn", cin, e, true);
        init.res("mid.res2", cin, cin, e);
        for (i, &c) in ch.iter().enumerate().rev() {
            init.conv(&format!("up{i}.up"), cin, cin, 3, 1.0);
            init.res(&format!("up{i}.res"), cin + c, c, e);
            init.attn(&format!("up{i}.attn"), c, e, i > 0);
            cin = c;
        }
        init.norm("out.n", cin);
        init.conv("out.conv", cin, config.latent_channels, 3, 0.1);
        Ok(Self { config, params })
    }

    pub fn from_params(config: DenoiserConfig, params: ParamStore) -> Result<Self> {
        let fresh = Self::new(config.clone())?;
        let expected: Vec<&String> = fresh.params.names().collect();
        let found: Vec<&String> = params.names().collect();
        let missing: Vec<_> = expected.iter().filter(|n| params.get(n).is_none()).collect();
        let unexpected: Vec<_> = found.iter().filter(|n| fresh.params.get(n).is_none()).collect();
        ensure!(
            missing.is_empty() && unexpected.is_empty(),
            "parameter names mismatch: missing {missing:?}, unexpected {unexpected:?}"
        );
        for (name, a) in fresh.params.iter() {
            let got = params.get(name).expect("checked above");
            ensure!(got.shape() == a.shape(), "parameter {name} has shape {:?}, expected {:?}", got.shape(), a.shape());
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Same weights under a different attention mode.
    pub fn with_attention_mode(&self, mode: AttentionMode) -> Self {
        let mut c = self.config.clone();
        c.attention_mode = mode;
        Self {
            config: c,
            params: self.params.clone(),
        }
    }

    /// Projected time embedding `[time_embed_dim]` of one timestep.
    pub fn embed_timestep(&self, t: usize) -> Array {
        let mut g = Graph::new();
        let b = self.params.bind(&mut g, false);
        let e = self.config.time_embed_dim;
        let f = g.constant(Array::new(&[1, e], timestep_features(t, e)));
        let mut net = Net { g: &mut g, b: &b, cfg: &self.config };
        let out = net.time_mlp(f);
        g.value(out).clone().reshape(&[e])
    }

    /// Projected camera embedding `[time_embed_dim]` of one relative pose.
    pub fn embed_camera(&self, pose: &RelativePose) -> Array {
        let mut g = Graph::new();
        let b = self.params.bind(&mut g, false);
        let f = g.constant(Array::new(&[1, CAMERA_FEATURES], camera_features(pose).to_vec()));
        let mut net = Net { g: &mut g, b: &b, cfg: &self.config };
        let out = net.camera_mlp(f);
        g.value(out).clone().reshape(&[self.config.time_embed_dim])
    }

    fn check_metas(&self, metas: &[Vec<SlotMeta>], s: usize) -> Result<()> {
        ensure!(s <= self.config.max_views, "sequence of {s} slots exceeds max_views {}", self.config.max_views);
        for m in metas {
            ensure!(m.len() == s, "{} metas for {s} slots", m.len());
            for (i, slot) in m.iter().enumerate() {
                slot.validate()?;
                if slot.is_reference {
                    ensure!(i == 0, "reference slot must be at index 0");
                    ensure!(
                        self.config.attention_mode == AttentionMode::EmaJoint,
                        "plain_multiview attention takes no reference slot"
                    );
                }
            }
        }
        Ok(())
    }
}

struct Net<'a> {
    g: &'a mut Graph,
    b: &'a Bound,
    cfg: &'a DenoiserConfig,
}

impl Net<'_> {
    fn p(&self, name: &str) -> Var {
        self.b.var(name)
    }

    fn linear(&mut self, name: &str, x: Var) -> Var {
        let (w, b) = (self.p(&format!("{name}.w")), self.p(&format!("{name}.b")));
        self.g.linear(x, w, b)
    }

    fn conv(&mut self, name: &str, x: Var, stride: usize) -> Var {
        let w = self.p(&format!("{name}.w"));
        let k = self.g.shape(w)[2];
        let y = self.g.conv2d(x, w, stride, k / 2);
        let b = self.p(&format!("{name}.b"));
        let c = self.g.shape(b)[0];
        let b = self.g.reshape(b, &[1, c, 1, 1]);
        self.g.add(y, b)
    }

    fn norm(&mut self, name: &str, x: Var) -> Var {
        let c = self.g.shape(x)[1];
        let (gm, bt) = (self.p(&format!("{name}.g")), self.p(&format!("{name}.b")));
        self.g.group_norm(x, self.cfg.groups(c), gm, bt, NORM_EPS)
    }

    fn time_mlp(&mut self, feats: Var) -> Var {
        let h = self.linear("time.l1", feats);
        let h = self.g.silu(h);
        self.linear("time.l2", h)
    }

    fn camera_mlp(&mut self, feats: Var) -> Var {
        let h = self.linear("cam.l1", feats);
        let h = self.g.silu(h);
        self.linear("cam.l2", h)
    }

    fn res(&mut self, name: &str, x: Var, emb: Var) -> Var {
        let h = self.norm(&format!("{name}.n1"), x);
        let h = self.g.silu(h);
        let h = self.conv(&format!("{name}.c1"), h, 1);
        let e = self.linear(&format!("{name}.emb"), emb);
        let s = self.g.shape(e).to_vec();
        let e = self.g.reshape(e, &[s[0], s[1], 1, 1]);
        let h = self.g.add(h, e);
        let h = self.norm(&format!("{name}.n2"), h);
        let h = self.g.silu(h);
        let h = self.conv(&format!("{name}.c2"), h, 1);
        let skip = if self.b.iter().any(|(k, _)| k == &format!("{name}.skip.w")) {
            self.conv(&format!("{name}.skip"), x, 1)
        } else {
            x
        };
        self.g.add(skip, h)
    }

    /// Multi-head attention of `q_in [B, L, C]` over `kv_in [B, M, *]`.
    fn mha(&mut self, prefix: &str, q_in: Var, kv_in: Var) -> Var {
        let heads = self.cfg.attn_heads;
        let q = self.linear(&format!("{prefix}q"), q_in);
        let k = self.linear(&format!("{prefix}k"), kv_in);
        let v = self.linear(&format!("{prefix}v"), kv_in);
        let (b, l, c) = {
            let s = self.g.shape(q);
            (s[0], s[1], s[2])
        };
        let m = self.g.shape(k)[1];
        let dh = c / heads;
        let split = |g: &mut Graph, x: Var, n: usize| {
            let x = g.reshape(x, &[b, n, heads, dh]);
            let x = g.permute(x, &[0, 2, 1, 3]);
            g.reshape(x, &[b * heads, n, dh])
        };
        let q = split(self.g, q, l);
        let k = split(self.g, k, m);
        let v = split(self.g, v, m);
        let scores = self.g.bmm(q, k, false, true);
        let scores = self.g.scale(scores, 1.0 / (dh as f64).sqrt());
        let att = self.g.softmax_last(scores);
        let o = self.g.bmm(att, v, false, false);
        let o = self.g.reshape(o, &[b, heads, l, dh]);
        let o = self.g.permute(o, &[0, 2, 1, 3]);
        let o = self.g.reshape(o, &[b, l, c]);
        self.linear(&format!("{prefix}o"), o)
    }

    /// `x [B*S, C, H, W]` to per-object token sequences `[B, S*H*W, C]`.
    fn to_tokens(&mut self, x: Var, b: usize) -> Var {
        let s = self.g.shape(x).to_vec();
        let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
        let t = self.g.reshape(x, &[n, c, hw]);
        let t = self.g.permute(t, &[0, 2, 1]);
        self.g.reshape(t, &[b, (n / b) * hw, c])
    }

    fn from_tokens(&mut self, t: Var, shape: &[usize]) -> Var {
        let (n, c, hw) = (shape[0], shape[1], shape[2] * shape[3]);
        let x = self.g.reshape(t, &[n, hw, c]);
        let x = self.g.permute(x, &[0, 2, 1]);
        self.g.reshape(x, shape)
    }

    fn attn(&mut self, name: &str, x: Var, ctx: Var, b: usize, joint: bool) -> Var {
        let shape = self.g.shape(x).to_vec();
        let mut x = x;
        if joint {
            let h = self.norm(&format!("{name}.sn"), x);
            let t = self.to_tokens(h, b);
            let o = self.mha(&format!("{name}.s"), t, t);
            let o = self.from_tokens(o, &shape);
            x = self.g.add(x, o);
        }
        let h = self.norm(&format!("{name}.cn"), x);
        let t = self.to_tokens(h, b);
        let o = self.mha(&format!("{name}.c"), t, ctx);
        let o = self.from_tokens(o, &shape);
        self.g.add(x, o)
    }
}

impl NoiseModel for Denoiser {
    type Handles = Bound;

    fn bind(&self, g: &mut Graph, trainable: bool) -> Bound {
        self.params.bind(g, trainable)
    }

    fn forward(
        &self,
        g: &mut Graph,
        handles: &Bound,
        latents: Var,
        metas: &[Vec<SlotMeta>],
        conds: &[Cond<'_>],
    ) -> Result<Var> {
        let cfg = &self.config;
        let shape = g.shape(latents).to_vec();
        ensure!(shape.len() == 5, "latents must be [B, S, C, h, w], got {shape:?}");
        let (b, s) = (shape[0], shape[1]);
        ensure!(
            shape[2..] == [cfg.latent_channels, cfg.latent_size, cfg.latent_size],
            "latent slot shape {:?} does not match config",
            &shape[2..]
        );
        ensure!(metas.len() == b && conds.len() == b, "batch metadata length mismatch");
        self.check_metas(metas, s)?;
        let n = b * s;
        let e = cfg.time_embed_dim;
        let mut net = Net { g, b: handles, cfg };

        let mut tfeat = Vec::with_capacity(n * e);
        let mut cfeat = Vec::with_capacity(n * CAMERA_FEATURES);
        for m in metas.iter().flatten() {
            tfeat.extend(timestep_features(m.timestep, e));
            cfeat.extend(camera_features(&m.pose));
        }
        let tf = net.g.constant(Array::new(&[n, e], tfeat));
        let cf = net.g.constant(Array::new(&[n, CAMERA_FEATURES], cfeat));
        let temb = net.time_mlp(tf);
        let cemb = net.camera_mlp(cf);

        let null = net.p("null_embedding");
        let null = net.g.reshape(null, &[1, cfg.embed_dim]);
        let mut rows = Vec::with_capacity(b);
        for c in conds {
            rows.push(match c {
                Cond::Embedding(v) => {
                    ensure!(v.dim() == cfg.embed_dim, "embedding dim {} != {}", v.dim(), cfg.embed_dim);
                    net.g.constant(v.data().clone().reshape(&[1, cfg.embed_dim]))
                }
                Cond::Null => null,
            });
        }
        let cond = net.g.concat(&rows, 0);
        let cproj = net.linear("cond.proj", cond);
        let cproj = net.g.reshape(cproj, &[b, 1, e]);
        let cproj = net.g.broadcast_to(cproj, &[b, s, e]);
        let cproj = net.g.reshape(cproj, &[n, e]);
        let ctx = net.linear("ctx.proj", cond);
        let ctx = net.g.reshape(ctx, &[b, cfg.context_tokens, e]);

        let emb = net.g.add(temb, cemb);
        let emb = net.g.add(emb, cproj);
        let emb = net.g.silu(emb);

        let x = net.g.reshape(latents, &[n, shape[2], shape[3], shape[4]]);
        let mut h = net.conv("conv_in", x, 1);
        let mut skips = Vec::with_capacity(cfg.depth);
        for i in 0..cfg.depth {
            h = net.res(&format!("down{i}.res"), h, emb);
            h = net.attn(&format!("down{i}.attn"), h, ctx, b, i > 0);
            skips.push(h);
            h = net.conv(&format!("down{i}.down"), h, 2);
        }
        h = net.res("mid.res1", h, emb);
        h = net.attn("mid.attn", h, ctx, b, true);
        h = net.res("mid.res2", h, emb);
        for i in (0..cfg.depth).rev() {
            h = net.g.upsample_nearest(h, 2);
            h = net.conv(&format!("up{i}.up"), h, 1);
            let skip = skips.pop().expect("one skip per level");
            h = net.g.concat(&[h, skip], 1);
            h = net.res(&format!("up{i}.res"), h, emb);
            h = net.attn(&format!("up{i}.attn"), h, ctx, b, i > 0);
        }
        h = net.norm("out.n", h);
        h = net.g.silu(h);
        h = net.conv("out.conv", h, 1);
        Ok(net.g.reshape(h, &shape))
    }

    fn latent_shape(&self) -> [usize; 3] {
        [self.config.latent_channels, self.config.latent_size, self.config.latent_size]
    }
}

#[derive(Serialize, Deserialize)]
struct ModelMeta {
    kind: String,
    params_version: u32,
    denoiser: DenoiserConfig,
    codec: CodecConfig,
    schedule: ScheduleConfig,
    /// Slot 0 holds the reference in joint sequences.
    reference_slot: usize,
    extra: serde_json::Value,
}

const MODEL_KIND: &str = "mv_denoiser";

/// Everything needed to run inference: denoiser, frozen embedder, codec
/// settings and schedule.
#[derive(Clone, Debug)]
pub struct ModelBundle {
    pub denoiser: Denoiser,
    pub encoder: EmbeddingEncoder,
    pub codec: CodecConfig,
    pub schedule: NoiseSchedule,
}

impl ModelBundle {
    pub fn to_checkpoint(&self, extra: serde_json::Value) -> Checkpoint {
        let meta = ModelMeta {
            kind: MODEL_KIND.into(),
            params_version: DENOISER_PARAMS_VERSION,
            denoiser: self.denoiser.config.clone(),
            codec: self.codec.clone(),
            schedule: self.schedule.config().clone(),
            reference_slot: 0,
            extra,
        };
        let mut ck = Checkpoint::new(serde_json::to_value(meta).expect("serializable meta"));
        ck.insert_store("denoiser/", &self.denoiser.params);
        ck.insert_store("embedder/", self.encoder.params());
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint, path: &Path) -> Result<Self> {
        let meta: ModelMeta =
            serde_json::from_value(ck.meta.clone()).map_err(|e| Error::format(path, format!("model meta: {e}")))?;
        if meta.kind != MODEL_KIND {
            return Err(Error::format(path, format!("expected a {MODEL_KIND} checkpoint, found {}", meta.kind)));
        }
        if meta.params_version != DENOISER_PARAMS_VERSION {
            return Err(Error::SchemaVersion {
                path: path.into(),
                expected: DENOISER_PARAMS_VERSION,
                found: meta.params_version,
            });
        }
        let denoiser = Denoiser::from_params(meta.denoiser, ck.store("denoiser/"))?;
        let encoder = EmbeddingEncoder::from_params(ck.store("embedder/"))?;
        Ok(Self {
            denoiser,
            encoder,
            codec: meta.codec,
            schedule: NoiseSchedule::from_config(&meta.schedule)?,
        })
    }

    pub fn save(&self, path: &Path, extra: serde_json::Value) -> Result<()> {
        self.to_checkpoint(extra).save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?, path)
    }
}

/// Euclidean distance between the raw camera features of the zero pose and
/// a pure azimuth offset.
pub fn camera_feature_gap(d_azimuth: f64) -> f64 {
    let a = camera_features(&RelativePose::zero(1.0));
    let b = camera_features(&RelativePose {
        d_elevation: 0.0,
        d_azimuth: d_azimuth.rem_euclid(2.0 * PI),
        distance: 1.0,
    });
    a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}
