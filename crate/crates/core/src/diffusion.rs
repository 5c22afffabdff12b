//! Discrete DDPM machinery: schedule, forward process, the two training
//! losses, classifier-free guidance and the joint multi-view sampler.

use lift3d_autograd::{Array, Graph, Var};
use rand_distr::Distribution;
use serde::{Deserialize, Serialize};

use crate::camera::RelativePose;
use crate::error::{ensure, Error, Result};
use crate::latent_codec::{assert_no_reference_pixels, EmbeddingVector, LatentCodec, LatentImage};
use crate::mv_denoiser::SlotMeta;
use crate::seeding::{normal_array, Rng};

pub const DEFAULT_T: usize = 1000;
pub const DEFAULT_BETA_MIN: f64 = 1e-4;
pub const DEFAULT_BETA_MAX: f64 = 2e-2;
pub const DEFAULT_GUIDANCE_SCALE: f64 = 10.0;
pub const DEFAULT_SAMPLER_STEPS: usize = 50;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub timesteps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            timesteps: DEFAULT_T,
            beta_min: DEFAULT_BETA_MIN,
            beta_max: DEFAULT_BETA_MAX,
        }
    }
}

/// `alpha_bar[t]` for `t` in `0..=T`, with `alpha_bar[0] = 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    alpha_bar: Vec<f64>,
    config: ScheduleConfig,
}

impl NoiseSchedule {
    /// Linear betas `beta_1 = beta_min .. beta_T = beta_max`.
    pub fn make(timesteps: usize, beta_min: f64, beta_max: f64) -> Result<Self> {
        if !(0.0 < beta_min && beta_min < beta_max && beta_max < 1.0) {
            return Err(Error::Config(format!(
                "beta range must satisfy 0 < beta_min < beta_max < 1, got [{beta_min}, {beta_max}]"
            )));
        }
        if timesteps < 2 {
            return Err(Error::Config(format!("schedule needs at least 2 steps, got {timesteps}")));
        }
        let mut alpha_bar = Vec::with_capacity(timesteps + 1);
        alpha_bar.push(1.0);
        let mut acc = 1.0;
        for s in 1..=timesteps {
            let beta = beta_min + (beta_max - beta_min) * (s - 1) as f64 / (timesteps - 1) as f64;
            acc *= 1.0 - beta;
            alpha_bar.push(acc);
        }
        Ok(Self {
            alpha_bar,
            config: ScheduleConfig {
                timesteps,
                beta_min,
                beta_max,
            },
        })
    }

    pub fn from_config(config: &ScheduleConfig) -> Result<Self> {
        Self::make(config.timesteps, config.beta_min, config.beta_max)
    }

    pub fn config(&self) -> &ScheduleConfig {
        &self.config
    }

    pub fn num_steps(&self) -> usize {
        self.alpha_bar.len() - 1
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    pub fn check_step(&self, t: usize) -> Result<()> {
        ensure!(t <= self.num_steps(), "timestep {t} outside [0, {}]", self.num_steps());
        Ok(())
    }
}

/// `sqrt(ab_t) z + sqrt(1 - ab_t) eps`.
pub fn forward_diffuse(z: &Array, t: usize, eps: &Array, schedule: &NoiseSchedule) -> Result<Array> {
    schedule.check_step(t)?;
    ensure!(
        z.shape() == eps.shape(),
        "noise shape {:?} does not match latent {:?}",
        eps.shape(),
        z.shape()
    );
    if t == 0 {
        return Ok(z.clone());
    }
    let ab = schedule.alpha_bar(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(z.zip_map(eps, |z, e| a * z + b * e))
}

/// Conditioning for one object: its embedding or the learned null embedding.
#[derive(Clone, Copy, Debug)]
pub enum Cond<'a> {
    Embedding(&'a EmbeddingVector),
    Null,
}

/// An epsilon-predicting network over joint view sequences.
pub trait NoiseModel {
    type Handles;

    fn bind(&self, g: &mut Graph, trainable: bool) -> Self::Handles;

    /// `latents` is `[B, S, C, h, w]`; `metas[b]` and `conds[b]` describe object `b`.
    fn forward(
        &self,
        g: &mut Graph,
        handles: &Self::Handles,
        latents: Var,
        metas: &[Vec<SlotMeta>],
        conds: &[Cond<'_>],
    ) -> Result<Var>;

    /// `[C, h, w]` of one slot.
    fn latent_shape(&self) -> [usize; 3];
}

#[derive(Clone, Debug)]
pub struct ConditionBundle {
    pub embedding: EmbeddingVector,
    /// One pose per target slot, relative to the reference view.
    pub poses: Vec<RelativePose>,
    /// Replace the embedding by the null embedding (conditioning dropout).
    pub drop_embedding: bool,
}

impl ConditionBundle {
    pub fn cond(&self) -> Cond<'_> {
        if self.drop_embedding {
            Cond::Null
        } else {
            Cond::Embedding(&self.embedding)
        }
    }
}

/// Target slots of one object.
#[derive(Clone, Debug)]
pub struct DiffusionBatch {
    pub latents: Array,
    pub timesteps: Vec<usize>,
    pub noises: Array,
    pub condition: ConditionBundle,
}

impl DiffusionBatch {
    pub fn new(latents: Array, timesteps: Vec<usize>, noises: Array, condition: ConditionBundle) -> Result<Self> {
        ensure!(latents.ndim() == 4, "target latents must be [V, C, h, w], got {:?}", latents.shape());
        let v = latents.shape()[0];
        ensure!(latents.shape() == noises.shape(), "noise shape mismatch");
        ensure!(timesteps.len() == v, "{} timesteps for {v} slots", timesteps.len());
        ensure!(condition.poses.len() == v, "{} poses for {v} slots", condition.poses.len());
        ensure!(timesteps.iter().all(|&t| t >= 1), "target timesteps must be >= 1");
        Ok(Self {
            latents,
            timesteps,
            noises,
            condition,
        })
    }

    pub fn num_slots(&self) -> usize {
        self.timesteps.len()
    }

    pub fn metas(&self) -> Vec<SlotMeta> {
        self.timesteps
            .iter()
            .zip(&self.condition.poses)
            .map(|(&t, &p)| SlotMeta::target(t, p))
            .collect()
    }

    /// Per-slot forward diffusion of the clean latents.
    pub fn noisy_latents(&self, schedule: &NoiseSchedule) -> Result<Array> {
        let v = self.num_slots();
        let mut parts = Vec::with_capacity(v);
        for s in 0..v {
            let z = self.latents.narrow(0, s, 1);
            let e = self.noises.narrow(0, s, 1);
            parts.push(forward_diffuse(&z, self.timesteps[s], &e, schedule)?);
        }
        let refs: Vec<&Array> = parts.iter().collect();
        Ok(Array::concat(&refs, 0))
    }
}

/// Noise-free reference latent at slot 0 plus noisy targets.
#[derive(Clone, Debug)]
pub struct EmaBatch {
    pub reference_latent: LatentImage,
    reference_meta: SlotMeta,
    pub targets: DiffusionBatch,
}

impl EmaBatch {
    pub fn new(reference_latent: LatentImage, reference_meta: SlotMeta, targets: DiffusionBatch) -> Result<Self> {
        check_reference_meta(&reference_meta)?;
        ensure!(
            reference_latent.shape() == &targets.latents.shape()[1..],
            "reference latent shape {:?} does not match targets",
            reference_latent.shape()
        );
        Ok(Self {
            reference_latent,
            reference_meta,
            targets,
        })
    }

    pub fn reference_meta(&self) -> &SlotMeta {
        &self.reference_meta
    }
}

fn check_reference_meta(meta: &SlotMeta) -> Result<()> {
    ensure!(meta.is_reference, "slot 0 must be the reference slot");
    ensure!(meta.timestep == 0, "reference slot has timestep {} (must be 0)", meta.timestep);
    ensure!(meta.pose.is_zero_angle(), "reference slot pose must be zero");
    Ok(())
}

pub struct LossOutput {
    pub loss: Var,
    /// Full model output `[B, S, C, h, w]`, reference slot included.
    pub prediction: Var,
}

fn stack_objects(parts: &[Array]) -> Array {
    let refs: Vec<Array> = parts
        .iter()
        .map(|a| {
            let mut s = vec![1];
            s.extend_from_slice(a.shape());
            a.clone().reshape(&s)
        })
        .collect();
    let r: Vec<&Array> = refs.iter().collect();
    Array::concat(&r, 0)
}

fn check_uniform_slots(counts: impl Iterator<Item = usize>) -> Result<usize> {
    let counts: Vec<usize> = counts.collect();
    ensure!(!counts.is_empty(), "empty batch");
    ensure!(counts.iter().all(|&c| c == counts[0]), "objects in one batch must share a slot count");
    Ok(counts[0])
}

/// Epsilon MSE over all target slots of all objects.
pub fn loss_mv<M: NoiseModel>(
    g: &mut Graph,
    model: &M,
    handles: &M::Handles,
    batches: &[DiffusionBatch],
    schedule: &NoiseSchedule,
) -> Result<LossOutput> {
    check_uniform_slots(batches.iter().map(DiffusionBatch::num_slots))?;
    let noisy: Vec<Array> = batches.iter().map(|b| b.noisy_latents(schedule)).collect::<Result<_>>()?;
    let eps: Vec<Array> = batches.iter().map(|b| b.noises.clone()).collect();
    let metas: Vec<Vec<SlotMeta>> = batches.iter().map(DiffusionBatch::metas).collect();
    let conds: Vec<Cond<'_>> = batches.iter().map(|b| b.condition.cond()).collect();
    let x = g.constant(stack_objects(&noisy));
    let target = g.constant(stack_objects(&eps));
    let prediction = model.forward(g, handles, x, &metas, &conds)?;
    let loss = g.mse(prediction, target);
    Ok(LossOutput { loss, prediction })
}

/// Epsilon MSE over target slots of the joint `reference + targets` sequence.
///
/// The reference slot is predicted but sliced away before the loss, so it
/// receives neither loss nor gradient.
pub fn loss_ema<M: NoiseModel>(
    g: &mut Graph,
    model: &M,
    handles: &M::Handles,
    batches: &[EmaBatch],
    schedule: &NoiseSchedule,
) -> Result<LossOutput> {
    let v = check_uniform_slots(batches.iter().map(|b| b.targets.num_slots()))?;
    let mut joint = Vec::with_capacity(batches.len());
    let mut metas = Vec::with_capacity(batches.len());
    for b in batches {
        check_reference_meta(&b.reference_meta)?;
        let noisy = b.targets.noisy_latents(schedule)?;
        let (seq, m) = crate::mv_denoiser::assemble_ema_sequence(&b.reference_latent, &noisy, &b.targets.metas())?;
        joint.push(seq);
        metas.push(m);
    }
    let eps: Vec<Array> = batches.iter().map(|b| b.targets.noises.clone()).collect();
    let conds: Vec<Cond<'_>> = batches.iter().map(|b| b.targets.condition.cond()).collect();
    let x = g.constant(stack_objects(&joint));
    let target = g.constant(stack_objects(&eps));
    let prediction = model.forward(g, handles, x, &metas, &conds)?;
    let targets_pred = g.narrow(prediction, 1, 1, v);
    let loss = g.mse(targets_pred, target);
    Ok(LossOutput { loss, prediction })
}

/// One inference forward pass of a single object's `[S, C, h, w]` sequence.
pub fn predict_once<M: NoiseModel>(model: &M, latents: &Array, metas: &[SlotMeta], cond: Cond<'_>) -> Result<Array> {
    let mut g = Graph::new();
    let handles = model.bind(&mut g, false);
    let mut s = vec![1];
    s.extend_from_slice(latents.shape());
    let x = g.constant(latents.clone().reshape(&s));
    let out = model.forward(&mut g, &handles, x, &[metas.to_vec()], &[cond])?;
    Ok(g.value(out).clone().reshape(latents.shape()))
}

/// `eps_uncond + scale (eps_cond - eps_uncond)`; scales 0 and 1 return the
/// corresponding single pass unchanged.
pub fn cfg_predict<M: NoiseModel>(
    model: &M,
    latents: &Array,
    metas: &[SlotMeta],
    embedding: &EmbeddingVector,
    scale: f64,
) -> Result<Array> {
    ensure!(scale >= 0.0 && scale.is_finite(), "guidance scale must be >= 0, got {scale}");
    if scale == 1.0 {
        return predict_once(model, latents, metas, Cond::Embedding(embedding));
    }
    let uncond = predict_once(model, latents, metas, Cond::Null)?;
    if scale == 0.0 {
        return Ok(uncond);
    }
    let cond = predict_once(model, latents, metas, Cond::Embedding(embedding))?;
    Ok(uncond.zip_map(&cond, |u, c| u + scale * (c - u)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    pub steps: usize,
    pub guidance_scale: f64,
    /// 1 gives ancestral sampling, 0 the deterministic variant.
    pub eta: f64,
    pub use_reference_slot: bool,
    pub clip_x0: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            steps: DEFAULT_SAMPLER_STEPS,
            guidance_scale: DEFAULT_GUIDANCE_SCALE,
            eta: 1.0,
            use_reference_slot: false,
            clip_x0: true,
        }
    }
}

/// Descending, evenly strided timesteps ending at a value >= 1.
pub fn sampling_timesteps(total: usize, steps: usize) -> Vec<usize> {
    let steps = steps.clamp(1, total);
    let mut ts: Vec<usize> = (1..=steps)
        .rev()
        .map(|i| ((i as f64) * total as f64 / steps as f64).round() as usize)
        .map(|t| t.clamp(1, total))
        .collect();
    ts.dedup();
    ts
}

fn denoise_loop<M: NoiseModel>(
    model: &M,
    schedule: &NoiseSchedule,
    embedding: &EmbeddingVector,
    poses: &[RelativePose],
    reference: Option<&Array>,
    config: &SamplerConfig,
    rng: &mut Rng,
) -> Result<Array> {
    let [c, h, w] = model.latent_shape();
    let v = poses.len();
    let mut x = normal_array(rng, &[v, c, h, w]);
    let ts = sampling_timesteps(schedule.num_steps(), config.steps);
    for (i, &t) in ts.iter().enumerate() {
        let t_prev = ts.get(i + 1).copied().unwrap_or(0);
        let targets: Vec<SlotMeta> = poses.iter().map(|&p| SlotMeta::target(t, p)).collect();
        let eps = match reference {
            Some(r) => {
                let (seq, metas) =
                    crate::mv_denoiser::assemble_ema_sequence(&LatentImage::new(r.clone()), &x, &targets)?;
                let full = cfg_predict(model, &seq, &metas, embedding, config.guidance_scale)?;
                full.narrow(0, 1, v)
            }
            None => cfg_predict(model, &x, &targets, embedding, config.guidance_scale)?,
        };
        let (ab, ab_prev) = (schedule.alpha_bar(t), schedule.alpha_bar(t_prev));
        let mut x0 = x.zip_map(&eps, |xt, e| (xt - (1.0 - ab).sqrt() * e) / ab.sqrt());
        if config.clip_x0 {
            x0 = x0.map(|v| v.clamp(-1.0, 1.0));
        }
        if t_prev == 0 {
            x = x0;
            break;
        }
        // Re-derive eps from the clipped x0 so the update stays consistent.
        let eps = x.zip_map(&x0, |xt, x0| (xt - ab.sqrt() * x0) / (1.0 - ab).sqrt());
        let sigma = config.eta * ((1.0 - ab_prev) / (1.0 - ab)).sqrt() * (1.0 - ab / ab_prev).sqrt();
        let dir = (1.0 - ab_prev - sigma * sigma).max(0.0).sqrt();
        let noise = if sigma > 0.0 {
            normal_array(rng, x.shape())
        } else {
            Array::zeros(x.shape())
        };
        let a = ab_prev.sqrt();
        let mixed = x0.zip_map(&eps, |x0, e| a * x0 + dir * e);
        x = mixed.zip_map(&noise, |m, n| m + sigma * n);
    }
    Ok(x)
}

/// Jointly samples `[V, C, h, w]` latents for the given target poses.
///
/// Conditioning is the embedding and the poses only; with
/// `use_reference_slot` a zero-pose view is sampled first and then fed back as
/// a noise-free reference slot.
pub fn sample_latents<M: NoiseModel>(
    model: &M,
    schedule: &NoiseSchedule,
    embedding: &EmbeddingVector,
    poses: &[RelativePose],
    config: &SamplerConfig,
    rng: &mut Rng,
) -> Result<Array> {
    assert_no_reference_pixels("sample_views");
    ensure!(!poses.is_empty(), "at least one pose is required");
    let reference = if config.use_reference_slot {
        let d = poses[0].distance;
        Some(
            denoise_loop(model, schedule, embedding, &[RelativePose::zero(d)], None, config, rng)?
                .narrow(0, 0, 1)
                .reshape(&model.latent_shape()),
        )
    } else {
        None
    };
    denoise_loop(model, schedule, embedding, poses, reference.as_ref(), config, rng)
}

/// [`sample_latents`] followed by decoding; one `[H, W, 3]` image per pose.
pub fn sample_views<M: NoiseModel>(
    model: &M,
    codec: &LatentCodec,
    schedule: &NoiseSchedule,
    embedding: &EmbeddingVector,
    poses: &[RelativePose],
    config: &SamplerConfig,
    rng: &mut Rng,
) -> Result<Vec<Array>> {
    let latents = sample_latents(model, schedule, embedding, poses, config, rng)?;
    let [c, h, w] = model.latent_shape();
    Ok((0..poses.len())
        .map(|s| codec.decode_latent(&LatentImage::new(latents.narrow(0, s, 1).reshape(&[c, h, w]))))
        .collect())
}

/// Uniform integer timestep in `[1, T]`.
pub fn sample_timestep(rng: &mut Rng, schedule: &NoiseSchedule) -> usize {
    rand::distr::Uniform::new_inclusive(1, schedule.num_steps())
        .expect("non-empty range")
        .sample(rng)
}
