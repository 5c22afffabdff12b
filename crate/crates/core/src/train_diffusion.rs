//! Two-stage denoiser training: image-conditioned multi-view diffusion
//! (stage 1) and fine-tuning with a noise-free reference slot (stage 2).

use std::path::Path;

use lift3d_autograd::{Array, Graph};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::camera::{relative_pose, CameraPose, RelativePose};
use crate::checkpoint::Checkpoint;
use crate::diffusion::{loss_ema, loss_mv, sample_timestep, ConditionBundle, DiffusionBatch, EmaBatch, NoiseSchedule};
use crate::error::{ensure, Error, Result};
use crate::latent_codec::{EmbeddingEncoder, EmbeddingVector, LatentCodec, LatentImage};
use crate::mv_denoiser::{branch_selector, AttentionMode, Branch, ModelBundle, SlotMeta};
use crate::optim::AdamW;
use crate::params::ParamStore;
use crate::seeding::{normal_array, substream, Rng};
use crate::synth_data::{ObjectRecord, VIEWS_PER_SET};

pub const SMOOTHING_WINDOW: usize = 100;
pub const TRAIN_STATE_KIND: &str = "train_state";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Stage1,
    Stage2,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    ConstantWithWarmup,
    LinearPeak,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub stage: Stage,
    pub steps: usize,
    pub batch_objects: usize,
    pub lr_peak: f64,
    pub lr_schedule: LrSchedule,
    pub warmup_steps: usize,
    /// Multiplies `steps` and `warmup_steps`.
    pub step_scale: f64,
    pub adam_betas: [f64; 2],
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub grad_accum: usize,
    pub branch_p_single: f64,
    pub cond_dropout: f64,
    pub checkpoint_every: usize,
    pub seed: u64,
}

impl TrainConfig {
    pub fn stage1() -> Self {
        Self {
            stage: Stage::Stage1,
            steps: 50_000,
            batch_objects: 2,
            lr_peak: 1e-4,
            lr_schedule: LrSchedule::ConstantWithWarmup,
            warmup_steps: 10_000,
            step_scale: 1.0,
            adam_betas: [0.9, 0.999],
            adam_eps: 1e-8,
            weight_decay: 1e-2,
            grad_accum: 1,
            branch_p_single: 0.3,
            cond_dropout: 0.1,
            checkpoint_every: 0,
            seed: 0,
        }
    }

    pub fn stage2() -> Self {
        Self {
            stage: Stage::Stage2,
            steps: 5_000,
            lr_peak: 5e-5,
            lr_schedule: LrSchedule::LinearPeak,
            warmup_steps: 500,
            ..Self::stage1()
        }
    }

    pub fn effective_steps(&self) -> usize {
        ((self.steps as f64 * self.step_scale).round() as usize).max(1)
    }

    pub fn effective_warmup(&self) -> usize {
        (self.warmup_steps as f64 * self.step_scale).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.batch_objects == 0 || self.grad_accum == 0 {
            return bad("batch_objects and grad_accum must be positive");
        }
        if !(self.lr_peak > 0.0) {
            return bad("lr_peak must be positive");
        }
        if !(self.step_scale > 0.0) {
            return bad("step_scale must be positive");
        }
        if !(0.0..=1.0).contains(&self.branch_p_single) || !(0.0..=1.0).contains(&self.cond_dropout) {
            return bad("probabilities must lie in [0, 1]");
        }
        Ok(())
    }
}

/// Learning rate for update number `step` (1-based; `step = 0` gives 0).
pub fn lr_at(config: &TrainConfig, step: usize) -> f64 {
    let total = config.effective_steps();
    let warm = config.effective_warmup();
    let peak = config.lr_peak;
    if step < warm {
        return peak * step as f64 / warm as f64;
    }
    match config.lr_schedule {
        LrSchedule::ConstantWithWarmup => peak,
        LrSchedule::LinearPeak => {
            if total <= warm {
                peak
            } else {
                peak * (total.saturating_sub(step) as f64 / (total - warm) as f64)
            }
        }
    }
}

/// Encoded views of one object.
#[derive(Clone, Debug)]
pub struct ObjectData {
    pub random_poses: Vec<CameraPose>,
    pub fixed_poses: Vec<CameraPose>,
    pub random_latents: Vec<LatentImage>,
    pub fixed_latents: Vec<LatentImage>,
    pub random_embeddings: Vec<EmbeddingVector>,
}

/// Latents and embeddings of a whole dataset, computed once with frozen encoders.
#[derive(Clone, Debug)]
pub struct TrainData {
    pub objects: Vec<ObjectData>,
    pub encoder_hash: String,
}

impl TrainData {
    pub fn from_records(
        records: impl IntoIterator<Item = Result<ObjectRecord>>,
        codec: &LatentCodec,
        encoder: &EmbeddingEncoder,
    ) -> Result<Self> {
        let mut objects = Vec::new();
        for r in records {
            let r = r?;
            ensure!(
                r.random_views.len() == VIEWS_PER_SET && r.fixed_views.len() == VIEWS_PER_SET,
                "object {} lacks full view sets",
                r.object.object_id
            );
            let enc = |views: &[crate::synth_data::RenderedView]| -> Result<Vec<LatentImage>> {
                views.iter().map(|v| codec.encode_latent(&v.image)).collect()
            };
            objects.push(ObjectData {
                random_poses: r.random_views.iter().map(|v| v.pose).collect(),
                fixed_poses: r.fixed_views.iter().map(|v| v.pose).collect(),
                random_latents: enc(&r.random_views)?,
                fixed_latents: enc(&r.fixed_views)?,
                random_embeddings: r.random_views.iter().map(|v| encoder.encode(&v.image)).collect(),
            });
        }
        ensure!(!objects.is_empty(), "dataset is empty");
        Ok(Self {
            objects,
            encoder_hash: encoder.param_hash(),
        })
    }
}

/// Targets and reference of one object for one step.
#[derive(Clone, Debug)]
pub struct ObjectSample {
    pub object: usize,
    pub reference_view: usize,
    pub branch: Branch,
    pub batch: DiffusionBatch,
}

fn stack(latents: &[&LatentImage]) -> Array {
    let parts: Vec<Array> = latents
        .iter()
        .map(|l| {
            let mut s = vec![1];
            s.extend_from_slice(l.shape());
            l.data.clone().reshape(&s)
        })
        .collect();
    let r: Vec<&Array> = parts.iter().collect();
    Array::concat(&r, 0)
}

/// One object's stage-1 targets under a given branch.
///
/// The reference is a random view; the single-view branch targets another
/// random view, the multi-view branch the fixed views `k, k+4, k+8, k+12`.
pub fn make_object_sample(
    data: &TrainData,
    rng: &mut Rng,
    branch: Branch,
    schedule: &NoiseSchedule,
    cond_dropout: f64,
) -> Result<ObjectSample> {
    let object = rng.random_range(0..data.objects.len());
    let o = &data.objects[object];
    let reference_view = rng.random_range(0..VIEWS_PER_SET);
    let ref_pose = o.random_poses[reference_view];
    let (latents, poses): (Vec<&LatentImage>, Vec<CameraPose>) = match branch {
        Branch::SingleView => {
            let mut j = rng.random_range(0..VIEWS_PER_SET - 1);
            if j >= reference_view {
                j += 1;
            }
            (vec![&o.random_latents[j]], vec![o.random_poses[j]])
        }
        Branch::MultiView => {
            let step = VIEWS_PER_SET / 4;
            let k = rng.random_range(0..step);
            let idx: Vec<usize> = (0..4).map(|i| k + i * step).collect();
            (
                idx.iter().map(|&i| &o.fixed_latents[i]).collect(),
                idx.iter().map(|&i| o.fixed_poses[i]).collect(),
            )
        }
    };
    let rel: Vec<RelativePose> = poses.iter().map(|p| relative_pose(&ref_pose, p)).collect::<Result<_>>()?;
    let z = stack(&latents);
    let t = sample_timestep(rng, schedule);
    let noises = normal_array(rng, z.shape());
    let drop_embedding = rng.random::<f64>() < cond_dropout;
    let v = latents.len();
    let batch = DiffusionBatch::new(
        z,
        vec![t; v],
        noises,
        ConditionBundle {
            embedding: o.random_embeddings[reference_view].clone(),
            poses: rel,
            drop_embedding,
        },
    )?;
    Ok(ObjectSample {
        object,
        reference_view,
        branch,
        batch,
    })
}

/// Stage-1 batch for one object with the branch drawn at 0.3/0.7.
pub fn make_stage1_batch(data: &TrainData, rng: &mut Rng, config: &TrainConfig, schedule: &NoiseSchedule) -> Result<DiffusionBatch> {
    let branch = branch_selector(rng, config.branch_p_single);
    Ok(make_object_sample(data, rng, branch, schedule, config.cond_dropout)?.batch)
}

/// Stage-2 batch: the stage-1 targets plus the reference latent at slot 0.
pub fn make_stage2_batch(data: &TrainData, rng: &mut Rng, config: &TrainConfig, schedule: &NoiseSchedule) -> Result<EmaBatch> {
    let branch = branch_selector(rng, config.branch_p_single);
    let s = make_object_sample(data, rng, branch, schedule, config.cond_dropout)?;
    to_ema(data, s)
}

fn to_ema(data: &TrainData, s: ObjectSample) -> Result<EmaBatch> {
    let o = &data.objects[s.object];
    let d = o.random_poses[s.reference_view].distance();
    EmaBatch::new(o.random_latents[s.reference_view].clone(), SlotMeta::reference(d), s.batch)
}

/// All objects of one step; the branch is drawn once per step so every
/// object shares a slot count.
pub fn step_samples(data: &TrainData, config: &TrainConfig, schedule: &NoiseSchedule, step: usize, micro: usize) -> Result<Vec<ObjectSample>> {
    let mut rng = substream(config.seed, &format!("train/{micro}"), step as u64);
    let branch = branch_selector(&mut rng, config.branch_p_single);
    (0..config.batch_objects)
        .map(|_| make_object_sample(data, &mut rng, branch, schedule, config.cond_dropout))
        .collect()
}

#[derive(Clone, Debug)]
pub struct TrainState {
    pub model: ModelBundle,
    pub optimizer: AdamW,
    pub global_step: usize,
    pub losses: Vec<f64>,
    pub config: TrainConfig,
}

impl TrainState {
    pub fn new(model: ModelBundle, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let optimizer = AdamW::new(model.denoiser.params(), config.adam_betas, config.adam_eps, config.weight_decay);
        Ok(Self {
            model,
            optimizer,
            global_step: 0,
            losses: Vec::new(),
            config,
        })
    }

    /// Trailing mean of the last [`SMOOTHING_WINDOW`] losses up to `step` (1-based).
    pub fn smoothed_loss(&self, step: usize) -> Option<f64> {
        smoothed(&self.losses, step)
    }

    pub fn is_done(&self) -> bool {
        self.global_step >= self.config.effective_steps()
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let extra = serde_json::json!({
            "kind": TRAIN_STATE_KIND,
            "global_step": self.global_step,
            "optimizer_steps": self.optimizer.step_count(),
            "train_config": self.config,
        });
        let mut ck = self.model.to_checkpoint(extra);
        let (m, v) = self.optimizer.moments();
        ck.insert_store("adam_m/", m);
        ck.insert_store("adam_v/", v);
        ck.tensors
            .insert("state/losses".into(), Array::new(&[self.losses.len()], self.losses.clone()));
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint, path: &Path) -> Result<Self> {
        let model = ModelBundle::from_checkpoint(ck, path)?;
        let extra = &ck.meta["extra"];
        if extra["kind"] != TRAIN_STATE_KIND {
            return Err(Error::format(path, "not a training-state checkpoint"));
        }
        let config: TrainConfig = serde_json::from_value(extra["train_config"].clone())
            .map_err(|e| Error::format(path, format!("train_config: {e}")))?;
        let global_step = extra["global_step"].as_u64().ok_or_else(|| Error::format(path, "global_step"))? as usize;
        let opt_steps = extra["optimizer_steps"].as_u64().ok_or_else(|| Error::format(path, "optimizer_steps"))?;
        let mut state = Self::new(model, config)?;
        state.optimizer.restore(ck.store("adam_m/"), ck.store("adam_v/"), opt_steps)?;
        state.global_step = global_step;
        state.losses = ck
            .tensor("state/losses")
            .map(|a| a.data().to_vec())
            .ok_or_else(|| Error::format(path, "missing loss history"))?;
        Ok(state)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?, path)
    }
}

pub fn smoothed(losses: &[f64], step: usize) -> Option<f64> {
    if step == 0 || step > losses.len() {
        return None;
    }
    let lo = step.saturating_sub(SMOOTHING_WINDOW);
    let w = &losses[lo..step];
    Some(w.iter().sum::<f64>() / w.len() as f64)
}

fn uses_reference(state: &TrainState) -> bool {
    state.config.stage == Stage::Stage2 && state.model.denoiser.config().attention_mode == AttentionMode::EmaJoint
}

/// Loss and gradients of one micro-batch under current parameters.
pub fn loss_and_grads(state: &TrainState, data: &TrainData, samples: Vec<ObjectSample>) -> Result<(f64, ParamStore)> {
    let model = &state.model.denoiser;
    let schedule = &state.model.schedule;
    let mut g = Graph::new();
    let handles = crate::diffusion::NoiseModel::bind(model, &mut g, true);
    let out = if uses_reference(state) {
        let batches: Vec<EmaBatch> = samples.into_iter().map(|s| to_ema(data, s)).collect::<Result<_>>()?;
        loss_ema(&mut g, model, &handles, &batches, schedule)?
    } else {
        let batches: Vec<DiffusionBatch> = samples.into_iter().map(|s| s.batch).collect();
        loss_mv(&mut g, model, &handles, &batches, schedule)?
    };
    let loss = g.value(out.loss).item();
    let grads = g.backward(out.loss);
    Ok((loss, handles.collect_grads(&g, &grads)))
}

/// Runs one optimizer update; returns the step loss.
pub fn train_step(state: &mut TrainState, data: &TrainData) -> Result<f64> {
    ensure!(
        data.encoder_hash == state.model.encoder.param_hash(),
        "training data was embedded with a different encoder"
    );
    let step = state.global_step;
    let accum = state.config.grad_accum;
    let mut total = 0.0;
    let mut grads: Option<ParamStore> = None;
    for micro in 0..accum {
        let samples = step_samples(data, &state.config, &state.model.schedule, step, micro)?;
        let (loss, g) = loss_and_grads(state, data, samples)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!(
                "loss {loss} at step {} (micro-batch {micro}); parameter hash {}",
                step + 1,
                state.model.denoiser.params().hash_hex()
            )));
        }
        total += loss / accum as f64;
        match grads.as_mut() {
            None => grads = Some(g),
            Some(acc) => {
                for (name, a) in acc.iter_mut() {
                    a.add_assign(g.get(name).expect("same parameter set"));
                }
            }
        }
    }
    let mut grads = grads.expect("grad_accum >= 1");
    if accum > 1 {
        for (_, a) in grads.iter_mut() {
            *a = a.scaled(1.0 / accum as f64);
        }
    }
    let lr = lr_at(&state.config, step + 1);
    state.optimizer.step(state.model.denoiser.params_mut(), &grads, lr);
    state.global_step += 1;
    state.losses.push(total);
    Ok(total)
}

/// Trains until the configured step count; `on_step` sees each finished step
/// and may checkpoint.
pub fn train(
    state: &mut TrainState,
    data: &TrainData,
    mut on_step: impl FnMut(&TrainState, f64) -> Result<()>,
) -> Result<()> {
    while !state.is_done() {
        let loss = train_step(state, data)?;
        on_step(state, loss)?;
    }
    Ok(())
}
