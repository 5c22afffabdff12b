//! Oracle denoisers, image metrics, analytic test fields and the suites
//! behind `eval`.

use std::collections::BTreeMap;
use std::path::Path;

use lift3d_autograd::{Array, Graph, Var};
use nalgebra::Vector3;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::camera::{fixed_view_set, relative_pose, CameraPose};
use crate::diffusion::{forward_diffuse, sample_views, Cond, NoiseModel, NoiseSchedule, SamplerConfig};
use crate::distill3d::{
    anneal_window, composite_weights, distill, lambda_o, render_image, sds_grad, DistillConfig, Field, FieldConfig,
    FieldSamples, PoseMode, RenderOptions, Shading,
};
use crate::error::{ensure, Error, Result};
use crate::latent_codec::{CodecConfig, EmbeddingEncoder, LatentCodec, LatentImage};
use crate::mv_denoiser::{AttentionMode, ModelBundle, SlotMeta};
use crate::seeding::{hash_json, normal_array, substream};
use crate::synth_data::{rasterize_view, save_png, ToyObject, VIEWS_PER_SET};
use crate::train_diffusion::{train, TrainConfig, TrainData, TrainState};

pub const PSNR_CAP_DB: f64 = 99.0;
pub const THRESHOLDS_TOML: &str = include_str!("../thresholds.toml");

/// Closed-form optimal denoiser for fixed per-slot targets `z*`.
#[derive(Clone, Debug)]
pub struct OracleDenoiser {
    targets: Array,
    schedule: NoiseSchedule,
}

impl OracleDenoiser {
    /// `targets` is `[S, C, h, w]`.
    pub fn new(targets: Array, schedule: NoiseSchedule) -> Result<Self> {
        ensure!(targets.ndim() == 4, "oracle targets must be [S, C, h, w]");
        Ok(Self { targets, schedule })
    }

    pub fn targets(&self) -> &Array {
        &self.targets
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    fn coefficients(&self, t: usize) -> Result<(f64, f64)> {
        ensure!(t >= 1, "oracle prediction is undefined at t = 0");
        self.schedule.check_step(t)?;
        let ab = self.schedule.alpha_bar(t);
        Ok((ab.sqrt(), 1.0 / (1.0 - ab).sqrt()))
    }
}

/// `(z_t - sqrt(ab_t) z*) / sqrt(1 - ab_t)` for every slot at a shared `t`.
pub fn oracle_predict(oracle: &OracleDenoiser, z_t: &Array, t: usize) -> Result<Array> {
    ensure!(z_t.shape() == oracle.targets.shape(), "z_t shape {:?} != targets {:?}", z_t.shape(), oracle.targets.shape());
    let (a, b) = oracle.coefficients(t)?;
    Ok(z_t.zip_map(&oracle.targets, |z, s| (z - a * s) * b))
}

impl NoiseModel for OracleDenoiser {
    type Handles = ();

    fn bind(&self, _g: &mut Graph, _trainable: bool) {}

    fn forward(&self, g: &mut Graph, _h: &(), latents: Var, metas: &[Vec<SlotMeta>], _conds: &[Cond<'_>]) -> Result<Var> {
        let shape = g.shape(latents).to_vec();
        let s = self.targets.shape()[0];
        ensure!(shape.len() == 5 && shape[1] == s, "oracle expects [B, {s}, C, h, w], got {shape:?}");
        let per = self.targets.len() / s;
        let mut shift = Vec::with_capacity(shape[0] * self.targets.len());
        let mut gain = Vec::with_capacity(shift.capacity());
        for m in metas {
            ensure!(m.len() == s, "{} slot metas for {s} slots", m.len());
            for (k, meta) in m.iter().enumerate() {
                let (a, b) = self.coefficients(meta.timestep)?;
                shift.extend(self.targets.data()[k * per..(k + 1) * per].iter().map(|v| a * v));
                gain.extend(std::iter::repeat_n(b, per));
            }
        }
        let shift = g.constant(Array::new(&shape, shift));
        let gain = g.constant(Array::new(&shape, gain));
        let d = g.sub(latents, shift);
        Ok(g.mul(d, gain))
    }

    fn latent_shape(&self) -> [usize; 3] {
        let s = self.targets.shape();
        [s[1], s[2], s[3]]
    }
}

/// Peak signal-to-noise ratio for images in `[0, 1]`, capped at
/// [`PSNR_CAP_DB`].
pub fn psnr(a: &Array, b: &Array) -> Result<f64> {
    ensure!(a.shape() == b.shape(), "psnr shape mismatch: {:?} vs {:?}", a.shape(), b.shape());
    let mse = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB))
}

/// Pixels darker than `1 - threshold` in any channel.
pub fn foreground_mask(image: &Array, threshold: f64) -> Vec<bool> {
    image.data().chunks(3).map(|px| px.iter().any(|&v| v < 1.0 - threshold)).collect()
}

/// IoU of the non-background masks; two empty masks give 1.
pub fn silhouette_iou(image: &Array, gt: &Array, threshold: f64) -> Result<f64> {
    ensure!(image.shape() == gt.shape(), "iou shape mismatch: {:?} vs {:?}", image.shape(), gt.shape());
    let (a, b) = (foreground_mask(image, threshold), foreground_mask(gt, threshold));
    let inter = a.iter().zip(&b).filter(|(x, y)| **x && **y).count();
    let union = a.iter().zip(&b).filter(|(x, y)| **x || **y).count();
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// Eight-parameter field: logit `p0 + p1..3 . x + p4 |x|^2`, albedo
/// `sigmoid(p5..7)`.
#[derive(Clone, Debug)]
pub struct TinyField {
    pub params: Array,
    pub bound: f64,
}

impl TinyField {
    pub const NUM_PARAMS: usize = 8;

    pub fn new(params: [f64; 8], bound: f64) -> Self {
        Self {
            params: Array::new(&[8], params.to_vec()),
            bound,
        }
    }
}

impl Field for TinyField {
    type Handles = Var;

    fn bind(&self, g: &mut Graph, trainable: bool) -> Var {
        if trainable {
            g.param(self.params.clone())
        } else {
            g.constant(self.params.clone())
        }
    }

    fn evaluate(&self, g: &mut Graph, p: &Var, points: &[Vector3<f64>]) -> FieldSamples {
        let m = points.len();
        let xs: Vec<f64> = points.iter().flat_map(|x| [x.x, x.y, x.z]).collect();
        let x = Array::new(&[m, 3], xs);
        let r2 = Array::from_fn(&[m], |i| points[i].norm_squared());
        let p0 = g.narrow(*p, 0, 0, 1);
        let lin = g.narrow(*p, 0, 1, 3);
        let quad = g.narrow(*p, 0, 4, 1);
        let col = g.reshape(lin, &[3, 1]);
        let xc = g.constant(x.clone());
        let xl = g.matmul(xc, col);
        let xl = g.reshape(xl, &[m]);
        let r2 = g.constant(r2);
        let q = g.mul(r2, quad);
        let u = g.add(xl, q);
        let u = g.add(u, p0);
        let density = g.softplus(u);
        let row = g.reshape(lin, &[1, 3]);
        let x2 = g.constant(x.scaled(2.0));
        let qx = g.mul(x2, quad);
        let density_grad = g.add(qx, row);
        let a = g.narrow(*p, 0, 5, 3);
        let a = g.sigmoid(a);
        let a = g.reshape(a, &[1, 3]);
        let albedo = g.broadcast_to(a, &[m, 3]);
        FieldSamples {
            density,
            density_grad,
            albedo,
        }
    }

    fn bound(&self) -> f64 {
        self.bound
    }
}

/// Constant-density ball at the origin with outward normals.
#[derive(Clone, Debug)]
pub struct SphereField {
    pub radius: f64,
    pub density: f64,
    pub albedo: [f64; 3],
}

impl Field for SphereField {
    type Handles = ();

    fn bind(&self, _g: &mut Graph, _trainable: bool) {}

    fn evaluate(&self, g: &mut Graph, _h: &(), points: &[Vector3<f64>]) -> FieldSamples {
        let m = points.len();
        let density = Array::from_fn(&[m], |i| if points[i].norm() < self.radius { self.density } else { 0.0 });
        let grad: Vec<f64> = points
            .iter()
            .flat_map(|x| {
                let n = x.norm().max(1e-12);
                [-x.x / n, -x.y / n, -x.z / n]
            })
            .collect();
        let albedo = Array::from_fn(&[m, 3], |k| self.albedo[k % 3]);
        FieldSamples {
            density: g.constant(density),
            density_grad: g.constant(Array::new(&[m, 3], grad)),
            albedo: g.constant(albedo),
        }
    }

    fn bound(&self) -> f64 {
        self.radius * 1.5
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Threshold {
    pub metric: String,
    pub criterion: u32,
    pub op: String,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    pub version: u32,
    #[serde(rename = "threshold")]
    pub entries: Vec<Threshold>,
}

impl Thresholds {
    pub fn builtin() -> Self {
        toml::from_str(THRESHOLDS_TOML).expect("bundled thresholds parse")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub metric: String,
    pub criterion: u32,
    pub op: String,
    pub threshold: f64,
    pub value: Option<f64>,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub suite: String,
    pub metrics: BTreeMap<String, f64>,
    pub checks: Vec<CheckResult>,
    pub meta: serde_json::Value,
    pub artifacts: Vec<String>,
}

impl EvalReport {
    pub fn new(suite: &str, meta: serde_json::Value) -> Self {
        Self {
            suite: suite.into(),
            metrics: BTreeMap::new(),
            checks: Vec::new(),
            meta,
            artifacts: Vec::new(),
        }
    }

    pub fn record(&mut self, metric: impl Into<String>, value: f64) {
        self.metrics.insert(metric.into(), value);
    }

    /// Applies every threshold whose metric was recorded under this suite.
    pub fn apply(&mut self, thresholds: &Thresholds) {
        let prefix = format!("{}.", self.suite);
        for th in thresholds.entries.iter().filter(|t| t.metric.starts_with(&prefix)) {
            let value = self.metrics.get(&th.metric).copied();
            let passed = value.is_some_and(|v| match th.op.as_str() {
                "le" => v <= th.value,
                "ge" => v >= th.value,
                "lt" => v < th.value,
                "gt" => v > th.value,
                _ => false,
            });
            self.checks.push(CheckResult {
                metric: th.metric.clone(),
                criterion: th.criterion,
                op: th.op.clone(),
                threshold: th.value,
                value,
                passed,
            });
        }
    }

    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("serializable report");
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// Fast closed-form checks of schedules, diffusion and renderer invariants.
pub fn run_units_suite(seed: u64) -> Result<EvalReport> {
    let mut rep = EvalReport::new("units", serde_json::json!({ "seed": seed }));
    let dc = DistillConfig::default();
    let expected = [
        (lambda_o(2500)?, 500.0),
        (lambda_o(5000)?, 1000.0),
        (lambda_o(9000)?, 1000.0),
        (anneal_window(0, &dc).0, 0.02),
        (anneal_window(0, &dc).1, 0.98),
        (anneal_window(8000, &dc).1, 0.5),
        (dc.guidance_scale, 10.0),
        (dc.lambda_e, 1.0),
    ];
    let err = expected.iter().map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    rep.record("units.schedule_constants_max_err", err);

    let schedule = NoiseSchedule::from_config(&Default::default())?;
    let mut rng = substream(seed, "eval/units", 0);
    let z = normal_array(&mut rng, &[3, 8, 8]);
    let eps = normal_array(&mut rng, &[3, 8, 8]);
    let z0 = forward_diffuse(&z, 0, &eps, &schedule)?;
    rep.record("units.forward_diffuse_t0_max_err", z0.max_abs_diff(&z));

    let (mut excess, mut min_w) = (f64::NEG_INFINITY, f64::INFINITY);
    for _ in 0..10_000 {
        let n = rng.random_range(1..64);
        let sig: Vec<f64> = (0..n).map(|_| rng.random::<f64>() * 50.0).collect();
        let del: Vec<f64> = (0..n).map(|_| rng.random::<f64>() * 0.1).collect();
        let w = composite_weights(&sig, &del);
        excess = excess.max(w.iter().sum::<f64>() - 1.0);
        min_w = w.iter().copied().fold(min_w, f64::min);
    }
    rep.record("units.weight_sum_excess", excess.max(0.0));
    rep.record("units.min_weight", min_w);

    let mut g = Graph::new();
    let n = g.constant(Array::new(&[1, 3], vec![0.5, 0.0, 3f64.sqrt() / 2.0]));
    let v = Array::new(&[1, 3], vec![1.0, 0.0, 0.0]);
    let l = crate::distill3d::orientation_penalty(&mut g, &Array::ones(&[1, 1]), n, &v, 1e-4);
    rep.record("units.orientation_single_sample_err", (g.value(l).item() - 0.25).abs());
    rep.apply(&Thresholds::builtin());
    Ok(rep)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OracleSuiteConfig {
    pub steps: usize,
    pub resolution: usize,
    pub pool_factor: usize,
    pub samples_per_ray: usize,
    pub sphere_radius: f64,
    pub sphere_albedo: [f64; 3],
    pub field: FieldConfig,
    pub seed: u64,
}

impl Default for OracleSuiteConfig {
    fn default() -> Self {
        Self {
            steps: 1500,
            resolution: 32,
            pool_factor: 1,
            samples_per_ray: 16,
            sphere_radius: 0.5,
            sphere_albedo: [0.85, 0.35, 0.2],
            field: FieldConfig {
                hidden: 16,
                ..Default::default()
            },
            seed: 0,
        }
    }
}

impl OracleSuiteConfig {
    pub fn distill_config(&self) -> DistillConfig {
        DistillConfig {
            steps: self.steps,
            render_resolution: self.resolution,
            samples_per_ray: self.samples_per_ray,
            shading: Shading::LambertianPointLight,
            light_jitter: 0.0,
            pose_mode: PoseMode::Fixed,
            field: self.field.clone(),
            seed: self.seed,
            ..Default::default()
        }
    }
}

/// Everything the oracle distillation run needs.
pub struct OracleSetup {
    pub views: Vec<Array>,
    pub poses: Vec<CameraPose>,
    pub codec: LatentCodec,
    pub oracle: OracleDenoiser,
    pub embedding: crate::latent_codec::EmbeddingVector,
}

pub fn oracle_setup(config: &OracleSuiteConfig) -> Result<OracleSetup> {
    let codec_cfg = CodecConfig {
        pool_factor: config.pool_factor,
        ..Default::default()
    };
    let codec = LatentCodec::new(&codec_cfg)?;
    let sphere = ToyObject::centered_sphere(config.sphere_radius, config.sphere_albedo);
    let poses = fixed_view_set(4)?;
    let views: Vec<Array> = poses
        .iter()
        .map(|p| rasterize_view(&sphere, p, config.resolution).map(|v| v.image))
        .collect::<Result<_>>()?;
    let latents: Vec<Array> = views
        .iter()
        .map(|v| {
            let l = codec.encode_latent(v)?.data;
            let mut s = vec![1];
            s.extend_from_slice(l.shape());
            Ok(l.reshape(&s))
        })
        .collect::<Result<_>>()?;
    let refs: Vec<&Array> = latents.iter().collect();
    let schedule = NoiseSchedule::from_config(&Default::default())?;
    let oracle = OracleDenoiser::new(Array::concat(&refs, 0), schedule)?;
    let embedding = EmbeddingEncoder::new(&codec_cfg)?.encode(&views[0]);
    Ok(OracleSetup {
        views,
        poses,
        codec,
        oracle,
        embedding,
    })
}

/// Distills against the oracle and scores the result on the four views.
pub fn run_oracle_suite(config: &OracleSuiteConfig, out_dir: Option<&Path>) -> Result<EvalReport> {
    let meta = serde_json::json!({ "config": config, "config_hash": hash_json(config) });
    let mut rep = EvalReport::new("oracle", meta);
    let setup = oracle_setup(config)?;
    let schedule = setup.oracle.schedule().clone();

    // Gradient identity at random latents, one draw per annealing stage.
    let mut rng = substream(config.seed, "eval/oracle", 0);
    let mut identity_err = 0.0f64;
    let dc = config.distill_config();
    let rel: Vec<_> = setup
        .poses
        .iter()
        .map(|p| relative_pose(&setup.poses[0], p))
        .collect::<Result<_>>()?;
    for k in 0..8 {
        let z = normal_array(&mut rng, setup.oracle.targets().shape());
        let window = anneal_window(k * 1000, &dc);
        let s = sds_grad(&setup.oracle, &schedule, &z, &setup.embedding, &rel, None, window, 10.0, &mut rng)?;
        let ab = schedule.alpha_bar(s.t);
        let c = ab.sqrt() / (1.0 - ab).sqrt();
        let want = z.zip_map(setup.oracle.targets(), |a, b| c * (a - b));
        identity_err = identity_err.max(s.grad.max_abs_diff(&want));
    }
    rep.record("oracle.sds_identity_max_err", identity_err);

    let field = distill(&setup.oracle, &schedule, &setup.codec, &setup.embedding, &dc, |_, _| Ok(()))?;
    let opts = RenderOptions::new(config.samples_per_ray, Shading::LambertianPointLight);
    let mut min_psnr = f64::INFINITY;
    let mut renders = Vec::new();
    for (k, (pose, gt)) in setup.poses.iter().zip(&setup.views).enumerate() {
        let img = render_image(&field, pose, config.resolution, &opts)?;
        let p = psnr(&img, gt)?;
        rep.record(format!("oracle.psnr_view{k}_db"), p);
        rep.record(format!("oracle.iou_view{k}"), silhouette_iou(&img, gt, 0.05)?);
        min_psnr = min_psnr.min(p);
        renders.push(img);
    }
    rep.record("oracle.min_psnr_db", min_psnr);
    rep.record_field_hash(&field);
    if let Some(dir) = out_dir {
        let mut tiles = renders.clone();
        tiles.extend(setup.views.iter().cloned());
        let path = dir.join("oracle_grid.png");
        save_png(&crate::distill3d::image_grid(&tiles, 4), &path)?;
        rep.artifacts.push(path.display().to_string());
    }
    rep.apply(&Thresholds::builtin());
    Ok(rep)
}

impl EvalReport {
    fn record_field_hash(&mut self, field: &crate::distill3d::RadianceField) {
        if let serde_json::Value::Object(m) = &mut self.meta {
            m.insert("field_hash".into(), field.params().hash_hex().into());
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationConfig {
    pub stage2: TrainConfig,
    pub seeds: Vec<u64>,
    pub eval_objects: usize,
    pub sampler: SamplerConfig,
    pub iou_threshold: f64,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            stage2: TrainConfig::stage2(),
            seeds: vec![0],
            eval_objects: 2,
            sampler: SamplerConfig::default(),
            iou_threshold: 0.05,
        }
    }
}

/// Per-variant outcome of [`run_ablation_ema`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantSummary {
    pub attention_mode: AttentionMode,
    pub seed: u64,
    pub config_hash: String,
    /// Hash of the training config with the attention mode left out.
    pub controlled_hash: String,
    pub final_smoothed_loss: f64,
    pub mean_iou: f64,
    pub mean_reference_similarity: f64,
    pub grids: Vec<String>,
}

/// Trains the joint-attention and plain multi-view stage-2 variants from the
/// same base under identical seeds and budgets and compares their samples.
pub fn run_ablation_ema(
    data: &TrainData,
    base: &ModelBundle,
    config: &AblationConfig,
    out_dir: Option<&Path>,
) -> Result<EvalReport> {
    ensure!(config.eval_objects <= data.objects.len(), "eval_objects exceeds the dataset");
    let meta = serde_json::json!({ "config": config, "config_hash": hash_json(config) });
    let mut rep = EvalReport::new("ablation", meta);
    let codec = LatentCodec::new(&base.codec)?;
    let mut variants = Vec::new();
    for &seed in &config.seeds {
        for mode in [AttentionMode::EmaJoint, AttentionMode::PlainMultiview] {
            let mut model = base.clone();
            model.denoiser = model.denoiser.with_attention_mode(mode);
            let tc = TrainConfig {
                seed,
                ..config.stage2.clone()
            };
            let mut state = TrainState::new(model, tc.clone())?;
            train(&mut state, data, |_, _| Ok(()))?;
            let full = serde_json::json!({ "train": tc, "denoiser": state.model.denoiser.config() });
            let mut controlled = full.clone();
            controlled["denoiser"]["attention_mode"] = serde_json::Value::Null;
            let mut ious = Vec::new();
            let mut sims = Vec::new();
            let mut grids = Vec::new();
            for obj in 0..config.eval_objects {
                let o = &data.objects[obj];
                let emb = &o.random_embeddings[0];
                let step = VIEWS_PER_SET / 4;
                let idx: Vec<usize> = (0..4).map(|i| i * step).collect();
                let rel: Vec<_> = idx
                    .iter()
                    .map(|&i| relative_pose(&o.random_poses[0], &o.fixed_poses[i]))
                    .collect::<Result<_>>()?;
                let mut rng = substream(seed, "eval/ablation", obj as u64);
                let samples = sample_views(
                    &state.model.denoiser,
                    &codec,
                    &state.model.schedule,
                    emb,
                    &rel,
                    &config.sampler,
                    &mut rng,
                )?;
                let gts: Vec<Array> = idx
                    .iter()
                    .map(|&i| codec.decode_latent(&LatentImage::new(o.fixed_latents[i].data.clone())))
                    .collect();
                for (s, gt) in samples.iter().zip(&gts) {
                    ious.push(silhouette_iou(s, gt, config.iou_threshold)?);
                    sims.push(state.model.encoder.encode(s).cosine(emb));
                }
                if let Some(dir) = out_dir {
                    let mut tiles = samples.clone();
                    tiles.extend(gts);
                    let name = format!("ablation_{}_seed{seed}_obj{obj}.png", mode_name(mode));
                    let path = dir.join(name);
                    save_png(&crate::distill3d::image_grid(&tiles, 4), &path)?;
                    grids.push(path.display().to_string());
                }
            }
            let mean = |v: &[f64]| if v.is_empty() { 0.0 } else { v.iter().sum::<f64>() / v.len() as f64 };
            let summary = VariantSummary {
                attention_mode: mode,
                seed,
                config_hash: hash_json(&full),
                controlled_hash: hash_json(&controlled),
                final_smoothed_loss: state.smoothed_loss(state.global_step).unwrap_or(f64::NAN),
                mean_iou: mean(&ious),
                mean_reference_similarity: mean(&sims),
                grids: grids.clone(),
            };
            let key = format!("ablation.{}.seed{seed}", mode_name(mode));
            rep.record(format!("{key}.mean_iou"), summary.mean_iou);
            rep.record(format!("{key}.reference_similarity"), summary.mean_reference_similarity);
            rep.record(format!("{key}.final_smoothed_loss"), summary.final_smoothed_loss);
            rep.artifacts.extend(grids);
            variants.push(summary);
        }
    }
    if let serde_json::Value::Object(m) = &mut rep.meta {
        m.insert("variants".into(), serde_json::to_value(&variants).expect("serializable"));
    }
    rep.apply(&Thresholds::builtin());
    Ok(rep)
}

fn mode_name(mode: AttentionMode) -> &'static str {
    match mode {
        AttentionMode::EmaJoint => "ema_joint",
        AttentionMode::PlainMultiview => "plain_multiview",
    }
}
