//! Radiance field, differentiable volume rendering and SDS distillation.
//!
//! The field maps positional-encoded points to a density logit and albedo.
//! Normals come from the analytic density gradient, propagated as forward
//! tangents through the MLP inside the graph so shading and the orientation
//! penalty stay differentiable in the field parameters.

use std::f64::consts::PI;
use std::path::Path;

use lift3d_autograd::{Array, Graph, Var};
use nalgebra::Vector3;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camera::{
    fixed_view_set, generate_rays, relative_pose, CameraPose, RelativePose, ViewFrame, CAMERA_DISTANCE,
    RANDOM_ELEVATION_MAX_DEG, RANDOM_ELEVATION_MIN_DEG,
};
use crate::checkpoint::Checkpoint;
use crate::diffusion::{cfg_predict, forward_diffuse, sample_latents, NoiseModel, NoiseSchedule, SamplerConfig};
use crate::error::{ensure, Error, Result};
use crate::latent_codec::{assert_no_reference_pixels, EmbeddingVector, LatentCodec};
use crate::mv_denoiser::{assemble_ema_sequence, SlotMeta};
use crate::optim::AdamW;
use crate::params::{init_fan_in, Bound, ParamStore};
use crate::seeding::{normal_array, substream, Rng};
use crate::synth_data::SHADING_AMBIENT;

pub const NOMINAL_DISTILL_STEPS: usize = 10_000;
pub const ORIENT_RAMP_END: usize = 5_000;
pub const VISIBILITY_THRESHOLD: f64 = 1e-4;
const NORMAL_EPS: f64 = 1e-20;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FieldConfig {
    pub hidden: usize,
    pub layers: usize,
    pub frequencies: usize,
    /// Half-size of the axis-aligned bounding box.
    pub bound: f64,
    pub blob_density: f64,
    pub blob_radius: f64,
    pub init_seed: u64,
}

impl Default for FieldConfig {
    fn default() -> Self {
        Self {
            hidden: 32,
            layers: 2,
            frequencies: 4,
            bound: 1.0,
            blob_density: 10.0,
            blob_radius: 0.5,
            init_seed: 0,
        }
    }
}

impl FieldConfig {
    pub fn encoding_dim(&self) -> usize {
        3 + 6 * self.frequencies
    }
}

/// Densities, density gradients and albedos at a batch of points.
pub struct FieldSamples {
    /// `[M]`, nonnegative.
    pub density: Var,
    /// `[M, 3]`, a positive multiple of the density gradient.
    pub density_grad: Var,
    /// `[M, 3]` in `[0, 1]`.
    pub albedo: Var,
}

/// A density/albedo field evaluable inside a graph.
pub trait Field {
    type Handles;
    fn bind(&self, g: &mut Graph, trainable: bool) -> Self::Handles;
    fn evaluate(&self, g: &mut Graph, handles: &Self::Handles, points: &[Vector3<f64>]) -> FieldSamples;
    fn bound(&self) -> f64;
}

#[derive(Clone, Debug, PartialEq)]
pub struct RadianceField {
    config: FieldConfig,
    params: ParamStore,
}

/// `[x, sin(2^k pi x), cos(2^k pi x)]` of `x / bound` and its Jacobian
/// `[3, M, P]` with respect to the world-space point.
pub fn positional_encoding(points: &[Vector3<f64>], frequencies: usize, bound: f64) -> (Array, Array) {
    let m = points.len();
    let p = 3 + 6 * frequencies;
    let mut f = vec![0.0; m * p];
    let mut jac = vec![0.0; 3 * m * p];
    let inv = 1.0 / bound;
    for (i, x) in points.iter().enumerate() {
        let row = &mut f[i * p..(i + 1) * p];
        for j in 0..3 {
            let xn = x[j] * inv;
            row[j] = xn;
            jac[(j * m + i) * p + j] = inv;
            for k in 0..frequencies {
                let w = (1u64 << k) as f64 * PI;
                let (s, c) = (w * xn).sin_cos();
                let (si, ci) = (3 + 6 * k + j, 3 + 6 * k + 3 + j);
                row[si] = s;
                row[ci] = c;
                jac[(j * m + i) * p + si] = w * c * inv;
                jac[(j * m + i) * p + ci] = -w * s * inv;
            }
        }
    }
    (Array::new(&[m, p], f), Array::new(&[3, m, p], jac))
}

impl RadianceField {
    pub fn new(config: FieldConfig) -> Result<Self> {
        ensure!(config.bound > 0.0 && config.blob_radius > 0.0, "bound and blob_radius must be positive");
        ensure!(config.layers == 0 || config.hidden > 0, "hidden width must be positive");
        let mut rng = substream(config.init_seed, "field-init", 0);
        let mut params = ParamStore::new();
        let mut din = config.encoding_dim();
        for l in 0..config.layers {
            params.insert(format!("l{l}.w"), init_fan_in(&mut rng, &[din, config.hidden], din, 1.0));
            params.insert(format!("l{l}.b"), Array::zeros(&[config.hidden]));
            din = config.hidden;
        }
        params.insert("out.w", init_fan_in(&mut rng, &[din, 4], din, 0.5));
        params.insert("out.b", Array::zeros(&[4]));
        Ok(Self { config, params })
    }

    pub fn from_params(config: FieldConfig, params: ParamStore) -> Result<Self> {
        let fresh = Self::new(config.clone())?;
        ensure!(
            fresh.params.names().eq(params.names()),
            "field parameter names do not match the config"
        );
        for (k, v) in fresh.params.iter() {
            ensure!(params.get(k).map(Array::shape) == Some(v.shape()), "field parameter {k} has wrong shape");
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &FieldConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    fn blob(&self, x: &Vector3<f64>) -> (f64, Vector3<f64>) {
        let (a, r) = (self.config.blob_density, self.config.blob_radius);
        let n = x.norm();
        let grad = if n > 0.0 { -a / r * x / n } else { Vector3::zeros() };
        (a * (1.0 - n / r), grad)
    }

    pub fn save(&self, path: &Path, extra: serde_json::Value) -> Result<()> {
        let meta = serde_json::json!({
            "kind": "radiance_field",
            "field": self.config,
            "extra": extra,
        });
        let mut ck = Checkpoint::new(meta);
        ck.insert_store("field/", &self.params);
        ck.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck = Checkpoint::load(path)?;
        if ck.meta["kind"] != "radiance_field" {
            return Err(Error::format(path, "not a radiance-field checkpoint"));
        }
        let config: FieldConfig = serde_json::from_value(ck.meta["field"].clone())
            .map_err(|e| Error::format(path, format!("field config: {e}")))?;
        Self::from_params(config, ck.store("field/"))
    }
}

impl Field for RadianceField {
    type Handles = Bound;

    fn bind(&self, g: &mut Graph, trainable: bool) -> Bound {
        self.params.bind(g, trainable)
    }

    fn evaluate(&self, g: &mut Graph, b: &Bound, points: &[Vector3<f64>]) -> FieldSamples {
        let m = points.len();
        let (feats, jac) = positional_encoding(points, self.config.frequencies, self.config.bound);
        let p = feats.shape()[1];
        let mut h = g.constant(feats);
        let mut dh = g.constant(jac.reshape(&[3 * m, p]));
        for l in 0..self.config.layers {
            let (w, bias) = (b.var(&format!("l{l}.w")), b.var(&format!("l{l}.b")));
            let a = g.linear(h, w, bias);
            let da = g.matmul(dh, w);
            let hw = self.config.hidden;
            let slope = g.sigmoid(a);
            let slope = g.reshape(slope, &[1, m, hw]);
            let da = g.reshape(da, &[3, m, hw]);
            let da = g.mul(da, slope);
            dh = g.reshape(da, &[3 * m, hw]);
            h = g.softplus(a);
        }
        let (w, bias) = (b.var("out.w"), b.var("out.b"));
        let raw = g.linear(h, w, bias);
        let w_sigma = g.narrow(w, 1, 0, 1);
        let draw = g.matmul(dh, w_sigma);
        let draw = g.reshape(draw, &[3, m]);
        let draw = g.permute(draw, &[1, 0]);

        let mut blob = Vec::with_capacity(m);
        let mut blob_grad = Vec::with_capacity(3 * m);
        for x in points {
            let (v, gr) = self.blob(x);
            blob.push(v);
            blob_grad.extend([gr.x, gr.y, gr.z]);
        }
        let blob = g.constant(Array::new(&[m], blob));
        let blob_grad = g.constant(Array::new(&[m, 3], blob_grad));
        let logit = g.narrow(raw, 1, 0, 1);
        let logit = g.reshape(logit, &[m]);
        let logit = g.add(logit, blob);
        let density = g.softplus(logit);
        let density_grad = g.add(draw, blob_grad);
        let rgb = g.narrow(raw, 1, 1, 3);
        let albedo = g.sigmoid(rgb);
        FieldSamples {
            density,
            density_grad,
            albedo,
        }
    }

    fn bound(&self) -> f64 {
        self.config.bound
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shading {
    Albedo,
    LambertianPointLight,
    SoftBlend,
}

#[derive(Clone, Debug)]
pub struct RenderOptions {
    pub samples_per_ray: usize,
    pub shading: Shading,
    /// Point-light position; `None` puts the light at the camera.
    pub light: Option<Vector3<f64>>,
    /// Lambert weight for [`Shading::SoftBlend`].
    pub lambert_blend: f64,
    /// Jitter offsets within each bin (`None` samples bin midpoints).
    pub jitter: Option<Vec<f64>>,
    pub background: f64,
}

impl RenderOptions {
    pub fn new(samples_per_ray: usize, shading: Shading) -> Self {
        Self {
            samples_per_ray,
            shading,
            light: None,
            lambert_blend: 1.0,
            jitter: None,
            background: 1.0,
        }
    }
}

pub struct RenderOutput {
    /// `[H, W, 3]`.
    pub rgb: Var,
    /// `[R, S]` weights of the rays that hit the bounding box.
    pub weights: Var,
    /// `[R * S, 3]` unit normals `-grad / |grad|`.
    pub normals: Var,
    /// `[R * S, 3]` ray direction of every sample.
    pub sample_dirs: Array,
    /// `[R * S]` densities.
    pub density: Array,
    /// `[H, W]`.
    pub opacity: Array,
    /// `[H, W]`, weighted mean distance along the ray.
    pub depth: Array,
    /// Pixel index of every hit ray.
    pub hit_rays: Vec<usize>,
    pub samples_per_ray: usize,
    pub height: usize,
    pub width: usize,
}

/// Entry and exit distances of a ray through `[-b, b]^3`.
pub fn ray_box(origin: &Vector3<f64>, dir: &Vector3<f64>, b: f64) -> Option<(f64, f64)> {
    let (mut lo, mut hi) = (0.0f64, f64::INFINITY);
    for k in 0..3 {
        if dir[k].abs() < 1e-15 {
            if origin[k].abs() > b {
                return None;
            }
            continue;
        }
        let t1 = (-b - origin[k]) / dir[k];
        let t2 = (b - origin[k]) / dir[k];
        lo = lo.max(t1.min(t2));
        hi = hi.min(t1.max(t2));
    }
    (hi > lo).then_some((lo, hi))
}

/// Emission-absorption weights `w_i = T_i (1 - exp(-sigma_i delta_i))` of one ray.
pub fn composite_weights(sigmas: &[f64], deltas: &[f64]) -> Vec<f64> {
    let mut acc = 0.0f64;
    sigmas
        .iter()
        .zip(deltas)
        .map(|(&s, &d)| {
            let w = (-acc).exp() * (1.0 - (-s * d).exp());
            acc += s * d;
            w
        })
        .collect()
}

/// Strictly upper-triangular ones: `(x U)_i = sum_{j < i} x_j`.
fn exclusive_cumsum_matrix(s: usize) -> Array {
    Array::from_fn(&[s, s], |k| if k / s < k % s { 1.0 } else { 0.0 })
}

pub fn render<F: Field>(
    g: &mut Graph,
    field: &F,
    handles: &F::Handles,
    frame: &ViewFrame,
    opts: &RenderOptions,
) -> Result<RenderOutput> {
    let s = opts.samples_per_ray;
    ensure!(s >= 1, "samples_per_ray must be >= 1");
    if let Some(j) = &opts.jitter {
        ensure!(j.len() >= frame.height * frame.width * s, "jitter buffer too short");
    }
    let rays = generate_rays(frame);
    let (h, w) = (frame.height, frame.width);
    let o = rays.origin;
    let mut hit_rays = Vec::new();
    let mut points = Vec::new();
    let mut dirs = Vec::new();
    let mut deltas = Vec::new();
    let mut ts = Vec::new();
    for (r, d) in rays.directions.iter().enumerate() {
        let Some((t0, t1)) = ray_box(&o, d, field.bound()) else {
            continue;
        };
        hit_rays.push(r);
        let delta = (t1 - t0) / s as f64;
        for i in 0..s {
            let u = opts.jitter.as_ref().map_or(0.5, |j| j[r * s + i]);
            let t = t0 + (i as f64 + u) * delta;
            points.push(o + t * d);
            dirs.extend([d.x, d.y, d.z]);
            deltas.push(delta);
            ts.push(t);
        }
    }
    let nr = hit_rays.len();
    let m = nr * s;
    let sample_dirs = Array::new(&[m, 3], dirs);
    let bg = opts.background;
    if nr == 0 {
        let rgb = g.constant(Array::full(&[h, w, 3], bg));
        let weights = g.constant(Array::zeros(&[0, s]));
        let normals = g.constant(Array::zeros(&[0, 3]));
        return Ok(RenderOutput {
            rgb,
            weights,
            normals,
            sample_dirs,
            density: Array::zeros(&[0]),
            opacity: Array::zeros(&[h, w]),
            depth: Array::zeros(&[h, w]),
            hit_rays,
            samples_per_ray: s,
            height: h,
            width: w,
        });
    }
    let fs = field.evaluate(g, handles, &points);

    let gsq = g.square(fs.density_grad);
    let gn2 = g.sum_axis(gsq, 1);
    let gn2 = g.add_scalar(gn2, NORMAL_EPS);
    let inv = g.powf(gn2, -0.5);
    let normals = g.mul(fs.density_grad, inv);
    let normals = g.neg(normals);

    let sigma = g.reshape(fs.density, &[nr, s]);
    let delta = g.constant(Array::new(&[nr, s], deltas));
    let sd = g.mul(sigma, delta);
    let u = g.constant(exclusive_cumsum_matrix(s));
    let cum = g.matmul(sd, u);
    let neg_cum = g.neg(cum);
    let trans = g.exp(neg_cum);
    let neg_sd = g.neg(sd);
    let keep = g.exp(neg_sd);
    let alpha = g.neg(keep);
    let alpha = g.add_scalar(alpha, 1.0);
    let weights = g.mul(trans, alpha);

    let color = match opts.shading {
        Shading::Albedo => fs.albedo,
        Shading::LambertianPointLight | Shading::SoftBlend => {
            let light = opts.light.unwrap_or(o);
            let mut l = Vec::with_capacity(3 * m);
            for p in &points {
                let v = (light - p).normalize();
                l.extend([v.x, v.y, v.z]);
            }
            let l = g.constant(Array::new(&[m, 3], l));
            let ndl = g.mul(normals, l);
            let ndl = g.sum_axis(ndl, 1);
            let ndl = g.relu(ndl);
            let shade = g.scale(ndl, 1.0 - SHADING_AMBIENT);
            let shade = g.add_scalar(shade, SHADING_AMBIENT);
            let shade = if opts.shading == Shading::SoftBlend {
                let k = opts.lambert_blend;
                let s = g.scale(shade, k);
                g.add_scalar(s, 1.0 - k)
            } else {
                shade
            };
            g.mul(fs.albedo, shade)
        }
    };
    let color = g.reshape(color, &[nr, s, 3]);
    let w3 = g.reshape(weights, &[nr, s, 1]);
    let wc = g.mul(color, w3);
    let rgb = g.sum_axis(wc, 1);
    let rgb = g.reshape(rgb, &[nr, 3]);
    let opac = g.sum_axis(weights, 1);
    // Hit-ray color minus background: sum w c - bg * sum w.
    let bgw = g.scale(opac, -bg);
    let rgb = g.add(rgb, bgw);
    let full = g.scatter_rows(rgb, &hit_rays, h * w);
    let full = g.add_scalar(full, bg);
    let rgb = g.reshape(full, &[h, w, 3]);

    let wv = g.value(weights).clone();
    let mut opacity = Array::zeros(&[h, w]);
    let mut depth = Array::zeros(&[h, w]);
    for (k, &r) in hit_rays.iter().enumerate() {
        let row = &wv.data()[k * s..(k + 1) * s];
        opacity.data_mut()[r] = row.iter().sum();
        depth.data_mut()[r] = row.iter().zip(&ts[k * s..(k + 1) * s]).map(|(a, b)| a * b).sum();
    }
    let density = g.value(fs.density).clone();
    Ok(RenderOutput {
        rgb,
        weights,
        normals,
        sample_dirs,
        density,
        opacity,
        depth,
        hit_rays,
        samples_per_ray: s,
        height: h,
        width: w,
    })
}

/// Gradient-free render to a plain `[H, W, 3]` image.
pub fn render_image<F: Field>(field: &F, pose: &CameraPose, resolution: usize, opts: &RenderOptions) -> Result<Array> {
    let mut g = Graph::new();
    let b = field.bind(&mut g, false);
    let frame = ViewFrame::square(*pose, resolution)?;
    let out = render(&mut g, field, &b, &frame, opts)?;
    Ok(g.value(out.rgb).map(|v| v.clamp(0.0, 1.0)))
}

/// `sum_i sg(w_i) max(0, n_i . v_i)^2` over samples with `w_i > visibility`.
///
/// The weights enter as plain values, so no gradient reaches them.
pub fn orientation_penalty(g: &mut Graph, weights: &Array, normals: Var, view_dirs: &Array, visibility: f64) -> Var {
    let m = weights.len();
    let w = weights.map(|v| if v > visibility { v } else { 0.0 }).reshape(&[m]);
    let w = g.constant(w);
    let v = g.constant(view_dirs.clone());
    let d = g.mul(normals, v);
    let d = g.sum_axis(d, 1);
    let d = g.reshape(d, &[m]);
    let d = g.relu(d);
    let d = g.square(d);
    let d = g.mul(d, w);
    g.sum_all(d)
}

/// Per-ray orientation penalty averaged over all pixels of the render.
pub fn orientation_loss(g: &mut Graph, render: &RenderOutput, visibility: f64) -> Var {
    let w = g.value(render.weights).clone();
    let p = orientation_penalty(g, &w, render.normals, &render.sample_dirs, visibility);
    g.scale(p, 1.0 / (render.height * render.width) as f64)
}

/// Orientation weight: `0.2 step` up to step 5000, then 1000.
pub fn lambda_o(step: usize) -> Result<f64> {
    ensure!(step <= NOMINAL_DISTILL_STEPS, "lambda_o defined on [0, {NOMINAL_DISTILL_STEPS}], got {step}");
    Ok(if step <= ORIENT_RAMP_END { 0.2 * step as f64 } else { 1000.0 })
}

/// `(t_min, t_max)` as fractions of `T`; `t_max` falls linearly over the
/// annealing window and then stays at its end value.
pub fn anneal_window(step: usize, config: &DistillConfig) -> (f64, f64) {
    let frac = if config.anneal_steps == 0 {
        1.0
    } else {
        (step as f64 / config.anneal_steps as f64).min(1.0)
    };
    let t_max = config.t_max_start + (config.t_max_end - config.t_max_start) * frac;
    (config.t_min, t_max)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoseMode {
    /// Random elevation, four azimuths 90 degrees apart from a random base.
    Random,
    /// The fixed view set at 30 degrees elevation, same poses every step.
    Fixed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillConfig {
    pub steps: usize,
    pub lr: f64,
    pub adam_betas: [f64; 2],
    pub adam_eps: f64,
    pub guidance_scale: f64,
    pub lambda_e: f64,
    pub t_max_start: f64,
    pub t_max_end: f64,
    pub t_min: f64,
    pub anneal_steps: usize,
    /// Map run steps onto the nominal 10000-step horizon of the orientation
    /// weight and annealing schedules.
    pub rescale_schedules: bool,
    pub views_per_step: usize,
    pub render_resolution: usize,
    pub samples_per_ray: usize,
    pub shading: Shading,
    pub light_jitter: f64,
    pub pose_mode: PoseMode,
    pub camera_distance: f64,
    /// Nominal pose of the input view; target poses are taken relative to it.
    pub reference_elevation_deg: f64,
    pub visibility_threshold: f64,
    pub use_reference_slot: bool,
    pub field: FieldConfig,
    pub seed: u64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            steps: NOMINAL_DISTILL_STEPS,
            lr: 0.01,
            adam_betas: [0.9, 0.99],
            adam_eps: 1e-15,
            guidance_scale: 10.0,
            lambda_e: 1.0,
            t_max_start: 0.98,
            t_max_end: 0.5,
            t_min: 0.02,
            anneal_steps: 8000,
            rescale_schedules: true,
            views_per_step: 4,
            render_resolution: 64,
            samples_per_ray: 32,
            shading: Shading::SoftBlend,
            light_jitter: 0.1,
            pose_mode: PoseMode::Random,
            camera_distance: CAMERA_DISTANCE,
            reference_elevation_deg: 0.0,
            visibility_threshold: VISIBILITY_THRESHOLD,
            use_reference_slot: false,
            field: FieldConfig::default(),
            seed: 0,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = 0.0 < self.t_min
            && self.t_min < self.t_max_end
            && self.t_max_end <= self.t_max_start
            && self.t_max_start < 1.0;
        if !ok {
            return Err(Error::Config(format!(
                "need 0 < t_min < t_max_end <= t_max_start < 1, got {} {} {}",
                self.t_min, self.t_max_end, self.t_max_start
            )));
        }
        if self.views_per_step == 0 || self.steps == 0 {
            return Err(Error::Config("steps and views_per_step must be positive".into()));
        }
        Ok(())
    }

    /// Step on the nominal schedule horizon.
    pub fn schedule_step(&self, step: usize) -> usize {
        if !self.rescale_schedules || self.steps == NOMINAL_DISTILL_STEPS {
            return step.min(NOMINAL_DISTILL_STEPS);
        }
        ((step as f64 * NOMINAL_DISTILL_STEPS as f64 / self.steps as f64).round() as usize).min(NOMINAL_DISTILL_STEPS)
    }
}

/// One SDS evaluation.
#[derive(Clone, Debug)]
pub struct SdsSample {
    pub t: usize,
    pub eps: Array,
    pub eps_hat: Array,
    /// `w(t) (eps_hat - eps)` with `w = 1`.
    pub grad: Array,
}

/// Integer timestep drawn uniformly from the fractional window.
pub fn sample_sds_timestep(rng: &mut Rng, schedule: &NoiseSchedule, window: (f64, f64)) -> usize {
    let big_t = schedule.num_steps() as f64;
    let lo = ((window.0 * big_t).ceil() as usize).max(1);
    let hi = ((window.1 * big_t).floor() as usize).clamp(lo, schedule.num_steps());
    rng.random_range(lo..=hi)
}

/// Noise residual for latents `z [V, C, h, w]`; the denoiser runs in its own
/// gradient-free graph.
#[allow(clippy::too_many_arguments)]
pub fn sds_grad<M: NoiseModel>(
    model: &M,
    schedule: &NoiseSchedule,
    z: &Array,
    embedding: &EmbeddingVector,
    poses: &[RelativePose],
    reference: Option<&Array>,
    window: (f64, f64),
    guidance_scale: f64,
    rng: &mut Rng,
) -> Result<SdsSample> {
    let v = z.shape()[0];
    ensure!(poses.len() == v, "{} poses for {v} latents", poses.len());
    let t = sample_sds_timestep(rng, schedule, window);
    let eps = normal_array(rng, z.shape());
    let zt = forward_diffuse(z, t, &eps, schedule)?;
    let metas: Vec<SlotMeta> = poses.iter().map(|&p| SlotMeta::target(t, p)).collect();
    let eps_hat = match reference {
        Some(r) => {
            let (seq, m) = assemble_ema_sequence(&crate::latent_codec::LatentImage::new(r.clone()), &zt, &metas)?;
            cfg_predict(model, &seq, &m, embedding, guidance_scale)?.narrow(0, 1, v)
        }
        None => cfg_predict(model, &zt, &metas, embedding, guidance_scale)?,
    };
    let grad = eps_hat.zip_map(&eps, |a, b| a - b);
    Ok(SdsSample { t, eps, eps_hat, grad })
}

/// Camera poses of one distillation step.
pub fn distill_poses(config: &DistillConfig, rng: &mut Rng) -> Result<Vec<CameraPose>> {
    let n = config.views_per_step;
    match config.pose_mode {
        PoseMode::Fixed => Ok(fixed_view_set(n)?
            .into_iter()
            .map(|p| CameraPose::new(p.elevation(), p.azimuth(), config.camera_distance))
            .collect::<Result<_>>()?),
        PoseMode::Random => {
            let el = rng.random_range(RANDOM_ELEVATION_MIN_DEG..=RANDOM_ELEVATION_MAX_DEG);
            let base = rng.random_range(0.0..360.0);
            (0..n)
                .map(|k| CameraPose::from_degrees(el, base + k as f64 * 360.0 / n as f64, config.camera_distance))
                .collect()
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct DistillStepLog {
    pub step: usize,
    pub t: usize,
    pub t_max: f64,
    pub lambda_o: f64,
    pub sds_norm: f64,
    pub orientation: f64,
}

/// Optimizes a radiance field from an embedding using SDS and the
/// orientation penalty only.
pub fn distill<M: NoiseModel>(
    model: &M,
    schedule: &NoiseSchedule,
    codec: &LatentCodec,
    embedding: &EmbeddingVector,
    config: &DistillConfig,
    mut on_step: impl FnMut(&DistillStepLog, &RadianceField) -> Result<()>,
) -> Result<RadianceField> {
    assert_no_reference_pixels("distill");
    config.validate()?;
    let [c, lh, lw] = model.latent_shape();
    ensure!(
        codec.latent_size(config.render_resolution) == lh && lh == lw,
        "render resolution {} does not give the model's {lh}x{lw} latents",
        config.render_resolution
    );
    let mut field = RadianceField::new(config.field.clone())?;
    let mut opt = AdamW::new(field.params(), config.adam_betas, config.adam_eps, 0.0);
    let reference_pose = CameraPose::from_degrees(config.reference_elevation_deg, 0.0, config.camera_distance)?;
    let reference_latent = if config.use_reference_slot {
        let mut rng = substream(config.seed, "distill/reference", 0);
        let z = sample_latents(
            model,
            schedule,
            embedding,
            &[RelativePose::zero(config.camera_distance)],
            &SamplerConfig {
                guidance_scale: config.guidance_scale,
                ..Default::default()
            },
            &mut rng,
        )?;
        Some(z.reshape(&[c, lh, lw]))
    } else {
        None
    };
    let s = config.samples_per_ray;
    let res = config.render_resolution;
    for step in 0..config.steps {
        let mut rng = substream(config.seed, "distill", step as u64);
        let poses = distill_poses(config, &mut rng)?;
        let blend: f64 = rng.random();
        let nominal = config.schedule_step(step);
        let window = anneal_window(nominal, config);
        let lam_o = lambda_o(nominal)?;

        let mut view_opts = Vec::with_capacity(poses.len());
        for pose in &poses {
            let frame = ViewFrame::square(*pose, res)?;
            let light = if config.light_jitter > 0.0 {
                let j: [f64; 3] = [(); 3].map(|_| StandardNormal.sample(&mut rng));
                Some(frame.origin() + config.light_jitter * Vector3::from(j))
            } else {
                None
            };
            let jitter: Vec<f64> = (0..res * res * s).map(|_| rng.random()).collect();
            let opts = RenderOptions {
                light,
                lambert_blend: blend,
                jitter: Some(jitter),
                ..RenderOptions::new(s, config.shading)
            };
            view_opts.push((frame, opts));
        }
        // One graph per view; results are combined in view order.
        let mut passes: Vec<ViewPass> = view_opts
            .par_iter()
            .map(|(frame, opts)| ViewPass::forward(&field, codec, frame, opts, config.visibility_threshold))
            .collect::<Result<_>>()?;
        let zs: Vec<&Array> = passes.iter().map(|p| p.g.value(p.latent)).collect();
        let z = Array::concat(&zs, 0);
        let rel: Vec<RelativePose> = poses
            .iter()
            .map(|p| relative_pose(&reference_pose, p))
            .collect::<Result<_>>()?;
        let sds = sds_grad(
            model,
            schedule,
            &z,
            embedding,
            &rel,
            reference_latent.as_ref(),
            window,
            config.guidance_scale,
            &mut rng,
        )?;
        let nviews = poses.len() as f64;
        let (sds_w, orient_w) = (config.lambda_e / nviews, lam_o / nviews);
        let per_view: Vec<(ParamStore, f64, f64)> = passes
            .par_iter_mut()
            .enumerate()
            .map(|(k, p)| p.backward(sds.grad.narrow(0, k, 1), sds_w, orient_w))
            .collect();
        let mut grads = per_view[0].0.clone();
        let (mut total, mut orient) = (0.0, 0.0);
        for (k, (gk, tk, ok)) in per_view.iter().enumerate() {
            if k > 0 {
                for (name, a) in grads.iter_mut() {
                    a.add_assign(gk.get(name).expect("same parameters in every view"));
                }
            }
            total += tk;
            orient += ok;
        }
        drop(passes);
        if grads.iter().any(|(_, a)| !a.all_finite()) || !total.is_finite() {
            return Err(Error::NonFinite(format!(
                "distillation step {step}: t = {}, lambda_o = {lam_o}, field hash {}",
                sds.t,
                field.params().hash_hex()
            )));
        }
        opt.step(field.params_mut(), &grads, config.lr);
        let log = DistillStepLog {
            step: step + 1,
            t: sds.t,
            t_max: window.1,
            lambda_o: lam_o,
            sds_norm: sds.grad.data().iter().map(|v| v * v).sum::<f64>().sqrt(),
            orientation: orient / nviews,
        };
        on_step(&log, &field)?;
    }
    Ok(field)
}

/// Render, encode and orientation terms of one view in its own graph.
struct ViewPass {
    g: Graph,
    handles: Bound,
    latent: Var,
    orient: Var,
}

impl ViewPass {
    fn forward(
        field: &RadianceField,
        codec: &LatentCodec,
        frame: &ViewFrame,
        opts: &RenderOptions,
        visibility: f64,
    ) -> Result<Self> {
        let mut g = Graph::new();
        let handles = field.bind(&mut g, true);
        let out = render(&mut g, field, &handles, frame, opts)?;
        let img = g.reshape(out.rgb, &[1, frame.height, frame.width, 3]);
        let latent = codec.encode_graph(&mut g, img);
        let orient = orientation_loss(&mut g, &out, visibility);
        Ok(Self {
            g,
            handles,
            latent,
            orient,
        })
    }

    /// Gradients of `sds_w <z, grad> + orient_w * orientation`, the total
    /// and the raw orientation value.
    fn backward(&mut self, grad: Array, sds_w: f64, orient_w: f64) -> (ParamStore, f64, f64) {
        let g = &mut self.g;
        let c = g.constant(grad);
        let sur = g.mul(self.latent, c);
        let sur = g.sum_all(sur);
        let sur = g.scale(sur, sds_w);
        let o = g.scale(self.orient, orient_w);
        let total = g.add(sur, o);
        let grads = g.backward(total);
        let grads = self.handles.collect_grads(g, &grads);
        (grads, g.value(total).item(), g.value(self.orient).item())
    }
}

/// Turntable frames at fixed elevation, evenly spaced in azimuth.
pub fn turntable_poses(frames: usize, elevation_deg: f64, distance: f64) -> Result<Vec<CameraPose>> {
    (0..frames)
        .map(|k| CameraPose::from_degrees(elevation_deg, k as f64 * 360.0 / frames as f64, distance))
        .collect()
}

/// Tiles equally sized `[H, W, 3]` images into a `rows x cols` grid.
pub fn image_grid(images: &[Array], cols: usize) -> Array {
    assert!(!images.is_empty() && cols > 0);
    let (h, w) = (images[0].shape()[0], images[0].shape()[1]);
    let rows = images.len().div_ceil(cols);
    let mut out = Array::ones(&[rows * h, cols * w, 3]);
    for (k, img) in images.iter().enumerate() {
        let (r, c) = (k / cols, k % cols);
        for y in 0..h {
            for x in 0..w {
                for ch in 0..3 {
                    out.set(&[r * h + y, c * w + x, ch], img.at(&[y, x, ch]));
                }
            }
        }
    }
    out
}
