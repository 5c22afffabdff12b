//! Command implementations behind the `lift3d` binary.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use lift3d_core::autograd::Array;
use lift3d_core::camera::{CameraPose, RelativePose};
use lift3d_core::config::{resolve_layers, ExperimentConfig, RunManifest, OUTPUT_ROOT_ENV};
use lift3d_core::diffusion::{sample_views, NoiseSchedule};
use lift3d_core::distill3d::{distill, image_grid, render_image, turntable_poses, RadianceField, RenderOptions, Shading};
use lift3d_core::eval_harness::{run_ablation_ema, run_oracle_suite, run_units_suite, EvalReport};
use lift3d_core::latent_codec::{EmbeddingEncoder, EmbeddingVector, LatentCodec, ReferenceImage};
use lift3d_core::mv_denoiser::{AttentionMode, Denoiser, ModelBundle};
use lift3d_core::seeding::{derive_seed, substream};
use lift3d_core::synth_data::{build_dataset, load_dataset, load_png, save_png};
use lift3d_core::train_diffusion::{train, TrainData, TrainState};
use lift3d_core::Error;

pub const MODEL_FILE: &str = "model.ckpt";
pub const STATE_FILE: &str = "state.ckpt";
pub const FIELD_FILE: &str = "field.ckpt";

#[derive(Debug, Parser)]
#[command(name = "lift3d", version, about = "Embedding-conditioned multi-view diffusion and 3D distillation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    Default,
    Tiny,
}

#[derive(Debug, Clone, Args)]
pub struct ConfigArgs {
    /// Experiment config (TOML).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override a config key, e.g. `--set distill.steps=300`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Defaults the config file and overrides are layered on.
    #[arg(long, value_enum, default_value = "default")]
    pub preset: Preset,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Suite {
    Units,
    Oracle,
    Ablation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    EmaJoint,
    PlainMultiview,
}

impl From<ModeArg> for AttentionMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::EmaJoint => AttentionMode::EmaJoint,
            ModeArg::PlainMultiview => AttentionMode::PlainMultiview,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render the procedural multi-view dataset.
    BuildDataset {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        objects: Option<usize>,
        #[arg(long)]
        resolution: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Stage 1: image-conditioned multi-view training.
    TrainStage1 {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from a saved training state.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Stage 2: fine-tuning with the reference slot.
    TrainStage2 {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        init: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long, value_enum)]
        attention_mode: Option<ModeArg>,
    },
    /// Sample target views from a reference image's embedding.
    SampleViews {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        scale: Option<f64>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Relative poses in degrees, `del,daz;del,daz;...`.
        #[arg(long)]
        poses: Option<String>,
    },
    /// Distill a radiance field from a reference image's embedding.
    Distill {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        scale: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Render turntable frames and a 6-view grid of a field.
    RenderTurntable {
        #[arg(long)]
        field: PathBuf,
        #[arg(long, default_value_t = 36)]
        frames: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 64)]
        resolution: usize,
        #[arg(long, default_value_t = 30.0)]
        elevation: f64,
        #[arg(long, default_value_t = 64)]
        samples_per_ray: usize,
    },
    /// Run an evaluation suite and write a report.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, value_enum)]
        suite: Suite,
        #[arg(long)]
        out: PathBuf,
        /// Dataset for the ablation suite.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Stage-1 model for the ablation suite.
        #[arg(long)]
        init: Option<PathBuf>,
    },
}

/// Failure of one command, printed as a single line.
#[derive(Debug)]
pub struct CliError {
    pub kind: &'static str,
    pub message: String,
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let line = serde_json::json!({ "error": self.kind, "message": self.message });
        write!(f, "{line}")
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let kind = match &e {
            Error::InvalidPose(_) | Error::DegenerateUp { .. } => "invalid_pose",
            Error::Contract(_) => "contract",
            Error::Config(_) => "config",
            Error::Io { .. } => "io",
            Error::Image { .. } => "image",
            Error::Format { .. } | Error::SchemaVersion { .. } => "format",
            Error::NonFinite(_) => "non_finite",
        };
        CliError {
            kind,
            message: e.to_string(),
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

fn usage(message: impl Into<String>) -> CliError {
    CliError {
        kind: "usage",
        message: message.into(),
    }
}

fn preset_config(preset: Preset) -> ExperimentConfig {
    match preset {
        Preset::Default => ExperimentConfig::default(),
        Preset::Tiny => ExperimentConfig::tiny(),
    }
}

fn resolve(cfg: &ConfigArgs, extra: Vec<String>) -> CliResult<ExperimentConfig> {
    let base = preset_config(cfg.preset);
    let text = match &cfg.config {
        Some(p) => Some(fs::read_to_string(p).map_err(|e| Error::Io {
            path: p.clone(),
            source: e,
        })?),
        None => None,
    };
    let mut overrides = cfg.overrides.clone();
    overrides.extend(extra);
    let mut config = resolve_layers(&base, text.as_deref(), &overrides)?;
    if let Ok(root) = std::env::var(OUTPUT_ROOT_ENV) {
        config.output_root = PathBuf::from(root);
    }
    Ok(config)
}

fn out_dir(config: &ExperimentConfig, out: &Path) -> CliResult<PathBuf> {
    let dir = if out.is_absolute() || std::env::var(OUTPUT_ROOT_ENV).is_err() {
        out.to_path_buf()
    } else {
        config.output_root.join(out)
    };
    fs::create_dir_all(&dir).map_err(|e| Error::Io {
        path: dir.clone(),
        source: e,
    })?;
    Ok(dir)
}

fn set_if<T: ToString>(v: &Option<T>, key: &str) -> Vec<String> {
    v.as_ref().map(|v| vec![format!("{key}={}", v.to_string())]).unwrap_or_default()
}

fn load_train_data(path: &Path, bundle: &ModelBundle, config: &ExperimentConfig) -> CliResult<TrainData> {
    let reader = load_dataset(path)?;
    let res = reader.manifest().resolution;
    if res != config.dataset.resolution {
        return Err(Error::Config(format!(
            "dataset at {} has resolution {res} but the config expects {}",
            path.display(),
            config.dataset.resolution
        ))
        .into());
    }
    let codec = LatentCodec::new(&bundle.codec)?;
    let n = reader.manifest().objects.len();
    Ok(TrainData::from_records((0..n).map(|i| reader.read_record(i)), &codec, &bundle.encoder)?)
}

pub fn fresh_bundle(config: &ExperimentConfig) -> CliResult<ModelBundle> {
    Ok(ModelBundle {
        denoiser: Denoiser::new(config.denoiser.clone())?,
        encoder: EmbeddingEncoder::new(&config.codec)?,
        codec: config.codec.clone(),
        schedule: NoiseSchedule::from_config(&config.schedule)?,
    })
}

fn write_json(path: &Path, value: &serde_json::Value) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).expect("serializable json") + "\n";
    fs::write(path, text).map_err(|e| {
        Error::Io {
            path: path.into(),
            source: e,
        }
        .into()
    })
}

fn run_training(
    mut state: TrainState,
    data: &TrainData,
    dir: &Path,
    extra: serde_json::Value,
) -> CliResult<TrainState> {
    let every = state.config.checkpoint_every;
    let state_path = dir.join(STATE_FILE);
    train(&mut state, data, |s, _| {
        if every > 0 && s.global_step % every == 0 {
            s.save(&state_path)?;
        }
        Ok(())
    })?;
    state.save(&state_path)?;
    state.model.save(&dir.join(MODEL_FILE), extra)?;
    let smoothed: Vec<Option<f64>> = (1..=state.losses.len()).map(|k| state.smoothed_loss(k)).collect();
    write_json(
        &dir.join("losses.json"),
        &serde_json::json!({ "losses": state.losses, "smoothed": smoothed }),
    )?;
    Ok(state)
}

/// Reads a reference image and keeps only its embedding.
pub fn embed_reference(path: &Path, encoder: &EmbeddingEncoder) -> CliResult<EmbeddingVector> {
    let image = ReferenceImage::new(load_png(path)?)?;
    Ok(image.into_embedding(encoder))
}

pub fn parse_poses(text: &str, distance: f64) -> CliResult<Vec<RelativePose>> {
    text.split(';')
        .filter(|s| !s.trim().is_empty())
        .map(|item| {
            let parts: Vec<&str> = item.split(',').map(str::trim).collect();
            let [el, az] = parts.as_slice() else {
                return Err(usage(format!("pose '{item}' is not 'elevation,azimuth'")));
            };
            let el: f64 = el.parse().map_err(|_| usage(format!("bad elevation in '{item}'")))?;
            let az: f64 = az.parse().map_err(|_| usage(format!("bad azimuth in '{item}'")))?;
            Ok(RelativePose::from_degrees(el, az, distance))
        })
        .collect()
}

/// Four orthogonal target views at 30 degrees elevation, relative to a
/// reference at 0 degrees.
pub fn default_target_poses(distance: f64) -> CliResult<Vec<RelativePose>> {
    let reference = CameraPose::from_degrees(0.0, 0.0, distance)?;
    (0..4)
        .map(|k| {
            let t = CameraPose::from_degrees(30.0, 90.0 * k as f64, distance)?;
            Ok(lift3d_core::camera::relative_pose(&reference, &t)?)
        })
        .collect()
}

pub fn run(cli: Cli, argv: Vec<String>) -> CliResult<()> {
    match cli.command {
        Command::BuildDataset {
            cfg,
            out,
            objects,
            resolution,
            seed,
        } => {
            let mut extra = set_if(&objects, "dataset.objects");
            extra.extend(set_if(&resolution, "dataset.resolution"));
            extra.extend(set_if(&seed, "seed"));
            if let Some(r) = resolution {
                // Keep the model-side sizes consistent with the requested images.
                let base = preset_config(cfg.preset);
                extra.push(format!("denoiser.latent_size={}", r / base.codec.pool_factor));
                extra.push(format!("distill.render_resolution={r}"));
            }
            let config = resolve(&cfg, extra)?;
            let dir = out_dir(&config, &out)?;
            let mut manifest = RunManifest::new("build-dataset", argv, &config);
            build_dataset(
                config.dataset.objects,
                derive_seed(config.seed, "dataset"),
                config.dataset.resolution,
                &dir,
            )?;
            manifest.finish(&dir)?;
            Ok(())
        }
        Command::TrainStage1 { cfg, data, out, resume } => {
            let config = resolve(&cfg, vec![])?;
            let dir = out_dir(&config, &out)?;
            let mut manifest = RunManifest::new("train-stage1", argv, &config);
            let state = match resume {
                Some(p) => TrainState::load(&p)?,
                None => TrainState::new(fresh_bundle(&config)?, config.stage1.clone())?,
            };
            let td = load_train_data(&data, &state.model, &config)?;
            run_training(state, &td, &dir, serde_json::json!({ "stage": "stage1" }))?;
            manifest.finish(&dir)?;
            Ok(())
        }
        Command::TrainStage2 {
            cfg,
            init,
            data,
            out,
            resume,
            attention_mode,
        } => {
            let extra = attention_mode
                .map(|m| {
                    let name = match m {
                        ModeArg::EmaJoint => "ema_joint",
                        ModeArg::PlainMultiview => "plain_multiview",
                    };
                    vec![format!("denoiser.attention_mode=\"{name}\"")]
                })
                .unwrap_or_default();
            let config = resolve(&cfg, extra)?;
            let dir = out_dir(&config, &out)?;
            let mut manifest = RunManifest::new("train-stage2", argv, &config);
            let state = match resume {
                Some(p) => TrainState::load(&p)?,
                None => {
                    let mut bundle = ModelBundle::load(&init)?;
                    bundle.denoiser = bundle.denoiser.with_attention_mode(config.denoiser.attention_mode);
                    TrainState::new(bundle, config.stage2.clone())?
                }
            };
            let td = load_train_data(&data, &state.model, &config)?;
            run_training(state, &td, &dir, serde_json::json!({ "stage": "stage2" }))?;
            manifest.finish(&dir)?;
            Ok(())
        }
        Command::SampleViews {
            cfg,
            ckpt,
            image,
            out,
            scale,
            steps,
            seed,
            poses,
        } => {
            let mut extra = set_if(&scale, "sampler.guidance_scale");
            extra.extend(set_if(&steps, "sampler.steps"));
            let config = resolve(&cfg, extra)?;
            let dir = out_dir(&config, &out)?;
            let mut manifest = RunManifest::new("sample-views", argv, &config);
            let bundle = ModelBundle::load(&ckpt)?;
            let embedding = embed_reference(&image, &bundle.encoder)?;
            let d = config.camera.distance;
            let rel = match poses {
                Some(p) => parse_poses(&p, d)?,
                None => default_target_poses(d)?,
            };
            let seed = seed.unwrap_or_else(|| derive_seed(config.seed, "sample"));
            let mut rng = substream(seed, "sample", 0);
            let codec = LatentCodec::new(&bundle.codec)?;
            let views = sample_views(
                &bundle.denoiser,
                &codec,
                &bundle.schedule,
                &embedding,
                &rel,
                &config.sampler,
                &mut rng,
            )?;
            for (k, v) in views.iter().enumerate() {
                save_png(v, &dir.join(format!("view_{k:02}.png")))?;
            }
            save_png(&image_grid(&views, views.len().min(4)), &dir.join("grid.png"))?;
            manifest.finish(&dir)?;
            Ok(())
        }
        Command::Distill {
            cfg,
            ckpt,
            image,
            out,
            steps,
            scale,
            seed,
        } => {
            let mut extra = set_if(&steps, "distill.steps");
            extra.extend(set_if(&scale, "distill.guidance_scale"));
            extra.extend(set_if(&seed, "distill.seed"));
            let config = resolve(&cfg, extra)?;
            let dir = out_dir(&config, &out)?;
            let mut manifest = RunManifest::new("distill", argv, &config);
            let bundle = ModelBundle::load(&ckpt)?;
            let embedding = embed_reference(&image, &bundle.encoder)?;
            distill_to_dir(&bundle, &embedding, &config, &dir)?;
            manifest.finish(&dir)?;
            Ok(())
        }
        Command::RenderTurntable {
            field,
            frames,
            out,
            resolution,
            elevation,
            samples_per_ray,
        } => {
            if frames == 0 {
                return Err(usage("--frames must be positive"));
            }
            fs::create_dir_all(&out).map_err(|e| Error::Io {
                path: out.clone(),
                source: e,
            })?;
            let config = ExperimentConfig::default();
            let mut manifest = RunManifest::new("render-turntable", argv, &config);
            let f = RadianceField::load(&field)?;
            render_turntable(&f, frames, resolution, elevation, samples_per_ray, config.camera.distance, &out)?;
            manifest.finish(&out)?;
            Ok(())
        }
        Command::Eval {
            cfg,
            suite,
            out,
            data,
            init,
        } => {
            let config = resolve(&cfg, vec![])?;
            let dir = match out.parent().filter(|p| !p.as_os_str().is_empty()) {
                Some(p) => out_dir(&config, p)?,
                None => PathBuf::from("."),
            };
            let mut manifest = RunManifest::new("eval", argv, &config);
            let report = match suite {
                Suite::Units => run_units_suite(config.seed)?,
                Suite::Oracle => run_oracle_suite(&config.eval.oracle, Some(&dir))?,
                Suite::Ablation => {
                    let (Some(data), Some(init)) = (data, init) else {
                        return Err(usage("--suite ablation needs --data and --init"));
                    };
                    let base = ModelBundle::load(&init)?;
                    let td = load_train_data(&data, &base, &config)?;
                    run_ablation_ema(&td, &base, &config.eval.ablation, Some(&dir))?
                }
            };
            let name = out.file_name().map(PathBuf::from).unwrap_or_else(|| "report.json".into());
            report.save(&dir.join(name))?;
            manifest.finish(&dir)?;
            print_summary(&report);
            if !report.passed() {
                return Err(CliError {
                    kind: "threshold",
                    message: format!("{} check(s) failed", report.checks.iter().filter(|c| !c.passed).count()),
                });
            }
            Ok(())
        }
    }
}

fn print_summary(report: &EvalReport) {
    for c in &report.checks {
        let v = c.value.map_or("missing".to_string(), |v| format!("{v:.6e}"));
        println!(
            "{} criterion {} {} {} {} ({v})",
            if c.passed { "PASS" } else { "FAIL" },
            c.criterion,
            c.metric,
            c.op,
            c.threshold
        );
    }
}

/// Runs distillation and writes the field, a step log and a preview grid.
pub fn distill_to_dir(
    bundle: &ModelBundle,
    embedding: &EmbeddingVector,
    config: &ExperimentConfig,
    dir: &Path,
) -> CliResult<RadianceField> {
    let codec = LatentCodec::new(&bundle.codec)?;
    let mut log = String::new();
    let dc = &config.distill;
    let field = distill(&bundle.denoiser, &bundle.schedule, &codec, embedding, dc, |s, _| {
        log.push_str(&serde_json::to_string(s).expect("serializable log"));
        log.push('\n');
        Ok(())
    })?;
    fs::write(dir.join("distill_log.jsonl"), log).map_err(|e| Error::Io {
        path: dir.join("distill_log.jsonl"),
        source: e,
    })?;
    field.save(
        &dir.join(FIELD_FILE),
        serde_json::json!({ "steps": dc.steps, "guidance_scale": dc.guidance_scale }),
    )?;
    let poses = turntable_poses(4, 30.0, dc.camera_distance)?;
    let opts = RenderOptions::new(dc.samples_per_ray, Shading::LambertianPointLight);
    let views: Vec<Array> = poses
        .iter()
        .map(|p| render_image(&field, p, dc.render_resolution, &opts))
        .collect::<Result<_, _>>()?;
    save_png(&image_grid(&views, 4), &dir.join("preview.png"))?;
    Ok(field)
}

pub fn render_turntable(
    field: &RadianceField,
    frames: usize,
    resolution: usize,
    elevation: f64,
    samples_per_ray: usize,
    distance: f64,
    dir: &Path,
) -> CliResult<()> {
    let opts = RenderOptions::new(samples_per_ray, Shading::LambertianPointLight);
    for (k, pose) in turntable_poses(frames, elevation, distance)?.iter().enumerate() {
        save_png(&render_image(field, pose, resolution, &opts)?, &dir.join(format!("frame_{k:03}.png")))?;
    }
    let grid: Vec<Array> = turntable_poses(6, elevation, distance)?
        .iter()
        .map(|p| render_image(field, p, resolution, &opts))
        .collect::<Result<_, _>>()?;
    save_png(&image_grid(&grid, 3), &dir.join("grid.png"))?;
    Ok(())
}
