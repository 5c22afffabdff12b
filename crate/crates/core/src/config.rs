//! Layered experiment configuration and run manifests.
//!
//! Resolution order is defaults, then the TOML file, then `key=value`
//! overrides. Unknown keys and type mismatches are rejected with the offending
//! key path.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::camera::{CAMERA_DISTANCE, DEFAULT_FOV_Y_DEG, FIXED_ELEVATION_DEG, RANDOM_ELEVATION_MAX_DEG, RANDOM_ELEVATION_MIN_DEG};
use crate::diffusion::{SamplerConfig, ScheduleConfig};
use crate::distill3d::DistillConfig;
use crate::error::{Error, Result};
use crate::eval_harness::{AblationConfig, OracleSuiteConfig};
use crate::latent_codec::{CodecConfig, LatentCodec};
use crate::mv_denoiser::DenoiserConfig;
use crate::seeding::{derive_seed, hash_json};
use crate::synth_data::VIEWS_PER_SET;
use crate::train_diffusion::TrainConfig;

pub const CONFIG_SCHEMA_VERSION: u32 = 1;
pub const MANIFEST_NAME: &str = "run_manifest.json";
pub const OUTPUT_ROOT_ENV: &str = "LIFT3D_OUTPUT_ROOT";

/// Camera conventions; the values are compiled into the renderers, so the
/// section exists to echo them into manifests and reject edits.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CameraSection {
    pub distance: f64,
    pub fov_y_deg: f64,
    pub elevation_min_deg: f64,
    pub elevation_max_deg: f64,
    pub fixed_elevation_deg: f64,
    pub views_per_set: usize,
}

impl Default for CameraSection {
    fn default() -> Self {
        Self {
            distance: CAMERA_DISTANCE,
            fov_y_deg: DEFAULT_FOV_Y_DEG,
            elevation_min_deg: RANDOM_ELEVATION_MIN_DEG,
            elevation_max_deg: RANDOM_ELEVATION_MAX_DEG,
            fixed_elevation_deg: FIXED_ELEVATION_DEG,
            views_per_set: VIEWS_PER_SET,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSection {
    pub objects: usize,
    pub resolution: usize,
}

impl Default for DatasetSection {
    fn default() -> Self {
        Self {
            objects: 64,
            resolution: 64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub oracle: OracleSuiteConfig,
    pub ablation: AblationConfig,
}

impl Default for EvalSection {
    fn default() -> Self {
        let mut ablation = AblationConfig::default();
        ablation.stage2.steps = 1000;
        ablation.stage2.warmup_steps = 100;
        Self {
            oracle: OracleSuiteConfig::default(),
            ablation,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub seed: u64,
    pub output_root: PathBuf,
    pub camera: CameraSection,
    pub dataset: DatasetSection,
    pub codec: CodecConfig,
    pub schedule: ScheduleConfig,
    pub denoiser: DenoiserConfig,
    pub stage1: TrainConfig,
    pub stage2: TrainConfig,
    pub sampler: SamplerConfig,
    pub distill: DistillConfig,
    pub eval: EvalSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            schema_version: CONFIG_SCHEMA_VERSION,
            seed: 0,
            output_root: PathBuf::from("runs"),
            camera: CameraSection::default(),
            dataset: DatasetSection::default(),
            codec: CodecConfig::default(),
            schedule: ScheduleConfig::default(),
            denoiser: DenoiserConfig::default(),
            stage1: TrainConfig::stage1(),
            stage2: TrainConfig::stage2(),
            sampler: SamplerConfig::default(),
            distill: DistillConfig::default(),
            eval: EvalSection::default(),
        }
    }
}

impl ExperimentConfig {
    /// Cross-section consistency.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.schema_version != CONFIG_SCHEMA_VERSION {
            return bad(format!(
                "schema_version {} is not supported (expected {CONFIG_SCHEMA_VERSION})",
                self.schema_version
            ));
        }
        if self.camera != CameraSection::default() {
            return bad("camera section is fixed in this build; remove the overrides".into());
        }
        self.codec.validate()?;
        self.denoiser.validate()?;
        self.stage1.validate()?;
        self.stage2.validate()?;
        self.distill.validate()?;
        let codec = LatentCodec::new(&self.codec)?;
        let lat = codec.latent_size(self.dataset.resolution);
        if lat != self.denoiser.latent_size {
            return bad(format!(
                "dataset.resolution {} with codec.pool_factor {} gives {lat}x{lat} latents but denoiser.latent_size is {}",
                self.dataset.resolution, self.codec.pool_factor, self.denoiser.latent_size
            ));
        }
        if self.denoiser.latent_channels != self.codec.latent_channels || self.denoiser.embed_dim != self.codec.embed_dim {
            return bad("denoiser latent_channels/embed_dim must match the codec".into());
        }
        if codec.latent_size(self.distill.render_resolution) != lat {
            return bad(format!(
                "distill.render_resolution {} does not give {lat}x{lat} latents",
                self.distill.render_resolution
            ));
        }
        Ok(())
    }

    pub fn hash(&self) -> String {
        hash_json(self)
    }

    /// Small settings for end-to-end smoke runs.
    pub fn tiny() -> Self {
        let mut c = Self::default();
        c.dataset = DatasetSection {
            objects: 8,
            resolution: 32,
        };
        c.codec.pool_factor = 4;
        c.denoiser.latent_size = 8;
        c.denoiser.base_channels = 16;
        c.denoiser.time_embed_dim = 32;
        c.denoiser.camera_embed_dim = 16;
        c.stage1.steps = 200;
        c.stage1.warmup_steps = 20;
        c.stage2.steps = 100;
        c.stage2.warmup_steps = 10;
        c.sampler.steps = 10;
        c.distill.steps = 300;
        c.distill.render_resolution = 32;
        c.distill.samples_per_ray = 12;
        c.distill.field.hidden = 16;
        c.eval.ablation.stage2.steps = 20;
        c.eval.ablation.stage2.warmup_steps = 2;
        c.eval.ablation.eval_objects = 1;
        c.eval.ablation.sampler.steps = 10;
        c.eval.oracle.steps = 100;
        c
    }
}

/// Config paths of component seeds and the stream each derives from.
pub const SEED_STREAMS: [(&str, &str); 4] = [
    ("/stage1/seed", "train/stage1"),
    ("/stage2/seed", "train/stage2"),
    ("/distill/seed", "distill"),
    ("/eval/oracle/seed", "eval/oracle"),
];

fn merge(base: &mut serde_json::Value, layer: serde_json::Value) {
    match (base, layer) {
        (serde_json::Value::Object(b), serde_json::Value::Object(l)) => {
            for (k, v) in l {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn parse_override(item: &str) -> Result<serde_json::Value> {
    let (key, raw) = item
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override '{item}' is not key=value")))?;
    let key = key.trim();
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(Error::Config(format!("override '{item}' has an empty key segment")));
    }
    let raw = raw.trim();
    let value = match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => serde_json::to_value(t.remove("v").expect("parsed key")).expect("toml maps to json"),
        Err(_) => serde_json::Value::String(raw.to_string()),
    };
    let mut out = value;
    for seg in key.split('.').rev() {
        let mut m = serde_json::Map::new();
        m.insert(seg.to_string(), out);
        out = serde_json::Value::Object(m);
    }
    Ok(out)
}

/// Defaults, then `base` (or the built-in defaults), then the file, then
/// overrides.
pub fn resolve_layers(base: &ExperimentConfig, file_text: Option<&str>, overrides: &[String]) -> Result<ExperimentConfig> {
    let mut value = serde_json::to_value(base).expect("serializable config");
    let mut user = serde_json::Value::Object(Default::default());
    if let Some(text) = file_text {
        let table: toml::Table = toml::from_str(text).map_err(|e| Error::Config(format!("config file: {e}")))?;
        merge(&mut user, serde_json::to_value(table).expect("toml maps to json"));
    }
    for o in overrides {
        merge(&mut user, parse_override(o)?);
    }
    // Component seeds not set explicitly follow the global seed.
    let global = user.get("seed").cloned().unwrap_or_else(|| value["seed"].clone());
    if let Some(seed) = global.as_u64() {
        for (section, stream) in SEED_STREAMS {
            if user.pointer(section).is_none() {
                if let Some(slot) = value.pointer_mut(section) {
                    *slot = derive_seed(seed, stream).into();
                }
            }
        }
    }
    merge(&mut value, user);
    let config: ExperimentConfig = serde_path_to_error::deserialize(value).map_err(|e| {
        let path = e.path().to_string();
        Error::Config(format!("{path}: {}", e.into_inner()))
    })?;
    config.validate()?;
    Ok(config)
}

/// Reads the config at `path` (when given) and applies overrides.
pub fn resolve_config(path: Option<&Path>, overrides: &[String]) -> Result<ExperimentConfig> {
    let text = match path {
        Some(p) => Some(std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?),
        None => None,
    };
    resolve_layers(&ExperimentConfig::default(), text.as_deref(), overrides)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub argv: Vec<String>,
    pub config_hash: String,
    pub config: ExperimentConfig,
    pub code_version: String,
    pub started_unix: u64,
    pub finished_unix: u64,
    pub artifacts: Vec<ArtifactEntry>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArtifactEntry {
    pub path: String,
    pub sha256: String,
}

pub fn unix_now() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

pub fn file_sha256(path: &Path) -> Result<String> {
    use sha2::{Digest, Sha256};
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(crate::seeding::to_hex(&Sha256::digest(&bytes)))
}

impl RunManifest {
    pub fn new(command: &str, argv: Vec<String>, config: &ExperimentConfig) -> Self {
        Self {
            command: command.into(),
            argv,
            config_hash: config.hash(),
            config: config.clone(),
            code_version: env!("CARGO_PKG_VERSION").into(),
            started_unix: unix_now(),
            finished_unix: 0,
            artifacts: Vec::new(),
        }
    }

    /// Records every regular file under `dir` except the manifest, relative
    /// to `dir` and sorted.
    pub fn collect_artifacts(&mut self, dir: &Path) -> Result<()> {
        let mut files = Vec::new();
        walk(dir, dir, &mut files)?;
        files.sort();
        self.artifacts = files
            .into_iter()
            .filter(|rel| rel != MANIFEST_NAME)
            .map(|rel| {
                let sha256 = file_sha256(&dir.join(&rel))?;
                Ok(ArtifactEntry { path: rel, sha256 })
            })
            .collect::<Result<_>>()?;
        Ok(())
    }

    pub fn finish(&mut self, dir: &Path) -> Result<()> {
        self.collect_artifacts(dir)?;
        self.finished_unix = unix_now();
        let path = dir.join(MANIFEST_NAME);
        let text = serde_json::to_string_pretty(self).expect("serializable manifest");
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }
}

fn walk(root: &Path, dir: &Path, out: &mut Vec<String>) -> Result<()> {
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let p = entry.path();
        if p.is_dir() {
            walk(root, &p, out)?;
        } else {
            let rel = p.strip_prefix(root).expect("walk stays under root");
            out.push(rel.to_string_lossy().replace('\\', "/"));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let c = resolve_layers(&ExperimentConfig::default(), Some(""), &[]).unwrap();
        let d = ExperimentConfig::default();
        assert_eq!((&c.codec, &c.denoiser, &c.schedule, &c.sampler), (&d.codec, &d.denoiser, &d.schedule, &d.sampler));
        assert_eq!(c.stage1.steps, 50_000);
        assert_eq!(c.stage1.warmup_steps, 10_000);
        assert_eq!(c.stage1.lr_peak, 1e-4);
        assert_eq!(c.stage2.lr_peak, 5e-5);
        assert_eq!(c.distill.steps, 10_000);
        assert_eq!(c.distill.lr, 0.01);
        assert_eq!(c.distill.guidance_scale, 10.0);
        assert_eq!(c.distill.lambda_e, 1.0);
        assert_eq!(c.camera.distance, 1.5);
    }

    #[test]
    fn override_is_applied() {
        let c = resolve_layers(&ExperimentConfig::default(), None, &["distill.steps=300".into()]).unwrap();
        assert_eq!(c.distill.steps, 300);
    }

    #[test]
    fn file_then_override_precedence() {
        let text = "[distill]\nsteps = 50\nlr = 0.02\n";
        let c = resolve_layers(&ExperimentConfig::default(), Some(text), &["distill.steps=70".into()]).unwrap();
        assert_eq!((c.distill.steps, c.distill.lr), (70, 0.02));
    }

    #[test]
    fn type_mismatch_names_key() {
        let e = resolve_layers(&ExperimentConfig::default(), None, &["distill.steps=\"many\"".into()])
            .unwrap_err()
            .to_string();
        assert!(e.contains("distill.steps"), "{e}");
        assert!(e.contains("expected usize"), "{e}");
    }

    #[test]
    fn unknown_key_rejected() {
        let e = resolve_layers(&ExperimentConfig::default(), Some("[distill]\nstepz = 3\n"), &[])
            .unwrap_err()
            .to_string();
        assert!(e.contains("stepz"), "{e}");
    }

    #[test]
    fn component_seeds_follow_global_seed() {
        let a = resolve_layers(&ExperimentConfig::default(), None, &["seed=1".into()]).unwrap();
        let b = resolve_layers(&ExperimentConfig::default(), None, &["seed=2".into()]).unwrap();
        assert_ne!(a.stage1.seed, b.stage1.seed);
        assert_ne!(a.stage1.seed, a.stage2.seed);
        let c = resolve_layers(&ExperimentConfig::default(), None, &["seed=1".into(), "distill.seed=7".into()]).unwrap();
        assert_eq!(c.distill.seed, 7);
        assert_eq!(c.stage1.seed, a.stage1.seed);
    }

    #[test]
    fn tiny_config_is_consistent() {
        ExperimentConfig::tiny().validate().unwrap();
    }
}
