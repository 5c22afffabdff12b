//! Single-image to 3D lifting at desk scale: toy data, camera geometry,
//! a multi-view latent denoiser and score-distilled radiance fields.

pub mod camera;
pub mod checkpoint;
pub mod config;
pub mod diffusion;
pub mod distill3d;
pub mod error;
pub mod eval_harness;
pub mod latent_codec;
pub mod mv_denoiser;
pub mod optim;
pub mod params;
pub mod seeding;
pub mod synth_data;
pub mod train_diffusion;

pub use error::{Error, Result};
pub use lift3d_autograd as autograd;
