//! Frozen encoders: a pooling latent codec and a random-feature image embedder.
//!
//! The codec maps `[H, W, 3]` images in `[0, 1]` to `[3, H/p, W/p]` latents in
//! `[-1, 1]` by average pooling and `x -> 2x - 1`. The embedder is a small
//! convolutional feature extractor whose weights are drawn once from
//! `embed_seed` and never trained; its output is L2-normalized.

use std::cell::Cell;

use lift3d_autograd::{avg_pool_array, Array, Graph, Var};
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::params::{init_fan_in, init_normal, ParamStore};
use crate::seeding::substream;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CodecConfig {
    pub pool_factor: usize,
    pub latent_channels: usize,
    pub embed_dim: usize,
    pub embed_seed: u64,
    /// Reserved; only `"pooled"` is implemented.
    pub embedding_variant: String,
}

impl Default for CodecConfig {
    fn default() -> Self {
        Self {
            pool_factor: 4,
            latent_channels: 3,
            embed_dim: 64,
            embed_seed: 0x5eed_c11f,
            embedding_variant: "pooled".into(),
        }
    }
}

impl CodecConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            [1, 2, 4].contains(&self.pool_factor),
            "pool_factor {} not in {{1, 2, 4}}",
            self.pool_factor
        );
        ensure!(self.latent_channels == 3, "the pooling codec has exactly 3 latent channels");
        ensure!(self.embed_dim >= 1, "embed_dim must be positive");
        ensure!(
            self.embedding_variant == "pooled",
            "embedding_variant {:?} is not implemented",
            self.embedding_variant
        );
        Ok(())
    }
}

/// `[C, h, w]` latent.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentImage {
    pub data: Array,
}

impl LatentImage {
    pub fn new(data: Array) -> Self {
        assert_eq!(data.ndim(), 3, "latent must be [C, h, w]");
        Self { data }
    }

    pub fn shape(&self) -> &[usize] {
        self.data.shape()
    }
}

#[derive(Clone, Debug)]
pub struct LatentCodec {
    pool_factor: usize,
}

impl LatentCodec {
    pub fn new(config: &CodecConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            pool_factor: config.pool_factor,
        })
    }

    pub fn pool_factor(&self) -> usize {
        self.pool_factor
    }

    pub fn latent_size(&self, image_size: usize) -> usize {
        image_size / self.pool_factor
    }

    pub fn encode_latent(&self, image: &Array) -> Result<LatentImage> {
        let s = image.shape();
        ensure!(s.len() == 3 && s[2] == 3, "expected [H, W, 3] image, got {s:?}");
        ensure!(
            s[0].is_multiple_of(self.pool_factor) && s[1].is_multiple_of(self.pool_factor),
            "image {}x{} not divisible by pool factor {}",
            s[0],
            s[1],
            self.pool_factor
        );
        let chw = image.permute(&[2, 0, 1]).reshape(&[1, 3, s[0], s[1]]);
        let pooled = avg_pool_array(&chw, self.pool_factor);
        let (h, w) = (pooled.shape()[2], pooled.shape()[3]);
        Ok(LatentImage::new(pooled.map(|x| 2.0 * x - 1.0).reshape(&[3, h, w])))
    }

    /// Differentiable encode of `[N, H, W, 3]` images to `[N, 3, h, w]` latents.
    pub fn encode_graph(&self, g: &mut Graph, images: Var) -> Var {
        let chw = g.permute(images, &[0, 3, 1, 2]);
        let pooled = if self.pool_factor == 1 {
            chw
        } else {
            g.avg_pool(chw, self.pool_factor)
        };
        let scaled = g.scale(pooled, 2.0);
        g.add_scalar(scaled, -1.0)
    }

    /// Affine inverse, nearest-neighbour upsample, clamp to `[0, 1]`.
    pub fn decode_latent(&self, latent: &LatentImage) -> Array {
        let s = latent.shape();
        let (c, h, w) = (s[0], s[1], s[2]);
        let p = self.pool_factor;
        let (oh, ow) = (h * p, w * p);
        let mut out = vec![0.0; oh * ow * c];
        let d = latent.data.data();
        for y in 0..oh {
            for x in 0..ow {
                for ch in 0..c {
                    let v = (d[(ch * h + y / p) * w + x / p] + 1.0) / 2.0;
                    out[(y * ow + x) * c + ch] = v.clamp(0.0, 1.0);
                }
            }
        }
        Array::new(&[oh, ow, c], out)
    }
}

/// Global image embedding; only [`EmbeddingEncoder`] can construct one.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingVector {
    data: Array,
}

impl EmbeddingVector {
    pub fn data(&self) -> &Array {
        &self.data
    }

    pub fn dim(&self) -> usize {
        self.data.len()
    }

    pub fn cosine(&self, other: &EmbeddingVector) -> f64 {
        let dot: f64 = self.data.data().iter().zip(other.data.data()).map(|(a, b)| a * b).sum();
        let na = self.data.data().iter().map(|a| a * a).sum::<f64>().sqrt();
        let nb = other.data.data().iter().map(|a| a * a).sum::<f64>().sqrt();
        dot / (na * nb)
    }

    /// Rebuilds an embedding persisted by a previous run.
    pub fn from_saved(data: Array) -> Result<Self> {
        ensure!(data.ndim() == 1, "embedding must be 1-D");
        ensure!(data.all_finite(), "embedding has non-finite entries");
        Ok(Self { data })
    }
}

const EMBED_C1: usize = 16;
const EMBED_C2: usize = 32;

/// Frozen random-feature encoder standing in for a pretrained image embedder.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingEncoder {
    params: ParamStore,
    embed_dim: usize,
}

impl EmbeddingEncoder {
    pub fn new(config: &CodecConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = substream(config.embed_seed, "embedding-encoder", 0);
        let mut params = ParamStore::new();
        params.insert("conv1.w", init_fan_in(&mut rng, &[EMBED_C1, 3, 3, 3], 27, 2.0));
        params.insert("conv2.w", init_fan_in(&mut rng, &[EMBED_C2, EMBED_C1, 3, 3], EMBED_C1 * 9, 2.0));
        params.insert("proj.w", init_fan_in(&mut rng, &[2 * EMBED_C2, config.embed_dim], 2 * EMBED_C2, 1.0));
        params.insert("proj.b", init_normal(&mut rng, &[config.embed_dim], 0.05));
        Ok(Self {
            params,
            embed_dim: config.embed_dim,
        })
    }

    /// Rebuilds a frozen encoder from stored parameters.
    pub fn from_params(params: ParamStore) -> Result<Self> {
        let proj = params
            .get("proj.b")
            .ok_or_else(|| crate::error::Error::Contract("embedding encoder params missing proj.b".into()))?;
        let embed_dim = proj.len();
        for name in ["conv1.w", "conv2.w", "proj.w"] {
            ensure!(params.get(name).is_some(), "embedding encoder params missing {name}");
        }
        Ok(Self { params, embed_dim })
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn embed_dim(&self) -> usize {
        self.embed_dim
    }

    pub fn param_hash(&self) -> String {
        self.params.hash_hex()
    }

    pub fn encode(&self, image: &Array) -> EmbeddingVector {
        let mut g = Graph::new();
        let bound = self.params.bind(&mut g, false);
        let vars = EncoderVars {
            conv1: bound.var("conv1.w"),
            conv2: bound.var("conv2.w"),
            proj_w: bound.var("proj.w"),
            proj_b: bound.var("proj.b"),
        };
        let s = image.shape().to_vec();
        let x = g.constant(image.clone().reshape(&[1, s[0], s[1], s[2]]));
        let out = Self::forward(&mut g, &vars, x);
        EmbeddingVector {
            data: g.value(out).clone().reshape(&[self.embed_dim]),
        }
    }

    /// Graph forward of `[N, H, W, 3]` images to `[N, D]` unit vectors.
    ///
    /// Inputs are shifted by -1 so the white background maps to zero and the
    /// bias-free convolutions respond only to the object.
    pub fn forward(g: &mut Graph, vars: &EncoderVars, images: Var) -> Var {
        let x = g.permute(images, &[0, 3, 1, 2]);
        let x = g.add_scalar(x, -1.0);
        let h = g.conv2d(x, vars.conv1, 2, 1);
        let h = g.tanh(h);
        let h = g.conv2d(h, vars.conv2, 2, 1);
        let h = g.tanh(h);
        let s = g.shape(h).to_vec();
        let flat = g.reshape(h, &[s[0], s[1], s[2] * s[3]]);
        let mean = g.mean_axis(flat, 2);
        let sq = g.square(flat);
        let energy = g.mean_axis(sq, 2);
        let feats = g.concat(&[mean, energy], 1);
        let feats = g.reshape(feats, &[s[0], 2 * s[1]]);
        let e = g.linear(feats, vars.proj_w, vars.proj_b);
        let e2 = g.square(e);
        let norm2 = g.sum_axis(e2, 1);
        let inv = g.powf(norm2, -0.5);
        g.mul(e, inv)
    }
}

/// Graph handles of the embedder weights.
#[derive(Clone, Copy, Debug)]
pub struct EncoderVars {
    pub conv1: Var,
    pub conv2: Var,
    pub proj_w: Var,
    pub proj_b: Var,
}

impl EncoderVars {
    pub fn from_bound(bound: &crate::params::Bound) -> Self {
        Self {
            conv1: bound.var("conv1.w"),
            conv2: bound.var("conv2.w"),
            proj_w: bound.var("proj.w"),
            proj_b: bound.var("proj.b"),
        }
    }
}

thread_local! {
    static LIVE_REFERENCE_IMAGES: Cell<usize> = const { Cell::new(0) };
}

/// Pixels of a user-supplied reference image at inference time.
///
/// The only way to use the pixels is [`ReferenceImage::into_embedding`], which
/// consumes the image. Inference entry points assert that no reference image
/// is alive on the calling thread, so pixel data cannot reach them.
pub struct ReferenceImage {
    pixels: Array,
}

impl ReferenceImage {
    pub fn new(pixels: Array) -> Result<Self> {
        let s = pixels.shape();
        ensure!(s.len() == 3 && s[2] == 3, "expected [H, W, 3] image, got {s:?}");
        LIVE_REFERENCE_IMAGES.with(|c| c.set(c.get() + 1));
        Ok(Self { pixels })
    }

    pub fn into_embedding(self, encoder: &EmbeddingEncoder) -> EmbeddingVector {
        encoder.encode(&self.pixels)
    }
}

impl Drop for ReferenceImage {
    fn drop(&mut self) {
        LIVE_REFERENCE_IMAGES.with(|c| c.set(c.get() - 1));
    }
}

/// Number of [`ReferenceImage`] values alive on this thread.
pub fn live_reference_images() -> usize {
    LIVE_REFERENCE_IMAGES.with(Cell::get)
}

/// Panics if reference pixels are still alive; called by inference entry points.
pub fn assert_no_reference_pixels(context: &str) {
    let live = live_reference_images();
    assert!(
        live == 0,
        "{context}: {live} reference image(s) still alive; inference must consume only the embedding"
    );
}
