//! Named random substreams derived from one experiment seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type Rng = ChaCha8Rng;

/// Independent generator for `(seed, name, index)`.
///
/// Streams with different names or indices are decorrelated through SHA-256,
/// so a component can be re-run alone and still see the same draws.
pub fn substream(seed: u64, name: &str, index: u64) -> Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update((name.len() as u64).to_le_bytes());
    h.update(name.as_bytes());
    h.update(index.to_le_bytes());
    let digest = h.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(key)
}

/// Component seed derived from the experiment seed and a stream name.
pub fn derive_seed(seed: u64, name: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(name.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("digest has 8 bytes"))
}

/// Lowercase hex of a digest.
pub fn to_hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// SHA-256 of the compact JSON form of `value`.
pub fn hash_json<T: serde::Serialize>(value: &T) -> String {
    let bytes = serde_json::to_vec(value).expect("serializable value");
    to_hex(&Sha256::digest(&bytes))
}

/// Standard-normal array of the given shape.
pub fn normal_array(rng: &mut Rng, shape: &[usize]) -> lift3d_autograd::Array {
    use rand_distr::{Distribution, StandardNormal};
    lift3d_autograd::Array::from_fn(shape, |_| StandardNormal.sample(rng))
}
