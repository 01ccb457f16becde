//! Named, counter-based random streams.
//!
//! Every random draw in a run comes from a stream identified by
//! `(master seed, namespace, client, round)`. The tuple is hashed with
//! SHA-256 into a ChaCha key; ChaCha itself is a counter-mode generator, so
//! a stream's output depends only on its key and the number of draws taken.
//! Parallel stages therefore never share generator state and the result of a
//! run does not depend on scheduling.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

/// Client slot used for streams owned by the server.
pub const SERVER: u64 = u64::MAX;

/// Round slot for streams that are not tied to a training round.
pub const NO_ROUND: u64 = u64::MAX;

pub type Stream = ChaCha12Rng;

/// Open the stream for `(master, namespace, client, round)`.
pub fn rng_stream(master: u64, namespace: &str, client: u64, round: u64) -> Stream {
    let mut hasher = Sha256::new();
    hasher.update(b"opus-vfl/stream/v1");
    hasher.update(master.to_le_bytes());
    hasher.update((namespace.len() as u64).to_le_bytes());
    hasher.update(namespace.as_bytes());
    hasher.update(client.to_le_bytes());
    hasher.update(round.to_le_bytes());
    let digest = hasher.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    ChaCha12Rng::from_seed(key)
}

#[inline]
pub fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.sample(StandardNormal)
}

/// Fisher-Yates permutation of `0..n`.
pub fn permutation<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        idx.swap(i, j);
    }
    idx
}
