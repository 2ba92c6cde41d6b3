//! Namespaced deterministic random streams.
//!
//! Every consumer of randomness draws from its own stream, keyed by the
//! master seed and a namespace. Toggling one component therefore never shifts
//! another component's draws.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Stream = ChaCha8Rng;

pub mod ns {
    pub const CORPUS: &str = "corpus";
    pub const PRETRAIN: &str = "pretrain";
    pub const CAPTIONER: &str = "captioner";
    pub const REPLACE: &str = "replace";
    pub const NOISE: &str = "noise";
    pub const DROPOUT: &str = "dropout";
    pub const INIT: &str = "init";
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| {
        (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3)
    })
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Stream for `namespace` under `seed`.
pub fn stream(seed: u64, namespace: &str) -> Stream {
    sub_stream(seed, namespace, 0)
}

/// Stream for `namespace` under `seed`, further keyed by `index`.
pub fn sub_stream(seed: u64, namespace: &str, index: u64) -> Stream {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(splitmix(fnv1a(namespace.as_bytes()) ^ splitmix(index)));
    rng
}
