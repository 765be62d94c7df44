use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// splitmix64 finalizer. Stable across platforms and releases, unlike the
/// std hasher, so derived seeds never drift between builds.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

fn hash_tag(tag: &str) -> u64 {
    // FNV-1a over the tag bytes.
    let mut h: u64 = 0xcbf29ce484222325;
    for b in tag.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Derives an independent stream seed from a base seed, a purpose tag and an
/// index. Every consumer of randomness (init, per-epoch shuffling, per-sample
/// data synthesis) gets its own stream so that resuming at epoch k replays
/// exactly the draws a fresh run would make at epoch k.
pub fn derive_seed(base: u64, tag: &str, index: u64) -> u64 {
    mix(base ^ mix(hash_tag(tag) ^ mix(index)))
}

pub fn stream_rng(base: u64, tag: &str, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(base, tag, index))
}
