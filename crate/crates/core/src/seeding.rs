//! Deterministic seed derivation so every (strategy, date) fit gets its own
//! reproducible RNG stream from one global seed.

pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Seed for the fit tagged `tag` on day index `day`, derived from `base`.
pub fn derive_seed(base: u64, tag: &str, day: usize) -> u64 {
    splitmix64(base ^ fnv1a(tag.as_bytes()) ^ splitmix64(day as u64))
}
