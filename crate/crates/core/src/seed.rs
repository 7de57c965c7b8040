//! Stable hashing and seed derivation.
//!
//! Everything random in the crate is seeded through these helpers so results
//! never depend on thread scheduling or the standard library's hasher.

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// 64-bit FNV-1a over raw bytes.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash = FNV_OFFSET;
    for &b in bytes {
        hash ^= u64::from(b);
        hash = hash.wrapping_mul(FNV_PRIME);
    }
    hash
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Folds a sequence of 64-bit words into a base seed.
pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(splitmix64(base), |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

/// Hash of a token sequence, with separators so `["ab"]` and `["a","b"]` differ.
pub(crate) fn hash_tokens<'a>(hash: u64, tokens: impl IntoIterator<Item = &'a String>) -> u64 {
    let mut h = hash;
    for t in tokens {
        for &b in t.as_bytes() {
            h ^= u64::from(b);
            h = h.wrapping_mul(FNV_PRIME);
        }
        h ^= 0x1f;
        h = h.wrapping_mul(FNV_PRIME);
    }
    h ^= 0x1e;
    h.wrapping_mul(FNV_PRIME)
}
