use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Independent generator for `(seed, stream)`.
///
/// Streams give every sample its own reproducible sequence regardless of the
/// order or thread in which samples are produced.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// 64-bit mix (SplitMix64 finalizer), used for split assignment and seed
/// derivation.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derived seed for a named sub-task, so that e.g. evaluation scenarios never
/// reuse the policy-training seeds.
pub fn derive_seed(seed: u64, tag: &str) -> u64 {
    tag.bytes()
        .fold(mix64(seed), |h, b| mix64(h ^ u64::from(b)))
}
