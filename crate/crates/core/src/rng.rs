//! Deterministic randomness.
//!
//! Every random decision in the pipeline flows through ChaCha8 streams with
//! explicitly derived seeds, so a run is a pure function of its configured
//! seed. Stream derivation uses the splitmix64 finalizer over (root seed,
//! tag...) so that, e.g., the noise/dropout stream of (epoch 3, utterance 7)
//! is independent of how many draws earlier utterances consumed.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Stream = ChaCha8Rng;

fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Collapse a root seed plus context tags into one 64-bit seed.
pub fn derive(root: u64, tags: &[u64]) -> u64 {
    tags.iter().fold(mix64(root), |acc, &t| mix64(acc ^ t))
}

pub fn stream(seed: u64) -> Stream {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Stream for a tagged context, e.g. `substream(seed, &[epoch, utt_index])`.
pub fn substream(root: u64, tags: &[u64]) -> Stream {
    stream(derive(root, tags))
}

/// Uniform draw in `[lo, hi)` from the generator's 53-bit `[0,1)` output.
pub fn uniform(rng: &mut Stream, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

/// Standard normal draw via Box-Muller (cosine branch only).
pub fn gaussian(rng: &mut Stream) -> f64 {
    // u1 in (0,1] so the log is finite.
    let u1 = 1.0 - rng.random::<f64>();
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// In-place Fisher-Yates shuffle.
pub fn shuffle<T>(rng: &mut Stream, items: &mut [T]) {
    for i in (1..items.len()).rev() {
        let j = rng.random_range(0..=i);
        items.swap(i, j);
    }
}
