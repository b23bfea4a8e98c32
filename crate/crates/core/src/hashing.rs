//! Seeded deterministic pseudorandom functions standing in for the fully
//! independent hash functions of the streaming algorithm, plus the
//! sampling-probability ladder and the geometric guess sequence.
//!
//! Determinism is the linchpin of dynamic-stream correctness: replaying a
//! delete of a point evaluates the same bits as its insert did, so sketch
//! state cancels exactly.

use crate::grid::PointKey;
use crate::model::Params;

/// Derives an independent 64-bit sub-seed from the master seed, a domain
/// tag, and optional indices. Named sub-streams keep the grid shift, the
/// sketches, the sampling functions, and the generators independently
/// reproducible.
pub fn subseed(seed: u64, domain: &str, indices: &[u64]) -> u64 {
    let mut h = seed ^ 0x9e37_79b9_7f4a_7c15;
    for &b in domain.as_bytes() {
        h = mix64(h ^ b as u64);
    }
    for &ix in indices {
        h = mix64(h ^ ix);
    }
    mix64(h)
}

/// Reproducible RNG for a derived sub-seed.
pub fn rng_for(seed: u64) -> rand_chacha::ChaCha12Rng {
    use rand::SeedableRng;
    rand_chacha::ChaCha12Rng::seed_from_u64(seed)
}

/// 64-bit finalizer: xor-shift-multiply rounds with full avalanche.
#[inline]
pub fn mix64(mut x: u64) -> u64 {
    x ^= x >> 30;
    x = x.wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x ^= x >> 27;
    x = x.wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^= x >> 31;
    x
}

/// Keyed 4-round mix of a 128-bit value down to 64 bits.
#[inline]
pub fn mix128(key: u64, x: u128) -> u64 {
    let lo = x as u64;
    let hi = (x >> 64) as u64;
    let mut h = key ^ 0x2545_f491_4f6c_dd1d;
    h = mix64(h ^ lo);
    h = mix64(h ^ hi);
    h = mix64(h.wrapping_add(lo.rotate_left(23)));
    mix64(h ^ key.rotate_left(32))
}

/// A seeded sampling function for one `(o, level)` instance. Evaluation is
/// pure: identical `(seed, o_index, level, point)` always yields the same
/// bit.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SampleHash {
    key: u64,
}

impl SampleHash {
    pub fn new(master_seed: u64, o_index: u64, level: i32) -> Self {
        SampleHash { key: subseed(master_seed, "sample", &[o_index, level as u64]) }
    }

    /// Uniform 64-bit value for the point.
    #[inline]
    pub fn value(&self, point: PointKey) -> u64 {
        mix128(self.key, point)
    }
}

/// Samples a point with probability `pi` by comparing the PRF value against
/// the 64-bit threshold `floor(pi * 2^64)`.
#[inline]
pub fn sample_bit(h: &SampleHash, point: PointKey, pi: f64) -> bool {
    debug_assert!(pi > 0.0 && pi <= 1.0);
    if pi >= 1.0 {
        return true;
    }
    let threshold = (pi * 2f64.powi(64)) as u128;
    (h.value(point) as u128) < threshold
}

/// The geometric guess sequence `O = {1, 2, 4, ...}` reaching at least
/// `sqrt(d) * delta^{d+1}`. Values are stored as exponents because they
/// overflow 64-bit integers already at moderate dimensions; the probability
/// formulas consume the value through `2^exponent` in floating point.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GuessLadder {
    max_exponent: u32,
}

impl GuessLadder {
    pub fn new(params: &Params) -> Self {
        let log2_target =
            0.5 * (params.d as f64).log2() + (params.d as f64 + 1.0) * params.levels as f64;
        GuessLadder { max_exponent: log2_target.ceil().max(0.0) as u32 }
    }

    pub fn len(&self) -> usize {
        self.max_exponent as usize + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn exponent(&self, idx: usize) -> u32 {
        debug_assert!(idx < self.len());
        idx as u32
    }

    /// The guess value `2^idx` as a float (exact for all ladder sizes).
    pub fn value(&self, idx: usize) -> f64 {
        2f64.powi(idx as i32)
    }

    pub fn iter(&self) -> impl Iterator<Item = usize> {
        0..self.len()
    }
}

/// Sampling probability of the generally weighted construction at `level`
/// for guess `o`: `min(c * (L+1)^2 * delta * d^2 / (2^level eps^2 o) *
/// ln(2 (L+1) delta^{kd} / rho), 1)`, scaled by `constant_scale`. The
/// leading constant `c` is `lambda.pi_general`. `delta^{kd}` never
/// materializes; its logarithm enters directly.
pub fn pi_general(params: &Params, level: i32, o: f64) -> f64 {
    debug_assert!((0..=params.levels as i32).contains(&level));
    debug_assert!(o >= 1.0);
    let lp1 = params.level_count() as f64;
    let d = params.d as f64;
    let ln_term = (2.0 * lp1 / params.rho).ln() + params.ln_delta_pow_kd();
    let raw = params.lambda.pi_general * lp1 * lp1 * params.delta as f64 * d * d
        / (2f64.powi(level) * params.epsilon * params.epsilon * o)
        * ln_term;
    clamp_probability(params.constant_scale * raw)
}

/// Sampling probability of the non-negative-weight construction at `level`
/// for guess `o`. Level `-1` is counted exactly, so its probability is one.
pub fn pi_positive(params: &Params, level: i32, o: f64) -> f64 {
    debug_assert!((-1..=params.levels as i32).contains(&level));
    debug_assert!(o >= 1.0);
    if level == -1 {
        return 1.0;
    }
    let l = params.levels.max(1) as f64;
    let d = params.d as f64;
    let k = params.k as f64;
    let eps2 = params.epsilon * params.epsilon;
    let pow = 2f64.powi(level);
    let first = params.lambda.l3 * d * d * params.delta as f64 * l * l / (pow * eps2 * o)
        * ((2.0 * l / params.rho).ln() + params.ln_delta_pow_kd());
    let second = params.lambda.l4 * d * d * k * l * l * l * params.delta as f64
        / (pow * eps2 * params.rho * o)
        * (30.0 * k * l * l / (params.rho * params.rho)).ln();
    clamp_probability(params.constant_scale * (first + second))
}

/// Clamps a raw formula value into `(0, 1]`; degenerate (non-positive or
/// non-finite) values fall back to exact counting.
fn clamp_probability(raw: f64) -> f64 {
    if !raw.is_finite() || raw <= 0.0 {
        return 1.0;
    }
    raw.min(1.0)
}
