//! Seeded randomness. Every random draw in the crate flows through
//! ChaCha8 streams so that a (seed, stream) pair fully determines output.

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type DetRng = ChaCha8Rng;

pub fn seeded(seed: u64) -> DetRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Independent substream of a base seed. Used so that per-head or
/// per-epoch draws do not depend on iteration order.
pub fn stream(seed: u64, stream: u64) -> DetRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Uniform in (0, 1]; clamped away from zero so `ln` stays finite.
pub fn uniform01(rng: &mut DetRng) -> f64 {
    let u = ((rng.next_u64() >> 11) as f64) * (1.0 / (1u64 << 53) as f64);
    u.max(1e-12)
}

/// Standard normal via Box-Muller. One draw per call; the sine companion
/// is discarded to keep call sites stateless.
pub fn normal_f32(rng: &mut DetRng) -> f32 {
    let u1 = uniform01(rng);
    let u2 = uniform01(rng);
    let r = (-2.0 * u1.ln()).sqrt();
    (r * (2.0 * std::f64::consts::PI * u2).cos()) as f32
}
