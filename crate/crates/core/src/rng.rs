//! Deterministic random streams.
//!
//! All randomness in the crate flows through ChaCha8, a counter-based stream
//! cipher RNG that is portable across platforms and supports cheap
//! independent substreams. A (seed, stream) pair fully determines the
//! sequence, which keeps datasets and training runs reproducible regardless
//! of thread count: every parallel unit of work (channel realization,
//! training step, sweep trial) gets its own stream id.

use num_complex::Complex64;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// RNG for substream `stream` of the generator seeded with `seed`.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Stream ids, kept in one place so independent consumers never collide.
pub mod streams {
    /// Channel realization `i` of a dataset.
    pub fn dataset_item(i: u64) -> u64 {
        i
    }
    /// Pilot noise for observation `i`.
    pub fn observation(i: u64) -> u64 {
        (1 << 40) + i
    }
    /// Noise/sigma draws of training step `s`.
    pub fn train_step(s: u64) -> u64 {
        (2 << 40) + s
    }
    /// Epoch `e` shuffle.
    pub fn epoch_shuffle(e: u64) -> u64 {
        (3 << 40) + e
    }
    /// Parameter initialization.
    pub fn param_init() -> u64 {
        4 << 40
    }
    /// Sweep trial `t` at SNR grid index `g`.
    pub fn sweep_trial(g: u64, t: u64) -> u64 {
        (5 << 40) + (g << 24) + t
    }
}

/// Standard normal draw.
pub fn randn(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// Circularly-symmetric complex Gaussian CN(0, var): independent real and
/// imaginary parts, each N(0, var/2).
pub fn randcn(rng: &mut ChaCha8Rng, var: f64) -> Complex64 {
    let s = (var / 2.0).sqrt();
    Complex64::new(s * randn(rng), s * randn(rng))
}

/// Zero-mean Laplace draw with standard deviation `std` (inverse CDF).
pub fn rand_laplace(rng: &mut ChaCha8Rng, std: f64) -> f64 {
    let b = std / std::f64::consts::SQRT_2;
    let u: f64 = rng.random::<f64>() - 0.5;
    -b * u.signum() * (1.0 - 2.0 * u.abs()).ln()
}
