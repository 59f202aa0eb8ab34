//! Synthetic clustered-multipath MIMO channels and pilot observation.
//!
//! Channels are sums of plane-wave paths over half-wavelength ULAs at both
//! ends: an optional line-of-sight ray plus clusters of diffuse rays with
//! Laplacian angular offsets around uniformly drawn cluster centers.
//! Normalization targets unit average entry power, E|H_ij|^2 = 1.

use crate::complex::{dft_matrix, ComplexMatrix};
use crate::error::ConfigError;
use crate::rng::{self, stream_rng, streams};
use num_complex::Complex64;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Antenna counts. Full-pilot setting: the pilot count equals the transmit
/// antenna count.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArrayGeometry {
    pub n_r: usize,
    pub n_t: usize,
    pub n_p: usize,
}

impl ArrayGeometry {
    /// Powers of two keep the angular DFT grids clean.
    pub fn new(n_r: usize, n_t: usize) -> Result<Self, ConfigError> {
        for (name, n) in [("n_r", n_r), ("n_t", n_t)] {
            if n < 2 || !n.is_power_of_two() {
                return Err(ConfigError::Invalid(format!(
                    "{name} must be a power of two >= 2, got {n}"
                )));
            }
        }
        Ok(Self { n_r, n_t, n_p: n_t })
    }
}

impl std::fmt::Display for ArrayGeometry {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}", self.n_r, self.n_t)
    }
}

/// Clustered-multipath profile. `angle_spread_deg` is the RMS Laplacian ray
/// offset around each cluster center, applied independently at both ends.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelProfile {
    pub name: String,
    pub n_clusters: usize,
    pub rays_per_cluster: usize,
    pub angle_spread_deg: f64,
    pub los_power_fraction: f64,
}

impl ChannelProfile {
    /// Rich-scattering NLoS profile.
    pub fn synth_c() -> Self {
        Self {
            name: "synthC".into(),
            n_clusters: 8,
            rays_per_cluster: 10,
            angle_spread_deg: 5.0,
            los_power_fraction: 0.0,
        }
    }

    /// LoS-dominant sparse profile.
    pub fn synth_d() -> Self {
        Self {
            name: "synthD".into(),
            n_clusters: 3,
            rays_per_cluster: 10,
            angle_spread_deg: 2.0,
            los_power_fraction: 0.7,
        }
    }

    pub fn by_name(name: &str) -> Result<Self, ConfigError> {
        match name {
            "synthC" => Ok(Self::synth_c()),
            "synthD" => Ok(Self::synth_d()),
            other => Err(ConfigError::Invalid(format!(
                "unknown profile '{other}' (expected synthC or synthD)"
            ))),
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.n_clusters < 1 || self.rays_per_cluster < 1 {
            return Err(ConfigError::Invalid(
                "profile needs at least one cluster and one ray".into(),
            ));
        }
        if !(self.angle_spread_deg > 0.0) {
            return Err(ConfigError::Invalid("angle spread must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.los_power_fraction) {
            return Err(ConfigError::Invalid(
                "los_power_fraction must lie in [0, 1]".into(),
            ));
        }
        Ok(())
    }

    /// Seed-independent hash of the profile parameters, for provenance.
    pub fn param_hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let bytes = serde_json::to_vec(self).expect("profile serializes");
        let digest = Sha256::digest(&bytes);
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Half-wavelength ULA steering vector, `a(theta)[k] = exp(j*pi*k*sin(theta))/sqrt(n)`.
pub fn steering_vector(n: usize, angle_rad: f64) -> ComplexMatrix {
    let scale = 1.0 / (n as f64).sqrt();
    let s = angle_rad.sin();
    ComplexMatrix::from_fn(n, 1, |k, _| {
        Complex64::from_polar(scale, std::f64::consts::PI * k as f64 * s)
    })
}

fn rank_one(
    n_r: usize,
    n_t: usize,
    theta: f64,
    phi: f64,
    weight: Complex64,
    acc: &mut ComplexMatrix,
) {
    let ar = steering_vector(n_r, theta);
    let at = steering_vector(n_t, phi);
    for i in 0..n_r {
        let a = ar[(i, 0)] * weight;
        for j in 0..n_t {
            acc[(i, j)] += a * at[(j, 0)].conj();
        }
    }
}

/// One channel realization. Draw order is fixed (LoS angles, then per
/// cluster: centers, then per ray: offsets and gain), so a given
/// (geometry, profile, rng state) is bit-reproducible.
pub fn generate_channel(
    geom: ArrayGeometry,
    profile: &ChannelProfile,
    rng: &mut ChaCha8Rng,
) -> ComplexMatrix {
    let half_pi = std::f64::consts::FRAC_PI_2;
    let mut uniform_angle = move |rng: &mut ChaCha8Rng| rng.random_range(-half_pi..half_pi);
    let spread_rad = profile.angle_spread_deg.to_radians();

    let mut h = ComplexMatrix::zeros(geom.n_r, geom.n_t);
    let los = profile.los_power_fraction;
    let diffuse = 1.0 - los;
    let nrnt = (geom.n_r * geom.n_t) as f64;

    let theta0 = uniform_angle(rng);
    let phi0 = uniform_angle(rng);
    if los > 0.0 {
        let w = Complex64::new((los * nrnt).sqrt(), 0.0);
        rank_one(geom.n_r, geom.n_t, theta0, phi0, w, &mut h);
    }
    if diffuse > 0.0 {
        let paths = (profile.n_clusters * profile.rays_per_cluster) as f64;
        let ray_scale = (diffuse * nrnt / paths).sqrt();
        for _ in 0..profile.n_clusters {
            let theta_c = uniform_angle(rng);
            let phi_c = uniform_angle(rng);
            for _ in 0..profile.rays_per_cluster {
                let theta = theta_c + rng::rand_laplace(rng, spread_rad);
                let phi = phi_c + rng::rand_laplace(rng, spread_rad);
                let g = rng::randcn(rng, 1.0) * ray_scale;
                rank_one(geom.n_r, geom.n_t, theta, phi, g, &mut h);
            }
        }
    }
    h
}

/// Realization `index` of the dataset stream for `seed`.
pub fn generate_channel_indexed(
    geom: ArrayGeometry,
    profile: &ChannelProfile,
    seed: u64,
    index: u64,
) -> ComplexMatrix {
    let mut rng = stream_rng(seed, streams::dataset_item(index));
    generate_channel(geom, profile, &mut rng)
}

/// Generate `count` realizations in parallel. Each index has its own RNG
/// substream, so the result is independent of thread count.
pub fn generate_dataset(
    geom: ArrayGeometry,
    profile: &ChannelProfile,
    count: usize,
    seed: u64,
) -> Vec<ComplexMatrix> {
    (0..count as u64)
        .into_par_iter()
        .map(|i| generate_channel_indexed(geom, profile, seed, i))
        .collect()
}

/// Received pilots `y = H*P + N` with a unitary DFT pilot matrix.
#[derive(Clone, Debug)]
pub struct PilotObservation {
    pub y: ComplexMatrix,
    pub pilot: ComplexMatrix,
    /// Per-complex-entry noise variance sigma^2; 0 means noise disabled.
    pub noise_var: f64,
}

/// Noise variance for an SNR in dB under unit-power channel entries:
/// sigma^2 = 10^(-snr/10). `snr_db = +inf` disables noise.
pub fn noise_var_for_snr_db(snr_db: f64) -> f64 {
    if snr_db.is_infinite() && snr_db > 0.0 {
        0.0
    } else {
        10f64.powf(-snr_db / 10.0)
    }
}

pub fn observe_pilots(h: &ComplexMatrix, snr_db: f64, rng: &mut ChaCha8Rng) -> PilotObservation {
    let (n_r, n_t) = h.shape();
    let pilot = dft_matrix(n_t);
    let noise_var = noise_var_for_snr_db(snr_db);
    let mut y = h.matmul(&pilot).expect("shape");
    if noise_var > 0.0 {
        for z in y.data_mut() {
            *z += rng::randcn(rng, noise_var);
        }
    }
    PilotObservation {
        y,
        pilot,
        noise_var,
    }
}
