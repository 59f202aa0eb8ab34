//! Spatial/angular transforms, real-image packing, and the LS estimator.
//!
//! The angular transform rotates a channel by unitary DFT matrices on both
//! sides; packing stacks real and imaginary parts into a 2-channel image.
//! Both are exactly invertible, and the LS estimate `Y*P^H` decomposes as
//! `H + N*P^H` for a unitary pilot.

use crate::channel::PilotObservation;
use crate::complex::{dft_matrix, ComplexMatrix};
use crate::error::{TensorError, TensorResult};
use crate::tensor::Tensor;
use num_complex::Complex64;

/// Receive/transmit unitary DFT pair for a geometry.
#[derive(Clone, Debug)]
pub struct DftPair {
    pub u_r: ComplexMatrix,
    pub u_t: ComplexMatrix,
}

impl DftPair {
    pub fn new(n_r: usize, n_t: usize) -> Self {
        Self {
            u_r: dft_matrix(n_r),
            u_t: dft_matrix(n_t),
        }
    }
}

/// Two-channel real image of a complex matrix: channel 0 holds the real
/// part, channel 1 the imaginary part; shape `[2, rows, cols]`.
#[derive(Clone, Debug, PartialEq)]
pub struct CsiImage {
    pub data: Tensor,
}

impl CsiImage {
    pub fn from_tensor(data: Tensor) -> TensorResult<Self> {
        if data.rank() != 3 || data.shape()[0] != 2 {
            return Err(TensorError::InvalidShape {
                op: "CsiImage",
                shape: data.shape().to_vec(),
                reason: "expected shape [2, rows, cols]".into(),
            });
        }
        Ok(Self { data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            data: Tensor::zeros(&[2, rows, cols]),
        }
    }

    pub fn rows(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn cols(&self) -> usize {
        self.data.shape()[2]
    }
}

/// `H_ang = U_r^H * H * U_t`.
pub fn to_angular(h: &ComplexMatrix, dft: &DftPair) -> TensorResult<ComplexMatrix> {
    dft.u_r.hermitian().matmul(h)?.matmul(&dft.u_t)
}

/// Exact inverse of [`to_angular`]: `H = U_r * H_ang * U_t^H`.
pub fn from_angular(h_ang: &ComplexMatrix, dft: &DftPair) -> TensorResult<ComplexMatrix> {
    dft.u_r.matmul(h_ang)?.matmul(&dft.u_t.hermitian())
}

/// Stack real and imaginary parts into a `[2, rows, cols]` tensor.
pub fn complex_to_image(h: &ComplexMatrix) -> CsiImage {
    let (rows, cols) = h.shape();
    let n = rows * cols;
    let mut data = vec![0.0f64; 2 * n];
    for (i, z) in h.data().iter().enumerate() {
        data[i] = z.re;
        data[n + i] = z.im;
    }
    CsiImage {
        data: Tensor::new(vec![2, rows, cols], data).expect("finite"),
    }
}

/// Inverse of [`complex_to_image`], lossless.
pub fn image_to_complex(x: &CsiImage) -> ComplexMatrix {
    let (rows, cols) = (x.rows(), x.cols());
    let n = rows * cols;
    let d = x.data.data();
    let data: Vec<Complex64> = (0..n).map(|i| Complex64::new(d[i], d[n + i])).collect();
    ComplexMatrix::new(rows, cols, data).expect("finite")
}

/// Least-squares channel estimate `Y * P^H`. With a unitary pilot this is
/// exactly `H + N*P^H`.
pub fn ls_estimate(obs: &PilotObservation) -> TensorResult<ComplexMatrix> {
    obs.y.matmul(&obs.pilot.hermitian())
}

/// Angular-domain LS image together with its noise level.
///
/// The rotated noise stays white with the same per-complex-entry variance
/// sigma^2, so each real image entry carries std `sigma_t = sqrt(sigma^2/2)`
/// — exactly the additive-noise level the denoiser is conditioned on.
pub fn angular_ls(obs: &PilotObservation, dft: &DftPair) -> TensorResult<(CsiImage, f64)> {
    let h_ls = ls_estimate(obs)?;
    let h_ang = to_angular(&h_ls, dft)?;
    let sigma_t = (obs.noise_var / 2.0).sqrt();
    Ok((complex_to_image(&h_ang), sigma_t))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::{
        generate_channel_indexed, observe_pilots, ArrayGeometry, ChannelProfile,
    };
    use crate::rng::{stream_rng, streams};

    fn random_channel(n_r: usize, n_t: usize, seed: u64) -> ComplexMatrix {
        let geom = ArrayGeometry::new(n_r, n_t).unwrap();
        generate_channel_indexed(geom, &ChannelProfile::synth_c(), seed, 0)
    }

    #[test]
    fn identity_dfts_leave_channel_unchanged() {
        let h = random_channel(8, 4, 1);
        let eye = DftPair {
            u_r: ComplexMatrix::identity(8),
            u_t: ComplexMatrix::identity(4),
        };
        let ang = to_angular(&h, &eye).unwrap();
        assert!(ang.max_abs_diff(&h) < 1e-15);
    }

    #[test]
    fn angular_transform_preserves_energy() {
        let h = random_channel(16, 8, 2);
        let dft = DftPair::new(16, 8);
        let ang = to_angular(&h, &dft).unwrap();
        assert!((ang.fro_norm() - h.fro_norm()).abs() < 1e-12);
    }

    #[test]
    fn angular_roundtrip_is_identity() {
        let h = random_channel(8, 4, 3);
        let dft = DftPair::new(8, 4);
        let back = from_angular(&to_angular(&h, &dft).unwrap(), &dft).unwrap();
        assert!(back.max_abs_diff(&h) < 1e-13);
        let zero = ComplexMatrix::zeros(8, 4);
        let z = from_angular(&zero, &dft).unwrap();
        assert!(z.max_abs_diff(&zero) == 0.0);
    }

    #[test]
    fn on_grid_single_path_concentrates_energy() {
        // LoS channel with both angles on the DFT grids: the angular image
        // must put >= 99.9% of its energy into one entry.
        let (n_r, n_t) = (8usize, 4usize);
        let theta = (2.0 * 2.0 / n_r as f64).asin(); // sin = 2*l/n on grid
        let phi = (2.0 * 1.0 / n_t as f64).asin();
        let ar = crate::channel::steering_vector(n_r, theta);
        let at = crate::channel::steering_vector(n_t, phi);
        let mut h = ComplexMatrix::zeros(n_r, n_t);
        for i in 0..n_r {
            for j in 0..n_t {
                h[(i, j)] = ar[(i, 0)] * at[(j, 0)].conj();
            }
        }
        let dft = DftPair::new(n_r, n_t);
        let ang = to_angular(&h, &dft).unwrap();
        let total = ang.fro_norm_sq();
        let peak = ang.data().iter().map(|z| z.norm_sqr()).fold(0.0, f64::max);
        assert!(peak / total > 0.999, "peak fraction {}", peak / total);
    }

    #[test]
    fn image_roundtrip_and_energy() {
        let h = random_channel(8, 8, 4);
        let x = complex_to_image(&h);
        let back = image_to_complex(&x);
        assert_eq!(back, h); // bit-exact
        assert!((x.data.sq_norm() - h.fro_norm_sq()).abs() < 1e-12);
    }

    #[test]
    fn purely_real_channel_has_zero_imag_plane() {
        let h = ComplexMatrix::from_fn(4, 4, |i, j| Complex64::new((i + j) as f64, 0.0));
        let x = complex_to_image(&h);
        let n = 16;
        assert!(x.data.data()[n..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn ls_is_exact_without_noise() {
        let h = random_channel(8, 4, 5);
        let mut rng = stream_rng(5, streams::observation(0));
        let obs = observe_pilots(&h, f64::INFINITY, &mut rng);
        let est = ls_estimate(&obs).unwrap();
        assert!(est.max_abs_diff(&h) < 1e-12);
    }

    #[test]
    fn ls_noise_variance_monte_carlo() {
        // H = 0: the LS estimate is N*P^H whose entries keep variance sigma^2.
        let h = ComplexMatrix::zeros(8, 8);
        let snr_db = 3.0;
        let sigma_sq = crate::channel::noise_var_for_snr_db(snr_db);
        let mut rng = stream_rng(8, 0);
        let mut total = 0.0;
        let mut count = 0;
        for _ in 0..200 {
            let obs = observe_pilots(&h, snr_db, &mut rng);
            let est = ls_estimate(&obs).unwrap();
            total += est.fro_norm_sq();
            count += est.data().len();
        }
        let var = total / count as f64;
        assert!(
            (var - sigma_sq).abs() < 0.03 * sigma_sq,
            "var {var} vs {sigma_sq}"
        );
    }

    #[test]
    fn ls_is_linear_in_y() {
        let h = random_channel(8, 4, 6);
        let mut rng = stream_rng(6, streams::observation(1));
        let obs = observe_pilots(&h, 5.0, &mut rng);
        let est = ls_estimate(&obs).unwrap();
        let mut scaled = obs.clone();
        scaled.y = scaled.y.scale(Complex64::new(2.0, 0.5));
        let est2 = ls_estimate(&scaled).unwrap();
        assert!(est2.max_abs_diff(&est.scale(Complex64::new(2.0, 0.5))) < 1e-12);
    }

    #[test]
    fn angular_ls_sigma_mapping() {
        let h = random_channel(8, 4, 7);
        let mut rng = stream_rng(7, streams::observation(0));
        // sigma^2 = 2 -> sigma_t = 1 by the per-real-entry convention
        let obs = observe_pilots(&h, -10.0 * 2.0f64.log10(), &mut rng);
        assert!((obs.noise_var - 2.0).abs() < 1e-12);
        let dft = DftPair::new(8, 4);
        let (_, sigma_t) = angular_ls(&obs, &dft).unwrap();
        assert!((sigma_t - 1.0).abs() < 1e-12);

        // noiseless: image equals the clean angular image, sigma_t = 0
        let clean = observe_pilots(&h, f64::INFINITY, &mut rng);
        let (img, s0) = angular_ls(&clean, &dft).unwrap();
        assert_eq!(s0, 0.0);
        let expect = complex_to_image(&to_angular(&h, &dft).unwrap());
        let diff: f64 = img
            .data
            .data()
            .iter()
            .zip(expect.data.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(diff < 1e-12);
    }

    #[test]
    fn angular_ls_image_noise_std_monte_carlo() {
        // std of image-domain noise entries over ~1e5 draws within 2% of
        // sqrt(sigma^2 / 2)
        let h = ComplexMatrix::zeros(8, 8);
        let snr_db = 0.0;
        let dft = DftPair::new(8, 8);
        let mut rng = stream_rng(17, 0);
        let mut total = 0.0;
        let mut count = 0usize;
        for _ in 0..800 {
            let obs = observe_pilots(&h, snr_db, &mut rng);
            let (img, _) = angular_ls(&obs, &dft).unwrap();
            total += img.data.sq_norm();
            count += img.data.len();
        }
        let std = (total / count as f64).sqrt();
        let expect = (crate::channel::noise_var_for_snr_db(snr_db) / 2.0).sqrt();
        assert!((std - expect).abs() < 0.02 * expect, "std {std} vs {expect}");
    }
}
