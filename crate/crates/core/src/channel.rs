//! Analog over-the-air gradient aggregation.
//!
//! Each client maps its gradient onto the amplitudes of a shared set of
//! orthonormal waveforms, all clients transmit at once, and the access point
//! sees the fading-weighted superposition plus receiver noise. A bank of
//! matched filters (one per waveform) turns the received signal back into a
//! d-dimensional vector: a noisy, fading-distorted average of the gradients.
//!
//! Waveforms are discretized to `S` samples with unit quadrature weight, so
//! the continuous orthonormality conditions become exact row conditions on a
//! `d x S` matrix.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::param::ParamVector;
use crate::rng::{self, Domain};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BasisKind {
    Identity,
    Hadamard,
    Fourier,
}

/// `d` orthonormal waveforms sampled at `S` points, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct WaveformBasis {
    dimension: usize,
    samples_per_symbol: usize,
    rows: Vec<f64>,
}

impl WaveformBasis {
    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn samples_per_symbol(&self) -> usize {
        self.samples_per_symbol
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let s = self.samples_per_symbol;
        &self.rows[i * s..(i + 1) * s]
    }

    /// Gram matrix `B B^T`, row-major `d x d`.
    pub fn gram(&self) -> Vec<f64> {
        let d = self.dimension;
        let mut g = vec![0.0; d * d];
        for i in 0..d {
            for j in 0..d {
                g[i * d + j] = self.row(i).iter().zip(self.row(j)).map(|(a, b)| a * b).sum();
            }
        }
        g
    }
}

pub fn make_basis(d: usize, samples: usize, kind: BasisKind) -> Result<WaveformBasis> {
    if d == 0 || samples == 0 {
        return Err(Error::InvalidArgument(
            "basis dimension and samples per symbol must be positive".into(),
        ));
    }
    if samples < d {
        return Err(Error::InvalidArgument(format!(
            "{samples} samples cannot carry {d} orthonormal waveforms"
        )));
    }
    let mut rows = vec![0.0; d * samples];
    match kind {
        BasisKind::Identity => {
            for i in 0..d {
                rows[i * samples + i] = 1.0;
            }
        }
        BasisKind::Hadamard => {
            if !samples.is_power_of_two() {
                return Err(Error::Unsupported(format!(
                    "Hadamard basis needs a power-of-two sample count, got {samples}"
                )));
            }
            // Sylvester construction: H[i][j] = (-1)^popcount(i & j).
            let amp = 1.0 / (samples as f64).sqrt();
            for i in 0..d {
                for j in 0..samples {
                    let sign = if (i & j).count_ones() % 2 == 0 { 1.0 } else { -1.0 };
                    rows[i * samples + j] = sign * amp;
                }
            }
        }
        BasisKind::Fourier => {
            // Real DFT basis: constant, then cos/sin pairs, then the
            // alternating Nyquist row when S is even.
            let n = samples as f64;
            let dc = 1.0 / n.sqrt();
            let pair = (2.0 / n).sqrt();
            for i in 0..d {
                let row = &mut rows[i * samples..(i + 1) * samples];
                if i == 0 {
                    row.fill(dc);
                    continue;
                }
                let m = i.div_ceil(2);
                if samples % 2 == 0 && m == samples / 2 {
                    for (j, x) in row.iter_mut().enumerate() {
                        *x = if j % 2 == 0 { dc } else { -dc };
                    }
                    continue;
                }
                for (j, x) in row.iter_mut().enumerate() {
                    // reduce m*j mod S first so the phase stays exact-ish for large S
                    let phase = 2.0 * PI * ((m * j) % samples) as f64 / n;
                    *x = pair * if i % 2 == 1 { phase.cos() } else { phase.sin() };
                }
            }
        }
    }
    Ok(WaveformBasis {
        dimension: d,
        samples_per_symbol: samples,
        rows,
    })
}

/// Discretized `x(s) = <u(s), g>`.
pub fn modulate(gradient: &[f64], basis: &WaveformBasis) -> Result<Vec<f64>> {
    if gradient.len() != basis.dimension {
        return Err(Error::dim(basis.dimension, gradient.len(), "modulate"));
    }
    let mut signal = vec![0.0; basis.samples_per_symbol];
    for (i, &gi) in gradient.iter().enumerate() {
        for (s, u) in signal.iter_mut().zip(basis.row(i)) {
            *s += gi * u;
        }
    }
    Ok(signal)
}

/// Matched-filter bank: correlates the signal with each waveform.
pub fn demodulate(signal: &[f64], basis: &WaveformBasis) -> Result<ParamVector> {
    if signal.len() != basis.samples_per_symbol {
        return Err(Error::dim(
            basis.samples_per_symbol,
            signal.len(),
            "demodulate",
        ));
    }
    Ok((0..basis.dimension)
        .map(|i| basis.row(i).iter().zip(signal).map(|(u, y)| u * y).sum())
        .collect::<Vec<f64>>()
        .into())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FadingKind {
    /// Rayleigh amplitude with the scale chosen so the mean is `mu_h`.
    Rayleigh,
    /// `h = mu_h` every round.
    Constant,
    /// `h = |N(mu_h, sigma_h2)|`.
    GaussianAbs,
}

/// Where the receiver noise `sigma2` is referenced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseReference {
    /// Noise of variance `sigma2` enters at the receiver front end; the
    /// server's `1/(P K)` normalization leaves `sigma2 / (P K)^2` in the
    /// aggregated gradient.
    #[default]
    Receiver,
    /// Noise of variance `sigma2` is added to the aggregated gradient
    /// directly, independent of `P` and `K`.
    Aggregate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelModel {
    pub fading_kind: FadingKind,
    pub mu_h: f64,
    pub sigma_h2: f64,
    pub sigma2: f64,
    pub power: f64,
    #[serde(default)]
    pub noise_reference: NoiseReference,
}

/// Variance of a Rayleigh amplitude with mean `mu`.
pub fn rayleigh_variance(mu: f64) -> f64 {
    (4.0 / PI - 1.0) * mu * mu
}

impl ChannelModel {
    pub fn new(
        fading_kind: FadingKind,
        mu_h: f64,
        sigma_h2: f64,
        sigma2: f64,
        power: f64,
    ) -> Result<Self> {
        if !(mu_h.is_finite() && mu_h >= 0.0) {
            return Err(Error::InvalidArgument(format!("mu_h must be >= 0, got {mu_h}")));
        }
        if !(sigma_h2.is_finite() && sigma_h2 >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "sigma_h2 must be >= 0, got {sigma_h2}"
            )));
        }
        if !(sigma2.is_finite() && sigma2 >= 0.0) {
            return Err(Error::InvalidArgument(format!("sigma2 must be >= 0, got {sigma2}")));
        }
        if !(power.is_finite() && power > 0.0) {
            return Err(Error::InvalidArgument(format!("power must be > 0, got {power}")));
        }
        let sigma_h2 = match fading_kind {
            FadingKind::Rayleigh => {
                let implied = rayleigh_variance(mu_h);
                if sigma_h2 != 0.0 && (sigma_h2 - implied).abs() > 1e-12 {
                    log::warn!(
                        "Rayleigh fading with mean {mu_h} has variance {implied}; ignoring sigma_h2 = {sigma_h2}"
                    );
                }
                implied
            }
            FadingKind::Constant => {
                if sigma_h2 != 0.0 {
                    log::warn!("constant fading has zero variance; ignoring sigma_h2 = {sigma_h2}");
                }
                0.0
            }
            FadingKind::GaussianAbs => sigma_h2,
        };
        Ok(ChannelModel {
            fading_kind,
            mu_h,
            sigma_h2,
            sigma2,
            power,
            noise_reference: NoiseReference::Receiver,
        })
    }

    pub fn rayleigh(mu_h: f64, sigma2: f64, power: f64) -> Result<Self> {
        Self::new(FadingKind::Rayleigh, mu_h, 0.0, sigma2, power)
    }

    pub fn constant(mu_h: f64, sigma2: f64, power: f64) -> Result<Self> {
        Self::new(FadingKind::Constant, mu_h, 0.0, sigma2, power)
    }

    pub fn gaussian_abs(mu_h: f64, sigma_h2: f64, sigma2: f64, power: f64) -> Result<Self> {
        Self::new(FadingKind::GaussianAbs, mu_h, sigma_h2, sigma2, power)
    }

    pub fn with_noise_reference(mut self, reference: NoiseReference) -> Self {
        self.noise_reference = reference;
        self
    }

    /// Exact mean and variance of the fading draw.
    ///
    /// Equal to `(mu_h, sigma_h2)` for Rayleigh and Constant; the folded
    /// normal of `GaussianAbs` is slightly biased when `mu_h` is not large
    /// compared with its spread.
    pub fn fading_moments(&self) -> (f64, f64) {
        match self.fading_kind {
            FadingKind::Rayleigh | FadingKind::Constant => (self.mu_h, self.sigma_h2),
            FadingKind::GaussianAbs => {
                let s = self.sigma_h2.sqrt();
                if s == 0.0 {
                    return (self.mu_h, 0.0);
                }
                let m = self.mu_h;
                let z = m / s;
                let phi_neg = 0.5 * statrs::function::erf::erfc(z / std::f64::consts::SQRT_2);
                let mean = s * (2.0 / PI).sqrt() * (-0.5 * z * z).exp() + m * (1.0 - 2.0 * phi_neg);
                (mean, m * m + self.sigma_h2 - mean * mean)
            }
        }
    }

    /// Multiplier applied to the raw noise draw in the aggregated gradient.
    pub fn noise_gain(&self, clients: usize) -> f64 {
        match self.noise_reference {
            NoiseReference::Receiver => 1.0 / (self.power * clients as f64),
            NoiseReference::Aggregate => 1.0,
        }
    }

    /// Per-coordinate variance of the noise term of the aggregated gradient.
    pub fn effective_noise_variance(&self, clients: usize) -> f64 {
        match self.noise_reference {
            NoiseReference::Receiver => {
                let pk = self.power * clients as f64;
                self.sigma2 / (pk * pk)
            }
            NoiseReference::Aggregate => self.sigma2,
        }
    }

    fn sample_fading<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match self.fading_kind {
            FadingKind::Constant => self.mu_h,
            FadingKind::Rayleigh => {
                // mean of Rayleigh(scale) is scale * sqrt(pi / 2)
                let scale = self.mu_h / (PI / 2.0).sqrt();
                let u: f64 = rng.random();
                // 1 - u lies in (0, 1], keeping the log finite
                scale * (-2.0 * (1.0 - u).ln()).sqrt()
            }
            FadingKind::GaussianAbs => {
                let z: f64 = StandardNormal.sample(rng);
                (self.mu_h + self.sigma_h2.sqrt() * z).abs()
            }
        }
    }
}

/// Fading and noise draws for one round.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelRealization {
    pub round: usize,
    pub fadings: Vec<f64>,
    /// Raw receiver noise, i.i.d. `N(0, sigma2)`.
    pub noise: Vec<f64>,
}

pub fn sample_realization(
    model: &ChannelModel,
    clients: usize,
    d: usize,
    round: usize,
    seed: u64,
) -> ChannelRealization {
    let mut rng = rng::stream(seed, Domain::Channel, round as u64, 0);
    let fadings = (0..clients).map(|_| model.sample_fading(&mut rng)).collect();
    let noise = if model.sigma2 == 0.0 {
        vec![0.0; d]
    } else {
        let normal = Normal::new(0.0, model.sigma2.sqrt()).expect("finite variance");
        (0..d).map(|_| normal.sample(&mut rng)).collect()
    };
    ChannelRealization {
        round,
        fadings,
        noise,
    }
}

#[derive(Debug, Clone, Copy)]
pub enum Aggregation<'a> {
    /// `(1/K) sum_k h_k g_k + noise` computed directly on vectors.
    VectorLevel,
    /// Modulate, superpose, add noise in signal space, matched-filter.
    WaveformLevel(&'a WaveformBasis),
}

/// Noisy over-the-air average of the client gradients.
///
/// Gradients must be ordered by client id; `realization.fadings[k]` is the
/// fading of the k-th gradient.
pub fn aggregate_ota(
    gradients: &[ParamVector],
    realization: &ChannelRealization,
    model: &ChannelModel,
    mode: Aggregation<'_>,
) -> Result<ParamVector> {
    let k = gradients.len();
    if k == 0 {
        return Err(Error::InvalidArgument("no gradients to aggregate".into()));
    }
    if realization.fadings.len() != k {
        return Err(Error::dim(k, realization.fadings.len(), "fading draws"));
    }
    let d = realization.noise.len();
    for g in gradients {
        if g.dim() != d {
            return Err(Error::dim(d, g.dim(), "gradient"));
        }
    }
    let noise_gain = model.noise_gain(k);
    match mode {
        Aggregation::VectorLevel => {
            let mut acc = ParamVector::zeros(d);
            for (g, &h) in gradients.iter().zip(&realization.fadings) {
                acc.axpy(h, g);
            }
            acc.scale(1.0 / k as f64);
            acc.axpy(noise_gain, &realization.noise);
            Ok(acc)
        }
        Aggregation::WaveformLevel(basis) => {
            if basis.dimension() != d {
                return Err(Error::dim(d, basis.dimension(), "waveform basis"));
            }
            // y(s) = sum_k h_k P x_k(s) + xi(s), then divide by P K.
            let p = model.power;
            let mut received = vec![0.0; basis.samples_per_symbol()];
            for (g, &h) in gradients.iter().zip(&realization.fadings) {
                let x = modulate(g, basis)?;
                for (y, xs) in received.iter_mut().zip(&x) {
                    *y += h * p * xs;
                }
            }
            let scale = p * k as f64;
            let noise_signal = modulate(&realization.noise, basis)?;
            for (y, n) in received.iter_mut().zip(&noise_signal) {
                *y += noise_gain * scale * n;
            }
            let mut out = demodulate(&received, basis)?;
            out.scale(1.0 / scale);
            Ok(out)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn assert_orthonormal(b: &WaveformBasis, tol: f64) {
        let d = b.dimension();
        let g = b.gram();
        for i in 0..d {
            for j in 0..d {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!(
                    (g[i * d + j] - want).abs() < tol,
                    "gram[{i},{j}] = {}",
                    g[i * d + j]
                );
            }
        }
    }

    #[test]
    fn identity_basis_rows() {
        let b = make_basis(4, 4, BasisKind::Identity).unwrap();
        for i in 0..4 {
            let mut e = vec![0.0; 4];
            e[i] = 1.0;
            assert_eq!(b.row(i), e.as_slice());
        }
    }

    #[test]
    fn hadamard_two_of_four() {
        let b = make_basis(2, 4, BasisKind::Hadamard).unwrap();
        assert_eq!(b.row(0), &[0.5, 0.5, 0.5, 0.5]);
        assert_eq!(b.row(1), &[0.5, -0.5, 0.5, -0.5]);
        let dot: f64 = b.row(0).iter().zip(b.row(1)).map(|(a, c)| a * c).sum();
        assert_eq!(dot, 0.0);
        let self_dot: f64 = b.row(1).iter().map(|a| a * a).sum();
        assert_eq!(self_dot, 1.0);
    }

    #[test]
    fn fourier_gram_is_identity() {
        for (d, s) in [(8, 8), (5, 8), (7, 7), (16, 31), (257, 257), (3, 1024)] {
            let b = make_basis(d, s, BasisKind::Fourier).unwrap();
            assert_orthonormal(&b, 1e-12);
        }
    }

    #[test]
    fn hadamard_gram_is_identity() {
        for (d, s) in [(1, 1), (3, 4), (16, 16), (10, 64)] {
            assert_orthonormal(&make_basis(d, s, BasisKind::Hadamard).unwrap(), 1e-12);
        }
    }

    #[test]
    fn basis_errors() {
        assert!(matches!(
            make_basis(5, 4, BasisKind::Identity),
            Err(Error::InvalidArgument(_))
        ));
        assert!(matches!(
            make_basis(3, 6, BasisKind::Hadamard),
            Err(Error::Unsupported(_))
        ));
    }

    #[test]
    fn modulate_unit_vector_and_zero() {
        let b = make_basis(3, 4, BasisKind::Hadamard).unwrap();
        assert_eq!(modulate(&[1.0, 0.0, 0.0], &b).unwrap(), b.row(0));
        assert_eq!(modulate(&[0.0; 3], &b).unwrap(), vec![0.0; 4]);
        assert_eq!(demodulate(&[0.0; 4], &b).unwrap().as_ref(), &[0.0; 3]);
        assert!(matches!(
            modulate(&[1.0, 2.0], &b),
            Err(Error::DimensionMismatch { .. })
        ));
        assert!(matches!(
            demodulate(&[1.0, 2.0], &b),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn identity_round_trip_is_exact() {
        let b = make_basis(3, 3, BasisKind::Identity).unwrap();
        let g = [1.0, -2.0, 3.0];
        assert_eq!(demodulate(&modulate(&g, &b).unwrap(), &b).unwrap().as_ref(), &g);
    }

    #[test]
    fn superposition_demodulates_to_sum() {
        let b = make_basis(4, 8, BasisKind::Hadamard).unwrap();
        let g1 = [0.3, -1.2, 2.0, 0.5];
        let g2 = [-0.7, 0.4, 1.5, -3.0];
        let x: Vec<f64> = modulate(&g1, &b)
            .unwrap()
            .iter()
            .zip(modulate(&g2, &b).unwrap())
            .map(|(a, c)| a + c)
            .collect();
        let r = demodulate(&x, &b).unwrap();
        for i in 0..4 {
            assert!((r[i] - (g1[i] + g2[i])).abs() < 1e-12);
        }
    }

    #[test]
    fn rayleigh_reports_implied_variance() {
        let m = ChannelModel::new(FadingKind::Rayleigh, 1.0, 5.0, 0.1, 1.0).unwrap();
        assert!((m.sigma_h2 - 0.273_239_544_735_162_7).abs() < 1e-15);
        let c = ChannelModel::new(FadingKind::Constant, 2.0, 1.0, 0.1, 1.0).unwrap();
        assert_eq!(c.sigma_h2, 0.0);
    }

    #[test]
    fn constant_fading_and_silent_noise() {
        let m = ChannelModel::constant(1.0, 0.0, 1.0).unwrap();
        let r = sample_realization(&m, 5, 3, 2, 11);
        assert_eq!(r.fadings, vec![1.0; 5]);
        assert_eq!(r.noise, vec![0.0; 3]);
        assert_eq!(r.round, 2);
    }

    #[test]
    fn realization_is_keyed_by_seed_and_round() {
        let m = ChannelModel::rayleigh(1.0, 0.5, 1.0).unwrap();
        assert_eq!(sample_realization(&m, 4, 3, 9, 1), sample_realization(&m, 4, 3, 9, 1));
        assert_ne!(
            sample_realization(&m, 4, 3, 9, 1).fadings,
            sample_realization(&m, 4, 3, 10, 1).fadings
        );
        assert_ne!(
            sample_realization(&m, 4, 3, 9, 1).noise,
            sample_realization(&m, 4, 3, 9, 2).noise
        );
    }

    /// Rayleigh moments by Monte Carlo: mean mu_h, variance (4/pi - 1) mu_h^2.
    #[test]
    fn rayleigh_moments_monte_carlo() {
        let m = ChannelModel::rayleigh(1.0, 0.0, 1.0).unwrap();
        let n = 1_000_000usize;
        let mut rng = rng::stream(5, Domain::Channel, 0, 0);
        let xs: Vec<f64> = (0..n).map(|_| m.sample_fading(&mut rng)).collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let m4 = xs.iter().map(|x| (x - mean).powi(4)).sum::<f64>() / n as f64;
        let se_mean = (var / n as f64).sqrt();
        let se_var = ((m4 - var * var) / n as f64).sqrt();
        assert!((mean - 1.0).abs() < 3.0 * se_mean, "mean {mean}");
        assert!((var - (4.0 / PI - 1.0)).abs() < 3.0 * se_var, "var {var}");
    }

    #[test]
    fn gaussian_abs_moments_match_folded_normal() {
        let m = ChannelModel::gaussian_abs(0.5, 1.0, 0.0, 1.0).unwrap();
        let (mean, var) = m.fading_moments();
        let n = 400_000usize;
        let mut rng = rng::stream(3, Domain::Channel, 0, 0);
        let xs: Vec<f64> = (0..n).map(|_| m.sample_fading(&mut rng)).collect();
        let emp = xs.iter().sum::<f64>() / n as f64;
        let evar = xs.iter().map(|x| (x - emp).powi(2)).sum::<f64>() / (n - 1) as f64;
        assert!((emp - mean).abs() < 4.0 * (var / n as f64).sqrt());
        assert!((evar - var).abs() < 0.01);
        // large mean: folding is negligible
        let far = ChannelModel::gaussian_abs(10.0, 0.25, 0.0, 1.0).unwrap();
        let (m2, v2) = far.fading_moments();
        assert!((m2 - 10.0).abs() < 1e-12 && (v2 - 0.25).abs() < 1e-9);
    }

    #[test]
    fn single_client_unit_fading_is_exact() {
        let m = ChannelModel::constant(1.0, 0.0, 1.0).unwrap();
        let g = vec![ParamVector::from(vec![0.25, -1.5, 3.0])];
        let r = sample_realization(&m, 1, 3, 0, 0);
        let out = aggregate_ota(&g, &r, &m, Aggregation::VectorLevel).unwrap();
        assert_eq!(out, g[0]);
    }

    #[test]
    fn deep_fade_drops_a_client() {
        let m = ChannelModel::constant(1.0, 0.0, 1.0).unwrap();
        let g1 = ParamVector::from(vec![1.0, 2.0]);
        let g2 = ParamVector::from(vec![-5.0, 7.0]);
        let r = ChannelRealization {
            round: 0,
            fadings: vec![2.0, 0.0],
            noise: vec![0.0, 0.0],
        };
        let out = aggregate_ota(&[g1.clone(), g2], &r, &m, Aggregation::VectorLevel).unwrap();
        assert_eq!(out, g1);
    }

    #[test]
    fn aggregate_errors() {
        let m = ChannelModel::constant(1.0, 0.0, 1.0).unwrap();
        let r = sample_realization(&m, 2, 3, 0, 0);
        let g = vec![ParamVector::zeros(3), ParamVector::zeros(2)];
        assert!(aggregate_ota(&g, &r, &m, Aggregation::VectorLevel).is_err());
        let g = vec![ParamVector::zeros(3)];
        assert!(aggregate_ota(&g, &r, &m, Aggregation::VectorLevel).is_err());
        let b = make_basis(4, 4, BasisKind::Identity).unwrap();
        let g = vec![ParamVector::zeros(3), ParamVector::zeros(3)];
        assert!(aggregate_ota(&g, &r, &m, Aggregation::WaveformLevel(&b)).is_err());
    }

    #[test]
    fn noise_reference_scaling() {
        let m = ChannelModel::constant(1.0, 4.0, 2.0).unwrap();
        assert!((m.effective_noise_variance(5) - 0.04).abs() < 1e-17);
        let m = m.with_noise_reference(NoiseReference::Aggregate);
        assert_eq!(m.effective_noise_variance(5), 4.0);
    }

    fn moments_check(model: &ChannelModel) {
        let k = 4;
        let d = 3;
        let grads: Vec<ParamVector> = vec![
            vec![1.0, -2.0, 0.5].into(),
            vec![0.0, 1.0, 3.0].into(),
            vec![2.0, 2.0, -1.0].into(),
            vec![-1.0, 0.5, 0.0].into(),
        ];
        let (mu_h, var_h) = model.fading_moments();
        let draws = 10_000;
        let outs: Vec<ParamVector> = (0..draws)
            .map(|t| {
                let r = sample_realization(model, k, d, t, 77);
                aggregate_ota(&grads, &r, model, Aggregation::VectorLevel).unwrap()
            })
            .collect();
        for i in 0..d {
            let mean_grad = grads.iter().map(|g| g[i]).sum::<f64>() / k as f64;
            let sum_sq = grads.iter().map(|g| g[i] * g[i]).sum::<f64>();
            let want_mean = mu_h * mean_grad;
            let want_var = var_h / (k * k) as f64 * sum_sq + model.effective_noise_variance(k);
            let xs: Vec<f64> = outs.iter().map(|o| o[i]).collect();
            let n = xs.len() as f64;
            let mean = xs.iter().sum::<f64>() / n;
            let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
            let m4 = xs.iter().map(|x| (x - mean).powi(4)).sum::<f64>() / n;
            assert!(
                (mean - want_mean).abs() < 3.0 * (var / n).sqrt(),
                "coord {i}: mean {mean} vs {want_mean}"
            );
            assert!(
                (var - want_var).abs() < 3.0 * ((m4 - var * var) / n).sqrt(),
                "coord {i}: var {var} vs {want_var}"
            );
        }
    }

    #[test]
    fn aggregate_moments_receiver_noise() {
        moments_check(&ChannelModel::rayleigh(1.0, 0.3, 0.5).unwrap());
    }

    #[test]
    fn aggregate_moments_aggregate_noise() {
        moments_check(
            &ChannelModel::rayleigh(1.0, 0.3, 0.5)
                .unwrap()
                .with_noise_reference(NoiseReference::Aggregate),
        );
    }

    proptest! {
        #[test]
        fn round_trip_all_kinds(g in prop::collection::vec(-1e3f64..1e3, 1..12), kind in 0usize..3) {
            let d = g.len();
            let (kind, s) = match kind {
                0 => (BasisKind::Identity, d + 3),
                1 => (BasisKind::Hadamard, d.next_power_of_two()),
                _ => (BasisKind::Fourier, 2 * d + 1),
            };
            let b = make_basis(d, s, kind).unwrap();
            let r = demodulate(&modulate(&g, &b).unwrap(), &b).unwrap();
            for (a, c) in r.iter().zip(&g) {
                prop_assert!((a - c).abs() < 1e-9);
            }
        }

        #[test]
        fn waveform_matches_vector_level(
            seed in 0u64..1000,
            k in 1usize..6,
            reference in prop::bool::ANY,
        ) {
            let d = 5;
            let reference = if reference { NoiseReference::Receiver } else { NoiseReference::Aggregate };
            let m = ChannelModel::rayleigh(1.0, 0.7, 1.3).unwrap().with_noise_reference(reference);
            let mut rng = rng::stream(seed, Domain::Problem, 0, 0);
            let grads: Vec<ParamVector> = (0..k)
                .map(|_| (0..d).map(|_| rng.random_range(-4.0..4.0)).collect::<Vec<f64>>().into())
                .collect();
            let r = sample_realization(&m, k, d, 3, seed);
            let b = make_basis(d, 8, BasisKind::Fourier).unwrap();
            let v = aggregate_ota(&grads, &r, &m, Aggregation::VectorLevel).unwrap();
            let w = aggregate_ota(&grads, &r, &m, Aggregation::WaveformLevel(&b)).unwrap();
            for (a, c) in v.iter().zip(w.iter()) {
                prop_assert!((a - c).abs() < 1e-9);
            }
        }

        #[test]
        fn aggregate_is_linear_per_client(seed in 0u64..500, alpha in -3.0f64..3.0) {
            let d = 4;
            let m = ChannelModel::rayleigh(1.0, 0.0, 1.0).unwrap();
            let r = sample_realization(&m, 3, d, 0, seed);
            let mut rng = rng::stream(seed, Domain::Problem, 1, 0);
            let mut draw = || -> ParamVector {
                (0..d).map(|_| rng.random_range(-2.0..2.0)).collect::<Vec<f64>>().into()
            };
            let (a, b, c, x) = (draw(), draw(), draw(), draw());
            let mut ax = a.clone();
            ax.axpy(alpha, &x);
            let base = aggregate_ota(&[a, b.clone(), c.clone()], &r, &m, Aggregation::VectorLevel).unwrap();
            let shifted = aggregate_ota(&[ax, b, c], &r, &m, Aggregation::VectorLevel).unwrap();
            for i in 0..d {
                let want = base[i] + alpha * r.fadings[0] * x[i] / 3.0;
                prop_assert!((shifted[i] - want).abs() < 1e-12);
            }
        }
    }
}
