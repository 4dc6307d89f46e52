//! Coordinate normalization and Fourier positional encoding.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{NbfError, Result};

/// Min-max bounds for coordinates and z-score statistics for voltages.
///
/// Spatial coordinates share one pair of extrema across x, y and z so the
/// head keeps its aspect ratio after normalization.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NormalizationParams {
    pub s_min: f64,
    pub s_max: f64,
    pub t_min: f64,
    pub t_max: f64,
    pub v_mu: f64,
    pub v_sigma: f64,
}

impl NormalizationParams {
    pub fn validate(&self) -> Result<()> {
        let finite = [self.s_min, self.s_max, self.t_min, self.t_max, self.v_mu, self.v_sigma]
            .iter()
            .all(|v| v.is_finite());
        if !finite || !(self.s_max > self.s_min) || !(self.t_max > self.t_min) || !(self.v_sigma > 0.0) {
            return Err(NbfError::invalid(format!("invalid normalization parameters {self:?}")));
        }
        Ok(())
    }

    /// Maps training-range positions into [-1, 1]^3 and times into [0, 1].
    /// Values outside the fitted range extrapolate linearly.
    pub fn normalize_coords(&self, p: [f64; 3], t: f64) -> [f64; 4] {
        let span = self.s_max - self.s_min;
        let s = |c: f64| 2.0 * (c - self.s_min) / span - 1.0;
        [s(p[0]), s(p[1]), s(p[2]), (t - self.t_min) / (self.t_max - self.t_min)]
    }

    pub fn normalize_voltage(&self, v: f64) -> f64 {
        (v - self.v_mu) / self.v_sigma
    }

    pub fn denormalize_voltage(&self, v_norm: f64) -> f64 {
        v_norm * self.v_sigma + self.v_mu
    }

    /// Replaces the voltage statistics, keeping the coordinate bounds.
    pub fn with_voltage_stats(self, voltages: &[f64]) -> Result<Self> {
        let (v_mu, v_sigma) = voltage_stats(voltages)?;
        Ok(NormalizationParams { v_mu, v_sigma, ..self })
    }
}

/// Fits joint spatial extrema, the time span, and the voltage mean and
/// population standard deviation.
pub fn fit_normalization(
    train_positions: &[[f64; 3]],
    t_min: f64,
    t_max: f64,
    train_voltages: &[f64],
) -> Result<NormalizationParams> {
    let (s_min, s_max) = spatial_extrema(train_positions)?;
    if !(t_max > t_min) {
        return Err(NbfError::invalid(format!("t_max ({t_max}) must exceed t_min ({t_min})")));
    }
    let (v_mu, v_sigma) = voltage_stats(train_voltages)?;
    Ok(NormalizationParams {
        s_min,
        s_max,
        t_min,
        t_max,
        v_mu,
        v_sigma,
    })
}

pub fn spatial_extrema(positions: &[[f64; 3]]) -> Result<(f64, f64)> {
    if positions.is_empty() {
        return Err(NbfError::invalid("no training positions"));
    }
    let (lo, hi) = positions
        .iter()
        .flatten()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &c| (lo.min(c), hi.max(c)));
    if !(hi > lo) {
        return Err(NbfError::DegenerateGeometry(
            "all training coordinates are identical".into(),
        ));
    }
    Ok((lo, hi))
}

pub fn voltage_stats(voltages: &[f64]) -> Result<(f64, f64)> {
    if voltages.is_empty() {
        return Err(NbfError::invalid("no training voltages"));
    }
    let n = voltages.len() as f64;
    let mu = voltages.iter().sum::<f64>() / n;
    let var = voltages.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / n;
    let sigma = var.sqrt();
    if !(sigma > 0.0) || sigma <= mu.abs() * 1e-14 {
        return Err(NbfError::DegenerateSignal("training voltages have zero variance".into()));
    }
    Ok((mu, sigma))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PeVariant {
    /// Rows of B drawn i.i.d. from N(0, sigma_B^2).
    Gaussian,
    /// Axis-aligned octaves: for each axis, frequencies 2^0 .. 2^(K-1).
    LogLevels,
}

/// Frequency matrix `B` (m x 4, row-major) of the positional encoding.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FourierBasis {
    pub variant: PeVariant,
    pub m: usize,
    pub sigma_b: f64,
    /// Extra multiplier on the time column. 1.0 keeps B isotropic.
    pub time_scale: f64,
    pub seed: u64,
    pub b: Vec<f64>,
}

/// Samples a Gaussian frequency matrix; entries are taken from a ChaCha8
/// stream seeded with `seed`, in row-major order.
pub fn sample_fourier_basis(m: usize, sigma_b: f64, seed: u64) -> Result<FourierBasis> {
    sample_fourier_basis_scaled(m, sigma_b, 1.0, seed)
}

/// As [`sample_fourier_basis`], with the time column additionally scaled by
/// `time_scale`. The underlying Gaussian stream is unchanged.
pub fn sample_fourier_basis_scaled(
    m: usize,
    sigma_b: f64,
    time_scale: f64,
    seed: u64,
) -> Result<FourierBasis> {
    if m == 0 {
        return Err(NbfError::invalid("m must be at least 1"));
    }
    if !(sigma_b > 0.0) || !sigma_b.is_finite() {
        return Err(NbfError::invalid(format!("sigma_B must be positive, got {sigma_b}")));
    }
    if !(time_scale > 0.0) || !time_scale.is_finite() {
        return Err(NbfError::invalid(format!("time scale must be positive, got {time_scale}")));
    }
    let normal = Normal::new(0.0, sigma_b).expect("sigma checked above");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut b: Vec<f64> = (0..m * 4).map(|_| normal.sample(&mut rng)).collect();
    for row in b.chunks_exact_mut(4) {
        row[3] *= time_scale;
    }
    Ok(FourierBasis {
        variant: PeVariant::Gaussian,
        m,
        sigma_b,
        time_scale,
        seed,
        b,
    })
}

/// Deterministic axis-aligned basis with `levels` octaves per axis (m = 4 * levels).
pub fn log_level_basis(levels: usize) -> Result<FourierBasis> {
    if levels == 0 || levels > 52 {
        return Err(NbfError::invalid(format!("levels must be in 1..=52, got {levels}")));
    }
    let m = 4 * levels;
    let mut b = vec![0.0; m * 4];
    for axis in 0..4 {
        for k in 0..levels {
            b[(axis * levels + k) * 4 + axis] = (1u64 << k) as f64;
        }
    }
    Ok(FourierBasis {
        variant: PeVariant::LogLevels,
        m,
        sigma_b: 1.0,
        time_scale: 1.0,
        seed: 0,
        b,
    })
}

impl FourierBasis {
    pub fn output_dim(&self) -> usize {
        2 * self.m
    }

    pub fn validate(&self) -> Result<()> {
        if self.m == 0 || self.b.len() != self.m * 4 || self.b.iter().any(|v| !v.is_finite()) {
            return Err(NbfError::invalid("frequency matrix must be m x 4 and finite"));
        }
        Ok(())
    }

    /// Writes `[cos(2 pi B v) ; sin(2 pi B v)]` into `out` (length 2m).
    pub fn encode_into(&self, v: [f64; 4], out: &mut [f64]) {
        debug_assert_eq!(out.len(), 2 * self.m);
        let (cos_part, sin_part) = out.split_at_mut(self.m);
        for (i, row) in self.b.chunks_exact(4).enumerate() {
            let phase = std::f64::consts::TAU
                * (row[0] * v[0] + row[1] * v[1] + row[2] * v[2] + row[3] * v[3]);
            let (s, c) = phase.sin_cos();
            cos_part[i] = c;
            sin_part[i] = s;
        }
    }
}

pub fn fourier_encode(v: [f64; 4], basis: &FourierBasis) -> Vec<f64> {
    let mut out = vec![0.0; basis.output_dim()];
    basis.encode_into(v, &mut out);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn params() -> NormalizationParams {
        NormalizationParams {
            s_min: -0.1,
            s_max: 0.1,
            t_min: 3.0,
            t_max: 6.0,
            v_mu: 1e-6,
            v_sigma: 2e-5,
        }
    }

    #[test]
    fn extrema_are_joint() {
        let pos = [[-0.1, 0.02, 0.0], [0.05, 0.1, 0.03], [0.0, -0.04, 0.08]];
        let p = fit_normalization(&pos, 0.0, 1.0, &[-1.0, 1.0]).unwrap();
        assert_eq!((p.s_min, p.s_max), (-0.1, 0.1));
        assert_eq!((p.v_mu, p.v_sigma), (0.0, 1.0));
    }

    #[test]
    fn degenerate_inputs() {
        let pos = [[0.1, 0.1, 0.1]];
        assert!(matches!(
            fit_normalization(&pos, 0.0, 1.0, &[0.0, 1.0]),
            Err(NbfError::DegenerateGeometry(_))
        ));
        let pos = [[0.0, 0.0, 0.0], [0.1, 0.0, 0.0]];
        assert!(matches!(
            fit_normalization(&pos, 0.0, 1.0, &[3e-6; 10]),
            Err(NbfError::DegenerateSignal(_))
        ));
        assert!(fit_normalization(&pos, 1.0, 1.0, &[0.0, 1.0]).is_err());
    }

    #[test]
    fn coordinate_endpoints() {
        let p = params();
        let lo = p.normalize_coords([-0.1, 0.0, 0.1], 3.0);
        assert_eq!(lo, [-1.0, 0.0, 1.0, 0.0]);
        let hi = p.normalize_coords([0.1, 0.1, 0.1], 6.0);
        assert_eq!(hi[3], 1.0);
        assert_eq!(hi[0], 1.0);
        // Extrapolation is not clamped.
        let out = p.normalize_coords([0.2, 0.0, 0.0], 9.0);
        assert!((out[0] - 2.0).abs() < 1e-12 && (out[3] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn voltage_unit_values() {
        let p = params();
        assert_eq!(p.normalize_voltage(p.v_mu), 0.0);
        assert_eq!(p.normalize_voltage(p.v_mu + p.v_sigma), 1.0);
        let v = 37.5e-6;
        let back = p.denormalize_voltage(p.normalize_voltage(v));
        assert!(((back - v) / v).abs() < 1e-12);
    }

    #[test]
    fn basis_determinism_and_shape() {
        let a = sample_fourier_basis(16, 10.0, 42).unwrap();
        let b = sample_fourier_basis(16, 10.0, 42).unwrap();
        assert_eq!(a.b.len(), 16 * 4);
        assert!(a.b.iter().zip(&b.b).all(|(x, y)| x.to_bits() == y.to_bits()));
        let c = sample_fourier_basis(16, 10.0, 43).unwrap();
        assert_ne!(a.b, c.b);
        assert!(sample_fourier_basis(0, 1.0, 0).is_err());
        assert!(sample_fourier_basis(4, 0.0, 0).is_err());
        assert!(sample_fourier_basis(4, -1.0, 0).is_err());
    }

    #[test]
    fn basis_mean_is_small() {
        let basis = sample_fourier_basis(4096, 1.0, 7).unwrap();
        let mean = basis.b.iter().sum::<f64>() / basis.b.len() as f64;
        assert!(mean.abs() < 0.05, "mean {mean}");
        let var = basis.b.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / basis.b.len() as f64;
        assert!((var - 1.0).abs() < 0.05, "variance {var}");
    }

    #[test]
    fn encode_origin() {
        let basis = sample_fourier_basis(8, 10.0, 1).unwrap();
        let g = fourier_encode([0.0; 4], &basis);
        assert!(g[..8].iter().all(|&c| c == 1.0));
        assert!(g[8..].iter().all(|&s| s == 0.0));
    }

    #[test]
    fn encode_quarter_period() {
        let basis = FourierBasis {
            variant: PeVariant::Gaussian,
            m: 1,
            sigma_b: 1.0,
            time_scale: 1.0,
            seed: 0,
            b: vec![1.0, 0.0, 0.0, 0.0],
        };
        let g = fourier_encode([0.25, 0.0, 0.0, 0.0], &basis);
        assert!(g[0].abs() < 1e-15);
        assert!((g[1] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn log_levels_layout() {
        let basis = log_level_basis(3).unwrap();
        assert_eq!(basis.m, 12);
        // Row for the time axis, level 2.
        assert_eq!(&basis.b[(3 * 3 + 2) * 4..(3 * 3 + 2) * 4 + 4], &[0.0, 0.0, 0.0, 4.0]);
    }

    #[test]
    fn time_scale_only_touches_time_column() {
        let iso = sample_fourier_basis(32, 2.0, 5).unwrap();
        let aniso = sample_fourier_basis_scaled(32, 2.0, 10.0, 5).unwrap();
        for (a, b) in iso.b.chunks_exact(4).zip(aniso.b.chunks_exact(4)) {
            assert_eq!(&a[..3], &b[..3]);
            assert_eq!(a[3] * 10.0, b[3]);
        }
    }

    proptest! {
        #[test]
        fn pythagorean_identity(v in prop::array::uniform4(-3.0f64..3.0), seed in any::<u64>()) {
            let basis = sample_fourier_basis(8, 10.0, seed).unwrap();
            let g = fourier_encode(v, &basis);
            let norm2: f64 = g.iter().map(|x| x * x).sum();
            prop_assert!((norm2 - 8.0).abs() < 1e-12);
        }

        #[test]
        fn normalization_is_monotone(a in -0.2f64..0.2, d in 1e-6f64..0.1, axis in 0usize..3) {
            let p = params();
            let mut lo = [0.0; 3];
            let mut hi = [0.0; 3];
            lo[axis] = a;
            hi[axis] = a + d;
            prop_assert!(p.normalize_coords(hi, 4.0)[axis] > p.normalize_coords(lo, 4.0)[axis]);
        }

        #[test]
        fn voltage_round_trip(v in -1e-3f64..1e-3, mu in -1e-4f64..1e-4, sigma in 1e-7f64..1e-3) {
            let p = NormalizationParams { v_mu: mu, v_sigma: sigma, ..params() };
            let back = p.denormalize_voltage(p.normalize_voltage(v));
            prop_assert!((back - v).abs() <= 1e-12 * v.abs().max(mu.abs()).max(1e-30) + 1e-24);
        }
    }
}
