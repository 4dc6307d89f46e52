//! Analytic ground-truth fields: sums of Gaussian spatial bumps, each
//! oscillating at its own frequency. Exact at any `(p, t)`, so held-out and
//! virtual electrodes can be scored against the noise-free truth.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{NbfError, Result};
use crate::recording::{Electrode, ElectrodeLayout, Recording};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Source {
    pub center: [f64; 3],
    pub spatial_sigma: f64,
    pub amplitude: f64,
    pub frequency: f64,
    pub phase: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticField {
    pub sources: Vec<Source>,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl SyntheticField {
    pub fn validate(&self) -> Result<()> {
        for (i, s) in self.sources.iter().enumerate() {
            if !(s.spatial_sigma > 0.0) || !s.spatial_sigma.is_finite() {
                return Err(NbfError::invalid(format!(
                    "sources[{i}].spatial_sigma must be positive, got {}",
                    s.spatial_sigma
                )));
            }
            if !(s.frequency >= 0.0) || !s.frequency.is_finite() {
                return Err(NbfError::invalid(format!(
                    "sources[{i}].frequency must be non-negative, got {}",
                    s.frequency
                )));
            }
            if !s.amplitude.is_finite() || !s.phase.is_finite() || s.center.iter().any(|c| !c.is_finite()) {
                return Err(NbfError::invalid(format!("sources[{i}] has non-finite fields")));
            }
        }
        if !(self.noise_sigma >= 0.0) || !self.noise_sigma.is_finite() {
            return Err(NbfError::invalid(format!(
                "noise_sigma must be non-negative, got {}",
                self.noise_sigma
            )));
        }
        Ok(())
    }

    /// Noise-free voltage at `p` and time `t`.
    pub fn eval_field(&self, p: [f64; 3], t: f64) -> f64 {
        self.sources
            .iter()
            .map(|s| {
                let d2 = (0..3).map(|k| (p[k] - s.center[k]).powi(2)).sum::<f64>();
                let spatial = (-d2 / (2.0 * s.spatial_sigma * s.spatial_sigma)).exp();
                s.amplitude * spatial * (std::f64::consts::TAU * s.frequency * t + s.phase).sin()
            })
            .sum()
    }

    /// Noise-free recording starting at t = 0.
    pub fn clean_recording(&self, layout: &ElectrodeLayout, sample_rate: f64, duration: f64) -> Result<Recording> {
        self.validate()?;
        let n = sample_count(sample_rate, duration)?;
        let mut samples = Vec::with_capacity(layout.len() * n);
        for e in layout.iter() {
            samples.extend((0..n).map(|k| self.eval_field(e.pos, k as f64 / sample_rate)));
        }
        Recording::from_flat(layout.clone(), sample_rate, 0.0, n, samples)
    }

    /// Samples the field and adds white Gaussian noise drawn channel by
    /// channel from a ChaCha8 stream seeded with `seed`.
    pub fn sample_recording(&self, layout: &ElectrodeLayout, sample_rate: f64, duration: f64) -> Result<Recording> {
        let clean = self.clean_recording(layout, sample_rate, duration)?;
        if self.noise_sigma == 0.0 {
            return Ok(clean);
        }
        let normal = Normal::new(0.0, self.noise_sigma).expect("validated sigma");
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let noisy: Vec<f64> = clean.samples().iter().map(|v| v + normal.sample(&mut rng)).collect();
        Recording::from_flat(layout.clone(), sample_rate, 0.0, clean.n_samples(), noisy)
    }

    /// Mean squared clean voltage over the layout and sampling grid.
    pub fn signal_power(&self, layout: &ElectrodeLayout, sample_rate: f64, duration: f64) -> Result<f64> {
        let clean = self.clean_recording(layout, sample_rate, duration)?;
        let s = clean.samples();
        Ok(s.iter().map(|v| v * v).sum::<f64>() / s.len().max(1) as f64)
    }

    /// Sets `noise_sigma` so the recording's signal-to-noise ratio is `snr_db`.
    pub fn with_snr(mut self, layout: &ElectrodeLayout, sample_rate: f64, duration: f64, snr_db: f64) -> Result<Self> {
        let power = self.signal_power(layout, sample_rate, duration)?;
        self.noise_sigma = (power / 10f64.powf(snr_db / 10.0)).sqrt();
        Ok(self)
    }
}

fn sample_count(sample_rate: f64, duration: f64) -> Result<usize> {
    if !(duration > 0.0) || !duration.is_finite() {
        return Err(NbfError::invalid(format!("duration must be positive, got {duration}")));
    }
    if !(sample_rate > 0.0) || !sample_rate.is_finite() {
        return Err(NbfError::invalid(format!("sample_rate must be positive, got {sample_rate}")));
    }
    Ok(((duration * sample_rate).round() as usize).max(1))
}

/// `n` near-uniform points on the upper hemisphere (z >= center z) from a
/// spherical Fibonacci lattice, labelled `S000`, `S001`, ...
pub fn fibonacci_montage(n: usize, center: [f64; 3], radius: f64) -> Result<ElectrodeLayout> {
    if n < 4 {
        return Err(NbfError::invalid(format!("need at least 4 electrodes, got {n}")));
    }
    if !(radius > 0.0) || !radius.is_finite() {
        return Err(NbfError::invalid("montage radius must be positive"));
    }
    let golden_angle = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    let electrodes = (0..n)
        .map(|i| {
            let z = 1.0 - (i as f64 + 0.5) / n as f64;
            let rho = (1.0 - z * z).sqrt();
            let phi = golden_angle * i as f64;
            Electrode::new(
                format!("S{i:03}"),
                [
                    center[0] + radius * rho * phi.cos(),
                    center[1] + radius * rho * phi.sin(),
                    center[2] + radius * z,
                ],
            )
        })
        .collect();
    ElectrodeLayout::new(electrodes)
}

/// A complete synthetic benchmark: field, montage and sampling grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bench {
    pub field: SyntheticField,
    pub layout: ElectrodeLayout,
    pub sample_rate: f64,
    pub duration: f64,
}

pub const HEAD_RADIUS: f64 = 0.09;

/// Five scalp-localized sources at 2, 6, 10, 19 and 31 Hz on a 64-electrode
/// hemisphere of radius 9 cm, sampled at 128 Hz for 9 s. Noise-free; see
/// [`Bench::with_snr`].
pub fn default_bench() -> Bench {
    let deg = std::f64::consts::PI / 180.0;
    let src = |polar: f64, azimuth: f64, sigma: f64, amp_uv: f64, freq: f64, phase: f64| {
        let r = 0.07;
        let (st, ct) = (polar * deg).sin_cos();
        Source {
            center: [r * st * (azimuth * deg).cos(), r * st * (azimuth * deg).sin(), r * ct],
            spatial_sigma: sigma,
            amplitude: amp_uv * 1e-6,
            frequency: freq,
            phase,
        }
    };
    Bench {
        field: SyntheticField {
            sources: vec![
                src(20.0, 0.0, 0.030, 50.0, 2.0, 0.0),
                src(50.0, 70.0, 0.035, 30.0, 6.0, 0.5),
                src(55.0, 200.0, 0.040, 40.0, 10.0, 1.0),
                src(65.0, 300.0, 0.045, 20.0, 19.0, 1.5),
                src(35.0, 140.0, 0.050, 10.0, 31.0, 2.0),
            ],
            noise_sigma: 0.0,
            seed: 0,
        },
        layout: fibonacci_montage(64, [0.0; 3], HEAD_RADIUS).expect("valid preset montage"),
        sample_rate: 128.0,
        duration: 9.0,
    }
}

impl Bench {
    pub fn with_snr(mut self, snr_db: f64, seed: u64) -> Result<Self> {
        self.field.seed = seed;
        self.field = self.field.with_snr(&self.layout, self.sample_rate, self.duration, snr_db)?;
        Ok(self)
    }

    pub fn recording(&self) -> Result<Recording> {
        self.field.sample_recording(&self.layout, self.sample_rate, self.duration)
    }

    pub fn clean(&self) -> Result<Recording> {
        self.field.clean_recording(&self.layout, self.sample_rate, self.duration)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_source() -> SyntheticField {
        SyntheticField {
            sources: vec![Source {
                center: [0.0, 0.0, 0.08],
                spatial_sigma: 0.03,
                amplitude: 25e-6,
                frequency: 5.0,
                phase: 0.0,
            }],
            noise_sigma: 0.0,
            seed: 1,
        }
    }

    #[test]
    fn empty_field_is_zero() {
        let f = SyntheticField { sources: vec![], noise_sigma: 0.0, seed: 0 };
        assert_eq!(f.eval_field([0.01, 0.02, 0.03], 1.7), 0.0);
    }

    #[test]
    fn peak_value() {
        let f = one_source();
        // sin(2 pi 5 t) = 1 at t = 1/20.
        let v = f.eval_field([0.0, 0.0, 0.08], 0.05);
        assert!((v - 25e-6).abs() < 1e-18);
    }

    #[test]
    fn mirrored_sources_cancel() {
        let mut f = one_source();
        f.sources[0].center = [0.03, 0.0, 0.07];
        let mut mirror = f.sources[0].clone();
        mirror.center = [-0.03, 0.0, 0.07];
        mirror.amplitude = -mirror.amplitude;
        f.sources.push(mirror);
        for t in [0.0, 0.013, 0.4] {
            assert!(f.eval_field([0.0, 0.05, 0.06], t).abs() < 1e-15);
        }
    }

    #[test]
    fn noiseless_samples_are_exact() {
        let f = one_source();
        let layout = fibonacci_montage(8, [0.0; 3], 0.09).unwrap();
        let r = f.sample_recording(&layout, 64.0, 1.0).unwrap();
        for (c, e) in layout.iter().enumerate() {
            for k in 0..64 {
                assert_eq!(r.channel(c)[k], f.eval_field(e.pos, k as f64 / 64.0));
            }
        }
    }

    #[test]
    fn seeded_noise_is_deterministic() {
        let mut f = one_source();
        f.noise_sigma = 1e-6;
        let layout = fibonacci_montage(8, [0.0; 3], 0.09).unwrap();
        assert_eq!(f.sample_recording(&layout, 64.0, 1.0).unwrap(), f.sample_recording(&layout, 64.0, 1.0).unwrap());
        f.seed = 2;
        let other = f.sample_recording(&layout, 64.0, 1.0).unwrap();
        f.seed = 1;
        assert_ne!(f.sample_recording(&layout, 64.0, 1.0).unwrap(), other);
    }

    #[test]
    fn snr_calibration() {
        let bench = default_bench().with_snr(6.0, 3).unwrap();
        let noisy = bench.recording().unwrap();
        let clean = bench.clean().unwrap();
        assert!(noisy.samples().len() >= 10_000);
        let signal: f64 = clean.samples().iter().map(|v| v * v).sum();
        let noise: f64 = noisy.samples().iter().zip(clean.samples()).map(|(a, b)| (a - b).powi(2)).sum();
        let snr = 10.0 * (signal / noise).log10();
        assert!((snr - 6.0).abs() < 0.5, "measured {snr} dB");
    }

    #[test]
    fn montage_properties() {
        assert!(fibonacci_montage(3, [0.0; 3], 1.0).is_err());
        let four = fibonacci_montage(4, [0.0; 3], 1.0).unwrap();
        assert_eq!(four.len(), 4);
        let c = [0.01, -0.02, 0.03];
        let m = fibonacci_montage(64, c, 0.09).unwrap();
        for e in m.iter() {
            let r = ((e.pos[0] - c[0]).powi(2) + (e.pos[1] - c[1]).powi(2) + (e.pos[2] - c[2]).powi(2)).sqrt();
            assert!((r - 0.09).abs() < 1e-12);
            assert!(e.pos[2] >= c[2]);
        }
        assert_eq!(m.electrodes()[0].label, "S000");
        assert_eq!(m.electrodes()[63].label, "S063");
        // Exhaustive pairwise angular separation.
        let dirs: Vec<[f64; 3]> = m
            .iter()
            .map(|e| [(e.pos[0] - c[0]) / 0.09, (e.pos[1] - c[1]) / 0.09, (e.pos[2] - c[2]) / 0.09])
            .collect();
        let mut min_angle = f64::INFINITY;
        for i in 0..dirs.len() {
            for j in i + 1..dirs.len() {
                let dot: f64 = (0..3).map(|k| dirs[i][k] * dirs[j][k]).sum();
                min_angle = min_angle.min(dot.clamp(-1.0, 1.0).acos());
            }
        }
        assert!(min_angle.to_degrees() > 10.0, "min angle {}", min_angle.to_degrees());
        assert_eq!(fibonacci_montage(64, c, 0.09).unwrap(), m);
    }

    #[test]
    fn validation_errors() {
        let mut f = one_source();
        f.sources[0].spatial_sigma = 0.0;
        assert!(f.validate().is_err());
        let mut f = one_source();
        f.sources[0].frequency = -1.0;
        assert!(f.validate().is_err());
    }

    #[test]
    fn bench_shape() {
        let b = default_bench();
        assert_eq!(b.layout.len(), 64);
        assert_eq!(b.field.sources.len(), 5);
        let r = b.clean().unwrap();
        assert_eq!(r.n_samples(), 9 * 128);
    }
}
