//! Reconstruction metrics and their aggregation into evaluation reports.
//!
//! Conventions: variances are population variances; SNR is
//! `10 log10(mean(y^2) / mean((y - y_hat)^2))`; reported R^2 is clamped at
//! zero while the raw value is kept alongside; NMSE is residual power over
//! target variance, so `r2_raw + nmse == 1`.

use std::collections::BTreeMap;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{NbfError, Result};

pub const SNR_DEFINITION: &str = "10*log10(mean(y^2)/mean((y-y_hat)^2))";
pub const DEFAULT_SNR_BOUNDS: (f64, f64) = (-20.0, 60.0);

/// Serializes non-finite floats as the strings "inf", "-inf" and "nan".
mod float_repr {
    use super::*;

    #[derive(Serialize, Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Str(String),
    }

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else if v.is_nan() {
            s.serialize_str("nan")
        } else if *v > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_str("-inf")
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Str(s) => match s.as_str() {
                "inf" => Ok(f64::INFINITY),
                "-inf" => Ok(f64::NEG_INFINITY),
                "nan" => Ok(f64::NAN),
                other => Err(serde::de::Error::custom(format!("bad float '{other}'"))),
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelMetrics {
    pub mse: f64,
    pub mae: f64,
    /// `max(r2_raw, 0)`.
    pub r2: f64,
    pub r2_raw: f64,
    /// `None` when the target has zero variance.
    pub pcc: Option<f64>,
    /// `+inf` when the residual is exactly zero.
    #[serde(with = "float_repr")]
    pub snr_db: f64,
    /// `None` when the target has zero variance.
    pub nmse: Option<f64>,
    /// Target variance is zero: R^2 falls back to 1 for a fit exact to 1e-10
    /// relative RMS and 0 otherwise, PCC and NMSE are undefined, and the channel is excludable.
    pub degenerate_variance: bool,
}

pub fn compute_metrics(predicted: &[f64], target: &[f64]) -> Result<ChannelMetrics> {
    if predicted.len() != target.len() {
        return Err(NbfError::invalid(format!(
            "prediction has {} samples, target has {}",
            predicted.len(),
            target.len()
        )));
    }
    if target.len() < 2 {
        return Err(NbfError::invalid("metrics need at least two samples"));
    }
    let n = target.len() as f64;
    let y_mean = target.iter().sum::<f64>() / n;
    let p_mean = predicted.iter().sum::<f64>() / n;
    let mut ss_res = 0.0;
    let mut abs_res = 0.0;
    let mut ss_tot = 0.0;
    let mut ss_pred = 0.0;
    let mut cross = 0.0;
    let mut power = 0.0;
    for (&p, &y) in predicted.iter().zip(target) {
        let r = y - p;
        ss_res += r * r;
        abs_res += r.abs();
        ss_tot += (y - y_mean) * (y - y_mean);
        ss_pred += (p - p_mean) * (p - p_mean);
        cross += (y - y_mean) * (p - p_mean);
        power += y * y;
    }
    let mse = ss_res / n;
    let mae = abs_res / n;
    let snr_db = if ss_res == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (power / ss_res).log10()
    };
    // Variance below rounding level of the mean counts as zero.
    let degenerate = ss_tot <= (y_mean * y_mean * n) * 1e-28 || ss_tot == 0.0;
    if degenerate {
        // Exact up to a relative RMS residual of 1e-10.
        let r2_raw = if ss_res <= 1e-20 * power { 1.0 } else { 0.0 };
        return Ok(ChannelMetrics {
            mse,
            mae,
            r2: r2_raw,
            r2_raw,
            pcc: None,
            snr_db,
            nmse: None,
            degenerate_variance: true,
        });
    }
    let nmse = ss_res / ss_tot;
    let r2_raw = 1.0 - nmse;
    let pcc = if ss_pred == 0.0 {
        0.0
    } else {
        (cross / (ss_tot.sqrt() * ss_pred.sqrt())).clamp(-1.0, 1.0)
    };
    Ok(ChannelMetrics {
        mse,
        mae,
        r2: r2_raw.max(0.0),
        r2_raw,
        pcc: Some(pcc),
        snr_db,
        nmse: Some(nmse),
        degenerate_variance: false,
    })
}

/// One value per metric; used for aggregate means and standard deviations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub mse: f64,
    pub mae: f64,
    pub r2: f64,
    pub r2_raw: f64,
    pub pcc: f64,
    pub snr_db: f64,
    pub nmse: f64,
}

impl MetricSummary {
    fn from_fn(f: impl Fn(&dyn Fn(&ChannelMetrics) -> f64) -> f64) -> Self {
        MetricSummary {
            mse: f(&|c| c.mse),
            mae: f(&|c| c.mae),
            r2: f(&|c| c.r2),
            r2_raw: f(&|c| c.r2_raw),
            pcc: f(&|c| c.pcc.unwrap_or(f64::NAN)),
            snr_db: f(&|c| c.snr_db),
            nmse: f(&|c| c.nmse.unwrap_or(f64::NAN)),
        }
    }

    fn values(&self) -> [f64; 7] {
        [self.mse, self.mae, self.r2, self.r2_raw, self.pcc, self.snr_db, self.nmse]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean: MetricSummary,
    pub std: MetricSummary,
    pub retained: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Exclusion {
    pub label: String,
    pub reason: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelEntry {
    pub label: String,
    #[serde(flatten)]
    pub metrics: ChannelMetrics,
}

/// Mean and population standard deviation over channels whose SNR lies in
/// `[low, high]` and whose target variance is nonzero. Dropped channels are
/// returned in the exclusion log.
pub fn aggregate(channels: &[ChannelEntry], snr_outlier_bounds: (f64, f64)) -> Result<(Aggregate, Vec<Exclusion>)> {
    let (low, high) = snr_outlier_bounds;
    let mut excluded = Vec::new();
    let mut kept: Vec<&ChannelMetrics> = Vec::new();
    for entry in channels {
        let c = &entry.metrics;
        if c.degenerate_variance {
            excluded.push(Exclusion {
                label: entry.label.clone(),
                reason: "zero target variance".into(),
            });
        } else if !(c.snr_db >= low && c.snr_db <= high) {
            excluded.push(Exclusion {
                label: entry.label.clone(),
                reason: format!("snr {} dB outside [{low}, {high}]", c.snr_db),
            });
        } else {
            let sum = c.r2_raw + c.nmse.expect("non-degenerate channel has nmse");
            if (sum - 1.0).abs() > 1e-12 {
                return Err(NbfError::invalid(format!(
                    "channel '{}' violates r2_raw + nmse = 1 ({sum})",
                    entry.label
                )));
            }
            kept.push(c);
        }
    }
    if kept.is_empty() {
        return Err(NbfError::EmptyAggregate);
    }
    let n = kept.len() as f64;
    let mean = MetricSummary::from_fn(|get| kept.iter().map(|c| get(c)).sum::<f64>() / n);
    let std = MetricSummary::from_fn(|get| {
        let mu = kept.iter().map(|c| get(c)).sum::<f64>() / n;
        (kept.iter().map(|c| (get(c) - mu).powi(2)).sum::<f64>() / n).sqrt()
    });
    Ok((
        Aggregate {
            mean,
            std,
            retained: kept.len(),
        },
        excluded,
    ))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WindowEntry {
    pub index: usize,
    pub t_start: f64,
    pub t_end: f64,
    pub channels: Vec<ChannelEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodReport {
    pub channels: Vec<ChannelEntry>,
    pub windows: Vec<WindowEntry>,
    /// `None` when every channel was excluded.
    pub aggregate: Option<Aggregate>,
    pub excluded: Vec<Exclusion>,
}

impl MethodReport {
    pub fn build(channels: Vec<ChannelEntry>, windows: Vec<WindowEntry>, snr_bounds: (f64, f64)) -> Result<Self> {
        let (aggregate, excluded) = match aggregate(&channels, snr_bounds) {
            Ok((agg, excl)) => (Some(agg), excl),
            Err(NbfError::EmptyAggregate) => (None, exclusions_only(&channels, snr_bounds)),
            Err(e) => return Err(e),
        };
        Ok(MethodReport {
            channels,
            windows,
            aggregate,
            excluded,
        })
    }
}

fn exclusions_only(channels: &[ChannelEntry], bounds: (f64, f64)) -> Vec<Exclusion> {
    channels
        .iter()
        .map(|e| Exclusion {
            label: e.label.clone(),
            reason: if e.metrics.degenerate_variance {
                "zero target variance".into()
            } else {
                format!("snr {} dB outside [{}, {}]", e.metrics.snr_db, bounds.0, bounds.1)
            },
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Protocol {
    pub held_out: Vec<String>,
    pub train_electrodes: usize,
    pub window_seconds: f64,
    pub n_windows: usize,
    pub snr_bounds_db: (f64, f64),
    pub snr_definition: String,
    pub variance: String,
    pub r2_reported: String,
    pub target: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub methods: BTreeMap<String, MethodReport>,
    pub protocol: Protocol,
}

impl EvalReport {
    /// Recomputes every aggregate from the retained channels and checks it
    /// matches the stored value within 1e-12 (relative for large magnitudes).
    pub fn verify_aggregates(&self) -> Result<()> {
        for (name, method) in &self.methods {
            let recomputed = aggregate(&method.channels, self.protocol.snr_bounds_db).ok();
            let ok = match (&method.aggregate, &recomputed) {
                (None, None) => true,
                (Some(a), Some((b, _))) => {
                    a.retained == b.retained
                        && a.mean.values().iter().chain(a.std.values().iter()).zip(
                            b.mean.values().iter().chain(b.std.values().iter()),
                        )
                        .all(|(x, y)| (x - y).abs() <= 1e-12 * x.abs().max(1.0) || (x.is_nan() && y.is_nan()))
                }
                _ => false,
            };
            if !ok {
                return Err(NbfError::invalid(format!("aggregate for method '{name}' does not match its channels")));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const UV: f64 = 1e-6;

    fn entry(label: &str, m: ChannelMetrics) -> ChannelEntry {
        ChannelEntry {
            label: label.into(),
            metrics: m,
        }
    }

    #[test]
    fn perfect_prediction() {
        let y = [1.0 * UV, 2.0 * UV, 3.0 * UV];
        let m = compute_metrics(&y, &y).unwrap();
        assert_eq!((m.mse, m.mae, m.r2), (0.0, 0.0, 1.0));
        assert!((m.pcc.unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(m.nmse, Some(0.0));
        assert_eq!(m.snr_db, f64::INFINITY);
    }

    #[test]
    fn hand_evaluated_pair() {
        // target (0, 2), predicted (1, 1): residuals (-1, 1), var(y) = 1, mean(y^2) = 2.
        let m = compute_metrics(&[1.0 * UV, 1.0 * UV], &[0.0, 2.0 * UV]).unwrap();
        assert!((m.mse - 1.0 * UV * UV).abs() < 1e-24);
        assert!((m.mae - 1.0 * UV).abs() < 1e-18);
        assert!(m.r2_raw.abs() < 1e-12);
        assert!((m.nmse.unwrap() - 1.0).abs() < 1e-12);
        assert!((m.snr_db - 3.010_299_956_639_812).abs() < 1e-9);
    }

    #[test]
    fn anti_correlated() {
        let y = [1.0, -2.0, 0.5, 0.5];
        let p: Vec<f64> = y.iter().map(|v| -v).collect();
        let m = compute_metrics(&p, &y).unwrap();
        assert!((m.pcc.unwrap() + 1.0).abs() < 1e-12);
        assert!(m.r2_raw < 0.0);
        assert_eq!(m.r2, 0.0);
    }

    #[test]
    fn degenerate_target() {
        let y = [7.0 * UV; 5];
        let exact = compute_metrics(&y, &y).unwrap();
        assert!(exact.degenerate_variance);
        assert_eq!(exact.r2, 1.0);
        assert!(exact.pcc.is_none() && exact.nmse.is_none());
        let off = compute_metrics(&[6.0 * UV; 5], &y).unwrap();
        assert_eq!(off.r2, 0.0);
    }

    #[test]
    fn rejects_bad_lengths() {
        assert!(compute_metrics(&[1.0], &[1.0]).is_err());
        assert!(compute_metrics(&[1.0, 2.0], &[1.0]).is_err());
    }

    #[test]
    fn singleton_and_duplicates() {
        let m = compute_metrics(&[1.0, 2.5, 2.0], &[1.0, 2.0, 3.0]).unwrap();
        let (agg, excl) = aggregate(&[entry("A", m.clone())], (f64::NEG_INFINITY, f64::INFINITY)).unwrap();
        assert!(excl.is_empty());
        assert_eq!(agg.mean.mse, m.mse);
        assert_eq!(agg.std.mse, 0.0);
        let (agg2, _) = aggregate(&[entry("A", m.clone()), entry("B", m.clone())], DEFAULT_SNR_BOUNDS).unwrap();
        assert!((agg2.mean.r2 - m.r2).abs() < 1e-15);
        assert_eq!(agg2.std.r2, 0.0);
    }

    #[test]
    fn outliers_are_logged() {
        let good = compute_metrics(&[1.0, 2.5, 2.0], &[1.0, 2.0, 3.0]).unwrap();
        let perfect = compute_metrics(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap();
        let (agg, excl) = aggregate(&[entry("A", good), entry("B", perfect)], DEFAULT_SNR_BOUNDS).unwrap();
        assert_eq!(agg.retained, 1);
        assert_eq!(excl.len(), 1);
        assert_eq!(excl[0].label, "B");
        let only_bad = compute_metrics(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap();
        assert!(matches!(
            aggregate(&[entry("B", only_bad)], DEFAULT_SNR_BOUNDS),
            Err(NbfError::EmptyAggregate)
        ));
    }

    #[test]
    fn json_keeps_infinite_snr() {
        let perfect = compute_metrics(&[1.0, 2.0], &[1.0, 2.0]).unwrap();
        let s = serde_json::to_string(&entry("Cz", perfect.clone())).unwrap();
        assert!(s.contains("\"snr_db\":\"inf\""), "{s}");
        let back: ChannelEntry = serde_json::from_str(&s).unwrap();
        assert_eq!(back.metrics, perfect);
    }

    proptest! {
        #[test]
        fn complementarity(seed_y in prop::collection::vec(-1e-4f64..1e-4, 4..64), noise in prop::collection::vec(-5e-5f64..5e-5, 64)) {
            let p: Vec<f64> = seed_y.iter().zip(&noise).map(|(y, e)| y + e).collect();
            let m = compute_metrics(&p, &seed_y).unwrap();
            if !m.degenerate_variance {
                prop_assert!((m.r2_raw + m.nmse.unwrap() - 1.0).abs() < 1e-12);
            }
        }

        #[test]
        fn pcc_scale_invariant(y in prop::collection::vec(-1.0f64..1.0, 4..32), k in 1e-3f64..1e3) {
            let p: Vec<f64> = y.iter().enumerate().map(|(i, v)| v + 0.1 * (i as f64).sin()).collect();
            let scaled: Vec<f64> = p.iter().map(|v| v * k).collect();
            let a = compute_metrics(&p, &y).unwrap();
            let b = compute_metrics(&scaled, &y).unwrap();
            if let (Some(pa), Some(pb)) = (a.pcc, b.pcc) {
                prop_assert!((pa - pb).abs() < 1e-12);
            }
        }

        #[test]
        fn ranges(y in prop::collection::vec(-1.0f64..1.0, 2..32), p in prop::collection::vec(-1.0f64..1.0, 32)) {
            let p = &p[..y.len()];
            let m = compute_metrics(p, &y).unwrap();
            prop_assert!(m.mse >= 0.0 && m.mae >= 0.0);
            prop_assert!((0.0..=1.0).contains(&m.r2));
            if let Some(c) = m.pcc {
                prop_assert!((-1.0..=1.0).contains(&c));
            }
        }

        #[test]
        fn offset_adds_square(y in prop::collection::vec(-1.0f64..1.0, 4..32), offset in 0.01f64..1.0) {
            // Zero-mean residual: prediction = target + centered perturbation.
            let n = y.len();
            let pert: Vec<f64> = (0..n).map(|i| 0.1 * ((i as f64) - (n as f64 - 1.0) / 2.0)).collect();
            let p: Vec<f64> = y.iter().zip(&pert).map(|(a, b)| a + b).collect();
            let shifted: Vec<f64> = p.iter().map(|v| v + offset).collect();
            let base = compute_metrics(&p, &y).unwrap().mse;
            let moved = compute_metrics(&shifted, &y).unwrap().mse;
            prop_assert!(moved > base);
            prop_assert!((moved - (base + offset * offset)).abs() < 1e-12);
        }
    }
}
