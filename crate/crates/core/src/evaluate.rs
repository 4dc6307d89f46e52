//! Held-out channel evaluation of NBF against the interpolation baselines.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::baselines::{interpolate_recording, InterpolationMethod, RbfConfig, SsiConfig};
use crate::error::{NbfError, Result};
use crate::metrics::{
    compute_metrics, ChannelEntry, EvalReport, MethodReport, Protocol, WindowEntry, DEFAULT_SNR_BOUNDS, SNR_DEFINITION,
};
use crate::recording::{holdout_split, segment_windows, ElectrodeLayout, Recording, TimeWindow};
use crate::training::{train_recording, TrainConfig, TrainReport};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum Method {
    Nbf,
    Ssi(SsiConfig),
    Rbf(RbfConfig),
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::Nbf => "nbf",
            Method::Ssi(_) => "ssi",
            Method::Rbf(_) => "rbf",
        }
    }

    /// Parses `nbf`, `ssi` or `rbf` with default settings.
    pub fn parse(name: &str) -> Result<Self> {
        match name.trim() {
            "nbf" => Ok(Method::Nbf),
            "ssi" => Ok(Method::Ssi(SsiConfig::default())),
            "rbf" => Ok(Method::Rbf(RbfConfig::default())),
            other => Err(NbfError::invalid(format!("unknown method '{other}' (expected nbf, ssi or rbf)"))),
        }
    }
}

/// Predicted held-out channels of one method, on the recording's time grid.
#[derive(Clone, Debug)]
pub struct MethodOutput {
    pub predicted: Recording,
    /// Per-window training reports (NBF only).
    pub train_reports: Vec<TrainReport>,
}

#[derive(Clone, Debug)]
pub struct Evaluation {
    pub report: EvalReport,
    pub outputs: BTreeMap<String, MethodOutput>,
}

/// Trains or fits every method on the electrodes not in `held_out`, predicts
/// the held-out channels and scores them.
///
/// Scores are computed against `reference` when given (for example the
/// noise-free synthetic signal), otherwise against the recording itself.
pub fn evaluate(
    recording: &Recording,
    held_out: &BTreeSet<String>,
    methods: &[Method],
    config: &TrainConfig,
    reference: Option<&Recording>,
    snr_bounds: (f64, f64),
) -> Result<Evaluation> {
    if held_out.is_empty() {
        return Err(NbfError::invalid("at least one held-out electrode is required"));
    }
    if methods.is_empty() {
        return Err(NbfError::invalid("no evaluation methods requested"));
    }
    let (train, query) = holdout_split(recording.layout(), held_out)?;
    let target = reference.unwrap_or(recording).select(&query)?;
    if target.n_samples() != recording.n_samples() {
        return Err(NbfError::invalid("reference recording has a different sample count"));
    }
    config.validate()?;
    let windows = segment_windows(recording, config.window_seconds)?;

    let mut reports = BTreeMap::new();
    let mut outputs = BTreeMap::new();
    for method in methods {
        let name = method.name();
        if reports.contains_key(name) {
            return Err(NbfError::invalid(format!("method '{name}' requested twice")));
        }
        let attribute = |e: NbfError| NbfError::InMethod {
            method: name.into(),
            source: Box::new(e),
        };
        let output = run_method(recording, &train, &query, method, config).map_err(attribute)?;
        let report = score(&output.predicted, &target, &windows, snr_bounds).map_err(attribute)?;
        reports.insert(name.to_string(), report);
        outputs.insert(name.to_string(), output);
    }
    let report = EvalReport {
        methods: reports,
        protocol: Protocol {
            held_out: query.labels().iter().map(|s| s.to_string()).collect(),
            train_electrodes: train.len(),
            window_seconds: config.window_seconds,
            n_windows: windows.len(),
            snr_bounds_db: snr_bounds,
            snr_definition: SNR_DEFINITION.into(),
            variance: "population".into(),
            r2_reported: "max(raw, 0); aggregates use the clamped value".into(),
            target: if reference.is_some() { "reference" } else { "recording" }.into(),
        },
    };
    report.verify_aggregates()?;
    Ok(Evaluation { report, outputs })
}

/// `evaluate` with the default SNR outlier bounds.
pub fn evaluate_default(
    recording: &Recording,
    held_out: &BTreeSet<String>,
    methods: &[Method],
    config: &TrainConfig,
    reference: Option<&Recording>,
) -> Result<Evaluation> {
    evaluate(recording, held_out, methods, config, reference, DEFAULT_SNR_BOUNDS)
}

fn run_method(
    recording: &Recording,
    train: &ElectrodeLayout,
    query: &ElectrodeLayout,
    method: &Method,
    config: &TrainConfig,
) -> Result<MethodOutput> {
    match method {
        Method::Nbf => {
            let run = train_recording(recording, config, train, Some(query), Some(query)).map_err(|f| f.error)?;
            Ok(MethodOutput {
                predicted: run.synthesized.expect("non-empty query synthesizes a recording"),
                train_reports: run.reports,
            })
        }
        Method::Ssi(cfg) => Ok(MethodOutput {
            predicted: interpolate_recording(recording, train, query, &InterpolationMethod::Ssi(cfg.clone()))?,
            train_reports: Vec::new(),
        }),
        Method::Rbf(cfg) => Ok(MethodOutput {
            predicted: interpolate_recording(recording, train, query, &InterpolationMethod::Rbf(cfg.clone()))?,
            train_reports: Vec::new(),
        }),
    }
}

fn score(predicted: &Recording, target: &Recording, windows: &[TimeWindow], bounds: (f64, f64)) -> Result<MethodReport> {
    let labels = target.layout().labels();
    let entry = |label: &str, range: std::ops::Range<usize>| -> Result<ChannelEntry> {
        let p = predicted
            .channel_by_label(label)
            .ok_or_else(|| NbfError::invalid(format!("no prediction for '{label}'")))?;
        let t = target.channel_by_label(label).expect("label taken from target");
        Ok(ChannelEntry {
            label: label.to_string(),
            metrics: compute_metrics(&p[range.clone()], &t[range])?,
        })
    };
    let channels = labels
        .iter()
        .map(|l| entry(l, 0..target.n_samples()))
        .collect::<Result<Vec<_>>>()?;
    let windows = windows
        .iter()
        .filter(|w| w.len() >= 2)
        .map(|w| {
            Ok(WindowEntry {
                index: w.index,
                t_start: w.t_start,
                t_end: w.t_end,
                channels: labels.iter().map(|l| entry(l, w.sample_range())).collect::<Result<Vec<_>>>()?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    MethodReport::build(channels, windows, bounds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::fibonacci_montage;

    fn held(labels: &[&str]) -> BTreeSet<String> {
        labels.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn constant_recording_with_ssi() {
        let layout = fibonacci_montage(12, [0.0; 3], 0.09).unwrap();
        let rec = Recording::new(layout, 10.0, 0.0, vec![vec![7e-6; 20]; 12]).unwrap();
        let eval = evaluate_default(&rec, &held(&["S003", "S007"]), &[Method::parse("ssi").unwrap()], &TrainConfig::desk(), None).unwrap();
        let ssi = &eval.report.methods["ssi"];
        assert!(ssi.channels.iter().all(|c| c.metrics.degenerate_variance && c.metrics.r2 == 1.0));
        assert!(ssi.aggregate.is_none());
        assert_eq!(ssi.excluded.len(), 2);
    }

    #[test]
    fn all_methods_reported() {
        let layout = fibonacci_montage(16, [0.0; 3], 0.09).unwrap();
        let rows = layout
            .iter()
            .map(|e| (0..24).map(|i| 1e-5 * (e.pos[0] * 10.0 + e.pos[1] * 5.0) * (i as f64 * 0.4).sin() + 1e-7).collect())
            .collect();
        let rec = Recording::new(layout, 8.0, 0.0, rows).unwrap();
        let cfg = TrainConfig {
            depth: 2,
            width: 8,
            m: 4,
            epochs_first_window: 3,
            epochs_subsequent: 2,
            window_seconds: 1.0,
            ..TrainConfig::desk()
        };
        let methods: Vec<Method> = ["nbf", "ssi", "rbf"].iter().map(|m| Method::parse(m).unwrap()).collect();
        let eval = evaluate_default(&rec, &held(&["S004", "S009"]), &methods, &cfg, None).unwrap();
        assert_eq!(eval.report.methods.len(), 3);
        assert_eq!(eval.report.protocol.n_windows, 3);
        assert_eq!(eval.report.methods["rbf"].windows.len(), 3);
        assert_eq!(eval.outputs["nbf"].train_reports.len(), 3);
        eval.report.verify_aggregates().unwrap();
    }

    #[test]
    fn errors_name_the_method() {
        let layout = fibonacci_montage(8, [0.0; 3], 0.09).unwrap();
        let rec = Recording::new(layout, 10.0, 0.0, vec![vec![1e-6; 20]; 8]).unwrap();
        let err = evaluate_default(&rec, &held(&["S001"]), &[Method::Nbf], &TrainConfig::desk(), None).unwrap_err();
        assert!(err.to_string().starts_with("method nbf"), "{err}");
        assert!(matches!(err.root(), NbfError::DegenerateSignal(_)));
        assert!(Method::parse("kriging").is_err());
        assert!(evaluate_default(&rec, &held(&[]), &[Method::Nbf], &TrainConfig::desk(), None).is_err());
    }
}
