use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use nbf_core::checkpoint::{model_from_bytes, model_to_bytes};
use nbf_core::evaluate::{evaluate as run_evaluation, Method};
use nbf_core::metrics::DEFAULT_SNR_BOUNDS;
use nbf_core::recording::holdout_split;
use nbf_core::synthetic::{default_bench, fibonacci_montage, SyntheticField};
use nbf_core::training::train_recording;
use nbf_core::{ElectrodeLayout, FieldModel, Recording, TrainConfig, TrainReport};
use serde::{Deserialize, Serialize};

use crate::manifest::{read_file, sha256_hex, write_file, write_json, ManifestBuilder};
use crate::{CliError, CliResult, ConfigArgs, EvalArgs, GenArgs, SynthArgs, TrainArgs};

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct FibonacciSpec {
    n: usize,
    #[serde(default)]
    center: [f64; 3],
    radius: f64,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum MontageSpec {
    Fibonacci { fibonacci: FibonacciSpec },
    Electrodes(ElectrodeLayout),
}

/// Input of `gen-synthetic`.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SyntheticSpec {
    field: SyntheticField,
    montage: MontageSpec,
    sample_rate: f64,
    duration: f64,
    /// Overrides `field.noise_sigma` with the level for this SNR.
    #[serde(default)]
    snr_db: Option<f64>,
}

fn load_spec(spec: &str) -> CliResult<(SyntheticField, ElectrodeLayout, f64, f64, Option<f64>, Option<Vec<u8>>)> {
    if spec == "default-bench" {
        let b = default_bench();
        return Ok((b.field, b.layout, b.sample_rate, b.duration, Some(6.0), None));
    }
    let path = Path::new(spec);
    let bytes = read_file(path)?;
    let parsed: SyntheticSpec =
        serde_json::from_slice(&bytes).map_err(|e| CliError::validation(format!("spec {}: {e}", path.display())))?;
    let layout = match parsed.montage {
        MontageSpec::Fibonacci { fibonacci: f } => fibonacci_montage(f.n, f.center, f.radius)?,
        MontageSpec::Electrodes(l) => l,
    };
    Ok((parsed.field, layout, parsed.sample_rate, parsed.duration, parsed.snr_db, Some(bytes)))
}

pub fn gen_synthetic(args: &GenArgs, argv: &[String]) -> CliResult<()> {
    let mut manifest = ManifestBuilder::new(argv);
    let (mut field, layout, fs, duration, spec_snr, spec_bytes) = load_spec(&args.spec)?;
    if let Some(bytes) = spec_bytes {
        manifest.input(Path::new(&args.spec), &bytes);
    }
    if let Some(seed) = args.seed {
        field.seed = seed;
    }
    field.validate()?;
    if !(duration > 0.0) {
        return Err(CliError::validation(format!("duration must be positive, got {duration}")));
    }
    if let Some(snr) = args.snr_db.or(spec_snr) {
        field = field.with_snr(&layout, fs, duration, snr)?;
    }
    manifest.seed("noise", field.seed);

    let clean = field.clean_recording(&layout, fs, duration)?.to_bytes()?;
    let clean_digest = sha256_hex(&clean);
    let noisy = field.sample_recording(&layout, fs, duration)?.to_bytes()?;
    write_file(&args.out, &noisy)?;
    manifest.output(&args.out, &noisy);

    let montage_out = args.montage_out.clone().unwrap_or_else(|| sibling(&args.out, "montage.json"));
    let montage = write_json(&montage_out, &layout)?;
    manifest.output(&montage_out, &montage);
    if let Some(path) = &args.clean_out {
        write_file(path, &clean)?;
        manifest.output(path, &clean);
    }
    manifest.extra("clean_digest", clean_digest.clone().into());
    manifest.extra("noise_sigma", field.noise_sigma.into());
    manifest.write(&sibling(&args.out, "manifest.json"))?;
    println!("clean-sha256 {clean_digest}");
    Ok(())
}

/// `<path>.<suffix>` with the original extension replaced.
fn sibling(path: &Path, suffix: &str) -> PathBuf {
    path.with_extension(suffix)
}

fn load_config(args: &ConfigArgs, manifest: &mut ManifestBuilder) -> CliResult<TrainConfig> {
    let (mut config, digest) = match (&args.config, &args.preset) {
        (Some(path), _) => {
            let bytes = read_file(path)?;
            manifest.input(path, &bytes);
            (TrainConfig::from_json(&bytes)?, Some(sha256_hex(&bytes)))
        }
        (None, Some(name)) => (TrainConfig::preset(name)?, None),
        (None, None) => (TrainConfig::desk(), None),
    };
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    config.validate()?;
    manifest.config(&config, digest);
    Ok(config)
}

fn load_recording(path: &Path, manifest: &mut ManifestBuilder) -> CliResult<Recording> {
    let bytes = read_file(path)?;
    manifest.input(path, &bytes);
    Ok(Recording::from_bytes(&bytes)?)
}

#[derive(Serialize)]
struct TrainRunReport<'a> {
    held_out: Vec<String>,
    windows: &'a [TrainReport],
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<String>,
}

pub fn checkpoint_name(index: usize) -> String {
    format!("window_{index:05}.nbfm")
}

pub fn train(args: &TrainArgs, argv: &[String]) -> CliResult<()> {
    let mut manifest = ManifestBuilder::new(argv);
    let recording = load_recording(&args.recording, &mut manifest)?;
    let config = load_config(&args.config, &mut manifest)?;
    let held: BTreeSet<String> = args.holdout.iter().filter(|s| !s.is_empty()).cloned().collect();
    let (train_layout, validation) = holdout_split(recording.layout(), &held)?;
    std::fs::create_dir_all(&args.out)
        .map_err(|e| CliError::validation(format!("cannot create {}: {e}", args.out.display())))?;

    let outcome = train_recording(&recording, &config, &train_layout, Some(&validation), None);
    let (models, reports, error) = match outcome {
        Ok(run) => (run.models, run.reports, None),
        Err(f) => (f.models, f.reports, Some(f.error)),
    };
    for model in &models {
        let path = args.out.join(checkpoint_name(model.window.index));
        let bytes = model_to_bytes(model)?;
        write_file(&path, &bytes)?;
        manifest.output(&path, &bytes);
    }
    let report = TrainRunReport {
        held_out: validation.labels().iter().map(|s| s.to_string()).collect(),
        windows: &reports,
        error: error.as_ref().map(ToString::to_string),
    };
    let report_path = args.out.join("report.json");
    let bytes = write_json(&report_path, &report)?;
    manifest.output(&report_path, &bytes);
    manifest.extra(
        "window_wall_time_seconds",
        reports.iter().map(|r| r.wall_time_seconds).collect::<Vec<_>>().into(),
    );
    manifest.write(&args.out.join("manifest.json"))?;
    match error {
        Some(e) => Err(e.into()),
        None => Ok(()),
    }
}

/// Loads every `window_*.nbfm` in `dir`, ordered by window index.
pub fn load_checkpoints(dir: &Path, manifest: &mut ManifestBuilder) -> CliResult<Vec<FieldModel>> {
    let entries =
        std::fs::read_dir(dir).map_err(|e| CliError::validation(format!("cannot read {}: {e}", dir.display())))?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("window_") && n.ends_with(".nbfm"))
        })
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(CliError::coverage(format!("no window checkpoints in {}", dir.display())));
    }
    let mut models = Vec::with_capacity(paths.len());
    for path in &paths {
        let bytes = read_file(path)?;
        manifest.input(path, &bytes);
        let model = model_from_bytes(&bytes).map_err(|e| CliError::from(e).with_context(path))?;
        models.push(model);
    }
    models.sort_by_key(|m| m.window.index);
    for (k, m) in models.iter().enumerate() {
        if m.window.index != k {
            return Err(CliError::coverage(format!("checkpoint for window {k} is missing")));
        }
    }
    Ok(models)
}

impl CliError {
    fn with_context(mut self, path: &Path) -> Self {
        self.message = format!("{}: {}", path.display(), self.message);
        self
    }
}

pub fn synthesize(args: &SynthArgs, argv: &[String]) -> CliResult<()> {
    let mut manifest = ManifestBuilder::new(argv);
    let bytes = read_file(&args.positions)?;
    manifest.input(&args.positions, &bytes);
    let targets: ElectrodeLayout = serde_json::from_slice(&bytes)
        .map_err(|e| CliError::validation(format!("positions {}: {e}", args.positions.display())))?;
    if targets.is_empty() {
        return Err(CliError::validation("positions file lists no electrodes"));
    }
    let models = load_checkpoints(&args.checkpoints, &mut manifest)?;
    let out = nbf_core::training::synthesize(&models, &targets)?.to_bytes()?;
    write_file(&args.out, &out)?;
    manifest.output(&args.out, &out);
    manifest.write(&sibling(&args.out, "manifest.json"))
}

pub fn evaluate(args: &EvalArgs, argv: &[String]) -> CliResult<()> {
    let mut manifest = ManifestBuilder::new(argv);
    let recording = load_recording(&args.recording, &mut manifest)?;
    let reference = args
        .reference
        .as_deref()
        .map(|p| load_recording(p, &mut manifest))
        .transpose()?;
    let config = load_config(&args.config, &mut manifest)?;
    let held: BTreeSet<String> = args.holdout.iter().filter(|s| !s.is_empty()).cloned().collect();
    let methods = args
        .methods
        .iter()
        .map(|m| Method::parse(m))
        .collect::<Result<Vec<_>, _>>()?;
    let evaluation = run_evaluation(&recording, &held, &methods, &config, reference.as_ref(), DEFAULT_SNR_BOUNDS)?;
    let bytes = write_json(&args.out, &evaluation.report)?;
    manifest.output(&args.out, &bytes);
    manifest.write(&sibling(&args.out, "manifest.json"))
}
