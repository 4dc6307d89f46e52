use std::fmt::Write as _;

use nbf_core::model::{ScalpGrid, ScalpProjection};
use nbf_core::FieldModel;
use serde::Serialize;

use crate::commands::load_checkpoints;
use crate::manifest::{write_file, write_json, ManifestBuilder};
use crate::{CliError, CliResult, FrameFormat, RenderArgs};

/// Parses `t0:t1:step` (inclusive of `t1`) or a comma-separated list.
pub fn parse_times(spec: &str) -> CliResult<Vec<f64>> {
    let bad = || CliError::validation(format!("cannot parse times '{spec}'"));
    let times = if spec.contains(':') {
        let parts: Vec<f64> = spec
            .split(':')
            .map(|p| p.trim().parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|_| bad())?;
        let [t0, t1, step] = parts[..] else {
            return Err(bad());
        };
        if !(step > 0.0) || !(t1 >= t0) {
            return Err(CliError::validation("times range needs t1 >= t0 and step > 0"));
        }
        let count = ((t1 - t0) / step + 1e-9).floor() as usize + 1;
        (0..count).map(|k| t0 + k as f64 * step).collect()
    } else {
        spec.split(',')
            .map(|p| p.trim().parse::<f64>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|_| bad())?
    };
    if times.is_empty() || times.iter().any(|t| !t.is_finite()) {
        return Err(bad());
    }
    Ok(times)
}

fn model_for(models: &[FieldModel], t: f64) -> Option<&FieldModel> {
    let last = models.len() - 1;
    models.iter().enumerate().find_map(|(k, m)| {
        let w = &m.window;
        let inside = t >= w.t_start && (t < w.t_end || (k == last && t <= w.t_end));
        inside.then_some(m)
    })
}

#[derive(Serialize)]
struct Sidecar {
    format: &'static str,
    resolution: usize,
    projection: ScalpProjection,
    /// Volts mapped to gray level 1; `max_volts` maps to 255 and 0 marks cells off the scalp.
    min_volts: Option<f64>,
    max_volts: Option<f64>,
    frames: Vec<FrameInfo>,
}

#[derive(Serialize)]
struct FrameInfo {
    file: String,
    time: f64,
    window: usize,
}

pub fn render(args: &RenderArgs, argv: &[String]) -> CliResult<()> {
    let mut manifest = ManifestBuilder::new(argv);
    if args.resolution < 2 {
        return Err(CliError::validation("resolution must be at least 2"));
    }
    let times = parse_times(&args.times)?;
    let models = load_checkpoints(&args.checkpoints, &mut manifest)?;
    let projection = ScalpProjection::for_layout(&models[0].train_layout)?;

    let mut grids = Vec::with_capacity(times.len());
    let mut frames = Vec::with_capacity(times.len());
    for (k, &t) in times.iter().enumerate() {
        let model = model_for(&models, t)
            .ok_or_else(|| CliError::coverage(format!("time {t} s is not covered by any window checkpoint")))?;
        grids.push(model.render_grid(&projection, args.resolution, t)?);
        let ext = match args.format {
            FrameFormat::Pgm => "pgm",
            FrameFormat::Csv => "csv",
        };
        frames.push(FrameInfo {
            file: format!("frame_{k:05}.{ext}"),
            time: t,
            window: model.window.index,
        });
    }

    let inside = grids.iter().flat_map(|g| g.values.iter().zip(&g.mask).filter(|(_, m)| **m).map(|(v, _)| *v));
    let (lo, hi) = inside.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    let scale = (lo <= hi).then_some((lo, hi));

    for (grid, frame) in grids.iter().zip(&frames) {
        let bytes = match args.format {
            FrameFormat::Pgm => pgm(grid, scale),
            FrameFormat::Csv => csv(grid),
        };
        let path = args.out.join(&frame.file);
        write_file(&path, &bytes)?;
        manifest.output(&path, &bytes);
    }
    let sidecar = Sidecar {
        format: match args.format {
            FrameFormat::Pgm => "pgm",
            FrameFormat::Csv => "csv",
        },
        resolution: args.resolution,
        projection,
        min_volts: scale.map(|s| s.0),
        max_volts: scale.map(|s| s.1),
        frames,
    };
    let path = args.out.join("frames.json");
    let bytes = write_json(&path, &sidecar)?;
    manifest.output(&path, &bytes);
    manifest.write(&args.out.join("manifest.json"))
}

/// Plain (ASCII) PGM, 8-bit: scalp cells span 1..=255, off-scalp cells are 0.
fn pgm(grid: &ScalpGrid, scale: Option<(f64, f64)>) -> Vec<u8> {
    let r = grid.resolution;
    let mut out = format!("P2\n{r} {r}\n255\n");
    for row in 0..r {
        let line: Vec<String> = (0..r)
            .map(|col| {
                let level = match (grid.get(row, col), scale) {
                    (Some(v), Some((lo, hi))) if hi > lo => 1 + ((v - lo) / (hi - lo) * 254.0).round() as u32,
                    (Some(_), _) => 128,
                    (None, _) => 0,
                };
                level.to_string()
            })
            .collect();
        out.push_str(&line.join(" "));
        out.push('\n');
    }
    out.into_bytes()
}

/// Raw volts, one grid row per line; off-scalp cells are empty fields.
fn csv(grid: &ScalpGrid) -> Vec<u8> {
    let r = grid.resolution;
    let mut out = String::new();
    for row in 0..r {
        for col in 0..r {
            if col > 0 {
                out.push(',');
            }
            if let Some(v) = grid.get(row, col) {
                write!(out, "{v:e}").expect("writing to a String cannot fail");
            }
        }
        out.push('\n');
    }
    out.into_bytes()
}
