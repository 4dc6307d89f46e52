//! Recordings, electrode layouts, time windows, and the `.nbr` container.
//!
//! A `.nbr` file is the 8-byte magic `NBRF0001`, a little-endian `u32`
//! header length, a UTF-8 JSON header, then `channels x n_samples`
//! little-endian `f64` samples in channel-major order.

use std::collections::{BTreeSet, HashSet};
use std::fs;
use std::io::Write;
use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{NbfError, Result};

pub const RECORDING_MAGIC: &[u8; 8] = b"NBRF0001";

/// Minimum electrode count for any spatial fit.
pub const MIN_FIT_ELECTRODES: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Electrode {
    pub label: String,
    pub pos: [f64; 3],
}

impl Electrode {
    pub fn new(label: impl Into<String>, pos: [f64; 3]) -> Self {
        Electrode {
            label: label.into(),
            pos,
        }
    }
}

/// Ordered, validated set of named electrode positions (meters, head frame).
///
/// Labels are unique and non-empty, positions finite and pairwise distinct.
/// Layouts used for fitting must additionally hold at least
/// [`MIN_FIT_ELECTRODES`] electrodes (see [`ElectrodeLayout::require_fit_size`]);
/// query and validation layouts may be smaller, including empty.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Electrode>", into = "Vec<Electrode>")]
pub struct ElectrodeLayout {
    electrodes: Vec<Electrode>,
}

impl TryFrom<Vec<Electrode>> for ElectrodeLayout {
    type Error = NbfError;

    fn try_from(electrodes: Vec<Electrode>) -> Result<Self> {
        ElectrodeLayout::new(electrodes)
    }
}

impl From<ElectrodeLayout> for Vec<Electrode> {
    fn from(layout: ElectrodeLayout) -> Self {
        layout.electrodes
    }
}

impl ElectrodeLayout {
    pub fn new(electrodes: Vec<Electrode>) -> Result<Self> {
        let mut labels = HashSet::new();
        let mut positions = HashSet::new();
        for (i, e) in electrodes.iter().enumerate() {
            if e.label.is_empty() {
                return Err(NbfError::invalid(format!("electrode {i} has an empty label")));
            }
            if !labels.insert(e.label.as_str()) {
                return Err(NbfError::invalid(format!("duplicate electrode label '{}'", e.label)));
            }
            if e.pos.iter().any(|c| !c.is_finite()) {
                return Err(NbfError::invalid(format!(
                    "electrode '{}' has a non-finite position",
                    e.label
                )));
            }
            let key = e.pos.map(|c| (c + 0.0).to_bits());
            if !positions.insert(key) {
                return Err(NbfError::invalid(format!(
                    "electrode '{}' shares its position with another electrode",
                    e.label
                )));
            }
        }
        Ok(ElectrodeLayout { electrodes })
    }

    pub fn empty() -> Self {
        ElectrodeLayout {
            electrodes: Vec::new(),
        }
    }

    pub fn require_fit_size(&self) -> Result<()> {
        if self.len() < MIN_FIT_ELECTRODES {
            return Err(NbfError::invalid(format!(
                "layout has {} electrodes, at least {MIN_FIT_ELECTRODES} are required",
                self.len()
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.electrodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.electrodes.is_empty()
    }

    pub fn electrodes(&self) -> &[Electrode] {
        &self.electrodes
    }

    pub fn iter(&self) -> impl Iterator<Item = &Electrode> {
        self.electrodes.iter()
    }

    pub fn positions(&self) -> Vec<[f64; 3]> {
        self.electrodes.iter().map(|e| e.pos).collect()
    }

    pub fn labels(&self) -> Vec<&str> {
        self.electrodes.iter().map(|e| e.label.as_str()).collect()
    }

    pub fn index_of(&self, label: &str) -> Option<usize> {
        self.electrodes.iter().position(|e| e.label == label)
    }

    pub fn load_montage(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| NbfError::io(path, e))?;
        let layout: ElectrodeLayout = serde_json::from_slice(&bytes)
            .map_err(|e| NbfError::format("channels", e.to_string()))?;
        Ok(layout)
    }

    pub fn save_montage(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut bytes = serde_json::to_vec_pretty(&self.electrodes)?;
        bytes.push(b'\n');
        write_atomic(path.as_ref(), &bytes)
    }
}

/// Splits a layout into (train, validation) by label, keeping the original order.
pub fn holdout_split(
    layout: &ElectrodeLayout,
    held_out_labels: &BTreeSet<String>,
) -> Result<(ElectrodeLayout, ElectrodeLayout)> {
    let unknown: Vec<&str> = held_out_labels
        .iter()
        .filter(|l| layout.index_of(l).is_none())
        .map(String::as_str)
        .collect();
    if !unknown.is_empty() {
        return Err(NbfError::invalid(format!(
            "unknown electrode label(s): {}",
            unknown.join(", ")
        )));
    }
    let (held, kept): (Vec<Electrode>, Vec<Electrode>) = layout
        .electrodes
        .iter()
        .cloned()
        .partition(|e| held_out_labels.contains(&e.label));
    if kept.len() < MIN_FIT_ELECTRODES {
        return Err(NbfError::invalid(format!(
            "only {} electrodes would remain for training, at least {MIN_FIT_ELECTRODES} are required",
            kept.len()
        )));
    }
    Ok((
        ElectrodeLayout { electrodes: kept },
        ElectrodeLayout { electrodes: held },
    ))
}

/// A multichannel sampled signal with its electrode layout.
#[derive(Clone, Debug, PartialEq)]
pub struct Recording {
    layout: ElectrodeLayout,
    sample_rate: f64,
    start_time: f64,
    n_samples: usize,
    /// Channel-major, `layout.len() * n_samples` values, volts.
    samples: Vec<f64>,
}

impl Recording {
    pub fn new(
        layout: ElectrodeLayout,
        sample_rate: f64,
        start_time: f64,
        samples: Vec<Vec<f64>>,
    ) -> Result<Self> {
        if samples.len() != layout.len() {
            return Err(NbfError::invalid(format!(
                "{} sample rows for {} electrodes",
                samples.len(),
                layout.len()
            )));
        }
        let n_samples = samples.first().map_or(0, Vec::len);
        if let Some((i, row)) = samples.iter().enumerate().find(|(_, r)| r.len() != n_samples) {
            return Err(NbfError::invalid(format!(
                "channel {i} has {} samples, expected {n_samples}",
                row.len()
            )));
        }
        Self::from_flat(layout, sample_rate, start_time, n_samples, samples.concat())
    }

    /// Builds a recording from channel-major samples.
    pub fn from_flat(
        layout: ElectrodeLayout,
        sample_rate: f64,
        start_time: f64,
        n_samples: usize,
        samples: Vec<f64>,
    ) -> Result<Self> {
        if !(sample_rate > 0.0) || !sample_rate.is_finite() {
            return Err(NbfError::invalid(format!("sample_rate must be positive, got {sample_rate}")));
        }
        if !start_time.is_finite() {
            return Err(NbfError::invalid("start_time must be finite"));
        }
        if samples.len() != layout.len() * n_samples {
            return Err(NbfError::invalid(format!(
                "sample buffer holds {} values, expected {} x {}",
                samples.len(),
                layout.len(),
                n_samples
            )));
        }
        if let Some(k) = samples.iter().position(|v| !v.is_finite()) {
            let (ch, idx) = (k / n_samples.max(1), k % n_samples.max(1));
            return Err(NbfError::invalid(format!(
                "non-finite sample at channel {ch}, sample index {idx}"
            )));
        }
        Ok(Recording {
            layout,
            sample_rate,
            start_time,
            n_samples,
            samples,
        })
    }

    pub fn layout(&self) -> &ElectrodeLayout {
        &self.layout
    }

    pub fn sample_rate(&self) -> f64 {
        self.sample_rate
    }

    pub fn start_time(&self) -> f64 {
        self.start_time
    }

    pub fn n_samples(&self) -> usize {
        self.n_samples
    }

    pub fn n_channels(&self) -> usize {
        self.layout.len()
    }

    pub fn duration(&self) -> f64 {
        self.n_samples as f64 / self.sample_rate
    }

    pub fn channel(&self, index: usize) -> &[f64] {
        &self.samples[index * self.n_samples..(index + 1) * self.n_samples]
    }

    pub fn channel_by_label(&self, label: &str) -> Option<&[f64]> {
        self.layout.index_of(label).map(|i| self.channel(i))
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    /// Time of sample `index` in seconds.
    pub fn time_of(&self, index: usize) -> f64 {
        self.start_time + index as f64 / self.sample_rate
    }

    /// Restricts the recording to the electrodes of `layout`, matched by label.
    pub fn select(&self, layout: &ElectrodeLayout) -> Result<Recording> {
        let mut samples = Vec::with_capacity(layout.len() * self.n_samples);
        for e in layout.iter() {
            let row = self
                .channel_by_label(&e.label)
                .ok_or_else(|| NbfError::invalid(format!("electrode '{}' not in recording", e.label)))?;
            samples.extend_from_slice(row);
        }
        Recording::from_flat(
            layout.clone(),
            self.sample_rate,
            self.start_time,
            self.n_samples,
            samples,
        )
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| NbfError::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path.as_ref(), &self.to_bytes()?)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = RecordingHeader {
            sample_rate: self.sample_rate,
            start_time: self.start_time,
            n_samples: self.n_samples,
            channels: self.layout.electrodes.clone(),
        };
        let header = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(12 + header.len() + self.samples.len() * 8);
        out.extend_from_slice(RECORDING_MAGIC);
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        for v in &self.samples {
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 12 {
            return Err(NbfError::format("magic", "file shorter than the fixed preamble"));
        }
        if &bytes[..8] != RECORDING_MAGIC {
            return Err(NbfError::format("magic", "expected NBRF0001"));
        }
        let header_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let payload_start = 12 + header_len;
        if bytes.len() < payload_start {
            return Err(NbfError::format("header_length", "header extends past end of file"));
        }
        let header: RecordingHeader = serde_json::from_slice(&bytes[12..payload_start])
            .map_err(|e| NbfError::format("header", e.to_string()))?;
        let layout = ElectrodeLayout::new(header.channels)
            .map_err(|e| NbfError::format("channels", e.to_string()))?;
        if !(header.sample_rate > 0.0) {
            return Err(NbfError::format("sample_rate", "must be positive"));
        }
        let payload = &bytes[payload_start..];
        if payload.len() % 8 != 0 {
            return Err(NbfError::format("payload", "length is not a multiple of 8 bytes"));
        }
        let n_values = payload.len() / 8;
        let per_channel = header.n_samples;
        if per_channel == 0 || n_values % per_channel != 0 {
            return Err(NbfError::format(
                "channels",
                format!("payload holds {n_values} values, not a whole number of {per_channel}-sample rows"),
            ));
        }
        let rows = n_values / per_channel;
        if rows != layout.len() {
            return Err(NbfError::format(
                "channels",
                format!("channel-count mismatch: header declares {}, payload holds {rows}", layout.len()),
            ));
        }
        let samples: Vec<f64> = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if let Some(k) = samples.iter().position(|v| !v.is_finite()) {
            return Err(NbfError::format(
                "samples",
                format!(
                    "non-finite value at channel {}, sample index {}",
                    k / per_channel,
                    k % per_channel
                ),
            ));
        }
        Recording::from_flat(layout, header.sample_rate, header.start_time, per_channel, samples)
            .map_err(|e| NbfError::format("header", e.to_string()))
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RecordingHeader {
    sample_rate: f64,
    start_time: f64,
    n_samples: usize,
    channels: Vec<Electrode>,
}

/// A contiguous span of a recording; the unit on which one field model is trained.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimeWindow {
    pub index: usize,
    pub t_start: f64,
    /// Exclusive end: the time one sample period after the last sample.
    pub t_end: f64,
    pub sample_start: usize,
    pub sample_end: usize,
}

impl TimeWindow {
    pub fn sample_range(&self) -> Range<usize> {
        self.sample_start..self.sample_end
    }

    pub fn len(&self) -> usize {
        self.sample_end - self.sample_start
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn duration(&self) -> f64 {
        self.t_end - self.t_start
    }

    pub fn contains_time(&self, t: f64) -> bool {
        t >= self.t_start && t < self.t_end
    }
}

/// Cuts a recording into contiguous, non-overlapping windows. The final window
/// keeps whatever remains, so it may be shorter than `window_seconds`.
pub fn segment_windows(recording: &Recording, window_seconds: f64) -> Result<Vec<TimeWindow>> {
    if !(window_seconds > 0.0) || !window_seconds.is_finite() {
        return Err(NbfError::invalid(format!(
            "window length must be positive, got {window_seconds}"
        )));
    }
    if recording.n_samples() == 0 {
        return Err(NbfError::invalid("recording holds no samples"));
    }
    let per_window = ((window_seconds * recording.sample_rate()).round() as usize).max(1);
    let total = recording.n_samples();
    Ok((0..total)
        .step_by(per_window)
        .enumerate()
        .map(|(index, start)| {
            let end = (start + per_window).min(total);
            TimeWindow {
                index,
                t_start: recording.time_of(start),
                t_end: recording.time_of(end),
                sample_start: start,
                sample_end: end,
            }
        })
        .collect())
}

/// Writes via a sibling temp file and rename so readers never see a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let file_name = path
        .file_name()
        .ok_or_else(|| NbfError::invalid(format!("not a file path: {}", path.display())))?;
    let mut tmp_name = std::ffi::OsString::from(".");
    tmp_name.push(file_name);
    tmp_name.push(".tmp");
    let tmp = path.with_file_name(tmp_name);
    {
        let mut f = fs::File::create(&tmp).map_err(|e| NbfError::io(&tmp, e))?;
        f.write_all(bytes).map_err(|e| NbfError::io(&tmp, e))?;
        f.sync_all().map_err(|e| NbfError::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| NbfError::io(path, e))
}
