//! `.nbfm` checkpoints.
//!
//! Layout: magic `NBFM0001`, little-endian `u32` header length, JSON header,
//! the weight blobs (little-endian `f64`) in manifest order, then a
//! little-endian CRC-32 over every byte between the magic and the checksum.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoding::{FourierBasis, NormalizationParams, PeVariant};
use crate::error::{NbfError, Result};
use crate::model::{FieldModel, InputOptions, Layer, ModelArch, INIT_SCHEME};
use crate::recording::{write_atomic, ElectrodeLayout, TimeWindow};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"NBFM0001";

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BasisHeader {
    variant: PeVariant,
    m: usize,
    sigma_b: f64,
    time_scale: f64,
    seed: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BlobEntry {
    name: String,
    offset: usize,
    len: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CreationMetadata {
    tool: String,
    tool_version: String,
    init_scheme: String,
    init_seed: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointHeader {
    arch: ModelArch,
    basis: Option<BasisHeader>,
    input: InputOptions,
    norm: NormalizationParams,
    window: TimeWindow,
    sample_rate: f64,
    train_layout: ElectrodeLayout,
    created: CreationMetadata,
    blobs: Vec<BlobEntry>,
}

pub fn model_to_bytes(model: &FieldModel) -> Result<Vec<u8>> {
    let mut blobs: Vec<(String, &[f64])> = Vec::new();
    if let Some(b) = &model.basis {
        blobs.push(("basis.B".into(), &b.b));
    }
    for (i, layer) in model.layers.iter().enumerate() {
        blobs.push((format!("layer{}.weight", i + 1), &layer.weights));
        blobs.push((format!("layer{}.bias", i + 1), &layer.bias));
    }
    let mut offset = 0;
    let manifest = blobs
        .iter()
        .map(|(name, data)| {
            let entry = BlobEntry {
                name: name.clone(),
                offset,
                len: data.len() * 8,
            };
            offset += entry.len;
            entry
        })
        .collect();
    let header = CheckpointHeader {
        arch: model.arch.clone(),
        basis: model.basis.as_ref().map(|b| BasisHeader {
            variant: b.variant,
            m: b.m,
            sigma_b: b.sigma_b,
            time_scale: b.time_scale,
            seed: b.seed,
        }),
        input: model.input,
        norm: model.norm,
        window: model.window.clone(),
        sample_rate: model.sample_rate,
        train_layout: model.train_layout.clone(),
        created: CreationMetadata {
            tool: env!("CARGO_PKG_NAME").into(),
            tool_version: env!("CARGO_PKG_VERSION").into(),
            init_scheme: INIT_SCHEME.into(),
            init_seed: model.init_seed,
        },
        blobs: manifest,
    };
    let header = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(16 + header.len() + offset);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    for (_, data) in &blobs {
        for v in data.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out[8..]);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

pub fn model_from_bytes(bytes: &[u8]) -> Result<FieldModel> {
    if bytes.len() < 16 {
        return Err(NbfError::format("payload", "truncated checkpoint"));
    }
    if &bytes[..4] != b"NBFM" {
        return Err(NbfError::Version("unknown magic; not a field-model checkpoint".into()));
    }
    if &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(NbfError::Version(format!(
            "unsupported checkpoint version {}",
            String::from_utf8_lossy(&bytes[4..8])
        )));
    }
    let body = &bytes[8..bytes.len() - 4];
    let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().unwrap());
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(NbfError::Checksum { stored, computed });
    }
    let header_len = u32::from_le_bytes(body[..4].try_into().unwrap()) as usize;
    if body.len() < 4 + header_len {
        return Err(NbfError::format("header_length", "header extends past the payload"));
    }
    let header: CheckpointHeader = serde_json::from_slice(&body[4..4 + header_len])
        .map_err(|e| NbfError::format("header", e.to_string()))?;
    let payload = &body[4 + header_len..];

    let blob = |name: &str, expected: usize| -> Result<Vec<f64>> {
        let entry = header
            .blobs
            .iter()
            .find(|b| b.name == name)
            .ok_or_else(|| NbfError::format("blobs", format!("missing blob '{name}'")))?;
        if entry.len != expected * 8 || entry.offset + entry.len > payload.len() {
            return Err(NbfError::format(
                "blobs",
                format!("blob '{name}' has the wrong size or is truncated"),
            ));
        }
        let values: Vec<f64> = payload[entry.offset..entry.offset + entry.len]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if values.iter().any(|v| !v.is_finite()) {
            return Err(NbfError::format("blobs", format!("blob '{name}' holds non-finite values")));
        }
        Ok(values)
    };

    header.arch.validate().map_err(|e| NbfError::format("arch", e.to_string()))?;
    let basis = match &header.basis {
        Some(h) => Some(FourierBasis {
            variant: h.variant,
            m: h.m,
            sigma_b: h.sigma_b,
            time_scale: h.time_scale,
            seed: h.seed,
            b: blob("basis.B", h.m * 4)?,
        }),
        None => None,
    };
    let layers = header
        .arch
        .layer_shapes()
        .into_iter()
        .enumerate()
        .map(|(i, (rows, cols))| {
            Ok(Layer {
                rows,
                cols,
                weights: blob(&format!("layer{}.weight", i + 1), rows * cols)?,
                bias: blob(&format!("layer{}.bias", i + 1), rows)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(FieldModel {
        arch: header.arch,
        basis,
        norm: header.norm,
        input: header.input,
        layers,
        window: header.window,
        sample_rate: header.sample_rate,
        train_layout: header.train_layout,
        init_seed: header.created.init_seed,
    })
}

pub fn save_model(model: &FieldModel, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), &model_to_bytes(model)?)
}

pub fn load_model(path: impl AsRef<Path>) -> Result<FieldModel> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| NbfError::io(path, e))?;
    model_from_bytes(&bytes)
}
