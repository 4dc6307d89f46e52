use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoding::{log_level_basis, sample_fourier_basis_scaled, FourierBasis, PeVariant};
use crate::error::{NbfError, Result};
use crate::model::{InputOptions, ModelArch};
use crate::training::loss::Loss;

/// Every training hyperparameter plus the ablation switches.
///
/// JSON files may omit fields (defaults are the desk-scale preset) but
/// unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub depth: usize,
    pub width: usize,
    /// 1-based hidden layers receiving the encoded input; `None` means the
    /// single layer `ceil(depth / 2)`.
    pub skip_layers: Option<BTreeSet<usize>>,
    pub dropout: f64,
    pub m: usize,
    pub sigma_b: f64,
    /// Multiplier on the time column of the Gaussian frequency matrix.
    pub pe_time_scale: f64,
    /// Octaves per axis for the `log_levels` encoding.
    pub pe_levels: usize,
    pub huber_delta: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs_first_window: usize,
    pub epochs_subsequent: usize,
    pub grad_clip_norm: f64,
    pub seed: u64,
    pub window_seconds: f64,
    pub use_huber: bool,
    pub use_zscore: bool,
    pub use_coord_norm: bool,
    pub use_pe: bool,
    pub pe_variant: PeVariant,
    pub use_dropout: bool,
    pub use_skip: bool,
    pub use_warm_start: bool,
    /// Carry Adam moments across warm-started windows.
    pub reuse_optimizer_state: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig::desk()
    }
}

impl TrainConfig {
    /// Laptop-scale defaults: depth 4, width 128, 64 frequencies.
    ///
    /// The encoding is anisotropic: spatial frequencies have sd 0.1 cycles
    /// per normalized unit (the scalp is smooth at electrode spacing) while
    /// time gets sd 25, i.e. about 17 Hz over a 3 s window. Dropout 0.3 and a
    /// small learning rate keep the net from fitting sensor noise over 400
    /// epochs; on the 6 dB bench this is worth about 0.1 held-out R^2 over
    /// dropout 0.1 at 1e-3.
    pub fn desk() -> Self {
        TrainConfig {
            depth: 4,
            width: 128,
            skip_layers: None,
            dropout: 0.3,
            m: 64,
            sigma_b: 0.1,
            pe_time_scale: 250.0,
            pe_levels: 8,
            huber_delta: 1.0,
            learning_rate: 5e-5,
            batch_size: 32,
            epochs_first_window: 400,
            epochs_subsequent: 120,
            grad_clip_norm: 1.0,
            seed: 0,
            window_seconds: 3.0,
            use_huber: true,
            use_zscore: true,
            use_coord_norm: true,
            use_pe: true,
            pe_variant: PeVariant::Gaussian,
            use_dropout: true,
            use_skip: true,
            use_warm_start: true,
            reuse_optimizer_state: false,
        }
    }

    /// Depth 8, width 1450, dropout 0.1, batch 32, m = 256.
    pub fn paper_default() -> Self {
        TrainConfig {
            depth: 8,
            width: 1450,
            dropout: 0.1,
            m: 256,
            batch_size: 32,
            ..Self::desk()
        }
    }

    /// `paper_default` with the larger batch used for big MEG montages.
    pub fn large_batch() -> Self {
        TrainConfig {
            batch_size: 250,
            ..Self::paper_default()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "paper-default" => Ok(Self::paper_default()),
            "large-batch" => Ok(Self::large_batch()),
            other => Err(NbfError::invalid(format!("unknown config preset '{other}'"))),
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| NbfError::io(path, e))?;
        Self::from_json(&bytes)
    }

    pub fn from_json(bytes: &[u8]) -> Result<Self> {
        let cfg: TrainConfig = serde_json::from_slice(bytes).map_err(|e| NbfError::format("config", e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("huber_delta", self.huber_delta),
            ("learning_rate", self.learning_rate),
            ("grad_clip_norm", self.grad_clip_norm),
            ("sigma_b", self.sigma_b),
            ("pe_time_scale", self.pe_time_scale),
            ("window_seconds", self.window_seconds),
        ];
        for (name, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return Err(NbfError::invalid(format!("{name} must be positive, got {v}")));
            }
        }
        if self.batch_size == 0 {
            return Err(NbfError::invalid("batch_size must be at least 1"));
        }
        if self.epochs_first_window == 0 || self.epochs_subsequent == 0 {
            return Err(NbfError::invalid("epoch counts must be positive"));
        }
        if self.epochs_subsequent > self.epochs_first_window {
            return Err(NbfError::invalid("epochs_subsequent must not exceed epochs_first_window"));
        }
        if self.m == 0 || self.pe_levels == 0 {
            return Err(NbfError::invalid("m and pe_levels must be positive"));
        }
        self.arch().validate()
    }

    pub fn skip_set(&self) -> BTreeSet<usize> {
        if !self.use_skip {
            return BTreeSet::new();
        }
        match &self.skip_layers {
            Some(s) => s.clone(),
            None => {
                let mid = self.depth.div_ceil(2);
                if mid >= 1 && mid < self.depth {
                    [mid].into()
                } else {
                    BTreeSet::new()
                }
            }
        }
    }

    pub fn input_dim(&self) -> usize {
        match (self.use_pe, self.pe_variant) {
            (false, _) => 4,
            (true, PeVariant::Gaussian) => 2 * self.m,
            (true, PeVariant::LogLevels) => 8 * self.pe_levels,
        }
    }

    pub fn arch(&self) -> ModelArch {
        ModelArch {
            depth: self.depth,
            width: self.width,
            skip_layers: self.skip_set(),
            dropout_rate: if self.use_dropout { self.dropout } else { 0.0 },
            input_dim: self.input_dim(),
        }
    }

    pub fn basis(&self) -> Result<Option<FourierBasis>> {
        if !self.use_pe {
            return Ok(None);
        }
        match self.pe_variant {
            PeVariant::Gaussian => {
                sample_fourier_basis_scaled(self.m, self.sigma_b, self.pe_time_scale, self.derived_seed(SeedTag::Basis, 0))
                    .map(Some)
            }
            PeVariant::LogLevels => log_level_basis(self.pe_levels).map(Some),
        }
    }

    pub fn input_options(&self) -> InputOptions {
        InputOptions {
            coord_norm: self.use_coord_norm,
            zscore: self.use_zscore,
        }
    }

    pub fn loss(&self) -> Loss {
        if self.use_huber {
            Loss::Huber { delta: self.huber_delta }
        } else {
            Loss::Squared
        }
    }

    pub(crate) fn derived_seed(&self, tag: SeedTag, index: u64) -> u64 {
        splitmix(splitmix(self.seed ^ (tag as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)) ^ index)
    }
}

/// Independent random streams derived from the run seed.
#[derive(Clone, Copy, Debug)]
pub(crate) enum SeedTag {
    Basis = 1,
    Init = 2,
    Shuffle = 3,
    Dropout = 4,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
