//! Classical per-sample spatial interpolators: spherical splines and radial
//! basis functions.

mod rbf;
mod sphere;
mod ssi;

use nalgebra::{DMatrix, DVector, LU};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{NbfError, Result};
use crate::recording::{ElectrodeLayout, Recording};

pub use rbf::{rbf_fit, rbf_predict, RbfConfig, RbfKernel, RbfSolution, RbfSystem};
pub use sphere::{fit_sphere, SphereFit};
pub use ssi::{ssi_fit, ssi_g, ssi_predict, SsiConfig, SsiKernel, SsiSolution, SsiSystem};

/// LU factorization of a square system, rejecting numerically singular matrices.
#[derive(Clone, Debug)]
pub(crate) struct Factorized {
    lu: LU<f64, nalgebra::Dyn, nalgebra::Dyn>,
}

impl Factorized {
    pub(crate) fn new(matrix: DMatrix<f64>, what: &str) -> Result<Self> {
        let lu = matrix.lu();
        let diag = lu.u().diagonal();
        let max = diag.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        let min = diag.iter().fold(f64::INFINITY, |a, v| a.min(v.abs()));
        if !(max > 0.0) || !(min > max * 1e-14) || !min.is_finite() {
            return Err(NbfError::SingularMatrix(format!(
                "{what} system is singular (pivot ratio {:.3e})",
                min / max
            )));
        }
        Ok(Factorized { lu })
    }

    pub(crate) fn solve(&self, rhs: &[f64]) -> Result<Vec<f64>> {
        let b = DVector::from_column_slice(rhs);
        self.lu
            .solve(&b)
            .map(|x| x.as_slice().to_vec())
            .ok_or_else(|| NbfError::SingularMatrix("back-substitution failed".into()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum InterpolationMethod {
    Ssi(SsiConfig),
    Rbf(RbfConfig),
}

impl InterpolationMethod {
    pub fn name(&self) -> &'static str {
        match self {
            InterpolationMethod::Ssi(_) => "ssi",
            InterpolationMethod::Rbf(_) => "rbf",
        }
    }
}

/// A factored interpolator for a fixed train layout, reusable across samples.
enum Prepared {
    Ssi(SsiSystem),
    Rbf(RbfSystem),
}

impl Prepared {
    fn new(train: &ElectrodeLayout, method: &InterpolationMethod) -> Result<Self> {
        Ok(match method {
            InterpolationMethod::Ssi(cfg) => {
                let sphere = fit_sphere(train)?;
                Prepared::Ssi(SsiSystem::new(train, cfg, &sphere)?)
            }
            InterpolationMethod::Rbf(cfg) => Prepared::Rbf(RbfSystem::new(train, cfg)?),
        })
    }

    /// Row `q` holds the linear map from solution coefficients to the value at query `q`.
    fn query_rows(&self, queries: &[[f64; 3]]) -> Result<Vec<Vec<f64>>> {
        match self {
            Prepared::Ssi(s) => queries.iter().map(|q| s.query_row(*q)).collect(),
            Prepared::Rbf(s) => Ok(queries.iter().map(|q| s.query_row(*q)).collect()),
        }
    }

    fn coefficients(&self, values: &[f64]) -> Result<Vec<f64>> {
        match self {
            Prepared::Ssi(s) => s.coefficients(values),
            Prepared::Rbf(s) => s.coefficients(values),
        }
    }
}

/// Fits the chosen interpolator independently at every sample instant on the
/// train electrodes and evaluates it at the query electrodes.
pub fn interpolate_recording(
    recording: &Recording,
    train_layout: &ElectrodeLayout,
    query_layout: &ElectrodeLayout,
    method: &InterpolationMethod,
) -> Result<Recording> {
    if let Some(e) = query_layout.iter().find(|e| train_layout.index_of(&e.label).is_some()) {
        return Err(NbfError::invalid(format!(
            "query electrode '{}' is also a train electrode",
            e.label
        )));
    }
    let n_samples = recording.n_samples();
    if query_layout.is_empty() {
        return Recording::from_flat(
            ElectrodeLayout::empty(),
            recording.sample_rate(),
            recording.start_time(),
            n_samples,
            Vec::new(),
        );
    }
    train_layout.require_fit_size()?;
    let train = recording.select(train_layout)?;
    let prepared = Prepared::new(train_layout, method)?;
    let rows = prepared.query_rows(&query_layout.positions())?;
    let n_train = train_layout.len();

    let per_sample: Vec<Vec<f64>> = (0..n_samples)
        .into_par_iter()
        .map(|k| {
            let values: Vec<f64> = (0..n_train).map(|c| train.channel(c)[k]).collect();
            let coeffs = prepared.coefficients(&values).map_err(|e| NbfError::AtSample {
                index: k,
                source: Box::new(e),
            })?;
            Ok(rows
                .iter()
                .map(|row| row.iter().zip(&coeffs).map(|(a, b)| a * b).sum())
                .collect())
        })
        .collect::<Result<_>>()?;

    let n_query = query_layout.len();
    let mut flat = vec![0.0; n_query * n_samples];
    for (k, vals) in per_sample.iter().enumerate() {
        for (q, v) in vals.iter().enumerate() {
            flat[q * n_samples + k] = *v;
        }
    }
    Recording::from_flat(
        query_layout.clone(),
        recording.sample_rate(),
        recording.start_time(),
        n_samples,
        flat,
    )
}

pub(crate) fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub(crate) fn norm3(a: [f64; 3]) -> f64 {
    (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt()
}
