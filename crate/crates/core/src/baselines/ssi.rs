use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::{Factorized, SphereFit};
use crate::error::{NbfError, Result};
use crate::recording::ElectrodeLayout;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SsiConfig {
    /// Spline order m (>= 2).
    pub stiffness: u32,
    /// Number of Legendre terms N.
    pub series_terms: usize,
    pub lambda: f64,
}

impl Default for SsiConfig {
    fn default() -> Self {
        SsiConfig {
            stiffness: 4,
            series_terms: 100,
            lambda: 1e-5,
        }
    }
}

impl SsiConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stiffness < 2 {
            return Err(NbfError::invalid("SSI stiffness must be at least 2"));
        }
        if self.series_terms == 0 {
            return Err(NbfError::invalid("SSI needs at least one series term"));
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(NbfError::invalid("SSI regularization must be non-negative"));
        }
        Ok(())
    }
}

/// `g(x) = 1/(4 pi) sum_{n=1}^{N} (2n+1) / (n(n+1))^m P_n(x)` with
/// precomputed series weights.
#[derive(Clone, Debug, PartialEq)]
pub struct SsiKernel {
    weights: Vec<f64>,
}

impl SsiKernel {
    pub fn new(stiffness: u32, terms: usize) -> Self {
        let weights = (1..=terms)
            .map(|n| {
                let n = n as f64;
                (2.0 * n + 1.0) / (n * (n + 1.0)).powi(stiffness as i32) / (4.0 * std::f64::consts::PI)
            })
            .collect();
        SsiKernel { weights }
    }

    pub fn eval(&self, x: f64) -> f64 {
        let x = x.clamp(-1.0, 1.0);
        // Legendre three-term recurrence: (n+1) P_{n+1} = (2n+1) x P_n - n P_{n-1}.
        let mut p_prev = 1.0;
        let mut p = x;
        let mut sum = 0.0;
        for (i, w) in self.weights.iter().enumerate() {
            let n = (i + 1) as f64;
            sum += w * p;
            let next = ((2.0 * n + 1.0) * x * p - n * p_prev) / (n + 1.0);
            p_prev = p;
            p = next;
        }
        sum
    }

    /// Magnitude of the last included series weight.
    pub fn last_weight(&self) -> f64 {
        *self.weights.last().unwrap_or(&0.0)
    }
}

pub fn ssi_g(x: f64, stiffness: u32, terms: usize) -> f64 {
    SsiKernel::new(stiffness, terms).eval(x)
}

fn cosine(a: [f64; 3], b: [f64; 3]) -> f64 {
    (a[0] * b[0] + a[1] * b[1] + a[2] * b[2]).clamp(-1.0, 1.0)
}

/// Factored spherical-spline system for a fixed electrode set:
/// `[[G + lambda I, 1], [1^T, 0]] [c; c0] = [v; 0]`.
pub struct SsiSystem {
    sphere: SphereFit,
    dirs: Vec<[f64; 3]>,
    kernel: SsiKernel,
    lu: Factorized,
}

impl SsiSystem {
    pub fn new(layout: &ElectrodeLayout, config: &SsiConfig, sphere: &SphereFit) -> Result<Self> {
        config.validate()?;
        layout.require_fit_size()?;
        let dirs = layout
            .iter()
            .map(|e| {
                sphere.direction(e.pos).ok_or_else(|| {
                    NbfError::invalid(format!("electrode '{}' sits at the sphere center", e.label))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let kernel = SsiKernel::new(config.stiffness, config.series_terms);
        let n = dirs.len();
        let mut a = DMatrix::zeros(n + 1, n + 1);
        for i in 0..n {
            for j in i..n {
                let g = kernel.eval(cosine(dirs[i], dirs[j]));
                a[(i, j)] = g;
                a[(j, i)] = g;
            }
            a[(i, i)] += config.lambda;
            a[(i, n)] = 1.0;
            a[(n, i)] = 1.0;
        }
        let lu = Factorized::new(a, "spherical spline")?;
        Ok(SsiSystem {
            sphere: *sphere,
            dirs,
            kernel,
            lu,
        })
    }

    /// `[c_1 .. c_n, c0]` for one set of electrode values.
    pub fn coefficients(&self, values: &[f64]) -> Result<Vec<f64>> {
        if values.len() != self.dirs.len() {
            return Err(NbfError::invalid("value count does not match electrode count"));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(NbfError::invalid("non-finite electrode value"));
        }
        let mut rhs = values.to_vec();
        rhs.push(0.0);
        self.lu.solve(&rhs)
    }

    pub fn query_row(&self, q: [f64; 3]) -> Result<Vec<f64>> {
        let u = self
            .sphere
            .direction(q)
            .ok_or_else(|| NbfError::invalid("query lies at the sphere center"))?;
        let mut row: Vec<f64> = self.dirs.iter().map(|d| self.kernel.eval(cosine(u, *d))).collect();
        row.push(1.0);
        Ok(row)
    }

    pub fn solve(&self, values: &[f64]) -> Result<SsiSolution> {
        let mut coeffs = self.coefficients(values)?;
        let c0 = coeffs.pop().expect("system has the constant term");
        Ok(SsiSolution {
            sphere: self.sphere,
            dirs: self.dirs.clone(),
            kernel: self.kernel.clone(),
            coeffs,
            c0,
        })
    }
}

#[derive(Clone, Debug)]
pub struct SsiSolution {
    pub sphere: SphereFit,
    dirs: Vec<[f64; 3]>,
    kernel: SsiKernel,
    pub coeffs: Vec<f64>,
    pub c0: f64,
}

pub fn ssi_fit(
    train_layout: &ElectrodeLayout,
    values_at_train: &[f64],
    config: &SsiConfig,
    sphere: &SphereFit,
) -> Result<SsiSolution> {
    SsiSystem::new(train_layout, config, sphere)?.solve(values_at_train)
}

/// `c0 + sum_i c_i g(cos angle(q, p_i))` with `q` radially projected onto the sphere.
pub fn ssi_predict(solution: &SsiSolution, query_position: [f64; 3]) -> Result<f64> {
    let u = solution
        .sphere
        .direction(query_position)
        .ok_or_else(|| NbfError::invalid("query lies at the sphere center"))?;
    Ok(solution.c0
        + solution
            .dirs
            .iter()
            .zip(&solution.coeffs)
            .map(|(d, c)| c * solution.kernel.eval(cosine(u, *d)))
            .sum::<f64>())
}
