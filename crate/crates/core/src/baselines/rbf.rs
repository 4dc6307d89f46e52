use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::{norm3, sub, Factorized};
use crate::error::{NbfError, Result};
use crate::recording::ElectrodeLayout;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum RbfKernel {
    /// `r^2 ln r`
    ThinPlate,
    /// `exp(-(eps r)^2)`
    Gaussian { epsilon: f64 },
    /// `sqrt(1 + (eps r)^2)`
    Multiquadric { epsilon: f64 },
    /// `r`
    Linear,
}

impl RbfKernel {
    pub fn eval(&self, r: f64) -> f64 {
        match *self {
            RbfKernel::ThinPlate => {
                if r == 0.0 {
                    0.0
                } else {
                    r * r * r.ln()
                }
            }
            RbfKernel::Gaussian { epsilon } => (-(epsilon * r).powi(2)).exp(),
            RbfKernel::Multiquadric { epsilon } => (1.0 + (epsilon * r).powi(2)).sqrt(),
            RbfKernel::Linear => r,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RbfConfig {
    pub kernel: RbfKernel,
    pub lambda: f64,
    /// Augment with an affine term `a + b . x` and its orthogonality constraints.
    pub polynomial_term: bool,
}

impl Default for RbfConfig {
    fn default() -> Self {
        RbfConfig {
            kernel: RbfKernel::ThinPlate,
            lambda: 0.0,
            polynomial_term: true,
        }
    }
}

impl RbfConfig {
    pub fn validate(&self) -> Result<()> {
        match self.kernel {
            RbfKernel::Gaussian { epsilon } | RbfKernel::Multiquadric { epsilon }
                if !(epsilon > 0.0) || !epsilon.is_finite() =>
            {
                return Err(NbfError::invalid("RBF shape parameter epsilon must be positive"));
            }
            _ => {}
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(NbfError::invalid("RBF regularization must be non-negative"));
        }
        Ok(())
    }
}

/// Factored RBF system on centroid-centered node coordinates.
pub struct RbfSystem {
    config: RbfConfig,
    centroid: [f64; 3],
    nodes: Vec<[f64; 3]>,
    lu: Factorized,
}

impl RbfSystem {
    pub fn new(layout: &ElectrodeLayout, config: &RbfConfig) -> Result<Self> {
        config.validate()?;
        if layout.is_empty() {
            return Err(NbfError::invalid("RBF needs at least one node"));
        }
        let pts = layout.positions();
        let n = pts.len();
        let mut centroid = [0.0; 3];
        for p in &pts {
            for k in 0..3 {
                centroid[k] += p[k] / n as f64;
            }
        }
        let nodes: Vec<[f64; 3]> = pts.iter().map(|&p| sub(p, centroid)).collect();
        let aux = if config.polynomial_term { 4 } else { 0 };
        let mut a = DMatrix::zeros(n + aux, n + aux);
        for i in 0..n {
            for j in i..n {
                let v = config.kernel.eval(norm3(sub(nodes[i], nodes[j])));
                a[(i, j)] = v;
                a[(j, i)] = v;
            }
            a[(i, i)] += config.lambda;
            if config.polynomial_term {
                let poly = [1.0, nodes[i][0], nodes[i][1], nodes[i][2]];
                for (k, p) in poly.iter().enumerate() {
                    a[(i, n + k)] = *p;
                    a[(n + k, i)] = *p;
                }
            }
        }
        let lu = Factorized::new(a, "radial basis")?;
        Ok(RbfSystem {
            config: config.clone(),
            centroid,
            nodes,
            lu,
        })
    }

    /// Kernel weights followed by the affine coefficients (if enabled).
    pub fn coefficients(&self, values: &[f64]) -> Result<Vec<f64>> {
        if values.len() != self.nodes.len() {
            return Err(NbfError::invalid("value count does not match node count"));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(NbfError::invalid("non-finite node value"));
        }
        let mut rhs = values.to_vec();
        if self.config.polynomial_term {
            rhs.extend_from_slice(&[0.0; 4]);
        }
        self.lu.solve(&rhs)
    }

    pub fn query_row(&self, q: [f64; 3]) -> Vec<f64> {
        let q = sub(q, self.centroid);
        let mut row: Vec<f64> = self
            .nodes
            .iter()
            .map(|p| self.config.kernel.eval(norm3(sub(q, *p))))
            .collect();
        if self.config.polynomial_term {
            row.extend_from_slice(&[1.0, q[0], q[1], q[2]]);
        }
        row
    }

    pub fn solve(&self, values: &[f64]) -> Result<RbfSolution> {
        let coeffs = self.coefficients(values)?;
        Ok(RbfSolution {
            config: self.config.clone(),
            centroid: self.centroid,
            nodes: self.nodes.clone(),
            coeffs,
        })
    }
}

#[derive(Clone, Debug)]
pub struct RbfSolution {
    config: RbfConfig,
    centroid: [f64; 3],
    nodes: Vec<[f64; 3]>,
    coeffs: Vec<f64>,
}

impl RbfSolution {
    pub fn weights(&self) -> &[f64] {
        &self.coeffs[..self.nodes.len()]
    }

    pub fn affine(&self) -> Option<&[f64]> {
        self.config.polynomial_term.then(|| &self.coeffs[self.nodes.len()..])
    }
}

pub fn rbf_fit(train_layout: &ElectrodeLayout, values_at_train: &[f64], config: &RbfConfig) -> Result<RbfSolution> {
    RbfSystem::new(train_layout, config)?.solve(values_at_train)
}

pub fn rbf_predict(solution: &RbfSolution, query_position: [f64; 3]) -> f64 {
    let q = sub(query_position, solution.centroid);
    let radial: f64 = solution
        .nodes
        .iter()
        .zip(solution.weights())
        .map(|(p, w)| w * solution.config.kernel.eval(norm3(sub(q, *p))))
        .sum();
    let affine = solution
        .affine()
        .map_or(0.0, |a| a[0] + a[1] * q[0] + a[2] * q[1] + a[3] * q[2]);
    radial + affine
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::fibonacci_montage;

    fn layout() -> ElectrodeLayout {
        fibonacci_montage(24, [0.0, 0.0, 0.01], 0.09).unwrap()
    }

    #[test]
    fn thin_plate_interpolates_nodes() {
        let layout = layout();
        let values: Vec<f64> = layout.iter().map(|e| 1e-5 * (40.0 * e.pos[1]).cos() + 3e-6).collect();
        let sol = rbf_fit(&layout, &values, &RbfConfig::default()).unwrap();
        for (e, v) in layout.iter().zip(&values) {
            assert!(((rbf_predict(&sol, e.pos) - v) / v).abs() < 1e-8);
        }
    }

    #[test]
    fn affine_data_is_reproduced() {
        let layout = layout();
        let f = |p: [f64; 3]| 2e-6 + 3e-5 * p[0] - 1e-5 * p[1] + 4e-5 * p[2];
        let values: Vec<f64> = layout.iter().map(|e| f(e.pos)).collect();
        let sol = rbf_fit(&layout, &values, &RbfConfig::default()).unwrap();
        for q in [[0.0, 0.0, 0.0], [0.05, -0.03, 0.07], [0.2, 0.1, -0.1]] {
            assert!((rbf_predict(&sol, q) - f(q)).abs() < 1e-8 * f(q).abs().max(1e-6));
        }
    }

    #[test]
    fn other_kernels_interpolate() {
        let layout = layout();
        let values: Vec<f64> = layout.iter().map(|e| (20.0 * e.pos[0]).sin() + e.pos[2]).collect();
        for kernel in [
            RbfKernel::Gaussian { epsilon: 10.0 },
            RbfKernel::Multiquadric { epsilon: 10.0 },
            RbfKernel::Linear,
        ] {
            let cfg = RbfConfig { kernel, lambda: 0.0, polynomial_term: false };
            let sol = rbf_fit(&layout, &values, &cfg).unwrap();
            for (e, v) in layout.iter().zip(&values) {
                assert!((rbf_predict(&sol, e.pos) - v).abs() < 1e-7 * v.abs().max(1.0), "{kernel:?}");
            }
        }
    }

    #[test]
    fn rejects_bad_epsilon() {
        let cfg = RbfConfig { kernel: RbfKernel::Gaussian { epsilon: 0.0 }, ..Default::default() };
        assert!(rbf_fit(&layout(), &[0.0; 24], &cfg).is_err());
    }

    #[test]
    fn kernel_json_shape() {
        let cfg: RbfConfig = serde_json::from_str(r#"{"kernel": {"kind": "gaussian", "epsilon": 5.0}, "lambda": 0.0, "polynomial_term": false}"#).unwrap();
        assert_eq!(cfg.kernel, RbfKernel::Gaussian { epsilon: 5.0 });
    }
}
