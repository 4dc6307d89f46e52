use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{norm3, sub};
use crate::error::{NbfError, Result};
use crate::recording::ElectrodeLayout;

/// Least-squares head sphere.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SphereFit {
    pub center: [f64; 3],
    pub radius: f64,
    /// RMS distance of the electrodes from the fitted surface, meters.
    pub residual: f64,
}

impl SphereFit {
    /// Unit direction from the center to `p`; `None` at the center itself.
    pub fn direction(&self, p: [f64; 3]) -> Option<[f64; 3]> {
        let d = sub(p, self.center);
        let r = norm3(d);
        if !(r > self.radius * 1e-12) {
            return None;
        }
        Some([d[0] / r, d[1] / r, d[2] / r])
    }

    /// Radial projection of `p` onto the sphere.
    pub fn project(&self, p: [f64; 3]) -> Option<[f64; 3]> {
        self.direction(p).map(|u| {
            [
                self.center[0] + self.radius * u[0],
                self.center[1] + self.radius * u[1],
                self.center[2] + self.radius * u[2],
            ]
        })
    }
}

/// Algebraic sphere fit: solves `|p|^2 = 2 c . p + d` in the least-squares
/// sense (on centroid-centered, RMS-scaled coordinates) and recovers
/// `r^2 = d + |c|^2`.
pub fn fit_sphere(layout: &ElectrodeLayout) -> Result<SphereFit> {
    layout.require_fit_size()?;
    let pts = layout.positions();
    let n = pts.len() as f64;
    let mut centroid = [0.0; 3];
    for p in &pts {
        for k in 0..3 {
            centroid[k] += p[k] / n;
        }
    }
    let centered: Vec<[f64; 3]> = pts.iter().map(|&p| sub(p, centroid)).collect();
    let scale = (centered.iter().map(|q| q.iter().map(|c| c * c).sum::<f64>()).sum::<f64>() / n).sqrt();
    if !(scale > 0.0) {
        return Err(NbfError::DegenerateGeometry("electrodes coincide".into()));
    }
    let rows = centered.len();
    let mut a = DMatrix::zeros(rows, 4);
    let mut b = DVector::zeros(rows);
    for (i, q) in centered.iter().enumerate() {
        let q = [q[0] / scale, q[1] / scale, q[2] / scale];
        a[(i, 0)] = 2.0 * q[0];
        a[(i, 1)] = 2.0 * q[1];
        a[(i, 2)] = 2.0 * q[2];
        a[(i, 3)] = 1.0;
        b[i] = q[0] * q[0] + q[1] * q[1] + q[2] * q[2];
    }
    let svd = a.svd(true, true);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    if !(smin > smax * 1e-9) {
        return Err(NbfError::DegenerateGeometry(
            "electrodes are coplanar or otherwise do not determine a sphere".into(),
        ));
    }
    let x = svd
        .solve(&b, 0.0)
        .map_err(|e| NbfError::DegenerateGeometry(e.to_string()))?;
    let c = [x[0], x[1], x[2]];
    let r2 = x[3] + c[0] * c[0] + c[1] * c[1] + c[2] * c[2];
    if !(r2 > 0.0) {
        return Err(NbfError::DegenerateGeometry("fitted radius is not positive".into()));
    }
    let center = [
        centroid[0] + c[0] * scale,
        centroid[1] + c[1] * scale,
        centroid[2] + c[2] * scale,
    ];
    let radius = r2.sqrt() * scale;
    let residual = (pts
        .iter()
        .map(|&p| (norm3(sub(p, center)) - radius).powi(2))
        .sum::<f64>()
        / n)
        .sqrt();
    Ok(SphereFit {
        center,
        radius,
        residual,
    })
}
