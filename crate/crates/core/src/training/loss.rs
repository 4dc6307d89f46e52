use crate::error::{NbfError, Result};

/// Huber loss of the residual `pred - target`: quadratic inside `delta`,
/// linear outside. Returns `(loss, d loss / d pred)`.
pub fn huber_loss(pred: f64, target: f64, delta: f64) -> Result<(f64, f64)> {
    if !(delta > 0.0) {
        return Err(NbfError::invalid(format!("Huber delta must be positive, got {delta}")));
    }
    Ok(huber_unchecked(pred - target, delta))
}

#[inline]
pub(crate) fn huber_unchecked(r: f64, delta: f64) -> (f64, f64) {
    if r.abs() < delta {
        (0.5 * r * r, r)
    } else {
        (delta * (r.abs() - 0.5 * delta), delta * r.signum())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Loss {
    Huber { delta: f64 },
    /// Plain squared error `(pred - target)^2`.
    Squared,
}

impl Loss {
    #[inline]
    pub fn eval(&self, pred: f64, target: f64) -> (f64, f64) {
        let r = pred - target;
        match *self {
            Loss::Huber { delta } => huber_unchecked(r, delta),
            Loss::Squared => (r * r, 2.0 * r),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unit_values() {
        assert_eq!(huber_loss(1.3, 1.3, 1.0).unwrap(), (0.0, 0.0));
        assert_eq!(huber_loss(0.5, 0.0, 1.0).unwrap().0, 0.125);
        assert_eq!(huber_loss(3.0, 0.0, 1.0).unwrap().0, 2.5);
        assert_eq!(huber_loss(-3.0, 0.0, 1.0).unwrap().1, -1.0);
        assert!(huber_loss(0.0, 0.0, 0.0).is_err());
        assert!(huber_loss(0.0, 0.0, -1.0).is_err());
    }

    #[test]
    fn derivative_is_clipped_residual() {
        for r in [-5.0, -1.0, -0.3, 0.0, 0.7, 2.0] {
            let (_, d) = huber_loss(r, 0.0, 1.0).unwrap();
            assert_eq!(d, f64::clamp(r, -1.0, 1.0));
        }
    }

    #[test]
    fn c1_at_threshold() {
        for delta in [0.1, 1.0, 2.5] {
            let eps = 1e-12;
            let (l_in, d_in) = huber_loss(delta - eps, 0.0, delta).unwrap();
            let (l_out, d_out) = huber_loss(delta + eps, 0.0, delta).unwrap();
            assert!((l_in - l_out).abs() < 1e-9);
            assert!((d_in - d_out).abs() < 1e-9);
        }
    }
}
