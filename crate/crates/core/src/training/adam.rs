use crate::error::{NbfError, Result};
use crate::model::Layer;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// First and second moment estimates, one buffer per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
}

impl AdamState {
    pub fn new(shapes: &[usize]) -> Self {
        AdamState {
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            step: 0,
        }
    }

    pub fn for_layers(layers: &[Layer]) -> Self {
        let shapes: Vec<usize> = layers
            .iter()
            .flat_map(|l| [l.weights.len(), l.bias.len()])
            .collect();
        Self::new(&shapes)
    }
}

pub fn layer_tensors_mut(layers: &mut [Layer]) -> Vec<&mut [f64]> {
    layers
        .iter_mut()
        .flat_map(|l| [l.weights.as_mut_slice(), l.bias.as_mut_slice()])
        .collect()
}

pub fn layer_tensors(layers: &[Layer]) -> Vec<&[f64]> {
    layers
        .iter()
        .flat_map(|l| [l.weights.as_slice(), l.bias.as_slice()])
        .collect()
}

pub fn global_norm(grads: &[&[f64]]) -> f64 {
    grads.iter().flat_map(|g| g.iter()).map(|g| g * g).sum::<f64>().sqrt()
}

/// Clips gradients to global norm `clip_norm`, then applies one bias-corrected
/// Adam update. Returns the pre-clipping gradient norm.
pub fn adam_step(
    params: &mut [&mut [f64]],
    grads: &[&[f64]],
    state: &mut AdamState,
    lr: f64,
    clip_norm: f64,
) -> Result<f64> {
    let shapes_match = params.len() == grads.len()
        && params.len() == state.m.len()
        && params
            .iter()
            .zip(grads)
            .zip(&state.m)
            .all(|((p, g), m)| p.len() == g.len() && p.len() == m.len());
    if !shapes_match {
        return Err(NbfError::invalid("optimizer state does not match parameter shapes"));
    }
    let norm = global_norm(grads);
    let scale = if norm > clip_norm { clip_norm / norm } else { 1.0 };
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - BETA1.powi(t);
    let bc2 = 1.0 - BETA2.powi(t);
    for (((p, g), m), v) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut())
        .zip(state.v.iter_mut())
    {
        for i in 0..p.len() {
            let gi = g[i] * scale;
            m[i] = BETA1 * m[i] + (1.0 - BETA1) * gi;
            v[i] = BETA2 * v[i] + (1.0 - BETA2) * gi * gi;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            p[i] -= lr * m_hat / (v_hat.sqrt() + EPSILON);
        }
    }
    Ok(norm)
}
