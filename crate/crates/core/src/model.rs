//! The coordinate network: Fourier features feeding a ReLU MLP with
//! dropout and input skip connections, plus inference and scalp rendering.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoding::{FourierBasis, NormalizationParams};
use crate::error::{NbfError, Result};
use crate::recording::{ElectrodeLayout, TimeWindow};

/// Weight initialization recorded in checkpoints.
pub const INIT_SCHEME: &str = "he_uniform_hidden+lecun_uniform_output,zero_bias";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelArch {
    /// Number of weight layers L (L - 1 hidden layers plus the output head).
    pub depth: usize,
    pub width: usize,
    /// 1-based hidden layer indices whose input is `[h; gamma]`.
    pub skip_layers: BTreeSet<usize>,
    pub dropout_rate: f64,
    pub input_dim: usize,
}

impl ModelArch {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.width == 0 || self.input_dim == 0 {
            return Err(NbfError::invalid("depth, width and input_dim must be positive"));
        }
        if let Some(&bad) = self.skip_layers.iter().find(|&&l| l == 0 || l >= self.depth) {
            return Err(NbfError::invalid(format!(
                "skip layer {bad} outside 1..={}",
                self.depth.saturating_sub(1)
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(NbfError::invalid(format!(
                "dropout rate must lie in [0, 1), got {}",
                self.dropout_rate
            )));
        }
        Ok(())
    }

    /// `(rows, cols)` of every weight matrix, first hidden layer to output head.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        (1..=self.depth)
            .map(|l| {
                let base = if l == 1 { self.input_dim } else { self.width };
                let cols = base + if self.skip_layers.contains(&l) { self.input_dim } else { 0 };
                let rows = if l == self.depth { 1 } else { self.width };
                (rows, cols)
            })
            .collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.layer_shapes().iter().map(|(r, c)| r * c + r).sum()
    }
}

/// One affine layer, weights row-major `rows x cols`.
#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub rows: usize,
    pub cols: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Layer {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Layer {
            rows,
            cols,
            weights: vec![0.0; rows * cols],
            bias: vec![0.0; rows],
        }
    }

    pub fn zeros_like(other: &Layer) -> Self {
        Layer::zeros(other.rows, other.cols)
    }
}

/// How raw `(x, y, z, t)` becomes network input.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputOptions {
    /// Min-max normalize coordinates before encoding.
    pub coord_norm: bool,
    /// Targets are z-scored; predictions are denormalized.
    pub zscore: bool,
}

impl Default for InputOptions {
    fn default() -> Self {
        InputOptions {
            coord_norm: true,
            zscore: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// A trained (or initialized) field for one time window.
#[derive(Clone, Debug, PartialEq)]
pub struct FieldModel {
    pub arch: ModelArch,
    /// `None` feeds the (normalized) 4-vector straight to the MLP.
    pub basis: Option<FourierBasis>,
    pub norm: NormalizationParams,
    pub input: InputOptions,
    pub layers: Vec<Layer>,
    pub window: TimeWindow,
    pub sample_rate: f64,
    pub train_layout: ElectrodeLayout,
    pub init_seed: u64,
}

/// Per-layer intermediates kept for backpropagation.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    pub batch: usize,
    pub features: Vec<f64>,
    /// Input fed to each layer (including skip concatenations).
    pub inputs: Vec<Vec<f64>>,
    /// Hidden activations after dropout and ReLU.
    pub activations: Vec<Vec<f64>>,
    /// Inverted-dropout multipliers per hidden layer (empty when inactive).
    pub masks: Vec<Vec<f64>>,
    pub outputs: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Prediction {
    pub volts: f64,
    /// Set when `t` lies outside the model's window but within one window length of it.
    pub extrapolated: bool,
}

/// Draws a fan-in scaled model. Deterministic for a given seed.
pub fn init_model(
    arch: ModelArch,
    basis: Option<FourierBasis>,
    norm: NormalizationParams,
    input: InputOptions,
    window: TimeWindow,
    sample_rate: f64,
    train_layout: ElectrodeLayout,
    seed: u64,
) -> Result<FieldModel> {
    arch.validate()?;
    norm.validate()?;
    let expected_in = basis.as_ref().map_or(4, FourierBasis::output_dim);
    if let Some(b) = &basis {
        b.validate()?;
    }
    if arch.input_dim != expected_in {
        return Err(NbfError::invalid(format!(
            "arch input_dim {} does not match encoding width {expected_in}",
            arch.input_dim
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let depth = arch.depth;
    let layers = arch
        .layer_shapes()
        .into_iter()
        .enumerate()
        .map(|(i, (rows, cols))| {
            let gain = if i + 1 == depth { 3.0 } else { 6.0 };
            let bound = (gain / cols as f64).sqrt();
            let weights = (0..rows * cols).map(|_| rng.random_range(-bound..bound)).collect();
            Layer {
                rows,
                cols,
                weights,
                bias: vec![0.0; rows],
            }
        })
        .collect();
    Ok(FieldModel {
        arch,
        basis,
        norm,
        input,
        layers,
        window,
        sample_rate,
        train_layout,
        init_seed: seed,
    })
}

/// `C (m x n) = A (m x k) * B^T` where `B` is `n x k` row-major.
fn matmul_bt(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    unsafe {
        matrixmultiply::dgemm(
            m, k, n, 1.0, a.as_ptr(), k as isize, 1, b.as_ptr(), 1, k as isize, 0.0,
            c.as_mut_ptr(), n as isize, 1,
        );
    }
}

/// `C (m x n) = A^T * B` where `A` is `k x m` and `B` is `k x n`, both row-major.
fn matmul_at(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    unsafe {
        matrixmultiply::dgemm(
            m, k, n, 1.0, a.as_ptr(), 1, m as isize, b.as_ptr(), n as isize, 1, 0.0,
            c.as_mut_ptr(), n as isize, 1,
        );
    }
}

/// `C (m x n) = A (m x k) * B (k x n)`, row-major.
fn matmul(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    unsafe {
        matrixmultiply::dgemm(
            m, k, n, 1.0, a.as_ptr(), k as isize, 1, b.as_ptr(), n as isize, 1, 0.0,
            c.as_mut_ptr(), n as isize, 1,
        );
    }
}

impl FieldModel {
    pub fn input_dim(&self) -> usize {
        self.arch.input_dim
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    /// Maps raw coordinates to the 4-vector the encoding sees.
    pub fn coords(&self, p: [f64; 3], t: f64) -> [f64; 4] {
        if self.input.coord_norm {
            self.norm.normalize_coords(p, t)
        } else {
            [p[0], p[1], p[2], t]
        }
    }

    /// Network input for an already-normalized 4-vector.
    pub fn encode_into(&self, v: [f64; 4], out: &mut [f64]) {
        match &self.basis {
            Some(basis) => basis.encode_into(v, out),
            None => out.copy_from_slice(&v),
        }
    }

    pub fn features_for(&self, points: &[([f64; 3], f64)]) -> Vec<f64> {
        let d = self.input_dim();
        let mut out = vec![0.0; points.len() * d];
        for (chunk, &(p, t)) in out.chunks_exact_mut(d).zip(points) {
            self.encode_into(self.coords(p, t), chunk);
        }
        out
    }

    pub fn target_to_net(&self, volts: f64) -> f64 {
        if self.input.zscore {
            self.norm.normalize_voltage(volts)
        } else {
            volts
        }
    }

    pub fn net_to_volts(&self, net: f64) -> f64 {
        if self.input.zscore {
            self.norm.denormalize_voltage(net)
        } else {
            net
        }
    }

    /// Runs a batch of encoded inputs (`batch x input_dim`, row-major).
    ///
    /// In train mode with a positive dropout rate, `dropout_rng` supplies the
    /// masks; kept units are scaled by `1 / (1 - p)` so eval needs no rescaling.
    pub fn forward_batch(
        &self,
        features: &[f64],
        batch: usize,
        mode: Mode,
        dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<ForwardCache> {
        let in0 = self.input_dim();
        if features.len() != batch * in0 {
            return Err(NbfError::invalid(format!(
                "feature buffer holds {} values, expected {batch} x {in0}",
                features.len()
            )));
        }
        let p = self.arch.dropout_rate;
        let mut rng = match (mode, p > 0.0) {
            (Mode::Train, true) => dropout_rng,
            _ => None,
        };
        let keep_scale = 1.0 / (1.0 - p);
        let depth = self.arch.depth;
        let mut inputs = Vec::with_capacity(depth);
        let mut activations: Vec<Vec<f64>> = Vec::with_capacity(depth.saturating_sub(1));
        let mut masks = Vec::with_capacity(depth.saturating_sub(1));

        for (idx, layer) in self.layers.iter().enumerate() {
            let l = idx + 1;
            let prev: &[f64] = if l == 1 { features } else { &activations[idx - 1] };
            let input = if self.arch.skip_layers.contains(&l) {
                let prev_dim = layer.cols - in0;
                let mut cat = vec![0.0; batch * layer.cols];
                for b in 0..batch {
                    let row = &mut cat[b * layer.cols..(b + 1) * layer.cols];
                    row[..prev_dim].copy_from_slice(&prev[b * prev_dim..(b + 1) * prev_dim]);
                    row[prev_dim..].copy_from_slice(&features[b * in0..(b + 1) * in0]);
                }
                cat
            } else {
                prev.to_vec()
            };
            let mut z = vec![0.0; batch * layer.rows];
            matmul_bt(batch, layer.cols, layer.rows, &input, &layer.weights, &mut z);
            for row in z.chunks_exact_mut(layer.rows) {
                for (zi, bi) in row.iter_mut().zip(&layer.bias) {
                    *zi += bi;
                }
            }
            if l < depth {
                let mut mask = Vec::new();
                if let Some(rng) = rng.as_deref_mut() {
                    mask = (0..z.len())
                        .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep_scale })
                        .collect();
                    for (zi, mi) in z.iter_mut().zip(&mask) {
                        *zi *= mi;
                    }
                }
                for zi in z.iter_mut() {
                    *zi = zi.max(0.0);
                }
                if z.iter().any(|v| !v.is_finite()) {
                    return Err(NbfError::NumericOverflow {
                        layer: l,
                        message: "non-finite activation".into(),
                    });
                }
                masks.push(mask);
                activations.push(z);
            } else {
                if z.iter().any(|v| !v.is_finite()) {
                    return Err(NbfError::NumericOverflow {
                        layer: l,
                        message: "non-finite output".into(),
                    });
                }
                inputs.push(input);
                return Ok(ForwardCache {
                    batch,
                    features: features.to_vec(),
                    inputs,
                    activations,
                    masks,
                    outputs: z,
                });
            }
            inputs.push(input);
        }
        unreachable!("depth >= 1 guarantees an output layer")
    }

    /// Single-point forward on a normalized 4-vector. Returns the normalized
    /// prediction and the cache.
    pub fn forward(&self, v: [f64; 4], mode: Mode, dropout_seed: u64) -> Result<(f64, ForwardCache)> {
        let mut x = vec![0.0; self.input_dim()];
        self.encode_into(v, &mut x);
        let mut rng = ChaCha8Rng::seed_from_u64(dropout_seed);
        let cache = self.forward_batch(&x, 1, mode, Some(&mut rng))?;
        Ok((cache.outputs[0], cache))
    }

    /// Backpropagates `d loss / d output` (one value per batch row) through a
    /// cached forward pass, returning gradients shaped like `self.layers`.
    pub fn backward_from_cache(&self, cache: &ForwardCache, d_out: &[f64]) -> Vec<Layer> {
        let batch = cache.batch;
        let depth = self.arch.depth;
        let in0 = self.input_dim();
        let mut grads: Vec<Layer> = self.layers.iter().map(Layer::zeros_like).collect();
        let mut dz = d_out.to_vec();
        for idx in (0..depth).rev() {
            let layer = &self.layers[idx];
            let grad = &mut grads[idx];
            matmul_at(layer.rows, batch, layer.cols, &dz, &cache.inputs[idx], &mut grad.weights);
            for row in dz.chunks_exact(layer.rows) {
                for (g, d) in grad.bias.iter_mut().zip(row) {
                    *g += d;
                }
            }
            if idx == 0 {
                break;
            }
            let mut d_input = vec![0.0; batch * layer.cols];
            matmul(batch, layer.rows, layer.cols, &dz, &layer.weights, &mut d_input);
            // Drop the columns that belong to the skip copy of the features.
            let prev_dim = if self.arch.skip_layers.contains(&(idx + 1)) {
                layer.cols - in0
            } else {
                layer.cols
            };
            let act = &cache.activations[idx - 1];
            let mask = &cache.masks[idx - 1];
            let mut next = vec![0.0; batch * prev_dim];
            for b in 0..batch {
                let src = &d_input[b * layer.cols..b * layer.cols + prev_dim];
                let dst = &mut next[b * prev_dim..(b + 1) * prev_dim];
                let a = &act[b * prev_dim..(b + 1) * prev_dim];
                for j in 0..prev_dim {
                    if a[j] > 0.0 {
                        dst[j] = src[j] * if mask.is_empty() { 1.0 } else { mask[b * prev_dim + j] };
                    }
                }
            }
            dz = next;
        }
        grads
    }

    /// Eval-mode prediction in volts at many `(position, time)` points.
    pub fn predict_many(&self, points: &[([f64; 3], f64)]) -> Result<Vec<f64>> {
        const CHUNK: usize = 512;
        let mut out = Vec::with_capacity(points.len());
        for chunk in points.chunks(CHUNK) {
            let features = self.features_for(chunk);
            let cache = self.forward_batch(&features, chunk.len(), Mode::Eval, None)?;
            out.extend(cache.outputs.iter().map(|&v| self.net_to_volts(v)));
        }
        Ok(out)
    }

    /// Voltage at an arbitrary scalp position and time.
    ///
    /// Times more than one window length outside the model's window are
    /// rejected; closer ones are answered with `extrapolated` set.
    pub fn predict_voltage(&self, p: [f64; 3], t: f64) -> Result<Prediction> {
        let extrapolated = self.check_time(t)?;
        let v = self.coords(p, t);
        let (out, _) = self.forward(v, Mode::Eval, 0)?;
        Ok(Prediction {
            volts: self.net_to_volts(out),
            extrapolated,
        })
    }

    fn check_time(&self, t: f64) -> Result<bool> {
        let w = &self.window;
        let len = w.duration();
        if !t.is_finite() || t < w.t_start - len || t > w.t_end + len {
            return Err(NbfError::OutOfDomain {
                t,
                start: w.t_start,
                end: w.t_end,
            });
        }
        Ok(!(t >= w.t_start && t <= w.t_end))
    }

    /// Evaluates the field on an `R x R` grid over the projected scalp disk.
    pub fn render_grid(&self, projection: &ScalpProjection, resolution: usize, t: f64) -> Result<ScalpGrid> {
        projection.validate()?;
        if resolution < 2 {
            return Err(NbfError::invalid("resolution must be at least 2"));
        }
        self.check_time(t)?;
        let cells = projection.grid_points(resolution);
        let inside: Vec<([f64; 3], f64)> = cells.iter().flatten().map(|&p| (p, t)).collect();
        let values = self.predict_many(&inside)?;
        let mut it = values.into_iter();
        let mut grid = ScalpGrid {
            resolution,
            values: vec![0.0; resolution * resolution],
            mask: vec![false; resolution * resolution],
        };
        for (i, cell) in cells.iter().enumerate() {
            if cell.is_some() {
                grid.values[i] = it.next().expect("one value per inside cell");
                grid.mask[i] = true;
            }
        }
        Ok(grid)
    }
}

/// Azimuthal equidistant map of the head sphere about its +z axis onto the
/// unit disk: polar angle `max_polar_angle` lands on the disk rim.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalpProjection {
    pub center: [f64; 3],
    pub radius: f64,
    pub max_polar_angle: f64,
}

impl ScalpProjection {
    pub fn hemisphere(center: [f64; 3], radius: f64) -> Self {
        ScalpProjection {
            center,
            radius,
            max_polar_angle: std::f64::consts::FRAC_PI_2,
        }
    }

    /// Sphere fitted to `layout`, with the rim at its lowest electrode.
    pub fn for_layout(layout: &ElectrodeLayout) -> Result<Self> {
        let sphere = crate::baselines::fit_sphere(layout)?;
        let mut proj = ScalpProjection::hemisphere(sphere.center, sphere.radius);
        let max_theta = layout
            .iter()
            .map(|e| {
                let (u, v) = proj.project(e.pos);
                (u * u + v * v).sqrt() * proj.max_polar_angle
            })
            .fold(0.0, f64::max);
        if max_theta > 0.0 {
            proj.max_polar_angle = max_theta.min(std::f64::consts::PI);
        }
        Ok(proj)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.radius > 0.0) || !self.radius.is_finite() {
            return Err(NbfError::invalid(format!("projection radius must be positive, got {}", self.radius)));
        }
        if !(self.max_polar_angle > 0.0 && self.max_polar_angle <= std::f64::consts::PI) {
            return Err(NbfError::invalid("max polar angle must lie in (0, pi]"));
        }
        Ok(())
    }

    /// Disk coordinates of grid node `(row, col)`: x grows with the column,
    /// y decreases with the row; corners are (+-1, +-1).
    pub fn node_uv(resolution: usize, row: usize, col: usize) -> (f64, f64) {
        let step = 2.0 / (resolution - 1) as f64;
        (-1.0 + col as f64 * step, 1.0 - row as f64 * step)
    }

    /// Back-projects a disk point to the sphere, `None` outside the disk.
    pub fn back_project(&self, u: f64, v: f64) -> Option<[f64; 3]> {
        let rho = (u * u + v * v).sqrt();
        if rho > 1.0 {
            return None;
        }
        let theta = rho * self.max_polar_angle;
        let phi = v.atan2(u);
        let (st, ct) = theta.sin_cos();
        Some([
            self.center[0] + self.radius * st * phi.cos(),
            self.center[1] + self.radius * st * phi.sin(),
            self.center[2] + self.radius * ct,
        ])
    }

    /// Inverse of [`ScalpProjection::back_project`] for points on or off the sphere.
    pub fn project(&self, p: [f64; 3]) -> (f64, f64) {
        let d = [p[0] - self.center[0], p[1] - self.center[1], p[2] - self.center[2]];
        let r = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
        let theta = (d[2] / r).clamp(-1.0, 1.0).acos();
        let phi = d[1].atan2(d[0]);
        let rho = theta / self.max_polar_angle;
        (rho * phi.cos(), rho * phi.sin())
    }

    pub fn grid_points(&self, resolution: usize) -> Vec<Option<[f64; 3]>> {
        (0..resolution)
            .flat_map(|row| (0..resolution).map(move |col| (row, col)))
            .map(|(row, col)| {
                let (u, v) = Self::node_uv(resolution, row, col);
                self.back_project(u, v)
            })
            .collect()
    }
}

/// Row-major `R x R` voltages; `mask[i]` is false outside the scalp disk
/// (those cells hold 0.0).
#[derive(Clone, Debug, PartialEq)]
pub struct ScalpGrid {
    pub resolution: usize,
    pub values: Vec<f64>,
    pub mask: Vec<bool>,
}

impl ScalpGrid {
    pub fn get(&self, row: usize, col: usize) -> Option<f64> {
        let i = row * self.resolution + col;
        self.mask[i].then_some(self.values[i])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoding::sample_fourier_basis;
    use crate::recording::Electrode;

    pub(crate) fn test_window() -> TimeWindow {
        TimeWindow {
            index: 0,
            t_start: 0.0,
            t_end: 3.0,
            sample_start: 0,
            sample_end: 384,
        }
    }

    fn layout() -> ElectrodeLayout {
        ElectrodeLayout::new(vec![
            Electrode::new("A", [0.05, 0.0, 0.07]),
            Electrode::new("B", [-0.05, 0.0, 0.07]),
            Electrode::new("C", [0.0, 0.05, 0.07]),
            Electrode::new("D", [0.0, -0.05, 0.07]),
        ])
        .unwrap()
    }

    fn norm() -> NormalizationParams {
        NormalizationParams {
            s_min: -0.09,
            s_max: 0.09,
            t_min: 0.0,
            t_max: 3.0,
            v_mu: 2e-6,
            v_sigma: 1e-5,
        }
    }

    fn arch(depth: usize, width: usize, m: usize, skips: &[usize], dropout: f64) -> ModelArch {
        ModelArch {
            depth,
            width,
            skip_layers: skips.iter().copied().collect(),
            dropout_rate: dropout,
            input_dim: 2 * m,
        }
    }

    fn model(depth: usize, width: usize, m: usize, skips: &[usize], dropout: f64, seed: u64) -> FieldModel {
        let basis = sample_fourier_basis(m, 3.0, seed).unwrap();
        init_model(
            arch(depth, width, m, skips, dropout),
            Some(basis),
            norm(),
            InputOptions::default(),
            test_window(),
            128.0,
            layout(),
            seed,
        )
        .unwrap()
    }

    #[test]
    fn init_is_deterministic() {
        let a = model(3, 16, 8, &[2], 0.0, 11);
        let b = model(3, 16, 8, &[2], 0.0, 11);
        assert_eq!(a, b);
        let c = model(3, 16, 8, &[2], 0.0, 12);
        assert_ne!(a.layers, c.layers);
    }

    #[test]
    fn large_preset_shapes() {
        let a = arch(8, 1450, 256, &[4], 0.1);
        let shapes = a.layer_shapes();
        assert_eq!(shapes[0], (1450, 512));
        assert_eq!(shapes[3], (1450, 1450 + 512));
        assert_eq!(shapes[7], (1, 1450));
    }

    #[test]
    fn rejects_bad_arch() {
        assert!(arch(4, 8, 4, &[4], 0.0).validate().is_err());
        assert!(arch(4, 8, 4, &[0], 0.0).validate().is_err());
        assert!(arch(4, 8, 4, &[], 1.0).validate().is_err());
        let basis = sample_fourier_basis(4, 1.0, 0).unwrap();
        let err = init_model(
            arch(3, 8, 5, &[], 0.0),
            Some(basis),
            norm(),
            InputOptions::default(),
            test_window(),
            128.0,
            layout(),
            0,
        );
        assert!(matches!(err, Err(NbfError::InvalidArgument(_))));
    }

    #[test]
    fn shape_lattice_forward_backward() {
        for depth in 1..=5 {
            for width in [1, 3, 8] {
                for m in [1, 4] {
                    let skip_sets: Vec<Vec<usize>> = (0..depth).map(|k| (1..=k).collect()).collect();
                    for skips in skip_sets {
                        let mdl = model(depth, width, m, &skips, 0.2, 3);
                        let feats = mdl.features_for(&[([0.01, 0.02, 0.08], 1.0), ([0.0, 0.0, 0.09], 2.5)]);
                        let mut rng = ChaCha8Rng::seed_from_u64(1);
                        let cache = mdl.forward_batch(&feats, 2, Mode::Train, Some(&mut rng)).unwrap();
                        assert_eq!(cache.outputs.len(), 2);
                        let g = mdl.backward_from_cache(&cache, &[1.0, -0.5]);
                        for (gl, l) in g.iter().zip(&mdl.layers) {
                            assert_eq!(gl.weights.len(), l.weights.len());
                            assert_eq!(gl.bias.len(), l.bias.len());
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn no_dropout_train_equals_eval() {
        let mdl = model(4, 16, 8, &[2], 0.0, 5);
        let v = [0.1, -0.3, 0.7, 0.4];
        let (a, _) = mdl.forward(v, Mode::Train, 1).unwrap();
        let (b, _) = mdl.forward(v, Mode::Eval, 2).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn dropout_changes_train_only() {
        let mdl = model(4, 32, 8, &[2], 0.5, 5);
        let v = [0.1, -0.3, 0.7, 0.4];
        let (e1, _) = mdl.forward(v, Mode::Eval, 1).unwrap();
        let (e2, _) = mdl.forward(v, Mode::Eval, 2).unwrap();
        assert_eq!(e1.to_bits(), e2.to_bits());
        let (t1, _) = mdl.forward(v, Mode::Train, 1).unwrap();
        assert_ne!(t1.to_bits(), e1.to_bits());
    }

    #[test]
    fn zero_weights_give_zero() {
        let mut mdl = model(3, 8, 4, &[1], 0.0, 1);
        for l in &mut mdl.layers {
            l.weights.iter_mut().for_each(|w| *w = 0.0);
        }
        for t in [0.0, 1.0, 2.9] {
            let (out, _) = mdl.forward(mdl.coords([0.03, -0.01, 0.08], t), Mode::Eval, 0).unwrap();
            assert_eq!(out, 0.0);
        }
    }

    #[test]
    fn prediction_domain() {
        let mdl = model(3, 8, 4, &[], 0.0, 1);
        let p = [0.0, 0.0, 0.09];
        assert!(!mdl.predict_voltage(p, 1.5).unwrap().extrapolated);
        assert!(mdl.predict_voltage(p, 3.5).unwrap().extrapolated);
        assert!(matches!(mdl.predict_voltage(p, 7.0), Err(NbfError::OutOfDomain { .. })));
        assert!(matches!(mdl.predict_voltage(p, -3.5), Err(NbfError::OutOfDomain { .. })));
    }

    #[test]
    fn prediction_is_continuous_in_time() {
        let mdl = model(4, 32, 16, &[2], 0.0, 9);
        let p = [0.02, 0.03, 0.07];
        let t = 1.5 + 0.5 / 128.0;
        let base = mdl.predict_voltage(p, t).unwrap().volts;
        let mut prev_slope = None;
        for eps in [1e-4, 1e-5, 1e-6] {
            let d = (mdl.predict_voltage(p, t + eps).unwrap().volts - base).abs();
            let slope = d / eps;
            assert!(d.is_finite());
            if let Some(s) = prev_slope {
                // Finite-difference slope stays bounded as eps shrinks.
                assert!(slope <= 2.0 * f64::max(s, 1e-12) + 1e-9, "{slope} vs {s}");
            }
            prev_slope = Some(slope);
        }
    }

    #[test]
    fn grid_mask_and_purity() {
        let mdl = model(3, 16, 8, &[], 0.0, 2);
        let proj = ScalpProjection::hemisphere([0.0, 0.0, 0.0], 0.09);
        let g2 = mdl.render_grid(&proj, 2, 1.0).unwrap();
        assert_eq!(g2.values.len(), 4);
        assert!(g2.mask.iter().all(|m| !m), "corners of a 2x2 grid lie outside the disk");
        let g5 = mdl.render_grid(&proj, 5, 1.0).unwrap();
        let g9 = mdl.render_grid(&proj, 9, 1.0).unwrap();
        for r in 0..5 {
            for c in 0..5 {
                assert_eq!(g5.get(r, c).map(f64::to_bits), g9.get(2 * r, 2 * c).map(f64::to_bits));
            }
        }
        let inside = g9.mask.iter().filter(|m| **m).count();
        assert!(inside > 0 && inside < 81);
        let bad = ScalpProjection::hemisphere([0.0; 3], 0.0);
        assert!(mdl.render_grid(&bad, 4, 1.0).is_err());
        assert!(mdl.render_grid(&proj, 1, 1.0).is_err());
    }

    #[test]
    fn projection_round_trip() {
        let proj = ScalpProjection::hemisphere([0.0, 0.0, 0.04], 0.09);
        for (u, v) in [(0.0, 0.0), (0.3, -0.4), (-0.7, 0.7), (1.0, 0.0)] {
            let p = proj.back_project(u, v).unwrap();
            let (u2, v2) = proj.project(p);
            assert!((u - u2).abs() < 1e-12 && (v - v2).abs() < 1e-12);
        }
        assert!(proj.back_project(0.9, 0.9).is_none());
    }
}
