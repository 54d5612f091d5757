//! A small fully-connected gaze-mapping network: five layers, ~30k
//! parameters, unit optical axis in, renormalized unit visual axis out.
//!
//! The network carries a residual skip from input to output, so the
//! identity map (zero kappa) is in easy reach of the optimizer from a
//! small random initialization. Training is full-batch first-order descent
//! with momentum and adaptive per-parameter scaling, deterministic given
//! the seed.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::geometry::UnitVec3;

use super::{CalibrationSet, MapperError, MapperResult};

/// Hidden widths of the five-layer network. Parameter count:
/// 3·96+96 + 3·(96·96+96) + 96·3+3 = 28 611.
pub const DEFAULT_HIDDEN: [usize; 4] = [96, 96, 96, 96];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetTrainConfig {
    pub iterations: u32,
    pub learning_rate: f64,
    /// Momentum coefficient of the first-moment accumulator.
    pub beta1: f64,
    /// Decay of the adaptive second-moment accumulator.
    pub beta2: f64,
    pub epsilon: f64,
    pub seed: u64,
    pub hidden: Vec<usize>,
}

impl Default for NetTrainConfig {
    fn default() -> Self {
        Self {
            iterations: 1500,
            learning_rate: 3e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            seed: 7,
            hidden: DEFAULT_HIDDEN.to_vec(),
        }
    }
}

/// Fully-connected optical-to-visual mapper with tanh activations and a
/// residual skip; the output is renormalized to unit length.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetMapper {
    /// Layer sizes including input (3) and output (3).
    pub layers: Vec<usize>,
    /// Flat parameters: per layer, row-major weights (out×in) then biases.
    pub params: Vec<f64>,
    /// Final training loss (mean 1 − cos).
    pub final_loss: f64,
}

struct Layout {
    /// (weight offset, bias offset, rows, cols) per layer.
    layers: Vec<(usize, usize, usize, usize)>,
    total: usize,
}

fn layout(layers: &[usize]) -> Layout {
    let mut offset = 0;
    let mut entries = Vec::new();
    for w in layers.windows(2) {
        let (cols, rows) = (w[0], w[1]);
        entries.push((offset, offset + rows * cols, rows, cols));
        offset += rows * cols + rows;
    }
    Layout { layers: entries, total: offset }
}

impl NetMapper {
    pub fn parameter_count(&self) -> usize {
        self.params.len()
    }

    /// Xavier-uniform initialization; the output layer starts small so the
    /// residual skip dominates early training.
    fn initialize(hidden: &[usize], seed: u64) -> NetMapper {
        let mut layers = vec![3usize];
        layers.extend_from_slice(hidden);
        layers.push(3);
        let plan = layout(&layers);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = vec![0.0; plan.total];
        let last = plan.layers.len() - 1;
        for (li, &(w_off, b_off, rows, cols)) in plan.layers.iter().enumerate() {
            let bound = (6.0 / (rows + cols) as f64).sqrt();
            let scale = if li == last { 0.01 } else { 1.0 };
            for w in params[w_off..w_off + rows * cols].iter_mut() {
                *w = rng.gen_range(-bound..bound) * scale;
            }
            let _ = b_off; // biases start at zero
        }
        NetMapper { layers, params, final_loss: f64::NAN }
    }

    /// Forward pass; returns the pre-normalization output and, when
    /// requested, the per-layer activations for backprop.
    fn forward(&self, input: &[f64; 3], keep: Option<&mut Vec<Vec<f64>>>) -> [f64; 3] {
        let plan = layout(&self.layers);
        let mut h: Vec<f64> = input.to_vec();
        let mut activations = keep;
        if let Some(acts) = activations.as_deref_mut() {
            acts.clear();
            acts.push(h.clone());
        }
        let last = plan.layers.len() - 1;
        for (li, &(w_off, b_off, rows, cols)) in plan.layers.iter().enumerate() {
            let mut out = vec![0.0; rows];
            for r in 0..rows {
                let mut acc = self.params[b_off + r];
                let row = &self.params[w_off + r * cols..w_off + (r + 1) * cols];
                for (w, x) in row.iter().zip(&h) {
                    acc += w * x;
                }
                out[r] = if li == last { acc } else { acc.tanh() };
            }
            h = out;
            if let Some(acts) = activations.as_deref_mut() {
                acts.push(h.clone());
            }
        }
        [h[0] + input[0], h[1] + input[1], h[2] + input[2]]
    }

    /// Maps a unit optical axis to a unit visual axis.
    pub fn map_direction(&self, optical: &UnitVec3) -> UnitVec3 {
        let x = [optical.x(), optical.y(), optical.z()];
        let y = self.forward(&x, None);
        UnitVec3::from_components(y[0], y[1], y[2]).expect("skip keeps the output nonzero")
    }

    /// Mean (1 − cos) loss and its gradient over a batch.
    pub fn loss_and_gradient(&self, batch: &[([f64; 3], [f64; 3])]) -> (f64, Vec<f64>) {
        let plan = layout(&self.layers);
        let mut grad = vec![0.0; plan.total];
        let mut total_loss = 0.0;
        let scale = 1.0 / batch.len() as f64;
        let mut acts: Vec<Vec<f64>> = Vec::new();
        for (input, target) in batch {
            let y = self.forward(input, Some(&mut acts));
            let norm = (y[0] * y[0] + y[1] * y[1] + y[2] * y[2]).sqrt();
            let n = [y[0] / norm, y[1] / norm, y[2] / norm];
            let cos = n[0] * target[0] + n[1] * target[1] + n[2] * target[2];
            total_loss += (1.0 - cos) * scale;
            // d(1 − n·t)/dy = −(t − (n·t) n)/‖y‖.
            let mut delta: Vec<f64> = (0..3)
                .map(|i| -(target[i] - cos * n[i]) / norm * scale)
                .collect();
            // Backpropagate through the layers (skip connection adds
            // nothing to the layer gradients; its path has no parameters).
            for (li, &(w_off, b_off, rows, cols)) in plan.layers.iter().enumerate().rev() {
                let pre = &acts[li]; // input activation of this layer
                let post = &acts[li + 1];
                let is_last = li == plan.layers.len() - 1;
                let mut dz = vec![0.0; rows];
                for r in 0..rows {
                    dz[r] = if is_last {
                        delta[r]
                    } else {
                        delta[r] * (1.0 - post[r] * post[r])
                    };
                }
                let mut prev_delta = vec![0.0; cols];
                for r in 0..rows {
                    grad[b_off + r] += dz[r];
                    let row = w_off + r * cols;
                    for c in 0..cols {
                        grad[row + c] += dz[r] * pre[c];
                        prev_delta[c] += dz[r] * self.params[row + c];
                    }
                }
                delta = prev_delta;
            }
        }
        (total_loss, grad)
    }
}

/// Trains the network mapper on calibration pairs. Deterministic given the
/// seed; aborts when the loss leaves the finite range.
pub fn fit_net_mapper(
    calib: &CalibrationSet,
    config: &NetTrainConfig,
) -> MapperResult<NetMapper> {
    if calib.len() < 9 {
        return Err(MapperError::TooFewPairs { needed: 9, got: calib.len() });
    }
    let batch: Vec<([f64; 3], [f64; 3])> = calib
        .pairs
        .iter()
        .map(|(o, v)| ([o.x(), o.y(), o.z()], [v.x(), v.y(), v.z()]))
        .collect();

    let mut net = NetMapper::initialize(&config.hidden, config.seed);
    let mut m = vec![0.0; net.params.len()];
    let mut s = vec![0.0; net.params.len()];
    let mut final_loss = f64::NAN;
    for iteration in 0..config.iterations {
        let (loss, grad) = net.loss_and_gradient(&batch);
        if !loss.is_finite() {
            return Err(MapperError::NonFiniteLoss { iteration });
        }
        final_loss = loss;
        let t = (iteration + 1) as i32;
        let bc1 = 1.0 - config.beta1.powi(t);
        let bc2 = 1.0 - config.beta2.powi(t);
        for i in 0..net.params.len() {
            m[i] = config.beta1 * m[i] + (1.0 - config.beta1) * grad[i];
            s[i] = config.beta2 * s[i] + (1.0 - config.beta2) * grad[i] * grad[i];
            let m_hat = m[i] / bc1;
            let s_hat = s[i] / bc2;
            net.params[i] -= config.learning_rate * m_hat / (s_hat.sqrt() + config.epsilon);
        }
    }
    net.final_loss = final_loss;
    Ok(net)
}
