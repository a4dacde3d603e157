//! Dense feed-forward network: ReLU hidden layers, one sigmoid output,
//! binary cross-entropy, mini-batch Adam.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::Example;
use crate::error::{Error, Result};

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MlpConfig {
    pub hidden_layers: usize,
    pub hidden_width: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for MlpConfig {
    fn default() -> Self {
        MlpConfig {
            hidden_layers: 10,
            hidden_width: 32,
            epochs: 200,
            learning_rate: 1e-3,
            batch_size: 32,
            seed: 0,
        }
    }
}

impl MlpConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_layers == 0 || self.hidden_width == 0 || self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::usage("MLP layer count, width, epochs and batch size must be positive"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::usage("MLP learning rate must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Sigmoid,
}

/// `weights` is row-major, `rows` outputs by `cols` inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub rows: usize,
    pub cols: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub config: MlpConfig,
    pub input_dim: usize,
    /// Per-feature standardization fitted on the training data.
    pub feature_mean: Vec<f64>,
    pub feature_scale: Vec<f64>,
    pub layers: Vec<Layer>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingReport {
    /// Mean loss over each epoch's mini-batches, measured before each update.
    pub epoch_losses: Vec<f64>,
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Binary cross-entropy from the logit, stable for large |z|.
fn bce_from_logit(z: f64, y: f64) -> f64 {
    z.max(0.0) - y * z + (-z.abs()).exp().ln_1p()
}

type Grads = Vec<(Vec<f64>, Vec<f64>)>;

impl Mlp {
    /// He-initialized network with identity standardization.
    pub fn init(input_dim: usize, cfg: &MlpConfig) -> Result<Self> {
        cfg.validate()?;
        if input_dim == 0 {
            return Err(Error::usage("MLP needs at least one input feature"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut dims = vec![input_dim];
        dims.extend(std::iter::repeat_n(cfg.hidden_width, cfg.hidden_layers));
        dims.push(1);
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, d)| {
                let normal = Normal::new(0.0, (2.0 / d[0] as f64).sqrt()).expect("positive std");
                Layer {
                    rows: d[1],
                    cols: d[0],
                    weights: (0..d[0] * d[1]).map(|_| normal.sample(&mut rng)).collect(),
                    bias: vec![0.0; d[1]],
                    activation: if i + 2 == dims.len() { Activation::Sigmoid } else { Activation::Relu },
                }
            })
            .collect();
        Ok(Mlp {
            config: *cfg,
            input_dim,
            feature_mean: vec![0.0; input_dim],
            feature_scale: vec![1.0; input_dim],
            layers,
        })
    }

    fn standardize(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(self.feature_mean.iter().zip(&self.feature_scale))
            .map(|(v, (m, s))| (v - m) / s)
            .collect()
    }

    /// Pre-activations of every layer for a standardized input.
    fn forward(&self, x: &[f64]) -> Vec<Vec<f64>> {
        let mut zs: Vec<Vec<f64>> = Vec::with_capacity(self.layers.len());
        for (l, layer) in self.layers.iter().enumerate() {
            let input: Vec<f64> = if l == 0 {
                x.to_vec()
            } else {
                zs[l - 1].iter().map(|z| z.max(0.0)).collect()
            };
            let z = (0..layer.rows)
                .map(|r| {
                    let row = &layer.weights[r * layer.cols..(r + 1) * layer.cols];
                    layer.bias[r] + row.iter().zip(&input).map(|(w, a)| w * a).sum::<f64>()
                })
                .collect();
            zs.push(z);
        }
        zs
    }

    fn logit(&self, x: &[f64]) -> f64 {
        self.forward(x).last().expect("at least one layer")[0]
    }

    /// Failure probability for raw (unstandardized) features.
    pub fn predict(&self, features: &[f64]) -> Result<f64> {
        if features.len() != self.input_dim {
            return Err(Error::usage(format!(
                "model expects {} features, got {}",
                self.input_dim,
                features.len()
            )));
        }
        Ok(sigmoid(self.logit(&self.standardize(features))))
    }

    /// Mean loss over standardized inputs.
    pub fn loss(&self, xs: &[Vec<f64>], ys: &[bool]) -> f64 {
        xs.iter()
            .zip(ys)
            .map(|(x, &y)| bce_from_logit(self.logit(x), y as u8 as f64))
            .sum::<f64>()
            / xs.len() as f64
    }

    /// Mean loss and its gradient over standardized inputs.
    pub fn loss_and_gradient(&self, xs: &[Vec<f64>], ys: &[bool]) -> (f64, Grads) {
        let mut grads: Grads = self
            .layers
            .iter()
            .map(|l| (vec![0.0; l.weights.len()], vec![0.0; l.bias.len()]))
            .collect();
        let n = xs.len() as f64;
        let mut loss = 0.0;
        for (x, &y) in xs.iter().zip(ys) {
            let y = y as u8 as f64;
            let zs = self.forward(x);
            let out = zs.last().unwrap()[0];
            loss += bce_from_logit(out, y);
            let mut delta = vec![(sigmoid(out) - y) / n];
            for l in (0..self.layers.len()).rev() {
                let layer = &self.layers[l];
                let input: Vec<f64> = if l == 0 {
                    x.clone()
                } else {
                    zs[l - 1].iter().map(|z| z.max(0.0)).collect()
                };
                let (gw, gb) = &mut grads[l];
                for r in 0..layer.rows {
                    gb[r] += delta[r];
                    let row = &mut gw[r * layer.cols..(r + 1) * layer.cols];
                    for (g, a) in row.iter_mut().zip(&input) {
                        *g += delta[r] * a;
                    }
                }
                if l > 0 {
                    let mut prev = vec![0.0; layer.cols];
                    for (row, d) in layer.weights.chunks_exact(layer.cols).zip(&delta) {
                        for (p, w) in prev.iter_mut().zip(row) {
                            *p += w * d;
                        }
                    }
                    for (p, z) in prev.iter_mut().zip(&zs[l - 1]) {
                        if *z <= 0.0 {
                            *p = 0.0;
                        }
                    }
                    delta = prev;
                }
            }
        }
        (loss / n, grads)
    }

    /// Fits standardization and trains on `data`, which should already be balanced.
    pub fn train(data: &[Example], cfg: &MlpConfig) -> Result<(Mlp, TrainingReport)> {
        cfg.validate()?;
        let Some(first) = data.first() else {
            return Err(Error::usage("cannot train on an empty dataset"));
        };
        let dim = first.features.values.len();
        if data.iter().any(|e| e.features.values.len() != dim) {
            return Err(Error::usage("training examples have differing feature counts"));
        }
        let mut model = Mlp::init(dim, cfg)?;
        let n = data.len() as f64;
        for j in 0..dim {
            let mean = data.iter().map(|e| e.features.values[j]).sum::<f64>() / n;
            let var = data.iter().map(|e| (e.features.values[j] - mean).powi(2)).sum::<f64>() / n;
            // a constant feature passes through unchanged rather than collapsing to zero
            if var > 0.0 {
                model.feature_mean[j] = mean;
                model.feature_scale[j] = var.sqrt();
            }
        }
        let xs: Vec<Vec<f64>> = data.iter().map(|e| model.standardize(&e.features.values)).collect();
        let ys: Vec<bool> = data.iter().map(|e| e.failed).collect();

        let mut m1: Grads = model.layers.iter().map(|l| (vec![0.0; l.weights.len()], vec![0.0; l.bias.len()])).collect();
        let mut m2 = m1.clone();
        let mut step = 0i32;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(1);
        let mut order: Vec<usize> = (0..data.len()).collect();
        let mut epoch_losses = Vec::with_capacity(cfg.epochs);
        for epoch in 0..cfg.epochs {
            order.shuffle(&mut rng);
            let mut total = 0.0;
            for chunk in order.chunks(cfg.batch_size) {
                let bx: Vec<Vec<f64>> = chunk.iter().map(|&i| xs[i].clone()).collect();
                let by: Vec<bool> = chunk.iter().map(|&i| ys[i]).collect();
                let (loss, grads) = model.loss_and_gradient(&bx, &by);
                if !loss.is_finite() {
                    return Err(Error::TrainingDiverged { epoch });
                }
                total += loss * chunk.len() as f64;
                step += 1;
                let c1 = 1.0 - BETA1.powi(step);
                let c2 = 1.0 - BETA2.powi(step);
                for (l, (gw, gb)) in grads.iter().enumerate() {
                    let layer = &mut model.layers[l];
                    let (mw, mb) = &mut m1[l];
                    let (vw, vb) = &mut m2[l];
                    for (params, g, m, v) in [
                        (&mut layer.weights, gw, mw, vw),
                        (&mut layer.bias, gb, mb, vb),
                    ] {
                        for k in 0..params.len() {
                            m[k] = BETA1 * m[k] + (1.0 - BETA1) * g[k];
                            v[k] = BETA2 * v[k] + (1.0 - BETA2) * g[k] * g[k];
                            params[k] -= cfg.learning_rate * (m[k] / c1) / ((v[k] / c2).sqrt() + ADAM_EPS);
                        }
                    }
                }
            }
            let mean = total / n;
            if !mean.is_finite() || model.layers.iter().any(|l| l.weights.iter().any(|w| !w.is_finite())) {
                return Err(Error::TrainingDiverged { epoch });
            }
            epoch_losses.push(mean);
        }
        Ok((model, TrainingReport { epoch_losses }))
    }
}

fn param_mut(m: &mut Mlp, layer: usize, bias: bool, k: usize) -> &mut f64 {
    if bias {
        &mut m.layers[layer].bias[k]
    } else {
        &mut m.layers[layer].weights[k]
    }
}

/// Largest relative error between analytic and central-difference
/// gradients over every parameter, on standardized inputs `xs`.
///
/// Relative error is `|a - n| / max(|a|, |n|, floor)`; the floor keeps
/// near-zero gradients from dividing rounding noise by rounding noise.
pub fn gradient_check(model: &Mlp, xs: &[Vec<f64>], ys: &[bool], eps: f64, floor: f64) -> f64 {
    let (_, analytic) = model.loss_and_gradient(xs, ys);
    let mut probe = model.clone();
    let mut worst: f64 = 0.0;
    for (l, (wg, bg)) in analytic.iter().enumerate() {
        for bias in [false, true] {
            let len = if bias { model.layers[l].bias.len() } else { model.layers[l].weights.len() };
            for k in 0..len {
                let orig = *param_mut(&mut probe, l, bias, k);
                *param_mut(&mut probe, l, bias, k) = orig + eps;
                let up = probe.loss(xs, ys);
                *param_mut(&mut probe, l, bias, k) = orig - eps;
                let down = probe.loss(xs, ys);
                *param_mut(&mut probe, l, bias, k) = orig;
                let numeric = (up - down) / (2.0 * eps);
                let a = if bias { bg[k] } else { wg[k] };
                let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
                worst = worst.max(rel);
            }
        }
    }
    worst
}
