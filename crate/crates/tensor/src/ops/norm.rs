//! Per-channel batch normalization over `[N, C, H, W]`.

use crate::error::{invalid, Result};

/// Numerical floor added to the variance before the square root.
pub const BN_EPSILON: f64 = 1e-5;

/// Running mean/variance tracked across training steps.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl RunningStats {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        }
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    /// Exponential moving average update: `stat <- decay * stat + (1 - decay) * batch`.
    pub fn update(&mut self, batch: &BatchMoments, decay: f64) -> Result<()> {
        if !(decay > 0.0 && decay < 1.0) {
            return Err(invalid("batch_norm", format!("ema decay {decay} outside (0, 1)")));
        }
        if batch.mean.len() != self.mean.len() {
            return Err(invalid(
                "batch_norm",
                format!("{} running channels vs {} batch channels", self.mean.len(), batch.mean.len()),
            ));
        }
        for c in 0..self.mean.len() {
            self.mean[c] = decay * self.mean[c] + (1.0 - decay) * batch.mean[c];
            self.var[c] = decay * self.var[c] + (1.0 - decay) * batch.var[c];
        }
        Ok(())
    }
}

/// Statistics of one training batch. `var` is the unbiased estimate.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchMoments {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Train|eval behavior of a normalization layer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NormMode {
    /// Normalize by batch statistics and fold them into the running stats.
    Train { ema_decay: f64 },
    /// Normalize by the running stats.
    Eval,
}

impl NormMode {
    pub fn train() -> Self {
        NormMode::Train { ema_decay: 0.9 }
    }

    pub fn is_train(&self) -> bool {
        matches!(self, NormMode::Train { .. })
    }
}

pub(crate) struct TrainForward {
    pub output: Vec<f64>,
    pub normalized: Vec<f64>,
    pub inv_std: Vec<f64>,
    pub moments: BatchMoments,
}

pub(crate) fn train_forward(
    x: &[f64],
    dims: (usize, usize, usize, usize),
    gamma: &[f64],
    beta: &[f64],
) -> TrainForward {
    let (n, c, h, w) = dims;
    let area = h * w;
    let count = (n * area) as f64;
    let mut normalized = vec![0.0; x.len()];
    let mut output = vec![0.0; x.len()];
    let mut inv_std = vec![0.0; c];
    let mut mean = vec![0.0; c];
    let mut var_unbiased = vec![0.0; c];
    for ch in 0..c {
        let planes = (0..n).map(|b| &x[(b * c + ch) * area..(b * c + ch + 1) * area]);
        let mu = planes.clone().flatten().sum::<f64>() / count;
        let ss: f64 = planes.flatten().map(|v| (v - mu) * (v - mu)).sum();
        let var = ss / count;
        let istd = 1.0 / (var + BN_EPSILON).sqrt();
        for b in 0..n {
            let range = (b * c + ch) * area..(b * c + ch + 1) * area;
            for i in range {
                let xh = (x[i] - mu) * istd;
                normalized[i] = xh;
                output[i] = gamma[ch] * xh + beta[ch];
            }
        }
        inv_std[ch] = istd;
        mean[ch] = mu;
        var_unbiased[ch] = if count > 1.0 { ss / (count - 1.0) } else { var };
    }
    TrainForward {
        output,
        normalized,
        inv_std,
        moments: BatchMoments {
            mean,
            var: var_unbiased,
        },
    }
}

/// Returns (grad_input, grad_gamma, grad_beta).
pub(crate) fn train_backward(
    grad: &[f64],
    normalized: &[f64],
    inv_std: &[f64],
    gamma: &[f64],
    dims: (usize, usize, usize, usize),
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (n, c, h, w) = dims;
    let area = h * w;
    let count = (n * area) as f64;
    let mut gx = vec![0.0; grad.len()];
    let mut gg = vec![0.0; c];
    let mut gb = vec![0.0; c];
    for ch in 0..c {
        let mut sum_g = 0.0;
        let mut sum_gx = 0.0;
        for b in 0..n {
            for i in (b * c + ch) * area..(b * c + ch + 1) * area {
                sum_g += grad[i];
                sum_gx += grad[i] * normalized[i];
            }
        }
        gg[ch] = sum_gx;
        gb[ch] = sum_g;
        let k = gamma[ch] * inv_std[ch] / count;
        for b in 0..n {
            for i in (b * c + ch) * area..(b * c + ch + 1) * area {
                gx[i] = k * (count * grad[i] - sum_g - normalized[i] * sum_gx);
            }
        }
    }
    (gx, gg, gb)
}
