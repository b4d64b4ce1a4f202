//! Stand-alone numeric kernels. The tape reuses these for its forward values.

use rand::Rng;

use super::tensor::Tensor2;
use crate::error::{Error, Result};

/// Whether a forward pass is part of training (dropout active, training
/// adjacency) or inference.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_CUBIC: f64 = 0.044_715;

/// Numerically stable softmax (max-subtracted).
pub fn softmax_row(x: &[f64]) -> Result<Vec<f64>> {
    if x.is_empty() {
        return Err(Error::Domain("softmax of an empty vector".into()));
    }
    let mut out = vec![0.0; x.len()];
    softmax_into(x, &mut out);
    Ok(out)
}

pub(crate) fn softmax_into(x: &[f64], out: &mut [f64]) {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, &v) in out.iter_mut().zip(x) {
        *o = (v - max).exp();
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}

pub fn log_sum_exp(x: &[f64]) -> f64 {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + x.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Row-wise layer normalization with affine gain/bias.
pub fn layer_norm(x: &[f64], gain: &[f64], bias: &[f64], eps: f64) -> Result<Vec<f64>> {
    if x.len() != gain.len() || x.len() != bias.len() {
        return Err(Error::dim(format!(
            "layer_norm lengths x={} gain={} bias={}",
            x.len(),
            gain.len(),
            bias.len()
        )));
    }
    if x.is_empty() {
        return Err(Error::Domain("layer_norm of an empty vector".into()));
    }
    if eps <= 0.0 {
        return Err(Error::Config(format!(
            "layer_norm eps must be positive, got {eps}"
        )));
    }
    let (mean, inv_std) = moments(x, eps);
    Ok(x.iter()
        .zip(gain.iter().zip(bias))
        .map(|(&v, (&g, &b))| (v - mean) * inv_std * g + b)
        .collect())
}

/// Mean and 1/sqrt(population variance + eps).
pub(crate) fn moments(x: &[f64], eps: f64) -> (f64, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, 1.0 / (var + eps).sqrt())
}

/// GELU, tanh approximation.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x)).tanh())
}

pub fn gelu_derivative(x: f64) -> f64 {
    let inner = SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x);
    let t = inner.tanh();
    let d_inner = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_CUBIC * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * d_inner
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn check_dropout_rate(rate: f64) -> Result<()> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Config(format!(
            "dropout rate must lie in [0, 1), got {rate}"
        )));
    }
    Ok(())
}

/// Inverted-dropout keep mask: kept entries hold `1/(1-rate)`, dropped ones 0.
pub fn dropout_mask<R: Rng + ?Sized>(
    rows: usize,
    cols: usize,
    rate: f64,
    rng: &mut R,
) -> Result<Tensor2> {
    check_dropout_rate(rate)?;
    let keep = 1.0 / (1.0 - rate);
    let data = (0..rows * cols)
        .map(|_| {
            if rng.random::<f64>() < rate {
                0.0
            } else {
                keep
            }
        })
        .collect();
    Tensor2::from_vec(rows, cols, data)
}

/// Inverted dropout. Identity in eval mode or at rate 0.
pub fn dropout<R: Rng + ?Sized>(
    x: &Tensor2,
    rate: f64,
    mode: Mode,
    rng: &mut R,
) -> Result<Tensor2> {
    check_dropout_rate(rate)?;
    if mode == Mode::Eval || rate == 0.0 {
        return Ok(x.clone());
    }
    let mask = dropout_mask(x.rows(), x.cols(), rate, rng)?;
    x.zip_map(&mask, |a, m| a * m)
}

/// `-log softmax(logits)[label]`.
pub fn cross_entropy(logits: &[f64], label: usize) -> Result<f64> {
    if label >= logits.len() {
        return Err(Error::Domain(format!(
            "label {label} out of range for {} classes",
            logits.len()
        )));
    }
    Ok(log_sum_exp(logits) - logits[label])
}
