//! Batch normalization and dropout as plain functions. The tape versions in
//! [`crate::tape`] reuse the kernels here.

use crate::error::{dim_err, Error, Result};
use crate::rng::SeededRng;
use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
pub const DEFAULT_DROPOUT: f64 = 0.1;

/// Per-channel normalization state: learned affine terms plus running
/// statistics used in eval mode.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormState {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub eps: f64,
    pub momentum: f64,
}

impl BatchNormState {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            eps: BN_EPS,
            momentum: BN_MOMENTUM,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }
}

/// Mean and biased variance of each channel (last axis) over all other axes.
pub(crate) fn channel_stats(data: &[f64], channels: usize) -> (Vec<f64>, Vec<f64>) {
    let count = (data.len() / channels) as f64;
    let mut mean = vec![0.0; channels];
    for row in data.chunks_exact(channels) {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= count);
    let mut var = vec![0.0; channels];
    for row in data.chunks_exact(channels) {
        for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
            let c = v - m;
            *s += c * c;
        }
    }
    var.iter_mut().for_each(|s| *s /= count);
    (mean, var)
}

/// Folds batch statistics into the running estimates (unbiased variance).
pub(crate) fn update_running(
    running_mean: &mut [f64],
    running_var: &mut [f64],
    mean: &[f64],
    var: &[f64],
    count: usize,
    momentum: f64,
) {
    let unbias = if count > 1 {
        count as f64 / (count as f64 - 1.0)
    } else {
        1.0
    };
    for c in 0..mean.len() {
        running_mean[c] = (1.0 - momentum) * running_mean[c] + momentum * mean[c];
        running_var[c] = (1.0 - momentum) * running_var[c] + momentum * var[c] * unbias;
    }
}

pub(crate) fn normalize(
    data: &[f64],
    mean: &[f64],
    inv_std: &[f64],
    gamma: &[f64],
    beta: &[f64],
) -> Vec<f64> {
    let channels = mean.len();
    let mut out = Vec::with_capacity(data.len());
    for row in data.chunks_exact(channels) {
        for c in 0..channels {
            out.push((row[c] - mean[c]) * inv_std[c] * gamma[c] + beta[c]);
        }
    }
    out
}

/// Batch normalization over every axis except the last (channel) axis.
///
/// In training mode the batch statistics normalize `x` and the running
/// statistics are updated; in eval mode the running statistics are used and
/// `state` is left untouched.
pub fn batch_norm(x: &Tensor, state: &mut BatchNormState, training: bool) -> Result<Tensor> {
    let channels = *x.shape().last().ok_or_else(|| dim_err!("batch_norm on a scalar"))?;
    if channels != state.channels() {
        return Err(dim_err!(
            "batch_norm expects {} channels, input has {channels}",
            state.channels()
        ));
    }
    let (mean, var) = if training {
        let (mean, var) = channel_stats(x.data(), channels);
        update_running(
            &mut state.running_mean,
            &mut state.running_var,
            &mean,
            &var,
            x.len() / channels,
            state.momentum,
        );
        (mean, var)
    } else {
        (state.running_mean.clone(), state.running_var.clone())
    };
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + state.eps).sqrt()).collect();
    Ok(Tensor::from_raw(
        x.shape(),
        normalize(x.data(), &mean, &inv_std, &state.gamma, &state.beta),
    ))
}

pub(crate) fn check_rate(rate: f64) -> Result<()> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Config(format!("dropout rate {rate} outside [0, 1)")));
    }
    Ok(())
}

/// Keep-mask with survivors pre-scaled by `1 / (1 - rate)`.
pub(crate) fn dropout_mask(len: usize, rate: f64, rng: &mut SeededRng) -> Vec<f64> {
    let keep = 1.0 / (1.0 - rate);
    (0..len)
        .map(|_| if rng.unit() < rate { 0.0 } else { keep })
        .collect()
}

/// Inverted dropout. Eval mode and `rate == 0` return `x` unchanged.
pub fn dropout(x: &Tensor, rate: f64, rng: &mut SeededRng, training: bool) -> Result<Tensor> {
    check_rate(rate)?;
    if !training || rate == 0.0 {
        return Ok(x.clone());
    }
    let mask = dropout_mask(x.len(), rate, rng);
    Ok(Tensor::from_raw(
        x.shape(),
        x.data().iter().zip(&mask).map(|(v, k)| v * k).collect(),
    ))
}
