use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolMode {
    Mean,
    Max,
}

fn check(x: &Tensor, window: usize) -> Result<(usize, usize, usize, usize)> {
    let (batch, channels, steps) = x.dims3()?;
    if window == 0 || window > steps {
        return Err(Error::shape(format!(
            "pool window {window} does not fit {steps} time steps"
        )));
    }
    Ok((batch, channels, steps, steps / window))
}

/// Non-overlapping pooling over the last axis of `B×C×T`. A trailing partial
/// window is dropped.
pub fn pool1d(x: &Tensor, window: usize, mode: PoolMode) -> Result<Tensor> {
    let (batch, channels, steps, out_len) = check(x, window)?;
    let mut out = Vec::with_capacity(batch * channels * out_len);
    for series in x.data().chunks(steps) {
        for win in series.chunks_exact(window) {
            out.push(match mode {
                PoolMode::Mean => win.iter().sum::<f64>() / window as f64,
                PoolMode::Max => win.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            });
        }
    }
    Ok(Tensor::from_parts(vec![batch, channels, out_len], out))
}

/// Mean spreads `d/window` over the window; max routes the gradient to the
/// first maximal element.
pub fn pool1d_backward(x: &Tensor, window: usize, mode: PoolMode, d_out: &Tensor) -> Result<Tensor> {
    let (batch, channels, steps, out_len) = check(x, window)?;
    if d_out.shape() != [batch, channels, out_len] {
        return Err(Error::shape(format!(
            "pool d_out has shape {:?}, expected [{batch}, {channels}, {out_len}]",
            d_out.shape()
        )));
    }
    let mut d_x = vec![0.0; x.numel()];
    for (s, series) in x.data().chunks(steps).enumerate() {
        for (j, win) in series.chunks_exact(window).enumerate() {
            let g = d_out.data()[s * out_len + j];
            let base = s * steps + j * window;
            match mode {
                PoolMode::Mean => {
                    for slot in &mut d_x[base..base + window] {
                        *slot = g / window as f64;
                    }
                }
                PoolMode::Max => {
                    let mut arg = 0;
                    for (i, &v) in win.iter().enumerate() {
                        if v > win[arg] {
                            arg = i;
                        }
                    }
                    d_x[base + arg] = g;
                }
            }
        }
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), d_x))
}
