use std::f64::consts::{FRAC_1_SQRT_2, PI};

use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    /// Exact form `x·Φ(x)` with the Gaussian CDF, not the tanh approximation.
    Gelu,
}

pub fn activation(x: &Tensor, mode: Activation) -> Tensor {
    match mode {
        Activation::Relu => x.map(|v| if v > 0.0 { v } else { 0.0 }),
        Activation::Gelu => x.map(|v| v * normal_cdf(v)),
    }
}

/// Elementwise derivative times `d_out`. ReLU uses subgradient 0 at exactly 0.
pub fn activation_backward(x: &Tensor, d_out: &Tensor, mode: Activation) -> Result<Tensor> {
    if x.shape() != d_out.shape() {
        return Err(Error::shape(format!(
            "activation d_out has shape {:?}, input has {:?}",
            d_out.shape(),
            x.shape()
        )));
    }
    let data = x
        .data()
        .iter()
        .zip(d_out.data())
        .map(|(&v, &g)| {
            let slope = match mode {
                Activation::Relu => {
                    if v > 0.0 {
                        1.0
                    } else {
                        0.0
                    }
                }
                Activation::Gelu => normal_cdf(v) + v * normal_pdf(v),
            };
            slope * g
        })
        .collect();
    Ok(Tensor::from_parts(x.shape().to_vec(), data))
}

fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x * FRAC_1_SQRT_2)
}

fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * PI).sqrt()
}
