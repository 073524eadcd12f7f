//! Dense numeric kernel: a tensor type plus the layer primitives the encoders
//! are assembled from. Every layer exposes an explicit forward and backward
//! pass; there is no autodiff tape.
//!
//! All functions are pure. Summation orders are fixed, so identical inputs give
//! bit-identical outputs regardless of batch size.

mod activation;
mod conv;
mod linear;
mod loss;
mod pool;
mod tensor;

#[cfg(test)]
pub(crate) mod fd;

pub use activation::{activation, activation_backward, Activation};
pub use conv::{conv1d_backward, conv1d_forward, conv1d_output_len};
pub use linear::{linear_backward, linear_forward};
pub use loss::{softmax_cross_entropy, softmax_rows};
pub use pool::{pool1d, pool1d_backward, PoolMode};
pub use tensor::{DType, Tensor};

pub(crate) use tensor::dot;

/// Gradients produced by a parameterized layer's backward pass.
#[derive(Clone, Debug)]
pub struct LayerGrads {
    pub d_input: Tensor,
    /// `(name, gradient)` pairs; each gradient has its parameter's shape.
    pub d_params: Vec<(String, Tensor)>,
}

impl LayerGrads {
    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.d_params.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub(crate) fn take_param(&mut self, name: &str) -> Tensor {
        let i = self
            .d_params
            .iter()
            .position(|(n, _)| n == name)
            .expect("layer gradient present");
        self.d_params.swap_remove(i).1
    }
}
