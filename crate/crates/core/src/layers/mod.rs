//! Parameterized layers with hand-written forward and backward passes.
//!
//! Every layer caches what its backward pass needs during `forward`, stores
//! parameter gradients next to the parameters, and returns the gradient with
//! respect to its input.

mod basic;
mod conv;
mod loss;
mod norm;
mod residual;

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub use basic::{CenterFrame, Dense, Dropout, DropoutState, Flatten, FoldFrames, FrameMean, GlobalAvgPool, Relu, Resize};
pub use conv::{matched_mid_channels, mid_channels, Conv2Plus1dLayer, Conv3dLayer, ConvUnit};
pub use loss::{one_hot, softmax_cross_entropy};
pub use norm::BatchNormLayer;
pub use residual::{Projection, ResidualBlock, UnitKind};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Infer,
}

/// A trainable tensor and the gradient from the most recent backward pass.
#[derive(Clone, Debug)]
pub struct Param<T> {
    pub value: Tensor<T>,
    pub grad: Option<Tensor<T>>,
}

impl<T: Scalar> Param<T> {
    pub fn new(value: Tensor<T>) -> Self {
        Param { value, grad: None }
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

pub trait Layer<T: Scalar> {
    fn kind(&self) -> &'static str;

    /// Output extents for an input of extents `input`, or an error if the
    /// layer cannot accept it.
    fn output_dims(&self, input: &[usize]) -> Result<Vec<usize>>;

    fn forward(&mut self, input: &Tensor<T>, mode: Mode) -> Result<Tensor<T>>;

    /// Consumes the cached forward state; writes parameter gradients and
    /// returns the input gradient.
    fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>>;

    fn visit_params(&self, _prefix: &str, _f: &mut dyn FnMut(String, &Param<T>)) {}

    fn visit_params_mut(&mut self, _prefix: &str, _f: &mut dyn FnMut(String, &mut Param<T>)) {}

    /// Non-trainable state that still belongs in a checkpoint (running statistics).
    fn visit_buffers(&self, _prefix: &str, _f: &mut dyn FnMut(String, &Tensor<T>)) {}

    fn visit_buffers_mut(&mut self, _prefix: &str, _f: &mut dyn FnMut(String, &mut Tensor<T>)) {}

    fn clear_cache(&mut self) {}

    fn hyperparams(&self) -> serde_json::Value {
        serde_json::Value::Null
    }
}

pub fn param_count<T: Scalar>(layer: &dyn Layer<T>) -> usize {
    let mut total = 0;
    layer.visit_params("", &mut |_, p| total += p.value.numel());
    total
}

/// Runs `layer.backward` and collects its parameter gradients by name.
pub fn layer_backward<T: Scalar>(
    layer: &mut dyn Layer<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, BTreeMap<String, Tensor<T>>)> {
    let grad_input = layer.backward(grad_out)?;
    let mut grads = BTreeMap::new();
    let mut missing = None;
    layer.visit_params("", &mut |name, p| match &p.grad {
        Some(g) => {
            grads.insert(name, g.clone());
        }
        None => missing = Some(name),
    });
    if let Some(name) = missing {
        return Err(Error::Data(format!("parameter {name} received no gradient")));
    }
    Ok((grad_input, grads))
}

/// Kaiming-style uniform initializer: `U(-b, b)` with `b = sqrt(6 / fan_in)`.
pub(crate) fn kaiming_uniform<T: Scalar, R: Rng>(dims: Vec<usize>, fan_in: usize, rng: &mut R) -> Result<Tensor<T>> {
    let bound = (6.0 / fan_in as f64).sqrt();
    Tensor::from_fn(dims, |_| T::lit(rng.gen_range(-bound..bound)))
}

pub(crate) fn relu_mask<T: Scalar>(x: &Tensor<T>) -> (Tensor<T>, Vec<bool>) {
    let mask: Vec<bool> = x.data().iter().map(|&v| v > T::zero()).collect();
    (x.relu(), mask)
}

pub(crate) fn apply_mask<T: Scalar>(grad: &Tensor<T>, mask: &[bool]) -> Result<Tensor<T>> {
    if grad.numel() != mask.len() {
        return Err(Error::ShapeMismatch {
            op: "relu backward",
            left: grad.dims().to_vec(),
            right: vec![mask.len()],
        });
    }
    let data = grad
        .data()
        .iter()
        .zip(mask)
        .map(|(&g, &m)| if m { g } else { T::zero() })
        .collect();
    Tensor::from_shape(grad.shape().clone(), data)
}
