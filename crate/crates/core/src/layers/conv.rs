use rand::Rng;
use serde_json::json;

use super::{join, kaiming_uniform, relu_mask, apply_mask, Layer, Mode, Param};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{conv3d_backward, conv3d_forward, ConvGeometry, Padding, Tensor};

/// Intermediate width of a factored convolution that roughly matches the
/// weight count of the full `kt x d x d` convolution:
/// `floor(kt d^2 C_in C_out / (d^2 C_in + kt C_out))`, at least 1.
pub fn mid_channels(c_in: usize, c_out: usize, kt: usize, d: usize) -> usize {
    let num = kt * d * d * c_in * c_out;
    let den = d * d * c_in + kt * c_out;
    (num / den).max(1)
}

/// [`mid_channels`] lowered until the factored layer, biases included, has
/// no more parameters than the full convolution with its bias.
pub fn matched_mid_channels(c_in: usize, c_out: usize, kt: usize, d: usize) -> usize {
    let full = kt * d * d * c_in * c_out + c_out;
    let factored = |m: usize| m * (d * d * c_in + 1) + c_out * (kt * m + 1);
    let mut m = mid_channels(c_in, c_out, kt, d);
    while m > 1 && factored(m) > full {
        m -= 1;
    }
    m
}

/// Plain 3D convolution (a 2D convolution when the kernel's time extent is 1).
#[derive(Clone, Debug)]
pub struct Conv3dLayer<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    pub stride: [usize; 3],
    pub padding: Padding,
    cache: Option<Tensor<T>>,
}

impl<T: Scalar> Conv3dLayer<T> {
    pub fn new<R: Rng>(
        c_in: usize,
        c_out: usize,
        kernel: [usize; 3],
        stride: [usize; 3],
        padding: Padding,
        rng: &mut R,
    ) -> Result<Self> {
        let fan_in = c_in * kernel.iter().product::<usize>();
        let weight = kaiming_uniform(vec![c_out, c_in, kernel[0], kernel[1], kernel[2]], fan_in, rng)?;
        let bias = Tensor::zeros(vec![c_out])?;
        Self::from_parts(weight, bias, stride, padding)
    }

    pub fn from_parts(weight: Tensor<T>, bias: Tensor<T>, stride: [usize; 3], padding: Padding) -> Result<Self> {
        if weight.dims().len() != 5 || bias.dims() != [weight.dims()[0]] {
            return Err(Error::InvalidShape(format!(
                "conv weights {:?} / bias {:?}",
                weight.dims(),
                bias.dims()
            )));
        }
        Ok(Conv3dLayer {
            weight: Param::new(weight),
            bias: Param::new(bias),
            stride,
            padding,
            cache: None,
        })
    }

    pub fn in_channels(&self) -> usize {
        self.weight.value.dims()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.value.dims()[0]
    }

    pub fn kernel(&self) -> [usize; 3] {
        let d = self.weight.value.dims();
        [d[2], d[3], d[4]]
    }
}

impl<T: Scalar> Layer<T> for Conv3dLayer<T> {
    fn kind(&self) -> &'static str {
        "conv3d"
    }

    fn output_dims(&self, input: &[usize]) -> Result<Vec<usize>> {
        if input.len() != 5 {
            return Err(Error::InvalidShape(format!("conv3d expects (N, C, T, H, W), got {input:?}")));
        }
        if input[1] != self.in_channels() {
            return Err(Error::ChannelMismatch {
                op: "conv3d",
                expected: self.in_channels(),
                found: input[1],
            });
        }
        let g = ConvGeometry::new(
            self.in_channels(),
            self.out_channels(),
            [input[2], input[3], input[4]],
            self.kernel(),
            self.stride,
            self.padding,
        )?;
        Ok(vec![input[0], self.out_channels(), g.output[0], g.output[1], g.output[2]])
    }

    fn forward(&mut self, input: &Tensor<T>, _mode: Mode) -> Result<Tensor<T>> {
        let out = conv3d_forward(input, &self.weight.value, &self.bias.value, self.stride, self.padding)?;
        self.cache = Some(input.clone());
        Ok(out)
    }

    fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let input = self.cache.take().ok_or(Error::MissingCache("conv3d"))?;
        let grads = conv3d_backward(&input, &self.weight.value, grad_out, self.stride, self.padding)?;
        self.weight.grad = Some(grads.weights);
        self.bias.grad = Some(grads.bias);
        Ok(grads.input)
    }

    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, &Param<T>)) {
        f(join(prefix, "weight"), &self.weight);
        f(join(prefix, "bias"), &self.bias);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param<T>)) {
        f(join(prefix, "weight"), &mut self.weight);
        f(join(prefix, "bias"), &mut self.bias);
    }

    fn clear_cache(&mut self) {
        self.cache = None;
    }

    fn hyperparams(&self) -> serde_json::Value {
        json!({
            "in_channels": self.in_channels(),
            "out_channels": self.out_channels(),
            "kernel": self.kernel(),
            "stride": self.stride,
            "padding": self.padding,
        })
    }
}

/// Factored convolution: a `1 x kh x kw` spatial convolution into `M`
/// channels followed by a `kt x 1 x 1` temporal convolution.
#[derive(Clone, Debug)]
pub struct Conv2Plus1dLayer<T> {
    pub spatial: Conv3dLayer<T>,
    pub temporal: Conv3dLayer<T>,
    /// ReLU between the spatial and temporal halves.
    pub interleaved_relu: bool,
    mid_mask: Option<Vec<bool>>,
}

impl<T: Scalar> Conv2Plus1dLayer<T> {
    /// `stride` is split the same way as the kernel: `(1, sh, sw)` on the
    /// spatial half and `(st, 1, 1)` on the temporal half.
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        c_in: usize,
        c_out: usize,
        mid: usize,
        kernel: [usize; 3],
        stride: [usize; 3],
        interleaved_relu: bool,
        rng: &mut R,
    ) -> Result<Self> {
        if mid == 0 {
            return Err(Error::Config("factored convolution needs at least one mid channel".into()));
        }
        let spatial = Conv3dLayer::new(c_in, mid, [1, kernel[1], kernel[2]], [1, stride[1], stride[2]], Padding::Same, rng)?;
        let temporal = Conv3dLayer::new(mid, c_out, [kernel[0], 1, 1], [stride[0], 1, 1], Padding::Same, rng)?;
        Self::from_parts(spatial, temporal, interleaved_relu)
    }

    pub fn from_parts(spatial: Conv3dLayer<T>, temporal: Conv3dLayer<T>, interleaved_relu: bool) -> Result<Self> {
        if spatial.kernel()[0] != 1 || temporal.kernel()[1..] != [1, 1] {
            return Err(Error::InvalidShape(format!(
                "factored convolution needs a (1, kh, kw) spatial kernel and a (kt, 1, 1) temporal kernel, got {:?} and {:?}",
                spatial.kernel(),
                temporal.kernel()
            )));
        }
        if spatial.out_channels() != temporal.in_channels() {
            return Err(Error::ChannelMismatch {
                op: "conv2plus1d",
                expected: spatial.out_channels(),
                found: temporal.in_channels(),
            });
        }
        Ok(Conv2Plus1dLayer {
            spatial,
            temporal,
            interleaved_relu,
            mid_mask: None,
        })
    }

    pub fn mid_channels(&self) -> usize {
        self.spatial.out_channels()
    }

    pub fn in_channels(&self) -> usize {
        self.spatial.in_channels()
    }

    pub fn out_channels(&self) -> usize {
        self.temporal.out_channels()
    }
}

impl<T: Scalar> Layer<T> for Conv2Plus1dLayer<T> {
    fn kind(&self) -> &'static str {
        "conv2plus1d"
    }

    fn output_dims(&self, input: &[usize]) -> Result<Vec<usize>> {
        let mid = self.spatial.output_dims(input)?;
        self.temporal.output_dims(&mid)
    }

    fn forward(&mut self, input: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let mid = self.spatial.forward(input, mode)?;
        let mid = if self.interleaved_relu {
            let (activated, mask) = relu_mask(&mid);
            self.mid_mask = Some(mask);
            activated
        } else {
            mid
        };
        self.temporal.forward(&mid, mode)
    }

    fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let grad_mid = self.temporal.backward(grad_out)?;
        let grad_mid = if self.interleaved_relu {
            let mask = self.mid_mask.take().ok_or(Error::MissingCache("conv2plus1d"))?;
            apply_mask(&grad_mid, &mask)?
        } else {
            grad_mid
        };
        self.spatial.backward(&grad_mid)
    }

    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, &Param<T>)) {
        self.spatial.visit_params(&join(prefix, "spatial"), f);
        self.temporal.visit_params(&join(prefix, "temporal"), f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param<T>)) {
        self.spatial.visit_params_mut(&join(prefix, "spatial"), f);
        self.temporal.visit_params_mut(&join(prefix, "temporal"), f);
    }

    fn clear_cache(&mut self) {
        self.spatial.clear_cache();
        self.temporal.clear_cache();
        self.mid_mask = None;
    }

    fn hyperparams(&self) -> serde_json::Value {
        json!({
            "in_channels": self.in_channels(),
            "mid_channels": self.mid_channels(),
            "out_channels": self.out_channels(),
            "spatial_kernel": self.spatial.kernel(),
            "temporal_kernel": self.temporal.kernel(),
            "stride": [self.temporal.stride[0], self.spatial.stride[1], self.spatial.stride[2]],
            "interleaved_relu": self.interleaved_relu,
        })
    }
}

/// Either convolution flavour, so blocks can be built from either.
#[derive(Clone, Debug)]
pub enum ConvUnit<T> {
    Full(Conv3dLayer<T>),
    Factored(Conv2Plus1dLayer<T>),
}

impl<T: Scalar> ConvUnit<T> {
    pub fn out_channels(&self) -> usize {
        match self {
            ConvUnit::Full(c) => c.out_channels(),
            ConvUnit::Factored(c) => c.out_channels(),
        }
    }

    fn inner(&self) -> &dyn Layer<T> {
        match self {
            ConvUnit::Full(c) => c,
            ConvUnit::Factored(c) => c,
        }
    }

    fn inner_mut(&mut self) -> &mut dyn Layer<T> {
        match self {
            ConvUnit::Full(c) => c,
            ConvUnit::Factored(c) => c,
        }
    }
}

impl<T: Scalar> Layer<T> for ConvUnit<T> {
    fn kind(&self) -> &'static str {
        self.inner().kind()
    }

    fn output_dims(&self, input: &[usize]) -> Result<Vec<usize>> {
        self.inner().output_dims(input)
    }

    fn forward(&mut self, input: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        self.inner_mut().forward(input, mode)
    }

    fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        self.inner_mut().backward(grad_out)
    }

    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, &Param<T>)) {
        self.inner().visit_params(prefix, f)
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param<T>)) {
        self.inner_mut().visit_params_mut(prefix, f)
    }

    fn clear_cache(&mut self) {
        self.inner_mut().clear_cache()
    }

    fn hyperparams(&self) -> serde_json::Value {
        self.inner().hyperparams()
    }
}
