use rand::Rng;
use serde_json::json;

use super::{apply_mask, join, relu_mask, BatchNormLayer, Conv2Plus1dLayer, Conv3dLayer, ConvUnit, Layer, Mode, Param};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Padding, Tensor};

/// 1x1x1 convolution + batch norm aligning the skip path with the branch.
#[derive(Clone, Debug)]
pub struct Projection<T> {
    pub conv: Conv3dLayer<T>,
    pub norm: BatchNormLayer<T>,
}

/// `relu(bn_b(conv_b(relu(bn_a(conv_a(x))))) + skip(x))`.
#[derive(Clone, Debug)]
pub struct ResidualBlock<T> {
    pub conv_a: ConvUnit<T>,
    pub norm_a: BatchNormLayer<T>,
    pub conv_b: ConvUnit<T>,
    pub norm_b: BatchNormLayer<T>,
    pub projection: Option<Projection<T>>,
    mid_mask: Option<Vec<bool>>,
    out_mask: Option<Vec<bool>>,
}

/// How to build the convolutions inside a block.
#[derive(Clone, Copy, Debug)]
pub enum UnitKind {
    /// Full convolution with the given kernel.
    Full { kernel: [usize; 3] },
    /// Factored convolution; `mid` overrides the matched width.
    Factored {
        kernel: [usize; 3],
        mid: Option<usize>,
        interleaved_relu: bool,
    },
}

impl UnitKind {
    pub fn build<T: Scalar, R: Rng>(&self, c_in: usize, c_out: usize, stride: [usize; 3], rng: &mut R) -> Result<ConvUnit<T>> {
        Ok(match *self {
            UnitKind::Full { kernel } => ConvUnit::Full(Conv3dLayer::new(c_in, c_out, kernel, stride, Padding::Same, rng)?),
            UnitKind::Factored {
                kernel,
                mid,
                interleaved_relu,
            } => {
                let mid = mid.unwrap_or_else(|| super::matched_mid_channels(c_in, c_out, kernel[0], kernel[1]));
                ConvUnit::Factored(Conv2Plus1dLayer::new(c_in, c_out, mid, kernel, stride, interleaved_relu, rng)?)
            }
        })
    }
}

impl<T: Scalar> ResidualBlock<T> {
    /// The first convolution (and the projection) carry `stride`; a
    /// projection is added exactly when channels change or `stride` is not 1.
    pub fn new<R: Rng>(c_in: usize, c_out: usize, stride: [usize; 3], unit: UnitKind, rng: &mut R) -> Result<Self> {
        let conv_a = unit.build(c_in, c_out, stride, rng)?;
        let conv_b = unit.build(c_out, c_out, [1, 1, 1], rng)?;
        let projection = if c_in != c_out || stride != [1, 1, 1] {
            Some(Projection {
                conv: Conv3dLayer::new(c_in, c_out, [1, 1, 1], stride, Padding::Same, rng)?,
                norm: BatchNormLayer::new(c_out)?,
            })
        } else {
            None
        };
        Ok(Self::from_parts(
            conv_a,
            BatchNormLayer::new(c_out)?,
            conv_b,
            BatchNormLayer::new(c_out)?,
            projection,
        ))
    }

    pub fn from_parts(
        conv_a: ConvUnit<T>,
        norm_a: BatchNormLayer<T>,
        conv_b: ConvUnit<T>,
        norm_b: BatchNormLayer<T>,
        projection: Option<Projection<T>>,
    ) -> Self {
        ResidualBlock {
            conv_a,
            norm_a,
            conv_b,
            norm_b,
            projection,
            mid_mask: None,
            out_mask: None,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.conv_b.out_channels()
    }

    fn branch_dims(&self, input: &[usize]) -> Result<Vec<usize>> {
        let a = self.norm_a.output_dims(&self.conv_a.output_dims(input)?)?;
        self.norm_b.output_dims(&self.conv_b.output_dims(&a)?)
    }
}

impl<T: Scalar> Layer<T> for ResidualBlock<T> {
    fn kind(&self) -> &'static str {
        "residual"
    }

    fn output_dims(&self, input: &[usize]) -> Result<Vec<usize>> {
        let branch = self.branch_dims(input)?;
        let skip = match &self.projection {
            Some(p) => p.norm.output_dims(&p.conv.output_dims(input)?)?,
            None => input.to_vec(),
        };
        if branch != skip {
            return Err(Error::ShapeMismatch {
                op: "residual skip (projection required)",
                left: branch,
                right: skip,
            });
        }
        Ok(branch)
    }

    fn forward(&mut self, input: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        self.output_dims(input.dims())?;
        let a = self.conv_a.forward(input, mode)?;
        let a = self.norm_a.forward(&a, mode)?;
        let (a, mid_mask) = relu_mask(&a);
        let b = self.conv_b.forward(&a, mode)?;
        let b = self.norm_b.forward(&b, mode)?;
        let sum = match &mut self.projection {
            Some(p) => {
                let s = p.conv.forward(input, mode)?;
                let s = p.norm.forward(&s, mode)?;
                b.add(&s)?
            }
            None => b.add(input)?,
        };
        let (out, out_mask) = relu_mask(&sum);
        self.mid_mask = Some(mid_mask);
        self.out_mask = Some(out_mask);
        Ok(out)
    }

    fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let out_mask = self.out_mask.take().ok_or(Error::MissingCache("residual"))?;
        let mid_mask = self.mid_mask.take().ok_or(Error::MissingCache("residual"))?;
        let g = apply_mask(grad_out, &out_mask)?;
        let gb = self.norm_b.backward(&g)?;
        let ga = self.conv_b.backward(&gb)?;
        let ga = apply_mask(&ga, &mid_mask)?;
        let ga = self.norm_a.backward(&ga)?;
        let gx = self.conv_a.backward(&ga)?;
        let g_skip = match &mut self.projection {
            Some(p) => {
                let gs = p.norm.backward(&g)?;
                p.conv.backward(&gs)?
            }
            None => g,
        };
        gx.add(&g_skip)
    }

    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, &Param<T>)) {
        self.conv_a.visit_params(&join(prefix, "conv_a"), f);
        self.norm_a.visit_params(&join(prefix, "norm_a"), f);
        self.conv_b.visit_params(&join(prefix, "conv_b"), f);
        self.norm_b.visit_params(&join(prefix, "norm_b"), f);
        if let Some(p) = &self.projection {
            p.conv.visit_params(&join(prefix, "projection.conv"), f);
            p.norm.visit_params(&join(prefix, "projection.norm"), f);
        }
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param<T>)) {
        self.conv_a.visit_params_mut(&join(prefix, "conv_a"), f);
        self.norm_a.visit_params_mut(&join(prefix, "norm_a"), f);
        self.conv_b.visit_params_mut(&join(prefix, "conv_b"), f);
        self.norm_b.visit_params_mut(&join(prefix, "norm_b"), f);
        if let Some(p) = &mut self.projection {
            p.conv.visit_params_mut(&join(prefix, "projection.conv"), f);
            p.norm.visit_params_mut(&join(prefix, "projection.norm"), f);
        }
    }

    fn visit_buffers(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        self.norm_a.visit_buffers(&join(prefix, "norm_a"), f);
        self.norm_b.visit_buffers(&join(prefix, "norm_b"), f);
        if let Some(p) = &self.projection {
            p.norm.visit_buffers(&join(prefix, "projection.norm"), f);
        }
    }

    fn visit_buffers_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        self.norm_a.visit_buffers_mut(&join(prefix, "norm_a"), f);
        self.norm_b.visit_buffers_mut(&join(prefix, "norm_b"), f);
        if let Some(p) = &mut self.projection {
            p.norm.visit_buffers_mut(&join(prefix, "projection.norm"), f);
        }
    }

    fn clear_cache(&mut self) {
        self.conv_a.clear_cache();
        self.norm_a.clear_cache();
        self.conv_b.clear_cache();
        self.norm_b.clear_cache();
        if let Some(p) = &mut self.projection {
            p.conv.clear_cache();
            p.norm.clear_cache();
        }
        self.mid_mask = None;
        self.out_mask = None;
    }

    fn hyperparams(&self) -> serde_json::Value {
        json!({
            "conv_a": self.conv_a.hyperparams(),
            "conv_b": self.conv_b.hyperparams(),
            "projection": self.projection.as_ref().map(|p| p.conv.hyperparams()),
        })
    }
}
