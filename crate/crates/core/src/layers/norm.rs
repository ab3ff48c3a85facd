use serde_json::json;

use super::{join, Layer, Mode, Param};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Per-channel batch normalization over every axis except axis 1.
#[derive(Clone, Debug)]
pub struct BatchNormLayer<T> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    pub eps: f64,
    pub momentum: f64,
    cache: Option<NormCache<T>>,
}

#[derive(Clone, Debug)]
struct NormCache<T> {
    x_hat: Vec<T>,
    inv_std: Vec<T>,
    mode: Mode,
    dims: Vec<usize>,
}

pub const DEFAULT_EPS: f64 = 1e-5;
pub const DEFAULT_MOMENTUM: f64 = 0.1;

/// (outer, channels, inner) split of a channel-second layout.
fn split(dims: &[usize]) -> Result<(usize, usize, usize)> {
    if dims.len() < 2 {
        return Err(Error::InvalidShape(format!("batch norm needs (N, C, ...), got {dims:?}")));
    }
    Ok((dims[0], dims[1], dims[2..].iter().product()))
}

impl<T: Scalar> BatchNormLayer<T> {
    pub fn new(channels: usize) -> Result<Self> {
        Self::with_settings(channels, DEFAULT_EPS, DEFAULT_MOMENTUM)
    }

    pub fn with_settings(channels: usize, eps: f64, momentum: f64) -> Result<Self> {
        if !(eps > 0.0) || !(momentum > 0.0 && momentum <= 1.0) {
            return Err(Error::Config(format!(
                "batch norm needs eps > 0 and momentum in (0, 1], got {eps} / {momentum}"
            )));
        }
        Ok(BatchNormLayer {
            gamma: Param::new(Tensor::ones(vec![channels])?),
            beta: Param::new(Tensor::zeros(vec![channels])?),
            running_mean: Tensor::zeros(vec![channels])?,
            running_var: Tensor::ones(vec![channels])?,
            eps,
            momentum,
            cache: None,
        })
    }

    pub fn channels(&self) -> usize {
        self.gamma.value.numel()
    }
}

/// Sum of `f` over `xs` in f64, split over independent lanes.
fn lane_sum<T: Scalar>(xs: &[T], f: impl Fn(T) -> f64) -> f64 {
    let mut lanes = [0.0f64; 8];
    let chunks = xs.chunks_exact(8);
    let tail: f64 = chunks.remainder().iter().map(|&v| f(v)).sum();
    for chunk in chunks {
        for (l, &v) in lanes.iter_mut().zip(chunk) {
            *l += f(v);
        }
    }
    lanes.iter().sum::<f64>() + tail
}

fn lane_dot<T: Scalar>(a: &[T], b: &[T]) -> f64 {
    let mut lanes = [0.0f64; 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(&x, &y)| x.to_f64_lossy() * y.to_f64_lossy()).sum();
    for (xa, xb) in ca.zip(cb) {
        for ((l, &x), &y) in lanes.iter_mut().zip(xa).zip(xb) {
            *l += x.to_f64_lossy() * y.to_f64_lossy();
        }
    }
    lanes.iter().sum::<f64>() + tail
}

impl<T: Scalar> Layer<T> for BatchNormLayer<T> {
    fn kind(&self) -> &'static str {
        "batchnorm"
    }

    fn output_dims(&self, input: &[usize]) -> Result<Vec<usize>> {
        let (_, c, _) = split(input)?;
        if c != self.channels() {
            return Err(Error::ChannelMismatch {
                op: "batchnorm",
                expected: self.channels(),
                found: c,
            });
        }
        Ok(input.to_vec())
    }

    fn forward(&mut self, input: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        self.output_dims(input.dims())?;
        let (outer, channels, inner) = split(input.dims())?;
        let count = outer * inner;
        let x = input.data();
        let gamma = self.gamma.value.data();
        let beta = self.beta.value.data();
        let mut out = vec![T::zero(); x.len()];
        let mut x_hat = vec![T::zero(); x.len()];
        let mut inv_std = vec![T::zero(); channels];
        let mut new_mean = Vec::with_capacity(channels);
        let mut new_var = Vec::with_capacity(channels);
        if mode == Mode::Train && count < 2 {
            return Err(Error::Data(format!(
                "batch norm in train mode needs at least 2 values per channel, got {count}"
            )));
        }
        for c in 0..channels {
            let planes = (0..outer).map(|n| (n * channels + c) * inner);
            let (mean, var) = match mode {
                Mode::Train => {
                    let mut sum = 0.0;
                    for base in planes.clone() {
                        sum += lane_sum(&x[base..base + inner], |v| v.to_f64_lossy());
                    }
                    let mean = sum / count as f64;
                    let mut sq = 0.0;
                    for base in planes.clone() {
                        sq += lane_sum(&x[base..base + inner], |v| {
                            let d = v.to_f64_lossy() - mean;
                            d * d
                        });
                    }
                    let var = sq / count as f64;
                    let m = self.momentum;
                    let unbiased = var * count as f64 / (count - 1) as f64;
                    new_mean.push(T::lit((1.0 - m) * self.running_mean.data()[c].to_f64_lossy() + m * mean));
                    new_var.push(T::lit((1.0 - m) * self.running_var.data()[c].to_f64_lossy() + m * unbiased));
                    (T::lit(mean), T::lit(var))
                }
                Mode::Infer => (self.running_mean.data()[c], self.running_var.data()[c]),
            };
            let istd = T::one() / (var + T::lit(self.eps)).sqrt();
            inv_std[c] = istd;
            let (g, b) = (gamma[c], beta[c]);
            for base in planes {
                let src = &x[base..base + inner];
                let hat = &mut x_hat[base..base + inner];
                let dst = &mut out[base..base + inner];
                for ((&v, h), o) in src.iter().zip(hat.iter_mut()).zip(dst.iter_mut()) {
                    *h = (v - mean) * istd;
                    *o = g * *h + b;
                }
            }
        }
        let out = Tensor::from_shape(input.shape().clone(), out)?;
        if mode == Mode::Train {
            self.running_mean = Tensor::new(vec![channels], new_mean)?;
            self.running_var = Tensor::new(vec![channels], new_var)?;
        }
        self.cache = Some(NormCache {
            x_hat,
            inv_std,
            mode,
            dims: input.dims().to_vec(),
        });
        Ok(out)
    }

    fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let cache = self.cache.take().ok_or(Error::MissingCache("batchnorm"))?;
        if grad_out.dims() != cache.dims.as_slice() {
            return Err(Error::ShapeMismatch {
                op: "batchnorm backward",
                left: grad_out.dims().to_vec(),
                right: cache.dims,
            });
        }
        let (outer, channels, inner) = split(&cache.dims)?;
        let count = T::lit((outer * inner) as f64);
        let g = grad_out.data();
        let gamma = self.gamma.value.data();
        let mut grad_in = vec![T::zero(); g.len()];
        let mut grad_gamma = vec![T::zero(); channels];
        let mut grad_beta = vec![T::zero(); channels];
        for c in 0..channels {
            let planes = (0..outer).map(|n| (n * channels + c) * inner);
            let (mut sum_g, mut sum_gx) = (0.0, 0.0);
            for base in planes.clone() {
                sum_g += lane_sum(&g[base..base + inner], |v| v.to_f64_lossy());
                sum_gx += lane_dot(&g[base..base + inner], &cache.x_hat[base..base + inner]);
            }
            let (sum_g, sum_gx) = (T::lit(sum_g), T::lit(sum_gx));
            grad_gamma[c] = sum_gx;
            grad_beta[c] = sum_g;
            let scale = gamma[c] * cache.inv_std[c];
            for base in planes {
                let (gs, hat) = (&g[base..base + inner], &cache.x_hat[base..base + inner]);
                let dst = &mut grad_in[base..base + inner];
                match cache.mode {
                    Mode::Train => {
                        let k = scale / count;
                        for ((d, &gv), &h) in dst.iter_mut().zip(gs).zip(hat) {
                            *d = k * (count * gv - sum_g - h * sum_gx);
                        }
                    }
                    Mode::Infer => {
                        for (d, &gv) in dst.iter_mut().zip(gs) {
                            *d = scale * gv;
                        }
                    }
                }
            }
        }
        self.gamma.grad = Some(Tensor::new(vec![channels], grad_gamma)?);
        self.beta.grad = Some(Tensor::new(vec![channels], grad_beta)?);
        Tensor::new(cache.dims, grad_in)
    }

    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, &Param<T>)) {
        f(join(prefix, "gamma"), &self.gamma);
        f(join(prefix, "beta"), &self.beta);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param<T>)) {
        f(join(prefix, "gamma"), &mut self.gamma);
        f(join(prefix, "beta"), &mut self.beta);
    }

    fn visit_buffers(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        f(join(prefix, "running_mean"), &self.running_mean);
        f(join(prefix, "running_var"), &self.running_var);
    }

    fn visit_buffers_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        f(join(prefix, "running_mean"), &mut self.running_mean);
        f(join(prefix, "running_var"), &mut self.running_var);
    }

    fn clear_cache(&mut self) {
        self.cache = None;
    }

    fn hyperparams(&self) -> serde_json::Value {
        json!({ "channels": self.channels(), "eps": self.eps, "momentum": self.momentum })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn moments(t: &Tensor<f64>, c: usize) -> (f64, f64) {
        let (outer, channels, inner) = split(t.dims()).unwrap();
        let vals: Vec<f64> = (0..outer)
            .flat_map(|n| t.data()[(n * channels + c) * inner..][..inner].to_vec())
            .collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
        (mean, var)
    }

    #[test]
    fn train_mode_moments_follow_affine_terms() {
        let mut bn = BatchNormLayer::<f64>::new(3).unwrap();
        bn.gamma.value = Tensor::new(vec![3], vec![2.0, 0.5, -1.5]).unwrap();
        bn.beta.value = Tensor::new(vec![3], vec![0.25, -1.0, 3.0]).unwrap();
        let x = Tensor::from_fn(vec![4, 3, 2, 3, 3], |i| ((i * 7919) % 101) as f64 * 13.0 - 400.0).unwrap();
        let y = bn.forward(&x, Mode::Train).unwrap();
        for c in 0..3 {
            let (mean, var) = moments(&y, c);
            let (g, b) = (bn.gamma.value.data()[c], bn.beta.value.data()[c]);
            assert!((mean - b).abs() < 1e-6, "channel {c} mean {mean}");
            // eps = 1e-5 shrinks the variance by var / (var + eps)
            let (_, in_var) = moments(&x, c);
            let expected = g * g * in_var / (in_var + 1e-5);
            assert!((var - expected).abs() < 1e-6, "channel {c} var {var}");
            assert!((var - g * g).abs() < 1e-6);
        }
    }

    #[test]
    fn standardized_input_is_a_fixed_point() {
        let mut bn = BatchNormLayer::<f64>::new(1).unwrap();
        let x = Tensor::new(vec![4, 1], vec![-1.0, 1.0, -1.0, 1.0]).unwrap();
        let y = bn.forward(&x, Mode::Train).unwrap();
        for (a, b) in x.data().iter().zip(y.data()) {
            assert!((a - b).abs() < 1e-3);
        }
    }

    #[test]
    fn zero_gamma_emits_beta() {
        let mut bn = BatchNormLayer::<f64>::new(2).unwrap();
        bn.gamma.value = Tensor::zeros(vec![2]).unwrap();
        bn.beta.value = Tensor::new(vec![2], vec![0.7, -0.2]).unwrap();
        let x = Tensor::from_fn(vec![3, 2, 4], |i| i as f64).unwrap();
        let y = bn.forward(&x, Mode::Train).unwrap();
        for n in 0..3 {
            assert!(y.data()[n * 8..n * 8 + 4].iter().all(|&v| v == 0.7));
            assert!(y.data()[n * 8 + 4..n * 8 + 8].iter().all(|&v| v == -0.2));
        }
    }

    #[test]
    fn running_statistics_update() {
        let mut bn = BatchNormLayer::<f64>::new(1).unwrap();
        let x = Tensor::new(vec![4, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        bn.forward(&x, Mode::Train).unwrap();
        // mean 2.5, unbiased variance 5/3
        assert!((bn.running_mean.data()[0] - 0.25).abs() < 1e-12);
        assert!((bn.running_var.data()[0] - (0.9 + 0.1 * 5.0 / 3.0)).abs() < 1e-12);
        let before = (bn.running_mean.clone(), bn.running_var.clone());
        bn.forward(&x, Mode::Infer).unwrap();
        assert_eq!(before, (bn.running_mean.clone(), bn.running_var.clone()));
    }

    #[test]
    fn degenerate_batch_rejected() {
        let mut bn = BatchNormLayer::<f64>::new(2).unwrap();
        let x = Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap();
        assert!(bn.forward(&x, Mode::Train).is_err());
        assert!(bn.forward(&x, Mode::Infer).is_ok());
    }

    #[test]
    fn bad_settings_rejected() {
        assert!(BatchNormLayer::<f32>::with_settings(2, 0.0, 0.1).is_err());
        assert!(BatchNormLayer::<f32>::with_settings(2, 1e-5, 0.0).is_err());
    }
}
