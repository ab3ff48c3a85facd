use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{apply_mask, join, kaiming_uniform, relu_mask, Layer, Mode, Param};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{trilinear_resize, trilinear_resize_backward, Tensor};

fn expect_rank(op: &'static str, dims: &[usize], rank: usize) -> Result<()> {
    if dims.len() != rank {
        return Err(Error::InvalidShape(format!("{op} expects rank {rank}, got {dims:?}")));
    }
    Ok(())
}

#[derive(Clone, Debug, Default)]
pub struct Relu {
    mask: Option<Vec<bool>>,
}

impl<T: Scalar> Layer<T> for Relu {
    fn kind(&self) -> &'static str {
        "relu"
    }

    fn output_dims(&self, input: &[usize]) -> Result<Vec<usize>> {
        Ok(input.to_vec())
    }

    fn forward(&mut self, input: &Tensor<T>, _mode: Mode) -> Result<Tensor<T>> {
        let (out, mask) = relu_mask(input);
        self.mask = Some(mask);
        Ok(out)
    }

    fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let mask = self.mask.take().ok_or(Error::MissingCache("relu"))?;
        apply_mask(grad_out, &mask)
    }

    fn clear_cache(&mut self) {
        self.mask = None;
    }
}

/// Trilinear resampling of `(T, H, W)` to fixed extents.
#[derive(Clone, Debug)]
pub struct Resize {
    pub target: [usize; 3],
    input_dims: Option<Vec<usize>>,
}

impl Resize {
    pub fn new(target: [usize; 3]) -> Result<Self> {
        if target.contains(&0) {
            return Err(Error::Config(format!("resize target {target:?} has a zero extent")));
        }
        Ok(Resize {
            target,
            input_dims: None,
        })
    }
}

impl<T: Scalar> Layer<T> for Resize {
    fn kind(&self) -> &'static str {
        "resize"
    }

    fn output_dims(&self, input: &[usize]) -> Result<Vec<usize>> {
        expect_rank("resize", input, 5)?;
        Ok(vec![input[0], input[1], self.target[0], self.target[1], self.target[2]])
    }

    fn forward(&mut self, input: &Tensor<T>, _mode: Mode) -> Result<Tensor<T>> {
        let out = trilinear_resize(input, self.target)?;
        self.input_dims = Some(input.dims().to_vec());
        Ok(out)
    }

    fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let dims = self.input_dims.take().ok_or(Error::MissingCache("resize"))?;
        trilinear_resize_backward(grad_out, &dims)
    }

    fn clear_cache(&mut self) {
        self.input_dims = None;
    }

    fn hyperparams(&self) -> serde_json::Value {
        json!({ "target": self.target })
    }
}

/// Mean over every axis after the channel axis: `(N, C, ...) -> (N, C)`.
#[derive(Clone, Debug, Default)]
pub struct GlobalAvgPool {
    input_dims: Option<Vec<usize>>,
}

impl<T: Scalar> Layer<T> for GlobalAvgPool {
    fn kind(&self) -> &'static str {
        "global_avg_pool"
    }

    fn output_dims(&self, input: &[usize]) -> Result<Vec<usize>> {
        if input.len() < 2 {
            return Err(Error::InvalidShape(format!("global pool needs (N, C, ...), got {input:?}")));
        }
        Ok(input[..2].to_vec())
    }

    fn forward(&mut self, input: &Tensor<T>, _mode: Mode) -> Result<Tensor<T>> {
        let out_dims = Layer::<T>::output_dims(self, input.dims())?;
        let axes: Vec<usize> = (2..input.dims().len()).collect();
        let out = input.reduce_mean(&axes)?.into_reshaped(out_dims)?;
        self.input_dims = Some(input.dims().to_vec());
        Ok(out)
    }

    fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let dims = self.input_dims.take().ok_or(Error::MissingCache("global_avg_pool"))?;
        let inner: usize = dims[2..].iter().product();
        let scale = T::one() / T::lit(inner as f64);
        let data = grad_out
            .data()
            .iter()
            .flat_map(|&g| std::iter::repeat(g * scale).take(inner))
            .collect();
        Tensor::new(dims, data)
    }

    fn clear_cache(&mut self) {
        self.input_dims = None;
    }
}

/// `(N, ...) -> (N, prod(...))`.
#[derive(Clone, Debug, Default)]
pub struct Flatten {
    input_dims: Option<Vec<usize>>,
}

impl<T: Scalar> Layer<T> for Flatten {
    fn kind(&self) -> &'static str {
        "flatten"
    }

    fn output_dims(&self, input: &[usize]) -> Result<Vec<usize>> {
        if input.is_empty() {
            return Err(Error::InvalidShape("flatten needs a batch axis".into()));
        }
        Ok(vec![input[0], input[1..].iter().product()])
    }

    fn forward(&mut self, input: &Tensor<T>, _mode: Mode) -> Result<Tensor<T>> {
        let dims = Layer::<T>::output_dims(self, input.dims())?;
        self.input_dims = Some(input.dims().to_vec());
        input.reshape(dims)
    }

    fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let dims = self.input_dims.take().ok_or(Error::MissingCache("flatten"))?;
        grad_out.reshape(dims)
    }

    fn clear_cache(&mut self) {
        self.input_dims = None;
    }
}

/// Serializable position of a dropout stream.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DropoutState {
    pub seed: u64,
    /// Word position inside the ChaCha stream, decimal.
    pub word_pos: String,
}

/// Inverted dropout: survivors are scaled by `1 / (1 - rate)` during
/// training; inference is the identity.
#[derive(Clone, Debug)]
pub struct Dropout<T> {
    pub rate: f64,
    seed: u64,
    rng: ChaCha8Rng,
    mask: Option<Vec<T>>,
}

impl<T: Scalar> Dropout<T> {
    pub fn new(rate: f64, seed: u64) -> Result<Self> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!("dropout rate must lie in [0, 1), got {rate}")));
        }
        Ok(Dropout {
            rate,
            seed,
            rng: ChaCha8Rng::seed_from_u64(seed),
            mask: None,
        })
    }

    /// Output together with the multiplicative mask applied.
    pub fn forward_with_mask(&mut self, input: &Tensor<T>, mode: Mode) -> Result<(Tensor<T>, Tensor<T>)> {
        let mask: Vec<T> = match mode {
            Mode::Infer => vec![T::one(); input.numel()],
            Mode::Train if self.rate == 0.0 => vec![T::one(); input.numel()],
            Mode::Train => {
                let keep = T::lit(1.0 / (1.0 - self.rate));
                (0..input.numel())
                    .map(|_| if self.rng.gen::<f64>() < self.rate { T::zero() } else { keep })
                    .collect()
            }
        };
        let mask = Tensor::from_shape(input.shape().clone(), mask)?;
        let out = if mode == Mode::Infer { input.clone() } else { input.mul(&mask)? };
        self.mask = Some(mask.data().to_vec());
        Ok((out, mask))
    }

    pub fn state(&self) -> DropoutState {
        DropoutState {
            seed: self.seed,
            word_pos: self.rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&mut self, state: &DropoutState) -> Result<()> {
        let pos: u128 = state
            .word_pos
            .parse()
            .map_err(|_| Error::Format(format!("bad dropout stream position {:?}", state.word_pos)))?;
        self.seed = state.seed;
        self.rng = ChaCha8Rng::seed_from_u64(state.seed);
        self.rng.set_word_pos(pos);
        Ok(())
    }
}

impl<T: Scalar> Layer<T> for Dropout<T> {
    fn kind(&self) -> &'static str {
        "dropout"
    }

    fn output_dims(&self, input: &[usize]) -> Result<Vec<usize>> {
        Ok(input.to_vec())
    }

    fn forward(&mut self, input: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        Ok(self.forward_with_mask(input, mode)?.0)
    }

    fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let mask = self.mask.take().ok_or(Error::MissingCache("dropout"))?;
        if mask.len() != grad_out.numel() {
            return Err(Error::ShapeMismatch {
                op: "dropout backward",
                left: grad_out.dims().to_vec(),
                right: vec![mask.len()],
            });
        }
        let data = grad_out.data().iter().zip(&mask).map(|(&g, &m)| g * m).collect();
        Tensor::from_shape(grad_out.shape().clone(), data)
    }

    fn clear_cache(&mut self) {
        self.mask = None;
    }

    fn hyperparams(&self) -> serde_json::Value {
        json!({ "rate": self.rate, "seed": self.seed })
    }
}

/// Fully connected layer: `y = x W^T + b` on `(N, in)` inputs.
#[derive(Clone, Debug)]
pub struct Dense<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    cache: Option<Tensor<T>>,
}

impl<T: Scalar> Dense<T> {
    pub fn new<R: Rng>(in_features: usize, out_features: usize, rng: &mut R) -> Result<Self> {
        let weight = kaiming_uniform(vec![out_features, in_features], in_features, rng)?;
        Self::from_parts(weight, Tensor::zeros(vec![out_features])?)
    }

    pub fn from_parts(weight: Tensor<T>, bias: Tensor<T>) -> Result<Self> {
        if weight.dims().len() != 2 || bias.dims() != [weight.dims()[0]] {
            return Err(Error::InvalidShape(format!(
                "dense weight {:?} / bias {:?}",
                weight.dims(),
                bias.dims()
            )));
        }
        Ok(Dense {
            weight: Param::new(weight),
            bias: Param::new(bias),
            cache: None,
        })
    }

    pub fn in_features(&self) -> usize {
        self.weight.value.dims()[1]
    }

    pub fn out_features(&self) -> usize {
        self.weight.value.dims()[0]
    }
}

impl<T: Scalar> Layer<T> for Dense<T> {
    fn kind(&self) -> &'static str {
        "dense"
    }

    fn output_dims(&self, input: &[usize]) -> Result<Vec<usize>> {
        expect_rank("dense", input, 2)?;
        if input[1] != self.in_features() {
            return Err(Error::ChannelMismatch {
                op: "dense",
                expected: self.in_features(),
                found: input[1],
            });
        }
        Ok(vec![input[0], self.out_features()])
    }

    fn forward(&mut self, input: &Tensor<T>, _mode: Mode) -> Result<Tensor<T>> {
        self.output_dims(input.dims())?;
        let (n, fin, fout) = (input.dims()[0], self.in_features(), self.out_features());
        let mut out: Vec<T> = (0..n).flat_map(|_| self.bias.value.data().iter().copied()).collect();
        T::gemm(
            n,
            fin,
            fout,
            T::one(),
            input.data(),
            (fin as isize, 1),
            self.weight.value.data(),
            (1, fin as isize),
            T::one(),
            &mut out,
            (fout as isize, 1),
        );
        let out = Tensor::new(vec![n, fout], out)?;
        self.cache = Some(input.clone());
        Ok(out)
    }

    fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let input = self.cache.take().ok_or(Error::MissingCache("dense"))?;
        let (n, fin, fout) = (input.dims()[0], self.in_features(), self.out_features());
        if grad_out.dims() != [n, fout] {
            return Err(Error::ShapeMismatch {
                op: "dense backward",
                left: grad_out.dims().to_vec(),
                right: vec![n, fout],
            });
        }
        let go = grad_out.data();
        let mut grad_w = vec![T::zero(); fout * fin];
        T::gemm(fout, n, fin, T::one(), go, (1, fout as isize), input.data(), (fin as isize, 1), T::zero(), &mut grad_w, (fin as isize, 1));
        let grad_b: Vec<T> = (0..fout).map(|j| (0..n).map(|i| go[i * fout + j]).sum()).collect();
        let mut grad_x = vec![T::zero(); n * fin];
        T::gemm(n, fout, fin, T::one(), go, (fout as isize, 1), self.weight.value.data(), (fin as isize, 1), T::zero(), &mut grad_x, (fin as isize, 1));
        self.weight.grad = Some(Tensor::new(vec![fout, fin], grad_w)?);
        self.bias.grad = Some(Tensor::new(vec![fout], grad_b)?);
        Tensor::new(vec![n, fin], grad_x)
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
        json!({ "in_features": self.in_features(), "out_features": self.out_features() })
    }
}

/// Keeps only frame `T / 2` of each clip: `(N, C, T, H, W) -> (N, C, 1, H, W)`.
#[derive(Clone, Debug, Default)]
pub struct CenterFrame {
    input_dims: Option<Vec<usize>>,
}

impl<T: Scalar> Layer<T> for CenterFrame {
    fn kind(&self) -> &'static str {
        "center_frame"
    }

    fn output_dims(&self, input: &[usize]) -> Result<Vec<usize>> {
        expect_rank("center_frame", input, 5)?;
        Ok(vec![input[0], input[1], 1, input[3], input[4]])
    }

    fn forward(&mut self, input: &Tensor<T>, _mode: Mode) -> Result<Tensor<T>> {
        let out_dims = Layer::<T>::output_dims(self, input.dims())?;
        let d = input.dims();
        let plane = d[3] * d[4];
        let t = d[2] / 2;
        let data = input
            .data()
            .chunks_exact(d[2] * plane)
            .flat_map(|clip| clip[t * plane..(t + 1) * plane].iter().copied())
            .collect();
        self.input_dims = Some(d.to_vec());
        Tensor::new(out_dims, data)
    }

    fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let dims = self.input_dims.take().ok_or(Error::MissingCache("center_frame"))?;
        let plane = dims[3] * dims[4];
        let t = dims[2] / 2;
        let mut grad = vec![T::zero(); dims.iter().product()];
        for (clip, g) in grad.chunks_exact_mut(dims[2] * plane).zip(grad_out.data().chunks_exact(plane)) {
            clip[t * plane..(t + 1) * plane].copy_from_slice(g);
        }
        Tensor::new(dims, grad)
    }

    fn clear_cache(&mut self) {
        self.input_dims = None;
    }
}

/// Moves frames into the batch: `(N, C, T, H, W) -> (N*T, C, 1, H, W)`.
#[derive(Clone, Debug, Default)]
pub struct FoldFrames {
    input_dims: Option<Vec<usize>>,
}

fn permute_frames<T: Scalar>(data: &[T], n: usize, c: usize, t: usize, plane: usize, fold: bool) -> Vec<T> {
    let mut out = vec![T::zero(); data.len()];
    for i in 0..n {
        for ch in 0..c {
            for f in 0..t {
                let clip = ((i * c + ch) * t + f) * plane;
                let folded = (((i * t + f) * c) + ch) * plane;
                let (src, dst) = if fold { (clip, folded) } else { (folded, clip) };
                out[dst..dst + plane].copy_from_slice(&data[src..src + plane]);
            }
        }
    }
    out
}

impl<T: Scalar> Layer<T> for FoldFrames {
    fn kind(&self) -> &'static str {
        "fold_frames"
    }

    fn output_dims(&self, input: &[usize]) -> Result<Vec<usize>> {
        expect_rank("fold_frames", input, 5)?;
        Ok(vec![input[0] * input[2], input[1], 1, input[3], input[4]])
    }

    fn forward(&mut self, input: &Tensor<T>, _mode: Mode) -> Result<Tensor<T>> {
        let out_dims = Layer::<T>::output_dims(self, input.dims())?;
        let d = input.dims();
        let data = permute_frames(input.data(), d[0], d[1], d[2], d[3] * d[4], true);
        self.input_dims = Some(d.to_vec());
        Tensor::new(out_dims, data)
    }

    fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let d = self.input_dims.take().ok_or(Error::MissingCache("fold_frames"))?;
        let data = permute_frames(grad_out.data(), d[0], d[1], d[2], d[3] * d[4], false);
        Tensor::new(d, data)
    }

    fn clear_cache(&mut self) {
        self.input_dims = None;
    }
}

/// Averages per-frame rows back into clips: `(N*T, K) -> (N, K)`.
#[derive(Clone, Debug)]
pub struct FrameMean {
    pub frames: usize,
}

impl<T: Scalar> Layer<T> for FrameMean {
    fn kind(&self) -> &'static str {
        "frame_mean"
    }

    fn output_dims(&self, input: &[usize]) -> Result<Vec<usize>> {
        expect_rank("frame_mean", input, 2)?;
        if self.frames == 0 || input[0] % self.frames != 0 {
            return Err(Error::InvalidShape(format!(
                "frame_mean: batch {} is not a multiple of {} frames",
                input[0], self.frames
            )));
        }
        Ok(vec![input[0] / self.frames, input[1]])
    }

    fn forward(&mut self, input: &Tensor<T>, _mode: Mode) -> Result<Tensor<T>> {
        let out_dims = Layer::<T>::output_dims(self, input.dims())?;
        let (n, k) = (out_dims[0], out_dims[1]);
        input.reshape(vec![n, self.frames, k])?.reduce_mean(&[1])
    }

    fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let (n, k) = (grad_out.dims()[0], grad_out.dims()[1]);
        let scale = T::one() / T::lit(self.frames as f64);
        let mut grad = Vec::with_capacity(n * self.frames * k);
        for row in grad_out.data().chunks_exact(k) {
            for _ in 0..self.frames {
                grad.extend(row.iter().map(|&g| g * scale));
            }
        }
        Tensor::new(vec![n * self.frames, k], grad)
    }

    fn hyperparams(&self) -> serde_json::Value {
        json!({ "frames": self.frames })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dropout_identity_cases() {
        let x = Tensor::<f64>::from_fn(vec![4, 5], |i| i as f64 - 7.0).unwrap();
        let mut d = Dropout::new(0.5, 9).unwrap();
        assert_eq!(d.forward(&x, Mode::Infer).unwrap(), x);
        let mut d0 = Dropout::new(0.0, 9).unwrap();
        let (y, mask) = d0.forward_with_mask(&x, Mode::Train).unwrap();
        assert_eq!(y, x);
        assert!(mask.data().iter().all(|&m| m == 1.0));
        assert!(Dropout::<f64>::new(1.0, 0).is_err());
        assert!(Dropout::<f64>::new(-0.1, 0).is_err());
    }

    #[test]
    fn dropout_survivor_fraction() {
        let x = Tensor::<f64>::ones(vec![100_000]).unwrap();
        let mut d = Dropout::new(0.5, 42).unwrap();
        let (y, mask) = d.forward_with_mask(&x, Mode::Train).unwrap();
        let kept = mask.data().iter().filter(|&&m| m > 0.0).count() as f64 / 1e5;
        assert!((kept - 0.5).abs() <= 0.01, "survivor fraction {kept}");
        let mean = y.sum() / 1e5;
        assert!((mean - 1.0).abs() <= 0.02, "mean {mean}");
    }

    #[test]
    fn dropout_stream_restores() {
        let x = Tensor::<f32>::ones(vec![64]).unwrap();
        let mut d = Dropout::new(0.5, 7).unwrap();
        d.forward(&x, Mode::Train).unwrap();
        let state = d.state();
        let next = d.forward(&x, Mode::Train).unwrap();
        let mut e = Dropout::new(0.5, 0).unwrap();
        e.restore(&state).unwrap();
        assert_eq!(e.forward(&x, Mode::Train).unwrap(), next);
    }

    #[test]
    fn dense_weight_gradient_is_outer_product_sum() {
        let w = Tensor::<f64>::new(vec![2, 3], vec![0.1, -0.2, 0.3, 0.4, 0.5, -0.6]).unwrap();
        let mut dense = Dense::from_parts(w, Tensor::new(vec![2], vec![1.0, -1.0]).unwrap()).unwrap();
        let x = Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, -1.0, 0.5, 2.0]).unwrap();
        let y = dense.forward(&x, Mode::Train).unwrap();
        assert!((y.data()[0] - (0.1 - 0.4 + 0.9 + 1.0)).abs() < 1e-12);
        let g = Tensor::new(vec![2, 2], vec![1.0, 2.0, -1.0, 0.5]).unwrap();
        dense.backward(&g).unwrap();
        let gw = dense.weight.grad.as_ref().unwrap();
        for j in 0..2 {
            for k in 0..3 {
                let expected: f64 = (0..2).map(|i| g.data()[i * 2 + j] * x.data()[i * 3 + k]).sum();
                assert!((gw.data()[j * 3 + k] - expected).abs() < 1e-12);
            }
        }
        assert_eq!(dense.bias.grad.as_ref().unwrap().data(), &[0.0, 2.5]);
    }

    #[test]
    fn pooling_cases() {
        let mut pool = GlobalAvgPool::default();
        let ones = Tensor::<f64>::ones(vec![2, 3, 2, 2, 2]).unwrap();
        let y = pool.forward(&ones, Mode::Infer).unwrap();
        assert_eq!(y.dims(), &[2, 3]);
        assert!(y.data().iter().all(|&v| v == 1.0));
        let alt = Tensor::<f64>::from_fn(vec![1, 2, 2, 2, 2], |i| if i % 2 == 0 { 0.0 } else { 2.0 }).unwrap();
        assert_eq!(pool.forward(&alt, Mode::Infer).unwrap().data(), &[1.0, 1.0]);
        let unit = Tensor::<f64>::from_fn(vec![2, 3, 1, 1, 1], |i| i as f64).unwrap();
        let pooled = pool.forward(&unit, Mode::Infer).unwrap();
        let mut flat = Flatten::default();
        let f = flat.forward(&pooled, Mode::Infer).unwrap();
        assert_eq!(f.data(), unit.data());
        assert_eq!(f.dims(), &[2, 3]);
    }

    #[test]
    fn fold_and_center_frame_shapes() {
        let x = Tensor::<f64>::from_fn(vec![2, 1, 4, 2, 2], |i| i as f64).unwrap();
        let mut center = CenterFrame::default();
        let c = center.forward(&x, Mode::Infer).unwrap();
        assert_eq!(c.dims(), &[2, 1, 1, 2, 2]);
        assert_eq!(&c.data()[..4], &[8.0, 9.0, 10.0, 11.0]);
        let mut fold = FoldFrames::default();
        let f = fold.forward(&x, Mode::Infer).unwrap();
        assert_eq!(f.dims(), &[8, 1, 1, 2, 2]);
        assert_eq!(fold.backward(&f).unwrap(), x);
    }
}
