//! Finite-difference checks for every layer kind and a tiny full network.
//! Each group returns `(label, relative error)` pairs.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sonogest::layers::{
    one_hot, softmax_cross_entropy, BatchNormLayer, CenterFrame, Conv2Plus1dLayer, Conv3dLayer, Dense, Dropout, DropoutState, Flatten,
    FoldFrames, FrameMean, GlobalAvgPool, Layer, Mode, Param, Relu, Resize, ResidualBlock, UnitKind,
};
use sonogest::model::{ModelSpec, Network, Variant};
use sonogest::tensor::Padding;
use sonogest::Tensor;

use super::{check_layer, numeric_grad, random_tensor, rel_error};

pub type Checks = Vec<(String, f64)>;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Keeps ReLU inputs clear of the kink so central differences stay smooth.
fn away_from_zero(x: Tensor<f64>) -> Tensor<f64> {
    x.map(|v| if v.abs() < 0.05 { v.signum() * 0.05 + v } else { v }, "shift").unwrap()
}

pub fn conv3d() -> Checks {
    let mut r = rng(1);
    let mut out = Checks::new();
    for (stride, padding) in [([1, 1, 1], Padding::Same), ([2, 2, 1], Padding::Same), ([1, 2, 2], Padding::Valid)] {
        let mut layer = Conv3dLayer::<f64>::new(2, 3, [3, 3, 2], stride, padding, &mut r).unwrap();
        layer.bias.value = random_tensor(&mut r, &[3]);
        let x = random_tensor(&mut r, &[2, 2, 4, 5, 4]);
        out.push((format!("conv3d stride {stride:?} {padding:?}"), check_layer(&mut layer, &x, Mode::Train, 2)));
    }
    out
}

pub fn factored_conv() -> Checks {
    let mut r = rng(3);
    let mut out = Checks::new();
    for relu in [false, true] {
        let mut layer = Conv2Plus1dLayer::<f64>::new(2, 3, 4, [3, 3, 3], [2, 2, 2], relu, &mut r).unwrap();
        let x = random_tensor(&mut r, &[2, 2, 4, 5, 5]);
        out.push((format!("conv(2+1)d relu={relu}"), check_layer(&mut layer, &x, Mode::Train, 4)));
    }
    out
}

pub fn batch_norm() -> Checks {
    let mut r = rng(5);
    let mut layer = BatchNormLayer::<f64>::new(3).unwrap();
    layer.gamma.value = random_tensor(&mut r, &[3]);
    layer.beta.value = random_tensor(&mut r, &[3]);
    let x = random_tensor(&mut r, &[2, 3, 2, 3, 3]);
    let train = check_layer(&mut layer, &x, Mode::Train, 6);
    layer.running_var = Tensor::new(vec![3], vec![0.5, 1.5, 2.0]).unwrap();
    let infer = check_layer(&mut layer, &x, Mode::Infer, 7);
    vec![("batch norm train".into(), train), ("batch norm infer".into(), infer)]
}

pub fn shape_layers() -> Checks {
    let mut r = rng(8);
    let x = away_from_zero(random_tensor(&mut r, &[2, 3, 2, 3, 4]));
    let mut out = vec![
        ("relu".to_string(), check_layer(&mut Relu::default(), &x, Mode::Train, 9)),
        ("global pool".to_string(), check_layer(&mut GlobalAvgPool::default(), &x, Mode::Train, 10)),
        ("flatten".to_string(), check_layer(&mut Flatten::default(), &x, Mode::Train, 11)),
    ];
    for target in [[1, 2, 2], [3, 5, 7], [2, 3, 4]] {
        let mut resize = Resize::new(target).unwrap();
        out.push((format!("resize {target:?}"), check_layer(&mut resize, &x, Mode::Train, 12)));
    }
    out
}

pub fn dense_and_frames() -> Checks {
    let mut r = rng(13);
    let mut dense = Dense::<f64>::new(6, 4, &mut r).unwrap();
    dense.bias.value = random_tensor(&mut r, &[4]);
    let x = random_tensor(&mut r, &[3, 6]);
    let clip = random_tensor(&mut r, &[2, 1, 4, 3, 3]);
    let rows = random_tensor(&mut r, &[8, 5]);
    vec![
        ("dense".into(), check_layer(&mut dense, &x, Mode::Train, 14)),
        ("center frame".into(), check_layer(&mut CenterFrame::default(), &clip, Mode::Train, 15)),
        ("fold frames".into(), check_layer(&mut FoldFrames::default(), &clip, Mode::Train, 16)),
        ("frame mean".into(), check_layer(&mut FrameMean { frames: 4 }, &rows, Mode::Train, 17)),
    ]
}

/// Dropout with its stream rewound before every forward so the mask is fixed.
struct Replayed {
    inner: Dropout<f64>,
    state: DropoutState,
}

impl Layer<f64> for Replayed {
    fn kind(&self) -> &'static str {
        "dropout"
    }

    fn output_dims(&self, input: &[usize]) -> sonogest::Result<Vec<usize>> {
        self.inner.output_dims(input)
    }

    fn forward(&mut self, input: &Tensor<f64>, mode: Mode) -> sonogest::Result<Tensor<f64>> {
        self.inner.restore(&self.state)?;
        self.inner.forward(input, mode)
    }

    fn backward(&mut self, grad_out: &Tensor<f64>) -> sonogest::Result<Tensor<f64>> {
        self.inner.backward(grad_out)
    }
}

pub fn dropout() -> Checks {
    let inner = Dropout::<f64>::new(0.5, 21).unwrap();
    let state = inner.state();
    let mut layer = Replayed { inner, state };
    let x = random_tensor(&mut rng(22), &[4, 10]);
    vec![
        ("dropout train".into(), check_layer(&mut layer, &x, Mode::Train, 23)),
        ("dropout infer".into(), check_layer(&mut layer, &x, Mode::Infer, 24)),
    ]
}

pub fn residual_blocks() -> Checks {
    let mut r = rng(25);
    let units = [
        UnitKind::Full { kernel: [3, 3, 3] },
        UnitKind::Factored {
            kernel: [3, 3, 3],
            mid: None,
            interleaved_relu: false,
        },
    ];
    let mut out = Checks::new();
    for unit in units {
        for (c_in, stride) in [(2, [1, 1, 1]), (3, [1, 1, 1]), (2, [2, 2, 2])] {
            let mut block = ResidualBlock::<f64>::new(c_in, 3, stride, unit, &mut r).unwrap();
            let x = random_tensor(&mut r, &[2, c_in, 2, 4, 4]);
            let label = format!("residual {} {c_in}->3 stride {stride:?}", if matches!(unit, UnitKind::Full { .. }) { "full" } else { "factored" });
            out.push((label, check_layer(&mut block, &x, Mode::Train, 26)));
        }
    }
    out
}

pub fn cross_entropy() -> Checks {
    let logits = random_tensor(&mut rng(27), &[4, 5]).scale(3.0).unwrap();
    let labels = one_hot(&[0, 4, 2, 2], 5).unwrap();
    let (_, grad) = softmax_cross_entropy(&logits, &labels).unwrap();
    let num = numeric_grad(&logits, |l| softmax_cross_entropy(l, &labels).unwrap().0);
    vec![("softmax cross entropy".into(), rel_error(grad.data(), &num))]
}

/// Every single-layer group above.
pub fn all_layers() -> Checks {
    [conv3d(), factored_conv(), batch_norm(), shape_layers(), dense_and_frames(), dropout(), residual_blocks(), cross_entropy()].concat()
}

/// PROPOSED on a 1x4x8x8 input with widths [2, 3] and 3 classes.
pub fn tiny_proposed() -> Network<f64> {
    let mut spec = ModelSpec::new(Variant::Proposed);
    spec.num_classes = 3;
    spec.input_shape = [1, 4, 8, 8];
    spec.stage_filters = vec![2, 3];
    spec.resize_targets = Some(vec![[2, 4, 4]]);
    spec.seed = 28;
    Network::build(&spec).unwrap()
}

/// Whole-network check with the training loss. Reports the input, the worst
/// single parameter tensor and all parameters flattened together.
pub fn tiny_network() -> Checks {
    let mut net = tiny_proposed();
    let dropout = net.dropout_state().expect("network has dropout");
    let x = random_tensor(&mut rng(29), &[2, 1, 4, 8, 8]);
    let labels = one_hot(&[2, 0], 3).unwrap();

    let loss = |net: &mut Network<f64>, x: &Tensor<f64>| {
        net.restore_dropout(&dropout).unwrap();
        let logits = net.forward(x, Mode::Train).unwrap();
        net.clear_cache();
        softmax_cross_entropy(&logits, &labels).unwrap().0
    };

    net.restore_dropout(&dropout).unwrap();
    let logits = net.forward(&x, Mode::Train).unwrap();
    let (_, grad_logits) = softmax_cross_entropy(&logits, &labels).unwrap();
    let (grad_x, grads) = net.backward_with_input(&grad_logits).unwrap();

    let num_x = numeric_grad(&x, |xp| loss(&mut net, xp));
    let input = rel_error(grad_x.data(), &num_x);

    let params: BTreeMap<String, Tensor<f64>> = net.params();
    let mut worst = 0.0f64;
    let mut flat_analytic = Vec::new();
    let mut flat_numeric = Vec::new();
    for (name, value) in &params {
        let num = numeric_grad(value, |v| {
            net.visit_params_mut(&mut |n, p: &mut Param<f64>| {
                if &n == name {
                    p.value = v.clone();
                }
            });
            loss(&mut net, &x)
        });
        net.visit_params_mut(&mut |n, p: &mut Param<f64>| {
            if &n == name {
                p.value = value.clone();
            }
        });
        let analytic = grads[name].data();
        worst = worst.max(rel_error(analytic, &num));
        flat_analytic.extend_from_slice(analytic);
        flat_numeric.extend(num);
    }
    vec![
        ("network input".into(), input),
        ("network worst parameter tensor".into(), worst),
        (format!("network {} parameters", flat_analytic.len()), rel_error(&flat_analytic, &flat_numeric)),
    ]
}
