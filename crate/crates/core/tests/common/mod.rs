//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sonogest::layers::{Layer, Mode};
use sonogest::pipeline::Peak;
use sonogest::tensor::Padding;
use sonogest::{Scalar, Tensor};

pub mod conv_cases;
pub mod gradcheck;

pub fn random_tensor<R: Rng>(rng: &mut R, dims: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(dims.to_vec(), |_| rng.gen_range(-1.0..1.0)).unwrap()
}

/// Gradients smaller than this in norm count as structurally zero (a bias
/// feeding batch norm); for those the absolute difference is reported.
pub const ZERO_NORM: f64 = 1e-7;

/// Norm-wise relative error `|a - b| / max(|a|, |b|)`.
pub fn rel_error(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
    if scale < ZERO_NORM {
        diff
    } else {
        diff / scale
    }
}

pub const FD_STEP: f64 = 1e-5;

/// Central difference of `f` with respect to every element of `x`.
pub fn numeric_grad(x: &Tensor<f64>, mut f: impl FnMut(&Tensor<f64>) -> f64) -> Vec<f64> {
    let mut probe = x.clone();
    (0..x.numel())
        .map(|i| {
            let orig = probe.data()[i];
            probe.data_mut()[i] = orig + FD_STEP;
            let up = f(&probe);
            probe.data_mut()[i] = orig - FD_STEP;
            let down = f(&probe);
            probe.data_mut()[i] = orig;
            (up - down) / (2.0 * FD_STEP)
        })
        .collect()
}

pub fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

/// Checks input and parameter gradients of `layer` for the scalar loss
/// `sum(layer(x) * probe)`. Returns the worst relative error seen.
pub fn check_layer(layer: &mut dyn Layer<f64>, x: &Tensor<f64>, mode: Mode, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let y = layer.forward(x, mode).unwrap();
    let probe = random_tensor(&mut rng, y.dims());
    let grad_x = layer.backward(&probe).unwrap();
    let mut analytic = Vec::new();
    layer.visit_params("", &mut |name, p| analytic.push((name, p.grad.clone().expect("gradient present"))));

    let num_x = numeric_grad(x, |xp| dot(&layer.forward(xp, mode).unwrap(), &probe));
    let mut worst = rel_error(grad_x.data(), &num_x);
    for (name, grad) in analytic {
        let mut original = None;
        layer.visit_params("", &mut |n, p| {
            if n == name {
                original = Some(p.value.clone());
            }
        });
        let original = original.unwrap();
        let num = numeric_grad(&original, |value| {
            layer.visit_params_mut("", &mut |n, p| {
                if n == name {
                    p.value = value.clone();
                }
            });
            dot(&layer.forward(x, mode).unwrap(), &probe)
        });
        layer.visit_params_mut("", &mut |n, p| {
            if n == name {
                p.value = original.clone();
            }
        });
        worst = worst.max(rel_error(grad.data(), &num));
    }
    layer.clear_cache();
    worst
}

/// Direct six-loop convolution; accumulates in `(ci, dt, dh, dw)` order from
/// the bias with the same fused multiply-add as the library.
pub fn naive_conv3d<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
    stride: [usize; 3],
    padding: Padding,
) -> Tensor<T> {
    let (n, cin, ins) = (x.dims()[0], x.dims()[1], [x.dims()[2], x.dims()[3], x.dims()[4]]);
    let (cout, k) = (w.dims()[0], [w.dims()[2], w.dims()[3], w.dims()[4]]);
    let mut outs = [0; 3];
    let mut pads = [0; 3];
    for a in 0..3 {
        match padding {
            Padding::Same => {
                outs[a] = ins[a].div_ceil(stride[a]);
                let total = ((outs[a] - 1) * stride[a] + k[a]).saturating_sub(ins[a]);
                pads[a] = total / 2;
            }
            Padding::Valid => outs[a] = (ins[a] - k[a]) / stride[a] + 1,
        }
    }
    let xv = |s: usize, c: usize, t: isize, h: isize, ww: isize| -> T {
        if t < 0 || h < 0 || ww < 0 || t >= ins[0] as isize || h >= ins[1] as isize || ww >= ins[2] as isize {
            T::zero()
        } else {
            x.data()[(((s * cin + c) * ins[0] + t as usize) * ins[1] + h as usize) * ins[2] + ww as usize]
        }
    };
    let mut out = Vec::with_capacity(n * cout * outs.iter().product::<usize>());
    for s in 0..n {
        for co in 0..cout {
            for ot in 0..outs[0] {
                for oh in 0..outs[1] {
                    for ow in 0..outs[2] {
                        let mut acc = b.data()[co];
                        for ci in 0..cin {
                            for dt in 0..k[0] {
                                for dh in 0..k[1] {
                                    for dw in 0..k[2] {
                                        let t = (ot * stride[0] + dt) as isize - pads[0] as isize;
                                        let h = (oh * stride[1] + dh) as isize - pads[1] as isize;
                                        let ww = (ow * stride[2] + dw) as isize - pads[2] as isize;
                                        let wv = w.data()[(((co * cin + ci) * k[0] + dt) * k[1] + dh) * k[2] + dw];
                                        acc = T::mul_acc(acc, wv, xv(s, ci, t, h, ww));
                                    }
                                }
                            }
                        }
                        out.push(acc);
                    }
                }
            }
        }
    }
    Tensor::new(vec![n, cout, outs[0], outs[1], outs[2]], out).unwrap()
}

/// Strict local maxima with prominence found by walking outwards until a
/// strictly higher sample, then greedy selection by prominence.
pub fn brute_force_peaks(s: &[f64], min_prominence: f64, min_distance: usize) -> Vec<usize> {
    let n = s.len();
    let mut cands: Vec<Peak> = Vec::new();
    for i in 1..n.saturating_sub(1) {
        if !(s[i - 1] < s[i] && s[i] > s[i + 1]) {
            continue;
        }
        let mut left_min = s[i];
        let mut j = i;
        while j > 0 {
            j -= 1;
            if s[j] > s[i] {
                break;
            }
            left_min = left_min.min(s[j]);
        }
        let mut right_min = s[i];
        let mut j = i;
        while j + 1 < n {
            j += 1;
            if s[j] > s[i] {
                break;
            }
            right_min = right_min.min(s[j]);
        }
        let prominence = s[i] - left_min.max(right_min);
        if prominence >= min_prominence {
            cands.push(Peak { index: i, prominence });
        }
    }
    cands.sort_by(|a, b| b.prominence.partial_cmp(&a.prominence).unwrap().then(a.index.cmp(&b.index)));
    let mut kept: Vec<usize> = Vec::new();
    for c in cands {
        if kept.iter().all(|&k| k.abs_diff(c.index) >= min_distance) {
            kept.push(c.index);
        }
    }
    kept.sort_unstable();
    kept
}

/// Interior angle by the textbook arccos formula.
pub fn arccos_angle(a: [f64; 3], b: [f64; 3], c: [f64; 3]) -> f64 {
    let u: Vec<f64> = (0..3).map(|i| a[i] - b[i]).collect();
    let v: Vec<f64> = (0..3).map(|i| c[i] - b[i]).collect();
    let d: f64 = u.iter().zip(&v).map(|(x, y)| x * y).sum();
    let nu = u.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    (d / (nu * nv)).clamp(-1.0, 1.0).acos() * 180.0 / std::f64::consts::PI
}

/// Small spatial dataset (3 classes, 4 clips of 4x12x12) and a matching
/// two-stage training configuration writing below `root`.
pub fn tiny_setup(root: &std::path::Path, variant: sonogest::model::Variant) -> sonogest::harness::TrainConfig {
    use sonogest::datagen::{generate, SynthConfig, SynthMode};
    let data = root.join("data");
    let mut synth = SynthConfig::new(SynthMode::Spatial);
    synth.num_classes = 3;
    synth.samples_per_class = 4;
    synth.frames = 4;
    synth.height = 12;
    synth.width = 12;
    generate(&synth, &data).unwrap();
    let mut config = sonogest::harness::TrainConfig::new(variant, data.join(sonogest::pipeline::MANIFEST_FILE), root.join("runs"));
    config.epochs = 4;
    config.batch_size = 3;
    config.lr = 1e-2;
    config.stage_filters = Some(vec![2, 3]);
    config.resize_targets = Some(vec![[2, 6, 6]]);
    config
}

/// Every file below `dir` with its bytes, keyed by relative path.
pub fn read_tree(dir: &std::path::Path) -> std::collections::BTreeMap<String, Vec<u8>> {
    let mut out = std::collections::BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                out.insert(rel, std::fs::read(&path).unwrap());
            }
        }
    }
    out
}

/// Random series drawn from a few families: walks, small integers (plateaus
/// and ties), and noisy oscillations resembling flexion traces.
pub fn random_series(rng: &mut ChaCha8Rng) -> Vec<f64> {
    let len = if rng.gen_bool(0.1) { rng.gen_range(1000..=10_000) } else { rng.gen_range(1..=400) };
    match rng.gen_range(0..3) {
        0 => {
            let mut v = 0.0;
            (0..len)
                .map(|_| {
                    v += rng.gen_range(-1.0..1.0);
                    v
                })
                .collect()
        }
        1 => (0..len).map(|_| f64::from(rng.gen_range(0..5u8))).collect(),
        _ => {
            let period = rng.gen_range(5.0..120.0);
            (0..len)
                .map(|i| 40.0 * (i as f64 * std::f64::consts::TAU / period).sin() + rng.gen_range(-8.0..8.0))
                .collect()
        }
    }
}
