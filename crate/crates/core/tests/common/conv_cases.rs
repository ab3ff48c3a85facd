//! Random shapes for the convolution oracle.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use sonogest::tensor::{conv3d_forward, Padding};
use sonogest::{Scalar, Tensor};

use super::naive_conv3d;

pub struct Case {
    pub input: [usize; 5],
    pub c_out: usize,
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub padding: Padding,
}

pub fn random_case(rng: &mut ChaCha8Rng) -> Case {
    let input = [
        rng.gen_range(1..=2),
        rng.gen_range(1..=3),
        rng.gen_range(1..=4),
        rng.gen_range(1..=5),
        rng.gen_range(1..=5),
    ];
    let padding = if rng.gen_bool(0.5) { Padding::Same } else { Padding::Valid };
    let kernel = [0, 1, 2].map(|a| {
        let limit = if padding == Padding::Valid { input[a + 2].min(3) } else { 3 };
        rng.gen_range(1..=limit)
    });
    Case {
        input,
        c_out: rng.gen_range(1..=4),
        kernel,
        stride: [0; 3].map(|_| rng.gen_range(1..=2)),
        padding,
    }
}

/// Compares the fast forward pass with [`naive_conv3d`] bit for bit.
pub fn check<T: Scalar>(case: &Case, rng: &mut ChaCha8Rng) -> Result<(), String> {
    let values = |rng: &mut ChaCha8Rng, dims: &[usize]| -> Tensor<T> {
        Tensor::from_fn(dims.to_vec(), |_| T::lit(rng.gen_range(-1.0..1.0))).unwrap()
    };
    let x = values(rng, &case.input);
    let [kt, kh, kw] = case.kernel;
    let w = values(rng, &[case.c_out, case.input[1], kt, kh, kw]);
    let b = values(rng, &[case.c_out]);
    let fast = conv3d_forward(&x, &w, &b, case.stride, case.padding).unwrap();
    let slow = naive_conv3d(&x, &w, &b, case.stride, case.padding);
    if fast.dims() != slow.dims() {
        return Err(format!("shape {:?} vs {:?}", fast.dims(), slow.dims()));
    }
    for (i, (a, b)) in fast.data().iter().zip(slow.data()).enumerate() {
        if a.to_f64_lossy().to_bits() != b.to_f64_lossy().to_bits() {
            return Err(format!(
                "element {i} differs: {a:?} vs {b:?} (input {:?}, kernel {:?}, stride {:?}, {:?})",
            case.input,
            case.kernel,
            case.stride,
                case.padding
            ));
        }
    }
    Ok(())
}
