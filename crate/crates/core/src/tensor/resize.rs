use super::{ensure_finite, Shape, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Per-output-index source pair and blend weight along one axis, using the
/// align-corners mapping `src = dst * (L - 1) / (L' - 1)`.
fn axis_taps<T: Scalar>(len_in: usize, len_out: usize) -> Vec<(usize, usize, T)> {
    (0..len_out)
        .map(|dst| {
            if len_out == 1 || len_in == 1 {
                return (0, 0, T::zero());
            }
            let src = (dst * (len_in - 1)) as f64 / (len_out - 1) as f64;
            let i0 = (src.floor() as usize).min(len_in - 1);
            let i1 = (i0 + 1).min(len_in - 1);
            (i0, i1, T::lit(src - i0 as f64))
        })
        .collect()
}

#[inline]
fn lerp<T: Scalar>(a: T, b: T, f: T) -> T {
    a + f * (b - a)
}

fn check_video<T: Scalar>(input: &Tensor<T>, target: [usize; 3]) -> Result<()> {
    if input.dims().len() != 5 {
        return Err(Error::InvalidShape(format!(
            "trilinear_resize expects (N, C, T, H, W), got {:?}",
            input.dims()
        )));
    }
    if target.contains(&0) {
        return Err(Error::InvalidShape(format!("resize target {target:?} has a zero extent")));
    }
    Ok(())
}

/// Trilinear resampling of the `(T, H, W)` axes with align-corners
/// coordinates. Resizing to the input's own extents returns the input.
pub fn trilinear_resize<T: Scalar>(input: &Tensor<T>, target: [usize; 3]) -> Result<Tensor<T>> {
    check_video(input, target)?;
    let d = input.dims();
    let (n, c, t_in, h_in, w_in) = (d[0], d[1], d[2], d[3], d[4]);
    if [t_in, h_in, w_in] == target {
        return Ok(input.clone());
    }
    let [t_out, h_out, w_out] = target;
    let tt = axis_taps::<T>(t_in, t_out);
    let th = axis_taps::<T>(h_in, h_out);
    let tw = axis_taps::<T>(w_in, w_out);
    let in_plane = t_in * h_in * w_in;
    let out_plane = t_out * h_out * w_out;
    let mut out = Vec::with_capacity(n * c * out_plane);
    for plane in input.data().chunks_exact(in_plane) {
        let at = |t: usize, h: usize, w: usize| plane[(t * h_in + h) * w_in + w];
        for &(t0, t1, ft) in &tt {
            for &(h0, h1, fh) in &th {
                for &(w0, w1, fw) in &tw {
                    let c00 = lerp(at(t0, h0, w0), at(t0, h0, w1), fw);
                    let c01 = lerp(at(t0, h1, w0), at(t0, h1, w1), fw);
                    let c10 = lerp(at(t1, h0, w0), at(t1, h0, w1), fw);
                    let c11 = lerp(at(t1, h1, w0), at(t1, h1, w1), fw);
                    out.push(lerp(lerp(c00, c01, fh), lerp(c10, c11, fh), ft));
                }
            }
        }
    }
    ensure_finite(&out, "trilinear_resize")?;
    Ok(Tensor::from_parts_unchecked(
        Shape::new(vec![n, c, t_out, h_out, w_out])?,
        out,
    ))
}

/// Adjoint of [`trilinear_resize`]: distributes each output gradient onto
/// the eight source samples with the interpolation weights.
pub fn trilinear_resize_backward<T: Scalar>(grad_out: &Tensor<T>, input_dims: &[usize]) -> Result<Tensor<T>> {
    if input_dims.len() != 5 || grad_out.dims().len() != 5 || grad_out.dims()[..2] != input_dims[..2] {
        return Err(Error::ShapeMismatch {
            op: "trilinear_resize_backward",
            left: grad_out.dims().to_vec(),
            right: input_dims.to_vec(),
        });
    }
    let g = grad_out.dims();
    let (t_in, h_in, w_in) = (input_dims[2], input_dims[3], input_dims[4]);
    let (t_out, h_out, w_out) = (g[2], g[3], g[4]);
    if [t_in, h_in, w_in] == [t_out, h_out, w_out] {
        return Ok(grad_out.clone());
    }
    let tt = axis_taps::<T>(t_in, t_out);
    let th = axis_taps::<T>(h_in, h_out);
    let tw = axis_taps::<T>(w_in, w_out);
    let in_plane = t_in * h_in * w_in;
    let out_plane = t_out * h_out * w_out;
    let one = T::one();
    let mut grad = vec![T::zero(); g[0] * g[1] * in_plane];
    for (dst, src) in grad.chunks_exact_mut(in_plane).zip(grad_out.data().chunks_exact(out_plane)) {
        let mut idx = 0;
        for &(t0, t1, ft) in &tt {
            for &(h0, h1, fh) in &th {
                for &(w0, w1, fw) in &tw {
                    let go = src[idx];
                    idx += 1;
                    for (t, wt) in [(t0, one - ft), (t1, ft)] {
                        for (h, wh) in [(h0, one - fh), (h1, fh)] {
                            let base = (t * h_in + h) * w_in;
                            let s = go * wt * wh;
                            dst[base + w0] += s * (one - fw);
                            dst[base + w1] += s * fw;
                        }
                    }
                }
            }
        }
    }
    ensure_finite(&grad, "trilinear_resize_backward")?;
    Ok(Tensor::from_parts_unchecked(Shape::new(input_dims.to_vec())?, grad))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_to_three_is_midpoint() {
        let x = Tensor::<f64>::new(vec![1, 1, 1, 1, 2], vec![0.0, 1.0]).unwrap();
        let y = trilinear_resize(&x, [1, 1, 3]).unwrap();
        assert_eq!(y.data(), &[0.0, 0.5, 1.0]);
    }

    #[test]
    fn identity_resize_bitwise() {
        let x = Tensor::<f32>::from_fn(vec![2, 3, 4, 5, 6], |i| (i as f32 * 0.37).sin()).unwrap();
        let y = trilinear_resize(&x, [4, 5, 6]).unwrap();
        assert!(x.data().iter().zip(y.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn single_output_takes_first_sample() {
        let x = Tensor::<f64>::new(vec![1, 1, 1, 1, 4], vec![5.0, 1.0, 2.0, 3.0]).unwrap();
        assert_eq!(trilinear_resize(&x, [1, 1, 1]).unwrap().data(), &[5.0]);
    }

    #[test]
    fn constant_volume_survives_down_up() {
        let x = Tensor::<f64>::full(vec![1, 2, 7, 9, 11], 0.3).unwrap();
        let down = trilinear_resize(&x, [3, 4, 5]).unwrap();
        let up = trilinear_resize(&down, [7, 9, 11]).unwrap();
        assert!(down.data().iter().all(|&v| v == 0.3));
        assert!(up.data().iter().all(|&v| v == 0.3));
    }

    #[test]
    fn zero_target_rejected() {
        let x = Tensor::<f64>::zeros(vec![1, 1, 2, 2, 2]).unwrap();
        assert!(trilinear_resize(&x, [0, 2, 2]).is_err());
    }
}
