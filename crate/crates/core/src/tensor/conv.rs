use serde::{Deserialize, Serialize};

use super::{ensure_finite, Shape, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    /// Zero padding so that stride 1 preserves extents; for stride `s` the
    /// output extent is `ceil(L / s)`. Odd deficits put the extra zero on the
    /// trailing side.
    Same,
    Valid,
}

/// Resolved extents of one 3D convolution over `(T, H, W)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub out_channels: usize,
    pub input: [usize; 3],
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub pad_before: [usize; 3],
    pub output: [usize; 3],
}

impl ConvGeometry {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        input: [usize; 3],
        kernel: [usize; 3],
        stride: [usize; 3],
        padding: Padding,
    ) -> Result<Self> {
        let mut pad_before = [0; 3];
        let mut output = [0; 3];
        for axis in 0..3 {
            let (len, k, s) = (input[axis], kernel[axis], stride[axis]);
            if len == 0 || k == 0 || s == 0 {
                return Err(Error::InvalidShape(format!(
                    "conv3d: zero extent (input {input:?}, kernel {kernel:?}, stride {stride:?})"
                )));
            }
            match padding {
                Padding::Same => {
                    let out = len.div_ceil(s);
                    let total = ((out - 1) * s + k).saturating_sub(len);
                    pad_before[axis] = total / 2;
                    output[axis] = out;
                }
                Padding::Valid => {
                    if k > len {
                        return Err(Error::InvalidShape(format!(
                            "conv3d: kernel {kernel:?} larger than input {input:?} under valid padding"
                        )));
                    }
                    output[axis] = (len - k) / s + 1;
                }
            }
        }
        Ok(ConvGeometry {
            in_channels,
            out_channels,
            input,
            kernel,
            stride,
            pad_before,
            output,
        })
    }

    fn from_tensors<T: Scalar>(
        input: &Tensor<T>,
        weights: &Tensor<T>,
        stride: [usize; 3],
        padding: Padding,
    ) -> Result<Self> {
        let (x, w) = (input.dims(), weights.dims());
        if x.len() != 5 {
            return Err(Error::InvalidShape(format!(
                "conv3d input must be (N, C, T, H, W), got {x:?}"
            )));
        }
        if w.len() != 5 {
            return Err(Error::InvalidShape(format!(
                "conv3d weights must be (C_out, C_in, kt, kh, kw), got {w:?}"
            )));
        }
        if x[1] != w[1] {
            return Err(Error::ChannelMismatch {
                op: "conv3d",
                expected: w[1],
                found: x[1],
            });
        }
        Self::new(w[1], w[0], [x[2], x[3], x[4]], [w[2], w[3], w[4]], stride, padding)
    }

    pub fn patch_len(&self) -> usize {
        self.in_channels * self.kernel.iter().product::<usize>()
    }

    pub fn out_voxels(&self) -> usize {
        self.output.iter().product()
    }

    pub fn in_voxels(&self) -> usize {
        self.input.iter().product()
    }

    /// 1x1x1 kernel at unit stride: the patch matrix is the input itself.
    fn is_pointwise(&self) -> bool {
        self.kernel == [1, 1, 1] && self.stride == [1, 1, 1]
    }

    /// Source index along `axis` for output position `o` and kernel tap `d`,
    /// or `None` when it falls in the zero padding.
    #[inline]
    fn source(&self, axis: usize, o: usize, d: usize) -> Option<usize> {
        let pos = (o * self.stride[axis] + d).checked_sub(self.pad_before[axis])?;
        (pos < self.input[axis]).then_some(pos)
    }
}

impl ConvGeometry {
    /// Output positions `[lo, hi)` along `axis` whose tap `d` lands inside the input.
    fn valid_range(&self, axis: usize, d: usize) -> (usize, usize) {
        let (s, pad, len, out) = (self.stride[axis], self.pad_before[axis], self.input[axis], self.output[axis]);
        let lo = if d >= pad { 0 } else { (pad - d).div_ceil(s) };
        let hi = (len + pad).saturating_sub(d).div_ceil(s);
        (lo.min(out), hi.min(out).max(lo.min(out)))
    }
}

/// Walks the columns of the patch matrix `(C_in*kt*kh*kw) x (T'*H'*W')`
/// that belong to output lines `lines` (a line is one `(t', h')` pair, `W'`
/// columns wide). Each line segment is handed to
/// `emit(row, col, lead, body, trail)` as `lead` zeros, the values `body` and
/// `trail` zeros, with `col` counted from the start of the range; taps that
/// fall into the padding read zero.
fn gather_patches<T: Scalar>(
    x: &[T],
    g: &ConvGeometry,
    lines: std::ops::Range<usize>,
    mut emit: impl FnMut(usize, usize, usize, &[T], usize),
) {
    let [t_in, h_in, w_in] = g.input;
    let [kt, kh, kw] = g.kernel;
    let [_, ho_n, wo_n] = g.output;
    let sw = g.stride[2];
    let mut strided = vec![T::zero(); wo_n];
    let mut row = 0;
    for ci in 0..g.in_channels {
        for dt in 0..kt {
            for dh in 0..kh {
                for dw in 0..kw {
                    let (lo, hi) = g.valid_range(2, dw);
                    let first = (lo * sw + dw).saturating_sub(g.pad_before[2]);
                    for l in lines.clone() {
                        let (to, ho) = (l / ho_n, l % ho_n);
                        let col = (l - lines.start) * wo_n;
                        match (g.source(0, to, dt), g.source(1, ho, dh)) {
                            (Some(t), Some(h)) if lo < hi => {
                                let src = &x[((ci * t_in + t) * h_in + h) * w_in..][..w_in];
                                if sw == 1 {
                                    emit(row, col, lo, &src[first..first + (hi - lo)], wo_n - hi);
                                } else {
                                    for (i, v) in strided[..hi - lo].iter_mut().enumerate() {
                                        *v = src[first + i * sw];
                                    }
                                    emit(row, col, lo, &strided[..hi - lo], wo_n - hi);
                                }
                            }
                            _ => emit(row, col, wo_n, &[], 0),
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// Writes one gathered segment into row `row` of a row-major matrix.
#[inline]
fn put_row_segment<T: Scalar>(dst: &mut [T], lead: usize, body: &[T], trail: usize) {
    dst[..lead].fill(T::zero());
    dst[lead..lead + body.len()].copy_from_slice(body);
    dst[lead + body.len()..lead + body.len() + trail].fill(T::zero());
}

/// Scatter-adds the patch-matrix gradient of output lines `lines` (row-major,
/// `row_stride` apart) back onto the input grid.
fn col2im<T: Scalar>(cols: &[T], row_stride: usize, g: &ConvGeometry, lines: std::ops::Range<usize>, x: &mut [T]) {
    let [t_in, h_in, w_in] = g.input;
    let [kt, kh, kw] = g.kernel;
    let [_, ho_n, wo_n] = g.output;
    let sw = g.stride[2];
    let mut row = 0;
    for ci in 0..g.in_channels {
        for dt in 0..kt {
            for dh in 0..kh {
                for dw in 0..kw {
                    let (lo, hi) = g.valid_range(2, dw);
                    let src_row = &cols[row * row_stride..];
                    row += 1;
                    if lo >= hi {
                        continue;
                    }
                    let first = lo * sw + dw - g.pad_before[2];
                    for l in lines.clone() {
                        let (to, ho) = (l / ho_n, l % ho_n);
                        let (Some(t), Some(h)) = (g.source(0, to, dt), g.source(1, ho, dh)) else { continue };
                        let src = &src_row[(l - lines.start) * wo_n..][lo..hi];
                        let dst = &mut x[((ci * t_in + t) * h_in + h) * w_in..][..w_in];
                        if sw == 1 {
                            for (d, &v) in dst[first..first + (hi - lo)].iter_mut().zip(src) {
                                *d += v;
                            }
                        } else {
                            for (i, &v) in src.iter().enumerate() {
                                dst[first + i * sw] += v;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Elements of patch matrix kept in flight at once; sized to stay in L2.
const CHUNK_ELEMS: usize = 1 << 16;

/// Splits the output lines into ranges whose patch block holds about
/// [`CHUNK_ELEMS`] values.
fn line_chunks(g: &ConvGeometry) -> impl Iterator<Item = std::ops::Range<usize>> {
    let lines = g.output[0] * g.output[1];
    let per_line = g.patch_len() * g.output[2];
    let step = (CHUNK_ELEMS / per_line.max(1)).clamp(1, lines.max(1));
    (0..lines).step_by(step).map(move |s| s..(s + step).min(lines))
}

const TILE_COLS: usize = 16;

/// Number of `TILE_COLS`-wide column panels covering `width` columns.
fn panel_count(width: usize) -> usize {
    width.div_ceil(TILE_COLS)
}

/// Writes `values` into row `row` of a `depth x width` matrix stored as
/// consecutive column panels, each `depth x TILE_COLS` and contiguous.
#[inline]
fn put_panel_run<T: Scalar>(packed: &mut [T], depth: usize, row: usize, mut col: usize, mut values: &[T]) {
    while !values.is_empty() {
        let (q, c) = (col / TILE_COLS, col % TILE_COLS);
        let take = (TILE_COLS - c).min(values.len());
        let at = q * depth * TILE_COLS + row * TILE_COLS + c;
        packed[at..at + take].copy_from_slice(&values[..take]);
        values = &values[take..];
        col += take;
    }
}

/// Zero-fills `len` entries of row `row` starting at column `col` in panel layout.
#[inline]
fn put_panel_zeros<T: Scalar>(packed: &mut [T], depth: usize, row: usize, mut col: usize, mut len: usize) {
    while len > 0 {
        let (q, c) = (col / TILE_COLS, col % TILE_COLS);
        let take = (TILE_COLS - c).min(len);
        let at = q * depth * TILE_COLS + row * TILE_COLS + c;
        packed[at..at + take].fill(T::zero());
        len -= take;
        col += take;
    }
}

/// `out[r, j] = bias[r] + sum_k w[r, k] * cols[k, j]`, accumulated strictly in
/// increasing `k` starting from the bias through [`Scalar::mul_acc`], so every output equals the plain
/// nested-loop sum bit for bit. `packed` holds `cols` in panel layout.
#[allow(clippy::too_many_arguments)]
fn ordered_gemm<T: Scalar>(
    weights: &[T],
    bias: &[T],
    packed: &[T],
    out: &mut [T],
    out_stride: usize,
    rows: usize,
    depth: usize,
    width: usize,
) {
    // one panel stays cache-resident while every row tile sweeps it
    for (q, panel) in packed.chunks_exact(depth * TILE_COLS).enumerate() {
        let j0 = q * TILE_COLS;
        if j0 >= width {
            break;
        }
        let cols = TILE_COLS.min(width - j0);
        let mut r0 = 0;
        while r0 + 8 <= rows {
            tile_rows::<T, 8>(weights, bias, panel, out, out_stride, r0, depth, j0, cols);
            r0 += 8;
        }
        if r0 + 4 <= rows {
            tile_rows::<T, 4>(weights, bias, panel, out, out_stride, r0, depth, j0, cols);
            r0 += 4;
        }
        if r0 + 2 <= rows {
            tile_rows::<T, 2>(weights, bias, panel, out, out_stride, r0, depth, j0, cols);
            r0 += 2;
        }
        if r0 < rows {
            tile_rows::<T, 1>(weights, bias, panel, out, out_stride, r0, depth, j0, cols);
        }
    }
}

#[inline(always)]
#[allow(clippy::too_many_arguments)]
fn tile_rows<T: Scalar, const R: usize>(
    weights: &[T],
    bias: &[T],
    panel: &[T],
    out: &mut [T],
    out_stride: usize,
    r0: usize,
    depth: usize,
    j0: usize,
    cols: usize,
) {
    let w_rows: [&[T]; R] = std::array::from_fn(|r| &weights[(r0 + r) * depth..(r0 + r + 1) * depth]);
    let mut acc = [[T::zero(); TILE_COLS]; R];
    for r in 0..R {
        acc[r] = [bias[r0 + r]; TILE_COLS];
    }
    for (k, x) in panel.chunks_exact(TILE_COLS).enumerate() {
        let x: &[T; TILE_COLS] = x.try_into().expect("panel width");
        for r in 0..R {
            let w = w_rows[r][k];
            for c in 0..TILE_COLS {
                acc[r][c] = T::mul_acc(acc[r][c], w, x[c]);
            }
        }
    }
    for r in 0..R {
        // copying through a fixed-size local keeps `acc` in registers
        let row: [T; TILE_COLS] = acc[r];
        out[(r0 + r) * out_stride + j0..][..cols].copy_from_slice(&row[..cols]);
    }
}

/// 3D convolution over `(N, C_in, T, H, W)` with weights
/// `(C_out, C_in, kt, kh, kw)`; out-of-range taps read zero.
///
/// The patch-gather + tiled product accumulates taps in `(ci, dt, dh, dw)`
/// order starting from the bias, which makes it bit-identical to the direct
/// six-loop sum.
pub fn conv3d_forward<T: Scalar>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    bias: &Tensor<T>,
    stride: [usize; 3],
    padding: Padding,
) -> Result<Tensor<T>> {
    let g = ConvGeometry::from_tensors(input, weights, stride, padding)?;
    if bias.dims() != [g.out_channels] {
        return Err(Error::ShapeMismatch {
            op: "conv3d bias",
            left: bias.dims().to_vec(),
            right: vec![g.out_channels],
        });
    }
    let n = input.dims()[0];
    let (k, p, in_len) = (g.patch_len(), g.out_voxels(), g.in_channels * g.in_voxels());
    let out_len = g.out_channels * p;
    let wo = g.output[2];
    let mut out = vec![T::zero(); n * out_len];
    let mut packed = Vec::new();
    for sample in 0..n {
        let x = &input.data()[sample * in_len..(sample + 1) * in_len];
        let y = &mut out[sample * out_len..(sample + 1) * out_len];
        for lines in line_chunks(&g) {
            let (c0, width) = (lines.start * wo, lines.len() * wo);
            // padded tail columns of the last panel are never written back
            packed.resize(panel_count(width) * k * TILE_COLS, T::zero());
            if g.is_pointwise() {
                for (row, values) in x.chunks_exact(p).enumerate() {
                    put_panel_run(&mut packed, k, row, 0, &values[c0..c0 + width]);
                }
            } else {
                gather_patches(x, &g, lines, |row, col, lead, body, trail| {
                    put_panel_zeros(&mut packed, k, row, col, lead);
                    put_panel_run(&mut packed, k, row, col + lead, body);
                    put_panel_zeros(&mut packed, k, row, col + lead + body.len(), trail);
                });
            }
            ordered_gemm(weights.data(), bias.data(), &packed, &mut y[c0..], p, g.out_channels, k, width);
        }
    }
    ensure_finite(&out, "conv3d_forward")?;
    let [to, ho, wo] = g.output;
    Ok(Tensor::from_parts_unchecked(
        Shape::new(vec![n, g.out_channels, to, ho, wo])?,
        out,
    ))
}

/// Gradients of `sum(grad_out * conv3d_forward(...))`.
#[derive(Clone, Debug)]
pub struct ConvGrads<T> {
    pub input: Tensor<T>,
    pub weights: Tensor<T>,
    pub bias: Tensor<T>,
}

pub fn conv3d_backward<T: Scalar>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    grad_out: &Tensor<T>,
    stride: [usize; 3],
    padding: Padding,
) -> Result<ConvGrads<T>> {
    let g = ConvGeometry::from_tensors(input, weights, stride, padding)?;
    let n = input.dims()[0];
    let [to, ho, wo] = g.output;
    let expected = [n, g.out_channels, to, ho, wo];
    if grad_out.dims() != expected {
        return Err(Error::ShapeMismatch {
            op: "conv3d_backward grad_out",
            left: grad_out.dims().to_vec(),
            right: expected.to_vec(),
        });
    }
    let (k, p, in_len) = (g.patch_len(), g.out_voxels(), g.in_channels * g.in_voxels());
    let cout = g.out_channels;
    let out_len = cout * p;
    let mut grad_w = vec![T::zero(); cout * k];
    let mut grad_b = vec![T::zero(); cout];
    let mut grad_x = vec![T::zero(); n * in_len];
    let wo = g.output[2];
    let mut cols = Vec::new();
    let mut grad_cols = Vec::new();
    let (k_i, p_i) = (k as isize, p as isize);
    for sample in 0..n {
        let x = &input.data()[sample * in_len..(sample + 1) * in_len];
        let go = &grad_out.data()[sample * out_len..(sample + 1) * out_len];
        for (co, gb) in grad_b.iter_mut().enumerate() {
            *gb += go[co * p..(co + 1) * p].iter().copied().sum::<T>();
        }
        let gx = &mut grad_x[sample * in_len..(sample + 1) * in_len];
        if g.is_pointwise() {
            // grad_w += grad_out (cout x p) * x^T (p x k); grad_x = w^T (k x cout) * grad_out
            T::gemm(cout, p, k, T::one(), go, (p_i, 1), x, (1, p_i), T::one(), &mut grad_w, (k_i, 1));
            T::gemm(k, cout, p, T::one(), weights.data(), (1, k_i), go, (p_i, 1), T::zero(), gx, (p_i, 1));
            continue;
        }
        for lines in line_chunks(&g) {
            let (c0, width) = (lines.start * wo, lines.len() * wo);
            let w_i = width as isize;
            cols.resize(k * width, T::zero());
            grad_cols.resize(k * width, T::zero());
            gather_patches(x, &g, lines.clone(), |row, col, lead, body, trail| {
                put_row_segment(&mut cols[row * width + col..], lead, body, trail)
            });
            let go_chunk = &go[c0..];
            T::gemm(cout, width, k, T::one(), go_chunk, (p_i, 1), &cols, (1, w_i), T::one(), &mut grad_w, (k_i, 1));
            T::gemm(k, cout, width, T::one(), weights.data(), (1, k_i), go_chunk, (p_i, 1), T::zero(), &mut grad_cols, (w_i, 1));
            col2im(&grad_cols, width, &g, lines, gx);
        }
    }
    ensure_finite(&grad_x, "conv3d_backward")?;
    ensure_finite(&grad_w, "conv3d_backward")?;
    ensure_finite(&grad_b, "conv3d_backward")?;
    Ok(ConvGrads {
        input: Tensor::from_parts_unchecked(input.shape().clone(), grad_x),
        weights: Tensor::from_parts_unchecked(weights.shape().clone(), grad_w),
        bias: Tensor::from_parts_unchecked(Shape::new(vec![cout])?, grad_b),
    })
}
