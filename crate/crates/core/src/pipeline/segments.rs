use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::peaks::{by_priority, Peak};

/// Raw extents of one recording: `(T, H, W)`.
pub const RAW_SHAPE: [usize; 3] = [1400, 636, 256];
/// Frame size after cropping.
pub const CROP: (usize, usize) = (224, 224);

/// Grayscale video of one `(subject, gesture)` recording, `(T, H, W)`.
#[derive(Clone, Debug, PartialEq)]
pub struct UltrasoundSequence {
    pub frames: Tensor<f32>,
    pub subject_id: u32,
    pub gesture_id: usize,
}

/// Fixed-length window of frames around one angle peak.
#[derive(Clone, Debug, PartialEq)]
pub struct GestureSegment {
    pub frames: Tensor<f32>,
    pub label: usize,
    pub peak_frame: usize,
    pub subject_id: u32,
    pub repetition: usize,
}

/// First and last frame of the window of length `window` around `peak`, or
/// `None` if it would leave `0..len`.
pub fn segment_bounds(peak: usize, window: usize, len: usize) -> Option<(usize, usize)> {
    if window == 0 {
        return None;
    }
    let start = peak.checked_sub(window / 2)?;
    let end = peak + window.div_ceil(2) - 1;
    (end < len).then_some((start, end))
}

/// Cuts one segment per usable peak. Windows that leave the sequence are
/// dropped; among overlapping windows the more prominent peak wins (earlier
/// index on ties). Segments come back in time order, numbered from zero.
pub fn extract_segments(seq: &UltrasoundSequence, peaks: &[Peak], window: usize) -> Result<Vec<GestureSegment>> {
    let dims = seq.frames.dims();
    if dims.len() != 3 {
        return Err(Error::InvalidShape(format!("sequence must be (T, H, W), got {dims:?}")));
    }
    let (len, plane) = (dims[0], dims[1] * dims[2]);
    let mut candidates: Vec<Peak> = peaks.to_vec();
    by_priority(&mut candidates);
    let mut taken: Vec<(usize, usize, usize)> = Vec::new();
    for p in candidates {
        let Some((start, end)) = segment_bounds(p.index, window, len) else {
            continue;
        };
        if taken.iter().all(|&(s, e, _)| end < s || start > e) {
            taken.push((start, end, p.index));
        }
    }
    taken.sort_unstable();
    taken
        .into_iter()
        .enumerate()
        .map(|(repetition, (start, end, peak))| {
            let data = seq.frames.data()[start * plane..(end + 1) * plane].to_vec();
            Ok(GestureSegment {
                frames: Tensor::new(vec![window, dims[1], dims[2]], data)?,
                label: seq.gesture_id,
                peak_frame: peak,
                subject_id: seq.subject_id,
                repetition,
            })
        })
        .collect()
}

/// Top-left corner of a centered `target` crop.
pub fn center_offset(source: (usize, usize), target: (usize, usize)) -> (usize, usize) {
    ((source.0.saturating_sub(target.0)) / 2, (source.1.saturating_sub(target.1)) / 2)
}

/// Crops every frame to `target` at `offset` (centered by default) and
/// rescales the whole sequence to `[0, 1]` by its own minimum and maximum.
/// A constant sequence maps to zeros.
pub fn crop_and_normalize(
    seq: &UltrasoundSequence,
    target: (usize, usize),
    offset: Option<(usize, usize)>,
) -> Result<UltrasoundSequence> {
    let dims = seq.frames.dims();
    if dims.len() != 3 {
        return Err(Error::InvalidShape(format!("sequence must be (T, H, W), got {dims:?}")));
    }
    let (t, h, w) = (dims[0], dims[1], dims[2]);
    let (row, col) = offset.unwrap_or_else(|| center_offset((h, w), target));
    if target.0 == 0 || target.1 == 0 || row + target.0 > h || col + target.1 > w {
        return Err(Error::Config(format!(
            "crop {target:?} at {:?} does not fit in {h}x{w} frames",
            (row, col)
        )));
    }
    let src = seq.frames.data();
    let mut out = Vec::with_capacity(t * target.0 * target.1);
    for f in 0..t {
        for r in row..row + target.0 {
            let start = (f * h + r) * w + col;
            out.extend_from_slice(&src[start..start + target.1]);
        }
    }
    let (lo, hi) = out.iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if hi > lo {
        let span = f64::from(hi) - f64::from(lo);
        for v in &mut out {
            *v = ((f64::from(*v) - f64::from(lo)) / span) as f32;
        }
    } else {
        out.iter_mut().for_each(|v| *v = 0.0);
    }
    Ok(UltrasoundSequence {
        frames: Tensor::new(vec![t, target.0, target.1], out)?,
        subject_id: seq.subject_id,
        gesture_id: seq.gesture_id,
    })
}
