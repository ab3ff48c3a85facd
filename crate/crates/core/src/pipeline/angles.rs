use std::collections::BTreeMap;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Longest run of missing frames that is filled by interpolation.
pub const MAX_GAP: usize = 5;

#[derive(Clone, Debug, PartialEq)]
pub struct MarkerFrame {
    pub frame_index: usize,
    pub markers: Vec<(u32, [f64; 3])>,
}

/// Marker ids `(proximal, joint, distal)` per finger, index finger first.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FingerLayout {
    pub fingers: Vec<[u32; 3]>,
}

impl Default for FingerLayout {
    /// Four fingers with markers `3f, 3f + 1, 3f + 2`.
    fn default() -> Self {
        FingerLayout {
            fingers: (0..4).map(|f| [3 * f, 3 * f + 1, 3 * f + 2]).collect(),
        }
    }
}

/// Per-finger angle traces in degrees, all of equal length.
#[derive(Clone, Debug, PartialEq)]
pub struct JointAngleSeries {
    pub first_frame: usize,
    pub fingers: Vec<Vec<f64>>,
}

impl JointAngleSeries {
    pub fn len(&self) -> usize {
        self.fingers.first().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Frame-wise mean over the fingers selected by `mask`.
    pub fn mean_over(&self, mask: &[bool]) -> Result<Vec<f64>> {
        let chosen: Vec<&Vec<f64>> = self
            .fingers
            .iter()
            .zip(mask.iter().chain(std::iter::repeat(&false)))
            .filter_map(|(f, &on)| on.then_some(f))
            .collect();
        if chosen.is_empty() {
            return Err(Error::Config("finger mask selects no finger".into()));
        }
        let k = chosen.len() as f64;
        Ok((0..self.len()).map(|i| chosen.iter().map(|f| f[i]).sum::<f64>() / k).collect())
    }

    /// The same traces as `180 - angle`.
    pub fn flexion(&self) -> JointAngleSeries {
        JointAngleSeries {
            first_frame: self.first_frame,
            fingers: self.fingers.iter().map(|f| f.iter().map(|a| 180.0 - a).collect()).collect(),
        }
    }
}

/// Interior angle at `b` between `a` and `c`, in degrees.
pub fn joint_angle(a: [f64; 3], b: [f64; 3], c: [f64; 3]) -> Option<f64> {
    let u = [a[0] - b[0], a[1] - b[1], a[2] - b[2]];
    let v = [c[0] - b[0], c[1] - b[1], c[2] - b[2]];
    let nu = (u[0] * u[0] + u[1] * u[1] + u[2] * u[2]).sqrt();
    let nv = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    if nu == 0.0 || nv == 0.0 || !nu.is_finite() || !nv.is_finite() {
        return None;
    }
    let cos = (u[0] * v[0] + u[1] * v[1] + u[2] * v[2]) / (nu * nv);
    Some(cos.clamp(-1.0, 1.0).acos().to_degrees())
}

/// Track of one marker with gaps of up to [`MAX_GAP`] frames filled linearly.
fn fill_track(id: u32, track: &[Option<[f64; 3]>], first_frame: usize) -> Result<Vec<[f64; 3]>> {
    let mut out = Vec::with_capacity(track.len());
    let mut i = 0;
    while i < track.len() {
        if let Some(p) = track[i] {
            out.push(p);
            i += 1;
            continue;
        }
        let start = i;
        while i < track.len() && track[i].is_none() {
            i += 1;
        }
        let gap = i - start;
        let (Some(before), Some(after)) = (start.checked_sub(1).and_then(|j| track[j]), track.get(i).copied().flatten()) else {
            return Err(Error::Data(format!(
                "marker {id} missing at frame {} with no observation on both sides",
                first_frame + start
            )));
        };
        if gap > MAX_GAP {
            return Err(Error::Data(format!(
                "marker {id} missing for {gap} consecutive frames from frame {}",
                first_frame + start
            )));
        }
        for step in 1..=gap {
            let f = step as f64 / (gap + 1) as f64;
            out.push([0, 1, 2].map(|d| before[d] + f * (after[d] - before[d])));
        }
    }
    Ok(out)
}

/// Joint angle of every finger in every frame. Frames are placed by
/// `frame_index`; frame indices absent from `frames` count as missing.
pub fn compute_joint_angles(frames: &[MarkerFrame], layout: &FingerLayout) -> Result<JointAngleSeries> {
    if frames.is_empty() || layout.fingers.is_empty() {
        return Ok(JointAngleSeries {
            first_frame: 0,
            fingers: vec![Vec::new(); layout.fingers.len()],
        });
    }
    let first = frames.iter().map(|f| f.frame_index).min().unwrap_or(0);
    let last = frames.iter().map(|f| f.frame_index).max().unwrap_or(0);
    let len = last - first + 1;
    let mut tracks: BTreeMap<u32, Vec<Option<[f64; 3]>>> = BTreeMap::new();
    for finger in &layout.fingers {
        for &id in finger {
            tracks.insert(id, vec![None; len]);
        }
    }
    for frame in frames {
        for &(id, pos) in &frame.markers {
            if let Some(track) = tracks.get_mut(&id) {
                if pos.iter().all(|v| v.is_finite()) {
                    track[frame.frame_index - first] = Some(pos);
                }
            }
        }
    }
    let mut filled = BTreeMap::new();
    for (&id, track) in &tracks {
        filled.insert(id, fill_track(id, track, first)?);
    }
    let mut fingers = Vec::with_capacity(layout.fingers.len());
    for [a, b, c] in &layout.fingers {
        let mut angles = Vec::with_capacity(len);
        for i in 0..len {
            let angle = joint_angle(filled[a][i], filled[b][i], filled[c][i])
                .ok_or_else(|| Error::Data(format!("zero-length segment vector at frame {}", first + i)))?;
            angles.push(angle);
        }
        fingers.push(angles);
    }
    Ok(JointAngleSeries {
        first_frame: first,
        fingers,
    })
}

#[derive(Deserialize, Serialize)]
struct MarkerRow {
    frame: usize,
    marker_id: u32,
    x_mm: f64,
    y_mm: f64,
    z_mm: f64,
}

/// Reads `frame,marker_id,x_mm,y_mm,z_mm` rows into frames ordered by index.
pub fn read_marker_csv<R: Read>(reader: R) -> Result<Vec<MarkerFrame>> {
    let mut frames: BTreeMap<usize, Vec<(u32, [f64; 3])>> = BTreeMap::new();
    for row in csv::Reader::from_reader(reader).deserialize() {
        let row: MarkerRow = row?;
        frames.entry(row.frame).or_default().push((row.marker_id, [row.x_mm, row.y_mm, row.z_mm]));
    }
    Ok(frames
        .into_iter()
        .map(|(frame_index, markers)| MarkerFrame { frame_index, markers })
        .collect())
}

pub fn write_marker_csv<W: Write>(writer: W, frames: &[MarkerFrame]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for frame in frames {
        for &(marker_id, [x_mm, y_mm, z_mm]) in &frame.markers {
            w.serialize(MarkerRow {
                frame: frame.frame_index,
                marker_id,
                x_mm,
                y_mm,
                z_mm,
            })?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Writes `frame,finger0,...` with six decimals.
pub fn write_angle_csv<W: Write>(writer: W, series: &JointAngleSeries) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["frame".to_string()];
    header.extend((0..series.fingers.len()).map(|f| format!("finger{f}")));
    w.write_record(&header)?;
    for i in 0..series.len() {
        let mut record = vec![(series.first_frame + i).to_string()];
        record.extend(series.fingers.iter().map(|f| format!("{:.6}", f[i])));
        w.write_record(&record)?;
    }
    w.flush()?;
    Ok(())
}
