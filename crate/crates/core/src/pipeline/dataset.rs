use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{ustf, Tensor};

use super::segments::GestureSegment;

pub const MANIFEST_FILE: &str = "manifest.json";

/// One segment file listed in a manifest.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    /// Path relative to the manifest's directory.
    pub file: String,
    pub label: usize,
    pub subject: u32,
    pub peak_frame: usize,
    pub window: usize,
    #[serde(default)]
    pub repetition: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub num_classes: usize,
    pub segments: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let manifest: Manifest = serde_json::from_str(&text)?;
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Data(format!("manifest declares {} classes, need at least 2", self.num_classes)));
        }
        if let Some(e) = self.segments.iter().find(|e| e.label >= self.num_classes) {
            return Err(Error::Data(format!("segment {} has label {} outside 0..{}", e.file, e.label, self.num_classes)));
        }
        Ok(())
    }
}

/// Writes each segment as `seg_<subject>_<label>_<repetition>.ustf` under
/// `dir` and returns the manifest entries, in input order.
pub fn write_segments(dir: &Path, segments: &[GestureSegment]) -> Result<Vec<ManifestEntry>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    segments
        .iter()
        .map(|s| {
            let file = format!("seg_s{}_g{:02}_r{:03}.ustf", s.subject_id, s.label, s.repetition);
            ustf::save(&dir.join(&file), &s.frames)?;
            Ok(ManifestEntry {
                file,
                label: s.label,
                subject: s.subject_id,
                peak_frame: s.peak_frame,
                window: s.frames.dims()[0],
                repetition: s.repetition,
            })
        })
        .collect()
}

/// Stratified split by `(subject, label)`: each group of `n` segments puts
/// `round(fraction * n)` (kept within `1..n`) into training; a group with a
/// single segment goes to training. Returns index lists into `entries`,
/// each sorted.
pub fn split_dataset(entries: &[ManifestEntry], train_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::Config(format!("train fraction must lie in (0, 1), got {train_fraction}")));
    }
    let mut groups: BTreeMap<(u32, usize), Vec<usize>> = BTreeMap::new();
    for (i, e) in entries.iter().enumerate() {
        groups.entry((e.subject, e.label)).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for mut members in groups.into_values() {
        let n = members.len();
        let k = if n == 1 {
            1
        } else {
            ((train_fraction * n as f64).round() as usize).clamp(1, n - 1)
        };
        members.shuffle(&mut rng);
        train.extend_from_slice(&members[..k]);
        test.extend_from_slice(&members[k..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok((train, test))
}

/// Segments of a manifest loaded as network inputs `(1, T, H, W)`.
#[derive(Clone, Debug)]
pub struct Dataset<T> {
    pub root: PathBuf,
    pub manifest: Manifest,
    pub samples: Vec<Tensor<T>>,
}

impl<T: Scalar> Dataset<T> {
    pub fn load(manifest_path: &Path) -> Result<Self> {
        let manifest = Manifest::load(manifest_path)?;
        let root = manifest_path.parent().map(Path::to_path_buf).unwrap_or_default();
        let mut samples: Vec<Tensor<T>> = Vec::with_capacity(manifest.segments.len());
        for entry in &manifest.segments {
            let frames = ustf::load_as::<T>(root.join(&entry.file))?;
            if frames.dims().len() != 3 {
                return Err(Error::Data(format!("{} has extents {:?}, expected (T, H, W)", entry.file, frames.dims())));
            }
            if let Some(first) = samples.first() {
                if first.dims()[1..] != *frames.dims() {
                    return Err(Error::Data(format!(
                        "{} has extents {:?}, others have {:?}",
                        entry.file,
                        frames.dims(),
                        &first.dims()[1..]
                    )));
                }
            }
            let mut dims = vec![1];
            dims.extend_from_slice(frames.dims());
            samples.push(frames.into_reshaped(dims)?);
        }
        Ok(Dataset { root, manifest, samples })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.manifest.segments.iter().map(|e| e.label).collect()
    }

    /// `(C, T, H, W)` shared by every sample.
    pub fn sample_shape(&self) -> Option<[usize; 4]> {
        self.samples.first().map(|s| {
            let d = s.dims();
            [d[0], d[1], d[2], d[3]]
        })
    }

    /// Stacks the chosen samples into one `(N, C, T, H, W)` batch.
    pub fn batch(&self, indices: &[usize]) -> Result<Tensor<T>> {
        let shape = self.sample_shape().ok_or_else(|| Error::Data("empty dataset".into()))?;
        let mut data = Vec::with_capacity(indices.len() * self.samples[0].numel());
        for &i in indices {
            data.extend_from_slice(self.samples[i].data());
        }
        let mut dims = vec![indices.len()];
        dims.extend(shape);
        Tensor::new(dims, data)
    }
}
