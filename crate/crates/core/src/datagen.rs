//! Synthetic gesture clips with controllable spatial and temporal structure.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pipeline::{write_segments, GestureSegment, Manifest, MANIFEST_FILE};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SynthMode {
    /// A static blob whose position encodes the class.
    Spatial,
    /// The same set of band frames for every class, shown in a class-specific order.
    TemporalOnly,
    /// The first half of the classes spatial, the rest temporal.
    Mixed,
}

impl fmt::Display for SynthMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SynthMode::Spatial => "spatial",
            SynthMode::TemporalOnly => "temporal_only",
            SynthMode::Mixed => "mixed",
        })
    }
}

impl FromStr for SynthMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "spatial" => Ok(SynthMode::Spatial),
            "temporal_only" | "temporal" => Ok(SynthMode::TemporalOnly),
            "mixed" => Ok(SynthMode::Mixed),
            _ => Err(Error::Config(format!("unknown synthetic mode {s:?}"))),
        }
    }
}

fn default_classes() -> usize {
    12
}

fn default_samples() -> usize {
    20
}

fn default_frames() -> usize {
    16
}

fn default_side() -> usize {
    64
}

fn default_noise() -> f64 {
    0.05
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    #[serde(default = "default_classes")]
    pub num_classes: usize,
    #[serde(default = "default_samples")]
    pub samples_per_class: usize,
    #[serde(default = "default_frames")]
    pub frames: usize,
    #[serde(default = "default_side")]
    pub height: usize,
    #[serde(default = "default_side")]
    pub width: usize,
    pub mode: SynthMode,
    #[serde(default = "default_noise")]
    pub noise_sigma: f64,
    #[serde(default)]
    pub seed: u64,
}

impl SynthConfig {
    pub fn new(mode: SynthMode) -> Self {
        SynthConfig {
            num_classes: default_classes(),
            samples_per_class: default_samples(),
            frames: default_frames(),
            height: default_side(),
            width: default_side(),
            mode,
            noise_sigma: default_noise(),
            seed: 0,
        }
    }

    /// 224 x 224 frames.
    pub fn full_size(mut self) -> Self {
        self.height = 224;
        self.width = 224;
        self
    }

    fn class_kinds(&self) -> (usize, usize) {
        match self.mode {
            SynthMode::Spatial => (self.num_classes, 0),
            SynthMode::TemporalOnly => (0, self.num_classes),
            SynthMode::Mixed => {
                let spatial = self.num_classes.div_ceil(2);
                (spatial, self.num_classes - spatial)
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 || self.samples_per_class == 0 || self.frames == 0 || self.height == 0 || self.width == 0 {
            return Err(Error::Config(
                "num_classes must be at least 2 and every count at least 1".into(),
            ));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::Config(format!("noise_sigma must be a finite value >= 0, got {}", self.noise_sigma)));
        }
        let (spatial, temporal) = self.class_kinds();
        if spatial > 0 {
            let (rows, cols) = grid(spatial);
            if self.height / rows < 3 || self.width / cols < 3 {
                return Err(Error::Config(format!(
                    "{}x{} frames are too small for {spatial} blob positions",
                    self.height, self.width
                )));
            }
        }
        if temporal > 0 {
            if self.frames < 2 || self.height < 2 * self.frames {
                return Err(Error::Config(format!(
                    "{} rows cannot hold {} distinct band positions",
                    self.height, self.frames
                )));
            }
            if temporal > 2 * (self.frames - 1) {
                return Err(Error::Config(format!(
                    "{} frames allow at most {} temporal classes, asked for {temporal}",
                    self.frames,
                    2 * (self.frames - 1)
                )));
            }
        }
        Ok(())
    }
}

/// Rows and columns of the blob grid for `n` classes.
fn grid(n: usize) -> (usize, usize) {
    let cols = (n as f64).sqrt().ceil() as usize;
    (n.div_ceil(cols), cols)
}

/// Pixel center of the blob for spatial class `k`.
pub fn blob_center(config: &SynthConfig, k: usize) -> (usize, usize) {
    let (rows, cols) = grid(config.class_kinds().0);
    let (r, c) = (k / cols, k % cols);
    (
        ((r as f64 + 0.5) * config.height as f64 / rows as f64) as usize,
        ((c as f64 + 0.5) * config.width as f64 / cols as f64) as usize,
    )
}

fn blob_frame(config: &SynthConfig, k: usize) -> Vec<f32> {
    let (rows, cols) = grid(config.class_kinds().0);
    let sigma = (config.height / rows).min(config.width / cols) as f64 / 4.0;
    let (cy, cx) = blob_center(config, k);
    let mut frame = Vec::with_capacity(config.height * config.width);
    for y in 0..config.height {
        for x in 0..config.width {
            let d2 = (y as f64 - cy as f64).powi(2) + (x as f64 - cx as f64).powi(2);
            frame.push((-d2 / (2.0 * sigma * sigma)).exp() as f32);
        }
    }
    frame
}

/// Frame `p` of the shared band set: a horizontal bright band at row
/// position `p` of `frames` evenly spaced positions.
pub fn band_frame(config: &SynthConfig, p: usize) -> Vec<f32> {
    let spacing = config.height as f64 / config.frames as f64;
    let center = (p as f64 + 0.5) * spacing;
    let sigma = spacing / 2.5;
    let mut frame = Vec::with_capacity(config.height * config.width);
    for y in 0..config.height {
        let v = (-((y as f64 + 0.5 - center).powi(2)) / (2.0 * sigma * sigma)).exp() as f32;
        frame.extend(std::iter::repeat(v).take(config.width));
    }
    frame
}

/// Order in which temporal class `k` visits the band positions: a sweep
/// with stride `k / 2 + 1`, reversed for odd `k`.
pub fn band_order(frames: usize, k: usize) -> Vec<usize> {
    let stride = k / 2 + 1;
    let mut order: Vec<usize> = (0..stride).flat_map(|r| (r..frames).step_by(stride)).collect();
    if k % 2 == 1 {
        order.reverse();
    }
    order
}

/// Noise-free frames of every sample of class `label`, each `(T, H, W)`.
fn class_clips(config: &SynthConfig, label: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f32>> {
    let (spatial, _) = config.class_kinds();
    let plane = config.height * config.width;
    if label < spatial {
        let frame = blob_frame(config, label);
        let clip: Vec<f32> = frame.iter().copied().cycle().take(config.frames * plane).collect();
        return vec![clip; config.samples_per_class];
    }
    let order = band_order(config.frames, label - spatial);
    let bands: Vec<Vec<f32>> = (0..config.frames).map(|p| band_frame(config, p)).collect();
    // Every rotation is used equally often so that no time index favours a frame.
    let mut rotations: Vec<usize> = Vec::with_capacity(config.samples_per_class);
    while rotations.len() < config.samples_per_class {
        let mut round: Vec<usize> = (0..config.frames).collect();
        round.shuffle(rng);
        rotations.extend(round);
    }
    rotations.truncate(config.samples_per_class);
    rotations
        .into_iter()
        .map(|shift| {
            (0..config.frames)
                .flat_map(|t| bands[order[(t + shift) % config.frames]].iter().copied())
                .collect()
        })
        .collect()
}

/// Generates every clip in memory, class by class.
pub fn generate_segments(config: &SynthConfig) -> Result<Vec<GestureSegment>> {
    config.validate()?;
    let noise = Normal::new(0.0, config.noise_sigma).map_err(|e| Error::Config(e.to_string()))?;
    let mut out = Vec::with_capacity(config.num_classes * config.samples_per_class);
    for label in 0..config.num_classes {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(label as u64);
        for (repetition, mut clip) in class_clips(config, label, &mut rng).into_iter().enumerate() {
            if config.noise_sigma > 0.0 {
                for v in &mut clip {
                    *v = (f64::from(*v) + noise.sample(&mut rng)).clamp(0.0, 1.0) as f32;
                }
            }
            out.push(GestureSegment {
                frames: Tensor::new(vec![config.frames, config.height, config.width], clip)?,
                label,
                peak_frame: repetition * config.frames,
                subject_id: 0,
                repetition,
            });
        }
    }
    Ok(out)
}

/// Writes the clips and `manifest.json` into `dir`.
pub fn generate(config: &SynthConfig, dir: &Path) -> Result<Manifest> {
    let segments = generate_segments(config)?;
    let manifest = Manifest {
        num_classes: config.num_classes,
        segments: write_segments(dir, &segments)?,
    };
    manifest.save(&dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sorted_frames(seg: &GestureSegment, plane: usize) -> Vec<Vec<u32>> {
        let mut frames: Vec<Vec<u32>> = seg.frames.data().chunks(plane).map(|f| f.iter().map(|v| v.to_bits()).collect()).collect();
        frames.sort();
        frames
    }

    #[test]
    fn band_orders_are_permutations() {
        for k in 0..30 {
            let mut order = band_order(16, k);
            order.sort_unstable();
            assert_eq!(order, (0..16).collect::<Vec<_>>());
        }
        assert_eq!(band_order(4, 1), vec![3, 2, 1, 0]);
        assert_eq!(band_order(5, 2), vec![0, 2, 4, 1, 3]);
    }

    #[test]
    fn temporal_classes_share_frames() {
        let config = SynthConfig {
            noise_sigma: 0.0,
            samples_per_class: 3,
            height: 32,
            width: 8,
            ..SynthConfig::new(SynthMode::TemporalOnly)
        };
        let segs = generate_segments(&config).unwrap();
        let reference = sorted_frames(&segs[0], 32 * 8);
        assert!(segs.iter().all(|s| sorted_frames(s, 32 * 8) == reference));
        assert_ne!(segs[0].frames, segs[3].frames);
    }

    #[test]
    fn spatial_mean_peaks_at_center() {
        let config = SynthConfig {
            noise_sigma: 0.0,
            samples_per_class: 2,
            ..SynthConfig::new(SynthMode::Spatial)
        };
        let segs = generate_segments(&config).unwrap();
        let plane = 64 * 64;
        for label in 0..12 {
            let clips: Vec<&GestureSegment> = segs.iter().filter(|s| s.label == label).collect();
            assert_eq!(clips.len(), 2);
            let mut mean = vec![0.0f64; plane];
            for s in &clips {
                for (i, v) in s.frames.data().iter().enumerate() {
                    mean[i % plane] += f64::from(*v);
                }
            }
            let arg = (0..plane).max_by(|&a, &b| mean[a].total_cmp(&mean[b]).then(b.cmp(&a))).unwrap();
            assert_eq!((arg / 64, arg % 64), blob_center(&config, label));
        }
    }

    #[test]
    fn deterministic_and_validated() {
        let config = SynthConfig {
            samples_per_class: 2,
            num_classes: 4,
            ..SynthConfig::new(SynthMode::Mixed)
        };
        assert_eq!(generate_segments(&config).unwrap(), generate_segments(&config).unwrap());
        let small = SynthConfig {
            height: 8,
            width: 8,
            ..SynthConfig::new(SynthMode::Spatial)
        };
        assert!(matches!(generate_segments(&small), Err(Error::Config(_))));
        let noisy = SynthConfig {
            noise_sigma: -1.0,
            ..config
        };
        assert!(noisy.validate().is_err());
    }
}
