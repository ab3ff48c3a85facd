//! From marker tracks and raw video to labelled, normalized gesture segments.

mod angles;
mod dataset;
mod peaks;
mod segments;

pub use angles::{
    compute_joint_angles, joint_angle, read_marker_csv, write_angle_csv, write_marker_csv, FingerLayout, JointAngleSeries,
    MarkerFrame, MAX_GAP,
};
pub use dataset::{split_dataset, write_segments, Dataset, Manifest, ManifestEntry, MANIFEST_FILE};
pub use peaks::{detect_peaks, peak_prominences, Peak};
pub use segments::{
    center_offset, crop_and_normalize, extract_segments, segment_bounds, GestureSegment, UltrasoundSequence, CROP, RAW_SHAPE,
};
