//! Procedural training data: rigged Gaussian heads, a camera rig, input
//! maps and the sample file format.

pub mod cameras;
pub mod format;
pub mod head;
pub mod maps;
pub mod sample;

pub use cameras::{k_farthest, orbit_direction, sample_viewpoints, CameraRig};
pub use format::{read_sample, write_dataset, write_sample, DiskSamples, Manifest, SAMPLE_MAGIC};
pub use head::{make_head, pose_head, pose_head_full, PosedHead, ProceduralHead, EXPR_DIM};
pub use maps::{feature_map, position_and_confidence, render_ground_truth, FEATURE_CHANNELS};
pub use sample::{Dataset, DatasetConfig, SampleOptions, SceneSample, Split};
