//! Procedural video data with known appearance and motion factors, and clip I/O.

mod clip;
pub mod dataset;
pub mod dvid;
pub mod ppm;
pub mod scene;

pub use clip::{VideoClip, CHANNELS};
pub use dataset::{generate_dataset, load_dataset, write_dataset, DatasetConfig, PALETTE};
pub use dvid::{load_clip, save_clip};
pub use ppm::dump_frames;
pub use scene::{generate_clip, SceneSpec, ShapeKind};
