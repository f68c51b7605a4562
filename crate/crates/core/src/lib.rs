//! Volumetric anatomy localisation toolkit.
//!
//! The pipeline has three sequential stages: preprocess full-resolution
//! scans into downsampled, intensity-normalised volumes with analytic
//! Gaussian heatmap targets; train a compact encoder-decoder localisation
//! network by heatmap matching under five-fold cross-validation; and run
//! inference on unseen volumes, extracting the target location and
//! rescaling it back into the full-resolution frame (optionally cropping a
//! sub-volume around it).
//!
//! Everything is deterministic for a fixed seed: preprocessing, weight
//! initialisation, augmentation, training, and every on-disk artifact.

pub mod config;
pub mod graph;
pub mod gvol;
pub mod heatmap;
pub mod infer;
pub mod model;
pub mod synth;
pub mod train;
pub mod verify;
pub mod volume;

pub use heatmap::{Heatmap, HeatmapSpec};
pub use volume::{Dims, FrameTag, MaskVolume, Point3, Spacing, Volume};
