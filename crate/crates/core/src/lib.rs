//! Camera and radar fusion object detection.
//!
//! Radar detections are accumulated over several cycles, drawn into the
//! image plane as vertical pillars and stacked with the camera channels.
//! The detector fuses both modalities at every backbone level.

pub mod boxes;
pub mod class;
pub mod crf_net;
pub mod dataset;
pub mod error;
pub mod evaluation;
pub mod filters;
pub mod geometry;
pub mod radar;
pub mod render;
pub mod training;

pub use boxes::{Box2D, Box3D};
pub use class::{ObjectClass, NUM_CLASSES};
pub use error::{Error, Result};
