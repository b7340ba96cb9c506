//! Gaze-trajectory prediction from narrated images.
//!
//! A scene is an image split into patches, a timed transcript and the gaze
//! points of several subjects, one per word. The model predicts a gaze point
//! per word by integrating a motion vector made of an inherent-motion force,
//! a pull toward the salient point and a pull toward a semantic attraction
//! point chosen by attending from the (GRU-encoded) word to image patches.
//!
//! Training minimizes MSE first and then a probability-density loss against a
//! kernel density estimate of the subjects' points.

pub mod autodiff;
pub mod data;
pub mod density;
pub mod dynamics;
pub mod encoder;
pub mod error;
pub mod metrics;
pub mod model;
pub mod synthetic;
pub mod train;

pub use data::{load_bundle, load_dataset, save_bundle, split_dataset, Dataset, Point, SceneBundle, Split};
pub use error::{Error, Result};
pub use model::{InitialPoint, ModelConfig, ModelParams, Variant};
