//! Weakly supervised lesion segmentation.
//!
//! Trains a U-Net style network on masks where a fraction of annotations
//! are coarse ovals, down-weighting oval pixels by their distance from the
//! annotation centre.

pub mod config;
pub mod error;
pub mod evaluation;
pub mod imaging;
pub mod network;
pub mod nn;
pub mod synthdata;
pub mod training;
pub mod weakmodels;

pub use error::{Error, Result};
pub use imaging::{Grid, Image, Mask, WeightMap};
