//! Distortion-aware segmentation transformer (DATR) with class-wise feature
//! aggregation for pinhole-to-panorama unsupervised domain adaptation.

pub mod attention;
pub mod checkpoint;
pub mod config;
pub mod erpgeo;
mod error;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod selfcheck;
pub mod synthdata;
pub mod train;
pub mod uda;

pub use error::{DatrError, Result};
