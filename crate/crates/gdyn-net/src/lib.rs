//! Network architecture for the garment model: the six blocks (per-map
//! feature extractor S, static encoder, geometry decoder D with its
//! per-vertex head R, motion encoder C, dynamic encoder), their parameter
//! store with checkpoint I/O, and size presets.

pub mod blocks;
pub mod config;
pub mod params;

pub use config::ArchConfig;
pub use params::{BoundParams, ParamStore};
