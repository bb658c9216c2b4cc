//! Ground-truth generator: a position-based cloth simulator, scripted driver
//! scenes, and dataset export (sequences, canonical meshes, cached feature
//! maps, manifest). Everything is deterministic per scene seed.

pub mod cloth;
pub mod dataset;
pub mod scene;

pub use cloth::{ClothParams, ClothSim, NearSurfaceSdf, SimError};
pub use dataset::{generate_dataset, DatasetManifest, LoadedDataset, LoadedSplit, MapSequence};
pub use scene::{Scene, SceneId, SceneScript, SimOutput};
