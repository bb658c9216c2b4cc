//! Geometry core: triangle meshes with UV charts, mesh I/O, signed-distance
//! queries, the animated driver surface, UV-space feature maps, and the
//! blend-skinning deformation model, plus the differentiable wrappers that
//! expose the domain operations to the autodiff tape.
//!
//! Everything geometric is computed in f64; tape-facing wrappers convert to
//! the tape's scalar type at the boundary.

pub mod body;
pub mod bvh;
pub mod container;
pub mod diff;
pub mod features;
pub mod mesh;
pub mod obj;
pub mod sdf;
pub mod shapes;
pub mod skinning;
pub mod uvmap;
pub mod vecmath;

pub use body::{DriverFrame, DriverSurface, PartLabel, SeedTransform};
pub use mesh::{MeshError, TriMesh};
pub use sdf::{MeshSdf, SignedDistance};
pub use uvmap::{FeatureMap, RasterTable, SampleTable};
