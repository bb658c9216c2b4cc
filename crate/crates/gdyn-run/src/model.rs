//! Shared model context: one immutable bundle of everything the losses,
//! training stages, resolver, and rollout need about a garment/driver pair
//! (canonical geometry, local frames, UV tables, seed surface, scales).

use std::sync::Arc;

use gdyn_ad::{Graph, Real, TensorData, Var};
use gdyn_core::body::BodyError;
use gdyn_core::diff::{FramesApplyOp, LbsPoseOp, SkinWeightsOp};
use gdyn_core::features::mean_nearest_seed_distance;
use gdyn_core::mesh::MeshError;
use gdyn_core::uvmap::MapError;
use gdyn_core::vecmath::M3;
use gdyn_core::{DriverFrame, DriverSurface, MeshSdf, PartLabel, RasterTable, SampleTable, TriMesh};
use gdyn_net::config::ConfigError;
use gdyn_net::blocks::decode_geometry;
use gdyn_net::{ArchConfig, BoundParams};
use std::rc::Rc;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("architecture config: {0}")]
    Config(#[from] ConfigError),
    #[error("garment mesh: {0}")]
    Mesh(#[from] MeshError),
    #[error("driver surface: {0}")]
    Body(#[from] BodyError),
    #[error("uv tables: {0}")]
    Map(#[from] MapError),
    #[error("driver has {got} part(s), config expects {want}")]
    PartCount { got: usize, want: usize },
}

/// Immutable per-model state derived from the canonical garment and driver.
/// Cheap to share across threads; every graph built from it owns its own
/// copies of the small per-op payloads.
pub struct ModelContext {
    pub cfg: ArchConfig,
    pub garment: Arc<TriMesh>,
    /// Canonical per-vertex local frames H_0 (columns tangent, bitangent,
    /// normal).
    pub frames0: Vec<M3>,
    /// Vertex -> UV map scatter table at resolution w (network inputs).
    pub raster: Arc<RasterTable>,
    /// UV -> vertex gather table at resolution 2w (decoder feature map).
    pub sampler: Arc<SampleTable>,
    /// UV -> vertex gather table at resolution w (resolver residual map).
    pub theta_sampler: Arc<SampleTable>,
    pub surface: Arc<DriverSurface>,
    /// Canonical driver SDF for the rest-space collision loss.
    pub sdf0: Arc<MeshSdf>,
    /// Densified per-seed part index, values < cfg.part_count.
    pub seed_parts: Vec<usize>,
    /// Interaction-force Gaussian width: mean canonical garment-to-nearest-
    /// seed distance.
    pub sigma: f64,
    /// Canonical garment bounding-box diagonal; normalizes error metrics.
    pub bbox_diag: f64,
}

impl ModelContext {
    pub fn new(
        cfg: ArchConfig,
        garment: TriMesh,
        driver: TriMesh,
        labels: &[PartLabel],
    ) -> Result<Self, ModelError> {
        cfg.validate()?;
        let sdf0 = Arc::new(MeshSdf::build(&driver));
        let surface = DriverSurface::new(driver, cfg.seed_count, labels)?;
        if surface.part_count() != cfg.part_count {
            return Err(ModelError::PartCount {
                got: surface.part_count(),
                want: cfg.part_count,
            });
        }
        let frames0 = garment.local_frames(&garment.positions)?;
        let raster = Arc::new(RasterTable::build(&garment, cfg.map_width)?);
        let sampler = Arc::new(SampleTable::build(&garment.uvs, cfg.xi_width()));
        let theta_sampler = Arc::new(SampleTable::build(&garment.uvs, cfg.map_width));
        let seed_parts = surface.seed_part_indices();
        let sigma = mean_nearest_seed_distance(&garment.positions, &surface.seed_positions);
        let bbox_diag = TriMesh::bbox_diagonal(&garment.positions);
        Ok(Self {
            cfg,
            garment: Arc::new(garment),
            frames0,
            raster,
            sampler,
            theta_sampler,
            surface: Arc::new(surface),
            sdf0,
            seed_parts,
            sigma,
            bbox_diag,
        })
    }

    pub fn vertex_count(&self) -> usize {
        self.garment.vertex_count()
    }

    /// Constant [V, 2] tensor of garment uv coordinates (vertex-head input).
    pub fn uv_tensor<T: Real>(&self) -> TensorData<T> {
        let flat: Vec<f64> = self.garment.uvs.iter().flatten().copied().collect();
        TensorData::from_f64_slice(vec![self.garment.uvs.len(), 2], &flat)
    }

    /// Rasterizes flat per-vertex features into a constant [w, w, C] map var.
    pub fn map_constant<T: Real>(
        &self,
        g: &mut Graph<T>,
        values: &[f64],
        channels: usize,
    ) -> Var {
        let data = self.raster.apply_f64(values, channels);
        let w = self.cfg.map_width;
        g.constant(TensorData::from_f64_slice(vec![w, w, channels], &data))
    }

    /// Wraps an already-rasterized map (e.g. a cached dataset frame) as a
    /// constant var.
    pub fn raw_map_constant<T: Real>(
        &self,
        g: &mut Graph<T>,
        map: &[f64],
        channels: usize,
    ) -> Var {
        let w = self.cfg.map_width;
        assert_eq!(map.len(), w * w * channels, "map length vs declared shape");
        g.constant(TensorData::from_f64_slice(vec![w, w, channels], map))
    }

    /// Skinning weights of the canonical garment under the trained radii;
    /// the frozen-weights rollout ablation poses with these forever.
    pub fn canonical_weights(&self, log_rho: &[f64]) -> Vec<f64> {
        let rho: Vec<f64> = self
            .seed_parts
            .iter()
            .map(|&p| log_rho[p].exp())
            .collect();
        gdyn_core::skinning::skinning_weights(
            &self.garment.positions,
            &self.surface.seed_positions,
            &rho,
        )
    }
}

/// How the pose stage obtains blending weights.
pub enum WeightsMode<'a> {
    /// Recompute from the displaced canonical geometry (the trained model).
    Dynamic,
    /// Use a fixed V x N row-major table (ablation).
    Fixed(&'a [f64]),
}

/// Graph vars produced by the shared decode-and-pose tail.
pub struct PosedVars {
    /// Local-frame displacements [V, 3].
    pub displacement: Var,
    /// Displaced canonical positions ĝ [V, 3].
    pub g_hat: Var,
    /// Blending weights [V, N].
    pub weights: Var,
    /// Posed positions [V, 3].
    pub posed: Var,
}

/// Decodes a latent into posed garment positions against one driver frame:
/// d -> ĝ = g0 + H0 d -> weights -> blend skinning.
pub fn decode_posed<T: Real>(
    ctx: &ModelContext,
    g: &mut Graph<T>,
    p: &BoundParams,
    z: Var,
    driver: &DriverFrame,
    weights_mode: WeightsMode,
) -> PosedVars {
    let uv = g.constant(ctx.uv_tensor());
    let displacement = decode_geometry(&ctx.cfg, g, p, z, &ctx.sampler, uv);
    let g_hat = g.custom(
        Rc::new(FramesApplyOp {
            g0: ctx.garment.positions.clone(),
            frames: ctx.frames0.clone(),
        }),
        &[displacement],
    );
    let weights = match weights_mode {
        WeightsMode::Dynamic => {
            let log_rho = p.get("rho.log");
            g.custom(
                Rc::new(SkinWeightsOp {
                    seeds0: ctx.surface.seed_positions.clone(),
                    seed_parts: ctx.seed_parts.clone(),
                    part_count: ctx.cfg.part_count,
                }),
                &[g_hat, log_rho],
            )
        }
        WeightsMode::Fixed(w) => {
            let v = ctx.vertex_count();
            let n = ctx.cfg.seed_count;
            assert_eq!(w.len(), v * n, "fixed weight table shape");
            g.constant(TensorData::from_f64_slice(vec![v, n], w))
        }
    };
    let posed = g.custom(
        Rc::new(LbsPoseOp {
            seeds0: ctx.surface.seed_positions.clone(),
            transforms: driver.transforms.clone(),
        }),
        &[g_hat, weights],
    );
    PosedVars {
        displacement,
        g_hat,
        weights,
        posed,
    }
}
