//! Adapts generated datasets into training-ready form: ground-truth garment
//! frames as f64 positions, chained driver frames, and the body-relative
//! input maps (taken from the dataset cache or recomputed for non-body
//! drivers such as an inner garment layer).

use std::sync::Arc;

use gdyn_core::body::BodyError;
use gdyn_core::container::GdynSequence;
use gdyn_core::features::relative_descriptor;
use gdyn_core::vecmath::V3;
use gdyn_core::{DriverFrame, PartLabel};
use gdyn_net::ArchConfig;
use gdyn_sim::{LoadedDataset, MapSequence, SimError};
use thiserror::Error;

use crate::model::{ModelContext, ModelError};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("dataset: {0}")]
    Sim(#[from] SimError),
    #[error("model context: {0}")]
    Model(#[from] ModelError),
    #[error("driver pose: {0}")]
    Body(#[from] BodyError),
    #[error("sequence lengths differ: garment {garment} vs driver {driver}")]
    FrameCount { garment: usize, driver: usize },
    #[error("cached maps are {got_w}x{got_w}x{got_c}, config expects {want_w}x{want_w}x{want_c}")]
    MapShape {
        got_w: usize,
        got_c: usize,
        want_w: usize,
        want_c: usize,
    },
    #[error("dataset has no inner layer (scene is single-layer)")]
    NoInnerLayer,
}

/// One split of ground truth, ready for either training stage or for metric
/// evaluation: frame-aligned garment positions, driver vertex positions,
/// chained driver seed frames, and per-frame input maps.
pub struct TrainingSet {
    pub ctx: Arc<ModelContext>,
    pub garment: Vec<Vec<V3>>,
    pub driver_positions: Vec<Vec<V3>>,
    pub drivers: Vec<DriverFrame>,
    pub maps_p: MapSequence,
}

impl TrainingSet {
    /// Builds from raw sequences. `maps` reuses a cached map sequence after
    /// shape validation; `None` recomputes maps from the garment and the
    /// posed seeds (required when the driver is not the dataset body).
    /// `limit` truncates to the first so-many frames.
    pub fn from_sequences(
        ctx: Arc<ModelContext>,
        garment_seq: &GdynSequence,
        driver_seq: &GdynSequence,
        maps: Option<MapSequence>,
        limit: Option<usize>,
    ) -> Result<Self, DataError> {
        if garment_seq.frame_count() != driver_seq.frame_count() {
            return Err(DataError::FrameCount {
                garment: garment_seq.frame_count(),
                driver: driver_seq.frame_count(),
            });
        }
        let frames = limit
            .unwrap_or(usize::MAX)
            .min(garment_seq.frame_count());
        let garment: Vec<Vec<V3>> = (0..frames).map(|t| garment_seq.frame_f64(t)).collect();
        let driver_positions: Vec<Vec<V3>> =
            (0..frames).map(|t| driver_seq.frame_f64(t)).collect();

        let mut drivers = Vec::with_capacity(frames);
        for pos in &driver_positions {
            let prev = drivers.last();
            drivers.push(ctx.surface.pose(pos, prev)?);
        }

        let channels = ctx.cfg.input_channels();
        let maps_p = match maps {
            Some(m) => {
                if m.width != ctx.cfg.map_width || m.channels != channels {
                    return Err(DataError::MapShape {
                        got_w: m.width,
                        got_c: m.channels,
                        want_w: ctx.cfg.map_width,
                        want_c: channels,
                    });
                }
                let mut truncated = MapSequence::new(m.width, m.channels);
                for t in 0..frames {
                    truncated.push_f64(&m.frame_f64(t));
                }
                truncated
            }
            None => {
                let mut m = MapSequence::new(ctx.cfg.map_width, channels);
                for t in 0..frames {
                    let rel = relative_descriptor(&garment[t], &drivers[t].seed_positions);
                    m.push_f64(&ctx.raster.apply_f64(&rel, channels));
                }
                m
            }
        };
        Ok(Self {
            ctx,
            garment,
            driver_positions,
            drivers,
            maps_p,
        })
    }

    pub fn frames(&self) -> usize {
        self.garment.len()
    }

    /// The cached body-relative map of frame t, widened to f64.
    pub fn map_p(&self, t: usize) -> Vec<f64> {
        self.maps_p.frame_f64(t)
    }
}

/// Context for the standard pipeline: garment driven by the dataset body.
pub fn context_from_dataset(
    cfg: ArchConfig,
    ds: &LoadedDataset,
) -> Result<ModelContext, ModelError> {
    ModelContext::new(
        cfg,
        ds.garment_mesh.clone(),
        ds.driver_mesh.clone(),
        &ds.driver_labels,
    )
}

/// Context for the layered pipeline: the outer garment driven by the inner
/// layer, whose surface carries uniform part labels.
pub fn context_for_layered(
    cfg: ArchConfig,
    ds: &LoadedDataset,
) -> Result<ModelContext, DataError> {
    let inner = ds.inner_mesh.clone().ok_or(DataError::NoInnerLayer)?;
    let labels = vec![PartLabel::UpperBody; inner.vertex_count()];
    Ok(ModelContext::new(
        cfg,
        ds.garment_mesh.clone(),
        inner,
        &labels,
    )?)
}

/// Loads one split against the dataset body, reusing its cached maps.
pub fn training_set_from_split(
    ctx: Arc<ModelContext>,
    ds: &LoadedDataset,
    split: &str,
    limit: Option<usize>,
) -> Result<TrainingSet, DataError> {
    let loaded = ds.split(split)?;
    TrainingSet::from_sequences(
        ctx,
        &loaded.garment,
        &loaded.driver,
        Some(loaded.maps_p),
        limit,
    )
}

/// Loads one split of a two-layer scene with the inner garment as driver;
/// maps are recomputed since the cache is body-relative.
pub fn layered_set_from_split(
    ctx: Arc<ModelContext>,
    ds: &LoadedDataset,
    split: &str,
    limit: Option<usize>,
) -> Result<TrainingSet, DataError> {
    let loaded = ds.split(split)?;
    let inner = loaded.inner.ok_or(DataError::NoInnerLayer)?;
    TrainingSet::from_sequences(ctx, &loaded.garment, &inner, None, limit)
}
