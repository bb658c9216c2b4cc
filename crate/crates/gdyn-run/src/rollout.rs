//! Autoregressive prediction: one network step per frame, each resolved
//! prediction feeding back as history for the next. Owns the run metrics
//! (normalized L2, penetrating fraction, resolver effort, wall time).

use std::time::Instant;

use gdyn_ad::Graph;
use gdyn_core::features::{interaction_forces, motion_features, relative_descriptor};
use gdyn_core::sdf::SignedDistance;
use gdyn_core::vecmath as vm;
use gdyn_core::vecmath::V3;
use gdyn_core::{DriverFrame, MeshSdf};
use gdyn_net::blocks::{encode_dynamic, motion_encoder, s_block};
use gdyn_net::ParamStore;
use serde::Serialize;
use thiserror::Error;

use crate::data::TrainingSet;
use crate::model::{decode_posed, ModelContext, WeightsMode};
use crate::resolver::{resolve, ResolverConfig};

/// A vertex counts as penetrating when its driver SDF is below this (m).
/// 1 mm matches the clearance the ground-truth simulator itself guarantees,
/// so clean reference frames never register as penetrating.
pub const PENETRATION_TOL: f64 = 1e-3;

#[derive(Debug, Error)]
pub enum RolloutError {
    #[error("non-finite {tensor} at frame {frame}")]
    NonFinite { frame: usize, tensor: &'static str },
    #[error("rollout input: {0}")]
    Data(String),
}

#[derive(Debug, Clone)]
pub struct RolloutConfig {
    /// Collision cleanup per predicted frame; `None` feeds raw predictions
    /// back.
    pub resolver: Option<ResolverConfig>,
    /// Pose with canonical-garment blending weights instead of recomputing
    /// them from the displaced geometry (ablation). The resolver, when
    /// enabled, still optimizes under dynamic weights.
    pub fixed_weights: bool,
}

impl Default for RolloutConfig {
    fn default() -> Self {
        Self {
            resolver: Some(ResolverConfig::default()),
            fixed_weights: false,
        }
    }
}

/// One frame of garment history. Velocity and acceleration are exact
/// finite differences of the stored position sequence.
#[derive(Debug, Clone)]
pub struct GarmentState {
    pub frame: usize,
    pub positions: Vec<V3>,
    pub velocity: Vec<V3>,
    pub acceleration: Vec<V3>,
    pub latent: Vec<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct FrameMetrics {
    pub frame: usize,
    /// Mean per-vertex distance to ground truth over the bbox diagonal,
    /// when ground truth covers this frame.
    pub l2: Option<f64>,
    /// Fraction of vertices deeper than `PENETRATION_TOL` inside the
    /// driver.
    pub penetration: f64,
    pub resolver_iters: usize,
    pub wall_ms: f64,
}

pub struct RolloutResult {
    pub states: Vec<GarmentState>,
    pub metrics: Vec<FrameMetrics>,
}

/// Raw network prediction for one frame, before collision cleanup.
pub struct StepPrediction {
    pub latent: Vec<f64>,
    /// Displaced canonical positions ĝ (resolver input).
    pub g_hat: Vec<V3>,
    pub posed: Vec<V3>,
}

/// Mean per-vertex Euclidean distance normalized by the canonical bbox
/// diagonal.
pub fn normalized_l2(ctx: &ModelContext, a: &[V3], b: &[V3]) -> f64 {
    assert_eq!(a.len(), b.len());
    let sum: f64 = a.iter().zip(b).map(|(p, q)| vm::dist(*p, *q)).sum();
    sum / a.len() as f64 / ctx.bbox_diag
}

/// Fraction of vertices strictly inside the surface beyond `tol` meters.
pub fn penetration_fraction(positions: &[V3], sdf: &MeshSdf, tol: f64) -> f64 {
    let inside = positions
        .iter()
        .filter(|p| sdf.signed_distance(**p) < -tol)
        .count();
    inside as f64 / positions.len() as f64
}

fn rows_to_v3(flat: &[f64]) -> Vec<V3> {
    flat.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect()
}

/// One autoregressive step: previous-frame garment history plus the driver
/// at t-1 and t in, raw prediction out. Deterministic; errors on any
/// non-finite intermediate.
#[allow(clippy::too_many_arguments)]
pub fn step(
    ctx: &ModelContext,
    params: &ParamStore<f32>,
    g_tm1: &[V3],
    g_tm2: &[V3],
    g_tm3: &[V3],
    driver_prev: &DriverFrame,
    driver_t: &DriverFrame,
    fixed_weights: Option<&[f64]>,
    frame: usize,
) -> Result<StepPrediction, RolloutError> {
    let mut g = Graph::<f32>::new();
    let bound = params.bind_constants(&mut g);

    let rel = relative_descriptor(g_tm1, &driver_prev.seed_positions);
    let m_p = ctx.map_constant(&mut g, &rel, ctx.cfg.input_channels());
    let s = s_block(&ctx.cfg, &mut g, &bound, m_p);

    let mf = motion_features(g_tm1, g_tm2, g_tm3);
    let m_motion = ctx.map_constant(&mut g, &mf.channels(), 6);
    let forces = interaction_forces(g_tm1, driver_t, driver_prev, ctx.sigma);
    let m_inter = ctx.map_constant(&mut g, &forces.forces, ctx.cfg.input_channels());
    let e = motion_encoder(&ctx.cfg, &mut g, &bound, m_motion, m_inter);

    let z = encode_dynamic(&ctx.cfg, &mut g, &bound, s, e);
    let mode = match fixed_weights {
        Some(w) => WeightsMode::Fixed(w),
        None => WeightsMode::Dynamic,
    };
    let pv = decode_posed(ctx, &mut g, &bound, z, driver_t, mode);

    let latent = g.value(z);
    if !latent.is_finite() {
        return Err(RolloutError::NonFinite {
            frame,
            tensor: "latent",
        });
    }
    let posed = g.value(pv.posed);
    if !posed.is_finite() {
        return Err(RolloutError::NonFinite {
            frame,
            tensor: "posed positions",
        });
    }
    Ok(StepPrediction {
        latent: latent.map_to_f64(),
        g_hat: rows_to_v3(&g.value(pv.g_hat).map_to_f64()),
        posed: rows_to_v3(&posed.map_to_f64()),
    })
}

/// Applies the configured resolver. When nothing was accepted the raw
/// prediction passes through bitwise, so an armed-but-idle resolver cannot
/// perturb the trajectory.
fn apply_resolver(
    ctx: &ModelContext,
    params: &ParamStore<f32>,
    pred: StepPrediction,
    driver: &DriverFrame,
    resolver: &Option<ResolverConfig>,
) -> (Vec<V3>, Vec<f64>, usize) {
    match resolver {
        None => (pred.posed, pred.latent, 0),
        Some(rcfg) => {
            let (posed, _, report) = resolve(ctx, params, &pred.g_hat, driver, rcfg);
            if report.theta_max == 0.0 {
                (pred.posed, pred.latent, report.iters)
            } else {
                (posed, pred.latent, report.iters)
            }
        }
    }
}

fn fixed_table(ctx: &ModelContext, params: &ParamStore<f32>, cfg: &RolloutConfig) -> Option<Vec<f64>> {
    cfg.fixed_weights.then(|| {
        let log_rho = params.get("rho.log").map_to_f64();
        ctx.canonical_weights(&log_rho)
    })
}

/// Rolls the model over a driver animation (driver mesh positions per
/// frame). The first three frames bootstrap from `ground_truth` when given
/// (holding its last frame if shorter), else hold the canonical garment
/// static. Ground truth beyond the bootstrap only feeds the L2 metric.
pub fn rollout(
    ctx: &ModelContext,
    params: &ParamStore<f32>,
    driver_positions: &[Vec<V3>],
    ground_truth: Option<&[Vec<V3>]>,
    cfg: &RolloutConfig,
) -> Result<RolloutResult, RolloutError> {
    let frames = driver_positions.len();
    if frames < 4 {
        return Err(RolloutError::Data(format!(
            "rollout needs at least 4 driver frames, got {frames}"
        )));
    }
    let mut drivers: Vec<DriverFrame> = Vec::with_capacity(frames);
    for (t, pos) in driver_positions.iter().enumerate() {
        let frame = ctx
            .surface
            .pose(pos, drivers.last())
            .map_err(|e| RolloutError::Data(format!("driver frame {t}: {e}")))?;
        drivers.push(frame);
    }
    let table = fixed_table(ctx, params, cfg);

    let zeros = vec![[0.0; 3]; ctx.vertex_count()];
    let zero_latent = vec![0.0; ctx.cfg.latent_dim];
    let mut states: Vec<GarmentState> = Vec::with_capacity(frames);
    let mut metrics: Vec<FrameMetrics> = Vec::with_capacity(frames);

    for t in 0..3 {
        let positions = match ground_truth {
            Some(gt) if !gt.is_empty() => gt[t.min(gt.len() - 1)].clone(),
            _ => ctx.garment.positions.clone(),
        };
        if positions.len() != ctx.vertex_count() {
            return Err(RolloutError::Data(format!(
                "bootstrap frame {t}: {} vertices, garment has {}",
                positions.len(),
                ctx.vertex_count()
            )));
        }
        let velocity = match states.last() {
            Some(prev) => sub_fields(&positions, &prev.positions),
            None => zeros.clone(),
        };
        let acceleration = match states.last() {
            Some(prev) => sub_fields(&velocity, &prev.velocity),
            None => zeros.clone(),
        };
        let sdf = MeshSdf::build_from(&driver_positions[t], &ctx.surface.mesh.triangles);
        metrics.push(FrameMetrics {
            frame: t,
            l2: ground_truth
                .and_then(|gt| gt.get(t))
                .map(|g| normalized_l2(ctx, &positions, g)),
            penetration: penetration_fraction(&positions, &sdf, PENETRATION_TOL),
            resolver_iters: 0,
            wall_ms: 0.0,
        });
        states.push(GarmentState {
            frame: t,
            positions,
            velocity,
            acceleration,
            latent: zero_latent.clone(),
        });
    }

    for t in 3..frames {
        let start = Instant::now();
        let pred = step(
            ctx,
            params,
            &states[t - 1].positions,
            &states[t - 2].positions,
            &states[t - 3].positions,
            &drivers[t - 1],
            &drivers[t],
            table.as_deref(),
            t,
        )?;
        let (positions, latent, resolver_iters) =
            apply_resolver(ctx, params, pred, &drivers[t], &cfg.resolver);

        let velocity = sub_fields(&positions, &states[t - 1].positions);
        let acceleration = sub_fields(&velocity, &states[t - 1].velocity);
        let sdf = MeshSdf::build_from(&driver_positions[t], &ctx.surface.mesh.triangles);
        metrics.push(FrameMetrics {
            frame: t,
            l2: ground_truth
                .and_then(|gt| gt.get(t))
                .map(|g| normalized_l2(ctx, &positions, g)),
            penetration: penetration_fraction(&positions, &sdf, PENETRATION_TOL),
            resolver_iters,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        });
        states.push(GarmentState {
            frame: t,
            positions,
            velocity,
            acceleration,
            latent,
        });
    }
    Ok(RolloutResult { states, metrics })
}

fn sub_fields(a: &[V3], b: &[V3]) -> Vec<V3> {
    a.iter().zip(b).map(|(x, y)| vm::sub(*x, *y)).collect()
}

/// Teacher-forced 1-step error: every step consumes ground-truth history,
/// so drift cannot accumulate. Mean normalized L2 over all predicted
/// frames; the reference for judging rollout degradation.
pub fn one_step_error(
    set: &TrainingSet,
    params: &ParamStore<f32>,
    cfg: &RolloutConfig,
) -> Result<f64, RolloutError> {
    if set.frames() < 4 {
        return Err(RolloutError::Data(format!(
            "1-step error needs at least 4 frames, got {}",
            set.frames()
        )));
    }
    let ctx = &set.ctx;
    let table = fixed_table(ctx, params, cfg);
    let mut total = 0.0;
    for t in 3..set.frames() {
        let pred = step(
            ctx,
            params,
            &set.garment[t - 1],
            &set.garment[t - 2],
            &set.garment[t - 3],
            &set.drivers[t - 1],
            &set.drivers[t],
            table.as_deref(),
            t,
        )?;
        let (positions, _, _) = apply_resolver(ctx, params, pred, &set.drivers[t], &cfg.resolver);
        total += normalized_l2(ctx, &positions, &set.garment[t]);
    }
    Ok(total / (set.frames() - 3) as f64)
}

/// Rolls the outer garment of a two-layer stack. Identical to `rollout`
/// with the inner garment's vertex sequence as the driver animation and a
/// context built against the inner mesh (`context_for_layered`); the inner
/// layer is upstream only, nothing feeds back into it.
pub fn layered_rollout(
    ctx: &ModelContext,
    params: &ParamStore<f32>,
    inner_positions: &[Vec<V3>],
    ground_truth: Option<&[Vec<V3>]>,
    cfg: &RolloutConfig,
) -> Result<RolloutResult, RolloutError> {
    rollout(ctx, params, inner_positions, ground_truth, cfg)
}
