//! Stage 1: jointly trains the map feature extractor, static encoder,
//! decoder, vertex head, and per-part kernel radii against ground-truth
//! frames, with random-latent edge preservation and the rest-space
//! collision margin keeping the latent space decodable.

use gdyn_ad::optim::Adam;
use gdyn_ad::{Graph, TensorData};
use gdyn_net::params::init_params;
use gdyn_net::ParamStore;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::TrainingSet;
use crate::losses::{static_loss, LossWeights};

/// Parameter prefixes updated by stage 1 (and frozen by stage 2).
pub const STATIC_PREFIXES: [&str; 5] = ["s.", "esta.", "d.", "r.", "rho."];

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("non-finite {what} at epoch {epoch}, sample {sample}")]
    NonFinite {
        what: &'static str,
        epoch: usize,
        sample: usize,
    },
    #[error("training config: {0}")]
    Config(String),
    #[error("training data: {0}")]
    Data(String),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainStaticConfig {
    pub epochs: usize,
    pub lr: f64,
    pub lr_halve_every: usize,
    pub batch_size: usize,
    pub lambda1: f64,
    pub lambda2: f64,
    /// Rest-space clearance margin in meters.
    pub eps_sdf: f64,
    pub seed: u64,
    /// Initial kernel radius; defaults to the garment-to-seed length scale.
    pub rho_init: Option<f64>,
    /// Early stop once the epoch position L1, as a fraction of the garment
    /// bbox diagonal, drops below this and mean(z²) sits in [0.6, 1.4].
    pub stop_rec_frac: Option<f64>,
}

impl Default for TrainStaticConfig {
    fn default() -> Self {
        let w = LossWeights::default();
        Self {
            epochs: 350,
            lr: 1e-4,
            lr_halve_every: 50,
            batch_size: 1,
            lambda1: w.lambda1,
            lambda2: w.lambda2,
            eps_sdf: w.eps_sdf,
            seed: 0,
            rho_init: None,
            stop_rec_frac: None,
        }
    }
}

impl TrainStaticConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.epochs == 0 || self.batch_size == 0 || self.lr_halve_every == 0 {
            return Err(TrainError::Config(
                "epochs, batch_size, lr_halve_every must be positive".into(),
            ));
        }
        if !(self.lr > 0.0) {
            return Err(TrainError::Config("lr must be positive".into()));
        }
        if self.lambda1 < 0.0 || self.lambda2 < 0.0 || self.eps_sdf < 0.0 {
            return Err(TrainError::Config("loss weights must be >= 0".into()));
        }
        Ok(())
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            lambda1: self.lambda1,
            lambda2: self.lambda2,
            eps_sdf: self.eps_sdf,
        }
    }
}

/// Per-epoch averages over all samples (taken while parameters update, so
/// they trail a fixed-parameter evaluation slightly).
#[derive(Debug, Clone, Serialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub lr: f64,
    pub total: f64,
    pub rec: f64,
    /// Position-only L1 in meters.
    pub rec_pos: f64,
    pub rand: f64,
    pub sdf: f64,
    pub reg: f64,
    pub mean_z_sq: f64,
    /// Per-part kernel radii after the epoch.
    pub rho: Vec<f64>,
}

struct SampleOut {
    grads: Vec<TensorData<f32>>,
    total: f64,
    rec: f64,
    rec_pos: f64,
    rand: f64,
    sdf: f64,
    reg: f64,
    z_sq: f64,
}

fn lr_at(cfg_lr: f64, halve_every: usize, epoch: usize) -> f64 {
    cfg_lr * 0.5f64.powi((epoch / halve_every) as i32)
}

/// Runs stage 1. `on_epoch` fires after every epoch (metrics streaming);
/// returns the trained parameters and the full per-epoch history.
pub fn train_static(
    set: &TrainingSet,
    cfg: &TrainStaticConfig,
    on_epoch: impl FnMut(&EpochStats),
) -> Result<(ParamStore<f32>, Vec<EpochStats>), TrainError> {
    train_static_from(set, cfg, None, on_epoch)
}

/// Stage 1 with an optional warm start (checkpoint resume). `init` must
/// match the context architecture; `None` draws fresh parameters from the
/// config seed.
pub fn train_static_from(
    set: &TrainingSet,
    cfg: &TrainStaticConfig,
    init: Option<ParamStore<f32>>,
    mut on_epoch: impl FnMut(&EpochStats),
) -> Result<(ParamStore<f32>, Vec<EpochStats>), TrainError> {
    cfg.validate()?;
    if set.frames() < 2 {
        return Err(TrainError::Data(format!(
            "need at least 2 frames, got {}",
            set.frames()
        )));
    }
    let ctx = &set.ctx;
    let weights = cfg.weights();
    let rho_init = cfg.rho_init.unwrap_or(ctx.sigma);
    let mut params: ParamStore<f32> =
        init.unwrap_or_else(|| init_params(&ctx.cfg, cfg.seed, rho_init));
    let names: Vec<String> = params
        .trainable_names()
        .into_iter()
        .filter(|n| STATIC_PREFIXES.iter().any(|p| n.starts_with(p)))
        .collect();

    let mut adam: Adam<f32> = Adam::new(cfg.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut history = Vec::new();

    for epoch in 0..cfg.epochs {
        let lr = lr_at(cfg.lr, cfg.lr_halve_every, epoch);
        adam.lr = lr as f32;
        let mut order: Vec<usize> = (0..set.frames()).collect();
        order.shuffle(&mut rng);

        let mut sums = [0.0f64; 7];
        for chunk in order.chunks(cfg.batch_size) {
            // One latent draw per optimization step, shared by the batch.
            let z_r: Vec<f64> = (0..ctx.cfg.latent_dim)
                .map(|_| standard_normal(&mut rng))
                .collect();

            let outs: Vec<Result<SampleOut, usize>> = chunk
                .par_iter()
                .map(|&t| run_sample(set, &params, &names, t, &z_r, &weights))
                .collect();

            let mut acc: Vec<TensorData<f32>> = Vec::with_capacity(names.len());
            let inv = 1.0 / chunk.len() as f32;
            for out in outs {
                let out = out.map_err(|sample| TrainError::NonFinite {
                    what: "loss or gradient",
                    epoch,
                    sample,
                })?;
                if acc.is_empty() {
                    acc = out.grads;
                    for t in &mut acc {
                        for v in t.data_mut() {
                            *v *= inv;
                        }
                    }
                } else {
                    for (a, g) in acc.iter_mut().zip(&out.grads) {
                        for (av, gv) in a.data_mut().iter_mut().zip(g.data()) {
                            *av += gv * inv;
                        }
                    }
                }
                sums[0] += out.total;
                sums[1] += out.rec;
                sums[2] += out.rec_pos;
                sums[3] += out.rand;
                sums[4] += out.sdf;
                sums[5] += out.reg;
                sums[6] += out.z_sq;
            }
            adam.next_step();
            for (name, grad) in names.iter().zip(&acc) {
                adam.update(name, params.get_mut(name), grad);
            }
        }

        let n = set.frames() as f64;
        let rho: Vec<f64> = params
            .get("rho.log")
            .map_to_f64()
            .iter()
            .map(|l| l.exp())
            .collect();
        let stats = EpochStats {
            epoch,
            lr,
            total: sums[0] / n,
            rec: sums[1] / n,
            rec_pos: sums[2] / n,
            rand: sums[3] / n,
            sdf: sums[4] / n,
            reg: sums[5] / n,
            mean_z_sq: sums[6] / n,
            rho,
        };
        on_epoch(&stats);
        let stop = cfg.stop_rec_frac.is_some_and(|frac| {
            stats.rec_pos / ctx.bbox_diag < frac && (0.6..=1.4).contains(&stats.mean_z_sq)
        });
        history.push(stats);
        if stop {
            log::info!("static stage early stop at epoch {epoch}");
            break;
        }
    }
    Ok((params, history))
}

fn run_sample(
    set: &TrainingSet,
    params: &ParamStore<f32>,
    names: &[String],
    t: usize,
    z_r: &[f64],
    weights: &LossWeights,
) -> Result<SampleOut, usize> {
    let ctx = &set.ctx;
    let mut g = Graph::<f32>::new();
    let bound = params.bind(&mut g);
    let m_p = ctx.raw_map_constant(&mut g, &set.map_p(t), ctx.cfg.input_channels());
    let vars = static_loss(
        ctx,
        &mut g,
        &bound,
        m_p,
        &set.garment[t],
        &set.drivers[t],
        z_r,
        weights,
    );
    let total = g.value(vars.total).item() as f64;
    if !total.is_finite() {
        return Err(t);
    }
    g.backward(vars.total);
    let mut grads = Vec::with_capacity(names.len());
    for name in names {
        let grad = g.grad(bound.get(name));
        if !grad.is_finite() {
            return Err(t);
        }
        grads.push(grad);
    }
    let z = g.value(vars.z);
    let z_sq =
        z.data().iter().map(|v| (*v as f64) * (*v as f64)).sum::<f64>() / z.numel() as f64;
    Ok(SampleOut {
        grads,
        total,
        rec: g.value(vars.rec).item() as f64,
        rec_pos: g.value(vars.rec_pos).item() as f64,
        rand: g.value(vars.rand).item() as f64,
        sdf: g.value(vars.sdf).item() as f64,
        reg: g.value(vars.reg).item() as f64,
        z_sq,
    })
}

/// Box-Muller draw, matching the initializer's sampling style.
pub(crate) fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::tests::{small_cfg, small_dataset};
    use crate::data::{context_from_dataset, training_set_from_split};
    use std::sync::Arc;

    fn quick_cfg(epochs: usize) -> TrainStaticConfig {
        TrainStaticConfig {
            epochs,
            lr: 2e-3,
            batch_size: 3,
            seed: 7,
            ..TrainStaticConfig::default()
        }
    }

    #[test]
    fn overfits_a_short_sequence_and_reports_progress() {
        let dir = tempfile::tempdir().unwrap();
        let ds = small_dataset(dir.path(), 12);
        let ctx = Arc::new(context_from_dataset(small_cfg(), &ds).unwrap());
        let set = training_set_from_split(ctx.clone(), &ds, "train", None).unwrap();

        let mut seen = 0;
        let (params, history) =
            train_static(&set, &quick_cfg(30), |_| seen += 1).unwrap();
        assert_eq!(seen, history.len());
        assert_eq!(history.len(), 30);
        let first = &history[0];
        let last = history.last().unwrap();
        assert!(
            last.total < first.total * 0.8,
            "loss should drop: {} -> {}",
            first.total,
            last.total
        );
        assert!(last.rho.iter().all(|&r| r > 0.0), "radii stay positive");
        // Stage 1 must not have touched the dynamic blocks.
        let fresh: ParamStore<f32> = init_params(&ctx.cfg, 7, ctx.sigma);
        for name in params.names() {
            if name.starts_with("c.") || name.starts_with("edyn.") {
                assert_eq!(
                    params.get(name).data(),
                    fresh.get(name).data(),
                    "{name} must be untouched by stage 1"
                );
            }
        }
    }

    #[test]
    fn same_seed_reproduces_the_loss_curve_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let ds = small_dataset(dir.path(), 8);
        let ctx = Arc::new(context_from_dataset(small_cfg(), &ds).unwrap());
        let set = training_set_from_split(ctx, &ds, "train", None).unwrap();

        let (pa, ha) = train_static(&set, &quick_cfg(6), |_| {}).unwrap();
        let (pb, hb) = train_static(&set, &quick_cfg(6), |_| {}).unwrap();
        for (a, b) in ha.iter().zip(&hb) {
            assert_eq!(a.total, b.total);
            assert_eq!(a.mean_z_sq, b.mean_z_sq);
        }
        for name in pa.names() {
            assert_eq!(pa.get(name).data(), pb.get(name).data(), "{name}");
        }

        let mut other = quick_cfg(6);
        other.seed = 8;
        let (_, hc) = train_static(&set, &other, |_| {}).unwrap();
        assert_ne!(ha[5].total, hc[5].total, "seed must matter");
    }

    #[test]
    fn early_stop_honors_the_target() {
        let dir = tempfile::tempdir().unwrap();
        let ds = small_dataset(dir.path(), 8);
        let ctx = Arc::new(context_from_dataset(small_cfg(), &ds).unwrap());
        let set = training_set_from_split(ctx, &ds, "train", None).unwrap();
        let mut cfg = quick_cfg(50);
        // Loose enough to trip quickly once mean(z²) drifts into range.
        cfg.stop_rec_frac = Some(0.5);
        let (_, history) = train_static(&set, &cfg, |_| {}).unwrap();
        if history.len() < 50 {
            let last = history.last().unwrap();
            assert!(last.rec_pos / set.ctx.bbox_diag < 0.5);
            assert!((0.6..=1.4).contains(&last.mean_z_sq));
        }
    }

    #[test]
    fn rejects_bad_configs_and_tiny_datasets() {
        let dir = tempfile::tempdir().unwrap();
        let ds = small_dataset(dir.path(), 8);
        let ctx = Arc::new(context_from_dataset(small_cfg(), &ds).unwrap());
        let set = training_set_from_split(ctx, &ds, "train", Some(1)).unwrap();
        assert!(matches!(
            train_static(&set, &TrainStaticConfig::default(), |_| {}),
            Err(TrainError::Data(_))
        ));

        let bad = TrainStaticConfig {
            lr: 0.0,
            ..TrainStaticConfig::default()
        };
        assert!(matches!(
            train_static(&set, &bad, |_| {}),
            Err(TrainError::Config(_))
        ));
    }
}
