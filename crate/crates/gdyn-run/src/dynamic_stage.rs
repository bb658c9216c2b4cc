//! Stage 2: with every stage-1 block frozen, trains the motion encoder and
//! dynamic encoder to predict the next latent code from the previous state,
//! optionally constrained by the zero-motion virtual sample.

use gdyn_ad::optim::Adam;
use gdyn_ad::{Graph, TensorData};
use gdyn_core::features::{interaction_forces, motion_features};
use gdyn_net::blocks::{encoder_stack, s_block};
use gdyn_net::ParamStore;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::TrainingSet;
use crate::losses::{dynamic_loss, VirtualSample};
use crate::static_stage::{TrainError, STATIC_PREFIXES};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainDynConfig {
    pub epochs: usize,
    pub lr: f64,
    pub lr_halve_every: usize,
    pub batch_size: usize,
    pub lambda2: f64,
    pub seed: u64,
    /// Train with the zero-motion virtual sample (the ablation switch).
    pub virtual_sample: bool,
    /// Early stop once the epoch real-sample position L1, as a fraction of
    /// the bbox diagonal, drops below this.
    pub stop_geo_frac: Option<f64>,
}

impl Default for TrainDynConfig {
    fn default() -> Self {
        Self {
            epochs: 350,
            lr: 1e-4,
            lr_halve_every: 50,
            batch_size: 1,
            lambda2: 1e-3,
            seed: 0,
            virtual_sample: true,
            stop_geo_frac: None,
        }
    }
}

impl TrainDynConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.epochs == 0 || self.batch_size == 0 || self.lr_halve_every == 0 {
            return Err(TrainError::Config(
                "epochs, batch_size, lr_halve_every must be positive".into(),
            ));
        }
        if !(self.lr > 0.0) {
            return Err(TrainError::Config("lr must be positive".into()));
        }
        if self.lambda2 < 0.0 {
            return Err(TrainError::Config("lambda2 must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct DynEpochStats {
    pub epoch: usize,
    pub lr: f64,
    pub total: f64,
    pub geo: f64,
    /// Real-sample position L1 in meters (the 1-step training error).
    pub geo_real: f64,
    pub z_match: f64,
    pub reg: f64,
}

/// Frozen-path precomputation: per-frame S(M^P_t) activations and latent
/// targets Z*_t from the frozen static encoder. Computed once.
pub struct FrozenTargets {
    pub s_maps: Vec<TensorData<f32>>,
    pub z_star: Vec<Vec<f64>>,
}

pub fn precompute_frozen(set: &TrainingSet, params: &ParamStore<f32>) -> FrozenTargets {
    let ctx = &set.ctx;
    let per_frame: Vec<(TensorData<f32>, Vec<f64>)> = (0..set.frames())
        .into_par_iter()
        .map(|t| {
            let mut g = Graph::<f32>::new();
            let bound = params.bind_constants(&mut g);
            let m_p = ctx.raw_map_constant(&mut g, &set.map_p(t), ctx.cfg.input_channels());
            let feat = s_block(&ctx.cfg, &mut g, &bound, m_p);
            let z = encoder_stack(&ctx.cfg, &mut g, &bound, "esta", feat);
            (g.value(feat).clone(), g.value(z).map_to_f64())
        })
        .collect();
    let (s_maps, z_star) = per_frame.into_iter().unzip();
    FrozenTargets { s_maps, z_star }
}

struct SampleOut {
    grads: Vec<TensorData<f32>>,
    total: f64,
    geo: f64,
    geo_real: f64,
    z_match: f64,
    reg: f64,
}

/// Runs stage 2 starting from trained stage-1 parameters. Returns the full
/// parameter set with the stage-1 prefixes frozen (bitwise unchanged) and
/// only the motion/dynamic encoders updated.
pub fn train_dynamic(
    set: &TrainingSet,
    static_params: &ParamStore<f32>,
    cfg: &TrainDynConfig,
    mut on_epoch: impl FnMut(&DynEpochStats),
) -> Result<(ParamStore<f32>, Vec<DynEpochStats>), TrainError> {
    cfg.validate()?;
    if set.frames() < 4 {
        return Err(TrainError::Data(format!(
            "dynamic stage needs at least 4 frames (3 of history), got {}",
            set.frames()
        )));
    }
    let ctx = &set.ctx;
    let mut params = static_params.clone();
    for prefix in STATIC_PREFIXES {
        params.freeze_prefix(prefix);
    }
    let names = params.trainable_names();
    if names.is_empty() {
        return Err(TrainError::Config(
            "no trainable parameters after freezing stage-1 blocks".into(),
        ));
    }
    let frozen = precompute_frozen(set, &params);

    let mut adam: Adam<f32> = Adam::new(cfg.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut history = Vec::new();
    let samples: Vec<usize> = (3..set.frames()).collect();

    for epoch in 0..cfg.epochs {
        let lr = cfg.lr * 0.5f64.powi((epoch / cfg.lr_halve_every) as i32);
        adam.lr = lr as f32;
        let mut order = samples.clone();
        order.shuffle(&mut rng);

        let mut sums = [0.0f64; 5];
        for chunk in order.chunks(cfg.batch_size) {
            let outs: Vec<Result<SampleOut, usize>> = chunk
                .par_iter()
                .map(|&t| run_sample(set, &params, &names, &frozen, t, cfg))
                .collect();
            let mut acc: Vec<TensorData<f32>> = Vec::new();
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
                sums[1] += out.geo;
                sums[2] += out.geo_real;
                sums[3] += out.z_match;
                sums[4] += out.reg;
            }
            adam.next_step();
            for (name, grad) in names.iter().zip(&acc) {
                adam.update(name, params.get_mut(name), grad);
            }
        }

        let n = samples.len() as f64;
        let stats = DynEpochStats {
            epoch,
            lr,
            total: sums[0] / n,
            geo: sums[1] / n,
            geo_real: sums[2] / n,
            z_match: sums[3] / n,
            reg: sums[4] / n,
        };
        on_epoch(&stats);
        let stop = cfg
            .stop_geo_frac
            .is_some_and(|frac| stats.geo_real / ctx.bbox_diag < frac);
        history.push(stats);
        if stop {
            log::info!("dynamic stage early stop at epoch {epoch}");
            break;
        }
    }
    Ok((params, history))
}

fn run_sample(
    set: &TrainingSet,
    params: &ParamStore<f32>,
    names: &[String],
    frozen: &FrozenTargets,
    t: usize,
    cfg: &TrainDynConfig,
) -> Result<SampleOut, usize> {
    let ctx = &set.ctx;
    let mut g = Graph::<f32>::new();
    let bound = params.bind(&mut g);

    let s_prev = g.constant(frozen.s_maps[t - 1].clone());
    let mf = motion_features(&set.garment[t - 1], &set.garment[t - 2], &set.garment[t - 3]);
    let m_motion_data = ctx.raster.apply_f64(&mf.channels(), 6);
    let w = ctx.cfg.map_width;
    let m_motion = g.constant(TensorData::from_f64_slice(vec![w, w, 6], &m_motion_data));
    let forces = interaction_forces(
        &set.garment[t - 1],
        &set.drivers[t],
        &set.drivers[t - 1],
        ctx.sigma,
    );
    let m_inter = ctx.map_constant(&mut g, &forces.forces, ctx.cfg.input_channels());

    let virt = cfg.virtual_sample.then_some(VirtualSample {
        target: &set.garment[t - 1],
        driver: &set.drivers[t - 1],
        z_star: &frozen.z_star[t - 1],
    });
    let vars = dynamic_loss(
        ctx,
        &mut g,
        &bound,
        s_prev,
        m_motion,
        m_inter,
        &set.garment[t],
        &set.drivers[t],
        &frozen.z_star[t],
        virt,
        cfg.lambda2,
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
    Ok(SampleOut {
        grads,
        total,
        geo: g.value(vars.geo).item() as f64,
        geo_real: g.value(vars.geo_real).item() as f64,
        z_match: g.value(vars.z_match).item() as f64,
        reg: g.value(vars.reg).item() as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::tests::{small_cfg, small_dataset};
    use crate::data::{context_from_dataset, training_set_from_split};
    use crate::static_stage::{train_static, TrainStaticConfig};
    use std::sync::Arc;

    fn trained_static(set: &TrainingSet) -> ParamStore<f32> {
        let cfg = TrainStaticConfig {
            epochs: 12,
            lr: 2e-3,
            batch_size: 3,
            seed: 7,
            ..TrainStaticConfig::default()
        };
        train_static(set, &cfg, |_| {}).unwrap().0
    }

    #[test]
    fn trains_dynamic_blocks_and_freezes_the_rest() {
        let dir = tempfile::tempdir().unwrap();
        let ds = small_dataset(dir.path(), 12);
        let ctx = Arc::new(context_from_dataset(small_cfg(), &ds).unwrap());
        let set = training_set_from_split(ctx, &ds, "train", None).unwrap();
        let static_params = trained_static(&set);

        let cfg = TrainDynConfig {
            epochs: 15,
            lr: 2e-3,
            batch_size: 3,
            seed: 3,
            ..TrainDynConfig::default()
        };
        let (params, history) = train_dynamic(&set, &static_params, &cfg, |_| {}).unwrap();
        assert_eq!(history.len(), 15);
        assert!(
            history.last().unwrap().total < history[0].total,
            "dynamic loss should drop: {} -> {}",
            history[0].total,
            history.last().unwrap().total
        );
        let mut updated = 0;
        for name in params.names() {
            let same = params.get(name).data() == static_params.get(name).data();
            if STATIC_PREFIXES.iter().any(|p| name.starts_with(p)) {
                assert!(same, "{name} must stay bitwise frozen");
            } else if !same {
                updated += 1;
            }
        }
        assert!(updated > 0, "motion/dynamic encoder weights must move");
    }

    #[test]
    fn frozen_targets_come_from_the_frozen_encoder() {
        let dir = tempfile::tempdir().unwrap();
        let ds = small_dataset(dir.path(), 8);
        let ctx = Arc::new(context_from_dataset(small_cfg(), &ds).unwrap());
        let set = training_set_from_split(ctx.clone(), &ds, "train", None).unwrap();
        let static_params = trained_static(&set);
        let frozen = precompute_frozen(&set, &static_params);
        assert_eq!(frozen.s_maps.len(), set.frames());
        assert_eq!(frozen.z_star.len(), set.frames());
        assert_eq!(frozen.z_star[0].len(), ctx.cfg.latent_dim);
        // Same params, same data: bitwise reproducible.
        let again = precompute_frozen(&set, &static_params);
        for t in 0..set.frames() {
            assert_eq!(frozen.s_maps[t].data(), again.s_maps[t].data());
            assert_eq!(frozen.z_star[t], again.z_star[t]);
        }
    }

    #[test]
    fn virtual_sample_flag_changes_the_objective() {
        let dir = tempfile::tempdir().unwrap();
        let ds = small_dataset(dir.path(), 8);
        let ctx = Arc::new(context_from_dataset(small_cfg(), &ds).unwrap());
        let set = training_set_from_split(ctx, &ds, "train", None).unwrap();
        let static_params = trained_static(&set);

        let with = TrainDynConfig {
            epochs: 4,
            lr: 2e-3,
            seed: 3,
            ..TrainDynConfig::default()
        };
        let without = TrainDynConfig {
            virtual_sample: false,
            ..with.clone()
        };
        let (pa, ha) = train_dynamic(&set, &static_params, &with, |_| {}).unwrap();
        let (pb, hb) = train_dynamic(&set, &static_params, &without, |_| {}).unwrap();
        assert!(ha[0].total > hb[0].total, "virtual term adds loss mass");
        let moved = params_differ(&pa, &pb);
        assert!(moved, "ablation must change the trained weights");
    }

    fn params_differ(a: &ParamStore<f32>, b: &ParamStore<f32>) -> bool {
        a.names().any(|n| a.get(n).data() != b.get(n).data())
    }

    #[test]
    fn needs_enough_history_frames() {
        let dir = tempfile::tempdir().unwrap();
        let ds = small_dataset(dir.path(), 8);
        let ctx = Arc::new(context_from_dataset(small_cfg(), &ds).unwrap());
        let set = training_set_from_split(ctx.clone(), &ds, "train", Some(3)).unwrap();
        let static_params: ParamStore<f32> =
            gdyn_net::params::init_params(&ctx.cfg, 0, ctx.sigma);
        assert!(matches!(
            train_dynamic(&set, &static_params, &TrainDynConfig::default(), |_| {}),
            Err(TrainError::Data(_))
        ));
    }
}
