//! Test-time collision cleanup: per frame, optimizes a coarse residual
//! displacement map over the uv chart until the posed garment clears the
//! driver tangent planes, anchored to the network prediction by L1 fidelity
//! on positions and Laplacians.

use std::rc::Rc;

use gdyn_ad::optim::Adam;
use gdyn_ad::{Graph, TensorData, Var};
use gdyn_core::diff::{FramesApplyOp, LaplacianOp, LbsPoseOp, SampleUvOp, SkinWeightsOp};
use gdyn_core::skinning::pose_with_residual;
use gdyn_core::vecmath as vm;
use gdyn_core::vecmath::V3;
use gdyn_core::DriverFrame;
use gdyn_net::ParamStore;
use serde::{Deserialize, Serialize};

use crate::losses::v3_constant;
use crate::model::ModelContext;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ResolverConfig {
    /// Collision-loss stop threshold (summed meters). `None` scales with
    /// the garment: 0.1% of vertices at 1 mm depth.
    pub eps_col: Option<f64>,
    pub max_iters: usize,
    pub lr: f64,
    pub lambda3: f64,
}

impl Default for ResolverConfig {
    fn default() -> Self {
        Self {
            eps_col: None,
            max_iters: 20,
            lr: 1e-3,
            lambda3: 100.0,
        }
    }
}

impl ResolverConfig {
    pub fn eps_for(&self, vertex_count: usize) -> f64 {
        self.eps_col.unwrap_or(0.001 * vertex_count as f64 * 0.001)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ResolveReport {
    /// Gradient steps taken (0 when the frame was already clean).
    pub iters: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
    /// Vertices behind their nearest tangent plane before/after.
    pub initial_hits: usize,
    pub final_hits: usize,
    /// Largest |θ| component of the accepted map, meters.
    pub theta_max: f64,
}

/// Tangent-plane collision loss of posed positions against one driver
/// frame: per garment vertex, the hinge of the signed offset to the plane
/// of the nearest seed, summed over vertices. Also returns each vertex's
/// nearest seed index.
pub fn collision_loss(positions: &[V3], frame: &DriverFrame) -> (f64, Vec<usize>) {
    let mut total = 0.0;
    let mut nearest = Vec::with_capacity(positions.len());
    for gpos in positions {
        let k = nearest_seed(*gpos, &frame.seed_positions);
        let o = vm::dot(vm::sub(*gpos, frame.seed_positions[k]), frame.seed_normals[k]);
        if o < 0.0 {
            total -= o;
        }
        nearest.push(k);
    }
    (total, nearest)
}

fn nearest_seed(p: V3, seeds: &[V3]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (k, s) in seeds.iter().enumerate() {
        let d = vm::dist2(p, *s);
        if d < best_d {
            best_d = d;
            best = k;
        }
    }
    best
}

/// Hits ignore sub-0.1mm residues: ε_col stops on the summed loss, which
/// can leave many vertices microns behind their planes.
const HIT_DEPTH_TOL: f64 = 1e-4;

fn hit_count(positions: &[V3], frame: &DriverFrame, nearest: &[usize]) -> usize {
    positions
        .iter()
        .zip(nearest)
        .filter(|(gpos, &k)| {
            vm::dot(vm::sub(**gpos, frame.seed_positions[k]), frame.seed_normals[k])
                < -HIT_DEPTH_TOL
        })
        .count()
}

/// One-iteration objective over a residual map var: sample θ at vertices,
/// displace the prediction in local frames, re-weight, pose, then
/// ‖G̃−G‖₁ + ‖ΔG̃−ΔG‖₁ + λ3·Σ Relu(−o) with the tangent planes frozen to
/// the correspondences of the previous iterate.
pub(crate) struct ResidualObjective<'a> {
    pub ctx: &'a ModelContext,
    pub g_hat: &'a [V3],
    pub driver: &'a DriverFrame,
    pub log_rho: &'a TensorData<f64>,
    pub base_posed: &'a [V3],
    pub base_lap: &'a [V3],
    pub nearest: &'a [usize],
    pub lambda3: f64,
}

impl ResidualObjective<'_> {
    pub(crate) fn build(&self, g: &mut Graph<f64>, theta: Var) -> Var {
        let ctx = self.ctx;
        let sampled = g.custom(
            Rc::new(SampleUvOp {
                table: ctx.theta_sampler.clone(),
            }),
            &[theta],
        );
        let g_check = g.custom(
            Rc::new(FramesApplyOp {
                g0: self.g_hat.to_vec(),
                frames: ctx.frames0.clone(),
            }),
            &[sampled],
        );
        let log_rho = g.constant(self.log_rho.clone());
        let weights = g.custom(
            Rc::new(SkinWeightsOp {
                seeds0: ctx.surface.seed_positions.clone(),
                seed_parts: ctx.seed_parts.clone(),
                part_count: ctx.cfg.part_count,
            }),
            &[g_check, log_rho],
        );
        let posed = g.custom(
            Rc::new(LbsPoseOp {
                seeds0: ctx.surface.seed_positions.clone(),
                transforms: self.driver.transforms.clone(),
            }),
            &[g_check, weights],
        );

        let v = self.g_hat.len();
        let mut n_rows = vec![0.0; v * 3];
        let mut bn = vec![0.0; v];
        for (i, &k) in self.nearest.iter().enumerate() {
            let n = self.driver.seed_normals[k];
            n_rows[i * 3..i * 3 + 3].copy_from_slice(&n);
            bn[i] = vm::dot(self.driver.seed_positions[k], n);
        }
        let n_mat = g.constant(TensorData::from_f64_slice(vec![v, 3], &n_rows));
        let bn = g.constant(TensorData::from_f64_slice(vec![v, 1], &bn));
        let ones = g.constant(TensorData::from_f64_slice(vec![3, 1], &[1.0; 3]));
        let prod = g.mul(posed, n_mat);
        let gn = g.matmul(prod, ones);
        let o = g.sub(gn, bn);
        let neg_o = g.neg(o);
        let pen = g.relu(neg_o);
        let col = g.sum(pen);

        let base = g.constant(v3_constant(self.base_posed));
        let dpos = g.sub(posed, base);
        let dpos_abs = g.abs(dpos);
        let fid_pos = g.sum(dpos_abs);
        let lap = g.custom(
            Rc::new(LaplacianOp {
                mesh: ctx.garment.clone(),
            }),
            &[posed],
        );
        let lap_base = g.constant(v3_constant(self.base_lap));
        let dlap = g.sub(lap, lap_base);
        let dlap_abs = g.abs(dlap);
        let fid_lap = g.sum(dlap_abs);

        let fid = g.add(fid_pos, fid_lap);
        let colw = g.scale(col, self.lambda3);
        g.add(fid, colw)
    }
}

struct Candidate {
    posed: Vec<V3>,
    nearest: Vec<usize>,
    col: f64,
    total: f64,
    hits: usize,
}

fn evaluate(
    ctx: &ModelContext,
    g_hat: &[V3],
    seed_rho: &[f64],
    driver: &DriverFrame,
    theta: &TensorData<f64>,
    base_posed: &[V3],
    base_lap: &[V3],
    lambda3: f64,
) -> Candidate {
    let flat = ctx.theta_sampler.apply_f64(theta.data(), 3);
    let tv: Vec<V3> = flat.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
    let (posed, _, _) = pose_with_residual(
        g_hat,
        &tv,
        &ctx.frames0,
        &ctx.surface.seed_positions,
        seed_rho,
        driver,
    );
    let (col, nearest) = collision_loss(&posed, driver);
    let hits = hit_count(&posed, driver, &nearest);
    let lap = ctx.garment.laplacian(&posed).expect("garment field");
    let mut fid = 0.0;
    for i in 0..posed.len() {
        for c in 0..3 {
            fid += (posed[i][c] - base_posed[i][c]).abs();
            fid += (lap[i][c] - base_lap[i][c]).abs();
        }
    }
    Candidate {
        posed,
        nearest,
        col,
        total: fid + lambda3 * col,
        hits,
    }
}

/// Resolves one frame. Returns the accepted posed garment, the residual
/// map, and a step report. A candidate replaces the incumbent only when it
/// lowers both the collision loss and the full objective, so the output is
/// never worse than the raw prediction, and with λ3 → 0 nothing is ever
/// accepted and Θ stays exactly zero.
pub fn resolve(
    ctx: &ModelContext,
    params: &ParamStore<f32>,
    g_hat: &[V3],
    driver: &DriverFrame,
    cfg: &ResolverConfig,
) -> (Vec<V3>, TensorData<f64>, ResolveReport) {
    assert_eq!(g_hat.len(), ctx.vertex_count(), "prediction vs context mesh");
    let w = ctx.cfg.map_width;
    let rho_param = params.get("rho.log");
    let log_rho =
        TensorData::<f64>::from_f64_slice(rho_param.shape().to_vec(), &rho_param.map_to_f64());
    let seed_rho: Vec<f64> = ctx
        .seed_parts
        .iter()
        .map(|&p| log_rho.data()[p].exp())
        .collect();

    let zero_d = vec![[0.0; 3]; g_hat.len()];
    let (base_posed, _, _) = pose_with_residual(
        g_hat,
        &zero_d,
        &ctx.frames0,
        &ctx.surface.seed_positions,
        &seed_rho,
        driver,
    );
    let base_lap = ctx.garment.laplacian(&base_posed).expect("garment field");
    let (initial_loss, initial_nearest) = collision_loss(&base_posed, driver);
    let initial_hits = hit_count(&base_posed, driver, &initial_nearest);
    let eps = cfg.eps_for(g_hat.len());

    let mut theta = TensorData::<f64>::zeros(vec![w, w, 3]);
    let mut best_theta = theta.clone();
    let mut best = Candidate {
        posed: base_posed.clone(),
        nearest: initial_nearest,
        col: initial_loss,
        total: cfg.lambda3 * initial_loss,
        hits: initial_hits,
    };

    let mut iters = 0;
    if initial_loss > eps {
        let mut adam: Adam<f64> = Adam::with_eps(cfg.lr, 1e-3);
        // Correspondences follow the optimization trajectory, not the
        // incumbent, so stale tangent planes refresh even across rejected
        // candidates.
        let mut cur_nearest = best.nearest.clone();
        for _ in 0..cfg.max_iters {
            let mut g = Graph::<f64>::new();
            let theta_var = g.var(theta.clone());
            let objective = ResidualObjective {
                ctx,
                g_hat,
                driver,
                log_rho: &log_rho,
                base_posed: &base_posed,
                base_lap: &base_lap,
                nearest: &cur_nearest,
                lambda3: cfg.lambda3,
            };
            let total = objective.build(&mut g, theta_var);
            g.backward(total);
            let grad = g.grad(theta_var);
            adam.next_step();
            adam.update("theta", &mut theta, &grad);
            iters += 1;

            let cand = evaluate(
                ctx,
                g_hat,
                &seed_rho,
                driver,
                &theta,
                &base_posed,
                &base_lap,
                cfg.lambda3,
            );
            cur_nearest = cand.nearest.clone();
            if cand.col < best.col && cand.total < best.total {
                best = cand;
                best_theta = theta.clone();
            }
            if best.col <= eps {
                break;
            }
        }
        if best.col > eps {
            log::warn!(
                "resolver stopped at max_iters={} with collision loss {:.3e} (target {:.3e})",
                cfg.max_iters,
                best.col,
                eps
            );
        }
    }

    let report = ResolveReport {
        iters,
        initial_loss,
        final_loss: best.col,
        initial_hits,
        final_hits: best.hits,
        theta_max: best_theta.max_abs(),
    };
    (best.posed, best_theta, report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::tests::tiny_setup;
    use gdyn_ad::gradcheck::assert_grads_close;
    use gdyn_core::shapes::{grid_sheet, uv_sphere};
    use gdyn_core::{PartLabel, TriMesh};
    use gdyn_net::params::init_params;
    use gdyn_net::ArchConfig;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn hand_frame() -> DriverFrame {
        DriverFrame {
            transforms: vec![],
            seed_positions: vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]],
            seed_normals: vec![[0.0, 1.0, 0.0], [1.0, 0.0, 0.0]],
        }
    }

    #[test]
    fn collision_loss_hand_cases() {
        let frame = hand_frame();
        // Above the first plane and outside the second: clean.
        let (loss, nearest) = collision_loss(&[[0.1, 0.3, 0.0], [1.5, 0.0, 0.0]], &frame);
        assert_eq!(loss, 0.0);
        assert_eq!(nearest, vec![0, 1]);
        // One vertex at depth d behind its nearest plane contributes d.
        let (loss, nearest) = collision_loss(&[[0.1, -0.25, 0.0]], &frame);
        assert!((loss - 0.25).abs() < 1e-15);
        assert_eq!(nearest, vec![0]);
        // Depths add up.
        let (loss, _) = collision_loss(&[[0.0, -0.1, 0.0], [0.9, 0.0, 0.0]], &frame);
        assert!((loss - (0.1 + 0.1)).abs() < 1e-12);
    }

    #[test]
    fn collision_loss_matches_brute_force_on_random_scenes() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut rand_v3 = |s: f64| -> V3 {
            [
                rng.gen_range(-s..s),
                rng.gen_range(-s..s),
                rng.gen_range(-s..s),
            ]
        };
        let seeds: Vec<V3> = (0..13).map(|_| rand_v3(1.0)).collect();
        let normals: Vec<V3> = (0..13)
            .map(|_| vm::normalized(rand_v3(1.0)).unwrap())
            .collect();
        let points: Vec<V3> = (0..57).map(|_| rand_v3(1.5)).collect();
        let frame = DriverFrame {
            transforms: vec![],
            seed_positions: seeds.clone(),
            seed_normals: normals.clone(),
        };
        let (loss, nearest) = collision_loss(&points, &frame);

        let mut want = 0.0;
        for (i, p) in points.iter().enumerate() {
            let (mut k_best, mut d_best) = (0, f64::INFINITY);
            for (k, s) in seeds.iter().enumerate() {
                if vm::dist(*p, *s) < d_best {
                    d_best = vm::dist(*p, *s);
                    k_best = k;
                }
            }
            assert_eq!(nearest[i], k_best, "vertex {i}");
            want += (-vm::dot(vm::sub(*p, seeds[k_best]), normals[k_best])).max(0.0);
        }
        assert!((loss - want).abs() < 1e-12, "{loss} vs {want}");
    }

    #[test]
    fn clean_frame_is_a_no_op() {
        let ctx = tiny_setup();
        let params = init_params::<f32>(&ctx.cfg, 0, ctx.sigma);
        // Far outside the driver cylinder: no tangent plane is violated.
        let g_hat: Vec<V3> = ctx
            .garment
            .positions
            .iter()
            .map(|p| vm::add(*p, [1.0, 0.0, 0.0]))
            .collect();
        let frame = ctx.surface.canonical_frame();
        let (posed, theta, report) =
            resolve(&ctx, &params, &g_hat, &frame, &ResolverConfig::default());
        assert_eq!(report.iters, 0);
        assert_eq!(report.initial_loss, 0.0);
        assert_eq!(report.final_loss, 0.0);
        assert_eq!(report.theta_max, 0.0);
        assert_eq!(theta.data(), vec![0.0f64; theta.numel()]);
        assert_eq!(posed, g_hat, "identity driver poses bitwise");
    }

    /// Flat sheet hovering 5 mm over a sphere, with a central patch pushed
    /// 1 cm inside. Mirrors the synthetic push scene at unit-test scale.
    fn sphere_push() -> (ModelContext, Vec<V3>, usize) {
        let cfg = ArchConfig::tiny();
        let sheet = grid_sheet(16, 16, 0.6, 0.6);
        let positions: Vec<V3> = sheet
            .positions
            .iter()
            .map(|p| [p[0] - 0.3, 0.205, p[1] - 0.3])
            .collect();
        let garment =
            TriMesh::new(positions, sheet.triangles.clone(), sheet.uvs.clone()).unwrap();
        let driver = uv_sphere(0.2, 12, 16);
        let labels = vec![PartLabel::UpperBody; driver.vertex_count()];
        let ctx = ModelContext::new(cfg, garment, driver, &labels).unwrap();

        let mut pushed = 0;
        let g_hat: Vec<V3> = ctx
            .garment
            .positions
            .iter()
            .map(|p| {
                if p[0] * p[0] + p[2] * p[2] < 0.12 * 0.12 {
                    pushed += 1;
                    [p[0], 0.19, p[2]]
                } else {
                    *p
                }
            })
            .collect();
        (ctx, g_hat, pushed)
    }

    #[test]
    fn pushes_a_penetrating_patch_back_out() {
        let (ctx, g_hat, pushed) = sphere_push();
        let v = ctx.vertex_count();
        assert!(
            pushed as f64 >= 0.07 * v as f64,
            "setup must push at least 7% of vertices ({pushed}/{v})"
        );
        let params = init_params::<f32>(&ctx.cfg, 0, ctx.sigma);
        let frame = ctx.surface.canonical_frame();
        let (posed, _, report) =
            resolve(&ctx, &params, &g_hat, &frame, &ResolverConfig::default());
        assert!(report.initial_hits >= pushed, "pushed patch must register");
        assert!(report.iters > 0);
        assert!(
            report.final_loss < 0.05 * report.initial_loss,
            "collision loss must collapse: {} -> {}",
            report.initial_loss,
            report.final_loss
        );
        assert!(
            (report.final_hits as f64) < 0.005 * v as f64 + 1.0,
            "penetrating fraction must drop below 0.5%: {} of {v}",
            report.final_hits
        );
        // The untouched border must stay anchored to the prediction.
        let mut border_drift: f64 = 0.0;
        for (p, q) in ctx.garment.positions.iter().zip(&posed) {
            if p[0] * p[0] + p[2] * p[2] > 0.2 * 0.2 {
                border_drift = border_drift.max(vm::dist(*p, *q));
            }
        }
        assert!(border_drift < 5e-3, "border drift {border_drift}");
    }

    #[test]
    fn tiny_lambda3_leaves_the_prediction_untouched() {
        let (ctx, g_hat, _) = sphere_push();
        let params = init_params::<f32>(&ctx.cfg, 0, ctx.sigma);
        let frame = ctx.surface.canonical_frame();
        let cfg = ResolverConfig {
            lambda3: 1e-6,
            ..ResolverConfig::default()
        };
        let (posed, theta, report) = resolve(&ctx, &params, &g_hat, &frame, &cfg);
        assert_eq!(report.iters, cfg.max_iters, "threshold is unreachable");
        assert!(
            report.theta_max < 1e-4,
            "fidelity must pin the map: {}",
            report.theta_max
        );
        assert_eq!(theta.max_abs(), 0.0, "nothing ever accepted");
        assert_eq!(posed, g_hat, "identity driver, zero map");
        assert_eq!(report.final_loss, report.initial_loss);
    }

    #[test]
    fn objective_gradient_matches_finite_differences() {
        let ctx = tiny_setup();
        // Break tangent-plane ties: the canonical sheet touches a seed.
        let g_hat: Vec<V3> = ctx
            .garment
            .positions
            .iter()
            .map(|p| vm::add(*p, [0.013, 0.007, 0.011]))
            .collect();
        let frame = ctx.surface.canonical_frame();
        let rho_init = ctx.sigma;
        let log_rho = TensorData::<f64>::from_f64_slice(
            vec![1, ctx.cfg.part_count],
            &vec![rho_init.ln(); ctx.cfg.part_count],
        );
        let seed_rho = vec![rho_init; ctx.surface.seed_count()];
        let zero_d = vec![[0.0; 3]; g_hat.len()];
        let (base_posed, _, _) = pose_with_residual(
            &g_hat,
            &zero_d,
            &ctx.frames0,
            &ctx.surface.seed_positions,
            &seed_rho,
            &frame,
        );
        let base_lap = ctx.garment.laplacian(&base_posed).unwrap();
        let (_, nearest) = collision_loss(&base_posed, &frame);

        let w = ctx.cfg.map_width;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let theta0 = TensorData::new(
            vec![w, w, 3],
            (0..w * w * 3).map(|_| rng.gen_range(-0.01..0.01)).collect(),
        );
        let objective = ResidualObjective {
            ctx: &ctx,
            g_hat: &g_hat,
            driver: &frame,
            log_rho: &log_rho,
            base_posed: &base_posed,
            base_lap: &base_lap,
            nearest: &nearest,
            lambda3: 3.0,
        };
        assert_grads_close(&[theta0], 1e-6, 1e-5, "residual objective", |g, vars| {
            objective.build(g, vars[0])
        });
    }
}
