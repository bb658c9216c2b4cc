//! Loss terms for both training stages, built on the shared graph. All
//! reductions are means (over vertices/edges/coordinates) except the
//! rest-space collision margin, which sums penetration depths so its scale
//! tracks how much geometry is actually inside the driver.

use std::rc::Rc;

use gdyn_ad::{Graph, Real, TensorData, Var};
use gdyn_core::diff::{edge_list, EdgeLengthsOp, FramesApplyOp, LaplacianOp, SdfOp};
use gdyn_core::vecmath::V3;
use gdyn_core::DriverFrame;
use gdyn_net::blocks::{decode_geometry, encode_dynamic, encode_static, motion_encoder};
use gdyn_net::BoundParams;

use crate::model::{decode_posed, ModelContext, WeightsMode};

/// Stage-1 loss weights. `eps_sdf` is the rest-space clearance margin the
/// canonical garment must keep from the canonical driver, in meters.
#[derive(Debug, Clone, Copy)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub eps_sdf: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda1: 100.0,
            lambda2: 1e-3,
            eps_sdf: 3e-3,
        }
    }
}

/// Position + Laplacian L1 against a ground-truth frame. Returns
/// (combined, position-only) so training can report raw geometric error.
pub fn reconstruction<T: Real>(
    ctx: &ModelContext,
    g: &mut Graph<T>,
    posed: Var,
    target: &[V3],
) -> (Var, Var) {
    let tgt = g.constant(v3_constant(target));
    let pos = g.l1_mean(posed, tgt);
    let lap = g.custom(
        Rc::new(LaplacianOp {
            mesh: ctx.garment.clone(),
        }),
        &[posed],
    );
    let lap_tgt_rows = ctx
        .garment
        .laplacian(target)
        .expect("target Laplacian over validated mesh");
    let lap_tgt = g.constant(v3_constant(&lap_tgt_rows));
    let lap_l1 = g.l1_mean(lap, lap_tgt);
    (g.add(pos, lap_l1), pos)
}

/// |mean(z²) − 1|: keeps codes on the unit-variance shell so the latent
/// space stays sampleable.
pub fn latent_reg<T: Real>(g: &mut Graph<T>, z: Var) -> Var {
    let sq = g.square(z);
    let m = g.mean(sq);
    let shifted = g.add_scalar(m, T::from_f64(-1.0));
    g.abs(shifted)
}

/// Mean |edge length − rest length| of a canonical-space geometry.
pub fn edge_preservation<T: Real>(
    ctx: &ModelContext,
    g: &mut Graph<T>,
    g_hat: Var,
) -> Var {
    let edges = edge_list(&ctx.garment);
    let rest: Vec<f64> = edges
        .iter()
        .map(|&(a, b)| {
            let pa = ctx.garment.positions[a];
            let pb = ctx.garment.positions[b];
            gdyn_core::vecmath::dist(pa, pb)
        })
        .collect();
    let rest_t = g.constant(TensorData::from_f64_slice(vec![rest.len(), 1], &rest));
    let lens = g.custom(Rc::new(EdgeLengthsOp { edges }), &[g_hat]);
    g.l1_mean(lens, rest_t)
}

/// Σ max(ε − sdf(x_i), 0): total penetration of canonical-space positions
/// into the ε-inflated canonical driver.
pub fn sdf_margin<T: Real>(ctx: &ModelContext, g: &mut Graph<T>, x: Var, eps: f64) -> Var {
    let s = g.custom(Rc::new(SdfOp { sdf: ctx.sdf0.clone() }), &[x]);
    let neg = g.neg(s);
    let margin = g.add_scalar(neg, T::from_f64(eps));
    let hinge = g.relu(margin);
    g.sum(hinge)
}

/// Vars of interest out of one stage-1 sample graph.
pub struct StaticLossVars {
    pub total: Var,
    pub rec: Var,
    /// Position-only half of `rec` (raw meters, for progress reporting).
    pub rec_pos: Var,
    pub rand: Var,
    pub sdf: Var,
    pub reg: Var,
    pub z: Var,
    pub posed: Var,
}

/// Full stage-1 objective for one frame:
/// rec + rand + λ1·(rest-space collision) + λ2·(latent shell).
/// `z_r` is this step's random latent draw; its decode feeds both the edge
/// term and the collision term alongside the reconstructed geometry.
pub fn static_loss<T: Real>(
    ctx: &ModelContext,
    g: &mut Graph<T>,
    p: &BoundParams,
    m_p: Var,
    target: &[V3],
    driver: &DriverFrame,
    z_r: &[f64],
    w: &LossWeights,
) -> StaticLossVars {
    let z = encode_static(&ctx.cfg, g, p, m_p);
    let pv = decode_posed(ctx, g, p, z, driver, WeightsMode::Dynamic);
    let (rec, rec_pos) = reconstruction(ctx, g, pv.posed, target);
    let reg = latent_reg(g, z);

    let zr = g.constant(TensorData::from_f64_slice(vec![1, z_r.len()], z_r));
    let uv = g.constant(ctx.uv_tensor());
    let dr = decode_geometry(&ctx.cfg, g, p, zr, &ctx.sampler, uv);
    let g_hat_r = g.custom(
        Rc::new(FramesApplyOp {
            g0: ctx.garment.positions.clone(),
            frames: ctx.frames0.clone(),
        }),
        &[dr],
    );
    let rand = edge_preservation(ctx, g, g_hat_r);

    let sdf_t = sdf_margin(ctx, g, pv.g_hat, w.eps_sdf);
    let sdf_r = sdf_margin(ctx, g, g_hat_r, w.eps_sdf);
    let sdf = g.add(sdf_t, sdf_r);

    let total = {
        let a = g.add(rec, rand);
        let s1 = g.scale(sdf, T::from_f64(w.lambda1));
        let b = g.add(a, s1);
        let s2 = g.scale(reg, T::from_f64(w.lambda2));
        g.add(b, s2)
    };
    StaticLossVars {
        total,
        rec,
        rec_pos,
        rand,
        sdf,
        reg,
        z,
        posed: pv.posed,
    }
}

/// Ground truth the virtual (zero-motion) sample is held to: the previous
/// frame's garment, driver, and latent code.
pub struct VirtualSample<'a> {
    pub target: &'a [V3],
    pub driver: &'a DriverFrame,
    pub z_star: &'a [f64],
}

pub struct DynamicLossVars {
    pub total: Var,
    pub geo: Var,
    /// Real-sample position term alone (raw meters, for progress reporting).
    pub geo_real: Var,
    pub z_match: Var,
    pub reg: Var,
    pub z_t: Var,
    pub posed_t: Var,
}

/// Stage-2 objective for one frame: geometric L1 + latent matching + λ2·reg,
/// each summed over the real sample and (when present) the virtual sample
/// that feeds the dynamic encoder zero motion features.
#[allow(clippy::too_many_arguments)]
pub fn dynamic_loss<T: Real>(
    ctx: &ModelContext,
    g: &mut Graph<T>,
    p: &BoundParams,
    s_prev: Var,
    m_motion: Var,
    m_inter: Var,
    target_t: &[V3],
    driver_t: &DriverFrame,
    z_star_t: &[f64],
    virtual_sample: Option<VirtualSample<'_>>,
    lambda2: f64,
) -> DynamicLossVars {
    let e_t = motion_encoder(&ctx.cfg, g, p, m_motion, m_inter);
    let z_t = encode_dynamic(&ctx.cfg, g, p, s_prev, e_t);
    let pv_t = decode_posed(ctx, g, p, z_t, driver_t, WeightsMode::Dynamic);
    let zs_t = g.constant(TensorData::from_f64_slice(vec![1, z_star_t.len()], z_star_t));

    let tgt_t = g.constant(v3_constant(target_t));
    let geo_real = g.l1_mean(pv_t.posed, tgt_t);
    let mut geo = geo_real;
    let mut z_match = g.l1_mean(z_t, zs_t);
    let mut reg = latent_reg(g, z_t);

    if let Some(v) = virtual_sample {
        let w = ctx.cfg.map_width;
        let e_zero = g.constant(TensorData::zeros(vec![w, w, ctx.cfg.f_channels()]));
        let z_v = encode_dynamic(&ctx.cfg, g, p, s_prev, e_zero);
        let pv_v = decode_posed(ctx, g, p, z_v, v.driver, WeightsMode::Dynamic);
        let tgt_v = g.constant(v3_constant(v.target));
        let geo_v = g.l1_mean(pv_v.posed, tgt_v);
        let zs_v = g.constant(TensorData::from_f64_slice(vec![1, v.z_star.len()], v.z_star));
        let zm_v = g.l1_mean(z_v, zs_v);
        let reg_v = latent_reg(g, z_v);
        geo = g.add(geo, geo_v);
        z_match = g.add(z_match, zm_v);
        reg = g.add(reg, reg_v);
    }

    let total = {
        let a = g.add(geo, z_match);
        let s = g.scale(reg, T::from_f64(lambda2));
        g.add(a, s)
    };
    DynamicLossVars {
        total,
        geo,
        geo_real,
        z_match,
        reg,
        z_t,
        posed_t: pv_t.posed,
    }
}

/// Flattens V3 rows into a [V, 3] tensor.
pub fn v3_constant<T: Real>(rows: &[V3]) -> TensorData<T> {
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    TensorData::from_f64_slice(vec![rows.len(), 3], &flat)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::tests::tiny_setup;
    use gdyn_ad::gradcheck::{assert_grads_close, seeded};
    use gdyn_core::features::{interaction_forces, motion_features, relative_descriptor};
    use gdyn_core::SignedDistance;
    use gdyn_net::params::init_params;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn jittered(base: &[V3], rng: &mut ChaCha8Rng, amp: f64) -> Vec<V3> {
        base.iter()
            .map(|p| {
                [
                    p[0] + rng.gen_range(-amp..amp),
                    p[1] + rng.gen_range(-amp..amp),
                    p[2] + rng.gen_range(-amp..amp),
                ]
            })
            .collect()
    }

    #[test]
    fn reconstruction_matches_loop_recompute() {
        let ctx = tiny_setup();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = jittered(&ctx.garment.positions, &mut rng, 0.05);
        let b = jittered(&ctx.garment.positions, &mut rng, 0.05);

        let mut g = Graph::<f64>::new();
        let av = g.constant(v3_constant(&a));
        let (rec, rec_pos) = reconstruction(&ctx, &mut g, av, &b);

        // Independent recompute: plain loops over vertices and coordinates.
        let n = (a.len() * 3) as f64;
        let pos_ref: f64 = a
            .iter()
            .zip(&b)
            .map(|(p, q)| (p[0] - q[0]).abs() + (p[1] - q[1]).abs() + (p[2] - q[2]).abs())
            .sum::<f64>()
            / n;
        let la = ctx.garment.laplacian(&a).unwrap();
        let lb = ctx.garment.laplacian(&b).unwrap();
        let lap_ref: f64 = la
            .iter()
            .zip(&lb)
            .map(|(p, q)| (p[0] - q[0]).abs() + (p[1] - q[1]).abs() + (p[2] - q[2]).abs())
            .sum::<f64>()
            / n;
        assert!((g.value(rec_pos).item() - pos_ref).abs() < 1e-12);
        assert!((g.value(rec).item() - (pos_ref + lap_ref)).abs() < 1e-12);
    }

    #[test]
    fn reconstruction_of_uniform_offset_has_no_laplacian_term() {
        let ctx = tiny_setup();
        let u = [0.03, -0.01, 0.02];
        let shifted: Vec<V3> = ctx
            .garment
            .positions
            .iter()
            .map(|p| [p[0] + u[0], p[1] + u[1], p[2] + u[2]])
            .collect();
        let mut g = Graph::<f64>::new();
        let av = g.constant(v3_constant(&shifted));
        let (rec, rec_pos) = reconstruction(&ctx, &mut g, av, &ctx.garment.positions);
        let expect = (u[0].abs() + u[1].abs() + u[2].abs()) / 3.0;
        assert!((g.value(rec_pos).item() - expect).abs() < 1e-12);
        // Laplacians kill constants, so the combined loss equals the
        // position term alone.
        assert!((g.value(rec).item() - expect).abs() < 1e-12);
    }

    #[test]
    fn latent_reg_examples() {
        let mut g = Graph::<f64>::new();
        let unit = g.constant(TensorData::from_f64_slice(vec![1, 4], &[1.0, -1.0, 1.0, -1.0]));
        let zero = g.constant(TensorData::zeros(vec![1, 4]));
        let l_unit = latent_reg(&mut g, unit);
        let l_zero = latent_reg(&mut g, zero);
        assert_eq!(g.value(l_unit).item(), 0.0);
        assert_eq!(g.value(l_zero).item(), 1.0);

        let z = seeded::<f64>(vec![1, 8], 3);
        let ms: f64 = z.data().iter().map(|v| v * v).sum::<f64>() / 8.0;
        let zv = g.constant(z);
        let l = latent_reg(&mut g, zv);
        assert!((g.value(l).item() - (ms - 1.0).abs()).abs() < 1e-12);
    }

    #[test]
    fn edge_preservation_scales_linearly() {
        let ctx = tiny_setup();
        let mut g = Graph::<f64>::new();
        // Rest positions: zero edge error.
        let rest = g.constant(v3_constant(&ctx.garment.positions));
        let l0 = edge_preservation(&ctx, &mut g, rest);
        assert!(g.value(l0).item() < 1e-15);

        // Isotropic scale s: every edge stretches by |s - 1|.
        let s = 1.3;
        let scaled: Vec<V3> = ctx
            .garment
            .positions
            .iter()
            .map(|p| [p[0] * s, p[1] * s, p[2] * s])
            .collect();
        let sv = g.constant(v3_constant(&scaled));
        let ls = edge_preservation(&ctx, &mut g, sv);
        let mean_len: f64 = {
            let edges = edge_list(&ctx.garment);
            let total: f64 = edges
                .iter()
                .map(|&(a, b)| {
                    gdyn_core::vecmath::dist(
                        ctx.garment.positions[a],
                        ctx.garment.positions[b],
                    )
                })
                .sum();
            total / edges.len() as f64
        };
        assert!((g.value(ls).item() - (s - 1.0) * mean_len).abs() < 1e-12);
    }

    #[test]
    fn sdf_margin_matches_loop_recompute() {
        let ctx = tiny_setup();
        let eps = 3e-3;
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        // Mix of points near and far from the driver cylinder.
        let pts: Vec<V3> = (0..40)
            .map(|_| {
                [
                    rng.gen_range(-0.2..0.2),
                    rng.gen_range(-0.4..0.4),
                    rng.gen_range(-0.2..0.2),
                ]
            })
            .collect();
        let mut g = Graph::<f64>::new();
        let x = g.constant(v3_constant(&pts));
        let l = sdf_margin(&ctx, &mut g, x, eps);
        let reference: f64 = pts
            .iter()
            .map(|&p| (eps - ctx.sdf0.signed_distance(p)).max(0.0))
            .sum();
        assert!(reference > 0.0, "test points must include penetrations");
        assert!((g.value(l).item() - reference).abs() < 1e-10);
    }

    /// Rasterized body-relative map of a jittered garment against the
    /// canonical driver frame.
    fn sample_inputs(ctx: &ModelContext, seed: u64) -> (Vec<f64>, Vec<V3>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let target = jittered(&ctx.garment.positions, &mut rng, 0.03);
        let frame = ctx.surface.canonical_frame();
        let rel = relative_descriptor(&target, &frame.seed_positions);
        let map = ctx.raster.apply_f64(&rel, ctx.cfg.input_channels());
        (map, target)
    }

    #[test]
    fn static_loss_combines_terms_with_weights() {
        let ctx = tiny_setup();
        let params = init_params::<f64>(&ctx.cfg, 7, 0.2);
        let (map, target) = sample_inputs(&ctx, 21);
        let z_r = vec![0.5, -1.0, 0.25, 0.0, 1.5, -0.5, 0.75, -0.25];
        let w = LossWeights::default();
        let frame = ctx.surface.canonical_frame();

        let mut g = Graph::<f64>::new();
        let bound = params.bind_constants(&mut g);
        let m = ctx.raw_map_constant(&mut g, &map, ctx.cfg.input_channels());
        let vars = static_loss(&ctx, &mut g, &bound, m, &target, &frame, &z_r, &w);
        let total = g.value(vars.total).item();
        let expect = g.value(vars.rec).item()
            + g.value(vars.rand).item()
            + w.lambda1 * g.value(vars.sdf).item()
            + w.lambda2 * g.value(vars.reg).item();
        assert!((total - expect).abs() < 1e-12);
        assert!(total.is_finite() && total > 0.0);
    }

    #[test]
    fn static_loss_gradients_match_finite_differences() {
        let ctx = tiny_setup();
        let params = init_params::<f64>(&ctx.cfg, 7, 0.2);
        let (map, target) = sample_inputs(&ctx, 22);
        let z_r = vec![0.5, -1.0, 0.25, 0.0, 1.5, -0.5, 0.75, -0.25];
        let w = LossWeights::default();
        let frame = ctx.surface.canonical_frame();

        // Spot-check small tensors across every block; the acceptance suite
        // sweeps all of them.
        for name in ["rho.log", "s.conv0.b", "esta.fc.b", "d.fc.b", "r.fc2.w"] {
            let probe = params.get(name).clone();
            assert_grads_close(&[probe], 1e-5, 1e-6, name, |g, vars| {
                let bound = {
                    let mut b = params.bind_constants(g);
                    b.replace(name, vars[0]);
                    b
                };
                let m = ctx.raw_map_constant(g, &map, ctx.cfg.input_channels());
                static_loss(&ctx, g, &bound, m, &target, &frame, &z_r, &w).total
            });
        }
    }

    /// Builds one dynamic-stage sample from three jittered frames.
    fn dynamic_inputs(
        ctx: &ModelContext,
    ) -> (Vec<f64>, Vec<f64>, Vec<f64>, Vec<V3>, Vec<V3>) {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let g3 = jittered(&ctx.garment.positions, &mut rng, 0.02);
        let g2 = jittered(&g3, &mut rng, 0.01);
        let g1 = jittered(&g2, &mut rng, 0.01);
        let gt = jittered(&g1, &mut rng, 0.01);
        let frame = ctx.surface.canonical_frame();
        let rel = relative_descriptor(&g1, &frame.seed_positions);
        let m_p = ctx.raster.apply_f64(&rel, ctx.cfg.input_channels());
        let mf = motion_features(&g1, &g2, &g3);
        let m_motion = ctx.raster.apply_f64(&mf.channels(), 6);
        let forces = interaction_forces(&g1, &frame, &frame, ctx.sigma);
        let m_inter = ctx.raster.apply_f64(&forces.forces, ctx.cfg.input_channels());
        (m_p, m_motion, m_inter, gt, g1)
    }

    #[test]
    fn dynamic_loss_virtual_term_adds_and_gradchecks() {
        let ctx = tiny_setup();
        let params = init_params::<f64>(&ctx.cfg, 13, 0.2);
        let (m_p, m_motion, m_inter, gt, g1) = dynamic_inputs(&ctx);
        let frame = ctx.surface.canonical_frame();
        let z_star_t = vec![0.2; ctx.cfg.latent_dim];
        let z_star_p = vec![-0.1; ctx.cfg.latent_dim];

        let build = |g: &mut Graph<f64>, bound: &BoundParams, with_virtual: bool| {
            let m_pv = ctx.raw_map_constant(g, &m_p, ctx.cfg.input_channels());
            let s_prev = gdyn_net::blocks::s_block(&ctx.cfg, g, bound, m_pv);
            let mm = ctx.raw_map_constant(g, &m_motion, 6);
            let mi = ctx.raw_map_constant(g, &m_inter, ctx.cfg.input_channels());
            let virt = with_virtual.then_some(VirtualSample {
                target: &g1,
                driver: &frame,
                z_star: &z_star_p,
            });
            dynamic_loss(
                &ctx, g, bound, s_prev, mm, mi, &gt, &frame, &z_star_t, virt, 1e-3,
            )
        };

        let mut ga = Graph::<f64>::new();
        let bound_a = params.bind_constants(&mut ga);
        let with_v = build(&mut ga, &bound_a, true);
        let mut gb = Graph::<f64>::new();
        let bound_b = params.bind_constants(&mut gb);
        let without = build(&mut gb, &bound_b, false);
        let tv = ga.value(with_v.total).item();
        let tw = gb.value(without.total).item();
        assert!(tv > tw, "virtual sample must add loss: {tv} vs {tw}");
        // Both variants share the real-sample path bit for bit.
        assert_eq!(ga.value(with_v.z_t).data(), gb.value(without.z_t).data());

        for name in ["c.conv0.b", "edyn.fc.b", "edyn.conv0.b"] {
            let probe = params.get(name).clone();
            assert_grads_close(&[probe], 1e-5, 1e-6, name, |g, vars| {
                let bound = {
                    let mut b = params.bind_constants(g);
                    b.replace(name, vars[0]);
                    b
                };
                build(g, &bound, true).total
            });
        }
    }
}
