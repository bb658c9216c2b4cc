//! Self-check suites behind `verify --suite ...`: finite-difference
//! gradient checks of every differentiable primitive and the composite
//! objectives, plus structural invariants, all on a built-in tiny instance
//! so a fresh checkout can test itself without datasets or checkpoints.

use std::rc::Rc;
use std::sync::Arc;

use gdyn_ad::gradcheck::{check, seeded, CheckResult};
use gdyn_ad::{Graph, TensorData, Var};
use gdyn_core::container::{load_gdyn, save_gdyn, GdynSequence};
use gdyn_core::diff::{
    edge_list, EdgeLengthsOp, FramesApplyOp, LaplacianOp, LbsPoseOp, RasterizeOp, SampleUvOp,
    SdfOp, SkinWeightsOp,
};
use gdyn_core::features::{interaction_forces, motion_features, relative_descriptor};
use gdyn_core::shapes::{capped_cylinder, grid_sheet, uv_sphere};
use gdyn_core::skinning::{
    apply_local_displacement, partition_of_unity_error, pose, skinning_weights,
};
use gdyn_core::vecmath as vm;
use gdyn_core::vecmath::V3;
use gdyn_core::{DriverFrame, MeshSdf, PartLabel, SampleTable, SeedTransform};
use gdyn_net::params::init_params;
use gdyn_net::{ArchConfig, ParamStore};
use gdyn_sim::{Scene, SceneScript};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::losses::{dynamic_loss, static_loss, LossWeights, VirtualSample};
use crate::model::ModelContext;
use crate::resolver::{collision_loss, ResidualObjective};

/// Pass bar for all finite-difference comparisons.
pub const GRAD_TOL: f64 = 1e-4;
const FD_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct Check {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

impl Check {
    fn graded(name: impl Into<String>, r: &CheckResult, tol: f64) -> Self {
        Self {
            name: name.into(),
            pass: r.passes(tol),
            detail: format!(
                "max rel err {:.3e} over {} elements (tol {tol:.0e})",
                r.max_rel_err, r.evaluated
            ),
        }
    }

    fn judged(name: impl Into<String>, pass: bool, detail: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            pass,
            detail: detail.into(),
        }
    }
}

pub fn all_pass(checks: &[Check]) -> bool {
    checks.iter().all(|c| c.pass)
}

/// The built-in instance every suite runs on: a 36-vertex sheet over a
/// 34-vertex capped cylinder, tiny architecture.
fn tiny_context() -> ModelContext {
    let cfg = ArchConfig::tiny();
    let garment = grid_sheet(6, 6, 0.5, 0.5);
    let driver = capped_cylinder(0.1, 0.6, 8, 4);
    let labels = vec![PartLabel::UpperBody; driver.vertex_count()];
    ModelContext::new(cfg, garment, driver, &labels).expect("built-in instance")
}

fn jitter(base: &[V3], seed: u64, amp: f64) -> Vec<V3> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
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

/// Finite-difference checks for every differentiable primitive, each on a
/// small generic instance (inputs seeded away from relu/abs kinks).
pub fn primitive_checks() -> Vec<Check> {
    let mut out = Vec::new();
    let mut op = |name: &str, inputs: &[TensorData<f64>], build: &dyn Fn(&mut Graph<f64>, &[Var]) -> Var| {
        let r = check(inputs, FD_EPS, build);
        out.push(Check::graded(format!("primitive {name}"), &r, GRAD_TOL));
    };
    let a = seeded::<f64>(vec![3, 4], 1);
    let b = seeded::<f64>(vec![3, 4], 2);

    op("add", &[a.clone(), b.clone()], &|g, v| {
        let x = g.add(v[0], v[1]);
        g.sum(x)
    });
    op("sub", &[a.clone(), b.clone()], &|g, v| {
        let x = g.sub(v[0], v[1]);
        g.sum(x)
    });
    op("mul", &[a.clone(), b.clone()], &|g, v| {
        let x = g.mul(v[0], v[1]);
        g.sum(x)
    });
    op("scale", &[a.clone()], &|g, v| {
        let x = g.scale(v[0], 1.7);
        g.sum(x)
    });
    op("add_scalar", &[a.clone()], &|g, v| {
        let x = g.add_scalar(v[0], 0.3);
        g.sum(x)
    });
    op("neg", &[a.clone()], &|g, v| {
        let x = g.neg(v[0]);
        g.sum(x)
    });
    op("abs", &[a.clone()], &|g, v| {
        let x = g.abs(v[0]);
        g.sum(x)
    });
    op("relu", &[a.clone()], &|g, v| {
        let x = g.relu(v[0]);
        g.sum(x)
    });
    op("leaky_relu", &[a.clone()], &|g, v| {
        let x = g.leaky_relu(v[0], 0.2);
        g.sum(x)
    });
    op("exp", &[a.clone()], &|g, v| {
        let x = g.exp(v[0]);
        g.sum(x)
    });
    op("square", &[a.clone()], &|g, v| {
        let x = g.square(v[0]);
        g.sum(x)
    });
    op("sum", &[a.clone()], &|g, v| g.sum(v[0]));
    op("mean", &[a.clone()], &|g, v| g.mean(v[0]));
    op("l1_mean", &[a.clone(), b.clone()], &|g, v| g.l1_mean(v[0], v[1]));
    op(
        "matmul",
        &[seeded(vec![3, 4], 3), seeded(vec![4, 2], 4)],
        &|g, v| {
            let x = g.matmul(v[0], v[1]);
            g.sum(x)
        },
    );
    op(
        "add_bias_row",
        &[seeded(vec![3, 4], 5), seeded(vec![4], 6)],
        &|g, v| {
            let x = g.add_bias_row(v[0], v[1]);
            g.sum(x)
        },
    );
    op(
        "add_bias_chan",
        &[seeded(vec![4, 4, 3], 7), seeded(vec![3], 8)],
        &|g, v| {
            let x = g.add_bias_chan(v[0], v[1]);
            g.sum(x)
        },
    );
    op(
        "linear",
        &[
            seeded(vec![2, 5], 9),
            seeded(vec![5, 3], 10),
            seeded(vec![3], 11),
        ],
        &|g, v| {
            let x = g.linear(v[0], v[1], v[2]);
            g.sum(x)
        },
    );
    op(
        "conv2d stride 1",
        &[
            seeded(vec![6, 6, 2], 12),
            seeded(vec![3, 3, 2, 3], 13),
            seeded(vec![3], 14),
        ],
        &|g, v| {
            let x = g.conv2d(v[0], v[1], v[2], 1, 1);
            g.sum(x)
        },
    );
    op(
        "conv2d stride 2",
        &[
            seeded(vec![6, 6, 2], 15),
            seeded(vec![3, 3, 2, 3], 16),
            seeded(vec![3], 17),
        ],
        &|g, v| {
            let x = g.conv2d(v[0], v[1], v[2], 2, 1);
            g.sum(x)
        },
    );
    op(
        "conv2d_transpose",
        &[
            seeded(vec![3, 3, 3], 18),
            seeded(vec![3, 3, 2, 3], 19),
            seeded(vec![2], 20),
        ],
        &|g, v| {
            let x = g.conv2d_transpose(v[0], v[1], v[2], 2, 1, 1);
            g.sum(x)
        },
    );
    op("instance_norm", &[seeded(vec![4, 4, 2], 21)], &|g, v| {
        let x = g.instance_norm(v[0], 1e-5);
        g.sum(x)
    });
    op("reshape", &[seeded(vec![3, 4], 22)], &|g, v| {
        let x = g.reshape(v[0], vec![2, 6]);
        let y = g.square(x);
        g.sum(y)
    });
    op(
        "concat_chan",
        &[seeded(vec![4, 4, 2], 23), seeded(vec![4, 4, 3], 24)],
        &|g, v| {
            let x = g.concat_chan(v[0], v[1]);
            let y = g.square(x);
            g.sum(y)
        },
    );
    op(
        "concat_cols",
        &[seeded(vec![2, 3], 25), seeded(vec![2, 2], 26)],
        &|g, v| {
            let x = g.concat_cols(v[0], v[1]);
            let y = g.square(x);
            g.sum(y)
        },
    );

    // Geometry-aware custom ops on the built-in meshes.
    let ctx = tiny_context();
    let v_count = ctx.vertex_count();
    op(
        "rasterize",
        &[seeded(vec![v_count, 2], 27)],
        &{
            let table = ctx.raster.clone();
            move |g: &mut Graph<f64>, v: &[Var]| {
                let x = g.custom(Rc::new(RasterizeOp { table: table.clone() }), &[v[0]]);
                let y = g.square(x);
                g.sum(y)
            }
        },
    );
    op(
        "sample_uv",
        &[seeded(vec![8, 8, 2], 28)],
        &{
            let table: Arc<SampleTable> = ctx.theta_sampler.clone();
            move |g: &mut Graph<f64>, v: &[Var]| {
                let x = g.custom(Rc::new(SampleUvOp { table: table.clone() }), &[v[0]]);
                let y = g.square(x);
                g.sum(y)
            }
        },
    );
    {
        // Query points on a shell around the sphere, away from the surface
        // so the closest-face assignment is stable under perturbation.
        let sphere = Arc::new(MeshSdf::build(&uv_sphere(0.2, 10, 12)));
        let dirs = seeded::<f64>(vec![6, 3], 29);
        let pts: Vec<f64> = dirs
            .data()
            .chunks_exact(3)
            .flat_map(|d| {
                let n = vm::normalized([d[0], d[1], d[2]]).unwrap();
                [n[0] * 0.35, n[1] * 0.35, n[2] * 0.35]
            })
            .collect();
        op(
            "sdf",
            &[TensorData::new(vec![6, 3], pts)],
            &{
                let sphere = sphere.clone();
                move |g: &mut Graph<f64>, v: &[Var]| {
                    let x = g.custom(Rc::new(SdfOp { sdf: sphere.clone() }), &[v[0]]);
                    let y = g.square(x);
                    g.sum(y)
                }
            },
        );
    }
    op(
        "laplacian",
        &[seeded(vec![v_count, 3], 30)],
        &{
            let mesh = ctx.garment.clone();
            move |g: &mut Graph<f64>, v: &[Var]| {
                let x = g.custom(Rc::new(LaplacianOp { mesh: mesh.clone() }), &[v[0]]);
                let y = g.square(x);
                g.sum(y)
            }
        },
    );
    op(
        "frames_apply",
        &[seeded(vec![v_count, 3], 31)],
        &{
            let g0 = ctx.garment.positions.clone();
            let frames = ctx.frames0.clone();
            move |g: &mut Graph<f64>, v: &[Var]| {
                let x = g.custom(
                    Rc::new(FramesApplyOp {
                        g0: g0.clone(),
                        frames: frames.clone(),
                    }),
                    &[v[0]],
                );
                let y = g.square(x);
                g.sum(y)
            }
        },
    );
    {
        // Softmax weights sum to one per row, so probe through a random
        // linear functional instead of a plain sum.
        let positions = crate::losses::v3_constant::<f64>(&jitter(&ctx.garment.positions, 32, 0.02));
        let log_rho = TensorData::new(vec![1, ctx.cfg.part_count], vec![0.2f64.ln(); ctx.cfg.part_count]);
        let probe_mat = seeded::<f64>(vec![v_count, ctx.surface.seed_count()], 33);
        op(
            "skin_weights",
            &[positions.clone(), log_rho.clone()],
            &{
                let seeds0 = ctx.surface.seed_positions.clone();
                let seed_parts = ctx.seed_parts.clone();
                let part_count = ctx.cfg.part_count;
                let probe_mat = probe_mat.clone();
                move |g: &mut Graph<f64>, v: &[Var]| {
                    let w = g.custom(
                        Rc::new(SkinWeightsOp {
                            seeds0: seeds0.clone(),
                            seed_parts: seed_parts.clone(),
                            part_count,
                        }),
                        &[v[0], v[1]],
                    );
                    let c = g.constant(probe_mat.clone());
                    let x = g.mul(w, c);
                    g.sum(x)
                }
            },
        );
        // Non-identity transforms so the pose depends on the weights.
        let transforms: Vec<SeedTransform> = (0..ctx.surface.seed_count())
            .map(|j| SeedTransform {
                rotation: vm::rotation_about_axis(
                    vm::normalized([0.2, 1.0, 0.3 * (j as f64 + 1.0)]).unwrap(),
                    0.3 + 0.1 * j as f64,
                ),
                translation: [0.01 * j as f64, -0.02, 0.015],
            })
            .collect();
        let weights_in = seeded::<f64>(vec![v_count, ctx.surface.seed_count()], 34);
        op(
            "lbs_pose",
            &[positions, weights_in],
            &{
                let seeds0 = ctx.surface.seed_positions.clone();
                let transforms = transforms.clone();
                move |g: &mut Graph<f64>, v: &[Var]| {
                    let x = g.custom(
                        Rc::new(LbsPoseOp {
                            seeds0: seeds0.clone(),
                            transforms: transforms.clone(),
                        }),
                        &[v[0], v[1]],
                    );
                    let y = g.square(x);
                    g.sum(y)
                }
            },
        );
    }
    op(
        "edge_lengths",
        &[crate::losses::v3_constant::<f64>(&jitter(
            &ctx.garment.positions,
            35,
            0.02,
        ))],
        &{
            let edges = edge_list(&ctx.garment);
            move |g: &mut Graph<f64>, v: &[Var]| {
                let x = g.custom(Rc::new(EdgeLengthsOp { edges: edges.clone() }), &[v[0]]);
                g.sum(x)
            }
        },
    );
    out
}

/// Finite-difference check of the resolver objective with respect to the
/// residual map.
pub fn resolver_gradient_check() -> Check {
    let ctx = tiny_context();
    // Shift off the driver so no tangent-plane offset sits exactly at the
    // hinge kink.
    let g_hat: Vec<V3> = ctx
        .garment
        .positions
        .iter()
        .map(|p| vm::add(*p, [0.013, 0.007, 0.011]))
        .collect();
    let frame = ctx.surface.canonical_frame();
    let log_rho = TensorData::<f64>::from_f64_slice(
        vec![1, ctx.cfg.part_count],
        &vec![ctx.sigma.ln(); ctx.cfg.part_count],
    );
    let seed_rho = vec![ctx.sigma; ctx.surface.seed_count()];
    let zero_d = vec![[0.0; 3]; g_hat.len()];
    let (base_posed, _, _) = gdyn_core::skinning::pose_with_residual(
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
    let mut theta = seeded::<f64>(vec![w, w, 3], 36);
    for v in theta.data_mut() {
        *v *= 0.01;
    }
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
    let r = check(&[theta], 1e-6, |g, vars| objective.build(g, vars[0]));
    Check::graded("resolver objective grad Θ", &r, GRAD_TOL)
}

/// Sweeps every trainable parameter of the tiny architecture through its
/// composite loss: stage-1 parameters through the static objective, the
/// motion/dynamic encoders through the stage-2 objective with a virtual
/// sample. Parallel over parameters; each check rebuilds its own graphs.
pub fn full_gradient_sweep() -> Vec<Check> {
    let ctx = tiny_context();
    let params = init_params::<f64>(&ctx.cfg, 7, 0.2);
    // A rigidly moved driver, so the pose depends on the skinning weights
    // and the ρ gradient is exercised end to end.
    let rot = vm::rotation_about_axis(vm::normalized([0.25, 1.0, 0.4]).unwrap(), 0.35);
    let shift = [0.03, -0.02, 0.04];
    let moved: Vec<V3> = ctx
        .surface
        .mesh
        .positions
        .iter()
        .map(|p| vm::add(vm::mat_vec(&rot, *p), shift))
        .collect();
    let frame = ctx.surface.pose(&moved, None).expect("rigid driver pose");
    // Previous frame: the same motion a step earlier, so relative seed
    // velocities stay at physical per-frame scale.
    let rot_prev = vm::rotation_about_axis(vm::normalized([0.25, 1.0, 0.4]).unwrap(), 0.33);
    let moved_prev: Vec<V3> = ctx
        .surface
        .mesh
        .positions
        .iter()
        .map(|p| vm::add(vm::mat_vec(&rot_prev, *p), [0.028, -0.019, 0.038]))
        .collect();
    let frame_prev = ctx.surface.pose(&moved_prev, None).expect("rigid driver pose");
    let weights = LossWeights::default();

    // Static-side inputs.
    let target = jitter(&ctx.garment.positions, 22, 0.03);
    let rel = relative_descriptor(&target, &frame.seed_positions);
    let map_p = ctx.raster.apply_f64(&rel, ctx.cfg.input_channels());
    let z_r: Vec<f64> = (0..ctx.cfg.latent_dim)
        .map(|i| 0.25 * (i as f64 + 1.0) * if i % 2 == 0 { 1.0 } else { -1.0 })
        .collect();

    // Dynamic-side inputs: a jittered three-frame history.
    let g1 = jitter(&ctx.garment.positions, 41, 0.02);
    let g2 = jitter(&ctx.garment.positions, 42, 0.02);
    let g3 = jitter(&ctx.garment.positions, 43, 0.02);
    let d_target = jitter(&ctx.garment.positions, 44, 0.02);
    let m_motion = ctx.raster.apply_f64(&motion_features(&g1, &g2, &g3).channels(), 6);
    let m_inter = ctx.raster.apply_f64(
        &interaction_forces(&g1, &frame, &frame_prev, ctx.sigma).forces,
        ctx.cfg.input_channels(),
    );
    let w = ctx.cfg.map_width;
    let s_prev = seeded::<f64>(vec![w, w, ctx.cfg.f_channels()], 45);
    let z_star: Vec<f64> = (0..ctx.cfg.latent_dim).map(|i| 0.1 * i as f64 - 0.3).collect();
    let z_star_prev: Vec<f64> = (0..ctx.cfg.latent_dim).map(|i| 0.2 - 0.1 * i as f64).collect();

    let names = params.trainable_names();
    names
        .par_iter()
        .map(|name| {
            let probe = params.get(name).clone();
            let dynamic_side = name.starts_with("c.") || name.starts_with("edyn.");
            let r = if dynamic_side {
                check(&[probe], FD_EPS, |g, vars| {
                    let bound = {
                        let mut b = params.bind_constants(g);
                        b.replace(name, vars[0]);
                        b
                    };
                    let sp = g.constant(s_prev.clone());
                    let mm = ctx.raw_map_constant(g, &m_motion, 6);
                    let mi = ctx.raw_map_constant(g, &m_inter, ctx.cfg.input_channels());
                    let virt = VirtualSample {
                        target: &g1,
                        driver: &frame,
                        z_star: &z_star_prev,
                    };
                    dynamic_loss(
                        &ctx,
                        g,
                        &bound,
                        sp,
                        mm,
                        mi,
                        &d_target,
                        &frame,
                        &z_star,
                        Some(virt),
                        weights.lambda2,
                    )
                    .total
                })
            } else {
                check(&[probe], FD_EPS, |g, vars| {
                    let bound = {
                        let mut b = params.bind_constants(g);
                        b.replace(name, vars[0]);
                        b
                    };
                    let m = ctx.raw_map_constant(g, &map_p, ctx.cfg.input_channels());
                    static_loss(&ctx, g, &bound, m, &target, &frame, &z_r, &weights).total
                })
            };
            let side = if dynamic_side { "dynamic" } else { "static" };
            Check::graded(format!("{side}-loss grad {name}"), &r, GRAD_TOL)
        })
        .collect()
}

/// Everything `--suite gradients` runs.
pub fn gradients_suite() -> Vec<Check> {
    let mut checks = primitive_checks();
    checks.push(resolver_gradient_check());
    checks.extend(full_gradient_sweep());
    checks
}

fn skinning_invariants(out: &mut Vec<Check>) {
    let ctx = tiny_context();
    let g_hat = jitter(&ctx.garment.positions, 50, 0.02);
    let n = ctx.surface.seed_count();
    let rho = vec![0.2; n];
    let weights = skinning_weights(&g_hat, &ctx.surface.seed_positions, &rho);

    let pou = partition_of_unity_error(&weights, n);
    out.push(Check::judged(
        "skinning partition of unity",
        pou < 1e-6,
        format!("max |Σw - 1| = {pou:.3e} (tol 1e-6)"),
    ));

    // Rigid motion applied to every seed transform moves the posed garment
    // rigidly.
    let rot = vm::rotation_about_axis(vm::normalized([0.3, 0.9, 0.1]).unwrap(), 0.7);
    let t = [0.02, -0.01, 0.03];
    let transforms: Vec<SeedTransform> = ctx
        .surface
        .seed_positions
        .iter()
        .map(|b| SeedTransform {
            rotation: rot,
            translation: vm::sub(vm::add(vm::mat_vec(&rot, *b), t), *b),
        })
        .collect();
    let frame = DriverFrame {
        transforms,
        seed_positions: ctx
            .surface
            .seed_positions
            .iter()
            .map(|b| vm::add(vm::mat_vec(&rot, *b), t))
            .collect(),
        seed_normals: ctx
            .surface
            .canonical_frame()
            .seed_normals
            .iter()
            .map(|nrm| vm::mat_vec(&rot, *nrm))
            .collect(),
    };
    let posed = pose(&g_hat, &weights, &ctx.surface.seed_positions, &frame);
    let mut err: f64 = 0.0;
    for (p, q) in g_hat.iter().zip(&posed) {
        err = err.max(vm::dist(vm::add(vm::mat_vec(&rot, *p), t), *q));
    }
    out.push(Check::judged(
        "skinning rigid equivariance",
        err < 1e-6,
        format!("max deviation {err:.3e} m (tol 1e-6)"),
    ));

    let identity = pose(
        &g_hat,
        &weights,
        &ctx.surface.seed_positions,
        &ctx.surface.canonical_frame(),
    );
    let zero_disp = apply_local_displacement(
        &ctx.garment.positions,
        &ctx.frames0,
        &vec![[0.0; 3]; ctx.vertex_count()],
    );
    out.push(Check::judged(
        "identity pose and zero displacement are exact",
        identity == g_hat && zero_disp == ctx.garment.positions,
        "bitwise comparison",
    ));
}

fn serialization_invariants(out: &mut Vec<Check>) {
    let dir = std::env::temp_dir().join(format!("gdyn-verify-{}", std::process::id()));
    if let Err(e) = std::fs::create_dir_all(&dir) {
        out.push(Check::judged(
            "serialization temp dir",
            false,
            format!("cannot create {}: {e}", dir.display()),
        ));
        return;
    }

    let cfg = ArchConfig::tiny();
    let params = init_params::<f32>(&cfg, 3, 0.2);
    let stem = dir.join("ckpt");
    let round_trip = params.save(&stem, &cfg).map_err(|e| e.to_string()).and_then(|_| {
        let (loaded, arch) =
            ParamStore::<f32>::load(&stem, Some(&cfg)).map_err(|e| e.to_string())?;
        if arch != cfg {
            return Err("arch mismatch after load".into());
        }
        for name in params.names() {
            if loaded.get(name).data() != params.get(name).data() {
                return Err(format!("tensor {name} not bitwise equal"));
            }
            if loaded.is_trainable(name) != params.is_trainable(name) {
                return Err(format!("trainability of {name} changed"));
            }
        }
        Ok(())
    });
    out.push(match round_trip {
        Ok(()) => Check::judged("checkpoint round-trip", true, "bitwise equal after save/load"),
        Err(e) => Check::judged("checkpoint round-trip", false, e),
    });

    let tamper = std::fs::read(stem.with_extension("bin"))
        .map_err(|e| e.to_string())
        .and_then(|mut blob| {
            blob[7] ^= 0xFF;
            std::fs::write(stem.with_extension("bin"), blob).map_err(|e| e.to_string())
        });
    let detected = match tamper {
        Ok(()) => ParamStore::<f32>::load(&stem, Some(&cfg)).is_err(),
        Err(_) => false,
    };
    out.push(Check::judged(
        "checkpoint tamper detection",
        detected,
        "flipped byte in blob must fail the checksum",
    ));

    let mut seq = GdynSequence::new(5);
    for f in 0..3 {
        seq.push_f64(&jitter(&[[0.0; 3]; 5], 60 + f, 1.0));
    }
    let path = dir.join("seq.gdyn");
    let gdyn_rt = save_gdyn(&path, &seq).map_err(|e| e.to_string()).and_then(|_| {
        let loaded = load_gdyn(&path).map_err(|e| e.to_string())?;
        if loaded.frames == seq.frames {
            Ok(())
        } else {
            Err("frames differ after round-trip".into())
        }
    });
    out.push(match gdyn_rt {
        Ok(()) => Check::judged("gdyn container round-trip", true, "frames bitwise equal"),
        Err(e) => Check::judged("gdyn container round-trip", false, e),
    });

    let _ = std::fs::remove_dir_all(&dir);
}

fn simulation_invariants(out: &mut Vec<Check>) {
    let script = SceneScript {
        frames: 6,
        resolution: 8,
        seed_count: 8,
        map_width: 16,
        ..SceneScript::default()
    };
    let run = || Scene::new(script.clone()).and_then(|s| s.simulate());
    let pass = match (run(), run()) {
        (Ok(a), Ok(b)) => {
            a.driver.frames == b.driver.frames
                && a.layers.len() == b.layers.len()
                && a.layers
                    .iter()
                    .zip(&b.layers)
                    .all(|(x, y)| x.frames == y.frames)
        }
        _ => false,
    };
    out.push(Check::judged(
        "simulation determinism",
        pass,
        "two runs of the same script are bitwise identical",
    ));
}

/// Everything `--suite invariants` runs.
pub fn invariants_suite() -> Vec<Check> {
    let mut out = Vec::new();
    skinning_invariants(&mut out);
    serialization_invariants(&mut out);
    simulation_invariants(&mut out);
    out
}
