//! Deformation model: local-frame displacements, distance-kernel skinning
//! weights, and linear blend skinning against driver seed transforms.
//!
//! These are the plain f64 reference paths; the autodiff wrappers in
//! [`crate::diff`] call back into the same math.

use crate::body::DriverFrame;
use crate::vecmath::{self as vm, M3, V3};

/// ĝ_i = g0_i + H_i d_i with H columns (tangent, bitangent, normal), so a
/// displacement (0, 0, δ) moves the vertex δ along its canonical normal.
pub fn apply_local_displacement(g0: &[V3], frames: &[M3], d: &[V3]) -> Vec<V3> {
    assert_eq!(g0.len(), frames.len());
    assert_eq!(g0.len(), d.len());
    g0.iter()
        .zip(frames)
        .zip(d)
        .map(|((p, h), di)| vm::add(*p, vm::mat_vec(h, *di)))
        .collect()
}

/// Distance-kernel weights: w_ij ∝ exp(-|ĝ_i - b0_j|² / 2ρ_j²), normalized
/// over seeds. Evaluated as a softmax of the exponents with the per-vertex
/// max subtracted, so the largest term is always exp(0) = 1 and the
/// normalizer cannot underflow. Returns a flat V x N row-major buffer.
pub fn skinning_weights(g_hat: &[V3], seeds0: &[V3], seed_rho: &[f64]) -> Vec<f64> {
    let n = seeds0.len();
    assert_eq!(seed_rho.len(), n);
    assert!(n > 0, "at least one seed");
    assert!(seed_rho.iter().all(|&r| r > 0.0), "kernel radii positive");
    let mut weights = vec![0.0; g_hat.len() * n];
    let mut logits = vec![0.0; n];
    for (i, g) in g_hat.iter().enumerate() {
        let mut max_logit = f64::NEG_INFINITY;
        for j in 0..n {
            let l = -vm::dist2(*g, seeds0[j]) / (2.0 * seed_rho[j] * seed_rho[j]);
            logits[j] = l;
            if l > max_logit {
                max_logit = l;
            }
        }
        let row = &mut weights[i * n..(i + 1) * n];
        let mut total = 0.0;
        for j in 0..n {
            let e = (logits[j] - max_logit).exp();
            row[j] = e;
            total += e;
        }
        for w in row.iter_mut() {
            *w /= total;
        }
    }
    weights
}

/// Linear blend skinning. Evaluated in delta form,
///   g_i = ĝ_i + Σ_j w_ij ((R_j - I)(ĝ_i - b0_j) + T_j),
/// which is algebraically the weighted sum of R_j(ĝ_i - b0_j) + b0_j + T_j
/// when weights sum to 1, but reproduces ĝ bitwise under identity
/// transforms.
pub fn pose(g_hat: &[V3], weights: &[f64], seeds0: &[V3], driver: &DriverFrame) -> Vec<V3> {
    let n = seeds0.len();
    assert_eq!(driver.transforms.len(), n);
    assert_eq!(weights.len(), g_hat.len() * n);
    g_hat
        .iter()
        .enumerate()
        .map(|(i, g)| {
            let row = &weights[i * n..(i + 1) * n];
            let mut acc = *g;
            for (j, w) in row.iter().enumerate() {
                let t = &driver.transforms[j];
                let rel = vm::sub(*g, seeds0[j]);
                let delta = vm::add(
                    vm::sub(vm::mat_vec(&t.rotation, rel), rel),
                    t.translation,
                );
                acc = vm::add(acc, vm::scale(delta, *w));
            }
            acc
        })
        .collect()
}

/// Residual-corrected pose: ǧ = ĝ + H θ, weights recomputed from ǧ, then
/// blend skinning. Returns the posed positions together with the corrected
/// canonical positions and the recomputed weights (the resolver needs all
/// three).
pub fn pose_with_residual(
    g_hat: &[V3],
    theta: &[V3],
    frames: &[M3],
    seeds0: &[V3],
    seed_rho: &[f64],
    driver: &DriverFrame,
) -> (Vec<V3>, Vec<V3>, Vec<f64>) {
    let g_check = apply_local_displacement(g_hat, frames, theta);
    let weights = skinning_weights(&g_check, seeds0, seed_rho);
    let posed = pose(&g_check, &weights, seeds0, driver);
    (posed, g_check, weights)
}

/// Max deviation of any per-vertex weight row from summing to one.
pub fn partition_of_unity_error(weights: &[f64], seed_count: usize) -> f64 {
    weights
        .chunks_exact(seed_count)
        .map(|row| (row.iter().sum::<f64>() - 1.0).abs())
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::body::SeedTransform;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_frame(rng: &mut ChaCha8Rng) -> M3 {
        let axis = vm::normalized([
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0f64),
        ])
        .unwrap_or([0.0, 0.0, 1.0]);
        vm::rotation_about_axis(axis, rng.gen_range(-3.0..3.0))
    }

    fn random_points(rng: &mut ChaCha8Rng, n: usize) -> Vec<V3> {
        (0..n)
            .map(|_| {
                [
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                ]
            })
            .collect()
    }

    #[test]
    fn zero_displacement_is_bitwise_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let g0 = random_points(&mut rng, 20);
        let frames: Vec<M3> = (0..20).map(|_| random_frame(&mut rng)).collect();
        let d = vec![[0.0; 3]; 20];
        let g_hat = apply_local_displacement(&g0, &frames, &d);
        assert_eq!(g_hat, g0);
    }

    #[test]
    fn normal_displacement_moves_along_normal() {
        let g0 = vec![[1.0, 2.0, 3.0]];
        let n = vm::normalized([0.3, -0.5, 0.8]).unwrap();
        let t = vm::normalized(vm::cross(n, [1.0, 0.0, 0.0])).unwrap();
        let b = vm::cross(n, t);
        let frames = vec![vm::from_cols(t, b, n)];
        let delta = 0.07;
        let g_hat = apply_local_displacement(&g0, &frames, &[[0.0, 0.0, delta]]);
        let expect = vm::add(g0[0], vm::scale(n, delta));
        assert!(vm::dist(g_hat[0], expect) < 1e-15);
    }

    #[test]
    fn orthonormal_frames_preserve_displacement_length() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let g0 = random_points(&mut rng, 30);
        let frames: Vec<M3> = (0..30).map(|_| random_frame(&mut rng)).collect();
        let d = random_points(&mut rng, 30);
        let g_hat = apply_local_displacement(&g0, &frames, &d);
        for i in 0..30 {
            let moved = vm::dist(g_hat[i], g0[i]);
            assert!((moved - vm::norm(d[i])).abs() < 1e-12);
        }
    }

    #[test]
    fn weight_degenerate_and_symmetric_cases() {
        // Single seed: weight 1 everywhere.
        let w = skinning_weights(&[[5.0, 0.0, 0.0]], &[[0.0; 3]], &[0.3]);
        assert_eq!(w, vec![1.0]);

        // Equidistant from two seeds with equal radii: exactly half each.
        let seeds = vec![[-1.0, 0.0, 0.0], [1.0, 0.0, 0.0]];
        let w = skinning_weights(&[[0.0, 0.7, 0.0]], &seeds, &[0.4, 0.4]);
        assert!((w[0] - 0.5).abs() < 1e-12 && (w[1] - 0.5).abs() < 1e-12);

        // Vanishing radius concentrates all weight on the nearest seed.
        let w = skinning_weights(&[[0.3, 0.0, 0.0]], &seeds, &[0.02, 0.02]);
        assert!(w[1] > 1.0 - 1e-6, "nearest seed weight {}", w[1]);
    }

    #[test]
    fn weights_partition_unity_even_far_away() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let seeds = random_points(&mut rng, 12);
        let rho: Vec<f64> = (0..12).map(|_| rng.gen_range(0.05..0.5)).collect();
        // Garment pushed very far so raw kernels underflow without the
        // max-shift.
        let garment: Vec<V3> = random_points(&mut rng, 40)
            .into_iter()
            .map(|p| vm::add(p, [500.0, 0.0, 0.0]))
            .collect();
        let w = skinning_weights(&garment, &seeds, &rho);
        assert!(w.iter().all(|v| v.is_finite() && *v >= 0.0));
        assert!(partition_of_unity_error(&w, 12) < 1e-6);
    }

    #[test]
    fn identity_transforms_reproduce_canonical_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let g_hat = random_points(&mut rng, 25);
        let seeds0 = random_points(&mut rng, 6);
        let rho = vec![0.3; 6];
        let w = skinning_weights(&g_hat, &seeds0, &rho);
        let driver = DriverFrame {
            transforms: vec![SeedTransform::IDENTITY; 6],
            seed_positions: seeds0.clone(),
            seed_normals: vec![[0.0, 0.0, 1.0]; 6],
        };
        let posed = pose(&g_hat, &w, &seeds0, &driver);
        assert_eq!(posed, g_hat, "identity pose must be bitwise exact");
    }

    #[test]
    fn shared_rigid_motion_passes_through_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let g_hat = random_points(&mut rng, 15);
        let seeds0 = random_points(&mut rng, 5);
        let q = random_frame(&mut rng);
        let u = [0.4, -0.2, 0.9];
        let transforms: Vec<SeedTransform> = seeds0
            .iter()
            .map(|b0| SeedTransform {
                rotation: q,
                translation: vm::sub(vm::add(vm::mat_vec(&q, *b0), u), *b0),
            })
            .collect();
        let driver = DriverFrame {
            transforms,
            seed_positions: seeds0
                .iter()
                .map(|b0| vm::add(vm::mat_vec(&q, *b0), u))
                .collect(),
            seed_normals: vec![[0.0, 0.0, 1.0]; 5],
        };
        // Arbitrary (normalized) weights must not matter.
        let w = skinning_weights(&g_hat, &seeds0, &[0.2, 0.9, 0.1, 0.5, 0.33]);
        let posed = pose(&g_hat, &w, &seeds0, &driver);
        for (p, g) in posed.iter().zip(&g_hat) {
            let expect = vm::add(vm::mat_vec(&q, *g), u);
            assert!(vm::dist(*p, expect) < 1e-6);
        }
    }

    #[test]
    fn translation_blend_averages_offsets() {
        let g_hat = vec![[0.0, 1.0, 0.0]];
        let seeds0 = vec![[-1.0, 0.0, 0.0], [1.0, 0.0, 0.0]];
        let t1 = [0.2, 0.0, 0.0];
        let t2 = [0.0, 0.0, 0.6];
        let driver = DriverFrame {
            transforms: vec![
                SeedTransform {
                    rotation: vm::M3_ID,
                    translation: t1,
                },
                SeedTransform {
                    rotation: vm::M3_ID,
                    translation: t2,
                },
            ],
            seed_positions: vec![vm::add(seeds0[0], t1), vm::add(seeds0[1], t2)],
            seed_normals: vec![[0.0, 0.0, 1.0]; 2],
        };
        let posed = pose(&g_hat, &[0.5, 0.5], &seeds0, &driver);
        let expect = vm::add(g_hat[0], vm::scale(vm::add(t1, t2), 0.5));
        assert!(vm::dist(posed[0], expect) < 1e-15);
    }

    #[test]
    fn zero_residual_matches_plain_pose() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let g_hat = random_points(&mut rng, 10);
        let frames: Vec<M3> = (0..10).map(|_| random_frame(&mut rng)).collect();
        let seeds0 = random_points(&mut rng, 4);
        let rho = vec![0.25; 4];
        let transforms: Vec<SeedTransform> = (0..4)
            .map(|_| SeedTransform {
                rotation: random_frame(&mut rng),
                translation: [
                    rng.gen_range(-0.2..0.2),
                    rng.gen_range(-0.2..0.2),
                    rng.gen_range(-0.2..0.2),
                ],
            })
            .collect();
        let driver = DriverFrame {
            transforms,
            seed_positions: seeds0.clone(),
            seed_normals: vec![[0.0, 0.0, 1.0]; 4],
        };
        let theta = vec![[0.0; 3]; 10];
        let (with_residual, g_check, w_re) =
            pose_with_residual(&g_hat, &theta, &frames, &seeds0, &rho, &driver);
        let w = skinning_weights(&g_hat, &seeds0, &rho);
        let plain = pose(&g_hat, &w, &seeds0, &driver);
        assert_eq!(g_check, g_hat);
        assert_eq!(w, w_re);
        assert_eq!(with_residual, plain);
    }
}
