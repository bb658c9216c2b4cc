//! Per-vertex network inputs: seed-relative position descriptors, garment
//! motion (velocity/acceleration), and body interaction forces.
//!
//! All outputs are flat row-major `[vertex][seed*3 + axis]` (or `[axis]`)
//! buffers ready for UV rasterization.

use crate::body::DriverFrame;
use crate::vecmath::{self as vm, V3};

/// Stacked seed-relative offsets: row i holds g_i - b_j for every seed j,
/// so the buffer is V x 3N. Invariant to joint rigid translation of garment
/// and body.
pub fn relative_descriptor(garment: &[V3], seed_positions: &[V3]) -> Vec<f64> {
    let n = seed_positions.len();
    let mut out = vec![0.0; garment.len() * 3 * n];
    for (i, g) in garment.iter().enumerate() {
        let row = &mut out[i * 3 * n..(i + 1) * 3 * n];
        for (j, b) in seed_positions.iter().enumerate() {
            row[j * 3] = g[0] - b[0];
            row[j * 3 + 1] = g[1] - b[1];
            row[j * 3 + 2] = g[2] - b[2];
        }
    }
    out
}

/// Velocity and acceleration per vertex in unit-frame time, from the three
/// most recent garment frames. `valid` is false when the caller had to pad
/// missing history (values are then zero).
#[derive(Debug, Clone)]
pub struct MotionFeatures {
    pub velocity: Vec<V3>,
    pub acceleration: Vec<V3>,
    pub valid: bool,
}

impl MotionFeatures {
    pub fn zeros(vertex_count: usize) -> Self {
        Self {
            velocity: vec![[0.0; 3]; vertex_count],
            acceleration: vec![[0.0; 3]; vertex_count],
            valid: false,
        }
    }

    /// Interleaves to 6 channels per vertex: (vx, vy, vz, ax, ay, az).
    pub fn channels(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.velocity.len() * 6);
        for (v, a) in self.velocity.iter().zip(&self.acceleration) {
            out.extend_from_slice(v);
            out.extend_from_slice(a);
        }
        out
    }
}

/// Backward differences at Δt = 1 frame: V = G_{t-1} - G_{t-2},
/// V̇ = G_{t-1} - 2 G_{t-2} + G_{t-3}.
pub fn motion_features(g_tm1: &[V3], g_tm2: &[V3], g_tm3: &[V3]) -> MotionFeatures {
    assert_eq!(g_tm1.len(), g_tm2.len());
    assert_eq!(g_tm1.len(), g_tm3.len());
    let velocity = g_tm1
        .iter()
        .zip(g_tm2)
        .map(|(a, b)| vm::sub(*a, *b))
        .collect();
    let acceleration = g_tm1
        .iter()
        .zip(g_tm2.iter().zip(g_tm3))
        .map(|(a, (b, c))| {
            [
                a[0] - 2.0 * b[0] + c[0],
                a[1] - 2.0 * b[1] + c[1],
                a[2] - 2.0 * b[2] + c[2],
            ]
        })
        .collect();
    MotionFeatures {
        velocity,
        acceleration,
        valid: true,
    }
}

/// Per-vertex, per-seed interaction forces, flat V x 3N like the relative
/// descriptor. A force fires only when the vertex sits behind the seed's
/// current tangent plane; its magnitude is the penetration depth gated by a
/// Gaussian on the distance to the seed's previous position.
#[derive(Debug, Clone)]
pub struct InteractionForces {
    pub seed_count: usize,
    pub forces: Vec<f64>,
}

pub fn interaction_forces(
    g_prev: &[V3],
    driver_t: &DriverFrame,
    driver_tm1: &DriverFrame,
    sigma: f64,
) -> InteractionForces {
    assert!(sigma > 0.0, "interaction length scale must be positive");
    let n = driver_t.seed_positions.len();
    assert_eq!(driver_tm1.seed_positions.len(), n);
    let inv_two_sigma_sq = 1.0 / (2.0 * sigma * sigma);
    let mut forces = vec![0.0; g_prev.len() * 3 * n];
    for (i, g) in g_prev.iter().enumerate() {
        let row = &mut forces[i * 3 * n..(i + 1) * 3 * n];
        for j in 0..n {
            let nj = driver_t.seed_normals[j];
            let q = vm::dot(vm::sub(*g, driver_t.seed_positions[j]), nj);
            if q >= 0.0 {
                continue;
            }
            let d2 = vm::dist2(*g, driver_tm1.seed_positions[j]);
            let gate = (-d2 * inv_two_sigma_sq).exp();
            let mag = gate * (-q);
            row[j * 3] = mag * nj[0];
            row[j * 3 + 1] = mag * nj[1];
            row[j * 3 + 2] = mag * nj[2];
        }
    }
    InteractionForces {
        seed_count: n,
        forces,
    }
}

/// Mean distance from canonical garment vertices to their nearest canonical
/// seed; the default σ for the interaction Gaussian.
pub fn mean_nearest_seed_distance(garment: &[V3], seed_positions: &[V3]) -> f64 {
    assert!(!garment.is_empty() && !seed_positions.is_empty());
    let total: f64 = garment
        .iter()
        .map(|g| {
            seed_positions
                .iter()
                .map(|b| vm::norm(vm::sub(*g, *b)))
                .fold(f64::INFINITY, f64::min)
        })
        .sum();
    total / garment.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::body::SeedTransform;

    fn frame(positions: Vec<V3>, normals: Vec<V3>) -> DriverFrame {
        let transforms = vec![SeedTransform::IDENTITY; positions.len()];
        DriverFrame {
            transforms,
            seed_positions: positions,
            seed_normals: normals,
        }
    }

    #[test]
    fn descriptor_zero_at_coincident_seed_and_translation_invariant() {
        let garment = vec![[1.0, 2.0, 3.0], [0.5, 0.0, -1.0]];
        let seeds = vec![[1.0, 2.0, 3.0], [0.0, 0.0, 0.0]];
        let p = relative_descriptor(&garment, &seeds);
        assert_eq!(&p[0..3], &[0.0, 0.0, 0.0]);

        let u = [0.3, -0.7, 2.2];
        let garment2: Vec<V3> = garment.iter().map(|g| vm::add(*g, u)).collect();
        let seeds2: Vec<V3> = seeds.iter().map(|b| vm::add(*b, u)).collect();
        let p2 = relative_descriptor(&garment2, &seeds2);
        for (a, b) in p.iter().zip(&p2) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn motion_features_on_canonical_trajectories() {
        let v = 5;
        let stat = vec![[1.0, 2.0, 3.0]; v];
        let m = motion_features(&stat, &stat, &stat);
        assert!(m.velocity.iter().all(|v| *v == [0.0; 3]));
        assert!(m.acceleration.iter().all(|a| *a == [0.0; 3]));

        // Uniform translation u per frame: V = u, V̇ = 0.
        let u = [0.1, -0.2, 0.05];
        let g3 = stat.clone();
        let g2: Vec<V3> = g3.iter().map(|p| vm::add(*p, u)).collect();
        let g1: Vec<V3> = g2.iter().map(|p| vm::add(*p, u)).collect();
        let m = motion_features(&g1, &g2, &g3);
        for (vel, acc) in m.velocity.iter().zip(&m.acceleration) {
            for k in 0..3 {
                assert!((vel[k] - u[k]).abs() < 1e-12);
                assert!(acc[k].abs() < 1e-12);
            }
        }

        // Quadratic trajectory p(t) = 0.5 a t^2 sampled at t = 1, 2, 3:
        // backward second difference recovers a exactly.
        let a = [0.4, 0.0, -1.2];
        let at = |t: f64| -> Vec<V3> {
            (0..v)
                .map(|_| [0.5 * a[0] * t * t, 0.5 * a[1] * t * t, 0.5 * a[2] * t * t])
                .collect()
        };
        let m = motion_features(&at(3.0), &at(2.0), &at(1.0));
        for acc in &m.acceleration {
            for k in 0..3 {
                assert!((acc[k] - a[k]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn interaction_force_plugin_cases() {
        // One seed at origin with normal +z at both frames.
        let drv = frame(vec![[0.0, 0.0, 0.0]], vec![[0.0, 0.0, 1.0]]);
        let sigma = 0.5;

        // Vertex above the plane: no force.
        let f = interaction_forces(&[[0.2, 0.0, 0.3]], &drv, &drv, sigma);
        assert_eq!(&f.forces[..], &[0.0, 0.0, 0.0]);

        // Vertex exactly at the previous seed but depth d behind the current
        // plane: a = 1, force = d * n. Realize by moving the plane up.
        let d = 0.07;
        let drv_t = frame(vec![[0.0, 0.0, d]], vec![[0.0, 0.0, 1.0]]);
        let drv_tm1 = frame(vec![[0.0, 0.0, 0.0]], vec![[0.0, 0.0, 1.0]]);
        let f = interaction_forces(&[[0.0, 0.0, 0.0]], &drv_t, &drv_tm1, sigma);
        assert!((f.forces[2] - d).abs() < 1e-12);
        assert_eq!(f.forces[0], 0.0);

        // Penetrating vertex 10 sigma away from the previous seed: force is
        // suppressed by the Gaussian gate far below 1e-6 of the depth.
        let far = [10.0 * sigma, 0.0, -0.05];
        let f = interaction_forces(&[far], &drv, &drv, sigma);
        let mag = vm::norm([f.forces[0], f.forces[1], f.forces[2]]);
        assert!(mag < 1e-6 * 0.05, "gate must crush far forces: {mag}");
    }

    #[test]
    fn interaction_force_continuous_across_plane() {
        let drv = frame(vec![[0.0, 0.0, 0.0]], vec![[0.0, 0.0, 1.0]]);
        let eps = 1e-9;
        let above = interaction_forces(&[[0.1, 0.0, eps]], &drv, &drv, 0.5);
        let below = interaction_forces(&[[0.1, 0.0, -eps]], &drv, &drv, 0.5);
        for k in 0..3 {
            assert!(above.forces[k].abs() < 1e-8);
            assert!(below.forces[k].abs() < 1e-8);
        }
    }

    #[test]
    fn nearest_seed_distance_on_known_layout() {
        let garment = vec![[0.0, 0.0, 1.0], [2.0, 0.0, 2.0]];
        let seeds = vec![[0.0, 0.0, 0.0], [2.0, 0.0, 0.0]];
        // Distances: 1 and 2 → mean 1.5.
        assert!((mean_nearest_seed_distance(&garment, &seeds) - 1.5).abs() < 1e-12);
    }
}
