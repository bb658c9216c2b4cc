//! XPBD cloth: distance constraints on edges, bending as distance constraints
//! across adjacent-triangle pairs, kinematic pins, and signed-distance
//! collider projection. Single-threaded Gauss-Seidel in fixed constraint
//! order, so a run is a pure function of its inputs.

use std::collections::BTreeMap;

use gdyn_core::sdf::{MeshSdf, SignedDistance};
use gdyn_core::vecmath::{self as vm, V3};
use gdyn_core::TriMesh;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("degenerate rest edge {a}-{b}")]
    DegenerateEdge { a: usize, b: usize },
    #[error("pinned vertex {0} out of range")]
    PinOutOfRange(usize),
    #[error(
        "simulation exploded at frame {frame}, substep {substep}: vertex {vertex} \
         moved {disp:.4} m in one substep (limit {limit:.4})"
    )]
    Exploded {
        frame: usize,
        substep: usize,
        vertex: usize,
        disp: f64,
        limit: f64,
    },
    #[error("scene: {0}")]
    Scene(String),
    #[error("container: {0}")]
    Container(#[from] gdyn_core::container::ContainerError),
    #[error("mesh: {0}")]
    Mesh(#[from] gdyn_core::MeshError),
    #[error("obj: {0}")]
    Obj(#[from] gdyn_core::obj::ObjError),
    #[error("body: {0}")]
    Body(#[from] gdyn_core::body::BodyError),
    #[error("map: {0}")]
    Map(#[from] gdyn_core::uvmap::MapError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("manifest: {0}")]
    Manifest(#[from] serde_json::Error),
    #[error("scene script: {0}")]
    Script(String),
    #[error("dataset file {path} hash mismatch (expected {want}, got {got})")]
    HashMismatch {
        path: String,
        want: String,
        got: String,
    },
}

/// Signed distance by closest-feature pseudo-normal, valid near the surface
/// for open and closed meshes alike (no winding-number queries). Collision
/// projection only ever evaluates within a few millimeters of the surface.
pub struct NearSurfaceSdf {
    sdf: MeshSdf,
}

impl NearSurfaceSdf {
    pub fn build(positions: &[V3], triangles: &[[usize; 3]]) -> Self {
        Self {
            sdf: MeshSdf::build_from(positions, triangles),
        }
    }
}

impl SignedDistance for NearSurfaceSdf {
    fn signed_distance(&self, p: V3) -> f64 {
        let (cp, n, d2) = self.sdf.closest_with_normal(p);
        let d = d2.sqrt();
        if vm::dot(vm::sub(p, cp), n) >= 0.0 {
            d
        } else {
            -d
        }
    }

    fn gradient(&self, p: V3) -> V3 {
        let (cp, n, d2) = self.sdf.closest_with_normal(p);
        let d = d2.sqrt();
        if d > 1e-9 {
            let sign = if vm::dot(vm::sub(p, cp), n) >= 0.0 { 1.0 } else { -1.0 };
            vm::scale(vm::sub(p, cp), sign / d)
        } else {
            n
        }
    }
}

#[derive(Debug, Clone)]
pub struct ClothParams {
    /// m/s^2.
    pub gravity: V3,
    /// Frame time in seconds.
    pub dt: f64,
    pub substeps: usize,
    /// Constraint iterations per substep.
    pub iterations: usize,
    /// XPBD compliance of edge-length constraints; 0 = inextensible.
    pub stretch_compliance: f64,
    /// Compliance of the cross-pair bending constraints.
    pub bend_compliance: f64,
    /// Velocity decay rate, 1/s.
    pub damping: f64,
    /// Colliders keep cloth at signed distance >= thickness (meters).
    pub thickness: f64,
    /// Fraction of tangential substep motion removed at contacts (0 = slick,
    /// 1 = sticking).
    pub friction: f64,
    /// Any vertex moving faster than this aborts the run.
    pub max_speed: f64,
}

impl Default for ClothParams {
    fn default() -> Self {
        Self {
            gravity: [0.0, -9.81, 0.0],
            dt: 1.0 / 30.0,
            substeps: 4,
            iterations: 25,
            stretch_compliance: 0.0,
            bend_compliance: 3e-3,
            damping: 1.0,
            thickness: 0.002,
            friction: 0.3,
            max_speed: 50.0,
        }
    }
}

/// One distance constraint: endpoints and rest length.
#[derive(Debug, Clone, Copy)]
struct Distance {
    a: usize,
    b: usize,
    rest: f64,
}

pub struct ClothSim {
    positions: Vec<V3>,
    velocities: Vec<V3>,
    inv_mass: Vec<f64>,
    pinned: Vec<usize>,
    stretch: Vec<Distance>,
    bend: Vec<Distance>,
    params: ClothParams,
    frame: usize,
}

impl ClothSim {
    pub fn new(rest: &TriMesh, pinned: &[usize], params: ClothParams) -> Result<Self, SimError> {
        let n = rest.vertex_count();
        let mut inv_mass = vec![1.0; n];
        for &p in pinned {
            if p >= n {
                return Err(SimError::PinOutOfRange(p));
            }
            inv_mass[p] = 0.0;
        }

        let mut stretch = Vec::new();
        let mut edge_tris: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
        for (ti, t) in rest.triangles.iter().enumerate() {
            for (a, b) in [(t[0], t[1]), (t[1], t[2]), (t[2], t[0])] {
                edge_tris.entry((a.min(b), a.max(b))).or_default().push(ti);
            }
        }
        for &(a, b) in edge_tris.keys() {
            let rest_len = vm::dist(rest.positions[a], rest.positions[b]);
            if rest_len <= 0.0 {
                return Err(SimError::DegenerateEdge { a, b });
            }
            stretch.push(Distance { a, b, rest: rest_len });
        }

        // Bending: for each interior edge, a distance constraint between the
        // two vertices opposite it. Zero-rest pairs (doubled vertices) are
        // rejected like degenerate edges.
        let mut bend = Vec::new();
        for (&(a, b), tris) in &edge_tris {
            if tris.len() != 2 {
                continue;
            }
            let other = |ti: usize| {
                rest.triangles[ti]
                    .into_iter()
                    .find(|&v| v != a && v != b)
                    .expect("triangle has a vertex off the edge")
            };
            let (u, v) = (other(tris[0]), other(tris[1]));
            let rest_len = vm::dist(rest.positions[u], rest.positions[v]);
            if rest_len <= 0.0 {
                return Err(SimError::DegenerateEdge { a: u, b: v });
            }
            bend.push(Distance {
                a: u.min(v),
                b: u.max(v),
                rest: rest_len,
            });
        }

        Ok(Self {
            positions: rest.positions.clone(),
            velocities: vec![[0.0; 3]; n],
            inv_mass,
            pinned: pinned.to_vec(),
            stretch,
            bend,
            params,
            frame: 0,
        })
    }

    pub fn positions(&self) -> &[V3] {
        &self.positions
    }

    pub fn velocities(&self) -> &[V3] {
        &self.velocities
    }

    pub fn frame(&self) -> usize {
        self.frame
    }

    /// Unit particle masses; pinned vertices contribute nothing.
    pub fn kinetic_energy(&self) -> f64 {
        self.velocities
            .iter()
            .zip(&self.inv_mass)
            .filter(|(_, &w)| w > 0.0)
            .map(|(v, _)| 0.5 * vm::norm2(*v))
            .sum()
    }

    pub fn max_edge_strain(&self) -> f64 {
        self.stretch
            .iter()
            .map(|c| (vm::dist(self.positions[c.a], self.positions[c.b]) - c.rest).abs() / c.rest)
            .fold(0.0, f64::max)
    }

    /// Advances one frame. `pins_at(s)` gives world positions of the pinned
    /// vertices (in `pinned` order) and `colliders_at(s)` the collider
    /// surfaces, both at substep fraction s in (0, 1] of this frame.
    pub fn step(
        &mut self,
        pins_at: &dyn Fn(f64) -> Vec<V3>,
        colliders_at: &dyn Fn(f64) -> Vec<NearSurfaceSdf>,
    ) -> Result<(), SimError> {
        let p = self.params.clone();
        let h = p.dt / p.substeps as f64;
        let alpha_stretch = p.stretch_compliance / (h * h);
        let alpha_bend = p.bend_compliance / (h * h);

        for sub in 0..p.substeps {
            let s = (sub + 1) as f64 / p.substeps as f64;
            let pin_targets = pins_at(s);
            assert_eq!(pin_targets.len(), self.pinned.len());
            let colliders = colliders_at(s);
            let prev = self.positions.clone();

            for i in 0..self.positions.len() {
                if self.inv_mass[i] > 0.0 {
                    self.velocities[i] = vm::add(self.velocities[i], vm::scale(p.gravity, h));
                    self.positions[i] =
                        vm::add(self.positions[i], vm::scale(self.velocities[i], h));
                }
            }
            for (k, &v) in self.pinned.iter().enumerate() {
                self.positions[v] = pin_targets[k];
            }

            let mut lambda_stretch = vec![0.0; self.stretch.len()];
            let mut lambda_bend = vec![0.0; self.bend.len()];
            for _ in 0..p.iterations {
                solve_distance(
                    &mut self.positions,
                    &self.inv_mass,
                    &self.stretch,
                    &mut lambda_stretch,
                    alpha_stretch,
                );
                solve_distance(
                    &mut self.positions,
                    &self.inv_mass,
                    &self.bend,
                    &mut lambda_bend,
                    alpha_bend,
                );
            }

            for i in 0..self.positions.len() {
                if self.inv_mass[i] == 0.0 {
                    continue;
                }
                for c in &colliders {
                    let d = c.signed_distance(self.positions[i]);
                    if d < p.thickness {
                        let g = c.gradient(self.positions[i]);
                        self.positions[i] =
                            vm::add(self.positions[i], vm::scale(g, p.thickness - d));
                        // Contact friction: remove part of this substep's
                        // tangential motion.
                        let delta = vm::sub(self.positions[i], prev[i]);
                        let tangent = vm::sub(delta, vm::scale(g, vm::dot(delta, g)));
                        self.positions[i] =
                            vm::sub(self.positions[i], vm::scale(tangent, p.friction));
                    }
                }
            }

            let decay = (1.0 - p.damping * h).max(0.0);
            for i in 0..self.positions.len() {
                let v = vm::scale(vm::sub(self.positions[i], prev[i]), 1.0 / h);
                let disp = vm::dist(self.positions[i], prev[i]);
                if disp > p.max_speed * h {
                    return Err(SimError::Exploded {
                        frame: self.frame,
                        substep: sub,
                        vertex: i,
                        disp,
                        limit: p.max_speed * h,
                    });
                }
                self.velocities[i] = if self.inv_mass[i] > 0.0 {
                    vm::scale(v, decay)
                } else {
                    v
                };
            }
        }
        self.frame += 1;
        Ok(())
    }
}

fn solve_distance(
    positions: &mut [V3],
    inv_mass: &[f64],
    cons: &[Distance],
    lambda: &mut [f64],
    alpha: f64,
) {
    for (k, c) in cons.iter().enumerate() {
        let (wa, wb) = (inv_mass[c.a], inv_mass[c.b]);
        let w_sum = wa + wb;
        if w_sum == 0.0 {
            continue;
        }
        let d = vm::sub(positions[c.a], positions[c.b]);
        let len = vm::norm(d);
        if len < 1e-12 {
            continue;
        }
        let viol = len - c.rest;
        let dlam = (-viol - alpha * lambda[k]) / (w_sum + alpha);
        lambda[k] += dlam;
        let corr = vm::scale(d, dlam / len);
        positions[c.a] = vm::add(positions[c.a], vm::scale(corr, wa));
        positions[c.b] = vm::sub(positions[c.b], vm::scale(corr, wb));
    }
}
