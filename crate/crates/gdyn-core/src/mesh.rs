//! Triangle mesh with a UV chart and derived differential-geometry data.

use thiserror::Error;

use crate::vecmath::{self as vm, M3, V3};

#[derive(Debug, Error)]
pub enum MeshError {
    #[error("triangle {tri} references vertex {vertex} but mesh has {count} vertices")]
    IndexOutOfRange {
        tri: usize,
        vertex: usize,
        count: usize,
    },
    #[error("vertex {0} is not referenced by any triangle")]
    UnreferencedVertex(usize),
    #[error("vertex {0} has only zero-area incident triangles, local frame undefined")]
    DegenerateFrame(usize),
    #[error("triangle {0} has two corners with identical uv, chart is degenerate")]
    DegenerateChart(usize),
    #[error("field length {got} does not match vertex count {want}")]
    FieldLength { got: usize, want: usize },
}

/// Triangle mesh where every vertex carries exactly one UV coordinate
/// (seams are handled upstream by vertex duplication). Immutable after
/// construction; all derived data is built once in `new`.
#[derive(Debug, Clone)]
pub struct TriMesh {
    pub positions: Vec<V3>,
    pub triangles: Vec<[usize; 3]>,
    pub uvs: Vec<[f64; 2]>,
    /// Unique undirected edges as (lo, hi) index pairs, sorted lexicographically.
    pub edges: Vec<(usize, usize)>,
    /// CSR vertex adjacency: neighbors of v are adj[adj_off[v]..adj_off[v+1]].
    pub adj_off: Vec<usize>,
    pub adj: Vec<usize>,
}

impl TriMesh {
    pub fn new(
        positions: Vec<V3>,
        triangles: Vec<[usize; 3]>,
        uvs: Vec<[f64; 2]>,
    ) -> Result<Self, MeshError> {
        let n = positions.len();
        assert_eq!(uvs.len(), n, "uv count must match vertex count");
        let mut referenced = vec![false; n];
        for (ti, t) in triangles.iter().enumerate() {
            for &v in t {
                if v >= n {
                    return Err(MeshError::IndexOutOfRange {
                        tri: ti,
                        vertex: v,
                        count: n,
                    });
                }
                referenced[v] = true;
            }
        }
        if let Some(v) = referenced.iter().position(|r| !r) {
            return Err(MeshError::UnreferencedVertex(v));
        }

        let mut edge_set: Vec<(usize, usize)> = triangles
            .iter()
            .flat_map(|t| {
                [(t[0], t[1]), (t[1], t[2]), (t[2], t[0])]
                    .into_iter()
                    .map(|(a, b)| (a.min(b), a.max(b)))
            })
            .collect();
        edge_set.sort_unstable();
        edge_set.dedup();

        let mut degree = vec![0usize; n];
        for &(a, b) in &edge_set {
            degree[a] += 1;
            degree[b] += 1;
        }
        let mut adj_off = vec![0usize; n + 1];
        for v in 0..n {
            adj_off[v + 1] = adj_off[v] + degree[v];
        }
        let mut adj = vec![0usize; adj_off[n]];
        let mut cursor = adj_off.clone();
        for &(a, b) in &edge_set {
            adj[cursor[a]] = b;
            cursor[a] += 1;
            adj[cursor[b]] = a;
            cursor[b] += 1;
        }

        Ok(Self {
            positions,
            triangles,
            uvs,
            edges: edge_set,
            adj_off,
            adj,
        })
    }

    pub fn vertex_count(&self) -> usize {
        self.positions.len()
    }

    pub fn neighbors(&self, v: usize) -> &[usize] {
        &self.adj[self.adj_off[v]..self.adj_off[v + 1]]
    }

    pub fn triangle_area(&self, t: usize) -> f64 {
        let [a, b, c] = self.triangles[t];
        triangle_area(self.positions[a], self.positions[b], self.positions[c])
    }

    pub fn total_area(&self) -> f64 {
        (0..self.triangles.len()).map(|t| self.triangle_area(t)).sum()
    }

    /// Diagonal of the axis-aligned bounding box of the given positions.
    pub fn bbox_diagonal(positions: &[V3]) -> f64 {
        if positions.is_empty() {
            return 0.0;
        }
        let mut lo = positions[0];
        let mut hi = positions[0];
        for p in positions {
            for k in 0..3 {
                lo[k] = lo[k].min(p[k]);
                hi[k] = hi[k].max(p[k]);
            }
        }
        vm::dist(lo, hi)
    }

    /// Area-weighted vertex normals of the given positions (mesh connectivity),
    /// normalized. Degenerate vertices fall back to +z.
    pub fn vertex_normals(&self, positions: &[V3]) -> Vec<V3> {
        let mut acc = vec![[0.0; 3]; positions.len()];
        for t in &self.triangles {
            let [a, b, c] = *t;
            // Cross product length is 2x area, so this accumulates
            // area-weighted normals without explicit weights.
            let n = vm::cross(
                vm::sub(positions[b], positions[a]),
                vm::sub(positions[c], positions[a]),
            );
            for &v in t {
                acc[v] = vm::add(acc[v], n);
            }
        }
        acc.into_iter()
            .map(|n| vm::normalized(n).unwrap_or([0.0, 0.0, 1.0]))
            .collect()
    }

    /// Like [`TriMesh::local_frames`] but degenerate vertices yield `None`
    /// instead of failing the whole call (used when posing animated frames,
    /// where a transient collapse at one vertex must not abort).
    pub fn local_frames_opt(&self, positions: &[V3]) -> Vec<Option<M3>> {
        let n = positions.len();
        let mut normal_acc = vec![[0.0; 3]; n];
        let mut tangent_acc = vec![[0.0; 3]; n];
        let mut area_acc = vec![0.0; n];
        for t in self.triangles.iter() {
            let [i0, i1, i2] = *t;
            let (p0, p1, p2) = (positions[i0], positions[i1], positions[i2]);
            let cross = vm::cross(vm::sub(p1, p0), vm::sub(p2, p0));
            let area2 = vm::norm(cross);
            for &v in t {
                normal_acc[v] = vm::add(normal_acc[v], cross);
                area_acc[v] += area2;
            }
            let (u0, u1, u2) = (self.uvs[i0], self.uvs[i1], self.uvs[i2]);
            let du1 = [u1[0] - u0[0], u1[1] - u0[1]];
            let du2 = [u2[0] - u0[0], u2[1] - u0[1]];
            let det = du1[0] * du2[1] - du1[1] * du2[0];
            if det.abs() < 1e-14 {
                continue;
            }
            let e1 = vm::sub(p1, p0);
            let e2 = vm::sub(p2, p0);
            let dpdu = vm::scale(
                vm::sub(vm::scale(e1, du2[1]), vm::scale(e2, du1[1])),
                1.0 / det,
            );
            for &v in t {
                tangent_acc[v] = vm::add(tangent_acc[v], vm::scale(dpdu, area2));
            }
        }
        (0..n)
            .map(|v| {
                if area_acc[v] < 1e-14 {
                    return None;
                }
                let normal = vm::normalized(normal_acc[v])?;
                let raw_t = tangent_acc[v];
                let proj = vm::sub(raw_t, vm::scale(normal, vm::dot(raw_t, normal)));
                let tangent = vm::normalized(proj).unwrap_or_else(|| any_perpendicular(normal));
                Some(vm::from_cols(tangent, vm::cross(normal, tangent), normal))
            })
            .collect()
    }

    /// Per-vertex orthonormal frames (columns: tangent, bitangent, normal) at
    /// the given positions. The tangent follows the direction of increasing u
    /// in the UV chart, projected into the tangent plane; vertices with a
    /// degenerate uv gradient fall back to an arbitrary stable perpendicular.
    pub fn local_frames(&self, positions: &[V3]) -> Result<Vec<M3>, MeshError> {
        let n = positions.len();
        let mut normal_acc = vec![[0.0; 3]; n];
        let mut tangent_acc = vec![[0.0; 3]; n];
        let mut area_acc = vec![0.0; n];

        for (ti, t) in self.triangles.iter().enumerate() {
            let [i0, i1, i2] = *t;
            let (p0, p1, p2) = (positions[i0], positions[i1], positions[i2]);
            let cross = vm::cross(vm::sub(p1, p0), vm::sub(p2, p0));
            let area2 = vm::norm(cross);
            for &v in t {
                normal_acc[v] = vm::add(normal_acc[v], cross);
                area_acc[v] += area2;
            }

            // dP/du from inverting the uv edge matrix of the triangle.
            let (u0, u1, u2) = (self.uvs[i0], self.uvs[i1], self.uvs[i2]);
            let du1 = [u1[0] - u0[0], u1[1] - u0[1]];
            let du2 = [u2[0] - u0[0], u2[1] - u0[1]];
            let det = du1[0] * du2[1] - du1[1] * du2[0];
            if det.abs() < 1e-14 {
                if area2 > 1e-14 {
                    return Err(MeshError::DegenerateChart(ti));
                }
                continue;
            }
            let e1 = vm::sub(p1, p0);
            let e2 = vm::sub(p2, p0);
            let dpdu = vm::scale(
                vm::sub(vm::scale(e1, du2[1]), vm::scale(e2, du1[1])),
                1.0 / det,
            );
            for &v in t {
                tangent_acc[v] = vm::add(tangent_acc[v], vm::scale(dpdu, area2));
            }
        }

        let mut frames = Vec::with_capacity(n);
        for v in 0..n {
            if area_acc[v] < 1e-14 {
                return Err(MeshError::DegenerateFrame(v));
            }
            let normal = vm::normalized(normal_acc[v]).ok_or(MeshError::DegenerateFrame(v))?;
            // Project the uv tangent into the tangent plane and orthonormalize.
            let raw_t = tangent_acc[v];
            let proj = vm::sub(raw_t, vm::scale(normal, vm::dot(raw_t, normal)));
            let tangent = vm::normalized(proj).unwrap_or_else(|| any_perpendicular(normal));
            let bitangent = vm::cross(normal, tangent);
            frames.push(vm::from_cols(tangent, bitangent, normal));
        }
        Ok(frames)
    }

    /// Umbrella Laplacian: mean of neighbor values minus the value itself.
    /// Isolated vertices (impossible after validation) would get zero.
    pub fn laplacian(&self, field: &[V3]) -> Result<Vec<V3>, MeshError> {
        if field.len() != self.vertex_count() {
            return Err(MeshError::FieldLength {
                got: field.len(),
                want: self.vertex_count(),
            });
        }
        Ok((0..field.len())
            .map(|v| {
                let nbrs = self.neighbors(v);
                if nbrs.is_empty() {
                    return [0.0; 3];
                }
                let mut s = [0.0; 3];
                for &j in nbrs {
                    s = vm::add(s, field[j]);
                }
                vm::sub(vm::scale(s, 1.0 / nbrs.len() as f64), field[v])
            })
            .collect())
    }

    /// Euclidean edge lengths, in canonical edge order.
    pub fn edge_lengths(&self, positions: &[V3]) -> Result<Vec<f64>, MeshError> {
        if positions.len() != self.vertex_count() {
            return Err(MeshError::FieldLength {
                got: positions.len(),
                want: self.vertex_count(),
            });
        }
        Ok(self
            .edges
            .iter()
            .map(|&(a, b)| vm::dist(positions[a], positions[b]))
            .collect())
    }
}

pub fn triangle_area(a: V3, b: V3, c: V3) -> f64 {
    0.5 * vm::norm(vm::cross(vm::sub(b, a), vm::sub(c, a)))
}

/// Any unit vector perpendicular to a unit vector, chosen stably.
fn any_perpendicular(n: V3) -> V3 {
    let pivot = if n[0].abs() < 0.9 {
        [1.0, 0.0, 0.0]
    } else {
        [0.0, 1.0, 0.0]
    };
    vm::normalized(vm::cross(n, pivot)).expect("pivot not parallel")
}
