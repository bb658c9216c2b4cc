//! Differentiable wrappers around the domain math: rasterization, uv
//! sampling, local-frame displacement, skinning weights, blend skinning,
//! signed distance, mesh Laplacian, and edge lengths as tape ops.
//!
//! Each op converts through f64 internally so one implementation serves both
//! the f32 training graph and the f64 gradient-check graph.

use std::fmt;
use std::sync::Arc;

use gdyn_ad::{CustomOp, Real, TensorData};

use crate::body::SeedTransform;
use crate::mesh::TriMesh;
use crate::sdf::SignedDistance;
use crate::uvmap::{RasterTable, SampleTable};
use crate::vecmath::{self as vm, M3, V3};

fn rows_v3<T: Real>(t: &TensorData<T>) -> Vec<V3> {
    assert_eq!(t.shape().last(), Some(&3), "expected [_, 3], got {:?}", t.shape());
    t.data()
        .chunks_exact(3)
        .map(|c| [c[0].as_f64(), c[1].as_f64(), c[2].as_f64()])
        .collect()
}

fn v3_tensor<T: Real>(rows: &[V3]) -> TensorData<T> {
    let mut data = Vec::with_capacity(rows.len() * 3);
    for r in rows {
        data.extend(r.iter().map(|&v| T::from_f64(v)));
    }
    TensorData::new(vec![rows.len(), 3], data)
}

/// Scatters per-vertex values into a uv map through a fixed raster table.
/// Input: [V, C]; output: [w, w, C]. Linear, so backward is the transpose
/// gather of texel gradients onto vertices.
pub struct RasterizeOp {
    pub table: Arc<RasterTable>,
}

impl fmt::Debug for RasterizeOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "RasterizeOp(w={})", self.table.width)
    }
}

impl<T: Real> CustomOp<T> for RasterizeOp {
    fn name(&self) -> &'static str {
        "rasterize"
    }

    fn forward(&self, inputs: &[&TensorData<T>]) -> TensorData<T> {
        let x = inputs[0];
        let (v, c) = (x.shape()[0], x.shape()[1]);
        let w = self.table.width;
        let mut out = vec![T::zero(); w * w * c];
        for t in 0..w * w {
            let vs = self.table.vertices[t];
            let ws = self.table.weights[t];
            debug_assert!(vs.iter().all(|&i| i < v));
            for ch in 0..c {
                let mut acc = T::zero();
                for k in 0..3 {
                    acc += T::from_f64(ws[k]) * x.data()[vs[k] * c + ch];
                }
                out[t * c + ch] = acc;
            }
        }
        TensorData::new(vec![w, w, c], out)
    }

    fn backward(
        &self,
        inputs: &[&TensorData<T>],
        _output: &TensorData<T>,
        grad: &TensorData<T>,
        needs: &[bool],
    ) -> Vec<Option<TensorData<T>>> {
        if !needs[0] {
            return vec![None];
        }
        let (v, c) = (inputs[0].shape()[0], inputs[0].shape()[1]);
        let w = self.table.width;
        let mut dx = vec![T::zero(); v * c];
        for t in 0..w * w {
            let vs = self.table.vertices[t];
            let ws = self.table.weights[t];
            for ch in 0..c {
                let g = grad.data()[t * c + ch];
                for k in 0..3 {
                    dx[vs[k] * c + ch] += T::from_f64(ws[k]) * g;
                }
            }
        }
        vec![Some(TensorData::new(vec![v, c], dx))]
    }
}

/// Bilinearly samples a uv map at a fixed point list. Input: [w, w, C];
/// output: [P, C].
pub struct SampleUvOp {
    pub table: Arc<SampleTable>,
}

impl fmt::Debug for SampleUvOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "SampleUvOp(points={})", self.table.texels.len())
    }
}

impl<T: Real> CustomOp<T> for SampleUvOp {
    fn name(&self) -> &'static str {
        "sample_uv"
    }

    fn forward(&self, inputs: &[&TensorData<T>]) -> TensorData<T> {
        let map = inputs[0];
        let c = *map.shape().last().unwrap();
        assert_eq!(map.shape()[0], self.table.width);
        let p = self.table.texels.len();
        let mut out = vec![T::zero(); p * c];
        for (i, (ts, ws)) in self.table.texels.iter().zip(&self.table.weights).enumerate() {
            for ch in 0..c {
                let mut acc = T::zero();
                for k in 0..4 {
                    acc += T::from_f64(ws[k]) * map.data()[ts[k] * c + ch];
                }
                out[i * c + ch] = acc;
            }
        }
        TensorData::new(vec![p, c], out)
    }

    fn backward(
        &self,
        inputs: &[&TensorData<T>],
        _output: &TensorData<T>,
        grad: &TensorData<T>,
        needs: &[bool],
    ) -> Vec<Option<TensorData<T>>> {
        if !needs[0] {
            return vec![None];
        }
        let shape = inputs[0].shape().to_vec();
        let c = *shape.last().unwrap();
        let mut dmap = vec![T::zero(); inputs[0].numel()];
        for (i, (ts, ws)) in self.table.texels.iter().zip(&self.table.weights).enumerate() {
            for ch in 0..c {
                let g = grad.data()[i * c + ch];
                for k in 0..4 {
                    dmap[ts[k] * c + ch] += T::from_f64(ws[k]) * g;
                }
            }
        }
        vec![Some(TensorData::new(shape, dmap))]
    }
}

/// Canonical displacement: ĝ = g0 + H d with fixed base positions and
/// orthonormal frames. Input: d [V, 3]; output: ĝ [V, 3].
pub struct FramesApplyOp {
    pub g0: Vec<V3>,
    pub frames: Vec<M3>,
}

impl fmt::Debug for FramesApplyOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "FramesApplyOp(v={})", self.g0.len())
    }
}

impl<T: Real> CustomOp<T> for FramesApplyOp {
    fn name(&self) -> &'static str {
        "frames_apply"
    }

    fn forward(&self, inputs: &[&TensorData<T>]) -> TensorData<T> {
        let d = rows_v3(inputs[0]);
        assert_eq!(d.len(), self.g0.len());
        let out: Vec<V3> = self
            .g0
            .iter()
            .zip(&self.frames)
            .zip(&d)
            .map(|((p, h), di)| vm::add(*p, vm::mat_vec(h, *di)))
            .collect();
        v3_tensor(&out)
    }

    fn backward(
        &self,
        _inputs: &[&TensorData<T>],
        _output: &TensorData<T>,
        grad: &TensorData<T>,
        needs: &[bool],
    ) -> Vec<Option<TensorData<T>>> {
        if !needs[0] {
            return vec![None];
        }
        let g = rows_v3(grad);
        let dd: Vec<V3> = self
            .frames
            .iter()
            .zip(&g)
            .map(|(h, gi)| vm::mat_tvec(h, *gi))
            .collect();
        vec![Some(v3_tensor(&dd))]
    }
}

/// Distance-kernel skinning weights with learnable per-part log radii.
/// Inputs: canonical positions ĝ [V, 3], log ρ [P]; output: weights [V, N].
pub struct SkinWeightsOp {
    pub seeds0: Vec<V3>,
    /// Part index of each seed, values < part_count.
    pub seed_parts: Vec<usize>,
    pub part_count: usize,
}

impl fmt::Debug for SkinWeightsOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "SkinWeightsOp(seeds={}, parts={})",
            self.seeds0.len(),
            self.part_count
        )
    }
}

impl SkinWeightsOp {
    fn radii(&self, log_rho: &[f64]) -> Vec<f64> {
        self.seed_parts.iter().map(|&p| log_rho[p].exp()).collect()
    }
}

impl<T: Real> CustomOp<T> for SkinWeightsOp {
    fn name(&self) -> &'static str {
        "skin_weights"
    }

    fn forward(&self, inputs: &[&TensorData<T>]) -> TensorData<T> {
        let g_hat = rows_v3(inputs[0]);
        let log_rho = inputs[1].map_to_f64();
        assert_eq!(log_rho.len(), self.part_count);
        let rho = self.radii(&log_rho);
        let w = crate::skinning::skinning_weights(&g_hat, &self.seeds0, &rho);
        TensorData::from_f64_slice(vec![g_hat.len(), self.seeds0.len()], &w)
    }

    fn backward(
        &self,
        inputs: &[&TensorData<T>],
        output: &TensorData<T>,
        grad: &TensorData<T>,
        needs: &[bool],
    ) -> Vec<Option<TensorData<T>>> {
        let g_hat = rows_v3(inputs[0]);
        let log_rho = inputs[1].map_to_f64();
        let rho = self.radii(&log_rho);
        let n = self.seeds0.len();
        let w = output.map_to_f64();
        let g = grad.map_to_f64();

        let mut dg_hat = vec![[0.0; 3]; g_hat.len()];
        let mut dlog_rho = vec![0.0; self.part_count];
        for i in 0..g_hat.len() {
            let w_row = &w[i * n..(i + 1) * n];
            let g_row = &g[i * n..(i + 1) * n];
            // Softmax backward: dL/da_j = w_j (g_j - Σ_k g_k w_k).
            let dot: f64 = g_row.iter().zip(w_row).map(|(a, b)| a * b).sum();
            for j in 0..n {
                let da = w_row[j] * (g_row[j] - dot);
                if da == 0.0 {
                    continue;
                }
                let rel = vm::sub(g_hat[i], self.seeds0[j]);
                let rho_sq = rho[j] * rho[j];
                // a_j = -|rel|² / (2ρ²): position pulls along -rel/ρ²,
                // log ρ pushes by |rel|²/ρ².
                dg_hat[i] = vm::add(dg_hat[i], vm::scale(rel, -da / rho_sq));
                dlog_rho[self.seed_parts[j]] += da * vm::norm2(rel) / rho_sq;
            }
        }
        let mut out: Vec<Option<TensorData<T>>> = vec![None, None];
        if needs[0] {
            out[0] = Some(v3_tensor(&dg_hat));
        }
        if needs[1] {
            out[1] = Some(TensorData::from_f64_slice(
                vec![self.part_count],
                &dlog_rho,
            ));
        }
        out
    }
}

/// Linear blend skinning in delta form against fixed driver transforms.
/// Inputs: canonical positions ĝ [V, 3], weights [V, N]; output: posed
/// positions [V, 3].
pub struct LbsPoseOp {
    pub seeds0: Vec<V3>,
    pub transforms: Vec<SeedTransform>,
}

impl fmt::Debug for LbsPoseOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "LbsPoseOp(seeds={})", self.seeds0.len())
    }
}

impl LbsPoseOp {
    /// Δ_j(p) = (R_j - I)(p - b0_j) + T_j.
    fn delta(&self, j: usize, p: V3) -> V3 {
        let t = &self.transforms[j];
        let rel = vm::sub(p, self.seeds0[j]);
        vm::add(vm::sub(vm::mat_vec(&t.rotation, rel), rel), t.translation)
    }
}

impl<T: Real> CustomOp<T> for LbsPoseOp {
    fn name(&self) -> &'static str {
        "lbs_pose"
    }

    fn forward(&self, inputs: &[&TensorData<T>]) -> TensorData<T> {
        let g_hat = rows_v3(inputs[0]);
        let n = self.seeds0.len();
        let w = inputs[1].map_to_f64();
        assert_eq!(w.len(), g_hat.len() * n);
        let mut out = Vec::with_capacity(g_hat.len());
        for (i, g) in g_hat.iter().enumerate() {
            let mut acc = *g;
            for j in 0..n {
                acc = vm::add(acc, vm::scale(self.delta(j, *g), w[i * n + j]));
            }
            out.push(acc);
        }
        v3_tensor(&out)
    }

    fn backward(
        &self,
        inputs: &[&TensorData<T>],
        _output: &TensorData<T>,
        grad: &TensorData<T>,
        needs: &[bool],
    ) -> Vec<Option<TensorData<T>>> {
        let g_hat = rows_v3(inputs[0]);
        let n = self.seeds0.len();
        let w = inputs[1].map_to_f64();
        let g = rows_v3(grad);

        let mut dg_hat = vec![[0.0; 3]; g_hat.len()];
        let mut dw = vec![0.0; w.len()];
        for i in 0..g_hat.len() {
            let gi = g[i];
            // ∂g_i/∂ĝ_i = I + Σ_j w_ij (R_j - I); transpose applied to gi.
            let mut acc = gi;
            for j in 0..n {
                let wij = w[i * n + j];
                let rt_g = vm::mat_tvec(&self.transforms[j].rotation, gi);
                acc = vm::add(acc, vm::scale(vm::sub(rt_g, gi), wij));
                dw[i * n + j] = vm::dot(self.delta(j, g_hat[i]), gi);
            }
            dg_hat[i] = acc;
        }
        let mut out: Vec<Option<TensorData<T>>> = vec![None, None];
        if needs[0] {
            out[0] = Some(v3_tensor(&dg_hat));
        }
        if needs[1] {
            out[1] = Some(TensorData::from_f64_slice(
                vec![g_hat.len(), n],
                &dw,
            ));
        }
        out
    }
}

/// Signed distance of every vertex to a fixed collider. Input: positions
/// [V, 3]; output: [V, 1]. Backward follows the collider's analytic
/// gradient (unit direction away from the closest surface point).
pub struct SdfOp {
    pub sdf: Arc<dyn SignedDistance + Send + Sync>,
}

impl fmt::Debug for SdfOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "SdfOp")
    }
}

impl<T: Real> CustomOp<T> for SdfOp {
    fn name(&self) -> &'static str {
        "sdf"
    }

    fn forward(&self, inputs: &[&TensorData<T>]) -> TensorData<T> {
        let p = rows_v3(inputs[0]);
        let d: Vec<f64> = p.iter().map(|&q| self.sdf.signed_distance(q)).collect();
        TensorData::from_f64_slice(vec![p.len(), 1], &d)
    }

    fn backward(
        &self,
        inputs: &[&TensorData<T>],
        _output: &TensorData<T>,
        grad: &TensorData<T>,
        needs: &[bool],
    ) -> Vec<Option<TensorData<T>>> {
        if !needs[0] {
            return vec![None];
        }
        let p = rows_v3(inputs[0]);
        let g = grad.map_to_f64();
        let dp: Vec<V3> = p
            .iter()
            .zip(&g)
            .map(|(&q, &gi)| vm::scale(self.sdf.gradient(q), gi))
            .collect();
        vec![Some(v3_tensor(&dp))]
    }
}

/// Umbrella Laplacian of a per-vertex field: mean of neighbors minus self.
/// Input and output: [V, 3]. Linear with a fixed sparse matrix, so backward
/// multiplies by the transpose.
pub struct LaplacianOp {
    pub mesh: Arc<TriMesh>,
}

impl fmt::Debug for LaplacianOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "LaplacianOp(v={})", self.mesh.vertex_count())
    }
}

impl<T: Real> CustomOp<T> for LaplacianOp {
    fn name(&self) -> &'static str {
        "laplacian"
    }

    fn forward(&self, inputs: &[&TensorData<T>]) -> TensorData<T> {
        let p = rows_v3(inputs[0]);
        let lap = self.mesh.laplacian(&p).expect("field length matches mesh");
        v3_tensor(&lap)
    }

    fn backward(
        &self,
        _inputs: &[&TensorData<T>],
        _output: &TensorData<T>,
        grad: &TensorData<T>,
        needs: &[bool],
    ) -> Vec<Option<TensorData<T>>> {
        if !needs[0] {
            return vec![None];
        }
        let g = rows_v3(grad);
        let v = self.mesh.vertex_count();
        // (Lᵀ g)_i = -g_i + Σ_{j ∈ N(i)} g_j / deg(j); adjacency is symmetric.
        let mut out = vec![[0.0; 3]; v];
        for i in 0..v {
            let mut acc = vm::scale(g[i], -1.0);
            for &j in self.mesh.neighbors(i) {
                let deg = self.mesh.neighbors(j).len() as f64;
                acc = vm::add(acc, vm::scale(g[j], 1.0 / deg));
            }
            out[i] = acc;
        }
        vec![Some(v3_tensor(&out))]
    }
}

/// Euclidean lengths of a fixed edge list. Input: positions [V, 3]; output:
/// [E, 1]. Zero-length edges get zero gradient (subgradient choice).
pub struct EdgeLengthsOp {
    pub edges: Vec<(usize, usize)>,
}

impl fmt::Debug for EdgeLengthsOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "EdgeLengthsOp(e={})", self.edges.len())
    }
}

impl<T: Real> CustomOp<T> for EdgeLengthsOp {
    fn name(&self) -> &'static str {
        "edge_lengths"
    }

    fn forward(&self, inputs: &[&TensorData<T>]) -> TensorData<T> {
        let p = rows_v3(inputs[0]);
        let lens: Vec<f64> = self
            .edges
            .iter()
            .map(|&(a, b)| vm::dist(p[a], p[b]))
            .collect();
        TensorData::from_f64_slice(vec![self.edges.len(), 1], &lens)
    }

    fn backward(
        &self,
        inputs: &[&TensorData<T>],
        output: &TensorData<T>,
        grad: &TensorData<T>,
        needs: &[bool],
    ) -> Vec<Option<TensorData<T>>> {
        if !needs[0] {
            return vec![None];
        }
        let p = rows_v3(inputs[0]);
        let lens = output.map_to_f64();
        let g = grad.map_to_f64();
        let mut dp = vec![[0.0; 3]; p.len()];
        for (e, &(a, b)) in self.edges.iter().enumerate() {
            if lens[e] < 1e-12 {
                continue;
            }
            let dir = vm::scale(vm::sub(p[a], p[b]), g[e] / lens[e]);
            dp[a] = vm::add(dp[a], dir);
            dp[b] = vm::sub(dp[b], dir);
        }
        vec![Some(v3_tensor(&dp))]
    }
}

/// Undirected edge list of a mesh in deterministic (a < b, sorted) order.
pub fn edge_list(mesh: &TriMesh) -> Vec<(usize, usize)> {
    let mut edges = Vec::new();
    for v in 0..mesh.vertex_count() {
        for &n in mesh.neighbors(v) {
            if v < n {
                edges.push((v, n));
            }
        }
    }
    edges
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::shapes::{grid_sheet, uv_sphere};
    use crate::skinning;
    use gdyn_ad::gradcheck::{assert_grads_close, seeded};
    use gdyn_ad::{Graph, Var};
    use std::rc::Rc;
    use std::sync::Arc;

    const EPS: f64 = 1e-5;
    const TOL: f64 = 1e-7;

    fn sheet_and_table(w: usize) -> (TriMesh, Arc<RasterTable>, Arc<SampleTable>) {
        let mesh = grid_sheet(4, 4, 1.0, 1.0);
        let raster = Arc::new(RasterTable::build(&mesh, w).unwrap());
        let sample = Arc::new(SampleTable::build(&mesh.uvs, w));
        (mesh, raster, sample)
    }

    #[test]
    fn rasterize_then_sample_grads() {
        let (mesh, raster, sample) = sheet_and_table(8);
        let v = mesh.vertex_count();
        let values = seeded::<f64>(vec![v, 2], 41);
        let target = seeded::<f64>(vec![v, 2], 42);
        assert_grads_close(&[values], EPS, TOL, "raster+sample", |g, vars| {
            let map = g.custom(Rc::new(RasterizeOp { table: raster.clone() }), &[vars[0]]);
            let back = g.custom(Rc::new(SampleUvOp { table: sample.clone() }), &[map]);
            let t = g.constant(target.clone());
            g.l1_mean(back, t)
        });
    }

    #[test]
    fn frames_apply_grads_and_semantics() {
        let mesh = grid_sheet(3, 3, 1.0, 1.0);
        let frames = mesh.local_frames(&mesh.positions).unwrap();
        let op = Rc::new(FramesApplyOp {
            g0: mesh.positions.clone(),
            frames,
        });
        let v = mesh.vertex_count();
        let d = seeded::<f64>(vec![v, 3], 7);
        assert_grads_close(&[d], EPS, TOL, "frames_apply", |g, vars| {
            let posed = g.custom(op.clone(), &[vars[0]]);
            let sq = g.square(posed);
            g.sum(sq)
        });
    }

    #[test]
    fn skin_weights_grads_wrt_positions_and_radii() {
        let seeds0 = vec![
            [0.0, 0.0, 0.0],
            [1.0, 0.0, 0.2],
            [0.0, 1.0, -0.1],
            [0.9, 1.1, 0.0],
        ];
        let op = Rc::new(SkinWeightsOp {
            seeds0,
            seed_parts: vec![0, 1, 1, 0],
            part_count: 2,
        });
        let g_hat = seeded::<f64>(vec![6, 3], 13);
        let log_rho = TensorData::from_f64_slice(vec![2], &[-0.9, -1.2]);
        let probe = seeded::<f64>(vec![6, 4], 14);
        assert_grads_close(&[g_hat, log_rho], EPS, TOL, "skin_weights", |g, vars| {
            let w = g.custom(op.clone(), &[vars[0], vars[1]]);
            let p = g.constant(probe.clone());
            let prod = g.mul(w, p);
            g.sum(prod)
        });
    }

    #[test]
    fn lbs_pose_grads_wrt_positions_and_weights() {
        let seeds0 = vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]];
        let transforms = vec![
            SeedTransform {
                rotation: vm::rotation_about_axis([0.0, 0.0, 1.0], 0.7),
                translation: [0.1, 0.0, 0.3],
            },
            SeedTransform {
                rotation: vm::rotation_about_axis([0.0, 1.0, 0.0], -0.4),
                translation: [0.0, 0.2, 0.0],
            },
            SeedTransform {
                rotation: vm::rotation_about_axis(
                    vm::normalized([1.0, 1.0, 0.0]).unwrap(),
                    0.25,
                ),
                translation: [-0.1, 0.1, 0.05],
            },
        ];
        let op = Rc::new(LbsPoseOp { seeds0, transforms });
        let g_hat = seeded::<f64>(vec![5, 3], 21);
        // Arbitrary positive rows; normalization is not required by the op.
        let mut w = seeded::<f64>(vec![5, 3], 22);
        for v in w.data_mut() {
            *v = v.abs() + 0.1;
        }
        let target = seeded::<f64>(vec![5, 3], 23);
        assert_grads_close(&[g_hat, w], EPS, TOL, "lbs_pose", |g, vars| {
            let posed = g.custom(op.clone(), &[vars[0], vars[1]]);
            let t = g.constant(target.clone());
            g.l1_mean(posed, t)
        });
    }

    #[test]
    fn sdf_op_grads_near_sphere() {
        let sphere = uv_sphere(0.5, 16, 24);
        let sdf: Arc<dyn SignedDistance + Send + Sync> = Arc::new(crate::sdf::MeshSdf::build(&sphere));
        let op = Rc::new(SdfOp { sdf });
        // Points clearly off the surface so the closest feature is stable
        // under the finite-difference probe.
        let pts = TensorData::from_f64_slice(
            vec![4, 3],
            &[
                0.8, 0.1, 0.05, //
                -0.15, 0.72, 0.3, //
                0.1, 0.12, -0.09, //
                0.05, -0.8, 0.4,
            ],
        );
        // Mesh facets make the true sdf piecewise; loosen only as far as the
        // facet curvature error requires.
        assert_grads_close(&[pts], EPS, 1e-5, "sdf", |g, vars| {
            let d = g.custom(op.clone(), &[vars[0]]);
            let sq = g.square(d);
            g.sum(sq)
        });
    }

    #[test]
    fn laplacian_grads_and_linearity() {
        let mesh = Arc::new(grid_sheet(4, 4, 1.0, 1.0));
        let op = Rc::new(LaplacianOp { mesh: mesh.clone() });
        let v = mesh.vertex_count();
        let p = seeded::<f64>(vec![v, 3], 31);
        let target = seeded::<f64>(vec![v, 3], 32);
        assert_grads_close(&[p], EPS, TOL, "laplacian", |g, vars| {
            let lap = g.custom(op.clone(), &[vars[0]]);
            let t = g.constant(target.clone());
            g.l1_mean(lap, t)
        });
    }

    #[test]
    fn edge_lengths_grads() {
        let mesh = grid_sheet(4, 4, 1.0, 1.0);
        let edges = edge_list(&mesh);
        let e = edges.len();
        let op = Rc::new(EdgeLengthsOp { edges });
        let v = mesh.vertex_count();
        let mut p = seeded::<f64>(vec![v, 3], 51);
        // Spread vertices out so no edge is near zero length.
        for (i, val) in p.data_mut().iter_mut().enumerate() {
            *val += (i % 7) as f64 * 0.3;
        }
        let target = seeded::<f64>(vec![e, 1], 52);
        assert_grads_close(&[p], EPS, TOL, "edge_lengths", |g, vars| {
            let lens = g.custom(op.clone(), &[vars[0]]);
            let t = g.constant(target.clone());
            g.l1_mean(lens, t)
        });
    }

    /// Full deformation pipeline: displacement d and log ρ through frames,
    /// weights, pose, Laplacian and sdf terms, as one composite loss.
    #[test]
    fn full_deformation_pipeline_grads() {
        let mesh = grid_sheet(4, 4, 0.6, 0.6);
        let frames = mesh.local_frames(&mesh.positions).unwrap();
        let seeds0 = vec![[0.2, 0.2, -0.15], [0.5, 0.3, -0.2], [0.3, 0.6, -0.1]];
        let transforms = vec![
            SeedTransform {
                rotation: vm::rotation_about_axis([0.0, 0.0, 1.0], 0.3),
                translation: [0.05, 0.0, 0.1],
            },
            SeedTransform {
                rotation: vm::rotation_about_axis([1.0, 0.0, 0.0], -0.2),
                translation: [0.0, 0.1, 0.0],
            },
            SeedTransform {
                rotation: vm::rotation_about_axis([0.0, 1.0, 0.0], 0.15),
                translation: [0.02, -0.03, 0.08],
            },
        ];
        let apply_op = Rc::new(FramesApplyOp {
            g0: mesh.positions.clone(),
            frames,
        });
        let weights_op = Rc::new(SkinWeightsOp {
            seeds0: seeds0.clone(),
            seed_parts: vec![0, 0, 0],
            part_count: 1,
        });
        let pose_op = Rc::new(LbsPoseOp { seeds0, transforms });
        let lap_op = Rc::new(LaplacianOp {
            mesh: Arc::new(mesh.clone()),
        });
        let sphere = uv_sphere(0.4, 12, 18);
        let sdf: Arc<dyn SignedDistance + Send + Sync> = Arc::new(crate::sdf::MeshSdf::build(&sphere));
        let sdf_op = Rc::new(SdfOp { sdf });

        let v = mesh.vertex_count();
        let mut d = seeded::<f64>(vec![v, 3], 61);
        for val in d.data_mut() {
            *val *= 0.05; // keep displacements small and frames stable
        }
        let log_rho = TensorData::from_f64_slice(vec![1], &[-1.1]);
        let target = seeded::<f64>(vec![v, 3], 62);
        let lap_target = seeded::<f64>(vec![v, 3], 63);

        assert_grads_close(
            &[d, log_rho],
            EPS,
            1e-5,
            "deformation pipeline",
            |g, vars| {
                let g_hat = g.custom(apply_op.clone(), &[vars[0]]);
                let w = g.custom(weights_op.clone(), &[g_hat, vars[1]]);
                let posed = g.custom(pose_op.clone(), &[g_hat, w]);
                let t = g.constant(target.clone());
                let l_pos = g.l1_mean(posed, t);
                let lap = g.custom(lap_op.clone(), &[posed]);
                let lt = g.constant(lap_target.clone());
                let l_lap = g.l1_mean(lap, lt);
                let sd = g.custom(sdf_op.clone(), &[posed]);
                let sq = g.square(sd);
                let l_sdf = g.mean(sq);
                let a = g.add(l_pos, l_lap);
                g.add(a, l_sdf)
            },
        );
    }

    /// Posing through the tape matches the plain f64 path bit for bit.
    #[test]
    fn tape_pose_matches_reference_path() {
        let mesh = grid_sheet(3, 4, 0.5, 0.7);
        let frames = mesh.local_frames(&mesh.positions).unwrap();
        let seeds0 = vec![[0.1, 0.1, -0.2], [0.4, 0.5, -0.25]];
        let transforms = vec![
            SeedTransform {
                rotation: vm::rotation_about_axis([0.0, 1.0, 0.0], 0.5),
                translation: [0.1, 0.0, 0.0],
            },
            SeedTransform::IDENTITY,
        ];
        let driver = crate::body::DriverFrame {
            transforms: transforms.clone(),
            seed_positions: seeds0.clone(),
            seed_normals: vec![[0.0, 0.0, 1.0]; 2],
        };
        let v = mesh.vertex_count();
        let d_rows: Vec<V3> = (0..v).map(|i| [0.01 * i as f64, -0.004, 0.02]).collect();
        let rho = vec![0.3, 0.3];

        let g_hat_ref =
            skinning::apply_local_displacement(&mesh.positions, &frames, &d_rows);
        let w_ref = skinning::skinning_weights(&g_hat_ref, &seeds0, &rho);
        let posed_ref = skinning::pose(&g_hat_ref, &w_ref, &seeds0, &driver);

        let mut g: Graph<f64> = Graph::new();
        let d = g.constant(v3_tensor(&d_rows));
        let log_rho = g.constant(TensorData::from_f64_slice(vec![1], &[rho[0].ln()]));
        let apply_op = Rc::new(FramesApplyOp {
            g0: mesh.positions.clone(),
            frames,
        });
        let weights_op = Rc::new(SkinWeightsOp {
            seeds0: seeds0.clone(),
            seed_parts: vec![0, 0],
            part_count: 1,
        });
        let pose_op = Rc::new(LbsPoseOp { seeds0, transforms });
        let g_hat: Var = g.custom(apply_op, &[d]);
        let w = g.custom(weights_op, &[g_hat, log_rho]);
        let posed = g.custom(pose_op, &[g_hat, w]);

        let tape_w = g.value(w).map_to_f64();
        assert_eq!(tape_w, w_ref);
        assert_eq!(rows_v3(g.value(posed)), posed_ref);
        assert!(
            skinning::partition_of_unity_error(&tape_w, 2) < 1e-6,
            "weights remain a partition of unity inside the tape"
        );
    }
}
