//! Bounding-volume hierarchy over triangles for closest-point queries, plus a
//! generalized winding number for inside/outside classification.

use crate::vecmath::{self as vm, V3};

#[derive(Debug, Clone, Copy)]
struct Aabb {
    lo: V3,
    hi: V3,
}

impl Aabb {
    fn empty() -> Self {
        Self {
            lo: [f64::INFINITY; 3],
            hi: [f64::NEG_INFINITY; 3],
        }
    }
    fn grow(&mut self, p: V3) {
        for k in 0..3 {
            self.lo[k] = self.lo[k].min(p[k]);
            self.hi[k] = self.hi[k].max(p[k]);
        }
    }
    fn merge(&mut self, o: &Aabb) {
        self.grow(o.lo);
        self.grow(o.hi);
    }
    /// Squared distance from a point to the box (0 inside).
    fn dist2(&self, p: V3) -> f64 {
        let mut d2 = 0.0;
        for k in 0..3 {
            let d = (self.lo[k] - p[k]).max(0.0).max(p[k] - self.hi[k]);
            d2 += d * d;
        }
        d2
    }
}

#[derive(Debug)]
enum Node {
    Leaf {
        bounds: Aabb,
        tris: Vec<usize>,
    },
    Inner {
        bounds: Aabb,
        left: usize,
        right: usize,
    },
}

/// Result of a closest-point query.
#[derive(Debug, Clone, Copy)]
pub struct ClosestHit {
    pub distance2: f64,
    pub point: V3,
    pub triangle: usize,
    /// Barycentric coordinates of `point` in `triangle`.
    pub bary: [f64; 3],
}

#[derive(Debug)]
pub struct TriBvh {
    positions: Vec<V3>,
    triangles: Vec<[usize; 3]>,
    nodes: Vec<Node>,
    root: usize,
}

const LEAF_SIZE: usize = 4;

impl TriBvh {
    pub fn build(positions: &[V3], triangles: &[[usize; 3]]) -> Self {
        assert!(!triangles.is_empty(), "BVH over empty mesh");
        let centroids: Vec<V3> = triangles
            .iter()
            .map(|t| {
                vm::scale(
                    vm::add(vm::add(positions[t[0]], positions[t[1]]), positions[t[2]]),
                    1.0 / 3.0,
                )
            })
            .collect();
        let mut bvh = Self {
            positions: positions.to_vec(),
            triangles: triangles.to_vec(),
            nodes: Vec::new(),
            root: 0,
        };
        let mut idx: Vec<usize> = (0..triangles.len()).collect();
        bvh.root = bvh.build_node(&mut idx, &centroids);
        bvh
    }

    fn tri_bounds(&self, t: usize) -> Aabb {
        let mut b = Aabb::empty();
        for &v in &self.triangles[t] {
            b.grow(self.positions[v]);
        }
        b
    }

    fn build_node(&mut self, idx: &mut [usize], centroids: &[V3]) -> usize {
        let mut bounds = Aabb::empty();
        for &t in idx.iter() {
            let tb = self.tri_bounds(t);
            bounds.merge(&tb);
        }
        if idx.len() <= LEAF_SIZE {
            self.nodes.push(Node::Leaf {
                bounds,
                tris: idx.to_vec(),
            });
            return self.nodes.len() - 1;
        }
        // Median split along the longest centroid axis.
        let mut cb = Aabb::empty();
        for &t in idx.iter() {
            cb.grow(centroids[t]);
        }
        let extents = vm::sub(cb.hi, cb.lo);
        let axis = (0..3)
            .max_by(|&a, &b| extents[a].total_cmp(&extents[b]))
            .unwrap();
        let mid = idx.len() / 2;
        idx.select_nth_unstable_by(mid, |&a, &b| centroids[a][axis].total_cmp(&centroids[b][axis]));
        let (lo, hi) = idx.split_at_mut(mid);
        let left = self.build_node(lo, centroids);
        let right = self.build_node(hi, centroids);
        self.nodes.push(Node::Inner {
            bounds,
            left,
            right,
        });
        self.nodes.len() - 1
    }

    /// Exact closest point on the surface to `p`.
    pub fn closest_point(&self, p: V3) -> ClosestHit {
        let mut best = ClosestHit {
            distance2: f64::INFINITY,
            point: [0.0; 3],
            triangle: usize::MAX,
            bary: [0.0; 3],
        };
        self.closest_rec(self.root, p, &mut best);
        best
    }

    fn closest_rec(&self, node: usize, p: V3, best: &mut ClosestHit) {
        match &self.nodes[node] {
            Node::Leaf { bounds, tris } => {
                if bounds.dist2(p) >= best.distance2 {
                    return;
                }
                for &t in tris {
                    let [a, b, c] = self.triangles[t];
                    let (q, bary) = closest_point_on_triangle(
                        p,
                        self.positions[a],
                        self.positions[b],
                        self.positions[c],
                    );
                    let d2 = vm::dist2(p, q);
                    if d2 < best.distance2 {
                        *best = ClosestHit {
                            distance2: d2,
                            point: q,
                            triangle: t,
                            bary,
                        };
                    }
                }
            }
            Node::Inner {
                bounds,
                left,
                right,
            } => {
                if bounds.dist2(p) >= best.distance2 {
                    return;
                }
                // Visit the nearer child first for tighter pruning.
                let (dl, dr) = (
                    self.node_bounds(*left).dist2(p),
                    self.node_bounds(*right).dist2(p),
                );
                let (first, second) = if dl <= dr {
                    (*left, *right)
                } else {
                    (*right, *left)
                };
                self.closest_rec(first, p, best);
                self.closest_rec(second, p, best);
            }
        }
    }

    fn node_bounds(&self, node: usize) -> &Aabb {
        match &self.nodes[node] {
            Node::Leaf { bounds, .. } | Node::Inner { bounds, .. } => bounds,
        }
    }

    /// Generalized winding number of the whole mesh around `p`;
    /// approximately 1 inside a closed mesh, 0 outside.
    pub fn winding_number(&self, p: V3) -> f64 {
        let mut total = 0.0;
        for t in &self.triangles {
            let a = vm::sub(self.positions[t[0]], p);
            let b = vm::sub(self.positions[t[1]], p);
            let c = vm::sub(self.positions[t[2]], p);
            let (la, lb, lc) = (vm::norm(a), vm::norm(b), vm::norm(c));
            let numer = vm::dot(a, vm::cross(b, c));
            let denom =
                la * lb * lc + vm::dot(a, b) * lc + vm::dot(b, c) * la + vm::dot(c, a) * lb;
            total += 2.0 * numer.atan2(denom);
        }
        total / (4.0 * std::f64::consts::PI)
    }
}

/// Closest point on triangle abc to p, with barycentric coordinates.
/// Region-based case analysis (vertices, edges, interior).
pub fn closest_point_on_triangle(p: V3, a: V3, b: V3, c: V3) -> (V3, [f64; 3]) {
    let ab = vm::sub(b, a);
    let ac = vm::sub(c, a);
    let ap = vm::sub(p, a);

    let d1 = vm::dot(ab, ap);
    let d2 = vm::dot(ac, ap);
    if d1 <= 0.0 && d2 <= 0.0 {
        return (a, [1.0, 0.0, 0.0]);
    }

    let bp = vm::sub(p, b);
    let d3 = vm::dot(ab, bp);
    let d4 = vm::dot(ac, bp);
    if d3 >= 0.0 && d4 <= d3 {
        return (b, [0.0, 1.0, 0.0]);
    }

    let vc = d1 * d4 - d3 * d2;
    if vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0 {
        let v = d1 / (d1 - d3);
        return (vm::add(a, vm::scale(ab, v)), [1.0 - v, v, 0.0]);
    }

    let cp = vm::sub(p, c);
    let d5 = vm::dot(ab, cp);
    let d6 = vm::dot(ac, cp);
    if d6 >= 0.0 && d5 <= d6 {
        return (c, [0.0, 0.0, 1.0]);
    }

    let vb = d5 * d2 - d1 * d6;
    if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
        let w = d2 / (d2 - d6);
        return (vm::add(a, vm::scale(ac, w)), [1.0 - w, 0.0, w]);
    }

    let va = d3 * d6 - d5 * d4;
    if va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0 {
        let w = (d4 - d3) / ((d4 - d3) + (d5 - d6));
        return (
            vm::add(b, vm::scale(vm::sub(c, b), w)),
            [0.0, 1.0 - w, w],
        );
    }

    let denom = 1.0 / (va + vb + vc);
    let v = vb * denom;
    let w = vc * denom;
    (
        vm::add(a, vm::add(vm::scale(ab, v), vm::scale(ac, w))),
        [1.0 - v - w, v, w],
    )
}
