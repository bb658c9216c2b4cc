//! Procedural primitive meshes used by the toy scenes and tests. All shapes
//! come with a UV chart and pass `TriMesh` validation.

use crate::mesh::TriMesh;
use crate::vecmath::V3;

/// Flat sheet in the XY plane: x in [0, width], y in [0, height], z = 0,
/// `nx` x `ny` vertices, uv spanning the unit square. Vertex order is
/// row-major with x fastest, so vertex 0 is the (0, 0) corner.
pub fn grid_sheet(nx: usize, ny: usize, width: f64, height: f64) -> TriMesh {
    assert!(nx >= 2 && ny >= 2);
    let mut positions = Vec::with_capacity(nx * ny);
    let mut uvs = Vec::with_capacity(nx * ny);
    for y in 0..ny {
        for x in 0..nx {
            let (fu, fv) = (x as f64 / (nx - 1) as f64, y as f64 / (ny - 1) as f64);
            positions.push([fu * width, fv * height, 0.0]);
            uvs.push([fu, fv]);
        }
    }
    let mut tris = Vec::with_capacity(2 * (nx - 1) * (ny - 1));
    for y in 0..ny - 1 {
        for x in 0..nx - 1 {
            let i = y * nx + x;
            tris.push([i, i + 1, i + nx + 1]);
            tris.push([i, i + nx + 1, i + nx]);
        }
    }
    TriMesh::new(positions, tris, uvs).expect("grid sheet is always valid")
}

/// Open cylindrical sheet around the +Y axis: a partial tube covering
/// `arc` radians starting at angle 0, radius `radius`, y in [0, height].
/// No seam: the chart is a clean rectangle, which keeps UV rasterization
/// artifact-free. Used as the skirt-like garment.
pub fn wrap_sheet(radius: f64, arc: f64, height: f64, n_around: usize, n_up: usize) -> TriMesh {
    assert!(n_around >= 2 && n_up >= 2);
    assert!(arc > 0.0 && arc < std::f64::consts::TAU, "open sheet only");
    let mut positions = Vec::with_capacity(n_around * n_up);
    let mut uvs = Vec::with_capacity(n_around * n_up);
    for y in 0..n_up {
        for a in 0..n_around {
            let fu = a as f64 / (n_around - 1) as f64;
            let fv = y as f64 / (n_up - 1) as f64;
            let ang = fu * arc;
            positions.push([radius * ang.cos(), fv * height, radius * ang.sin()]);
            uvs.push([fu, fv]);
        }
    }
    let mut tris = Vec::new();
    for y in 0..n_up - 1 {
        for a in 0..n_around - 1 {
            let i = y * n_around + a;
            tris.push([i, i + 1, i + n_around + 1]);
            tris.push([i, i + n_around + 1, i + n_around]);
        }
    }
    TriMesh::new(positions, tris, uvs).expect("wrap sheet is always valid")
}

/// Closed (watertight) cylinder around the +Y axis: radius `radius`, y in
/// [0, height], welded side seam plus two cap fans. The side chart occupies
/// the band v in [0.15, 0.85]; cap vertices get small disc charts in the
/// remaining corners. Intended as the driver body, so uv quality only has to
/// be good enough for stable seed frames.
pub fn capped_cylinder(radius: f64, height: f64, n_around: usize, n_up: usize) -> TriMesh {
    assert!(n_around >= 3 && n_up >= 2);
    let mut positions: Vec<V3> = Vec::new();
    let mut uvs = Vec::new();
    for y in 0..n_up {
        for a in 0..n_around {
            let fu = a as f64 / n_around as f64; // wraps; seam vertex column a=0
            let fv = y as f64 / (n_up - 1) as f64;
            let ang = fu * std::f64::consts::TAU;
            positions.push([radius * ang.cos(), fv * height, radius * ang.sin()]);
            uvs.push([fu, 0.15 + 0.7 * fv]);
        }
    }
    let mut tris = Vec::new();
    for y in 0..n_up - 1 {
        for a in 0..n_around {
            let a1 = (a + 1) % n_around;
            let (i, j) = (y * n_around + a, y * n_around + a1);
            tris.push([i, j + n_around, j]);
            tris.push([i, i + n_around, j + n_around]);
        }
    }
    // Caps: one center vertex each, fanned to the boundary rings.
    let bottom_center = positions.len();
    positions.push([0.0, 0.0, 0.0]);
    uvs.push([0.08, 0.05]);
    let top_center = positions.len();
    positions.push([0.0, height, 0.0]);
    uvs.push([0.92, 0.05]);
    for a in 0..n_around {
        let a1 = (a + 1) % n_around;
        tris.push([bottom_center, a, a1]);
        let top_ring = (n_up - 1) * n_around;
        tris.push([top_center, top_ring + a1, top_ring + a]);
    }
    TriMesh::new(positions, tris, uvs).expect("capped cylinder is always valid")
}

/// Latitude/longitude sphere centered at the origin, welded seam, poles as
/// single vertices. Watertight; used by signed-distance tests.
pub fn uv_sphere(radius: f64, n_lat: usize, n_lon: usize) -> TriMesh {
    assert!(n_lat >= 3 && n_lon >= 3);
    let mut positions: Vec<V3> = Vec::new();
    let mut uvs = Vec::new();
    positions.push([0.0, -radius, 0.0]);
    uvs.push([0.5, 0.0]);
    for ring in 1..n_lat {
        let theta = std::f64::consts::PI * ring as f64 / n_lat as f64 - std::f64::consts::FRAC_PI_2;
        for l in 0..n_lon {
            let phi = std::f64::consts::TAU * l as f64 / n_lon as f64;
            positions.push([
                radius * theta.cos() * phi.cos(),
                radius * theta.sin(),
                radius * theta.cos() * phi.sin(),
            ]);
            uvs.push([l as f64 / n_lon as f64, ring as f64 / n_lat as f64]);
        }
    }
    let top = positions.len();
    positions.push([0.0, radius, 0.0]);
    uvs.push([0.5, 1.0]);

    let ring_start = |r: usize| 1 + (r - 1) * n_lon;
    let mut tris = Vec::new();
    for l in 0..n_lon {
        let l1 = (l + 1) % n_lon;
        tris.push([0, ring_start(1) + l, ring_start(1) + l1]);
        let last = ring_start(n_lat - 1);
        tris.push([top, last + l1, last + l]);
    }
    for r in 1..n_lat - 1 {
        for l in 0..n_lon {
            let l1 = (l + 1) % n_lon;
            let (a, b) = (ring_start(r) + l, ring_start(r) + l1);
            let (c, d) = (ring_start(r + 1) + l, ring_start(r + 1) + l1);
            tris.push([a, d, b]);
            tris.push([a, c, d]);
        }
    }
    TriMesh::new(positions, tris, uvs).expect("uv sphere is always valid")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vecmath as vm;

    #[test]
    fn shapes_validate_and_have_expected_counts() {
        let sheet = grid_sheet(5, 4, 1.0, 0.8);
        assert_eq!(sheet.vertex_count(), 20);
        assert_eq!(sheet.triangles.len(), 24);

        let wrap = wrap_sheet(0.3, 4.0, 0.5, 8, 5);
        assert_eq!(wrap.vertex_count(), 40);

        let cyl = capped_cylinder(0.2, 1.0, 12, 6);
        assert_eq!(cyl.vertex_count(), 12 * 6 + 2);

        let sph = uv_sphere(1.0, 8, 12);
        assert_eq!(sph.vertex_count(), 2 + 7 * 12);
    }

    #[test]
    fn closed_shapes_are_watertight() {
        for mesh in [capped_cylinder(0.2, 1.0, 12, 6), uv_sphere(1.0, 8, 12)] {
            use std::collections::HashMap;
            let mut count: HashMap<(usize, usize), usize> = HashMap::new();
            for t in &mesh.triangles {
                for (a, b) in [(t[0], t[1]), (t[1], t[2]), (t[2], t[0])] {
                    *count.entry((a.min(b), a.max(b))).or_default() += 1;
                }
            }
            assert!(
                count.values().all(|&c| c == 2),
                "every edge must be shared by exactly two triangles"
            );
        }
    }

    #[test]
    fn closed_shapes_have_outward_normals() {
        // Signed volume via divergence theorem must be positive when
        // triangles wind outward.
        for (mesh, expect) in [
            (uv_sphere(1.0, 16, 24), 4.0 / 3.0 * std::f64::consts::PI),
            (
                capped_cylinder(0.5, 2.0, 48, 8),
                std::f64::consts::PI * 0.25 * 2.0,
            ),
        ] {
            let mut vol = 0.0;
            for t in &mesh.triangles {
                let [a, b, c] = *t;
                vol += vm::dot(
                    mesh.positions[a],
                    vm::cross(mesh.positions[b], mesh.positions[c]),
                ) / 6.0;
            }
            assert!(
                vol > 0.9 * expect && vol < 1.01 * expect,
                "signed volume {vol} vs analytic {expect}"
            );
        }
    }
}
