//! UV-space feature maps: rasterizing per-vertex quantities into square
//! texel grids and sampling them back bilinearly.
//!
//! Both directions are linear in the per-vertex / per-texel values, so they
//! are precomputed as sparse tables (`RasterTable`, `SampleTable`). The
//! tables double as the forward/backward kernels of the differentiable ops.

use std::collections::VecDeque;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mesh::TriMesh;

#[derive(Debug, Error)]
pub enum MapError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("header: {0}")]
    Header(#[from] serde_json::Error),
    #[error("payload has {got} f32 values, header says {want}")]
    PayloadSize { got: usize, want: usize },
    #[error("uv chart covers no texel at resolution {0}")]
    NothingCovered(usize),
}

/// Square w x w x c scalar grid with a chart-coverage mask. Texel (x, y)
/// has its center at uv = ((x+0.5)/w, (y+0.5)/w); data layout is
/// `data[(y*w + x)*c + ch]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f32>,
    pub coverage: Vec<bool>,
}

#[derive(Serialize, Deserialize)]
struct MapHeader {
    width: usize,
    channels: usize,
    semantics: String,
    coverage: Vec<u8>,
}

impl FeatureMap {
    pub fn zeros(width: usize, channels: usize) -> Self {
        Self {
            width,
            channels,
            data: vec![0.0; width * width * channels],
            coverage: vec![false; width * width],
        }
    }

    /// Dumps `<dir>/<name>.f32` (raw little-endian payload) plus
    /// `<dir>/<name>.json` (shape, semantics, coverage).
    pub fn save(&self, dir: &Path, name: &str, semantics: &str) -> Result<(), MapError> {
        let header = MapHeader {
            width: self.width,
            channels: self.channels,
            semantics: semantics.to_string(),
            coverage: self.coverage.iter().map(|&b| b as u8).collect(),
        };
        std::fs::write(
            dir.join(format!("{name}.json")),
            serde_json::to_string_pretty(&header)?,
        )?;
        let mut bytes = Vec::with_capacity(self.data.len() * 4);
        for v in &self.data {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        std::fs::write(dir.join(format!("{name}.f32")), bytes)?;
        Ok(())
    }

    pub fn load(dir: &Path, name: &str) -> Result<Self, MapError> {
        let header: MapHeader =
            serde_json::from_str(&std::fs::read_to_string(dir.join(format!("{name}.json")))?)?;
        let bytes = std::fs::read(dir.join(format!("{name}.f32")))?;
        let want = header.width * header.width * header.channels;
        if bytes.len() != want * 4 {
            return Err(MapError::PayloadSize {
                got: bytes.len() / 4,
                want,
            });
        }
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Self {
            width: header.width,
            channels: header.channels,
            data,
            coverage: header.coverage.iter().map(|&b| b != 0).collect(),
        })
    }
}

/// Precomputed rasterization: every texel refers to one mesh triangle through
/// three (vertex, barycentric weight) pairs. Covered texels get the triangle
/// that rasterizes onto their center (last-write-wins on overlap); uncovered
/// texels inherit their nearest covered neighbor by flood fill.
#[derive(Debug, Clone)]
pub struct RasterTable {
    pub width: usize,
    pub vertices: Vec<[usize; 3]>,
    pub weights: Vec<[f64; 3]>,
    pub coverage: Vec<bool>,
    /// Number of texels whose center was covered by more than one triangle.
    pub overlap_count: usize,
}

impl RasterTable {
    pub fn build(mesh: &TriMesh, width: usize) -> Result<Self, MapError> {
        let w = width;
        let mut vertices = vec![[usize::MAX; 3]; w * w];
        let mut weights = vec![[0.0; 3]; w * w];
        let mut covered = vec![false; w * w];
        let mut overlap_count = 0;

        for tri in &mesh.triangles {
            let [i0, i1, i2] = *tri;
            let (a, b, c) = (mesh.uvs[i0], mesh.uvs[i1], mesh.uvs[i2]);
            let denom = (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0]);
            if denom.abs() < 1e-14 {
                continue; // degenerate in uv; contributes no texels
            }
            let min_u = a[0].min(b[0]).min(c[0]);
            let max_u = a[0].max(b[0]).max(c[0]);
            let min_v = a[1].min(b[1]).min(c[1]);
            let max_v = a[1].max(b[1]).max(c[1]);
            let x0 = ((min_u * w as f64 - 0.5).floor().max(0.0)) as usize;
            let x1 = ((max_u * w as f64 - 0.5).ceil() as isize).min(w as isize - 1);
            let y0 = ((min_v * w as f64 - 0.5).floor().max(0.0)) as usize;
            let y1 = ((max_v * w as f64 - 0.5).ceil() as isize).min(w as isize - 1);
            if x1 < 0 || y1 < 0 {
                continue;
            }
            for y in y0..=y1 as usize {
                for x in x0..=x1 as usize {
                    let u = (x as f64 + 0.5) / w as f64;
                    let v = (y as f64 + 0.5) / w as f64;
                    let w1 = ((u - a[0]) * (c[1] - a[1]) - (v - a[1]) * (c[0] - a[0])) / denom;
                    let w2 = ((b[0] - a[0]) * (v - a[1]) - (b[1] - a[1]) * (u - a[0])) / denom;
                    let w0 = 1.0 - w1 - w2;
                    const EPS: f64 = -1e-9;
                    if w0 >= EPS && w1 >= EPS && w2 >= EPS {
                        let t = y * w + x;
                        if covered[t] {
                            overlap_count += 1;
                        }
                        covered[t] = true;
                        vertices[t] = [i0, i1, i2];
                        weights[t] = [w0.max(0.0), w1.max(0.0), w2.max(0.0)];
                    }
                }
            }
        }
        if overlap_count > 0 {
            log::warn!("uv rasterization: {overlap_count} texel centers covered by multiple triangles (last-write-wins)");
        }
        if !covered.iter().any(|&c| c) {
            return Err(MapError::NothingCovered(w));
        }

        // Flood-fill dilation: uncovered texels copy the attribution of their
        // nearest covered neighbor (BFS over the 4-neighborhood, seeded in
        // texel order for determinism).
        let mut filled = covered.clone();
        let mut queue: VecDeque<usize> = (0..w * w).filter(|&t| covered[t]).collect();
        while let Some(t) = queue.pop_front() {
            let (x, y) = (t % w, t / w);
            let mut neighbors = Vec::with_capacity(4);
            if x > 0 {
                neighbors.push(t - 1);
            }
            if x + 1 < w {
                neighbors.push(t + 1);
            }
            if y > 0 {
                neighbors.push(t - w);
            }
            if y + 1 < w {
                neighbors.push(t + w);
            }
            for n in neighbors {
                if !filled[n] {
                    filled[n] = true;
                    vertices[n] = vertices[t];
                    weights[n] = weights[t];
                    queue.push_back(n);
                }
            }
        }

        Ok(Self {
            width: w,
            vertices,
            weights,
            coverage: covered,
            overlap_count,
        })
    }

    /// Rasterizes per-vertex rows (`values[v*channels..]`) into a map.
    pub fn apply_f64(&self, values: &[f64], channels: usize) -> Vec<f64> {
        let w = self.width;
        let mut out = vec![0.0; w * w * channels];
        for t in 0..w * w {
            let vs = self.vertices[t];
            let ws = self.weights[t];
            for ch in 0..channels {
                out[t * channels + ch] = ws[0] * values[vs[0] * channels + ch]
                    + ws[1] * values[vs[1] * channels + ch]
                    + ws[2] * values[vs[2] * channels + ch];
            }
        }
        out
    }

    pub fn to_feature_map(&self, values: &[f64], channels: usize) -> FeatureMap {
        let data = self
            .apply_f64(values, channels)
            .into_iter()
            .map(|v| v as f32)
            .collect();
        FeatureMap {
            width: self.width,
            channels,
            data,
            coverage: self.coverage.clone(),
        }
    }
}

/// Precomputed bilinear sampling of a w x w map at a fixed list of uv
/// points (border-clamped): four (texel, weight) pairs per point.
#[derive(Debug, Clone)]
pub struct SampleTable {
    pub width: usize,
    pub texels: Vec<[usize; 4]>,
    pub weights: Vec<[f64; 4]>,
}

impl SampleTable {
    pub fn build(uvs: &[[f64; 2]], width: usize) -> Self {
        let mut texels = Vec::with_capacity(uvs.len());
        let mut weights = Vec::with_capacity(uvs.len());
        for uv in uvs {
            let (t, w) = bilinear_taps(*uv, width);
            texels.push(t);
            weights.push(w);
        }
        Self {
            width,
            texels,
            weights,
        }
    }

    /// Samples per-point rows out of a map laid out `[(y*w+x)*c + ch]`.
    pub fn apply_f64(&self, map: &[f64], channels: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.texels.len() * channels];
        for (i, (ts, ws)) in self.texels.iter().zip(&self.weights).enumerate() {
            for ch in 0..channels {
                let mut acc = 0.0;
                for k in 0..4 {
                    acc += ws[k] * map[ts[k] * channels + ch];
                }
                out[i * channels + ch] = acc;
            }
        }
        out
    }
}

/// Bilinear taps for one uv point: texel indices and weights, border-clamped.
pub fn bilinear_taps(uv: [f64; 2], width: usize) -> ([usize; 4], [f64; 4]) {
    let w = width;
    let clamp = |v: isize| -> usize { v.clamp(0, w as isize - 1) as usize };
    let fx = uv[0] * w as f64 - 0.5;
    let fy = uv[1] * w as f64 - 0.5;
    let x0 = fx.floor();
    let y0 = fy.floor();
    let tx = fx - x0;
    let ty = fy - y0;
    let (x0i, y0i) = (x0 as isize, y0 as isize);
    let (x0c, x1c, y0c, y1c) = (clamp(x0i), clamp(x0i + 1), clamp(y0i), clamp(y0i + 1));
    (
        [
            y0c * w + x0c,
            y0c * w + x1c,
            y1c * w + x0c,
            y1c * w + x1c,
        ],
        [
            (1.0 - tx) * (1.0 - ty),
            tx * (1.0 - ty),
            (1.0 - tx) * ty,
            tx * ty,
        ],
    )
}

/// One-off bilinear sample of a FeatureMap.
pub fn sample_at_uv(map: &FeatureMap, uv: [f64; 2]) -> Vec<f64> {
    let (ts, ws) = bilinear_taps(uv, map.width);
    (0..map.channels)
        .map(|ch| {
            (0..4)
                .map(|k| ws[k] * map.data[ts[k] * map.channels + ch] as f64)
                .sum()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::shapes::grid_sheet;

    #[test]
    fn constant_field_rasterizes_to_constant() {
        let mesh = grid_sheet(5, 5, 1.0, 1.0);
        let table = RasterTable::build(&mesh, 16).unwrap();
        let values: Vec<f64> = (0..mesh.vertex_count()).flat_map(|_| [3.25, -1.5]).collect();
        let map = table.apply_f64(&values, 2);
        for t in 0..16 * 16 {
            assert!((map[t * 2] - 3.25).abs() < 1e-12);
            assert!((map[t * 2 + 1] + 1.5).abs() < 1e-12);
        }
        // A full-square chart covers everything.
        assert!(table.coverage.iter().all(|&c| c));
    }

    #[test]
    fn raster_then_sample_recovers_vertex_values() {
        let mesh = grid_sheet(6, 6, 1.0, 1.0);
        let table = RasterTable::build(&mesh, 32).unwrap();
        // Linear-in-uv fields: both the per-triangle raster and the bilinear
        // sample reproduce linear polynomials, so interior vertices recover
        // exactly; quadratic fields pick up O(h²) smoothing instead.
        let values: Vec<f64> = mesh
            .uvs
            .iter()
            .flat_map(|uv| [uv[0] * 2.0 - 0.3, uv[0] + uv[1], uv[0] - 0.5 * uv[1]])
            .collect();
        let quad: Vec<f64> = mesh.uvs.iter().map(|uv| uv[1] * uv[1]).collect();
        let map = table.apply_f64(&values, 3);
        let quad_map = table.apply_f64(&quad, 1);
        let sampler = SampleTable::build(&mesh.uvs, 32);
        let back = sampler.apply_f64(&map, 3);
        let quad_back = sampler.apply_f64(&quad_map, 1);
        for (v, uv) in mesh.uvs.iter().enumerate() {
            let interior = uv.iter().all(|&c| c > 0.15 && c < 0.85);
            if !interior {
                continue;
            }
            for ch in 0..3 {
                let err = (back[v * 3 + ch] - values[v * 3 + ch]).abs();
                assert!(err < 1e-4, "vertex {v} channel {ch}: err {err}");
            }
            let err = (quad_back[v] - quad[v]).abs();
            assert!(err < 5e-3, "vertex {v} quadratic channel: err {err}");
        }
    }

    #[test]
    fn partial_chart_dilates_into_uncovered_texels() {
        // Chart occupying only the left half of uv space.
        let mut mesh = grid_sheet(5, 5, 1.0, 1.0);
        for uv in mesh.uvs.iter_mut() {
            uv[0] *= 0.5;
        }
        let mesh = TriMesh::new(mesh.positions.clone(), mesh.triangles.clone(), mesh.uvs.clone())
            .unwrap();
        let table = RasterTable::build(&mesh, 16).unwrap();
        let covered = table.coverage.iter().filter(|&&c| c).count();
        assert!(covered > 0 && covered < 16 * 16, "chart is partial");
        // Every texel must still have a valid attribution after dilation.
        let values: Vec<f64> = vec![1.0; mesh.vertex_count()];
        let map = table.apply_f64(&values, 1);
        for v in map {
            assert!((v - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn bilinear_semantics_at_centers_and_midpoints() {
        let mut map = FeatureMap::zeros(4, 1);
        for t in 0..16 {
            map.data[t] = t as f32;
        }
        // Texel (1, 2) center.
        let uv = [(1.0 + 0.5) / 4.0, (2.0 + 0.5) / 4.0];
        assert_eq!(sample_at_uv(&map, uv)[0], (2 * 4 + 1) as f64);
        // Midpoint between texels (1,2) and (2,2).
        let uv = [(2.0) / 4.0, (2.0 + 0.5) / 4.0];
        assert_eq!(sample_at_uv(&map, uv)[0], (9.0 + 10.0) / 2.0);
        // Border clamp: uv (0,0) equals corner texel.
        assert_eq!(sample_at_uv(&map, [0.0, 0.0])[0], 0.0);
    }

    #[test]
    fn feature_map_files_round_trip() {
        let mut map = FeatureMap::zeros(8, 3);
        for (i, v) in map.data.iter_mut().enumerate() {
            *v = (i as f32).sin();
        }
        map.coverage[5] = true;
        let dir = tempfile::tempdir().unwrap();
        map.save(dir.path(), "probe", "test map").unwrap();
        let loaded = FeatureMap::load(dir.path(), "probe").unwrap();
        assert_eq!(map, loaded);
    }

    #[test]
    fn overlapping_charts_count_overlaps() {
        // Two quads stacked on the same uv square.
        let positions = vec![
            [0.0, 0.0, 0.0],
            [1.0, 0.0, 0.0],
            [1.0, 1.0, 0.0],
            [0.0, 1.0, 0.0],
            [0.0, 0.0, 1.0],
            [1.0, 0.0, 1.0],
            [1.0, 1.0, 1.0],
            [0.0, 1.0, 1.0],
        ];
        let uvs = vec![
            [0.0, 0.0],
            [1.0, 0.0],
            [1.0, 1.0],
            [0.0, 1.0],
            [0.0, 0.0],
            [1.0, 0.0],
            [1.0, 1.0],
            [0.0, 1.0],
        ];
        let tris = vec![[0, 1, 2], [0, 2, 3], [4, 5, 6], [4, 6, 7]];
        let mesh = TriMesh::new(positions, tris, uvs).unwrap();
        let table = RasterTable::build(&mesh, 8).unwrap();
        assert!(table.overlap_count > 0, "stacked charts must be flagged");
        // Last-write-wins: attributions come from the second quad (vertices 4..8).
        for t in 0..64 {
            assert!(table.vertices[t].iter().all(|&v| v >= 4));
        }
    }
}
