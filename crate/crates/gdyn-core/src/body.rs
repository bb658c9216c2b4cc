//! The animated driver surface: seed sampling, per-seed rigid transforms
//! derived from surface frames, part labels, and the canonical SDF oracle.
//!
//! "Body" is deliberately generic: any animated mesh with fixed connectivity
//! can drive a garment, including another garment layer.

use std::cmp::Reverse;
use std::collections::BinaryHeap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use thiserror::Error;

use crate::mesh::{MeshError, TriMesh};
use crate::sdf::MeshSdf;
use crate::vecmath::{self as vm, M3, V3};

/// The five body parts carrying independent skinning kernel radii. Toy scenes
/// label everything `UpperBody`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum PartLabel {
    UpperBody,
    ForeArm,
    RearArm,
    Thigh,
    Calf,
}

impl PartLabel {
    pub const ALL: [PartLabel; 5] = [
        PartLabel::UpperBody,
        PartLabel::ForeArm,
        PartLabel::RearArm,
        PartLabel::Thigh,
        PartLabel::Calf,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PartLabel::UpperBody => "upper_body",
            PartLabel::ForeArm => "fore_arm",
            PartLabel::RearArm => "rear_arm",
            PartLabel::Thigh => "thigh",
            PartLabel::Calf => "calf",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|p| p.name() == s)
    }

    pub fn index(self) -> usize {
        Self::ALL.iter().position(|p| *p == self).unwrap()
    }
}

#[derive(Debug, Error)]
pub enum BodyError {
    #[error("requested {n} seeds but the mesh has only {verts} vertices")]
    TooManySeeds { n: usize, verts: usize },
    #[error("part {0} has no vertices but was assigned a seed quota")]
    EmptyPart(&'static str),
    #[error("labels length {got} does not match vertex count {want}")]
    LabelLength { got: usize, want: usize },
    #[error("part label file line {line}: {msg}")]
    LabelParse { line: usize, msg: String },
    #[error("vertex {0} has no part label")]
    MissingLabel(usize),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("mesh: {0}")]
    Mesh(#[from] MeshError),
    #[error("posed frame has {got} vertices, canonical mesh has {want}")]
    PoseLength { got: usize, want: usize },
}

/// Sidecar format: one `vertex_index part_name` pair per line.
pub fn load_part_labels(path: &Path, vertex_count: usize) -> Result<Vec<PartLabel>, BodyError> {
    let reader = BufReader::new(std::fs::File::open(path)?);
    let mut labels = vec![None; vertex_count];
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut tok = line.split_whitespace();
        let idx: usize = tok
            .next()
            .and_then(|t| t.parse().ok())
            .ok_or_else(|| BodyError::LabelParse {
                line: lineno + 1,
                msg: "expected vertex index".into(),
            })?;
        if idx >= vertex_count {
            return Err(BodyError::LabelParse {
                line: lineno + 1,
                msg: format!("vertex index {idx} out of range ({vertex_count} vertices)"),
            });
        }
        let name = tok.next().ok_or_else(|| BodyError::LabelParse {
            line: lineno + 1,
            msg: "expected part name".into(),
        })?;
        let part = PartLabel::parse(name).ok_or_else(|| BodyError::LabelParse {
            line: lineno + 1,
            msg: format!("unknown part '{name}'"),
        })?;
        labels[idx] = Some(part);
    }
    labels
        .into_iter()
        .enumerate()
        .map(|(i, l)| l.ok_or(BodyError::MissingLabel(i)))
        .collect()
}

pub fn save_part_labels(path: &Path, labels: &[PartLabel]) -> Result<(), BodyError> {
    let mut file = std::fs::File::create(path)?;
    for (i, l) in labels.iter().enumerate() {
        writeln!(file, "{} {}", i, l.name())?;
    }
    Ok(())
}

/// Single-source relaxation of geodesic (edge-graph) distances: runs Dijkstra
/// from `source` against the running `dist` array, improving entries in place.
fn relax_geodesic(mesh: &TriMesh, source: usize, dist: &mut [f64]) {
    #[derive(PartialEq)]
    struct Entry(f64, usize);
    impl Eq for Entry {}
    impl PartialOrd for Entry {
        fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
            Some(self.cmp(other))
        }
    }
    impl Ord for Entry {
        fn cmp(&self, other: &Self) -> std::cmp::Ordering {
            self.0.total_cmp(&other.0).then(self.1.cmp(&other.1))
        }
    }

    let mut heap = BinaryHeap::new();
    if dist[source] > 0.0 {
        dist[source] = 0.0;
    }
    heap.push(Reverse(Entry(0.0, source)));
    while let Some(Reverse(Entry(d, v))) = heap.pop() {
        if d > dist[v] {
            continue;
        }
        for &u in mesh.neighbors(v) {
            let nd = d + vm::dist(mesh.positions[v], mesh.positions[u]);
            if nd < dist[u] {
                dist[u] = nd;
                heap.push(Reverse(Entry(nd, u)));
            }
        }
    }
}

/// Per-part seed quotas proportional to part surface area (largest-remainder
/// rounding), capped at each part's vertex count with overflow redistributed.
fn part_quotas(
    n: usize,
    part_area: &[f64; 5],
    part_verts: &[usize; 5],
) -> Result<[usize; 5], BodyError> {
    let total_verts: usize = part_verts.iter().sum();
    if n > total_verts {
        return Err(BodyError::TooManySeeds {
            n,
            verts: total_verts,
        });
    }
    let total_area: f64 = part_area.iter().sum();
    let mut quota = [0usize; 5];
    let mut remainder = [0.0f64; 5];
    let mut assigned = 0;
    for p in 0..5 {
        let ideal = n as f64 * part_area[p] / total_area;
        quota[p] = (ideal.floor() as usize).min(part_verts[p]);
        remainder[p] = ideal - ideal.floor();
        assigned += quota[p];
    }
    // Hand out the remaining seeds by largest remainder, then by any capacity.
    let mut order: Vec<usize> = (0..5).collect();
    order.sort_by(|&a, &b| remainder[b].total_cmp(&remainder[a]).then(a.cmp(&b)));
    while assigned < n {
        let mut gave = false;
        for &p in &order {
            if assigned == n {
                break;
            }
            if quota[p] < part_verts[p] {
                quota[p] += 1;
                assigned += 1;
                gave = true;
            }
        }
        assert!(gave, "quota redistribution must terminate (n <= total verts)");
    }
    for p in 0..5 {
        if quota[p] > 0 && part_verts[p] == 0 {
            return Err(BodyError::EmptyPart(PartLabel::ALL[p].name()));
        }
    }
    Ok(quota)
}

/// Farthest-point sampling under geodesic distance, deterministic.
///
/// Seeds are allocated across parts proportionally to surface area. Within a
/// part, sampling starts from the vertex farthest from the part's
/// lowest-index vertex (so e.g. two seeds on a rod land on both endpoints),
/// then repeatedly adds the part vertex farthest from all chosen seeds.
pub fn sample_seeds(
    mesh: &TriMesh,
    n: usize,
    labels: &[PartLabel],
) -> Result<Vec<usize>, BodyError> {
    if labels.len() != mesh.vertex_count() {
        return Err(BodyError::LabelLength {
            got: labels.len(),
            want: mesh.vertex_count(),
        });
    }
    // Vertex area: one third of each incident triangle.
    let mut vert_area = vec![0.0f64; mesh.vertex_count()];
    for (ti, t) in mesh.triangles.iter().enumerate() {
        let a = mesh.triangle_area(ti) / 3.0;
        for &v in t {
            vert_area[v] += a;
        }
    }
    let mut part_area = [0.0f64; 5];
    let mut part_verts = [0usize; 5];
    for (v, l) in labels.iter().enumerate() {
        part_area[l.index()] += vert_area[v];
        part_verts[l.index()] += 1;
    }
    let quota = part_quotas(n, &part_area, &part_verts)?;

    let mut seeds = Vec::with_capacity(n);
    let mut chosen = vec![false; mesh.vertex_count()];
    for p in 0..5 {
        if quota[p] == 0 {
            continue;
        }
        let members: Vec<usize> = (0..mesh.vertex_count())
            .filter(|&v| labels[v].index() == p)
            .collect();

        // Bootstrap: geodesics from the part's first vertex; the farthest
        // member becomes the first seed.
        let mut boot = vec![f64::INFINITY; mesh.vertex_count()];
        relax_geodesic(mesh, members[0], &mut boot);
        let first = *members
            .iter()
            .max_by(|&&a, &&b| boot[a].total_cmp(&boot[b]).then(b.cmp(&a)))
            .unwrap();

        let mut dist = vec![f64::INFINITY; mesh.vertex_count()];
        let mut picked = vec![first];
        chosen[first] = true;
        relax_geodesic(mesh, first, &mut dist);
        while picked.len() < quota[p] {
            let next = *members
                .iter()
                .filter(|&&v| !chosen[v])
                .max_by(|&&a, &&b| dist[a].total_cmp(&dist[b]).then(b.cmp(&a)))
                .expect("quota is capped at part vertex count");
            picked.push(next);
            chosen[next] = true;
            relax_geodesic(mesh, next, &mut dist);
        }
        seeds.extend(picked);
    }
    seeds.sort_unstable();
    Ok(seeds)
}

/// Rigid transform of one seed at one frame. `apply` maps canonical points
/// near the seed onto their posed location: R (p - b0) + b0 + T.
#[derive(Debug, Clone, Copy)]
pub struct SeedTransform {
    pub rotation: M3,
    pub translation: V3,
}

impl SeedTransform {
    pub const IDENTITY: SeedTransform = SeedTransform {
        rotation: vm::M3_ID,
        translation: [0.0; 3],
    };

    pub fn apply(&self, p: V3, seed_canonical: V3) -> V3 {
        vm::add(
            vm::add(
                vm::mat_vec(&self.rotation, vm::sub(p, seed_canonical)),
                seed_canonical,
            ),
            self.translation,
        )
    }
}

/// One animation frame of the driver: per-seed transforms plus posed seed
/// positions and unit normals.
#[derive(Debug, Clone)]
pub struct DriverFrame {
    pub transforms: Vec<SeedTransform>,
    pub seed_positions: Vec<V3>,
    pub seed_normals: Vec<V3>,
}

/// Canonical driver surface with its seeds, part labels, canonical seed
/// frames, and SDF oracle. Immutable; posing produces `DriverFrame`s.
pub struct DriverSurface {
    pub mesh: TriMesh,
    pub seeds: Vec<usize>,
    pub seed_parts: Vec<PartLabel>,
    pub seed_positions: Vec<V3>,
    pub sdf: MeshSdf,
    frames0: Vec<M3>,
}

impl DriverSurface {
    pub fn new(mesh: TriMesh, n_seeds: usize, labels: &[PartLabel]) -> Result<Self, BodyError> {
        let seeds = sample_seeds(&mesh, n_seeds, labels)?;
        let all_frames = mesh.local_frames(&mesh.positions)?;
        let frames0 = seeds.iter().map(|&v| all_frames[v]).collect();
        let seed_positions = seeds.iter().map(|&v| mesh.positions[v]).collect();
        let seed_parts = seeds.iter().map(|&v| labels[v]).collect();
        let sdf = MeshSdf::build(&mesh);
        Ok(Self {
            mesh,
            seeds,
            seed_parts,
            seed_positions,
            sdf,
            frames0,
        })
    }

    pub fn seed_count(&self) -> usize {
        self.seeds.len()
    }

    /// Number of distinct parts that actually occur among the seeds.
    pub fn part_count(&self) -> usize {
        let mut seen = [false; 5];
        for p in &self.seed_parts {
            seen[p.index()] = true;
        }
        seen.iter().filter(|&&s| s).count()
    }

    /// Per-seed part index densified to the occurring parts (stable order).
    pub fn seed_part_indices(&self) -> Vec<usize> {
        let mut seen = [false; 5];
        for p in &self.seed_parts {
            seen[p.index()] = true;
        }
        let mut dense = [usize::MAX; 5];
        let mut next = 0;
        for i in 0..5 {
            if seen[i] {
                dense[i] = next;
                next += 1;
            }
        }
        self.seed_parts.iter().map(|p| dense[p.index()]).collect()
    }

    /// Seed transforms for one posed frame: R = F_t F_0^T from the surface
    /// frames, T = b_t - b_0. A degenerate posed frame at a seed reuses the
    /// previous frame's rotation (with a warning) per the animation contract.
    pub fn pose(
        &self,
        posed: &[V3],
        prev: Option<&DriverFrame>,
    ) -> Result<DriverFrame, BodyError> {
        if posed.len() != self.mesh.vertex_count() {
            return Err(BodyError::PoseLength {
                got: posed.len(),
                want: self.mesh.vertex_count(),
            });
        }
        let frames_t = self.mesh.local_frames_opt(posed);
        let mut transforms = Vec::with_capacity(self.seeds.len());
        let mut seed_positions = Vec::with_capacity(self.seeds.len());
        let mut seed_normals = Vec::with_capacity(self.seeds.len());
        for (j, &v) in self.seeds.iter().enumerate() {
            let b0 = self.seed_positions[j];
            let bt = posed[v];
            let rotation = match frames_t[v] {
                Some(ft) => vm::mat_mul(&ft, &vm::transpose(&self.frames0[j])),
                None => {
                    log::warn!("degenerate frame at seed {j} (vertex {v}); reusing previous rotation");
                    prev.map(|f| f.transforms[j].rotation).unwrap_or(vm::M3_ID)
                }
            };
            let normal = match frames_t[v] {
                Some(ft) => [ft[0][2], ft[1][2], ft[2][2]],
                None => prev
                    .map(|f| f.seed_normals[j])
                    .unwrap_or([0.0, 0.0, 1.0]),
            };
            transforms.push(SeedTransform {
                rotation,
                translation: vm::sub(bt, b0),
            });
            seed_positions.push(bt);
            seed_normals.push(normal);
        }
        Ok(DriverFrame {
            transforms,
            seed_positions,
            seed_normals,
        })
    }

    /// The identity frame: canonical pose.
    pub fn canonical_frame(&self) -> DriverFrame {
        DriverFrame {
            transforms: vec![SeedTransform::IDENTITY; self.seeds.len()],
            seed_positions: self.seed_positions.clone(),
            seed_normals: self
                .frames0
                .iter()
                .map(|f| [f[0][2], f[1][2], f[2][2]])
                .collect(),
        }
    }
}
