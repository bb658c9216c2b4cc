//! Wavefront OBJ I/O restricted to what the pipeline needs: positions, uv
//! coordinates, triangular faces. Corners that share a position but not a uv
//! are split into separate vertices on load, so the in-memory mesh always has
//! exactly one uv per vertex.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use thiserror::Error;

use crate::mesh::{MeshError, TriMesh};
use crate::vecmath::V3;

#[derive(Debug, Error)]
pub enum ObjError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("line {line}: face corner has no uv index but the pipeline requires per-corner uv")]
    MissingUv { line: usize },
    #[error("line {line}: face has {corners} corners, only triangles are supported")]
    NonTriangle { line: usize, corners: usize },
    #[error("mesh validation: {0}")]
    Mesh(#[from] MeshError),
}

fn parse_index(token: &str, count: usize, line: usize) -> Result<usize, ObjError> {
    let i: i64 = token.parse().map_err(|_| ObjError::Parse {
        line,
        msg: format!("bad index '{token}'"),
    })?;
    let idx = if i > 0 {
        (i - 1) as usize
    } else if i < 0 {
        let j = count as i64 + i;
        if j < 0 {
            return Err(ObjError::Parse {
                line,
                msg: format!("negative index '{token}' out of range"),
            });
        }
        j as usize
    } else {
        return Err(ObjError::Parse {
            line,
            msg: "OBJ indices are 1-based, found 0".into(),
        });
    };
    if idx >= count {
        return Err(ObjError::Parse {
            line,
            msg: format!("index {i} out of range ({count} elements)"),
        });
    }
    Ok(idx)
}

pub fn load_obj(path: &Path) -> Result<TriMesh, ObjError> {
    let file = std::fs::File::open(path)?;
    let reader = BufReader::new(file);

    let mut raw_positions: Vec<V3> = Vec::new();
    let mut raw_uvs: Vec<[f64; 2]> = Vec::new();
    let mut corners: Vec<([usize; 3], [usize; 3], usize)> = Vec::new(); // (v idx, vt idx, line)

    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = lineno + 1;
        let mut tokens = line.split_whitespace();
        match tokens.next() {
            Some("v") => {
                let mut p = [0.0; 3];
                for slot in p.iter_mut() {
                    let tok = tokens.next().ok_or_else(|| ObjError::Parse {
                        line: lineno,
                        msg: "v needs 3 coordinates".into(),
                    })?;
                    *slot = tok.parse().map_err(|_| ObjError::Parse {
                        line: lineno,
                        msg: format!("bad coordinate '{tok}'"),
                    })?;
                }
                raw_positions.push(p);
            }
            Some("vt") => {
                let mut p = [0.0; 2];
                for slot in p.iter_mut() {
                    let tok = tokens.next().ok_or_else(|| ObjError::Parse {
                        line: lineno,
                        msg: "vt needs 2 coordinates".into(),
                    })?;
                    *slot = tok.parse().map_err(|_| ObjError::Parse {
                        line: lineno,
                        msg: format!("bad uv coordinate '{tok}'"),
                    })?;
                }
                raw_uvs.push(p);
            }
            Some("f") => {
                let toks: Vec<&str> = tokens.collect();
                if toks.len() != 3 {
                    return Err(ObjError::NonTriangle {
                        line: lineno,
                        corners: toks.len(),
                    });
                }
                let mut vi = [0usize; 3];
                let mut ti = [0usize; 3];
                for (k, tok) in toks.iter().enumerate() {
                    let mut parts = tok.split('/');
                    let v = parts.next().filter(|s| !s.is_empty()).ok_or_else(|| {
                        ObjError::Parse {
                            line: lineno,
                            msg: format!("bad face corner '{tok}'"),
                        }
                    })?;
                    vi[k] = parse_index(v, raw_positions.len(), lineno)?;
                    let vt = parts.next().filter(|s| !s.is_empty());
                    match vt {
                        Some(vt) => ti[k] = parse_index(vt, raw_uvs.len(), lineno)?,
                        None => return Err(ObjError::MissingUv { line: lineno }),
                    }
                }
                corners.push((vi, ti, lineno));
            }
            _ => {} // comments, normals, groups: ignored
        }
    }

    // Seam-aware duplication: one output vertex per unique (position, uv)
    // pair, numbered in (v, vt) order so files with one uv per vertex keep
    // their original vertex order through a round trip.
    let mut keys: Vec<(usize, usize)> = corners
        .iter()
        .flat_map(|(vi, ti, _)| (0..3).map(|k| (vi[k], ti[k])))
        .collect();
    keys.sort_unstable();
    keys.dedup();
    let remap: HashMap<(usize, usize), usize> =
        keys.iter().enumerate().map(|(i, k)| (*k, i)).collect();
    let positions: Vec<V3> = keys.iter().map(|&(v, _)| raw_positions[v]).collect();
    let uvs: Vec<[f64; 2]> = keys.iter().map(|&(_, t)| raw_uvs[t]).collect();
    let triangles: Vec<[usize; 3]> = corners
        .iter()
        .map(|(vi, ti, _)| {
            [
                remap[&(vi[0], ti[0])],
                remap[&(vi[1], ti[1])],
                remap[&(vi[2], ti[2])],
            ]
        })
        .collect();

    Ok(TriMesh::new(positions, triangles, uvs)?)
}

/// Writes positions with Rust's shortest round-trip float formatting, so a
/// save-load cycle reproduces every f64 bit-exactly.
pub fn save_obj(path: &Path, mesh: &TriMesh) -> Result<(), ObjError> {
    save_obj_positions(path, mesh, &mesh.positions)
}

/// Same as [`save_obj`] but with positions overridden (e.g. a posed frame on
/// canonical connectivity).
pub fn save_obj_positions(path: &Path, mesh: &TriMesh, positions: &[V3]) -> Result<(), ObjError> {
    assert_eq!(positions.len(), mesh.vertex_count());
    let file = std::fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    for p in positions {
        writeln!(w, "v {} {} {}", p[0], p[1], p[2])?;
    }
    for uv in &mesh.uvs {
        writeln!(w, "vt {} {}", uv[0], uv[1])?;
    }
    for t in &mesh.triangles {
        writeln!(w, "f {}/{} {}/{} {}/{}", t[0] + 1, t[0] + 1, t[1] + 1, t[1] + 1, t[2] + 1, t[2] + 1)?;
    }
    w.flush()?;
    Ok(())
}
