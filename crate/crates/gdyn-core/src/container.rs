//! Binary sequence container: a fixed-topology mesh animated over frames.
//!
//! Layout (all little-endian): magic `GDYN`, u32 version (=1), u32 frame
//! count, u32 vertex count, then frame-major f32 xyz per vertex. Positions
//! are stored in f32; round-trips of f32 data are bitwise exact.

use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::vecmath::V3;

pub const GDYN_MAGIC: [u8; 4] = *b"GDYN";
pub const GDYN_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ContainerError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic {0:?}, expected GDYN")]
    BadMagic([u8; 4]),
    #[error("unsupported version {0}")]
    BadVersion(u32),
    #[error("payload truncated: expected {expected} bytes of frame data, got {got}")]
    Truncated { expected: usize, got: usize },
    #[error("frame {frame} has {got} vertices, expected {want}")]
    FrameLength {
        frame: usize,
        got: usize,
        want: usize,
    },
}

/// A sequence of frames over fixed connectivity.
#[derive(Debug, Clone, PartialEq)]
pub struct GdynSequence {
    pub vertex_count: usize,
    pub frames: Vec<Vec<[f32; 3]>>,
}

impl GdynSequence {
    pub fn new(vertex_count: usize) -> Self {
        Self {
            vertex_count,
            frames: Vec::new(),
        }
    }

    pub fn push_f64(&mut self, frame: &[V3]) {
        assert_eq!(frame.len(), self.vertex_count);
        self.frames
            .push(frame.iter().map(|p| [p[0] as f32, p[1] as f32, p[2] as f32]).collect());
    }

    pub fn frame_f64(&self, idx: usize) -> Vec<V3> {
        self.frames[idx]
            .iter()
            .map(|p| [p[0] as f64, p[1] as f64, p[2] as f64])
            .collect()
    }

    pub fn frame_count(&self) -> usize {
        self.frames.len()
    }
}

pub fn save_gdyn(path: &Path, seq: &GdynSequence) -> Result<(), ContainerError> {
    for (i, f) in seq.frames.iter().enumerate() {
        if f.len() != seq.vertex_count {
            return Err(ContainerError::FrameLength {
                frame: i,
                got: f.len(),
                want: seq.vertex_count,
            });
        }
    }
    let file = std::fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    w.write_all(&GDYN_MAGIC)?;
    w.write_all(&GDYN_VERSION.to_le_bytes())?;
    w.write_all(&(seq.frames.len() as u32).to_le_bytes())?;
    w.write_all(&(seq.vertex_count as u32).to_le_bytes())?;
    for frame in &seq.frames {
        for p in frame {
            for &c in p {
                w.write_all(&c.to_le_bytes())?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_gdyn(path: &Path) -> Result<GdynSequence, ContainerError> {
    let file = std::fs::File::open(path)?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if magic != GDYN_MAGIC {
        return Err(ContainerError::BadMagic(magic));
    }
    let mut u32buf = [0u8; 4];
    r.read_exact(&mut u32buf)?;
    let version = u32::from_le_bytes(u32buf);
    if version != GDYN_VERSION {
        return Err(ContainerError::BadVersion(version));
    }
    r.read_exact(&mut u32buf)?;
    let frames = u32::from_le_bytes(u32buf) as usize;
    r.read_exact(&mut u32buf)?;
    let verts = u32::from_le_bytes(u32buf) as usize;

    let expected = frames * verts * 3 * 4;
    let mut payload = Vec::new();
    r.read_to_end(&mut payload)?;
    if payload.len() != expected {
        return Err(ContainerError::Truncated {
            expected,
            got: payload.len(),
        });
    }
    let mut seq = GdynSequence::new(verts);
    let mut off = 0;
    for _ in 0..frames {
        let mut frame = Vec::with_capacity(verts);
        for _ in 0..verts {
            let mut p = [0f32; 3];
            for c in p.iter_mut() {
                *c = f32::from_le_bytes(payload[off..off + 4].try_into().unwrap());
                off += 4;
            }
            frame.push(p);
        }
        seq.frames.push(frame);
    }
    Ok(seq)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn round_trip_is_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut seq = GdynSequence::new(57);
        for _ in 0..13 {
            let frame: Vec<[f32; 3]> = (0..57)
                .map(|_| [rng.gen::<f32>(), rng.gen::<f32>(), rng.gen::<f32>()])
                .collect();
            seq.frames.push(frame);
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("seq.gdyn");
        save_gdyn(&path, &seq).unwrap();
        let loaded = load_gdyn(&path).unwrap();
        assert_eq!(seq, loaded);

        // Byte-identical on re-save.
        let path2 = dir.path().join("seq2.gdyn");
        save_gdyn(&path2, &loaded).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.gdyn");

        std::fs::write(&path, b"NOPE").unwrap();
        assert!(matches!(load_gdyn(&path), Err(ContainerError::BadMagic(_)) | Err(ContainerError::Io(_))));

        let mut good = GdynSequence::new(3);
        good.frames.push(vec![[0.0; 3]; 3]);
        save_gdyn(&path, &good).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 5);
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(load_gdyn(&path), Err(ContainerError::Truncated { .. })));
    }
}
