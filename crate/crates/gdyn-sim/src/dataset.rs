//! Dataset export: simulate train/test motion variants, write canonical
//! meshes and sequences, precompute the per-frame body-relative feature maps,
//! and record everything in a hashed manifest. A matching manifest on disk is
//! a cache hit; any mismatch regenerates the directory.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use gdyn_core::body::{load_part_labels, sample_seeds, save_part_labels, PartLabel};
use gdyn_core::container::{load_gdyn, save_gdyn, GdynSequence};
use gdyn_core::features::relative_descriptor;
use gdyn_core::obj::{load_obj, save_obj};
use gdyn_core::uvmap::RasterTable;
use gdyn_core::TriMesh;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cloth::SimError;
use crate::scene::{Scene, SceneId, SceneScript};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SplitManifest {
    pub frames: usize,
    pub amplitude: f64,
    /// Logical name -> path relative to the dataset root.
    pub files: BTreeMap<String, String>,
    /// Relative path -> sha256 of the file bytes.
    pub hashes: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DatasetManifest {
    pub version: u32,
    pub scene: SceneScript,
    /// sha256 of the scene script; identifies the generator configuration.
    pub config_hash: String,
    pub seed_count: usize,
    pub map_width: usize,
    pub driver_vertex_count: usize,
    pub garment_vertex_count: usize,
    pub splits: BTreeMap<String, SplitManifest>,
}

pub const MANIFEST_VERSION: u32 = 1;

fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

fn file_hash(path: &Path) -> Result<String, SimError> {
    Ok(sha256_hex(&std::fs::read(path)?))
}

pub fn config_hash(script: &SceneScript) -> String {
    let text = toml::to_string(script).expect("script serializes");
    sha256_hex(text.as_bytes())
}

/// Frame sequence of UV feature maps, stored as a flat little-endian f32
/// blob (frame-major, then row-major width x width x channels).
pub struct MapSequence {
    pub width: usize,
    pub channels: usize,
    pub frames: usize,
    data: Vec<f32>,
}

impl MapSequence {
    pub fn new(width: usize, channels: usize) -> Self {
        Self {
            width,
            channels,
            frames: 0,
            data: Vec::new(),
        }
    }

    pub fn frame_len(&self) -> usize {
        self.width * self.width * self.channels
    }

    pub fn push_f64(&mut self, map: &[f64]) {
        assert_eq!(map.len(), self.frame_len());
        self.data.extend(map.iter().map(|&v| v as f32));
        self.frames += 1;
    }

    pub fn frame(&self, t: usize) -> &[f32] {
        let n = self.frame_len();
        &self.data[t * n..(t + 1) * n]
    }

    pub fn frame_f64(&self, t: usize) -> Vec<f64> {
        self.frame(t).iter().map(|&v| v as f64).collect()
    }

    pub fn save(&self, path: &Path) -> Result<(), SimError> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        for v in &self.data {
            w.write_all(&v.to_le_bytes())?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(
        path: &Path,
        width: usize,
        channels: usize,
        frames: usize,
    ) -> Result<Self, SimError> {
        let bytes = std::fs::read(path)?;
        let want = frames * width * width * channels * 4;
        if bytes.len() != want {
            return Err(SimError::Script(format!(
                "map cache {} has {} bytes, expected {want}",
                path.display(),
                bytes.len()
            )));
        }
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Self {
            width,
            channels,
            frames,
            data,
        })
    }
}

/// Computes the cached body-relative map sequence from the stored (f32)
/// sequences, so recomputing from files is bit-identical to the cache.
fn build_maps(
    garment: &GdynSequence,
    driver: &GdynSequence,
    seeds: &[usize],
    raster: &RasterTable,
) -> MapSequence {
    let channels = 3 * seeds.len();
    let mut maps = MapSequence::new(raster.width, channels);
    for t in 0..garment.frame_count() {
        let g = garment.frame_f64(t);
        let posed = driver.frame_f64(t);
        let seed_pos: Vec<_> = seeds.iter().map(|&v| posed[v]).collect();
        let rel = relative_descriptor(&g, &seed_pos);
        maps.push_f64(&raster.apply_f64(&rel, channels));
    }
    maps
}

fn write_split(
    dir: &Path,
    name: &str,
    script: &SceneScript,
    seeds: &[usize],
    raster: &RasterTable,
) -> Result<SplitManifest, SimError> {
    let scene = Scene::new(script.clone())?;
    let out = scene.simulate()?;
    let split_dir = dir.join(name);
    std::fs::create_dir_all(&split_dir)?;

    let mut files = BTreeMap::new();
    let mut paths: Vec<(String, PathBuf)> = Vec::new();
    let mut add = |logical: &str, file: &str| {
        let rel = format!("{name}/{file}");
        files.insert(logical.to_string(), rel.clone());
        paths.push((rel, split_dir.join(file)));
    };
    add("driver", "body.gdyn");
    add("garment", "garment.gdyn");
    save_gdyn(&split_dir.join("body.gdyn"), &out.driver)?;
    save_gdyn(&split_dir.join("garment.gdyn"), out.garment())?;
    if out.layers.len() > 1 {
        add("inner", "inner.gdyn");
        save_gdyn(&split_dir.join("inner.gdyn"), &out.layers[0])?;
    }

    add("maps_p", "maps_p.f32");
    build_maps(out.garment(), &out.driver, seeds, raster).save(&split_dir.join("maps_p.f32"))?;

    let mut hashes = BTreeMap::new();
    for (rel, path) in &paths {
        hashes.insert(rel.clone(), file_hash(path)?);
    }
    Ok(SplitManifest {
        frames: script.frames,
        amplitude: script.amplitude,
        files,
        hashes,
    })
}

fn verify_split(dir: &Path, split: &SplitManifest) -> Result<(), SimError> {
    for (rel, want) in &split.hashes {
        let path = dir.join(rel);
        let got = file_hash(&path)?;
        if got != *want {
            return Err(SimError::HashMismatch {
                path: rel.clone(),
                want: want.clone(),
                got,
            });
        }
    }
    Ok(())
}

/// Generates (or reuses) a dataset directory for `script`: train split at the
/// scripted amplitude, test split at the scaled amplitude. Returns the
/// manifest. An existing manifest with the same config hash and intact file
/// hashes short-circuits the generation.
pub fn generate_dataset(script: &SceneScript, dir: &Path) -> Result<DatasetManifest, SimError> {
    script.validate()?;
    let hash = config_hash(script);

    let manifest_path = dir.join("manifest.json");
    if manifest_path.exists() {
        let text = std::fs::read_to_string(&manifest_path)?;
        if let Ok(existing) = serde_json::from_str::<DatasetManifest>(&text) {
            if existing.config_hash == hash
                && existing
                    .splits
                    .values()
                    .all(|s| verify_split(dir, s).is_ok())
            {
                log::info!("dataset cache hit at {}", dir.display());
                return Ok(existing);
            }
            log::info!("dataset cache stale at {}; regenerating", dir.display());
        }
    }

    std::fs::create_dir_all(dir)?;
    let scene = Scene::new(script.clone())?;
    script.save(&dir.join("scene.toml"))?;
    save_obj(&dir.join("driver.obj"), &scene.driver_mesh)?;
    save_part_labels(&dir.join("driver_parts.txt"), &scene.driver_labels)?;
    let garment_rest = &scene.layers.last().unwrap().rest;
    save_obj(&dir.join("garment.obj"), garment_rest)?;
    if script.scene == SceneId::TwoLayer {
        save_obj(&dir.join("inner.obj"), &scene.layers[0].rest)?;
    }

    let seeds = sample_seeds(&scene.driver_mesh, script.seed_count, &scene.driver_labels)?;
    let raster = RasterTable::build(garment_rest, script.map_width)?;

    let mut splits = BTreeMap::new();
    splits.insert(
        "train".to_string(),
        write_split(dir, "train", script, &seeds, &raster)?,
    );
    splits.insert(
        "test".to_string(),
        write_split(dir, "test", &script.test_variant(), &seeds, &raster)?,
    );

    let manifest = DatasetManifest {
        version: MANIFEST_VERSION,
        scene: script.clone(),
        config_hash: hash,
        seed_count: script.seed_count,
        map_width: script.map_width,
        driver_vertex_count: scene.driver_mesh.vertex_count(),
        garment_vertex_count: garment_rest.vertex_count(),
        splits,
    };
    let tmp = dir.join("manifest.json.tmp");
    std::fs::write(&tmp, serde_json::to_string_pretty(&manifest)?)?;
    std::fs::rename(&tmp, &manifest_path)?;
    Ok(manifest)
}

/// A dataset opened for consumption: canonical geometry plus the manifest.
pub struct LoadedDataset {
    pub root: PathBuf,
    pub manifest: DatasetManifest,
    pub driver_mesh: TriMesh,
    pub driver_labels: Vec<PartLabel>,
    pub garment_mesh: TriMesh,
    pub inner_mesh: Option<TriMesh>,
}

/// One split's sequences; hash-verified on load.
pub struct LoadedSplit {
    pub frames: usize,
    pub driver: GdynSequence,
    pub garment: GdynSequence,
    pub inner: Option<GdynSequence>,
    pub maps_p: MapSequence,
}

impl LoadedDataset {
    pub fn load(dir: &Path) -> Result<Self, SimError> {
        let text = std::fs::read_to_string(dir.join("manifest.json"))?;
        let manifest: DatasetManifest = serde_json::from_str(&text)?;
        let driver_mesh = load_obj(&dir.join("driver.obj"))?;
        let driver_labels =
            load_part_labels(&dir.join("driver_parts.txt"), driver_mesh.vertex_count())?;
        let garment_mesh = load_obj(&dir.join("garment.obj"))?;
        let inner_path = dir.join("inner.obj");
        let inner_mesh = if inner_path.exists() {
            Some(load_obj(&inner_path)?)
        } else {
            None
        };
        Ok(Self {
            root: dir.to_path_buf(),
            manifest,
            driver_mesh,
            driver_labels,
            garment_mesh,
            inner_mesh,
        })
    }

    pub fn split(&self, name: &str) -> Result<LoadedSplit, SimError> {
        let split = self
            .manifest
            .splits
            .get(name)
            .ok_or_else(|| SimError::Script(format!("no split '{name}' in manifest")))?;
        verify_split(&self.root, split)?;
        let path = |logical: &str| -> Result<PathBuf, SimError> {
            split
                .files
                .get(logical)
                .map(|rel| self.root.join(rel))
                .ok_or_else(|| SimError::Script(format!("split '{name}' lacks '{logical}'")))
        };
        let driver = load_gdyn(&path("driver")?)?;
        let garment = load_gdyn(&path("garment")?)?;
        let inner = if split.files.contains_key("inner") {
            Some(load_gdyn(&path("inner")?)?)
        } else {
            None
        };
        let maps_p = MapSequence::load(
            &path("maps_p")?,
            self.manifest.map_width,
            3 * self.manifest.seed_count,
            split.frames,
        )?;
        Ok(LoadedSplit {
            frames: split.frames,
            driver,
            garment,
            inner,
            maps_p,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::SceneId;

    fn quick_script() -> SceneScript {
        SceneScript {
            scene: SceneId::StickSheet,
            amplitude: 1.0,
            frequency: 0.5,
            frames: 10,
            fps: 30.0,
            resolution: 10,
            seed: 7,
            seed_count: 8,
            map_width: 16,
            test_amplitude_scale: 1.2,
            test_frames: 6,
        }
    }

    #[test]
    fn generate_writes_manifest_with_disjoint_split_params() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = generate_dataset(&quick_script(), dir.path()).unwrap();
        assert_eq!(manifest.splits.len(), 2);
        let (train, test) = (&manifest.splits["train"], &manifest.splits["test"]);
        assert_eq!(train.frames, 10);
        assert_eq!(test.frames, 6);
        assert!((test.amplitude - 1.2 * train.amplitude).abs() < 1e-12);
        for rel in train.hashes.keys() {
            assert!(dir.path().join(rel).exists(), "missing {rel}");
        }
        assert!(dir.path().join("driver.obj").exists());
        assert!(dir.path().join("garment.obj").exists());
    }

    #[test]
    fn regeneration_is_byte_identical_and_cache_hits() {
        let script = quick_script();
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let ma = generate_dataset(&script, a.path()).unwrap();
        let mb = generate_dataset(&script, b.path()).unwrap();
        assert_eq!(ma.splits, mb.splits, "hashes must match across regens");
        for split in ma.splits.values() {
            for rel in split.hashes.keys() {
                assert_eq!(
                    std::fs::read(a.path().join(rel)).unwrap(),
                    std::fs::read(b.path().join(rel)).unwrap(),
                    "{rel} differs between regenerations"
                );
            }
        }

        // Second call on the same directory reuses the files (cache hit).
        let before = std::fs::metadata(a.path().join("train/garment.gdyn"))
            .unwrap()
            .modified()
            .unwrap();
        let again = generate_dataset(&script, a.path()).unwrap();
        assert_eq!(again, ma);
        let after = std::fs::metadata(a.path().join("train/garment.gdyn"))
            .unwrap()
            .modified()
            .unwrap();
        assert_eq!(before, after, "cache hit must not rewrite files");

        // Corrupting a file invalidates the cache and regenerates it.
        let victim = a.path().join("train/maps_p.f32");
        let mut bytes = std::fs::read(&victim).unwrap();
        bytes[0] ^= 0xFF;
        std::fs::write(&victim, &bytes).unwrap();
        generate_dataset(&script, a.path()).unwrap();
        assert_eq!(
            std::fs::read(&victim).unwrap(),
            std::fs::read(b.path().join("train/maps_p.f32")).unwrap()
        );
    }

    #[test]
    fn cached_maps_match_recomputation_from_stored_sequences() {
        let script = quick_script();
        let dir = tempfile::tempdir().unwrap();
        generate_dataset(&script, dir.path()).unwrap();
        let ds = LoadedDataset::load(dir.path()).unwrap();
        let split = ds.split("train").unwrap();

        let seeds =
            sample_seeds(&ds.driver_mesh, script.seed_count, &ds.driver_labels).unwrap();
        let raster = RasterTable::build(&ds.garment_mesh, script.map_width).unwrap();
        let rebuilt = build_maps(&split.garment, &split.driver, &seeds, &raster);
        for t in [0, 3, 9] {
            assert_eq!(split.maps_p.frame(t), rebuilt.frame(t), "frame {t}");
        }
    }

    #[test]
    fn loader_rejects_tampered_files() {
        let script = quick_script();
        let dir = tempfile::tempdir().unwrap();
        generate_dataset(&script, dir.path()).unwrap();
        let victim = dir.path().join("test/body.gdyn");
        let mut bytes = std::fs::read(&victim).unwrap();
        let last = bytes.len() - 1;
        bytes[last] ^= 0x1;
        std::fs::write(&victim, &bytes).unwrap();

        let ds = LoadedDataset::load(dir.path()).unwrap();
        assert!(ds.split("train").is_ok());
        assert!(matches!(
            ds.split("test"),
            Err(SimError::HashMismatch { .. })
        ));
    }
}
