//! Named parameter store: deterministic initialization, trainable/frozen
//! partitioning, graph binding, and checkpoint I/O (JSON manifest plus raw
//! little-endian f32 blob with a CRC32).

use std::collections::BTreeMap;
use std::path::Path;

use gdyn_ad::{Graph, Real, TensorData, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::ArchConfig;

#[derive(Debug, Error)]
pub enum ParamError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("manifest: {0}")]
    Manifest(#[from] serde_json::Error),
    #[error("blob length {got} bytes, manifest expects {want}")]
    BlobLength { got: usize, want: usize },
    #[error("blob checksum {got:#010x}, manifest says {want:#010x}")]
    Checksum { got: u32, want: u32 },
    #[error("tensor '{name}' has shape {got:?}, expected {want:?}")]
    Shape {
        name: String,
        got: Vec<usize>,
        want: Vec<usize>,
    },
    #[error("checkpoint was built for config '{got}', expected '{want}'")]
    Config { got: String, want: String },
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
}

#[derive(Debug, Clone)]
struct Entry<T: Real> {
    tensor: TensorData<T>,
    trainable: bool,
}

/// Parameters keyed by dotted names ("esta.conv0.w"); iteration is always in
/// sorted name order, which fixes initialization, blob layout, and update
/// order.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T: Real> {
    entries: BTreeMap<String, Entry<T>>,
}

/// Graph bindings for one forward pass: trainable entries become vars (grads
/// tracked), frozen entries become constants.
pub struct BoundParams {
    vars: BTreeMap<String, Var>,
}

impl BoundParams {
    pub fn get(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("unbound parameter '{name}'"))
    }

    /// Rebinds one name to a caller-supplied var (gradient probes bind the
    /// store as constants, then overlay the tensors under test).
    pub fn replace(&mut self, name: &str, var: Var) {
        let slot = self
            .vars
            .get_mut(name)
            .unwrap_or_else(|| panic!("unbound parameter '{name}'"));
        *slot = var;
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            entries: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: &str, tensor: TensorData<T>, trainable: bool) {
        let prev = self.entries.insert(
            name.to_string(),
            Entry { tensor, trainable },
        );
        assert!(prev.is_none(), "duplicate parameter '{name}'");
    }

    pub fn get(&self, name: &str) -> &TensorData<T> {
        &self
            .entries
            .get(name)
            .unwrap_or_else(|| panic!("missing parameter '{name}'"))
            .tensor
    }

    pub fn get_mut(&mut self, name: &str) -> &mut TensorData<T> {
        &mut self
            .entries
            .get_mut(name)
            .unwrap_or_else(|| panic!("missing parameter '{name}'"))
            .tensor
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|s| s.as_str())
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.entries
            .iter()
            .filter(|(_, e)| e.trainable)
            .map(|(n, _)| n.clone())
            .collect()
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        self.entries.get(name).map(|e| e.trainable).unwrap_or(false)
    }

    /// Marks every parameter whose name starts with `prefix` as frozen.
    pub fn freeze_prefix(&mut self, prefix: &str) {
        for (name, e) in self.entries.iter_mut() {
            if name.starts_with(prefix) {
                e.trainable = false;
            }
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.entries.values().map(|e| e.tensor.numel()).sum()
    }

    /// Binds every parameter into the graph; call once per forward pass.
    pub fn bind(&self, g: &mut Graph<T>) -> BoundParams {
        let vars = self
            .entries
            .iter()
            .map(|(name, e)| {
                let v = if e.trainable {
                    g.var(e.tensor.clone())
                } else {
                    g.constant(e.tensor.clone())
                };
                (name.clone(), v)
            })
            .collect();
        BoundParams { vars }
    }

    /// Binds every parameter as a constant regardless of trainability.
    pub fn bind_constants(&self, g: &mut Graph<T>) -> BoundParams {
        let vars = self
            .entries
            .iter()
            .map(|(name, e)| (name.clone(), g.constant(e.tensor.clone())))
            .collect();
        BoundParams { vars }
    }

    /// Converts every tensor through f64 into another scalar type (used to
    /// lift an f32 training state into the f64 gradient-check harness).
    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        let entries = self
            .entries
            .iter()
            .map(|(n, e)| {
                (
                    n.clone(),
                    Entry {
                        tensor: TensorData::from_f64_slice(
                            e.tensor.shape().to_vec(),
                            &e.tensor.map_to_f64(),
                        ),
                        trainable: e.trainable,
                    },
                )
            })
            .collect();
        ParamStore { entries }
    }
}

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    trainable: bool,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    version: u32,
    arch: ArchConfig,
    entries: Vec<ManifestEntry>,
    crc32: u32,
}

impl<T: Real> ParamStore<T> {
    /// Writes `<stem>.json` + `<stem>.bin`. Values are stored as f32
    /// little-endian in sorted name order.
    pub fn save(&self, stem: &Path, arch: &ArchConfig) -> Result<(), ParamError> {
        let mut blob: Vec<u8> = Vec::new();
        let mut entries = Vec::new();
        for (name, e) in &self.entries {
            entries.push(ManifestEntry {
                name: name.clone(),
                shape: e.tensor.shape().to_vec(),
                trainable: e.trainable,
            });
            for v in e.tensor.data() {
                blob.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
            }
        }
        let manifest = Manifest {
            version: 1,
            arch: arch.clone(),
            entries,
            crc32: crc32fast::hash(&blob),
        };
        std::fs::write(
            stem.with_extension("json"),
            serde_json::to_string_pretty(&manifest)?,
        )?;
        std::fs::write(stem.with_extension("bin"), blob)?;
        Ok(())
    }

    /// Loads a checkpoint, verifying blob length, checksum, and (when
    /// `expect` is given) the architecture it was saved under.
    pub fn load(
        stem: &Path,
        expect: Option<&ArchConfig>,
    ) -> Result<(Self, ArchConfig), ParamError> {
        let manifest: Manifest =
            serde_json::from_str(&std::fs::read_to_string(stem.with_extension("json"))?)?;
        if manifest.version != 1 {
            return Err(ParamError::Version(manifest.version));
        }
        if let Some(expect) = expect {
            if manifest.arch != *expect {
                return Err(ParamError::Config {
                    got: manifest.arch.name.clone(),
                    want: expect.name.clone(),
                });
            }
        }
        let blob = std::fs::read(stem.with_extension("bin"))?;
        let want: usize = manifest
            .entries
            .iter()
            .map(|e| e.shape.iter().product::<usize>() * 4)
            .sum();
        if blob.len() != want {
            return Err(ParamError::BlobLength {
                got: blob.len(),
                want,
            });
        }
        let crc = crc32fast::hash(&blob);
        if crc != manifest.crc32 {
            return Err(ParamError::Checksum {
                got: crc,
                want: manifest.crc32,
            });
        }
        let mut store = Self::new();
        let mut off = 0;
        for e in &manifest.entries {
            let numel: usize = e.shape.iter().product();
            let data: Vec<T> = blob[off..off + numel * 4]
                .chunks_exact(4)
                .map(|c| T::from_f64(f32::from_le_bytes(c.try_into().unwrap()) as f64))
                .collect();
            off += numel * 4;
            store.insert(&e.name, TensorData::new(e.shape.clone(), data), e.trainable);
        }
        Ok((store, manifest.arch))
    }
}

/// Gaussian init scaled for leaky-relu(0.2) layers: std² = 2 / (1.04 fan_in).
fn he_tensor<T: Real>(rng: &mut ChaCha8Rng, shape: Vec<usize>, fan_in: usize) -> TensorData<T> {
    let std = (2.0 / (1.04 * fan_in as f64)).sqrt();
    let n: usize = shape.iter().product();
    let mut data = Vec::with_capacity(n);
    while data.len() < n {
        // Box-Muller transform.
        let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
        let u2: f64 = rng.gen_range(0.0..1.0);
        let r = (-2.0 * u1.ln()).sqrt();
        let a = std::f64::consts::TAU * u2;
        data.push(T::from_f64(r * a.cos() * std));
        if data.len() < n {
            data.push(T::from_f64(r * a.sin() * std));
        }
    }
    TensorData::new(shape, data)
}

/// Builds the full parameter set for a config, deterministically from a
/// seed. Conv weights are [3, 3, c_in, c_out], transpose convs
/// [3, 3, c_out, c_in], linear weights [in, out]; all biases zero. The
/// per-part kernel radii enter as `rho.log` with value ln(rho_init).
pub fn init_params<T: Real>(cfg: &ArchConfig, seed: u64, rho_init: f64) -> ParamStore<T> {
    cfg.validate().expect("config must validate before init");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let k = 3usize;

    let conv = |store: &mut ParamStore<T>, rng: &mut ChaCha8Rng, name: String, ci: usize, co: usize| {
        store.insert(&format!("{name}.w"), he_tensor(rng, vec![k, k, ci, co], k * k * ci), true);
        store.insert(&format!("{name}.b"), TensorData::zeros(vec![co]), true);
    };
    let tconv = |store: &mut ParamStore<T>, rng: &mut ChaCha8Rng, name: String, ci: usize, co: usize| {
        store.insert(&format!("{name}.w"), he_tensor(rng, vec![k, k, co, ci], k * k * ci), true);
        store.insert(&format!("{name}.b"), TensorData::zeros(vec![co]), true);
    };
    let fc = |store: &mut ParamStore<T>, rng: &mut ChaCha8Rng, name: String, ci: usize, co: usize| {
        store.insert(&format!("{name}.w"), he_tensor(rng, vec![ci, co], ci), true);
        store.insert(&format!("{name}.b"), TensorData::zeros(vec![co]), true);
    };

    // S: stride-1 convs from the body-relative map to F channels.
    let mut ci = cfg.input_channels();
    for (i, &co) in cfg.s_channels.iter().enumerate() {
        conv(&mut store, &mut rng, format!("s.conv{i}"), ci, co);
        ci = co;
    }

    // Static encoder: stride-2 convs + final linear to the latent.
    let mut ci = cfg.f_channels();
    for (i, &co) in cfg.e_channels.iter().enumerate() {
        conv(&mut store, &mut rng, format!("esta.conv{i}"), ci, co);
        ci = co;
    }
    fc(&mut store, &mut rng, "esta.fc".into(), cfg.bottleneck_numel(), cfg.latent_dim);

    // Decoder: linear into the bottleneck, mirrored transpose convs, one
    // extra upsample to 2w keeping F channels.
    fc(&mut store, &mut rng, "d.fc".into(), cfg.latent_dim, cfg.bottleneck_numel());
    let mut ci = *cfg.e_channels.last().unwrap();
    for (i, &co) in cfg.d_channels().iter().enumerate() {
        tconv(&mut store, &mut rng, format!("d.tconv{i}"), ci, co);
        ci = co;
    }
    tconv(&mut store, &mut rng, "d.out".into(), cfg.f_channels(), cfg.f_channels());

    // Per-vertex head R on (xi, uv).
    let mut ci = cfg.f_channels() + 2;
    for (i, &co) in cfg.r_hidden.iter().enumerate() {
        fc(&mut store, &mut rng, format!("r.fc{i}"), ci, co);
        ci = co;
    }
    fc(&mut store, &mut rng, format!("r.fc{}", cfg.r_hidden.len()), ci, 3);

    // Motion encoder C on (velocity/acceleration map ++ interaction map).
    let mut ci = 6 + cfg.input_channels();
    for (i, &co) in cfg.c_channels.iter().enumerate() {
        conv(&mut store, &mut rng, format!("c.conv{i}"), ci, co);
        ci = co;
    }

    // Dynamic encoder: static-encoder architecture on 2F input channels.
    let mut ci = 2 * cfg.f_channels();
    for (i, &co) in cfg.e_channels.iter().enumerate() {
        conv(&mut store, &mut rng, format!("edyn.conv{i}"), ci, co);
        ci = co;
    }
    fc(&mut store, &mut rng, "edyn.fc".into(), cfg.bottleneck_numel(), cfg.latent_dim);

    // Learnable per-part kernel radii, in log space so they stay positive.
    store.insert(
        "rho.log",
        TensorData::full(vec![cfg.part_count], T::from_f64(rho_init.ln())),
        true,
    );

    store
}
