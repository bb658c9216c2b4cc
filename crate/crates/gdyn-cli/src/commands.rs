//! One function per subcommand. Each returns `Failure` carrying the exit
//! class, runs its work, and writes a RunManifest next to its outputs.

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use gdyn_core::container::{load_gdyn, save_gdyn, GdynSequence};
use gdyn_net::{ArchConfig, ParamStore};
use gdyn_run::data::{context_from_dataset, training_set_from_split};
use gdyn_run::rollout::PENETRATION_TOL;
use gdyn_run::static_stage::train_static_from;
use gdyn_run::verify::{all_pass, gradients_suite, invariants_suite, Check};
use gdyn_run::{
    rollout, train_dynamic, DynEpochStats, EpochStats, ResolverConfig, RolloutConfig,
    RolloutError, TrainError,
};
use gdyn_sim::{generate_dataset, LoadedDataset, SceneScript};

use crate::config::TrainConfigFile;
use crate::manifest::RunManifest;
use crate::Suite;

/// Failure classes map 1:1 onto exit codes: checks 1, config 2, sim 3,
/// train 4, predict 5.
#[derive(Debug)]
pub enum Failure {
    Checks(String),
    Config(String),
    Sim(String),
    Train(String),
    Predict(String),
}

impl Failure {
    pub fn exit_code(&self) -> u8 {
        match self {
            Failure::Checks(_) => 1,
            Failure::Config(_) => 2,
            Failure::Sim(_) => 3,
            Failure::Train(_) => 4,
            Failure::Predict(_) => 5,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            Failure::Checks(m)
            | Failure::Config(m)
            | Failure::Sim(m)
            | Failure::Train(m)
            | Failure::Predict(m) => m,
        }
    }
}

fn config_err<E: std::fmt::Display>(e: E) -> Failure {
    Failure::Config(e.to_string())
}

fn train_err(e: TrainError) -> Failure {
    match e {
        TrainError::NonFinite { .. } => Failure::Train(e.to_string()),
        other => Failure::Config(other.to_string()),
    }
}

fn manifest_io(m: &RunManifest, path: &Path) -> Result<(), Failure> {
    m.write_atomic(path)
        .map_err(|e| Failure::Config(format!("run manifest {}: {e}", path.display())))
}

/// `<path>.suffix` without clobbering the existing extension.
fn sibling(path: &Path, suffix: &str) -> PathBuf {
    PathBuf::from(format!("{}.{suffix}", path.display()))
}

pub fn gen_data(scene: &Path, out: &Path, seed: Option<u64>) -> Result<(), Failure> {
    let start = Instant::now();
    let mut script = SceneScript::load(scene)
        .map_err(|e| Failure::Config(format!("scene {}: {e}", scene.display())))?;
    if let Some(s) = seed {
        script.seed = s;
    }

    let mut manifest = RunManifest::new(
        seed,
        serde_json::to_value(&script).map_err(config_err)?,
    );
    manifest.input(scene).map_err(config_err)?;

    let ds = generate_dataset(&script, out).map_err(|e| Failure::Sim(e.to_string()))?;

    for name in ["manifest.json", "scene.toml", "driver.obj", "garment.obj"] {
        manifest.output(&out.join(name)).map_err(config_err)?;
    }
    let inner = out.join("inner.obj");
    if inner.exists() {
        manifest.output(&inner).map_err(config_err)?;
    }
    // Split files are already hashed by the dataset manifest; reuse.
    for split in ds.splits.values() {
        for (rel, hash) in &split.hashes {
            manifest
                .outputs
                .insert(out.join(rel).display().to_string(), hash.clone());
        }
    }
    manifest.wall_seconds = start.elapsed().as_secs_f64();
    manifest_io(&manifest, &out.join("run_manifest.json"))?;

    println!(
        "dataset at {}: garment {} verts, driver {} verts, splits {}",
        out.display(),
        ds.garment_vertex_count,
        ds.driver_vertex_count,
        ds.splits
            .iter()
            .map(|(k, v)| format!("{k}={} frames", v.frames))
            .collect::<Vec<_>>()
            .join(", ")
    );
    Ok(())
}

fn load_training_set(
    data: &Path,
    file: &TrainConfigFile,
    arch: &ArchConfig,
) -> Result<(LoadedDataset, gdyn_run::TrainingSet), Failure> {
    let ds = LoadedDataset::load(data)
        .map_err(|e| Failure::Config(format!("dataset {}: {e}", data.display())))?;
    let ctx = Arc::new(context_from_dataset(arch.clone(), &ds).map_err(config_err)?);
    let set = training_set_from_split(ctx, &ds, &file.split, file.limit_frames)
        .map_err(config_err)?;
    Ok((ds, set))
}

fn write_static_csv(path: &Path, history: &[EpochStats]) -> Result<(), Failure> {
    let mut text = String::from("epoch,lr,total,rec,rec_pos,rand,sdf,reg,mean_z_sq,rho\n");
    for s in history {
        let rho = s
            .rho
            .iter()
            .map(|r| format!("{r:.6e}"))
            .collect::<Vec<_>>()
            .join(";");
        text.push_str(&format!(
            "{},{:.6e},{:.6e},{:.6e},{:.6e},{:.6e},{:.6e},{:.6e},{:.6e},{rho}\n",
            s.epoch, s.lr, s.total, s.rec, s.rec_pos, s.rand, s.sdf, s.reg, s.mean_z_sq
        ));
    }
    std::fs::write(path, text).map_err(config_err)
}

fn write_dynamic_csv(path: &Path, history: &[DynEpochStats]) -> Result<(), Failure> {
    let mut text = String::from("epoch,lr,total,geo,geo_real,z_match,reg\n");
    for s in history {
        text.push_str(&format!(
            "{},{:.6e},{:.6e},{:.6e},{:.6e},{:.6e},{:.6e}\n",
            s.epoch, s.lr, s.total, s.geo, s.geo_real, s.z_match, s.reg
        ));
    }
    std::fs::write(path, text).map_err(config_err)
}

pub fn train_static(
    data: &Path,
    config: &Path,
    out: &Path,
    seed: Option<u64>,
    resume: bool,
) -> Result<(), Failure> {
    let start = Instant::now();
    let file = TrainConfigFile::load(config).map_err(Failure::Config)?;
    let arch = file.arch.resolve().map_err(Failure::Config)?;
    let mut cfg = file.static_stage.clone();
    if let Some(s) = seed {
        cfg.seed = s;
    }

    let (_, set) = load_training_set(data, &file, &arch)?;
    let init = if resume {
        let (params, _) = ParamStore::<f32>::load(out, Some(&arch))
            .map_err(|e| Failure::Config(format!("resume {}: {e}", out.display())))?;
        println!("resuming from {}", out.display());
        Some(params)
    } else {
        None
    };

    let mut manifest = RunManifest::new(
        seed,
        serde_json::json!({ "arch": arch, "static": cfg, "limit_frames": file.limit_frames, "split": file.split }),
    );
    manifest.input(config).map_err(config_err)?;
    manifest.input(&data.join("manifest.json")).map_err(config_err)?;

    let (params, history) = train_static_from(&set, &cfg, init, |s| {
        log::info!(
            "static epoch {}: total {:.5} rec_pos {:.5} mean_z_sq {:.3}",
            s.epoch,
            s.total,
            s.rec_pos,
            s.mean_z_sq
        );
    })
    .map_err(train_err)?;

    params.save(out, &arch).map_err(config_err)?;
    let csv = sibling(out, "metrics.csv");
    write_static_csv(&csv, &history)?;

    for path in [out.with_extension("json"), out.with_extension("bin"), csv] {
        manifest.output(&path).map_err(config_err)?;
    }
    manifest.wall_seconds = start.elapsed().as_secs_f64();
    manifest_io(&manifest, &sibling(out, "run.json"))?;

    let last = history.last().expect("at least one epoch");
    println!(
        "static stage done: {} epochs, rec_pos {:.5} ({:.2}% of bbox diag), mean_z_sq {:.3}",
        history.len(),
        last.rec_pos,
        100.0 * last.rec_pos / set.ctx.bbox_diag,
        last.mean_z_sq
    );
    Ok(())
}

pub fn train_dynamic_cmd(
    data: &Path,
    config: &Path,
    out: &Path,
    init: Option<&Path>,
    seed: Option<u64>,
    resume: bool,
) -> Result<(), Failure> {
    let start = Instant::now();
    let file = TrainConfigFile::load(config).map_err(Failure::Config)?;
    let arch = file.arch.resolve().map_err(Failure::Config)?;
    let mut cfg = file.dynamic.clone();
    if let Some(s) = seed {
        cfg.seed = s;
    }

    // Resume continues from the previous dynamic checkpoint; otherwise the
    // static checkpoint is mandatory.
    let start_stem = if resume {
        out
    } else {
        init.ok_or_else(|| {
            Failure::Config("train-dynamic requires --init <static checkpoint> (or --resume)".into())
        })?
    };
    let (start_params, _) = ParamStore::<f32>::load(start_stem, Some(&arch))
        .map_err(|e| Failure::Config(format!("checkpoint {}: {e}", start_stem.display())))?;

    let (_, set) = load_training_set(data, &file, &arch)?;

    let mut manifest = RunManifest::new(
        seed,
        serde_json::json!({ "arch": arch, "dynamic": cfg, "limit_frames": file.limit_frames, "split": file.split }),
    );
    manifest.input(config).map_err(config_err)?;
    manifest.input(&data.join("manifest.json")).map_err(config_err)?;
    manifest.input(&start_stem.with_extension("bin")).map_err(config_err)?;

    let (params, history) = train_dynamic(&set, &start_params, &cfg, |s| {
        log::info!(
            "dynamic epoch {}: total {:.5} geo_real {:.5} z_match {:.5}",
            s.epoch,
            s.total,
            s.geo_real,
            s.z_match
        );
    })
    .map_err(train_err)?;

    params.save(out, &arch).map_err(config_err)?;
    let csv = sibling(out, "metrics.csv");
    write_dynamic_csv(&csv, &history)?;

    for path in [out.with_extension("json"), out.with_extension("bin"), csv] {
        manifest.output(&path).map_err(config_err)?;
    }
    manifest.wall_seconds = start.elapsed().as_secs_f64();
    manifest_io(&manifest, &sibling(out, "run.json"))?;

    let last = history.last().expect("at least one epoch");
    println!(
        "dynamic stage done: {} epochs, geo_real {:.5} ({:.2}% of bbox diag)",
        history.len(),
        last.geo_real,
        100.0 * last.geo_real / set.ctx.bbox_diag
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
pub fn predict(
    ckpt: &Path,
    data: &Path,
    driver: &Path,
    init: Option<&Path>,
    out: &Path,
    no_collision_fix: bool,
    seed: Option<u64>,
) -> Result<(), Failure> {
    let start = Instant::now();
    let (params, arch) = ParamStore::<f32>::load(ckpt, None)
        .map_err(|e| Failure::Config(format!("checkpoint {}: {e}", ckpt.display())))?;
    let ds = LoadedDataset::load(data)
        .map_err(|e| Failure::Config(format!("dataset {}: {e}", data.display())))?;
    let ctx = context_from_dataset(arch.clone(), &ds).map_err(|e| {
        Failure::Config(format!(
            "checkpoint arch '{}' incompatible with dataset {}: {e}",
            arch.name,
            data.display()
        ))
    })?;

    let driver_seq = load_gdyn(driver)
        .map_err(|e| Failure::Config(format!("driver {}: {e}", driver.display())))?;
    if driver_seq.vertex_count != ctx.surface.mesh.vertex_count() {
        return Err(Failure::Config(format!(
            "driver sequence has {} vertices, dataset driver mesh has {}",
            driver_seq.vertex_count,
            ctx.surface.mesh.vertex_count()
        )));
    }
    let driver_positions: Vec<_> = (0..driver_seq.frame_count())
        .map(|t| driver_seq.frame_f64(t))
        .collect();

    let gt: Option<Vec<Vec<gdyn_core::vecmath::V3>>> = match init {
        Some(path) => {
            let seq = load_gdyn(path)
                .map_err(|e| Failure::Config(format!("init {}: {e}", path.display())))?;
            if seq.vertex_count != ctx.garment.vertex_count() {
                return Err(Failure::Config(format!(
                    "init sequence has {} vertices, garment has {}",
                    seq.vertex_count,
                    ctx.garment.vertex_count()
                )));
            }
            Some((0..seq.frame_count()).map(|t| seq.frame_f64(t)).collect())
        }
        None => None,
    };

    let cfg = RolloutConfig {
        resolver: (!no_collision_fix).then(ResolverConfig::default),
        fixed_weights: false,
    };
    let mut manifest = RunManifest::new(
        seed,
        serde_json::json!({ "arch": arch, "no_collision_fix": no_collision_fix }),
    );
    manifest.input(&ckpt.with_extension("bin")).map_err(config_err)?;
    manifest.input(driver).map_err(config_err)?;
    if let Some(path) = init {
        manifest.input(path).map_err(config_err)?;
    }

    let result = rollout(&ctx, &params, &driver_positions, gt.as_deref(), &cfg).map_err(
        |e| match e {
            RolloutError::NonFinite { .. } => Failure::Predict(e.to_string()),
            RolloutError::Data(msg) => Failure::Config(msg),
        },
    )?;

    let mut seq = GdynSequence::new(ctx.garment.vertex_count());
    for state in &result.states {
        seq.push_f64(&state.positions);
    }
    save_gdyn(out, &seq).map_err(config_err)?;

    let csv = sibling(out, "metrics.csv");
    let mut text = String::from("frame,l2,penetration,resolver_iters,wall_ms\n");
    for m in &result.metrics {
        let l2 = m.l2.map(|v| format!("{v:.6e}")).unwrap_or_default();
        text.push_str(&format!(
            "{},{l2},{:.6e},{},{:.3}\n",
            m.frame, m.penetration, m.resolver_iters, m.wall_ms
        ));
    }
    std::fs::write(&csv, text).map_err(config_err)?;

    manifest.output(out).map_err(config_err)?;
    manifest.output(&csv).map_err(config_err)?;
    manifest.wall_seconds = start.elapsed().as_secs_f64();
    manifest_io(&manifest, &sibling(out, "run.json"))?;

    let n = result.metrics.len() as f64;
    let mean_pen = result.metrics.iter().map(|m| m.penetration).sum::<f64>() / n;
    let max_pen = result.metrics.iter().map(|m| m.penetration).fold(0.0, f64::max);
    println!(
        "predicted {} frames -> {}; penetration (> {PENETRATION_TOL} m) mean {:.4}% max {:.4}%",
        result.states.len(),
        out.display(),
        100.0 * mean_pen,
        100.0 * max_pen
    );
    if let Some(mean_l2) = mean_l2(&result.metrics) {
        println!("normalized L2 vs init frames: {mean_l2:.5}");
    }
    Ok(())
}

fn mean_l2(metrics: &[gdyn_run::FrameMetrics]) -> Option<f64> {
    let scored: Vec<f64> = metrics.iter().filter_map(|m| m.l2).collect();
    (!scored.is_empty()).then(|| scored.iter().sum::<f64>() / scored.len() as f64)
}

pub fn verify(suite: Suite, seed: Option<u64>, manifest_path: &Path) -> Result<(), Failure> {
    let start = Instant::now();
    let mut checks: Vec<Check> = Vec::new();
    if matches!(suite, Suite::Gradients | Suite::All) {
        checks.extend(gradients_suite());
    }
    if matches!(suite, Suite::Invariants | Suite::All) {
        checks.extend(invariants_suite());
    }

    let width = checks.iter().map(|c| c.name.len()).max().unwrap_or(0);
    for c in &checks {
        println!(
            "{} {:width$} {}",
            if c.pass { "PASS" } else { "FAIL" },
            c.name,
            c.detail
        );
    }
    let failed = checks.iter().filter(|c| !c.pass).count();
    println!(
        "{} checks, {} failed, {:.1} s",
        checks.len(),
        failed,
        start.elapsed().as_secs_f64()
    );

    let mut manifest = RunManifest::new(
        seed,
        serde_json::json!({ "suite": format!("{suite:?}"), "checks": checks.len(), "failed": failed }),
    );
    manifest.wall_seconds = start.elapsed().as_secs_f64();
    manifest_io(&manifest, manifest_path)?;

    if all_pass(&checks) {
        Ok(())
    } else {
        Err(Failure::Checks(format!("{failed} checks failed")))
    }
}
