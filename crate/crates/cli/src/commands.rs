use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use geomattn::acm::AcmConfig;
use geomattn::data::{
    channel_mean, generate_synthetic_dataset, load_image, load_manifest, write_dataset_layout, ReidSample,
};
use geomattn::eval::{evaluate as evaluate_model, MetricsReport};
use geomattn::gradcheck::{self, GradcheckReport};
use geomattn::model::{ArchConfig, ModelState};
use geomattn::optim::{train_epoch, EpochLog, OptState, TrainSet};
use geomattn::viz::{write_attention_maps, VisualizedImage};

use crate::{Failure, Settings};

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const LOG_FILE: &str = "train.log.jsonl";
pub const ECHO_FILE: &str = "config.echo";
pub const DATA_DIR: &str = "data";

fn io_failure(path: &Path, e: std::io::Error) -> Failure {
    Failure::data(format!("{}: {e}", path.display()))
}

fn create_dir(path: &Path) -> Result<(), Failure> {
    fs::create_dir_all(path).map_err(|e| io_failure(path, e))
}

fn write_echo(settings: &Settings, dir: &Path) -> Result<PathBuf, Failure> {
    let path = dir.join(ECHO_FILE);
    fs::write(&path, settings.echo()).map_err(|e| io_failure(&path, e))?;
    Ok(path)
}

/// Train, query and gallery samples.
#[derive(Clone, Debug)]
pub struct Splits {
    pub train: Vec<ReidSample>,
    pub query: Vec<ReidSample>,
    pub gallery: Vec<ReidSample>,
}

/// Renders the synthetic set described by `synthetic.*` into `out`.
pub fn generate_data(settings: &Settings, out: &Path) -> Result<Splits, Failure> {
    let dataset = generate_synthetic_dataset(&settings.synthetic_spec()?)?;
    create_dir(out)?;
    let written = write_dataset_layout(out, &dataset)?;
    write_echo(settings, out)?;
    log::info!(
        "wrote {} train, {} query and {} gallery images; manifests {}",
        dataset.train.len(),
        dataset.query.len(),
        dataset.gallery.len(),
        written.iter().map(|p| p.display().to_string()).collect::<Vec<_>>().join(", ")
    );
    Ok(Splits { train: dataset.train, query: dataset.query, gallery: dataset.gallery })
}

fn load_splits(dir: &Path, size: usize) -> Result<Splits, Failure> {
    if !dir.is_dir() {
        return Err(Failure::data(format!("{}: dataset directory not found", dir.display())));
    }
    let optional = |name: &str| -> Result<Vec<ReidSample>, Failure> {
        let path = dir.join(name);
        if path.exists() {
            Ok(load_manifest(&path, Some(size))?)
        } else {
            Ok(Vec::new())
        }
    };
    Ok(Splits {
        train: load_manifest(&dir.join("train.csv"), Some(size))?,
        query: optional("query.csv")?,
        gallery: optional("gallery.csv")?,
    })
}

/// Everything a finished training run produced.
#[derive(Debug)]
pub struct TrainRun {
    pub state: ModelState,
    pub epochs: Vec<EpochLog>,
    pub data: Splits,
    pub out: PathBuf,
}

/// Trains from resolved settings and writes the checkpoint, the per-step
/// log and the configuration echo into `out`.
pub fn train(settings: &Settings) -> Result<TrainRun, Failure> {
    let out = settings.path("out").ok_or_else(|| Failure::config("an output directory is required"))?;
    let mut cfg = settings.train_config()?;
    let size: usize = settings.get("model.size")?;
    let seed: u64 = settings.get("seed")?;
    let checkpoint_every: usize = settings.get("train.checkpoint_every")?;
    create_dir(&out)?;

    let data = if settings.get::<bool>("data.synthetic")? {
        let synthetic_size: usize = settings.get("synthetic.size")?;
        if synthetic_size != size {
            return Err(Failure::config(format!("synthetic.size {synthetic_size} differs from model.size {size}")));
        }
        generate_data(settings, &out.join(DATA_DIR))?
    } else {
        let dir =
            settings.path("data.dir").ok_or_else(|| Failure::config("give a dataset directory or --synthetic"))?;
        load_splits(&dir, size)?
    };
    write_echo(settings, &out)?;

    cfg.augment.fill = channel_mean(&data.train);
    let train_set = TrainSet::new(&data.train, cfg.p, cfg.k)?;
    let arch = ArchConfig {
        input_size: size,
        acm: AcmConfig::new(settings.get("acm.window")?)?,
        ..ArchConfig::desk(train_set.num_classes())
    };
    let mut state = ModelState::new(arch, seed)?;
    let mut opt = OptState::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    log::info!(
        "training {} parameters on {} images of {} identities for {} epochs",
        state.num_parameters(),
        data.train.len(),
        train_set.num_classes(),
        cfg.optim.epochs
    );

    let log_path = out.join(LOG_FILE);
    let file = fs::File::create(&log_path).map_err(|e| io_failure(&log_path, e))?;
    let mut log_out = BufWriter::new(file);
    let mut write_error = None;
    let mut epochs = Vec::with_capacity(cfg.optim.epochs);
    let started = Instant::now();
    for epoch in 0..cfg.optim.epochs {
        let summary = train_epoch(&mut state, &train_set, &mut opt, &cfg, epoch, &mut rng, |step| {
            let line = serde_json::to_string(step).expect("step logs serialize");
            if let Err(e) = writeln!(log_out, "{line}") {
                write_error.get_or_insert(e);
            }
        })?;
        if let Some(e) = write_error.take() {
            return Err(io_failure(&log_path, e));
        }
        log::info!(
            "epoch {epoch}: lr {:.3e} loss {:.4} (rot {:.4}) {:.0}s",
            summary.lr,
            summary.mean_total,
            summary.mean.rot,
            started.elapsed().as_secs_f64()
        );
        epochs.push(summary);
        if checkpoint_every > 0 && (epoch + 1) % checkpoint_every == 0 && epoch + 1 < cfg.optim.epochs {
            state.save(&out.join(format!("model.epoch{:03}.ckpt", epoch + 1)))?;
        }
    }
    log_out.flush().map_err(|e| io_failure(&log_path, e))?;
    state.save(&out.join(CHECKPOINT_FILE))?;
    Ok(TrainRun { state, epochs, data, out })
}

/// Loads both manifests for `state`. Without `resize` every image must
/// already match the checkpoint's input size.
pub fn load_eval_set(state: &ModelState, manifest: &Path, resize: bool) -> Result<Vec<ReidSample>, Failure> {
    let size = state.arch.input_size;
    let samples = load_manifest(manifest, resize.then_some(size))?;
    if let Some(bad) = samples.iter().find(|s| s.image.shape()[1..] != [size, size]) {
        return Err(Failure::config(format!(
            "{}: image {} is {:?} but the checkpoint expects {size}×{size}; pass --resize to rescale",
            manifest.display(),
            bad.name,
            &bad.image.shape()[1..]
        )));
    }
    Ok(samples)
}

/// Scores a checkpoint on a query/gallery pair.
pub fn evaluate(
    settings: &Settings,
    checkpoint: &Path,
    query: &Path,
    gallery: &Path,
    resize: bool,
) -> Result<MetricsReport, Failure> {
    let state = ModelState::load(checkpoint)?;
    let q = load_eval_set(&state, query, resize)?;
    let g = load_eval_set(&state, gallery, resize)?;
    let report = evaluate_model(&state, &q, &g, &settings.eval_config()?)?;
    if report.tmap.is_none() {
        log::warn!("{} has no track column; tmAP omitted", gallery.display());
    }
    Ok(report)
}

#[derive(Clone, Debug, Serialize)]
pub struct AttentionSummary {
    pub images: Vec<VisualizedImage>,
    pub rotation_consistency: f64,
}

/// Reads images from a manifest, from explicit paths, or both.
pub fn collect_images(manifest: Option<&Path>, paths: &[PathBuf], size: usize) -> Result<Vec<ReidSample>, Failure> {
    let mut samples = match manifest {
        Some(m) => load_manifest(m, Some(size))?,
        None => Vec::new(),
    };
    for p in paths {
        samples.push(ReidSample {
            name: p.file_name().map_or_else(|| p.display().to_string(), |n| n.to_string_lossy().into_owned()),
            image: load_image(p, Some(size))?,
            identity: 0,
            camera: 0,
            track: None,
        });
    }
    if samples.is_empty() {
        return Err(Failure::config("no images given"));
    }
    Ok(samples)
}

/// Writes masks and overlays for each image and reports rotation consistency.
pub fn visualize_attention(
    checkpoint: &Path,
    manifest: Option<&Path>,
    paths: &[PathBuf],
    out: &Path,
) -> Result<AttentionSummary, Failure> {
    let state = ModelState::load(checkpoint)?;
    let samples = collect_images(manifest, paths, state.arch.input_size)?;
    create_dir(out)?;
    let images = write_attention_maps(&state, &samples, out)?;
    let rotation_consistency = images.iter().map(|v| v.consistency).sum::<f64>() / images.len() as f64;
    Ok(AttentionSummary { images, rotation_consistency })
}

pub fn gradcheck(seed: u64) -> Result<GradcheckReport, Failure> {
    Ok(gradcheck::run(seed)?)
}
