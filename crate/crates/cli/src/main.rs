use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use geomattn_cli::commands;
use geomattn_cli::settings::parse_config_text;
use geomattn_cli::{Failure, Settings};

#[derive(Parser, Debug)]
#[command(name = "geomattn", version, about = "Geometric-attention re-identification: data, training, evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Options shared by every command that resolves a configuration.
#[derive(Args, Debug, Clone, Default)]
struct ConfigArgs {
    /// `key = value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override any configuration key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Run seed; also seeds the synthetic data unless `synthetic.seed` is
    /// set. Falls back to the config file, then to `GEOMATTN_SEED`.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug, Clone, Default)]
struct SyntheticArgs {
    /// Number of synthetic identities.
    #[arg(long)]
    ids: Option<usize>,
    /// Images per synthetic identity.
    #[arg(long)]
    images: Option<usize>,
    /// Side length of the rendered images.
    #[arg(long)]
    size: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render the synthetic sprite dataset with manifests and landmarks.
    GenerateData {
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        synthetic: SyntheticArgs,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Train a model and write model.ckpt, train.log.jsonl and config.echo.
    Train(TrainArgs),
    /// Score a checkpoint; metrics JSON goes to stdout.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        query: PathBuf,
        #[arg(long)]
        gallery: PathBuf,
        /// Also write the metrics JSON here.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Rescale images to the checkpoint's input size.
        #[arg(long)]
        resize: bool,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Write attention masks and overlays for a set of images.
    VisualizeAttention {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Manifest listing the images.
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Image files (PPM/PGM).
        images: Vec<PathBuf>,
    },
    /// Finite-difference check of every primitive and of the full objective.
    Gradcheck {
        #[arg(long, env = "GEOMATTN_SEED", default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Generate the synthetic dataset into `<out>/data` and train on it.
    #[arg(long)]
    synthetic: bool,
    /// Directory with train.csv (and optionally query.csv, gallery.csv).
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// veri, vehicleid or desk.
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    lambda_tri_gb: Option<f64>,
    #[arg(long)]
    lambda_sce_gb: Option<f64>,
    #[arg(long)]
    lambda_tri_ab: Option<f64>,
    #[arg(long)]
    lambda_sce_ab: Option<f64>,
    #[arg(long)]
    lambda_rot: Option<f64>,
    #[command(flatten)]
    synthetic_args: SyntheticArgs,
    #[command(flatten)]
    config: ConfigArgs,
}

type Overrides = Vec<(String, String)>;

fn push<T: ToString>(o: &mut Overrides, key: &str, value: Option<T>) {
    if let Some(v) = value {
        o.push((key.to_string(), v.to_string()));
    }
}

/// File entries, then `--set`, then the dedicated flags in `extra`.
fn resolve(args: &ConfigArgs, extra: Overrides) -> Result<Settings, Failure> {
    let mut o = Overrides::new();
    if let Some(path) = &args.config {
        let text = fs::read_to_string(path).map_err(|e| Failure::data(format!("{}: {e}", path.display())))?;
        o.extend(parse_config_text(&text, path)?);
    }
    for kv in &args.set {
        let (k, v) =
            kv.split_once('=').ok_or_else(|| Failure::config(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        o.push((k.trim().to_string(), v.trim().to_string()));
    }
    match args.seed {
        Some(seed) => push(&mut o, "seed", Some(seed)),
        None if !o.iter().any(|(k, _)| k == "seed") => push(&mut o, "seed", env_seed()?),
        None => {}
    }
    o.extend(extra);
    Settings::resolve(&o)
}

const SEED_VAR: &str = "GEOMATTN_SEED";

fn env_seed() -> Result<Option<u64>, Failure> {
    match std::env::var(SEED_VAR) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| Failure::config(format!("{SEED_VAR}={v:?} is not an unsigned integer"))),
        Err(_) => Ok(None),
    }
}

fn synthetic_overrides(o: &mut Overrides, s: &SyntheticArgs) {
    push(o, "synthetic.ids", s.ids);
    push(o, "synthetic.images", s.images);
    push(o, "synthetic.size", s.size);
    push(o, "model.size", s.size);
}

fn print_json<T: serde::Serialize>(value: &T) -> Result<String, Failure> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Failure::data(e.to_string()))?;
    println!("{text}");
    Ok(text)
}

fn write_text(path: &Path, text: &str) -> Result<(), Failure> {
    fs::write(path, text).map_err(|e| Failure::data(format!("{}: {e}", path.display())))
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::GenerateData { out, synthetic, config } => {
            let mut extra = Overrides::new();
            synthetic_overrides(&mut extra, &synthetic);
            let settings = resolve(&config, extra)?;
            commands::generate_data(&settings, &out)?;
        }
        Command::Train(t) => {
            let mut extra = Overrides::new();
            if t.synthetic {
                extra.push(("data.synthetic".into(), "true".into()));
            }
            push(&mut extra, "data.dir", t.data.as_ref().map(|p| p.display()));
            push(&mut extra, "out", t.out.as_ref().map(|p| p.display()));
            push(&mut extra, "preset", t.preset.as_ref());
            push(&mut extra, "optim.epochs", t.epochs);
            push(&mut extra, "optim.lr0", t.lr);
            push(&mut extra, "loss.lambda_tri_gb", t.lambda_tri_gb);
            push(&mut extra, "loss.lambda_sce_gb", t.lambda_sce_gb);
            push(&mut extra, "loss.lambda_tri_ab", t.lambda_tri_ab);
            push(&mut extra, "loss.lambda_sce_ab", t.lambda_sce_ab);
            push(&mut extra, "loss.lambda_rot", t.lambda_rot);
            synthetic_overrides(&mut extra, &t.synthetic_args);
            let settings = resolve(&t.config, extra)?;
            log::info!("resolved configuration:\n{}", settings.echo());
            let started = Instant::now();
            let run = commands::train(&settings)?;
            log::info!(
                "wrote {} in {:.0}s",
                run.out.join(commands::CHECKPOINT_FILE).display(),
                started.elapsed().as_secs_f64()
            );
        }
        Command::Evaluate { checkpoint, query, gallery, out, resize, config } => {
            let settings = resolve(&config, Overrides::new())?;
            log::debug!("resolved configuration:\n{}", settings.echo());
            let report = commands::evaluate(&settings, &checkpoint, &query, &gallery, resize)?;
            let text = print_json(&report)?;
            if let Some(path) = out {
                write_text(&path, &text)?;
            }
        }
        Command::VisualizeAttention { checkpoint, manifest, out, images } => {
            let summary = commands::visualize_attention(&checkpoint, manifest.as_deref(), &images, &out)?;
            print_json(&summary)?;
        }
        Command::Gradcheck { seed } => {
            let started = Instant::now();
            let report = commands::gradcheck(seed)?;
            for c in &report.checks {
                eprintln!(
                    "{:<28} max rel err {:.3e} ({} checked, {} skipped)",
                    c.name, c.max_rel_error, c.checked, c.skipped
                );
            }
            eprintln!("overall max rel err {:.3e} in {:.1}s", report.max_rel_error(), started.elapsed().as_secs_f64());
            print_json(&report)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).format_timestamp(None).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            log::error!("{f}");
            ExitCode::from(f.exit_code() as u8)
        }
    }
}
