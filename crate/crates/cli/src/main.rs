use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use raingen::harness::{
    self, checkpoint, AblationRow, DataConfig, GradcheckOptions, KeyValues, TrainConfig, TrainData,
    Variant, CHECKPOINT_FILE, CONFIG_FILE, REPORT_FILE,
};
use raingen::synthdata::{build_dataset, DatasetManifest};

/// Clear-to-rainy image translation on procedural street scenes.
#[derive(Parser)]
#[command(name = "raingen", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct Settings {
    /// Flat `key = value` settings file.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Override one setting; may be repeated.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Random seed, overriding any `seed` setting.
    #[arg(long)]
    seed: Option<u64>,
}

impl Settings {
    fn key_values(&self) -> Result<KeyValues> {
        self.key_values_with(None)
    }

    /// Settings from `--config`, else from `fallback` when it exists, with
    /// overrides applied on top.
    fn key_values_with(&self, fallback: Option<&Path>) -> Result<KeyValues> {
        let path = self.config.as_deref().or(fallback.filter(|p| p.exists()));
        let mut kv = match path {
            Some(p) => KeyValues::load(p).with_context(|| format!("reading {}", p.display()))?,
            None => KeyValues::default(),
        };
        for s in &self.set {
            kv.set(s)?;
        }
        if let Some(seed) = self.seed {
            kv.insert("seed", seed);
        }
        Ok(kv)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Render the synthetic clear/rainy dataset.
    GenData {
        #[command(flatten)]
        settings: Settings,
    },
    /// Train one configuration and write a checkpoint and log.
    Train {
        #[command(flatten)]
        settings: Settings,
    },
    /// Translate every PNG in a folder with a trained generator.
    Translate {
        #[command(flatten)]
        settings: Settings,
        /// Defaults to `<output_dir>/checkpoint.tpsn`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Compare translated test images against the rainy test split.
    Evaluate {
        #[command(flatten)]
        settings: Settings,
        /// Defaults to `<output_dir>/checkpoint.tpsn`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Defaults to `<output_dir>/report.json`.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Train and evaluate several loss configurations from one seed.
    Ablate {
        #[command(flatten)]
        settings: Settings,
        /// Variants to run, e.g. `M1 M3 M7`; all seven when omitted.
        variants: Vec<Variant>,
    },
    /// Check every primitive and loss gradient against finite differences.
    Gradcheck {
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 20)]
        seeds: u64,
        #[arg(long, default_value_t = 1e-5)]
        step: f64,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
        /// Negate the analytic gradient of this check to confirm that a
        /// broken backward rule is caught.
        #[arg(long, value_name = "NAME")]
        flip_sign: Option<String>,
    },
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

/// Settings for commands that load a trained run: the run's own
/// `config.txt` is used unless `--config` is given.
fn run_config(settings: &Settings, checkpoint: Option<&Path>) -> Result<(TrainConfig, PathBuf)> {
    let fallback = checkpoint
        .and_then(Path::parent)
        .map(|d| d.join(CONFIG_FILE));
    let mut kv = settings.key_values_with(fallback.as_deref())?;
    if fallback.is_none() && settings.config.is_none() {
        let probe = TrainConfig::from_key_values(&kv)?;
        let saved = probe.output_dir.join(CONFIG_FILE);
        if saved.exists() {
            let mut s = settings.clone();
            s.config = Some(saved);
            kv = s.key_values()?;
        }
    }
    let cfg = TrainConfig::from_key_values(&kv)?;
    let ckpt = checkpoint
        .map(Path::to_path_buf)
        .unwrap_or_else(|| cfg.output_dir.join(CHECKPOINT_FILE));
    Ok((cfg, ckpt))
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::GenData { settings } => {
            let cfg = DataConfig::from_key_values(&settings.key_values()?)?;
            let manifest = build_dataset(&cfg.dataset_spec(), &cfg.data_dir, cfg.seed)?;
            eprintln!(
                "wrote {} images to {}",
                manifest.entries.len(),
                cfg.data_dir.display()
            );
        }
        Command::Train { settings } => {
            let cfg = TrainConfig::from_key_values(&settings.key_values()?)?;
            let data = TrainData::load(&cfg).context("loading training data")?;
            let outcome = harness::train(&cfg, &data, &mut |r| {
                eprintln!(
                    "epoch {:>3}  lr {:.1e}  d {:.4}  adv {:.4}  nce {:.4}  geom {:.4}  total {:.4}  p2s {:.4}",
                    r.epoch, r.lr, r.discriminator, r.adversarial, r.contrastive, r.geometric, r.total, r.point_to_segment
                );
            })?;
            eprintln!("checkpoint {}", outcome.checkpoint.display());
            eprintln!("log {}", outcome.log.display());
        }
        Command::Translate {
            settings,
            checkpoint: ckpt,
            input,
            output,
        } => {
            let (cfg, ckpt) = run_config(&settings, ckpt.as_deref())?;
            let params = checkpoint::load(&ckpt, &cfg.model)
                .with_context(|| format!("loading {}", ckpt.display()))?;
            let n = harness::translate_folder(&params, &cfg.model, &input, &output)?;
            eprintln!("translated {n} images into {}", output.display());
        }
        Command::Evaluate {
            settings,
            checkpoint: ckpt,
            report,
        } => {
            let (cfg, ckpt) = run_config(&settings, ckpt.as_deref())?;
            let params = checkpoint::load(&ckpt, &cfg.model)
                .with_context(|| format!("loading {}", ckpt.display()))?;
            let manifest = DatasetManifest::load(&cfg.manifest)?;
            let rep = harness::evaluate(&params, &cfg, &manifest)?;
            let path = report.unwrap_or_else(|| cfg.output_dir.join(REPORT_FILE));
            if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir)?;
            }
            harness::write_report(&path, &rep)?;
            println!("{}", rep.to_json()?);
        }
        Command::Ablate { settings, variants } => {
            let cfg = TrainConfig::from_key_values(&settings.key_values()?)?;
            let variants = if variants.is_empty() {
                Variant::ALL.to_vec()
            } else {
                variants
            };
            let rows: Vec<AblationRow> = harness::ablate(&cfg, &variants, &mut |v, r| {
                eprintln!(
                    "{v} epoch {:>3}  total {:.4}  geom {:.4}",
                    r.epoch, r.total, r.geometric
                );
            })?;
            print!("{}", harness::render_table(&rows));
        }
        Command::Gradcheck {
            seed,
            seeds,
            step,
            tolerance,
            flip_sign,
        } => {
            if seeds == 0 {
                bail!("--seeds must be at least 1");
            }
            let opts = GradcheckOptions {
                first_seed: seed.unwrap_or(0),
                seeds,
                step,
                tolerance,
                flip_sign_of: flip_sign,
            };
            let report = harness::gradcheck(&opts)?;
            print!("{}", report.render());
            if !report.passed() {
                let failed: Vec<&str> = report.failures().map(|r| r.name.as_str()).collect();
                eprintln!("gradient check failed: {}", failed.join(", "));
                return Ok(ExitCode::FAILURE);
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}
