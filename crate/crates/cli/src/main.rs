use std::path::PathBuf;
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use audiofault_cli::commands::{run_eval, run_gradcheck, run_prepare, run_synth, run_train};
use audiofault_cli::config::RunConfig;
use audiofault_cli::{exit_code_for, ExitStatus};
use audiofault_core::dataset::Machine;
use audiofault_core::error::{Error, Result};
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "audiofault",
    version,
    about = "Acoustic fault detection for machine sounds: synthesize or ingest a dataset, \
             prepare mel-spectrogram features, train per-(machine, SNR) classifiers, and \
             report the full metric table"
)]
struct Cli {
    /// JSON run configuration (missing fields take defaults).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Master seed; overrides seed, synth.seed and train.seed together.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Per-field config override, e.g. --set spectrogram.n_mels=32
    /// (repeatable).
    #[arg(long = "set", global = true, value_name = "PATH=VALUE")]
    overrides: Vec<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset tree (MIMII layout) and a manifest.
    Synth {
        /// Directory to write the dataset tree into.
        #[arg(long)]
        root: PathBuf,
        /// Output directory for the manifest and config echo.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Restrict to these machines, e.g. "fan,pump".
        #[arg(long)]
        machines: Option<String>,
        /// Restrict to these SNR levels in dB, e.g. "-6,0,6".
        #[arg(long)]
        snr: Option<String>,
    },
    /// Split, balance the train split by augmentation, and cache features.
    Prepare {
        /// Manifest produced by `synth` (or by scanning a MIMII tree).
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Scan an existing MIMII-layout tree into a manifest.
    Scan {
        #[arg(long)]
        root: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train one model per (machine, SNR) cell from a prepared manifest.
    Train {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        machines: Option<String>,
        #[arg(long)]
        snr: Option<String>,
        /// Shorthand for --set train.epochs=N.
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Evaluate checkpoints on the test split and emit the metric table.
    Eval {
        #[arg(long)]
        manifest: PathBuf,
        /// Directory holding model_<machine>_<snr>dB.ckpt files.
        #[arg(long)]
        checkpoints: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        machines: Option<String>,
        #[arg(long)]
        snr: Option<String>,
    },
    /// Verify analytic gradients against finite differences.
    Gradcheck {
        /// Negative control: corrupt one analytic gradient on purpose.
        #[arg(long, hide = true)]
        corrupt_backward: bool,
    },
}

fn parse_machines(s: &str) -> Result<Vec<Machine>> {
    s.split(',')
        .map(|m| m.trim().parse::<Machine>())
        .collect()
}

fn parse_snrs(s: &str) -> Result<Vec<i32>> {
    s.split(',')
        .map(|v| {
            v.trim()
                .parse::<i32>()
                .map_err(|_| Error::Config(format!("bad SNR value {v:?}")))
        })
        .collect()
}

fn default_out(command: &str) -> PathBuf {
    let millis = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis())
        .unwrap_or(0);
    PathBuf::from("runs").join(format!("{millis}-{command}"))
}

fn build_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.set_global_seed(seed);
    }
    for assignment in &cli.overrides {
        cfg.apply_override(assignment)?;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<ExitStatus> {
    let mut cfg = build_config(&cli)?;
    match &cli.command {
        Command::Synth {
            root,
            out,
            machines,
            snr,
        } => {
            if let Some(ms) = machines {
                let wanted = parse_machines(ms)?;
                cfg.synth.machines.retain(|r| wanted.contains(&r.machine));
            }
            if let Some(snrs) = snr {
                cfg.synth.snr_levels_db = parse_snrs(snrs)?;
            }
            cfg.synth.validate()?;
            let out = out.clone().unwrap_or_else(|| default_out("synth"));
            run_synth(&cfg, root, &out)?;
            Ok(ExitStatus::Ok)
        }
        Command::Scan { root, out } => {
            let out = out.clone().unwrap_or_else(|| default_out("scan"));
            std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
            let manifest = audiofault_core::dataset::scan_mimii(root)?;
            manifest.save(out.join("manifest.json"))?;
            println!(
                "scan: {} entries, manifest at {}",
                manifest.entries.len(),
                out.join("manifest.json").display()
            );
            Ok(ExitStatus::Ok)
        }
        Command::Prepare { manifest, out } => {
            let out = out.clone().unwrap_or_else(|| default_out("prepare"));
            run_prepare(&cfg, manifest, &out)?;
            Ok(ExitStatus::Ok)
        }
        Command::Train {
            manifest,
            out,
            machines,
            snr,
            epochs,
        } => {
            if let Some(e) = epochs {
                cfg.train.epochs = *e;
            }
            let machines = machines.as_deref().map(parse_machines).transpose()?;
            let snrs = snr.as_deref().map(parse_snrs).transpose()?;
            let out = out.clone().unwrap_or_else(|| default_out("train"));
            let summary = run_train(&cfg, manifest, &out, machines.as_deref(), snrs.as_deref())?;
            if summary.any_diverged() {
                Ok(ExitStatus::Divergence)
            } else {
                Ok(ExitStatus::Ok)
            }
        }
        Command::Eval {
            manifest,
            checkpoints,
            out,
            machines,
            snr,
        } => {
            let machines = machines.as_deref().map(parse_machines).transpose()?;
            let snrs = snr.as_deref().map(parse_snrs).transpose()?;
            let out = out.clone().unwrap_or_else(|| default_out("eval"));
            let summary = run_eval(
                &cfg,
                manifest,
                checkpoints,
                &out,
                machines.as_deref(),
                snrs.as_deref(),
            )?;
            if summary.any_undefined() {
                eprintln!("eval: some metrics are undefined (single-class split?)");
                Ok(ExitStatus::UndefinedMetrics)
            } else {
                Ok(ExitStatus::Ok)
            }
        }
        Command::Gradcheck { corrupt_backward } => {
            let report = run_gradcheck(cfg.seed, *corrupt_backward)?;
            if report.passed(1e-4) {
                Ok(ExitStatus::Ok)
            } else {
                Ok(ExitStatus::VerificationFailed)
            }
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(status) => ExitCode::from(status as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e) as u8)
        }
    }
}
