use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use pmri_cli::commands::{self, ReconMethod, ReconOptions, TrainOverrides};
use pmri_cli::config::RunConfig;
use pmri_cli::error::{CliError, Result, EXIT_OK};
use pmri_cli::{dataset, export, pipeline};
use pmri_core::eval::Method;
use pmri_core::learn::Scale;

#[derive(Parser)]
#[command(name = "pmri", version, about = "Parallel MRI simulation and reconstruction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Zf,
    Sense,
    Dc,
    Learned,
}

#[derive(Clone, Copy, ValueEnum)]
enum ScaleArg {
    Desk,
    Paper,
}

#[derive(Clone, Copy, ValueEnum)]
enum EvalMethodArg {
    Zf,
    Sense,
    Learned,
}

#[derive(Subcommand)]
enum Command {
    /// Print the default configuration as TOML.
    Config,
    /// Simulate a dataset directory.
    Simulate {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory (default: <root>/dataset).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        force: bool,
    },
    /// Estimate coil maps from the ACS block.
    Calibrate {
        #[arg(long)]
        dataset: PathBuf,
        /// Calibrate one slice into maps_est.cplx; default is every slice.
        #[arg(long)]
        slice: Option<String>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Reconstruct one slice.
    Reconstruct {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        slice: String,
        #[arg(long, value_enum)]
        method: MethodArg,
        /// Fill weight for the dc method.
        #[arg(long, default_value_t = 1.0)]
        lambda: f64,
        /// Tikhonov weight for SENSE (default: the config's eval.sense_reg).
        #[arg(long)]
        reg: Option<f64>,
        /// Coil maps (rank-3 CPLX1); default is ACS calibration.
        #[arg(long)]
        maps: Option<PathBuf>,
        /// Trained model directory for the learned method.
        #[arg(long)]
        model: Option<PathBuf>,
        /// Use the shifted-ACS acquisition of a held-out slice.
        #[arg(long)]
        shifted: bool,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Train the learned reconstruction on the non-held-out slices.
    Train {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        batch: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_enum)]
        scale: Option<ScaleArg>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Score methods on the held-out slices.
    Evaluate {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long, value_enum, value_delimiter = ',')]
        methods: Option<Vec<EvalMethodArg>>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Write a tensor's normalized magnitude as an 8-bit PNG.
    Export {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Export one coil of a rank-3 tensor instead of the RSS.
        #[arg(long)]
        coil: Option<usize>,
        #[arg(long)]
        force: bool,
    },
    /// Run simulate, calibrate, train and evaluate, then check the results.
    Pipeline {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Root directory for all stages.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        force: bool,
        /// Print the planned stages and exit.
        #[arg(long)]
        dry_run: bool,
    },
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Config => print!("{}", RunConfig::default().to_toml()),
        Command::Simulate { config, out, force } => {
            let cfg = load_config(config.as_deref())?;
            let dir = out.unwrap_or_else(|| cfg.output_root().join("dataset"));
            let m = dataset::simulate(&cfg, &dir, force)?;
            println!("{} ({} slices, config {})", dir.display(), m.slices.len(), m.config_hash);
        }
        Command::Calibrate {
            dataset,
            slice,
            out,
            force,
        } => {
            commands::calibrate(&dataset, slice.as_deref(), &out, force)?;
            println!("{}", out.display());
        }
        Command::Reconstruct {
            dataset,
            slice,
            method,
            lambda,
            reg,
            maps,
            model,
            shifted,
            out,
            force,
        } => {
            let method = match method {
                MethodArg::Zf => ReconMethod::Zf,
                MethodArg::Sense => ReconMethod::Sense,
                MethodArg::Dc => ReconMethod::Dc,
                MethodArg::Learned => ReconMethod::Learned,
            };
            let opts = ReconOptions {
                method,
                slice,
                lambda,
                reg,
                maps,
                model,
                shifted,
            };
            commands::reconstruct(&dataset, &opts, &out, force)?;
            println!("{}", out.join("recon.cplx").display());
        }
        Command::Train {
            dataset,
            epochs,
            lr,
            batch,
            seed,
            scale,
            out,
            force,
        } => {
            let overrides = TrainOverrides {
                epochs,
                lr,
                batch,
                seed,
                scale: scale.map(|s| match s {
                    ScaleArg::Desk => Scale::Desk,
                    ScaleArg::Paper => Scale::Paper,
                }),
            };
            commands::train_model(&dataset, &overrides, &out, force)?;
            println!("{}", out.join("params.bin").display());
        }
        Command::Evaluate {
            dataset,
            model,
            methods,
            out,
            force,
        } => {
            let methods: Option<Vec<Method>> = methods.map(|v| {
                v.into_iter()
                    .map(|m| match m {
                        EvalMethodArg::Zf => Method::Zf,
                        EvalMethodArg::Sense => Method::Sense,
                        EvalMethodArg::Learned => Method::Learned,
                    })
                    .collect()
            });
            let (_, ev) = commands::evaluate(&dataset, model.as_deref(), methods.as_deref(), &out, force)?;
            pmri_core::eval::write_summary_table(&ev.summary, std::io::stdout().lock())?;
        }
        Command::Export {
            input,
            out,
            coil,
            force,
        } => {
            export::export(&input, &out, coil, force)?;
            println!("{}", out.display());
        }
        Command::Pipeline {
            config,
            out,
            force,
            dry_run,
        } => {
            let mut cfg = load_config(config.as_deref())?;
            if out.is_some() {
                cfg.output_dir = out;
            }
            cfg.validate()?;
            let root = cfg.output_root();
            if dry_run {
                println!("config {}", cfg.hash());
                for line in pipeline::plan(&cfg, &root) {
                    println!("{line}");
                }
                return Ok(());
            }
            let report = pipeline::run(&cfg, &root, force)?;
            for c in &report.checks {
                println!("{c}");
            }
            if !report.passed() {
                let failed: Vec<&str> = report.checks.iter().filter(|c| !c.passed).map(|c| c.name).collect();
                return Err(CliError::Acceptance(failed.join(", ")));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::from(EXIT_OK as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
