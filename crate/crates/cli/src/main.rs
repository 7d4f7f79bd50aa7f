use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use imc_core::imc_loop::{ClosedLoopLog, Schedule};
use imc_core::metrics::EvalReport;
use imc_core::pipeline::{
    controller_fit, evaluate_log, gen_data, gen_refs, load_io_data, load_network, load_refs, model_fit, pipeline,
    report_path, require_certified, sidecar_path, simulate, train_controller_stage, train_model_stage, write_json,
    ExperimentConfig, TOOL_VERSION,
};
use imc_core::plant::Normalizer;
use imc_core::weights::{self, NetworkRole};
use imc_core::{certify, ImcError, Result};

#[derive(Parser)]
#[command(
    name = "imc",
    version,
    about = "Stable deep GRU internal model control for the quadruple tank"
)]
struct Cli {
    /// Derive every stage seed from this value.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for data generation and training.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Run on a single worker thread.
    #[arg(long, global = true)]
    deterministic: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Experiment config (JSON); `IMC__a__b=value` variables override keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Built-in config used when no file is given: full, desk or smoke.
    #[arg(long, default_value = "full")]
    preset: String,
}

#[derive(Subcommand)]
enum Command {
    /// Excite the plant and write the identification dataset.
    GenData {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write feasible controller references and the test schedule for a model.
    GenRefs {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the plant model; the report is written beside the weights.
    TrainModel {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the controller against a frozen model.
    TrainController {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        refs: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print per-layer residuals; exit status 0 iff certified.
    Certify { weights: PathBuf },
    /// Run the closed loop on the tank and write a CSV log with a JSON sidecar.
    Simulate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        ctrl: PathBuf,
        #[arg(long)]
        schedule: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Measurement noise std in normalized units; the config value by default.
        #[arg(long)]
        noise: Option<f64>,
    },
    /// Tracking and steady-state errors of a log, optionally with FIT figures.
    Evaluate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        log: PathBuf,
        #[arg(long)]
        schedule: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Model weights, for the model FIT on `--data` and the controller FIT on `--refs`.
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long, requires = "model")]
        data: Option<PathBuf>,
        #[arg(long, requires_all = ["model", "refs"])]
        ctrl: Option<PathBuf>,
        #[arg(long)]
        refs: Option<PathBuf>,
    },
    /// Every stage in order, with a manifest of artifact hashes.
    Pipeline {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Output directory; the config value by default.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn exit_code(e: &ImcError) -> u8 {
    match e.root() {
        ImcError::Config(_) => 2,
        ImcError::Divergence(_) | ImcError::NanLoss { .. } => 3,
        ImcError::Certification(_) => 4,
        ImcError::Simulation(_) => 5,
        _ => 1,
    }
}

fn progress(line: &str) {
    eprintln!("{line}");
}

impl ConfigArgs {
    fn load(&self, seed: Option<u64>) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::load(path, std::env::vars())?,
            None => ExperimentConfig::preset_with_overrides(&self.preset, std::env::vars())?,
        };
        if let Some(s) = seed {
            cfg.reseed(s);
        }
        Ok(cfg)
    }
}

fn run(cli: Cli) -> Result<()> {
    let seed = cli.seed;
    match cli.command {
        Command::GenData { cfg, out } => {
            let cfg = cfg.load(seed)?;
            let splits = gen_data(&cfg, &out)?;
            progress(&format!(
                "wrote {} train, {} validation, {} test sequences to {}",
                splits.train.len(),
                splits.validation.len(),
                splits.test.len(),
                out.display()
            ));
        }
        Command::GenRefs { cfg, model, out } => {
            let cfg = cfg.load(seed)?;
            let model = load_network(&model, NetworkRole::Model)?;
            let (splits, map, schedule) = gen_refs(&cfg, &model, &out)?;
            progress(&format!(
                "wrote {} references ({} hull vertices) and a {}-segment schedule to {}",
                splits.train.len() + splits.validation.len() + splits.test.len(),
                map.hull.len(),
                schedule.segments.len(),
                out.display()
            ));
        }
        Command::TrainModel { cfg, data, out } => {
            let cfg = cfg.load(seed)?;
            let data = load_io_data(&data)?;
            let (net, report) = train_model_stage(&cfg, &data, &out, &mut progress)?;
            print!("{}", report.certificate.render());
            progress(&format!(
                "test FIT {:.2}%; report in {}",
                model_fit(&net, &data.test, cfg.fit_washout)?,
                report_path(&out).display()
            ));
        }
        Command::TrainController { cfg, model, refs, out } => {
            let cfg = cfg.load(seed)?;
            let model = load_network(&model, NetworkRole::Model)?;
            let refs = load_refs(&refs)?;
            let (ctrl, report) = train_controller_stage(&cfg, &model, &refs, &out, &mut progress)?;
            print!("{}", report.certificate.render());
            progress(&format!(
                "held-out tracking FIT {:.2}%; report in {}",
                controller_fit(&ctrl, &model, &refs.test, cfg.fit_washout)?,
                report_path(&out).display()
            ));
        }
        Command::Certify { weights: path } => {
            let (net, role) = weights::load(&path)?;
            let cert = certify(&net);
            println!("{role:?} {}", path.display());
            print!("{}", cert.render());
            require_certified(&net, &path.display().to_string())?;
        }
        Command::Simulate {
            cfg,
            model,
            ctrl,
            schedule,
            out,
            noise,
        } => {
            let cfg = cfg.load(seed)?;
            let noise = noise.unwrap_or(cfg.simulation.noise_std);
            let log = simulate(&cfg, &model, &ctrl, &schedule, noise, cfg.simulation.seed, &out)?;
            progress(&format!(
                "wrote {} rows to {} and {}",
                log.len(),
                out.display(),
                sidecar_path(&out).display()
            ));
        }
        Command::Evaluate {
            cfg,
            log,
            schedule,
            out,
            model,
            data,
            ctrl,
            refs,
        } => {
            let cfg = cfg.load(seed)?;
            let log = ClosedLoopLog::read_csv(&log, cfg.tau_s)?;
            let sched = Schedule::read_ndjson(&schedule)?;
            let normalizer = Normalizer::from_params(&cfg.tank_params()?);
            let (rmse, steady) = evaluate_log(&log, &sched, &normalizer, &cfg.simulation.steady_state)?;
            let model = model.map(|p| load_network(&p, NetworkRole::Model)).transpose()?;
            let fit_percent = match (&model, &data) {
                (Some(m), Some(d)) => Some(model_fit(m, &load_io_data(d)?.test, cfg.fit_washout)?),
                _ => None,
            };
            let controller_fit_percent = match (&model, &ctrl, &refs) {
                (Some(m), Some(c), Some(r)) => {
                    let c = load_network(c, NetworkRole::Controller)?;
                    Some(controller_fit(&c, m, &load_refs(r)?.test, cfg.fit_washout)?)
                }
                _ => None,
            };
            let report = EvalReport {
                fit_percent,
                controller_fit_percent,
                tracking_rmse_m: Some(rmse),
                steady_state: Some(steady),
                meta: serde_json::json!({
                    "tool_version": TOOL_VERSION,
                    "log_rows": log.len(),
                    "schedule": schedule.display().to_string(),
                }),
            };
            write_json(&out, &report)?;
            print!("{}", report.render_table());
        }
        Command::Pipeline { cfg, out } => {
            let mut cfg = cfg.load(seed)?;
            if let Some(out) = out {
                cfg.output_dir = out;
            }
            let outcome = pipeline(&cfg, &mut progress)?;
            let manifest = Path::new(&cfg.output_dir).join("manifest.json");
            println!(
                "manifest {} ({} artifacts)",
                manifest.display(),
                outcome.manifest.artifacts.len()
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let threads = if cli.deterministic { Some(1) } else { cli.workers };
    if let Some(n) = threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global() {
            eprintln!("error: cannot size the worker pool: {e}");
            return ExitCode::from(2);
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
