//! Command-line driver: single-shot generate/verify plus the experiment
//! harness (attack suites, ablation grids, FPR calibration, timing).
//!
//! Exit codes: 0 success, 2 configuration error, 3 check failure
//! (`verify --check` on an undetected watermark).

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use csguard::{
    ablation_csv, calibrate_fpr, derive_seed, gen_secret_matrix, generate_watermarked,
    invert_and_verify, load_latent, make_schedule, run_ablation, run_experiment, save_latent,
    save_report, trial_seed, AblationAxis, ConfigError, CsGuardParams, ExperimentConfig, GmmPrior,
    HarnessError, Mode, Payload, Prompt, Stream, TrialSeeds, WatermarkKey,
};

#[derive(Parser)]
#[command(name = "csguard", version, about = "Watermarked diffusion sandbox with a compressed-sensing verification key")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every subcommand: a config file plus field overrides.
#[derive(Args, Clone)]
struct ConfigArgs {
    /// TOML or JSON experiment config; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    l: Option<usize>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    t_steps: Option<usize>,
    #[arg(long)]
    cs_ratio: Option<f64>,
    #[arg(long)]
    proj_ratio: Option<f64>,
    #[arg(long)]
    fpr: Option<f64>,
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long)]
    seed_base: Option<u64>,
    /// benign | forge | informed_forge | ablate_* | distortion_sweep |
    /// fpr_calibration | timing
    #[arg(long)]
    mode: Option<String>,
    /// trajectory_intrinsic | random
    #[arg(long)]
    observation_mode: Option<String>,
    #[arg(long)]
    attacker_steps: Option<usize>,
    #[arg(long)]
    matrix_similarity: Option<f64>,
    #[arg(long)]
    distortion_sigma: Option<f64>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<ExperimentConfig, ConfigError> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::from_file(path)?,
            None => ExperimentConfig::default(),
        };
        macro_rules! set {
            ($($field:ident),*) => {
                $(if let Some(v) = self.$field { cfg.$field = v; })*
            };
        }
        set!(n, l, k, t_steps, cs_ratio, proj_ratio, fpr, trials, seed_base);
        if let Some(v) = self.attacker_steps {
            cfg.attacker_steps = Some(v);
        }
        if let Some(v) = self.matrix_similarity {
            cfg.matrix_similarity = Some(v);
        }
        if let Some(v) = self.distortion_sigma {
            cfg.distortion_sigma = Some(v);
        }
        if let Some(m) = &self.mode {
            cfg.mode = parse_enum("mode", m)?;
        }
        if let Some(m) = &self.observation_mode {
            cfg.observation_mode = parse_enum("observation_mode", m)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Parses a snake_case enum value through its serde representation.
fn parse_enum<T: serde::de::DeserializeOwned>(
    field: &'static str,
    value: &str,
) -> Result<T, ConfigError> {
    serde_json::from_value(serde_json::Value::String(value.to_string())).map_err(|_| {
        ConfigError::Invalid {
            field,
            message: format!("unrecognized value `{value}`"),
        }
    })
}

#[derive(Subcommand)]
enum Command {
    /// Generate one watermarked latent and write it to a file.
    Generate {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Output latent path (binary, with a JSON metadata sidecar).
        #[arg(long, default_value = "out.csgl")]
        out: PathBuf,
        /// Trial index; determines payload, sample noise, and prompt class.
        #[arg(long, default_value_t = 0)]
        trial: u64,
        /// Watermark key (decimal). Derived from seed_base when omitted.
        #[arg(long)]
        key: Option<u64>,
        /// Payload as hex (length l/4). Random per-trial when omitted.
        #[arg(long)]
        payload: Option<String>,
    },
    /// Invert a latent file and verify the watermark; prints a JSON report.
    Verify {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Latent file produced by `generate` (or any CSGL file).
        #[arg(long)]
        latent: PathBuf,
        #[arg(long, default_value_t = 0)]
        trial: u64,
        #[arg(long)]
        key: Option<u64>,
        #[arg(long)]
        payload: Option<String>,
        /// Exit with code 3 when the watermark is not detected.
        #[arg(long)]
        check: bool,
    },
    /// Run the configured experiment mode over `trials` trials.
    Attack {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Report JSON output path.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Per-trial CSV output path.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Sweep one parameter over a grid, one experiment per point.
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// cs_ratio | proj_ratio | T
        #[arg(long)]
        axis: String,
        /// Comma-separated grid values, e.g. "0.2,0.5,0.8".
        #[arg(long)]
        grid: String,
        /// Series CSV output path.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Empirical FPR plus TPR/ASR across a grid of target FPRs.
    Calibrate {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Comma-separated FPR targets, e.g. "1e-1,1e-2,1e-3".
        #[arg(long, default_value = "1e-1,1e-2,1e-4,1e-6,1e-10")]
        fpr_grid: String,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Matched-pair timing: projected vs unprojected generation+verification.
    Bench {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn parse_grid(s: &str) -> Result<Vec<f64>, ConfigError> {
    s.split(',')
        .map(|v| {
            v.trim().parse::<f64>().map_err(|_| ConfigError::Invalid {
                field: "grid",
                message: format!("not a number: `{v}`"),
            })
        })
        .collect()
}

/// One-shot bench artifacts shared by `generate` and `verify`.
type SingleShot = (
    csguard::SecretMatrix,
    GmmPrior,
    csguard::DiffusionSchedule,
    CsGuardParams,
    WatermarkKey,
    Payload,
    u64,
);

fn single_shot_setup(
    cfg: &ExperimentConfig,
    trial: u64,
    key: Option<u64>,
    payload: Option<&str>,
) -> Result<SingleShot, Box<dyn std::error::Error>> {
    let matrix = gen_secret_matrix(
        derive_seed(cfg.seed_base, Stream::ExperimentMatrix),
        cfg.n,
        cfg.cs_ratio,
    )?;
    let prior = GmmPrior::generate(
        derive_seed(cfg.seed_base, Stream::ExperimentPrior),
        cfg.k,
        cfg.n,
        cfg.component_std,
    )?;
    let sched = make_schedule(cfg.t_steps, cfg.beta_min, cfg.beta_max)?;
    let params = CsGuardParams {
        proj_ratio: cfg.proj_ratio,
        cs_ratio: cfg.cs_ratio,
        t_steps: cfg.t_steps,
        fpr: cfg.fpr,
        observation_mode: cfg.observation_mode,
    };
    let key = WatermarkKey(key.unwrap_or_else(|| derive_seed(cfg.seed_base, Stream::ExperimentKey)));
    let base = trial_seed(cfg.seed_base, trial);
    let payload = match payload {
        Some(hex) => Payload::from_hex(hex)?,
        None => Payload::random(cfg.l, base)?,
    };
    Ok((matrix, prior, sched, params, key, payload, base))
}

fn run(cli: Cli) -> Result<ExitCode, Box<dyn std::error::Error>> {
    match cli.command {
        Command::Generate {
            cfg,
            out,
            trial,
            key,
            payload,
        } => {
            let cfg = cfg.resolve()?;
            let (matrix, prior, sched, params, key, payload, base) =
                single_shot_setup(&cfg, trial, key, payload.as_deref())?;
            let prompt = Prompt::conditioned(
                (trial as usize) % cfg.k,
                format!("class {}", (trial as usize) % cfg.k),
            );
            let rec = generate_watermarked(
                key,
                &payload,
                &prompt,
                &matrix,
                &params,
                &prior,
                &sched,
                TrialSeeds {
                    sample: base,
                    observation: base,
                },
            )?;
            save_latent(&out, &rec.z0)?;
            println!(
                "{}",
                serde_json::json!({
                    "out": out,
                    "key": key.0,
                    "payload_hex": payload.to_hex(),
                    "trial": trial,
                    "trajectory_deviation": rec.trajectory_deviation,
                })
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Verify {
            cfg,
            latent,
            trial,
            key,
            payload,
            check,
        } => {
            let cfg = cfg.resolve()?;
            let (matrix, prior, sched, params, key, payload, _) =
                single_shot_setup(&cfg, trial, key, payload.as_deref())?;
            let z0 = load_latent(&latent)?;
            let (report, _) =
                invert_and_verify(&z0, &matrix, key, &payload, &params, &prior, &sched)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
            if check && !report.detected {
                return Ok(ExitCode::from(3));
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Attack { cfg, out, csv } => {
            let cfg = cfg.resolve()?;
            let report = run_experiment(&cfg)?;
            if let Some(path) = out {
                save_report(&path, &report)?;
            }
            if let Some(path) = csv {
                std::fs::write(path, report.to_csv())?;
            }
            println!("{}", serde_json::to_string_pretty(&report.aggregate)?);
            Ok(ExitCode::SUCCESS)
        }
        Command::Ablate {
            cfg,
            axis,
            grid,
            csv,
        } => {
            let cfg = cfg.resolve()?;
            let axis_parsed: AblationAxis = axis.parse()?;
            let grid = parse_grid(&grid)?;
            let reports = run_ablation(&cfg, axis_parsed, &grid)?;
            let series = ablation_csv(&axis, &grid, &reports);
            if let Some(path) = csv {
                std::fs::write(path, &series)?;
            }
            print!("{series}");
            Ok(ExitCode::SUCCESS)
        }
        Command::Calibrate {
            cfg,
            fpr_grid,
            csv,
        } => {
            let mut cfg = cfg.resolve()?;
            cfg.mode = Mode::FprCalibration;
            let grid = parse_grid(&fpr_grid)?;
            let cal = calibrate_fpr(&cfg, &grid)?;
            let series = cal.to_csv();
            if let Some(path) = csv {
                std::fs::write(path, &series)?;
            }
            print!("{series}");
            Ok(ExitCode::SUCCESS)
        }
        Command::Bench { cfg, out } => {
            let mut cfg = cfg.resolve()?;
            cfg.mode = Mode::Timing;
            let report = run_experiment(&cfg)?;
            if let Some(path) = out {
                save_report(&path, &report)?;
            }
            println!(
                "{}",
                serde_json::json!({
                    "time_ratio": report.timing.time_ratio,
                    "pairs": cfg.trials.max(10),
                    "total_wall_time_s": report.timing.total_wall_time_s,
                })
            );
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn is_config_error(err: &(dyn std::error::Error + 'static)) -> bool {
    if err.is::<ConfigError>() {
        return true;
    }
    if let Some(h) = err.downcast_ref::<HarnessError>() {
        return matches!(h, HarnessError::Config(_) | HarnessError::UnknownAxis(_));
    }
    false
}

fn main() -> ExitCode {
    // Worker count for trial parallelism; default is one thread per core.
    if let Ok(workers) = std::env::var("CSGUARD_WORKERS") {
        match workers.parse::<usize>() {
            Ok(w) if w >= 1 => {
                let _ = rayon::ThreadPoolBuilder::new().num_threads(w).build_global();
            }
            _ => {
                eprintln!("error: CSGUARD_WORKERS must be a positive integer, got `{workers}`");
                return ExitCode::from(2);
            }
        }
    }
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err}");
            if is_config_error(err.as_ref()) {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}
