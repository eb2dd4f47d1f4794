//! Trial execution: benign, forgery, informed-forgery, distortion, FPR
//! calibration, ablation grids, and matched-pair timing.

use std::time::Instant;

use nalgebra::DVector;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use thiserror::Error;

use crate::attack::{distort_latent, informed_forge, reprompt_forge, AttackConfig};
use crate::diffusion::{make_schedule, DiffusionSchedule, GmmPrior, Prompt};
use crate::pipeline::{
    generate_plain, generate_watermarked, invert_and_verify, invert_plain, CsGuardParams,
    ObservationMode, PipelineError, TrialSeeds,
};
use crate::seeding::{derive_seed, rng_from_seed, trial_seed, Stream};
use crate::sensing::{gen_secret_matrix, SecretMatrix, SensingError};
use crate::watermark::{detection_threshold, verify_watermark, Payload, WatermarkKey};
use crate::Latent;

use super::config::{ConfigError, ExperimentConfig, Mode};
use super::report::{
    Aggregate, ExperimentReport, TimingSection, TrialRow, REPORT_SCHEMA_VERSION,
};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Sensing(#[from] SensingError),
    #[error("unknown ablation axis: {0}")]
    UnknownAxis(String),
}

/// How far the attacker's mixture means sit from the victim's, in units of
/// added Gaussian std per coordinate. Zero would be a model-identical
/// attacker; this default models a distinct model trained on the same data.
pub const ATTACKER_MODEL_SHIFT: f64 = 0.1;

/// Trial count used for the TPR/ASR curves inside `calibrate_fpr`.
const CALIBRATION_RATE_TRIALS: u64 = 32;

/// Shared, immutable per-experiment artifacts.
struct Bench {
    matrix: SecretMatrix,
    prior: GmmPrior,
    attacker_prior: GmmPrior,
    sched: DiffusionSchedule,
    key: WatermarkKey,
    params: CsGuardParams,
}

fn setup(cfg: &ExperimentConfig) -> Result<Bench, HarnessError> {
    cfg.validate()?;
    // Gaussian matrices are full-rank almost surely; on a degenerate draw
    // retry with seed+1, deterministically.
    let mut mseed = derive_seed(cfg.seed_base, Stream::ExperimentMatrix);
    let matrix = loop {
        match gen_secret_matrix(mseed, cfg.n, cfg.cs_ratio) {
            Ok(a) => break a,
            Err(SensingError::FactorizationFailure) => mseed = mseed.wrapping_add(1),
            Err(e) => return Err(e.into()),
        }
    };
    let prior = GmmPrior::generate(
        derive_seed(cfg.seed_base, Stream::ExperimentPrior),
        cfg.k,
        cfg.n,
        cfg.component_std,
    )
    .map_err(PipelineError::from)?;
    let attacker_prior = attacker_prior(&prior, cfg.seed_base).map_err(PipelineError::from)?;
    let sched = make_schedule(cfg.t_steps, cfg.beta_min, cfg.beta_max)
        .map_err(PipelineError::from)?;
    let key = WatermarkKey(derive_seed(cfg.seed_base, Stream::ExperimentKey));
    let mut observation_mode = cfg.observation_mode;
    if cfg.mode == Mode::AblateObservation {
        observation_mode = ObservationMode::Random;
    }
    let params = CsGuardParams {
        proj_ratio: cfg.proj_ratio,
        cs_ratio: cfg.cs_ratio,
        t_steps: cfg.t_steps,
        fpr: cfg.fpr,
        observation_mode,
    };
    Ok(Bench {
        matrix,
        prior,
        attacker_prior,
        sched,
        key,
        params,
    })
}

/// The attacker's model: the victim's mixture with every mean coordinate
/// shifted by [`ATTACKER_MODEL_SHIFT`]-scaled Gaussian noise. Same K, same
/// component std.
pub fn attacker_prior(
    victim: &GmmPrior,
    seed_base: u64,
) -> Result<GmmPrior, crate::diffusion::DiffusionError> {
    let mut rng = rng_from_seed(derive_seed(seed_base, Stream::AttackerPrior));
    let means = victim
        .means
        .iter()
        .map(|mu| {
            DVector::from_iterator(
                mu.len(),
                mu.iter()
                    .map(|v| v + ATTACKER_MODEL_SHIFT * rng.sample::<f64, _>(StandardNormal)),
            )
        })
        .collect();
    GmmPrior::from_means(means, victim.component_std, victim.seed)
}

fn trial_prompt(trial_id: u64, k: usize) -> Prompt {
    Prompt::conditioned((trial_id as usize) % k, format!("class {}", (trial_id as usize) % k))
}

fn adversarial_prompt(trial_id: u64, k: usize) -> Prompt {
    // A different class than the benign prompt whenever one exists.
    let c = ((trial_id as usize) + 1) % k;
    Prompt::conditioned(c, format!("adversarial class {c}"))
}

fn run_one_trial(
    cfg: &ExperimentConfig,
    bench: &Bench,
    trial_id: u64,
) -> Result<TrialRow, HarnessError> {
    let base = trial_seed(cfg.seed_base, trial_id);
    let payload = Payload::random(cfg.l, base).map_err(PipelineError::from)?;
    let seeds = TrialSeeds {
        sample: base,
        observation: base,
    };
    let prompt = trial_prompt(trial_id, cfg.k);

    let row = match cfg.mode {
        Mode::Benign
        | Mode::AblateObservation
        | Mode::AblateCs
        | Mode::AblateProj
        | Mode::AblateSteps
        | Mode::Timing => {
            let rec = generate_watermarked(
                bench.key,
                &payload,
                &prompt,
                &bench.matrix,
                &bench.params,
                &bench.prior,
                &bench.sched,
                seeds,
            )?;
            let (report, _) = invert_and_verify(
                &rec.z0,
                &bench.matrix,
                bench.key,
                &payload,
                &bench.params,
                &bench.prior,
                &bench.sched,
            )?;
            TrialRow {
                trial_id,
                bit_accuracy: report.bit_accuracy,
                detected: report.detected,
                deviation: rec.trajectory_deviation,
            }
        }
        Mode::DistortionSweep => {
            let sigma = cfg.distortion_sigma.unwrap_or(0.0);
            let rec = generate_watermarked(
                bench.key,
                &payload,
                &prompt,
                &bench.matrix,
                &bench.params,
                &bench.prior,
                &bench.sched,
                seeds,
            )?;
            let distorted = distort_latent(&rec.z0, sigma, base);
            let (report, _) = invert_and_verify(
                &distorted,
                &bench.matrix,
                bench.key,
                &payload,
                &bench.params,
                &bench.prior,
                &bench.sched,
            )?;
            TrialRow {
                trial_id,
                bit_accuracy: report.bit_accuracy,
                detected: report.detected,
                deviation: rec.trajectory_deviation,
            }
        }
        Mode::Forge => {
            let rec = generate_watermarked(
                bench.key,
                &payload,
                &prompt,
                &bench.matrix,
                &bench.params,
                &bench.prior,
                &bench.sched,
                seeds,
            )?;
            let attack_cfg = AttackConfig {
                adversarial_prompt: adversarial_prompt(trial_id, cfg.k),
                attacker_steps: cfg.attacker_steps(),
                matrix_similarity: None,
                distortion_sigma: None,
            };
            let forged =
                reprompt_forge(&rec.z0, &bench.attacker_prior, &attack_cfg, &bench.sched)?;
            let (report, _) = invert_and_verify(
                &forged,
                &bench.matrix,
                bench.key,
                &payload,
                &bench.params,
                &bench.prior,
                &bench.sched,
            )?;
            TrialRow {
                trial_id,
                bit_accuracy: report.bit_accuracy,
                detected: report.detected,
                deviation: rec.trajectory_deviation,
            }
        }
        Mode::InformedForge => {
            let similarity = cfg.matrix_similarity.expect("validated");
            let rec = generate_watermarked(
                bench.key,
                &payload,
                &prompt,
                &bench.matrix,
                &bench.params,
                &bench.prior,
                &bench.sched,
                seeds,
            )?;
            let attack_cfg = AttackConfig {
                adversarial_prompt: adversarial_prompt(trial_id, cfg.k),
                attacker_steps: cfg.attacker_steps(),
                matrix_similarity: Some(similarity),
                distortion_sigma: None,
            };
            let forged = informed_forge(
                &rec.z0,
                &bench.matrix,
                similarity,
                base,
                &attack_cfg,
                &bench.params,
                &bench.attacker_prior,
                &bench.sched,
            )?;
            let (report, _) = invert_and_verify(
                &forged,
                &bench.matrix,
                bench.key,
                &payload,
                &bench.params,
                &bench.prior,
                &bench.sched,
            )?;
            TrialRow {
                trial_id,
                bit_accuracy: report.bit_accuracy,
                detected: report.detected,
                deviation: rec.trajectory_deviation,
            }
        }
        Mode::FprCalibration => {
            // Unwatermarked null latent, verified directly.
            let z = null_latent(cfg.n, base);
            let report =
                verify_watermark(&z, bench.key, &payload, cfg.fpr).map_err(PipelineError::from)?;
            TrialRow {
                trial_id,
                bit_accuracy: report.bit_accuracy,
                detected: report.detected,
                deviation: 0.0,
            }
        }
    };
    Ok(row)
}

fn null_latent(n: usize, seed: u64) -> Latent {
    let mut rng = rng_from_seed(derive_seed(seed, Stream::NullLatent));
    DVector::from_iterator(n, (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)))
}

fn rate_label(mode: Mode) -> &'static str {
    match mode {
        Mode::Forge | Mode::InformedForge => "ASR",
        Mode::FprCalibration => "FPR",
        _ => "TPR",
    }
}

/// Runs `cfg.trials` independent trials with per-trial seeds derived from
/// `seed_base + trial_id`. Trials run in parallel; reported values are
/// independent of scheduling.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentReport, HarnessError> {
    let bench = setup(cfg)?;
    let started = Instant::now();
    let results: Result<Vec<(TrialRow, f64)>, HarnessError> = (0..cfg.trials as u64)
        .into_par_iter()
        .map(|trial_id| {
            let t0 = Instant::now();
            let row = run_one_trial(cfg, &bench, trial_id)?;
            Ok((row, t0.elapsed().as_secs_f64()))
        })
        .collect();
    let results = results?;
    let (per_trial, wall_time_s): (Vec<_>, Vec<_>) = results.into_iter().unzip();

    let time_ratio = if cfg.mode == Mode::Timing {
        Some(matched_pair_time_ratio(cfg, &bench)?)
    } else {
        None
    };

    let aggregate = Aggregate::from_rows(&per_trial, rate_label(cfg.mode));
    Ok(ExperimentReport {
        version: REPORT_SCHEMA_VERSION,
        seed_base: cfg.seed_base,
        config_echo: cfg.clone(),
        per_trial,
        aggregate,
        timing: TimingSection {
            wall_time_s,
            total_wall_time_s: started.elapsed().as_secs_f64(),
            time_ratio,
        },
    })
}

/// Median projected wall time over median unprojected wall time, measured on
/// identical seeds. At least 10 matched pairs.
fn matched_pair_time_ratio(
    cfg: &ExperimentConfig,
    bench: &Bench,
) -> Result<f64, HarnessError> {
    let pairs = cfg.trials.max(10) as u64;
    let mut with_proj = Vec::with_capacity(pairs as usize);
    let mut without_proj = Vec::with_capacity(pairs as usize);
    for trial_id in 0..pairs {
        let base = trial_seed(cfg.seed_base, trial_id);
        let payload = Payload::random(cfg.l, base).map_err(PipelineError::from)?;
        let prompt = trial_prompt(trial_id, cfg.k);
        let seeds = TrialSeeds {
            sample: base,
            observation: base,
        };

        let t0 = Instant::now();
        let rec = generate_watermarked(
            bench.key,
            &payload,
            &prompt,
            &bench.matrix,
            &bench.params,
            &bench.prior,
            &bench.sched,
            seeds,
        )?;
        let _ = invert_and_verify(
            &rec.z0,
            &bench.matrix,
            bench.key,
            &payload,
            &bench.params,
            &bench.prior,
            &bench.sched,
        )?;
        with_proj.push(t0.elapsed().as_secs_f64());

        let t1 = Instant::now();
        let (z0, _) = generate_plain(bench.key, &payload, &prompt, &bench.prior, &bench.sched, base)?;
        let z_t = invert_plain(&z0, &Prompt::unconditional(), &bench.prior, &bench.sched)?;
        let _ = verify_watermark(&z_t, bench.key, &payload, cfg.fpr).map_err(PipelineError::from)?;
        without_proj.push(t1.elapsed().as_secs_f64());
    }
    Ok(median(&mut with_proj) / median(&mut without_proj))
}

fn median(xs: &mut [f64]) -> f64 {
    xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblationAxis {
    CsRatio,
    ProjRatio,
    Steps,
}

impl std::str::FromStr for AblationAxis {
    type Err = HarnessError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "cs_ratio" => Ok(Self::CsRatio),
            "proj_ratio" => Ok(Self::ProjRatio),
            "T" | "t_steps" => Ok(Self::Steps),
            other => Err(HarnessError::UnknownAxis(other.to_string())),
        }
    }
}

/// One experiment per grid point, shared seed_base.
pub fn run_ablation(
    cfg: &ExperimentConfig,
    axis: AblationAxis,
    grid: &[f64],
) -> Result<Vec<ExperimentReport>, HarnessError> {
    let mut reports = Vec::with_capacity(grid.len());
    for &value in grid {
        let mut point = cfg.clone();
        match axis {
            AblationAxis::CsRatio => point.cs_ratio = value,
            AblationAxis::ProjRatio => point.proj_ratio = value,
            AblationAxis::Steps => {
                point.t_steps = value as usize;
                point.attacker_steps = Some(value as usize);
            }
        }
        reports.push(run_experiment(&point)?);
    }
    Ok(reports)
}

/// Single CSV series for an ablation grid.
pub fn ablation_csv(axis: &str, grid: &[f64], reports: &[ExperimentReport]) -> String {
    let mut out = format!("{axis},mean_bit_accuracy,detection_rate,rate_label,ci_low,ci_high\n");
    for (value, rep) in grid.iter().zip(reports) {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            value,
            rep.aggregate.mean_bit_accuracy,
            rep.aggregate.detection_rate,
            rep.aggregate.rate_label,
            rep.aggregate.rate_ci_low,
            rep.aggregate.rate_ci_high
        ));
    }
    out
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct FprPoint {
    pub fpr: f64,
    pub threshold: usize,
    pub empirical_fpr: f64,
    pub tpr: f64,
    pub asr: f64,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct FprCalibration {
    pub points: Vec<FprPoint>,
    pub null_trials: usize,
    pub rate_trials: usize,
}

impl FprCalibration {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("fpr,threshold,empirical_fpr,tpr,asr\n");
        for p in &self.points {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                p.fpr, p.threshold, p.empirical_fpr, p.tpr, p.asr
            ));
        }
        out
    }
}

/// Empirical FPR on `cfg.trials` unwatermarked latents per grid point, plus
/// benign TPR and forged ASR re-thresholded at each target FPR.
///
/// The expensive pipeline runs (benign and forged matched-bit counts) execute
/// once; only the detection threshold moves across the grid.
pub fn calibrate_fpr(
    cfg: &ExperimentConfig,
    fpr_grid: &[f64],
) -> Result<FprCalibration, HarnessError> {
    for &f in fpr_grid {
        if !(f > 0.0 && f <= 1.0) {
            return Err(ConfigError::Invalid {
                field: "fpr",
                message: format!("grid value must be in (0,1], got {f}"),
            }
            .into());
        }
    }
    let bench = setup(cfg)?;

    // Null matched-bit counts (direct verification of random latents).
    let null_matched: Result<Vec<usize>, HarnessError> = (0..cfg.trials as u64)
        .into_par_iter()
        .map(|trial_id| {
            let base = trial_seed(cfg.seed_base, trial_id);
            let payload = Payload::random(cfg.l, base).map_err(PipelineError::from)?;
            let z = null_latent(cfg.n, base);
            let report =
                verify_watermark(&z, bench.key, &payload, cfg.fpr).map_err(PipelineError::from)?;
            Ok(report.matched_bits)
        })
        .collect();
    let null_matched = null_matched?;

    // Benign and forged matched-bit counts through the full pipeline.
    let pipeline_matched = |mode: Mode| -> Result<Vec<usize>, HarnessError> {
        let mut sub = cfg.clone();
        sub.mode = mode;
        sub.trials = CALIBRATION_RATE_TRIALS as usize;
        (0..CALIBRATION_RATE_TRIALS)
            .into_par_iter()
            .map(|trial_id| {
                let row = run_one_trial(&sub, &bench, trial_id)?;
                Ok((row.bit_accuracy * cfg.l as f64).round() as usize)
            })
            .collect()
    };
    let benign_matched = pipeline_matched(Mode::Benign)?;
    let forged_matched = pipeline_matched(Mode::Forge)?;

    let frac_at = |counts: &[usize], thr: usize| {
        counts.iter().filter(|&&c| c >= thr).count() as f64 / counts.len() as f64
    };

    let points = fpr_grid
        .iter()
        .map(|&fpr| {
            let threshold = detection_threshold(cfg.l, fpr);
            FprPoint {
                fpr,
                threshold,
                empirical_fpr: frac_at(&null_matched, threshold),
                tpr: frac_at(&benign_matched, threshold),
                asr: frac_at(&forged_matched, threshold),
            }
        })
        .collect();

    Ok(FprCalibration {
        points,
        null_trials: cfg.trials,
        rate_trials: CALIBRATION_RATE_TRIALS as usize,
    })
}
