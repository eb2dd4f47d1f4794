//! CSGuard: compressed-sensing-constrained diffusion watermarking on a
//! synthetic, analytically invertible testbed.
//!
//! A secret random sensing matrix binds the generation-inversion symmetry of
//! a deterministic DDIM sampler: intermediate clean estimates are projected
//! onto the affine set `{z : A·z = y}` during both generation and
//! verification, so only holders of `A` can invert a watermarked latent back
//! to its initial noise. The diffusion model is a closed-form
//! Gaussian-mixture posterior-mean denoiser, which makes every symmetry and
//! security claim testable at desk scale.

pub mod attack;
pub mod diffusion;
pub mod harness;
pub mod pipeline;
pub mod seeding;
pub mod sensing;
pub mod vecio;
pub mod watermark;

pub use attack::{distort_latent, informed_forge, reprompt_forge, AttackConfig, AttackOutcome};
pub use diffusion::{
    ddim_denoise_step, ddim_invert_step, estimate_clean, gmm_denoise, make_schedule, sample_data,
    DenoiserOutput, DiffusionError, DiffusionSchedule, GmmPrior, Prompt,
};
pub use harness::{
    ablation_csv, attacker_prior, calibrate_fpr, load_report, run_ablation, run_experiment,
    save_report, AblationAxis, Aggregate, ConfigError, ExperimentConfig, ExperimentReport,
    FprCalibration, FprPoint, HarnessError, Mode, ReportError, TimingSection, TrialRow,
    ATTACKER_MODEL_SHIFT, REPORT_SCHEMA_VERSION,
};
pub use pipeline::{
    generate_plain, generate_watermarked, invert_and_verify, invert_plain, CsGuardParams,
    GenerationRecord, ObservationMode, PipelineError, TrialSeeds,
};
pub use seeding::{derive_seed, rng_from_seed, splitmix64, trial_seed, Stream};
pub use sensing::{
    check_jl, gen_secret_matrix, measure, perturb_matrix, project_consistency, split_components,
    JlReport, Observation, ObservationSource, SecretMatrix, SensingError,
};
pub use vecio::{
    load_latent, load_prior, load_secret_matrix, save_latent, save_prior, save_secret_matrix,
    VecIoError,
};
pub use watermark::{
    detection_threshold, embed_watermark, extract_bits, verify_watermark, Payload, VerifyReport,
    WatermarkError, WatermarkKey,
};

/// Flat real vector of dimension N; image space is identified with latent
/// space (identity codec).
pub type Latent = nalgebra::DVector<f64>;
