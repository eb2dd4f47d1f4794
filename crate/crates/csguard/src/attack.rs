//! The adversary: reprompt forgery without the secret matrix, the informed
//! attack with an estimated matrix, and a latent-noise distortion proxy.

use nalgebra::DVector;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::diffusion::{make_schedule, DiffusionSchedule, GmmPrior, Prompt};
use crate::pipeline::{
    generate_constrained_from, generate_plain_from, invert_constrained, invert_plain,
    CsGuardParams, PipelineError,
};
use crate::seeding::{derive_seed, rng_from_seed, Stream};
use crate::sensing::{perturb_matrix, SecretMatrix};
use crate::watermark::VerifyReport;
use crate::Latent;

#[derive(Debug, Clone)]
pub struct AttackConfig {
    pub adversarial_prompt: Prompt,
    pub attacker_steps: usize,
    pub matrix_similarity: Option<f64>,
    pub distortion_sigma: Option<f64>,
}

impl AttackConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.attacker_steps < 1 {
            return Err(PipelineError::InvalidParams(
                "attacker_steps must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// One forgery trial from the victim's point of view. Success is the
/// victim's detector wrongly attributing the forged image.
#[derive(Debug, Clone)]
pub struct AttackOutcome {
    pub forged_z0: Latent,
    pub victim_report: VerifyReport,
    pub success: bool,
}

impl AttackOutcome {
    pub fn new(forged_z0: Latent, victim_report: VerifyReport) -> Self {
        let success = victim_report.detected;
        Self {
            forged_z0,
            victim_report,
            success,
        }
    }
}

fn attacker_schedule(
    cfg: &AttackConfig,
    victim_sched: &DiffusionSchedule,
) -> Result<DiffusionSchedule, PipelineError> {
    cfg.validate()?;
    Ok(make_schedule(
        cfg.attacker_steps,
        victim_sched.beta_min,
        victim_sched.beta_max,
    )?)
}

/// Reprompt forgery: plain inversion of the benign image to its initial
/// latent, then plain regeneration under the adversarial prompt.
///
/// The secret matrix does not appear in this signature; the attacker cannot
/// touch it.
pub fn reprompt_forge(
    benign_z0: &Latent,
    attacker_prior: &GmmPrior,
    cfg: &AttackConfig,
    victim_sched: &DiffusionSchedule,
) -> Result<Latent, PipelineError> {
    let sched = attacker_schedule(cfg, victim_sched)?;
    let z_t = invert_plain(benign_z0, &Prompt::unconditional(), attacker_prior, &sched)?;
    generate_plain_from(z_t, &cfg.adversarial_prompt, attacker_prior, &sched)
}

/// Full-knowledge forgery with an estimated matrix.
///
/// Builds `Ã = perturb_matrix(A, similarity)` and runs the victim's own
/// constrained inversion + constrained regeneration with `Ã` in place of `A`.
/// With `similarity = 1` and the victim's denoiser this is exactly the
/// victim's constrained round trip interleaved with a regeneration.
#[allow(clippy::too_many_arguments)]
pub fn informed_forge(
    benign_z0: &Latent,
    a_true: &SecretMatrix,
    similarity: f64,
    seed: u64,
    cfg: &AttackConfig,
    params: &CsGuardParams,
    prior: &GmmPrior,
    victim_sched: &DiffusionSchedule,
) -> Result<Latent, PipelineError> {
    let sched = attacker_schedule(cfg, victim_sched)?;
    let a_tilde = perturb_matrix(a_true, similarity, seed)?;
    let t_proj = (params.proj_ratio * cfg.attacker_steps as f64).floor() as usize;
    let z_t = invert_constrained(benign_z0, &a_tilde, t_proj, prior, &sched)?;
    generate_constrained_from(
        z_t,
        &cfg.adversarial_prompt,
        &a_tilde,
        t_proj,
        derive_seed(seed, Stream::RandomObservation),
        prior,
        &sched,
    )
}

/// Additive Gaussian latent noise, the desk-scale distortion proxy.
pub fn distort_latent(z0: &Latent, sigma: f64, seed: u64) -> Latent {
    assert!(sigma >= 0.0, "sigma must be >= 0");
    if sigma == 0.0 {
        return z0.clone();
    }
    let mut rng = rng_from_seed(derive_seed(seed, Stream::Distortion));
    DVector::from_iterator(
        z0.len(),
        z0.iter().map(|v| v + sigma * rng.sample::<f64, _>(StandardNormal)),
    )
}
