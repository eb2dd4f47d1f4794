//! Deterministic DDIM machinery over a synthetic Gaussian-mixture prior.
//!
//! The denoiser has a closed form: under the forward model
//! `z_t = sqrt(ab_t)·x + sqrt(1-ab_t)·eps` with `x` drawn from a
//! prompt-conditioned Gaussian mixture, the posterior mean `E[x | z_t]` is a
//! softmax-weighted combination of per-component Gaussian posterior means.
//! This makes generation-inversion symmetry hold to numerical precision at
//! desk scale, with no neural network in the loop.

use nalgebra::DVector;
use rand::Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::seeding::{derive_seed, rng_from_seed, Stream};
use crate::Latent;

#[derive(Debug, Error)]
pub enum DiffusionError {
    #[error("invalid schedule parameters: {0}")]
    InvalidSchedule(String),
    #[error("timestep {t} out of range [{lo}, {hi}]")]
    StepOutOfRange { t: usize, lo: usize, hi: usize },
    #[error("prompt class {class_id} out of range for {k} components")]
    InvalidPrompt { class_id: usize, k: usize },
    #[error("invalid prior parameters: {0}")]
    InvalidPrior(String),
}

/// Cumulative signal coefficients for a linear beta schedule.
///
/// `alpha_bar[0] = 1` by convention, so the final denoise step emits the
/// clean estimate exactly and `estimate_clean` is total on `[1, T]`.
#[derive(Debug, Clone)]
pub struct DiffusionSchedule {
    pub t_steps: usize,
    pub alpha_bar: Vec<f64>,
    pub beta_min: f64,
    pub beta_max: f64,
}

/// Linear beta schedule over `s = 1..T`; `alpha_bar[t] = prod_{s<=t}(1-beta_s)`.
pub fn make_schedule(
    t_steps: usize,
    beta_min: f64,
    beta_max: f64,
) -> Result<DiffusionSchedule, DiffusionError> {
    if t_steps < 1 {
        return Err(DiffusionError::InvalidSchedule("T must be >= 1".into()));
    }
    if !(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0) {
        return Err(DiffusionError::InvalidSchedule(format!(
            "need 0 < beta_min <= beta_max < 1, got [{beta_min}, {beta_max}]"
        )));
    }
    let mut alpha_bar = Vec::with_capacity(t_steps + 1);
    alpha_bar.push(1.0);
    let mut acc = 1.0;
    for s in 1..=t_steps {
        let beta = if t_steps == 1 {
            beta_min
        } else {
            beta_min + (beta_max - beta_min) * (s - 1) as f64 / (t_steps - 1) as f64
        };
        acc *= 1.0 - beta;
        alpha_bar.push(acc);
    }
    Ok(DiffusionSchedule {
        t_steps,
        alpha_bar,
        beta_min,
        beta_max,
    })
}

/// Conditioning: an optional mixture component subset. `class_id = None` is
/// the unconditional ("null") prompt spanning the full mixture.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Prompt {
    pub class_id: Option<usize>,
    pub description: String,
}

impl Prompt {
    pub fn conditioned(class_id: usize, description: impl Into<String>) -> Self {
        Self {
            class_id: Some(class_id),
            description: description.into(),
        }
    }

    pub fn unconditional() -> Self {
        Self {
            class_id: None,
            description: "unconditional".into(),
        }
    }

    fn component_range(&self, k: usize) -> Result<std::ops::Range<usize>, DiffusionError> {
        match self.class_id {
            None => Ok(0..k),
            Some(c) if c < k => Ok(c..c + 1),
            Some(c) => Err(DiffusionError::InvalidPrompt { class_id: c, k }),
        }
    }
}

/// Synthetic data prior: K isotropic Gaussian components with means drawn
/// uniform in [-2, 2]^N.
#[derive(Debug, Clone)]
pub struct GmmPrior {
    pub means: Vec<Latent>,
    pub component_std: f64,
    pub seed: u64,
}

impl GmmPrior {
    /// Deterministic in `seed`; regeneration is bit-identical.
    pub fn generate(seed: u64, k: usize, n: usize, component_std: f64) -> Result<Self, DiffusionError> {
        if k < 1 || n < 1 {
            return Err(DiffusionError::InvalidPrior(format!(
                "need K >= 1 and N >= 1, got K={k} N={n}"
            )));
        }
        if component_std <= 0.0 {
            return Err(DiffusionError::InvalidPrior(format!(
                "component_std must be > 0, got {component_std}"
            )));
        }
        let mut rng = rng_from_seed(derive_seed(seed, Stream::PriorMeans));
        let means = (0..k)
            .map(|_| DVector::from_iterator(n, (0..n).map(|_| rng.random_range(-2.0..2.0))))
            .collect();
        Ok(Self {
            means,
            component_std,
            seed,
        })
    }

    pub fn from_means(means: Vec<Latent>, component_std: f64, seed: u64) -> Result<Self, DiffusionError> {
        if means.is_empty() {
            return Err(DiffusionError::InvalidPrior("need at least one component".into()));
        }
        if component_std <= 0.0 {
            return Err(DiffusionError::InvalidPrior(format!(
                "component_std must be > 0, got {component_std}"
            )));
        }
        Ok(Self {
            means,
            component_std,
            seed,
        })
    }

    pub fn k(&self) -> usize {
        self.means.len()
    }

    pub fn dim(&self) -> usize {
        self.means[0].len()
    }
}

/// A noise-prediction / clean-estimate pair satisfying
/// `z_t = sqrt(ab_t)·z0_hat + sqrt(1-ab_t)·eps_hat`.
#[derive(Debug, Clone)]
pub struct DenoiserOutput {
    pub eps_hat: Latent,
    pub z0_hat: Latent,
}

fn check_step(t: usize, lo: usize, hi: usize) -> Result<(), DiffusionError> {
    if t < lo || t > hi {
        return Err(DiffusionError::StepOutOfRange { t, lo, hi });
    }
    Ok(())
}

/// `z_{0|t} = (z_t - sqrt(1-ab_t)·eps_hat) / sqrt(ab_t)`.
pub fn estimate_clean(
    z_t: &Latent,
    eps_hat: &Latent,
    t: usize,
    sched: &DiffusionSchedule,
) -> Result<Latent, DiffusionError> {
    check_step(t, 1, sched.t_steps)?;
    let ab = sched.alpha_bar[t];
    Ok((z_t - eps_hat * (1.0 - ab).sqrt()) / ab.sqrt())
}

/// One DDIM denoise step: `z_{t-1} = sqrt(ab_{t-1})·z0_hat + sqrt(1-ab_{t-1})·eps_hat`.
pub fn ddim_denoise_step(
    z0_hat: &Latent,
    eps_hat: &Latent,
    t: usize,
    sched: &DiffusionSchedule,
) -> Result<Latent, DiffusionError> {
    check_step(t, 1, sched.t_steps)?;
    let ab = sched.alpha_bar[t - 1];
    Ok(z0_hat * ab.sqrt() + eps_hat * (1.0 - ab).sqrt())
}

/// One DDIM inversion step: `z_{t+1} = sqrt(ab_{t+1})·z0_hat + sqrt(1-ab_{t+1})·eps_hat`.
pub fn ddim_invert_step(
    z0_hat: &Latent,
    eps_hat: &Latent,
    t: usize,
    sched: &DiffusionSchedule,
) -> Result<Latent, DiffusionError> {
    if sched.t_steps == 0 || t > sched.t_steps - 1 {
        return Err(DiffusionError::StepOutOfRange {
            t,
            lo: 0,
            hi: sched.t_steps.saturating_sub(1),
        });
    }
    let ab = sched.alpha_bar[t + 1];
    Ok(z0_hat * ab.sqrt() + eps_hat * (1.0 - ab).sqrt())
}

/// Closed-form posterior-mean denoiser.
///
/// With `a = sqrt(ab_t)`, `v = 1 - ab_t`, and component std `s`, the marginal
/// of `z_t` under component `k` is `N(a·mu_k, (ab_t·s^2 + v)·I)`. Component
/// weights are the softmax of the marginal log densities over the prompt's
/// subset; the per-component posterior mean is
/// `mu_k + (a·s^2 / (ab_t·s^2 + v)) · (z_t - a·mu_k)`.
pub fn gmm_denoise(
    prior: &GmmPrior,
    z_t: &Latent,
    t: usize,
    prompt: &Prompt,
    sched: &DiffusionSchedule,
) -> Result<DenoiserOutput, DiffusionError> {
    check_step(t, 1, sched.t_steps)?;
    let range = prompt.component_range(prior.k())?;
    let ab = sched.alpha_bar[t];
    let a = ab.sqrt();
    let v = 1.0 - ab;
    let s2 = prior.component_std * prior.component_std;
    let marg_var = ab * s2 + v;

    // Log weights: the shared covariance makes normalization constants cancel.
    let mut log_w: Vec<f64> = Vec::with_capacity(range.len());
    for k in range.clone() {
        let d = z_t - &prior.means[k] * a;
        log_w.push(-d.norm_squared() / (2.0 * marg_var));
    }
    let max_lw = log_w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut weights: Vec<f64> = log_w.iter().map(|lw| (lw - max_lw).exp()).collect();
    let wsum: f64 = weights.iter().sum();
    for w in &mut weights {
        *w /= wsum;
    }

    let gain = a * s2 / marg_var;
    let mut z0_hat = DVector::zeros(z_t.len());
    for (w, k) in weights.iter().zip(range) {
        let mu = &prior.means[k];
        let post_mean = mu + (z_t - mu * a) * gain;
        z0_hat += post_mean * *w;
    }
    let eps_hat = if v > 0.0 {
        (z_t - &z0_hat * a) / v.sqrt()
    } else {
        DVector::zeros(z_t.len())
    };
    Ok(DenoiserOutput { eps_hat, z0_hat })
}

/// Draws a clean sample from the prompt-conditioned mixture.
pub fn sample_data(
    prior: &GmmPrior,
    prompt: &Prompt,
    seed: u64,
) -> Result<Latent, DiffusionError> {
    let range = prompt.component_range(prior.k())?;
    let mut rng = rng_from_seed(derive_seed(seed, Stream::DataNoise));
    let k = rng.random_range(range);
    let n = prior.dim();
    let noise: Latent =
        DVector::from_iterator(n, (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)));
    Ok(&prior.means[k] + noise * prior.component_std)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_single_step_and_monotonicity() {
        let s = make_schedule(1, 0.5, 0.5).unwrap();
        assert_eq!(s.alpha_bar, vec![1.0, 0.5]);

        let s = make_schedule(50, 1e-4, 0.02).unwrap();
        assert_eq!(s.alpha_bar[0], 1.0);
        for t in 1..=50 {
            assert!(s.alpha_bar[t] < s.alpha_bar[t - 1]);
            assert!(s.alpha_bar[t] > 0.0 && s.alpha_bar[t] <= 1.0);
        }
        // Direct product oracle.
        let mut acc = 1.0;
        for step in 1..=50usize {
            let beta = 1e-4 + (0.02 - 1e-4) * (step - 1) as f64 / 49.0;
            acc *= 1.0 - beta;
        }
        assert!((s.alpha_bar[50] - acc).abs() < 1e-15);
    }

    #[test]
    fn schedule_rejects_bad_ranges() {
        assert!(make_schedule(0, 1e-4, 0.02).is_err());
        assert!(make_schedule(10, 0.0, 0.02).is_err());
        assert!(make_schedule(10, 0.03, 0.02).is_err());
        assert!(make_schedule(10, 0.5, 1.0).is_err());
    }

    #[test]
    fn estimate_clean_limits() {
        let sched = make_schedule(10, 1e-4, 0.02).unwrap();
        let z = DVector::from_row_slice(&[1.0, -2.0, 3.0]);
        let zero = DVector::zeros(3);
        // eps_hat = 0 → z / sqrt(ab_t)
        let got = estimate_clean(&z, &zero, 3, &sched).unwrap();
        let expect = &z / sched.alpha_bar[3].sqrt();
        assert!((got - expect).norm() < 1e-14);
        assert!(estimate_clean(&z, &zero, 0, &sched).is_err());
        assert!(estimate_clean(&z, &zero, 11, &sched).is_err());
    }

    #[test]
    fn step_pair_are_algebraic_inverses() {
        let sched = make_schedule(20, 1e-4, 0.02).unwrap();
        let mut rng = rng_from_seed(1);
        let z0: Latent =
            DVector::from_iterator(8, (0..8).map(|_| rng.sample::<f64, _>(StandardNormal)));
        let eps: Latent =
            DVector::from_iterator(8, (0..8).map(|_| rng.sample::<f64, _>(StandardNormal)));
        for t in 1..20 {
            // denoise to t-1 then invert back with the same pair
            let down = ddim_denoise_step(&z0, &eps, t, &sched).unwrap();
            let up = ddim_invert_step(&z0, &eps, t - 1, &sched).unwrap();
            let z_t = z0.clone() * sched.alpha_bar[t].sqrt()
                + eps.clone() * (1.0 - sched.alpha_bar[t]).sqrt();
            assert!((&up - &z_t).norm() < 1e-10);
            let back = ddim_invert_step(&z0, &eps, t - 1, &sched).unwrap();
            assert!((&back - &z_t).norm() < 1e-10);
            let _ = down;
        }
        // t=1 denoise emits z0 exactly (ab_0 = 1)
        let z = ddim_denoise_step(&z0, &eps, 1, &sched).unwrap();
        assert_eq!(z, z0);
    }

    #[test]
    fn denoiser_output_identity_holds() {
        let sched = make_schedule(30, 1e-4, 0.02).unwrap();
        let prior = GmmPrior::generate(3, 4, 16, 0.3).unwrap();
        let mut rng = rng_from_seed(44);
        let z_t: Latent =
            DVector::from_iterator(16, (0..16).map(|_| rng.sample::<f64, _>(StandardNormal)));
        for t in [1usize, 10, 30] {
            let out = gmm_denoise(&prior, &z_t, t, &Prompt::unconditional(), &sched).unwrap();
            let ab = sched.alpha_bar[t];
            let recon = &out.z0_hat * ab.sqrt() + &out.eps_hat * (1.0 - ab).sqrt();
            assert!((&recon - &z_t).norm() <= 1e-10 * (1.0 + z_t.norm()), "t={t}");
        }
    }

    #[test]
    fn degenerate_posterior_cases() {
        let sched = make_schedule(10, 1e-4, 0.02).unwrap();
        // Single component, tiny std: z0_hat → mu regardless of z_t.
        let mu = DVector::from_row_slice(&[1.0, -1.0]);
        let prior = GmmPrior::from_means(vec![mu.clone()], 1e-9, 0).unwrap();
        let z_t = DVector::from_row_slice(&[5.0, 5.0]);
        let out = gmm_denoise(&prior, &z_t, 5, &Prompt::unconditional(), &sched).unwrap();
        assert!((&out.z0_hat - &mu).norm() < 1e-6);

        // Symmetric two-component mixture, z_t = 0: z0_hat = 0 by symmetry.
        let prior2 =
            GmmPrior::from_means(vec![mu.clone(), -mu.clone()], 0.3, 0).unwrap();
        let out2 = gmm_denoise(
            &prior2,
            &DVector::zeros(2),
            5,
            &Prompt::unconditional(),
            &sched,
        )
        .unwrap();
        assert!(out2.z0_hat.norm() < 1e-12);
    }

    #[test]
    fn near_clean_regime_returns_input() {
        // ab_1 ~ 1 - 1e-4: z0_hat ≈ z_t for z_t near the data manifold.
        let sched = make_schedule(50, 1e-4, 0.02).unwrap();
        let prior = GmmPrior::generate(5, 2, 12, 0.3).unwrap();
        let z_t = prior.means[0].clone();
        let out = gmm_denoise(&prior, &z_t, 1, &Prompt::unconditional(), &sched).unwrap();
        assert!((&out.z0_hat - &z_t).norm() / z_t.norm() < 1e-3);
    }

    #[test]
    fn posterior_mean_matches_quadrature_oracle() {
        // 2-D mixture: brute-force E[x | z_t] by grid quadrature.
        let sched = make_schedule(10, 0.02, 0.2).unwrap();
        let m1 = DVector::from_row_slice(&[1.0, 0.5]);
        let m2 = DVector::from_row_slice(&[-0.8, -1.2]);
        let std = 0.4;
        let prior = GmmPrior::from_means(vec![m1.clone(), m2.clone()], std, 0).unwrap();
        let z_t = DVector::from_row_slice(&[0.3, -0.2]);
        let t = 6;
        let ab = sched.alpha_bar[t];
        let a = ab.sqrt();
        let v = 1.0 - ab;

        // p(z|x) ∝ exp(-||z - a x||^2 / (2 v)), p(x) mixture; integrate on a grid.
        let lim = 4.0;
        let steps = 400usize;
        let h = 2.0 * lim / steps as f64;
        let mut num = [0.0f64; 2];
        let mut den = 0.0f64;
        for i in 0..steps {
            let x0 = -lim + (i as f64 + 0.5) * h;
            for j in 0..steps {
                let x1 = -lim + (j as f64 + 0.5) * h;
                let prior_d = (-((x0 - m1[0]).powi(2) + (x1 - m1[1]).powi(2))
                    / (2.0 * std * std))
                    .exp()
                    + (-((x0 - m2[0]).powi(2) + (x1 - m2[1]).powi(2)) / (2.0 * std * std)).exp();
                let lik = (-((z_t[0] - a * x0).powi(2) + (z_t[1] - a * x1).powi(2)) / (2.0 * v))
                    .exp();
                let w = prior_d * lik;
                num[0] += w * x0;
                num[1] += w * x1;
                den += w;
            }
        }
        let oracle = DVector::from_row_slice(&[num[0] / den, num[1] / den]);
        let out = gmm_denoise(&prior, &z_t, t, &Prompt::unconditional(), &sched).unwrap();
        assert!(
            (&out.z0_hat - &oracle).norm() < 1e-6,
            "got {:?} want {:?}",
            out.z0_hat,
            oracle
        );
    }

    #[test]
    fn sample_data_moments_and_determinism() {
        let prior = GmmPrior::generate(9, 3, 8, 0.3).unwrap();
        let prompt = Prompt::conditioned(1, "class 1");
        let a = sample_data(&prior, &prompt, 5).unwrap();
        let b = sample_data(&prior, &prompt, 5).unwrap();
        assert_eq!(a, b);

        let n_draws = 10_000usize;
        let mut mean = DVector::zeros(8);
        let mut sq = 0.0;
        for s in 0..n_draws {
            let x = sample_data(&prior, &prompt, s as u64).unwrap();
            sq += (&x - &prior.means[1]).norm_squared();
            mean += x;
        }
        mean /= n_draws as f64;
        // subset = component 1 only; mean within 3 sigma / sqrt(n) per coordinate
        let tol = 3.0 * 0.3 / (n_draws as f64).sqrt() * (8.0f64).sqrt() * 2.0;
        assert!((&mean - &prior.means[1]).norm() < tol);
        let emp_std = (sq / (n_draws * 8) as f64).sqrt();
        assert!((emp_std - 0.3).abs() < 0.01, "empirical std {emp_std}");

        assert!(sample_data(&prior, &Prompt::conditioned(3, "bad"), 0).is_err());
    }

    #[test]
    fn prior_regeneration_bit_identical() {
        let a = GmmPrior::generate(7, 4, 10, 0.3).unwrap();
        let b = GmmPrior::generate(7, 4, 10, 0.3).unwrap();
        for (x, y) in a.means.iter().zip(&b.means) {
            assert_eq!(x.as_slice(), y.as_slice());
        }
    }
}
