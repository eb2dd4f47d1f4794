//! Secret sensing matrix: generation, measurement, pseudoinverse application,
//! and the minimal-perturbation consistency projection.
//!
//! The matrix `A` (M×N, full row rank) is the recovery key. Its pseudoinverse
//! is applied through a cached Cholesky factor of the Gram matrix
//! `A·Aᵀ + jitter·I`; the dense `A†` is never materialized.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seeding::{derive_seed, rng_from_seed, Stream};
use crate::Latent;

#[derive(Debug, Error)]
pub enum SensingError {
    #[error("gram matrix factorization failed (degenerate draw); retry with seed+1")]
    FactorizationFailure,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("need at least 2 distinct points for a JL check")]
    TooFewPoints,
    #[error("invalid parameter: {0}")]
    InvalidParam(String),
}

/// Where an observation vector came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ObservationSource {
    /// Trajectory-intrinsic: `y = A·z_{0|t}` at this timestep.
    Step(usize),
    /// Reconstructed from the encoded (final) latent, `y = A·z_0`.
    EncodedLatent,
    /// Drawn at random; only used by the random-observation ablation.
    Random,
}

/// A compressed measurement `y` of length M.
#[derive(Debug, Clone)]
pub struct Observation {
    pub values: DVector<f64>,
    pub source: ObservationSource,
}

/// Result of an empirical Johnson-Lindenstrauss distance-preservation check.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct JlReport {
    pub epsilon: f64,
    pub num_pairs: usize,
    pub max_distortion: f64,
    pub pass: bool,
}

/// The secret M×N measurement matrix with its cached Gram factorization.
///
/// Immutable after construction; all operations are pure.
#[derive(Debug, Clone)]
pub struct SecretMatrix {
    entries: DMatrix<f64>,
    chol_gram: Cholesky<f64, Dyn>,
    jitter: f64,
    seed: u64,
    cs_ratio: f64,
}

impl SecretMatrix {
    pub fn m(&self) -> usize {
        self.entries.nrows()
    }

    pub fn n(&self) -> usize {
        self.entries.ncols()
    }

    pub fn entries(&self) -> &DMatrix<f64> {
        &self.entries
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn cs_ratio(&self) -> f64 {
        self.cs_ratio
    }

    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    /// Lower-triangular Cholesky factor of `A·Aᵀ + jitter·I`.
    pub fn chol_gram_l(&self) -> DMatrix<f64> {
        self.chol_gram.l()
    }

    /// Builds the cached factorization for a given entry matrix.
    /// Fails if the jittered Gram matrix is numerically singular.
    pub fn from_entries(
        entries: DMatrix<f64>,
        seed: u64,
        cs_ratio: f64,
    ) -> Result<Self, SensingError> {
        let m = entries.nrows();
        if m == 0 || entries.ncols() < m {
            return Err(SensingError::InvalidParam(format!(
                "entries must be MxN with 1 <= M <= N, got {}x{}",
                m,
                entries.ncols()
            )));
        }
        let frob_sq = entries.iter().map(|v| v * v).sum::<f64>();
        let jitter = 1e-10 * frob_sq / m as f64;
        let mut gram = &entries * entries.transpose();
        for i in 0..m {
            gram[(i, i)] += jitter;
        }
        let chol_gram = Cholesky::new(gram).ok_or(SensingError::FactorizationFailure)?;
        Ok(Self {
            entries,
            chol_gram,
            jitter,
            seed,
            cs_ratio,
        })
    }
}

/// Draws an M×N matrix with i.i.d. N(0, 1/M) entries, M = floor(cs_ratio·N).
///
/// Deterministic in `seed`; the same seed yields bit-identical entries on
/// every platform.
pub fn gen_secret_matrix(seed: u64, n: usize, cs_ratio: f64) -> Result<SecretMatrix, SensingError> {
    if n < 2 {
        return Err(SensingError::InvalidParam(format!("n must be >= 2, got {n}")));
    }
    if !(cs_ratio > 0.0 && cs_ratio <= 1.0) {
        return Err(SensingError::InvalidParam(format!(
            "cs_ratio must be in (0,1], got {cs_ratio}"
        )));
    }
    let m = (cs_ratio * n as f64).floor() as usize;
    if m < 1 {
        return Err(SensingError::InvalidParam(format!(
            "floor(cs_ratio*n) must be >= 1, got {m}"
        )));
    }
    let entries = draw_entries(derive_seed(seed, Stream::MatrixEntries), m, n);
    SecretMatrix::from_entries(entries, seed, cs_ratio)
}

/// Row-major i.i.d. N(0, 1/M) draw.
fn draw_entries(stream_seed: u64, m: usize, n: usize) -> DMatrix<f64> {
    let mut rng = rng_from_seed(stream_seed);
    let std = 1.0 / (m as f64).sqrt();
    let data: Vec<f64> = (0..m * n)
        .map(|_| {
            let u: f64 = rng.sample(StandardNormal);
            u * std
        })
        .collect();
    DMatrix::from_row_slice(m, n, &data)
}

/// `y = A·z`.
pub fn measure(a: &SecretMatrix, z: &Latent) -> Result<Observation, SensingError> {
    if z.len() != a.n() {
        return Err(SensingError::DimensionMismatch {
            expected: a.n(),
            got: z.len(),
        });
    }
    Ok(Observation {
        values: &a.entries * z,
        source: ObservationSource::EncodedLatent,
    })
}

/// Applies `A† = Aᵀ(AAᵀ)⁻¹` to a residual of length M via two triangular
/// solves against the cached Gram factor.
pub fn apply_pseudoinverse(a: &SecretMatrix, r: &DVector<f64>) -> Result<Latent, SensingError> {
    if r.len() != a.m() {
        return Err(SensingError::DimensionMismatch {
            expected: a.m(),
            got: r.len(),
        });
    }
    let w = a.chol_gram.solve(r);
    Ok(a.entries.transpose() * w)
}

/// Minimal-perturbation projection onto the affine set `{z : A·z = y}`:
/// `z' = z − A†(A·z − y)`.
pub fn project_consistency(
    a: &SecretMatrix,
    y: &Observation,
    z: &Latent,
) -> Result<Latent, SensingError> {
    if y.values.len() != a.m() {
        return Err(SensingError::DimensionMismatch {
            expected: a.m(),
            got: y.values.len(),
        });
    }
    if z.len() != a.n() {
        return Err(SensingError::DimensionMismatch {
            expected: a.n(),
            got: z.len(),
        });
    }
    // The jittered Gram factor makes a single solve land within
    // ~jitter/lambda_min of the constraint set; a couple of refinement
    // passes push the residual to rounding level.
    let mut out = z.clone();
    for _ in 0..3 {
        let residual = &a.entries * &out - &y.values;
        if residual.norm() <= 1e-14 * (1.0 + y.values.norm()) {
            break;
        }
        out -= apply_pseudoinverse(a, &residual)?;
    }
    Ok(out)
}

/// Orthogonal split `z = A†A·z + (I − A†A)·z` into range and null components.
pub fn split_components(a: &SecretMatrix, z: &Latent) -> Result<(Latent, Latent), SensingError> {
    let y = measure(a, z)?;
    // Refined as in `project_consistency`: drive `A·range = A·z` to rounding
    // level so the null component is exactly invisible to the measurement.
    let mut range_part = apply_pseudoinverse(a, &y.values)?;
    for _ in 0..2 {
        let residual = &y.values - &a.entries * &range_part;
        if residual.norm() <= 1e-14 * (1.0 + y.values.norm()) {
            break;
        }
        range_part += apply_pseudoinverse(a, &residual)?;
    }
    let null_part = z - &range_part;
    Ok((range_part, null_part))
}

/// Worst pairwise distance distortion of `A` over a point set, skipping
/// coincident pairs.
pub fn check_jl(
    a: &SecretMatrix,
    points: &[Latent],
    epsilon: f64,
) -> Result<JlReport, SensingError> {
    if points.len() < 2 {
        return Err(SensingError::TooFewPoints);
    }
    if !(epsilon > 0.0 && epsilon < 1.0) {
        return Err(SensingError::InvalidParam(format!(
            "epsilon must be in (0,1), got {epsilon}"
        )));
    }
    let mut num_pairs = 0usize;
    let mut max_distortion = 0.0f64;
    for i in 0..points.len() {
        for j in (i + 1)..points.len() {
            let d = &points[i] - &points[j];
            let dn = d.norm();
            if dn == 0.0 {
                continue;
            }
            let proj_n = (&a.entries * d).norm();
            let distortion = (proj_n / dn - 1.0).abs();
            max_distortion = max_distortion.max(distortion);
            num_pairs += 1;
        }
    }
    if num_pairs == 0 {
        return Err(SensingError::TooFewPoints);
    }
    Ok(JlReport {
        epsilon,
        num_pairs,
        max_distortion,
        pass: max_distortion <= epsilon,
    })
}

/// Builds an estimated matrix `Ã = s·A + sqrt(1−s²)·G` with `G` a fresh draw
/// from the generation distribution; per-row cosine similarity to `A` has
/// expectation `s`.
pub fn perturb_matrix(
    a: &SecretMatrix,
    similarity: f64,
    seed: u64,
) -> Result<SecretMatrix, SensingError> {
    if !(0.0..=1.0).contains(&similarity) {
        return Err(SensingError::InvalidParam(format!(
            "similarity must be in [0,1], got {similarity}"
        )));
    }
    if similarity == 1.0 {
        // Noise coefficient is exactly zero; keep entries bit-identical.
        return SecretMatrix::from_entries(a.entries.clone(), seed, a.cs_ratio);
    }
    let g = draw_entries(derive_seed(seed, Stream::PerturbNoise), a.m(), a.n());
    let noise_coeff = (1.0 - similarity * similarity).sqrt();
    let entries = a.entries.map_with_location(|i, j, v| similarity * v + noise_coeff * g[(i, j)]);
    SecretMatrix::from_entries(entries, seed, a.cs_ratio)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn latent(vals: &[f64]) -> Latent {
        DVector::from_row_slice(vals)
    }

    /// Independent pseudoinverse route via SVD, used as the oracle.
    fn svd_pinv(a: &DMatrix<f64>) -> DMatrix<f64> {
        a.clone().svd(true, true).pseudo_inverse(1e-12).unwrap()
    }

    fn unit_row_matrix() -> SecretMatrix {
        // A = [1, 0], orthonormal single row.
        SecretMatrix::from_entries(DMatrix::from_row_slice(1, 2, &[1.0, 0.0]), 0, 0.5).unwrap()
    }

    #[test]
    fn gen_shapes_and_factorization() {
        let a = gen_secret_matrix(0, 16, 0.5).unwrap();
        assert_eq!(a.m(), 8);
        assert_eq!(a.n(), 16);
        // chol_gram reconstructs A·Aᵀ + jitter·I within 1e-10 relative Frobenius error
        let l = a.chol_gram_l();
        let recon = &l * l.transpose();
        let mut gram = a.entries() * a.entries().transpose();
        for i in 0..a.m() {
            gram[(i, i)] += a.jitter();
        }
        let rel = (&recon - &gram).norm() / gram.norm();
        assert!(rel <= 1e-10, "rel frobenius error {rel}");
    }

    #[test]
    fn gen_is_deterministic() {
        let a = gen_secret_matrix(7, 16, 0.5).unwrap();
        let b = gen_secret_matrix(7, 16, 0.5).unwrap();
        assert_eq!(a.entries().as_slice(), b.entries().as_slice());
    }

    #[test]
    fn gen_rank_matches_svd_oracle() {
        let a = gen_secret_matrix(0, 64, 0.8).unwrap();
        assert_eq!(a.m(), 51);
        let rank = a.entries().clone().svd(false, false).rank(1e-9);
        assert_eq!(rank, 51);
    }

    #[test]
    fn gen_rejects_bad_params() {
        assert!(gen_secret_matrix(0, 1, 0.5).is_err());
        assert!(gen_secret_matrix(0, 16, 0.0).is_err());
        assert!(gen_secret_matrix(0, 16, 1.5).is_err());
        assert!(gen_secret_matrix(0, 4, 0.1).is_err()); // floor(0.4) = 0
    }

    #[test]
    fn measure_direct_product_and_linearity() {
        let a = unit_row_matrix();
        let y = measure(&a, &latent(&[5.0, 7.0])).unwrap();
        assert_eq!(y.values.as_slice(), &[5.0]);
        let y0 = measure(&a, &latent(&[0.0, 0.0])).unwrap();
        assert_eq!(y0.values.as_slice(), &[0.0]);
        assert!(measure(&a, &latent(&[1.0])).is_err());
    }

    #[test]
    fn measure_preserves_norm_for_jl_scaled_matrix() {
        // Monte-Carlo over 1000 draws: ‖A z‖ ≈ ‖z‖ on average.
        let a = gen_secret_matrix(3, 128, 0.8).unwrap();
        let mut rng = rng_from_seed(99);
        let mut ratio_sum = 0.0;
        for _ in 0..1000 {
            let z: Latent =
                DVector::from_iterator(128, (0..128).map(|_| rng.sample::<f64, _>(StandardNormal)));
            let y = measure(&a, &z).unwrap();
            ratio_sum += y.values.norm() / z.norm();
        }
        let mean_ratio = ratio_sum / 1000.0;
        assert!((mean_ratio - 1.0).abs() < 0.05, "mean norm ratio {mean_ratio}");
    }

    #[test]
    fn pseudoinverse_zero_and_orthonormal_rows() {
        let a = unit_row_matrix();
        let z = apply_pseudoinverse(&a, &DVector::from_row_slice(&[0.0])).unwrap();
        assert_eq!(z.as_slice(), &[0.0, 0.0]);
        // Orthonormal rows: A† r = Aᵀ r (up to the jitter, which is ~1e-10 relative).
        let z = apply_pseudoinverse(&a, &DVector::from_row_slice(&[3.0])).unwrap();
        assert!((z[0] - 3.0).abs() < 1e-8);
        assert_eq!(z[1], 0.0);
    }

    #[test]
    fn pseudoinverse_residual_oracle() {
        let a = gen_secret_matrix(11, 48, 0.6).unwrap();
        let mut rng = rng_from_seed(5);
        for _ in 0..20 {
            let r: DVector<f64> = DVector::from_iterator(
                a.m(),
                (0..a.m()).map(|_| rng.sample::<f64, _>(StandardNormal)),
            );
            let z = apply_pseudoinverse(&a, &r).unwrap();
            let back = a.entries() * z;
            let rel = (&back - &r).norm() / r.norm();
            assert!(rel <= 1e-8, "residual rel error {rel}");
        }
    }

    #[test]
    fn projection_hand_example_and_least_squares_oracle() {
        let a = unit_row_matrix();
        let y = Observation {
            values: DVector::from_row_slice(&[3.0]),
            source: ObservationSource::EncodedLatent,
        };
        let z = latent(&[5.0, 7.0]);
        let p = project_consistency(&a, &y, &z).unwrap();
        assert!((p[0] - 3.0).abs() < 1e-9);
        assert!((p[1] - 7.0).abs() < 1e-12);

        // Oracle: z' = z + pinv(A)(y - A z) with pinv from SVD.
        let a2 = gen_secret_matrix(21, 32, 0.5).unwrap();
        let pinv = svd_pinv(a2.entries());
        let mut rng = rng_from_seed(77);
        let z: Latent =
            DVector::from_iterator(32, (0..32).map(|_| rng.sample::<f64, _>(StandardNormal)));
        let yv: DVector<f64> =
            DVector::from_iterator(16, (0..16).map(|_| rng.sample::<f64, _>(StandardNormal)));
        let y = Observation {
            values: yv.clone(),
            source: ObservationSource::EncodedLatent,
        };
        let p = project_consistency(&a2, &y, &z).unwrap();
        let oracle = &z + &pinv * (&yv - a2.entries() * &z);
        assert!((&p - &oracle).norm() / oracle.norm() < 1e-8);
    }

    #[test]
    fn projection_fixed_point_and_null_shift() {
        let a = gen_secret_matrix(31, 24, 0.5).unwrap();
        let mut rng = rng_from_seed(8);
        let z: Latent =
            DVector::from_iterator(24, (0..24).map(|_| rng.sample::<f64, _>(StandardNormal)));
        let y = measure(&a, &z).unwrap();
        // A z = y already: projection is (numerically) the identity.
        let p = project_consistency(&a, &y, &z).unwrap();
        assert!((&p - &z).norm() <= 1e-10 * z.norm());

        // Shift by a null vector: projected output shifts by exactly that vector.
        let w: Latent =
            DVector::from_iterator(24, (0..24).map(|_| rng.sample::<f64, _>(StandardNormal)));
        let (_, n_w) = split_components(&a, &w).unwrap();
        let z2 = &z + &n_w;
        let p2 = project_consistency(&a, &y, &z2).unwrap();
        assert!((&p2 - (&p + &n_w)).norm() <= 1e-8);
    }

    #[test]
    fn split_hand_example_and_contracts() {
        let a = unit_row_matrix();
        let (r, n) = split_components(&a, &latent(&[5.0, 7.0])).unwrap();
        assert!((r[0] - 5.0).abs() < 1e-8 && r[1].abs() < 1e-12);
        assert!(n[0].abs() < 1e-8 && (n[1] - 7.0).abs() < 1e-12);

        // z in Null(A) → range part 0.
        let (r0, _) = split_components(&a, &latent(&[0.0, 4.0])).unwrap();
        assert!(r0.norm() < 1e-12);

        let a2 = gen_secret_matrix(17, 40, 0.7).unwrap();
        let mut rng = rng_from_seed(13);
        let z: Latent =
            DVector::from_iterator(40, (0..40).map(|_| rng.sample::<f64, _>(StandardNormal)));
        let (rp, np) = split_components(&a2, &z).unwrap();
        assert!((&rp + &np - &z).norm() <= 1e-10 * z.norm());
        assert!((a2.entries() * &np).norm() <= 1e-8);
        assert!(rp.dot(&np).abs() <= 1e-8);
    }

    #[test]
    fn jl_errors_and_exact_single_pair() {
        let a = unit_row_matrix();
        let p = latent(&[1.0, 1.0]);
        assert!(check_jl(&a, std::slice::from_ref(&p), 0.5).is_err());
        assert!(check_jl(&a, &[p.clone(), p.clone()], 0.5).is_err());

        // Single pair with difference [-1,-1]: ‖A d‖/‖d‖ = 1/sqrt(2) exactly.
        let q = latent(&[2.0, 2.0]);
        let rep = check_jl(&a, &[p, q], 0.9).unwrap();
        let expect = (1.0f64 / 2.0f64.sqrt() - 1.0).abs();
        assert!((rep.max_distortion - expect).abs() < 1e-12);
        assert_eq!(rep.num_pairs, 1);
        assert!(rep.pass);
    }

    #[test]
    fn jl_desk_scale_passes_at_pinned_seed() {
        let a = gen_secret_matrix(0, 256, 0.8).unwrap();
        let mut rng = rng_from_seed(1234);
        let points: Vec<Latent> = (0..50)
            .map(|_| {
                DVector::from_iterator(256, (0..256).map(|_| rng.sample::<f64, _>(StandardNormal)))
            })
            .collect();
        let rep = check_jl(&a, &points, 0.3).unwrap();
        assert!(rep.pass, "distortion {}", rep.max_distortion);
    }

    #[test]
    fn perturb_similarity_endpoints() {
        let a = gen_secret_matrix(2, 200, 0.5).unwrap();
        let same = perturb_matrix(&a, 1.0, 9).unwrap();
        assert_eq!(same.entries().as_slice(), a.entries().as_slice());

        let row_cos_mean = |b: &SecretMatrix| {
            let mut s = 0.0;
            for i in 0..a.m() {
                let ra = a.entries().row(i);
                let rb = b.entries().row(i);
                s += ra.dot(&rb) / (ra.norm() * rb.norm());
            }
            s / a.m() as f64
        };

        let indep = perturb_matrix(&a, 0.0, 9).unwrap();
        assert!(row_cos_mean(&indep).abs() < 0.05);

        let close = perturb_matrix(&a, 0.96, 9).unwrap();
        let c = row_cos_mean(&close);
        assert!((c - 0.96).abs() < 0.02, "mean row cosine {c}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn projection_invariants(seed in 0u64..1000, n in 4usize..24, ratio in 0.25f64..0.95) {
            let a = gen_secret_matrix(seed, n, ratio).unwrap();
            let mut rng = rng_from_seed(seed ^ 0xabcd);
            let z: Latent = DVector::from_iterator(n, (0..n).map(|_| rng.sample::<f64,_>(StandardNormal)));
            let yv: DVector<f64> = DVector::from_iterator(a.m(), (0..a.m()).map(|_| rng.sample::<f64,_>(StandardNormal)));
            let y = Observation { values: yv.clone(), source: ObservationSource::EncodedLatent };

            let p = project_consistency(&a, &y, &z).unwrap();
            // consistency
            prop_assert!((a.entries() * &p - &yv).norm() <= 1e-8 * (1.0 + yv.norm()));
            // idempotence
            let pp = project_consistency(&a, &y, &p).unwrap();
            prop_assert!((&pp - &p).norm() <= 1e-10 * (1.0 + p.norm()));
            // null-space invariance
            let (_, nz) = split_components(&a, &z).unwrap();
            let (_, np) = split_components(&a, &p).unwrap();
            prop_assert!((&nz - &np).norm() <= 1e-8 * (1.0 + nz.norm()));
            // minimality vs random feasible points
            let dist_p = (&p - &z).norm();
            for _ in 0..20 {
                let w: Latent = DVector::from_iterator(n, (0..n).map(|_| rng.sample::<f64,_>(StandardNormal)));
                let q = project_consistency(&a, &y, &w).unwrap();
                prop_assert!(dist_p <= (&q - &z).norm() + 1e-9);
            }
        }
    }
}
