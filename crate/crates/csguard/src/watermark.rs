//! Gaussian-Shading-style watermark: bit replication, keystream encryption,
//! sign-carrying half-normal sampling, majority-vote extraction, and exact
//! binomial detection thresholds.
//!
//! Each payload bit is replicated `r = n/L` times over contiguous coordinate
//! blocks, XORed with a key-derived keystream, and encoded as the sign of a
//! half-normal magnitude. The marginal of every coordinate is exactly N(0,1).

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seeding::{derive_seed, rng_from_seed, Stream};
use crate::Latent;
use nalgebra::DVector;

#[derive(Debug, Error)]
pub enum WatermarkError {
    #[error("payload length {payload_len} does not divide latent dimension {latent_len}")]
    LengthMismatch { payload_len: usize, latent_len: usize },
    #[error("payload must have at least one bit")]
    EmptyPayload,
    #[error("invalid hex payload: {0}")]
    InvalidHex(String),
}

/// Seed of the keystream PRNG. Same key, same keystream, bit-exact.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WatermarkKey(pub u64);

/// Message bits to embed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Payload {
    pub bits: Vec<bool>,
}

impl Payload {
    pub fn new(bits: Vec<bool>) -> Result<Self, WatermarkError> {
        if bits.is_empty() {
            return Err(WatermarkError::EmptyPayload);
        }
        Ok(Self { bits })
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    /// Random payload of length `l`, deterministic in `seed`.
    pub fn random(l: usize, seed: u64) -> Result<Self, WatermarkError> {
        if l == 0 {
            return Err(WatermarkError::EmptyPayload);
        }
        let mut rng = rng_from_seed(derive_seed(seed, Stream::Payload));
        Ok(Self {
            bits: (0..l).map(|_| rng.random::<bool>()).collect(),
        })
    }

    /// Parses a hex string; payload length is 4 bits per hex digit.
    pub fn from_hex(s: &str) -> Result<Self, WatermarkError> {
        if s.is_empty() {
            return Err(WatermarkError::EmptyPayload);
        }
        let mut bits = Vec::with_capacity(s.len() * 4);
        for c in s.chars() {
            let v = c
                .to_digit(16)
                .ok_or_else(|| WatermarkError::InvalidHex(s.to_string()))?;
            for k in (0..4).rev() {
                bits.push((v >> k) & 1 == 1);
            }
        }
        Ok(Self { bits })
    }

    pub fn to_hex(&self) -> String {
        let mut s = String::new();
        for chunk in self.bits.chunks(4) {
            let mut v = 0u32;
            for (k, b) in chunk.iter().enumerate() {
                if *b {
                    v |= 1 << (3 - k);
                }
            }
            s.push(char::from_digit(v, 16).unwrap());
        }
        s
    }
}

/// Detection outcome at a fixed target FPR.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VerifyReport {
    pub bit_accuracy: f64,
    pub matched_bits: usize,
    pub threshold: usize,
    pub detected: bool,
    pub fpr_target: f64,
}

fn keystream(key: WatermarkKey, n: usize) -> Vec<bool> {
    let mut rng = rng_from_seed(derive_seed(key.0, Stream::Keystream));
    (0..n).map(|_| rng.random::<bool>()).collect()
}

/// Samples the watermarked initial latent `z_T`.
///
/// Coordinate `i` carries payload bit `i / r` XOR keystream bit `i` as its
/// sign, with a half-normal magnitude drawn from `sample_seed`.
pub fn embed_watermark(
    key: WatermarkKey,
    payload: &Payload,
    n: usize,
    sample_seed: u64,
) -> Result<Latent, WatermarkError> {
    let l = payload.len();
    if l == 0 || !n.is_multiple_of(l) {
        return Err(WatermarkError::LengthMismatch {
            payload_len: l,
            latent_len: n,
        });
    }
    let r = n / l;
    let ks = keystream(key, n);
    let mut rng = rng_from_seed(derive_seed(sample_seed, Stream::SampleNoise));
    let mut z = DVector::zeros(n);
    for i in 0..n {
        let cipher_bit = payload.bits[i / r] ^ ks[i];
        let sign = if cipher_bit { 1.0 } else { -1.0 };
        let u: f64 = rng.sample(StandardNormal);
        z[i] = sign * u.abs();
    }
    Ok(z)
}

/// Recovers payload bits from a latent by sign decryption and majority vote
/// over each bit's `r` replicas. Ties break toward 0.
///
/// Returns the recovered payload and, per bit, the number of replicas that
/// voted 1.
pub fn extract_bits(
    z: &Latent,
    key: WatermarkKey,
    l: usize,
) -> Result<(Payload, Vec<usize>), WatermarkError> {
    let n = z.len();
    if l == 0 || !n.is_multiple_of(l) {
        return Err(WatermarkError::LengthMismatch {
            payload_len: l,
            latent_len: n,
        });
    }
    let r = n / l;
    let ks = keystream(key, n);
    let mut votes = vec![0usize; l];
    for i in 0..n {
        let cipher_bit = z[i] > 0.0;
        if cipher_bit ^ ks[i] {
            votes[i / r] += 1;
        }
    }
    let bits = votes.iter().map(|&v| 2 * v > r).collect();
    Ok((Payload { bits }, votes))
}

/// Smallest `tau` such that `P[Binomial(L, 1/2) >= tau] <= fpr`.
///
/// Computed exactly: the binomial tail is accumulated in 128-bit integers and
/// compared against the exact dyadic-rational value of the f64 `fpr`. Naive
/// floating-point summation underflows at fpr = 1e-10 and misjudges
/// borderline cases; this never does, for any L <= 120.
pub fn detection_threshold(l: usize, fpr: f64) -> usize {
    assert!((1..=120).contains(&l), "L must be in [1, 120]");
    assert!(fpr > 0.0 && fpr <= 1.0, "fpr must be in (0,1]");

    // fpr = mant * 2^exp exactly.
    let bits = fpr.to_bits();
    let raw_exp = ((bits >> 52) & 0x7ff) as i64;
    let raw_mant = bits & ((1u64 << 52) - 1);
    let (mant, exp) = if raw_exp == 0 {
        (raw_mant as u128, -1074i64)
    } else {
        ((raw_mant | (1u64 << 52)) as u128, raw_exp - 1075)
    };

    // tail / 2^L <= mant * 2^exp  <=>  tail <= mant * 2^(exp + L)
    let s = exp + l as i64;
    let tail_ok = |tail: u128| -> bool {
        if tail == 0 {
            return true;
        }
        if s >= 0 {
            if s as u32 >= mant.leading_zeros() {
                return true; // mant * 2^s >= 2^128 > tail
            }
            tail <= mant << s
        } else {
            let sh = (-s) as u32;
            if sh >= tail.leading_zeros() {
                return false; // tail * 2^sh >= 2^128 > mant
            }
            (tail << sh) <= mant
        }
    };

    // Walk tau from L+1 down; tail(tau) grows as terms are added. The binomial
    // recurrence C(L,k) = C(L,k+1)*(k+1)/(L-k) divides exactly.
    let mut choose: u128 = 1; // C(L, L)
    let mut tail: u128 = 0; // tail(L+1)
    let mut tau = l + 1;
    while tau > 0 {
        let k = tau - 1;
        if k < l {
            choose = choose * (k as u128 + 1) / ((l - k) as u128);
        }
        tail += choose;
        if !tail_ok(tail) {
            return tau;
        }
        tau -= 1;
    }
    0
}

/// Extracts bits, counts matches against the expected payload, and applies
/// the binomial detection threshold at `fpr`.
pub fn verify_watermark(
    z: &Latent,
    key: WatermarkKey,
    payload: &Payload,
    fpr: f64,
) -> Result<VerifyReport, WatermarkError> {
    let (recovered, _) = extract_bits(z, key, payload.len())?;
    let matched_bits = recovered
        .bits
        .iter()
        .zip(&payload.bits)
        .filter(|(a, b)| a == b)
        .count();
    let l = payload.len();
    let threshold = detection_threshold(l, fpr);
    Ok(VerifyReport {
        bit_accuracy: matched_bits as f64 / l as f64,
        matched_bits,
        threshold,
        detected: matched_bits >= threshold,
        fpr_target: fpr,
    })
}
