//! Binary file formats for matrices, latents, and priors.
//!
//! All three share one layout: a 16-byte header (4-byte magic, version u16,
//! rows u32, cols u32, flags u16, all little-endian) followed by row-major
//! 64-bit little-endian floats. Matrices use magic `CSGA`, latents `CSGL`
//! (a single row), priors `CSGP` (one row per component mean). Metadata that
//! is not part of the numeric payload (seed, cs_ratio, component_std) lives
//! in a `<path>.meta.json` sidecar. Gram factorizations are recomputed on
//! load, never stored.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffusion::GmmPrior;
use crate::sensing::{SecretMatrix, SensingError};
use crate::Latent;

pub const FORMAT_VERSION: u16 = 1;
pub const MAGIC_MATRIX: [u8; 4] = *b"CSGA";
pub const MAGIC_LATENT: [u8; 4] = *b"CSGL";
pub const MAGIC_PRIOR: [u8; 4] = *b"CSGP";

#[derive(Debug, Error)]
pub enum VecIoError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("bad magic: expected {expected:?}, got {got:?}")]
    BadMagic { expected: [u8; 4], got: [u8; 4] },
    #[error("unsupported format version {0}")]
    BadVersion(u16),
    #[error("file truncated or inconsistent: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Sensing(#[from] SensingError),
    #[error("sidecar metadata error: {0}")]
    Sidecar(#[from] serde_json::Error),
}

fn sidecar_path(path: &Path) -> PathBuf {
    let mut os = path.as_os_str().to_owned();
    os.push(".meta.json");
    PathBuf::from(os)
}

pub fn write_array(path: &Path, magic: [u8; 4], data: &DMatrix<f64>) -> Result<(), VecIoError> {
    let mut f = fs::File::create(path)?;
    let rows = u32::try_from(data.nrows())
        .map_err(|_| VecIoError::Corrupt("too many rows".into()))?;
    let cols = u32::try_from(data.ncols())
        .map_err(|_| VecIoError::Corrupt("too many cols".into()))?;
    f.write_all(&magic)?;
    f.write_all(&FORMAT_VERSION.to_le_bytes())?;
    f.write_all(&rows.to_le_bytes())?;
    f.write_all(&cols.to_le_bytes())?;
    f.write_all(&0u16.to_le_bytes())?;
    let mut buf = Vec::with_capacity(data.len() * 8);
    for i in 0..data.nrows() {
        for j in 0..data.ncols() {
            buf.extend_from_slice(&data[(i, j)].to_le_bytes());
        }
    }
    f.write_all(&buf)?;
    Ok(())
}

pub fn read_array(path: &Path, expected_magic: [u8; 4]) -> Result<DMatrix<f64>, VecIoError> {
    let mut f = fs::File::open(path)?;
    let mut header = [0u8; 16];
    f.read_exact(&mut header)?;
    let got: [u8; 4] = header[0..4].try_into().unwrap();
    if got != expected_magic {
        return Err(VecIoError::BadMagic {
            expected: expected_magic,
            got,
        });
    }
    let version = u16::from_le_bytes(header[4..6].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(VecIoError::BadVersion(version));
    }
    let rows = u32::from_le_bytes(header[6..10].try_into().unwrap()) as usize;
    let cols = u32::from_le_bytes(header[10..14].try_into().unwrap()) as usize;
    let mut buf = Vec::new();
    f.read_to_end(&mut buf)?;
    if buf.len() != rows * cols * 8 {
        return Err(VecIoError::Corrupt(format!(
            "expected {} payload bytes, got {}",
            rows * cols * 8,
            buf.len()
        )));
    }
    let mut data = Vec::with_capacity(rows * cols);
    for chunk in buf.chunks_exact(8) {
        data.push(f64::from_le_bytes(chunk.try_into().unwrap()));
    }
    Ok(DMatrix::from_row_slice(rows, cols, &data))
}

#[derive(Debug, Serialize, Deserialize)]
struct MatrixMeta {
    seed: u64,
    cs_ratio: f64,
}

pub fn save_secret_matrix(path: &Path, matrix: &SecretMatrix) -> Result<(), VecIoError> {
    write_array(path, MAGIC_MATRIX, matrix.entries())?;
    let meta = MatrixMeta {
        seed: matrix.seed(),
        cs_ratio: matrix.cs_ratio(),
    };
    fs::write(sidecar_path(path), serde_json::to_vec_pretty(&meta)?)?;
    Ok(())
}

pub fn load_secret_matrix(path: &Path) -> Result<SecretMatrix, VecIoError> {
    let entries = read_array(path, MAGIC_MATRIX)?;
    let meta: MatrixMeta = serde_json::from_slice(&fs::read(sidecar_path(path))?)?;
    Ok(SecretMatrix::from_entries(entries, meta.seed, meta.cs_ratio)?)
}

pub fn save_latent(path: &Path, z: &Latent) -> Result<(), VecIoError> {
    let row = DMatrix::from_row_slice(1, z.len(), z.as_slice());
    write_array(path, MAGIC_LATENT, &row)
}

pub fn load_latent(path: &Path) -> Result<Latent, VecIoError> {
    let arr = read_array(path, MAGIC_LATENT)?;
    if arr.nrows() != 1 {
        return Err(VecIoError::Corrupt(format!(
            "latent file must have 1 row, got {}",
            arr.nrows()
        )));
    }
    Ok(Latent::from_row_slice(arr.row(0).transpose().as_slice()))
}

#[derive(Debug, Serialize, Deserialize)]
struct PriorMeta {
    seed: u64,
    component_std: f64,
}

pub fn save_prior(path: &Path, prior: &GmmPrior) -> Result<(), VecIoError> {
    let n = prior.dim();
    let mut arr = DMatrix::zeros(prior.k(), n);
    for (k, mu) in prior.means.iter().enumerate() {
        for j in 0..n {
            arr[(k, j)] = mu[j];
        }
    }
    write_array(path, MAGIC_PRIOR, &arr)?;
    let meta = PriorMeta {
        seed: prior.seed,
        component_std: prior.component_std,
    };
    fs::write(sidecar_path(path), serde_json::to_vec_pretty(&meta)?)?;
    Ok(())
}

pub fn load_prior(path: &Path) -> Result<GmmPrior, VecIoError> {
    let arr = read_array(path, MAGIC_PRIOR)?;
    let meta: PriorMeta = serde_json::from_slice(&fs::read(sidecar_path(path))?)?;
    let means = (0..arr.nrows())
        .map(|k| Latent::from_row_slice(arr.row(k).transpose().as_slice()))
        .collect();
    GmmPrior::from_means(means, meta.component_std, meta.seed)
        .map_err(|e| VecIoError::Corrupt(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sensing::gen_secret_matrix;
    use tempfile::tempdir;

    #[test]
    fn matrix_round_trip_recomputes_factorization() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("key.csga");
        let a = gen_secret_matrix(5, 16, 0.5).unwrap();
        save_secret_matrix(&path, &a).unwrap();
        let b = load_secret_matrix(&path).unwrap();
        assert_eq!(a.entries().as_slice(), b.entries().as_slice());
        assert_eq!(a.seed(), b.seed());
        assert_eq!(a.cs_ratio(), b.cs_ratio());
        assert_eq!(a.chol_gram_l().as_slice(), b.chol_gram_l().as_slice());
    }

    #[test]
    fn latent_and_prior_round_trip() {
        let dir = tempdir().unwrap();
        let z = Latent::from_row_slice(&[1.5, -2.25, 0.0, 1e-300]);
        let zp = dir.path().join("z.csgl");
        save_latent(&zp, &z).unwrap();
        assert_eq!(load_latent(&zp).unwrap(), z);

        let prior = GmmPrior::generate(3, 4, 8, 0.3).unwrap();
        let pp = dir.path().join("prior.csgp");
        save_prior(&pp, &prior).unwrap();
        let loaded = load_prior(&pp).unwrap();
        assert_eq!(loaded.k(), 4);
        assert_eq!(loaded.component_std, 0.3);
        for (a, b) in prior.means.iter().zip(&loaded.means) {
            assert_eq!(a.as_slice(), b.as_slice());
        }
    }

    #[test]
    fn wrong_magic_rejected() {
        let dir = tempdir().unwrap();
        let z = Latent::from_row_slice(&[1.0]);
        let path = dir.path().join("z.bin");
        save_latent(&path, &z).unwrap();
        match read_array(&path, MAGIC_MATRIX) {
            Err(VecIoError::BadMagic { .. }) => {}
            other => panic!("expected BadMagic, got {other:?}"),
        }
    }

    #[test]
    fn truncated_payload_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("bad.csgl");
        let z = Latent::from_row_slice(&[1.0, 2.0, 3.0]);
        save_latent(&path, &z).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 4]).unwrap();
        assert!(matches!(
            read_array(&path, MAGIC_LATENT),
            Err(VecIoError::Corrupt(_))
        ));
    }
}
