//! VDSM trained-module files.
//!
//! `"VDSM" | version u32 = 1 | header_len u64 | JSON header | parameters`,
//! little-endian. The header is `{d, mode, tau, seed, epochs}`; parameters are
//! `f32` in field order (ca_w1, ca_w2, mlp_w1, mlp_b1, mlp_w2, mlp_b2,
//! ln_gain, ln_bias), matrices row-major.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{ClusterError, ClusterModuleParams};
use crate::semantic_logits::LogitsMode;

pub const MODULE_MAGIC: &[u8; 4] = b"VDSM";
const MODULE_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModuleMeta {
    pub d: usize,
    pub mode: LogitsMode,
    pub tau: f64,
    pub seed: u64,
    pub epochs: usize,
}

fn put_matrix(buf: &mut Vec<u8>, m: &DMatrix<f64>) {
    for i in 0..m.nrows() {
        for &x in m.row(i).iter() {
            buf.extend_from_slice(&(x as f32).to_le_bytes());
        }
    }
}

fn put_vector(buf: &mut Vec<u8>, v: &DVector<f64>) {
    for &x in v.iter() {
        buf.extend_from_slice(&(x as f32).to_le_bytes());
    }
}

pub fn encode_module(
    params: &ClusterModuleParams,
    meta: &ModuleMeta,
) -> Result<Vec<u8>, ClusterError> {
    if meta.d != params.dim() {
        return Err(ClusterError::ShapeMismatch(format!(
            "meta d={} but params d={}",
            meta.d,
            params.dim()
        )));
    }
    let header = serde_json::to_vec(meta).map_err(|e| ClusterError::Header(e.to_string()))?;
    let mut buf = Vec::with_capacity(16 + header.len() + 4 * params.param_count());
    buf.extend_from_slice(MODULE_MAGIC);
    buf.extend_from_slice(&MODULE_VERSION.to_le_bytes());
    buf.extend_from_slice(&(header.len() as u64).to_le_bytes());
    buf.extend_from_slice(&header);
    put_matrix(&mut buf, &params.ca_w1);
    put_matrix(&mut buf, &params.ca_w2);
    put_matrix(&mut buf, &params.mlp_w1);
    put_vector(&mut buf, &params.mlp_b1);
    put_matrix(&mut buf, &params.mlp_w2);
    put_vector(&mut buf, &params.mlp_b2);
    put_vector(&mut buf, &params.ln_gain);
    put_vector(&mut buf, &params.ln_bias);
    Ok(buf)
}

pub fn write_module(
    path: &Path,
    params: &ClusterModuleParams,
    meta: &ModuleMeta,
) -> Result<(), ClusterError> {
    std::fs::write(path, encode_module(params, meta)?)?;
    Ok(())
}

pub fn read_module(path: &Path) -> Result<(ClusterModuleParams, ModuleMeta), ClusterError> {
    decode_module(&std::fs::read(path)?)
}

pub fn decode_module(bytes: &[u8]) -> Result<(ClusterModuleParams, ModuleMeta), ClusterError> {
    let truncated = |expected: u64| ClusterError::Truncated {
        expected,
        actual: bytes.len() as u64,
    };
    if bytes.len() < 4 {
        return Err(truncated(16));
    }
    if &bytes[..4] != MODULE_MAGIC {
        return Err(ClusterError::BadMagic {
            found: [bytes[0], bytes[1], bytes[2], bytes[3]],
        });
    }
    if bytes.len() < 16 {
        return Err(truncated(16));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != MODULE_VERSION {
        return Err(ClusterError::UnsupportedVersion(version));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
    let header_end = 16u64.saturating_add(header_len);
    if (bytes.len() as u64) < header_end {
        return Err(truncated(header_end));
    }
    let meta: ModuleMeta = serde_json::from_slice(&bytes[16..header_end as usize])
        .map_err(|e| ClusterError::Header(e.to_string()))?;

    let mut params = ClusterModuleParams::zeros(meta.d)?;
    let expected = header_end + 4 * params.param_count() as u64;
    if (bytes.len() as u64) < expected {
        return Err(truncated(expected));
    }
    if (bytes.len() as u64) > expected {
        return Err(ClusterError::ShapeMismatch(format!(
            "{} trailing bytes",
            bytes.len() as u64 - expected
        )));
    }

    let mut values = bytes[header_end as usize..]
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])));
    let mut next = || values.next().expect("length checked above");
    for m in [&mut params.ca_w1, &mut params.ca_w2, &mut params.mlp_w1] {
        fill_matrix(m, &mut next);
    }
    params.mlp_b1.iter_mut().for_each(|x| *x = next());
    fill_matrix(&mut params.mlp_w2, &mut next);
    for v in [&mut params.mlp_b2, &mut params.ln_gain, &mut params.ln_bias] {
        v.iter_mut().for_each(|x| *x = next());
    }
    if !params.is_finite() {
        return Err(ClusterError::NonFinite("module parameters"));
    }
    Ok((params, meta))
}

fn fill_matrix(m: &mut DMatrix<f64>, next: &mut impl FnMut() -> f64) {
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            m[(i, j)] = next();
        }
    }
}
