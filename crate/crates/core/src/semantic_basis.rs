//! Semantic bases: the latent vector of every vocabulary token.
//!
//! For an LM-head `W` (d x v) the basis of token `i` is `e_i · W⁺`, i.e. row
//! `i` of the Moore-Penrose pseudoinverse. It is the least-squares
//! representation whose logits through `W` reproduce the onehot vector `e_i`.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::repr_store::ReprBundle;
use crate::Verbalizer;

/// Relative singular-value cutoff used when the caller has no opinion.
pub const DEFAULT_RCOND: f64 = 1e-10;

const SVD_MAX_ITER: usize = 10_000;

#[derive(Debug, Error)]
pub enum BasisError {
    #[error("SVD did not converge for a {rows}x{cols} matrix")]
    SvdNoConvergence { rows: usize, cols: usize },
    #[error("matrix is empty")]
    Empty,
    #[error("matrix contains non-finite entries")]
    NonFinite,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("class {0} has no verbalizer entry")]
    UnknownClass(usize),
    #[error("token {token} is outside the {v}-token basis set")]
    TokenOutOfRange { token: usize, v: usize },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BasisSource {
    HeadPseudoinverse,
    EmbeddingRows,
}

/// How multi-token labels are collapsed into one class basis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Aggregation {
    #[default]
    Mean,
    FirstToken,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SemanticBases {
    /// v x d, row `i` belongs to vocabulary token `i`.
    pub bases: DMatrix<f64>,
    pub source: BasisSource,
    pub rcond: f64,
}

impl SemanticBases {
    pub fn vocab_size(&self) -> usize {
        self.bases.nrows()
    }

    pub fn dim(&self) -> usize {
        self.bases.ncols()
    }

    pub fn row(&self, token: usize) -> Vec<f64> {
        self.bases.row(token).iter().copied().collect()
    }

    /// Writes the bases as raw row-major little-endian `f32` plus a one-line
    /// JSON sidecar at `<path>.json`.
    pub fn export(&self, path: &Path) -> Result<(), BasisError> {
        let mut out = BufWriter::new(File::create(path)?);
        for i in 0..self.bases.nrows() {
            for &x in self.bases.row(i).iter() {
                out.write_all(&(x as f32).to_le_bytes())?;
            }
        }
        out.flush()?;

        let sidecar = serde_json::json!({
            "v": self.vocab_size(),
            "d": self.dim(),
            "source": self.source,
            "rcond": self.rcond,
        });
        let mut name = path.as_os_str().to_owned();
        name.push(".json");
        std::fs::write(name, format!("{sidecar}\n"))?;
        Ok(())
    }
}

/// Moore-Penrose pseudoinverse via SVD.
///
/// Singular values `σ <= rcond · σ_max` are treated as zero, so rank-deficient
/// inputs give the minimum-norm least-squares inverse.
pub fn pseudoinverse(w: &DMatrix<f64>, rcond: f64) -> Result<DMatrix<f64>, BasisError> {
    if w.is_empty() {
        return Err(BasisError::Empty);
    }
    if w.iter().any(|x| !x.is_finite()) {
        return Err(BasisError::NonFinite);
    }
    let (rows, cols) = w.shape();
    let svd = w
        .clone()
        .try_svd(true, true, f64::EPSILON, SVD_MAX_ITER)
        .ok_or(BasisError::SvdNoConvergence { rows, cols })?;
    let u = svd.u.as_ref().expect("requested U");
    let v_t = svd.v_t.as_ref().expect("requested V^T");
    let sigma = &svd.singular_values;

    let sigma_max = sigma.iter().copied().fold(0.0_f64, f64::max);
    let cutoff = rcond * sigma_max;

    // W⁺ = V Σ⁺ Uᵀ, accumulated one retained singular triple at a time.
    let mut pinv = DMatrix::<f64>::zeros(cols, rows);
    for (k, &s) in sigma.iter().enumerate() {
        if s > cutoff && s > 0.0 {
            let v_k = v_t.row(k).transpose();
            let u_k = u.column(k);
            pinv.ger(1.0 / s, &v_k, &u_k, 1.0);
        }
    }
    Ok(pinv)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PenroseReport {
    /// `‖W Wp W − W‖∞`, `‖Wp W Wp − Wp‖∞`, `‖(W Wp)ᵀ − W Wp‖∞`, `‖(Wp W)ᵀ − Wp W‖∞`.
    pub residuals: [f64; 4],
    pub tol: f64,
    pub passed: bool,
}

impl PenroseReport {
    pub fn max_residual(&self) -> f64 {
        self.residuals.iter().copied().fold(0.0, f64::max)
    }
}

fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0_f64, |acc, x| acc.max(x.abs()))
}

pub fn check_penrose(
    w: &DMatrix<f64>,
    wp: &DMatrix<f64>,
    tol: f64,
) -> Result<PenroseReport, BasisError> {
    if wp.nrows() != w.ncols() || wp.ncols() != w.nrows() {
        return Err(BasisError::ShapeMismatch(format!(
            "W is {}x{}, Wp is {}x{}",
            w.nrows(),
            w.ncols(),
            wp.nrows(),
            wp.ncols()
        )));
    }
    let w_wp = w * wp;
    let wp_w = wp * w;
    let residuals = [
        max_abs(&(&w_wp * w - w)),
        max_abs(&(&wp_w * wp - wp)),
        max_abs(&(w_wp.transpose() - &w_wp)),
        max_abs(&(wp_w.transpose() - &wp_w)),
    ];
    let passed = residuals.iter().all(|r| *r < tol);
    Ok(PenroseReport {
        residuals,
        tol,
        passed,
    })
}

/// Semantic bases of the bundle's LM-head: row `i` is `e_i · W⁺`.
pub fn head_bases(bundle: &ReprBundle, rcond: f64) -> Result<SemanticBases, BasisError> {
    bases_from_head(&bundle.lm_head.to_dmatrix(), rcond)
}

pub fn bases_from_head(w: &DMatrix<f64>, rcond: f64) -> Result<SemanticBases, BasisError> {
    // e_i · W⁺ selects row i of W⁺, so the pseudoinverse already is the basis table.
    let bases = pseudoinverse(w, rcond)?;
    Ok(SemanticBases {
        bases,
        source: BasisSource::HeadPseudoinverse,
        rcond,
    })
}

/// Bases on the input side: onehot times the embedding matrix is just its rows.
pub fn embedding_bases(embedding: &DMatrix<f64>) -> SemanticBases {
    SemanticBases {
        bases: embedding.clone(),
        source: BasisSource::EmbeddingRows,
        rcond: 0.0,
    }
}

pub fn class_basis(
    bases: &SemanticBases,
    verbalizer: &Verbalizer,
    class_id: usize,
) -> Result<DVector<f64>, BasisError> {
    class_basis_with(bases, verbalizer, class_id, Aggregation::Mean)
}

pub fn class_basis_with(
    bases: &SemanticBases,
    verbalizer: &Verbalizer,
    class_id: usize,
    aggregation: Aggregation,
) -> Result<DVector<f64>, BasisError> {
    let tokens = verbalizer
        .get(&class_id)
        .filter(|t| !t.is_empty())
        .ok_or(BasisError::UnknownClass(class_id))?;
    let v = bases.vocab_size();
    if let Some(&token) = tokens.iter().find(|&&t| t >= v) {
        return Err(BasisError::TokenOutOfRange { token, v });
    }
    let used = match aggregation {
        Aggregation::Mean => &tokens[..],
        Aggregation::FirstToken => &tokens[..1],
    };
    let mut acc = DVector::<f64>::zeros(bases.dim());
    for &t in used {
        acc += bases.bases.row(t).transpose();
    }
    Ok(acc / used.len() as f64)
}

/// Class bases for every class `0..n_classes`, stacked as rows.
pub fn class_basis_matrix(
    bases: &SemanticBases,
    verbalizer: &Verbalizer,
    n_classes: usize,
    aggregation: Aggregation,
) -> Result<DMatrix<f64>, BasisError> {
    let mut out = DMatrix::<f64>::zeros(n_classes, bases.dim());
    for c in 0..n_classes {
        let b = class_basis_with(bases, verbalizer, c, aggregation)?;
        out.row_mut(c).copy_from(&b.transpose());
    }
    Ok(out)
}
