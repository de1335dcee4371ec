//! Similarity-based logits and the matrix-multiplication baseline.
//!
//! `logits[i] = cos(b_i, r)` over all semantic bases, versus the usual
//! `logits = r · W`. Both can be passed through [`exp_transform`] (the `*Exp`
//! modes) before normalisation.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::repr_store::ReprBundle;
use crate::semantic_basis::{self, Aggregation, BasisError, SemanticBases};

#[derive(Debug, Error)]
pub enum LogitsError {
    #[error("zero-norm vector has no direction")]
    ZeroVector,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("mode {0} cannot be used here")]
    InvalidMode(LogitsMode),
    #[error(transparent)]
    Basis(#[from] BasisError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LogitsMode {
    /// Cosine similarity against every semantic basis.
    SimAll,
    /// `r · W`.
    MatMul,
    /// Cosine against the ground-truth class basis only; training only.
    SimGT,
    SimAllExp,
    MatMulExp,
}

impl LogitsMode {
    pub const ALL: [LogitsMode; 5] = [
        Self::SimAll,
        Self::MatMul,
        Self::SimGT,
        Self::SimAllExp,
        Self::MatMulExp,
    ];

    /// Modes usable for prediction (everything but `SimGT`).
    pub const PREDICTIVE: [LogitsMode; 4] =
        [Self::SimAll, Self::MatMul, Self::SimAllExp, Self::MatMulExp];

    pub fn name(self) -> &'static str {
        match self {
            Self::SimAll => "sim-all",
            Self::MatMul => "mat-mul",
            Self::SimGT => "sim-gt",
            Self::SimAllExp => "sim-all-exp",
            Self::MatMulExp => "mat-mul-exp",
        }
    }

    pub fn is_similarity(self) -> bool {
        matches!(self, Self::SimAll | Self::SimGT | Self::SimAllExp)
    }

    pub fn is_exp(self) -> bool {
        matches!(self, Self::SimAllExp | Self::MatMulExp)
    }
}

impl fmt::Display for LogitsMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LogitsMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| format!("unknown logits mode {s:?} (expected one of sim-all, mat-mul, sim-gt, sim-all-exp, mat-mul-exp)"))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbDist {
    pub probs: Vec<f64>,
    pub temperature: f64,
}

impl ProbDist {
    pub fn support_size(&self) -> usize {
        self.probs.len()
    }
}

fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64, LogitsError> {
    if a.len() != b.len() {
        return Err(LogitsError::ShapeMismatch(format!(
            "lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(LogitsError::ZeroVector);
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

pub fn sim_logits(r: &[f64], bases: &SemanticBases) -> Result<Vec<f64>, LogitsError> {
    if r.len() != bases.dim() {
        return Err(LogitsError::ShapeMismatch(format!(
            "r has {} dims, bases {}",
            r.len(),
            bases.dim()
        )));
    }
    (0..bases.vocab_size())
        .map(|i| cosine(&bases.row(i), r))
        .collect()
}

/// `r · W` for a d x v head.
pub fn mm_logits(r: &[f64], w: &DMatrix<f64>) -> Result<Vec<f64>, LogitsError> {
    if r.len() != w.nrows() {
        return Err(LogitsError::ShapeMismatch(format!(
            "r has {} dims, W has {} rows",
            r.len(),
            w.nrows()
        )));
    }
    Ok((0..w.ncols())
        .map(|j| dot(r, w.column(j).as_slice()))
        .collect())
}

/// `exp(z_i - max z) / Σ_j exp(z_j - max z)`.
pub fn exp_transform(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let total: f64 = out.iter().sum();
    for x in &mut out {
        *x /= total;
    }
    out
}

/// Softmax of `tau · logits`.
pub fn to_probs(logits: &[f64], tau: f64) -> ProbDist {
    let scaled: Vec<f64> = logits.iter().map(|z| tau * z).collect();
    ProbDist {
        probs: exp_transform(&scaled),
        temperature: tau,
    }
}

/// Index of the largest score, lowest index on ties.
pub fn argmax(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate().skip(1) {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

/// Argmax over `primary`, breaking exact ties by `secondary`, then by index.
fn argmax_tiebreak(primary: &[f64], secondary: &[f64]) -> usize {
    let mut best = 0;
    for i in 1..primary.len() {
        if primary[i] > primary[best]
            || (primary[i] == primary[best] && secondary[i] > secondary[best])
        {
            best = i;
        }
    }
    best
}

/// Per-class scoring over the verbalizer label space.
///
/// Similarity modes score `cos(class_basis(c), r)`; matmul modes score the mean
/// of `(r · W)[t]` over the class tokens, which is `r` dotted with the mean of
/// those head columns.
#[derive(Debug, Clone)]
pub struct ClassScorer {
    /// C x d, unit rows.
    unit_class_bases: DMatrix<f64>,
    /// C x d, mean head column per class.
    head_class_columns: DMatrix<f64>,
}

impl ClassScorer {
    pub fn new(bundle: &ReprBundle, bases: &SemanticBases) -> Result<Self, LogitsError> {
        Self::with_aggregation(bundle, bases, Aggregation::Mean)
    }

    pub fn with_aggregation(
        bundle: &ReprBundle,
        bases: &SemanticBases,
        aggregation: Aggregation,
    ) -> Result<Self, LogitsError> {
        let w = bundle.lm_head.to_dmatrix();
        Self::from_parts(&w, bases, &bundle.verbalizer, bundle.n_classes, aggregation)
    }

    pub fn from_parts(
        w: &DMatrix<f64>,
        bases: &SemanticBases,
        verbalizer: &crate::Verbalizer,
        n_classes: usize,
        aggregation: Aggregation,
    ) -> Result<Self, LogitsError> {
        if w.nrows() != bases.dim() {
            return Err(LogitsError::ShapeMismatch(format!(
                "head has {} rows, bases {} dims",
                w.nrows(),
                bases.dim()
            )));
        }
        let mut unit =
            semantic_basis::class_basis_matrix(bases, verbalizer, n_classes, aggregation)?;
        for mut row in unit.row_iter_mut() {
            let n = row.norm();
            if n == 0.0 {
                return Err(LogitsError::ZeroVector);
            }
            row /= n;
        }
        let mut cols = DMatrix::<f64>::zeros(n_classes, w.nrows());
        for c in 0..n_classes {
            let tokens = &verbalizer[&c];
            let used = match aggregation {
                Aggregation::Mean => &tokens[..],
                Aggregation::FirstToken => &tokens[..1],
            };
            for &t in used {
                for j in 0..w.nrows() {
                    cols[(c, j)] += w[(j, t)];
                }
            }
            cols.row_mut(c).scale_mut(1.0 / used.len() as f64);
        }
        Ok(Self {
            unit_class_bases: unit,
            head_class_columns: cols,
        })
    }

    pub fn n_classes(&self) -> usize {
        self.unit_class_bases.nrows()
    }

    /// Raw class scores before any exp transform.
    pub fn class_scores(&self, r: &[f64], mode: LogitsMode) -> Result<Vec<f64>, LogitsError> {
        if r.len() != self.unit_class_bases.ncols() {
            return Err(LogitsError::ShapeMismatch(format!(
                "r has {} dims, expected {}",
                r.len(),
                self.unit_class_bases.ncols()
            )));
        }
        let rv = DVector::from_column_slice(r);
        match mode {
            LogitsMode::SimGT => Err(LogitsError::InvalidMode(mode)),
            LogitsMode::SimAll | LogitsMode::SimAllExp => {
                let n = rv.norm();
                if n == 0.0 {
                    return Err(LogitsError::ZeroVector);
                }
                let s = &self.unit_class_bases * rv / n;
                Ok(s.iter().map(|x| x.clamp(-1.0, 1.0)).collect())
            }
            LogitsMode::MatMul | LogitsMode::MatMulExp => {
                Ok((&self.head_class_columns * rv).as_slice().to_vec())
            }
        }
    }

    pub fn predict(&self, r: &[f64], mode: LogitsMode) -> Result<usize, LogitsError> {
        let raw = self.class_scores(r, mode)?;
        if mode.is_exp() {
            // exp can round near-equal scores to the same value; fall back to the raw order.
            Ok(argmax_tiebreak(&exp_transform(&raw), &raw))
        } else {
            Ok(argmax(&raw))
        }
    }

    pub fn predict_all(
        &self,
        reps: &DMatrix<f64>,
        mode: LogitsMode,
    ) -> Result<Vec<usize>, LogitsError> {
        (0..reps.nrows())
            .map(|i| {
                let r: Vec<f64> = reps.row(i).iter().copied().collect();
                self.predict(&r, mode)
            })
            .collect()
    }
}

/// Class prediction restricted to the label space; builds a [`ClassScorer`]
/// per call, so prefer the scorer for batches.
pub fn predict_class(
    r: &[f64],
    bundle: &ReprBundle,
    bases: &SemanticBases,
    mode: LogitsMode,
) -> Result<usize, LogitsError> {
    if mode == LogitsMode::SimGT {
        return Err(LogitsError::InvalidMode(mode));
    }
    ClassScorer::new(bundle, bases)?.predict(r, mode)
}

/// Floating-point operations for one logits computation.
///
/// A cosine costs `6d` (dot product plus both norms); the exp/normalise
/// overhead is not counted.
pub fn estimate_flops(mode: LogitsMode, d: u64, v: u64) -> u64 {
    match mode {
        LogitsMode::SimAll | LogitsMode::SimAllExp => 6 * d * v,
        LogitsMode::MatMul | LogitsMode::MatMulExp => 2 * d * v,
        LogitsMode::SimGT => 6 * d,
    }
}
