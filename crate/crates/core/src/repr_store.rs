//! The VDSR bundle: LM-head, labelled representations and verbalizer.
//!
//! Layout, all integers little-endian, no padding between blocks:
//!
//! ```text
//! "VDSR" | version u32 = 1 | header_len u64 | JSON header (header_len bytes)
//! lm_head     d * v       f32
//! train_reps  n_train * d f32
//! train_labels n_train    u32
//! test_reps   n_test * d  f32
//! test_labels n_test      u32
//! ```
//!
//! Matrices are row-major. The header carries
//! `d, v, n_classes, class_names, verbalizer, n_train, n_test, dtype, layout`.

use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::matrix::Matrix32;
use crate::semantic_basis::{self, BasisError, DEFAULT_RCOND};
use crate::Verbalizer;

pub const BUNDLE_MAGIC: &[u8; 4] = b"VDSR";
pub const BUNDLE_VERSION: u32 = 1;

/// Mixing matrices with a larger condition number are redrawn.
const MAX_MIX_CONDITION: f64 = 1e3;

#[derive(Debug, Error)]
pub enum BundleError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic {found:?}, expected \"VDSR\"")]
    BadMagic { found: [u8; 4] },
    #[error("unsupported bundle version {0}")]
    UnsupportedVersion(u32),
    #[error("truncated file: need {expected} bytes, found {actual}")]
    Truncated { expected: u64, actual: u64 },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("malformed header: {0}")]
    Header(String),
    #[error("invalid bundle: {}", join_violations(.0))]
    Invalid(Vec<Violation>),
    #[error("invalid synthetic spec: {0}")]
    BadSynthSpec(String),
    #[error(transparent)]
    Basis(#[from] BasisError),
}

fn join_violations(v: &[Violation]) -> String {
    v.iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join("; ")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub enum ViolationCode {
    ZeroDimension,
    ClassNameCount,
    MissingVerbalizer,
    UnknownVerbalizerClass,
    EmptyVerbalizer,
    TokenOutOfRange,
    LabelOutOfRange,
    ShapeMismatch,
    NonFinite,
    EmptySplit,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub code: ViolationCode,
    pub detail: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}: {}", self.code, self.detail)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReprBundle {
    pub d: usize,
    pub v: usize,
    pub n_classes: usize,
    pub class_names: Vec<String>,
    pub verbalizer: Verbalizer,
    /// d x v
    pub lm_head: Matrix32,
    /// n_train x d
    pub train_reps: Matrix32,
    pub train_labels: Vec<usize>,
    /// n_test x d
    pub test_reps: Matrix32,
    pub test_labels: Vec<usize>,
}

impl ReprBundle {
    pub fn n_train(&self) -> usize {
        self.train_labels.len()
    }

    pub fn n_test(&self) -> usize {
        self.test_labels.len()
    }

    /// Field-for-field equality with floats compared bit by bit.
    pub fn bit_eq(&self, other: &Self) -> bool {
        self.d == other.d
            && self.v == other.v
            && self.n_classes == other.n_classes
            && self.class_names == other.class_names
            && self.verbalizer == other.verbalizer
            && self.lm_head.bit_eq(&other.lm_head)
            && self.train_reps.bit_eq(&other.train_reps)
            && self.train_labels == other.train_labels
            && self.test_reps.bit_eq(&other.test_reps)
            && self.test_labels == other.test_labels
    }
}

#[derive(Serialize, Deserialize)]
struct Header {
    d: usize,
    v: usize,
    n_classes: usize,
    class_names: Vec<String>,
    verbalizer: Verbalizer,
    n_train: usize,
    n_test: usize,
    dtype: String,
    layout: String,
}

/// Lists every violated invariant; one entry per (invariant, field).
pub fn validate_bundle(b: &ReprBundle) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut push = |code, detail: String| out.push(Violation { code, detail });

    if b.d == 0 || b.v == 0 || b.n_classes == 0 {
        push(
            ViolationCode::ZeroDimension,
            format!("d={}, v={}, n_classes={}", b.d, b.v, b.n_classes),
        );
    }
    if b.class_names.len() != b.n_classes {
        push(
            ViolationCode::ClassNameCount,
            format!(
                "{} class names for {} classes",
                b.class_names.len(),
                b.n_classes
            ),
        );
    }

    let missing: Vec<usize> = (0..b.n_classes)
        .filter(|c| !b.verbalizer.contains_key(c))
        .collect();
    if !missing.is_empty() {
        push(
            ViolationCode::MissingVerbalizer,
            format!("classes {missing:?}"),
        );
    }
    let unknown: Vec<usize> = b
        .verbalizer
        .keys()
        .copied()
        .filter(|&c| c >= b.n_classes)
        .collect();
    if !unknown.is_empty() {
        push(
            ViolationCode::UnknownVerbalizerClass,
            format!("classes {unknown:?}"),
        );
    }
    let empty: Vec<usize> = b
        .verbalizer
        .iter()
        .filter(|(_, t)| t.is_empty())
        .map(|(&c, _)| c)
        .collect();
    if !empty.is_empty() {
        push(ViolationCode::EmptyVerbalizer, format!("classes {empty:?}"));
    }
    let bad_tokens: Vec<usize> = b
        .verbalizer
        .values()
        .flatten()
        .copied()
        .filter(|&t| t >= b.v)
        .collect();
    if !bad_tokens.is_empty() {
        push(
            ViolationCode::TokenOutOfRange,
            format!("tokens {bad_tokens:?} with v={}", b.v),
        );
    }

    let shapes: [(&str, &Matrix32, (usize, usize)); 3] = [
        ("lm_head", &b.lm_head, (b.d, b.v)),
        ("train_reps", &b.train_reps, (b.train_labels.len(), b.d)),
        ("test_reps", &b.test_reps, (b.test_labels.len(), b.d)),
    ];
    for (name, m, want) in shapes {
        if m.shape() != want {
            push(
                ViolationCode::ShapeMismatch,
                format!("{name} is {:?}, expected {want:?}", m.shape()),
            );
        }
        if !m.is_finite() {
            push(ViolationCode::NonFinite, name.to_string());
        }
    }

    for (name, labels) in [
        ("train_labels", &b.train_labels),
        ("test_labels", &b.test_labels),
    ] {
        if labels.is_empty() {
            push(ViolationCode::EmptySplit, name.to_string());
        }
        let bad = labels.iter().filter(|&&l| l >= b.n_classes).count();
        if bad > 0 {
            push(
                ViolationCode::LabelOutOfRange,
                format!("{bad} entries of {name}"),
            );
        }
    }
    out
}

fn to_u32(x: usize, what: &str) -> Result<u32, BundleError> {
    u32::try_from(x).map_err(|_| BundleError::ShapeMismatch(format!("{what} {x} exceeds u32")))
}

/// Serialises a bundle to the exact byte layout written by [`write_bundle`].
pub fn encode_bundle(b: &ReprBundle) -> Result<Vec<u8>, BundleError> {
    let violations = validate_bundle(b);
    if !violations.is_empty() {
        return Err(BundleError::Invalid(violations));
    }
    let header = Header {
        d: b.d,
        v: b.v,
        n_classes: b.n_classes,
        class_names: b.class_names.clone(),
        verbalizer: b.verbalizer.clone(),
        n_train: b.n_train(),
        n_test: b.n_test(),
        dtype: "f32".into(),
        layout: "row-major".into(),
    };
    let header = serde_json::to_vec(&header).map_err(|e| BundleError::Header(e.to_string()))?;

    let floats =
        b.lm_head.as_slice().len() + b.train_reps.as_slice().len() + b.test_reps.as_slice().len();
    let mut buf = Vec::with_capacity(16 + header.len() + 4 * (floats + b.n_train() + b.n_test()));
    buf.extend_from_slice(BUNDLE_MAGIC);
    buf.extend_from_slice(&BUNDLE_VERSION.to_le_bytes());
    buf.extend_from_slice(&(header.len() as u64).to_le_bytes());
    buf.extend_from_slice(&header);

    let put_f32 = |buf: &mut Vec<u8>, m: &Matrix32| {
        for x in m.as_slice() {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    };
    let put_labels = |buf: &mut Vec<u8>, labels: &[usize]| -> Result<(), BundleError> {
        for &l in labels {
            buf.extend_from_slice(&to_u32(l, "label")?.to_le_bytes());
        }
        Ok(())
    };
    put_f32(&mut buf, &b.lm_head);
    put_f32(&mut buf, &b.train_reps);
    put_labels(&mut buf, &b.train_labels)?;
    put_f32(&mut buf, &b.test_reps);
    put_labels(&mut buf, &b.test_labels)?;
    Ok(buf)
}

pub fn write_bundle(b: &ReprBundle, path: &Path) -> Result<(), BundleError> {
    let bytes = encode_bundle(b)?;
    let mut out = BufWriter::new(File::create(path)?);
    out.write_all(&bytes)?;
    out.flush()?;
    Ok(())
}

pub fn read_bundle(path: &Path) -> Result<ReprBundle, BundleError> {
    decode_bundle(&std::fs::read(path)?)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> &'a [u8] {
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        s
    }

    fn f32s(&mut self, n: usize) -> Vec<f32> {
        self.take(4 * n)
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect()
    }

    fn u32s(&mut self, n: usize) -> Vec<usize> {
        self.take(4 * n)
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]) as usize)
            .collect()
    }
}

pub fn decode_bundle(bytes: &[u8]) -> Result<ReprBundle, BundleError> {
    let truncated = |expected: u64| BundleError::Truncated {
        expected,
        actual: bytes.len() as u64,
    };
    if bytes.len() < 4 {
        return Err(truncated(16));
    }
    if &bytes[..4] != BUNDLE_MAGIC {
        return Err(BundleError::BadMagic {
            found: [bytes[0], bytes[1], bytes[2], bytes[3]],
        });
    }
    if bytes.len() < 16 {
        return Err(truncated(16));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != BUNDLE_VERSION {
        return Err(BundleError::UnsupportedVersion(version));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
    let header_end = 16u64
        .checked_add(header_len)
        .ok_or_else(|| truncated(u64::MAX))?;
    if (bytes.len() as u64) < header_end {
        return Err(truncated(header_end));
    }
    let header: Header = serde_json::from_slice(&bytes[16..header_end as usize])
        .map_err(|e| BundleError::Header(e.to_string()))?;
    if header.dtype != "f32" {
        return Err(BundleError::Header(format!(
            "unsupported dtype {:?}",
            header.dtype
        )));
    }
    if header.layout != "row-major" {
        return Err(BundleError::Header(format!(
            "unsupported layout {:?}",
            header.layout
        )));
    }

    let (d, v) = (header.d as u64, header.v as u64);
    let (n_train, n_test) = (header.n_train as u64, header.n_test as u64);
    let payload = [
        d.checked_mul(v),
        n_train.checked_mul(d),
        Some(n_train),
        n_test.checked_mul(d),
        Some(n_test),
    ]
    .into_iter()
    .try_fold(0u64, |acc, n| {
        n.and_then(|n| n.checked_mul(4))
            .and_then(|n| acc.checked_add(n))
    })
    .ok_or_else(|| BundleError::ShapeMismatch("header dimensions overflow".into()))?;
    let expected = header_end
        .checked_add(payload)
        .ok_or_else(|| BundleError::ShapeMismatch("header dimensions overflow".into()))?;
    if (bytes.len() as u64) < expected {
        return Err(truncated(expected));
    }
    if (bytes.len() as u64) > expected {
        return Err(BundleError::ShapeMismatch(format!(
            "{} trailing bytes after declared payload",
            bytes.len() as u64 - expected
        )));
    }

    let mut cur = Cursor {
        bytes,
        pos: header_end as usize,
    };
    let (d, v, n_train, n_test) = (header.d, header.v, header.n_train, header.n_test);
    let shape = |e: crate::matrix::MatrixShapeError| BundleError::ShapeMismatch(e.to_string());
    let lm_head = Matrix32::from_vec(d, v, cur.f32s(d * v)).map_err(shape)?;
    let train_reps = Matrix32::from_vec(n_train, d, cur.f32s(n_train * d)).map_err(shape)?;
    let train_labels = cur.u32s(n_train);
    let test_reps = Matrix32::from_vec(n_test, d, cur.f32s(n_test * d)).map_err(shape)?;
    let test_labels = cur.u32s(n_test);

    let bundle = ReprBundle {
        d,
        v,
        n_classes: header.n_classes,
        class_names: header.class_names,
        verbalizer: header.verbalizer,
        lm_head,
        train_reps,
        train_labels,
        test_reps,
        test_labels,
    };
    for (name, m) in [
        ("lm_head", &bundle.lm_head),
        ("train_reps", &bundle.train_reps),
        ("test_reps", &bundle.test_reps),
    ] {
        if !m.is_finite() {
            return Err(BundleError::NonFinite(name));
        }
    }
    let violations = validate_bundle(&bundle);
    if violations.is_empty() {
        Ok(bundle)
    } else {
        Err(BundleError::Invalid(violations))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub seed: u64,
    pub d: usize,
    pub v: usize,
    pub n_classes: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub noise_sigma: f64,
    /// Apply a hidden random invertible d x d mixing matrix to every sample.
    pub mix: bool,
}

impl SynthSpec {
    /// The fixture used throughout the acceptance suite.
    pub fn acceptance_fixture() -> Self {
        Self {
            seed: 42,
            d: 64,
            v: 200,
            n_classes: 5,
            n_train: 1000,
            n_test: 200,
            noise_sigma: 0.1,
            mix: true,
        }
    }

    pub fn validate(&self) -> Result<(), BundleError> {
        let bad = |m: String| Err(BundleError::BadSynthSpec(m));
        if self.d < 2 {
            return bad(format!("d must be >= 2, got {}", self.d));
        }
        if self.v == 0 || self.n_classes == 0 || self.n_train == 0 || self.n_test == 0 {
            return bad("v, n_classes, n_train and n_test must be positive".into());
        }
        if self.n_classes > self.v {
            return bad(format!("n_classes {} exceeds v {}", self.n_classes, self.v));
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return bad(format!(
                "noise_sigma must be finite and >= 0, got {}",
                self.noise_sigma
            ));
        }
        Ok(())
    }
}

fn standard_normal(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    // Drawn in row-major order so the stream layout matches the file layout.
    let data: Vec<f64> = (0..rows * cols)
        .map(|_| rng.sample(StandardNormal))
        .collect();
    DMatrix::from_row_slice(rows, cols, &data)
}

fn condition_number(a: &DMatrix<f64>) -> f64 {
    let s = a.clone().singular_values();
    let max = s.iter().copied().fold(0.0, f64::max);
    let min = s.iter().copied().fold(f64::INFINITY, f64::min);
    if min == 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

/// Deterministic synthetic bundle.
///
/// Draws a standard-normal head, computes its semantic bases, gives each class
/// one distinct token `t_c` and samples `r = A · b_{t_c} + ε`. `A = I + 0.5 G`
/// (redrawn while its condition number exceeds 1e3) when `mix` is set, `I`
/// otherwise. Bases are computed from the `f32`-rounded head, so a zero-noise
/// unmixed bundle stores exactly the `f32` bases its own head produces.
/// Head, class tokens and the noiseless class centres `A · b_t`, drawn from `rng`.
fn synthetic_model(
    spec: &SynthSpec,
    rng: &mut ChaCha8Rng,
) -> Result<(Matrix32, Vec<usize>, Vec<DVector<f64>>), BundleError> {
    let (d, v, c) = (spec.d, spec.v, spec.n_classes);
    let lm_head = Matrix32::from_dmatrix(&standard_normal(rng, d, v));
    let bases = semantic_basis::bases_from_head(&lm_head.to_dmatrix(), DEFAULT_RCOND)?;

    let tokens = rand::seq::index::sample(rng, v, c).into_vec();
    let mix = if spec.mix {
        loop {
            let a = DMatrix::<f64>::identity(d, d) + standard_normal(rng, d, d) * 0.5;
            if condition_number(&a) <= MAX_MIX_CONDITION {
                break a;
            }
        }
    } else {
        DMatrix::identity(d, d)
    };
    let centres = tokens
        .iter()
        .map(|&t| &mix * bases.bases.row(t).transpose())
        .collect();
    Ok((lm_head, tokens, centres))
}

/// The noiseless class centres of [`gen_synthetic`], one row per class.
///
/// With isotropic noise and uniform labels, assigning each point to the
/// nearest centre is the Bayes classifier for the generated data.
pub fn synthetic_class_means(spec: &SynthSpec) -> Result<DMatrix<f64>, BundleError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (_, _, centres) = synthetic_model(spec, &mut rng)?;
    Ok(DMatrix::from_fn(spec.n_classes, spec.d, |c, j| {
        centres[c][j]
    }))
}

pub fn gen_synthetic(spec: &SynthSpec) -> Result<ReprBundle, BundleError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (d, c) = (spec.d, spec.n_classes);
    let (lm_head, tokens, centres) = synthetic_model(spec, &mut rng)?;
    let mut verbalizer = Verbalizer::new();
    for (class, &t) in tokens.iter().enumerate() {
        verbalizer.insert(class, vec![t]);
    }

    let mut split = |n: usize| {
        let mut reps = Matrix32::zeros(n, d);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let label = rng.random_range(0..c);
            for j in 0..d {
                let eps: f64 = rng.sample(StandardNormal);
                reps.set(i, j, (centres[label][j] + spec.noise_sigma * eps) as f32);
            }
            labels.push(label);
        }
        (reps, labels)
    };
    let (train_reps, train_labels) = split(spec.n_train);
    let (test_reps, test_labels) = split(spec.n_test);

    Ok(ReprBundle {
        d,
        v: spec.v,
        n_classes: c,
        class_names: (0..c).map(|i| format!("class_{i}")).collect(),
        verbalizer,
        lm_head,
        train_reps,
        train_labels,
        test_reps,
        test_labels,
    })
}
