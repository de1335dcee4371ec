//! Neural clustering module `λ(r) = LN(MLP(r ⊙ CA(r)))`.
//!
//! * `CA(r) = sigmoid(Bn(avg r) + Bn(max r))` with a shared bias-free
//!   bottleneck `Bn(x) = relu(x · W_down) · W_up` (d → d/16 → d). Each
//!   representation is a 1 x d map with singleton spatial extent, so both
//!   pools return `r` and the gate is `sigmoid(2 · Bn(r))`.
//! * `MLP` is d → 2d → d with relu.
//! * `LN` normalises over the d features (epsilon 1e-5) with learnable affine.
//!
//! Weight matrices hold `4d² + d²/8` parameters; biases and the LN affine add
//! `5d` on top.
//!
//! Everything uses the row-vector convention `x · W`.

mod gradcheck;
mod objective;
mod persist;
mod train;

pub use gradcheck::{
    finite_difference_check, numeric_gradient, random_instance, relative_error, relu_margin,
    GradCheckInstance, GradCheckReport, MIN_RELU_MARGIN, REL_ERROR_FLOOR,
};
pub use objective::{grad, loss, LossSupport, Objective};
pub use persist::{
    decode_module, encode_module, read_module, write_module, ModuleMeta, MODULE_MAGIC,
};
pub use train::{train, ModeAccuracy, Optimizer, TrainConfig, TrainReport};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::semantic_basis::BasisError;
use crate::semantic_logits::LogitsError;

pub const LN_EPS: f64 = 1e-5;
pub const BOTTLENECK_RATIO: usize = 16;

#[derive(Debug, Error)]
pub enum ClusterError {
    #[error("dimension {0} is not divisible by 16")]
    IndivisibleDim(usize),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("module output has zero norm")]
    ZeroVector,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("empty batch")]
    EmptyBatch,
    #[error("label {label} out of range for {n_classes} classes")]
    LabelOutOfRange { label: usize, n_classes: usize },
    #[error("training diverged at step {step}")]
    DivergedAtStep { step: usize },
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("bad magic {found:?}, expected \"VDSM\"")]
    BadMagic { found: [u8; 4] },
    #[error("unsupported module version {0}")]
    UnsupportedVersion(u32),
    #[error("truncated module file: need {expected} bytes, found {actual}")]
    Truncated { expected: u64, actual: u64 },
    #[error("malformed module header: {0}")]
    Header(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Logits(#[from] LogitsError),
    #[error(transparent)]
    Basis(#[from] BasisError),
}

impl ClusterError {
    /// Errors caused by the numbers rather than the inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Self::NonFinite(_) | Self::DivergedAtStep { .. } | Self::ZeroVector
        ) || matches!(self, Self::Basis(BasisError::SvdNoConvergence { .. }))
    }
}

/// Parameters of the clustering module. Also used as the gradient container.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterModuleParams {
    /// d x d/16
    pub ca_w1: DMatrix<f64>,
    /// d/16 x d
    pub ca_w2: DMatrix<f64>,
    /// d x 2d
    pub mlp_w1: DMatrix<f64>,
    pub mlp_b1: DVector<f64>,
    /// 2d x d
    pub mlp_w2: DMatrix<f64>,
    pub mlp_b2: DVector<f64>,
    pub ln_gain: DVector<f64>,
    pub ln_bias: DVector<f64>,
}

pub type Gradients = ClusterModuleParams;

pub const GROUP_NAMES: [&str; 8] = [
    "ca_w1", "ca_w2", "mlp_w1", "mlp_b1", "mlp_w2", "mlp_b2", "ln_gain", "ln_bias",
];

fn check_dim(d: usize) -> Result<(), ClusterError> {
    if d == 0 || !d.is_multiple_of(BOTTLENECK_RATIO) {
        return Err(ClusterError::IndivisibleDim(d));
    }
    Ok(())
}

impl ClusterModuleParams {
    /// All weights and biases zero, LN gain one.
    pub fn zeros(d: usize) -> Result<Self, ClusterError> {
        check_dim(d)?;
        let k = d / BOTTLENECK_RATIO;
        Ok(Self {
            ca_w1: DMatrix::zeros(d, k),
            ca_w2: DMatrix::zeros(k, d),
            mlp_w1: DMatrix::zeros(d, 2 * d),
            mlp_b1: DVector::zeros(2 * d),
            mlp_w2: DMatrix::zeros(2 * d, d),
            mlp_b2: DVector::zeros(d),
            ln_gain: DVector::from_element(d, 1.0),
            ln_bias: DVector::zeros(d),
        })
    }

    /// Weights uniform in `±1/sqrt(fan_in)`, drawn row-major in field order.
    pub fn seeded(d: usize, seed: u64) -> Result<Self, ClusterError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = Self::zeros(d)?;
        for m in [&mut p.ca_w1, &mut p.ca_w2, &mut p.mlp_w1, &mut p.mlp_w2] {
            let bound = 1.0 / (m.nrows() as f64).sqrt();
            for i in 0..m.nrows() {
                for j in 0..m.ncols() {
                    m[(i, j)] = rng.random_range(-bound..bound);
                }
            }
        }
        Ok(p)
    }

    pub fn dim(&self) -> usize {
        self.ca_w1.nrows()
    }

    /// Weight-matrix entries only: `4d² + d²/8`.
    pub fn weight_count(&self) -> usize {
        self.ca_w1.len() + self.ca_w2.len() + self.mlp_w1.len() + self.mlp_w2.len()
    }

    pub fn param_count(&self) -> usize {
        self.slices().iter().map(|s| s.len()).sum()
    }

    /// Parameter groups in declared order (storage is nalgebra's column-major).
    pub fn slices(&self) -> [&[f64]; 8] {
        [
            self.ca_w1.as_slice(),
            self.ca_w2.as_slice(),
            self.mlp_w1.as_slice(),
            self.mlp_b1.as_slice(),
            self.mlp_w2.as_slice(),
            self.mlp_b2.as_slice(),
            self.ln_gain.as_slice(),
            self.ln_bias.as_slice(),
        ]
    }

    pub fn slices_mut(&mut self) -> [&mut [f64]; 8] {
        [
            self.ca_w1.as_mut_slice(),
            self.ca_w2.as_mut_slice(),
            self.mlp_w1.as_mut_slice(),
            self.mlp_b1.as_mut_slice(),
            self.mlp_w2.as_mut_slice(),
            self.mlp_b2.as_mut_slice(),
            self.ln_gain.as_mut_slice(),
            self.ln_bias.as_mut_slice(),
        ]
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for s in z.slices_mut() {
            s.fill(0.0);
        }
        z
    }

    pub fn is_finite(&self) -> bool {
        self.slices()
            .iter()
            .all(|s| s.iter().all(|x| x.is_finite()))
    }

    pub fn norm(&self) -> f64 {
        self.slices()
            .iter()
            .flat_map(|s| s.iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }

    fn check_input(&self, x: &DMatrix<f64>) -> Result<(), ClusterError> {
        if x.ncols() != self.dim() {
            return Err(ClusterError::ShapeMismatch(format!(
                "input has {} columns, module dimension is {}",
                x.ncols(),
                self.dim()
            )));
        }
        Ok(())
    }
}

fn relu(x: f64) -> f64 {
    x.max(0.0)
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn add_row(m: &mut DMatrix<f64>, b: &DVector<f64>) {
    for (mut col, &bj) in m.column_iter_mut().zip(b.iter()) {
        col.add_scalar_mut(bj);
    }
}

/// Intermediates of a batched forward pass, kept for backpropagation.
pub(crate) struct ForwardCache {
    pub x: DMatrix<f64>,
    /// pre-relu bottleneck, n x d/16
    pub zc: DMatrix<f64>,
    pub hc: DMatrix<f64>,
    /// gate in (0, 1), n x d
    pub gate: DMatrix<f64>,
    pub gated: DMatrix<f64>,
    /// pre-relu hidden layer, n x 2d
    pub z1: DMatrix<f64>,
    pub a1: DMatrix<f64>,
    /// normalised MLP output before the LN affine
    pub xhat: DMatrix<f64>,
    pub inv_std: Vec<f64>,
    pub out: DMatrix<f64>,
}

pub(crate) fn forward_cached(
    p: &ClusterModuleParams,
    x: &DMatrix<f64>,
) -> Result<ForwardCache, ClusterError> {
    p.check_input(x)?;
    let d = p.dim();
    let zc = x * &p.ca_w1;
    let hc = zc.map(relu);
    let gate = (&hc * &p.ca_w2).map(|b| sigmoid(2.0 * b));
    let gated = x.component_mul(&gate);

    let mut z1 = &gated * &p.mlp_w1;
    add_row(&mut z1, &p.mlp_b1);
    let a1 = z1.map(relu);
    let mut m = &a1 * &p.mlp_w2;
    add_row(&mut m, &p.mlp_b2);

    let mut xhat = m;
    let inv_std = normalize_rows(&mut xhat, d);
    let mut out = xhat.clone();
    scale_shift(p, &mut out)?;
    Ok(ForwardCache {
        x: x.clone(),
        zc,
        hc,
        gate,
        gated,
        z1,
        a1,
        xhat,
        inv_std,
        out,
    })
}

/// Output-only forward pass; keeps no intermediates.
fn forward_out(p: &ClusterModuleParams, x: &DMatrix<f64>) -> Result<DMatrix<f64>, ClusterError> {
    p.check_input(x)?;
    let mut gate = (x * &p.ca_w1).map(relu) * &p.ca_w2;
    gate.zip_apply(x, |g, xi| *g = xi * sigmoid(2.0 * *g));
    let mut z1 = &gate * &p.mlp_w1;
    add_row(&mut z1, &p.mlp_b1);
    z1.apply(|v| *v = relu(*v));
    let mut out = &z1 * &p.mlp_w2;
    add_row(&mut out, &p.mlp_b2);
    normalize_rows(&mut out, p.dim());
    scale_shift(p, &mut out)?;
    Ok(out)
}

/// Zero-mean, unit-variance rows in place; returns each row's `1/σ`.
fn normalize_rows(m: &mut DMatrix<f64>, d: usize) -> Vec<f64> {
    let mut inv_std = Vec::with_capacity(m.nrows());
    for mut row in m.row_iter_mut() {
        let mean = row.sum() / d as f64;
        row.add_scalar_mut(-mean);
        let var = row.norm_squared() / d as f64;
        let inv = 1.0 / (var + LN_EPS).sqrt();
        row *= inv;
        inv_std.push(inv);
    }
    inv_std
}

fn scale_shift(p: &ClusterModuleParams, out: &mut DMatrix<f64>) -> Result<(), ClusterError> {
    for j in 0..out.ncols() {
        let (g, b) = (p.ln_gain[j], p.ln_bias[j]);
        out.column_mut(j).apply(|v| *v = *v * g + b);
    }
    if !out.iter().all(|v| v.is_finite()) {
        return Err(ClusterError::NonFinite("module output"));
    }
    Ok(())
}

/// Channel-attention gate `sigmoid(2 · Bn(r))` for one representation.
pub fn ca_forward(p: &ClusterModuleParams, r: &[f64]) -> Result<Vec<f64>, ClusterError> {
    let x = DMatrix::from_row_slice(1, r.len(), r);
    p.check_input(&x)?;
    let gate = ((&x * &p.ca_w1).map(relu) * &p.ca_w2).map(|b| sigmoid(2.0 * b));
    if !gate.iter().all(|v| v.is_finite()) {
        return Err(ClusterError::NonFinite("gate"));
    }
    Ok(gate.iter().copied().collect())
}

pub fn module_forward(p: &ClusterModuleParams, r: &[f64]) -> Result<Vec<f64>, ClusterError> {
    let x = DMatrix::from_row_slice(1, r.len(), r);
    Ok(forward_out(p, &x)?.iter().copied().collect())
}

/// Row-wise [`module_forward`].
pub fn transform_all(
    p: &ClusterModuleParams,
    reps: &DMatrix<f64>,
) -> Result<DMatrix<f64>, ClusterError> {
    forward_out(p, reps)
}
