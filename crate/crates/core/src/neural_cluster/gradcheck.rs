//! Central finite-difference check of [`grad`] against [`loss`].

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::objective::{grad, loss, Objective};
use super::{
    add_row, forward_cached, normalize_rows, relu, scale_shift, ClusterError, ClusterModuleParams,
    Gradients, GROUP_NAMES,
};
use crate::repr_store::{gen_synthetic, ReprBundle, SynthSpec};
use crate::semantic_basis::{head_bases, SemanticBases, DEFAULT_RCOND};

/// Denominator floor for the relative error, per unit of loss.
///
/// Cancellation in `L(p + h) - L(p - h)` leaves an absolute error around
/// `eps * |L| / h` (about `2e-11 * |L|` at h = 1e-5), so entries far below
/// `|L|` cannot be resolved to a relative tolerance. Flooring the denominator
/// at `1e-6 * max(|L|, 1)` compares those entries on an absolute scale.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// Largest per-entry relative error in each parameter group.
    pub group_max: [f64; 8],
    /// `(group, flat index, analytic, numeric)` of the worst entry.
    pub worst: (&'static str, usize, f64, f64),
    pub entries: usize,
    pub loss: f64,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.group_max.iter().copied().fold(0.0, f64::max)
    }
}

pub fn relative_error(analytic: f64, numeric: f64, loss_value: f64) -> f64 {
    let floor = REL_ERROR_FLOOR * loss_value.abs().max(1.0);
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares every analytic gradient entry with `(L(p + h) - L(p - h)) / 2h`.
pub fn finite_difference_check(
    params: &ClusterModuleParams,
    reps: &DMatrix<f64>,
    labels: &[usize],
    objective: &Objective,
    h: f64,
) -> Result<GradCheckReport, ClusterError> {
    let (value, analytic) = grad(params, reps, labels, objective)?;
    let numeric = numeric_gradient(params, reps, labels, objective, h)?;
    let mut group_max = [0.0; 8];
    let mut worst = ("", 0, 0.0, 0.0);
    let mut worst_err = -1.0;
    let mut entries = 0;
    for (g, (a, n)) in analytic.slices().iter().zip(numeric.slices()).enumerate() {
        for (i, (&a, &n)) in a.iter().zip(n).enumerate() {
            let err = relative_error(a, n, value);
            group_max[g] = f64::max(group_max[g], err);
            if err > worst_err {
                worst_err = err;
                worst = (GROUP_NAMES[g], i, a, n);
            }
            entries += 1;
        }
    }
    Ok(GradCheckReport {
        group_max,
        worst,
        entries,
        loss: value,
    })
}

/// Central differences of [`loss`] for every parameter entry.
///
/// A probe moves a single entry, so the MLP and LN probes start from the
/// unperturbed activations: a hidden-layer entry changes one hidden column
/// and adds a rank-one term to the pre-norm output, an output-layer entry
/// shifts one pre-norm column. The loss is still evaluated in full from
/// there on.
pub fn numeric_gradient(
    params: &ClusterModuleParams,
    reps: &DMatrix<f64>,
    labels: &[usize],
    objective: &Objective,
    h: f64,
) -> Result<Gradients, ClusterError> {
    objective.check_batch(reps, labels)?;
    let cache = forward_cached(params, reps)?;
    let mut m = &cache.a1 * &params.mlp_w2;
    add_row(&mut m, &params.mlp_b2);
    let d = params.dim();
    let tail = |m: DMatrix<f64>, p: &ClusterModuleParams| -> Result<f64, ClusterError> {
        let mut out = m;
        normalize_rows(&mut out, d);
        scale_shift(p, &mut out)?;
        objective.value(&out, labels)
    };
    let central =
        |f: &mut dyn FnMut(f64) -> Result<f64, ClusterError>| -> Result<f64, ClusterError> {
            Ok((f(h)? - f(-h)?) / (2.0 * h))
        };
    let mut num = params.zeros_like();

    let mut probe = params.clone();
    for g in 0..2 {
        for i in 0..params.slices()[g].len() {
            let orig = params.slices()[g][i];
            num.slices_mut()[g][i] = central(&mut |delta| {
                probe.slices_mut()[g][i] = orig + delta;
                let l = loss(&probe, reps, labels, objective);
                probe.slices_mut()[g][i] = orig;
                l
            })?;
        }
    }

    // hidden column c moves by delta * input column (ones for the bias)
    let ones = DMatrix::from_element(reps.nrows(), 1, 1.0);
    let hidden = |c: usize, input: &DMatrix<f64>, r: usize, delta: f64| {
        let mut m2 = m.clone();
        for i in 0..m2.nrows() {
            let a = relu(cache.z1[(i, c)] + delta * input[(i, r)]);
            let da = a - cache.a1[(i, c)];
            if da != 0.0 {
                for k in 0..d {
                    m2[(i, k)] += da * params.mlp_w2[(c, k)];
                }
            }
        }
        tail(m2, params)
    };
    for c in 0..2 * d {
        for r in 0..d {
            num.mlp_w1[(r, c)] = central(&mut |delta| hidden(c, &cache.gated, r, delta))?;
        }
        num.mlp_b1[c] = central(&mut |delta| hidden(c, &ones, 0, delta))?;
    }

    // pre-norm column k moves by delta * hidden column (ones for the bias)
    let output = |k: usize, input: &DMatrix<f64>, r: usize, delta: f64| {
        let mut m2 = m.clone();
        for i in 0..m2.nrows() {
            m2[(i, k)] += delta * input[(i, r)];
        }
        tail(m2, params)
    };
    for k in 0..d {
        for r in 0..2 * d {
            num.mlp_w2[(r, k)] = central(&mut |delta| output(k, &cache.a1, r, delta))?;
        }
        num.mlp_b2[k] = central(&mut |delta| output(k, &ones, 0, delta))?;
    }

    for g in 6..8 {
        for i in 0..d {
            let orig = params.slices()[g][i];
            num.slices_mut()[g][i] = central(&mut |delta| {
                probe.slices_mut()[g][i] = orig + delta;
                let l = tail(m.clone(), &probe);
                probe.slices_mut()[g][i] = orig;
                l
            })?;
        }
    }
    Ok(num)
}

/// Distance of the closest relu pre-activation to its kink.
pub fn relu_margin(params: &ClusterModuleParams, reps: &DMatrix<f64>) -> Result<f64, ClusterError> {
    let cache = forward_cached(params, reps)?;
    Ok(cache
        .zc
        .iter()
        .chain(cache.z1.iter())
        .fold(f64::INFINITY, |m, z| m.min(z.abs())))
}

/// Smallest [`relu_margin`] accepted by [`random_instance`]. Central
/// differences straddling a kink measure a one-sided mix, not a derivative.
pub const MIN_RELU_MARGIN: f64 = 1e-3;

/// A small seeded problem for gradient checks: synthetic bundle, its head
/// bases, and generic parameters (biases and LN affine moved off their
/// initial values so every group carries signal). Parameters are redrawn
/// until every relu input clears [`MIN_RELU_MARGIN`].
#[derive(Debug, Clone)]
pub struct GradCheckInstance {
    pub bundle: ReprBundle,
    pub bases: SemanticBases,
    pub params: ClusterModuleParams,
    pub reps: DMatrix<f64>,
    pub labels: Vec<usize>,
}

pub fn random_instance(
    d: usize,
    batch: usize,
    seed: u64,
) -> Result<GradCheckInstance, crate::Error> {
    let spec = SynthSpec {
        seed,
        d,
        v: 2 * d,
        n_classes: 4,
        n_train: batch,
        n_test: 1,
        noise_sigma: 0.3,
        mix: true,
    };
    let bundle = gen_synthetic(&spec)?;
    let bases = head_bases(&bundle, DEFAULT_RCOND)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(7);
    let reps = bundle.train_reps.to_dmatrix();
    let mut params_seed = seed;
    loop {
        let mut params = ClusterModuleParams::seeded(d, params_seed)?;
        for v in [&mut params.mlp_b1, &mut params.mlp_b2, &mut params.ln_bias] {
            v.iter_mut().for_each(|x| *x = rng.random_range(-0.2..0.2));
        }
        params
            .ln_gain
            .iter_mut()
            .for_each(|x| *x = rng.random_range(0.5..1.5));
        if relu_margin(&params, &reps)? >= MIN_RELU_MARGIN {
            let labels = bundle.train_labels.clone();
            return Ok(GradCheckInstance {
                bundle,
                bases,
                params,
                reps,
                labels,
            });
        }
        params_seed = rng.random();
    }
}
