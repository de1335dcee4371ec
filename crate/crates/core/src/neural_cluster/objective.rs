//! Clustering losses and their analytic gradients.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{
    forward_cached, transform_all, ClusterError, ClusterModuleParams, ForwardCache, Gradients,
};
use crate::repr_store::ReprBundle;
use crate::semantic_basis::{class_basis_matrix, Aggregation, SemanticBases};
use crate::semantic_logits::{LogitsError, LogitsMode};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossSupport {
    /// Softmax over every vocabulary token; the target is the first token of
    /// the label's verbalizer.
    #[default]
    FullVocabulary,
    /// Softmax over class-aggregated logits; the target is the class.
    LabelTokensOnly,
}

impl LossSupport {
    pub fn name(self) -> &'static str {
        match self {
            Self::FullVocabulary => "full-vocabulary",
            Self::LabelTokensOnly => "label-tokens-only",
        }
    }
}

impl std::fmt::Display for LossSupport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for LossSupport {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "full-vocabulary" => Ok(Self::FullVocabulary),
            "label-tokens-only" => Ok(Self::LabelTokensOnly),
            _ => Err(format!(
                "unknown loss support {s:?} (expected full-vocabulary or label-tokens-only)"
            )),
        }
    }
}

/// Everything a loss evaluation needs besides the parameters and the batch.
///
/// Every cross-entropy variant reduces to logits `z = T · u` against a target
/// table `T`: unit semantic bases with `u = h/‖h‖` for similarity modes, head
/// columns with `u = h` for matmul modes.
#[derive(Debug, Clone)]
pub struct Objective {
    pub mode: LogitsMode,
    pub tau: f64,
    pub support: LossSupport,
    /// S x d
    table: DMatrix<f64>,
    /// d x S, so logits are a plain `u · table_t`
    table_t: DMatrix<f64>,
    /// class id -> row of `table` holding its target
    target_index: Vec<usize>,
    /// C x d unit class bases, used by SimGT
    unit_class_bases: DMatrix<f64>,
}

fn unit_rows(mut m: DMatrix<f64>) -> Result<DMatrix<f64>, ClusterError> {
    for mut row in m.row_iter_mut() {
        let n = row.norm();
        if n == 0.0 {
            return Err(LogitsError::ZeroVector.into());
        }
        row /= n;
    }
    Ok(m)
}

impl Objective {
    pub fn new(
        bundle: &ReprBundle,
        bases: &SemanticBases,
        mode: LogitsMode,
        tau: f64,
        support: LossSupport,
    ) -> Result<Self, ClusterError> {
        if !(tau.is_finite() && tau > 0.0) {
            return Err(ClusterError::InvalidConfig(format!(
                "tau must be positive, got {tau}"
            )));
        }
        let c = bundle.n_classes;
        let class_bases = class_basis_matrix(bases, &bundle.verbalizer, c, Aggregation::Mean)?;
        let unit_class_bases = unit_rows(class_bases.clone())?;

        let (table, target_index) = match (mode.is_similarity(), support) {
            (_, _) if mode == LogitsMode::SimGT => (DMatrix::zeros(0, bundle.d), Vec::new()),
            (true, LossSupport::FullVocabulary) => {
                (unit_rows(bases.bases.clone())?, first_tokens(bundle))
            }
            (true, LossSupport::LabelTokensOnly) => (unit_class_bases.clone(), (0..c).collect()),
            (false, LossSupport::FullVocabulary) => (
                bundle.lm_head.to_dmatrix().transpose(),
                first_tokens(bundle),
            ),
            (false, LossSupport::LabelTokensOnly) => {
                let w = bundle.lm_head.to_dmatrix();
                let mut cols = DMatrix::<f64>::zeros(c, bundle.d);
                for class in 0..c {
                    let tokens = &bundle.verbalizer[&class];
                    for &t in tokens {
                        for j in 0..bundle.d {
                            cols[(class, j)] += w[(j, t)];
                        }
                    }
                    cols.row_mut(class).scale_mut(1.0 / tokens.len() as f64);
                }
                (cols, (0..c).collect())
            }
        };
        let table_t = table.transpose();
        Ok(Self {
            mode,
            tau,
            support,
            table,
            table_t,
            target_index,
            unit_class_bases,
        })
    }

    pub fn n_classes(&self) -> usize {
        self.unit_class_bases.nrows()
    }

    pub(crate) fn check_batch(
        &self,
        reps: &DMatrix<f64>,
        labels: &[usize],
    ) -> Result<(), ClusterError> {
        if reps.nrows() == 0 {
            return Err(ClusterError::EmptyBatch);
        }
        if reps.nrows() != labels.len() {
            return Err(ClusterError::ShapeMismatch(format!(
                "{} representations, {} labels",
                reps.nrows(),
                labels.len()
            )));
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= self.n_classes()) {
            return Err(ClusterError::LabelOutOfRange {
                label,
                n_classes: self.n_classes(),
            });
        }
        Ok(())
    }

    /// Mean loss over the rows of `out` and its gradient w.r.t. `out`.
    pub(crate) fn head(
        &self,
        out: &DMatrix<f64>,
        labels: &[usize],
    ) -> Result<(f64, DMatrix<f64>), ClusterError> {
        let (value, d_out) = self.head_impl(out, labels, true)?;
        Ok((value, d_out.expect("gradient requested")))
    }

    pub(crate) fn value(&self, out: &DMatrix<f64>, labels: &[usize]) -> Result<f64, ClusterError> {
        Ok(self.head_impl(out, labels, false)?.0)
    }

    fn head_impl(
        &self,
        out: &DMatrix<f64>,
        labels: &[usize],
        want_grad: bool,
    ) -> Result<(f64, Option<DMatrix<f64>>), ClusterError> {
        let n = out.nrows();
        let inv_n = 1.0 / n as f64;
        let mut norms = Vec::with_capacity(n);
        let mut u = out.clone();
        if self.mode.is_similarity() {
            for mut row in u.row_iter_mut() {
                let norm = row.norm();
                if norm == 0.0 {
                    return Err(ClusterError::ZeroVector);
                }
                row /= norm;
                norms.push(norm);
            }
        }

        if self.mode == LogitsMode::SimGT {
            let mut total = 0.0;
            let mut d_out = DMatrix::<f64>::zeros(n, out.ncols());
            for (i, &label) in labels.iter().enumerate() {
                let s = self.unit_class_bases.row(label);
                let ui = u.row(i);
                let cos = s.dot(&ui);
                total += 1.0 - cos;
                if want_grad {
                    // ∂(1 - cos)/∂h = -(ŝ - cos·û) / ‖h‖
                    let g = (s - ui * cos) * (-inv_n / norms[i]);
                    d_out.row_mut(i).copy_from(&g);
                }
            }
            return Ok((total * inv_n, want_grad.then_some(d_out)));
        }

        let z = &u * &self.table_t;
        let mut dz = DMatrix::<f64>::zeros(n, z.ncols());
        let mut total = 0.0;
        for (i, &label) in labels.iter().enumerate() {
            let t = self.target_index[label];
            let zi: Vec<f64> = z.row(i).iter().copied().collect();
            let q = if self.mode.is_exp() {
                softmax(&zi)
            } else {
                zi.clone()
            };
            let logits: Vec<f64> = q.iter().map(|x| self.tau * x).collect();
            let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let sum_exp: f64 = logits.iter().map(|l| (l - max).exp()).sum();
            total += max + sum_exp.ln() - logits[t];
            if !want_grad {
                continue;
            }

            // d/dq of the cross-entropy of softmax(tau·q)
            let mut dq: Vec<f64> = logits
                .iter()
                .map(|l| self.tau * (l - max).exp() / sum_exp)
                .collect();
            dq[t] -= self.tau;
            let dzi: Vec<f64> = if self.mode.is_exp() {
                let inner: f64 = dq.iter().zip(&q).map(|(a, b)| a * b).sum();
                q.iter().zip(&dq).map(|(qk, g)| qk * (g - inner)).collect()
            } else {
                dq
            };
            for (k, g) in dzi.into_iter().enumerate() {
                dz[(i, k)] = g * inv_n;
            }
        }

        if !want_grad {
            return Ok((total * inv_n, None));
        }
        let du = &dz * &self.table;
        let d_out = if self.mode.is_similarity() {
            // project out the radial component: ∂û/∂h = (I - ûûᵀ)/‖h‖
            let mut d_out = du;
            for i in 0..n {
                let ui = u.row(i).clone_owned();
                let radial = d_out.row(i).dot(&ui);
                let g = (d_out.row(i) - ui * radial) / norms[i];
                d_out.row_mut(i).copy_from(&g);
            }
            d_out
        } else {
            du
        };
        Ok((total * inv_n, Some(d_out)))
    }
}

fn first_tokens(bundle: &ReprBundle) -> Vec<usize> {
    (0..bundle.n_classes)
        .map(|c| bundle.verbalizer[&c][0])
        .collect()
}

fn softmax(z: &[f64]) -> Vec<f64> {
    crate::semantic_logits::exp_transform(z)
}

pub fn loss(
    params: &ClusterModuleParams,
    reps: &DMatrix<f64>,
    labels: &[usize],
    objective: &Objective,
) -> Result<f64, ClusterError> {
    objective.check_batch(reps, labels)?;
    objective.value(&transform_all(params, reps)?, labels)
}

/// Loss and its gradient w.r.t. every parameter group.
pub fn grad(
    params: &ClusterModuleParams,
    reps: &DMatrix<f64>,
    labels: &[usize],
    objective: &Objective,
) -> Result<(f64, Gradients), ClusterError> {
    objective.check_batch(reps, labels)?;
    let cache = forward_cached(params, reps)?;
    let (value, d_out) = objective.head(&cache.out, labels)?;
    Ok((value, backward(params, &cache, &d_out)))
}

fn column_sums(m: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_iterator(m.ncols(), m.column_iter().map(|c| c.sum()))
}

fn backward(p: &ClusterModuleParams, c: &ForwardCache, d_out: &DMatrix<f64>) -> Gradients {
    let d = p.dim() as f64;

    // LN affine
    let ln_gain = column_sums(&d_out.component_mul(&c.xhat));
    let ln_bias = column_sums(d_out);

    // LN normalisation: dm = inv/d · (d·dx̂ − Σdx̂ − x̂·Σ(dx̂ ⊙ x̂))
    let mut dm = d_out.clone();
    for mut row in dm.row_iter_mut() {
        row.component_mul_assign(&p.ln_gain.transpose());
    }
    for (i, mut row) in dm.row_iter_mut().enumerate() {
        let xhat = c.xhat.row(i);
        let sum = row.sum();
        let proj = row.dot(&xhat);
        let g = (&row * d - xhat * proj).add_scalar(-sum) * (c.inv_std[i] / d);
        row.copy_from(&g);
    }

    // MLP
    let mlp_w2 = c.a1.transpose() * &dm;
    let mlp_b2 = column_sums(&dm);
    let mut dz1 = &dm * p.mlp_w2.transpose();
    dz1.zip_apply(&c.z1, |g, z| {
        if z <= 0.0 {
            *g = 0.0
        }
    });
    let mlp_w1 = c.gated.transpose() * &dz1;
    let mlp_b1 = column_sums(&dz1);
    let d_gated = &dz1 * p.mlp_w1.transpose();

    // gate: h = x ⊙ sigmoid(2·Bn(x)); the input x itself is not trained
    let mut d_bn = d_gated.component_mul(&c.x);
    d_bn.zip_apply(&c.gate, |g, s| *g *= 2.0 * s * (1.0 - s));
    let ca_w2 = c.hc.transpose() * &d_bn;
    let mut d_zc = &d_bn * p.ca_w2.transpose();
    d_zc.zip_apply(&c.zc, |g, z| {
        if z <= 0.0 {
            *g = 0.0
        }
    });
    let ca_w1 = c.x.transpose() * &d_zc;

    Gradients {
        ca_w1,
        ca_w2,
        mlp_w1,
        mlp_b1,
        mlp_w2,
        mlp_b2,
        ln_gain,
        ln_bias,
    }
}
