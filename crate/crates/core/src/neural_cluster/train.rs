use std::time::{Duration, Instant};

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::objective::{grad, LossSupport, Objective};
use super::{transform_all, ClusterError, ClusterModuleParams};
use crate::metrics;
use crate::repr_store::ReprBundle;
use crate::semantic_basis::SemanticBases;
use crate::semantic_logits::{ClassScorer, LogitsMode};

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Optimizer {
    #[default]
    Adam,
    /// Plain mini-batch gradient descent.
    Sgd,
}

impl Optimizer {
    pub fn name(self) -> &'static str {
        match self {
            Self::Adam => "adam",
            Self::Sgd => "sgd",
        }
    }
}

impl std::fmt::Display for Optimizer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Optimizer {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "adam" => Ok(Self::Adam),
            "sgd" => Ok(Self::Sgd),
            _ => Err(format!("unknown optimizer {s:?} (expected adam or sgd)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub learning_rate: f64,
    pub mode: LogitsMode,
    pub tau: f64,
    pub loss_support: LossSupport,
    pub optimizer: Optimizer,
    /// Gradients are rescaled to this global norm when they exceed it.
    pub clip_norm: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 256,
            seed: 42,
            learning_rate: 1e-3,
            mode: LogitsMode::SimAll,
            tau: 10.0,
            loss_support: LossSupport::FullVocabulary,
            optimizer: Optimizer::Adam,
            clip_norm: 10.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ClusterError> {
        let bad = |m: String| Err(ClusterError::InvalidConfig(m));
        if self.epochs == 0 {
            return bad("epochs must be >= 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return bad(format!(
                "learning_rate must be finite and >= 0, got {}",
                self.learning_rate
            ));
        }
        if !(self.clip_norm > 0.0) {
            return bad(format!(
                "clip_norm must be positive, got {}",
                self.clip_norm
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModeAccuracy {
    pub mode: LogitsMode,
    pub train: f64,
    pub test: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    /// Sample-weighted mean of the pre-update batch losses, one per epoch.
    pub epoch_losses: Vec<f64>,
    /// Class-prediction accuracy of the transformed splits, one entry per predictive mode.
    pub accuracy: Vec<ModeAccuracy>,
    pub weight_count: usize,
    pub param_count: usize,
    pub wall_time: Duration,
}

impl TrainReport {
    pub fn accuracy_for(&self, mode: LogitsMode) -> Option<ModeAccuracy> {
        self.accuracy.iter().copied().find(|a| a.mode == mode)
    }

    /// Equality over everything except the wall time.
    pub fn same_outcome(&self, other: &Self) -> bool {
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        bits(&self.epoch_losses) == bits(&other.epoch_losses)
            && self.accuracy == other.accuracy
            && self.param_count == other.param_count
    }
}

struct AdamState {
    m: ClusterModuleParams,
    v: ClusterModuleParams,
    t: i32,
}

fn apply_update(
    params: &mut ClusterModuleParams,
    g: &ClusterModuleParams,
    state: &mut Option<AdamState>,
    lr: f64,
) {
    match state {
        None => {
            for (p, g) in params.slices_mut().into_iter().zip(g.slices()) {
                for (p, g) in p.iter_mut().zip(g) {
                    *p -= lr * g;
                }
            }
        }
        Some(s) => {
            s.t += 1;
            let c1 = 1.0 - ADAM_BETA1.powi(s.t);
            let c2 = 1.0 - ADAM_BETA2.powi(s.t);
            let groups = params
                .slices_mut()
                .into_iter()
                .zip(g.slices())
                .zip(s.m.slices_mut())
                .zip(s.v.slices_mut());
            for (((p, g), m), v) in groups {
                for i in 0..p.len() {
                    m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * g[i];
                    v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * g[i] * g[i];
                    p[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + ADAM_EPS);
                }
            }
        }
    }
}

fn clip(g: &mut ClusterModuleParams, max_norm: f64) {
    let n = g.norm();
    if n > max_norm {
        let s = max_norm / n;
        for slice in g.slices_mut() {
            slice.iter_mut().for_each(|x| *x *= s);
        }
    }
}

fn gather_rows(m: &DMatrix<f64>, idx: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(idx.len(), m.ncols(), |i, j| m[(idx[i], j)])
}

/// Trains the clustering module on the bundle's training split.
///
/// Parameters come from [`ClusterModuleParams::seeded`] with the config seed;
/// batch order uses a second ChaCha stream of the same seed, so a run is a pure
/// function of `(bundle, bases, config)`.
pub fn train(
    bundle: &ReprBundle,
    bases: &SemanticBases,
    config: &TrainConfig,
) -> Result<(ClusterModuleParams, TrainReport), ClusterError> {
    let start = Instant::now();
    config.validate()?;
    let mut params = ClusterModuleParams::seeded(bundle.d, config.seed)?;
    let objective = Objective::new(bundle, bases, config.mode, config.tau, config.loss_support)?;

    let train_x = bundle.train_reps.to_dmatrix();
    let labels = &bundle.train_labels;
    let n = labels.len();

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(1);
    let mut order: Vec<usize> = (0..n).collect();
    let mut adam = match config.optimizer {
        Optimizer::Adam => Some(AdamState {
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
        }),
        Optimizer::Sgd => None,
    };

    let mut epoch_losses = Vec::with_capacity(config.epochs);
    let mut step = 0;
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let x = gather_rows(&train_x, chunk);
            let y: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let (value, mut g) = match grad(&params, &x, &y, &objective) {
                Err(ClusterError::NonFinite(_)) => {
                    return Err(ClusterError::DivergedAtStep { step })
                }
                other => other?,
            };
            if !value.is_finite() || !g.is_finite() {
                return Err(ClusterError::DivergedAtStep { step });
            }
            total += value * chunk.len() as f64;
            clip(&mut g, config.clip_norm);
            apply_update(&mut params, &g, &mut adam, config.learning_rate);
            if !params.is_finite() {
                return Err(ClusterError::DivergedAtStep { step });
            }
            step += 1;
        }
        epoch_losses.push(total / n as f64);
    }

    let scorer = ClassScorer::new(bundle, bases)?;
    let train_t = transform_all(&params, &train_x)?;
    let test_t = transform_all(&params, &bundle.test_reps.to_dmatrix())?;
    let mut accuracy = Vec::new();
    for mode in LogitsMode::PREDICTIVE {
        let acc = |x: &DMatrix<f64>, truth: &[usize]| -> Result<f64, ClusterError> {
            let pred = scorer.predict_all(x, mode)?;
            Ok(metrics::accuracy(&pred, truth).expect("equal lengths"))
        };
        accuracy.push(ModeAccuracy {
            mode,
            train: acc(&train_t, &bundle.train_labels)?,
            test: acc(&test_t, &bundle.test_labels)?,
        });
    }

    let report = TrainReport {
        epoch_losses,
        accuracy,
        weight_count: params.weight_count(),
        param_count: params.param_count(),
        wall_time: start.elapsed(),
    };
    Ok((params, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::repr_store::{gen_synthetic, SynthSpec};
    use crate::semantic_basis::{head_bases, DEFAULT_RCOND};

    fn small() -> (ReprBundle, SemanticBases) {
        let spec = SynthSpec {
            seed: 11,
            d: 16,
            v: 40,
            n_classes: 3,
            n_train: 90,
            n_test: 30,
            noise_sigma: 0.01,
            mix: true,
        };
        let b = gen_synthetic(&spec).unwrap();
        let bases = head_bases(&b, DEFAULT_RCOND).unwrap();
        (b, bases)
    }

    #[test]
    fn zero_learning_rate_keeps_initial_params() {
        let (b, bases) = small();
        for optimizer in [Optimizer::Adam, Optimizer::Sgd] {
            let cfg = TrainConfig {
                epochs: 3,
                batch_size: 32,
                learning_rate: 0.0,
                optimizer,
                ..Default::default()
            };
            let (p, report) = train(&b, &bases, &cfg).unwrap();
            assert_eq!(p, ClusterModuleParams::seeded(16, cfg.seed).unwrap());
            let first = report.epoch_losses[0];
            // Batch composition changes between epochs, the sample-weighted mean does not.
            assert!(report
                .epoch_losses
                .iter()
                .all(|l| (l - first).abs() < 1e-12));
        }
    }

    #[test]
    fn training_is_deterministic() {
        let (b, bases) = small();
        let cfg = TrainConfig {
            epochs: 5,
            batch_size: 16,
            ..Default::default()
        };
        let (p1, r1) = train(&b, &bases, &cfg).unwrap();
        let (p2, r2) = train(&b, &bases, &cfg).unwrap();
        assert_eq!(p1, p2);
        assert!(r1.same_outcome(&r2));
    }

    #[test]
    fn loss_decreases() {
        let (b, bases) = small();
        let cfg = TrainConfig {
            epochs: 30,
            batch_size: 32,
            ..Default::default()
        };
        let (_, report) = train(&b, &bases, &cfg).unwrap();
        assert!(report.epoch_losses.last().unwrap() < &report.epoch_losses[0]);
        assert_eq!(report.accuracy.len(), 4);
    }

    #[test]
    fn huge_learning_rate_diverges_or_stays_finite() {
        let (b, bases) = small();
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 32,
            learning_rate: 1e300,
            optimizer: Optimizer::Sgd,
            ..Default::default()
        };
        match train(&b, &bases, &cfg) {
            Err(ClusterError::DivergedAtStep { .. }) => {}
            Ok((p, _)) => assert!(p.is_finite()),
            Err(e) => panic!("unexpected error {e}"),
        }
    }

    #[test]
    fn rejects_invalid_config() {
        let (b, bases) = small();
        assert!(train(
            &b,
            &bases,
            &TrainConfig {
                epochs: 0,
                ..Default::default()
            }
        )
        .is_err());
        assert!(train(
            &b,
            &bases,
            &TrainConfig {
                batch_size: 0,
                ..Default::default()
            }
        )
        .is_err());
        assert!(train(
            &b,
            &bases,
            &TrainConfig {
                learning_rate: -1.0,
                ..Default::default()
            }
        )
        .is_err());
    }
}
