use thiserror::Error;

use crate::knn::KnnError;
use crate::metrics::MetricsError;
use crate::neural_cluster::ClusterError;
use crate::repr_store::BundleError;
use crate::semantic_basis::BasisError;
use crate::semantic_logits::LogitsError;

/// Any failure from the pipeline stages.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Bundle(#[from] BundleError),
    #[error(transparent)]
    Basis(#[from] BasisError),
    #[error(transparent)]
    Logits(#[from] LogitsError),
    #[error(transparent)]
    Cluster(#[from] ClusterError),
    #[error(transparent)]
    Knn(#[from] KnnError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

impl Error {
    /// True for failures of the numerics (SVD non-convergence, divergence,
    /// non-finite intermediates) as opposed to bad inputs.
    pub fn is_numerical(&self) -> bool {
        match self {
            Self::Basis(BasisError::SvdNoConvergence { .. }) => true,
            Self::Bundle(BundleError::Basis(BasisError::SvdNoConvergence { .. })) => true,
            Self::Logits(LogitsError::Basis(BasisError::SvdNoConvergence { .. })) => true,
            Self::Cluster(e) => e.is_numerical(),
            _ => false,
        }
    }
}
