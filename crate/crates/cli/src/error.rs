use std::path::PathBuf;

use thiserror::Error;
use vds_core::knn::KnnError;
use vds_core::metrics::MetricsError;
use vds_core::neural_cluster::ClusterError;
use vds_core::repr_store::BundleError;
use vds_core::semantic_basis::BasisError;
use vds_core::semantic_logits::LogitsError;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] vds_core::Error),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{0}")]
    Invalid(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            Self::Core(e) if e.is_numerical() => 3,
            _ => 2,
        }
    }

    pub fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Self {
        let path = path.into();
        move |source| Self::Io { path, source }
    }
}

macro_rules! via_core {
    ($($t:ty),*) => {$(
        impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                Self::Core(e.into())
            }
        }
    )*};
}

via_core!(
    BundleError,
    BasisError,
    LogitsError,
    ClusterError,
    KnnError,
    MetricsError
);
