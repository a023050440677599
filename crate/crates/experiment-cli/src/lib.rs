//! The runnable experiment layer: configuration, the five-step procedure
//! (end-to-end training, covariance fitting, DGL-monitored training, LEGO
//! layer-wise training, classifier-only training), baselines, and metrics
//! emission.
//!
//! Everything a run needs is declared in one TOML config with dotted
//! sections; unknown keys are rejected so stale configs fail loudly. All
//! randomness flows from three declared seeds: the split seed (which rows),
//! the init seed (which weights), and the shuffle seed (which batch order).
//! Two runs with the same resolved config produce bit-identical parameter
//! trajectories; DGL monitoring reads activations but never touches the
//! random streams or the weights, so a monitored run retraces the plain run
//! exactly.
//!
//! Each run writes three artifacts into its output directory: a resolved
//! config snapshot, a metrics CSV with the fixed header
//! `epoch,split,metric,value,layer`, and a JSON summary carrying final
//! accuracies, chosen hyperparameters, seeds, and the config hash. Exit
//! codes are part of the contract: 0 on success, 2 for config errors, 3 for
//! data or IO errors, 4 for numerical failures including divergence.

pub mod config;
pub mod record;
pub mod reports;
pub mod runner;

pub use config::{ExperimentConfig, Overrides};
pub use record::{emit_metrics, spearman, MetricRow, RunRecord};
pub use runner::{
    fit_kernel_params, prepare, run_e2e, run_lego, run_monitor, run_random_baseline, KernelFit,
    Prepared, TrainOutcome,
};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(#[from] data_io::DataError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("{0}")]
    Nn(#[from] nn::NnError),
    #[error("{0}")]
    Dgl(#[from] dgl_loss::DglError),
    #[error("{0}")]
    Kernel(#[from] kernels::KernelError),
    #[error("{0}")]
    Ib(#[from] ib_loss::IbError),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl CliError {
    /// Maps the error to the documented process exit code.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) | CliError::Io(_) | CliError::Csv(_) | CliError::Json(_) => 3,
            CliError::Nn(nn::NnError::Io(_)) => 3,
            _ => 4,
        }
    }
}

/// FNV-1a over a byte stream, used for config hashes and freeze audits.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}
