//! Dual-invariance training for confounder-robust classification with
//! limited data, plus a discrete causal-model toolkit for checking the
//! backdoor-adjustment identities the method relies on.

pub mod autodiff;
pub mod datagen;
pub mod io;
pub mod model;
pub mod nil;
pub mod proxy;
pub mod scm;
pub mod train;

pub use autodiff::{grad_check, AutodiffError, Tape, Tensor, Var};
pub use datagen::{ChipSpec, Dataset, DatasetManifest, Split};
pub use model::{Checkpoint, Network, NetworkConfig};
pub use nil::{nil_loss, NilError};
pub use proxy::{ProxyBank, ProxyConfig, ProxyError};
pub use scm::{CausalDag, Distribution, ScmError};
pub use train::{ablate, evaluate, train_run, AblationGrid, AblationTable, Metrics, Mode, TrainConfig, TrainError};
