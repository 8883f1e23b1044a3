//! Linear probes, robustness reports, budget sweeps, paired t-tests and
//! embedding export.

mod embed;
mod probe;
mod robust;
mod stats;

pub use embed::{export_embeddings, pca, read_embeddings, read_labels, write_embeddings, write_labels, Pca};
pub use probe::{linear_eval, EvalProtocol, ProbeKind};
pub use robust::{epsilon_sweep, fingerprint, robust_accuracy, run_attack, AttackResult, EpsCurve, RobustnessReport};
pub use stats::{paired_ttest, TTest};
