//! Synthetic domain-generalization benchmark: generator, naive-fusion
//! baseline, leave-one-domain-out folds and ablations.

pub mod baseline;
pub mod generator;
pub mod lodo;

pub use baseline::Baseline;
pub use generator::{gen_domains, Benchmark, DomainSpec, Forged, GeneratorConfig};
pub use lodo::{run_ablation, run_lodo, Learner, Split};
