//! Monte Carlo designs, replication studies and the orthogonality probe.

pub mod dgp;
pub mod probe;
pub mod study;

pub use dgp::{draw_dataset, draw_dynamic_dataset, Design, DgpConfig, DynamicOracle, Oracle};
pub use probe::{orthogonality_probe, ProbeConfig, ProbeReport, ProbeScore, DEFAULT_T_GRID};
pub use study::{run_design, SimStudyReport, StudyConfig, StudyRow};
