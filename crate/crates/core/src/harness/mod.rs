//! Synthetic DNA benchmark: configuration files, metrics, the exact-oracle
//! self-check and the method comparison driver.

mod compare;
mod config;
mod metrics;
mod oracle_suite;

pub use compare::{
    ordering_checks, read_fasta, revision, run_alpha_sweep, run_comparison, tradeoff_checks, write_fasta, Bench,
    BenchConfig, Cell, Check, EvalReport, Manifest, Method, Metrics, Row, TableRow, METRICS,
};
pub use config::KvConfig;
pub use metrics::{kmer_correlation, kmer_frequencies, Summary};
pub use oracle_suite::{run_oracle_suite, OracleSuiteConfig};
