pub mod filter;
pub mod ingest;
pub mod jsonl;
pub mod mednli;
pub mod metrics;
pub mod refine;
pub mod selftrain;
pub mod span;
pub mod text;
pub mod translate;
pub mod tsv;

/// Exact rational scalar for the count-ratio metrics.
pub type Rational = num_rational::Ratio<i64>;
