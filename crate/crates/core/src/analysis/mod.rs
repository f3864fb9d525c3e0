//! Rank, sparsity and entropy of attention score matrices.

mod report;
mod stats;

pub use report::{
    attn_report, attn_stats, score_matrix, write_report, AnalysisKernel, AttnStats, QkSource,
    REPORT_HEADER,
};
pub use stats::{entropy_rows, numerical_rank, sparsity, DEFAULT_RANK_TOL, DEFAULT_SPARSITY_TOL};
