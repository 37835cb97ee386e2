// SPDX-License-Identifier: MIT OR Apache-2.0

//! Rank correlation, the consistency report, factor grouping and parity ratios.

pub mod correlation;
pub mod report;

pub use correlation::{
    average_ranks, correlate_ig2_consistency, format_table_row, spearman, spearman_with, stars, Correlation,
    Ig2Correlation, PValueMethod,
};
pub use report::{group_by_factor, parity_ratio, ConsistencyReport, FactorSummary, ReportLayer, ReportRow, NO_INTERVENTION};
