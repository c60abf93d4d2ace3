//! Local method of moments: local models, information matrices, optimal weights and the
//! oracle and adaptive estimators.

pub mod closed_form;
pub mod estimator;
pub mod model;
pub mod weights;

pub use closed_form::{closed_form_entry, closed_form_hik_inv, full_info_k, paired_frequency_sum};
pub use estimator::{
    adaptive_lmm, coarse_model, equivariance_check, estimate_from_ticks, lmm_with_pilot,
    oracle_lmm, pilot_sigma, pilot_sigma_with_summary, ConfidenceInterval, Diagnostics,
    EstimateOptions, EstimateReport, PilotSummary, PipelineOutput,
};
pub use model::{bias_jk, cjk, cjk_from, info_jk, info_k, LocalModel};
pub use weights::{
    truncation_residual, weights, weights_with, BlockWeights, Normalization, WeightSet,
};
