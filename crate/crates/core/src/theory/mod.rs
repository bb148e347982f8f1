//! Numerical checks of the theory behind the discrepancy penalty: the Dice
//! bound, the damping structure of the penalty's gradient and its effect on
//! weight norms, the mediation example, and the Dice/discrepancy correlation.

mod correlation;
mod lemma1;
mod lemma2;
mod mediation;

pub use correlation::{dice_fd_correlation, pearson, Correlation, MIN_RECORDS};
pub use lemma1::{lemma1_check, lemma1_sweep, Lemma1Report, Lemma1Sweep};
pub use lemma2::{
    hadamard_fd, hadamard_fd_grad, lemma2_gradient, spectral_norm, train_linear_layer, weight_norm_experiment, Lemma2Gradient,
    Matrix, Objective, WeightNormConfig, WeightNormRun, DIVERGENCE_NORM,
};
pub use mediation::{mediation_mc, MediationEstimate, MIN_SAMPLES};

use serde::{Deserialize, Serialize};
use serde_json::Value;

/// One JSON report per check. `holds` is `None` for checks that only report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckReport {
    pub check: String,
    pub params: Value,
    pub result: Value,
    pub holds: Option<bool>,
}

impl CheckReport {
    pub fn new(check: &str, params: impl Serialize, result: impl Serialize, holds: Option<bool>) -> Self {
        CheckReport {
            check: check.to_string(),
            params: serde_json::to_value(params).expect("params serialize"),
            result: serde_json::to_value(result).expect("result serialize"),
            holds,
        }
    }
}
