use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Warmup,
    Active,
}

impl std::fmt::Display for Phase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Phase::Warmup => "warmup",
            Phase::Active => "active",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlphaConfig {
    /// Target penalty level; α rises while a tap's penalty exceeds it.
    pub tau: f64,
    pub eta: f64,
    pub alpha_max: f64,
    pub warmup_steps: usize,
}

impl Default for AlphaConfig {
    fn default() -> Self {
        AlphaConfig { tau: 0.0, eta: 1e-3, alpha_max: 1.0, warmup_steps: 0 }
    }
}

/// Per-tap penalty weights, driven by multiplier ascent rather than by the
/// gradient of the loss they weight.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlphaState {
    pub alpha: Vec<f64>,
    pub phase: Phase,
    pub config: AlphaConfig,
}

impl AlphaState {
    pub fn new(taps: usize, config: AlphaConfig) -> Self {
        AlphaState { alpha: vec![0.0; taps], phase: Phase::Warmup, config }
    }

    pub fn is_zero(&self) -> bool {
        self.alpha.iter().all(|&a| a == 0.0)
    }

    /// One multiplier step: `α_l ← clamp(α_l + η·(p_l − τ), 0, α_max)` once
    /// `step ≥ warmup_steps`; before that every α stays exactly zero.
    pub fn update(&mut self, penalty_per_tap: &[f64], step: usize) {
        debug_assert_eq!(penalty_per_tap.len(), self.alpha.len());
        if step < self.config.warmup_steps {
            self.phase = Phase::Warmup;
            self.alpha.fill(0.0);
            return;
        }
        self.phase = Phase::Active;
        let AlphaConfig { tau, eta, alpha_max, .. } = self.config;
        for (a, &p) in self.alpha.iter_mut().zip(penalty_per_tap) {
            *a = (*a + eta * (p - tau)).clamp(0.0, alpha_max);
        }
    }
}
