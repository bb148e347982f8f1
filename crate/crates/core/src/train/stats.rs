use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const INTEGRATION_TOL: f64 = 1e-13;
const MAX_DEPTH: u32 = 60;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TTest {
    pub t: f64,
    /// Two-sided.
    pub p: f64,
    pub dof: usize,
    /// Set when the runs have zero variance; `t` is then ±∞ or NaN.
    pub degenerate_variance: bool,
}

fn simpson(a: f64, b: f64, fa: f64, fm: f64, fb: f64) -> f64 {
    (b - a) / 6.0 * (fa + 4.0 * fm + fb)
}

#[allow(clippy::too_many_arguments)]
fn adaptive(f: &impl Fn(f64) -> f64, a: f64, b: f64, fa: f64, fm: f64, fb: f64, whole: f64, tol: f64, depth: u32) -> f64 {
    let m = 0.5 * (a + b);
    let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
    let (flm, frm) = (f(lm), f(rm));
    let left = simpson(a, m, fa, flm, fm);
    let right = simpson(m, b, fm, frm, fb);
    let delta = left + right - whole;
    if depth == 0 || delta.abs() <= 15.0 * tol {
        return left + right + delta / 15.0;
    }
    adaptive(f, a, m, fa, flm, fm, left, tol / 2.0, depth - 1) + adaptive(f, m, b, fm, frm, fb, right, tol / 2.0, depth - 1)
}

/// Adaptive Simpson quadrature of `f` over `[a, b]`.
fn integrate(f: impl Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
    let (fa, fm, fb) = (f(a), f(0.5 * (a + b)), f(b));
    let whole = simpson(a, b, fa, fm, fb);
    adaptive(&f, a, b, fa, fm, fb, whole, tol, MAX_DEPTH)
}

fn t_density(x: f64, nu: f64) -> f64 {
    let log_c = libm::lgamma((nu + 1.0) / 2.0) - libm::lgamma(nu / 2.0) - 0.5 * (nu * std::f64::consts::PI).ln();
    (log_c - (nu + 1.0) / 2.0 * (1.0 + x * x / nu).ln()).exp()
}

/// Upper tail `P(T > t)` of Student's t with `nu` degrees of freedom, `t ≥ 0`.
///
/// The tail integral is mapped onto `(0, 1]` by `x = t/u`, which keeps the
/// integrand bounded and avoids cancellation for large `t`; below `t = 1` it
/// is `1/2 − ∫₀ᵗ`.
pub fn student_t_sf(t: f64, nu: f64) -> f64 {
    assert!(nu > 0.0, "degrees of freedom must be positive");
    if t.is_nan() {
        return f64::NAN;
    }
    if t < 0.0 {
        return 1.0 - student_t_sf(-t, nu);
    }
    if t == f64::INFINITY {
        return 0.0;
    }
    if t < 1.0 {
        return 0.5 - integrate(|x| t_density(x, nu), 0.0, t, INTEGRATION_TOL);
    }
    let g = |u: f64| {
        if u == 0.0 {
            // limit of pdf(t/u)·t/u² as u → 0
            return if nu == 1.0 { 1.0 / (std::f64::consts::PI * t) } else { 0.0 };
        }
        t_density(t / u, nu) * t / (u * u)
    };
    integrate(g, 0.0, 1.0, INTEGRATION_TOL)
}

/// One-sample t-test of `runs` against `baseline`, with sample standard
/// deviation and a two-sided p-value on `n − 1` degrees of freedom.
pub fn one_sample_t_test(baseline: f64, runs: &[f64]) -> Result<TTest> {
    let n = runs.len();
    if n < 2 {
        return Err(Error::config(format!("a t-test needs at least two runs, got {n}")));
    }
    let mean = runs.iter().sum::<f64>() / n as f64;
    let var = runs.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let dof = n - 1;
    if var == 0.0 {
        let (t, p) = if mean == baseline { (f64::NAN, 1.0) } else { ((mean - baseline).signum() * f64::INFINITY, 0.0) };
        return Ok(TTest { t, p, dof, degenerate_variance: true });
    }
    let t = (mean - baseline) / (var.sqrt() / (n as f64).sqrt());
    let p = (2.0 * student_t_sf(t.abs(), dof as f64)).min(1.0);
    Ok(TTest { t, p, dof, degenerate_variance: false })
}
