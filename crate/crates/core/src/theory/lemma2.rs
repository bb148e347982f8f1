use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::derived_rng;

const FD_STEP: f64 = 1e-6;
const DEGENERATE: f64 = 1e-9;
const POWER_TOL: f64 = 1e-6;
const POWER_MAX_ITER: usize = 1000;
/// Spectral norm above which a weight-norm run counts as diverged.
pub const DIVERGENCE_NORM: f64 = 1e6;

/// Square matrix, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    pub d: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn new(d: usize, data: Vec<f64>) -> Result<Self> {
        if d == 0 || data.len() != d * d {
            return Err(Error::contract(format!("{} entries do not form a {d}×{d} matrix", data.len())));
        }
        Ok(Matrix { d, data })
    }

    pub fn random(d: usize, std: f64, r: &mut impl Rng) -> Self {
        let n = Normal::new(0.0, std).expect("finite std");
        Matrix { d, data: (0..d * d).map(|_| n.sample(r)).collect() }
    }

    pub fn scaled(&self, c: f64) -> Self {
        Matrix { d: self.d, data: self.data.iter().map(|v| v * c).collect() }
    }

    fn matvec(&self, v: &[f64]) -> Vec<f64> {
        self.data.chunks(self.d).map(|row| row.iter().zip(v).map(|(a, b)| a * b).sum()).collect()
    }

    fn t_matvec(&self, v: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.d];
        for (row, &vi) in self.data.chunks(self.d).zip(v) {
            for (o, a) in out.iter_mut().zip(row) {
                *o += a * vi;
            }
        }
        out
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn max_rel(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs() / (x.abs() + y.abs()).max(1e-300)).fold(0.0, f64::max)
}

/// `−log ‖W∘Δx‖²` with `∘` the Hadamard product.
pub fn hadamard_fd(w: &Matrix, dx: &Matrix) -> f64 {
    let s: f64 = w.data.iter().zip(&dx.data).map(|(a, b)| (a * b).powi(2)).sum();
    -s.ln()
}

/// Closed-form gradient `−2 (W∘Δx)∘Δx / ‖W∘Δx‖²`.
pub fn hadamard_fd_grad(w: &Matrix, dx: &Matrix) -> Result<Matrix> {
    check_same(w, dx)?;
    let s: f64 = w.data.iter().zip(&dx.data).map(|(a, b)| (a * b).powi(2)).sum();
    if !(s.sqrt() > DEGENERATE) {
        return Err(Error::contract(format!("degenerate separation ‖W∘Δx‖ = {}", s.sqrt())));
    }
    Ok(Matrix { d: w.d, data: w.data.iter().zip(&dx.data).map(|(a, b)| -2.0 * a * b * b / s).collect() })
}

fn check_same(w: &Matrix, dx: &Matrix) -> Result<()> {
    if w.d != dx.d || w.data.len() != w.d * w.d || dx.data.len() != dx.d * dx.d {
        return Err(Error::contract(format!("W is {0}×{0} but Δx is {1}×{1}", w.d, dx.d)));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Lemma2Gradient {
    pub grad_analytic: Matrix,
    pub grad_numeric: Matrix,
    /// `max |analytic − numeric| / max |analytic|`.
    pub grad_error: f64,
    /// Worst relative change of the gradient when Δx is scaled by `c`.
    pub scale_dx_invariance_error: f64,
    /// Worst relative deviation of `c·∇(cW)` from `∇(W)`.
    pub scale_w_ratio_error: f64,
    pub c: f64,
}

/// Compares the closed-form gradient with central differences and checks both
/// scale laws at factor `c`.
pub fn lemma2_gradient(w: &Matrix, dx: &Matrix, c: f64) -> Result<Lemma2Gradient> {
    if !(c > 0.0) || !c.is_finite() {
        return Err(Error::config(format!("scale factor {c} must be positive")));
    }
    let grad_analytic = hadamard_fd_grad(w, dx)?;
    let mut probe = w.clone();
    let mut numeric = vec![0.0; w.data.len()];
    for (i, g) in numeric.iter_mut().enumerate() {
        let orig = probe.data[i];
        let h = FD_STEP * orig.abs().max(1.0);
        probe.data[i] = orig + h;
        let up = hadamard_fd(&probe, dx);
        probe.data[i] = orig - h;
        let down = hadamard_fd(&probe, dx);
        probe.data[i] = orig;
        *g = (up - down) / (2.0 * h);
    }
    let grad_numeric = Matrix { d: w.d, data: numeric };
    let scale = grad_analytic.data.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let grad_error =
        grad_analytic.data.iter().zip(&grad_numeric.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max) / scale;
    let g_dx = hadamard_fd_grad(w, &dx.scaled(c))?;
    let scale_dx_invariance_error = max_rel(&g_dx.data, &grad_analytic.data);
    let g_w = hadamard_fd_grad(&w.scaled(c), dx)?.scaled(c);
    let scale_w_ratio_error = max_rel(&g_w.data, &grad_analytic.data);
    Ok(Lemma2Gradient { grad_analytic, grad_numeric, grad_error, scale_dx_invariance_error, scale_w_ratio_error, c })
}

/// Largest singular value by power iteration on `WᵀW` from a fixed start.
pub fn spectral_norm(w: &Matrix) -> f64 {
    let mut v: Vec<f64> = (0..w.d).map(|i| 1.0 + 0.1 * i as f64).collect();
    let n = norm(&v);
    v.iter_mut().for_each(|x| *x /= n);
    let mut sigma = 0.0;
    for _ in 0..POWER_MAX_ITER {
        let u = w.t_matvec(&w.matvec(&v));
        let lambda = norm(&u);
        if lambda == 0.0 {
            return 0.0;
        }
        let next = lambda.sqrt();
        v = u.into_iter().map(|x| x / lambda).collect();
        let done = (next - sigma).abs() <= POWER_TOL * next;
        sigma = next;
        if done {
            break;
        }
    }
    sigma
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    /// `−mean log ‖WΔ‖²`
    Log,
    /// `−mean ‖WΔ‖²`
    Linear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightNormRun {
    pub seed: u64,
    pub initial_norm: f64,
    pub norm_log: f64,
    pub norm_linear: f64,
    pub diverged_log: bool,
    pub diverged_linear: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WeightNormConfig {
    pub d: usize,
    pub steps: usize,
    pub lr: f64,
    /// Number of fixed `(x_g, x_b)` pairs.
    pub pairs: usize,
}

impl Default for WeightNormConfig {
    fn default() -> Self {
        WeightNormConfig { d: 4, steps: 500, lr: 0.01, pairs: 8 }
    }
}

/// Gradient descent on `W` for `steps` steps. Stops early once the spectral
/// norm passes [`DIVERGENCE_NORM`]; returns the final norm and that flag.
pub fn train_linear_layer(w0: &Matrix, deltas: &[Vec<f64>], objective: Objective, steps: usize, lr: f64) -> (f64, bool) {
    let mut w = w0.clone();
    let d = w.d;
    let m = deltas.len() as f64;
    for _ in 0..steps {
        let mut grad = vec![0.0; d * d];
        for delta in deltas {
            let z = w.matvec(delta);
            let scale = match objective {
                Objective::Log => {
                    let s: f64 = z.iter().map(|v| v * v).sum();
                    -2.0 / (m * s.max(1e-300))
                }
                Objective::Linear => -2.0 / m,
            };
            for (i, zi) in z.iter().enumerate() {
                for (j, dj) in delta.iter().enumerate() {
                    grad[i * d + j] += scale * zi * dj;
                }
            }
        }
        for (wv, g) in w.data.iter_mut().zip(&grad) {
            *wv -= lr * g;
        }
        let sigma = spectral_norm(&w);
        if !(sigma <= DIVERGENCE_NORM) {
            return (sigma, true);
        }
    }
    (spectral_norm(&w), false)
}

/// Trains one `d×d` linear layer per seed on fixed random pairs under the
/// log and the linear separation objective from the same start.
pub fn weight_norm_experiment(config: WeightNormConfig, seeds: &[u64]) -> Result<Vec<WeightNormRun>> {
    let WeightNormConfig { d, steps, lr, pairs } = config;
    if seeds.len() < 5 {
        return Err(Error::config(format!("the weight-norm experiment needs at least 5 seeds, got {}", seeds.len())));
    }
    if d == 0 || pairs == 0 || !(lr >= 0.0) {
        return Err(Error::config("weight-norm experiment needs d ≥ 1, pairs ≥ 1 and lr ≥ 0"));
    }
    let std = 1.0 / (d as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("finite std");
    Ok(seeds
        .iter()
        .map(|&seed| {
            let mut r = derived_rng(seed, 0x77);
            let w0 = Matrix::random(d, std, &mut r);
            let deltas: Vec<Vec<f64>> = (0..pairs)
                .map(|_| (0..d).map(|_| normal.sample(&mut r) - normal.sample(&mut r)).collect())
                .collect();
            let (norm_log, diverged_log) = train_linear_layer(&w0, &deltas, Objective::Log, steps, lr);
            let (norm_linear, diverged_linear) = train_linear_layer(&w0, &deltas, Objective::Linear, steps, lr);
            WeightNormRun { seed, initial_norm: spectral_norm(&w0), norm_log, norm_linear, diverged_log, diverged_linear }
        })
        .collect())
}
