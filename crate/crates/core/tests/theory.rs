use fdseg::rng::rng;
use fdseg::tensor::{Shape, Tensor};
use fdseg::theory::*;
use fdseg::train::MetricsRecord;
use fdseg::Error;
use rand::Rng;

fn mask(h: usize, w: usize, on: &[(usize, usize)]) -> Tensor<f64> {
    Tensor::from_fn(Shape::new(1, h, w, 1), |_, y, x, _| if on.contains(&(y, x)) { 1.0 } else { 0.0 })
}

// ---- Lemma 1 ----

#[test]
fn lemma1_identity_instance() {
    let y = mask(4, 4, &[(0, 0), (1, 1), (2, 1)]);
    let r = lemma1_check(&y, &y, &y).unwrap();
    assert_eq!((r.dice, r.k, r.fd_normalized), (1.0, 1.0, 1.0));
    assert!((r.lhs + 2f64.ln()).abs() < 1e-12);
    assert_eq!(r.rhs, 0.0);
    assert!(r.holds);
}

#[test]
fn lemma1_constant_features_match_oracle() {
    let y = mask(4, 4, &[(0, 0), (0, 1), (3, 3)]);
    let f = Tensor::full(Shape::new(1, 4, 4, 2), 0.7);
    let r = lemma1_check(&f, &y, &y).unwrap();
    let expected = (2.0 * 3.0 / 16.0 - 1.0f64).abs();
    assert!((r.fd_normalized - expected).abs() < 1e-12);
    assert!((r.rhs + expected.ln()).abs() < 1e-12);
    assert_eq!(r.holds, r.gap >= -1e-6);
}

#[test]
fn lemma1_direct_substitution_oracle() {
    let mut g = rng(3);
    for _ in 0..20 {
        let (h, w, c) = (5, 6, 3);
        let f = Tensor::from_fn(Shape::new(1, h, w, c), |_, _, _, _| g.gen_range(0.0..2.0));
        let yt = Tensor::from_fn(Shape::new(1, h, w, 1), |_, y, x, _| f64::from(u8::from(y == 0 || x == 2)));
        let yp = Tensor::from_fn(Shape::new(1, h, w, 1), |_, _, _, _| f64::from(u8::from(g.gen_bool(0.4))));
        let r = lemma1_check(&f, &yt, &yp).unwrap();
        let mut num = [0.0; 3];
        let mut den = [0.0; 3];
        let (mut sy, mut sp, mut inter) = (0.0, 0.0, 0.0);
        for y in 0..h {
            for x in 0..w {
                let t = yt.at(0, y, x, 0);
                let p = yp.at(0, y, x, 0);
                sy += t;
                sp += p;
                inter += t * p;
                for k in 0..c {
                    num[k] += f.at(0, y, x, k) * t - f.at(0, y, x, k) * (1.0 - t);
                    den[k] += f.at(0, y, x, k);
                }
            }
        }
        let l2 = |v: &[f64; 3]| v.iter().map(|a| a * a).sum::<f64>().sqrt();
        let fd = l2(&num) / l2(&den);
        let dice = 2.0 * inter / (sp + sy);
        let lhs = -(dice * (sp / sy + 1.0)).max(1e-12).ln();
        assert!((r.fd_normalized - fd).abs() < 1e-12);
        assert!((r.lhs - lhs).abs() < 1e-12);
        assert!((r.gap - (-(fd.max(1e-12)).ln() - lhs)).abs() < 1e-12);
    }
}

#[test]
fn lemma1_contracts() {
    let y = mask(3, 3, &[(1, 1)]);
    let empty = mask(3, 3, &[]);
    assert!(matches!(lemma1_check(&y, &empty, &y), Err(Error::Contract(_))));
    let neg = y.map(|v| v - 0.5);
    assert!(matches!(lemma1_check(&neg, &y, &y), Err(Error::Contract(_))));
    assert!(lemma1_check(&y, &mask(3, 4, &[(0, 0)]), &y).is_err());
}

#[test]
fn lemma1_sweep_reports_a_violation_rate() {
    let s = lemma1_sweep(100, 8, 4, 0).unwrap();
    assert_eq!((s.instances, s.reports.len()), (100, 100));
    assert_eq!(s.violations, s.reports.iter().filter(|r| !r.holds).count());
    assert!((0.0..=1.0).contains(&s.violation_rate));
    assert!(s.reports.iter().all(|r| r.fd_normalized >= 0.0));
    assert_eq!(s, lemma1_sweep(100, 8, 4, 0).unwrap());
}

// ---- Lemma 2 ----

#[test]
fn lemma2_scalar_oracle() {
    let w = Matrix::new(1, vec![2.0]).unwrap();
    let dx = Matrix::new(1, vec![3.0]).unwrap();
    assert!((hadamard_fd(&w, &dx) + 36f64.ln()).abs() < 1e-12);
    let g = hadamard_fd_grad(&w, &dx).unwrap();
    assert!((g.data[0] + 1.0).abs() < 1e-15);
}

#[test]
fn lemma2_gradient_and_scale_laws_on_random_triples() {
    let mut g = rng(11);
    for _ in 0..20 {
        let d = g.gen_range(1..6);
        let w = Matrix::random(d, 1.0, &mut g);
        let dx = Matrix::random(d, 1.0, &mut g);
        let c = g.gen_range(0.1..10.0);
        let r = lemma2_gradient(&w, &dx, c).unwrap();
        assert!(r.grad_error < 1e-5, "{}", r.grad_error);
        assert!(r.scale_dx_invariance_error < 1e-10, "{}", r.scale_dx_invariance_error);
        assert!(r.scale_w_ratio_error < 1e-10, "{}", r.scale_w_ratio_error);
    }
}

#[test]
fn lemma2_rejects_degenerate_inputs() {
    let w = Matrix::new(2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
    let zero = Matrix::new(2, vec![0.0; 4]).unwrap();
    assert!(matches!(hadamard_fd_grad(&w, &zero), Err(Error::Contract(_))));
    assert!(lemma2_gradient(&w, &w, 0.0).is_err());
    assert!(Matrix::new(2, vec![1.0; 3]).is_err());
    assert!(hadamard_fd_grad(&w, &Matrix::new(1, vec![1.0]).unwrap()).is_err());
}

#[test]
fn spectral_norm_matches_known_matrices() {
    let diag = Matrix::new(3, vec![3.0, 0.0, 0.0, 0.0, -5.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
    assert!((spectral_norm(&diag) - 5.0).abs() < 1e-5);
    // [[1,1],[0,1]] has σ_max = (1+√5)/2
    let shear = Matrix::new(2, vec![1.0, 1.0, 0.0, 1.0]).unwrap();
    assert!((spectral_norm(&shear) - (1.0 + 5f64.sqrt()) / 2.0).abs() < 1e-5);
    assert_eq!(spectral_norm(&Matrix::new(2, vec![0.0; 4]).unwrap()), 0.0);
}

#[test]
fn one_dimensional_recurrence_oracle() {
    // w ← w + 2·lr/w (log) and w ← w(1 + 2·lr·δ²) (linear)
    let (w0, delta, lr, steps) = (0.8f64, 1.5f64, 0.01, 150);
    let mut wl = w0;
    let mut wn = w0;
    for _ in 0..steps {
        wl += 2.0 * lr / wl;
        wn *= 1.0 + 2.0 * lr * delta * delta;
    }
    let start = Matrix::new(1, vec![w0]).unwrap();
    let (log, dl) = train_linear_layer(&start, &[vec![delta]], Objective::Log, steps, lr);
    let (lin, dn) = train_linear_layer(&start, &[vec![delta]], Objective::Linear, steps, lr);
    assert!(!dl && !dn);
    assert!((log - wl).abs() < 1e-9 * wl && (lin - wn).abs() < 1e-9 * wn);
    assert!(log < lin);
    // sub-linear vs geometric growth
    assert!(wl < w0 + 2.0 * lr * steps as f64 / w0);
}

#[test]
fn weight_norm_ordering_holds_in_every_seed() {
    let runs = weight_norm_experiment(WeightNormConfig::default(), &[0, 1, 2, 3, 4]).unwrap();
    for r in &runs {
        assert!(r.norm_log < r.norm_linear, "{r:?}");
        assert!(!r.diverged_log);
    }
}

#[test]
fn zero_learning_rate_keeps_the_initial_norm() {
    let cfg = WeightNormConfig { lr: 0.0, ..Default::default() };
    for r in weight_norm_experiment(cfg, &[0, 1, 2, 3, 4]).unwrap() {
        assert_eq!(r.norm_log, r.initial_norm);
        assert_eq!(r.norm_linear, r.initial_norm);
    }
    assert!(weight_norm_experiment(cfg, &[0, 1, 2]).is_err());
}

#[test]
fn runaway_linear_objective_is_flagged() {
    let cfg = WeightNormConfig { lr: 0.5, steps: 2000, ..Default::default() };
    let runs = weight_norm_experiment(cfg, &[0, 1, 2, 3, 4]).unwrap();
    assert!(runs.iter().all(|r| r.diverged_linear && r.norm_linear > DIVERGENCE_NORM));
}

// ---- mediation ----

#[test]
fn mediation_recovers_closed_form() {
    let m = mediation_mc(1.0, 1.0, 100_000, 0).unwrap();
    assert!((0.97..=1.03).contains(&m.slope_hat), "{m:?}");
    assert!((1.95..=2.05).contains(&m.var_hat), "{m:?}");
}

#[test]
fn mediation_degenerate_paths() {
    let n = 40_000;
    let zero_a = mediation_mc(0.0, 2.0, n, 1).unwrap();
    assert!(zero_a.slope_hat.abs() < 3.0 / (n as f64).sqrt() * 5.0_f64.sqrt());
    assert!((zero_a.var_hat - 5.0).abs() < 0.15);
    let zero_b = mediation_mc(1.5, 0.0, n, 2).unwrap();
    assert!((zero_b.var_hat - 1.0).abs() < 0.05);
    assert!(mediation_mc(1.0, 1.0, 9_999, 0).is_err());
}

#[test]
fn mediation_error_shrinks_with_more_samples() {
    let median = |n: usize| {
        let mut e: Vec<f64> = (0..20).map(|s| (mediation_mc(1.0, 1.0, n, 100 + s).unwrap().slope_hat - 1.0).abs()).collect();
        e.sort_by(f64::total_cmp);
        (e[9] + e[10]) / 2.0
    };
    assert!(median(40_000) < median(10_000));
}

// ---- correlation ----

fn records(dice: &[f64], fd: &[f64]) -> Vec<MetricsRecord> {
    dice.iter()
        .zip(fd)
        .enumerate()
        .map(|(i, (&d, &f))| MetricsRecord { sample_id: i as u64, dice: d, iou: d / (2.0 - d), fd_last_decoder: f, checkpoint_step: 0 })
        .collect()
}

#[test]
fn correlation_of_negated_values_is_minus_one() {
    let d: Vec<f64> = (0..12).map(|i| 0.5 + 0.03 * i as f64).collect();
    let f: Vec<f64> = d.iter().map(|v| -v).collect();
    let c = dice_fd_correlation(&records(&d, &f)).unwrap();
    assert!((c.r.unwrap() + 1.0).abs() < 1e-12 && !c.degenerate);
}

#[test]
fn correlation_flags_constant_input_and_small_samples() {
    let d = vec![0.9; 12];
    let f: Vec<f64> = (0..12).map(f64::from).collect();
    let c = dice_fd_correlation(&records(&d, &f)).unwrap();
    assert!(c.degenerate && c.r.is_none());
    assert!(dice_fd_correlation(&records(&d[..9], &f[..9])).is_err());
}

#[test]
fn correlation_against_independent_noise_is_small() {
    let mut g = rng(5);
    let d: Vec<f64> = (0..100).map(|_| g.gen_range(0.0..1.0)).collect();
    let f: Vec<f64> = (0..100).map(|_| g.gen_range(-3.0..3.0)).collect();
    let r = dice_fd_correlation(&records(&d, &f)).unwrap().r.unwrap();
    println!("null-distribution r = {r:.4}");
    assert!(r.abs() < 1.0);
}

#[test]
fn reports_serialize_with_the_four_fields() {
    let rep = CheckReport::new("mediation_mc", serde_json::json!({"a": 1.0}), mediation_mc(1.0, 1.0, 10_000, 0).unwrap(), Some(true));
    let v = serde_json::to_value(&rep).unwrap();
    let keys: Vec<&String> = v.as_object().unwrap().keys().collect();
    assert_eq!(keys, ["check", "holds", "params", "result"]);
    assert!(v["result"]["slope_hat"].is_f64());
}
