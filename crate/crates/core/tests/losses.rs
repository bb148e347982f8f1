use fdseg::losses::*;
use fdseg::rng::rng;
use fdseg::tensor::{grad_check, DEFAULT_FD_EPS};
use fdseg::unet::{UNet, UNetConfig};
use fdseg::{Error, Shape, Tape, Tensor, Var};
use proptest::prelude::*;
use rand::Rng;

fn random(shape: Shape, seed: u64, lo: f64, hi: f64) -> Tensor<f64> {
    let mut r = rng(seed);
    Tensor::from_fn(shape, |_, _, _, _| r.gen_range(lo..hi))
}

/// Binary mask with at least one pixel of each class per sample.
fn random_mask(shape: Shape, seed: u64) -> Tensor<f64> {
    let mut r = rng(seed);
    let mut m = Tensor::from_fn(shape, |_, _, _, _| if r.gen_bool(0.4) { 1.0 } else { 0.0 });
    for n in 0..shape.n {
        m.set(n, 0, 0, 0, 1.0);
        m.set(n, shape.h - 1, shape.w - 1, 0, 0.0);
    }
    m
}

fn masked_mean_oracle(f: &Tensor<f64>, m: &Tensor<f64>, n: usize, k: usize, fg: bool) -> f64 {
    let s = f.shape();
    let (mut num, mut den) = (0.0, 0.0);
    for y in 0..s.h {
        for x in 0..s.w {
            let w = if fg { m.at(n, y, x, 0) } else { 1.0 - m.at(n, y, x, 0) };
            num += f.at(n, y, x, k) * w;
            den += w;
        }
    }
    num / (den + 1e-6)
}

fn fd_value(f: &Tensor<f64>, m: &Tensor<f64>) -> f64 {
    let mut t = Tape::<f64>::new();
    let fv = t.constant(f.clone());
    let s = feature_summary(&mut t, fv, m).unwrap();
    let l = fd_loss(&mut t, &s).unwrap();
    t.item(l)
}

// ---- segmentation losses ---------------------------------------------------

fn seg_pair(pred: Vec<f64>, target: Vec<f64>) -> (Tape<f64>, Var, Var) {
    let s = Shape::new(1, 4, 4, 1);
    let mut t = Tape::new();
    let p = t.constant(Tensor::from_vec(s, pred).unwrap());
    let y = t.constant(Tensor::from_vec(s, target).unwrap());
    (t, p, y)
}

#[test]
fn dice_examples() {
    let mask: Vec<f64> = (0..16).map(|i| if i < 8 { 1.0 } else { 0.0 }).collect();
    let (mut t, p, y) = seg_pair(mask.clone(), mask.clone());
    let d = dice_loss(&mut t, p, y).unwrap();
    assert!(t.item(d) <= 1e-6);

    let inv: Vec<f64> = mask.iter().map(|v| 1.0 - v).collect();
    let (mut t, p, y) = seg_pair(inv, mask.clone());
    let d = dice_loss(&mut t, p, y).unwrap();
    assert!((t.item(d) - (1.0 - 1e-6 / (16.0 + 1e-6))).abs() < 1e-12);

    let mut target = vec![0.0; 16];
    target[0] = 1.0;
    target[1] = 1.0;
    let mut pred = vec![0.0; 16];
    pred[1] = 1.0;
    pred[2] = 1.0;
    let (mut t, p, y) = seg_pair(pred, target);
    let d = dice_loss(&mut t, p, y).unwrap();
    let expect = 1.0 - (2.0 + 1e-6) / (4.0 + 1e-6);
    assert!((t.item(d) - expect).abs() < 1e-12);
    assert!((t.item(d) - 0.5).abs() < 1e-6);
}

#[test]
fn bce_matches_per_pixel_oracle() {
    for seed in 0..5 {
        let pred = random(Shape::new(1, 4, 4, 1), seed, 0.0, 1.0);
        let target = random_mask(Shape::new(1, 4, 4, 1), seed + 100);
        let mut t = Tape::new();
        let (p, y) = (t.constant(pred.clone()), t.constant(target.clone()));
        let b = bce_loss(&mut t, p, y).unwrap();
        let oracle: f64 = pred
            .data()
            .iter()
            .zip(target.data())
            .map(|(&p, &y)| {
                let p = p.clamp(1e-7, 1.0 - 1e-7);
                -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
            })
            .sum::<f64>()
            / 16.0;
        assert!((t.item(b) - oracle).abs() < 1e-12);
    }
}

#[test]
fn bce_special_values() {
    let mask: Vec<f64> = (0..16).map(|i| (i % 3 == 0) as u8 as f64).collect();
    let (mut t, p, y) = seg_pair(vec![0.5; 16], mask.clone());
    let b = bce_loss(&mut t, p, y).unwrap();
    assert!((t.item(b) - std::f64::consts::LN_2).abs() < 1e-12);
    let (mut t, p, y) = seg_pair(mask.clone(), mask);
    let b = bce_loss(&mut t, p, y).unwrap();
    assert!((t.item(b) - -(1.0f64 - 1e-7).ln()).abs() < 1e-12);
}

#[test]
fn dice_and_bce_bounds_on_random_inputs() {
    for seed in 0..20 {
        let pred = random(Shape::new(2, 4, 4, 1), seed, 0.0, 1.0);
        let target = random_mask(Shape::new(2, 4, 4, 1), seed);
        let mut t = Tape::new();
        let (p, y) = (t.constant(pred), t.constant(target));
        let d = dice_loss(&mut t, p, y).unwrap();
        let b = bce_loss(&mut t, p, y).unwrap();
        assert!((0.0..1.0).contains(&t.item(d)));
        assert!(t.item(b) >= 0.0);
    }
}

#[test]
fn non_binary_target_and_shape_mismatch_are_rejected() {
    let (mut t, p, y) = seg_pair(vec![0.5; 16], vec![0.5; 16]);
    assert!(matches!(dice_loss(&mut t, p, y), Err(Error::Contract(_))));
    assert!(matches!(bce_loss(&mut t, p, y), Err(Error::Contract(_))));
    let z = t.constant(Tensor::zeros(Shape::new(1, 2, 2, 1)));
    assert!(matches!(dice_loss(&mut t, p, z), Err(Error::Contract(_))));
}

// ---- mask pooling and summaries ----------------------------------------------

#[test]
fn pool_mask_matches_window_oracle() {
    for seed in 0..10 {
        let m = random(Shape::new(2, 8, 8, 1), seed, 0.0, 1.0).map(|v| if v > 0.8 { 1.0 } else { 0.0 });
        for f in [2, 4, 8] {
            let pooled = pool_mask(&m, f).unwrap();
            let oracle = Tensor::from_fn(Shape::new(2, 8 / f, 8 / f, 1), |n, y, x, _| {
                let any = (0..f).any(|dy| (0..f).any(|dx| m.at(n, y * f + dy, x * f + dx, 0) == 1.0));
                any as u8 as f64
            });
            assert_eq!(pooled, oracle);
        }
    }
}

#[test]
fn pool_mask_edge_cases() {
    let zero = Tensor::<f64>::zeros(Shape::new(1, 8, 8, 1));
    for f in [1, 2, 4, 8] {
        assert!(pool_mask(&zero, f).unwrap().data().iter().all(|&v| v == 0.0));
    }
    let mut one = zero.clone();
    one.set(0, 5, 2, 0, 1.0);
    let p = pool_mask(&one, 4).unwrap();
    assert_eq!(p.sum(), 1.0);
    assert_eq!(p.at(0, 1, 0, 0), 1.0);
    assert!(pool_mask(&zero, 3).is_err());
    assert!(matches!(pool_mask(&Tensor::<f64>::zeros(Shape::new(1, 6, 8, 1)), 4), Err(Error::Dim { .. })));
}

#[test]
fn feature_summary_matches_masked_mean_oracle() {
    for seed in 0..5 {
        let s = Shape::new(3, 4, 4, 5);
        let f = random(s, seed, -1.0, 2.0);
        let m = random_mask(Shape::new(3, 4, 4, 1), seed);
        let mut t = Tape::new();
        let fv = t.constant(f.clone());
        let sum = feature_summary(&mut t, fv, &m).unwrap();
        let (fg, bg) = (t.value(sum.fg_mean).clone(), t.value(sum.bg_mean).clone());
        for n in 0..3 {
            assert!((sum.fg_count[n] + sum.bg_count[n] - 16.0).abs() < 1e-5);
            for k in 0..5 {
                assert!((fg.at(n, 0, 0, k) - masked_mean_oracle(&f, &m, n, k, true)).abs() < 1e-12);
                assert!((bg.at(n, 0, 0, k) - masked_mean_oracle(&f, &m, n, k, false)).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn feature_summary_simple_cases() {
    let m = random_mask(Shape::new(1, 4, 4, 1), 3);
    let mut t = Tape::new();
    let c = t.constant(Tensor::full(Shape::new(1, 4, 4, 2), 0.7));
    let s = feature_summary(&mut t, c, &m).unwrap();
    for k in 0..2 {
        assert!((t.value(s.fg_mean).at(0, 0, 0, k) - 0.7).abs() < 1e-6);
        assert!((t.value(s.bg_mean).at(0, 0, 0, k) - 0.7).abs() < 1e-6);
    }
    let fm = t.constant(m.clone());
    let s = feature_summary(&mut t, fm, &m).unwrap();
    assert!((t.value(s.fg_mean).item() - 1.0).abs() < 1e-6);
    assert_eq!(t.value(s.bg_mean).item(), 0.0);

    let full = Tensor::<f64>::full(Shape::new(1, 4, 4, 1), 1.0);
    let f = t.constant(random(Shape::new(1, 4, 4, 3), 1, 0.0, 1.0));
    let s = feature_summary(&mut t, f, &full).unwrap();
    assert_eq!(s.bg_count, vec![0.0]);
    assert!(t.value(s.bg_mean).data().iter().all(|&v| v == 0.0));
}

#[test]
fn feature_summary_rejects_resolution_mismatch() {
    let mut t = Tape::new();
    let f = t.constant(Tensor::<f64>::zeros(Shape::new(1, 8, 8, 2)));
    let m = Tensor::zeros(Shape::new(1, 4, 4, 1));
    assert!(matches!(feature_summary(&mut t, f, &m), Err(Error::Contract(_))));
}

// ---- discrepancy loss --------------------------------------------------------

/// Two-channel features equal to `v` on foreground and 0 on background.
fn two_level(v: (f64, f64)) -> (Tensor<f64>, Tensor<f64>) {
    let m = Tensor::from_fn(Shape::new(1, 4, 4, 1), |_, y, _, _| (y < 2) as u8 as f64);
    let f = Tensor::from_fn(Shape::new(1, 4, 4, 2), |_, y, _, c| if y < 2 { [v.0, v.1][c] } else { 0.0 });
    (f, m)
}

#[test]
fn fd_examples() {
    let (f, m) = two_level((0.0, 0.0));
    assert!((fd_value(&f, &m) - -(1e-12f64).ln()).abs() < 1e-9);
    assert!((fd_value(&f, &m) - 27.631).abs() < 1e-3);

    let (f, m) = two_level((0.6, 0.8));
    assert!(fd_value(&f, &m).abs() < 1e-5);

    let (f, m) = two_level((0.3, -0.4));
    assert!((fd_value(&f, &m) - 1.386294).abs() < 1e-5);
}

#[test]
fn fd_is_computed_on_batch_averaged_means() {
    let f = random(Shape::new(3, 4, 4, 2), 7, 0.0, 1.0);
    let m = random_mask(Shape::new(3, 4, 4, 1), 7);
    let mut d2 = 0.0;
    for k in 0..2 {
        let fg: f64 = (0..3).map(|n| masked_mean_oracle(&f, &m, n, k, true)).sum::<f64>() / 3.0;
        let bg: f64 = (0..3).map(|n| masked_mean_oracle(&f, &m, n, k, false)).sum::<f64>() / 3.0;
        d2 += (fg - bg).powi(2);
    }
    assert!((fd_value(&f, &m) - -(d2 + 1e-12).ln()).abs() < 1e-10);
}

#[test]
fn fd_per_sample_matches_single_sample_losses() {
    let f = random(Shape::new(3, 4, 4, 2), 8, 0.0, 1.0);
    let m = random_mask(Shape::new(3, 4, 4, 1), 8);
    let mut t = Tape::new();
    let fv = t.constant(f.clone());
    let s = feature_summary(&mut t, fv, &m).unwrap();
    let per = fd_per_sample(&t, &s);
    for (i, v) in per.iter().enumerate() {
        assert!((v - fd_value(&f.sample(i), &m.sample(i))).abs() < 1e-9);
    }
}

fn summaries(f: &Tensor<f64>, m: &Tensor<f64>) -> (Tape<f64>, MaskedFeatureSummary) {
    let mut t = Tape::new();
    let fv = t.constant(f.clone());
    let s = feature_summary(&mut t, fv, m).unwrap();
    (t, s)
}

fn exch_value(f: &Tensor<f64>, m: &Tensor<f64>, partners: &[usize]) -> f64 {
    let (mut t, s) = summaries(f, m);
    let l = fd_exch_loss(&mut t, &s, partners).unwrap();
    t.item(l)
}

fn pairwise_oracle(f: &Tensor<f64>, m: &Tensor<f64>, partners: &[usize]) -> f64 {
    let c = f.shape().c;
    let n = partners.len();
    let fg = |i: usize, k: usize| masked_mean_oracle(f, m, i, k, true);
    let bg = |i: usize, k: usize| masked_mean_oracle(f, m, i, k, false);
    let mut total = 0.0;
    for i in 0..n {
        let j = partners[i];
        let mut d = 0.0;
        for k in 0..c {
            d += (fg(i, k) - bg(j, k)).powi(2) + (fg(j, k) - bg(i, k)).powi(2);
        }
        total += -(d + 1e-12).ln();
    }
    total / n as f64
}

#[test]
fn exch_single_sample_degenerates_to_doubled_norm() {
    let f = random(Shape::new(1, 4, 4, 3), 2, 0.0, 1.0);
    let m = random_mask(Shape::new(1, 4, 4, 1), 2);
    let mut d2 = 0.0;
    for k in 0..3 {
        d2 += (masked_mean_oracle(&f, &m, 0, k, true) - masked_mean_oracle(&f, &m, 0, k, false)).powi(2);
    }
    let p = exch_pairing(1, None, 0).unwrap();
    assert_eq!(p.partners, vec![0]);
    assert!((exch_value(&f, &m, &p.partners) - -(2.0 * d2 + 1e-12).ln()).abs() < 1e-10);
}

#[test]
fn exch_with_identical_summaries_ignores_offset() {
    let one = random(Shape::new(1, 4, 4, 2), 4, 0.0, 1.0);
    let mone = random_mask(Shape::new(1, 4, 4, 1), 4);
    let f = Tensor::stack(&[&one, &one, &one, &one]).unwrap();
    let m = Tensor::stack(&[&mone, &mone, &mone, &mone]).unwrap();
    let single = exch_value(&one, &mone, &[0]);
    for k in 0..4 {
        assert!((exch_value(&f, &m, &offset_partners(4, k)) - single).abs() < 1e-10);
    }
}

#[test]
fn exch_matches_pairwise_oracle() {
    for seed in 0..5 {
        let f = random(Shape::new(4, 4, 4, 3), seed, 0.0, 1.0);
        let m = random_mask(Shape::new(4, 4, 4, 1), seed);
        let partners = offset_partners(4, 1);
        assert_eq!(partners, vec![1, 2, 3, 0]);
        assert!((exch_value(&f, &m, &partners) - pairwise_oracle(&f, &m, &partners)).abs() < 1e-10);
        let shuffled = exch_pairing(4, None, seed).unwrap().partners;
        assert!((exch_value(&f, &m, &shuffled) - pairwise_oracle(&f, &m, &shuffled)).abs() < 1e-10);
    }
}

#[test]
fn exch_rejects_wrong_partner_count() {
    let f = random(Shape::new(2, 4, 4, 1), 0, 0.0, 1.0);
    let m = random_mask(Shape::new(2, 4, 4, 1), 0);
    let (mut t, s) = summaries(&f, &m);
    assert!(fd_exch_loss(&mut t, &s, &[0]).is_err());
    assert!(exch_pairing(0, None, 0).is_err());
}

fn perm_strategy(n: usize) -> impl Strategy<Value = Vec<usize>> {
    Just((0..n).collect::<Vec<_>>()).prop_shuffle()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn fd_scale_law(seed in 0u64..10_000, c in 0.05f64..20.0) {
        let f = random(Shape::new(2, 4, 4, 3), seed, 0.0, 1.0);
        let m = random_mask(Shape::new(2, 4, 4, 1), seed);
        let base = fd_value(&f, &m);
        // Well above the clamp so the law is exact up to rounding.
        prop_assume!(base < 20.0);
        let scaled = fd_value(&f.map(|v| v * c), &m);
        prop_assert!((scaled - (base - 2.0 * c.ln())).abs() < 1e-5, "{} vs {}", scaled, base - 2.0 * c.ln());
    }

    #[test]
    fn fd_mask_complement_symmetry(seed in 0u64..10_000) {
        let f = random(Shape::new(2, 4, 4, 3), seed, -1.0, 1.0);
        let m = random_mask(Shape::new(2, 4, 4, 1), seed);
        let inv = m.map(|v| 1.0 - v);
        prop_assert!((fd_value(&f, &m) - fd_value(&f, &inv)).abs() < 1e-9);
    }

    #[test]
    fn exch_joint_permutation_invariance((n, perm, k) in (1usize..=5).prop_flat_map(|n| (Just(n), perm_strategy(n), 0..n)), seed in 0u64..1000) {
        let f = random(Shape::new(n, 4, 4, 2), seed, 0.0, 1.0);
        let m = random_mask(Shape::new(n, 4, 4, 1), seed);
        let partners = offset_partners(n, k);
        let base = exch_value(&f, &m, &partners);
        prop_assert!((base - pairwise_oracle(&f, &m, &partners)).abs() < 1e-10);
        // sample i of the permuted batch is original sample perm[i]
        let mut inv = vec![0; n];
        for (i, &p) in perm.iter().enumerate() {
            inv[p] = i;
        }
        let permuted_partners: Vec<usize> = (0..n).map(|i| inv[partners[perm[i]]]).collect();
        let permuted = exch_value(&f.select_batch(&perm), &m.select_batch(&perm), &permuted_partners);
        prop_assert!((base - permuted).abs() < 1e-10);
    }
}

// ---- gradients ---------------------------------------------------------------

#[test]
fn seg_losses_pass_gradient_check() {
    for seed in 0..10 {
        let x = random(Shape::new(2, 4, 4, 1), seed, 0.05, 0.95);
        let target = random_mask(Shape::new(2, 4, 4, 1), seed);
        let tgt = target.clone();
        let d = grad_check(
            move |t, p| {
                let y = t.constant(tgt.clone());
                dice_loss(t, p, y)
            },
            &x,
            DEFAULT_FD_EPS,
        )
        .unwrap();
        assert!(d < 1e-3, "dice seed {seed}: {d}");
        let b = grad_check(
            move |t, p| {
                let y = t.constant(target.clone());
                bce_loss(t, p, y)
            },
            &x,
            DEFAULT_FD_EPS,
        )
        .unwrap();
        assert!(b < 1e-3, "bce seed {seed}: {b}");
    }
}

#[test]
fn discrepancy_losses_pass_gradient_check() {
    for seed in 0..10 {
        let f = random(Shape::new(3, 4, 4, 2), seed, 0.0, 1.0);
        let m = random_mask(Shape::new(3, 4, 4, 1), seed);
        let partners = exch_pairing(3, None, seed).unwrap().partners;
        let checks: [(&str, Box<dyn Fn(&mut Tape<f64>, Var) -> fdseg::Result<Var>>); 3] = [
            ("fd", {
                let m = m.clone();
                Box::new(move |t, x| {
                    let s = feature_summary(t, x, &m)?;
                    fd_loss(t, &s)
                })
            }),
            ("fd_exch", {
                let m = m.clone();
                Box::new(move |t, x| {
                    let s = feature_summary(t, x, &m)?;
                    fd_exch_loss(t, &s, &partners)
                })
            }),
            ("contrast", {
                let m = m.clone();
                Box::new(move |t, x| {
                    let s = feature_summary(t, x, &m)?;
                    contrast_stub(t, &s)
                })
            }),
        ];
        for (name, f_) in checks {
            let e = grad_check(f_, &f, DEFAULT_FD_EPS).unwrap();
            assert!(e < 1e-3, "{name} seed {seed}: {e}");
        }
    }
}

#[test]
fn discrepancy_gradient_reaches_features() {
    let f = random(Shape::new(2, 4, 4, 2), 1, 0.0, 1.0);
    let m = random_mask(Shape::new(2, 4, 4, 1), 1);
    let mut t = Tape::new();
    let fv = t.param(f);
    let s = feature_summary(&mut t, fv, &m).unwrap();
    let l = fd_loss(&mut t, &s).unwrap();
    t.backward(l).unwrap();
    let g = t.grad(fv).unwrap();
    assert!(g.data().iter().any(|&v| v != 0.0));
}

// ---- α schedule ------------------------------------------------------------------

#[test]
fn alpha_never_leaves_its_box() {
    let cfg = AlphaConfig { tau: 1.0, eta: 0.3, alpha_max: 0.5, warmup_steps: 3 };
    let mut st = AlphaState::new(3, cfg);
    let mut r = rng(0);
    for step in 0..200 {
        let p: Vec<f64> = (0..3).map(|_| r.gen_range(-5.0..5.0)).collect();
        st.update(&p, step);
        if step < 3 {
            assert!(st.is_zero());
            assert_eq!(st.phase, Phase::Warmup);
        }
        assert!(st.alpha.iter().all(|&a| (0.0..=0.5).contains(&a)));
    }
}

#[test]
fn alpha_is_monotone_while_penalty_exceeds_target() {
    let mut st = AlphaState::new(2, AlphaConfig::default());
    let mut prev = st.alpha.clone();
    for step in 0..3000 {
        st.update(&[0.3, 2.0], step);
        assert!(st.alpha.iter().zip(&prev).all(|(a, b)| a >= b));
        prev = st.alpha.clone();
    }
    assert_eq!(st.alpha[1], 1.0);
    assert!(st.alpha[0] < 1.0);
}

// ---- total loss --------------------------------------------------------------

struct Batch {
    images: Tensor<f64>,
    mask: Tensor<f64>,
}

fn batch(n: usize, size: usize, seed: u64) -> Batch {
    let mut r = rng(seed);
    let mask = Tensor::from_fn(Shape::new(n, size, size, 1), |b, y, x, _| {
        let c = size as f64 / 2.0 + b as f64;
        let d = (y as f64 - c).powi(2) + (x as f64 - c + 1.0).powi(2);
        (d < (size as f64 / 3.5).powi(2)) as u8 as f64
    });
    let images = Tensor::from_fn(mask.shape(), |b, y, x, _| 0.35 + 0.4 * mask.at(b, y, x, 0) + r.gen_range(-0.05..0.05));
    Batch { images, mask }
}

fn run_total(
    model: &UNet,
    b: &Batch,
    alpha: &AlphaState,
    penalty: Penalty,
    pairing: Option<&Pairing>,
) -> (Tape<f64>, Var, LossBreakdown) {
    let mut t = Tape::<f64>::new();
    let x = t.constant(b.images.clone());
    let y = t.constant(b.mask.clone());
    let out = model.forward(&mut t, x).unwrap();
    let masks: Vec<Tensor<f64>> = out.taps.iter().map(|tap| pool_mask(&b.mask, tap.downsample_factor).unwrap()).collect();
    let inputs = LossInputs {
        pred: out.prediction,
        target: y,
        taps: &out.taps,
        pooled_masks: &masks,
        aux_predictions: &out.aux_predictions,
        pairing,
    };
    let (total, bd) = total_loss(&mut t, inputs, alpha, penalty).unwrap();
    (t, total, bd)
}

#[test]
fn warmup_total_is_segmentation_loss_bit_for_bit() {
    let model = UNet::init(UNetConfig { base_channels: 4, ..Default::default() }, 2).unwrap();
    let b = batch(2, 16, 2);
    let pairing = exch_pairing(2, None, 0).unwrap();
    let alpha = AlphaState::new(5, AlphaConfig { warmup_steps: 10, ..Default::default() });
    for penalty in [Penalty::None, Penalty::Fd, Penalty::FdExch, Penalty::Contrast] {
        let (t, total, bd) = run_total(&model, &b, &alpha, penalty, Some(&pairing));
        assert_eq!(t.item(total).to_bits(), bd.seg.to_bits());
        assert_eq!(bd.total.to_bits(), bd.seg.to_bits());
        assert_eq!(bd.seg, bd.dice + bd.bce);
        // and it is the same number a bare Dice + BCE graph produces
        let mut t2 = Tape::<f64>::new();
        let x = t2.constant(b.images.clone());
        let y = t2.constant(b.mask.clone());
        let out = model.forward(&mut t2, x).unwrap();
        let d = dice_loss(&mut t2, out.prediction, y).unwrap();
        let e = bce_loss(&mut t2, out.prediction, y).unwrap();
        let s = t2.add(d, e).unwrap();
        assert_eq!(t2.item(s).to_bits(), bd.total.to_bits());
    }
}

#[test]
fn seg_only_breakdown_has_no_penalty_terms() {
    let model = UNet::init(UNetConfig { base_channels: 2, ..Default::default() }, 1).unwrap();
    let b = batch(2, 8, 1);
    let mut alpha = AlphaState::new(5, AlphaConfig::default());
    alpha.alpha = vec![0.5; 5];
    let (_, _, bd) = run_total(&model, &b, &alpha, Penalty::None, None);
    assert!(bd.fd_per_tap.is_empty() && bd.fd_exch_per_tap.is_none() && bd.stub_per_tap.is_none());
    assert_eq!(bd.total, bd.seg);
}

#[test]
fn breakdown_identity_holds() {
    for seed in 0..4 {
        let model = UNet::init(UNetConfig { base_channels: 4, ..Default::default() }, seed).unwrap();
        let b = batch(3, 16, seed);
        let pairing = exch_pairing(3, None, seed).unwrap();
        let mut alpha = AlphaState::new(5, AlphaConfig::default());
        let mut r = rng(seed);
        alpha.alpha = (0..5).map(|_| r.gen_range(0.0..1.0)).collect();
        for penalty in [Penalty::Fd, Penalty::FdExch] {
            let (_, _, bd) = run_total(&model, &b, &alpha, penalty, Some(&pairing));
            let mut expect = bd.seg;
            for l in 0..5 {
                let exch = bd.fd_exch_per_tap.as_ref().map_or(0.0, |x| x[l]);
                expect += alpha.alpha[l] * (bd.fd_per_tap[l] + exch);
            }
            assert!((bd.total - expect).abs() < 1e-6, "{penalty:?}");
            assert!((bd.seg - (bd.dice + bd.bce)).abs() < 1e-6);
            assert!((bd.recombine(&alpha.alpha) - bd.total).abs() < 1e-6);
        }
    }
}

#[test]
fn single_active_tap_adds_its_discrepancy() {
    let model = UNet::init(UNetConfig { base_channels: 4, ..Default::default() }, 3).unwrap();
    let b = batch(2, 16, 3);
    let mut alpha = AlphaState::new(5, AlphaConfig::default());
    alpha.alpha[4] = 1.0;
    let (_, _, bd) = run_total(&model, &b, &alpha, Penalty::Fd, None);
    assert!((bd.total - (bd.seg + bd.fd_per_tap[4])).abs() < 1e-12);
}

#[test]
fn total_loss_rejects_mask_count_mismatch() {
    let model = UNet::init(UNetConfig { base_channels: 2, ..Default::default() }, 0).unwrap();
    let b = batch(1, 8, 0);
    let mut t = Tape::<f64>::new();
    let x = t.constant(b.images.clone());
    let y = t.constant(b.mask.clone());
    let out = model.forward(&mut t, x).unwrap();
    let masks = vec![b.mask.clone()];
    let inputs = LossInputs {
        pred: out.prediction,
        target: y,
        taps: &out.taps,
        pooled_masks: &masks,
        aux_predictions: &[],
        pairing: None,
    };
    let alpha = AlphaState::new(5, AlphaConfig::default());
    assert!(matches!(total_loss(&mut t, inputs, &alpha, Penalty::Fd), Err(Error::Contract(_))));
}

#[test]
fn deep_supervision_uses_decoder_taps_only() {
    let cfg = UNetConfig { base_channels: 2, aux_heads: true, ..Default::default() };
    let model = UNet::init(cfg, 0).unwrap();
    let b = batch(2, 8, 0);
    let mut alpha = AlphaState::new(5, AlphaConfig::default());
    alpha.alpha = vec![0.5; 5];
    let (_, _, bd) = run_total(&model, &b, &alpha, Penalty::DeepSupervision, None);
    let stub = bd.stub_per_tap.clone().unwrap();
    assert_eq!(stub.iter().map(Option::is_some).collect::<Vec<_>>(), [false, false, false, true, true]);
    assert!((bd.recombine(&alpha.alpha) - bd.total).abs() < 1e-9);
}
