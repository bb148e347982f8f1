use fdseg::rng::rng;
use fdseg::unet::{TapName, UNet, UNetConfig};
use fdseg::{Error, Shape, Tape, Tensor};
use rand::Rng;

fn images(n: usize, h: usize, w: usize, seed: u64) -> Tensor<f32> {
    let mut r = rng(seed);
    Tensor::from_fn(Shape::new(n, h, w, 1), |_, _, _, _| r.gen_range(0.0..1.0))
}

// Hand-derived closed form: a k×k conv from a to b channels holds k²ab + b
// numbers; decoder level l sees 2^(D−l+1)·base channels coming up.
fn closed_form_param_count(depth: u32, base: usize, cin: usize, k: usize) -> usize {
    let conv = |k: usize, a: usize, b: usize| k * k * a * b + b;
    let c = |level: u32| base * 2usize.pow(level);
    let mut total = conv(k, cin, c(0)) + conv(k, c(0), c(0));
    for l in 1..depth {
        total += conv(k, c(l - 1), c(l)) + conv(k, c(l), c(l));
    }
    total += conv(k, c(depth - 1), c(depth)) + conv(k, c(depth), c(depth));
    for l in (0..depth).rev() {
        total += conv(1, c(l + 1), c(l)) + conv(k, 2 * c(l), c(l)) + conv(k, c(l), c(l));
    }
    total + conv(1, base, 1)
}

#[test]
fn parameter_count_matches_closed_form() {
    let m = UNet::init(UNetConfig::default(), 0).unwrap();
    assert_eq!(m.param_count(), closed_form_param_count(2, 8, 1, 3));
    assert_eq!(m.param_count(), 27401);
    for (depth, base) in [(1, 2), (3, 4), (2, 5)] {
        let m = UNet::init(UNetConfig { depth, base_channels: base, ..Default::default() }, 0).unwrap();
        assert_eq!(m.param_count(), closed_form_param_count(depth as u32, base, 1, 3), "depth {depth} base {base}");
    }
}

#[test]
fn zero_head_predicts_one_half() {
    let mut m = UNet::init(UNetConfig::default(), 3).unwrap();
    m.zero_head();
    let p = m.predict(&images(2, 16, 16, 1)).unwrap();
    assert_eq!(p.shape(), Shape::new(2, 16, 16, 1));
    assert!(p.data().iter().all(|&v| v == 0.5));
}

#[test]
fn tap_resolutions_follow_pooling() {
    let m = UNet::init(UNetConfig::default(), 0).unwrap();
    let mut t = Tape::new();
    let x = t.constant(images(1, 64, 64, 2));
    let out = m.forward(&mut t, x).unwrap();
    let res: Vec<usize> = out.taps.iter().map(|tap| t.shape(tap.activation).h).collect();
    assert_eq!(res, vec![64, 32, 16, 32, 64]);
    let chans: Vec<usize> = out.taps.iter().map(|tap| t.shape(tap.activation).c).collect();
    assert_eq!(chans, vec![8, 16, 32, 16, 8]);
    for tap in &out.taps {
        assert_eq!(64 / tap.downsample_factor, t.shape(tap.activation).h);
    }
    let names: Vec<TapName> = out.taps.iter().map(|tap| tap.name).collect();
    assert_eq!(names, m.config().tap_names());
}

#[test]
fn tap_count_is_two_depth_plus_one() {
    for depth in 1..=4 {
        let m = UNet::init(UNetConfig { depth, base_channels: 2, ..Default::default() }, 0).unwrap();
        let mut t = Tape::new();
        let x = t.constant(images(1, 16, 16, 0));
        assert_eq!(m.forward(&mut t, x).unwrap().taps.len(), 2 * depth + 1);
    }
}

#[test]
fn enc_and_dec_skip_pairs_share_resolution() {
    let cfg = UNetConfig { depth: 3, base_channels: 2, ..Default::default() };
    let m = UNet::init(cfg.clone(), 0).unwrap();
    let mut t = Tape::new();
    let x = t.constant(images(1, 32, 32, 0));
    let out = m.forward(&mut t, x).unwrap();
    let by_name = |name: TapName| out.taps.iter().find(|tap| tap.name == name).unwrap().activation;
    for l in 1..=3 {
        let e = t.shape(by_name(TapName::Enc(l)));
        let d = t.shape(by_name(TapName::Dec(3 + 1 - l)));
        assert_eq!((e.h, e.w, e.c), (d.h, d.w, d.c));
    }
}

#[test]
fn same_seed_gives_identical_parameters_and_zero_biases() {
    let a = UNet::init(UNetConfig::default(), 11).unwrap();
    let b = UNet::init(UNetConfig::default(), 11).unwrap();
    let c = UNet::init(UNetConfig::default(), 12).unwrap();
    assert_eq!(a.params(), b.params());
    assert_ne!(a.params(), c.params());
    for p in a.params() {
        if p.name.ends_with(".bias") {
            assert!(p.value.data().iter().all(|&v| v == 0.0), "{}", p.name);
        } else {
            let s = p.value.shape();
            let fan_in = (s.n * s.h * s.w) as f32;
            let fan_out = (s.n * s.h * s.c) as f32;
            let linear = p.name.starts_with("head") || p.name.contains(".up.");
            let bound = if linear { (6.0 / (fan_in + fan_out)).sqrt() } else { (6.0 / fan_in).sqrt() };
            assert!(p.value.data().iter().all(|v| v.abs() <= bound), "{}", p.name);
            assert!(p.value.data().iter().any(|v| v.abs() > 0.5 * bound), "{}", p.name);
        }
    }
}

#[test]
fn predictions_lie_strictly_inside_unit_interval() {
    for seed in 0..5 {
        let m = UNet::init(UNetConfig { base_channels: 4, ..Default::default() }, seed).unwrap();
        let x = images(2, 16, 16, seed).map(|v| v * 50.0);
        let p = m.predict(&x).unwrap();
        assert!(p.data().iter().all(|&v| v > 0.0 && v < 1.0));
    }
}

#[test]
fn batch_permutation_permutes_predictions() {
    let m = UNet::init(UNetConfig { base_channels: 4, ..Default::default() }, 5).unwrap();
    let x = images(4, 16, 16, 9);
    let order = [2, 0, 3, 1];
    let p = m.predict(&x).unwrap();
    let q = m.predict(&x.select_batch(&order)).unwrap();
    let expect = p.select_batch(&order);
    for (a, b) in q.data().iter().zip(expect.data()) {
        assert!((a - b).abs() <= 1e-6, "{a} vs {b}");
    }
}

#[test]
fn forward_is_deterministic() {
    let m = UNet::init(UNetConfig::default(), 4).unwrap();
    let x = images(2, 32, 32, 4);
    assert_eq!(m.predict(&x).unwrap(), m.predict(&x).unwrap());
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let cfg = UNetConfig { aux_heads: true, ..Default::default() };
    let m = UNet::init(cfg, 21).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    m.save(&path).unwrap();
    let back = UNet::load(&path).unwrap();
    assert_eq!(back.config(), m.config());
    for (a, b) in m.params().iter().zip(back.params()) {
        assert_eq!(a.name, b.name);
        let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a.value), bits(&b.value));
    }
    let bytes = std::fs::read(&path).unwrap();
    assert_eq!(&bytes[..8], b"FDSEGCKP");
}

#[test]
fn checkpoint_with_wrong_tensor_header_is_rejected() {
    let m = UNet::init(UNetConfig { depth: 1, base_channels: 2, ..Default::default() }, 0).unwrap();
    let mut buf = Vec::new();
    m.write_checkpoint(&mut buf).unwrap();
    let needle = b"enc_1.conv1.kernel";
    let at = buf.windows(needle.len()).position(|w| w == needle).unwrap();
    buf[at] = b'x';
    assert!(matches!(UNet::read_checkpoint(&buf[..]), Err(Error::Parse { .. })));
}

#[test]
fn wrong_input_size_or_channels_is_rejected() {
    let m = UNet::init(UNetConfig::default(), 0).unwrap();
    assert!(matches!(m.predict(&images(1, 18, 16, 0)), Err(Error::Config(_))));
    let two = Tensor::<f32>::zeros(Shape::new(1, 16, 16, 2));
    assert!(matches!(m.predict(&two), Err(Error::Dim { axis: "channels", .. })));
}
