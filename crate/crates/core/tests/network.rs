use eddyseg_core::net::{lateral_pairs, shape_trace, Network, NetworkSpec};
use eddyseg_core::{ConvSpec, Mode, Tape, Tensor4};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Closed-form parameter count, written out layer by layer.
fn expected_params(in_c: usize, base: usize) -> usize {
    let conv3 = |a: usize, b: usize| 9 * a * b;
    let bn = |c: usize| 2 * c;
    let mut total = 0;
    let mut cin = in_c;
    for c in [base, 2 * base, 4 * base, 8 * base, 16 * base] {
        total += conv3(cin, c) + bn(c) + conv3(c, c) + bn(c);
        cin = c;
    }
    for c in [8 * base, 4 * base, 2 * base, base] {
        total += 4 * cin * c + c; // transpose conv
        total += conv3(c, c) + c; // lateral conv with bias
        total += conv3(c, c) + bn(c); // merge conv
        cin = c;
    }
    total + 3 * cin + 3
}

#[test]
fn parameter_count_matches_layer_arithmetic() {
    for (in_c, rate) in [(4, 4), (4, 1), (1, 4), (2, 2)] {
        let spec = NetworkSpec { in_channels: in_c, dilation: rate, ..NetworkSpec::default() };
        let net = Network::<f32>::build(spec, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(net.param_count(), expected_params(in_c, 8), "in {in_c} rate {rate}");
    }
}

#[test]
fn ladder_holds_for_every_multiple_of_16() {
    let spec = NetworkSpec::default();
    for size in (16..=256).step_by(16) {
        let rows = shape_trace(&spec, size, 2 * size).unwrap();
        assert_eq!(rows.len(), 11);
        for (i, r) in rows[1..5].iter().enumerate() {
            assert_eq!((r.height, r.width), (size >> (i + 1), 2 * size >> (i + 1)));
        }
        let t = &rows[5];
        assert_eq!((t.channels, t.height), (128, size / 16));
        let head = rows.last().unwrap();
        assert_eq!((head.channels, head.height, head.width), (3, size, 2 * size));
        let pairs = lateral_pairs(&spec, size, 2 * size).unwrap();
        assert_eq!(pairs.len(), 4);
        assert!(pairs.iter().all(|(a, b)| a == b));
    }
    for bad in [8, 24, 100] {
        assert!(shape_trace(&spec, bad, 64).is_err());
    }
}

#[test]
fn rate_four_kernel_reaches_nine_cells_spread_by_four() {
    let spec = ConvSpec::same(1, 1, 3, 4, false);
    assert_eq!(spec.effective_extent(), (9, 9));
    let mut x = Tensor4::<f64>::zeros([1, 1, 17, 17]);
    x.set([0, 0, 8, 8], 1.0);
    let mut tape = Tape::new();
    let xv = tape.constant(x);
    let w = tape.constant(Tensor4::full([1, 1, 3, 3], 1.0));
    let y = tape.conv2d(xv, w, None, spec).unwrap();
    let out = tape.value(y);
    assert_eq!(out.dims(), [1, 1, 17, 17]);
    for yy in 0..17 {
        for xx in 0..17 {
            let hit = [4, 8, 12].contains(&yy) && [4, 8, 12].contains(&xx);
            assert_eq!(out.at([0, 0, yy, xx]), if hit { 1.0 } else { 0.0 }, "({yy},{xx})");
        }
    }
}

#[test]
fn eval_forward_ignores_dropout_rng() {
    let net = Network::<f32>::build(NetworkSpec::default(), &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    let x = Tensor4::from_fn([2, 4, 32, 32], |[n, c, y, x]| ((n + c * 3 + y * 5 + x * 7) % 11) as f32 / 11.0);
    let run = |seed| {
        let mut tape = Tape::new();
        let params = net.bind(&mut tape, false);
        let input = tape.constant(x.clone());
        let out = net.forward(&mut tape, &params, input, Mode::Eval, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        tape.value(out.probs).clone()
    };
    assert_eq!(run(1), run(2));
    assert_eq!(run(1), net.predict(&x).unwrap());
}
