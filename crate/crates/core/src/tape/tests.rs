use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

const FD_STEP: f64 = 1e-6;
const FD_TOL: f64 = 1e-5;

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Compares the tape gradient of every input against central differences.
fn check_fd(inputs: &[Tensor], build: impl Fn(&mut Tape, &[Var]) -> Var) {
    let mut tape = Tape::new(PrecisionMode::FULL64);
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let loss = build(&mut tape, &vars);
    let grads = tape.backward(loss).unwrap();

    let eval = |perturbed: &[Tensor]| {
        let mut t = Tape::new(PrecisionMode::FULL64);
        let v: Vec<Var> = perturbed.iter().map(|x| t.leaf(x.clone(), false)).collect();
        let l = build(&mut t, &v);
        t.value(l).data()[0]
    };

    for (which, input) in inputs.iter().enumerate() {
        let analytic = grads.get_or_zeros(vars[which]);
        let mut numeric = vec![0.0; input.len()];
        for i in 0..input.len() {
            let mut plus = inputs.to_vec();
            plus[which].data_mut()[i] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[which].data_mut()[i] -= FD_STEP;
            numeric[i] = (eval(&plus) - eval(&minus)) / (2.0 * FD_STEP);
        }
        let diff: f64 = analytic
            .iter()
            .zip(&numeric)
            .map(|(a, n)| (a - n).powi(2))
            .sum::<f64>()
            .sqrt();
        let scale = numeric
            .iter()
            .map(|n| n * n)
            .sum::<f64>()
            .sqrt()
            .max(analytic.iter().map(|a| a * a).sum::<f64>().sqrt())
            .max(1e-12);
        assert!(
            diff / scale < FD_TOL,
            "input {which}: relative error {} (analytic {analytic:?}, numeric {numeric:?})",
            diff / scale
        );
    }
}

#[test]
fn conv2d_identity_kernel_picks_center() {
    let mut tape = Tape::new(PrecisionMode::FULL64);
    let x = tape.leaf(
        Tensor::new(&[1, 3, 3], (1..=9).map(f64::from).collect()).unwrap(),
        false,
    );
    let mut k = vec![0.0; 9];
    k[4] = 1.0;
    let k = tape.leaf(Tensor::new(&[1, 1, 3, 3], k).unwrap(), false);
    let y = tape.conv2d(x, k, None).unwrap();
    assert_eq!(tape.value(y).shape(), &[1, 1, 1]);
    assert_eq!(tape.value(y).data(), &[5.0]);
}

#[test]
fn conv2d_constant_case() {
    let mut tape = Tape::new(PrecisionMode::FULL64);
    let x = tape.leaf(Tensor::full(&[1, 4, 4], 1.0), false);
    let k = tape.leaf(Tensor::full(&[1, 1, 3, 3], 1.0), false);
    let y = tape.conv2d(x, k, None).unwrap();
    assert_eq!(tape.value(y).shape(), &[1, 2, 2]);
    assert_eq!(tape.value(y).data(), &[9.0; 4]);
}

#[test]
fn conv2d_rejects_channel_mismatch() {
    let mut tape = Tape::new(PrecisionMode::FULL64);
    let x = tape.leaf(Tensor::zeros(&[2, 4, 4]), false);
    let k = tape.leaf(Tensor::zeros(&[1, 3, 3, 3]), false);
    let err = tape.conv2d(x, k, None).unwrap_err();
    assert!(err.to_string().contains("channel"), "{err}");
}

#[test]
fn conv2d_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let inputs = [
        random_tensor(&mut rng, &[1, 5, 5]),
        random_tensor(&mut rng, &[1, 1, 3, 3]),
    ];
    check_fd(&inputs, |t, v| {
        let y = t.conv2d(v[0], v[1], None).unwrap();
        t.sum(y)
    });
}

#[test]
fn conv2d_multichannel_with_bias_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let inputs = [
        random_tensor(&mut rng, &[2, 6, 5]),
        random_tensor(&mut rng, &[3, 2, 3, 3]),
        random_tensor(&mut rng, &[3]),
        random_tensor(&mut rng, &[3, 4, 3]),
    ];
    check_fd(&inputs, |t, v| {
        let y = t.conv2d(v[0], v[1], Some(v[2])).unwrap();
        let w = t.mul(y, v[3]).unwrap();
        t.sum(w)
    });
}

#[test]
fn conv_transpose_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let inputs = [
        random_tensor(&mut rng, &[2, 3, 2]),
        random_tensor(&mut rng, &[2, 2, 3, 3]),
        random_tensor(&mut rng, &[2]),
        random_tensor(&mut rng, &[2, 10, 6]),
    ];
    check_fd(&inputs, |t, v| {
        let y = t.conv_transpose2d(v[0], v[1], Some(v[2]), 3, (1, 0)).unwrap();
        let w = t.mul(y, v[3]).unwrap();
        t.sum(w)
    });
}

#[test]
fn conv_transpose_output_extent() {
    let mut tape = Tape::new(PrecisionMode::FULL64);
    let x = tape.leaf(Tensor::zeros(&[8, 3, 4]), false);
    let k = tape.leaf(Tensor::zeros(&[8, 8, 3, 3]), false);
    let y = tape.conv_transpose2d(x, k, None, 3, (1, 0)).unwrap();
    assert_eq!(tape.value(y).shape(), &[8, 10, 12]);
}

#[test]
fn maxpool_picks_window_maximum() {
    let mut tape = Tape::new(PrecisionMode::FULL64);
    let x = tape.leaf(Tensor::new(&[1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap(), false);
    let y = tape.maxpool2(x).unwrap();
    assert_eq!(tape.value(y).data(), &[4.0]);
}

#[test]
fn maxpool_tie_routes_gradient_to_first_cell() {
    let mut tape = Tape::new(PrecisionMode::FULL64);
    let x = tape.leaf(Tensor::full(&[1, 4, 4], 0.5), true);
    let y = tape.maxpool2(x).unwrap();
    assert_eq!(tape.value(y).data(), &[0.5; 4]);
    let s = tape.sum(y);
    let g = tape.backward(s).unwrap().get_or_zeros(x);
    let mut expected = vec![0.0; 16];
    for idx in [0, 2, 8, 10] {
        expected[idx] = 1.0;
    }
    assert_eq!(g, expected);
}

#[test]
fn maxpool_truncates_odd_extents() {
    let mut tape = Tape::new(PrecisionMode::FULL64);
    let x = tape.leaf(Tensor::zeros(&[2, 5, 7]), false);
    let y = tape.maxpool2(x).unwrap();
    assert_eq!(tape.value(y).shape(), &[2, 2, 3]);
}

#[test]
fn maxpool_rejects_empty_input() {
    let mut tape = Tape::new(PrecisionMode::FULL64);
    let x = tape.leaf(Tensor::zeros(&[1, 0, 0]), false);
    assert!(matches!(tape.maxpool2(x), Err(Error::Dimension { .. })));
}

#[test]
fn maxpool_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let inputs = [
        random_tensor(&mut rng, &[1, 6, 6]),
        random_tensor(&mut rng, &[1, 3, 3]),
    ];
    check_fd(&inputs, |t, v| {
        let y = t.maxpool2(v[0]).unwrap();
        let w = t.mul(y, v[1]).unwrap();
        t.sum(w)
    });
}

#[test]
fn linear_identity_is_passthrough() {
    let mut tape = Tape::new(PrecisionMode::FULL64);
    let x = tape.leaf(Tensor::from_vec(vec![0.3, -2.0]), false);
    let w = tape.leaf(Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap(), false);
    let b = tape.leaf(Tensor::zeros(&[2]), false);
    let y = tape.linear(x, w, Some(b)).unwrap();
    assert_eq!(tape.value(y).data(), &[0.3, -2.0]);
}

#[test]
fn linear_input_gradient_is_upstream_times_weights() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let w = random_tensor(&mut rng, &[3, 4]);
    let up = random_tensor(&mut rng, &[3]);
    let mut tape = Tape::new(PrecisionMode::FULL64);
    let x = tape.leaf(random_tensor(&mut rng, &[4]), true);
    let wv = tape.leaf(w.clone(), false);
    let uv = tape.leaf(up.clone(), false);
    let y = tape.linear(x, wv, None).unwrap();
    let yu = tape.mul(y, uv).unwrap();
    let loss = tape.sum(yu);
    let g = tape.backward(loss).unwrap().get_or_zeros(x);

    let mut oracle = [0.0; 4];
    for (j, o) in oracle.iter_mut().enumerate() {
        for r in 0..3 {
            *o += up.data()[r] * w.data()[r * 4 + j];
        }
    }
    assert_eq!(g, oracle);
}

#[test]
fn linear_rejects_inner_mismatch() {
    let mut tape = Tape::new(PrecisionMode::FULL64);
    let x = tape.leaf(Tensor::zeros(&[3]), false);
    let w = tape.leaf(Tensor::zeros(&[2, 4]), false);
    assert!(tape.linear(x, w, None).is_err());
}

#[test]
fn softmax_symmetry() {
    let mut tape = Tape::new(PrecisionMode::FULL64);
    let z = tape.leaf(Tensor::from_vec(vec![0.0, 0.0]), false);
    let y = tape.softmax(z).unwrap();
    assert_eq!(tape.value(y).data(), &[0.5, 0.5]);
}

#[test]
fn softmax_absorbs_small_term_in_binary32() {
    let terms = softmax_terms(&[49.218, -48.582], PrecisionMode::STANDARD32, false);
    assert_eq!(terms.probs[0], 1.0);
    assert!(terms.probs[1] < 1e-42);
    assert_eq!(format!("{:.4e}", terms.exps[0]), "2.3720e21");
    assert_eq!(format!("{:.4e}", terms.exps[1]), "7.9635e-22");
    // the small exponential is swallowed by the large one
    assert_eq!(terms.sum, terms.exps[0]);
}

#[test]
fn softmax_case_b_in_binary32() {
    let terms = softmax_terms(&[18.516, -18.059], PrecisionMode::STANDARD32, false);
    // 1 - 1.3e-16 is not representable next to 1.0 in binary32
    assert_eq!(terms.probs[0], 1.0);
    assert_eq!(format!("{:.6e}", terms.probs[1]), "1.305207e-16");
}

#[test]
fn softmax_needs_two_logits() {
    let mut tape = Tape::new(PrecisionMode::FULL64);
    let z = tape.leaf(Tensor::from_vec(vec![1.0]), false);
    assert!(tape.softmax(z).is_err());
}

#[test]
fn stable_softmax_survives_overflow() {
    let mut tape = Tape::new(PrecisionMode::STANDARD32);
    let z = tape.leaf(Tensor::from_vec(vec![200.0, 0.0]), false);
    let raw = tape.softmax(z).unwrap();
    let stable = tape.softmax_stable(z).unwrap();
    assert!(tape.value(raw).data()[0].is_nan());
    assert_eq!(tape.value(stable).data()[0], 1.0);
}

#[test]
fn cross_entropy_basic_values() {
    let mut tape = Tape::new(PrecisionMode::FULL64);
    let c = tape.leaf(Tensor::from_vec(vec![1.0, 0.0]), false);
    let l = tape.cross_entropy(c, &[1.0, 0.0]).unwrap();
    assert_eq!(tape.value(l).data(), &[0.0]);
    let c = tape.leaf(Tensor::from_vec(vec![0.5, 0.5]), false);
    let l = tape.cross_entropy(c, &[1.0, 0.0]).unwrap();
    assert_eq!(tape.value(l).data(), &[std::f64::consts::LN_2]);
}

#[test]
fn cross_entropy_of_zero_confidence_is_infinite() {
    let mut tape = Tape::new(PrecisionMode::FULL64);
    let c = tape.leaf(Tensor::from_vec(vec![1.0, 0.0]), false);
    let l = tape.cross_entropy(c, &[0.0, 1.0]).unwrap();
    assert_eq!(tape.value(l).data()[0], f64::INFINITY);
}

#[test]
fn cross_entropy_matches_scalar_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..20 {
        let raw: Vec<f64> = (0..4).map(|_| rng.random_range(0.01..1.0)).collect();
        let total: f64 = raw.iter().sum();
        let conf: Vec<f64> = raw.iter().map(|v| v / total).collect();
        let label = rng.random_range(0..4);
        let mut onehot = vec![0.0; 4];
        onehot[label] = 1.0;
        let mut tape = Tape::new(PrecisionMode::FULL64);
        let c = tape.leaf(Tensor::from_vec(conf.clone()), false);
        let l = tape.cross_entropy(c, &onehot).unwrap();
        let oracle: f64 = -onehot
            .iter()
            .zip(&conf)
            .filter(|(y, _)| **y > 0.0)
            .map(|(y, p)| y * p.ln())
            .sum::<f64>();
        let got = tape.value(l).data()[0];
        assert!((got - oracle).abs() / oracle.abs() < 1e-12);
    }
}

#[test]
fn cross_entropy_rejects_bad_labels() {
    let mut tape = Tape::new(PrecisionMode::FULL64);
    let c = tape.leaf(Tensor::from_vec(vec![0.5, 0.5]), false);
    for bad in [[0.5, 0.5], [1.0, 1.0], [0.0, 0.0]] {
        assert!(matches!(
            tape.cross_entropy(c, &bad),
            Err(Error::Validation(_))
        ));
    }
}

#[test]
fn backward_of_sum_is_all_ones() {
    let mut tape = Tape::new(PrecisionMode::FULL64);
    let x = tape.leaf(Tensor::new(&[2, 3], vec![1.0; 6]).unwrap(), true);
    let s = tape.sum(x);
    let g = tape.backward(s).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[1.0; 6]);
}

#[test]
fn linear_softmax_ce_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let inputs = [
        random_tensor(&mut rng, &[5]),
        random_tensor(&mut rng, &[3, 5]),
        random_tensor(&mut rng, &[3]),
    ];
    for stable in [false, true] {
        check_fd(&inputs, |t, v| {
            let z = t.linear(v[0], v[1], Some(v[2])).unwrap();
            let y = if stable {
                t.softmax_stable(z).unwrap()
            } else {
                t.softmax(z).unwrap()
            };
            t.cross_entropy(y, &[0.0, 1.0, 0.0]).unwrap()
        });
    }
}

#[test]
fn softmax_backward_without_fusion_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let inputs = [random_tensor(&mut rng, &[4]), random_tensor(&mut rng, &[4])];
    check_fd(&inputs, |t, v| {
        let y = t.softmax(v[0]).unwrap();
        let w = t.mul(y, v[1]).unwrap();
        t.sum(w)
    });
}

#[test]
fn composite_net_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let inputs = [
        random_tensor(&mut rng, &[1, 8, 8]),
        random_tensor(&mut rng, &[2, 1, 3, 3]),
        random_tensor(&mut rng, &[2]),
        random_tensor(&mut rng, &[2, 6]),
        random_tensor(&mut rng, &[2]),
    ];
    check_fd(&inputs, |t, v| {
        let c = t.conv2d(v[0], v[1], Some(v[2])).unwrap();
        let r = t.relu(c);
        let p = t.maxpool2(r).unwrap();
        let p = t.crop_rows(p, 0, 1).unwrap();
        let f = t.flatten(p).unwrap();
        let z = t.linear(f, v[3], Some(v[4])).unwrap();
        let y = t.softmax_stable(z).unwrap();
        t.cross_entropy(y, &[1.0, 0.0]).unwrap()
    });
}

#[test]
fn dlr_and_mse_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let target = random_tensor(&mut rng, &[1, 3, 3]);
    let inputs = [random_tensor(&mut rng, &[1, 3, 3]), random_tensor(&mut rng, &[2, 9])];
    check_fd(&inputs, |t, v| {
        let m = t.mse(v[0], &target).unwrap();
        let f = t.flatten(v[0]).unwrap();
        let z = t.linear(f, v[1], None).unwrap();
        let d = t.binary_dlr(z, 1).unwrap();
        let s = t.scale(d, 0.5);
        t.add(m, s).unwrap()
    });
}

#[test]
fn binary_dlr_sign() {
    let mut tape = Tape::new(PrecisionMode::FULL64);
    let z = tape.leaf(Tensor::from_vec(vec![2.0, -1.0]), true);
    let l = tape.binary_dlr(z, 0).unwrap();
    assert_eq!(tape.value(l).data(), &[-3.0]);
    let g = tape.backward(l).unwrap().get_or_zeros(z);
    assert_eq!(g, vec![-1.0, 1.0]);
}

fn fixture_a_gradient(mode: PrecisionMode) -> Vec<f64> {
    let mut tape = Tape::new(mode);
    let h = tape.leaf(Tensor::from_vec(vec![49.218, -48.582]), true);
    let w = tape.leaf(Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap(), false);
    let b = tape.leaf(Tensor::zeros(&[2]), false);
    let z = tape.linear(h, w, Some(b)).unwrap();
    let y = tape.softmax(z).unwrap();
    let l = tape.cross_entropy(y, &[1.0, 0.0]).unwrap();
    tape.backward(l).unwrap().get_or_zeros(h)
}

#[test]
fn saturated_logits_give_exact_zero_gradient_with_flush() {
    let g = fixture_a_gradient(PrecisionMode::STANDARD32.with_flush_to_zero(true));
    assert!(g.iter().all(|&v| v == 0.0), "{g:?}");
}

#[test]
fn without_flush_the_gradient_is_denormal() {
    let g = fixture_a_gradient(PrecisionMode::STANDARD32);
    assert_eq!(g[0], 0.0);
    assert!(g[1] != 0.0 && g[1].abs() < 1e-42, "{g:?}");
}

#[test]
fn full_precision_gradient_is_nonzero() {
    let g = fixture_a_gradient(PrecisionMode::FULL64);
    assert!(g.iter().any(|&v| v != 0.0));
}

#[test]
fn zero_upstream_gives_zero_leaf_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut tape = Tape::new(PrecisionMode::STANDARD32);
    let x = tape.leaf_cast(random_tensor(&mut rng, &[1, 6, 6]), true);
    let k = tape.leaf_cast(random_tensor(&mut rng, &[2, 1, 3, 3]), true);
    let c = tape.conv2d(x, k, None).unwrap();
    let zero = tape.leaf(Tensor::zeros(&[2, 4, 4]), false);
    let m = tape.mul(c, zero).unwrap();
    let s = tape.sum(m);
    let g = tape.backward(s).unwrap();
    assert!(g.get_or_zeros(x).iter().all(|&v| v == 0.0));
    assert!(g.get_or_zeros(k).iter().all(|&v| v == 0.0));
}

#[test]
fn dropout_scales_survivors() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut tape = Tape::new(PrecisionMode::FULL64);
    let x = tape.leaf(Tensor::full(&[1000], 1.0), true);
    let d = tape.dropout(x, 0.5, &mut rng).unwrap();
    let out = tape.value(d).data().to_vec();
    assert!(out.iter().all(|&v| v == 0.0 || v == 2.0));
    let kept = out.iter().filter(|&&v| v > 0.0).count();
    assert!((400..600).contains(&kept));
    let s = tape.sum(d);
    let g = tape.backward(s).unwrap().get_or_zeros(x);
    assert_eq!(g, out);
}

#[test]
fn standard32_elementwise_matches_native_f32() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let a: Vec<f32> = (0..64).map(|_| rng.random_range(-10.0..10.0)).collect();
    let b: Vec<f32> = (0..64).map(|_| rng.random_range(-10.0..10.0)).collect();
    let mut tape = Tape::new(PrecisionMode::STANDARD32);
    let va = tape.leaf(Tensor::from_vec(a.iter().map(|&v| v as f64).collect()), false);
    let vb = tape.leaf(Tensor::from_vec(b.iter().map(|&v| v as f64).collect()), false);
    let m = tape.mul(va, vb).unwrap();
    let s = tape.sub(va, vb).unwrap();
    for i in 0..64 {
        assert_eq!(tape.value(m).data()[i], (a[i] * b[i]) as f64);
        assert_eq!(tape.value(s).data()[i], (a[i] - b[i]) as f64);
    }
}

#[test]
fn standard32_linear_matches_native_f32_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let w: Vec<f32> = (0..12).map(|_| rng.random_range(-1.0..1.0)).collect();
    let x: Vec<f32> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut tape = Tape::new(PrecisionMode::STANDARD32);
    let xv = tape.leaf(Tensor::from_vec(x.iter().map(|&v| v as f64).collect()), false);
    let wv = tape.leaf(
        Tensor::new(&[3, 4], w.iter().map(|&v| v as f64).collect()).unwrap(),
        false,
    );
    let y = tape.linear(xv, wv, None).unwrap();
    for r in 0..3 {
        let mut acc = 0.0f32;
        for c in 0..4 {
            acc += w[r * 4 + c] * x[c];
        }
        assert_eq!(tape.value(y).data()[r], acc as f64);
    }
}

#[test]
fn reduced32_contraction_outputs_come_from_reduced_operands() {
    let mut tape = Tape::new(PrecisionMode::REDUCED32);
    let x = 1.0 + 2f64.powi(-12);
    let xv = tape.leaf(Tensor::from_vec(vec![x]), false);
    let wv = tape.leaf(Tensor::new(&[1, 1], vec![1.0]).unwrap(), false);
    let y = tape.linear(xv, wv, None).unwrap();
    assert_eq!(tape.value(y).data(), &[1.0]);
}

#[test]
fn softmax_sums_to_one_in_full_precision() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    for _ in 0..200 {
        let n = rng.random_range(2..8);
        let z: Vec<f64> = (0..n).map(|_| rng.random_range(-50.0..50.0)).collect();
        let t = softmax_terms(&z, PrecisionMode::FULL64, false);
        let s: f64 = t.probs.iter().sum();
        assert!((s - 1.0).abs() < 1e-12);
        assert!(t.probs.iter().all(|&p| p >= 0.0));
    }
}
