use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::data::{BubbleImage, Provenance, PIXELS};
use crate::models::{LinearSvm, SimpleCnn};

fn random_svm(seed: u64) -> LinearSvm {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut m = LinearSvm::new();
    for w in m.params_mut().slice_mut(0) {
        *w = rng.random_range(-0.01..0.01);
    }
    m.params_mut().slice_mut(1)[0] = 0.5;
    m
}

fn random_image(rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..PIXELS).map(|_| rng.random::<f64>()).collect()
}

fn small_cnn() -> SimpleCnn {
    SimpleCnn::init(&mut ChaCha8Rng::seed_from_u64(11))
}

fn bits(v: &[f64]) -> Vec<u64> {
    v.iter().map(|x| x.to_bits()).collect()
}

fn cfg(method: AttackMethod, epsilon: f64, steps: usize, step_size: f64) -> AttackConfig {
    AttackConfig {
        method,
        epsilon,
        steps,
        step_size,
        stop_on_success: false,
        ..AttackConfig::default()
    }
}

#[test]
fn dlr_examples() {
    assert_eq!(binary_dlr_loss([3.0, 1.0], Label::Mark), -2.0);
    for a in [-7.5, 0.0, 1e30] {
        assert_eq!(binary_dlr_loss([a, a], Label::Mark), 0.0);
        assert_eq!(binary_dlr_loss([a, a], Label::NonMark), 0.0);
    }
}

proptest! {
    #[test]
    fn dlr_antisymmetric_in_label(a in -1e6f64..1e6, b in -1e6f64..1e6) {
        prop_assert_eq!(
            binary_dlr_loss([a, b], Label::Mark),
            -binary_dlr_loss([a, b], Label::NonMark)
        );
    }

    #[test]
    fn dlr_matches_tape_gradient_sign(a in -50.0f64..50.0, b in -50.0f64..50.0) {
        let mut tape = Tape::new(PrecisionMode::FULL64);
        let z = tape.leaf(Tensor::from_vec(vec![a, b]), true);
        let l = tape.binary_dlr(z, 0).unwrap();
        prop_assert_eq!(tape.value(l).data()[0], binary_dlr_loss([a, b], Label::Mark));
        let g = tape.backward(l).unwrap().get_or_zeros(z);
        prop_assert_eq!(g, vec![-1.0, 1.0]);
    }
}

#[test]
fn reference_pgd_config() {
    let c = AttackConfig::pgd_reference();
    assert_eq!((c.method, c.epsilon, c.step_size, c.steps), (AttackMethod::Pgd, 0.031, 0.00155, 20));
    assert!(c.validate().is_ok());
}

#[test]
fn config_rejects_bad_budget_and_step() {
    let bad = [
        AttackConfig { epsilon: 1.5, ..Default::default() },
        AttackConfig { epsilon: -0.1, ..Default::default() },
        AttackConfig { step_size: 0.0, ..Default::default() },
        AttackConfig { method: AttackMethod::Apgd, steps: 1, ..Default::default() },
    ];
    for c in bad {
        assert!(matches!(c.validate(), Err(Error::Validation(_))), "{c:?}");
    }
}

#[test]
fn config_json_round_trip_and_unknown_fields() {
    let c = AttackConfig::apgd(AttackLoss::BinaryDlr, 8.0 / 255.0);
    let s = serde_json::to_string(&c).unwrap();
    assert_eq!(serde_json::from_str::<AttackConfig>(&s).unwrap(), c);
    assert!(serde_json::from_str::<AttackConfig>(r#"{"epsilon":0.1,"bogus":1}"#).is_err());
}

#[test]
fn zero_budget_returns_input_bit_exactly() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let m = small_cnn();
    let x = random_image(&mut rng);
    for method in [AttackMethod::Fgsm, AttackMethod::Pgd, AttackMethod::Mim, AttackMethod::Apgd] {
        let r = attack(&m, &x, Label::Mark, &cfg(method, 0.0, 3, 0.01)).unwrap();
        assert_eq!(bits(&r.adversarial), bits(&x), "{method:?}");
        assert_eq!(r.linf, 0.0);
    }
}

/// Closed form of FGSM on the linear model: the CE gradient w.r.t. x is a
/// positive multiple of `s * w` with `s = +1` for Mark (raising p) and
/// `-1` for NonMark.
fn linear_fgsm_flips(m: &LinearSvm, x: &[f64], label: Label, eps: f64) -> bool {
    let s = if label == Label::Mark { 1.0 } else { -1.0 };
    let p: f64 = m
        .weights()
        .iter()
        .zip(x)
        .map(|(&w, &xi)| w * (xi + eps * s * sign(w)).clamp(0.0, 1.0))
        .sum::<f64>()
        + m.bias();
    match label {
        Label::Mark => p > 0.5,
        Label::NonMark => p <= 0.5,
    }
}

#[test]
fn fgsm_on_linear_model_matches_closed_form() {
    let m = random_svm(2);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut flips = 0;
    for i in 0..500 {
        let x = random_image(&mut rng);
        let eps = rng.random_range(0.0..0.05);
        let label = if i % 2 == 0 { Label::Mark } else { Label::NonMark };
        let r = fgsm(&m, &x, label, &cfg(AttackMethod::Fgsm, eps, 1, 0.01)).unwrap();
        let expected = linear_fgsm_flips(&m, &x, label, eps)
            || m.predict(&x, PrecisionMode::FULL64).unwrap() != label;
        assert_eq!(r.success, expected, "sample {i}, eps {eps}");
        flips += usize::from(r.success);
    }
    // both outcomes occur, so the comparison is not vacuous
    assert!(flips > 50 && flips < 450, "{flips}");
}

#[test]
fn zero_gradient_leaves_image_unchanged() {
    let m = LinearSvm::new();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = random_image(&mut rng);
    for method in [AttackMethod::Fgsm, AttackMethod::Mim] {
        let r = attack(&m, &x, Label::NonMark, &cfg(method, 0.1, 5, 0.01)).unwrap();
        assert_eq!(bits(&r.adversarial), bits(&x));
        assert!(r.trace.iter().all(|t| t.max_abs_grad == 0.0));
        let expected = if method == AttackMethod::Fgsm { 1 } else { 6 };
        assert_eq!(r.trace.len(), expected);
        assert!(r.trace.iter().enumerate().all(|(i, t)| t.step == i));
    }
}

#[test]
fn one_step_pgd_equals_fgsm() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = random_image(&mut rng);
    let svm = random_svm(6);
    let cnn = small_cnn();
    let models: [&dyn Classifier; 2] = [&svm, &cnn];
    for m in models {
        for label in [Label::Mark, Label::NonMark] {
            let p = pgd(m, &x, label, &cfg(AttackMethod::Pgd, 0.03, 1, 0.01)).unwrap();
            let f = fgsm(m, &x, label, &cfg(AttackMethod::Fgsm, 0.01, 1, 0.01)).unwrap();
            assert_eq!(bits(&p.adversarial), bits(&f.adversarial));
            assert_eq!(p.success, f.success);
        }
    }
}

#[test]
fn mim_without_momentum_follows_pgd() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = random_image(&mut rng);
    let m = small_cnn();
    let c = AttackConfig {
        momentum_decay: 0.0,
        ..cfg(AttackMethod::Mim, 0.02, 4, 0.004)
    };
    let a = mim(&m, &x, Label::Mark, &c).unwrap();
    let b = pgd(&m, &x, Label::Mark, &c).unwrap();
    assert_eq!(bits(&a.adversarial), bits(&b.adversarial));
    assert_eq!(a.trace, b.trace);
}

#[test]
fn every_iterate_stays_in_the_ball() {
    // runs are deterministic, so the k-step result is the k-th iterate
    let m = random_svm(8);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for run in 0..6 {
        let x = random_image(&mut rng);
        let eps = rng.random_range(0.001..0.2);
        let method = [AttackMethod::Pgd, AttackMethod::Mim, AttackMethod::Apgd][run % 3];
        for k in 2..=12 {
            let c = AttackConfig {
                random_start: true,
                seed: run as u64,
                ..cfg(method, eps, k, eps / 3.0)
            };
            let r = attack(&m, &x, Label::from_index(run % 2).unwrap(), &c).unwrap();
            assert!(r.linf <= eps + 1e-9, "{method:?} k={k}: {} > {eps}", r.linf);
            assert!(r.adversarial.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
}

#[test]
fn apgd_returns_best_visited_point() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let m = small_cnn();
    let x = random_image(&mut rng);
    for loss in [AttackLoss::CrossEntropy, AttackLoss::BinaryDlr] {
        let c = AttackConfig {
            loss,
            stop_on_success: false,
            steps: 12,
            ..AttackConfig::apgd(loss, 0.02)
        };
        let r = apgd(&m, &x, Label::Mark, &c).unwrap();
        assert_eq!(r.trace.len(), 13);
        let max = r.trace.iter().map(|t| t.loss).fold(f64::NEG_INFINITY, f64::max);
        assert!(r.loss >= max, "{} < {max}", r.loss);
        assert!(r.linf <= 0.02 + 1e-9);
    }
}

#[test]
fn apgd_checkpoint_schedule() {
    // p = 0, .22, .41, .57, .70, .80, .87, .93, .99, 1.05
    assert_eq!(apgd_checkpoints(100), vec![22, 41, 57, 70, 80, 87, 93, 99]);
    assert_eq!(apgd_checkpoints(2), vec![1]);
}

#[test]
fn apgd_dlr_full_budget_always_flips_linear_model() {
    let m = random_svm(12);
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for i in 0..40 {
        let x = random_image(&mut rng);
        let label = Label::from_index(i % 2).unwrap();
        let r = apgd(&m, &x, label, &AttackConfig::apgd(AttackLoss::BinaryDlr, 1.0)).unwrap();
        assert!(r.success, "sample {i}");
    }
}

#[test]
fn attacks_are_deterministic() {
    let m = small_cnn();
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let x = random_image(&mut rng);
    let c = AttackConfig {
        random_start: true,
        seed: 99,
        ..cfg(AttackMethod::Apgd, 0.05, 4, 0.01)
    };
    assert_eq!(apgd(&m, &x, Label::NonMark, &c).unwrap(), apgd(&m, &x, Label::NonMark, &c).unwrap());
}

#[test]
fn trace_dump_is_one_json_object_per_line() {
    let m = random_svm(15);
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let x = random_image(&mut rng);
    let r = pgd(&m, &x, Label::Mark, &cfg(AttackMethod::Pgd, 0.02, 3, 0.005)).unwrap();
    let dump = r.trace_jsonl();
    let lines: Vec<&str> = dump.lines().collect();
    assert_eq!(lines.len(), 4);
    let first: StepTrace = serde_json::from_str(lines[0]).unwrap();
    assert_eq!(first, r.trace[0]);
}

fn labelled(m: &LinearSvm, n: usize, seed: u64) -> Vec<BubbleImage> {
    // labels follow the model so every sample is correctly classified
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let x = random_image(&mut rng);
            let label = m.predict(&x, PrecisionMode::FULL64).unwrap();
            BubbleImage::new(x, label, Provenance::Swatch).unwrap()
        })
        .collect()
}

#[test]
fn robust_accuracy_zero_budget_row_is_one() {
    let m = random_svm(17);
    let data = labelled(&m, 40, 18);
    let table = robust_accuracy(&m, &data, &cfg(AttackMethod::Pgd, 0.0, 5, 0.01), &[0.0, 0.05], "toy").unwrap();
    for r in table.rows.iter().filter(|r| r.epsilon == 0.0) {
        assert_eq!(r.robust_acc, 1.0);
    }
    assert_eq!(table.rows.len(), 4);
    let csv = table.to_csv();
    assert!(csv.starts_with("model,dataset,loss,direction,epsilon,robust_acc\n"));
    assert_eq!(csv.lines().count(), 5);
    let back: RobustTable = serde_json::from_str(&table.to_json()).unwrap();
    assert_eq!(back, table);
}

#[test]
fn robust_accuracy_needs_a_correct_pool() {
    let m = random_svm(19);
    let data: Vec<BubbleImage> = labelled(&m, 10, 20)
        .into_iter()
        .map(|mut s| {
            s.label = s.label.other();
            s
        })
        .collect();
    let err = robust_accuracy(&m, &data, &AttackConfig::default(), &[0.1], "toy").unwrap_err();
    assert!(matches!(err, Error::Validation(_)));
}

#[test]
fn dlr_success_set_grows_with_budget() {
    let m = random_svm(21);
    let data = labelled(&m, 100, 22);
    for eps in [0.002, 0.004, 0.008, 0.016] {
        for s in &data {
            let small = apgd(&m, s.pixels(), s.label, &AttackConfig::apgd(AttackLoss::BinaryDlr, eps)).unwrap();
            if small.success {
                let big = apgd(&m, s.pixels(), s.label, &AttackConfig::apgd(AttackLoss::BinaryDlr, 2.0 * eps)).unwrap();
                assert!(big.success, "eps {eps}");
            }
        }
    }
}
