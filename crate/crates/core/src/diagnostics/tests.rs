use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::attacks::{RobustRow, RobustTable};
use crate::data::DatasetSpec;
use crate::models::{LinearSvm, SimpleCnn};
use crate::tape::Tape;
use crate::tensor::Tensor;
use crate::training::{train_svm, TrainConfig};

const FIXTURE_A: [f64; 2] = [49.218, -48.582];
const FIXTURE_B: [f64; 2] = [18.516, -18.059];

fn all_modes() -> Vec<PrecisionMode> {
    let mut out = Vec::new();
    for m in [PrecisionMode::FULL64, PrecisionMode::STANDARD32, PrecisionMode::REDUCED32] {
        out.push(m);
        if m.is_32bit() {
            out.push(m.with_flush_to_zero(true));
        }
    }
    out
}

fn tape_last_layer(w: &[f64], b: &[f64], h: &[f64], label: Label, mode: PrecisionMode) -> Vec<f64> {
    let n = h.len();
    let mut tape = Tape::new(mode);
    let hv = tape.leaf_cast(Tensor::from_vec(h.to_vec()), true);
    let wv = tape.leaf_cast(Tensor::new(&[2, n], w.to_vec()).unwrap(), false);
    let bv = tape.leaf_cast(Tensor::from_vec(b.to_vec()), false);
    let z = tape.linear(hv, wv, Some(bv)).unwrap();
    let y = tape.softmax(z).unwrap();
    let l = tape.cross_entropy(y, &label.onehot()).unwrap();
    tape.backward(l).unwrap().get_or_zeros(hv)
}

#[test]
fn oracle_matches_tape_bit_for_bit() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for case in 0..300 {
        let n = rng.random_range(1..40);
        let h: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let scale = 30.0 / n as f64;
        let w: Vec<f64> = (0..2 * n).map(|_| rng.random_range(-scale..scale)).collect();
        let b: Vec<f64> = (0..2).map(|_| rng.random_range(-1.0..1.0)).collect();
        let label = Label::from_index(case % 2).unwrap();
        for mode in all_modes() {
            let o = last_layer_oracle(&w, &b, &h, label, mode).unwrap();
            let t = tape_last_layer(&w, &b, &h, label, mode);
            let ob: Vec<u64> = o.iter().map(|v| v.to_bits()).collect();
            let tb: Vec<u64> = t.iter().map(|v| v.to_bits()).collect();
            assert_eq!(ob, tb, "case {case} {mode:?}");
        }
    }
}

/// `h = [0]`, so the logits equal the bias and the gradient is
/// `(y~_0 - y_0) - (y~_1 - y_1)` times the unit weights.
fn fixture_gradient(z: [f64; 2], mode: PrecisionMode) -> Vec<f64> {
    last_layer_oracle(&[1.0, -1.0], &z, &[0.0], Label::Mark, mode).unwrap()
}

#[test]
fn oracle_on_the_two_fixtures() {
    let f32_ftz = PrecisionMode::STANDARD32.with_flush_to_zero(true);
    assert_eq!(fixture_gradient(FIXTURE_A, f32_ftz), vec![0.0]);
    assert!(fixture_gradient(FIXTURE_B, f32_ftz)[0] != 0.0);
    assert!(fixture_gradient(FIXTURE_B, PrecisionMode::STANDARD32)[0] != 0.0);
    // extended-precision scalar: y~_1(A) = 1 / (1 + e^(z0 - z1)) ~ e^(-97.8)
    let expected = (-(FIXTURE_A[0] - FIXTURE_A[1])).exp();
    let g = fixture_gradient(FIXTURE_A, PrecisionMode::FULL64)[0];
    assert!(g != 0.0);
    assert!((-g - expected).abs() / expected < 1e-12, "{g} vs {expected}");
}

#[test]
fn oracle_rejects_bad_shapes() {
    let err = last_layer_oracle(&[1.0; 5], &[0.0; 2], &[1.0; 3], Label::Mark, PrecisionMode::FULL64);
    assert!(matches!(err, Err(Error::Dimension { .. })));
    let err = last_layer_oracle(&[1.0; 6], &[0.0; 3], &[1.0; 3], Label::Mark, PrecisionMode::FULL64);
    assert!(err.is_err());
}

#[test]
fn absorption_follows_exponent_gaps() {
    // bit-level reasoning: e^z1 + e^z2 rounds to e^z1 once the ratio is
    // below half an ulp (2^-(p)), and y~_2 ~ 2^(-gap) underflows past the
    // smallest normal (2^-126) or subnormal (2^-149) binary32
    let gap_bits = (FIXTURE_A[0] - FIXTURE_A[1]) / std::f64::consts::LN_2;
    let absorbed64 = gap_bits > 53.0;
    let absorbed32 = gap_bits > 24.0;
    let zero_ftz = gap_bits > 126.0;
    let zero_sub = gap_bits > 150.0;

    let f32 = absorption_check(FIXTURE_A, PrecisionMode::STANDARD32);
    assert_eq!(f32.sum_absorbed, absorbed32);
    assert_eq!(f32.underflowed_ratio, zero_sub);
    let ftz = absorption_check(FIXTURE_A, PrecisionMode::STANDARD32.with_flush_to_zero(true));
    assert_eq!((ftz.sum_absorbed, ftz.underflowed_ratio), (absorbed32, zero_ftz));
    let f64r = absorption_check(FIXTURE_A, PrecisionMode::FULL64);
    assert_eq!((f64r.sum_absorbed, f64r.underflowed_ratio), (absorbed64, false));
    assert!(f32.sum_absorbed && f64r.sum_absorbed);

    let calm = absorption_check([0.0, 0.0], PrecisionMode::STANDARD32);
    assert!(!calm.sum_absorbed && !calm.underflowed_ratio);
}

fn table(rows: &[(f64, f64)]) -> RobustTable {
    RobustTable {
        model: "m".into(),
        dataset: "d".into(),
        loss: "ce".into(),
        method: "apgd".into(),
        rows: rows
            .iter()
            .map(|&(epsilon, robust_acc)| RobustRow {
                direction: crate::attacks::Direction::Over,
                epsilon,
                n: 10,
                robust_acc,
            })
            .collect(),
    }
}

#[test]
fn masking_flags_cover_the_three_shapes() {
    let clean = masking_report(&table(&[(0.1, 0.9), (0.3, 0.4), (1.0, 0.0)])).unwrap();
    assert!(!clean[0].masked());
    assert_eq!(clean[0].verdict(), "no masking evidence");

    let unbounded = masking_report(&table(&[(0.1, 0.9), (0.3, 0.7), (1.0, 0.644)])).unwrap();
    assert!(unbounded[0].unbounded_nonzero && !unbounded[0].non_monotone);

    let rising = masking_flags(&[4.0 / 255.0, 8.0 / 255.0, 1.0], &[0.168, 0.304, 0.0]).unwrap();
    assert_eq!(rising, (false, true));
}

#[test]
fn masking_rejects_malformed_tables() {
    assert!(masking_flags(&[0.1, 1.0], &[0.5, 0.0]).is_err());
    assert!(masking_flags(&[0.1, 0.2, 0.3], &[0.5, 0.4, 0.0]).is_err());
    assert!(masking_flags(&[0.1, 0.2, 1.0], &[0.5, 0.0]).is_err());
    assert!(masking_report(&table(&[])).is_err());
}

fn trained_svm() -> (LinearSvm, Vec<BubbleImage>) {
    let data = DatasetSpec {
        bubbles: 40,
        swatches: 0,
        ..Default::default()
    }
    .generate(3)
    .unwrap();
    let mut m = LinearSvm::new();
    train_svm(
        &mut m,
        &data,
        &TrainConfig {
            validation_fraction: 0.0,
            ..TrainConfig::svm()
        },
    )
    .unwrap();
    (m, data)
}

#[test]
fn linear_svm_shows_no_zero_gradients() {
    let (m, data) = trained_svm();
    let cfg = AttackConfig {
        precision: PrecisionMode::STANDARD32,
        steps: 5,
        ..AttackConfig::pgd_reference()
    };
    let r = zero_grad_probe(&m, &data, &cfg).unwrap();
    assert_eq!(r.classes.len(), 2);
    for c in &r.classes {
        assert_eq!(c.first_step_zero, 0);
        assert_eq!(c.mean_zero_steps, 0.0);
        assert!(c.samples <= 20);
        assert!(c.mean_confidence_first.iter().all(|v| (0.0..=1.0).contains(v)));
    }
    let back: ZeroGradReport = serde_json::from_str(&r.to_json()).unwrap();
    assert_eq!(back, r);
    assert_eq!(r.to_text().lines().count(), 3);
}

#[test]
fn single_mode_sweep_equals_probe() {
    let (m, data) = trained_svm();
    let cfg = AttackConfig {
        steps: 3,
        ..AttackConfig::pgd_reference()
    };
    let sweep = precision_sweep(&m, &data, &cfg, &[PrecisionMode::FULL64]).unwrap();
    assert_eq!(sweep, vec![zero_grad_probe(&m, &data, &cfg).unwrap()]);
    assert!(precision_sweep(&m, &data, &cfg, &[]).is_err());
}

#[test]
fn saturated_head_puts_gaps_in_band() {
    let data = DatasetSpec {
        bubbles: 40,
        swatches: 0,
        ..Default::default()
    }
    .generate(5)
    .unwrap();
    let base = SimpleCnn::init(&mut ChaCha8Rng::seed_from_u64(6));
    let band = [115.0, 160.0];
    let m = saturate_head(&base, &data, band, 3000, 0.01).unwrap();
    let mut inside = 0;
    for s in &data {
        let z = m.logits(s.pixels(), PrecisionMode::FULL64).unwrap();
        assert!((z[0] + z[1]).abs() < 1e-9 * z[0].abs().max(1.0), "{z:?}");
        let y = s.label.index();
        let gap = z[y] - z[1 - y];
        inside += usize::from(gap >= band[0] && gap <= band[1]);
    }
    assert!(inside >= 36, "{inside}/40");
    // the trunk is untouched
    assert_eq!(m.params().slice(0), base.params().slice(0));
    assert!(saturate_head(&base, &data, [5.0, 1.0], 10, 0.01).is_err());
}
