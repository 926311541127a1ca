use bubblelab::attacks::{apgd, AttackConfig, AttackLoss};
use bubblelab::channel::{channel_roundtrip, ChannelConfig, PAGE_CAPACITY};
use bubblelab::models::{image_leaf, Classifier};
use bubblelab::{PrecisionMode, Tape};
use bubblelab_bench::{bubbles, cnn};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

fn cnn_pass(c: &mut Criterion) {
    let model = cnn();
    let image = bubbles(1).remove(0);
    let mut group = c.benchmark_group("cnn");
    for mode in [PrecisionMode::FULL64, PrecisionMode::STANDARD32, PrecisionMode::REDUCED32] {
        group.bench_with_input(BenchmarkId::new("forward", mode.label()), &mode, |b, &mode| {
            b.iter(|| model.logits(black_box(image.pixels()), mode).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("forward_backward", mode.label()), &mode, |b, &mode| {
            b.iter(|| {
                let mut tape = Tape::new(mode);
                let x = image_leaf(&mut tape, black_box(image.pixels()), true).unwrap();
                let p = model.params().bind(&mut tape, true);
                let z = model.forward(&mut tape, x, &p, None).unwrap();
                let y = tape.softmax(z).unwrap();
                let l = tape.cross_entropy(y, &[1.0, 0.0]).unwrap();
                tape.backward(l).unwrap()
            })
        });
    }
    group.finish();
}

fn apgd_steps(c: &mut Criterion) {
    let model = cnn();
    let image = bubbles(1).remove(0);
    let mut group = c.benchmark_group("apgd");
    for steps in [2usize, 10] {
        let cfg = AttackConfig {
            steps,
            stop_on_success: false,
            ..AttackConfig::apgd(AttackLoss::BinaryDlr, 8.0 / 255.0)
        };
        group.bench_with_input(BenchmarkId::new("cnn_dlr", steps), &cfg, |b, cfg| {
            b.iter(|| apgd(&model, black_box(image.pixels()), image.label, cfg).unwrap())
        });
    }
    group.finish();
}

fn print_scan(c: &mut Criterion) {
    let page = bubbles(PAGE_CAPACITY);
    let mut group = c.benchmark_group("channel");
    group.sample_size(10);
    for (name, cfg) in [("identity", ChannelConfig::identity()), ("default", ChannelConfig::default())] {
        group.bench_function(BenchmarkId::new("page_roundtrip", name), |b| {
            b.iter(|| channel_roundtrip(black_box(&page), &cfg).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, cnn_pass, apgd_steps, print_scan);
criterion_main!(benches);
