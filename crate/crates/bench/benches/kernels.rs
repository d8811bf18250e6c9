use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use simam_core::network::{build, ArchitectureConfig};
use simam_core::nn::Mode;
use simam_core::tensor::{conv2d, conv2d_backward, ConvParams};
use simam_core::{simam_refine, EnergyParams, Shape4, Tape, Tensor4};

fn filled(shape: Shape4) -> Tensor4 {
    Tensor4::from_fn(shape, |n, c, h, w| ((n * 31 + c * 17 + h * 7 + w * 3) % 23) as f64 / 23.0 - 0.5)
}

fn simam(c: &mut Criterion) {
    let mut group = c.benchmark_group("simam_refine");
    let params = EnergyParams::default();
    for side in [8, 16, 32] {
        let x = filled(Shape4::new(8, 96, side, side));
        group.bench_with_input(BenchmarkId::from_parameter(side), &x, |b, x| {
            b.iter(|| simam_refine(black_box(x), &params).unwrap())
        });
    }
    group.finish();
}

fn convolutions(c: &mut Criterion) {
    let mut group = c.benchmark_group("conv2d");
    let x = filled(Shape4::new(8, 96, 16, 16));
    let cases = [
        ("pointwise", filled(Shape4::new(24, 96, 1, 1)), ConvParams::default()),
        ("depthwise_3x3", filled(Shape4::new(96, 1, 3, 3)), ConvParams::same(3, 1, 96)),
        ("dense_3x3", filled(Shape4::new(32, 96, 3, 3)), ConvParams::same(3, 2, 1)),
    ];
    for (name, w, p) in &cases {
        group.bench_function(format!("{name}/forward"), |b| b.iter(|| conv2d(black_box(&x), w, None, *p).unwrap()));
        let gy = conv2d(&x, w, None, *p).unwrap();
        group.bench_function(format!("{name}/backward"), |b| {
            b.iter(|| conv2d_backward(black_box(&x), w, &gy, *p).unwrap())
        });
    }
    group.finish();
}

fn desk_step(c: &mut Criterion) {
    let cfg = ArchitectureConfig::preset("desk").unwrap();
    let mut net = build(&cfg, 0).unwrap();
    let x = filled(Shape4::new(8, 3, cfg.input_size, cfg.input_size));
    let labels: Vec<usize> = (0..8).map(|i| i % cfg.num_classes).collect();
    let mut group = c.benchmark_group("desk_network");
    group.sample_size(10);
    group.bench_function("forward_backward_batch8", |b| {
        b.iter(|| {
            let mut tape = Tape::new();
            let v = tape.constant(x.clone());
            let logits = net.forward(&mut tape, v, Mode::Train).unwrap();
            let loss = tape.cross_entropy(logits, &labels).unwrap();
            tape.backward(loss).unwrap()
        })
    });
    group.finish();
}

criterion_group!(benches, simam, convolutions, desk_step);
criterion_main!(benches);
