use bitcn_bench::{random_tensor, Fixture};
use bitcn_core::autodiff::{ConvSpec, Direction, Graph};
use bitcn_core::distributions::nll;
use bitcn_core::evaluation::{decode_forecast, DecodeMode};
use bitcn_core::model::infer::FrozenModel;
use bitcn_core::model::temporal_block_forward;
use bitcn_core::HyperParams;
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::hint::black_box;

fn conv(c: &mut Criterion) {
    let mut group = c.benchmark_group("dilated_conv");
    for dilation in [1, 16] {
        let spec = ConvSpec {
            kernel_size: 9,
            dilation,
            direction: Direction::Backward,
            in_channels: 12,
            out_channels: 48,
            groups: 1,
        };
        let x = random_tensor(&[120, 32, 12], 1);
        let w = random_tensor(&spec.weight_shape(), 2);
        let b = random_tensor(&[48], 3);
        group.bench_with_input(BenchmarkId::new("forward_backward", dilation), &spec, |bench, &spec| {
            bench.iter(|| {
                let mut g = Graph::new();
                let (xv, wv, bv) = (g.variable(&x), g.variable(&w), g.variable(&b));
                let y = g.dilated_conv(xv, wv, bv, spec).unwrap();
                let s = g.sum(y);
                g.backward(s).unwrap();
                black_box(g.grad(wv).map(|v| v[0]))
            })
        });
    }
    group.finish();
}

fn block(c: &mut Criterion) {
    let fx = Fixture::seasonal(HyperParams::default());
    let blk = &fx.model.backward_stack()[4];
    let x = random_tensor(&[120, 32, 12], 4);
    c.bench_function("temporal_block/forward_backward", |bench| {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        bench.iter(|| {
            let mut g = Graph::new();
            let xv = g.variable(&x);
            let (h, o) = temporal_block_forward(&mut g, &fx.model.params, blk, xv, true, &mut rng).unwrap();
            let hs = g.sum(h);
            let os = g.sum(o);
            let total = g.add(hs, os).unwrap();
            g.backward(total).unwrap();
            black_box(g.len())
        })
    });
}

fn model(c: &mut Criterion) {
    let fx = Fixture::seasonal(HyperParams::default());
    let batch = fx.batch(32);
    let mask = batch.loss_mask(true);
    c.bench_function("model/train_step_b32", |bench| {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        bench.iter(|| {
            let mut g = Graph::new();
            let (mu, sigma) = fx.model.forward(&mut g, batch.inputs(), true, &mut rng).unwrap();
            let loss = nll(&mut g, fx.model.hyper.distribution, batch.y_true.data(), mu, sigma, Some(&mask)).unwrap();
            g.backward(loss).unwrap();
            black_box(g.value(loss)[0])
        })
    });
    let frozen = FrozenModel::new(&fx.model);
    c.bench_function("model/frozen_predict_b32", |bench| {
        bench.iter(|| black_box(frozen.predict(batch.inputs()).unwrap().0[0]))
    });
}

fn decode(c: &mut Criterion) {
    let fx = Fixture::seasonal(HyperParams::default());
    let frozen = FrozenModel::new(&fx.model);
    let refs = &fx.windows.test[..4];
    let mut group = c.benchmark_group("decode_4_windows");
    group.sample_size(10);
    for (name, mode) in [("analytic", DecodeMode::Analytic), ("mc100", DecodeMode::MonteCarlo { samples: 100 })] {
        group.bench_function(name, |bench| {
            bench.iter(|| black_box(decode_forecast(&frozen, &fx.table, &fx.dataset, refs, mode, 0).unwrap().len()))
        });
    }
    group.finish();
}

criterion_group!(benches, conv, block, model, decode);
criterion_main!(benches);
