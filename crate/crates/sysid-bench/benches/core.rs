use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::hint::black_box;
use sysid::*;

fn order_reduction_setup() -> (ModelSpec, ParamLayout, Dataset, SaturationConfig, DVector<f64>) {
    let (ds, _) = gen_order_reduction(1, 2000, 0.01);
    let spec = ModelSpec::linear(6, 2, 2, false);
    let layout = ParamLayout::new(&spec, 1, true).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut v = DVector::from_fn(layout.len(), |_, _| 0.1 * (rng.random::<f64>() - 0.5));
    let mut p = layout.unpack(&v).unwrap();
    p.a *= 0.5;
    v = layout.pack(&p).unwrap();
    (spec, layout, ds, SaturationConfig::default(), v)
}

fn rnn_setup() -> (ModelSpec, ParamLayout, Dataset, SaturationConfig, DVector<f64>) {
    let spec = ModelSpec::residual_rnn(6, 2, 2, vec![16], vec![8], Activation::Swish, false);
    let layout = ParamLayout::new(&spec, 1, true).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let u = DMatrix::from_fn(2000, 2, |_, _| rng.random::<f64>() - 0.5);
    let y = DMatrix::from_fn(2000, 2, |_, _| rng.random::<f64>() - 0.5);
    let ds = Dataset::single(u, y).unwrap();
    let mut v = DVector::from_fn(layout.len(), |_, _| 0.1 * (rng.random::<f64>() - 0.5));
    let mut p = layout.unpack(&v).unwrap();
    p.a *= 0.5;
    v = layout.pack(&p).unwrap();
    (spec, layout, ds, SaturationConfig::default(), v)
}

fn bench_simulate(c: &mut Criterion) {
    let (spec, layout, ds, sat, v) = order_reduction_setup();
    let params = layout.unpack(&v).unwrap();
    let u = &ds.experiments[0].u;
    c.bench_function("simulate linear 6-state N=2000", |b| {
        b.iter(|| simulate(black_box(&params), &spec, u, &sat).unwrap())
    });
}

fn bench_loss_and_grad(c: &mut Criterion) {
    let mut group = c.benchmark_group("loss_and_grad N=2000");
    let (spec, layout, ds, sat, v) = order_reduction_setup();
    let _ = spec;
    group.bench_function(BenchmarkId::from_parameter("linear 6-state"), |b| {
        b.iter(|| loss_and_grad(black_box(&v), &layout, &ds, &sat).unwrap())
    });
    let (spec, layout, ds, sat, v) = rnn_setup();
    let _ = spec;
    group.bench_function(BenchmarkId::from_parameter("residual RNN 16/8"), |b| {
        b.iter(|| loss_and_grad(black_box(&v), &layout, &ds, &sat).unwrap())
    });
    group.finish();
}

fn bench_lbfgsb(c: &mut Criterion) {
    let n = 50;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let m = DMatrix::from_fn(n, n, |_, _| rng.random::<f64>() - 0.5);
    let h = &m * m.transpose() + DMatrix::identity(n, n) * 0.5;
    let cvec = DVector::from_fn(n, |_, _| rng.random::<f64>() - 0.5);
    let l = DVector::from_element(n, -0.2);
    let u = DVector::from_element(n, 0.2);
    c.bench_function("lbfgsb box quadratic n=50", |b| {
        b.iter(|| {
            let (hc, cc) = (h.clone(), cvec.clone());
            lbfgsb_minimize(
                move |x: &DVector<f64>| {
                    let g = &hc * x + &cc;
                    Ok((0.5 * x.dot(&(&hc * x)) + cc.dot(x), g))
                },
                &DVector::zeros(n),
                &l,
                &u,
                &LbfgsbOptions::default(),
                None,
            )
            .unwrap()
        })
    });
}

fn bench_smoother(c: &mut Criterion) {
    let sys = datasets::order_reduction_system();
    let spec = ModelSpec::linear(6, 2, 2, false);
    let mut params = ModelParams::zeros(&spec, 1);
    params.a = sys.a;
    params.b = sys.b;
    params.c = sys.c;
    let sat = SaturationConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let u = DMatrix::from_fn(2000, 2, |_, _| rng.random::<f64>() - 0.5);
    let (_, y) = simulate_from(&params, &spec, &DVector::zeros(6), &u, &sat).unwrap();
    let cfg = EkfConfig::default();
    c.bench_function("ekf_rts 6-state N=2000 one epoch", |b| {
        b.iter(|| ekf_rts_reconstruct(&params, &spec, &sat, &u, &y, &cfg, 1e-3).unwrap())
    });
}

criterion_group!(
    benches,
    bench_simulate,
    bench_loss_and_grad,
    bench_lbfgsb,
    bench_smoother
);
criterion_main!(benches);
