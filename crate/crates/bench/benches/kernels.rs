use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use mscsa_bench::{input, mscsa_params};
use mscsa_core::mscsa::{csa, full_attention, mscsa_skip};
use mscsa_core::nn::Session;
use mscsa_core::tensor::{ConvSpec, NormMode};
use mscsa_core::unet::{encoder_forward, init_params, ModelConfig};
use mscsa_core::Graph;

fn conv3d(c: &mut Criterion) {
    let mut group = c.benchmark_group("conv3d_k3");
    group.sample_size(10);
    for (ch, e) in [(16, 16), (32, 16), (16, 32)] {
        let x = input(&[1, ch, e, e, e]);
        let w = input(&[ch, ch, 3, 3, 3]);
        group.bench_with_input(BenchmarkId::from_parameter(format!("c{ch}_e{e}")), &(x, w), |b, (x, w)| {
            b.iter(|| {
                let mut g = Graph::<f32>::new();
                let (xv, wv) = (g.constant(x.clone()), g.constant(w.clone()));
                black_box(g.conv3d(xv, wv, None, ConvSpec::new(1, 1, 1)).unwrap())
            })
        });
    }
    group.finish();
}

fn attention(c: &mut Criterion) {
    let mut group = c.benchmark_group("attention");
    group.sample_size(10);
    let channels = [32, 32];
    let (cfg, mut params) = mscsa_params(&channels);
    for e in [4, 6, 8] {
        let x = input(&[1, 64, e, e, e]);
        group.bench_with_input(BenchmarkId::new("cross_scale", e), &x, |b, x| {
            b.iter(|| {
                let mut s = Session::new(&mut params, NormMode::Eval, false);
                let xv = s.graph.constant(x.clone());
                black_box(csa(&mut s, xv, &cfg, "mscsa.block.csa1").unwrap())
            })
        });
        group.bench_with_input(BenchmarkId::new("full", e), &x, |b, x| {
            b.iter(|| {
                let mut s = Session::new(&mut params, NormMode::Eval, false);
                let xv = s.graph.constant(x.clone());
                black_box(full_attention(&mut s, xv, &cfg, "mscsa.block.csa1").unwrap())
            })
        });
    }
    group.finish();
}

fn mscsa_module(c: &mut Criterion) {
    let mut group = c.benchmark_group("mscsa_skip");
    group.sample_size(10);
    let cfg = ModelConfig::default().with_mscsa();
    let mut params = init_params::<f32>(&cfg, 0).unwrap();
    let x = input(&[1, 1, 32, 32, 32]);
    let mcfg = cfg.mscsa.clone().unwrap();
    group.bench_function("default_32", |b| {
        b.iter(|| {
            let mut s = Session::new(&mut params, NormMode::Eval, false);
            let xv = s.graph.constant(x.clone());
            let fs = encoder_forward(&mut s, xv, &cfg).unwrap();
            black_box(mscsa_skip(&mut s, &fs, &mcfg).unwrap().len())
        })
    });
    group.finish();
}

criterion_group!(benches, conv3d, attention, mscsa_module);
criterion_main!(benches);
