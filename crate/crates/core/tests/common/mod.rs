#![allow(dead_code)]

use earth_adapter::adapter::{build_moa, EarthAdapter};
use earth_adapter::backbone::{init_params, SegModel};
use earth_adapter::bench::{Benchmark, BenchmarkSpec, DomainSpec};
use earth_adapter::config::{AdapterConfig, BackboneConfig, Mode, TrainConfig};
use earth_adapter::params::Bound;
use earth_adapter::trainer::Trainer;
use earth_adapter::{Graph, ParamStore, Result, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;
const FLOOR: f64 = 1e-7;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn randn(rng: &mut impl Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect();
    Tensor::new(shape, data).unwrap()
}

fn loss_value(params: &ParamStore, build: &impl Fn(&mut Graph, &Bound) -> Result<Var>) -> f64 {
    let mut g = Graph::new();
    let bound = Bound::new(&mut g, params, |_| false);
    let loss = build(&mut g, &bound).unwrap();
    g.value(loss).data()[0]
}

/// Compares reverse-mode gradients of every parameter selected by
/// `trainable` against central finite differences. Returns the worst
/// relative error per parameter, measured as the max absolute difference
/// over the max magnitude of either gradient (floored).
pub fn gradcheck(
    params: &ParamStore,
    trainable: impl Fn(&str) -> bool,
    build: impl Fn(&mut Graph, &Bound) -> Result<Var>,
) -> Vec<(String, f64)> {
    let mut g = Graph::new();
    let bound = Bound::new(&mut g, params, &trainable);
    let loss = build(&mut g, &bound).unwrap();
    g.backward(loss).unwrap();
    let grads = bound.grads(&g);
    let mut report = Vec::new();
    for (name, analytic) in &grads {
        let mut p = params.clone();
        let n = analytic.numel();
        let mut numeric = vec![0.0; n];
        for (i, fd) in numeric.iter_mut().enumerate() {
            let orig = p.get(name).unwrap().data()[i];
            p.get_mut(name).unwrap().data_mut()[i] = orig + STEP;
            let up = loss_value(&p, &build);
            p.get_mut(name).unwrap().data_mut()[i] = orig - STEP;
            let down = loss_value(&p, &build);
            p.get_mut(name).unwrap().data_mut()[i] = orig;
            *fd = (up - down) / (2.0 * STEP);
        }
        let diff = analytic
            .data()
            .iter()
            .zip(&numeric)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        let scale = analytic
            .data()
            .iter()
            .chain(&numeric)
            .map(|v| v.abs())
            .fold(FLOOR, f64::max);
        report.push((name.clone(), diff / scale));
    }
    report
}

pub fn assert_gradients(report: &[(String, f64)]) {
    assert!(!report.is_empty(), "nothing was checked");
    for (name, err) in report {
        assert!(*err < TOLERANCE, "{name}: relative error {err:e}");
    }
}

/// `Σ out ⊙ w` for a fixed random `w`, so every output element matters.
pub fn probe(g: &mut Graph, out: Var, seed: u64) -> Result<Var> {
    let w = randn(&mut rng(seed), g.shape(out), 1.0);
    let w = g.constant(w);
    let p = g.mul(out, w)?;
    Ok(g.sum(p))
}

/// 16×16 images, 2 blocks of width 16, frequency experts on block 1.
pub fn tiny_config(mode: Mode) -> TrainConfig {
    let mut c = TrainConfig::default();
    c.mode = mode;
    c.backbone.image_size = 16;
    c.backbone.depth = 2;
    c.backbone.dim = 16;
    c.backbone.heads = 2;
    c.backbone.decoder_dim = 16;
    c.adapter.dim = 4;
    c.adapter.freq_layers = vec![1];
    c.train.steps = 12;
    c.train.eval_interval = 4;
    c.train.lr_peft = 1e-3;
    c.train.lr_decoder = 1e-3;
    c
}

pub fn tiny_bench(seed: u64) -> Benchmark {
    let spec = BenchmarkSpec {
        name: "tiny".into(),
        source: DomainSpec::source(4, 16),
        target: DomainSpec::target(4, 16, [0.25, 0.0, -0.25], 0.25),
        source_train: 12,
        source_val: 4,
        target_train: 12,
        target_val: 4,
        seed,
    };
    Benchmark::generate(&spec).unwrap()
}

/// Backbone and decoder after a short source pretraining run.
pub fn tiny_pretrained(bench: &Benchmark) -> ParamStore {
    let mut c = tiny_config(Mode::Pretrain);
    c.train.steps = 20;
    c.train.eval_interval = 20;
    let mut t = Trainer::new(&c, None).unwrap();
    t.fit(bench, None, |_| Ok(())).unwrap();
    t.params
}

/// 8×8 images, 2 blocks of width 16, 3 classes.
pub fn tiny_backbone() -> BackboneConfig {
    BackboneConfig {
        image_size: 8,
        patch: 2,
        depth: 2,
        dim: 16,
        heads: 2,
        mlp_ratio: 2,
        num_classes: 3,
        decoder_dim: 8,
    }
}

/// Full MoA on both blocks with nonzero up-projections and router weights,
/// so every adapter parameter influences the loss.
pub fn grad_model(seed: u64) -> (SegModel, EarthAdapter, ParamStore) {
    let cfg = tiny_backbone();
    let acfg = AdapterConfig {
        dim: 4,
        freq_layers: vec![0, 1],
        alpha_init: 0.5,
        ..AdapterConfig::default()
    };
    let mut r = rng(seed);
    let mut params = init_params(&cfg, &mut r);
    let (moa, mut peft) = build_moa(&cfg, &acfg, &mut r).unwrap();
    for (name, t) in peft.iter_mut() {
        if name.ends_with(".up") || name.contains("router") {
            let shape = t.shape().to_vec();
            *t = randn(&mut r, &shape, 0.5);
        }
    }
    params.merge(&peft);
    (SegModel::new(cfg), moa, params)
}

pub fn grad_images(seed: u64, n: usize) -> Vec<Tensor> {
    let mut r = rng(seed);
    (0..n)
        .map(|_| {
            let data = (0..3 * 64).map(|_| r.random::<f64>()).collect();
            Tensor::new(&[3, 8, 8], data).unwrap()
        })
        .collect()
}
