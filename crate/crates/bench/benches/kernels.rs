use criterion::{black_box, criterion_group, criterion_main, Criterion};
use oversmooth::density::dip_statistic;
use oversmooth::flow::{ConditionedBatch, FlowConfig, FlowModel};
use oversmooth::metrics::{ssim, var_laplacian, SsimConfig};
use oversmooth::probloss::{lm_nll, lm_nll_grad, LaplaceMixtureField, UnconstrainedMixtureParams};
use oversmooth::toylab::{fit_strategy, make_corpus, Strategy, ToyCorpusSpec, ToyHyper};
use oversmooth::Grid;
use oversmooth_bench::{bimodal, noise_grid, noise_spectrogram};

fn metrics(c: &mut Criterion) {
    let a = noise_spectrogram(400, 80, 1);
    let b = noise_spectrogram(400, 80, 2);
    c.bench_function("var_laplacian 400x80", |bench| bench.iter(|| var_laplacian(black_box(&a)).unwrap()));
    let cfg = SsimConfig::default();
    c.bench_function("ssim 400x80", |bench| bench.iter(|| ssim(black_box(&a), black_box(&b), &cfg).unwrap()));
}

fn dip(c: &mut Criterion) {
    let xs = bimodal(1000, 3);
    c.bench_function("dip n=1000", |bench| bench.iter(|| dip_statistic(black_box(&xs)).unwrap()));
}

fn mixture(c: &mut Criterion) {
    let y = noise_spectrogram(100, 80, 4);
    let field = LaplaceMixtureField::uniform(100, 80, &[0.3, 0.7], &[-1.0, 1.0], &[0.5, 0.8]).unwrap();
    c.bench_function("lm_nll K=2 100x80", |bench| bench.iter(|| lm_nll(black_box(&field), &y).unwrap()));
    let p = UnconstrainedMixtureParams::from_field(&field);
    c.bench_function("lm_nll_grad K=2 100x80", |bench| bench.iter(|| lm_nll_grad(black_box(&p), &y).unwrap()));
}

fn flow(c: &mut Criterion) {
    let cfg = FlowConfig {
        channels: 8,
        cond_dim: 0,
        steps: 8,
        hidden: 16,
        context: 1,
    };
    let mut model = FlowModel::new(cfg, 5).unwrap();
    let batch = ConditionedBatch::unconditioned((0..16).map(|s| noise_grid(32, 8, s)).collect());
    model.actnorm_init(&batch).unwrap();
    c.bench_function("flow nll 16x32x8", |bench| bench.iter(|| model.nll(black_box(&batch)).unwrap()));
    c.bench_function("flow nll_grad 16x32x8", |bench| bench.iter(|| model.nll_grad(black_box(&batch)).unwrap()));
    let cond = Grid::zeros(32, 0);
    let z = noise_grid(32, 8, 99);
    c.bench_function("flow forward 32x8", |bench| bench.iter(|| model.forward(black_box(&z), &cond).unwrap()));
}

fn toylab(c: &mut Criterion) {
    let spec = ToyCorpusSpec::canonical(0);
    let corpus = make_corpus(&spec).unwrap();
    let hyper = ToyHyper::for_spec(&spec);
    let mut group = c.benchmark_group("toylab fit");
    group.sample_size(10);
    for st in [Strategy::Mse, Strategy::Ar, Strategy::Conditioned, Strategy::Lm] {
        group.bench_function(st.name(), |bench| bench.iter(|| fit_strategy(st, black_box(&corpus), &hyper, 0).unwrap()));
    }
    group.finish();
}

criterion_group!(benches, metrics, dip, mixture, flow, toylab);
criterion_main!(benches);
