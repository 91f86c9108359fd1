use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};

use pml_core::datagen::SignalEnsemble;
use pml_core::datagen::{sample_matrix, sample_signal};
use pml_core::estimators::{least_squares_spectral, pmle_gradient_ascent, Init, LsDomain};
use pml_core::gaussian_equiv::{exact_argmax, GaussianEquivalent};
use pml_core::info_params::{compute, InfoParams, Method};
use pml_core::likelihoods::{builtin_from_spec, ParameterSpace};
use pml_core::optimize::AscentOptions;
use pml_core::parisi::{minimize_psi, ParisiProblem, PsiOptions};

fn info_params(c: &mut Criterion) {
    let probit = builtin_from_spec("signed_wigner:lambda=1.2").unwrap();
    let poisson = builtin_from_spec("poisson_bernoulli:lambda=2").unwrap();
    c.bench_function("info_params/probit_quadrature", |b| {
        b.iter(|| compute(black_box(&probit), &Method::Quadrature).unwrap())
    });
    c.bench_function("info_params/poisson_exact_sum", |b| {
        b.iter(|| compute(black_box(&poisson), &Method::Quadrature).unwrap())
    });
}

fn sampling(c: &mut Criterion) {
    let pair = builtin_from_spec("sbm:mu=0.3").unwrap();
    let x0 = sample_signal(&pair.signal, 1000, 1);
    c.bench_function("datagen/sbm_n1000", |b| {
        b.iter(|| sample_matrix(&pair, black_box(&x0), 7).unwrap())
    });
}

fn estimators(c: &mut Criterion) {
    let pair = builtin_from_spec("spiked_wigner:lambda0=2").unwrap();
    let x0 = sample_signal(&pair.signal, 800, 3);
    let obs = sample_matrix(&pair, &x0, 3).unwrap();
    let opts = AscentOptions {
        max_iter: 100,
        ..AscentOptions::default()
    };
    let mut g = c.benchmark_group("estimators");
    g.sample_size(10);
    g.bench_function("pmle_ascent_n800", |b| {
        b.iter(|| pmle_gradient_ascent(&pair, &obs, &Init::Random { seed: 1 }, &opts).unwrap())
    });
    g.bench_function("ls_spectral_n800", |b| {
        b.iter(|| {
            least_squares_spectral(
                &obs,
                2.0,
                &LsDomain::AllSpace,
                false,
                0.0,
                &Init::Spectral,
                &opts,
            )
            .unwrap()
        })
    });
    g.finish();
}

fn enumeration(c: &mut Criterion) {
    let beta = InfoParams::from_betas(1.0, 0.0, 0.0, 0.0);
    c.bench_function("enumerate/argmax_n14", |b| {
        b.iter_batched(
            || {
                let x0 = sample_signal(&SignalEnsemble::rademacher(), 14, 5);
                GaussianEquivalent::new(beta.clone(), x0, 5)
                    .pair_objective(&ParameterSpace::pm_one())
                    .unwrap()
            },
            |obj| exact_argmax(&obj, 1e-12).unwrap(),
            BatchSize::SmallInput,
        )
    });
}

fn parisi(c: &mut Criterion) {
    let problem = ParisiProblem::new(
        InfoParams::from_betas(1.0, 0.0, 0.0, 0.0),
        ParameterSpace::pm_one(),
        SignalEnsemble::rademacher().law(),
    );
    let opts = PsiOptions {
        schedule: vec![4.0, 8.0],
        k_max: 1,
        starts: 2,
        ..PsiOptions::default()
    };
    let mut g = c.benchmark_group("parisi");
    g.sample_size(10);
    g.bench_function("psi_sk_rs", |b| {
        b.iter(|| minimize_psi(&problem, 1.0, 0.0, None, &opts).unwrap())
    });
    g.finish();
}

criterion_group!(
    benches,
    info_params,
    sampling,
    estimators,
    enumeration,
    parisi
);
criterion_main!(benches);
