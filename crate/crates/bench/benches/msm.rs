use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use msm_core::datagen::random_model;
use msm_core::estimation::{fit, FitConfig};
use msm_core::inference::forward_backward;
use msm_core::model::sample_sequence;
use msm_core::{Covariance, CovarianceKind, SequenceBatch, TransitionKind, TransitionOptions};

const KINDS: [TransitionKind; 4] = [
    TransitionKind::Linear,
    TransitionKind::Polynomial,
    TransitionKind::Mlp,
    TransitionKind::LocallyConnectedMlp,
];

fn forward_backward_bench(c: &mut Criterion) {
    let mut group = c.benchmark_group("forward_backward");
    for k in [2usize, 3, 5] {
        let md = random_model(
            k,
            2,
            TransitionKind::Mlp,
            &TransitionOptions::default(),
            CovarianceKind::Diagonal,
            1,
        )
        .unwrap();
        let (z, _) = sample_sequence(&md, 200, 2).unwrap();
        group.bench_with_input(BenchmarkId::new("K", k), &k, |b, _| {
            b.iter(|| forward_backward(&md, black_box(&z)).unwrap())
        });
    }
    group.finish();
}

fn fit_epoch_bench(c: &mut Criterion) {
    let mut group = c.benchmark_group("fit_one_epoch");
    group.sample_size(10);
    for kind in [TransitionKind::Linear, TransitionKind::Mlp] {
        let truth = random_model(3, 2, kind, &TransitionOptions::default(), CovarianceKind::Diagonal, 3).unwrap();
        let seqs = (0..50).map(|i| sample_sequence(&truth, 100, i).unwrap().0).collect();
        let data = SequenceBatch::new(seqs, None).unwrap();
        let cfg = FitConfig {
            n_states: 3,
            transition_kind: kind,
            max_epochs: 1,
            seed: 1,
            ..Default::default()
        };
        group.bench_function(format!("{kind:?}"), |b| b.iter(|| fit(black_box(&data), &cfg).unwrap()));
    }
    group.finish();
}

fn param_gradient_bench(c: &mut Criterion) {
    let mut group = c.benchmark_group("param_gradient");
    let m = 3;
    let noise = Covariance::diagonal(&[0.1, 0.2, 0.3]).unwrap();
    let (z, z_next) = (vec![0.1, -0.4, 0.7], vec![0.2, 0.0, -0.5]);
    for kind in KINDS {
        let md = random_model(1, m, kind, &TransitionOptions::default(), CovarianceKind::Diagonal, 5).unwrap();
        let f = md.trans_mean()[0].clone();
        group.bench_function(format!("{kind:?}"), |b| {
            b.iter(|| f.param_gradient(black_box(&z), &z_next, &noise))
        });
    }
    group.finish();
}

criterion_group!(benches, forward_backward_bench, fit_epoch_bench, param_gradient_bench);
criterion_main!(benches);
