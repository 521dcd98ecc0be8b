#![allow(clippy::needless_range_loop)]

mod common;

use common::{batch, model};
use msm_core::causal::{
    classify_from_posteriors, classify_samples, graph_dot, graph_f1, regime_graphs, write_graph_csv,
};
use msm_core::inference::forward_backward_batch;
use msm_core::{Covariance, Gaussian, MarkovChain, MatchMode, MsmModel, TransitionFunction, TransitionKind};
use nalgebra::DMatrix;

fn linear_pair() -> (MsmModel, [DMatrix<f64>; 2]) {
    let w = [
        DMatrix::from_row_slice(2, 2, &[0.9, 0.0, -0.3, 0.04]),
        DMatrix::from_row_slice(2, 2, &[0.0, 0.7, 0.2, -0.5]),
    ];
    let means = w
        .iter()
        .map(|a| TransitionFunction::linear(a.clone(), vec![0.1, -0.1]).unwrap())
        .collect();
    let chain = MarkovChain::new(vec![0.5, 0.5], DMatrix::from_row_slice(2, 2, &[0.9, 0.1, 0.1, 0.9])).unwrap();
    let init = vec![
        Gaussian::new(vec![0.0, 0.0], Covariance::isotropic(2, 0.1).unwrap()).unwrap(),
        Gaussian::new(vec![1.0, 0.0], Covariance::isotropic(2, 0.1).unwrap()).unwrap(),
    ];
    let noise = vec![Covariance::isotropic(2, 0.01).unwrap(); 2];
    (MsmModel::new(chain, init, means, noise).unwrap(), w)
}

#[test]
fn linear_weights_are_absolute_coefficients() {
    let (md, w) = linear_pair();
    let data = batch(&md, 10, 50, 1);
    let sets = classify_samples(&md, &data).unwrap();
    let g = regime_graphs(&md, &sets, 0.05).unwrap();
    for k in 0..2 {
        assert!(g.counts[k] > 0);
        assert!((&g.weights[k] - w[k].abs()).abs().max() < 1e-12);
        assert_eq!(g.edges[k], w[k].map(|v| v.abs() > 0.05));
    }
    assert_eq!(g.edge_count(0), 2);
    let dot = graph_dot(&g, 0);
    assert!(dot.contains("z1 -> z1") && dot.contains("z1 -> z2") && !dot.contains("z2 -> z2"));
    let mut csv = Vec::new();
    write_graph_csv(&mut csv, &g).unwrap();
    assert_eq!(String::from_utf8(csv).unwrap().lines().count(), 1 + 2 * 4);
}

#[test]
fn edge_counts_fall_as_threshold_rises() {
    let md = model(3, 3, TransitionKind::Mlp, 4);
    let data = batch(&md, 5, 40, 2);
    let sets = classify_samples(&md, &data).unwrap();
    let mut last = usize::MAX;
    for tau in [0.0, 0.01, 0.05, 0.1, 0.2, 0.5, 1.0, 10.0] {
        let g = regime_graphs(&md, &sets, tau).unwrap();
        let n: usize = (0..3).map(|k| g.edge_count(k)).sum();
        assert!(n <= last, "τ = {tau}");
        last = n;
    }
    assert_eq!(last, 0);
}

#[test]
fn masked_inputs_never_become_edges() {
    let md = model(2, 3, TransitionKind::LocallyConnectedMlp, 6);
    let data = batch(&md, 5, 40, 2);
    let sets = classify_samples(&md, &data).unwrap();
    let g = regime_graphs(&md, &sets, 0.0).unwrap();
    for (f, w) in md.trans_mean().iter().zip(&g.weights) {
        let mask = f.mask().unwrap();
        for (mk, wk) in mask.iter().zip(w.iter()) {
            if *mk == 0.0 {
                assert_eq!(*wk, 0.0);
            }
        }
    }
    let truth: Vec<_> = md
        .trans_mean()
        .iter()
        .map(|f| f.mask().unwrap().map(|v| v != 0.0))
        .collect();
    let (f1, perm) = graph_f1(&truth, &g.edges, MatchMode::Auto).unwrap();
    assert!(f1 <= 1.0);
    assert_eq!(perm.len(), 2);
}

#[test]
fn grouping_uses_map_state_of_the_later_step() {
    let (md, _) = linear_pair();
    let data = batch(&md, 3, 20, 9);
    let posts = forward_backward_batch(&md, &data).unwrap();
    let sets = classify_from_posteriors(&data, &posts).unwrap();
    assert_eq!(sets[0].len() + sets[1].len(), 3 * 19);
    let z = &data.sequences()[0];
    let s1 = msm_core::inference::segment(&posts[0])[1];
    assert_eq!(sets[s1][0], z.row(0).to_vec());
}

#[test]
fn regime_count_must_match() {
    let (md, _) = linear_pair();
    assert!(regime_graphs(&md, &[vec![]], 0.05).is_err());
    assert!(regime_graphs(&md, &[vec![], vec![]], -1.0).is_err());
}
