//! Module outputs against the loop and dense-matrix references in `common`.

mod common;

use common::*;
use mmcd_autograd::{Csr, Graph, ParamStore};
use mmcd_core::head::loss;
use mmcd_core::layers::ParamBuilder;
use mmcd_core::metrics::ConfusionMatrix;
use mmcd_core::pgffm::{gated_fuse, prior_distance, DualPathDiffs};
use mmcd_core::stcfm::{build_grid_adjacency, Fim, Gsfm};
use nalgebra::DMatrix;

const TOL: f64 = 1e-6;

fn csr_to_dense(m: &Csr<f64>, n: usize) -> DMatrix<f64> {
    DMatrix::from_fn(n, n, |i, j| m.get(i, j))
}

#[test]
fn fim_matches_scalar_loop() {
    for seed in 0..3 {
        let mut r = rng(seed);
        let mut store = ParamStore::<f64>::new();
        let fim = Fim::new(&mut ParamBuilder::new(&mut store, &mut rng(100 + seed)), "fim", 2);
        let (so, ss) = (rand_tensor(&mut r, &[1, 2, 4, 4]), rand_tensor(&mut r, &[1, 2, 4, 4]));
        let mut g = Graph::training(&store);
        let (o, s) = (g.constant(so.clone()), g.constant(ss.clone()));
        let out = fim.forward(&mut g, o, s).unwrap();
        let (co, cs, a) = common::fim(&store, &fim, &so, &ss);
        assert!(max_abs_diff(g.value(out.common_opt), &co) < TOL);
        assert!(max_abs_diff(g.value(out.common_sar), &cs) < TOL);
        assert!(max_abs_diff(g.value(out.attention), &a) < TOL);
    }
}

#[test]
fn adjacency_matches_dense_construction() {
    for (h, w) in [(1, 1), (1, 2), (2, 3), (3, 3), (4, 5)] {
        for conn in [4, 8] {
            let sparse = build_grid_adjacency::<f64>(h, w, conn).unwrap();
            let got = csr_to_dense(&sparse.matrix, h * w);
            let want = dense_adjacency(h, w, conn);
            assert!((got - want).abs().max() < 1e-12, "{h}x{w}/{conn}");
        }
    }
    let two = dense_adjacency(1, 2, 4);
    assert!((two - DMatrix::from_element(2, 2, 0.5)).abs().max() < 1e-12);
}

#[test]
fn adjacency_spectrum_is_bounded_by_one() {
    for (h, w, conn) in [(3, 3, 8), (3, 3, 4), (4, 4, 8), (2, 5, 4)] {
        let a = dense_adjacency(h, w, conn);
        let eig = a.symmetric_eigen();
        let top = eig.eigenvalues.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert!(top <= 1.0 + 1e-6, "{h}x{w}/{conn}: {top}");
        assert!((top - 1.0).abs() < 1e-9, "renormalised adjacency has eigenvalue 1");
    }
}

#[test]
fn gsfm_matches_dense_oracle() {
    for (seed, (h, w, c)) in [(2, 2, 3), (3, 4, 2), (4, 4, 4)].into_iter().enumerate() {
        let mut r = rng(seed as u64);
        let mut store = ParamStore::<f64>::new();
        let gsfm = Gsfm::new(&mut ParamBuilder::new(&mut store, &mut rng(50 + seed as u64)), "g", c);
        let adj = build_grid_adjacency::<f64>(h, w, 8).unwrap();
        let x = rand_tensor(&mut r, &[2, c, h, w]);
        let mut g = Graph::inference(&store);
        let xi = g.constant(x.clone());
        let y = gsfm.graph_stage(&mut g, xi, &adj).unwrap();
        let y = g.value(y).clone();
        for b in 0..2 {
            let want = gsfm_graph_stage(&store, &gsfm, &x.narrow(0, b, 1).reshape([c, h, w]), 8);
            let got = y.narrow(0, b, 1).reshape([c, h, w]);
            assert!(max_abs_diff(&got, &want) < TOL);
        }
    }
}

#[test]
fn prior_distance_matches_loop() {
    let mut r = rng(9);
    let (a, b) = (rand_tensor(&mut r, &[2, 8, 4, 4]), rand_tensor(&mut r, &[2, 8, 4, 4]));
    assert!(max_abs_diff(&prior_distance(&a, &b).unwrap(), &common::prior_distance(&a, &b)) < TOL);
}

#[test]
fn gated_fuse_matches_loop() {
    let mut r = rng(10);
    let m = rand_tensor(&mut r, &[2, 1, 3, 3]).map(|v| (v + 1.0) / 2.0);
    let (fs, fc) = (rand_tensor(&mut r, &[2, 4, 3, 3]), rand_tensor(&mut r, &[2, 4, 3, 3]));
    let store = ParamStore::<f64>::new();
    let mut g = Graph::inference(&store);
    let (mv, sv, cv) = (g.constant(m.clone()), g.constant(fs.clone()), g.constant(fc.clone()));
    let out = gated_fuse(&mut g, mv, &DualPathDiffs { specific: sv, common: cv }).unwrap();
    assert!(max_abs_diff(g.value(out), &common::gated_fuse(&m, &fs, &fc)) < TOL);
}

#[test]
fn loss_matches_scalar_loop() {
    let mut r = rng(11);
    for (k, weights) in [(3, vec![1.0, 1.0, 1.0]), (3, vec![0.2, 1.5, 5.0]), (7, vec![0.5, 1.0, 2.0, 0.3, 4.0, 1.0, 2.5])] {
        let logits = rand_tensor(&mut r, &[2, k, 2, 2]).map(|v| 3.0 * v);
        let labels: Vec<_> = (0..2).map(|_| random_labels(&mut r, 2, 2, k as u8)).collect();
        let store = ParamStore::<f64>::new();
        let mut g = Graph::inference(&store);
        let l = g.constant(logits.clone());
        let refs: Vec<_> = labels.iter().collect();
        let v = loss(&mut g, l, &refs, &weights).unwrap();
        assert!((g.value(v).item() - weighted_ce(&logits, &labels, &weights)).abs() < TOL);
    }
}

#[test]
fn metrics_match_brute_force_on_random_maps() {
    let mut r = rng(12);
    for _ in 0..20 {
        let (p, t) = (random_labels(&mut r, 8, 8, 7), random_labels(&mut r, 8, 8, 7));
        let mut cm = ConfusionMatrix::new(7);
        cm.accumulate(&p, &t).unwrap();
        let pairs: Vec<(u8, u8)> = p.0.cells.iter().copied().zip(t.0.cells.iter().copied()).collect();
        let b = brute_metrics(&pairs, 7);
        for i in 0..7 {
            for j in 0..7 {
                assert_eq!(cm.get(i, j), b.counts[i][j]);
            }
        }
        assert!((cm.overall_accuracy().unwrap() - b.oa).abs() < 1e-12);
        assert_eq!(cm.iou_per_class().len(), 7);
        for (x, y) in cm.iou_per_class().iter().zip(&b.iou) {
            assert_eq!(x.is_some(), y.is_some());
            if let (Some(x), Some(y)) = (x, y) {
                assert!((x - y).abs() < 1e-12);
            }
        }
        assert!((cm.miou().unwrap() - b.miou.unwrap()).abs() < 1e-12);
        let (pc, rc, f1) = cm.f1_bcd();
        assert!((pc - b.precision).abs() < 1e-12 && (rc - b.recall).abs() < 1e-12 && (f1 - b.f1_bcd).abs() < 1e-12);
        assert!((cm.f1_clf() - b.f1_clf).abs() < 1e-12);
    }
}
