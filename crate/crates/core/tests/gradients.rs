mod common;

use std::sync::Arc;

use ace_core::tensor::Graph;
use common::{gradcheck, rng, suite, weighted_sum};
use rand::Rng;

const TOL: f64 = 1e-4;
use suite::{randn, SHAPES};

#[test]
fn attention_single_head() {
    let err = suite::att_error();
    assert!(err < TOL, "{err}");
}

#[test]
fn attention_multi_head_with_blocks() {
    for s in 0..SHAPES {
        let mut r = rng(100 + s);
        let heads = r.random_range(1..4);
        let dh = r.random_range(1..3);
        let (m, n) = (r.random_range(2..6), r.random_range(2..6));
        let w = heads * dh;
        let inputs = [randn(m, w, s), randn(n, w, s + 50), randn(n, w, s + 90)];
        let split_q = m / 2;
        let blocks = vec![(0..split_q, 0..n), (split_q..m, 1..n)];
        let err = gradcheck(&inputs, |t, x| {
            let out = t.attention(&x[0], &x[1], &x[2], heads, &blocks);
            weighted_sum(t, &out, s)
        });
        assert!(err < TOL, "seed {s}: {err}");
    }
}

#[test]
fn multi_head_projections() {
    let err = suite::multi_head_error();
    assert!(err < TOL, "{err}");
}

#[test]
fn layer_norm() {
    let err = suite::layer_norm_error();
    assert!(err < TOL, "{err}");
}

#[test]
fn geglu() {
    let err = suite::geglu_error();
    assert!(err < TOL, "{err}");
}

#[test]
fn l2_gradient_is_two_lambda_theta() {
    let (fd, closed) = suite::l2_error();
    assert!(fd < TOL, "{fd}");
    assert!(closed < 1e-15, "{closed}");
}

#[test]
fn elementwise_and_structural_ops() {
    for s in 0..SHAPES {
        let mut r = rng(600 + s);
        let (m, n) = (r.random_range(2..5), r.random_range(1..5));
        let inputs = [randn(m, n, s), randn(m, n, s + 1), randn(1, n, s + 2)];
        let segs = vec![0..1, 1..m];
        let idx: Vec<usize> = (0..4).map(|_| r.random_range(0..m)).collect();
        let err = gradcheck(&inputs, |t, x| {
            let a = t.exp(&x[0]);
            let b = t.softplus(&x[1]);
            let c = t.sub(&a, &b);
            let c = t.add_row(&c, &x[2]);
            let c = t.relu(&c);
            let c = t.add_scalar(&c, 0.5);
            let d = t.concat_cols(&c, &x[0]);
            let e = t.segment_mean(&d, &segs);
            let f = t.gather_rows(&x[1], &idx);
            let g = t.repeat_rows(&x[2], 3);
            let h = t.logsumexp_rows(&f);
            let i = t.select_col(&e, 0);
            let parts = [
                weighted_sum(t, &e, s),
                weighted_sum(t, &g, s + 1),
                weighted_sum(t, &h, s + 2),
                weighted_sum(t, &i, s + 3),
            ];
            let mut acc = parts[0];
            for p in &parts[1..] {
                acc = t.add(&acc, p);
            }
            acc
        });
        assert!(err < TOL, "seed {s}: {err}");
    }
}

#[test]
fn gather_mean_and_candidate_scores() {
    for s in 0..SHAPES {
        let mut r = rng(700 + s);
        let (rows, d) = (r.random_range(3..7), r.random_range(1..5));
        let sets: Vec<Vec<u32>> = (0..3)
            .map(|_| {
                let k = r.random_range(1..=rows);
                rand::seq::index::sample(&mut r, rows, k).into_iter().map(|i| i as u32).collect()
            })
            .collect();
        let sets = Arc::new(sets);
        let table = Arc::new(randn(8, d, s + 9));
        let cand: Arc<Vec<Vec<u32>>> =
            Arc::new((0..3).map(|_| (0..4).map(|_| r.random_range(0..8)).collect()).collect());
        let err = gradcheck(&[randn(rows, d, s)], |t, x| {
            let m = t.gather_mean(&x[0], &sets);
            let sc = t.candidate_scores(&m, &table, &cand);
            let l = t.logsumexp_rows(&sc);
            weighted_sum(t, &l, s)
        });
        assert!(err < TOL, "seed {s}: {err}");
    }
}

#[test]
fn kernel_mean() {
    for s in 0..SHAPES {
        let mut r = rng(800 + s);
        let (n, m, d) = (r.random_range(1..5), r.random_range(1..5), r.random_range(1..4));
        let sigma = r.random_range(0.5..2.0);
        let inputs = [randn(n, d, s), randn(m, d, s + 1)];
        let err = gradcheck(&inputs, |t, x| t.kernel_mean(&x[0], &x[1], sigma));
        assert!(err < TOL, "seed {s}: {err}");
    }
}
