//! Finite-difference checks shared by the gradient tests and the
//! acceptance run. Each returns the worst relative error over 20 shapes.

use std::sync::Arc;

use ace_core::analyzer::{AnalyzerHyper, AnalyzerModel};
use ace_core::corpus::{ElementId, FrequencyTable};
use ace_core::encoder::{ce_graph, median_bandwidth, mmd_graph, sample_candidates, ElementTable};
use ace_core::queries::Operator;
use ace_core::tensor::layers::{att, ffn_geglu, multi_head};
use ace_core::tensor::{Eager, Graph, Tape, Tensor};
use rand::Rng;

use super::{gradcheck, rel_error, rng, weighted_sum, EPS};

pub const SHAPES: u64 = 20;

pub fn randn(r: usize, c: usize, seed: u64) -> Tensor {
    Tensor::randn(r, c, 1.0, &mut rng(seed))
}

fn worst(f: impl Fn(u64) -> f64) -> f64 {
    (0..SHAPES).map(f).fold(0.0, f64::max)
}

pub fn att_error() -> f64 {
    worst(|s| {
        let mut r = rng(s);
        let (m, n, dk, dv) = (r.random_range(1..5), r.random_range(1..5), r.random_range(1..5), r.random_range(1..5));
        let inputs = [randn(m, dk, s * 3), randn(n, dk, s * 3 + 1), randn(n, dv, s * 3 + 2)];
        gradcheck(&inputs, |t, x| {
            let out = att(t, &x[0], &x[1], &x[2]).unwrap();
            weighted_sum(t, &out, s)
        })
    })
}

pub fn multi_head_error() -> f64 {
    worst(|s| {
        let mut r = rng(200 + s);
        let heads = r.random_range(1..3);
        let width = heads * r.random_range(1..3);
        let (din, dout) = (r.random_range(1..4), r.random_range(1..4));
        let (m, n) = (r.random_range(1..4), r.random_range(1..4));
        let inputs = [
            randn(m, din, s),
            randn(n, din, s + 1),
            randn(width, dout, s + 2),
            randn(din, width, s + 3),
            randn(din, width, s + 4),
            randn(din, width, s + 5),
        ];
        gradcheck(&inputs, |t, x| {
            let out = multi_head(t, &x[0], &x[1], &x[1], [&x[3], &x[4], &x[5], &x[2]], heads).unwrap();
            weighted_sum(t, &out, s)
        })
    })
}

pub fn layer_norm_error() -> f64 {
    worst(|s| {
        let mut r = rng(300 + s);
        let (m, n) = (r.random_range(1..5), r.random_range(2..6));
        let inputs = [randn(m, n, s), randn(1, n, s + 1), randn(1, n, s + 2)];
        gradcheck(&inputs, |t, x| {
            let out = t.layer_norm(&x[0], &x[1], &x[2]);
            weighted_sum(t, &out, s)
        })
    })
}

pub fn geglu_error() -> f64 {
    worst(|s| {
        let mut r = rng(400 + s);
        let (m, d, h) = (r.random_range(1..4), r.random_range(1..5), r.random_range(1..7));
        let inputs = [randn(m, d, s), randn(d, h, s + 1), randn(d, h, s + 2), randn(h, d, s + 3)];
        gradcheck(&inputs, |t, x| {
            let out = ffn_geglu(t, &x[0], &x[1], &x[2], &x[3]);
            weighted_sum(t, &out, s)
        })
    })
}

/// Worst finite-difference error, and the worst deviation of the tape
/// gradient from `2 λ Θ`.
pub fn l2_error() -> (f64, f64) {
    let lambda = 0.004;
    let (mut fd, mut closed) = (0.0f64, 0.0f64);
    for s in 0..SHAPES {
        let mut r = rng(500 + s);
        let (m, n) = (r.random_range(1..5), r.random_range(1..5));
        let theta = randn(m, n, s);
        fd = fd.max(gradcheck(std::slice::from_ref(&theta), |t, x| {
            let ss = t.sum_squares(&x[0]);
            t.scale(&ss, lambda)
        }));
        let mut tape = Tape::new();
        let v = tape.input(theta.clone());
        let ss = tape.sum_squares(&v);
        let loss = tape.scale(&ss, lambda);
        let g = tape.grad_of(loss, v);
        for (gi, ti) in g.data().iter().zip(theta.data()) {
            closed = closed.max((gi - 2.0 * lambda * ti).abs());
        }
    }
    (fd, closed)
}

pub fn ce_error() -> f64 {
    worst(|s| {
        let mut r = rng(300 + s);
        let (m, d, rows) = (r.random_range(4..9), r.random_range(1..5), r.random_range(1..5));
        let table = Arc::new(Tensor::randn(m, d, 1.0, &mut r));
        let sets: Vec<Vec<u32>> = (0..rows)
            .map(|_| {
                let k = r.random_range(1..3);
                let mut v: Vec<u32> = rand::seq::index::sample(&mut r, m, k).into_iter().map(|i| i as u32).collect();
                v.sort_unstable();
                v
            })
            .collect();
        let cand = Arc::new(sample_candidates(&sets, m, 3, &mut r));
        let inputs = [Tensor::randn(rows, d, 1.0, &mut r)];
        gradcheck(&inputs, |t, x| ce_graph(t, &x[0], &table, &cand))
    })
}

pub fn mmd_error() -> f64 {
    worst(|s| {
        let mut r = rng(400 + s);
        let (n, k, d) = (r.random_range(2..7), r.random_range(1..4), r.random_range(1..5));
        let inputs = [Tensor::randn(n, d, 1.0, &mut r), Tensor::randn(k, d, 1.0, &mut r)];
        let sigma = median_bandwidth(&inputs[0], &inputs[1]);
        gradcheck(&inputs, |t, x| mmd_graph(t, &x[0], &x[1], sigma))
    })
}

/// Analyzer with `k = 3` literals, `d = 8` and a 5×8 distilled matrix.
pub struct Mini {
    pub model: AnalyzerModel,
    pub s_c: Tensor,
    pub freq: FrequencyTable,
    pub table: ElementTable,
    pub literals: Vec<Vec<ElementId>>,
    pub trues: Vec<f64>,
}

impl Mini {
    pub fn new(seed: u64) -> Self {
        let mut r = rng(seed);
        let (m, d) = (12, 8);
        let hyper = AnalyzerHyper {
            d,
            heads: 2,
            n_cross: 1,
            n_self: 1,
            ..AnalyzerHyper::default()
        };
        let model = AnalyzerModel::new(Operator::ALL[seed as usize % 3], hyper, seed).unwrap();
        let batch = r.random_range(1..4);
        let literals = (0..batch)
            .map(|_| {
                let mut v: Vec<ElementId> =
                    rand::seq::index::sample(&mut r, m, 3).into_iter().map(|i| i as ElementId).collect();
                v.sort_unstable();
                v
            })
            .collect();
        Self {
            model,
            s_c: Tensor::randn(5, d, 1.0, &mut r),
            freq: FrequencyTable {
                counts: (0..m).map(|_| r.random_range(0..50)).collect(),
                n: 100,
            },
            table: ElementTable::new(m, d, seed),
            literals,
            trues: (0..batch).map(|_| r.random_range(2..60) as f64).collect(),
        }
    }

    fn loss<G: Graph>(&self, g: &mut G) -> G::V {
        let lits: Vec<&[ElementId]> = self.literals.iter().map(Vec::as_slice).collect();
        self.model
            .surrogate_loss(g, &self.s_c, &lits, &self.trues, &self.freq, &self.table)
            .unwrap()
    }

    /// Fill the parameter gradients from one backward pass.
    pub fn backward(&mut self) {
        let mut tape = Tape::new();
        let loss = self.loss(&mut tape);
        self.model.params_mut().zero_grad();
        tape.backward(loss, self.model.params_mut());
    }
}

pub fn analyzer_error() -> f64 {
    worst(|s| {
        let mut mini = Mini::new(s);
        mini.backward();
        let ids: Vec<_> = mini.model.params().ids().collect();
        let (mut analytic, mut numeric) = (Vec::new(), Vec::new());
        for id in ids {
            analytic.extend_from_slice(mini.model.params().grad(id).data());
            for j in 0..mini.model.params().value(id).len() {
                let orig = mini.model.params().value(id).data()[j];
                mini.model.params_mut().value_mut(id).data_mut()[j] = orig + EPS;
                let up = mini.loss(&mut Eager).item();
                mini.model.params_mut().value_mut(id).data_mut()[j] = orig - EPS;
                let down = mini.loss(&mut Eager).item();
                mini.model.params_mut().value_mut(id).data_mut()[j] = orig;
                numeric.push((up - down) / (2.0 * EPS));
            }
        }
        rel_error(&analytic, &numeric)
    })
}
