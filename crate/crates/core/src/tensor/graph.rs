use std::ops::Range;
use std::sync::Arc;

use super::kernels::{self as k, AttentionCache, Block, LayerNormCache};
use super::optim::{ParamId, ParamSet};
use super::Tensor;

pub type AttnBlocks = [Block];

/// Differentiable operations used by the models.
///
/// Shape mismatches are programming errors and panic; public layer
/// functions validate user-facing shapes before reaching here.
pub trait Graph {
    type V: Clone;

    fn constant(&mut self, t: Tensor) -> Self::V;
    fn param(&mut self, params: &ParamSet, id: ParamId) -> Self::V;
    fn value<'a>(&'a self, v: &'a Self::V) -> &'a Tensor;

    fn matmul(&mut self, a: &Self::V, b: &Self::V) -> Self::V;
    fn add(&mut self, a: &Self::V, b: &Self::V) -> Self::V;
    fn sub(&mut self, a: &Self::V, b: &Self::V) -> Self::V;
    fn mul(&mut self, a: &Self::V, b: &Self::V) -> Self::V;
    /// Broadcast a `1 x n` row over every row of `a`.
    fn add_row(&mut self, a: &Self::V, row: &Self::V) -> Self::V;
    fn scale(&mut self, a: &Self::V, c: f64) -> Self::V;
    fn add_scalar(&mut self, a: &Self::V, c: f64) -> Self::V;
    fn relu(&mut self, a: &Self::V) -> Self::V;
    fn gelu(&mut self, a: &Self::V) -> Self::V;
    fn exp(&mut self, a: &Self::V) -> Self::V;
    fn softplus(&mut self, a: &Self::V) -> Self::V;
    fn layer_norm(&mut self, x: &Self::V, gain: &Self::V, bias: &Self::V) -> Self::V;
    fn attention(
        &mut self,
        q: &Self::V,
        k: &Self::V,
        v: &Self::V,
        heads: usize,
        blocks: &AttnBlocks,
    ) -> Self::V;
    fn concat_cols(&mut self, a: &Self::V, b: &Self::V) -> Self::V;
    fn segment_mean(&mut self, x: &Self::V, segs: &[Range<usize>]) -> Self::V;
    fn repeat_rows(&mut self, x: &Self::V, n: usize) -> Self::V;
    fn gather_rows(&mut self, x: &Self::V, idx: &[usize]) -> Self::V;
    fn gather_mean(&mut self, x: &Self::V, sets: &Arc<Vec<Vec<u32>>>) -> Self::V;
    /// Dot products of each row of `s` with frozen table rows.
    fn candidate_scores(
        &mut self,
        s: &Self::V,
        table: &Arc<Tensor>,
        cand: &Arc<Vec<Vec<u32>>>,
    ) -> Self::V;
    fn logsumexp_rows(&mut self, x: &Self::V) -> Self::V;
    fn select_col(&mut self, x: &Self::V, j: usize) -> Self::V;
    fn sum(&mut self, x: &Self::V) -> Self::V;
    fn sum_squares(&mut self, x: &Self::V) -> Self::V;
    /// Mean of the Gaussian kernel matrix between rows of `x` and `y`.
    fn kernel_mean(&mut self, x: &Self::V, y: &Self::V, sigma: f64) -> Self::V;
}

fn check_same(op: &str, a: &Tensor, b: &Tensor) {
    assert_eq!(a.shape(), b.shape(), "{op}: shape mismatch");
}

fn check_row(op: &str, a: &Tensor, row: &Tensor) {
    assert!(
        row.rows() == 1 && row.cols() == a.cols(),
        "{op}: expected 1x{} row, got {:?}",
        a.cols(),
        row.shape()
    );
}

fn concat_cols(a: &Tensor, b: &Tensor) -> Tensor {
    assert_eq!(a.rows(), b.rows(), "concat_cols: row mismatch");
    let cols = a.cols() + b.cols();
    let mut data = Vec::with_capacity(a.rows() * cols);
    for i in 0..a.rows() {
        data.extend_from_slice(a.row(i));
        data.extend_from_slice(b.row(i));
    }
    Tensor::from_parts(a.rows(), cols, data)
}

fn repeat_rows(x: &Tensor, n: usize) -> Tensor {
    assert_eq!(x.rows(), 1, "repeat_rows expects a single row");
    let mut data = Vec::with_capacity(n * x.cols());
    for _ in 0..n {
        data.extend_from_slice(x.data());
    }
    Tensor::from_parts(n, x.cols(), data)
}

fn select_col(x: &Tensor, j: usize) -> Tensor {
    let data = (0..x.rows()).map(|i| x.get(i, j)).collect();
    Tensor::from_parts(x.rows(), 1, data)
}

fn check_attention(q: &Tensor, kt: &Tensor, v: &Tensor, heads: usize) {
    assert!(heads >= 1, "attention needs at least one head");
    assert_eq!(q.cols(), kt.cols(), "attention: query/key width mismatch");
    assert_eq!(kt.rows(), v.rows(), "attention: key/value row mismatch");
    assert!(
        q.cols() % heads == 0 && v.cols() % heads == 0,
        "attention: widths must divide by head count"
    );
}

/// Direct evaluation without recording anything.
#[derive(Clone, Copy, Debug, Default)]
pub struct Eager;

impl Graph for Eager {
    type V = Tensor;

    fn constant(&mut self, t: Tensor) -> Tensor {
        t
    }
    fn param(&mut self, params: &ParamSet, id: ParamId) -> Tensor {
        params.value(id).clone()
    }
    fn value<'a>(&'a self, v: &'a Tensor) -> &'a Tensor {
        v
    }
    fn matmul(&mut self, a: &Tensor, b: &Tensor) -> Tensor {
        assert_eq!(a.cols(), b.rows(), "matmul: inner dimension mismatch");
        k::matmul(a, b)
    }
    fn add(&mut self, a: &Tensor, b: &Tensor) -> Tensor {
        check_same("add", a, b);
        k::zip_map(a, b, |x, y| x + y)
    }
    fn sub(&mut self, a: &Tensor, b: &Tensor) -> Tensor {
        check_same("sub", a, b);
        k::zip_map(a, b, |x, y| x - y)
    }
    fn mul(&mut self, a: &Tensor, b: &Tensor) -> Tensor {
        check_same("mul", a, b);
        k::zip_map(a, b, |x, y| x * y)
    }
    fn add_row(&mut self, a: &Tensor, row: &Tensor) -> Tensor {
        check_row("add_row", a, row);
        k::row_broadcast(a, row, false)
    }
    fn scale(&mut self, a: &Tensor, c: f64) -> Tensor {
        k::map(a, |x| x * c)
    }
    fn add_scalar(&mut self, a: &Tensor, c: f64) -> Tensor {
        k::map(a, |x| x + c)
    }
    fn relu(&mut self, a: &Tensor) -> Tensor {
        k::map(a, |x| x.max(0.0))
    }
    fn gelu(&mut self, a: &Tensor) -> Tensor {
        k::map(a, k::gelu)
    }
    fn exp(&mut self, a: &Tensor) -> Tensor {
        k::map(a, f64::exp)
    }
    fn softplus(&mut self, a: &Tensor) -> Tensor {
        k::map(a, k::softplus)
    }
    fn layer_norm(&mut self, x: &Tensor, gain: &Tensor, bias: &Tensor) -> Tensor {
        check_row("layer_norm", x, gain);
        check_row("layer_norm", x, bias);
        k::layer_norm(x, gain, bias).0
    }
    fn attention(&mut self, q: &Tensor, kt: &Tensor, v: &Tensor, heads: usize, blocks: &AttnBlocks) -> Tensor {
        check_attention(q, kt, v, heads);
        k::attention(q, kt, v, heads, blocks).0
    }
    fn concat_cols(&mut self, a: &Tensor, b: &Tensor) -> Tensor {
        concat_cols(a, b)
    }
    fn segment_mean(&mut self, x: &Tensor, segs: &[Range<usize>]) -> Tensor {
        k::segment_mean(x, segs)
    }
    fn repeat_rows(&mut self, x: &Tensor, n: usize) -> Tensor {
        repeat_rows(x, n)
    }
    fn gather_rows(&mut self, x: &Tensor, idx: &[usize]) -> Tensor {
        x.select_rows(idx)
    }
    fn gather_mean(&mut self, x: &Tensor, sets: &Arc<Vec<Vec<u32>>>) -> Tensor {
        k::gather_mean(x, sets)
    }
    fn candidate_scores(&mut self, s: &Tensor, table: &Arc<Tensor>, cand: &Arc<Vec<Vec<u32>>>) -> Tensor {
        k::candidate_scores(s, table, cand)
    }
    fn logsumexp_rows(&mut self, x: &Tensor) -> Tensor {
        k::logsumexp_rows(x)
    }
    fn select_col(&mut self, x: &Tensor, j: usize) -> Tensor {
        select_col(x, j)
    }
    fn sum(&mut self, x: &Tensor) -> Tensor {
        Tensor::scalar(x.sum())
    }
    fn sum_squares(&mut self, x: &Tensor) -> Tensor {
        Tensor::scalar(x.sum_squares())
    }
    fn kernel_mean(&mut self, x: &Tensor, y: &Tensor, sigma: f64) -> Tensor {
        assert_eq!(x.cols(), y.cols(), "kernel_mean: width mismatch");
        let km = k::gaussian_kernel(x, y, sigma);
        Tensor::scalar(km.sum() / km.len() as f64)
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    Input,
    Param(ParamId),
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Relu(usize),
    Gelu(usize),
    Exp(usize),
    Softplus(usize),
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        cache: LayerNormCache,
    },
    Attention {
        q: usize,
        k: usize,
        v: usize,
        heads: usize,
        blocks: Vec<Block>,
        cache: AttentionCache,
    },
    ConcatCols(usize, usize),
    SegmentMean(usize, Vec<Range<usize>>),
    RepeatRows(usize),
    GatherRows(usize, Vec<usize>),
    GatherMean(usize, Arc<Vec<Vec<u32>>>),
    CandidateScores(usize, Arc<Tensor>, Arc<Vec<Vec<u32>>>),
    LogSumExpRows(usize),
    SelectCol(usize, usize),
    Sum(usize),
    SumSquares(usize),
    KernelMean {
        x: usize,
        y: usize,
        sigma: f64,
        kmat: Tensor,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Records a forward pass so it can be differentiated.
///
/// A tape is built fresh for every forward pass and discarded after
/// [`Tape::backward`].
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[usize]) -> Var {
        let needs_grad = match op {
            Op::Leaf => false,
            Op::Param(_) | Op::Input => true,
            _ => inputs.iter().any(|&i| self.nodes[i].needs_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A differentiable leaf that is not a parameter (used by gradient
    /// checks to differentiate w.r.t. inputs).
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Input, &[])
    }

    fn val(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient of a `1x1` output w.r.t. `wrt`, zero if unreachable.
    pub fn grad_of(&self, loss: Var, wrt: Var) -> Tensor {
        let (r, c) = self.val(wrt).shape();
        self.gradients(loss)
            .swap_remove(wrt.0)
            .unwrap_or_else(|| Tensor::zeros(r, c))
    }

    /// Gradients of a `1x1` output w.r.t. every recorded node.
    pub fn gradients(&self, loss: Var) -> Vec<Option<Tensor>> {
        assert_eq!(self.val(loss).shape(), (1, 1), "backward needs a scalar loss");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if node.needs_grad {
                self.propagate(node, &g, &mut grads);
            }
            grads[idx] = Some(g);
        }
        grads
    }

    /// Backpropagate `loss` and add parameter gradients into `params`.
    pub fn backward(&self, loss: Var, params: &mut ParamSet) {
        let grads = self.gradients(loss);
        for (node, g) in self.nodes.iter().zip(grads) {
            if let (Op::Param(id), Some(g)) = (&node.op, g) {
                params.accumulate_grad(*id, &g);
            }
        }
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let nodes = &self.nodes;
        let send = |i: usize, d: Tensor, grads: &mut [Option<Tensor>]| {
            if !nodes[i].needs_grad {
                return;
            }
            match &mut grads[i] {
                Some(acc) => k::add_into(acc, &d),
                slot => *slot = Some(d),
            }
        };
        let v = |i: usize| &nodes[i].value;
        match &node.op {
            Op::Leaf | Op::Input | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                if nodes[*a].needs_grad {
                    send(*a, k::matmul_nt(g, v(*b)), grads);
                }
                if nodes[*b].needs_grad {
                    send(*b, k::matmul_tn(v(*a), g), grads);
                }
            }
            Op::Add(a, b) => {
                send(*a, g.clone(), grads);
                send(*b, g.clone(), grads);
            }
            Op::Sub(a, b) => {
                send(*a, g.clone(), grads);
                send(*b, k::map(g, |x| -x), grads);
            }
            Op::Mul(a, b) => {
                send(*a, k::zip_map(g, v(*b), |x, y| x * y), grads);
                send(*b, k::zip_map(g, v(*a), |x, y| x * y), grads);
            }
            Op::AddRow(a, r) => {
                send(*a, g.clone(), grads);
                send(*r, k::sum_rows(g), grads);
            }
            Op::Scale(a, c) => send(*a, k::map(g, |x| x * c), grads),
            Op::AddScalar(a) => send(*a, g.clone(), grads),
            Op::Relu(a) => send(
                *a,
                k::zip_map(g, v(*a), |gi, x| if x > 0.0 { gi } else { 0.0 }),
                grads,
            ),
            Op::Gelu(a) => send(*a, k::zip_map(g, v(*a), |gi, x| gi * k::gelu_grad(x)), grads),
            Op::Exp(a) => send(*a, k::zip_map(g, &node.value, |gi, y| gi * y), grads),
            Op::Softplus(a) => send(*a, k::zip_map(g, v(*a), |gi, x| gi * k::sigmoid(x)), grads),
            Op::LayerNorm {
                x,
                gain,
                bias,
                cache,
            } => {
                let (dx, dg, db) = k::layer_norm_backward(g, v(*gain), cache);
                send(*x, dx, grads);
                send(*gain, dg, grads);
                send(*bias, db, grads);
            }
            Op::Attention {
                q,
                k: kk,
                v: vv,
                heads,
                blocks,
                cache,
            } => {
                let (dq, dk, dv) =
                    k::attention_backward(g, v(*q), v(*kk), v(*vv), *heads, blocks, cache);
                send(*q, dq, grads);
                send(*kk, dk, grads);
                send(*vv, dv, grads);
            }
            Op::ConcatCols(a, b) => {
                let ca = v(*a).cols();
                let (mut ga, mut gb) = (Vec::new(), Vec::new());
                for i in 0..g.rows() {
                    ga.extend_from_slice(&g.row(i)[..ca]);
                    gb.extend_from_slice(&g.row(i)[ca..]);
                }
                send(*a, Tensor::from_parts(g.rows(), ca, ga), grads);
                send(*b, Tensor::from_parts(g.rows(), g.cols() - ca, gb), grads);
            }
            Op::SegmentMean(a, segs) => {
                let mut dx = Tensor::zeros(v(*a).rows(), g.cols());
                for (s, r) in segs.iter().enumerate() {
                    let w = 1.0 / r.len() as f64;
                    for i in r.clone() {
                        for (o, gi) in dx.row_mut(i).iter_mut().zip(g.row(s)) {
                            *o += w * gi;
                        }
                    }
                }
                send(*a, dx, grads);
            }
            Op::RepeatRows(a) => send(*a, k::sum_rows(g), grads),
            Op::GatherRows(a, idx) => {
                let mut dx = Tensor::zeros(v(*a).rows(), g.cols());
                for (s, &i) in idx.iter().enumerate() {
                    for (o, gi) in dx.row_mut(i).iter_mut().zip(g.row(s)) {
                        *o += gi;
                    }
                }
                send(*a, dx, grads);
            }
            Op::GatherMean(a, sets) => {
                send(*a, k::gather_mean_backward(g, sets, v(*a).rows()), grads)
            }
            Op::CandidateScores(s, table, cand) => {
                send(*s, k::candidate_scores_backward(g, table, cand), grads)
            }
            Op::LogSumExpRows(a) => {
                let x = v(*a);
                let mut dx = k::softmax_rows(x);
                for i in 0..x.rows() {
                    let gi = g.get(i, 0);
                    dx.row_mut(i).iter_mut().for_each(|p| *p *= gi);
                }
                send(*a, dx, grads);
            }
            Op::SelectCol(a, j) => {
                let x = v(*a);
                let mut dx = Tensor::zeros(x.rows(), x.cols());
                for i in 0..x.rows() {
                    dx.set(i, *j, g.get(i, 0));
                }
                send(*a, dx, grads);
            }
            Op::Sum(a) => {
                let (r, c) = v(*a).shape();
                send(*a, Tensor::full(r, c, g.item()), grads);
            }
            Op::SumSquares(a) => {
                let gi = g.item();
                send(*a, k::map(v(*a), |x| 2.0 * gi * x), grads);
            }
            Op::KernelMean { x, y, sigma, kmat } => {
                let (dx, dy) =
                    k::gaussian_kernel_mean_backward(g.item(), v(*x), v(*y), kmat, *sigma);
                send(*x, dx, grads);
                send(*y, dy, grads);
            }
        }
    }
}

impl Graph for Tape {
    type V = Var;

    fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, &[])
    }
    fn param(&mut self, params: &ParamSet, id: ParamId) -> Var {
        self.push(params.value(id).clone(), Op::Param(id), &[])
    }
    fn value<'a>(&'a self, v: &'a Var) -> &'a Tensor {
        self.val(*v)
    }
    fn matmul(&mut self, a: &Var, b: &Var) -> Var {
        let out = Eager.matmul(self.val(*a), self.val(*b));
        self.push(out, Op::MatMul(a.0, b.0), &[a.0, b.0])
    }
    fn add(&mut self, a: &Var, b: &Var) -> Var {
        let out = Eager.add(self.val(*a), self.val(*b));
        self.push(out, Op::Add(a.0, b.0), &[a.0, b.0])
    }
    fn sub(&mut self, a: &Var, b: &Var) -> Var {
        let out = Eager.sub(self.val(*a), self.val(*b));
        self.push(out, Op::Sub(a.0, b.0), &[a.0, b.0])
    }
    fn mul(&mut self, a: &Var, b: &Var) -> Var {
        let out = Eager.mul(self.val(*a), self.val(*b));
        self.push(out, Op::Mul(a.0, b.0), &[a.0, b.0])
    }
    fn add_row(&mut self, a: &Var, row: &Var) -> Var {
        let out = Eager.add_row(self.val(*a), self.val(*row));
        self.push(out, Op::AddRow(a.0, row.0), &[a.0, row.0])
    }
    fn scale(&mut self, a: &Var, c: f64) -> Var {
        let out = Eager.scale(self.val(*a), c);
        self.push(out, Op::Scale(a.0, c), &[a.0])
    }
    fn add_scalar(&mut self, a: &Var, c: f64) -> Var {
        let out = Eager.add_scalar(self.val(*a), c);
        self.push(out, Op::AddScalar(a.0), &[a.0])
    }
    fn relu(&mut self, a: &Var) -> Var {
        let out = Eager.relu(self.val(*a));
        self.push(out, Op::Relu(a.0), &[a.0])
    }
    fn gelu(&mut self, a: &Var) -> Var {
        let out = Eager.gelu(self.val(*a));
        self.push(out, Op::Gelu(a.0), &[a.0])
    }
    fn exp(&mut self, a: &Var) -> Var {
        let out = Eager.exp(self.val(*a));
        self.push(out, Op::Exp(a.0), &[a.0])
    }
    fn softplus(&mut self, a: &Var) -> Var {
        let out = Eager.softplus(self.val(*a));
        self.push(out, Op::Softplus(a.0), &[a.0])
    }
    fn layer_norm(&mut self, x: &Var, gain: &Var, bias: &Var) -> Var {
        check_row("layer_norm", self.val(*x), self.val(*gain));
        check_row("layer_norm", self.val(*x), self.val(*bias));
        let (out, cache) = k::layer_norm(self.val(*x), self.val(*gain), self.val(*bias));
        self.push(
            out,
            Op::LayerNorm {
                x: x.0,
                gain: gain.0,
                bias: bias.0,
                cache,
            },
            &[x.0, gain.0, bias.0],
        )
    }
    fn attention(&mut self, q: &Var, kv: &Var, v: &Var, heads: usize, blocks: &AttnBlocks) -> Var {
        let (qt, kt, vt) = (self.val(*q), self.val(*kv), self.val(*v));
        check_attention(qt, kt, vt, heads);
        let (out, cache) = k::attention(qt, kt, vt, heads, blocks);
        self.push(
            out,
            Op::Attention {
                q: q.0,
                k: kv.0,
                v: v.0,
                heads,
                blocks: blocks.to_vec(),
                cache,
            },
            &[q.0, kv.0, v.0],
        )
    }
    fn concat_cols(&mut self, a: &Var, b: &Var) -> Var {
        let out = concat_cols(self.val(*a), self.val(*b));
        self.push(out, Op::ConcatCols(a.0, b.0), &[a.0, b.0])
    }
    fn segment_mean(&mut self, x: &Var, segs: &[Range<usize>]) -> Var {
        let out = k::segment_mean(self.val(*x), segs);
        self.push(out, Op::SegmentMean(x.0, segs.to_vec()), &[x.0])
    }
    fn repeat_rows(&mut self, x: &Var, n: usize) -> Var {
        let out = repeat_rows(self.val(*x), n);
        self.push(out, Op::RepeatRows(x.0), &[x.0])
    }
    fn gather_rows(&mut self, x: &Var, idx: &[usize]) -> Var {
        let out = self.val(*x).select_rows(idx);
        self.push(out, Op::GatherRows(x.0, idx.to_vec()), &[x.0])
    }
    fn gather_mean(&mut self, x: &Var, sets: &Arc<Vec<Vec<u32>>>) -> Var {
        let out = k::gather_mean(self.val(*x), sets);
        self.push(out, Op::GatherMean(x.0, Arc::clone(sets)), &[x.0])
    }
    fn candidate_scores(&mut self, s: &Var, table: &Arc<Tensor>, cand: &Arc<Vec<Vec<u32>>>) -> Var {
        let out = k::candidate_scores(self.val(*s), table, cand);
        self.push(
            out,
            Op::CandidateScores(s.0, Arc::clone(table), Arc::clone(cand)),
            &[s.0],
        )
    }
    fn logsumexp_rows(&mut self, x: &Var) -> Var {
        let out = k::logsumexp_rows(self.val(*x));
        self.push(out, Op::LogSumExpRows(x.0), &[x.0])
    }
    fn select_col(&mut self, x: &Var, j: usize) -> Var {
        let out = select_col(self.val(*x), j);
        self.push(out, Op::SelectCol(x.0, j), &[x.0])
    }
    fn sum(&mut self, x: &Var) -> Var {
        let out = Tensor::scalar(self.val(*x).sum());
        self.push(out, Op::Sum(x.0), &[x.0])
    }
    fn sum_squares(&mut self, x: &Var) -> Var {
        let out = Tensor::scalar(self.val(*x).sum_squares());
        self.push(out, Op::SumSquares(x.0), &[x.0])
    }
    fn kernel_mean(&mut self, x: &Var, y: &Var, sigma: f64) -> Var {
        let (xt, yt) = (self.val(*x), self.val(*y));
        assert_eq!(xt.cols(), yt.cols(), "kernel_mean: width mismatch");
        let kmat = k::gaussian_kernel(xt, yt, sigma);
        let out = Tensor::scalar(kmat.sum() / kmat.len() as f64);
        self.push(
            out,
            Op::KernelMean {
                x: x.0,
                y: y.0,
                sigma,
                kmat,
            },
            &[x.0, y.0],
        )
    }
}
