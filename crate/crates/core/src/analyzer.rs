//! Query analyzer: cross-attention over the distilled matrix, self-attention
//! among literal elements, frequency-augmented attention pooling and a
//! log-cardinality regression head.

use std::collections::BTreeMap;
use std::fs;
use std::ops::Range;
use std::path::Path;
use std::sync::Arc;

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::baselines::Estimator;
use crate::corpus::{ElementId, FrequencyTable};
use crate::encoder::ElementTable;
use crate::error::{Error, Result};
use crate::par;
use crate::queries::{clamp_estimate, qerror, Operator, SetQuery, Workload};
use crate::tensor::kernels::Block;
use crate::tensor::layers::{AttnBlock, GeGlu, LayerNorm, MultiHead};
use crate::tensor::{adam_step, checkpoint, AdamConfig, Eager, Graph, ParamId, ParamSet, Tape, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AnalyzerHyper {
    pub d: usize,
    pub heads: usize,
    pub n_cross: usize,
    pub n_self: usize,
    pub lr: f64,
    pub b_q: usize,
    pub epochs: usize,
    pub lambda: f64,
    /// Queries held out of the training workload for early stopping.
    pub val_size: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
}

impl Default for AnalyzerHyper {
    fn default() -> Self {
        Self {
            d: 64,
            heads: 8,
            n_cross: 4,
            n_self: 8,
            lr: 0.001,
            b_q: 100,
            epochs: 100,
            lambda: 0.0,
            val_size: 200,
            patience: 10,
        }
    }
}

impl AnalyzerHyper {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.heads == 0 || self.d % self.heads != 0 {
            return Err(Error::Config(format!(
                "d={} must be a positive multiple of heads={}",
                self.d, self.heads
            )));
        }
        if self.b_q == 0 {
            return Err(Error::Config("b_q must be at least 1".into()));
        }
        Ok(())
    }
}

/// Seed vector, pooling attention over `(d+1)`-wide rows and the
/// post-pooling feed-forward block.
#[derive(Clone, Debug)]
struct PoolBlock {
    q0: ParamId,
    attn: MultiHead,
    ln1: LayerNorm,
    ffn: GeGlu,
    ln2: LayerNorm,
}

#[derive(Clone, Debug)]
pub struct AnalyzerModel {
    op: Operator,
    hyper: AnalyzerHyper,
    params: ParamSet,
    cross: Vec<AttnBlock>,
    self_stack: Vec<AttnBlock>,
    pool: PoolBlock,
    head_w: ParamId,
    head_b: ParamId,
    n_train: usize,
}

#[derive(Serialize, Deserialize)]
struct AnalyzerSidecar {
    op: Operator,
    hyper: AnalyzerHyper,
    n_train: usize,
    seed: u64,
}

/// A batch of literals laid out as consecutive row segments.
struct Batch {
    x0: Tensor,
    logf: Tensor,
    segs: Vec<Range<usize>>,
}

impl Batch {
    fn build(literals: &[&[ElementId]], freq: &FrequencyTable, table: &ElementTable) -> Result<Self> {
        let mut ids = Vec::new();
        let mut segs = Vec::with_capacity(literals.len());
        for lit in literals {
            if lit.is_empty() {
                return Err(Error::Domain("query literal must be non-empty".into()));
            }
            let start = ids.len();
            ids.extend_from_slice(lit);
            segs.push(start..ids.len());
        }
        let mut logf = Vec::with_capacity(ids.len());
        for &e in &ids {
            if e as usize >= table.len() {
                return Err(Error::UnknownElementId(e));
            }
            logf.push((1.0 + freq.count(e)? as f64).ln());
        }
        Ok(Self {
            x0: table.stack(&ids),
            logf: Tensor::new(ids.len(), 1, logf)?,
            segs,
        })
    }
}

impl AnalyzerModel {
    pub fn new(op: Operator, hyper: AnalyzerHyper, seed: u64) -> Result<Self> {
        hyper.validate()?;
        let d = hyper.d;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let cross = (0..hyper.n_cross)
            .map(|i| AttnBlock::new(&mut params, &format!("cross.{i}"), d, hyper.heads, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let self_stack = (0..hyper.n_self)
            .map(|i| AttnBlock::new(&mut params, &format!("self.{i}"), d, hyper.heads, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let q0 = params.add("pool.q0", Tensor::randn(1, d + 1, 1.0, &mut rng));
        let pool = PoolBlock {
            q0,
            attn: MultiHead::new(&mut params, "pool.attn", d + 1, d + 1, d, d, hyper.heads, &mut rng)?,
            ln1: LayerNorm::new(&mut params, "pool.ln1", d),
            ffn: GeGlu::new(&mut params, "pool.ffn", d, 2 * d, &mut rng),
            ln2: LayerNorm::new(&mut params, "pool.ln2", d),
        };
        let head_w = params.add("head.w", Tensor::randn(d, 1, (1.0 / d as f64).sqrt() * 0.1, &mut rng));
        let head_b = params.add_const("head.b", 1, 1, 0.0);
        Ok(Self {
            op,
            hyper,
            params,
            cross,
            self_stack,
            pool,
            head_w,
            head_b,
            n_train: 0,
        })
    }

    pub fn op(&self) -> Operator {
        self.op
    }

    pub fn hyper(&self) -> &AnalyzerHyper {
        &self.hyper
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    /// Record count of the corpus the model was trained against.
    pub fn n_train(&self) -> usize {
        self.n_train
    }

    /// `n_cross` rounds of `LN(x + Att(x, S_c, S_c))` then `LN(x + FFN(x))`.
    pub fn cross_stack<G: Graph>(&self, g: &mut G, x: &G::V, s_c: &G::V) -> Result<G::V> {
        let (k, n) = (g.value(x).rows(), g.value(s_c).rows());
        if n == 0 {
            return Err(Error::Domain("distilled matrix is empty; train the encoder first".into()));
        }
        let blocks: [Block; 1] = [(0..k, 0..n)];
        let mut x = x.clone();
        for blk in &self.cross {
            x = blk.forward(g, &self.params, &x, s_c, &blocks)?;
        }
        Ok(x)
    }

    /// Self-attention within each literal's row segment.
    pub fn self_stack<G: Graph>(&self, g: &mut G, x: &G::V, segs: &[Range<usize>]) -> Result<G::V> {
        let blocks: Vec<Block> = segs.iter().map(|s| (s.clone(), s.clone())).collect();
        let mut x = x.clone();
        for blk in &self.self_stack {
            x = blk.forward(g, &self.params, &x, &x, &blocks)?;
        }
        Ok(x)
    }

    /// `LN(AvgPool(q') + Att(q_0, q'_f, q'_f))` then `LN(q̃ + FFN(q̃))`, one
    /// output row per segment.
    pub fn attention_pool<G: Graph>(&self, g: &mut G, q: &G::V, q_f: &G::V, segs: &[Range<usize>]) -> Result<G::V> {
        let avg = g.segment_mean(q, segs);
        let q0 = g.param(&self.params, self.pool.q0);
        let seeds = g.repeat_rows(&q0, segs.len());
        let blocks: Vec<Block> = segs.iter().enumerate().map(|(b, s)| (b..b + 1, s.clone())).collect();
        let att = self.pool.attn.forward(g, &self.params, &seeds, q_f, &blocks)?;
        let r = g.add(&avg, &att);
        let qt = self.pool.ln1.forward(g, &self.params, &r);
        let f = self.pool.ffn.forward(g, &self.params, &qt);
        let r = g.add(&qt, &f);
        Ok(self.pool.ln2.forward(g, &self.params, &r))
    }

    /// Predicted log-cardinalities, one row per literal.
    fn forward<G: Graph>(&self, g: &mut G, batch: &Batch, s_c: &Tensor) -> Result<G::V> {
        if s_c.cols() != self.hyper.d || batch.x0.cols() != self.hyper.d {
            return Err(Error::Dimension {
                op: "analyzer",
                detail: format!(
                    "S_c width {}, element width {}, d={}",
                    s_c.cols(),
                    batch.x0.cols(),
                    self.hyper.d
                ),
            });
        }
        let x0 = g.constant(batch.x0.clone());
        let sc = g.constant(s_c.clone());
        let x = self.cross_stack(g, &x0, &sc)?;
        let x = self.self_stack(g, &x, &batch.segs)?;
        let lf = g.constant(batch.logf.clone());
        let xf = g.concat_cols(&x, &lf);
        let q = self.attention_pool(g, &x, &xf, &batch.segs)?;
        let w = g.param(&self.params, self.head_w);
        let b = g.param(&self.params, self.head_b);
        let z = g.matmul(&q, &w);
        Ok(g.add_row(&z, &b))
    }

    /// Smoothed WMQ training loss for a batch of literals with known
    /// cardinalities, recorded on `g`.
    pub fn surrogate_loss<G: Graph>(
        &self,
        g: &mut G,
        s_c: &Tensor,
        literals: &[&[ElementId]],
        trues: &[f64],
        freq: &FrequencyTable,
        table: &ElementTable,
    ) -> Result<G::V> {
        let batch = Batch::build(literals, freq, table)?;
        let z = self.forward(g, &batch, s_c)?;
        wmq_surrogate(g, &z, trues)
    }

    fn check_op(&self, q: &SetQuery) -> Result<()> {
        if q.op != self.op {
            return Err(Error::Config(format!(
                "analyzer was trained for {} queries, got {}",
                self.op, q.op
            )));
        }
        Ok(())
    }

    /// Log-cardinality before exponentiation and clamping.
    pub fn predict_log(&self, s_c: &Tensor, query: &SetQuery, freq: &FrequencyTable, table: &ElementTable) -> Result<f64> {
        self.check_op(query)?;
        Ok(self.predict_literals(s_c, &[query.literal()], freq, table)?[0])
    }

    /// Log-cardinalities for raw literals, in whatever element order they
    /// are given.
    pub fn predict_literals(
        &self,
        s_c: &Tensor,
        literals: &[&[ElementId]],
        freq: &FrequencyTable,
        table: &ElementTable,
    ) -> Result<Vec<f64>> {
        let batch = Batch::build(literals, freq, table)?;
        Ok(self.forward(&mut Eager, &batch, s_c)?.into_data())
    }

    /// `clamp(exp(z), 1, N)` with `N` taken from the frequency table.
    pub fn predict(&self, s_c: &Tensor, query: &SetQuery, freq: &FrequencyTable, table: &ElementTable) -> Result<f64> {
        let z = self.predict_log(s_c, query, freq, table)?;
        Ok(clamp_estimate(z.exp(), freq.n))
    }

    /// Clamped estimates for many queries, evaluated in chunks through [`par`].
    pub fn predict_batch(
        &self,
        exec: par::Execution,
        s_c: &Tensor,
        queries: &[SetQuery],
        freq: &FrequencyTable,
        table: &ElementTable,
    ) -> Result<Vec<f64>> {
        for q in queries {
            self.check_op(q)?;
        }
        let chunks: Vec<&[SetQuery]> = queries.chunks(64).collect();
        let out = par::map_with(exec, &chunks, |chunk| -> Result<Vec<f64>> {
            let lits: Vec<&[ElementId]> = chunk.iter().map(|q| q.literal()).collect();
            let batch = Batch::build(&lits, freq, table)?;
            let z = self.forward(&mut Eager, &batch, s_c)?;
            Ok(z.data().iter().map(|z| clamp_estimate(z.exp(), freq.n)).collect())
        });
        Ok(out.into_iter().collect::<Result<Vec<_>>>()?.concat())
    }

    pub fn save(&self, dir: &Path, seed: u64) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let stem = format!("analyzer-{}", self.op);
        checkpoint::save(&dir.join(format!("{stem}.ace")), &self.params.named_tensors())?;
        let sidecar = AnalyzerSidecar {
            op: self.op,
            hyper: self.hyper.clone(),
            n_train: self.n_train,
            seed,
        };
        let path = dir.join(format!("{stem}.json"));
        fs::write(&path, serde_json::to_string_pretty(&sidecar)?).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path, op: Operator) -> Result<Self> {
        let stem = format!("analyzer-{op}");
        let path = dir.join(format!("{stem}.json"));
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let sidecar: AnalyzerSidecar = serde_json::from_str(&text)?;
        let mut model = Self::new(sidecar.op, sidecar.hyper, sidecar.seed)?;
        model.params.load_named(&checkpoint::load(&dir.join(format!("{stem}.ace")))?)?;
        model.n_train = sidecar.n_train;
        Ok(model)
    }
}

/// Weights `ln c_i / Σ ln c_j`, uniform when every `c_i` is 1.
pub fn wmq_weights(trues: &[f64]) -> Result<Vec<f64>> {
    if trues.is_empty() {
        return Err(Error::Domain("empty batch".into()));
    }
    if let Some(c) = trues.iter().find(|&&c| !(c >= 1.0)) {
        return Err(Error::Domain(format!("true cardinality {c} is below 1")));
    }
    let logs: Vec<f64> = trues.iter().map(|c| c.ln()).collect();
    let total: f64 = logs.iter().sum();
    if total == 0.0 {
        let w = 1.0 / trues.len() as f64;
        return Ok(vec![w; trues.len()]);
    }
    Ok(logs.into_iter().map(|l| l / total).collect())
}

/// `Σ w_i · max{1, c'_i/c_i, c_i/c'_i}`.
pub fn wmq_loss(estimates: &[f64], trues: &[f64]) -> Result<f64> {
    if estimates.len() != trues.len() {
        return Err(Error::Dimension {
            op: "wmq_loss",
            detail: format!("{} estimates vs {} trues", estimates.len(), trues.len()),
        });
    }
    let w = wmq_weights(trues)?;
    let mut total = 0.0;
    for ((e, t), w) in estimates.iter().zip(trues).zip(w) {
        total += w * qerror(*e, *t)?;
    }
    Ok(total)
}

/// Sharpness of the smooth absolute value in the training surrogate.
const SMOOTH_BETA: f64 = 10.0;

/// `Σ w_i exp(smooth|z_i − ln c_i|)` with
/// `smooth|x| = (softplus(βx) + softplus(−βx) − 2 ln 2) / β`.
pub fn wmq_surrogate<G: Graph>(g: &mut G, z: &G::V, trues: &[f64]) -> Result<G::V> {
    let w = wmq_weights(trues)?;
    let n = trues.len();
    let logc = g.constant(Tensor::new(n, 1, trues.iter().map(|c| c.ln()).collect())?);
    let diff = g.sub(z, &logc);
    let up = g.scale(&diff, SMOOTH_BETA);
    let down = g.scale(&diff, -SMOOTH_BETA);
    let a = g.softplus(&up);
    let b = g.softplus(&down);
    let s = g.add(&a, &b);
    let s = g.add_scalar(&s, -2.0 * std::f64::consts::LN_2);
    let s = g.scale(&s, 1.0 / SMOOTH_BETA);
    let e = g.exp(&s);
    let wt = g.constant(Tensor::new(n, 1, w)?);
    let p = g.mul(&e, &wt);
    Ok(g.sum(&p))
}

/// Per-epoch training trace.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct AnalyzerReport {
    pub op: Option<Operator>,
    /// Mean surrogate loss per epoch, entry 0 before any update.
    pub train_loss: Vec<f64>,
    /// Mean validation Q-error per epoch, entry 0 before any update.
    pub val_qerror: Vec<f64>,
    pub best_epoch: usize,
    pub seconds: f64,
}

/// Training inputs shared by every operator.
pub struct TrainContext<'a> {
    pub s_c: &'a Tensor,
    pub freq: &'a FrequencyTable,
    pub table: &'a ElementTable,
}

struct Example {
    literal: Vec<ElementId>,
    card: f64,
}

fn examples(workload: &Workload, op: Operator) -> Vec<Example> {
    workload
        .entries
        .iter()
        .filter(|e| e.labeled.query.op == op && e.labeled.cardinality >= 1)
        .map(|e| Example {
            literal: e.labeled.query.literal().to_vec(),
            card: e.labeled.cardinality as f64,
        })
        .collect()
}

fn mean_qerror(model: &AnalyzerModel, ctx: &TrainContext, data: &[Example]) -> Result<f64> {
    if data.is_empty() {
        return Ok(1.0);
    }
    let mut total = 0.0;
    for chunk in data.chunks(128) {
        let lits: Vec<&[ElementId]> = chunk.iter().map(|e| e.literal.as_slice()).collect();
        let batch = Batch::build(&lits, ctx.freq, ctx.table)?;
        let z = model.forward(&mut Eager, &batch, ctx.s_c)?;
        for (z, ex) in z.data().iter().zip(chunk) {
            total += qerror(clamp_estimate(z.exp(), ctx.freq.n), ex.card)?;
        }
    }
    Ok(total / data.len() as f64)
}

fn surrogate_mean(model: &AnalyzerModel, ctx: &TrainContext, data: &[Example], b_q: usize) -> Result<f64> {
    let mut total = 0.0;
    let mut batches = 0;
    for chunk in data.chunks(b_q) {
        let lits: Vec<&[ElementId]> = chunk.iter().map(|e| e.literal.as_slice()).collect();
        let batch = Batch::build(&lits, ctx.freq, ctx.table)?;
        let mut g = Eager;
        let z = model.forward(&mut g, &batch, ctx.s_c)?;
        let trues: Vec<f64> = chunk.iter().map(|e| e.card).collect();
        total += wmq_surrogate(&mut g, &z, &trues)?.item();
        batches += 1;
    }
    Ok(if batches == 0 { 0.0 } else { total / batches as f64 })
}

fn step(model: &mut AnalyzerModel, ctx: &TrainContext, chunk: &[&Example], lr: f64) -> Result<f64> {
    let lits: Vec<&[ElementId]> = chunk.iter().map(|e| e.literal.as_slice()).collect();
    let trues: Vec<f64> = chunk.iter().map(|e| e.card).collect();
    let mut tape = Tape::new();
    let mut loss = model.surrogate_loss(&mut tape, ctx.s_c, &lits, &trues, ctx.freq, ctx.table)?;
    if model.hyper.lambda > 0.0 {
        let ids: Vec<ParamId> = model.params.ids().collect();
        for id in ids {
            let p = tape.param(&model.params, id);
            let sq = tape.sum_squares(&p);
            let sq = tape.scale(&sq, model.hyper.lambda);
            loss = tape.add(&loss, &sq);
        }
    }
    let value = tape.value(&loss).item();
    if !value.is_finite() {
        return Err(Error::NonFiniteGradient(format!("analyzer loss is {value}")));
    }
    tape.backward(loss, &mut model.params);
    adam_step(&mut model.params, &AdamConfig::with_lr(lr))?;
    Ok(value)
}

/// Train with Adam on `B_q`-sized batches and keep the parameters with the
/// best validation Q-error.
fn fit<R: Rng + ?Sized>(
    model: &mut AnalyzerModel,
    ctx: &TrainContext,
    train: &[Example],
    val: &[Example],
    epochs: usize,
    rng: &mut R,
) -> Result<AnalyzerReport> {
    let started = std::time::Instant::now();
    let b_q = model.hyper.b_q;
    let lr = model.hyper.lr;
    let mut report = AnalyzerReport {
        op: Some(model.op),
        train_loss: vec![surrogate_mean(model, ctx, train, b_q)?],
        ..AnalyzerReport::default()
    };
    let monitor = if val.is_empty() { train } else { val };
    let mut best = mean_qerror(model, ctx, monitor)?;
    report.val_qerror.push(best);
    let mut best_params = model.params.clone();
    let mut since_best = 0;
    let mut order: Vec<&Example> = train.iter().collect();
    for epoch in 1..=epochs {
        order.shuffle(rng);
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(b_q) {
            total += step(model, ctx, chunk, lr)?;
            batches += 1;
        }
        let v = mean_qerror(model, ctx, monitor)?;
        report.train_loss.push(total / batches.max(1) as f64);
        report.val_qerror.push(v);
        info!(
            "analyzer[{}] epoch {epoch}: loss={:.4} val_qerror={v:.4}",
            model.op,
            total / batches.max(1) as f64
        );
        if v < best {
            best = v;
            best_params = model.params.clone();
            report.best_epoch = epoch;
            since_best = 0;
        } else {
            since_best += 1;
            if model.hyper.patience > 0 && since_best >= model.hyper.patience {
                break;
            }
        }
    }
    model.params.copy_values_from(&best_params);
    report.seconds = started.elapsed().as_secs_f64();
    Ok(report)
}

/// Train a fresh analyzer for `op` from the matching workload entries.
pub fn train_analyzer(
    op: Operator,
    workload: &Workload,
    ctx: &TrainContext,
    hyper: &AnalyzerHyper,
    seed: u64,
) -> Result<(AnalyzerModel, AnalyzerReport)> {
    let mut data = examples(workload, op);
    if data.is_empty() {
        return Err(Error::Domain(format!("no {op} queries in the training workload")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xa11a);
    data.shuffle(&mut rng);
    let val_size = if data.len() > hyper.val_size * 2 {
        hyper.val_size
    } else {
        warn!("{} {op} queries leave no room for a {}-query validation split", data.len(), hyper.val_size);
        data.len() / 5
    };
    let val = data.split_off(data.len() - val_size);
    let mut model = AnalyzerModel::new(op, hyper.clone(), seed)?;
    model.n_train = ctx.freq.n;
    let mean_log = data.iter().map(|e| e.card.ln()).sum::<f64>() / data.len() as f64;
    *model.params.value_mut(model.head_b) = Tensor::scalar(mean_log);
    let report = fit(&mut model, ctx, &data, &val, hyper.epochs, &mut rng)?;
    Ok((model, report))
}

/// Continue training an existing analyzer on a small post-update workload.
pub fn fine_tune(
    model: &mut AnalyzerModel,
    workload: &Workload,
    ctx: &TrainContext,
    epochs: usize,
    seed: u64,
) -> Result<AnalyzerReport> {
    let data = examples(workload, model.op);
    if data.is_empty() {
        return Err(Error::Domain(format!("no {} queries to fine-tune on", model.op)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xf1e);
    model.n_train = ctx.freq.n;
    let patience = model.hyper.patience;
    model.hyper.patience = 0;
    let out = fit(model, ctx, &data, &[], epochs, &mut rng);
    model.hyper.patience = patience;
    out
}

/// The full estimator: one analyzer per operator plus the encoder outputs it
/// reads at estimation time.
#[derive(Clone, Debug)]
pub struct AceEstimator {
    models: BTreeMap<Operator, Arc<AnalyzerModel>>,
    s_c: Arc<Tensor>,
    freq: Arc<FrequencyTable>,
    table: ElementTable,
}

impl AceEstimator {
    pub fn new(s_c: Tensor, freq: FrequencyTable, table: ElementTable) -> Self {
        Self {
            models: BTreeMap::new(),
            s_c: Arc::new(s_c),
            freq: Arc::new(freq),
            table,
        }
    }

    pub fn insert(&mut self, model: AnalyzerModel) {
        self.models.insert(model.op, Arc::new(model));
    }

    pub fn model(&self, op: Operator) -> Option<&AnalyzerModel> {
        self.models.get(&op).map(|m| m.as_ref())
    }

    pub fn operators(&self) -> Vec<Operator> {
        self.models.keys().copied().collect()
    }

    pub fn s_c(&self) -> &Tensor {
        &self.s_c
    }

    pub fn freq(&self) -> &FrequencyTable {
        &self.freq
    }

    /// Swap in refreshed encoder outputs after an update.
    pub fn refresh(&mut self, s_c: Tensor, freq: FrequencyTable) {
        self.s_c = Arc::new(s_c);
        self.freq = Arc::new(freq);
    }

    fn model_for(&self, op: Operator) -> Result<&AnalyzerModel> {
        self.model(op)
            .ok_or_else(|| Error::Config(format!("no analyzer trained for {op} queries")))
    }

    pub fn predict(&self, q: &SetQuery) -> Result<f64> {
        self.model_for(q.op)?.predict(&self.s_c, q, &self.freq, &self.table)
    }

    pub fn predict_batch(&self, exec: par::Execution, queries: &[SetQuery]) -> Result<Vec<f64>> {
        let mut out = vec![0.0; queries.len()];
        for op in Operator::ALL {
            let idx: Vec<usize> = (0..queries.len()).filter(|&i| queries[i].op == op).collect();
            if idx.is_empty() {
                continue;
            }
            let qs: Vec<SetQuery> = idx.iter().map(|&i| queries[i].clone()).collect();
            let est = self.model_for(op)?.predict_batch(exec, &self.s_c, &qs, &self.freq, &self.table)?;
            for (i, e) in idx.into_iter().zip(est) {
                out[i] = e;
            }
        }
        Ok(out)
    }
}

impl Estimator for AceEstimator {
    fn name(&self) -> &str {
        "ace"
    }

    fn estimate(&self, q: &SetQuery) -> Result<f64> {
        self.predict(q)
    }

    fn size_bytes(&self) -> usize {
        let params: usize = self.models.values().map(|m| m.params.num_scalars()).sum();
        (params + self.s_c.len() + self.table.len() * self.table.dim()) * std::mem::size_of::<f64>()
            + self.freq.counts.len() * std::mem::size_of::<u64>()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wmq_hand_example() {
        let v = wmq_loss(&[20.0, 50.0], &[10.0, 100.0]).unwrap();
        assert!((v - 2.0).abs() < 1e-12);
        let w = wmq_weights(&[10.0, 100.0]).unwrap();
        assert!((w[0] - 1.0 / 3.0).abs() < 1e-12 && (w[1] - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn wmq_degenerate_cases() {
        assert_eq!(wmq_loss(&[5.0, 5.0], &[5.0, 5.0]).unwrap(), 1.0);
        assert_eq!(wmq_loss(&[3.0], &[12.0]).unwrap(), 4.0);
        assert_eq!(wmq_weights(&[1.0, 1.0]).unwrap(), vec![0.5, 0.5]);
        assert!(wmq_loss(&[1.0], &[0.5]).is_err());
        assert!(wmq_loss(&[], &[]).is_err());
    }

    #[test]
    fn surrogate_tracks_qerror() {
        let trues = [10.0, 100.0];
        let z = Tensor::new(2, 1, vec![20f64.ln(), 50f64.ln()]).unwrap();
        let s = wmq_surrogate(&mut Eager, &z, &trues).unwrap().item();
        // Away from zero the smooth |x| sits 2 ln 2 / β below |x|.
        let expected = 2.0 * (-2.0 * std::f64::consts::LN_2 / SMOOTH_BETA).exp();
        assert!((s - expected).abs() < 1e-3, "{s} vs {expected}");
        let perfect = Tensor::new(2, 1, vec![10f64.ln(), 100f64.ln()]).unwrap();
        let s = wmq_surrogate(&mut Eager, &perfect, &trues).unwrap().item();
        assert!((s - 1.0).abs() < 1e-12);
    }

    #[test]
    fn single_row_pooling_uses_the_row() {
        let model = AnalyzerModel::new(Operator::Overlap, AnalyzerHyper { d: 4, heads: 2, n_cross: 1, n_self: 1, ..AnalyzerHyper::default() }, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::randn(1, 4, 1.0, &mut rng);
        let xf = Tensor::randn(1, 5, 1.0, &mut rng);
        let out = model.attention_pool(&mut Eager, &x, &xf, &[0..1]).unwrap();
        assert_eq!(out.shape(), (1, 4));
        let x3 = Tensor::randn(3, 4, 1.0, &mut rng);
        let xf3 = Tensor::randn(3, 5, 1.0, &mut rng);
        let out = model.attention_pool(&mut Eager, &x3, &xf3, &[0..3]).unwrap();
        assert_eq!(out.shape(), (1, 4));
    }
}
