//! Data encoder: frozen element embeddings, a mean-pooling aggregator and an
//! iterative cross-attention distiller that condenses each corpus slice into
//! a handful of rows.

use std::fs;
use std::path::Path;
use std::sync::Arc;

use log::{info, warn};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{self, Corpus, CorpusSlice, ElementId};
use crate::error::{Error, Result};
use crate::par;
use crate::tensor::layers::AttnBlock;
use crate::tensor::{adam_step, checkpoint, kernels, AdamConfig, Eager, Graph, ParamId, ParamSet, Tape, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderHyper {
    pub d: usize,
    pub b_d: usize,
    pub r: f64,
    pub n_distill: usize,
    pub heads: usize,
    pub lambda: f64,
    pub lr: f64,
    pub epochs: usize,
    pub n_neg: usize,
    /// Fraction of slices (from the front) used for training.
    pub train_fraction: f64,
    /// Rows of `S_o` subsampled per MMD evaluation.
    pub mmd_sample: usize,
}

impl Default for EncoderHyper {
    fn default() -> Self {
        Self {
            d: 64,
            b_d: 10_000,
            r: 0.001,
            n_distill: 4,
            heads: 8,
            lambda: 0.0,
            lr: 0.001,
            epochs: 10,
            n_neg: 10,
            train_fraction: 0.5,
            mmd_sample: 512,
        }
    }
}

impl EncoderHyper {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.d == 0 || self.heads == 0 || self.d % self.heads != 0 {
            return bad(format!("d={} must be a positive multiple of heads={}", self.d, self.heads));
        }
        if self.b_d == 0 {
            return bad("b_d must be at least 1".into());
        }
        if !(self.r > 0.0 && self.r <= 1.0) {
            return bad(format!("distillation ratio r={} must lie in (0, 1]", self.r));
        }
        if self.n_distill == 0 {
            return bad("n_distill must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.train_fraction) {
            return bad(format!("train_fraction={} must lie in [0, 1]", self.train_fraction));
        }
        if self.lambda < 0.0 || !self.lr.is_finite() || self.lr <= 0.0 {
            return bad("lambda must be non-negative and lr positive".into());
        }
        Ok(())
    }
}

/// Distilled rows for a slice of `len` live records: `ceil(r * len)`, at
/// least one when the slice is non-empty.
pub fn distilled_rows(len: usize, r: f64) -> usize {
    if len == 0 {
        return 0;
    }
    // Guard against products like 0.001 * 10000 landing just above 10.
    let raw = r * len as f64;
    let rounded = raw.round();
    let rows = if (raw - rounded).abs() < 1e-9 { rounded } else { raw.ceil() };
    (rows as usize).clamp(1, len)
}

/// Frozen `M x d` element embeddings drawn from `Normal(0, 1/d)`.
#[derive(Clone, Debug)]
pub struct ElementTable {
    embeddings: Arc<Tensor>,
    seed: u64,
}

impl ElementTable {
    pub fn new(m: usize, d: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let std = (1.0 / d as f64).sqrt();
        Self {
            embeddings: Arc::new(Tensor::randn(m, d, std, &mut rng)),
            seed,
        }
    }

    pub fn from_tensor(t: Tensor, seed: u64) -> Self {
        Self {
            embeddings: Arc::new(t),
            seed,
        }
    }

    pub fn embeddings(&self) -> &Arc<Tensor> {
        &self.embeddings
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn len(&self) -> usize {
        self.embeddings.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.embeddings.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.embeddings.cols()
    }

    pub fn row(&self, e: ElementId) -> &[f64] {
        self.embeddings.row(e as usize)
    }

    /// Rows for `ids`, stacked in order.
    pub fn stack(&self, ids: &[ElementId]) -> Tensor {
        let idx: Vec<usize> = ids.iter().map(|&e| e as usize).collect();
        self.embeddings.select_rows(&idx)
    }
}

/// Distilled rows for one corpus slice.
#[derive(Clone, Debug, PartialEq)]
pub struct SliceBlock {
    pub slice: CorpusSlice,
    pub rows: Tensor,
}

/// The compact dataset representation `S_c`, kept per slice so updates can
/// replace individual blocks.
#[derive(Clone, Debug, PartialEq)]
pub struct DistilledMatrix {
    d: usize,
    blocks: Vec<SliceBlock>,
}

impl DistilledMatrix {
    pub fn new(d: usize, blocks: Vec<SliceBlock>) -> Self {
        Self { d, blocks }
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn blocks(&self) -> &[SliceBlock] {
        &self.blocks
    }

    pub fn total_rows(&self) -> usize {
        self.blocks.iter().map(|b| b.rows.rows()).sum()
    }

    /// All blocks stacked in slice order.
    pub fn s_c(&self) -> Tensor {
        let parts: Vec<&Tensor> = self.blocks.iter().map(|b| &b.rows).collect();
        if parts.is_empty() {
            return Tensor::zeros(0, self.d);
        }
        Tensor::concat_rows(&parts).expect("blocks share a width")
    }

    pub fn block_mut(&mut self, slice_id: usize) -> Option<&mut SliceBlock> {
        self.blocks.iter_mut().find(|b| b.slice.slice_id == slice_id)
    }

    pub fn push(&mut self, block: SliceBlock) {
        self.blocks.push(block);
    }

    /// Stored size in bytes of the distilled rows.
    pub fn size_bytes(&self) -> usize {
        self.total_rows() * self.d * std::mem::size_of::<f64>()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let named: Vec<(String, Tensor)> = self
            .blocks
            .iter()
            .map(|b| {
                let r = &b.slice.range;
                (format!("slice/{}/{}/{}", b.slice.slice_id, r.start, r.end), b.rows.clone())
            })
            .collect();
        checkpoint::save(path, &named)
    }

    pub fn load(path: &Path, d: usize) -> Result<Self> {
        let mut blocks = Vec::new();
        for (name, rows) in checkpoint::load(path)? {
            let parts: Vec<&str> = name.split('/').collect();
            let parsed = match parts.as_slice() {
                ["slice", id, start, end] => id
                    .parse()
                    .ok()
                    .zip(start.parse().ok())
                    .zip(end.parse().ok())
                    .map(|((id, s), e)| (id, s, e)),
                _ => None,
            };
            let (slice_id, start, end) =
                parsed.ok_or_else(|| Error::Checkpoint(format!("unexpected tensor `{name}`")))?;
            if rows.rows() > 0 && rows.cols() != d {
                return Err(Error::Checkpoint(format!("block `{name}` has width {}", rows.cols())));
            }
            blocks.push(SliceBlock {
                slice: CorpusSlice {
                    slice_id,
                    range: start..end,
                },
                rows,
            });
        }
        Ok(Self { d, blocks })
    }
}

/// Aggregator and distiller parameters plus the frozen element table.
#[derive(Clone, Debug)]
pub struct EncoderModel {
    table: ElementTable,
    params: ParamSet,
    agg_w: ParamId,
    agg_b: ParamId,
    distill_first: AttnBlock,
    distill_shared: AttnBlock,
    hyper: EncoderHyper,
    seed: u64,
}

#[derive(Serialize, Deserialize)]
struct EncoderSidecar {
    hyper: EncoderHyper,
    seed: u64,
    table_seed: u64,
    m: usize,
}

impl EncoderModel {
    pub fn new(m: usize, hyper: EncoderHyper, seed: u64) -> Result<Self> {
        hyper.validate()?;
        if m == 0 {
            return Err(Error::Config("element universe is empty".into()));
        }
        let d = hyper.d;
        let table = ElementTable::new(m, d, seed ^ 0x7ab1e);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let agg_w = params.add_weight("aggregator.w", d, d, &mut rng);
        let agg_b = params.add_const("aggregator.b", 1, d, 0.0);
        let distill_first = AttnBlock::new(&mut params, "distill.first", d, hyper.heads, &mut rng)?;
        let distill_shared = AttnBlock::new(&mut params, "distill.shared", d, hyper.heads, &mut rng)?;
        Ok(Self {
            table,
            params,
            agg_w,
            agg_b,
            distill_first,
            distill_shared,
            hyper,
            seed,
        })
    }

    pub fn hyper(&self) -> &EncoderHyper {
        &self.hyper
    }

    pub fn table(&self) -> &ElementTable {
        &self.table
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Set the aggregator to `ReLU(e I + 0)`.
    pub fn set_aggregator_identity(&mut self) {
        let d = self.hyper.d;
        *self.params.value_mut(self.agg_w) = Tensor::identity(d);
        *self.params.value_mut(self.agg_b) = Tensor::zeros(1, d);
    }

    /// Replace the element table (used by tests with hand-picked vectors).
    pub fn set_table(&mut self, table: ElementTable) -> Result<()> {
        if table.dim() != self.hyper.d {
            return Err(Error::Dimension {
                op: "set_table",
                detail: format!("width {} vs d={}", table.dim(), self.hyper.d),
            });
        }
        self.table = table;
        Ok(())
    }

    /// `MLP(e)` for the given table rows.
    fn mlp<G: Graph>(&self, g: &mut G, e: &G::V) -> G::V {
        let w = g.param(&self.params, self.agg_w);
        let b = g.param(&self.params, self.agg_b);
        let h = g.matmul(e, &w);
        let h = g.add_row(&h, &b);
        g.relu(&h)
    }

    /// Hidden representation of every element, `M x d`.
    pub fn element_hidden<G: Graph>(&self, g: &mut G) -> G::V {
        let e = g.constant((*self.table.embeddings).clone());
        self.mlp(g, &e)
    }

    /// Embeddings of many sets at once: row `i` is the mean of the hidden
    /// rows of `sets[i]`.
    pub fn encode_sets<G: Graph>(&self, g: &mut G, hidden: &G::V, sets: &Arc<Vec<Vec<u32>>>) -> G::V {
        g.gather_mean(hidden, sets)
    }

    /// `MeanPool({MLP(e_j) : e_j in s})` as a `1 x d` row.
    pub fn embed_set(&self, elements: &[ElementId]) -> Result<Tensor> {
        if elements.is_empty() {
            return Err(Error::Domain("cannot embed an empty set".into()));
        }
        if let Some(&e) = elements.iter().find(|&&e| e as usize >= self.table.len()) {
            return Err(Error::UnknownElementId(e));
        }
        let mut g = Eager;
        let e = self.table.stack(elements);
        let h = self.mlp(&mut g, &e);
        Ok(kernels::segment_mean(&h, &[0..elements.len()]))
    }

    /// Run the distiller recurrence from `s_c0` with `s_o` as keys/values.
    pub fn distill<G: Graph>(&self, g: &mut G, s_o: &G::V, s_c0: &G::V) -> Result<G::V> {
        let (m, n) = (g.value(s_c0).rows(), g.value(s_o).rows());
        if g.value(s_o).cols() != self.hyper.d || g.value(s_c0).cols() != self.hyper.d {
            return Err(Error::Dimension {
                op: "distill",
                detail: format!(
                    "S_o width {}, S_c width {}, d={}",
                    g.value(s_o).cols(),
                    g.value(s_c0).cols(),
                    self.hyper.d
                ),
            });
        }
        let blocks = [(0..m, 0..n)];
        let ps = &self.params;
        let mut x = self.distill_first.forward(g, ps, s_c0, s_o, &blocks)?;
        if self.hyper.n_distill > 1 {
            let (k, v) = self.distill_shared.attn.project_kv(g, ps, s_o)?;
            for _ in 1..self.hyper.n_distill {
                x = self.distill_shared.forward_projected(g, ps, &x, &k, &v, &blocks)?;
            }
        }
        Ok(x)
    }

    pub fn distill_eager(&self, s_o: &Tensor, s_c0: &Tensor) -> Result<Tensor> {
        self.distill(&mut Eager, s_o, s_c0)
    }

    /// Deterministic RNG for the initial sample of a slice.
    fn slice_rng(&self, slice_id: usize) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ (slice_id as u64 + 1))
    }

    /// Encode and distill one slice (live records only).
    pub fn distill_slice(&self, corpus: &Corpus, slice: &CorpusSlice) -> Result<SliceBlock> {
        let s_o = encode_slice(self, corpus, slice);
        if s_o.rows() == 0 {
            return Ok(SliceBlock {
                slice: slice.clone(),
                rows: Tensor::zeros(0, self.hyper.d),
            });
        }
        let mut rng = self.slice_rng(slice.slice_id);
        let s_c0 = init_distilled(&s_o, self.hyper.r, &mut rng);
        let rows = self.distill_eager(&s_o, &s_c0)?;
        Ok(SliceBlock {
            slice: slice.clone(),
            rows,
        })
    }

    /// Distil every slice. Slices are independent and run through [`par`].
    pub fn distill_all(&self, corpus: &Corpus, slices: &[CorpusSlice]) -> Result<DistilledMatrix> {
        self.distill_all_with(par::Execution::available(), corpus, slices)
    }

    pub fn distill_all_with(
        &self,
        exec: par::Execution,
        corpus: &Corpus,
        slices: &[CorpusSlice],
    ) -> Result<DistilledMatrix> {
        let blocks = par::map_with(exec, slices, |s| self.distill_slice(corpus, s));
        Ok(DistilledMatrix::new(self.hyper.d, blocks.into_iter().collect::<Result<_>>()?))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut named = self.params.named_tensors();
        named.push(("element_table".into(), (*self.table.embeddings).clone()));
        checkpoint::save(&dir.join("encoder.ace"), &named)?;
        let sidecar = EncoderSidecar {
            hyper: self.hyper.clone(),
            seed: self.seed,
            table_seed: self.table.seed,
            m: self.table.len(),
        };
        let path = dir.join("encoder.json");
        fs::write(&path, serde_json::to_string_pretty(&sidecar)?).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("encoder.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let sidecar: EncoderSidecar = serde_json::from_str(&text)?;
        let mut model = Self::new(sidecar.m, sidecar.hyper, sidecar.seed)?;
        let named = checkpoint::load(&dir.join("encoder.ace"))?;
        model.params.load_named(&named)?;
        let table = named
            .into_iter()
            .find(|(n, _)| n == "element_table")
            .ok_or_else(|| Error::Checkpoint("missing element_table".into()))?
            .1;
        if table.shape() != (sidecar.m, model.hyper.d) {
            return Err(Error::Checkpoint(format!("element_table has shape {:?}", table.shape())));
        }
        model.table = ElementTable::from_tensor(table, sidecar.table_seed);
        Ok(model)
    }
}

/// Row `i` is `embed_set` of the `i`-th live record in the slice.
pub fn encode_slice(model: &EncoderModel, corpus: &Corpus, slice: &CorpusSlice) -> Tensor {
    let sets = slice_sets(corpus, slice);
    let mut g = Eager;
    let hidden = model.element_hidden(&mut g);
    model.encode_sets(&mut g, &hidden, &Arc::new(sets))
}

fn slice_sets(corpus: &Corpus, slice: &CorpusSlice) -> Vec<Vec<u32>> {
    corpus
        .live_positions(slice.range.clone())
        .into_iter()
        .map(|p| corpus.record(p).elements().to_vec())
        .collect()
}

/// Sample `ceil(r * rows)` distinct rows of `s_o` as the starting point.
pub fn init_distilled<R: Rng + ?Sized>(s_o: &Tensor, r: f64, rng: &mut R) -> Tensor {
    s_o.select_rows(&init_indices(s_o.rows(), r, rng))
}

fn init_indices<R: Rng + ?Sized>(rows: usize, r: f64, rng: &mut R) -> Vec<usize> {
    index::sample(rng, rows, distilled_rows(rows, r)).into_vec()
}

/// Median pairwise Euclidean distance over the rows of `a` and `b` pooled;
/// 1 when the median is zero.
pub fn median_bandwidth(a: &Tensor, b: &Tensor) -> f64 {
    let pooled: Vec<&[f64]> = (0..a.rows()).map(|i| a.row(i)).chain((0..b.rows()).map(|i| b.row(i))).collect();
    let mut dists = Vec::with_capacity(pooled.len() * pooled.len().saturating_sub(1) / 2);
    for i in 0..pooled.len() {
        for j in i + 1..pooled.len() {
            dists.push(kernels::sq_dist(pooled[i], pooled[j]).sqrt());
        }
    }
    if dists.is_empty() {
        return 1.0;
    }
    let mid = dists.len() / 2;
    let (_, m, _) = dists.select_nth_unstable_by(mid, f64::total_cmp);
    if *m > 0.0 {
        *m
    } else {
        1.0
    }
}

/// Biased MMD² with a Gaussian kernel of bandwidth `sigma`.
pub fn mmd_graph<G: Graph>(g: &mut G, s_o: &G::V, s_c: &G::V, sigma: f64) -> G::V {
    let koo = g.kernel_mean(s_o, s_o, sigma);
    let kcc = g.kernel_mean(s_c, s_c, sigma);
    let koc = g.kernel_mean(s_o, s_c, sigma);
    let a = g.add(&koo, &kcc);
    let b = g.scale(&koc, 2.0);
    g.sub(&a, &b)
}

/// Biased MMD² between two row sets, bandwidth from the median heuristic.
pub fn mmd_loss(s_ob: &Tensor, s_cb: &Tensor) -> Result<f64> {
    if s_ob.rows() == 0 || s_cb.rows() == 0 || s_ob.cols() != s_cb.cols() {
        return Err(Error::Dimension {
            op: "mmd_loss",
            detail: format!("{:?} vs {:?}", s_ob.shape(), s_cb.shape()),
        });
    }
    let sigma = median_bandwidth(s_ob, s_cb);
    Ok(mmd_graph(&mut Eager, s_ob, s_cb, sigma).item())
}

/// Candidate element lists for the sampled-softmax loss: column 0 holds
/// one positive element of each set, the rest are distinct negatives drawn
/// uniformly from outside the set.
pub fn sample_candidates<R: Rng + ?Sized>(sets: &[Vec<u32>], m: usize, n_neg: usize, rng: &mut R) -> Vec<Vec<u32>> {
    let room = sets.iter().map(|s| m - s.len()).min().unwrap_or(0);
    let n_eff = n_neg.min(room);
    if n_eff < n_neg {
        warn!("only {room} elements available outside some set; using {n_eff} negatives instead of {n_neg}");
    }
    sets.iter()
        .map(|s| {
            let mut cand = Vec::with_capacity(n_eff + 1);
            cand.push(s[rng.random_range(0..s.len())]);
            let free = m - s.len();
            if free <= 4 * n_eff {
                let complement: Vec<u32> = (0..m as u32).filter(|e| s.binary_search(e).is_err()).collect();
                cand.extend(index::sample(rng, free, n_eff).into_iter().map(|i| complement[i]));
            } else {
                while cand.len() < n_eff + 1 {
                    let e = rng.random_range(0..m as u32);
                    if s.binary_search(&e).is_err() && !cand[1..].contains(&e) {
                        cand.push(e);
                    }
                }
            }
            cand
        })
        .collect()
}

/// `Σ_i −s_i·e_pos + log Σ_{k ∈ {pos} ∪ negatives} exp(s_i·e_k)`.
pub fn ce_graph<G: Graph>(g: &mut G, s: &G::V, table: &Arc<Tensor>, cand: &Arc<Vec<Vec<u32>>>) -> G::V {
    let scores = g.candidate_scores(s, table, cand);
    let lse = g.logsumexp_rows(&scores);
    let lse = g.sum(&lse);
    let pos = g.select_col(&scores, 0);
    let pos = g.sum(&pos);
    g.sub(&lse, &pos)
}

/// Cross-entropy term over the live records of a slice with freshly drawn
/// positives and negatives.
pub fn ce_loss<R: Rng + ?Sized>(
    model: &EncoderModel,
    corpus: &Corpus,
    slice: &CorpusSlice,
    n_neg: usize,
    rng: &mut R,
) -> Result<f64> {
    if n_neg == 0 {
        return Err(Error::Config("n_neg must be at least 1".into()));
    }
    let sets = slice_sets(corpus, slice);
    if sets.is_empty() {
        return Ok(0.0);
    }
    let cand = Arc::new(sample_candidates(&sets, corpus.m(), n_neg, rng));
    let mut g = Eager;
    let hidden = model.element_hidden(&mut g);
    let s = model.encode_sets(&mut g, &hidden, &Arc::new(sets));
    Ok(ce_graph(&mut g, &s, model.table.embeddings(), &cand).item())
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub ce: f64,
    pub mmd: f64,
    pub l2: f64,
    pub total: f64,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct EncoderReport {
    pub epochs: Vec<EpochLoss>,
    /// Mean MMD over held-out slices; entry 0 is before any training.
    pub heldout_mmd: Vec<f64>,
    pub train_slices: usize,
    pub heldout_slices: usize,
    /// Set when a non-finite loss stopped training; the model then holds
    /// the last finite parameters.
    pub diverged_at: Option<usize>,
    pub seconds: f64,
}

pub struct EncoderOutput {
    pub model: EncoderModel,
    pub distilled: DistilledMatrix,
    pub report: EncoderReport,
}

struct SliceData {
    sets: Arc<Vec<Vec<u32>>>,
}

fn heldout_mmd(model: &EncoderModel, slices: &[SliceData], eval_seed: u64) -> Result<f64> {
    if slices.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for (i, s) in slices.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(eval_seed ^ i as u64);
        let mut g = Eager;
        let hidden = model.element_hidden(&mut g);
        let s_o = model.encode_sets(&mut g, &hidden, &s.sets);
        let s_c0 = init_distilled(&s_o, model.hyper.r, &mut rng);
        let s_c = model.distill(&mut g, &s_o, &s_c0)?;
        let sub = index::sample(&mut rng, s_o.rows(), model.hyper.mmd_sample.min(s_o.rows())).into_vec();
        total += mmd_loss(&s_o.select_rows(&sub), &s_c)?;
    }
    Ok(total / slices.len() as f64)
}

/// One optimisation step on a slice; returns `(ce, mmd, l2)`.
fn train_step<R: Rng + ?Sized>(model: &mut EncoderModel, data: &SliceData, m: usize, rng: &mut R) -> Result<(f64, f64, f64)> {
    let hyper = model.hyper.clone();
    let mut tape = Tape::new();
    let hidden = model.element_hidden(&mut tape);
    let s_o = model.encode_sets(&mut tape, &hidden, &data.sets);
    let rows = data.sets.len();
    let s_c0 = tape.gather_rows(&s_o, &init_indices(rows, hyper.r, rng));
    let s_c = model.distill(&mut tape, &s_o, &s_c0)?;

    let cand = Arc::new(sample_candidates(&data.sets, m, hyper.n_neg, rng));
    let ce = ce_graph(&mut tape, &s_o, model.table.embeddings(), &cand);

    let sub = index::sample(rng, rows, hyper.mmd_sample.min(rows)).into_vec();
    let s_ob = tape.gather_rows(&s_o, &sub);
    let sigma = median_bandwidth(tape.value(&s_ob), tape.value(&s_c));
    let mmd = mmd_graph(&mut tape, &s_ob, &s_c, sigma);

    let mut loss = tape.add(&ce, &mmd);
    let mut l2 = 0.0;
    if hyper.lambda > 0.0 {
        let ids: Vec<ParamId> = model.params.ids().collect();
        for id in ids {
            let p = tape.param(&model.params, id);
            let sq = tape.sum_squares(&p);
            let sq = tape.scale(&sq, hyper.lambda);
            l2 += tape.value(&sq).item();
            loss = tape.add(&loss, &sq);
        }
    }
    let (ce_v, mmd_v) = (tape.value(&ce).item(), tape.value(&mmd).item());
    if !tape.value(&loss).item().is_finite() {
        return Err(Error::Diverged {
            epoch: 0,
            detail: format!("loss is not finite (ce={ce_v}, mmd={mmd_v})"),
        });
    }
    tape.backward(loss, &mut model.params);
    adam_step(&mut model.params, &AdamConfig::with_lr(hyper.lr))?;
    Ok((ce_v, mmd_v, l2))
}

/// Train the aggregator and distiller on the leading slices, then distil
/// every slice with the trained model.
pub fn train_encoder(corpus: &Corpus, hyper: &EncoderHyper, seed: u64) -> Result<EncoderOutput> {
    let started = std::time::Instant::now();
    let mut model = EncoderModel::new(corpus.m(), hyper.clone(), seed)?;
    let slices = corpus::slice(corpus, hyper.b_d);
    let n_train = ((slices.len() as f64 * hyper.train_fraction).round() as usize).clamp(1.min(slices.len()), slices.len());
    let to_data = |s: &CorpusSlice| SliceData {
        sets: Arc::new(slice_sets(corpus, s)),
    };
    let train: Vec<SliceData> = slices[..n_train].iter().map(to_data).filter(|d| !d.sets.is_empty()).collect();
    let mut heldout: Vec<SliceData> = slices[n_train..].iter().map(to_data).filter(|d| !d.sets.is_empty()).collect();
    let heldout_slices = heldout.len();
    if heldout.is_empty() && !train.is_empty() {
        // Too few slices for a split; monitor the last training slice.
        heldout.push(SliceData {
            sets: Arc::clone(&train[train.len() - 1].sets),
        });
    }
    let eval_seed = seed ^ 0xe7a1;
    let mut report = EncoderReport {
        train_slices: train.len(),
        heldout_slices,
        heldout_mmd: vec![heldout_mmd(&model, &heldout, eval_seed)?],
        ..EncoderReport::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut last_good = model.params.clone();
    'epochs: for epoch in 1..=hyper.epochs {
        let mut acc = EpochLoss {
            epoch,
            ..EpochLoss::default()
        };
        for data in &train {
            match train_step(&mut model, data, corpus.m(), &mut rng) {
                Ok((ce, mmd, l2)) => {
                    acc.ce += ce;
                    acc.mmd += mmd;
                    acc.l2 += l2;
                }
                Err(Error::Diverged { detail, .. }) | Err(Error::NonFiniteGradient(detail)) => {
                    warn!("encoder diverged at epoch {epoch}: {detail}; keeping last finite parameters");
                    model.params = last_good;
                    report.diverged_at = Some(epoch);
                    break 'epochs;
                }
                Err(e) => return Err(e),
            }
        }
        let k = train.len().max(1) as f64;
        acc.ce /= k;
        acc.mmd /= k;
        acc.l2 /= k;
        acc.total = acc.ce + acc.mmd + acc.l2;
        let h = heldout_mmd(&model, &heldout, eval_seed)?;
        info!(
            "encoder epoch {epoch}: ce={:.4} mmd={:.5} l2={:.5} heldout_mmd={h:.5}",
            acc.ce, acc.mmd, acc.l2
        );
        report.epochs.push(acc);
        report.heldout_mmd.push(h);
        last_good = model.params.clone();
    }
    let distilled = model.distill_all(corpus, &slices)?;
    report.seconds = started.elapsed().as_secs_f64();
    Ok(EncoderOutput {
        model,
        distilled,
        report,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::hashtag_example;

    fn small_hyper() -> EncoderHyper {
        EncoderHyper {
            d: 8,
            heads: 2,
            b_d: 3,
            r: 0.5,
            n_distill: 3,
            epochs: 0,
            n_neg: 3,
            ..EncoderHyper::default()
        }
    }

    #[test]
    fn distilled_row_counts() {
        assert_eq!(distilled_rows(10_000, 0.001), 10);
        assert_eq!(distilled_rows(7, 0.3), 3);
        assert_eq!(distilled_rows(5, 0.001), 1);
        assert_eq!(distilled_rows(0, 0.5), 0);
        assert_eq!(distilled_rows(9, 1.0), 9);
    }

    #[test]
    fn midpoint_of_orthogonal_embeddings() {
        let mut model = EncoderModel::new(2, EncoderHyper { d: 2, heads: 1, ..small_hyper() }, 0).unwrap();
        model.set_table(ElementTable::from_tensor(Tensor::identity(2), 0)).unwrap();
        model.set_aggregator_identity();
        let e = model.embed_set(&[0, 1]).unwrap();
        assert_eq!(e.data(), &[0.5, 0.5]);
        assert_eq!(model.embed_set(&[1]).unwrap().data(), &[0.0, 1.0]);
    }

    #[test]
    fn encode_slice_rows_match_embed_set() {
        let corpus = hashtag_example();
        let model = EncoderModel::new(corpus.m(), small_hyper(), 4).unwrap();
        let slice = &corpus::slice(&corpus, 3)[1];
        let block = encode_slice(&model, &corpus, slice);
        assert_eq!(block.shape(), (3, 8));
        for (row, pos) in slice.range.clone().enumerate() {
            let direct = model.embed_set(corpus.record(pos).elements()).unwrap();
            assert_eq!(block.row(row), direct.data());
        }
    }

    #[test]
    fn zero_epochs_is_plain_distillation() {
        let corpus = hashtag_example();
        let out = train_encoder(&corpus, &small_hyper(), 9).unwrap();
        let fresh = EncoderModel::new(corpus.m(), small_hyper(), 9).unwrap();
        let again = fresh.distill_all(&corpus, &corpus::slice(&corpus, 3)).unwrap();
        assert_eq!(out.distilled, again);
        // slices of 3, 3 and 1 records at r = 0.5
        assert_eq!(out.distilled.total_rows(), 2 + 2 + 1);
    }

    #[test]
    fn ce_is_non_negative() {
        let corpus = hashtag_example();
        let model = EncoderModel::new(corpus.m(), small_hyper(), 1).unwrap();
        let slice = CorpusSlice {
            slice_id: 0,
            range: 0..7,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            assert!(ce_loss(&model, &corpus, &slice, 10, &mut rng).unwrap() >= 0.0);
        }
    }

    #[test]
    fn mmd_identity_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = Tensor::randn(6, 4, 1.0, &mut rng);
        assert_eq!(mmd_loss(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn checkpoint_round_trip() {
        let corpus = hashtag_example();
        let mut hyper = small_hyper();
        hyper.epochs = 2;
        let out = train_encoder(&corpus, &hyper, 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        out.model.save(dir.path()).unwrap();
        out.distilled.save(&dir.path().join("sc.ace")).unwrap();
        let model = EncoderModel::load(dir.path()).unwrap();
        let sc = DistilledMatrix::load(&dir.path().join("sc.ace"), 8).unwrap();
        assert_eq!(sc, out.distilled);
        let again = model.distill_all(&corpus, &corpus::slice(&corpus, 3)).unwrap();
        assert_eq!(again, out.distilled);
    }
}
