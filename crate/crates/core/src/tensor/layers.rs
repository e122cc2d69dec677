//! Attention building blocks shared by the encoder and the analyzer.

use rand::Rng;

use super::kernels::Block;
use super::{Graph, ParamId, ParamSet, Tensor};
use crate::error::{Error, Result};

fn dim_err(op: &'static str, detail: String) -> Error {
    Error::Dimension { op, detail }
}

/// Single-head scaled dot-product attention `softmax(Q Kᵀ / √d_k) V`.
pub fn att<G: Graph>(g: &mut G, q: &G::V, k: &G::V, v: &G::V) -> Result<G::V> {
    let (qs, ks, vs) = (g.value(q).shape(), g.value(k).shape(), g.value(v).shape());
    if qs.1 == 0 || qs.1 != ks.1 {
        return Err(dim_err("att", format!("query width {} vs key width {}", qs.1, ks.1)));
    }
    if ks.0 != vs.0 || ks.0 == 0 {
        return Err(dim_err("att", format!("{} keys vs {} values", ks.0, vs.0)));
    }
    Ok(g.attention(q, k, v, 1, &[(0..qs.0, 0..ks.0)]))
}

/// Projection weights for multi-head attention. Head `i` owns the `i`-th
/// column slice of each projection.
#[derive(Clone, Debug)]
pub struct MultiHead {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub heads: usize,
    pub width: usize,
}

impl MultiHead {
    /// `q_in`/`kv_in` are input widths, `width` the projected width (split
    /// across heads) and `out` the width after `W_o`.
    pub fn new<R: Rng + ?Sized>(
        ps: &mut ParamSet,
        prefix: &str,
        q_in: usize,
        kv_in: usize,
        width: usize,
        out: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || width % heads != 0 {
            return Err(Error::Config(format!("{heads} heads do not divide width {width}")));
        }
        Ok(Self {
            wq: ps.add_weight(format!("{prefix}.wq"), q_in, width, rng),
            wk: ps.add_weight(format!("{prefix}.wk"), kv_in, width, rng),
            wv: ps.add_weight(format!("{prefix}.wv"), kv_in, width, rng),
            wo: ps.add_weight(format!("{prefix}.wo"), width, out, rng),
            heads,
            width,
        })
    }

    /// Project the keys/values once so several forward calls can share them.
    pub fn project_kv<G: Graph>(&self, g: &mut G, ps: &ParamSet, kv: &G::V) -> Result<(G::V, G::V)> {
        let wk = g.param(ps, self.wk);
        let wv = g.param(ps, self.wv);
        let (kin, w) = (g.value(kv).cols(), g.value(&wk).rows());
        if kin != w {
            return Err(dim_err("multi_head", format!("key input width {kin}, expected {w}")));
        }
        let k = g.matmul(kv, &wk);
        let v = g.matmul(kv, &wv);
        Ok((k, v))
    }

    pub fn forward_projected<G: Graph>(
        &self,
        g: &mut G,
        ps: &ParamSet,
        x: &G::V,
        k: &G::V,
        v: &G::V,
        blocks: &[Block],
    ) -> Result<G::V> {
        let wq = g.param(ps, self.wq);
        let (qin, w) = (g.value(x).cols(), g.value(&wq).rows());
        if qin != w {
            return Err(dim_err("multi_head", format!("query input width {qin}, expected {w}")));
        }
        let (xr, kr) = (g.value(x).rows(), g.value(k).rows());
        for (qr, kvr) in blocks {
            if qr.end > xr || kvr.end > kr || kvr.is_empty() {
                return Err(dim_err(
                    "multi_head",
                    format!("block {qr:?}x{kvr:?} out of range for {xr} queries and {kr} keys"),
                ));
            }
        }
        let q = g.matmul(x, &wq);
        let heads = g.attention(&q, k, v, self.heads, blocks);
        let wo = g.param(ps, self.wo);
        Ok(g.matmul(&heads, &wo))
    }

    /// `concat(head_1..head_h) W_o` with `head_i = att(x W_i^Q, kv W_i^K, kv W_i^V)`.
    pub fn forward<G: Graph>(
        &self,
        g: &mut G,
        ps: &ParamSet,
        x: &G::V,
        kv: &G::V,
        blocks: &[Block],
    ) -> Result<G::V> {
        let (k, v) = self.project_kv(g, ps, kv)?;
        self.forward_projected(g, ps, x, &k, &v, blocks)
    }
}

/// Multi-head attention with explicit projection tensors, used where the
/// weights are not part of a [`ParamSet`].
pub fn multi_head<G: Graph>(
    g: &mut G,
    q: &G::V,
    k: &G::V,
    v: &G::V,
    proj: [&G::V; 4],
    heads: usize,
) -> Result<G::V> {
    let [wq, wk, wv, wo] = proj;
    let width = g.value(wq).cols();
    if heads == 0 || width % heads != 0 {
        return Err(dim_err("multi_head", format!("{heads} heads for width {width}")));
    }
    for (x, w) in [(q, wq), (k, wk), (v, wv)] {
        if g.value(x).cols() != g.value(w).rows() {
            return Err(dim_err(
                "multi_head",
                format!("input width {} vs projection {:?}", g.value(x).cols(), g.value(w).shape()),
            ));
        }
    }
    if g.value(wk).cols() != width || g.value(wv).cols() != g.value(wo).rows() {
        return Err(dim_err("multi_head", "projection widths disagree".into()));
    }
    let (m, n) = (g.value(q).rows(), g.value(k).rows());
    if n == 0 || n != g.value(v).rows() {
        return Err(dim_err("multi_head", format!("{n} keys vs {} values", g.value(v).rows())));
    }
    let qp = g.matmul(q, wq);
    let kp = g.matmul(k, wk);
    let vp = g.matmul(v, wv);
    let h = g.attention(&qp, &kp, &vp, heads, &[(0..m, 0..n)]);
    Ok(g.matmul(&h, wo))
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(ps: &mut ParamSet, prefix: &str, width: usize) -> Self {
        Self {
            gain: ps.add_const(format!("{prefix}.gain"), 1, width, 1.0),
            bias: ps.add_const(format!("{prefix}.bias"), 1, width, 0.0),
        }
    }

    pub fn forward<G: Graph>(&self, g: &mut G, ps: &ParamSet, x: &G::V) -> G::V {
        let gain = g.param(ps, self.gain);
        let bias = g.param(ps, self.bias);
        g.layer_norm(x, &gain, &bias)
    }
}

/// Gated feed-forward network `(GELU(X W_a) ⊙ X W_b) W_c`.
#[derive(Clone, Debug)]
pub struct GeGlu {
    pub wa: ParamId,
    pub wb: ParamId,
    pub wc: ParamId,
    pub hidden: usize,
}

impl GeGlu {
    pub fn new<R: Rng + ?Sized>(ps: &mut ParamSet, prefix: &str, width: usize, hidden: usize, rng: &mut R) -> Self {
        Self {
            wa: ps.add_weight(format!("{prefix}.wa"), width, hidden, rng),
            wb: ps.add_weight(format!("{prefix}.wb"), width, hidden, rng),
            wc: ps.add_weight(format!("{prefix}.wc"), hidden, width, rng),
            hidden,
        }
    }

    pub fn forward<G: Graph>(&self, g: &mut G, ps: &ParamSet, x: &G::V) -> G::V {
        let wa = g.param(ps, self.wa);
        let wb = g.param(ps, self.wb);
        let wc = g.param(ps, self.wc);
        ffn_geglu(g, x, &wa, &wb, &wc)
    }
}

pub fn ffn_geglu<G: Graph>(g: &mut G, x: &G::V, wa: &G::V, wb: &G::V, wc: &G::V) -> G::V {
    let a = g.matmul(x, wa);
    let a = g.gelu(&a);
    let b = g.matmul(x, wb);
    let h = g.mul(&a, &b);
    g.matmul(&h, wc)
}

/// `X̃ = LN(X + MH(X, KV)); out = LN(X̃ + FFN(X̃))`.
#[derive(Clone, Debug)]
pub struct AttnBlock {
    pub attn: MultiHead,
    pub ln1: LayerNorm,
    pub ffn: GeGlu,
    pub ln2: LayerNorm,
}

impl AttnBlock {
    pub fn new<R: Rng + ?Sized>(ps: &mut ParamSet, prefix: &str, d: usize, heads: usize, rng: &mut R) -> Result<Self> {
        Ok(Self {
            attn: MultiHead::new(ps, &format!("{prefix}.attn"), d, d, d, d, heads, rng)?,
            ln1: LayerNorm::new(ps, &format!("{prefix}.ln1"), d),
            ffn: GeGlu::new(ps, &format!("{prefix}.ffn"), d, 2 * d, rng),
            ln2: LayerNorm::new(ps, &format!("{prefix}.ln2"), d),
        })
    }

    pub fn forward<G: Graph>(
        &self,
        g: &mut G,
        ps: &ParamSet,
        x: &G::V,
        kv: &G::V,
        blocks: &[Block],
    ) -> Result<G::V> {
        let (k, v) = self.attn.project_kv(g, ps, kv)?;
        self.forward_projected(g, ps, x, &k, &v, blocks)
    }

    pub fn forward_projected<G: Graph>(
        &self,
        g: &mut G,
        ps: &ParamSet,
        x: &G::V,
        k: &G::V,
        v: &G::V,
        blocks: &[Block],
    ) -> Result<G::V> {
        let a = self.attn.forward_projected(g, ps, x, k, v, blocks)?;
        let r = g.add(x, &a);
        let xt = self.ln1.forward(g, ps, &r);
        let f = self.ffn.forward(g, ps, &xt);
        let r = g.add(&xt, &f);
        Ok(self.ln2.forward(g, ps, &r))
    }
}

/// Tensor helper for tests and callers that just want a value.
pub fn att_eager(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<Tensor> {
    let mut g = super::Eager;
    att(&mut g, q, k, v)
}
