//! Reference estimators: the exact oracle, an attribute-independence model
//! and uniform sampling.

use rand::seq::index;
use rand::Rng;

use crate::corpus::{Corpus, ElementId, FrequencyTable};
use crate::error::{Error, Result};
use crate::queries::{clamp_estimate, evaluate_exact, matches, Operator, SetQuery};

/// Shared interface used by the benchmark harness.
pub trait Estimator: Sync {
    fn name(&self) -> &str;

    /// Raw estimate; the harness clamps to `[1, N]` before scoring.
    fn estimate(&self, q: &SetQuery) -> Result<f64>;

    /// Bytes of state consulted at estimation time.
    fn size_bytes(&self) -> usize;
}

/// Exact answers; every Q-error is 1.
pub struct Oracle<'a> {
    corpus: &'a Corpus,
}

impl<'a> Oracle<'a> {
    pub fn new(corpus: &'a Corpus) -> Self {
        Self { corpus }
    }
}

impl Estimator for Oracle<'_> {
    fn name(&self) -> &str {
        "oracle"
    }

    fn estimate(&self, q: &SetQuery) -> Result<f64> {
        Ok(evaluate_exact(self.corpus, q)? as f64)
    }

    fn size_bytes(&self) -> usize {
        self.corpus.live_records().map(|(_, r)| r.len() * 4 + 8).sum()
    }
}

/// Per-element selectivities treated as independent binary attributes.
#[derive(Clone, Debug)]
pub struct IndependenceStats {
    freq: FrequencyTable,
}

impl IndependenceStats {
    pub fn new(freq: FrequencyTable) -> Self {
        Self { freq }
    }

    pub fn from_corpus(corpus: &Corpus) -> Self {
        Self::new(corpus.frequencies())
    }

    pub fn n(&self) -> usize {
        self.freq.n
    }

    pub fn selectivity(&self, e: ElementId) -> Result<f64> {
        let c = self.freq.count(e)?;
        Ok(if self.freq.n == 0 { 0.0 } else { c as f64 / self.freq.n as f64 })
    }

    /// Unclamped estimate:
    /// overlap `min(N, Σ freq)`, superset `N Π f_e`, subset `N Π_{e ∉ L} (1 − f_e)`.
    pub fn independence_estimate(&self, q: &SetQuery) -> Result<f64> {
        q.validate(self.freq.counts.len())?;
        let n = self.freq.n as f64;
        let lit = q.literal();
        Ok(match q.op {
            Operator::Overlap => {
                let total: u64 = lit.iter().map(|&e| self.freq.counts[e as usize]).sum();
                (total as f64).min(n)
            }
            Operator::Superset => lit.iter().try_fold(n, |acc, &e| Ok::<_, Error>(acc * self.selectivity(e)?))?,
            Operator::Subset => {
                let mut acc = n;
                for e in 0..self.freq.counts.len() as ElementId {
                    if lit.binary_search(&e).is_err() {
                        acc *= 1.0 - self.selectivity(e)?;
                    }
                }
                acc
            }
        })
    }
}

impl Estimator for IndependenceStats {
    fn name(&self) -> &str {
        "independence"
    }

    fn estimate(&self, q: &SetQuery) -> Result<f64> {
        self.independence_estimate(q)
    }

    fn size_bytes(&self) -> usize {
        self.freq.counts.len() * std::mem::size_of::<u64>()
    }
}

/// Uniform sample of records without replacement.
#[derive(Clone, Debug)]
pub struct SampleSketch {
    sample: Vec<Vec<ElementId>>,
    rho: f64,
    n: usize,
    m: usize,
}

impl SampleSketch {
    /// Keep `round(rho * N)` live records.
    pub fn build<R: Rng + ?Sized>(corpus: &Corpus, rho: f64, rng: &mut R) -> Result<Self> {
        if !(rho > 0.0 && rho <= 1.0) {
            return Err(Error::Config(format!("sample ratio {rho} must lie in (0, 1]")));
        }
        let live: Vec<&[ElementId]> = corpus.live_records().map(|(_, r)| r.elements()).collect();
        let k = ((rho * live.len() as f64).round() as usize).min(live.len());
        let sample = index::sample(rng, live.len(), k)
            .into_iter()
            .map(|i| live[i].to_vec())
            .collect();
        Ok(Self {
            sample,
            rho,
            n: live.len(),
            m: corpus.m(),
        })
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }

    pub fn len(&self) -> usize {
        self.sample.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sample.is_empty()
    }

    /// Matching sample records scaled by `N / |sample|`, unclamped.
    pub fn sampling_estimate(&self, q: &SetQuery) -> Result<f64> {
        q.validate(self.m)?;
        if self.sample.is_empty() {
            return Ok(0.0);
        }
        let hits = self.sample.iter().filter(|r| matches(r, q)).count();
        Ok(hits as f64 * self.n as f64 / self.sample.len() as f64)
    }
}

impl Estimator for SampleSketch {
    fn name(&self) -> &str {
        "sampling"
    }

    fn estimate(&self, q: &SetQuery) -> Result<f64> {
        self.sampling_estimate(q)
    }

    fn size_bytes(&self) -> usize {
        self.sample.iter().map(|r| r.len() * 4 + 8).sum()
    }
}

/// Estimate clamped to `[1, N]`.
pub fn clamped<E: Estimator + ?Sized>(est: &E, q: &SetQuery, n: usize) -> Result<f64> {
    Ok(clamp_estimate(est.estimate(q)?, n))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::hashtag_example;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn q(c: &Corpus, op: Operator, names: &[&str]) -> SetQuery {
        SetQuery::new(op, c.resolve(names).unwrap()).unwrap()
    }

    #[test]
    fn hashtag_independence() {
        let c = hashtag_example();
        let s = IndependenceStats::from_corpus(&c);
        assert_eq!(s.estimate(&q(&c, Operator::Overlap, &["Harris", "Trump"])).unwrap(), 6.0);
        assert!((s.estimate(&q(&c, Operator::Superset, &["Trump"])).unwrap() - 4.0).abs() < 1e-12);
        let all: Vec<&str> = c.universe().names().iter().map(String::as_str).collect();
        assert_eq!(s.estimate(&q(&c, Operator::Subset, &all)).unwrap(), 7.0);
    }

    #[test]
    fn full_sample_is_exact() {
        let c = hashtag_example();
        let sk = SampleSketch::build(&c, 1.0, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        for op in Operator::ALL {
            let query = q(&c, op, &["Harris", "Trump", "shot"]);
            assert_eq!(sk.estimate(&query).unwrap(), evaluate_exact(&c, &query).unwrap() as f64);
        }
    }

    #[test]
    fn empty_hits_clamp_to_one() {
        let c = hashtag_example();
        let sk = SampleSketch::build(&c, 0.15, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(sk.len(), 1);
        let query = q(&c, Operator::Superset, &["Harris", "Trump", "shot", "Biden"]);
        assert_eq!(clamped(&sk, &query, c.n()).unwrap(), 1.0);
    }
}
