use rand::Rng;
use rand_distr::{Distribution, Poisson, Zipf};
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, ElementId, ElementUniverse, SetRecord};
use crate::error::{Error, Result};

/// Parameters of a synthetic set-valued corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub n: usize,
    pub m: usize,
    /// Exponent of the Zipf law over element ranks; 0 is uniform.
    pub zipf: f64,
    /// Number of planted co-occurring element pairs.
    pub pairs: usize,
    /// Probability that a pair member pulls in its partner.
    pub pair_prob: f64,
    pub avg_size: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n: 50_000,
            m: 2_000,
            zipf: 1.1,
            pairs: 50,
            pair_prob: 0.9,
            avg_size: 5.0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.m == 0 {
            return bad("m must be at least 1".into());
        }
        if !(self.avg_size >= 1.0 && self.avg_size <= self.m as f64) {
            return bad(format!("avg_size {} must lie in [1, m={}]", self.avg_size, self.m));
        }
        if !(self.zipf >= 0.0 && self.zipf.is_finite()) {
            return bad(format!("zipf exponent {} must be non-negative", self.zipf));
        }
        if 2 * self.pairs > self.m {
            return bad(format!("{} disjoint pairs need at least {} elements", self.pairs, 2 * self.pairs));
        }
        if !(0.0..=1.0).contains(&self.pair_prob) {
            return bad(format!("pair_prob {} must lie in [0, 1]", self.pair_prob));
        }
        Ok(())
    }

    /// Planted pairs as element ids: pair `i` joins a head-half rank with a
    /// tail-half rank so correlated elements have very different marginals.
    pub fn planted_pairs(&self) -> Vec<(ElementId, ElementId)> {
        let half = self.m / 2;
        if self.pairs == 0 || half == 0 {
            return Vec::new();
        }
        let step_head = (half / self.pairs).max(1);
        let step_tail = ((self.m - half) / self.pairs).max(1);
        (0..self.pairs)
            .map(|i| ((i * step_head) as ElementId, (half + i * step_tail) as ElementId))
            .collect()
    }
}

/// Generate a corpus with Zipf element frequencies and planted
/// co-occurrences. Element `e{r}` has id `r`, so low ids are frequent.
pub fn synth_corpus<R: Rng + ?Sized>(spec: &SynthSpec, rng: &mut R) -> Result<Corpus> {
    spec.validate()?;
    let universe = ElementUniverse::from_names((0..spec.m).map(|r| format!("e{r}")));
    let mut corpus = Corpus::empty(universe);
    let zipf = Zipf::new(spec.m as f64, spec.zipf).map_err(|e| Error::Config(format!("zipf: {e}")))?;
    let extra = spec.avg_size - 1.0;
    let poisson = if extra > 0.0 {
        Some(Poisson::new(extra).map_err(|e| Error::Config(format!("poisson: {e}")))?)
    } else {
        None
    };
    let mut partner: Vec<Option<ElementId>> = vec![None; spec.m];
    for (a, b) in spec.planted_pairs() {
        partner[a as usize] = Some(b);
        partner[b as usize] = Some(a);
    }
    let mut present = vec![false; spec.m];
    for id in 0..spec.n {
        let size = 1 + poisson.as_ref().map_or(0, |p| p.sample(rng) as usize);
        let size = size.min(spec.m);
        let mut elems: Vec<ElementId> = Vec::with_capacity(size + 2);
        let mut attempts = 0;
        while elems.len() < size {
            attempts += 1;
            let e = if attempts > 64 * size {
                // Heavy skew with sizes near m: finish with uniform draws.
                rng.random_range(0..spec.m)
            } else {
                zipf.sample(rng) as usize - 1
            };
            if !present[e] {
                present[e] = true;
                elems.push(e as ElementId);
            }
        }
        let drawn = elems.len();
        for i in 0..drawn {
            if let Some(p) = partner[elems[i] as usize] {
                if !present[p as usize] && rng.random_bool(spec.pair_prob) {
                    present[p as usize] = true;
                    elems.push(p);
                }
            }
        }
        for &e in &elems {
            present[e as usize] = false;
        }
        let record = SetRecord::new(id as u64, elems).expect("at least one element");
        corpus.push(record)?;
    }
    Ok(corpus)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::queries::{evaluate_exact, Operator, SetQuery};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn honours_n_and_pairs() {
        let spec = SynthSpec {
            n: 3_000,
            m: 200,
            pairs: 5,
            pair_prob: 1.0,
            ..SynthSpec::default()
        };
        let c = synth_corpus(&spec, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        assert_eq!(c.n(), 3_000);
        for (a, b) in spec.planted_pairs() {
            let both = evaluate_exact(&c, &SetQuery::new(Operator::Overlap, vec![a, b]).unwrap()).unwrap();
            let one = evaluate_exact(&c, &SetQuery::new(Operator::Overlap, vec![a]).unwrap()).unwrap();
            assert_eq!(both, one);
        }
    }

    #[test]
    fn rejects_infeasible_specs() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for spec in [
            SynthSpec { m: 3, avg_size: 4.0, ..SynthSpec::default() },
            SynthSpec { m: 10, pairs: 6, ..SynthSpec::default() },
            SynthSpec { zipf: -1.0, ..SynthSpec::default() },
        ] {
            assert!(synth_corpus(&spec, &mut rng).is_err());
        }
    }
}
