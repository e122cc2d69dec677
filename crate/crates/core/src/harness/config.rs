use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::synth::SynthSpec;
use crate::analyzer::AnalyzerHyper;
use crate::encoder::EncoderHyper;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorkloadConfig {
    pub n_train: usize,
    pub n_test: usize,
    pub ratios: [usize; 3],
}

impl Default for WorkloadConfig {
    fn default() -> Self {
        Self {
            n_train: 1400,
            n_test: 300,
            ratios: [3, 2, 2],
        }
    }
}

/// Everything the CLI can be configured with. Values come from built-in
/// defaults, then an optional TOML/JSON file, then command-line flags.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Config {
    pub seed: u64,
    pub encoder: EncoderHyper,
    pub analyzer: AnalyzerHyper,
    pub workload: WorkloadConfig,
    pub synth: SynthSpec,
    pub sample_ratio: f64,
    pub fine_tune_epochs: usize,
}

impl Config {
    pub fn defaults() -> Self {
        Self {
            sample_ratio: 0.01,
            fine_tune_epochs: 5,
            ..Self::default()
        }
    }

    /// Parse by extension: `.json` as JSON, anything else as TOML. Missing
    /// keys keep their defaults.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let is_json = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"));
        let mut value: serde_json::Value = if is_json {
            serde_json::from_str(&text)?
        } else {
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        };
        let mut base = serde_json::to_value(Self::defaults())?;
        merge(&mut base, value.take());
        Ok(serde_json::from_value(base)?)
    }
}

fn merge(base: &mut serde_json::Value, over: serde_json::Value) {
    match (base, over) {
        (serde_json::Value::Object(b), serde_json::Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    #[test]
    fn defaults_match_reference_hyperparameters() {
        let c = Config::defaults();
        assert_eq!((c.encoder.d, c.encoder.b_d, c.encoder.r, c.encoder.n_distill), (64, 10_000, 0.001, 4));
        assert_eq!((c.encoder.heads, c.encoder.n_neg, c.encoder.lr), (8, 10, 0.001));
        assert_eq!((c.analyzer.n_cross, c.analyzer.n_self, c.analyzer.b_q), (4, 8, 100));
        assert_eq!(c.sample_ratio, 0.01);
    }

    #[test]
    fn file_overrides_defaults_partially() {
        let mut f = tempfile::Builder::new().suffix(".toml").tempfile().unwrap();
        writeln!(f, "seed = 9\n[analyzer]\nn_self = 2").unwrap();
        let c = Config::from_file(f.path()).unwrap();
        assert_eq!(c.seed, 9);
        assert_eq!(c.analyzer.n_self, 2);
        assert_eq!(c.analyzer.n_cross, 4);
        assert_eq!(c.sample_ratio, 0.01);

        let mut j = tempfile::Builder::new().suffix(".json").tempfile().unwrap();
        write!(j, r#"{{"encoder": {{"d": 32}}}}"#).unwrap();
        let c = Config::from_file(j.path()).unwrap();
        assert_eq!((c.encoder.d, c.encoder.heads), (32, 8));
    }
}
