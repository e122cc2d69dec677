use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use ace_core::analyzer::{fine_tune, train_analyzer, AceEstimator, AnalyzerModel, TrainContext};
use ace_core::baselines::{IndependenceStats, SampleSketch};
use ace_core::corpus::{ingest_jsonl, Corpus};
use ace_core::dynamic::{apply, read_updates};
use ace_core::encoder::{train_encoder, DistilledMatrix, EncoderModel};
use ace_core::harness::{bench, synth_corpus, Config, Entrant};
use ace_core::queries::{gen_workload, qerror, read_workload, relabel, write_workload, Operator, SetQuery, Workload};
use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::{info, warn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Attention-based cardinality estimation for set-valued queries.
#[derive(Parser)]
#[command(name = "ace", version)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Seed for every random choice; overrides the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// TOML or JSON configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Directory holding the corpus, models and reports.
    #[arg(long, global = true, default_value = "ace-out")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Load a JSONL dataset of `{"id", "elements"}` records.
    Ingest {
        #[arg(long)]
        input: PathBuf,
    },
    /// Generate a synthetic Zipf corpus with planted co-occurrences.
    Synth {
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        m: Option<usize>,
        #[arg(long)]
        zipf: Option<f64>,
        #[arg(long)]
        pairs: Option<usize>,
    },
    /// Generate a labeled workload.
    GenWorkload {
        /// Queries per operator.
        #[arg(long)]
        n: Option<usize>,
        /// Regular:high:low mix, e.g. 3:2:2.
        #[arg(long, value_parser = parse_ratios)]
        ratios: Option<[usize; 3]>,
        /// Restrict to one operator.
        #[arg(long, value_parser = parse_op)]
        op: Option<Operator>,
        /// File name inside the output directory.
        #[arg(long, default_value = "workload.jsonl")]
        name: String,
    },
    /// Train the aggregator and distiller and write the distilled matrix.
    TrainEncoder {
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Train one analyzer per operator present in the workload.
    TrainAnalyzer {
        #[arg(long)]
        workload: Option<PathBuf>,
        #[arg(long, value_parser = parse_op)]
        op: Option<Operator>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Estimate one query.
    Estimate {
        #[arg(long, value_parser = parse_op)]
        op: Operator,
        /// Comma-separated element names.
        #[arg(long, value_delimiter = ',', required = true)]
        elements: Vec<String>,
        /// True cardinality, to also report the Q-error.
        #[arg(long)]
        truth: Option<u64>,
    },
    /// Score ACE and the baselines on a workload.
    Bench {
        #[arg(long)]
        workload: Option<PathBuf>,
    },
    /// Apply a JSONL file of inserts and deletes.
    Update {
        #[arg(long)]
        file: PathBuf,
        /// Queries to fine-tune the analyzers on afterwards.
        #[arg(long)]
        workload: Option<PathBuf>,
    },
}

fn parse_op(s: &str) -> Result<Operator, String> {
    Operator::ALL
        .into_iter()
        .find(|op| op.as_str() == s)
        .ok_or_else(|| format!("unknown operator `{s}`; expected subset, superset or overlap"))
}

fn parse_ratios(s: &str) -> Result<[usize; 3], String> {
    let parts: Vec<&str> = s.split(':').collect();
    let nums: Vec<usize> = parts
        .iter()
        .map(|p| p.trim().parse::<usize>())
        .collect::<Result<_, _>>()
        .map_err(|e| format!("bad ratio `{s}`: {e}"))?;
    match nums.as_slice() {
        [a, b, c] if a + b + c > 0 => Ok([*a, *b, *c]),
        _ => Err(format!("ratio `{s}` must be three non-negative integers like 3:2:2")),
    }
}

/// Paths of the artifacts kept in the output directory.
struct Store {
    root: PathBuf,
}

impl Store {
    fn corpus(&self) -> PathBuf {
        self.root.join("corpus.json")
    }

    fn encoder_dir(&self) -> PathBuf {
        self.root.join("encoder")
    }

    fn distilled(&self) -> PathBuf {
        self.root.join("distilled.ace")
    }

    fn workload(&self) -> PathBuf {
        self.root.join("workload.jsonl")
    }

    fn load_corpus(&self) -> Result<Corpus> {
        let path = self.corpus();
        if !path.exists() {
            bail!("no corpus at {}; run `ace ingest` or `ace synth` first", path.display());
        }
        Corpus::load_snapshot(&path).with_context(|| format!("loading {}", path.display()))
    }

    fn load_encoder(&self) -> Result<(EncoderModel, DistilledMatrix)> {
        let dir = self.encoder_dir();
        if !dir.join("encoder.json").exists() {
            bail!("no trained encoder in {}; run `ace train-encoder` first", dir.display());
        }
        let model = EncoderModel::load(&dir)?;
        let distilled = DistilledMatrix::load(&self.distilled(), model.hyper().d)?;
        Ok((model, distilled))
    }

    fn analyzer_ops(&self) -> Vec<Operator> {
        Operator::ALL
            .into_iter()
            .filter(|op| self.root.join(format!("analyzer-{op}.json")).exists())
            .collect()
    }
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n").with_context(|| format!("writing {}", path.display()))
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.global.config {
        Some(p) => Config::from_file(p).with_context(|| format!("reading config {}", p.display()))?,
        None => Config::defaults(),
    };
    if let Some(seed) = cli.global.seed {
        cfg.seed = seed;
    }
    let store = Store {
        root: cli.global.out.clone(),
    };
    fs::create_dir_all(&store.root).with_context(|| format!("creating {}", store.root.display()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    match cli.command {
        Command::Ingest { input } => {
            let (corpus, stats) = ingest_jsonl(&input).with_context(|| format!("ingesting {}", input.display()))?;
            corpus.save_snapshot(&store.corpus())?;
            println!(
                "{}",
                serde_json::json!({"n": corpus.n(), "m": corpus.m(), "lines": stats.lines, "rejected_empty": stats.rejected_empty})
            );
        }
        Command::Synth { n, m, zipf, pairs } => {
            let mut spec = cfg.synth.clone();
            spec.n = n.unwrap_or(spec.n);
            spec.m = m.unwrap_or(spec.m);
            spec.zipf = zipf.unwrap_or(spec.zipf);
            spec.pairs = pairs.unwrap_or(spec.pairs);
            let corpus = synth_corpus(&spec, &mut rng)?;
            corpus.save_snapshot(&store.corpus())?;
            println!("{}", serde_json::json!({"n": corpus.n(), "m": corpus.m()}));
        }
        Command::GenWorkload { n, ratios, op, name } => {
            let corpus = store.load_corpus()?;
            let n = n.unwrap_or(cfg.workload.n_train);
            let ratios = ratios.unwrap_or(cfg.workload.ratios);
            let ops = op.map_or(Operator::ALL.to_vec(), |o| vec![o]);
            let mut workload = Workload::default();
            for op in ops {
                let g = gen_workload(&corpus, op, n, ratios, &mut rng)?;
                for w in &g.warnings {
                    warn!("{w}");
                }
                workload.extend(g.workload);
            }
            let path = store.root.join(name);
            write_workload(&path, &workload, &corpus)?;
            println!("{}", serde_json::json!({"queries": workload.len(), "path": path}));
        }
        Command::TrainEncoder { epochs } => {
            let corpus = store.load_corpus()?;
            let mut hyper = cfg.encoder.clone();
            hyper.epochs = epochs.unwrap_or(hyper.epochs);
            let out = train_encoder(&corpus, &hyper, cfg.seed)?;
            out.model.save(&store.encoder_dir())?;
            out.distilled.save(&store.distilled())?;
            write_json(&store.root.join("encoder-report.json"), &out.report)?;
            if let Some(epoch) = out.report.diverged_at {
                bail!(
                    "encoder training diverged at epoch {epoch}; the last finite parameters were saved to {}",
                    store.encoder_dir().display()
                );
            }
            println!(
                "{}",
                serde_json::json!({"distilled_rows": out.distilled.total_rows(), "heldout_mmd": out.report.heldout_mmd})
            );
        }
        Command::TrainAnalyzer { workload, op, epochs } => {
            let corpus = store.load_corpus()?;
            let (encoder, distilled) = store.load_encoder()?;
            let path = workload.unwrap_or_else(|| store.workload());
            let wl = read_workload(&path, &corpus).with_context(|| format!("reading {}", path.display()))?;
            let mut hyper = cfg.analyzer.clone();
            hyper.epochs = epochs.unwrap_or(hyper.epochs);
            hyper.d = encoder.hyper().d;
            let (s_c, freq) = (distilled.s_c(), corpus.frequencies());
            let ctx = TrainContext {
                s_c: &s_c,
                freq: &freq,
                table: encoder.table(),
            };
            let ops = op.map_or_else(|| wl.operators(), |o| vec![o]);
            if ops.is_empty() {
                bail!("workload {} is empty", path.display());
            }
            let mut reports = Vec::new();
            for op in ops {
                info!("training {op} analyzer");
                let (model, report) = train_analyzer(op, &wl, &ctx, &hyper, cfg.seed)?;
                model.save(&store.root, cfg.seed)?;
                reports.push(report);
            }
            write_json(&store.root.join("analyzer-report.json"), &reports)?;
        }
        Command::Estimate { op, elements, truth } => {
            let ace = load_ace(&store)?;
            let corpus = store.load_corpus()?;
            let query = SetQuery::new(op, corpus.resolve(&elements)?)?;
            let est = ace.predict(&query)?;
            let mut out = serde_json::json!({"op": op.as_str(), "estimate": est});
            if let Some(t) = truth {
                out["qerror"] = serde_json::json!(qerror(est, t as f64)?);
            }
            println!("{out}");
        }
        Command::Bench { workload } => {
            let ace = load_ace(&store)?;
            let corpus = store.load_corpus()?;
            let path = workload.unwrap_or_else(|| store.workload());
            let wl = read_workload(&path, &corpus).with_context(|| format!("reading {}", path.display()))?;
            let t = Instant::now();
            let indep = IndependenceStats::from_corpus(&corpus);
            let indep_secs = t.elapsed().as_secs_f64();
            let t = Instant::now();
            let sample = SampleSketch::build(&corpus, cfg.sample_ratio, &mut rng)?;
            let sample_secs = t.elapsed().as_secs_f64();
            let entrants = [
                Entrant {
                    estimator: &ace,
                    build_seconds: 0.0,
                },
                Entrant {
                    estimator: &indep,
                    build_seconds: indep_secs,
                },
                Entrant {
                    estimator: &sample,
                    build_seconds: sample_secs,
                },
            ];
            let report = bench(&entrants, &wl, corpus.n());
            report.write(&store.root.join("report"))?;
            for e in &report.estimators {
                if let Some(all) = e.class("all") {
                    println!(
                        "{:<13} mean={:.3} p50={:.3} p95={:.3} p99={:.3} failures={} latency_ms={:.4}",
                        e.estimator, all.mean, all.p50, all.p95, all.p99, all.failures, e.avg_latency_ms
                    );
                }
            }
        }
        Command::Update { file, workload } => {
            let mut corpus = store.load_corpus()?;
            let (encoder, mut distilled) = store.load_encoder()?;
            let (batch, rejected) = read_updates(&file, &corpus)?;
            for (id, why) in &rejected {
                warn!("update for record {id} rejected: {why}");
            }
            let outcome = apply(&mut corpus, &encoder, &mut distilled, batch)?;
            corpus.save_snapshot(&store.corpus())?;
            distilled.save(&store.distilled())?;
            if let Some(path) = workload {
                let wl = read_workload(&path, &corpus).with_context(|| format!("reading {}", path.display()))?;
                let wl = relabel(&corpus, &wl)?;
                let (s_c, freq) = (distilled.s_c(), corpus.frequencies());
                let ctx = TrainContext {
                    s_c: &s_c,
                    freq: &freq,
                    table: encoder.table(),
                };
                for op in store.analyzer_ops() {
                    if wl.for_operator(op).is_empty() {
                        continue;
                    }
                    let mut model = AnalyzerModel::load(&store.root, op)?;
                    fine_tune(&mut model, &wl, &ctx, cfg.fine_tune_epochs, cfg.seed)?;
                    model.save(&store.root, cfg.seed)?;
                }
            }
            println!(
                "{}",
                serde_json::json!({
                    "inserted": outcome.inserted,
                    "deleted": outcome.deleted,
                    "rejected": rejected.len() + outcome.rejected.len(),
                    "unknown_ids": outcome.unknown_ids,
                    "touched_slices": outcome.touched_slices,
                })
            );
        }
    }
    Ok(())
}

fn load_ace(store: &Store) -> Result<AceEstimator> {
    let ops = store.analyzer_ops();
    if ops.is_empty() {
        return Err(anyhow!(
            "no trained analyzer in {}; run `ace train-encoder` then `ace train-analyzer` first",
            store.root.display()
        ));
    }
    let corpus = store.load_corpus()?;
    let (encoder, distilled) = store.load_encoder()?;
    let mut ace = AceEstimator::new(distilled.s_c(), corpus.frequencies(), encoder.table().clone());
    for op in ops {
        ace.insert(AnalyzerModel::load(&store.root, op)?);
    }
    Ok(ace)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
