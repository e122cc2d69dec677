use std::time::Duration;

use ace_core::analyzer::{AnalyzerHyper, AnalyzerModel};
use ace_core::corpus;
use ace_core::encoder::{EncoderHyper, EncoderModel};
use ace_core::harness::{synth_corpus, SynthSpec};
use ace_core::par::{self, Execution};
use ace_core::queries::{evaluate_exact, gen_workload, Operator, SetQuery};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const MODES: [(&str, Execution); 2] = [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)];

fn setup() -> (corpus::Corpus, Vec<SetQuery>) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let spec = SynthSpec {
        n: 20_000,
        m: 1_000,
        ..SynthSpec::default()
    };
    let c = synth_corpus(&spec, &mut rng).unwrap();
    let queries = gen_workload(&c, Operator::Overlap, 200, [3, 2, 2], &mut rng)
        .unwrap()
        .workload
        .entries
        .into_iter()
        .map(|e| e.labeled.query)
        .collect();
    (c, queries)
}

fn benches(cr: &mut Criterion) {
    let (c, queries) = setup();
    let hyper = EncoderHyper {
        d: 32,
        heads: 4,
        b_d: 2_000,
        r: 0.005,
        epochs: 0,
        ..EncoderHyper::default()
    };
    let enc = EncoderModel::new(c.m(), hyper, 0).unwrap();
    let slices = corpus::slice(&c, 2_000);
    let s_c = enc.distill_all(&c, &slices).unwrap().s_c();
    let freq = c.frequencies();
    let analyzer = AnalyzerModel::new(
        Operator::Overlap,
        AnalyzerHyper {
            d: 32,
            heads: 4,
            n_cross: 2,
            n_self: 2,
            ..AnalyzerHyper::default()
        },
        0,
    )
    .unwrap();

    let mut g = cr.benchmark_group("oracle_labeling");
    for (name, exec) in MODES {
        g.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| par::map_with(exec, &queries, |q| evaluate_exact(&c, q).unwrap()))
        });
    }
    g.finish();

    let mut g = cr.benchmark_group("distill_all");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| enc.distill_all_with(exec, &c, &slices).unwrap())
        });
    }
    g.finish();

    let mut g = cr.benchmark_group("predict_batch");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| analyzer.predict_batch(exec, &s_c, &queries, &freq, enc.table()).unwrap())
        });
    }
    g.finish();
}

criterion_group! {
    name = parallel;
    config = Criterion::default().measurement_time(Duration::from_secs(3)).warm_up_time(Duration::from_secs(1));
    targets = benches
}
criterion_main!(parallel);
