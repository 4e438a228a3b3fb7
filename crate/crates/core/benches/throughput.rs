use std::collections::BTreeMap;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use layerprobe::data::{make_mlm_batch, MaskingConfig, Vocabulary};
use layerprobe::heads::FeatureSet;
use layerprobe::metrics::{probe_all_layers, ProbeRepresentation};
use layerprobe::nn::{DecoderHead, EncoderConfig, EncoderModel};
use layerprobe::overlap::InvertedIndex;
use layerprobe::Execution;
use ndarray::Array1;

const MODES: [(&str, Execution); 2] = [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)];

fn lines() -> Vec<String> {
    let words = ["the", "river", "city", "was", "born", "in", "paris", "rome", "near", "old", "bridge", "tree"];
    (0..256)
        .map(|i| (0..12).map(|j| words[(i * 7 + j * 5 + i / 3) % words.len()]).collect::<Vec<_>>().join(" "))
        .collect()
}

fn encode(c: &mut Criterion) {
    let lines = lines();
    let vocab = Vocabulary::from_corpus(lines.iter().map(String::as_str), 1);
    let model = EncoderModel::new(EncoderConfig::toy(vocab.len())).unwrap();
    let rows = make_mlm_batch(&lines[..64], &vocab, &MaskingConfig::default(), 1).unwrap().rows;
    let mut g = c.benchmark_group("feature_extraction");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| FeatureSet::from_encoder(&model, &rows, exec).unwrap())
        });
    }
    g.finish();
}

fn rank(c: &mut Criterion) {
    let (d, v) = (64, 2000);
    let heads: BTreeMap<usize, DecoderHead> = (0..=4).map(|l| (l, DecoderHead::random(d, v, l as u64))).collect();
    let reps: Vec<ProbeRepresentation> = (0..200)
        .map(|i| ProbeRepresentation {
            probe_id: format!("p{i}"),
            relation_id: None,
            gold_id: i % v,
            vectors: (0..=4).map(|l| (l, Array1::from_shape_fn(d, |j| ((i * 31 + j * 7 + l) % 13) as f64 / 13.0 - 0.5))).collect(),
        })
        .collect();
    let mut g = c.benchmark_group("probe_all_layers");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| probe_all_layers(&heads, &reps, 100, exec).unwrap())
        });
    }
    g.finish();
}

fn index(c: &mut Criterion) {
    let docs: Vec<(usize, String)> = lines().into_iter().cycle().take(20_000).enumerate().collect();
    let mut g = c.benchmark_group("index_build");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| InvertedIndex::build(&docs, exec, 1024).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, encode, rank, index);
criterion_main!(benches);
