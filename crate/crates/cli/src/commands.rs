use std::collections::BTreeMap;
use std::path::Path;

use layerprobe::capacity::{compare_modes, run_capacity, CapacityPlan, CapacityResult, ModeComparison};
use layerprobe::checkpoint::{head_file_name, load_head, load_model, save_head, save_model};
use layerprobe::data::{load_probe_set, read_lines, LoadedProbeSet, MaskingConfig, ProbeSet, Vocabulary};
use layerprobe::embedding_io::{EmbeddingArchive, HEAD_FILE, VOCAB_FILE};
use layerprobe::heads::{probed_layers, train_all_heads, HeadData, HeadTrainingConfig};
use layerprobe::metrics::{
    archive_representations, encoder_representations, learned_forgotten, probe_all_layers, LayerRankTable,
    MetricsReport,
};
use layerprobe::nn::{DecoderHead, EncoderConfig, EncoderModel, RankHead, SpanHead, TaskHead};
use layerprobe::overlap::{coverage_report, read_corpus, InvertedIndex};
use layerprobe::seed;
use layerprobe::toy::{generate, ToyConfig};
use layerprobe::training::{fine_tune, train_mlm, FineTuneData, TrainConfig};
use serde::de::DeserializeOwned;
use serde_json::{json, Value};

use crate::config::*;
use crate::error::{module, CliError, CliResult, Tag};
use crate::manifest::RunContext;
use crate::report;

pub const MODEL_FILE: &str = "model.lpmd";
pub const METRICS_FILE: &str = "metrics.json";
pub const RANKS_FILE: &str = "ranks.json";

/// Stream index for head initialisation seeds derived from the run seed.
const HEAD_STREAM: u64 = 101;

fn load_vocab(ctx: &mut RunContext, p: &Path) -> CliResult<Vocabulary> {
    Vocabulary::load(&ctx.input(p)?).tag(module::PROBE_DATA)
}

fn load_lines(ctx: &mut RunContext, p: &Path) -> CliResult<Vec<String>> {
    read_lines(&ctx.input(p)?).tag(module::PROBE_DATA)
}

fn load_probes(ctx: &mut RunContext, p: &Path, vocab: &Vocabulary) -> CliResult<LoadedProbeSet> {
    let loaded = load_probe_set(&ctx.input(p)?, vocab).tag(module::PROBE_DATA)?;
    if loaded.rejected_count() > 0 {
        log::warn!("{}: {} probe(s) rejected", p.display(), loaded.rejected_count());
    }
    Ok(loaded)
}

fn load_checkpoint(ctx: &mut RunContext, p: &Path) -> CliResult<EncoderModel> {
    load_model(&ctx.input(p)?).tag(module::ENCODER_CORE)
}

fn load_decoder(ctx: &mut RunContext, p: &Path) -> CliResult<DecoderHead> {
    Ok(load_head(&ctx.input(p)?).tag(module::DECODER_HEADS)?.0)
}

fn read_json<T: DeserializeOwned>(ctx: &mut RunContext, p: &Path, tag: &'static str) -> CliResult<T> {
    let full = ctx.input(p)?;
    let text = std::fs::read_to_string(&full).tag(tag)?;
    serde_json::from_str(&text).map_err(|e| CliError::runtime(tag, format!("{}: {e}", full.display())))
}

fn read_jsonl<T: DeserializeOwned>(ctx: &mut RunContext, p: &Path) -> CliResult<Vec<T>> {
    let full = ctx.input(p)?;
    read_lines(&full)
        .tag(module::PROBE_DATA)?
        .iter()
        .enumerate()
        .map(|(i, l)| {
            serde_json::from_str(l)
                .map_err(|e| CliError::runtime(module::PROBE_DATA, format!("{}: line {}: {e}", full.display(), i + 1)))
        })
        .collect()
}

fn model_masking(m: &MaskingConfig, model: &EncoderModel) -> MaskingConfig {
    MaskingConfig { max_len: m.max_len.min(model.config.max_seq_len), ..*m }
}

pub fn toy_data(ctx: &mut RunContext, cfg: &ToyDataConfig) -> CliResult<Value> {
    let world = generate(&ToyConfig { seed: cfg.seed, ..cfg.toy.clone() }).tag(module::PROBE_DATA)?;
    ctx.write_text("corpus.txt", &(world.corpus.join("\n") + "\n"))?;
    ctx.write_text("heldout.txt", &(world.heldout.join("\n") + "\n"))?;
    world.vocab.save(&ctx.output(VOCAB_FILE)?).tag(module::PROBE_DATA)?;
    for set in &world.probe_sets {
        set.save_jsonl(&ctx.output(&format!("probes/{}.jsonl", set.name))?).tag(module::PROBE_DATA)?;
    }
    Ok(json!({
        "corpus_lines": world.corpus.len(),
        "heldout_lines": world.heldout.len(),
        "vocab_size": world.vocab.len(),
        "probe_sets": world.probe_sets.iter().map(|s| json!({"name": s.name, "probes": s.len()})).collect::<Vec<_>>(),
    }))
}

pub fn pretrain(ctx: &mut RunContext, cfg: &PretrainConfig) -> CliResult<Value> {
    let lines = load_lines(ctx, &cfg.corpus)?;
    let vocab = match &cfg.vocab {
        Some(p) => load_vocab(ctx, p)?,
        None => Vocabulary::from_corpus(lines.iter().map(String::as_str), cfg.min_count),
    };
    let m = &cfg.model;
    let enc = EncoderConfig {
        num_layers: m.num_layers,
        hidden_dim: m.hidden_dim,
        num_heads: m.num_heads,
        ff_dim: m.ff_dim,
        max_seq_len: m.max_seq_len,
        vocab_size: vocab.len(),
        layernorm_epsilon: m.layernorm_epsilon,
        seed: cfg.seed,
    };
    let mut model = EncoderModel::new(enc).map_err(|e| CliError::schema("model", e.to_string()))?;
    let mut head = DecoderHead::random(m.hidden_dim, vocab.len(), seed::derive(cfg.seed, HEAD_STREAM, 0));
    let train = TrainConfig { seed: cfg.seed, execution: ctx.exec, ..cfg.train.clone() };
    let trace = train_mlm(&mut model, &mut head, &lines, &vocab, &train).tag(module::ENCODER_CORE)?;
    save_model(&model, &ctx.output(MODEL_FILE)?).tag(module::ENCODER_CORE)?;
    save_head(&head, m.num_layers, &ctx.output(HEAD_FILE)?).tag(module::DECODER_HEADS)?;
    vocab.save(&ctx.output(VOCAB_FILE)?).tag(module::PROBE_DATA)?;
    ctx.write_json("training.json", &trace)?;
    Ok(json!({
        "vocab_size": vocab.len(),
        "epochs": trace.epochs.len(),
        "final_val_loss": trace.epochs.last().and_then(|e| e.val_loss),
        "warnings": trace.warnings,
    }))
}

pub fn finetune(ctx: &mut RunContext, cfg: &FinetuneConfig) -> CliResult<Value> {
    let mut model = load_checkpoint(ctx, &cfg.checkpoint)?;
    let head = load_decoder(ctx, &cfg.head)?;
    let vocab = load_vocab(ctx, &cfg.vocab)?;
    let d = model.hidden_dim();
    let task_seed = seed::derive(cfg.seed, HEAD_STREAM, 1);
    let (mut task, data) = match cfg.task {
        FinetuneTask::Mlm => (TaskHead::Mlm(head.clone()), FineTuneData::Mlm(load_lines(ctx, &cfg.data)?)),
        FinetuneTask::SpanQa => (
            TaskHead::SpanQa(SpanHead::random(d, task_seed)),
            FineTuneData::SpanQa { examples: read_jsonl(ctx, &cfg.data)?, allow_no_answer: cfg.allow_no_answer },
        ),
        FinetuneTask::PointwiseRank => {
            (TaskHead::PointwiseRank(RankHead::random(d, task_seed)), FineTuneData::PointwiseRank(read_jsonl(ctx, &cfg.data)?))
        }
    };
    let train = TrainConfig { seed: cfg.seed, execution: ctx.exec, ..cfg.train.clone() };
    let report = fine_tune(&mut model, &mut task, &data, &vocab, &train).tag(module::ENCODER_CORE)?;
    let mlm_head = match &task {
        TaskHead::Mlm(h) => h,
        _ => &head,
    };
    save_model(&model, &ctx.output(MODEL_FILE)?).tag(module::ENCODER_CORE)?;
    save_head(mlm_head, model.num_layers(), &ctx.output(HEAD_FILE)?).tag(module::DECODER_HEADS)?;
    vocab.save(&ctx.output(VOCAB_FILE)?).tag(module::PROBE_DATA)?;
    ctx.write_json("finetune.json", &report)?;
    Ok(json!({ "epochs": report.trace.epochs.len(), "rejected": report.rejected.len() }))
}

pub fn train_heads(ctx: &mut RunContext, cfg: &TrainHeadsConfig) -> CliResult<Value> {
    let model = load_checkpoint(ctx, &cfg.checkpoint)?;
    let vocab = load_vocab(ctx, &cfg.vocab)?;
    let lines = load_lines(ctx, &cfg.corpus)?;
    let pretrained = cfg.pretrained_head.as_deref().map(|p| load_decoder(ctx, p)).transpose()?;
    let masking = model_masking(&cfg.masking, &model);
    let data = HeadData::from_corpus(&model, &lines, &vocab, &masking, cfg.val_fraction, cfg.seed, ctx.exec)
        .tag(module::DECODER_HEADS)?;
    let layers = cfg.layers.clone().unwrap_or_else(|| probed_layers(model.num_layers(), cfg.include_embedding));
    if let Some(&l) = layers.iter().find(|&&l| l > model.num_layers()) {
        return Err(CliError::schema("layers", format!("layer {l} beyond the {}-layer model", model.num_layers())));
    }
    let base = HeadTrainingConfig { seed: cfg.seed, ..cfg.head.clone() };
    let results = train_all_heads(&data, &layers, vocab.len(), pretrained.as_ref(), &base, ctx.exec);
    let mut summary = Vec::new();
    let mut trained = 0;
    for (l, r) in &results {
        match r {
            Ok(r) => {
                save_head(&r.head, *l, &ctx.output(&head_file_name(*l))?).tag(module::DECODER_HEADS)?;
                trained += 1;
                summary.push(json!({
                    "layer": l,
                    "best_epoch": r.best_epoch,
                    "best_val_loss": r.best_val_loss(),
                    "stopped_early": r.stopped_early,
                    "val_losses": r.val_losses,
                }));
            }
            Err(e) => {
                log::warn!("head for layer {l} failed: {e}");
                summary.push(json!({ "layer": l, "error": e.to_string() }));
            }
        }
    }
    if trained == 0 {
        return Err(CliError::runtime(module::DECODER_HEADS, "no layer produced a head"));
    }
    ctx.write_json("heads.json", &summary)?;
    Ok(json!({ "layers": layers, "trained": trained }))
}

pub fn probe(ctx: &mut RunContext, cfg: &ProbeConfig) -> CliResult<Value> {
    let (reps, failures, set, num_layers, archive_head) = if let Some(cp) = &cfg.checkpoint {
        let model = load_checkpoint(ctx, cp)?;
        let vocab = load_vocab(ctx, cfg.vocab.as_deref().expect("validated"))?;
        let loaded = load_probes(ctx, &cfg.probes, &vocab)?;
        let masking = model_masking(&MaskingConfig::default(), &model);
        let (reps, failed) = encoder_representations(&model, &loaded.set, &vocab, cfg.render_mode, &masking, ctx.exec);
        (reps, (loaded.rejections, failed), loaded.set, model.num_layers(), None)
    } else {
        let dir = cfg.archive.as_deref().expect("validated");
        let full = ctx.resolve(dir);
        let archive = EmbeddingArchive::open(&full).tag(module::EMBEDDING_IO)?;
        let mut names: Vec<String> = std::fs::read_dir(&full)
            .tag(module::EMBEDDING_IO)?
            .filter_map(|e| e.ok())
            .filter(|e| e.path().is_file())
            .map(|e| e.file_name().to_string_lossy().into_owned())
            .collect();
        names.sort();
        for n in &names {
            ctx.input_in(dir, n)?;
        }
        let vocab = match &cfg.vocab {
            Some(p) => load_vocab(ctx, p)?,
            None => archive.vocabulary().tag(module::EMBEDDING_IO)?,
        };
        let loaded = load_probes(ctx, &cfg.probes, &vocab)?;
        let records = archive.records().tag(module::EMBEDDING_IO)?;
        let reps = archive_representations(records, Some(&loaded.set)).tag(module::EMBEDDING_IO)?;
        let head = archive.pretrained_head().tag(module::EMBEDDING_IO)?;
        (reps, (loaded.rejections, Vec::new()), loaded.set, archive.manifest().num_layers, head)
    };
    let layers = cfg.layers.clone().unwrap_or_else(|| probed_layers(num_layers, cfg.include_embedding));
    let fallback = match &cfg.pretrained_head {
        Some(p) => Some(load_decoder(ctx, p)?),
        None => archive_head,
    };
    let mut heads = BTreeMap::new();
    for &l in &layers {
        let own = cfg.heads_dir.as_deref().map(|d| (d, head_file_name(l))).filter(|(d, f)| ctx.resolve(d).join(f).is_file());
        let head = match (own, &fallback) {
            (Some((d, f)), _) => load_head(&ctx.input_in(d, &f)?).tag(module::DECODER_HEADS)?.0,
            (None, Some(h)) => h.clone(),
            (None, None) => return Err(CliError::runtime(module::DECODER_HEADS, format!("no head for layer {l}"))),
        };
        heads.insert(l, head);
    }
    let table = probe_all_layers(&heads, &reps, cfg.k, ctx.exec).tag(module::PROBING_METRICS)?;
    let base = cfg.base_metrics.as_deref().map(|p| read_json::<MetricsReport>(ctx, p, module::PROBING_METRICS)).transpose()?;
    let report = build_report(&set.name, &table, &cfg.metrics, base.as_ref())?;
    ctx.write_json(RANKS_FILE, &table)?;
    ctx.write_text(METRICS_FILE, &(report.to_json().tag(module::PROBING_METRICS)? + "\n"))?;
    let (rejections, render_failures) = failures;
    ctx.write_json("rejected.json", &json!({ "rejected": rejections, "render_failures": render_failures }))?;
    Ok(summary_of(&report))
}

fn build_report(
    name: &str,
    table: &LayerRankTable,
    opts: &layerprobe::metrics::MetricsOptions,
    base: Option<&MetricsReport>,
) -> CliResult<MetricsReport> {
    let mut report = MetricsReport::build(name, table, opts).tag(module::PROBING_METRICS)?;
    if let Some(base) = base {
        let (b, f) = match (base.known_set_k1(), report.known_set_k1()) {
            (Some(b), Some(f)) => (b, f),
            _ => return Err(CliError::runtime(module::PROBING_METRICS, "metrics lack aggregate knowledge")),
        };
        report.learned_forgotten = Some(learned_forgotten(b, f).tag(module::PROBING_METRICS)?);
    }
    Ok(report)
}

fn summary_of(report: &MetricsReport) -> Value {
    json!({
        "probe_set": report.probe_set,
        "probes": report.probes,
        "layers": report.layers,
        "last_layer_p_at_1": report.layers.last().and_then(|&l| report.metrics.p_at(l, 1)),
    })
}

pub fn metrics(ctx: &mut RunContext, cfg: &MetricsConfig) -> CliResult<Value> {
    let table: LayerRankTable = read_json(ctx, &cfg.ranks, module::PROBING_METRICS)?;
    let base = cfg.base_metrics.as_deref().map(|p| read_json::<MetricsReport>(ctx, p, module::PROBING_METRICS)).transpose()?;
    let report = build_report(&cfg.probe_set, &table, &cfg.metrics, base.as_ref())?;
    ctx.write_text(METRICS_FILE, &(report.to_json().tag(module::PROBING_METRICS)? + "\n"))?;
    Ok(summary_of(&report))
}

pub fn overlap(ctx: &mut RunContext, cfg: &OverlapConfig) -> CliResult<Value> {
    let docs = read_corpus(&ctx.input(&cfg.corpus)?).tag(module::OVERLAP_INDEX)?;
    let vocab = load_vocab(ctx, &cfg.vocab)?;
    let index = InvertedIndex::build(&docs, ctx.exec, cfg.shard_size).tag(module::OVERLAP_INDEX)?;
    let passages = cfg.passages.unwrap_or(docs.len());
    let mut reports = Vec::new();
    for p in &cfg.probes {
        let set = load_probes(ctx, p, &vocab)?.set;
        reports.push(coverage_report(&index, &set, passages, cfg.match_mode, ctx.exec).tag(module::OVERLAP_INDEX)?);
    }
    let out = json!({ "documents": index.num_docs(), "terms": index.num_terms(), "reports": reports });
    ctx.write_json("overlap.json", &out)?;
    Ok(json!({ "documents": index.num_docs(), "probe_sets": reports.len() }))
}

pub fn capacity(ctx: &mut RunContext, cfg: &CapacityConfig) -> CliResult<Value> {
    let model = load_checkpoint(ctx, &cfg.checkpoint)?;
    let head = load_decoder(ctx, &cfg.head)?;
    let vocab = load_vocab(ctx, &cfg.vocab)?;
    let heldout = load_lines(ctx, &cfg.heldout)?;
    let sets: Vec<ProbeSet> = cfg.probes.iter().map(|p| load_probes(ctx, p, &vocab).map(|l| l.set)).collect::<CliResult<_>>()?;
    let plan = CapacityPlan { seed: cfg.seed, ..cfg.plan.clone() };
    if cfg.compare_modes {
        let cmp = compare_modes(&model, &head, &sets, &vocab, &heldout, &plan, cfg.include_random, ctx.exec)
            .tag(module::CAPACITY_DRIVER)?;
        ctx.write_json("capacity.json", &cmp)?;
        ctx.write_text("capacity.csv", &comparison_csv(&cmp))?;
        Ok(json!({ "runs": cmp.results.iter().map(capacity_summary).collect::<Vec<_>>() }))
    } else {
        let r = run_capacity(&model, &head, &sets, &vocab, &heldout, &plan, ctx.exec).tag(module::CAPACITY_DRIVER)?;
        ctx.write_json("capacity.json", &r)?;
        ctx.write_text("capacity.csv", &r.to_csv(true))?;
        Ok(capacity_summary(&r))
    }
}

fn comparison_csv(cmp: &ModeComparison) -> String {
    cmp.results.iter().enumerate().map(|(i, r)| r.to_csv(i == 0)).collect()
}

fn capacity_summary(r: &CapacityResult) -> Value {
    json!({
        "label": r.label,
        "p_at_1": r.sets.iter().map(|s| (s.name.clone(), s.p_at_1)).collect::<BTreeMap<_, _>>(),
        "heldout_increase_percent": r.relative_increase_percent(),
    })
}

pub fn report(ctx: &mut RunContext, cfg: &ReportConfig) -> CliResult<Value> {
    let mut written = Vec::new();
    if let Some(p) = &cfg.metrics {
        let m: MetricsReport = read_json(ctx, p, module::CLI_REPORT)?;
        ctx.write_text("metrics.csv", &m.to_csv())?;
        ctx.write_text("layer_curve.csv", &m.layer_curve_csv())?;
        written.extend(["metrics.csv", "layer_curve.csv"]);
        if cfg.svg {
            match report::layer_curve_svg(&m) {
                Some(svg) => {
                    ctx.write_text("layer_curve.svg", &svg)?;
                    written.push("layer_curve.svg");
                }
                None => log::warn!("layer curve has no points; no SVG drawn"),
            }
        }
    }
    if let Some(p) = &cfg.capacity {
        let v: Value = read_json(ctx, p, module::CLI_REPORT)?;
        let csv = if v.get("results").is_some() {
            comparison_csv(&serde_json::from_value(v).tag(module::CLI_REPORT)?)
        } else {
            serde_json::from_value::<CapacityResult>(v).tag(module::CLI_REPORT)?.to_csv(true)
        };
        ctx.write_text("capacity_table.csv", &csv)?;
        written.push("capacity_table.csv");
    }
    Ok(json!({ "written": written }))
}
