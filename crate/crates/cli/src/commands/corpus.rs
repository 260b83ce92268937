//! ingest, filter, translate, selftrain-mix, corrupt.

use std::collections::HashSet;
use std::path::Path;
use std::thread;

use serde::{Deserialize, Serialize};
use serde_json::json;
use vipubmed_core::filter::{self, FilterConfig, FilterStats, DEFAULT_MAX_TOKENS};
use vipubmed_core::ingest::{self, Abstract, IngestStats};
use vipubmed_core::selftrain::{self, BitextPair, MixManifest, Origin};
use vipubmed_core::span::{self, CorruptionConfig, Sentinels};
use vipubmed_core::text;
use vipubmed_core::translate::{translate_batch, JobOutcome, JobStatus, TranslationJob};

use super::{create, finish, plan, read_jsonl, resolve_backend, write_json, write_jsonl, ShardWriter};
use crate::seeds::{self, record_seed};
use crate::{data, print_json, CorruptArgs, CliError, Context, FilterArgs, IngestArgs, MixArgs, Outcome, TranslateArgs};

pub const DEFAULT_CORRUPT_SHARD: usize = 10_000;
pub const DEFAULT_MIX_SHARD: usize = 100_000;

fn parse_into(
    path: &Path,
    sink: &mut dyn FnMut(Abstract) -> Result<(), CliError>,
) -> Result<IngestStats, CliError> {
    let mut parser = ingest::parse_file(path).map_err(data(path.display()))?;
    for rec in parser.by_ref() {
        sink(rec.map_err(data(path.display()))?)?;
    }
    Ok(parser.stats())
}

pub fn ingest(ctx: &Context, a: IngestArgs) -> Result<Outcome, CliError> {
    if plan(ctx, "ingest", a.inputs.clone(), vec![a.out.clone()], json!({})) {
        return Ok(Outcome::Done);
    }
    let mut out = create(&a.out)?;
    let mut total = IngestStats::default();
    let mut seen: HashSet<String> = HashSet::new();
    let mut cross_file_duplicates = 0u64;
    let out_path = a.out.clone();
    let mut emit = |rec: Abstract, out: &mut std::io::BufWriter<std::fs::File>| -> Result<(), CliError> {
        if !seen.insert(rec.pmid.clone()) {
            log::warn!("pmid {} repeated in {}; keeping the first", rec.pmid, rec.source_file);
            cross_file_duplicates += 1;
            return Ok(());
        }
        vipubmed_core::jsonl::write_record(out, &rec).map_err(data(out_path.display()))
    };
    for window in a.inputs.chunks(ctx.jobs) {
        if let [only] = window {
            // one file at a time: stream straight to the output
            let stats = parse_into(only, &mut |rec| emit(rec, &mut out))?;
            total.merge(&stats);
            continue;
        }
        let results: Vec<Result<(Vec<Abstract>, IngestStats), CliError>> = thread::scope(|s| {
            let handles: Vec<_> = window
                .iter()
                .map(|p| {
                    s.spawn(move || {
                        let mut recs = Vec::new();
                        let stats = parse_into(p, &mut |r| {
                            recs.push(r);
                            Ok(())
                        })?;
                        Ok((recs, stats))
                    })
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("parser thread")).collect()
        });
        for r in results {
            let (recs, stats) = r?;
            total.merge(&stats);
            for rec in recs {
                emit(rec, &mut out)?;
            }
        }
    }
    finish(out, &a.out)?;
    total.records_emitted -= cross_file_duplicates;
    total.records_malformed += cross_file_duplicates;
    print_json(&json!({ "files": a.inputs.len(), "stats": total }));
    Ok(Outcome::Done)
}

/// Reads abstract JSON lines, checking the record invariants.
pub(crate) fn read_abstracts(path: &Path) -> Result<Vec<Abstract>, CliError> {
    let records: Vec<Abstract> = read_jsonl(path)?;
    for (i, a) in records.iter().enumerate() {
        let problem = if a.pmid.is_empty() {
            Some("empty pmid".to_string())
        } else if a.body.trim().is_empty() {
            Some("empty body".to_string())
        } else if a.token_count != text::token_count(&a.body) {
            Some(format!(
                "token_count {} does not match body ({} tokens)",
                a.token_count,
                text::token_count(&a.body)
            ))
        } else {
            None
        };
        if let Some(p) = problem {
            return Err(CliError::Data(format!("{} record {}: {p}", path.display(), i + 1)));
        }
    }
    Ok(records)
}

pub fn filter(ctx: &Context, a: FilterArgs) -> Result<Outcome, CliError> {
    let section = &ctx.config.filter;
    let cfg = FilterConfig {
        max_tokens: a.max_tokens.or(section.max_tokens).unwrap_or(DEFAULT_MAX_TOKENS),
        dedup: !a.no_dedup && section.dedup.unwrap_or(true),
        subset_size: a.subset.or(section.subset_size),
        subset_seed: a
            .subset_seed
            .or(section.subset_seed)
            .unwrap_or_else(|| ctx.stage_seed(seeds::FILTER_SUBSET)),
    };
    cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    if plan(ctx, "filter", vec![a.input.clone()], vec![a.out.clone()], json!(cfg)) {
        return Ok(Outcome::Done);
    }
    let abstracts = read_abstracts(&a.input)?;
    let (kept, stats): (Vec<Abstract>, FilterStats) =
        filter::run(abstracts, &cfg).map_err(|e| CliError::Usage(e.to_string()))?;
    write_jsonl(&a.out, &kept)?;
    print_json(&stats);
    Ok(Outcome::Done)
}

#[derive(Debug, Serialize)]
struct TranslateSummary<'a> {
    input: usize,
    written: usize,
    failed_pmids: Vec<&'a str>,
    outcome: JobOutcome,
}

fn title_id(pmid: &str) -> String {
    format!("{pmid}#title")
}

pub fn translate(ctx: &Context, a: TranslateArgs) -> Result<Outcome, CliError> {
    let (backend, opts) = resolve_backend(ctx, &a.backend)?;
    let mut outputs = vec![a.out.clone()];
    outputs.extend(a.backend.checkpoint.clone());
    let settings = json!({
        "backend": backend,
        "parallelism": opts.parallelism,
        "checkpoint_interval": opts.checkpoint_interval,
        "with_title": a.with_title,
    });
    if plan(ctx, "translate", vec![a.input.clone()], outputs, settings) {
        return Ok(Outcome::Done);
    }
    let abstracts = read_abstracts(&a.input)?;
    if abstracts.is_empty() {
        write_jsonl::<Abstract>(&a.out, [])?;
        print_json(&json!({ "input": 0, "written": 0 }));
        return Ok(Outcome::Done);
    }
    let mut items = Vec::with_capacity(abstracts.len());
    for ab in &abstracts {
        items.push((ab.pmid.clone(), ab.body.clone()));
        if a.with_title && !ab.title.trim().is_empty() {
            items.push((title_id(&ab.pmid), ab.title.clone()));
        }
    }
    let mut job = TranslationJob::new(items).map_err(data(a.input.display()))?;
    if let Some(p) = &a.backend.checkpoint {
        job = job.with_checkpoint(p).map_err(data(p.display()))?;
    }
    let translator = backend.build().map_err(data("translation backend"))?;
    let outcome = translate_batch(translator.as_ref(), &mut job, &opts).map_err(data("translation"))?;

    let mut written = Vec::with_capacity(abstracts.len());
    let mut failed = Vec::new();
    for ab in &abstracts {
        let body = job.translation(&ab.pmid);
        let title = if a.with_title && !ab.title.trim().is_empty() {
            job.translation(&title_id(&ab.pmid))
        } else {
            Some(ab.title.as_str())
        };
        match (body, title) {
            (Some(b), Some(t)) if !b.trim().is_empty() => {
                written.push(Abstract::new(ab.pmid.clone(), t, b))
            }
            _ => failed.push(ab.pmid.as_str()),
        }
    }
    write_jsonl(&a.out, &written)?;
    let partial = !failed.is_empty() || outcome.status != JobStatus::Complete;
    print_json(&TranslateSummary {
        input: abstracts.len(),
        written: written.len(),
        failed_pmids: failed,
        outcome,
    });
    Ok(if partial { Outcome::Partial } else { Outcome::Done })
}

#[derive(Debug, Serialize)]
struct MixOutput {
    #[serde(flatten)]
    manifest: MixManifest,
    global_seed: u64,
    synthesis_failed: usize,
    synthesis_backend_calls: usize,
}

fn read_bitext(path: &Path, expected: Origin) -> Result<Vec<BitextPair>, CliError> {
    let pairs = selftrain::read_tsv_file(path).map_err(data(path.display()))?;
    if let Some((i, p)) = pairs.iter().enumerate().find(|(_, p)| p.origin() != expected) {
        return Err(CliError::Data(format!(
            "{} line {}: origin {} where {expected} was expected",
            path.display(),
            i + 1,
            p.origin()
        )));
    }
    Ok(pairs)
}

pub fn selftrain_mix(ctx: &Context, a: MixArgs) -> Result<Outcome, CliError> {
    let seed = a
        .shuffle_seed
        .or(ctx.config.selftrain.shuffle_seed)
        .unwrap_or_else(|| ctx.stage_seed(seeds::MIX_SHUFFLE));
    let shard_size = a
        .shard_size
        .or(ctx.config.selftrain.shard_size)
        .unwrap_or(DEFAULT_MIX_SHARD);
    if shard_size == 0 {
        return Err(CliError::Usage("shard size must be at least 1".into()));
    }
    let backend = match &a.mono {
        Some(_) => Some(resolve_backend(ctx, &a.backend)?),
        None => None,
    };
    let mut inputs = vec![a.gold.clone()];
    inputs.extend(a.synthetic.clone());
    inputs.extend(a.mono.clone());
    let settings = json!({
        "shuffle_seed": seed,
        "shard_size": shard_size,
        "backend": backend.as_ref().map(|b| &b.0),
    });
    if plan(ctx, "selftrain-mix", inputs, vec![a.out_dir.clone()], settings) {
        return Ok(Outcome::Done);
    }
    let gold = read_bitext(&a.gold, Origin::Gold)?;
    let (synthetic, failed, calls) = match (&a.synthetic, &a.mono, backend) {
        (Some(p), _, _) => (read_bitext(p, Origin::Synthetic)?, 0, 0),
        (None, Some(mono), Some((backend, opts))) => {
            let abstracts = read_abstracts(mono)?;
            let translator = backend.build().map_err(data("translation backend"))?;
            let synth = selftrain::synthesize_bitext(
                &abstracts,
                translator.as_ref(),
                &opts,
                a.backend.checkpoint.as_deref(),
            )
            .map_err(data("synthesis"))?;
            let path = a.out_dir.join("synthetic.tsv");
            let mut out = create(&path)?;
            selftrain::write_tsv(&mut out, &synth.pairs).map_err(data(path.display()))?;
            finish(out, &path)?;
            (synth.pairs, synth.failed, synth.outcome.backend_calls)
        }
        _ => (Vec::new(), 0, 0),
    };
    let (mixed, mut manifest) = selftrain::mix_corpora(gold, synthetic, seed);
    selftrain::write_shards(&mixed, &a.out_dir, "mix", shard_size, &mut manifest)
        .map_err(data(a.out_dir.display()))?;
    let output = MixOutput {
        manifest,
        global_seed: ctx.seed,
        synthesis_failed: failed,
        synthesis_backend_calls: calls,
    };
    write_json(&a.out_dir.join("manifest.json"), &output)?;
    print_json(&output);
    Ok(if failed > 0 { Outcome::Partial } else { Outcome::Done })
}

/// Anything with a `body` (abstracts) or `text` field.
#[derive(Debug, Deserialize)]
struct TextRecord {
    #[serde(alias = "text")]
    body: String,
}

#[derive(Debug, Serialize, Deserialize, PartialEq, Eq)]
pub struct CorruptRecord {
    pub input: String,
    pub target: String,
    pub original_length: usize,
}

#[derive(Debug, Serialize)]
struct CorruptManifest {
    records: u64,
    skipped_empty: u64,
    total_tokens: u64,
    masked_tokens: u64,
    masked_fraction: f64,
    corruption_rate: f64,
    mean_span_length: f64,
    sentinel_pattern: String,
    seed: u64,
    global_seed: u64,
    shard_size: usize,
    shards: Vec<std::path::PathBuf>,
}

const CORRUPT_BLOCK: usize = 4096;

fn corrupt_block(
    block: &[(u64, String)],
    cfg: &CorruptionConfig,
    sentinels: &Sentinels,
    jobs: usize,
) -> Result<Vec<Option<CorruptRecord>>, CliError> {
    let one = |(index, body): &(u64, String)| -> Result<Option<CorruptRecord>, CliError> {
        let tokens = text::tokenize(body);
        if tokens.is_empty() {
            return Ok(None);
        }
        let mut c = cfg.clone();
        c.seed = record_seed(cfg.seed, *index);
        let ex = span::corrupt_with(&tokens, &c, sentinels)
            .map_err(|e| CliError::Data(format!("record {}: {e}", index + 1)))?;
        Ok(Some(CorruptRecord {
            input: ex.input_tokens.join(" "),
            target: ex.target_tokens.join(" "),
            original_length: ex.original_length,
        }))
    };
    let chunk = block.len().div_ceil(jobs.max(1)).max(1);
    thread::scope(|s| {
        let handles: Vec<_> = block
            .chunks(chunk)
            .map(|part| s.spawn(move || part.iter().map(one).collect::<Result<Vec<_>, _>>()))
            .collect();
        let mut out = Vec::with_capacity(block.len());
        for h in handles {
            out.extend(h.join().expect("corruption worker")?);
        }
        Ok(out)
    })
}

pub fn corrupt(ctx: &Context, a: CorruptArgs) -> Result<Outcome, CliError> {
    let section = &ctx.config.corrupt;
    let defaults = CorruptionConfig::default();
    let cfg = CorruptionConfig {
        corruption_rate: a.rate.or(section.corruption_rate).unwrap_or(defaults.corruption_rate),
        mean_span_length: a
            .mean_span
            .or(section.mean_span_length)
            .unwrap_or(defaults.mean_span_length),
        sentinel_pattern: a
            .sentinel_pattern
            .clone()
            .or(section.sentinel_pattern.clone())
            .unwrap_or(defaults.sentinel_pattern),
        seed: a
            .corrupt_seed
            .or(section.seed)
            .unwrap_or_else(|| ctx.stage_seed(seeds::CORRUPT)),
    };
    let sentinels = cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let shard_size = a.shard_size.or(section.shard_size).unwrap_or(DEFAULT_CORRUPT_SHARD);
    if shard_size == 0 {
        return Err(CliError::Usage("shard size must be at least 1".into()));
    }
    let settings = json!({ "corruption": cfg, "shard_size": shard_size });
    if plan(ctx, "corrupt", vec![a.input.clone()], vec![a.out_dir.clone()], settings) {
        return Ok(Outcome::Done);
    }
    std::fs::create_dir_all(&a.out_dir).map_err(data(a.out_dir.display()))?;
    let mut shards = ShardWriter::new(&a.out_dir, "corrupt", "jsonl", shard_size);
    let mut manifest = CorruptManifest {
        records: 0,
        skipped_empty: 0,
        total_tokens: 0,
        masked_tokens: 0,
        masked_fraction: 0.0,
        corruption_rate: cfg.corruption_rate,
        mean_span_length: cfg.mean_span_length,
        sentinel_pattern: cfg.sentinel_pattern.clone(),
        seed: cfg.seed,
        global_seed: ctx.seed,
        shard_size,
        shards: Vec::new(),
    };
    let mut flush = |block: &mut Vec<(u64, String)>, m: &mut CorruptManifest| -> Result<(), CliError> {
        for rec in corrupt_block(block, &cfg, &sentinels, ctx.jobs)? {
            let Some(rec) = rec else {
                m.skipped_empty += 1;
                continue;
            };
            let spans = rec
                .input
                .split(' ')
                .filter(|t| sentinels.index_of(t).is_some())
                .count() as u64;
            let target_len = rec.target.split(' ').count() as u64;
            m.records += 1;
            m.total_tokens += rec.original_length as u64;
            m.masked_tokens += target_len - spans - 1;
            shards.write(&rec)?;
        }
        block.clear();
        Ok(())
    };
    let mut block = Vec::with_capacity(CORRUPT_BLOCK);
    for (i, rec) in super::open_jsonl::<TextRecord>(&a.input)?.enumerate() {
        let rec = rec.map_err(data(a.input.display()))?;
        block.push((i as u64, rec.body));
        if block.len() == CORRUPT_BLOCK {
            flush(&mut block, &mut manifest)?;
        }
    }
    flush(&mut block, &mut manifest)?;
    manifest.shards = shards.finish()?;
    if manifest.total_tokens > 0 {
        manifest.masked_fraction = manifest.masked_tokens as f64 / manifest.total_tokens as f64;
    }
    write_json(&a.out_dir.join("manifest.json"), &manifest)?;
    print_json(&manifest);
    Ok(Outcome::Done)
}
