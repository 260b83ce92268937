//! nli-load, nli-translate, nli-refine-serve, nli-export.

use std::net::SocketAddr;
use std::path::Path;
use std::sync::Arc;

use chrono::Duration;
use serde_json::json;
use vipubmed_core::mednli::{self, AbbrevLexicon, ExportFormat, NliExample, Split, SplitStats, State};
use vipubmed_core::refine::{SystemClock, TaskStore, DEFAULT_LEASE_MINUTES};
use vipubmed_refine::AppState;

use super::{plan, read_jsonl, resolve_backend, write_jsonl};
use crate::{
    data, print_json, CliError, Context, FormatArg, NliExportArgs, NliLoadArgs, NliTranslateArgs, Outcome,
    RefineServeArgs, SplitArg,
};

pub const DEFAULT_BIND: &str = "127.0.0.1:8080";

pub fn load(ctx: &Context, a: NliLoadArgs) -> Result<Outcome, CliError> {
    let split = a.split.map(|s| match s {
        SplitArg::Train => Split::Train,
        SplitArg::Dev => Split::Dev,
        SplitArg::Test => Split::Test,
    });
    if plan(ctx, "nli-load", vec![a.input.clone()], vec![a.out.clone()], json!({ "split": split })) {
        return Ok(Outcome::Done);
    }
    let (examples, stats) = mednli::load_mednli(&a.input, split).map_err(data(a.input.display()))?;
    write_jsonl(&a.out, &examples)?;
    print_json(&json!({ "total": examples.len(), "stats": stats }));
    Ok(Outcome::Done)
}

pub fn translate(ctx: &Context, a: NliTranslateArgs) -> Result<Outcome, CliError> {
    let (backend, opts) = resolve_backend(ctx, &a.backend)?;
    let mut outputs = vec![a.out.clone()];
    outputs.extend(a.backend.checkpoint.clone());
    let settings = json!({ "backend": backend, "parallelism": opts.parallelism });
    if plan(ctx, "nli-translate", vec![a.input.clone()], outputs, settings) {
        return Ok(Outcome::Done);
    }
    let mut examples: Vec<NliExample> = read_jsonl(&a.input)?;
    // already translated examples pass through, so a partial run can be redone
    let (mut todo, done): (Vec<_>, Vec<_>) = examples
        .drain(..)
        .enumerate()
        .partition(|(_, e)| e.state == State::Source);
    let mut pending: Vec<NliExample> = todo.iter_mut().map(|(_, e)| e.clone()).collect();
    let translator = backend.build().map_err(data("translation backend"))?;
    let result = mednli::translate_nli(&mut pending, translator.as_ref(), &opts, a.backend.checkpoint.as_deref())
        .map_err(data("translation"))?;
    let mut merged: Vec<(usize, NliExample)> = done;
    merged.extend(todo.into_iter().map(|(i, _)| i).zip(pending));
    merged.sort_by_key(|(i, _)| *i);
    let examples: Vec<NliExample> = merged.into_iter().map(|(_, e)| e).collect();
    write_jsonl(&a.out, &examples)?;
    let partial = !result.failed_uids.is_empty();
    print_json(&json!({
        "total": examples.len(),
        "stats": SplitStats::of(&examples),
        "failed_uids": result.failed_uids,
        "outcome": result.outcome,
    }));
    Ok(if partial { Outcome::Partial } else { Outcome::Done })
}

fn load_lexicon(ctx: &Context, flag: Option<&Path>) -> Result<AbbrevLexicon, CliError> {
    match flag.or(ctx.config.nli.abbrev_lexicon.as_deref()) {
        Some(p) => {
            let lex = AbbrevLexicon::load(p).map_err(data(p.display()))?;
            for (a, b) in lex.idempotence_conflicts() {
                log::warn!("abbreviation rules {a} and {b} can rewrite each other's output");
            }
            Ok(lex)
        }
        None => {
            log::warn!("no abbreviation lexicon given; suggestions equal the machine text");
            Ok(AbbrevLexicon::default())
        }
    }
}

pub fn refine_serve(ctx: &Context, a: RefineServeArgs) -> Result<Outcome, CliError> {
    let section = &ctx.config.refine;
    let store_path = a
        .store
        .clone()
        .or(section.store.clone())
        .ok_or_else(|| CliError::Usage("a store path is required (--store or [refine] store)".into()))?;
    let lease = a.lease_minutes.or(section.lease_minutes).unwrap_or(DEFAULT_LEASE_MINUTES);
    if lease <= 0 {
        return Err(CliError::Usage("lease must be a positive number of minutes".into()));
    }
    let bind: SocketAddr = match a.bind.or(section.bind) {
        Some(b) => b,
        None => DEFAULT_BIND.parse().expect("valid default address"),
    };
    let serving = !a.enqueue_only && a.auto_accept.is_none();
    let settings = json!({
        "lease_minutes": lease,
        "bind": serving.then_some(bind),
        "auto_accept": a.auto_accept,
    });
    if plan(ctx, "nli-refine-serve", a.input.iter().cloned().collect(), vec![store_path.clone()], settings) {
        return Ok(Outcome::Done);
    }
    let lexicon = load_lexicon(ctx, a.abbrev_lexicon.as_deref())?;
    let store = TaskStore::open(&store_path, Arc::new(SystemClock), Duration::minutes(lease))
        .map_err(data(store_path.display()))?;
    let mut enqueued = None;
    if let Some(input) = &a.input {
        let examples: Vec<NliExample> = read_jsonl(input)?;
        let (machine, other): (Vec<_>, Vec<_>) = examples.into_iter().partition(|e| e.state == State::Machine);
        if !other.is_empty() {
            log::warn!("{} examples are not in machine state and were not queued", other.len());
        }
        let report = store.enqueue(&machine, &lexicon).map_err(data(store_path.display()))?;
        enqueued = Some(json!({ "report": report, "not_machine_state": other.len() }));
    }
    if let Some(annotator) = &a.auto_accept {
        while let Some(task) = store.claim_next(annotator).map_err(data("claim"))? {
            store
                .submit(task.task_id, annotator, &task.suggested_text)
                .map_err(data(format!("task {}", task.task_id)))?;
        }
        print_json(&json!({ "enqueue": enqueued, "progress": store.progress() }));
        return Ok(Outcome::Done);
    }
    if a.enqueue_only {
        print_json(&json!({ "enqueue": enqueued, "progress": store.progress() }));
        return Ok(Outcome::Done);
    }
    if let Some(e) = &enqueued {
        eprintln!("enqueued: {e}");
    }
    let state = Arc::new(AppState { store, lexicon });
    eprintln!("serving refinement tasks on http://{bind}");
    vipubmed_refine::run(bind, state).map_err(data(bind))?;
    Ok(Outcome::Done)
}

pub fn export(ctx: &Context, a: NliExportArgs) -> Result<Outcome, CliError> {
    let format = match a.format {
        FormatArg::Jsonl => ExportFormat::Jsonl,
        FormatArg::Tsv => ExportFormat::Tsv,
        FormatArg::Both => ExportFormat::Both,
    };
    let inputs = a.input.iter().chain(a.store.iter()).cloned().collect();
    let settings = json!({ "format": format, "allow_mixed": a.allow_mixed });
    if plan(ctx, "nli-export", inputs, vec![a.out_dir.clone()], settings) {
        return Ok(Outcome::Done);
    }
    let examples: Vec<NliExample> = match (&a.input, &a.store) {
        (Some(p), _) => read_jsonl(p)?,
        (None, Some(store_path)) => {
            if !store_path.is_file() {
                return Err(CliError::Data(format!("{}: no such store", store_path.display())));
            }
            let store = TaskStore::open(store_path, Arc::new(SystemClock), Duration::minutes(DEFAULT_LEASE_MINUTES))
                .map_err(data(store_path.display()))?;
            let p = store.progress();
            if !store.export_ready() && !a.allow_mixed {
                return Err(CliError::Data(format!(
                    "refinement incomplete: {} of {} tasks submitted",
                    p.submitted, p.total
                )));
            }
            store.examples()
        }
        (None, None) => unreachable!("clap requires --in or --store"),
    };
    let manifest = mednli::export_vimednli(&examples, &a.out_dir, format, a.allow_mixed)
        .map_err(data(a.out_dir.display()))?;
    print_json(&manifest);
    Ok(Outcome::Done)
}
