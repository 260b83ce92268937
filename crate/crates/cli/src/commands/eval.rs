//! eval and report.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use vipubmed_core::metrics::{
    self, corpus_bleu, render_table, rouge_l, MacroF1Options, Metric, MetricError, MetricReport, ALL_DOMAINS,
};
use vipubmed_core::tsv;

use super::{create, finish, plan, write_json};
use crate::{data, print_json, CliError, Context, EvalArgs, MetricArg, Outcome, ReportArgs};

fn read_lines(path: &Path) -> Result<Vec<String>, CliError> {
    let text = std::fs::read_to_string(path).map_err(data(path.display()))?;
    Ok(text.lines().map(str::to_owned).collect())
}

/// (hypothesis, reference, domain) triples from either input style.
fn read_triples(a: &EvalArgs) -> Result<Vec<(String, String, String)>, CliError> {
    if let Some(path) = &a.tsv {
        return read_lines(path)?
            .into_iter()
            .enumerate()
            .map(|(i, line)| {
                let cols: Vec<&str> = line.split('\t').collect();
                match cols.as_slice() {
                    [h, r, d] => {
                        let field = |s: &str| {
                            tsv::unescape(s).map_err(|e| CliError::Data(format!("{} line {}: {e}", path.display(), i + 1)))
                        };
                        Ok((field(h)?, field(r)?, field(d)?))
                    }
                    _ => Err(CliError::Data(format!(
                        "{} line {}: expected 3 tab-separated columns, found {}",
                        path.display(),
                        i + 1,
                        cols.len()
                    ))),
                }
            })
            .collect();
    }
    let (hyp, reference) = (a.hyp.as_ref().expect("clap"), a.reference.as_ref().expect("clap"));
    let h = read_lines(hyp)?;
    let r = read_lines(reference)?;
    if h.len() != r.len() {
        return Err(CliError::Data(format!(
            "{} has {} lines but {} has {}",
            hyp.display(),
            h.len(),
            reference.display(),
            r.len()
        )));
    }
    Ok(h.into_iter()
        .zip(r)
        .map(|(h, r)| (h, r, ALL_DOMAINS.to_owned()))
        .collect())
}

fn score(
    metric: MetricArg,
    pairs: &[(&str, &str)],
    labels: &[String],
    opts: MacroF1Options,
) -> Result<f64, MetricError> {
    let hyps: Vec<&str> = pairs.iter().map(|p| p.0).collect();
    let refs: Vec<&str> = pairs.iter().map(|p| p.1).collect();
    match metric {
        MetricArg::Bleu => corpus_bleu::<f64, _>(&hyps, &refs),
        MetricArg::RougeL => {
            if pairs.is_empty() {
                return Err(MetricError::Empty("rouge_l"));
            }
            let mut empty = 0;
            let total: f64 = pairs
                .iter()
                .map(|(h, r)| {
                    let s = rouge_l::<f64>(h, r);
                    empty += s.empty_side as usize;
                    s.f1
                })
                .sum();
            if empty > 0 {
                log::warn!("{empty} segment pairs had an empty side and scored 0");
            }
            Ok(total / pairs.len() as f64)
        }
        MetricArg::MacroF1 => {
            let p: Vec<String> = hyps.iter().map(|s| s.trim().to_owned()).collect();
            let g: Vec<String> = refs.iter().map(|s| s.trim().to_owned()).collect();
            metrics::macro_f1::<f64, String>(&p, &g, labels, opts)
        }
        MetricArg::Accuracy => {
            let p: Vec<&str> = hyps.iter().map(|s| s.trim()).collect();
            let g: Vec<&str> = refs.iter().map(|s| s.trim()).collect();
            metrics::accuracy::<f64, _>(&p, &g)
        }
    }
}

fn metric_of(m: MetricArg) -> Metric {
    match m {
        MetricArg::Bleu => Metric::Bleu,
        MetricArg::RougeL => Metric::RougeL,
        MetricArg::MacroF1 => Metric::MacroF1,
        MetricArg::Accuracy => Metric::Accuracy,
    }
}

pub fn eval(ctx: &Context, a: EvalArgs) -> Result<Outcome, CliError> {
    let input = a.tsv.clone().or(a.hyp.clone()).expect("clap requires an input");
    let dataset = a.dataset.clone().unwrap_or_else(|| {
        input
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "dataset".into())
    });
    let mut inputs = vec![input];
    inputs.extend(a.reference.clone());
    let settings = serde_json::json!({
        "dataset": dataset,
        "metrics": a.metric.iter().map(|m| metric_of(*m)).collect::<Vec<_>>(),
        "labels": a.labels,
        "include_absent_classes": !a.exclude_absent_classes,
    });
    if plan(ctx, "eval", inputs, a.out.iter().cloned().collect(), settings) {
        return Ok(Outcome::Done);
    }
    let triples = read_triples(&a)?;
    let labels: Vec<String> = if a.labels.is_empty() {
        let set: BTreeSet<String> = triples
            .iter()
            .flat_map(|(h, r, _)| [h.trim().to_owned(), r.trim().to_owned()])
            .collect();
        set.into_iter().collect()
    } else {
        a.labels.iter().map(|l| l.trim().to_owned()).collect()
    };
    let opts = MacroF1Options {
        include_absent_classes: !a.exclude_absent_classes,
    };
    let mut by_domain: BTreeMap<&str, Vec<(&str, &str)>> = BTreeMap::new();
    for (h, r, d) in &triples {
        by_domain.entry(d.as_str()).or_default().push((h, r));
    }
    let everything: Vec<(&str, &str)> = triples.iter().map(|(h, r, _)| (h.as_str(), r.as_str())).collect();
    let only_all = by_domain.len() == 1 && by_domain.contains_key(ALL_DOMAINS);

    let mut metrics_requested = a.metric.clone();
    metrics_requested.sort();
    metrics_requested.dedup();
    let mut reports: Vec<MetricReport> = Vec::new();
    for m in metrics_requested {
        let mut groups: Vec<(&str, &[(&str, &str)])> = Vec::new();
        if !only_all {
            groups.extend(
                by_domain
                    .iter()
                    .filter(|(d, _)| **d != ALL_DOMAINS)
                    .map(|(d, p)| (*d, p.as_slice())),
            );
        }
        groups.push((ALL_DOMAINS, &everything));
        for (domain, pairs) in groups {
            let value = score(m, pairs, &labels, opts).map_err(data(format!("{dataset}/{domain}")))?;
            reports.push(MetricReport {
                dataset: dataset.clone(),
                domain: domain.to_owned(),
                metric: metric_of(m),
                value,
                support: pairs.len() as u64,
            });
        }
    }
    if let Some(out) = &a.out {
        write_json(out, &reports)?;
    }
    if a.table {
        print!("{}", render_table(&reports));
    } else {
        print_json(&reports);
    }
    Ok(Outcome::Done)
}

pub fn report(ctx: &Context, a: ReportArgs) -> Result<Outcome, CliError> {
    if plan(ctx, "report", a.inputs.clone(), a.out.iter().cloned().collect(), serde_json::json!({})) {
        return Ok(Outcome::Done);
    }
    let mut reports: Vec<MetricReport> = Vec::new();
    for p in &a.inputs {
        let text = std::fs::read_to_string(p).map_err(data(p.display()))?;
        let batch: Vec<MetricReport> = serde_json::from_str(&text).map_err(data(p.display()))?;
        if let Some(bad) = batch.iter().find(|r| !r.is_valid()) {
            return Err(CliError::Data(format!(
                "{}: {} {} value {} is out of range",
                p.display(),
                bad.dataset,
                bad.metric,
                bad.value
            )));
        }
        reports.extend(batch);
    }
    let table = render_table(&reports);
    if let Some(out) = &a.out {
        let mut f = create(out)?;
        std::io::Write::write_all(&mut f, table.as_bytes()).map_err(data(out.display()))?;
        finish(f, out)?;
    }
    print!("{table}");
    Ok(Outcome::Done)
}
