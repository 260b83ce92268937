//! Corpus BLEU, ROUGE-L, macro-F1 and accuracy.
//!
//! The count-ratio metrics are generic over [`Scalar`], so they can be
//! computed exactly with [`crate::Rational`] as well as in floating point.
//! BLEU involves `exp`/`ln` and is generic over [`num_traits::Float`].

use std::collections::{BTreeMap, HashMap};
use std::fmt::{self, Debug, Write as _};
use std::hash::Hash;

use num_traits::{Float, FromPrimitive, Num, ToPrimitive};
use serde::{Deserialize, Serialize};

use crate::text;

pub const MAX_NGRAM: usize = 4;

/// Numeric type a ratio metric can be computed in.
pub trait Scalar: Num + Clone + PartialOrd + Debug + FromPrimitive + ToPrimitive {
    fn from_count(n: u64) -> Self {
        Self::from_u64(n).expect("count representable in scalar type")
    }

    fn ratio(num: u64, den: u64) -> Self {
        Self::from_count(num) / Self::from_count(den)
    }
}

impl<T: Num + Clone + PartialOrd + Debug + FromPrimitive + ToPrimitive> Scalar for T {}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum MetricError {
    #[error("{what}: {left} hypotheses/predictions vs {right} references/golds")]
    LengthMismatch {
        what: &'static str,
        left: usize,
        right: usize,
    },
    #[error("{0}: nothing to evaluate")]
    Empty(&'static str),
    #[error("label {0:?} is not in the label set")]
    UnknownLabel(String),
}

fn check_lengths(what: &'static str, left: usize, right: usize) -> Result<(), MetricError> {
    if left != right {
        return Err(MetricError::LengthMismatch { what, left, right });
    }
    if left == 0 {
        return Err(MetricError::Empty(what));
    }
    Ok(())
}

/// Sufficient statistics for corpus BLEU; adding two of them is the same as
/// scoring the concatenated corpora.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BleuStats {
    pub matches: [u64; MAX_NGRAM],
    pub totals: [u64; MAX_NGRAM],
    pub hyp_len: u64,
    pub ref_len: u64,
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], u64> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for gram in tokens.windows(n) {
            *counts.entry(gram).or_insert(0) += 1;
        }
    }
    counts
}

impl BleuStats {
    pub fn from_segment(hypothesis: &str, reference: &str) -> Self {
        let hyp = text::tokenize(hypothesis);
        let reference = text::tokenize(reference);
        let mut stats = BleuStats {
            hyp_len: hyp.len() as u64,
            ref_len: reference.len() as u64,
            ..BleuStats::default()
        };
        for n in 1..=MAX_NGRAM {
            let hyp_counts = ngram_counts(&hyp, n);
            let ref_counts = ngram_counts(&reference, n);
            stats.totals[n - 1] = hyp.len().saturating_sub(n - 1) as u64;
            stats.matches[n - 1] = hyp_counts
                .iter()
                .map(|(gram, &c)| c.min(ref_counts.get(gram).copied().unwrap_or(0)))
                .sum();
        }
        stats
    }

    pub fn add(&mut self, other: &BleuStats) {
        for n in 0..MAX_NGRAM {
            self.matches[n] += other.matches[n];
            self.totals[n] += other.totals[n];
        }
        self.hyp_len += other.hyp_len;
        self.ref_len += other.ref_len;
    }

    /// Unsmoothed BLEU on a 0–100 scale. Any zero n-gram precision gives 0.
    pub fn score<F: Float + FromPrimitive>(&self) -> F {
        let zero = F::zero();
        if self.hyp_len == 0 {
            return zero;
        }
        let c = |v: u64| F::from_u64(v).expect("count fits in float");
        let mut log_sum = zero;
        for n in 0..MAX_NGRAM {
            if self.matches[n] == 0 || self.totals[n] == 0 {
                return zero;
            }
            log_sum = log_sum + (c(self.matches[n]) / c(self.totals[n])).ln();
        }
        let mean = log_sum / c(MAX_NGRAM as u64);
        let brevity = if self.hyp_len >= self.ref_len {
            zero
        } else {
            F::one() - c(self.ref_len) / c(self.hyp_len)
        };
        c(100) * (mean + brevity).exp()
    }
}

/// Corpus-level BLEU over parallel hypothesis/reference lists.
pub fn corpus_bleu<F, S>(hypotheses: &[S], references: &[S]) -> Result<F, MetricError>
where
    F: Float + FromPrimitive,
    S: AsRef<str>,
{
    check_lengths("corpus_bleu", hypotheses.len(), references.len())?;
    let mut stats = BleuStats::default();
    for (h, r) in hypotheses.iter().zip(references) {
        stats.add(&BleuStats::from_segment(h.as_ref(), r.as_ref()));
    }
    Ok(stats.score())
}

/// Longest common subsequence length, two-row dynamic programme.
pub fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    if a.is_empty() || b.is_empty() {
        return 0;
    }
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RougeScore<S> {
    pub precision: S,
    pub recall: S,
    pub f1: S,
    /// Set when either side tokenized to nothing; all scores are then zero.
    pub empty_side: bool,
}

/// ROUGE-L with β = 1.
pub fn rouge_l<S: Scalar>(hypothesis: &str, reference: &str) -> RougeScore<S> {
    let hyp = text::tokenize(hypothesis);
    let reference = text::tokenize(reference);
    if hyp.is_empty() || reference.is_empty() {
        return RougeScore {
            precision: S::zero(),
            recall: S::zero(),
            f1: S::zero(),
            empty_side: true,
        };
    }
    let lcs = lcs_len(&hyp, &reference) as u64;
    let (h, r) = (hyp.len() as u64, reference.len() as u64);
    RougeScore {
        precision: S::ratio(lcs, h),
        recall: S::ratio(lcs, r),
        // 2PR/(P+R) simplifies to 2·lcs/(|h|+|r|)
        f1: S::ratio(2 * lcs, h + r),
        empty_side: false,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MacroF1Options {
    /// Whether classes absent from both predictions and golds count as F1 = 0.
    pub include_absent_classes: bool,
}

impl Default for MacroF1Options {
    fn default() -> Self {
        MacroF1Options {
            include_absent_classes: true,
        }
    }
}

/// Per-class F1 in `label_set` order.
pub fn per_class_f1<S, L>(
    predictions: &[L],
    golds: &[L],
    label_set: &[L],
) -> Result<Vec<(L, S, bool)>, MetricError>
where
    S: Scalar,
    L: Eq + Hash + Clone + Debug,
{
    check_lengths("macro_f1", predictions.len(), golds.len())?;
    let index: HashMap<&L, usize> = label_set.iter().enumerate().map(|(i, l)| (l, i)).collect();
    let lookup = |l: &L| {
        index
            .get(l)
            .copied()
            .ok_or_else(|| MetricError::UnknownLabel(format!("{l:?}")))
    };
    let k = label_set.len();
    let (mut tp, mut fp, mut fnn) = (vec![0u64; k], vec![0u64; k], vec![0u64; k]);
    for (p, g) in predictions.iter().zip(golds) {
        let (pi, gi) = (lookup(p)?, lookup(g)?);
        if pi == gi {
            tp[pi] += 1;
        } else {
            fp[pi] += 1;
            fnn[gi] += 1;
        }
    }
    Ok((0..k)
        .map(|i| {
            let denom = 2 * tp[i] + fp[i] + fnn[i];
            let present = denom > 0;
            let f1 = if present {
                S::ratio(2 * tp[i], denom)
            } else {
                S::zero()
            };
            (label_set[i].clone(), f1, present)
        })
        .collect())
}

/// Unweighted mean of per-class F1 over `label_set`.
pub fn macro_f1<S, L>(
    predictions: &[L],
    golds: &[L],
    label_set: &[L],
    opts: MacroF1Options,
) -> Result<S, MetricError>
where
    S: Scalar,
    L: Eq + Hash + Clone + Debug,
{
    let per_class = per_class_f1::<S, L>(predictions, golds, label_set)?;
    let counted: Vec<S> = per_class
        .into_iter()
        .filter(|(_, _, present)| *present || opts.include_absent_classes)
        .map(|(_, f1, _)| f1)
        .collect();
    if counted.is_empty() {
        return Err(MetricError::Empty("macro_f1"));
    }
    let n = S::from_count(counted.len() as u64);
    Ok(counted.into_iter().fold(S::zero(), |acc, x| acc + x) / n)
}

pub fn accuracy<S: Scalar, L: PartialEq>(predictions: &[L], golds: &[L]) -> Result<S, MetricError> {
    check_lengths("accuracy", predictions.len(), golds.len())?;
    let hits = predictions.iter().zip(golds).filter(|(p, g)| p == g).count() as u64;
    Ok(S::ratio(hits, golds.len() as u64))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Bleu,
    RougeL,
    MacroF1,
    Accuracy,
}

impl Metric {
    pub fn label(self) -> &'static str {
        match self {
            Metric::Bleu => "BLEU",
            Metric::RougeL => "RougeL",
            Metric::MacroF1 => "Mac-F1",
            Metric::Accuracy => "Acc",
        }
    }

    pub fn upper_bound(self) -> f64 {
        match self {
            Metric::Bleu => 100.0,
            _ => 1.0,
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport<V = f64> {
    pub dataset: String,
    pub domain: String,
    pub metric: Metric,
    pub value: V,
    pub support: u64,
}

impl<V: ToPrimitive> MetricReport<V> {
    pub fn is_valid(&self) -> bool {
        let Some(v) = self.value.to_f64() else {
            return false;
        };
        self.support >= 1 && (0.0..=self.metric.upper_bound()).contains(&v)
    }

    pub fn to_f64(&self) -> MetricReport<f64> {
        MetricReport {
            dataset: self.dataset.clone(),
            domain: self.domain.clone(),
            metric: self.metric,
            value: self.value.to_f64().unwrap_or(f64::NAN),
            support: self.support,
        }
    }
}

pub const ALL_DOMAINS: &str = "all";

/// One BLEU report per domain (sorted by name) followed by the `all`
/// aggregate over every pair.
pub fn eval_multidomain<F, S>(
    dataset: &str,
    triples: &[(S, S, S)],
) -> Result<Vec<MetricReport<F>>, MetricError>
where
    F: Float + FromPrimitive,
    S: AsRef<str>,
{
    if triples.is_empty() {
        return Err(MetricError::Empty("eval_multidomain"));
    }
    let mut by_domain: BTreeMap<&str, (BleuStats, u64)> = BTreeMap::new();
    let mut all = BleuStats::default();
    for (h, r, d) in triples {
        let s = BleuStats::from_segment(h.as_ref(), r.as_ref());
        let entry = by_domain.entry(d.as_ref()).or_default();
        entry.0.add(&s);
        entry.1 += 1;
        all.add(&s);
    }
    let mut reports: Vec<MetricReport<F>> = by_domain
        .into_iter()
        .map(|(domain, (stats, support))| MetricReport {
            dataset: dataset.to_owned(),
            domain: domain.to_owned(),
            metric: Metric::Bleu,
            value: stats.score(),
            support,
        })
        .collect();
    reports.push(MetricReport {
        dataset: dataset.to_owned(),
        domain: ALL_DOMAINS.to_owned(),
        metric: Metric::Bleu,
        value: all.score(),
        support: triples.len() as u64,
    });
    Ok(reports)
}

/// Plain-text table with one row per (dataset, domain) and one column per
/// metric. BLEU is printed on its 0–100 scale, the rest as percentages.
pub fn render_table(reports: &[MetricReport<f64>]) -> String {
    let mut metrics: Vec<Metric> = reports.iter().map(|r| r.metric).collect();
    metrics.sort();
    metrics.dedup();
    let mut rows: Vec<(String, String)> = Vec::new();
    let mut cells: HashMap<(String, String, Metric), f64> = HashMap::new();
    for r in reports {
        let key = (r.dataset.clone(), r.domain.clone());
        if !rows.contains(&key) {
            rows.push(key);
        }
        let scaled = match r.metric {
            Metric::Bleu => r.value,
            _ => r.value * 100.0,
        };
        cells.insert((r.dataset.clone(), r.domain.clone(), r.metric), scaled);
    }
    let mut header = vec!["Dataset".to_string(), "Domain".to_string()];
    header.extend(metrics.iter().map(|m| m.label().to_string()));
    let mut table = vec![header];
    for (dataset, domain) in &rows {
        let mut line = vec![dataset.clone(), domain.clone()];
        for m in &metrics {
            line.push(
                cells
                    .get(&(dataset.clone(), domain.clone(), *m))
                    .map(|v| format!("{v:.2}"))
                    .unwrap_or_else(|| "-".into()),
            );
        }
        table.push(line);
    }
    let widths: Vec<usize> = (0..table[0].len())
        .map(|c| table.iter().map(|row| row[c].chars().count()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for (i, row) in table.iter().enumerate() {
        for (c, cell) in row.iter().enumerate() {
            let pad = widths[c] - cell.chars().count();
            if c < 2 {
                let _ = write!(out, "{cell}{}", " ".repeat(pad));
            } else {
                let _ = write!(out, "{}{cell}", " ".repeat(pad));
            }
            out.push_str(if c + 1 < row.len() { "  " } else { "\n" });
        }
        if i == 0 {
            let total: usize = widths.iter().sum::<usize>() + 2 * (widths.len() - 1);
            out.push_str(&"-".repeat(total));
            out.push('\n');
        }
    }
    out
}
