//! MedNLI loading, machine translation, abbreviation refinement and export.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs::{self, File};
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::jsonl;
use crate::translate::{
    translate_batch, JobOutcome, RunOptions, TranslateError, TranslationJob, Translator,
};
use crate::tsv;

macro_rules! string_enum {
    ($name:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
        #[serde(rename_all = "snake_case")]
        pub enum $name {
            $($variant),+
        }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn as_str(self) -> &'static str {
                match self {
                    $($name::$variant => $text),+
                }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl FromStr for $name {
            type Err = String;

            fn from_str(s: &str) -> Result<Self, Self::Err> {
                match s {
                    $($text => Ok($name::$variant),)+
                    other => Err(other.to_owned()),
                }
            }
        }
    };
}

string_enum!(Label {
    Entailment => "entailment",
    Contradiction => "contradiction",
    Neutral => "neutral",
});

string_enum!(Split {
    Train => "train",
    Dev => "dev",
    Test => "test",
});

string_enum!(State {
    Source => "source",
    Machine => "machine",
    Refined => "refined",
});

string_enum!(Field {
    Premise => "premise",
    Hypothesis => "hypothesis",
});

#[derive(Debug, thiserror::Error)]
pub enum NliError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("{path}:{line}: {message}")]
    Record {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("record {uid}: unknown label {label:?}")]
    UnknownLabel { uid: String, label: String },
    #[error("duplicate uid {0}")]
    DuplicateUid(String),
    #[error("cannot infer split from {0}; name the file *train*, *dev* or *test*")]
    UnknownSplit(PathBuf),
    #[error("example {uid}: cannot move from {from} to {to}")]
    Transition { uid: String, from: State, to: State },
    #[error("export refused: {0}")]
    Export(String),
    #[error("lexicon line {line}: {message}")]
    Lexicon { line: usize, message: String },
    #[error(transparent)]
    Translate(#[from] TranslateError),
}

/// The English sentences an example was translated from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceText {
    pub premise: String,
    pub hypothesis: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NliExample {
    pub uid: String,
    pub premise: String,
    pub hypothesis: String,
    pub label: Label,
    pub split: Split,
    pub state: State,
    #[serde(default)]
    pub applied_rules: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub annotator: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<SourceText>,
}

impl NliExample {
    pub fn new(
        uid: impl Into<String>,
        premise: impl Into<String>,
        hypothesis: impl Into<String>,
        label: Label,
        split: Split,
    ) -> Self {
        NliExample {
            uid: uid.into(),
            premise: premise.into(),
            hypothesis: hypothesis.into(),
            label,
            split,
            state: State::Source,
            applied_rules: Vec::new(),
            annotator: None,
            source: None,
        }
    }

    pub fn text(&self, field: Field) -> &str {
        match field {
            Field::Premise => &self.premise,
            Field::Hypothesis => &self.hypothesis,
        }
    }

    fn transition(&self, to: State) -> Result<(), NliError> {
        let ok = matches!(
            (self.state, to),
            (State::Source, State::Machine) | (State::Machine, State::Refined)
        );
        if ok {
            Ok(())
        } else {
            Err(NliError::Transition {
                uid: self.uid.clone(),
                from: self.state,
                to,
            })
        }
    }

    /// Replaces both sentences with machine output, keeping the English.
    pub fn set_machine(&mut self, premise: String, hypothesis: String) -> Result<(), NliError> {
        self.transition(State::Machine)?;
        let premise_src = std::mem::replace(&mut self.premise, premise);
        let hypothesis_src = std::mem::replace(&mut self.hypothesis, hypothesis);
        self.source = Some(SourceText {
            premise: premise_src,
            hypothesis: hypothesis_src,
        });
        self.state = State::Machine;
        Ok(())
    }

    pub fn set_refined(
        &mut self,
        premise: String,
        hypothesis: String,
        applied_rules: Vec<String>,
        annotator: Option<String>,
    ) -> Result<(), NliError> {
        self.transition(State::Refined)?;
        self.premise = premise;
        self.hypothesis = hypothesis;
        self.applied_rules = applied_rules;
        self.annotator = annotator;
        self.state = State::Refined;
        Ok(())
    }
}

/// Per-split counts and label histograms.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitStats {
    pub splits: BTreeMap<Split, u64>,
    pub labels: BTreeMap<Split, BTreeMap<Label, u64>>,
    pub states: BTreeMap<State, u64>,
}

impl SplitStats {
    pub fn of(examples: &[NliExample]) -> Self {
        let mut stats = SplitStats::default();
        for ex in examples {
            *stats.splits.entry(ex.split).or_default() += 1;
            *stats
                .labels
                .entry(ex.split)
                .or_default()
                .entry(ex.label)
                .or_default() += 1;
            *stats.states.entry(ex.state).or_default() += 1;
        }
        stats
    }

    pub fn count(&self, split: Split) -> u64 {
        self.splits.get(&split).copied().unwrap_or(0)
    }

    pub fn label_totals(&self) -> BTreeMap<Label, u64> {
        let mut totals = BTreeMap::new();
        for per_split in self.labels.values() {
            for (l, n) in per_split {
                *totals.entry(*l).or_default() += n;
            }
        }
        totals
    }
}

/// MedNLI interchange record. Unknown fields are ignored.
#[derive(Debug, Deserialize)]
struct MedNliRecord {
    sentence1: Option<String>,
    sentence2: Option<String>,
    gold_label: Option<String>,
    #[serde(rename = "pairID")]
    pair_id: Option<String>,
}

pub fn split_from_name(path: &Path) -> Option<Split> {
    let name = path.file_name()?.to_string_lossy().to_lowercase();
    Split::ALL
        .iter()
        .copied()
        .find(|s| name.contains(s.as_str()))
}

fn record_err(path: &Path, line: usize, message: impl Into<String>) -> NliError {
    NliError::Record {
        path: path.to_owned(),
        line,
        message: message.into(),
    }
}

fn parse_label(uid: &str, raw: &str) -> Result<Label, NliError> {
    raw.parse().map_err(|label| NliError::UnknownLabel {
        uid: uid.to_owned(),
        label,
    })
}

fn load_jsonl(path: &Path, split: Split) -> Result<Vec<NliExample>, NliError> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let rec: MedNliRecord =
            serde_json::from_str(&line).map_err(|e| record_err(path, line_no, e.to_string()))?;
        let uid = rec
            .pair_id
            .unwrap_or_else(|| format!("{split}-{line_no}"));
        let missing = |f: &str| record_err(path, line_no, format!("record {uid}: missing field {f}"));
        let premise = rec.sentence1.ok_or_else(|| missing("sentence1"))?;
        let hypothesis = rec.sentence2.ok_or_else(|| missing("sentence2"))?;
        let raw_label = rec.gold_label.ok_or_else(|| missing("gold_label"))?;
        let label = parse_label(&uid, &raw_label)?;
        out.push(NliExample::new(uid, premise, hypothesis, label, split));
    }
    Ok(out)
}

fn load_tsv(path: &Path, split: Split) -> Result<Vec<NliExample>, NliError> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let line_no = i + 1;
        if line.is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 5 {
            return Err(record_err(
                path,
                line_no,
                format!("expected 5 columns (uid, premise, hypothesis, label, state), found {}", cols.len()),
            ));
        }
        let field = |s: &str| tsv::unescape(s).map_err(|m| record_err(path, line_no, m));
        let uid = field(cols[0])?;
        let label = parse_label(&uid, cols[3])?;
        out.push(NliExample::new(
            uid,
            field(cols[1])?,
            field(cols[2])?,
            label,
            split,
        ));
    }
    Ok(out)
}

/// Loads one MedNLI-shaped file (`.jsonl` or this toolkit's `.tsv`), or a
/// directory holding one file per split. Every example starts in
/// [`State::Source`].
pub fn load_mednli(path: &Path, split: Option<Split>) -> Result<(Vec<NliExample>, SplitStats), NliError> {
    let mut examples = Vec::new();
    if path.is_dir() {
        let mut files: Vec<(Split, PathBuf)> = Vec::new();
        for entry in fs::read_dir(path)? {
            let p = entry?.path();
            let ext = p.extension().and_then(|e| e.to_str()).unwrap_or("");
            if !matches!(ext, "jsonl" | "tsv") {
                continue;
            }
            if let Some(s) = split_from_name(&p) {
                files.push((s, p));
            }
        }
        files.sort();
        for (s, p) in files {
            examples.extend(load_one(&p, s)?);
        }
    } else {
        let s = split
            .or_else(|| split_from_name(path))
            .ok_or_else(|| NliError::UnknownSplit(path.to_owned()))?;
        examples = load_one(path, s)?;
    }
    let mut seen = HashSet::new();
    for ex in &examples {
        if !seen.insert(ex.uid.as_str()) {
            return Err(NliError::DuplicateUid(ex.uid.clone()));
        }
    }
    let stats = SplitStats::of(&examples);
    Ok((examples, stats))
}

fn load_one(path: &Path, split: Split) -> Result<Vec<NliExample>, NliError> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("tsv") => load_tsv(path, split),
        _ => load_jsonl(path, split),
    }
}

#[derive(Debug)]
pub struct NliTranslation {
    pub outcome: JobOutcome,
    /// Examples left in source state because a sentence failed to translate.
    pub failed_uids: Vec<String>,
}

fn item_id(uid: &str, field: Field) -> String {
    format!("{uid}#{field}")
}

/// Machine-translates premise and hypothesis of every example in place.
/// Labels, uids and splits are untouched; examples whose sentences could not
/// be translated stay in source state and are listed in `failed_uids`.
pub fn translate_nli<T: Translator + ?Sized>(
    examples: &mut [NliExample],
    backend: &T,
    opts: &RunOptions,
    checkpoint: Option<&Path>,
) -> Result<NliTranslation, NliError> {
    for ex in examples.iter() {
        ex.transition(State::Machine)?;
    }
    if examples.is_empty() {
        return Ok(NliTranslation {
            outcome: JobOutcome {
                status: crate::translate::JobStatus::Complete,
                translated_this_run: 0,
                failed: 0,
                backend_calls: 0,
            },
            failed_uids: Vec::new(),
        });
    }
    let items: Vec<(String, String)> = examples
        .iter()
        .flat_map(|ex| {
            [
                (item_id(&ex.uid, Field::Premise), ex.premise.clone()),
                (item_id(&ex.uid, Field::Hypothesis), ex.hypothesis.clone()),
            ]
        })
        .collect();
    let mut job = TranslationJob::new(items)?;
    if let Some(p) = checkpoint {
        job = job.with_checkpoint(p)?;
    }
    let outcome = translate_batch(backend, &mut job, opts)?;
    let mut failed_uids = Vec::new();
    for ex in examples.iter_mut() {
        let premise = job.translation(&item_id(&ex.uid, Field::Premise));
        let hypothesis = job.translation(&item_id(&ex.uid, Field::Hypothesis));
        match (premise, hypothesis) {
            (Some(p), Some(h)) => ex.set_machine(p.to_owned(), h.to_owned())?,
            _ => failed_uids.push(ex.uid.clone()),
        }
    }
    Ok(NliTranslation {
        outcome,
        failed_uids,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AbbrevAction {
    KeepEnglish,
    ExpandVietnamese,
    ReplaceVietnameseAbbrev,
}

impl AbbrevAction {
    pub fn as_str(self) -> &'static str {
        match self {
            AbbrevAction::KeepEnglish => "keep_english",
            AbbrevAction::ExpandVietnamese => "expand_vietnamese",
            AbbrevAction::ReplaceVietnameseAbbrev => "replace_vietnamese_abbrev",
        }
    }
}

impl FromStr for AbbrevAction {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "keep_english" => Ok(AbbrevAction::KeepEnglish),
            "expand_vietnamese" => Ok(AbbrevAction::ExpandVietnamese),
            "replace_vietnamese_abbrev" => Ok(AbbrevAction::ReplaceVietnameseAbbrev),
            other => Err(format!("unknown action {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AbbrevRule {
    pub rule_id: String,
    pub pattern: String,
    #[serde(default = "default_true")]
    pub case_sensitive: bool,
    pub action: AbbrevAction,
    pub replacement: String,
    #[serde(default)]
    pub notes: String,
}

fn default_true() -> bool {
    true
}

/// A position in a sentence where a rule fired (byte offsets into the
/// sentence the rules were applied to).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RuleHit {
    pub rule_id: String,
    pub start: usize,
    pub end: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AbbrevLexicon {
    rules: Vec<AbbrevRule>,
    // indices into `rules`, longest pattern first
    #[serde(skip)]
    order: Vec<usize>,
}

fn is_word_char(c: char) -> bool {
    c.is_alphanumeric() || c == '_'
}

fn chars_eq(a: char, b: char, case_sensitive: bool) -> bool {
    a == b || (!case_sensitive && a.to_lowercase().eq(b.to_lowercase()))
}

/// Byte length of `pattern` matched at the start of `rest`, if any.
fn match_at(rest: &str, pattern: &str, case_sensitive: bool) -> Option<usize> {
    let mut text = rest.char_indices();
    for p in pattern.chars() {
        let (_, c) = text.next()?;
        if !chars_eq(c, p, case_sensitive) {
            return None;
        }
    }
    Some(text.next().map(|(i, _)| i).unwrap_or(rest.len()))
}

impl AbbrevLexicon {
    pub fn new(rules: Vec<AbbrevRule>) -> Result<Self, NliError> {
        let mut ids = HashSet::new();
        let mut patterns = HashSet::new();
        for (i, r) in rules.iter().enumerate() {
            let bad = |message: String| NliError::Lexicon { line: i + 1, message };
            if r.rule_id.is_empty() || r.pattern.trim().is_empty() {
                return Err(bad("rule id and pattern must be non-empty".into()));
            }
            let needs_replacement = r.action != AbbrevAction::KeepEnglish;
            if needs_replacement == r.replacement.is_empty() {
                return Err(bad(format!(
                    "rule {}: replacement must be {} for {}",
                    r.rule_id,
                    if needs_replacement { "non-empty" } else { "empty" },
                    r.action.as_str()
                )));
            }
            if !ids.insert(r.rule_id.clone()) {
                return Err(bad(format!("duplicate rule id {}", r.rule_id)));
            }
            let key = if r.case_sensitive {
                r.pattern.clone()
            } else {
                r.pattern.to_lowercase()
            };
            if !patterns.insert(key) {
                return Err(bad(format!("duplicate pattern {:?}", r.pattern)));
            }
        }
        let mut order: Vec<usize> = (0..rules.len()).collect();
        order.sort_by_key(|&i| std::cmp::Reverse(rules[i].pattern.chars().count()));
        Ok(AbbrevLexicon { rules, order })
    }

    pub fn rules(&self) -> &[AbbrevRule] {
        &self.rules
    }

    pub fn is_empty(&self) -> bool {
        self.rules.is_empty()
    }

    /// Parses `rule_id<TAB>pattern<TAB>action<TAB>replacement<TAB>notes`
    /// with an optional sixth `case_sensitive` column (`true`/`false`).
    /// Blank lines and lines starting with `#` are skipped.
    pub fn parse_tsv(src: &str) -> Result<Self, NliError> {
        let mut rules = Vec::new();
        for (i, line) in src.lines().enumerate() {
            let line_no = i + 1;
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = |message: String| NliError::Lexicon { line: line_no, message };
            let cols: Vec<&str> = line.split('\t').collect();
            if !(cols.len() == 5 || cols.len() == 6) {
                return Err(bad(format!("expected 5 or 6 columns, found {}", cols.len())));
            }
            let case_sensitive = match cols.get(5).map(|s| s.trim()) {
                None | Some("") | Some("true") => true,
                Some("false") => false,
                Some(other) => return Err(bad(format!("case_sensitive must be true/false, got {other:?}"))),
            };
            rules.push(AbbrevRule {
                rule_id: cols[0].to_owned(),
                pattern: tsv::unescape(cols[1]).map_err(bad)?,
                action: cols[2].parse().map_err(bad)?,
                replacement: tsv::unescape(cols[3]).map_err(bad)?,
                notes: tsv::unescape(cols[4]).map_err(bad)?,
                case_sensitive,
            });
        }
        Self::new(rules)
    }

    pub fn load(path: &Path) -> Result<Self, NliError> {
        Self::parse_tsv(&fs::read_to_string(path)?)
    }

    /// Rules whose replacement text would itself trigger a text-changing
    /// rule, breaking idempotence. Returns `(rule_id, triggered_rule_id)`.
    pub fn idempotence_conflicts(&self) -> Vec<(String, String)> {
        let mut out = Vec::new();
        for r in &self.rules {
            if r.replacement.is_empty() {
                continue;
            }
            for hit in self.find(&r.replacement) {
                let other = self.rule(&hit.rule_id);
                if other.action != AbbrevAction::KeepEnglish {
                    out.push((r.rule_id.clone(), hit.rule_id));
                }
            }
        }
        out
    }

    fn rule(&self, id: &str) -> &AbbrevRule {
        self.rules.iter().find(|r| r.rule_id == id).expect("hit refers to a known rule")
    }

    /// Longest-match-first, left-to-right, non-overlapping matches on word
    /// boundaries.
    pub fn find(&self, sentence: &str) -> Vec<RuleHit> {
        let mut hits = Vec::new();
        let mut prev: Option<char> = None;
        let mut pos = 0;
        while pos < sentence.len() {
            let rest = &sentence[pos..];
            let ch = rest.chars().next().expect("pos is on a char boundary");
            let left_ok = prev.map_or(true, |c| !is_word_char(c)) || !is_word_char(ch);
            if left_ok {
                let found = self.order.iter().find_map(|&i| {
                    let rule = &self.rules[i];
                    let len = match_at(rest, &rule.pattern, rule.case_sensitive)?;
                    let last = rest[..len].chars().next_back()?;
                    let right_ok = rest[len..]
                        .chars()
                        .next()
                        .map_or(true, |c| !is_word_char(c) || !is_word_char(last));
                    right_ok.then_some((i, len))
                });
                if let Some((i, len)) = found {
                    hits.push(RuleHit {
                        rule_id: self.rules[i].rule_id.clone(),
                        start: pos,
                        end: pos + len,
                    });
                    prev = rest[..len].chars().next_back();
                    pos += len;
                    continue;
                }
            }
            prev = Some(ch);
            pos += ch.len_utf8();
        }
        hits
    }
}

/// Applies the lexicon to one sentence, returning the rewritten sentence
/// and the ids of every rule that fired (in order, including
/// `keep_english` hits that leave the text unchanged).
pub fn apply_abbrev_rules(sentence: &str, lexicon: &AbbrevLexicon) -> (String, Vec<String>) {
    let (text, hits) = apply_with_hits(sentence, lexicon);
    (text, hits.into_iter().map(|h| h.rule_id).collect())
}

pub fn apply_with_hits(sentence: &str, lexicon: &AbbrevLexicon) -> (String, Vec<RuleHit>) {
    let hits = lexicon.find(sentence);
    let mut out = String::with_capacity(sentence.len());
    let mut cursor = 0;
    for h in &hits {
        let rule = lexicon.rule(&h.rule_id);
        out.push_str(&sentence[cursor..h.start]);
        match rule.action {
            AbbrevAction::KeepEnglish => out.push_str(&sentence[h.start..h.end]),
            _ => out.push_str(&rule.replacement),
        }
        cursor = h.end;
    }
    out.push_str(&sentence[cursor..]);
    (out, hits)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExportFormat {
    Jsonl,
    Tsv,
    Both,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExportManifest {
    pub total: u64,
    pub by_split: BTreeMap<Split, u64>,
    pub by_state: BTreeMap<State, u64>,
    pub label_histogram: BTreeMap<Split, BTreeMap<Label, u64>>,
    /// File names relative to the export directory.
    pub files: Vec<PathBuf>,
}

/// ViMedNLI JSON-lines record: the MedNLI shape plus refinement state.
#[derive(Debug, Serialize, Deserialize)]
pub struct ExportRecord {
    #[serde(rename = "pairID")]
    pub pair_id: String,
    pub sentence1: String,
    pub sentence2: String,
    pub gold_label: Label,
    pub state: State,
    pub applied_rules: Vec<String>,
}

/// Checks the export gate without writing anything.
pub fn check_exportable(examples: &[NliExample], allow_mixed: bool) -> Result<(), NliError> {
    if let Some(ex) = examples.iter().find(|e| e.state == State::Source) {
        return Err(NliError::Export(format!("example {} has not been translated", ex.uid)));
    }
    let states: HashSet<State> = examples.iter().map(|e| e.state).collect();
    if states.len() > 1 && !allow_mixed {
        let refined = examples.iter().filter(|e| e.state == State::Refined).count();
        return Err(NliError::Export(format!(
            "{refined} of {} examples refined; pass allow_mixed to export anyway",
            examples.len()
        )));
    }
    Ok(())
}

/// Writes one file per split (`vimednli_<split>.jsonl` / `.tsv`) plus
/// `manifest.json` into `dir`.
pub fn export_vimednli(
    examples: &[NliExample],
    dir: &Path,
    format: ExportFormat,
    allow_mixed: bool,
) -> Result<ExportManifest, NliError> {
    check_exportable(examples, allow_mixed)?;
    fs::create_dir_all(dir)?;
    let stats = SplitStats::of(examples);
    let mut files = Vec::new();
    for &split in Split::ALL {
        let subset = examples.iter().filter(|e| e.split == split);
        if matches!(format, ExportFormat::Jsonl | ExportFormat::Both) {
            let name = PathBuf::from(format!("vimednli_{split}.jsonl"));
            let path = dir.join(&name);
            let mut out = BufWriter::new(File::create(&path)?);
            for ex in subset.clone() {
                jsonl::write_record(
                    &mut out,
                    &ExportRecord {
                        pair_id: ex.uid.clone(),
                        sentence1: ex.premise.clone(),
                        sentence2: ex.hypothesis.clone(),
                        gold_label: ex.label,
                        state: ex.state,
                        applied_rules: ex.applied_rules.clone(),
                    },
                )?;
            }
            out.flush()?;
            files.push(name);
        }
        if matches!(format, ExportFormat::Tsv | ExportFormat::Both) {
            let name = PathBuf::from(format!("vimednli_{split}.tsv"));
            let path = dir.join(&name);
            let mut out = BufWriter::new(File::create(&path)?);
            for ex in subset {
                writeln!(
                    out,
                    "{}\t{}\t{}\t{}\t{}",
                    tsv::escape(&ex.uid),
                    tsv::escape(&ex.premise),
                    tsv::escape(&ex.hypothesis),
                    ex.label,
                    ex.state
                )?;
            }
            out.flush()?;
            files.push(name);
        }
    }
    let manifest = ExportManifest {
        total: examples.len() as u64,
        by_split: stats.splits,
        by_state: stats.states,
        label_histogram: stats.labels,
        files,
    };
    let manifest_path = dir.join("manifest.json");
    let mut out = BufWriter::new(File::create(&manifest_path)?);
    serde_json::to_writer_pretty(&mut out, &manifest).map_err(io::Error::from)?;
    out.write_all(b"\n")?;
    out.flush()?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::translate::MockLexicon;

    fn rule(id: &str, pattern: &str, action: AbbrevAction, replacement: &str) -> AbbrevRule {
        AbbrevRule {
            rule_id: id.into(),
            pattern: pattern.into(),
            case_sensitive: true,
            action,
            replacement: replacement.into(),
            notes: String::new(),
        }
    }

    fn sample_lexicon() -> AbbrevLexicon {
        AbbrevLexicon::new(vec![
            rule("qrs", "QRS", AbbrevAction::KeepEnglish, ""),
            rule("pmh", "PMH", AbbrevAction::ExpandVietnamese, "tiền sử bệnh"),
            rule("postop", "post op", AbbrevAction::ExpandVietnamese, "hậu phẫu thuật"),
        ])
        .unwrap()
    }

    #[test]
    fn pmh_expands() {
        let (s, applied) = apply_abbrev_rules("không có PMH", &sample_lexicon());
        assert_eq!(s, "không có tiền sử bệnh");
        assert_eq!(applied, vec!["pmh"]);
    }

    #[test]
    fn qrs_is_kept_but_logged() {
        let (s, applied) = apply_abbrev_rules("thay đổi về QRS", &sample_lexicon());
        assert_eq!(s, "thay đổi về QRS");
        assert_eq!(applied, vec!["qrs"]);
        let (s, applied) = apply_abbrev_rules("Điện tâm đồ cho thấy không có thay đổi về QRS.", &sample_lexicon());
        assert!(s.ends_with("QRS."));
        assert_eq!(applied, vec!["qrs"]);
    }

    #[test]
    fn empty_lexicon_is_identity() {
        let (s, applied) = apply_abbrev_rules("không có PMH", &AbbrevLexicon::default());
        assert_eq!(s, "không có PMH");
        assert!(applied.is_empty());
    }

    #[test]
    fn respects_word_boundaries() {
        let lex = sample_lexicon();
        let (s, applied) = apply_abbrev_rules("PMHx xPMH PMH-", &lex);
        assert_eq!(s, "PMHx xPMH tiền sử bệnh-");
        assert_eq!(applied, vec!["pmh"]);
    }

    #[test]
    fn longest_match_wins() {
        let lex = AbbrevLexicon::new(vec![
            rule("h", "H", AbbrevAction::ExpandVietnamese, "giờ"),
            rule("pmh", "PMH", AbbrevAction::ExpandVietnamese, "tiền sử bệnh"),
            rule("pmh2", "PMH H", AbbrevAction::ExpandVietnamese, "X"),
        ])
        .unwrap();
        let (s, applied) = apply_abbrev_rules("PMH H; PMH; H", &lex);
        assert_eq!(s, "X; tiền sử bệnh; giờ");
        assert_eq!(applied, vec!["pmh2", "pmh", "h"]);
    }

    #[test]
    fn case_insensitive_rules() {
        let mut r = rule("bp", "bp", AbbrevAction::ReplaceVietnameseAbbrev, "HA");
        r.case_sensitive = false;
        let lex = AbbrevLexicon::new(vec![r]).unwrap();
        assert_eq!(apply_abbrev_rules("BP 120, bp", &lex).0, "HA 120, HA");
        let strict = AbbrevLexicon::new(vec![rule("bp", "bp", AbbrevAction::ReplaceVietnameseAbbrev, "HA")]).unwrap();
        assert_eq!(apply_abbrev_rules("BP 120, bp", &strict).0, "BP 120, HA");
    }

    #[test]
    fn lexicon_validation() {
        assert!(AbbrevLexicon::new(vec![rule("a", "A", AbbrevAction::ExpandVietnamese, "")]).is_err());
        assert!(AbbrevLexicon::new(vec![rule("a", "A", AbbrevAction::KeepEnglish, "x")]).is_err());
        assert!(AbbrevLexicon::new(vec![
            rule("a", "A", AbbrevAction::KeepEnglish, ""),
            rule("b", "A", AbbrevAction::ExpandVietnamese, "x"),
        ])
        .is_err());
    }

    #[test]
    fn tsv_lexicon() {
        let src = "# comment\nqrs\tQRS\tkeep_english\t\tused in both\npmh\tPMH\texpand_vietnamese\ttiền sử bệnh\t\nbp\tbp\treplace_vietnamese_abbrev\tHA\t\tfalse\n";
        let lex = AbbrevLexicon::parse_tsv(src).unwrap();
        assert_eq!(lex.rules().len(), 3);
        assert!(!lex.rules()[2].case_sensitive);
        assert!(AbbrevLexicon::parse_tsv("x\tX\tnope\tY\t\n").is_err());
        assert!(AbbrevLexicon::parse_tsv("x\tX\n").is_err());
    }

    #[test]
    fn idempotence_check() {
        assert!(sample_lexicon().idempotence_conflicts().is_empty());
        let lex = AbbrevLexicon::new(vec![
            rule("qrs", "QRS", AbbrevAction::ExpandVietnamese, "phức độ QRS"),
        ])
        .unwrap();
        assert_eq!(lex.idempotence_conflicts(), vec![("qrs".to_string(), "qrs".to_string())]);
        let s1 = apply_abbrev_rules("không có PMH, QRS bình thường", &sample_lexicon()).0;
        assert_eq!(apply_abbrev_rules(&s1, &sample_lexicon()).0, s1);
    }

    fn fixture() -> Vec<NliExample> {
        let labels = [Label::Entailment, Label::Contradiction, Label::Neutral];
        (0..30)
            .map(|i| {
                let split = match i {
                    0..=19 => Split::Train,
                    20..=24 => Split::Dev,
                    _ => Split::Test,
                };
                NliExample::new(format!("u{i}"), format!("Patient has no PMH {i}"), format!("fever {i}"), labels[i % 3], split)
            })
            .collect()
    }

    #[test]
    fn state_machine() {
        let mut ex = fixture().remove(0);
        assert!(ex.set_refined("a".into(), "b".into(), vec![], None).is_err());
        ex.set_machine("p".into(), "h".into()).unwrap();
        assert_eq!(ex.source.as_ref().unwrap().premise, "Patient has no PMH 0");
        assert!(ex.set_machine("p".into(), "h".into()).is_err());
        ex.set_refined("p2".into(), "h2".into(), vec!["pmh".into()], Some("ann".into())).unwrap();
        assert_eq!(ex.state, State::Refined);
    }

    #[test]
    fn translate_preserves_labels_and_uids() {
        let backend = MockLexicon::new([("fever".to_string(), "sốt".to_string())].into());
        let mut examples = fixture();
        let before: Vec<(String, Label, Split)> = examples.iter().map(|e| (e.uid.clone(), e.label, e.split)).collect();
        let res = translate_nli(&mut examples, &backend, &RunOptions::default(), None).unwrap();
        assert!(res.failed_uids.is_empty());
        let after: Vec<(String, Label, Split)> = examples.iter().map(|e| (e.uid.clone(), e.label, e.split)).collect();
        assert_eq!(before, after);
        assert!(examples.iter().all(|e| e.state == State::Machine));
        assert_eq!(examples[0].hypothesis, "sốt 0");

        let mut none: Vec<NliExample> = Vec::new();
        assert!(translate_nli(&mut none, &backend, &RunOptions::default(), None).unwrap().failed_uids.is_empty());
        // already machine-state input is refused
        assert!(translate_nli(&mut examples, &backend, &RunOptions::default(), None).is_err());
    }

    #[test]
    fn load_jsonl_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("mli_train_v1.jsonl");
        fs::write(
            &p,
            concat!(
                r#"{"sentence1":"a","sentence2":"b","gold_label":"entailment","pairID":"x1"}"#, "\n",
                r#"{"sentence1":"a","sentence2":"b","gold_label":"contradiction","pairID":"x2"}"#, "\n",
                r#"{"sentence1":"a","sentence2":"b","gold_label":"neutral","pairID":"x3","extra":1}"#, "\n",
            ),
        )
        .unwrap();
        let (ex, stats) = load_mednli(&p, None).unwrap();
        assert_eq!(ex.len(), 3);
        assert_eq!(stats.count(Split::Train), 3);
        assert_eq!(stats.label_totals().values().copied().collect::<Vec<_>>(), vec![1, 1, 1]);
        assert!(ex.iter().all(|e| e.state == State::Source));

        let bad = dir.path().join("mli_dev_v1.jsonl");
        fs::write(&bad, r#"{"sentence1":"a","sentence2":"b","gold_label":"maybe","pairID":"u-77"}"#).unwrap();
        match load_mednli(&bad, None) {
            Err(NliError::UnknownLabel { uid, label }) => {
                assert_eq!(uid, "u-77");
                assert_eq!(label, "maybe");
            }
            other => panic!("unexpected {other:?}"),
        }
        let missing = dir.path().join("other.jsonl");
        fs::write(&missing, r#"{"sentence1":"a","gold_label":"neutral"}"#).unwrap();
        assert!(matches!(load_mednli(&missing, Some(Split::Test)), Err(NliError::Record { .. })));
        assert!(matches!(load_mednli(&missing, None), Err(NliError::UnknownSplit(_))));
    }

    #[test]
    fn export_counts_and_gate() {
        let dir = tempfile::tempdir().unwrap();
        let mut examples = fixture();
        let load_hist = SplitStats::of(&examples).labels;
        assert!(export_vimednli(&examples, dir.path(), ExportFormat::Both, false).is_err());
        let backend = MockLexicon::default();
        translate_nli(&mut examples, &backend, &RunOptions::default(), None).unwrap();
        for ex in examples.iter_mut().take(3) {
            let p = ex.premise.clone();
            let h = ex.hypothesis.clone();
            ex.set_refined(p, h, vec![], None).unwrap();
        }
        assert!(matches!(
            export_vimednli(&examples, dir.path(), ExportFormat::Both, false),
            Err(NliError::Export(_))
        ));
        export_vimednli(&examples, dir.path(), ExportFormat::Both, true).unwrap();
        for ex in examples.iter_mut().skip(3) {
            let p = ex.premise.clone();
            let h = ex.hypothesis.clone();
            ex.set_refined(p, h, vec![], None).unwrap();
        }
        let manifest = export_vimednli(&examples, dir.path(), ExportFormat::Both, false).unwrap();
        assert_eq!(manifest.label_histogram, load_hist);
        for (split, n) in [("train", 20), ("dev", 5), ("test", 5)] {
            let tsv = fs::read_to_string(dir.path().join(format!("vimednli_{split}.tsv"))).unwrap();
            assert_eq!(tsv.lines().count(), n);
            let jl = fs::read_to_string(dir.path().join(format!("vimednli_{split}.jsonl"))).unwrap();
            assert_eq!(jl.lines().count(), n);
        }
        // exported JSON-lines load back with the same counts
        let jl_dir = dir.path().join("jsonl-only");
        export_vimednli(&examples, &jl_dir, ExportFormat::Jsonl, false).unwrap();
        let (back, stats) = load_mednli(&jl_dir, None).unwrap();
        assert_eq!(back.len(), 30);
        assert_eq!(stats.labels, load_hist);
    }
}
