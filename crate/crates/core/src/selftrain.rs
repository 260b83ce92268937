//! Self-training corpus construction: synthesize bitext from monolingual
//! abstracts with a translator, then mix it with gold bitext.

use std::collections::HashSet;
use std::fmt;
use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ingest::Abstract;
use crate::tsv;
use crate::translate::{translate_batch, JobOutcome, RunOptions, TranslateError, TranslationJob, Translator};

pub const SYNTHETIC_DOMAIN: &str = "medical";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    Gold,
    Synthetic,
}

impl fmt::Display for Origin {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Origin::Gold => "gold",
            Origin::Synthetic => "synthetic",
        })
    }
}

impl FromStr for Origin {
    type Err = BitextError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "gold" => Ok(Origin::Gold),
            "synthetic" => Ok(Origin::Synthetic),
            other => Err(BitextError::Origin(other.to_owned())),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum BitextError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("unknown origin {0:?}")]
    Origin(String),
    #[error("line {line}: expected 4 tab-separated columns, found {found}")]
    Columns { line: usize, found: usize },
    #[error("line {line}: {message}")]
    Invalid { line: usize, message: String },
    #[error("bitext pair has an empty side")]
    EmptySide,
}

/// An aligned source/target pair. Fields are private so the origin tag
/// cannot change after construction.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct BitextPair {
    source: String,
    target: String,
    origin: Origin,
    domain: String,
}

impl BitextPair {
    pub fn new(
        source: impl Into<String>,
        target: impl Into<String>,
        origin: Origin,
        domain: impl Into<String>,
    ) -> Result<Self, BitextError> {
        let source = source.into();
        let target = target.into();
        if source.trim().is_empty() || target.trim().is_empty() {
            return Err(BitextError::EmptySide);
        }
        Ok(BitextPair {
            source,
            target,
            origin,
            domain: domain.into(),
        })
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    pub fn target(&self) -> &str {
        &self.target
    }

    pub fn origin(&self) -> Origin {
        self.origin
    }

    pub fn domain(&self) -> &str {
        &self.domain
    }
}

/// `source<TAB>target<TAB>origin<TAB>domain`, with `\t`, `\n`, `\r` and `\\`
/// escaped inside fields.
pub fn write_tsv<'a, W, I>(out: &mut W, pairs: I) -> io::Result<usize>
where
    W: Write,
    I: IntoIterator<Item = &'a BitextPair>,
{
    let mut n = 0;
    for p in pairs {
        writeln!(
            out,
            "{}\t{}\t{}\t{}",
            tsv::escape(&p.source),
            tsv::escape(&p.target),
            p.origin,
            tsv::escape(&p.domain)
        )?;
        n += 1;
    }
    Ok(n)
}

pub fn read_tsv<R: BufRead>(input: R) -> Result<Vec<BitextPair>, BitextError> {
    let mut pairs = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        let line_no = i + 1;
        if line.is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 4 {
            return Err(BitextError::Columns {
                line: line_no,
                found: cols.len(),
            });
        }
        let invalid = |message: String| BitextError::Invalid {
            line: line_no,
            message,
        };
        let source = tsv::unescape(cols[0]).map_err(invalid)?;
        let target = tsv::unescape(cols[1]).map_err(invalid)?;
        let origin: Origin = cols[2].parse()?;
        let domain = tsv::unescape(cols[3]).map_err(invalid)?;
        let pair = BitextPair::new(source, target, origin, domain)
            .map_err(|e| invalid(e.to_string()))?;
        pairs.push(pair);
    }
    Ok(pairs)
}

pub fn read_tsv_file(path: &Path) -> Result<Vec<BitextPair>, BitextError> {
    read_tsv(BufReader::new(File::open(path)?))
}

#[derive(Debug)]
pub struct Synthesis {
    pub pairs: Vec<BitextPair>,
    pub failed: usize,
    pub outcome: JobOutcome,
}

/// One synthetic pair per abstract: body as source, backend output as
/// target. Abstracts whose translation failed (or came back empty) are left
/// out and counted in `failed`.
pub fn synthesize_bitext<T: Translator + ?Sized>(
    mono: &[Abstract],
    backend: &T,
    opts: &RunOptions,
    checkpoint: Option<&Path>,
) -> Result<Synthesis, TranslateError> {
    if mono.is_empty() {
        return Ok(Synthesis {
            pairs: Vec::new(),
            failed: 0,
            outcome: JobOutcome {
                status: crate::translate::JobStatus::Complete,
                translated_this_run: 0,
                failed: 0,
                backend_calls: 0,
            },
        });
    }
    let items = mono
        .iter()
        .map(|a| (a.pmid.clone(), a.body.clone()))
        .collect();
    let mut job = TranslationJob::new(items)?;
    if let Some(path) = checkpoint {
        job = job.with_checkpoint(path)?;
    }
    let outcome = translate_batch(backend, &mut job, opts)?;
    let mut pairs = Vec::with_capacity(mono.len());
    let mut failed = 0;
    for (a, (_, target)) in mono.iter().zip(job.results()) {
        match target.map(|t| BitextPair::new(a.body.clone(), t, Origin::Synthetic, SYNTHETIC_DOMAIN)) {
            Some(Ok(pair)) => pairs.push(pair),
            _ => failed += 1,
        }
    }
    Ok(Synthesis {
        pairs,
        failed,
        outcome,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MixManifest {
    pub gold_count: u64,
    pub synthetic_count: u64,
    pub total_count: u64,
    pub shuffle_seed: u64,
    /// Synthetic sources that also occur as gold sources (reported, kept).
    pub cross_set_source_collisions: u64,
    /// Shard file names, relative to the output directory.
    pub output_shards: Vec<PathBuf>,
}

/// Concatenates gold and synthetic pairs and applies a seeded shuffle.
pub fn mix_corpora(
    gold: Vec<BitextPair>,
    synthetic: Vec<BitextPair>,
    seed: u64,
) -> (Vec<BitextPair>, MixManifest) {
    let gold_sources: HashSet<&str> = gold.iter().map(|p| p.source.as_str()).collect();
    let collisions = synthetic
        .iter()
        .filter(|p| gold_sources.contains(p.source.as_str()))
        .count() as u64;

    let mut mixed = gold;
    mixed.extend(synthetic);
    let gold_count = mixed.iter().filter(|p| p.origin == Origin::Gold).count() as u64;
    let synthetic_count = mixed.len() as u64 - gold_count;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    mixed.shuffle(&mut rng);

    let manifest = MixManifest {
        gold_count,
        synthetic_count,
        total_count: mixed.len() as u64,
        shuffle_seed: seed,
        cross_set_source_collisions: collisions,
        output_shards: Vec::new(),
    };
    (mixed, manifest)
}

/// Writes `pairs` as numbered TSV shards of at most `shard_size` lines and
/// records their paths in the manifest.
pub fn write_shards(
    pairs: &[BitextPair],
    dir: &Path,
    stem: &str,
    shard_size: usize,
    manifest: &mut MixManifest,
) -> io::Result<()> {
    std::fs::create_dir_all(dir)?;
    manifest.output_shards.clear();
    let shard_size = shard_size.max(1);
    let chunks: Vec<&[BitextPair]> = if pairs.is_empty() {
        vec![&[]]
    } else {
        pairs.chunks(shard_size).collect()
    };
    for (i, chunk) in chunks.into_iter().enumerate() {
        let name = PathBuf::from(format!("{stem}-{i:05}.tsv"));
        let path = dir.join(&name);
        let mut out = BufWriter::new(File::create(&path)?);
        write_tsv(&mut out, chunk)?;
        out.flush()?;
        manifest.output_shards.push(name);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::translate::{BackendError, MockLexicon};
    use std::collections::HashMap;

    fn gold(n: usize) -> Vec<BitextPair> {
        (0..n)
            .map(|i| BitextPair::new(format!("en {i}"), format!("vi {i}"), Origin::Gold, "news").unwrap())
            .collect()
    }

    fn abstracts(n: usize) -> Vec<Abstract> {
        (0..n)
            .map(|i| Abstract::new(i.to_string(), "", format!("fever case {i}")))
            .collect()
    }

    #[test]
    fn empty_side_rejected() {
        assert!(BitextPair::new("", "x", Origin::Gold, "d").is_err());
        assert!(BitextPair::new("x", " ", Origin::Gold, "d").is_err());
    }

    #[test]
    fn tsv_escapes_round_trip() {
        let pairs = vec![
            BitextPair::new("a\tb\\c", "x\ny", Origin::Synthetic, "medical").unwrap(),
            BitextPair::new("plain", "thường", Origin::Gold, "law").unwrap(),
        ];
        let mut buf = Vec::new();
        write_tsv(&mut buf, &pairs).unwrap();
        assert_eq!(String::from_utf8(buf.clone()).unwrap().lines().count(), 2);
        assert_eq!(read_tsv(buf.as_slice()).unwrap(), pairs);
    }

    #[test]
    fn tsv_rejects_bad_rows() {
        assert!(matches!(read_tsv("a\tb\tgold\n".as_bytes()), Err(BitextError::Columns { line: 1, found: 3 })));
        assert!(matches!(read_tsv("a\tb\tsilver\td\n".as_bytes()), Err(BitextError::Origin(_))));
    }

    #[test]
    fn synthesizes_one_pair_per_abstract() {
        let backend = MockLexicon::new(HashMap::from([("fever".to_string(), "sốt".to_string())]));
        let mono = abstracts(5);
        let syn = synthesize_bitext(&mono, &backend, &RunOptions::default(), None).unwrap();
        assert_eq!(syn.pairs.len(), 5);
        assert_eq!(syn.failed, 0);
        for (p, a) in syn.pairs.iter().zip(&mono) {
            assert_eq!(p.source(), a.body);
            assert_eq!(p.target(), crate::translate::mock_translate(backend.entries(), &a.body));
            assert_eq!(p.origin(), Origin::Synthetic);
            assert_eq!(p.domain(), "medical");
        }
        let empty = synthesize_bitext(&[], &backend, &RunOptions::default(), None).unwrap();
        assert!(empty.pairs.is_empty());
    }

    struct FailOn(HashSet<String>);

    impl Translator for FailOn {
        fn translate(&self, texts: &[String]) -> Result<Vec<String>, BackendError> {
            if texts.iter().any(|t| self.0.contains(t)) {
                return Err(BackendError::Status(503));
            }
            Ok(texts.iter().map(|t| format!("vi:{t}")).collect())
        }
    }

    #[test]
    fn failures_are_excluded_and_counted() {
        let mono = abstracts(100);
        let bad: HashSet<String> = [7, 42, 99].iter().map(|i| mono[*i].body.clone()).collect();
        let opts = RunOptions {
            batch_size: 1,
            retry: crate::translate::RetryPolicy {
                budget: 1,
                base_delay_ms: 0,
                max_delay_ms: 0,
            },
            ..RunOptions::default()
        };
        let syn = synthesize_bitext(&mono, &FailOn(bad.clone()), &opts, None).unwrap();
        assert_eq!(syn.pairs.len(), 97);
        assert_eq!(syn.failed, 3);
        assert!(syn.pairs.iter().all(|p| !bad.contains(p.source())));
    }

    fn synthetic(n: usize) -> Vec<BitextPair> {
        (0..n)
            .map(|i| BitextPair::new(format!("abstract {i}"), format!("tóm tắt {i}"), Origin::Synthetic, "medical").unwrap())
            .collect()
    }

    #[test]
    fn mix_counts_scaled_corpus() {
        let (mixed, manifest) = mix_corpora(gold(620), synthetic(100), 7);
        assert_eq!((manifest.gold_count, manifest.synthetic_count, manifest.total_count), (620, 100, 720));
        assert_eq!(mixed.iter().filter(|p| p.origin() == Origin::Gold).count(), 620);
    }

    #[test]
    fn mix_with_no_synthetic_is_a_shuffle_of_gold() {
        let g = gold(50);
        let (mixed, manifest) = mix_corpora(g.clone(), Vec::new(), 1);
        assert_eq!(manifest.total_count, 50);
        let mut a = mixed.clone();
        let mut b = g;
        a.sort();
        b.sort();
        assert_eq!(a, b);
    }

    #[test]
    fn seeds_change_order_not_content() {
        let (a, _) = mix_corpora(gold(30), synthetic(30), 1);
        let (b, _) = mix_corpora(gold(30), synthetic(30), 2);
        let (a2, _) = mix_corpora(gold(30), synthetic(30), 1);
        assert_eq!(a, a2);
        assert_ne!(a, b);
        let (mut sa, mut sb) = (a.clone(), b.clone());
        sa.sort();
        sb.sort();
        assert_eq!(sa, sb);
    }

    #[test]
    fn collisions_are_reported_not_removed() {
        let g = vec![BitextPair::new("same", "giống", Origin::Gold, "medical").unwrap()];
        let s = vec![BitextPair::new("same", "khác", Origin::Synthetic, "medical").unwrap()];
        let (mixed, manifest) = mix_corpora(g, s, 0);
        assert_eq!(mixed.len(), 2);
        assert_eq!(manifest.cross_set_source_collisions, 1);
    }

    #[test]
    fn shards_cover_all_pairs() {
        let dir = tempfile::tempdir().unwrap();
        let (mixed, mut manifest) = mix_corpora(gold(25), synthetic(10), 3);
        write_shards(&mixed, dir.path(), "mix", 10, &mut manifest).unwrap();
        assert_eq!(manifest.output_shards.len(), 4);
        let mut back = Vec::new();
        for shard in &manifest.output_shards {
            back.extend(read_tsv_file(&dir.path().join(shard)).unwrap());
        }
        assert_eq!(back, mixed);
    }
}
