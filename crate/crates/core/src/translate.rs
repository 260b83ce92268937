//! Translation backends and the checkpointed batch runner.
//!
//! A backend only has to map a slice of source texts to an equally long
//! vector of targets. [`translate_batch`] handles batching, bounded
//! parallelism, retries and an append-only checkpoint so that an interrupted
//! job resumes without re-translating finished ids.

use std::collections::{HashMap, HashSet};
use std::fs::{File, OpenOptions};
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::{mpsc, Arc};
use std::time::Duration;

use rand::Rng;
use serde::{Deserialize, Serialize};

/// Environment variable holding the bearer token for the HTTP backend.
pub const AUTH_TOKEN_ENV: &str = "VIPUBMED_TRANSLATE_TOKEN";

#[derive(Debug, Clone, thiserror::Error)]
pub enum BackendError {
    #[error("http status {0}")]
    Status(u16),
    #[error("transport: {0}")]
    Transport(String),
    #[error("response carried {got} translations for {expected} inputs")]
    Misaligned { expected: usize, got: usize },
    #[error("{0}")]
    Other(String),
}

pub trait Translator: Send + Sync {
    fn translate(&self, texts: &[String]) -> Result<Vec<String>, BackendError>;
}

impl<T: Translator + ?Sized> Translator for Arc<T> {
    fn translate(&self, texts: &[String]) -> Result<Vec<String>, BackendError> {
        (**self).translate(texts)
    }
}

impl<T: Translator + ?Sized> Translator for Box<T> {
    fn translate(&self, texts: &[String]) -> Result<Vec<String>, BackendError> {
        (**self).translate(texts)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum LexiconError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("line {line}: expected `source<TAB>target`")]
    Shape { line: usize },
    #[error("line {line}: lexicon entries must be single tokens")]
    MultiToken { line: usize },
    #[error("line {line}: duplicate source token {token:?}")]
    Duplicate { line: usize, token: String },
}

/// Whitespace-token substitution; unknown tokens pass through and the
/// original spacing is preserved.
pub fn mock_translate(lexicon: &HashMap<String, String>, text: &str) -> String {
    if lexicon.is_empty() {
        return text.to_owned();
    }
    let mut out = String::with_capacity(text.len());
    let mut token_start: Option<usize> = None;
    let flush = |out: &mut String, tok: &str| match lexicon.get(tok) {
        Some(t) => out.push_str(t),
        None => out.push_str(tok),
    };
    for (i, ch) in text.char_indices() {
        if ch.is_whitespace() {
            if let Some(s) = token_start.take() {
                flush(&mut out, &text[s..i]);
            }
            out.push(ch);
        } else if token_start.is_none() {
            token_start = Some(i);
        }
    }
    if let Some(s) = token_start {
        flush(&mut out, &text[s..]);
    }
    out
}

/// Deterministic stand-in translator backed by a token lexicon.
#[derive(Debug, Clone, Default)]
pub struct MockLexicon {
    entries: HashMap<String, String>,
}

impl MockLexicon {
    pub fn new(entries: HashMap<String, String>) -> Self {
        MockLexicon { entries }
    }

    pub fn entries(&self) -> &HashMap<String, String> {
        &self.entries
    }

    pub fn parse(src: &str) -> Result<Self, LexiconError> {
        let mut entries = HashMap::new();
        for (i, line) in src.lines().enumerate() {
            let line_no = i + 1;
            if line.trim().is_empty() {
                continue;
            }
            let mut cols = line.split('\t');
            let (Some(source), Some(target), None) = (cols.next(), cols.next(), cols.next()) else {
                return Err(LexiconError::Shape { line: line_no });
            };
            let single = |s: &str| !s.is_empty() && !s.contains(char::is_whitespace);
            if !single(source) || !single(target) {
                return Err(LexiconError::MultiToken { line: line_no });
            }
            if entries.insert(source.to_owned(), target.to_owned()).is_some() {
                return Err(LexiconError::Duplicate {
                    line: line_no,
                    token: source.to_owned(),
                });
            }
        }
        Ok(MockLexicon { entries })
    }

    pub fn load(path: &Path) -> Result<Self, LexiconError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn inverse(&self) -> MockLexicon {
        MockLexicon {
            entries: self
                .entries
                .iter()
                .map(|(k, v)| (v.clone(), k.clone()))
                .collect(),
        }
    }
}

impl Translator for MockLexicon {
    fn translate(&self, texts: &[String]) -> Result<Vec<String>, BackendError> {
        Ok(texts.iter().map(|t| mock_translate(&self.entries, t)).collect())
    }
}

#[derive(Serialize)]
struct HttpRequest<'a> {
    texts: &'a [String],
}

#[derive(Deserialize)]
struct HttpResponse {
    translations: Vec<String>,
}

/// Client for a JSON translation service:
/// `POST {"texts": [...]}` → `{"translations": [...]}`, positionally aligned.
pub struct HttpTranslator {
    endpoint: String,
    token: Option<String>,
    agent: ureq::Agent,
}

impl HttpTranslator {
    pub fn new(endpoint: impl Into<String>, token: Option<String>, timeout: Duration) -> Self {
        HttpTranslator {
            endpoint: endpoint.into(),
            token,
            agent: ureq::AgentBuilder::new().timeout(timeout).build(),
        }
    }
}

impl Translator for HttpTranslator {
    fn translate(&self, texts: &[String]) -> Result<Vec<String>, BackendError> {
        let mut req = self.agent.post(&self.endpoint);
        if let Some(token) = &self.token {
            req = req.set("Authorization", &format!("Bearer {token}"));
        }
        let resp = match req.send_json(HttpRequest { texts }) {
            Ok(r) => r,
            Err(ureq::Error::Status(code, _)) => return Err(BackendError::Status(code)),
            Err(e) => return Err(BackendError::Transport(e.to_string())),
        };
        let body: HttpResponse = resp
            .into_json()
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        if body.translations.len() != texts.len() {
            return Err(BackendError::Misaligned {
                expected: texts.len(),
                got: body.translations.len(),
            });
        }
        Ok(body.translations)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackendKind {
    MockLexicon {
        lexicon: PathBuf,
    },
    HttpService {
        endpoint: String,
        #[serde(default = "default_timeout_secs")]
        timeout_secs: u64,
    },
}

fn default_timeout_secs() -> u64 {
    60
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetryPolicy {
    /// Retries after the first attempt.
    pub budget: u32,
    pub base_delay_ms: u64,
    pub max_delay_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            budget: 3,
            base_delay_ms: 200,
            max_delay_ms: 10_000,
        }
    }
}

impl RetryPolicy {
    /// Exponential backoff with "equal jitter": half fixed, half random.
    pub fn delay(&self, retry: u32) -> Duration {
        let exp = self
            .base_delay_ms
            .saturating_mul(1u64 << retry.min(30))
            .min(self.max_delay_ms);
        if exp == 0 {
            return Duration::ZERO;
        }
        let half = exp / 2;
        Duration::from_millis(half + rand::thread_rng().gen_range(0..=exp - half))
    }
}

/// A configured translator plus the knobs the batch runner needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranslatorBackend {
    #[serde(flatten)]
    pub kind: BackendKind,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default)]
    pub retry: RetryPolicy,
}

fn default_batch_size() -> usize {
    16
}

#[derive(Debug, thiserror::Error)]
pub enum TranslateError {
    #[error("batch size must be at least 1")]
    ZeroBatch,
    #[error("translation job has no items")]
    EmptyJob,
    #[error("duplicate item id {0:?}")]
    DuplicateId(String),
    #[error("lexicon: {0}")]
    Lexicon(#[from] LexiconError),
    #[error("checkpoint {path}: {message}")]
    Checkpoint { path: PathBuf, message: String },
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
}

impl TranslatorBackend {
    pub fn mock(lexicon: impl Into<PathBuf>) -> Self {
        TranslatorBackend {
            kind: BackendKind::MockLexicon {
                lexicon: lexicon.into(),
            },
            batch_size: default_batch_size(),
            retry: RetryPolicy::default(),
        }
    }

    pub fn validate(&self) -> Result<(), TranslateError> {
        if self.batch_size == 0 {
            return Err(TranslateError::ZeroBatch);
        }
        Ok(())
    }

    /// Instantiates the backend. The HTTP token is read from [`AUTH_TOKEN_ENV`].
    pub fn build(&self) -> Result<Box<dyn Translator>, TranslateError> {
        self.validate()?;
        Ok(match &self.kind {
            BackendKind::MockLexicon { lexicon } => Box::new(MockLexicon::load(lexicon)?),
            BackendKind::HttpService {
                endpoint,
                timeout_secs,
            } => Box::new(HttpTranslator::new(
                endpoint.clone(),
                std::env::var(AUTH_TOKEN_ENV).ok().filter(|t| !t.is_empty()),
                Duration::from_secs(*timeout_secs),
            )),
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CheckpointEntry {
    id: String,
    translation: String,
}

/// Ordered work list plus whatever has been translated so far.
#[derive(Debug, Clone)]
pub struct TranslationJob {
    items: Vec<(String, String)>,
    completed: HashMap<String, String>,
    failed: HashSet<String>,
    checkpoint_path: Option<PathBuf>,
}

impl TranslationJob {
    pub fn new(items: Vec<(String, String)>) -> Result<Self, TranslateError> {
        let mut ids = HashSet::with_capacity(items.len());
        for (id, _) in &items {
            if !ids.insert(id.as_str()) {
                return Err(TranslateError::DuplicateId(id.clone()));
            }
        }
        Ok(TranslationJob {
            items,
            completed: HashMap::new(),
            failed: HashSet::new(),
            checkpoint_path: None,
        })
    }

    /// Attaches a checkpoint file, loading any translations already recorded.
    pub fn with_checkpoint(mut self, path: impl Into<PathBuf>) -> Result<Self, TranslateError> {
        let path = path.into();
        self.completed = load_checkpoint(&path, &self.items)?;
        self.checkpoint_path = Some(path);
        Ok(self)
    }

    pub fn items(&self) -> &[(String, String)] {
        &self.items
    }

    pub fn completed_count(&self) -> usize {
        self.completed.len()
    }

    pub fn translation(&self, id: &str) -> Option<&str> {
        self.completed.get(id).map(String::as_str)
    }

    pub fn failed_ids(&self) -> Vec<&str> {
        self.items
            .iter()
            .filter(|(id, _)| self.failed.contains(id))
            .map(|(id, _)| id.as_str())
            .collect()
    }

    pub fn is_finished(&self) -> bool {
        self.completed.len() == self.items.len()
    }

    /// `(id, translation)` in item order; `None` for ids not translated.
    pub fn results(&self) -> impl Iterator<Item = (&str, Option<&str>)> {
        self.items
            .iter()
            .map(|(id, _)| (id.as_str(), self.completed.get(id).map(String::as_str)))
    }
}

fn checkpoint_err(path: &Path, message: impl Into<String>) -> TranslateError {
    TranslateError::Checkpoint {
        path: path.to_owned(),
        message: message.into(),
    }
}

/// Reads an append-only checkpoint. A torn final line (crash mid-write) is
/// discarded and truncated away; corruption anywhere else is an error.
fn load_checkpoint(
    path: &Path,
    items: &[(String, String)],
) -> Result<HashMap<String, String>, TranslateError> {
    let mut completed = HashMap::new();
    let file = match File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(completed),
        Err(e) => return Err(e.into()),
    };
    let known: HashSet<&str> = items.iter().map(|(id, _)| id.as_str()).collect();
    let mut reader = BufReader::new(file);
    let mut line = Vec::new();
    let mut good_len: u64 = 0;
    let mut line_no = 0;
    loop {
        line.clear();
        let n = reader.read_until(b'\n', &mut line)?;
        if n == 0 {
            break;
        }
        line_no += 1;
        let complete = line.last() == Some(&b'\n');
        let parsed = std::str::from_utf8(&line)
            .ok()
            .and_then(|s| serde_json::from_str::<CheckpointEntry>(s.trim_end()).ok());
        match parsed {
            Some(entry) if complete => {
                if !known.contains(entry.id.as_str()) {
                    return Err(checkpoint_err(
                        path,
                        format!("line {line_no}: id {:?} is not part of this job", entry.id),
                    ));
                }
                completed.insert(entry.id, entry.translation);
                good_len += n as u64;
            }
            _ if !complete => {
                log::warn!("{}: dropping torn trailing checkpoint line", path.display());
                break;
            }
            _ => return Err(checkpoint_err(path, format!("line {line_no} is not a valid entry"))),
        }
    }
    let on_disk = std::fs::metadata(path)?.len();
    if on_disk != good_len {
        OpenOptions::new().write(true).open(path)?.set_len(good_len)?;
    }
    Ok(completed)
}

#[derive(Debug, Clone)]
pub struct RunOptions {
    pub batch_size: usize,
    pub parallelism: usize,
    /// Completions buffered between checkpoint flushes.
    pub checkpoint_interval: usize,
    pub retry: RetryPolicy,
    /// Stops dispatching new batches once set; in-flight batches finish.
    pub cancel: Option<Arc<AtomicBool>>,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions {
            batch_size: default_batch_size(),
            parallelism: 1,
            checkpoint_interval: 1,
            retry: RetryPolicy::default(),
            cancel: None,
        }
    }
}

impl RunOptions {
    pub fn from_backend(backend: &TranslatorBackend) -> Self {
        RunOptions {
            batch_size: backend.batch_size,
            retry: backend.retry,
            ..RunOptions::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobStatus {
    Complete,
    Partial,
    Interrupted,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JobOutcome {
    pub status: JobStatus,
    pub translated_this_run: usize,
    pub failed: usize,
    pub backend_calls: usize,
}

fn translate_with_retry<T: Translator + ?Sized>(
    backend: &T,
    texts: &[String],
    retry: &RetryPolicy,
    calls: &AtomicUsize,
) -> Result<Vec<String>, BackendError> {
    let mut attempt = 0;
    loop {
        calls.fetch_add(1, Ordering::Relaxed);
        match backend.translate(texts) {
            Ok(out) if out.len() == texts.len() => return Ok(out),
            Ok(out) => {
                let err = BackendError::Misaligned {
                    expected: texts.len(),
                    got: out.len(),
                };
                if attempt >= retry.budget {
                    return Err(err);
                }
            }
            Err(e) => {
                if attempt >= retry.budget {
                    return Err(e);
                }
                log::debug!("translation attempt {} failed: {e}", attempt + 1);
            }
        }
        std::thread::sleep(retry.delay(attempt));
        attempt += 1;
    }
}

struct CheckpointWriter {
    out: BufWriter<File>,
    pending: usize,
    interval: usize,
}

impl CheckpointWriter {
    fn open(path: &Path, interval: usize) -> io::Result<Self> {
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(CheckpointWriter {
            out: BufWriter::new(file),
            pending: 0,
            interval: interval.max(1),
        })
    }

    fn record(&mut self, id: &str, translation: &str) -> io::Result<()> {
        let entry = CheckpointEntry {
            id: id.to_owned(),
            translation: translation.to_owned(),
        };
        serde_json::to_writer(&mut self.out, &entry)?;
        self.out.write_all(b"\n")?;
        self.pending += 1;
        if self.pending >= self.interval {
            self.flush()?;
        }
        Ok(())
    }

    fn flush(&mut self) -> io::Result<()> {
        self.out.flush()?;
        self.out.get_ref().sync_data()?;
        self.pending = 0;
        Ok(())
    }
}

/// Translates every item not already completed.
///
/// Batches are formed in item order and dispatched to up to
/// `opts.parallelism` workers. Completions are merged and checkpointed on
/// the calling thread, so results never depend on completion order. Items
/// whose batch exhausts the retry budget are marked failed and the outcome
/// is [`JobStatus::Partial`].
pub fn translate_batch<T: Translator + ?Sized>(
    backend: &T,
    job: &mut TranslationJob,
    opts: &RunOptions,
) -> Result<JobOutcome, TranslateError> {
    if opts.batch_size == 0 {
        return Err(TranslateError::ZeroBatch);
    }
    if job.items.is_empty() {
        return Err(TranslateError::EmptyJob);
    }
    job.failed.clear();
    let pending: Vec<usize> = (0..job.items.len())
        .filter(|&i| !job.completed.contains_key(&job.items[i].0))
        .collect();
    let batches: Vec<&[usize]> = pending.chunks(opts.batch_size).collect();
    let mut writer = match &job.checkpoint_path {
        Some(p) => Some(CheckpointWriter::open(p, opts.checkpoint_interval)?),
        None => None,
    };

    let calls = AtomicUsize::new(0);
    let next_batch = AtomicUsize::new(0);
    let workers = opts.parallelism.max(1).min(batches.len().max(1));
    let cancelled = || {
        opts.cancel
            .as_ref()
            .map(|c| c.load(Ordering::SeqCst))
            .unwrap_or(false)
    };

    let mut translated = 0;
    let items = &job.items;
    let completed = &mut job.completed;
    let failed = &mut job.failed;
    let mut io_result: io::Result<()> = Ok(());

    std::thread::scope(|scope| {
        let (tx, rx) = mpsc::channel::<(usize, Result<Vec<String>, BackendError>)>();
        for _ in 0..workers {
            let tx = tx.clone();
            let batches = &batches;
            let next_batch = &next_batch;
            let calls = &calls;
            let cancelled = &cancelled;
            scope.spawn(move || loop {
                if cancelled() {
                    break;
                }
                let b = next_batch.fetch_add(1, Ordering::SeqCst);
                let Some(batch) = batches.get(b) else { break };
                let texts: Vec<String> = batch.iter().map(|&i| items[i].1.clone()).collect();
                let result = translate_with_retry(backend, &texts, &opts.retry, calls);
                if tx.send((b, result)).is_err() {
                    break;
                }
            });
        }
        drop(tx);
        for (b, result) in rx {
            match result {
                Ok(targets) => {
                    for (&i, target) in batches[b].iter().zip(targets) {
                        let id = &items[i].0;
                        if io_result.is_ok() {
                            if let Some(w) = writer.as_mut() {
                                io_result = w.record(id, &target);
                            }
                        }
                        completed.insert(id.clone(), target);
                        translated += 1;
                    }
                }
                Err(e) => {
                    for &i in batches[b] {
                        log::warn!("giving up on {}: {e}", items[i].0);
                        failed.insert(items[i].0.clone());
                    }
                }
            }
        }
    });
    io_result?;
    if let Some(w) = writer.as_mut() {
        w.flush()?;
    }

    let status = if job.is_finished() {
        JobStatus::Complete
    } else if !job.failed.is_empty()
        && job.completed.len() + job.failed.len() == job.items.len()
    {
        JobStatus::Partial
    } else {
        JobStatus::Interrupted
    };
    Ok(JobOutcome {
        status,
        translated_this_run: translated,
        failed: job.failed.len(),
        backend_calls: calls.load(Ordering::Relaxed),
    })
}
