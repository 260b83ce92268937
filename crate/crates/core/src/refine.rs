//! Task queue for human refinement of machine-translated NLI sentences.
//!
//! State lives in memory behind one mutex and every transition is first
//! appended (and synced) to a JSON-lines journal, then applied. Reopening
//! the store replays the journal. Journal layout:
//!
//! ```text
//! {"format":"vipubmed-refine-store","version":1}
//! {"event":"example","example":{...NliExample...}}
//! {"event":"task","task":{...RefinementTask...}}
//! {"event":"claim","task_id":3,"annotator":"an","expiry":"2026-01-01T00:15:00Z"}
//! {"event":"release","task_id":3}
//! {"event":"submit","task_id":3,"annotator":"an","final_text":"...","at":"..."}
//! ```
//!
//! A torn final line is dropped on open; any other unreadable line is an
//! error. Copying the file while the service is stopped is a full backup.

use std::collections::{BTreeMap, HashMap};
use std::fs::{File, OpenOptions};
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, MutexGuard};

use chrono::{DateTime, Duration, Utc};
use serde::{Deserialize, Serialize};

use crate::mednli::{apply_with_hits, AbbrevLexicon, Field, NliError, NliExample, RuleHit, State};

pub const STORE_FORMAT: &str = "vipubmed-refine-store";
pub const STORE_VERSION: u32 = 1;
pub const DEFAULT_LEASE_MINUTES: i64 = 15;

pub trait Clock: Send + Sync {
    fn now(&self) -> DateTime<Utc>;
}

#[derive(Debug, Default, Clone, Copy)]
pub struct SystemClock;

impl Clock for SystemClock {
    fn now(&self) -> DateTime<Utc> {
        Utc::now()
    }
}

/// Clock that only moves when told to.
#[derive(Debug)]
pub struct ManualClock(Mutex<DateTime<Utc>>);

impl ManualClock {
    pub fn new(start: DateTime<Utc>) -> Self {
        ManualClock(Mutex::new(start))
    }

    pub fn advance(&self, by: Duration) {
        *self.0.lock().unwrap() += by;
    }
}

impl Clock for ManualClock {
    fn now(&self) -> DateTime<Utc> {
        *self.0.lock().unwrap()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskStatus {
    Open,
    Claimed,
    Submitted,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RefinementTask {
    pub task_id: u64,
    pub uid: String,
    pub field: Field,
    pub source_text: String,
    pub machine_text: String,
    pub suggested_text: String,
    /// Where abbreviation rules matched in `machine_text`.
    pub rule_hits: Vec<RuleHit>,
    pub status: TaskStatus,
    pub claimant: Option<String>,
    pub claim_expiry: Option<DateTime<Utc>>,
    pub final_text: Option<String>,
}

impl RefinementTask {
    pub fn applied_rules(&self) -> impl Iterator<Item = &str> {
        self.rule_hits.iter().map(|h| h.rule_id.as_str())
    }

    fn is_claim_live(&self, now: DateTime<Utc>) -> bool {
        self.status == TaskStatus::Claimed && self.claim_expiry.map_or(false, |e| e > now)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("store i/o: {0}")]
    Io(#[from] io::Error),
    #[error("store {path} line {line}: {message}")]
    Corrupt {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("unknown task {0}")]
    NotFound(u64),
    #[error("task {task_id} is claimed by someone else")]
    WrongClaimant { task_id: u64 },
    #[error("lease on task {0} expired; the task is open again")]
    LeaseExpired(u64),
    #[error("task {0} is not claimed")]
    NotClaimed(u64),
    #[error("task {0} was already submitted")]
    AlreadySubmitted(u64),
    #[error("final text must not be empty")]
    EmptyText,
    #[error("annotator id must not be empty")]
    EmptyAnnotator,
    #[error("example {0} is not machine-translated")]
    NotMachineState(String),
    #[error(transparent)]
    Nli(#[from] NliError),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
enum Event {
    Example {
        example: NliExample,
    },
    Task {
        task: RefinementTask,
    },
    Claim {
        task_id: u64,
        annotator: String,
        expiry: DateTime<Utc>,
    },
    Release {
        task_id: u64,
    },
    Submit {
        task_id: u64,
        annotator: String,
        final_text: String,
        at: DateTime<Utc>,
    },
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Progress {
    pub open: u64,
    pub claimed: u64,
    pub submitted: u64,
    pub total: u64,
    /// Claimed tasks whose lease has run out (included in `claimed`).
    pub expired_claims: u64,
    pub submitted_by_annotator: BTreeMap<String, u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnqueueReport {
    pub created: u64,
    pub already_present: u64,
    pub total_tasks: u64,
}

#[derive(Default)]
struct Inner {
    journal: Option<BufWriter<File>>,
    tasks: Vec<RefinementTask>,
    task_index: HashMap<(String, Field), usize>,
    examples: Vec<NliExample>,
    example_index: HashMap<String, usize>,
}

impl Inner {
    fn task_mut(&mut self, id: u64) -> Option<&mut RefinementTask> {
        // ids are 1-based positions
        let i = usize::try_from(id).ok()?.checked_sub(1)?;
        self.tasks.get_mut(i)
    }

    fn apply(&mut self, event: Event) -> Result<(), String> {
        match event {
            Event::Example { example } => match self.example_index.get(&example.uid) {
                Some(&i) => self.examples[i] = example,
                None => {
                    self.example_index.insert(example.uid.clone(), self.examples.len());
                    self.examples.push(example);
                }
            },
            Event::Task { task } => {
                if task.task_id != self.tasks.len() as u64 + 1 {
                    return Err(format!("task id {} out of sequence", task.task_id));
                }
                self.task_index
                    .insert((task.uid.clone(), task.field), self.tasks.len());
                self.tasks.push(task);
            }
            Event::Claim {
                task_id,
                annotator,
                expiry,
            } => {
                let t = self.task_mut(task_id).ok_or("claim of unknown task")?;
                t.status = TaskStatus::Claimed;
                t.claimant = Some(annotator);
                t.claim_expiry = Some(expiry);
            }
            Event::Release { task_id } => {
                let t = self.task_mut(task_id).ok_or("release of unknown task")?;
                t.status = TaskStatus::Open;
                t.claimant = None;
                t.claim_expiry = None;
            }
            Event::Submit {
                task_id,
                annotator,
                final_text,
                ..
            } => {
                let t = self.task_mut(task_id).ok_or("submit of unknown task")?;
                t.status = TaskStatus::Submitted;
                t.claimant = Some(annotator);
                t.claim_expiry = None;
                t.final_text = Some(final_text);
                let uid = t.uid.clone();
                self.maybe_refine(&uid).map_err(|e| e.to_string())?;
            }
        }
        Ok(())
    }

    /// Marks the example refined once both of its tasks are submitted.
    fn maybe_refine(&mut self, uid: &str) -> Result<(), NliError> {
        let get = |f: Field| {
            self.task_index
                .get(&(uid.to_owned(), f))
                .map(|&i| &self.tasks[i])
                .filter(|t| t.status == TaskStatus::Submitted)
        };
        let (Some(p), Some(h)) = (get(Field::Premise), get(Field::Hypothesis)) else {
            return Ok(());
        };
        let mut rules: Vec<String> = Vec::new();
        for r in p.applied_rules().chain(h.applied_rules()) {
            if !rules.iter().any(|x| x == r) {
                rules.push(r.to_owned());
            }
        }
        let mut annotators: Vec<&str> = Vec::new();
        for a in [&p.claimant, &h.claimant].into_iter().flatten() {
            if !annotators.contains(&a.as_str()) {
                annotators.push(a);
            }
        }
        let premise = p.final_text.clone().unwrap_or_default();
        let hypothesis = h.final_text.clone().unwrap_or_default();
        let annotator = (!annotators.is_empty()).then(|| annotators.join(","));
        let Some(&i) = self.example_index.get(uid) else {
            return Ok(());
        };
        let ex = &mut self.examples[i];
        if ex.state == State::Machine {
            ex.set_refined(premise, hypothesis, rules, annotator)?;
        }
        Ok(())
    }
}

/// Durable, linearizable refinement task queue.
pub struct TaskStore {
    inner: Mutex<Inner>,
    clock: Arc<dyn Clock>,
    lease: Duration,
    sync: bool,
    path: Option<PathBuf>,
}

impl TaskStore {
    /// Non-persistent store, used by tests.
    pub fn in_memory(clock: Arc<dyn Clock>, lease: Duration) -> Self {
        TaskStore {
            inner: Mutex::new(Inner::default()),
            clock,
            lease,
            sync: false,
            path: None,
        }
    }

    /// Opens (creating if needed) the journal at `path` and replays it.
    pub fn open(path: &Path, clock: Arc<dyn Clock>, lease: Duration) -> Result<Self, StoreError> {
        let mut inner = Inner::default();
        let existed = path.exists();
        if existed {
            replay(path, &mut inner)?;
        }
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        let mut journal = BufWriter::new(file);
        if !existed || std::fs::metadata(path)?.len() == 0 {
            serde_json::to_writer(
                &mut journal,
                &Header {
                    format: STORE_FORMAT.into(),
                    version: STORE_VERSION,
                },
            )
            .map_err(io::Error::from)?;
            journal.write_all(b"\n")?;
            journal.flush()?;
            journal.get_ref().sync_all()?;
        }
        inner.journal = Some(journal);
        Ok(TaskStore {
            inner: Mutex::new(inner),
            clock,
            lease,
            sync: true,
            path: Some(path.to_owned()),
        })
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    pub fn lease(&self) -> Duration {
        self.lease
    }

    fn lock(&self) -> MutexGuard<'_, Inner> {
        self.inner.lock().unwrap_or_else(|p| p.into_inner())
    }

    /// Write-ahead: the event is on disk before it changes memory.
    fn commit(&self, inner: &mut Inner, event: Event) -> Result<(), StoreError> {
        if let Some(j) = inner.journal.as_mut() {
            serde_json::to_writer(&mut *j, &event).map_err(io::Error::from)?;
            j.write_all(b"\n")?;
            j.flush()?;
            if self.sync {
                j.get_ref().sync_data()?;
            }
        }
        inner
            .apply(event)
            .map_err(|message| StoreError::Corrupt {
                path: self.path.clone().unwrap_or_default(),
                line: 0,
                message,
            })
    }

    /// Adds two tasks (premise, hypothesis) per machine-state example.
    /// Examples already in the store are left untouched.
    pub fn enqueue(
        &self,
        examples: &[NliExample],
        lexicon: &AbbrevLexicon,
    ) -> Result<EnqueueReport, StoreError> {
        if let Some(ex) = examples.iter().find(|e| e.state != State::Machine) {
            return Err(StoreError::NotMachineState(ex.uid.clone()));
        }
        let mut inner = self.lock();
        let mut created = 0;
        let mut present = 0;
        for ex in examples {
            if inner.example_index.contains_key(&ex.uid) {
                present += 1;
                continue;
            }
            self.commit(&mut inner, Event::Example { example: ex.clone() })?;
            for field in [Field::Premise, Field::Hypothesis] {
                let machine_text = ex.text(field).to_owned();
                let (suggested_text, rule_hits) = apply_with_hits(&machine_text, lexicon);
                let source_text = ex
                    .source
                    .as_ref()
                    .map(|s| match field {
                        Field::Premise => s.premise.clone(),
                        Field::Hypothesis => s.hypothesis.clone(),
                    })
                    .unwrap_or_default();
                let task = RefinementTask {
                    task_id: inner.tasks.len() as u64 + 1,
                    uid: ex.uid.clone(),
                    field,
                    source_text,
                    machine_text,
                    suggested_text,
                    rule_hits,
                    status: TaskStatus::Open,
                    claimant: None,
                    claim_expiry: None,
                    final_text: None,
                };
                self.commit(&mut inner, Event::Task { task })?;
                created += 1;
            }
        }
        Ok(EnqueueReport {
            created,
            already_present: present,
            total_tasks: inner.tasks.len() as u64,
        })
    }

    /// Claims the lowest-numbered open or lease-expired task. An annotator
    /// who already holds a live claim gets that task back.
    pub fn claim_next(&self, annotator: &str) -> Result<Option<RefinementTask>, StoreError> {
        if annotator.trim().is_empty() {
            return Err(StoreError::EmptyAnnotator);
        }
        let now = self.clock.now();
        let mut inner = self.lock();
        if let Some(t) = inner
            .tasks
            .iter()
            .find(|t| t.is_claim_live(now) && t.claimant.as_deref() == Some(annotator))
        {
            return Ok(Some(t.clone()));
        }
        let Some(task_id) = inner
            .tasks
            .iter()
            .find(|t| match t.status {
                TaskStatus::Open => true,
                TaskStatus::Claimed => !t.is_claim_live(now),
                TaskStatus::Submitted => false,
            })
            .map(|t| t.task_id)
        else {
            return Ok(None);
        };
        self.commit(
            &mut inner,
            Event::Claim {
                task_id,
                annotator: annotator.to_owned(),
                expiry: now + self.lease,
            },
        )?;
        Ok(inner.task_mut(task_id).cloned())
    }

    pub fn submit(
        &self,
        task_id: u64,
        annotator: &str,
        final_text: &str,
    ) -> Result<RefinementTask, StoreError> {
        if final_text.trim().is_empty() {
            return Err(StoreError::EmptyText);
        }
        let now = self.clock.now();
        let mut inner = self.lock();
        let task = inner.task_mut(task_id).ok_or(StoreError::NotFound(task_id))?;
        match task.status {
            TaskStatus::Submitted => return Err(StoreError::AlreadySubmitted(task_id)),
            TaskStatus::Open => return Err(StoreError::NotClaimed(task_id)),
            TaskStatus::Claimed => {}
        }
        if task.claimant.as_deref() != Some(annotator) {
            return Err(StoreError::WrongClaimant { task_id });
        }
        if !task.is_claim_live(now) {
            self.commit(&mut inner, Event::Release { task_id })?;
            return Err(StoreError::LeaseExpired(task_id));
        }
        self.commit(
            &mut inner,
            Event::Submit {
                task_id,
                annotator: annotator.to_owned(),
                final_text: final_text.to_owned(),
                at: now,
            },
        )?;
        Ok(inner.task_mut(task_id).cloned().expect("task exists"))
    }

    pub fn task(&self, task_id: u64) -> Option<RefinementTask> {
        self.lock().task_mut(task_id).cloned()
    }

    pub fn progress(&self) -> Progress {
        let now = self.clock.now();
        let inner = self.lock();
        let mut p = Progress {
            total: inner.tasks.len() as u64,
            ..Progress::default()
        };
        for t in &inner.tasks {
            match t.status {
                TaskStatus::Open => p.open += 1,
                TaskStatus::Claimed => {
                    p.claimed += 1;
                    if !t.is_claim_live(now) {
                        p.expired_claims += 1;
                    }
                }
                TaskStatus::Submitted => {
                    p.submitted += 1;
                    if let Some(a) = &t.claimant {
                        *p.submitted_by_annotator.entry(a.clone()).or_default() += 1;
                    }
                }
            }
        }
        p
    }

    /// Snapshot of every example in enqueue order.
    pub fn examples(&self) -> Vec<NliExample> {
        self.lock().examples.clone()
    }

    /// True when every task has been submitted (and there is at least one).
    pub fn export_ready(&self) -> bool {
        let p = self.progress();
        p.total > 0 && p.submitted == p.total
    }
}

fn replay(path: &Path, inner: &mut Inner) -> Result<(), StoreError> {
    let corrupt = |line: usize, message: String| StoreError::Corrupt {
        path: path.to_owned(),
        line,
        message,
    };
    let mut reader = BufReader::new(File::open(path)?);
    let mut buf = Vec::new();
    let mut good_len = 0u64;
    let mut line_no = 0;
    loop {
        buf.clear();
        let n = reader.read_until(b'\n', &mut buf)?;
        if n == 0 {
            break;
        }
        line_no += 1;
        if buf.last() != Some(&b'\n') {
            log::warn!("{}: dropping torn trailing journal line", path.display());
            break;
        }
        let text = std::str::from_utf8(&buf).map_err(|e| corrupt(line_no, e.to_string()))?;
        if line_no == 1 {
            let header: Header =
                serde_json::from_str(text).map_err(|e| corrupt(1, format!("bad header: {e}")))?;
            if header.format != STORE_FORMAT || header.version != STORE_VERSION {
                return Err(corrupt(1, format!("unsupported store {} v{}", header.format, header.version)));
            }
        } else {
            let event: Event =
                serde_json::from_str(text).map_err(|e| corrupt(line_no, e.to_string()))?;
            inner.apply(event).map_err(|m| corrupt(line_no, m))?;
        }
        good_len += n as u64;
    }
    if std::fs::metadata(path)?.len() != good_len {
        OpenOptions::new().write(true).open(path)?.set_len(good_len)?;
    }
    Ok(())
}
