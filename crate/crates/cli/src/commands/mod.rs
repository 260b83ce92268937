pub mod corpus;
pub mod eval;
pub mod nli;

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;
use vipubmed_core::jsonl::JsonlReader;
use vipubmed_core::translate::{BackendKind, RunOptions, TranslatorBackend};

use crate::{data, BackendArgs, CliError, Context, Plan};

pub(crate) fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(data(dir.display()))?;
    }
    File::create(path)
        .map(BufWriter::new)
        .map_err(data(path.display()))
}

pub(crate) fn finish(mut out: BufWriter<File>, path: &Path) -> Result<(), CliError> {
    out.flush().map_err(data(path.display()))
}

pub(crate) fn open_jsonl<T: DeserializeOwned>(
    path: &Path,
) -> Result<JsonlReader<BufReader<File>, T>, CliError> {
    let file = File::open(path).map_err(data(path.display()))?;
    Ok(JsonlReader::new(BufReader::new(file)))
}

pub(crate) fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, CliError> {
    open_jsonl(path)?
        .collect::<Result<Vec<T>, _>>()
        .map_err(data(path.display()))
}

pub(crate) fn write_jsonl<'a, T: Serialize + 'a>(
    path: &Path,
    records: impl IntoIterator<Item = &'a T>,
) -> Result<usize, CliError> {
    let mut out = create(path)?;
    let mut n = 0;
    for r in records {
        vipubmed_core::jsonl::write_record(&mut out, r).map_err(data(path.display()))?;
        n += 1;
    }
    finish(out, path)?;
    Ok(n)
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut out = create(path)?;
    serde_json::to_writer_pretty(&mut out, value).map_err(data(path.display()))?;
    out.write_all(b"\n").map_err(data(path.display()))?;
    finish(out, path)
}

/// Prints the plan and reports whether the command should stop here.
pub(crate) fn plan(
    ctx: &Context,
    command: &'static str,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
    settings: serde_json::Value,
) -> bool {
    if ctx.dry_run {
        crate::print_json(&Plan {
            command,
            global_seed: ctx.seed,
            jobs: ctx.jobs,
            inputs,
            outputs,
            settings,
        });
    }
    ctx.dry_run
}

/// Merges backend flags over the `[translate]` config section.
pub(crate) fn resolve_backend(
    ctx: &Context,
    args: &BackendArgs,
) -> Result<(TranslatorBackend, RunOptions), CliError> {
    let base = ctx.config.translate.backend.clone();
    let mut backend = match (&args.lexicon, &args.endpoint, base) {
        (Some(lexicon), _, base) => {
            let mut b = TranslatorBackend::mock(lexicon);
            if let Some(base) = base {
                b.batch_size = base.batch_size;
                b.retry = base.retry;
            }
            b
        }
        (None, Some(endpoint), base) => {
            let mut b = base.unwrap_or_else(|| TranslatorBackend::mock(""));
            let timeout_secs = match b.kind {
                BackendKind::HttpService { timeout_secs, .. } => timeout_secs,
                _ => 60,
            };
            b.kind = BackendKind::HttpService {
                endpoint: endpoint.clone(),
                timeout_secs,
            };
            b
        }
        (None, None, Some(base)) => base,
        (None, None, None) => {
            return Err(CliError::Usage(
                "no translation backend: pass --lexicon or --endpoint, or set [translate.backend]".into(),
            ))
        }
    };
    if let (Some(t), BackendKind::HttpService { timeout_secs, .. }) = (args.timeout_secs, &mut backend.kind) {
        *timeout_secs = t;
    }
    if let Some(n) = args.batch_size {
        backend.batch_size = n;
    }
    if let Some(n) = args.retry_budget {
        backend.retry.budget = n;
    }
    backend
        .validate()
        .map_err(|e| CliError::Usage(e.to_string()))?;
    let mut opts = RunOptions::from_backend(&backend);
    opts.parallelism = ctx.jobs;
    opts.checkpoint_interval = args
        .checkpoint_interval
        .or(ctx.config.translate.checkpoint_interval)
        .unwrap_or(1);
    if opts.checkpoint_interval == 0 {
        return Err(CliError::Usage("checkpoint interval must be at least 1".into()));
    }
    Ok((backend, opts))
}

/// Numbered output files of at most `per_shard` records each, opened
/// lazily so an empty stream writes nothing.
pub(crate) struct ShardWriter {
    dir: PathBuf,
    stem: String,
    ext: &'static str,
    per_shard: usize,
    in_current: usize,
    current: Option<(BufWriter<File>, PathBuf)>,
    pub names: Vec<PathBuf>,
}

impl ShardWriter {
    pub fn new(dir: &Path, stem: &str, ext: &'static str, per_shard: usize) -> Self {
        ShardWriter {
            dir: dir.to_owned(),
            stem: stem.to_owned(),
            ext,
            per_shard,
            in_current: 0,
            current: None,
            names: Vec::new(),
        }
    }

    pub fn write<T: Serialize>(&mut self, record: &T) -> Result<(), CliError> {
        if self.current.is_none() || self.in_current == self.per_shard {
            self.close_current()?;
            let name = PathBuf::from(format!("{}-{:05}.{}", self.stem, self.names.len(), self.ext));
            let path = self.dir.join(&name);
            self.current = Some((create(&path)?, path));
            self.names.push(name);
            self.in_current = 0;
        }
        let (out, path) = self.current.as_mut().expect("shard open");
        vipubmed_core::jsonl::write_record(out, record).map_err(data(path.display()))?;
        self.in_current += 1;
        Ok(())
    }

    fn close_current(&mut self) -> Result<(), CliError> {
        if let Some((out, path)) = self.current.take() {
            finish(out, &path)?;
        }
        Ok(())
    }

    pub fn finish(mut self) -> Result<Vec<PathBuf>, CliError> {
        self.close_current()?;
        Ok(self.names)
    }
}
