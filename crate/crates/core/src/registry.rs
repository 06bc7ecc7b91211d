//! Append-only run registry and the sweep dispatcher.
//!
//! Layout under the registry directory:
//!
//! ```text
//! registry.jsonl            one RegistryEntry per line, append-only
//! runs/<id[..2]>/<id>.json  one RunRecord per completed run
//! ```
//!
//! The latest entry for a run id is its status. `done` is terminal.

use std::collections::{BTreeMap, HashSet};
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::mpsc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pipelines::{ExperimentKind, RunSpec};
use crate::training::RunRecord;

pub const LOG_FILE: &str = "registry.jsonl";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Pending,
    Running,
    Done,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegistryEntry {
    pub run_id: String,
    pub kind: ExperimentKind,
    pub status: RunStatus,
    /// Record path relative to the registry root; set on `done`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub record: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_clock_secs: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    /// The full spec, written once with the `pending` entry.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spec: Option<RunSpec>,
}

impl RegistryEntry {
    fn new(spec: &RunSpec, id: &str, status: RunStatus) -> Self {
        RegistryEntry { run_id: id.to_string(), kind: spec.kind, status, record: None, wall_clock_secs: None, error: None, spec: None }
    }
}

#[derive(Debug, Clone)]
pub struct Registry {
    root: PathBuf,
}

impl Registry {
    pub fn open(root: impl AsRef<Path>) -> Result<Self> {
        let root = root.as_ref().to_path_buf();
        fs::create_dir_all(root.join("runs"))?;
        Ok(Registry { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn log_path(&self) -> PathBuf {
        self.root.join(LOG_FILE)
    }

    pub fn record_rel_path(id: &str) -> String {
        format!("runs/{}/{id}.json", &id[..2.min(id.len())])
    }

    /// Every complete, parseable line. A torn final line is ignored.
    pub fn entries(&self) -> Result<Vec<RegistryEntry>> {
        let file = match File::open(self.log_path()) {
            Ok(f) => f,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
            Err(e) => return Err(e.into()),
        };
        let mut out = Vec::new();
        let mut reader = BufReader::new(file);
        let mut line = String::new();
        loop {
            line.clear();
            if reader.read_line(&mut line)? == 0 {
                break;
            }
            if !line.ends_with('\n') {
                break;
            }
            if let Ok(e) = serde_json::from_str::<RegistryEntry>(line.trim_end()) {
                out.push(e);
            }
        }
        Ok(out)
    }

    /// Current status per run id; a `done` entry is never superseded.
    pub fn latest(&self) -> Result<BTreeMap<String, RegistryEntry>> {
        let mut map: BTreeMap<String, RegistryEntry> = BTreeMap::new();
        for e in self.entries()? {
            match map.get_mut(&e.run_id) {
                Some(cur) if cur.status == RunStatus::Done => {}
                Some(cur) => {
                    let spec = cur.spec.take();
                    *cur = e;
                    if cur.spec.is_none() {
                        cur.spec = spec;
                    }
                }
                None => {
                    map.insert(e.run_id.clone(), e);
                }
            }
        }
        Ok(map)
    }

    pub fn load_record(&self, id: &str) -> Result<RunRecord> {
        let text = fs::read_to_string(self.root.join(Self::record_rel_path(id)))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Records for `specs` that are done, plus the specs that are not.
    pub fn collect(&self, specs: &[RunSpec]) -> Result<(Vec<RunRecord>, Vec<RunSpec>)> {
        let latest = self.latest()?;
        let mut found = Vec::new();
        let mut missing = Vec::new();
        let mut seen = HashSet::new();
        for s in specs {
            let id = s.run_id();
            if !seen.insert(id.clone()) {
                continue;
            }
            match latest.get(&id) {
                Some(e) if e.status == RunStatus::Done => found.push(self.load_record(&id)?),
                _ => missing.push(s.clone()),
            }
        }
        Ok((found, missing))
    }

    /// Every done record of `kind`, in run-id order.
    pub fn done_records(&self, kind: ExperimentKind) -> Result<Vec<RunRecord>> {
        self.latest()?
            .values()
            .filter(|e| e.kind == kind && e.status == RunStatus::Done)
            .map(|e| self.load_record(&e.run_id))
            .collect()
    }

    /// Status and record JSON per run id, ignoring wall-clock times and
    /// entry order.
    pub fn snapshot(&self) -> Result<BTreeMap<String, (RunStatus, Option<String>)>> {
        self.latest()?
            .into_iter()
            .map(|(id, e)| {
                let rec = match e.status {
                    RunStatus::Done => Some(fs::read_to_string(self.root.join(Self::record_rel_path(&id)))?),
                    _ => None,
                };
                Ok((id, (e.status, rec)))
            })
            .collect()
    }

    fn write_record(&self, rec: &RunRecord) -> Result<String> {
        let rel = Self::record_rel_path(&rec.run_id);
        let path = self.root.join(&rel);
        fs::create_dir_all(path.parent().expect("record paths have a parent"))?;
        let tmp = path.with_extension("json.tmp");
        {
            let mut f = File::create(&tmp)?;
            f.write_all(serde_json::to_string(rec)?.as_bytes())?;
            f.sync_all()?;
        }
        fs::rename(&tmp, &path)?;
        Ok(rel)
    }

    fn writer(&self) -> Result<Writer> {
        let mut file = OpenOptions::new().create(true).read(true).append(true).open(self.log_path())?;
        let len = file.metadata()?.len();
        if len > 0 {
            let mut last = [0u8; 1];
            file.seek(SeekFrom::Start(len - 1))?;
            file.read_exact(&mut last)?;
            if last[0] != b'\n' {
                // Terminates a torn line left by a crash so it stays unparseable.
                file.write_all(b"\n")?;
            }
        }
        Ok(Writer { file })
    }
}

struct Writer {
    file: File,
}

impl Writer {
    fn append(&mut self, entry: &RegistryEntry) -> Result<()> {
        let mut line = serde_json::to_string(entry)?;
        line.push('\n');
        self.file.write_all(line.as_bytes())?;
        self.file.sync_data()?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DispatchOptions {
    pub workers: usize,
    /// Re-run entries whose latest status is `failed`.
    pub retry_failed: bool,
    /// Start no more than this many runs (for staged sweeps).
    pub max_runs: Option<usize>,
    pub progress: bool,
}

impl Default for DispatchOptions {
    fn default() -> Self {
        DispatchOptions { workers: 1, retry_failed: true, max_runs: None, progress: false }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct DispatchSummary {
    pub total: usize,
    pub skipped: usize,
    pub executed: usize,
    pub failed: Vec<(String, String)>,
}

enum Event {
    Started(usize),
    Finished(usize, Result<RunRecord>, f64),
}

/// Runs every spec not yet done, at most `workers` at a time. The calling
/// thread is the only registry writer.
pub fn dispatch(registry: &Registry, specs: &[RunSpec], opts: &DispatchOptions) -> Result<DispatchSummary> {
    if opts.workers == 0 {
        return Err(Error::InvalidConfig("workers must be at least 1".into()));
    }
    let latest = registry.latest()?;
    let mut seen = HashSet::new();
    let mut todo: Vec<(String, &RunSpec)> = Vec::new();
    let mut summary = DispatchSummary::default();
    for s in specs {
        let id = s.run_id();
        if !seen.insert(id.clone()) {
            continue;
        }
        summary.total += 1;
        match latest.get(&id).map(|e| e.status) {
            Some(RunStatus::Done) => summary.skipped += 1,
            Some(RunStatus::Failed) if !opts.retry_failed => summary.skipped += 1,
            _ => todo.push((id, s)),
        }
    }
    if let Some(m) = opts.max_runs {
        todo.truncate(m);
    }
    let mut writer = registry.writer()?;
    for (id, s) in &todo {
        if !latest.contains_key(id) {
            writer.append(&RegistryEntry { spec: Some((*s).clone()), ..RegistryEntry::new(s, id, RunStatus::Pending) })?;
        }
    }
    let workers = opts.workers.min(todo.len().max(1));
    let next = AtomicUsize::new(0);
    let (tx, rx) = mpsc::channel();
    let mut first_err: Option<Error> = None;
    std::thread::scope(|scope| {
        for _ in 0..workers {
            let tx = tx.clone();
            let next = &next;
            let todo = &todo;
            scope.spawn(move || loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= todo.len() || tx.send(Event::Started(i)).is_err() {
                    break;
                }
                let t0 = Instant::now();
                let res = todo[i].1.execute();
                if tx.send(Event::Finished(i, res, t0.elapsed().as_secs_f64())).is_err() {
                    break;
                }
            });
        }
        drop(tx);
        let mut finished = 0;
        for ev in rx {
            if first_err.is_some() {
                continue;
            }
            let step = match ev {
                Event::Started(i) => {
                    let (id, s) = &todo[i];
                    writer.append(&RegistryEntry::new(s, id, RunStatus::Running))
                }
                Event::Finished(i, res, secs) => {
                    finished += 1;
                    let (id, s) = &todo[i];
                    summary.executed += 1;
                    let entry = match res {
                        Ok(rec) => registry.write_record(&rec).map(|rel| RegistryEntry {
                            record: Some(rel),
                            wall_clock_secs: Some(secs),
                            ..RegistryEntry::new(s, id, RunStatus::Done)
                        }),
                        Err(e) => {
                            summary.failed.push((id.clone(), e.to_string()));
                            Ok(RegistryEntry {
                                wall_clock_secs: Some(secs),
                                error: Some(e.to_string()),
                                ..RegistryEntry::new(s, id, RunStatus::Failed)
                            })
                        }
                    };
                    if opts.progress {
                        eprintln!("[{finished}/{}] {} {} {:.1}s", todo.len(), s.kind.as_str(), describe(s), secs);
                    }
                    entry.and_then(|e| writer.append(&e))
                }
            };
            if let Err(e) = step {
                // Stop handing out work; in-flight runs drain and are dropped.
                next.store(usize::MAX / 2, Ordering::SeqCst);
                first_err = Some(e);
            }
        }
    });
    match first_err {
        Some(e) => Err(e),
        None => Ok(summary),
    }
}

/// Short human label for a run: data, width and seed.
pub fn describe(spec: &RunSpec) -> String {
    use crate::training::DataSource;
    let data = match &spec.data {
        DataSource::Modular(t) => format!("p={} {} a={}", t.prime, t.operation, t.train_fraction),
        DataSource::Random(r) => format!("V={} n={}", r.vocab_size, r.n),
    };
    format!("{data} d={} L={} seed={}", spec.model.width, spec.model.depth, spec.seed)
}
