//! Persistent job queue with a fixed worker pool.
//!
//! Jobs of one scene run strictly in submission order; jobs of different
//! scenes run in parallel up to the pool size. Every state transition is
//! written to `jobs.json`. On reopen, jobs that were running are queued
//! again, except that a job which already crashed a worker once is failed.
//! A job that panics is treated the same way.

use std::collections::{BTreeMap, BTreeSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::sync::{Arc, Condvar, Mutex, MutexGuard};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pipeline::ProgressEvent;
use crate::store::{write_atomic, ArtifactRef};

/// Starts allowed before a job counts as poison.
pub const MAX_ATTEMPTS: u32 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobKind {
    GenerateObject,
    TrainIdentities,
    Compose,
    Render,
    AlphaSweep,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobStatus {
    Queued,
    Running,
    Succeeded,
    Failed,
}

impl JobStatus {
    pub fn is_terminal(self) -> bool {
        matches!(self, JobStatus::Succeeded | JobStatus::Failed)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Job {
    pub job_id: String,
    pub scene_id: String,
    pub kind: JobKind,
    pub status: JobStatus,
    pub progress: f64,
    pub inputs_hash: String,
    pub params: serde_json::Value,
    pub outputs: Vec<ArtifactRef>,
    pub error: Option<String>,
    pub attempts: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProgressRecord {
    pub job_id: String,
    pub step: usize,
    pub total: usize,
    pub note: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LogEvent {
    Submitted,
    Started,
    Succeeded,
    Failed,
    Requeued,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub seq: u64,
    pub job_id: String,
    pub scene_id: String,
    pub event: LogEvent,
}

#[derive(Debug, Default, Serialize, Deserialize)]
struct Persisted {
    next_id: u64,
    seq: u64,
    jobs: BTreeMap<String, Job>,
    /// Submission order of every job.
    order: Vec<String>,
    history: Vec<LogEntry>,
}

#[derive(Default)]
struct Inner {
    data: Persisted,
    running_scenes: BTreeSet<String>,
    events: BTreeMap<String, Vec<ProgressRecord>>,
    shutdown: bool,
}

/// Executes one job; returns the artifacts it produced.
pub type Runner = dyn Fn(&Job, &mut dyn FnMut(ProgressEvent)) -> Result<Vec<ArtifactRef>> + Send + Sync;

struct Shared {
    inner: Mutex<Inner>,
    changed: Condvar,
    log_path: Option<PathBuf>,
    runner: Arc<Runner>,
}

impl Shared {
    fn lock(&self) -> MutexGuard<'_, Inner> {
        self.inner.lock().unwrap_or_else(|p| p.into_inner())
    }

    fn persist(&self, inner: &Inner) {
        if let Some(path) = &self.log_path {
            let bytes = serde_json::to_vec_pretty(&inner.data).expect("job log serializes");
            if let Err(e) = write_atomic(path, &bytes) {
                tracing::error!("cannot persist job log: {e}");
            }
        }
    }

    fn log(inner: &mut Inner, job: &Job, event: LogEvent) {
        inner.data.seq += 1;
        let entry = LogEntry {
            seq: inner.data.seq,
            job_id: job.job_id.clone(),
            scene_id: job.scene_id.clone(),
            event,
        };
        inner.data.history.push(entry);
    }

    /// Claims the oldest queued job whose scene is idle.
    fn claim(&self, inner: &mut Inner) -> Option<Job> {
        let id = inner.data.order.iter().find(|id| {
            let job = &inner.data.jobs[*id];
            job.status == JobStatus::Queued && !inner.running_scenes.contains(&job.scene_id)
        })?;
        let id = id.clone();
        let job = inner.data.jobs.get_mut(&id).expect("ordered ids exist");
        job.status = JobStatus::Running;
        job.attempts += 1;
        job.progress = 0.0;
        let job = job.clone();
        inner.running_scenes.insert(job.scene_id.clone());
        Self::log(inner, &job, LogEvent::Started);
        self.persist(inner);
        Some(job)
    }

    fn worker(self: Arc<Self>) {
        loop {
            let job = {
                let mut inner = self.lock();
                loop {
                    if inner.shutdown {
                        return;
                    }
                    if let Some(job) = self.claim(&mut inner) {
                        break job;
                    }
                    inner = self.changed.wait(inner).unwrap_or_else(|p| p.into_inner());
                }
            };
            let job_id = job.job_id.clone();
            let mut on_progress = |ev: ProgressEvent| {
                let mut inner = self.lock();
                if let Some(j) = inner.data.jobs.get_mut(&job_id) {
                    if ev.total > 0 {
                        j.progress = (ev.step as f64 / ev.total as f64).min(1.0);
                    }
                }
                inner.events.entry(job_id.clone()).or_default().push(ProgressRecord {
                    job_id: job_id.clone(),
                    step: ev.step,
                    total: ev.total,
                    note: ev.note,
                });
                drop(inner);
                self.changed.notify_all();
            };
            let outcome = catch_unwind(AssertUnwindSafe(|| (self.runner)(&job, &mut on_progress)));
            let mut inner = self.lock();
            inner.running_scenes.remove(&job.scene_id);
            let j = inner.data.jobs.get_mut(&job_id).expect("running job exists");
            let event = match outcome {
                Ok(Ok(outputs)) if !outputs.is_empty() => {
                    j.status = JobStatus::Succeeded;
                    j.progress = 1.0;
                    j.outputs = outputs;
                    j.error = None;
                    LogEvent::Succeeded
                }
                Ok(Ok(_)) => {
                    j.status = JobStatus::Failed;
                    j.error = Some("job produced no outputs".into());
                    LogEvent::Failed
                }
                Ok(Err(e)) => {
                    j.status = JobStatus::Failed;
                    j.error = Some(e.to_string());
                    LogEvent::Failed
                }
                Err(_) if j.attempts < MAX_ATTEMPTS => {
                    j.status = JobStatus::Queued;
                    LogEvent::Requeued
                }
                Err(_) => {
                    j.status = JobStatus::Failed;
                    j.error = Some(format!("job crashed its worker {} times", j.attempts));
                    LogEvent::Failed
                }
            };
            let j = j.clone();
            Self::log(&mut inner, &j, event);
            self.persist(&inner);
            drop(inner);
            self.changed.notify_all();
        }
    }
}

pub struct JobQueue {
    shared: Arc<Shared>,
    workers: Vec<JoinHandle<()>>,
}

impl JobQueue {
    /// Opens (or creates) the queue, recovering jobs left running by a crash,
    /// and starts `pool_size` workers.
    pub fn open(log_path: Option<PathBuf>, pool_size: usize, runner: Arc<Runner>) -> Result<Self> {
        if pool_size == 0 {
            return Err(Error::Config("pool size must be at least 1".into()));
        }
        let mut inner = Inner::default();
        if let Some(path) = &log_path {
            match std::fs::read(path) {
                Ok(bytes) => inner.data = serde_json::from_slice(&bytes)?,
                Err(e) if e.kind() == std::io::ErrorKind::NotFound => {}
                Err(e) => return Err(Error::io(path, e)),
            }
        }
        let interrupted: Vec<String> = inner
            .data
            .jobs
            .values()
            .filter(|j| j.status == JobStatus::Running)
            .map(|j| j.job_id.clone())
            .collect();
        for id in interrupted {
            let j = inner.data.jobs.get_mut(&id).expect("listed above");
            let event = if j.attempts < MAX_ATTEMPTS {
                j.status = JobStatus::Queued;
                LogEvent::Requeued
            } else {
                j.status = JobStatus::Failed;
                j.error = Some(format!("job crashed its worker {} times", j.attempts));
                LogEvent::Failed
            };
            let j = j.clone();
            Shared::log(&mut inner, &j, event);
        }
        let shared = Arc::new(Shared {
            inner: Mutex::new(inner),
            changed: Condvar::new(),
            log_path,
            runner,
        });
        shared.persist(&shared.lock());
        let workers = (0..pool_size)
            .map(|i| {
                let s = Arc::clone(&shared);
                std::thread::Builder::new()
                    .name(format!("job-worker-{i}"))
                    .spawn(move || s.worker())
                    .map_err(|e| Error::Config(format!("cannot start worker: {e}")))
            })
            .collect::<Result<_>>()?;
        Ok(Self { shared, workers })
    }

    pub fn submit(
        &self,
        scene_id: &str,
        kind: JobKind,
        params: serde_json::Value,
        inputs_hash: String,
    ) -> Job {
        let mut inner = self.shared.lock();
        inner.data.next_id += 1;
        let job = Job {
            job_id: format!("job-{:06}", inner.data.next_id),
            scene_id: scene_id.to_owned(),
            kind,
            status: JobStatus::Queued,
            progress: 0.0,
            inputs_hash,
            params,
            outputs: Vec::new(),
            error: None,
            attempts: 0,
        };
        inner.data.jobs.insert(job.job_id.clone(), job.clone());
        inner.data.order.push(job.job_id.clone());
        Shared::log(&mut inner, &job, LogEvent::Submitted);
        self.shared.persist(&inner);
        drop(inner);
        self.shared.changed.notify_all();
        job
    }

    pub fn get(&self, job_id: &str) -> Option<Job> {
        self.shared.lock().data.jobs.get(job_id).cloned()
    }

    pub fn history(&self) -> Vec<LogEntry> {
        self.shared.lock().data.history.clone()
    }

    /// Blocks until the job is terminal or the timeout passes.
    pub fn wait(&self, job_id: &str, timeout: Duration) -> Option<Job> {
        let deadline = Instant::now() + timeout;
        let mut inner = self.shared.lock();
        loop {
            let job = inner.data.jobs.get(job_id)?.clone();
            let now = Instant::now();
            if job.status.is_terminal() || now >= deadline {
                return Some(job);
            }
            inner = self
                .shared
                .changed
                .wait_timeout(inner, deadline - now)
                .unwrap_or_else(|p| p.into_inner())
                .0;
        }
    }

    /// Progress records from index `from` on, waiting up to `timeout` for at
    /// least one new record unless the job is already terminal. Returns
    /// `None` for unknown jobs.
    pub fn events_since(
        &self,
        job_id: &str,
        from: usize,
        timeout: Duration,
    ) -> Option<(Vec<ProgressRecord>, Job)> {
        let deadline = Instant::now() + timeout;
        let mut inner = self.shared.lock();
        loop {
            let job = inner.data.jobs.get(job_id)?.clone();
            let events = inner
                .events
                .get(job_id)
                .map(|e| e.get(from..).unwrap_or_default().to_vec())
                .unwrap_or_default();
            let now = Instant::now();
            if !events.is_empty() || job.status.is_terminal() || now >= deadline {
                return Some((events, job));
            }
            inner = self
                .shared
                .changed
                .wait_timeout(inner, deadline - now)
                .unwrap_or_else(|p| p.into_inner())
                .0;
        }
    }
}

impl Drop for JobQueue {
    fn drop(&mut self) {
        self.shared.lock().shutdown = true;
        self.shared.changed.notify_all();
        for w in self.workers.drain(..) {
            let _ = w.join();
        }
    }
}
