//! Execution provider interface. A provider accepts jobs, runs them
//! somewhere (a local sandbox, a simulated batch system, a task service),
//! and reports member completions back to the engine event loop.
//!
//! A job carries one or more members. Bundles built by the task clusterer
//! run sequentially in a single sandbox; each member still reports its own
//! exit status so failure handling stays per task.

use std::path::PathBuf;
use std::time::Duration;

#[derive(Debug, Clone)]
pub struct TaskExec {
    pub task_id: u64,
    pub executable: String,
    pub args: Vec<String>,
    /// (source path, sandbox-relative name)
    pub stage_ins: Vec<(PathBuf, String)>,
    /// (sandbox-relative name, destination path)
    pub stage_outs: Vec<(String, PathBuf)>,
    /// Declared runtime in seconds, used by simulated providers.
    pub duration_s: f64,
}

#[derive(Debug, Clone)]
pub struct JobSpec {
    pub job_id: u64,
    /// Names the job's sandbox directory under the provider's jobs dir.
    pub sandbox_label: String,
    pub members: Vec<TaskExec>,
    /// Hosts the scheduler has suspended; the provider must not place the
    /// job on any of these.
    pub avoid_hosts: Vec<String>,
    pub keep_sandbox: bool,
}

impl JobSpec {
    pub fn total_duration(&self) -> f64 {
        self.members.iter().map(|m| m.duration_s).sum()
    }
}

/// Coarse failure class the scheduler's policy keys on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FailureClass {
    /// Worth retrying where it ran.
    Transient,
    /// The host itself looks sick; suspend it and run elsewhere.
    HostError,
    /// The application failed deterministically.
    AppError,
}

#[derive(Debug, Clone)]
pub struct MemberResult {
    pub task_id: u64,
    pub exit_code: Option<i32>,
    pub signal: Option<i32>,
    pub failure: Option<FailureClass>,
    pub message: String,
    pub host: String,
    /// Directory the member ran in; empty for simulated execution.
    pub work_dir: String,
    pub start_s: f64,
    pub end_s: f64,
    pub user_cpu_s: f64,
    pub system_cpu_s: f64,
    pub max_rss_kb: u64,
    /// False for simulated runs, which have no real resource usage.
    pub usage_measured: bool,
}

impl MemberResult {
    pub fn ok(&self) -> bool {
        self.exit_code == Some(0) && self.failure.is_none()
    }
}

#[derive(Debug, Clone)]
pub enum ProviderEvent {
    /// One member of a job finished (well or badly).
    MemberDone { job_id: u64, result: MemberResult },
    /// All members finished and the job's resources are released.
    JobDone { job_id: u64, at_s: f64 },
}

#[derive(Debug, Clone)]
pub struct ProviderError {
    pub message: String,
}

impl std::fmt::Display for ProviderError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.message)
    }
}

impl std::error::Error for ProviderError {}

pub fn provider_error(message: impl Into<String>) -> ProviderError {
    ProviderError { message: message.into() }
}

pub trait Provider: Send {
    fn kind(&self) -> &'static str;

    /// Accept a job. `now` is engine time; simulated providers treat it as
    /// the release time. Must not block.
    fn submit(&mut self, spec: JobSpec, now: f64) -> Result<(), ProviderError>;

    /// Best-effort cancel of a queued or running job. Events already
    /// emitted stand; no further member events arrive after this returns.
    fn cancel(&mut self, job_id: u64, now: f64);

    /// Hold queued work (running jobs finish). Unsupported providers say so.
    fn suspend(&mut self, now: f64) -> Result<(), ProviderError>;
    fn resume(&mut self, now: f64) -> Result<(), ProviderError>;

    /// Jobs accepted but not yet fully reported.
    fn in_flight(&self) -> usize;

    /// Simulated providers: time of the next internal event, if any.
    /// Wall-clock providers return None.
    fn next_event_at(&self) -> Option<f64>;

    /// Drain events due at or before `now`. Simulated providers advance
    /// their internal state up to `now`; wall providers drain their inbox.
    fn poll(&mut self, now: f64) -> Vec<ProviderEvent>;

    /// Wall providers: park until an event arrives or the timeout passes.
    /// Returns true if polling is likely to yield something. Simulated
    /// providers return immediately.
    fn wait(&mut self, timeout: Duration) -> bool;
}
