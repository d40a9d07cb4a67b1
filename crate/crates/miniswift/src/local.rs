//! Local execution provider: every job gets a sandbox directory, inputs
//! are hard-linked in (copied when linking fails), the app runs as a child
//! process with its own stdout/stderr capture, and outputs are copied to
//! their destinations when the member exits cleanly. Resource usage comes
//! from wait4, so it reflects the child alone.
//!
//! Bundles share one job sandbox but each member runs in its own
//! subdirectory; members execute sequentially and report individually.

use std::collections::{HashSet, VecDeque};
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::mpsc::{Receiver, Sender};
use std::sync::{mpsc, Arc, Condvar, Mutex};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use regex::RegexSet;

use crate::provider::{
    provider_error, FailureClass, JobSpec, MemberResult, Provider, ProviderError, ProviderEvent,
    TaskExec,
};
use crate::synth;

#[derive(Debug, Clone)]
pub struct LocalCfg {
    pub max_parallel: usize,
    pub keep_sandbox: bool,
    /// Sandboxes are created under here, one per job.
    pub jobs_dir: PathBuf,
    /// Binary invoked as `<runner> app <name> <args..>` for bare app names.
    pub synth_runner: PathBuf,
    /// Passed through to synthetic apps that keep cross-attempt state.
    pub synth_state_dir: Option<PathBuf>,
    pub host: String,
    /// stderr patterns that mark a failure as host trouble. Everything
    /// else nonzero classifies as transient.
    pub host_error_patterns: Vec<String>,
}

impl LocalCfg {
    pub fn new(jobs_dir: PathBuf, synth_runner: PathBuf) -> Self {
        LocalCfg {
            max_parallel: 4,
            keep_sandbox: false,
            jobs_dir,
            synth_runner,
            synth_state_dir: None,
            host: std::env::var("HOSTNAME").unwrap_or_else(|_| "localhost".into()),
            host_error_patterns: vec![
                "node failure".into(),
                "out of memory".into(),
                "No route to host".into(),
                "Connection refused".into(),
                "cannot allocate".into(),
            ],
        }
    }
}

struct Queue {
    jobs: VecDeque<JobSpec>,
    cancelled: HashSet<u64>,
    suspended: bool,
    shutdown: bool,
}

struct Shared {
    q: Mutex<Queue>,
    cv: Condvar,
    cfg: LocalCfg,
    origin: Instant,
    classifier: Classifier,
    tx: Sender<ProviderEvent>,
    in_flight: AtomicUsize,
}

pub struct LocalRunner {
    shared: Arc<Shared>,
    rx: Receiver<ProviderEvent>,
    stash: Vec<ProviderEvent>,
    workers: Vec<JoinHandle<()>>,
}

struct Classifier {
    host: RegexSet,
}

impl Classifier {
    fn new(cfg: &LocalCfg) -> Result<Self, ProviderError> {
        let ci = |pats: &[String]| -> Result<RegexSet, ProviderError> {
            let wrapped: Vec<String> = pats.iter().map(|p| format!("(?i){p}")).collect();
            RegexSet::new(&wrapped).map_err(|e| provider_error(format!("bad failure pattern: {e}")))
        };
        Ok(Classifier { host: ci(&cfg.host_error_patterns)? })
    }

    /// Host patterns win; anything else nonzero counts as transient, so a
    /// plain crash gets retried rather than failing the task outright.
    fn classify(&self, stderr_tail: &str) -> FailureClass {
        if self.host.is_match(stderr_tail) {
            FailureClass::HostError
        } else {
            FailureClass::Transient
        }
    }
}

impl LocalRunner {
    pub fn new(cfg: LocalCfg) -> Result<Self, ProviderError> {
        if cfg.max_parallel == 0 {
            return Err(provider_error("local provider needs max_parallel >= 1"));
        }
        fs::create_dir_all(&cfg.jobs_dir)
            .map_err(|e| provider_error(format!("cannot create {}: {e}", cfg.jobs_dir.display())))?;
        let (tx, rx) = mpsc::channel();
        let classifier = Classifier::new(&cfg)?;
        let shared = Arc::new(Shared {
            q: Mutex::new(Queue {
                jobs: VecDeque::new(),
                cancelled: HashSet::new(),
                suspended: false,
                shutdown: false,
            }),
            cv: Condvar::new(),
            cfg,
            origin: Instant::now(),
            classifier,
            tx,
            in_flight: AtomicUsize::new(0),
        });
        let workers = (0..shared.cfg.max_parallel)
            .map(|i| {
                let sh = Arc::clone(&shared);
                std::thread::Builder::new()
                    .name(format!("local-worker-{i}"))
                    .spawn(move || worker_loop(sh))
                    .expect("spawn worker thread")
            })
            .collect();
        Ok(LocalRunner { shared, rx, stash: Vec::new(), workers })
    }
}

impl Drop for LocalRunner {
    fn drop(&mut self) {
        {
            let mut q = self.shared.q.lock().unwrap();
            q.shutdown = true;
        }
        self.shared.cv.notify_all();
        for w in self.workers.drain(..) {
            let _ = w.join();
        }
    }
}

impl Provider for LocalRunner {
    fn kind(&self) -> &'static str {
        "local"
    }

    fn submit(&mut self, spec: JobSpec, _now: f64) -> Result<(), ProviderError> {
        if spec.members.is_empty() {
            return Err(provider_error("job with no members"));
        }
        self.shared.in_flight.fetch_add(1, Ordering::SeqCst);
        {
            let mut q = self.shared.q.lock().unwrap();
            q.jobs.push_back(spec);
        }
        self.shared.cv.notify_one();
        Ok(())
    }

    fn cancel(&mut self, job_id: u64, _now: f64) {
        let mut q = self.shared.q.lock().unwrap();
        let before = q.jobs.len();
        q.jobs.retain(|j| j.job_id != job_id);
        if q.jobs.len() < before {
            self.shared.in_flight.fetch_sub(1, Ordering::SeqCst);
        } else {
            // Already running; members launched after this point are skipped.
            q.cancelled.insert(job_id);
        }
    }

    fn suspend(&mut self, _now: f64) -> Result<(), ProviderError> {
        self.shared.q.lock().unwrap().suspended = true;
        Ok(())
    }

    fn resume(&mut self, _now: f64) -> Result<(), ProviderError> {
        self.shared.q.lock().unwrap().suspended = false;
        self.shared.cv.notify_all();
        Ok(())
    }

    fn in_flight(&self) -> usize {
        self.shared.in_flight.load(Ordering::SeqCst)
    }

    fn next_event_at(&self) -> Option<f64> {
        None
    }

    fn poll(&mut self, _now: f64) -> Vec<ProviderEvent> {
        let mut out = std::mem::take(&mut self.stash);
        while let Ok(ev) = self.rx.try_recv() {
            out.push(ev);
        }
        out
    }

    fn wait(&mut self, timeout: Duration) -> bool {
        if !self.stash.is_empty() {
            return true;
        }
        match self.rx.recv_timeout(timeout) {
            Ok(ev) => {
                self.stash.push(ev);
                true
            }
            Err(_) => false,
        }
    }
}

fn worker_loop(sh: Arc<Shared>) {
    loop {
        let job = {
            let mut q = sh.q.lock().unwrap();
            loop {
                if q.shutdown {
                    return;
                }
                if !q.suspended {
                    if let Some(job) = q.jobs.pop_front() {
                        break job;
                    }
                }
                q = sh.cv.wait(q).unwrap();
            }
        };
        run_job(&sh, job);
    }
}

fn is_cancelled(sh: &Shared, job_id: u64) -> bool {
    sh.q.lock().unwrap().cancelled.contains(&job_id)
}

fn run_job(sh: &Shared, job: JobSpec) {
    let sandbox = sh.cfg.jobs_dir.join(&job.sandbox_label);
    let mut any_failed = false;
    if let Err(e) = fs::create_dir_all(&sandbox) {
        for m in &job.members {
            let r = synthetic_failure(sh, m, &sandbox, format!("cannot create sandbox: {e}"));
            let _ = sh.tx.send(ProviderEvent::MemberDone { job_id: job.job_id, result: r });
        }
        sh.in_flight.fetch_sub(1, Ordering::SeqCst);
        let _ = sh.tx.send(ProviderEvent::JobDone { job_id: job.job_id, at_s: sh.origin.elapsed().as_secs_f64() });
        return;
    }
    for (idx, member) in job.members.iter().enumerate() {
        if is_cancelled(sh, job.job_id) {
            break;
        }
        let result = run_member(sh, member, &sandbox, idx);
        any_failed |= !result.ok();
        let _ = sh.tx.send(ProviderEvent::MemberDone { job_id: job.job_id, result });
    }
    if !(sh.cfg.keep_sandbox || job.keep_sandbox || any_failed) {
        let _ = fs::remove_dir_all(&sandbox);
    }
    sh.q.lock().unwrap().cancelled.remove(&job.job_id);
    // Drop the in-flight count before the final event so a consumer that
    // sees JobDone also sees this job gone.
    sh.in_flight.fetch_sub(1, Ordering::SeqCst);
    let _ = sh.tx.send(ProviderEvent::JobDone { job_id: job.job_id, at_s: sh.origin.elapsed().as_secs_f64() });
}

fn synthetic_failure(sh: &Shared, member: &TaskExec, dir: &Path, message: String) -> MemberResult {
    let now = sh.origin.elapsed().as_secs_f64();
    MemberResult {
        task_id: member.task_id,
        exit_code: None,
        signal: None,
        failure: Some(FailureClass::Transient),
        message,
        host: sh.cfg.host.clone(),
        work_dir: dir.display().to_string(),
        start_s: now,
        end_s: now,
        user_cpu_s: 0.0,
        system_cpu_s: 0.0,
        max_rss_kb: 0,
        usage_measured: false,
    }
}

/// Hard-link `src` to `dest`, copying when the link cannot be made.
pub(crate) fn stage_in_one(src: &Path, dest: &Path) -> io::Result<()> {
    if let Some(parent) = dest.parent() {
        fs::create_dir_all(parent)?;
    }
    if dest.exists() {
        fs::remove_file(dest)?;
    }
    if fs::hard_link(src, dest).is_ok() {
        return Ok(());
    }
    fs::copy(src, dest).map(|_| ())
}

struct WaitOutcome {
    exit_code: Option<i32>,
    signal: Option<i32>,
    user_cpu_s: f64,
    system_cpu_s: f64,
    max_rss_kb: u64,
}

/// Reap the child with wait4 so we get its rusage along with the status.
fn wait4_child(pid: i32) -> io::Result<WaitOutcome> {
    let mut status: libc::c_int = 0;
    let mut usage: libc::rusage = unsafe { std::mem::zeroed() };
    loop {
        let r = unsafe { libc::wait4(pid, &mut status, 0, &mut usage) };
        if r == pid {
            break;
        }
        if r == -1 {
            let err = io::Error::last_os_error();
            if err.raw_os_error() == Some(libc::EINTR) {
                continue;
            }
            return Err(err);
        }
    }
    let (exit_code, signal) = if libc::WIFEXITED(status) {
        (Some(libc::WEXITSTATUS(status)), None)
    } else if libc::WIFSIGNALED(status) {
        (None, Some(libc::WTERMSIG(status)))
    } else {
        (None, None)
    };
    let tv = |t: libc::timeval| t.tv_sec as f64 + t.tv_usec as f64 / 1e6;
    Ok(WaitOutcome {
        exit_code,
        signal,
        user_cpu_s: tv(usage.ru_utime),
        system_cpu_s: tv(usage.ru_stime),
        max_rss_kb: usage.ru_maxrss.max(0) as u64,
    })
}

fn tail_of_file(path: &Path, limit: usize) -> String {
    match fs::read(path) {
        Ok(bytes) => {
            let start = bytes.len().saturating_sub(limit);
            String::from_utf8_lossy(&bytes[start..]).into_owned()
        }
        Err(_) => String::new(),
    }
}

fn run_member(sh: &Shared, member: &TaskExec, sandbox: &Path, idx: usize) -> MemberResult {
    let mdir = sandbox.join(format!("m{idx}"));
    let start_s = sh.origin.elapsed().as_secs_f64();
    let fail = |message: String, class: FailureClass| MemberResult {
        task_id: member.task_id,
        exit_code: None,
        signal: None,
        failure: Some(class),
        message,
        host: sh.cfg.host.clone(),
        work_dir: mdir.display().to_string(),
        start_s,
        end_s: sh.origin.elapsed().as_secs_f64(),
        user_cpu_s: 0.0,
        system_cpu_s: 0.0,
        max_rss_kb: 0,
        usage_measured: false,
    };

    if let Err(e) = fs::create_dir_all(&mdir) {
        return fail(format!("cannot create work dir: {e}"), FailureClass::Transient);
    }
    for (src, rel) in &member.stage_ins {
        if let Err(e) = stage_in_one(src, &mdir.join(rel)) {
            return fail(format!("cannot stage in {}: {e}", src.display()), FailureClass::AppError);
        }
    }

    let bare = !member.executable.contains('/');
    let mut cmd = if bare {
        let mut c = Command::new(&sh.cfg.synth_runner);
        c.arg("app").arg(&member.executable).args(&member.args);
        c
    } else {
        let mut c = Command::new(&member.executable);
        c.args(&member.args);
        c
    };
    let joined = |v: &[(String, PathBuf)]| -> String {
        v.iter().map(|(rel, _)| rel.as_str()).collect::<Vec<_>>().join("\n")
    };
    let in_rels: String = member
        .stage_ins
        .iter()
        .map(|(_, rel)| rel.as_str())
        .collect::<Vec<_>>()
        .join("\n");
    cmd.current_dir(&mdir)
        .env(synth::ENV_INPUTS, in_rels)
        .env(synth::ENV_OUTPUTS, joined(&member.stage_outs))
        .stdin(Stdio::null());
    if let Some(state) = &sh.cfg.synth_state_dir {
        cmd.env(synth::ENV_STATE, state);
    }
    let stdout_path = mdir.join("stdout.txt");
    let stderr_path = mdir.join("stderr.txt");
    match (fs::File::create(&stdout_path), fs::File::create(&stderr_path)) {
        (Ok(o), Ok(e)) => {
            cmd.stdout(Stdio::from(o)).stderr(Stdio::from(e));
        }
        _ => return fail("cannot create stdio capture files".into(), FailureClass::Transient),
    }

    let child = match cmd.spawn() {
        Ok(c) => c,
        Err(e) => return fail(format!("cannot spawn {}: {e}", member.executable), FailureClass::AppError),
    };
    let outcome = match wait4_child(child.id() as i32) {
        Ok(o) => o,
        Err(e) => return fail(format!("wait failed: {e}"), FailureClass::Transient),
    };
    let end_s = sh.origin.elapsed().as_secs_f64();

    let mut failure = None;
    let mut message = String::new();
    if outcome.exit_code == Some(0) {
        for (rel, dest) in &member.stage_outs {
            let src = mdir.join(rel);
            if !src.exists() {
                failure = Some(FailureClass::AppError);
                message = format!("missing output {rel}");
                break;
            }
            if let Some(parent) = dest.parent() {
                let _ = fs::create_dir_all(parent);
            }
            if let Err(e) = fs::copy(&src, dest) {
                failure = Some(FailureClass::Transient);
                message = format!("cannot stage out {rel}: {e}");
                break;
            }
        }
    } else {
        let tail = tail_of_file(&stderr_path, 4096);
        failure = Some(sh.classifier.classify(&tail));
        message = match (outcome.exit_code, outcome.signal) {
            (Some(c), _) => format!("exit {c}: {}", tail.trim_end()),
            (None, Some(s)) => format!("killed by signal {s}: {}", tail.trim_end()),
            _ => format!("abnormal termination: {}", tail.trim_end()),
        };
    }

    MemberResult {
        task_id: member.task_id,
        exit_code: outcome.exit_code,
        signal: outcome.signal,
        failure,
        message,
        host: sh.cfg.host.clone(),
        work_dir: mdir.display().to_string(),
        start_s,
        end_s,
        user_cpu_s: outcome.user_cpu_s,
        system_cpu_s: outcome.system_cpu_s,
        max_rss_kb: outcome.max_rss_kb,
        usage_measured: true,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sh_member(task_id: u64, script: &str) -> TaskExec {
        TaskExec {
            task_id,
            executable: "/bin/sh".into(),
            args: vec!["-c".into(), script.into()],
            stage_ins: vec![],
            stage_outs: vec![],
            duration_s: 0.0,
        }
    }

    fn drain_job(p: &mut LocalRunner) -> Vec<MemberResult> {
        let mut out = Vec::new();
        loop {
            if p.wait(Duration::from_secs(10)) {
                for ev in p.poll(0.0) {
                    match ev {
                        ProviderEvent::MemberDone { result, .. } => out.push(result),
                        ProviderEvent::JobDone { .. } => {
                            if p.in_flight() == 0 {
                                return out;
                            }
                        }
                    }
                }
            } else {
                panic!("timed out waiting for local job");
            }
        }
    }

    fn runner(dir: &Path, parallel: usize) -> LocalRunner {
        let mut cfg = LocalCfg::new(dir.join("jobs"), PathBuf::from("/bin/false"));
        cfg.max_parallel = parallel;
        LocalRunner::new(cfg).unwrap()
    }

    fn job(id: u64, members: Vec<TaskExec>) -> JobSpec {
        JobSpec {
            job_id: id,
            sandbox_label: format!("j{id}"),
            members,
            avoid_hosts: vec![],
            keep_sandbox: false,
        }
    }

    #[test]
    fn stages_run_and_report_usage() {
        let dir = tempfile::tempdir().unwrap();
        let src = dir.path().join("input.txt");
        fs::write(&src, "payload\n").unwrap();
        let dest = dir.path().join("results/out.txt");
        let mut m = sh_member(1, "cat input.txt > out.txt");
        m.stage_ins = vec![(src, "input.txt".into())];
        m.stage_outs = vec![("out.txt".into(), dest.clone())];
        let mut p = runner(dir.path(), 1);
        p.submit(job(1, vec![m]), 0.0).unwrap();
        let results = drain_job(&mut p);
        assert_eq!(results.len(), 1);
        let r = &results[0];
        assert!(r.ok(), "{:?}", r);
        assert_eq!(r.exit_code, Some(0));
        assert!(r.usage_measured);
        assert!(r.end_s >= r.start_s);
        assert!(r.work_dir.contains("j1"));
        assert_eq!(fs::read_to_string(&dest).unwrap(), "payload\n");
        // Sandbox removed on clean success.
        assert!(!dir.path().join("jobs/j1").exists());
    }

    #[test]
    fn keep_sandbox_preserves_work_dirs() {
        let dir = tempfile::tempdir().unwrap();
        let mut p = runner(dir.path(), 1);
        let mut spec = job(2, vec![sh_member(1, "echo kept > marker.txt")]);
        spec.keep_sandbox = true;
        p.submit(spec, 0.0).unwrap();
        drain_job(&mut p);
        assert!(dir.path().join("jobs/j2/m0/marker.txt").exists());
    }

    #[test]
    fn missing_declared_output_fails_the_member() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = sh_member(1, "true");
        m.stage_outs = vec![("never.txt".into(), dir.path().join("never.txt"))];
        let mut p = runner(dir.path(), 1);
        p.submit(job(3, vec![m]), 0.0).unwrap();
        let results = drain_job(&mut p);
        assert_eq!(results[0].failure, Some(FailureClass::AppError));
        assert!(results[0].message.contains("missing output never.txt"));
        // Failed sandboxes stay for inspection.
        assert!(dir.path().join("jobs/j3").exists());
    }

    #[test]
    fn stderr_patterns_classify_failures() {
        let dir = tempfile::tempdir().unwrap();
        let mut p = runner(dir.path(), 1);
        p.submit(job(1, vec![sh_member(1, "echo 'node failure: eth0 down' >&2; exit 3")]), 0.0).unwrap();
        assert_eq!(drain_job(&mut p)[0].failure, Some(FailureClass::HostError));
        p.submit(job(2, vec![sh_member(1, "echo 'transient blip' >&2; exit 2")]), 0.0).unwrap();
        assert_eq!(drain_job(&mut p)[0].failure, Some(FailureClass::Transient));
        p.submit(job(3, vec![sh_member(1, "echo boom >&2; exit 9")]), 0.0).unwrap();
        let r = drain_job(&mut p);
        assert_eq!(r[0].failure, Some(FailureClass::Transient));
        assert_eq!(r[0].exit_code, Some(9));
        assert!(r[0].message.contains("boom"));
    }

    #[test]
    fn signals_are_reported() {
        let dir = tempfile::tempdir().unwrap();
        let mut p = runner(dir.path(), 1);
        p.submit(job(1, vec![sh_member(1, "kill -9 $$")]), 0.0).unwrap();
        let r = drain_job(&mut p);
        assert_eq!(r[0].exit_code, None);
        assert_eq!(r[0].signal, Some(9));
        assert_eq!(r[0].failure, Some(FailureClass::Transient));
    }

    #[test]
    fn bundle_members_share_a_sandbox_but_not_a_work_dir() {
        let dir = tempfile::tempdir().unwrap();
        let out_a = dir.path().join("a.txt");
        let out_b = dir.path().join("b.txt");
        let mut a = sh_member(10, "echo A > a.txt");
        a.stage_outs = vec![("a.txt".into(), out_a.clone())];
        let mut b = sh_member(11, "echo B > b.txt");
        b.stage_outs = vec![("b.txt".into(), out_b.clone())];
        let mut p = runner(dir.path(), 1);
        p.submit(job(7, vec![a, b]), 0.0).unwrap();
        let results = drain_job(&mut p);
        assert_eq!(results.len(), 2);
        assert!(results.iter().all(|r| r.ok()));
        assert_ne!(results[0].work_dir, results[1].work_dir);
        assert!(results[0].work_dir.contains("j7") && results[1].work_dir.contains("j7"));
        assert_eq!(fs::read_to_string(out_a).unwrap(), "A\n");
        assert_eq!(fs::read_to_string(out_b).unwrap(), "B\n");
    }

    #[test]
    fn parallelism_is_bounded_by_max_parallel() {
        let dir = tempfile::tempdir().unwrap();
        let mut p = runner(dir.path(), 1);
        let t0 = Instant::now();
        p.submit(job(1, vec![sh_member(1, "sleep 0.1")]), 0.0).unwrap();
        p.submit(job(2, vec![sh_member(2, "sleep 0.1")]), 0.0).unwrap();
        drain_job(&mut p);
        assert!(t0.elapsed() >= Duration::from_millis(180), "jobs overlapped on 1 worker");
    }

    #[test]
    fn suspend_holds_queued_jobs_and_cancel_drops_them() {
        let dir = tempfile::tempdir().unwrap();
        let mut p = runner(dir.path(), 1);
        p.suspend(0.0).unwrap();
        p.submit(job(1, vec![sh_member(1, "echo hi")]), 0.0).unwrap();
        p.submit(job(2, vec![sh_member(2, "echo hi")]), 0.0).unwrap();
        assert!(!p.wait(Duration::from_millis(100)));
        p.cancel(2, 0.0);
        assert_eq!(p.in_flight(), 1);
        p.resume(0.0).unwrap();
        let results = drain_job(&mut p);
        assert_eq!(results.len(), 1);
        assert_eq!(results[0].task_id, 1);
    }

    #[test]
    fn stage_in_links_or_copies() {
        let dir = tempfile::tempdir().unwrap();
        let src = dir.path().join("data.bin");
        fs::write(&src, b"12345").unwrap();
        let dest = dir.path().join("sb/nested/data.bin");
        stage_in_one(&src, &dest).unwrap();
        assert_eq!(fs::read(&dest).unwrap(), b"12345");
        // Restaging over an existing file replaces it.
        fs::write(&src, b"67890").unwrap();
        stage_in_one(&src, &dest).unwrap();
        assert_eq!(fs::read(&dest).unwrap(), b"67890");
    }
}
