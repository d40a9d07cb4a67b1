//! The dispatch service and a fixed pool of in-process workers, presented
//! to the engine as one execution provider. Jobs are unbundled into wire
//! tasks at submit; member results are rebuilt from RESULT events. The
//! wire carries no placement or cancel messages, so host avoidance is
//! meaningless here (one machine) and cancel only suppresses reporting.

use std::collections::{HashMap, HashSet};
use std::path::PathBuf;
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use super::protocol::{StagePair, WireTask};
use super::service::{ManualAllocator, ProvisionPolicy, Service, ServiceCfg, TaskDone};
use super::worker::{run_worker, WorkerCfg, EXIT_MISSING_OUTPUT};
use crate::provider::{
    provider_error, FailureClass, JobSpec, MemberResult, Provider, ProviderError, ProviderEvent,
};

#[derive(Debug, Clone)]
pub struct FalkonPoolCfg {
    pub workers: usize,
    /// Executor slots per worker.
    pub slots: u32,
    /// Binary invoked as `<runner> app <name> <args..>` for bare app names.
    pub runner: PathBuf,
    /// Worker sandboxes are created under here.
    pub work_root: PathBuf,
    pub state_dir: Option<PathBuf>,
    pub keep_sandbox: bool,
    /// Injected per-task crash probability, exercised by recovery tests.
    pub crash_rate: f64,
    pub seed: u64,
    /// 0 binds an ephemeral port.
    pub port: u16,
}

impl FalkonPoolCfg {
    pub fn new(work_root: PathBuf, runner: PathBuf) -> Self {
        FalkonPoolCfg {
            workers: 4,
            slots: 1,
            runner,
            work_root,
            state_dir: None,
            keep_sandbox: false,
            crash_rate: 0.0,
            seed: 0,
            port: 0,
        }
    }
}

struct JobTrack {
    remaining: HashSet<u64>,
}

pub struct FalkonPool {
    svc: Service,
    origin: Instant,
    jobs: HashMap<u64, JobTrack>,
    task_to_job: HashMap<u64, u64>,
    reported: HashSet<u64>,
    raw_stash: Vec<TaskDone>,
    threads: Vec<JoinHandle<std::io::Result<()>>>,
}

impl FalkonPool {
    pub fn new(cfg: FalkonPoolCfg) -> Result<Self, ProviderError> {
        if cfg.workers == 0 {
            return Err(provider_error("falkon pool needs at least one worker"));
        }
        let svc_cfg = ServiceCfg {
            port: cfg.port,
            // The pool owns its workers for the life of the run; idle
            // release would shrink it permanently.
            policy: ProvisionPolicy {
                min_workers: cfg.workers,
                max_workers: cfg.workers,
                slots_per_node: cfg.slots,
                idle_timeout_s: 1e9,
                ..ProvisionPolicy::default()
            },
            ..ServiceCfg::default()
        };
        let svc = Service::start(svc_cfg, Box::new(ManualAllocator))
            .map_err(|e| provider_error(format!("cannot start task service: {e}")))?;
        let mut threads = Vec::new();
        for i in 0..cfg.workers {
            let mut wcfg = WorkerCfg::new(
                format!("127.0.0.1:{}", svc.port()),
                cfg.slots,
                cfg.runner.clone(),
            );
            wcfg.worker_id = format!("fwk{i}");
            wcfg.work_root = cfg.work_root.join(format!("fwk{i}"));
            wcfg.state_dir = cfg.state_dir.clone();
            wcfg.keep_sandbox = cfg.keep_sandbox;
            wcfg.crash_rate = cfg.crash_rate;
            wcfg.seed = cfg.seed.wrapping_add(i as u64);
            wcfg.reconnect_max_failures = 5;
            let h = std::thread::Builder::new()
                .name(format!("falkon-worker-{i}"))
                .spawn(move || run_worker(wcfg))
                .map_err(|e| provider_error(format!("cannot start worker thread: {e}")))?;
            threads.push(h);
        }
        Ok(FalkonPool {
            svc,
            origin: Instant::now(),
            jobs: HashMap::new(),
            task_to_job: HashMap::new(),
            reported: HashSet::new(),
            raw_stash: Vec::new(),
            threads,
        })
    }

    pub fn stats(&self) -> super::service::ServiceStats {
        self.svc.stats()
    }

    fn translate(&mut self, td: TaskDone, out: &mut Vec<ProviderEvent>) {
        let Some(&job_id) = self.task_to_job.get(&td.task_id) else { return };
        let Some(track) = self.jobs.get_mut(&job_id) else { return };
        if !self.reported.insert(td.task_id) {
            return;
        }
        track.remaining.remove(&td.task_id);
        let end_s = self.origin.elapsed().as_secs_f64();
        let start_s = (end_s - td.duration_ms as f64 / 1000.0).max(0.0);
        let failure = match td.exit {
            0 => None,
            EXIT_MISSING_OUTPUT => Some(FailureClass::AppError),
            // The wire carries no stderr, so everything else retries.
            _ => Some(FailureClass::Transient),
        };
        let message = match td.exit {
            0 => String::new(),
            EXIT_MISSING_OUTPUT => "missing declared output".into(),
            c => format!("exit {c} on {}", td.host),
        };
        out.push(ProviderEvent::MemberDone {
            job_id,
            result: MemberResult {
                task_id: td.task_id,
                exit_code: Some(td.exit),
                signal: None,
                failure,
                message,
                host: td.host,
                work_dir: String::new(),
                start_s,
                end_s,
                user_cpu_s: 0.0,
                system_cpu_s: 0.0,
                max_rss_kb: 0,
                usage_measured: false,
            },
        });
        if self.jobs[&job_id].remaining.is_empty() {
            self.jobs.remove(&job_id);
            out.push(ProviderEvent::JobDone { job_id, at_s: end_s });
        }
    }
}

impl Provider for FalkonPool {
    fn kind(&self) -> &'static str {
        "falkon"
    }

    fn submit(&mut self, spec: JobSpec, _now: f64) -> Result<(), ProviderError> {
        if spec.members.is_empty() {
            return Err(provider_error("job with no members"));
        }
        let mut remaining = HashSet::new();
        for (idx, m) in spec.members.iter().enumerate() {
            let task = WireTask {
                task_id: m.task_id,
                exe: m.executable.clone(),
                args: m.args.clone(),
                dir: format!("{}-m{idx}", spec.sandbox_label),
                stageins: m
                    .stage_ins
                    .iter()
                    .map(|(src, rel)| StagePair {
                        from: src.display().to_string(),
                        to: rel.clone(),
                    })
                    .collect(),
                stageouts: m
                    .stage_outs
                    .iter()
                    .map(|(rel, dest)| StagePair {
                        from: rel.clone(),
                        to: dest.display().to_string(),
                    })
                    .collect(),
            };
            self.svc.enqueue(task).map_err(provider_error)?;
            remaining.insert(m.task_id);
            self.task_to_job.insert(m.task_id, spec.job_id);
        }
        self.jobs.insert(spec.job_id, JobTrack { remaining });
        Ok(())
    }

    fn cancel(&mut self, job_id: u64, _now: f64) {
        // Tasks already on the wire still run; their results are dropped.
        self.jobs.remove(&job_id);
    }

    fn suspend(&mut self, _now: f64) -> Result<(), ProviderError> {
        Err(provider_error("falkon provider cannot hold queued work"))
    }

    fn resume(&mut self, _now: f64) -> Result<(), ProviderError> {
        Ok(())
    }

    fn in_flight(&self) -> usize {
        self.jobs.len()
    }

    fn next_event_at(&self) -> Option<f64> {
        None
    }

    fn poll(&mut self, _now: f64) -> Vec<ProviderEvent> {
        let mut raw = std::mem::take(&mut self.raw_stash);
        raw.extend(self.svc.try_events());
        let mut out = Vec::new();
        for td in raw {
            self.translate(td, &mut out);
        }
        out
    }

    fn wait(&mut self, timeout: Duration) -> bool {
        if !self.raw_stash.is_empty() {
            return true;
        }
        match self.svc.wait_event(timeout) {
            Some(td) => {
                self.raw_stash.push(td);
                true
            }
            None => false,
        }
    }
}

impl Drop for FalkonPool {
    fn drop(&mut self) {
        self.svc.shutdown();
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
    }
}
