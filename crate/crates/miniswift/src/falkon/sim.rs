//! Virtual-clock model of the dispatch service: a pre-provisioned worker
//! pool fed by a single dispatcher, with a fixed per-task overhead instead
//! of batch-system queue waits. Built on the batch simulator with the
//! queue-wait term zeroed; the allocation latency term models how long the
//! first worker allocation takes to come up.

use std::time::Duration;

use crate::provider::{JobSpec, Provider, ProviderError, ProviderEvent};
use crate::simbatch::{BatchModel, SimBatch};

#[derive(Debug, Clone)]
pub struct FalkonSimCfg {
    pub workers: usize,
    /// Executor slots per worker.
    pub slots: usize,
    /// Dispatcher handover rate, tasks per second.
    pub dispatch_rate: f64,
    /// Fixed per-task service overhead added to every member's runtime.
    pub task_overhead_s: f64,
    /// Time for the initial worker allocation to come online.
    pub first_alloc_latency_s: f64,
    /// Run synthetic apps for real so outputs appear on disk.
    pub side_effects: bool,
    pub host_prefix: String,
}

impl Default for FalkonSimCfg {
    fn default() -> Self {
        FalkonSimCfg {
            workers: 8,
            slots: 1,
            dispatch_rate: 487.0,
            task_overhead_s: 0.45,
            first_alloc_latency_s: 81.0,
            side_effects: true,
            host_prefix: "fwk".into(),
        }
    }
}

pub struct FalkonSim {
    inner: SimBatch,
    task_overhead_s: f64,
}

impl FalkonSim {
    pub fn new(cfg: FalkonSimCfg) -> Result<Self, ProviderError> {
        let model = BatchModel {
            nodes: cfg.workers,
            slots_per_node: cfg.slots,
            dispatch_rate: cfg.dispatch_rate,
            queue_wait_base_s: 0.0,
            allocation_latency_s: cfg.first_alloc_latency_s,
        };
        let inner = SimBatch::new(model, cfg.side_effects, &cfg.host_prefix)?;
        Ok(FalkonSim { inner, task_overhead_s: cfg.task_overhead_s })
    }
}

impl Provider for FalkonSim {
    fn kind(&self) -> &'static str {
        "falkon-sim"
    }

    fn submit(&mut self, mut spec: JobSpec, now: f64) -> Result<(), ProviderError> {
        for m in &mut spec.members {
            m.duration_s += self.task_overhead_s;
        }
        self.inner.submit(spec, now)
    }

    fn cancel(&mut self, job_id: u64, now: f64) {
        self.inner.cancel(job_id, now)
    }

    fn suspend(&mut self, now: f64) -> Result<(), ProviderError> {
        self.inner.suspend(now)
    }

    fn resume(&mut self, now: f64) -> Result<(), ProviderError> {
        self.inner.resume(now)
    }

    fn in_flight(&self) -> usize {
        self.inner.in_flight()
    }

    fn next_event_at(&self) -> Option<f64> {
        self.inner.next_event_at()
    }

    fn poll(&mut self, now: f64) -> Vec<ProviderEvent> {
        self.inner.poll(now)
    }

    fn wait(&mut self, timeout: Duration) -> bool {
        self.inner.wait(timeout)
    }
}
