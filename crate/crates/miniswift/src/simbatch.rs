//! Simulated batch system. Models the behavior that dominates coarse-grain
//! cluster scheduling: a serialized dispatcher that hands at most one job
//! to the resource manager per 1/rate seconds, a base queue wait per job,
//! a fixed pool of node slots, and an allocation latency before each
//! node's first start.
//!
//! Dispatch convention, used consistently by the standalone trace function
//! and the engine-facing provider: jobs leave the queue in eligibility
//! order (release + queue wait, ties by submission order); job k is handed
//! over at max(dispatcher_free, eligible) + 1/rate; it starts on the
//! earliest-free slot no sooner than that handover.

use std::cmp::Reverse;
use std::collections::{BinaryHeap, HashMap, VecDeque};
use std::time::Duration;

use crate::provider::{
    provider_error, FailureClass, JobSpec, MemberResult, Provider, ProviderError, ProviderEvent,
};
use crate::synth;
use crate::util::Tf;

#[derive(Debug, Clone)]
pub struct BatchModel {
    pub nodes: usize,
    pub slots_per_node: usize,
    pub dispatch_rate: f64,
    pub queue_wait_base_s: f64,
    pub allocation_latency_s: f64,
}

impl BatchModel {
    pub fn new(nodes: usize, slots_per_node: usize, dispatch_rate: f64) -> Self {
        BatchModel {
            nodes,
            slots_per_node,
            dispatch_rate,
            queue_wait_base_s: 0.0,
            allocation_latency_s: 0.0,
        }
    }

    pub fn slots(&self) -> usize {
        self.nodes * self.slots_per_node
    }

    fn validate(&self) -> Result<(), ProviderError> {
        if self.nodes == 0 || self.slots_per_node == 0 {
            return Err(provider_error("batch model needs at least one node slot"));
        }
        if !(self.dispatch_rate > 0.0) {
            return Err(provider_error("batch model dispatch rate must be positive"));
        }
        if self.queue_wait_base_s < 0.0 || self.allocation_latency_s < 0.0 {
            return Err(provider_error("batch model latencies must be nonnegative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct BatchTrace {
    /// Dispatcher handover time per job, input order.
    pub dispatches: Vec<f64>,
    pub starts: Vec<f64>,
    pub ends: Vec<f64>,
    pub makespan: f64,
}

/// Schedule a set of (release, duration) jobs through the model and report
/// per-job times. Pure function of its inputs.
pub fn simulate_batch(jobs: &[(f64, f64)], model: &BatchModel) -> BatchTrace {
    model.validate().expect("invalid batch model");
    let mut order: Vec<usize> = (0..jobs.len()).collect();
    order.sort_by_key(|&i| (Tf(jobs[i].0 + model.queue_wait_base_s), i));

    let mut slots: BinaryHeap<Reverse<(Tf, usize)>> = (0..model.slots())
        .map(|s| Reverse((Tf(model.allocation_latency_s), s)))
        .collect();
    let gap = 1.0 / model.dispatch_rate;
    let mut dispatcher_free = 0.0_f64;

    let mut dispatches = vec![0.0; jobs.len()];
    let mut starts = vec![0.0; jobs.len()];
    let mut ends = vec![0.0; jobs.len()];
    let mut makespan = 0.0_f64;
    for &i in &order {
        let (release, duration) = jobs[i];
        let eligible = release + model.queue_wait_base_s;
        let handover = dispatcher_free.max(eligible) + gap;
        dispatcher_free = handover;
        let Reverse((Tf(free), slot)) = slots.pop().expect("slot pool is nonempty");
        let start = handover.max(free);
        let end = start + duration;
        slots.push(Reverse((Tf(end), slot)));
        dispatches[i] = handover;
        starts[i] = start;
        ends[i] = end;
        makespan = makespan.max(end);
    }
    BatchTrace { dispatches, starts, ends, makespan }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Cal {
    Member { job_id: u64, idx: usize },
    JobEnd { job_id: u64 },
}

struct InFlight {
    spec: JobSpec,
    host: String,
    cancelled: bool,
}

/// Engine-facing provider over the same model. Bundles run their members
/// back to back on one slot; member completions surface at their simulated
/// end times so downstream work can fire before the job itself ends.
pub struct SimBatch {
    model: BatchModel,
    side_effects: bool,
    host_prefix: String,
    queue: VecDeque<(f64, JobSpec)>,
    slots: BinaryHeap<Reverse<(Tf, usize)>>,
    calendar: BinaryHeap<Reverse<(Tf, u64, Cal)>>,
    running: HashMap<u64, InFlight>,
    dispatcher_free: f64,
    suspended: bool,
    seq: u64,
    out: Vec<ProviderEvent>,
}

impl SimBatch {
    pub fn new(model: BatchModel, side_effects: bool, host_prefix: &str) -> Result<Self, ProviderError> {
        model.validate()?;
        let slots = (0..model.slots())
            .map(|s| Reverse((Tf(model.allocation_latency_s), s)))
            .collect();
        Ok(SimBatch {
            model,
            side_effects,
            host_prefix: host_prefix.to_string(),
            queue: VecDeque::new(),
            slots,
            calendar: BinaryHeap::new(),
            running: HashMap::new(),
            dispatcher_free: 0.0,
            suspended: false,
            seq: 0,
            out: Vec::new(),
        })
    }

    fn host_of_slot(&self, slot: usize) -> String {
        format!("{}.node{:03}", self.host_prefix, slot / self.model.slots_per_node)
    }

    fn next_dispatch_at(&self) -> Option<f64> {
        if self.suspended {
            return None;
        }
        let (eligible, _) = self.queue.front()?;
        Some(self.dispatcher_free.max(*eligible) + 1.0 / self.model.dispatch_rate)
    }

    fn dispatch_head(&mut self, handover: f64) {
        let (_, spec) = self.queue.pop_front().expect("dispatch with empty queue");
        self.dispatcher_free = handover;
        let Reverse((Tf(free), slot)) = self.slots.pop().expect("slot pool is nonempty");
        let start = handover.max(free);
        let end = start + spec.total_duration();
        self.slots.push(Reverse((Tf(end), slot)));
        let mut at = start;
        for (idx, m) in spec.members.iter().enumerate() {
            at += m.duration_s;
            self.seq += 1;
            self.calendar.push(Reverse((Tf(at), self.seq, Cal::Member { job_id: spec.job_id, idx })));
        }
        self.seq += 1;
        self.calendar.push(Reverse((Tf(end), self.seq, Cal::JobEnd { job_id: spec.job_id })));
        let host = self.host_of_slot(slot);
        self.running.insert(spec.job_id, InFlight { spec, host, cancelled: false });
    }

    fn fire(&mut self, at: f64, cal: Cal) {
        match cal {
            Cal::Member { job_id, idx } => {
                let Some(fl) = self.running.get(&job_id) else { return };
                if fl.cancelled {
                    return;
                }
                let member = &fl.spec.members[idx];
                let mut failure = None;
                let mut message = String::new();
                let mut exit_code = Some(0);
                if self.side_effects {
                    if let Err(e) = synth::execute_direct(member) {
                        failure = Some(FailureClass::AppError);
                        message = e;
                        exit_code = Some(1);
                    }
                }
                self.out.push(ProviderEvent::MemberDone {
                    job_id,
                    result: MemberResult {
                        task_id: member.task_id,
                        exit_code,
                        signal: None,
                        failure,
                        message,
                        host: fl.host.clone(),
                        work_dir: String::new(),
                        start_s: at - member.duration_s,
                        end_s: at,
                        user_cpu_s: 0.0,
                        system_cpu_s: 0.0,
                        max_rss_kb: 0,
                        usage_measured: false,
                    },
                });
            }
            Cal::JobEnd { job_id } => {
                if let Some(fl) = self.running.remove(&job_id) {
                    if !fl.cancelled {
                        self.out.push(ProviderEvent::JobDone { job_id, at_s: at });
                    }
                }
            }
        }
    }

    /// Run the model forward to `to`: dispatch whatever becomes eligible
    /// and fire calendar events, interleaved in time order.
    fn advance(&mut self, to: f64) {
        loop {
            let disp = self.next_dispatch_at();
            let cal = self.calendar.peek().map(|Reverse((Tf(t), _, _))| *t);
            let next = match (disp, cal) {
                (Some(d), Some(c)) => d.min(c),
                (Some(d), None) => d,
                (None, Some(c)) => c,
                (None, None) => break,
            };
            if next > to {
                break;
            }
            if disp.is_some_and(|d| d <= next) {
                self.dispatch_head(next);
            } else {
                let Reverse((Tf(t), _, ev)) = self.calendar.pop().expect("peeked event");
                self.fire(t, ev);
            }
        }
    }
}

impl Provider for SimBatch {
    fn kind(&self) -> &'static str {
        "simbatch"
    }

    fn submit(&mut self, spec: JobSpec, now: f64) -> Result<(), ProviderError> {
        if spec.members.is_empty() {
            return Err(provider_error("job with no members"));
        }
        self.queue.push_back((now + self.model.queue_wait_base_s, spec));
        Ok(())
    }

    fn cancel(&mut self, job_id: u64, _now: f64) {
        self.queue.retain(|(_, s)| s.job_id != job_id);
        if let Some(fl) = self.running.get_mut(&job_id) {
            fl.cancelled = true;
        }
    }

    fn suspend(&mut self, _now: f64) -> Result<(), ProviderError> {
        self.suspended = true;
        Ok(())
    }

    fn resume(&mut self, now: f64) -> Result<(), ProviderError> {
        self.suspended = false;
        self.dispatcher_free = self.dispatcher_free.max(now);
        Ok(())
    }

    fn in_flight(&self) -> usize {
        self.queue.len() + self.running.len()
    }

    fn next_event_at(&self) -> Option<f64> {
        let disp = self.next_dispatch_at();
        let cal = self.calendar.peek().map(|Reverse((Tf(t), _, _))| *t);
        match (disp, cal) {
            (Some(d), Some(c)) => Some(d.min(c)),
            (Some(d), None) => Some(d),
            (None, Some(c)) => Some(c),
            (None, None) => None,
        }
    }

    fn poll(&mut self, now: f64) -> Vec<ProviderEvent> {
        self.advance(now);
        std::mem::take(&mut self.out)
    }

    fn wait(&mut self, _timeout: Duration) -> bool {
        true
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::provider::TaskExec;

    fn uniform(n: usize, t: f64) -> Vec<(f64, f64)> {
        vec![(0.0, t); n]
    }

    fn efficiency(n: usize, t: f64, model: &BatchModel) -> f64 {
        let trace = simulate_batch(&uniform(n, t), model);
        let ideal = n as f64 * t / model.slots() as f64;
        ideal / trace.makespan
    }

    #[test]
    fn dispatch_bound_efficiency_matches_measured_points() {
        // 64 uniform jobs, 64 slots, 11 dispatches per second. The short,
        // medium, and long task points land where the measured stack did.
        let m = BatchModel::new(64, 1, 11.0);
        assert!((efficiency(64, 50.0, &m) - 0.8958).abs() < 5e-4);
        assert!((efficiency(64, 100.0, &m) - 0.9450).abs() < 5e-4);
        assert!((efficiency(64, 1000.0, &m) - 0.9942).abs() < 5e-4);
    }

    #[test]
    fn dispatch_bound_makespan_is_closed_form() {
        let m = BatchModel::new(8, 2, 4.0);
        let trace = simulate_batch(&uniform(40, 2.0), &m);
        // Dispatch-bound regime: rate * duration = 8 <= 16 slots, so the
        // last job leaves the dispatcher at N/rate and finishes t later.
        assert!((trace.makespan - (40.0 / 4.0 + 2.0)).abs() < 1e-9);
    }

    #[test]
    fn large_site_long_campaign_efficiency() {
        let m = BatchModel::new(1000, 1, 1.0);
        let e = efficiency(1_000_000, 900.0, &m);
        assert!((e - 0.8992).abs() < 1e-4, "efficiency {e}");
    }

    #[test]
    fn serialized_dispatch_keeps_minimum_spacing() {
        use rand::Rng;
        let mut rng = crate::util::seeded_rng(42);
        let jobs: Vec<(f64, f64)> = (0..200)
            .map(|_| (rng.gen_range(0.0..30.0), rng.gen_range(0.1..5.0)))
            .collect();
        let m = BatchModel::new(4, 2, 3.0);
        let trace = simulate_batch(&jobs, &m);
        let mut d = trace.dispatches.clone();
        d.sort_by(|a, b| a.total_cmp(b));
        for w in d.windows(2) {
            assert!(w[1] - w[0] >= 1.0 / 3.0 - 1e-9, "dispatches {} {}", w[0], w[1]);
        }
        for i in 0..jobs.len() {
            assert!(trace.dispatches[i] >= jobs[i].0 + 1.0 / 3.0 - 1e-9);
            assert!(trace.starts[i] >= trace.dispatches[i] - 1e-9);
            assert!((trace.ends[i] - trace.starts[i] - jobs[i].1).abs() < 1e-9);
        }
    }

    #[test]
    fn concurrency_never_exceeds_slot_count() {
        use rand::Rng;
        let mut rng = crate::util::seeded_rng(7);
        let jobs: Vec<(f64, f64)> = (0..300)
            .map(|_| (rng.gen_range(0.0..5.0), rng.gen_range(0.5..4.0)))
            .collect();
        let m = BatchModel::new(3, 2, 50.0);
        let trace = simulate_batch(&jobs, &m);
        let mut edges: Vec<(Tf, i32)> = Vec::new();
        for i in 0..jobs.len() {
            edges.push((Tf(trace.starts[i]), 1));
            edges.push((Tf(trace.ends[i]), -1));
        }
        edges.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
        let mut level = 0;
        for (_, delta) in edges {
            level += delta;
            assert!(level <= m.slots() as i32, "level {level}");
        }
    }

    #[test]
    fn allocation_latency_delays_first_start_per_node() {
        let mut m = BatchModel::new(2, 1, 1000.0);
        m.allocation_latency_s = 100.0;
        let trace = simulate_batch(&uniform(4, 1.0), &m);
        let mut starts = trace.starts.clone();
        starts.sort_by(|a, b| a.total_cmp(b));
        assert!(starts[0] >= 100.0);
        assert!(starts[1] >= 100.0);
        // Second wave reuses allocated nodes with no further latency.
        assert!((starts[2] - 101.0).abs() < 1e-6 && (starts[3] - 101.0).abs() < 1e-6);
    }

    #[test]
    fn queue_wait_shifts_eligibility() {
        let mut m = BatchModel::new(1, 1, 2.0);
        m.queue_wait_base_s = 7.0;
        let trace = simulate_batch(&[(0.0, 1.0)], &m);
        assert!((trace.dispatches[0] - 7.5).abs() < 1e-9);
        assert!((trace.starts[0] - 7.5).abs() < 1e-9);
    }

    #[test]
    fn compute_bound_makespan_near_model_form() {
        let m = BatchModel::new(4, 1, 1000.0);
        let trace = simulate_batch(&uniform(40, 1.0), &m);
        // Compute-bound: N*t/P plus a sub-1/rate stagger.
        assert!(trace.makespan > 10.0 && trace.makespan < 10.01, "{}", trace.makespan);
    }

    fn noop_member(task_id: u64, duration_s: f64) -> TaskExec {
        TaskExec {
            task_id,
            executable: "noop".into(),
            args: vec![],
            stage_ins: vec![],
            stage_outs: vec![],
            duration_s,
        }
    }

    fn job(job_id: u64, members: Vec<TaskExec>) -> JobSpec {
        JobSpec {
            job_id,
            sandbox_label: format!("j{job_id}"),
            members,
            avoid_hosts: vec![],
            keep_sandbox: false,
        }
    }

    #[test]
    fn provider_matches_standalone_trace() {
        let model = BatchModel {
            nodes: 2,
            slots_per_node: 2,
            dispatch_rate: 4.0,
            queue_wait_base_s: 3.0,
            allocation_latency_s: 1.0,
        };
        let durations = [2.0, 0.5, 4.0, 1.0, 1.5, 0.25];
        let jobs: Vec<(f64, f64)> = durations.iter().map(|&t| (0.0, t)).collect();
        let trace = simulate_batch(&jobs, &model);

        let mut p = SimBatch::new(model, false, "site").unwrap();
        for (i, &t) in durations.iter().enumerate() {
            p.submit(job(i as u64, vec![noop_member(i as u64, t)]), 0.0).unwrap();
        }
        let mut ends = vec![f64::NAN; durations.len()];
        while p.in_flight() > 0 {
            let t = p.next_event_at().expect("events pending");
            for ev in p.poll(t) {
                if let ProviderEvent::MemberDone { result, .. } = ev {
                    assert_eq!(result.exit_code, Some(0));
                    ends[result.task_id as usize] = result.end_s;
                }
            }
        }
        for i in 0..durations.len() {
            assert!((ends[i] - trace.ends[i]).abs() < 1e-9, "job {i}: {} vs {}", ends[i], trace.ends[i]);
        }
    }

    #[test]
    fn bundle_members_complete_sequentially_and_job_frees_slot_last() {
        let model = BatchModel::new(1, 1, 10.0);
        let mut p = SimBatch::new(model, false, "s").unwrap();
        let members = vec![noop_member(10, 1.0), noop_member(11, 2.0), noop_member(12, 0.5)];
        p.submit(job(1, members), 0.0).unwrap();
        let mut got = Vec::new();
        let mut job_end = None;
        while p.in_flight() > 0 {
            let t = p.next_event_at().unwrap();
            for ev in p.poll(t) {
                match ev {
                    ProviderEvent::MemberDone { result, .. } => got.push((result.task_id, result.end_s)),
                    ProviderEvent::JobDone { at_s, .. } => job_end = Some(at_s),
                }
            }
        }
        assert_eq!(got.len(), 3);
        assert!((got[0].1 - 1.1).abs() < 1e-9, "{:?}", got);
        assert!((got[1].1 - 3.1).abs() < 1e-9);
        assert!((got[2].1 - 3.6).abs() < 1e-9);
        assert_eq!(job_end, Some(3.6));
    }

    #[test]
    fn side_effects_write_real_files_at_member_end() {
        let dir = tempfile::tempdir().unwrap();
        let src = dir.path().join("in.dat");
        std::fs::write(&src, b"input bytes").unwrap();
        let dest = dir.path().join("out/result.dat");
        let model = BatchModel::new(1, 1, 10.0);
        let mut p = SimBatch::new(model, true, "s").unwrap();
        let member = TaskExec {
            task_id: 5,
            executable: "stagein_copy".into(),
            args: vec!["k".into()],
            stage_ins: vec![(src, "in.dat".into())],
            stage_outs: vec![("result.dat".into(), dest.clone())],
            duration_s: 2.0,
        };
        p.submit(job(9, vec![member]), 0.0).unwrap();
        assert!(!dest.exists());
        let events = p.poll(10.0);
        assert!(dest.exists(), "output written when the member completed");
        assert!(matches!(&events[0], ProviderEvent::MemberDone { result, .. } if result.ok()));
    }

    #[test]
    fn cancel_queued_job_emits_nothing() {
        let model = BatchModel::new(1, 1, 1.0);
        let mut p = SimBatch::new(model, false, "s").unwrap();
        p.submit(job(3, vec![noop_member(1, 5.0)]), 0.0).unwrap();
        p.cancel(3, 0.5);
        assert_eq!(p.in_flight(), 0);
        assert!(p.poll(100.0).is_empty());
    }

    #[test]
    fn suspend_holds_the_queue_resume_releases_it() {
        let model = BatchModel::new(1, 1, 2.0);
        let mut p = SimBatch::new(model, false, "s").unwrap();
        p.suspend(0.0).unwrap();
        p.submit(job(1, vec![noop_member(1, 1.0)]), 0.0).unwrap();
        assert!(p.poll(50.0).is_empty());
        assert_eq!(p.in_flight(), 1);
        p.resume(50.0).unwrap();
        let mut done = false;
        while p.in_flight() > 0 {
            let t = p.next_event_at().unwrap();
            for ev in p.poll(t) {
                if let ProviderEvent::MemberDone { result, .. } = ev {
                    assert!(result.end_s >= 50.0 + 0.5 + 1.0 - 1e-9, "{}", result.end_s);
                    done = true;
                }
            }
        }
        assert!(done);
    }
}
