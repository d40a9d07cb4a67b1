//! Task dispatch service. A TCP listener accepts worker connections; all
//! queue, worker, and accounting state lives in a single dispatcher thread
//! fed by a command channel, so connection handlers never share state.
//!
//! Execution is at-least-once (a presumed-dead worker's tasks are requeued
//! and may run twice); success accounting is exactly-once, keyed on task id.

use std::collections::{HashMap, HashSet, VecDeque};
use std::io::{self, BufReader};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream};
use std::path::PathBuf;
use std::process::{Child, Command, Stdio};
use std::sync::atomic::{AtomicBool, AtomicU64, AtomicUsize, Ordering};
use std::sync::mpsc::{self, RecvTimeoutError};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use super::protocol::{read_msg, write_msg, Msg, WireTask};

/// Default queue bound, sized so a full queue of small task records stays
/// comfortably inside ordinary desktop memory.
pub const DEFAULT_QUEUE_BOUND: usize = 1_500_000;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProvisionPolicy {
    pub min_workers: usize,
    pub max_workers: usize,
    pub slots_per_node: u32,
    /// A worker idle this long is released, down to `min_workers`.
    pub idle_timeout_s: f64,
    /// How often the provisioner re-evaluates the queue/worker balance.
    pub provision_period_s: f64,
}

impl Default for ProvisionPolicy {
    fn default() -> Self {
        ProvisionPolicy {
            min_workers: 0,
            max_workers: 8,
            slots_per_node: 1,
            idle_timeout_s: 60.0,
            provision_period_s: 1.0,
        }
    }
}

impl ProvisionPolicy {
    pub fn validate(&self) -> Result<(), String> {
        if self.min_workers > self.max_workers {
            return Err(format!(
                "min_workers {} exceeds max_workers {}",
                self.min_workers, self.max_workers
            ));
        }
        if self.slots_per_node == 0 {
            return Err("slots_per_node must be at least 1".into());
        }
        if !(self.idle_timeout_s > 0.0) {
            return Err("idle_timeout_s must be positive".into());
        }
        if !(self.provision_period_s > 0.0) {
            return Err("provision_period_s must be positive".into());
        }
        Ok(())
    }
}

/// Nodes to request right now: enough to cover the backlog the current
/// free slots cannot absorb, clamped by the policy's node cap.
pub fn provision(
    queue_len: usize,
    free_slots: usize,
    current_nodes: usize,
    policy: &ProvisionPolicy,
) -> usize {
    if queue_len <= free_slots {
        return 0;
    }
    let deficit = queue_len - free_slots;
    let needed = deficit.div_ceil(policy.slots_per_node as usize);
    needed.min(policy.max_workers.saturating_sub(current_nodes))
}

/// Grants node requests from the provisioner. Implementations decide what
/// "a node" is: a forked worker process, a recorded request, or nothing.
pub trait Allocator: Send {
    fn allocate(&mut self, nodes: usize);
    fn kind(&self) -> &'static str;
}

/// Workers join by hand (tests, externally managed pools).
pub struct ManualAllocator;

impl Allocator for ManualAllocator {
    fn allocate(&mut self, _nodes: usize) {}
    fn kind(&self) -> &'static str {
        "manual"
    }
}

/// Records each request; the shared list is inspected by tests.
pub struct RecordingAllocator(pub Arc<Mutex<Vec<usize>>>);

impl Allocator for RecordingAllocator {
    fn allocate(&mut self, nodes: usize) {
        self.0.lock().unwrap().push(nodes);
    }
    fn kind(&self) -> &'static str {
        "recording"
    }
}

/// Forks worker processes on this machine, one per granted node.
pub struct SpawnLocal {
    exe: PathBuf,
    connect: String,
    slots_per_node: u32,
    children: Vec<Child>,
}

impl SpawnLocal {
    pub fn new(exe: PathBuf, connect: String, slots_per_node: u32) -> Self {
        SpawnLocal { exe, connect, slots_per_node, children: Vec::new() }
    }
}

impl Allocator for SpawnLocal {
    fn allocate(&mut self, nodes: usize) {
        self.children.retain_mut(|c| matches!(c.try_wait(), Ok(None)));
        for _ in 0..nodes {
            let spawned = Command::new(&self.exe)
                .args([
                    "falkon",
                    "worker",
                    "--connect",
                    &self.connect,
                    "--slots",
                    &self.slots_per_node.to_string(),
                ])
                .stdin(Stdio::null())
                .stdout(Stdio::null())
                .stderr(Stdio::null())
                .spawn();
            match spawned {
                Ok(child) => self.children.push(child),
                Err(e) => eprintln!("miniswift: failed to spawn worker: {e}"),
            }
        }
    }
    fn kind(&self) -> &'static str {
        "spawn-local"
    }
}

impl Drop for SpawnLocal {
    fn drop(&mut self) {
        // Workers exit on BYE; this just reaps whatever already did.
        for c in &mut self.children {
            let _ = c.try_wait();
        }
    }
}

#[derive(Debug, Clone)]
pub struct ServiceCfg {
    /// 0 binds an ephemeral port; read it back with `Service::port`.
    pub port: u16,
    pub heartbeat_interval_s: f64,
    /// Missed heartbeats before a worker stops receiving new tasks.
    pub suspect_after_missed: u32,
    /// Missed heartbeats before its in-flight tasks are requeued.
    pub requeue_after_missed: u32,
    pub queue_bound: usize,
    pub policy: ProvisionPolicy,
}

impl Default for ServiceCfg {
    fn default() -> Self {
        ServiceCfg {
            port: 0,
            heartbeat_interval_s: 5.0,
            suspect_after_missed: 2,
            requeue_after_missed: 3,
            queue_bound: DEFAULT_QUEUE_BOUND,
            policy: ProvisionPolicy::default(),
        }
    }
}

/// One finished execution, delivered to the service's consumer. Duplicate
/// successes for a task id are suppressed before this is emitted.
#[derive(Debug, Clone)]
pub struct TaskDone {
    pub task_id: u64,
    pub exit: i32,
    pub duration_ms: u64,
    pub host: String,
}

#[derive(Debug, Clone, Default)]
pub struct ServiceStats {
    pub queue_length: usize,
    pub in_flight: usize,
    pub live_workers: usize,
    pub suspect_workers: usize,
    pub dispatch_count: u64,
    pub completions: u64,
    /// TASK and RESULT messages only; a crash-free dispatch costs two.
    pub app_messages: u64,
    /// REGISTER, REGISTERED, HEARTBEAT, BYE.
    pub control_messages: u64,
    /// Exponentially weighted completions per second.
    pub throughput_ewma: f64,
}

enum Cmd {
    Enqueue(WireTask),
    NewConn { conn_id: u64, tx: mpsc::Sender<Msg>, closer: TcpStream },
    FromConn { conn_id: u64, msg: Msg },
    Gone { conn_id: u64 },
    Stats { reply: mpsc::Sender<ServiceStats> },
    Shutdown,
}

pub struct Service {
    addr: SocketAddr,
    cmd: mpsc::Sender<Cmd>,
    events: mpsc::Receiver<TaskDone>,
    queued: Arc<AtomicUsize>,
    bound: usize,
    stop: Arc<AtomicBool>,
    dispatcher: Option<JoinHandle<()>>,
    listener: Option<JoinHandle<()>>,
}

impl Service {
    pub fn start(cfg: ServiceCfg, allocator: Box<dyn Allocator>) -> io::Result<Service> {
        cfg.policy
            .validate()
            .map_err(|e| io::Error::new(io::ErrorKind::InvalidInput, e))?;
        let listener = TcpListener::bind(("127.0.0.1", cfg.port))?;
        let addr = listener.local_addr()?;
        let (cmd_tx, cmd_rx) = mpsc::channel();
        let (event_tx, event_rx) = mpsc::channel();
        let queued = Arc::new(AtomicUsize::new(0));
        let stop = Arc::new(AtomicBool::new(false));
        let bound = cfg.queue_bound;

        let disp = Dispatcher {
            cfg,
            cmd_rx,
            events: event_tx,
            queued: queued.clone(),
            pending: VecDeque::new(),
            done: HashSet::new(),
            conns: HashMap::new(),
            workers: HashMap::new(),
            allocator,
            outstanding_nodes: 0,
            deficit_since: None,
            last_alloc: None,
            stats: Counters::default(),
            last_done: None,
        };
        let dispatcher = thread::Builder::new()
            .name("falkon-dispatch".into())
            .spawn(move || disp.run())?;

        let accept_cmd = cmd_tx.clone();
        let accept_stop = stop.clone();
        let listener_thread = thread::Builder::new()
            .name("falkon-accept".into())
            .spawn(move || accept_loop(listener, accept_cmd, accept_stop))?;

        Ok(Service {
            addr,
            cmd: cmd_tx,
            events: event_rx,
            queued,
            bound,
            stop,
            dispatcher: Some(dispatcher),
            listener: Some(listener_thread),
        })
    }

    pub fn port(&self) -> u16 {
        self.addr.port()
    }

    pub fn addr(&self) -> String {
        self.addr.to_string()
    }

    /// Queue one task. Fails when the queue bound is reached.
    pub fn enqueue(&self, task: WireTask) -> Result<(), String> {
        let admitted = self
            .queued
            .fetch_update(Ordering::SeqCst, Ordering::SeqCst, |q| {
                if q >= self.bound {
                    None
                } else {
                    Some(q + 1)
                }
            })
            .is_ok();
        if !admitted {
            return Err(format!("task queue full ({} records)", self.bound));
        }
        self.cmd
            .send(Cmd::Enqueue(task))
            .map_err(|_| "service stopped".to_string())
    }

    pub fn try_events(&self) -> Vec<TaskDone> {
        self.events.try_iter().collect()
    }

    pub fn wait_event(&self, timeout: Duration) -> Option<TaskDone> {
        self.events.recv_timeout(timeout).ok()
    }

    pub fn stats(&self) -> ServiceStats {
        let (tx, rx) = mpsc::channel();
        if self.cmd.send(Cmd::Stats { reply: tx }).is_err() {
            return ServiceStats::default();
        }
        rx.recv_timeout(Duration::from_secs(5)).unwrap_or_default()
    }

    /// Tell every worker to exit, then stop the service threads.
    pub fn shutdown(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        let _ = self.cmd.send(Cmd::Shutdown);
        if let Some(h) = self.dispatcher.take() {
            let _ = h.join();
        }
        if let Some(h) = self.listener.take() {
            let _ = h.join();
        }
    }
}

impl Drop for Service {
    fn drop(&mut self) {
        self.shutdown();
    }
}

fn accept_loop(listener: TcpListener, cmd: mpsc::Sender<Cmd>, stop: Arc<AtomicBool>) {
    if listener.set_nonblocking(true).is_err() {
        return;
    }
    let next_id = AtomicU64::new(0);
    loop {
        if stop.load(Ordering::SeqCst) {
            return;
        }
        match listener.accept() {
            Ok((stream, _)) => {
                if stream.set_nonblocking(false).is_err() {
                    continue;
                }
                let _ = stream.set_nodelay(true);
                let (Ok(closer), Ok(wstream)) = (stream.try_clone(), stream.try_clone()) else {
                    continue;
                };
                let conn_id = next_id.fetch_add(1, Ordering::SeqCst);
                let (wtx, wrx) = mpsc::channel::<Msg>();
                if cmd.send(Cmd::NewConn { conn_id, tx: wtx, closer }).is_err() {
                    return;
                }
                thread::spawn(move || {
                    let mut out = wstream;
                    for msg in wrx {
                        if write_msg(&mut out, &msg).is_err() {
                            break;
                        }
                    }
                    let _ = out.shutdown(Shutdown::Both);
                });
                let rcmd = cmd.clone();
                thread::spawn(move || {
                    let mut r = BufReader::new(stream);
                    loop {
                        match read_msg(&mut r) {
                            Ok(Some(msg)) => {
                                if rcmd.send(Cmd::FromConn { conn_id, msg }).is_err() {
                                    return;
                                }
                            }
                            Ok(None) | Err(_) => {
                                let _ = rcmd.send(Cmd::Gone { conn_id });
                                return;
                            }
                        }
                    }
                });
            }
            Err(e) if e.kind() == io::ErrorKind::WouldBlock => {
                thread::sleep(Duration::from_millis(20));
            }
            Err(_) => return,
        }
    }
}

#[derive(Default)]
struct Counters {
    dispatch_count: u64,
    completions: u64,
    app_messages: u64,
    control_messages: u64,
    throughput_ewma: f64,
}

struct ConnHandle {
    tx: mpsc::Sender<Msg>,
    closer: TcpStream,
}

struct WorkerState {
    worker_id: String,
    slots: u32,
    tx: mpsc::Sender<Msg>,
    in_flight: HashMap<u64, WireTask>,
    last_seen: Instant,
    idle_since: Instant,
}

struct Dispatcher {
    cfg: ServiceCfg,
    cmd_rx: mpsc::Receiver<Cmd>,
    events: mpsc::Sender<TaskDone>,
    queued: Arc<AtomicUsize>,
    pending: VecDeque<WireTask>,
    /// Task ids with a counted success; requeued copies of these are
    /// dropped at dispatch and late duplicate results are ignored.
    done: HashSet<u64>,
    conns: HashMap<u64, ConnHandle>,
    workers: HashMap<u64, WorkerState>,
    allocator: Box<dyn Allocator>,
    /// Nodes requested but not registered yet.
    outstanding_nodes: usize,
    deficit_since: Option<Instant>,
    last_alloc: Option<Instant>,
    stats: Counters,
    last_done: Option<Instant>,
}

const TICK: Duration = Duration::from_millis(20);

impl Dispatcher {
    fn run(mut self) {
        if self.cfg.policy.min_workers > 0 {
            self.allocator.allocate(self.cfg.policy.min_workers);
            self.outstanding_nodes = self.cfg.policy.min_workers;
            self.last_alloc = Some(Instant::now());
        }
        loop {
            let mut live = true;
            match self.cmd_rx.recv_timeout(TICK) {
                Ok(c) => {
                    live = self.handle(c);
                    while live {
                        match self.cmd_rx.try_recv() {
                            Ok(c) => live = self.handle(c),
                            Err(_) => break,
                        }
                    }
                }
                Err(RecvTimeoutError::Timeout) => {}
                Err(RecvTimeoutError::Disconnected) => live = false,
            }
            if !live {
                self.finish();
                return;
            }
            let now = Instant::now();
            self.reap_dead(now);
            self.pump(now);
            self.release_idle(now);
            self.provision_tick(now);
        }
    }

    fn handle(&mut self, cmd: Cmd) -> bool {
        match cmd {
            Cmd::Enqueue(t) => self.pending.push_back(t),
            Cmd::NewConn { conn_id, tx, closer } => {
                self.conns.insert(conn_id, ConnHandle { tx, closer });
            }
            Cmd::FromConn { conn_id, msg } => self.on_msg(conn_id, msg),
            Cmd::Gone { conn_id } => self.drop_conn(conn_id, true),
            Cmd::Stats { reply } => {
                let _ = reply.send(self.snapshot());
            }
            Cmd::Shutdown => return false,
        }
        true
    }

    fn on_msg(&mut self, conn_id: u64, msg: Msg) {
        let now = Instant::now();
        match msg {
            Msg::Register { worker_id, slots } => {
                self.stats.control_messages += 1;
                let stale: Vec<u64> = self
                    .workers
                    .iter()
                    .filter(|(cid, w)| w.worker_id == worker_id && **cid != conn_id)
                    .map(|(cid, _)| *cid)
                    .collect();
                for cid in stale {
                    self.drop_conn(cid, true);
                }
                let Some(conn) = self.conns.get(&conn_id) else { return };
                let tx = conn.tx.clone();
                self.workers.insert(
                    conn_id,
                    WorkerState {
                        worker_id,
                        slots: slots.max(1),
                        tx: tx.clone(),
                        in_flight: HashMap::new(),
                        last_seen: now,
                        idle_since: now,
                    },
                );
                self.outstanding_nodes = self.outstanding_nodes.saturating_sub(1);
                if tx.send(Msg::Registered).is_ok() {
                    self.stats.control_messages += 1;
                }
            }
            Msg::Heartbeat { .. } => {
                self.stats.control_messages += 1;
                if let Some(w) = self.workers.get_mut(&conn_id) {
                    w.last_seen = now;
                }
            }
            Msg::Result { task_id, exit, duration_ms, host } => {
                self.stats.app_messages += 1;
                if let Some(w) = self.workers.get_mut(&conn_id) {
                    w.last_seen = now;
                    if w.in_flight.remove(&task_id).is_some() && w.in_flight.is_empty() {
                        w.idle_since = now;
                    }
                }
                if exit == 0 {
                    if self.done.insert(task_id) {
                        self.stats.completions += 1;
                        if let Some(prev) = self.last_done {
                            let dt = now.duration_since(prev).as_secs_f64().max(1e-6);
                            let inst = 1.0 / dt;
                            self.stats.throughput_ewma = if self.stats.throughput_ewma == 0.0 {
                                inst
                            } else {
                                0.1 * inst + 0.9 * self.stats.throughput_ewma
                            };
                        }
                        self.last_done = Some(now);
                        let _ = self.events.send(TaskDone { task_id, exit, duration_ms, host });
                    }
                } else if !self.done.contains(&task_id) {
                    let _ = self.events.send(TaskDone { task_id, exit, duration_ms, host });
                }
            }
            Msg::Bye => {
                self.stats.control_messages += 1;
                self.drop_conn(conn_id, true);
            }
            // Service-to-worker messages arriving here are protocol noise.
            Msg::Registered | Msg::Task(_) => {}
        }
    }

    /// Remove a connection. `requeue` puts any in-flight tasks back at the
    /// queue head and hard-closes the socket; without it the writer thread
    /// drains its queue (a parting BYE) and closes.
    fn drop_conn(&mut self, conn_id: u64, requeue: bool) {
        if let Some(w) = self.workers.remove(&conn_id) {
            if requeue {
                let n = w.in_flight.len();
                for (_, t) in w.in_flight {
                    self.pending.push_front(t);
                }
                self.queued.fetch_add(n, Ordering::SeqCst);
            }
        }
        if let Some(conn) = self.conns.remove(&conn_id) {
            if requeue {
                let _ = conn.closer.shutdown(Shutdown::Both);
            }
        }
    }

    fn silence_s(&self, w: &WorkerState, now: Instant) -> f64 {
        now.duration_since(w.last_seen).as_secs_f64()
    }

    fn is_suspect(&self, w: &WorkerState, now: Instant) -> bool {
        self.silence_s(w, now)
            >= self.cfg.suspect_after_missed as f64 * self.cfg.heartbeat_interval_s
    }

    fn is_dead(&self, w: &WorkerState, now: Instant) -> bool {
        self.silence_s(w, now)
            >= self.cfg.requeue_after_missed as f64 * self.cfg.heartbeat_interval_s
    }

    fn reap_dead(&mut self, now: Instant) {
        let dead: Vec<u64> = self
            .workers
            .iter()
            .filter(|(_, w)| self.is_dead(w, now))
            .map(|(cid, _)| *cid)
            .collect();
        for cid in dead {
            self.drop_conn(cid, true);
        }
    }

    fn pump(&mut self, now: Instant) {
        while !self.pending.is_empty() {
            let mut best: Option<(u64, usize)> = None;
            for (cid, w) in &self.workers {
                if self.is_suspect(w, now) {
                    continue;
                }
                let free = (w.slots as usize).saturating_sub(w.in_flight.len());
                if free > 0 && best.is_none_or(|(_, b)| free > b) {
                    best = Some((*cid, free));
                }
            }
            let Some((cid, _)) = best else { return };
            let task = self.pending.pop_front().unwrap();
            self.queued.fetch_sub(1, Ordering::SeqCst);
            if self.done.contains(&task.task_id) {
                continue;
            }
            let w = self.workers.get_mut(&cid).unwrap();
            w.in_flight.insert(task.task_id, task.clone());
            if w.tx.send(Msg::Task(task)).is_err() {
                // Connection is tearing down; Gone will requeue it.
                continue;
            }
            self.stats.app_messages += 1;
            self.stats.dispatch_count += 1;
        }
    }

    fn release_idle(&mut self, now: Instant) {
        let min = self.cfg.policy.min_workers;
        if self.workers.len() <= min {
            return;
        }
        let mut idle: Vec<(u64, Instant)> = self
            .workers
            .iter()
            .filter(|(_, w)| {
                w.in_flight.is_empty()
                    && now.duration_since(w.idle_since).as_secs_f64()
                        >= self.cfg.policy.idle_timeout_s
            })
            .map(|(cid, w)| (*cid, w.idle_since))
            .collect();
        idle.sort_by_key(|(_, since)| *since);
        let release = idle.len().min(self.workers.len() - min);
        for (cid, _) in idle.into_iter().take(release) {
            if let Some(w) = self.workers.get(&cid) {
                if w.tx.send(Msg::Bye).is_ok() {
                    self.stats.control_messages += 1;
                }
            }
            self.drop_conn(cid, false);
        }
    }

    fn provision_tick(&mut self, now: Instant) {
        // Requests that never registered stop counting after a while, so
        // lost nodes cannot wedge provisioning below the cap.
        if let Some(t) = self.last_alloc {
            if now.duration_since(t).as_secs_f64() > 30.0 {
                self.outstanding_nodes = 0;
                self.last_alloc = None;
            }
        }
        let free: usize = self
            .workers
            .values()
            .filter(|w| !self.is_suspect(w, now))
            .map(|w| (w.slots as usize).saturating_sub(w.in_flight.len()))
            .sum();
        let nodes = self.workers.len() + self.outstanding_nodes;
        if self.pending.len() > free && nodes < self.cfg.policy.max_workers {
            match self.deficit_since {
                None => self.deficit_since = Some(now),
                Some(t0)
                    if now.duration_since(t0).as_secs_f64()
                        >= self.cfg.policy.provision_period_s =>
                {
                    let n = provision(self.pending.len(), free, nodes, &self.cfg.policy);
                    if n > 0 {
                        self.allocator.allocate(n);
                        self.outstanding_nodes += n;
                        self.last_alloc = Some(now);
                    }
                    self.deficit_since = Some(now);
                }
                Some(_) => {}
            }
        } else {
            self.deficit_since = None;
        }
    }

    fn snapshot(&self) -> ServiceStats {
        let now = Instant::now();
        ServiceStats {
            queue_length: self.pending.len(),
            in_flight: self.workers.values().map(|w| w.in_flight.len()).sum(),
            live_workers: self.workers.len(),
            suspect_workers: self
                .workers
                .values()
                .filter(|w| self.is_suspect(w, now))
                .count(),
            dispatch_count: self.stats.dispatch_count,
            completions: self.stats.completions,
            app_messages: self.stats.app_messages,
            control_messages: self.stats.control_messages,
            throughput_ewma: self.stats.throughput_ewma,
        }
    }

    fn finish(&mut self) {
        let cids: Vec<u64> = self.workers.keys().copied().collect();
        for cid in cids {
            if let Some(w) = self.workers.get(&cid) {
                if w.tx.send(Msg::Bye).is_ok() {
                    self.stats.control_messages += 1;
                }
            }
            self.drop_conn(cid, false);
        }
        let leftover: Vec<u64> = self.conns.keys().copied().collect();
        for cid in leftover {
            self.drop_conn(cid, false);
        }
    }
}
