//! Dataflow engine. Runs a lowered plan by walking statements as
//! continuation records in one event loop: each statement runs until it
//! needs a value that has not settled, parks on that exact blocker, and
//! wakes when the value resolves, fails, or its array closes. There is no
//! dependency analysis pass before execution.
//!
//! Arrays close when the frame instance owning their root binding finishes
//! issuing statements, so consumers of a whole array see a final extent
//! without the producer declaring one. Task durations derive from stable
//! statement-position labels, which keeps per-task durations identical
//! across pipelining modes and bundle shapes.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet, VecDeque};
use std::path::{Path, PathBuf};
use std::time::Duration;

use rand::Rng;

use crate::ast::{BinOp, UnOp};
use crate::clock::{Clock, ClockMode};
use crate::mapper::{map_dataset, output_target, MapMode, MapperRegistry, ParamValue};
use crate::node::{LeafState, NodeId, NodeKind, NodeStore, PrimValue};
use crate::plan::{
    AppPlan, Frame, PArg, PCall, PExpr, PMapperParam, PPath, PRvalue, PSeg, PStmt, Plan, ProcKind,
};
use crate::provenance::{environment_subset, write_record, FileStat, InvocationRecord};
use crate::provider::{FailureClass, JobSpec, MemberResult, Provider, ProviderEvent, TaskExec};
use crate::rlog::{read_log, LogRecord, RestartLog};
use crate::scheduler::{
    cluster, handle_failure, select_site, update_score, FailureDecision, ReadyTask, RetryState,
    SchedulerCfg, SiteState,
};
use crate::util::{derived_rng, digest_file, digest_hex};

#[derive(Debug, Clone, Copy)]
pub enum DurationModel {
    /// Every task runs this many simulated seconds.
    Constant(f64),
    /// Uniform seconds in [lo, hi), drawn per task from its stable label.
    Uniform { lo: f64, hi: f64 },
}

impl DurationModel {
    fn sample(&self, seed: u64, label: &str) -> f64 {
        match *self {
            DurationModel::Constant(c) => c,
            DurationModel::Uniform { lo, hi } => {
                let mut rng = derived_rng(seed, &format!("dur:{}", label));
                rng.gen_range(lo..hi)
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct EngineCfg {
    pub run_dir: PathBuf,
    /// Relative mapper locations resolve against this directory.
    pub base_dir: PathBuf,
    pub seed: u64,
    pub clock: ClockMode,
    /// When false, expansion of a foreach waits for the source array to
    /// fully settle instead of just close.
    pub pipelining: bool,
    /// When false nothing touches the filesystem: no staging, no restart
    /// log, no provenance. Digests are derived from logical paths.
    pub side_effects: bool,
    pub restart_log: bool,
    pub provenance: bool,
    pub resume: bool,
    /// Stop dispatching and return after this many task completions.
    pub interrupt_after: Option<u64>,
    pub durations: DurationModel,
    pub sched: SchedulerCfg,
}

impl EngineCfg {
    pub fn new(run_dir: impl Into<PathBuf>) -> Self {
        EngineCfg {
            run_dir: run_dir.into(),
            base_dir: PathBuf::from("."),
            seed: 42,
            clock: ClockMode::Virtual,
            pipelining: true,
            side_effects: true,
            restart_log: true,
            provenance: false,
            resume: false,
            interrupt_after: None,
            durations: DurationModel::Constant(0.0),
            sched: SchedulerCfg::default(),
        }
    }
}

pub struct EngineSite {
    pub state: SiteState,
    pub provider: Box<dyn Provider>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RunStatus {
    Completed,
    Interrupted,
    Failed,
}

#[derive(Debug, Clone)]
pub struct TraceRow {
    pub task_id: u32,
    pub label: String,
    pub app: String,
    pub site: String,
    pub host: String,
    pub attempt: u32,
    pub created_s: f64,
    pub submitted_s: f64,
    pub started_s: f64,
    pub ended_s: f64,
    pub ok: bool,
}

#[derive(Debug)]
pub struct RunResult {
    pub status: RunStatus,
    pub tasks_total: u64,
    pub tasks_executed: u64,
    pub tasks_restored: u64,
    pub tasks_failed: u64,
    pub jobs_submitted: u64,
    pub makespan_s: f64,
    pub bookkeeping_bytes: usize,
    /// logical path -> (physical path, content digest) for task outputs.
    pub datasets: BTreeMap<String, (String, String)>,
    pub trace: Vec<TraceRow>,
    pub errors: Vec<String>,
}

impl RunResult {
    /// Digest over all produced datasets, order independent.
    pub fn data_digest(&self) -> String {
        let mut h = crate::util::Fnv1a::new();
        for (logical, (_, digest)) in &self.datasets {
            h.update(logical.as_bytes());
            h.update(b"\t");
            h.update(digest.as_bytes());
            h.update(b"\n");
        }
        format!("{:016x}", h.finish())
    }
}

#[derive(Debug, Clone)]
pub struct EngineError {
    pub message: String,
}

impl std::fmt::Display for EngineError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for EngineError {}

fn engine_error(msg: impl Into<String>) -> EngineError {
    EngineError { message: msg.into() }
}

pub fn run(plan: &Plan, cfg: EngineCfg, sites: Vec<EngineSite>) -> Result<RunResult, EngineError> {
    if sites.is_empty() {
        return Err(engine_error("no sites configured"));
    }
    let mut eng = Engine::new(plan, cfg, sites)?;
    eng.seed_top();
    eng.main_loop();
    Ok(eng.finish())
}

/// What a parked statement is waiting for.
#[derive(Debug, Clone, Copy)]
enum Blocker {
    /// A leaf to resolve or fail.
    Resolve(NodeId),
    /// An array to close.
    Close(NodeId),
    /// An element of an open array to come into existence (or the close
    /// that proves it never will).
    Elem(NodeId),
    /// A frame slot to be bound by its declaration.
    Slot(u32, u32),
}

enum Stop {
    Block(Blocker),
    Fail(String),
}

/// How a finished statement settles its scope token.
enum Flow {
    Done,
    /// Token moved to a child scope; the child's completion releases it.
    Transfer,
}

#[derive(Debug, Clone)]
enum Bind {
    Node(NodeId),
    Val(PrimValue),
}

struct FrameInst<'p> {
    frame: &'p Frame,
    parent: Option<u32>,
    prefix: String,
    scope: u32,
    slots: Vec<Option<NodeId>>,
}

struct ScopeRec {
    parent: Option<u32>,
    outstanding: u32,
    /// Arrays whose root binding lives in this scope's frame; closed when
    /// the scope completes.
    arrays: BTreeSet<NodeId>,
}

enum ItemBody<'p> {
    Stmt { frame: u32, scope: u32, label: String, stmt: &'p PStmt },
    Gate { task: u32 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum TaskState {
    Waiting,
    Ready,
    Submitted,
    Done,
    Restored,
    Failed,
}

struct ExecInfo {
    command_line: Vec<String>,
    ins: Vec<(String, String)>,
    outs: Vec<(String, String)>,
}

struct TaskRecord<'p> {
    app: String,
    plan_app: &'p AppPlan,
    label: String,
    in_binds: Vec<Bind>,
    out_node: Option<NodeId>,
    state: TaskState,
    attempt: u32,
    retry: RetryState,
    forced_site: Option<usize>,
    exclude_site: Option<usize>,
    site: Option<usize>,
    duration_s: f64,
    created_s: f64,
    submitted_s: f64,
    exec: Option<Box<ExecInfo>>,
}

struct JobInfo {
    site: usize,
}

struct Engine<'p> {
    plan: &'p Plan,
    cfg: EngineCfg,
    clock: Clock,
    registry: MapperRegistry,
    store: NodeStore,

    frames: Vec<FrameInst<'p>>,
    scopes: Vec<ScopeRec>,
    items: Vec<Option<ItemBody<'p>>>,
    runnable: VecDeque<u32>,
    parked: usize,
    resolve_watch: HashMap<NodeId, Vec<u32>>,
    close_watch: HashMap<NodeId, Vec<u32>>,
    elem_watch: HashMap<NodeId, Vec<u32>>,
    slot_watch: HashMap<(u32, u32), Vec<u32>>,

    tasks: Vec<TaskRecord<'p>>,
    live_tasks: usize,
    ready: Vec<u32>,
    window_deadline: Option<f64>,
    jobs: HashMap<u64, JobInfo>,
    next_job: u64,
    sites: Vec<EngineSite>,
    site_rng: rand_chacha::ChaCha8Rng,

    rlog: Option<RestartLog>,
    /// Restorable outputs recovered from the restart log.
    recovered: BTreeMap<String, (String, String)>,
    env_subset: BTreeMap<String, String>,

    datasets: BTreeMap<String, (String, String)>,
    trace: Vec<TraceRow>,
    errors: Vec<String>,
    executed: u64,
    restored: u64,
    failed: u64,
    jobs_submitted: u64,
    interrupted: bool,
}

impl<'p> Engine<'p> {
    fn new(plan: &'p Plan, cfg: EngineCfg, sites: Vec<EngineSite>) -> Result<Self, EngineError> {
        let clock = Clock::new(cfg.clock);
        let mut recovered = BTreeMap::new();
        let top_writers = top_writer_map(plan);

        let log_path = cfg.run_dir.join("restart.log");
        if cfg.resume {
            recovered = validate_resume(plan, &log_path, &top_writers)?;
        }
        let rlog = if cfg.restart_log && cfg.side_effects {
            if !cfg.resume && log_path.exists() {
                std::fs::remove_file(&log_path)
                    .map_err(|e| engine_error(format!("cannot reset restart log: {}", e)))?;
            }
            let mut log = RestartLog::append(&log_path)
                .map_err(|e| engine_error(format!("cannot open restart log: {}", e)))?;
            let stmt_digests = (0..plan.top.body.len())
                .map(|i| format!("{:016x}", plan.top_stmt_digest(i)))
                .collect();
            log.write(&LogRecord::RunStarted {
                plan_digest: format!("{:016x}", plan.digest()),
                stmt_digests,
                timestamp: clock.now(),
            })
            .map_err(|e| engine_error(format!("cannot write run header: {}", e)))?;
            Some(log)
        } else {
            None
        };

        if cfg.side_effects {
            std::fs::create_dir_all(cfg.run_dir.join("data"))
                .map_err(|e| engine_error(format!("cannot create run dir: {}", e)))?;
            std::fs::create_dir_all(cfg.run_dir.join("jobs")).ok();
        }

        let env_subset = if cfg.provenance {
            environment_subset(&[], false)
        } else {
            BTreeMap::new()
        };

        let site_rng = derived_rng(cfg.seed, "site-select");
        Ok(Engine {
            plan,
            cfg,
            clock,
            registry: MapperRegistry::with_builtins(),
            store: NodeStore::new(),
            frames: Vec::new(),
            scopes: Vec::new(),
            items: Vec::new(),
            runnable: VecDeque::new(),
            parked: 0,
            resolve_watch: HashMap::new(),
            close_watch: HashMap::new(),
            elem_watch: HashMap::new(),
            slot_watch: HashMap::new(),
            tasks: Vec::new(),
            live_tasks: 0,
            ready: Vec::new(),
            window_deadline: None,
            jobs: HashMap::new(),
            next_job: 1,
            sites,
            site_rng,
            rlog,
            recovered,
            env_subset,
            datasets: BTreeMap::new(),
            trace: Vec::new(),
            errors: Vec::new(),
            executed: 0,
            restored: 0,
            failed: 0,
            jobs_submitted: 0,
            interrupted: false,
        })
    }

    // ---- scopes and items ----

    fn new_scope(&mut self, parent: Option<u32>) -> u32 {
        let id = self.scopes.len() as u32;
        // Creation token, released once the scope's items are queued.
        self.scopes.push(ScopeRec { parent, outstanding: 1, arrays: BTreeSet::new() });
        id
    }

    fn queue_item(&mut self, body: ItemBody<'p>) {
        if let ItemBody::Stmt { scope, .. } = body {
            self.scopes[scope as usize].outstanding += 1;
        }
        let id = self.items.len() as u32;
        self.items.push(Some(body));
        self.runnable.push_back(id);
    }

    fn queue_body(&mut self, frame: u32, scope: u32, stmts: &'p [PStmt]) {
        let prefix = self.frames[frame as usize].prefix.clone();
        for (j, stmt) in stmts.iter().enumerate() {
            let label = format!("{}@{}", prefix, j);
            self.queue_item(ItemBody::Stmt { frame, scope, label, stmt });
        }
    }

    fn scope_done(&mut self, scope: u32) {
        let mut cur = scope;
        loop {
            let s = &mut self.scopes[cur as usize];
            s.outstanding -= 1;
            if s.outstanding > 0 {
                return;
            }
            let arrays: Vec<NodeId> = std::mem::take(&mut s.arrays).into_iter().collect();
            let parent = s.parent;
            for a in arrays {
                self.close_now(a);
            }
            match parent {
                Some(p) => cur = p,
                None => return,
            }
        }
    }

    fn close_now(&mut self, array: NodeId) {
        if let Some((len, closed)) = self.store.array_len(array) {
            if closed {
                return;
            }
            if let Err(e) = self.store.close_array(array, len) {
                self.errors.push(format!("closing {}: {}", self.store.logical_path(array), e));
                return;
            }
            self.fire_close(array);
        }
    }

    fn park(&mut self, id: u32, b: Blocker) {
        self.parked += 1;
        match b {
            Blocker::Resolve(n) => self.resolve_watch.entry(n).or_default().push(id),
            Blocker::Close(n) => self.close_watch.entry(n).or_default().push(id),
            Blocker::Elem(n) => self.elem_watch.entry(n).or_default().push(id),
            Blocker::Slot(f, s) => self.slot_watch.entry((f, s)).or_default().push(id),
        }
    }

    fn wake(&mut self, ids: Vec<u32>) {
        self.parked -= ids.len();
        self.runnable.extend(ids);
    }

    fn fire_resolve(&mut self, node: NodeId) {
        if let Some(ids) = self.resolve_watch.remove(&node) {
            self.wake(ids);
        }
    }

    fn fire_close(&mut self, node: NodeId) {
        if let Some(ids) = self.close_watch.remove(&node) {
            self.wake(ids);
        }
        // Readers waiting on a missing element learn their answer at close.
        if let Some(ids) = self.elem_watch.remove(&node) {
            self.wake(ids);
        }
    }

    fn fire_elem(&mut self, array: NodeId) {
        if let Some(ids) = self.elem_watch.remove(&array) {
            self.wake(ids);
        }
    }

    fn fire_slot(&mut self, frame: u32, slot: u32) {
        if let Some(ids) = self.slot_watch.remove(&(frame, slot)) {
            self.wake(ids);
        }
    }

    fn settle_file(&mut self, leaf: NodeId) -> Result<(), Stop> {
        self.store
            .get(leaf)
            .resolve_file()
            .map_err(|e| Stop::Fail(format!("{}: {}", self.store.logical_path(leaf), e)))?;
        self.fire_resolve(leaf);
        Ok(())
    }

    fn settle_prim(&mut self, leaf: NodeId, v: PrimValue) -> Result<(), Stop> {
        self.store
            .get(leaf)
            .resolve_prim(v)
            .map_err(|e| Stop::Fail(format!("{}: {}", self.store.logical_path(leaf), e)))?;
        self.fire_resolve(leaf);
        Ok(())
    }

    /// Fail every pending leaf under `node`, mark composite roots failed,
    /// and close open arrays so waiters see a settled (failed) tree.
    fn fail_subtree(&mut self, node: NodeId, msg: &str) {
        let mut stack = vec![node];
        while let Some(id) = stack.pop() {
            let (is_leaf, is_array, children) = node_shape(&self.store, id);
            if is_leaf {
                if self.store.get(id).leaf_state() == LeafState::Pending {
                    self.store.get(id).fail(msg).ok();
                    self.fire_resolve(id);
                }
                continue;
            }
            self.store.get(id).fail(msg).ok();
            stack.extend(children);
            if is_array {
                self.close_now(id);
            }
            self.fire_resolve(id);
        }
    }

    /// True when some part of the tree failed, including empty composites
    /// marked failed wholesale.
    fn subtree_failed(&self, id: NodeId) -> bool {
        if self.store.get(id).leaf_state() == LeafState::Failed {
            return true;
        }
        match &self.store.get(id).kind {
            NodeKind::Prim(_) | NodeKind::File(_) => false,
            NodeKind::Struct(children) => children.iter().any(|(_, c)| self.subtree_failed(*c)),
            NodeKind::Array(state) => {
                let elems: Vec<NodeId> =
                    state.lock().unwrap().elems.iter().flatten().copied().collect();
                elems.into_iter().any(|c| self.subtree_failed(c))
            }
        }
    }

    /// First thing keeping the tree from being settled (resolved or
    /// failed), or None when every leaf has an answer and arrays are
    /// closed. Holes in closed arrays are reported as errors.
    fn settled_blocker(&self, id: NodeId) -> Result<Option<Blocker>, String> {
        if self.store.get(id).leaf_state() == LeafState::Failed {
            return Ok(None);
        }
        match &self.store.get(id).kind {
            NodeKind::Prim(_) | NodeKind::File(_) => {
                match self.store.get(id).leaf_state() {
                    LeafState::Pending => Ok(Some(Blocker::Resolve(id))),
                    _ => Ok(None),
                }
            }
            NodeKind::Struct(children) => {
                let kids: Vec<NodeId> = children.iter().map(|(_, c)| *c).collect();
                for c in kids {
                    if let Some(b) = self.settled_blocker(c)? {
                        return Ok(Some(b));
                    }
                }
                Ok(None)
            }
            NodeKind::Array(state) => {
                let (elems, closed) = {
                    let st = state.lock().unwrap();
                    (st.elems.clone(), st.closed)
                };
                if !closed {
                    return Ok(Some(Blocker::Close(id)));
                }
                for (i, e) in elems.iter().enumerate() {
                    match e {
                        Some(c) => {
                            if let Some(b) = self.settled_blocker(*c)? {
                                return Ok(Some(b));
                            }
                        }
                        None => {
                            return Err(format!(
                                "element {} of {} was never assigned",
                                i,
                                self.store.logical_path(id)
                            ));
                        }
                    }
                }
                Ok(None)
            }
        }
    }

    // ---- path and expression evaluation ----

    fn ancestor(&self, frame: u32, depth: u8) -> u32 {
        let mut f = frame;
        for _ in 0..depth {
            f = self.frames[f as usize].parent.expect("slot depth exceeds frame chain");
        }
        f
    }

    fn eval(&self, frame: u32, expr: &PExpr) -> Result<PrimValue, Stop> {
        match expr {
            PExpr::Int(v) => Ok(PrimValue::Int(*v)),
            PExpr::Float(v) => Ok(PrimValue::Float(*v)),
            PExpr::Str(v) => Ok(PrimValue::Str(v.clone())),
            PExpr::Bool(v) => Ok(PrimValue::Bool(*v)),
            PExpr::Path(p) => {
                let node = self.resolve_read(frame, p)?;
                let n = self.store.get(node);
                match n.leaf_state() {
                    LeafState::Failed => Err(Stop::Fail(format!(
                        "reads failed dataset {}: {}",
                        self.store.logical_path(node),
                        n.error().unwrap_or("upstream failure")
                    ))),
                    LeafState::Resolved => match n.prim() {
                        Some(v) => Ok(v.clone()),
                        None => Err(Stop::Fail(format!(
                            "{} is not a primitive value",
                            self.store.logical_path(node)
                        ))),
                    },
                    LeafState::Pending => Err(Stop::Block(Blocker::Resolve(node))),
                }
            }
            PExpr::Unary { op: UnOp::Not, operand } => match self.eval(frame, operand)? {
                PrimValue::Bool(b) => Ok(PrimValue::Bool(!b)),
                _ => Err(Stop::Fail("! needs a boolean operand".into())),
            },
            PExpr::Binary { op, lhs, rhs } => self.eval_binary(frame, *op, lhs, rhs),
        }
    }

    fn eval_binary(
        &self,
        frame: u32,
        op: BinOp,
        lhs: &PExpr,
        rhs: &PExpr,
    ) -> Result<PrimValue, Stop> {
        if matches!(op, BinOp::And | BinOp::Or) {
            let l = match self.eval(frame, lhs)? {
                PrimValue::Bool(b) => b,
                _ => return Err(Stop::Fail("logical operand must be boolean".into())),
            };
            // Short circuit; the skipped side cannot block the statement.
            if (op == BinOp::And && !l) || (op == BinOp::Or && l) {
                return Ok(PrimValue::Bool(l));
            }
            return match self.eval(frame, rhs)? {
                PrimValue::Bool(b) => Ok(PrimValue::Bool(b)),
                _ => Err(Stop::Fail("logical operand must be boolean".into())),
            };
        }
        let l = self.eval(frame, lhs)?;
        let r = self.eval(frame, rhs)?;
        let ord = |o: std::cmp::Ordering| -> Result<bool, Stop> {
            Ok(match op {
                BinOp::Lt => o.is_lt(),
                BinOp::Le => o.is_le(),
                BinOp::Gt => o.is_gt(),
                BinOp::Ge => o.is_ge(),
                _ => unreachable!(),
            })
        };
        let out = match (op, &l, &r) {
            (BinOp::Eq, _, _) => same_type(&l, &r).map(|_| l == r)?,
            (BinOp::Ne, _, _) => same_type(&l, &r).map(|_| l != r)?,
            (_, PrimValue::Int(a), PrimValue::Int(b)) => ord(a.cmp(b))?,
            (_, PrimValue::Float(a), PrimValue::Float(b)) => {
                ord(a.partial_cmp(b).ok_or_else(|| Stop::Fail("NaN comparison".into()))?)?
            }
            (_, PrimValue::Str(a), PrimValue::Str(b)) => ord(a.cmp(b))?,
            _ => return Err(Stop::Fail("comparison needs matching primitive types".into())),
        };
        Ok(PrimValue::Bool(out))
    }

    /// Walk a path without creating anything. Reads of elements that do
    /// not exist yet block until the element appears or the array closes.
    fn resolve_read(&self, frame: u32, p: &PPath) -> Result<NodeId, Stop> {
        let f = self.ancestor(frame, p.root.depth);
        let mut node = match self.frames[f as usize].slots[p.root.slot as usize] {
            Some(n) => n,
            None => return Err(Stop::Block(Blocker::Slot(f, p.root.slot))),
        };
        for seg in &p.segs {
            match seg {
                PSeg::Field(name) => {
                    node = self.store.field(node, name).ok_or_else(|| {
                        Stop::Fail(format!(
                            "no field {} under {}",
                            name,
                            self.store.logical_path(node)
                        ))
                    })?;
                }
                PSeg::Index(e) => {
                    let i = as_index(self.eval(frame, e)?)?;
                    match self.store.element(node, i) {
                        Some(c) => node = c,
                        None => {
                            let (len, closed) = self
                                .store
                                .array_len(node)
                                .ok_or_else(|| Stop::Fail("index into non-array".into()))?;
                            if closed {
                                return Err(Stop::Fail(format!(
                                    "index {} outside {} (extent {})",
                                    i,
                                    self.store.logical_path(node),
                                    len
                                )));
                            }
                            return Err(Stop::Block(Blocker::Elem(node)));
                        }
                    }
                }
            }
        }
        Ok(node)
    }

    /// Walk a path for writing, creating array elements along the way.
    /// Arrays touched here close when the scope of the path's root frame
    /// completes.
    fn resolve_write(&mut self, frame: u32, p: &PPath) -> Result<NodeId, Stop> {
        let f = self.ancestor(frame, p.root.depth);
        let owner_scope = self.frames[f as usize].scope;
        let mut node = match self.frames[f as usize].slots[p.root.slot as usize] {
            Some(n) => n,
            None => return Err(Stop::Block(Blocker::Slot(f, p.root.slot))),
        };
        for seg in &p.segs {
            match seg {
                PSeg::Field(name) => {
                    node = self.store.field(node, name).ok_or_else(|| {
                        Stop::Fail(format!(
                            "no field {} under {}",
                            name,
                            self.store.logical_path(node)
                        ))
                    })?;
                }
                PSeg::Index(e) => {
                    let i = as_index(self.eval(frame, e)?)?;
                    match self.store.element(node, i) {
                        Some(c) => node = c,
                        None => {
                            let child = self
                                .store
                                .element_or_create(node, i, &self.plan.table)
                                .map_err(|e| Stop::Fail(e.to_string()))?;
                            self.scopes[owner_scope as usize].arrays.insert(node);
                            self.fire_elem(node);
                            node = child;
                        }
                    }
                }
            }
        }
        Ok(node)
    }

    // ---- statement execution ----

    fn seed_top(&mut self) {
        let scope = self.new_scope(None);
        let frame = self.frames.len() as u32;
        self.frames.push(FrameInst {
            frame: &self.plan.top,
            parent: None,
            prefix: String::new(),
            scope,
            slots: vec![None; self.plan.top.slots.len()],
        });
        let body: &'p [PStmt] = &self.plan.top.body;
        self.queue_body(frame, scope, body);
        self.scope_done(scope);
    }

    fn drain(&mut self) {
        while let Some(id) = self.runnable.pop_front() {
            if self.interrupted {
                return;
            }
            self.run_item(id);
        }
    }

    fn run_item(&mut self, id: u32) {
        let body = self.items[id as usize].take().expect("item queued twice");
        let outcome = match &body {
            ItemBody::Stmt { frame, scope, label, stmt } => {
                self.exec_stmt(*frame, *scope, label, *stmt)
            }
            ItemBody::Gate { task } => self.run_gate(*task),
        };
        match outcome {
            Ok(Flow::Done) => {
                if let ItemBody::Stmt { scope, .. } = body {
                    self.scope_done(scope);
                }
            }
            Ok(Flow::Transfer) => {}
            Err(Stop::Block(b)) => {
                self.items[id as usize] = Some(body);
                self.park(id, b);
            }
            Err(Stop::Fail(msg)) => {
                match &body {
                    ItemBody::Stmt { label, scope, .. } => {
                        self.errors.push(format!("{}: {}", label, msg));
                        let scope = *scope;
                        self.scope_done(scope);
                    }
                    ItemBody::Gate { task } => {
                        let t = *task;
                        self.errors.push(format!("task {}: {}", self.tasks[t as usize].label, msg));
                        self.fail_task(t, &msg);
                    }
                }
            }
        }
    }

    fn exec_stmt(
        &mut self,
        frame: u32,
        scope: u32,
        label: &str,
        stmt: &'p PStmt,
    ) -> Result<Flow, Stop> {
        match stmt {
            PStmt::Decl { slot, mapper, init } => {
                self.exec_decl(frame, scope, label, *slot, mapper.as_ref(), init.as_ref())
            }
            PStmt::Assign { target, value } => {
                self.exec_assign(frame, scope, label, target, value)
            }
            PStmt::Foreach { source, body, .. } => {
                self.exec_foreach(frame, scope, label, source, body)
            }
            PStmt::If { cond, then_body, else_body } => {
                let take_then = match self.eval(frame, cond)? {
                    PrimValue::Bool(b) => b,
                    _ => return Err(Stop::Fail("condition must be boolean".into())),
                };
                let (stmts, tag) =
                    if take_then { (then_body, 't') } else { (else_body, 'e') };
                for (j, s) in stmts.iter().enumerate() {
                    let lbl = format!("{}{}{}", label, tag, j);
                    self.queue_item(ItemBody::Stmt { frame, scope, label: lbl, stmt: s });
                }
                Ok(Flow::Done)
            }
            PStmt::Call(call) => {
                let peeked = self.peek_call(frame, call)?;
                self.commit_call(frame, scope, label, call, peeked, None)
            }
        }
    }

    fn exec_decl(
        &mut self,
        frame: u32,
        scope: u32,
        label: &str,
        slot: u32,
        mapper: Option<&'p crate::plan::PMapper>,
        init: Option<&'p PRvalue>,
    ) -> Result<Flow, Stop> {
        let name = {
            let fi = &self.frames[frame as usize];
            format!("{}{}", fi.prefix, fi.frame.slots[slot as usize].name)
        };
        let declared = self.frames[frame as usize].frame.slots[slot as usize].ty.clone();

        // Peek phase: everything that can block happens before any node is
        // created, so a re-run does not duplicate state.
        let mapped = match mapper {
            Some(m) => {
                let mut params = BTreeMap::new();
                for (k, p) in &m.params {
                    let v = match p {
                        PMapperParam::Str(s) => ParamValue::Str(s.clone()),
                        PMapperParam::Int(i) => ParamValue::Int(*i),
                        PMapperParam::Bool(b) => ParamValue::Bool(*b),
                        PMapperParam::Slot(r) => {
                            self.mapper_param_from_slot(frame, *r)?
                        }
                    };
                    params.insert(k.clone(), v);
                }
                let written = frame_writes(self.frames[frame as usize].frame);
                let mode = if written.contains(&slot) || init.is_some() {
                    MapMode::Output
                } else {
                    MapMode::Input
                };
                Some((m.mapper.as_str(), params, mode))
            }
            None => None,
        };
        let peeked_init = match init {
            Some(PRvalue::Call(call)) => Some(InitKind::Call(self.peek_call(frame, call)?)),
            Some(PRvalue::Expr(PExpr::Path(p))) => {
                Some(InitKind::Alias(self.resolve_read(frame, p)?))
            }
            Some(PRvalue::Expr(e)) => Some(InitKind::Value(self.eval(frame, e)?)),
            None => None,
        };

        // Commit phase.
        let node = match mapped {
            Some((mname, params, mode)) => {
                let base = self.cfg.base_dir.clone();
                map_dataset(
                    &self.registry,
                    &mut self.store,
                    &name,
                    mname,
                    &params,
                    &declared,
                    mode,
                    &base,
                    &self.plan.table,
                )
                .map_err(|e| Stop::Fail(e.to_string()))?
            }
            None => match &peeked_init {
                Some(InitKind::Alias(src)) => *src,
                _ => self.store.create(&name, declared, &self.plan.table),
            },
        };
        self.frames[frame as usize].slots[slot as usize] = Some(node);
        self.fire_slot(frame, slot);

        match peeked_init {
            Some(InitKind::Call(peeked)) => {
                let call = match init {
                    Some(PRvalue::Call(c)) => c,
                    _ => unreachable!(),
                };
                return self.commit_call(frame, scope, label, call, peeked, Some(node));
            }
            Some(InitKind::Value(v)) => {
                self.settle_prim(node, v)?;
            }
            Some(InitKind::Alias(src)) => {
                if mapper.is_some() && src != node {
                    // A mapped decl with a path initializer copies instead
                    // of aliasing, because the mapped node owns its names.
                    self.gate_settled(src)?;
                    self.link_copy(src, node)?;
                }
            }
            None => {}
        }
        Ok(Flow::Done)
    }

    fn mapper_param_from_slot(&self, frame: u32, r: crate::plan::SlotRef) -> Result<ParamValue, Stop> {
        let node = self.resolve_read(frame, &PPath::slot(r))?;
        let n = self.store.get(node);
        match &n.kind {
            NodeKind::Prim(_) => match n.leaf_state() {
                LeafState::Resolved => match n.prim().unwrap() {
                    PrimValue::Str(s) => Ok(ParamValue::Str(s.clone())),
                    PrimValue::Int(i) => Ok(ParamValue::Int(*i)),
                    PrimValue::Bool(b) => Ok(ParamValue::Bool(*b)),
                    PrimValue::Float(_) => {
                        Err(Stop::Fail("float mapper parameters are not supported".into()))
                    }
                },
                LeafState::Failed => Err(Stop::Fail(format!(
                    "mapper parameter {} failed upstream",
                    self.store.logical_path(node)
                ))),
                LeafState::Pending => Err(Stop::Block(Blocker::Resolve(node))),
            },
            NodeKind::File(_) => match n.leaf_state() {
                // A file-valued parameter hands the mapper the produced
                // file's path, the hook that lets a table computed by one
                // task drive the mapping of a later declaration.
                LeafState::Resolved => Ok(ParamValue::Str(
                    n.target().expect("resolved file has a target").to_string(),
                )),
                LeafState::Failed => Err(Stop::Fail(format!(
                    "mapper parameter {} failed upstream",
                    self.store.logical_path(node)
                ))),
                LeafState::Pending => Err(Stop::Block(Blocker::Resolve(node))),
            },
            _ => Err(Stop::Fail("mapper parameter must be a primitive or file".into())),
        }
    }

    fn exec_assign(
        &mut self,
        frame: u32,
        scope: u32,
        label: &str,
        target: &'p PPath,
        value: &'p PRvalue,
    ) -> Result<Flow, Stop> {
        match value {
            PRvalue::Call(call) => {
                let peeked = self.peek_call(frame, call)?;
                let dst = self.resolve_write(frame, target)?;
                self.commit_call(frame, scope, label, call, peeked, Some(dst))
            }
            PRvalue::Expr(PExpr::Path(p)) => {
                let src = self.resolve_read(frame, p)?;
                if matches!(self.store.get(src).kind, NodeKind::Prim(_)) {
                    let v = self.eval(frame, &PExpr::Path(p.clone()))?;
                    let dst = self.resolve_write(frame, target)?;
                    self.settle_prim(dst, v)?;
                } else {
                    self.gate_settled(src)?;
                    let dst = self.resolve_write(frame, target)?;
                    self.link_copy(src, dst)?;
                }
                Ok(Flow::Done)
            }
            PRvalue::Expr(e) => {
                let v = self.eval(frame, e)?;
                let dst = self.resolve_write(frame, target)?;
                self.settle_prim(dst, v)?;
                Ok(Flow::Done)
            }
        }
    }

    fn gate_settled(&self, id: NodeId) -> Result<(), Stop> {
        match self.settled_blocker(id) {
            Ok(Some(b)) => Err(Stop::Block(b)),
            Ok(None) => Ok(()),
            Err(msg) => Err(Stop::Fail(msg)),
        }
    }

    /// Assignment between settled datasets. File leaves share the source's
    /// physical path when the target has none of its own; targets with a
    /// mapped path get a real copy.
    fn link_copy(&mut self, src: NodeId, dst: NodeId) -> Result<(), Stop> {
        if src == dst {
            return Ok(());
        }
        if self.subtree_failed(src) {
            let msg = format!("upstream failure in {}", self.store.logical_path(src));
            self.fail_subtree(dst, &msg);
            return Ok(());
        }
        let snap = {
            let n = self.store.get(src);
            match &n.kind {
                NodeKind::Prim(_) => LinkSrc::Prim(n.prim().cloned().ok_or_else(|| {
                    Stop::Fail(format!("{} is unresolved", self.store.logical_path(src)))
                })?),
                NodeKind::File(_) => LinkSrc::File(
                    n.target().expect("settled file has a target").to_string(),
                ),
                NodeKind::Struct(children) => {
                    LinkSrc::Struct(children.iter().map(|(f, c)| (f.clone(), *c)).collect())
                }
                NodeKind::Array(state) => LinkSrc::Array(state.lock().unwrap().elems.clone()),
            }
        };
        match snap {
            LinkSrc::Prim(v) => self.settle_prim(dst, v),
            LinkSrc::File(from) => {
                let existing = self.store.get(dst).target().map(str::to_string);
                match existing {
                    None => {
                        self.store
                            .get(dst)
                            .set_target(from)
                            .map_err(|e| Stop::Fail(e.to_string()))?;
                    }
                    Some(to) => {
                        if to != from && self.cfg.side_effects {
                            if let Some(dir) = Path::new(&to).parent() {
                                std::fs::create_dir_all(dir).ok();
                            }
                            std::fs::copy(&from, &to).map_err(|e| {
                                Stop::Fail(format!("copy {} -> {}: {}", from, to, e))
                            })?;
                        }
                    }
                }
                self.settle_file(dst)
            }
            LinkSrc::Struct(fields) => {
                for (name, s) in fields {
                    let d = self.store.field(dst, &name).ok_or_else(|| {
                        Stop::Fail(format!("target lacks field {}", name))
                    })?;
                    self.link_copy(s, d)?;
                }
                Ok(())
            }
            LinkSrc::Array(elems) => {
                for (i, e) in elems.iter().enumerate() {
                    let s = e.ok_or_else(|| {
                        Stop::Fail(format!(
                            "element {} of {} was never assigned",
                            i,
                            self.store.logical_path(src)
                        ))
                    })?;
                    let d = self
                        .store
                        .element_or_create(dst, i, &self.plan.table)
                        .map_err(|e| Stop::Fail(e.to_string()))?;
                    self.fire_elem(dst);
                    self.link_copy(s, d)?;
                }
                let (_, closed) = self.store.array_len(dst).unwrap_or((0, true));
                if !closed {
                    self.store
                        .close_array(dst, elems.len())
                        .map_err(|e| Stop::Fail(e.to_string()))?;
                    self.fire_close(dst);
                }
                Ok(())
            }
        }
    }

    fn exec_foreach(
        &mut self,
        frame: u32,
        scope: u32,
        label: &str,
        source: &'p PExpr,
        body: &'p Frame,
    ) -> Result<Flow, Stop> {
        let PExpr::Path(p) = source else {
            return Err(Stop::Fail("foreach source must be a dataset path".into()));
        };
        let src = self.resolve_read(frame, p)?;
        let (len, closed) = self
            .store
            .array_len(src)
            .ok_or_else(|| Stop::Fail("foreach source must be an array".into()))?;
        if self.cfg.pipelining {
            // Pipelined expansion starts as soon as the extent is final.
            if !closed {
                return Err(Stop::Block(Blocker::Close(src)));
            }
        } else {
            self.gate_settled(src)?;
        }

        let child_scope = self.new_scope(Some(scope));
        self.register_static_writes(&body.body, 0, frame);
        let with_index = len > 0 && foreach_has_index_var(body);
        for i in 0..len {
            let elem = match self.store.element(src, i) {
                Some(e) => e,
                None => {
                    self.errors.push(format!(
                        "{}: element {} of {} was never assigned",
                        label,
                        i,
                        self.store.logical_path(src)
                    ));
                    continue;
                }
            };
            let prefix = format!("{}[{}].", label, i);
            let mut slots = vec![None; body.slots.len()];
            slots[0] = Some(elem);
            if with_index {
                let idx_name = format!("{}{}", prefix, body.slots[1].name);
                let idx = self.store.create(&idx_name, crate::types::Ty::INT, &self.plan.table);
                self.store.get(idx).resolve_prim(PrimValue::Int(i as i64)).ok();
                slots[1] = Some(idx);
            }
            let fid = self.frames.len() as u32;
            self.frames.push(FrameInst {
                frame: body,
                parent: Some(frame),
                prefix,
                scope: child_scope,
                slots,
            });
            self.queue_body(fid, child_scope, &body.body);
        }
        self.scope_done(child_scope);
        Ok(Flow::Transfer)
    }

    /// Arrays a foreach body writes into enclosing frames, registered
    /// before any instance runs so an empty expansion still closes them.
    fn register_static_writes(&mut self, stmts: &'p [PStmt], rel_depth: u8, encl: u32) {
        for stmt in stmts {
            match stmt {
                PStmt::Assign { target, .. } => {
                    if target.root.depth <= rel_depth {
                        continue;
                    }
                    let first_index = target.segs.iter().position(|s| matches!(s, PSeg::Index(_)));
                    let Some(cut) = first_index else { continue };
                    if target.segs[..cut].iter().any(|s| matches!(s, PSeg::Index(_))) {
                        continue;
                    }
                    let root = crate::plan::SlotRef {
                        depth: target.root.depth - rel_depth - 1,
                        slot: target.root.slot,
                    };
                    let f = self.ancestor(encl, root.depth);
                    let Some(mut node) = self.frames[f as usize].slots[root.slot as usize] else {
                        continue;
                    };
                    let owner = self.frames[f as usize].scope;
                    let mut ok = true;
                    for seg in &target.segs[..cut] {
                        let PSeg::Field(name) = seg else { unreachable!() };
                        match self.store.field(node, name) {
                            Some(c) => node = c,
                            None => {
                                ok = false;
                                break;
                            }
                        }
                    }
                    if ok && matches!(self.store.get(node).kind, NodeKind::Array(_)) {
                        self.scopes[owner as usize].arrays.insert(node);
                    }
                }
                PStmt::Foreach { body, .. } => {
                    self.register_static_writes(&body.body, rel_depth + 1, encl);
                }
                PStmt::If { then_body, else_body, .. } => {
                    self.register_static_writes(then_body, rel_depth, encl);
                    self.register_static_writes(else_body, rel_depth, encl);
                }
                _ => {}
            }
        }
    }

    // ---- calls and tasks ----

    fn peek_call(&self, frame: u32, call: &'p PCall) -> Result<Vec<Bind>, Stop> {
        let proc = &self.plan.procs[call.proc as usize];
        let mut binds = Vec::with_capacity(call.args.len());
        for (k, arg) in call.args.iter().enumerate() {
            let slot_ty = match &proc.kind {
                ProcKind::App(app) => &app.slots[k].ty,
                ProcKind::Compound(f) => &f.slots[k].ty,
            };
            let bind = match arg {
                PExpr::Path(p) if !matches!(slot_ty, crate::types::Ty::Prim(_)) => {
                    Bind::Node(self.resolve_read(frame, p)?)
                }
                e => Bind::Val(self.eval(frame, e)?),
            };
            binds.push(bind);
        }
        Ok(binds)
    }

    fn commit_call(
        &mut self,
        _frame: u32,
        scope: u32,
        label: &str,
        call: &'p PCall,
        binds: Vec<Bind>,
        target: Option<NodeId>,
    ) -> Result<Flow, Stop> {
        let plan: &'p Plan = self.plan;
        let proc = &plan.procs[call.proc as usize];
        match &proc.kind {
            ProcKind::App(app) => {
                self.create_task(label, &proc.name, app, binds, target)?;
                Ok(Flow::Done)
            }
            ProcKind::Compound(body) => {
                let child_scope = self.new_scope(Some(scope));
                let mut slots = vec![None; body.slots.len()];
                for (k, bind) in binds.into_iter().enumerate() {
                    slots[k] = Some(match bind {
                        Bind::Node(n) => n,
                        Bind::Val(v) => {
                            let name = format!("{}.@a{}", label, k);
                            let ty = body.slots[k].ty.clone();
                            let n = self.store.create(&name, ty, &self.plan.table);
                            self.store.get(n).resolve_prim(v).ok();
                            n
                        }
                    });
                }
                if proc.n_outputs == 1 {
                    let out_slot = proc.n_inputs as usize;
                    slots[out_slot] = Some(
                        target.ok_or_else(|| Stop::Fail("call result is discarded".into()))?,
                    );
                }
                let fid = self.frames.len() as u32;
                self.frames.push(FrameInst {
                    frame: body,
                    parent: None,
                    prefix: format!("{}.", label),
                    scope: child_scope,
                    slots,
                });
                self.queue_body(fid, child_scope, &body.body);
                self.scope_done(child_scope);
                Ok(Flow::Transfer)
            }
        }
    }

    fn create_task(
        &mut self,
        label: &str,
        proc_name: &str,
        app: &'p AppPlan,
        binds: Vec<Bind>,
        target: Option<NodeId>,
    ) -> Result<(), Stop> {
        let task_id = self.tasks.len() as u32;
        if let Some(out) = target {
            self.store.get(out).claim_producer(task_id).map_err(|_| {
                Stop::Fail(format!(
                    "{} already has a producer",
                    self.store.logical_path(out)
                ))
            })?;
            if self.store.file_leaves(out).is_empty() || has_prim_leaf(&self.store, out) {
                return Err(Stop::Fail(format!(
                    "app output {} must be file backed",
                    self.store.logical_path(out)
                )));
            }
        }
        let duration = self.cfg.durations.sample(self.cfg.seed, label);
        self.tasks.push(TaskRecord {
            app: proc_name.to_string(),
            plan_app: app,
            label: label.to_string(),
            in_binds: binds,
            out_node: target,
            state: TaskState::Waiting,
            attempt: 0,
            retry: RetryState::default(),
            forced_site: None,
            exclude_site: None,
            site: None,
            duration_s: duration,
            created_s: self.clock.now(),
            submitted_s: 0.0,
            exec: None,
        });
        self.live_tasks += 1;
        if !self.try_restore(task_id) {
            self.queue_item(ItemBody::Gate { task: task_id });
        }
        Ok(())
    }

    /// Restart: a task whose outputs are all in the recovery map, with
    /// their files still present, resolves immediately and never runs.
    fn try_restore(&mut self, task_id: u32) -> bool {
        if self.recovered.is_empty() {
            return false;
        }
        let Some(out) = self.tasks[task_id as usize].out_node else { return false };
        let leaves = self.store.file_leaves(out);
        if leaves.is_empty() {
            return false;
        }
        let mut found = Vec::with_capacity(leaves.len());
        for leaf in &leaves {
            let logical = self.store.logical_path(*leaf);
            let Some((phys, digest)) = self.recovered.get(&logical) else { return false };
            if !Path::new(phys).is_file() {
                return false;
            }
            if let Some(t) = self.store.get(*leaf).target() {
                if t != phys {
                    return false;
                }
            }
            found.push((*leaf, logical, phys.clone(), digest.clone()));
        }
        for (leaf, logical, phys, digest) in found {
            if self.store.get(leaf).target().is_none() {
                self.store.get(leaf).set_target(phys.clone()).ok();
            }
            self.store.get(leaf).resolve_file().ok();
            self.fire_resolve(leaf);
            self.datasets.insert(logical, (phys, digest));
        }
        self.tasks[task_id as usize].state = TaskState::Restored;
        self.restored += 1;
        self.live_tasks -= 1;
        true
    }

    fn run_gate(&mut self, task_id: u32) -> Result<Flow, Stop> {
        let binds = self.tasks[task_id as usize].in_binds.clone();
        for bind in &binds {
            if let Bind::Node(n) = bind {
                match self.settled_blocker(*n) {
                    Ok(Some(b)) => return Err(Stop::Block(b)),
                    Ok(None) => {}
                    Err(msg) => return Err(Stop::Fail(msg)),
                }
            }
        }
        for bind in &binds {
            if let Bind::Node(n) = bind {
                if self.subtree_failed(*n) {
                    let msg =
                        format!("upstream failure in {}", self.store.logical_path(*n));
                    self.fail_task(task_id, &msg);
                    return Ok(Flow::Done);
                }
            }
        }
        self.tasks[task_id as usize].state = TaskState::Ready;
        self.push_ready(task_id);
        Ok(Flow::Done)
    }

    fn push_ready(&mut self, task_id: u32) {
        if self.ready.is_empty() {
            self.window_deadline = Some(self.clock.now() + self.cfg.sched.cluster_window_s);
        }
        self.ready.push(task_id);
    }

    fn fail_task(&mut self, task_id: u32, msg: &str) {
        let out = self.tasks[task_id as usize].out_node;
        if let Some(out) = out {
            self.fail_subtree(out, msg);
        }
        let t = &mut self.tasks[task_id as usize];
        if t.state != TaskState::Failed {
            t.state = TaskState::Failed;
            self.failed += 1;
            self.live_tasks -= 1;
        }
    }

    // ---- dispatch ----

    fn flush_ready(&mut self) {
        if self.ready.is_empty() {
            self.window_deadline = None;
            return;
        }
        let cap = self.cfg.sched.cluster_cap.max(1);
        if cap > 1 {
            match self.window_deadline {
                Some(d) if self.clock.now() + 1e-9 >= d => {}
                _ => return,
            }
        }
        let batch = std::mem::take(&mut self.ready);
        self.window_deadline = None;

        // Constraint groups keep forced and excluded tasks out of shared
        // bundles; within a group, bundles pack by app.
        let mut groups: BTreeMap<(Option<usize>, Option<usize>), Vec<u32>> = BTreeMap::new();
        for t in batch {
            let key = (
                self.tasks[t as usize].forced_site,
                self.tasks[t as usize].exclude_site,
            );
            groups.entry(key).or_default().push(t);
        }
        let mut leftover = Vec::new();
        for ((forced, excluded), ids) in groups {
            let metas: Vec<ReadyTask> = ids
                .iter()
                .map(|&t| ReadyTask {
                    task_id: t as u64,
                    app: self.tasks[t as usize].app.clone(),
                })
                .collect();
            for bundle in cluster(&metas, cap) {
                let tasks: Vec<u32> = bundle.iter().map(|&t| t as u32).collect();
                let app = self.tasks[tasks[0] as usize].app.clone();
                let site = self.pick_site(&app, forced, excluded);
                match site {
                    Some(s) => self.submit_bundle(s, &tasks),
                    None => leftover.extend(tasks),
                }
            }
        }
        self.ready = leftover;
    }

    fn pick_site(&mut self, app: &str, forced: Option<usize>, excluded: Option<usize>) -> Option<usize> {
        if let Some(f) = forced {
            let st = &self.sites[f].state;
            return (st.has_capacity() && st.accepts_app(app)).then_some(f);
        }
        let states: Vec<SiteState> = self
            .sites
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let mut st = s.state.clone();
                if Some(i) == excluded {
                    // An excluded site drops out by losing its headroom.
                    st.jobs_in_flight = st.throttle;
                }
                st
            })
            .collect();
        select_site(&states, &[app], &mut self.site_rng)
    }

    fn submit_bundle(&mut self, site: usize, task_ids: &[u32]) {
        let mut members = Vec::with_capacity(task_ids.len());
        let mut member_ids = Vec::with_capacity(task_ids.len());
        for &t in task_ids {
            match self.build_member(t) {
                Ok(m) => {
                    members.push(m);
                    member_ids.push(t);
                }
                Err(msg) => {
                    self.errors
                        .push(format!("task {}: {}", self.tasks[t as usize].label, msg));
                    self.fail_task(t, &msg);
                }
            }
        }
        if members.is_empty() {
            return;
        }
        let job_id = self.next_job;
        self.next_job += 1;
        let label = if member_ids.len() == 1 {
            let t = &self.tasks[member_ids[0] as usize];
            format!("t{}.a{}", member_ids[0], t.attempt)
        } else {
            format!("b{}", job_id)
        };
        let now = self.clock.now();
        let avoid = self.sites[site].state.avoid_hosts(now);
        let spec = JobSpec {
            job_id,
            sandbox_label: label,
            members,
            avoid_hosts: avoid,
            keep_sandbox: false,
        };
        match self.sites[site].provider.submit(spec, now) {
            Ok(()) => {
                self.sites[site].state.jobs_in_flight += 1;
                self.jobs.insert(job_id, JobInfo { site });
                self.jobs_submitted += 1;
                for &t in &member_ids {
                    let rec = &mut self.tasks[t as usize];
                    rec.state = TaskState::Submitted;
                    rec.site = Some(site);
                    rec.attempt += 1;
                    rec.submitted_s = now;
                    rec.retry.note_site(site);
                }
            }
            Err(e) => {
                self.errors.push(format!(
                    "site {} rejected job: {}",
                    self.sites[site].state.site_id, e
                ));
                for &t in &member_ids {
                    self.fail_task(t, &format!("submit failed: {}", e));
                }
            }
        }
    }

    fn build_member(&mut self, task_id: u32) -> Result<TaskExec, String> {
        let binds = self.tasks[task_id as usize].in_binds.clone();
        let out_node = self.tasks[task_id as usize].out_node;
        let app = self.tasks[task_id as usize].plan_app;
        let executable = app.executable.clone();
        let duration = self.tasks[task_id as usize].duration_s;

        let mut stage_ins: Vec<(PathBuf, String)> = Vec::new();
        let mut rel_of: HashMap<NodeId, String> = HashMap::new();
        let mut by_phys: HashMap<String, String> = HashMap::new();
        let mut used: HashSet<String> = HashSet::new();
        let mut prov_ins: Vec<(String, String)> = Vec::new();
        let mut prov_outs: Vec<(String, String)> = Vec::new();
        let pick_rel = |phys: &str, used: &mut HashSet<String>| -> String {
            let base = Path::new(phys)
                .file_name()
                .map(|b| b.to_string_lossy().into_owned())
                .unwrap_or_else(|| "file".to_string());
            let mut rel = base.clone();
            let mut k = 1;
            while !used.insert(rel.clone()) {
                rel = format!("i{}_{}", k, base);
                k += 1;
            }
            rel
        };

        for bind in &binds {
            if let Bind::Node(n) = bind {
                for leaf in self.store.file_leaves(*n) {
                    if rel_of.contains_key(&leaf) {
                        continue;
                    }
                    let phys = self
                        .store
                        .get(leaf)
                        .target()
                        .ok_or_else(|| {
                            format!("{} has no physical path", self.store.logical_path(leaf))
                        })?
                        .to_string();
                    let rel = match by_phys.get(&phys) {
                        Some(r) => r.clone(),
                        None => {
                            let r = pick_rel(&phys, &mut used);
                            by_phys.insert(phys.clone(), r.clone());
                            stage_ins.push((PathBuf::from(&phys), r.clone()));
                            prov_ins.push((self.store.logical_path(leaf), phys.clone()));
                            r
                        }
                    };
                    rel_of.insert(leaf, rel);
                }
            }
        }

        let mut stage_outs: Vec<(String, PathBuf)> = Vec::new();
        let mut out_phys: HashSet<String> = HashSet::new();
        if let Some(out) = out_node {
            for leaf in self.store.file_leaves(out) {
                let phys = self.ensure_target(leaf)?;
                if !out_phys.insert(phys.clone()) {
                    return Err(format!("two outputs map to {}", phys));
                }
                let rel = pick_rel(&phys, &mut used);
                rel_of.insert(leaf, rel.clone());
                if self.cfg.side_effects {
                    if let Some(dir) = Path::new(&phys).parent() {
                        std::fs::create_dir_all(dir)
                            .map_err(|e| format!("creating {}: {}", dir.display(), e))?;
                    }
                }
                prov_outs.push((self.store.logical_path(leaf), phys.clone()));
                stage_outs.push((rel, PathBuf::from(phys)));
            }
        }

        let mut args = Vec::with_capacity(app.args.len());
        for arg in &app.args {
            args.push(self.render_arg(arg, &binds, out_node, &rel_of)?);
        }

        if self.cfg.provenance {
            let mut cmd = vec![executable.clone()];
            cmd.extend(args.iter().cloned());
            self.tasks[task_id as usize].exec =
                Some(Box::new(ExecInfo { command_line: cmd, ins: prov_ins, outs: prov_outs }));
        }

        Ok(TaskExec {
            task_id: task_id as u64,
            executable,
            args,
            stage_ins,
            stage_outs,
            duration_s: duration,
        })
    }

    fn ensure_target(&mut self, leaf: NodeId) -> Result<String, String> {
        if let Some(t) = self.store.get(leaf).target() {
            return Ok(t.to_string());
        }
        let (root, steps) = self.store.steps_from_root(leaf);
        let path = match self.store.get(root).scheme.get() {
            Some(scheme) => {
                let rel = output_target(scheme, &steps);
                let p = Path::new(&rel);
                if p.is_absolute() {
                    rel
                } else {
                    self.cfg.base_dir.join(p).to_string_lossy().into_owned()
                }
            }
            None => self
                .cfg
                .run_dir
                .join("data")
                .join(self.store.logical_path(leaf))
                .to_string_lossy()
                .into_owned(),
        };
        self.store
            .get(leaf)
            .set_target(path.clone())
            .map_err(|e| e.to_string())?;
        Ok(path)
    }

    fn render_arg(
        &self,
        arg: &PArg,
        binds: &[Bind],
        out_node: Option<NodeId>,
        rel_of: &HashMap<NodeId, String>,
    ) -> Result<String, String> {
        match arg {
            PArg::Lit(s) => Ok(s.clone()),
            PArg::Prim(p) => {
                if p.root.slot as usize >= binds.len() {
                    return Err("output values cannot be arguments".into());
                }
                let v = self.app_path_value(p, binds, out_node)?;
                Ok(v.to_string())
            }
            PArg::File(p) => {
                let node = self.app_path_node(p, binds, out_node)?;
                let leaves = self.store.file_leaves(node);
                if leaves.len() != 1 {
                    return Err(format!(
                        "argument {} must name a single file",
                        self.store.logical_path(node)
                    ));
                }
                rel_of
                    .get(&leaves[0])
                    .cloned()
                    .ok_or_else(|| "argument file was not staged".to_string())
            }
        }
    }

    /// Slots past the input binds belong to the task's output tree.
    fn app_path_node(
        &self,
        p: &PPath,
        binds: &[Bind],
        out_node: Option<NodeId>,
    ) -> Result<NodeId, String> {
        let mut node = if (p.root.slot as usize) < binds.len() {
            match &binds[p.root.slot as usize] {
                Bind::Node(n) => *n,
                Bind::Val(_) => return Err("expected a dataset argument".into()),
            }
        } else {
            out_node.ok_or("argument names an output this call does not produce")?
        };
        for seg in &p.segs {
            match seg {
                PSeg::Field(name) => {
                    node = self
                        .store
                        .field(node, name)
                        .ok_or_else(|| format!("no field {}", name))?;
                }
                PSeg::Index(PExpr::Int(i)) if *i >= 0 => {
                    node = self
                        .store
                        .element(node, *i as usize)
                        .ok_or_else(|| format!("no element {}", i))?;
                }
                PSeg::Index(_) => {
                    return Err("argument index must be a literal".into());
                }
            }
        }
        Ok(node)
    }

    fn app_path_value(
        &self,
        p: &PPath,
        binds: &[Bind],
        out_node: Option<NodeId>,
    ) -> Result<PrimValue, String> {
        if p.segs.is_empty() {
            if let Some(Bind::Val(v)) = binds.get(p.root.slot as usize) {
                return Ok(v.clone());
            }
        }
        let node = self.app_path_node(p, binds, out_node)?;
        self.store
            .get(node)
            .prim()
            .cloned()
            .ok_or_else(|| format!("{} is not a value", self.store.logical_path(node)))
    }

    // ---- provider events ----

    fn handle_event(&mut self, site: usize, ev: ProviderEvent) {
        match ev {
            ProviderEvent::MemberDone { job_id, result } => {
                self.handle_member(site, job_id, result);
            }
            ProviderEvent::JobDone { job_id, .. } => {
                if self.jobs.remove(&job_id).is_some() {
                    let st = &mut self.sites[site].state;
                    st.jobs_in_flight = st.jobs_in_flight.saturating_sub(1);
                    if !self.ready.is_empty() {
                        // Capacity came back; retry held work right away.
                        self.window_deadline = Some(self.clock.now());
                    }
                }
            }
        }
    }

    fn handle_member(&mut self, site: usize, _job_id: u64, result: MemberResult) {
        let task_id = result.task_id as u32;
        if task_id as usize >= self.tasks.len() {
            return;
        }
        match self.tasks[task_id as usize].state {
            TaskState::Submitted => {}
            // Late duplicates and events for settled tasks are dropped, so
            // a retried task that already finished counts exactly once.
            _ => return,
        }
        let ok = result.ok();
        let mut failure_msg = String::new();
        let mut failure_class = None;
        if ok {
            match self.commit_outputs(task_id) {
                Ok(()) => {}
                Err(msg) => {
                    failure_msg = msg;
                    failure_class = Some(FailureClass::AppError);
                }
            }
        } else {
            failure_msg = if result.message.is_empty() {
                format!("exit {:?}", result.exit_code)
            } else {
                result.message.clone()
            };
            failure_class = Some(result.failure.unwrap_or(FailureClass::Transient));
        }
        let succeeded = failure_class.is_none();

        self.sites[site].state.score =
            update_score(self.sites[site].state.score, succeeded, &self.cfg.sched);
        self.trace.push(TraceRow {
            task_id,
            label: self.tasks[task_id as usize].label.clone(),
            app: self.tasks[task_id as usize].app.clone(),
            site: self.sites[site].state.site_id.clone(),
            host: result.host.clone(),
            attempt: self.tasks[task_id as usize].attempt,
            created_s: self.tasks[task_id as usize].created_s,
            submitted_s: self.tasks[task_id as usize].submitted_s,
            started_s: result.start_s,
            ended_s: result.end_s,
            ok: succeeded,
        });
        if self.cfg.provenance {
            self.write_provenance(task_id, site, &result, succeeded, &failure_msg);
        }

        if succeeded {
            self.tasks[task_id as usize].state = TaskState::Done;
            self.live_tasks -= 1;
            self.executed += 1;
            if let Some(limit) = self.cfg.interrupt_after {
                if self.executed >= limit {
                    self.interrupted = true;
                }
            }
            return;
        }

        let class = failure_class.expect("failure path has a class");
        let host = result.host.clone();
        let n_sites = self.sites.len();
        let decision = {
            let t = &mut self.tasks[task_id as usize];
            handle_failure(&mut t.retry, class, site, &host, n_sites, &self.cfg.sched)
        };
        match decision {
            FailureDecision::RetrySameSite => {
                let t = &mut self.tasks[task_id as usize];
                t.forced_site = Some(site);
                t.state = TaskState::Ready;
                self.push_ready(task_id);
            }
            FailureDecision::RescheduleOtherSite { exclude } => {
                let t = &mut self.tasks[task_id as usize];
                t.forced_site = None;
                t.exclude_site = Some(exclude);
                t.state = TaskState::Ready;
                self.push_ready(task_id);
            }
            FailureDecision::RequeueAvoidHost { host } => {
                let until = self.clock.now() + self.cfg.sched.suspend_s;
                self.sites[site].state.suspend_host(&host, until);
                let t = &mut self.tasks[task_id as usize];
                t.forced_site = None;
                t.state = TaskState::Ready;
                self.push_ready(task_id);
            }
            FailureDecision::FailPermanent => {
                let attempts = self.tasks[task_id as usize].attempt;
                let msg = format!(
                    "task {} failed after {} attempts: {}",
                    self.tasks[task_id as usize].label, attempts, failure_msg
                );
                self.errors.push(msg.clone());
                self.fail_task(task_id, &msg);
            }
        }
    }

    /// Digest, log, and resolve every output leaf of a finished task.
    fn commit_outputs(&mut self, task_id: u32) -> Result<(), String> {
        let Some(out) = self.tasks[task_id as usize].out_node else { return Ok(()) };
        let leaves = self.store.file_leaves(out);
        let mut rows = Vec::with_capacity(leaves.len());
        for leaf in &leaves {
            let logical = self.store.logical_path(*leaf);
            let phys = self
                .store
                .get(*leaf)
                .target()
                .ok_or_else(|| format!("{} lost its target", logical))?
                .to_string();
            let digest = if self.cfg.side_effects {
                digest_file(Path::new(&phys))
                    .map_err(|e| format!("missing output {}: {}", logical, e))?
            } else {
                digest_hex(format!("sim:{}", logical).as_bytes())
            };
            rows.push((*leaf, logical, phys, digest));
        }
        let now = self.clock.now();
        for (leaf, logical, phys, digest) in rows {
            if let Some(log) = self.rlog.as_mut() {
                log.write(&LogRecord::DatasetProduced {
                    logical_path: logical.clone(),
                    physical_path: phys.clone(),
                    digest: digest.clone(),
                    timestamp: now,
                })
                .map_err(|e| format!("restart log write failed: {}", e))?;
            }
            self.datasets.insert(logical, (phys, digest));
            self.store.get(leaf).resolve_file().ok();
            self.fire_resolve(leaf);
        }
        Ok(())
    }

    fn write_provenance(
        &mut self,
        task_id: u32,
        site: usize,
        result: &MemberResult,
        ok: bool,
        msg: &str,
    ) {
        let t = &self.tasks[task_id as usize];
        let stat = |logical: &str, phys: &str| -> FileStat {
            let size = std::fs::metadata(phys).map(|m| m.len()).unwrap_or(0);
            let digest = digest_file(Path::new(phys)).unwrap_or_default();
            FileStat {
                logical: logical.to_string(),
                physical: phys.to_string(),
                size_bytes: size,
                digest,
            }
        };
        let (cmd, ins, outs) = match &t.exec {
            Some(e) => (
                e.command_line.clone(),
                e.ins.iter().map(|(l, p)| stat(l, p)).collect(),
                e.outs.iter().map(|(l, p)| stat(l, p)).collect(),
            ),
            None => (vec![t.plan_app.executable.clone()], Vec::new(), Vec::new()),
        };
        let rec = InvocationRecord {
            task_id: task_id as u64,
            attempt: t.attempt,
            app: t.app.clone(),
            site: self.sites[site].state.site_id.clone(),
            host: result.host.clone(),
            working_dir: result.work_dir.clone(),
            command_line: cmd,
            environment: self.env_subset.clone(),
            exit_code: result.exit_code,
            signal: result.signal,
            success: ok,
            user_cpu_s: result.user_cpu_s,
            system_cpu_s: result.system_cpu_s,
            max_rss_kb: result.max_rss_kb,
            usage_measured: result.usage_measured,
            wallclock_ms: ((result.end_s - result.start_s).max(0.0) * 1000.0) as u64,
            submitted_at_s: t.submitted_s,
            started_at_s: result.start_s,
            ended_at_s: result.end_s,
            stage_ins: ins,
            stage_outs: outs,
            message: msg.to_string(),
        };
        if self.cfg.side_effects {
            write_record(&self.cfg.run_dir, &rec);
        }
    }

    // ---- main loop ----

    fn main_loop(&mut self) {
        loop {
            self.drain();
            if self.interrupted {
                return;
            }
            self.flush_ready();
            if !self.runnable.is_empty() {
                continue;
            }
            if self.finished() {
                return;
            }
            let next = self.next_time();
            if self.clock.is_virtual() {
                match next {
                    Some(t) => {
                        self.clock.advance_to(t);
                        self.poll_all();
                    }
                    None => {
                        self.report_stall();
                        return;
                    }
                }
            } else {
                let got = self.poll_all();
                if got == 0 && self.runnable.is_empty() {
                    let waiting = self.jobs.values().map(|j| j.site).next();
                    match waiting {
                        Some(s) => {
                            self.sites[s].provider.wait(Duration::from_millis(10));
                        }
                        None => {
                            if self.ready.is_empty() {
                                self.report_stall();
                                return;
                            }
                            std::thread::sleep(Duration::from_millis(1));
                        }
                    }
                }
            }
        }
    }

    fn finished(&self) -> bool {
        self.runnable.is_empty()
            && self.parked == 0
            && self.ready.is_empty()
            && self.jobs.is_empty()
            && self.live_tasks == 0
    }

    fn next_time(&self) -> Option<f64> {
        let mut next: Option<f64> = None;
        for s in &self.sites {
            if let Some(t) = s.provider.next_event_at() {
                next = Some(next.map_or(t, |n: f64| n.min(t)));
            }
        }
        if !self.ready.is_empty() {
            if let Some(d) = self.window_deadline {
                next = Some(next.map_or(d, |n: f64| n.min(d)));
            }
        }
        next
    }

    fn poll_all(&mut self) -> usize {
        let now = self.clock.now();
        let mut n = 0;
        for i in 0..self.sites.len() {
            let evs = self.sites[i].provider.poll(now);
            n += evs.len();
            for ev in evs {
                if self.interrupted {
                    return n;
                }
                self.handle_event(i, ev);
            }
        }
        n
    }

    fn report_stall(&mut self) {
        let mut notes = Vec::new();
        for (node, items) in &self.resolve_watch {
            notes.push(format!(
                "{} unresolved ({} waiting)",
                self.store.logical_path(*node),
                items.len()
            ));
        }
        for (node, _) in &self.close_watch {
            notes.push(format!("array {} never closed", self.store.logical_path(*node)));
        }
        for (node, _) in &self.elem_watch {
            notes.push(format!(
                "an element of {} never appeared",
                self.store.logical_path(*node)
            ));
        }
        for ((f, s), _) in &self.slot_watch {
            let fi = &self.frames[*f as usize];
            notes.push(format!(
                "variable {}{} never bound",
                fi.prefix, fi.frame.slots[*s as usize].name
            ));
        }
        notes.sort();
        notes.truncate(10);
        self.errors.push(format!("run stalled: {}", notes.join("; ")));
    }

    fn finish(&mut self) -> RunResult {
        let status = if self.interrupted {
            RunStatus::Interrupted
        } else if self.errors.is_empty() && self.failed == 0 {
            RunStatus::Completed
        } else {
            RunStatus::Failed
        };
        if let Some(log) = self.rlog.as_mut() {
            let s = match status {
                RunStatus::Completed => "completed",
                RunStatus::Interrupted => "interrupted",
                RunStatus::Failed => "failed",
            };
            log.write(&LogRecord::RunFinished { status: s.to_string(), timestamp: self.clock.now() })
                .ok();
            log.sync().ok();
        }
        RunResult {
            status,
            tasks_total: self.tasks.len() as u64,
            tasks_executed: self.executed,
            tasks_restored: self.restored,
            tasks_failed: self.failed,
            jobs_submitted: self.jobs_submitted,
            makespan_s: self.clock.now(),
            bookkeeping_bytes: self.bookkeeping_bytes(),
            datasets: std::mem::take(&mut self.datasets),
            trace: std::mem::take(&mut self.trace),
            errors: std::mem::take(&mut self.errors),
        }
    }

    fn bookkeeping_bytes(&self) -> usize {
        let mut total = self.store.approx_bytes();
        total += self.tasks.capacity() * std::mem::size_of::<TaskRecord>();
        for t in &self.tasks {
            total += t.label.len() + t.app.len();
            total += t.in_binds.capacity() * std::mem::size_of::<Bind>();
        }
        total += self.trace.capacity() * std::mem::size_of::<TraceRow>();
        for r in &self.trace {
            total += r.label.len() + r.app.len() + r.site.len() + r.host.len();
        }
        total += self.items.capacity() * std::mem::size_of::<Option<ItemBody>>();
        total += self.frames.capacity() * std::mem::size_of::<FrameInst>();
        for f in &self.frames {
            total += f.prefix.len() + f.slots.capacity() * std::mem::size_of::<Option<NodeId>>();
        }
        total += self.scopes.capacity() * std::mem::size_of::<ScopeRec>();
        for (l, (p, d)) in &self.datasets {
            total += l.len() + p.len() + d.len() + 3 * std::mem::size_of::<String>();
        }
        total
    }
}

enum InitKind {
    Call(Vec<Bind>),
    Alias(NodeId),
    Value(PrimValue),
}

enum LinkSrc {
    Prim(PrimValue),
    File(String),
    Struct(Vec<(String, NodeId)>),
    Array(Vec<Option<NodeId>>),
}

/// (is_leaf, is_array, children) without holding a borrow into the store.
fn node_shape(store: &NodeStore, id: NodeId) -> (bool, bool, Vec<NodeId>) {
    match &store.get(id).kind {
        NodeKind::Prim(_) | NodeKind::File(_) => (true, false, Vec::new()),
        NodeKind::Struct(children) => {
            (false, false, children.iter().map(|(_, c)| *c).collect())
        }
        NodeKind::Array(state) => {
            let kids = state.lock().unwrap().elems.iter().flatten().copied().collect();
            (false, true, kids)
        }
    }
}

fn same_type(a: &PrimValue, b: &PrimValue) -> Result<(), Stop> {
    let matches = matches!(
        (a, b),
        (PrimValue::Int(_), PrimValue::Int(_))
            | (PrimValue::Float(_), PrimValue::Float(_))
            | (PrimValue::Str(_), PrimValue::Str(_))
            | (PrimValue::Bool(_), PrimValue::Bool(_))
    );
    if matches {
        Ok(())
    } else {
        Err(Stop::Fail("comparison needs matching primitive types".into()))
    }
}

fn as_index(v: PrimValue) -> Result<usize, Stop> {
    match v {
        PrimValue::Int(i) if i >= 0 => Ok(i as usize),
        PrimValue::Int(i) => Err(Stop::Fail(format!("negative index {}", i))),
        _ => Err(Stop::Fail("index must be an integer".into())),
    }
}

fn has_prim_leaf(store: &NodeStore, id: NodeId) -> bool {
    match &store.get(id).kind {
        NodeKind::Prim(_) => true,
        NodeKind::File(_) => false,
        NodeKind::Struct(children) => children.iter().any(|(_, c)| has_prim_leaf(store, *c)),
        NodeKind::Array(state) => {
            let elems: Vec<NodeId> = state.lock().unwrap().elems.iter().flatten().copied().collect();
            elems.into_iter().any(|c| has_prim_leaf(store, c))
        }
    }
}

/// Slot indexes a frame's own statements assign into, at any nesting.
fn frame_writes(frame: &Frame) -> BTreeSet<u32> {
    fn walk(stmts: &[PStmt], rel_depth: u8, out: &mut BTreeSet<u32>) {
        for s in stmts {
            match s {
                PStmt::Assign { target, .. } => {
                    if target.root.depth == rel_depth {
                        out.insert(target.root.slot);
                    }
                }
                PStmt::Foreach { body, .. } => walk(&body.body, rel_depth + 1, out),
                PStmt::If { then_body, else_body, .. } => {
                    walk(then_body, rel_depth, out);
                    walk(else_body, rel_depth, out);
                }
                _ => {}
            }
        }
    }
    let mut out = BTreeSet::new();
    walk(&frame.body, 0, &mut out);
    out
}

/// Foreach bodies get an index variable in slot 1 when the script declared
/// one; a local declared there would come with its own Decl statement.
fn foreach_has_index_var(body: &Frame) -> bool {
    if body.slots.len() < 2 || body.slots[1].ty != crate::types::Ty::INT {
        return false;
    }
    fn declares_slot1(stmts: &[PStmt]) -> bool {
        stmts.iter().any(|s| match s {
            PStmt::Decl { slot: 1, .. } => true,
            PStmt::If { then_body, else_body, .. } => {
                declares_slot1(then_body) || declares_slot1(else_body)
            }
            _ => false,
        })
    }
    !declares_slot1(&body.body)
}

/// Which top-level statements write each top-level variable. Used to pin
/// restart log rows to the statement that produced them.
fn top_writer_map(plan: &Plan) -> BTreeMap<String, Vec<usize>> {
    let mut map: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    fn escaped_writes(stmts: &[PStmt], rel_depth: u8, out: &mut BTreeSet<u32>) {
        for s in stmts {
            match s {
                PStmt::Assign { target, .. } => {
                    if target.root.depth == rel_depth {
                        out.insert(target.root.slot);
                    }
                }
                PStmt::Foreach { body, .. } => escaped_writes(&body.body, rel_depth + 1, out),
                PStmt::If { then_body, else_body, .. } => {
                    escaped_writes(then_body, rel_depth, out);
                    escaped_writes(else_body, rel_depth, out);
                }
                _ => {}
            }
        }
    }
    for (i, stmt) in plan.top.body.iter().enumerate() {
        let mut slots = BTreeSet::new();
        match stmt {
            PStmt::Decl { slot, .. } => {
                slots.insert(*slot);
            }
            PStmt::Assign { target, .. } => {
                if target.root.depth == 0 {
                    slots.insert(target.root.slot);
                }
            }
            PStmt::Foreach { body, .. } => escaped_writes(&body.body, 1, &mut slots),
            PStmt::If { then_body, else_body, .. } => {
                escaped_writes(then_body, 0, &mut slots);
                escaped_writes(else_body, 0, &mut slots);
            }
            PStmt::Call(_) => {}
        }
        for s in slots {
            let name = plan.top.slots[s as usize].name.clone();
            map.entry(name).or_default().push(i);
        }
    }
    map
}

fn root_of_logical(path: &str) -> &str {
    let end = path.find(['.', '[']).unwrap_or(path.len());
    &path[..end]
}

/// Reads the restart log and returns the recoverable outputs, refusing to
/// resume when any logged row belongs to a statement whose digest changed.
fn validate_resume(
    plan: &Plan,
    log_path: &Path,
    top_writers: &BTreeMap<String, Vec<usize>>,
) -> Result<BTreeMap<String, (String, String)>, EngineError> {
    let records = read_log(log_path)
        .map_err(|e| engine_error(format!("cannot resume: {}", e)))?;
    let current: Vec<String> = (0..plan.top.body.len())
        .map(|i| format!("{:016x}", plan.top_stmt_digest(i)))
        .collect();
    let mut changed = vec![false; plan.top.body.len()];
    let mut saw_header = false;
    for rec in &records {
        if let LogRecord::RunStarted { stmt_digests, .. } = rec {
            saw_header = true;
            for (i, flag) in changed.iter_mut().enumerate() {
                if stmt_digests.get(i) != Some(&current[i]) {
                    *flag = true;
                }
            }
        }
    }
    if !saw_header {
        return Err(engine_error("cannot resume: restart log has no run header"));
    }

    let attribute = |logical: &str| -> Vec<usize> {
        let root = root_of_logical(logical);
        if let Some(rest) = root.strip_prefix('@') {
            return rest.parse::<usize>().map(|i| vec![i]).unwrap_or_default();
        }
        top_writers.get(root).cloned().unwrap_or_default()
    };

    let mut recovered = BTreeMap::new();
    for rec in &records {
        if let LogRecord::DatasetProduced { logical_path, physical_path, digest, .. } = rec {
            let stmts = attribute(logical_path);
            if stmts.is_empty() {
                continue;
            }
            if stmts.iter().any(|&i| changed.get(i).copied().unwrap_or(true)) {
                return Err(engine_error(format!(
                    "plan digest mismatch: {} was produced by statement {} which has changed; \
                     start a fresh run directory",
                    logical_path, stmts[0]
                )));
            }
            recovered.insert(logical_path.clone(), (physical_path.clone(), digest.clone()));
        }
    }
    Ok(recovered)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::plan::compile;
    use crate::provider::provider_error;
    use crate::simbatch::{BatchModel, SimBatch};

    fn site_state(id: &str) -> SiteState {
        let cfg = crate::scheduler::SiteConfig {
            site_id: id.into(),
            provider: "simbatch".into(),
            provider_params: serde_json::Value::Null,
            throttle: 1000,
            apps: Vec::new(),
            initial_score: 1.0,
        };
        SiteState::new(&cfg)
    }

    fn sim_site(nodes: usize, slots: usize, rate: f64, side_effects: bool) -> EngineSite {
        let model = BatchModel::new(nodes, slots, rate);
        let provider = SimBatch::new(model, side_effects, "node").unwrap();
        EngineSite { state: site_state("sim0"), provider: Box::new(provider) }
    }

    /// Virtual-time provider whose members pass or fail by rule, for
    /// driving the retry ladder without real processes.
    struct MockSim {
        rule: Box<dyn Fn(&TaskExec, u32) -> Option<(FailureClass, String)> + Send>,
        attempts: HashMap<u64, u32>,
        queue: Vec<(f64, ProviderEvent)>,
        in_flight: usize,
        side_effects: bool,
    }

    impl Provider for MockSim {
        fn kind(&self) -> &'static str {
            "mock"
        }

        fn submit(&mut self, spec: JobSpec, now: f64) -> Result<(), crate::provider::ProviderError> {
            let mut t = now;
            for m in &spec.members {
                let attempt = self.attempts.entry(m.task_id).and_modify(|a| *a += 1).or_insert(1);
                let dur = m.duration_s.max(1e-3);
                let start = t;
                t += dur;
                let failure = (self.rule)(m, *attempt);
                let result = match failure {
                    None => {
                        if self.side_effects {
                            crate::synth::execute_direct(m).map_err(provider_error)?;
                        }
                        MemberResult {
                            task_id: m.task_id,
                            exit_code: Some(0),
                            signal: None,
                            failure: None,
                            message: String::new(),
                            host: "mock0".into(),
                            work_dir: String::new(),
                            start_s: start,
                            end_s: t,
                            user_cpu_s: 0.0,
                            system_cpu_s: 0.0,
                            max_rss_kb: 0,
                            usage_measured: false,
                        }
                    }
                    Some((class, message)) => MemberResult {
                        task_id: m.task_id,
                        exit_code: Some(3),
                        signal: None,
                        failure: Some(class),
                        message,
                        host: "mock0".into(),
                        work_dir: String::new(),
                        start_s: start,
                        end_s: t,
                        user_cpu_s: 0.0,
                        system_cpu_s: 0.0,
                        max_rss_kb: 0,
                        usage_measured: false,
                    },
                };
                self.queue.push((t, ProviderEvent::MemberDone { job_id: spec.job_id, result }));
            }
            self.queue.push((t, ProviderEvent::JobDone { job_id: spec.job_id, at_s: t }));
            self.in_flight += 1;
            Ok(())
        }

        fn cancel(&mut self, _job_id: u64, _now: f64) {}

        fn suspend(&mut self, _now: f64) -> Result<(), crate::provider::ProviderError> {
            Ok(())
        }

        fn resume(&mut self, _now: f64) -> Result<(), crate::provider::ProviderError> {
            Ok(())
        }

        fn in_flight(&self) -> usize {
            self.in_flight
        }

        fn next_event_at(&self) -> Option<f64> {
            self.queue.iter().map(|(t, _)| *t).fold(None, |a: Option<f64>, t| {
                Some(a.map_or(t, |x| x.min(t)))
            })
        }

        fn poll(&mut self, now: f64) -> Vec<ProviderEvent> {
            let mut due: Vec<(f64, ProviderEvent)> = Vec::new();
            let mut rest = Vec::new();
            for (t, ev) in self.queue.drain(..) {
                if t <= now + 1e-9 {
                    due.push((t, ev));
                } else {
                    rest.push((t, ev));
                }
            }
            self.queue = rest;
            due.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
            let evs: Vec<ProviderEvent> = due.into_iter().map(|(_, e)| e).collect();
            for e in &evs {
                if matches!(e, ProviderEvent::JobDone { .. }) {
                    self.in_flight -= 1;
                }
            }
            evs
        }

        fn wait(&mut self, _timeout: Duration) -> bool {
            !self.queue.is_empty()
        }
    }

    fn mock_site(
        side_effects: bool,
        rule: impl Fn(&TaskExec, u32) -> Option<(FailureClass, String)> + Send + 'static,
    ) -> EngineSite {
        EngineSite {
            state: site_state("mock"),
            provider: Box::new(MockSim {
                rule: Box::new(rule),
                attempts: HashMap::new(),
                queue: Vec::new(),
                in_flight: 0,
                side_effects,
            }),
        }
    }

    fn quick_cfg(dir: &Path) -> EngineCfg {
        let mut cfg = EngineCfg::new(dir);
        cfg.base_dir = dir.to_path_buf();
        cfg
    }

    fn write_file(path: &Path, content: &str) {
        std::fs::create_dir_all(path.parent().unwrap()).unwrap();
        std::fs::write(path, content).unwrap();
    }

    const SYNTH_CHAIN: &str = r#"
        type Data {}
        (Data o) gen (string tag) {
            app { synth_gen "-t" tag o; }
        }
        (Data o) step (Data i) {
            app { synth_step i o; }
        }
        Data a = gen("one");
        Data b = step(a);
        Data c = step(b);
    "#;

    #[test]
    fn chain_runs_in_dependency_order() {
        let plan = compile(SYNTH_CHAIN).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let cfg = quick_cfg(dir.path());
        let res = run(&plan, cfg, vec![sim_site(4, 1, 100.0, true)]).unwrap();
        assert_eq!(res.status, RunStatus::Completed, "errors: {:?}", res.errors);
        assert_eq!(res.tasks_total, 3);
        assert_eq!(res.tasks_executed, 3);
        assert!(res.datasets.contains_key("a"));
        assert!(res.datasets.contains_key("c"));
        let (phys, digest) = &res.datasets["c"];
        assert!(Path::new(phys).is_file());
        assert_eq!(digest, &digest_file(Path::new(phys)).unwrap());
        let rows: Vec<&TraceRow> = res.trace.iter().collect();
        assert_eq!(rows.len(), 3);
        let end_a = rows.iter().find(|r| r.label == "@1").unwrap().ended_s;
        let start_b = rows.iter().find(|r| r.label == "@2").unwrap().started_s;
        assert!(start_b >= end_a, "consumer started before producer finished");
    }

    #[test]
    fn alias_and_link_assign_share_bytes() {
        let src = r#"
            type Data {}
            (Data o) gen (string tag) {
                app { synth_gen "-t" tag o; }
            }
            (Data o) step (Data i) {
                app { synth_step i o; }
            }
            Data a = gen("seed");
            Data b = a;
            Data c = step(b);
        "#;
        let plan = compile(src).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let res = run(&plan, quick_cfg(dir.path()), vec![sim_site(2, 1, 100.0, true)]).unwrap();
        assert_eq!(res.status, RunStatus::Completed, "errors: {:?}", res.errors);
        assert_eq!(res.tasks_executed, 2);
        assert!(res.datasets.contains_key("c"));
    }

    #[test]
    fn foreach_pipelines_per_element() {
        let src = r#"
            type Img {}
            type Run { Img v[]; }
            (Img o) halve (Img i) {
                app { synth_halve i o; }
            }
            (Run outr) shrink (Run inr) {
                foreach Img im, i in inr.v {
                    outr.v[i] = halve(im);
                }
            }
            Run r <fs_mapper; location="in", prefix="vol", suffix=".img">;
            Run s <fs_mapper; location="out", prefix="svol">;
            s = shrink(r);
        "#;
        let plan = compile(src).unwrap();
        let dir = tempfile::tempdir().unwrap();
        for i in 0..3 {
            write_file(&dir.path().join(format!("in/vol_{:03}.img", i)), &format!("vol {}\n", i));
        }
        let res = run(&plan, quick_cfg(dir.path()), vec![sim_site(4, 1, 100.0, true)]).unwrap();
        assert_eq!(res.status, RunStatus::Completed, "errors: {:?}", res.errors);
        assert_eq!(res.tasks_executed, 3);
        for i in 0..3 {
            let out = dir.path().join(format!("out/svol_{:04}.v", i));
            assert!(out.is_file(), "missing {}", out.display());
        }
    }

    #[test]
    fn empty_foreach_closes_output_and_downstream_runs() {
        let src = r#"
            type Img {}
            type Run { Img v[]; }
            type Data {}
            (Img o) halve (Img i) {
                app { synth_halve i o; }
            }
            (Data o) gen (string tag) {
                app { synth_gen "-t" tag o; }
            }
            (Run outr) shrink (Run inr) {
                foreach Img im, i in inr.v {
                    outr.v[i] = halve(im);
                }
            }
            Run r <fs_mapper; location="in", prefix="vol", suffix=".img">;
            Run s;
            Run t;
            s = shrink(r);
            t = shrink(s);
            Data d = gen("done");
        "#;
        let plan = compile(src).unwrap();
        let dir = tempfile::tempdir().unwrap();
        std::fs::create_dir_all(dir.path().join("in")).unwrap();
        // Both foreach loops see empty arrays. If s.v never closed, the
        // second shrink would park forever and the run would stall.
        let res = run(&plan, quick_cfg(dir.path()), vec![sim_site(2, 1, 100.0, true)]).unwrap();
        assert_eq!(res.status, RunStatus::Completed, "errors: {:?}", res.errors);
        assert_eq!(res.tasks_executed, 1);
        assert!(res.datasets.contains_key("d"));
    }

    #[test]
    fn barrier_mode_matches_pipelined_digests() {
        let src = r#"
            type Img {}
            type Run { Img v[]; }
            (Img o) halve (Img i) {
                app { synth_halve i o; }
            }
            (Img o) blur (Img i) {
                app { synth_blur i o; }
            }
            (Run outr) pass (Run inr, string w) {
                foreach Img im, i in inr.v {
                    outr.v[i] = halve(im);
                }
            }
            (Run outr) pass2 (Run inr) {
                foreach Img im, i in inr.v {
                    outr.v[i] = blur(im);
                }
            }
            Run r <fs_mapper; location="in", prefix="vol", suffix=".img">;
            Run mid;
            Run fin <fs_mapper; location="out", prefix="f", suffix=".img">;
            mid = pass(r, "x");
            fin = pass2(mid);
        "#;
        let plan = compile(src).unwrap();
        let mut digests = Vec::new();
        let mut spans = Vec::new();
        for pipelining in [true, false] {
            let dir = tempfile::tempdir().unwrap();
            for i in 0..4 {
                write_file(
                    &dir.path().join(format!("in/vol_{:03}.img", i)),
                    &format!("vol {}\n", i),
                );
            }
            let mut cfg = quick_cfg(dir.path());
            cfg.pipelining = pipelining;
            cfg.durations = DurationModel::Uniform { lo: 1.0, hi: 2.0 };
            let res = run(&plan, cfg, vec![sim_site(4, 1, 100.0, true)]).unwrap();
            assert_eq!(res.status, RunStatus::Completed, "errors: {:?}", res.errors);
            assert_eq!(res.tasks_executed, 8);
            digests.push(res.data_digest());
            spans.push(res.makespan_s);
        }
        assert_eq!(digests[0], digests[1]);
        assert!(
            spans[0] <= spans[1] + 1e-9,
            "pipelined {} vs barrier {}",
            spans[0],
            spans[1]
        );
    }

    #[test]
    fn double_producer_is_an_error() {
        // Whole-variable reassignment is a compile error; colliding element
        // writes only surface at run time.
        let src = r#"
            type Data {}
            (Data o) gen (string tag) {
                app { synth_gen "-t" tag o; }
            }
            Data a[];
            a[0] = gen("x");
            a[0] = gen("y");
        "#;
        let plan = compile(src).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let res = run(&plan, quick_cfg(dir.path()), vec![sim_site(2, 1, 100.0, true)]).unwrap();
        assert_eq!(res.status, RunStatus::Failed);
        assert!(
            res.errors.iter().any(|e| e.contains("already has a producer")),
            "errors: {:?}",
            res.errors
        );
    }

    #[test]
    fn deadlock_reports_a_stall() {
        let src = r#"
            type Data {}
            (Data o) step (Data i) {
                app { synth_step i o; }
            }
            Data a;
            Data b;
            a = step(b);
            b = step(a);
        "#;
        let plan = compile(src).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let res = run(&plan, quick_cfg(dir.path()), vec![sim_site(2, 1, 100.0, true)]).unwrap();
        assert_eq!(res.status, RunStatus::Failed);
        assert!(res.errors.iter().any(|e| e.contains("stalled")), "errors: {:?}", res.errors);
    }

    #[test]
    fn upstream_failure_propagates_without_running_consumers() {
        let plan = compile(SYNTH_CHAIN).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = quick_cfg(dir.path());
        cfg.sched.max_retries = 2;
        let site = mock_site(true, |m, _| {
            (m.executable == "synth_gen")
                .then(|| (FailureClass::Transient, "scripted failure".into()))
        });
        let res = run(&plan, cfg, vec![site]).unwrap();
        assert_eq!(res.status, RunStatus::Failed);
        // gen fails for good, and both steps fail as its consumers.
        assert_eq!(res.tasks_failed, 3);
        assert_eq!(res.tasks_executed, 0);
        assert!(res.trace.iter().all(|r| r.app == "gen"), "consumer was dispatched");
        assert_eq!(res.trace.len(), 2, "expected one retry before giving up");
        assert!(res.errors.iter().any(|e| e.contains("failed after 2 attempts")));
    }

    #[test]
    fn transient_failures_retry_until_success() {
        let plan = compile(SYNTH_CHAIN).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let site = mock_site(true, |m, attempt| {
            (m.executable == "synth_gen" && attempt <= 2)
                .then(|| (FailureClass::Transient, "scripted failure".into()))
        });
        let res = run(&plan, quick_cfg(dir.path()), vec![site]).unwrap();
        assert_eq!(res.status, RunStatus::Completed, "errors: {:?}", res.errors);
        assert_eq!(res.tasks_executed, 3);
        assert_eq!(res.tasks_failed, 0);
        let gen_rows: Vec<&TraceRow> = res.trace.iter().filter(|r| r.app == "gen").collect();
        assert_eq!(gen_rows.len(), 3);
        assert_eq!(gen_rows.iter().filter(|r| r.ok).count(), 1);
    }

    #[test]
    fn host_errors_requeue_and_recover() {
        let plan = compile(SYNTH_CHAIN).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let site = mock_site(true, |m, attempt| {
            (m.executable == "synth_gen" && attempt == 1)
                .then(|| (FailureClass::HostError, "node failure: worker host unhealthy".into()))
        });
        let res = run(&plan, quick_cfg(dir.path()), vec![site]).unwrap();
        assert_eq!(res.status, RunStatus::Completed, "errors: {:?}", res.errors);
        assert_eq!(res.tasks_executed, 3);
        let gen_rows: Vec<&TraceRow> = res.trace.iter().filter(|r| r.app == "gen").collect();
        assert_eq!(gen_rows.len(), 2);
        assert!(!gen_rows[0].ok && gen_rows[1].ok);
    }

    #[test]
    fn conditional_branches_follow_resolved_values() {
        let src = r#"
            type Data {}
            (Data o) gen (string tag) {
                app { synth_gen "-t" tag o; }
            }
            int n = 3;
            Data a;
            if (n > 2) {
                a = gen("big");
            } else {
                a = gen("small");
            }
        "#;
        let plan = compile(src).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let res = run(&plan, quick_cfg(dir.path()), vec![sim_site(2, 1, 100.0, true)]).unwrap();
        assert_eq!(res.status, RunStatus::Completed, "errors: {:?}", res.errors);
        assert_eq!(res.tasks_executed, 1);
        assert!(res.trace[0].label.contains('t'), "then branch should have run");
    }

    #[test]
    fn clustering_bundles_and_preserves_digests() {
        let src = r#"
            type Img {}
            type Run { Img v[]; }
            (Img o) halve (Img i) {
                app { synth_halve i o; }
            }
            (Run outr) shrink (Run inr) {
                foreach Img im, i in inr.v {
                    outr.v[i] = halve(im);
                }
            }
            Run r <fs_mapper; location="in", prefix="vol", suffix=".img">;
            Run s;
            s = shrink(r);
        "#;
        let plan = compile(src).unwrap();
        let mut digests = Vec::new();
        let mut jobs = Vec::new();
        for cap in [1usize, 8] {
            let dir = tempfile::tempdir().unwrap();
            for i in 0..16 {
                write_file(
                    &dir.path().join(format!("in/vol_{:03}.img", i)),
                    &format!("vol {}\n", i),
                );
            }
            let mut cfg = quick_cfg(dir.path());
            cfg.sched.cluster_cap = cap;
            cfg.durations = DurationModel::Constant(1.0);
            let res = run(&plan, cfg, vec![sim_site(2, 1, 2.0, true)]).unwrap();
            assert_eq!(res.status, RunStatus::Completed, "errors: {:?}", res.errors);
            assert_eq!(res.tasks_executed, 16);
            digests.push(res.data_digest());
            jobs.push(res.jobs_submitted);
        }
        assert_eq!(digests[0], digests[1], "bundling changed output bytes");
        assert!(jobs[1] < jobs[0], "clustering did not reduce job count");
    }

    #[test]
    fn interrupt_then_resume_runs_only_remaining_tasks() {
        let src = r#"
            type Img {}
            type Run { Img v[]; }
            (Img o) halve (Img i) {
                app { synth_halve i o; }
            }
            (Img o) blur (Img i) {
                app { synth_blur i o; }
            }
            (Run outr) pass (Run inr) {
                foreach Img im, i in inr.v {
                    outr.v[i] = halve(im);
                }
            }
            (Run outr) pass2 (Run inr) {
                foreach Img im, i in inr.v {
                    outr.v[i] = blur(im);
                }
            }
            Run r <fs_mapper; location="in", prefix="vol", suffix=".img">;
            Run mid;
            Run fin;
            mid = pass(r);
            fin = pass2(mid);
        "#;
        let plan = compile(src).unwrap();

        let full_dir = tempfile::tempdir().unwrap();
        for i in 0..4 {
            write_file(
                &full_dir.path().join(format!("in/vol_{:03}.img", i)),
                &format!("vol {}\n", i),
            );
        }
        let mut cfg = quick_cfg(full_dir.path());
        cfg.pipelining = false;
        let full = run(&plan, cfg, vec![sim_site(4, 1, 100.0, true)]).unwrap();
        assert_eq!(full.status, RunStatus::Completed);
        assert_eq!(full.tasks_executed, 8);

        let dir = tempfile::tempdir().unwrap();
        for i in 0..4 {
            write_file(&dir.path().join(format!("in/vol_{:03}.img", i)), &format!("vol {}\n", i));
        }
        let mut cfg = quick_cfg(dir.path());
        cfg.pipelining = false;
        cfg.interrupt_after = Some(4);
        let first = run(&plan, cfg, vec![sim_site(4, 1, 100.0, true)]).unwrap();
        assert_eq!(first.status, RunStatus::Interrupted);
        assert_eq!(first.tasks_executed, 4);

        let mut cfg = quick_cfg(dir.path());
        cfg.pipelining = false;
        cfg.resume = true;
        let second = run(&plan, cfg, vec![sim_site(4, 1, 100.0, true)]).unwrap();
        assert_eq!(second.status, RunStatus::Completed, "errors: {:?}", second.errors);
        assert_eq!(second.tasks_restored, 4, "stage one should restore from the log");
        assert_eq!(second.tasks_executed, 4, "only stage two should execute");
        assert_eq!(second.data_digest(), full.data_digest());
    }

    #[test]
    fn resume_rejects_changed_statements() {
        let before = r#"
            type Data {}
            (Data o) gen (string tag) {
                app { synth_gen "-t" tag o; }
            }
            Data a = gen("one");
        "#;
        let after = r#"
            type Data {}
            (Data o) gen (string tag) {
                app { synth_gen "-t" tag o; }
            }
            Data a = gen("two");
        "#;
        let dir = tempfile::tempdir().unwrap();
        let plan = compile(before).unwrap();
        let res = run(&plan, quick_cfg(dir.path()), vec![sim_site(2, 1, 100.0, true)]).unwrap();
        assert_eq!(res.status, RunStatus::Completed);

        let plan2 = compile(after).unwrap();
        let mut cfg = quick_cfg(dir.path());
        cfg.resume = true;
        let err = run(&plan2, cfg, vec![sim_site(2, 1, 100.0, true)]).unwrap_err();
        assert!(err.message.contains("plan digest mismatch"), "got: {}", err.message);
    }

    #[test]
    fn resume_with_extra_input_runs_only_new_work() {
        let src = r#"
            type Img {}
            type Run { Img v[]; }
            (Img o) halve (Img i) {
                app { synth_halve i o; }
            }
            (Run outr) pass (Run inr) {
                foreach Img im, i in inr.v {
                    outr.v[i] = halve(im);
                }
            }
            Run r <fs_mapper; location="in", prefix="vol", suffix=".img">;
            Run mid;
            mid = pass(r);
        "#;
        let plan = compile(src).unwrap();
        let dir = tempfile::tempdir().unwrap();
        for i in 0..3 {
            write_file(&dir.path().join(format!("in/vol_{:03}.img", i)), &format!("vol {}\n", i));
        }
        let first = run(&plan, quick_cfg(dir.path()), vec![sim_site(4, 1, 100.0, true)]).unwrap();
        assert_eq!(first.status, RunStatus::Completed);
        assert_eq!(first.tasks_executed, 3);

        write_file(&dir.path().join("in/vol_003.img"), "vol 3\n");
        let mut cfg = quick_cfg(dir.path());
        cfg.resume = true;
        let second = run(&plan, cfg, vec![sim_site(4, 1, 100.0, true)]).unwrap();
        assert_eq!(second.status, RunStatus::Completed, "errors: {:?}", second.errors);
        assert_eq!(second.tasks_restored, 3);
        assert_eq!(second.tasks_executed, 1, "only the new volume runs");
    }

    fn fixture(name: &str) -> String {
        format!("{}/fixtures/{}", env!("CARGO_MANIFEST_DIR"), name)
    }

    #[test]
    fn figure3_style_dynamic_mapping() {
        let plan = compile(&std::fs::read_to_string(fixture("figure3.sws")).unwrap()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        // Images named by the overlap table rows. The table itself flows
        // through mOverlaps before the csv mapping reads it, so row paths
        // resolve against the produced table's directory.
        let fits = [
            "p_990427s-j1190056.fits", "p_990427s-j1190044.fits", "p_990427s-j1200221.fits",
            "p_990427s-j1180221.fits", "p_000704n-j0410209.fits", "p_000704n-j0340056.fits",
            "p_000704n-j0420056.fits", "p_000704n-j0410220.fits", "p_980415s-j0620021.fits",
            "p_980415s-j0610257.fits", "p_980415s-j0610245.fits", "p_980415s-j0620033.fits",
            "p_980415s-j0630257.fits", "p_980415s-j0630245.fits",
        ];
        for f in fits {
            write_file(&dir.path().join("data").join(f), &format!("fits {}\n", f));
        }
        let mut cfg = quick_cfg(dir.path());
        cfg.base_dir = PathBuf::from(format!("{}/fixtures", env!("CARGO_MANIFEST_DIR")));
        let res = run(&plan, cfg, vec![sim_site(4, 1, 100.0, true)]).unwrap();
        assert_eq!(res.status, RunStatus::Completed, "errors: {:?}", res.errors);
        assert_eq!(res.tasks_executed, 12, "one table task plus eleven diffs");
    }

    #[test]
    fn fmri_two_volume_pipeline_end_to_end() {
        let plan = compile(&std::fs::read_to_string(fixture("fmri2.sws")).unwrap()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        for (name, body) in [
            ("bold1_001.img", "img one\n"),
            ("bold1_001.hdr", "hdr one\n"),
            ("bold1_002.img", "img two\n"),
            ("bold1_002.hdr", "hdr two\n"),
        ] {
            write_file(&dir.path().join("in").join(name), body);
        }
        let mut cfg = quick_cfg(dir.path());
        cfg.provenance = true;
        let res = run(&plan, cfg, vec![sim_site(4, 1, 100.0, true)]).unwrap();
        assert_eq!(res.status, RunStatus::Completed, "errors: {:?}", res.errors);
        assert_eq!(res.tasks_executed, 8, "four stages over two volumes");
        assert!(dir.path().join("out/sbold1_0000.img").is_file());
        assert!(dir.path().join("out/sbold1_0001.img").is_file());
        let recs = crate::provenance::load_records(dir.path());
        assert_eq!(recs.len(), 8);
        let chain = crate::provenance::derivation_of(&recs, "sbold1.v[0].img");
        assert_eq!(chain.len(), 4, "reslice derives through four stages");
    }

    #[test]
    fn virtual_makespan_reflects_durations() {
        let plan = compile(SYNTH_CHAIN).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = quick_cfg(dir.path());
        cfg.durations = DurationModel::Constant(5.0);
        let res = run(&plan, cfg, vec![sim_site(4, 1, 1000.0, true)]).unwrap();
        assert_eq!(res.status, RunStatus::Completed);
        assert!(
            res.makespan_s >= 15.0 && res.makespan_s < 16.5,
            "three serialized 5s tasks took {}",
            res.makespan_s
        );
    }

    #[test]
    fn side_effects_off_keeps_bookkeeping_small() {
        let mut src =
            String::from("type Data {}\n(Data o) work (int k) { app { synth_work \"-k\" k o; } }\n");
        for i in 0..200 {
            src.push_str(&format!("Data o{} = work({});\n", i, i));
        }
        let plan = compile(&src).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = quick_cfg(dir.path());
        cfg.side_effects = false;
        cfg.restart_log = false;
        cfg.durations = DurationModel::Constant(1.0);
        let res = run(&plan, cfg, vec![sim_site(16, 1, 1000.0, false)]).unwrap();
        assert_eq!(res.status, RunStatus::Completed, "errors: {:?}", res.errors);
        assert_eq!(res.tasks_executed, 200);
        assert!(!dir.path().join("restart.log").exists());
        let per_task = res.bookkeeping_bytes / 200;
        assert!(per_task <= 4096, "bookkeeping {} bytes per task", per_task);
    }
}
