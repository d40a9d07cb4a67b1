//! Dataset nodes: single-assignment placeholders for values produced during
//! a run. A node resolves (or fails) exactly once; structs and arrays derive
//! their readiness from their children. Resolution is compare-and-set so a
//! completion arriving from a provider thread can never double-write.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::atomic::{AtomicU8, AtomicU32, Ordering};
use std::sync::{Mutex, OnceLock};

use crate::types::{Ty, TypeTable};

pub type NodeId = u32;

pub const NO_TASK: u32 = u32::MAX;

#[derive(Debug, Clone, PartialEq)]
pub enum PrimValue {
    Int(i64),
    Float(f64),
    Str(String),
    Bool(bool),
}

impl fmt::Display for PrimValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PrimValue::Int(n) => write!(f, "{}", n),
            PrimValue::Float(x) => write!(f, "{}", x),
            PrimValue::Str(s) => write!(f, "{}", s),
            PrimValue::Bool(b) => write!(f, "{}", b),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Step {
    Root(String),
    Field(String),
    Index(u32),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LeafState {
    Pending,
    Resolved,
    Failed,
}

const S_PENDING: u8 = 0;
const S_RESOLVED: u8 = 1;
const S_FAILED: u8 = 2;

/// How an output-mapped variable names the files written under it.
#[derive(Debug, Clone)]
pub enum OutScheme {
    /// fs_mapper: `<location>/<prefix>(_<index %04d>)?<suffix>`.
    FsDir { location: String, prefix: String, suffixes: BTreeMap<String, String> },
    /// file_mapper: one fixed path.
    SingleFile { path: String },
}

#[derive(Debug)]
pub enum NodeKind {
    Prim(OnceLock<PrimValue>),
    File(OnceLock<String>),
    Struct(Vec<(String, NodeId)>),
    Array(Mutex<ArrayState>),
}

#[derive(Debug, Default)]
pub struct ArrayState {
    pub elems: Vec<Option<NodeId>>,
    pub closed: bool,
}

#[derive(Debug)]
pub struct Node {
    pub id: NodeId,
    pub ty: Ty,
    pub parent: Option<NodeId>,
    pub step: Step,
    pub kind: NodeKind,
    state: AtomicU8,
    producer: AtomicU32,
    error: OnceLock<String>,
    /// Path naming scheme for outputs, set on mapped roots.
    pub scheme: OnceLock<OutScheme>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AssignError {
    pub node: NodeId,
    pub message: String,
}

impl fmt::Display for AssignError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "node {}: {}", self.node, self.message)
    }
}

impl std::error::Error for AssignError {}

impl Node {
    pub fn leaf_state(&self) -> LeafState {
        match self.state.load(Ordering::Acquire) {
            S_RESOLVED => LeafState::Resolved,
            S_FAILED => LeafState::Failed,
            _ => LeafState::Pending,
        }
    }

    fn transition(&self, to: u8) -> Result<(), AssignError> {
        match self.state.compare_exchange(S_PENDING, to, Ordering::AcqRel, Ordering::Acquire) {
            Ok(_) => Ok(()),
            Err(_) => Err(AssignError {
                node: self.id,
                message: "double assignment to single-assignment dataset".into(),
            }),
        }
    }

    pub fn resolve_prim(&self, v: PrimValue) -> Result<(), AssignError> {
        let NodeKind::Prim(cell) = &self.kind else {
            return Err(AssignError { node: self.id, message: "not a primitive leaf".into() });
        };
        cell.set(v).map_err(|_| AssignError {
            node: self.id,
            message: "double assignment to single-assignment dataset".into(),
        })?;
        self.transition(S_RESOLVED)
    }

    /// Marks a file leaf produced. The target path must already be set.
    pub fn resolve_file(&self) -> Result<(), AssignError> {
        let NodeKind::File(cell) = &self.kind else {
            return Err(AssignError { node: self.id, message: "not a file leaf".into() });
        };
        if cell.get().is_none() {
            return Err(AssignError { node: self.id, message: "file leaf has no target path".into() });
        }
        self.transition(S_RESOLVED)
    }

    pub fn fail(&self, err: &str) -> Result<(), AssignError> {
        let _ = self.error.set(err.to_string());
        self.transition(S_FAILED)
    }

    pub fn error(&self) -> Option<&str> {
        self.error.get().map(|s| s.as_str())
    }

    pub fn prim(&self) -> Option<&PrimValue> {
        match &self.kind {
            NodeKind::Prim(cell) => cell.get(),
            _ => None,
        }
    }

    /// Physical path of a file leaf, available before resolution for
    /// outputs whose target was assigned at mapping time.
    pub fn target(&self) -> Option<&str> {
        match &self.kind {
            NodeKind::File(cell) => cell.get().map(|s| s.as_str()),
            _ => None,
        }
    }

    pub fn set_target(&self, path: String) -> Result<(), AssignError> {
        let NodeKind::File(cell) = &self.kind else {
            return Err(AssignError { node: self.id, message: "not a file leaf".into() });
        };
        cell.set(path).map_err(|_| AssignError {
            node: self.id,
            message: "file target already assigned".into(),
        })
    }

    /// Claims this node as some task's output. A second claim is the static
    /// double-assignment caught at run time.
    pub fn claim_producer(&self, task: u32) -> Result<(), AssignError> {
        match self.producer.compare_exchange(NO_TASK, task, Ordering::AcqRel, Ordering::Acquire) {
            Ok(_) => Ok(()),
            Err(_) => Err(AssignError {
                node: self.id,
                message: "dataset already has a producer".into(),
            }),
        }
    }

    pub fn producer(&self) -> Option<u32> {
        match self.producer.load(Ordering::Acquire) {
            NO_TASK => None,
            t => Some(t),
        }
    }
}

#[derive(Default)]
pub struct NodeStore {
    nodes: Vec<Box<Node>>,
}

impl NodeStore {
    pub fn new() -> Self {
        NodeStore::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn get(&self, id: NodeId) -> &Node {
        &self.nodes[id as usize]
    }

    fn push(&mut self, ty: Ty, parent: Option<NodeId>, step: Step) -> NodeId {
        let id = self.nodes.len() as NodeId;
        let kind = match &ty {
            Ty::Prim(_) => NodeKind::Prim(OnceLock::new()),
            Ty::File(_) => NodeKind::File(OnceLock::new()),
            Ty::Struct(_) => NodeKind::Struct(Vec::new()),
            Ty::Array(_) => NodeKind::Array(Mutex::new(ArrayState::default())),
        };
        self.nodes.push(Box::new(Node {
            id,
            ty,
            parent,
            step,
            kind,
            state: AtomicU8::new(S_PENDING),
            producer: AtomicU32::new(NO_TASK),
            error: OnceLock::new(),
            scheme: OnceLock::new(),
        }));
        id
    }

    /// Creates a node tree for `ty`: struct children exist up front, arrays
    /// start empty and open.
    pub fn create(&mut self, name: &str, ty: Ty, table: &TypeTable) -> NodeId {
        self.create_at(ty, None, Step::Root(name.to_string()), table)
    }

    fn create_at(&mut self, ty: Ty, parent: Option<NodeId>, step: Step, table: &TypeTable) -> NodeId {
        let id = self.push(ty, parent, step);
        if let Ty::Struct(sname) = &self.get(id).ty {
            let fields: Vec<(String, Ty)> = table
                .fields(sname)
                .expect("struct type known")
                .iter()
                .map(|(n, t)| (n.clone(), t.clone()))
                .collect();
            let mut children = Vec::with_capacity(fields.len());
            for (fname, fty) in fields {
                let child = self.create_at(fty, Some(id), Step::Field(fname.clone()), table);
                children.push((fname, child));
            }
            match &mut self.nodes[id as usize].kind {
                NodeKind::Struct(c) => *c = children,
                _ => unreachable!(),
            }
        }
        id
    }

    pub fn field(&self, id: NodeId, name: &str) -> Option<NodeId> {
        match &self.get(id).kind {
            NodeKind::Struct(children) => {
                children.iter().find(|(n, _)| n == name).map(|(_, c)| *c)
            }
            _ => None,
        }
    }

    pub fn element(&self, id: NodeId, index: usize) -> Option<NodeId> {
        match &self.get(id).kind {
            NodeKind::Array(state) => {
                state.lock().unwrap().elems.get(index).copied().flatten()
            }
            _ => None,
        }
    }

    /// Existing element, or a fresh node of the element type. Reading ahead
    /// of the producer is allowed; the leaf stays pending until resolved.
    pub fn element_or_create(
        &mut self,
        id: NodeId,
        index: usize,
        table: &TypeTable,
    ) -> Result<NodeId, AssignError> {
        if let Some(e) = self.element(id, index) {
            return Ok(e);
        }
        let elem_ty = match &self.get(id).ty {
            Ty::Array(e) => (**e).clone(),
            _ => {
                return Err(AssignError { node: id, message: "not an array".into() });
            }
        };
        {
            let NodeKind::Array(state) = &self.get(id).kind else { unreachable!() };
            let st = state.lock().unwrap();
            if st.closed && index >= st.elems.len() {
                return Err(AssignError {
                    node: id,
                    message: format!("index {} outside closed array of {}", index, st.elems.len()),
                });
            }
        }
        let child = self.create_at(elem_ty, Some(id), Step::Index(index as u32), table);
        let NodeKind::Array(state) = &self.get(id).kind else { unreachable!() };
        let mut st = state.lock().unwrap();
        if st.elems.len() <= index {
            st.elems.resize(index + 1, None);
        }
        st.elems[index] = Some(child);
        Ok(child)
    }

    pub fn close_array(&self, id: NodeId, len: usize) -> Result<(), AssignError> {
        let NodeKind::Array(state) = &self.get(id).kind else {
            return Err(AssignError { node: id, message: "not an array".into() });
        };
        let mut st = state.lock().unwrap();
        if st.closed {
            return Err(AssignError { node: id, message: "array already closed".into() });
        }
        if st.elems.len() > len {
            return Err(AssignError {
                node: id,
                message: format!("close to {} below existing extent {}", len, st.elems.len()),
            });
        }
        st.elems.resize(len, None);
        st.closed = true;
        Ok(())
    }

    pub fn array_len(&self, id: NodeId) -> Option<(usize, bool)> {
        match &self.get(id).kind {
            NodeKind::Array(state) => {
                let st = state.lock().unwrap();
                Some((st.elems.len(), st.closed))
            }
            _ => None,
        }
    }

    /// Derived readiness: leaves by state, structs when all fields are
    /// resolved, arrays when closed with every element present and resolved.
    pub fn is_resolved(&self, id: NodeId) -> bool {
        match &self.get(id).kind {
            NodeKind::Prim(_) | NodeKind::File(_) => {
                self.get(id).leaf_state() == LeafState::Resolved
            }
            NodeKind::Struct(children) => children.iter().all(|(_, c)| self.is_resolved(*c)),
            NodeKind::Array(state) => {
                let (elems, closed) = {
                    let st = state.lock().unwrap();
                    (st.elems.clone(), st.closed)
                };
                closed && elems.iter().all(|e| matches!(e, Some(c) if self.is_resolved(*c)))
            }
        }
    }

    pub fn is_failed(&self, id: NodeId) -> bool {
        match &self.get(id).kind {
            NodeKind::Prim(_) | NodeKind::File(_) => self.get(id).leaf_state() == LeafState::Failed,
            NodeKind::Struct(children) => children.iter().any(|(_, c)| self.is_failed(*c)),
            NodeKind::Array(state) => {
                let elems = state.lock().unwrap().elems.clone();
                elems.iter().flatten().any(|c| self.is_failed(*c))
            }
        }
    }

    /// Dotted/bracketed path from the root binding, e.g. `sbold1.v[0].hdr`.
    pub fn logical_path(&self, id: NodeId) -> String {
        let mut steps = Vec::new();
        let mut cur = Some(id);
        while let Some(c) = cur {
            let n = self.get(c);
            steps.push(&n.step);
            cur = n.parent;
        }
        let mut out = String::new();
        for s in steps.iter().rev() {
            match s {
                Step::Root(name) => out.push_str(name),
                Step::Field(name) => {
                    out.push('.');
                    out.push_str(name);
                }
                Step::Index(i) => {
                    out.push_str(&format!("[{}]", i));
                }
            }
        }
        out
    }

    /// Root binding of a node and the steps leading down to it.
    pub fn steps_from_root(&self, id: NodeId) -> (NodeId, Vec<Step>) {
        let mut steps = Vec::new();
        let mut cur = id;
        while let Some(p) = self.get(cur).parent {
            steps.push(self.get(cur).step.clone());
            cur = p;
        }
        steps.reverse();
        (cur, steps)
    }

    /// Every file leaf under `id`, depth first.
    pub fn file_leaves(&self, id: NodeId) -> Vec<NodeId> {
        let mut out = Vec::new();
        self.walk_files(id, &mut out);
        out
    }

    fn walk_files(&self, id: NodeId, out: &mut Vec<NodeId>) {
        match &self.get(id).kind {
            NodeKind::File(_) => out.push(id),
            NodeKind::Prim(_) => {}
            NodeKind::Struct(children) => {
                for (_, c) in children {
                    self.walk_files(*c, out);
                }
            }
            NodeKind::Array(state) => {
                let elems = state.lock().unwrap().elems.clone();
                for c in elems.into_iter().flatten() {
                    self.walk_files(c, out);
                }
            }
        }
    }

    /// Estimated heap footprint of the store, for engine accounting.
    pub fn approx_bytes(&self) -> usize {
        let mut total = self.nodes.capacity() * std::mem::size_of::<Box<Node>>();
        for n in &self.nodes {
            total += std::mem::size_of::<Node>();
            match &n.kind {
                NodeKind::Struct(c) => total += c.capacity() * std::mem::size_of::<(String, NodeId)>(),
                NodeKind::Array(state) => {
                    total += state.lock().unwrap().elems.capacity() * std::mem::size_of::<Option<NodeId>>();
                }
                NodeKind::File(cell) => {
                    if let Some(p) = cell.get() {
                        total += p.capacity();
                    }
                }
                NodeKind::Prim(cell) => {
                    if let Some(PrimValue::Str(s)) = cell.get() {
                        total += s.capacity();
                    }
                }
            }
            if let Step::Root(s) | Step::Field(s) = &n.step {
                total += s.capacity();
            }
        }
        total
    }
}

/// Physical file name behind a file leaf. Works before resolution as long
/// as the target path has been assigned, which output mapping guarantees.
pub fn filename_of(store: &NodeStore, id: NodeId) -> Result<String, AssignError> {
    let node = store.get(id);
    match &node.kind {
        NodeKind::File(cell) => cell.get().cloned().ok_or_else(|| AssignError {
            node: id,
            message: "file leaf has no physical path yet".into(),
        }),
        _ => Err(AssignError {
            node: id,
            message: format!("@filename needs a file, got {}", node.ty.display()),
        }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::TypeTable;
    use std::sync::Arc;

    fn volume_table() -> TypeTable {
        let mut t = TypeTable::default();
        t.declare_file("Image");
        t.declare_file("Header");
        t.declare_struct(
            "Volume",
            vec![
                ("img".to_string(), Ty::File("Image".into())),
                ("hdr".to_string(), Ty::File("Header".into())),
            ],
        );
        t.declare_struct(
            "Run",
            vec![("v".to_string(), Ty::array_of(Ty::Struct("Volume".into())))],
        );
        t
    }

    #[test]
    fn struct_children_exist_up_front() {
        let table = volume_table();
        let mut store = NodeStore::new();
        let run = store.create("bold1", Ty::Struct("Run".into()), &table);
        let v = store.field(run, "v").unwrap();
        assert!(matches!(store.get(v).kind, NodeKind::Array(_)));
        assert_eq!(store.array_len(v), Some((0, false)));
    }

    #[test]
    fn logical_paths_read_like_the_script() {
        let table = volume_table();
        let mut store = NodeStore::new();
        let run = store.create("sbold1", Ty::Struct("Run".into()), &table);
        let v = store.field(run, "v").unwrap();
        let e0 = store.element_or_create(v, 0, &table).unwrap();
        let hdr = store.field(e0, "hdr").unwrap();
        assert_eq!(store.logical_path(hdr), "sbold1.v[0].hdr");
    }

    #[test]
    fn resolution_happens_exactly_once() {
        let table = volume_table();
        let mut store = NodeStore::new();
        let img = store.create("x", Ty::File("Image".into()), &table);
        store.get(img).set_target("out/x.img".into()).unwrap();
        assert!(store.get(img).resolve_file().is_ok());
        let err = store.get(img).resolve_file().unwrap_err();
        assert!(err.message.contains("double assignment"));
        assert!(store.is_resolved(img));
    }

    #[test]
    fn racing_resolvers_produce_one_winner() {
        let table = volume_table();
        let mut store = NodeStore::new();
        let id = store.create("n", Ty::INT, &table);
        let store = Arc::new(store);
        let mut handles = Vec::new();
        for k in 0..8 {
            let store = Arc::clone(&store);
            handles.push(std::thread::spawn(move || {
                store.get(id).resolve_prim(PrimValue::Int(k)).is_ok()
            }));
        }
        let wins = handles.into_iter().map(|h| h.join().unwrap()).filter(|&w| w).count();
        assert_eq!(wins, 1);
        assert!(store.is_resolved(id));
    }

    #[test]
    fn arrays_resolve_only_when_closed_and_full() {
        let table = volume_table();
        let mut store = NodeStore::new();
        let run = store.create("r", Ty::Struct("Run".into()), &table);
        let v = store.field(run, "v").unwrap();
        for i in 0..2 {
            let e = store.element_or_create(v, i, &table).unwrap();
            for f in ["img", "hdr"] {
                let leaf = store.field(e, f).unwrap();
                store.get(leaf).set_target(format!("in/{}_{}.{}", "r", i, f)).unwrap();
                store.get(leaf).resolve_file().unwrap();
            }
        }
        assert!(!store.is_resolved(v));
        store.close_array(v, 2).unwrap();
        assert!(store.is_resolved(v));
        assert!(store.is_resolved(run));
    }

    #[test]
    fn closed_array_rejects_out_of_range_creation() {
        let table = volume_table();
        let mut store = NodeStore::new();
        let arr = store.create("a", Ty::array_of(Ty::INT), &table);
        store.close_array(arr, 1).unwrap();
        let err = store.element_or_create(arr, 3, &table).unwrap_err();
        assert!(err.message.contains("outside closed array"));
    }

    #[test]
    fn producer_claim_is_single() {
        let table = volume_table();
        let mut store = NodeStore::new();
        let id = store.create("x", Ty::File("Image".into()), &table);
        store.get(id).claim_producer(7).unwrap();
        let err = store.get(id).claim_producer(8).unwrap_err();
        assert!(err.message.contains("already has a producer"));
        assert_eq!(store.get(id).producer(), Some(7));
    }

    #[test]
    fn filename_of_rejects_non_files() {
        let table = volume_table();
        let mut store = NodeStore::new();
        let run = store.create("r", Ty::Struct("Run".into()), &table);
        let err = filename_of(&store, run).unwrap_err();
        assert!(err.message.contains("needs a file"));
        let n = store.create("k", Ty::INT, &table);
        assert!(filename_of(&store, n).is_err());
    }

    #[test]
    fn upstream_failure_is_visible() {
        let table = volume_table();
        let mut store = NodeStore::new();
        let run = store.create("r", Ty::Struct("Run".into()), &table);
        let v = store.field(run, "v").unwrap();
        let e = store.element_or_create(v, 0, &table).unwrap();
        let img = store.field(e, "img").unwrap();
        store.get(img).fail("task 12 exited 1").unwrap();
        assert!(store.is_failed(run));
        assert_eq!(store.get(img).error(), Some("task 12 exited 1"));
    }
}
