//! Lowering from the checked syntax tree to an abstract plan.
//!
//! The plan is location independent: variables become frame slot indices,
//! procedure calls become procedure-table indices, and nothing in it names a
//! site or host. `foreach` stays a single statement; expansion happens at run
//! time against whatever the source array turns out to hold.

use std::collections::BTreeMap;
use std::fmt;

use serde::Serialize;

use crate::ast;
use crate::ast::{BinOp, MapperParam, PathSeg, ProcBody, Rvalue, Script, Stmt, UnOp};
use crate::parser::{parse, ParseError};
use crate::typecheck::{typecheck, Checked, TypeError};
use crate::types::{Ty, TypeTable};
use crate::util::fnv1a64;

pub type ProcId = u32;

/// Reference to a slot: how many foreach frames up, and the index there.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct SlotRef {
    pub depth: u8,
    pub slot: u32,
}

#[derive(Debug, Clone, Serialize)]
pub struct SlotInfo {
    pub name: String,
    pub ty: Ty,
}

/// A lexical frame: its slots and the statements that run in it. Procedure
/// bodies and foreach bodies are frames; if-branches share their parent's.
#[derive(Debug, Clone, Serialize)]
pub struct Frame {
    pub slots: Vec<SlotInfo>,
    pub body: Vec<PStmt>,
}

#[derive(Debug, Clone, Serialize)]
pub struct Plan {
    pub table: TypeTable,
    pub procs: Vec<ProcPlan>,
    pub top: Frame,
}

#[derive(Debug, Clone, Serialize)]
pub struct ProcPlan {
    pub name: String,
    pub n_inputs: u32,
    pub n_outputs: u32,
    pub kind: ProcKind,
}

impl ProcPlan {
    /// Parameter slots come first in a body frame: inputs, then outputs.
    pub fn input_slots(&self) -> std::ops::Range<u32> {
        0..self.n_inputs
    }

    pub fn output_slots(&self) -> std::ops::Range<u32> {
        self.n_inputs..self.n_inputs + self.n_outputs
    }
}

#[derive(Debug, Clone, Serialize)]
pub enum ProcKind {
    App(AppPlan),
    Compound(Frame),
}

#[derive(Debug, Clone, Serialize)]
pub struct AppPlan {
    pub executable: String,
    /// Slots of the app frame, inputs then outputs (apps have no locals).
    pub slots: Vec<SlotInfo>,
    pub args: Vec<PArg>,
}

#[derive(Debug, Clone, Serialize)]
pub enum PArg {
    Lit(String),
    /// Primitive-valued path: rendered as the resolved value.
    Prim(PPath),
    /// File-valued path: rendered as the file's in-sandbox name.
    File(PPath),
}

#[derive(Debug, Clone, Serialize)]
pub enum PStmt {
    Decl { slot: u32, mapper: Option<PMapper>, init: Option<PRvalue> },
    Assign { target: PPath, value: PRvalue },
    Foreach { elem_ty: Ty, source: PExpr, body: Frame },
    If { cond: PExpr, then_body: Vec<PStmt>, else_body: Vec<PStmt> },
    Call(PCall),
}

#[derive(Debug, Clone, Serialize)]
pub struct PMapper {
    pub mapper: String,
    pub params: Vec<(String, PMapperParam)>,
}

#[derive(Debug, Clone, Serialize)]
pub enum PMapperParam {
    Str(String),
    Int(i64),
    Bool(bool),
    Slot(SlotRef),
}

#[derive(Debug, Clone, Serialize)]
pub enum PRvalue {
    Call(PCall),
    Expr(PExpr),
}

#[derive(Debug, Clone, Serialize)]
pub struct PCall {
    pub proc: ProcId,
    pub args: Vec<PExpr>,
}

#[derive(Debug, Clone, Serialize)]
pub enum PExpr {
    Int(i64),
    Float(f64),
    Str(String),
    Bool(bool),
    Path(PPath),
    Unary { op: UnOp, operand: Box<PExpr> },
    Binary { op: BinOp, lhs: Box<PExpr>, rhs: Box<PExpr> },
}

#[derive(Debug, Clone, Serialize)]
pub struct PPath {
    pub root: SlotRef,
    pub segs: Vec<PSeg>,
}

impl PPath {
    pub fn slot(root: SlotRef) -> Self {
        PPath { root, segs: Vec::new() }
    }
}

#[derive(Debug, Clone, Serialize)]
pub enum PSeg {
    Field(String),
    Index(PExpr),
}

impl Plan {
    pub fn proc_id(&self, name: &str) -> Option<ProcId> {
        self.procs.iter().position(|p| p.name == name).map(|i| i as ProcId)
    }

    /// Top-level slots carrying a mapper binding.
    pub fn mapped_top_slots(&self) -> Vec<&str> {
        self.top
            .body
            .iter()
            .filter_map(|s| match s {
                PStmt::Decl { slot, mapper: Some(_), .. } => {
                    Some(self.top.slots[*slot as usize].name.as_str())
                }
                _ => None,
            })
            .collect()
    }

    /// Top-level statements that invoke a procedure.
    pub fn top_call_count(&self) -> usize {
        self.top
            .body
            .iter()
            .filter(|s| {
                matches!(
                    s,
                    PStmt::Call(_)
                        | PStmt::Assign { value: PRvalue::Call(_), .. }
                        | PStmt::Decl { init: Some(PRvalue::Call(_)), .. }
                )
            })
            .count()
    }

    /// Every statement in the plan, including nested bodies. One foreach is
    /// one statement.
    pub fn stmt_count(&self) -> usize {
        fn count(body: &[PStmt]) -> usize {
            body.iter()
                .map(|s| match s {
                    PStmt::Foreach { body, .. } => 1 + count(&body.body),
                    PStmt::If { then_body, else_body, .. } => 1 + count(then_body) + count(else_body),
                    _ => 1,
                })
                .sum()
        }
        let proc_stmts: usize = self
            .procs
            .iter()
            .map(|p| match &p.kind {
                ProcKind::App(_) => 0,
                ProcKind::Compound(f) => count(&f.body),
            })
            .sum();
        proc_stmts + count(&self.top.body)
    }

    /// Digest over the whole plan. Stable across processes: the plan
    /// serializes with ordered maps and no addresses.
    pub fn digest(&self) -> u64 {
        let bytes = serde_json::to_vec(self).expect("plan serializes");
        fnv1a64(&bytes)
    }

    /// Digest of one top-level statement plus every procedure it can reach.
    /// Restart uses this to detect edits that touch already-produced data.
    pub fn top_stmt_digest(&self, idx: usize) -> u64 {
        let stmt = &self.top.body[idx];
        let mut reach = Vec::new();
        collect_procs(stmt, &mut reach);
        let mut seen = vec![false; self.procs.len()];
        let mut queue = reach;
        let mut closure = Vec::new();
        while let Some(id) = queue.pop() {
            if seen[id as usize] {
                continue;
            }
            seen[id as usize] = true;
            closure.push(id);
            if let ProcKind::Compound(f) = &self.procs[id as usize].kind {
                for s in &f.body {
                    collect_procs(s, &mut queue);
                }
            }
        }
        closure.sort_unstable();
        let mut bytes = serde_json::to_vec(stmt).expect("stmt serializes");
        for id in closure {
            bytes.extend_from_slice(&serde_json::to_vec(&self.procs[id as usize]).expect("proc serializes"));
        }
        fnv1a64(&bytes)
    }
}

fn collect_procs(stmt: &PStmt, out: &mut Vec<ProcId>) {
    fn from_rvalue(r: &PRvalue, out: &mut Vec<ProcId>) {
        if let PRvalue::Call(c) = r {
            out.push(c.proc);
        }
    }
    match stmt {
        PStmt::Decl { init: Some(r), .. } => from_rvalue(r, out),
        PStmt::Decl { .. } => {}
        PStmt::Assign { value, .. } => from_rvalue(value, out),
        PStmt::Call(c) => out.push(c.proc),
        PStmt::Foreach { body, .. } => {
            for s in &body.body {
                collect_procs(s, out);
            }
        }
        PStmt::If { then_body, else_body, .. } => {
            for s in then_body.iter().chain(else_body) {
                collect_procs(s, out);
            }
        }
    }
}

/// Statements in the syntax tree, counted the same way `Plan::stmt_count`
/// counts plan statements.
pub fn ast_stmt_count(script: &Script) -> usize {
    fn count(body: &[Stmt]) -> usize {
        body.iter()
            .map(|s| match s {
                Stmt::Foreach(f) => 1 + count(&f.body),
                Stmt::If(i) => 1 + count(&i.then_body) + count(&i.else_body),
                _ => 1,
            })
            .sum()
    }
    let proc_stmts: usize = script
        .procs
        .iter()
        .map(|p| match &p.body {
            ProcBody::App(_) => 0,
            ProcBody::Compound(b) => count(b),
        })
        .sum();
    proc_stmts + count(&script.stmts)
}

#[derive(Debug)]
pub enum CompileError {
    Parse(ParseError),
    Type(Vec<TypeError>),
}

impl fmt::Display for CompileError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CompileError::Parse(e) => write!(f, "{}", e),
            CompileError::Type(es) => {
                for (i, e) in es.iter().enumerate() {
                    if i > 0 {
                        writeln!(f)?;
                    }
                    write!(f, "{}", e)?;
                }
                Ok(())
            }
        }
    }
}

impl std::error::Error for CompileError {}

/// Parse, check, and lower in one go.
pub fn compile(src: &str) -> Result<Plan, CompileError> {
    let script = parse(src).map_err(CompileError::Parse)?;
    let checked = typecheck(&script).map_err(CompileError::Type)?;
    Ok(lower(&script, &checked))
}

pub fn lower(script: &Script, checked: &Checked) -> Plan {
    let mut proc_ids = BTreeMap::new();
    for (i, p) in script.procs.iter().enumerate() {
        proc_ids.insert(p.name.clone(), i as ProcId);
    }
    let mut lw = Lower { checked, proc_ids, frames: Vec::new() };

    let procs: Vec<ProcPlan> = script.procs.iter().map(|p| lw.proc(p)).collect();
    let top = lw.frame(None, |lw| script.stmts.iter().map(|s| lw.stmt(s)).collect());

    Plan { table: checked.table.clone(), procs, top }
}

struct FrameBuild {
    slots: Vec<SlotInfo>,
    names: Vec<BTreeMap<String, u32>>,
}

struct Lower<'a> {
    checked: &'a Checked,
    proc_ids: BTreeMap<String, ProcId>,
    frames: Vec<FrameBuild>,
}

impl<'a> Lower<'a> {
    /// Runs `fill` inside a fresh frame, optionally pre-seeded with bindings.
    fn frame(&mut self, seed: Option<Vec<SlotInfo>>, fill: impl FnOnce(&mut Self) -> Vec<PStmt>) -> Frame {
        let mut fb = FrameBuild { slots: Vec::new(), names: vec![BTreeMap::new()] };
        if let Some(seed) = seed {
            for s in seed {
                fb.names.last_mut().unwrap().insert(s.name.clone(), fb.slots.len() as u32);
                fb.slots.push(s);
            }
        }
        self.frames.push(fb);
        let body = fill(self);
        let fb = self.frames.pop().unwrap();
        Frame { slots: fb.slots, body }
    }

    fn declare(&mut self, name: &str, ty: Ty) -> u32 {
        let fb = self.frames.last_mut().unwrap();
        let slot = fb.slots.len() as u32;
        fb.slots.push(SlotInfo { name: name.to_string(), ty });
        fb.names.last_mut().unwrap().insert(name.to_string(), slot);
        slot
    }

    fn lookup(&self, name: &str) -> SlotRef {
        for (depth, fb) in self.frames.iter().rev().enumerate() {
            for scope in fb.names.iter().rev() {
                if let Some(&slot) = scope.get(name) {
                    return SlotRef { depth: depth as u8, slot };
                }
            }
        }
        unreachable!("checked script has no unresolved name '{}'", name)
    }

    fn ty_of(&self, r: &ast::TypeRef) -> Ty {
        let base = self.checked.table.resolve(&r.name).expect("checked type");
        if r.is_array {
            Ty::array_of(base)
        } else {
            base
        }
    }

    fn proc(&mut self, p: &ast::ProcDecl) -> ProcPlan {
        let sig = &self.checked.sigs[&p.name];
        let params: Vec<SlotInfo> = sig
            .inputs
            .iter()
            .chain(&sig.outputs)
            .map(|(n, t)| SlotInfo { name: n.clone(), ty: t.clone() })
            .collect();
        let kind = match &p.body {
            ProcBody::App(app) => {
                // App frames hold only parameters; resolve arg paths there.
                self.frames.push(FrameBuild {
                    slots: params.clone(),
                    names: vec![params
                        .iter()
                        .enumerate()
                        .map(|(i, s)| (s.name.clone(), i as u32))
                        .collect()],
                });
                let args = app.args.iter().map(|a| self.app_arg(a)).collect();
                self.frames.pop();
                ProcKind::App(AppPlan { executable: app.executable.clone(), slots: params, args })
            }
            ProcBody::Compound(body) => {
                let frame = self.frame(Some(params), |lw| body.iter().map(|s| lw.stmt(s)).collect());
                ProcKind::Compound(frame)
            }
        };
        ProcPlan {
            name: p.name.clone(),
            n_inputs: sig.inputs.len() as u32,
            n_outputs: sig.outputs.len() as u32,
            kind,
        }
    }

    fn app_arg(&mut self, a: &ast::ArgExpr) -> PArg {
        match a {
            ast::ArgExpr::Str(s) => PArg::Lit(s.clone()),
            ast::ArgExpr::Int(n) => PArg::Lit(n.to_string()),
            ast::ArgExpr::Float(x) => PArg::Lit(x.to_string()),
            ast::ArgExpr::Path(p) | ast::ArgExpr::FilenameOf(p) => {
                let (path, ty) = self.path(p);
                match ty {
                    Ty::Prim(_) => PArg::Prim(path),
                    _ => PArg::File(path),
                }
            }
        }
    }

    fn stmt(&mut self, s: &Stmt) -> PStmt {
        match s {
            Stmt::VarDecl(d) => {
                let ty = self.ty_of(&d.ty);
                // Mapper params may reference earlier variables; resolve them
                // before the new name is in scope.
                let mapper = d.mapper.as_ref().map(|m| PMapper {
                    mapper: m.mapper.clone(),
                    params: m
                        .params
                        .iter()
                        .map(|(k, v)| {
                            let pv = match v {
                                MapperParam::Str(s) => PMapperParam::Str(s.clone()),
                                MapperParam::Int(n) => PMapperParam::Int(*n),
                                MapperParam::Bool(b) => PMapperParam::Bool(*b),
                                MapperParam::Var(name) => PMapperParam::Slot(self.lookup(name)),
                            };
                            (k.clone(), pv)
                        })
                        .collect(),
                });
                let init = d.init.as_ref().map(|r| self.rvalue(r));
                let slot = self.declare(&d.name, ty);
                PStmt::Decl { slot, mapper, init }
            }
            Stmt::Assign(a) => PStmt::Assign { target: self.path(&a.target).0, value: self.rvalue(&a.value) },
            Stmt::Foreach(f) => {
                let source = self.expr(&f.source);
                let src_ty = self.expr_ty(&f.source);
                let elem_ty = match src_ty {
                    Ty::Array(e) => *e,
                    other => other,
                };
                let elem_ty2 = elem_ty.clone();
                let elem_name = f.elem.clone();
                let index_name = f.index.clone();
                let body_stmts = f.body.clone();
                let body = self.frame(None, move |lw| {
                    lw.declare(&elem_name, elem_ty2);
                    if let Some(idx) = &index_name {
                        lw.declare(idx, Ty::INT);
                    }
                    body_stmts.iter().map(|s| lw.stmt(s)).collect()
                });
                PStmt::Foreach { elem_ty, source, body }
            }
            Stmt::If(i) => {
                let cond = self.expr(&i.cond);
                self.frames.last_mut().unwrap().names.push(BTreeMap::new());
                let then_body = i.then_body.iter().map(|s| self.stmt(s)).collect();
                self.frames.last_mut().unwrap().names.pop();
                self.frames.last_mut().unwrap().names.push(BTreeMap::new());
                let else_body = i.else_body.iter().map(|s| self.stmt(s)).collect();
                self.frames.last_mut().unwrap().names.pop();
                PStmt::If { cond, then_body, else_body }
            }
            Stmt::Call(c) => PStmt::Call(self.call(c)),
        }
    }

    fn rvalue(&mut self, r: &Rvalue) -> PRvalue {
        match r {
            Rvalue::Call(c) => PRvalue::Call(self.call(c)),
            Rvalue::Expr(e) => PRvalue::Expr(self.expr(e)),
        }
    }

    fn call(&mut self, c: &ast::Call) -> PCall {
        PCall { proc: self.proc_ids[&c.proc], args: c.args.iter().map(|a| self.expr(a)).collect() }
    }

    fn path(&mut self, p: &ast::PathExpr) -> (PPath, Ty) {
        let root = self.lookup(&p.root);
        let mut ty = self.slot_ty(root);
        let mut segs = Vec::new();
        for seg in &p.segs {
            match seg {
                PathSeg::Member(m) => {
                    if let Ty::Struct(name) = &ty {
                        ty = self.checked.table.field_ty(name, m).expect("checked member").clone();
                    }
                    segs.push(PSeg::Field(m.clone()));
                }
                PathSeg::Index(e) => {
                    if let Ty::Array(elem) = ty {
                        ty = *elem;
                    }
                    segs.push(PSeg::Index(self.expr(e)));
                }
            }
        }
        (PPath { root, segs }, ty)
    }

    fn slot_ty(&self, r: SlotRef) -> Ty {
        let fb = &self.frames[self.frames.len() - 1 - r.depth as usize];
        fb.slots[r.slot as usize].ty.clone()
    }

    fn expr(&mut self, e: &ast::Expr) -> PExpr {
        match e {
            ast::Expr::Int(n, _) => PExpr::Int(*n),
            ast::Expr::Float(x, _) => PExpr::Float(*x),
            ast::Expr::Str(s, _) => PExpr::Str(s.clone()),
            ast::Expr::Bool(b, _) => PExpr::Bool(*b),
            ast::Expr::Path(p) => PExpr::Path(self.path(p).0),
            ast::Expr::Unary { op, operand, .. } => {
                PExpr::Unary { op: *op, operand: Box::new(self.expr(operand)) }
            }
            ast::Expr::Binary { op, lhs, rhs, .. } => PExpr::Binary {
                op: *op,
                lhs: Box::new(self.expr(lhs)),
                rhs: Box::new(self.expr(rhs)),
            },
        }
    }

    fn expr_ty(&mut self, e: &ast::Expr) -> Ty {
        match e {
            ast::Expr::Int(..) => Ty::INT,
            ast::Expr::Float(..) => Ty::FLOAT,
            ast::Expr::Str(..) => Ty::STR,
            ast::Expr::Bool(..) => Ty::BOOL,
            ast::Expr::Path(p) => self.path(p).1,
            ast::Expr::Unary { .. } | ast::Expr::Binary { .. } => Ty::BOOL,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SMALL: &str = r#"
type Image {}
type Header {}
type Volume { Image img; Header hdr; }
type Run { Volume v[ ]; }

(Volume ov) reorient (Volume iv, string direction) {
    app { reorient @filename(iv.hdr) @filename(ov.hdr) direction; }
}
(Run or) reorientRun (Run ir, string direction) {
    foreach Volume iv, i in ir.v {
        or.v[i] = reorient(iv, direction);
    }
}

Run bold1<fs_mapper;location="in/",prefix="bold1">;
Run sbold1<fs_mapper;location="out/",prefix="sbold1">;
sbold1 = reorientRun(bold1, "y");
"#;

    #[test]
    fn slots_and_counts() {
        let plan = compile(SMALL).unwrap();
        assert_eq!(plan.mapped_top_slots(), vec!["bold1", "sbold1"]);
        assert_eq!(plan.top_call_count(), 1);
        assert_eq!(plan.top.slots.len(), 2);
        let script = parse(SMALL).unwrap();
        assert_eq!(plan.stmt_count(), ast_stmt_count(&script));
    }

    #[test]
    fn foreach_body_is_child_frame() {
        let plan = compile(SMALL).unwrap();
        let id = plan.proc_id("reorientRun").unwrap();
        let ProcKind::Compound(frame) = &plan.procs[id as usize].kind else { panic!() };
        let PStmt::Foreach { source, body, .. } = &frame.body[0] else { panic!() };
        // Source `ir.v` resolves to the proc frame (depth 0 at that point).
        let PExpr::Path(p) = source else { panic!() };
        assert_eq!(p.root, SlotRef { depth: 0, slot: 0 });
        // Inside the body, `or` is one frame up, slot 2 (after ir, direction).
        let PStmt::Assign { target, .. } = &body.body[0] else { panic!() };
        assert_eq!(target.root, SlotRef { depth: 1, slot: 2 });
        assert_eq!(body.slots[0].name, "iv");
        assert_eq!(body.slots[1].name, "i");
    }

    #[test]
    fn app_args_lower_by_leaf_type() {
        let plan = compile(SMALL).unwrap();
        let id = plan.proc_id("reorient").unwrap();
        let ProcKind::App(app) = &plan.procs[id as usize].kind else { panic!() };
        assert_eq!(app.executable, "reorient");
        // Slots order inputs first: iv=0, direction=1, ov=2.
        assert!(matches!(&app.args[0], PArg::File(p) if p.root.slot == 0));
        assert!(matches!(&app.args[1], PArg::File(p) if p.root.slot == 2));
        assert!(matches!(&app.args[2], PArg::Prim(p) if p.root.slot == 1));
    }

    #[test]
    fn digest_is_stable_and_content_sensitive() {
        let a = compile(SMALL).unwrap();
        let b = compile(SMALL).unwrap();
        assert_eq!(a.digest(), b.digest());
        let c = compile(&SMALL.replace("\"y\"", "\"x\"")).unwrap();
        assert_ne!(a.digest(), c.digest());
    }

    #[test]
    fn stmt_digest_tracks_reachable_procs() {
        let a = compile(SMALL).unwrap();
        // Editing the body of a procedure reached from the call statement
        // changes that statement's digest, but not the mapper declarations'.
        let edited = SMALL.replace("@filename(iv.hdr)", "@filename(iv.img)");
        let b = compile(&edited).unwrap();
        assert_eq!(a.top_stmt_digest(0), b.top_stmt_digest(0));
        assert_eq!(a.top_stmt_digest(1), b.top_stmt_digest(1));
        assert_ne!(a.top_stmt_digest(2), b.top_stmt_digest(2));
    }

    #[test]
    fn mapper_slot_params_resolve() {
        let src = r#"
type Table {}
type Row { int a; }
(Table o) mk (int n) { app { mk n @filename(o); } }
Table t = mk(3);
Row rows[]<csv_mapper; file=t, skip=1>;
"#;
        let plan = compile(src).unwrap();
        let PStmt::Decl { mapper: Some(m), .. } = &plan.top.body[1] else { panic!() };
        assert_eq!(m.params[0].0, "file");
        assert!(matches!(m.params[0].1, PMapperParam::Slot(SlotRef { depth: 0, slot: 0 })));
        assert!(matches!(m.params[1].1, PMapperParam::Int(1)));
    }
}
