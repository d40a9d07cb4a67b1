//! Static checks over the syntax tree: name resolution, type compatibility,
//! single-assignment discipline, and shape rules for app lines.

use std::collections::BTreeMap;
use std::fmt;

use crate::ast::*;
use crate::types::{compatible, Ty, TypeTable};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TypeError {
    pub message: String,
    pub span: Span,
}

impl fmt::Display for TypeError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "type error: {} at {}", self.message, self.span)
    }
}

impl std::error::Error for TypeError {}

#[derive(Debug, Clone)]
pub struct Signature {
    pub inputs: Vec<(String, Ty)>,
    pub outputs: Vec<(String, Ty)>,
}

/// Result of a successful check: resolved type table and procedure
/// signatures, keyed for the lowering pass.
#[derive(Debug, Clone)]
pub struct Checked {
    pub table: TypeTable,
    pub sigs: BTreeMap<String, Signature>,
}

pub fn typecheck(script: &Script) -> Result<Checked, Vec<TypeError>> {
    let mut ck = Checker::new();
    ck.collect_types(script);
    ck.collect_sigs(script);
    for p in &script.procs {
        ck.check_proc(p);
    }
    ck.push_scope();
    for s in &script.stmts {
        ck.check_stmt(s);
    }
    ck.pop_scope();
    if ck.errors.is_empty() {
        Ok(Checked { table: ck.table, sigs: ck.sigs })
    } else {
        Err(ck.errors)
    }
}

#[derive(Debug, Clone)]
struct VarInfo {
    ty: Ty,
    /// Input parameters and loop bindings reject assignment.
    writable: bool,
    /// Whole-variable assignment already seen (declaration init counts).
    assigned: bool,
}

struct Checker {
    table: TypeTable,
    sigs: BTreeMap<String, Signature>,
    errors: Vec<TypeError>,
    scopes: Vec<BTreeMap<String, VarInfo>>,
}

impl Checker {
    fn new() -> Self {
        Checker { table: TypeTable::default(), sigs: BTreeMap::new(), errors: Vec::new(), scopes: Vec::new() }
    }

    fn error(&mut self, span: Span, message: impl Into<String>) {
        self.errors.push(TypeError { message: message.into(), span });
    }

    fn push_scope(&mut self) {
        self.scopes.push(BTreeMap::new());
    }

    fn pop_scope(&mut self) {
        self.scopes.pop();
    }

    fn declare(&mut self, name: &str, info: VarInfo, span: Span) {
        let top = self.scopes.last_mut().expect("scope underflow");
        if top.contains_key(name) {
            self.error(span, format!("'{}' is already declared in this scope", name));
        } else {
            top.insert(name.to_string(), info);
        }
    }

    fn lookup(&self, name: &str) -> Option<&VarInfo> {
        self.scopes.iter().rev().find_map(|s| s.get(name))
    }

    fn lookup_mut(&mut self, name: &str) -> Option<&mut VarInfo> {
        self.scopes.iter_mut().rev().find_map(|s| s.get_mut(name))
    }

    fn collect_types(&mut self, script: &Script) {
        // Names first, so struct fields may reference types declared later.
        for t in &script.types {
            if TypeTable::is_reserved(&t.name) {
                self.error(t.span, format!("'{}' is a builtin type name", t.name));
                continue;
            }
            let fresh = if t.fields.is_empty() {
                self.table.declare_file(&t.name)
            } else {
                self.table.declare_struct(&t.name, Vec::new())
            };
            if !fresh {
                self.error(t.span, format!("duplicate type '{}'", t.name));
            }
        }
        for t in &script.types {
            if t.fields.is_empty() {
                continue;
            }
            let mut fields = Vec::new();
            for (i, f) in t.fields.iter().enumerate() {
                match self.resolve_ref(&f.ty) {
                    Some(ty) => fields.push((f.name.clone(), ty)),
                    None => self.error(f.span, format!("undefined type '{}'", f.ty.name)),
                }
                if t.fields[..i].iter().any(|g| g.name == f.name) {
                    self.error(f.span, format!("duplicate field '{}' in type '{}'", f.name, t.name));
                }
            }
            self.table.declare_struct_fields(&t.name, fields);
        }
        for t in &script.types {
            if self.struct_cycle(&t.name, &mut Vec::new()) {
                self.error(t.span, format!("type '{}' contains itself", t.name));
            }
        }
    }

    fn struct_cycle(&self, name: &str, stack: &mut Vec<String>) -> bool {
        if stack.iter().any(|n| n == name) {
            return true;
        }
        let Some(fields) = self.table.fields(name) else { return false };
        stack.push(name.to_string());
        for (_, ty) in fields {
            let mut t = ty;
            while let Ty::Array(inner) = t {
                t = inner;
            }
            if let Ty::Struct(inner) = t {
                if self.struct_cycle(inner, stack) {
                    stack.pop();
                    return true;
                }
            }
        }
        stack.pop();
        false
    }

    fn resolve_ref(&self, r: &TypeRef) -> Option<Ty> {
        let base = self.table.resolve(&r.name)?;
        Some(if r.is_array { Ty::array_of(base) } else { base })
    }

    fn collect_sigs(&mut self, script: &Script) {
        for p in &script.procs {
            let mut seen = Vec::new();
            let resolve_params = |ck: &mut Self, params: &[Param], seen: &mut Vec<String>| {
                let mut out = Vec::new();
                for prm in params {
                    if seen.contains(&prm.name) {
                        ck.error(prm.span, format!("duplicate parameter '{}' in '{}'", prm.name, p.name));
                    }
                    seen.push(prm.name.clone());
                    match ck.resolve_ref(&prm.ty) {
                        Some(ty) => out.push((prm.name.clone(), ty)),
                        None => {
                            ck.error(prm.span, format!("undefined type '{}'", prm.ty.name));
                            out.push((prm.name.clone(), Ty::STR));
                        }
                    }
                }
                out
            };
            let outputs = resolve_params(self, &p.outputs, &mut seen);
            let inputs = resolve_params(self, &p.inputs, &mut seen);
            if self.sigs.contains_key(&p.name) {
                self.error(p.span, format!("duplicate procedure '{}'", p.name));
            } else {
                self.sigs.insert(p.name.clone(), Signature { inputs, outputs });
            }
        }
    }

    fn check_proc(&mut self, p: &ProcDecl) {
        let sig = self.sigs.get(&p.name).cloned().expect("signature collected");
        self.push_scope();
        for (i, (name, ty)) in sig.inputs.iter().enumerate() {
            let span = p.inputs.get(i).map(|q| q.span).unwrap_or(p.span);
            self.declare(name, VarInfo { ty: ty.clone(), writable: false, assigned: true }, span);
        }
        for (i, (name, ty)) in sig.outputs.iter().enumerate() {
            let span = p.outputs.get(i).map(|q| q.span).unwrap_or(p.span);
            self.declare(name, VarInfo { ty: ty.clone(), writable: true, assigned: false }, span);
        }
        match &p.body {
            ProcBody::App(app) => self.check_app_line(app),
            ProcBody::Compound(body) => {
                for s in body {
                    self.check_stmt(s);
                }
            }
        }
        self.pop_scope();
    }

    fn check_app_line(&mut self, app: &AppLine) {
        for arg in &app.args {
            match arg {
                ArgExpr::Str(_) | ArgExpr::Int(_) | ArgExpr::Float(_) => {}
                ArgExpr::Path(p) => {
                    if let Some(ty) = self.path_ty(p) {
                        match ty {
                            Ty::Prim(_) | Ty::File(_) => {}
                            other => self.error(
                                p.span,
                                format!("argument '{}' has type {}, expected a value or file", p.root, other.display()),
                            ),
                        }
                    }
                }
                ArgExpr::FilenameOf(p) => {
                    if let Some(ty) = self.path_ty(p) {
                        let ok = ty.is_file() || self.table.is_struct_of_files(&ty);
                        if !ok {
                            self.error(
                                p.span,
                                format!("@filename needs a file or a struct of files, got {}", ty.display()),
                            );
                        }
                    }
                }
            }
        }
    }

    fn check_stmt(&mut self, stmt: &Stmt) {
        match stmt {
            Stmt::VarDecl(d) => self.check_var_decl(d),
            Stmt::Assign(a) => self.check_assign(a),
            Stmt::Foreach(f) => self.check_foreach(f),
            Stmt::If(i) => self.check_if(i),
            Stmt::Call(c) => {
                if let Some(outs) = self.check_call(c) {
                    if !outs.is_empty() {
                        self.error(c.span, format!("procedure '{}' has outputs; bind them with an assignment", c.proc));
                    }
                }
            }
        }
    }

    fn check_var_decl(&mut self, d: &VarDecl) {
        let ty = match self.resolve_ref(&d.ty) {
            Some(t) => t,
            None => {
                self.error(d.span, format!("undefined type '{}'", d.ty.name));
                return;
            }
        };
        if let Some(m) = &d.mapper {
            for (key, val) in &m.params {
                if let MapperParam::Var(name) = val {
                    if self.lookup(name).is_none() {
                        self.error(m.span, format!("mapper parameter '{}' references undefined variable '{}'", key, name));
                    }
                }
            }
            if d.init.is_some() {
                self.error(d.span, format!("'{}' cannot have both a mapper binding and an initializer", d.name));
            }
        }
        let mut assigned = false;
        if let Some(init) = &d.init {
            assigned = true;
            if let Some(vty) = self.rvalue_ty(init) {
                if !compatible(&ty, &vty) {
                    self.error(
                        d.span,
                        format!("cannot initialize {} '{}' from {}", ty.display(), d.name, vty.display()),
                    );
                }
            }
        }
        self.declare(&d.name, VarInfo { ty, writable: true, assigned }, d.span);
    }

    fn check_assign(&mut self, a: &Assign) {
        let Some(root) = self.lookup(&a.target.root).cloned() else {
            self.error(a.target.span, format!("undefined variable '{}'", a.target.root));
            self.rvalue_ty(&a.value);
            return;
        };
        if !root.writable {
            self.error(a.target.span, format!("cannot assign to input parameter or loop binding '{}'", a.target.root));
        }
        if a.target.segs.is_empty() {
            if root.assigned && root.writable {
                self.error(a.target.span, format!("'{}' is already assigned; datasets are single-assignment", a.target.root));
            }
            if let Some(v) = self.lookup_mut(&a.target.root) {
                v.assigned = true;
            }
        }
        let target_ty = self.path_ty(&a.target);
        let value_ty = self.rvalue_ty(&a.value);
        if let (Some(t), Some(v)) = (target_ty, value_ty) {
            if !compatible(&t, &v) {
                self.error(a.span, format!("cannot assign {} to {}", v.display(), t.display()));
            }
        }
    }

    fn check_foreach(&mut self, f: &Foreach) {
        let src_ty = self.expr_ty(&f.source);
        let elem_ty = match src_ty {
            Some(Ty::Array(elem)) => Some(*elem),
            Some(other) => {
                self.error(f.source.span(), format!("foreach source must be an array, got {}", other.display()));
                None
            }
            None => None,
        };
        if let (Some(annot), Some(actual)) = (&f.elem_ty, &elem_ty) {
            if let Some(want) = self.resolve_ref(annot) {
                if !compatible(&want, actual) {
                    self.error(f.span, format!("foreach element is {}, not {}", actual.display(), want.display()));
                }
            } else {
                self.error(f.span, format!("undefined type '{}'", annot.name));
            }
        }
        self.push_scope();
        let elem_ty = elem_ty.unwrap_or(Ty::STR);
        self.declare(&f.elem, VarInfo { ty: elem_ty, writable: false, assigned: true }, f.span);
        if let Some(idx) = &f.index {
            self.declare(idx, VarInfo { ty: Ty::INT, writable: false, assigned: true }, f.span);
        }
        for s in &f.body {
            self.check_stmt(s);
        }
        self.pop_scope();
    }

    fn check_if(&mut self, i: &If) {
        if let Some(ty) = self.expr_ty(&i.cond) {
            if ty != Ty::BOOL {
                self.error(i.cond.span(), format!("condition must be boolean, got {}", ty.display()));
            }
        }
        // Branches are exclusive at run time, so each checks against the
        // assignment state from before the if; a variable both branches
        // write is still single-assignment.
        let before = self.scopes.clone();
        self.push_scope();
        for s in &i.then_body {
            self.check_stmt(s);
        }
        self.pop_scope();
        let after_then = std::mem::replace(&mut self.scopes, before);
        self.push_scope();
        for s in &i.else_body {
            self.check_stmt(s);
        }
        self.pop_scope();
        for (scope, then_scope) in self.scopes.iter_mut().zip(after_then) {
            for (name, info) in scope.iter_mut() {
                if let Some(t) = then_scope.get(name) {
                    info.assigned = info.assigned || t.assigned;
                }
            }
        }
    }

    /// Checks a call and returns its output types, or None if the callee is
    /// unknown (already reported).
    fn check_call(&mut self, c: &Call) -> Option<Vec<Ty>> {
        let Some(sig) = self.sigs.get(&c.proc).cloned() else {
            self.error(c.span, format!("undefined procedure '{}'", c.proc));
            for a in &c.args {
                self.expr_ty(a);
            }
            return None;
        };
        if c.args.len() != sig.inputs.len() {
            self.error(
                c.span,
                format!("'{}' takes {} argument(s), got {}", c.proc, sig.inputs.len(), c.args.len()),
            );
        }
        for (arg, (pname, pty)) in c.args.iter().zip(&sig.inputs) {
            if let Some(aty) = self.expr_ty(arg) {
                if !compatible(pty, &aty) {
                    self.error(
                        arg.span(),
                        format!("argument '{}' of '{}' wants {}, got {}", pname, c.proc, pty.display(), aty.display()),
                    );
                }
            }
        }
        Some(sig.outputs.iter().map(|(_, t)| t.clone()).collect())
    }

    fn rvalue_ty(&mut self, r: &Rvalue) -> Option<Ty> {
        match r {
            Rvalue::Expr(e) => self.expr_ty(e),
            Rvalue::Call(c) => {
                let outs = self.check_call(c)?;
                if outs.len() != 1 {
                    self.error(
                        c.span,
                        format!("'{}' yields {} outputs; exactly one can be bound here", c.proc, outs.len()),
                    );
                    return None;
                }
                Some(outs.into_iter().next().unwrap())
            }
        }
    }

    fn path_ty(&mut self, p: &PathExpr) -> Option<Ty> {
        let Some(info) = self.lookup(&p.root) else {
            self.error(p.span, format!("undefined variable '{}'", p.root));
            return None;
        };
        let mut ty = info.ty.clone();
        for seg in &p.segs {
            match seg {
                PathSeg::Member(m) => match &ty {
                    Ty::Struct(name) => match self.table.field_ty(name, m) {
                        Some(t) => ty = t.clone(),
                        None => {
                            self.error(p.span, format!("type '{}' has no member '{}'", name, m));
                            return None;
                        }
                    },
                    other => {
                        self.error(p.span, format!("{} has no members", other.display()));
                        return None;
                    }
                },
                PathSeg::Index(idx) => {
                    let idx_ty = self.expr_ty(idx);
                    if let Some(t) = idx_ty {
                        if t != Ty::INT {
                            self.error(idx.span(), format!("array index must be int, got {}", t.display()));
                        }
                    }
                    match ty {
                        Ty::Array(elem) => ty = *elem,
                        other => {
                            self.error(p.span, format!("{} is not an array", other.display()));
                            return None;
                        }
                    }
                }
            }
        }
        Some(ty)
    }

    fn expr_ty(&mut self, e: &Expr) -> Option<Ty> {
        match e {
            Expr::Int(..) => Some(Ty::INT),
            Expr::Float(..) => Some(Ty::FLOAT),
            Expr::Str(..) => Some(Ty::STR),
            Expr::Bool(..) => Some(Ty::BOOL),
            Expr::Path(p) => self.path_ty(p),
            Expr::Unary { op: UnOp::Not, operand, span } => {
                if let Some(t) = self.expr_ty(operand) {
                    if t != Ty::BOOL {
                        self.error(*span, format!("'!' needs a boolean, got {}", t.display()));
                    }
                }
                Some(Ty::BOOL)
            }
            Expr::Binary { op, lhs, rhs, span } => {
                let lt = self.expr_ty(lhs);
                let rt = self.expr_ty(rhs);
                match op {
                    BinOp::And | BinOp::Or => {
                        for t in [&lt, &rt] {
                            if let Some(t) = t {
                                if *t != Ty::BOOL {
                                    self.error(*span, format!("'{}' needs booleans, got {}", op.symbol(), t.display()));
                                }
                            }
                        }
                    }
                    _ => {
                        if let (Some(l), Some(r)) = (&lt, &rt) {
                            let comparable = l == r && l.is_prim();
                            if !comparable {
                                self.error(
                                    *span,
                                    format!("cannot compare {} with {}", l.display(), r.display()),
                                );
                            }
                        }
                    }
                }
                Some(Ty::BOOL)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::parser::parse;

    fn errors(src: &str) -> Vec<String> {
        match typecheck(&parse(src).unwrap()) {
            Ok(_) => Vec::new(),
            Err(es) => es.into_iter().map(|e| e.message).collect(),
        }
    }

    const RUN_PRELUDE: &str = "
type Image {}
type Header {}
type Volume { Image img; Header hdr; }
type Run { Volume v[ ]; }
";

    #[test]
    fn member_and_index_resolution() {
        let src = format!(
            "{}
(Volume ov) reorient (Volume iv, string direction) {{
    app {{ reorient @filename(iv.hdr) @filename(ov.hdr) direction; }}
}}
(Run or) reorientRun (Run ir, string direction) {{
    foreach Volume iv, i in ir.v {{
        or.v[i] = reorient(iv, direction);
    }}
}}",
            RUN_PRELUDE
        );
        assert_eq!(errors(&src), Vec::<String>::new());
    }

    #[test]
    fn element_type_mismatch_is_caught() {
        // or.v[i] is a Volume; assigning an Image into it must fail.
        let src = format!(
            "{}
(Run or) f (Run ir) {{
    foreach Volume iv, i in ir.v {{
        or.v[i] = iv.img;
    }}
}}",
            RUN_PRELUDE
        );
        let es = errors(&src);
        assert!(es.iter().any(|m| m.contains("cannot assign Image to Volume")), "{:?}", es);
    }

    #[test]
    fn undefined_procedure_and_type() {
        let es = errors("Bogus x;\ny = f(1);\nstring y;");
        assert!(es.iter().any(|m| m.contains("undefined type 'Bogus'")), "{:?}", es);
        assert!(es.iter().any(|m| m.contains("undefined procedure 'f'")), "{:?}", es);
    }

    #[test]
    fn arity_mismatch() {
        let src = "
type F {}
(F o) mk (F a, F b) { app { mk @filename(a) @filename(b) @filename(o); } }
F x<file_mapper;file=\"x\">;
F y = mk(x);
";
        let es = errors(src);
        assert!(es.iter().any(|m| m.contains("takes 2 argument(s), got 1")), "{:?}", es);
    }

    #[test]
    fn writes_to_input_parameters_rejected() {
        let src = format!(
            "{}
(Run o) f (Run ir) {{
    ir = o;
}}",
            RUN_PRELUDE
        );
        let es = errors(&src);
        assert!(es.iter().any(|m| m.contains("cannot assign to input parameter")), "{:?}", es);
    }

    #[test]
    fn double_whole_assignment_rejected() {
        let src = "
type F {}
(F o) mk (F a) { app { mk @filename(a) @filename(o); } }
F x<file_mapper;file=\"x\">;
F y = mk(x);
y = mk(x);
";
        let es = errors(src);
        assert!(es.iter().any(|m| m.contains("single-assignment")), "{:?}", es);
    }

    #[test]
    fn struct_nominality_applies_to_calls() {
        let src = "
type Image {}
type A { Image img; }
type B { Image img; }
(A o) f (A a) { app { f @filename(a.img) @filename(o.img); } }
A x;
B y;
A z = f(y);
";
        let es = errors(src);
        assert!(es.iter().any(|m| m.contains("wants A, got B")), "{:?}", es);
    }

    #[test]
    fn filename_of_needs_files() {
        let src = "
type F {}
(F o) f (int n) { app { f n @filename(n) @filename(o); } }
";
        let es = errors(src);
        assert!(es.iter().any(|m| m.contains("@filename needs a file")), "{:?}", es);
    }

    #[test]
    fn condition_must_be_boolean() {
        let src = "
type F {}
() g (int n) { app { g n; } }
(F o) f (int n) {
    if (n) { g(n); }
}
F q;
";
        let es = errors(src);
        assert!(es.iter().any(|m| m.contains("condition must be boolean")), "{:?}", es);
    }

    #[test]
    fn comparisons_and_bools_check() {
        let src = r#"
type F {}
() g (int n) { app { g n; } }
(F o) f (int n, string mode) {
    if (n >= 3 && mode == "fast") { g(n); } else { g(0); }
}
F q;
"#;
        assert_eq!(errors(src), Vec::<String>::new());
    }

    #[test]
    fn recursive_struct_rejected() {
        let es = errors("type Node { Node next; }");
        assert!(es.iter().any(|m| m.contains("contains itself")), "{:?}", es);
    }

    #[test]
    fn mapper_var_param_must_exist() {
        let es = errors("type T {}\nT x[]<csv_mapper; file=missing, skip=1>;");
        assert!(es.iter().any(|m| m.contains("undefined variable 'missing'")), "{:?}", es);
    }

    #[test]
    fn bare_call_with_outputs_rejected() {
        let src = "
type F {}
(F o) mk (int n) { app { mk n @filename(o); } }
mk(3);
";
        let es = errors(src);
        assert!(es.iter().any(|m| m.contains("bind them with an assignment")), "{:?}", es);
    }
}
