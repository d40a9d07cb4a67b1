//! Syntax tree for workflow scripts, plus a canonical printer.
//!
//! The printer exists so tools can echo a script back out; `parse(print(ast))`
//! yields a structurally equal tree (spans aside).

use std::fmt;

use serde::Serialize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Span {
    pub line: u32,
    pub col: u32,
}

impl fmt::Display for Span {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.line, self.col)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Script {
    pub types: Vec<TypeDecl>,
    pub procs: Vec<ProcDecl>,
    pub stmts: Vec<Stmt>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TypeDecl {
    pub name: String,
    /// Empty means an opaque file type.
    pub fields: Vec<Field>,
    pub span: Span,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Field {
    pub ty: TypeRef,
    pub name: String,
    pub span: Span,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TypeRef {
    pub name: String,
    pub is_array: bool,
}

impl fmt::Display for TypeRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}{}", self.name, if self.is_array { "[]" } else { "" })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProcDecl {
    pub name: String,
    pub outputs: Vec<Param>,
    pub inputs: Vec<Param>,
    pub body: ProcBody,
    pub span: Span,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub ty: TypeRef,
    pub name: String,
    pub span: Span,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ProcBody {
    App(AppLine),
    Compound(Vec<Stmt>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct AppLine {
    pub executable: String,
    pub args: Vec<ArgExpr>,
    pub span: Span,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ArgExpr {
    Str(String),
    Int(i64),
    Float(f64),
    Path(PathExpr),
    FilenameOf(PathExpr),
}

#[derive(Debug, Clone, PartialEq)]
pub struct PathExpr {
    pub root: String,
    pub segs: Vec<PathSeg>,
    pub span: Span,
}

#[derive(Debug, Clone, PartialEq)]
pub enum PathSeg {
    Member(String),
    Index(Expr),
}

#[derive(Debug, Clone, PartialEq)]
pub enum Stmt {
    VarDecl(VarDecl),
    Assign(Assign),
    Foreach(Foreach),
    If(If),
    /// Call to a procedure with no outputs, in statement position.
    Call(Call),
}

#[derive(Debug, Clone, PartialEq)]
pub struct VarDecl {
    pub ty: TypeRef,
    pub name: String,
    pub mapper: Option<MapperBinding>,
    pub init: Option<Rvalue>,
    pub span: Span,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MapperBinding {
    pub mapper: String,
    pub params: Vec<(String, MapperParam)>,
    pub span: Span,
}

#[derive(Debug, Clone, PartialEq)]
pub enum MapperParam {
    Str(String),
    Int(i64),
    Bool(bool),
    /// Reference to a script variable; substituted at mapping time.
    Var(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Assign {
    pub target: PathExpr,
    pub value: Rvalue,
    pub span: Span,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Rvalue {
    Call(Call),
    Expr(Expr),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Call {
    pub proc: String,
    pub args: Vec<Expr>,
    pub span: Span,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Foreach {
    /// Optional element type annotation, as in `foreach Volume iv, i in ...`.
    pub elem_ty: Option<TypeRef>,
    pub elem: String,
    pub index: Option<String>,
    pub source: Expr,
    pub body: Vec<Stmt>,
    pub span: Span,
}

#[derive(Debug, Clone, PartialEq)]
pub struct If {
    pub cond: Expr,
    pub then_body: Vec<Stmt>,
    pub else_body: Vec<Stmt>,
    pub span: Span,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Int(i64, Span),
    Float(f64, Span),
    Str(String, Span),
    Bool(bool, Span),
    Path(PathExpr),
    Unary { op: UnOp, operand: Box<Expr>, span: Span },
    Binary { op: BinOp, lhs: Box<Expr>, rhs: Box<Expr>, span: Span },
}

impl Expr {
    pub fn span(&self) -> Span {
        match self {
            Expr::Int(_, s) | Expr::Float(_, s) | Expr::Str(_, s) | Expr::Bool(_, s) => *s,
            Expr::Path(p) => p.span,
            Expr::Unary { span, .. } | Expr::Binary { span, .. } => *span,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum UnOp {
    Not,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum BinOp {
    Eq,
    Ne,
    Lt,
    Le,
    Gt,
    Ge,
    And,
    Or,
}

impl BinOp {
    pub fn symbol(self) -> &'static str {
        match self {
            BinOp::Eq => "==",
            BinOp::Ne => "!=",
            BinOp::Lt => "<",
            BinOp::Le => "<=",
            BinOp::Gt => ">",
            BinOp::Ge => ">=",
            BinOp::And => "&&",
            BinOp::Or => "||",
        }
    }
}

fn quote(s: &str) -> String {
    let mut out = String::from("\"");
    for ch in s.chars() {
        match ch {
            '"' => out.push_str("\\\""),
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            '\t' => out.push_str("\\t"),
            c => out.push(c),
        }
    }
    out.push('"');
    out
}

struct Printer {
    out: String,
    indent: usize,
}

impl Printer {
    fn line(&mut self, text: &str) {
        for _ in 0..self.indent {
            self.out.push_str("    ");
        }
        self.out.push_str(text);
        self.out.push('\n');
    }

    fn script(&mut self, s: &Script) {
        for t in &s.types {
            self.type_decl(t);
        }
        for p in &s.procs {
            if !self.out.is_empty() {
                self.out.push('\n');
            }
            self.proc_decl(p);
        }
        if !s.stmts.is_empty() && !self.out.is_empty() {
            self.out.push('\n');
        }
        for st in &s.stmts {
            self.stmt(st);
        }
    }

    fn type_decl(&mut self, t: &TypeDecl) {
        if t.fields.is_empty() {
            self.line(&format!("type {} {{}}", t.name));
        } else {
            self.line(&format!("type {} {{", t.name));
            self.indent += 1;
            for f in &t.fields {
                self.line(&format!("{} {};", f.ty.name, field_name(f)));
            }
            self.indent -= 1;
            self.line("}");
        }
    }

    fn proc_decl(&mut self, p: &ProcDecl) {
        let outs = params(&p.outputs);
        let ins = params(&p.inputs);
        self.line(&format!("({}) {} ({}) {{", outs, p.name, ins));
        self.indent += 1;
        match &p.body {
            ProcBody::App(app) => {
                self.line("app {");
                self.indent += 1;
                let args: Vec<String> = app.args.iter().map(arg_expr).collect();
                if args.is_empty() {
                    self.line(&format!("{};", app.executable));
                } else {
                    self.line(&format!("{} {};", app.executable, args.join(" ")));
                }
                self.indent -= 1;
                self.line("}");
            }
            ProcBody::Compound(body) => {
                for st in body {
                    self.stmt(st);
                }
            }
        }
        self.indent -= 1;
        self.line("}");
    }

    fn stmt(&mut self, st: &Stmt) {
        match st {
            Stmt::VarDecl(d) => {
                let mut s = format!("{} {}", d.ty.name, d.name);
                if d.ty.is_array {
                    s.push_str("[]");
                }
                if let Some(m) = &d.mapper {
                    s.push_str(&mapper(m));
                }
                if let Some(init) = &d.init {
                    s.push_str(" = ");
                    s.push_str(&rvalue(init));
                }
                s.push(';');
                self.line(&s);
            }
            Stmt::Assign(a) => {
                self.line(&format!("{} = {};", path(&a.target), rvalue(&a.value)));
            }
            Stmt::Foreach(f) => {
                let mut head = String::from("foreach ");
                if let Some(t) = &f.elem_ty {
                    head.push_str(&format!("{} ", t));
                }
                head.push_str(&f.elem);
                if let Some(i) = &f.index {
                    head.push_str(&format!(", {}", i));
                }
                head.push_str(&format!(" in {} {{", expr(&f.source)));
                self.line(&head);
                self.indent += 1;
                for st in &f.body {
                    self.stmt(st);
                }
                self.indent -= 1;
                self.line("}");
            }
            Stmt::If(i) => {
                self.line(&format!("if ({}) {{", expr(&i.cond)));
                self.indent += 1;
                for st in &i.then_body {
                    self.stmt(st);
                }
                self.indent -= 1;
                if i.else_body.is_empty() {
                    self.line("}");
                } else {
                    self.line("} else {");
                    self.indent += 1;
                    for st in &i.else_body {
                        self.stmt(st);
                    }
                    self.indent -= 1;
                    self.line("}");
                }
            }
            Stmt::Call(c) => {
                self.line(&format!("{};", call(c)));
            }
        }
    }
}

fn field_name(f: &Field) -> String {
    if f.ty.is_array {
        format!("{}[]", f.name)
    } else {
        f.name.clone()
    }
}

fn params(ps: &[Param]) -> String {
    ps.iter()
        .map(|p| {
            if p.ty.is_array {
                format!("{} {}[]", p.ty.name, p.name)
            } else {
                format!("{} {}", p.ty.name, p.name)
            }
        })
        .collect::<Vec<_>>()
        .join(", ")
}

fn mapper(m: &MapperBinding) -> String {
    let mut s = format!("<{}", m.mapper);
    for (i, (k, v)) in m.params.iter().enumerate() {
        s.push(if i == 0 { ';' } else { ',' });
        let val = match v {
            MapperParam::Str(t) => quote(t),
            MapperParam::Int(n) => n.to_string(),
            MapperParam::Bool(b) => b.to_string(),
            MapperParam::Var(name) => name.clone(),
        };
        s.push_str(&format!("{}={}", k, val));
    }
    s.push('>');
    s
}

fn rvalue(r: &Rvalue) -> String {
    match r {
        Rvalue::Call(c) => call(c),
        Rvalue::Expr(e) => expr(e),
    }
}

fn call(c: &Call) -> String {
    let args: Vec<String> = c.args.iter().map(expr).collect();
    format!("{}({})", c.proc, args.join(", "))
}

fn path(p: &PathExpr) -> String {
    let mut s = p.root.clone();
    for seg in &p.segs {
        match seg {
            PathSeg::Member(m) => s.push_str(&format!(".{}", m)),
            PathSeg::Index(e) => s.push_str(&format!("[{}]", expr(e))),
        }
    }
    s
}

fn arg_expr(a: &ArgExpr) -> String {
    match a {
        ArgExpr::Str(s) => quote(s),
        ArgExpr::Int(n) => n.to_string(),
        ArgExpr::Float(x) => x.to_string(),
        ArgExpr::Path(p) => path(p),
        ArgExpr::FilenameOf(p) => format!("@filename({})", path(p)),
    }
}

fn expr(e: &Expr) -> String {
    match e {
        Expr::Int(n, _) => n.to_string(),
        Expr::Float(x, _) => x.to_string(),
        Expr::Str(s, _) => quote(s),
        Expr::Bool(b, _) => b.to_string(),
        Expr::Path(p) => path(p),
        Expr::Unary { op: UnOp::Not, operand, .. } => format!("!{}", expr_atom(operand)),
        Expr::Binary { op, lhs, rhs, .. } => {
            format!("{} {} {}", expr_atom(lhs), op.symbol(), expr_atom(rhs))
        }
    }
}

fn expr_atom(e: &Expr) -> String {
    match e {
        Expr::Binary { .. } => format!("({})", expr(e)),
        _ => expr(e),
    }
}

/// Canonical source rendering of a script.
pub fn print_script(s: &Script) -> String {
    let mut p = Printer { out: String::new(), indent: 0 };
    p.script(s);
    p.out
}

/// Structural equality that ignores source positions.
pub fn same_shape(a: &Script, b: &Script) -> bool {
    // Spans are data members, so compare through the printer instead of Eq.
    print_script(a) == print_script(b)
}
