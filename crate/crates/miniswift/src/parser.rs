//! Recursive descent parser producing the script syntax tree.

use std::fmt;

use crate::ast::*;
use crate::lexer::{tokenize, LexError, Token, TokenKind};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParseError {
    pub message: String,
    pub line: u32,
    pub col: u32,
}

impl fmt::Display for ParseError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "parse error: {} at {}:{}", self.message, self.line, self.col)
    }
}

impl std::error::Error for ParseError {}

impl From<LexError> for ParseError {
    fn from(e: LexError) -> Self {
        ParseError { message: e.message, line: e.line, col: e.col }
    }
}

pub fn parse(src: &str) -> Result<Script, ParseError> {
    let toks = tokenize(src)?;
    Parser { toks, pos: 0 }.script()
}

struct Parser {
    toks: Vec<Token>,
    pos: usize,
}

impl Parser {
    fn peek(&self) -> Option<&Token> {
        self.toks.get(self.pos)
    }

    fn peek_at(&self, k: usize) -> Option<&Token> {
        self.toks.get(self.pos + k)
    }

    fn bump(&mut self) -> Option<Token> {
        let t = self.toks.get(self.pos).cloned();
        if t.is_some() {
            self.pos += 1;
        }
        t
    }

    fn here(&self) -> Span {
        match self.peek() {
            Some(t) => Span { line: t.line, col: t.col },
            None => self
                .toks
                .last()
                .map(|t| Span { line: t.line, col: t.col + t.text.len() as u32 })
                .unwrap_or_default(),
        }
    }

    fn error(&self, message: impl Into<String>) -> ParseError {
        let span = self.here();
        ParseError { message: message.into(), line: span.line, col: span.col }
    }

    fn is_punct(&self, s: &str) -> bool {
        matches!(self.peek(), Some(t) if t.kind == TokenKind::Punct && t.text == s)
    }

    fn punct_at(&self, k: usize, s: &str) -> bool {
        matches!(self.peek_at(k), Some(t) if t.kind == TokenKind::Punct && t.text == s)
    }

    fn is_keyword(&self, s: &str) -> bool {
        matches!(self.peek(), Some(t) if t.kind == TokenKind::Keyword && t.text == s)
    }

    fn eat_punct(&mut self, s: &str) -> bool {
        if self.is_punct(s) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn expect_punct(&mut self, s: &str) -> Result<Span, ParseError> {
        if self.is_punct(s) {
            let t = self.bump().unwrap();
            Ok(Span { line: t.line, col: t.col })
        } else {
            Err(self.error(format!("expected '{}'{}", s, self.found())))
        }
    }

    fn expect_keyword(&mut self, s: &str) -> Result<Span, ParseError> {
        if self.is_keyword(s) {
            let t = self.bump().unwrap();
            Ok(Span { line: t.line, col: t.col })
        } else {
            Err(self.error(format!("expected '{}'{}", s, self.found())))
        }
    }

    fn expect_ident(&mut self, what: &str) -> Result<(String, Span), ParseError> {
        match self.peek() {
            Some(t) if t.kind == TokenKind::Ident => {
                let t = self.bump().unwrap();
                Ok((t.text, Span { line: t.line, col: t.col }))
            }
            _ => Err(self.error(format!("expected {}{}", what, self.found()))),
        }
    }

    fn found(&self) -> String {
        match self.peek() {
            Some(t) => format!(", found '{}'", t.text),
            None => ", found end of input".into(),
        }
    }

    fn script(&mut self) -> Result<Script, ParseError> {
        let mut script = Script { types: Vec::new(), procs: Vec::new(), stmts: Vec::new() };
        while self.peek().is_some() {
            if self.is_keyword("type") {
                script.types.push(self.type_decl()?);
            } else if self.is_punct("(") {
                script.procs.push(self.proc_decl()?);
            } else {
                script.stmts.push(self.stmt()?);
            }
        }
        Ok(script)
    }

    fn type_decl(&mut self) -> Result<TypeDecl, ParseError> {
        let span = self.expect_keyword("type")?;
        let (name, _) = self.expect_ident("type name")?;
        self.expect_punct("{")?;
        let mut fields = Vec::new();
        while !self.is_punct("}") {
            let (tname, tspan) = self.expect_ident("field type")?;
            let (fname, _) = self.expect_ident("field name")?;
            let is_array = self.array_suffix()?;
            self.expect_punct(";")?;
            fields.push(Field { ty: TypeRef { name: tname, is_array }, name: fname, span: tspan });
        }
        self.expect_punct("}")?;
        Ok(TypeDecl { name, fields, span })
    }

    /// Consumes `[` `]` if present. Whitespace between the brackets is gone by
    /// tokenization, so `[ ]` and `[]` are the same here.
    fn array_suffix(&mut self) -> Result<bool, ParseError> {
        if self.eat_punct("[") {
            self.expect_punct("]")?;
            Ok(true)
        } else {
            Ok(false)
        }
    }

    fn proc_decl(&mut self) -> Result<ProcDecl, ParseError> {
        let span = self.expect_punct("(")?;
        let outputs = self.params(")")?;
        self.expect_punct(")")?;
        let (name, _) = self.expect_ident("procedure name")?;
        self.expect_punct("(")?;
        let inputs = self.params(")")?;
        self.expect_punct(")")?;
        self.expect_punct("{")?;
        let body = if self.is_keyword("app") {
            let app = self.app_line()?;
            ProcBody::App(app)
        } else {
            let mut body = Vec::new();
            while !self.is_punct("}") {
                if self.peek().is_none() {
                    return Err(self.error("unterminated procedure body"));
                }
                body.push(self.stmt()?);
            }
            ProcBody::Compound(body)
        };
        self.expect_punct("}")?;
        Ok(ProcDecl { name, outputs, inputs, body, span })
    }

    fn params(&mut self, terminator: &str) -> Result<Vec<Param>, ParseError> {
        let mut out = Vec::new();
        if self.is_punct(terminator) {
            return Ok(out);
        }
        loop {
            let (tname, span) = self.expect_ident("parameter type")?;
            let (pname, _) = self.expect_ident("parameter name")?;
            let is_array = self.array_suffix()?;
            out.push(Param { ty: TypeRef { name: tname, is_array }, name: pname, span });
            if !self.eat_punct(",") {
                break;
            }
        }
        Ok(out)
    }

    fn app_line(&mut self) -> Result<AppLine, ParseError> {
        self.expect_keyword("app")?;
        self.expect_punct("{")?;
        let (executable, span) = self.expect_ident("executable name")?;
        let mut args = Vec::new();
        while !self.is_punct(";") {
            args.push(self.arg_expr()?);
        }
        self.expect_punct(";")?;
        self.expect_punct("}")?;
        Ok(AppLine { executable, args, span })
    }

    fn arg_expr(&mut self) -> Result<ArgExpr, ParseError> {
        match self.peek() {
            Some(t) if t.kind == TokenKind::Str => {
                let t = self.bump().unwrap();
                Ok(ArgExpr::Str(t.text))
            }
            Some(t) if t.kind == TokenKind::Int => {
                let t = self.bump().unwrap();
                let n = t.text.parse().map_err(|_| self.error("integer literal out of range"))?;
                Ok(ArgExpr::Int(n))
            }
            Some(t) if t.kind == TokenKind::Float => {
                let t = self.bump().unwrap();
                let x = t.text.parse().map_err(|_| self.error("bad float literal"))?;
                Ok(ArgExpr::Float(x))
            }
            Some(t) if t.kind == TokenKind::Punct && t.text == "@" => {
                let at = self.bump().unwrap();
                let (name, _) = self.expect_ident("builtin name after '@'")?;
                if name != "filename" {
                    return Err(ParseError {
                        message: format!("unknown builtin '@{}'", name),
                        line: at.line,
                        col: at.col,
                    });
                }
                self.expect_punct("(")?;
                let p = self.path()?;
                self.expect_punct(")")?;
                Ok(ArgExpr::FilenameOf(p))
            }
            Some(t) if t.kind == TokenKind::Ident => Ok(ArgExpr::Path(self.path()?)),
            _ => Err(self.error(format!("expected application argument{}", self.found()))),
        }
    }

    fn stmt(&mut self) -> Result<Stmt, ParseError> {
        if self.is_keyword("foreach") {
            return self.foreach();
        }
        if self.is_keyword("if") {
            return self.if_stmt();
        }
        match self.peek() {
            Some(t) if t.kind == TokenKind::Ident => {
                if matches!(self.peek_at(1), Some(n) if n.kind == TokenKind::Ident) {
                    return self.var_decl();
                }
                if self.punct_at(1, "(") {
                    let c = self.call()?;
                    self.expect_punct(";")?;
                    return Ok(Stmt::Call(c));
                }
                let target = self.path()?;
                self.expect_punct("=")?;
                let value = self.rvalue()?;
                let span = target.span;
                self.expect_punct(";")?;
                Ok(Stmt::Assign(Assign { target, value, span }))
            }
            _ => Err(self.error(format!("expected statement{}", self.found()))),
        }
    }

    fn var_decl(&mut self) -> Result<Stmt, ParseError> {
        let (tname, span) = self.expect_ident("type name")?;
        let (vname, _) = self.expect_ident("variable name")?;
        let is_array = self.array_suffix()?;
        let mapper = if self.is_punct("<") { Some(self.mapper_binding()?) } else { None };
        let init = if self.eat_punct("=") { Some(self.rvalue()?) } else { None };
        self.expect_punct(";")?;
        Ok(Stmt::VarDecl(VarDecl {
            ty: TypeRef { name: tname, is_array },
            name: vname,
            mapper,
            init,
            span,
        }))
    }

    fn mapper_binding(&mut self) -> Result<MapperBinding, ParseError> {
        let span = self.expect_punct("<")?;
        let (mapper, _) = self.expect_ident("mapper name")?;
        let mut params = Vec::new();
        if !self.is_punct(">") {
            // First separator after the mapper name is ';', later ones are ','
            // (';' tolerated there too).
            if !self.eat_punct(";") {
                return Err(self.error(format!("expected ';' after mapper name{}", self.found())));
            }
            loop {
                let (key, _) = self.expect_ident("mapper parameter name")?;
                self.expect_punct("=")?;
                let value = self.mapper_param()?;
                params.push((key, value));
                if !(self.eat_punct(",") || self.eat_punct(";")) {
                    break;
                }
            }
        }
        self.expect_punct(">")?;
        Ok(MapperBinding { mapper, params, span })
    }

    fn mapper_param(&mut self) -> Result<MapperParam, ParseError> {
        match self.peek() {
            Some(t) if t.kind == TokenKind::Str => {
                let t = self.bump().unwrap();
                Ok(MapperParam::Str(t.text))
            }
            Some(t) if t.kind == TokenKind::Int => {
                let t = self.bump().unwrap();
                let n = t.text.parse().map_err(|_| self.error("integer literal out of range"))?;
                Ok(MapperParam::Int(n))
            }
            Some(t) if t.kind == TokenKind::Keyword && (t.text == "true" || t.text == "false") => {
                let t = self.bump().unwrap();
                Ok(MapperParam::Bool(t.text == "true"))
            }
            Some(t) if t.kind == TokenKind::Ident => {
                let t = self.bump().unwrap();
                Ok(MapperParam::Var(t.text))
            }
            _ => Err(self.error(format!("expected mapper parameter value{}", self.found()))),
        }
    }

    fn foreach(&mut self) -> Result<Stmt, ParseError> {
        let span = self.expect_keyword("foreach")?;
        let (first, _) = self.expect_ident("loop variable")?;
        let (elem_ty, elem) = match self.peek() {
            Some(t) if t.kind == TokenKind::Ident => {
                let (elem, _) = self.expect_ident("loop variable")?;
                (Some(TypeRef { name: first, is_array: false }), elem)
            }
            _ => (None, first),
        };
        let index = if self.eat_punct(",") {
            let (idx, _) = self.expect_ident("index variable")?;
            Some(idx)
        } else {
            None
        };
        self.expect_keyword("in")?;
        let source = self.expr()?;
        self.expect_punct("{")?;
        let mut body = Vec::new();
        while !self.is_punct("}") {
            if self.peek().is_none() {
                return Err(self.error("unterminated foreach body"));
            }
            body.push(self.stmt()?);
        }
        self.expect_punct("}")?;
        Ok(Stmt::Foreach(Foreach { elem_ty, elem, index, source, body, span }))
    }

    fn if_stmt(&mut self) -> Result<Stmt, ParseError> {
        let span = self.expect_keyword("if")?;
        self.expect_punct("(")?;
        let cond = self.expr()?;
        self.expect_punct(")")?;
        self.expect_punct("{")?;
        let mut then_body = Vec::new();
        while !self.is_punct("}") {
            if self.peek().is_none() {
                return Err(self.error("unterminated if body"));
            }
            then_body.push(self.stmt()?);
        }
        self.expect_punct("}")?;
        let mut else_body = Vec::new();
        if self.is_keyword("else") {
            self.bump();
            if self.is_keyword("if") {
                else_body.push(self.if_stmt()?);
            } else {
                self.expect_punct("{")?;
                while !self.is_punct("}") {
                    if self.peek().is_none() {
                        return Err(self.error("unterminated else body"));
                    }
                    else_body.push(self.stmt()?);
                }
                self.expect_punct("}")?;
            }
        }
        Ok(Stmt::If(If { cond, then_body, else_body, span }))
    }

    fn rvalue(&mut self) -> Result<Rvalue, ParseError> {
        if matches!(self.peek(), Some(t) if t.kind == TokenKind::Ident) && self.punct_at(1, "(") {
            Ok(Rvalue::Call(self.call()?))
        } else {
            Ok(Rvalue::Expr(self.expr()?))
        }
    }

    fn call(&mut self) -> Result<Call, ParseError> {
        let (proc, span) = self.expect_ident("procedure name")?;
        self.expect_punct("(")?;
        let mut args = Vec::new();
        if !self.is_punct(")") {
            loop {
                args.push(self.expr()?);
                if !self.eat_punct(",") {
                    break;
                }
            }
        }
        self.expect_punct(")")?;
        Ok(Call { proc, args, span })
    }

    fn path(&mut self) -> Result<PathExpr, ParseError> {
        let (root, span) = self.expect_ident("name")?;
        let mut segs = Vec::new();
        loop {
            if self.eat_punct(".") {
                let (m, _) = self.expect_ident("member name")?;
                segs.push(PathSeg::Member(m));
            } else if self.eat_punct("[") {
                let idx = self.expr()?;
                self.expect_punct("]")?;
                segs.push(PathSeg::Index(idx));
            } else {
                break;
            }
        }
        Ok(PathExpr { root, segs, span })
    }

    fn expr(&mut self) -> Result<Expr, ParseError> {
        self.or_expr()
    }

    fn or_expr(&mut self) -> Result<Expr, ParseError> {
        let mut lhs = self.and_expr()?;
        while self.is_punct("||") {
            let t = self.bump().unwrap();
            let rhs = self.and_expr()?;
            lhs = Expr::Binary {
                op: BinOp::Or,
                lhs: Box::new(lhs),
                rhs: Box::new(rhs),
                span: Span { line: t.line, col: t.col },
            };
        }
        Ok(lhs)
    }

    fn and_expr(&mut self) -> Result<Expr, ParseError> {
        let mut lhs = self.cmp_expr()?;
        while self.is_punct("&&") {
            let t = self.bump().unwrap();
            let rhs = self.cmp_expr()?;
            lhs = Expr::Binary {
                op: BinOp::And,
                lhs: Box::new(lhs),
                rhs: Box::new(rhs),
                span: Span { line: t.line, col: t.col },
            };
        }
        Ok(lhs)
    }

    fn cmp_expr(&mut self) -> Result<Expr, ParseError> {
        let lhs = self.unary_expr()?;
        let op = match self.peek() {
            Some(t) if t.kind == TokenKind::Punct => match t.text.as_str() {
                "==" => Some(BinOp::Eq),
                "!=" => Some(BinOp::Ne),
                "<" => Some(BinOp::Lt),
                "<=" => Some(BinOp::Le),
                ">" => Some(BinOp::Gt),
                ">=" => Some(BinOp::Ge),
                _ => None,
            },
            _ => None,
        };
        if let Some(op) = op {
            let t = self.bump().unwrap();
            let rhs = self.unary_expr()?;
            Ok(Expr::Binary {
                op,
                lhs: Box::new(lhs),
                rhs: Box::new(rhs),
                span: Span { line: t.line, col: t.col },
            })
        } else {
            Ok(lhs)
        }
    }

    fn unary_expr(&mut self) -> Result<Expr, ParseError> {
        if self.is_punct("!") {
            let t = self.bump().unwrap();
            let operand = self.unary_expr()?;
            return Ok(Expr::Unary {
                op: UnOp::Not,
                operand: Box::new(operand),
                span: Span { line: t.line, col: t.col },
            });
        }
        self.primary_expr()
    }

    fn primary_expr(&mut self) -> Result<Expr, ParseError> {
        match self.peek() {
            Some(t) if t.kind == TokenKind::Int => {
                let t = self.bump().unwrap();
                let span = Span { line: t.line, col: t.col };
                let n = t.text.parse().map_err(|_| self.error("integer literal out of range"))?;
                Ok(Expr::Int(n, span))
            }
            Some(t) if t.kind == TokenKind::Float => {
                let t = self.bump().unwrap();
                let span = Span { line: t.line, col: t.col };
                let x = t.text.parse().map_err(|_| self.error("bad float literal"))?;
                Ok(Expr::Float(x, span))
            }
            Some(t) if t.kind == TokenKind::Str => {
                let t = self.bump().unwrap();
                let span = Span { line: t.line, col: t.col };
                Ok(Expr::Str(t.text, span))
            }
            Some(t) if t.kind == TokenKind::Keyword && (t.text == "true" || t.text == "false") => {
                let t = self.bump().unwrap();
                let span = Span { line: t.line, col: t.col };
                Ok(Expr::Bool(t.text == "true", span))
            }
            Some(t) if t.kind == TokenKind::Punct && t.text == "(" => {
                self.bump();
                let e = self.expr()?;
                self.expect_punct(")")?;
                Ok(e)
            }
            Some(t) if t.kind == TokenKind::Ident => Ok(Expr::Path(self.path()?)),
            _ => Err(self.error(format!("expected expression{}", self.found()))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ast::{print_script, same_shape};

    #[test]
    fn parses_struct_and_opaque_types() {
        let s = parse("type Image {}\ntype Volume { Image img; Header hdr; }").unwrap();
        assert_eq!(s.types.len(), 2);
        assert!(s.types[0].fields.is_empty());
        assert_eq!(s.types[1].fields[1].name, "hdr");
    }

    #[test]
    fn parses_array_field_with_inner_space() {
        let s = parse("type Run { Volume v[ ]; }").unwrap();
        assert!(s.types[0].fields[0].ty.is_array);
    }

    #[test]
    fn parses_atomic_proc() {
        let src = r#"
(Volume ov) reorient ( Volume iv, string direction, string overwrite)
{
    app {
        reorient @filename(iv.hdr) @filename(ov.hdr) direction overwrite;
    }
}
"#;
        let s = parse(src).unwrap();
        let p = &s.procs[0];
        assert_eq!(p.name, "reorient");
        assert_eq!(p.outputs.len(), 1);
        assert_eq!(p.inputs.len(), 3);
        match &p.body {
            ProcBody::App(app) => {
                assert_eq!(app.executable, "reorient");
                assert_eq!(app.args.len(), 4);
                assert!(matches!(&app.args[0], ArgExpr::FilenameOf(p) if p.root == "iv"));
                assert!(matches!(&app.args[2], ArgExpr::Path(p) if p.root == "direction"));
            }
            _ => panic!("expected app body"),
        }
    }

    #[test]
    fn parses_foreach_with_type_and_index() {
        let src = "foreach Volume iv, i in ir.v { or.v[i] = reorient(iv, direction, overwrite); }";
        let s = parse(src).unwrap();
        match &s.stmts[0] {
            Stmt::Foreach(f) => {
                assert_eq!(f.elem_ty.as_ref().unwrap().name, "Volume");
                assert_eq!(f.elem, "iv");
                assert_eq!(f.index.as_deref(), Some("i"));
                assert_eq!(f.body.len(), 1);
                match &f.body[0] {
                    Stmt::Assign(a) => {
                        assert_eq!(a.target.root, "or");
                        assert_eq!(a.target.segs.len(), 2);
                    }
                    _ => panic!("expected assignment"),
                }
            }
            _ => panic!("expected foreach"),
        }
    }

    #[test]
    fn parses_untyped_foreach() {
        let s = parse("foreach d in diffs { Image image1 = d.plus; }").unwrap();
        match &s.stmts[0] {
            Stmt::Foreach(f) => {
                assert!(f.elem_ty.is_none());
                assert!(f.index.is_none());
            }
            _ => panic!("expected foreach"),
        }
    }

    #[test]
    fn parses_mapper_separators() {
        let one = r#"Run bold1<run_mapper;location="d/",prefix="bold1">;"#;
        let two = r#"DiffStruct diffs[]<csv_mapper; file=diffsTbl, skip=1, header=true, hdelim="|">;"#;
        let s = parse(&format!("{}\n{}", one, two)).unwrap();
        match (&s.stmts[0], &s.stmts[1]) {
            (Stmt::VarDecl(a), Stmt::VarDecl(b)) => {
                let m = a.mapper.as_ref().unwrap();
                assert_eq!(m.mapper, "run_mapper");
                assert_eq!(m.params[1], ("prefix".into(), MapperParam::Str("bold1".into())));
                assert!(b.ty.is_array);
                let m = b.mapper.as_ref().unwrap();
                assert_eq!(m.params[0], ("file".into(), MapperParam::Var("diffsTbl".into())));
                assert_eq!(m.params[1], ("skip".into(), MapperParam::Int(1)));
                assert_eq!(m.params[2], ("header".into(), MapperParam::Bool(true)));
                assert_eq!(m.params[3], ("hdelim".into(), MapperParam::Str("|".into())));
            }
            _ => panic!("expected two declarations"),
        }
    }

    #[test]
    fn parses_decl_with_call_init_and_assignment() {
        let src = "Run yroRun = reorientRun( r , \"y\", \"n\" );\nsbold1 = fmri_wf (bold1);";
        let s = parse(src).unwrap();
        assert!(matches!(&s.stmts[0], Stmt::VarDecl(d) if matches!(&d.init, Some(Rvalue::Call(c)) if c.proc == "reorientRun")));
        assert!(matches!(&s.stmts[1], Stmt::Assign(a) if a.target.root == "sbold1"
            && matches!(&a.value, Rvalue::Call(c) if c.proc == "fmri_wf")));
    }

    #[test]
    fn parses_if_else_and_bool_exprs() {
        let src = r#"if (n >= 3 && mode == "fast") { check(n); } else { check(m); }"#;
        let s = parse(src).unwrap();
        match &s.stmts[0] {
            Stmt::If(i) => {
                assert!(matches!(&i.cond, Expr::Binary { op: BinOp::And, .. }));
                assert_eq!(i.then_body.len(), 1);
                assert_eq!(i.else_body.len(), 1);
            }
            _ => panic!("expected if"),
        }
    }

    #[test]
    fn unknown_at_builtin_is_parse_error() {
        let src = "(Volume o) f (Volume i) { app { f @size(i) ; } }";
        let err = parse(src).unwrap_err();
        assert!(err.message.contains("@size"), "{}", err.message);
        assert_eq!(err.line, 1);
    }

    #[test]
    fn error_positions_point_into_source() {
        let err = parse("type Run { Volume v[; }").unwrap_err();
        assert_eq!(err.line, 1);
        assert_eq!(err.col, 21);
    }

    #[test]
    fn print_parse_round_trip() {
        let src = r#"
type Image {}
type Volume { Image img; Header hdr; }
type Run { Volume v[ ]; }

(Volume ov) reorient ( Volume iv, string direction)
{
    app { reorient @filename(iv.hdr) @filename(ov.hdr) direction; }
}

(Run or) reorientRun (Run ir, string direction)
{
    foreach Volume iv, i in ir.v {
        or.v[i] = reorient(iv, direction);
    }
}

Run bold1<run_mapper;location="d/",prefix="bold1">;
Run sbold1<run_mapper;location="d/",prefix="sbold1">;
sbold1 = reorientRun (bold1, "y");
"#;
        let first = parse(src).unwrap();
        let printed = print_script(&first);
        let second = parse(&printed).unwrap();
        assert!(same_shape(&first, &second), "round trip changed shape:\n{}", printed);
    }
}
