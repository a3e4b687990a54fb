//! A small deterministic expression language for rate kernels.
//!
//! Grammar (whitespace is insignificant between tokens):
//!
//! ```text
//! expr   := term (('+' | '-') term)*
//! term   := factor (('*' | '/') factor)*
//! factor := unary ('^' factor)?
//! unary  := '-'? atom
//! atom   := number | ident | ident '[' index ']'
//!         | func '(' expr (',' expr)* ')' | '(' expr ')'
//! ```
//!
//! Identifiers are `r`, `rp`, `x`, `y` and `pi`. A bare `x` (or `y`) means
//! coordinate 0. Functions: `sin cos exp log abs sqrt` (one argument),
//! `pow` (two), `min max` (two or more).
//!
//! Evaluation is plain IEEE double arithmetic in tree order. Any operation
//! that would produce a non-finite value (log or sqrt of a negative, division
//! by zero, overflow) is reported as an [`EvalError`] pointing at the
//! offending sub-expression.

use std::fmt;

use thiserror::Error;

/// 1-based byte offset into the source text.
pub type Offset = usize;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ParseError {
    #[error("syntax error at offset {offset}: expected {expected}, found {found}")]
    Syntax {
        offset: Offset,
        expected: String,
        found: String,
    },
    #[error("unknown identifier `{name}` at offset {offset}")]
    UnknownIdentifier { name: String, offset: Offset },
    #[error("function `{name}` at offset {offset} takes {expected} argument(s), got {got}")]
    Arity {
        name: String,
        offset: Offset,
        expected: &'static str,
        got: usize,
    },
    #[error("empty expression")]
    Empty,
}

impl ParseError {
    pub fn offset(&self) -> Option<Offset> {
        match self {
            ParseError::Syntax { offset, .. }
            | ParseError::UnknownIdentifier { offset, .. }
            | ParseError::Arity { offset, .. } => Some(*offset),
            ParseError::Empty => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EvalError {
    #[error("domain error in `{op}` at offset {offset}: {detail}")]
    Domain {
        op: &'static str,
        offset: Offset,
        detail: String,
    },
    #[error("variable `{name}` at offset {offset} is not bound")]
    Unbound { name: String, offset: Offset },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Var {
    R,
    Rp,
    Pi,
    X(usize),
    Y(usize),
}

impl fmt::Display for Var {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Var::R => f.write_str("r"),
            Var::Rp => f.write_str("rp"),
            Var::Pi => f.write_str("pi"),
            Var::X(i) => write!(f, "x[{i}]"),
            Var::Y(i) => write!(f, "y[{i}]"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
    Pow,
}

impl BinOp {
    fn symbol(self) -> &'static str {
        match self {
            BinOp::Add => "+",
            BinOp::Sub => "-",
            BinOp::Mul => "*",
            BinOp::Div => "/",
            BinOp::Pow => "^",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Func {
    Sin,
    Cos,
    Exp,
    Log,
    Abs,
    Sqrt,
    Pow,
    Min,
    Max,
}

impl Func {
    fn from_name(name: &str) -> Option<Func> {
        Some(match name {
            "sin" => Func::Sin,
            "cos" => Func::Cos,
            "exp" => Func::Exp,
            "log" => Func::Log,
            "abs" => Func::Abs,
            "sqrt" => Func::Sqrt,
            "pow" => Func::Pow,
            "min" => Func::Min,
            "max" => Func::Max,
            _ => return None,
        })
    }

    fn name(self) -> &'static str {
        match self {
            Func::Sin => "sin",
            Func::Cos => "cos",
            Func::Exp => "exp",
            Func::Log => "log",
            Func::Abs => "abs",
            Func::Sqrt => "sqrt",
            Func::Pow => "pow",
            Func::Min => "min",
            Func::Max => "max",
        }
    }

    fn check_arity(self, got: usize) -> Result<(), &'static str> {
        let ok = match self {
            Func::Pow => got == 2,
            Func::Min | Func::Max => got >= 2,
            _ => got == 1,
        };
        if ok {
            return Ok(());
        }
        Err(match self {
            Func::Pow => "2",
            Func::Min | Func::Max => "at least 2",
            _ => "1",
        })
    }
}

#[derive(Debug, Clone)]
pub enum ExprKind {
    Num(f64),
    Var(Var),
    Neg(Box<Expr>),
    Binary(BinOp, Box<Expr>, Box<Expr>),
    Call(Func, Vec<Expr>),
}

/// A node of the parsed tree. Equality is structural and ignores source
/// offsets, so a tree and the tree of its pretty-printed form compare equal.
#[derive(Debug, Clone)]
pub struct Expr {
    pub kind: ExprKind,
    pub offset: Offset,
}

impl PartialEq for Expr {
    fn eq(&self, other: &Self) -> bool {
        match (&self.kind, &other.kind) {
            (ExprKind::Num(a), ExprKind::Num(b)) => a.to_bits() == b.to_bits(),
            (ExprKind::Var(a), ExprKind::Var(b)) => a == b,
            (ExprKind::Neg(a), ExprKind::Neg(b)) => a == b,
            (ExprKind::Binary(oa, la, ra), ExprKind::Binary(ob, lb, rb)) => {
                oa == ob && la == lb && ra == rb
            }
            (ExprKind::Call(fa, aa), ExprKind::Call(fb, ab)) => fa == fb && aa == ab,
            _ => false,
        }
    }
}

impl fmt::Display for Expr {
    /// Fully parenthesised rendering that reparses to the same tree.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.kind {
            ExprKind::Num(v) => write!(f, "{v:?}"),
            ExprKind::Var(v) => write!(f, "{v}"),
            ExprKind::Neg(inner) => match inner.kind {
                ExprKind::Num(_) | ExprKind::Var(_) | ExprKind::Call(..) => write!(f, "-{inner}"),
                _ => write!(f, "-({inner})"),
            },
            ExprKind::Binary(op, lhs, rhs) => write!(f, "({lhs} {} {rhs})", op.symbol()),
            ExprKind::Call(func, args) => {
                write!(f, "{}(", func.name())?;
                for (i, a) in args.iter().enumerate() {
                    if i > 0 {
                        f.write_str(", ")?;
                    }
                    write!(f, "{a}")?;
                }
                f.write_str(")")
            }
        }
    }
}

/// Variable values used during evaluation.
#[derive(Debug, Clone, Copy, Default)]
pub struct Bindings<'a> {
    pub r: f64,
    pub rp: f64,
    pub x: &'a [f64],
    pub y: &'a [f64],
}

/// A parsed rate expression together with its source text.
#[derive(Debug, Clone)]
pub struct RateExpr {
    source: String,
    root: Expr,
}

impl PartialEq for RateExpr {
    fn eq(&self, other: &Self) -> bool {
        self.root == other.root
    }
}

impl RateExpr {
    pub fn parse(source: &str) -> Result<RateExpr, ParseError> {
        let root = parse(source)?;
        Ok(RateExpr {
            source: source.to_owned(),
            root,
        })
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    pub fn root(&self) -> &Expr {
        &self.root
    }

    pub fn eval(&self, b: &Bindings<'_>) -> Result<f64, EvalError> {
        eval(&self.root, b)
    }

    /// Every variable referenced, in first-occurrence order.
    pub fn variables(&self) -> Vec<Var> {
        let mut out = Vec::new();
        collect_vars(&self.root, &mut out);
        out
    }

    pub fn uses_position(&self) -> bool {
        self.variables()
            .iter()
            .any(|v| matches!(v, Var::R | Var::Rp))
    }
}

impl fmt::Display for RateExpr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.root.fmt(f)
    }
}

fn collect_vars(e: &Expr, out: &mut Vec<Var>) {
    match &e.kind {
        ExprKind::Num(_) => {}
        ExprKind::Var(v) => {
            if !out.contains(v) {
                out.push(*v);
            }
        }
        ExprKind::Neg(a) => collect_vars(a, out),
        ExprKind::Binary(_, a, b) => {
            collect_vars(a, out);
            collect_vars(b, out);
        }
        ExprKind::Call(_, args) => args.iter().for_each(|a| collect_vars(a, out)),
    }
}

// ---------------------------------------------------------------------------
// Lexer

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Num(f64),
    Ident(String),
    Plus,
    Minus,
    Star,
    Slash,
    Caret,
    LParen,
    RParen,
    LBracket,
    RBracket,
    Comma,
    Eof,
}

impl Tok {
    fn describe(&self) -> String {
        match self {
            Tok::Num(v) => format!("number {v}"),
            Tok::Ident(s) => format!("identifier `{s}`"),
            Tok::Plus => "`+`".into(),
            Tok::Minus => "`-`".into(),
            Tok::Star => "`*`".into(),
            Tok::Slash => "`/`".into(),
            Tok::Caret => "`^`".into(),
            Tok::LParen => "`(`".into(),
            Tok::RParen => "`)`".into(),
            Tok::LBracket => "`[`".into(),
            Tok::RBracket => "`]`".into(),
            Tok::Comma => "`,`".into(),
            Tok::Eof => "end of input".into(),
        }
    }
}

fn lex(src: &str) -> Result<Vec<(Tok, Offset)>, ParseError> {
    let bytes = src.as_bytes();
    let mut toks = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i];
        let start = i + 1;
        match c {
            b' ' | b'\t' | b'\n' | b'\r' => {
                i += 1;
                continue;
            }
            b'+' => toks.push((Tok::Plus, start)),
            b'-' => toks.push((Tok::Minus, start)),
            b'*' => toks.push((Tok::Star, start)),
            b'/' => toks.push((Tok::Slash, start)),
            b'^' => toks.push((Tok::Caret, start)),
            b'(' => toks.push((Tok::LParen, start)),
            b')' => toks.push((Tok::RParen, start)),
            b'[' => toks.push((Tok::LBracket, start)),
            b']' => toks.push((Tok::RBracket, start)),
            b',' => toks.push((Tok::Comma, start)),
            b'0'..=b'9' | b'.' => {
                let mut j = i;
                while j < bytes.len() && (bytes[j].is_ascii_digit() || bytes[j] == b'.') {
                    j += 1;
                }
                if j < bytes.len() && (bytes[j] == b'e' || bytes[j] == b'E') {
                    let mut k = j + 1;
                    if k < bytes.len() && (bytes[k] == b'+' || bytes[k] == b'-') {
                        k += 1;
                    }
                    if k < bytes.len() && bytes[k].is_ascii_digit() {
                        while k < bytes.len() && bytes[k].is_ascii_digit() {
                            k += 1;
                        }
                        j = k;
                    }
                }
                let text = &src[i..j];
                let v: f64 = text.parse().map_err(|_| ParseError::Syntax {
                    offset: start,
                    expected: "number".into(),
                    found: format!("`{text}`"),
                })?;
                toks.push((Tok::Num(v), start));
                i = j;
                continue;
            }
            c if c.is_ascii_alphabetic() || c == b'_' => {
                let mut j = i;
                while j < bytes.len() && (bytes[j].is_ascii_alphanumeric() || bytes[j] == b'_') {
                    j += 1;
                }
                toks.push((Tok::Ident(src[i..j].to_owned()), start));
                i = j;
                continue;
            }
            _ => {
                let ch = src[i..].chars().next().unwrap_or('?');
                return Err(ParseError::Syntax {
                    offset: start,
                    expected: "operator, number or identifier".into(),
                    found: format!("`{ch}`"),
                });
            }
        }
        i += 1;
    }
    toks.push((Tok::Eof, src.len() + 1));
    Ok(toks)
}

// ---------------------------------------------------------------------------
// Parser

struct Parser {
    toks: Vec<(Tok, Offset)>,
    pos: usize,
}

const ATOM: &str = "atom (number, identifier, function call or `(`)";

impl Parser {
    fn peek(&self) -> &Tok {
        &self.toks[self.pos].0
    }

    fn offset(&self) -> Offset {
        self.toks[self.pos].1
    }

    fn bump(&mut self) -> (Tok, Offset) {
        let t = self.toks[self.pos].clone();
        if self.pos + 1 < self.toks.len() {
            self.pos += 1;
        }
        t
    }

    fn error(&self, expected: &str) -> ParseError {
        ParseError::Syntax {
            offset: self.offset(),
            expected: expected.into(),
            found: self.peek().describe(),
        }
    }

    fn expect(&mut self, tok: Tok, expected: &str) -> Result<(), ParseError> {
        if *self.peek() == tok {
            self.bump();
            Ok(())
        } else {
            Err(self.error(expected))
        }
    }

    fn expr(&mut self) -> Result<Expr, ParseError> {
        let mut lhs = self.term()?;
        loop {
            let op = match self.peek() {
                Tok::Plus => BinOp::Add,
                Tok::Minus => BinOp::Sub,
                _ => return Ok(lhs),
            };
            let (_, offset) = self.bump();
            let rhs = self.term()?;
            lhs = Expr {
                kind: ExprKind::Binary(op, Box::new(lhs), Box::new(rhs)),
                offset,
            };
        }
    }

    fn term(&mut self) -> Result<Expr, ParseError> {
        let mut lhs = self.factor()?;
        loop {
            let op = match self.peek() {
                Tok::Star => BinOp::Mul,
                Tok::Slash => BinOp::Div,
                _ => return Ok(lhs),
            };
            let (_, offset) = self.bump();
            let rhs = self.factor()?;
            lhs = Expr {
                kind: ExprKind::Binary(op, Box::new(lhs), Box::new(rhs)),
                offset,
            };
        }
    }

    fn factor(&mut self) -> Result<Expr, ParseError> {
        let base = self.unary()?;
        if *self.peek() == Tok::Caret {
            let (_, offset) = self.bump();
            let exponent = self.factor()?;
            return Ok(Expr {
                kind: ExprKind::Binary(BinOp::Pow, Box::new(base), Box::new(exponent)),
                offset,
            });
        }
        Ok(base)
    }

    fn unary(&mut self) -> Result<Expr, ParseError> {
        if *self.peek() == Tok::Minus {
            let (_, offset) = self.bump();
            let inner = self.atom()?;
            return Ok(Expr {
                kind: ExprKind::Neg(Box::new(inner)),
                offset,
            });
        }
        self.atom()
    }

    fn atom(&mut self) -> Result<Expr, ParseError> {
        let offset = self.offset();
        match self.peek().clone() {
            Tok::Num(v) => {
                self.bump();
                Ok(Expr {
                    kind: ExprKind::Num(v),
                    offset,
                })
            }
            Tok::LParen => {
                self.bump();
                let inner = self.expr()?;
                self.expect(Tok::RParen, "`)`")?;
                Ok(inner)
            }
            Tok::Ident(name) => {
                self.bump();
                if let Some(func) = Func::from_name(&name) {
                    return self.call(func, &name, offset);
                }
                let var = match name.as_str() {
                    "r" => Var::R,
                    "rp" => Var::Rp,
                    "pi" => Var::Pi,
                    "x" | "y" => {
                        let idx = self.index()?;
                        if name == "x" {
                            Var::X(idx)
                        } else {
                            Var::Y(idx)
                        }
                    }
                    _ => return Err(ParseError::UnknownIdentifier { name, offset }),
                };
                Ok(Expr {
                    kind: ExprKind::Var(var),
                    offset,
                })
            }
            _ => Err(self.error(ATOM)),
        }
    }

    fn index(&mut self) -> Result<usize, ParseError> {
        if *self.peek() != Tok::LBracket {
            return Ok(0);
        }
        self.bump();
        let idx = match self.peek().clone() {
            Tok::Num(v) if v >= 0.0 && v.fract() == 0.0 && v < 1e9 => v as usize,
            _ => return Err(self.error("non-negative integer index")),
        };
        self.bump();
        self.expect(Tok::RBracket, "`]`")?;
        Ok(idx)
    }

    fn call(&mut self, func: Func, name: &str, offset: Offset) -> Result<Expr, ParseError> {
        self.expect(Tok::LParen, "`(` after function name")?;
        let mut args = vec![self.expr()?];
        while *self.peek() == Tok::Comma {
            self.bump();
            args.push(self.expr()?);
        }
        self.expect(Tok::RParen, "`,` or `)`")?;
        func.check_arity(args.len())
            .map_err(|expected| ParseError::Arity {
                name: name.to_owned(),
                offset,
                expected,
                got: args.len(),
            })?;
        Ok(Expr {
            kind: ExprKind::Call(func, args),
            offset,
        })
    }
}

/// Parses `source` into an expression tree.
pub fn parse(source: &str) -> Result<Expr, ParseError> {
    if source.trim().is_empty() {
        return Err(ParseError::Empty);
    }
    let toks = lex(source)?;
    let mut p = Parser { toks, pos: 0 };
    let e = p.expr()?;
    if *p.peek() != Tok::Eof {
        return Err(p.error("operator or end of input"));
    }
    Ok(e)
}

// ---------------------------------------------------------------------------
// Evaluation

fn domain(op: &'static str, offset: Offset, detail: impl Into<String>) -> EvalError {
    EvalError::Domain {
        op,
        offset,
        detail: detail.into(),
    }
}

fn finite(v: f64, op: &'static str, offset: Offset) -> Result<f64, EvalError> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(domain(op, offset, format!("result {v} is not finite")))
    }
}

fn coord(slice: &[f64], i: usize, name: &str, offset: Offset) -> Result<f64, EvalError> {
    slice.get(i).copied().ok_or_else(|| EvalError::Unbound {
        name: format!("{name}[{i}]"),
        offset,
    })
}

/// Evaluates `e` under `b`.
pub fn eval(e: &Expr, b: &Bindings<'_>) -> Result<f64, EvalError> {
    let at = e.offset;
    match &e.kind {
        ExprKind::Num(v) => Ok(*v),
        ExprKind::Var(v) => match v {
            Var::R => Ok(b.r),
            Var::Rp => Ok(b.rp),
            Var::Pi => Ok(std::f64::consts::PI),
            Var::X(i) => coord(b.x, *i, "x", at),
            Var::Y(i) => coord(b.y, *i, "y", at),
        },
        ExprKind::Neg(a) => Ok(-eval(a, b)?),
        ExprKind::Binary(op, l, r) => {
            let lv = eval(l, b)?;
            let rv = eval(r, b)?;
            match op {
                BinOp::Add => finite(lv + rv, "+", at),
                BinOp::Sub => finite(lv - rv, "-", at),
                BinOp::Mul => finite(lv * rv, "*", at),
                BinOp::Div => {
                    if rv == 0.0 {
                        return Err(domain("/", at, "division by zero"));
                    }
                    finite(lv / rv, "/", at)
                }
                BinOp::Pow => finite(lv.powf(rv), "^", at),
            }
        }
        ExprKind::Call(func, args) => {
            let a0 = eval(&args[0], b)?;
            match func {
                Func::Sin => Ok(a0.sin()),
                Func::Cos => Ok(a0.cos()),
                Func::Exp => finite(a0.exp(), "exp", at),
                Func::Abs => Ok(a0.abs()),
                Func::Log => {
                    if a0 <= 0.0 {
                        return Err(domain("log", at, format!("argument {a0} is not positive")));
                    }
                    Ok(a0.ln())
                }
                Func::Sqrt => {
                    if a0 < 0.0 {
                        return Err(domain("sqrt", at, format!("argument {a0} is negative")));
                    }
                    Ok(a0.sqrt())
                }
                Func::Pow => {
                    let a1 = eval(&args[1], b)?;
                    finite(a0.powf(a1), "pow", at)
                }
                Func::Min | Func::Max => {
                    let mut acc = a0;
                    for a in &args[1..] {
                        let v = eval(a, b)?;
                        acc = if *func == Func::Min { acc.min(v) } else { acc.max(v) };
                    }
                    Ok(acc)
                }
            }
        }
    }
}
