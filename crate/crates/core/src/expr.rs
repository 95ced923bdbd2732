//! Arithmetic expressions for coefficient definitions.
//!
//! Grammar (lowest to highest precedence):
//!
//! ```text
//! expr   := term (('+' | '-') term)*
//! term   := unary (('*' | '/') unary)*
//! unary  := '-' unary | power
//! power  := atom ('^' unary)?            right-associative
//! atom   := number | const | var | func '(' args ')' | '(' expr ')'
//! const  := 'pi' | 'e'
//! var    := 'x' digits | 'v' digits      (1-based)
//! func   := sin | cos | exp | log | abs | tanh | min | max
//! ```
//!
//! Unary plus is not accepted. Evaluation fails on division by zero, on
//! `log` of a non-positive argument, and whenever an intermediate value is
//! not finite.

use std::collections::HashMap;
use std::fmt;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ExprError {
    #[error("syntax error at offset {offset}: {message}")]
    Syntax { offset: usize, message: String },
    #[error("unknown identifier `{name}` at offset {offset}")]
    UnknownIdentifier { offset: usize, name: String },
    #[error("evaluation error: {message}")]
    Eval { message: String },
    #[error("unbound variable `{name}`")]
    UnboundVariable { name: String },
}

impl ExprError {
    pub fn kind(&self) -> &'static str {
        match self {
            ExprError::Syntax { .. } => "SyntaxError",
            ExprError::UnknownIdentifier { .. } => "UnknownIdentifier",
            ExprError::Eval { .. } => "EvalError",
            ExprError::UnboundVariable { .. } => "UnboundVariable",
        }
    }

    fn eval(message: impl Into<String>) -> Self {
        ExprError::Eval { message: message.into() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Var {
    /// `x{i+1}`
    State(usize),
    /// `v{i+1}`
    Control(usize),
}

impl fmt::Display for Var {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Var::State(i) => write!(f, "x{}", i + 1),
            Var::Control(i) => write!(f, "v{}", i + 1),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Const {
    Pi,
    E,
}

impl Const {
    fn value(self) -> f64 {
        match self {
            Const::Pi => std::f64::consts::PI,
            Const::E => std::f64::consts::E,
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
    fn symbol(self) -> char {
        match self {
            BinOp::Add => '+',
            BinOp::Sub => '-',
            BinOp::Mul => '*',
            BinOp::Div => '/',
            BinOp::Pow => '^',
        }
    }

    fn apply(self, a: f64, b: f64) -> Result<f64, ExprError> {
        let out = match self {
            BinOp::Add => a + b,
            BinOp::Sub => a - b,
            BinOp::Mul => a * b,
            BinOp::Div => {
                if b == 0.0 {
                    return Err(ExprError::eval("division by zero"));
                }
                a / b
            }
            BinOp::Pow => a.powf(b),
        };
        finite(out, self.symbol())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Func {
    Sin,
    Cos,
    Exp,
    Log,
    Abs,
    Tanh,
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
            "tanh" => Func::Tanh,
            "min" => Func::Min,
            "max" => Func::Max,
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            Func::Sin => "sin",
            Func::Cos => "cos",
            Func::Exp => "exp",
            Func::Log => "log",
            Func::Abs => "abs",
            Func::Tanh => "tanh",
            Func::Min => "min",
            Func::Max => "max",
        }
    }

    pub fn arity(self) -> usize {
        match self {
            Func::Min | Func::Max => 2,
            _ => 1,
        }
    }

    fn apply1(self, a: f64) -> Result<f64, ExprError> {
        let out = match self {
            Func::Sin => a.sin(),
            Func::Cos => a.cos(),
            Func::Exp => a.exp(),
            Func::Log => {
                if a <= 0.0 {
                    return Err(ExprError::eval(format!("log of non-positive value {a}")));
                }
                a.ln()
            }
            Func::Abs => a.abs(),
            Func::Tanh => a.tanh(),
            Func::Min | Func::Max => unreachable!("binary function applied to one argument"),
        };
        finite(out, self.name())
    }

    fn apply2(self, a: f64, b: f64) -> Result<f64, ExprError> {
        match self {
            Func::Min => Ok(a.min(b)),
            Func::Max => Ok(a.max(b)),
            _ => unreachable!("unary function applied to two arguments"),
        }
    }
}

fn finite(x: f64, what: impl fmt::Display) -> Result<f64, ExprError> {
    if x.is_finite() {
        Ok(x)
    } else {
        Err(ExprError::eval(format!("`{what}` produced non-finite value {x}")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Num(f64),
    Const(Const),
    Var(Var),
    Neg(Box<Expr>),
    Bin(BinOp, Box<Expr>, Box<Expr>),
    Call(Func, Vec<Expr>),
}

/// Variable values for evaluation: `x` holds `x1, x2, ...`, `v` holds `v1, ...`.
#[derive(Debug, Clone, Copy, Default)]
pub struct Env<'a> {
    pub x: &'a [f64],
    pub v: &'a [f64],
}

impl<'a> Env<'a> {
    pub fn new(x: &'a [f64], v: &'a [f64]) -> Self {
        Env { x, v }
    }

    fn lookup(&self, var: Var) -> Result<f64, ExprError> {
        let slot = match var {
            Var::State(i) => self.x.get(i),
            Var::Control(i) => self.v.get(i),
        };
        slot.copied().ok_or_else(|| ExprError::UnboundVariable { name: var.to_string() })
    }
}

impl Expr {
    pub fn eval(&self, env: &Env<'_>) -> Result<f64, ExprError> {
        match self {
            Expr::Num(x) => finite(*x, "literal"),
            Expr::Const(c) => Ok(c.value()),
            Expr::Var(v) => env.lookup(*v),
            Expr::Neg(a) => Ok(-a.eval(env)?),
            Expr::Bin(op, a, b) => {
                let a = a.eval(env)?;
                let b = b.eval(env)?;
                op.apply(a, b)
            }
            Expr::Call(f, args) => match args.as_slice() {
                [a] => f.apply1(a.eval(env)?),
                [a, b] => {
                    let a = a.eval(env)?;
                    let b = b.eval(env)?;
                    f.apply2(a, b)
                }
                _ => unreachable!("arity checked at parse time"),
            },
        }
    }

    /// Visit every variable referenced by the expression.
    pub fn for_each_var(&self, f: &mut impl FnMut(Var)) {
        match self {
            Expr::Num(_) | Expr::Const(_) => {}
            Expr::Var(v) => f(*v),
            Expr::Neg(a) => a.for_each_var(f),
            Expr::Bin(_, a, b) => {
                a.for_each_var(f);
                b.for_each_var(f);
            }
            Expr::Call(_, args) => args.iter().for_each(|a| a.for_each_var(f)),
        }
    }

    /// Largest state and control index referenced, as counts (`x3` gives 3).
    pub fn arity(&self) -> (usize, usize) {
        let (mut nx, mut nv) = (0, 0);
        self.for_each_var(&mut |v| match v {
            Var::State(i) => nx = nx.max(i + 1),
            Var::Control(i) => nv = nv.max(i + 1),
        });
        (nx, nv)
    }

    pub fn depends_on_control(&self) -> bool {
        self.arity().1 > 0
    }

    /// Flatten into a postfix program for repeated evaluation.
    pub fn compile(&self) -> Program {
        let mut ops = Vec::new();
        emit(self, &mut ops);
        let mut depth = 0usize;
        let mut max_depth = 0usize;
        for op in &ops {
            match op {
                Op::Push(_) | Op::Load(_) => depth += 1,
                Op::Neg | Op::Call1(_) => {}
                Op::Bin(_) | Op::Call2(_) => depth -= 1,
            }
            max_depth = max_depth.max(depth);
        }
        Program { ops, max_depth }
    }
}

impl fmt::Display for Expr {
    /// Fully parenthesized form; parsing it back yields an expression that
    /// evaluates identically.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expr::Num(x) if x.is_sign_negative() => write!(f, "(-{:?})", -x),
            Expr::Num(x) => write!(f, "{x:?}"),
            Expr::Const(Const::Pi) => f.write_str("pi"),
            Expr::Const(Const::E) => f.write_str("e"),
            Expr::Var(v) => write!(f, "{v}"),
            Expr::Neg(a) => write!(f, "(-{a})"),
            Expr::Bin(op, a, b) => write!(f, "({a} {} {b})", op.symbol()),
            Expr::Call(func, args) => {
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

/// Evaluate with named bindings (`"x1" -> 0.5`, `"v1" -> 1.0`, ...).
pub fn eval(expr: &Expr, bindings: &HashMap<String, f64>) -> Result<f64, ExprError> {
    let (nx, nv) = expr.arity();
    let fetch = |prefix: char, n: usize| -> Result<Vec<f64>, ExprError> {
        (1..=n)
            .map(|i| {
                let name = format!("{prefix}{i}");
                match bindings.get(&name) {
                    Some(x) => Ok(*x),
                    // unused lower indices may be absent
                    None => Ok(f64::NAN),
                }
            })
            .collect()
    };
    let x = fetch('x', nx)?;
    let v = fetch('v', nv)?;
    let mut missing = None;
    expr.for_each_var(&mut |var| {
        let name = var.to_string();
        if missing.is_none() && !bindings.contains_key(&name) {
            missing = Some(name);
        }
    });
    if let Some(name) = missing {
        return Err(ExprError::UnboundVariable { name });
    }
    expr.eval(&Env::new(&x, &v))
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Op {
    Push(f64),
    Load(Var),
    Neg,
    Bin(BinOp),
    Call1(Func),
    Call2(Func),
}

fn emit(e: &Expr, ops: &mut Vec<Op>) {
    match e {
        Expr::Num(x) => ops.push(Op::Push(*x)),
        Expr::Const(c) => ops.push(Op::Push(c.value())),
        Expr::Var(v) => ops.push(Op::Load(*v)),
        Expr::Neg(a) => {
            emit(a, ops);
            ops.push(Op::Neg);
        }
        Expr::Bin(op, a, b) => {
            emit(a, ops);
            emit(b, ops);
            ops.push(Op::Bin(*op));
        }
        Expr::Call(f, args) => {
            for a in args {
                emit(a, ops);
            }
            ops.push(if args.len() == 2 { Op::Call2(*f) } else { Op::Call1(*f) });
        }
    }
}

/// Postfix form of an [`Expr`]. Same results and errors as [`Expr::eval`].
#[derive(Debug, Clone, PartialEq)]
pub struct Program {
    ops: Vec<Op>,
    max_depth: usize,
}

const INLINE_STACK: usize = 32;

impl Program {
    pub fn eval(&self, env: &Env<'_>) -> Result<f64, ExprError> {
        if self.max_depth <= INLINE_STACK {
            let mut stack = [0.0f64; INLINE_STACK];
            self.run(env, &mut stack)
        } else {
            let mut stack = vec![0.0f64; self.max_depth];
            self.run(env, &mut stack)
        }
    }

    fn run(&self, env: &Env<'_>, stack: &mut [f64]) -> Result<f64, ExprError> {
        let mut sp = 0usize;
        for op in &self.ops {
            match *op {
                Op::Push(x) => {
                    stack[sp] = finite(x, "literal")?;
                    sp += 1;
                }
                Op::Load(v) => {
                    stack[sp] = env.lookup(v)?;
                    sp += 1;
                }
                Op::Neg => stack[sp - 1] = -stack[sp - 1],
                Op::Bin(b) => {
                    sp -= 1;
                    stack[sp - 1] = b.apply(stack[sp - 1], stack[sp])?;
                }
                Op::Call1(f) => stack[sp - 1] = f.apply1(stack[sp - 1])?,
                Op::Call2(f) => {
                    sp -= 1;
                    stack[sp - 1] = f.apply2(stack[sp - 1], stack[sp])?;
                }
            }
        }
        Ok(stack[0])
    }
}

// ---------------------------------------------------------------------------
// lexer

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Num(f64),
    Ident(String),
    Op(char),
    LParen,
    RParen,
    Comma,
    End,
}

fn lex(src: &str) -> Result<Vec<(Tok, usize)>, ExprError> {
    let bytes = src.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i];
        if c.is_ascii_whitespace() {
            i += 1;
            continue;
        }
        let start = i;
        if c.is_ascii_digit() || c == b'.' {
            while i < bytes.len() && (bytes[i].is_ascii_digit() || bytes[i] == b'.') {
                i += 1;
            }
            if i < bytes.len() && (bytes[i] == b'e' || bytes[i] == b'E') {
                let mut j = i + 1;
                if j < bytes.len() && (bytes[j] == b'+' || bytes[j] == b'-') {
                    j += 1;
                }
                if j < bytes.len() && bytes[j].is_ascii_digit() {
                    while j < bytes.len() && bytes[j].is_ascii_digit() {
                        j += 1;
                    }
                    i = j;
                }
            }
            let text = &src[start..i];
            let value: f64 = text
                .parse()
                .map_err(|_| ExprError::Syntax { offset: start, message: format!("malformed number `{text}`") })?;
            out.push((Tok::Num(value), start));
        } else if c.is_ascii_alphabetic() || c == b'_' {
            while i < bytes.len() && (bytes[i].is_ascii_alphanumeric() || bytes[i] == b'_') {
                i += 1;
            }
            out.push((Tok::Ident(src[start..i].to_string()), start));
        } else {
            let tok = match c {
                b'+' | b'-' | b'*' | b'/' | b'^' => Tok::Op(c as char),
                b'(' => Tok::LParen,
                b')' => Tok::RParen,
                b',' => Tok::Comma,
                _ => {
                    let ch = src[start..].chars().next().unwrap_or('?');
                    return Err(ExprError::Syntax { offset: start, message: format!("unexpected character `{ch}`") });
                }
            };
            out.push((tok, start));
            i += 1;
        }
    }
    out.push((Tok::End, src.len()));
    Ok(out)
}

// ---------------------------------------------------------------------------
// parser: precedence climbing

const BP_UNARY: u8 = 5;

fn infix_bp(op: char) -> Option<(u8, u8)> {
    match op {
        '+' | '-' => Some((1, 2)),
        '*' | '/' => Some((3, 4)),
        '^' => Some((7, 6)),
        _ => None,
    }
}

struct Parser {
    toks: Vec<(Tok, usize)>,
    pos: usize,
}

impl Parser {
    fn peek(&self) -> &(Tok, usize) {
        &self.toks[self.pos]
    }

    fn next(&mut self) -> (Tok, usize) {
        let t = self.toks[self.pos].clone();
        if self.pos + 1 < self.toks.len() {
            self.pos += 1;
        }
        t
    }

    fn unexpected(tok: &Tok, offset: usize) -> ExprError {
        let message = match tok {
            Tok::End => "unexpected end of input".to_string(),
            Tok::RParen => "unbalanced `)`".to_string(),
            other => format!("unexpected token {other:?}"),
        };
        ExprError::Syntax { offset, message }
    }

    fn expect_rparen(&mut self, open_at: usize) -> Result<(), ExprError> {
        match self.next() {
            (Tok::RParen, _) => Ok(()),
            (Tok::End, off) => {
                Err(ExprError::Syntax { offset: off, message: format!("unbalanced `(` opened at offset {open_at}") })
            }
            (t, off) => Err(Self::unexpected(&t, off)),
        }
    }

    fn expr(&mut self, min_bp: u8) -> Result<Expr, ExprError> {
        let mut lhs = self.prefix()?;
        while let (Tok::Op(c), _) = self.peek() {
            let op = *c;
            let (lbp, rbp) = infix_bp(op).expect("lexer only emits known operators");
            if lbp < min_bp {
                break;
            }
            self.next();
            let rhs = self.expr(rbp)?;
            let bin = match op {
                '+' => BinOp::Add,
                '-' => BinOp::Sub,
                '*' => BinOp::Mul,
                '/' => BinOp::Div,
                _ => BinOp::Pow,
            };
            lhs = Expr::Bin(bin, Box::new(lhs), Box::new(rhs));
        }
        Ok(lhs)
    }

    fn prefix(&mut self) -> Result<Expr, ExprError> {
        let (tok, offset) = self.next();
        match tok {
            Tok::Num(x) => Ok(Expr::Num(x)),
            Tok::Op('-') => Ok(Expr::Neg(Box::new(self.expr(BP_UNARY)?))),
            Tok::LParen => {
                let inner = self.expr(0)?;
                self.expect_rparen(offset)?;
                Ok(inner)
            }
            Tok::Ident(name) => self.ident(name, offset),
            other => Err(Self::unexpected(&other, offset)),
        }
    }

    fn ident(&mut self, name: String, offset: usize) -> Result<Expr, ExprError> {
        if let Some(func) = Func::from_name(&name) {
            let open = match self.next() {
                (Tok::LParen, off) => off,
                (t, off) => {
                    return Err(ExprError::Syntax {
                        offset: off,
                        message: format!("expected `(` after `{name}`, found {t:?}"),
                    })
                }
            };
            let mut args = vec![self.expr(0)?];
            while let (Tok::Comma, _) = self.peek() {
                self.next();
                args.push(self.expr(0)?);
            }
            self.expect_rparen(open)?;
            if args.len() != func.arity() {
                return Err(ExprError::Syntax {
                    offset,
                    message: format!("`{name}` takes {} argument(s), got {}", func.arity(), args.len()),
                });
            }
            return Ok(Expr::Call(func, args));
        }
        match name.as_str() {
            "pi" => return Ok(Expr::Const(Const::Pi)),
            "e" => return Ok(Expr::Const(Const::E)),
            _ => {}
        }
        let var = parse_var(&name).ok_or(ExprError::UnknownIdentifier { offset, name: name.clone() })?;
        Ok(Expr::Var(var))
    }
}

fn parse_var(name: &str) -> Option<Var> {
    let (head, digits) = name.split_at(1);
    if digits.is_empty() || !digits.bytes().all(|b| b.is_ascii_digit()) || digits.starts_with('0') {
        return None;
    }
    let idx: usize = digits.parse().ok()?;
    match head {
        "x" => Some(Var::State(idx - 1)),
        "v" => Some(Var::Control(idx - 1)),
        _ => None,
    }
}

pub fn parse(source: &str) -> Result<Expr, ExprError> {
    let toks = lex(source)?;
    let mut p = Parser { toks, pos: 0 };
    let e = p.expr(0)?;
    match p.peek().clone() {
        (Tok::End, _) => Ok(e),
        (t, off) => Err(Parser::unexpected(&t, off)),
    }
}
