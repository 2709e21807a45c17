//! Scalar expressions: lexer, precedence-climbing parser, evaluator, printer.
//!
//! Binding strength, loosest first: `+ -`, `* /`, unary `-`, `^`. Power is
//! right-associative and its exponent may carry its own sign, so `-x1^2 = -(x1^2)`
//! and `2^-1 = 0.5`.

use std::fmt;

use crate::error::{NespError, Result};

/// Nesting limit; deeper input is rejected rather than risking the stack.
const MAX_DEPTH: usize = 200;

#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Num(f64),
    Var(Var),
    Neg(Box<Expr>),
    Bin(BinOp, Box<Expr>, Box<Expr>),
    Call(Func, Vec<Expr>),
}

/// Variables; slow and fast indices are 0-based internally and 1-based in text.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Var {
    X(usize),
    Y(usize),
    T,
    Eps,
    Param(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
    Pow,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Func {
    Sin,
    Cos,
    Tan,
    Exp,
    Log,
    Sqrt,
    Atan,
    Abs,
    Pow,
}

impl Func {
    pub const ALL: [Func; 9] =
        [Func::Sin, Func::Cos, Func::Tan, Func::Exp, Func::Log, Func::Sqrt, Func::Atan, Func::Abs, Func::Pow];

    pub fn name(self) -> &'static str {
        match self {
            Func::Sin => "sin",
            Func::Cos => "cos",
            Func::Tan => "tan",
            Func::Exp => "exp",
            Func::Log => "log",
            Func::Sqrt => "sqrt",
            Func::Atan => "atan",
            Func::Abs => "abs",
            Func::Pow => "pow",
        }
    }

    pub fn from_name(s: &str) -> Option<Func> {
        Func::ALL.iter().copied().find(|f| f.name() == s)
    }

    pub fn arity(self) -> usize {
        if self == Func::Pow {
            2
        } else {
            1
        }
    }
}

/// Names that cannot be used as parameters.
pub fn is_reserved(name: &str) -> bool {
    Func::from_name(name).is_some()
        || matches!(name, "t" | "eps" | "pi" | "x" | "y")
        || split_indexed(name).is_some()
}

fn split_indexed(name: &str) -> Option<(char, &str)> {
    let mut ch = name.chars();
    let c = ch.next()?;
    let rest = ch.as_str();
    if (c == 'x' || c == 'y') && !rest.is_empty() && rest.bytes().all(|b| b.is_ascii_digit()) {
        Some((c, rest))
    } else {
        None
    }
}

/// Which identifiers an expression may use.
#[derive(Debug, Clone)]
pub struct Scope {
    pub n_x: Option<usize>,
    pub n_y: Option<usize>,
    pub allow_x: bool,
    pub allow_y: bool,
    pub allow_t: bool,
    pub allow_eps: bool,
    /// `None` accepts any free identifier as a parameter.
    pub params: Option<Vec<String>>,
}

impl Scope {
    pub fn permissive() -> Self {
        Scope { n_x: None, n_y: None, allow_x: true, allow_y: true, allow_t: true, allow_eps: true, params: None }
    }

    /// Constant expressions over the given parameters.
    pub fn constants(params: &[String]) -> Self {
        Scope {
            n_x: Some(0),
            n_y: Some(0),
            allow_x: false,
            allow_y: false,
            allow_t: false,
            allow_eps: false,
            params: Some(params.to_vec()),
        }
    }

    pub fn field(n_x: usize, n_y: usize, params: &[String]) -> Self {
        Scope {
            n_x: Some(n_x),
            n_y: Some(n_y),
            allow_x: true,
            allow_y: true,
            allow_t: true,
            allow_eps: true,
            params: Some(params.to_vec()),
        }
    }
}

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
    End,
}

fn describe(t: &Tok) -> String {
    match t {
        Tok::Num(v) => format!("number {v}"),
        Tok::Ident(s) => format!("identifier '{s}'"),
        Tok::End => "end of expression".into(),
        Tok::Plus => "'+'".into(),
        Tok::Minus => "'-'".into(),
        Tok::Star => "'*'".into(),
        Tok::Slash => "'/'".into(),
        Tok::Caret => "'^'".into(),
        Tok::LParen => "'('".into(),
        Tok::RParen => "')'".into(),
        Tok::LBracket => "'['".into(),
        Tok::RBracket => "']'".into(),
        Tok::Comma => "','".into(),
    }
}

fn lex(src: &str, line: usize, col0: usize) -> Result<Vec<(Tok, usize)>> {
    let mut out = Vec::new();
    let chars: Vec<char> = src.chars().collect();
    let mut i = 0;
    let err = |c: usize, msg: String| NespError::Parse { line, col: col0 + c, msg };
    while i < chars.len() {
        let c = chars[i];
        let start = i;
        if c.is_whitespace() {
            i += 1;
            continue;
        }
        if c.is_ascii_digit() || (c == '.' && chars.get(i + 1).is_some_and(|d| d.is_ascii_digit())) {
            while i < chars.len() && (chars[i].is_ascii_digit() || chars[i] == '.') {
                i += 1;
            }
            if i < chars.len() && (chars[i] == 'e' || chars[i] == 'E') {
                let mut j = i + 1;
                if j < chars.len() && (chars[j] == '+' || chars[j] == '-') {
                    j += 1;
                }
                if j < chars.len() && chars[j].is_ascii_digit() {
                    while j < chars.len() && chars[j].is_ascii_digit() {
                        j += 1;
                    }
                    i = j;
                } else {
                    return Err(err(i, "malformed exponent in number".into()));
                }
            }
            let text: String = chars[start..i].iter().collect();
            let v: f64 = text.parse().map_err(|_| err(start, format!("malformed number '{text}'")))?;
            if !v.is_finite() {
                return Err(err(start, format!("number '{text}' is out of range")));
            }
            out.push((Tok::Num(v), col0 + start));
            continue;
        }
        if c.is_alphabetic() || c == '_' {
            while i < chars.len() && (chars[i].is_alphanumeric() || chars[i] == '_') {
                i += 1;
            }
            out.push((Tok::Ident(chars[start..i].iter().collect()), col0 + start));
            continue;
        }
        let t = match c {
            '+' => Tok::Plus,
            '-' => Tok::Minus,
            '*' => Tok::Star,
            '/' => Tok::Slash,
            '^' => Tok::Caret,
            '(' => Tok::LParen,
            ')' => Tok::RParen,
            '[' => Tok::LBracket,
            ']' => Tok::RBracket,
            ',' => Tok::Comma,
            _ => return Err(err(i, format!("unexpected character '{c}'"))),
        };
        out.push((t, col0 + i));
        i += 1;
    }
    out.push((Tok::End, col0 + chars.len()));
    Ok(out)
}

struct Parser<'a> {
    toks: Vec<(Tok, usize)>,
    pos: usize,
    line: usize,
    scope: &'a Scope,
    depth: usize,
}

impl<'a> Parser<'a> {
    fn peek(&self) -> &Tok {
        &self.toks[self.pos].0
    }

    fn col(&self) -> usize {
        self.toks[self.pos].1
    }

    fn bump(&mut self) -> Tok {
        let t = self.toks[self.pos].0.clone();
        if self.pos + 1 < self.toks.len() {
            self.pos += 1;
        }
        t
    }

    fn err(&self, col: usize, msg: impl Into<String>) -> NespError {
        NespError::Parse { line: self.line, col, msg: msg.into() }
    }

    fn enter(&mut self) -> Result<()> {
        self.depth += 1;
        if self.depth > MAX_DEPTH {
            return Err(self.err(self.col(), "expression nested too deeply"));
        }
        Ok(())
    }

    fn expect(&mut self, t: Tok) -> Result<()> {
        if *self.peek() == t {
            self.bump();
            Ok(())
        } else {
            Err(self.err(self.col(), format!("expected {}, found {}", describe(&t), describe(self.peek()))))
        }
    }

    fn sum(&mut self) -> Result<Expr> {
        self.enter()?;
        let mut lhs = self.product()?;
        loop {
            let op = match self.peek() {
                Tok::Plus => BinOp::Add,
                Tok::Minus => BinOp::Sub,
                _ => break,
            };
            self.bump();
            let rhs = self.product()?;
            lhs = Expr::Bin(op, Box::new(lhs), Box::new(rhs));
        }
        self.depth -= 1;
        Ok(lhs)
    }

    fn product(&mut self) -> Result<Expr> {
        let mut lhs = self.unary()?;
        loop {
            let op = match self.peek() {
                Tok::Star => BinOp::Mul,
                Tok::Slash => BinOp::Div,
                _ => break,
            };
            self.bump();
            let rhs = self.unary()?;
            lhs = Expr::Bin(op, Box::new(lhs), Box::new(rhs));
        }
        Ok(lhs)
    }

    fn unary(&mut self) -> Result<Expr> {
        self.enter()?;
        let e = match self.peek() {
            Tok::Minus => {
                self.bump();
                Expr::Neg(Box::new(self.unary()?))
            }
            Tok::Plus => {
                self.bump();
                self.unary()?
            }
            _ => self.power()?,
        };
        self.depth -= 1;
        Ok(e)
    }

    fn power(&mut self) -> Result<Expr> {
        self.enter()?;
        let base = self.atom()?;
        let e = if *self.peek() == Tok::Caret {
            self.bump();
            let exp = self.exponent()?;
            Expr::Bin(BinOp::Pow, Box::new(base), Box::new(exp))
        } else {
            base
        };
        self.depth -= 1;
        Ok(e)
    }

    fn exponent(&mut self) -> Result<Expr> {
        self.enter()?;
        let e = match self.peek() {
            Tok::Minus => {
                self.bump();
                Expr::Neg(Box::new(self.exponent()?))
            }
            Tok::Plus => {
                self.bump();
                self.exponent()?
            }
            _ => self.power()?,
        };
        self.depth -= 1;
        Ok(e)
    }

    fn index(&mut self) -> Result<usize> {
        let col = self.col();
        match self.bump() {
            Tok::Num(v) if v.fract() == 0.0 && v >= 1.0 && v <= 1e6 => Ok(v as usize),
            t => Err(self.err(col, format!("expected a positive integer index, found {}", describe(&t)))),
        }
    }

    fn var(&mut self, kind: char, idx: usize, col: usize) -> Result<Expr> {
        let (allowed, bound) = if kind == 'x' {
            (self.scope.allow_x, self.scope.n_x)
        } else {
            (self.scope.allow_y, self.scope.n_y)
        };
        if !allowed {
            return Err(self.err(col, format!("variable '{kind}{idx}' is not allowed here")));
        }
        if idx == 0 {
            return Err(self.err(col, format!("indices start at 1, found '{kind}0'")));
        }
        if let Some(n) = bound {
            if idx > n {
                return Err(self.err(col, format!("'{kind}{idx}' exceeds the declared dimension {n}")));
            }
        }
        Ok(Expr::Var(if kind == 'x' { Var::X(idx - 1) } else { Var::Y(idx - 1) }))
    }

    fn atom(&mut self) -> Result<Expr> {
        let col = self.col();
        match self.bump() {
            Tok::Num(v) => Ok(Expr::Num(v)),
            Tok::LParen => {
                let e = self.sum()?;
                self.expect(Tok::RParen)?;
                Ok(e)
            }
            Tok::Ident(name) => {
                if let Some(f) = Func::from_name(&name) {
                    if *self.peek() != Tok::LParen {
                        return Err(self.err(self.col(), format!("function '{name}' needs an argument list")));
                    }
                    self.bump();
                    let mut args = vec![self.sum()?];
                    while *self.peek() == Tok::Comma {
                        self.bump();
                        args.push(self.sum()?);
                    }
                    self.expect(Tok::RParen)?;
                    if args.len() != f.arity() {
                        return Err(self.err(
                            col,
                            format!("'{name}' takes {} argument(s), got {}", f.arity(), args.len()),
                        ));
                    }
                    return Ok(Expr::Call(f, args));
                }
                if (name == "x" || name == "y") && *self.peek() == Tok::LBracket {
                    self.bump();
                    let i = self.index()?;
                    self.expect(Tok::RBracket)?;
                    return self.var(name.chars().next().unwrap(), i, col);
                }
                if let Some((c, digits)) = split_indexed(&name) {
                    let i: usize = digits.parse().ok().filter(|&i: &usize| i <= 1_000_000).ok_or_else(|| {
                        self.err(col, format!("index in '{name}' is out of range"))
                    })?;
                    return self.var(c, i, col);
                }
                match name.as_str() {
                    "t" if self.scope.allow_t => Ok(Expr::Var(Var::T)),
                    "eps" if self.scope.allow_eps => Ok(Expr::Var(Var::Eps)),
                    "t" | "eps" => Err(self.err(col, format!("variable '{name}' is not allowed here"))),
                    "pi" => Ok(Expr::Num(std::f64::consts::PI)),
                    _ => match &self.scope.params {
                        Some(p) if !p.iter().any(|q| *q == name) => {
                            Err(self.err(col, format!("unknown identifier '{name}'")))
                        }
                        _ if name == "x" || name == "y" => {
                            Err(self.err(col, format!("'{name}' needs an index")))
                        }
                        _ => Ok(Expr::Var(Var::Param(name))),
                    },
                }
            }
            t => Err(self.err(col, format!("unexpected {}", describe(&t)))),
        }
    }
}

/// Parse with any identifier accepted as a parameter; positions are reported on line 1.
pub fn parse_expr(src: &str) -> Result<Expr> {
    parse_expr_in(src, &Scope::permissive(), 1, 1)
}

/// Parse against a scope; `line`/`col` locate `src` inside a larger document.
pub fn parse_expr_in(src: &str, scope: &Scope, line: usize, col: usize) -> Result<Expr> {
    let toks = lex(src, line, col)?;
    let mut p = Parser { toks, pos: 0, line, scope, depth: 0 };
    if *p.peek() == Tok::End {
        return Err(p.err(p.col(), "empty expression"));
    }
    let e = p.sum()?;
    if *p.peek() != Tok::End {
        return Err(p.err(p.col(), format!("unexpected {} after expression", describe(p.peek()))));
    }
    Ok(e)
}

/// Variable bindings for evaluation.
#[derive(Debug, Clone, Copy)]
pub struct Env<'a> {
    pub x: &'a [f64],
    pub y: &'a [f64],
    pub t: f64,
    pub eps: f64,
    pub params: &'a [(String, f64)],
}

impl<'a> Env<'a> {
    pub fn new(x: &'a [f64], y: &'a [f64], t: f64, eps: f64) -> Self {
        Env { x, y, t, eps, params: &[] }
    }
}

fn domain(msg: String) -> NespError {
    NespError::Eval(msg)
}

impl Expr {
    pub fn num(v: f64) -> Expr {
        Expr::Num(v)
    }

    pub fn eval(&self, env: &Env) -> Result<f64> {
        let v = match self {
            Expr::Num(v) => *v,
            Expr::Var(v) => match v {
                Var::X(i) => *env.x.get(*i).ok_or_else(|| domain(format!("unbound variable x{}", i + 1)))?,
                Var::Y(i) => *env.y.get(*i).ok_or_else(|| domain(format!("unbound variable y{}", i + 1)))?,
                Var::T => env.t,
                Var::Eps => env.eps,
                Var::Param(n) => {
                    env.params.iter().find(|(k, _)| k == n).map(|p| p.1).ok_or_else(|| {
                        domain(format!("unbound parameter '{n}'"))
                    })?
                }
            },
            Expr::Neg(a) => -a.eval(env)?,
            Expr::Bin(op, a, b) => {
                let (a, b) = (a.eval(env)?, b.eval(env)?);
                match op {
                    BinOp::Add => a + b,
                    BinOp::Sub => a - b,
                    BinOp::Mul => a * b,
                    BinOp::Div => {
                        if b == 0.0 {
                            return Err(domain("division by zero".into()));
                        }
                        a / b
                    }
                    BinOp::Pow => pow(a, b)?,
                }
            }
            Expr::Call(f, args) => {
                let a = args[0].eval(env)?;
                match f {
                    Func::Sin => a.sin(),
                    Func::Cos => a.cos(),
                    Func::Tan => a.tan(),
                    Func::Exp => a.exp(),
                    Func::Log => {
                        if a <= 0.0 {
                            return Err(domain(format!("log of non-positive value {a}")));
                        }
                        a.ln()
                    }
                    Func::Sqrt => {
                        if a < 0.0 {
                            return Err(domain(format!("sqrt of negative value {a}")));
                        }
                        a.sqrt()
                    }
                    Func::Atan => a.atan(),
                    Func::Abs => a.abs(),
                    Func::Pow => pow(a, args[1].eval(env)?)?,
                }
            }
        };
        if !v.is_finite() {
            return Err(domain(format!("non-finite value in '{self}'")));
        }
        Ok(v)
    }

    /// Replace parameters by their values; unknown names are left in place.
    pub fn bind(&self, params: &[(String, f64)]) -> Expr {
        match self {
            Expr::Var(Var::Param(n)) => match params.iter().find(|(k, _)| k == n) {
                Some((_, v)) => Expr::Num(*v),
                None => self.clone(),
            },
            Expr::Num(_) | Expr::Var(_) => self.clone(),
            Expr::Neg(a) => Expr::Neg(Box::new(a.bind(params))),
            Expr::Bin(op, a, b) => Expr::Bin(*op, Box::new(a.bind(params)), Box::new(b.bind(params))),
            Expr::Call(f, args) => Expr::Call(*f, args.iter().map(|a| a.bind(params)).collect()),
        }
    }

    /// Replace every variable for which `f` returns a tree.
    pub fn substitute(&self, f: &dyn Fn(&Var) -> Option<Expr>) -> Expr {
        match self {
            Expr::Var(v) => f(v).unwrap_or_else(|| self.clone()),
            Expr::Num(_) => self.clone(),
            Expr::Neg(a) => Expr::Neg(Box::new(a.substitute(f))),
            Expr::Bin(op, a, b) => Expr::Bin(*op, Box::new(a.substitute(f)), Box::new(b.substitute(f))),
            Expr::Call(fun, args) => Expr::Call(*fun, args.iter().map(|a| a.substitute(f)).collect()),
        }
    }

    /// Visit every variable.
    pub fn for_each_var(&self, f: &mut dyn FnMut(&Var)) {
        match self {
            Expr::Var(v) => f(v),
            Expr::Num(_) => {}
            Expr::Neg(a) => a.for_each_var(f),
            Expr::Bin(_, a, b) => {
                a.for_each_var(f);
                b.for_each_var(f);
            }
            Expr::Call(_, args) => args.iter().for_each(|a| a.for_each_var(f)),
        }
    }

    pub fn is_zero(&self) -> bool {
        matches!(self, Expr::Num(v) if *v == 0.0)
    }

    /// Lisp-style tree, used by the golden fixtures.
    pub fn to_sexpr(&self) -> String {
        match self {
            Expr::Num(v) => format_num(*v),
            Expr::Var(v) => var_name(v),
            Expr::Neg(a) => format!("(neg {})", a.to_sexpr()),
            Expr::Bin(op, a, b) => format!("({} {} {})", op_str(*op), a.to_sexpr(), b.to_sexpr()),
            Expr::Call(f, args) => {
                let inner: Vec<String> = args.iter().map(|a| a.to_sexpr()).collect();
                format!("({} {})", f.name(), inner.join(" "))
            }
        }
    }

    fn prec(&self) -> u8 {
        match self {
            Expr::Bin(BinOp::Add | BinOp::Sub, ..) => 1,
            Expr::Bin(BinOp::Mul | BinOp::Div, ..) => 2,
            Expr::Neg(_) => 3,
            Expr::Bin(BinOp::Pow, ..) => 4,
            _ => 5,
        }
    }
}

fn pow(a: f64, b: f64) -> Result<f64> {
    let v = if b.fract() == 0.0 && b.abs() <= i32::MAX as f64 { a.powi(b as i32) } else { a.powf(b) };
    if !v.is_finite() {
        return Err(domain(format!("{a}^{b} is not a finite real number")));
    }
    Ok(v)
}

fn op_str(op: BinOp) -> &'static str {
    match op {
        BinOp::Add => "+",
        BinOp::Sub => "-",
        BinOp::Mul => "*",
        BinOp::Div => "/",
        BinOp::Pow => "^",
    }
}

fn var_name(v: &Var) -> String {
    match v {
        Var::X(i) => format!("x{}", i + 1),
        Var::Y(i) => format!("y{}", i + 1),
        Var::T => "t".into(),
        Var::Eps => "eps".into(),
        Var::Param(n) => n.clone(),
    }
}

/// Shortest text that reads back to the same `f64`.
pub fn format_num(v: f64) -> String {
    let s = format!("{v:?}");
    s.strip_suffix(".0").map(str::to_string).unwrap_or(s)
}

fn write_child(f: &mut fmt::Formatter<'_>, e: &Expr, paren: bool) -> fmt::Result {
    if paren {
        write!(f, "({e})")
    } else {
        write!(f, "{e}")
    }
}

/// Minimal-parenthesis printer; the output reparses to an identical tree.
impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expr::Num(v) if *v < 0.0 || (*v == 0.0 && v.is_sign_negative()) => write!(f, "({})", format_num(*v)),
            Expr::Num(v) => write!(f, "{}", format_num(*v)),
            Expr::Var(v) => write!(f, "{}", var_name(v)),
            Expr::Neg(a) => {
                write!(f, "-")?;
                write_child(f, a, a.prec() < 3)
            }
            Expr::Bin(op, a, b) => {
                let p = self.prec();
                let (lp, rp) = match op {
                    BinOp::Pow => (a.prec() <= 4, b.prec() < 3),
                    _ => (a.prec() < p, b.prec() <= p),
                };
                write_child(f, a, lp)?;
                write!(f, "{}", if *op == BinOp::Pow { "^" } else { match op {
                    BinOp::Add => " + ",
                    BinOp::Sub => " - ",
                    BinOp::Mul => "*",
                    _ => "/",
                } })?;
                write_child(f, b, rp)
            }
            Expr::Call(func, args) => {
                write!(f, "{}(", func.name())?;
                for (i, a) in args.iter().enumerate() {
                    if i > 0 {
                        write!(f, ", ")?;
                    }
                    write!(f, "{a}")?;
                }
                write!(f, ")")
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::PI;

    fn ev(src: &str, x: &[f64], y: &[f64], t: f64, eps: f64) -> f64 {
        parse_expr(src).unwrap().eval(&Env::new(x, y, t, eps)).unwrap()
    }

    #[test]
    fn precedence_examples() {
        assert_eq!(ev("2+3*4", &[], &[], 0.0, 0.0), 14.0);
        assert_eq!(ev("-x1^2", &[2.0], &[], 0.0, 0.0), -4.0);
        assert_eq!(ev("2^3^2", &[], &[], 0.0, 0.0), 512.0);
        assert_eq!(ev("2^-1", &[], &[], 0.0, 0.0), 0.5);
        assert_eq!(ev("8/4/2", &[], &[], 0.0, 0.0), 1.0);
        assert_eq!(ev("1-2-3", &[], &[], 0.0, 0.0), -4.0);
        assert!((ev("eps*y1", &[], &[3.0], 0.0, 0.1) - 0.3).abs() < 1e-16);
        assert!((ev("atan(exp(t))", &[], &[], 0.0, 0.0) - PI / 4.0).abs() < 1e-16);
        assert_eq!(ev("x[2] + y[1]", &[1.0, 5.0], &[2.0], 0.0, 0.0), 7.0);
    }

    #[test]
    fn pythagorean_identity() {
        let e = parse_expr("sin(x1)^2 + cos(x1)^2").unwrap();
        for k in 0..50 {
            let x = -10.0 + 0.4 * k as f64 + 0.013;
            assert!((e.eval(&Env::new(&[x], &[], 0.0, 0.0)).unwrap() - 1.0).abs() < 1e-14);
        }
    }

    #[test]
    fn domain_errors_are_reported() {
        for src in ["log(0)", "log(-1)", "sqrt(-2)", "1/0", "(-8)^0.5", "exp(1000)"] {
            let r = parse_expr(src).unwrap().eval(&Env::new(&[], &[], 0.0, 0.0));
            assert!(matches!(r, Err(NespError::Eval(_))), "{src}");
        }
        let r = parse_expr("x3").unwrap().eval(&Env::new(&[1.0], &[], 0.0, 0.0));
        assert!(matches!(r, Err(NespError::Eval(_))));
    }

    #[test]
    fn syntax_errors_have_positions() {
        match parse_expr("1 + * 2") {
            Err(NespError::Parse { line: 1, col: 5, .. }) => {}
            other => panic!("{other:?}"),
        }
        assert!(parse_expr("sin 1").is_err());
        assert!(parse_expr("pow(1)").is_err());
        assert!(parse_expr("(1 + 2").is_err());
        assert!(parse_expr("x0").is_err());
        assert!(parse_expr("1e").is_err());
        assert!(parse_expr("").is_err());
        assert!(parse_expr("3 $").is_err());
        let deep = "(".repeat(10_000) + "1" + &")".repeat(10_000);
        assert!(parse_expr(&deep).is_err());
        assert!(parse_expr(&"-".repeat(10_000)).is_err());
    }

    #[test]
    fn scope_rejects_unknown_and_out_of_range() {
        let sc = Scope::field(2, 2, &["g".to_string()]);
        assert!(parse_expr_in("g*x2 + y2 + t*eps", &sc, 1, 1).is_ok());
        assert!(matches!(parse_expr_in("h*x1", &sc, 3, 5), Err(NespError::Parse { line: 3, col: 5, .. })));
        assert!(parse_expr_in("x3", &sc, 1, 1).is_err());
        assert!(parse_expr_in("x1", &Scope::constants(&[]), 1, 1).is_err());
    }

    #[test]
    fn bind_substitutes_parameters() {
        let e = parse_expr("-g*sin(x1)").unwrap().bind(&[("g".into(), 2.0)]);
        assert!((e.eval(&Env::new(&[PI / 2.0], &[], 0.0, 0.0)).unwrap() + 2.0).abs() < 1e-15);
    }

    fn arb_expr() -> impl Strategy<Value = Expr> {
        let leaf = prop_oneof![
            (0.0f64..1e3).prop_map(Expr::Num),
            (0usize..3).prop_map(|i| Expr::Var(Var::X(i))),
            (0usize..2).prop_map(|i| Expr::Var(Var::Y(i))),
            Just(Expr::Var(Var::T)),
            Just(Expr::Var(Var::Eps)),
            Just(Expr::Var(Var::Param("gamma".into()))),
        ];
        leaf.prop_recursive(6, 48, 3, |inner| {
            prop_oneof![
                inner.clone().prop_map(|a| Expr::Neg(Box::new(a))),
                (inner.clone(), inner.clone(), 0usize..5).prop_map(|(a, b, k)| {
                    let op = [BinOp::Add, BinOp::Sub, BinOp::Mul, BinOp::Div, BinOp::Pow][k];
                    Expr::Bin(op, Box::new(a), Box::new(b))
                }),
                (inner.clone(), 0usize..8).prop_map(|(a, k)| Expr::Call(Func::ALL[k], vec![a])),
                (inner.clone(), inner).prop_map(|(a, b)| Expr::Call(Func::Pow, vec![a, b])),
            ]
        })
    }

    proptest! {
        #[test]
        fn printer_round_trips(e in arb_expr()) {
            let text = e.to_string();
            let back = parse_expr(&text).unwrap();
            prop_assert_eq!(back, e, "{}", text);
        }

        #[test]
        fn parser_never_panics(s in "\\PC{0,64}") {
            let _ = parse_expr(&s);
        }

        #[test]
        fn parser_never_panics_on_token_soup(s in "[-+*/^()\\[\\],.0-9exyt pisncog_]{0,80}") {
            if let Ok(e) = parse_expr(&s) {
                let _ = e.eval(&Env::new(&[0.1, 0.2], &[0.3, 0.4], 0.5, 0.01));
            }
        }
    }
}
