//! Plain-text system definitions.
//!
//! A document is a list of `[section]` blocks with `name = expression` lines;
//! `#` starts a comment. The grammar is in `docs/sysdsl.md`.

mod expr;

pub use expr::{format_num, is_reserved, parse_expr, parse_expr_in, BinOp, Env, Expr, Func, Scope, Var};

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{NespError, Result};
use crate::model::{Field, Flags, Hints, Invariant, InvariantExpansion, SlowFastSystem};

/// Upper bound on declared dimensions.
pub const MAX_DIM: usize = 64;

/// Optional invariant with Taylor blocks in the fast variable.
#[derive(Debug, Clone, PartialEq)]
pub struct InvariantSpec {
    /// `H(x, y, eps)`.
    pub h: Expr,
    /// `H0(x, eps)`, `H1_k(x, eps)`, `H2_ij(x, eps)`; all present or all absent.
    pub h0: Option<Expr>,
    pub h1: Vec<Expr>,
    pub h2: Vec<Vec<Expr>>,
    pub c: Option<(f64, f64, f64)>,
    pub scaled_fast: bool,
}

/// Parsed document before it is turned into oracles.
#[derive(Debug, Clone, PartialEq)]
pub struct SystemSpecDoc {
    pub name: String,
    pub n_x: usize,
    pub n_y: usize,
    pub params: Vec<(String, f64)>,
    pub a: Vec<Vec<Expr>>,
    pub j: Vec<Vec<Expr>>,
    pub f: Vec<Expr>,
    pub g: Vec<Expr>,
    pub invariant: Option<InvariantSpec>,
    pub flags: Flags,
    pub hints: Hints,
    /// Raw `[run]` entries for front ends; keys in document order.
    pub run: Vec<(String, String)>,
}

struct Line<'a> {
    no: usize,
    text: &'a str,
    /// 1-based column of `text` in the source line.
    col: usize,
}

struct Section<'a> {
    name: String,
    line: usize,
    lines: Vec<Line<'a>>,
}

fn perr(line: usize, col: usize, msg: impl Into<String>) -> NespError {
    NespError::Parse { line, col, msg: msg.into() }
}

fn split_sections(text: &str) -> Result<Vec<Section<'_>>> {
    let mut out: Vec<Section> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let no = i + 1;
        let body = match raw.find('#') {
            Some(k) => &raw[..k],
            None => raw,
        };
        let trimmed = body.trim();
        if trimmed.is_empty() {
            continue;
        }
        let lead = body.len() - body.trim_start().len();
        let col = body[..lead].chars().count() + 1;
        if let Some(rest) = trimmed.strip_prefix('[') {
            let name = rest
                .strip_suffix(']')
                .ok_or_else(|| perr(no, col, "section header must end with ']'"))?
                .split_whitespace()
                .collect::<Vec<_>>()
                .join(" ");
            if out.iter().any(|s| s.name == name) {
                return Err(perr(no, col, format!("duplicate section [{name}]")));
            }
            out.push(Section { name, line: no, lines: Vec::new() });
            continue;
        }
        match out.last_mut() {
            Some(s) => s.lines.push(Line { no, text: trimmed, col }),
            None => return Err(perr(no, col, "content before the first section header")),
        }
    }
    Ok(out)
}

/// `key = value` with the value's column.
fn key_value<'a>(l: &Line<'a>) -> Result<(&'a str, &'a str, usize)> {
    let k = l.text.find('=').ok_or_else(|| perr(l.no, l.col, "expected 'name = value'"))?;
    let key = l.text[..k].trim();
    if key.is_empty() {
        return Err(perr(l.no, l.col, "missing name before '='"));
    }
    let after = &l.text[k + 1..];
    let lead = after.len() - after.trim_start().len();
    let vcol = l.col + l.text[..k + 1].chars().count() + after[..lead].chars().count();
    Ok((key, after.trim(), vcol))
}

fn parse_usize(v: &str, line: usize, col: usize) -> Result<usize> {
    v.parse::<usize>().map_err(|_| perr(line, col, format!("expected a non-negative integer, found '{v}'")))
}

fn parse_bool(v: &str, line: usize, col: usize) -> Result<bool> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(perr(line, col, format!("expected true or false, found '{v}'"))),
    }
}

fn const_value(src: &str, params: &[(String, f64)], line: usize, col: usize) -> Result<(Expr, f64)> {
    let names: Vec<String> = params.iter().map(|p| p.0.clone()).collect();
    let e = parse_expr_in(src, &Scope::constants(&names), line, col)?;
    let v = e.eval(&Env { x: &[], y: &[], t: 0.0, eps: 0.0, params }).map_err(|err| perr(line, col, err.to_string()))?;
    Ok((e, v))
}

fn parse_matrix(sec: &Section, n: usize, params: &[(String, f64)]) -> Result<Vec<Vec<Expr>>> {
    let mut rows = Vec::new();
    for l in &sec.lines {
        let mut off = 0usize;
        for row in l.text.split(';') {
            let row_col = l.col + l.text[..off].chars().count();
            off += row.len() + 1;
            if row.trim().is_empty() {
                continue;
            }
            let mut entries = Vec::new();
            let mut eoff = 0usize;
            for ent in row.split(',') {
                let lead = ent.len() - ent.trim_start().len();
                let c = row_col + row[..eoff].chars().count() + ent[..lead].chars().count();
                eoff += ent.len() + 1;
                if ent.trim().is_empty() {
                    return Err(perr(l.no, c, "empty matrix entry"));
                }
                entries.push(const_value(ent.trim(), params, l.no, c)?.0);
            }
            if entries.len() != n {
                return Err(NespError::Dimension(format!(
                    "line {}: [{}] row has {} entries, expected {n}",
                    l.no,
                    sec.name,
                    entries.len()
                )));
            }
            rows.push(entries);
        }
    }
    if rows.len() != n {
        return Err(NespError::Dimension(format!("[{}] has {} rows, expected {n}", sec.name, rows.len())));
    }
    Ok(rows)
}

fn parse_field(sec: &Section, prefix: &str, n: usize, scope: &Scope) -> Result<Vec<Expr>> {
    let mut slots: Vec<Option<Expr>> = vec![None; n];
    for l in &sec.lines {
        let (key, val, vcol) = key_value(l)?;
        let idx = key
            .strip_prefix(prefix)
            .and_then(|d| d.parse::<usize>().ok())
            .filter(|&i| i >= 1 && i <= n)
            .ok_or_else(|| perr(l.no, l.col, format!("expected a component name {prefix}1..{prefix}{n}, found '{key}'")))?;
        if slots[idx - 1].is_some() {
            return Err(perr(l.no, l.col, format!("component '{key}' defined twice")));
        }
        slots[idx - 1] = Some(parse_expr_in(val, scope, l.no, vcol)?);
    }
    slots
        .into_iter()
        .enumerate()
        .map(|(i, s)| s.ok_or_else(|| perr(sec.line, 1, format!("missing component {prefix}{}", i + 1))))
        .collect()
}

fn parse_invariant(sec: &Section, n_x: usize, n_y: usize, names: &[String]) -> Result<InvariantSpec> {
    let h_scope = Scope { allow_t: false, ..Scope::field(n_x, n_y, names) };
    let blk_scope = Scope { allow_t: false, allow_y: false, ..Scope::field(n_x, n_y, names) };
    let mut h = None;
    let mut h0 = None;
    let mut h1: Vec<Option<Expr>> = vec![None; n_y];
    let mut h2: Vec<Vec<Option<Expr>>> = vec![vec![None; n_y]; n_y];
    let (mut c0, mut c1, mut c2) = (None, None, None);
    let mut scaled_fast = false;
    for l in &sec.lines {
        let (key, val, vcol) = key_value(l)?;
        let num = |v: &str| -> Result<f64> {
            v.parse::<f64>().ok().filter(|x| x.is_finite()).ok_or_else(|| perr(l.no, vcol, format!("expected a number, found '{v}'")))
        };
        match key {
            "H" => h = Some(parse_expr_in(val, &h_scope, l.no, vcol)?),
            "H0" => h0 = Some(parse_expr_in(val, &blk_scope, l.no, vcol)?),
            "c0" => c0 = Some(num(val)?),
            "c1" => c1 = Some(num(val)?),
            "c2" => c2 = Some(num(val)?),
            "scaled_fast" => scaled_fast = parse_bool(val, l.no, vcol)?,
            _ => {
                let bad = || perr(l.no, l.col, format!("unknown invariant key '{key}'"));
                if let Some(rest) = key.strip_prefix("H1_") {
                    let k = rest.parse::<usize>().ok().filter(|&k| k >= 1 && k <= n_y).ok_or_else(bad)?;
                    h1[k - 1] = Some(parse_expr_in(val, &blk_scope, l.no, vcol)?);
                } else if let Some(rest) = key.strip_prefix("H2_") {
                    let mut it = rest.split('_').map(|s| s.parse::<usize>().ok().filter(|&k| k >= 1 && k <= n_y));
                    let (i, j) = match (it.next().flatten(), it.next().flatten(), it.next()) {
                        (Some(i), Some(j), None) => (i, j),
                        _ => return Err(bad()),
                    };
                    h2[i - 1][j - 1] = Some(parse_expr_in(val, &blk_scope, l.no, vcol)?);
                } else {
                    return Err(bad());
                }
            }
        }
    }
    let h = h.ok_or_else(|| perr(sec.line, 1, "[invariant H] needs 'H = ...'"))?;
    let any_blocks = h0.is_some() || h1.iter().any(Option::is_some) || h2.iter().flatten().any(Option::is_some);
    let (h0, h1, h2) = if any_blocks {
        let miss = |what: String| perr(sec.line, 1, format!("Taylor blocks incomplete: missing {what}"));
        let h0 = h0.ok_or_else(|| miss("H0".into()))?;
        let h1: Vec<Expr> =
            h1.into_iter().enumerate().map(|(k, e)| e.ok_or_else(|| miss(format!("H1_{}", k + 1)))).collect::<Result<_>>()?;
        let mut rows = Vec::new();
        for (i, row) in h2.into_iter().enumerate() {
            rows.push(
                row.into_iter()
                    .enumerate()
                    .map(|(j, e)| e.ok_or_else(|| miss(format!("H2_{}_{}", i + 1, j + 1))))
                    .collect::<Result<Vec<_>>>()?,
            );
        }
        (Some(h0), h1, rows)
    } else {
        (None, Vec::new(), Vec::new())
    };
    let c = match (c0, c1, c2) {
        (Some(a), Some(b), Some(c)) => Some((a, b, c)),
        (None, None, None) => None,
        _ => return Err(perr(sec.line, 1, "give all of c0, c1, c2 or none")),
    };
    Ok(InvariantSpec { h, h0, h1, h2, c, scaled_fast })
}

/// Parse a document without building oracles.
pub fn parse_document(text: &str) -> Result<SystemSpecDoc> {
    let sections = split_sections(text)?;
    const KNOWN: [&str; 11] = [
        "system", "dims", "params", "matrix A", "matrix J", "field f", "field g", "invariant H", "flags", "hints", "run",
    ];
    for s in &sections {
        if !KNOWN.contains(&s.name.as_str()) {
            return Err(perr(s.line, 1, format!("unknown section [{}]", s.name)));
        }
    }
    let find = |n: &str| sections.iter().find(|s| s.name == n);

    let mut name = String::from("unnamed");
    if let Some(s) = find("system") {
        for l in &s.lines {
            match key_value(l)? {
                ("name", v, _) if !v.is_empty() => name = v.to_string(),
                (k, _, _) => return Err(perr(l.no, l.col, format!("unknown [system] key '{k}'"))),
            }
        }
    }

    let dims = find("dims").ok_or_else(|| perr(1, 1, "missing [dims] section"))?;
    let (mut n_x, mut n_y) = (None, None);
    for l in &dims.lines {
        let (k, v, c) = key_value(l)?;
        let n = parse_usize(v, l.no, c)?;
        if n > MAX_DIM {
            return Err(NespError::Dimension(format!("line {}: dimension {n} exceeds the limit {MAX_DIM}", l.no)));
        }
        match k {
            "n_x" => n_x = Some(n),
            "n_y" => n_y = Some(n),
            _ => return Err(perr(l.no, l.col, format!("unknown [dims] key '{k}'"))),
        }
    }
    let n_x = n_x.ok_or_else(|| perr(dims.line, 1, "[dims] needs n_x"))?;
    let n_y = n_y.ok_or_else(|| perr(dims.line, 1, "[dims] needs n_y"))?;
    if n_x == 0 {
        return Err(NespError::Dimension("n_x must be positive".into()));
    }
    if n_y % 2 != 0 {
        return Err(NespError::Dimension(format!("n_y = {n_y} must be even")));
    }

    let mut params: Vec<(String, f64)> = Vec::new();
    if let Some(s) = find("params") {
        for l in &s.lines {
            let (k, v, c) = key_value(l)?;
            let valid = k.chars().next().is_some_and(|ch| ch.is_alphabetic() || ch == '_')
                && k.chars().all(|ch| ch.is_alphanumeric() || ch == '_');
            if !valid || is_reserved(k) {
                return Err(perr(l.no, l.col, format!("'{k}' cannot be used as a parameter name")));
            }
            if params.iter().any(|p| p.0 == k) {
                return Err(perr(l.no, l.col, format!("parameter '{k}' defined twice")));
            }
            let (_, val) = const_value(v, &params, l.no, c)?;
            params.push((k.to_string(), val));
        }
    }
    let names: Vec<String> = params.iter().map(|p| p.0.clone()).collect();

    let a = parse_matrix(find("matrix A").ok_or_else(|| perr(1, 1, "missing [matrix A] section"))?, n_x, &params)?;
    let j = match find("matrix J") {
        Some(s) => parse_matrix(s, n_y, &params)?,
        None if n_y == 0 => Vec::new(),
        None => return Err(perr(1, 1, "missing [matrix J] section")),
    };
    let scope = Scope::field(n_x, n_y, &names);
    let f = parse_field(find("field f").ok_or_else(|| perr(1, 1, "missing [field f] section"))?, "f", n_x, &scope)?;
    let g = match find("field g") {
        Some(s) => parse_field(s, "g", n_y, &scope)?,
        None if n_y == 0 => Vec::new(),
        None => return Err(perr(1, 1, "missing [field g] section")),
    };
    let invariant = find("invariant H").map(|s| parse_invariant(s, n_x, n_y, &names)).transpose()?;

    let mut flags = Flags::default();
    if let Some(s) = find("flags") {
        for l in &s.lines {
            let (k, v, c) = key_value(l)?;
            let b = parse_bool(v, l.no, c)?;
            match k {
                "origin_fixed_point" => flags.origin_fixed_point = b,
                "autonomous_at_zero" => flags.autonomous_at_zero = b,
                "autonomous" => flags.autonomous = b,
                _ => return Err(perr(l.no, l.col, format!("unknown flag '{k}'"))),
            }
        }
    }
    let mut hints = Hints::default();
    if let Some(s) = find("hints") {
        for l in &s.lines {
            let (k, v, c) = key_value(l)?;
            match k {
                "cutoff_radius" => {
                    let r = const_value(v, &params, l.no, c)?.1;
                    if r <= 0.0 {
                        return Err(perr(l.no, c, "cutoff_radius must be positive"));
                    }
                    hints.cutoff_radius = r;
                }
                "gaps" => {
                    let vals: Vec<f64> =
                        v.split(',').map(|p| const_value(p.trim(), &params, l.no, c).map(|r| r.1)).collect::<Result<_>>()?;
                    if vals.len() != 4 {
                        return Err(perr(l.no, c, "gaps needs four numbers a1, a2, a1', a2'"));
                    }
                    hints.gaps = Some((vals[0], vals[1], vals[2], vals[3]));
                }
                _ => return Err(perr(l.no, l.col, format!("unknown hint '{k}'"))),
            }
        }
    }
    let mut run = Vec::new();
    if let Some(s) = find("run") {
        for l in &s.lines {
            let (k, v, _) = key_value(l)?;
            run.push((k.to_string(), v.to_string()));
        }
    }
    Ok(SystemSpecDoc { name, n_x, n_y, params, a, j, f, g, invariant, flags, hints, run })
}

/// Like [`parse_document`] for raw bytes; invalid UTF-8 is a parse error.
pub fn parse_document_bytes(bytes: &[u8]) -> Result<SystemSpecDoc> {
    let text = std::str::from_utf8(bytes).map_err(|e| {
        let before = &bytes[..e.valid_up_to()];
        let line = before.iter().filter(|&&b| b == b'\n').count() + 1;
        perr(line, 1, "input is not valid UTF-8")
    })?;
    parse_document(text)
}

fn eval_matrix(rows: &[Vec<Expr>], params: &[(String, f64)]) -> Result<DMatrix<f64>> {
    let n = rows.len();
    let env = Env { x: &[], y: &[], t: 0.0, eps: 0.0, params };
    let mut m = DMatrix::zeros(n, n);
    for (i, r) in rows.iter().enumerate() {
        for (k, e) in r.iter().enumerate() {
            m[(i, k)] = e.eval(&env)?;
        }
    }
    Ok(m)
}

fn field_from(exprs: &[Expr], params: &[(String, f64)]) -> Field {
    if exprs.iter().all(Expr::is_zero) {
        return Field::zero();
    }
    let bound: Arc<Vec<Expr>> = Arc::new(exprs.iter().map(|e| e.bind(params)).collect());
    Field::new(move |x, y, t, eps, out| {
        let env = Env::new(x, y, t, eps);
        for (o, e) in out.iter_mut().zip(bound.iter()) {
            *o = e.eval(&env)?;
        }
        Ok(())
    })
}

impl SystemSpecDoc {
    /// Override a parameter; unknown names are a parameter error.
    pub fn set_param(&mut self, name: &str, value: f64) -> Result<()> {
        match self.params.iter_mut().find(|p| p.0 == name) {
            Some(p) => {
                p.1 = value;
                Ok(())
            }
            None => Err(NespError::Parameter(format!("system '{}' has no parameter '{name}'", self.name))),
        }
    }

    pub fn build(&self) -> Result<SlowFastSystem> {
        let a = eval_matrix(&self.a, &self.params)?;
        let j = if self.n_y == 0 { DMatrix::zeros(0, 0) } else { eval_matrix(&self.j, &self.params)? };
        let f = field_from(&self.f, &self.params);
        let g = field_from(&self.g, &self.params);
        let mut sys = SlowFastSystem::new(self.name.clone(), a, j, f, g)?.with_flags(self.flags).with_hints(self.hints);
        if let Some(inv) = &self.invariant {
            sys = sys.with_invariant(self.build_invariant(inv));
        }
        Ok(sys)
    }

    fn build_invariant(&self, inv: &InvariantSpec) -> Invariant {
        let h = inv.h.bind(&self.params);
        let mut out = Invariant::new(move |x, y, eps| h.eval(&Env::new(x, y, 0.0, eps)));
        if let Some(h0) = &inv.h0 {
            let h0 = h0.bind(&self.params);
            let h1: Vec<Expr> = inv.h1.iter().map(|e| e.bind(&self.params)).collect();
            let h2: Vec<Vec<Expr>> = inv.h2.iter().map(|r| r.iter().map(|e| e.bind(&self.params)).collect()).collect();
            let (c0, c1, c2) = inv.c.unwrap_or((0.0, 0.0, 0.0));
            out.expansion = Some(InvariantExpansion {
                h0: Arc::new(move |x, eps| h0.eval(&Env::new(x, &[], 0.0, eps))),
                h1: Arc::new(move |x, eps| {
                    let env = Env::new(x, &[], 0.0, eps);
                    let v: Vec<f64> = h1.iter().map(|e| e.eval(&env)).collect::<Result<_>>()?;
                    Ok(DVector::from_vec(v))
                }),
                h2: Arc::new(move |x, eps| {
                    let env = Env::new(x, &[], 0.0, eps);
                    let n = h2.len();
                    let mut m = DMatrix::zeros(n, n);
                    for i in 0..n {
                        for k in 0..n {
                            m[(i, k)] = h2[i][k].eval(&env)?;
                        }
                    }
                    Ok(0.5 * (&m + m.transpose()))
                }),
                c0,
                c1,
                c2,
                scaled_fast: inv.scaled_fast,
            });
        }
        out
    }

    /// Canonical text; parses back to an equal document.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!("[system]\nname = {}\n\n[dims]\nn_x = {}\nn_y = {}\n", self.name, self.n_x, self.n_y));
        if !self.params.is_empty() {
            s.push_str("\n[params]\n");
            for (k, v) in &self.params {
                s.push_str(&format!("{k} = {}\n", num_text(*v)));
            }
        }
        let mat = |s: &mut String, title: &str, rows: &[Vec<Expr>]| {
            s.push_str(&format!("\n[{title}]\n"));
            for r in rows {
                let ents: Vec<String> = r.iter().map(|e| e.to_string()).collect();
                s.push_str(&ents.join(", "));
                s.push('\n');
            }
        };
        mat(&mut s, "matrix A", &self.a);
        if self.n_y > 0 {
            mat(&mut s, "matrix J", &self.j);
        }
        s.push_str("\n[field f]\n");
        for (i, e) in self.f.iter().enumerate() {
            s.push_str(&format!("f{} = {e}\n", i + 1));
        }
        if self.n_y > 0 {
            s.push_str("\n[field g]\n");
            for (i, e) in self.g.iter().enumerate() {
                s.push_str(&format!("g{} = {e}\n", i + 1));
            }
        }
        if let Some(inv) = &self.invariant {
            s.push_str(&format!("\n[invariant H]\nH = {}\n", inv.h));
            if let Some(h0) = &inv.h0 {
                s.push_str(&format!("H0 = {h0}\n"));
                for (k, e) in inv.h1.iter().enumerate() {
                    s.push_str(&format!("H1_{} = {e}\n", k + 1));
                }
                for (i, r) in inv.h2.iter().enumerate() {
                    for (k, e) in r.iter().enumerate() {
                        s.push_str(&format!("H2_{}_{} = {e}\n", i + 1, k + 1));
                    }
                }
            }
            if let Some((a, b, c)) = inv.c {
                s.push_str(&format!("c0 = {a:?}\nc1 = {b:?}\nc2 = {c:?}\n"));
            }
            if inv.scaled_fast {
                s.push_str("scaled_fast = true\n");
            }
        }
        let fl = self.flags;
        s.push_str(&format!(
            "\n[flags]\norigin_fixed_point = {}\nautonomous_at_zero = {}\nautonomous = {}\n",
            fl.origin_fixed_point, fl.autonomous_at_zero, fl.autonomous
        ));
        s.push_str(&format!("\n[hints]\ncutoff_radius = {}\n", num_text(self.hints.cutoff_radius)));
        if let Some((a, b, c, d)) = self.hints.gaps {
            s.push_str(&format!("gaps = {}, {}, {}, {}\n", num_text(a), num_text(b), num_text(c), num_text(d)));
        }
        if !self.run.is_empty() {
            s.push_str("\n[run]\n");
            for (k, v) in &self.run {
                s.push_str(&format!("{k} = {v}\n"));
            }
        }
        s
    }
}

/// Constant that reparses to the same value (negative numbers print as `-v`).
fn num_text(v: f64) -> String {
    if v < 0.0 {
        format!("-{}", format_num(-v))
    } else {
        format_num(v)
    }
}

/// Parse a document and build the system; Jacobians fall back to finite differences.
pub fn parse_system(text: &str) -> Result<SlowFastSystem> {
    parse_document(text)?.build()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{eval_rhs, validate};
    use proptest::prelude::*;

    pub(crate) const PENDULUM: &str = "\
# rigid pendulum with a dormant fast oscillator
[system]
name = pendulum

[dims]
n_x = 2
n_y = 2

[params]
g = 1.0

[matrix A]
0, 1
0, 0

[matrix J]
0, 1; -1, 0

[field f]
f1 = 0
f2 = -g*sin(x1)

[field g]
g1 = 0
g2 = 0

[flags]
autonomous = true
";

    #[test]
    fn pendulum_document() {
        let sys = parse_system(PENDULUM).unwrap();
        assert_eq!((sys.n_x, sys.n_y, sys.name.as_str()), (2, 2, "pendulum"));
        let (dx, dy) = eval_rhs(&sys, &[0.0, 0.0], &[0.0, 0.0], 0.0, 0.1).unwrap();
        assert_eq!(dx.amax() + dy.amax(), 0.0);
        let (dx, _) = eval_rhs(&sys, &[std::f64::consts::FRAC_PI_2, 0.3], &[0.0, 0.0], 0.0, 0.1).unwrap();
        assert!((dx[0] - 0.3).abs() < 1e-15 && (dx[1] + 1.0).abs() < 1e-15);
        assert!(validate(&sys).all_passed(), "{}", validate(&sys));
    }

    #[test]
    fn document_round_trip_and_param_override() {
        let doc = parse_document(PENDULUM).unwrap();
        let back = parse_document(&doc.to_text()).unwrap();
        assert_eq!(doc, back);
        let mut d2 = doc.clone();
        d2.set_param("g", 9.81).unwrap();
        assert!(d2.set_param("nope", 1.0).is_err());
        let sys = d2.build().unwrap();
        let (dx, _) = eval_rhs(&sys, &[std::f64::consts::FRAC_PI_2, 0.0], &[0.0, 0.0], 0.0, 0.1).unwrap();
        assert!((dx[1] + 9.81).abs() < 1e-14);
    }

    #[test]
    fn errors_carry_positions() {
        let bad = PENDULUM.replace("f2 = -g*sin(x1)", "f2 = -h*sin(x1)");
        match parse_system(&bad) {
            Err(NespError::Parse { line: 21, col: 7, msg }) => assert!(msg.contains("unknown identifier")),
            other => panic!("{other:?}"),
        }
        let bad = PENDULUM.replace("f2 = -g*sin(x1)", "f2 = x3");
        assert!(matches!(parse_system(&bad), Err(NespError::Parse { line: 21, .. })));
        let bad = PENDULUM.replace("0, 1; -1, 0", "0, 1, 2; -1, 0, 0");
        assert!(matches!(parse_system(&bad), Err(NespError::Dimension(_))));
        let bad = PENDULUM.replace("n_y = 2", "n_y = 3");
        assert!(matches!(parse_system(&bad), Err(NespError::Dimension(_))));
        let bad = PENDULUM.replace("[flags]", "[flagz]");
        assert!(matches!(parse_system(&bad), Err(NespError::Parse { line: 27, .. })));
        let bad = PENDULUM.replace("g1 = 0\n", "");
        assert!(parse_system(&bad).is_err());
        let bad = PENDULUM.replace("g = 1.0", "sin = 1.0");
        assert!(parse_system(&bad).is_err());
        assert!(parse_document_bytes(&[0x5b, 0xff, 0xfe]).is_err());
    }

    #[test]
    fn invariant_blocks_parse_and_build() {
        let text = format!(
            "{PENDULUM}\n[invariant H]\nH = 0.5*x2^2 + g*cos(x1) - g + 0.5*(y1^2 + y2^2)\nH0 = 0.5*x2^2 + g*cos(x1) - g\n\
             H1_1 = 0\nH1_2 = 0\nH2_1_1 = 0.5\nH2_1_2 = 0\nH2_2_1 = 0\nH2_2_2 = 0.5\nc0 = 1\nc1 = 0\nc2 = 0.5\nscaled_fast = true\n"
        );
        let doc = parse_document(&text).unwrap();
        assert_eq!(parse_document(&doc.to_text()).unwrap(), doc);
        let sys = doc.build().unwrap();
        let inv = sys.invariant.as_ref().unwrap();
        let h3 = inv.h3(&[0.3, 0.1], &[0.2, -0.1], 0.01).unwrap();
        assert!(h3.abs() < 1e-15);
        assert!((inv.expansion.as_ref().unwrap().a_bar() - 0.5).abs() < 1e-15);
        let bad = text.replace("H0 = ", "H0 = y1 + ");
        assert!(parse_document(&bad).is_err());
        let bad = text.replace("H2_2_2 = 0.5\n", "");
        assert!(parse_document(&bad).is_err());
    }

    #[test]
    fn run_section_is_kept_raw() {
        let doc = parse_document(&format!("{PENDULUM}\n[run]\neps = 0.01, 0.02\nt1 = 5\n")).unwrap();
        assert_eq!(doc.run, vec![("eps".into(), "0.01, 0.02".into()), ("t1".into(), "5".into())]);
    }

    proptest! {
        #[test]
        fn document_parser_never_panics(s in "(\\[[a-zA-Z ]{0,12}\\]|[a-z_0-9]{0,6} ?= ?[-+*/^()xy0-9.,; ]{0,12}|\\PC{0,10})(\n(\\[[a-zA-Z ]{0,12}\\]|[a-z_0-9]{0,6} ?= ?[-+*/^()xy0-9.,; ]{0,12}|\\PC{0,10})){0,12}") {
            let _ = parse_system(&s);
        }

        #[test]
        fn mutated_pendulum_never_panics(pos in 0usize..400, ch in "\\PC") {
            let mut s: Vec<char> = PENDULUM.chars().collect();
            let p = pos % s.len();
            s[p] = ch.chars().next().unwrap_or('x');
            let s: String = s.into_iter().collect();
            let _ = parse_system(&s);
        }
    }
}
