//! A tiny expression language for user-defined Hamiltonians, with exact
//! symbolic differentiation.
//!
//! Grammar (usual precedence, `^` right-associative):
//!
//! ```text
//! expr  := term (("+" | "-") term)*
//! term  := unary (("*" | "/") unary)*
//! unary := "-" unary | power
//! power := atom ("^" unary)?
//! atom  := number | name | func "(" expr ")" | "(" expr ")"
//! func  := sin | cos | exp | log | sqrt
//! ```
//!
//! Names resolve to variable slots or named constants (`pi` is predefined).

use std::collections::BTreeMap;
use std::fmt;

use crate::error::{KamError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Func {
    Sin,
    Cos,
    Exp,
    Log,
    Sqrt,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Const(f64),
    Var(usize),
    Add(Box<Expr>, Box<Expr>),
    Sub(Box<Expr>, Box<Expr>),
    Mul(Box<Expr>, Box<Expr>),
    Div(Box<Expr>, Box<Expr>),
    Neg(Box<Expr>),
    Pow(Box<Expr>, Box<Expr>),
    Call(Func, Box<Expr>),
}

use Expr::*;

fn c(v: f64) -> Expr {
    Const(v)
}

fn add(a: Expr, b: Expr) -> Expr {
    match (a, b) {
        (Const(x), Const(y)) => c(x + y),
        (Const(z), e) | (e, Const(z)) if z == 0.0 => e,
        (a, b) => Add(Box::new(a), Box::new(b)),
    }
}

fn sub(a: Expr, b: Expr) -> Expr {
    match (a, b) {
        (Const(x), Const(y)) => c(x - y),
        (e, Const(z)) if z == 0.0 => e,
        (Const(z), e) if z == 0.0 => neg(e),
        (a, b) => Sub(Box::new(a), Box::new(b)),
    }
}

fn mul(a: Expr, b: Expr) -> Expr {
    match (a, b) {
        (Const(x), Const(y)) => c(x * y),
        (Const(z), _) | (_, Const(z)) if z == 0.0 => c(0.0),
        (Const(o), e) | (e, Const(o)) if o == 1.0 => e,
        (a, b) => Mul(Box::new(a), Box::new(b)),
    }
}

fn div(a: Expr, b: Expr) -> Expr {
    match (a, b) {
        (Const(x), Const(y)) => c(x / y),
        (Const(z), _) if z == 0.0 => c(0.0),
        (e, Const(o)) if o == 1.0 => e,
        (a, b) => Div(Box::new(a), Box::new(b)),
    }
}

fn neg(a: Expr) -> Expr {
    match a {
        Const(x) => c(-x),
        Neg(inner) => *inner,
        e => Neg(Box::new(e)),
    }
}

fn pow(a: Expr, b: Expr) -> Expr {
    match (a, b) {
        (Const(x), Const(y)) => c(x.powf(y)),
        (_, Const(z)) if z == 0.0 => c(1.0),
        (e, Const(o)) if o == 1.0 => e,
        (a, b) => Pow(Box::new(a), Box::new(b)),
    }
}

fn call(f: Func, a: Expr) -> Expr {
    match a {
        Const(x) => c(apply(f, x)),
        e => Call(f, Box::new(e)),
    }
}

fn apply(f: Func, x: f64) -> f64 {
    match f {
        Func::Sin => x.sin(),
        Func::Cos => x.cos(),
        Func::Exp => x.exp(),
        Func::Log => x.ln(),
        Func::Sqrt => x.sqrt(),
    }
}

impl Expr {
    pub fn eval(&self, vars: &[f64]) -> f64 {
        match self {
            Const(v) => *v,
            Var(i) => vars[*i],
            Add(a, b) => a.eval(vars) + b.eval(vars),
            Sub(a, b) => a.eval(vars) - b.eval(vars),
            Mul(a, b) => a.eval(vars) * b.eval(vars),
            Div(a, b) => a.eval(vars) / b.eval(vars),
            Neg(a) => -a.eval(vars),
            Pow(a, b) => {
                let base = a.eval(vars);
                match **b {
                    Const(e) if e.fract() == 0.0 && e.abs() < 64.0 => base.powi(e as i32),
                    _ => base.powf(b.eval(vars)),
                }
            }
            Call(f, a) => apply(*f, a.eval(vars)),
        }
    }

    /// Exact partial derivative with respect to variable slot `var`.
    pub fn derivative(&self, var: usize) -> Expr {
        match self {
            Const(_) => c(0.0),
            Var(i) => c(if *i == var { 1.0 } else { 0.0 }),
            Add(a, b) => add(a.derivative(var), b.derivative(var)),
            Sub(a, b) => sub(a.derivative(var), b.derivative(var)),
            Mul(a, b) => add(mul(a.derivative(var), (**b).clone()), mul((**a).clone(), b.derivative(var))),
            Div(a, b) => {
                let num = sub(mul(a.derivative(var), (**b).clone()), mul((**a).clone(), b.derivative(var)));
                div(num, pow((**b).clone(), c(2.0)))
            }
            Neg(a) => neg(a.derivative(var)),
            Pow(a, b) => {
                if let Const(e) = **b {
                    mul(mul(c(e), pow((**a).clone(), c(e - 1.0))), a.derivative(var))
                } else {
                    // d(u^v) = u^v (v' ln u + v u' / u)
                    let u = (**a).clone();
                    let v = (**b).clone();
                    let term = add(
                        mul(b.derivative(var), call(Func::Log, u.clone())),
                        div(mul(v.clone(), a.derivative(var)), u.clone()),
                    );
                    mul(pow(u, v), term)
                }
            }
            Call(f, a) => {
                let inner = a.derivative(var);
                let outer = match f {
                    Func::Sin => call(Func::Cos, (**a).clone()),
                    Func::Cos => neg(call(Func::Sin, (**a).clone())),
                    Func::Exp => call(Func::Exp, (**a).clone()),
                    Func::Log => div(c(1.0), (**a).clone()),
                    Func::Sqrt => div(c(0.5), call(Func::Sqrt, (**a).clone())),
                };
                mul(outer, inner)
            }
        }
    }

    pub fn uses_var(&self, var: usize) -> bool {
        match self {
            Const(_) => false,
            Var(i) => *i == var,
            Add(a, b) | Sub(a, b) | Mul(a, b) | Div(a, b) | Pow(a, b) => a.uses_var(var) || b.uses_var(var),
            Neg(a) | Call(_, a) => a.uses_var(var),
        }
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Const(v) => write!(f, "{v}"),
            Var(i) => write!(f, "v{i}"),
            Add(a, b) => write!(f, "({a} + {b})"),
            Sub(a, b) => write!(f, "({a} - {b})"),
            Mul(a, b) => write!(f, "({a} * {b})"),
            Div(a, b) => write!(f, "({a} / {b})"),
            Neg(a) => write!(f, "(-{a})"),
            Pow(a, b) => write!(f, "({a} ^ {b})"),
            Call(func, a) => write!(f, "{}({a})", format!("{func:?}").to_lowercase()),
        }
    }
}

/// Name resolution for the parser.
#[derive(Debug, Clone, Default)]
pub struct Scope {
    pub vars: BTreeMap<String, usize>,
    pub constants: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Num(f64),
    Ident(String),
    Op(char),
}

fn lex(src: &str) -> Result<Vec<Tok>> {
    let chars: Vec<char> = src.chars().collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let ch = chars[i];
        if ch.is_whitespace() {
            i += 1;
        } else if ch.is_ascii_digit() || ch == '.' {
            let start = i;
            while i < chars.len() && (chars[i].is_ascii_digit() || chars[i] == '.') {
                i += 1;
            }
            if i < chars.len() && (chars[i] == 'e' || chars[i] == 'E') {
                let mut j = i + 1;
                if j < chars.len() && (chars[j] == '+' || chars[j] == '-') {
                    j += 1;
                }
                if j < chars.len() && chars[j].is_ascii_digit() {
                    i = j;
                    while i < chars.len() && chars[i].is_ascii_digit() {
                        i += 1;
                    }
                }
            }
            let text: String = chars[start..i].iter().collect();
            let v = text.parse::<f64>().map_err(|_| KamError::Expression(format!("bad number `{text}`")))?;
            out.push(Tok::Num(v));
        } else if ch.is_alphabetic() || ch == '_' {
            let start = i;
            while i < chars.len() && (chars[i].is_alphanumeric() || chars[i] == '_') {
                i += 1;
            }
            out.push(Tok::Ident(chars[start..i].iter().collect()));
        } else if "+-*/^()".contains(ch) {
            out.push(Tok::Op(ch));
            i += 1;
        } else {
            return Err(KamError::Expression(format!("unexpected character `{ch}` at offset {i}")));
        }
    }
    Ok(out)
}

struct Parser<'a> {
    toks: Vec<Tok>,
    pos: usize,
    scope: &'a Scope,
}

impl Parser<'_> {
    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.pos)
    }

    fn eat(&mut self, op: char) -> bool {
        if self.peek() == Some(&Tok::Op(op)) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn expr(&mut self) -> Result<Expr> {
        let mut lhs = self.term()?;
        loop {
            if self.eat('+') {
                lhs = add(lhs, self.term()?);
            } else if self.eat('-') {
                lhs = sub(lhs, self.term()?);
            } else {
                return Ok(lhs);
            }
        }
    }

    fn term(&mut self) -> Result<Expr> {
        let mut lhs = self.unary()?;
        loop {
            if self.eat('*') {
                lhs = mul(lhs, self.unary()?);
            } else if self.eat('/') {
                lhs = div(lhs, self.unary()?);
            } else {
                return Ok(lhs);
            }
        }
    }

    fn unary(&mut self) -> Result<Expr> {
        if self.eat('-') {
            return Ok(neg(self.unary()?));
        }
        let base = self.atom()?;
        if self.eat('^') {
            let exp = self.unary()?;
            return Ok(pow(base, exp));
        }
        Ok(base)
    }

    fn atom(&mut self) -> Result<Expr> {
        match self.toks.get(self.pos).cloned() {
            Some(Tok::Num(v)) => {
                self.pos += 1;
                Ok(c(v))
            }
            Some(Tok::Op('(')) => {
                self.pos += 1;
                let e = self.expr()?;
                if !self.eat(')') {
                    return Err(KamError::Expression("missing `)`".into()));
                }
                Ok(e)
            }
            Some(Tok::Ident(name)) => {
                self.pos += 1;
                let func = match name.as_str() {
                    "sin" => Some(Func::Sin),
                    "cos" => Some(Func::Cos),
                    "exp" => Some(Func::Exp),
                    "log" => Some(Func::Log),
                    "sqrt" => Some(Func::Sqrt),
                    _ => None,
                };
                if let Some(f) = func {
                    if !self.eat('(') {
                        return Err(KamError::Expression(format!("`{name}` must be called")));
                    }
                    let arg = self.expr()?;
                    if !self.eat(')') {
                        return Err(KamError::Expression("missing `)`".into()));
                    }
                    return Ok(call(f, arg));
                }
                if let Some(&slot) = self.scope.vars.get(&name) {
                    return Ok(Var(slot));
                }
                if let Some(&v) = self.scope.constants.get(&name) {
                    return Ok(c(v));
                }
                if name == "pi" {
                    return Ok(c(std::f64::consts::PI));
                }
                Err(KamError::Expression(format!("unknown name `{name}`")))
            }
            Some(t) => Err(KamError::Expression(format!("unexpected token {t:?}"))),
            None => Err(KamError::Expression("unexpected end of expression".into())),
        }
    }
}

/// Parses `src` against `scope`.
pub fn parse(src: &str, scope: &Scope) -> Result<Expr> {
    let toks = lex(src)?;
    let mut p = Parser { toks, pos: 0, scope };
    let e = p.expr()?;
    if p.pos != p.toks.len() {
        return Err(KamError::Expression(format!("trailing input after token {}", p.pos)));
    }
    Ok(e)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scope() -> Scope {
        let mut s = Scope::default();
        s.vars.insert("x".into(), 0);
        s.vars.insert("y".into(), 1);
        s.constants.insert("eps".into(), 0.1);
        s
    }

    #[test]
    fn precedence_and_constants() {
        let e = parse("1 + 2 * 3 ^ 2 - -4 / 2", &scope()).unwrap();
        assert_eq!(e.eval(&[]), 1.0 + 18.0 + 2.0);
        let e = parse("2^3^2", &scope()).unwrap();
        assert_eq!(e.eval(&[]), 512.0);
        let e = parse("eps * cos(2*pi*x)", &scope()).unwrap();
        assert!((e.eval(&[0.5, 0.0]) + 0.1).abs() < 1e-15);
        assert_eq!(parse("1.5e-3", &scope()).unwrap().eval(&[]), 1.5e-3);
    }

    #[test]
    fn derivatives_match_finite_differences() {
        let e = parse("x^2*sin(y) + exp(x*y)/(1+y^2) + sqrt(2+x) + log(3+y) + x^y", &scope()).unwrap();
        let p = [0.7, 0.4];
        for var in 0..2 {
            let d = e.derivative(var);
            let h = 1e-6;
            let mut a = p;
            let mut b = p;
            a[var] += h;
            b[var] -= h;
            let fd = (e.eval(&a) - e.eval(&b)) / (2.0 * h);
            assert!((d.eval(&p) - fd).abs() < 1e-8, "var {var}: {} vs {fd}", d.eval(&p));
        }
    }

    #[test]
    fn errors_are_reported() {
        assert!(parse("x +", &scope()).is_err());
        assert!(parse("z", &scope()).is_err());
        assert!(parse("sin x", &scope()).is_err());
        assert!(parse("(x", &scope()).is_err());
        assert!(parse("x $ y", &scope()).is_err());
    }

    #[test]
    fn simplification_keeps_trees_small() {
        let e = parse("3*x + 2", &scope()).unwrap();
        assert_eq!(e.derivative(0), Const(3.0));
        assert_eq!(e.derivative(1), Const(0.0));
        assert!(!e.uses_var(1));
    }
}
