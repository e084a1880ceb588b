//! A small arithmetic expression language for user-supplied coefficients.
//!
//! Grammar: numbers, the variables `tau` (or `τ`), `t`, `x`, `u`, the binary
//! operators `+ - * / ^`, unary minus, parentheses, and the functions
//! `exp`, `ln`, `sqrt` (one argument) and `min`, `max` (two arguments).
//! `^` binds tighter than unary minus and is right associative.

use crate::error::{Error, Result};

/// Variable bindings for evaluation.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Vars {
    pub tau: f64,
    pub t: f64,
    pub x: f64,
    pub u: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Var {
    Tau,
    T,
    X,
    U,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Func1 {
    Exp,
    Ln,
    Sqrt,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Func2 {
    Min,
    Max,
}

#[derive(Debug, Clone, PartialEq)]
enum Node {
    Num(f64),
    Var(Var),
    Neg(Box<Node>),
    Bin(char, Box<Node>, Box<Node>),
    Call1(Func1, Box<Node>),
    Call2(Func2, Box<Node>, Box<Node>),
}

/// A parsed expression.
#[derive(Debug, Clone, PartialEq)]
pub struct Expr {
    root: Node,
    source: String,
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Num(f64),
    Ident(String),
    Op(char),
    LParen,
    RParen,
    Comma,
}

fn tokenize(src: &str) -> Result<Vec<Tok>> {
    let chars: Vec<char> = src.chars().collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        if c.is_whitespace() {
            i += 1;
        } else if c.is_ascii_digit() || c == '.' {
            let start = i;
            while i < chars.len() && (chars[i].is_ascii_digit() || chars[i] == '.') {
                i += 1;
            }
            // exponent part, e.g. 1e-3
            if i < chars.len() && (chars[i] == 'e' || chars[i] == 'E') {
                let save = i;
                i += 1;
                if i < chars.len() && (chars[i] == '+' || chars[i] == '-') {
                    i += 1;
                }
                if i < chars.len() && chars[i].is_ascii_digit() {
                    while i < chars.len() && chars[i].is_ascii_digit() {
                        i += 1;
                    }
                } else {
                    i = save;
                }
            }
            let text: String = chars[start..i].iter().collect();
            let v: f64 = text
                .parse()
                .map_err(|_| Error::Expr(format!("bad number '{text}' in '{src}'")))?;
            out.push(Tok::Num(v));
        } else if c.is_alphabetic() || c == '_' {
            let start = i;
            while i < chars.len() && (chars[i].is_alphanumeric() || chars[i] == '_') {
                i += 1;
            }
            out.push(Tok::Ident(chars[start..i].iter().collect()));
        } else {
            let tok = match c {
                '+' | '-' | '*' | '/' | '^' => Tok::Op(c),
                '−' => Tok::Op('-'),
                '(' => Tok::LParen,
                ')' => Tok::RParen,
                ',' => Tok::Comma,
                _ => return Err(Error::Expr(format!("unexpected character '{c}' in '{src}'"))),
            };
            out.push(tok);
            i += 1;
        }
    }
    Ok(out)
}

struct Parser<'a> {
    toks: Vec<Tok>,
    pos: usize,
    src: &'a str,
    allowed: &'a [Var],
}

impl Parser<'_> {
    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.pos)
    }

    fn next(&mut self) -> Option<Tok> {
        let t = self.toks.get(self.pos).cloned();
        self.pos += 1;
        t
    }

    fn err<T>(&self, msg: &str) -> Result<T> {
        Err(Error::Expr(format!("{msg} in '{}'", self.src)))
    }

    fn expect(&mut self, want: Tok) -> Result<()> {
        match self.next() {
            Some(t) if t == want => Ok(()),
            _ => self.err(&format!("expected {want:?}")),
        }
    }

    fn expr(&mut self) -> Result<Node> {
        let mut lhs = self.term()?;
        while let Some(Tok::Op(op @ ('+' | '-'))) = self.peek().cloned() {
            self.pos += 1;
            let rhs = self.term()?;
            lhs = Node::Bin(op, Box::new(lhs), Box::new(rhs));
        }
        Ok(lhs)
    }

    fn term(&mut self) -> Result<Node> {
        let mut lhs = self.unary()?;
        while let Some(Tok::Op(op @ ('*' | '/'))) = self.peek().cloned() {
            self.pos += 1;
            let rhs = self.unary()?;
            lhs = Node::Bin(op, Box::new(lhs), Box::new(rhs));
        }
        Ok(lhs)
    }

    fn unary(&mut self) -> Result<Node> {
        match self.peek() {
            Some(Tok::Op('-')) => {
                self.pos += 1;
                Ok(Node::Neg(Box::new(self.unary()?)))
            }
            Some(Tok::Op('+')) => {
                self.pos += 1;
                self.unary()
            }
            _ => self.power(),
        }
    }

    fn power(&mut self) -> Result<Node> {
        let base = self.atom()?;
        if let Some(Tok::Op('^')) = self.peek() {
            self.pos += 1;
            // right associative, and allows a signed exponent: 2^-1
            let exp = self.unary()?;
            return Ok(Node::Bin('^', Box::new(base), Box::new(exp)));
        }
        Ok(base)
    }

    fn atom(&mut self) -> Result<Node> {
        match self.next() {
            Some(Tok::Num(v)) => Ok(Node::Num(v)),
            Some(Tok::LParen) => {
                let e = self.expr()?;
                self.expect(Tok::RParen)?;
                Ok(e)
            }
            Some(Tok::Ident(name)) => {
                if let Some(Tok::LParen) = self.peek() {
                    self.pos += 1;
                    return self.call(&name);
                }
                let var = match name.as_str() {
                    "tau" | "τ" => Var::Tau,
                    "t" => Var::T,
                    "x" => Var::X,
                    "u" => Var::U,
                    _ => return self.err(&format!("unknown identifier '{name}'")),
                };
                if !self.allowed.contains(&var) {
                    return self.err(&format!("variable '{name}' is not available here"));
                }
                Ok(Node::Var(var))
            }
            _ => self.err("unexpected end or token"),
        }
    }

    fn call(&mut self, name: &str) -> Result<Node> {
        let f1 = match name {
            "exp" => Some(Func1::Exp),
            "ln" => Some(Func1::Ln),
            "sqrt" => Some(Func1::Sqrt),
            _ => None,
        };
        if let Some(f) = f1 {
            let a = self.expr()?;
            self.expect(Tok::RParen)?;
            return Ok(Node::Call1(f, Box::new(a)));
        }
        let f2 = match name {
            "min" => Func2::Min,
            "max" => Func2::Max,
            _ => return self.err(&format!("unknown function '{name}'")),
        };
        let a = self.expr()?;
        self.expect(Tok::Comma)?;
        let b = self.expr()?;
        self.expect(Tok::RParen)?;
        Ok(Node::Call2(f2, Box::new(a), Box::new(b)))
    }
}

const ALL_VARS: [Var; 4] = [Var::Tau, Var::T, Var::X, Var::U];

impl Expr {
    /// Parse with all four variables available.
    pub fn parse(src: &str) -> Result<Self> {
        Self::parse_with(src, &ALL_VARS)
    }

    /// Parse, rejecting variables outside `allowed`.
    pub fn parse_with(src: &str, allowed: &[Var]) -> Result<Self> {
        let toks = tokenize(src)?;
        if toks.is_empty() {
            return Err(Error::Expr("empty expression".into()));
        }
        let mut p = Parser { toks, pos: 0, src, allowed };
        let root = p.expr()?;
        if p.pos != p.toks.len() {
            return p.err("trailing input");
        }
        Ok(Self { root, source: src.to_string() })
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    pub fn eval(&self, v: &Vars) -> f64 {
        eval(&self.root, v)
    }

    /// Whether the expression mentions `var`.
    pub fn uses(&self, var: Var) -> bool {
        fn walk(n: &Node, var: Var) -> bool {
            match n {
                Node::Num(_) => false,
                Node::Var(v) => *v == var,
                Node::Neg(a) | Node::Call1(_, a) => walk(a, var),
                Node::Bin(_, a, b) | Node::Call2(_, a, b) => walk(a, var) || walk(b, var),
            }
        }
        walk(&self.root, var)
    }
}

fn eval(n: &Node, v: &Vars) -> f64 {
    match n {
        Node::Num(c) => *c,
        Node::Var(Var::Tau) => v.tau,
        Node::Var(Var::T) => v.t,
        Node::Var(Var::X) => v.x,
        Node::Var(Var::U) => v.u,
        Node::Neg(a) => -eval(a, v),
        Node::Bin(op, a, b) => {
            let (a, b) = (eval(a, v), eval(b, v));
            match op {
                '+' => a + b,
                '-' => a - b,
                '*' => a * b,
                '/' => a / b,
                _ => a.powf(b),
            }
        }
        Node::Call1(f, a) => {
            let a = eval(a, v);
            match f {
                Func1::Exp => a.exp(),
                Func1::Ln => a.ln(),
                Func1::Sqrt => a.sqrt(),
            }
        }
        Node::Call2(f, a, b) => {
            let (a, b) = (eval(a, v), eval(b, v));
            match f {
                Func2::Min => a.min(b),
                Func2::Max => a.max(b),
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ev(src: &str, v: Vars) -> f64 {
        Expr::parse(src).unwrap().eval(&v)
    }

    #[test]
    fn precedence_and_associativity() {
        let v = Vars::default();
        assert_eq!(ev("1 + 2 * 3", v), 7.0);
        assert_eq!(ev("2 ^ 3 ^ 2", v), 512.0);
        assert_eq!(ev("-2 ^ 2", v), -4.0);
        assert_eq!(ev("(1 + 2) * 3", v), 9.0);
        assert_eq!(ev("8 / 4 / 2", v), 1.0);
        assert_eq!(ev("2^-1", v), 0.5);
        assert_eq!(ev("1.5e-1 * 2E1", v), 3.0);
    }

    #[test]
    fn variables_and_functions() {
        let v = Vars { tau: 0.25, t: 0.5, x: 2.0, u: -1.0 };
        assert_eq!(ev("tau + t + x + u", v), 1.75);
        assert_eq!(ev("τ * 4", v), 1.0);
        assert!((ev("exp(ln(x))", v) - 2.0).abs() < 1e-15);
        assert_eq!(ev("sqrt(x*8)", v), 4.0);
        assert_eq!(ev("min(u, x) + max(u, x)", v), 1.0);
        assert_eq!(ev("exp(-0.1*(t - tau))", v), (-0.025f64).exp());
    }

    #[test]
    fn rejects_bad_input() {
        assert!(Expr::parse("").is_err());
        assert!(Expr::parse("1 +").is_err());
        assert!(Expr::parse("foo(1)").is_err());
        assert!(Expr::parse("y + 1").is_err());
        assert!(Expr::parse("min(1)").is_err());
        assert!(Expr::parse("(1").is_err());
        assert!(Expr::parse("1 2").is_err());
        assert!(Expr::parse_with("x + t", &[Var::T]).is_err());
    }
}
