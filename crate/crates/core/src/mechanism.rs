//! Structural mechanisms `v = g(pa) + s·u` and the expression language that declares them.
//!
//! Grammar:
//!
//! ```text
//! expr   := term (('+' | '-') term)*
//! term   := factor (('*' | '/') factor)*
//! factor := number | 'pi' | ident | 'u' | 'sin' '(' expr ')' | '(' expr ')' | '-' factor
//! ```
//!
//! `u` is the reserved noise symbol and must occur exactly once. After
//! canonicalization the expression must be affine in `u` with a constant,
//! strictly positive scale. Division is only allowed by nonzero constants.

use std::fmt;

use thiserror::Error;

use crate::graph::VariableId;
use crate::noise::NoiseDistribution;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MechanismError {
    #[error("parse error at byte {position}: {message}")]
    Parse { position: usize, message: String },
    #[error("noise term is not additive with a positive constant scale: {0}")]
    NonMonotoneNoise(String),
    #[error("unknown parent `{0}`")]
    UnknownParent(String),
    #[error("expected {expected} parent values, got {got}")]
    ArityMismatch { expected: usize, got: usize },
    #[error("noise distribution `{0}` has no density")]
    UnsupportedMeasure(&'static str),
}

// ---------------------------------------------------------------------------
// Lexer and parser
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
enum Token {
    Num(f64),
    Ident(String),
    Plus,
    Minus,
    Star,
    Slash,
    LParen,
    RParen,
}

fn lex(text: &str) -> Result<Vec<(usize, Token)>, MechanismError> {
    let bytes = text.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i] as char;
        let start = i;
        match c {
            ' ' | '\t' | '\n' | '\r' => {
                i += 1;
                continue;
            }
            '+' => out.push((start, Token::Plus)),
            '-' => out.push((start, Token::Minus)),
            '*' => out.push((start, Token::Star)),
            '/' => out.push((start, Token::Slash)),
            '(' => out.push((start, Token::LParen)),
            ')' => out.push((start, Token::RParen)),
            '0'..='9' | '.' => {
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
                let lit = &text[start..i];
                let v: f64 = lit.parse().map_err(|_| MechanismError::Parse {
                    position: start,
                    message: format!("invalid number `{lit}`"),
                })?;
                out.push((start, Token::Num(v)));
                continue;
            }
            c if c.is_ascii_alphabetic() || c == '_' => {
                while i < bytes.len() && (bytes[i].is_ascii_alphanumeric() || bytes[i] == b'_') {
                    i += 1;
                }
                out.push((start, Token::Ident(text[start..i].to_string())));
                continue;
            }
            other => {
                return Err(MechanismError::Parse {
                    position: start,
                    message: format!("unexpected character `{other}`"),
                })
            }
        }
        i += 1;
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
enum Ast {
    Num(f64),
    Parent(usize),
    Noise,
    Add(Box<Ast>, Box<Ast>),
    Sub(Box<Ast>, Box<Ast>),
    Mul(Box<Ast>, Box<Ast>),
    Div(Box<Ast>, Box<Ast>),
    Neg(Box<Ast>),
    Sin(Box<Ast>),
}

struct Parser<'a> {
    tokens: Vec<(usize, Token)>,
    pos: usize,
    len: usize,
    parents: &'a [VariableId],
}

impl Parser<'_> {
    fn peek(&self) -> Option<&Token> {
        self.tokens.get(self.pos).map(|(_, t)| t)
    }

    fn offset(&self) -> usize {
        self.tokens.get(self.pos).map_or(self.len, |(p, _)| *p)
    }

    fn error<T>(&self, message: impl Into<String>) -> Result<T, MechanismError> {
        Err(MechanismError::Parse { position: self.offset(), message: message.into() })
    }

    fn expect(&mut self, tok: Token) -> Result<(), MechanismError> {
        if self.peek() == Some(&tok) {
            self.pos += 1;
            Ok(())
        } else {
            self.error(format!("expected {tok:?}"))
        }
    }

    fn expr(&mut self) -> Result<Ast, MechanismError> {
        let mut lhs = self.term()?;
        loop {
            match self.peek() {
                Some(Token::Plus) => {
                    self.pos += 1;
                    lhs = Ast::Add(Box::new(lhs), Box::new(self.term()?));
                }
                Some(Token::Minus) => {
                    self.pos += 1;
                    lhs = Ast::Sub(Box::new(lhs), Box::new(self.term()?));
                }
                _ => return Ok(lhs),
            }
        }
    }

    fn term(&mut self) -> Result<Ast, MechanismError> {
        let mut lhs = self.factor()?;
        loop {
            match self.peek() {
                Some(Token::Star) => {
                    self.pos += 1;
                    lhs = Ast::Mul(Box::new(lhs), Box::new(self.factor()?));
                }
                Some(Token::Slash) => {
                    self.pos += 1;
                    let at = self.offset();
                    let rhs = self.factor()?;
                    match constant_value(&rhs) {
                        Some(c) if c != 0.0 => {}
                        Some(_) => {
                            return Err(MechanismError::Parse {
                                position: at,
                                message: "division by zero".into(),
                            })
                        }
                        None => {
                            return Err(MechanismError::Parse {
                                position: at,
                                message: "division is only allowed by constants".into(),
                            })
                        }
                    }
                    lhs = Ast::Div(Box::new(lhs), Box::new(rhs));
                }
                _ => return Ok(lhs),
            }
        }
    }

    fn factor(&mut self) -> Result<Ast, MechanismError> {
        let Some(tok) = self.peek().cloned() else {
            return self.error("unexpected end of expression");
        };
        self.pos += 1;
        match tok {
            Token::Num(v) => Ok(Ast::Num(v)),
            Token::Minus => Ok(Ast::Neg(Box::new(self.factor()?))),
            Token::LParen => {
                let inner = self.expr()?;
                self.expect(Token::RParen)?;
                Ok(inner)
            }
            Token::Ident(name) => match name.as_str() {
                "pi" => Ok(Ast::Num(std::f64::consts::PI)),
                "u" => Ok(Ast::Noise),
                "sin" => {
                    self.expect(Token::LParen)?;
                    let inner = self.expr()?;
                    self.expect(Token::RParen)?;
                    Ok(Ast::Sin(Box::new(inner)))
                }
                _ => self
                    .parents
                    .iter()
                    .position(|p| p.as_str() == name)
                    .map(Ast::Parent)
                    .ok_or(MechanismError::UnknownParent(name)),
            },
            other => {
                self.pos -= 1;
                self.error(format!("unexpected token {other:?}"))
            }
        }
    }
}

fn constant_value(ast: &Ast) -> Option<f64> {
    Some(match ast {
        Ast::Num(v) => *v,
        Ast::Parent(_) | Ast::Noise => return None,
        Ast::Add(a, b) => constant_value(a)? + constant_value(b)?,
        Ast::Sub(a, b) => constant_value(a)? - constant_value(b)?,
        Ast::Mul(a, b) => constant_value(a)? * constant_value(b)?,
        Ast::Div(a, b) => constant_value(a)? / constant_value(b)?,
        Ast::Neg(a) => -constant_value(a)?,
        Ast::Sin(a) => constant_value(a)?.sin(),
    })
}

fn noise_count(ast: &Ast) -> usize {
    match ast {
        Ast::Noise => 1,
        Ast::Num(_) | Ast::Parent(_) => 0,
        Ast::Add(a, b) | Ast::Sub(a, b) | Ast::Mul(a, b) | Ast::Div(a, b) => {
            noise_count(a) + noise_count(b)
        }
        Ast::Neg(a) | Ast::Sin(a) => noise_count(a),
    }
}

// ---------------------------------------------------------------------------
// Noise-free location expressions
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
enum Expr {
    Const(f64),
    Parent(usize),
    Add(Box<Expr>, Box<Expr>),
    Sub(Box<Expr>, Box<Expr>),
    Mul(Box<Expr>, Box<Expr>),
    Div(Box<Expr>, Box<Expr>),
    Neg(Box<Expr>),
    Sin(Box<Expr>),
}

/// Splits `ast` into `(g, scale)` with `ast = g + scale·u`; `scale` is `None` when `u` is absent.
fn split_noise(ast: &Ast, text: &str) -> Result<(Expr, Option<f64>), MechanismError> {
    let non_monotone = || MechanismError::NonMonotoneNoise(text.to_string());
    Ok(match ast {
        Ast::Num(v) => (Expr::Const(*v), None),
        Ast::Parent(i) => (Expr::Parent(*i), None),
        Ast::Noise => (Expr::Const(0.0), Some(1.0)),
        Ast::Add(a, b) | Ast::Sub(a, b) => {
            let (ga, sa) = split_noise(a, text)?;
            let (gb, sb) = split_noise(b, text)?;
            let minus = matches!(ast, Ast::Sub(..));
            let sb = sb.map(|s| if minus { -s } else { s });
            let g = match (ga, gb) {
                (g, Expr::Const(c)) if c == 0.0 => g,
                (Expr::Const(c), g) if c == 0.0 && !minus => g,
                (Expr::Const(c), g) if c == 0.0 => Expr::Neg(Box::new(g)),
                (ga, gb) if minus => Expr::Sub(Box::new(ga), Box::new(gb)),
                (ga, gb) => Expr::Add(Box::new(ga), Box::new(gb)),
            };
            (g, sa.or(sb))
        }
        Ast::Mul(a, b) => {
            let (ga, sa) = split_noise(a, text)?;
            let (gb, sb) = split_noise(b, text)?;
            match (sa, sb) {
                (None, None) => (Expr::Mul(Box::new(ga), Box::new(gb)), None),
                (Some(s), None) => {
                    let c = constant_value(b).ok_or_else(non_monotone)?;
                    (scaled(ga, gb), Some(s * c))
                }
                (None, Some(s)) => {
                    let c = constant_value(a).ok_or_else(non_monotone)?;
                    (scaled(gb, ga), Some(c * s))
                }
                (Some(_), Some(_)) => return Err(non_monotone()),
            }
        }
        Ast::Div(a, b) => {
            let (ga, sa) = split_noise(a, text)?;
            let c = constant_value(b).ok_or_else(non_monotone)?;
            let (gb, _) = split_noise(b, text)?;
            (Expr::Div(Box::new(ga), Box::new(gb)), sa.map(|s| s / c))
        }
        Ast::Neg(a) => {
            let (g, s) = split_noise(a, text)?;
            (Expr::Neg(Box::new(g)), s.map(|s| -s))
        }
        Ast::Sin(a) => {
            let (g, s) = split_noise(a, text)?;
            if s.is_some() {
                return Err(non_monotone());
            }
            (Expr::Sin(Box::new(g)), None)
        }
    })
}

/// Location part of `noisy * constant`; a pure noise factor contributes nothing.
fn scaled(noisy: Expr, constant: Expr) -> Expr {
    match noisy {
        Expr::Const(c) if c == 0.0 => Expr::Const(0.0),
        g => Expr::Mul(Box::new(g), Box::new(constant)),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Op {
    Const(f64),
    Parent(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Neg(usize),
    Sin(usize),
}

/// Post-order tape of a noise-free expression; the last slot holds the result.
///
/// Evaluation is a single forward sweep; gradients with respect to the parent
/// values come from one reverse sweep over the same slots.
#[derive(Debug, Clone, PartialEq)]
pub struct Tape {
    ops: Vec<Op>,
}

impl Tape {
    fn compile(expr: &Expr) -> Self {
        fn emit(e: &Expr, ops: &mut Vec<Op>) -> usize {
            let op = match e {
                Expr::Const(c) => Op::Const(*c),
                Expr::Parent(i) => Op::Parent(*i),
                Expr::Add(a, b) => Op::Add(emit(a, ops), emit(b, ops)),
                Expr::Sub(a, b) => Op::Sub(emit(a, ops), emit(b, ops)),
                Expr::Mul(a, b) => Op::Mul(emit(a, ops), emit(b, ops)),
                Expr::Div(a, b) => Op::Div(emit(a, ops), emit(b, ops)),
                Expr::Neg(a) => Op::Neg(emit(a, ops)),
                Expr::Sin(a) => Op::Sin(emit(a, ops)),
            };
            ops.push(op);
            ops.len() - 1
        }
        let mut ops = Vec::new();
        emit(expr, &mut ops);
        Self { ops }
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    /// Evaluates into `slots` (resized as needed) and returns the result.
    pub fn eval_with(&self, pa: &[f64], slots: &mut Vec<f64>) -> f64 {
        slots.clear();
        for op in &self.ops {
            let v = match *op {
                Op::Const(c) => c,
                Op::Parent(i) => pa[i],
                Op::Add(a, b) => slots[a] + slots[b],
                Op::Sub(a, b) => slots[a] - slots[b],
                Op::Mul(a, b) => slots[a] * slots[b],
                Op::Div(a, b) => slots[a] / slots[b],
                Op::Neg(a) => -slots[a],
                Op::Sin(a) => slots[a].sin(),
            };
            slots.push(v);
        }
        *slots.last().expect("tape is never empty")
    }

    pub fn eval(&self, pa: &[f64]) -> f64 {
        let mut slots = Vec::with_capacity(self.ops.len());
        self.eval_with(pa, &mut slots)
    }

    /// Adds `seed · ∂g/∂pa_i` to `grad[i]`. `slots` must hold the values of
    /// the preceding [`Tape::eval_with`] call for the same `pa`.
    pub fn accumulate_grad(&self, slots: &[f64], seed: f64, adj: &mut Vec<f64>, grad: &mut [f64]) {
        adj.clear();
        adj.resize(self.ops.len(), 0.0);
        *adj.last_mut().expect("tape is never empty") = seed;
        for k in (0..self.ops.len()).rev() {
            let a_k = adj[k];
            if a_k == 0.0 {
                continue;
            }
            match self.ops[k] {
                Op::Const(_) => {}
                Op::Parent(i) => grad[i] += a_k,
                Op::Add(a, b) => {
                    adj[a] += a_k;
                    adj[b] += a_k;
                }
                Op::Sub(a, b) => {
                    adj[a] += a_k;
                    adj[b] -= a_k;
                }
                Op::Mul(a, b) => {
                    adj[a] += a_k * slots[b];
                    adj[b] += a_k * slots[a];
                }
                Op::Div(a, b) => {
                    adj[a] += a_k / slots[b];
                    adj[b] -= a_k * slots[a] / (slots[b] * slots[b]);
                }
                Op::Neg(a) => adj[a] -= a_k,
                Op::Sin(a) => adj[a] += a_k * slots[a].cos(),
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Mechanism
// ---------------------------------------------------------------------------

/// An invertible additive-noise mechanism `v = g(pa) + scale·u`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mechanism {
    source: String,
    parents: Vec<VariableId>,
    location: Tape,
    scale: f64,
    noise: NoiseDistribution,
}

impl fmt::Display for Mechanism {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.source)
    }
}

pub fn parse_mechanism(text: &str, parents: &[VariableId]) -> Result<Mechanism, MechanismError> {
    Mechanism::parse(text, parents, NoiseDistribution::StandardNormal)
}

impl Mechanism {
    pub fn parse(
        text: &str,
        parents: &[VariableId],
        noise: NoiseDistribution,
    ) -> Result<Self, MechanismError> {
        let tokens = lex(text)?;
        let mut parser = Parser { tokens, pos: 0, len: text.len(), parents };
        let ast = parser.expr()?;
        if parser.pos != parser.tokens.len() {
            return parser.error("trailing input");
        }
        match noise_count(&ast) {
            1 => {}
            0 => return Err(MechanismError::NonMonotoneNoise(format!("{text}: no noise term `u`"))),
            _ => {
                return Err(MechanismError::NonMonotoneNoise(format!(
                    "{text}: noise term `u` must appear exactly once"
                )))
            }
        }
        let (g, scale) = split_noise(&ast, text)?;
        let scale = scale.expect("exactly one noise occurrence");
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(MechanismError::NonMonotoneNoise(format!("{text}: scale {scale} is not positive")));
        }
        Ok(Self {
            source: text.to_string(),
            parents: parents.to_vec(),
            location: Tape::compile(&g),
            scale,
            noise,
        })
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    pub fn parents(&self) -> &[VariableId] {
        &self.parents
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn noise(&self) -> NoiseDistribution {
        self.noise
    }

    pub fn tape(&self) -> &Tape {
        &self.location
    }

    fn check_arity(&self, pa: &[f64]) -> Result<(), MechanismError> {
        if pa.len() != self.parents.len() {
            return Err(MechanismError::ArityMismatch { expected: self.parents.len(), got: pa.len() });
        }
        Ok(())
    }

    /// `g(pa)`, the conditional location.
    pub fn location(&self, pa: &[f64]) -> Result<f64, MechanismError> {
        self.check_arity(pa)?;
        Ok(self.location.eval(pa))
    }

    pub fn forward(&self, pa: &[f64], u: f64) -> Result<f64, MechanismError> {
        Ok(self.location(pa)? + self.scale * u)
    }

    pub fn inverse(&self, pa: &[f64], v: f64) -> Result<f64, MechanismError> {
        Ok((v - self.location(pa)?) / self.scale)
    }

    /// `F(v | pa)`; identical to `noise.cdf(inverse(pa, v))` by construction.
    pub fn conditional_cdf(&self, v: f64, pa: &[f64]) -> Result<f64, MechanismError> {
        Ok(self.noise.cdf(self.inverse(pa, v)?))
    }

    /// `(H(V | pa), ln p(v | pa))`, both in nats.
    pub fn conditional_entropy_and_logdensity(
        &self,
        v: f64,
        pa: &[f64],
    ) -> Result<(f64, f64), MechanismError> {
        if !self.noise.has_density() {
            return Err(MechanismError::UnsupportedMeasure(self.noise.name()));
        }
        let u = self.inverse(pa, v)?;
        let ln_s = self.scale.ln();
        Ok((self.noise.entropy() + ln_s, self.noise.ln_pdf(u) - ln_s))
    }
}
