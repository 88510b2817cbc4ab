//! Expression language for vector-field coefficients.
//!
//! The grammar is deliberately small: exact rational constants, 1-based
//! coordinates `x1..xd`, negation, sums, products, `sin` and `cos`. This set
//! is closed under partial differentiation and every member is a total
//! `C^∞` function on `R^d`. Expressions in which every coordinate occurs
//! inside a `sin`/`cos` are trig-polynomial-like, hence bounded with all
//! derivatives bounded, and `2π`-periodic when the arguments are themselves
//! coordinates.

use std::fmt;
use std::sync::Arc;

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{One, Signed, ToPrimitive, Zero};
use thiserror::Error;

/// Symbolic expression over coordinates `x1..xd`.
///
/// Constants are exact rationals; evaluation converts to `f64` once at the
/// leaves.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Expr {
    Const(BigRational),
    /// 1-based coordinate index.
    Coord(usize),
    Neg(Arc<Expr>),
    Sum(Vec<Arc<Expr>>),
    Prod(Vec<Arc<Expr>>),
    Sin(Arc<Expr>),
    Cos(Arc<Expr>),
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ParseError {
    #[error("syntax error at position {pos}: {msg}")]
    Syntax { pos: usize, msg: String },
    #[error("coordinate index {index} out of range [1,{dim}] at position {pos}")]
    CoordOutOfRange {
        index: usize,
        dim: usize,
        pos: usize,
    },
}

impl Expr {
    pub fn zero() -> Expr {
        Expr::Const(BigRational::zero())
    }

    pub fn one() -> Expr {
        Expr::Const(BigRational::one())
    }

    pub fn int(n: i64) -> Expr {
        Expr::Const(BigRational::from_integer(BigInt::from(n)))
    }

    pub fn rational(num: i64, den: i64) -> Expr {
        Expr::Const(BigRational::new(BigInt::from(num), BigInt::from(den)))
    }

    /// Coordinate `x_k`, 1-based.
    pub fn coord(k: usize) -> Expr {
        assert!(k >= 1, "coordinates are 1-based");
        Expr::Coord(k)
    }

    pub fn sin(e: Expr) -> Expr {
        Expr::Sin(Arc::new(e))
    }

    pub fn cos(e: Expr) -> Expr {
        Expr::Cos(Arc::new(e))
    }

    // `neg`/`add`/`mul` are constructors, not the std ops traits: they
    // take and return plain `Expr` values without reference plumbing.
    #[allow(clippy::should_implement_trait)]
    pub fn neg(e: Expr) -> Expr {
        Expr::Neg(Arc::new(e))
    }

    pub fn sum(terms: Vec<Expr>) -> Expr {
        Expr::Sum(terms.into_iter().map(Arc::new).collect())
    }

    pub fn prod(factors: Vec<Expr>) -> Expr {
        Expr::Prod(factors.into_iter().map(Arc::new).collect())
    }

    #[allow(clippy::should_implement_trait)]
    pub fn add(self, other: Expr) -> Expr {
        Expr::sum(vec![self, other])
    }

    #[allow(clippy::should_implement_trait)]
    pub fn mul(self, other: Expr) -> Expr {
        Expr::prod(vec![self, other])
    }

    pub fn scale(self, c: &BigRational) -> Expr {
        Expr::prod(vec![Expr::Const(c.clone()), self])
    }

    pub fn is_zero_const(&self) -> bool {
        matches!(self, Expr::Const(c) if c.is_zero())
    }

    /// Largest coordinate index occurring in the expression (0 if none).
    pub fn max_coord(&self) -> usize {
        match self {
            Expr::Const(_) => 0,
            Expr::Coord(k) => *k,
            Expr::Neg(e) | Expr::Sin(e) | Expr::Cos(e) => e.max_coord(),
            Expr::Sum(es) | Expr::Prod(es) => es.iter().map(|e| e.max_coord()).max().unwrap_or(0),
        }
    }

    /// Syntactic boundedness: every coordinate node sits under a sin/cos.
    pub fn is_bounded(&self) -> bool {
        match self {
            Expr::Const(_) => true,
            Expr::Coord(_) => false,
            Expr::Neg(e) => e.is_bounded(),
            Expr::Sum(es) | Expr::Prod(es) => es.iter().all(|e| e.is_bounded()),
            Expr::Sin(_) | Expr::Cos(_) => true,
        }
    }

    /// Exact partial derivative `∂_k self`.
    pub fn differentiate(&self, k: usize) -> Expr {
        match self {
            Expr::Const(_) => Expr::zero(),
            Expr::Coord(j) => {
                if *j == k {
                    Expr::one()
                } else {
                    Expr::zero()
                }
            }
            Expr::Neg(e) => Expr::neg(e.differentiate(k)),
            Expr::Sum(es) => Expr::Sum(es.iter().map(|e| Arc::new(e.differentiate(k))).collect()),
            Expr::Prod(es) => {
                // Leibniz rule over the full factor list.
                let mut terms = Vec::with_capacity(es.len());
                for (i, _) in es.iter().enumerate() {
                    let factors: Vec<Arc<Expr>> = es
                        .iter()
                        .enumerate()
                        .map(|(j, f)| {
                            if i == j {
                                Arc::new(f.differentiate(k))
                            } else {
                                f.clone()
                            }
                        })
                        .collect();
                    terms.push(Arc::new(Expr::Prod(factors)));
                }
                Expr::Sum(terms)
            }
            Expr::Sin(e) => Expr::Prod(vec![
                Arc::new(Expr::Cos(e.clone())),
                Arc::new(e.differentiate(k)),
            ]),
            Expr::Cos(e) => Expr::neg(Expr::Prod(vec![
                Arc::new(Expr::Sin(e.clone())),
                Arc::new(e.differentiate(k)),
            ])),
        }
    }

    /// Evaluate at a point. The point must have at least `max_coord`
    /// components.
    pub fn eval(&self, x: &[f64]) -> f64 {
        match self {
            Expr::Const(c) => rational_to_f64(c),
            Expr::Coord(k) => x[*k - 1],
            Expr::Neg(e) => -e.eval(x),
            Expr::Sum(es) => es.iter().map(|e| e.eval(x)).sum(),
            Expr::Prod(es) => es.iter().map(|e| e.eval(x)).product(),
            Expr::Sin(e) => e.eval(x).sin(),
            Expr::Cos(e) => e.eval(x).cos(),
        }
    }

    /// Best-effort simplification: constant folding, zero/one elimination,
    /// flattening of nested sums and products. The result is pointwise equal
    /// to the input; only the exact zero is recognised structurally.
    pub fn simplify(&self) -> Expr {
        match self {
            Expr::Const(_) | Expr::Coord(_) => self.clone(),
            Expr::Neg(e) => match e.simplify() {
                Expr::Const(c) => Expr::Const(-c),
                Expr::Neg(inner) => (*inner).clone(),
                s => Expr::neg(s),
            },
            Expr::Sin(e) => {
                let s = e.simplify();
                if s.is_zero_const() {
                    Expr::zero()
                } else {
                    Expr::sin(s)
                }
            }
            Expr::Cos(e) => {
                let s = e.simplify();
                if s.is_zero_const() {
                    Expr::one()
                } else {
                    Expr::cos(s)
                }
            }
            Expr::Sum(es) => {
                let mut constant = BigRational::zero();
                let mut terms: Vec<Arc<Expr>> = Vec::new();
                for e in es {
                    match e.simplify() {
                        Expr::Const(c) => constant += c,
                        Expr::Sum(inner) => {
                            for t in inner {
                                match &*t {
                                    Expr::Const(c) => constant += c.clone(),
                                    _ => terms.push(t),
                                }
                            }
                        }
                        // Distribute negation over sums so cancellation
                        // sees matching flattened terms on both sides.
                        Expr::Neg(inner) => match &*inner {
                            Expr::Sum(ts) => {
                                for t in ts {
                                    match &**t {
                                        Expr::Const(c) => constant -= c.clone(),
                                        Expr::Neg(u) => terms.push(u.clone()),
                                        _ => terms.push(Arc::new(Expr::Neg(t.clone()))),
                                    }
                                }
                            }
                            Expr::Const(c) => constant -= c.clone(),
                            _ => terms.push(Arc::new(Expr::Neg(inner))),
                        },
                        other => terms.push(Arc::new(other)),
                    }
                }
                // Cancel structurally opposite pairs (t, -t); this is what
                // collapses [X,X] and commuting brackets to the exact zero.
                let mut reduced: Vec<Arc<Expr>> = Vec::with_capacity(terms.len());
                'outer: for t in terms {
                    for (i, r) in reduced.iter().enumerate() {
                        if are_opposite(r, &t) {
                            reduced.remove(i);
                            continue 'outer;
                        }
                    }
                    reduced.push(t);
                }
                let mut terms = reduced;
                if !constant.is_zero() {
                    terms.push(Arc::new(Expr::Const(constant)));
                }
                match terms.len() {
                    0 => Expr::zero(),
                    1 => (*terms[0]).clone(),
                    _ => Expr::Sum(terms),
                }
            }
            Expr::Prod(es) => {
                let mut constant = BigRational::one();
                let mut factors: Vec<Arc<Expr>> = Vec::new();
                for e in es {
                    match e.simplify() {
                        Expr::Const(c) => {
                            if c.is_zero() {
                                return Expr::zero();
                            }
                            constant *= c;
                        }
                        Expr::Prod(inner) => {
                            for f in inner {
                                match &*f {
                                    Expr::Const(c) => {
                                        if c.is_zero() {
                                            return Expr::zero();
                                        }
                                        constant *= c.clone();
                                    }
                                    _ => factors.push(f),
                                }
                            }
                        }
                        Expr::Neg(inner) => {
                            constant = -constant;
                            factors.push(inner);
                        }
                        other => factors.push(Arc::new(other)),
                    }
                }
                if factors.is_empty() {
                    return Expr::Const(constant);
                }
                let body = if factors.len() == 1 {
                    (*factors[0]).clone()
                } else {
                    Expr::Prod(factors)
                };
                if constant.is_one() {
                    body
                } else if (-constant.clone()).is_one() {
                    Expr::neg(body)
                } else {
                    Expr::Prod(vec![Arc::new(Expr::Const(constant)), Arc::new(body)])
                }
            }
        }
    }
}

fn are_opposite(a: &Expr, b: &Expr) -> bool {
    match (a, b) {
        (Expr::Neg(inner), _) => **inner == *b,
        (_, Expr::Neg(inner)) => **inner == *a,
        _ => false,
    }
}

fn rational_to_f64(c: &BigRational) -> f64 {
    c.to_f64().unwrap_or_else(|| {
        // Fall back to a quotient of approximations for huge rationals.
        let n = c.numer().to_f64().unwrap_or(f64::NAN);
        let d = c.denom().to_f64().unwrap_or(f64::NAN);
        n / d
    })
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expr::Const(c) => {
                if c.is_negative() {
                    write!(f, "-")?;
                }
                let abs = c.abs();
                if abs.denom().is_one() {
                    write!(f, "{}", abs.numer())
                } else {
                    write!(f, "{}/{}", abs.numer(), abs.denom())
                }
            }
            Expr::Coord(k) => write!(f, "x{k}"),
            Expr::Neg(e) => write!(f, "-{}", Factor(e)),
            Expr::Sum(es) => {
                if es.is_empty() {
                    return write!(f, "0");
                }
                write!(f, "{}", Term(&es[0]))?;
                for e in &es[1..] {
                    write!(f, " + {}", Term(e))?;
                }
                Ok(())
            }
            Expr::Prod(es) => {
                if es.is_empty() {
                    return write!(f, "1");
                }
                write!(f, "{}", Factor(&es[0]))?;
                for e in &es[1..] {
                    write!(f, "*{}", Factor(e))?;
                }
                Ok(())
            }
            Expr::Sin(e) => write!(f, "sin({e})"),
            Expr::Cos(e) => write!(f, "cos({e})"),
        }
    }
}

/// Wraps nested sums in parentheses at sum level.
struct Term<'a>(&'a Expr);

impl fmt::Display for Term<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.0 {
            Expr::Sum(_) => write!(f, "({})", self.0),
            _ => write!(f, "{}", self.0),
        }
    }
}

/// Wraps sums (and nested products/negations inside products) in parentheses
/// so that printing re-parses to a structurally equal AST.
struct Factor<'a>(&'a Expr);

impl fmt::Display for Factor<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.0 {
            Expr::Sum(_) | Expr::Prod(_) | Expr::Neg(_) => write!(f, "({})", self.0),
            Expr::Const(c) if c.is_negative() => write!(f, "({})", self.0),
            _ => write!(f, "{}", self.0),
        }
    }
}

/// Parse `text` in dimension `d`.
///
/// Grammar:
/// `expr := term (('+'|'-') term)*`,
/// `term := factor ('*' factor)*`,
/// `factor := rational | 'x'k | 'sin(' expr ')' | 'cos(' expr ')' | '(' expr ')' | '-' factor`.
pub fn parse(text: &str, dimension: usize) -> Result<Expr, ParseError> {
    let mut p = Parser {
        src: text.as_bytes(),
        pos: 0,
        dim: dimension,
    };
    p.skip_ws();
    let e = p.expr()?;
    p.skip_ws();
    if p.pos != p.src.len() {
        return Err(p.err("unexpected trailing input"));
    }
    Ok(e)
}

struct Parser<'a> {
    src: &'a [u8],
    pos: usize,
    dim: usize,
}

impl Parser<'_> {
    fn err(&self, msg: &str) -> ParseError {
        ParseError::Syntax {
            pos: self.pos,
            msg: msg.to_string(),
        }
    }

    fn skip_ws(&mut self) {
        while self.pos < self.src.len() && self.src[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn peek(&self) -> Option<u8> {
        self.src.get(self.pos).copied()
    }

    fn eat(&mut self, c: u8) -> Result<(), ParseError> {
        if self.peek() == Some(c) {
            self.pos += 1;
            Ok(())
        } else {
            Err(self.err(&format!("expected '{}'", c as char)))
        }
    }

    fn expr(&mut self) -> Result<Expr, ParseError> {
        let mut terms = vec![Arc::new(self.term()?)];
        loop {
            self.skip_ws();
            match self.peek() {
                Some(b'+') => {
                    self.pos += 1;
                    self.skip_ws();
                    terms.push(Arc::new(self.term()?));
                }
                Some(b'-') => {
                    self.pos += 1;
                    self.skip_ws();
                    terms.push(Arc::new(Expr::neg(self.term()?)));
                }
                _ => break,
            }
        }
        if terms.len() == 1 {
            Ok(Arc::try_unwrap(terms.pop().unwrap()).unwrap_or_else(|a| (*a).clone()))
        } else {
            Ok(Expr::Sum(terms))
        }
    }

    fn term(&mut self) -> Result<Expr, ParseError> {
        let mut factors = vec![Arc::new(self.factor()?)];
        loop {
            self.skip_ws();
            if self.peek() == Some(b'*') {
                self.pos += 1;
                self.skip_ws();
                factors.push(Arc::new(self.factor()?));
            } else {
                break;
            }
        }
        if factors.len() == 1 {
            Ok(Arc::try_unwrap(factors.pop().unwrap()).unwrap_or_else(|a| (*a).clone()))
        } else {
            Ok(Expr::Prod(factors))
        }
    }

    fn factor(&mut self) -> Result<Expr, ParseError> {
        self.skip_ws();
        match self.peek() {
            Some(b'-') => {
                self.pos += 1;
                self.skip_ws();
                Ok(Expr::neg(self.factor()?))
            }
            Some(b'(') => {
                self.pos += 1;
                let e = self.expr()?;
                self.skip_ws();
                self.eat(b')')?;
                Ok(e)
            }
            Some(b'x') => self.coordinate(),
            Some(b's') | Some(b'c') => self.trig(),
            Some(c) if c.is_ascii_digit() => self.rational(),
            _ => Err(self.err("expected a factor")),
        }
    }

    fn coordinate(&mut self) -> Result<Expr, ParseError> {
        let start = self.pos;
        self.pos += 1; // 'x'
        let ds = self.digits()?;
        let index: usize = ds
            .parse()
            .map_err(|_| self.err("coordinate index too large"))?;
        if index < 1 || index > self.dim {
            return Err(ParseError::CoordOutOfRange {
                index,
                dim: self.dim,
                pos: start,
            });
        }
        Ok(Expr::Coord(index))
    }

    fn trig(&mut self) -> Result<Expr, ParseError> {
        let rest = &self.src[self.pos..];
        let (name, sin) = if rest.starts_with(b"sin") {
            ("sin", true)
        } else if rest.starts_with(b"cos") {
            ("cos", false)
        } else {
            return Err(self.err("expected 'sin' or 'cos'"));
        };
        self.pos += name.len();
        self.skip_ws();
        self.eat(b'(')?;
        let e = self.expr()?;
        self.skip_ws();
        self.eat(b')')?;
        Ok(if sin { Expr::sin(e) } else { Expr::cos(e) })
    }

    fn digits(&mut self) -> Result<String, ParseError> {
        let start = self.pos;
        while self.pos < self.src.len() && self.src[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if self.pos == start {
            return Err(self.err("expected digits"));
        }
        Ok(std::str::from_utf8(&self.src[start..self.pos])
            .unwrap()
            .to_string())
    }

    fn rational(&mut self) -> Result<Expr, ParseError> {
        let int_part = self.digits()?;
        match self.peek() {
            Some(b'/') => {
                self.pos += 1;
                let den = self.digits()?;
                let n: BigInt = int_part.parse().unwrap();
                let d: BigInt = den.parse().unwrap();
                if d.is_zero() {
                    return Err(self.err("zero denominator"));
                }
                Ok(Expr::Const(BigRational::new(n, d)))
            }
            Some(b'.') => {
                self.pos += 1;
                let frac = self.digits()?;
                let n: BigInt = format!("{int_part}{frac}").parse().unwrap();
                let d = BigInt::from(10u32).pow(frac.len() as u32);
                Ok(Expr::Const(BigRational::new(n, d)))
            }
            _ => {
                let n: BigInt = int_part.parse().unwrap();
                Ok(Expr::Const(BigRational::from_integer(n)))
            }
        }
    }
}
