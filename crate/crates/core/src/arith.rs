//! Arithmetic stress-test expressions: long chains of shallow terms versus
//! single deeply nested expressions, evaluated exactly over the rationals.

use std::fmt;

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::Zero;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

const MAX_RESAMPLES: usize = 1000;
/// Probability that a side of a shallow chain term is a parenthesized pair
/// rather than a bare digit.
const PAIR_SIDE_PROB: f64 = 0.75;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Op {
    Add,
    Sub,
    Mul,
    Div,
}

impl Op {
    const ALL: [Op; 4] = [Op::Add, Op::Sub, Op::Mul, Op::Div];

    fn symbol(self) -> char {
        match self {
            Op::Add => '+',
            Op::Sub => '-',
            Op::Mul => '*',
            Op::Div => '/',
        }
    }

    fn binds_tighter(self) -> bool {
        matches!(self, Op::Mul | Op::Div)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Expr {
    Num(u64),
    Bin(Op, Box<Expr>, Box<Expr>),
    Paren(Box<Expr>),
}

impl Expr {
    fn bin(op: Op, a: Expr, b: Expr) -> Expr {
        Expr::Bin(op, Box::new(a), Box::new(b))
    }

    fn paren(e: Expr) -> Expr {
        Expr::Paren(Box::new(e))
    }

    /// Maximum nesting level of parentheses.
    pub fn depth(&self) -> usize {
        match self {
            Expr::Num(_) => 0,
            Expr::Bin(_, a, b) => a.depth().max(b.depth()),
            Expr::Paren(e) => 1 + e.depth(),
        }
    }

    /// Number of top-level `+`-joined terms.
    pub fn n_terms(&self) -> usize {
        match self {
            Expr::Bin(Op::Add, a, _) => a.n_terms() + 1,
            _ => 1,
        }
    }

    pub fn leaves(&self) -> Vec<u64> {
        match self {
            Expr::Num(n) => vec![*n],
            Expr::Bin(_, a, b) => {
                let mut v = a.leaves();
                v.extend(b.leaves());
                v
            }
            Expr::Paren(e) => e.leaves(),
        }
    }

    pub fn eval(&self) -> Result<BigRational, ArithError> {
        match self {
            Expr::Num(n) => Ok(BigRational::from_integer(BigInt::from(*n))),
            Expr::Paren(e) => e.eval(),
            Expr::Bin(op, a, b) => {
                let (x, y) = (a.eval()?, b.eval()?);
                Ok(match op {
                    Op::Add => x + y,
                    Op::Sub => x - y,
                    Op::Mul => x * y,
                    Op::Div => {
                        if y.is_zero() {
                            return Err(ArithError::DivisionByZero(self.to_string()));
                        }
                        x / y
                    }
                })
            }
        }
    }

    /// Double-precision evaluation, for cross-checks only.
    pub fn eval_f64(&self) -> f64 {
        match self {
            Expr::Num(n) => *n as f64,
            Expr::Paren(e) => e.eval_f64(),
            Expr::Bin(op, a, b) => {
                let (x, y) = (a.eval_f64(), b.eval_f64());
                match op {
                    Op::Add => x + y,
                    Op::Sub => x - y,
                    Op::Mul => x * y,
                    Op::Div => x / y,
                }
            }
        }
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expr::Num(n) => write!(f, "{n}"),
            Expr::Paren(e) => write!(f, "({e})"),
            Expr::Bin(op, a, b) => write!(f, "{a} {} {b}", op.symbol()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ArithError {
    #[error("parse error at byte {pos}: {message}")]
    Parse { pos: usize, message: String },
    #[error("division by zero in `{0}`")]
    DivisionByZero(String),
    #[error("no expression without division by zero after {0} draws")]
    ResampleBudgetExhausted(usize),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

struct Parser<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Parser<'_> {
    fn skip_ws(&mut self) {
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn peek(&mut self) -> Option<u8> {
        self.skip_ws();
        self.bytes.get(self.pos).copied()
    }

    fn err(&self, message: &str) -> ArithError {
        ArithError::Parse {
            pos: self.pos,
            message: message.to_string(),
        }
    }

    fn op(c: u8) -> Option<Op> {
        match c {
            b'+' => Some(Op::Add),
            b'-' => Some(Op::Sub),
            b'*' => Some(Op::Mul),
            b'/' => Some(Op::Div),
            _ => None,
        }
    }

    /// sum := product (('+' | '-') product)*
    fn sum(&mut self) -> Result<Expr, ArithError> {
        let mut e = self.product()?;
        while let Some(op) = self.peek().and_then(Self::op).filter(|o| !o.binds_tighter()) {
            self.pos += 1;
            e = Expr::bin(op, e, self.product()?);
        }
        Ok(e)
    }

    fn product(&mut self) -> Result<Expr, ArithError> {
        let mut e = self.atom()?;
        while let Some(op) = self.peek().and_then(Self::op).filter(|o| o.binds_tighter()) {
            self.pos += 1;
            e = Expr::bin(op, e, self.atom()?);
        }
        Ok(e)
    }

    fn atom(&mut self) -> Result<Expr, ArithError> {
        match self.peek() {
            Some(b'(') => {
                self.pos += 1;
                let e = self.sum()?;
                if self.peek() != Some(b')') {
                    return Err(self.err("expected `)`"));
                }
                self.pos += 1;
                Ok(Expr::paren(e))
            }
            Some(c) if c.is_ascii_digit() => {
                let start = self.pos;
                while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
                    self.pos += 1;
                }
                let text = std::str::from_utf8(&self.bytes[start..self.pos]).unwrap();
                text.parse()
                    .map(Expr::Num)
                    .map_err(|_| self.err("integer too large"))
            }
            Some(_) => Err(self.err("expected a digit or `(`")),
            None => Err(self.err("unexpected end of input")),
        }
    }
}

/// Parses an expression; whitespace is ignored, `*` and `/` bind tighter
/// than `+` and `-`, and all operators associate to the left.
pub fn parse(text: &str) -> Result<Expr, ArithError> {
    let mut p = Parser {
        bytes: text.as_bytes(),
        pos: 0,
    };
    let e = p.sum()?;
    if p.peek().is_some() {
        return Err(p.err("trailing input"));
    }
    Ok(e)
}

pub fn eval_exact(text: &str) -> Result<BigRational, ArithError> {
    parse(text)?.eval()
}

/// `num/den` in lowest terms, denominator positive (`4/1` for integers).
pub fn format_rational(r: &BigRational) -> String {
    format!("{}/{}", r.numer(), r.denom())
}

fn rng(seed: u64, stream: u64) -> ChaCha20Rng {
    let mut r = ChaCha20Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

fn digit(r: &mut ChaCha20Rng) -> Expr {
    Expr::Num(r.gen_range(0..10))
}

fn op(r: &mut ChaCha20Rng) -> Op {
    Op::ALL[r.gen_range(0..4)]
}

fn pair(r: &mut ChaCha20Rng) -> Expr {
    let (a, o, b) = (digit(r), op(r), digit(r));
    Expr::paren(Expr::bin(o, a, b))
}

/// One term of a shallow chain: `(X op Y)` where each side is a
/// parenthesized digit pair or a bare digit.
fn shallow_term(r: &mut ChaCha20Rng) -> Expr {
    let side = |r: &mut ChaCha20Rng| {
        if r.gen_bool(PAIR_SIDE_PROB) {
            pair(r)
        } else {
            digit(r)
        }
    };
    let a = side(r);
    let o = op(r);
    let b = side(r);
    Expr::paren(Expr::bin(o, a, b))
}

fn resample(r: &mut ChaCha20Rng, f: impl Fn(&mut ChaCha20Rng) -> Expr) -> Result<Expr, ArithError> {
    for _ in 0..MAX_RESAMPLES {
        let e = f(r);
        if e.eval().is_ok() {
            return Ok(e);
        }
    }
    Err(ArithError::ResampleBudgetExhausted(MAX_RESAMPLES))
}

/// `n_terms` terms of depth ≤ 2 joined by `+`. Terms that divide by zero
/// are redrawn.
pub fn gen_shallow_chain(seed: u64, n_terms: usize) -> Result<Expr, ArithError> {
    if n_terms == 0 {
        return Err(ArithError::InvalidArgument("n_terms must be at least 1".into()));
    }
    let mut r = rng(seed, 1);
    let mut e = resample(&mut r, shallow_term)?;
    for _ in 1..n_terms {
        e = Expr::bin(Op::Add, e, resample(&mut r, shallow_term)?);
    }
    Ok(e)
}

fn full(r: &mut ChaCha20Rng, depth: usize) -> Expr {
    if depth == 0 {
        return digit(r);
    }
    let a = full(r, depth - 1);
    let o = op(r);
    let b = full(r, depth - 1);
    Expr::paren(Expr::bin(o, a, b))
}

/// A full binary expression nested `depth` levels deep. Whole draws that
/// divide by zero anywhere are redrawn.
pub fn gen_deep_expr(seed: u64, depth: usize) -> Result<Expr, ArithError> {
    if depth == 0 {
        return Err(ArithError::InvalidArgument("depth must be at least 1".into()));
    }
    let mut r = rng(seed, 2);
    resample(&mut r, |r| full(r, depth))
}

/// One line of the benchmark JSONL emitted for external harnesses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchItem {
    pub expr: String,
    pub depth: usize,
    pub n_terms: usize,
    pub result_num: String,
    pub result_den: String,
}

impl BenchItem {
    pub fn new(e: &Expr) -> Result<BenchItem, ArithError> {
        let v = e.eval()?;
        Ok(BenchItem {
            expr: e.to_string(),
            depth: e.depth(),
            n_terms: e.n_terms(),
            result_num: v.numer().to_string(),
            result_den: v.denom().to_string(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_cases() {
        assert_eq!(format_rational(&eval_exact("(2 + 2)").unwrap()), "4/1");
        assert_eq!(format_rational(&eval_exact("1 - 2 * 3").unwrap()), "-5/1");
        assert_eq!(format_rational(&eval_exact("(6 / 4)").unwrap()), "3/2");
        assert_eq!(format_rational(&eval_exact("8 / 4 / 2").unwrap()), "1/1");
        assert!(matches!(
            eval_exact("(1 + (2 / (3 - 3)))"),
            Err(ArithError::DivisionByZero(s)) if s == "2 / (3 - 3)"
        ));
        assert!(matches!(eval_exact("(1 +"), Err(ArithError::Parse { .. })));
        assert!(matches!(eval_exact("1 2"), Err(ArithError::Parse { pos: 2, .. })));
    }

    #[test]
    fn depth_and_terms() {
        let e = parse("((4 * 4) * (1 - 9)) + ((6 / 3) * 5) + 1").unwrap();
        assert_eq!(e.depth(), 2);
        assert_eq!(e.n_terms(), 3);
        assert_eq!(parse("7").unwrap().depth(), 0);
    }

    #[test]
    fn generators() {
        for seed in 0..20 {
            let c = gen_shallow_chain(seed, 50).unwrap();
            assert_eq!(c.n_terms(), 50);
            assert!(c.depth() <= 2);
            assert!(c.eval().is_ok());
            let d = gen_deep_expr(seed, 7).unwrap();
            assert_eq!(d.depth(), 7);
            assert_eq!(d.leaves().len(), 128);
            assert!(d.leaves().iter().all(|&x| x <= 9));
            assert!(d.eval().is_ok());
        }
        let one = gen_shallow_chain(3, 1).unwrap();
        assert_eq!(one.n_terms(), 1);
        let d1 = gen_deep_expr(3, 1).unwrap();
        assert!(matches!(&d1, Expr::Paren(inner) if matches!(**inner, Expr::Bin(_, _, _))));
        assert_ne!(gen_shallow_chain(1, 50).unwrap(), gen_shallow_chain(2, 50).unwrap());
        assert!(gen_deep_expr(0, 0).is_err());
        assert!(gen_shallow_chain(0, 0).is_err());
    }

    #[test]
    fn print_round_trip() {
        for seed in 0..10 {
            for e in [gen_shallow_chain(seed, 10).unwrap(), gen_deep_expr(seed, 5).unwrap()] {
                assert_eq!(parse(&e.to_string()).unwrap(), e);
            }
        }
    }

    #[test]
    fn float_cross_check() {
        use num_traits::ToPrimitive;
        for seed in 0..50 {
            let e = gen_shallow_chain(seed, 50).unwrap();
            let exact = e.eval().unwrap().to_f64().unwrap();
            if exact.abs() < 1e12 && exact != 0.0 {
                assert!(((e.eval_f64() - exact) / exact).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn bench_item() {
        let item = BenchItem::new(&parse("(1 / 3) + 1").unwrap()).unwrap();
        assert_eq!((item.result_num.as_str(), item.result_den.as_str()), ("4", "3"));
        assert_eq!((item.depth, item.n_terms), (1, 2));
    }

    #[test]
    fn reference_expressions() {
        let chain = include_str!("../../../data/appendix_chain.txt");
        let deep = include_str!("../../../data/appendix_deep.txt");
        let c = parse(chain.trim()).unwrap();
        assert_eq!(format_rational(&c.eval().unwrap()), "707449/1260");
        assert_eq!(c.n_terms(), 50);
        assert!(c.depth() <= 2);
        let d = parse(deep.trim()).unwrap();
        // Cross-checked with an independent exact evaluator.
        assert_eq!(format_rational(&d.eval().unwrap()), "-7408002035031/13099520");
        assert_eq!(d.depth(), 7);
    }
}
