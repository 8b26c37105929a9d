//! Symbolic expression trees for ODE right-hand sides.
//!
//! An [`Expr`] is an immutable tree of constants, variables and unary/binary
//! operators. Subtraction is `Add` with a negated operand and division is
//! `Mul` with an `Inv` operand, so the binary operator set stays {add, mul}.
//!
//! Trees serialize to prefix (preorder) symbol lists, which is the form the
//! tokenizer consumes, and to a human-readable infix form used in reports and
//! in the ODEBench source file.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Largest system dimension the symbolic vocabulary supports (variables x0..x5).
pub const MAX_VARIABLES: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum UnaryOp {
    Sin,
    Cos,
    Tan,
    Cot,
    Exp,
    Log,
    Sqrt,
    Abs,
    Inv,
    Pow2,
    Pow3,
    Neg,
}

impl UnaryOp {
    pub const ALL: [UnaryOp; 12] = [
        UnaryOp::Sin,
        UnaryOp::Cos,
        UnaryOp::Tan,
        UnaryOp::Cot,
        UnaryOp::Exp,
        UnaryOp::Log,
        UnaryOp::Sqrt,
        UnaryOp::Abs,
        UnaryOp::Inv,
        UnaryOp::Pow2,
        UnaryOp::Pow3,
        UnaryOp::Neg,
    ];

    pub fn name(self) -> &'static str {
        match self {
            UnaryOp::Sin => "sin",
            UnaryOp::Cos => "cos",
            UnaryOp::Tan => "tan",
            UnaryOp::Cot => "cot",
            UnaryOp::Exp => "exp",
            UnaryOp::Log => "log",
            UnaryOp::Sqrt => "sqrt",
            UnaryOp::Abs => "abs",
            UnaryOp::Inv => "inv",
            UnaryOp::Pow2 => "pow2",
            UnaryOp::Pow3 => "pow3",
            UnaryOp::Neg => "neg",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|op| op.name() == name)
    }

    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            UnaryOp::Sin => x.sin(),
            UnaryOp::Cos => x.cos(),
            UnaryOp::Tan => x.tan(),
            UnaryOp::Cot => x.cos() / x.sin(),
            UnaryOp::Exp => x.exp(),
            // ln(0) = -inf and ln(x<0) = NaN; both are caught downstream.
            UnaryOp::Log => x.ln(),
            UnaryOp::Sqrt => x.sqrt(),
            UnaryOp::Abs => x.abs(),
            UnaryOp::Inv => 1.0 / x,
            UnaryOp::Pow2 => x * x,
            UnaryOp::Pow3 => x * x * x,
            UnaryOp::Neg => -x,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BinaryOp {
    Add,
    Mul,
}

impl BinaryOp {
    pub const ALL: [BinaryOp; 2] = [BinaryOp::Add, BinaryOp::Mul];

    pub fn name(self) -> &'static str {
        match self {
            BinaryOp::Add => "add",
            BinaryOp::Mul => "mul",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|op| op.name() == name)
    }

    #[inline]
    pub fn apply(self, a: f64, b: f64) -> f64 {
        match self {
            BinaryOp::Add => a + b,
            BinaryOp::Mul => a * b,
        }
    }
}

/// A symbolic expression. Equality is structural; no simplification is
/// ever applied.
#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Const(f64),
    Var(usize),
    Unary(UnaryOp, Box<Expr>),
    Binary(BinaryOp, Box<Expr>, Box<Expr>),
}

impl Expr {
    pub fn constant(v: f64) -> Self {
        Expr::Const(v)
    }

    pub fn var(i: usize) -> Self {
        Expr::Var(i)
    }

    pub fn unary(op: UnaryOp, e: Expr) -> Self {
        Expr::Unary(op, Box::new(e))
    }

    pub fn binary(op: BinaryOp, l: Expr, r: Expr) -> Self {
        Expr::Binary(op, Box::new(l), Box::new(r))
    }

    pub fn add(l: Expr, r: Expr) -> Self {
        Self::binary(BinaryOp::Add, l, r)
    }

    pub fn mul(l: Expr, r: Expr) -> Self {
        Self::binary(BinaryOp::Mul, l, r)
    }

    /// Evaluates the expression at `x`. Domain violations yield non-finite
    /// values instead of errors.
    ///
    /// Panics if a variable index is out of bounds for `x`.
    pub fn evaluate(&self, x: &[f64]) -> f64 {
        match self {
            Expr::Const(c) => *c,
            Expr::Var(i) => x[*i],
            Expr::Unary(op, e) => op.apply(e.evaluate(x)),
            Expr::Binary(op, l, r) => op.apply(l.evaluate(x), r.evaluate(x)),
        }
    }

    /// Number of operators, variables and constants in the tree.
    pub fn complexity(&self) -> usize {
        match self {
            Expr::Const(_) | Expr::Var(_) => 1,
            Expr::Unary(_, e) => 1 + e.complexity(),
            Expr::Binary(_, l, r) => 1 + l.complexity() + r.complexity(),
        }
    }

    /// Number of nodes on the longest root-to-leaf path (a leaf has depth 1).
    pub fn depth(&self) -> usize {
        match self {
            Expr::Const(_) | Expr::Var(_) => 1,
            Expr::Unary(_, e) => 1 + e.depth(),
            Expr::Binary(_, l, r) => 1 + l.depth().max(r.depth()),
        }
    }

    /// Largest variable index used, if any.
    pub fn max_variable(&self) -> Option<usize> {
        match self {
            Expr::Const(_) => None,
            Expr::Var(i) => Some(*i),
            Expr::Unary(_, e) => e.max_variable(),
            Expr::Binary(_, l, r) => match (l.max_variable(), r.max_variable()) {
                (Some(a), Some(b)) => Some(a.max(b)),
                (a, b) => a.or(b),
            },
        }
    }

    /// Constants in preorder.
    pub fn constants(&self) -> Vec<f64> {
        let mut out = Vec::new();
        self.visit(&mut |e| {
            if let Expr::Const(c) = e {
                out.push(*c);
            }
        });
        out
    }

    pub fn constant_count(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |e| {
            if matches!(e, Expr::Const(_)) {
                n += 1;
            }
        });
        n
    }

    /// Returns a copy with the constants replaced, in preorder, by `values`.
    ///
    /// Panics if `values` is shorter than the number of constants.
    pub fn with_constants(&self, values: &[f64]) -> Expr {
        let mut it = values.iter().copied();
        self.replace_constants(&mut it)
    }

    fn replace_constants(&self, it: &mut impl Iterator<Item = f64>) -> Expr {
        match self {
            Expr::Const(_) => Expr::Const(it.next().expect("not enough constants")),
            Expr::Var(i) => Expr::Var(*i),
            Expr::Unary(op, e) => Expr::unary(*op, e.replace_constants(it)),
            Expr::Binary(op, l, r) => {
                let l = l.replace_constants(it);
                let r = r.replace_constants(it);
                Expr::binary(*op, l, r)
            }
        }
    }

    /// Replaces every variable `x_j` by `f(j)`.
    pub fn substitute_variables(&self, f: &impl Fn(usize) -> Expr) -> Expr {
        match self {
            Expr::Const(c) => Expr::Const(*c),
            Expr::Var(i) => f(*i),
            Expr::Unary(op, e) => Expr::unary(*op, e.substitute_variables(f)),
            Expr::Binary(op, l, r) => {
                Expr::binary(*op, l.substitute_variables(f), r.substitute_variables(f))
            }
        }
    }

    /// Preorder visit.
    pub fn visit<'a>(&'a self, f: &mut impl FnMut(&'a Expr)) {
        f(self);
        match self {
            Expr::Const(_) | Expr::Var(_) => {}
            Expr::Unary(_, e) => e.visit(f),
            Expr::Binary(_, l, r) => {
                l.visit(f);
                r.visit(f);
            }
        }
    }

    pub fn to_prefix(&self) -> Vec<Symbol> {
        let mut out = Vec::with_capacity(self.complexity());
        self.visit(&mut |e| {
            out.push(match e {
                Expr::Const(c) => Symbol::Const(*c),
                Expr::Var(i) => Symbol::Var(*i),
                Expr::Unary(op, _) => Symbol::Unary(*op),
                Expr::Binary(op, _, _) => Symbol::Binary(*op),
            })
        });
        out
    }

    /// Inverse of [`Expr::to_prefix`]; the whole list must be consumed.
    pub fn parse_prefix(symbols: &[Symbol]) -> Result<Expr, ParseError> {
        let mut pos = 0;
        let e = parse_prefix_at(symbols, &mut pos)?;
        if pos != symbols.len() {
            return Err(ParseError::TrailingSymbols {
                consumed: pos,
                total: symbols.len(),
            });
        }
        Ok(e)
    }

    /// Parses a prefix list given as text symbols (`"add"`, `"x0"`, `"2.5"`).
    pub fn parse_prefix_str<S: AsRef<str>>(symbols: &[S]) -> Result<Expr, ParseError> {
        let parsed = symbols
            .iter()
            .map(|s| s.as_ref().parse::<Symbol>())
            .collect::<Result<Vec<_>, _>>()?;
        Self::parse_prefix(&parsed)
    }

    /// Infix rendering; parses back to the identical tree with
    /// [`Expr::parse_infix`].
    pub fn to_infix(&self) -> String {
        let mut s = String::new();
        write_infix(self, &mut s);
        s
    }

    pub fn parse_infix(text: &str) -> Result<Expr, ParseError> {
        crate::infix::parse(text, &[])
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_infix())
    }
}

fn parse_prefix_at(symbols: &[Symbol], pos: &mut usize) -> Result<Expr, ParseError> {
    let Some(sym) = symbols.get(*pos) else {
        return Err(ParseError::Truncated { at: *pos });
    };
    *pos += 1;
    Ok(match *sym {
        Symbol::Const(c) => Expr::Const(c),
        Symbol::Var(i) => Expr::Var(i),
        Symbol::Unary(op) => Expr::unary(op, parse_prefix_at(symbols, pos)?),
        Symbol::Binary(op) => {
            let l = parse_prefix_at(symbols, pos)?;
            let r = parse_prefix_at(symbols, pos)?;
            Expr::binary(op, l, r)
        }
    })
}

/// One element of a prefix-notation expression.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Symbol {
    Unary(UnaryOp),
    Binary(BinaryOp),
    Var(usize),
    Const(f64),
}

impl fmt::Display for Symbol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Symbol::Unary(op) => f.write_str(op.name()),
            Symbol::Binary(op) => f.write_str(op.name()),
            Symbol::Var(i) => write!(f, "x{i}"),
            Symbol::Const(c) => write!(f, "{c:?}"),
        }
    }
}

impl FromStr for Symbol {
    type Err = ParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if let Some(op) = UnaryOp::from_name(s) {
            return Ok(Symbol::Unary(op));
        }
        if let Some(op) = BinaryOp::from_name(s) {
            return Ok(Symbol::Binary(op));
        }
        if let Some(idx) = s.strip_prefix('x') {
            if let Ok(i) = idx.parse::<usize>() {
                return Ok(Symbol::Var(i));
            }
        }
        match s.parse::<f64>() {
            Ok(v) if v.is_finite() => Ok(Symbol::Const(v)),
            _ => Err(ParseError::UnknownSymbol(s.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ParseError {
    #[error("expression truncated at symbol {at}")]
    Truncated { at: usize },
    #[error("trailing symbols: consumed {consumed} of {total}")]
    TrailingSymbols { consumed: usize, total: usize },
    #[error("unknown symbol `{0}`")]
    UnknownSymbol(String),
    #[error("infix syntax error at byte {pos}: {msg}")]
    Syntax { pos: usize, msg: String },
}

/// An ODE system `dx/dt = f(x)` with one expression per component.
#[derive(Debug, Clone, PartialEq)]
pub struct OdeSystem {
    components: Vec<Expr>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SystemError {
    #[error("a system needs at least one component")]
    Empty,
    #[error("component {component} uses x{index} but the system has dimension {dim}")]
    VariableOutOfRange {
        component: usize,
        index: usize,
        dim: usize,
    },
}

impl OdeSystem {
    pub fn new(components: Vec<Expr>) -> Result<Self, SystemError> {
        if components.is_empty() {
            return Err(SystemError::Empty);
        }
        let dim = components.len();
        for (c, e) in components.iter().enumerate() {
            if let Some(index) = e.max_variable() {
                if index >= dim {
                    return Err(SystemError::VariableOutOfRange {
                        component: c,
                        index,
                        dim,
                    });
                }
            }
        }
        Ok(Self { components })
    }

    pub fn dim(&self) -> usize {
        self.components.len()
    }

    pub fn components(&self) -> &[Expr] {
        &self.components
    }

    pub fn into_components(self) -> Vec<Expr> {
        self.components
    }

    /// Writes `f(x)` into `out`.
    #[inline]
    pub fn eval_into(&self, x: &[f64], out: &mut [f64]) {
        for (o, e) in out.iter_mut().zip(&self.components) {
            *o = e.evaluate(x);
        }
    }

    pub fn evaluate(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        self.eval_into(x, &mut out);
        out
    }

    pub fn complexity(&self) -> usize {
        self.components.iter().map(Expr::complexity).sum()
    }

    /// All constants, component by component in preorder.
    pub fn constants(&self) -> Vec<f64> {
        self.components.iter().flat_map(|e| e.constants()).collect()
    }

    pub fn constant_count(&self) -> usize {
        self.components.iter().map(Expr::constant_count).sum()
    }

    /// Same structure with constants replaced in the order of
    /// [`OdeSystem::constants`].
    pub fn with_constants(&self, values: &[f64]) -> OdeSystem {
        assert_eq!(values.len(), self.constant_count(), "constant count mismatch");
        let mut offset = 0;
        let components = self
            .components
            .iter()
            .map(|e| {
                let n = e.constant_count();
                let out = e.with_constants(&values[offset..offset + n]);
                offset += n;
                out
            })
            .collect();
        OdeSystem { components }
    }

    /// Components joined with ` | `.
    pub fn to_infix(&self) -> String {
        self.components
            .iter()
            .map(Expr::to_infix)
            .collect::<Vec<_>>()
            .join(" | ")
    }

    /// Prefix symbol lists joined by a `|` marker, as text.
    pub fn to_prefix_strings(&self) -> Vec<String> {
        let mut out = Vec::new();
        for (i, e) in self.components.iter().enumerate() {
            if i > 0 {
                out.push("|".to_string());
            }
            out.extend(e.to_prefix().iter().map(Symbol::to_string));
        }
        out
    }

    pub fn from_prefix_strings<S: AsRef<str>>(symbols: &[S]) -> Result<Self, ParseError> {
        let mut comps = Vec::new();
        for seg in symbols.split(|s| s.as_ref() == "|") {
            comps.push(Expr::parse_prefix_str(seg)?);
        }
        OdeSystem::new(comps).map_err(|e| ParseError::Syntax {
            pos: 0,
            msg: e.to_string(),
        })
    }
}

impl fmt::Display for OdeSystem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_infix())
    }
}

// Precedence levels for infix rendering.
const PREC_ADD: u8 = 1;
const PREC_MUL: u8 = 2;
const PREC_ATOM: u8 = 4;

fn prec(e: &Expr) -> u8 {
    match e {
        Expr::Binary(BinaryOp::Add, ..) => PREC_ADD,
        Expr::Binary(BinaryOp::Mul, ..) => PREC_MUL,
        // Negative literals and negations print with a leading minus and bind
        // like a prefix operator.
        Expr::Unary(UnaryOp::Neg, _) => 3,
        Expr::Const(c) if c.is_sign_negative() => 3,
        _ => PREC_ATOM,
    }
}

fn write_const(c: f64, out: &mut String) {
    // Debug formatting is the shortest representation that round-trips.
    out.push_str(&format!("{c:?}"));
}

fn write_wrapped(e: &Expr, need: u8, out: &mut String) {
    if prec(e) < need {
        out.push('(');
        write_infix(e, out);
        out.push(')');
    } else {
        write_infix(e, out);
    }
}

fn write_infix(e: &Expr, out: &mut String) {
    match e {
        Expr::Const(c) => write_const(*c, out),
        Expr::Var(i) => {
            out.push('x');
            out.push_str(&i.to_string());
        }
        Expr::Unary(UnaryOp::Neg, inner) => {
            out.push('-');
            match inner.as_ref() {
                Expr::Var(_) => write_infix(inner, out),
                _ => {
                    out.push('(');
                    write_infix(inner, out);
                    out.push(')');
                }
            }
        }
        Expr::Unary(op, inner) => {
            out.push_str(op.name());
            out.push('(');
            write_infix(inner, out);
            out.push(')');
        }
        Expr::Binary(BinaryOp::Add, l, r) => {
            write_wrapped(l, PREC_ADD, out);
            // add(a, neg(b)) renders as `a - b`, which parses back to the
            // same tree.
            if let Expr::Unary(UnaryOp::Neg, b) = r.as_ref() {
                out.push_str(" - ");
                write_wrapped(b, PREC_MUL, out);
            } else {
                out.push_str(" + ");
                write_wrapped(r, PREC_MUL, out);
            }
        }
        Expr::Binary(BinaryOp::Mul, l, r) => {
            write_wrapped(l, PREC_MUL, out);
            out.push_str(" * ");
            write_wrapped(r, PREC_ATOM - 1, out);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn x(i: usize) -> Expr {
        Expr::var(i)
    }

    #[test]
    fn evaluates_basic_expressions() {
        let e = Expr::unary(UnaryOp::Sin, x(0));
        assert_eq!(e.evaluate(&[0.0]), 0.0);

        // 0.79 * x0 * (1 - x0 / 74.3)
        let logistic = Expr::mul(
            Expr::mul(Expr::constant(0.79), x(0)),
            Expr::add(
                Expr::constant(1.0),
                Expr::unary(
                    UnaryOp::Neg,
                    Expr::mul(x(0), Expr::unary(UnaryOp::Inv, Expr::constant(74.3))),
                ),
            ),
        );
        let expected = 0.79 * 7.3 * (1.0 - 7.3 / 74.3);
        assert!((logistic.evaluate(&[7.3]) - expected).abs() < 1e-12);
        assert!((expected - 5.2004).abs() < 1e-4);

        let inv = Expr::unary(UnaryOp::Inv, x(0));
        assert!(!inv.evaluate(&[0.0]).is_finite());
    }

    #[test]
    fn domain_violations_are_non_finite() {
        assert!(!Expr::unary(UnaryOp::Log, x(0)).evaluate(&[-1.0]).is_finite());
        assert!(!Expr::unary(UnaryOp::Log, x(0)).evaluate(&[0.0]).is_finite());
        assert!(!Expr::unary(UnaryOp::Sqrt, x(0)).evaluate(&[-1.0]).is_finite());
        assert!(!Expr::unary(UnaryOp::Cot, x(0)).evaluate(&[0.0]).is_finite());
    }

    #[test]
    fn prefix_matches_hand_traversal() {
        let e = Expr::unary(UnaryOp::Cos, Expr::mul(Expr::constant(2.4242), x(0)));
        assert_eq!(
            e.to_prefix(),
            vec![
                Symbol::Unary(UnaryOp::Cos),
                Symbol::Binary(BinaryOp::Mul),
                Symbol::Const(2.4242),
                Symbol::Var(0)
            ]
        );
        assert_eq!(Expr::constant(5.0).to_prefix(), vec![Symbol::Const(5.0)]);

        let e = Expr::add(x(0), Expr::mul(x(1), x(1)));
        let text: Vec<String> = e.to_prefix().iter().map(|s| s.to_string()).collect();
        assert_eq!(text, ["add", "x0", "mul", "x1", "x1"]);
    }

    #[test]
    fn parse_prefix_rejects_malformed() {
        let e = Expr::parse_prefix_str(&["cos", "mul", "2.4242", "x0"]).unwrap();
        assert_eq!(
            e,
            Expr::unary(UnaryOp::Cos, Expr::mul(Expr::constant(2.4242), x(0)))
        );
        assert!(matches!(
            Expr::parse_prefix_str(&["add", "x0"]),
            Err(ParseError::Truncated { .. })
        ));
        assert!(matches!(
            Expr::parse_prefix_str(&["x0", "x1"]),
            Err(ParseError::TrailingSymbols { .. })
        ));
        assert!(matches!(
            Expr::parse_prefix_str(&["frobnicate", "x1"]),
            Err(ParseError::UnknownSymbol(_))
        ));
        assert!(Expr::parse_prefix(&[]).is_err());
    }

    #[test]
    fn complexity_counts_every_node() {
        let e = Expr::unary(UnaryOp::Exp, Expr::unary(UnaryOp::Tan, x(0)));
        assert_eq!(e.complexity(), 3);
        let e = Expr::add(Expr::constant(1.0), Expr::mul(Expr::constant(2.0), x(0)));
        assert_eq!(e.complexity(), 5);
        assert_eq!(Expr::constant(3.0).complexity(), 1);
    }

    #[test]
    fn system_validates_variables() {
        assert_eq!(OdeSystem::new(vec![]), Err(SystemError::Empty));
        assert!(matches!(
            OdeSystem::new(vec![x(1)]),
            Err(SystemError::VariableOutOfRange { index: 1, dim: 1, .. })
        ));
        let s = OdeSystem::new(vec![x(0)]).unwrap();
        assert_eq!(s.complexity(), 1);
    }

    #[test]
    fn constants_are_replaced_in_preorder() {
        let e = Expr::add(
            Expr::mul(Expr::constant(1.0), x(0)),
            Expr::unary(UnaryOp::Sin, Expr::constant(2.0)),
        );
        assert_eq!(e.constants(), vec![1.0, 2.0]);
        let r = e.with_constants(&[3.0, 4.0]);
        assert_eq!(r.constants(), vec![3.0, 4.0]);
        assert_eq!(r.to_prefix().len(), e.to_prefix().len());
    }

    #[test]
    fn infix_round_trips() {
        let cases = [
            Expr::add(x(0), Expr::unary(UnaryOp::Neg, x(1))),
            Expr::add(x(0), Expr::add(x(1), x(0))),
            Expr::mul(x(0), Expr::mul(x(1), Expr::constant(-2.5))),
            Expr::unary(UnaryOp::Neg, Expr::constant(2.0)),
            Expr::add(Expr::constant(-1e-7), Expr::unary(UnaryOp::Neg, Expr::constant(-3.0))),
            Expr::mul(Expr::add(x(0), x(1)), Expr::unary(UnaryOp::Inv, x(0))),
            Expr::unary(UnaryOp::Pow2, Expr::unary(UnaryOp::Neg, x(0))),
            Expr::mul(Expr::unary(UnaryOp::Neg, x(0)), x(1)),
            Expr::add(Expr::unary(UnaryOp::Neg, x(0)), x(1)),
            Expr::mul(x(0), Expr::unary(UnaryOp::Neg, x(1))),
        ];
        for e in cases {
            let text = e.to_infix();
            let back = Expr::parse_infix(&text).unwrap_or_else(|err| panic!("{text}: {err}"));
            assert_eq!(back, e, "{text}");
        }
    }
}
