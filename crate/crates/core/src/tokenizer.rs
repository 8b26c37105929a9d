//! Vocabulary and the mapping between numbers, expressions, trajectories
//! and token indices.
//!
//! Every real number becomes three tokens: a sign, a 4-digit mantissa and a
//! power-of-ten exponent, so `2.4242` is `+ 2424 E-3`. Expressions are
//! encoded in prefix order with constants expanded into their three tokens,
//! components separated by `|`, and the whole sequence wrapped in BOS/EOS.

use std::collections::HashMap;
use std::sync::OnceLock;

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::expr::{BinaryOp, Expr, OdeSystem, ParseError, Symbol, UnaryOp, MAX_VARIABLES};
use crate::trajectory::Trajectory;

pub const MANTISSA_DIGITS: i32 = 4;
pub const MANTISSA_COUNT: u32 = 10_000;
pub const EXPONENT_MIN: i32 = -100;
pub const EXPONENT_MAX: i32 = 100;
/// Sign + mantissa + exponent tokens.
pub const NUMERIC_TOKEN_COUNT: usize =
    2 + MANTISSA_COUNT as usize + (EXPONENT_MAX - EXPONENT_MIN + 1) as usize;

pub type TokenId = u32;

pub const PAD: &str = "<pad>";
pub const BOS: &str = "<bos>";
pub const EOS: &str = "<eos>";
pub const SEP: &str = "|";

/// Sign, mantissa and exponent of a number rounded to four significant
/// digits: `value = sign * mantissa * 10^exponent`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct FloatTriplet {
    pub negative: bool,
    pub mantissa: u16,
    pub exponent: i16,
}

impl FloatTriplet {
    pub const ZERO: FloatTriplet = FloatTriplet {
        negative: false,
        mantissa: 0,
        exponent: 0,
    };

    pub fn is_normalized(&self) -> bool {
        (1000..=9999).contains(&self.mantissa)
            && (EXPONENT_MIN..=EXPONENT_MAX).contains(&(self.exponent as i32))
            || *self == Self::ZERO
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TokenizeError {
    #[error("cannot encode non-finite value {0}")]
    NonFinite(f64),
    #[error("malformed sequence at token {at}: {msg}")]
    Malformed { at: usize, msg: String },
    #[error("system dimension {0} exceeds the supported maximum")]
    TooManyDimensions(usize),
    #[error(transparent)]
    Parse(#[from] ParseError),
}

fn malformed(at: usize, msg: impl Into<String>) -> TokenizeError {
    TokenizeError::Malformed { at, msg: msg.into() }
}

/// Rounds half away from zero to four significant digits.
pub fn encode_float(v: f64) -> Result<FloatTriplet, TokenizeError> {
    if !v.is_finite() {
        return Err(TokenizeError::NonFinite(v));
    }
    if v == 0.0 {
        return Ok(FloatTriplet::ZERO);
    }
    let negative = v < 0.0;
    let a = v.abs();
    let mut e = a.log10().floor() as i32;
    let scale = |e: i32| -> f64 {
        let k = e - (MANTISSA_DIGITS - 1);
        // Dividing by an exact power of ten keeps exact ties exact.
        if k >= 0 {
            a / pow10(k)
        } else {
            a * pow10(-k)
        }
    };
    let mut m = scale(e);
    // log10 can be off by one near powers of ten.
    if m >= 10_000.0 {
        e += 1;
        m = scale(e);
    } else if m < 1000.0 {
        e -= 1;
        m = scale(e);
    }
    let mut mant = m.round();
    if mant >= 10_000.0 {
        mant = 1000.0;
        e += 1;
    }
    let mut exponent = e - (MANTISSA_DIGITS - 1);
    let mut mantissa = mant as u16;
    if exponent > EXPONENT_MAX {
        exponent = EXPONENT_MAX;
        mantissa = 9999;
    } else if exponent < EXPONENT_MIN {
        exponent = EXPONENT_MIN;
        mantissa = 1000;
    }
    Ok(FloatTriplet {
        negative,
        mantissa,
        exponent: exponent as i16,
    })
}

fn pow10(k: i32) -> f64 {
    if k <= 22 {
        10f64.powi(k)
    } else {
        10f64.powf(k as f64)
    }
}

pub fn decode_float(t: FloatTriplet) -> f64 {
    let e = t.exponent as i32;
    let m = t.mantissa as f64;
    let mag = if e >= 0 { m * pow10(e) } else { m / pow10(-e) };
    if t.negative {
        -mag
    } else {
        mag
    }
}

/// Token kinds, in vocabulary order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Token {
    Pad,
    Bos,
    Eos,
    Sep,
    Unary(UnaryOp),
    Binary(BinaryOp),
    Var(usize),
    Sign(bool),
    Mantissa(u16),
    Exponent(i16),
}

impl Token {
    pub fn text(&self) -> String {
        match self {
            Token::Pad => PAD.into(),
            Token::Bos => BOS.into(),
            Token::Eos => EOS.into(),
            Token::Sep => SEP.into(),
            Token::Unary(op) => op.name().into(),
            Token::Binary(op) => op.name().into(),
            Token::Var(i) => format!("x{i}"),
            Token::Sign(neg) => if *neg { "-" } else { "+" }.into(),
            Token::Mantissa(m) => m.to_string(),
            Token::Exponent(e) => format!("E{e}"),
        }
    }

    pub fn is_numeric(&self) -> bool {
        matches!(self, Token::Sign(_) | Token::Mantissa(_) | Token::Exponent(_))
    }
}

/// Bijection between tokens and indices. The layout is fixed: control
/// tokens, operators, variables, then the 10,203 numeric tokens.
#[derive(Debug, Clone)]
pub struct Vocabulary {
    tokens: Vec<Token>,
    index: HashMap<Token, TokenId>,
    sign_base: TokenId,
    mantissa_base: TokenId,
    exponent_base: TokenId,
}

impl Vocabulary {
    fn build() -> Self {
        let mut tokens = vec![Token::Pad, Token::Bos, Token::Eos, Token::Sep];
        tokens.extend(BinaryOp::ALL.into_iter().map(Token::Binary));
        tokens.extend(UnaryOp::ALL.into_iter().map(Token::Unary));
        tokens.extend((0..MAX_VARIABLES).map(Token::Var));
        let sign_base = tokens.len() as TokenId;
        tokens.push(Token::Sign(false));
        tokens.push(Token::Sign(true));
        let mantissa_base = tokens.len() as TokenId;
        tokens.extend((0..MANTISSA_COUNT as u16).map(Token::Mantissa));
        let exponent_base = tokens.len() as TokenId;
        tokens.extend((EXPONENT_MIN..=EXPONENT_MAX).map(|e| Token::Exponent(e as i16)));
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (*t, i as TokenId))
            .collect();
        Self {
            tokens,
            index,
            sign_base,
            mantissa_base,
            exponent_base,
        }
    }

    /// The shared vocabulary instance.
    pub fn get() -> &'static Vocabulary {
        static VOCAB: OnceLock<Vocabulary> = OnceLock::new();
        VOCAB.get_or_init(Vocabulary::build)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn numeric_count(&self) -> usize {
        self.tokens.iter().filter(|t| t.is_numeric()).count()
    }

    pub fn token(&self, id: TokenId) -> Option<Token> {
        self.tokens.get(id as usize).copied()
    }

    pub fn id(&self, token: Token) -> TokenId {
        self.index[&token]
    }

    pub fn pad(&self) -> TokenId {
        0
    }

    pub fn bos(&self) -> TokenId {
        1
    }

    pub fn eos(&self) -> TokenId {
        2
    }

    pub fn sep(&self) -> TokenId {
        3
    }

    pub fn float_tokens(&self, t: FloatTriplet) -> [TokenId; 3] {
        [
            self.sign_base + t.negative as TokenId,
            self.mantissa_base + t.mantissa as TokenId,
            self.exponent_base + (t.exponent as i32 - EXPONENT_MIN) as TokenId,
        ]
    }

    /// One token per line; line number is the index.
    pub fn to_text(&self) -> String {
        let mut s = String::with_capacity(self.len() * 6);
        for t in &self.tokens {
            s.push_str(&t.text());
            s.push('\n');
        }
        s
    }

    /// Hex SHA-256 of [`Vocabulary::to_text`].
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_text().as_bytes()))
    }

    pub fn text(&self, id: TokenId) -> String {
        self.token(id).map_or_else(|| format!("<unk:{id}>"), |t| t.text())
    }

    /// Validates that `text` matches this vocabulary line by line.
    pub fn check_text(&self, text: &str) -> bool {
        text == self.to_text()
    }
}

pub fn encode_expression(sys: &OdeSystem) -> Result<Vec<TokenId>, TokenizeError> {
    let vocab = Vocabulary::get();
    if sys.dim() > MAX_VARIABLES {
        return Err(TokenizeError::TooManyDimensions(sys.dim()));
    }
    let mut out = vec![vocab.bos()];
    for (i, comp) in sys.components().iter().enumerate() {
        if i > 0 {
            out.push(vocab.sep());
        }
        encode_component(comp, &mut out)?;
    }
    out.push(vocab.eos());
    Ok(out)
}

fn encode_component(e: &Expr, out: &mut Vec<TokenId>) -> Result<(), TokenizeError> {
    let vocab = Vocabulary::get();
    for sym in e.to_prefix() {
        match sym {
            Symbol::Unary(op) => out.push(vocab.id(Token::Unary(op))),
            Symbol::Binary(op) => out.push(vocab.id(Token::Binary(op))),
            Symbol::Var(i) => {
                if i >= MAX_VARIABLES {
                    return Err(TokenizeError::TooManyDimensions(i + 1));
                }
                out.push(vocab.id(Token::Var(i)))
            }
            Symbol::Const(c) => out.extend(vocab.float_tokens(encode_float(c)?)),
        }
    }
    Ok(())
}

/// Parses a BOS/EOS-wrapped token sequence back into a system. Any defect
/// (bad prefix structure, broken numeric triplet, stray control token, too
/// many components) is reported as malformed.
pub fn decode_expression(tokens: &[TokenId]) -> Result<OdeSystem, TokenizeError> {
    let vocab = Vocabulary::get();
    let mut body = tokens;
    if body.first() == Some(&vocab.bos()) {
        body = &body[1..];
    }
    let Some(end) = body.iter().position(|&t| t == vocab.eos()) else {
        return Err(malformed(tokens.len(), "missing end-of-sequence token"));
    };
    if body[end + 1..].iter().any(|&t| t != vocab.pad()) {
        return Err(malformed(end + 1, "tokens after end of sequence"));
    }
    let body = &body[..end];
    if body.is_empty() {
        return Err(malformed(0, "empty expression"));
    }
    let mut components = Vec::new();
    let mut offset = 0;
    for seg in body.split(|&t| t == vocab.sep()) {
        let symbols = symbols_from_tokens(seg, offset)?;
        components.push(Expr::parse_prefix(&symbols)?);
        offset += seg.len() + 1;
    }
    if components.len() > MAX_VARIABLES {
        return Err(TokenizeError::TooManyDimensions(components.len()));
    }
    OdeSystem::new(components).map_err(|e| malformed(0, e.to_string()))
}

fn symbols_from_tokens(seg: &[TokenId], offset: usize) -> Result<Vec<Symbol>, TokenizeError> {
    let vocab = Vocabulary::get();
    let mut out = Vec::with_capacity(seg.len());
    let mut i = 0;
    while i < seg.len() {
        let at = offset + i;
        let tok = vocab.token(seg[i]).ok_or_else(|| malformed(at, "unknown token id"))?;
        match tok {
            Token::Unary(op) => out.push(Symbol::Unary(op)),
            Token::Binary(op) => out.push(Symbol::Binary(op)),
            Token::Var(v) => out.push(Symbol::Var(v)),
            Token::Sign(negative) => {
                let m = seg.get(i + 1).and_then(|&t| vocab.token(t));
                let e = seg.get(i + 2).and_then(|&t| vocab.token(t));
                let (Some(Token::Mantissa(mantissa)), Some(Token::Exponent(exponent))) = (m, e)
                else {
                    return Err(malformed(at, "incomplete numeric triplet"));
                };
                let t = FloatTriplet {
                    negative,
                    mantissa,
                    exponent,
                };
                out.push(Symbol::Const(decode_float(t)));
                i += 2;
            }
            Token::Mantissa(_) | Token::Exponent(_) => {
                return Err(malformed(at, "numeric token without sign"))
            }
            Token::Pad | Token::Bos | Token::Eos | Token::Sep => {
                return Err(malformed(at, "unexpected control token"))
            }
        }
        i += 1;
    }
    Ok(out)
}

/// Each point `(t_i, x_i)` becomes `D + 1` triplets of token ids.
pub fn encode_trajectory(traj: &Trajectory) -> Result<Vec<Vec<[TokenId; 3]>>, TokenizeError> {
    if traj.dim() > MAX_VARIABLES {
        return Err(TokenizeError::TooManyDimensions(traj.dim()));
    }
    let vocab = Vocabulary::get();
    traj.times()
        .iter()
        .zip(traj.rows())
        .map(|(&t, row)| {
            std::iter::once(t)
                .chain(row.iter().copied())
                .map(|v| encode_float(v).map(|f| vocab.float_tokens(f)))
                .collect()
        })
        .collect()
}

/// Inverse of [`encode_trajectory`] up to rounding; returns `(times, rows)`.
pub fn decode_trajectory_grid(grid: &[Vec<[TokenId; 3]>]) -> Result<(Vec<f64>, Vec<Vec<f64>>), TokenizeError> {
    let vocab = Vocabulary::get();
    let mut times = Vec::with_capacity(grid.len());
    let mut rows = Vec::with_capacity(grid.len());
    for (i, point) in grid.iter().enumerate() {
        let mut vals = Vec::with_capacity(point.len());
        for trip in point {
            let toks: Vec<Option<Token>> = trip.iter().map(|&t| vocab.token(t)).collect();
            let (Some(Token::Sign(negative)), Some(Token::Mantissa(mantissa)), Some(Token::Exponent(exponent))) =
                (toks[0], toks[1], toks[2])
            else {
                return Err(malformed(i, "invalid numeric triplet in trajectory"));
            };
            vals.push(decode_float(FloatTriplet {
                negative,
                mantissa,
                exponent,
            }));
        }
        if vals.is_empty() {
            return Err(malformed(i, "empty point"));
        }
        times.push(vals[0]);
        rows.push(vals[1..].to_vec());
    }
    Ok((times, rows))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn trip(negative: bool, mantissa: u16, exponent: i16) -> FloatTriplet {
        FloatTriplet {
            negative,
            mantissa,
            exponent,
        }
    }

    #[test]
    fn float_examples() {
        assert_eq!(encode_float(2.4242).unwrap(), trip(false, 2424, -3));
        assert_eq!(encode_float(0.0).unwrap(), FloatTriplet::ZERO);
        assert_eq!(encode_float(-0.001234).unwrap(), trip(true, 1234, -6));
        assert_eq!(decode_float(trip(false, 1000, -3)), 1.0);
        assert_eq!(decode_float(FloatTriplet::ZERO), 0.0);
        assert!(encode_float(f64::NAN).is_err());
        assert!(encode_float(f64::INFINITY).is_err());
    }

    #[test]
    fn rounding_is_half_away_from_zero() {
        assert_eq!(encode_float(12345.0).unwrap(), trip(false, 1235, 1));
        assert_eq!(encode_float(-12345.0).unwrap(), trip(true, 1235, 1));
        assert_eq!(encode_float(9999.5).unwrap(), trip(false, 1000, 1));
        assert_eq!(encode_float(1000.0).unwrap(), trip(false, 1000, 0));
        assert_eq!(encode_float(1e-3).unwrap(), trip(false, 1000, -6));
    }

    #[test]
    fn exponent_saturates() {
        assert_eq!(encode_float(1e150).unwrap(), trip(false, 9999, 100));
        assert_eq!(encode_float(-1e-150).unwrap(), trip(true, 1000, -100));
    }

    #[test]
    fn vocabulary_layout() {
        let v = Vocabulary::get();
        assert_eq!(v.numeric_count(), 10_203);
        assert_eq!(NUMERIC_TOKEN_COUNT, 10_203);
        assert_eq!(v.len(), 4 + 2 + 12 + 6 + 10_203);
        for id in 0..v.len() as TokenId {
            assert_eq!(v.id(v.token(id).unwrap()), id);
        }
        let text = v.to_text();
        assert_eq!(text.lines().count(), v.len());
        assert!(v.check_text(&text));
    }

    #[test]
    fn expression_example() {
        let v = Vocabulary::get();
        let sys = OdeSystem::new(vec![Expr::parse_infix("cos(2.4242 * x0)").unwrap()]).unwrap();
        let toks = encode_expression(&sys).unwrap();
        let text: Vec<String> = toks.iter().map(|&t| v.text(t)).collect();
        assert_eq!(text, ["<bos>", "cos", "mul", "+", "2424", "E-3", "x0", "<eos>"]);
        let back = decode_expression(&toks).unwrap();
        assert_eq!(back.components()[0].constants(), vec![2.424]);

        let sys = OdeSystem::new(vec![Expr::var(1), Expr::var(0)]).unwrap();
        let toks = encode_expression(&sys).unwrap();
        let text: Vec<String> = toks.iter().map(|&t| v.text(t)).collect();
        assert_eq!(text, ["<bos>", "x1", "|", "x0", "<eos>"]);
        assert_eq!(decode_expression(&toks).unwrap(), sys);
    }

    #[test]
    fn malformed_sequences() {
        let v = Vocabulary::get();
        assert!(decode_expression(&[v.bos(), v.eos()]).is_err());
        let plus = v.id(Token::Sign(false));
        let m = v.id(Token::Mantissa(1234));
        assert!(decode_expression(&[v.bos(), plus, m, v.eos()]).is_err());
        let add = v.id(Token::Binary(BinaryOp::Add));
        let x0 = v.id(Token::Var(0));
        assert!(decode_expression(&[v.bos(), add, x0, v.eos()]).is_err());
        assert!(decode_expression(&[v.bos(), x0]).is_err());
        assert!(decode_expression(&[v.bos(), x0, v.sep(), v.eos()]).is_err());
        let seven: Vec<TokenId> = std::iter::once(v.bos())
            .chain((0..7).flat_map(|i| if i == 0 { vec![x0] } else { vec![v.sep(), x0] }))
            .chain(std::iter::once(v.eos()))
            .collect();
        assert!(matches!(
            decode_expression(&seven),
            Err(TokenizeError::TooManyDimensions(7))
        ));
    }

    #[test]
    fn trajectory_grid() {
        let t = Trajectory::new(vec![1.0, 2.0], vec![0.0, 3.0], 1).unwrap();
        let grid = encode_trajectory(&t).unwrap();
        let v = Vocabulary::get();
        assert_eq!(grid.len(), 2);
        assert_eq!(grid[0].len(), 2);
        assert_eq!(grid[0][0], v.float_tokens(trip(false, 1000, -3)));
        assert_eq!(grid[0][1], v.float_tokens(FloatTriplet::ZERO));
        let (times, rows) = decode_trajectory_grid(&grid).unwrap();
        assert_eq!(times, vec![1.0, 2.0]);
        assert_eq!(rows, vec![vec![0.0], vec![3.0]]);
    }
}
