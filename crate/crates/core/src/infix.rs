//! Recursive-descent parser for the infix notation produced by
//! [`Expr::to_infix`] and used by the ODEBench source file.
//!
//! Grammar:
//!
//! ```text
//! sum     := term (('+' | '-') term)*
//! term    := factor (('*' | '/') factor)*
//! factor  := '-' factor | power
//! power   := atom ('^' exponent)?
//! atom    := number | x<i> | c<i> | func '(' sum ')' | '(' sum ')'
//! ```
//!
//! `a - b` becomes `add(a, neg(b))`, `a / b` becomes `mul(a, inv(b))`,
//! and a minus directly in front of a numeric literal yields a negative
//! constant. Powers map to `pow2`/`pow3`, products of those for larger
//! integer exponents, `inv` for negative exponents, and `exp(p * log(base))`
//! for non-integer exponents.

use crate::expr::{Expr, ParseError, UnaryOp};

/// Parses `text`, substituting placeholder `c<i>` with `params[i]`.
pub fn parse(text: &str, params: &[f64]) -> Result<Expr, ParseError> {
    let mut p = Parser {
        src: text.as_bytes(),
        pos: 0,
        params,
    };
    let e = p.sum()?;
    p.skip_ws();
    if p.pos != p.src.len() {
        return Err(p.err("unexpected trailing input"));
    }
    Ok(e)
}

struct Parser<'a> {
    src: &'a [u8],
    pos: usize,
    params: &'a [f64],
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

    fn peek(&mut self) -> Option<u8> {
        self.skip_ws();
        self.src.get(self.pos).copied()
    }

    fn eat(&mut self, c: u8) -> bool {
        if self.peek() == Some(c) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn sum(&mut self) -> Result<Expr, ParseError> {
        let mut acc = self.term()?;
        loop {
            if self.eat(b'+') {
                let rhs = self.term()?;
                acc = Expr::add(acc, rhs);
            } else if self.eat(b'-') {
                let rhs = self.term()?;
                acc = Expr::add(acc, Expr::unary(UnaryOp::Neg, rhs));
            } else {
                return Ok(acc);
            }
        }
    }

    fn term(&mut self) -> Result<Expr, ParseError> {
        let mut acc = self.factor()?;
        loop {
            if self.eat(b'*') {
                let rhs = self.factor()?;
                acc = Expr::mul(acc, rhs);
            } else if self.eat(b'/') {
                let rhs = self.factor()?;
                acc = Expr::mul(acc, Expr::unary(UnaryOp::Inv, rhs));
            } else {
                return Ok(acc);
            }
        }
    }

    fn factor(&mut self) -> Result<Expr, ParseError> {
        if self.eat(b'-') {
            if matches!(self.peek(), Some(c) if c.is_ascii_digit() || c == b'.') {
                let v = self.number()?;
                let lit = Expr::Const(-v);
                return self.maybe_power(lit);
            }
            let inner = self.factor()?;
            return Ok(Expr::unary(UnaryOp::Neg, inner));
        }
        let base = self.atom()?;
        self.maybe_power(base)
    }

    fn maybe_power(&mut self, base: Expr) -> Result<Expr, ParseError> {
        if !self.eat(b'^') {
            return Ok(base);
        }
        let negative = self.eat(b'-');
        let exponent = if self.eat(b'(') {
            let e = self.sum()?;
            if !self.eat(b')') {
                return Err(self.err("expected `)` after exponent"));
            }
            e
        } else {
            self.atom()?
        };
        let Expr::Const(mut p) = exponent else {
            // Symbolic exponent: base^e = exp(e * log(base)).
            let e = if negative {
                Expr::unary(UnaryOp::Neg, exponent)
            } else {
                exponent
            };
            return Ok(Expr::unary(
                UnaryOp::Exp,
                Expr::mul(e, Expr::unary(UnaryOp::Log, base)),
            ));
        };
        if negative {
            p = -p;
        }
        Ok(power(base, p))
    }

    fn number(&mut self) -> Result<f64, ParseError> {
        self.skip_ws();
        let start = self.pos;
        let s = self.src;
        while self.pos < s.len() && (s[self.pos].is_ascii_digit() || s[self.pos] == b'.') {
            self.pos += 1;
        }
        if self.pos < s.len() && (s[self.pos] == b'e' || s[self.pos] == b'E') {
            let save = self.pos;
            self.pos += 1;
            if self.pos < s.len() && (s[self.pos] == b'-' || s[self.pos] == b'+') {
                self.pos += 1;
            }
            let digits = self.pos;
            while self.pos < s.len() && s[self.pos].is_ascii_digit() {
                self.pos += 1;
            }
            if self.pos == digits {
                self.pos = save;
            }
        }
        let text = std::str::from_utf8(&s[start..self.pos]).expect("ascii");
        text.parse::<f64>()
            .map_err(|_| ParseError::Syntax {
                pos: start,
                msg: format!("bad number `{text}`"),
            })
    }

    fn ident(&mut self) -> &str {
        let start = self.pos;
        while self.pos < self.src.len()
            && (self.src[self.pos].is_ascii_alphanumeric() || self.src[self.pos] == b'_')
        {
            self.pos += 1;
        }
        std::str::from_utf8(&self.src[start..self.pos]).expect("ascii")
    }

    fn atom(&mut self) -> Result<Expr, ParseError> {
        match self.peek() {
            None => Err(self.err("unexpected end of input")),
            Some(b'(') => {
                self.pos += 1;
                let e = self.sum()?;
                if !self.eat(b')') {
                    return Err(self.err("expected `)`"));
                }
                Ok(e)
            }
            Some(c) if c.is_ascii_digit() || c == b'.' => Ok(Expr::Const(self.number()?)),
            Some(c) if c.is_ascii_alphabetic() => {
                let start = self.pos;
                let name = self.ident().to_string();
                if let Some(idx) = indexed(&name, 'x') {
                    return Ok(Expr::Var(idx));
                }
                if let Some(idx) = indexed(&name, 'c') {
                    return self.params.get(idx).map(|&v| Expr::Const(v)).ok_or(
                        ParseError::Syntax {
                            pos: start,
                            msg: format!("unbound parameter {name}"),
                        },
                    );
                }
                let Some(op) = UnaryOp::from_name(&name) else {
                    return Err(ParseError::UnknownSymbol(name));
                };
                if !self.eat(b'(') {
                    return Err(self.err("expected `(` after function name"));
                }
                let arg = self.sum()?;
                if !self.eat(b')') {
                    return Err(self.err("expected `)` after function argument"));
                }
                Ok(Expr::unary(op, arg))
            }
            Some(_) => Err(self.err("unexpected character")),
        }
    }
}

fn indexed(name: &str, prefix: char) -> Option<usize> {
    let rest = name.strip_prefix(prefix)?;
    let rest = rest.strip_prefix('_').unwrap_or(rest);
    if rest.is_empty() || !rest.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    rest.parse().ok()
}

fn power(base: Expr, p: f64) -> Expr {
    if p.fract() == 0.0 && p.abs() <= 16.0 {
        let n = p.abs() as u32;
        let pos = integer_power(base, n);
        return if p < 0.0 {
            Expr::unary(UnaryOp::Inv, pos)
        } else {
            pos
        };
    }
    Expr::unary(
        UnaryOp::Exp,
        Expr::mul(Expr::Const(p), Expr::unary(UnaryOp::Log, base)),
    )
}

fn integer_power(base: Expr, n: u32) -> Expr {
    match n {
        0 => Expr::Const(1.0),
        1 => base,
        2 => Expr::unary(UnaryOp::Pow2, base),
        3 => Expr::unary(UnaryOp::Pow3, base),
        _ => {
            // Split into cubes and one remainder factor.
            let mut acc = Expr::unary(UnaryOp::Pow3, base.clone());
            let mut left = n - 3;
            while left > 0 {
                let k = left.min(3);
                acc = Expr::mul(acc, integer_power(base.clone(), k));
                left -= k;
            }
            acc
        }
    }
}
