//! Recursive-descent (Pratt-style) parser for the infix expression grammar.
//!
//! Precedence: `^` > unary `-` > `* /` > `+ -`; binaries left-associative,
//! `^` right-associative with integer-constant exponents. Identifiers follow
//! `[A-Za-z][A-Za-z0-9_]*`; the jet suffix `@k` denotes the k-th time
//! derivative. Errors carry the byte offset into the source text.

use super::{Expr, ExprError, UnaryOp};
use crate::jets::JetRegistry;

const FUNCTIONS: &[(&str, UnaryOp)] = &[
    ("sin", UnaryOp::Sin),
    ("cos", UnaryOp::Cos),
    ("tan", UnaryOp::Tan),
    ("sqrt", UnaryOp::Sqrt),
    ("exp", UnaryOp::Exp),
    ("log", UnaryOp::Log),
];

#[derive(Clone, Debug, PartialEq)]
enum Tok {
    Num(f64),
    Ident(String),
    Plus,
    Minus,
    Star,
    Slash,
    Caret,
    At,
    LParen,
    RParen,
    End,
}

struct Lexer<'a> {
    src: &'a [u8],
    pos: usize,
}

impl<'a> Lexer<'a> {
    fn new(src: &'a str) -> Self {
        Lexer {
            src: src.as_bytes(),
            pos: 0,
        }
    }

    fn skip_ws(&mut self) {
        while self.pos < self.src.len() && self.src[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    /// Next token with the byte offset where it starts.
    fn next(&mut self) -> Result<(Tok, usize), ExprError> {
        self.skip_ws();
        let start = self.pos;
        if self.pos >= self.src.len() {
            return Ok((Tok::End, start));
        }
        let c = self.src[self.pos];
        let tok = match c {
            b'+' => {
                self.pos += 1;
                Tok::Plus
            }
            b'-' => {
                self.pos += 1;
                Tok::Minus
            }
            b'*' => {
                self.pos += 1;
                Tok::Star
            }
            b'/' => {
                self.pos += 1;
                Tok::Slash
            }
            b'^' => {
                self.pos += 1;
                Tok::Caret
            }
            b'@' => {
                self.pos += 1;
                Tok::At
            }
            b'(' => {
                self.pos += 1;
                Tok::LParen
            }
            b')' => {
                self.pos += 1;
                Tok::RParen
            }
            b'0'..=b'9' | b'.' => {
                let mut end = self.pos;
                while end < self.src.len()
                    && (self.src[end].is_ascii_digit() || self.src[end] == b'.')
                {
                    end += 1;
                }
                // scientific exponent
                if end < self.src.len() && (self.src[end] == b'e' || self.src[end] == b'E') {
                    let mut e = end + 1;
                    if e < self.src.len() && (self.src[e] == b'+' || self.src[e] == b'-') {
                        e += 1;
                    }
                    if e < self.src.len() && self.src[e].is_ascii_digit() {
                        while e < self.src.len() && self.src[e].is_ascii_digit() {
                            e += 1;
                        }
                        end = e;
                    }
                }
                let text = std::str::from_utf8(&self.src[self.pos..end]).unwrap();
                let v: f64 = text.parse().map_err(|_| ExprError::Parse {
                    offset: start,
                    msg: format!("invalid numeric literal `{}`", text),
                })?;
                self.pos = end;
                Tok::Num(v)
            }
            b'A'..=b'Z' | b'a'..=b'z' => {
                let mut end = self.pos;
                while end < self.src.len()
                    && (self.src[end].is_ascii_alphanumeric() || self.src[end] == b'_')
                {
                    end += 1;
                }
                let text = std::str::from_utf8(&self.src[self.pos..end]).unwrap();
                self.pos = end;
                Tok::Ident(text.to_string())
            }
            _ => {
                return Err(ExprError::Parse {
                    offset: start,
                    msg: format!("unexpected character `{}`", c as char),
                })
            }
        };
        Ok((tok, start))
    }
}

struct Parser<'a> {
    lexer: Lexer<'a>,
    lookahead: (Tok, usize),
    registry: &'a JetRegistry,
    params: &'a [(String, f64)],
}

pub fn parse(text: &str, registry: &JetRegistry) -> Result<Expr, ExprError> {
    parse_with_params(text, registry, &[])
}

/// Parsing with named numeric parameters inlined as constants.
pub fn parse_with_params(
    text: &str,
    registry: &JetRegistry,
    params: &[(String, f64)],
) -> Result<Expr, ExprError> {
    let mut lexer = Lexer::new(text);
    let lookahead = lexer.next()?;
    let mut p = Parser {
        lexer,
        lookahead,
        registry,
        params,
    };
    let e = p.sum()?;
    match p.lookahead.0 {
        Tok::End => Ok(e),
        _ => Err(ExprError::Parse {
            offset: p.lookahead.1,
            msg: "trailing input after expression".to_string(),
        }),
    }
}

impl<'a> Parser<'a> {
    fn bump(&mut self) -> Result<(Tok, usize), ExprError> {
        let next = self.lexer.next()?;
        Ok(std::mem::replace(&mut self.lookahead, next))
    }

    fn sum(&mut self) -> Result<Expr, ExprError> {
        let mut acc = self.product()?;
        loop {
            match self.lookahead.0 {
                Tok::Plus => {
                    self.bump()?;
                    acc = Expr::add(acc, self.product()?);
                }
                Tok::Minus => {
                    self.bump()?;
                    acc = Expr::sub(acc, self.product()?);
                }
                _ => return Ok(acc),
            }
        }
    }

    fn product(&mut self) -> Result<Expr, ExprError> {
        let mut acc = self.unary()?;
        loop {
            match self.lookahead.0 {
                Tok::Star => {
                    self.bump()?;
                    acc = Expr::mul(acc, self.unary()?);
                }
                Tok::Slash => {
                    self.bump()?;
                    acc = Expr::div(acc, self.unary()?);
                }
                _ => return Ok(acc),
            }
        }
    }

    fn unary(&mut self) -> Result<Expr, ExprError> {
        if self.lookahead.0 == Tok::Minus {
            self.bump()?;
            Ok(Expr::neg(self.unary()?))
        } else {
            self.power()
        }
    }

    fn power(&mut self) -> Result<Expr, ExprError> {
        let base = self.atom()?;
        if self.lookahead.0 == Tok::Caret {
            self.bump()?;
            let off = self.lookahead.1;
            // right-associative; the exponent must fold to an integer
            let exp_expr = self.exponent()?;
            let k = exp_expr
                .as_const()
                .filter(|v| v.fract() == 0.0 && v.abs() <= i32::MAX as f64)
                .ok_or(ExprError::NonIntegerExponent { offset: off })?;
            Ok(Expr::powi(base, k as i32))
        } else {
            Ok(base)
        }
    }

    /// Exponent operand: sign, literal, or parenthesized constant; nested `^`
    /// stays right-associative (`x^2^3` = `x^(2^3)`).
    fn exponent(&mut self) -> Result<Expr, ExprError> {
        if self.lookahead.0 == Tok::Minus {
            self.bump()?;
            return Ok(Expr::neg(self.exponent()?));
        }
        self.power()
    }

    fn atom(&mut self) -> Result<Expr, ExprError> {
        let (tok, off) = self.bump()?;
        match tok {
            Tok::Num(v) => Ok(Expr::constant(v)),
            Tok::LParen => {
                let e = self.sum()?;
                let (close, coff) = self.bump()?;
                if close != Tok::RParen {
                    return Err(ExprError::Parse {
                        offset: coff,
                        msg: "expected `)`".to_string(),
                    });
                }
                Ok(e)
            }
            Tok::Ident(name) => {
                if let Some((_, op)) = FUNCTIONS.iter().find(|(n, _)| *n == name) {
                    let (open, ooff) = self.bump()?;
                    if open != Tok::LParen {
                        return Err(ExprError::Parse {
                            offset: ooff,
                            msg: format!("function `{}` requires a parenthesized argument", name),
                        });
                    }
                    let arg = self.sum()?;
                    let (close, coff) = self.bump()?;
                    if close != Tok::RParen {
                        return Err(ExprError::Parse {
                            offset: coff,
                            msg: "expected `)`".to_string(),
                        });
                    }
                    return Ok(Expr::unary(*op, arg));
                }
                if let Some((_, v)) = self.params.iter().find(|(n, _)| *n == name) {
                    return Ok(Expr::constant(*v));
                }
                let mut var = self
                    .registry
                    .resolve(&name)
                    .ok_or(ExprError::UnknownIdent { name, offset: off })?;
                if self.lookahead.0 == Tok::At {
                    self.bump()?;
                    let (ktok, koff) = self.bump()?;
                    let k = match ktok {
                        Tok::Num(v) if v.fract() == 0.0 && v >= 1.0 && v <= u16::MAX as f64 => {
                            v as usize
                        }
                        _ => {
                            return Err(ExprError::Parse {
                                offset: koff,
                                msg: "jet suffix `@` requires a positive integer".to_string(),
                            })
                        }
                    };
                    var = var.shifted(k);
                }
                self.registry.touch(var);
                Ok(Expr::var(var))
            }
            _ => Err(ExprError::Parse {
                offset: off,
                msg: "expected a number, identifier, or `(`".to_string(),
            }),
        }
    }
}
