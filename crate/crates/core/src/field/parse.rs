//! Recursive-descent parser for the scalar expression grammar.
//!
//! ```text
//! expr   := term (('+' | '-') term)*
//! term   := unary (('*' | '/') unary)*
//! unary  := '-' unary | factor
//! factor := base ('^' '-'? number)?
//! base   := number | 'x' digits | func '(' expr ')' | '(' expr ')'
//! func   := sin | cos | exp | log | tanh
//! ```
//!
//! Unary minus is accepted on top of the core grammar so that landscapes
//! like `-x1^2` can be written directly.

use std::fmt;

use thiserror::Error;

use super::{Expr, Func};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ParseError {
    #[error("syntax error at byte {offset}: expected {}", ExpectedList(expected))]
    Syntax { offset: usize, expected: Vec<&'static str> },
    #[error("unknown variable {name} at byte {offset}")]
    UnknownVariable { name: String, offset: usize },
    #[error("{func} takes exactly one argument, found {found} (byte {offset})")]
    Arity { func: &'static str, found: usize, offset: usize },
}

impl ParseError {
    pub fn offset(&self) -> usize {
        match self {
            ParseError::Syntax { offset, .. }
            | ParseError::UnknownVariable { offset, .. }
            | ParseError::Arity { offset, .. } => *offset,
        }
    }
}

struct ExpectedList<'a>(&'a [&'static str]);

impl fmt::Display for ExpectedList<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, e) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str(" | ")?;
            }
            f.write_str(e)?;
        }
        Ok(())
    }
}

const EXPECT_OPERAND: &[&str] = &["number", "variable", "function", "'('", "'-'"];

#[derive(Clone, Copy, Debug, PartialEq)]
enum Tok<'a> {
    Num(f64),
    Ident(&'a str),
    Plus,
    Minus,
    Star,
    Slash,
    Caret,
    LParen,
    RParen,
    Comma,
    End,
}

struct Lexer<'a> {
    src: &'a str,
    pos: usize,
}

impl<'a> Lexer<'a> {
    fn skip_ws(&mut self) {
        let bytes = self.src.as_bytes();
        while self.pos < bytes.len() && bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    /// Returns the next token and its starting byte offset.
    fn next(&mut self) -> Result<(Tok<'a>, usize), ParseError> {
        self.skip_ws();
        let bytes = self.src.as_bytes();
        let start = self.pos;
        let Some(&c) = bytes.get(start) else {
            return Ok((Tok::End, start));
        };
        let single = match c {
            b'+' => Some(Tok::Plus),
            b'-' => Some(Tok::Minus),
            b'*' => Some(Tok::Star),
            b'/' => Some(Tok::Slash),
            b'^' => Some(Tok::Caret),
            b'(' => Some(Tok::LParen),
            b')' => Some(Tok::RParen),
            b',' => Some(Tok::Comma),
            _ => None,
        };
        if let Some(t) = single {
            self.pos += 1;
            return Ok((t, start));
        }
        if c.is_ascii_digit() || c == b'.' {
            return self.number(start);
        }
        if c.is_ascii_alphabetic() || c == b'_' {
            let mut end = start;
            while end < bytes.len() && (bytes[end].is_ascii_alphanumeric() || bytes[end] == b'_') {
                end += 1;
            }
            self.pos = end;
            return Ok((Tok::Ident(&self.src[start..end]), start));
        }
        Err(ParseError::Syntax { offset: start, expected: EXPECT_OPERAND.to_vec() })
    }

    fn number(&mut self, start: usize) -> Result<(Tok<'a>, usize), ParseError> {
        let bytes = self.src.as_bytes();
        let mut end = start;
        let digits = |end: &mut usize| {
            let s = *end;
            while *end < bytes.len() && bytes[*end].is_ascii_digit() {
                *end += 1;
            }
            *end - s
        };
        let mut mantissa = digits(&mut end);
        if end < bytes.len() && bytes[end] == b'.' {
            end += 1;
            mantissa += digits(&mut end);
        }
        if mantissa == 0 {
            return Err(ParseError::Syntax { offset: start, expected: vec!["digit"] });
        }
        if end < bytes.len() && (bytes[end] == b'e' || bytes[end] == b'E') {
            let mut exp_end = end + 1;
            if exp_end < bytes.len() && (bytes[exp_end] == b'+' || bytes[exp_end] == b'-') {
                exp_end += 1;
            }
            if digits(&mut exp_end) == 0 {
                return Err(ParseError::Syntax { offset: exp_end, expected: vec!["exponent digits"] });
            }
            end = exp_end;
        }
        let text = &self.src[start..end];
        let value: f64 = text
            .parse()
            .map_err(|_| ParseError::Syntax { offset: start, expected: vec!["number"] })?;
        if !value.is_finite() {
            return Err(ParseError::Syntax { offset: start, expected: vec!["finite number"] });
        }
        self.pos = end;
        Ok((Tok::Num(value), start))
    }
}

struct Parser<'a> {
    lexer: Lexer<'a>,
    tok: Tok<'a>,
    at: usize,
    dim: usize,
    depth: usize,
}

// Deeply nested input would otherwise overflow the stack.
const MAX_DEPTH: usize = 256;

impl<'a> Parser<'a> {
    fn bump(&mut self) -> Result<(), ParseError> {
        let (tok, at) = self.lexer.next()?;
        self.tok = tok;
        self.at = at;
        Ok(())
    }

    fn syntax(&self, expected: &[&'static str]) -> ParseError {
        ParseError::Syntax { offset: self.at, expected: expected.to_vec() }
    }

    fn enter(&mut self) -> Result<(), ParseError> {
        self.depth += 1;
        if self.depth > MAX_DEPTH {
            return Err(self.syntax(&["shallower nesting"]));
        }
        Ok(())
    }

    fn expr(&mut self) -> Result<Expr, ParseError> {
        self.enter()?;
        let mut lhs = self.term()?;
        loop {
            match self.tok {
                Tok::Plus => {
                    self.bump()?;
                    lhs = Expr::Add(Box::new(lhs), Box::new(self.term()?));
                }
                Tok::Minus => {
                    self.bump()?;
                    lhs = Expr::Sub(Box::new(lhs), Box::new(self.term()?));
                }
                _ => break,
            }
        }
        self.depth -= 1;
        Ok(lhs)
    }

    fn term(&mut self) -> Result<Expr, ParseError> {
        let mut lhs = self.unary()?;
        loop {
            match self.tok {
                Tok::Star => {
                    self.bump()?;
                    lhs = Expr::Mul(Box::new(lhs), Box::new(self.unary()?));
                }
                Tok::Slash => {
                    self.bump()?;
                    lhs = Expr::Div(Box::new(lhs), Box::new(self.unary()?));
                }
                _ => break,
            }
        }
        Ok(lhs)
    }

    fn unary(&mut self) -> Result<Expr, ParseError> {
        if self.tok == Tok::Minus {
            self.enter()?;
            self.bump()?;
            let inner = self.unary()?;
            self.depth -= 1;
            return Ok(Expr::Neg(Box::new(inner)));
        }
        self.factor()
    }

    fn factor(&mut self) -> Result<Expr, ParseError> {
        let base = self.base()?;
        if self.tok != Tok::Caret {
            return Ok(base);
        }
        self.bump()?;
        let negative = if self.tok == Tok::Minus {
            self.bump()?;
            true
        } else {
            false
        };
        let Tok::Num(p) = self.tok else {
            return Err(self.syntax(&["number"]));
        };
        self.bump()?;
        Ok(Expr::Pow(Box::new(base), if negative { -p } else { p }))
    }

    fn base(&mut self) -> Result<Expr, ParseError> {
        match self.tok {
            Tok::Num(v) => {
                self.bump()?;
                Ok(Expr::Const(v))
            }
            Tok::LParen => {
                self.bump()?;
                let inner = self.expr()?;
                self.expect_rparen()?;
                Ok(inner)
            }
            Tok::Ident(name) => {
                let at = self.at;
                if let Some(idx) = variable_index(name) {
                    return match idx {
                        Some(i) if i >= 1 && i <= self.dim => {
                            self.bump()?;
                            Ok(Expr::Var(i - 1))
                        }
                        _ => Err(ParseError::UnknownVariable { name: name.to_string(), offset: at }),
                    };
                }
                let Some(func) = Func::from_name(name) else {
                    return Err(self.syntax(&["variable", "sin", "cos", "exp", "log", "tanh"]));
                };
                self.bump()?;
                if self.tok != Tok::LParen {
                    return Err(self.syntax(&["'('"]));
                }
                self.bump()?;
                if self.tok == Tok::RParen {
                    return Err(ParseError::Arity { func: func.name(), found: 0, offset: at });
                }
                let arg = self.expr()?;
                let mut found = 1;
                while self.tok == Tok::Comma {
                    self.bump()?;
                    self.expr()?;
                    found += 1;
                }
                if found != 1 {
                    return Err(ParseError::Arity { func: func.name(), found, offset: at });
                }
                self.expect_rparen()?;
                Ok(Expr::Call(func, Box::new(arg)))
            }
            _ => Err(self.syntax(EXPECT_OPERAND)),
        }
    }

    fn expect_rparen(&mut self) -> Result<(), ParseError> {
        if self.tok != Tok::RParen {
            return Err(self.syntax(&["')'"]));
        }
        self.bump()
    }
}

/// `Some(Some(i))` for `x<i>`, `Some(None)` for a malformed/overflowing index,
/// `None` if the identifier is not variable-shaped.
fn variable_index(name: &str) -> Option<Option<usize>> {
    let digits = name.strip_prefix('x')?;
    if digits.is_empty() || !digits.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    Some(digits.parse().ok())
}

/// Parses `source` as an expression over variables `x1..x{dim}`.
pub fn parse_expr(source: &str, dim: usize) -> Result<Expr, ParseError> {
    let mut p = Parser { lexer: Lexer { src: source, pos: 0 }, tok: Tok::End, at: 0, dim, depth: 0 };
    p.bump()?;
    let e = p.expr()?;
    if p.tok != Tok::End {
        return Err(p.syntax(&["operator", "end of input"]));
    }
    Ok(e)
}
