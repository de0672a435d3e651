//! Recursive-descent parser for the expression DSL.

use super::{neg, BinaryOp, Expr, UnaryOp, Var};
use thiserror::Error;

#[derive(Debug, Clone, Error, PartialEq)]
#[error("{kind} at position {position}")]
pub struct ParseError {
    pub kind: ParseErrorKind,
    /// Byte offset into the source where the problem starts.
    pub position: usize,
}

#[derive(Debug, Clone, Error, PartialEq)]
pub enum ParseErrorKind {
    #[error("syntax error: {0}")]
    Syntax(String),
    #[error("unknown symbol `{0}`")]
    UnknownSymbol(String),
    #[error("`{0}` is out of range: problem has {1} state and {2} control variables")]
    DimensionOutOfRange(String, usize, usize),
    #[error("ind bounds must be numeric literals (second may be `inf`)")]
    IndBoundNotLiteral,
    #[error("ind bounds must satisfy lo < hi")]
    IndBoundsOutOfOrder,
    #[error("expression nesting too deep")]
    TooDeep,
}

const MAX_DEPTH: usize = 200;

/// Parse `source` into an [`Expr`] over `t`, `x1..x{m}`, `u1..u{k}`.
pub fn parse_expr(source: &str, m: usize, k: usize) -> Result<Expr, ParseError> {
    let tokens = tokenize(source)?;
    let mut parser = Parser {
        tokens,
        pos: 0,
        src_len: source.len(),
        m,
        k,
    };
    let e = parser.expr(0)?;
    match parser.peek() {
        None => Ok(e),
        Some(tok) => Err(err(
            tok.pos,
            ParseErrorKind::Syntax(format!("unexpected `{}`", tok.text())),
        )),
    }
}

fn err(position: usize, kind: ParseErrorKind) -> ParseError {
    ParseError { kind, position }
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Num(f64),
    Ident(String),
    Plus,
    Minus,
    Star,
    Slash,
    Caret,
    LParen,
    RParen,
    Comma,
}

#[derive(Debug, Clone)]
struct Token {
    tok: Tok,
    pos: usize,
}

impl Token {
    fn text(&self) -> String {
        match &self.tok {
            Tok::Num(v) => v.to_string(),
            Tok::Ident(s) => s.clone(),
            Tok::Plus => "+".into(),
            Tok::Minus => "-".into(),
            Tok::Star => "*".into(),
            Tok::Slash => "/".into(),
            Tok::Caret => "^".into(),
            Tok::LParen => "(".into(),
            Tok::RParen => ")".into(),
            Tok::Comma => ",".into(),
        }
    }
}

fn tokenize(src: &str) -> Result<Vec<Token>, ParseError> {
    let bytes = src.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i] as char;
        let pos = i;
        match c {
            ' ' | '\t' | '\n' | '\r' => i += 1,
            '+' => {
                out.push(Token { tok: Tok::Plus, pos });
                i += 1;
            }
            '-' => {
                out.push(Token { tok: Tok::Minus, pos });
                i += 1;
            }
            '*' => {
                out.push(Token { tok: Tok::Star, pos });
                i += 1;
            }
            '/' => {
                out.push(Token { tok: Tok::Slash, pos });
                i += 1;
            }
            '^' => {
                out.push(Token { tok: Tok::Caret, pos });
                i += 1;
            }
            '(' => {
                out.push(Token { tok: Tok::LParen, pos });
                i += 1;
            }
            ')' => {
                out.push(Token { tok: Tok::RParen, pos });
                i += 1;
            }
            ',' => {
                out.push(Token { tok: Tok::Comma, pos });
                i += 1;
            }
            '0'..='9' | '.' => {
                let start = i;
                while i < bytes.len() && (bytes[i] as char).is_ascii_digit() {
                    i += 1;
                }
                if i < bytes.len() && bytes[i] == b'.' {
                    i += 1;
                    while i < bytes.len() && (bytes[i] as char).is_ascii_digit() {
                        i += 1;
                    }
                }
                if i < bytes.len() && (bytes[i] == b'e' || bytes[i] == b'E') {
                    let mut j = i + 1;
                    if j < bytes.len() && (bytes[j] == b'+' || bytes[j] == b'-') {
                        j += 1;
                    }
                    if j < bytes.len() && (bytes[j] as char).is_ascii_digit() {
                        i = j;
                        while i < bytes.len() && (bytes[i] as char).is_ascii_digit() {
                            i += 1;
                        }
                    }
                }
                let text = &src[start..i];
                let v: f64 = text.parse().map_err(|_| {
                    err(start, ParseErrorKind::Syntax(format!("bad number `{text}`")))
                })?;
                out.push(Token { tok: Tok::Num(v), pos: start });
            }
            'a'..='z' | 'A'..='Z' | '_' => {
                let start = i;
                while i < bytes.len()
                    && ((bytes[i] as char).is_ascii_alphanumeric() || bytes[i] == b'_')
                {
                    i += 1;
                }
                out.push(Token {
                    tok: Tok::Ident(src[start..i].to_string()),
                    pos: start,
                });
            }
            _ => {
                return Err(err(
                    pos,
                    ParseErrorKind::Syntax(format!("unexpected character `{c}`")),
                ))
            }
        }
    }
    Ok(out)
}

struct Parser {
    tokens: Vec<Token>,
    pos: usize,
    src_len: usize,
    m: usize,
    k: usize,
}

impl Parser {
    fn peek(&self) -> Option<&Token> {
        self.tokens.get(self.pos)
    }

    fn next(&mut self) -> Option<Token> {
        let t = self.tokens.get(self.pos).cloned();
        if t.is_some() {
            self.pos += 1;
        }
        t
    }

    fn expect(&mut self, want: Tok, what: &str) -> Result<(), ParseError> {
        match self.next() {
            Some(tok) if tok.tok == want => Ok(()),
            Some(tok) => Err(err(
                tok.pos,
                ParseErrorKind::Syntax(format!("expected {what}, found `{}`", tok.text())),
            )),
            None => Err(err(
                self.end_pos(),
                ParseErrorKind::Syntax(format!("expected {what}, found end of input")),
            )),
        }
    }

    fn end_pos(&self) -> usize {
        self.src_len
    }

    fn expr(&mut self, depth: usize) -> Result<Expr, ParseError> {
        self.check_depth(depth)?;
        let mut lhs = self.term(depth + 1)?;
        while let Some(tok) = self.peek() {
            let op = match tok.tok {
                Tok::Plus => BinaryOp::Add,
                Tok::Minus => BinaryOp::Sub,
                _ => break,
            };
            self.pos += 1;
            let rhs = self.term(depth + 1)?;
            lhs = Expr::Binary(op, Box::new(lhs), Box::new(rhs));
        }
        Ok(lhs)
    }

    fn term(&mut self, depth: usize) -> Result<Expr, ParseError> {
        self.check_depth(depth)?;
        let mut lhs = self.unary(depth + 1)?;
        while let Some(tok) = self.peek() {
            let op = match tok.tok {
                Tok::Star => BinaryOp::Mul,
                Tok::Slash => BinaryOp::Div,
                _ => break,
            };
            self.pos += 1;
            let rhs = self.unary(depth + 1)?;
            lhs = Expr::Binary(op, Box::new(lhs), Box::new(rhs));
        }
        Ok(lhs)
    }

    fn unary(&mut self, depth: usize) -> Result<Expr, ParseError> {
        self.check_depth(depth)?;
        if matches!(self.peek(), Some(t) if t.tok == Tok::Minus) {
            self.pos += 1;
            let inner = self.unary(depth + 1)?;
            // Fold a minus on a literal into the literal so printing and
            // re-parsing agree on the AST.
            return Ok(neg(inner));
        }
        self.power(depth + 1)
    }

    fn power(&mut self, depth: usize) -> Result<Expr, ParseError> {
        self.check_depth(depth)?;
        let base = self.atom(depth + 1)?;
        if matches!(self.peek(), Some(t) if t.tok == Tok::Caret) {
            self.pos += 1;
            // Right-associative; the exponent may carry a unary minus.
            let exponent = self.unary(depth + 1)?;
            return Ok(Expr::Binary(
                BinaryOp::Pow,
                Box::new(base),
                Box::new(exponent),
            ));
        }
        Ok(base)
    }

    fn atom(&mut self, depth: usize) -> Result<Expr, ParseError> {
        self.check_depth(depth)?;
        let tok = self.next().ok_or_else(|| {
            err(
                self.end_pos(),
                ParseErrorKind::Syntax("unexpected end of input".into()),
            )
        })?;
        match tok.tok {
            Tok::Num(v) => Ok(Expr::Num(v)),
            Tok::LParen => {
                let e = self.expr(depth + 1)?;
                self.expect(Tok::RParen, "`)`")?;
                Ok(e)
            }
            Tok::Ident(name) => self.ident(&name, tok.pos, depth),
            other => Err(err(
                tok.pos,
                ParseErrorKind::Syntax(format!(
                    "expected a value, found `{}`",
                    Token { tok: other, pos: tok.pos }.text()
                )),
            )),
        }
    }

    fn ident(&mut self, name: &str, pos: usize, depth: usize) -> Result<Expr, ParseError> {
        let call = matches!(self.peek(), Some(t) if t.tok == Tok::LParen);
        if call {
            let op = match name {
                "sin" => Some(UnaryOp::Sin),
                "cos" => Some(UnaryOp::Cos),
                "exp" => Some(UnaryOp::Exp),
                "log" => Some(UnaryOp::Log),
                "abs" => Some(UnaryOp::Abs),
                "sqrt" => Some(UnaryOp::Sqrt),
                _ => None,
            };
            if let Some(op) = op {
                self.pos += 1;
                let arg = self.expr(depth + 1)?;
                self.expect(Tok::RParen, "`)`")?;
                return Ok(Expr::Unary(op, Box::new(arg)));
            }
            if name == "ind" {
                self.pos += 1;
                let lo = self.ind_bound(false)?;
                self.expect(Tok::Comma, "`,`")?;
                let hi = self.ind_bound(true)?;
                self.expect(Tok::RParen, "`)`")?;
                if !(lo < hi) {
                    return Err(err(pos, ParseErrorKind::IndBoundsOutOfOrder));
                }
                return Ok(Expr::Ind { lo, hi });
            }
            return Err(err(pos, ParseErrorKind::UnknownSymbol(name.to_string())));
        }
        match name {
            "t" => Ok(Expr::Var(Var::Time)),
            _ => {
                if let Some(rest) = name.strip_prefix('x') {
                    if let Ok(i) = rest.parse::<usize>() {
                        if (1..=9).contains(&i) {
                            if i > self.m {
                                return Err(err(
                                    pos,
                                    ParseErrorKind::DimensionOutOfRange(
                                        name.to_string(),
                                        self.m,
                                        self.k,
                                    ),
                                ));
                            }
                            return Ok(Expr::Var(Var::State(i - 1)));
                        }
                    }
                }
                if let Some(rest) = name.strip_prefix('u') {
                    if let Ok(i) = rest.parse::<usize>() {
                        if (1..=9).contains(&i) {
                            if i > self.k {
                                return Err(err(
                                    pos,
                                    ParseErrorKind::DimensionOutOfRange(
                                        name.to_string(),
                                        self.m,
                                        self.k,
                                    ),
                                ));
                            }
                            return Ok(Expr::Var(Var::Control(i - 1)));
                        }
                    }
                }
                Err(err(pos, ParseErrorKind::UnknownSymbol(name.to_string())))
            }
        }
    }

    /// An `ind` bound: an optionally negated numeric literal; `inf` is
    /// accepted only for the upper bound.
    fn ind_bound(&mut self, allow_inf: bool) -> Result<f64, ParseError> {
        let mut sign = 1.0;
        if matches!(self.peek(), Some(t) if t.tok == Tok::Minus) {
            self.pos += 1;
            sign = -1.0;
        }
        let tok = self.next().ok_or_else(|| {
            err(self.end_pos(), ParseErrorKind::IndBoundNotLiteral)
        })?;
        match tok.tok {
            Tok::Num(v) => Ok(sign * v),
            Tok::Ident(ref s) if s == "inf" && allow_inf && sign > 0.0 => Ok(f64::INFINITY),
            _ => Err(err(tok.pos, ParseErrorKind::IndBoundNotLiteral)),
        }
    }

    fn check_depth(&self, depth: usize) -> Result<(), ParseError> {
        if depth > MAX_DEPTH {
            Err(err(
                self.peek().map(|t| t.pos).unwrap_or(0),
                ParseErrorKind::TooDeep,
            ))
        } else {
            Ok(())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_window_product() {
        let e = parse_expr("u1*ind(0,1)", 1, 1).unwrap();
        assert_eq!(
            e,
            Expr::Binary(
                BinaryOp::Mul,
                Box::new(Expr::Var(Var::Control(0))),
                Box::new(Expr::Ind { lo: 0.0, hi: 1.0 }),
            )
        );
    }

    #[test]
    fn parses_plain_variable() {
        assert_eq!(parse_expr("x1", 1, 1).unwrap(), Expr::Var(Var::State(0)));
    }

    #[test]
    fn parses_half_sine() {
        let e = parse_expr("sin(2*x1)/2", 1, 1).unwrap();
        let v = e.eval(0.0, &[0.4], &[0.0]).unwrap();
        assert!((v - 0.5 * (0.8f64).sin()).abs() < 1e-15);
    }

    #[test]
    fn reports_syntax_error_position() {
        let e = parse_expr("x1 + ", 1, 1).unwrap_err();
        assert!(matches!(e.kind, ParseErrorKind::Syntax(_)));
        assert_eq!(e.position, 5);

        let e = parse_expr("x1 $ 2", 1, 1).unwrap_err();
        assert_eq!(e.position, 3);
    }

    #[test]
    fn reports_unknown_symbol() {
        let e = parse_expr("y1 + 2", 1, 1).unwrap_err();
        assert_eq!(e.kind, ParseErrorKind::UnknownSymbol("y1".into()));

        let e = parse_expr("foo(x1)", 1, 1).unwrap_err();
        assert_eq!(e.kind, ParseErrorKind::UnknownSymbol("foo".into()));
    }

    #[test]
    fn reports_dimension_out_of_range() {
        let e = parse_expr("x3", 2, 1).unwrap_err();
        assert!(matches!(e.kind, ParseErrorKind::DimensionOutOfRange(..)));
        let e = parse_expr("u2", 2, 1).unwrap_err();
        assert!(matches!(e.kind, ParseErrorKind::DimensionOutOfRange(..)));
        assert!(parse_expr("x2", 2, 1).is_ok());
    }

    #[test]
    fn ind_bounds_validated() {
        assert!(matches!(
            parse_expr("ind(1,1)", 1, 1).unwrap_err().kind,
            ParseErrorKind::IndBoundsOutOfOrder
        ));
        assert!(matches!(
            parse_expr("ind(2,1)", 1, 1).unwrap_err().kind,
            ParseErrorKind::IndBoundsOutOfOrder
        ));
        assert!(matches!(
            parse_expr("ind(inf,2)", 1, 1).unwrap_err().kind,
            ParseErrorKind::IndBoundNotLiteral
        ));
        assert!(matches!(
            parse_expr("ind(x1,2)", 1, 1).unwrap_err().kind,
            ParseErrorKind::IndBoundNotLiteral
        ));
        assert_eq!(
            parse_expr("ind(-1,inf)", 1, 1).unwrap(),
            Expr::Ind { lo: -1.0, hi: f64::INFINITY }
        );
    }

    #[test]
    fn scientific_notation() {
        assert_eq!(parse_expr("1.5e-3", 1, 1).unwrap(), Expr::Num(1.5e-3));
        assert_eq!(parse_expr("2E4", 1, 1).unwrap(), Expr::Num(2e4));
    }

    #[test]
    fn precedence_matches_convention() {
        // pow > unary minus > mul/div > add/sub
        let e = parse_expr("-x1^2", 1, 1).unwrap();
        assert_eq!(e.eval(0.0, &[3.0], &[0.0]).unwrap(), -9.0);

        let e = parse_expr("2+3*4^2", 1, 1).unwrap();
        assert_eq!(e.eval(0.0, &[0.0], &[0.0]).unwrap(), 50.0);

        let e = parse_expr("2^3^2", 1, 1).unwrap();
        assert_eq!(e.eval(0.0, &[0.0], &[0.0]).unwrap(), 512.0);

        let e = parse_expr("10-2-3", 1, 1).unwrap();
        assert_eq!(e.eval(0.0, &[0.0], &[0.0]).unwrap(), 5.0);
    }

    #[test]
    fn negated_literal_folds() {
        assert_eq!(parse_expr("-2", 1, 1).unwrap(), Expr::Num(-2.0));
        assert_eq!(
            parse_expr("x1--2", 1, 1).unwrap(),
            Expr::Binary(
                BinaryOp::Sub,
                Box::new(Expr::Var(Var::State(0))),
                Box::new(Expr::Num(-2.0)),
            )
        );
    }

    #[test]
    fn deep_nesting_is_rejected_not_crashing() {
        let src = format!("{}x1{}", "(".repeat(5000), ")".repeat(5000));
        let e = parse_expr(&src, 1, 1).unwrap_err();
        assert_eq!(e.kind, ParseErrorKind::TooDeep);
    }
}
