//! Minimal scalar-field expression language.
//!
//! Grammar (whitespace insensitive, juxtaposition multiplies):
//!
//! ```text
//! sum     := product (('+' | '-') product)*
//! product := unary (('*' | '/' | '·')? unary)*
//! unary   := '-' unary | call
//! call    := ('sin' | 'cos' | 'exp') call | atom
//! atom    := number | identifier | '(' sum ')'
//! ```
//!
//! so `0.3 sin θ cos φ` parses as `0.3 · sin(θ) · cos(φ)`.

use std::collections::BTreeSet;
use std::fmt;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ExprError {
    #[error("unexpected {found} at offset {offset}")]
    Unexpected { found: String, offset: usize },
    #[error("unknown variable `{0}`")]
    UnknownVariable(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Func {
    Sin,
    Cos,
    Exp,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Expr {
    Num(f64),
    Var(String),
    Neg(Box<Expr>),
    Add(Box<Expr>, Box<Expr>),
    Sub(Box<Expr>, Box<Expr>),
    Mul(Box<Expr>, Box<Expr>),
    Div(Box<Expr>, Box<Expr>),
    Call(Func, Box<Expr>),
}

#[derive(Clone, Debug, PartialEq)]
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

fn tokenize(src: &str) -> Result<Vec<(Token, usize)>, ExprError> {
    let mut out = Vec::new();
    let chars: Vec<(usize, char)> = src.char_indices().collect();
    let mut i = 0;
    while i < chars.len() {
        let (off, c) = chars[i];
        match c {
            c if c.is_whitespace() => i += 1,
            '+' => {
                out.push((Token::Plus, off));
                i += 1
            }
            '-' | '−' => {
                out.push((Token::Minus, off));
                i += 1
            }
            '*' | '·' | '×' => {
                out.push((Token::Star, off));
                i += 1
            }
            '/' => {
                out.push((Token::Slash, off));
                i += 1
            }
            '(' => {
                out.push((Token::LParen, off));
                i += 1
            }
            ')' => {
                out.push((Token::RParen, off));
                i += 1
            }
            c if c.is_ascii_digit() || c == '.' => {
                let start = i;
                while i < chars.len() && (chars[i].1.is_ascii_digit() || chars[i].1 == '.') {
                    i += 1;
                }
                // exponent suffix
                if i < chars.len() && (chars[i].1 == 'e' || chars[i].1 == 'E') {
                    let mut j = i + 1;
                    if j < chars.len() && (chars[j].1 == '+' || chars[j].1 == '-') {
                        j += 1;
                    }
                    if j < chars.len() && chars[j].1.is_ascii_digit() {
                        i = j;
                        while i < chars.len() && chars[i].1.is_ascii_digit() {
                            i += 1;
                        }
                    }
                }
                let text: String = chars[start..i].iter().map(|&(_, c)| c).collect();
                let value = text.parse::<f64>().map_err(|_| ExprError::Unexpected {
                    found: text.clone(),
                    offset: off,
                })?;
                out.push((Token::Num(value), off));
            }
            c if c.is_alphabetic() || c == '_' => {
                let start = i;
                while i < chars.len() && (chars[i].1.is_alphanumeric() || chars[i].1 == '_') {
                    i += 1;
                }
                let text: String = chars[start..i].iter().map(|&(_, c)| c).collect();
                out.push((Token::Ident(text), off));
            }
            other => {
                return Err(ExprError::Unexpected {
                    found: format!("character `{other}`"),
                    offset: off,
                })
            }
        }
    }
    Ok(out)
}

struct Parser {
    tokens: Vec<(Token, usize)>,
    pos: usize,
    len: usize,
}

impl Parser {
    fn peek(&self) -> Option<&Token> {
        self.tokens.get(self.pos).map(|(t, _)| t)
    }

    fn offset(&self) -> usize {
        self.tokens.get(self.pos).map(|&(_, o)| o).unwrap_or(self.len)
    }

    fn unexpected(&self) -> ExprError {
        ExprError::Unexpected {
            found: match self.peek() {
                Some(t) => format!("{t:?}"),
                None => "end of input".into(),
            },
            offset: self.offset(),
        }
    }

    fn sum(&mut self) -> Result<Expr, ExprError> {
        let mut lhs = self.product()?;
        loop {
            match self.peek() {
                Some(Token::Plus) => {
                    self.pos += 1;
                    lhs = Expr::Add(Box::new(lhs), Box::new(self.product()?));
                }
                Some(Token::Minus) => {
                    self.pos += 1;
                    lhs = Expr::Sub(Box::new(lhs), Box::new(self.product()?));
                }
                _ => return Ok(lhs),
            }
        }
    }

    fn product(&mut self) -> Result<Expr, ExprError> {
        let mut lhs = self.unary()?;
        loop {
            match self.peek() {
                Some(Token::Star) => {
                    self.pos += 1;
                    lhs = Expr::Mul(Box::new(lhs), Box::new(self.unary()?));
                }
                Some(Token::Slash) => {
                    self.pos += 1;
                    lhs = Expr::Div(Box::new(lhs), Box::new(self.unary()?));
                }
                Some(Token::Num(_)) | Some(Token::Ident(_)) | Some(Token::LParen) => {
                    lhs = Expr::Mul(Box::new(lhs), Box::new(self.unary()?));
                }
                _ => return Ok(lhs),
            }
        }
    }

    fn unary(&mut self) -> Result<Expr, ExprError> {
        if let Some(Token::Minus) = self.peek() {
            self.pos += 1;
            return Ok(Expr::Neg(Box::new(self.unary()?)));
        }
        self.call()
    }

    fn call(&mut self) -> Result<Expr, ExprError> {
        if let Some(Token::Ident(name)) = self.peek() {
            let func = match name.as_str() {
                "sin" => Some(Func::Sin),
                "cos" => Some(Func::Cos),
                "exp" => Some(Func::Exp),
                _ => None,
            };
            if let Some(func) = func {
                self.pos += 1;
                return Ok(Expr::Call(func, Box::new(self.call()?)));
            }
        }
        self.atom()
    }

    fn atom(&mut self) -> Result<Expr, ExprError> {
        match self.peek().cloned() {
            Some(Token::Num(v)) => {
                self.pos += 1;
                Ok(Expr::Num(v))
            }
            Some(Token::Ident(name)) => {
                self.pos += 1;
                Ok(Expr::Var(name))
            }
            Some(Token::LParen) => {
                self.pos += 1;
                let inner = self.sum()?;
                match self.peek() {
                    Some(Token::RParen) => {
                        self.pos += 1;
                        Ok(inner)
                    }
                    _ => Err(self.unexpected()),
                }
            }
            _ => Err(self.unexpected()),
        }
    }
}

impl Expr {
    pub fn parse(src: &str) -> Result<Expr, ExprError> {
        let tokens = tokenize(src)?;
        let mut parser = Parser {
            tokens,
            pos: 0,
            len: src.len(),
        };
        let expr = parser.sum()?;
        if parser.pos != parser.tokens.len() {
            return Err(parser.unexpected());
        }
        Ok(expr)
    }

    pub fn variables(&self) -> BTreeSet<String> {
        let mut out = BTreeSet::new();
        self.collect_vars(&mut out);
        out
    }

    fn collect_vars(&self, out: &mut BTreeSet<String>) {
        match self {
            Expr::Num(_) => {}
            Expr::Var(v) => {
                out.insert(v.clone());
            }
            Expr::Neg(a) | Expr::Call(_, a) => a.collect_vars(out),
            Expr::Add(a, b) | Expr::Sub(a, b) | Expr::Mul(a, b) | Expr::Div(a, b) => {
                a.collect_vars(out);
                b.collect_vars(out);
            }
        }
    }

    /// Evaluates with variable lookup; unknown names are an error.
    pub fn eval(&self, lookup: &dyn Fn(&str) -> Option<f64>) -> Result<f64, ExprError> {
        Ok(match self {
            Expr::Num(v) => *v,
            Expr::Var(v) => lookup(v).ok_or_else(|| ExprError::UnknownVariable(v.clone()))?,
            Expr::Neg(a) => -a.eval(lookup)?,
            Expr::Add(a, b) => a.eval(lookup)? + b.eval(lookup)?,
            Expr::Sub(a, b) => a.eval(lookup)? - b.eval(lookup)?,
            Expr::Mul(a, b) => a.eval(lookup)? * b.eval(lookup)?,
            Expr::Div(a, b) => a.eval(lookup)? / b.eval(lookup)?,
            Expr::Call(f, a) => {
                let x = a.eval(lookup)?;
                match f {
                    Func::Sin => x.sin(),
                    Func::Cos => x.cos(),
                    Func::Exp => x.exp(),
                }
            }
        })
    }

    /// Symbolic partial derivative with respect to `var`.
    pub fn derivative(&self, var: &str) -> Expr {
        use Expr::*;
        let d = match self {
            Num(_) => Num(0.0),
            Var(v) => Num(if v == var { 1.0 } else { 0.0 }),
            Neg(a) => Neg(Box::new(a.derivative(var))),
            Add(a, b) => Add(Box::new(a.derivative(var)), Box::new(b.derivative(var))),
            Sub(a, b) => Sub(Box::new(a.derivative(var)), Box::new(b.derivative(var))),
            Mul(a, b) => Add(
                Box::new(Mul(Box::new(a.derivative(var)), b.clone())),
                Box::new(Mul(a.clone(), Box::new(b.derivative(var)))),
            ),
            Div(a, b) => Div(
                Box::new(Sub(
                    Box::new(Mul(Box::new(a.derivative(var)), b.clone())),
                    Box::new(Mul(a.clone(), Box::new(b.derivative(var)))),
                )),
                Box::new(Mul(b.clone(), b.clone())),
            ),
            Call(f, a) => {
                let outer = match f {
                    Func::Sin => Call(Func::Cos, a.clone()),
                    Func::Cos => Neg(Box::new(Call(Func::Sin, a.clone()))),
                    Func::Exp => Call(Func::Exp, a.clone()),
                };
                Mul(Box::new(outer), Box::new(a.derivative(var)))
            }
        };
        d.simplify()
    }

    fn is_zero(&self) -> bool {
        matches!(self, Expr::Num(v) if *v == 0.0)
    }

    fn simplify(self) -> Expr {
        use Expr::*;
        match self {
            Neg(a) => match a.simplify() {
                Num(v) => Num(-v),
                other => Neg(Box::new(other)),
            },
            Add(a, b) => {
                let (a, b) = (a.simplify(), b.simplify());
                if a.is_zero() {
                    b
                } else if b.is_zero() {
                    a
                } else {
                    Add(Box::new(a), Box::new(b))
                }
            }
            Sub(a, b) => {
                let (a, b) = (a.simplify(), b.simplify());
                if b.is_zero() {
                    a
                } else if a.is_zero() {
                    Neg(Box::new(b))
                } else {
                    Sub(Box::new(a), Box::new(b))
                }
            }
            Mul(a, b) => {
                let (a, b) = (a.simplify(), b.simplify());
                if a.is_zero() || b.is_zero() {
                    Num(0.0)
                } else if matches!(a, Num(v) if v == 1.0) {
                    b
                } else if matches!(b, Num(v) if v == 1.0) {
                    a
                } else {
                    Mul(Box::new(a), Box::new(b))
                }
            }
            Div(a, b) => {
                let (a, b) = (a.simplify(), b.simplify());
                if a.is_zero() {
                    Num(0.0)
                } else {
                    Div(Box::new(a), Box::new(b))
                }
            }
            other => other,
        }
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expr::Num(v) => write!(f, "{v}"),
            Expr::Var(v) => write!(f, "{v}"),
            Expr::Neg(a) => write!(f, "-({a})"),
            Expr::Add(a, b) => write!(f, "({a} + {b})"),
            Expr::Sub(a, b) => write!(f, "({a} - {b})"),
            Expr::Mul(a, b) => write!(f, "{a}*{b}"),
            Expr::Div(a, b) => write!(f, "({a})/({b})"),
            Expr::Call(func, a) => {
                let name = match func {
                    Func::Sin => "sin",
                    Func::Cos => "cos",
                    Func::Exp => "exp",
                };
                write!(f, "{name}({a})")
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn at(expr: &Expr, theta: f64, phi: f64) -> f64 {
        expr.eval(&|v| match v {
            "theta" | "θ" => Some(theta),
            "phi" | "φ" => Some(phi),
            _ => None,
        })
        .unwrap()
    }

    #[test]
    fn juxtaposition_and_unicode() {
        let e = Expr::parse("0.3 sin θ cos φ").unwrap();
        let expected = 0.3 * 0.7f64.sin() * 1.1f64.cos();
        assert!((at(&e, 0.7, 1.1) - expected).abs() < 1e-15);
        let e = Expr::parse("0.3·cos(theta) − 2/phi").unwrap();
        assert!((at(&e, 0.5, 4.0) - (0.3 * 0.5f64.cos() - 0.5)).abs() < 1e-15);
    }

    #[test]
    fn precedence() {
        let e = Expr::parse("1 + 2*3 - 4/2").unwrap();
        assert_eq!(e.eval(&|_| None).unwrap(), 5.0);
        let e = Expr::parse("-2*-3").unwrap();
        assert_eq!(e.eval(&|_| None).unwrap(), 6.0);
        let e = Expr::parse("exp(0) + 1e-1").unwrap();
        assert!((e.eval(&|_| None).unwrap() - 1.1).abs() < 1e-15);
    }

    #[test]
    fn errors_are_positioned() {
        assert!(matches!(
            Expr::parse("sin(theta"),
            Err(ExprError::Unexpected { offset: 9, .. })
        ));
        assert!(matches!(
            Expr::parse("2 $ 3"),
            Err(ExprError::Unexpected { offset: 2, .. })
        ));
        let e = Expr::parse("psi + 1").unwrap();
        assert_eq!(e.eval(&|_| None), Err(ExprError::UnknownVariable("psi".into())));
    }

    #[test]
    fn derivative_matches_finite_difference() {
        let e = Expr::parse("0.3 sin(theta) cos(phi) + exp(theta*phi)/(2 + cos theta)").unwrap();
        let dt = e.derivative("theta");
        let dp = e.derivative("phi");
        let (t, p, h) = (0.8, 2.1, 1e-5);
        let fd_t = (at(&e, t + h, p) - at(&e, t - h, p)) / (2.0 * h);
        let fd_p = (at(&e, t, p + h) - at(&e, t, p - h)) / (2.0 * h);
        assert!((at(&dt, t, p) - fd_t).abs() < 1e-8);
        assert!((at(&dp, t, p) - fd_p).abs() < 1e-8);
        assert_eq!(Expr::parse("cos(phi)").unwrap().derivative("theta"), Expr::Num(0.0));
    }
}
