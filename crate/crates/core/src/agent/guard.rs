//! Guard and `set_state` expressions: boolean logic, comparisons and
//! arithmetic over trigger values, attributes, state and message fields.

use alloc::boxed::Box;
use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;

use thiserror::Error;

use crate::event::{Event, FieldValue};
use crate::pattern::CmpOp;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum GuardError {
    #[error("at offset {offset}: {message}")]
    Parse { offset: usize, message: String },
    #[error("{0}")]
    Type(String),
    #[error("unknown variable {0}")]
    UnknownVariable(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum VarRef {
    Value,
    Sender,
    Now,
    Attr(String),
    State(String),
    Msg(String),
}

impl VarRef {
    pub fn parse(s: &str) -> Option<VarRef> {
        match s {
            "value" => return Some(VarRef::Value),
            "sender" => return Some(VarRef::Sender),
            "now" => return Some(VarRef::Now),
            _ => {}
        }
        let (ns, name) = s.split_once('.')?;
        if name.is_empty() || !crate::event::is_identifier(name) {
            return None;
        }
        match ns {
            "attr" => Some(VarRef::Attr(name.into())),
            "state" => Some(VarRef::State(name.into())),
            "msg" => Some(VarRef::Msg(name.into())),
            _ => None,
        }
    }
}

impl fmt::Display for VarRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            VarRef::Value => f.write_str("value"),
            VarRef::Sender => f.write_str("sender"),
            VarRef::Now => f.write_str("now"),
            VarRef::Attr(n) => write!(f, "attr.{n}"),
            VarRef::State(n) => write!(f, "state.{n}"),
            VarRef::Msg(n) => write!(f, "msg.{n}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinOp {
    And,
    Or,
    Cmp(CmpOp),
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Lit(FieldValue),
    Var(VarRef),
    Not(Box<Expr>),
    Neg(Box<Expr>),
    Bin(BinOp, Box<Expr>, Box<Expr>),
}

/// Values visible to an expression.
pub struct Scope<'a> {
    pub value: &'a FieldValue,
    pub sender: Option<&'a str>,
    pub now: u64,
    pub attrs: &'a BTreeMap<String, FieldValue>,
    pub state: &'a BTreeMap<String, FieldValue>,
    pub msg: Option<&'a Event>,
}

impl Scope<'_> {
    pub fn lookup(&self, v: &VarRef) -> Result<FieldValue, GuardError> {
        let missing = || GuardError::UnknownVariable(v.to_string());
        match v {
            VarRef::Value => Ok(self.value.clone()),
            VarRef::Sender => self.sender.map(FieldValue::from).ok_or_else(missing),
            VarRef::Now => Ok(FieldValue::Integer(self.now as i64)),
            VarRef::Attr(n) => self.attrs.get(n).cloned().ok_or_else(missing),
            VarRef::State(n) => self.state.get(n).cloned().ok_or_else(missing),
            VarRef::Msg(n) => self.msg.and_then(|m| m.field(n)).cloned().ok_or_else(missing),
        }
    }
}

impl Expr {
    pub fn parse(text: &str) -> Result<Expr, GuardError> {
        let toks = lex(text)?;
        let mut p = Parser { toks, pos: 0 };
        let e = p.or()?;
        if p.pos != p.toks.len() {
            return Err(p.error("unexpected trailing input"));
        }
        Ok(e)
    }

    /// Every variable the expression reads.
    pub fn vars(&self) -> Vec<&VarRef> {
        let mut out = Vec::new();
        self.collect_vars(&mut out);
        out
    }

    fn collect_vars<'a>(&'a self, out: &mut Vec<&'a VarRef>) {
        match self {
            Expr::Lit(_) => {}
            Expr::Var(v) => out.push(v),
            Expr::Not(e) | Expr::Neg(e) => e.collect_vars(out),
            Expr::Bin(_, a, b) => {
                a.collect_vars(out);
                b.collect_vars(out);
            }
        }
    }

    pub fn eval(&self, scope: &Scope<'_>) -> Result<FieldValue, GuardError> {
        match self {
            Expr::Lit(v) => Ok(v.clone()),
            Expr::Var(v) => scope.lookup(v),
            Expr::Not(e) => Ok(FieldValue::Boolean(!as_bool(&e.eval(scope)?)?)),
            Expr::Neg(e) => match e.eval(scope)? {
                FieldValue::Integer(i) => i
                    .checked_neg()
                    .map(FieldValue::Integer)
                    .ok_or_else(|| GuardError::Type("integer overflow".into())),
                FieldValue::Number(n) => Ok(FieldValue::Number(-n)),
                other => Err(GuardError::Type(format!("cannot negate {}", other.type_name()))),
            },
            Expr::Bin(BinOp::And, a, b) => {
                if !as_bool(&a.eval(scope)?)? {
                    return Ok(FieldValue::Boolean(false));
                }
                Ok(FieldValue::Boolean(as_bool(&b.eval(scope)?)?))
            }
            Expr::Bin(BinOp::Or, a, b) => {
                if as_bool(&a.eval(scope)?)? {
                    return Ok(FieldValue::Boolean(true));
                }
                Ok(FieldValue::Boolean(as_bool(&b.eval(scope)?)?))
            }
            Expr::Bin(BinOp::Cmp(op), a, b) => {
                let (x, y) = (a.eval(scope)?, b.eval(scope)?);
                let ord = x.compare(&y).map_err(|e| GuardError::Type(e.to_string()))?;
                Ok(FieldValue::Boolean(op.holds(ord)))
            }
            Expr::Bin(op, a, b) => arith(*op, a.eval(scope)?, b.eval(scope)?),
        }
    }

    /// Evaluates to a boolean or fails.
    pub fn test(&self, scope: &Scope<'_>) -> Result<bool, GuardError> {
        as_bool(&self.eval(scope)?)
    }
}

fn as_bool(v: &FieldValue) -> Result<bool, GuardError> {
    match v {
        FieldValue::Boolean(b) => Ok(*b),
        other => Err(GuardError::Type(format!(
            "expected boolean, found {}",
            other.type_name()
        ))),
    }
}

fn arith(op: BinOp, a: FieldValue, b: FieldValue) -> Result<FieldValue, GuardError> {
    use FieldValue::{Integer, Number};
    let overflow = || GuardError::Type("integer overflow".into());
    match (op, &a, &b) {
        (BinOp::Add, Integer(x), Integer(y)) => x.checked_add(*y).map(Integer).ok_or_else(overflow),
        (BinOp::Sub, Integer(x), Integer(y)) => x.checked_sub(*y).map(Integer).ok_or_else(overflow),
        (BinOp::Mul, Integer(x), Integer(y)) => x.checked_mul(*y).map(Integer).ok_or_else(overflow),
        _ => {
            let (Some(x), Some(y)) = (num(&a), num(&b)) else {
                return Err(GuardError::Type(format!(
                    "arithmetic on {} and {}",
                    a.type_name(),
                    b.type_name()
                )));
            };
            let r = match op {
                BinOp::Add => x + y,
                BinOp::Sub => x - y,
                BinOp::Mul => x * y,
                BinOp::Div if y == 0.0 => return Err(GuardError::Type("division by zero".into())),
                BinOp::Div => x / y,
                _ => unreachable!("logical operators are handled by eval"),
            };
            Ok(Number(r))
        }
    }
}

fn num(v: &FieldValue) -> Option<f64> {
    match v {
        FieldValue::Integer(i) => Some(*i as f64),
        FieldValue::Number(n) => Some(*n),
        _ => None,
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Word(String),
    Str(String),
    Int(i64),
    Num(f64),
    Op(&'static str),
}

fn lex(text: &str) -> Result<Vec<(usize, Tok)>, GuardError> {
    let b = text.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < b.len() {
        let c = b[i];
        let start = i;
        if c.is_ascii_whitespace() {
            i += 1;
            continue;
        }
        if c.is_ascii_alphabetic() || c == b'_' {
            while i < b.len() && (b[i].is_ascii_alphanumeric() || b[i] == b'_' || b[i] == b'.') {
                i += 1;
            }
            out.push((start, Tok::Word(text[start..i].into())));
            continue;
        }
        if c.is_ascii_digit() {
            while i < b.len() && b[i].is_ascii_digit() {
                i += 1;
            }
            let mut float = false;
            if i + 1 < b.len() && b[i] == b'.' && b[i + 1].is_ascii_digit() {
                float = true;
                i += 1;
                while i < b.len() && b[i].is_ascii_digit() {
                    i += 1;
                }
            }
            let s = &text[start..i];
            let bad = || GuardError::Parse {
                offset: start,
                message: format!("bad number {s}"),
            };
            out.push((
                start,
                if float {
                    Tok::Num(s.parse().map_err(|_| bad())?)
                } else {
                    Tok::Int(s.parse().map_err(|_| bad())?)
                },
            ));
            continue;
        }
        if c == b'\'' || c == b'"' {
            i += 1;
            let body = i;
            while i < b.len() && b[i] != c {
                i += 1;
            }
            if i == b.len() {
                return Err(GuardError::Parse {
                    offset: start,
                    message: "unterminated string".into(),
                });
            }
            out.push((start, Tok::Str(text[body..i].into())));
            i += 1;
            continue;
        }
        let two = text.get(i..i + 2).unwrap_or("");
        let op = ["<=", ">=", "!=", "<>", "==", "&&", "||"]
            .into_iter()
            .find(|o| *o == two);
        if let Some(op) = op {
            out.push((start, Tok::Op(op)));
            i += 2;
            continue;
        }
        let op = match c {
            b'<' => "<",
            b'>' => ">",
            b'=' => "=",
            b'!' => "!",
            b'+' => "+",
            b'-' => "-",
            b'*' => "*",
            b'/' => "/",
            b'(' => "(",
            b')' => ")",
            _ => {
                return Err(GuardError::Parse {
                    offset: start,
                    message: format!("unexpected character {:?}", c as char),
                })
            }
        };
        out.push((start, Tok::Op(op)));
        i += 1;
    }
    Ok(out)
}

struct Parser {
    toks: Vec<(usize, Tok)>,
    pos: usize,
}

impl Parser {
    fn error(&self, message: &str) -> GuardError {
        let offset = self.toks.get(self.pos).map_or(usize::MAX, |t| t.0);
        GuardError::Parse {
            offset,
            message: message.into(),
        }
    }

    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.pos).map(|t| &t.1)
    }

    fn eat_op(&mut self, ops: &[&str]) -> Option<&'static str> {
        match self.peek() {
            Some(Tok::Op(o)) if ops.contains(o) => {
                let o = *o;
                self.pos += 1;
                Some(o)
            }
            _ => None,
        }
    }

    fn eat_word(&mut self, w: &str) -> bool {
        match self.peek() {
            Some(Tok::Word(s)) if s.eq_ignore_ascii_case(w) => {
                self.pos += 1;
                true
            }
            _ => false,
        }
    }

    fn or(&mut self) -> Result<Expr, GuardError> {
        let mut e = self.and()?;
        while self.eat_word("or") || self.eat_op(&["||"]).is_some() {
            e = Expr::Bin(BinOp::Or, Box::new(e), Box::new(self.and()?));
        }
        Ok(e)
    }

    fn and(&mut self) -> Result<Expr, GuardError> {
        let mut e = self.not()?;
        while self.eat_word("and") || self.eat_op(&["&&"]).is_some() {
            e = Expr::Bin(BinOp::And, Box::new(e), Box::new(self.not()?));
        }
        Ok(e)
    }

    fn not(&mut self) -> Result<Expr, GuardError> {
        if self.eat_word("not") || self.eat_op(&["!"]).is_some() {
            return Ok(Expr::Not(Box::new(self.not()?)));
        }
        self.cmp()
    }

    fn cmp(&mut self) -> Result<Expr, GuardError> {
        let lhs = self.sum()?;
        let op = match self.eat_op(&["=", "==", "!=", "<>", "<", "<=", ">", ">="]) {
            None => return Ok(lhs),
            Some("=" | "==") => CmpOp::Eq,
            Some("!=" | "<>") => CmpOp::Ne,
            Some("<") => CmpOp::Lt,
            Some("<=") => CmpOp::Le,
            Some(">") => CmpOp::Gt,
            Some(_) => CmpOp::Ge,
        };
        let rhs = self.sum()?;
        Ok(Expr::Bin(BinOp::Cmp(op), Box::new(lhs), Box::new(rhs)))
    }

    fn sum(&mut self) -> Result<Expr, GuardError> {
        let mut e = self.product()?;
        while let Some(o) = self.eat_op(&["+", "-"]) {
            let op = if o == "+" { BinOp::Add } else { BinOp::Sub };
            e = Expr::Bin(op, Box::new(e), Box::new(self.product()?));
        }
        Ok(e)
    }

    fn product(&mut self) -> Result<Expr, GuardError> {
        let mut e = self.unary()?;
        while let Some(o) = self.eat_op(&["*", "/"]) {
            let op = if o == "*" { BinOp::Mul } else { BinOp::Div };
            e = Expr::Bin(op, Box::new(e), Box::new(self.unary()?));
        }
        Ok(e)
    }

    fn unary(&mut self) -> Result<Expr, GuardError> {
        if self.eat_op(&["-"]).is_some() {
            return Ok(Expr::Neg(Box::new(self.unary()?)));
        }
        self.atom()
    }

    fn atom(&mut self) -> Result<Expr, GuardError> {
        let Some(tok) = self.peek().cloned() else {
            return Err(self.error("unexpected end of expression"));
        };
        let e = match tok {
            Tok::Int(i) => Expr::Lit(FieldValue::Integer(i)),
            Tok::Num(n) => Expr::Lit(FieldValue::Number(n)),
            Tok::Str(s) => Expr::Lit(FieldValue::String(s)),
            Tok::Op("(") => {
                self.pos += 1;
                let e = self.or()?;
                if self.eat_op(&[")"]).is_none() {
                    return Err(self.error("expected `)`"));
                }
                return Ok(e);
            }
            Tok::Word(w) => match w.to_ascii_lowercase().as_str() {
                "true" => Expr::Lit(FieldValue::Boolean(true)),
                "false" => Expr::Lit(FieldValue::Boolean(false)),
                "null" => Expr::Lit(FieldValue::Null),
                _ => match VarRef::parse(&w) {
                    Some(v) => Expr::Var(v),
                    None => return Err(GuardError::UnknownVariable(w)),
                },
            },
            Tok::Op(_) => return Err(self.error("expected a value")),
        };
        self.pos += 1;
        Ok(e)
    }
}
