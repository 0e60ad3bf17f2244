use alloc::string::String;
use alloc::vec::Vec;

use super::{PatternError, PatternErrorKind};

#[derive(Debug, Clone, PartialEq)]
pub(crate) enum Tok {
    Ident(String),
    Str(String),
    Int(i64),
    Num(f64),
    At,
    LParen,
    RParen,
    LBracket,
    RBracket,
    Comma,
    Dot,
    Colon,
    Star,
    Eq,
    Ne,
    Lt,
    Le,
    Gt,
    Ge,
    Arrow,
    Other(char),
    Eof,
}

impl Tok {
    pub(crate) fn describe(&self) -> String {
        use alloc::format;
        match self {
            Tok::Ident(s) => format!("`{s}`"),
            Tok::Str(s) => format!("string '{s}'"),
            Tok::Int(i) => format!("number {i}"),
            Tok::Num(n) => format!("number {n}"),
            Tok::At => "`@`".into(),
            Tok::LParen => "`(`".into(),
            Tok::RParen => "`)`".into(),
            Tok::LBracket => "`[`".into(),
            Tok::RBracket => "`]`".into(),
            Tok::Comma => "`,`".into(),
            Tok::Dot => "`.`".into(),
            Tok::Colon => "`:`".into(),
            Tok::Star => "`*`".into(),
            Tok::Eq => "`=`".into(),
            Tok::Ne => "`!=`".into(),
            Tok::Lt => "`<`".into(),
            Tok::Le => "`<=`".into(),
            Tok::Gt => "`>`".into(),
            Tok::Ge => "`>=`".into(),
            Tok::Arrow => "`->`".into(),
            Tok::Other(c) => format!("`{c}`"),
            Tok::Eof => "end of input".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Spanned {
    pub tok: Tok,
    pub line: u32,
    pub column: u32,
}

pub(crate) fn tokenize(text: &str) -> Result<Vec<Spanned>, PatternError> {
    let chars: Vec<char> = text.chars().collect();
    let mut out = Vec::new();
    let (mut i, mut line, mut col) = (0usize, 1u32, 1u32);
    while i < chars.len() {
        let c = chars[i];
        let (start_line, start_col) = (line, col);
        let advance = |n: usize, i: &mut usize, col: &mut u32| {
            *i += n;
            *col += n as u32;
        };
        if c == '\n' {
            i += 1;
            line += 1;
            col = 1;
            continue;
        }
        if c.is_whitespace() {
            advance(1, &mut i, &mut col);
            continue;
        }
        let next = chars.get(i + 1).copied();
        let tok = if c.is_ascii_alphabetic() || c == '_' {
            let mut s = String::new();
            while i < chars.len() && (chars[i].is_ascii_alphanumeric() || chars[i] == '_') {
                s.push(chars[i]);
                advance(1, &mut i, &mut col);
            }
            Tok::Ident(s)
        } else if c.is_ascii_digit() || (c == '-' && next.is_some_and(|n| n.is_ascii_digit())) {
            let mut s = String::new();
            s.push(c);
            advance(1, &mut i, &mut col);
            let mut float = false;
            while i < chars.len() {
                let d = chars[i];
                let after = chars.get(i + 1).copied();
                if d.is_ascii_digit() {
                    s.push(d);
                } else if d == '.' && !float && after.is_some_and(|a| a.is_ascii_digit()) {
                    float = true;
                    s.push(d);
                } else if (d == 'e' || d == 'E') && after.is_some_and(|a| a.is_ascii_digit() || a == '-' || a == '+') {
                    float = true;
                    s.push(d);
                    if let Some(sign @ ('-' | '+')) = after {
                        s.push(sign);
                        advance(1, &mut i, &mut col);
                    }
                } else {
                    break;
                }
                advance(1, &mut i, &mut col);
            }
            let err = || {
                PatternError::new(
                    PatternErrorKind::Syntax(alloc::format!("bad number {s}")),
                    start_line,
                    start_col,
                )
            };
            if float {
                Tok::Num(s.parse::<f64>().map_err(|_| err())?)
            } else {
                Tok::Int(s.parse::<i64>().map_err(|_| err())?)
            }
        } else if c == '\'' || c == '"' {
            let quote = c;
            advance(1, &mut i, &mut col);
            let mut s = String::new();
            loop {
                let Some(&d) = chars.get(i) else {
                    return Err(PatternError::new(
                        PatternErrorKind::Syntax("unterminated string".into()),
                        start_line,
                        start_col,
                    ));
                };
                if d == '\n' {
                    line += 1;
                    col = 1;
                    i += 1;
                    s.push(d);
                    continue;
                }
                advance(1, &mut i, &mut col);
                if d == '\\' {
                    if let Some(&e) = chars.get(i) {
                        s.push(e);
                        advance(1, &mut i, &mut col);
                    }
                } else if d == quote {
                    break;
                } else {
                    s.push(d);
                }
            }
            Tok::Str(s)
        } else {
            let (tok, n) = match (c, next) {
                ('!', Some('=')) => (Tok::Ne, 2),
                ('<', Some('>')) => (Tok::Ne, 2),
                ('<', Some('=')) => (Tok::Le, 2),
                ('>', Some('=')) => (Tok::Ge, 2),
                ('-', Some('>')) => (Tok::Arrow, 2),
                ('@', _) => (Tok::At, 1),
                ('(', _) => (Tok::LParen, 1),
                (')', _) => (Tok::RParen, 1),
                ('[', _) => (Tok::LBracket, 1),
                (']', _) => (Tok::RBracket, 1),
                (',', _) => (Tok::Comma, 1),
                ('.', _) => (Tok::Dot, 1),
                (':', _) => (Tok::Colon, 1),
                ('*', _) => (Tok::Star, 1),
                ('=', _) => (Tok::Eq, 1),
                ('<', _) => (Tok::Lt, 1),
                ('>', _) => (Tok::Gt, 1),
                (other, _) => (Tok::Other(other), 1),
            };
            advance(n, &mut i, &mut col);
            tok
        };
        out.push(Spanned {
            tok,
            line: start_line,
            column: start_col,
        });
    }
    out.push(Spanned {
        tok: Tok::Eof,
        line,
        column: col,
    });
    Ok(out)
}
