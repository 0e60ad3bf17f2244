use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use super::lexer::{tokenize, Spanned, Tok};
use super::{
    Binding, CmpOp, Duration, FieldPath, Operand, PatternDef, PatternError, PatternErrorKind, Predicate, SelectItem,
    TimeUnit,
};
use crate::event::{FieldValue, StreamName};

/// Words that name constructs outside the supported subset.
const UNSUPPORTED_WORDS: &[&str] = &[
    "or",
    "not",
    "where",
    "having",
    "order",
    "output",
    "limit",
    "distinct",
    "within",
    "until",
    "unidirectional",
    "join",
    "like",
    "in",
    "between",
    "regexp",
    "is",
    "case",
    "match_recognize",
];

const AGGREGATES: &[&str] = &[
    "sum", "avg", "min", "max", "median", "stddev", "avedev", "first", "last", "window", "prev",
];

/// Parses exactly one pattern.
pub fn parse_pattern(text: &str) -> Result<PatternDef, PatternError> {
    let mut p = Parser::new(text)?;
    let def = p.pattern()?;
    p.skip_separators();
    if !p.at_eof() {
        return Err(p.unexpected("end of input"));
    }
    Ok(def)
}

/// Parses a file holding one or more patterns.
pub fn parse_patterns(text: &str) -> Result<Vec<PatternDef>, PatternError> {
    let mut p = Parser::new(text)?;
    let mut out = Vec::new();
    p.skip_separators();
    while !p.at_eof() {
        out.push(p.pattern()?);
        p.skip_separators();
    }
    if out.is_empty() {
        return Err(PatternError::new(
            PatternErrorKind::Syntax("no pattern found".into()),
            1,
            1,
        ));
    }
    Ok(out)
}

struct Parser {
    toks: Vec<Spanned>,
    pos: usize,
}

fn kw(t: &Tok, word: &str) -> bool {
    matches!(t, Tok::Ident(s) if s.eq_ignore_ascii_case(word))
}

impl Parser {
    fn new(text: &str) -> Result<Self, PatternError> {
        Ok(Parser {
            toks: tokenize(text)?,
            pos: 0,
        })
    }

    fn peek(&self) -> &Tok {
        &self.toks[self.pos].tok
    }

    fn peek_at(&self, n: usize) -> &Tok {
        let i = (self.pos + n).min(self.toks.len() - 1);
        &self.toks[i].tok
    }

    fn at_eof(&self) -> bool {
        *self.peek() == Tok::Eof
    }

    fn bump(&mut self) -> Tok {
        let t = self.toks[self.pos].tok.clone();
        if self.pos + 1 < self.toks.len() {
            self.pos += 1;
        }
        t
    }

    fn skip_separators(&mut self) {
        while *self.peek() == Tok::Other(';') {
            self.bump();
        }
    }

    fn error_here(&self, kind: PatternErrorKind) -> PatternError {
        let s = &self.toks[self.pos];
        PatternError::new(kind, s.line, s.column)
    }

    fn unexpected(&self, expected: &str) -> PatternError {
        self.error_here(PatternErrorKind::Syntax(format!(
            "expected {expected}, found {}",
            self.peek().describe()
        )))
    }

    fn unsupported(&self, what: impl Into<String>) -> PatternError {
        self.error_here(PatternErrorKind::Unsupported(what.into()))
    }

    /// Rejects tokens that open a construct outside the subset.
    fn check_unsupported(&self) -> Result<(), PatternError> {
        match self.peek() {
            Tok::Arrow => Err(self.unsupported("followed-by operator `->`")),
            Tok::Ident(s) => {
                let lower = s.to_ascii_lowercase();
                if UNSUPPORTED_WORDS.contains(&lower.as_str()) {
                    Err(self.unsupported(format!("`{lower}`")))
                } else {
                    Ok(())
                }
            }
            _ => Ok(()),
        }
    }

    fn expect(&mut self, tok: Tok) -> Result<(), PatternError> {
        if *self.peek() == tok {
            self.bump();
            Ok(())
        } else {
            Err(self.unexpected(&tok.describe()))
        }
    }

    fn expect_kw(&mut self, word: &str) -> Result<(), PatternError> {
        if kw(self.peek(), word) {
            self.bump();
            Ok(())
        } else {
            self.check_unsupported()?;
            Err(self.unexpected(&format!("`{word}`")))
        }
    }

    fn ident(&mut self, what: &str) -> Result<String, PatternError> {
        match self.peek() {
            Tok::Ident(s) => {
                let s = s.clone();
                self.bump();
                Ok(s)
            }
            _ => Err(self.unexpected(what)),
        }
    }

    fn qstring(&mut self) -> Result<String, PatternError> {
        match self.peek() {
            Tok::Str(s) => {
                let s = s.clone();
                self.bump();
                Ok(s)
            }
            _ => Err(self.unexpected("a quoted string")),
        }
    }

    fn stream_name(&mut self) -> Result<StreamName, PatternError> {
        let s = &self.toks[self.pos];
        let (line, column) = (s.line, s.column);
        let name = self.ident("a stream name")?;
        StreamName::new(name.clone()).map_err(|_| {
            PatternError::new(
                PatternErrorKind::Semantic(format!("invalid stream name {name:?}")),
                line,
                column,
            )
        })
    }

    fn field_path(&mut self) -> Result<FieldPath, PatternError> {
        let alias = self.ident("an alias")?;
        self.expect(Tok::Dot)?;
        let field = self.ident("a field name")?;
        Ok(FieldPath { alias, field })
    }

    fn pattern(&mut self) -> Result<PatternDef, PatternError> {
        let start = (self.toks[self.pos].line, self.toks[self.pos].column);
        let mut name = None;
        let mut tags = BTreeMap::new();
        while *self.peek() == Tok::At {
            self.bump();
            let annot = self.ident("an annotation name")?;
            if annot.eq_ignore_ascii_case("name") {
                if name.is_some() {
                    return Err(self.error_here(PatternErrorKind::Syntax("duplicate @Name".into())));
                }
                self.expect(Tok::LParen)?;
                name = Some(self.qstring()?);
                self.expect(Tok::RParen)?;
            } else if annot.eq_ignore_ascii_case("tag") {
                self.expect(Tok::LParen)?;
                self.expect_kw("name")?;
                self.expect(Tok::Eq)?;
                let key = self.qstring()?;
                self.expect(Tok::Comma)?;
                self.expect_kw("value")?;
                self.expect(Tok::Eq)?;
                let value = self.qstring()?;
                self.expect(Tok::RParen)?;
                if tags.insert(key.clone(), value).is_some() {
                    return Err(self.error_here(PatternErrorKind::Semantic(format!("duplicate tag {key:?}"))));
                }
            } else {
                return Err(self.unsupported(format!("@{annot} annotation")));
            }
        }
        if kw(self.peek(), "select") {
            return Err(self.unsupported("select without insert into"));
        }
        self.expect_kw("insert")?;
        self.expect_kw("into")?;
        let insert_into = self.stream_name()?;
        self.expect_kw("select")?;
        let mut select = alloc::vec![self.select_item()?];
        while *self.peek() == Tok::Comma {
            self.bump();
            select.push(self.select_item()?);
        }
        self.expect_kw("from")?;
        if !kw(self.peek(), "pattern") {
            if matches!(self.peek(), Tok::Ident(_)) {
                return Err(self.unsupported("stream source other than `pattern`"));
            }
            return Err(self.unexpected("`pattern`"));
        }
        self.bump();
        self.expect(Tok::LBracket)?;
        let mut bindings = self.pexpr()?;
        self.check_unsupported()?;
        self.expect(Tok::RBracket)?;
        let window = if *self.peek() == Tok::Dot {
            Some(self.window()?)
        } else {
            None
        };
        let mut group_by = Vec::new();
        if kw(self.peek(), "group") {
            self.bump();
            self.expect_kw("by")?;
            group_by.push(self.field_path()?);
            while *self.peek() == Tok::Comma {
                self.bump();
                group_by.push(self.field_path()?);
            }
        }
        self.check_unsupported()?;
        if !matches!(self.peek(), Tok::Eof | Tok::At | Tok::Other(';')) && !kw(self.peek(), "insert") {
            return Err(self.unexpected("end of pattern"));
        }
        for b in &mut bindings {
            b.select_all = select
                .iter()
                .any(|s| matches!(s, SelectItem::StarOf(a) if *a == b.alias));
        }
        let def = PatternDef {
            name: name.unwrap_or_else(|| String::from(insert_into.as_str())),
            tags,
            insert_into,
            select,
            bindings,
            window,
            group_by,
        };
        def.validate()
            .map_err(|e| PatternError::new(e.kind, start.0, start.1))?;
        Ok(def)
    }

    fn select_item(&mut self) -> Result<SelectItem, PatternError> {
        if *self.peek() == Tok::Star {
            return Err(self.unsupported("`select *`"));
        }
        self.check_unsupported()?;
        let Tok::Ident(first) = self.peek().clone() else {
            return Err(self.unexpected("a select item"));
        };
        if *self.peek_at(1) == Tok::LParen {
            let lower = first.to_ascii_lowercase();
            if lower == "current_timestamp" {
                self.bump();
                self.bump();
                self.expect(Tok::RParen)?;
                let name = self.alias_name()?;
                return Ok(SelectItem::CurrentTimestamp { name });
            }
            if lower == "count" {
                self.bump();
                self.bump();
                if *self.peek() == Tok::Star {
                    return Err(self.unsupported("`count(*)`"));
                }
                self.check_unsupported()?;
                let path = self.field_path()?;
                self.expect(Tok::RParen)?;
                let name = self.alias_name()?;
                return Ok(SelectItem::Count { path, name });
            }
            if AGGREGATES.contains(&lower.as_str()) {
                return Err(self.unsupported(format!("aggregate `{lower}`")));
            }
            return Err(self.unsupported(format!("function `{first}`")));
        }
        self.bump();
        self.expect(Tok::Dot)?;
        if *self.peek() == Tok::Star {
            self.bump();
            return Ok(SelectItem::StarOf(first));
        }
        let field = self.ident("a field name")?;
        let name = self.alias_name()?;
        Ok(SelectItem::FieldRef {
            path: FieldPath { alias: first, field },
            name,
        })
    }

    fn alias_name(&mut self) -> Result<String, PatternError> {
        self.check_unsupported()?;
        self.expect_kw("as")?;
        self.ident("an output name")
    }

    /// Returns the bindings of `every b` or `every (b and b ...)`, with any
    /// number of enclosing parentheses.
    fn pexpr(&mut self) -> Result<Vec<Binding>, PatternError> {
        if *self.peek() == Tok::LParen {
            self.bump();
            let inner = self.pexpr()?;
            self.check_unsupported()?;
            self.expect(Tok::RParen)?;
            return Ok(inner);
        }
        self.check_unsupported()?;
        if !kw(self.peek(), "every") {
            if matches!(self.peek(), Tok::Ident(_)) {
                return Err(self.unsupported("pattern without `every`"));
            }
            return Err(self.unexpected("`every`"));
        }
        self.bump();
        if *self.peek() == Tok::Other('-') {
            return Err(self.unsupported("`every-distinct`"));
        }
        if *self.peek() != Tok::LParen {
            let b = self.binding()?;
            if kw(self.peek(), "and") {
                return Err(self.error_here(PatternErrorKind::Syntax(
                    "a conjunction must be parenthesized after `every`".into(),
                )));
            }
            return Ok(alloc::vec![b]);
        }
        self.bump();
        let mut out = alloc::vec![self.binding()?];
        loop {
            self.check_unsupported()?;
            if kw(self.peek(), "and") {
                self.bump();
                if kw(self.peek(), "every") {
                    return Err(self.unsupported("nested `every`"));
                }
                out.push(self.binding()?);
            } else {
                break;
            }
        }
        self.expect(Tok::RParen)?;
        Ok(out)
    }

    fn binding(&mut self) -> Result<Binding, PatternError> {
        self.check_unsupported()?;
        let alias = self.ident("a binding alias")?;
        self.expect(Tok::Eq)?;
        let stream = self.stream_name()?;
        let mut predicates = Vec::new();
        if *self.peek() == Tok::LParen {
            self.bump();
            predicates.push(self.predicate()?);
            loop {
                self.check_unsupported()?;
                if kw(self.peek(), "and") {
                    self.bump();
                    predicates.push(self.predicate()?);
                } else {
                    break;
                }
            }
            self.expect(Tok::RParen)?;
        }
        if *self.peek() == Tok::Dot {
            return Err(self.unsupported("view on a pattern binding"));
        }
        Ok(Binding {
            alias,
            stream,
            predicates,
            select_all: false,
        })
    }

    fn predicate(&mut self) -> Result<Predicate, PatternError> {
        self.check_unsupported()?;
        let lhs = self.field_path()?;
        self.check_unsupported()?;
        let op = match self.peek() {
            Tok::Eq => CmpOp::Eq,
            Tok::Ne => CmpOp::Ne,
            Tok::Lt => CmpOp::Lt,
            Tok::Le => CmpOp::Le,
            Tok::Gt => CmpOp::Gt,
            Tok::Ge => CmpOp::Ge,
            _ => return Err(self.unexpected("a comparison operator")),
        };
        self.bump();
        let rhs = match self.peek().clone() {
            Tok::Int(i) => {
                self.bump();
                Operand::Literal(FieldValue::Integer(i))
            }
            Tok::Num(n) => {
                self.bump();
                Operand::Literal(FieldValue::Number(n))
            }
            Tok::Str(s) => {
                self.bump();
                Operand::Literal(FieldValue::String(s))
            }
            Tok::Ident(s) if s.eq_ignore_ascii_case("true") || s.eq_ignore_ascii_case("false") => {
                self.bump();
                Operand::Literal(FieldValue::Boolean(s.eq_ignore_ascii_case("true")))
            }
            Tok::Ident(s) if s.eq_ignore_ascii_case("null") => {
                return Err(self.unsupported("`null` literal"));
            }
            Tok::Ident(_) => Operand::Field(self.field_path()?),
            _ => return Err(self.unexpected("a literal or field path")),
        };
        if matches!(self.peek(), Tok::Other('+' | '-' | '/' | '%') | Tok::Star) {
            return Err(self.unsupported("arithmetic in predicates"));
        }
        Ok(Predicate { lhs, op, rhs })
    }

    fn window(&mut self) -> Result<Duration, PatternError> {
        self.expect(Tok::Dot)?;
        let ns = self.ident("a view namespace")?;
        self.expect(Tok::Colon)?;
        let view = self.ident("a view name")?;
        if !ns.eq_ignore_ascii_case("win") || !view.eq_ignore_ascii_case("time_batch") {
            return Err(self.unsupported(format!("view `{ns}:{view}`")));
        }
        self.expect(Tok::LParen)?;
        let magnitude = match self.peek() {
            Tok::Int(i) if *i > 0 => *i as u64,
            Tok::Int(_) => {
                return Err(self.error_here(PatternErrorKind::Semantic("window length must be positive".into())))
            }
            _ => return Err(self.unexpected("a whole number")),
        };
        self.bump();
        let unit_word = self.ident("a time unit")?;
        let unit = match unit_word.to_ascii_lowercase().as_str() {
            "second" | "seconds" | "sec" => TimeUnit::Seconds,
            "minute" | "minutes" | "min" => TimeUnit::Minutes,
            "hour" | "hours" => TimeUnit::Hours,
            "msec" | "millisecond" | "milliseconds" | "day" | "days" | "week" | "weeks" => {
                return Err(self.unsupported(format!("time unit `{unit_word}`")))
            }
            _ => return Err(self.error_here(PatternErrorKind::Syntax(format!("unknown time unit `{unit_word}`")))),
        };
        self.expect(Tok::RParen)?;
        Ok(Duration { magnitude, unit })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pattern::print_pattern;

    const FLOOR_COUNT: &str = r#"@Name("ExternalLightByFloor")
@Tag(name="domainName", value="Fog")
insert into ExternalLightByFloor
select current_timestamp() as timestamp,
  a1.floor as floor,
  count(a1.isOn) as count
from pattern [(every a1 = ExternalLight(a1.isOn = true))].win:time_batch(10
minutes)
group by a1.floor"#;

    #[test]
    fn parses_windowed_grouped_count() {
        let p = parse_pattern(FLOOR_COUNT).unwrap();
        assert_eq!(p.name, "ExternalLightByFloor");
        assert_eq!(p.domain_name(), Some("Fog"));
        assert_eq!(p.window_millis(), Some(600_000));
        assert_eq!(p.group_by, alloc::vec![FieldPath::new("a1", "floor")]);
        assert_eq!(
            p.bindings[0].predicates[0].rhs,
            Operand::Literal(FieldValue::Boolean(true))
        );
        assert!(p.has_count());
    }

    #[test]
    fn keywords_are_case_insensitive() {
        let text = "@TAG(NAME=\"domainName\", VALUE=\"x\") INSERT INTO Out SELECT a1.* FROM PATTERN [EVERY a1 = In]";
        let p = parse_pattern(text).unwrap();
        assert_eq!(p.name, "Out");
        assert!(p.bindings[0].select_all);
    }

    #[test]
    fn forward_reference_is_semantic_error() {
        let e = parse_pattern("insert into X select a1.* from pattern [(every a1 = Y(a1.id = a2.id))]").unwrap_err();
        assert!(e.is_semantic(), "{e}");
        assert!(format!("{e}").contains("a2"));
    }

    #[test]
    fn unsupported_constructs_are_named() {
        let base = "@Tag(name=\"domainName\", value=\"x\") insert into X select a1.* from pattern ";
        for (tail, word) in [
            ("[every a1 = Y or every a2 = Z]", "or"),
            ("[every a1 = Y -> every a2 = Z]", "->"),
            ("[every a1 = Y(not a1.x = 1)]", "not"),
            ("[every a1 = Y].win:length(5)", "win:length"),
            ("[every a1 = Y].win:time(5 minutes)", "win:time"),
            ("[every a1 = Y(a1.x = 1 or a1.x = 2)]", "or"),
            ("[every a1 = Y] where a1.x = 1", "where"),
        ] {
            let e = parse_pattern(&format!("{base}{tail}")).unwrap_err();
            assert!(e.is_unsupported(), "{tail}: {e}");
            assert!(format!("{e}").contains(word), "{tail}: {e}");
        }
        let e = parse_pattern(
            "@Tag(name=\"domainName\", value=\"x\") insert into X select sum(a1.v) as s from pattern [every a1 = Y].win:time_batch(1 hours)",
        )
        .unwrap_err();
        assert!(e.is_unsupported() && format!("{e}").contains("sum"), "{e}");
    }

    #[test]
    fn semantic_rules() {
        let tag = "@Tag(name=\"domainName\", value=\"x\") ";
        for text in [
            "insert into X select a1.g as g from pattern [every a1 = Y] group by a1.g",
            "insert into X select count(a1.g) as c from pattern [every a1 = Y]",
            "insert into X select a1.* from pattern [every (a1 = Y and a1 = Z)]",
            "insert into X select count(a1.g) as c, count(a1.h) as d from pattern [every a1 = Y].win:time_batch(1 hours)",
            "insert into X select a1.g as g, a1.h as g from pattern [every a1 = Y]",
            "insert into X select b.g as g from pattern [every a1 = Y]",
        ] {
            let e = parse_pattern(&format!("{tag}{text}")).unwrap_err();
            assert!(e.is_semantic(), "{text}: {e}");
        }
        let missing_tag = parse_pattern("insert into X select a1.* from pattern [every a1 = Y]");
        assert!(missing_tag.unwrap_err().is_semantic());
        let bad_target = parse_pattern(
            "@Tag(name=\"domainName\", value=\"x\") @Tag(name=\"target\", value=\"moon\") insert into X select a1.* from pattern [every a1 = Y]",
        );
        assert!(bad_target.unwrap_err().is_semantic());
    }

    #[test]
    fn errors_carry_positions() {
        let e = parse_pattern("@Tag(name=\"domainName\", value=\"x\")\ninsert into X\nselect a1.* frm").unwrap_err();
        assert_eq!((e.line, e.column), (3, 13));
    }

    #[test]
    fn unbalanced_brackets_are_rejected() {
        let broken = FLOOR_COUNT.replace("))]", "))]]");
        assert!(parse_pattern(&broken).is_err());
    }

    #[test]
    fn print_is_a_fixpoint() {
        let p = parse_pattern(FLOOR_COUNT).unwrap();
        let printed = print_pattern(&p);
        let again = parse_pattern(&printed).unwrap();
        assert_eq!(again, p);
        assert_eq!(print_pattern(&again), printed);
    }

    #[test]
    fn multiple_patterns_in_one_file() {
        let text = format!("{FLOOR_COUNT}\n\n{FLOOR_COUNT}\n");
        assert_eq!(parse_patterns(&text).unwrap().len(), 2);
        assert!(parse_patterns("  \n").is_err());
    }
}
