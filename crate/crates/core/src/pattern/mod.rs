//! The pattern definition language: AST, validation, parsing and canonical
//! printing.

mod lexer;
mod parser;

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::cmp::Ordering;
use core::fmt;

use thiserror::Error;

use crate::event::{is_identifier, FieldValue, NodeRole, StreamName};

pub use parser::{parse_pattern, parse_patterns};

pub const DOMAIN_TAG: &str = "domainName";
pub const TARGET_TAG: &str = "target";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PatternErrorKind {
    #[error("syntax error: {0}")]
    Syntax(String),
    #[error("unsupported feature: {0}")]
    Unsupported(String),
    #[error("invalid pattern: {0}")]
    Semantic(String),
}

/// Line and column are 1-based; 0 means the error has no source position.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatternError {
    pub kind: PatternErrorKind,
    pub line: u32,
    pub column: u32,
}

impl PatternError {
    pub fn new(kind: PatternErrorKind, line: u32, column: u32) -> Self {
        PatternError { kind, line, column }
    }

    fn semantic(msg: String) -> Self {
        PatternError::new(PatternErrorKind::Semantic(msg), 0, 0)
    }

    pub fn is_unsupported(&self) -> bool {
        matches!(self.kind, PatternErrorKind::Unsupported(_))
    }

    pub fn is_semantic(&self) -> bool {
        matches!(self.kind, PatternErrorKind::Semantic(_))
    }
}

impl core::error::Error for PatternError {}

impl fmt::Display for PatternError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.line == 0 {
            write!(f, "{}", self.kind)
        } else {
            write!(f, "line {}, column {}: {}", self.line, self.column, self.kind)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct FieldPath {
    pub alias: String,
    pub field: String,
}

impl FieldPath {
    pub fn new(alias: impl Into<String>, field: impl Into<String>) -> Self {
        FieldPath {
            alias: alias.into(),
            field: field.into(),
        }
    }
}

impl fmt::Display for FieldPath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{}", self.alias, self.field)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CmpOp {
    Eq,
    Ne,
    Lt,
    Le,
    Gt,
    Ge,
}

impl CmpOp {
    pub const ALL: [CmpOp; 6] = [CmpOp::Eq, CmpOp::Ne, CmpOp::Lt, CmpOp::Le, CmpOp::Gt, CmpOp::Ge];

    pub fn symbol(self) -> &'static str {
        match self {
            CmpOp::Eq => "=",
            CmpOp::Ne => "!=",
            CmpOp::Lt => "<",
            CmpOp::Le => "<=",
            CmpOp::Gt => ">",
            CmpOp::Ge => ">=",
        }
    }

    pub fn holds(self, ord: Ordering) -> bool {
        match self {
            CmpOp::Eq => ord == Ordering::Equal,
            CmpOp::Ne => ord != Ordering::Equal,
            CmpOp::Lt => ord == Ordering::Less,
            CmpOp::Le => ord != Ordering::Greater,
            CmpOp::Gt => ord == Ordering::Greater,
            CmpOp::Ge => ord != Ordering::Less,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Operand {
    Literal(FieldValue),
    Field(FieldPath),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Predicate {
    pub lhs: FieldPath,
    pub op: CmpOp,
    pub rhs: Operand,
}

impl Predicate {
    pub fn is_correlation(&self) -> bool {
        matches!(self.rhs, Operand::Field(_))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Binding {
    pub alias: String,
    pub stream: StreamName,
    pub predicates: Vec<Predicate>,
    pub select_all: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SelectItem {
    FieldRef { path: FieldPath, name: String },
    CurrentTimestamp { name: String },
    Count { path: FieldPath, name: String },
    StarOf(String),
}

impl SelectItem {
    /// Output name; `None` for `alias.*`, whose names come from the schema.
    pub fn output_name(&self) -> Option<&str> {
        match self {
            SelectItem::FieldRef { name, .. }
            | SelectItem::CurrentTimestamp { name }
            | SelectItem::Count { name, .. } => Some(name),
            SelectItem::StarOf(_) => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TimeUnit {
    Seconds,
    Minutes,
    Hours,
}

impl TimeUnit {
    pub fn millis(self) -> u64 {
        match self {
            TimeUnit::Seconds => 1_000,
            TimeUnit::Minutes => 60_000,
            TimeUnit::Hours => 3_600_000,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            TimeUnit::Seconds => "seconds",
            TimeUnit::Minutes => "minutes",
            TimeUnit::Hours => "hours",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Duration {
    pub magnitude: u64,
    pub unit: TimeUnit,
}

impl Duration {
    pub fn new(magnitude: u64, unit: TimeUnit) -> Self {
        Duration { magnitude, unit }
    }

    /// `None` on overflow.
    pub fn to_millis(self) -> Option<u64> {
        self.magnitude.checked_mul(self.unit.millis())
    }
}

impl fmt::Display for Duration {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {}", self.magnitude, self.unit.name())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatternDef {
    pub name: String,
    pub tags: BTreeMap<String, String>,
    pub insert_into: StreamName,
    pub select: Vec<SelectItem>,
    pub bindings: Vec<Binding>,
    pub window: Option<Duration>,
    pub group_by: Vec<FieldPath>,
}

impl PatternDef {
    pub fn domain_name(&self) -> Option<&str> {
        self.tags.get(DOMAIN_TAG).map(String::as_str)
    }

    /// The audience declared with the `target` tag.
    pub fn target(&self) -> Option<NodeRole> {
        self.tags.get(TARGET_TAG).and_then(|t| parse_role(t))
    }

    pub fn window_millis(&self) -> Option<u64> {
        self.window.and_then(Duration::to_millis)
    }

    pub fn is_conjunction(&self) -> bool {
        self.bindings.len() > 1
    }

    pub fn binding(&self, alias: &str) -> Option<&Binding> {
        self.bindings.iter().find(|b| b.alias == alias)
    }

    pub fn has_count(&self) -> bool {
        self.select.iter().any(|s| matches!(s, SelectItem::Count { .. }))
    }

    /// Streams consumed by this pattern, in binding order without repeats.
    pub fn input_streams(&self) -> Vec<&StreamName> {
        let mut out: Vec<&StreamName> = Vec::new();
        for b in &self.bindings {
            if !out.contains(&&b.stream) {
                out.push(&b.stream);
            }
        }
        out
    }

    /// Checks every structural rule that does not need stream schemas.
    pub fn validate(&self) -> Result<(), PatternError> {
        let err = |m: String| Err(PatternError::semantic(m));
        if self.bindings.is_empty() {
            return err("a pattern needs at least one binding".into());
        }
        if self.select.is_empty() {
            return err("empty select list".into());
        }
        let mut declared: BTreeSet<&str> = BTreeSet::new();
        for b in &self.bindings {
            if !is_identifier(&b.alias) {
                return err(format!("invalid alias {:?}", b.alias));
            }
            for p in &b.predicates {
                if p.lhs.alias != b.alias {
                    return err(format!(
                        "predicate {} in binding {} must test its own alias",
                        p.lhs, b.alias
                    ));
                }
                check_field(&p.lhs)?;
                match &p.rhs {
                    Operand::Field(rhs) => {
                        check_field(rhs)?;
                        if !declared.contains(rhs.alias.as_str()) {
                            return err(format!("{rhs} refers to {}, which is not declared earlier", rhs.alias));
                        }
                    }
                    Operand::Literal(v) => {
                        if v.is_null() || matches!(v, FieldValue::Number(n) if !n.is_finite()) {
                            return err(format!("literal in {} is not allowed", p.lhs));
                        }
                    }
                }
            }
            if !declared.insert(&b.alias) {
                return err(format!("duplicate alias {}", b.alias));
            }
        }
        let resolve = |path: &FieldPath| -> Result<(), PatternError> {
            check_field(path)?;
            if declared.contains(path.alias.as_str()) {
                Ok(())
            } else {
                Err(PatternError::semantic(format!("undeclared alias in {path}")))
            }
        };
        let mut names: BTreeSet<&str> = BTreeSet::new();
        let mut counts = 0;
        for item in &self.select {
            match item {
                SelectItem::FieldRef { path, .. } => resolve(path)?,
                SelectItem::Count { path, .. } => {
                    resolve(path)?;
                    counts += 1;
                }
                SelectItem::CurrentTimestamp { .. } => {}
                SelectItem::StarOf(alias) => {
                    if !declared.contains(alias.as_str()) {
                        return err(format!("undeclared alias in {alias}.*"));
                    }
                }
            }
            if let Some(name) = item.output_name() {
                if !is_identifier(name) || name.starts_with('_') {
                    return err(format!("invalid output name {name:?}"));
                }
                if !names.insert(name) {
                    return err(format!("duplicate output name {name}"));
                }
            }
        }
        for b in &self.bindings {
            let starred = self
                .select
                .iter()
                .any(|s| matches!(s, SelectItem::StarOf(a) if *a == b.alias));
            if starred != b.select_all {
                return err(format!("select_all flag of {} disagrees with the select list", b.alias));
            }
        }
        for path in &self.group_by {
            resolve(path)?;
        }
        if counts > 1 {
            return err("at most one count() per pattern".into());
        }
        if let Some(w) = self.window {
            if w.magnitude == 0 {
                return err("window length must be positive".into());
            }
            if w.to_millis().is_none() {
                return err("window length overflows".into());
            }
        }
        if !self.group_by.is_empty() && self.window.is_none() {
            return err("group by requires a time_batch window".into());
        }
        if counts > 0 && self.window.is_none() {
            return err("count() requires a time_batch window".into());
        }
        if self.is_conjunction() && (counts > 0 || !self.group_by.is_empty()) {
            return err("count() and group by apply to single-binding patterns only".into());
        }
        if self.name.is_empty() {
            return err("empty pattern name".into());
        }
        if !self.tags.contains_key(DOMAIN_TAG) {
            return err("missing @Tag domainName".into());
        }
        if let Some(t) = self.tags.get(TARGET_TAG) {
            if parse_role(t).is_none() {
                return err(format!("target must be edge, fog, cloud or user, not {t:?}"));
            }
        }
        Ok(())
    }
}

fn check_field(path: &FieldPath) -> Result<(), PatternError> {
    if is_identifier(&path.field) && !path.field.starts_with('_') {
        Ok(())
    } else {
        Err(PatternError::semantic(format!("invalid field name in {path}")))
    }
}

fn parse_role(s: &str) -> Option<NodeRole> {
    match s {
        "edge" => Some(NodeRole::Edge),
        "fog" => Some(NodeRole::Fog),
        "cloud" => Some(NodeRole::Cloud),
        "user" => Some(NodeRole::User),
        _ => None,
    }
}

fn write_quoted(f: &mut fmt::Formatter<'_>, s: &str, quote: char) -> fmt::Result {
    use fmt::Write;
    f.write_char(quote)?;
    for c in s.chars() {
        if c == quote || c == '\\' {
            f.write_char('\\')?;
        }
        f.write_char(c)?;
    }
    f.write_char(quote)
}

fn write_literal(f: &mut fmt::Formatter<'_>, v: &FieldValue) -> fmt::Result {
    match v {
        FieldValue::Integer(i) => write!(f, "{i}"),
        // Debug keeps a fractional part or exponent so the value re-lexes as a number.
        FieldValue::Number(n) => write!(f, "{n:?}"),
        FieldValue::Boolean(b) => write!(f, "{b}"),
        FieldValue::String(s) => write_quoted(f, s, '\''),
        FieldValue::Null => f.write_str("null"),
    }
}

impl fmt::Display for Binding {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} = {}", self.alias, self.stream.as_str())?;
        if self.predicates.is_empty() {
            return Ok(());
        }
        f.write_str("(")?;
        for (i, p) in self.predicates.iter().enumerate() {
            if i > 0 {
                f.write_str(" and ")?;
            }
            write!(f, "{} {} ", p.lhs, p.op.symbol())?;
            match &p.rhs {
                Operand::Literal(v) => write_literal(f, v)?,
                Operand::Field(path) => write!(f, "{path}")?,
            }
        }
        f.write_str(")")
    }
}

impl fmt::Display for SelectItem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SelectItem::FieldRef { path, name } => write!(f, "{path} as {name}"),
            SelectItem::CurrentTimestamp { name } => write!(f, "current_timestamp() as {name}"),
            SelectItem::Count { path, name } => write!(f, "count({path}) as {name}"),
            SelectItem::StarOf(alias) => write!(f, "{alias}.*"),
        }
    }
}

/// Canonical text; `parse_pattern` of the output yields the same definition.
impl fmt::Display for PatternDef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("@Name(")?;
        write_quoted(f, &self.name, '"')?;
        f.write_str(")\n")?;
        for (k, v) in &self.tags {
            f.write_str("@Tag(name=")?;
            write_quoted(f, k, '"')?;
            f.write_str(", value=")?;
            write_quoted(f, v, '"')?;
            f.write_str(")\n")?;
        }
        writeln!(f, "insert into {}", self.insert_into.as_str())?;
        f.write_str("select ")?;
        for (i, s) in self.select.iter().enumerate() {
            if i > 0 {
                f.write_str(",\n  ")?;
            }
            write!(f, "{s}")?;
        }
        f.write_str("\nfrom pattern [every ")?;
        if self.is_conjunction() {
            f.write_str("(")?;
            for (i, b) in self.bindings.iter().enumerate() {
                if i > 0 {
                    f.write_str(" and ")?;
                }
                write!(f, "{b}")?;
            }
            f.write_str(")")?;
        } else if let Some(b) = self.bindings.first() {
            write!(f, "{b}")?;
        }
        f.write_str("]")?;
        if let Some(w) = self.window {
            write!(f, ".win:time_batch({w})")?;
        }
        if !self.group_by.is_empty() {
            f.write_str("\ngroup by ")?;
            for (i, p) in self.group_by.iter().enumerate() {
                if i > 0 {
                    f.write_str(", ")?;
                }
                write!(f, "{p}")?;
            }
        }
        f.write_str("\n")
    }
}

pub fn print_pattern(p: &PatternDef) -> String {
    format!("{p}")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn durations_convert_exactly() {
        assert_eq!(Duration::new(10, TimeUnit::Minutes).to_millis(), Some(600_000));
        assert_eq!(Duration::new(24, TimeUnit::Hours).to_millis(), Some(86_400_000));
        assert_eq!(Duration::new(u64::MAX, TimeUnit::Hours).to_millis(), None);
    }

    #[test]
    fn comparison_operators() {
        use Ordering::*;
        let table = [
            (CmpOp::Eq, [false, true, false]),
            (CmpOp::Ne, [true, false, true]),
            (CmpOp::Lt, [true, false, false]),
            (CmpOp::Le, [true, true, false]),
            (CmpOp::Gt, [false, false, true]),
            (CmpOp::Ge, [false, true, true]),
        ];
        for (op, expect) in table {
            assert_eq!([op.holds(Less), op.holds(Equal), op.holds(Greater)], expect, "{op:?}");
        }
    }
}
