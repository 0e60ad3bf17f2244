use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use super::CepError;
use crate::event::{Event, EventSchema, FieldType, FieldValue, Fields, SchemaRegistry, Timestamp};
use crate::pattern::{CmpOp, FieldPath, Operand, PatternDef, SelectItem};

pub(crate) struct Filter {
    pub field: String,
    pub op: CmpOp,
    pub literal: FieldValue,
}

pub(crate) struct CompiledBinding {
    pub stream: crate::event::StreamName,
    pub filters: Vec<Filter>,
}

/// `lhs op rhs` between two slots of a conjunction.
pub(crate) struct Correlation {
    pub lhs: (usize, String),
    pub op: CmpOp,
    pub rhs: (usize, String),
}

pub(crate) enum Projection {
    Field(usize, String),
    Timestamp,
    Count,
    Star(usize, Vec<String>),
}

pub(crate) struct Compiled {
    pub bindings: Vec<CompiledBinding>,
    pub correlations: Vec<Correlation>,
    pub projections: Vec<Projection>,
    pub group_by: Vec<String>,
    pub count_field: Option<String>,
    pub window: Option<Timestamp>,
    pub output: EventSchema,
}

impl Compiled {
    /// Windowed single-binding patterns with a count or grouping emit one row
    /// per group; without either they re-emit every collected event.
    pub fn aggregated(&self) -> bool {
        self.count_field.is_some() || !self.group_by.is_empty()
    }

    pub fn passes(&self, slot: usize, e: &Event) -> bool {
        self.bindings[slot]
            .filters
            .iter()
            .all(|f| holds(e.field(&f.field), f.op, Some(&f.literal)))
    }

    pub fn project(&self, slots: &[&Event], at: Timestamp, count: i64) -> Fields {
        let mut out = Vec::with_capacity(self.output.fields.len());
        for p in &self.projections {
            match p {
                Projection::Field(slot, field) => {
                    out.push(slots[*slot].field(field).cloned().unwrap_or(FieldValue::Null))
                }
                Projection::Timestamp => out.push(FieldValue::Integer(at as i64)),
                Projection::Count => out.push(FieldValue::Integer(count)),
                Projection::Star(slot, fields) => {
                    for f in fields {
                        out.push(slots[*slot].field(f).cloned().unwrap_or(FieldValue::Null));
                    }
                }
            }
        }
        self.output.fields.iter().map(|(n, _)| n.clone()).zip(out).collect()
    }
}

/// Comparison where a missing value or a type mismatch never holds.
pub(crate) fn holds(a: Option<&FieldValue>, op: CmpOp, b: Option<&FieldValue>) -> bool {
    match (a, b) {
        (Some(a), Some(b)) => a.compare(b).map(|o| op.holds(o)).unwrap_or(false),
        _ => false,
    }
}

fn comparable(a: FieldType, b: FieldType) -> bool {
    use FieldType::*;
    a == b || matches!((a, b), (Number, Integer) | (Integer, Number))
}

fn literal_type(v: &FieldValue) -> Option<FieldType> {
    match v {
        FieldValue::Number(_) => Some(FieldType::Number),
        FieldValue::Integer(_) => Some(FieldType::Integer),
        FieldValue::String(_) => Some(FieldType::String),
        FieldValue::Boolean(_) => Some(FieldType::Boolean),
        FieldValue::Null => None,
    }
}

pub(crate) fn compile(def: &PatternDef, schemas: &SchemaRegistry) -> Result<Compiled, CepError> {
    let pattern = || def.name.clone();
    let mut bound: Vec<&EventSchema> = Vec::new();
    for b in &def.bindings {
        let s = schemas.get(&b.stream).ok_or_else(|| CepError::UnknownStream {
            pattern: pattern(),
            stream: b.stream.as_str().into(),
        })?;
        bound.push(s);
    }
    let slot_of = |alias: &str| def.bindings.iter().position(|b| b.alias == alias);
    let field_type = |path: &FieldPath| -> Result<(usize, FieldType), CepError> {
        let slot = slot_of(&path.alias).ok_or_else(|| {
            CepError::Pattern(crate::pattern::PatternError::new(
                crate::pattern::PatternErrorKind::Semantic(format!("undeclared alias in {path}")),
                0,
                0,
            ))
        })?;
        let ty = bound[slot]
            .field_type(&path.field)
            .ok_or_else(|| CepError::UnknownField {
                pattern: pattern(),
                stream: bound[slot].stream.as_str().into(),
                field: path.field.clone(),
            })?;
        Ok((slot, ty))
    };

    let mut bindings = Vec::new();
    let mut correlations = Vec::new();
    for (slot, b) in def.bindings.iter().enumerate() {
        let mut filters = Vec::new();
        for p in &b.predicates {
            let (_, lt) = field_type(&p.lhs)?;
            let mismatch = |right: &'static str| CepError::TypeMismatch {
                pattern: pattern(),
                predicate: format!("{} {} ...", p.lhs, p.op.symbol()),
                left: lt.name(),
                right,
            };
            match &p.rhs {
                Operand::Literal(v) => {
                    let rt = literal_type(v).ok_or_else(|| mismatch("null"))?;
                    if !comparable(lt, rt) {
                        return Err(mismatch(rt.name()));
                    }
                    filters.push(Filter {
                        field: p.lhs.field.clone(),
                        op: p.op,
                        literal: v.clone(),
                    });
                }
                Operand::Field(rhs) => {
                    let (rslot, rt) = field_type(rhs)?;
                    if !comparable(lt, rt) {
                        return Err(mismatch(rt.name()));
                    }
                    correlations.push(Correlation {
                        lhs: (slot, p.lhs.field.clone()),
                        op: p.op,
                        rhs: (rslot, rhs.field.clone()),
                    });
                }
            }
        }
        bindings.push(CompiledBinding {
            stream: b.stream.clone(),
            filters,
        });
    }

    let mut projections = Vec::new();
    let mut out_fields: Vec<(String, FieldType)> = Vec::new();
    let mut count_field = None;
    let mut push = |name: &str, ty: FieldType| -> Result<(), CepError> {
        if out_fields.iter().any(|(n, _)| n == name) {
            return Err(CepError::DuplicateOutput {
                pattern: pattern(),
                field: name.into(),
            });
        }
        out_fields.push((name.into(), ty));
        Ok(())
    };
    for item in &def.select {
        match item {
            SelectItem::FieldRef { path, name } => {
                let (slot, ty) = field_type(path)?;
                push(name, ty)?;
                projections.push(Projection::Field(slot, path.field.clone()));
            }
            SelectItem::CurrentTimestamp { name } => {
                push(name, FieldType::Integer)?;
                projections.push(Projection::Timestamp);
            }
            SelectItem::Count { path, name } => {
                field_type(path)?;
                push(name, FieldType::Integer)?;
                count_field = Some(path.field.clone());
                projections.push(Projection::Count);
            }
            SelectItem::StarOf(alias) => {
                let slot = slot_of(alias).unwrap_or(0);
                let mut names = Vec::new();
                for (n, ty) in &bound[slot].fields {
                    push(n, *ty)?;
                    names.push(n.clone());
                }
                projections.push(Projection::Star(slot, names));
            }
        }
    }
    let mut group_by = Vec::new();
    for g in &def.group_by {
        field_type(g)?;
        group_by.push(g.field.clone());
    }
    let output = EventSchema::new(def.insert_into.clone(), out_fields).map_err(|e| CepError::DuplicateOutput {
        pattern: pattern(),
        field: e.to_string(),
    })?;
    Ok(Compiled {
        bindings,
        correlations,
        projections,
        group_by,
        count_field,
        window: def.window_millis(),
        output,
    })
}
