use std::collections::BTreeMap;

use atmosphere_core::event::{FieldValue, StreamName};
use atmosphere_core::pattern::{
    parse_pattern, parse_patterns, print_pattern, Binding, CmpOp, Duration, FieldPath, Operand, PatternDef, Predicate,
    SelectItem, TimeUnit,
};
use proptest::prelude::*;

const HOSPITAL: &str = include_str!("../patterns/hospital.epl");

fn literal_of(p: &Predicate) -> &FieldValue {
    match &p.rhs {
        Operand::Literal(v) => v,
        Operand::Field(f) => panic!("expected literal, got {f}"),
    }
}

#[test]
fn all_nine_hospital_patterns_parse() {
    let defs = parse_patterns(HOSPITAL).unwrap();
    let names: Vec<&str> = defs.iter().map(|d| d.name.as_str()).collect();
    assert_eq!(
        names,
        [
            "ExternalLightByFloor",
            "SurveillanceUnit",
            "DemandByLaboratory",
            "VeryHighDemandByLaboratory",
            "StockByPharmacy",
            "StockShortageByPharmacy",
            "UseByHospital",
            "RespiratoryUseByHospital",
            "MedicineStockBreak",
        ]
    );
    for d in &defs {
        assert_eq!(d.domain_name(), Some("Fog"));
        assert_eq!(d.insert_into.as_str(), d.name);
    }
}

#[test]
fn hospital_thresholds_and_windows() {
    let defs = parse_patterns(HOSPITAL).unwrap();
    let by_name: BTreeMap<&str, &PatternDef> = defs.iter().map(|d| (d.name.as_str(), d)).collect();
    let threshold = |name: &str| {
        let p = &by_name[name].bindings[0].predicates[0];
        (p.op, literal_of(p).clone())
    };
    assert_eq!(threshold("SurveillanceUnit"), (CmpOp::Ge, FieldValue::Integer(4)));
    assert_eq!(
        threshold("VeryHighDemandByLaboratory"),
        (CmpOp::Gt, FieldValue::Integer(1000))
    );
    assert_eq!(
        threshold("StockShortageByPharmacy"),
        (CmpOp::Le, FieldValue::Integer(5))
    );
    assert_eq!(
        threshold("RespiratoryUseByHospital"),
        (CmpOp::Ge, FieldValue::Integer(1))
    );

    let hour = Some(3_600_000);
    assert_eq!(by_name["ExternalLightByFloor"].window_millis(), Some(600_000));
    assert_eq!(by_name["DemandByLaboratory"].window_millis(), hour);
    assert_eq!(by_name["StockByPharmacy"].window_millis(), hour);
    assert_eq!(by_name["UseByHospital"].window_millis(), hour);
    assert_eq!(by_name["MedicineStockBreak"].window_millis(), Some(86_400_000));
    assert_eq!(by_name["SurveillanceUnit"].window, None);
}

#[test]
fn surveillance_unit_shape() {
    let defs = parse_patterns(HOSPITAL).unwrap();
    let su = &defs[1];
    assert_eq!(su.bindings.len(), 1);
    assert_eq!(su.bindings[0].alias, "a1");
    assert_eq!(su.bindings[0].stream.as_str(), "ExternalLightByFloor");
    assert_eq!(
        su.select,
        vec![
            SelectItem::FieldRef {
                path: FieldPath::new("a1", "timestamp"),
                name: "timestamp".into()
            },
            SelectItem::FieldRef {
                path: FieldPath::new("a1", "floor"),
                name: "floor".into()
            },
        ]
    );
}

#[test]
fn medicine_stock_break_correlations() {
    let defs = parse_patterns(HOSPITAL).unwrap();
    let msb = &defs[8];
    assert_eq!(msb.bindings.len(), 3);
    assert!(msb.bindings[0].predicates.is_empty());
    assert_eq!(
        msb.bindings[1].predicates,
        vec![Predicate {
            lhs: FieldPath::new("a2", "id"),
            op: CmpOp::Eq,
            rhs: Operand::Field(FieldPath::new("a1", "id")),
        }]
    );
    assert_eq!(
        msb.bindings[2].predicates[0].rhs,
        Operand::Field(FieldPath::new("a2", "id"))
    );
}

#[test]
fn hospital_use_filter_has_two_predicates() {
    let defs = parse_patterns(HOSPITAL).unwrap();
    let preds = &defs[6].bindings[0].predicates;
    assert_eq!(literal_of(&preds[0]), &FieldValue::String("hospital".into()));
    assert_eq!(literal_of(&preds[1]), &FieldValue::String("respiratory".into()));
}

#[test]
fn hospital_patterns_are_print_parse_fixpoints() {
    for d in parse_patterns(HOSPITAL).unwrap() {
        let text = print_pattern(&d);
        assert_eq!(parse_pattern(&text).unwrap(), d, "{text}");
    }
}

#[test]
fn minimal_pattern_round_trips() {
    let text = "@Tag(name=\"domainName\", value=\"d\")\ninsert into Out select a1.* from pattern [every a1 = In]";
    let p = parse_pattern(text).unwrap();
    assert_eq!(parse_pattern(&print_pattern(&p)).unwrap(), p);
}

fn ident() -> impl Strategy<Value = String> {
    prop_oneof![
        "[a-zA-Z][a-zA-Z0-9_]{0,6}",
        Just("count".to_string()),
        Just("every".to_string()),
        Just("select".to_string()),
        Just("or".to_string()),
        Just("timestamp".to_string()),
    ]
}

fn literal() -> impl Strategy<Value = FieldValue> {
    prop_oneof![
        any::<i64>().prop_map(FieldValue::Integer),
        any::<f64>()
            .prop_filter("finite", |f| f.is_finite())
            .prop_map(FieldValue::Number),
        "\\PC{0,8}".prop_map(FieldValue::String),
        any::<bool>().prop_map(FieldValue::Boolean),
    ]
}

fn op() -> impl Strategy<Value = CmpOp> {
    prop::sample::select(CmpOp::ALL.to_vec())
}

fn duration() -> impl Strategy<Value = Duration> {
    (
        1u64..100_000,
        prop::sample::select(vec![TimeUnit::Seconds, TimeUnit::Minutes, TimeUnit::Hours]),
    )
        .prop_map(|(m, u)| Duration::new(m, u))
}

fn stream() -> impl Strategy<Value = StreamName> {
    "[A-Z][a-zA-Z0-9]{0,8}".prop_map(|s| StreamName::new(s).unwrap())
}

prop_compose! {
    fn predicate(alias: String, earlier: usize)(
        field in ident(),
        op in op(),
        lit in literal(),
        use_field in any::<bool>(),
        other in 0..earlier.max(1),
        other_field in ident(),
    ) -> Predicate {
        let rhs = if use_field && earlier > 0 {
            Operand::Field(FieldPath::new(format!("a{}", other + 1), other_field))
        } else {
            Operand::Literal(lit)
        };
        Predicate { lhs: FieldPath::new(alias.clone(), field), op, rhs }
    }
}

fn binding(index: usize) -> impl Strategy<Value = Binding> {
    let alias = format!("a{}", index + 1);
    (stream(), prop::collection::vec(predicate(alias.clone(), index), 0..3)).prop_map(move |(stream, predicates)| {
        Binding {
            alias: alias.clone(),
            stream,
            predicates,
            select_all: false,
        }
    })
}

fn pattern_def() -> impl Strategy<Value = PatternDef> {
    (1usize..=3)
        .prop_flat_map(|n| {
            let bindings: Vec<_> = (0..n).map(binding).collect();
            (
                bindings,
                "\\PC{1,12}",
                stream(),
                prop::option::of("edge|fog|cloud|user"),
                "\\PC{0,8}",
                prop::option::of(duration()),
                prop::collection::vec((0..n, ident(), 0u8..4), 1..5),
                prop::collection::vec(ident(), 0..3),
                any::<bool>(),
            )
        })
        .prop_map(
            |(mut bindings, name, insert_into, target, domain, window, items, groups, count)| {
                let n = bindings.len();
                let single = n == 1;
                let mut select = Vec::new();
                for (k, (b, field, kind)) in items.into_iter().enumerate() {
                    let alias = format!("a{}", b + 1);
                    let out = format!("o{k}");
                    select.push(match kind {
                        0 => SelectItem::CurrentTimestamp { name: out },
                        1 if !select.contains(&SelectItem::StarOf(alias.clone())) => SelectItem::StarOf(alias),
                        _ => SelectItem::FieldRef {
                            path: FieldPath::new(alias, field),
                            name: out,
                        },
                    });
                }
                let window = if single { window } else { window.filter(|_| count) };
                let mut group_by = Vec::new();
                if single && window.is_some() {
                    group_by = groups.into_iter().map(|g| FieldPath::new("a1", g)).collect();
                    if count {
                        select.push(SelectItem::Count {
                            path: FieldPath::new("a1", "v"),
                            name: "cnt".into(),
                        });
                    }
                }
                for b in &mut bindings {
                    b.select_all = select.contains(&SelectItem::StarOf(b.alias.clone()));
                }
                let mut tags = BTreeMap::new();
                tags.insert("domainName".to_string(), domain);
                if let Some(t) = target {
                    tags.insert("target".to_string(), t);
                }
                PatternDef {
                    name,
                    tags,
                    insert_into,
                    select,
                    bindings,
                    window,
                    group_by,
                }
            },
        )
        .prop_filter("valid", |p| p.validate().is_ok())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(512))]

    #[test]
    fn print_then_parse_is_identity(p in pattern_def()) {
        let text = print_pattern(&p);
        let back = parse_pattern(&text).map_err(|e| TestCaseError::fail(format!("{e}\n{text}")))?;
        prop_assert_eq!(back, p);
    }

    #[test]
    fn parser_never_panics(s in "\\PC{0,80}") {
        let _ = parse_pattern(&s);
    }
}
