use atmosphere_core::event::{
    decode_event, decode_event_untyped, encode_event, encode_event_untyped, Event, EventSchema, FieldType, FieldValue,
    Fields, NodeId, SchemaRegistry, StreamName, MAX_SAFE_INTEGER,
};
use proptest::prelude::*;

fn field_type() -> impl Strategy<Value = FieldType> {
    prop_oneof![
        Just(FieldType::Number),
        Just(FieldType::Integer),
        Just(FieldType::String),
        Just(FieldType::Boolean),
    ]
}

fn value_of(ty: FieldType) -> BoxedStrategy<FieldValue> {
    let v = match ty {
        FieldType::Number => (-1e12f64..1e12).prop_map(FieldValue::Number).boxed(),
        FieldType::Integer => (-MAX_SAFE_INTEGER..=MAX_SAFE_INTEGER)
            .prop_map(FieldValue::Integer)
            .boxed(),
        FieldType::String => "\\PC{0,12}".prop_map(FieldValue::String).boxed(),
        FieldType::Boolean => any::<bool>().prop_map(FieldValue::Boolean).boxed(),
    };
    prop_oneof![9 => v, 1 => Just(FieldValue::Null)].boxed()
}

fn schema_and_event() -> impl Strategy<Value = (EventSchema, Event)> {
    let names = prop::collection::btree_set("[a-z][a-zA-Z0-9]{0,6}", 0..6);
    (
        "[A-Z][a-zA-Z0-9]{0,10}",
        names.prop_flat_map(|n| {
            let n: Vec<String> = n.into_iter().collect();
            let len = n.len();
            (Just(n), prop::collection::vec(field_type(), len))
        }),
        0u64..(1 << 50),
        "[a-z][a-z0-9]{0,5}",
    )
        .prop_flat_map(|(stream, (names, types), ts, src)| {
            let values: Vec<_> = types.iter().map(|t| value_of(*t)).collect();
            (Just((stream, names, types, ts, src)), values)
        })
        .prop_map(|((stream, names, types, ts, src), values)| {
            let stream = StreamName::new(stream).unwrap();
            let schema = EventSchema::new(
                stream.clone(),
                names.iter().cloned().zip(types.iter().copied()).collect(),
            )
            .unwrap();
            let fields: Fields = names.into_iter().zip(values).collect();
            (schema, Event::new(stream, fields, ts, NodeId::new(src)))
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn typed_round_trip((schema, event) in schema_and_event()) {
        let reg: SchemaRegistry = [schema].into_iter().collect();
        let bytes = encode_event(&event, &reg).unwrap();
        prop_assert_eq!(decode_event(&bytes, &reg).unwrap(), event);
    }

    #[test]
    fn untyped_round_trip_keeps_values((_schema, event) in schema_and_event()) {
        let back = decode_event_untyped(&encode_event_untyped(&event)).unwrap();
        prop_assert_eq!(&back.stream, &event.stream);
        prop_assert_eq!(back.timestamp, event.timestamp);
        prop_assert_eq!(&back.source, &event.source);
        prop_assert_eq!(back.fields.len(), event.fields.len());
        for (name, v) in event.fields.iter() {
            let got = back.field(name).unwrap();
            match (v, got) {
                // Whole-valued numbers may come back as integers.
                (FieldValue::Number(a), FieldValue::Integer(b)) => prop_assert_eq!(*a, *b as f64),
                _ => prop_assert_eq!(v, got),
            }
        }
    }

    #[test]
    fn decoder_never_panics(s in "\\PC{0,120}") {
        let reg = SchemaRegistry::new();
        let _ = decode_event(s.as_bytes(), &reg);
        let _ = decode_event_untyped(s.as_bytes());
    }
}
