use atmosphere_core::agent::{
    AclMessage, Agent, AgentError, AgentHost, AgentSpec, Effect, GatewayRegistry, Performative, Receivers, Stimulus,
    RULE_UPDATE,
};
use atmosphere_core::event::{Event, FieldValue, Fields, NodeId, StreamName};
use proptest::prelude::*;
use serde_json::json;

fn light_agent() -> AgentSpec {
    serde_json::from_value(json!({
        "id": "e1.light",
        "attributes": {"floor": 3},
        "actuators": {"external_light": false},
        "rules": [{
            "id": "low_oxygen",
            "trigger": {"message": "O2Level"},
            "guard": "value <= 90",
            "actions": [
                {"actuate": {"actuator": "external_light", "value": true}},
                {"publish_fog": {"topic": "f1/in", "stream": "ExternalLight",
                                 "fields": {"isOn": true, "floor": "$attr.floor"}}}
            ]
        }]
    }))
    .unwrap()
}

fn o2_agent() -> AgentSpec {
    serde_json::from_value(json!({
        "id": "e1.o2",
        "sensors": ["o2"],
        "rules": [{
            "id": "share",
            "trigger": {"sensor": "o2"},
            "actions": [{"broadcast": {"stream": "O2Level", "fields": {"value": "$value"}}}]
        }]
    }))
    .unwrap()
}

fn o2_message(value: FieldValue) -> AclMessage {
    AclMessage {
        performative: Performative::Inform,
        sender: "e1.o2".into(),
        receivers: Receivers::Broadcast,
        content: Event::new(
            StreamName::new("O2Level").unwrap(),
            [("value", value)].into_iter().collect(),
            0,
            NodeId::new("e1"),
        ),
        sent_at: 0,
    }
}

fn agent(spec: AgentSpec) -> Agent {
    Agent::new(spec, NodeId::new("e1")).unwrap()
}

#[test]
fn low_oxygen_turns_on_the_light_and_notifies_the_fog() {
    let mut a = agent(light_agent());
    let effects = a.step(&Stimulus::Message(o2_message(85.into())), 500);
    assert_eq!(effects.len(), 2);
    assert_eq!(
        effects[0],
        Effect::Actuation {
            actuator: "external_light".into(),
            value: true.into()
        }
    );
    let Effect::FogPublish { topic, event } = &effects[1] else {
        panic!("expected a fog publish, got {:?}", effects[1]);
    };
    assert_eq!(topic, "f1/in");
    assert_eq!(event.stream.as_str(), "ExternalLight");
    assert_eq!(event.field("isOn"), Some(&true.into()));
    assert_eq!(event.field("floor"), Some(&3.into()));
    assert_eq!(event.timestamp, 500);
    assert_eq!(event.source.as_str(), "e1");
    assert_eq!(a.actuators()["external_light"], true.into());
}

#[test]
fn guard_boundary() {
    let mut a = agent(light_agent());
    assert!(a.step(&Stimulus::Message(o2_message(95.into())), 0).is_empty());
    assert!(a.step(&Stimulus::Message(o2_message(90.5.into())), 0).is_empty());
    assert_eq!(a.step(&Stimulus::Message(o2_message(90.into())), 0).len(), 2);
    assert_eq!(a.actuators()["external_light"], true.into());
}

#[test]
fn sensor_sample_becomes_one_broadcast() {
    let mut a = agent(o2_agent());
    let effects = a.step(
        &Stimulus::Sensor {
            name: "o2".into(),
            value: 92.into(),
        },
        10,
    );
    assert_eq!(effects.len(), 1);
    let Effect::Send(m) = &effects[0] else { panic!() };
    assert_eq!(m.receivers, Receivers::Broadcast);
    assert_eq!(m.sender, "e1.o2");
    assert_eq!(m.content.field("value"), Some(&92.into()));
    assert!(a
        .step(
            &Stimulus::Sensor {
                name: "co2".into(),
                value: 1.into()
            },
            10
        )
        .is_empty());
}

#[test]
fn rules_fire_in_declaration_order() {
    let spec: AgentSpec = serde_json::from_value(json!({
        "id": "a",
        "sensors": ["s"],
        "state": {"n": 0},
        "rules": [
            {"id": "first", "trigger": {"sensor": "s"},
             "actions": [{"set_state": {"var": "n", "expr": "state.n + value"}},
                         {"log": {"template": "n is $state.n, cost $$5"}}]},
            {"id": "second", "trigger": {"sensor": "s"}, "guard": "state.n > 1",
             "actions": [{"log": {"template": "big"}}]}
        ]
    }))
    .unwrap();
    let mut a = agent(spec);
    let s = Stimulus::Sensor {
        name: "s".into(),
        value: 2.into(),
    };
    assert_eq!(
        a.step(&s, 0),
        vec![
            Effect::StateChange {
                var: "n".into(),
                value: 2.into()
            },
            Effect::Log("n is 2, cost $5".into()),
            Effect::Log("big".into()),
        ]
    );
}

#[test]
fn guard_type_error_skips_only_that_rule() {
    let mut spec = light_agent();
    let mut second = spec.rules[0].clone();
    second.id = "always".into();
    second.guard = None;
    second.actions.truncate(1);
    spec.rules.push(second);
    let mut a = agent(spec);
    let effects = a.step(&Stimulus::Message(o2_message("high".into())), 0);
    assert_eq!(effects.len(), 2);
    assert!(matches!(&effects[0], Effect::RuleError { rule, .. } if rule == "low_oxygen"));
    assert!(matches!(&effects[1], Effect::Actuation { .. }));
}

#[test]
fn specs_are_validated() {
    let bad = |patch: serde_json::Value| -> AgentError {
        let mut v = serde_json::to_value(light_agent()).unwrap();
        let rule = &mut v["rules"][0];
        for (k, x) in patch.as_object().unwrap() {
            rule[k] = x.clone();
        }
        let spec: AgentSpec = serde_json::from_value(v).unwrap();
        spec.validate().unwrap_err()
    };
    assert!(matches!(
        bad(json!({"trigger": {"sensor": "nope"}})),
        AgentError::UnknownSensor { .. }
    ));
    assert!(matches!(
        bad(json!({"actions": [{"actuate": {"actuator": "siren", "value": true}}]})),
        AgentError::UnknownActuator { .. }
    ));
    assert!(matches!(bad(json!({"actions": []})), AgentError::NoActions(_)));
    assert!(matches!(bad(json!({"guard": "value <="})), AgentError::Guard { .. }));
    assert!(matches!(
        bad(json!({"guard": "attr.room = 1"})),
        AgentError::Invalid { .. }
    ));
    assert!(matches!(
        bad(json!({"guard": "state.x = 1"})),
        AgentError::Invalid { .. }
    ));
    assert!(matches!(
        bad(json!({"actions": [{"log": {"template": "$attr.wing"}}]})),
        AgentError::Invalid { .. }
    ));
    assert!(matches!(
        bad(json!({"actions": [{"send": {"receivers": [], "stream": "X"}}]})),
        AgentError::Invalid { .. }
    ));
    assert!(matches!(
        bad(json!({"actions": [{"publish_fog": {"topic": "f1/#", "stream": "X"}}]})),
        AgentError::Invalid { .. }
    ));
    // Message variables only exist for message triggers.
    let mut o2 = o2_agent();
    o2.rules[0].guard = Some("sender = 'x'".into());
    assert!(o2.validate().is_err());
    let mut dup = light_agent();
    dup.rules.push(dup.rules[0].clone());
    assert!(matches!(dup.validate(), Err(AgentError::DuplicateRule(_))));
}

#[test]
fn message_fields_and_sender_are_visible() {
    let spec: AgentSpec = serde_json::from_value(json!({
        "id": "b",
        "rules": [{"id": "reply", "trigger": {"message": "O2Level"},
                   "guard": "msg.value < 100 and sender = 'e1.o2'",
                   "actions": [{"send": {"receivers": ["$sender"], "stream": "Ack",
                                         "fields": {"to": "$sender", "v": "$msg.value"},
                                         "performative": "REQUEST"}}]}]
    }))
    .unwrap();
    let mut a = agent(spec);
    let effects = a.step(&Stimulus::Message(o2_message(50.into())), 3);
    let Effect::Send(m) = &effects[0] else {
        panic!("{effects:?}")
    };
    assert_eq!(m.performative, Performative::Request);
    assert_eq!(m.content.field("to"), Some(&"e1.o2".into()));
    assert_eq!(m.content.field("v"), Some(&50.into()));
    // Receivers are names, not templates.
    assert_eq!(m.receivers, Receivers::To(vec!["$sender".into()]));
}

fn rule_update(rule: serde_json::Value, agent: Option<&str>) -> AclMessage {
    let mut fields: Fields = [("rule", FieldValue::String(rule.to_string()))].into_iter().collect();
    if let Some(a) = agent {
        fields.set("agent", a.into());
    }
    AclMessage {
        performative: Performative::Request,
        sender: "user".into(),
        receivers: Receivers::To(vec!["e1.light".into()]),
        content: Event::new(StreamName::new(RULE_UPDATE).unwrap(), fields, 0, NodeId::new("f1")),
        sent_at: 0,
    }
}

#[test]
fn rule_updates_replace_atomically() {
    let mut a = agent(light_agent());
    let mut rule = serde_json::to_value(&light_agent().rules[0]).unwrap();
    rule["guard"] = json!("value <= 95");
    let effects = a.step(&Stimulus::Message(rule_update(rule.clone(), None)), 0);
    assert_eq!(
        effects,
        vec![Effect::RuleReplaced {
            rule: "low_oxygen".into()
        }]
    );
    assert_eq!(a.rules().count(), 1);
    assert_eq!(a.step(&Stimulus::Message(o2_message(93.into())), 0).len(), 2);

    // Invalid updates leave the rules untouched.
    let mut broken = rule.clone();
    broken["guard"] = json!("value <=");
    let effects = a.step(&Stimulus::Message(rule_update(broken, None)), 0);
    assert!(matches!(&effects[0], Effect::RuleError { .. }));
    assert_eq!(a.rules().next().unwrap().guard.as_deref(), Some("value <= 95"));

    // Updates addressed elsewhere are ignored.
    rule["guard"] = json!("value <= 1");
    assert!(a
        .step(&Stimulus::Message(rule_update(rule, Some("other"))), 0)
        .is_empty());
    assert_eq!(a.rules().next().unwrap().guard.as_deref(), Some("value <= 95"));
}

fn timer_agent() -> AgentSpec {
    serde_json::from_value(json!({
        "id": "t",
        "state": {"ticks": 0},
        "rules": [{"id": "tick", "trigger": {"timer": 1000},
                   "actions": [{"set_state": {"var": "ticks", "expr": "state.ticks + 1"}}]}]
    }))
    .unwrap()
}

#[test]
fn timers_fire_every_period() {
    let mut h = AgentHost::new(NodeId::new("e1"));
    h.add(timer_agent(), 0).unwrap();
    assert_eq!(h.next_timer(), Some(1000));
    h.fire_timers(999);
    assert!(h.run(999).is_empty());
    h.fire_timers(3500);
    assert_eq!(h.run(3500).len(), 3);
    assert_eq!(h.agent("t").unwrap().state()["ticks"], 3.into());
    assert_eq!(h.next_timer(), Some(4000));
}

#[test]
fn empty_host_idles() {
    let mut h = AgentHost::new(NodeId::new("e1"));
    h.add(light_agent(), 0).unwrap();
    assert!(h.run(0).is_empty());
    assert_eq!(h.next_timer(), None);
    assert!(h.sample("e1.light", "o2", 1.into()).is_err());
    assert!(h.sample("ghost", "o2", 1.into()).is_err());
    assert!(h.add(light_agent(), 0).is_err());
}

/// Samples for the O2 agent run through the gateway back to the light agent.
/// The loop alternates host runs and gateway deliveries until quiet.
fn edge_round(h: &mut AgentHost, g: &mut GatewayRegistry, now: u64) -> Vec<(String, Effect)> {
    let mut log = Vec::new();
    loop {
        let effects = h.run(now);
        if effects.is_empty() {
            break;
        }
        for (_, e) in &effects {
            if let Effect::Send(m) = e {
                g.dispatch(m.clone()).unwrap();
            }
        }
        log.extend(effects);
        let ids: Vec<String> = h.agents().map(|a| a.id().to_string()).collect();
        for id in ids {
            for m in g.drain(&id) {
                h.deliver(&id, m).unwrap();
            }
        }
    }
    log
}

fn describe(log: &[(String, Effect)]) -> Vec<String> {
    log.iter()
        .map(|(a, e)| match e {
            Effect::Actuation { actuator, value } => format!("{a} actuate {actuator}={value}"),
            Effect::Send(m) => format!("{a} send {}={:?}", m.content.stream, m.content.field("value")),
            Effect::FogPublish { topic, event } => format!("{a} fog {topic} {}", event.stream),
            other => format!("{a} {other:?}"),
        })
        .collect()
}

#[test]
fn scripted_samples_give_a_golden_log() {
    let mut h = AgentHost::new(NodeId::new("e1"));
    let mut g = GatewayRegistry::new();
    for spec in [light_agent(), o2_agent()] {
        g.register(&spec.id, "e1").unwrap();
        h.add(spec, 0).unwrap();
    }
    let mut log = Vec::new();
    for (t, v) in [(1000, 97), (2000, 88), (3000, 91)] {
        h.sample("e1.o2", "o2", FieldValue::Integer(v)).unwrap();
        log.extend(edge_round(&mut h, &mut g, t));
    }
    assert_eq!(
        describe(&log),
        [
            "e1.o2 send O2Level=Some(Integer(97))",
            "e1.o2 send O2Level=Some(Integer(88))",
            "e1.light actuate external_light=true",
            "e1.light fog f1/in ExternalLight",
            "e1.o2 send O2Level=Some(Integer(91))",
        ]
    );
}

fn hospital_host() -> (AgentHost, GatewayRegistry) {
    let mut h = AgentHost::new(NodeId::new("e1"));
    let mut g = GatewayRegistry::new();
    let mut second = light_agent();
    second.id = "e1.light2".into();
    for spec in [light_agent(), second, o2_agent()] {
        g.register(&spec.id, "e1").unwrap();
        h.add(spec, 0).unwrap();
    }
    (h, g)
}

fn sample_value() -> impl Strategy<Value = FieldValue> {
    prop_oneof![
        4 => (60i64..110).prop_map(FieldValue::Integer),
        2 => (60.0f64..110.0).prop_map(FieldValue::Number),
        1 => Just(FieldValue::Null),
        1 => Just(FieldValue::from("n/a")),
    ]
}

proptest! {
    #[test]
    fn agent_loop_is_deterministic(values in prop::collection::vec(sample_value(), 0..40)) {
        let run = || {
            let (mut h, mut g) = hospital_host();
            let mut log = Vec::new();
            for (i, v) in values.iter().enumerate() {
                h.sample("e1.o2", "o2", v.clone()).unwrap();
                log.extend(edge_round(&mut h, &mut g, i as u64 * 100));
            }
            log
        };
        prop_assert_eq!(run(), run());
    }

    /// Every light fog publish follows, in the same step, a stimulus whose
    /// value is at most 90.
    #[test]
    fn light_publishes_respect_the_threshold(values in prop::collection::vec(sample_value(), 0..40)) {
        let mut a = agent(light_agent());
        for v in values {
            let effects = a.step(&Stimulus::Message(o2_message(v.clone())), 0);
            let published = effects.iter().any(|e| matches!(e,
                Effect::FogPublish { event, .. }
                    if event.stream.as_str() == "ExternalLight"
                        && event.field("isOn") == Some(&true.into())));
            if published {
                prop_assert!(v.as_f64().is_some_and(|x| x <= 90.0), "{v:?}");
            } else if v.as_f64().is_some_and(|x| x <= 90.0) {
                prop_assert_eq!(effects.len(), 2);
            }
        }
    }

    /// Per sender and receiver, delivery order equals send order.
    #[test]
    fn gateway_queues_are_fifo(sends in prop::collection::vec((0usize..4, 0usize..4, any::<bool>()), 0..200)) {
        let mut g = GatewayRegistry::new();
        for i in 0..4 {
            g.register(&format!("a{i}"), "room").unwrap();
        }
        for (seq, (from, to, bcast)) in sends.iter().enumerate() {
            let receivers = if *bcast {
                Receivers::Broadcast
            } else {
                Receivers::To(vec![format!("a{to}")])
            };
            g.dispatch(AclMessage {
                performative: Performative::Inform,
                sender: format!("a{from}"),
                receivers,
                content: Event::new(
                    StreamName::new("Seq").unwrap(),
                    [("n", FieldValue::Integer(seq as i64))].into_iter().collect(),
                    seq as u64,
                    NodeId::new("e"),
                ),
                sent_at: seq as u64,
            }).unwrap();
        }
        for r in 0..4 {
            let got = g.drain(&format!("a{r}"));
            for s in 0..4 {
                let sender = format!("a{s}");
                let from_s: Vec<u64> = got.iter().filter(|m| m.sender == sender).map(|m| m.sent_at).collect();
                let expected: Vec<u64> = sends.iter().enumerate()
                    .filter(|(_, (f, t, b))| *f == s && (if *b { r != s } else { *t == r }))
                    .map(|(i, _)| i as u64)
                    .collect();
                prop_assert_eq!(from_s, expected);
            }
        }
    }

    /// Stimulating one agent never changes another agent's state.
    #[test]
    fn agents_do_not_share_state(values in prop::collection::vec(60i64..110, 1..20)) {
        let (mut h, _) = hospital_host();
        for v in values {
            h.deliver("e1.light", o2_message(v.into())).unwrap();
        }
        h.run(0);
        prop_assert_eq!(&h.agent("e1.light2").unwrap().actuators()["external_light"], &FieldValue::from(false));
    }
}
