//! Acceptance gate: every criterion runs at its stated tolerance and time
//! limit and prints one PASS or FAIL line. The test fails if any does.

use std::collections::BTreeMap;
use std::io::{self, Write};
use std::panic::{self, AssertUnwindSafe};
use std::time::{Duration, Instant};

use atmosphere::config::{Mode, Scenario, TimelineEntry};
use atmosphere::harness;
use atmosphere::report::{RunReport, Summary};
use atmosphere_core::cep::{oracle_replay, ClockMode, Emission, Engine};
use atmosphere_core::event::{Event, EventSchema, FieldType, FieldValue, Fields, NodeId, SchemaRegistry, StreamName};
use atmosphere_core::mqtt::{decode_packet, encode_packet, QoS};
use atmosphere_core::pattern::{parse_pattern, parse_patterns, print_pattern, CmpOp, Operand};
use proptest::test_runner::{Config, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

mod common;
use common::{of_kind, parse};

#[path = "../../core/tests/support/mqtt.rs"]
mod mqtt;

const HOSPITAL: &str = include_str!("../../core/patterns/hospital.epl");
const HOUR: u64 = 3_600_000;

fn stream(s: &str) -> StreamName {
    StreamName::new(s).unwrap()
}

fn hospital_schemas() -> SchemaRegistry {
    let mut r = SchemaRegistry::new();
    let light = vec![
        ("isOn".into(), FieldType::Boolean),
        ("floor".into(), FieldType::Integer),
    ];
    r.register(EventSchema::new(stream("ExternalLight"), light).unwrap());
    let medicine = vec![
        ("id".into(), FieldType::String),
        ("type".into(), FieldType::String),
        ("place".into(), FieldType::String),
    ];
    r.register(EventSchema::new(stream("Medicine"), medicine).unwrap());
    r
}

fn pattern_coverage() {
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
        d.validate().unwrap();
        let text = print_pattern(d);
        assert_eq!(&parse_pattern(&text).unwrap(), d, "{text}");
    }
    let mut engine = Engine::new(hospital_schemas(), ClockMode::EventTime, 0);
    engine.deploy_all(defs.iter().cloned()).unwrap();

    let by_name: BTreeMap<&str, _> = defs.iter().map(|d| (d.name.as_str(), d)).collect();
    let threshold = |name: &str| {
        let p = &by_name[name].bindings[0].predicates[0];
        match &p.rhs {
            Operand::Literal(v) => (p.op, v.clone()),
            Operand::Field(f) => panic!("{name}: threshold is {f}"),
        }
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
    let windows: Vec<_> = [
        "ExternalLightByFloor",
        "DemandByLaboratory",
        "StockByPharmacy",
        "UseByHospital",
        "MedicineStockBreak",
    ]
    .iter()
    .map(|n| by_name[n].window_millis())
    .collect();
    assert_eq!(windows, [600_000, HOUR, HOUR, HOUR, 24 * HOUR].map(Some));
}

fn event(s: &str, fields: Vec<(&str, FieldValue)>, ts: u64) -> Event {
    Event::new(
        stream(s),
        fields.into_iter().collect::<Fields>(),
        ts,
        NodeId::new("src"),
    )
}

/// A random log over two days: lights, medicine readings and injected
/// demand rows, eight medicine ids, timestamps on whole seconds.
fn random_log(rng: &mut ChaCha8Rng) -> Vec<Event> {
    let n = rng.gen_range(1..=10_000usize);
    let ids: Vec<String> = (1..=8).map(|i| format!("M{i}")).collect();
    let mut times: Vec<u64> = (0..n).map(|_| rng.gen_range(0..48 * 3600) * 1000).collect();
    times.sort_unstable();
    times
        .into_iter()
        .map(|t| {
            let id = ids[rng.gen_range(0..ids.len())].as_str();
            let kind = if rng.gen_bool(0.5) { "respiratory" } else { "cardiac" };
            match rng.gen_range(0..100) {
                0..=29 => event(
                    "ExternalLight",
                    vec![
                        ("isOn", rng.gen_bool(0.6).into()),
                        ("floor", rng.gen_range(1..=3i64).into()),
                    ],
                    t,
                ),
                30..=39 => event(
                    "DemandByLaboratory",
                    vec![
                        ("timestamp", (t as i64).into()),
                        ("id", id.into()),
                        ("type", kind.into()),
                        ("place", "laboratory".into()),
                        ("count", rng.gen_range(950..1050i64).into()),
                    ],
                    t,
                ),
                k => {
                    let place = ["laboratory", "pharmacy", "hospital"][k as usize % 3];
                    event(
                        "Medicine",
                        vec![("id", id.into()), ("type", kind.into()), ("place", place.into())],
                        t,
                    )
                }
            }
        })
        .collect()
}

fn engine_replay(schemas: &SchemaRegistry, log: &[Event], horizon: u64) -> Vec<Emission> {
    let mut e = Engine::new(schemas.clone(), ClockMode::EventTime, 0);
    e.deploy_all(parse_patterns(HOSPITAL).unwrap()).unwrap();
    let mut out = Vec::new();
    for ev in log {
        out.extend(e.ingest(ev.clone()).unwrap());
    }
    out.extend(e.advance_clock(horizon).unwrap());
    out
}

fn oracle_equivalence() {
    let schemas = hospital_schemas();
    let patterns = parse_patterns(HOSPITAL).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut emitted = 0;
    for i in 0..200 {
        let log = random_log(&mut rng);
        let horizon = log.last().map_or(0, |e| e.timestamp) + 25 * HOUR;
        let expected = oracle_replay(&schemas, &patterns, &log, 0, horizon, &NodeId::new("cep")).unwrap();
        let actual = engine_replay(&schemas, &log, horizon);
        assert!(
            actual == expected,
            "log {i}: engine {} emissions, reference {}",
            actual.len(),
            expected.len()
        );
        emitted += actual.len();
    }
    assert!(emitted > 0);
}

fn hospital() -> (Scenario, RunReport) {
    let s = common::scenario("hospital");
    let r = harness::run(&s).unwrap();
    (s, r)
}

fn hospital_end_to_end() {
    let (_, r) = hospital();
    let (_, again) = hospital();
    assert!(r.alerts == again.alerts, "alert logs differ between runs");
    assert!(r.emissions == again.emissions, "emission logs differ between runs");
    let alerts = parse(&r.alerts);
    let emissions = parse(&r.emissions);

    // (a) r301 read 85, r201 read 95.
    let in_room = |room: &str, kind: &str| -> Vec<Value> {
        of_kind(&alerts, kind)
            .into_iter()
            .filter(|a| a["node"] == room)
            .cloned()
            .collect()
    };
    let light = |room: &str| -> usize {
        in_room(room, "actuation")
            .iter()
            .filter(|a| a["actuator"] == "external_light")
            .count()
    };
    assert_eq!(light("r301"), 1);
    let sent = in_room("r301", "fog_publish");
    assert_eq!(sent.len(), 1);
    assert_eq!(sent[0]["event"]["_stream"], "ExternalLight");
    assert_eq!(light("r201"), 0);
    assert!(in_room("r201", "fog_publish").is_empty());

    // (b) four rooms on floor 3, three on floor 2.
    let su: Vec<_> = emissions
        .iter()
        .filter(|e| e["pattern"] == "SurveillanceUnit")
        .collect();
    assert_eq!(su.len(), 1);
    assert_eq!(su[0]["event"]["floor"], 3);
    let at_user: Vec<_> = alerts
        .iter()
        .filter(|a| a["node"] == "u" && a["kind"] == "received" && a["event"]["_stream"] == "SurveillanceUnit")
        .collect();
    assert_eq!(at_user.len(), 1);
    assert_eq!(at_user[0]["topic"], "f1/user");

    // (c) M1 is short everywhere, M2 only in the laboratory.
    let breaks: Vec<_> = emissions
        .iter()
        .filter(|e| e["pattern"] == "MedicineStockBreak")
        .collect();
    assert_eq!(breaks.len(), 1);
    assert_eq!(breaks[0]["event"]["id"], "M1");
    assert_eq!(breaks[0]["topic"], "c1/out/fog");
    for fog in ["f1", "f2"] {
        let raised = emissions
            .iter()
            .filter(|e| e["node"] == fog && e["pattern"] == "StockAlert")
            .count();
        assert_eq!(raised, 1, "fog {fog}");
    }
}

fn broker_protocol() {
    for (p, bytes) in mqtt::golden() {
        assert_eq!(encode_packet(&p).unwrap(), bytes, "{p:?}");
        assert_eq!(decode_packet(&bytes).unwrap(), Some((p, bytes.len())));
    }
    let mut runner = TestRunner::new(Config {
        cases: 1000,
        failure_persistence: None,
        ..Config::default()
    });
    runner
        .run(&mqtt::packet(), |p| {
            let bytes = encode_packet(&p).unwrap();
            assert_eq!(decode_packet(&bytes).unwrap(), Some((p, bytes.len())));
            Ok(())
        })
        .unwrap();

    const TIMEOUT: u64 = 100;
    const RETRIES: u32 = 20;
    let mut net = mqtt::connected(7, 0.3, TIMEOUT, RETRIES);
    let mut published = BTreeMap::new();
    for i in 0..1000u32 {
        let payload = i.to_be_bytes().to_vec();
        published.insert(payload.clone(), net.now);
        net.publish(payload, QoS::AtLeastOnce);
        let next = net.now + 5;
        net.run_until(next);
    }
    let end = net.now + 2 * (RETRIES as u64 + 1) * TIMEOUT;
    net.run_until(end);
    assert_eq!(net.gave_up, 0);
    assert_eq!(net.delivered.len(), 1000);
    let hop_bound = RETRIES as u64 * TIMEOUT + net.latency;
    for (payload, t0) in &published {
        assert!(net.at_broker[payload] - t0 <= hop_bound);
        assert!(net.delivered[payload] - net.at_broker[payload] <= hop_bound);
    }

    let mut net = mqtt::connected(11, 0.3, TIMEOUT, 5);
    for i in 0..1000u32 {
        net.publish(i.to_be_bytes().to_vec(), QoS::AtMostOnce);
        let next = net.now + 5;
        net.run_until(next);
    }
    let end = net.now + 10_000;
    net.run_until(end);
    assert_eq!(net.sent[&(mqtt::Hop::PubToBroker, 0)], 1000);
    assert_eq!(net.sent[&(mqtt::Hop::BrokerToSub, 0)], net.at_broker.len() as u64);
    assert_eq!(net.dup_qos0, 0);
}

fn bench(mode: Mode, rate: f64, duration_s: f64, qos: u8) -> Summary {
    let s = common::scenario("bench");
    let mut run = s.run.clone();
    run.clock = ClockMode::ProcessingTime;
    run.mode = mode;
    run.rate = Some(rate);
    run.duration_s = duration_s;
    run.warmup_s = run.warmup_s.min(duration_s / 2.0);
    run.qos = qos;
    let s = s.with_run(run).unwrap();
    let r = harness::run(&s).unwrap();
    report(format!(
        "    {} qos{} {rate}/s for {duration_s}s: {} of {} round trips, mean {:.3} ms, buckets {:?}, sustained {:.1}/s, packets {:?}",
        r.summary.mode,
        qos,
        r.summary.completed,
        r.summary.initiated,
        r.summary.mean_latency_ms.unwrap_or(f64::NAN),
        r.summary.buckets,
        r.summary.sustained_rate,
        r.summary.packets,
    ));
    r.summary
}

fn message_amplification() {
    for qos in [1, 0] {
        let s = bench(Mode::Full, 30.0, 30.0, qos);
        assert_eq!(s.lost, 0);
        assert_eq!(s.completed, s.initiated);
        let per = s.per_round_trip.unwrap();
        assert_eq!(per.publish, 2.0, "qos {qos}");
        assert_eq!(per.puback, if qos == 1 { 2.0 } else { 0.0 }, "qos {qos}");
    }
}

fn throughput() {
    let s = bench(Mode::Full, 300.0, 60.0, 0);
    assert!(!s.saturated, "saturated");
    assert_eq!(s.lost, 0);
    assert_eq!(s.completed, s.initiated);
    assert!(s.sustained_rate >= 300.0, "sustained {}", s.sustained_rate);
    let b = s.buckets.unwrap();
    assert!(b.up_to_50() >= 90.0, "{:.2}% within 50 ms", b.up_to_50());
}

fn qos1_latency() {
    let s = bench(Mode::Full, 30.0, 60.0, 1);
    let b = s.buckets.unwrap();
    assert!(b.up_to_50() >= 97.0, "{:.2}% within 50 ms", b.up_to_50());
}

fn ablations() {
    let full = bench(Mode::Full, 30.0, 15.0, 0);
    let cep = bench(Mode::CepOnly, 30.0, 15.0, 0);
    let agents = bench(Mode::AgentsOnly, 30.0, 15.0, 0);
    assert_eq!(cep.packets.acl, 0);
    assert_eq!(cep.completed, full.completed);
    assert_eq!(agents.packets.publish, 0);
    assert_eq!(agents.packets.puback, 0);
    assert_eq!(agents.packets.acl, 2 * agents.completed as u64);
}

fn user_publish(at_ms: u64, stream: &str, fields: Value) -> TimelineEntry {
    serde_json::from_value(json!({
        "at_ms": at_ms, "node": "u",
        "action": {"publish": {"topic": "f1/user", "stream": stream, "fields": fields}}
    }))
    .unwrap()
}

fn user_bridge() {
    let base = common::scenario("hospital");
    let mut chatty = base.clone();
    for k in 0..100 {
        chatty
            .timeline
            .push(user_publish(5_000 + k * 1000, "Notice", json!({"text": "hi"})));
    }
    let a = harness::run(&base).unwrap();
    let b = harness::run(&chatty).unwrap();
    let f1 = |r: &RunReport| r.summary.nodes.iter().find(|n| n.id == "f1").unwrap().stats;
    assert_eq!(f1(&a).cep_ingested, f1(&b).cep_ingested);
    assert_eq!(a.summary.cep_ingested, b.summary.cep_ingested);
    assert!(
        f1(&b).publish >= f1(&a).publish + 100,
        "the messages went through the broker"
    );

    let mut s = base;
    let sample = |at_ms: u64| -> TimelineEntry {
        serde_json::from_value(json!({
            "at_ms": at_ms, "node": "r301",
            "action": {"sample": {"agent": "ventilator", "sensor": "o2", "value": 93.0}}
        }))
        .unwrap()
    };
    let rule = json!({
        "id": "low_oxygen",
        "trigger": {"message": "O2Level"},
        "guard": "value <= 95",
        "actions": [{"actuate": {"actuator": "external_light", "value": true}}]
    });
    s.timeline.push(sample(2_000_000));
    s.timeline.push(user_publish(
        2_100_000,
        "RuleUpdate",
        json!({"agent": "r301.external_light", "rule": rule.to_string()}),
    ));
    s.timeline.push(sample(2_200_000));
    let r = harness::run(&s).unwrap();
    let lit: Vec<u64> = parse(&r.alerts)
        .iter()
        .filter(|a| a["agent"] == "r301.external_light" && a["kind"] == "actuation")
        .map(|a| a["t_ms"].as_u64().unwrap())
        .filter(|t| *t >= 2_000_000)
        .collect();
    assert_eq!(lit.len(), 1, "93 lights the room only after the update");
    assert!(lit[0] >= 2_200_000);
}

/// Writes straight to stderr so the lines show even when output is captured.
fn report(line: String) {
    let _ = writeln!(io::stderr(), "{line}");
}

fn check(n: u32, name: &str, limit: Duration, f: fn()) -> bool {
    let start = Instant::now();
    let result = panic::catch_unwind(AssertUnwindSafe(f));
    let took = start.elapsed();
    let verdict = match result {
        Ok(()) if took <= limit => Ok(()),
        Ok(()) => Err(format!("took {took:.1?}, limit {limit:?}")),
        Err(e) => Err(e
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panicked".into())),
    };
    match &verdict {
        Ok(()) => report(format!("criterion {n} {name}: PASS ({took:.1?})")),
        Err(why) => report(format!("criterion {n} {name}: FAIL ({took:.1?}): {why}")),
    }
    verdict.is_ok()
}

#[test]
fn acceptance() {
    let s = Duration::from_secs;
    let criteria: [(&str, Duration, fn()); 9] = [
        ("pattern coverage", s(1), pattern_coverage),
        ("cep oracle equivalence", s(120), oracle_equivalence),
        ("hospital end to end", s(30), hospital_end_to_end),
        ("broker protocol", s(60), broker_protocol),
        ("message amplification", s(120), message_amplification),
        ("throughput", s(90), throughput),
        ("qos1 latency", s(90), qos1_latency),
        ("ablations", s(120), ablations),
        ("user bridge isolation", s(30), user_bridge),
    ];
    let failed: Vec<u32> = criteria
        .into_iter()
        .zip(1..)
        .filter_map(|((name, limit, f), n)| (!check(n, name, limit, f)).then_some(n))
        .collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
