//! Scenario files: one JSON document describing schemas, topology, agents,
//! pattern files, load simulators, a scripted timeline and run settings.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::marker::PhantomData;
use std::path::{Path, PathBuf};

use atmosphere_core::agent::AgentSpec;
use atmosphere_core::cep::ClockMode;
use atmosphere_core::event::{EventSchema, FieldType, FieldValue, SchemaRegistry, StreamName};
use atmosphere_core::node::{SinkSpec, SourceSpec, TransformerSpec};
use atmosphere_core::pattern::{parse_patterns, PatternDef};
use serde::de::{MapAccess, Visitor};
use serde::{Deserialize, Deserializer, Serialize};
use serde_json::Value;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{pointer}: {message}")]
    Json { pointer: String, message: String },
    #[error("{pointer}: pattern file {file}: {message}")]
    Pattern {
        pointer: String,
        file: PathBuf,
        message: String,
    },
    #[error("{pointer}: {message}")]
    Invalid { pointer: String, message: String },
}

impl ConfigError {
    /// JSON pointer of the offending value.
    pub fn pointer(&self) -> Option<&str> {
        match self {
            ConfigError::Io { .. } => None,
            ConfigError::Json { pointer, .. }
            | ConfigError::Pattern { pointer, .. }
            | ConfigError::Invalid { pointer, .. } => Some(pointer),
        }
    }
}

fn invalid(pointer: impl Into<String>, message: impl fmt::Display) -> ConfigError {
    ConfigError::Invalid {
        pointer: pointer.into(),
        message: message.to_string(),
    }
}

/// A JSON object read as a list of entries in document order.
#[derive(Debug, Clone, PartialEq)]
pub struct Ordered<V>(pub Vec<(String, V)>);

impl<V> Default for Ordered<V> {
    fn default() -> Self {
        Ordered(Vec::new())
    }
}

impl<'de, V: Deserialize<'de>> Deserialize<'de> for Ordered<V> {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        struct V2<V>(PhantomData<V>);
        impl<'de, V: Deserialize<'de>> Visitor<'de> for V2<V> {
            type Value = Ordered<V>;
            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("an object")
            }
            fn visit_map<A: MapAccess<'de>>(self, mut map: A) -> Result<Ordered<V>, A::Error> {
                let mut out = Vec::new();
                while let Some((k, v)) = map.next_entry::<String, V>()? {
                    out.push((k, v));
                }
                Ok(Ordered(out))
            }
        }
        d.deserialize_map(V2(PhantomData))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    #[default]
    Full,
    CepOnly,
    AgentsOnly,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Full => "full",
            Mode::CepOnly => "cep-only",
            Mode::AgentsOnly => "agents-only",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSettings {
    pub duration_s: f64,
    pub qos: u8,
    pub mode: Mode,
    pub clock: ClockMode,
    pub seed: u64,
    /// Overrides the rate of every simulator.
    pub rate: Option<f64>,
    /// Round trips sent before this offset are left out of latency figures.
    pub warmup_s: f64,
    /// Time allowed after the last scheduled input for replies to arrive.
    pub drain_s: f64,
    /// One-way delay of every link in simulated runs.
    pub link_latency_ms: u64,
    pub retry_timeout_ms: u64,
    pub max_retries: u32,
    /// Queue length above which a node counts as backed up.
    pub high_water: usize,
    /// How long a node may stay backed up before the run is abandoned.
    pub saturation_s: f64,
    pub cpu_interval_ms: u64,
}

impl Default for RunSettings {
    fn default() -> Self {
        RunSettings {
            duration_s: 60.0,
            qos: 0,
            mode: Mode::Full,
            clock: ClockMode::EventTime,
            seed: 0,
            rate: None,
            warmup_s: 10.0,
            drain_s: 5.0,
            link_latency_ms: 1,
            retry_timeout_ms: 1000,
            max_retries: 5,
            high_water: 10_000,
            saturation_s: 5.0,
            cpu_interval_ms: 500,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Generator {
    Constant(Value),
    /// Integers drawn uniformly from an inclusive range.
    Uniform([i64; 2]),
    Choice(Vec<Value>),
    Bernoulli(f64),
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimOutput {
    /// A measured round trip through the fog.
    #[default]
    Probe,
    /// A plain publish on a topic of the edge's fog broker.
    Publish { topic: String },
    /// A sensor reading taken from one generated field.
    Sample {
        agent: String,
        sensor: String,
        field: String,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulatorSpec {
    pub edge: String,
    pub stream: String,
    /// Events per second.
    pub rate: f64,
    #[serde(default)]
    pub fields: BTreeMap<String, Generator>,
    /// Defaults to a value derived from the run seed.
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub output: SimOutput,
    #[serde(default)]
    pub start_ms: u64,
    /// Stops after this many events instead of at the end of the run.
    #[serde(default)]
    pub count: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimelineAction {
    Sample {
        agent: String,
        sensor: String,
        value: Value,
    },
    Publish {
        topic: String,
        stream: String,
        #[serde(default)]
        fields: BTreeMap<String, Value>,
    },
    /// Raw data from an external source, for cloud nodes.
    Source { topic: String, payload: Value },
}

fn one() -> u64 {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimelineEntry {
    pub at_ms: u64,
    /// Repeat period; with `count` > 1 the action recurs.
    #[serde(default)]
    pub every_ms: u64,
    #[serde(default = "one")]
    pub count: u64,
    pub node: String,
    pub action: TimelineAction,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeSpec {
    pub reply_stream: String,
}

fn second() -> u64 {
    1000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeartbeatSpec {
    pub stream: String,
    #[serde(default = "second")]
    pub period_ms: u64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct FogFile {
    id: String,
    #[serde(default)]
    patterns: Vec<String>,
    #[serde(default)]
    peers: Vec<String>,
    #[serde(default)]
    ingest: Vec<String>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct CloudFile {
    id: String,
    fogs: Vec<String>,
    #[serde(default)]
    sources: Vec<SourceSpec>,
    #[serde(default)]
    transformers: Vec<TransformerSpec>,
    #[serde(default)]
    patterns: Vec<String>,
    #[serde(default)]
    sinks: Vec<SinkSpec>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct EdgeFile {
    id: String,
    fog: String,
    #[serde(default)]
    template: Option<String>,
    #[serde(default)]
    attributes: serde_json::Map<String, Value>,
    #[serde(default)]
    agents: Vec<Value>,
    #[serde(default)]
    probe: Option<ProbeSpec>,
    #[serde(default)]
    heartbeat: Option<HeartbeatSpec>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct UserFile {
    id: String,
    fog: String,
    #[serde(default)]
    subscriptions: Option<Vec<String>>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct TopologyFile {
    #[serde(default)]
    fogs: Vec<FogFile>,
    #[serde(default)]
    clouds: Vec<CloudFile>,
    #[serde(default)]
    edges: Vec<EdgeFile>,
    #[serde(default)]
    users: Vec<UserFile>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScenarioFile {
    name: String,
    schemas: Ordered<Ordered<FieldType>>,
    topology: TopologyFile,
    #[serde(default)]
    templates: BTreeMap<String, Vec<Value>>,
    #[serde(default)]
    simulators: Vec<SimulatorSpec>,
    #[serde(default)]
    timeline: Vec<TimelineEntry>,
    #[serde(default)]
    run: RunSettings,
}

#[derive(Debug, Clone)]
pub struct FogSpec {
    pub id: String,
    pub patterns: Vec<PatternDef>,
    pub peers: Vec<String>,
    pub ingest: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct CloudSpec {
    pub id: String,
    pub fogs: Vec<String>,
    pub sources: Vec<SourceSpec>,
    pub transformers: Vec<TransformerSpec>,
    pub patterns: Vec<PatternDef>,
    pub sinks: Vec<SinkSpec>,
}

#[derive(Debug, Clone)]
pub struct EdgeSpec {
    pub id: String,
    pub fog: String,
    pub agents: Vec<AgentSpec>,
    pub probe: Option<ProbeSpec>,
    pub heartbeat: Option<HeartbeatSpec>,
}

#[derive(Debug, Clone)]
pub struct UserSpec {
    pub id: String,
    pub fog: String,
    pub subscriptions: Vec<String>,
}

/// A loaded and cross-checked scenario.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub name: String,
    pub schemas: SchemaRegistry,
    pub fogs: Vec<FogSpec>,
    pub clouds: Vec<CloudSpec>,
    pub edges: Vec<EdgeSpec>,
    pub users: Vec<UserSpec>,
    pub simulators: Vec<SimulatorSpec>,
    pub timeline: Vec<TimelineEntry>,
    pub run: RunSettings,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Tier {
    Fog,
    Cloud,
    Edge,
    User,
}

impl Scenario {
    /// Node ids in startup order: fogs, clouds, edges, users.
    pub fn node_ids(&self) -> Vec<(&str, Tier)> {
        let mut v: Vec<(&str, Tier)> = Vec::new();
        v.extend(self.fogs.iter().map(|n| (n.id.as_str(), Tier::Fog)));
        v.extend(self.clouds.iter().map(|n| (n.id.as_str(), Tier::Cloud)));
        v.extend(self.edges.iter().map(|n| (n.id.as_str(), Tier::Edge)));
        v.extend(self.users.iter().map(|n| (n.id.as_str(), Tier::User)));
        v
    }

    pub fn tier_of(&self, id: &str) -> Option<Tier> {
        self.node_ids().into_iter().find(|(n, _)| *n == id).map(|(_, t)| t)
    }

    pub fn edge(&self, id: &str) -> Option<&EdgeSpec> {
        self.edges.iter().find(|e| e.id == id)
    }

    pub fn fog(&self, id: &str) -> Option<&FogSpec> {
        self.fogs.iter().find(|e| e.id == id)
    }

    /// The same scenario with other run settings, checked again.
    pub fn with_run(mut self, run: RunSettings) -> Result<Scenario, ConfigError> {
        self.run = run;
        self.check()?;
        Ok(self)
    }

    fn check(&self) -> Result<(), ConfigError> {
        check_run(&self.run)?;
        check_simulators(self)?;
        check_timeline(self)?;
        // Deploying the patterns and wiring the nodes checks the rest.
        crate::topology::build_nodes(self).map_err(|e| invalid(e.pointer().to_string(), e))?;
        Ok(())
    }
}

/// JSON pointer form of a deserializer path.
fn pointer_of(path: &serde_path_to_error::Path) -> String {
    use serde_path_to_error::Segment;
    let mut s = String::new();
    for seg in path.iter() {
        s.push('/');
        match seg {
            Segment::Seq { index } => s.push_str(&index.to_string()),
            Segment::Map { key } | Segment::Enum { variant: key } => s.push_str(&escape(key)),
            Segment::Unknown => s.push('?'),
        }
    }
    s
}

fn escape(key: &str) -> String {
    key.replace('~', "~0").replace('/', "~1")
}

fn from_json<T: serde::de::DeserializeOwned>(v: Value, base: &str) -> Result<T, ConfigError> {
    serde_path_to_error::deserialize(v).map_err(|e| ConfigError::Json {
        pointer: format!("{base}{}", pointer_of(e.path())),
        message: e.inner().to_string(),
    })
}

/// Reads, parses and validates a scenario file. Pattern paths are relative
/// to the file's directory.
pub fn load_scenario(path: impl AsRef<Path>) -> Result<Scenario, ConfigError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let dir = path.parent().unwrap_or(Path::new("."));
    parse_scenario(&text, dir)
}

pub fn parse_scenario(text: &str, dir: &Path) -> Result<Scenario, ConfigError> {
    let mut de = serde_json::Deserializer::from_str(text);
    let file: ScenarioFile = serde_path_to_error::deserialize(&mut de).map_err(|e| ConfigError::Json {
        pointer: pointer_of(e.path()),
        message: e.inner().to_string(),
    })?;
    de.end().map_err(|e| ConfigError::Json {
        pointer: String::new(),
        message: e.to_string(),
    })?;
    Loader { dir }.build(file)
}

struct Loader<'a> {
    dir: &'a Path,
}

fn check_id(id: &str, pointer: &str) -> Result<(), ConfigError> {
    if id.is_empty() || id.contains(['/', '+', '#', '.']) || id.chars().any(char::is_whitespace) {
        return Err(invalid(pointer, format!("invalid node id {id:?}")));
    }
    Ok(())
}

fn substitute(v: &mut Value, edge: &str, fog: &str) {
    match v {
        Value::String(s) => {
            if s.contains('{') {
                *s = s.replace("{edge}", edge).replace("{fog}", fog);
            }
        }
        Value::Array(a) => a.iter_mut().for_each(|x| substitute(x, edge, fog)),
        Value::Object(m) => m.values_mut().for_each(|x| substitute(x, edge, fog)),
        _ => {}
    }
}

impl Loader<'_> {
    fn patterns(&self, files: &[String], base: &str) -> Result<Vec<PatternDef>, ConfigError> {
        let mut out = Vec::new();
        for (i, f) in files.iter().enumerate() {
            let pointer = format!("{base}/{i}");
            let path = self.dir.join(f);
            let text = std::fs::read_to_string(&path).map_err(|e| ConfigError::Pattern {
                pointer: pointer.clone(),
                file: path.clone(),
                message: e.to_string(),
            })?;
            let defs = parse_patterns(&text).map_err(|e| ConfigError::Pattern {
                pointer: pointer.clone(),
                file: path.clone(),
                message: e.to_string(),
            })?;
            for d in &defs {
                if d.target().is_none() {
                    return Err(ConfigError::Pattern {
                        pointer,
                        file: path,
                        message: format!("pattern {} has no target tag", d.name),
                    });
                }
            }
            out.extend(defs);
        }
        Ok(out)
    }

    fn schemas(&self, s: Ordered<Ordered<FieldType>>) -> Result<SchemaRegistry, ConfigError> {
        let mut reg = SchemaRegistry::new();
        for (name, fields) in s.0 {
            let pointer = format!("/schemas/{}", escape(&name));
            let stream = StreamName::new(name.as_str()).map_err(|e| invalid(&pointer, e))?;
            if reg.contains(&stream) {
                return Err(invalid(pointer, "duplicate stream"));
            }
            let schema = EventSchema::new(stream, fields.0).map_err(|e| invalid(&pointer, e))?;
            reg.register(schema);
        }
        Ok(reg)
    }

    fn agents(
        &self,
        e: &EdgeFile,
        i: usize,
        templates: &BTreeMap<String, Vec<Value>>,
    ) -> Result<Vec<AgentSpec>, ConfigError> {
        let mut raw: Vec<(String, Value)> = Vec::new();
        if let Some(t) = &e.template {
            let list = templates.get(t).ok_or_else(|| {
                invalid(
                    format!("/topology/edges/{i}/template"),
                    format!("unknown template {t:?}"),
                )
            })?;
            for (j, a) in list.iter().enumerate() {
                raw.push((format!("/templates/{}/{j}", escape(t)), a.clone()));
            }
        }
        for (j, a) in e.agents.iter().enumerate() {
            raw.push((format!("/topology/edges/{i}/agents/{j}"), a.clone()));
        }
        let mut out: Vec<AgentSpec> = Vec::new();
        for (pointer, mut v) in raw {
            substitute(&mut v, &e.id, &e.fog);
            let Value::Object(m) = &mut v else {
                return Err(invalid(pointer, "agent must be an object"));
            };
            let id = match m.get("id") {
                Some(Value::String(s)) => format!("{}.{s}", e.id),
                _ => return Err(invalid(format!("{pointer}/id"), "agent id must be a string")),
            };
            m.insert("id".into(), Value::String(id.clone()));
            let attrs = m
                .entry("attributes")
                .or_insert_with(|| Value::Object(Default::default()));
            let Value::Object(attrs) = attrs else {
                return Err(invalid(format!("{pointer}/attributes"), "attributes must be an object"));
            };
            for (k, val) in &e.attributes {
                attrs.insert(k.clone(), val.clone());
            }
            let spec: AgentSpec = from_json(v, &pointer)?;
            spec.validate().map_err(|err| invalid(&pointer, err))?;
            if out.iter().any(|a| a.id == spec.id) {
                return Err(invalid(pointer, format!("duplicate agent {id:?}")));
            }
            out.push(spec);
        }
        Ok(out)
    }

    fn build(&self, f: ScenarioFile) -> Result<Scenario, ConfigError> {
        let schemas = self.schemas(f.schemas)?;
        let t = f.topology;

        let mut seen = BTreeSet::new();
        let tiers: [(&str, Vec<&str>); 4] = [
            ("fogs", t.fogs.iter().map(|n| n.id.as_str()).collect()),
            ("clouds", t.clouds.iter().map(|n| n.id.as_str()).collect()),
            ("edges", t.edges.iter().map(|n| n.id.as_str()).collect()),
            ("users", t.users.iter().map(|n| n.id.as_str()).collect()),
        ];
        for (tier, ids) in &tiers {
            for (i, id) in ids.iter().enumerate() {
                let pointer = format!("/topology/{tier}/{i}/id");
                check_id(id, &pointer)?;
                if !seen.insert(id.to_string()) {
                    return Err(invalid(pointer, format!("duplicate node id {id:?}")));
                }
            }
        }
        let fog_ids: BTreeSet<&str> = t.fogs.iter().map(|f| f.id.as_str()).collect();
        let need_fog = |id: &str, pointer: String| -> Result<(), ConfigError> {
            if fog_ids.contains(id) {
                Ok(())
            } else {
                Err(invalid(pointer, format!("unknown fog {id:?}")))
            }
        };

        let mut fogs = Vec::new();
        for (i, fog) in t.fogs.iter().enumerate() {
            for (j, p) in fog.peers.iter().enumerate() {
                need_fog(p, format!("/topology/fogs/{i}/peers/{j}"))?;
                if *p == fog.id {
                    return Err(invalid(
                        format!("/topology/fogs/{i}/peers/{j}"),
                        "a fog cannot peer with itself",
                    ));
                }
            }
            for (j, filter) in fog.ingest.iter().enumerate() {
                if !atmosphere_core::mqtt::valid_filter(filter) {
                    return Err(invalid(
                        format!("/topology/fogs/{i}/ingest/{j}"),
                        format!("invalid topic filter {filter:?}"),
                    ));
                }
            }
            fogs.push(FogSpec {
                id: fog.id.clone(),
                patterns: self.patterns(&fog.patterns, &format!("/topology/fogs/{i}/patterns"))?,
                peers: fog.peers.clone(),
                ingest: fog.ingest.clone(),
            });
        }

        let mut clouds = Vec::new();
        for (i, c) in t.clouds.into_iter().enumerate() {
            for (j, fid) in c.fogs.iter().enumerate() {
                need_fog(fid, format!("/topology/clouds/{i}/fogs/{j}"))?;
            }
            clouds.push(CloudSpec {
                patterns: self.patterns(&c.patterns, &format!("/topology/clouds/{i}/patterns"))?,
                id: c.id,
                fogs: c.fogs,
                sources: c.sources,
                transformers: c.transformers,
                sinks: c.sinks,
            });
        }

        let mut edges = Vec::new();
        for (i, e) in t.edges.iter().enumerate() {
            need_fog(&e.fog, format!("/topology/edges/{i}/fog"))?;
            if let Some(p) = &e.probe {
                let derived = fogs
                    .iter()
                    .filter(|f: &&FogSpec| f.id == e.fog)
                    .flat_map(|f| &f.patterns)
                    .any(|d| d.insert_into.as_str() == p.reply_stream);
                if !derived && schemas.get_str(&p.reply_stream).is_none() {
                    return Err(invalid(
                        format!("/topology/edges/{i}/probe/reply_stream"),
                        format!("unknown stream {:?}", p.reply_stream),
                    ));
                }
            }
            if let Some(h) = &e.heartbeat {
                StreamName::new(h.stream.as_str())
                    .map_err(|err| invalid(format!("/topology/edges/{i}/heartbeat/stream"), err))?;
                if h.period_ms == 0 {
                    return Err(invalid(
                        format!("/topology/edges/{i}/heartbeat/period_ms"),
                        "period must be positive",
                    ));
                }
            }
            edges.push(EdgeSpec {
                id: e.id.clone(),
                fog: e.fog.clone(),
                agents: self.agents(e, i, &f.templates)?,
                probe: e.probe.clone(),
                heartbeat: e.heartbeat.clone(),
            });
        }

        let mut users = Vec::new();
        for (i, u) in t.users.iter().enumerate() {
            need_fog(&u.fog, format!("/topology/users/{i}/fog"))?;
            let subscriptions = u
                .subscriptions
                .clone()
                .unwrap_or_else(|| vec![format!("{}/user", u.fog)]);
            for (j, s) in subscriptions.iter().enumerate() {
                if !atmosphere_core::mqtt::valid_filter(s) {
                    return Err(invalid(
                        format!("/topology/users/{i}/subscriptions/{j}"),
                        format!("invalid topic filter {s:?}"),
                    ));
                }
            }
            users.push(UserSpec {
                id: u.id.clone(),
                fog: u.fog.clone(),
                subscriptions,
            });
        }

        let scenario = Scenario {
            name: f.name,
            schemas,
            fogs,
            clouds,
            edges,
            users,
            simulators: f.simulators,
            timeline: f.timeline,
            run: f.run,
        };
        scenario.check()?;
        Ok(scenario)
    }
}

pub fn check_run(r: &RunSettings) -> Result<(), ConfigError> {
    let p = |f: &str| format!("/run/{f}");
    if r.qos > 1 {
        return Err(invalid(p("qos"), "qos must be 0 or 1"));
    }
    if r.duration_s.is_nan() || r.duration_s <= 0.0 {
        return Err(invalid(p("duration_s"), "duration must be positive"));
    }
    if r.warmup_s.is_nan() || r.warmup_s < 0.0 || r.drain_s.is_nan() || r.drain_s < 0.0 {
        return Err(invalid(p("warmup_s"), "warm-up and drain must not be negative"));
    }
    if r.warmup_s >= r.duration_s {
        return Err(invalid(p("warmup_s"), "warm-up must be shorter than the run"));
    }
    if let Some(rate) = r.rate {
        if rate.is_nan() || rate <= 0.0 {
            return Err(invalid(p("rate"), "rate must be positive"));
        }
    }
    if r.retry_timeout_ms == 0 {
        return Err(invalid(p("retry_timeout_ms"), "retry timeout must be positive"));
    }
    if r.cpu_interval_ms == 0 {
        return Err(invalid(p("cpu_interval_ms"), "sampling interval must be positive"));
    }
    Ok(())
}

/// Whether `v` is a scalar that fits a field of type `ty`.
fn admits(ty: FieldType, v: &Value) -> bool {
    FieldValue::from_json(v).is_some_and(|fv| ty.admits(&fv))
}

fn check_simulators(s: &Scenario) -> Result<(), ConfigError> {
    for (i, sim) in s.simulators.iter().enumerate() {
        let p = |f: &str| format!("/simulators/{i}/{f}");
        let edge = s
            .edge(&sim.edge)
            .ok_or_else(|| invalid(p("edge"), format!("unknown edge {:?}", sim.edge)))?;
        if sim.rate.is_nan() || sim.rate <= 0.0 {
            return Err(invalid(p("rate"), "rate must be positive"));
        }
        let schema = s
            .schemas
            .get_str(&sim.stream)
            .ok_or_else(|| invalid(p("stream"), format!("unknown stream {:?}", sim.stream)))?;
        for (name, g) in &sim.fields {
            let fp = format!("/simulators/{i}/fields/{}", escape(name));
            let ty = schema
                .field_type(name)
                .ok_or_else(|| invalid(&fp, format!("{} has no field {name:?}", sim.stream)))?;
            let ok = match g {
                Generator::Constant(v) => admits(ty, v),
                Generator::Uniform([lo, hi]) => lo <= hi && matches!(ty, FieldType::Integer | FieldType::Number),
                Generator::Choice(vs) => !vs.is_empty() && vs.iter().all(|v| admits(ty, v)),
                Generator::Bernoulli(prob) => (0.0..=1.0).contains(prob) && ty == FieldType::Boolean,
            };
            if !ok {
                return Err(invalid(fp, format!("generator does not produce {} values", ty.name())));
            }
        }
        let probe = sim.output == SimOutput::Probe;
        for (name, ty) in &schema.fields {
            if probe && name == "rt" {
                if *ty != FieldType::Integer {
                    return Err(invalid(p("stream"), "probe streams need an integer rt field"));
                }
                if sim.fields.contains_key("rt") {
                    return Err(invalid(p("fields/rt"), "rt is assigned by the harness"));
                }
                continue;
            }
            if !sim.fields.contains_key(name) {
                return Err(invalid(p("fields"), format!("no generator for field {name:?}")));
            }
        }
        match &sim.output {
            SimOutput::Probe => {
                if probe && schema.field_type("rt").is_none() {
                    return Err(invalid(p("stream"), "probe streams need an integer rt field"));
                }
                if edge.probe.is_none() {
                    return Err(invalid(
                        p("edge"),
                        format!("edge {:?} has no probe configuration", sim.edge),
                    ));
                }
            }
            SimOutput::Publish { topic } => {
                if !atmosphere_core::mqtt::valid_topic_name(topic) {
                    return Err(invalid(p("output/publish/topic"), format!("invalid topic {topic:?}")));
                }
            }
            SimOutput::Sample { agent, sensor, field } => {
                check_sensor(edge, agent, sensor, &p("output/sample"))?;
                if !sim.fields.contains_key(field) {
                    return Err(invalid(
                        p("output/sample/field"),
                        format!("no generator for field {field:?}"),
                    ));
                }
            }
        }
    }
    Ok(())
}

/// Full id of an agent named relative to its edge.
pub fn agent_id(edge: &str, agent: &str) -> String {
    let prefix = format!("{edge}.");
    if agent.starts_with(&prefix) {
        agent.to_string()
    } else {
        format!("{prefix}{agent}")
    }
}

fn check_sensor(edge: &EdgeSpec, agent: &str, sensor: &str, pointer: &str) -> Result<(), ConfigError> {
    let id = agent_id(&edge.id, agent);
    let a = edge
        .agents
        .iter()
        .find(|a| a.id == id)
        .ok_or_else(|| invalid(format!("{pointer}/agent"), format!("unknown agent {id:?}")))?;
    if !a.sensors.iter().any(|s| s == sensor) {
        return Err(invalid(
            format!("{pointer}/sensor"),
            format!("agent {id:?} has no sensor {sensor:?}"),
        ));
    }
    Ok(())
}

fn check_timeline(s: &Scenario) -> Result<(), ConfigError> {
    for (i, entry) in s.timeline.iter().enumerate() {
        let p = |f: &str| format!("/timeline/{i}/{f}");
        let tier = s
            .tier_of(&entry.node)
            .ok_or_else(|| invalid(p("node"), format!("unknown node {:?}", entry.node)))?;
        if entry.count == 0 || (entry.count > 1 && entry.every_ms == 0) {
            return Err(invalid(p("count"), "repeated entries need a positive every_ms"));
        }
        match (&entry.action, tier) {
            (TimelineAction::Sample { agent, sensor, value }, Tier::Edge) => {
                let edge = s.edge(&entry.node).expect("tier checked");
                check_sensor(edge, agent, sensor, &p("action/sample"))?;
                if FieldValue::from_json(value).is_none() {
                    return Err(invalid(p("action/sample/value"), "sample values must be scalars"));
                }
            }
            (TimelineAction::Publish { topic, stream, fields }, Tier::Edge | Tier::User) => {
                if !atmosphere_core::mqtt::valid_topic_name(topic) {
                    return Err(invalid(p("action/publish/topic"), format!("invalid topic {topic:?}")));
                }
                StreamName::new(stream.as_str()).map_err(|e| invalid(p("action/publish/stream"), e))?;
                for (k, v) in fields {
                    if FieldValue::from_json(v).is_none() {
                        return Err(invalid(
                            format!("/timeline/{i}/action/publish/fields/{}", escape(k)),
                            "field values must be scalars",
                        ));
                    }
                }
            }
            (TimelineAction::Source { topic, .. }, Tier::Cloud) => {
                if !atmosphere_core::mqtt::valid_topic_name(topic) {
                    return Err(invalid(p("action/source/topic"), format!("invalid topic {topic:?}")));
                }
            }
            _ => {
                return Err(invalid(
                    p("action"),
                    format!("action does not apply to node {:?}", entry.node),
                ))
            }
        }
    }
    Ok(())
}
