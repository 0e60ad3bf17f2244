//! Rule-driven agents. An agent reacts to sensor samples, messages and
//! timers by evaluating its rules in declaration order and returning the
//! effects of the actions that fired.

mod acl;
mod gateway;
mod guard;
mod host;

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

pub use acl::{frame, AclError, AclMessage, FrameDecoder, Performative, Receivers, BROADCAST, MAX_FRAME};
pub use gateway::{DispatchReport, GatewayError, GatewayRegistry, GATEWAY_SENDER, UNDELIVERABLE};
pub use guard::{BinOp, Expr, GuardError, Scope, VarRef};
pub use host::{AgentHost, HostError};

use crate::event::{Event, FieldValue, Fields, NodeId, StreamName, Timestamp};

/// Stream of messages that carry a replacement rule.
pub const RULE_UPDATE: &str = "RuleUpdate";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Trigger {
    Sensor(String),
    Message(String),
    /// Period in milliseconds.
    Timer(u64),
}

/// Field maps are JSON objects. String values of the form `$value`,
/// `$sender`, `$now`, `$attr.x`, `$state.x` or `$msg.x` are replaced when
/// the action runs; `$$` escapes a literal dollar sign.
pub type FieldMap = BTreeMap<String, Value>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    Broadcast {
        stream: String,
        #[serde(default)]
        fields: FieldMap,
        #[serde(default)]
        performative: Performative,
    },
    Send {
        receivers: Vec<String>,
        stream: String,
        #[serde(default)]
        fields: FieldMap,
        #[serde(default)]
        performative: Performative,
    },
    Actuate {
        actuator: String,
        value: Value,
    },
    PublishFog {
        topic: String,
        stream: String,
        #[serde(default)]
        fields: FieldMap,
    },
    SetState {
        var: String,
        expr: String,
    },
    Log {
        template: String,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rule {
    pub id: String,
    pub trigger: Trigger,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub guard: Option<String>,
    pub actions: Vec<Action>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentSpec {
    pub id: String,
    #[serde(default)]
    pub attributes: BTreeMap<String, FieldValue>,
    #[serde(default)]
    pub state: BTreeMap<String, FieldValue>,
    #[serde(default)]
    pub sensors: Vec<String>,
    /// Actuator names with their initial states.
    #[serde(default)]
    pub actuators: BTreeMap<String, FieldValue>,
    pub rules: Vec<Rule>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AgentError {
    #[error("agent id must not be empty")]
    EmptyId,
    #[error("duplicate rule {0:?}")]
    DuplicateRule(String),
    #[error("rule {0:?} has no actions")]
    NoActions(String),
    #[error("rule {rule:?}: unknown sensor {sensor:?}")]
    UnknownSensor { rule: String, sensor: String },
    #[error("rule {rule:?}: unknown actuator {actuator:?}")]
    UnknownActuator { rule: String, actuator: String },
    #[error("rule {rule:?}: {message}")]
    Invalid { rule: String, message: String },
    #[error("rule {rule:?}: guard: {error}")]
    Guard { rule: String, error: GuardError },
}

/// Something an agent reacts to.
#[derive(Debug, Clone, PartialEq)]
pub enum Stimulus {
    Sensor { name: String, value: FieldValue },
    Message(AclMessage),
    Timer { rule: String },
}

/// Outcome of a step, in the order the actions ran.
#[derive(Debug, Clone, PartialEq)]
pub enum Effect {
    Actuation { actuator: String, value: FieldValue },
    Send(AclMessage),
    FogPublish { topic: String, event: Event },
    StateChange { var: String, value: FieldValue },
    Log(String),
    RuleError { rule: String, message: String },
    RuleReplaced { rule: String },
}

#[derive(Debug, Clone, PartialEq)]
enum ValueExpr {
    Lit(FieldValue),
    Var(VarRef),
}

#[derive(Debug, Clone, PartialEq)]
enum Piece {
    Text(String),
    Var(VarRef),
}

#[derive(Debug, Clone, PartialEq)]
enum Compiled {
    Message {
        to: Receivers,
        stream: StreamName,
        fields: Vec<(String, ValueExpr)>,
        performative: Performative,
    },
    Actuate {
        actuator: String,
        value: ValueExpr,
    },
    PublishFog {
        topic: String,
        stream: StreamName,
        fields: Vec<(String, ValueExpr)>,
    },
    SetState {
        var: String,
        expr: Expr,
    },
    Log(Vec<Piece>),
}

#[derive(Debug, Clone)]
struct CompiledRule {
    rule: Rule,
    guard: Option<Expr>,
    actions: Vec<Compiled>,
}

/// Variables a rule may reference, checked when the rule is loaded.
struct Declared<'a> {
    spec: &'a AgentSpec,
    message: bool,
}

impl Declared<'_> {
    fn check(&self, v: &VarRef) -> Result<(), String> {
        let ok = match v {
            VarRef::Value | VarRef::Now => true,
            VarRef::Sender | VarRef::Msg(_) => self.message,
            VarRef::Attr(n) => self.spec.attributes.contains_key(n),
            VarRef::State(n) => self.spec.state.contains_key(n),
        };
        if ok {
            Ok(())
        } else {
            Err(format!("undeclared variable {v}"))
        }
    }
}

fn value_expr(v: &Value, d: &Declared<'_>) -> Result<ValueExpr, String> {
    if let Value::String(s) = v {
        if let Some(rest) = s.strip_prefix("$$") {
            return Ok(ValueExpr::Lit(FieldValue::String(format!("${rest}"))));
        }
        if let Some(name) = s.strip_prefix('$') {
            let var = VarRef::parse(name).ok_or_else(|| format!("bad variable ${name}"))?;
            d.check(&var)?;
            return Ok(ValueExpr::Var(var));
        }
    }
    FieldValue::from_json(v)
        .map(ValueExpr::Lit)
        .ok_or_else(|| format!("value {v} is not a scalar"))
}

fn field_map(map: &FieldMap, d: &Declared<'_>) -> Result<Vec<(String, ValueExpr)>, String> {
    map.iter()
        .map(|(k, v)| {
            if !crate::event::is_identifier(k) || k.starts_with('_') {
                return Err(format!("bad field name {k:?}"));
            }
            Ok((k.clone(), value_expr(v, d)?))
        })
        .collect()
}

fn template(text: &str, d: &Declared<'_>) -> Result<Vec<Piece>, String> {
    let mut out = Vec::new();
    let mut lit = String::new();
    let mut rest = text;
    while let Some(i) = rest.find('$') {
        lit.push_str(&rest[..i]);
        rest = &rest[i + 1..];
        if let Some(r) = rest.strip_prefix('$') {
            lit.push('$');
            rest = r;
            continue;
        }
        let mut end = rest
            .find(|c: char| !(c.is_ascii_alphanumeric() || c == '_' || c == '.'))
            .unwrap_or(rest.len());
        while end > 0 && rest.as_bytes()[end - 1] == b'.' {
            end -= 1;
        }
        let var = VarRef::parse(&rest[..end]).ok_or_else(|| format!("bad variable ${} in template", &rest[..end]))?;
        d.check(&var)?;
        if !lit.is_empty() {
            out.push(Piece::Text(core::mem::take(&mut lit)));
        }
        out.push(Piece::Var(var));
        rest = &rest[end..];
    }
    lit.push_str(rest);
    if !lit.is_empty() {
        out.push(Piece::Text(lit));
    }
    Ok(out)
}

fn stream(name: &str) -> Result<StreamName, String> {
    StreamName::new(name).map_err(|e| e.to_string())
}

fn compile_rule(spec: &AgentSpec, rule: &Rule) -> Result<CompiledRule, AgentError> {
    let invalid = |message: String| AgentError::Invalid {
        rule: rule.id.clone(),
        message,
    };
    if rule.id.is_empty() {
        return Err(invalid("rule id must not be empty".into()));
    }
    if rule.actions.is_empty() {
        return Err(AgentError::NoActions(rule.id.clone()));
    }
    match &rule.trigger {
        Trigger::Sensor(s) if !spec.sensors.contains(s) => {
            return Err(AgentError::UnknownSensor {
                rule: rule.id.clone(),
                sensor: s.clone(),
            })
        }
        Trigger::Message(s) => {
            stream(s).map_err(invalid)?;
        }
        Trigger::Timer(0) => return Err(invalid("timer period must be positive".into())),
        _ => {}
    }
    let d = Declared {
        spec,
        message: matches!(rule.trigger, Trigger::Message(_)),
    };
    let guard = match &rule.guard {
        None => None,
        Some(text) => {
            let g = Expr::parse(text).map_err(|error| AgentError::Guard {
                rule: rule.id.clone(),
                error,
            })?;
            for v in g.vars() {
                d.check(v).map_err(invalid)?;
            }
            Some(g)
        }
    };
    let mut actions = Vec::new();
    for a in &rule.actions {
        actions.push(match a {
            Action::Broadcast {
                stream: s,
                fields,
                performative,
            } => Compiled::Message {
                to: Receivers::Broadcast,
                stream: stream(s).map_err(invalid)?,
                fields: field_map(fields, &d).map_err(invalid)?,
                performative: *performative,
            },
            Action::Send {
                receivers,
                stream: s,
                fields,
                performative,
            } => {
                if receivers.is_empty() {
                    return Err(invalid("send needs at least one receiver".into()));
                }
                Compiled::Message {
                    to: Receivers::To(receivers.clone()),
                    stream: stream(s).map_err(invalid)?,
                    fields: field_map(fields, &d).map_err(invalid)?,
                    performative: *performative,
                }
            }
            Action::Actuate { actuator, value } => {
                if !spec.actuators.contains_key(actuator) {
                    return Err(AgentError::UnknownActuator {
                        rule: rule.id.clone(),
                        actuator: actuator.clone(),
                    });
                }
                Compiled::Actuate {
                    actuator: actuator.clone(),
                    value: value_expr(value, &d).map_err(invalid)?,
                }
            }
            Action::PublishFog {
                topic,
                stream: s,
                fields,
            } => {
                if !crate::mqtt::valid_topic_name(topic) {
                    return Err(invalid(format!("bad topic {topic:?}")));
                }
                Compiled::PublishFog {
                    topic: topic.clone(),
                    stream: stream(s).map_err(invalid)?,
                    fields: field_map(fields, &d).map_err(invalid)?,
                }
            }
            Action::SetState { var, expr } => {
                if !spec.state.contains_key(var) {
                    return Err(invalid(format!("undeclared state variable {var:?}")));
                }
                let e = Expr::parse(expr).map_err(|e| invalid(e.to_string()))?;
                for v in e.vars() {
                    d.check(v).map_err(invalid)?;
                }
                Compiled::SetState {
                    var: var.clone(),
                    expr: e,
                }
            }
            Action::Log { template: t } => Compiled::Log(template(t, &d).map_err(invalid)?),
        });
    }
    Ok(CompiledRule {
        rule: rule.clone(),
        guard,
        actions,
    })
}

impl AgentSpec {
    /// Checks every rule against the declared sensors, actuators and variables.
    pub fn validate(&self) -> Result<(), AgentError> {
        self.compile().map(|_| ())
    }

    fn compile(&self) -> Result<Vec<CompiledRule>, AgentError> {
        if self.id.is_empty() {
            return Err(AgentError::EmptyId);
        }
        let mut out: Vec<CompiledRule> = Vec::new();
        for r in &self.rules {
            if out.iter().any(|c| c.rule.id == r.id) {
                return Err(AgentError::DuplicateRule(r.id.clone()));
            }
            out.push(compile_rule(self, r)?);
        }
        Ok(out)
    }
}

/// A running agent: its spec, compiled rules, state and actuator states.
#[derive(Debug, Clone)]
pub struct Agent {
    spec: AgentSpec,
    node: NodeId,
    rules: Vec<CompiledRule>,
    state: BTreeMap<String, FieldValue>,
    actuators: BTreeMap<String, FieldValue>,
}

/// Per-step inputs for template and guard evaluation.
struct Ctx<'a> {
    value: FieldValue,
    msg: Option<&'a AclMessage>,
    now: Timestamp,
}

impl Agent {
    /// `node` is the edge node hosting the agent; it becomes the source of
    /// every event the agent creates.
    pub fn new(spec: AgentSpec, node: NodeId) -> Result<Agent, AgentError> {
        let rules = spec.compile()?;
        Ok(Agent {
            state: spec.state.clone(),
            actuators: spec.actuators.clone(),
            spec,
            node,
            rules,
        })
    }

    pub fn id(&self) -> &str {
        &self.spec.id
    }

    pub fn spec(&self) -> &AgentSpec {
        &self.spec
    }

    pub fn node(&self) -> &NodeId {
        &self.node
    }

    pub fn state(&self) -> &BTreeMap<String, FieldValue> {
        &self.state
    }

    pub fn actuators(&self) -> &BTreeMap<String, FieldValue> {
        &self.actuators
    }

    pub fn rules(&self) -> impl Iterator<Item = &Rule> {
        self.rules.iter().map(|r| &r.rule)
    }

    /// Sensors and streams this agent reacts to.
    pub fn listens_to_sensor(&self, name: &str) -> bool {
        self.rules
            .iter()
            .any(|r| r.rule.trigger == Trigger::Sensor(name.into()))
    }

    /// Evaluates every rule triggered by `stimulus`.
    pub fn step(&mut self, stimulus: &Stimulus, now: Timestamp) -> Vec<Effect> {
        let (value, msg) = match stimulus {
            Stimulus::Sensor { value, .. } => (value.clone(), None),
            Stimulus::Message(m) => {
                if m.content.stream.as_str() == RULE_UPDATE {
                    return self.update_rule(m);
                }
                let v = m.content.field("value").cloned().unwrap_or(FieldValue::Null);
                (v, Some(m))
            }
            Stimulus::Timer { .. } => (FieldValue::Integer(now as i64), None),
        };
        let ctx = Ctx { value, msg, now };
        let mut effects = Vec::new();
        for i in 0..self.rules.len() {
            let fires = match (&self.rules[i].rule.trigger, stimulus) {
                (Trigger::Sensor(s), Stimulus::Sensor { name, .. }) => s == name,
                (Trigger::Message(s), Stimulus::Message(m)) => m.content.stream == **s,
                (Trigger::Timer(_), Stimulus::Timer { rule }) => self.rules[i].rule.id == *rule,
                _ => false,
            };
            if fires {
                self.run_rule(i, &ctx, &mut effects);
            }
        }
        effects
    }

    fn scope<'a>(&'a self, ctx: &'a Ctx<'a>) -> Scope<'a> {
        Scope {
            value: &ctx.value,
            sender: ctx.msg.map(|m| m.sender.as_str()),
            now: ctx.now,
            attrs: &self.spec.attributes,
            state: &self.state,
            msg: ctx.msg.map(|m| &m.content),
        }
    }

    fn run_rule(&mut self, i: usize, ctx: &Ctx<'_>, effects: &mut Vec<Effect>) {
        let rule_id = self.rules[i].rule.id.clone();
        let fail = |message: String| Effect::RuleError {
            rule: rule_id.clone(),
            message,
        };
        if let Some(g) = &self.rules[i].guard {
            match g.test(&self.scope(ctx)) {
                Ok(true) => {}
                Ok(false) => return,
                Err(e) => {
                    effects.push(fail(format!("guard: {e}")));
                    return;
                }
            }
        }
        for a in 0..self.rules[i].actions.len() {
            match self.run_action(i, a, ctx) {
                Ok(e) => effects.push(e),
                Err(e) => {
                    effects.push(fail(e.to_string()));
                    return;
                }
            }
        }
    }

    fn resolve(&self, v: &ValueExpr, ctx: &Ctx<'_>) -> Result<FieldValue, GuardError> {
        match v {
            ValueExpr::Lit(v) => Ok(v.clone()),
            ValueExpr::Var(r) => self.scope(ctx).lookup(r),
        }
    }

    fn fields(&self, map: &[(String, ValueExpr)], ctx: &Ctx<'_>) -> Result<Fields, GuardError> {
        map.iter()
            .map(|(k, v)| Ok((k.clone(), self.resolve(v, ctx)?)))
            .collect()
    }

    fn run_action(&mut self, i: usize, a: usize, ctx: &Ctx<'_>) -> Result<Effect, GuardError> {
        let effect = match &self.rules[i].actions[a] {
            Compiled::Message {
                to,
                stream,
                fields,
                performative,
            } => Effect::Send(AclMessage {
                performative: *performative,
                sender: self.spec.id.clone(),
                receivers: to.clone(),
                content: Event::new(stream.clone(), self.fields(fields, ctx)?, ctx.now, self.node.clone()),
                sent_at: ctx.now,
            }),
            Compiled::Actuate { actuator, value } => Effect::Actuation {
                actuator: actuator.clone(),
                value: self.resolve(value, ctx)?,
            },
            Compiled::PublishFog { topic, stream, fields } => Effect::FogPublish {
                topic: topic.clone(),
                event: Event::new(stream.clone(), self.fields(fields, ctx)?, ctx.now, self.node.clone()),
            },
            Compiled::SetState { var, expr } => Effect::StateChange {
                var: var.clone(),
                value: expr.eval(&self.scope(ctx))?,
            },
            Compiled::Log(pieces) => {
                let mut line = String::new();
                for p in pieces {
                    match p {
                        Piece::Text(t) => line.push_str(t),
                        Piece::Var(v) => line.push_str(&self.scope(ctx).lookup(v)?.to_string()),
                    }
                }
                Effect::Log(line)
            }
        };
        // Later actions of the same rule observe earlier state changes.
        match &effect {
            Effect::Actuation { actuator, value } => {
                self.actuators.insert(actuator.clone(), value.clone());
            }
            Effect::StateChange { var, value } => {
                self.state.insert(var.clone(), value.clone());
            }
            _ => {}
        }
        Ok(effect)
    }

    /// Replaces the rule with the same id, or appends a new one. The message
    /// carries the rule as a JSON string in field `rule`; an `agent` field,
    /// when present, restricts the update to that agent.
    fn update_rule(&mut self, m: &AclMessage) -> Vec<Effect> {
        if let Some(FieldValue::String(target)) = m.content.field("agent") {
            if *target != self.spec.id {
                return Vec::new();
            }
        }
        let error = |message: String| {
            alloc::vec![Effect::RuleError {
                rule: RULE_UPDATE.into(),
                message,
            }]
        };
        let Some(FieldValue::String(text)) = m.content.field("rule") else {
            return error("update carries no rule".into());
        };
        let rule: Rule = match serde_json::from_str(text) {
            Ok(r) => r,
            Err(e) => return error(e.to_string()),
        };
        let compiled = match compile_rule(&self.spec, &rule) {
            Ok(c) => c,
            Err(e) => return error(e.to_string()),
        };
        match self.spec.rules.iter().position(|r| r.id == rule.id) {
            Some(p) => {
                self.spec.rules[p] = rule.clone();
                self.rules[p] = compiled;
            }
            None => {
                self.spec.rules.push(rule.clone());
                self.rules.push(compiled);
            }
        }
        alloc::vec![Effect::RuleReplaced { rule: rule.id }]
    }
}
