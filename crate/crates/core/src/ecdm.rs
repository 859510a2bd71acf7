//! Emergency context construction.
//!
//! Observations activate emergency states through threshold rules, states
//! map to episode labels through a bipartite relevance model, and the
//! resulting label set is the disclosure scope handed to the token
//! authority. Nothing here reads consent state.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::ids::string_id;
use crate::model::{Label, UserId};
use crate::Timestamp;

string_id!(EmergencyState, "emergency state");

/// The shipped relevance model. Thresholds are illustrative.
pub const DEFAULT_RELEVANCE_CONFIG: &str = include_str!("../config/relevance.conf");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Measurement {
    pub value: f64,
    pub unit: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BioObservationSet {
    metrics: BTreeMap<String, Measurement>,
    pub captured_at: Timestamp,
    pub device_id: String,
}

impl BioObservationSet {
    pub fn new(captured_at: Timestamp, device_id: impl Into<String>) -> Self {
        Self {
            metrics: BTreeMap::new(),
            captured_at,
            device_id: device_id.into(),
        }
    }

    pub fn insert(
        &mut self,
        metric: impl Into<String>,
        value: f64,
        unit: impl Into<String>,
    ) -> Result<(), EcdmError> {
        let metric = metric.into();
        if !value.is_finite() {
            return Err(EcdmError::NonFinite(metric));
        }
        self.metrics.insert(
            metric,
            Measurement {
                value,
                unit: unit.into(),
            },
        );
        Ok(())
    }

    pub fn with(mut self, metric: &str, value: f64, unit: &str) -> Result<Self, EcdmError> {
        self.insert(metric, value, unit)?;
        Ok(self)
    }

    pub fn get(&self, metric: &str) -> Option<f64> {
        self.metrics.get(metric).map(|m| m.value)
    }

    pub fn metrics(&self) -> impl Iterator<Item = (&str, &Measurement)> {
        self.metrics.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// `name=value` lines in metric order, then `captured_at` and
    /// `device_id`. Values use the shortest round-trip decimal form.
    pub fn canonical_bytes(&self) -> Vec<u8> {
        let mut out = String::new();
        for (name, m) in &self.metrics {
            out.push_str(&format!("{name}={}\n", m.value));
        }
        out.push_str(&format!("captured_at={}\n", self.captured_at));
        out.push_str(&format!("device_id={}\n", self.device_id));
        out.into_bytes()
    }

    /// SHA-256 of [`canonical_bytes`](Self::canonical_bytes).
    pub fn digest(&self) -> [u8; 32] {
        Sha256::digest(self.canonical_bytes()).into()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CmpOp {
    Lt,
    Le,
    Gt,
    Ge,
}

impl CmpOp {
    pub fn apply(self, lhs: f64, rhs: f64) -> bool {
        match self {
            CmpOp::Lt => lhs < rhs,
            CmpOp::Le => lhs <= rhs,
            CmpOp::Gt => lhs > rhs,
            CmpOp::Ge => lhs >= rhs,
        }
    }

    fn symbol(self) -> &'static str {
        match self {
            CmpOp::Lt => "<",
            CmpOp::Le => "<=",
            CmpOp::Gt => ">",
            CmpOp::Ge => ">=",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ActivationRule {
    Cmp {
        metric: String,
        op: CmpOp,
        value: f64,
    },
    And(Box<ActivationRule>, Box<ActivationRule>),
    Or(Box<ActivationRule>, Box<ActivationRule>),
}

impl ActivationRule {
    pub fn cmp(metric: &str, op: CmpOp, value: f64) -> Self {
        ActivationRule::Cmp {
            metric: metric.to_owned(),
            op,
            value,
        }
    }

    pub fn and(self, other: ActivationRule) -> Self {
        ActivationRule::And(Box::new(self), Box::new(other))
    }

    pub fn or(self, other: ActivationRule) -> Self {
        ActivationRule::Or(Box::new(self), Box::new(other))
    }

    /// False whenever any metric the rule mentions is missing.
    pub fn eval(&self, obs: &BioObservationSet) -> bool {
        let mut missing = false;
        let result = self.eval_inner(obs, &mut missing);
        result && !missing
    }

    fn eval_inner(&self, obs: &BioObservationSet, missing: &mut bool) -> bool {
        match self {
            ActivationRule::Cmp { metric, op, value } => match obs.get(metric) {
                Some(v) => op.apply(v, *value),
                None => {
                    *missing = true;
                    false
                }
            },
            // Both sides are always evaluated so missing metrics are noticed.
            ActivationRule::And(a, b) => {
                let (x, y) = (a.eval_inner(obs, missing), b.eval_inner(obs, missing));
                x && y
            }
            ActivationRule::Or(a, b) => {
                let (x, y) = (a.eval_inner(obs, missing), b.eval_inner(obs, missing));
                x || y
            }
        }
    }

    /// Every (metric, op, constant) comparison in the rule.
    pub fn comparisons(&self) -> Vec<(&str, CmpOp, f64)> {
        match self {
            ActivationRule::Cmp { metric, op, value } => vec![(metric, *op, *value)],
            ActivationRule::And(a, b) | ActivationRule::Or(a, b) => {
                let mut v = a.comparisons();
                v.extend(b.comparisons());
                v
            }
        }
    }

    pub fn metrics(&self) -> BTreeSet<&str> {
        self.comparisons().into_iter().map(|(m, _, _)| m).collect()
    }

    pub fn parse(text: &str) -> Result<Self, RuleParseError> {
        let tokens = tokenize(text)?;
        let mut p = RuleParser { tokens, pos: 0 };
        let rule = p.or_expr()?;
        match p.tokens.get(p.pos) {
            None => Ok(rule),
            Some(t) => Err(RuleParseError(format!("unexpected {t:?} after rule"))),
        }
    }
}

impl fmt::Display for ActivationRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ActivationRule::Cmp { metric, op, value } => {
                write!(f, "{metric} {} {value}", op.symbol())
            }
            ActivationRule::And(a, b) => write!(f, "({a} and {b})"),
            ActivationRule::Or(a, b) => write!(f, "({a} or {b})"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("invalid rule: {0}")]
pub struct RuleParseError(String);

#[derive(Debug, Clone, PartialEq)]
enum Token {
    Ident(String),
    Num(f64),
    Op(CmpOp),
    And,
    Or,
    Open,
    Close,
}

fn tokenize(text: &str) -> Result<Vec<Token>, RuleParseError> {
    let mut out = Vec::new();
    let mut chars = text.char_indices().peekable();
    while let Some(&(i, c)) = chars.peek() {
        match c {
            c if c.is_whitespace() => {
                chars.next();
            }
            '(' | ')' => {
                chars.next();
                out.push(if c == '(' { Token::Open } else { Token::Close });
            }
            '<' | '>' => {
                chars.next();
                let eq = chars.next_if(|&(_, c)| c == '=').is_some();
                out.push(Token::Op(match (c, eq) {
                    ('<', false) => CmpOp::Lt,
                    ('<', true) => CmpOp::Le,
                    ('>', false) => CmpOp::Gt,
                    _ => CmpOp::Ge,
                }));
            }
            c if c.is_ascii_digit() || c == '-' || c == '.' => {
                let mut end = i;
                while let Some(&(j, c)) = chars.peek() {
                    if c.is_ascii_digit() || c == '.' || c == '-' || c == 'e' || c == 'E' {
                        end = j + c.len_utf8();
                        chars.next();
                    } else {
                        break;
                    }
                }
                let lit = &text[i..end];
                let v: f64 = lit
                    .parse()
                    .map_err(|_| RuleParseError(format!("bad number {lit:?}")))?;
                if !v.is_finite() {
                    return Err(RuleParseError(format!("non-finite number {lit:?}")));
                }
                out.push(Token::Num(v));
            }
            c if c.is_alphabetic() || c == '_' => {
                let mut end = i;
                while let Some(&(j, c)) = chars.peek() {
                    if c.is_alphanumeric() || c == '_' {
                        end = j + c.len_utf8();
                        chars.next();
                    } else {
                        break;
                    }
                }
                out.push(match &text[i..end] {
                    "and" => Token::And,
                    "or" => Token::Or,
                    word => Token::Ident(word.to_owned()),
                });
            }
            other => return Err(RuleParseError(format!("unexpected character {other:?}"))),
        }
    }
    Ok(out)
}

struct RuleParser {
    tokens: Vec<Token>,
    pos: usize,
}

impl RuleParser {
    fn next(&mut self) -> Option<Token> {
        let t = self.tokens.get(self.pos).cloned();
        self.pos += 1;
        t
    }

    fn eat(&mut self, tok: &Token) -> bool {
        if self.tokens.get(self.pos) == Some(tok) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn or_expr(&mut self) -> Result<ActivationRule, RuleParseError> {
        let mut rule = self.and_expr()?;
        while self.eat(&Token::Or) {
            rule = rule.or(self.and_expr()?);
        }
        Ok(rule)
    }

    fn and_expr(&mut self) -> Result<ActivationRule, RuleParseError> {
        let mut rule = self.atom()?;
        while self.eat(&Token::And) {
            rule = rule.and(self.atom()?);
        }
        Ok(rule)
    }

    fn atom(&mut self) -> Result<ActivationRule, RuleParseError> {
        match self.next() {
            Some(Token::Open) => {
                let rule = self.or_expr()?;
                if !self.eat(&Token::Close) {
                    return Err(RuleParseError("missing `)`".into()));
                }
                Ok(rule)
            }
            Some(Token::Ident(metric)) => match (self.next(), self.next()) {
                (Some(Token::Op(op)), Some(Token::Num(value))) => Ok(ActivationRule::Cmp {
                    metric,
                    op,
                    value,
                }),
                _ => Err(RuleParseError(format!(
                    "expected `{metric} <op> <number>`"
                ))),
            },
            other => Err(RuleParseError(format!("expected comparison, found {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EcdmError {
    #[error("unknown emergency state {0}")]
    UnknownState(EmergencyState),
    #[error("unknown label {0}")]
    UnknownLabel(Label),
    #[error("observations activate no emergency scope")]
    EmptyScope,
    #[error("biometric reference {0:?} does not resolve to the claimed patient")]
    UnresolvedPatient(String),
    #[error("metric {0} is not a finite number")]
    NonFinite(String),
    #[error("state {0} is declared twice")]
    DuplicateState(EmergencyState),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("relevance config line {line}: {message}")]
pub struct ConfigError {
    pub line: usize,
    pub message: String,
}

/// Bipartite state → label relevance structure with one activation rule
/// per state.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RelevanceModel {
    rules: BTreeMap<EmergencyState, ActivationRule>,
    labels: BTreeSet<Label>,
    adjacency: BTreeMap<EmergencyState, BTreeSet<Label>>,
}

impl RelevanceModel {
    pub fn new() -> Self {
        Self::default()
    }

    /// The shipped default model.
    pub fn default_model() -> Self {
        Self::parse(DEFAULT_RELEVANCE_CONFIG).expect("shipped relevance config parses")
    }

    pub fn add_state(&mut self, state: EmergencyState, rule: ActivationRule) -> Result<(), EcdmError> {
        if self.rules.contains_key(&state) {
            return Err(EcdmError::DuplicateState(state));
        }
        self.adjacency.entry(state.clone()).or_default();
        self.rules.insert(state, rule);
        Ok(())
    }

    pub fn add_label(&mut self, label: Label) {
        self.labels.insert(label);
    }

    pub fn add_edge(&mut self, state: &EmergencyState, label: &Label) -> Result<(), EcdmError> {
        if !self.labels.contains(label) {
            return Err(EcdmError::UnknownLabel(label.clone()));
        }
        self.adjacency
            .get_mut(state)
            .ok_or_else(|| EcdmError::UnknownState(state.clone()))?
            .insert(label.clone());
        Ok(())
    }

    pub fn states(&self) -> impl Iterator<Item = &EmergencyState> {
        self.rules.keys()
    }

    pub fn labels(&self) -> &BTreeSet<Label> {
        &self.labels
    }

    pub fn rule(&self, state: &EmergencyState) -> Option<&ActivationRule> {
        self.rules.get(state)
    }

    pub fn edges(&self) -> impl Iterator<Item = (&EmergencyState, &Label)> {
        self.adjacency
            .iter()
            .flat_map(|(s, ls)| ls.iter().map(move |l| (s, l)))
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        #[derive(PartialEq)]
        enum Section {
            None,
            States,
            Labels,
            Edges,
        }
        let mut g = RelevanceModel::new();
        let mut section = Section::None;
        let mut edges = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let err = |message: String| ConfigError {
                line: line_no,
                message,
            };
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            match line {
                "[states]" => section = Section::States,
                "[labels]" => section = Section::Labels,
                "[edges]" => section = Section::Edges,
                _ => match section {
                    Section::None => return Err(err("content before first section".into())),
                    Section::States => {
                        let (name, rule) = line
                            .split_once(':')
                            .ok_or_else(|| err("expected `state: rule`".into()))?;
                        let state = EmergencyState::new(name.trim()).map_err(|e| err(e.to_string()))?;
                        let rule = ActivationRule::parse(rule).map_err(|e| err(e.to_string()))?;
                        g.add_state(state, rule).map_err(|e| err(e.to_string()))?;
                    }
                    Section::Labels => {
                        g.add_label(Label::new(line).map_err(|e| err(e.to_string()))?);
                    }
                    Section::Edges => {
                        let (s, l) = line
                            .split_once("->")
                            .ok_or_else(|| err("expected `state -> label`".into()))?;
                        let s = EmergencyState::new(s.trim()).map_err(|e| err(e.to_string()))?;
                        let l = Label::new(l.trim()).map_err(|e| err(e.to_string()))?;
                        edges.push((line_no, s, l));
                    }
                },
            }
        }
        // Edges may precede the sections that declare their endpoints.
        for (line, s, l) in edges {
            g.add_edge(&s, &l).map_err(|e| ConfigError {
                line,
                message: e.to_string(),
            })?;
        }
        Ok(g)
    }

    pub fn to_config_string(&self) -> String {
        let mut out = String::from("[states]\n");
        for (s, r) in &self.rules {
            out.push_str(&format!("{s}: {r}\n"));
        }
        out.push_str("\n[labels]\n");
        for l in &self.labels {
            out.push_str(&format!("{l}\n"));
        }
        out.push_str("\n[edges]\n");
        for (s, l) in self.edges() {
            out.push_str(&format!("{s} -> {l}\n"));
        }
        out
    }
}

/// Whether `state`'s activation rule holds for `obs`.
pub fn em_state_act(
    state: &EmergencyState,
    obs: &BioObservationSet,
    g: &RelevanceModel,
) -> Result<bool, EcdmError> {
    g.rule(state)
        .map(|r| r.eval(obs))
        .ok_or_else(|| EcdmError::UnknownState(state.clone()))
}

/// Emergency state determination: every state whose rule holds.
pub fn esd(obs: &BioObservationSet, g: &RelevanceModel) -> BTreeSet<EmergencyState> {
    g.rules
        .iter()
        .filter(|(_, r)| r.eval(obs))
        .map(|(s, _)| s.clone())
        .collect()
}

/// Union of the labels adjacent to `states`.
pub fn derive_scope(
    states: &BTreeSet<EmergencyState>,
    g: &RelevanceModel,
) -> Result<BTreeSet<Label>, EcdmError> {
    let mut scope = BTreeSet::new();
    for s in states {
        let labels = g
            .adjacency
            .get(s)
            .ok_or_else(|| EcdmError::UnknownState(s.clone()))?;
        scope.extend(labels.iter().cloned());
    }
    Ok(scope)
}

/// Observation-driven disclosure scope.
pub fn edcf(obs: &BioObservationSet, g: &RelevanceModel) -> BTreeSet<Label> {
    derive_scope(&esd(obs, g), g).expect("esd only yields declared states")
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PatientClaim {
    pub biometric_ref: String,
    pub patient: UserId,
}

/// Stand-in for a biometric identity service. Explicit entries win;
/// otherwise `bio:<user>` resolves to `<user>`.
#[derive(Debug, Clone, Default)]
pub struct BiometricRegistry {
    entries: HashMap<String, UserId>,
}

impl BiometricRegistry {
    pub fn stub() -> Self {
        Self::default()
    }

    pub fn enroll(&mut self, biometric_ref: impl Into<String>, patient: UserId) {
        self.entries.insert(biometric_ref.into(), patient);
    }

    pub fn resolve(&self, biometric_ref: &str) -> Option<UserId> {
        self.entries.get(biometric_ref).cloned().or_else(|| {
            biometric_ref
                .strip_prefix("bio:")
                .and_then(|u| UserId::new(u).ok())
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmergencyContext {
    pub requester: UserId,
    pub patient_claim: PatientClaim,
    pub states: BTreeSet<EmergencyState>,
    pub scope: BTreeSet<Label>,
    pub ts: Timestamp,
    pub obs_digest: [u8; 32],
}

impl EmergencyContext {
    pub fn patient(&self) -> &UserId {
        &self.patient_claim.patient
    }
}

pub fn build_context(
    requester: UserId,
    claim: PatientClaim,
    registry: &BiometricRegistry,
    obs: &BioObservationSet,
    g: &RelevanceModel,
    ts: Timestamp,
) -> Result<EmergencyContext, EcdmError> {
    if registry.resolve(&claim.biometric_ref).as_ref() != Some(&claim.patient) {
        return Err(EcdmError::UnresolvedPatient(claim.biometric_ref));
    }
    let states = esd(obs, g);
    let scope = derive_scope(&states, g)?;
    if scope.is_empty() {
        return Err(EcdmError::EmptyScope);
    }
    Ok(EmergencyContext {
        requester,
        patient_claim: claim,
        states,
        scope,
        ts,
        obs_digest: obs.digest(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn st(s: &str) -> EmergencyState {
        EmergencyState::new(s).unwrap()
    }

    fn lb(s: &str) -> Label {
        Label::new(s).unwrap()
    }

    fn obs(pairs: &[(&str, f64)]) -> BioObservationSet {
        let mut o = BioObservationSet::new(1000, "dev-1");
        for (k, v) in pairs {
            o.insert(*k, *v, "u").unwrap();
        }
        o
    }

    #[test]
    fn hypoxia_rule() {
        let g = RelevanceModel::default_model();
        assert!(em_state_act(&st("Hypoxia"), &obs(&[("spo2", 85.0)]), &g).unwrap());
        assert!(!em_state_act(&st("Hypoxia"), &obs(&[("spo2", 90.0)]), &g).unwrap());
        assert!(!em_state_act(&st("Hypoxia"), &obs(&[("heartRate", 85.0)]), &g).unwrap());
        assert!(matches!(
            em_state_act(&st("Sunburn"), &obs(&[]), &g),
            Err(EcdmError::UnknownState(_))
        ));
    }

    #[test]
    fn missing_metric_falsifies_disjunction() {
        let rule = ActivationRule::parse("spo2 < 90 or glucose < 70").unwrap();
        assert!(!rule.eval(&obs(&[("spo2", 80.0)])));
        assert!(rule.eval(&obs(&[("spo2", 80.0), ("glucose", 100.0)])));
    }

    #[test]
    fn rule_grammar() {
        let r = ActivationRule::parse("a < 1 or b >= 2 and c <= -3.5").unwrap();
        assert_eq!(
            r,
            ActivationRule::cmp("a", CmpOp::Lt, 1.0)
                .or(ActivationRule::cmp("b", CmpOp::Ge, 2.0).and(ActivationRule::cmp("c", CmpOp::Le, -3.5)))
        );
        let p = ActivationRule::parse("(a < 1 or b > 2) and c > 0").unwrap();
        assert!(matches!(p, ActivationRule::And(..)));
        assert_eq!(ActivationRule::parse(&p.to_string()).unwrap(), p);
        for bad in ["", "a <", "a < b", "(a < 1", "a < 1 b", "a = 1", "a < inf"] {
            assert!(ActivationRule::parse(bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn esd_matches_per_state_evaluation() {
        let g = RelevanceModel::default_model();
        let o = obs(&[("spo2", 80.0), ("heartRate", 20.0), ("systolicBP", 50.0)]);
        let got = esd(&o, &g);
        assert_eq!(got, [st("CardiacArrest"), st("Hypoxia")].into());
        let healthy = obs(&[("spo2", 98.0), ("heartRate", 70.0), ("systolicBP", 120.0)]);
        assert!(esd(&healthy, &g).is_empty());
        assert!(edcf(&healthy, &g).is_empty());
    }

    #[test]
    fn scope_derivation() {
        let g = RelevanceModel::default_model();
        assert_eq!(
            derive_scope(&[st("Hypoxia")].into(), &g).unwrap(),
            [lb("Respiratory"), lb("Cardiology")].into()
        );
        assert!(derive_scope(&BTreeSet::new(), &g).unwrap().is_empty());
        assert!(derive_scope(&[st("Nope")].into(), &g).is_err());
    }

    #[test]
    fn default_config_round_trips() {
        let g = RelevanceModel::default_model();
        assert_eq!(g.states().count(), 6);
        assert_eq!(g.labels().len(), 14);
        assert_eq!(g.edges().count(), 15);
        assert_eq!(RelevanceModel::parse(&g.to_config_string()).unwrap(), g);
    }

    #[test]
    fn config_errors_carry_line_numbers() {
        let bad = "[states]\nA: x < 1\n[labels]\nL\n[edges]\nA -> M\n";
        assert_eq!(RelevanceModel::parse(bad).unwrap_err().line, 6);
        let dup = "[states]\nA: x < 1\nA: x > 1\n";
        assert_eq!(RelevanceModel::parse(dup).unwrap_err().line, 3);
        assert!(RelevanceModel::parse("A: x < 1").is_err());
    }

    #[test]
    fn context_construction() {
        let g = RelevanceModel::default_model();
        let reg = BiometricRegistry::stub();
        let claim = PatientClaim {
            biometric_ref: "bio:pt1".into(),
            patient: UserId::new("pt1").unwrap(),
        };
        let hypoxic = obs(&[("spo2", 85.0)]);
        let ctx = build_context(UserId::new("hp1").unwrap(), claim.clone(), &reg, &hypoxic, &g, 5).unwrap();
        assert_eq!(ctx.scope, [lb("Respiratory"), lb("Cardiology")].into());
        assert_eq!(ctx.obs_digest, hypoxic.digest());

        let healthy = obs(&[("spo2", 99.0)]);
        assert_eq!(
            build_context(UserId::new("hp1").unwrap(), claim.clone(), &reg, &healthy, &g, 5),
            Err(EcdmError::EmptyScope)
        );
        let wrong = PatientClaim { biometric_ref: "bio:pt2".into(), ..claim };
        assert!(matches!(
            build_context(UserId::new("hp1").unwrap(), wrong, &reg, &hypoxic, &g, 5),
            Err(EcdmError::UnresolvedPatient(_))
        ));
    }

    #[test]
    fn digest_ignores_insertion_order() {
        let a = obs(&[("spo2", 85.0), ("heartRate", 130.5)]);
        let b = obs(&[("heartRate", 130.5), ("spo2", 85.0)]);
        assert_eq!(a.digest(), b.digest());
        assert_eq!(
            String::from_utf8(a.canonical_bytes()).unwrap(),
            "heartRate=130.5\nspo2=85\ncaptured_at=1000\ndevice_id=dev-1\n"
        );
        let c = obs(&[("spo2", 85.0), ("heartRate", 130.25)]);
        assert_ne!(a.digest(), c.digest());
    }

    #[test]
    fn non_finite_values_rejected() {
        let mut o = BioObservationSet::new(0, "d");
        assert!(o.insert("spo2", f64::NAN, "%").is_err());
        assert!(o.insert("spo2", f64::INFINITY, "%").is_err());
    }

    fn random_model() -> impl Strategy<Value = (RelevanceModel, Vec<(usize, usize)>)> {
        (1usize..=8, 1usize..=12).prop_flat_map(|(ns, nl)| {
            (
                Just((ns, nl)),
                proptest::collection::vec((0..ns, 0..nl), 0..40),
            )
                .prop_map(|((ns, nl), edges)| {
                    let mut g = RelevanceModel::new();
                    for s in 0..ns {
                        g.add_state(st(&format!("S{s}")), ActivationRule::cmp(&format!("m{s}"), CmpOp::Gt, 0.0))
                            .unwrap();
                    }
                    for l in 0..nl {
                        g.add_label(lb(&format!("L{l}")));
                    }
                    for &(s, l) in &edges {
                        g.add_edge(&st(&format!("S{s}")), &lb(&format!("L{l}"))).unwrap();
                    }
                    (g, edges)
                })
        })
    }

    proptest! {
        #[test]
        fn derive_scope_matches_edge_scan((g, edges) in random_model(), picks in proptest::collection::vec(0usize..8, 0..8)) {
            let ns = g.states().count();
            let states: BTreeSet<EmergencyState> = picks.iter().filter(|&&p| p < ns).map(|p| st(&format!("S{p}"))).collect();
            let mut oracle = BTreeSet::new();
            for s in &states {
                for l in g.labels() {
                    let idx_s: usize = s.as_str()[1..].parse().unwrap();
                    let idx_l: usize = l.as_str()[1..].parse().unwrap();
                    if edges.contains(&(idx_s, idx_l)) {
                        oracle.insert(l.clone());
                    }
                }
            }
            prop_assert_eq!(derive_scope(&states, &g).unwrap(), oracle);
        }

        #[test]
        fn scope_is_monotone_in_states((g, _) in random_model(), a in proptest::collection::vec(0usize..8, 0..8), b in proptest::collection::vec(0usize..8, 0..8)) {
            let ns = g.states().count();
            let small: BTreeSet<EmergencyState> = a.iter().filter(|&&p| p < ns).map(|p| st(&format!("S{p}"))).collect();
            let mut big = small.clone();
            big.extend(b.iter().filter(|&&p| p < ns).map(|p| st(&format!("S{p}"))));
            let s1 = derive_scope(&small, &g).unwrap();
            let s2 = derive_scope(&big, &g).unwrap();
            prop_assert!(s1.is_subset(&s2));
        }

        #[test]
        fn esd_matches_brute_force(values in proptest::collection::vec(proptest::option::of(0.0f64..200.0), 7)) {
            let g = RelevanceModel::default_model();
            let names = ["spo2", "heartRate", "systolicBP", "respRate", "nihss", "glucose", "temp"];
            let mut o = BioObservationSet::new(0, "d");
            for (n, v) in names.iter().zip(&values) {
                if let Some(v) = v {
                    o.insert(*n, *v, "u").unwrap();
                }
            }
            let oracle: BTreeSet<EmergencyState> = g
                .states()
                .filter(|s| em_state_act(s, &o, &g).unwrap())
                .cloned()
                .collect();
            prop_assert_eq!(esd(&o, &g), oracle.clone());
            prop_assert_eq!(edcf(&o, &g), edcf(&o, &g));
        }
    }
}
