//! Request-time decision engine over a validated repository.
//!
//! Evaluation has two layers. The invariant layer permits authors and
//! subjects outright; the consent layer permits when an Active, in-window
//! Permit of the requester covers the target. Anything else is denied.

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::consent::{ConsentDirective, ConsentRepository, Effect};
use crate::model::{DataModel, DirectiveId, ModelError, RecordId, Role, Target, UserId};
use crate::Timestamp;

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct StandardRequest {
    pub requester: UserId,
    pub requester_role: Role,
    /// Informational; the subject is always derived from the target.
    pub patient: UserId,
    pub target: Target,
    pub ts: Timestamp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Outcome {
    Permit,
    Deny,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Basis {
    InvariantAuthor,
    InvariantSubject,
    ConsentPermit,
    /// An explicit Deny won combining. Only the lazy baseline produces this.
    ConsentDeny,
    DefaultDeny,
}

impl Outcome {
    pub fn as_str(self) -> &'static str {
        match self {
            Outcome::Permit => "permit",
            Outcome::Deny => "deny",
        }
    }
}

impl Basis {
    pub fn as_str(self) -> &'static str {
        match self {
            Basis::InvariantAuthor => "invariant_author",
            Basis::InvariantSubject => "invariant_subject",
            Basis::ConsentPermit => "consent_permit",
            Basis::ConsentDeny => "consent_deny",
            Basis::DefaultDeny => "default_deny",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Decision {
    pub outcome: Outcome,
    pub basis: Basis,
    pub witness: Option<DirectiveId>,
}

impl Decision {
    pub fn permit(basis: Basis, witness: Option<DirectiveId>) -> Self {
        Self {
            outcome: Outcome::Permit,
            basis,
            witness,
        }
    }

    pub fn default_deny() -> Self {
        Self {
            outcome: Outcome::Deny,
            basis: Basis::DefaultDeny,
            witness: None,
        }
    }

    pub fn is_permit(&self) -> bool {
        self.outcome == Outcome::Permit
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RoleGateError {
    #[error("category {0:?} would have no allowed roles")]
    Empty(String),
}

/// Roles allowed to exercise the invariants, per record category.
/// Categories without an entry allow both roles.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct RoleGate {
    allowed: HashMap<String, BTreeSet<Role>>,
}

impl RoleGate {
    pub fn permissive() -> Self {
        Self::default()
    }

    pub fn set(
        &mut self,
        category: impl Into<String>,
        roles: BTreeSet<Role>,
    ) -> Result<(), RoleGateError> {
        let category = category.into();
        if roles.is_empty() {
            return Err(RoleGateError::Empty(category));
        }
        self.allowed.insert(category, roles);
        Ok(())
    }

    pub fn allows(&self, category: &str, role: Role) -> bool {
        self.allowed
            .get(category)
            .is_none_or(|roles| roles.contains(&role))
    }
}

/// Work counters, accumulated across requests.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct EvalStats {
    pub requests: u64,
    /// Directives examined by the consent layer.
    pub directives_scanned: u64,
    /// Requests where an applicable Permit and an applicable Deny were both
    /// in force.
    pub opposing_applicable: u64,
}

impl EvalStats {
    pub fn mean_scanned(&self) -> f64 {
        if self.requests == 0 {
            0.0
        } else {
            self.directives_scanned as f64 / self.requests as f64
        }
    }
}

/// Invariant layer. Never denies.
pub fn decide_auth(
    req: &StandardRequest,
    model: &DataModel,
    gate: &RoleGate,
) -> Result<Option<Decision>, ModelError> {
    let episode = model.target_episode(&req.target)?;
    let role_ok = match &req.target {
        Target::Record(r) => {
            let rec = model.record(r).ok_or_else(|| ModelError::UnknownRecord(r.clone()))?;
            gate.allows(&rec.kind, req.requester_role)
        }
        Target::Episode(e) => model.records_in(e).iter().all(|r| {
            model
                .record(r)
                .is_some_and(|rec| gate.allows(&rec.kind, req.requester_role))
        }),
    };
    if !role_ok {
        return Ok(None);
    }
    Ok(if req.requester == episode.creator {
        Some(Decision::permit(Basis::InvariantAuthor, None))
    } else if req.requester == episode.patient {
        Some(Decision::permit(Basis::InvariantSubject, None))
    } else {
        None
    })
}

/// Consent layer: scans the requester's Active directives once.
///
/// A record is covered by an in-window Permit on the record or on its
/// episode. An episode target needs every member record covered; an
/// episode-level Permit covers them all, and is the only way to cover an
/// episode with no records. The witness is the earliest-committed covering
/// Permit; an episode granted record by record reports its first record's.
pub fn decide_consent(
    req: &StandardRequest,
    repo: &ConsentRepository,
    model: &DataModel,
    stats: &mut EvalStats,
) -> Result<Option<Decision>, ModelError> {
    let episode = model.target_episode(&req.target)?.id.clone();
    let bucket = repo.grantee_bucket(&req.requester);
    stats.directives_scanned += bucket.len() as u64;

    let mut episode_permit: Option<(u64, &ConsentDirective)> = None;
    let mut record_permit: HashMap<&RecordId, (u64, &ConsentDirective)> = HashMap::new();
    let mut deny_applies = false;
    for (d, seq) in bucket {
        if !d.validity.contains(req.ts) {
            continue;
        }
        let applies = match (&d.target, &req.target) {
            (Target::Episode(e), _) => *e == episode,
            (Target::Record(r), Target::Record(q)) => r == q,
            (Target::Record(r), Target::Episode(_)) => {
                model.record(r).is_some_and(|rec| rec.episode == episode)
            }
        };
        if !applies {
            continue;
        }
        match (d.effect, &d.target) {
            (Effect::Deny, _) => deny_applies = true,
            (Effect::Permit, Target::Episode(_)) => {
                if episode_permit.is_none_or(|(s, _)| seq < s) {
                    episode_permit = Some((seq, d));
                }
            }
            (Effect::Permit, Target::Record(r)) => {
                let best = record_permit.entry(r).or_insert((seq, d));
                if seq < best.0 {
                    *best = (seq, d);
                }
            }
        }
    }

    let witness = match (&req.target, episode_permit) {
        (Target::Record(r), ep) => ep
            .into_iter()
            .chain(record_permit.get(r).copied())
            .min_by_key(|&(seq, _)| seq)
            .map(|(_, d)| d),
        (Target::Episode(_), Some((_, d))) => Some(d),
        (Target::Episode(e), None) => {
            let members = model.records_in(e);
            if !members.is_empty() && members.iter().all(|r| record_permit.contains_key(r)) {
                Some(record_permit[&members[0]].1)
            } else {
                None
            }
        }
    };
    if witness.is_some() && deny_applies {
        stats.opposing_applicable += 1;
    }
    Ok(witness.map(|d| Decision::permit(Basis::ConsentPermit, Some(d.id.clone()))))
}

/// Invariant layer, then consent layer, then deny. Errors deny.
pub fn decide(
    req: &StandardRequest,
    repo: &ConsentRepository,
    model: &DataModel,
    gate: &RoleGate,
) -> Decision {
    decide_with_stats(req, repo, model, gate, &mut EvalStats::default())
}

pub fn decide_with_stats(
    req: &StandardRequest,
    repo: &ConsentRepository,
    model: &DataModel,
    gate: &RoleGate,
    stats: &mut EvalStats,
) -> Decision {
    stats.requests += 1;
    layered(req, repo, model, gate, stats).unwrap_or_else(|_| Decision::default_deny())
}

fn layered(
    req: &StandardRequest,
    repo: &ConsentRepository,
    model: &DataModel,
    gate: &RoleGate,
    stats: &mut EvalStats,
) -> Result<Decision, ModelError> {
    if let Some(d) = decide_auth(req, model, gate)? {
        return Ok(d);
    }
    Ok(decide_consent(req, repo, model, stats)?.unwrap_or_else(Decision::default_deny))
}

/// Common interface of the consent-aware engine and the lazy baseline.
pub trait DecisionEngine: Send + Sync {
    fn name(&self) -> &'static str;

    fn decide(
        &self,
        req: &StandardRequest,
        repo: &ConsentRepository,
        model: &DataModel,
        gate: &RoleGate,
        stats: &mut EvalStats,
    ) -> Decision;
}

/// The two-layer engine of this module.
#[derive(Debug, Clone, Copy, Default)]
pub struct Cbac;

impl DecisionEngine for Cbac {
    fn name(&self) -> &'static str {
        "cbac"
    }

    fn decide(
        &self,
        req: &StandardRequest,
        repo: &ConsentRepository,
        model: &DataModel,
        gate: &RoleGate,
        stats: &mut EvalStats,
    ) -> Decision {
        decide_with_stats(req, repo, model, gate, stats)
    }
}

/// Engine selector for the CLI, the service and differential runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EngineKind {
    #[default]
    Cbac,
    Baseline,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("unknown engine {0:?}, expected cbac or baseline")]
pub struct UnknownEngine(pub String);

impl EngineKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EngineKind::Cbac => "cbac",
            EngineKind::Baseline => "baseline",
        }
    }

    pub fn engine(self) -> &'static dyn DecisionEngine {
        match self {
            EngineKind::Cbac => &Cbac,
            EngineKind::Baseline => &crate::baseline::LazyPdp {
                algorithm: crate::baseline::CombiningAlgorithm::DenyOverrides,
            },
        }
    }
}

impl std::fmt::Display for EngineKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for EngineKind {
    type Err = UnknownEngine;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "cbac" => Ok(EngineKind::Cbac),
            "baseline" => Ok(EngineKind::Baseline),
            other => Err(UnknownEngine(other.to_owned())),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::consent::ValidityInterval;
    use crate::model::tests::{eid, rid, small_model, uid};
    use crate::model::{Episode, Record};

    fn req(requester: &str, role: Role, target: Target, ts: Timestamp) -> StandardRequest {
        StandardRequest {
            requester: uid(requester),
            requester_role: role,
            patient: uid("pt1"),
            target,
            ts,
        }
    }

    fn hp(requester: &str, target: Target, ts: Timestamp) -> StandardRequest {
        req(requester, Role::HealthcareProfessional, target, ts)
    }

    fn put(repo: &mut ConsentRepository, id: &str, grantee: &str, target: Target, effect: Effect, v: ValidityInterval) {
        let d = ConsentDirective::draft(DirectiveId::new(id).unwrap(), uid(grantee), target, effect, v);
        repo.activate_unvalidated(d, 0).unwrap();
    }

    fn rec(r: &str) -> Target {
        Target::Record(rid(r))
    }

    fn ep(e: &str) -> Target {
        Target::Episode(eid(e))
    }

    #[test]
    fn invariants() {
        let m = small_model();
        let gate = RoleGate::permissive();
        let author = decide_auth(&hp("hp1", rec("r1"), 0), &m, &gate).unwrap().unwrap();
        assert_eq!(author.basis, Basis::InvariantAuthor);
        let subject = decide_auth(&req("pt1", Role::Patient, ep("e1"), 0), &m, &gate).unwrap().unwrap();
        assert_eq!(subject.basis, Basis::InvariantSubject);
        assert_eq!(decide_auth(&hp("hp9", rec("r1"), 0), &m, &gate).unwrap(), None);
        assert!(decide_auth(&hp("hp9", rec("zz"), 0), &m, &gate).is_err());
    }

    #[test]
    fn role_gate_can_close_the_invariant() {
        let m = small_model();
        let mut gate = RoleGate::permissive();
        assert!(gate.set("lab", BTreeSet::new()).is_err());
        let kind = m.record(&rid("r1")).unwrap().kind.clone();
        gate.set(kind, [Role::Patient].into()).unwrap();
        assert_eq!(decide_auth(&hp("hp1", rec("r1"), 0), &m, &gate).unwrap(), None);
    }

    #[test]
    fn consent_layer() {
        let m = small_model();
        let mut repo = ConsentRepository::new();
        put(&mut repo, "p", "hp9", ep("e1"), Effect::Permit, ValidityInterval::bounded(10, 20).unwrap());
        let mut stats = EvalStats::default();
        let hit = decide_consent(&hp("hp9", rec("r2"), 15), &repo, &m, &mut stats).unwrap().unwrap();
        assert_eq!(hit.witness, Some(DirectiveId::new("p").unwrap()));
        assert_eq!(decide_consent(&hp("hp9", rec("r2"), 20), &repo, &m, &mut stats).unwrap(), None);
        assert_eq!(decide_consent(&hp("hp9", rec("r3"), 15), &repo, &m, &mut stats).unwrap(), None);
        assert_eq!(stats.directives_scanned, 3);

        let mut repo = ConsentRepository::new();
        put(&mut repo, "d", "hp9", ep("e1"), Effect::Deny, ValidityInterval::unbounded(0));
        assert_eq!(decide_consent(&hp("hp9", rec("r2"), 15), &repo, &m, &mut stats).unwrap(), None);
    }

    #[test]
    fn episode_requests_need_full_coverage() {
        let m = small_model();
        let mut repo = ConsentRepository::new();
        let always = ValidityInterval::unbounded(0);
        put(&mut repo, "a", "hp9", rec("r1"), Effect::Permit, always);
        assert_eq!(decide(&hp("hp9", ep("e1"), 5), &repo, &m, &RoleGate::permissive()).outcome, Outcome::Deny);
        put(&mut repo, "b", "hp9", rec("r2"), Effect::Permit, always);
        let d = decide(&hp("hp9", ep("e1"), 5), &repo, &m, &RoleGate::permissive());
        assert_eq!(d.outcome, Outcome::Permit);
        assert_eq!(d.witness, Some(DirectiveId::new("a").unwrap()));
    }

    #[test]
    fn empty_episode_needs_episode_level_permit() {
        let mut m = small_model();
        m.add_episode(Episode {
            id: eid("e9"),
            creator: uid("hp1"),
            patient: uid("pt1"),
            tags: Default::default(),
        })
        .unwrap();
        let gate = RoleGate::permissive();
        let mut repo = ConsentRepository::new();
        assert_eq!(decide(&hp("hp9", ep("e9"), 0), &repo, &m, &gate).outcome, Outcome::Deny);
        put(&mut repo, "p", "hp9", ep("e9"), Effect::Permit, ValidityInterval::unbounded(0));
        assert_eq!(decide(&hp("hp9", ep("e9"), 0), &repo, &m, &gate).outcome, Outcome::Permit);
        m.add_record(Record { id: rid("r9"), episode: eid("e9"), kind: "note".into() }).unwrap();
        assert_eq!(decide(&hp("hp9", rec("r9"), 0), &repo, &m, &gate).outcome, Outcome::Permit);
    }

    #[test]
    fn invariants_beat_injected_denials() {
        let m = small_model();
        let mut repo = ConsentRepository::new();
        put(&mut repo, "x", "hp1", rec("r1"), Effect::Deny, ValidityInterval::unbounded(0));
        let d = decide(&hp("hp1", rec("r1"), 0), &repo, &m, &RoleGate::permissive());
        assert_eq!(d.basis, Basis::InvariantAuthor);
    }

    #[test]
    fn unknown_target_and_requester_fail_closed() {
        let m = small_model();
        let repo = ConsentRepository::new();
        let gate = RoleGate::permissive();
        assert_eq!(decide(&hp("hp1", rec("nope"), 0), &repo, &m, &gate), Decision::default_deny());
        assert_eq!(decide(&hp("ghost", rec("r1"), 0), &repo, &m, &gate), Decision::default_deny());
    }

    #[test]
    fn earliest_permit_is_the_witness() {
        let m = small_model();
        let mut repo = ConsentRepository::new();
        let always = ValidityInterval::unbounded(0);
        put(&mut repo, "late", "hp9", rec("r1"), Effect::Permit, always);
        put(&mut repo, "ep", "hp9", ep("e1"), Effect::Permit, always);
        let d = decide(&hp("hp9", rec("r1"), 0), &repo, &m, &RoleGate::permissive());
        assert_eq!(d.witness, Some(DirectiveId::new("late").unwrap()));
        let d = decide(&hp("hp9", ep("e1"), 0), &repo, &m, &RoleGate::permissive());
        assert_eq!(d.witness, Some(DirectiveId::new("ep").unwrap()));
    }

    #[test]
    fn opposing_counter() {
        let m = small_model();
        let mut repo = ConsentRepository::new();
        let always = ValidityInterval::unbounded(0);
        put(&mut repo, "p", "hp9", ep("e1"), Effect::Permit, always);
        put(&mut repo, "d", "hp9", rec("r1"), Effect::Deny, always);
        let mut stats = EvalStats::default();
        decide_with_stats(&hp("hp9", rec("r1"), 0), &repo, &m, &RoleGate::permissive(), &mut stats);
        decide_with_stats(&hp("hp9", rec("r2"), 0), &repo, &m, &RoleGate::permissive(), &mut stats);
        assert_eq!(stats.opposing_applicable, 1);
        assert_eq!(stats.requests, 2);
    }
}
