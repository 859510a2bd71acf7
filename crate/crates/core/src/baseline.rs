//! Lazy request-time evaluation over an unvalidated directive set.
//!
//! Every stored directive is examined on every request and interactions are
//! arbitrated by deny-overrides. The author and subject invariants are
//! ordinary permit rules here, so an applicable Deny defeats them.

use crate::consent::{ConsentRepository, Effect, LifecycleState};
use crate::cpdp::{Basis, Decision, DecisionEngine, EvalStats, Outcome, RoleGate, StandardRequest};
use crate::model::{DataModel, DirectiveId, ModelError, RecordId, Target};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CombiningAlgorithm {
    #[default]
    DenyOverrides,
}

/// Result of combining for a single resource.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Combined {
    Permit { basis: Basis, witness: Option<DirectiveId> },
    Deny { witness: DirectiveId },
    NotApplicable,
}

/// The baseline engine.
#[derive(Debug, Clone, Copy, Default)]
pub struct LazyPdp {
    pub algorithm: CombiningAlgorithm,
}

#[derive(Default)]
struct Rules {
    // (commit seq, id) of the first applicable rule of each effect.
    permit: Option<(u64, DirectiveId)>,
    deny: Option<(u64, DirectiveId)>,
}

impl Rules {
    fn note(&mut self, effect: Effect, seq: u64, id: &DirectiveId) {
        let slot = match effect {
            Effect::Permit => &mut self.permit,
            Effect::Deny => &mut self.deny,
        };
        if slot.as_ref().is_none_or(|(s, _)| seq < *s) {
            *slot = Some((seq, id.clone()));
        }
    }
}

impl LazyPdp {
    pub fn new() -> Self {
        Self::default()
    }

    /// Deny-overrides for one resource: any applicable Deny wins, then any
    /// applicable Permit (invariant rules first), else not applicable.
    fn combine(&self, rules: &Rules, invariant: Option<Basis>) -> Combined {
        match self.algorithm {
            CombiningAlgorithm::DenyOverrides => {
                if let Some((_, id)) = &rules.deny {
                    Combined::Deny { witness: id.clone() }
                } else if let Some(basis) = invariant {
                    Combined::Permit { basis, witness: None }
                } else if let Some((_, id)) = &rules.permit {
                    Combined::Permit {
                        basis: Basis::ConsentPermit,
                        witness: Some(id.clone()),
                    }
                } else {
                    Combined::NotApplicable
                }
            }
        }
    }

    fn evaluate(
        &self,
        req: &StandardRequest,
        repo: &ConsentRepository,
        model: &DataModel,
        gate: &RoleGate,
        stats: &mut EvalStats,
    ) -> Result<Decision, ModelError> {
        let episode = model.target_episode(&req.target)?;
        // Resources the request touches; an empty episode is its own resource.
        let resources: Vec<Option<&RecordId>> = match &req.target {
            Target::Record(r) => vec![Some(r)],
            Target::Episode(e) => {
                let members = model.records_in(e);
                if members.is_empty() {
                    vec![None]
                } else {
                    members.iter().map(Some).collect()
                }
            }
        };
        let mut rules: Vec<Rules> = resources.iter().map(|_| Rules::default()).collect();

        for (d, seq) in repo.iter_with_seq() {
            stats.directives_scanned += 1;
            if d.state != LifecycleState::Active
                || d.grantee != req.requester
                || !d.validity.contains(req.ts)
            {
                continue;
            }
            for (res, slot) in resources.iter().zip(rules.iter_mut()) {
                let applies = match (&d.target, res) {
                    (Target::Episode(e), _) => *e == episode.id,
                    (Target::Record(r), Some(q)) => r == *q,
                    (Target::Record(_), None) => false,
                };
                if applies {
                    slot.note(d.effect, seq, &d.id);
                }
            }
        }

        let mut first_permit = None;
        for (res, slot) in resources.iter().zip(&rules) {
            let invariant_target = match res {
                Some(r) => Target::Record((*r).clone()),
                None => req.target.clone(),
            };
            let invariant = invariant_rule(req, &invariant_target, model, gate)?;
            match self.combine(slot, invariant) {
                Combined::Deny { witness } => {
                    return Ok(Decision {
                        outcome: Outcome::Deny,
                        basis: Basis::ConsentDeny,
                        witness: Some(witness),
                    })
                }
                Combined::NotApplicable => return Ok(Decision::default_deny()),
                Combined::Permit { basis, witness } => {
                    first_permit.get_or_insert(Decision::permit(basis, witness));
                }
            }
        }
        Ok(first_permit.unwrap_or_else(Decision::default_deny))
    }
}

/// The invariants as permit rules for a single resource.
fn invariant_rule(
    req: &StandardRequest,
    target: &Target,
    model: &DataModel,
    gate: &RoleGate,
) -> Result<Option<Basis>, ModelError> {
    let episode = model.target_episode(target)?;
    if let Target::Record(r) = target {
        let kind = &model.record(r).ok_or_else(|| ModelError::UnknownRecord(r.clone()))?.kind;
        if !gate.allows(kind, req.requester_role) {
            return Ok(None);
        }
    }
    Ok(if req.requester == episode.creator {
        Some(Basis::InvariantAuthor)
    } else if req.requester == episode.patient {
        Some(Basis::InvariantSubject)
    } else {
        None
    })
}

/// Lazy decision; not-applicable and every error path deny.
pub fn lazy_decide(
    req: &StandardRequest,
    repo: &ConsentRepository,
    model: &DataModel,
    gate: &RoleGate,
    stats: &mut EvalStats,
) -> Decision {
    LazyPdp::new().decide(req, repo, model, gate, stats)
}

impl DecisionEngine for LazyPdp {
    fn name(&self) -> &'static str {
        "baseline"
    }

    fn decide(
        &self,
        req: &StandardRequest,
        repo: &ConsentRepository,
        model: &DataModel,
        gate: &RoleGate,
        stats: &mut EvalStats,
    ) -> Decision {
        stats.requests += 1;
        self.evaluate(req, repo, model, gate, stats)
            .unwrap_or_else(|_| Decision::default_deny())
    }
}
