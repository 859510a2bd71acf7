//! Admission control for consent drafts.
//!
//! A draft is activated only if it neither denies the author of its target,
//! nor opposes an Active directive of the same grantee over overlapping scope
//! and time, nor duplicates coverage that already exists. Checks run in that
//! order and the first failure is reported.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::consent::{
    ConsentDirective, ConsentError, ConsentRepository, Effect, LifecycleState, SharedRepository,
    ValidatedDraft,
};
use crate::model::{DataModel, DirectiveId, ModelError, Target, UserId};
use crate::Timestamp;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub enum OverlapMode {
    /// Opposition only over an identical target.
    ExactTarget,
    /// Opposition over any pair of targets sharing a record.
    #[default]
    ScopeOverlap,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConflictPolicy {
    pub overlap_mode: OverlapMode,
}

impl ConflictPolicy {
    pub fn exact() -> Self {
        Self {
            overlap_mode: OverlapMode::ExactTarget,
        }
    }

    pub fn scope_overlap() -> Self {
        Self {
            overlap_mode: OverlapMode::ScopeOverlap,
        }
    }
}

/// Why a draft breaks a system invariant.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "code", rename_all = "snake_case")]
pub enum InvariantViolation {
    /// The draft denies the author of its own target.
    DeniesAuthor { author: UserId },
    /// The target does not exist in the data model.
    UnknownTarget { target: Target },
    /// The draft is not in the Draft state.
    NotDraft,
}

impl fmt::Display for InvariantViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            InvariantViolation::DeniesAuthor { author } => {
                write!(f, "draft denies {author}, the author of its target")
            }
            InvariantViolation::UnknownTarget { target } => write!(f, "unknown target {target}"),
            InvariantViolation::NotDraft => f.write_str("directive is not a draft"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum ValidationOutcome {
    Accepted(DirectiveId),
    RejectedInvariant(InvariantViolation),
    RejectedConflict(DirectiveId),
    RejectedRedundant(DirectiveId),
}

impl ValidationOutcome {
    pub fn is_accepted(&self) -> bool {
        matches!(self, ValidationOutcome::Accepted(_))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CcamError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Consent(#[from] ConsentError),
}

/// Returns a violation iff the draft denies the author of its target.
pub fn check_invariant_violation(
    draft: &ConsentDirective,
    model: &DataModel,
) -> Result<Option<InvariantViolation>, ModelError> {
    let author = model.target_author(&draft.target)?;
    Ok((draft.effect == Effect::Deny && &draft.grantee == author).then(|| {
        InvariantViolation::DeniesAuthor {
            author: author.clone(),
        }
    }))
}

/// Earliest-committed Active directive of the same grantee with the opposite
/// effect, overlapping scope (per `policy`) and overlapping validity.
pub fn check_modality_conflict(
    draft: &ConsentDirective,
    repo: &ConsentRepository,
    model: &DataModel,
    policy: ConflictPolicy,
) -> Result<Option<DirectiveId>, ModelError> {
    let opposite = draft.effect.opposite();
    let clashes = |d: &ConsentDirective| d.effect == opposite && d.validity.overlaps(&draft.validity);
    let best = match policy.overlap_mode {
        OverlapMode::ExactTarget => {
            model.target_episode(&draft.target)?;
            repo.exact_bucket(&draft.grantee, &draft.target)
                .filter(|(d, _)| clashes(d))
                .min_by_key(|&(_, seq)| seq)
        }
        OverlapMode::ScopeOverlap => repo
            .scope_overlapping(&draft.grantee, &draft.target, model)?
            .into_iter()
            .filter(|(d, _)| clashes(d))
            .min_by_key(|&(_, seq)| seq),
    };
    Ok(best.map(|(d, _)| d.id.clone()))
}

/// Earliest-committed Active directive with identical grantee, target and
/// effect whose validity covers the draft's.
pub fn check_redundancy(
    draft: &ConsentDirective,
    repo: &ConsentRepository,
) -> Option<DirectiveId> {
    repo.exact_bucket(&draft.grantee, &draft.target)
        .filter(|(d, _)| d.effect == draft.effect && d.validity.covers(&draft.validity))
        .min_by_key(|&(_, seq)| seq)
        .map(|(d, _)| d.id.clone())
}

/// Runs all checks without mutating anything. On success returns a ticket
/// that [`ConsentRepository::activate`] accepts until the next mutation.
pub fn validate(
    draft: ConsentDirective,
    repo: &ConsentRepository,
    model: &DataModel,
    policy: ConflictPolicy,
) -> Result<ValidatedDraft, ValidationOutcome> {
    if draft.state != LifecycleState::Draft {
        return Err(ValidationOutcome::RejectedInvariant(InvariantViolation::NotDraft));
    }
    let unknown = |_| {
        ValidationOutcome::RejectedInvariant(InvariantViolation::UnknownTarget {
            target: draft.target.clone(),
        })
    };
    if let Some(v) = check_invariant_violation(&draft, model).map_err(unknown)? {
        return Err(ValidationOutcome::RejectedInvariant(v));
    }
    if let Some(id) = check_modality_conflict(&draft, repo, model, policy).map_err(unknown)? {
        return Err(ValidationOutcome::RejectedConflict(id));
    }
    if let Some(id) = check_redundancy(&draft, repo) {
        return Err(ValidationOutcome::RejectedRedundant(id));
    }
    Ok(ValidatedDraft::new(draft, repo.version()))
}

/// Validates and, if clean, activates the draft under the same exclusive
/// borrow. Rejections leave the repository untouched.
pub fn validate_and_commit(
    draft: ConsentDirective,
    repo: &mut ConsentRepository,
    model: &DataModel,
    policy: ConflictPolicy,
    now: Timestamp,
) -> Result<ValidationOutcome, ConsentError> {
    match validate(draft, repo, model, policy) {
        Ok(ticket) => repo.activate(ticket, now).map(ValidationOutcome::Accepted),
        Err(rejection) => Ok(rejection),
    }
}

impl SharedRepository {
    /// [`validate_and_commit`] with the write lock held across the whole
    /// check-then-activate span.
    pub fn validate_and_commit(
        &self,
        draft: ConsentDirective,
        model: &DataModel,
        policy: ConflictPolicy,
        now: Timestamp,
    ) -> Result<ValidationOutcome, ConsentError> {
        let mut repo = self.write();
        validate_and_commit(draft, &mut repo, model, policy, now)
    }
}

/// A pair of Active directives that should never coexist.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    Invariant(DirectiveId),
    Modality(DirectiveId, DirectiveId),
}

/// Exhaustive pairwise scan of the Active set for invariant violations and
/// modality conflicts. Quadratic; meant for audits and tests.
pub fn scan_violations(
    repo: &ConsentRepository,
    model: &DataModel,
    mode: OverlapMode,
) -> Result<Vec<Violation>, ModelError> {
    let active: Vec<&ConsentDirective> = repo.active().collect();
    let mut out = Vec::new();
    for d in &active {
        if d.effect == Effect::Deny && model.target_author(&d.target)? == &d.grantee {
            out.push(Violation::Invariant(d.id.clone()));
        }
    }
    for (i, a) in active.iter().enumerate() {
        for b in &active[i + 1..] {
            if a.grantee != b.grantee
                || a.effect == b.effect
                || !a.validity.overlaps(&b.validity)
            {
                continue;
            }
            let scope = match mode {
                OverlapMode::ExactTarget => a.target == b.target,
                OverlapMode::ScopeOverlap => model.scopes_overlap(&a.target, &b.target)?,
            };
            if scope {
                out.push(Violation::Modality(a.id.clone(), b.id.clone()));
            }
        }
    }
    Ok(out)
}
