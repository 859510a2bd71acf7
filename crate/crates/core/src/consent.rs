//! Consent directives, their Draft → Active → Inactive lifecycle, and the
//! consent policy repository.
//!
//! The repository only ever holds directives that have been activated.
//! Every mutation is recorded as an event; the event log replays into an
//! identical repository and doubles as an audit trail of the lifecycle.

use std::collections::HashMap;
use std::fmt;
use std::io::{self, Write};
use std::str::FromStr;

use parking_lot::{RwLock, RwLockReadGuard, RwLockWriteGuard};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{DataModel, DirectiveId, ModelError, Target, UserId};
use crate::textfmt::{self, ParseError};
use crate::Timestamp;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Effect {
    Permit,
    Deny,
}

impl Effect {
    pub fn opposite(self) -> Effect {
        match self {
            Effect::Permit => Effect::Deny,
            Effect::Deny => Effect::Permit,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Effect::Permit => "permit",
            Effect::Deny => "deny",
        }
    }
}

impl fmt::Display for Effect {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Effect {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "permit" => Ok(Effect::Permit),
            "deny" => Ok(Effect::Deny),
            other => Err(format!("unknown effect {other:?}")),
        }
    }
}

/// Half-open validity window `[start, end)`; no end means unbounded.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ValidityInterval {
    pub start: Timestamp,
    pub end: Option<Timestamp>,
}

impl ValidityInterval {
    pub fn new(start: Timestamp, end: Option<Timestamp>) -> Result<Self, ConsentError> {
        match end {
            Some(end) if end <= start => Err(ConsentError::InvalidInterval { start, end }),
            _ => Ok(Self { start, end }),
        }
    }

    pub fn unbounded(start: Timestamp) -> Self {
        Self { start, end: None }
    }

    pub fn bounded(start: Timestamp, end: Timestamp) -> Result<Self, ConsentError> {
        Self::new(start, Some(end))
    }

    pub fn is_well_formed(&self) -> bool {
        self.end.is_none_or(|end| end > self.start)
    }

    pub fn contains(&self, ts: Timestamp) -> bool {
        ts >= self.start && self.end.is_none_or(|end| ts < end)
    }

    pub fn overlaps(&self, other: &ValidityInterval) -> bool {
        let a_before_b_ends = other.end.is_none_or(|end| self.start < end);
        let b_before_a_ends = self.end.is_none_or(|end| other.start < end);
        a_before_b_ends && b_before_a_ends
    }

    /// Whether every instant of `other` lies in `self`.
    pub fn covers(&self, other: &ValidityInterval) -> bool {
        self.start <= other.start
            && match (self.end, other.end) {
                (None, _) => true,
                (Some(_), None) => false,
                (Some(a), Some(b)) => b <= a,
            }
    }

    /// True once the window has closed for good at `now`.
    pub fn lapsed_at(&self, now: Timestamp) -> bool {
        self.end.is_some_and(|end| end <= now)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LifecycleState {
    Draft,
    Active,
    Inactive,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DeactivationCause {
    Revoked,
    Expired,
}

/// A patient-issued ⟨grantee, target, effect⟩ directive.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConsentDirective {
    pub id: DirectiveId,
    pub grantee: UserId,
    pub target: Target,
    pub effect: Effect,
    pub validity: ValidityInterval,
    pub state: LifecycleState,
    pub created_at: Option<Timestamp>,
    pub activated_at: Option<Timestamp>,
    pub deactivated_at: Option<Timestamp>,
    pub deactivation_cause: Option<DeactivationCause>,
}

impl ConsentDirective {
    pub fn draft(
        id: DirectiveId,
        grantee: UserId,
        target: Target,
        effect: Effect,
        validity: ValidityInterval,
    ) -> Self {
        Self {
            id,
            grantee,
            target,
            effect,
            validity,
            state: LifecycleState::Draft,
            created_at: None,
            activated_at: None,
            deactivated_at: None,
            deactivation_cause: None,
        }
    }

    /// Active and inside its validity window at `ts`.
    pub fn is_effective_at(&self, ts: Timestamp) -> bool {
        self.state == LifecycleState::Active && self.validity.contains(ts)
    }

    /// Active and not yet lapsed at `now` (possibly not started).
    pub fn is_live_at(&self, now: Timestamp) -> bool {
        self.state == LifecycleState::Active && !self.validity.lapsed_at(now)
    }

    /// Lifecycle field consistency.
    pub fn is_consistent(&self) -> bool {
        match self.state {
            LifecycleState::Draft => {
                self.activated_at.is_none()
                    && self.deactivated_at.is_none()
                    && self.deactivation_cause.is_none()
            }
            LifecycleState::Active => {
                self.deactivated_at.is_none() && self.deactivation_cause.is_none()
            }
            LifecycleState::Inactive => {
                self.deactivated_at.is_some() && self.deactivation_cause.is_some()
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ConsentError {
    #[error("directive {0} not found")]
    NotFound(DirectiveId),
    #[error("directive {id} is {actual:?}, expected {expected:?}")]
    InvalidState {
        id: DirectiveId,
        actual: LifecycleState,
        expected: LifecycleState,
    },
    #[error("validation ran at repository version {validated_at}, repository is now at {current}")]
    StaleValidation { validated_at: u64, current: u64 },
    #[error("directive id {0} has already been used")]
    DuplicateId(DirectiveId),
    #[error("validity end {end} is not after start {start}")]
    InvalidInterval { start: Timestamp, end: Timestamp },
}

/// A draft that passed admission checks against a specific repository
/// version. Only the admission controller can mint one.
#[derive(Debug)]
pub struct ValidatedDraft {
    directive: ConsentDirective,
    version: u64,
}

impl ValidatedDraft {
    pub(crate) fn new(directive: ConsentDirective, version: u64) -> Self {
        Self { directive, version }
    }

    pub fn directive(&self) -> &ConsentDirective {
        &self.directive
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum EventKind {
    Created {
        grantee: UserId,
        target: Target,
        effect: Effect,
        validity: ValidityInterval,
        at: Option<Timestamp>,
    },
    Activated { at: Timestamp },
    Revoked { at: Timestamp },
    Expired { at: Timestamp },
}

impl EventKind {
    fn name(&self) -> &'static str {
        match self {
            EventKind::Created { .. } => "created",
            EventKind::Activated { .. } => "activated",
            EventKind::Revoked { .. } => "revoked",
            EventKind::Expired { .. } => "expired",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RepoEvent {
    pub seq: u64,
    pub directive: DirectiveId,
    pub kind: EventKind,
}

#[derive(Debug, Error)]
pub enum ReplayError {
    #[error(transparent)]
    Parse(#[from] ParseError),
    #[error("event {seq}: {event} is not a valid transition for directive {directive} in state {state}")]
    Lifecycle {
        seq: u64,
        directive: DirectiveId,
        event: &'static str,
        state: &'static str,
    },
    #[error("event {seq}: sequence number does not increase")]
    Sequence { seq: u64 },
}

#[derive(Debug, Clone)]
struct Stored {
    directive: ConsentDirective,
    commit_seq: u64,
}

/// Consent policy repository.
///
/// Directives live in commit order. Two secondary indexes cover the Active
/// set only: by grantee, and by (grantee, exact target).
#[derive(Debug, Clone, Default)]
pub struct ConsentRepository {
    slots: Vec<Stored>,
    by_id: HashMap<DirectiveId, usize>,
    by_grantee: HashMap<UserId, Vec<usize>>,
    by_grantee_target: HashMap<UserId, HashMap<Target, Vec<usize>>>,
    events: Vec<RepoEvent>,
    next_seq: u64,
}

impl ConsentRepository {
    pub fn new() -> Self {
        Self {
            next_seq: 1,
            ..Self::default()
        }
    }

    /// Changes whenever the repository is mutated.
    pub fn version(&self) -> u64 {
        self.next_seq
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn active_count(&self) -> usize {
        self.by_grantee.values().map(Vec::len).sum()
    }

    pub fn get(&self, id: &DirectiveId) -> Option<&ConsentDirective> {
        self.by_id.get(id).map(|&slot| &self.slots[slot].directive)
    }

    pub fn commit_seq(&self, id: &DirectiveId) -> Option<u64> {
        self.by_id.get(id).map(|&slot| self.slots[slot].commit_seq)
    }

    /// Every stored directive in commit order, whatever its state.
    pub fn iter(&self) -> impl Iterator<Item = &ConsentDirective> {
        self.slots.iter().map(|s| &s.directive)
    }

    /// Stored directives paired with their commit sequence numbers.
    pub fn iter_with_seq(&self) -> impl Iterator<Item = (&ConsentDirective, u64)> {
        self.slots.iter().map(|s| (&s.directive, s.commit_seq))
    }

    pub fn events(&self) -> &[RepoEvent] {
        &self.events
    }

    fn push_event(&mut self, directive: &DirectiveId, kind: EventKind) -> u64 {
        let seq = self.next_seq;
        self.next_seq += 1;
        self.events.push(RepoEvent {
            seq,
            directive: directive.clone(),
            kind,
        });
        seq
    }

    /// Commits a validated draft. The draft must have been validated against
    /// the current version; any mutation in between invalidates it.
    pub fn activate(
        &mut self,
        validated: ValidatedDraft,
        now: Timestamp,
    ) -> Result<DirectiveId, ConsentError> {
        if validated.version != self.version() {
            return Err(ConsentError::StaleValidation {
                validated_at: validated.version,
                current: self.version(),
            });
        }
        self.store_active(validated.directive, now)
    }

    /// Stores a draft as Active without admission checks.
    ///
    /// This is how the lazy baseline builds its unvalidated repositories, and
    /// how tests inject states admission control would never produce.
    pub fn activate_unvalidated(
        &mut self,
        directive: ConsentDirective,
        now: Timestamp,
    ) -> Result<DirectiveId, ConsentError> {
        self.store_active(directive, now)
    }

    fn store_active(
        &mut self,
        mut directive: ConsentDirective,
        now: Timestamp,
    ) -> Result<DirectiveId, ConsentError> {
        if directive.state != LifecycleState::Draft {
            return Err(ConsentError::InvalidState {
                id: directive.id,
                actual: directive.state,
                expected: LifecycleState::Draft,
            });
        }
        if self.by_id.contains_key(&directive.id) {
            return Err(ConsentError::DuplicateId(directive.id));
        }
        if let Some(end) = directive.validity.end.filter(|_| !directive.validity.is_well_formed()) {
            return Err(ConsentError::InvalidInterval {
                start: directive.validity.start,
                end,
            });
        }
        let created_at = directive.created_at.or(Some(now));
        self.push_event(
            &directive.id,
            EventKind::Created {
                grantee: directive.grantee.clone(),
                target: directive.target.clone(),
                effect: directive.effect,
                validity: directive.validity,
                at: created_at,
            },
        );
        let commit_seq = self.push_event(&directive.id, EventKind::Activated { at: now });
        directive.created_at = created_at;
        directive.state = LifecycleState::Active;
        directive.activated_at = Some(now);
        Ok(self.insert_active(directive, commit_seq))
    }

    fn insert_active(&mut self, directive: ConsentDirective, commit_seq: u64) -> DirectiveId {
        let slot = self.slots.len();
        let id = directive.id.clone();
        self.by_id.insert(id.clone(), slot);
        self.by_grantee
            .entry(directive.grantee.clone())
            .or_default()
            .push(slot);
        self.by_grantee_target
            .entry(directive.grantee.clone())
            .or_default()
            .entry(directive.target.clone())
            .or_default()
            .push(slot);
        self.slots.push(Stored {
            directive,
            commit_seq,
        });
        id
    }

    fn deactivate(&mut self, slot: usize, cause: DeactivationCause, now: Timestamp) {
        let id = self.slots[slot].directive.id.clone();
        let kind = match cause {
            DeactivationCause::Revoked => EventKind::Revoked { at: now },
            DeactivationCause::Expired => EventKind::Expired { at: now },
        };
        self.push_event(&id, kind);
        let d = &mut self.slots[slot].directive;
        d.state = LifecycleState::Inactive;
        d.deactivated_at = Some(now);
        d.deactivation_cause = Some(cause);
        let (grantee, target) = (d.grantee.clone(), d.target.clone());
        if let Some(bucket) = self.by_grantee.get_mut(&grantee) {
            bucket.retain(|&s| s != slot);
            if bucket.is_empty() {
                self.by_grantee.remove(&grantee);
            }
        }
        if let Some(targets) = self.by_grantee_target.get_mut(&grantee) {
            if let Some(bucket) = targets.get_mut(&target) {
                bucket.retain(|&s| s != slot);
                if bucket.is_empty() {
                    targets.remove(&target);
                }
            }
            if targets.is_empty() {
                self.by_grantee_target.remove(&grantee);
            }
        }
    }

    /// Revokes an Active directive. Takes effect for every later evaluation.
    pub fn revoke(&mut self, id: &DirectiveId, now: Timestamp) -> Result<(), ConsentError> {
        let slot = *self
            .by_id
            .get(id)
            .ok_or_else(|| ConsentError::NotFound(id.clone()))?;
        let state = self.slots[slot].directive.state;
        if state != LifecycleState::Active {
            return Err(ConsentError::InvalidState {
                id: id.clone(),
                actual: state,
                expected: LifecycleState::Active,
            });
        }
        self.deactivate(slot, DeactivationCause::Revoked, now);
        Ok(())
    }

    /// Moves every Active directive whose window has closed at `now` to
    /// Inactive. Returns the number of transitions.
    pub fn expire_sweep(&mut self, now: Timestamp) -> usize {
        let lapsed: Vec<usize> = self
            .active_slots()
            .filter(|&slot| self.slots[slot].directive.validity.lapsed_at(now))
            .collect();
        for &slot in &lapsed {
            self.deactivate(slot, DeactivationCause::Expired, now);
        }
        lapsed.len()
    }

    fn active_slots(&self) -> impl Iterator<Item = usize> + '_ {
        self.slots
            .iter()
            .enumerate()
            .filter(|(_, s)| s.directive.state == LifecycleState::Active)
            .map(|(i, _)| i)
    }

    /// Active directives in commit order.
    pub fn active(&self) -> impl Iterator<Item = &ConsentDirective> {
        self.slots
            .iter()
            .map(|s| &s.directive)
            .filter(|d| d.state == LifecycleState::Active)
    }

    /// All Active directives of `grantee` with their commit sequence numbers,
    /// regardless of validity window. This is the candidate set the runtime
    /// evaluator scans.
    pub fn grantee_bucket(
        &self,
        grantee: &UserId,
    ) -> impl ExactSizeIterator<Item = (&ConsentDirective, u64)> + '_ {
        self.by_grantee
            .get(grantee)
            .map(Vec::as_slice)
            .unwrap_or(&[])
            .iter()
            .map(|&slot| (&self.slots[slot].directive, self.slots[slot].commit_seq))
    }

    /// Active directives of `grantee` whose target is exactly `target`.
    pub fn exact_bucket(
        &self,
        grantee: &UserId,
        target: &Target,
    ) -> impl Iterator<Item = (&ConsentDirective, u64)> + '_ {
        self.by_grantee_target
            .get(grantee)
            .and_then(|t| t.get(target))
            .map(Vec::as_slice)
            .unwrap_or(&[])
            .iter()
            .map(|&slot| (&self.slots[slot].directive, self.slots[slot].commit_seq))
    }

    /// Directives of `grantee` effective at `now`, in commit order. Lapsed
    /// directives are excluded even if no sweep has run yet.
    pub fn active_for(&self, grantee: &UserId, now: Timestamp) -> Vec<&ConsentDirective> {
        self.grantee_bucket(grantee)
            .map(|(d, _)| d)
            .filter(|d| d.validity.contains(now))
            .collect()
    }

    /// Directives of `grantee` effective at `now` whose target overlaps
    /// `target` in scope.
    pub fn active_overlapping(
        &self,
        grantee: &UserId,
        target: &Target,
        model: &DataModel,
        now: Timestamp,
    ) -> Result<Vec<&ConsentDirective>, ModelError> {
        self.overlapping_where(grantee, target, model, |d| d.validity.contains(now))
    }

    /// Every Active directive of `grantee` overlapping `target` in scope,
    /// whatever its window, with commit sequence numbers. Admission control
    /// applies its own temporal test on top.
    pub fn scope_overlapping(
        &self,
        grantee: &UserId,
        target: &Target,
        model: &DataModel,
    ) -> Result<Vec<(&ConsentDirective, u64)>, ModelError> {
        let query_episode = model.target_episode(target)?.id.clone();
        let mut out = Vec::new();
        for (d, seq) in self.grantee_bucket(grantee) {
            if overlaps_within(model, &d.target, target, &query_episode)? {
                out.push((d, seq));
            }
        }
        Ok(out)
    }

    fn overlapping_where(
        &self,
        grantee: &UserId,
        target: &Target,
        model: &DataModel,
        keep: impl Fn(&ConsentDirective) -> bool,
    ) -> Result<Vec<&ConsentDirective>, ModelError> {
        let query_episode = model.target_episode(target)?.id.clone();
        let mut out = Vec::new();
        for (d, _) in self.grantee_bucket(grantee) {
            if keep(d) && overlaps_within(model, &d.target, target, &query_episode)? {
                out.push(d);
            }
        }
        Ok(out)
    }

    // ---- persistence ---------------------------------------------------

    pub fn write_event_log<W: Write>(&self, mut out: W) -> io::Result<()> {
        for ev in &self.events {
            write!(out, "{}\t{}\t{}", ev.seq, ev.kind.name(), ev.directive)?;
            match &ev.kind {
                EventKind::Created {
                    grantee,
                    target,
                    effect,
                    validity,
                    at,
                } => write!(
                    out,
                    "\tgrantee={grantee}\ttarget={target}\teffect={effect}\tstart={}\tend={}\tat={}",
                    validity.start,
                    fmt_opt(validity.end),
                    fmt_opt(*at)
                )?,
                EventKind::Activated { at } | EventKind::Revoked { at } | EventKind::Expired { at } => {
                    write!(out, "\tat={at}")?
                }
            }
            writeln!(out)?;
        }
        Ok(())
    }

    pub fn event_log_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_event_log(&mut buf).expect("in-memory write");
        String::from_utf8(buf).expect("UTF-8")
    }

    pub fn parse_event_log(text: &str) -> Result<Vec<RepoEvent>, ParseError> {
        textfmt::lines(text)
            .map(|(lineno, line)| parse_event(line, lineno))
            .collect()
    }

    /// Rebuilds a repository from its event history, rejecting any history
    /// that leaves the Draft → Active → Inactive order.
    pub fn replay(events: &[RepoEvent]) -> Result<Self, ReplayError> {
        let mut repo = ConsentRepository::new();
        let mut pending: HashMap<DirectiveId, ConsentDirective> = HashMap::new();
        let mut last_seq = 0;
        for ev in events {
            if ev.seq <= last_seq {
                return Err(ReplayError::Sequence { seq: ev.seq });
            }
            last_seq = ev.seq;
            let lifecycle_err = |state: &'static str| ReplayError::Lifecycle {
                seq: ev.seq,
                directive: ev.directive.clone(),
                event: ev.kind.name(),
                state,
            };
            let current = repo.get(&ev.directive).map(|d| d.state);
            match &ev.kind {
                EventKind::Created {
                    grantee,
                    target,
                    effect,
                    validity,
                    at,
                } => {
                    if current.is_some() {
                        return Err(lifecycle_err("stored"));
                    }
                    if pending.contains_key(&ev.directive) {
                        return Err(lifecycle_err("draft"));
                    }
                    let mut d = ConsentDirective::draft(
                        ev.directive.clone(),
                        grantee.clone(),
                        target.clone(),
                        *effect,
                        *validity,
                    );
                    d.created_at = *at;
                    pending.insert(ev.directive.clone(), d);
                }
                EventKind::Activated { at } => {
                    let mut d = pending
                        .remove(&ev.directive)
                        .ok_or_else(|| lifecycle_err(state_name(current)))?;
                    d.state = LifecycleState::Active;
                    d.activated_at = Some(*at);
                    repo.insert_active(d, ev.seq);
                }
                EventKind::Revoked { at } | EventKind::Expired { at } => {
                    if current != Some(LifecycleState::Active) {
                        let state = if pending.contains_key(&ev.directive) {
                            "draft"
                        } else {
                            state_name(current)
                        };
                        return Err(lifecycle_err(state));
                    }
                    let cause = match ev.kind {
                        EventKind::Revoked { .. } => DeactivationCause::Revoked,
                        _ => DeactivationCause::Expired,
                    };
                    let slot = repo.by_id[&ev.directive];
                    repo.deactivate(slot, cause, *at);
                    // deactivate() appended an event; the replayed seq wins.
                    repo.events.pop();
                }
            }
            repo.events.push(ev.clone());
            repo.next_seq = ev.seq + 1;
        }
        Ok(repo)
    }

    /// Compacted snapshot: one `kind=consent` line per stored directive, in
    /// commit order. Lifecycle timestamps ride along in the `state` field as
    /// `active@t`, `revoked@t` or `expired@t`.
    pub fn write_snapshot<W: Write>(&self, mut out: W) -> io::Result<()> {
        for d in self.iter() {
            let state = match (d.state, d.deactivation_cause) {
                (LifecycleState::Inactive, Some(DeactivationCause::Revoked)) => {
                    format!("revoked@{}", fmt_opt(d.deactivated_at))
                }
                (LifecycleState::Inactive, _) => format!("expired@{}", fmt_opt(d.deactivated_at)),
                _ => format!("active@{}", fmt_opt(d.activated_at)),
            };
            writeln!(
                out,
                "kind=consent\tid={}\tgrantee={}\ttargetkind={}\ttargetid={}\teffect={}\tstart={}\tend={}\tstate={}",
                d.id,
                d.grantee,
                d.target.kind_str(),
                d.target.id_str(),
                d.effect,
                d.validity.start,
                fmt_opt(d.validity.end),
                state
            )?;
        }
        Ok(())
    }

    pub fn snapshot_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_snapshot(&mut buf).expect("in-memory write");
        String::from_utf8(buf).expect("UTF-8")
    }

    pub fn load_snapshot(text: &str) -> Result<Self, ParseError> {
        let mut repo = ConsentRepository::new();
        for (lineno, line) in textfmt::lines(text) {
            let v = textfmt::fields(
                line,
                &[
                    "kind",
                    "id",
                    "grantee",
                    "targetkind",
                    "targetid",
                    "effect",
                    "start",
                    "end",
                    "state",
                ],
                lineno,
            )?;
            if v[0] != "consent" {
                return Err(ParseError::new(lineno, format!("unexpected kind {:?}", v[0])));
            }
            let target =
                Target::from_parts(v[3], v[4]).map_err(|e| ParseError::new(lineno, e))?;
            let validity = parse_validity(v[6], v[7], lineno)?;
            let (state, at) = v[8]
                .split_once('@')
                .ok_or_else(|| ParseError::new(lineno, "state must be name@time"))?;
            let at: Timestamp = textfmt::parse_num(at, "state time", lineno)?;
            let draft = ConsentDirective::draft(
                textfmt::parse_id(v[1], lineno)?,
                textfmt::parse_id(v[2], lineno)?,
                target,
                v[5].parse().map_err(|e: String| ParseError::new(lineno, e))?,
                validity,
            );
            let id = draft.id.clone();
            let stored = |e: ConsentError| ParseError::new(lineno, e.to_string());
            match state {
                "active" => {
                    repo.store_active(draft, at).map_err(stored)?;
                }
                "revoked" | "expired" => {
                    // Activation time is not kept for inactive directives.
                    repo.store_active(draft, at).map_err(stored)?;
                    let slot = repo.by_id[&id];
                    let cause = if state == "revoked" {
                        DeactivationCause::Revoked
                    } else {
                        DeactivationCause::Expired
                    };
                    repo.deactivate(slot, cause, at);
                }
                other => {
                    return Err(ParseError::new(lineno, format!("unknown state {other:?}")))
                }
            }
        }
        Ok(repo)
    }
}

/// Overlap test between a stored directive target and a query target whose
/// enclosing episode is already known.
fn overlaps_within(
    model: &DataModel,
    stored: &Target,
    query: &Target,
    query_episode: &crate::model::EpisodeId,
) -> Result<bool, ModelError> {
    Ok(match (stored, query) {
        (a, b) if a == b => true,
        (Target::Episode(e), Target::Record(_)) => e == query_episode,
        (Target::Record(_), Target::Episode(_)) => {
            &model.target_episode(stored)?.id == query_episode
        }
        _ => false,
    })
}

fn state_name(state: Option<LifecycleState>) -> &'static str {
    match state {
        None => "absent",
        Some(LifecycleState::Draft) => "draft",
        Some(LifecycleState::Active) => "active",
        Some(LifecycleState::Inactive) => "inactive",
    }
}

fn fmt_opt(v: Option<Timestamp>) -> String {
    v.map_or_else(|| "-".to_owned(), |t| t.to_string())
}

fn parse_opt(v: &str, what: &str, lineno: usize) -> Result<Option<Timestamp>, ParseError> {
    if v == "-" {
        Ok(None)
    } else {
        textfmt::parse_num(v, what, lineno).map(Some)
    }
}

fn parse_validity(start: &str, end: &str, lineno: usize) -> Result<ValidityInterval, ParseError> {
    let start = textfmt::parse_num(start, "start", lineno)?;
    let end = parse_opt(end, "end", lineno)?;
    ValidityInterval::new(start, end).map_err(|e| ParseError::new(lineno, e.to_string()))
}

fn parse_event(line: &str, lineno: usize) -> Result<RepoEvent, ParseError> {
    let mut head = line.splitn(4, '\t');
    let seq = textfmt::parse_num(head.next().unwrap_or(""), "sequence number", lineno)?;
    let name = head
        .next()
        .ok_or_else(|| ParseError::new(lineno, "missing event name"))?;
    let directive = textfmt::parse_id(
        head.next()
            .ok_or_else(|| ParseError::new(lineno, "missing directive id"))?,
        lineno,
    )?;
    let payload = head.next().unwrap_or("");
    let kind = match name {
        "created" => {
            let v = textfmt::fields(
                payload,
                &["grantee", "target", "effect", "start", "end", "at"],
                lineno,
            )?;
            EventKind::Created {
                grantee: textfmt::parse_id(v[0], lineno)?,
                target: v[1].parse().map_err(|e: String| ParseError::new(lineno, e))?,
                effect: v[2].parse().map_err(|e: String| ParseError::new(lineno, e))?,
                validity: parse_validity(v[3], v[4], lineno)?,
                at: parse_opt(v[5], "at", lineno)?,
            }
        }
        "activated" | "revoked" | "expired" => {
            let v = textfmt::fields(payload, &["at"], lineno)?;
            let at = textfmt::parse_num(v[0], "at", lineno)?;
            match name {
                "activated" => EventKind::Activated { at },
                "revoked" => EventKind::Revoked { at },
                _ => EventKind::Expired { at },
            }
        }
        other => return Err(ParseError::new(lineno, format!("unknown event {other:?}"))),
    };
    Ok(RepoEvent {
        seq,
        directive,
        kind,
    })
}

/// A repository behind a single readers-writer lock. Writers (activation,
/// revocation, sweeps) are serialized; decisions read consistent snapshots.
#[derive(Debug, Default)]
pub struct SharedRepository {
    inner: RwLock<ConsentRepository>,
}

impl SharedRepository {
    pub fn new(repo: ConsentRepository) -> Self {
        Self {
            inner: RwLock::new(repo),
        }
    }

    pub fn read(&self) -> RwLockReadGuard<'_, ConsentRepository> {
        self.inner.read()
    }

    pub fn write(&self) -> RwLockWriteGuard<'_, ConsentRepository> {
        self.inner.write()
    }

    pub fn into_inner(self) -> ConsentRepository {
        self.inner.into_inner()
    }
}
