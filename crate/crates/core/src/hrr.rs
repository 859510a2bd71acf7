//! Health record repository side of emergency access: token-gated,
//! label-bounded episode retrieval, clinical briefs, disclosure ratios and
//! the retrieval audit log.

use std::collections::BTreeSet;
use std::fmt;
use std::io::{self, Write};

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::eaa::{verify, EmergencyOverrideToken, VerificationKey, VerificationResult};
use crate::model::{DataModel, EpisodeId, Label, RecordId, TokenId, UserId};
use crate::textfmt::{self, ParseError};
use crate::Timestamp;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AuditOutcome {
    Disclosed,
    RefusedInvalidToken,
    /// Outside the token's window, either side.
    RefusedExpired,
}

impl AuditOutcome {
    pub fn as_str(self) -> &'static str {
        match self {
            AuditOutcome::Disclosed => "disclosed",
            AuditOutcome::RefusedInvalidToken => "refused_invalid_token",
            AuditOutcome::RefusedExpired => "refused_expired",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "disclosed" => AuditOutcome::Disclosed,
            "refused_invalid_token" => AuditOutcome::RefusedInvalidToken,
            "refused_expired" => AuditOutcome::RefusedExpired,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditEntry {
    pub seq: u64,
    pub ts: Timestamp,
    pub token_id: TokenId,
    pub requester: UserId,
    pub patient: UserId,
    pub scope: BTreeSet<Label>,
    pub disclosed_episodes: Vec<EpisodeId>,
    pub outcome: AuditOutcome,
}

impl fmt::Display for AuditEntry {
    /// `seq ts token requester patient scope outcome episodes`, tab-separated,
    /// lists comma-joined, `-` for empty.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            self.seq,
            self.ts,
            self.token_id,
            self.requester,
            self.patient,
            join_or_dash(self.scope.iter().map(Label::as_str)),
            self.outcome.as_str(),
            join_or_dash(self.disclosed_episodes.iter().map(EpisodeId::as_str)),
        )
    }
}

fn join_or_dash<'a>(items: impl Iterator<Item = &'a str>) -> String {
    let v: Vec<&str> = items.collect();
    if v.is_empty() {
        "-".to_owned()
    } else {
        v.join(",")
    }
}

fn split_list<T>(field: &str, lineno: usize) -> Result<Vec<T>, ParseError>
where
    T: std::str::FromStr<Err = crate::InvalidId>,
{
    if field == "-" {
        return Ok(Vec::new());
    }
    field.split(',').map(|s| textfmt::parse_id(s, lineno)).collect()
}

pub fn parse_audit_log(text: &str) -> Result<Vec<AuditEntry>, ParseError> {
    textfmt::lines(text)
        .map(|(lineno, line)| {
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 8 {
                return Err(ParseError::new(lineno, format!("expected 8 fields, found {}", f.len())));
            }
            Ok(AuditEntry {
                seq: textfmt::parse_num(f[0], "seq", lineno)?,
                ts: textfmt::parse_num(f[1], "ts", lineno)?,
                token_id: textfmt::parse_id(f[2], lineno)?,
                requester: textfmt::parse_id(f[3], lineno)?,
                patient: textfmt::parse_id(f[4], lineno)?,
                scope: split_list(f[5], lineno)?.into_iter().collect(),
                outcome: AuditOutcome::parse(f[6])
                    .ok_or_else(|| ParseError::new(lineno, format!("unknown outcome {:?}", f[6])))?,
                disclosed_episodes: split_list(f[7], lineno)?,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BriefEpisode {
    pub id: EpisodeId,
    /// Episode tags that fall inside the token scope.
    pub matched: BTreeSet<Label>,
    pub records: Vec<RecordId>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClinicalBrief {
    pub patient: UserId,
    pub episodes: Vec<BriefEpisode>,
    pub generated_at: Timestamp,
    pub token_id: TokenId,
}

impl ClinicalBrief {
    /// The disclosed record set, episode by episode.
    pub fn records(&self) -> impl Iterator<Item = &RecordId> {
        self.episodes.iter().flat_map(|e| e.records.iter())
    }

    pub fn record_count(&self) -> usize {
        self.episodes.iter().map(|e| e.records.len()).sum()
    }

    pub fn write_text<W: Write>(&self, mut out: W) -> io::Result<()> {
        writeln!(
            out,
            "brief patient={} token={} generated_at={}",
            self.patient, self.token_id, self.generated_at
        )?;
        for e in &self.episodes {
            writeln!(
                out,
                "episode {} labels={}",
                e.id,
                join_or_dash(e.matched.iter().map(Label::as_str))
            )?;
            for r in &e.records {
                writeln!(out, "  record {r}")?;
            }
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut buf = Vec::new();
        self.write_text(&mut buf).expect("in-memory write");
        String::from_utf8(buf).expect("UTF-8")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum HrrError {
    #[error("episode {0} is outside the token's patient or scope")]
    ScopeViolation(EpisodeId),
    #[error("patient {0} has no records")]
    EmptyRecordSet(UserId),
}

/// |D| out of |R|.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DisclosureRatio {
    pub disclosed: usize,
    pub total: usize,
}

impl DisclosureRatio {
    pub fn eta(&self) -> f64 {
        self.disclosed as f64 / self.total as f64
    }

    pub fn pruned_percent(&self) -> f64 {
        100.0 * (self.total - self.disclosed) as f64 / self.total as f64
    }

    /// Exact test of `eta == num / den`.
    pub fn eta_is(&self, num: u64, den: u64) -> bool {
        self.disclosed as u64 * den == num * self.total as u64
    }

    /// Exact test of `pruned% == num / den`.
    pub fn pruned_is(&self, num: u64, den: u64) -> bool {
        100 * (self.total - self.disclosed) as u64 * den == num * self.total as u64
    }
}

impl fmt::Display for DisclosureRatio {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "eta={:.3} pruned={:.1}%", self.eta(), self.pruned_percent())
    }
}

pub fn disclosure_ratio(
    brief: &ClinicalBrief,
    model: &DataModel,
) -> Result<DisclosureRatio, HrrError> {
    let total = model.patient_record_count(&brief.patient);
    if total == 0 {
        return Err(HrrError::EmptyRecordSet(brief.patient.clone()));
    }
    Ok(DisclosureRatio {
        disclosed: brief.record_count(),
        total,
    })
}

/// Emergency retrieval controller with its audit log.
#[derive(Debug)]
pub struct HrrStore {
    key: VerificationKey,
    audit: Mutex<Vec<AuditEntry>>,
}

impl HrrStore {
    pub fn new(key: VerificationKey) -> Self {
        Self {
            key,
            audit: Mutex::new(Vec::new()),
        }
    }

    /// Episodes of the token's patient whose tags meet the token scope, or
    /// nothing if the token does not verify. Every call is audited.
    pub fn retrieve(
        &self,
        token: &EmergencyOverrideToken,
        model: &DataModel,
        now: Timestamp,
    ) -> BTreeSet<EpisodeId> {
        let (outcome, episodes) = match verify(token, now, &self.key) {
            VerificationResult::Valid => (
                AuditOutcome::Disclosed,
                model
                    .episodes_of(&token.patient)
                    .iter()
                    .filter(|e| {
                        model
                            .episode(e)
                            .is_some_and(|ep| !ep.tags.is_disjoint(&token.scope))
                    })
                    .cloned()
                    .collect(),
            ),
            VerificationResult::BadSignature => (AuditOutcome::RefusedInvalidToken, BTreeSet::new()),
            VerificationResult::Expired | VerificationResult::NotYetValid => {
                (AuditOutcome::RefusedExpired, BTreeSet::new())
            }
        };
        let mut audit = self.audit.lock();
        let seq = audit.last().map_or(1, |e| e.seq + 1);
        audit.push(AuditEntry {
            seq,
            ts: now,
            token_id: token.token_id.clone(),
            requester: token.requester.clone(),
            patient: token.patient.clone(),
            scope: token.scope.clone(),
            disclosed_episodes: episodes.iter().cloned().collect(),
            outcome,
        });
        episodes
    }

    /// Brief over previously retrieved episodes, ordered by episode id then
    /// record id. Re-checks every episode against the token.
    pub fn clinical_brief(
        &self,
        episodes: &BTreeSet<EpisodeId>,
        token: &EmergencyOverrideToken,
        model: &DataModel,
        now: Timestamp,
    ) -> Result<ClinicalBrief, HrrError> {
        let mut out = Vec::with_capacity(episodes.len());
        for id in episodes {
            let ep = model
                .episode(id)
                .filter(|ep| ep.patient == token.patient)
                .ok_or_else(|| HrrError::ScopeViolation(id.clone()))?;
            let matched: BTreeSet<Label> = ep.tags.intersection(&token.scope).cloned().collect();
            if matched.is_empty() {
                return Err(HrrError::ScopeViolation(id.clone()));
            }
            let mut records = model.records_in(id).to_vec();
            records.sort();
            out.push(BriefEpisode {
                id: id.clone(),
                matched,
                records,
            });
        }
        Ok(ClinicalBrief {
            patient: token.patient.clone(),
            episodes: out,
            generated_at: now,
            token_id: token.token_id.clone(),
        })
    }

    pub fn audit_entries(&self) -> Vec<AuditEntry> {
        self.audit.lock().clone()
    }

    pub fn audit_for_patient(&self, patient: &UserId) -> Vec<AuditEntry> {
        self.audit
            .lock()
            .iter()
            .filter(|e| &e.patient == patient)
            .cloned()
            .collect()
    }

    pub fn write_audit_log<W: Write>(&self, mut out: W) -> io::Result<()> {
        for e in self.audit.lock().iter() {
            writeln!(out, "{e}")?;
        }
        Ok(())
    }

    pub fn audit_log_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_audit_log(&mut buf).expect("in-memory write");
        String::from_utf8(buf).expect("UTF-8")
    }
}
