//! Seeded generators for experiment inputs: health-record metadata, draft
//! streams with injected anomalies, request workloads and emergency
//! fixtures. Every output is a pure function of its spec and seed.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::consent::{ConsentDirective, ConsentRepository, Effect, ValidityInterval};
use crate::cpdp::{decide, RoleGate, StandardRequest};
use crate::ecdm::{
    derive_scope, esd, ActivationRule, BioObservationSet, EmergencyState, RelevanceModel,
};
use crate::model::{
    DataModel, DirectiveId, Episode, EpisodeId, Label, Record, RecordId, Role, Target, UserId,
};
use crate::textfmt::{self, ParseError};
use crate::Timestamp;

pub const RECORD_KINDS: [&str; 4] = ["note", "lab", "prescription", "imaging"];

// Independent RNG streams derived from one seed.
const STREAM_MODEL: u64 = 1;
const STREAM_BASE: u64 = 2;
const STREAM_ANOMALY: u64 = 3;
const STREAM_SHUFFLE: u64 = 4;
const STREAM_PLAN: u64 = 5;
const STREAM_PICK: u64 = 6;
const STREAM_FIXTURE: u64 = 7;

fn rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

/// `⌊n·rate⌋`, robust to rates like 0.1 that are not exact in binary.
pub fn floor_count(n: usize, rate: f64) -> usize {
    (n as f64 * rate + 1e-9).floor() as usize
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SynthError {
    #[error("model too small: need {needed} {what}, have {available}")]
    InsufficientModel {
        what: &'static str,
        needed: usize,
        available: usize,
    },
    #[error("infeasible fixture: {0}")]
    InfeasibleSpec(String),
    #[error("invalid spec: {0}")]
    InvalidSpec(String),
}

fn uid(prefix: &str, i: usize) -> UserId {
    UserId::generated(format!("{prefix}{i}"))
}

/// `e` episodes over ⌈e/10⌉ professionals and ⌈e/5⌉ patients, each with
/// 1 to 5 records and one or two labels from the default relevance model.
pub fn gen_model(e: usize, seed: u64) -> DataModel {
    let labels: Vec<Label> = RelevanceModel::default_model().labels().iter().cloned().collect();
    let hps = e.div_ceil(10).max(1);
    let pts = e.div_ceil(5).max(1);
    let mut r = rng(seed, STREAM_MODEL);
    let mut m = DataModel::new();
    for i in 1..=hps {
        m.register_user(uid("hp", i), Role::HealthcareProfessional)
            .expect("fresh id");
    }
    for i in 1..=pts {
        m.register_user(uid("pt", i), Role::Patient).expect("fresh id");
    }
    let mut next_record = 1;
    for i in 1..=e {
        let n_tags = r.gen_range(1..=2);
        let tags = labels.choose_multiple(&mut r, n_tags).cloned().collect();
        let ep = EpisodeId::generated(format!("e{i}"));
        m.add_episode(Episode {
            id: ep.clone(),
            creator: uid("hp", r.gen_range(1..=hps)),
            patient: uid("pt", r.gen_range(1..=pts)),
            tags,
        })
        .expect("fresh episode");
        for _ in 0..r.gen_range(1..=5) {
            m.add_record(Record {
                id: RecordId::generated(format!("r{next_record}")),
                episode: ep.clone(),
                kind: RECORD_KINDS[r.gen_range(0..RECORD_KINDS.len())].to_owned(),
            })
            .expect("fresh record");
            next_record += 1;
        }
    }
    m
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StreamSpec {
    pub episode_count: usize,
    pub directive_count: usize,
    pub conflict_rate: f64,
    pub redundancy_rate: f64,
    pub seed: u64,
}

impl StreamSpec {
    /// Anomaly rate split evenly between conflicts and redundancies.
    pub fn with_anomaly_rate(episode_count: usize, directive_count: usize, rate: f64, seed: u64) -> Self {
        Self {
            episode_count,
            directive_count,
            conflict_rate: rate / 2.0,
            redundancy_rate: rate / 2.0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let ok = |r: f64| (0.0..=1.0).contains(&r);
        if !ok(self.conflict_rate)
            || !ok(self.redundancy_rate)
            || self.conflict_rate + self.redundancy_rate > 1.0 + 1e-12
        {
            return Err(SynthError::InvalidSpec(format!(
                "rates {} and {} must lie in [0,1] and sum to at most 1",
                self.conflict_rate, self.redundancy_rate
            )));
        }
        Ok(())
    }

    pub fn conflict_count(&self) -> usize {
        floor_count(self.directive_count, self.conflict_rate)
    }

    pub fn redundant_count(&self) -> usize {
        floor_count(self.directive_count, self.redundancy_rate)
    }
}

/// Ground-truth class of a generated draft.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DraftClass {
    Clean,
    /// Opposes the named stream element.
    Conflict(DirectiveId),
    /// Duplicates the named stream element.
    Redundant(DirectiveId),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AnnotatedDraft {
    pub directive: ConsentDirective,
    pub class: DraftClass,
}

impl AnnotatedDraft {
    pub fn counterpart(&self) -> Option<&DirectiveId> {
        match &self.class {
            DraftClass::Clean => None,
            DraftClass::Conflict(id) | DraftClass::Redundant(id) => Some(id),
        }
    }
}

/// Draft stream: clean base directives over distinct episodes, plus
/// opposite-effect and identical copies of some bases, shuffled.
///
/// The first base of each professional (the anchors) is always a Permit and
/// is never copied when the stream leaves room. Base `i` depends only on
/// `i`, the model and the seed, so raising the anomaly rate only truncates
/// the base sequence.
pub fn gen_directive_stream(spec: &StreamSpec, model: &DataModel) -> Result<Vec<AnnotatedDraft>, SynthError> {
    spec.validate()?;
    let n = spec.directive_count;
    let (n_conflict, n_redundant) = (spec.conflict_count(), spec.redundant_count());
    let bases = n - n_conflict - n_redundant;
    let hps: Vec<&UserId> = model
        .users()
        .filter(|(_, r)| *r == Role::HealthcareProfessional)
        .map(|(u, _)| u)
        .collect();
    if hps.len() < 2 {
        return Err(SynthError::InsufficientModel {
            what: "professionals",
            needed: 2,
            available: hps.len(),
        });
    }
    let episodes: Vec<&Episode> = model.episodes().collect();
    if episodes.len() < bases {
        return Err(SynthError::InsufficientModel {
            what: "episodes",
            needed: bases,
            available: episodes.len(),
        });
    }
    if bases == 0 && n_conflict + n_redundant > 0 {
        return Err(SynthError::InvalidSpec("anomalies need at least one base".into()));
    }
    let h = hps.len();

    let mut r = rng(spec.seed, STREAM_BASE);
    let mut perm: Vec<usize> = (0..episodes.len()).collect();
    perm.shuffle(&mut r);
    // Anchors get an episode their grantee did not create.
    for i in 0..h.min(perm.len()) {
        if &episodes[perm[i]].creator == hps[i] {
            if let Some(j) = (i + 1..perm.len()).find(|&j| &episodes[perm[j]].creator != hps[i]) {
                perm.swap(i, j);
            }
        }
    }

    let mut out = Vec::with_capacity(n);
    for (i, &ep_idx) in perm.iter().enumerate().take(bases) {
        let ep = episodes[ep_idx];
        let mut grantee = hps[i % h];
        if &ep.creator == grantee {
            grantee = hps[(i + 1) % h];
        }
        let members = model.records_in(&ep.id);
        let target = if r.gen_bool(0.5) || members.is_empty() {
            Target::Episode(ep.id.clone())
        } else {
            Target::Record(members[r.gen_range(0..members.len())].clone())
        };
        let permit = r.gen_bool(0.8);
        let effect = if i < h || permit { Effect::Permit } else { Effect::Deny };
        let start: Timestamp = r.gen_range(0..1000);
        let end = r
            .gen_bool(0.5)
            .then(|| start + r.gen_range(1000..100_000));
        let directive = ConsentDirective::draft(
            DirectiveId::generated(format!("d{i}")),
            grantee.clone(),
            target,
            effect,
            ValidityInterval::new(start, end).expect("end after start"),
        );
        out.push(AnnotatedDraft {
            directive,
            class: DraftClass::Clean,
        });
    }

    let anomalies = n_conflict + n_redundant;
    let mut ar = rng(spec.seed, STREAM_ANOMALY);
    let (lo, hi) = if bases >= h + anomalies { (h, bases) } else { (0, bases) };
    if hi - lo < anomalies {
        return Err(SynthError::InsufficientModel {
            what: "base directives",
            needed: anomalies,
            available: hi - lo,
        });
    }
    let picks = index::sample(&mut ar, hi - lo, anomalies);
    for (k, off) in picks.iter().enumerate() {
        let base = &out[lo + off].directive;
        let mut copy = base.clone();
        copy.id = DirectiveId::generated(format!("a{k}"));
        let class = if k < n_conflict {
            copy.effect = base.effect.opposite();
            DraftClass::Conflict(base.id.clone())
        } else {
            DraftClass::Redundant(base.id.clone())
        };
        out.push(AnnotatedDraft { directive: copy, class });
    }

    out.shuffle(&mut rng(spec.seed, STREAM_SHUFFLE));
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WorkloadSpec {
    pub request_count: usize,
    pub applicable_fraction: f64,
    pub seed: u64,
}

/// Requests against a committed repository. Exactly
/// `⌊count·fraction⌋` of them are covered by an invariant or an Active
/// Permit; the rest are not.
///
/// Which requests are applicable, which go through the invariants, and which
/// professional asks are drawn from the seed alone. Only target choice looks
/// at the repository.
pub fn gen_workload(
    spec: &WorkloadSpec,
    repo: &ConsentRepository,
    model: &DataModel,
) -> Result<Vec<StandardRequest>, SynthError> {
    if !(0.0..=1.0).contains(&spec.applicable_fraction) {
        return Err(SynthError::InvalidSpec(format!(
            "applicable fraction {} outside [0,1]",
            spec.applicable_fraction
        )));
    }
    let hps: Vec<&UserId> = model
        .users()
        .filter(|(_, r)| *r == Role::HealthcareProfessional)
        .map(|(u, _)| u)
        .collect();
    let records: Vec<&Record> = model.records().collect();
    if hps.is_empty() || records.is_empty() {
        return Err(SynthError::InsufficientModel {
            what: "professionals and records",
            needed: 1,
            available: 0,
        });
    }
    let n_app = floor_count(spec.request_count, spec.applicable_fraction);
    let mut plan = rng(spec.seed, STREAM_PLAN);
    let mut kinds: Vec<bool> = (0..spec.request_count).map(|i| i < n_app).collect();
    kinds.shuffle(&mut plan);

    let mut pick = rng(spec.seed, STREAM_PICK);
    let gate = RoleGate::permissive();
    let mut out = Vec::with_capacity(spec.request_count);
    for applicable in kinds {
        let requester = hps[plan.gen_range(0..hps.len())];
        let via_invariant = plan.gen_range(0..3) == 0;
        let req = if applicable {
            let permits: Vec<&ConsentDirective> = repo
                .grantee_bucket(requester)
                .map(|(d, _)| d)
                .filter(|d| d.effect == Effect::Permit)
                .collect();
            if via_invariant || permits.is_empty() {
                invariant_request(&records, model, &mut pick)
            } else {
                let d = permits[pick.gen_range(0..permits.len())];
                let span = d.validity.end.map_or(100_000, |e| e - d.validity.start);
                StandardRequest {
                    requester: requester.clone(),
                    requester_role: Role::HealthcareProfessional,
                    patient: subject_of(&d.target, model),
                    target: d.target.clone(),
                    ts: d.validity.start + pick.gen_range(0..span),
                }
            }
        } else {
            let mut req = None;
            for _ in 0..64 {
                let rec = records[pick.gen_range(0..records.len())];
                let candidate = StandardRequest {
                    requester: requester.clone(),
                    requester_role: Role::HealthcareProfessional,
                    patient: subject_of(&Target::Record(rec.id.clone()), model),
                    target: Target::Record(rec.id.clone()),
                    ts: pick.gen_range(0..200_000),
                };
                let uncovered = !decide(&candidate, repo, model, &gate).is_permit();
                req = Some(candidate);
                if uncovered {
                    break;
                }
            }
            req.expect("at least one attempt")
        };
        out.push(req);
    }
    Ok(out)
}

fn subject_of(target: &Target, model: &DataModel) -> UserId {
    model
        .target_episode(target)
        .map(|e| e.patient.clone())
        .expect("generated targets exist")
}

fn invariant_request(records: &[&Record], model: &DataModel, r: &mut ChaCha8Rng) -> StandardRequest {
    let rec = records[r.gen_range(0..records.len())];
    let ep = model.episode(&rec.episode).expect("record has an episode");
    let (requester, role) = if r.gen_bool(0.5) {
        (ep.creator.clone(), Role::HealthcareProfessional)
    } else {
        (ep.patient.clone(), Role::Patient)
    };
    StandardRequest {
        requester,
        requester_role: role,
        patient: ep.patient.clone(),
        target: Target::Record(rec.id.clone()),
        ts: r.gen_range(0..200_000),
    }
}

/// One row of an emergency experiment.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EmergencyFixtureSpec {
    pub case_id: String,
    pub state: EmergencyState,
    pub total_records: usize,
    pub relevant_records: usize,
    pub seed: u64,
}

impl EmergencyFixtureSpec {
    /// Parses `case=…\tstate=…\ttotal=…\trelevant=…\tseed=…` lines; `#`
    /// starts a comment line.
    pub fn parse_list(text: &str) -> Result<Vec<Self>, ParseError> {
        textfmt::lines(text)
            .filter(|(_, l)| !l.trim_start().starts_with('#'))
            .map(|(lineno, line)| {
                let v = textfmt::fields(line, &["case", "state", "total", "relevant", "seed"], lineno)?;
                Ok(Self {
                    case_id: v[0].to_owned(),
                    state: textfmt::parse_id(v[1], lineno)?,
                    total_records: textfmt::parse_num(v[2], "total", lineno)?,
                    relevant_records: textfmt::parse_num(v[3], "relevant", lineno)?,
                    seed: textfmt::parse_num(v[4], "seed", lineno)?,
                })
            })
            .collect()
    }
}

impl fmt::Display for EmergencyFixtureSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "case={}\tstate={}\ttotal={}\trelevant={}\tseed={}",
            self.case_id, self.state, self.total_records, self.relevant_records, self.seed
        )
    }
}

#[derive(Debug, Clone)]
pub struct EmergencyFixture {
    pub model: DataModel,
    pub observations: BioObservationSet,
    pub patient: UserId,
    pub requester: UserId,
}

fn unit_for(metric: &str) -> &'static str {
    match metric {
        "heartRate" | "respRate" => "1/min",
        "spo2" => "percent",
        "systolicBP" => "mmHg",
        "glucose" => "mg/dL",
        "nihss" => "score",
        _ => "",
    }
}

/// Observations activating exactly `state`: a search over each rule
/// constant and its neighbours, with unrelated metrics left out.
pub fn observations_for(
    state: &EmergencyState,
    g: &RelevanceModel,
    captured_at: Timestamp,
) -> Result<BioObservationSet, SynthError> {
    let rule: &ActivationRule = g
        .rule(state)
        .ok_or_else(|| SynthError::InfeasibleSpec(format!("unknown state {state}")))?;
    let mut candidates: BTreeMap<&str, BTreeSet<i64>> = BTreeMap::new();
    for (metric, _, c) in rule.comparisons() {
        let c = c.round() as i64;
        candidates.entry(metric).or_default().extend([c - 1, c, c + 1]);
    }
    let axes: Vec<(&str, Vec<i64>)> = candidates
        .into_iter()
        .map(|(m, vs)| (m, vs.into_iter().collect()))
        .collect();
    let combos: usize = axes.iter().map(|(_, v)| v.len()).product();
    if combos > 1 << 20 {
        return Err(SynthError::InfeasibleSpec(format!("rule for {state} is too wide to search")));
    }
    let want: BTreeSet<EmergencyState> = [state.clone()].into();
    for mut k in 0..combos {
        let mut obs = BioObservationSet::new(captured_at, "synthetic-monitor");
        for (metric, values) in &axes {
            let v = values[k % values.len()];
            k /= values.len();
            obs.insert(*metric, v as f64, unit_for(metric))
                .expect("integers are finite");
        }
        if esd(&obs, g) == want {
            return Ok(obs);
        }
    }
    Err(SynthError::InfeasibleSpec(format!(
        "no observation activates {state} alone"
    )))
}

/// Splits `n` records into episodes of 1 to 5.
fn episode_sizes(n: usize, r: &mut ChaCha8Rng) -> Vec<usize> {
    let mut left = n;
    let mut out = Vec::new();
    while left > 0 {
        let k = r.gen_range(1..=5).min(left);
        out.push(k);
        left -= k;
    }
    out
}

/// Single-patient model with exactly `relevant` of `total` records in
/// episodes tagged inside the state's scope, plus observations that
/// activate the state alone.
pub fn gen_emergency_fixture(
    spec: &EmergencyFixtureSpec,
    g: &RelevanceModel,
) -> Result<EmergencyFixture, SynthError> {
    if spec.relevant_records > spec.total_records {
        return Err(SynthError::InfeasibleSpec(format!(
            "{}: relevant {} exceeds total {}",
            spec.case_id, spec.relevant_records, spec.total_records
        )));
    }
    let states: BTreeSet<EmergencyState> = [spec.state.clone()].into();
    let scope: Vec<Label> = derive_scope(&states, g)
        .map_err(|e| SynthError::InfeasibleSpec(e.to_string()))?
        .into_iter()
        .collect();
    let outside: Vec<Label> = g.labels().iter().filter(|l| !scope.contains(l)).cloned().collect();
    if scope.is_empty() {
        return Err(SynthError::InfeasibleSpec(format!("{} has an empty scope", spec.state)));
    }
    if outside.is_empty() && spec.relevant_records < spec.total_records {
        return Err(SynthError::InfeasibleSpec(format!(
            "no labels outside the scope of {}",
            spec.state
        )));
    }
    let observations = observations_for(&spec.state, g, 0)?;

    let mut r = rng(spec.seed, STREAM_FIXTURE);
    let patient = uid("pt", 1);
    let requester = uid("hp", 1);
    let mut m = DataModel::new();
    m.register_user(requester.clone(), Role::HealthcareProfessional).expect("fresh");
    m.register_user(uid("hp", 2), Role::HealthcareProfessional).expect("fresh");
    m.register_user(patient.clone(), Role::Patient).expect("fresh");

    let mut groups: Vec<(usize, bool)> = episode_sizes(spec.relevant_records, &mut r)
        .into_iter()
        .map(|k| (k, true))
        .chain(
            episode_sizes(spec.total_records - spec.relevant_records, &mut r)
                .into_iter()
                .map(|k| (k, false)),
        )
        .collect();
    groups.shuffle(&mut r);

    let mut next_record = 1;
    for (i, (size, relevant)) in groups.into_iter().enumerate() {
        let pool = if relevant { &scope } else { &outside };
        let n_tags = r.gen_range(1..=2.min(pool.len()));
        let tags = pool.choose_multiple(&mut r, n_tags).cloned().collect();
        let ep = EpisodeId::generated(format!("e{}", i + 1));
        m.add_episode(Episode {
            id: ep.clone(),
            creator: uid("hp", 2),
            patient: patient.clone(),
            tags,
        })
        .expect("fresh episode");
        for _ in 0..size {
            m.add_record(Record {
                id: RecordId::generated(format!("r{next_record}")),
                episode: ep.clone(),
                kind: RECORD_KINDS[r.gen_range(0..RECORD_KINDS.len())].to_owned(),
            })
            .expect("fresh record");
            next_record += 1;
        }
    }
    Ok(EmergencyFixture {
        model: m,
        observations,
        patient,
        requester,
    })
}
