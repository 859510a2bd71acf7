//! Healthcare data model: users, episodes, records and provenance.
//!
//! Every record belongs to exactly one episode, and every episode links one
//! supervising professional (its creator) to one patient. The provenance
//! helpers [`DataModel::author`] and [`DataModel::subject`] are derived
//! through that association. Semantic tags are stored on episodes; records
//! inherit them.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::io::{self, Write};
use std::str::FromStr;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ids::string_id;
use crate::textfmt::{self, ParseError};

string_id!(
    /// A system user, either a healthcare professional or a patient.
    UserId,
    "user id"
);
string_id!(EpisodeId, "episode id");
string_id!(RecordId, "record id");
string_id!(DirectiveId, "directive id");
string_id!(TokenId, "token id");
string_id!(
    /// Episode-level semantic tag.
    Label,
    "label"
);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Role {
    #[serde(rename = "professional")]
    HealthcareProfessional,
    #[serde(rename = "patient")]
    Patient,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::HealthcareProfessional => "professional",
            Role::Patient => "patient",
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Role {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "professional" => Ok(Role::HealthcareProfessional),
            "patient" => Ok(Role::Patient),
            other => Err(format!("unknown role {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Episode {
    pub id: EpisodeId,
    pub creator: UserId,
    pub patient: UserId,
    pub tags: BTreeSet<Label>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Record {
    pub id: RecordId,
    pub episode: EpisodeId,
    /// Free-form category (e.g. `lab`, `note`), consulted by role gates.
    pub kind: String,
}

/// What a directive or request refers to.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(tag = "kind", content = "id", rename_all = "lowercase")]
pub enum Target {
    Episode(EpisodeId),
    Record(RecordId),
}

impl Target {
    pub fn kind_str(&self) -> &'static str {
        match self {
            Target::Episode(_) => "episode",
            Target::Record(_) => "record",
        }
    }

    pub fn id_str(&self) -> &str {
        match self {
            Target::Episode(e) => e.as_str(),
            Target::Record(r) => r.as_str(),
        }
    }

    pub fn from_parts(kind: &str, id: &str) -> Result<Self, String> {
        match kind {
            "episode" => EpisodeId::new(id).map(Target::Episode).map_err(|e| e.to_string()),
            "record" => RecordId::new(id).map(Target::Record).map_err(|e| e.to_string()),
            other => Err(format!("unknown target kind {other:?}")),
        }
    }
}

impl fmt::Display for Target {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.kind_str(), self.id_str())
    }
}

impl FromStr for Target {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (kind, id) = s
            .split_once(':')
            .ok_or_else(|| format!("target {s:?} is not of the form kind:id"))?;
        Target::from_parts(kind, id)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ModelError {
    #[error("unknown episode {0}")]
    UnknownEpisode(EpisodeId),
    #[error("unknown record {0}")]
    UnknownRecord(RecordId),
    #[error("unknown user {0}")]
    UnknownUser(UserId),
    #[error("user {user} is registered as {existing}, not {requested}")]
    RoleConflict {
        user: UserId,
        existing: Role,
        requested: Role,
    },
    #[error("duplicate episode {0}")]
    DuplicateEpisode(EpisodeId),
    #[error("duplicate record {0}")]
    DuplicateRecord(RecordId),
    #[error("episode {episode} carries undeclared tag {label}")]
    UndeclaredTag { episode: EpisodeId, label: Label },
}

impl ModelError {
    /// True for the "referenced entity does not exist" family.
    pub fn is_unknown_target(&self) -> bool {
        matches!(self, ModelError::UnknownEpisode(_) | ModelError::UnknownRecord(_))
    }
}

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error(transparent)]
    Parse(#[from] ParseError),
    #[error("line {line}: {source}")]
    Model { line: usize, source: ModelError },
}

/// The provenance-bearing entity store.
///
/// Loaded once, then read concurrently; registration methods take `&mut self`.
#[derive(Debug, Clone, Default)]
pub struct DataModel {
    users: IndexMap<UserId, Role>,
    episodes: IndexMap<EpisodeId, Episode>,
    records: IndexMap<RecordId, Record>,
    episode_records: HashMap<EpisodeId, Vec<RecordId>>,
    patient_episodes: HashMap<UserId, Vec<EpisodeId>>,
}

impl DataModel {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register_user(&mut self, user: UserId, role: Role) -> Result<(), ModelError> {
        match self.users.get(&user) {
            Some(&existing) if existing != role => Err(ModelError::RoleConflict {
                user,
                existing,
                requested: role,
            }),
            Some(_) => Ok(()),
            None => {
                self.users.insert(user, role);
                Ok(())
            }
        }
    }

    /// Adds an episode, registering its creator and patient with their roles.
    pub fn add_episode(&mut self, episode: Episode) -> Result<(), ModelError> {
        if self.episodes.contains_key(&episode.id) {
            return Err(ModelError::DuplicateEpisode(episode.id));
        }
        self.check_role(&episode.creator, Role::HealthcareProfessional)?;
        self.check_role(&episode.patient, Role::Patient)?;
        self.register_user(episode.creator.clone(), Role::HealthcareProfessional)?;
        self.register_user(episode.patient.clone(), Role::Patient)?;
        self.patient_episodes
            .entry(episode.patient.clone())
            .or_default()
            .push(episode.id.clone());
        self.episode_records.entry(episode.id.clone()).or_default();
        self.episodes.insert(episode.id.clone(), episode);
        Ok(())
    }

    pub fn add_record(&mut self, record: Record) -> Result<(), ModelError> {
        if self.records.contains_key(&record.id) {
            return Err(ModelError::DuplicateRecord(record.id));
        }
        let members = self
            .episode_records
            .get_mut(&record.episode)
            .ok_or_else(|| ModelError::UnknownEpisode(record.episode.clone()))?;
        members.push(record.id.clone());
        self.records.insert(record.id.clone(), record);
        Ok(())
    }

    fn check_role(&self, user: &UserId, role: Role) -> Result<(), ModelError> {
        match self.users.get(user) {
            Some(&existing) if existing != role => Err(ModelError::RoleConflict {
                user: user.clone(),
                existing,
                requested: role,
            }),
            _ => Ok(()),
        }
    }

    pub fn role(&self, user: &UserId) -> Option<Role> {
        self.users.get(user).copied()
    }

    pub fn episode(&self, id: &EpisodeId) -> Option<&Episode> {
        self.episodes.get(id)
    }

    pub fn record(&self, id: &RecordId) -> Option<&Record> {
        self.records.get(id)
    }

    pub fn users(&self) -> impl Iterator<Item = (&UserId, Role)> {
        self.users.iter().map(|(u, r)| (u, *r))
    }

    pub fn episodes(&self) -> impl Iterator<Item = &Episode> {
        self.episodes.values()
    }

    pub fn records(&self) -> impl Iterator<Item = &Record> {
        self.records.values()
    }

    pub fn episode_count(&self) -> usize {
        self.episodes.len()
    }

    pub fn record_count(&self) -> usize {
        self.records.len()
    }

    /// Records of an episode, in registration order.
    pub fn records_in(&self, episode: &EpisodeId) -> &[RecordId] {
        self.episode_records
            .get(episode)
            .map(Vec::as_slice)
            .unwrap_or(&[])
    }

    /// Episodes whose subject is `patient`, in registration order.
    pub fn episodes_of(&self, patient: &UserId) -> &[EpisodeId] {
        self.patient_episodes
            .get(patient)
            .map(Vec::as_slice)
            .unwrap_or(&[])
    }

    /// Total number of records pertaining to `patient`.
    pub fn patient_record_count(&self, patient: &UserId) -> usize {
        self.episodes_of(patient)
            .iter()
            .map(|e| self.records_in(e).len())
            .sum()
    }

    fn episode_of(&self, record: &Record) -> Result<&Episode, ModelError> {
        self.episodes
            .get(&record.episode)
            .ok_or_else(|| ModelError::UnknownEpisode(record.episode.clone()))
    }

    /// The professional responsible for `record`: the creator of its episode.
    pub fn author(&self, record: &Record) -> Result<&UserId, ModelError> {
        self.episode_of(record).map(|e| &e.creator)
    }

    /// The patient `record` pertains to.
    pub fn subject(&self, record: &Record) -> Result<&UserId, ModelError> {
        self.episode_of(record).map(|e| &e.patient)
    }

    /// Whether `record` falls within `target`.
    pub fn in_scope(&self, record: &RecordId, target: &Target) -> Result<bool, ModelError> {
        let rec = self
            .records
            .get(record)
            .ok_or_else(|| ModelError::UnknownRecord(record.clone()))?;
        Ok(match target {
            Target::Record(r) => r == record,
            Target::Episode(e) => *e == rec.episode,
        })
    }

    /// The episode a target lives in (the episode itself, or the record's).
    pub fn target_episode(&self, target: &Target) -> Result<&Episode, ModelError> {
        match target {
            Target::Episode(e) => self
                .episodes
                .get(e)
                .ok_or_else(|| ModelError::UnknownEpisode(e.clone())),
            Target::Record(r) => {
                let rec = self
                    .records
                    .get(r)
                    .ok_or_else(|| ModelError::UnknownRecord(r.clone()))?;
                self.episode_of(rec)
            }
        }
    }

    /// Author of a target; for an episode, its creator.
    pub fn target_author(&self, target: &Target) -> Result<&UserId, ModelError> {
        self.target_episode(target).map(|e| &e.creator)
    }

    pub fn target_exists(&self, target: &Target) -> bool {
        self.target_episode(target).is_ok()
    }

    /// Whether two targets share at least one record's worth of scope: equal
    /// targets, or an episode and a record inside it.
    pub fn scopes_overlap(&self, a: &Target, b: &Target) -> Result<bool, ModelError> {
        Ok(match (a, b) {
            (Target::Episode(x), Target::Episode(y)) => {
                self.target_episode(a)?;
                self.target_episode(b)?;
                x == y
            }
            (Target::Record(x), Target::Record(y)) => {
                self.target_episode(a)?;
                self.target_episode(b)?;
                x == y
            }
            (Target::Episode(e), rec @ Target::Record(_))
            | (rec @ Target::Record(_), Target::Episode(e)) => {
                let outer = self.target_episode(&Target::Episode(e.clone()))?;
                self.target_episode(rec)?.id == outer.id
            }
        })
    }

    /// Checks every episode tag against a declared label set.
    pub fn check_tags(&self, declared: &BTreeSet<Label>) -> Result<(), ModelError> {
        for ep in self.episodes.values() {
            if let Some(label) = ep.tags.iter().find(|l| !declared.contains(*l)) {
                return Err(ModelError::UndeclaredTag {
                    episode: ep.id.clone(),
                    label: label.clone(),
                });
            }
        }
        Ok(())
    }

    /// Writes the dataset text form: user lines, then each episode followed
    /// by its records.
    pub fn write_dataset<W: Write>(&self, mut out: W) -> io::Result<()> {
        for (user, role) in &self.users {
            writeln!(out, "kind=user\tid={user}\trole={role}")?;
        }
        for ep in self.episodes.values() {
            let tags: Vec<&str> = ep.tags.iter().map(Label::as_str).collect();
            writeln!(
                out,
                "kind=episode\tid={}\tcreator={}\tpatient={}\ttags={}",
                ep.id,
                ep.creator,
                ep.patient,
                tags.join(",")
            )?;
            for rid in self.records_in(&ep.id) {
                let rec = &self.records[rid];
                writeln!(
                    out,
                    "kind=record\tid={}\tepisode={}\tcategory={}",
                    rec.id, rec.episode, rec.kind
                )?;
            }
        }
        Ok(())
    }

    pub fn to_dataset_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_dataset(&mut buf).expect("writing to a Vec cannot fail");
        String::from_utf8(buf).expect("dataset text is UTF-8")
    }

    pub fn parse_dataset(text: &str) -> Result<Self, DatasetError> {
        let mut model = DataModel::new();
        for (lineno, line) in textfmt::lines(text) {
            let model_err = |source| DatasetError::Model { line: lineno, source };
            match textfmt::kind_of(line) {
                Some("user") => {
                    let v = textfmt::fields(line, &["kind", "id", "role"], lineno)?;
                    let role = v[2]
                        .parse()
                        .map_err(|e: String| ParseError::new(lineno, e))?;
                    model
                        .register_user(textfmt::parse_id(v[1], lineno)?, role)
                        .map_err(model_err)?;
                }
                Some("episode") => {
                    let v = textfmt::fields(
                        line,
                        &["kind", "id", "creator", "patient", "tags"],
                        lineno,
                    )?;
                    let tags = v[4]
                        .split(',')
                        .filter(|t| !t.is_empty())
                        .map(|t| textfmt::parse_id(t, lineno))
                        .collect::<Result<_, _>>()?;
                    model
                        .add_episode(Episode {
                            id: textfmt::parse_id(v[1], lineno)?,
                            creator: textfmt::parse_id(v[2], lineno)?,
                            patient: textfmt::parse_id(v[3], lineno)?,
                            tags,
                        })
                        .map_err(model_err)?;
                }
                Some("record") => {
                    let v =
                        textfmt::fields(line, &["kind", "id", "episode", "category"], lineno)?;
                    if v[3].contains(['\t', '\n']) {
                        return Err(ParseError::new(lineno, "invalid category").into());
                    }
                    model
                        .add_record(Record {
                            id: textfmt::parse_id(v[1], lineno)?,
                            episode: textfmt::parse_id(v[2], lineno)?,
                            kind: v[3].to_owned(),
                        })
                        .map_err(model_err)?;
                }
                other => {
                    return Err(ParseError::new(
                        lineno,
                        format!("unexpected entity kind {other:?}"),
                    )
                    .into())
                }
            }
        }
        Ok(model)
    }
}
