use std::collections::BTreeSet;
use std::str::FromStr;

use cbac_core::bench::emergency_path;
use cbac_core::ccam::{scan_violations, validate_and_commit, ConflictPolicy, OverlapMode, ValidationOutcome};
use cbac_core::consent::{ConsentDirective, ConsentRepository, Effect, ValidityInterval};
use cbac_core::cpdp::{EngineKind, EvalStats, RoleGate, StandardRequest};
use cbac_core::eaa::{Eaa, EaaKeyMaterial};
use cbac_core::ecdm::{build_context, edcf, esd, BioObservationSet, BiometricRegistry, PatientClaim, RelevanceModel};
use cbac_core::hrr::{disclosure_ratio, HrrStore};
use cbac_core::model::{DataModel, Role, Target};
use cbac_core::synth::{gen_model, EmergencyFixtureSpec};
use cbac_core::Timestamp;
use pyo3::exceptions::{PyKeyError, PyPermissionError, PyValueError};
use pyo3::prelude::*;

fn value_err(e: impl ToString) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn parse<T: FromStr>(text: &str) -> PyResult<T>
where
    T::Err: ToString,
{
    text.parse().map_err(value_err)
}

fn overlap_mode(name: &str) -> PyResult<OverlapMode> {
    match name {
        "exact" => Ok(OverlapMode::ExactTarget),
        "scope" => Ok(OverlapMode::ScopeOverlap),
        other => Err(value_err(format!("unknown overlap mode {other:?}"))),
    }
}

fn relevance(config: Option<&str>) -> PyResult<RelevanceModel> {
    match config {
        Some(text) => RelevanceModel::parse(text).map_err(value_err),
        None => Ok(RelevanceModel::default_model()),
    }
}

fn observations(values: Vec<(String, f64)>, captured_at: Timestamp) -> PyResult<BioObservationSet> {
    let mut obs = BioObservationSet::new(captured_at, "py");
    for (metric, value) in values {
        obs.insert(metric, value, "").map_err(value_err)?;
    }
    Ok(obs)
}

fn sorted<T: ToString>(items: &BTreeSet<T>) -> Vec<String> {
    items.iter().map(ToString::to_string).collect()
}

/// Outcome of submitting a draft directive.
#[pyclass(frozen, get_all, skip_from_py_object)]
#[derive(Clone)]
pub struct Admission {
    /// `accepted`, `conflict`, `redundant` or `invariant_violation`.
    pub outcome: String,
    /// The new id, or the conflicting or covering directive.
    pub directive: Option<String>,
    pub detail: Option<String>,
}

#[pymethods]
impl Admission {
    fn __repr__(&self) -> String {
        format!("Admission({}, {:?})", self.outcome, self.directive)
    }
}

impl From<ValidationOutcome> for Admission {
    fn from(v: ValidationOutcome) -> Self {
        let (outcome, directive, detail) = match v {
            ValidationOutcome::Accepted(id) => ("accepted", Some(id.to_string()), None),
            ValidationOutcome::RejectedConflict(id) => ("conflict", Some(id.to_string()), None),
            ValidationOutcome::RejectedRedundant(id) => ("redundant", Some(id.to_string()), None),
            ValidationOutcome::RejectedInvariant(v) => ("invariant_violation", None, Some(v.to_string())),
        };
        Self {
            outcome: outcome.into(),
            directive,
            detail,
        }
    }
}

/// Result of a standard access request.
#[pyclass(frozen, get_all, skip_from_py_object)]
#[derive(Clone)]
pub struct Decision {
    pub outcome: String,
    pub basis: String,
    pub witness: Option<String>,
}

#[pymethods]
impl Decision {
    fn __repr__(&self) -> String {
        format!("Decision({}, {}, {:?})", self.outcome, self.basis, self.witness)
    }

    fn is_permit(&self) -> bool {
        self.outcome == "permit"
    }
}

/// Scope-bounded disclosure produced by the emergency path.
#[pyclass(frozen, get_all, skip_from_py_object)]
#[derive(Clone)]
pub struct Brief {
    pub token_id: String,
    pub states: Vec<String>,
    pub scope: Vec<String>,
    pub records: Vec<String>,
    pub disclosed: usize,
    pub total: usize,
    pub eta: f64,
    pub pruned_percent: f64,
}

#[pymethods]
impl Brief {
    fn __repr__(&self) -> String {
        format!("Brief({}, {}/{} records)", self.token_id, self.disclosed, self.total)
    }
}

/// Data model, consent repository and emergency pipeline in one process.
#[pyclass]
pub struct Engine {
    model: DataModel,
    repo: ConsentRepository,
    policy: ConflictPolicy,
    gate: RoleGate,
    relevance: RelevanceModel,
    eaa: Eaa,
    hrr: HrrStore,
}

impl Engine {
    fn build(model: DataModel, overlap: &str, relevance_config: Option<&str>, key_seed: Option<[u8; 32]>) -> PyResult<Self> {
        let keys = match key_seed {
            Some(seed) => EaaKeyMaterial::from_seed(seed),
            None => EaaKeyMaterial::generate(),
        };
        let eaa = Eaa::new(keys);
        let hrr = HrrStore::new(eaa.verification_key());
        Ok(Self {
            model,
            repo: ConsentRepository::new(),
            policy: ConflictPolicy {
                overlap_mode: overlap_mode(overlap)?,
            },
            gate: RoleGate::permissive(),
            relevance: relevance(relevance_config)?,
            eaa,
            hrr,
        })
    }
}

#[pymethods]
impl Engine {
    /// Loads a data model from its tab-separated dataset text.
    #[new]
    #[pyo3(signature = (dataset, overlap = "scope", relevance = None, key_seed = None))]
    fn new(dataset: &str, overlap: &str, relevance: Option<&str>, key_seed: Option<[u8; 32]>) -> PyResult<Self> {
        let model = DataModel::parse_dataset(dataset).map_err(value_err)?;
        Self::build(model, overlap, relevance, key_seed)
    }

    /// A generated model with `episodes` episodes.
    #[staticmethod]
    #[pyo3(signature = (episodes, seed = 1, overlap = "scope"))]
    fn synthetic(episodes: usize, seed: u64, overlap: &str) -> PyResult<Self> {
        Self::build(gen_model(episodes, seed), overlap, None, None)
    }

    fn dataset(&self) -> String {
        self.model.to_dataset_string()
    }

    fn episodes_of(&self, patient: &str) -> PyResult<Vec<String>> {
        let patient = parse(patient)?;
        Ok(self.model.episodes_of(&patient).iter().map(ToString::to_string).collect())
    }

    #[getter]
    fn active_count(&self) -> usize {
        self.repo.active_count()
    }

    /// Validates a draft and activates it if clean.
    #[pyo3(signature = (id, grantee, target, effect, start = 0, end = None, now = 0))]
    #[allow(clippy::too_many_arguments)]
    fn submit(
        &mut self,
        id: &str,
        grantee: &str,
        target: &str,
        effect: &str,
        start: Timestamp,
        end: Option<Timestamp>,
        now: Timestamp,
    ) -> PyResult<Admission> {
        let validity = ValidityInterval::new(start, end).map_err(value_err)?;
        let draft = ConsentDirective::draft(
            parse(id)?,
            parse(grantee)?,
            parse::<Target>(target)?,
            parse::<Effect>(effect)?,
            validity,
        );
        validate_and_commit(draft, &mut self.repo, &self.model, self.policy, now)
            .map(Admission::from)
            .map_err(value_err)
    }

    fn revoke(&mut self, id: &str, now: Timestamp) -> PyResult<()> {
        let id = parse(id)?;
        if self.repo.get(&id).is_none() {
            return Err(PyKeyError::new_err(id.to_string()));
        }
        self.repo.revoke(&id, now).map_err(value_err)
    }

    /// Active directive pairs that break the admission rules.
    fn violation_count(&self) -> PyResult<usize> {
        scan_violations(&self.repo, &self.model, self.policy.overlap_mode)
            .map(|v| v.len())
            .map_err(value_err)
    }

    #[pyo3(signature = (requester, role, target, ts = 0, engine = "cbac"))]
    fn decide(&self, requester: &str, role: &str, target: &str, ts: Timestamp, engine: &str) -> PyResult<Decision> {
        let target: Target = parse(target)?;
        let patient = self
            .model
            .target_episode(&target)
            .map_err(|e| PyKeyError::new_err(e.to_string()))?
            .patient
            .clone();
        let req = StandardRequest {
            requester: parse(requester)?,
            requester_role: parse::<Role>(role)?,
            patient,
            target,
            ts,
        };
        let d = parse::<EngineKind>(engine)?
            .engine()
            .decide(&req, &self.repo, &self.model, &self.gate, &mut EvalStats::default());
        Ok(Decision {
            outcome: d.outcome.as_str().into(),
            basis: d.basis.as_str().into(),
            witness: d.witness.map(|w| w.to_string()),
        })
    }

    /// Issues an override token from the observations and retrieves the
    /// in-scope episodes of `patient`.
    #[pyo3(signature = (requester, patient, observations, now = 0))]
    fn emergency(&self, requester: &str, patient: &str, observations: Vec<(String, f64)>, now: Timestamp) -> PyResult<Brief> {
        let patient = parse(patient)?;
        let obs = self::observations(observations, now)?;
        let claim = PatientClaim {
            biometric_ref: format!("bio:{patient}"),
            patient,
        };
        let ctx = build_context(parse(requester)?, claim, &BiometricRegistry::stub(), &obs, &self.relevance, now)
            .map_err(|e| PyPermissionError::new_err(e.to_string()))?;
        let token = self
            .eaa
            .issue(&ctx, &self.model, now)
            .map_err(|e| PyPermissionError::new_err(e.to_string()))?;
        let episodes = self.hrr.retrieve(&token, &self.model, now);
        let brief = self
            .hrr
            .clinical_brief(&episodes, &token, &self.model, now)
            .map_err(value_err)?;
        let ratio = disclosure_ratio(&brief, &self.model).map_err(value_err)?;
        Ok(Brief {
            token_id: token.token_id.to_string(),
            states: sorted(&ctx.states),
            scope: sorted(&ctx.scope),
            records: brief.records().map(ToString::to_string).collect(),
            disclosed: ratio.disclosed,
            total: ratio.total,
            eta: ratio.eta(),
            pruned_percent: ratio.pruned_percent(),
        })
    }

    /// Audit trail of emergency retrievals, oldest first.
    fn audit_log(&self) -> String {
        self.hrr.audit_log_string()
    }
}

/// Emergency states whose activation rules hold.
#[pyfunction]
#[pyo3(signature = (observations, relevance = None))]
fn emergency_states(observations: Vec<(String, f64)>, relevance: Option<&str>) -> PyResult<Vec<String>> {
    let g = self::relevance(relevance)?;
    Ok(sorted(&esd(&self::observations(observations, 0)?, &g)))
}

/// Data categories in the disclosure scope for the observations.
#[pyfunction]
#[pyo3(signature = (observations, relevance = None))]
fn disclosure_scope(observations: Vec<(String, f64)>, relevance: Option<&str>) -> PyResult<Vec<String>> {
    let g = self::relevance(relevance)?;
    Ok(sorted(&edcf(&self::observations(observations, 0)?, &g)))
}

/// Runs one generated emergency case and returns
/// `(disclosed, total, eta, pruned_percent)`.
#[pyfunction]
#[pyo3(signature = (state, total, relevant, seed = 1))]
fn emergency_case(state: &str, total: usize, relevant: usize, seed: u64) -> PyResult<(usize, usize, f64, f64)> {
    let spec = EmergencyFixtureSpec {
        case_id: "py".into(),
        state: parse(state)?,
        total_records: total,
        relevant_records: relevant,
        seed,
    };
    let r = emergency_path(&spec, &RelevanceModel::default_model()).map_err(value_err)?;
    Ok((r.disclosed, r.total, r.eta(), r.pruned_percent()))
}

#[pymodule]
fn cbac(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Engine>()?;
    m.add_class::<Admission>()?;
    m.add_class::<Decision>()?;
    m.add_class::<Brief>()?;
    m.add_function(wrap_pyfunction!(emergency_states, m)?)?;
    m.add_function(wrap_pyfunction!(disclosure_scope, m)?)?;
    m.add_function(wrap_pyfunction!(emergency_case, m)?)?;
    Ok(())
}
