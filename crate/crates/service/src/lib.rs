//! HTTP enforcement point. Normalizes JSON requests into standard or
//! emergency tuples and routes them to the decision engine or the
//! emergency pipeline. Identity is taken from the `x-user-id` header.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicI64, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{SystemTime, UNIX_EPOCH};

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::{HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{delete, get, post};
use axum::{Json, Router};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::json;

use cbac_core::ccam::{ConflictPolicy, ValidationOutcome};
use cbac_core::consent::{
    ConsentDirective, ConsentError, ConsentRepository, Effect, SharedRepository, ValidityInterval,
};
use cbac_core::cpdp::{EngineKind, EvalStats, RoleGate, StandardRequest};
use cbac_core::eaa::{verify, Eaa, EaaKeyMaterial, EmergencyOverrideToken, VerificationResult};
use cbac_core::ecdm::{build_context, BioObservationSet, BiometricRegistry, EcdmError, PatientClaim, RelevanceModel};
use cbac_core::hrr::{disclosure_ratio, AuditEntry, HrrStore};
use cbac_core::model::{DataModel, DirectiveId, Role, Target, UserId};
use cbac_core::Timestamp;

pub const USER_HEADER: &str = "x-user-id";

pub trait Clock: Send + Sync {
    fn now(&self) -> Timestamp;
}

/// Seconds since the Unix epoch.
#[derive(Debug, Default)]
pub struct SystemClock;

impl Clock for SystemClock {
    fn now(&self) -> Timestamp {
        SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map_or(0, |d| d.as_secs() as Timestamp)
    }
}

/// A clock that only moves when told to.
#[derive(Debug, Default)]
pub struct ManualClock(AtomicI64);

impl ManualClock {
    pub fn new(start: Timestamp) -> Self {
        Self(AtomicI64::new(start))
    }

    pub fn set(&self, t: Timestamp) {
        self.0.store(t, Ordering::SeqCst);
    }

    pub fn advance(&self, by: Timestamp) {
        self.0.fetch_add(by, Ordering::SeqCst);
    }
}

impl Clock for ManualClock {
    fn now(&self) -> Timestamp {
        self.0.load(Ordering::SeqCst)
    }
}

/// Emergency requests refused before a token existed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct EmergencyRefusal {
    pub seq: u64,
    pub ts: Timestamp,
    pub requester: UserId,
    pub patient: UserId,
    pub reason: String,
}

pub struct AppState {
    pub model: DataModel,
    pub relevance: RelevanceModel,
    pub repo: SharedRepository,
    pub gate: RoleGate,
    pub policy: ConflictPolicy,
    pub engine: EngineKind,
    pub registry: BiometricRegistry,
    pub eaa: Eaa,
    pub hrr: HrrStore,
    clock: Arc<dyn Clock>,
    next_id: AtomicU64,
    refusals: Mutex<Vec<EmergencyRefusal>>,
}

impl AppState {
    pub fn new(
        model: DataModel,
        relevance: RelevanceModel,
        keys: EaaKeyMaterial,
        engine: EngineKind,
        clock: Arc<dyn Clock>,
    ) -> Self {
        let eaa = Eaa::new(keys);
        let hrr = HrrStore::new(eaa.verification_key());
        Self {
            model,
            relevance,
            repo: SharedRepository::new(ConsentRepository::new()),
            gate: RoleGate::permissive(),
            policy: ConflictPolicy::default(),
            engine,
            registry: BiometricRegistry::stub(),
            eaa,
            hrr,
            clock,
            next_id: AtomicU64::new(1),
            refusals: Mutex::new(Vec::new()),
        }
    }

    pub fn now(&self) -> Timestamp {
        self.clock.now()
    }

    pub fn refusals_for(&self, patient: &UserId) -> Vec<EmergencyRefusal> {
        let log = self.refusals.lock().expect("refusal log poisoned");
        log.iter().filter(|r| &r.patient == patient).cloned().collect()
    }

    fn refuse(&self, requester: &UserId, patient: &UserId, reason: &str) {
        let mut log = self.refusals.lock().expect("refusal log poisoned");
        let seq = log.last().map_or(1, |r| r.seq + 1);
        log.push(EmergencyRefusal {
            seq,
            ts: self.now(),
            requester: requester.clone(),
            patient: patient.clone(),
            reason: reason.to_owned(),
        });
    }

    fn fresh_id(&self) -> DirectiveId {
        loop {
            let n = self.next_id.fetch_add(1, Ordering::SeqCst);
            let id = DirectiveId::new(format!("c{n}")).expect("valid id");
            if self.repo.read().get(&id).is_none() {
                return id;
            }
        }
    }
}

/// Error envelope.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ApiError {
    pub status: StatusCode,
    pub code: &'static str,
    pub message: String,
    pub conflicting_id: Option<DirectiveId>,
}

impl ApiError {
    fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        Self {
            status,
            code,
            message: message.into(),
            conflicting_id: None,
        }
    }

    fn malformed(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "malformed", message)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let mut body = json!({ "code": self.code, "message": self.message });
        if let Some(id) = self.conflicting_id {
            body["conflictingId"] = json!(id);
        }
        (self.status, Json(body)).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

fn parse_body<T: DeserializeOwned>(body: &[u8]) -> ApiResult<T> {
    serde_json::from_slice(body).map_err(|e| ApiError::malformed(e.to_string()))
}

fn caller(headers: &HeaderMap) -> ApiResult<UserId> {
    let raw = headers
        .get(USER_HEADER)
        .ok_or_else(|| ApiError::new(StatusCode::UNAUTHORIZED, "unauthenticated", "missing x-user-id header"))?;
    let text = raw
        .to_str()
        .map_err(|_| ApiError::malformed("x-user-id is not text"))?;
    UserId::new(text).map_err(|e| ApiError::malformed(e.to_string()))
}

#[derive(Debug, Clone, Deserialize)]
pub struct ConsentBody {
    pub id: Option<DirectiveId>,
    pub grantee: UserId,
    pub target: Target,
    pub effect: Effect,
    /// Defaults to the current time.
    pub start: Option<Timestamp>,
    pub end: Option<Timestamp>,
}

#[derive(Debug, Clone, Deserialize)]
pub struct AccessBody {
    pub requester: UserId,
    pub requester_role: Role,
    pub patient: UserId,
    pub target: Target,
    pub ts: Option<Timestamp>,
    pub engine: Option<EngineKind>,
}

#[derive(Debug, Clone, Deserialize)]
pub struct ObservationValue {
    pub value: f64,
    #[serde(default)]
    pub unit: String,
}

#[derive(Debug, Clone, Deserialize)]
pub struct EmergencyBody {
    pub requester: UserId,
    pub patient: UserId,
    pub biometric_ref: String,
    pub observations: BTreeMap<String, ObservationValue>,
    pub captured_at: Option<Timestamp>,
    pub device_id: Option<String>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum TaggedRequest {
    Standard(AccessBody),
    Emergency(EmergencyBody),
}

#[derive(Debug, Clone, Deserialize)]
pub struct RetrieveBody {
    pub token: String,
}

#[derive(Debug, Deserialize)]
pub struct AuditQuery {
    pub patient: String,
}

async fn submit_consent(
    State(state): State<Arc<AppState>>,
    headers: HeaderMap,
    body: Bytes,
) -> ApiResult<Response> {
    let user = caller(&headers)?;
    let body: ConsentBody = parse_body(&body)?;
    let episode = state
        .model
        .target_episode(&body.target)
        .map_err(|e| ApiError::new(StatusCode::NOT_FOUND, "unknown_target", e.to_string()))?;
    if episode.patient != user {
        return Err(ApiError::new(
            StatusCode::FORBIDDEN,
            "not_subject",
            format!("{user} is not the subject of {}", body.target),
        ));
    }
    let now = state.now();
    let validity = ValidityInterval::new(body.start.unwrap_or(now), body.end)
        .map_err(|e| ApiError::malformed(e.to_string()))?;
    let id = body.id.unwrap_or_else(|| state.fresh_id());
    let draft = ConsentDirective::draft(id, body.grantee, body.target, body.effect, validity);
    let outcome = state
        .repo
        .validate_and_commit(draft, &state.model, state.policy, now)
        .map_err(|e| match e {
            ConsentError::DuplicateId(_) => ApiError::new(StatusCode::CONFLICT, "duplicate_id", e.to_string()),
            other => ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", other.to_string()),
        })?;
    match outcome {
        ValidationOutcome::Accepted(id) => {
            Ok((StatusCode::CREATED, Json(json!({ "id": id, "outcome": "accepted" }))).into_response())
        }
        ValidationOutcome::RejectedConflict(by) => Err(ApiError {
            conflicting_id: Some(by.clone()),
            ..ApiError::new(StatusCode::CONFLICT, "conflict", format!("opposes active directive {by}"))
        }),
        ValidationOutcome::RejectedRedundant(by) => Err(ApiError {
            conflicting_id: Some(by.clone()),
            ..ApiError::new(StatusCode::CONFLICT, "redundant", format!("already covered by {by}"))
        }),
        ValidationOutcome::RejectedInvariant(v) => {
            Err(ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "invariant_violation", v.to_string()))
        }
    }
}

async fn revoke_consent(
    State(state): State<Arc<AppState>>,
    headers: HeaderMap,
    Path(id): Path<String>,
) -> ApiResult<StatusCode> {
    let user = caller(&headers)?;
    let id = DirectiveId::new(id).map_err(|e| ApiError::malformed(e.to_string()))?;
    let mut repo = state.repo.write();
    let d = repo
        .get(&id)
        .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, "not_found", format!("directive {id} not found")))?;
    let owner = state.model.target_episode(&d.target).map(|e| &e.patient).ok();
    if owner != Some(&user) {
        return Err(ApiError::new(StatusCode::FORBIDDEN, "not_owner", format!("{user} did not issue {id}")));
    }
    repo.revoke(&id, state.now()).map_err(|e| match e {
        ConsentError::InvalidState { .. } => ApiError::new(StatusCode::CONFLICT, "not_active", e.to_string()),
        other => ApiError::new(StatusCode::NOT_FOUND, "not_found", other.to_string()),
    })?;
    Ok(StatusCode::NO_CONTENT)
}

fn access(state: &AppState, body: AccessBody) -> Response {
    let engine = body.engine.unwrap_or(state.engine);
    let req = StandardRequest {
        requester: body.requester,
        requester_role: body.requester_role,
        patient: body.patient,
        target: body.target,
        ts: body.ts.unwrap_or_else(|| state.now()),
    };
    let repo = state.repo.read();
    let decision = engine
        .engine()
        .decide(&req, &repo, &state.model, &state.gate, &mut EvalStats::default());
    Json(json!({
        "outcome": decision.outcome,
        "basis": decision.basis,
        "witness": decision.witness,
        "engine": engine,
    }))
    .into_response()
}

async fn access_handler(State(state): State<Arc<AppState>>, body: Bytes) -> ApiResult<Response> {
    Ok(access(&state, parse_body(&body)?))
}

fn emergency(state: &AppState, body: EmergencyBody) -> ApiResult<Response> {
    let now = state.now();
    let refuse = |status, code: &'static str, message: String| {
        state.refuse(&body.requester, &body.patient, code);
        ApiError::new(status, code, message)
    };
    if state.model.role(&body.requester) != Some(Role::HealthcareProfessional) {
        return Err(refuse(
            StatusCode::FORBIDDEN,
            "invalid_requester_role",
            format!("{} is not a healthcare professional", body.requester),
        ));
    }
    let mut obs = BioObservationSet::new(
        body.captured_at.unwrap_or(now),
        body.device_id.clone().unwrap_or_else(|| "unknown".to_owned()),
    );
    for (metric, m) in &body.observations {
        obs.insert(metric.clone(), m.value, m.unit.clone())
            .map_err(|e| ApiError::malformed(e.to_string()))?;
    }
    let claim = PatientClaim {
        biometric_ref: body.biometric_ref.clone(),
        patient: body.patient.clone(),
    };
    let ctx = build_context(body.requester.clone(), claim, &state.registry, &obs, &state.relevance, now)
        .map_err(|e| match e {
            EcdmError::EmptyScope => refuse(StatusCode::FORBIDDEN, "empty_scope", e.to_string()),
            EcdmError::UnresolvedPatient(_) => refuse(StatusCode::FORBIDDEN, "unresolved_patient", e.to_string()),
            other => ApiError::malformed(other.to_string()),
        })?;
    let token = state
        .eaa
        .issue(&ctx, &state.model, now)
        .map_err(|e| refuse(StatusCode::FORBIDDEN, "issuance_refused", e.to_string()))?;
    let episodes = state.hrr.retrieve(&token, &state.model, now);
    let brief = state
        .hrr
        .clinical_brief(&episodes, &token, &state.model, now)
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))?;
    let ratio = disclosure_ratio(&brief, &state.model).ok();
    Ok(Json(json!({
        "tokenId": token.token_id,
        "token": token.to_wire(),
        "states": ctx.states,
        "scope": ctx.scope,
        "brief": brief,
        "disclosure": ratio.map(|r| json!({
            "disclosed": r.disclosed,
            "total": r.total,
            "eta": r.eta(),
            "prunedPercent": r.pruned_percent(),
        })),
    }))
    .into_response())
}

async fn emergency_handler(State(state): State<Arc<AppState>>, body: Bytes) -> ApiResult<Response> {
    emergency(&state, parse_body(&body)?)
}

/// Retrieval with a presented token. Refusals are audited by the store.
async fn retrieve_handler(State(state): State<Arc<AppState>>, body: Bytes) -> ApiResult<Response> {
    let body: RetrieveBody = parse_body(&body)?;
    let token = EmergencyOverrideToken::from_wire(&body.token).map_err(|e| ApiError::malformed(e.to_string()))?;
    let now = state.now();
    let status = verify(&token, now, &state.eaa.verification_key());
    let episodes = state.hrr.retrieve(&token, &state.model, now);
    match status {
        VerificationResult::Valid => {
            let brief = state
                .hrr
                .clinical_brief(&episodes, &token, &state.model, now)
                .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))?;
            Ok(Json(json!({ "tokenId": token.token_id, "brief": brief })).into_response())
        }
        VerificationResult::BadSignature => Err(ApiError::new(
            StatusCode::FORBIDDEN,
            "refused_invalid_token",
            "token signature does not verify",
        )),
        VerificationResult::Expired | VerificationResult::NotYetValid => Err(ApiError::new(
            StatusCode::FORBIDDEN,
            "refused_expired",
            "token is outside its validity window",
        )),
    }
}

async fn request_handler(State(state): State<Arc<AppState>>, body: Bytes) -> ApiResult<Response> {
    match parse_body::<TaggedRequest>(&body)? {
        TaggedRequest::Standard(b) => Ok(access(&state, b)),
        TaggedRequest::Emergency(b) => emergency(&state, b),
    }
}

#[derive(Serialize)]
struct AuditListing {
    patient: UserId,
    entries: Vec<AuditEntry>,
    refusals: Vec<EmergencyRefusal>,
}

async fn audit_handler(
    State(state): State<Arc<AppState>>,
    Query(q): Query<AuditQuery>,
) -> ApiResult<Json<AuditListing>> {
    let patient = UserId::new(q.patient).map_err(|e| ApiError::malformed(e.to_string()))?;
    if state.model.role(&patient) != Some(Role::Patient) {
        return Err(ApiError::new(StatusCode::NOT_FOUND, "unknown_patient", format!("no patient {patient}")));
    }
    Ok(Json(AuditListing {
        entries: state.hrr.audit_for_patient(&patient),
        refusals: state.refusals_for(&patient),
        patient,
    }))
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/consents", post(submit_consent))
        .route("/consents/{id}", delete(revoke_consent))
        .route("/access", post(access_handler))
        .route("/emergency", post(emergency_handler))
        .route("/emergency/retrieve", post(retrieve_handler))
        .route("/request", post(request_handler))
        .route("/audit", get(audit_handler))
        .with_state(state)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manual_clock_moves_only_when_told() {
        let c = ManualClock::new(10);
        assert_eq!(c.now(), 10);
        c.advance(5);
        c.set(c.now() + 1);
        assert_eq!(c.now(), 16);
    }

    #[test]
    fn error_envelope_names_the_blocker() {
        let err = ApiError {
            conflicting_id: Some(DirectiveId::new("c1").unwrap()),
            ..ApiError::new(StatusCode::CONFLICT, "conflict", "x")
        };
        let resp = err.into_response();
        assert_eq!(resp.status(), StatusCode::CONFLICT);
    }

    #[test]
    fn malformed_bodies_are_bad_requests() {
        let err = parse_body::<ConsentBody>(b"{").unwrap_err();
        assert_eq!((err.status, err.code), (StatusCode::BAD_REQUEST, "malformed"));
        let tagged = parse_body::<TaggedRequest>(br#"{"type":"other"}"#).unwrap_err();
        assert_eq!(tagged.status, StatusCode::BAD_REQUEST);
    }
}
