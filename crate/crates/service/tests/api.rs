use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

use cbac_core::cpdp::{decide, EngineKind, RoleGate, StandardRequest};
use cbac_core::eaa::EaaKeyMaterial;
use cbac_core::ecdm::RelevanceModel;
use cbac_core::model::{DataModel, Episode, EpisodeId, Record, RecordId, Role, Target, UserId};
use cbac_service::{router, AppState, ManualClock};

fn uid(s: &str) -> UserId {
    UserId::new(s).unwrap()
}

fn model() -> DataModel {
    let mut m = DataModel::new();
    for u in ["hp1", "hp2", "hp3"] {
        m.register_user(uid(u), Role::HealthcareProfessional).unwrap();
    }
    for u in ["pt1", "pt2"] {
        m.register_user(uid(u), Role::Patient).unwrap();
    }
    let eps = [
        ("e1", "hp1", "pt1", "Respiratory", &["r1", "r2"][..]),
        ("e2", "hp2", "pt1", "Dermatology", &["r3"][..]),
        ("e3", "hp1", "pt2", "Cardiology", &["r4"][..]),
    ];
    for (e, creator, patient, tag, records) in eps {
        m.add_episode(Episode {
            id: EpisodeId::new(e).unwrap(),
            creator: uid(creator),
            patient: uid(patient),
            tags: [tag.parse().unwrap()].into(),
        })
        .unwrap();
        for r in records {
            m.add_record(Record {
                id: RecordId::new(*r).unwrap(),
                episode: EpisodeId::new(e).unwrap(),
                kind: "note".into(),
            })
            .unwrap();
        }
    }
    m
}

struct Harness {
    app: Router,
    state: Arc<AppState>,
    clock: Arc<ManualClock>,
}

fn harness() -> Harness {
    let clock = Arc::new(ManualClock::new(100));
    let state = Arc::new(AppState::new(
        model(),
        RelevanceModel::default_model(),
        EaaKeyMaterial::from_seed([7; 32]),
        EngineKind::Cbac,
        clock.clone(),
    ));
    Harness {
        app: router(state.clone()),
        state,
        clock,
    }
}

impl Harness {
    async fn call(&self, method: &str, uri: &str, user: Option<&str>, body: Option<Value>) -> (StatusCode, Value) {
        let mut req = Request::builder().method(method).uri(uri);
        if let Some(u) = user {
            req = req.header("x-user-id", u);
        }
        let body = match body {
            Some(v) => Body::from(v.to_string()),
            None => Body::empty(),
        };
        self.raw(req.header("content-type", "application/json").body(body).unwrap()).await
    }

    async fn raw(&self, req: Request<Body>) -> (StatusCode, Value) {
        let resp = self.app.clone().oneshot(req).await.unwrap();
        let status = resp.status();
        let bytes = resp.into_body().collect().await.unwrap().to_bytes();
        let v = if bytes.is_empty() { Value::Null } else { serde_json::from_slice(&bytes).unwrap() };
        (status, v)
    }

    async fn consent(&self, user: &str, body: Value) -> (StatusCode, Value) {
        self.call("POST", "/consents", Some(user), Some(body)).await
    }

    async fn access(&self, requester: &str, target: Value) -> Value {
        let (s, v) = self
            .call(
                "POST",
                "/access",
                None,
                Some(json!({"requester": requester, "requester_role": "professional", "patient": "pt1", "target": target})),
            )
            .await;
        assert_eq!(s, StatusCode::OK);
        v
    }

    async fn emergency(&self, spo2: f64) -> (StatusCode, Value) {
        self.call("POST", "/emergency", None, Some(hypoxia_body(spo2))).await
    }
}

fn hypoxia_body(spo2: f64) -> Value {
    json!({
        "requester": "hp3",
        "patient": "pt1",
        "biometric_ref": "bio:pt1",
        "observations": {"spo2": {"value": spo2, "unit": "percent"}},
    })
}

fn ep(e: &str) -> Value {
    json!({"kind": "episode", "id": e})
}

fn rec(r: &str) -> Value {
    json!({"kind": "record", "id": r})
}

#[tokio::test]
async fn consent_outcomes_map_to_statuses() {
    let h = harness();
    let (s, v) = h.consent("pt1", json!({"grantee": "hp3", "target": ep("e1"), "effect": "permit"})).await;
    assert_eq!(s, StatusCode::CREATED);
    let first = v["id"].as_str().unwrap().to_owned();

    let (s, v) = h.consent("pt1", json!({"grantee": "hp3", "target": ep("e1"), "effect": "deny"})).await;
    assert_eq!(s, StatusCode::CONFLICT);
    assert_eq!(v["code"], "conflict");
    assert_eq!(v["conflictingId"], first.as_str());

    let (s, v) = h.consent("pt1", json!({"grantee": "hp3", "target": ep("e1"), "effect": "permit", "start": 200, "end": 300})).await;
    assert_eq!(s, StatusCode::CONFLICT);
    assert_eq!(v["code"], "redundant");

    let (s, v) = h.consent("pt1", json!({"grantee": "hp1", "target": rec("r1"), "effect": "deny"})).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(v["code"], "invariant_violation");
}

#[tokio::test]
async fn consent_input_errors() {
    let h = harness();
    let (s, _) = h.consent("pt1", json!({"grantee": "hp3", "target": ep("nope"), "effect": "permit"})).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    let (s, _) = h.consent("pt1", json!({"grantee": "hp3", "effect": "permit"})).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    let (s, _) = h.consent("pt1", json!({"grantee": "hp3", "target": ep("e1"), "effect": "maybe"})).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    let (s, _) = h.consent("pt1", json!({"grantee": "hp3", "target": ep("e1"), "effect": "permit", "start": 5, "end": 5})).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    let (s, _) = h.consent("pt2", json!({"grantee": "hp3", "target": ep("e1"), "effect": "permit"})).await;
    assert_eq!(s, StatusCode::FORBIDDEN);
    let (s, _) = h.call("POST", "/consents", None, Some(json!({"grantee": "hp3", "target": ep("e1"), "effect": "permit"}))).await;
    assert_eq!(s, StatusCode::UNAUTHORIZED);
    let req = Request::builder().method("POST").uri("/consents").header("x-user-id", "pt1").body(Body::from("{not json")).unwrap();
    assert_eq!(h.raw(req).await.0, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn revocation_is_immediate() {
    let h = harness();
    let (_, v) = h.consent("pt1", json!({"id": "k1", "grantee": "hp3", "target": ep("e1"), "effect": "permit"})).await;
    assert_eq!(v["id"], "k1");
    let d = h.access("hp3", rec("r2")).await;
    assert_eq!((d["outcome"].as_str(), d["basis"].as_str(), d["witness"].as_str()), (Some("permit"), Some("consent_permit"), Some("k1")));

    assert_eq!(h.call("DELETE", "/consents/k1", Some("pt2"), None).await.0, StatusCode::FORBIDDEN);
    assert_eq!(h.call("DELETE", "/consents/k1", Some("pt1"), None).await.0, StatusCode::NO_CONTENT);
    let d = h.access("hp3", rec("r2")).await;
    assert_eq!((d["outcome"].as_str(), d["basis"].as_str()), (Some("deny"), Some("default_deny")));
    assert_eq!(h.call("DELETE", "/consents/k1", Some("pt1"), None).await.0, StatusCode::CONFLICT);
    assert_eq!(h.call("DELETE", "/consents/zz", Some("pt1"), None).await.0, StatusCode::NOT_FOUND);
    let (s, v) = h.consent("pt1", json!({"id": "k1", "grantee": "hp3", "target": ep("e1"), "effect": "permit"})).await;
    assert_eq!((s, v["code"].as_str()), (StatusCode::CONFLICT, Some("duplicate_id")));
}

#[tokio::test]
async fn access_decisions() {
    let h = harness();
    let d = h.access("hp1", rec("r1")).await;
    assert_eq!((d["outcome"].as_str(), d["basis"].as_str()), (Some("permit"), Some("invariant_author")));
    assert!(d["witness"].is_null());
    let d = h.access("hp3", rec("r1")).await;
    assert_eq!(d["basis"], "default_deny");
    let d = h.access("hp3", rec("missing")).await;
    assert_eq!((d["outcome"].as_str(), d["basis"].as_str()), (Some("deny"), Some("default_deny")));

    h.consent("pt1", json!({"grantee": "hp3", "target": rec("r3"), "effect": "permit"})).await;
    let (_, d) = h
        .call(
            "POST",
            "/access",
            None,
            Some(json!({"requester": "hp3", "requester_role": "professional", "patient": "pt1", "target": rec("r3"), "engine": "baseline"})),
        )
        .await;
    assert_eq!((d["outcome"].as_str(), d["engine"].as_str()), (Some("permit"), Some("baseline")));
    let (s, _) = h.call("POST", "/access", None, Some(json!({"requester": "hp3"}))).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn decisions_match_in_process_calls() {
    let h = harness();
    h.consent("pt1", json!({"grantee": "hp3", "target": ep("e1"), "effect": "permit", "start": 0, "end": 150})).await;
    h.consent("pt1", json!({"grantee": "hp2", "target": rec("r1"), "effect": "deny"})).await;
    h.consent("pt2", json!({"grantee": "hp2", "target": ep("e3"), "effect": "permit", "start": 120})).await;
    let gate = RoleGate::permissive();
    for requester in ["hp1", "hp2", "hp3", "pt1", "pt2"] {
        for target in ["e1", "e2", "e3", "r1", "r2", "r3", "r4"] {
            for ts in [50, 100, 149, 150, 500] {
                let t: Target = if target.starts_with('e') { format!("episode:{target}") } else { format!("record:{target}") }.parse().unwrap();
                let role = if requester.starts_with("hp") { Role::HealthcareProfessional } else { Role::Patient };
                let req = StandardRequest { requester: uid(requester), requester_role: role, patient: uid("pt1"), target: t.clone(), ts };
                let direct = decide(&req, &h.state.repo.read(), &h.state.model, &gate);
                let (_, wire) = h
                    .call("POST", "/access", None, Some(json!({
                        "requester": requester,
                        "requester_role": role,
                        "patient": "pt1",
                        "target": t,
                        "ts": ts,
                    })))
                    .await;
                assert_eq!(wire["outcome"], json!(direct.outcome), "{requester} {target} {ts}");
                assert_eq!(wire["basis"], json!(direct.basis));
                assert_eq!(wire["witness"], json!(direct.witness));
            }
        }
    }
}

#[tokio::test]
async fn emergency_brief_is_scope_bounded() {
    let h = harness();
    let (s, v) = h.emergency(85.0).await;
    assert_eq!(s, StatusCode::OK, "{v}");
    let episodes: Vec<&str> = v["brief"]["episodes"].as_array().unwrap().iter().map(|e| e["id"].as_str().unwrap()).collect();
    assert_eq!(episodes, ["e1"]);
    assert_eq!(v["disclosure"]["disclosed"], 2);
    assert_eq!(v["disclosure"]["total"], 3);
    assert_eq!(v["tokenId"], "eot-000001");
    assert_eq!(v["states"], json!(["Hypoxia"]));
}

#[tokio::test]
async fn emergency_refusals() {
    let h = harness();
    let (s, v) = h.emergency(98.0).await;
    assert_eq!((s, v["code"].as_str()), (StatusCode::FORBIDDEN, Some("empty_scope")));
    let mut body = hypoxia_body(85.0);
    body["biometric_ref"] = json!("bio:pt2");
    let (s, v) = h.call("POST", "/emergency", None, Some(body)).await;
    assert_eq!((s, v["code"].as_str()), (StatusCode::FORBIDDEN, Some("unresolved_patient")));
    let mut body = hypoxia_body(85.0);
    body["requester"] = json!("pt2");
    let (s, _) = h.call("POST", "/emergency", None, Some(body)).await;
    assert_eq!(s, StatusCode::FORBIDDEN);
    let (s, _) = h.call("POST", "/emergency", None, Some(json!({"requester": "hp3"}))).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);

    let (_, audit) = h.call("GET", "/audit?patient=pt1", None, None).await;
    let reasons: Vec<&str> = audit["refusals"].as_array().unwrap().iter().map(|r| r["reason"].as_str().unwrap()).collect();
    assert_eq!(reasons, ["empty_scope", "unresolved_patient", "invalid_requester_role"]);
    assert!(audit["entries"].as_array().unwrap().is_empty());
}

#[tokio::test]
async fn emergency_ignores_consent_state() {
    let h = harness();
    let (_, first) = h.emergency(85.0).await;
    h.consent("pt1", json!({"grantee": "hp3", "target": ep("e1"), "effect": "deny"})).await;
    h.consent("pt1", json!({"grantee": "hp3", "target": ep("e2"), "effect": "permit"})).await;
    let (_, second) = h.emergency(85.0).await;
    assert_eq!(first["brief"]["episodes"], second["brief"]["episodes"]);
    assert_eq!(first["scope"], second["scope"]);
}

#[tokio::test]
async fn audit_trail() {
    let h = harness();
    let (_, v) = h.emergency(85.0).await;
    let (s, audit) = h.call("GET", "/audit?patient=pt1", None, None).await;
    assert_eq!(s, StatusCode::OK);
    let entries = audit["entries"].as_array().unwrap();
    assert_eq!(entries.len(), 1);
    assert_eq!(entries[0]["outcome"], "disclosed");

    let wire = v["token"].as_str().unwrap();
    let tampered = wire.replace("scope=Cardiology,Respiratory", "scope=Cardiology,Dermatology,Respiratory");
    assert_ne!(tampered, wire);
    let (s, r) = h.call("POST", "/emergency/retrieve", None, Some(json!({"token": tampered}))).await;
    assert_eq!((s, r["code"].as_str()), (StatusCode::FORBIDDEN, Some("refused_invalid_token")));

    let (s, _) = h.call("POST", "/emergency/retrieve", None, Some(json!({"token": wire}))).await;
    assert_eq!(s, StatusCode::OK);
    h.clock.advance(3600);
    let (s, r) = h.call("POST", "/emergency/retrieve", None, Some(json!({"token": wire}))).await;
    assert_eq!((s, r["code"].as_str()), (StatusCode::FORBIDDEN, Some("refused_expired")));

    let (_, audit) = h.call("GET", "/audit?patient=pt1", None, None).await;
    let entries = audit["entries"].as_array().unwrap();
    let outcomes: Vec<&str> = entries.iter().map(|e| e["outcome"].as_str().unwrap()).collect();
    assert_eq!(outcomes, ["disclosed", "refused_invalid_token", "disclosed", "refused_expired"]);
    let seqs: Vec<u64> = entries.iter().map(|e| e["seq"].as_u64().unwrap()).collect();
    assert!(seqs.windows(2).all(|w| w[0] < w[1]));

    assert_eq!(h.call("GET", "/audit?patient=pt9", None, None).await.0, StatusCode::NOT_FOUND);
    assert_eq!(h.call("GET", "/audit?patient=hp1", None, None).await.0, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn tagged_requests_route_by_type() {
    let h = harness();
    let (s, v) = h
        .call("POST", "/request", None, Some(json!({"type": "standard", "requester": "hp1", "requester_role": "professional", "patient": "pt1", "target": rec("r1")})))
        .await;
    assert_eq!((s, v["basis"].as_str()), (StatusCode::OK, Some("invariant_author")));
    let mut body = hypoxia_body(85.0);
    body["type"] = json!("emergency");
    let (s, v) = h.call("POST", "/request", None, Some(body)).await;
    assert_eq!(s, StatusCode::OK);
    assert!(v["brief"].is_object());
    let (s, v) = h.call("POST", "/request", None, Some(json!({"type": "teleport", "requester": "hp1"}))).await;
    assert_eq!((s, v["code"].as_str()), (StatusCode::BAD_REQUEST, Some("malformed")));
}
