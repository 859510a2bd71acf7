//! Emergency authorization authority: issues and verifies signed,
//! time-bounded override tokens.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine as _;
use ed25519_dalek::{Signature, Signer, SigningKey, Verifier, VerifyingKey};
use parking_lot::Mutex;
use rand::RngCore;
use thiserror::Error;

use crate::consent::ValidityInterval;
use crate::ecdm::EmergencyContext;
use crate::model::{DataModel, Label, Role, TokenId, UserId};
use crate::Timestamp;

pub const DEFAULT_TTL_SECS: i64 = 3600;

/// Emergency override token. `signature` covers
/// [`canonical_bytes`](Self::canonical_bytes).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EmergencyOverrideToken {
    pub token_id: TokenId,
    pub requester: UserId,
    pub patient: UserId,
    pub scope: BTreeSet<Label>,
    pub validity: ValidityInterval,
    pub obs_digest: [u8; 32],
    pub issued_at: Timestamp,
    pub signature: Vec<u8>,
}

impl EmergencyOverrideToken {
    pub fn valid_until(&self) -> Timestamp {
        self.validity.end.unwrap_or(Timestamp::MAX)
    }

    /// Signed form: one `key=value` line per field in fixed order, scope
    /// labels sorted and comma-joined.
    pub fn canonical_bytes(&self) -> Vec<u8> {
        let scope: Vec<&str> = self.scope.iter().map(Label::as_str).collect();
        let mut out = String::new();
        let _ = writeln!(out, "token_id={}", self.token_id);
        let _ = writeln!(out, "requester={}", self.requester);
        let _ = writeln!(out, "patient={}", self.patient);
        let _ = writeln!(out, "scope={}", scope.join(","));
        let _ = writeln!(out, "valid_from={}", self.validity.start);
        let end = self.validity.end.map_or_else(|| "-".to_owned(), |e| e.to_string());
        let _ = writeln!(out, "valid_until={end}");
        let _ = writeln!(out, "obs_digest={}", hex::encode(self.obs_digest));
        let _ = writeln!(out, "issued_at={}", self.issued_at);
        out.into_bytes()
    }

    /// Canonical form plus a trailing `signature=<base64>` line.
    pub fn to_wire(&self) -> String {
        let mut s = String::from_utf8(self.canonical_bytes()).expect("UTF-8");
        let _ = writeln!(s, "signature={}", B64.encode(&self.signature));
        s
    }

    pub fn from_wire(text: &str) -> Result<Self, TokenParseError> {
        const KEYS: [&str; 9] = [
            "token_id",
            "requester",
            "patient",
            "scope",
            "valid_from",
            "valid_until",
            "obs_digest",
            "issued_at",
            "signature",
        ];
        let lines: Vec<&str> = text.lines().filter(|l| !l.is_empty()).collect();
        if lines.len() != KEYS.len() {
            return Err(TokenParseError(format!(
                "expected {} lines, found {}",
                KEYS.len(),
                lines.len()
            )));
        }
        let mut v = Vec::with_capacity(KEYS.len());
        for (line, key) in lines.iter().zip(KEYS) {
            match line.split_once('=') {
                Some((k, val)) if k == key => v.push(val),
                _ => return Err(TokenParseError(format!("expected `{key}=…`, found {line:?}"))),
            }
        }
        let bad = |what: &str| TokenParseError(format!("invalid {what}"));
        let scope = v[3]
            .split(',')
            .filter(|s| !s.is_empty())
            .map(Label::new)
            .collect::<Result<BTreeSet<_>, _>>()
            .map_err(|e| TokenParseError(e.to_string()))?;
        let start: Timestamp = v[4].parse().map_err(|_| bad("valid_from"))?;
        let end: Timestamp = v[5].parse().map_err(|_| bad("valid_until"))?;
        let digest: [u8; 32] = hex::decode(v[6])
            .ok()
            .and_then(|d| d.try_into().ok())
            .ok_or_else(|| bad("obs_digest"))?;
        Ok(Self {
            token_id: TokenId::new(v[0]).map_err(|e| TokenParseError(e.to_string()))?,
            requester: UserId::new(v[1]).map_err(|e| TokenParseError(e.to_string()))?,
            patient: UserId::new(v[2]).map_err(|e| TokenParseError(e.to_string()))?,
            scope,
            validity: ValidityInterval::bounded(start, end).map_err(|_| bad("validity"))?,
            obs_digest: digest,
            issued_at: v[7].parse().map_err(|_| bad("issued_at"))?,
            signature: B64.decode(v[8]).map_err(|_| bad("signature"))?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("malformed token: {0}")]
pub struct TokenParseError(String);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum VerificationResult {
    Valid,
    BadSignature,
    Expired,
    NotYetValid,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EaaError {
    #[error("emergency context has an empty scope")]
    EmptyScope,
    #[error("requester {0} is not a healthcare professional")]
    InvalidRequesterRole(UserId),
    #[error("ttl must be positive, got {0}")]
    InvalidTtl(i64),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum KeyError {
    #[error("key is not valid base64")]
    Encoding,
    #[error("key must be 32 bytes, got {0}")]
    Length(usize),
    #[error("bytes are not a valid verification key")]
    Invalid,
}

/// Public half, handed to record repositories.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VerificationKey(VerifyingKey);

impl VerificationKey {
    pub fn to_base64(&self) -> String {
        B64.encode(self.0.as_bytes())
    }

    pub fn from_base64(text: &str) -> Result<Self, KeyError> {
        let bytes = decode_key(text)?;
        VerifyingKey::from_bytes(&bytes)
            .map(Self)
            .map_err(|_| KeyError::Invalid)
    }
}

fn decode_key(text: &str) -> Result<[u8; 32], KeyError> {
    let raw = B64.decode(text.trim()).map_err(|_| KeyError::Encoding)?;
    let len = raw.len();
    raw.try_into().map_err(|_| KeyError::Length(len))
}

/// Signing key pair. The signing half never leaves this module.
pub struct EaaKeyMaterial {
    signing: SigningKey,
}

impl std::fmt::Debug for EaaKeyMaterial {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("EaaKeyMaterial")
            .field("verification", &self.verification_key().to_base64())
            .finish_non_exhaustive()
    }
}

impl EaaKeyMaterial {
    pub fn generate() -> Self {
        let mut seed = [0u8; 32];
        rand::rngs::OsRng.fill_bytes(&mut seed);
        Self::from_seed(seed)
    }

    pub fn from_seed(seed: [u8; 32]) -> Self {
        Self {
            signing: SigningKey::from_bytes(&seed),
        }
    }

    pub fn signing_key_base64(&self) -> String {
        B64.encode(self.signing.to_bytes())
    }

    pub fn from_signing_base64(text: &str) -> Result<Self, KeyError> {
        decode_key(text).map(Self::from_seed)
    }

    pub fn verification_key(&self) -> VerificationKey {
        VerificationKey(self.signing.verifying_key())
    }

    fn sign(&self, bytes: &[u8]) -> Vec<u8> {
        self.signing.sign(bytes).to_bytes().to_vec()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IssuanceRecord {
    pub token_id: TokenId,
    pub requester: UserId,
    pub patient: UserId,
    pub scope: BTreeSet<Label>,
    pub obs_digest: [u8; 32],
    pub issued_at: Timestamp,
    pub valid_until: Timestamp,
}

#[derive(Debug, Default)]
struct IssuanceLog {
    next: u64,
    records: Vec<IssuanceRecord>,
}

/// Token issuer. Issuance is serialized through the log lock.
#[derive(Debug)]
pub struct Eaa {
    keys: EaaKeyMaterial,
    ttl: i64,
    log: Mutex<IssuanceLog>,
}

impl Eaa {
    pub fn new(keys: EaaKeyMaterial) -> Self {
        Self {
            keys,
            ttl: DEFAULT_TTL_SECS,
            log: Mutex::new(IssuanceLog::default()),
        }
    }

    pub fn with_ttl(mut self, ttl: i64) -> Result<Self, EaaError> {
        if ttl <= 0 {
            return Err(EaaError::InvalidTtl(ttl));
        }
        self.ttl = ttl;
        Ok(self)
    }

    pub fn ttl(&self) -> i64 {
        self.ttl
    }

    pub fn verification_key(&self) -> VerificationKey {
        self.keys.verification_key()
    }

    /// Issues a token valid over `[now, now + ttl)` with the context's scope.
    pub fn issue(
        &self,
        ctx: &EmergencyContext,
        model: &DataModel,
        now: Timestamp,
    ) -> Result<EmergencyOverrideToken, EaaError> {
        if ctx.scope.is_empty() {
            return Err(EaaError::EmptyScope);
        }
        if model.role(&ctx.requester) != Some(Role::HealthcareProfessional) {
            return Err(EaaError::InvalidRequesterRole(ctx.requester.clone()));
        }
        let mut log = self.log.lock();
        log.next += 1;
        let token_id = TokenId::generated(format!("eot-{:06}", log.next));
        let validity = ValidityInterval::bounded(now, now.saturating_add(self.ttl))
            .expect("ttl is positive");
        let mut token = EmergencyOverrideToken {
            token_id,
            requester: ctx.requester.clone(),
            patient: ctx.patient().clone(),
            scope: ctx.scope.clone(),
            validity,
            obs_digest: ctx.obs_digest,
            issued_at: now,
            signature: Vec::new(),
        };
        token.signature = self.keys.sign(&token.canonical_bytes());
        log.records.push(IssuanceRecord {
            token_id: token.token_id.clone(),
            requester: token.requester.clone(),
            patient: token.patient.clone(),
            scope: token.scope.clone(),
            obs_digest: token.obs_digest,
            issued_at: now,
            valid_until: token.valid_until(),
        });
        Ok(token)
    }

    pub fn issuance_log(&self) -> Vec<IssuanceRecord> {
        self.log.lock().records.clone()
    }
}

/// Signature first, then the half-open validity window.
pub fn verify(
    token: &EmergencyOverrideToken,
    now: Timestamp,
    key: &VerificationKey,
) -> VerificationResult {
    let Ok(sig) = Signature::from_slice(&token.signature) else {
        return VerificationResult::BadSignature;
    };
    if token.validity.end.is_none() || key.0.verify(&token.canonical_bytes(), &sig).is_err() {
        return VerificationResult::BadSignature;
    }
    if now < token.validity.start {
        VerificationResult::NotYetValid
    } else if token.validity.contains(now) {
        VerificationResult::Valid
    } else {
        VerificationResult::Expired
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ecdm::PatientClaim;
    use crate::model::tests::small_model;
    use proptest::prelude::*;

    fn ctx(requester: &str, scope: &[&str]) -> EmergencyContext {
        EmergencyContext {
            requester: UserId::new(requester).unwrap(),
            patient_claim: PatientClaim {
                biometric_ref: "bio:pt1".into(),
                patient: UserId::new("pt1").unwrap(),
            },
            states: BTreeSet::new(),
            scope: scope.iter().map(|s| Label::new(*s).unwrap()).collect(),
            ts: 100,
            obs_digest: [7; 32],
        }
    }

    fn eaa() -> Eaa {
        Eaa::new(EaaKeyMaterial::from_seed([3; 32]))
    }

    #[test]
    fn issue_then_verify() {
        let eaa = eaa();
        let c = ctx("hp1", &["Respiratory", "Cardiology"]);
        let t = eaa.issue(&c, &small_model(), 100).unwrap();
        assert_eq!(t.token_id.as_str(), "eot-000001");
        assert_eq!(t.scope, c.scope);
        assert_eq!(t.validity, ValidityInterval::bounded(100, 3700).unwrap());
        let vk = eaa.verification_key();
        assert_eq!(verify(&t, 100, &vk), VerificationResult::Valid);
        assert_eq!(verify(&t, 3699, &vk), VerificationResult::Valid);
        assert_eq!(verify(&t, 3700, &vk), VerificationResult::Expired);
        assert_eq!(verify(&t, 99, &vk), VerificationResult::NotYetValid);
        assert_eq!(eaa.issuance_log().len(), 1);
    }

    #[test]
    fn issue_preconditions() {
        let eaa = eaa();
        assert_eq!(eaa.issue(&ctx("hp1", &[]), &small_model(), 0), Err(EaaError::EmptyScope));
        assert!(matches!(
            eaa.issue(&ctx("pt1", &["Respiratory"]), &small_model(), 0),
            Err(EaaError::InvalidRequesterRole(_))
        ));
        assert!(matches!(
            eaa.issue(&ctx("stranger", &["Respiratory"]), &small_model(), 0),
            Err(EaaError::InvalidRequesterRole(_))
        ));
        assert!(eaa.issuance_log().is_empty());
        assert!(Eaa::new(EaaKeyMaterial::from_seed([0; 32])).with_ttl(0).is_err());
    }

    #[test]
    fn other_keys_do_not_verify() {
        let t = eaa().issue(&ctx("hp1", &["Respiratory"]), &small_model(), 0).unwrap();
        let other = EaaKeyMaterial::from_seed([4; 32]).verification_key();
        assert_eq!(verify(&t, 1, &other), VerificationResult::BadSignature);
    }

    #[test]
    fn canonical_form() {
        let t = eaa().issue(&ctx("hp1", &["Respiratory", "Cardiology"]), &small_model(), 5).unwrap();
        let text = String::from_utf8(t.canonical_bytes()).unwrap();
        let expected = format!(
            "token_id=eot-000001\nrequester=hp1\npatient=pt1\nscope=Cardiology,Respiratory\n\
             valid_from=5\nvalid_until=3605\nobs_digest={}\nissued_at=5\n",
            "07".repeat(32)
        );
        assert_eq!(text, expected);
    }

    #[test]
    fn keys_round_trip_through_base64() {
        let k = EaaKeyMaterial::generate();
        let again = EaaKeyMaterial::from_signing_base64(&k.signing_key_base64()).unwrap();
        assert_eq!(again.verification_key(), k.verification_key());
        let vk = VerificationKey::from_base64(&k.verification_key().to_base64()).unwrap();
        assert_eq!(vk, k.verification_key());
        assert_eq!(VerificationKey::from_base64("AAAA"), Err(KeyError::Length(3)));
        assert_eq!(VerificationKey::from_base64("!!"), Err(KeyError::Encoding));
    }

    #[test]
    fn truncated_signature_is_bad() {
        let eaa = eaa();
        let mut t = eaa.issue(&ctx("hp1", &["Respiratory"]), &small_model(), 0).unwrap();
        t.signature.pop();
        assert_eq!(verify(&t, 1, &eaa.verification_key()), VerificationResult::BadSignature);
    }

    proptest! {
        #[test]
        fn wire_round_trip(
            labels in proptest::collection::btree_set("[A-Z][a-z]{1,8}", 1..5),
            now in -1_000_000i64..1_000_000,
            digest in proptest::array::uniform32(any::<u8>()),
        ) {
            let eaa = eaa();
            let mut c = ctx("hp1", &[]);
            c.scope = labels.iter().map(|l| Label::new(l.as_str()).unwrap()).collect();
            c.obs_digest = digest;
            let t = eaa.issue(&c, &small_model(), now).unwrap();
            let back = EmergencyOverrideToken::from_wire(&t.to_wire()).unwrap();
            prop_assert_eq!(&back, &t);
            prop_assert_eq!(verify(&back, now, &eaa.verification_key()), VerificationResult::Valid);
        }
    }
}
