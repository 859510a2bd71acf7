//! Consent-based access control with commit-time directive validation and
//! evidence-driven emergency override.
//!
//! The crate is organised around the components of the authorization
//! pipeline:
//!
//! - [`model`]: the healthcare data model (users, episodes, records) and its
//!   provenance helpers.
//! - [`consent`]: consent directives, their lifecycle, and the consent
//!   repository.
//! - [`ccam`]: admission control for draft directives.
//! - [`cpdp`]: two-layer runtime evaluation of standard requests.
//! - [`baseline`]: a lazy deny-overrides evaluator over unvalidated
//!   directives, used as the comparison point in benchmarks.
//! - [`ecdm`], [`eaa`], [`hrr`]: the emergency pipeline, from physiological
//!   evidence to signed override tokens to scope-bounded retrieval.
//! - [`synth`] and [`bench`]: deterministic workload generators and the
//!   experiment harness.

pub mod baseline;
pub mod bench;
pub mod ccam;
pub mod consent;
pub mod cpdp;
pub mod eaa;
pub mod ecdm;
pub mod hrr;
mod ids;
pub mod model;
pub mod synth;
mod textfmt;

pub use ids::InvalidId;
pub use textfmt::ParseError;

/// UTC seconds.
pub type Timestamp = i64;
