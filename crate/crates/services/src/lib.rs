//! HTTP services for the protected telemetry pipeline.
//!
//! * [`idm`]: identity manager issuing opaque bearer tokens.
//! * [`pep`]: policy-enforcement reverse proxy validating tokens against the IdM.
//! * [`broker`]: NGSI-style context broker with glob subscriptions and
//!   at-least-once notification delivery.
//! * [`vault`]: key vault running in a simulated enclave; hands public keys to
//!   producers over an attested channel and wrapped private keys to attested consumers.
//! * [`agents`]: simulated smart meters (producers) and enclave aggregators (consumers).

pub mod agents;
pub mod broker;
pub mod http;
pub mod idm;
pub mod pep;
pub mod vault;

/// Header carrying the bearer token.
pub const AUTH_HEADER: &str = "x-auth-token";
/// Header the PEP adds with the validated subject.
pub const SUBJECT_HEADER: &str = "x-forwarded-subject";
