//! Core building blocks for end-to-end protected smart-meter telemetry.
//!
//! * [`envelope`]: hybrid public-key envelopes (X25519 + HKDF-SHA256 +
//!   ChaCha20-Poly1305) and symmetric key wrapping.
//! * [`attestation`]: a software-simulated enclave with quotes endorsed by a
//!   mock attestation-verification service, plus the two-message
//!   transcript-bound handshake that yields a shared key.
//! * [`measurement`]: meter readings, deterministic value generators and
//!   windowed per-region aggregation.
//! * [`glob`]: the entity-id pattern matcher used by subscriptions.

#![forbid(unsafe_code)]

pub mod attestation;
pub mod codec;
pub mod envelope;
pub mod glob;
pub mod measurement;

pub use attestation::{
    begin_challenge, compute_measurement, ra_challenge, ra_respond, ra_verify,
    AttestationError, AttestationQuote, AttestationService, ChallengeMessage, ChallengerState,
    EnclaveIdentity, HandshakeResult, Measurement as EnclaveMeasurement, ResponseMessage,
};
pub use envelope::{EncryptedEnvelope, EnvelopeError, KeyPair, WrappedKey};
pub use measurement::{AggregateReport, Aggregator, CycleTiming, Energy, Measurement};
