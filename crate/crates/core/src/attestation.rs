//! Simulated enclave attestation.
//!
//! A mock attestation-verification service (AVS) owns an Ed25519 root key.
//! Provisioning an enclave gives it a signing key plus an endorsement: the
//! root's signature over the enclave measurement and the signing key. Quotes
//! are signatures by that signing key over `measurement || report_data`.
//!
//! The handshake is two messages:
//!
//! 1. challenger → attester: [`ChallengeMessage`] (ephemeral X25519 public key, 16-byte nonce)
//! 2. attester → challenger: [`ResponseMessage`] (attester ephemeral key, [`AttestationQuote`])
//!
//! `report_data` is SHA-512 over both ephemeral keys and the nonce, so a quote
//! is only accepted inside the exchange that produced it. Both sides derive
//! the shared key with HKDF-SHA256 from the X25519 secret, salted with the
//! transcript hash.

use std::fmt;

use ed25519_dalek::{Signature, Signer, SigningKey, VerifyingKey};
use hkdf::Hkdf;
use rand::rngs::OsRng;
use rand::RngCore;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256, Sha512};
use subtle_eq::ct_eq;
use thiserror::Error;
use x25519_dalek::{EphemeralSecret, PublicKey};
use zeroize::Zeroizing;

use crate::codec::{self, b64, b64_array};

pub const NONCE_LEN: usize = 16;
pub const REPORT_DATA_LEN: usize = 64;

const MEASUREMENT_LABEL: &[u8] = b"vaultcast/measurement/v1\0";
const ENDORSEMENT_LABEL: &[u8] = b"vaultcast/endorsement/v1";
const QUOTE_LABEL: &[u8] = b"vaultcast/quote/v1";
const TRANSCRIPT_LABEL: &[u8] = b"vaultcast/ra-transcript/v1";
const SHARED_KEY_INFO: &[u8] = b"vaultcast/ra-shared-key/v1";

/// Why a quote was refused. Only used for diagnostics and audit; callers
/// release nothing on any of them.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RejectReason {
    Endorsement,
    Signature,
    Transcript,
    Measurement,
}

impl fmt::Display for RejectReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RejectReason::Endorsement => "endorsement does not verify under the AVS root",
            RejectReason::Signature => "quote signature invalid",
            RejectReason::Transcript => "quote not bound to this handshake",
            RejectReason::Measurement => "measurement does not match the expected value",
        })
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum AttestationError {
    #[error("precondition violated: {0}")]
    Precondition(&'static str),
    #[error("encoding error: {0}")]
    Encoding(&'static str),
    #[error("protocol error: {0}")]
    Protocol(&'static str),
    #[error("attestation rejected: {0}")]
    Rejected(RejectReason),
}

/// Digest identifying an enclave's code.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Measurement(#[serde(with = "b64_array")] pub [u8; 32]);

impl Measurement {
    pub fn as_bytes(&self) -> &[u8; 32] {
        &self.0
    }
}

impl fmt::Debug for Measurement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Measurement({})", codec::encode(&self.0))
    }
}

/// SHA-256 over the declared code identity string.
pub fn compute_measurement(code_identity: &str) -> Result<Measurement, AttestationError> {
    if code_identity.is_empty() {
        return Err(AttestationError::Precondition("code identity must be non-empty"));
    }
    let mut h = Sha256::new();
    h.update(MEASUREMENT_LABEL);
    h.update(code_identity.as_bytes());
    Ok(Measurement(h.finalize().into()))
}

fn endorsement_message(measurement: &Measurement, signing_public: &[u8]) -> Vec<u8> {
    [ENDORSEMENT_LABEL, &measurement.0[..], signing_public].concat()
}

fn quote_message(measurement: &Measurement, report_data: &[u8; REPORT_DATA_LEN]) -> Vec<u8> {
    [QUOTE_LABEL, &measurement.0[..], &report_data[..]].concat()
}

/// Signs `(measurement, signing_public)` with the AVS root private key.
pub fn issue_endorsement(
    avs_root_private: &[u8],
    measurement: &Measurement,
    signing_public: &[u8],
) -> Result<Vec<u8>, AttestationError> {
    let root: [u8; 32] = avs_root_private
        .try_into()
        .map_err(|_| AttestationError::Encoding("AVS root key must be 32 bytes"))?;
    let root = SigningKey::from_bytes(&root);
    Ok(root
        .sign(&endorsement_message(measurement, signing_public))
        .to_bytes()
        .to_vec())
}

pub fn verify_endorsement(
    avs_root_public: &[u8],
    measurement: &Measurement,
    signing_public: &[u8],
    endorsement: &[u8],
) -> Result<(), AttestationError> {
    let reject = AttestationError::Rejected(RejectReason::Endorsement);
    let root = verifying_key(avs_root_public).map_err(|_| reject.clone())?;
    let sig = Signature::from_slice(endorsement).map_err(|_| reject.clone())?;
    root.verify_strict(&endorsement_message(measurement, signing_public), &sig)
        .map_err(|_| reject)
}

fn verifying_key(bytes: &[u8]) -> Result<VerifyingKey, AttestationError> {
    let bytes: [u8; 32] = bytes
        .try_into()
        .map_err(|_| AttestationError::Encoding("public key must be 32 bytes"))?;
    VerifyingKey::from_bytes(&bytes).map_err(|_| AttestationError::Encoding("invalid public key"))
}

/// The mock attestation-verification service: a root signing key.
pub struct AttestationService {
    root: SigningKey,
}

impl AttestationService {
    pub fn generate() -> Self {
        Self {
            root: SigningKey::generate(&mut OsRng),
        }
    }

    pub fn from_root_private(bytes: &[u8]) -> Result<Self, AttestationError> {
        let bytes: [u8; 32] = bytes
            .try_into()
            .map_err(|_| AttestationError::Encoding("AVS root key must be 32 bytes"))?;
        Ok(Self {
            root: SigningKey::from_bytes(&bytes),
        })
    }

    pub fn root_public(&self) -> [u8; 32] {
        self.root.verifying_key().to_bytes()
    }

    pub fn root_private(&self) -> Zeroizing<[u8; 32]> {
        Zeroizing::new(self.root.to_bytes())
    }

    /// Creates an endorsed enclave identity for `code_identity`.
    pub fn provision(&self, code_identity: &str) -> Result<EnclaveIdentity, AttestationError> {
        let measurement = compute_measurement(code_identity)?;
        let signing_key = SigningKey::generate(&mut OsRng);
        let endorsement = issue_endorsement(
            &*self.root_private(),
            &measurement,
            signing_key.verifying_key().as_bytes(),
        )?;
        Ok(EnclaveIdentity {
            measurement,
            signing_key,
            endorsement,
        })
    }
}

impl fmt::Debug for AttestationService {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("AttestationService")
            .field("root_public", &codec::encode(&self.root_public()))
            .finish_non_exhaustive()
    }
}

/// Identity of a simulated enclave.
#[derive(Clone)]
pub struct EnclaveIdentity {
    pub measurement: Measurement,
    signing_key: SigningKey,
    pub endorsement: Vec<u8>,
}

impl EnclaveIdentity {
    /// Builds an identity from explicit parts. No endorsement check happens here;
    /// a bad endorsement is caught by the verifier.
    pub fn from_parts(measurement: Measurement, signing_key: [u8; 32], endorsement: Vec<u8>) -> Self {
        Self {
            measurement,
            signing_key: SigningKey::from_bytes(&signing_key),
            endorsement,
        }
    }

    pub fn signing_public(&self) -> [u8; 32] {
        self.signing_key.verifying_key().to_bytes()
    }

    fn quote(&self, report_data: [u8; REPORT_DATA_LEN]) -> AttestationQuote {
        let signature = self.signing_key.sign(&quote_message(&self.measurement, &report_data));
        AttestationQuote {
            measurement: self.measurement,
            report_data,
            signature: signature.to_bytes().to_vec(),
            endorsement: self.endorsement.clone(),
            signing_public: self.signing_public(),
        }
    }
}

impl fmt::Debug for EnclaveIdentity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("EnclaveIdentity")
            .field("measurement", &self.measurement)
            .field("signing_public", &codec::encode(&self.signing_public()))
            .finish_non_exhaustive()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttestationQuote {
    pub measurement: Measurement,
    #[serde(with = "b64_array")]
    pub report_data: [u8; REPORT_DATA_LEN],
    #[serde(with = "b64")]
    pub signature: Vec<u8>,
    #[serde(with = "b64")]
    pub endorsement: Vec<u8>,
    /// Public half of the endorsed quoting key.
    #[serde(with = "b64_array")]
    pub signing_public: [u8; 32],
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChallengeMessage {
    #[serde(with = "b64_array")]
    pub ephemeral_public: [u8; 32],
    #[serde(with = "b64_array")]
    pub nonce: [u8; NONCE_LEN],
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResponseMessage {
    #[serde(with = "b64_array")]
    pub ephemeral_public: [u8; 32],
    pub quote: AttestationQuote,
}

/// Outcome of a completed handshake on either side.
#[derive(Clone)]
pub struct HandshakeResult {
    pub shared_key: Zeroizing<[u8; 32]>,
    /// Measurement that was attested in this exchange.
    pub peer_measurement: Measurement,
    pub transcript_hash: [u8; 32],
}

impl fmt::Debug for HandshakeResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("HandshakeResult")
            .field("peer_measurement", &self.peer_measurement)
            .field("transcript_hash", &codec::encode(&self.transcript_hash))
            .finish_non_exhaustive()
    }
}

/// Challenger-side secrets kept between sending the challenge and verifying the response.
pub struct ChallengerState {
    ephemeral: EphemeralSecret,
    ephemeral_public: [u8; 32],
    nonce: [u8; NONCE_LEN],
}

impl fmt::Debug for ChallengerState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ChallengerState").finish_non_exhaustive()
    }
}

/// Starts a handshake with a fresh ephemeral key and nonce.
pub fn begin_challenge() -> (ChallengerState, ChallengeMessage) {
    let ephemeral = EphemeralSecret::random_from_rng(OsRng);
    let ephemeral_public = PublicKey::from(&ephemeral).to_bytes();
    let mut nonce = [0u8; NONCE_LEN];
    OsRng.fill_bytes(&mut nonce);
    let message = ChallengeMessage {
        ephemeral_public,
        nonce,
    };
    (
        ChallengerState {
            ephemeral,
            ephemeral_public,
            nonce,
        },
        message,
    )
}

/// Builds the first handshake message from raw parts.
pub fn ra_challenge(
    challenger_ephemeral_public: &[u8],
    challenge_nonce: &[u8],
) -> Result<ChallengeMessage, AttestationError> {
    Ok(ChallengeMessage {
        ephemeral_public: challenger_ephemeral_public
            .try_into()
            .map_err(|_| AttestationError::Encoding("ephemeral public key must be 32 bytes"))?,
        nonce: challenge_nonce
            .try_into()
            .map_err(|_| AttestationError::Encoding("challenge nonce must be 16 bytes"))?,
    })
}

fn report_data(
    challenger_public: &[u8; 32],
    attester_public: &[u8; 32],
    nonce: &[u8; NONCE_LEN],
) -> [u8; REPORT_DATA_LEN] {
    let mut h = Sha512::new();
    h.update(TRANSCRIPT_LABEL);
    h.update(challenger_public);
    h.update(attester_public);
    h.update(nonce);
    h.finalize().into()
}

fn transcript_hash(report_data: &[u8; REPORT_DATA_LEN], measurement: &Measurement) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(TRANSCRIPT_LABEL);
    h.update(report_data);
    h.update(measurement.0);
    h.finalize().into()
}

fn derive_shared_key(dh: &[u8; 32], transcript: &[u8; 32]) -> Zeroizing<[u8; 32]> {
    let mut okm = Zeroizing::new([0u8; 32]);
    Hkdf::<Sha256>::new(Some(transcript), dh)
        .expand(SHARED_KEY_INFO, &mut okm[..])
        .expect("32 bytes is a valid HKDF-SHA256 output length");
    okm
}

/// Attester side: answers a challenge with a transcript-bound quote.
pub fn ra_respond(
    identity: &EnclaveIdentity,
    challenge: &ChallengeMessage,
) -> Result<(ResponseMessage, HandshakeResult), AttestationError> {
    let ephemeral = EphemeralSecret::random_from_rng(OsRng);
    let ephemeral_public = PublicKey::from(&ephemeral).to_bytes();
    let dh = ephemeral.diffie_hellman(&PublicKey::from(challenge.ephemeral_public));
    if !dh.was_contributory() {
        return Err(AttestationError::Protocol("challenger key is a low-order point"));
    }
    let report = report_data(&challenge.ephemeral_public, &ephemeral_public, &challenge.nonce);
    let transcript = transcript_hash(&report, &identity.measurement);
    let result = HandshakeResult {
        shared_key: derive_shared_key(dh.as_bytes(), &transcript),
        peer_measurement: identity.measurement,
        transcript_hash: transcript,
    };
    let response = ResponseMessage {
        ephemeral_public,
        quote: identity.quote(report),
    };
    Ok((response, result))
}

/// Challenger side: checks the endorsement chain, quote signature, transcript
/// binding and measurement, then derives the shared key.
pub fn ra_verify(
    avs_root_public: &[u8],
    expected_measurement: &Measurement,
    state: ChallengerState,
    response: &ResponseMessage,
) -> Result<HandshakeResult, AttestationError> {
    let quote = &response.quote;
    verify_endorsement(
        avs_root_public,
        &quote.measurement,
        &quote.signing_public,
        &quote.endorsement,
    )?;

    let reject_sig = AttestationError::Rejected(RejectReason::Signature);
    let signer = verifying_key(&quote.signing_public).map_err(|_| reject_sig.clone())?;
    let signature = Signature::from_slice(&quote.signature).map_err(|_| reject_sig.clone())?;
    signer
        .verify_strict(&quote_message(&quote.measurement, &quote.report_data), &signature)
        .map_err(|_| reject_sig)?;

    let expected_report = report_data(&state.ephemeral_public, &response.ephemeral_public, &state.nonce);
    if !ct_eq(&expected_report, &quote.report_data) {
        return Err(AttestationError::Rejected(RejectReason::Transcript));
    }
    if !ct_eq(&quote.measurement.0, &expected_measurement.0) {
        return Err(AttestationError::Rejected(RejectReason::Measurement));
    }

    let dh = state
        .ephemeral
        .diffie_hellman(&PublicKey::from(response.ephemeral_public));
    if !dh.was_contributory() {
        return Err(AttestationError::Rejected(RejectReason::Transcript));
    }
    let transcript = transcript_hash(&expected_report, expected_measurement);
    Ok(HandshakeResult {
        shared_key: derive_shared_key(dh.as_bytes(), &transcript),
        peer_measurement: *expected_measurement,
        transcript_hash: transcript,
    })
}

mod subtle_eq {
    use subtle::ConstantTimeEq;

    pub fn ct_eq(a: &[u8], b: &[u8]) -> bool {
        a.len() == b.len() && bool::from(a.ct_eq(b))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn handshake(
        avs: &AttestationService,
        identity: &EnclaveIdentity,
        expected: &Measurement,
    ) -> (Result<HandshakeResult, AttestationError>, HandshakeResult) {
        let (state, challenge) = begin_challenge();
        let (response, attester) = ra_respond(identity, &challenge).unwrap();
        (ra_verify(&avs.root_public(), expected, state, &response), attester)
    }

    #[test]
    fn measurement_is_deterministic_and_distinct() {
        let a = compute_measurement("consumer-v1").unwrap();
        assert_eq!(a, compute_measurement("consumer-v1").unwrap());
        assert_ne!(a, compute_measurement("consumer-v2").unwrap());
        assert_eq!(a.as_bytes().len(), 32);
        assert_eq!(
            compute_measurement("").unwrap_err(),
            AttestationError::Precondition("code identity must be non-empty")
        );
    }

    #[test]
    fn endorsement_binding() {
        let avs = AttestationService::generate();
        let other = AttestationService::generate();
        let m = compute_measurement("vault-v1").unwrap();
        let signer = [3u8; 32];
        let e = issue_endorsement(&*avs.root_private(), &m, &signer).unwrap();
        assert!(verify_endorsement(&avs.root_public(), &m, &signer, &e).is_ok());
        assert_eq!(
            verify_endorsement(&other.root_public(), &m, &signer, &e).unwrap_err(),
            AttestationError::Rejected(RejectReason::Endorsement)
        );
        let altered = compute_measurement("vault-v2").unwrap();
        assert!(verify_endorsement(&avs.root_public(), &altered, &signer, &e).is_err());
        assert!(issue_endorsement(&[1u8; 3], &m, &signer).is_err());
    }

    #[test]
    fn challenge_codec_and_freshness() {
        let (_, a) = begin_challenge();
        let (_, b) = begin_challenge();
        assert_ne!(a.nonce, b.nonce);
        let json = serde_json::to_string(&a).unwrap();
        assert_eq!(serde_json::from_str::<ChallengeMessage>(&json).unwrap(), a);

        assert_eq!(ra_challenge(&a.ephemeral_public, &a.nonce).unwrap(), a);
        assert!(matches!(
            ra_challenge(&a.ephemeral_public, &[0u8; 15]),
            Err(AttestationError::Encoding(_))
        ));
        assert!(matches!(
            ra_challenge(&[0u8; 31], &a.nonce),
            Err(AttestationError::Encoding(_))
        ));
    }

    #[test]
    fn malformed_challenge_json_is_refused() {
        let short_nonce = format!(
            r#"{{"ephemeral_public":"{}","nonce":"{}"}}"#,
            codec::encode(&[1u8; 32]),
            codec::encode(&[1u8; 8])
        );
        assert!(serde_json::from_str::<ChallengeMessage>(&short_nonce).is_err());
    }

    #[test]
    fn low_order_challenge_is_a_protocol_error() {
        let avs = AttestationService::generate();
        let id = avs.provision("consumer-v1").unwrap();
        let challenge = ChallengeMessage {
            ephemeral_public: [0u8; 32],
            nonce: [1u8; NONCE_LEN],
        };
        assert!(matches!(
            ra_respond(&id, &challenge),
            Err(AttestationError::Protocol(_))
        ));
    }

    #[test]
    fn honest_handshake_agrees_on_key() {
        let avs = AttestationService::generate();
        let id = avs.provision("consumer-v1").unwrap();
        let (verified, attester) = handshake(&avs, &id, &id.measurement);
        let verified = verified.unwrap();
        assert_eq!(*verified.shared_key, *attester.shared_key);
        assert_eq!(verified.transcript_hash, attester.transcript_hash);
        assert_eq!(verified.peer_measurement, id.measurement);
    }

    #[test]
    fn response_round_trips_through_json() {
        let avs = AttestationService::generate();
        let id = avs.provision("consumer-v1").unwrap();
        let (state, challenge) = begin_challenge();
        let (response, _) = ra_respond(&id, &challenge).unwrap();
        let json = serde_json::to_vec(&response).unwrap();
        let back: ResponseMessage = serde_json::from_slice(&json).unwrap();
        assert_eq!(back, response);
        assert!(ra_verify(&avs.root_public(), &id.measurement, state, &back).is_ok());
    }

    #[test]
    fn measurement_mismatch_is_rejected() {
        let avs = AttestationService::generate();
        let evil = avs.provision("evil-consumer").unwrap();
        let expected = compute_measurement("consumer-v1").unwrap();
        let (verified, _) = handshake(&avs, &evil, &expected);
        assert_eq!(
            verified.unwrap_err(),
            AttestationError::Rejected(RejectReason::Measurement)
        );
    }

    #[test]
    fn cross_wired_quotes_are_rejected() {
        let avs = AttestationService::generate();
        let id = avs.provision("consumer-v1").unwrap();
        let (state_a, challenge_a) = begin_challenge();
        let (state_b, challenge_b) = begin_challenge();
        let (response_a, _) = ra_respond(&id, &challenge_a).unwrap();
        let (response_b, _) = ra_respond(&id, &challenge_b).unwrap();

        // Whole response A replayed into handshake B.
        assert_eq!(
            ra_verify(&avs.root_public(), &id.measurement, state_b, &response_a).unwrap_err(),
            AttestationError::Rejected(RejectReason::Transcript)
        );
        // Quote B spliced under A's ephemeral key.
        let spliced = ResponseMessage {
            ephemeral_public: response_a.ephemeral_public,
            quote: response_b.quote,
        };
        assert_eq!(
            ra_verify(&avs.root_public(), &id.measurement, state_a, &spliced).unwrap_err(),
            AttestationError::Rejected(RejectReason::Transcript)
        );
    }

    #[test]
    fn signature_bit_flips_are_rejected() {
        let avs = AttestationService::generate();
        let id = avs.provision("consumer-v1").unwrap();
        for bit in 0..64 {
            let (state, challenge) = begin_challenge();
            let (mut response, _) = ra_respond(&id, &challenge).unwrap();
            response.quote.signature[bit / 8] ^= 1 << (bit % 8);
            let err = ra_verify(&avs.root_public(), &id.measurement, state, &response).unwrap_err();
            assert!(matches!(err, AttestationError::Rejected(_)), "bit {bit}: {err:?}");
        }
    }

    #[test]
    fn zeroed_endorsement_is_rejected() {
        let avs = AttestationService::generate();
        let mut id = avs.provision("consumer-v1").unwrap();
        id.endorsement = vec![0u8; id.endorsement.len()];
        let (verified, _) = handshake(&avs, &id, &id.measurement.clone());
        assert_eq!(
            verified.unwrap_err(),
            AttestationError::Rejected(RejectReason::Endorsement)
        );
    }

    #[test]
    fn self_endorsed_enclave_is_rejected() {
        let avs = AttestationService::generate();
        let rogue_root = AttestationService::generate();
        let rogue = rogue_root.provision("consumer-v1").unwrap();
        let (verified, _) = handshake(&avs, &rogue, &rogue.measurement.clone());
        assert_eq!(
            verified.unwrap_err(),
            AttestationError::Rejected(RejectReason::Endorsement)
        );
    }

    #[test]
    fn debug_output_hides_secrets() {
        let avs = AttestationService::generate();
        let id = avs.provision("consumer-v1").unwrap();
        let (_, result) = handshake(&avs, &id, &id.measurement);
        let printed = format!("{result:?}{id:?}{avs:?}");
        assert!(!printed.contains(&codec::encode(&*result.shared_key)));
        assert!(!printed.contains(&codec::encode(&*avs.root_private())));
    }
}
