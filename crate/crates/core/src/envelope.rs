//! Hybrid public-key envelopes and symmetric key wrapping.
//!
//! An envelope is produced by generating an ephemeral X25519 key, agreeing a
//! secret with the recipient's static public key, stretching it with
//! HKDF-SHA256 into a 256-bit key and sealing the payload with
//! ChaCha20-Poly1305. The key id travels as associated data, so relabelling
//! an envelope is detected exactly like any other modification.
//!
//! Wrong keys and tampered envelopes both surface as
//! [`EnvelopeError::Authentication`]; callers cannot tell them apart.

use std::fmt;

use chacha20poly1305::aead::{AeadInPlace, KeyInit};
use chacha20poly1305::{ChaCha20Poly1305, Key, Nonce, Tag};
use hkdf::Hkdf;
use rand::rngs::OsRng;
use rand::RngCore;
use serde::{Deserialize, Serialize};
use sha2::Sha256;
use thiserror::Error;
use x25519_dalek::{EphemeralSecret, PublicKey, StaticSecret};
use zeroize::{Zeroize, Zeroizing};

use crate::codec::b64;

/// Largest plaintext accepted by [`encrypt`].
pub const MAX_PLAINTEXT_LEN: usize = 64 * 1024;
pub const KEY_LEN: usize = 32;
pub const NONCE_LEN: usize = 12;
pub const TAG_LEN: usize = 16;

const ENVELOPE_INFO: &[u8] = b"vaultcast/envelope/v1";
const WRAP_AAD: &[u8] = b"vaultcast/key-wrap/v1";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum EnvelopeError {
    #[error("scope must be non-empty")]
    EmptyScope,
    #[error("encoding error: {0}")]
    Encoding(&'static str),
    #[error("payload of {0} bytes exceeds the {MAX_PLAINTEXT_LEN} byte limit")]
    PayloadTooLarge(usize),
    #[error("authentication failed")]
    Authentication,
}

/// A scoped X25519 key pair. The private half is wiped on drop and never
/// printed by `Debug`.
#[derive(Clone)]
pub struct KeyPair {
    pub key_id: String,
    pub public_part: Vec<u8>,
    pub private_part: Zeroizing<Vec<u8>>,
}

impl KeyPair {
    pub fn public_info(&self) -> PublicKeyInfo {
        PublicKeyInfo {
            key_id: self.key_id.clone(),
            public_part: self.public_part.clone(),
        }
    }
}

impl fmt::Debug for KeyPair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("KeyPair")
            .field("key_id", &self.key_id)
            .field("public_part", &crate::codec::encode(&self.public_part))
            .field("private_part", &"<redacted>")
            .finish()
    }
}

/// The public half of a [`KeyPair`] together with its id, as handed to producers.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PublicKeyInfo {
    pub key_id: String,
    #[serde(with = "b64")]
    pub public_part: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncryptedEnvelope {
    pub key_id: String,
    #[serde(with = "b64")]
    pub ephemeral_public: Vec<u8>,
    #[serde(with = "b64")]
    pub nonce: Vec<u8>,
    #[serde(with = "b64")]
    pub ciphertext: Vec<u8>,
    #[serde(with = "b64")]
    pub auth_tag: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WrappedKey {
    #[serde(with = "b64")]
    pub wrapped_bytes: Vec<u8>,
    #[serde(with = "b64")]
    pub nonce: Vec<u8>,
    #[serde(with = "b64")]
    pub auth_tag: Vec<u8>,
}

/// Generates a fresh key pair whose id is prefixed by `scope`.
pub fn generate_keypair(scope: &str) -> Result<KeyPair, EnvelopeError> {
    if scope.is_empty() {
        return Err(EnvelopeError::EmptyScope);
    }
    let secret = StaticSecret::random_from_rng(OsRng);
    let public = PublicKey::from(&secret);
    Ok(KeyPair {
        key_id: format!("{scope}:{}", uuid::Uuid::new_v4().simple()),
        public_part: public.as_bytes().to_vec(),
        private_part: Zeroizing::new(secret.to_bytes().to_vec()),
    })
}

/// Derives the public part belonging to an encoded private key.
pub fn public_from_private(private_part: &[u8]) -> Result<Vec<u8>, EnvelopeError> {
    let secret = static_secret(private_part)?;
    Ok(PublicKey::from(&secret).as_bytes().to_vec())
}

/// Encrypts `plaintext` to the holder of the private key matching `public_part`.
pub fn encrypt(
    key_id: &str,
    public_part: &[u8],
    plaintext: &[u8],
) -> Result<EncryptedEnvelope, EnvelopeError> {
    if plaintext.len() > MAX_PLAINTEXT_LEN {
        return Err(EnvelopeError::PayloadTooLarge(plaintext.len()));
    }
    let recipient: [u8; 32] = public_part
        .try_into()
        .map_err(|_| EnvelopeError::Encoding("public key must be 32 bytes"))?;
    let recipient = PublicKey::from(recipient);

    let ephemeral = EphemeralSecret::random_from_rng(OsRng);
    let ephemeral_public = PublicKey::from(&ephemeral);
    let shared = ephemeral.diffie_hellman(&recipient);
    if !shared.was_contributory() {
        return Err(EnvelopeError::Encoding("public key is a low-order point"));
    }
    let key = derive_envelope_key(shared.as_bytes(), ephemeral_public.as_bytes(), recipient.as_bytes());

    let nonce = random_nonce();
    let mut buffer = plaintext.to_vec();
    let tag = ChaCha20Poly1305::new(Key::from_slice(&key[..]))
        .encrypt_in_place_detached(Nonce::from_slice(&nonce), key_id.as_bytes(), &mut buffer)
        .map_err(|_| EnvelopeError::Encoding("payload could not be sealed"))?;

    Ok(EncryptedEnvelope {
        key_id: key_id.to_owned(),
        ephemeral_public: ephemeral_public.as_bytes().to_vec(),
        nonce: nonce.to_vec(),
        ciphertext: buffer,
        auth_tag: tag.to_vec(),
    })
}

/// Opens an envelope with the recipient's private key.
///
/// Only a malformed `private_part` yields an encoding error; every defect in
/// the envelope itself is reported as [`EnvelopeError::Authentication`].
pub fn decrypt(private_part: &[u8], env: &EncryptedEnvelope) -> Result<Vec<u8>, EnvelopeError> {
    let secret = static_secret(private_part)?;
    let own_public = PublicKey::from(&secret);

    let ephemeral: [u8; 32] = env
        .ephemeral_public
        .as_slice()
        .try_into()
        .map_err(|_| EnvelopeError::Authentication)?;
    if env.nonce.len() != NONCE_LEN || env.auth_tag.len() != TAG_LEN {
        return Err(EnvelopeError::Authentication);
    }
    let shared = secret.diffie_hellman(&PublicKey::from(ephemeral));
    if !shared.was_contributory() {
        return Err(EnvelopeError::Authentication);
    }
    let key = derive_envelope_key(shared.as_bytes(), &ephemeral, own_public.as_bytes());

    let mut buffer = env.ciphertext.clone();
    ChaCha20Poly1305::new(Key::from_slice(&key[..]))
        .decrypt_in_place_detached(
            Nonce::from_slice(&env.nonce),
            env.key_id.as_bytes(),
            &mut buffer,
            Tag::from_slice(&env.auth_tag),
        )
        .map_err(|_| EnvelopeError::Authentication)?;
    Ok(buffer)
}

/// Encrypts key material under a 32-byte handshake key.
pub fn wrap_key(shared_key: &[u8], private_part: &[u8]) -> Result<WrappedKey, EnvelopeError> {
    let cipher = symmetric_cipher(shared_key)?;
    let nonce = random_nonce();
    let mut buffer = private_part.to_vec();
    let tag = cipher
        .encrypt_in_place_detached(Nonce::from_slice(&nonce), WRAP_AAD, &mut buffer)
        .map_err(|_| EnvelopeError::Encoding("key could not be wrapped"))?;
    Ok(WrappedKey {
        wrapped_bytes: buffer,
        nonce: nonce.to_vec(),
        auth_tag: tag.to_vec(),
    })
}

pub fn unwrap_key(shared_key: &[u8], wk: &WrappedKey) -> Result<Zeroizing<Vec<u8>>, EnvelopeError> {
    let cipher = symmetric_cipher(shared_key)?;
    if wk.nonce.len() != NONCE_LEN || wk.auth_tag.len() != TAG_LEN {
        return Err(EnvelopeError::Authentication);
    }
    let mut buffer = Zeroizing::new(wk.wrapped_bytes.clone());
    cipher
        .decrypt_in_place_detached(
            Nonce::from_slice(&wk.nonce),
            WRAP_AAD,
            &mut *buffer,
            Tag::from_slice(&wk.auth_tag),
        )
        .map_err(|_| EnvelopeError::Authentication)?;
    Ok(buffer)
}

fn static_secret(private_part: &[u8]) -> Result<StaticSecret, EnvelopeError> {
    let mut bytes: [u8; 32] = private_part
        .try_into()
        .map_err(|_| EnvelopeError::Encoding("private key must be 32 bytes"))?;
    let secret = StaticSecret::from(bytes);
    bytes.zeroize();
    Ok(secret)
}

fn symmetric_cipher(shared_key: &[u8]) -> Result<ChaCha20Poly1305, EnvelopeError> {
    if shared_key.len() != KEY_LEN {
        return Err(EnvelopeError::Encoding("shared key must be 32 bytes"));
    }
    Ok(ChaCha20Poly1305::new(Key::from_slice(shared_key)))
}

fn derive_envelope_key(
    shared: &[u8; 32],
    ephemeral_public: &[u8; 32],
    recipient_public: &[u8; 32],
) -> Zeroizing<[u8; KEY_LEN]> {
    let mut salt = [0u8; 64];
    salt[..32].copy_from_slice(ephemeral_public);
    salt[32..].copy_from_slice(recipient_public);
    let mut okm = Zeroizing::new([0u8; KEY_LEN]);
    Hkdf::<Sha256>::new(Some(&salt), shared)
        .expand(ENVELOPE_INFO, &mut okm[..])
        .expect("32 bytes is a valid HKDF-SHA256 output length");
    okm
}

fn random_nonce() -> [u8; NONCE_LEN] {
    let mut nonce = [0u8; NONCE_LEN];
    OsRng.fill_bytes(&mut nonce);
    nonce
}
