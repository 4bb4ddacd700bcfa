//! Cryptographic contracts used by every node.
//!
//! * RSA key pairs (512 to 8192 bit moduli). 512-bit keys exist only so the
//!   key-generation benchmark can cover the same sizes as the original
//!   measurements; they are not safe for real traffic.
//! * Digest schemes SHA-1 through SHA-512.
//! * Hybrid envelopes: a fresh AES-128-GCM data key, wrapped with RSA-OAEP
//!   (SHA-1 / MGF1-SHA-1, the only OAEP parameter set that still fits a 16
//!   byte key under a 512-bit modulus). The recipient key id is bound as AAD.
//! * Sign-then-seal messages: RSASSA-PKCS1-v1_5 over SHA-256 of the plaintext,
//!   then the plaintext is sealed in a hybrid envelope for the recipient.
//!
//! Everything takes an explicit RNG so simulations can be replayed from a seed.

use std::fmt;

use aes_gcm::aead::{Aead, KeyInit, Payload};
use aes_gcm::{Aes128Gcm, Nonce};
use rand::{CryptoRng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rsa::pkcs1v15::{Signature, SigningKey, VerifyingKey};
use rsa::pkcs8::{DecodePrivateKey, DecodePublicKey, EncodePrivateKey, EncodePublicKey};
use rsa::signature::{SignatureEncoding, Signer, Verifier};
use rsa::traits::PublicKeyParts;
use rsa::{Oaep, RsaPrivateKey, RsaPublicKey};
use sha1::Sha1;
use sha2::{Digest as _, Sha224, Sha256, Sha384, Sha512};
use thiserror::Error;

use crate::wire::{FieldReader, FieldWriter, WireError};

pub const SUPPORTED_MODULUS_BITS: [usize; 5] = [512, 1024, 2048, 4096, 8192];

const DATA_KEY_LEN: usize = 16;
const NONCE_LEN: usize = 12;

#[derive(Debug, Error)]
pub enum CryptoError {
    #[error("unsupported modulus size: {0} bits")]
    UnsupportedKeySize(usize),
    #[error("key generation failed: {0}")]
    KeyGeneration(String),
    #[error("payload is empty")]
    EmptyPayload,
    #[error("envelope is addressed to key {expected}, not {actual}")]
    WrongRecipient { expected: Hash32, actual: Hash32 },
    #[error("wrapped data key could not be recovered")]
    KeyUnwrap,
    #[error("ciphertext failed authentication")]
    Tampered,
    #[error("signature does not verify")]
    BadSignature,
    #[error("message does not fit under this modulus")]
    MessageTooLong,
    #[error("malformed key encoding: {0}")]
    KeyEncoding(String),
    #[error("malformed encoding: {0}")]
    Wire(#[from] WireError),
}

pub type Result<T> = std::result::Result<T, CryptoError>;

/// A 32-byte digest. Transaction ids, key ids and Merkle nodes all use it.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct Hash32(pub [u8; 32]);

impl Hash32 {
    pub const ZERO: Hash32 = Hash32([0; 32]);

    pub fn as_bytes(&self) -> &[u8; 32] {
        &self.0
    }

    pub fn from_slice(bytes: &[u8]) -> Option<Self> {
        bytes.try_into().ok().map(Hash32)
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    pub fn is_zero(&self) -> bool {
        self.0 == [0; 32]
    }
}

impl fmt::Display for Hash32 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl fmt::Debug for Hash32 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Hash32({})", &self.to_hex()[..16])
    }
}

impl AsRef<[u8]> for Hash32 {
    fn as_ref(&self) -> &[u8] {
        &self.0
    }
}

pub fn sha256(data: &[u8]) -> Hash32 {
    Hash32(Sha256::digest(data).into())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum DigestScheme {
    Sha1,
    Sha224,
    Sha256,
    Sha384,
    Sha512,
}

impl DigestScheme {
    pub const ALL: [DigestScheme; 5] = [
        DigestScheme::Sha1,
        DigestScheme::Sha224,
        DigestScheme::Sha256,
        DigestScheme::Sha384,
        DigestScheme::Sha512,
    ];

    pub fn output_len(self) -> usize {
        match self {
            DigestScheme::Sha1 => 20,
            DigestScheme::Sha224 => 28,
            DigestScheme::Sha256 => 32,
            DigestScheme::Sha384 => 48,
            DigestScheme::Sha512 => 64,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            DigestScheme::Sha1 => "sha1",
            DigestScheme::Sha224 => "sha224",
            DigestScheme::Sha256 => "sha256",
            DigestScheme::Sha384 => "sha384",
            DigestScheme::Sha512 => "sha512",
        }
    }

    pub fn digest(self, data: &[u8]) -> Vec<u8> {
        match self {
            DigestScheme::Sha1 => Sha1::digest(data).to_vec(),
            DigestScheme::Sha224 => Sha224::digest(data).to_vec(),
            DigestScheme::Sha256 => Sha256::digest(data).to_vec(),
            DigestScheme::Sha384 => Sha384::digest(data).to_vec(),
            DigestScheme::Sha512 => Sha512::digest(data).to_vec(),
        }
    }
}

impl fmt::Display for DigestScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for DigestScheme {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        let norm: String = s
            .chars()
            .filter(|c| *c != '-' && *c != '_')
            .collect::<String>()
            .to_ascii_lowercase();
        DigestScheme::ALL
            .into_iter()
            .find(|d| d.name() == norm)
            .ok_or_else(|| format!("unknown digest scheme `{s}`"))
    }
}

pub fn digest(data: &[u8], scheme: DigestScheme) -> Vec<u8> {
    scheme.digest(data)
}

fn check_modulus(bits: usize) -> Result<()> {
    if SUPPORTED_MODULUS_BITS.contains(&bits) {
        Ok(())
    } else {
        Err(CryptoError::UnsupportedKeySize(bits))
    }
}

fn oaep() -> Oaep {
    Oaep::new::<Sha1>()
}

/// An RSA public key with its SPKI DER encoding and SHA-256 key id cached.
#[derive(Clone, PartialEq, Eq)]
pub struct PublicKey {
    key: RsaPublicKey,
    der: Vec<u8>,
    id: Hash32,
}

impl PublicKey {
    fn from_rsa(key: RsaPublicKey) -> Self {
        let der = key
            .to_public_key_der()
            .expect("encoding an RSA public key cannot fail")
            .into_vec();
        let id = sha256(&der);
        Self { key, der, id }
    }

    pub fn from_der(der: &[u8]) -> Result<Self> {
        let key = RsaPublicKey::from_public_key_der(der)
            .map_err(|e| CryptoError::KeyEncoding(e.to_string()))?;
        Ok(Self::from_rsa(key))
    }

    pub fn to_der(&self) -> &[u8] {
        &self.der
    }

    /// SHA-256 of the DER encoding; doubles as the key holder's address.
    pub fn key_id(&self) -> Hash32 {
        self.id
    }

    pub fn modulus_bits(&self) -> usize {
        self.key.n().bits()
    }

    /// Encrypts a short message directly under RSA-OAEP.
    pub fn encrypt<R: RngCore + CryptoRng>(&self, rng: &mut R, msg: &[u8]) -> Result<Vec<u8>> {
        self.key
            .encrypt(rng, oaep(), msg)
            .map_err(|_| CryptoError::MessageTooLong)
    }

    pub fn verify(&self, data: &[u8], signature: &[u8]) -> Result<()> {
        let sig = Signature::try_from(signature).map_err(|_| CryptoError::BadSignature)?;
        VerifyingKey::<Sha256>::new(self.key.clone())
            .verify(data, &sig)
            .map_err(|_| CryptoError::BadSignature)
    }
}

impl fmt::Debug for PublicKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "PublicKey({} bits, id {:?})",
            self.modulus_bits(),
            self.id
        )
    }
}

#[derive(Clone)]
pub struct KeyPair {
    private: RsaPrivateKey,
    public: PublicKey,
}

impl KeyPair {
    pub fn generate<R: RngCore + CryptoRng>(modulus_bits: usize, rng: &mut R) -> Result<Self> {
        check_modulus(modulus_bits)?;
        let private = RsaPrivateKey::new(rng, modulus_bits)
            .map_err(|e| CryptoError::KeyGeneration(e.to_string()))?;
        Ok(Self::from_private(private))
    }

    fn from_private(private: RsaPrivateKey) -> Self {
        let public = PublicKey::from_rsa(private.to_public_key());
        Self { private, public }
    }

    pub fn from_private_der(der: &[u8]) -> Result<Self> {
        let private = RsaPrivateKey::from_pkcs8_der(der)
            .map_err(|e| CryptoError::KeyEncoding(e.to_string()))?;
        check_modulus(private.n().bits())?;
        Ok(Self::from_private(private))
    }

    /// PKCS#8 DER of the private key.
    pub fn private_key_der(&self) -> Vec<u8> {
        self.private
            .to_pkcs8_der()
            .expect("encoding an RSA private key cannot fail")
            .as_bytes()
            .to_vec()
    }

    pub fn public(&self) -> &PublicKey {
        &self.public
    }

    pub fn public_key_der(&self) -> &[u8] {
        self.public.to_der()
    }

    pub fn key_id(&self) -> Hash32 {
        self.public.key_id()
    }

    pub fn modulus_bits(&self) -> usize {
        self.public.modulus_bits()
    }

    pub fn decrypt(&self, ciphertext: &[u8]) -> Result<Vec<u8>> {
        self.private
            .decrypt(oaep(), ciphertext)
            .map_err(|_| CryptoError::KeyUnwrap)
    }

    pub fn sign(&self, data: &[u8]) -> Vec<u8> {
        SigningKey::<Sha256>::new(self.private.clone())
            .sign(data)
            .to_vec()
    }
}

impl fmt::Debug for KeyPair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("KeyPair")
            .field("public", &self.public)
            .finish_non_exhaustive()
    }
}

/// Generates a key pair. A seed makes the result reproducible and is meant
/// for tests and simulations only.
pub fn generate_keypair(modulus_bits: usize, seed: Option<u64>) -> Result<KeyPair> {
    match seed {
        Some(seed) => KeyPair::generate(modulus_bits, &mut ChaCha20Rng::seed_from_u64(seed)),
        None => KeyPair::generate(modulus_bits, &mut rand::rngs::OsRng),
    }
}

#[derive(Clone, PartialEq, Eq)]
pub struct HybridEnvelope {
    pub recipient_key_id: Hash32,
    pub wrapped_key: Vec<u8>,
    pub nonce: [u8; NONCE_LEN],
    pub ciphertext: Vec<u8>,
}

impl fmt::Debug for HybridEnvelope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("HybridEnvelope")
            .field("recipient_key_id", &self.recipient_key_id)
            .field("wrapped_key_len", &self.wrapped_key.len())
            .field("ciphertext_len", &self.ciphertext.len())
            .finish()
    }
}

impl HybridEnvelope {
    pub fn encode(&self) -> Vec<u8> {
        let mut w = FieldWriter::new();
        w.field(self.recipient_key_id.as_bytes())
            .field(&self.wrapped_key)
            .field(&self.nonce)
            .field(&self.ciphertext);
        w.finish()
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = FieldReader::new(bytes);
        let recipient_key_id =
            Hash32::from_slice(r.field()?).ok_or(WireError::Invalid("key id length"))?;
        let wrapped_key = r.field()?.to_vec();
        let nonce = r
            .field()?
            .try_into()
            .map_err(|_| WireError::Invalid("nonce length"))?;
        let ciphertext = r.field()?.to_vec();
        r.finish()?;
        Ok(Self {
            recipient_key_id,
            wrapped_key,
            nonce,
            ciphertext,
        })
    }

    /// Digest of the encoded envelope, as sent alongside response bundles.
    pub fn digest(&self) -> Hash32 {
        sha256(&self.encode())
    }
}

pub fn hybrid_encrypt<R: RngCore + CryptoRng>(
    rng: &mut R,
    payload: &[u8],
    recipient: &PublicKey,
) -> Result<HybridEnvelope> {
    if payload.is_empty() {
        return Err(CryptoError::EmptyPayload);
    }
    let mut data_key = [0u8; DATA_KEY_LEN];
    rng.fill_bytes(&mut data_key);
    let mut nonce = [0u8; NONCE_LEN];
    rng.fill_bytes(&mut nonce);

    let recipient_key_id = recipient.key_id();
    let cipher = Aes128Gcm::new_from_slice(&data_key).expect("16-byte key");
    let ciphertext = cipher
        .encrypt(
            Nonce::from_slice(&nonce),
            Payload {
                msg: payload,
                aad: recipient_key_id.as_bytes(),
            },
        )
        .expect("AES-GCM encryption of an in-memory buffer");
    let wrapped_key = recipient.encrypt(rng, &data_key)?;
    Ok(HybridEnvelope {
        recipient_key_id,
        wrapped_key,
        nonce,
        ciphertext,
    })
}

pub fn hybrid_decrypt(env: &HybridEnvelope, recipient: &KeyPair) -> Result<Vec<u8>> {
    if env.recipient_key_id != recipient.key_id() {
        return Err(CryptoError::WrongRecipient {
            expected: env.recipient_key_id,
            actual: recipient.key_id(),
        });
    }
    let data_key = recipient.decrypt(&env.wrapped_key)?;
    if data_key.len() != DATA_KEY_LEN {
        return Err(CryptoError::KeyUnwrap);
    }
    let cipher = Aes128Gcm::new_from_slice(&data_key).map_err(|_| CryptoError::KeyUnwrap)?;
    cipher
        .decrypt(
            Nonce::from_slice(&env.nonce),
            Payload {
                msg: &env.ciphertext,
                aad: env.recipient_key_id.as_bytes(),
            },
        )
        .map_err(|_| CryptoError::Tampered)
}

/// A payload signed by its sender and sealed for one recipient.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct SignedMessage {
    pub envelope: HybridEnvelope,
    pub signature: Vec<u8>,
    pub sender_public_key: Vec<u8>,
}

impl SignedMessage {
    pub fn sender_key_id(&self) -> Hash32 {
        sha256(&self.sender_public_key)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut w = FieldWriter::new();
        w.field(&self.envelope.encode())
            .field(&self.signature)
            .field(&self.sender_public_key);
        w.finish()
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = FieldReader::new(bytes);
        let envelope = HybridEnvelope::decode(r.field()?)?;
        let signature = r.field()?.to_vec();
        let sender_public_key = r.field()?.to_vec();
        r.finish()?;
        Ok(Self {
            envelope,
            signature,
            sender_public_key,
        })
    }
}

pub fn sign_and_seal<R: RngCore + CryptoRng>(
    rng: &mut R,
    payload: &[u8],
    sender: &KeyPair,
    recipient: &PublicKey,
) -> Result<SignedMessage> {
    let signature = sender.sign(payload);
    let envelope = hybrid_encrypt(rng, payload, recipient)?;
    Ok(SignedMessage {
        envelope,
        signature,
        sender_public_key: sender.public_key_der().to_vec(),
    })
}

/// Opens the envelope and returns the payload only if the embedded sender key
/// verifies the signature over the recovered plaintext.
pub fn open_and_verify(msg: &SignedMessage, recipient: &KeyPair) -> Result<Vec<u8>> {
    let payload = hybrid_decrypt(&msg.envelope, recipient)?;
    let sender =
        PublicKey::from_der(&msg.sender_public_key).map_err(|_| CryptoError::BadSignature)?;
    sender.verify(&payload, &msg.signature)?;
    Ok(payload)
}
