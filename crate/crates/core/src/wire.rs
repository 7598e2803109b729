//! Envelope wire format.
//!
//! ```text
//! [u32 BE length of everything after it]
//! [16-byte nonce][u8 msg_type][u16 BE sender_id length][sender_id][sealed_payload]
//! ```
//!
//! `sealed_payload` is ChaCha20-Poly1305 ciphertext‖tag of a padded JSON body,
//! except for attestation messages which carry the padded body in clear since
//! no session key exists yet. Bodies are padded to a multiple of the bucket
//! size so that all queries of the same bucket produce identical lengths.

use chacha20poly1305::aead::{Aead, KeyInit, Payload as AeadPayload};
use chacha20poly1305::{ChaCha20Poly1305, Key, Nonce};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::SearchResult;
use crate::peers::{PeerDescriptor, PeerId};

pub const NONCE_LEN: usize = 16;
pub const TAG_LEN: usize = 16;
pub const DEFAULT_BUCKET_SIZE: usize = 256;
/// Upper bound on a decoded frame, to refuse absurd length prefixes.
pub const MAX_FRAME_LEN: usize = 4 << 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[repr(u8)]
pub enum MsgType {
    QueryForward = 1,
    QueryResponse = 2,
    Shuffle = 3,
    ShuffleReply = 4,
    Attest = 5,
    AttestReply = 6,
}

impl MsgType {
    pub fn from_byte(b: u8) -> Result<Self> {
        Ok(match b {
            1 => MsgType::QueryForward,
            2 => MsgType::QueryResponse,
            3 => MsgType::Shuffle,
            4 => MsgType::ShuffleReply,
            5 => MsgType::Attest,
            6 => MsgType::AttestReply,
            other => return Err(Error::Decode(format!("unknown message type {other}"))),
        })
    }

    pub fn is_sealed(self) -> bool {
        !matches!(self, MsgType::Attest | MsgType::AttestReply)
    }
}

pub type Nonce128 = [u8; NONCE_LEN];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Envelope {
    pub nonce: Nonce128,
    pub msg_type: MsgType,
    pub sender_id: PeerId,
    pub sealed_payload: Vec<u8>,
}

impl Envelope {
    /// Encodes the full frame including the length prefix.
    pub fn encode(&self) -> Vec<u8> {
        let sender = self.sender_id.as_str().as_bytes();
        assert!(sender.len() <= u16::MAX as usize, "sender id too long");
        let body_len = NONCE_LEN + 1 + 2 + sender.len() + self.sealed_payload.len();
        let mut out = Vec::with_capacity(4 + body_len);
        out.extend_from_slice(&(body_len as u32).to_be_bytes());
        out.extend_from_slice(&self.nonce);
        out.push(self.msg_type as u8);
        out.extend_from_slice(&(sender.len() as u16).to_be_bytes());
        out.extend_from_slice(sender);
        out.extend_from_slice(&self.sealed_payload);
        out
    }

    /// Decodes one complete frame; the buffer must hold exactly that frame.
    pub fn decode(frame: &[u8]) -> Result<Self> {
        if frame.len() < 4 {
            return Err(Error::Decode("truncated length prefix".into()));
        }
        let len = u32::from_be_bytes(frame[..4].try_into().unwrap()) as usize;
        if len != frame.len() - 4 {
            return Err(Error::Decode(format!(
                "length prefix {len} does not match frame body {}",
                frame.len() - 4
            )));
        }
        Self::decode_body(&frame[4..])
    }

    /// Decodes the bytes that follow the length prefix.
    pub fn decode_body(body: &[u8]) -> Result<Self> {
        if body.len() > MAX_FRAME_LEN {
            return Err(Error::Decode("frame too large".into()));
        }
        if body.len() < NONCE_LEN + 3 {
            return Err(Error::Decode("truncated header".into()));
        }
        let nonce: Nonce128 = body[..NONCE_LEN].try_into().unwrap();
        let msg_type = MsgType::from_byte(body[NONCE_LEN])?;
        let id_len = u16::from_be_bytes([body[NONCE_LEN + 1], body[NONCE_LEN + 2]]) as usize;
        let id_start = NONCE_LEN + 3;
        if body.len() < id_start + id_len {
            return Err(Error::Decode("truncated sender id".into()));
        }
        let sender = std::str::from_utf8(&body[id_start..id_start + id_len])
            .map_err(|_| Error::Decode("sender id is not utf-8".into()))?;
        Ok(Envelope {
            nonce,
            msg_type,
            sender_id: PeerId(sender.to_owned()),
            sealed_payload: body[id_start + id_len..].to_vec(),
        })
    }

    fn aad(&self) -> Vec<u8> {
        let sender = self.sender_id.as_str().as_bytes();
        let mut aad = Vec::with_capacity(1 + sender.len() + NONCE_LEN);
        aad.push(self.msg_type as u8);
        aad.extend_from_slice(sender);
        aad.extend_from_slice(&self.nonce);
        aad
    }
}

/// Symmetric key shared by two attested peers.
#[derive(Clone, PartialEq, Eq)]
pub struct SessionKey(pub [u8; 32]);

impl std::fmt::Debug for SessionKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("SessionKey(..)")
    }
}

/// Body of every message, serialized as JSON before padding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Body {
    Query {
        ticket: u64,
        query: String,
    },
    Results {
        ticket: u64,
        results: Vec<SearchResult>,
    },
    Failure {
        ticket: u64,
        reason: String,
    },
    Shuffle {
        entries: Vec<PeerDescriptor>,
    },
    Quote {
        build_digest: String,
        public_key: [u8; 32],
    },
}

/// Length-prefixes `body` and zero-pads it to a multiple of `bucket`.
pub fn pad(body: &[u8], bucket: usize) -> Vec<u8> {
    let bucket = bucket.max(1);
    let raw = 4 + body.len();
    let padded = raw.div_ceil(bucket) * bucket;
    let mut out = Vec::with_capacity(padded);
    out.extend_from_slice(&(body.len() as u32).to_be_bytes());
    out.extend_from_slice(body);
    out.resize(padded, 0);
    out
}

pub fn unpad(padded: &[u8]) -> Result<&[u8]> {
    if padded.len() < 4 {
        return Err(Error::Decode("padded body too short".into()));
    }
    let len = u32::from_be_bytes(padded[..4].try_into().unwrap()) as usize;
    padded
        .get(4..4 + len)
        .ok_or_else(|| Error::Decode("padding length out of range".into()))
}

fn encode_body(body: &Body, bucket: usize) -> Vec<u8> {
    let json = serde_json::to_vec(body).expect("message bodies always serialize");
    pad(&json, bucket)
}

fn decode_body(padded: &[u8]) -> Result<Body> {
    serde_json::from_slice(unpad(padded)?).map_err(|e| Error::Decode(e.to_string()))
}

/// Builds an envelope, sealing the body under `key` for sealed types.
pub fn seal(
    nonce: Nonce128,
    msg_type: MsgType,
    sender: &PeerId,
    body: &Body,
    key: Option<&SessionKey>,
    bucket: usize,
) -> Result<Envelope> {
    let plain = encode_body(body, bucket);
    let mut env = Envelope {
        nonce,
        msg_type,
        sender_id: sender.clone(),
        sealed_payload: Vec::new(),
    };
    env.sealed_payload = if msg_type.is_sealed() {
        let key = key.ok_or_else(|| Error::Unattested(sender.to_string()))?;
        let cipher = ChaCha20Poly1305::new(Key::from_slice(&key.0));
        let aad = env.aad();
        cipher
            .encrypt(
                Nonce::from_slice(&nonce[..12]),
                AeadPayload {
                    msg: &plain,
                    aad: &aad,
                },
            )
            .map_err(|_| Error::Decrypt(sender.to_string()))?
    } else {
        plain
    };
    Ok(env)
}

/// Authenticates and decodes the body of `env`.
pub fn open(env: &Envelope, key: Option<&SessionKey>) -> Result<Body> {
    if !env.msg_type.is_sealed() {
        return decode_body(&env.sealed_payload);
    }
    let key = key.ok_or_else(|| Error::Unattested(env.sender_id.to_string()))?;
    let cipher = ChaCha20Poly1305::new(Key::from_slice(&key.0));
    let aad = env.aad();
    let plain = cipher
        .decrypt(
            Nonce::from_slice(&env.nonce[..12]),
            AeadPayload {
                msg: &env.sealed_payload,
                aad: &aad,
            },
        )
        .map_err(|_| Error::Decrypt(env.sender_id.to_string()))?;
    decode_body(&plain)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn key(b: u8) -> SessionKey {
        SessionKey([b; 32])
    }

    #[test]
    fn frame_layout() {
        let env = Envelope {
            nonce: [7; 16],
            msg_type: MsgType::Shuffle,
            sender_id: PeerId::from("ab"),
            sealed_payload: vec![9, 9, 9],
        };
        let bytes = env.encode();
        assert_eq!(&bytes[..4], &(16u32 + 1 + 2 + 2 + 3).to_be_bytes());
        assert_eq!(&bytes[4..20], &[7; 16]);
        assert_eq!(bytes[20], 3);
        assert_eq!(&bytes[21..23], &[0, 2]);
        assert_eq!(&bytes[23..25], b"ab");
        assert_eq!(&bytes[25..], &[9, 9, 9]);
        assert_eq!(Envelope::decode(&bytes).unwrap(), env);
    }

    #[test]
    fn decode_rejects_garbage() {
        assert!(Envelope::decode(&[0, 0]).is_err());
        assert!(Envelope::decode(&[0, 0, 0, 1, 5]).is_err());
        let mut bytes = Envelope {
            nonce: [0; 16],
            msg_type: MsgType::Attest,
            sender_id: PeerId::from("x"),
            sealed_payload: vec![],
        }
        .encode();
        bytes[20] = 42;
        assert!(Envelope::decode(&bytes).is_err());
        bytes.push(0);
        assert!(Envelope::decode(&bytes).is_err());
    }

    #[test]
    fn seal_open_round_trip() {
        let body = Body::Query {
            ticket: 5,
            query: "heart attack symptoms".into(),
        };
        let env = seal([1; 16], MsgType::QueryForward, &"n1".into(), &body, Some(&key(3)), 256).unwrap();
        assert_eq!(env.sealed_payload.len(), 256 + TAG_LEN);
        assert_eq!(open(&env, Some(&key(3))).unwrap(), body);
        assert!(matches!(open(&env, Some(&key(4))), Err(Error::Decrypt(_))));
        assert!(matches!(open(&env, None), Err(Error::Unattested(_))));

        let mut tampered = env.clone();
        tampered.sender_id = "n2".into();
        assert!(open(&tampered, Some(&key(3))).is_err());
        let mut tampered = env.clone();
        tampered.sealed_payload[10] ^= 1;
        assert!(open(&tampered, Some(&key(3))).is_err());
    }

    #[test]
    fn plaintext_not_visible_in_ciphertext() {
        let body = Body::Query {
            ticket: 1,
            query: "very private words".into(),
        };
        let env = seal([2; 16], MsgType::QueryForward, &"n".into(), &body, Some(&key(1)), 256).unwrap();
        let bytes = env.encode();
        assert!(!bytes.windows(7).any(|w| w == b"private"));
    }

    #[test]
    fn attest_messages_travel_clear() {
        let body = Body::Quote {
            build_digest: "abc".into(),
            public_key: [4; 32],
        };
        let env = seal([0; 16], MsgType::Attest, &"n".into(), &body, None, 256).unwrap();
        assert_eq!(open(&env, None).unwrap(), body);
    }

    #[test]
    fn pad_lengths() {
        assert_eq!(pad(b"", 256).len(), 256);
        assert_eq!(pad(&[1; 252], 256).len(), 256);
        assert_eq!(pad(&[1; 253], 256).len(), 512);
        assert_eq!(unpad(&pad(b"hello", 16)).unwrap(), b"hello");
        assert!(unpad(&[0, 0, 1, 0, 1]).is_err());
    }

    proptest! {
        #[test]
        fn envelope_round_trip(
            nonce in any::<[u8; 16]>(),
            ty in 1u8..=6,
            sender in "[a-z0-9.:]{0,40}",
            payload in prop::collection::vec(any::<u8>(), 0..600),
        ) {
            let env = Envelope {
                nonce,
                msg_type: MsgType::from_byte(ty).unwrap(),
                sender_id: PeerId(sender),
                sealed_payload: payload,
            };
            prop_assert_eq!(Envelope::decode(&env.encode()).unwrap(), env);
        }

        #[test]
        fn same_bucket_same_length(a in "[a-z ]{1,150}", b in "[a-z ]{1,150}") {
            let k = key(9);
            let mk = |q: &str| seal([0; 16], MsgType::QueryForward, &"n".into(),
                &Body::Query { ticket: u64::MAX, query: q.into() }, Some(&k), 256).unwrap();
            prop_assert_eq!(mk(&a).sealed_payload.len(), mk(&b).sealed_payload.len());
        }
    }
}
