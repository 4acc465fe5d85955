//! Store-and-forward mail between nodes, riding MAIL messages on the queue
//! layer. Bodies may be sealed with ChaCha20-Poly1305 under the enterprise
//! key; inter-branch mail is relayed through central like any other frame.

use std::collections::BTreeSet;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use chacha20poly1305::aead::{Aead, KeyInit};
use chacha20poly1305::{ChaCha20Poly1305, Key, Nonce};
use rand::RngCore;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::queue::{MessageId, MAX_BODY_BYTES};
use crate::topology::NodeId;

pub const MAX_SUBJECT_BYTES: usize = 256;
pub const CIPHER_ALG: &str = "CHACHA20-POLY1305";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Attachment {
    pub name: String,
    pub data: Vec<u8>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MailEnvelope {
    pub from: NodeId,
    pub to: NodeId,
    pub subject: String,
    pub body: String,
    pub attachments: Vec<Attachment>,
    pub encrypted: bool,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MailError {
    #[error("mail of {0} bytes exceeds the 4 MiB limit")]
    TooLarge(usize),
    #[error("unknown recipient {0}")]
    UnknownRecipient(String),
    #[error("invalid envelope: {0}")]
    Invalid(String),
    #[error("decryption failed")]
    DecryptFailure,
    #[error("no mail key configured")]
    NoKey,
    #[error("no mail {0} in inbox")]
    NoSuchMail(MessageId),
}

#[derive(Serialize, Deserialize)]
struct WireAttachment {
    name: String,
    b64: String,
}

#[derive(Serialize, Deserialize)]
struct WireEnvelope {
    from: NodeId,
    to: NodeId,
    subject: String,
    body: String,
    attachments: Vec<WireAttachment>,
}

#[derive(Serialize, Deserialize)]
struct Sealed {
    alg: String,
    nonce_b64: String,
    ct_b64: String,
}

impl MailEnvelope {
    pub fn text(from: NodeId, to: NodeId, subject: &str, body: &str) -> Self {
        MailEnvelope {
            from,
            to,
            subject: subject.into(),
            body: body.into(),
            attachments: Vec::new(),
            encrypted: false,
        }
    }

    pub fn validate(&self) -> Result<(), MailError> {
        if self.subject.len() > MAX_SUBJECT_BYTES {
            return Err(MailError::Invalid("subject longer than 256 bytes".into()));
        }
        let mut names = BTreeSet::new();
        for a in &self.attachments {
            if !names.insert(&a.name) {
                return Err(MailError::Invalid(format!("duplicate attachment name {:?}", a.name)));
            }
        }
        Ok(())
    }

    /// Plain JSON form, without the encryption wrapper.
    pub fn to_json(&self) -> Vec<u8> {
        let wire = WireEnvelope {
            from: self.from.clone(),
            to: self.to.clone(),
            subject: self.subject.clone(),
            body: self.body.clone(),
            attachments: self
                .attachments
                .iter()
                .map(|a| WireAttachment { name: a.name.clone(), b64: B64.encode(&a.data) })
                .collect(),
        };
        serde_json::to_vec(&wire).expect("envelope serializes")
    }

    fn from_json(bytes: &[u8], encrypted: bool) -> Result<Self, MailError> {
        let wire: WireEnvelope =
            serde_json::from_slice(bytes).map_err(|e| MailError::Invalid(e.to_string()))?;
        let attachments = wire
            .attachments
            .into_iter()
            .map(|a| {
                Ok(Attachment {
                    name: a.name,
                    data: B64.decode(a.b64).map_err(|e| MailError::Invalid(e.to_string()))?,
                })
            })
            .collect::<Result<_, MailError>>()?;
        Ok(MailEnvelope {
            from: wire.from,
            to: wire.to,
            subject: wire.subject,
            body: wire.body,
            attachments,
            encrypted,
        })
    }

    /// Message body bytes: plain JSON, or the sealed wrapper when
    /// `encrypted` is set.
    pub fn encode(&self, key: Option<&[u8; 32]>, rng: &mut impl RngCore) -> Result<Vec<u8>, MailError> {
        self.validate()?;
        let out = if self.encrypted {
            encrypt_body(key.ok_or(MailError::NoKey)?, self, rng)
        } else {
            self.to_json()
        };
        if out.len() > MAX_BODY_BYTES {
            return Err(MailError::TooLarge(out.len()));
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8], key: Option<&[u8; 32]>) -> Result<Self, MailError> {
        if let Ok(sealed) = serde_json::from_slice::<Sealed>(bytes) {
            let key = key.ok_or(MailError::NoKey)?;
            return open_sealed(key, &sealed);
        }
        MailEnvelope::from_json(bytes, false)
    }
}

/// Seals the envelope JSON under `key` with a fresh random nonce.
pub fn encrypt_body(key: &[u8; 32], env: &MailEnvelope, rng: &mut impl RngCore) -> Vec<u8> {
    let cipher = ChaCha20Poly1305::new(Key::from_slice(key));
    let mut nonce = [0u8; 12];
    rng.fill_bytes(&mut nonce);
    let ct = cipher
        .encrypt(Nonce::from_slice(&nonce), env.to_json().as_slice())
        .expect("in-memory encryption cannot fail");
    let sealed = Sealed {
        alg: CIPHER_ALG.into(),
        nonce_b64: B64.encode(nonce),
        ct_b64: B64.encode(ct),
    };
    serde_json::to_vec(&sealed).expect("wrapper serializes")
}

pub fn decrypt_body(key: &[u8; 32], bytes: &[u8]) -> Result<MailEnvelope, MailError> {
    let sealed: Sealed = serde_json::from_slice(bytes).map_err(|_| MailError::DecryptFailure)?;
    open_sealed(key, &sealed)
}

fn open_sealed(key: &[u8; 32], sealed: &Sealed) -> Result<MailEnvelope, MailError> {
    if sealed.alg != CIPHER_ALG {
        return Err(MailError::DecryptFailure);
    }
    let nonce = B64.decode(&sealed.nonce_b64).map_err(|_| MailError::DecryptFailure)?;
    let ct = B64.decode(&sealed.ct_b64).map_err(|_| MailError::DecryptFailure)?;
    if nonce.len() != 12 {
        return Err(MailError::DecryptFailure);
    }
    let cipher = ChaCha20Poly1305::new(Key::from_slice(key));
    let plain = cipher
        .decrypt(Nonce::from_slice(&nonce), ct.as_slice())
        .map_err(|_| MailError::DecryptFailure)?;
    MailEnvelope::from_json(&plain, true).map_err(|_| MailError::DecryptFailure)
}

/// A delivered mail as stored in the inbox, still in wire form.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoredMail {
    pub mail_id: MessageId,
    pub hops: Vec<NodeId>,
    pub body: Vec<u8>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ReceivedMail {
    pub mail_id: MessageId,
    pub hops: Vec<NodeId>,
    pub envelope: MailEnvelope,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum MailEffect {
    Deliver(StoredMail),
    Ack(MessageId),
}

#[derive(Debug, Default)]
pub struct Mailbox {
    inbox: Vec<StoredMail>,
    seen: BTreeSet<MessageId>,
    pending: Vec<(crate::dtx::TxnId, MailEffect)>,
}

impl Mailbox {
    pub fn deliver(&mut self, txn: crate::dtx::TxnId, mail: StoredMail) {
        self.pending.push((txn, MailEffect::Deliver(mail)));
    }

    pub fn ack(&mut self, txn: crate::dtx::TxnId, id: &MessageId) -> Result<(), MailError> {
        if !self.inbox.iter().any(|m| &m.mail_id == id) {
            return Err(MailError::NoSuchMail(id.clone()));
        }
        self.pending.push((txn, MailEffect::Ack(id.clone())));
        Ok(())
    }

    pub fn prepare(&self, txn: crate::dtx::TxnId) -> Vec<MailEffect> {
        self.pending
            .iter()
            .filter(|(t, _)| *t == txn)
            .map(|(_, e)| e.clone())
            .collect()
    }

    pub fn release(&mut self, txn: crate::dtx::TxnId) {
        self.pending.retain(|(t, _)| *t != txn);
    }

    pub fn apply(&mut self, effects: &[MailEffect]) {
        for e in effects {
            match e {
                MailEffect::Deliver(m) => {
                    if self.seen.insert(m.mail_id.clone()) {
                        self.inbox.push(m.clone());
                    }
                }
                MailEffect::Ack(id) => self.inbox.retain(|m| &m.mail_id != id),
            }
        }
    }

    pub fn stored(&self) -> &[StoredMail] {
        &self.inbox
    }

    /// Decodes every inbox entry in arrival order.
    pub fn fetch(&self, key: Option<&[u8; 32]>) -> Result<Vec<ReceivedMail>, MailError> {
        self.inbox
            .iter()
            .map(|m| {
                Ok(ReceivedMail {
                    mail_id: m.mail_id.clone(),
                    hops: m.hops.clone(),
                    envelope: MailEnvelope::decode(&m.body, key)?,
                })
            })
            .collect()
    }
}
