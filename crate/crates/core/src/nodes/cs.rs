//! Cloud store: holds the profiling-ads index and hashed profiles, and
//! answers forwarded ad requests by exact digest intersection.

use std::collections::{BTreeMap, BTreeSet};

use rand_chacha::ChaCha20Rng;

use super::index::IndexEntry;
use super::storage::{blocking_factor, chunk_digest, Extent, StorageArena};
use super::upload::encode_pointer;
use super::{requester_of, Body, Hop, Message, NodeId};
use crate::cryptokit::{hybrid_encrypt, DigestScheme, Hash32, HybridEnvelope, KeyPair, PublicKey};
use crate::ledger::{seal, Transaction, TransactionType, TxDraft};
use crate::policy::{Decision, PolicyDocument, RequestContext};
use crate::wire::{FieldReader, FieldWriter, WireError};

pub(crate) const RES_INDEX: &str = "profiling-ads";
pub(crate) const RES_PROFILE: &str = "profile-store";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Kind {
    Index,
    Profile(Hash32),
}

#[derive(Debug)]
struct Pending {
    owner: NodeId,
    kind: Kind,
    record_count: u64,
    content_digest: Hash32,
    sender: PublicKey,
    extent: Option<Extent>,
    next_seq: u64,
}

#[derive(Debug, Clone, Copy)]
struct StoredProfile {
    extent: Extent,
    content_digest: Hash32,
}

pub(crate) struct Cs {
    keys: KeyPair,
    scheme: DigestScheme,
    policy: PolicyDocument,
    arena: StorageArena,
    rng: ChaCha20Rng,
    next_upload: u64,
    uploads: BTreeMap<u64, Pending>,
    index: BTreeMap<Vec<u8>, Vec<IndexEntry>>,
    profiles: BTreeMap<Hash32, StoredProfile>,
    pub(crate) rejected_chunks: Vec<(u64, u64)>,
    pub(crate) monitors: Vec<Transaction>,
}

impl Cs {
    pub(crate) fn new(
        keys: KeyPair,
        scheme: DigestScheme,
        policy: PolicyDocument,
        arena: StorageArena,
        rng: ChaCha20Rng,
    ) -> Self {
        Self {
            keys,
            scheme,
            policy,
            arena,
            rng,
            next_upload: 1,
            uploads: BTreeMap::new(),
            index: BTreeMap::new(),
            profiles: BTreeMap::new(),
            rejected_chunks: Vec::new(),
            monitors: Vec::new(),
        }
    }

    pub(crate) fn public(&self) -> &PublicKey {
        self.keys.public()
    }

    pub(crate) fn arena(&self) -> &StorageArena {
        &self.arena
    }

    pub(crate) fn index_digests(&self) -> usize {
        self.index.len()
    }

    pub(crate) fn stored_profile(&self, user_digest: &Hash32) -> Option<Vec<Vec<u8>>> {
        let p = self.profiles.get(user_digest)?;
        Some(
            self.arena
                .read(&p.extent)
                .into_iter()
                .map(<[u8]>::to_vec)
                .collect(),
        )
    }

    fn allowed(&self, requester: Hash32, tx_type: TransactionType, resource: &str) -> bool {
        self.policy
            .traverse(&RequestContext::new(requester, tx_type, resource))
            .decision
            == Decision::Allow
    }

    fn seal_pointer(&mut self, pointer: u64, to: &PublicKey) -> Option<HybridEnvelope> {
        hybrid_encrypt(&mut self.rng, &encode_pointer(pointer), to).ok()
    }

    pub(crate) fn handle(&mut self, msg: Message) -> Vec<Message> {
        let from = msg.from.clone();
        let reply = |body| vec![Message::new(NodeId::Cs, from.clone(), body)];
        let refuse = |reason: &str| {
            reply(Body::StoreRefused {
                hop: Hop::Cs,
                reason: reason.to_string(),
            })
        };
        match msg.body {
            Body::StoreRequest {
                tx,
                resource,
                record_count,
                content_digest,
            } => {
                let Ok(sender) = PublicKey::from_der(&tx.sender_public_key) else {
                    return refuse("bad sender key");
                };
                if tx.verify().is_err() {
                    return refuse("bad transaction");
                }
                if !matches!(
                    tx.tx_type,
                    TransactionType::Upload | TransactionType::Update
                ) {
                    return refuse("not a store transaction");
                }
                let kind = match resource.as_str() {
                    RES_INDEX => Kind::Index,
                    RES_PROFILE => Kind::Profile(tx.user_digest),
                    _ => return refuse("unknown resource"),
                };
                if !self.allowed(requester_of(&msg.from, &tx), tx.tx_type, &resource) {
                    return refuse("policy");
                }
                if record_count == 0 {
                    return refuse("empty upload");
                }
                if let Kind::Profile(user) = kind {
                    if let Some(p) = self
                        .profiles
                        .get(&user)
                        .filter(|p| p.content_digest == content_digest)
                    {
                        return reply(Body::Stored { extent: p.extent });
                    }
                }
                if blocking_factor(record_count, self.arena.block_capacity())
                    > self.arena.free_blocks()
                {
                    return refuse("storage full");
                }
                let Some(next_pointer) = self.seal_pointer(self.arena.next_pointer(), &sender)
                else {
                    return refuse("cannot seal pointer");
                };
                let upload_id = self.next_upload;
                self.next_upload += 1;
                self.uploads.insert(
                    upload_id,
                    Pending {
                        owner: msg.from.clone(),
                        kind,
                        record_count,
                        content_digest,
                        sender,
                        extent: None,
                        next_seq: 0,
                    },
                );
                reply(Body::StoreGrant {
                    upload_id,
                    block_capacity: self.arena.block_capacity(),
                    next_pointer,
                })
            }
            Body::StoreReserve { upload_id, bfr } => {
                let Some(p) = self
                    .uploads
                    .get_mut(&upload_id)
                    .filter(|p| p.owner == msg.from)
                else {
                    return refuse("unknown upload");
                };
                if p.extent.is_some()
                    || bfr != blocking_factor(p.record_count, self.arena.block_capacity())
                {
                    self.uploads.remove(&upload_id);
                    return refuse("blocking factor mismatch");
                }
                match self.arena.reserve(p.record_count) {
                    Ok(e) => {
                        p.extent = Some(e);
                        Vec::new()
                    }
                    Err(e) => {
                        self.uploads.remove(&upload_id);
                        refuse(&e.to_string())
                    }
                }
            }
            Body::StoreChunk {
                upload_id,
                seq,
                records,
                digest,
            } => self.on_chunk(msg.from, upload_id, seq, records, digest),
            Body::ForwardRequest { tx } => self.on_request(msg.from, tx),
            Body::Monitor { tx } => {
                if tx.verify().is_ok() && tx.tx_type == TransactionType::Monitor {
                    self.monitors.push(tx);
                }
                Vec::new()
            }
            _ => Vec::new(),
        }
    }

    fn on_chunk(
        &mut self,
        from: NodeId,
        upload_id: u64,
        seq: u64,
        records: Vec<Vec<u8>>,
        digest: Hash32,
    ) -> Vec<Message> {
        let reply = |body| vec![Message::new(NodeId::Cs, from.clone(), body)];
        let Some(p) = self.uploads.get_mut(&upload_id).filter(|p| p.owner == from) else {
            return Vec::new();
        };
        let Some(extent) = p.extent else {
            return reply(Body::ChunkRejected { upload_id, seq });
        };
        if seq != p.next_seq || chunk_digest(&records) != digest {
            self.rejected_chunks.push((upload_id, seq));
            return reply(Body::ChunkRejected { upload_id, seq });
        }
        let Ok(next_slot) = self.arena.write_chunk(&extent, seq, records) else {
            self.rejected_chunks.push((upload_id, seq));
            return reply(Body::ChunkRejected { upload_id, seq });
        };
        p.next_seq += 1;
        let done = p.next_seq == extent.blocks;
        let sender = p.sender.clone();
        let Some(next_pointer) = self.seal_pointer(next_slot, &sender) else {
            return Vec::new();
        };
        if !done {
            return reply(Body::ChunkAck {
                upload_id,
                seq,
                next_pointer,
                extent: None,
            });
        }
        let p = self.uploads.remove(&upload_id).expect("present above");
        let stored: Vec<Vec<u8>> = self
            .arena
            .read(&extent)
            .into_iter()
            .map(<[u8]>::to_vec)
            .collect();
        if chunk_digest(&stored) != p.content_digest {
            return reply(Body::StoreRefused {
                hop: Hop::Cs,
                reason: "content digest mismatch".into(),
            });
        }
        match p.kind {
            Kind::Index => {
                let Ok(idx) = super::index::ProfilingAdsIndex::from_records(
                    self.scheme,
                    stored.iter().map(Vec::as_slice),
                ) else {
                    return reply(Body::StoreRefused {
                        hop: Hop::Cs,
                        reason: "malformed index".into(),
                    });
                };
                for (d, list) in idx.entries {
                    self.index.entry(d).or_default().extend(list);
                }
            }
            Kind::Profile(user) => {
                self.profiles.insert(
                    user,
                    StoredProfile {
                        extent,
                        content_digest: p.content_digest,
                    },
                );
            }
        }
        reply(Body::ChunkAck {
            upload_id,
            seq,
            next_pointer,
            extent: Some(extent),
        })
    }

    fn on_request(&mut self, from: NodeId, tx: Transaction) -> Vec<Message> {
        let refuse = vec![Message::new(
            NodeId::Cs,
            from.clone(),
            Body::Refused {
                hop: Hop::Cs,
                request: tx.t_id,
            },
        )];
        if tx.verify().is_err() || tx.tx_type != TransactionType::Request {
            return refuse;
        }
        if !self.allowed(from.digest(), TransactionType::Request, RES_INDEX) {
            return refuse;
        }
        let Ok(miner) = PublicKey::from_der(&tx.sender_public_key) else {
            return refuse;
        };
        let exclude: BTreeSet<u32> = tx.input.iter().copied().collect();
        let mut bundle: BTreeMap<u32, &IndexEntry> = BTreeMap::new();
        if let Some(p) = self.profiles.get(&tx.user_digest) {
            for digest in self.arena.read(&p.extent) {
                for e in self.index.get(digest).into_iter().flatten() {
                    if !exclude.contains(&e.ad_id) {
                        bundle.entry(e.ad_id).or_insert(e);
                    }
                }
            }
        }
        let plain = encode_bundle(bundle.values().copied());
        let Ok(env) = hybrid_encrypt(&mut self.rng, &plain, &miner) else {
            return refuse;
        };
        let draft = TxDraft {
            user_digest: tx.user_digest,
            app_digest: tx.app_digest,
            session_id: tx.session_id,
            input: tx.input.clone(),
            ad_ids: bundle.keys().copied().collect(),
            ..TxDraft::new(TransactionType::Response, tx.t_id)
        };
        let response = seal(draft, Some(env), &self.keys);
        vec![Message::new(
            NodeId::Cs,
            from,
            Body::Response { tx: response },
        )]
    }
}

/// Count, then `(ad_id, envelope digest, envelope)` triples, sealed inside a
/// Response. The count keeps an empty bundle non-empty on the wire.
pub(crate) fn encode_bundle<'a>(entries: impl ExactSizeIterator<Item = &'a IndexEntry>) -> Vec<u8> {
    let mut w = FieldWriter::new();
    w.u32(entries.len() as u32);
    for e in entries {
        w.u32(e.ad_id)
            .field(e.envelope.digest().as_bytes())
            .field(&e.envelope.encode());
    }
    w.finish()
}

pub(crate) fn decode_bundle(bytes: &[u8]) -> Result<Vec<(u32, Hash32, HybridEnvelope)>, WireError> {
    let mut r = FieldReader::new(bytes);
    let count = r.u32()?;
    let mut out = Vec::new();
    for _ in 0..count {
        let id = r.u32()?;
        let digest = Hash32::from_slice(r.field()?).ok_or(WireError::Invalid("digest length"))?;
        let env = HybridEnvelope::decode(r.field()?).map_err(|_| WireError::Invalid("envelope"))?;
        out.push((id, digest, env));
    }
    r.finish()?;
    Ok(out)
}
