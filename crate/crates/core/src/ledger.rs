//! Typed transactions chained by previous-transaction id, Ad-Blocks, and
//! Merkle batching with membership proofs.

use std::collections::{HashMap, HashSet, VecDeque};
use std::fmt;
use std::str::FromStr;

use rand::{CryptoRng, RngCore};
use thiserror::Error;

use crate::cryptokit::{
    hybrid_encrypt, sha256, CryptoError, Hash32, HybridEnvelope, KeyPair, PublicKey,
};
use crate::wire::{read_frames, write_frame, FieldReader, FieldWriter, WireError};

pub const DEFAULT_BLOCK_SIZE_LIMIT: usize = 64;

#[derive(Debug, Error)]
pub enum LedgerError {
    #[error("missing mandatory field `{0}`")]
    MissingField(&'static str),
    #[error("genesis transaction must have a zero previous id")]
    GenesisWithParent,
    #[error("non-genesis transaction has a zero previous id")]
    MissingParent,
    #[error("previous transaction {0} is unknown")]
    BrokenChain(Hash32),
    #[error("transaction id does not match its contents")]
    IdMismatch,
    #[error("signature check failed")]
    BadSignature,
    #[error("transaction {0} is already recorded")]
    Duplicate(Hash32),
    #[error("chain walk revisits {0}")]
    Cycle(Hash32),
    #[error("no leaves to build a tree from")]
    EmptyTree,
    #[error("leaf index {index} out of range for {len} leaves")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("no pending transactions to assemble")]
    EmptyBlock,
    #[error("block size limit must be positive")]
    ZeroLimit,
    #[error("unknown transaction type `{0}`")]
    UnknownType(String),
    #[error(transparent)]
    Crypto(#[from] CryptoError),
    #[error("malformed record: {0}")]
    Wire(#[from] WireError),
}

pub type Result<T, E = LedgerError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum TransactionType {
    Genesis,
    Request,
    Response,
    Billing,
    Access,
    Upload,
    Update,
    Remove,
    Monitor,
}

impl TransactionType {
    pub const ALL: [TransactionType; 9] = [
        Self::Genesis,
        Self::Request,
        Self::Response,
        Self::Billing,
        Self::Access,
        Self::Upload,
        Self::Update,
        Self::Remove,
        Self::Monitor,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::Genesis => "Genesis",
            Self::Request => "Request",
            Self::Response => "Response",
            Self::Billing => "Billing",
            Self::Access => "Access",
            Self::Upload => "Upload",
            Self::Update => "Update",
            Self::Remove => "Remove",
            Self::Monitor => "Monitor",
        }
    }

    fn code(self) -> u8 {
        self as u8
    }

    fn from_code(c: u8) -> Option<Self> {
        Self::ALL.get(usize::from(c)).copied()
    }
}

impl fmt::Display for TransactionType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TransactionType {
    type Err = LedgerError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|t| t.name().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| LedgerError::UnknownType(s.to_string()))
    }
}

/// Everything a transaction carries apart from its id, payload and signature.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TxDraft {
    pub prev_t_id: Hash32,
    pub tx_type: TransactionType,
    pub user_digest: Hash32,
    pub app_digest: Hash32,
    pub ad_ids: Vec<u32>,
    pub advertiser_id: Option<String>,
    pub session_id: u64,
    /// Ads already served to this session.
    pub input: Vec<u32>,
    /// Ads consumed by the issuing Miner.
    pub output: Vec<u32>,
}

impl TxDraft {
    pub fn new(tx_type: TransactionType, prev_t_id: Hash32) -> Self {
        Self {
            prev_t_id,
            tx_type,
            user_digest: Hash32::ZERO,
            app_digest: Hash32::ZERO,
            ad_ids: Vec::new(),
            advertiser_id: None,
            session_id: 0,
            input: Vec::new(),
            output: Vec::new(),
        }
    }

    pub fn genesis(user_digest: Hash32, app_digest: Hash32) -> Self {
        Self {
            user_digest,
            app_digest,
            ..Self::new(TransactionType::Genesis, Hash32::ZERO)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Transaction {
    pub t_id: Hash32,
    pub prev_t_id: Hash32,
    pub tx_type: TransactionType,
    pub user_digest: Hash32,
    pub app_digest: Hash32,
    pub ad_ids: Vec<u32>,
    pub advertiser_id: Option<String>,
    pub session_id: u64,
    pub input: Vec<u32>,
    pub output: Vec<u32>,
    pub payload: Option<HybridEnvelope>,
    pub sender_public_key: Vec<u8>,
    pub signature: Vec<u8>,
}

impl Transaction {
    /// Bytes covered by both the id and the signature.
    pub fn body_bytes(&self) -> Vec<u8> {
        let payload = self.payload.as_ref().map(HybridEnvelope::encode);
        let mut w = FieldWriter::new();
        w.field(self.prev_t_id.as_bytes())
            .u8(self.tx_type.code())
            .field(self.user_digest.as_bytes())
            .field(self.app_digest.as_bytes())
            .u32_list(&self.ad_ids)
            .opt(self.advertiser_id.as_deref().map(str::as_bytes))
            .u64(self.session_id)
            .u32_list(&self.input)
            .u32_list(&self.output)
            .opt(payload.as_deref())
            .field(&self.sender_public_key);
        w.finish()
    }

    pub fn compute_t_id(&self) -> Hash32 {
        sha256(&self.body_bytes())
    }

    pub fn draft(&self) -> TxDraft {
        TxDraft {
            prev_t_id: self.prev_t_id,
            tx_type: self.tx_type,
            user_digest: self.user_digest,
            app_digest: self.app_digest,
            ad_ids: self.ad_ids.clone(),
            advertiser_id: self.advertiser_id.clone(),
            session_id: self.session_id,
            input: self.input.clone(),
            output: self.output.clone(),
        }
    }

    /// Checks the id against the contents and the signature against the
    /// embedded sender key.
    pub fn verify(&self) -> Result<()> {
        if self.compute_t_id() != self.t_id {
            return Err(LedgerError::IdMismatch);
        }
        let sender = PublicKey::from_der(&self.sender_public_key)?;
        sender
            .verify(&self.body_bytes(), &self.signature)
            .map_err(|_| LedgerError::BadSignature)
    }

    pub fn sender_key_id(&self) -> Hash32 {
        sha256(&self.sender_public_key)
    }
}

/// Full record encoding: `t_id`, body fields in declaration order, then the
/// signature.
pub fn canonical_encode(tx: &Transaction) -> Result<Vec<u8>> {
    if tx.sender_public_key.is_empty() {
        return Err(LedgerError::MissingField("sender_public_key"));
    }
    if tx.signature.is_empty() {
        return Err(LedgerError::MissingField("signature"));
    }
    let mut w = FieldWriter::new();
    w.field(tx.t_id.as_bytes())
        .field(&tx.body_bytes())
        .field(&tx.signature);
    Ok(w.finish())
}

fn hash_field(r: &mut FieldReader<'_>) -> Result<Hash32> {
    Hash32::from_slice(r.field()?).ok_or(LedgerError::Wire(WireError::Invalid(
        "expected 32-byte digest",
    )))
}

pub fn canonical_decode(bytes: &[u8]) -> Result<Transaction> {
    let mut outer = FieldReader::new(bytes);
    let t_id = hash_field(&mut outer)?;
    let body = outer.field()?;
    let signature = outer.field()?.to_vec();
    outer.finish()?;

    let mut r = FieldReader::new(body);
    let prev_t_id = hash_field(&mut r)?;
    let tx_type = TransactionType::from_code(r.u8()?)
        .ok_or(LedgerError::Wire(WireError::Invalid("transaction type")))?;
    let user_digest = hash_field(&mut r)?;
    let app_digest = hash_field(&mut r)?;
    let ad_ids = r.u32_list()?;
    let advertiser_id = r
        .opt()?
        .map(|b| String::from_utf8(b.to_vec()))
        .transpose()
        .map_err(|_| WireError::Invalid("advertiser id is not utf-8"))?;
    let session_id = r.u64()?;
    let input = r.u32_list()?;
    let output = r.u32_list()?;
    let payload = r.opt()?.map(HybridEnvelope::decode).transpose()?;
    let sender_public_key = r.field()?.to_vec();
    r.finish()?;
    Ok(Transaction {
        t_id,
        prev_t_id,
        tx_type,
        user_digest,
        app_digest,
        ad_ids,
        advertiser_id,
        session_id,
        input,
        output,
        payload,
        sender_public_key,
        signature,
    })
}

/// Validates the chain link, seals `payload` for `recipient`, and signs.
pub fn make_transaction<R: RngCore + CryptoRng>(
    rng: &mut R,
    draft: TxDraft,
    payload: Option<&[u8]>,
    sender: &KeyPair,
    recipient: &PublicKey,
    chain: &TxStore,
) -> Result<Transaction> {
    check_link(draft.tx_type, &draft.prev_t_id, chain)?;
    let payload = payload
        .map(|p| hybrid_encrypt(rng, p, recipient))
        .transpose()?;
    Ok(seal(draft, payload, sender))
}

fn check_link(tx_type: TransactionType, prev: &Hash32, chain: &TxStore) -> Result<()> {
    match (tx_type, prev.is_zero()) {
        (TransactionType::Genesis, true) => Ok(()),
        (TransactionType::Genesis, false) => Err(LedgerError::GenesisWithParent),
        (_, true) => Err(LedgerError::MissingParent),
        (_, false) if chain.contains(prev) => Ok(()),
        (_, false) => Err(LedgerError::BrokenChain(*prev)),
    }
}

/// Computes the id and signature without any chain check.
pub fn seal(draft: TxDraft, payload: Option<HybridEnvelope>, sender: &KeyPair) -> Transaction {
    let mut tx = Transaction {
        t_id: Hash32::ZERO,
        prev_t_id: draft.prev_t_id,
        tx_type: draft.tx_type,
        user_digest: draft.user_digest,
        app_digest: draft.app_digest,
        ad_ids: draft.ad_ids,
        advertiser_id: draft.advertiser_id,
        session_id: draft.session_id,
        input: draft.input,
        output: draft.output,
        payload,
        sender_public_key: sender.public_key_der().to_vec(),
        signature: Vec::new(),
    };
    let body = tx.body_bytes();
    tx.t_id = sha256(&body);
    tx.signature = sender.sign(&body);
    tx
}

/// Transactions seen by one party, indexed by id.
#[derive(Debug, Clone, Default)]
pub struct TxStore {
    by_id: HashMap<Hash32, Transaction>,
    order: Vec<Hash32>,
}

impl TxStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn contains(&self, t_id: &Hash32) -> bool {
        self.by_id.contains_key(t_id)
    }

    pub fn get(&self, t_id: &Hash32) -> Option<&Transaction> {
        self.by_id.get(t_id)
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    /// Insertion order.
    pub fn iter(&self) -> impl Iterator<Item = &Transaction> {
        self.order.iter().map(|id| &self.by_id[id])
    }

    /// Verifies id, signature and chain link before recording.
    pub fn insert(&mut self, tx: Transaction) -> Result<()> {
        tx.verify()?;
        if self.contains(&tx.t_id) {
            return Err(LedgerError::Duplicate(tx.t_id));
        }
        check_link(tx.tx_type, &tx.prev_t_id, self)?;
        self.order.push(tx.t_id);
        self.by_id.insert(tx.t_id, tx);
        Ok(())
    }

    /// Ids from `t_id` back to its Genesis, inclusive at both ends.
    pub fn walk_to_genesis(&self, t_id: &Hash32) -> Result<Vec<Hash32>> {
        let mut path = Vec::new();
        let mut seen = HashSet::new();
        let mut cur = *t_id;
        loop {
            if !seen.insert(cur) {
                return Err(LedgerError::Cycle(cur));
            }
            let tx = self.get(&cur).ok_or(LedgerError::BrokenChain(cur))?;
            path.push(cur);
            if tx.tx_type == TransactionType::Genesis {
                return Ok(path);
            }
            cur = tx.prev_t_id;
        }
    }
}

pub fn merkle_parent(left: &Hash32, right: &Hash32) -> Hash32 {
    let mut buf = [0u8; 64];
    buf[..32].copy_from_slice(left.as_bytes());
    buf[32..].copy_from_slice(right.as_bytes());
    sha256(&buf)
}

/// Binary hash tree. An odd node at any level is paired with itself; a single
/// leaf is its own root.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MerkleTree {
    levels: Vec<Vec<Hash32>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Left,
    Right,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MembershipProof {
    pub leaf_index: u64,
    /// Sibling digests from the leaf level upwards, with the side each sits on.
    pub siblings: Vec<(Hash32, Side)>,
}

impl MerkleTree {
    pub fn build(leaves: &[Hash32]) -> Result<Self> {
        if leaves.is_empty() {
            return Err(LedgerError::EmptyTree);
        }
        let mut levels = vec![leaves.to_vec()];
        while levels.last().unwrap().len() > 1 {
            let next = levels
                .last()
                .unwrap()
                .chunks(2)
                .map(|pair| merkle_parent(&pair[0], pair.get(1).unwrap_or(&pair[0])))
                .collect();
            levels.push(next);
        }
        Ok(Self { levels })
    }

    pub fn root(&self) -> Hash32 {
        self.levels.last().unwrap()[0]
    }

    pub fn leaves(&self) -> &[Hash32] {
        &self.levels[0]
    }

    pub fn levels(&self) -> &[Vec<Hash32>] {
        &self.levels
    }

    /// Number of levels; a tree of height `n` holds up to `2^(n-1)` leaves.
    pub fn height(&self) -> usize {
        self.levels.len()
    }

    pub fn prove(&self, index: usize) -> Result<MembershipProof> {
        let len = self.leaves().len();
        if index >= len {
            return Err(LedgerError::IndexOutOfRange { index, len });
        }
        let mut siblings = Vec::with_capacity(self.height() - 1);
        let mut i = index;
        for level in &self.levels[..self.levels.len() - 1] {
            let (sib, side) = if i.is_multiple_of(2) {
                (*level.get(i + 1).unwrap_or(&level[i]), Side::Right)
            } else {
                (level[i - 1], Side::Left)
            };
            siblings.push((sib, side));
            i /= 2;
        }
        Ok(MembershipProof {
            leaf_index: index as u64,
            siblings,
        })
    }
}

impl MembershipProof {
    pub fn encode(&self) -> Vec<u8> {
        let mut w = FieldWriter::new();
        w.u64(self.leaf_index);
        for (h, side) in &self.siblings {
            w.field(h.as_bytes()).u8(match side {
                Side::Left => 0,
                Side::Right => 1,
            });
        }
        w.finish()
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = FieldReader::new(bytes);
        let leaf_index = r.u64()?;
        let mut siblings = Vec::new();
        while !r.is_empty() {
            let h = hash_field(&mut r)?;
            let side = match r.u8()? {
                0 => Side::Left,
                1 => Side::Right,
                _ => return Err(WireError::Invalid("proof side").into()),
            };
            siblings.push((h, side));
        }
        Ok(Self {
            leaf_index,
            siblings,
        })
    }
}

/// Sides must agree with the bits of `leaf_index`, and the index must fit in
/// the proof's depth, so a proof cannot be replayed at another position.
pub fn verify(root: &Hash32, leaf: &Hash32, proof: &MembershipProof) -> bool {
    let depth = proof.siblings.len();
    if depth < 64 && proof.leaf_index >> depth != 0 {
        return false;
    }
    let mut acc = *leaf;
    for (level, (sib, side)) in proof.siblings.iter().enumerate() {
        let bit = (proof.leaf_index >> level) & 1;
        acc = match (side, bit) {
            (Side::Right, 0) => merkle_parent(&acc, sib),
            (Side::Left, 1) => merkle_parent(sib, &acc),
            _ => return false,
        };
    }
    acc == *root
}

/// [`verify`] for a tree of known size. Odd-node duplication lets a proof for
/// the last leaf be re-sided to claim the position just past the end; knowing
/// `leaf_count` rules that out.
pub fn verify_with_len(
    root: &Hash32,
    leaf: &Hash32,
    proof: &MembershipProof,
    leaf_count: usize,
) -> bool {
    let depth = usize::BITS - leaf_count.saturating_sub(1).leading_zeros();
    proof.leaf_index < leaf_count as u64
        && proof.siblings.len() == depth as usize
        && verify(root, leaf, proof)
}

/// As [`verify`], over an encoded proof; undecodable proofs fail.
pub fn verify_encoded(root: &Hash32, leaf: &Hash32, proof: &[u8]) -> bool {
    MembershipProof::decode(proof).is_ok_and(|p| verify(root, leaf, &p))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AdBlock {
    pub header: Transaction,
    pub transactions: Vec<Transaction>,
    pub merkle_root: Hash32,
    pub prev_block_hash: Hash32,
    pub block_size_limit: usize,
}

impl AdBlock {
    pub fn hash(&self) -> Hash32 {
        let mut w = FieldWriter::new();
        w.field(self.header.t_id.as_bytes())
            .field(self.merkle_root.as_bytes())
            .field(self.prev_block_hash.as_bytes())
            .u64(self.transactions.len() as u64);
        sha256(&w.finish())
    }

    pub fn tree(&self) -> MerkleTree {
        let ids: Vec<Hash32> = self.transactions.iter().map(|t| t.t_id).collect();
        MerkleTree::build(&ids).expect("blocks are never empty")
    }

    /// Recomputes the root from the included transactions.
    pub fn merkle_consistent(&self) -> bool {
        self.transactions.len() <= self.block_size_limit && self.tree().root() == self.merkle_root
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut w = FieldWriter::new();
        w.field(&canonical_encode(&self.header)?)
            .field(self.merkle_root.as_bytes())
            .field(self.prev_block_hash.as_bytes())
            .u64(self.block_size_limit as u64);
        for tx in &self.transactions {
            w.field(&canonical_encode(tx)?);
        }
        Ok(w.finish())
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = FieldReader::new(bytes);
        let header = canonical_decode(r.field()?)?;
        let merkle_root = hash_field(&mut r)?;
        let prev_block_hash = hash_field(&mut r)?;
        let block_size_limit = r.u64()? as usize;
        let mut transactions = Vec::new();
        while !r.is_empty() {
            transactions.push(canonical_decode(r.field()?)?);
        }
        Ok(Self {
            header,
            transactions,
            merkle_root,
            prev_block_hash,
            block_size_limit,
        })
    }
}

/// Takes up to `limit` transactions from the front of `pending`.
pub fn assemble_block(
    header: Transaction,
    pending: &mut VecDeque<Transaction>,
    limit: usize,
    prev_block: Hash32,
) -> Result<AdBlock> {
    if limit == 0 {
        return Err(LedgerError::ZeroLimit);
    }
    if pending.is_empty() {
        return Err(LedgerError::EmptyBlock);
    }
    let take = pending.len().min(limit);
    let transactions: Vec<Transaction> = pending.drain(..take).collect();
    let ids: Vec<Hash32> = transactions.iter().map(|t| t.t_id).collect();
    let merkle_root = MerkleTree::build(&ids)?.root();
    Ok(AdBlock {
        header,
        transactions,
        merkle_root,
        prev_block_hash: prev_block,
        block_size_limit: limit,
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ChainRecord {
    Transaction(Transaction),
    Block(AdBlock),
}

const RECORD_TX: u8 = 1;
const RECORD_BLOCK: u8 = 2;

/// Record stream: one frame per record, each a kind tag plus the canonical
/// encoding.
pub fn write_dump(records: &[ChainRecord]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    for rec in records {
        let (kind, body) = match rec {
            ChainRecord::Transaction(tx) => (RECORD_TX, canonical_encode(tx)?),
            ChainRecord::Block(b) => (RECORD_BLOCK, b.encode()?),
        };
        let mut w = FieldWriter::new();
        w.u8(kind).field(&body);
        write_frame(&mut out, &w.finish());
    }
    Ok(out)
}

pub fn read_dump(bytes: &[u8]) -> Result<Vec<ChainRecord>> {
    read_frames(bytes)?
        .into_iter()
        .map(|frame| {
            let mut r = FieldReader::new(frame);
            let kind = r.u8()?;
            let body = r.field()?;
            r.finish()?;
            match kind {
                RECORD_TX => Ok(ChainRecord::Transaction(canonical_decode(body)?)),
                RECORD_BLOCK => Ok(ChainRecord::Block(AdBlock::decode(body)?)),
                _ => Err(WireError::Invalid("record kind").into()),
            }
        })
        .collect()
}
