//! Ad placement server: builds the profiling-ads index and stores it at CS.

use rand_chacha::ChaCha20Rng;

use super::cs::RES_INDEX;
use super::index::ProfilingAdsIndex;
use super::sim::FlowError;
use super::storage::Extent;
use super::upload::{Step, Upload};
use super::{Body, Message, NodeId};
use crate::cryptokit::{Hash32, KeyPair};
use crate::ledger::{make_transaction, TransactionType, TxDraft, TxStore};

pub(crate) struct Aps {
    keys: KeyPair,
    rng: ChaCha20Rng,
    store: TxStore,
    head: Hash32,
    upload: Option<Upload>,
    pub(crate) result: Option<Result<Extent, FlowError>>,
    pub(crate) pointers: Vec<u64>,
}

impl Aps {
    pub(crate) fn new(keys: KeyPair, rng: ChaCha20Rng) -> Self {
        let mut me = Self {
            keys,
            rng,
            store: TxStore::new(),
            head: Hash32::ZERO,
            upload: None,
            result: None,
            pointers: Vec::new(),
        };
        let draft = TxDraft::genesis(NodeId::Aps.digest(), Hash32::ZERO);
        let g = me.tx(draft).expect("genesis has no parent to check");
        me.head = g;
        me
    }

    fn tx(&mut self, draft: TxDraft) -> Result<Hash32, FlowError> {
        let tx = make_transaction(
            &mut self.rng,
            draft,
            None,
            &self.keys,
            self.keys.public(),
            &self.store,
        )?;
        let id = tx.t_id;
        self.store.insert(tx)?;
        Ok(id)
    }

    /// Starts storing `index`; the outcome lands in `result`.
    pub(crate) fn store_index(&mut self, index: &ProfilingAdsIndex) -> Result<Message, FlowError> {
        let records = index.to_records();
        if records.is_empty() {
            return Err(FlowError::EmptyUpload);
        }
        let draft = TxDraft {
            user_digest: NodeId::Aps.digest(),
            ..TxDraft::new(TransactionType::Upload, self.head)
        };
        let id = self.tx(draft)?;
        self.head = id;
        let tx = self.store.get(&id).expect("just inserted").clone();
        let (up, body) = Upload::start(tx, RES_INDEX, records);
        self.upload = Some(up);
        self.result = None;
        Ok(Message::new(NodeId::Aps, NodeId::Cs, body))
    }

    pub(crate) fn handle(&mut self, msg: Message) -> Vec<Message> {
        let Some(up) = self.upload.as_mut() else {
            return Vec::new();
        };
        let step = match msg.body {
            Body::StoreGrant {
                upload_id,
                block_capacity,
                next_pointer,
            } => up.on_grant(upload_id, block_capacity, &next_pointer, &self.keys),
            Body::ChunkAck {
                seq,
                next_pointer,
                extent,
                ..
            } => up.on_ack(seq, &next_pointer, extent, &self.keys),
            Body::ChunkRejected { seq, .. } => up.on_reject(seq),
            Body::Stored { extent } => Step::Done(extent),
            Body::StoreRefused { hop, reason } => {
                self.finish(Err(FlowError::StoreRefused { hop, reason }));
                return Vec::new();
            }
            _ => return Vec::new(),
        };
        match step {
            Step::Send(bodies) => bodies
                .into_iter()
                .map(|b| Message::new(NodeId::Aps, NodeId::Cs, b))
                .collect(),
            Step::Done(e) => {
                self.finish(Ok(e));
                Vec::new()
            }
            Step::Failed(reason) => {
                self.finish(Err(FlowError::Transfer(reason)));
                Vec::new()
            }
        }
    }

    fn finish(&mut self, result: Result<Extent, FlowError>) {
        if let Some(up) = self.upload.take() {
            self.pointers = up.pointers;
        }
        self.result = Some(result);
    }
}
