//! Client side of the chunked store protocol, shared by APS and Miners.
//!
//! request -> grant(B, enc P_b) -> reserve(bfr) -> chunk 0 -> ack(enc P_b)
//! -> chunk 1 -> ... -> ack(extent). A rejected chunk is resent as is.

use super::storage::{blocking_factor, chunk_digest, Extent};
use super::Body;
use crate::cryptokit::{hybrid_decrypt, HybridEnvelope, KeyPair};
use crate::ledger::Transaction;

pub(crate) const MAX_RETRANSMITS: u32 = 3;

pub(crate) enum Step {
    Send(Vec<Body>),
    Done(Extent),
    Failed(String),
}

#[derive(Debug)]
pub(crate) struct Upload {
    records: Vec<Vec<u8>>,
    upload_id: u64,
    block_capacity: u64,
    retransmits: u32,
    /// Next-pointers decrypted from the CS replies, in order.
    pub(crate) pointers: Vec<u64>,
}

impl Upload {
    pub(crate) fn start(tx: Transaction, resource: &str, records: Vec<Vec<u8>>) -> (Self, Body) {
        let body = Body::StoreRequest {
            tx,
            resource: resource.to_string(),
            record_count: records.len() as u64,
            content_digest: chunk_digest(&records),
        };
        let up = Self {
            records,
            upload_id: 0,
            block_capacity: 0,
            retransmits: 0,
            pointers: Vec::new(),
        };
        (up, body)
    }

    fn chunk(&self, seq: u64) -> Body {
        let b = self.block_capacity as usize;
        let start = seq as usize * b;
        let records = self.records[start..(start + b).min(self.records.len())].to_vec();
        Body::StoreChunk {
            upload_id: self.upload_id,
            seq,
            digest: chunk_digest(&records),
            records,
        }
    }

    fn pointer(&mut self, env: &HybridEnvelope, keys: &KeyPair) -> Result<(), String> {
        let plain = hybrid_decrypt(env, keys).map_err(|e| e.to_string())?;
        let bytes: [u8; 8] = plain
            .try_into()
            .map_err(|_| "malformed next pointer".to_string())?;
        self.pointers.push(u64::from_be_bytes(bytes));
        Ok(())
    }

    pub(crate) fn on_grant(
        &mut self,
        upload_id: u64,
        block_capacity: u64,
        ptr: &HybridEnvelope,
        keys: &KeyPair,
    ) -> Step {
        if block_capacity == 0 {
            return Step::Failed("zero block capacity".into());
        }
        if let Err(e) = self.pointer(ptr, keys) {
            return Step::Failed(e);
        }
        self.upload_id = upload_id;
        self.block_capacity = block_capacity;
        let bfr = blocking_factor(self.records.len() as u64, block_capacity);
        Step::Send(vec![Body::StoreReserve { upload_id, bfr }, self.chunk(0)])
    }

    pub(crate) fn on_ack(
        &mut self,
        seq: u64,
        ptr: &HybridEnvelope,
        extent: Option<Extent>,
        keys: &KeyPair,
    ) -> Step {
        if let Err(e) = self.pointer(ptr, keys) {
            return Step::Failed(e);
        }
        match extent {
            Some(e) => Step::Done(e),
            None => Step::Send(vec![self.chunk(seq + 1)]),
        }
    }

    pub(crate) fn on_reject(&mut self, seq: u64) -> Step {
        self.retransmits += 1;
        if self.retransmits > MAX_RETRANSMITS {
            return Step::Failed(format!("chunk {seq} rejected {} times", self.retransmits));
        }
        Step::Send(vec![self.chunk(seq)])
    }
}

pub(crate) fn encode_pointer(p: u64) -> [u8; 8] {
    p.to_be_bytes()
}
