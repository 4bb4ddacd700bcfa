//! Simulated platform entities and the message bus between them.
//!
//! APS (ad placement server), CS (cloud store), CH (cluster head), BS
//! (billing server) and one Miner per user are single-threaded actors. They
//! only exchange [`Message`]s through a FIFO [`Bus`]; delivery order, and
//! hence the run log, is fully determined by the seed and the scenario.

mod aps;
pub mod billing;
mod bs;
mod ch;
mod cs;
pub mod index;
mod miner;
pub mod scenario;
pub mod sim;
pub mod storage;
pub mod tracking;
mod upload;

use std::collections::{BTreeMap, VecDeque};
use std::fmt;

use crate::cryptokit::{sha256, Hash32, HybridEnvelope};
use crate::ledger::{canonical_encode, AdBlock, Transaction};
use crate::wire::FieldWriter;

pub use sim::{Check, FlowError, SimConfig, Simulation};
pub use storage::Extent;

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum NodeId {
    Aps,
    Cs,
    Ch,
    Bs,
    Miner(u32),
    /// An app on the given Miner's device.
    App(u32, String),
}

impl NodeId {
    /// Digest used as the requester id when this node faces a policy.
    pub fn digest(&self) -> Hash32 {
        sha256(self.to_string().as_bytes())
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NodeId::Aps => f.write_str("aps"),
            NodeId::Cs => f.write_str("cs"),
            NodeId::Ch => f.write_str("ch"),
            NodeId::Bs => f.write_str("bs"),
            NodeId::Miner(i) => write!(f, "miner-{i}"),
            NodeId::App(i, app) => write!(f, "app-{i}/{app}"),
        }
    }
}

/// The entity whose policy turned a request down.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Hop {
    Miner,
    Ch,
    Cs,
}

impl fmt::Display for Hop {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Hop::Miner => "miner",
            Hop::Ch => "ch",
            Hop::Cs => "cs",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Body {
    AppRequest {
        app_id: String,
    },
    AppClick {
        app_id: String,
        ad_id: u32,
    },
    AppExit {
        app_id: String,
    },
    AppDelivery {
        ad_ids: Vec<u32>,
        refused_by: Option<Hop>,
    },
    StoreRequest {
        tx: Transaction,
        resource: String,
        record_count: u64,
        content_digest: Hash32,
    },
    StoreGrant {
        upload_id: u64,
        block_capacity: u64,
        next_pointer: HybridEnvelope,
    },
    StoreReserve {
        upload_id: u64,
        bfr: u64,
    },
    StoreChunk {
        upload_id: u64,
        seq: u64,
        records: Vec<Vec<u8>>,
        digest: Hash32,
    },
    ChunkAck {
        upload_id: u64,
        seq: u64,
        next_pointer: HybridEnvelope,
        extent: Option<Extent>,
    },
    ChunkRejected {
        upload_id: u64,
        seq: u64,
    },
    Stored {
        extent: Extent,
    },
    StoreRefused {
        hop: Hop,
        reason: String,
    },
    AdBlockRequest {
        block: AdBlock,
    },
    ForwardRequest {
        tx: Transaction,
    },
    Response {
        tx: Transaction,
    },
    Refused {
        hop: Hop,
        request: Hash32,
    },
    Monitor {
        tx: Transaction,
    },
    Billing {
        tx: Transaction,
    },
    BillingReceipt {
        request: Hash32,
        committed: u32,
        queued: u32,
    },
}

impl Body {
    pub fn kind(&self) -> &'static str {
        match self {
            Body::AppRequest { .. } => "app-request",
            Body::AppClick { .. } => "app-click",
            Body::AppExit { .. } => "app-exit",
            Body::AppDelivery { .. } => "app-delivery",
            Body::StoreRequest { .. } => "store-request",
            Body::StoreGrant { .. } => "store-grant",
            Body::StoreReserve { .. } => "store-reserve",
            Body::StoreChunk { .. } => "store-chunk",
            Body::ChunkAck { .. } => "chunk-ack",
            Body::ChunkRejected { .. } => "chunk-rejected",
            Body::Stored { .. } => "stored",
            Body::StoreRefused { .. } => "store-refused",
            Body::AdBlockRequest { .. } => "ad-block",
            Body::ForwardRequest { .. } => "forward",
            Body::Response { .. } => "response",
            Body::Refused { .. } => "refused",
            Body::Monitor { .. } => "monitor",
            Body::Billing { .. } => "billing",
            Body::BillingReceipt { .. } => "billing-receipt",
        }
    }

    /// The transaction this message carries, if any.
    pub fn tx(&self) -> Option<&Transaction> {
        match self {
            Body::StoreRequest { tx, .. }
            | Body::ForwardRequest { tx }
            | Body::Response { tx }
            | Body::Monitor { tx }
            | Body::Billing { tx } => Some(tx),
            Body::AdBlockRequest { block } => Some(&block.header),
            _ => None,
        }
    }

    /// Everything the message puts on the wire, for byte-level inspection.
    pub fn encode(&self) -> Vec<u8> {
        let mut w = FieldWriter::new();
        w.field(self.kind().as_bytes());
        let tx_bytes = |tx: &Transaction| canonical_encode(tx).unwrap_or_default();
        match self {
            Body::AppRequest { app_id } | Body::AppExit { app_id } => {
                w.field(app_id.as_bytes());
            }
            Body::AppClick { app_id, ad_id } => {
                w.field(app_id.as_bytes()).u32(*ad_id);
            }
            Body::AppDelivery { ad_ids, refused_by } => {
                w.u32_list(ad_ids).opt(
                    refused_by
                        .map(|h| h.to_string())
                        .as_deref()
                        .map(str::as_bytes),
                );
            }
            Body::StoreRequest {
                tx,
                resource,
                record_count,
                content_digest,
            } => {
                w.field(&tx_bytes(tx))
                    .field(resource.as_bytes())
                    .u64(*record_count)
                    .field(content_digest.as_bytes());
            }
            Body::StoreGrant {
                upload_id,
                block_capacity,
                next_pointer,
            } => {
                w.u64(*upload_id)
                    .u64(*block_capacity)
                    .field(&next_pointer.encode());
            }
            Body::StoreReserve { upload_id, bfr } => {
                w.u64(*upload_id).u64(*bfr);
            }
            Body::StoreChunk {
                upload_id,
                seq,
                records,
                digest,
            } => {
                w.u64(*upload_id).u64(*seq);
                for r in records {
                    w.field(r);
                }
                w.field(digest.as_bytes());
            }
            Body::ChunkAck {
                upload_id,
                seq,
                next_pointer,
                extent,
            } => {
                w.u64(*upload_id).u64(*seq).field(&next_pointer.encode());
                if let Some(e) = extent {
                    w.u64(e.first_block).u64(e.blocks).u64(e.records);
                }
            }
            Body::ChunkRejected { upload_id, seq } => {
                w.u64(*upload_id).u64(*seq);
            }
            Body::Stored { extent } => {
                w.u64(extent.first_block)
                    .u64(extent.blocks)
                    .u64(extent.records);
            }
            Body::StoreRefused { hop, reason } => {
                w.field(hop.to_string().as_bytes()).field(reason.as_bytes());
            }
            Body::AdBlockRequest { block } => {
                w.field(&block.encode().unwrap_or_default());
            }
            Body::ForwardRequest { tx }
            | Body::Response { tx }
            | Body::Monitor { tx }
            | Body::Billing { tx } => {
                w.field(&tx_bytes(tx));
            }
            Body::Refused { hop, request } => {
                w.field(hop.to_string().as_bytes())
                    .field(request.as_bytes());
            }
            Body::BillingReceipt {
                request,
                committed,
                queued,
            } => {
                w.field(request.as_bytes()).u32(*committed).u32(*queued);
            }
        }
        w.finish()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Message {
    pub from: NodeId,
    pub to: NodeId,
    pub body: Body,
}

impl Message {
    pub fn new(from: NodeId, to: NodeId, body: Body) -> Self {
        Self { from, to, body }
    }
}

/// One-shot transit fault: flips a bit in the first record of a chunk.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ChunkFault {
    pub upload_id: u64,
    pub seq: u64,
}

#[derive(Debug, Default)]
pub struct Bus {
    queue: VecDeque<Message>,
    tick: u64,
    log: String,
    wire: BTreeMap<NodeId, Vec<Vec<u8>>>,
    faults: Vec<ChunkFault>,
    corrupted: Vec<ChunkFault>,
}

impl Bus {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn send(&mut self, msg: Message) {
        self.queue.push_back(msg);
    }

    pub fn add_fault(&mut self, fault: ChunkFault) {
        self.faults.push(fault);
    }

    /// Faults that actually fired.
    pub fn corrupted(&self) -> &[ChunkFault] {
        &self.corrupted
    }

    pub fn tick(&self) -> u64 {
        self.tick
    }

    /// `tick  from  to  kind  tx_type  t_id-prefix`, tab separated.
    pub fn run_log(&self) -> &str {
        &self.log
    }

    /// Encoded messages sent or received by `node`.
    pub fn wire_log(&self, node: &NodeId) -> &[Vec<u8>] {
        self.wire.get(node).map_or(&[], Vec::as_slice)
    }

    /// Next message, after transit faults, logging it as delivered.
    pub(crate) fn next(&mut self) -> Option<Message> {
        let mut msg = self.queue.pop_front()?;
        if let Body::StoreChunk {
            upload_id,
            seq,
            records,
            ..
        } = &mut msg.body
        {
            let hit = self
                .faults
                .iter()
                .position(|f| f.upload_id == *upload_id && f.seq == *seq);
            if let (Some(i), Some(first)) = (hit, records.first_mut().filter(|r| !r.is_empty())) {
                first[0] ^= 0x01;
                self.corrupted.push(self.faults.remove(i));
            }
        }
        self.tick += 1;
        let (ty, tid) = match msg.body.tx() {
            Some(tx) => (tx.tx_type.name(), tx.t_id.to_hex()[..16].to_string()),
            None => ("-", "-".to_string()),
        };
        self.log.push_str(&format!(
            "{:06}\t{}\t{}\t{}\t{}\t{}\n",
            self.tick,
            msg.from,
            msg.to,
            msg.body.kind(),
            ty,
            tid
        ));
        let bytes = msg.body.encode();
        for node in [&msg.from, &msg.to] {
            if matches!(node, NodeId::Cs | NodeId::Ch) {
                self.wire
                    .entry(node.clone())
                    .or_default()
                    .push(bytes.clone());
            }
        }
        Some(msg)
    }
}

/// Requester digest for a policy check on a transaction-bearing message:
/// Miners act for their user, infrastructure nodes for themselves.
pub(crate) fn requester_of(from: &NodeId, tx: &Transaction) -> Hash32 {
    match from {
        NodeId::Miner(_) => tx.user_digest,
        other => other.digest(),
    }
}
