//! Cluster head: checks Miner ad-blocks against its policy and relays
//! between Miners and the cloud store.

use std::collections::{BTreeMap, BTreeSet};

use super::{Body, Hop, Message, NodeId};
use crate::cryptokit::Hash32;
use crate::ledger::TransactionType;
use crate::policy::{Decision, PolicyDocument, RequestContext};

pub(crate) const RES_AD_BLOCK: &str = "ad-block";

pub(crate) struct Ch {
    policy: PolicyDocument,
    pending: BTreeMap<Hash32, NodeId>,
    /// Ads relayed per (user digest, app digest, session).
    pub(crate) served: BTreeMap<(Hash32, Hash32, u64), BTreeSet<u32>>,
    pub(crate) blocks_seen: Vec<Hash32>,
    pub(crate) monitors_forwarded: usize,
}

impl Ch {
    pub(crate) fn new(policy: PolicyDocument) -> Self {
        Self {
            policy,
            pending: BTreeMap::new(),
            served: BTreeMap::new(),
            blocks_seen: Vec::new(),
            monitors_forwarded: 0,
        }
    }

    pub(crate) fn handle(&mut self, msg: Message) -> Vec<Message> {
        let from = msg.from;
        match msg.body {
            Body::AdBlockRequest { block } => {
                let header = &block.header;
                let refused = || {
                    vec![Message::new(
                        NodeId::Ch,
                        from.clone(),
                        Body::Refused {
                            hop: Hop::Ch,
                            request: header.t_id,
                        },
                    )]
                };
                let well_formed = header.tx_type == TransactionType::Request
                    && header.verify().is_ok()
                    && block.transactions.iter().all(|t| t.verify().is_ok())
                    && block.merkle_consistent();
                if !well_formed {
                    return refused();
                }
                let ctx =
                    RequestContext::new(header.user_digest, TransactionType::Request, RES_AD_BLOCK);
                if self.policy.traverse(&ctx).decision != Decision::Allow {
                    return refused();
                }
                self.blocks_seen.push(block.hash());
                self.pending.insert(header.t_id, from);
                vec![Message::new(
                    NodeId::Ch,
                    NodeId::Cs,
                    Body::ForwardRequest { tx: block.header },
                )]
            }
            Body::Response { tx } => {
                let Some(miner) = self.pending.remove(&tx.prev_t_id) else {
                    return Vec::new();
                };
                if tx.verify().is_err() {
                    return vec![Message::new(
                        NodeId::Ch,
                        miner,
                        Body::Refused {
                            hop: Hop::Cs,
                            request: tx.prev_t_id,
                        },
                    )];
                }
                self.served
                    .entry((tx.user_digest, tx.app_digest, tx.session_id))
                    .or_default()
                    .extend(tx.ad_ids.iter().copied());
                vec![Message::new(NodeId::Ch, miner, Body::Response { tx })]
            }
            Body::Refused { hop, request } => match self.pending.remove(&request) {
                Some(miner) => vec![Message::new(
                    NodeId::Ch,
                    miner,
                    Body::Refused { hop, request },
                )],
                None => Vec::new(),
            },
            Body::Monitor { tx } => {
                if tx.verify().is_err() {
                    return Vec::new();
                }
                self.monitors_forwarded += 1;
                vec![Message::new(NodeId::Ch, NodeId::Cs, Body::Monitor { tx })]
            }
            _ => Vec::new(),
        }
    }
}
