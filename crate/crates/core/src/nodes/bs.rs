//! Billing server: opens sealed Billing transactions and settles them.

use super::billing::{BillOutcome, BillingEvent, BillingRequest, WalletLedger};
use super::{Body, Message, NodeId};
use crate::cryptokit::{hybrid_decrypt, KeyPair, PublicKey};
use crate::ledger::TransactionType;
use crate::wire::{FieldReader, FieldWriter, WireError};

pub(crate) struct Bs {
    keys: KeyPair,
    pub(crate) wallets: WalletLedger,
    /// Billing transactions that could not be opened or named unknown ads.
    pub(crate) rejected: usize,
}

impl Bs {
    pub(crate) fn new(keys: KeyPair, wallets: WalletLedger) -> Self {
        Self {
            keys,
            wallets,
            rejected: 0,
        }
    }

    pub(crate) fn public(&self) -> &PublicKey {
        self.keys.public()
    }

    pub(crate) fn handle(&mut self, msg: Message) -> Vec<Message> {
        let Body::Billing { tx } = msg.body else {
            return Vec::new();
        };
        let events = (tx.tx_type == TransactionType::Billing && tx.verify().is_ok())
            .then_some(tx.payload.as_ref())
            .flatten()
            .and_then(|env| hybrid_decrypt(env, &self.keys).ok())
            .and_then(|plain| decode_events(&plain).ok());
        let Some(events) = events else {
            self.rejected += 1;
            return Vec::new();
        };
        let (mut committed, mut queued) = (0, 0);
        for req in events {
            match self.wallets.bill(req) {
                Ok(BillOutcome::Committed(_)) => committed += 1,
                Ok(BillOutcome::Queued) => queued += 1,
                Err(_) => self.rejected += 1,
            }
        }
        vec![Message::new(
            NodeId::Bs,
            msg.from,
            Body::BillingReceipt {
                request: tx.t_id,
                committed,
                queued,
            },
        )]
    }
}

pub(crate) fn encode_events(events: &[BillingRequest]) -> Vec<u8> {
    let mut w = FieldWriter::new();
    for e in events {
        let tag = match e.event {
            BillingEvent::Presentation => 0,
            BillingEvent::Click => 1,
        };
        w.u8(tag).u32(e.ad_id).field(e.developer_wallet.as_bytes());
    }
    w.finish()
}

pub(crate) fn decode_events(bytes: &[u8]) -> Result<Vec<BillingRequest>, WireError> {
    let mut r = FieldReader::new(bytes);
    let mut out = Vec::new();
    while !r.is_empty() {
        let event = match r.u8()? {
            0 => BillingEvent::Presentation,
            1 => BillingEvent::Click,
            _ => return Err(WireError::Invalid("billing event")),
        };
        let ad_id = r.u32()?;
        let developer_wallet =
            String::from_utf8(r.field()?.to_vec()).map_err(|_| WireError::Invalid("utf-8"))?;
        out.push(BillingRequest {
            event,
            ad_id,
            developer_wallet,
        });
    }
    Ok(out)
}
