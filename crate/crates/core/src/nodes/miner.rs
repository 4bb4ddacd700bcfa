//! The on-device Miner: local profiling, ad-block requests, session
//! filtering, quota tracking and billing triggers.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::sync::Arc;

use rand_chacha::ChaCha20Rng;

use super::billing::{BillingEvent, BillingRequest};
use super::bs::encode_events;
use super::cs::{decode_bundle, RES_PROFILE};
use super::index::decode_ad;
use super::sim::FlowError;
use super::storage::Extent;
use super::tracking::TrackingList;
use super::upload::{Step, Upload};
use super::{Body, Hop, Message, NodeId};
use crate::admatch::Ad;
use crate::cryptokit::{hybrid_decrypt, sha256, DigestScheme, Hash32, KeyPair, PublicKey};
use crate::ledger::{
    assemble_block, make_transaction, AdBlock, Transaction, TransactionType, TxDraft, TxStore,
};
use crate::policy::{Decision, PolicyDocument, RequestContext};
use crate::profile::{AppInterestMap, AppsProfile, Hours, InterestProfile, ProfileThresholds};

/// A session with no activity for this long is closed.
pub const SESSION_IDLE_HOURS: Hours = 24;

pub(crate) const RES_ADS: &str = "ads";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Delivery {
    pub app_id: String,
    pub session_id: u64,
    pub result: Result<Vec<Ad>, FlowError>,
}

#[derive(Debug)]
struct Session {
    id: u64,
    last_active: Hours,
    served: BTreeSet<u32>,
    clicked: Vec<u32>,
    unbilled: Vec<u32>,
}

pub(crate) struct MinerSetup {
    pub idx: u32,
    pub user_id: String,
    pub keys: KeyPair,
    pub group: KeyPair,
    pub cs_key: PublicKey,
    pub bs_key: PublicKey,
    pub scheme: DigestScheme,
    pub map: Arc<AppInterestMap>,
    pub thresholds: ProfileThresholds,
    pub apps: AppsProfile,
    pub demographics: Vec<(String, String)>,
    pub policy: PolicyDocument,
    pub block_limit: usize,
    pub quotas: Arc<BTreeMap<u32, u32>>,
    pub default_quota: u32,
    pub rng: ChaCha20Rng,
}

pub(crate) struct Miner {
    id: NodeId,
    idx: u32,
    user_digest: Hash32,
    keys: KeyPair,
    group: KeyPair,
    cs_key: PublicKey,
    bs_key: PublicKey,
    scheme: DigestScheme,
    map: Arc<AppInterestMap>,
    thresholds: ProfileThresholds,
    pub(crate) apps: AppsProfile,
    policy: PolicyDocument,
    block_limit: usize,
    quotas: Arc<BTreeMap<u32, u32>>,
    default_quota: u32,
    rng: ChaCha20Rng,
    now: Hours,

    pub(crate) profile: InterestProfile,
    pub(crate) store: TxStore,
    heads: BTreeMap<String, Hash32>,
    own_head: Hash32,
    pending: VecDeque<Transaction>,
    last_block: Hash32,
    pub(crate) blocks: Vec<AdBlock>,

    sessions: BTreeMap<String, Session>,
    next_session: u64,
    outstanding: BTreeMap<Hash32, String>,
    known_ads: BTreeMap<u32, Ad>,
    pub(crate) tracking: TrackingList,
    pub(crate) deliveries: Vec<Delivery>,
    pub(crate) click_results: Vec<Result<(), FlowError>>,
    pub(crate) receipts: Vec<(u32, u32)>,

    upload: Option<Upload>,
    uploaded_once: bool,
    pub(crate) upload_result: Option<Result<Extent, FlowError>>,
}

impl Miner {
    pub(crate) fn new(s: MinerSetup) -> Result<Self, FlowError> {
        let mut profile = InterestProfile::empty();
        for (opt, val) in &s.demographics {
            profile = profile.with_demographic(opt, val)?;
        }
        let mut m = Self {
            id: NodeId::Miner(s.idx),
            idx: s.idx,
            user_digest: sha256(s.user_id.as_bytes()),
            keys: s.keys,
            group: s.group,
            cs_key: s.cs_key,
            bs_key: s.bs_key,
            scheme: s.scheme,
            map: s.map,
            thresholds: s.thresholds,
            apps: s.apps,
            policy: s.policy,
            block_limit: s.block_limit,
            quotas: s.quotas,
            default_quota: s.default_quota,
            rng: s.rng,
            now: 0,
            profile,
            store: TxStore::new(),
            heads: BTreeMap::new(),
            own_head: Hash32::ZERO,
            pending: VecDeque::new(),
            last_block: Hash32::ZERO,
            blocks: Vec::new(),
            sessions: BTreeMap::new(),
            next_session: 1,
            outstanding: BTreeMap::new(),
            known_ads: BTreeMap::new(),
            tracking: TrackingList::new(),
            deliveries: Vec::new(),
            click_results: Vec::new(),
            receipts: Vec::new(),
            upload: None,
            uploaded_once: false,
            upload_result: None,
        };
        m.own_head = m
            .record(TxDraft::genesis(m.user_digest, Hash32::ZERO), None)?
            .t_id;
        let app_ids: Vec<String> = m.apps.iter().map(|a| a.app_id.clone()).collect();
        for app in app_ids {
            m.genesis_for(&app)?;
        }
        Ok(m)
    }

    fn genesis_for(&mut self, app: &str) -> Result<(), FlowError> {
        let g = self.record(
            TxDraft::genesis(self.user_digest, sha256(app.as_bytes())),
            None,
        )?;
        self.heads.insert(app.to_string(), g.t_id);
        Ok(())
    }

    /// Builds, signs, records and queues a transaction for the next block.
    fn record(
        &mut self,
        draft: TxDraft,
        sealed: Option<(&[u8], PublicKey)>,
    ) -> Result<Transaction, FlowError> {
        let (payload, recipient) = match &sealed {
            Some((p, k)) => (Some(*p), k),
            None => (None, self.keys.public()),
        };
        let tx = make_transaction(
            &mut self.rng,
            draft,
            payload,
            &self.keys,
            recipient,
            &self.store,
        )?;
        self.store.insert(tx.clone())?;
        self.pending.push_back(tx.clone());
        Ok(tx)
    }

    fn app_draft(&self, t: TransactionType, app: &str, session_id: u64) -> TxDraft {
        TxDraft {
            user_digest: self.user_digest,
            app_digest: sha256(app.as_bytes()),
            session_id,
            ..TxDraft::new(t, self.heads[app])
        }
    }

    fn send(&self, to: NodeId, body: Body) -> Message {
        Message::new(self.id.clone(), to, body)
    }

    fn app_node(&self, app: &str) -> NodeId {
        NodeId::App(self.idx, app.to_string())
    }

    pub(crate) fn record_usage(&mut self, app_id: &str, hours: Hours) -> Result<(), FlowError> {
        let app = self
            .apps
            .get(app_id)
            .ok_or_else(|| FlowError::UnknownApp(app_id.into()))?;
        self.profile = self.profile.record_usage(app, hours, self.now, &self.map)?;
        Ok(())
    }

    pub(crate) fn derived_profile(&self) -> InterestProfile {
        self.profile.derive(&self.map, &self.thresholds, self.now)
    }

    /// Advances the clock, closing sessions idle for a full day.
    pub(crate) fn set_time(&mut self, now: Hours) -> Vec<Message> {
        self.now = self.now.max(now);
        let idle: Vec<String> = self
            .sessions
            .iter()
            .filter(|(_, s)| self.now.saturating_sub(s.last_active) >= SESSION_IDLE_HOURS)
            .map(|(a, _)| a.clone())
            .collect();
        idle.iter().flat_map(|a| self.close_session(a)).collect()
    }

    pub(crate) fn close_all(&mut self) -> Vec<Message> {
        let open: Vec<String> = self.sessions.keys().cloned().collect();
        open.iter().flat_map(|a| self.close_session(a)).collect()
    }

    pub(crate) fn start_upload(&mut self) -> Result<Message, FlowError> {
        self.profile = self.derived_profile();
        let digests = self.profile.hash_profile(self.scheme)?;
        let t = if self.uploaded_once {
            TransactionType::Update
        } else {
            TransactionType::Upload
        };
        let draft = TxDraft {
            user_digest: self.user_digest,
            ..TxDraft::new(t, self.own_head)
        };
        let tx = self.record(draft, None)?;
        self.own_head = tx.t_id;
        let (up, body) = Upload::start(tx, RES_PROFILE, digests);
        self.upload = Some(up);
        self.upload_result = None;
        Ok(self.send(NodeId::Cs, body))
    }

    pub(crate) fn handle(&mut self, msg: Message) -> Vec<Message> {
        match msg.body {
            Body::AppRequest { app_id } => self.on_app_request(app_id),
            Body::AppClick { app_id, ad_id } => self.on_click(app_id, ad_id),
            Body::AppExit { app_id } => self.close_session(&app_id),
            Body::Response { tx } => self.on_response(tx),
            Body::Refused { hop, request } => match self.outstanding.remove(&request) {
                Some(app) => {
                    let session_id = self.sessions.get(&app).map_or(0, |s| s.id);
                    self.deliver(app, session_id, Err(FlowError::Refused(hop)))
                }
                None => Vec::new(),
            },
            Body::BillingReceipt {
                committed, queued, ..
            } => {
                self.receipts.push((committed, queued));
                Vec::new()
            }
            body @ (Body::StoreGrant { .. }
            | Body::ChunkAck { .. }
            | Body::ChunkRejected { .. }
            | Body::Stored { .. }
            | Body::StoreRefused { .. }) => self.on_store_reply(body),
            _ => Vec::new(),
        }
    }

    fn deliver(
        &mut self,
        app: String,
        session_id: u64,
        result: Result<Vec<Ad>, FlowError>,
    ) -> Vec<Message> {
        let body = match &result {
            Ok(ads) => Body::AppDelivery {
                ad_ids: ads.iter().map(|a| a.ad_id).collect(),
                refused_by: None,
            },
            Err(FlowError::Refused(hop)) => Body::AppDelivery {
                ad_ids: Vec::new(),
                refused_by: Some(*hop),
            },
            Err(_) => Body::AppDelivery {
                ad_ids: Vec::new(),
                refused_by: None,
            },
        };
        let to = self.app_node(&app);
        self.deliveries.push(Delivery {
            app_id: app,
            session_id,
            result,
        });
        vec![self.send(to, body)]
    }

    fn on_app_request(&mut self, app: String) -> Vec<Message> {
        if self.apps.get(&app).is_none() {
            return self.deliver(app.clone(), 0, Err(FlowError::UnknownApp(app)));
        }
        let ctx = RequestContext::new(sha256(app.as_bytes()), TransactionType::Request, RES_ADS);
        if self.policy.traverse(&ctx).decision != Decision::Allow {
            return self.deliver(app, 0, Err(FlowError::Refused(Hop::Miner)));
        }
        let now = self.now;
        let next = self.next_session;
        let session = self.sessions.entry(app.clone()).or_insert_with(|| Session {
            id: next,
            last_active: now,
            served: BTreeSet::new(),
            clicked: Vec::new(),
            unbilled: Vec::new(),
        });
        if session.id == next {
            self.next_session += 1;
        }
        session.last_active = now;
        let (sid, input, output) = (
            session.id,
            session.served.iter().copied().collect(),
            session.clicked.clone(),
        );
        let draft = TxDraft {
            input,
            output,
            ..self.app_draft(TransactionType::Request, &app, sid)
        };
        let block = self.record(draft, None).and_then(|tx| {
            self.heads.insert(app.clone(), tx.t_id);
            Ok(assemble_block(
                tx,
                &mut self.pending,
                self.block_limit,
                self.last_block,
            )?)
        });
        match block {
            Ok(block) => {
                self.last_block = block.hash();
                self.outstanding.insert(block.header.t_id, app);
                self.blocks.push(block.clone());
                vec![self.send(NodeId::Ch, Body::AdBlockRequest { block })]
            }
            Err(e) => self.deliver(app, sid, Err(e)),
        }
    }

    fn on_response(&mut self, tx: Transaction) -> Vec<Message> {
        let Some(app) = self.outstanding.remove(&tx.prev_t_id) else {
            return Vec::new();
        };
        let sid = tx.session_id;
        match self.open_response(&app, tx) {
            Ok(ads) => self.deliver(app, sid, Ok(ads)),
            Err(e) => self.deliver(app, sid, Err(e)),
        }
    }

    fn open_response(&mut self, app: &str, tx: Transaction) -> Result<Vec<Ad>, FlowError> {
        if tx.tx_type != TransactionType::Response {
            return Err(FlowError::Malformed("expected a response".into()));
        }
        let env = tx
            .payload
            .clone()
            .ok_or_else(|| FlowError::Malformed("empty response".into()))?;
        self.store.insert(tx.clone())?;
        self.heads.insert(app.to_string(), tx.t_id);
        self.pending.push_back(tx);
        let plain = hybrid_decrypt(&env, &self.keys)?;
        let bundle = decode_bundle(&plain).map_err(|e| FlowError::Malformed(e.to_string()))?;
        let now = self.now;
        let session = self
            .sessions
            .get_mut(app)
            .ok_or_else(|| FlowError::Malformed("response for a closed session".into()))?;
        let mut ads = Vec::new();
        for (ad_id, digest, env) in bundle {
            if env.digest() != digest || session.served.contains(&ad_id) {
                continue;
            }
            let ad = decode_ad(&hybrid_decrypt(&env, &self.group)?)
                .map_err(|e| FlowError::Malformed(e.to_string()))?;
            if ad.ad_id != ad_id {
                continue;
            }
            session.served.insert(ad_id);
            session.unbilled.push(ad_id);
            if !self.tracking.contains(ad_id) {
                let freq = self
                    .quotas
                    .get(&ad_id)
                    .copied()
                    .unwrap_or(self.default_quota);
                self.tracking
                    .register(ad_id, freq, now)
                    .map_err(|e| FlowError::Malformed(e.to_string()))?;
            }
            self.tracking
                .record(ad_id, BillingEvent::Presentation, now)
                .map_err(|e| FlowError::Malformed(e.to_string()))?;
            self.known_ads.insert(ad_id, ad.clone());
            ads.push(ad);
        }
        session.last_active = now;
        Ok(ads)
    }

    fn on_click(&mut self, app: String, ad_id: u32) -> Vec<Message> {
        let served = self
            .sessions
            .get(&app)
            .is_some_and(|s| s.served.contains(&ad_id));
        if !served {
            self.click_results.push(Err(FlowError::NotServed(ad_id)));
            return Vec::new();
        }
        let now = self.now;
        let session = self.sessions.get_mut(&app).expect("checked above");
        session.clicked.push(ad_id);
        session.last_active = now;
        let sid = session.id;
        let _ = self.tracking.record(ad_id, BillingEvent::Click, now);
        match self.billing_tx(&app, sid, BillingEvent::Click, vec![ad_id]) {
            Ok(m) => {
                self.click_results.push(Ok(()));
                vec![m]
            }
            Err(e) => {
                self.click_results.push(Err(e));
                Vec::new()
            }
        }
    }

    fn billing_tx(
        &mut self,
        app: &str,
        sid: u64,
        event: BillingEvent,
        ads: Vec<u32>,
    ) -> Result<Message, FlowError> {
        let developer = self
            .apps
            .get(app)
            .map(|a| a.developer_id.clone())
            .unwrap_or_default();
        let events: Vec<BillingRequest> = ads
            .iter()
            .map(|&ad_id| BillingRequest {
                event,
                ad_id,
                developer_wallet: developer.clone(),
            })
            .collect();
        let advertisers: BTreeSet<&str> = ads
            .iter()
            .filter_map(|a| self.known_ads.get(a).map(|ad| ad.advertiser_id.as_str()))
            .collect();
        let advertiser_id =
            (advertisers.len() == 1).then(|| advertisers.first().unwrap().to_string());
        let draft = TxDraft {
            ad_ids: ads,
            advertiser_id,
            ..self.app_draft(TransactionType::Billing, app, sid)
        };
        let plain = encode_events(&events);
        let tx = self.record(draft, Some((&plain, self.bs_key.clone())))?;
        self.heads.insert(app.to_string(), tx.t_id);
        Ok(self.send(NodeId::Bs, Body::Billing { tx }))
    }

    /// Flushes unbilled presentations and reports the quota list.
    fn close_session(&mut self, app: &str) -> Vec<Message> {
        let Some(s) = self.sessions.remove(app) else {
            return Vec::new();
        };
        let mut out = Vec::new();
        if !s.unbilled.is_empty() {
            if let Ok(m) = self.billing_tx(app, s.id, BillingEvent::Presentation, s.unbilled) {
                out.push(m);
            }
        }
        if !s.served.is_empty() {
            let draft = TxDraft {
                ad_ids: s.served.into_iter().collect(),
                output: s.clicked,
                ..self.app_draft(TransactionType::Monitor, app, s.id)
            };
            let report = self.tracking.encode_active();
            if let Ok(tx) = self.record(draft, Some((&report, self.cs_key.clone()))) {
                self.heads.insert(app.to_string(), tx.t_id);
                out.push(self.send(NodeId::Ch, Body::Monitor { tx }));
            }
        }
        out
    }

    fn on_store_reply(&mut self, body: Body) -> Vec<Message> {
        let Some(up) = self.upload.as_mut() else {
            return Vec::new();
        };
        let step = match body {
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
                self.upload = None;
                self.upload_result = Some(Err(FlowError::StoreRefused { hop, reason }));
                return Vec::new();
            }
            _ => return Vec::new(),
        };
        match step {
            Step::Send(bodies) => bodies
                .into_iter()
                .map(|b| self.send(NodeId::Cs, b))
                .collect(),
            Step::Done(e) => {
                self.upload = None;
                self.uploaded_once = true;
                self.upload_result = Some(Ok(e));
                Vec::new()
            }
            Step::Failed(reason) => {
                self.upload = None;
                self.upload_result = Some(Err(FlowError::Transfer(reason)));
                Vec::new()
            }
        }
    }
}
