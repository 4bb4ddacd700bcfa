//! Deterministic end-to-end simulation of the platform.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use thiserror::Error;

use super::aps::Aps;
use super::billing::{Micros, PriceTag, Shares, WalletLedger};
use super::bs::Bs;
use super::ch::Ch;
use super::cs::Cs;
use super::index::{global_setup, ProfilingAdsIndex};
use super::miner::{Delivery, Miner, MinerSetup};
use super::storage::{Extent, StorageArena};
use super::{Bus, ChunkFault, Hop, Message, NodeId};
use crate::admatch::{Ad, InterestKeywords};
use crate::cryptokit::{sha256, CryptoError, DigestScheme, KeyPair};
use crate::ledger::{
    verify_with_len, ChainRecord, LedgerError, TransactionType, DEFAULT_BLOCK_SIZE_LIMIT,
};
use crate::policy::{Action, Match, PolicyDocument, Rule};
use crate::profile::{
    AppInterestMap, AppRef, AppsProfile, Hours, InterestProfile, ProfileError, ProfileThresholds,
};

pub use super::miner::SESSION_IDLE_HOURS;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum FlowError {
    #[error("refused by {0} policy")]
    Refused(Hop),
    #[error("store refused by {hop}: {reason}")]
    StoreRefused { hop: Hop, reason: String },
    #[error("transfer failed: {0}")]
    Transfer(String),
    #[error("nothing to upload")]
    EmptyUpload,
    #[error("profile: {0}")]
    Profile(String),
    #[error("unknown user `{0}`")]
    UnknownUser(String),
    #[error("app `{0}` is not installed")]
    UnknownApp(String),
    #[error("ad {0} was not served in the current session")]
    NotServed(u32),
    #[error("malformed message: {0}")]
    Malformed(String),
    #[error("ledger: {0}")]
    Ledger(String),
    #[error("crypto: {0}")]
    Crypto(String),
    #[error("flow ended without a reply")]
    NoReply,
    #[error("setup: {0}")]
    Setup(String),
}

impl From<LedgerError> for FlowError {
    fn from(e: LedgerError) -> Self {
        FlowError::Ledger(e.to_string())
    }
}

impl From<CryptoError> for FlowError {
    fn from(e: CryptoError) -> Self {
        FlowError::Crypto(e.to_string())
    }
}

impl From<ProfileError> for FlowError {
    fn from(e: ProfileError) -> Self {
        match e {
            ProfileError::NothingToUpload => FlowError::EmptyUpload,
            other => FlowError::Profile(other.to_string()),
        }
    }
}

/// Which node family a policy applies to. Miner policies are shared by all
/// Miners.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum PolicyHost {
    Miner,
    Ch,
    Cs,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PolicySpec {
    pub rules: Vec<Rule>,
    pub root_position: usize,
}

impl PolicySpec {
    pub fn allow_all() -> Self {
        Self {
            rules: vec![Rule::new(Match::any(), Action::Allow)],
            root_position: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UserConfig {
    pub user_id: String,
    pub demographics: Vec<(String, String)>,
    pub apps: Vec<AppRef>,
}

#[derive(Debug, Clone)]
pub struct SimConfig {
    pub seed: u64,
    pub key_bits: usize,
    pub scheme: DigestScheme,
    pub taxonomy: Vec<InterestKeywords>,
    pub ads: Vec<Ad>,
    pub app_map: AppInterestMap,
    pub block_capacity: u64,
    pub storage_blocks: u64,
    pub block_size_limit: usize,
    pub shares: Shares,
    /// `(presentation, click)` price for ads without their own tag.
    pub default_price: (Micros, Micros),
    pub prices: BTreeMap<u32, (Micros, Micros)>,
    pub funds: Vec<(String, Micros)>,
    pub default_quota: u32,
    pub quotas: BTreeMap<u32, u32>,
    pub thresholds: ProfileThresholds,
    pub users: Vec<UserConfig>,
    pub policies: BTreeMap<PolicyHost, PolicySpec>,
    pub faults: Vec<ChunkFault>,
}

impl SimConfig {
    pub fn new(taxonomy: Vec<InterestKeywords>, ads: Vec<Ad>, app_map: AppInterestMap) -> Self {
        Self {
            seed: 42,
            key_bits: 1024,
            scheme: DigestScheme::Sha256,
            taxonomy,
            ads,
            app_map,
            block_capacity: 64,
            storage_blocks: 4096,
            block_size_limit: DEFAULT_BLOCK_SIZE_LIMIT,
            shares: Shares::default(),
            default_price: (1_000, 10_000),
            prices: BTreeMap::new(),
            funds: Vec::new(),
            default_quota: 100,
            quotas: BTreeMap::new(),
            thresholds: ProfileThresholds::default(),
            users: Vec::new(),
            policies: BTreeMap::new(),
            faults: Vec::new(),
        }
    }

    /// Plaintext identifiers that must never reach CS or CH.
    pub fn private_strings(&self) -> BTreeSet<String> {
        let mut out = BTreeSet::new();
        for u in &self.users {
            out.insert(u.user_id.clone());
            out.extend(u.apps.iter().map(|a| a.app_id.clone()));
        }
        out.extend(self.app_map.app_ids().map(String::from));
        for i in self
            .app_map
            .all_interests()
            .iter()
            .chain(self.taxonomy.iter().map(|t| &t.interest))
        {
            out.insert(i.id.clone());
            out.insert(i.to_string());
        }
        out
    }
}

/// Outcome of one invariant check over a finished run.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let verdict = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "{verdict} {}: {}", self.name, self.detail)
    }
}

pub struct Simulation {
    bus: Bus,
    aps: Aps,
    cs: Cs,
    ch: Ch,
    bs: Bs,
    miners: Vec<Miner>,
    users: BTreeMap<String, u32>,
    group: KeyPair,
    scheme: DigestScheme,
    index: Option<ProfilingAdsIndex>,
    index_extent: Option<Extent>,
    private: BTreeSet<String>,
    setup_rng: ChaCha20Rng,
    config_ads: Vec<Ad>,
    taxonomy: Vec<InterestKeywords>,
    now: Hours,
    app_inbox: Vec<Message>,
}

fn stream(seed: u64, n: u64) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(n);
    rng
}

fn document(spec: Option<&PolicySpec>) -> Result<PolicyDocument, FlowError> {
    let spec = spec.cloned().unwrap_or_else(PolicySpec::allow_all);
    PolicyDocument::new(spec.rules, spec.root_position).map_err(|e| FlowError::Setup(e.to_string()))
}

impl Simulation {
    /// Generates every key from the seed and builds all nodes. No messages
    /// are exchanged until [`setup`](Self::setup).
    pub fn new(config: SimConfig) -> Result<Self, FlowError> {
        config.thresholds.validate()?;
        let mut keygen = stream(config.seed, 0);
        let mut key = || KeyPair::generate(config.key_bits, &mut keygen);
        let group = key()?;
        let aps_keys = key()?;
        let cs_keys = key()?;
        let bs_keys = key()?;
        let miner_keys = config
            .users
            .iter()
            .map(|_| key())
            .collect::<Result<Vec<_>, _>>()?;

        let arena = StorageArena::new(config.block_capacity, config.storage_blocks)
            .map_err(|e| FlowError::Setup(e.to_string()))?;
        let cs = Cs::new(
            cs_keys,
            config.scheme,
            document(config.policies.get(&PolicyHost::Cs))?,
            arena,
            stream(config.seed, 2),
        );
        let ch = Ch::new(document(config.policies.get(&PolicyHost::Ch))?);

        let mut wallets = WalletLedger::new(config.shares);
        for ad in &config.ads {
            let (presentation, click) = config
                .prices
                .get(&ad.ad_id)
                .copied()
                .unwrap_or(config.default_price);
            wallets.set_price(
                ad.ad_id,
                PriceTag {
                    advertiser_wallet: ad.advertiser_id.clone(),
                    presentation,
                    click,
                },
            );
        }
        for (wallet, amount) in &config.funds {
            wallets
                .fund(wallet, *amount)
                .map_err(|e| FlowError::Setup(e.to_string()))?;
        }
        let bs = Bs::new(bs_keys, wallets);

        let map = Arc::new(config.app_map.clone());
        let quotas = Arc::new(config.quotas.clone());
        let mut miners = Vec::new();
        let mut users = BTreeMap::new();
        for (i, (u, keys)) in config.users.iter().zip(miner_keys).enumerate() {
            let idx = i as u32;
            if users.insert(u.user_id.clone(), idx).is_some() {
                return Err(FlowError::Setup(format!(
                    "user `{}` declared twice",
                    u.user_id
                )));
            }
            let mut apps = AppsProfile::default();
            for a in &u.apps {
                apps.insert(a.clone())?;
            }
            miners.push(Miner::new(MinerSetup {
                idx,
                user_id: u.user_id.clone(),
                keys,
                group: group.clone(),
                cs_key: cs.public().clone(),
                bs_key: bs.public().clone(),
                scheme: config.scheme,
                map: Arc::clone(&map),
                thresholds: config.thresholds,
                apps,
                demographics: u.demographics.clone(),
                policy: document(config.policies.get(&PolicyHost::Miner))?,
                block_limit: config.block_size_limit,
                quotas: Arc::clone(&quotas),
                default_quota: config.default_quota,
                rng: stream(config.seed, 100 + u64::from(idx)),
            })?);
        }

        let mut bus = Bus::new();
        for f in &config.faults {
            bus.add_fault(*f);
        }
        Ok(Self {
            bus,
            aps: Aps::new(aps_keys, stream(config.seed, 1)),
            cs,
            ch,
            bs,
            miners,
            users,
            group,
            scheme: config.scheme,
            index: None,
            index_extent: None,
            private: config.private_strings(),
            setup_rng: stream(config.seed, 3),
            config_ads: config.ads,
            taxonomy: config.taxonomy,
            now: 0,
            app_inbox: Vec::new(),
        })
    }

    /// Builds the profiling-ads index at APS and stores it at CS.
    pub fn setup(&mut self) -> Result<Extent, FlowError> {
        let index = global_setup(
            &mut self.setup_rng,
            &self.config_ads,
            &self.taxonomy,
            self.group.public(),
            self.scheme,
        )
        .map_err(|e| FlowError::Setup(e.to_string()))?;
        let msg = self.aps.store_index(&index)?;
        self.index = Some(index);
        self.bus.send(msg);
        self.pump();
        let extent = self.aps.result.clone().ok_or(FlowError::NoReply)??;
        self.index_extent = Some(extent);
        Ok(extent)
    }

    fn pump(&mut self) {
        while let Some(msg) = self.bus.next() {
            let out = match msg.to.clone() {
                NodeId::Aps => self.aps.handle(msg),
                NodeId::Cs => self.cs.handle(msg),
                NodeId::Ch => self.ch.handle(msg),
                NodeId::Bs => self.bs.handle(msg),
                NodeId::Miner(i) => match self.miners.get_mut(i as usize) {
                    Some(m) => m.handle(msg),
                    None => Vec::new(),
                },
                NodeId::App(..) => {
                    self.app_inbox.push(msg);
                    Vec::new()
                }
            };
            for m in out {
                self.bus.send(m);
            }
        }
    }

    fn miner_idx(&self, user: &str) -> Result<usize, FlowError> {
        self.users
            .get(user)
            .map(|&i| i as usize)
            .ok_or_else(|| FlowError::UnknownUser(user.to_string()))
    }

    pub fn now(&self) -> Hours {
        self.now
    }

    /// Moves the clock forward; idle sessions close and bill.
    pub fn advance_to(&mut self, hour: Hours) {
        self.now = self.now.max(hour);
        for i in 0..self.miners.len() {
            for m in self.miners[i].set_time(self.now) {
                self.bus.send(m);
            }
        }
        self.pump();
    }

    pub fn record_usage(&mut self, user: &str, app: &str, hours: Hours) -> Result<(), FlowError> {
        let i = self.miner_idx(user)?;
        self.miners[i].record_usage(app, hours)
    }

    pub fn profile(&self, user: &str) -> Result<InterestProfile, FlowError> {
        Ok(self.miners[self.miner_idx(user)?].derived_profile())
    }

    pub fn upload_profile(&mut self, user: &str) -> Result<Extent, FlowError> {
        let i = self.miner_idx(user)?;
        let msg = self.miners[i].start_upload()?;
        self.bus.send(msg);
        self.pump();
        self.miners[i]
            .upload_result
            .take()
            .ok_or(FlowError::NoReply)?
    }

    fn app_message(&mut self, i: usize, app: &str, body: super::Body) {
        let msg = Message::new(
            NodeId::App(i as u32, app.to_string()),
            NodeId::Miner(i as u32),
            body,
        );
        self.bus.send(msg);
        self.pump();
    }

    pub fn ads_request(&mut self, user: &str, app: &str) -> Result<Vec<Ad>, FlowError> {
        let i = self.miner_idx(user)?;
        let before = self.miners[i].deliveries.len();
        self.app_message(
            i,
            app,
            super::Body::AppRequest {
                app_id: app.to_string(),
            },
        );
        let d = &self.miners[i].deliveries;
        if d.len() == before {
            return Err(FlowError::NoReply);
        }
        d[d.len() - 1].result.clone()
    }

    pub fn click(&mut self, user: &str, app: &str, ad_id: u32) -> Result<(), FlowError> {
        let i = self.miner_idx(user)?;
        let before = self.miners[i].click_results.len();
        self.app_message(
            i,
            app,
            super::Body::AppClick {
                app_id: app.to_string(),
                ad_id,
            },
        );
        let r = &self.miners[i].click_results;
        if r.len() == before {
            return Err(FlowError::NoReply);
        }
        r[r.len() - 1].clone()
    }

    pub fn exit(&mut self, user: &str, app: &str) -> Result<(), FlowError> {
        let i = self.miner_idx(user)?;
        self.app_message(
            i,
            app,
            super::Body::AppExit {
                app_id: app.to_string(),
            },
        );
        Ok(())
    }

    /// Closes every open session so presentations get billed.
    pub fn finish(&mut self) {
        for i in 0..self.miners.len() {
            for m in self.miners[i].close_all() {
                self.bus.send(m);
            }
        }
        self.pump();
    }

    pub fn bus(&self) -> &Bus {
        &self.bus
    }

    pub fn run_log(&self) -> &str {
        self.bus.run_log()
    }

    pub fn index(&self) -> Option<&ProfilingAdsIndex> {
        self.index.as_ref()
    }

    pub fn index_extent(&self) -> Option<Extent> {
        self.index_extent
    }

    /// Next-pointers APS decrypted during the index upload.
    pub fn index_pointers(&self) -> &[u64] {
        &self.aps.pointers
    }

    pub fn deliveries(&self, user: &str) -> Result<&[Delivery], FlowError> {
        Ok(&self.miners[self.miner_idx(user)?].deliveries)
    }

    pub fn tracking(&self, user: &str) -> Result<&super::tracking::TrackingList, FlowError> {
        Ok(&self.miners[self.miner_idx(user)?].tracking)
    }

    /// Digests CS holds for `user`, if a profile was stored.
    pub fn stored_profile(&self, user: &str) -> Option<Vec<Vec<u8>>> {
        self.cs.stored_profile(&sha256(user.as_bytes()))
    }

    pub fn wallets(&self) -> &WalletLedger {
        &self.bs.wallets
    }

    /// Chunks CS rejected as `(upload_id, seq)`.
    pub fn rejected_chunks(&self) -> &[(u64, u64)] {
        &self.cs.rejected_chunks
    }

    /// `(used, free)` storage blocks at CS.
    pub fn storage_blocks(&self) -> (u64, u64) {
        (self.cs.arena().used_blocks(), self.cs.arena().free_blocks())
    }

    /// Distinct interest digests CS holds in its index.
    pub fn indexed_digests(&self) -> usize {
        self.cs.index_digests()
    }

    pub fn monitor_reports(&self) -> usize {
        self.cs.monitors.len()
    }

    pub fn billing_receipts(&self, user: &str) -> Result<&[(u32, u32)], FlowError> {
        Ok(&self.miners[self.miner_idx(user)?].receipts)
    }

    pub fn chain(&self, user: &str) -> Result<&crate::ledger::TxStore, FlowError> {
        Ok(&self.miners[self.miner_idx(user)?].store)
    }

    pub fn blocks(&self, user: &str) -> Result<&[crate::ledger::AdBlock], FlowError> {
        Ok(&self.miners[self.miner_idx(user)?].blocks)
    }

    /// Every Miner's transactions in insertion order followed by its blocks,
    /// Miners in user-id order.
    pub fn chain_records(&self) -> Vec<ChainRecord> {
        let mut out = Vec::new();
        for &idx in self.users.values() {
            let m = &self.miners[idx as usize];
            out.extend(m.store.iter().cloned().map(ChainRecord::Transaction));
            out.extend(m.blocks.iter().cloned().map(ChainRecord::Block));
        }
        out
    }

    /// Plaintext corpus strings found in CS or CH traffic, with the node.
    pub fn privacy_leaks(&self) -> Vec<(NodeId, String)> {
        let mut out = Vec::new();
        for node in [NodeId::Cs, NodeId::Ch] {
            let log = self.bus.wire_log(&node);
            for s in &self.private {
                let finder = memchr::memmem::Finder::new(s.as_bytes());
                if log.iter().any(|m| finder.find(m).is_some()) {
                    out.push((node.clone(), s.clone()));
                }
            }
        }
        out
    }

    pub fn checks(&self) -> Vec<Check> {
        vec![
            self.check_privacy(),
            self.check_conservation(),
            self.check_flows(),
            self.check_sessions(),
            self.check_blocks(),
            self.check_quota(),
        ]
    }

    fn check_privacy(&self) -> Check {
        let leaks = self.privacy_leaks();
        let scanned: usize = [NodeId::Cs, NodeId::Ch]
            .iter()
            .map(|n| self.bus.wire_log(n).len())
            .sum();
        Check {
            name: "privacy-boundary",
            passed: leaks.is_empty(),
            detail: if leaks.is_empty() {
                format!(
                    "{} strings absent from {scanned} CS/CH messages",
                    self.private.len()
                )
            } else {
                let list: Vec<String> = leaks.iter().map(|(n, s)| format!("{s}@{n}")).collect();
                format!("leaked: {}", list.join(", "))
            },
        }
    }

    fn check_conservation(&self) -> Check {
        let w = &self.bs.wallets;
        let unbalanced = w.history().iter().filter(|d| d.net() != 0).count();
        Check {
            name: "billing-conservation",
            passed: unbalanced == 0 && w.total() == w.minted(),
            detail: format!(
                "{} events, total {} of {} minted, {} queued",
                w.history().len(),
                w.total(),
                w.minted(),
                w.queued().len()
            ),
        }
    }

    fn check_flows(&self) -> Check {
        let mut responses = 0;
        let mut broken = Vec::new();
        for (name, &i) in &self.users {
            let m = &self.miners[i as usize];
            for tx in m
                .store
                .iter()
                .filter(|t| t.tx_type == TransactionType::Response)
            {
                responses += 1;
                let ok = m
                    .store
                    .get(&tx.prev_t_id)
                    .is_some_and(|p| p.tx_type == TransactionType::Request)
                    && m.store.walk_to_genesis(&tx.t_id).ok().and_then(|path| {
                        path.last()
                            .and_then(|id| m.store.get(id))
                            .map(|g| g.tx_type)
                    }) == Some(TransactionType::Genesis);
                if !ok {
                    broken.push(format!("{name}:{}", &tx.t_id.to_hex()[..8]));
                }
            }
        }
        Check {
            name: "flow-completeness",
            passed: broken.is_empty(),
            detail: if broken.is_empty() {
                format!("{responses} responses chain to a request and a genesis")
            } else {
                format!("broken: {}", broken.join(", "))
            },
        }
    }

    fn check_sessions(&self) -> Check {
        let mut dupes = Vec::new();
        let mut sessions = 0;
        for (name, &i) in &self.users {
            let mut seen: BTreeMap<(String, u64), BTreeSet<u32>> = BTreeMap::new();
            for d in &self.miners[i as usize].deliveries {
                let Ok(ads) = &d.result else { continue };
                let set = seen.entry((d.app_id.clone(), d.session_id)).or_default();
                for a in ads {
                    if !set.insert(a.ad_id) {
                        dupes.push(format!(
                            "{name}/{}#{}: ad {}",
                            d.app_id, d.session_id, a.ad_id
                        ));
                    }
                }
            }
            sessions += seen.len();
        }
        Check {
            name: "session-filter",
            passed: dupes.is_empty(),
            detail: if dupes.is_empty() {
                format!("no repeats across {sessions} sessions")
            } else {
                dupes.join("; ")
            },
        }
    }

    fn check_blocks(&self) -> Check {
        let mut blocks = 0;
        let mut bad = 0;
        for m in &self.miners {
            for b in &m.blocks {
                blocks += 1;
                let tree = b.tree();
                let proofs_ok = (0..b.transactions.len()).all(|k| {
                    tree.prove(k).is_ok_and(|p| {
                        verify_with_len(
                            &b.merkle_root,
                            &b.transactions[k].t_id,
                            &p,
                            b.transactions.len(),
                        )
                    })
                });
                if !b.merkle_consistent() || !proofs_ok {
                    bad += 1;
                }
            }
        }
        Check {
            name: "merkle-consistency",
            passed: bad == 0,
            detail: format!("{blocks} ad-blocks, {bad} inconsistent"),
        }
    }

    fn check_quota(&self) -> Check {
        let rows: Vec<_> = self.miners.iter().flat_map(|m| m.tracking.rows()).collect();
        let over = rows.iter().filter(|r| r.served_fraction() > 100).count();
        Check {
            name: "quota-bounds",
            passed: over == 0,
            detail: format!("{} tracked ads within 0..=100%", rows.len()),
        }
    }
}
