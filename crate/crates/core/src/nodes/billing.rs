//! Wallets and price tags held by the billing server.
//!
//! Amounts are integer micro-units. A charge `C` moves `floor(C * u)` to the
//! app developer and the remainder to the billing server, so every committed
//! event nets to exactly zero.

use std::collections::{BTreeMap, VecDeque};
use std::fmt;
use std::str::FromStr;

use thiserror::Error;

pub type Micros = u64;

pub const BILLING_SERVER_WALLET: &str = "bs";

#[derive(Debug, Error, PartialEq, Eq)]
pub enum BillingError {
    #[error("ad {0} has no price tag")]
    UnknownAd(u32),
    #[error("invalid share `{0}`: need n/d with 0 <= n <= d, d > 0")]
    BadShare(String),
    #[error("balance overflow in wallet `{0}`")]
    Overflow(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum BillingEvent {
    Presentation,
    Click,
}

impl BillingEvent {
    pub fn name(self) -> &'static str {
        match self {
            BillingEvent::Presentation => "presentation",
            BillingEvent::Click => "click",
        }
    }
}

/// Developer share `u = num/den`; the billing server gets `v = 1 - u`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Shares {
    num: u64,
    den: u64,
}

impl Shares {
    pub fn new(num: u64, den: u64) -> Result<Self, BillingError> {
        if den == 0 || num > den {
            return Err(BillingError::BadShare(format!("{num}/{den}")));
        }
        Ok(Self { num, den })
    }

    pub fn developer_part(&self, charge: Micros) -> Micros {
        (u128::from(charge) * u128::from(self.num) / u128::from(self.den)) as Micros
    }
}

impl Default for Shares {
    fn default() -> Self {
        Self { num: 7, den: 10 }
    }
}

impl fmt::Display for Shares {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.num, self.den)
    }
}

impl FromStr for Shares {
    type Err = BillingError;

    fn from_str(s: &str) -> Result<Self, BillingError> {
        let bad = || BillingError::BadShare(s.to_string());
        let (n, d) = s.split_once('/').ok_or_else(bad)?;
        Shares::new(
            n.trim().parse().map_err(|_| bad())?,
            d.trim().parse().map_err(|_| bad())?,
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PriceTag {
    pub advertiser_wallet: String,
    pub presentation: Micros,
    pub click: Micros,
}

impl PriceTag {
    pub fn charge(&self, event: BillingEvent) -> Micros {
        match event {
            BillingEvent::Presentation => self.presentation,
            BillingEvent::Click => self.click,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BillingRequest {
    pub event: BillingEvent,
    pub ad_id: u32,
    pub developer_wallet: String,
}

/// One committed event; `entries` sum to zero.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LedgerDelta {
    pub event: BillingEvent,
    pub ad_id: u32,
    pub entries: Vec<(String, i128)>,
}

impl LedgerDelta {
    pub fn net(&self) -> i128 {
        self.entries.iter().map(|(_, d)| d).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BillOutcome {
    Committed(LedgerDelta),
    /// Advertiser could not cover the charge; nothing moved.
    Queued,
}

#[derive(Debug, Clone, Default)]
pub struct WalletLedger {
    balances: BTreeMap<String, Micros>,
    prices: BTreeMap<u32, PriceTag>,
    shares: Shares,
    queue: VecDeque<BillingRequest>,
    history: Vec<LedgerDelta>,
    minted: u128,
}

impl WalletLedger {
    pub fn new(shares: Shares) -> Self {
        Self {
            shares,
            ..Default::default()
        }
    }

    pub fn shares(&self) -> Shares {
        self.shares
    }

    pub fn set_price(&mut self, ad_id: u32, tag: PriceTag) {
        self.prices.insert(ad_id, tag);
    }

    pub fn price(&self, ad_id: u32) -> Option<&PriceTag> {
        self.prices.get(&ad_id)
    }

    /// Credits external funds (advertiser top-up). Not a billing event.
    pub fn fund(&mut self, wallet: &str, amount: Micros) -> Result<(), BillingError> {
        let b = self.balances.entry(wallet.to_string()).or_default();
        *b = b
            .checked_add(amount)
            .ok_or_else(|| BillingError::Overflow(wallet.to_string()))?;
        self.minted += u128::from(amount);
        Ok(())
    }

    pub fn balance(&self, wallet: &str) -> Micros {
        self.balances.get(wallet).copied().unwrap_or(0)
    }

    pub fn balances(&self) -> &BTreeMap<String, Micros> {
        &self.balances
    }

    pub fn total(&self) -> u128 {
        self.balances.values().map(|b| u128::from(*b)).sum()
    }

    /// Funds put in via [`fund`](Self::fund); equals [`total`](Self::total)
    /// when billing conserves value.
    pub fn minted(&self) -> u128 {
        self.minted
    }

    pub fn queued(&self) -> &VecDeque<BillingRequest> {
        &self.queue
    }

    pub fn history(&self) -> &[LedgerDelta] {
        &self.history
    }

    pub fn bill(&mut self, req: BillingRequest) -> Result<BillOutcome, BillingError> {
        let tag = self
            .prices
            .get(&req.ad_id)
            .ok_or(BillingError::UnknownAd(req.ad_id))?;
        let charge = tag.charge(req.event);
        let advertiser = tag.advertiser_wallet.clone();
        if self.balance(&advertiser) < charge {
            self.queue.push_back(req);
            return Ok(BillOutcome::Queued);
        }
        let dev = self.shares.developer_part(charge);
        let bs = charge - dev;
        for (w, amount) in [
            (&req.developer_wallet, dev),
            (&BILLING_SERVER_WALLET.to_string(), bs),
        ] {
            if self.balance(w).checked_add(amount).is_none() {
                return Err(BillingError::Overflow(w.clone()));
            }
        }
        *self.balances.entry(advertiser.clone()).or_default() -= charge;
        *self
            .balances
            .entry(req.developer_wallet.clone())
            .or_default() += dev;
        *self
            .balances
            .entry(BILLING_SERVER_WALLET.to_string())
            .or_default() += bs;
        let delta = LedgerDelta {
            event: req.event,
            ad_id: req.ad_id,
            entries: vec![
                (advertiser, -i128::from(charge)),
                (req.developer_wallet, i128::from(dev)),
                (BILLING_SERVER_WALLET.to_string(), i128::from(bs)),
            ],
        };
        self.history.push(delta.clone());
        Ok(BillOutcome::Committed(delta))
    }

    /// Retries queued events in order; those still unaffordable stay queued.
    pub fn retry_queued(&mut self) -> Result<usize, BillingError> {
        let pending: Vec<BillingRequest> = self.queue.drain(..).collect();
        let mut committed = 0;
        for req in pending {
            if let BillOutcome::Committed(_) = self.bill(req)? {
                committed += 1;
            }
        }
        Ok(committed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ledger(clk: Micros, prs: Micros) -> WalletLedger {
        let mut l = WalletLedger::new(Shares::new(7, 10).unwrap());
        l.set_price(
            1,
            PriceTag {
                advertiser_wallet: "adv".into(),
                presentation: prs,
                click: clk,
            },
        );
        l
    }

    fn click(ad: u32) -> BillingRequest {
        BillingRequest {
            event: BillingEvent::Click,
            ad_id: ad,
            developer_wallet: "dev".into(),
        }
    }

    #[test]
    fn click_of_ten_splits_seven_three() {
        let mut l = ledger(10, 1);
        l.fund("adv", 100).unwrap();
        let BillOutcome::Committed(d) = l.bill(click(1)).unwrap() else {
            panic!("should commit")
        };
        assert_eq!(
            d.entries,
            vec![("adv".into(), -10), ("dev".into(), 7), ("bs".into(), 3)]
        );
        assert_eq!(
            (l.balance("adv"), l.balance("dev"), l.balance("bs")),
            (90, 7, 3)
        );
    }

    #[test]
    fn zero_price_moves_nothing() {
        let mut l = ledger(0, 0);
        l.fund("adv", 5).unwrap();
        l.bill(click(1)).unwrap();
        assert_eq!(
            (l.balance("adv"), l.balance("dev"), l.balance("bs")),
            (5, 0, 0)
        );
    }

    #[test]
    fn insufficient_balance_queues_without_partial_transfer() {
        let mut l = ledger(10, 1);
        l.fund("adv", 9).unwrap();
        assert_eq!(l.bill(click(1)).unwrap(), BillOutcome::Queued);
        assert_eq!(l.balance("adv"), 9);
        assert_eq!(l.queued().len(), 1);
        l.fund("adv", 1).unwrap();
        assert_eq!(l.retry_queued().unwrap(), 1);
        assert!(l.queued().is_empty());
        assert_eq!(l.balance("adv"), 0);
    }

    #[test]
    fn unknown_ad_is_an_error() {
        assert_eq!(ledger(1, 1).bill(click(2)), Err(BillingError::UnknownAd(2)));
    }

    #[test]
    fn odd_charges_round_towards_the_server() {
        let mut l = ledger(3, 1);
        l.fund("adv", 3).unwrap();
        l.bill(click(1)).unwrap();
        // floor(3 * 0.7) = 2
        assert_eq!((l.balance("dev"), l.balance("bs")), (2, 1));
    }

    #[test]
    fn shares_parse() {
        assert_eq!("7/10".parse::<Shares>().unwrap(), Shares::default());
        assert!("11/10".parse::<Shares>().is_err());
        assert!("1/0".parse::<Shares>().is_err());
        assert!("0.7".parse::<Shares>().is_err());
    }

    proptest! {
        #[test]
        fn every_event_nets_to_zero(
            events in prop::collection::vec((any::<bool>(), 0u32..4, 0usize..3), 1..200),
            num in 0u64..=100, funds in 0u64..5_000,
        ) {
            let mut l = WalletLedger::new(Shares::new(num, 100).unwrap());
            for ad in 0..4u32 {
                l.set_price(ad, PriceTag {
                    advertiser_wallet: format!("adv{}", ad % 2),
                    presentation: u64::from(ad) * 3 + 1,
                    click: u64::from(ad) * 17 + 5,
                });
            }
            l.fund("adv0", funds).unwrap();
            l.fund("adv1", funds / 2).unwrap();
            for (is_click, ad, dev) in events {
                let event = if is_click { BillingEvent::Click } else { BillingEvent::Presentation };
                if let BillOutcome::Committed(d) = l.bill(BillingRequest {
                    event, ad_id: ad, developer_wallet: format!("dev{dev}"),
                }).unwrap() {
                    prop_assert_eq!(d.net(), 0);
                }
                prop_assert_eq!(l.total(), l.minted());
            }
        }
    }
}
