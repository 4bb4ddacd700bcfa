//! Per-ad advertising quota kept by the Miner.

use std::collections::BTreeMap;

use thiserror::Error;

use super::billing::BillingEvent;
use crate::profile::Hours;
use crate::wire::FieldWriter;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TrackingError {
    #[error("ad {0} is not on the tracking list")]
    UnknownAd(u32),
    #[error("required frequency must be positive")]
    ZeroFrequency,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrackingRow {
    /// Hour of the last update.
    pub timestamp: Hours,
    pub ad_id: u32,
    pub required_frequency: u32,
    pub served: u32,
    pub clicks: u32,
}

impl TrackingRow {
    /// `floor(served * 100 / required_frequency)`, capped at 100.
    pub fn served_fraction(&self) -> u32 {
        let pct = u64::from(self.served) * 100 / u64::from(self.required_frequency);
        pct.min(100) as u32
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TrackingList {
    rows: BTreeMap<u32, TrackingRow>,
}

impl TrackingList {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(
        &mut self,
        ad_id: u32,
        required_frequency: u32,
        now: Hours,
    ) -> Result<(), TrackingError> {
        if required_frequency == 0 {
            return Err(TrackingError::ZeroFrequency);
        }
        self.rows.insert(
            ad_id,
            TrackingRow {
                timestamp: now,
                ad_id,
                required_frequency,
                served: 0,
                clicks: 0,
            },
        );
        Ok(())
    }

    pub fn contains(&self, ad_id: u32) -> bool {
        self.rows.contains_key(&ad_id)
    }

    pub fn row(&self, ad_id: u32) -> Option<&TrackingRow> {
        self.rows.get(&ad_id)
    }

    pub fn rows(&self) -> impl Iterator<Item = &TrackingRow> {
        self.rows.values()
    }

    pub fn record(
        &mut self,
        ad_id: u32,
        event: BillingEvent,
        now: Hours,
    ) -> Result<(), TrackingError> {
        let row = self
            .rows
            .get_mut(&ad_id)
            .ok_or(TrackingError::UnknownAd(ad_id))?;
        match event {
            BillingEvent::Presentation => row.served = row.served.saturating_add(1),
            BillingEvent::Click => row.clicks = row.clicks.saturating_add(1),
        }
        row.timestamp = row.timestamp.max(now);
        Ok(())
    }

    pub fn update_quota(
        &self,
        ad_id: u32,
        event: BillingEvent,
        now: Hours,
    ) -> Result<Self, TrackingError> {
        let mut next = self.clone();
        next.record(ad_id, event, now)?;
        Ok(next)
    }

    /// Compact encoding of rows with any activity, for the Monitor report.
    pub fn encode_active(&self) -> Vec<u8> {
        let mut w = FieldWriter::new();
        for r in self.rows.values().filter(|r| r.served > 0 || r.clicks > 0) {
            w.u64(r.timestamp)
                .u32(r.ad_id)
                .u32(r.required_frequency)
                .u32(r.served)
                .u32(r.clicks);
        }
        w.finish()
    }
}
