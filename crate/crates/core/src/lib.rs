//! Privacy-preserving mobile ad delivery over a transaction ledger.
//!
//! Users' interest profiles are derived on the device and only leave it as
//! digests. Ads are matched to interests ahead of time, encrypted, and stored
//! in an untrusted cloud store behind policy trees. Requests, responses and
//! billing events are recorded as signed, chained transactions batched under
//! Merkle roots.

pub mod admatch;
pub mod cryptokit;
pub mod ledger;
pub mod nodes;
pub mod policy;
pub mod profile;
pub mod wire;
