//! The profiling-ads index: interest digest -> encrypted ads.

use std::collections::BTreeMap;

use rand::{CryptoRng, RngCore};
use thiserror::Error;

use crate::admatch::{assign_ads, Ad, InterestKeywords, MatchError};
use crate::cryptokit::{hybrid_encrypt, CryptoError, DigestScheme, HybridEnvelope, PublicKey};
use crate::wire::{FieldReader, FieldWriter, WireError};

#[derive(Debug, Error)]
pub enum IndexError {
    #[error("no ad could be assigned to any interest")]
    NothingAssigned,
    #[error(transparent)]
    Match(#[from] MatchError),
    #[error(transparent)]
    Crypto(#[from] CryptoError),
    #[error("malformed index record: {0}")]
    Wire(#[from] WireError),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IndexEntry {
    pub ad_id: u32,
    pub envelope: HybridEnvelope,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProfilingAdsIndex {
    pub scheme: DigestScheme,
    pub entries: BTreeMap<Vec<u8>, Vec<IndexEntry>>,
}

impl ProfilingAdsIndex {
    pub fn envelope_count(&self) -> usize {
        self.entries.values().map(Vec::len).sum()
    }

    /// One storage record per (digest, ad) pair.
    pub fn to_records(&self) -> Vec<Vec<u8>> {
        self.entries
            .iter()
            .flat_map(|(digest, list)| list.iter().map(move |e| encode_record(digest, e)))
            .collect()
    }

    pub fn from_records<'a>(
        scheme: DigestScheme,
        records: impl IntoIterator<Item = &'a [u8]>,
    ) -> Result<Self, IndexError> {
        let mut entries: BTreeMap<Vec<u8>, Vec<IndexEntry>> = BTreeMap::new();
        for r in records {
            let (digest, entry) = decode_record(r)?;
            entries.entry(digest).or_default().push(entry);
        }
        Ok(Self { scheme, entries })
    }
}

fn encode_record(digest: &[u8], e: &IndexEntry) -> Vec<u8> {
    let mut w = FieldWriter::new();
    w.field(digest).u32(e.ad_id).field(&e.envelope.encode());
    w.finish()
}

fn decode_record(bytes: &[u8]) -> Result<(Vec<u8>, IndexEntry), IndexError> {
    let mut r = FieldReader::new(bytes);
    let digest = r.field()?.to_vec();
    let ad_id = r.u32()?;
    let envelope = HybridEnvelope::decode(r.field()?)?;
    r.finish()?;
    Ok((digest, IndexEntry { ad_id, envelope }))
}

/// Plaintext sealed inside each ad envelope.
pub fn encode_ad(ad: &Ad) -> Vec<u8> {
    let mut w = FieldWriter::new();
    w.u32(ad.ad_id)
        .field(ad.advertiser_id.as_bytes())
        .field(ad.keywords.join(",").as_bytes())
        .field(&ad.payload);
    w.finish()
}

pub fn decode_ad(bytes: &[u8]) -> Result<Ad, WireError> {
    let mut r = FieldReader::new(bytes);
    let ad_id = r.u32()?;
    let utf8 = |b: &[u8]| String::from_utf8(b.to_vec()).map_err(|_| WireError::Invalid("utf-8"));
    let advertiser_id = utf8(r.field()?)?;
    let kws = utf8(r.field()?)?;
    let payload = r.field()?.to_vec();
    r.finish()?;
    Ok(Ad {
        ad_id,
        advertiser_id,
        keywords: kws
            .split(',')
            .filter(|s| !s.is_empty())
            .map(String::from)
            .collect(),
        payload,
    })
}

/// Matches ads to interests, then digests each interest and encrypts its ads
/// for the Miners' group key.
pub fn global_setup<R: RngCore + CryptoRng>(
    rng: &mut R,
    ads: &[Ad],
    taxonomy: &[InterestKeywords],
    miner_group_key: &PublicKey,
    scheme: DigestScheme,
) -> Result<ProfilingAdsIndex, IndexError> {
    let matched = assign_ads(ads, taxonomy)?;
    if matched.assignments.is_empty() {
        return Err(IndexError::NothingAssigned);
    }
    let by_id: BTreeMap<u32, &Ad> = ads.iter().map(|a| (a.ad_id, a)).collect();
    let mut entries = BTreeMap::new();
    for (interest, ad_ids) in &matched.assignments {
        let list = ad_ids
            .iter()
            .map(|id| {
                let envelope = hybrid_encrypt(rng, &encode_ad(by_id[id]), miner_group_key)?;
                Ok(IndexEntry {
                    ad_id: *id,
                    envelope,
                })
            })
            .collect::<Result<Vec<_>, CryptoError>>()?;
        entries.insert(interest.digest(scheme), list);
    }
    Ok(ProfilingAdsIndex { scheme, entries })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::admatch::normalize;
    use crate::cryptokit::{generate_keypair, hybrid_decrypt};
    use crate::profile::Interest;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn ad(id: u32, kws: &[&str]) -> Ad {
        Ad {
            ad_id: id,
            advertiser_id: "A1".into(),
            keywords: normalize(kws),
            payload: vec![id as u8; 100],
        }
    }

    #[test]
    fn one_ad_one_interest() {
        let group = generate_keypair(1024, Some(3)).unwrap();
        let tax = vec![
            InterestKeywords::new(Interest::new("poker", "Games"), ["poker"]).unwrap(),
            InterestKeywords::new(Interest::new("hiking", "Outdoor"), ["trail"]).unwrap(),
        ];
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let idx = global_setup(
            &mut rng,
            &[ad(1, &["poker"])],
            &tax,
            group.public(),
            DigestScheme::Sha256,
        )
        .unwrap();
        assert_eq!(idx.entries.len(), 1);
        assert_eq!(idx.envelope_count(), 1);
        let (digest, list) = idx.entries.iter().next().unwrap();
        assert_eq!(*digest, tax[0].interest.digest(DigestScheme::Sha256));
        let plain = hybrid_decrypt(&list[0].envelope, &group).unwrap();
        assert_eq!(decode_ad(&plain).unwrap(), ad(1, &["poker"]));

        let back = ProfilingAdsIndex::from_records(
            DigestScheme::Sha256,
            idx.to_records().iter().map(Vec::as_slice),
        )
        .unwrap();
        assert_eq!(back, idx);
    }

    #[test]
    fn unassignable_corpus_is_an_error() {
        let group = generate_keypair(512, Some(3)).unwrap();
        let tax = vec![
            InterestKeywords::new(Interest::new("a", "c"), ["x"]).unwrap(),
            InterestKeywords::new(Interest::new("b", "c"), ["y"]).unwrap(),
        ];
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let r = global_setup(
            &mut rng,
            &[ad(1, &["zzz"])],
            &tax,
            group.public(),
            DigestScheme::Sha1,
        );
        assert!(matches!(r, Err(IndexError::NothingAssigned)));
    }
}
