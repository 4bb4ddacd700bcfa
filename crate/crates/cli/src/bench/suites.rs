//! The four timed suites.

use std::collections::BTreeSet;
use std::fmt;
use std::hint::black_box;
use std::str::FromStr;

use adchain_core::admatch::{synth_payload, MAX_PAYLOAD, MIN_PAYLOAD};
use adchain_core::cryptokit::{
    hybrid_decrypt, hybrid_encrypt, sha256, DigestScheme, Hash32, KeyPair,
};
use adchain_core::ledger::TransactionType;
use adchain_core::policy::{build_tree, Action, Decision, Match, RequestContext, Rule};
use adchain_core::profile::{AppInterestMap, AppRef, Interest, InterestProfile, ProfileThresholds};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use super::{BenchError, Recorder, Suite};

pub const KEYGEN_SIZES: [usize; 4] = [512, 1024, 2048, 4096];
pub const MIN_KEYGEN_COUNT: u32 = 100;
pub const ENCDEC_SIZES: [usize; 4] = [1024, 2048, 4096, 8192];
pub const POLICY_SIZES: [usize; 10] = [100, 200, 300, 400, 500, 600, 700, 800, 900, 1000];
/// Interests per synthetic profile are drawn from 1 up to this.
pub const MAX_PROFILE_INTERESTS: usize = 20;
const INTEREST_POOL: usize = 200;

fn rng_for(seed: u64, stream: u64) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn check_sizes(suite: Suite, sizes: &[usize], supported: &[usize]) -> Result<(), BenchError> {
    if sizes.is_empty() {
        return Err(BenchError::NoParameters(suite));
    }
    match sizes.iter().find(|s| !supported.contains(s)) {
        Some(&bad) => Err(BenchError::Unsupported {
            suite,
            value: bad as u64,
            supported: format!("{supported:?}"),
        }),
        None => Ok(()),
    }
}

fn at_least(suite: Suite, what: &'static str, min: u64, got: u64) -> Result<(), BenchError> {
    if got < min {
        return Err(BenchError::TooFew {
            suite,
            what,
            min,
            got,
        });
    }
    Ok(())
}

/// `count` key pairs per size; each size draws from its own ChaCha stream.
pub fn bench_keygen(
    rec: &mut Recorder,
    sizes: &[usize],
    count: u32,
    seed: u64,
) -> Result<(), BenchError> {
    check_sizes(Suite::Keygen, sizes, &KEYGEN_SIZES)?;
    at_least(
        Suite::Keygen,
        "count",
        u64::from(MIN_KEYGEN_COUNT),
        u64::from(count),
    )?;
    for &bits in sizes {
        let mut rng = rng_for(seed, bits as u64);
        for t in 0..count {
            let kp = rec.time(
                Suite::Keygen,
                "keygen",
                bits as u64,
                t,
                u64::from(count - t - 1),
                || KeyPair::generate(bits, &mut rng),
            )?;
            black_box(kp?);
        }
    }
    Ok(())
}

/// Stable profiles with 1 to 20 interests each, drawn from a fixed pool.
pub fn synthetic_profiles(count: u32, seed: u64) -> Result<Vec<InterestProfile>, BenchError> {
    let pool: Vec<Interest> = (0..INTEREST_POOL)
        .map(|k| {
            Interest::new(
                format!("interest-{k:03}"),
                format!("category-{:02}", k % 20),
            )
        })
        .collect();
    let thresholds = ProfileThresholds {
        t_est: Some(1),
        t_evo: Some(1),
        ..ProfileThresholds::default()
    };
    let mut rng = rng_for(seed, 1);
    let mut out = Vec::with_capacity(count as usize);
    for i in 0..count {
        let m = rng.gen_range(1..=MAX_PROFILE_INTERESTS);
        let app_id = format!("bench-app-{i}");
        let mut map = AppInterestMap::new();
        map.insert(
            app_id.clone(),
            "bench",
            pool.choose_multiple(&mut rng, m).cloned(),
        );
        let app = AppRef::new(app_id, "bench", "bench-dev");
        let profile = InterestProfile::empty()
            .record_usage(&app, 1, 0, &map)?
            .derive(&map, &thresholds, 1);
        out.push(profile);
    }
    Ok(out)
}

/// Hashes every profile once under each scheme. The parameter is the
/// scheme's position in [`DigestScheme::ALL`].
pub fn bench_hash(
    rec: &mut Recorder,
    schemes: &[DigestScheme],
    profiles: u32,
    seed: u64,
) -> Result<(), BenchError> {
    if schemes.is_empty() {
        return Err(BenchError::NoParameters(Suite::Hash));
    }
    at_least(Suite::Hash, "profiles", 1, u64::from(profiles))?;
    let corpus = synthetic_profiles(profiles, seed)?;
    for &scheme in schemes {
        let index = DigestScheme::ALL
            .iter()
            .position(|s| *s == scheme)
            .unwrap_or(0) as u64;
        for (t, p) in corpus.iter().enumerate() {
            let t = t as u32;
            let digests = rec.time(
                Suite::Hash,
                scheme.name(),
                index,
                t,
                u64::from(profiles - t - 1),
                || p.hash_profile(scheme),
            )?;
            black_box(digests?);
        }
    }
    Ok(())
}

/// Recipient keys for the encryption suite; generation is not timed.
pub fn encdec_keys(sizes: &[usize], seed: u64) -> Result<Vec<KeyPair>, BenchError> {
    check_sizes(Suite::Encdec, sizes, &ENCDEC_SIZES)?;
    sizes
        .iter()
        .map(|&bits| {
            Ok(KeyPair::generate(
                bits,
                &mut rng_for(seed, 1_000 + bits as u64),
            )?)
        })
        .collect()
}

/// Ad payloads of 12 to 20 KiB; the ad id doubles as the payload stream.
pub fn synthetic_payloads(ads: u32, seed: u64) -> Vec<(u32, Vec<u8>)> {
    let mut rng = rng_for(seed, 2);
    (1..=ads)
        .map(|id| {
            (
                id,
                synth_payload(seed, id, rng.gen_range(MIN_PAYLOAD..=MAX_PAYLOAD)),
            )
        })
        .collect()
}

/// Encrypts then decrypts every ad under each key, timing both halves as
/// `encrypt` and `decrypt` series. Any mismatch aborts the suite.
pub fn bench_encdec(
    rec: &mut Recorder,
    keys: &[KeyPair],
    ads: u32,
    seed: u64,
) -> Result<(), BenchError> {
    let sizes: Vec<usize> = keys.iter().map(KeyPair::modulus_bits).collect();
    check_sizes(Suite::Encdec, &sizes, &ENCDEC_SIZES)?;
    at_least(Suite::Encdec, "ads", 1, u64::from(ads))?;
    let payloads = synthetic_payloads(ads, seed);
    for key in keys {
        let bits = key.modulus_bits();
        let mut rng = rng_for(seed, 3_000 + bits as u64);
        for (t, (ad_id, payload)) in payloads.iter().enumerate() {
            let t = t as u32;
            let left = u64::from(ads - t - 1);
            let env = rec.time(Suite::Encdec, "encrypt", bits as u64, t, left, || {
                hybrid_encrypt(&mut rng, payload, key.public())
            })??;
            let plain = rec.time(Suite::Encdec, "decrypt", bits as u64, t, left, || {
                hybrid_decrypt(&env, key)
            })??;
            if plain != *payload {
                return Err(BenchError::RoundTrip {
                    bits,
                    ad_id: *ad_id,
                });
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Placement {
    /// Root position drawn uniformly from 1..=n each trial.
    Random,
    /// Root position sweeps 1, 2, ..., n, 1, ... across trials.
    Sequential,
}

impl Placement {
    pub fn name(self) -> &'static str {
        match self {
            Placement::Random => "random",
            Placement::Sequential => "sequential",
        }
    }

    pub fn root(self, trial: u32, n: usize, rng: &mut impl Rng) -> usize {
        match self {
            Placement::Random => rng.gen_range(1..=n),
            Placement::Sequential => trial as usize % n + 1,
        }
    }
}

impl fmt::Display for Placement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Placement {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "random" => Ok(Placement::Random),
            "sequential" => Ok(Placement::Sequential),
            other => Err(format!("unknown placement `{other}` (random|sequential)")),
        }
    }
}

pub const BENCH_RESOURCE: &str = "ads";

/// A tree of `n` rules rooted at `root` (1-based) plus a context whose only
/// matching rule sits at the leaf of the longer chain, so traversal visits
/// `height()` nodes and ends in Allow.
///
/// If the left chain is at least as long as the right one, the root is a
/// wildcard ROUTE and the target is the last rule before it; otherwise the
/// root does not match and the target is the last rule overall.
pub fn worst_case(n: usize, root: usize, rng: &mut impl Rng) -> (Vec<Rule>, RequestContext, usize) {
    let requester = sha256(b"bench-requester");
    let mut seen: BTreeSet<Hash32> = BTreeSet::from([requester]);
    let mut rules: Vec<Rule> = (0..n)
        .map(|_| {
            let other = loop {
                let d = Hash32(rng.gen());
                if seen.insert(d) {
                    break d;
                }
            };
            let action = if rng.gen_bool(0.5) {
                Action::Allow
            } else {
                Action::Deny
            };
            Rule::new(Match::any().requester(other), action)
        })
        .collect();
    let target = if root >= 2 && root > n - root {
        rules[root - 1] = Rule::new(Match::any(), Action::RouteNext);
        root - 2
    } else {
        n - 1
    };
    rules[target] = Rule::new(Match::any().requester(requester), Action::Allow);
    let ctx = RequestContext::new(requester, TransactionType::Request, BENCH_RESOURCE);
    (rules, ctx, target)
}

/// One traversal per trial over a freshly drawn worst-case tree. Building
/// the tree is not timed.
pub fn bench_policy(
    rec: &mut Recorder,
    sizes: &[usize],
    placement: Placement,
    trials: u32,
    seed: u64,
) -> Result<(), BenchError> {
    check_sizes(Suite::Policy, sizes, &POLICY_SIZES)?;
    at_least(Suite::Policy, "trials", 1, u64::from(trials))?;
    let offset = match placement {
        Placement::Random => 10_000,
        Placement::Sequential => 20_000,
    };
    for &n in sizes {
        let mut rng = rng_for(seed, offset + n as u64);
        for t in 0..trials {
            let root = placement.root(t, n, &mut rng);
            let (rules, ctx, target) = worst_case(n, root, &mut rng);
            let tree = build_tree(rules, root)?;
            let res = rec.time(
                Suite::Policy,
                placement.name(),
                n as u64,
                t,
                u64::from(trials - t - 1),
                || tree.traverse(black_box(&ctx)),
            )?;
            if res.decision != Decision::Allow
                || res.matched_rule_index != Some(target)
                || res.path_length != tree.height()
            {
                return Err(BenchError::Traversal {
                    size: n,
                    root,
                    detail: format!(
                        "{res:?}, expected rule {target} after {} nodes",
                        tree.height()
                    ),
                });
            }
        }
    }
    Ok(())
}
