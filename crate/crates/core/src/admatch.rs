//! Keyword matching of ads to profile interests.
//!
//! Each interest's keyword list is one document of the corpus. An ad's keywords
//! are the query. Scores are the cosine between tf-idf weighted vectors, which
//! keeps them in `[0, 1]`; [`raw_score`] gives the unnormalized tf-idf sum.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use thiserror::Error;

use crate::profile::Interest;

/// Scores closer than this are treated as tied.
pub const TIE_EPSILON: f64 = 1e-12;

pub const MIN_PAYLOAD: usize = 12 * 1024;
pub const MAX_PAYLOAD: usize = 20 * 1024;

#[derive(Debug, Error, PartialEq)]
pub enum MatchError {
    #[error("taxonomy is empty")]
    EmptyTaxonomy,
    #[error("interest {0} has no keywords")]
    NoKeywords(String),
    #[error("ad id {0} appears more than once")]
    DuplicateAd(u32),
    #[error("unknown category `{0}`")]
    UnknownCategory(String),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

#[derive(Clone, PartialEq, Eq)]
pub struct Ad {
    pub ad_id: u32,
    pub advertiser_id: String,
    pub keywords: Vec<String>,
    pub payload: Vec<u8>,
}

impl std::fmt::Debug for Ad {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Ad")
            .field("ad_id", &self.ad_id)
            .field("advertiser_id", &self.advertiser_id)
            .field("keywords", &self.keywords)
            .field("payload_len", &self.payload.len())
            .finish()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InterestKeywords {
    pub interest: Interest,
    pub keywords: Vec<String>,
}

impl InterestKeywords {
    pub fn new<I, S>(interest: Interest, keywords: I) -> Result<Self, MatchError>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let keywords = normalize(keywords);
        if keywords.is_empty() {
            return Err(MatchError::NoKeywords(interest.to_string()));
        }
        Ok(Self { interest, keywords })
    }
}

/// Lowercases and trims; empty keywords are dropped, duplicates kept (they
/// count towards term frequency).
pub fn normalize<I, S>(keywords: I) -> Vec<String>
where
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    keywords
        .into_iter()
        .map(|k| k.as_ref().trim().to_lowercase())
        .filter(|k| !k.is_empty())
        .collect()
}

fn term_counts(keywords: &[String]) -> BTreeMap<&str, f64> {
    let mut tf = BTreeMap::new();
    for k in keywords {
        *tf.entry(k.as_str()).or_insert(0.0) += 1.0;
    }
    tf
}

/// Document frequencies over a set of interest documents.
#[derive(Debug, Clone)]
pub struct Corpus {
    docs: usize,
    df: HashMap<String, usize>,
}

impl Corpus {
    pub fn new(taxonomy: &[InterestKeywords]) -> Result<Self, MatchError> {
        if taxonomy.is_empty() {
            return Err(MatchError::EmptyTaxonomy);
        }
        let mut df = HashMap::new();
        for doc in taxonomy {
            let terms: BTreeSet<&String> = doc.keywords.iter().collect();
            for t in terms {
                *df.entry(t.clone()).or_insert(0) += 1;
            }
        }
        Ok(Self {
            docs: taxonomy.len(),
            df,
        })
    }

    /// `ln(N / df)`; terms outside the corpus weigh nothing.
    pub fn idf(&self, term: &str) -> f64 {
        match self.df.get(term) {
            Some(&df) => (self.docs as f64 / df as f64).ln(),
            None => 0.0,
        }
    }

    pub fn len(&self) -> usize {
        self.docs
    }

    pub fn is_empty(&self) -> bool {
        self.docs == 0
    }
}

/// Cosine similarity of the tf-idf vectors of `ad_keywords` (query) and
/// `interest_keywords` (document). Both inputs must already be normalized.
pub fn tfidf_score<'a>(
    ad_keywords: &'a [String],
    interest_keywords: &'a [String],
    corpus: &Corpus,
) -> f64 {
    let q = term_counts(ad_keywords);
    let d = term_counts(interest_keywords);
    let weight = |tf: BTreeMap<&'a str, f64>| -> BTreeMap<&'a str, f64> {
        tf.into_iter()
            .map(|(t, c)| (t, c * corpus.idf(t)))
            .collect()
    };
    let (qw, dw) = (weight(q), weight(d));
    let dot: f64 = qw
        .iter()
        .map(|(t, w)| w * dw.get(t).copied().unwrap_or(0.0))
        .sum();
    let norm = |v: &BTreeMap<&str, f64>| v.values().map(|w| w * w).sum::<f64>().sqrt();
    let denom = norm(&qw) * norm(&dw);
    if dot <= 0.0 || denom == 0.0 {
        return 0.0;
    }
    (dot / denom).min(1.0)
}

/// Unnormalized score: sum over distinct query terms of `tf(t, doc) * idf(t)`.
pub fn raw_score(ad_keywords: &[String], interest_keywords: &[String], corpus: &Corpus) -> f64 {
    let d = term_counts(interest_keywords);
    let q: BTreeSet<&str> = ad_keywords.iter().map(String::as_str).collect();
    q.iter()
        .map(|t| d.get(t).copied().unwrap_or(0.0) * corpus.idf(t))
        .sum()
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MatchResult {
    pub assignments: BTreeMap<Interest, Vec<u32>>,
    pub scores: BTreeMap<(u32, Interest), f64>,
    /// Ads that scored zero against every interest.
    pub unassigned: Vec<u32>,
}

impl MatchResult {
    pub fn interests_of(&self, ad_id: u32) -> Vec<&Interest> {
        self.assignments
            .iter()
            .filter(|(_, ads)| ads.contains(&ad_id))
            .map(|(i, _)| i)
            .collect()
    }
}

/// Assigns every ad to its best-scoring interest, or to all interests tied
/// for best.
pub fn assign_ads(ads: &[Ad], taxonomy: &[InterestKeywords]) -> Result<MatchResult, MatchError> {
    let corpus = Corpus::new(taxonomy)?;
    let mut seen = BTreeSet::new();
    let mut result = MatchResult::default();
    for ad in ads {
        if !seen.insert(ad.ad_id) {
            return Err(MatchError::DuplicateAd(ad.ad_id));
        }
        let query = normalize(&ad.keywords);
        let row: Vec<f64> = taxonomy
            .iter()
            .map(|doc| tfidf_score(&query, &doc.keywords, &corpus))
            .collect();
        for (doc, s) in taxonomy.iter().zip(&row) {
            result.scores.insert((ad.ad_id, doc.interest.clone()), *s);
        }
        let best = row.iter().copied().fold(0.0, f64::max);
        if best <= 0.0 {
            result.unassigned.push(ad.ad_id);
            continue;
        }
        for (doc, s) in taxonomy.iter().zip(&row) {
            if best - s <= TIE_EPSILON {
                let ids = result.assignments.entry(doc.interest.clone()).or_default();
                if !ids.contains(&ad.ad_id) {
                    ids.push(ad.ad_id);
                }
            }
        }
    }
    Ok(result)
}

/// Token sets of marketplace categories, used for direct category matching.
#[derive(Debug, Clone, Default)]
pub struct CategoryMap {
    tokens: BTreeMap<String, BTreeSet<String>>,
}

impl CategoryMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert<I, S>(&mut self, category: impl Into<String>, tokens: I)
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        self.tokens
            .insert(category.into(), normalize(tokens).into_iter().collect());
    }

    /// Registers a category tokenized from its own name ("Games & Arcade" ->
    /// {games, arcade}).
    pub fn insert_name(&mut self, category: &str) {
        let toks: Vec<&str> = category
            .split(|c: char| !c.is_alphanumeric())
            .filter(|t| !t.is_empty())
            .collect();
        self.insert(category, toks);
    }

    pub fn tokens(&self, category: &str) -> Option<&BTreeSet<String>> {
        self.tokens.get(category)
    }
}

pub fn jaccard_category_match(
    app_category: &str,
    interest_category: &str,
    category_map: &CategoryMap,
) -> Result<f64, MatchError> {
    let lookup = |c: &str| {
        category_map
            .tokens(c)
            .ok_or_else(|| MatchError::UnknownCategory(c.to_string()))
    };
    let (a, b) = (lookup(app_category)?, lookup(interest_category)?);
    let union = a.union(b).count();
    if union == 0 {
        return Ok(1.0);
    }
    Ok(a.intersection(b).count() as f64 / union as f64)
}

fn split_keywords(field: &str) -> Vec<String> {
    normalize(field.split(','))
}

/// Parses `interest_id<TAB>category<TAB>kw1,kw2,...`.
pub fn parse_taxonomy(text: &str) -> Result<Vec<InterestKeywords>, MatchError> {
    let mut out = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        if raw.trim().is_empty() || raw.trim_start().starts_with('#') {
            continue;
        }
        let cols: Vec<&str> = raw.trim_end_matches('\r').split('\t').collect();
        let [id, category, kws] = cols[..] else {
            return Err(MatchError::Parse {
                line,
                msg: "expected 3 tab-separated fields".into(),
            });
        };
        let ik = InterestKeywords::new(
            Interest::new(id.trim(), category.trim()),
            split_keywords(kws),
        )
        .map_err(|e| MatchError::Parse {
            line,
            msg: e.to_string(),
        })?;
        out.push(ik);
    }
    Ok(out)
}

/// Deterministic ad payload: the ad id selects the ChaCha stream.
pub fn synth_payload(seed: u64, ad_id: u32, len: usize) -> Vec<u8> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(u64::from(ad_id));
    let mut buf = vec![0u8; len];
    rng.fill(buf.as_mut_slice());
    buf
}

/// Parses `ad_id<TAB>advertiser_id<TAB>payload_size_bytes<TAB>kw1,kw2,...`
/// and synthesizes payloads from `seed`.
pub fn parse_ads_manifest(text: &str, seed: u64) -> Result<Vec<Ad>, MatchError> {
    let mut out = Vec::new();
    let mut seen = BTreeSet::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        if raw.trim().is_empty() || raw.trim_start().starts_with('#') {
            continue;
        }
        let err = |msg: &str| MatchError::Parse {
            line,
            msg: msg.to_string(),
        };
        let cols: Vec<&str> = raw.trim_end_matches('\r').split('\t').collect();
        let [id, advertiser, size, kws] = cols[..] else {
            return Err(err("expected 4 tab-separated fields"));
        };
        let ad_id: u32 = id
            .trim()
            .parse()
            .map_err(|_| err("ad id must be an integer"))?;
        let size: usize = size
            .trim()
            .parse()
            .map_err(|_| err("payload size must be an integer"))?;
        if size == 0 {
            return Err(err("payload size must be positive"));
        }
        if !seen.insert(ad_id) {
            return Err(MatchError::DuplicateAd(ad_id));
        }
        out.push(Ad {
            ad_id,
            advertiser_id: advertiser.trim().to_string(),
            keywords: split_keywords(kws),
            payload: synth_payload(seed, ad_id, size),
        });
    }
    Ok(out)
}

pub fn format_ads_manifest(ads: &[Ad]) -> String {
    ads.iter()
        .map(|a| {
            format!(
                "{}\t{}\t{}\t{}\n",
                a.ad_id,
                a.advertiser_id,
                a.payload.len(),
                a.keywords.join(",")
            )
        })
        .collect()
}

/// Synthetic corpus: `count` ads spread round-robin over advertiser groups
/// `A1..A10`, each drawing 2-4 keywords from one random interest, with
/// 12-20 KiB payloads. Ad ids start at 1.
pub fn synthetic_ads(
    count: u32,
    taxonomy: &[InterestKeywords],
    seed: u64,
) -> Result<Vec<Ad>, MatchError> {
    if taxonomy.is_empty() {
        return Err(MatchError::EmptyTaxonomy);
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut ads = Vec::with_capacity(count as usize);
    for ad_id in 1..=count {
        let doc = &taxonomy[rng.gen_range(0..taxonomy.len())];
        let distinct: Vec<&String> = BTreeSet::from_iter(&doc.keywords).into_iter().collect();
        let k = rng.gen_range(2..=4).min(distinct.len());
        let kws: Vec<String> = distinct
            .choose_multiple(&mut rng, k)
            .map(|s| (*s).clone())
            .collect();
        let size = rng.gen_range(MIN_PAYLOAD..=MAX_PAYLOAD);
        ads.push(Ad {
            ad_id,
            advertiser_id: format!("A{}", (ad_id - 1) % 10 + 1),
            keywords: kws,
            payload: synth_payload(seed, ad_id, size),
        });
    }
    Ok(ads)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn kw(words: &[&str]) -> Vec<String> {
        normalize(words)
    }

    fn doc(id: &str, words: &[&str]) -> InterestKeywords {
        InterestKeywords::new(Interest::new(id, "cat"), words).unwrap()
    }

    fn ad(id: u32, words: &[&str]) -> Ad {
        Ad {
            ad_id: id,
            advertiser_id: "adv".into(),
            keywords: kw(words),
            payload: vec![0; 8],
        }
    }

    fn three_docs() -> Vec<InterestKeywords> {
        vec![
            doc("gambling", &["poker", "casino", "cards"]),
            doc("boardgames", &["cards", "chess", "dice"]),
            doc("travel", &["hotel", "flight", "casino"]),
        ]
    }

    #[test]
    fn disjoint_keywords_score_zero() {
        let docs = three_docs();
        let c = Corpus::new(&docs).unwrap();
        assert_eq!(tfidf_score(&kw(&["bicycle"]), &docs[0].keywords, &c), 0.0);
        assert_eq!(tfidf_score(&[], &docs[0].keywords, &c), 0.0);
    }

    #[test]
    fn self_similarity_is_one() {
        let docs = three_docs();
        let c = Corpus::new(&docs).unwrap();
        let s = tfidf_score(&kw(&["chess", "dice"]), &kw(&["chess", "dice"]), &c);
        assert!((s - 1.0).abs() < 1e-12);
    }

    #[test]
    fn hand_computed_scores() {
        // N = 3. df: poker 1, casino 2, cards 2.
        let docs = three_docs();
        let c = Corpus::new(&docs).unwrap();
        let q = kw(&["poker", "casino"]);
        let (ln3, ln32) = (3f64.ln(), (1.5f64).ln());

        let raw = raw_score(&q, &docs[0].keywords, &c);
        assert!((raw - (ln3 + ln32)).abs() < 1e-12);
        assert!((raw_score(&q, &docs[2].keywords, &c) - ln32).abs() < 1e-12);
        assert_eq!(raw_score(&q, &docs[1].keywords, &c), 0.0);

        // query (ln3, ln1.5), doc0 (ln3, ln1.5, ln1.5)
        let dot = ln3 * ln3 + ln32 * ln32;
        let cos0 =
            dot / ((ln3 * ln3 + ln32 * ln32).sqrt() * (ln3 * ln3 + 2.0 * ln32 * ln32).sqrt());
        assert!((tfidf_score(&q, &docs[0].keywords, &c) - cos0).abs() < 1e-12);
    }

    #[test]
    fn ubiquitous_term_has_zero_idf() {
        let docs = vec![doc("a", &["x", "y"]), doc("b", &["x", "z"])];
        let c = Corpus::new(&docs).unwrap();
        assert_eq!(c.idf("x"), 0.0);
        assert_eq!(tfidf_score(&kw(&["x"]), &docs[0].keywords, &c), 0.0);
    }

    #[test]
    fn keywords_are_normalized() {
        assert_eq!(
            kw(&["  Poker ", "CASINO", "", "poker"]),
            vec!["poker", "casino", "poker"]
        );
        assert!(InterestKeywords::new(Interest::new("x", "c"), [" "]).is_err());
    }

    #[test]
    fn single_candidate_gets_the_ad() {
        let docs = vec![doc("g", &["poker", "casino"])];
        let r = assign_ads(&[ad(1, &["poker"])], &docs).unwrap();
        // a single document makes every idf zero
        assert_eq!(r.unassigned, vec![1]);

        let docs = vec![doc("g", &["poker"]), doc("h", &["hiking"])];
        let r = assign_ads(&[ad(1, &["poker"])], &docs).unwrap();
        assert_eq!(r.assignments[&docs[0].interest], vec![1]);
        assert_eq!(r.interests_of(1), vec![&docs[0].interest]);
    }

    #[test]
    fn ties_go_to_every_tied_interest() {
        let docs = vec![
            doc("a", &["poker", "casino"]),
            doc("b", &["poker", "casino"]),
            doc("c", &["hiking"]),
        ];
        let r = assign_ads(&[ad(7, &["casino"])], &docs).unwrap();
        assert_eq!(r.interests_of(7).len(), 2);
    }

    #[test]
    fn empty_inputs() {
        assert_eq!(
            assign_ads(&[], &three_docs()).unwrap(),
            MatchResult::default()
        );
        assert_eq!(
            assign_ads(&[ad(1, &["x"])], &[]),
            Err(MatchError::EmptyTaxonomy)
        );
        assert_eq!(
            assign_ads(&[ad(1, &["x"]), ad(1, &["y"])], &three_docs()),
            Err(MatchError::DuplicateAd(1))
        );
    }

    #[test]
    fn jaccard_examples() {
        let mut m = CategoryMap::new();
        m.insert("ga", ["games", "arcade"]);
        m.insert("gp", ["games", "puzzle"]);
        m.insert("news", ["news"]);
        assert_eq!(jaccard_category_match("ga", "ga", &m), Ok(1.0));
        assert_eq!(jaccard_category_match("ga", "news", &m), Ok(0.0));
        assert!((jaccard_category_match("ga", "gp", &m).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(
            jaccard_category_match("ga", "sports", &m),
            Err(MatchError::UnknownCategory("sports".into()))
        );
        m.insert_name("Games & Arcade");
        assert_eq!(m.tokens("Games & Arcade").unwrap().len(), 2);
    }

    #[test]
    fn parses_files() {
        let tax = parse_taxonomy("# id\tcat\tkw\ngambling\tGames\tPoker, casino\n").unwrap();
        assert_eq!(tax[0].keywords, vec!["poker", "casino"]);
        assert!(parse_taxonomy("x\ty\n").is_err());

        let ads = parse_ads_manifest("3\tA1\t100\tpoker\n4\tA2\t50\tchess,dice\n", 9).unwrap();
        assert_eq!(ads[0].payload.len(), 100);
        assert_eq!(ads[1].keywords.len(), 2);
        assert_eq!(
            ads,
            parse_ads_manifest(&format_ads_manifest(&ads), 9).unwrap()
        );
        assert!(parse_ads_manifest("3\tA1\t10\tx\n3\tA1\t10\ty\n", 1).is_err());
    }

    #[test]
    fn synthetic_corpus_shape() {
        let ads = synthetic_ads(1000, &three_docs(), 5).unwrap();
        assert_eq!(ads.len(), 1000);
        assert!(ads
            .iter()
            .all(|a| (MIN_PAYLOAD..=MAX_PAYLOAD).contains(&a.payload.len())
                && !a.keywords.is_empty()));
        let groups: BTreeSet<&str> = ads.iter().map(|a| a.advertiser_id.as_str()).collect();
        assert_eq!(groups.len(), 10);
        assert_eq!(ads, synthetic_ads(1000, &three_docs(), 5).unwrap());
    }

    fn arb_words() -> impl Strategy<Value = Vec<String>> {
        prop::collection::vec(
            prop::sample::select(vec!["a", "b", "c", "d", "e", "f", "g", "h"]),
            1..6,
        )
        .prop_map(|v| v.into_iter().map(String::from).collect())
    }

    proptest! {
        #[test]
        fn scores_stay_in_unit_interval(docs in prop::collection::vec(arb_words(), 1..8), q in arb_words()) {
            let tax: Vec<_> = docs.iter().enumerate()
                .map(|(i, w)| InterestKeywords::new(Interest::new(format!("i{i}"), "c"), w).unwrap())
                .collect();
            let c = Corpus::new(&tax).unwrap();
            for d in &tax {
                let s = tfidf_score(&q, &d.keywords, &c);
                prop_assert!((0.0..=1.0).contains(&s));
            }
        }

        #[test]
        fn payload_never_changes_assignments(
            docs in prop::collection::vec(arb_words(), 2..6),
            queries in prop::collection::vec(arb_words(), 1..6),
            size in 1usize..4096,
        ) {
            let tax: Vec<_> = docs.iter().enumerate()
                .map(|(i, w)| InterestKeywords::new(Interest::new(format!("i{i}"), "c"), w).unwrap())
                .collect();
            let mut ads: Vec<Ad> = queries.iter().enumerate().map(|(i, q)| Ad {
                ad_id: i as u32, advertiser_id: "x".into(), keywords: q.clone(), payload: vec![1],
            }).collect();
            let before = assign_ads(&ads, &tax).unwrap();
            for a in &mut ads { a.payload = vec![7; size]; }
            prop_assert_eq!(before, assign_ads(&ads, &tax).unwrap());
        }

        #[test]
        fn every_scoring_ad_is_assigned(
            docs in prop::collection::vec(arb_words(), 2..6),
            queries in prop::collection::vec(arb_words(), 1..6),
        ) {
            let tax: Vec<_> = docs.iter().enumerate()
                .map(|(i, w)| InterestKeywords::new(Interest::new(format!("i{i}"), "c"), w).unwrap())
                .collect();
            let ads: Vec<Ad> = queries.iter().enumerate().map(|(i, q)| Ad {
                ad_id: i as u32, advertiser_id: "x".into(), keywords: q.clone(), payload: vec![],
            }).collect();
            let r = assign_ads(&ads, &tax).unwrap();
            for a in &ads {
                let assigned = !r.interests_of(a.ad_id).is_empty();
                prop_assert!(assigned != r.unassigned.contains(&a.ad_id));
            }
        }
    }
}
