//! On-device interest profiling.
//!
//! A profile is a pure function of its activity log: [`InterestProfile::derive`]
//! replays the log chronologically, so deriving twice, or deriving a derived
//! profile, gives the same answer. Time is simulated whole hours.
//!
//! Lifecycle: `Empty -> Establishing -> Stable -> Evolving -> Stable`, where
//! the last two states may repeat each time a never-before-qualified app
//! crosses the evolution threshold.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use thiserror::Error;

use crate::cryptokit::DigestScheme;
use crate::wire::FieldWriter;

pub type Hours = u64;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ProfileError {
    #[error("app `{app}` has category `{category}` which is not in the marketplace taxonomy")]
    UnknownCategory { app: String, category: String },
    #[error("usage duration must be positive")]
    ZeroDuration,
    #[error("app id must not be empty")]
    EmptyAppId,
    #[error("demographic option must not be empty")]
    EmptyDemographic,
    #[error("app `{0}` is already in the apps profile")]
    DuplicateApp(String),
    #[error("invalid thresholds: {0}")]
    InvalidThresholds(&'static str),
    #[error("profile has no interests to upload")]
    NothingToUpload,
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct AppRef {
    pub app_id: String,
    pub category: String,
    pub developer_id: String,
}

impl AppRef {
    pub fn new(
        app_id: impl Into<String>,
        category: impl Into<String>,
        developer_id: impl Into<String>,
    ) -> Self {
        Self {
            app_id: app_id.into(),
            category: category.into(),
            developer_id: developer_id.into(),
        }
    }
}

/// Installed apps, keyed by app id.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct AppsProfile {
    entries: BTreeMap<String, AppRef>,
}

impl AppsProfile {
    pub fn insert(&mut self, app: AppRef) -> Result<(), ProfileError> {
        if app.app_id.is_empty() {
            return Err(ProfileError::EmptyAppId);
        }
        if self.entries.contains_key(&app.app_id) {
            return Err(ProfileError::DuplicateApp(app.app_id));
        }
        self.entries.insert(app.app_id.clone(), app);
        Ok(())
    }

    pub fn get(&self, app_id: &str) -> Option<&AppRef> {
        self.entries.get(app_id)
    }

    pub fn iter(&self) -> impl Iterator<Item = &AppRef> {
        self.entries.values()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Interest {
    pub id: String,
    pub category: String,
}

impl Interest {
    pub fn new(id: impl Into<String>, category: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            category: category.into(),
        }
    }

    /// Canonical bytes hashed on both the device and the ad server side.
    pub fn canonical_bytes(&self) -> Vec<u8> {
        let mut w = FieldWriter::new();
        w.field(self.id.as_bytes()).field(self.category.as_bytes());
        w.finish()
    }

    pub fn digest(&self, scheme: DigestScheme) -> Vec<u8> {
        scheme.digest(&self.canonical_bytes())
    }
}

impl fmt::Display for Interest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.id, self.category)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct Demographic {
    pub option: String,
    pub value: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct AppRow {
    category: String,
    interests: BTreeSet<Interest>,
}

/// Fixed app -> interests mapping. Apps missing from the map, or mapped to an
/// empty set, never contribute to a profile.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct AppInterestMap {
    rows: BTreeMap<String, AppRow>,
    categories: BTreeSet<String>,
}

static NO_INTERESTS: BTreeSet<Interest> = BTreeSet::new();

impl AppInterestMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(
        &mut self,
        app_id: impl Into<String>,
        category: impl Into<String>,
        interests: impl IntoIterator<Item = Interest>,
    ) {
        let category = category.into();
        self.categories.insert(category.clone());
        self.rows.insert(
            app_id.into(),
            AppRow {
                category,
                interests: interests.into_iter().collect(),
            },
        );
    }

    /// Adds marketplace categories that have no mapped app yet.
    pub fn add_categories<I, S>(&mut self, categories: I)
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        self.categories
            .extend(categories.into_iter().map(Into::into));
    }

    pub fn knows_category(&self, category: &str) -> bool {
        self.categories.contains(category)
    }

    pub fn categories(&self) -> &BTreeSet<String> {
        &self.categories
    }

    pub fn interests_for(&self, app_id: &str) -> &BTreeSet<Interest> {
        self.rows
            .get(app_id)
            .map_or(&NO_INTERESTS, |r| &r.interests)
    }

    pub fn category_of(&self, app_id: &str) -> Option<&str> {
        self.rows.get(app_id).map(|r| r.category.as_str())
    }

    pub fn contributes(&self, app_id: &str) -> bool {
        !self.interests_for(app_id).is_empty()
    }

    pub fn app_ids(&self) -> impl Iterator<Item = &str> {
        self.rows.keys().map(String::as_str)
    }

    /// Every interest any app maps to.
    pub fn all_interests(&self) -> BTreeSet<Interest> {
        self.rows
            .values()
            .flat_map(|r| r.interests.iter().cloned())
            .collect()
    }

    /// Parses `app_id<TAB>category<TAB>interest_id:interest_category[,...]`.
    /// Blank lines and `#` comments are skipped; an empty third field marks a
    /// non-contributing app.
    pub fn parse(text: &str) -> Result<Self, ProfileError> {
        let mut map = Self::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let trimmed = raw.trim_end_matches('\r');
            if trimmed.trim().is_empty() || trimmed.trim_start().starts_with('#') {
                continue;
            }
            let mut cols = trimmed.split('\t');
            let app_id = cols.next().unwrap_or("").trim();
            let category = cols.next().map(str::trim).unwrap_or("");
            let interests = cols.next().map(str::trim).unwrap_or("");
            if cols.next().is_some() {
                return Err(ProfileError::Parse {
                    line,
                    msg: "expected at most 3 tab-separated fields".into(),
                });
            }
            if app_id.is_empty() || category.is_empty() {
                return Err(ProfileError::Parse {
                    line,
                    msg: "app id and category are required".into(),
                });
            }
            let mut set = BTreeSet::new();
            for item in interests
                .split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty())
            {
                let (id, cat) = item.split_once(':').ok_or_else(|| ProfileError::Parse {
                    line,
                    msg: format!("interest `{item}` is not `id:category`"),
                })?;
                set.insert(Interest::new(id.trim(), cat.trim()));
            }
            map.insert(app_id, category, set);
        }
        Ok(map)
    }
}

/// Activity thresholds. `None` selects the adaptive rule: the establishment
/// window divided by the number of apps competing in the phase, floored at
/// one hour (24 h spread over `n` apps means `24/n` hours each).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ProfileThresholds {
    pub t_est: Option<Hours>,
    pub t_evo: Option<Hours>,
    pub establishment_window: Hours,
    pub evolution_window: Hours,
}

impl Default for ProfileThresholds {
    fn default() -> Self {
        Self {
            t_est: None,
            t_evo: None,
            establishment_window: 24,
            evolution_window: 72,
        }
    }
}

impl ProfileThresholds {
    pub fn validate(&self) -> Result<(), ProfileError> {
        if self.establishment_window == 0 || self.evolution_window == 0 {
            return Err(ProfileError::InvalidThresholds("windows must be positive"));
        }
        if self.t_est == Some(0) || self.t_evo == Some(0) {
            return Err(ProfileError::InvalidThresholds(
                "thresholds must be positive",
            ));
        }
        Ok(())
    }

    fn adaptive(&self, n_apps: usize) -> Hours {
        (self.establishment_window / n_apps.max(1) as Hours).max(1)
    }

    pub fn establishment_threshold(&self, n_apps: usize) -> Hours {
        self.t_est.unwrap_or_else(|| self.adaptive(n_apps))
    }

    pub fn evolution_threshold(&self, n_novel_apps: usize) -> Hours {
        self.t_evo.unwrap_or_else(|| self.adaptive(n_novel_apps))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ProfileState {
    Empty,
    Establishing,
    Stable,
    Evolving,
}

impl ProfileState {
    /// Edges of the lifecycle graph (self-loops included).
    pub fn can_move_to(self, next: ProfileState) -> bool {
        use ProfileState::*;
        self == next
            || matches!(
                (self, next),
                (Empty, Establishing)
                    | (Establishing, Stable)
                    | (Stable, Evolving)
                    | (Evolving, Stable)
            )
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UsageEntry {
    pub app: AppRef,
    pub duration: Hours,
    /// Hour at which the usage was recorded.
    pub at: Hours,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InterestProfile {
    interests: BTreeSet<Interest>,
    demographics: BTreeMap<String, String>,
    state: ProfileState,
    activity_log: Vec<UsageEntry>,
    qualified_apps: BTreeSet<String>,
    transitions: Vec<(Hours, ProfileState)>,
}

impl Default for InterestProfile {
    fn default() -> Self {
        Self::empty()
    }
}

impl InterestProfile {
    pub fn empty() -> Self {
        Self {
            interests: BTreeSet::new(),
            demographics: BTreeMap::new(),
            state: ProfileState::Empty,
            activity_log: Vec::new(),
            qualified_apps: BTreeSet::new(),
            transitions: Vec::new(),
        }
    }

    pub fn interests(&self) -> &BTreeSet<Interest> {
        &self.interests
    }

    pub fn state(&self) -> ProfileState {
        self.state
    }

    pub fn activity_log(&self) -> &[UsageEntry] {
        &self.activity_log
    }

    pub fn qualified_apps(&self) -> &BTreeSet<String> {
        &self.qualified_apps
    }

    /// State changes seen by the last [`derive`](Self::derive), with the hour
    /// each took effect. Empty until the first contributing usage.
    pub fn transitions(&self) -> &[(Hours, ProfileState)] {
        &self.transitions
    }

    pub fn demographics(&self) -> impl Iterator<Item = Demographic> + '_ {
        self.demographics.iter().map(|(o, v)| Demographic {
            option: o.clone(),
            value: v.clone(),
        })
    }

    /// Total logged usage of one app.
    pub fn usage_of(&self, app_id: &str) -> Hours {
        self.activity_log
            .iter()
            .filter(|e| e.app.app_id == app_id)
            .map(|e| e.duration)
            .sum()
    }

    /// Demographics are user-declared and stay on the device. Setting an
    /// option replaces its previous value.
    pub fn with_demographic(&self, option: &str, value: &str) -> Result<Self, ProfileError> {
        if option.trim().is_empty() {
            return Err(ProfileError::EmptyDemographic);
        }
        let mut next = self.clone();
        next.demographics
            .insert(option.to_string(), value.to_string());
        Ok(next)
    }

    pub fn record_usage(
        &self,
        app: &AppRef,
        duration: Hours,
        now: Hours,
        map: &AppInterestMap,
    ) -> Result<Self, ProfileError> {
        if duration == 0 {
            return Err(ProfileError::ZeroDuration);
        }
        if app.app_id.is_empty() {
            return Err(ProfileError::EmptyAppId);
        }
        if !map.knows_category(&app.category) {
            return Err(ProfileError::UnknownCategory {
                app: app.app_id.clone(),
                category: app.category.clone(),
            });
        }
        let mut next = self.clone();
        next.activity_log.push(UsageEntry {
            app: app.clone(),
            duration,
            at: now,
        });
        Ok(next)
    }

    /// Replays the activity log up to `now` and returns the resulting profile.
    pub fn derive(&self, map: &AppInterestMap, thresholds: &ProfileThresholds, now: Hours) -> Self {
        let mut entries: Vec<&UsageEntry> = self
            .activity_log
            .iter()
            .filter(|e| e.at <= now && map.contributes(&e.app.app_id))
            .collect();
        // stable: same-hour entries keep log order
        entries.sort_by_key(|e| e.at);

        let mut next = Self {
            interests: BTreeSet::new(),
            demographics: self.demographics.clone(),
            state: ProfileState::Empty,
            activity_log: self.activity_log.clone(),
            qualified_apps: BTreeSet::new(),
            transitions: Vec::new(),
        };
        let Some(first) = entries.first() else {
            return next;
        };

        let est_end = first.at + thresholds.establishment_window;
        let mut transitions = vec![(first.at, ProfileState::Establishing)];
        let mut usage: BTreeMap<&str, Hours> = BTreeMap::new();
        let mut qualified: BTreeSet<&str> = BTreeSet::new();
        let mut rest = entries.iter().peekable();

        while let Some(e) = rest.next_if(|e| e.at < est_end) {
            *usage.entry(e.app.app_id.as_str()).or_default() += e.duration;
            let t_est = thresholds.establishment_threshold(usage.len());
            qualified.extend(usage.iter().filter(|(_, u)| **u >= t_est).map(|(a, _)| *a));
        }

        let mut state = ProfileState::Establishing;
        if now >= est_end {
            state = ProfileState::Stable;
            transitions.push((est_end, state));
            let established = qualified.clone();
            let mut evolving_until: Option<Hours> = None;
            for e in rest {
                if let Some(end) = evolving_until.filter(|end| e.at >= *end) {
                    state = ProfileState::Stable;
                    transitions.push((end, state));
                    evolving_until = None;
                }
                *usage.entry(e.app.app_id.as_str()).or_default() += e.duration;
                let novel = usage.keys().filter(|a| !established.contains(*a)).count();
                let t_evo = thresholds.evolution_threshold(novel);
                let newly: Vec<&str> = usage
                    .iter()
                    .filter(|(a, u)| **u >= t_evo && !qualified.contains(*a))
                    .map(|(a, _)| *a)
                    .collect();
                if !newly.is_empty() {
                    qualified.extend(newly);
                    if evolving_until.is_none() {
                        state = ProfileState::Evolving;
                        transitions.push((e.at, state));
                        evolving_until = Some(e.at + thresholds.evolution_window);
                    }
                }
            }
            if let Some(end) = evolving_until.filter(|end| now >= *end) {
                state = ProfileState::Stable;
                transitions.push((end, state));
            }
        }

        next.state = state;
        next.transitions = transitions;
        next.interests = qualified
            .iter()
            .flat_map(|a| map.interests_for(a).iter().cloned())
            .collect();
        next.qualified_apps = qualified.into_iter().map(String::from).collect();
        next
    }

    /// One digest per interest, in interest order. Demographics are not hashed.
    pub fn hash_profile(&self, scheme: DigestScheme) -> Result<Vec<Vec<u8>>, ProfileError> {
        if self.interests.is_empty() {
            return Err(ProfileError::NothingToUpload);
        }
        Ok(self.interests.iter().map(|i| i.digest(scheme)).collect())
    }
}
