//! Access-policy trees.
//!
//! A tree is built from an ordered rule list and a root position `p`
//! (1-based): rule `p` is the root, rules before it hang off the root's left
//! child as a right-linked chain, and rules after it form the root's right
//! chain. Traversal from a node:
//!
//! * match with Allow/Deny: record the verdict, go left;
//! * match with RouteNext: go left if there is a left child, else right;
//! * no match: go right;
//!
//! and stops when the chosen child is absent. The last recorded verdict wins;
//! with none, the request is denied.

use std::collections::BTreeSet;
use std::fmt;
use std::sync::{Arc, Mutex};

use arc_swap::ArcSwap;
use thiserror::Error;

use crate::cryptokit::{sha256, Hash32};
use crate::ledger::TransactionType;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PolicyError {
    #[error("policy has no rules")]
    NoRules,
    #[error("root position {position} outside 1..={len}")]
    RootOutOfRange { position: usize, len: usize },
    #[error("rule index {index} outside 0..={len}")]
    EditOutOfRange { index: usize, len: usize },
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Action {
    Allow,
    Deny,
    RouteNext,
}

impl Action {
    fn verdict(self) -> Option<Decision> {
        match self {
            Action::Allow => Some(Decision::Allow),
            Action::Deny => Some(Decision::Deny),
            Action::RouteNext => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Decision {
    Allow,
    Deny,
}

impl fmt::Display for Decision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Decision::Allow => "allow",
            Decision::Deny => "deny",
        })
    }
}

/// Conjunction of whitelists. An empty whitelist accepts anything, so the
/// default matcher is a wildcard.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Match {
    pub requesters: BTreeSet<Hash32>,
    pub tx_types: BTreeSet<TransactionType>,
    pub resources: BTreeSet<String>,
}

impl Match {
    pub fn any() -> Self {
        Self::default()
    }

    pub fn requester(mut self, digest: Hash32) -> Self {
        self.requesters.insert(digest);
        self
    }

    pub fn tx_type(mut self, t: TransactionType) -> Self {
        self.tx_types.insert(t);
        self
    }

    pub fn resource(mut self, r: impl Into<String>) -> Self {
        self.resources.insert(r.into());
        self
    }

    pub fn accepts(&self, ctx: &RequestContext) -> bool {
        (self.requesters.is_empty() || self.requesters.contains(&ctx.requester))
            && (self.tx_types.is_empty() || self.tx_types.contains(&ctx.tx_type))
            && (self.resources.is_empty() || self.resources.contains(&ctx.resource))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rule {
    pub matcher: Match,
    pub action: Action,
    /// Free-form operation label carried alongside the action, e.g. "quota".
    pub op_tag: Option<String>,
}

impl Rule {
    pub fn new(matcher: Match, action: Action) -> Self {
        Self {
            matcher,
            action,
            op_tag: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RequestContext {
    /// Digest of the requesting user, app or node id.
    pub requester: Hash32,
    pub tx_type: TransactionType,
    pub resource: String,
}

impl RequestContext {
    pub fn new(requester: Hash32, tx_type: TransactionType, resource: impl Into<String>) -> Self {
        Self {
            requester,
            tx_type,
            resource: resource.into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TraversalResult {
    pub decision: Decision,
    pub matched_rule_index: Option<usize>,
    pub path_length: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Node {
    left: Option<usize>,
    right: Option<usize>,
}

/// Arena tree; node `i` holds rule `i`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PolicyTree {
    rules: Vec<Rule>,
    nodes: Vec<Node>,
    root: usize,
}

pub fn build_tree(rules: Vec<Rule>, root_position: usize) -> Result<PolicyTree, PolicyError> {
    let n = rules.len();
    if n == 0 {
        return Err(PolicyError::NoRules);
    }
    if !(1..=n).contains(&root_position) {
        return Err(PolicyError::RootOutOfRange {
            position: root_position,
            len: n,
        });
    }
    let root = root_position - 1;
    let mut nodes = vec![
        Node {
            left: None,
            right: None
        };
        n
    ];
    if root > 0 {
        nodes[root].left = Some(0);
    }
    for i in 0..root.saturating_sub(1) {
        nodes[i].right = Some(i + 1);
    }
    if root + 1 < n {
        nodes[root].right = Some(root + 1);
    }
    for i in root + 1..n - 1 {
        nodes[i].right = Some(i + 1);
    }
    Ok(PolicyTree { rules, nodes, root })
}

impl PolicyTree {
    pub fn rules(&self) -> &[Rule] {
        &self.rules
    }

    pub fn len(&self) -> usize {
        self.rules.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rules.is_empty()
    }

    pub fn root_position(&self) -> usize {
        self.root + 1
    }

    pub fn root_index(&self) -> usize {
        self.root
    }

    pub fn left(&self, i: usize) -> Option<usize> {
        self.nodes[i].left
    }

    pub fn right(&self, i: usize) -> Option<usize> {
        self.nodes[i].right
    }

    /// Nodes reachable from `start`, counted by walking both children.
    pub fn subtree_size(&self, start: Option<usize>) -> usize {
        let mut stack: Vec<usize> = start.into_iter().collect();
        let mut count = 0;
        while let Some(i) = stack.pop() {
            count += 1;
            stack.extend(self.nodes[i].left);
            stack.extend(self.nodes[i].right);
        }
        count
    }

    /// Levels on the longest root-to-leaf path.
    pub fn height(&self) -> usize {
        let left = self.root;
        let right = self.len() - self.root - 1;
        1 + left.max(right)
    }

    pub fn traverse(&self, ctx: &RequestContext) -> TraversalResult {
        let mut verdict: Option<(Decision, usize)> = None;
        let mut path = 0;
        let mut cur = Some(self.root);
        while let Some(i) = cur {
            path += 1;
            let rule = &self.rules[i];
            let node = self.nodes[i];
            cur = if rule.matcher.accepts(ctx) {
                match rule.action.verdict() {
                    Some(d) => {
                        verdict = Some((d, i));
                        node.left
                    }
                    None => node.left.or(node.right),
                }
            } else {
                node.right
            };
        }
        TraversalResult {
            decision: verdict.map_or(Decision::Deny, |(d, _)| d),
            matched_rule_index: verdict.map(|(_, i)| i),
            path_length: path,
        }
    }
}

/// Decision by scanning rule ranges directly, without the tree.
pub fn linear_scan(
    rules: &[Rule],
    root_position: usize,
    ctx: &RequestContext,
) -> (Decision, Option<usize>) {
    let root = root_position - 1;
    let first_verdict = |range: std::ops::Range<usize>| {
        range
            .filter(|&i| rules[i].matcher.accepts(ctx))
            .find_map(|i| rules[i].action.verdict().map(|d| (d, i)))
    };
    let below = 0..root;
    let above = root + 1..rules.len();
    let found = if rules[root].matcher.accepts(ctx) {
        match rules[root].action.verdict() {
            Some(d) => first_verdict(below).or(Some((d, root))),
            None if root > 0 => first_verdict(below),
            None => first_verdict(above),
        }
    } else {
        first_verdict(above)
    };
    match found {
        Some((d, i)) => (d, Some(i)),
        None => (Decision::Deny, None),
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PolicyEdit {
    Insert { index: usize, rule: Rule },
    Remove { index: usize },
    SetRoot { position: usize },
}

/// A published tree with its version.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PublishedPolicy {
    pub version: u64,
    pub tree: PolicyTree,
}

/// Pending edits made against `base_version`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PolicyDraft {
    pub base_version: u64,
    pub rules: Vec<Rule>,
    pub root_position: usize,
}

impl PolicyDraft {
    pub fn apply(&mut self, edit: PolicyEdit) -> Result<(), PolicyError> {
        let len = self.rules.len();
        match edit {
            PolicyEdit::Insert { index, rule } => {
                if index > len {
                    return Err(PolicyError::EditOutOfRange { index, len });
                }
                self.rules.insert(index, rule);
                // keep the same rule at the root
                if index < self.root_position {
                    self.root_position += 1;
                }
                self.root_position = self.root_position.max(1);
            }
            PolicyEdit::Remove { index } => {
                if index >= len {
                    return Err(PolicyError::EditOutOfRange { index, len });
                }
                self.rules.remove(index);
                if index + 1 < self.root_position {
                    self.root_position -= 1;
                }
                self.root_position = self.root_position.clamp(1, self.rules.len().max(1));
            }
            PolicyEdit::SetRoot { position } => {
                if !(1..=len).contains(&position) {
                    return Err(PolicyError::RootOutOfRange { position, len });
                }
                self.root_position = position;
            }
        }
        Ok(())
    }
}

/// Single-owner multi-version document: edits go to the modify copy, readers
/// use the read copy until [`publish`](Self::publish).
#[derive(Debug, Clone)]
pub struct PolicyDocument {
    read: Arc<PublishedPolicy>,
    modify: PolicyDraft,
}

impl PolicyDocument {
    pub fn new(rules: Vec<Rule>, root_position: usize) -> Result<Self, PolicyError> {
        let tree = build_tree(rules.clone(), root_position)?;
        Ok(Self {
            read: Arc::new(PublishedPolicy { version: 1, tree }),
            modify: PolicyDraft {
                base_version: 1,
                rules,
                root_position,
            },
        })
    }

    pub fn version(&self) -> u64 {
        self.read.version
    }

    pub fn read_copy(&self) -> &Arc<PublishedPolicy> {
        &self.read
    }

    pub fn modify_copy(&self) -> &PolicyDraft {
        &self.modify
    }

    pub fn traverse(&self, ctx: &RequestContext) -> TraversalResult {
        self.read.tree.traverse(ctx)
    }

    pub fn update_policy(&self, edit: PolicyEdit) -> Result<Self, PolicyError> {
        let mut next = self.clone();
        next.modify.apply(edit)?;
        Ok(next)
    }

    pub fn publish(&self) -> Result<Self, PolicyError> {
        let tree = build_tree(self.modify.rules.clone(), self.modify.root_position)?;
        let version = self.read.version + 1;
        Ok(Self {
            read: Arc::new(PublishedPolicy { version, tree }),
            modify: PolicyDraft {
                base_version: version,
                ..self.modify.clone()
            },
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PublishReport {
    pub version: u64,
    /// Set when the draft was based on an older version than the one it
    /// replaced; the publish still happens (last writer wins).
    pub stale_base: Option<u64>,
}

/// Shared policy for concurrent readers. Reads never block; publishes
/// serialize on a writer lock and swap the whole snapshot.
#[derive(Debug)]
pub struct SharedPolicy {
    current: ArcSwap<PublishedPolicy>,
    writer: Mutex<()>,
}

impl SharedPolicy {
    pub fn new(rules: Vec<Rule>, root_position: usize) -> Result<Self, PolicyError> {
        let tree = build_tree(rules, root_position)?;
        Ok(Self {
            current: ArcSwap::from_pointee(PublishedPolicy { version: 1, tree }),
            writer: Mutex::new(()),
        })
    }

    pub fn snapshot(&self) -> Arc<PublishedPolicy> {
        self.current.load_full()
    }

    /// Runs against a single snapshot and reports which version answered.
    pub fn traverse(&self, ctx: &RequestContext) -> (u64, TraversalResult) {
        let snap = self.current.load();
        (snap.version, snap.tree.traverse(ctx))
    }

    pub fn draft(&self) -> PolicyDraft {
        let snap = self.current.load();
        PolicyDraft {
            base_version: snap.version,
            rules: snap.tree.rules().to_vec(),
            root_position: snap.tree.root_position(),
        }
    }

    pub fn publish(&self, draft: PolicyDraft) -> Result<PublishReport, PolicyError> {
        let tree = build_tree(draft.rules, draft.root_position)?;
        let _guard = self.writer.lock().unwrap_or_else(|e| e.into_inner());
        let prev = self.current.load().version;
        let version = prev + 1;
        self.current
            .store(Arc::new(PublishedPolicy { version, tree }));
        Ok(PublishReport {
            version,
            stale_base: (draft.base_version != prev).then_some(draft.base_version),
        })
    }
}

/// Parses `index<TAB>field=value[,field=value]<TAB>ALLOW|DENY|ROUTE[<TAB>op]`.
///
/// Fields are `requester`, `tx` and `resource`; repeating a field widens its
/// whitelist. A requester is a 64-digit hex digest, or `id:<plain>` which is
/// hashed with SHA-256 on load. `*` in the condition column is a wildcard.
/// Rules are ordered by index.
pub fn parse_rules(text: &str) -> Result<Vec<Rule>, PolicyError> {
    let mut indexed: Vec<(u64, Rule)> = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let err = |msg: String| PolicyError::Parse { line, msg };
        if raw.trim().is_empty() || raw.trim_start().starts_with('#') {
            continue;
        }
        let cols: Vec<&str> = raw
            .trim_end_matches('\r')
            .split('\t')
            .map(str::trim)
            .collect();
        if !(3..=4).contains(&cols.len()) {
            return Err(err("expected 3 or 4 tab-separated fields".into()));
        }
        let index: u64 = cols[0]
            .parse()
            .map_err(|_| err(format!("bad rule index `{}`", cols[0])))?;
        if indexed.iter().any(|(i, _)| *i == index) {
            return Err(err(format!("duplicate rule index {index}")));
        }
        let mut matcher = Match::any();
        if cols[1] != "*" && !cols[1].is_empty() {
            for cond in cols[1].split(',').map(str::trim) {
                let (field, value) = cond
                    .split_once('=')
                    .ok_or_else(|| err(format!("condition `{cond}` is not field=value")))?;
                let value = value.trim();
                match field.trim() {
                    "requester" => {
                        matcher = matcher.requester(parse_requester(value).map_err(err)?)
                    }
                    "tx" => {
                        let t = value
                            .parse()
                            .map_err(|e: crate::ledger::LedgerError| err(e.to_string()))?;
                        matcher = matcher.tx_type(t);
                    }
                    "resource" => matcher = matcher.resource(value),
                    other => return Err(err(format!("unknown field `{other}`"))),
                }
            }
        }
        let action = match cols[2].to_ascii_uppercase().as_str() {
            "ALLOW" => Action::Allow,
            "DENY" => Action::Deny,
            "ROUTE" => Action::RouteNext,
            other => return Err(err(format!("unknown action `{other}`"))),
        };
        let op_tag = cols.get(3).filter(|s| !s.is_empty()).map(|s| s.to_string());
        indexed.push((
            index,
            Rule {
                matcher,
                action,
                op_tag,
            },
        ));
    }
    indexed.sort_by_key(|(i, _)| *i);
    Ok(indexed.into_iter().map(|(_, r)| r).collect())
}

fn parse_requester(value: &str) -> Result<Hash32, String> {
    if let Some(plain) = value.strip_prefix("id:") {
        return Ok(sha256(plain.as_bytes()));
    }
    hex::decode(value)
        .ok()
        .and_then(|b| Hash32::from_slice(&b))
        .ok_or_else(|| format!("requester `{value}` is neither a hex digest nor id:<name>"))
}
