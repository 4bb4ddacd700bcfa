//! Scenario files: one directive per line, whitespace separated.
//!
//! ```text
//! seed 42
//! key_bits 1024
//! scheme sha256
//! taxonomy taxonomy.tsv          # paths are relative to the scenario file
//! ads ads.tsv                    # or: synthetic_ads 200
//! app_map apps.tsv
//! block_capacity 64
//! storage_blocks 4096
//! block_size_limit 64
//! shares 7/10
//! default_price 1000 10000       # presentation click, micro-units
//! price 3 500 5000
//! fund A1 1000000
//! default_quota 100
//! quota 3 20
//! thresholds adaptive adaptive 24 72
//! user alice_wonder
//! demographic alice_wonder age 30-39
//! install alice_wonder chess_master_pro Games dev_chessworks
//! policy ch 1 requester=id:mallory_blocked DENY
//! policy_root ch 1
//! corrupt_chunk 1 0
//! at 0 usage alice_wonder chess_master_pro 10
//! at 30 upload alice_wonder
//! at 31 request alice_wonder chess_master_pro
//! at 31 click alice_wonder chess_master_pro first
//! at 32 exit alice_wonder chess_master_pro
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use thiserror::Error;

use super::billing::Shares;
use super::sim::{Check, FlowError, PolicyHost, PolicySpec, SimConfig, Simulation, UserConfig};
use super::ChunkFault;
use crate::admatch::{parse_ads_manifest, parse_taxonomy, synthetic_ads};
use crate::cryptokit::DigestScheme;
use crate::ledger::ChainRecord;
use crate::policy::parse_rules;
use crate::profile::{AppInterestMap, AppRef, Hours, ProfileThresholds};

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("reading {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Flow(#[from] FlowError),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ClickTarget {
    Ad(u32),
    /// First ad of the latest delivery to that app.
    First,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum EventKind {
    Usage {
        user: String,
        app: String,
        hours: Hours,
    },
    Upload {
        user: String,
    },
    Request {
        user: String,
        app: String,
    },
    Click {
        user: String,
        app: String,
        target: ClickTarget,
    },
    Exit {
        user: String,
        app: String,
    },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Event {
    pub at: Hours,
    pub kind: EventKind,
}

#[derive(Debug, Clone)]
pub struct Scenario {
    pub config: SimConfig,
    pub events: Vec<Event>,
}

#[derive(Debug, Clone)]
pub struct RunReport {
    pub run_log: String,
    /// One line per scenario event with its outcome.
    pub outcomes: Vec<String>,
    pub checks: Vec<Check>,
    pub billing_queue: usize,
    pub chain: Vec<ChainRecord>,
}

impl RunReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

fn host(s: &str) -> Option<PolicyHost> {
    match s {
        "miner" => Some(PolicyHost::Miner),
        "ch" => Some(PolicyHost::Ch),
        "cs" => Some(PolicyHost::Cs),
        _ => None,
    }
}

fn threshold(s: &str) -> Result<Option<Hours>, String> {
    if s == "adaptive" {
        return Ok(None);
    }
    s.parse()
        .map(Some)
        .map_err(|_| format!("bad threshold `{s}`"))
}

impl Scenario {
    pub fn load(path: &Path) -> Result<Self, ScenarioError> {
        let text = std::fs::read_to_string(path).map_err(|source| ScenarioError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }

    /// Parses scenario text; file directives resolve against `base`.
    pub fn parse(text: &str, base: &Path) -> Result<Self, ScenarioError> {
        let read = |name: &str| {
            let p = base.join(name);
            std::fs::read_to_string(&p).map_err(|source| ScenarioError::Io {
                path: p.display().to_string(),
                source,
            })
        };
        let mut cfg = SimConfig::new(Vec::new(), Vec::new(), AppInterestMap::new());
        let mut ads_src: Option<(usize, String)> = None;
        let mut synthetic: Option<u32> = None;
        let mut policy_text: BTreeMap<PolicyHost, String> = BTreeMap::new();
        let mut roots: BTreeMap<PolicyHost, usize> = BTreeMap::new();
        let mut users: Vec<UserConfig> = Vec::new();
        let mut events = Vec::new();

        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let err = |msg: String| ScenarioError::Parse { line, msg };
            let content = raw.split('#').next().unwrap_or("");
            let t: Vec<&str> = content.split_whitespace().collect();
            let Some((&key, args)) = t.split_first() else {
                continue;
            };
            let want = |n: usize| {
                if args.len() == n {
                    Ok(())
                } else {
                    Err(err(format!(
                        "`{key}` takes {n} arguments, got {}",
                        args.len()
                    )))
                }
            };
            let num = |s: &str| {
                s.parse::<u64>()
                    .map_err(|_| err(format!("`{s}` is not a number")))
            };
            let user_mut =
                |users: &mut Vec<UserConfig>, id: &str| -> Result<usize, ScenarioError> {
                    users
                        .iter()
                        .position(|u| u.user_id == id)
                        .ok_or_else(|| err(format!("undeclared user `{id}`")))
                };
            match key {
                "seed" => {
                    want(1)?;
                    cfg.seed = num(args[0])?;
                }
                "key_bits" => {
                    want(1)?;
                    cfg.key_bits = num(args[0])? as usize;
                }
                "scheme" => {
                    want(1)?;
                    cfg.scheme = args[0]
                        .parse::<DigestScheme>()
                        .map_err(|e| err(e.to_string()))?;
                }
                "taxonomy" => {
                    want(1)?;
                    cfg.taxonomy =
                        parse_taxonomy(&read(args[0])?).map_err(|e| err(e.to_string()))?;
                }
                "ads" => {
                    want(1)?;
                    ads_src = Some((line, read(args[0])?));
                }
                "synthetic_ads" => {
                    want(1)?;
                    synthetic = Some(num(args[0])? as u32);
                }
                "app_map" => {
                    want(1)?;
                    cfg.app_map =
                        AppInterestMap::parse(&read(args[0])?).map_err(|e| err(e.to_string()))?;
                }
                "block_capacity" => {
                    want(1)?;
                    cfg.block_capacity = num(args[0])?;
                }
                "storage_blocks" => {
                    want(1)?;
                    cfg.storage_blocks = num(args[0])?;
                }
                "block_size_limit" => {
                    want(1)?;
                    cfg.block_size_limit = num(args[0])? as usize;
                }
                "shares" => {
                    want(1)?;
                    cfg.shares = args[0].parse::<Shares>().map_err(|e| err(e.to_string()))?;
                }
                "default_price" => {
                    want(2)?;
                    cfg.default_price = (num(args[0])?, num(args[1])?);
                }
                "price" => {
                    want(3)?;
                    cfg.prices
                        .insert(num(args[0])? as u32, (num(args[1])?, num(args[2])?));
                }
                "fund" => {
                    want(2)?;
                    cfg.funds.push((args[0].to_string(), num(args[1])?));
                }
                "default_quota" => {
                    want(1)?;
                    cfg.default_quota = num(args[0])? as u32;
                }
                "quota" => {
                    want(2)?;
                    cfg.quotas
                        .insert(num(args[0])? as u32, num(args[1])? as u32);
                }
                "thresholds" => {
                    want(4)?;
                    cfg.thresholds = ProfileThresholds {
                        t_est: threshold(args[0]).map_err(err)?,
                        t_evo: threshold(args[1]).map_err(err)?,
                        establishment_window: num(args[2])?,
                        evolution_window: num(args[3])?,
                    };
                }
                "user" => {
                    want(1)?;
                    if users.iter().any(|u| u.user_id == args[0]) {
                        return Err(err(format!("user `{}` declared twice", args[0])));
                    }
                    users.push(UserConfig {
                        user_id: args[0].to_string(),
                        demographics: Vec::new(),
                        apps: Vec::new(),
                    });
                }
                "demographic" => {
                    want(3)?;
                    let u = user_mut(&mut users, args[0])?;
                    users[u]
                        .demographics
                        .push((args[1].to_string(), args[2].to_string()));
                }
                "install" => {
                    want(4)?;
                    let u = user_mut(&mut users, args[0])?;
                    users[u].apps.push(AppRef::new(args[1], args[2], args[3]));
                }
                "policy" => {
                    if !(4..=5).contains(&args.len()) {
                        return Err(err(
                            "`policy` takes a host and a rule: index condition action [op]".into(),
                        ));
                    }
                    let h = host(args[0])
                        .ok_or_else(|| err(format!("unknown policy host `{}`", args[0])))?;
                    let entry = policy_text.entry(h).or_default();
                    entry.push_str(&args[1..].join("\t"));
                    entry.push('\n');
                }
                "policy_root" => {
                    want(2)?;
                    let h = host(args[0])
                        .ok_or_else(|| err(format!("unknown policy host `{}`", args[0])))?;
                    roots.insert(h, num(args[1])? as usize);
                }
                "corrupt_chunk" => {
                    want(2)?;
                    cfg.faults.push(ChunkFault {
                        upload_id: num(args[0])?,
                        seq: num(args[1])?,
                    });
                }
                "at" => {
                    if args.len() < 3 {
                        return Err(err("`at` needs an hour, an action and a user".into()));
                    }
                    let at = num(args[0])?;
                    let rest = &args[1..];
                    let s = |i: usize| rest[i].to_string();
                    let arity = |n: usize| {
                        if rest.len() == n {
                            Ok(())
                        } else {
                            Err(err(format!("`{}` takes {} arguments", rest[0], n - 1)))
                        }
                    };
                    let kind = match rest[0] {
                        "usage" => {
                            arity(4)?;
                            EventKind::Usage {
                                user: s(1),
                                app: s(2),
                                hours: num(rest[3])?,
                            }
                        }
                        "upload" => {
                            arity(2)?;
                            EventKind::Upload { user: s(1) }
                        }
                        "request" => {
                            arity(3)?;
                            EventKind::Request {
                                user: s(1),
                                app: s(2),
                            }
                        }
                        "click" => {
                            arity(4)?;
                            let target = match rest[3] {
                                "first" => ClickTarget::First,
                                n => ClickTarget::Ad(num(n)? as u32),
                            };
                            EventKind::Click {
                                user: s(1),
                                app: s(2),
                                target,
                            }
                        }
                        "exit" => {
                            arity(3)?;
                            EventKind::Exit {
                                user: s(1),
                                app: s(2),
                            }
                        }
                        other => return Err(err(format!("unknown action `{other}`"))),
                    };
                    events.push(Event { at, kind });
                }
                other => return Err(err(format!("unknown directive `{other}`"))),
            }
        }

        if cfg.taxonomy.is_empty() {
            return Err(ScenarioError::Parse {
                line: 0,
                msg: "no taxonomy given".into(),
            });
        }
        cfg.ads = match (ads_src, synthetic) {
            (Some(_), Some(_)) => {
                return Err(ScenarioError::Parse {
                    line: 0,
                    msg: "give either `ads` or `synthetic_ads`, not both".into(),
                })
            }
            (Some((line, text)), None) => {
                parse_ads_manifest(&text, cfg.seed).map_err(|e| ScenarioError::Parse {
                    line,
                    msg: e.to_string(),
                })?
            }
            (None, Some(n)) => {
                synthetic_ads(n, &cfg.taxonomy, cfg.seed).map_err(|e| ScenarioError::Parse {
                    line: 0,
                    msg: e.to_string(),
                })?
            }
            (None, None) => Vec::new(),
        };
        for (h, text) in policy_text {
            let rules = parse_rules(&text).map_err(|e| ScenarioError::Parse {
                line: 0,
                msg: format!("{h:?} policy: {e}"),
            })?;
            let root_position = roots.get(&h).copied().unwrap_or(1);
            cfg.policies.insert(
                h,
                PolicySpec {
                    rules,
                    root_position,
                },
            );
        }
        cfg.users = users;
        events.sort_by_key(|e| e.at);
        Ok(Self {
            config: cfg,
            events,
        })
    }

    /// Runs the scenario, optionally overriding its seed.
    pub fn run(&self, seed: Option<u64>) -> Result<RunReport, ScenarioError> {
        self.simulate(seed).map(|(_, report)| report)
    }

    /// As [`run`](Self::run), also handing back the finished simulation so its
    /// traffic and state can be inspected.
    pub fn simulate(&self, seed: Option<u64>) -> Result<(Simulation, RunReport), ScenarioError> {
        let mut config = self.config.clone();
        if let Some(s) = seed {
            config.seed = s;
        }
        let mut sim = Simulation::new(config)?;
        let mut outcomes = Vec::new();
        let extent = sim.setup()?;
        outcomes.push(format!(
            "setup: index stored in blocks {}..{} ({} records)",
            extent.first_block,
            extent.first_block + extent.blocks,
            extent.records
        ));
        let mut last: BTreeMap<(String, String), Vec<u32>> = BTreeMap::new();
        for ev in &self.events {
            sim.advance_to(ev.at);
            let mut line = format!("h={} ", ev.at);
            match &ev.kind {
                EventKind::Usage { user, app, hours } => {
                    let _ = write!(line, "usage {user}/{app} {hours}h -> ");
                    push_result(
                        &mut line,
                        sim.record_usage(user, app, *hours)
                            .map(|_| "ok".to_string()),
                    );
                }
                EventKind::Upload { user } => {
                    let _ = write!(line, "upload {user} -> ");
                    let r = sim.upload_profile(user).map(|e| {
                        format!(
                            "{} digests in blocks {}..{}",
                            e.records,
                            e.first_block,
                            e.first_block + e.blocks
                        )
                    });
                    push_result(&mut line, r);
                }
                EventKind::Request { user, app } => {
                    let _ = write!(line, "request {user}/{app} -> ");
                    let r = sim.ads_request(user, app).map(|ads| {
                        let ids: Vec<u32> = ads.iter().map(|a| a.ad_id).collect();
                        last.insert((user.clone(), app.clone()), ids.clone());
                        format!("{ids:?}")
                    });
                    push_result(&mut line, r);
                }
                EventKind::Click { user, app, target } => {
                    let ad = match target {
                        ClickTarget::Ad(a) => Some(*a),
                        ClickTarget::First => last
                            .get(&(user.clone(), app.clone()))
                            .and_then(|v| v.first().copied()),
                    };
                    match ad {
                        Some(ad) => {
                            let _ = write!(line, "click {user}/{app} ad {ad} -> ");
                            push_result(
                                &mut line,
                                sim.click(user, app, ad).map(|_| "billed".to_string()),
                            );
                        }
                        None => {
                            let _ = write!(line, "click {user}/{app} -> skipped: no ad on screen");
                        }
                    }
                }
                EventKind::Exit { user, app } => {
                    let _ = write!(line, "exit {user}/{app} -> ");
                    push_result(&mut line, sim.exit(user, app).map(|_| "closed".to_string()));
                }
            }
            outcomes.push(line);
        }
        sim.finish();
        let report = RunReport {
            run_log: sim.run_log().to_string(),
            outcomes,
            checks: sim.checks(),
            billing_queue: sim.wallets().queued().len(),
            chain: sim.chain_records(),
        };
        Ok((sim, report))
    }
}

fn push_result(line: &mut String, r: Result<String, FlowError>) {
    match r {
        Ok(s) => line.push_str(&s),
        Err(e) => {
            let _ = write!(line, "error: {e}");
        }
    }
}
