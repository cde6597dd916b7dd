//! Stepped simulator sessions driven by a command script.
//!
//! One command per line, `#` starts a comment:
//!
//! ```text
//! seed 7
//! cluster topology.json
//! until 5ms
//! deploy spec.json
//! run 200ms
//! kill active
//! reconfigure loop-1 spec.json at 400ms
//! partition active inactive0 for 100ms
//! isolate n12 for 50ms
//! revive n12
//! status
//! ```
//!
//! Times take a `us`, `ms` or `s` suffix (bare numbers are microseconds).
//! Targets are `active`, `inactive<rank>`, or a node id (`n12` or `12`).

use std::collections::BTreeMap;
use std::path::PathBuf;

use serde::Serialize;
use thiserror::Error;
use vpc_core::harness::check::{check_invariants, CheckConfig, Violation};
use vpc_core::harness::{default_spec, resolve_target, Cluster, ClusterSpec, ClusterTrace, ComponentStatus, Target};
use vpc_core::model::{DeploymentSpec, Micros, NodeId};
use vpc_core::orchestrator::{DeploymentPlan, OrchError, OrchestratorStatus};
use vpc_core::runtime::NodeStatus;

use crate::config::{load_json, ConfigError};

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum When {
    At(Micros),
    In(Micros),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Command {
    Seed(u64),
    Cluster(PathBuf),
    /// Advance by a duration.
    Run(Micros),
    /// Advance to an absolute time.
    Until(Micros),
    Deploy(Option<PathBuf>),
    Reconfigure { deployment: String, spec: Option<PathBuf>, when: When },
    Kill(Target),
    Revive(Target),
    Partition(Target, Target, Micros),
    Isolate(Target, Micros),
    Status,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Seed(_) => "seed",
            Command::Cluster(_) => "cluster",
            Command::Run(_) => "run",
            Command::Until(_) => "until",
            Command::Deploy(_) => "deploy",
            Command::Reconfigure { .. } => "reconfigure",
            Command::Kill(_) => "kill",
            Command::Revive(_) => "revive",
            Command::Partition(..) => "partition",
            Command::Isolate(..) => "isolate",
            Command::Status => "status",
        }
    }
}

pub fn parse_duration(s: &str) -> Option<Micros> {
    let (num, scale) = if let Some(n) = s.strip_suffix("us") {
        (n, 1)
    } else if let Some(n) = s.strip_suffix("ms") {
        (n, 1_000)
    } else if let Some(n) = s.strip_suffix('s') {
        (n, 1_000_000)
    } else {
        (s, 1)
    };
    num.parse::<Micros>().ok()?.checked_mul(scale)
}

pub fn parse_target(s: &str) -> Option<Target> {
    if s == "active" {
        return Some(Target::Active);
    }
    if let Some(r) = s.strip_prefix("inactive") {
        return r.parse().ok().map(|rank| Target::Inactive { rank });
    }
    s.strip_prefix('n').unwrap_or(s).parse().ok().map(|id| Target::Node { id: NodeId(id) })
}

#[derive(Debug, Error)]
#[error("line {line}: {msg}")]
pub struct ParseError {
    pub line: usize,
    pub msg: String,
}

fn parse_line(words: &[&str]) -> Result<Command, String> {
    let dur = |s: &str| parse_duration(s).ok_or_else(|| format!("bad duration `{s}`"));
    let target = |s: &str| parse_target(s).ok_or_else(|| format!("bad target `{s}`"));
    let arity = |n: usize| {
        if words.len() == n {
            Ok(())
        } else {
            Err(format!("`{}` takes {} argument(s)", words[0], n - 1))
        }
    };
    match words[0] {
        "seed" => {
            arity(2)?;
            words[1].parse().map(Command::Seed).map_err(|_| format!("bad seed `{}`", words[1]))
        }
        "cluster" => arity(2).map(|_| Command::Cluster(words[1].into())),
        "run" => arity(2).and_then(|_| dur(words[1]).map(Command::Run)),
        "until" => arity(2).and_then(|_| dur(words[1]).map(Command::Until)),
        "deploy" => match words.len() {
            1 => Ok(Command::Deploy(None)),
            2 => Ok(Command::Deploy(Some(words[1].into()))),
            _ => Err("`deploy` takes at most one spec file".into()),
        },
        "reconfigure" => {
            // reconfigure <deployment> [spec] (at|in) <time>
            let (spec, rest) = match words.len() {
                4 => (None, &words[2..]),
                5 => (Some(PathBuf::from(words[2])), &words[3..]),
                _ => return Err("usage: reconfigure <deployment> [spec.json] at|in <time>".into()),
            };
            let t = dur(rest[1])?;
            let when = match rest[0] {
                "at" => When::At(t),
                "in" => When::In(t),
                other => return Err(format!("expected `at` or `in`, got `{other}`")),
            };
            Ok(Command::Reconfigure { deployment: words[1].into(), spec, when })
        }
        "kill" => arity(2).and_then(|_| target(words[1]).map(Command::Kill)),
        "revive" => arity(2).and_then(|_| target(words[1]).map(Command::Revive)),
        "partition" => {
            if words.len() != 5 || words[3] != "for" {
                return Err("usage: partition <target> <target> for <duration>".into());
            }
            Ok(Command::Partition(target(words[1])?, target(words[2])?, dur(words[4])?))
        }
        "isolate" => {
            if words.len() != 4 || words[2] != "for" {
                return Err("usage: isolate <target> for <duration>".into());
            }
            Ok(Command::Isolate(target(words[1])?, dur(words[3])?))
        }
        "status" => arity(1).map(|_| Command::Status),
        other => Err(format!("unknown command `{other}`")),
    }
}

/// Parses a whole script; returns each command with its 1-based line.
pub fn parse_script(text: &str) -> Result<Vec<(usize, Command)>, ParseError> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("");
        let words: Vec<&str> = line.split_whitespace().collect();
        if words.is_empty() {
            continue;
        }
        let cmd = parse_line(&words).map_err(|msg| ParseError { line: i + 1, msg })?;
        out.push((i + 1, cmd));
    }
    Ok(out)
}

#[derive(Debug, Error)]
pub enum StepError {
    /// The orchestrator refused the operation.
    #[error(transparent)]
    Orch(#[from] OrchError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{0}")]
    Usage(String),
}

impl StepError {
    /// 1 for refused operations, 2 for bad input.
    pub fn exit_code(&self) -> i32 {
        match self {
            StepError::Orch(_) => 1,
            _ => 2,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct NodeView {
    pub alive: bool,
    #[serde(flatten)]
    pub status: NodeStatus,
}

#[derive(Clone, Debug, Serialize)]
pub struct StatusView {
    pub time: Micros,
    pub orchestrator: OrchestratorStatus,
    pub nodes: BTreeMap<NodeId, NodeView>,
}

#[derive(Clone, Debug, Serialize)]
#[serde(untagged)]
pub enum Outcome {
    Done,
    Plan(DeploymentPlan),
    Status(Box<StatusView>),
}

pub struct Session {
    seed: u64,
    spec: ClusterSpec,
    cluster: Option<Cluster>,
    deployment: Option<DeploymentSpec>,
}

impl Session {
    pub fn new(spec: ClusterSpec, seed: u64) -> Self {
        Session { seed, spec, cluster: None, deployment: None }
    }

    fn started(&self, what: &str) -> Result<(), StepError> {
        if self.cluster.is_some() {
            return Err(StepError::Usage(format!("`{what}` must come before the simulation starts")));
        }
        Ok(())
    }

    fn cluster(&mut self) -> Result<&mut Cluster, StepError> {
        if self.cluster.is_none() {
            let c = Cluster::new(&self.spec, self.seed).map_err(|e| StepError::Usage(e.to_string()))?;
            self.cluster = Some(c);
        }
        Ok(self.cluster.as_mut().unwrap())
    }

    fn node(&mut self, t: &Target) -> Result<NodeId, StepError> {
        let dep = self.deployment.as_ref().map(|d| d.deployment_id.clone()).unwrap_or_default();
        let c = self.cluster()?;
        resolve_target(c, &dep, t).ok_or_else(|| StepError::Usage(format!("no node for {t:?}")))
    }

    fn load_spec(&self, path: &Option<PathBuf>) -> Result<DeploymentSpec, StepError> {
        Ok(match path {
            Some(p) => load_json(p)?,
            None => default_spec(&self.spec),
        })
    }

    pub fn now(&self) -> Micros {
        self.cluster.as_ref().map_or(0, Cluster::now)
    }

    pub fn exec(&mut self, cmd: &Command) -> Result<Outcome, StepError> {
        let sim_err = |e: vpc_core::simnet::SimError| StepError::Usage(e.to_string());
        match cmd {
            Command::Seed(s) => {
                self.started("seed")?;
                self.seed = *s;
            }
            Command::Cluster(p) => {
                self.started("cluster")?;
                self.spec = load_json(p)?;
            }
            Command::Run(d) => {
                let c = self.cluster()?;
                let t = c.now() + d;
                c.run_until(t);
            }
            Command::Until(t) => {
                let c = self.cluster()?;
                if *t < c.now() {
                    return Err(StepError::Usage(format!("time {t} is in the past (now {})", c.now())));
                }
                c.run_until(*t);
            }
            Command::Deploy(p) => {
                let spec = self.load_spec(p)?;
                let plan = self.cluster()?.deploy(spec.clone())?;
                self.deployment = Some(spec);
                return Ok(Outcome::Plan(plan));
            }
            Command::Reconfigure { deployment, spec, when } => {
                let spec = self.load_spec(spec)?;
                let c = self.cluster()?;
                let at = match when {
                    When::At(t) => *t,
                    When::In(d) => c.now() + d,
                };
                let plan = c.redeploy(deployment, spec.clone(), at)?;
                self.deployment = Some(spec);
                return Ok(Outcome::Plan(plan));
            }
            Command::Kill(t) => {
                let n = self.node(t)?;
                let c = self.cluster()?;
                let now = c.now();
                c.sim.kill_node(n, now).map_err(sim_err)?;
            }
            Command::Revive(t) => {
                let n = self.node(t)?;
                let c = self.cluster()?;
                let now = c.now();
                c.sim.revive_node(n, now).map_err(sim_err)?;
            }
            Command::Partition(a, b, d) => {
                let (a, b) = (self.node(a)?, self.node(b)?);
                let c = self.cluster()?;
                let now = c.now();
                c.sim.partition(&[a], &[b], now, now.saturating_add(*d)).map_err(sim_err)?;
            }
            Command::Isolate(t, d) => {
                let n = self.node(t)?;
                let c = self.cluster()?;
                let now = c.now();
                let rest: Vec<NodeId> = c.spec.node_ids().into_iter().filter(|x| *x != n).collect();
                c.sim.partition(&[n], &rest, now, now.saturating_add(*d)).map_err(sim_err)?;
            }
            Command::Status => return Ok(Outcome::Status(Box::new(self.status()?))),
        }
        Ok(Outcome::Done)
    }

    pub fn status(&mut self) -> Result<StatusView, StepError> {
        let c = self.cluster()?;
        let nodes = c
            .statuses()
            .into_iter()
            .filter_map(|(id, s)| match s {
                ComponentStatus::Node(status) => Some((id, NodeView { alive: c.sim.is_alive(id), status })),
                _ => None,
            })
            .collect();
        Ok(StatusView { time: c.now(), orchestrator: c.orchestrator().status(), nodes })
    }

    /// Ends the session and checks the trace against the last deployed
    /// spec.
    pub fn finish(mut self) -> Result<(ClusterTrace, Vec<Violation>), StepError> {
        let spec = self.deployment.clone().unwrap_or_else(|| default_spec(&self.spec));
        let cluster = self.cluster()?;
        let cfg = CheckConfig {
            sync_period: spec.sync_period,
            miss_threshold: spec.miss_threshold,
            timing: cluster.spec.timing(),
            discovery_period: cluster.spec.discovery_period,
            redundancy_target: u32::from(spec.redundancy_count),
            expected_digest: None,
        };
        let trace = self.cluster.take().unwrap().into_trace();
        let violations = check_invariants(&trace.events, &cfg);
        Ok((trace, violations))
    }
}
