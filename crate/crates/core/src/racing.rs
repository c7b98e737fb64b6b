//! Candidate derivation, system policy, outcome caching, and the staggered
//! race between candidate protocol stacks.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::net::SocketAddr;
use std::path::Path;
use std::time::Duration;

use crate::adapters::{FeatureMatrix, ProtocolId};
use crate::error::{Error, Result};
use crate::properties::{satisfies, MatchResult, PreferenceLevel, TransportProperties};

/// Environment variable naming the system policy file.
pub const POLICY_ENV: &str = "TAPS_POLICY_FILE";

/// One raceable (protocol, resolved endpoint) combination.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CandidateStack {
    pub protocol: ProtocolId,
    pub remote: SocketAddr,
    pub interface: Option<String>,
    pub score: i32,
    /// Position in race order.
    pub rank: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RaceConfig {
    pub stagger: Duration,
    pub timeout: Duration,
}

impl Default for RaceConfig {
    fn default() -> Self {
        RaceConfig {
            stagger: Duration::from_millis(250),
            timeout: Duration::from_millis(5000),
        }
    }
}

impl RaceConfig {
    pub fn new(stagger: Duration, timeout: Duration) -> Result<Self> {
        if stagger > timeout {
            return Err(Error::Config(format!(
                "stagger {stagger:?} exceeds per-candidate timeout {timeout:?}"
            )));
        }
        Ok(RaceConfig { stagger, timeout })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CacheOutcome {
    Supported,
    Unsupported,
}

/// Remembers which protocols a peer supported recently.
#[derive(Debug, Clone)]
pub struct RaceCache {
    ttl: Duration,
    entries: HashMap<(SocketAddr, ProtocolId), (CacheOutcome, Duration)>,
}

impl Default for RaceCache {
    fn default() -> Self {
        RaceCache::new(Duration::from_secs(600))
    }
}

impl RaceCache {
    pub fn new(ttl: Duration) -> Self {
        RaceCache {
            ttl,
            entries: HashMap::new(),
        }
    }

    pub fn ttl(&self) -> Duration {
        self.ttl
    }

    pub fn record(&mut self, remote: SocketAddr, protocol: ProtocolId, outcome: CacheOutcome, now: Duration) {
        self.entries.insert((remote, protocol), (outcome, now + self.ttl));
    }

    pub fn lookup(&self, remote: SocketAddr, protocol: ProtocolId, now: Duration) -> Option<CacheOutcome> {
        self.entries
            .get(&(remote, protocol))
            .filter(|(_, expiry)| now <= *expiry)
            .map(|(outcome, _)| *outcome)
    }

    pub fn clear(&mut self) {
        self.entries.clear();
    }
}

/// Host-wide restrictions that override application preferences.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SystemPolicy {
    pub prohibited_protocols: BTreeSet<ProtocolId>,
    pub prohibited_interfaces: BTreeSet<String>,
    pub forced_interface: Option<String>,
}

impl SystemPolicy {
    /// Parses `key=value` lines. Blank lines and `#` comments are skipped;
    /// repeated keys accumulate.
    pub fn parse(text: &str) -> Result<Self> {
        let mut policy = SystemPolicy::default();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("policy line {}: expected key=value", lineno + 1)))?;
            let value = value.trim();
            match key.trim() {
                "prohibit_protocol" => {
                    policy.prohibited_protocols.insert(value.parse()?);
                }
                "prohibit_interface" => {
                    policy.prohibited_interfaces.insert(value.to_owned());
                }
                "force_interface" => policy.forced_interface = Some(value.to_owned()),
                other => {
                    return Err(Error::Config(format!(
                        "policy line {}: unknown key `{other}`",
                        lineno + 1
                    )))
                }
            }
        }
        Ok(policy)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read policy {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Loads the file named by `TAPS_POLICY_FILE`, or the empty policy.
    pub fn from_env() -> Result<Self> {
        match std::env::var_os(POLICY_ENV) {
            Some(path) if !path.is_empty() => Self::load(path),
            _ => Ok(Self::default()),
        }
    }

    pub fn permits(&self, protocol: ProtocolId) -> bool {
        !self.prohibited_protocols.contains(&protocol)
    }

    /// The interface candidates should use, or `Err(NoCandidates)` when the
    /// application's hard interface requirement conflicts with policy.
    fn interface_for(&self, tp: &TransportProperties) -> Result<Option<String>> {
        let pref = tp.interface_pref();
        if let Some((name, level)) = pref {
            let blocked = self.prohibited_interfaces.contains(name)
                || self.forced_interface.as_deref().is_some_and(|f| f != name);
            if level == PreferenceLevel::Require && blocked {
                return Err(Error::NoCandidates);
            }
        }
        if let Some(forced) = &self.forced_interface {
            return Ok(Some(forced.clone()));
        }
        Ok(match pref {
            Some((name, PreferenceLevel::Require | PreferenceLevel::Prefer))
                if !self.prohibited_interfaces.contains(name) =>
            {
                Some(name.to_owned())
            }
            _ => None,
        })
    }
}

/// Protocols eligible under `tp` and `policy`, best first, with scores.
pub fn eligible_protocols(
    tp: &TransportProperties,
    matrix: &FeatureMatrix,
    policy: &SystemPolicy,
) -> Vec<(ProtocolId, i32)> {
    let mut out: Vec<(ProtocolId, i32)> = matrix
        .protocols()
        .iter()
        .filter_map(|&p| match satisfies(&p.features(), tp) {
            MatchResult::Eligible(score) => Some((p, score)),
            MatchResult::Excluded(_) => None,
        })
        .filter(|(p, _)| policy.permits(*p))
        .collect();
    out.sort_by_key(|&(p, score)| (-score, p.rank()));
    out
}

/// Builds the ordered candidate list for a connection attempt.
///
/// Candidates are ordered by descending score, then by protocol rank, then
/// by address order. A cached success moves a candidate to the front and a
/// cached failure moves it to the back; the cache never adds or removes
/// candidates.
pub fn derive_candidates(
    tp: &TransportProperties,
    remotes: &[SocketAddr],
    matrix: &FeatureMatrix,
    policy: &SystemPolicy,
    cache: &RaceCache,
    now: Duration,
) -> Result<Vec<CandidateStack>> {
    let interface = policy.interface_for(tp)?;
    let protocols = eligible_protocols(tp, matrix, policy);
    let mut keyed = Vec::new();
    for (pi, &(protocol, score)) in protocols.iter().enumerate() {
        for (ai, &remote) in remotes.iter().enumerate() {
            let group = match cache.lookup(remote, protocol, now) {
                Some(CacheOutcome::Supported) => 0,
                None => 1,
                Some(CacheOutcome::Unsupported) => 2,
            };
            keyed.push((
                (group, pi, ai),
                CandidateStack {
                    protocol,
                    remote,
                    interface: interface.clone(),
                    score,
                    rank: 0,
                },
            ));
        }
    }
    if keyed.is_empty() {
        return Err(Error::NoCandidates);
    }
    keyed.sort_by_key(|(k, _)| *k);
    Ok(keyed
        .into_iter()
        .enumerate()
        .map(|(rank, (_, c))| CandidateStack { rank, ..c })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum AttemptState {
    Pending,
    Running { started: Duration },
    Failed,
    Succeeded,
    Cancelled,
}

/// What the race driver must do next.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RaceAction {
    /// Begin establishing candidate `i`.
    Start(usize),
    /// Tear down candidate `i`, which lost.
    Cancel(usize),
    /// Candidate `i` won; the race is over.
    Won(usize),
    /// Every candidate failed; the race is over.
    Failed(Vec<(usize, String)>),
}

/// Staggered race between candidates, driven by explicit clock readings.
///
/// Candidate `k` starts `stagger` after candidate `k - 1`, or at once when
/// every candidate started so far has failed. Each attempt is failed after
/// `timeout`. The first success wins and every other running attempt is
/// cancelled.
#[derive(Debug, Clone)]
pub struct Race {
    cfg: RaceConfig,
    attempts: Vec<AttemptState>,
    causes: Vec<(usize, String)>,
    last_start: Option<Duration>,
    finished: bool,
}

impl Race {
    pub fn new(candidates: usize, cfg: RaceConfig) -> Self {
        Race {
            cfg,
            attempts: vec![AttemptState::Pending; candidates],
            causes: Vec::new(),
            last_start: None,
            finished: false,
        }
    }

    pub fn is_finished(&self) -> bool {
        self.finished
    }

    pub fn is_running(&self, i: usize) -> bool {
        matches!(self.attempts.get(i), Some(AttemptState::Running { .. }))
    }

    pub fn start(&mut self, now: Duration) -> Vec<RaceAction> {
        let mut actions = Vec::new();
        if self.attempts.is_empty() {
            self.finished = true;
            actions.push(RaceAction::Failed(Vec::new()));
            return actions;
        }
        self.launch_next(now, &mut actions);
        actions
    }

    fn next_pending(&self) -> Option<usize> {
        self.attempts.iter().position(|a| *a == AttemptState::Pending)
    }

    fn any_running(&self) -> bool {
        self.attempts.iter().any(|a| matches!(a, AttemptState::Running { .. }))
    }

    fn launch_next(&mut self, now: Duration, actions: &mut Vec<RaceAction>) {
        if let Some(i) = self.next_pending() {
            self.attempts[i] = AttemptState::Running { started: now };
            self.last_start = Some(now);
            actions.push(RaceAction::Start(i));
        }
    }

    fn check_exhausted(&mut self, now: Duration, actions: &mut Vec<RaceAction>) {
        if self.finished || self.any_running() {
            return;
        }
        if self.next_pending().is_some() {
            self.launch_next(now, actions);
        } else {
            self.finished = true;
            actions.push(RaceAction::Failed(std::mem::take(&mut self.causes)));
        }
    }

    /// Starts due attempts and expires timed-out ones.
    pub fn poll(&mut self, now: Duration) -> Vec<RaceAction> {
        let mut actions = Vec::new();
        if self.finished {
            return actions;
        }
        for i in 0..self.attempts.len() {
            if let AttemptState::Running { started } = self.attempts[i] {
                if now >= started + self.cfg.timeout {
                    self.attempts[i] = AttemptState::Failed;
                    self.causes.push((i, "timed out".to_owned()));
                    actions.push(RaceAction::Cancel(i));
                }
            }
        }
        while let (Some(last), Some(_)) = (self.last_start, self.next_pending()) {
            if now < last + self.cfg.stagger {
                break;
            }
            self.launch_next(now, &mut actions);
        }
        self.check_exhausted(now, &mut actions);
        actions
    }

    pub fn succeeded(&mut self, i: usize, _now: Duration) -> Vec<RaceAction> {
        let mut actions = Vec::new();
        if self.finished || !self.is_running(i) {
            return actions;
        }
        self.attempts[i] = AttemptState::Succeeded;
        self.finished = true;
        for (j, a) in self.attempts.iter_mut().enumerate() {
            match a {
                AttemptState::Running { .. } => {
                    *a = AttemptState::Cancelled;
                    actions.push(RaceAction::Cancel(j));
                }
                AttemptState::Pending => *a = AttemptState::Cancelled,
                _ => {}
            }
        }
        actions.insert(0, RaceAction::Won(i));
        actions
    }

    pub fn failed(&mut self, i: usize, cause: impl Into<String>, now: Duration) -> Vec<RaceAction> {
        let mut actions = Vec::new();
        if self.finished || !self.is_running(i) {
            return actions;
        }
        self.attempts[i] = AttemptState::Failed;
        self.causes.push((i, cause.into()));
        self.check_exhausted(now, &mut actions);
        actions
    }

    /// When [`Race::poll`] next has work to do.
    pub fn next_deadline(&self) -> Option<Duration> {
        if self.finished {
            return None;
        }
        let timeouts = self.attempts.iter().filter_map(|a| match a {
            AttemptState::Running { started } => Some(*started + self.cfg.timeout),
            _ => None,
        });
        let start = match (self.last_start, self.next_pending()) {
            (Some(last), Some(_)) => Some(last + self.cfg.stagger),
            _ => None,
        };
        timeouts.chain(start).min()
    }
}
