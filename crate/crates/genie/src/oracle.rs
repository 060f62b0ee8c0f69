//! Ground-truth oracle backends over synthetic worlds.
//!
//! The oracle enumerates the world's reachable states once, computes exact
//! distances to the goal, and then answers policy and reward calls from that
//! table: the policy proposes the distance-decreasing action first (or
//! `terminate` in a goal state), and the scorer returns `p = 1` exactly for
//! candidates that strictly decrease the distance (or correctly claim
//! completion). These exact answers make every downstream stage testable
//! without a model; configurable noise rates degrade them deterministically.
//!
//! Noise is stateless: flip decisions hash the query itself (plus the
//! configured seed), so concurrent call order never changes results.

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::action::{serialize_action, Action, Direction, Op, SwipeDistance, TerminateStatus};
use crate::backend::{
    BackendError, PolicyBackend, PolicyProposal, RewardBackend, RewardQuery, RewardScore,
    DEFAULT_THETA,
};
use crate::seed::{derive_seed, derive_unit};
use crate::session::{reset, EnvSession, Observation};
use crate::world::{ScreenId, SyntheticWorld};

/// Enumeration cap: worlds with more reachable states are rejected.
pub const MAX_ORACLE_STATES: usize = 20_000;

/// Oracle noise and thresholding configuration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OracleConfig {
    pub seed: u64,
    /// Probability that the policy's first candidate is not the optimal
    /// action (the optimal action is demoted into positions 1..=4).
    pub eps_policy: f64,
    /// Probability that a score is flipped (`p -> 1 - p`).
    pub eps_reward: f64,
    /// Decision threshold for score labels.
    pub theta: f64,
}

impl Default for OracleConfig {
    fn default() -> Self {
        OracleConfig { seed: 0, eps_policy: 0.0, eps_reward: 0.0, theta: DEFAULT_THETA }
    }
}

impl OracleConfig {
    pub fn exact(seed: u64) -> Self {
        OracleConfig { seed, ..OracleConfig::default() }
    }

    pub fn with_policy_noise(mut self, eps: f64) -> Self {
        assert!((0.0..=1.0).contains(&eps), "eps_policy must be a probability");
        self.eps_policy = eps;
        self
    }

    pub fn with_reward_noise(mut self, eps: f64) -> Self {
        assert!((0.0..=1.0).contains(&eps), "eps_reward must be a probability");
        self.eps_reward = eps;
        self
    }
}

/// Precomputed state table shared by all oracle clones of one world.
#[derive(Debug)]
struct StateSpace {
    world: Arc<SyntheticWorld>,
    /// Representative session per observation digest.
    reps: BTreeMap<String, EnvSession>,
    /// Exact step distance to the nearest goal-satisfying state; absent for
    /// states from which the goal is unreachable.
    dist: BTreeMap<String, u32>,
    /// Candidate action menu per screen, in canonical order.
    menus: BTreeMap<ScreenId, Vec<Action>>,
}

/// Deterministic ground-truth backend; implements both [`PolicyBackend`] and
/// [`RewardBackend`]. Cheap to clone; clones share the state table.
#[derive(Debug, Clone)]
pub struct Oracle {
    space: Arc<StateSpace>,
    cfg: OracleConfig,
}

pub(crate) fn menu_for_screen(
    world: &SyntheticWorld,
    screen_id: &str,
    goal_texts: &[String],
) -> Vec<Action> {
    let screen = world.screen(screen_id).expect("screen exists");
    let mut menu = Vec::new();
    for element in &screen.elements {
        let (x, y) = element.bbox.center();
        menu.push(Action::click(x, y, format!("tap {}", element.label)));
    }
    for name in world.entry_points.keys() {
        menu.push(Action::open(name.clone(), format!("open {name}")));
    }
    for text in goal_texts {
        menu.push(Action::type_text(text.clone(), format!("type {text}")));
    }
    menu.push(Action::system_button("home", "press home"));
    for direction in [Direction::Up, Direction::Down, Direction::Left, Direction::Right] {
        for distance in [SwipeDistance::Short, SwipeDistance::Medium] {
            menu.push(Action::swipe(
                crate::action::Target::Coordinate { x: 540, y: 960 },
                direction,
                distance,
                format!("swipe {} {}", direction.as_str(), distance.as_str()),
            ));
        }
    }
    menu.push(Action::wait(1.0, "wait for the screen"));
    menu.push(Action::wait(2.0, "wait longer"));
    menu
}

impl StateSpace {
    fn build(world: Arc<SyntheticWorld>) -> Result<Self, BackendError> {
        let goal_texts = world.goal.referenced_texts();
        let mut menus: BTreeMap<ScreenId, Vec<Action>> = BTreeMap::new();
        for id in world.screens.keys() {
            menus.insert(id.clone(), menu_for_screen(&world, id, &goal_texts));
        }

        // Forward closure from the reset state over the menu actions.
        let (root, root_obs) = reset(world.clone());
        let mut reps: BTreeMap<String, EnvSession> = BTreeMap::new();
        let mut keys: BTreeMap<String, String> = BTreeMap::new();
        let mut edges: Vec<(String, String)> = Vec::new();
        let mut queue = std::collections::VecDeque::new();
        reps.insert(root_obs.screenshot.digest.clone(), root.clone());
        keys.insert(root_obs.screenshot.digest.clone(), root.state_key());
        queue.push_back(root_obs.screenshot.digest.clone());
        while let Some(digest) = queue.pop_front() {
            let state = reps.get(&digest).expect("queued states are stored").clone();
            for action in &menus[state.current_screen()] {
                let mut fork = state.fork_unbounded();
                let (obs, _) = fork.step(action).expect("fresh forks accept steps");
                let next_digest = obs.screenshot.digest;
                let next_key = fork.state_key();
                match keys.get(&next_digest) {
                    Some(existing) if *existing != next_key => {
                        // Two behaviorally distinct states render identically;
                        // digest-keyed answers would be ambiguous.
                        return Err(BackendError::Unsupported(format!(
                            "world has ambiguous screenshot digest {next_digest}"
                        )));
                    }
                    Some(_) => {}
                    None => {
                        if reps.len() == MAX_ORACLE_STATES {
                            return Err(BackendError::Unsupported(format!(
                                "world exceeds the oracle's {MAX_ORACLE_STATES}-state cap"
                            )));
                        }
                        keys.insert(next_digest.clone(), next_key);
                        reps.insert(next_digest.clone(), fork);
                        queue.push_back(next_digest.clone());
                    }
                }
                if next_digest != digest {
                    edges.push((digest.clone(), next_digest));
                }
            }
        }

        // Reverse BFS from goal-satisfying states gives exact distances.
        let mut incoming: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
        for (from, to) in &edges {
            incoming.entry(to.as_str()).or_default().push(from.as_str());
        }
        let mut dist: BTreeMap<String, u32> = BTreeMap::new();
        let mut frontier: Vec<&str> = Vec::new();
        for (digest, state) in &reps {
            if state.goal_satisfied() {
                dist.insert(digest.clone(), 0);
                frontier.push(digest.as_str());
            }
        }
        let mut depth = 0;
        while !frontier.is_empty() {
            depth += 1;
            let mut next = Vec::new();
            for node in frontier {
                for &pred in incoming.get(node).map(|v| v.as_slice()).unwrap_or(&[]) {
                    if !dist.contains_key(pred) {
                        dist.insert(pred.to_owned(), depth);
                        next.push(pred);
                    }
                }
            }
            frontier = next;
        }

        Ok(StateSpace { world, reps, dist, menus })
    }
}

impl Oracle {
    /// Enumerate the world and build an oracle. Fails when the world's goal
    /// is unreachable from reset, when distinct states share a screenshot
    /// digest, or when the state space exceeds [`MAX_ORACLE_STATES`].
    pub fn new(world: Arc<SyntheticWorld>, cfg: OracleConfig) -> Result<Self, BackendError> {
        let space = StateSpace::build(world)?;
        let (_, root_obs) = reset(space.world.clone());
        if !space.dist.contains_key(&root_obs.screenshot.digest) {
            return Err(BackendError::Unsupported(
                "goal is unreachable from the initial state".to_owned(),
            ));
        }
        Ok(Oracle { space: Arc::new(space), cfg })
    }

    /// A clone sharing this oracle's state table under different noise.
    pub fn reconfigured(&self, cfg: OracleConfig) -> Oracle {
        Oracle { space: self.space.clone(), cfg }
    }

    pub fn config(&self) -> OracleConfig {
        self.cfg
    }

    pub fn world(&self) -> &Arc<SyntheticWorld> {
        &self.space.world
    }

    /// Number of reachable states enumerated.
    pub fn state_count(&self) -> usize {
        self.space.reps.len()
    }

    /// Exact distance to the goal from the state behind a screenshot digest;
    /// `None` when the goal is unreachable from it.
    pub fn distance(&self, digest: &str) -> Option<u32> {
        self.space.dist.get(digest).copied()
    }

    /// True iff this oracle's world produced the screenshot digest. Digests
    /// are world-salted, so exactly one oracle in a pool knows each digest.
    pub fn knows(&self, digest: &str) -> bool {
        self.space.reps.contains_key(digest)
    }

    fn rep(&self, digest: &str) -> Result<&EnvSession, BackendError> {
        self.space.reps.get(digest).ok_or_else(|| {
            BackendError::Unsupported(format!("unknown screenshot digest {digest}"))
        })
    }

    fn apply(&self, state: &EnvSession, action: &Action) -> String {
        let mut fork = state.fork_unbounded();
        let (obs, _) = fork.step(action).expect("fresh forks accept steps");
        obs.screenshot.digest
    }

    /// The distance-decreasing action from this state, or `terminate` when
    /// the goal is already satisfied; `None` when the goal is unreachable.
    fn optimal_action(&self, digest: &str, state: &EnvSession) -> Option<Action> {
        if state.goal_satisfied() {
            return Some(Action::terminate(TerminateStatus::Success, "task completed"));
        }
        let here = *self.space.dist.get(digest)?;
        self.space.menus[state.current_screen()]
            .iter()
            .find(|a| {
                self.space.dist.get(&self.apply(state, a)).is_some_and(|d| *d + 1 == here)
            })
            .cloned()
    }
}

impl PolicyBackend for Oracle {
    fn propose(
        &self,
        _goal: &str,
        observation: &Observation,
        history_summaries: &[String],
        k: usize,
    ) -> Result<PolicyProposal, BackendError> {
        let digest = &observation.screenshot.digest;
        let state = self.rep(digest)?;
        let optimal = self.optimal_action(digest, state);
        let optimal_text = optimal.as_ref().map(serialize_action);

        // The non-optimal menu in a deterministic per-state shuffle.
        let mut others: Vec<Action> = self.space.menus[state.current_screen()]
            .iter()
            .filter(|a| Some(serialize_action(a)) != optimal_text)
            .cloned()
            .collect();
        others.sort_by_cached_key(|a| {
            derive_seed(self.cfg.seed, &["policy_rank", digest, &serialize_action(a)])
        });

        let stream = match optimal {
            None => others,
            Some(opt) => {
                let step_tag = history_summaries.len().to_string();
                let flip = self.cfg.eps_policy > 0.0
                    && derive_unit(self.cfg.seed, &["policy_flip", digest, &step_tag])
                        < self.cfg.eps_policy;
                if flip {
                    // Demote the optimal action to a position in 1..=4; a
                    // larger candidate budget can still recover it.
                    let pos = 1 + (derive_seed(self.cfg.seed, &["policy_pos", digest, &step_tag])
                        % 4) as usize;
                    let pos = pos.min(others.len());
                    others.insert(pos, opt);
                    others
                } else {
                    let mut stream = vec![opt];
                    stream.extend(others);
                    stream
                }
            }
        };
        Ok(PolicyProposal::from_candidates(stream, k))
    }
}

/// Routes backend calls across the oracles of many worlds by screenshot
/// digest. Digests are world-salted, so each observation identifies its
/// world; one router can serve a whole multi-world task pool as a single
/// policy and scorer.
pub struct OracleRouter {
    oracles: Vec<Oracle>,
}

impl OracleRouter {
    /// # Panics
    /// Panics when `oracles` is empty.
    pub fn new(oracles: Vec<Oracle>) -> Self {
        assert!(!oracles.is_empty(), "router needs at least one oracle");
        OracleRouter { oracles }
    }

    /// One oracle per world, all under the same noise configuration.
    pub fn from_worlds(
        worlds: &[Arc<SyntheticWorld>],
        cfg: OracleConfig,
    ) -> Result<Self, BackendError> {
        let oracles = worlds
            .iter()
            .map(|w| Oracle::new(w.clone(), cfg))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(OracleRouter::new(oracles))
    }

    pub fn oracles(&self) -> &[Oracle] {
        &self.oracles
    }

    fn route(&self, digest: &str) -> Result<&Oracle, BackendError> {
        self.oracles.iter().find(|o| o.knows(digest)).ok_or_else(|| {
            BackendError::Unsupported(format!("no oracle knows screenshot digest {digest}"))
        })
    }
}

impl PolicyBackend for OracleRouter {
    fn propose(
        &self,
        goal: &str,
        observation: &Observation,
        history_summaries: &[String],
        k: usize,
    ) -> Result<PolicyProposal, BackendError> {
        self.route(&observation.screenshot.digest)?.propose(goal, observation, history_summaries, k)
    }
}

impl RewardBackend for OracleRouter {
    fn score(&self, query: &RewardQuery) -> Result<RewardScore, BackendError> {
        self.route(&query.current_screenshot.digest)?.score(query)
    }
}

impl RewardBackend for Oracle {
    fn score(&self, query: &RewardQuery) -> Result<RewardScore, BackendError> {
        let digest = &query.current_screenshot.digest;
        let state = self.rep(digest)?;
        let p_true = if let Op::Terminate { status } = &query.candidate.op {
            f64::from(*status == TerminateStatus::Success && state.goal_satisfied())
        } else {
            match self.space.dist.get(digest) {
                None => 0.0,
                Some(here) => {
                    let next = self.apply(state, &query.candidate);
                    f64::from(self.space.dist.get(&next).is_some_and(|d| d < here))
                }
            }
        };
        let flipped = self.cfg.eps_reward > 0.0
            && derive_unit(self.cfg.seed, &["reward_flip", &query.identity()])
                < self.cfg.eps_reward;
        let p = if flipped { 1.0 - p_true } else { p_true };
        Ok(RewardScore::from_p(p, self.cfg.theta))
    }
}
