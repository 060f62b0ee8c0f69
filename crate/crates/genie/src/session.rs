//! Environment sessions: executing actions against a synthetic world.
//!
//! A session owns the mutable state of one rollout: current screen, typed
//! text slots, input focus, and the step budget. Many sessions of one shared
//! world may run concurrently; a session itself is exclusive to one rollout
//! and cheap to clone for branching search.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::action::{Action, BBox, Op, SomMap, Target, TerminateStatus};
use crate::world::{hex, Effect, GoalPredicate, ScreenId, SlotId, SyntheticWorld};

/// Stable reference to a screenshot: a content digest plus an optional path
/// to a rendered image for backends that need pixels.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScreenshotRef {
    /// SHA-256 over (screen_id, text slot contents); equal digests mean
    /// visually identical states.
    pub digest: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<String>,
}

/// One SoM annotation visible on a screenshot.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SomAnnotation {
    pub som_index: u32,
    pub bbox: BBox,
    pub label: String,
}

/// What an agent sees at one step.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Observation {
    pub screen_id: ScreenId,
    pub screenshot: ScreenshotRef,
    pub som_annotations: Vec<SomAnnotation>,
}

impl Observation {
    /// SoM index to bbox mapping for verification of SoM-mode predictions.
    pub fn som_map(&self) -> SomMap {
        self.som_annotations.iter().map(|a| (a.som_index, a.bbox)).collect()
    }
}

/// How a session (or recorded trajectory) ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Terminal {
    Running,
    TerminatedSuccessClaimed,
    TerminatedFailureClaimed,
    BudgetExhausted,
}

impl Terminal {
    pub fn is_running(&self) -> bool {
        matches!(self, Terminal::Running)
    }
}

/// Result of one executed step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StepOutcome {
    /// True iff the observation digest changed.
    pub state_changed: bool,
    /// True iff the session is no longer running.
    pub terminal: bool,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SessionError {
    #[error("session is terminal ({0:?}); reset before stepping again")]
    SessionTerminated(Terminal),
}

/// A live rollout over a shared immutable world.
#[derive(Debug, Clone)]
pub struct EnvSession {
    world: Arc<SyntheticWorld>,
    /// World content id, mixed into digests so screenshots of different
    /// worlds never collide.
    world_salt: String,
    current: ScreenId,
    /// Current slot contents per screen, overlaying the world's initial ones.
    slots: BTreeMap<ScreenId, BTreeMap<SlotId, String>>,
    /// Focused (screen, slot) receiving the next type_text, if any.
    focus: Option<(ScreenId, SlotId)>,
    steps_taken: u32,
    terminal: Terminal,
}

/// Start a fresh session at the world's initial screen with its declared
/// slot contents and an untouched step budget.
pub fn reset(world: Arc<SyntheticWorld>) -> (EnvSession, Observation) {
    let slots = world
        .screens
        .iter()
        .filter(|(_, s)| !s.text_slots.is_empty())
        .map(|(id, s)| (id.clone(), s.text_slots.clone()))
        .collect();
    let session = EnvSession {
        current: world.initial_screen.clone(),
        world_salt: world.world_id(),
        world,
        slots,
        focus: None,
        steps_taken: 0,
        terminal: Terminal::Running,
    };
    let obs = session.observe();
    (session, obs)
}

impl EnvSession {
    pub fn world(&self) -> &Arc<SyntheticWorld> {
        &self.world
    }

    pub fn current_screen(&self) -> &str {
        &self.current
    }

    pub fn terminal(&self) -> Terminal {
        self.terminal
    }

    pub fn steps_taken(&self) -> u32 {
        self.steps_taken
    }

    pub fn steps_remaining(&self) -> u32 {
        self.world.max_steps.saturating_sub(self.steps_taken)
    }

    fn slot_values(&self, screen: &str) -> Option<&BTreeMap<SlotId, String>> {
        self.slots.get(screen)
    }

    /// Copy of this session with a full budget and running status, keeping
    /// the GUI state. Used by oracles and enumerators to probe transitions
    /// without consuming the original's budget.
    pub fn fork_unbounded(&self) -> EnvSession {
        let mut fork = self.clone();
        fork.steps_taken = 0;
        fork.terminal = Terminal::Running;
        fork
    }

    /// Digest of the visible state: world id, screen id, and the current
    /// screen's slot contents, with length framing. Focus is invisible (no
    /// rendering), so it is deliberately excluded.
    fn digest(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update((self.world_salt.len() as u64).to_le_bytes());
        hasher.update(self.world_salt.as_bytes());
        hasher.update((self.current.len() as u64).to_le_bytes());
        hasher.update(self.current.as_bytes());
        if let Some(slots) = self.slot_values(&self.current) {
            for (k, v) in slots {
                hasher.update((k.len() as u64).to_le_bytes());
                hasher.update(k.as_bytes());
                hasher.update((v.len() as u64).to_le_bytes());
                hasher.update(v.as_bytes());
            }
        }
        hex(&hasher.finalize())
    }

    /// Key identifying the full behavioral state, including focus. Used by
    /// exhaustive state enumeration; two sessions with equal state keys
    /// behave identically forever (given equal budgets).
    pub fn state_key(&self) -> String {
        let focus = match &self.focus {
            Some((s, slot)) => format!("{s}/{slot}"),
            None => String::new(),
        };
        let all_slots = serde_json::to_string(&self.slots).expect("slot map serializes");
        format!("{}|{}|{}", self.current, focus, all_slots)
    }

    /// The current observation. Pure; does not consume budget.
    pub fn observe(&self) -> Observation {
        let screen = self.world.screen(&self.current).expect("current screen exists");
        Observation {
            screen_id: self.current.clone(),
            screenshot: ScreenshotRef { digest: self.digest(), path: None },
            som_annotations: screen
                .elements
                .iter()
                .map(|e| SomAnnotation { som_index: e.som_index, bbox: e.bbox, label: e.label.clone() })
                .collect(),
        }
    }

    /// Evaluate the world's goal predicate on the current state. Pure.
    pub fn goal_satisfied(&self) -> bool {
        self.eval_goal(&self.world.goal.clone())
    }

    fn eval_goal(&self, goal: &GoalPredicate) -> bool {
        match goal {
            GoalPredicate::OnScreen { screen } => self.current == *screen,
            GoalPredicate::SlotEquals { screen, slot, value } => self
                .slot_values(screen)
                .and_then(|slots| slots.get(slot))
                .is_some_and(|v| v == value),
            GoalPredicate::All { goals } => goals.iter().all(|g| self.eval_goal(g)),
        }
    }

    fn current_screen_modal(&self) -> bool {
        self.world.screen(&self.current).expect("current screen exists").modal
    }

    fn element_at(&self, target: Target) -> Option<&crate::world::Element> {
        let screen = self.world.screen(&self.current).expect("current screen exists");
        match target {
            Target::Coordinate { x, y } => {
                screen.elements.iter().find(|e| e.bbox.contains(x, y))
            }
            Target::Som { index } => screen.elements.iter().find(|e| e.som_index == index),
        }
    }

    fn navigate(&mut self, target: &str) {
        self.current = target.to_owned();
        // Moving screens drops input focus.
        self.focus = None;
    }

    /// Execute one action. Consumes one unit of step budget regardless of
    /// effect; invalid targets, swipes, and waits leave the state unchanged.
    ///
    /// Returns the post-action observation and whether the visible state
    /// changed (digest comparison). The session becomes terminal on a
    /// terminate action or when the budget runs out.
    pub fn step(&mut self, action: &Action) -> Result<(Observation, StepOutcome), SessionError> {
        if !self.terminal.is_running() {
            return Err(SessionError::SessionTerminated(self.terminal));
        }
        let before = self.digest();
        match &action.op {
            Op::Click { target } | Op::LongPress { target } => {
                if let Some(element) = self.element_at(*target) {
                    match element.effect.clone() {
                        Effect::Navigate { target } => self.navigate(&target),
                        Effect::TypeInto { slot } => {
                            self.focus = Some((self.current.clone(), slot));
                        }
                        Effect::Noop | Effect::TerminateAllowed => {}
                    }
                }
            }
            Op::TypeText { text } => {
                if let Some((screen, slot)) = self.focus.clone() {
                    if screen == self.current {
                        self.slots
                            .entry(screen)
                            .or_default()
                            .insert(slot, text.clone());
                    }
                }
            }
            Op::Open { app } => {
                // Modal screens (blocking dialogs) swallow app switching.
                if !self.current_screen_modal() {
                    let key = crate::action::normalize_text(app);
                    let entry = self
                        .world
                        .entry_points
                        .iter()
                        .find(|(name, _)| crate::action::normalize_text(name) == key)
                        .map(|(_, target)| target.clone());
                    if let Some(target) = entry {
                        self.navigate(&target);
                    }
                }
            }
            Op::SystemButton { button } => {
                // `home` returns to the entry screen; other buttons are
                // noops, and modal screens swallow system buttons entirely.
                if !self.current_screen_modal()
                    && crate::action::normalize_text(button) == "home"
                {
                    let target = self.world.initial_screen.clone();
                    self.navigate(&target);
                }
            }
            Op::Swipe { .. } | Op::Wait { .. } => {}
            Op::Terminate { status } => {
                self.terminal = match status {
                    TerminateStatus::Success => Terminal::TerminatedSuccessClaimed,
                    TerminateStatus::Failure => Terminal::TerminatedFailureClaimed,
                };
            }
        }
        self.steps_taken += 1;
        if self.terminal.is_running() && self.steps_taken >= self.world.max_steps {
            self.terminal = Terminal::BudgetExhausted;
        }
        let observation = self.observe();
        let outcome = StepOutcome {
            state_changed: observation.screenshot.digest != before,
            terminal: !self.terminal.is_running(),
        };
        Ok((observation, outcome))
    }
}
