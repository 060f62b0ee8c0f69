//! Deterministic synthetic GUI worlds: screens, elements, transitions, and
//! goal predicates, plus a parameterized generator.
//!
//! A world is an immutable state machine standing in for a real device. Its
//! screens carry SoM-annotated elements whose effects (navigate, type into a
//! slot, noop) are applied by [`crate::session::EnvSession`]. Worlds are
//! value-serializable (`world.v1` JSON) and identified by a content hash.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::action::BBox;
use crate::io::{self, IoError};
use crate::seed::derive_seed;

/// Fixed canvas width in pixels.
pub const CANVAS_WIDTH: u32 = 1080;
/// Fixed canvas height in pixels.
pub const CANVAS_HEIGHT: u32 = 1920;
/// Schema tag written into world files.
pub const WORLD_SCHEMA_VERSION: &str = "world.v1";

pub type ScreenId = String;
pub type SlotId = String;

/// What happens when an element is activated by click or long_press.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Effect {
    /// Switch the session to another screen.
    Navigate { target: ScreenId },
    /// Focus a typed-text slot on the current screen; a following
    /// `type_text` writes into it.
    TypeInto { slot: SlotId },
    /// Changes nothing: blank areas and non-functional elements.
    Noop,
    /// Marks a sensible place to finish; activating it changes nothing.
    TerminateAllowed,
}

/// One interactive (or decoy) region on a screen.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Element {
    /// 1-based set-of-marks index; contiguous per screen.
    pub som_index: u32,
    pub bbox: BBox,
    pub effect: Effect,
    pub label: String,
}

/// One screen: elements plus its typed-text buffers.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Screen {
    pub screen_id: ScreenId,
    pub elements: Vec<Element>,
    /// Initial contents of the screen's text slots (usually empty strings).
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub text_slots: BTreeMap<SlotId, String>,
    /// A modal screen swallows `open` and system buttons, like a blocking
    /// dialog. Generated trap screens are modal so that entering one is an
    /// unrecoverable mistake under every action.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub modal: bool,
}

/// Predicate over session state deciding whether the task goal is met.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GoalPredicate {
    /// The session is on the given screen.
    OnScreen { screen: ScreenId },
    /// The given slot holds exactly `value`.
    SlotEquals { screen: ScreenId, slot: SlotId, value: String },
    /// Conjunction of sub-goals.
    All { goals: Vec<GoalPredicate> },
}

impl GoalPredicate {
    /// Screens the predicate mentions, for validation.
    fn referenced_screens(&self, out: &mut Vec<ScreenId>) {
        match self {
            GoalPredicate::OnScreen { screen } => out.push(screen.clone()),
            GoalPredicate::SlotEquals { screen, .. } => out.push(screen.clone()),
            GoalPredicate::All { goals } => {
                for g in goals {
                    g.referenced_screens(out);
                }
            }
        }
    }

    /// Slot values the predicate compares against, used by exhaustive
    /// enumeration to bound the `type_text` action space.
    pub fn referenced_texts(&self) -> Vec<String> {
        fn walk(g: &GoalPredicate, out: &mut Vec<String>) {
            match g {
                GoalPredicate::SlotEquals { value, .. } => out.push(value.clone()),
                GoalPredicate::All { goals } => {
                    for g in goals {
                        walk(g, out);
                    }
                }
                GoalPredicate::OnScreen { .. } => {}
            }
        }
        let mut out = Vec::new();
        walk(self, &mut out);
        out.sort();
        out.dedup();
        out
    }
}

/// Generation parameters recorded in generated worlds, for reporting and
/// reference-length derivation. Hand-built worlds leave it unset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorldMeta {
    pub depth: u32,
    pub branching: u32,
    pub distractors: u32,
}

/// A complete synthetic world.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticWorld {
    pub schema_version: String,
    pub screens: BTreeMap<ScreenId, Screen>,
    pub initial_screen: ScreenId,
    /// App names the `open` action resolves to entry screens; unregistered
    /// names make `open` a noop.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub entry_points: BTreeMap<String, ScreenId>,
    pub goal: GoalPredicate,
    pub max_steps: u32,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub meta: Option<WorldMeta>,
}

#[derive(Debug, Error)]
pub enum WorldError {
    #[error("invalid world: {0}")]
    Validation(String),
    #[error("unsupported world schema version `{found}`, expected `{expected}`")]
    Version { found: String, expected: &'static str },
    #[error(transparent)]
    Io(#[from] IoError),
}

impl SyntheticWorld {
    /// Structural validation: referenced screens and slots exist, bboxes fit
    /// the canvas, SoM indices are contiguous from 1 in listing order, and
    /// the step budget is positive. Goal reachability is not checked here;
    /// the generator guarantees it and the oracle backend verifies it.
    pub fn validate(&self) -> Result<(), WorldError> {
        let fail = |msg: String| Err(WorldError::Validation(msg));
        if self.schema_version != WORLD_SCHEMA_VERSION {
            return Err(WorldError::Version {
                found: self.schema_version.clone(),
                expected: WORLD_SCHEMA_VERSION,
            });
        }
        if self.max_steps == 0 {
            return fail("max_steps must be positive".into());
        }
        if !self.screens.contains_key(&self.initial_screen) {
            return fail(format!("initial screen `{}` does not exist", self.initial_screen));
        }
        for (id, screen) in &self.screens {
            if *id != screen.screen_id {
                return fail(format!(
                    "screen key `{id}` disagrees with screen_id `{}`",
                    screen.screen_id
                ));
            }
            for (idx, element) in screen.elements.iter().enumerate() {
                if element.som_index != idx as u32 + 1 {
                    return fail(format!(
                        "screen `{id}`: som indices must be contiguous from 1 in order, \
                         element {idx} has index {}",
                        element.som_index
                    ));
                }
                let b = element.bbox;
                if b.x1() >= CANVAS_WIDTH || b.y1() >= CANVAS_HEIGHT {
                    return fail(format!(
                        "screen `{id}` element {}: bbox exceeds the {CANVAS_WIDTH}x{CANVAS_HEIGHT} canvas",
                        element.som_index
                    ));
                }
                match &element.effect {
                    Effect::Navigate { target } => {
                        if !self.screens.contains_key(target) {
                            return fail(format!(
                                "screen `{id}` element {} navigates to missing screen `{target}`",
                                element.som_index
                            ));
                        }
                    }
                    Effect::TypeInto { slot } => {
                        if !screen.text_slots.contains_key(slot) {
                            return fail(format!(
                                "screen `{id}` element {} types into undeclared slot `{slot}`",
                                element.som_index
                            ));
                        }
                    }
                    Effect::Noop | Effect::TerminateAllowed => {}
                }
            }
        }
        for (name, target) in &self.entry_points {
            if !self.screens.contains_key(target) {
                return fail(format!("entry point `{name}` targets missing screen `{target}`"));
            }
        }
        let mut goal_screens = Vec::new();
        self.goal.referenced_screens(&mut goal_screens);
        for screen in goal_screens {
            if !self.screens.contains_key(&screen) {
                return fail(format!("goal references missing screen `{screen}`"));
            }
        }
        Ok(())
    }

    /// Content identity: SHA-256 of the canonical JSON serialization.
    /// Trajectories record it so corruption donors can be checked for
    /// same-world origin.
    pub fn world_id(&self) -> String {
        let json = serde_json::to_string(self).expect("world serialization is infallible");
        let mut hasher = Sha256::new();
        hasher.update(json.as_bytes());
        hex(&hasher.finalize())
    }

    pub fn to_json_string(&self) -> String {
        let mut text =
            serde_json::to_string_pretty(self).expect("world serialization is infallible");
        text.push('\n');
        text
    }

    pub fn from_json_str(text: &str) -> Result<Self, WorldError> {
        let world: SyntheticWorld = serde_json::from_str(text)
            .map_err(|e| WorldError::Validation(format!("malformed world json: {e}")))?;
        world.validate()?;
        Ok(world)
    }

    pub fn save(&self, path: &Path) -> Result<(), WorldError> {
        io::atomic_write(path, self.to_json_string().as_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, WorldError> {
        let text = std::fs::read_to_string(path).map_err(|e| IoError::io(path, e))?;
        Self::from_json_str(&text)
    }

    pub fn screen(&self, id: &str) -> Option<&Screen> {
        self.screens.get(id)
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    let mut out = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

// ---------------------------------------------------------------------------
// Generator
// ---------------------------------------------------------------------------

// Placement grid: 4 columns x 20 rows of 270x96 cells covering the canvas.
// Cells 0..20 are reserved for on-path navigation elements (cell index =
// chain position, unique per depth <= 20); side elements use cells 20..80.
const GRID_COLS: u32 = 4;
const GRID_ROWS: u32 = 20;
const ON_PATH_CELLS: u32 = GRID_ROWS;
const SIDE_CELLS: u32 = GRID_COLS * GRID_ROWS - ON_PATH_CELLS;

fn cell_bbox(cell: u32) -> BBox {
    // On-path cells fill column 0 top-to-bottom; side cells fill the rest.
    let (col, row) = if cell < ON_PATH_CELLS {
        (0, cell)
    } else {
        let side = cell - ON_PATH_CELLS;
        (1 + side % (GRID_COLS - 1), side / (GRID_COLS - 1))
    };
    let x0 = col * 270 + 35;
    let y0 = row * 96 + 8;
    BBox::new(x0, y0, x0 + 199, y0 + 79).expect("grid cells are ordered")
}

/// Generate a solvable world: a navigation chain of `depth` screens leading
/// to the goal screen, where every on-path screen also offers `branching - 1`
/// detours into absorbing trap screens and `distractors` noop elements.
///
/// Properties the generator guarantees:
/// - exactly one shortest goal path, of length `depth`;
/// - deterministic output: same arguments give a byte-identical world;
/// - on-path elements of distinct chain positions never share a bbox (for
///   `depth <= 20`), so a click recorded on one chain screen can never
///   activate another chain screen's forward element on replay;
/// - trap screens have no exits;
/// - `max_steps = 2 * depth + 4`.
///
/// # Panics
/// Panics when `depth` is 0 or exceeds 20, when `branching` is 0, or when a
/// screen would need more side elements than the 60 available side cells.
pub fn generate_world(depth: u32, branching: u32, distractors: u32, seed: u64) -> SyntheticWorld {
    assert!(depth >= 1, "depth must be at least 1");
    assert!(depth <= ON_PATH_CELLS, "depth must not exceed {ON_PATH_CELLS}");
    assert!(branching >= 1, "branching must be at least 1");
    // Worst-case side-cell demand: detours + noops on chain screens, or the
    // `done` element + noops on the goal screen.
    assert!(
        branching.max(2) - 1 + distractors <= SIDE_CELLS,
        "branching - 1 + distractors must not exceed {SIDE_CELLS}"
    );

    let mut screens = BTreeMap::new();
    let chain_id = |i: u32| format!("s{i:02}");
    let trap_id = |i: u32, j: u32| format!("t{i:02}_{j}");

    for i in 0..=depth {
        let screen_id = chain_id(i);
        // Deterministic per-screen shuffle of side-cell assignment.
        let mut rng =
            ChaCha8Rng::seed_from_u64(derive_seed(seed, &["world_screen", &screen_id]));
        let mut side_cells: Vec<u32> = (ON_PATH_CELLS..GRID_COLS * GRID_ROWS).collect();
        side_cells.shuffle(&mut rng);
        let mut side_cells = side_cells.into_iter();

        let mut elements = Vec::new();
        if i < depth {
            elements.push(Element {
                som_index: 1,
                bbox: cell_bbox(i),
                effect: Effect::Navigate { target: chain_id(i + 1) },
                label: format!("continue_{:02}", i + 1),
            });
            for j in 1..branching {
                elements.push(Element {
                    som_index: elements.len() as u32 + 1,
                    bbox: cell_bbox(side_cells.next().expect("side cells checked")),
                    effect: Effect::Navigate { target: trap_id(i, j) },
                    label: format!("detour_{i:02}_{j}"),
                });
            }
        } else {
            elements.push(Element {
                som_index: 1,
                bbox: cell_bbox(side_cells.next().expect("side cells checked")),
                effect: Effect::TerminateAllowed,
                label: "done".to_owned(),
            });
        }
        for n in 0..distractors {
            elements.push(Element {
                som_index: elements.len() as u32 + 1,
                bbox: cell_bbox(side_cells.next().expect("side cells checked")),
                effect: Effect::Noop,
                label: format!("banner_{i:02}_{n}"),
            });
        }
        screens.insert(
            screen_id.clone(),
            Screen { screen_id, elements, text_slots: BTreeMap::new(), modal: false },
        );

        // Absorbing traps reached by this screen's detours. Modal, so no
        // action (including `open` and `home`) leads back out.
        if i < depth {
            for j in 1..branching {
                let tid = trap_id(i, j);
                let elements = vec![Element {
                    som_index: 1,
                    bbox: cell_bbox(ON_PATH_CELLS),
                    effect: Effect::Noop,
                    label: format!("stuck_{i:02}_{j}"),
                }];
                screens.insert(
                    tid.clone(),
                    Screen { screen_id: tid, elements, text_slots: BTreeMap::new(), modal: true },
                );
            }
        }
    }

    let world = SyntheticWorld {
        schema_version: WORLD_SCHEMA_VERSION.to_owned(),
        screens,
        initial_screen: chain_id(0),
        entry_points: BTreeMap::from([("app".to_owned(), chain_id(0))]),
        goal: GoalPredicate::OnScreen { screen: chain_id(depth) },
        max_steps: 2 * depth + 4,
        seed,
        meta: Some(WorldMeta { depth, branching, distractors }),
    };
    debug_assert!(world.validate().is_ok(), "generated worlds are structurally valid");
    world
}

/// BFS shortest click-distance from every screen to the goal screen, walking
/// navigate edges only. `None` for screens that cannot reach the goal.
/// Returns an empty map when the goal is not a plain on-screen predicate.
///
/// This is a convenience for reports; the oracle backend derives its own
/// distances over full session states.
pub fn screen_distances(world: &SyntheticWorld) -> BTreeMap<ScreenId, u32> {
    let goal_screen = match &world.goal {
        GoalPredicate::OnScreen { screen } => screen.clone(),
        _ => return BTreeMap::new(),
    };
    // Reverse-BFS from the goal over navigate edges.
    let mut incoming: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    for (id, screen) in &world.screens {
        for element in &screen.elements {
            if let Effect::Navigate { target } = &element.effect {
                incoming.entry(target.as_str()).or_default().push(id.as_str());
            }
        }
    }
    let mut dist = BTreeMap::new();
    let mut frontier = vec![goal_screen.as_str()];
    dist.insert(goal_screen.clone(), 0u32);
    let mut seen: BTreeSet<&str> = BTreeSet::from([goal_screen.as_str()]);
    let mut depth = 0;
    while !frontier.is_empty() {
        depth += 1;
        let mut next = Vec::new();
        for node in frontier {
            for &pred in incoming.get(node).map(|v| v.as_slice()).unwrap_or(&[]) {
                if seen.insert(pred) {
                    dist.insert(pred.to_owned(), depth);
                    next.push(pred);
                }
            }
        }
        frontier = next;
    }
    dist
}
