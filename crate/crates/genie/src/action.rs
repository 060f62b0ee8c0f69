//! The unified GUI action space: types, textual and JSON forms, rule-based
//! verification, and difficulty buckets.
//!
//! Eight operations cover device control: `open`, `click`, `swipe`,
//! `long_press`, `type_text`, `system_button`, `wait`, `terminate`. Every
//! action carries a free-text `action_desc` summarizing intent; spatial
//! operations target either an absolute pixel coordinate or a set-of-marks
//! (SoM) index into the current screen's annotated elements.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Axis-aligned rectangle in pixel space, inclusive on all edges.
///
/// Invariant: `x0 <= x1` and `y0 <= y1`, enforced at construction and at
/// deserialization. Serialized as a `[x0, y0, x1, y1]` array.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "(u32, u32, u32, u32)", into = "(u32, u32, u32, u32)")]
pub struct BBox {
    x0: u32,
    y0: u32,
    x1: u32,
    y1: u32,
}

impl BBox {
    /// Construct a box; returns `None` when the corners are out of order.
    pub fn new(x0: u32, y0: u32, x1: u32, y1: u32) -> Option<Self> {
        if x0 <= x1 && y0 <= y1 {
            Some(BBox { x0, y0, x1, y1 })
        } else {
            None
        }
    }

    pub fn x0(&self) -> u32 {
        self.x0
    }

    pub fn y0(&self) -> u32 {
        self.y0
    }

    pub fn x1(&self) -> u32 {
        self.x1
    }

    pub fn y1(&self) -> u32 {
        self.y1
    }

    /// Inclusive containment: edges and corners count as inside.
    pub fn contains(&self, x: u32, y: u32) -> bool {
        self.x0 <= x && x <= self.x1 && self.y0 <= y && y <= self.y1
    }

    /// Center point, rounding down on odd extents.
    pub fn center(&self) -> (u32, u32) {
        (self.x0 + (self.x1 - self.x0) / 2, self.y0 + (self.y1 - self.y0) / 2)
    }
}

impl TryFrom<(u32, u32, u32, u32)> for BBox {
    type Error = String;

    fn try_from(v: (u32, u32, u32, u32)) -> Result<Self, Self::Error> {
        BBox::new(v.0, v.1, v.2, v.3)
            .ok_or_else(|| format!("invalid bbox: corners out of order: {v:?}"))
    }
}

impl From<BBox> for (u32, u32, u32, u32) {
    fn from(b: BBox) -> Self {
        (b.x0, b.y0, b.x1, b.y1)
    }
}

/// The eight operation kinds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionKind {
    Open,
    Click,
    Swipe,
    LongPress,
    TypeText,
    SystemButton,
    Wait,
    Terminate,
}

impl ActionKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ActionKind::Open => "open",
            ActionKind::Click => "click",
            ActionKind::Swipe => "swipe",
            ActionKind::LongPress => "long_press",
            ActionKind::TypeText => "type_text",
            ActionKind::SystemButton => "system_button",
            ActionKind::Wait => "wait",
            ActionKind::Terminate => "terminate",
        }
    }

    fn from_name(name: &str) -> Option<Self> {
        Some(match name {
            "open" => ActionKind::Open,
            "click" => ActionKind::Click,
            "swipe" => ActionKind::Swipe,
            "long_press" => ActionKind::LongPress,
            "type_text" => ActionKind::TypeText,
            "system_button" => ActionKind::SystemButton,
            "wait" => ActionKind::Wait,
            "terminate" => ActionKind::Terminate,
            _ => return None,
        })
    }

    /// Kinds that target a screen location (coordinate or SoM index).
    pub fn is_spatial(&self) -> bool {
        matches!(self, ActionKind::Click | ActionKind::Swipe | ActionKind::LongPress)
    }
}

impl fmt::Display for ActionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Where a spatial action lands: an absolute pixel or a SoM index.
///
/// SoM indices are 1-based; index 0 is rejected at parse and validation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Target {
    Coordinate { x: u32, y: u32 },
    Som { index: u32 },
}

/// Swipe direction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Up,
    Down,
    Left,
    Right,
}

impl Direction {
    pub fn as_str(&self) -> &'static str {
        match self {
            Direction::Up => "up",
            Direction::Down => "down",
            Direction::Left => "left",
            Direction::Right => "right",
        }
    }

    fn from_name(name: &str) -> Option<Self> {
        Some(match name {
            "up" => Direction::Up,
            "down" => Direction::Down,
            "left" => Direction::Left,
            "right" => Direction::Right,
            _ => return None,
        })
    }
}

/// Swipe extent. The synthetic environment maps these to fixed pixel
/// distances (short 270, medium 540, long 1080).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SwipeDistance {
    Short,
    Medium,
    Long,
}

impl SwipeDistance {
    pub fn as_str(&self) -> &'static str {
        match self {
            SwipeDistance::Short => "short",
            SwipeDistance::Medium => "medium",
            SwipeDistance::Long => "long",
        }
    }

    fn from_name(name: &str) -> Option<Self> {
        Some(match name {
            "short" => SwipeDistance::Short,
            "medium" => SwipeDistance::Medium,
            "long" => SwipeDistance::Long,
            _ => return None,
        })
    }

    /// Pixel travel on the synthetic 1080x1920 canvas.
    pub fn pixels(&self) -> u32 {
        match self {
            SwipeDistance::Short => 270,
            SwipeDistance::Medium => 540,
            SwipeDistance::Long => 1080,
        }
    }
}

/// Claimed task outcome carried by `terminate`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TerminateStatus {
    Success,
    Failure,
}

impl TerminateStatus {
    pub fn as_str(&self) -> &'static str {
        match self {
            TerminateStatus::Success => "success",
            TerminateStatus::Failure => "failure",
        }
    }

    fn from_name(name: &str) -> Option<Self> {
        Some(match name {
            "success" => TerminateStatus::Success,
            "failure" => TerminateStatus::Failure,
            _ => return None,
        })
    }
}

/// Operation payload: the kind plus its kind-specific parameters.
#[derive(Debug, Clone, PartialEq)]
pub enum Op {
    Open { app: String },
    Click { target: Target },
    Swipe { target: Target, direction: Direction, distance: SwipeDistance },
    LongPress { target: Target },
    TypeText { text: String },
    SystemButton { button: String },
    Wait { seconds: f64 },
    Terminate { status: TerminateStatus },
}

/// A complete action: an operation plus its universal `action_desc`.
#[derive(Debug, Clone, PartialEq)]
pub struct Action {
    pub op: Op,
    pub desc: String,
}

impl Action {
    pub fn new(op: Op, desc: impl Into<String>) -> Self {
        Action { op, desc: desc.into() }
    }

    pub fn open(app: impl Into<String>, desc: impl Into<String>) -> Self {
        Action::new(Op::Open { app: app.into() }, desc)
    }

    pub fn click(x: u32, y: u32, desc: impl Into<String>) -> Self {
        Action::new(Op::Click { target: Target::Coordinate { x, y } }, desc)
    }

    pub fn click_som(index: u32, desc: impl Into<String>) -> Self {
        Action::new(Op::Click { target: Target::Som { index } }, desc)
    }

    pub fn swipe(
        target: Target,
        direction: Direction,
        distance: SwipeDistance,
        desc: impl Into<String>,
    ) -> Self {
        Action::new(Op::Swipe { target, direction, distance }, desc)
    }

    pub fn long_press(target: Target, desc: impl Into<String>) -> Self {
        Action::new(Op::LongPress { target }, desc)
    }

    pub fn type_text(text: impl Into<String>, desc: impl Into<String>) -> Self {
        Action::new(Op::TypeText { text: text.into() }, desc)
    }

    pub fn system_button(button: impl Into<String>, desc: impl Into<String>) -> Self {
        Action::new(Op::SystemButton { button: button.into() }, desc)
    }

    pub fn wait(seconds: f64, desc: impl Into<String>) -> Self {
        Action::new(Op::Wait { seconds }, desc)
    }

    pub fn terminate(status: TerminateStatus, desc: impl Into<String>) -> Self {
        Action::new(Op::Terminate { status }, desc)
    }

    pub fn kind(&self) -> ActionKind {
        match self.op {
            Op::Open { .. } => ActionKind::Open,
            Op::Click { .. } => ActionKind::Click,
            Op::Swipe { .. } => ActionKind::Swipe,
            Op::LongPress { .. } => ActionKind::LongPress,
            Op::TypeText { .. } => ActionKind::TypeText,
            Op::SystemButton { .. } => ActionKind::SystemButton,
            Op::Wait { .. } => ActionKind::Wait,
            Op::Terminate { .. } => ActionKind::Terminate,
        }
    }

    pub fn is_terminate(&self) -> bool {
        matches!(self.op, Op::Terminate { .. })
    }

    /// The spatial target, when the operation has one.
    pub fn target(&self) -> Option<Target> {
        match self.op {
            Op::Click { target } | Op::LongPress { target } => Some(target),
            Op::Swipe { target, .. } => Some(target),
            _ => None,
        }
    }

    /// Check value constraints that the type system cannot express:
    /// finite non-negative wait times and 1-based SoM indices.
    pub fn validate(&self) -> Result<(), ActionError> {
        if let Op::Wait { seconds } = self.op {
            if !seconds.is_finite() || seconds < 0.0 {
                return Err(ActionError::schema(
                    ActionKind::Wait,
                    format!("time must be a finite non-negative number, got {seconds}"),
                ));
            }
        }
        if let Some(Target::Som { index }) = self.target() {
            if index == 0 {
                return Err(ActionError::schema(self.kind(), "som index must be >= 1"));
            }
        }
        Ok(())
    }
}

/// Errors from the textual parser and from schema validation.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ActionError {
    /// The text is not a well-formed `kind(key=value, ...)` expression.
    #[error("parse error at byte {position}: {message}")]
    Parse { position: usize, message: String },
    /// The expression is well-formed but the parameters do not match the
    /// operation's schema (missing, extraneous, mistyped, or out of range).
    #[error("schema error for `{kind}`: {message}")]
    Schema { kind: String, message: String },
}

impl ActionError {
    fn parse(position: usize, message: impl Into<String>) -> Self {
        ActionError::Parse { position, message: message.into() }
    }

    fn schema(kind: ActionKind, message: impl Into<String>) -> Self {
        ActionError::Schema { kind: kind.as_str().to_owned(), message: message.into() }
    }
}

// ---------------------------------------------------------------------------
// Textual form
// ---------------------------------------------------------------------------

fn escape_into(out: &mut String, s: &str) {
    out.push('"');
    for c in s.chars() {
        match c {
            '\\' => out.push_str("\\\\"),
            '"' => out.push_str("\\\""),
            '\n' => out.push_str("\\n"),
            '\t' => out.push_str("\\t"),
            '\r' => out.push_str("\\r"),
            c if (c as u32) < 0x20 => {
                out.push_str(&format!("\\u{{{:x}}}", c as u32));
            }
            c => out.push(c),
        }
    }
    out.push('"');
}

fn target_into(out: &mut String, target: Target) {
    match target {
        Target::Coordinate { x, y } => {
            out.push_str(&format!("coordinate=({x},{y})"));
        }
        Target::Som { index } => {
            out.push_str(&format!("som={index}"));
        }
    }
}

/// Render an action in canonical textual form: `kind(key=value, ...)` with a
/// fixed parameter order per kind and `action_desc` always last. The output
/// of this function is the canonical identity used for deduplication and
/// deterministic tie-breaking.
pub fn serialize_action(action: &Action) -> String {
    let mut out = String::new();
    out.push_str(action.kind().as_str());
    out.push('(');
    match &action.op {
        Op::Open { app } => {
            out.push_str("text=");
            escape_into(&mut out, app);
        }
        Op::Click { target } | Op::LongPress { target } => {
            target_into(&mut out, *target);
        }
        Op::Swipe { target, direction, distance } => {
            target_into(&mut out, *target);
            out.push_str(&format!(", direction={}, distance={}", direction.as_str(), distance.as_str()));
        }
        Op::TypeText { text } => {
            out.push_str("text=");
            escape_into(&mut out, text);
        }
        Op::SystemButton { button } => {
            out.push_str("button=");
            escape_into(&mut out, button);
        }
        Op::Wait { seconds } => {
            out.push_str(&format!("time={seconds}"));
        }
        Op::Terminate { status } => {
            out.push_str(&format!("status={}", status.as_str()));
        }
    }
    out.push_str(", action_desc=");
    escape_into(&mut out, &action.desc);
    out.push(')');
    out
}

/// A parsed `key=value` argument before schema typing.
#[derive(Debug, Clone, PartialEq)]
enum Value {
    Str(String),
    Pair(u32, u32),
    Num(f64),
    Word(String),
}

impl Value {
    fn describe(&self) -> &'static str {
        match self {
            Value::Str(_) => "a quoted string",
            Value::Pair(_, _) => "a coordinate pair",
            Value::Num(_) => "a number",
            Value::Word(_) => "a bare word",
        }
    }
}

struct Parser<'a> {
    input: &'a str,
    pos: usize,
}

impl<'a> Parser<'a> {
    fn new(input: &'a str) -> Self {
        Parser { input, pos: 0 }
    }

    fn rest(&self) -> &'a str {
        &self.input[self.pos..]
    }

    fn peek(&self) -> Option<char> {
        self.rest().chars().next()
    }

    fn bump(&mut self) -> Option<char> {
        let c = self.peek()?;
        self.pos += c.len_utf8();
        Some(c)
    }

    fn skip_ws(&mut self) {
        while matches!(self.peek(), Some(c) if c.is_whitespace()) {
            self.bump();
        }
    }

    fn expect(&mut self, c: char) -> Result<(), ActionError> {
        self.skip_ws();
        match self.peek() {
            Some(found) if found == c => {
                self.bump();
                Ok(())
            }
            Some(found) => Err(ActionError::parse(self.pos, format!("expected `{c}`, found `{found}`"))),
            None => Err(ActionError::parse(self.pos, format!("expected `{c}`, found end of input"))),
        }
    }

    fn ident(&mut self) -> Result<&'a str, ActionError> {
        self.skip_ws();
        let start = self.pos;
        while matches!(self.peek(), Some(c) if c.is_ascii_lowercase() || c.is_ascii_digit() || c == '_')
        {
            self.bump();
        }
        if self.pos == start {
            return Err(ActionError::parse(start, "expected an identifier"));
        }
        Ok(&self.input[start..self.pos])
    }

    fn u32_literal(&mut self) -> Result<u32, ActionError> {
        self.skip_ws();
        let start = self.pos;
        while matches!(self.peek(), Some(c) if c.is_ascii_digit()) {
            self.bump();
        }
        if self.pos == start {
            return Err(ActionError::parse(start, "expected a non-negative integer"));
        }
        self.input[start..self.pos]
            .parse::<u32>()
            .map_err(|e| ActionError::parse(start, format!("integer out of range: {e}")))
    }

    fn string_literal(&mut self) -> Result<String, ActionError> {
        self.expect('"')?;
        let mut out = String::new();
        loop {
            let at = self.pos;
            match self.bump() {
                None => return Err(ActionError::parse(at, "unterminated string literal")),
                Some('"') => return Ok(out),
                Some('\\') => {
                    let esc_at = self.pos;
                    match self.bump() {
                        Some('\\') => out.push('\\'),
                        Some('"') => out.push('"'),
                        Some('n') => out.push('\n'),
                        Some('t') => out.push('\t'),
                        Some('r') => out.push('\r'),
                        Some('u') => {
                            self.expect('{')?;
                            let hex_start = self.pos;
                            while matches!(self.peek(), Some(c) if c.is_ascii_hexdigit()) {
                                self.bump();
                            }
                            let hex = &self.input[hex_start..self.pos];
                            self.expect('}')?;
                            let code = u32::from_str_radix(hex, 16).map_err(|_| {
                                ActionError::parse(hex_start, "invalid unicode escape")
                            })?;
                            let c = char::from_u32(code).ok_or_else(|| {
                                ActionError::parse(hex_start, "invalid unicode scalar value")
                            })?;
                            out.push(c);
                        }
                        Some(other) => {
                            return Err(ActionError::parse(
                                esc_at,
                                format!("unknown escape `\\{other}`"),
                            ))
                        }
                        None => return Err(ActionError::parse(esc_at, "unterminated escape")),
                    }
                }
                Some(c) => out.push(c),
            }
        }
    }

    fn number_literal(&mut self) -> Result<f64, ActionError> {
        self.skip_ws();
        let start = self.pos;
        if matches!(self.peek(), Some('-') | Some('+')) {
            self.bump();
        }
        while matches!(self.peek(), Some(c) if c.is_ascii_digit() || c == '.' || c == 'e' || c == 'E')
        {
            // Permit a sign directly after an exponent marker.
            let c = self.bump().expect("peeked");
            if (c == 'e' || c == 'E') && matches!(self.peek(), Some('-') | Some('+')) {
                self.bump();
            }
        }
        if self.pos == start {
            return Err(ActionError::parse(start, "expected a number"));
        }
        self.input[start..self.pos]
            .parse::<f64>()
            .map_err(|e| ActionError::parse(start, format!("invalid number: {e}")))
    }

    fn value(&mut self) -> Result<Value, ActionError> {
        self.skip_ws();
        match self.peek() {
            Some('"') => Ok(Value::Str(self.string_literal()?)),
            Some('(') => {
                self.expect('(')?;
                let x = self.u32_literal()?;
                self.expect(',')?;
                let y = self.u32_literal()?;
                self.expect(')')?;
                Ok(Value::Pair(x, y))
            }
            Some(c) if c.is_ascii_digit() || c == '-' || c == '+' || c == '.' => {
                Ok(Value::Num(self.number_literal()?))
            }
            Some(c) if c.is_ascii_lowercase() || c == '_' => Ok(Value::Word(self.ident()?.to_owned())),
            Some(c) => Err(ActionError::parse(self.pos, format!("unexpected character `{c}` in value"))),
            None => Err(ActionError::parse(self.pos, "expected a value, found end of input")),
        }
    }
}

/// Parameter multiset collected by the parser or the JSON bridge, before
/// schema typing.
#[derive(Debug, Default)]
struct Args {
    entries: Vec<(String, Value)>,
}

impl Args {
    fn insert(&mut self, key: String, value: Value, position: usize) -> Result<(), ActionError> {
        if self.entries.iter().any(|(k, _)| *k == key) {
            return Err(ActionError::parse(position, format!("duplicate parameter `{key}`")));
        }
        self.entries.push((key, value));
        Ok(())
    }

    fn take(&mut self, key: &str) -> Option<Value> {
        let idx = self.entries.iter().position(|(k, _)| k == key)?;
        Some(self.entries.remove(idx).1)
    }

    fn finish(self, kind: ActionKind) -> Result<(), ActionError> {
        if let Some((key, _)) = self.entries.first() {
            return Err(ActionError::schema(kind, format!("unexpected parameter `{key}`")));
        }
        Ok(())
    }

    fn required(&mut self, kind: ActionKind, key: &str) -> Result<Value, ActionError> {
        self.take(key)
            .ok_or_else(|| ActionError::schema(kind, format!("missing required parameter `{key}`")))
    }

    fn string(&mut self, kind: ActionKind, key: &str) -> Result<String, ActionError> {
        match self.required(kind, key)? {
            Value::Str(s) => Ok(s),
            other => Err(ActionError::schema(
                kind,
                format!("`{key}` expects a quoted string, got {}", other.describe()),
            )),
        }
    }

    fn word(&mut self, kind: ActionKind, key: &str) -> Result<String, ActionError> {
        match self.required(kind, key)? {
            Value::Word(w) => Ok(w),
            other => Err(ActionError::schema(
                kind,
                format!("`{key}` expects a bare word, got {}", other.describe()),
            )),
        }
    }

    fn number(&mut self, kind: ActionKind, key: &str) -> Result<f64, ActionError> {
        match self.required(kind, key)? {
            Value::Num(n) => Ok(n),
            other => Err(ActionError::schema(
                kind,
                format!("`{key}` expects a number, got {}", other.describe()),
            )),
        }
    }

    /// Exactly one of `coordinate` or `som` must be present.
    fn target(&mut self, kind: ActionKind) -> Result<Target, ActionError> {
        let coordinate = self.take("coordinate");
        let som = self.take("som");
        match (coordinate, som) {
            (Some(_), Some(_)) => Err(ActionError::schema(
                kind,
                "`coordinate` and `som` are mutually exclusive",
            )),
            (None, None) => Err(ActionError::schema(
                kind,
                "missing target: provide `coordinate` or `som`",
            )),
            (Some(Value::Pair(x, y)), None) => Ok(Target::Coordinate { x, y }),
            (Some(other), None) => Err(ActionError::schema(
                kind,
                format!("`coordinate` expects a pair like (100,200), got {}", other.describe()),
            )),
            (None, Some(Value::Num(n))) => {
                if n.fract() != 0.0 || !(1.0..=u32::MAX as f64).contains(&n) {
                    return Err(ActionError::schema(kind, "som index must be an integer >= 1"));
                }
                Ok(Target::Som { index: n as u32 })
            }
            (None, Some(other)) => Err(ActionError::schema(
                kind,
                format!("`som` expects an integer index, got {}", other.describe()),
            )),
        }
    }
}

fn build_action(kind: ActionKind, mut args: Args) -> Result<Action, ActionError> {
    let op = match kind {
        ActionKind::Open => Op::Open { app: args.string(kind, "text")? },
        ActionKind::Click => Op::Click { target: args.target(kind)? },
        ActionKind::Swipe => {
            let target = args.target(kind)?;
            let direction_word = args.word(kind, "direction")?;
            let direction = Direction::from_name(&direction_word).ok_or_else(|| {
                ActionError::schema(kind, format!("unknown direction `{direction_word}`"))
            })?;
            let distance_word = args.word(kind, "distance")?;
            let distance = SwipeDistance::from_name(&distance_word).ok_or_else(|| {
                ActionError::schema(kind, format!("unknown distance `{distance_word}`"))
            })?;
            Op::Swipe { target, direction, distance }
        }
        ActionKind::LongPress => Op::LongPress { target: args.target(kind)? },
        ActionKind::TypeText => Op::TypeText { text: args.string(kind, "text")? },
        ActionKind::SystemButton => Op::SystemButton { button: args.string(kind, "button")? },
        ActionKind::Wait => {
            let seconds = args.number(kind, "time")?;
            if !seconds.is_finite() || seconds < 0.0 {
                return Err(ActionError::schema(
                    kind,
                    format!("time must be a finite non-negative number, got {seconds}"),
                ));
            }
            Op::Wait { seconds }
        }
        ActionKind::Terminate => {
            let status_word = args.word(kind, "status")?;
            let status = TerminateStatus::from_name(&status_word).ok_or_else(|| {
                ActionError::schema(kind, format!("unknown status `{status_word}`"))
            })?;
            Op::Terminate { status }
        }
    };
    let desc = args.string(kind, "action_desc")?;
    args.finish(kind)?;
    Ok(Action { op, desc })
}

/// Parse the textual form `kind(key=value, ...)`.
///
/// Whitespace between tokens is ignored; parameters may appear in any order.
/// Returns [`ActionError::Parse`] for malformed text and
/// [`ActionError::Schema`] for well-formed text whose parameters do not fit
/// the operation.
pub fn parse_action(input: &str) -> Result<Action, ActionError> {
    let mut p = Parser::new(input);
    p.skip_ws();
    let name_at = p.pos;
    let name = p.ident()?;
    let kind = ActionKind::from_name(name)
        .ok_or_else(|| ActionError::parse(name_at, format!("unknown action kind `{name}`")))?;
    p.expect('(')?;
    let mut args = Args::default();
    p.skip_ws();
    if p.peek() != Some(')') {
        loop {
            let key_at = p.pos;
            let key = p.ident()?.to_owned();
            p.expect('=')?;
            let value = p.value()?;
            args.insert(key, value, key_at)?;
            p.skip_ws();
            match p.peek() {
                Some(',') => {
                    p.bump();
                }
                Some(')') => break,
                Some(c) => {
                    return Err(ActionError::parse(p.pos, format!("expected `,` or `)`, found `{c}`")))
                }
                None => return Err(ActionError::parse(p.pos, "expected `,` or `)`, found end of input")),
            }
        }
    }
    p.expect(')')?;
    p.skip_ws();
    if let Some(c) = p.peek() {
        return Err(ActionError::parse(p.pos, format!("trailing input after `)`: `{c}`")));
    }
    build_action(kind, args)
}

// ---------------------------------------------------------------------------
// JSON form
// ---------------------------------------------------------------------------

/// JSON wire form: `{"kind": ..., "params": {...}}` with the same parameter
/// names as the textual form. Unknown parameter keys are rejected.
#[derive(Debug, Serialize, Deserialize)]
struct ActionJson {
    kind: ActionKind,
    params: ParamsJson,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ParamsJson {
    #[serde(skip_serializing_if = "Option::is_none")]
    text: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    coordinate: Option<(u32, u32)>,
    #[serde(skip_serializing_if = "Option::is_none")]
    som: Option<u32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    direction: Option<Direction>,
    #[serde(skip_serializing_if = "Option::is_none")]
    distance: Option<SwipeDistance>,
    #[serde(skip_serializing_if = "Option::is_none")]
    button: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    time: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    status: Option<TerminateStatus>,
    #[serde(skip_serializing_if = "Option::is_none")]
    action_desc: Option<String>,
}

impl From<Action> for ActionJson {
    fn from(action: Action) -> Self {
        let mut params = ParamsJson { action_desc: Some(action.desc), ..ParamsJson::default() };
        let kind = match action.op {
            Op::Open { app } => {
                params.text = Some(app);
                ActionKind::Open
            }
            Op::Click { target } => {
                set_target(&mut params, target);
                ActionKind::Click
            }
            Op::Swipe { target, direction, distance } => {
                set_target(&mut params, target);
                params.direction = Some(direction);
                params.distance = Some(distance);
                ActionKind::Swipe
            }
            Op::LongPress { target } => {
                set_target(&mut params, target);
                ActionKind::LongPress
            }
            Op::TypeText { text } => {
                params.text = Some(text);
                ActionKind::TypeText
            }
            Op::SystemButton { button } => {
                params.button = Some(button);
                ActionKind::SystemButton
            }
            Op::Wait { seconds } => {
                params.time = Some(seconds);
                ActionKind::Wait
            }
            Op::Terminate { status } => {
                params.status = Some(status);
                ActionKind::Terminate
            }
        };
        ActionJson { kind, params }
    }
}

fn set_target(params: &mut ParamsJson, target: Target) {
    match target {
        Target::Coordinate { x, y } => params.coordinate = Some((x, y)),
        Target::Som { index } => params.som = Some(index),
    }
}

impl TryFrom<ActionJson> for Action {
    type Error = ActionError;

    fn try_from(json: ActionJson) -> Result<Self, Self::Error> {
        let mut args = Args::default();
        let p = json.params;
        let mut push = |key: &str, value: Option<Value>| {
            if let Some(v) = value {
                args.entries.push((key.to_owned(), v));
            }
        };
        push("text", p.text.map(Value::Str));
        push("coordinate", p.coordinate.map(|(x, y)| Value::Pair(x, y)));
        push("som", p.som.map(|i| Value::Num(i as f64)));
        push("direction", p.direction.map(|d| Value::Word(d.as_str().to_owned())));
        push("distance", p.distance.map(|d| Value::Word(d.as_str().to_owned())));
        push("button", p.button.map(Value::Str));
        push("time", p.time.map(Value::Num));
        push("status", p.status.map(|s| Value::Word(s.as_str().to_owned())));
        push("action_desc", p.action_desc.map(Value::Str));
        build_action(json.kind, args)
    }
}

/// Serialize an action to the JSON wire form.
pub fn action_to_json(action: &Action) -> serde_json::Value {
    serde_json::to_value(ActionJson::from(action.clone())).expect("action serialization is infallible")
}

/// Parse an action from the JSON wire form, applying the same schema checks
/// as the textual parser.
pub fn action_from_json(value: &serde_json::Value) -> Result<Action, ActionError> {
    let json: ActionJson = serde_json::from_value(value.clone()).map_err(|e| ActionError::Parse {
        position: 0,
        message: format!("invalid action json: {e}"),
    })?;
    Action::try_from(json)
}

impl Serialize for Action {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        ActionJson::from(self.clone()).serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for Action {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let json = ActionJson::deserialize(deserializer)?;
        Action::try_from(json).map_err(serde::de::Error::custom)
    }
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&serialize_action(self))
    }
}

// ---------------------------------------------------------------------------
// Rule-based verification
// ---------------------------------------------------------------------------

/// Mapping from SoM index to element bounding box on the current screen.
pub type SomMap = BTreeMap<u32, BBox>;

/// Reference answer for one step, as recorded in an annotated dataset.
///
/// Only the fields relevant to the kind need to be present: `bbox` for
/// spatial kinds, `text` for `open`/`type_text`, and the enum fields for
/// `swipe`/`system_button`/`terminate`. Absent enum fields are not checked.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthAction {
    pub kind: ActionKind,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bbox: Option<BBox>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub direction: Option<Direction>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub distance: Option<SwipeDistance>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub button: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub status: Option<TerminateStatus>,
}

impl GroundTruthAction {
    pub fn new(kind: ActionKind) -> Self {
        GroundTruthAction {
            kind,
            bbox: None,
            text: None,
            direction: None,
            distance: None,
            button: None,
            status: None,
        }
    }

    pub fn with_bbox(mut self, bbox: BBox) -> Self {
        self.bbox = Some(bbox);
        self
    }

    pub fn with_text(mut self, text: impl Into<String>) -> Self {
        self.text = Some(text.into());
        self
    }

    pub fn with_direction(mut self, direction: Direction) -> Self {
        self.direction = Some(direction);
        self
    }

    pub fn with_distance(mut self, distance: SwipeDistance) -> Self {
        self.distance = Some(distance);
        self
    }

    pub fn with_button(mut self, button: impl Into<String>) -> Self {
        self.button = Some(button.into());
        self
    }

    pub fn with_status(mut self, status: TerminateStatus) -> Self {
        self.status = Some(status);
        self
    }

    /// Derive the reference answer for an executed action, using the bbox of
    /// the element it touched (if any).
    pub fn from_action(action: &Action, bbox: Option<BBox>) -> Self {
        let mut truth = GroundTruthAction::new(action.kind());
        truth.bbox = bbox;
        match &action.op {
            Op::Open { app } => truth.text = Some(app.clone()),
            Op::TypeText { text } => truth.text = Some(text.clone()),
            Op::Swipe { direction, distance, .. } => {
                truth.direction = Some(*direction);
                truth.distance = Some(*distance);
            }
            Op::SystemButton { button } => truth.button = Some(button.clone()),
            Op::Terminate { status } => truth.status = Some(*status),
            Op::Click { .. } | Op::LongPress { .. } | Op::Wait { .. } => {}
        }
        truth
    }
}

/// Binary verification label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Positive,
    Negative,
}

/// Why verification produced its label. `Ok` appears exactly on positives.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VerdictReason {
    Ok,
    TypeMismatch,
    CoordinateOutsideBbox,
    TextInequivalent,
    ParameterMismatch,
}

/// Verification outcome. Invariant: `label == Positive` iff `reason == Ok`;
/// both constructors preserve it and deserialization re-checks it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "VerdictRepr", into = "VerdictRepr")]
pub struct Verdict {
    label: Label,
    reason: VerdictReason,
}

#[derive(Serialize, Deserialize)]
struct VerdictRepr {
    label: Label,
    reason: VerdictReason,
}

impl From<Verdict> for VerdictRepr {
    fn from(v: Verdict) -> Self {
        VerdictRepr { label: v.label, reason: v.reason }
    }
}

impl TryFrom<VerdictRepr> for Verdict {
    type Error = String;

    fn try_from(r: VerdictRepr) -> Result<Self, Self::Error> {
        let consistent = (r.label == Label::Positive) == (r.reason == VerdictReason::Ok);
        if consistent {
            Ok(Verdict { label: r.label, reason: r.reason })
        } else {
            Err(format!("inconsistent verdict: label {:?} with reason {:?}", r.label, r.reason))
        }
    }
}

impl Verdict {
    pub fn positive() -> Self {
        Verdict { label: Label::Positive, reason: VerdictReason::Ok }
    }

    /// Negative verdict; `reason` must not be `Ok`.
    pub fn negative(reason: VerdictReason) -> Self {
        assert_ne!(reason, VerdictReason::Ok, "negative verdicts need a failure reason");
        Verdict { label: Label::Negative, reason }
    }

    pub fn label(&self) -> Label {
        self.label
    }

    pub fn reason(&self) -> VerdictReason {
        self.reason
    }

    pub fn is_positive(&self) -> bool {
        self.label == Label::Positive
    }
}

/// Errors that prevent verification from reaching a verdict at all.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum VerifyError {
    /// The prediction targets a SoM index but no SoM mapping was supplied.
    #[error("prediction uses som index {index} but no SoM mapping is available")]
    UnsupportedSom { index: u32 },
    /// The ground truth lacks a field the kind requires (e.g. bbox for click).
    #[error("ground truth for `{kind}` is missing `{field}`")]
    IncompleteTruth { kind: String, field: &'static str },
}

/// Pluggable text-equivalence predicate for `open` and `type_text` payloads.
pub trait TextEquivalence: Send + Sync {
    fn equivalent(&self, predicted: &str, reference: &str) -> bool;
}

/// Default predicate: case-insensitive comparison after collapsing runs of
/// whitespace to single spaces and trimming the ends.
#[derive(Debug, Clone, Copy, Default)]
pub struct NormalizedEquality;

/// Collapse whitespace runs to single spaces, trim, and lowercase.
pub fn normalize_text(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase()
}

impl TextEquivalence for NormalizedEquality {
    fn equivalent(&self, predicted: &str, reference: &str) -> bool {
        normalize_text(predicted) == normalize_text(reference)
    }
}

/// Exact string equality, for callers that need strict matching.
#[derive(Debug, Clone, Copy, Default)]
pub struct ExactEquality;

impl TextEquivalence for ExactEquality {
    fn equivalent(&self, predicted: &str, reference: &str) -> bool {
        predicted == reference
    }
}

/// Rule-based verification of a predicted action against a reference answer.
///
/// Checks run in a fixed order and stop at the first failure:
/// 1. kind match (`type_mismatch`),
/// 2. for spatial kinds, resolved point inside the reference bbox, edges
///    inclusive (`coordinate_outside_bbox`),
/// 3. for text kinds, payload equivalence under `text_equiv`
///    (`text_inequivalent`),
/// 4. enum parameter equality for direction/distance/button/status
///    (`parameter_mismatch`).
///
/// `som_map` resolves SoM targets to their element's bbox center; it is only
/// required when the prediction uses SoM mode.
pub fn verify_action(
    predicted: &Action,
    truth: &GroundTruthAction,
    text_equiv: &dyn TextEquivalence,
    som_map: Option<&SomMap>,
) -> Result<Verdict, VerifyError> {
    let kind = predicted.kind();
    if kind != truth.kind {
        return Ok(Verdict::negative(VerdictReason::TypeMismatch));
    }

    if kind.is_spatial() {
        let bbox = truth.bbox.ok_or(VerifyError::IncompleteTruth {
            kind: kind.as_str().to_owned(),
            field: "bbox",
        })?;
        let (x, y) = match predicted.target().expect("spatial kinds carry a target") {
            Target::Coordinate { x, y } => (x, y),
            Target::Som { index } => {
                let map = som_map.ok_or(VerifyError::UnsupportedSom { index })?;
                let element = map.get(&index).ok_or(VerifyError::UnsupportedSom { index })?;
                element.center()
            }
        };
        if !bbox.contains(x, y) {
            return Ok(Verdict::negative(VerdictReason::CoordinateOutsideBbox));
        }
    }

    match &predicted.op {
        Op::Open { app } => {
            let reference = truth.text.as_deref().ok_or(VerifyError::IncompleteTruth {
                kind: kind.as_str().to_owned(),
                field: "text",
            })?;
            if !text_equiv.equivalent(app, reference) {
                return Ok(Verdict::negative(VerdictReason::TextInequivalent));
            }
        }
        Op::TypeText { text } => {
            let reference = truth.text.as_deref().ok_or(VerifyError::IncompleteTruth {
                kind: kind.as_str().to_owned(),
                field: "text",
            })?;
            if !text_equiv.equivalent(text, reference) {
                return Ok(Verdict::negative(VerdictReason::TextInequivalent));
            }
        }
        Op::Swipe { direction, distance, .. } => {
            if truth.direction.is_some_and(|d| d != *direction)
                || truth.distance.is_some_and(|d| d != *distance)
            {
                return Ok(Verdict::negative(VerdictReason::ParameterMismatch));
            }
        }
        Op::SystemButton { button } => {
            if truth.button.as_deref().is_some_and(|b| b != button) {
                return Ok(Verdict::negative(VerdictReason::ParameterMismatch));
            }
        }
        Op::Terminate { status } => {
            if truth.status.is_some_and(|s| s != *status) {
                return Ok(Verdict::negative(VerdictReason::ParameterMismatch));
            }
        }
        Op::Click { .. } | Op::LongPress { .. } | Op::Wait { .. } => {}
    }

    Ok(Verdict::positive())
}

// ---------------------------------------------------------------------------
// Difficulty buckets
// ---------------------------------------------------------------------------

/// Task difficulty by reference step count.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Difficulty {
    Easy,
    Medium,
    Hard,
}

impl fmt::Display for Difficulty {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Difficulty::Easy => "easy",
            Difficulty::Medium => "medium",
            Difficulty::Hard => "hard",
        })
    }
}

/// Bucket a reference step count: under 5 is easy, 5 through 10 is medium,
/// over 10 is hard.
pub fn classify_difficulty(step_count: u32) -> Difficulty {
    match step_count {
        0..=4 => Difficulty::Easy,
        5..=10 => Difficulty::Medium,
        _ => Difficulty::Hard,
    }
}
