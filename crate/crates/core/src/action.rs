//! GUI action vocabulary, response-format validation, and canonical action text.
//!
//! Actions are written as function-call text, e.g. `click(start_box='(0.5,0.5)')`,
//! `type(content='hello')`, `scroll(direction='down')` or `press_back()`.
//! A model response wraps one reasoning block and one action block:
//! `<think>...</think><action>...</action>`.
//!
//! Point coordinates are fractions of the screen width/height. Out-of-range
//! values are clamped to `[0, 1]`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ActionKind {
    Click,
    LongPress,
    Type,
    Scroll,
    OpenApp,
    PressBack,
    PressHome,
    PressEnter,
    PressRecent,
    Wait,
    Finished,
    Impossible,
}

impl ActionKind {
    pub const ALL: [ActionKind; 12] = [
        ActionKind::Click,
        ActionKind::LongPress,
        ActionKind::Type,
        ActionKind::Scroll,
        ActionKind::OpenApp,
        ActionKind::PressBack,
        ActionKind::PressHome,
        ActionKind::PressEnter,
        ActionKind::PressRecent,
        ActionKind::Wait,
        ActionKind::Finished,
        ActionKind::Impossible,
    ];

    /// Function name used in action text.
    pub fn name(self) -> &'static str {
        match self {
            ActionKind::Click => "click",
            ActionKind::LongPress => "long_press",
            ActionKind::Type => "type",
            ActionKind::Scroll => "scroll",
            ActionKind::OpenApp => "open_app",
            ActionKind::PressBack => "press_back",
            ActionKind::PressHome => "press_home",
            ActionKind::PressEnter => "press_enter",
            ActionKind::PressRecent => "press_recent",
            ActionKind::Wait => "wait",
            ActionKind::Finished => "finished",
            ActionKind::Impossible => "impossible",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.iter().copied().find(|k| k.name() == name)
    }

    /// Argument name for kinds that carry a value.
    pub fn arg_name(self) -> Option<&'static str> {
        match self {
            ActionKind::Click | ActionKind::LongPress => Some("start_box"),
            ActionKind::Type => Some("content"),
            ActionKind::Scroll => Some("direction"),
            ActionKind::OpenApp => Some("app_name"),
            _ => None,
        }
    }

    pub fn value_class(self) -> ValueClass {
        match self {
            ActionKind::Click | ActionKind::LongPress => ValueClass::Point,
            ActionKind::Type | ActionKind::OpenApp => ValueClass::Text,
            ActionKind::Scroll => ValueClass::Direction,
            _ => ValueClass::None,
        }
    }
}

impl fmt::Display for ActionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// What kind of payload an action kind carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ValueClass {
    Point,
    Text,
    Direction,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Up,
    Down,
    Left,
    Right,
}

impl Direction {
    pub const ALL: [Direction; 4] = [Direction::Up, Direction::Down, Direction::Left, Direction::Right];

    pub fn name(self) -> &'static str {
        match self {
            Direction::Up => "up",
            Direction::Down => "down",
            Direction::Left => "left",
            Direction::Right => "right",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Self::ALL.iter().copied().find(|d| d.name() == s)
    }
}

/// Normalized screen point. Construction clamps both coordinates to `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point {
    x: f64,
    y: f64,
}

impl Point {
    /// Returns `None` if either coordinate is not finite.
    pub fn new(x: f64, y: f64) -> Option<Self> {
        (x.is_finite() && y.is_finite()).then(|| Point {
            x: x.clamp(0.0, 1.0),
            y: y.clamp(0.0, 1.0),
        })
    }

    pub fn x(&self) -> f64 {
        self.x
    }

    pub fn y(&self) -> f64 {
        self.y
    }

    pub fn distance(&self, other: &Point) -> f64 {
        ((self.x - other.x).powi(2) + (self.y - other.y).powi(2)).sqrt()
    }
}

/// A GUI action. Each variant carries exactly the payload its kind requires.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Action {
    Click(Point),
    LongPress(Point),
    Type(String),
    Scroll(Direction),
    OpenApp(String),
    PressBack,
    PressHome,
    PressEnter,
    PressRecent,
    Wait,
    Finished,
    Impossible,
}

impl Action {
    pub fn kind(&self) -> ActionKind {
        match self {
            Action::Click(_) => ActionKind::Click,
            Action::LongPress(_) => ActionKind::LongPress,
            Action::Type(_) => ActionKind::Type,
            Action::Scroll(_) => ActionKind::Scroll,
            Action::OpenApp(_) => ActionKind::OpenApp,
            Action::PressBack => ActionKind::PressBack,
            Action::PressHome => ActionKind::PressHome,
            Action::PressEnter => ActionKind::PressEnter,
            Action::PressRecent => ActionKind::PressRecent,
            Action::Wait => ActionKind::Wait,
            Action::Finished => ActionKind::Finished,
            Action::Impossible => ActionKind::Impossible,
        }
    }

    pub fn point(&self) -> Option<Point> {
        match self {
            Action::Click(p) | Action::LongPress(p) => Some(*p),
            _ => None,
        }
    }

    pub fn text(&self) -> Option<&str> {
        match self {
            Action::Type(s) | Action::OpenApp(s) => Some(s),
            _ => None,
        }
    }

    fn without_value(kind: ActionKind) -> Option<Action> {
        Some(match kind {
            ActionKind::PressBack => Action::PressBack,
            ActionKind::PressHome => Action::PressHome,
            ActionKind::PressEnter => Action::PressEnter,
            ActionKind::PressRecent => Action::PressRecent,
            ActionKind::Wait => Action::Wait,
            ActionKind::Finished => Action::Finished,
            ActionKind::Impossible => Action::Impossible,
            _ => return None,
        })
    }
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&serialize_action(self))
    }
}

impl FromStr for Action {
    type Err = ParseActionError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        parse_action(s)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ParseActionError {
    #[error("unknown action kind in `{0}`")]
    UnknownKind(String),
    #[error("malformed action value in `{0}`")]
    MalformedValue(String),
    #[error("missing value for `{0}`")]
    MissingValue(String),
}

/// Canonical text for an action. Coordinates are printed with 4 decimals.
pub fn serialize_action(action: &Action) -> String {
    let kind = action.kind();
    match action {
        Action::Click(p) | Action::LongPress(p) => {
            format!("{}(start_box='({:.4},{:.4})')", kind.name(), p.x, p.y)
        }
        Action::Type(s) | Action::OpenApp(s) => {
            format!("{}({}='{}')", kind.name(), kind.arg_name().unwrap_or_default(), s)
        }
        Action::Scroll(d) => format!("scroll(direction='{}')", d.name()),
        _ => format!("{}()", kind.name()),
    }
}

/// Parses the contents of an action block.
pub fn parse_action(text: &str) -> Result<Action, ParseActionError> {
    let text = text.trim();
    let malformed = || ParseActionError::MalformedValue(text.to_string());

    let open = text.find('(');
    let name = open.map_or(text, |i| &text[..i]).trim();
    let kind = ActionKind::from_name(name)
        .ok_or_else(|| ParseActionError::UnknownKind(name.to_string()))?;

    let open = open.ok_or_else(malformed)?;
    let inner = text[open + 1..].strip_suffix(')').ok_or_else(malformed)?;
    let inner = inner.trim();

    let Some(arg) = kind.arg_name() else {
        return if inner.is_empty() {
            Action::without_value(kind).ok_or_else(malformed)
        } else {
            Err(malformed())
        };
    };

    if inner.is_empty() {
        return Err(ParseActionError::MissingValue(kind.name().to_string()));
    }
    let (key, raw) = inner.split_once('=').ok_or_else(malformed)?;
    if key.trim() != arg {
        return Err(malformed());
    }
    let raw = raw.trim();
    let value = raw
        .strip_prefix('\'')
        .and_then(|r| r.strip_suffix('\''))
        .filter(|_| raw.len() >= 2)
        .ok_or_else(malformed)?;

    match kind.value_class() {
        ValueClass::Point => {
            let point = parse_point(value).ok_or_else(malformed)?;
            Ok(if kind == ActionKind::Click {
                Action::Click(point)
            } else {
                Action::LongPress(point)
            })
        }
        ValueClass::Text => Ok(if kind == ActionKind::Type {
            Action::Type(value.to_string())
        } else {
            Action::OpenApp(value.to_string())
        }),
        ValueClass::Direction => Direction::from_name(value.trim())
            .map(Action::Scroll)
            .ok_or_else(malformed),
        ValueClass::None => Err(malformed()),
    }
}

fn parse_point(value: &str) -> Option<Point> {
    let body = value.trim().strip_prefix('(')?.strip_suffix(')')?;
    let (x, y) = body.split_once(',')?;
    let x: f64 = x.trim().parse().ok()?;
    let y: f64 = y.trim().parse().ok()?;
    Point::new(x, y)
}

/// Tag names wrapping the reasoning and action blocks of a response.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ResponseTags {
    pub think: String,
    pub action: String,
}

impl Default for ResponseTags {
    fn default() -> Self {
        ResponseTags {
            think: "think".into(),
            action: "action".into(),
        }
    }
}

impl ResponseTags {
    pub fn think_open(&self) -> String {
        format!("<{}>", self.think)
    }
    pub fn think_close(&self) -> String {
        format!("</{}>", self.think)
    }
    pub fn action_open(&self) -> String {
        format!("<{}>", self.action)
    }
    pub fn action_close(&self) -> String {
        format!("</{}>", self.action)
    }

    fn all(&self) -> [String; 4] {
        [
            self.think_open(),
            self.think_close(),
            self.action_open(),
            self.action_close(),
        ]
    }

    /// Wraps an action in a well-formed response.
    pub fn render(&self, think: &str, action: &Action) -> String {
        format!(
            "{}{}{}{}{}{}",
            self.think_open(),
            think,
            self.think_close(),
            self.action_open(),
            serialize_action(action),
            self.action_close()
        )
    }
}

/// A response that matched the full tag structure.
#[derive(Debug, Clone, PartialEq)]
pub struct ParsedResponse {
    pub think: String,
    pub action: Action,
}

/// Splits `text` into the think and action block bodies if it has exactly the
/// `<think>..</think><action>..</action>` layout with only whitespace outside
/// the blocks.
fn split_blocks<'a>(text: &'a str, tags: &ResponseTags) -> Option<(&'a str, &'a str)> {
    let all = tags.all();
    let contains_tag = |s: &str| all.iter().any(|t| s.contains(t.as_str()));

    let rest = text.trim().strip_prefix(all[0].as_str())?;
    let end = rest.find(all[1].as_str())?;
    let think = &rest[..end];
    if contains_tag(think) {
        return None;
    }
    let rest = rest[end + all[1].len()..].trim_start();
    let rest = rest.strip_prefix(all[2].as_str())?;
    let end = rest.find(all[3].as_str())?;
    let action = &rest[..end];
    if contains_tag(action) {
        return None;
    }
    if !rest[end + all[3].len()..].trim().is_empty() {
        return None;
    }
    Some((think, action))
}

pub fn parse_response(text: &str, tags: &ResponseTags) -> Option<ParsedResponse> {
    let (think, action) = split_blocks(text, tags)?;
    let action = parse_action(action).ok()?;
    Some(ParsedResponse {
        think: think.to_string(),
        action,
    })
}

/// True iff the text is exactly one think block followed by one action block
/// whose body parses.
pub fn validate_format(text: &str, tags: &ResponseTags) -> bool {
    parse_response(text, tags).is_some()
}

/// Body of the first `<action>...</action>` block, wherever it appears.
pub fn find_action_block<'a>(text: &'a str, tags: &ResponseTags) -> Option<&'a str> {
    let open = tags.action_open();
    let close = tags.action_close();
    let start = text.find(open.as_str())? + open.len();
    let len = text[start..].find(close.as_str())?;
    Some(&text[start..start + len])
}
