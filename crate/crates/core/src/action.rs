//! Unified action vocabulary and the `<think>` / `<tool_use>` turn grammar.
//!
//! The payload inside `<tool_use>` follows the `action-v1` schema:
//!
//! ```text
//! {"action": <snake_case kind>, ...kind-specific fields}
//! ```
//!
//! | kind           | fields (canonical order)                         |
//! |----------------|--------------------------------------------------|
//! | `click`        | `coordinate: [x, y]`                             |
//! | `type`         | `text: string`                                   |
//! | `scroll`       | `direction: up/down/left/right`, `magnitude?`    |
//! | `drag`         | `start: [x, y]`, `end: [x, y]`                   |
//! | `wait`         | `duration_ms?: integer`                          |
//! | `finished`     | `answer?: string`                                |
//! | `long_press`   | `coordinate: [x, y]`                             |
//! | `open_app`     | `name: string`                                   |
//! | `press_home`   | none                                             |
//! | `press_back`   | none                                             |
//! | `hotkey`       | `keys: [string, ...]` (nonempty)                 |
//! | `left_double`  | `coordinate: [x, y]`                             |
//! | `right_single` | `coordinate: [x, y]`                             |
//! | `retrieve`     | `step: integer`                                  |
//!
//! Coordinates are normalized to `[0, 1]` and rendered with four decimals.

use std::fmt;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

pub const SCHEMA_VERSION: &str = "action-v1";

/// Scroll distance used when a scroll action carries no magnitude.
pub const DEFAULT_SCROLL_MAGNITUDE: f64 = 0.5;

const THINK_OPEN: &str = "<think>";
const THINK_CLOSE: &str = "</think>";
const TOOL_OPEN: &str = "<tool_use>";
const TOOL_CLOSE: &str = "</tool_use>";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Platform {
    General,
    Mobile,
    Web,
}

impl fmt::Display for Platform {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Platform::General => "general",
            Platform::Mobile => "mobile",
            Platform::Web => "web",
        })
    }
}

/// A screen position in normalized coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub fn new(x: f64, y: f64) -> Self {
        Point { x, y }
    }

    pub fn distance(&self, other: &Point) -> f64 {
        ((self.x - other.x).powi(2) + (self.y - other.y).powi(2)).sqrt()
    }

    pub fn from_pixels(px: f64, py: f64, width: u32, height: u32) -> Self {
        Point {
            x: px / f64::from(width),
            y: py / f64::from(height),
        }
    }

    pub fn to_pixels(&self, width: u32, height: u32) -> (f64, f64) {
        (self.x * f64::from(width), self.y * f64::from(height))
    }

    fn is_normalized(&self) -> bool {
        (0.0..=1.0).contains(&self.x) && (0.0..=1.0).contains(&self.y)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScrollDirection {
    Up,
    Down,
    Left,
    Right,
}

impl ScrollDirection {
    pub fn as_str(&self) -> &'static str {
        match self {
            ScrollDirection::Up => "up",
            ScrollDirection::Down => "down",
            ScrollDirection::Left => "left",
            ScrollDirection::Right => "right",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "up" => Some(ScrollDirection::Up),
            "down" => Some(ScrollDirection::Down),
            "left" => Some(ScrollDirection::Left),
            "right" => Some(ScrollDirection::Right),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Action {
    Click {
        at: Point,
    },
    Type {
        text: String,
    },
    Scroll {
        direction: ScrollDirection,
        magnitude: Option<f64>,
    },
    Drag {
        from: Point,
        to: Point,
    },
    Wait {
        duration_ms: Option<u64>,
    },
    Finished {
        answer: Option<String>,
    },
    LongPress {
        at: Point,
    },
    OpenApp {
        name: String,
    },
    PressHome,
    PressBack,
    Hotkey {
        keys: Vec<String>,
    },
    LeftDouble {
        at: Point,
    },
    RightSingle {
        at: Point,
    },
    /// Tool action: look back at the screenshot of an earlier step.
    Retrieve {
        step: u32,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionKind {
    Click,
    Type,
    Scroll,
    Drag,
    Wait,
    Finished,
    LongPress,
    OpenApp,
    PressHome,
    PressBack,
    Hotkey,
    LeftDouble,
    RightSingle,
    Retrieve,
}

impl ActionKind {
    pub const ALL: [ActionKind; 14] = [
        ActionKind::Click,
        ActionKind::Type,
        ActionKind::Scroll,
        ActionKind::Drag,
        ActionKind::Wait,
        ActionKind::Finished,
        ActionKind::LongPress,
        ActionKind::OpenApp,
        ActionKind::PressHome,
        ActionKind::PressBack,
        ActionKind::Hotkey,
        ActionKind::LeftDouble,
        ActionKind::RightSingle,
        ActionKind::Retrieve,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            ActionKind::Click => "click",
            ActionKind::Type => "type",
            ActionKind::Scroll => "scroll",
            ActionKind::Drag => "drag",
            ActionKind::Wait => "wait",
            ActionKind::Finished => "finished",
            ActionKind::LongPress => "long_press",
            ActionKind::OpenApp => "open_app",
            ActionKind::PressHome => "press_home",
            ActionKind::PressBack => "press_back",
            ActionKind::Hotkey => "hotkey",
            ActionKind::LeftDouble => "left_double",
            ActionKind::RightSingle => "right_single",
            ActionKind::Retrieve => "retrieve",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        ActionKind::ALL.into_iter().find(|k| k.as_str() == name)
    }

    /// Platform group of the kind. `Retrieve` is a tool and reports `General`.
    pub fn platform(&self) -> Platform {
        match self {
            ActionKind::LongPress
            | ActionKind::OpenApp
            | ActionKind::PressHome
            | ActionKind::PressBack => Platform::Mobile,
            ActionKind::Hotkey | ActionKind::LeftDouble | ActionKind::RightSingle => Platform::Web,
            _ => Platform::General,
        }
    }

    /// Kinds whose payload is a single screen point.
    pub fn is_point(&self) -> bool {
        matches!(
            self,
            ActionKind::Click
                | ActionKind::LongPress
                | ActionKind::LeftDouble
                | ActionKind::RightSingle
        )
    }
}

impl fmt::Display for ActionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ActionError {
    #[error("payload is not a JSON object")]
    NotAnObject,
    #[error("payload has no string \"action\" key")]
    MissingKind,
    #[error("unknown action kind `{0}`")]
    UnknownKind(String),
    #[error("{kind}: field `{field}` {reason}")]
    InvalidField {
        kind: ActionKind,
        field: &'static str,
        reason: String,
    },
}

#[derive(Debug, Clone, PartialEq, Error)]
#[error("{kind} is not available on the {platform} platform")]
pub struct PlatformMismatch {
    pub kind: ActionKind,
    pub platform: Platform,
}

impl Action {
    pub fn kind(&self) -> ActionKind {
        match self {
            Action::Click { .. } => ActionKind::Click,
            Action::Type { .. } => ActionKind::Type,
            Action::Scroll { .. } => ActionKind::Scroll,
            Action::Drag { .. } => ActionKind::Drag,
            Action::Wait { .. } => ActionKind::Wait,
            Action::Finished { .. } => ActionKind::Finished,
            Action::LongPress { .. } => ActionKind::LongPress,
            Action::OpenApp { .. } => ActionKind::OpenApp,
            Action::PressHome => ActionKind::PressHome,
            Action::PressBack => ActionKind::PressBack,
            Action::Hotkey { .. } => ActionKind::Hotkey,
            Action::LeftDouble { .. } => ActionKind::LeftDouble,
            Action::RightSingle { .. } => ActionKind::RightSingle,
            Action::Retrieve { .. } => ActionKind::Retrieve,
        }
    }

    pub fn is_retrieve(&self) -> bool {
        matches!(self, Action::Retrieve { .. })
    }

    /// The target point of a point action.
    pub fn point(&self) -> Option<Point> {
        match self {
            Action::Click { at }
            | Action::LongPress { at }
            | Action::LeftDouble { at }
            | Action::RightSingle { at } => Some(*at),
            _ => None,
        }
    }

    /// Effective scroll distance, falling back to [`DEFAULT_SCROLL_MAGNITUDE`].
    pub fn scroll_magnitude(&self) -> Option<f64> {
        match self {
            Action::Scroll { magnitude, .. } => Some(magnitude.unwrap_or(DEFAULT_SCROLL_MAGNITUDE)),
            _ => None,
        }
    }

    pub fn validate_for_platform(&self, platform: Platform) -> Result<(), PlatformMismatch> {
        let kind = self.kind();
        let group = kind.platform();
        if kind == ActionKind::Retrieve || group == Platform::General || group == platform {
            Ok(())
        } else {
            Err(PlatformMismatch { kind, platform })
        }
    }

    /// Canonical `action-v1` JSON: fixed key order, four-decimal coordinates.
    pub fn to_canonical_json(&self) -> String {
        let mut out = String::from("{\"action\":");
        push_json_str(&mut out, self.kind().as_str());
        match self {
            Action::Click { at }
            | Action::LongPress { at }
            | Action::LeftDouble { at }
            | Action::RightSingle { at } => {
                out.push_str(",\"coordinate\":");
                push_point(&mut out, at);
            }
            Action::Type { text } => {
                out.push_str(",\"text\":");
                push_json_str(&mut out, text);
            }
            Action::Scroll {
                direction,
                magnitude,
            } => {
                out.push_str(",\"direction\":");
                push_json_str(&mut out, direction.as_str());
                if let Some(m) = magnitude {
                    out.push_str(&format!(",\"magnitude\":{m:.4}"));
                }
            }
            Action::Drag { from, to } => {
                out.push_str(",\"start\":");
                push_point(&mut out, from);
                out.push_str(",\"end\":");
                push_point(&mut out, to);
            }
            Action::Wait { duration_ms } => {
                if let Some(d) = duration_ms {
                    out.push_str(&format!(",\"duration_ms\":{d}"));
                }
            }
            Action::Finished { answer } => {
                if let Some(a) = answer {
                    out.push_str(",\"answer\":");
                    push_json_str(&mut out, a);
                }
            }
            Action::OpenApp { name } => {
                out.push_str(",\"name\":");
                push_json_str(&mut out, name);
            }
            Action::PressHome | Action::PressBack => {}
            Action::Hotkey { keys } => {
                out.push_str(",\"keys\":[");
                for (i, k) in keys.iter().enumerate() {
                    if i > 0 {
                        out.push(',');
                    }
                    push_json_str(&mut out, k);
                }
                out.push(']');
            }
            Action::Retrieve { step } => {
                out.push_str(&format!(",\"step\":{step}"));
            }
        }
        out.push('}');
        out
    }

    pub fn from_json_str(text: &str) -> Result<Action, ActionError> {
        let value: Value = serde_json::from_str(text).map_err(|_| ActionError::NotAnObject)?;
        Action::from_json(&value)
    }

    pub fn from_json(value: &Value) -> Result<Action, ActionError> {
        Action::decode(value, None)
    }

    /// Decodes an action whose coordinates are in pixels of a `width` x `height` screen.
    pub fn from_pixel_json(value: &Value, width: u32, height: u32) -> Result<Action, ActionError> {
        Action::decode(value, Some((width, height)))
    }

    fn decode(value: &Value, pixels: Option<(u32, u32)>) -> Result<Action, ActionError> {
        let obj = value.as_object().ok_or(ActionError::NotAnObject)?;
        let name = obj
            .get("action")
            .and_then(Value::as_str)
            .ok_or(ActionError::MissingKind)?;
        let kind = ActionKind::from_name(name)
            .ok_or_else(|| ActionError::UnknownKind(name.to_string()))?;
        let fields = Fields { obj, kind, pixels };
        let action = match kind {
            ActionKind::Click => Action::Click {
                at: fields.point("coordinate")?,
            },
            ActionKind::LongPress => Action::LongPress {
                at: fields.point("coordinate")?,
            },
            ActionKind::LeftDouble => Action::LeftDouble {
                at: fields.point("coordinate")?,
            },
            ActionKind::RightSingle => Action::RightSingle {
                at: fields.point("coordinate")?,
            },
            ActionKind::Type => Action::Type {
                text: fields.string("text")?,
            },
            ActionKind::Scroll => {
                let raw = fields.string("direction")?;
                let direction =
                    ScrollDirection::parse(&raw.to_ascii_lowercase()).ok_or_else(|| {
                        fields.invalid("direction", format!("`{raw}` is not up/down/left/right"))
                    })?;
                let magnitude = match obj.get("magnitude") {
                    None | Some(Value::Null) => None,
                    Some(v) => {
                        let m = v
                            .as_f64()
                            .ok_or_else(|| fields.invalid("magnitude", "must be a number"))?;
                        if !(m > 0.0 && m <= 1.0) {
                            return Err(fields.invalid("magnitude", "must lie in (0, 1]"));
                        }
                        Some(m)
                    }
                };
                Action::Scroll {
                    direction,
                    magnitude,
                }
            }
            ActionKind::Drag => Action::Drag {
                from: fields.point("start")?,
                to: fields.point("end")?,
            },
            ActionKind::Wait => Action::Wait {
                duration_ms: fields.optional_u64("duration_ms")?,
            },
            ActionKind::Finished => Action::Finished {
                answer: match obj.get("answer") {
                    None | Some(Value::Null) => None,
                    Some(Value::String(s)) => Some(s.clone()),
                    Some(_) => return Err(fields.invalid("answer", "must be a string")),
                },
            },
            ActionKind::OpenApp => Action::OpenApp {
                name: fields.string("name")?,
            },
            ActionKind::PressHome => Action::PressHome,
            ActionKind::PressBack => Action::PressBack,
            ActionKind::Hotkey => {
                let keys = obj
                    .get("keys")
                    .and_then(Value::as_array)
                    .ok_or_else(|| fields.invalid("keys", "must be an array of strings"))?
                    .iter()
                    .map(|k| k.as_str().map(str::to_string))
                    .collect::<Option<Vec<_>>>()
                    .ok_or_else(|| fields.invalid("keys", "must be an array of strings"))?;
                if keys.is_empty() {
                    return Err(fields.invalid("keys", "must not be empty"));
                }
                Action::Hotkey { keys }
            }
            ActionKind::Retrieve => {
                let step = fields
                    .optional_u64("step")?
                    .ok_or_else(|| fields.invalid("step", "is required"))?;
                let step =
                    u32::try_from(step).map_err(|_| fields.invalid("step", "is out of range"))?;
                Action::Retrieve { step }
            }
        };
        Ok(action)
    }

    /// Pixel-space JSON for a `width` x `height` screen (inverse of [`Action::from_pixel_json`]).
    pub fn to_pixel_json(&self, width: u32, height: u32) -> Value {
        let mut value: Value =
            serde_json::from_str(&self.to_canonical_json()).expect("canonical json");
        let obj = value.as_object_mut().expect("object");
        for key in ["coordinate", "start", "end"] {
            if let Some(Value::Array(xy)) = obj.get_mut(key) {
                let x = xy[0].as_f64().unwrap_or_default() * f64::from(width);
                let y = xy[1].as_f64().unwrap_or_default() * f64::from(height);
                *xy = vec![Value::from(x), Value::from(y)];
            }
        }
        value
    }

    /// Short natural-language rendering used in prompts and memory.
    pub fn describe(&self) -> String {
        match self {
            Action::Click { at } => format!("click at ({:.4}, {:.4})", at.x, at.y),
            Action::Type { text } => format!("type \"{text}\""),
            Action::Scroll {
                direction,
                magnitude,
            } => match magnitude {
                Some(m) => format!("scroll {} by {m:.2}", direction.as_str()),
                None => format!("scroll {}", direction.as_str()),
            },
            Action::Drag { from, to } => format!(
                "drag from ({:.4}, {:.4}) to ({:.4}, {:.4})",
                from.x, from.y, to.x, to.y
            ),
            Action::Wait {
                duration_ms: Some(d),
            } => format!("wait {d} ms"),
            Action::Wait { duration_ms: None } => "wait".to_string(),
            Action::Finished { answer: Some(a) } => format!("finish with answer \"{a}\""),
            Action::Finished { answer: None } => "finish the task".to_string(),
            Action::LongPress { at } => format!("long press at ({:.4}, {:.4})", at.x, at.y),
            Action::OpenApp { name } => format!("open app \"{name}\""),
            Action::PressHome => "press home".to_string(),
            Action::PressBack => "press back".to_string(),
            Action::Hotkey { keys } => format!("press hotkey {}", keys.join("+")),
            Action::LeftDouble { at } => format!("double click at ({:.4}, {:.4})", at.x, at.y),
            Action::RightSingle { at } => format!("right click at ({:.4}, {:.4})", at.x, at.y),
            Action::Retrieve { step } => format!("retrieve the screenshot of step {step}"),
        }
    }
}

struct Fields<'a> {
    obj: &'a Map<String, Value>,
    kind: ActionKind,
    pixels: Option<(u32, u32)>,
}

impl Fields<'_> {
    fn invalid(&self, field: &'static str, reason: impl Into<String>) -> ActionError {
        ActionError::InvalidField {
            kind: self.kind,
            field,
            reason: reason.into(),
        }
    }

    fn string(&self, field: &'static str) -> Result<String, ActionError> {
        self.obj
            .get(field)
            .and_then(Value::as_str)
            .map(str::to_string)
            .ok_or_else(|| self.invalid(field, "must be a string"))
    }

    fn optional_u64(&self, field: &'static str) -> Result<Option<u64>, ActionError> {
        match self.obj.get(field) {
            None | Some(Value::Null) => Ok(None),
            Some(v) => v
                .as_u64()
                .map(Some)
                .ok_or_else(|| self.invalid(field, "must be a nonnegative integer")),
        }
    }

    fn point(&self, field: &'static str) -> Result<Point, ActionError> {
        let xy = self
            .obj
            .get(field)
            .and_then(Value::as_array)
            .filter(|a| a.len() == 2)
            .ok_or_else(|| self.invalid(field, "must be a pair [x, y]"))?;
        let (x, y) = match (xy[0].as_f64(), xy[1].as_f64()) {
            (Some(x), Some(y)) => (x, y),
            _ => return Err(self.invalid(field, "must hold two numbers")),
        };
        let point = match self.pixels {
            Some((w, h)) => Point::from_pixels(x, y, w, h),
            None => Point::new(x, y),
        };
        if !point.is_normalized() {
            return Err(self.invalid(field, format!("({x}, {y}) lies outside the screen")));
        }
        Ok(point)
    }
}

fn push_point(out: &mut String, p: &Point) {
    out.push_str(&format!("[{:.4},{:.4}]", p.x, p.y));
}

fn push_json_str(out: &mut String, s: &str) {
    out.push_str(&serde_json::to_string(s).expect("string serialization is infallible"));
}

/// One model output: a reasoning block plus exactly one tool call.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentTurn {
    pub think: String,
    pub call: Action,
    /// Verbatim source text the turn was parsed from (canonical text for constructed turns).
    pub raw: String,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TurnParseError {
    #[error("no <think>...</think> block")]
    MissingThinkBlock,
    #[error("no <tool_use>...</tool_use> block")]
    MissingToolUseBlock,
    #[error("more than one <{0}> block")]
    DuplicateBlock(&'static str),
    #[error("malformed action JSON at byte {offset}: {message}")]
    MalformedActionJson { offset: usize, message: String },
    #[error("unknown action kind `{0}`")]
    UnknownActionKind(String),
    #[error("invalid action: {0}")]
    InvalidAction(ActionError),
}

impl AgentTurn {
    pub fn new(think: impl Into<String>, call: Action) -> Self {
        let think = think.into();
        let raw = render_turn(&think, &call);
        AgentTurn { think, call, raw }
    }
}

fn render_turn(think: &str, call: &Action) -> String {
    format!(
        "{THINK_OPEN}{think}{THINK_CLOSE}\n{TOOL_OPEN}{}{TOOL_CLOSE}",
        call.to_canonical_json()
    )
}

/// Canonical rendering of a turn. The think text is emitted verbatim and must not contain block tags.
pub fn serialize_turn(turn: &AgentTurn) -> String {
    render_turn(&turn.think, &turn.call)
}

/// Finds the single `open`...`close` block; returns the byte range of its content.
fn find_block(
    text: &str,
    open: &'static str,
    close: &str,
    tag: &'static str,
) -> Result<Option<(usize, usize)>, TurnParseError> {
    let Some(start) = text.find(open) else {
        return Ok(None);
    };
    let content_start = start + open.len();
    if text[content_start..].contains(open) {
        return Err(TurnParseError::DuplicateBlock(tag));
    }
    match text[content_start..].find(close) {
        Some(len) => Ok(Some((content_start, content_start + len))),
        None => Ok(None),
    }
}

/// Extracts the tool call from a `<tool_use>` block, ignoring any surrounding text.
pub fn parse_tool_use(text: &str) -> Result<Action, TurnParseError> {
    let (start, end) = find_block(text, TOOL_OPEN, TOOL_CLOSE, "tool_use")?
        .ok_or(TurnParseError::MissingToolUseBlock)?;
    decode_payload(text, start, end)
}

fn decode_payload(text: &str, start: usize, end: usize) -> Result<Action, TurnParseError> {
    let payload = &text[start..end];
    let value: Value =
        serde_json::from_str(payload).map_err(|e| TurnParseError::MalformedActionJson {
            offset: start + byte_offset(payload, e.line(), e.column()),
            message: e.to_string(),
        })?;
    Action::from_json(&value).map_err(|e| match e {
        ActionError::UnknownKind(name) => TurnParseError::UnknownActionKind(name),
        ActionError::NotAnObject | ActionError::MissingKind => {
            TurnParseError::MalformedActionJson {
                offset: start + (payload.len() - payload.trim_start().len()),
                message: e.to_string(),
            }
        }
        other => TurnParseError::InvalidAction(other),
    })
}

/// Converts serde_json's 1-based line / column into a byte offset within `text`.
fn byte_offset(text: &str, line: usize, column: usize) -> usize {
    let mut offset = 0;
    for (i, l) in text.split_inclusive('\n').enumerate() {
        if i + 1 == line {
            return (offset + column.saturating_sub(1)).min(text.len());
        }
        offset += l.len();
    }
    text.len()
}

pub fn parse_turn(text: &str) -> Result<AgentTurn, TurnParseError> {
    let (think_start, think_end) = find_block(text, THINK_OPEN, THINK_CLOSE, "think")?
        .ok_or(TurnParseError::MissingThinkBlock)?;
    let (tool_start, tool_end) = find_block(text, TOOL_OPEN, TOOL_CLOSE, "tool_use")?
        .ok_or(TurnParseError::MissingToolUseBlock)?;
    let call = decode_payload(text, tool_start, tool_end)?;
    Ok(AgentTurn {
        think: text[think_start..think_end].to_string(),
        call,
        raw: text.to_string(),
    })
}

/// True when `text` can be used verbatim as a think block.
pub fn is_valid_think(text: &str) -> bool {
    ![THINK_OPEN, THINK_CLOSE, TOOL_OPEN, TOOL_CLOSE]
        .iter()
        .any(|tag| text.contains(tag))
}
