//! Grounded GUI actions and the strict action-function grammar.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ScrollDir {
    Up,
    Down,
    Left,
    Right,
}

impl ScrollDir {
    pub fn word(self) -> &'static str {
        match self {
            ScrollDir::Up => "up",
            ScrollDir::Down => "down",
            ScrollDir::Left => "left",
            ScrollDir::Right => "right",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PressKey {
    Back,
    Home,
    Enter,
}

impl PressKey {
    pub fn word(self) -> &'static str {
        match self {
            PressKey::Back => "back",
            PressKey::Home => "home",
            PressKey::Enter => "enter",
        }
    }
}

/// One grounded action on the normalized 0-1000 coordinate grid.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Action {
    Click { x: u32, y: u32 },
    Scroll(ScrollDir),
    Type(String),
    Press(PressKey),
    Stop,
}

/// Category of an action, used by the type-accuracy metric.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ActionKind {
    Scroll,
    Click,
    Type,
    Press,
    Stop,
}

impl ActionKind {
    pub const ALL: [ActionKind; 5] = [
        ActionKind::Scroll,
        ActionKind::Click,
        ActionKind::Type,
        ActionKind::Press,
        ActionKind::Stop,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ActionKind::Scroll => "SCROLL",
            ActionKind::Click => "CLICK",
            ActionKind::Type => "TYPE",
            ActionKind::Press => "PRESS",
            ActionKind::Stop => "STOP",
        }
    }
}

impl Action {
    pub fn kind(&self) -> ActionKind {
        match self {
            Action::Click { .. } => ActionKind::Click,
            Action::Scroll(_) => ActionKind::Scroll,
            Action::Type(_) => ActionKind::Type,
            Action::Press(_) => ActionKind::Press,
            Action::Stop => ActionKind::Stop,
        }
    }

    /// Canonical text form, e.g. `CLICK(120,340)` or `TYPE("wifi password")`.
    pub fn render(&self) -> String {
        match self {
            Action::Click { x, y } => format!("CLICK({x},{y})"),
            Action::Scroll(d) => format!("SCROLL({})", d.word()),
            Action::Type(t) => format!("TYPE(\"{t}\")"),
            Action::Press(k) => format!("PRESS({})", k.word()),
            Action::Stop => "STOP".to_string(),
        }
    }
}

/// Text that failed the action grammar. Carries the offending text so the
/// caller can log it; rewards and metrics score it as wrong, never crash.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MalformedAction {
    pub text: String,
}

/// Parse the strict grammar
/// `CLICK(int,int) | SCROLL(word) | TYPE("...") | PRESS(word) | STOP`.
pub fn parse_action(text: &str) -> Result<Action, MalformedAction> {
    let malformed = || MalformedAction {
        text: text.to_string(),
    };
    let s = text.trim();
    if s == "STOP" {
        return Ok(Action::Stop);
    }
    let (head, rest) = match s.find('(') {
        Some(i) => (&s[..i], &s[i..]),
        None => return Err(malformed()),
    };
    if !rest.ends_with(')') {
        return Err(malformed());
    }
    let inner = &rest[1..rest.len() - 1];
    match head {
        "CLICK" => {
            let (xs, ys) = inner.split_once(',').ok_or_else(malformed)?;
            let parse_coord = |t: &str| -> Result<u32, MalformedAction> {
                if t.is_empty() || t.len() > 4 || !t.bytes().all(|b| b.is_ascii_digit()) {
                    return Err(malformed());
                }
                let v: u32 = t.parse().map_err(|_| malformed())?;
                if v > 1000 {
                    return Err(malformed());
                }
                Ok(v)
            };
            Ok(Action::Click {
                x: parse_coord(xs)?,
                y: parse_coord(ys)?,
            })
        }
        "SCROLL" => match inner {
            "up" => Ok(Action::Scroll(ScrollDir::Up)),
            "down" => Ok(Action::Scroll(ScrollDir::Down)),
            "left" => Ok(Action::Scroll(ScrollDir::Left)),
            "right" => Ok(Action::Scroll(ScrollDir::Right)),
            _ => Err(malformed()),
        },
        "TYPE" => {
            if inner.len() >= 2 && inner.starts_with('"') && inner.ends_with('"') {
                let body = &inner[1..inner.len() - 1];
                if body.contains('"') {
                    return Err(malformed());
                }
                Ok(Action::Type(body.to_string()))
            } else {
                Err(malformed())
            }
        }
        "PRESS" => match inner {
            "back" => Ok(Action::Press(PressKey::Back)),
            "home" => Ok(Action::Press(PressKey::Home)),
            "enter" => Ok(Action::Press(PressKey::Enter)),
            _ => Err(malformed()),
        },
        _ => Err(malformed()),
    }
}
