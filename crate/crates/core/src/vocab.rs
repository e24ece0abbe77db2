//! Closed word-level vocabulary and deterministic tokenizer.
//!
//! Every token the generator or the models can ever produce is listed here
//! at build time: template keywords, a noun lexicon for widget labels,
//! action words, single digits (multi-digit numbers are always rendered
//! digit by digit), punctuation, the four pairs of stage delimiters, and
//! bos/eos/pad. Encoding an unknown word is an error, never a fallback
//! token.

use std::collections::HashMap;

use crate::tensor::{Error, Result};

pub type TokenId = usize;

pub const PAD: &str = "<pad>";
pub const BOS: &str = "<bos>";
pub const EOS: &str = "<eos>";

pub const DELIMS: [[&str; 2]; 4] = [
    ["<SS>", "</SS>"],
    ["<SP>", "</SP>"],
    ["<AD>", "</AD>"],
    ["<AF>", "</AF>"],
];

pub const LEXICON: [&str; 60] = [
    "wifi", "bluetooth", "battery", "display", "sound", "storage", "network", "privacy",
    "account", "profile", "avatar", "photo", "video", "playlist", "album", "artist", "song",
    "volume", "brightness", "alarm", "timer", "stopwatch", "calendar", "event", "reminder",
    "note", "message", "chat", "contact", "email", "inbox", "folder", "document", "download",
    "upload", "search", "filter", "theme", "wallpaper", "password", "security", "backup",
    "update", "language", "keyboard", "location", "route", "forecast", "news", "feed", "story",
    "bookmark", "cart", "order", "payment", "ticket", "recipe", "podcast", "station", "tutorial",
];

pub const APPS: [&str; 10] = [
    "settings", "clock", "camera", "files", "music", "maps", "weather", "store", "phone",
    "gallery",
];

pub const KINDS: [&str; 4] = ["button", "textfield", "list_item", "icon"];

const KEYWORDS: [&str; 6] = ["INSTRUCTION", "SCREEN", "HISTORY", "WIDGET", "AT", "ACT"];

const ACTION_WORDS: [&str; 12] = [
    "CLICK", "SCROLL", "TYPE", "PRESS", "STOP", "up", "down", "left", "right", "back", "home",
    "enter",
];

const PROSE: [&str; 30] = [
    "screen", "shows", "widgets", "including", "missing", "complete", "next", "subtask", "find",
    "tap", "type", "text", "into", "confirm", "input", "finish", "task", "action", "scroll",
    "the", "page", "click", "target", "fill", "press", "key", "halt", "in", "and", "then",
];

const PUNCT: [&str; 5] = ["(", ")", ",", "\"", ";"];

/// Fixed bidirectional token table.
#[derive(Debug, Clone)]
pub struct Vocab {
    words: Vec<String>,
    index: HashMap<String, TokenId>,
}

impl Default for Vocab {
    fn default() -> Self {
        Self::new()
    }
}

impl Vocab {
    pub fn new() -> Self {
        let mut words: Vec<String> = Vec::new();
        for w in [PAD, BOS, EOS] {
            words.push(w.to_string());
        }
        for pair in DELIMS {
            words.push(pair[0].to_string());
            words.push(pair[1].to_string());
        }
        for d in 0..10u32 {
            words.push(d.to_string());
        }
        for group in [
            &PUNCT[..],
            &KEYWORDS[..],
            &ACTION_WORDS[..],
            &KINDS[..],
            &APPS[..],
            &PROSE[..],
            &LEXICON[..],
        ] {
            for w in group {
                words.push(w.to_string());
            }
        }
        let index = words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i))
            .collect();
        Vocab { words, index }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, word: &str) -> Result<TokenId> {
        self.index
            .get(word)
            .copied()
            .ok_or_else(|| Error::Parse(format!("word not in vocabulary: {word:?}")))
    }

    pub fn word(&self, id: TokenId) -> &str {
        &self.words[id]
    }

    pub fn pad(&self) -> TokenId {
        0
    }

    pub fn bos(&self) -> TokenId {
        1
    }

    pub fn eos(&self) -> TokenId {
        2
    }

    pub fn is_digit(&self, id: TokenId) -> bool {
        let w = self.word(id);
        w.len() == 1 && w.as_bytes()[0].is_ascii_digit()
    }

    /// Scan text into token ids. Splits on whitespace, takes `<...>` runs,
    /// single punctuation marks and single digits as their own tokens.
    pub fn encode(&self, text: &str) -> Result<Vec<TokenId>> {
        let mut out = Vec::new();
        let mut chars = text.chars().peekable();
        let mut word = String::new();
        let flush = |word: &mut String, out: &mut Vec<TokenId>| -> Result<()> {
            if !word.is_empty() {
                out.push(self.id(word)?);
                word.clear();
            }
            Ok(())
        };
        while let Some(c) = chars.next() {
            match c {
                c if c.is_whitespace() => flush(&mut word, &mut out)?,
                '<' => {
                    flush(&mut word, &mut out)?;
                    let mut tok = String::from("<");
                    for d in chars.by_ref() {
                        tok.push(d);
                        if d == '>' {
                            break;
                        }
                    }
                    out.push(self.id(&tok)?);
                }
                '(' | ')' | ',' | '"' | ';' => {
                    flush(&mut word, &mut out)?;
                    out.push(self.id(&c.to_string())?);
                }
                c if c.is_ascii_digit() => {
                    flush(&mut word, &mut out)?;
                    out.push(self.id(&c.to_string())?);
                }
                c => word.push(c),
            }
        }
        flush(&mut word, &mut out)?;
        Ok(out)
    }

    /// Render token ids back to canonical text. Inverse of [`Vocab::encode`]
    /// on any token sequence this crate produces.
    pub fn decode(&self, tokens: &[TokenId]) -> String {
        let mut out = String::new();
        let mut in_quote = false;
        let mut prev: Option<&str> = None;
        for &t in tokens {
            let w = self.word(t);
            let space = match (prev, w) {
                (None, _) => false,
                (_, ")") | (_, ",") | (_, "(") => false,
                (Some("("), _) | (Some(","), _) => false,
                (Some(p), d)
                    if d.len() == 1
                        && d.as_bytes()[0].is_ascii_digit()
                        && p.len() == 1
                        && p.as_bytes()[0].is_ascii_digit() =>
                {
                    false
                }
                (Some(_), "\"") if in_quote => false, // closing quote hugs content
                (Some("\""), _) if in_quote => false, // opening quote hugs content
                _ => true,
            };
            if w == "\"" {
                in_quote = !in_quote;
            }
            if space {
                out.push(' ');
            }
            out.push_str(w);
            prev = Some(w);
        }
        out
    }
}
