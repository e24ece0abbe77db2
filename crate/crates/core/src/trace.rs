//! Four-stage reasoning traces and per-token stage labels.
//!
//! A trace renders as
//! `<SS> ... </SS> <SP> ... </SP> <AD> ... </AD> <AF> ... </AF>` and every
//! rendered token, including the delimiters themselves, carries the label
//! of the stage it belongs to. Prompt tokens are labeled [`StageId::Prompt`]
//! and never contribute to supervised losses.

use serde::{Deserialize, Serialize};

use crate::tensor::{Error, Result};
use crate::vocab::{TokenId, Vocab, DELIMS};

/// Reasoning stage of a token.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StageId {
    Prompt,
    Ss,
    Sp,
    Ad,
    Af,
}

pub const STAGES: [StageId; 4] = [StageId::Ss, StageId::Sp, StageId::Ad, StageId::Af];

impl StageId {
    /// Expert channel aligned with this stage, if any.
    pub fn expert(self) -> Option<usize> {
        match self {
            StageId::Prompt => None,
            StageId::Ss => Some(0),
            StageId::Sp => Some(1),
            StageId::Ad => Some(2),
            StageId::Af => Some(3),
        }
    }

    pub fn from_expert(e: usize) -> StageId {
        STAGES[e]
    }

    pub fn name(self) -> &'static str {
        match self {
            StageId::Prompt => "prompt",
            StageId::Ss => "ss",
            StageId::Sp => "sp",
            StageId::Ad => "ad",
            StageId::Af => "af",
        }
    }
}

/// Token ids of the four stage segments, delimiters excluded.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReasoningTrace {
    pub segments: [Vec<TokenId>; 4],
}

impl ReasoningTrace {
    /// Render to the delimited token sequence.
    pub fn render(&self, vocab: &Vocab) -> Vec<TokenId> {
        let mut out = Vec::new();
        for (seg, delim) in self.segments.iter().zip(DELIMS) {
            out.push(vocab.id(delim[0]).expect("delimiter in vocab"));
            out.extend_from_slice(seg);
            out.push(vocab.id(delim[1]).expect("delimiter in vocab"));
        }
        out
    }

    /// Per-token stage labels of the rendered sequence.
    pub fn labels(&self) -> Vec<StageId> {
        let mut out = Vec::new();
        for (seg, stage) in self.segments.iter().zip(STAGES) {
            for _ in 0..seg.len() + 2 {
                out.push(stage);
            }
        }
        out
    }

    /// Segment tokens for one stage (no delimiters).
    pub fn segment(&self, stage: StageId) -> &[TokenId] {
        &self.segments[stage.expert().expect("non-prompt stage")]
    }

    /// Canonical text of the action-function segment.
    pub fn af_text(&self, vocab: &Vocab) -> String {
        vocab.decode(self.segment(StageId::Af))
    }

    /// Concatenated prefix context `segments[0..upto]`, rendered with
    /// delimiters; `upto` of 0 is the empty context.
    pub fn stage_prefix_tokens(&self, vocab: &Vocab, upto: usize) -> Vec<TokenId> {
        let mut out = Vec::new();
        for (seg, delim) in self.segments.iter().zip(DELIMS).take(upto) {
            out.push(vocab.id(delim[0]).expect("delimiter in vocab"));
            out.extend_from_slice(seg);
            out.push(vocab.id(delim[1]).expect("delimiter in vocab"));
        }
        out
    }

    /// The delimited action-function span `<AF> ... </AF>` — the target
    /// every reward model scores.
    pub fn af_span_tokens(&self, vocab: &Vocab) -> Vec<TokenId> {
        let mut out = vec![vocab.id(DELIMS[3][0]).expect("delimiter in vocab")];
        out.extend_from_slice(self.segment(StageId::Af));
        out.push(vocab.id(DELIMS[3][1]).expect("delimiter in vocab"));
        out
    }
}

/// Parse a rendered trace back into segments, checking the delimiter
/// grammar: the four stages in order, each exactly once, nothing outside.
pub fn parse_trace(tokens: &[TokenId], vocab: &Vocab) -> Result<ReasoningTrace> {
    let mut segments: [Vec<TokenId>; 4] = Default::default();
    let mut pos = 0usize;
    for (i, delim) in DELIMS.iter().enumerate() {
        let open = vocab.id(delim[0])?;
        let close = vocab.id(delim[1])?;
        if pos >= tokens.len() || tokens[pos] != open {
            return Err(Error::Parse(format!(
                "expected {} at token {pos}",
                delim[0]
            )));
        }
        pos += 1;
        let start = pos;
        while pos < tokens.len() && tokens[pos] != close {
            if is_delimiter(tokens[pos], vocab) {
                return Err(Error::Parse(format!(
                    "unexpected delimiter {:?} inside {}",
                    vocab.word(tokens[pos]),
                    delim[0]
                )));
            }
            pos += 1;
        }
        if pos >= tokens.len() {
            return Err(Error::Parse(format!("missing {}", delim[1])));
        }
        segments[i] = tokens[start..pos].to_vec();
        pos += 1;
    }
    if pos != tokens.len() {
        return Err(Error::Parse(format!(
            "trailing tokens after {} at {pos}",
            DELIMS[3][1]
        )));
    }
    Ok(ReasoningTrace { segments })
}

fn is_delimiter(t: TokenId, vocab: &Vocab) -> bool {
    let w = vocab.word(t);
    DELIMS.iter().flatten().any(|d| *d == w)
}

/// Label every token of a rendered trace with its stage. Tokens between
/// `<X>` and `</X>`, both delimiters included, are labeled `X`.
pub fn label_stages(tokens: &[TokenId], vocab: &Vocab) -> Result<Vec<StageId>> {
    let trace = parse_trace(tokens, vocab)?;
    Ok(trace.labels())
}
