//! Deterministic generator for the synthetic text-serialized mobile-GUI
//! task: seeded episodes of screens, gold actions and gold four-stage
//! reasoning traces, stored as JSON-lines.

use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::action::{Action, PressKey, ScrollDir};
use crate::par::par_map;
use crate::rng::Rng;
use crate::tensor::{Error, Result};
use crate::trace::ReasoningTrace;
use crate::vocab::{TokenId, Vocab, APPS, KINDS, LEXICON};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Difficulty {
    Easy,
    Medium,
    Hard,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct Widget {
    pub id: usize,
    pub kind: String,
    pub label: String,
    /// (x0, y0, x1, y1) on the normalized 0-1000 grid.
    pub bbox: [u32; 4],
}

impl Widget {
    pub fn center(&self) -> (u32, u32) {
        (
            (self.bbox[0] + self.bbox[2]) / 2,
            (self.bbox[1] + self.bbox[3]) / 2,
        )
    }

    pub fn contains(&self, x: u32, y: u32) -> bool {
        x >= self.bbox[0] && x <= self.bbox[2] && y >= self.bbox[1] && y <= self.bbox[3]
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct Screen {
    pub app: String,
    pub widgets: Vec<Widget>,
}

/// Gold trace as text segments (delimiters are added at render time).
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct TraceText {
    pub ss: String,
    pub sp: String,
    pub ad: String,
    pub af: String,
}

impl TraceText {
    pub fn to_trace(&self, vocab: &Vocab) -> Result<ReasoningTrace> {
        Ok(ReasoningTrace {
            segments: [
                vocab.encode(&self.ss)?,
                vocab.encode(&self.sp)?,
                vocab.encode(&self.ad)?,
                vocab.encode(&self.af)?,
            ],
        })
    }
}

/// One supervised step: everything the agent sees plus the gold outputs.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct StepRecord {
    pub episode_id: u64,
    pub step_idx: usize,
    pub instruction: String,
    pub screen: Screen,
    pub history: Vec<String>,
    pub gold_action: String,
    pub gold_trace: TraceText,
}

#[derive(Debug, Clone)]
pub struct Episode {
    pub id: u64,
    pub steps: Vec<StepRecord>,
}

const SCROLL_DIRS: [ScrollDir; 4] = [
    ScrollDir::Up,
    ScrollDir::Down,
    ScrollDir::Left,
    ScrollDir::Right,
];
const PRESS_KEYS: [PressKey; 3] = [PressKey::Back, PressKey::Home, PressKey::Enter];

struct Plan {
    app: &'static str,
    click_kind: &'static str,
    click_label: &'static str,
    field_label: Option<&'static str>,
    type_text: Option<String>,
    press_key: Option<PressKey>,
    scrolls: Vec<ScrollDir>,
    widget_range: (usize, usize),
}

fn make_plan(rng: &mut Rng, difficulty: Difficulty) -> Plan {
    let (widget_range, scroll_max, type_prob, press_prob) = match difficulty {
        Difficulty::Easy => ((3, 5), 1, 0.3, 0.0),
        Difficulty::Medium => ((5, 8), 2, 0.5, 0.3),
        Difficulty::Hard => ((8, 10), 3, 0.7, 0.5),
    };
    let app = *rng.choose(&APPS);
    let click_kind = *rng.choose(&[KINDS[0], KINDS[2], KINDS[3]]); // clickable kinds
    let labels = &LEXICON[..48];
    // typed text draws from a reserved tail of the lexicon so text words
    // never double as widget labels
    let text_words = &LEXICON[48..];
    let click_label = *rng.choose(labels);
    let with_type = rng.next_f32() < type_prob;
    let field_label = if with_type {
        // distinct from the click target so screens keep labels unique
        let mut lab = *rng.choose(labels);
        while lab == click_label {
            lab = *rng.choose(labels);
        }
        Some(lab)
    } else {
        None
    };
    let type_text = field_label.map(|_| {
        let n = 1 + rng.below(3);
        (0..n)
            .map(|_| *rng.choose(text_words))
            .collect::<Vec<_>>()
            .join(" ")
    });
    let press_key = if with_type && rng.next_f32() < press_prob {
        Some(*rng.choose(&PRESS_KEYS))
    } else {
        None
    };
    let n_scrolls = rng.below(scroll_max + 1);
    // one direction per episode, stated in the instruction, so scrolling
    // is predictable from the prompt
    let dir = *rng.choose(&SCROLL_DIRS);
    let scrolls = vec![dir; n_scrolls];
    Plan {
        app,
        click_kind,
        click_label,
        field_label,
        type_text,
        press_key,
        scrolls,
        widget_range,
    }
}

/// Random widgets with unique labels; `must_have` are placed first.
fn make_screen(rng: &mut Rng, plan: &Plan, must_have: &[(&str, &str)], exclude: &[&str]) -> Screen {
    let (lo, hi) = plan.widget_range;
    let n = lo + rng.below(hi - lo + 1);
    let n = n.max(must_have.len());
    let mut used: Vec<String> = Vec::new();
    let mut widgets = Vec::new();
    let geometry = |rng: &mut Rng| -> [u32; 4] {
        let w = 60 + rng.below(240) as u32;
        let h = 40 + rng.below(120) as u32;
        let x0 = rng.below((1000 - w) as usize + 1) as u32;
        let y0 = rng.below((1000 - h) as usize + 1) as u32;
        [x0, y0, x0 + w, y0 + h]
    };
    for (kind, label) in must_have {
        used.push(label.to_string());
        widgets.push(Widget {
            id: widgets.len(),
            kind: kind.to_string(),
            label: label.to_string(),
            bbox: geometry(rng),
        });
    }
    while widgets.len() < n {
        let label = *rng.choose(&LEXICON[..48]);
        if used.iter().any(|u| u == label) || exclude.contains(&label) {
            continue;
        }
        used.push(label.to_string());
        widgets.push(Widget {
            id: widgets.len(),
            kind: rng.choose(&KINDS).to_string(),
            label: label.to_string(),
            bbox: geometry(rng),
        });
    }
    Screen {
        app: plan.app.to_string(),
        widgets,
    }
}

fn instruction_text(plan: &Plan) -> String {
    let mut s = format!("in {}", plan.app);
    if let Some(dir) = plan.scrolls.first() {
        s.push_str(&format!(" scroll {}", dir.word()));
    }
    s.push_str(&format!(" click {}", plan.click_label));
    if let (Some(field), Some(text)) = (plan.field_label, plan.type_text.as_ref()) {
        s.push_str(&format!(" and type {text} into {field}"));
    }
    if let Some(key) = plan.press_key {
        s.push_str(&format!(" then press {}", key.word()));
    }
    s
}

fn screen_summary(screen: &Screen, focus: Option<(&str, &str)>, missing: Option<&str>, done: bool) -> String {
    let mut s = format!("screen shows {} widgets", screen.app);
    if let Some((kind, label)) = focus {
        s.push_str(&format!(" including {kind} {label}"));
    }
    if let Some(label) = missing {
        s.push_str(&format!(" missing {label}"));
    }
    if done {
        s.push_str(" complete");
    }
    s
}

/// Generate one episode, fully determined by `seed` and `difficulty`.
pub fn gen_episode(seed: u64, difficulty: Difficulty) -> Episode {
    let mut rng = Rng::new(seed).fork(0x5e9);
    let plan = make_plan(&mut rng, difficulty);
    let instruction = instruction_text(&plan);
    let click_target = (plan.click_kind, plan.click_label);
    let mut steps: Vec<StepRecord> = Vec::new();
    let mut history: Vec<String> = Vec::new();

    let push_step = |screen: Screen,
                         action: Action,
                         trace: TraceText,
                         steps: &mut Vec<StepRecord>,
                         history: &mut Vec<String>| {
        let rendered = action.render();
        steps.push(StepRecord {
            episode_id: seed,
            step_idx: steps.len(),
            instruction: instruction.clone(),
            screen,
            history: history.clone(),
            gold_action: rendered.clone(),
            gold_trace: trace,
        });
        history.push(rendered);
    };

    for &dir in &plan.scrolls {
        let screen = make_screen(&mut rng, &plan, &[], &[plan.click_label]);
        let trace = TraceText {
            ss: screen_summary(&screen, None, Some(plan.click_label), false),
            sp: format!("next subtask find {}", plan.click_label),
            ad: "action scroll the page".to_string(),
            af: Action::Scroll(dir).render(),
        };
        push_step(screen, Action::Scroll(dir), trace, &mut steps, &mut history);
    }

    {
        let screen = make_screen(&mut rng, &plan, &[click_target], &[]);
        let target = &screen.widgets[0];
        let (cx, cy) = target.center();
        let trace = TraceText {
            ss: screen_summary(&screen, Some(click_target), None, false),
            sp: format!("next subtask tap {}", plan.click_label),
            ad: format!("action click target {}", plan.click_label),
            af: Action::Click { x: cx, y: cy }.render(),
        };
        push_step(screen, Action::Click { x: cx, y: cy }, trace, &mut steps, &mut history);
    }

    if let (Some(field), Some(text)) = (plan.field_label, plan.type_text.clone()) {
        let screen = make_screen(&mut rng, &plan, &[("textfield", field)], &[]);
        let trace = TraceText {
            ss: screen_summary(&screen, Some(("textfield", field)), None, false),
            sp: format!("next subtask type text into {field}"),
            ad: format!("action fill target {field}"),
            af: Action::Type(text.clone()).render(),
        };
        push_step(screen, Action::Type(text), trace, &mut steps, &mut history);
    }

    if let Some(key) = plan.press_key {
        let field = plan.field_label.expect("press only after type");
        let screen = make_screen(&mut rng, &plan, &[("textfield", field)], &[]);
        let trace = TraceText {
            ss: screen_summary(&screen, Some(("textfield", field)), None, false),
            sp: "next subtask confirm input".to_string(),
            ad: "action press the key".to_string(),
            af: Action::Press(key).render(),
        };
        push_step(screen, Action::Press(key), trace, &mut steps, &mut history);
    }

    {
        let screen = make_screen(&mut rng, &plan, &[], &[]);
        let trace = TraceText {
            ss: screen_summary(&screen, None, None, true),
            sp: "next subtask finish task".to_string(),
            ad: "action halt".to_string(),
            af: Action::Stop.render(),
        };
        push_step(screen, Action::Stop, trace, &mut steps, &mut history);
    }

    Episode { id: seed, steps }
}

/// Generate `count` episodes from consecutive seeds, in parallel.
pub fn gen_episodes(base_seed: u64, count: usize, difficulty: Difficulty) -> Vec<Episode> {
    let seeds: Vec<u64> = (0..count as u64).map(|i| base_seed.wrapping_add(i)).collect();
    par_map(&seeds, |&s| gen_episode(s, difficulty))
}

/// Train/val/test split by episode position: 80/10/10.
pub fn split_episodes(episodes: &[Episode]) -> (Vec<StepRecord>, Vec<StepRecord>, Vec<StepRecord>) {
    let n = episodes.len();
    let train_end = n * 8 / 10;
    let val_end = train_end + n / 10;
    let flat = |eps: &[Episode]| -> Vec<StepRecord> {
        eps.iter().flat_map(|e| e.steps.iter().cloned()).collect()
    };
    (
        flat(&episodes[..train_end]),
        flat(&episodes[train_end..val_end]),
        flat(&episodes[val_end..]),
    )
}

/// Serialize a step into prompt tokens:
/// `INSTRUCTION ... SCREEN ... WIDGET <kind> <label> AT(cx,cy) ... HISTORY a ; b`.
/// History is truncated oldest-first if the prompt would exceed
/// `max_tokens`; the flag reports whether truncation happened.
pub fn serialize_step(
    step: &StepRecord,
    vocab: &Vocab,
    max_tokens: usize,
) -> Result<(Vec<TokenId>, bool)> {
    let mut truncated = false;
    let mut keep = step.history.len();
    loop {
        let text = render_prompt(step, keep);
        let tokens = vocab.encode(&text)?;
        if tokens.len() <= max_tokens {
            return Ok((tokens, truncated));
        }
        if keep == 0 {
            return Err(Error::InvalidArgument(format!(
                "prompt still {} tokens after dropping all history (max {})",
                tokens.len(),
                max_tokens
            )));
        }
        keep -= 1;
        truncated = true;
    }
}

fn render_prompt(step: &StepRecord, keep_history: usize) -> String {
    let mut s = format!("INSTRUCTION {} SCREEN {}", step.instruction, step.screen.app);
    for w in &step.screen.widgets {
        let (cx, cy) = w.center();
        s.push_str(&format!(" WIDGET {} {} AT({cx},{cy})", w.kind, w.label));
    }
    s.push_str(" HISTORY");
    let start = step.history.len() - keep_history;
    for (i, h) in step.history[start..].iter().enumerate() {
        if i > 0 {
            s.push_str(" ;");
        }
        s.push(' ');
        s.push_str(h);
    }
    // fixed prompt terminator: the position that predicts the first trace
    // token always holds this token
    s.push_str(" ACT");
    s
}

pub fn write_jsonl(steps: &[StepRecord], path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for s in steps {
        let line = serde_json::to_string(s)
            .map_err(|e| Error::InvalidArgument(format!("jsonl encode: {e}")))?;
        f.write_all(line.as_bytes())?;
        f.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_jsonl(path: &Path) -> Result<Vec<StepRecord>> {
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in f.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| Error::Parse(format!("jsonl line {}: {e}", i + 1)))?,
        );
    }
    Ok(out)
}
