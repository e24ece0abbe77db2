//! Stage-conditioned reward models, information-gain estimation and the
//! action-accuracy reward.
//!
//! Four dense scorers condition on progressively longer reasoning
//! prefixes: scorer k sees the prompt plus the first k stage segments and
//! rates the action-function span. The information gain of stage e is the
//! log-probability the action span gains between scorer e-1 and scorer e;
//! correct reasoning earns positive gain at every stage.

use serde::{Deserialize, Serialize};

use crate::action::Action;
use crate::model::{self, Arch, ComeConfig};
use crate::params::ParamStore;
use crate::tensor::{Error, Result};
use crate::trace::{ReasoningTrace, StageId};
use crate::vocab::{TokenId, Vocab};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RewardMode {
    /// Graded values in [0, 1].
    Continuous,
    /// Any positive graded value collapses to 1.
    Discrete,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RewardConfig {
    /// Click distance threshold on the 0-1000 grid.
    pub delta_d: f64,
    /// Token-F1 threshold for typed text (strict inequality).
    pub delta_f: f64,
    pub mode: RewardMode,
    /// Reuse one base LM for all four scorers instead of training
    /// stage-specific ones.
    pub training_free: bool,
}

impl Default for RewardConfig {
    fn default() -> Self {
        RewardConfig {
            delta_d: 50.0,
            delta_f: 0.5,
            mode: RewardMode::Continuous,
            training_free: false,
        }
    }
}

/// All rewards computed for one sampled trace.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardBundle {
    pub ig_ss: f64,
    pub ig_sp: f64,
    pub ig_ad: f64,
    /// Total gain: `ig_ss + ig_sp + ig_ad`, in nats.
    pub r_ig: f64,
    /// All three stage gains strictly positive.
    pub r_ig_plus: bool,
    /// Action-accuracy reward in [0, 1].
    pub r_acc: f64,
    /// `r_ig * r_acc`.
    pub r_cot: f64,
}

impl RewardBundle {
    pub fn zero() -> Self {
        RewardBundle {
            ig_ss: 0.0,
            ig_sp: 0.0,
            ig_ad: 0.0,
            r_ig: 0.0,
            r_ig_plus: false,
            r_acc: 0.0,
            r_cot: 0.0,
        }
    }
}

/// The four stage-conditioned scorers. In training-free mode a single base
/// LM stands in for all four.
pub struct RewardModelSet {
    pub stores: Vec<ParamStore>,
    pub cfg: ComeConfig,
}

impl RewardModelSet {
    pub fn training_based(stores: Vec<ParamStore>, cfg: ComeConfig) -> Result<Self> {
        if stores.len() != 4 {
            return Err(Error::InvalidArgument(format!(
                "need 4 stage scorers, got {}",
                stores.len()
            )));
        }
        Ok(RewardModelSet { stores, cfg })
    }

    pub fn training_free(base: ParamStore, cfg: ComeConfig) -> Self {
        RewardModelSet {
            stores: vec![base],
            cfg,
        }
    }

    /// Scorer conditioned on k reasoning stages.
    pub fn rm(&self, k: usize) -> &ParamStore {
        if self.stores.len() == 1 {
            &self.stores[0]
        } else {
            &self.stores[k]
        }
    }
}

/// Teacher-forced sequence log-probability of `target` given `context`,
/// in nats, summed over target tokens with no length normalization.
pub fn seq_logprob(
    store: &ParamStore,
    cfg: &ComeConfig,
    context: &[TokenId],
    target: &[TokenId],
) -> Result<f64> {
    model::sequence_logprob(store, cfg, Arch::Dense, context, target)
}

/// Log-probability of the trace's action span under each of the four
/// conditioning levels: entry k conditions on the prompt plus the first k
/// stage segments.
pub fn stage_logprobs(
    set: &RewardModelSet,
    prompt: &[TokenId],
    trace: &ReasoningTrace,
    vocab: &Vocab,
) -> Result<[f64; 4]> {
    let target = trace.af_span_tokens(vocab);
    let mut out = [0.0f64; 4];
    for (k, slot) in out.iter_mut().enumerate() {
        let mut context = prompt.to_vec();
        context.extend(trace.stage_prefix_tokens(vocab, k));
        *slot = seq_logprob(set.rm(k), &set.cfg, &context, &target)?;
    }
    Ok(out)
}

/// Information gain of one reasoning stage: the action-span log-probability
/// under the stage's scorer minus the previous scorer's.
pub fn info_gain(
    set: &RewardModelSet,
    prompt: &[TokenId],
    trace: &ReasoningTrace,
    stage: StageId,
    vocab: &Vocab,
) -> Result<f64> {
    let e = match stage {
        StageId::Ss | StageId::Sp | StageId::Ad => stage.expert().expect("reasoning stage"),
        _ => {
            return Err(Error::InvalidArgument(
                "information gain is defined for the three reasoning stages".into(),
            ))
        }
    };
    let target = trace.af_span_tokens(vocab);
    let mut ctx_hi = prompt.to_vec();
    ctx_hi.extend(trace.stage_prefix_tokens(vocab, e + 1));
    let mut ctx_lo = prompt.to_vec();
    ctx_lo.extend(trace.stage_prefix_tokens(vocab, e));
    let hi = seq_logprob(set.rm(e + 1), &set.cfg, &ctx_hi, &target)?;
    let lo = seq_logprob(set.rm(e), &set.cfg, &ctx_lo, &target)?;
    Ok(hi - lo)
}

/// Whitespace-token F1 between two strings (symmetric; multiset overlap).
pub fn token_f1(a: &str, b: &str) -> f64 {
    let ta: Vec<&str> = a.split_whitespace().collect();
    let tb: Vec<&str> = b.split_whitespace().collect();
    if ta.is_empty() && tb.is_empty() {
        return 1.0;
    }
    if ta.is_empty() || tb.is_empty() {
        return 0.0;
    }
    let mut counts = std::collections::HashMap::new();
    for w in &ta {
        *counts.entry(*w).or_insert(0i64) += 1;
    }
    let mut common = 0i64;
    for w in &tb {
        let c = counts.entry(*w).or_insert(0);
        if *c > 0 {
            *c -= 1;
            common += 1;
        }
    }
    2.0 * common as f64 / (ta.len() + tb.len()) as f64
}

/// Action-level accuracy reward. Clicks decay linearly with distance up to
/// `delta_d`; typed text scores its token F1 when strictly above `delta_f`;
/// everything else is exact match. A missing (malformed) prediction scores
/// zero. Discrete mode collapses any positive value to one.
pub fn r_acc(pred: Option<&Action>, gold: &Action, rc: &RewardConfig) -> f64 {
    let continuous = match pred {
        None => 0.0,
        Some(p) if p.kind() != gold.kind() => 0.0,
        Some(p) => match (p, gold) {
            (Action::Click { x, y }, Action::Click { x: gx, y: gy }) => {
                let dx = *x as f64 - *gx as f64;
                let dy = *y as f64 - *gy as f64;
                let dis = (dx * dx + dy * dy).sqrt();
                1.0 - (dis / rc.delta_d).min(1.0)
            }
            (Action::Type(t), Action::Type(gt)) => {
                let f1 = token_f1(t, gt);
                if f1 > rc.delta_f {
                    f1.max(0.0)
                } else {
                    0.0
                }
            }
            (p, g) => {
                if p == g {
                    1.0
                } else {
                    0.0
                }
            }
        },
    };
    match rc.mode {
        RewardMode::Continuous => continuous,
        RewardMode::Discrete => {
            if continuous > 0.0 {
                1.0
            } else {
                0.0
            }
        }
    }
}

/// Compute the full reward bundle for one trace against the gold action.
pub fn score_bundle(
    set: &RewardModelSet,
    prompt: &[TokenId],
    trace: &ReasoningTrace,
    gold: &Action,
    rc: &RewardConfig,
    vocab: &Vocab,
) -> Result<RewardBundle> {
    let lp = stage_logprobs(set, prompt, trace, vocab)?;
    let ig_ss = lp[1] - lp[0];
    let ig_sp = lp[2] - lp[1];
    let ig_ad = lp[3] - lp[2];
    let r_ig = ig_ss + ig_sp + ig_ad;
    let r_ig_plus = ig_ss > 0.0 && ig_sp > 0.0 && ig_ad > 0.0;
    let pred = crate::action::parse_action(&trace.af_text(vocab)).ok();
    let acc = r_acc(pred.as_ref(), gold, rc);
    Ok(RewardBundle {
        ig_ss,
        ig_sp,
        ig_ad,
        r_ig,
        r_ig_plus,
        r_acc: acc,
        r_cot: r_ig * acc,
    })
}

/// Train one stage-conditioned scorer: a dense LM fit to predict the
/// action span given the prompt plus the first `stage_k` gold segments.
/// Returns the trained store and per-epoch mean NLL.
pub fn train_rm(
    init: ParamStore,
    cfg: &ComeConfig,
    vocab: &Vocab,
    stage_k: usize,
    data: &[crate::synthgui::StepRecord],
    tc: &crate::training::TrainConfig,
) -> Result<(ParamStore, Vec<f64>)> {
    if stage_k > 3 {
        return Err(Error::InvalidArgument(format!(
            "conditioning level {stage_k} out of range"
        )));
    }
    let seqs = crate::training::build_rm_seqs(data, vocab, cfg, stage_k)?;
    let mut store = init;
    let losses =
        crate::training::sft_fit(&mut store, cfg, Arch::Dense, &seqs, &|_| true, tc, 0.0)?;
    Ok((store, losses))
}
