//! Trajectory sampling, preference-pair construction and the
//! information-gain-driven preference objective.
//!
//! For each step the policy samples K traces, every trace is scored
//! (information gains, action accuracy) and classified correct or wrong by
//! the evaluation match rule. Pairs then follow three case-specific
//! strategies: among all-correct samples the best-reasoned trace faces the
//! one whose reasoning went negative somewhere (cc); in the mixed case the
//! best correct trace faces the worst wrong one (cw); when everything is
//! wrong the gold trace faces the worst sample (lw). The training loss is
//! a reference-anchored preference term plus weighted SFT and router-norm
//! terms on the chosen trace.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::action::parse_action;
use crate::eval::{matches_action, MATCH_THRESHOLD};
use crate::model::{self, forward_tape, Arch, ComeConfig, ModelTape};
use crate::params::{AdamConfig, ParamStore};
use crate::par::par_map;
use crate::reward::{score_bundle, RewardBundle, RewardConfig, RewardModelSet};
use crate::rng::Rng;
use crate::synthgui::{serialize_step, StepRecord};
use crate::tensor::{Error, Result, Tensor};
use crate::trace::parse_trace;
use crate::training::{cosine_lr, TrainConfig};
use crate::vocab::{TokenId, Vocab};

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleConfig {
    /// Traces sampled per step.
    pub k: usize,
    pub temperature: f32,
    /// Click threshold of the "hits the labeled action" rule (the
    /// evaluation match rule, looser than the reward threshold).
    pub hit_threshold: f64,
}

impl Default for SampleConfig {
    fn default() -> Self {
        SampleConfig {
            k: 10,
            temperature: 1.0,
            hit_threshold: MATCH_THRESHOLD,
        }
    }
}

/// One sampled trace with its rewards.
#[derive(Debug, Clone)]
pub struct SampledTrace {
    pub tokens: Vec<TokenId>,
    pub text: String,
    pub bundle: RewardBundle,
    /// Hits the labeled action under the evaluation match rule.
    pub correct: bool,
}

/// K scored samples for one step plus the scored gold trace.
#[derive(Debug, Clone)]
pub struct SampledSet {
    pub episode_id: u64,
    pub step_idx: usize,
    pub samples: Vec<SampledTrace>,
    pub gold: SampledTrace,
}

impl SampledSet {
    pub fn correct_count(&self) -> usize {
        self.samples.iter().filter(|s| s.correct).count()
    }
}

/// The sampling/scoring prompt: bos plus the serialized step, leaving one
/// third of the context window for the trace.
pub fn sampling_prompt(step: &StepRecord, vocab: &Vocab, cfg: &ComeConfig) -> Result<Vec<TokenId>> {
    let budget = cfg.max_seq.saturating_sub(cfg.max_seq / 3);
    let (prompt, _) = serialize_step(step, vocab, budget)?;
    let mut out = vec![vocab.bos()];
    out.extend(prompt);
    Ok(out)
}

/// Sample K traces for one step, score and classify each, and score the
/// gold trace. Malformed samples are kept with zero rewards.
pub fn sample_k(
    policy: &ParamStore,
    cfg: &ComeConfig,
    rms: &RewardModelSet,
    vocab: &Vocab,
    step: &StepRecord,
    rc: &RewardConfig,
    sc: &SampleConfig,
    seed: u64,
) -> Result<SampledSet> {
    if sc.k < 2 {
        return Err(Error::InvalidArgument("need at least two samples".into()));
    }
    let gold_action = parse_action(&step.gold_action)
        .map_err(|m| Error::Parse(format!("gold action: {:?}", m.text)))?;
    let prompt = sampling_prompt(step, vocab, cfg)?;
    let base = Rng::new(seed).fork(step.episode_id).fork(step.step_idx as u64);
    let max_new = cfg.max_seq - prompt.len();
    let mut samples = Vec::with_capacity(sc.k);
    for k in 0..sc.k {
        let sample_seed = base.fork(k as u64).next_u64();
        let gen = model::generate(
            policy,
            cfg,
            Arch::Come,
            &prompt,
            sc.temperature,
            sample_seed,
            max_new,
            vocab.eos(),
        )?;
        samples.push(score_sample(
            gen.tokens,
            &prompt,
            rms,
            vocab,
            &gold_action,
            rc,
            sc,
            &step.screen.widgets,
        )?);
    }
    let gold_trace = step.gold_trace.to_trace(vocab)?;
    let gold = score_sample(
        gold_trace.render(vocab),
        &prompt,
        rms,
        vocab,
        &gold_action,
        rc,
        sc,
        &step.screen.widgets,
    )?;
    Ok(SampledSet {
        episode_id: step.episode_id,
        step_idx: step.step_idx,
        samples,
        gold,
    })
}

#[allow(clippy::too_many_arguments)]
fn score_sample(
    tokens: Vec<TokenId>,
    prompt: &[TokenId],
    rms: &RewardModelSet,
    vocab: &Vocab,
    gold_action: &crate::action::Action,
    rc: &RewardConfig,
    sc: &SampleConfig,
    widgets: &[crate::synthgui::Widget],
) -> Result<SampledTrace> {
    let text = vocab.decode(&tokens);
    match parse_trace(&tokens, vocab) {
        Ok(trace) => {
            let bundle = score_bundle(rms, prompt, &trace, gold_action, rc, vocab)?;
            let pred = parse_action(&trace.af_text(vocab)).ok();
            let correct = matches_action(pred.as_ref(), gold_action, sc.hit_threshold, widgets);
            Ok(SampledTrace {
                tokens,
                text,
                bundle,
                correct,
            })
        }
        Err(_) => Ok(SampledTrace {
            tokens,
            text,
            bundle: RewardBundle::zero(),
            correct: false,
        }),
    }
}

/// Sample every step, in parallel; each step's stream depends only on
/// (seed, episode, step index).
pub fn sample_steps(
    policy: &ParamStore,
    cfg: &ComeConfig,
    rms: &RewardModelSet,
    vocab: &Vocab,
    steps: &[StepRecord],
    rc: &RewardConfig,
    sc: &SampleConfig,
    seed: u64,
) -> Result<Vec<SampledSet>> {
    let outs = par_map(steps, |s| sample_k(policy, cfg, rms, vocab, s, rc, sc, seed));
    outs.into_iter().collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    /// Two correct trajectories (all samples correct).
    Cc,
    /// A correct trajectory against a wrong one (mixed samples).
    Cw,
    /// The gold trace against a wrong trajectory (all samples wrong).
    Lw,
}

impl Strategy {
    pub fn name(self) -> &'static str {
        match self {
            Strategy::Cc => "cc",
            Strategy::Cw => "cw",
            Strategy::Lw => "lw",
        }
    }
}

#[derive(Debug, Clone)]
pub struct DpoPair {
    pub episode_id: u64,
    pub step_idx: usize,
    pub strategy: Strategy,
    pub chosen: SampledTrace,
    pub rejected: SampledTrace,
}

fn arg_best<'a, I, F>(items: I, score: F) -> Option<usize>
where
    I: Iterator<Item = (usize, &'a SampledTrace)>,
    F: Fn(&RewardBundle) -> f64,
{
    let mut best: Option<(usize, f64)> = None;
    for (i, s) in items {
        let v = score(&s.bundle);
        // strict comparison keeps the lowest index on ties
        if best.map_or(true, |(_, bv)| v > bv) {
            best = Some((i, v));
        }
    }
    best.map(|(i, _)| i)
}

/// Case-based pair selection. Returns none when a required subset is
/// empty; ties break toward the lowest sample index.
pub fn build_pair(set: &SampledSet) -> Option<DpoPair> {
    let n_correct = set.correct_count();
    let idx = |i: usize| set.samples[i].clone();
    if n_correct == set.samples.len() {
        // all correct: best positively-reasoned vs worst negatively-reasoned
        let chosen = arg_best(
            set.samples.iter().enumerate().filter(|(_, s)| s.bundle.r_ig_plus),
            |b| b.r_cot,
        )?;
        let rejected = arg_best(
            set.samples.iter().enumerate().filter(|(_, s)| !s.bundle.r_ig_plus),
            |b| -b.r_ig,
        )?;
        Some(DpoPair {
            episode_id: set.episode_id,
            step_idx: set.step_idx,
            strategy: Strategy::Cc,
            chosen: idx(chosen),
            rejected: idx(rejected),
        })
    } else if n_correct > 0 {
        // mixed: best correct (preferring fully positive reasoning) vs
        // the wrong trace with the least informative reasoning
        let preferred = arg_best(
            set.samples
                .iter()
                .enumerate()
                .filter(|(_, s)| s.correct && s.bundle.r_ig_plus),
            |b| b.r_cot,
        );
        let chosen = preferred.or_else(|| {
            arg_best(
                set.samples.iter().enumerate().filter(|(_, s)| s.correct),
                |b| b.r_cot,
            )
        })?;
        let rejected = arg_best(
            set.samples.iter().enumerate().filter(|(_, s)| !s.correct),
            |b| -b.r_ig,
        )?;
        Some(DpoPair {
            episode_id: set.episode_id,
            step_idx: set.step_idx,
            strategy: Strategy::Cw,
            chosen: idx(chosen),
            rejected: idx(rejected),
        })
    } else {
        // all wrong: gold trace vs the least informative sample
        let rejected = arg_best(set.samples.iter().enumerate(), |b| -b.r_ig)?;
        Some(DpoPair {
            episode_id: set.episode_id,
            step_idx: set.step_idx,
            strategy: Strategy::Lw,
            chosen: set.gold.clone(),
            rejected: idx(rejected),
        })
    }
}

/// Build pairs for all sets, keeping only the enabled strategies.
pub fn build_dpo_dataset(sets: &[SampledSet], enabled: &[Strategy]) -> Vec<DpoPair> {
    sets.iter()
        .filter_map(build_pair)
        .filter(|p| enabled.contains(&p.strategy))
        .collect()
}

/// Serialized sampled set: the `sample` artifact consumed by `build-dpo`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SampledSetRecord {
    pub step_ref: StepRef,
    pub samples: Vec<SampleRecord>,
    pub gold: SampleRecord,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SampleRecord {
    pub text: String,
    pub bundle: RewardBundle,
    pub correct: bool,
}

impl SampledSetRecord {
    pub fn from_set(s: &SampledSet) -> Self {
        let rec = |t: &SampledTrace| SampleRecord {
            text: t.text.clone(),
            bundle: t.bundle,
            correct: t.correct,
        };
        SampledSetRecord {
            step_ref: StepRef {
                episode_id: s.episode_id,
                step_idx: s.step_idx,
            },
            samples: s.samples.iter().map(rec).collect(),
            gold: rec(&s.gold),
        }
    }

    pub fn to_set(&self, vocab: &Vocab) -> Result<SampledSet> {
        let trace = |r: &SampleRecord| -> Result<SampledTrace> {
            Ok(SampledTrace {
                tokens: vocab.encode(&r.text)?,
                text: r.text.clone(),
                bundle: r.bundle,
                correct: r.correct,
            })
        };
        Ok(SampledSet {
            episode_id: self.step_ref.episode_id,
            step_idx: self.step_ref.step_idx,
            samples: self.samples.iter().map(trace).collect::<Result<_>>()?,
            gold: trace(&self.gold)?,
        })
    }
}

pub fn write_sets_jsonl(sets: &[SampledSet], path: &std::path::Path) -> Result<()> {
    use std::io::Write;
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for s in sets {
        let line = serde_json::to_string(&SampledSetRecord::from_set(s))
            .map_err(|e| Error::InvalidArgument(format!("set encode: {e}")))?;
        f.write_all(line.as_bytes())?;
        f.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_sets_jsonl(path: &std::path::Path, vocab: &Vocab) -> Result<Vec<SampledSet>> {
    use std::io::BufRead;
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in f.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: SampledSetRecord = serde_json::from_str(&line)
            .map_err(|e| Error::Parse(format!("set line {}: {e}", i + 1)))?;
        out.push(rec.to_set(vocab)?);
    }
    Ok(out)
}

/// Serialized pair record: `{step_ref, strategy, chosen, rejected}`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PairRecord {
    pub step_ref: StepRef,
    pub strategy: Strategy,
    pub chosen: TraceScore,
    pub rejected: TraceScore,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct StepRef {
    pub episode_id: u64,
    pub step_idx: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TraceScore {
    pub text: String,
    pub bundle: RewardBundle,
}

impl PairRecord {
    pub fn from_pair(p: &DpoPair) -> Self {
        PairRecord {
            step_ref: StepRef {
                episode_id: p.episode_id,
                step_idx: p.step_idx,
            },
            strategy: p.strategy,
            chosen: TraceScore {
                text: p.chosen.text.clone(),
                bundle: p.chosen.bundle,
            },
            rejected: TraceScore {
                text: p.rejected.text.clone(),
                bundle: p.rejected.bundle,
            },
        }
    }

    pub fn to_pair(&self, vocab: &Vocab) -> Result<DpoPair> {
        let decode = |ts: &TraceScore| -> Result<SampledTrace> {
            Ok(SampledTrace {
                tokens: vocab.encode(&ts.text)?,
                text: ts.text.clone(),
                bundle: ts.bundle,
                correct: false,
            })
        };
        Ok(DpoPair {
            episode_id: self.step_ref.episode_id,
            step_idx: self.step_ref.step_idx,
            strategy: self.strategy,
            chosen: decode(&self.chosen)?,
            rejected: decode(&self.rejected)?,
        })
    }
}

pub fn write_pairs_jsonl(pairs: &[DpoPair], path: &std::path::Path) -> Result<()> {
    use std::io::Write;
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for p in pairs {
        let line = serde_json::to_string(&PairRecord::from_pair(p))
            .map_err(|e| Error::InvalidArgument(format!("pair encode: {e}")))?;
        f.write_all(line.as_bytes())?;
        f.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_pairs_jsonl(path: &std::path::Path, vocab: &Vocab) -> Result<Vec<DpoPair>> {
    use std::io::BufRead;
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in f.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: PairRecord = serde_json::from_str(&line)
            .map_err(|e| Error::Parse(format!("pair line {}: {e}", i + 1)))?;
        out.push(rec.to_pair(vocab)?);
    }
    Ok(out)
}

/// Preference-loss hyperparameters.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DpoHyper {
    /// Preference temperature.
    pub beta: f32,
    /// SFT weight on the chosen trace.
    pub alpha: f32,
    /// Router-norm weight on the chosen trace.
    pub gamma: f32,
}

impl Default for DpoHyper {
    fn default() -> Self {
        DpoHyper {
            beta: 0.1,
            alpha: 1.0,
            gamma: 0.1,
        }
    }
}

/// Loss components of one pair.
#[derive(Debug, Clone)]
pub struct DpoLossOut {
    pub total: f64,
    pub pref: f64,
    pub sft: f64,
    pub rnorm: f64,
    pub grads: BTreeMap<String, Tensor>,
}

struct PreparedPair {
    prompt: Vec<TokenId>,
    chosen: Vec<TokenId>,
    rejected: Vec<TokenId>,
    chosen_labels: Vec<usize>,
    delta_ref: f32,
}

fn targets_and_mask(
    prompt_len: usize,
    tokens: &[TokenId],
) -> (Vec<TokenId>, Vec<bool>) {
    let n = tokens.len();
    let mut targets = vec![0; n];
    let mut mask = vec![false; n];
    for i in 0..n - 1 {
        targets[i] = tokens[i + 1];
        mask[i] = i + 1 >= prompt_len;
    }
    (targets, mask)
}

fn pair_loss(
    policy: &ParamStore,
    cfg: &ComeConfig,
    prep: &PreparedPair,
    hyper: &DpoHyper,
    with_grads: bool,
) -> Result<DpoLossOut> {
    let mut mt = if with_grads {
        ModelTape::new(policy)
    } else {
        ModelTape::frozen(policy)
    };
    let mut seq_c = prep.prompt.clone();
    seq_c.extend(&prep.chosen);
    let mut seq_r = prep.prompt.clone();
    seq_r.extend(&prep.rejected);
    let (targets_c, mask_c) = targets_and_mask(prep.prompt.len(), &seq_c);
    let (targets_r, mask_r) = targets_and_mask(prep.prompt.len(), &seq_r);

    let fc = forward_tape(&mut mt, cfg, Arch::Come, &seq_c, None)?;
    let lp_c = mt.tape.logprob_sum(fc.logits, &targets_c, &mask_c)?;
    // an empty rejected trace (degenerate sample) has log-probability 0
    let lp_r = if prep.rejected.is_empty() {
        mt.tape.constant(Tensor::scalar(0.0))
    } else {
        let fr = forward_tape(&mut mt, cfg, Arch::Come, &seq_r, None)?;
        mt.tape.logprob_sum(fr.logits, &targets_r, &mask_r)?
    };
    let delta_m = mt.tape.sub(lp_c, lp_r)?;
    let dref = mt.tape.constant(Tensor::scalar(prep.delta_ref));
    let margin = mt.tape.sub(delta_m, dref)?;
    let scaled = mt.tape.scale(margin, hyper.beta);
    let pref = mt.tape.neg_logsigmoid(scaled);

    let sft = mt.tape.cross_entropy(fc.logits, &targets_c, &mask_c)?;
    let mut total = pref;
    if hyper.alpha != 0.0 {
        let w = mt.tape.scale(sft, hyper.alpha);
        total = mt.tape.add(total, w)?;
    }
    let mut rnorm_val = 0.0f64;
    if hyper.gamma != 0.0 {
        let router = fc.router_logits.expect("channel model");
        let probs = mt.tape.softmax_rows(router);
        let rnorm = mt.tape.onehot_sqdist(probs, &prep.chosen_labels, &mask_c)?;
        rnorm_val = mt.tape.value(rnorm).item() as f64;
        let w = mt.tape.scale(rnorm, hyper.gamma);
        total = mt.tape.add(total, w)?;
    }
    let grads = if with_grads {
        let g = mt.tape.backward(total)?;
        mt.tape.param_grads(&g)
    } else {
        BTreeMap::new()
    };
    Ok(DpoLossOut {
        total: mt.tape.value(total).item() as f64,
        pref: mt.tape.value(pref).item() as f64,
        sft: mt.tape.value(sft).item() as f64,
        rnorm: rnorm_val,
        grads,
    })
}

fn prepare_pair(
    reference: &ParamStore,
    cfg: &ComeConfig,
    vocab: &Vocab,
    prompt: Vec<TokenId>,
    pair: &DpoPair,
) -> Result<PreparedPair> {
    // router labels of the chosen trace: per-position stage of the target
    let trace = parse_trace(&pair.chosen.tokens, vocab)
        .map_err(|e| Error::Parse(format!("chosen trace must be well formed: {e}")))?;
    let labels_by_token = trace.labels();
    let n = prompt.len() + pair.chosen.tokens.len();
    let mut chosen_labels = vec![0usize; n];
    for (j, lab) in labels_by_token.iter().enumerate() {
        // target j of the chosen span sits at position prompt_len + j - 1
        chosen_labels[prompt.len() + j - 1] = lab.expert().expect("trace stage");
    }
    let lp_ref_c =
        model::sequence_logprob(reference, cfg, Arch::Come, &prompt, &pair.chosen.tokens)? as f32;
    let lp_ref_r = if pair.rejected.tokens.is_empty() {
        0.0
    } else {
        model::sequence_logprob(reference, cfg, Arch::Come, &prompt, &pair.rejected.tokens)? as f32
    };
    Ok(PreparedPair {
        prompt,
        chosen: pair.chosen.tokens.clone(),
        rejected: pair.rejected.tokens.clone(),
        chosen_labels,
        delta_ref: lp_ref_c - lp_ref_r,
    })
}

/// The full preference loss for one pair: reference-anchored preference
/// term plus weighted SFT and router-norm terms on the chosen trace.
pub fn info_dpo_loss(
    policy: &ParamStore,
    reference: &ParamStore,
    cfg: &ComeConfig,
    vocab: &Vocab,
    prompt: &[TokenId],
    pair: &DpoPair,
    hyper: &DpoHyper,
) -> Result<DpoLossOut> {
    let prep = prepare_pair(reference, cfg, vocab, prompt.to_vec(), pair)?;
    pair_loss(policy, cfg, &prep, hyper, true)
}

/// Per-epoch mean loss components.
#[derive(Debug, Clone, Serialize)]
pub struct DpoEpochReport {
    pub epoch: usize,
    pub pref: f64,
    pub sft: f64,
    pub rnorm: f64,
}

/// Epoch loop over preference pairs. Prompts are rebuilt from the step
/// dataset; reference log-probability gaps are precomputed once.
pub fn dpo_train(
    policy: &mut ParamStore,
    reference: &ParamStore,
    cfg: &ComeConfig,
    vocab: &Vocab,
    pairs: &[DpoPair],
    steps: &[StepRecord],
    tc: &TrainConfig,
    hyper: &DpoHyper,
) -> Result<Vec<DpoEpochReport>> {
    if pairs.is_empty() {
        return Err(Error::InvalidArgument("no preference pairs".into()));
    }
    let by_ref: HashMap<(u64, usize), &StepRecord> = steps
        .iter()
        .map(|s| ((s.episode_id, s.step_idx), s))
        .collect();
    let frozen_ref: &ParamStore = reference;
    let prepared = {
        let prep_inputs: Vec<(&DpoPair, Vec<TokenId>)> = pairs
            .iter()
            .map(|p| -> Result<(&DpoPair, Vec<TokenId>)> {
                let step = by_ref.get(&(p.episode_id, p.step_idx)).ok_or_else(|| {
                    Error::InvalidArgument(format!(
                        "pair references unknown step {}:{} — regenerate the dataset",
                        p.episode_id, p.step_idx
                    ))
                })?;
                Ok((p, sampling_prompt(step, vocab, cfg)?))
            })
            .collect::<Result<_>>()?;
        let outs = par_map(&prep_inputs, |(p, prompt)| {
            prepare_pair(frozen_ref, cfg, vocab, prompt.clone(), p)
        });
        outs.into_iter().collect::<Result<Vec<_>>>()?
    };

    let steps_per_epoch = prepared.len().div_ceil(tc.batch_size);
    let total_steps = steps_per_epoch * tc.epochs;
    let adam = AdamConfig::default();
    let mut reports = Vec::new();
    let mut step_no = 0usize;
    for epoch in 0..tc.epochs {
        let mut rng = Rng::new(tc.seed).fork(0xd90 + epoch as u64);
        let mut order: Vec<usize> = (0..prepared.len()).collect();
        for i in (1..order.len()).rev() {
            let j = rng.below(i + 1);
            order.swap(i, j);
        }
        let mut sums = (0.0f64, 0.0f64, 0.0f64);
        for chunk in order.chunks(tc.batch_size) {
            let batch: Vec<&PreparedPair> = chunk.iter().map(|&i| &prepared[i]).collect();
            let frozen: &ParamStore = policy;
            let outs = par_map(&batch, |p| pair_loss(frozen, cfg, p, hyper, true));
            let mut grads: BTreeMap<String, Tensor> = BTreeMap::new();
            let mut n = 0usize;
            for o in outs {
                let o = o?;
                sums.0 += o.pref;
                sums.1 += o.sft;
                sums.2 += o.rnorm;
                n += 1;
                for (name, g) in o.grads {
                    match grads.get_mut(&name) {
                        Some(acc) => {
                            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                                *a += b;
                            }
                        }
                        None => {
                            grads.insert(name, g);
                        }
                    }
                }
            }
            for g in grads.values_mut() {
                for v in g.data_mut() {
                    *v /= n as f32;
                }
            }
            let lr = cosine_lr(tc.peak_lr, step_no, total_steps);
            policy.adam_step(&grads, lr, adam)?;
            step_no += 1;
        }
        let n = prepared.len() as f64;
        reports.push(DpoEpochReport {
            epoch,
            pref: sums.0 / n,
            sft: sums.1 / n,
            rnorm: sums.2 / n,
        });
    }
    Ok(reports)
}
