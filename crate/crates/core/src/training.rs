//! The progressive curriculum: specialist fine-tuning of FFN stacks,
//! router alignment, then full chain-of-thought fine-tuning with the
//! routing regularizer.
//!
//! Parameter-group freeze contracts are structural: a stage's non-trained
//! parameters enter the tape as constants, so they can never receive an
//! update. Batches are processed per sequence (forward/backward in
//! parallel, gradients reduced in index order) and normalized by the
//! batch's total supervised-token count, which keeps results bit-identical
//! across thread counts.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

use crate::model::{
    self, forward_tape, Arch, ComeConfig, ModelTape, ROUTER_PARAM,
};
use crate::params::{AdamConfig, ParamStore};
use crate::par::par_map;
use crate::rng::Rng;
use crate::synthgui::{serialize_step, StepRecord};
use crate::tensor::{Error, Result, Tensor};
use crate::trace::{StageId, STAGES};
use crate::vocab::{TokenId, Vocab};

/// Hyperparameters for one training stage.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub peak_lr: f32,
    pub epochs: usize,
    pub batch_size: usize,
    /// Weight of the routing regularizer where the stage uses one.
    pub gamma: f32,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            peak_lr: 3e-3,
            epochs: 2,
            batch_size: 8,
            gamma: 0.1,
            seed: 0,
        }
    }
}

/// One supervised sequence: `targets[i]` is the token predicted at
/// position i (`tokens[i+1]`), and `supervise[i]` is the stage credited
/// for that prediction — `Prompt` marks unsupervised positions.
#[derive(Debug, Clone)]
pub struct SeqExample {
    pub tokens: Vec<TokenId>,
    pub targets: Vec<TokenId>,
    pub supervise: Vec<StageId>,
}

impl SeqExample {
    fn from_tokens(tokens: Vec<TokenId>, stage_of: Vec<StageId>) -> Self {
        debug_assert_eq!(tokens.len(), stage_of.len());
        let n = tokens.len();
        let mut targets = vec![0; n];
        let mut supervise = vec![StageId::Prompt; n];
        for i in 0..n.saturating_sub(1) {
            targets[i] = tokens[i + 1];
            supervise[i] = stage_of[i + 1];
        }
        SeqExample {
            tokens,
            targets,
            supervise,
        }
    }

    pub fn sft_mask(&self) -> Vec<bool> {
        self.supervise.iter().map(|&s| s != StageId::Prompt).collect()
    }

    pub fn router_labels(&self) -> Vec<usize> {
        self.supervise
            .iter()
            .map(|&s| s.expert().unwrap_or(0))
            .collect()
    }

    pub fn supervised_tokens(&self) -> usize {
        self.supervise.iter().filter(|&&s| s != StageId::Prompt).count()
    }
}

/// Prompt budget: room left for the supervised span plus bos/eos.
fn prompt_budget(cfg: &ComeConfig, span: usize) -> Result<usize> {
    let need = span + 2;
    if need >= cfg.max_seq {
        return Err(Error::InvalidArgument(format!(
            "supervised span of {span} tokens cannot fit in max_seq {}",
            cfg.max_seq
        )));
    }
    Ok(cfg.max_seq - need)
}

/// Full-trace sequence: prompt, all four stages, eos. Every trace token
/// (and the eos, credited to the final stage) is supervised.
pub fn build_full_seq(step: &StepRecord, vocab: &Vocab, cfg: &ComeConfig) -> Result<SeqExample> {
    let trace = step.gold_trace.to_trace(vocab)?;
    let trace_tokens = trace.render(vocab);
    let (prompt, _) = serialize_step(step, vocab, prompt_budget(cfg, trace_tokens.len())?)?;
    let mut tokens = vec![vocab.bos()];
    tokens.extend(prompt);
    let mut stage_of = vec![StageId::Prompt; tokens.len()];
    tokens.extend(&trace_tokens);
    stage_of.extend(trace.labels());
    tokens.push(vocab.eos());
    stage_of.push(StageId::Af);
    Ok(SeqExample::from_tokens(tokens, stage_of))
}

/// Specialist sequence for one stage: prompt plus earlier gold stages as
/// context, with only the target stage's span (plus eos for the final
/// stage) supervised.
pub fn build_expert_seq(
    step: &StepRecord,
    vocab: &Vocab,
    cfg: &ComeConfig,
    stage: StageId,
) -> Result<SeqExample> {
    let e = stage
        .expert()
        .ok_or_else(|| Error::InvalidArgument("prompt is not a trainable stage".into()))?;
    let trace = step.gold_trace.to_trace(vocab)?;
    let context = trace.stage_prefix_tokens(vocab, e);
    let mut span = trace.stage_prefix_tokens(vocab, e + 1)[context.len()..].to_vec();
    let with_eos = stage == StageId::Af;
    let span_len = span.len() + usize::from(with_eos);
    let (prompt, _) = serialize_step(step, vocab, prompt_budget(cfg, context.len() + span_len)?)?;
    let mut tokens = vec![vocab.bos()];
    tokens.extend(prompt);
    tokens.extend(&context);
    let mut stage_of = vec![StageId::Prompt; tokens.len()];
    tokens.append(&mut span);
    while stage_of.len() < tokens.len() {
        stage_of.push(stage);
    }
    if with_eos {
        tokens.push(vocab.eos());
        stage_of.push(stage);
    }
    Ok(SeqExample::from_tokens(tokens, stage_of))
}

/// Scorer sequence: prompt plus the first `stage_k` gold stages as
/// context, with the action span supervised.
pub fn build_rm_seq(
    step: &StepRecord,
    vocab: &Vocab,
    cfg: &ComeConfig,
    stage_k: usize,
) -> Result<SeqExample> {
    let trace = step.gold_trace.to_trace(vocab)?;
    let context = trace.stage_prefix_tokens(vocab, stage_k);
    let span = trace.af_span_tokens(vocab);
    let (prompt, _) = serialize_step(step, vocab, prompt_budget(cfg, context.len() + span.len())?)?;
    let mut tokens = vec![vocab.bos()];
    tokens.extend(prompt);
    tokens.extend(&context);
    let mut stage_of = vec![StageId::Prompt; tokens.len()];
    tokens.extend(&span);
    while stage_of.len() < tokens.len() {
        stage_of.push(StageId::Af);
    }
    Ok(SeqExample::from_tokens(tokens, stage_of))
}

pub fn build_full_seqs(data: &[StepRecord], vocab: &Vocab, cfg: &ComeConfig) -> Result<Vec<SeqExample>> {
    data.iter().map(|s| build_full_seq(s, vocab, cfg)).collect()
}

pub fn build_expert_seqs(
    data: &[StepRecord],
    vocab: &Vocab,
    cfg: &ComeConfig,
    stage: StageId,
) -> Result<Vec<SeqExample>> {
    data.iter()
        .map(|s| build_expert_seq(s, vocab, cfg, stage))
        .collect()
}

pub fn build_rm_seqs(
    data: &[StepRecord],
    vocab: &Vocab,
    cfg: &ComeConfig,
    stage_k: usize,
) -> Result<Vec<SeqExample>> {
    data.iter()
        .map(|s| build_rm_seq(s, vocab, cfg, stage_k))
        .collect()
}

/// Cosine decay from the peak over the whole run.
pub fn cosine_lr(peak: f32, step: usize, total_steps: usize) -> f32 {
    if total_steps == 0 {
        return peak;
    }
    let t = step as f32 / total_steps as f32;
    peak * 0.5 * (1.0 + (std::f32::consts::PI * t).cos())
}

fn shuffled_indices(n: usize, rng: &mut Rng) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.below(i + 1);
        idx.swap(i, j);
    }
    idx
}

fn merge_grads(
    into: &mut BTreeMap<String, Tensor>,
    from: BTreeMap<String, Tensor>,
) {
    for (name, g) in from {
        match into.get_mut(&name) {
            Some(acc) => {
                for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a += b;
                }
            }
            None => {
                into.insert(name, g);
            }
        }
    }
}

fn scale_grads(grads: &mut BTreeMap<String, Tensor>, s: f32) {
    for g in grads.values_mut() {
        for v in g.data_mut() {
            *v *= s;
        }
    }
}

struct SeqLoss {
    nll: f64,
    rnorm: f64,
    count: usize,
    grads: BTreeMap<String, Tensor>,
}

/// Forward/backward for one sequence under an SFT-style loss:
/// summed NLL over supervised targets plus `gamma` times the summed
/// router-norm penalty (channel architecture only).
fn seq_loss(
    store: &ParamStore,
    cfg: &ComeConfig,
    arch: Arch,
    seq: &SeqExample,
    trainable: &(dyn Fn(&str) -> bool + Sync),
    gamma: f32,
    with_grads: bool,
) -> Result<SeqLoss> {
    let mut mt = if with_grads {
        ModelTape::with_filter(store, trainable)
    } else {
        ModelTape::frozen(store)
    };
    let f = forward_tape(&mut mt, cfg, arch, &seq.tokens, None)?;
    let mask = seq.sft_mask();
    let count = mask.iter().filter(|&&m| m).count();
    if count == 0 {
        return Err(Error::InvalidArgument("sequence with no supervised tokens".into()));
    }
    let nll = mt.tape.nll_sum(f.logits, &seq.targets, &mask)?;
    let mut loss = nll;
    let mut rnorm_val = 0.0f64;
    if gamma > 0.0 {
        let router = f.router_logits.ok_or_else(|| {
            Error::InvalidArgument("router regularizer needs the channel architecture".into())
        })?;
        let probs = mt.tape.softmax_rows(router);
        let rnorm = mt
            .tape
            .onehot_sqdist_sum(probs, &seq.router_labels(), &mask)?;
        rnorm_val = mt.tape.value(rnorm).item() as f64;
        let weighted = mt.tape.scale(rnorm, gamma);
        loss = mt.tape.add(loss, weighted)?;
    }
    let nll_val = mt.tape.value(nll).item() as f64;
    let grads = if with_grads {
        let g = mt.tape.backward(loss)?;
        mt.tape.param_grads(&g)
    } else {
        BTreeMap::new()
    };
    Ok(SeqLoss {
        nll: nll_val,
        rnorm: rnorm_val,
        count,
        grads,
    })
}

/// Mean supervised NLL (and router-norm) of a dataset without updating.
pub fn eval_losses(
    store: &ParamStore,
    cfg: &ComeConfig,
    arch: Arch,
    seqs: &[SeqExample],
    gamma: f32,
) -> Result<(f64, f64)> {
    let outs = par_map(seqs, |s| seq_loss(store, cfg, arch, s, &|_| false, gamma, false));
    let mut nll = 0.0;
    let mut rnorm = 0.0;
    let mut count = 0usize;
    for o in outs {
        let o = o?;
        nll += o.nll;
        rnorm += o.rnorm;
        count += o.count;
    }
    Ok((nll / count as f64, rnorm / count as f64))
}

/// Epoch loop shared by every SFT-style stage. Returns per-epoch mean
/// training NLL. Gradients are normalized by the batch's supervised-token
/// count; learning rate follows a cosine decay across all steps.
pub fn sft_fit(
    store: &mut ParamStore,
    cfg: &ComeConfig,
    arch: Arch,
    seqs: &[SeqExample],
    trainable: &(dyn Fn(&str) -> bool + Sync),
    tc: &TrainConfig,
    gamma: f32,
) -> Result<Vec<f64>> {
    if seqs.is_empty() {
        return Err(Error::InvalidArgument("empty training set".into()));
    }
    let steps_per_epoch = seqs.len().div_ceil(tc.batch_size);
    let total_steps = steps_per_epoch * tc.epochs;
    let adam = AdamConfig::default();
    let mut epoch_losses = Vec::with_capacity(tc.epochs);
    let mut step_no = 0usize;
    for epoch in 0..tc.epochs {
        let mut rng = Rng::new(tc.seed).fork(0xe0 + epoch as u64);
        let order = shuffled_indices(seqs.len(), &mut rng);
        let mut epoch_nll = 0.0f64;
        let mut epoch_count = 0usize;
        for chunk in order.chunks(tc.batch_size) {
            let batch: Vec<&SeqExample> = chunk.iter().map(|&i| &seqs[i]).collect();
            let frozen: &ParamStore = store;
            let outs = par_map(&batch, |s| {
                seq_loss(frozen, cfg, arch, s, trainable, gamma, true)
            });
            let mut grads = BTreeMap::new();
            let mut count = 0usize;
            for o in outs {
                let o = o?;
                epoch_nll += o.nll;
                count += o.count;
                merge_grads(&mut grads, o.grads);
            }
            epoch_count += count;
            scale_grads(&mut grads, 1.0 / count as f32);
            let lr = cosine_lr(tc.peak_lr, step_no, total_steps);
            store.adam_step(&grads, lr, adam)?;
            step_no += 1;
        }
        epoch_losses.push(epoch_nll / epoch_count as f64);
    }
    Ok(epoch_losses)
}

/// One row of a stage report; unavailable fields are NaN and render empty
/// in CSV.
#[derive(Debug, Clone, Serialize)]
pub struct ReportRow {
    pub stage: String,
    pub epoch: usize,
    pub split: String,
    pub loss_sft: f64,
    pub loss_rce: f64,
    pub loss_rnorm: f64,
    pub selection_acc: f64,
}

impl ReportRow {
    fn new(stage: &str, epoch: usize, split: &str) -> Self {
        ReportRow {
            stage: stage.to_string(),
            epoch,
            split: split.to_string(),
            loss_sft: f64::NAN,
            loss_rce: f64::NAN,
            loss_rnorm: f64::NAN,
            selection_acc: f64::NAN,
        }
    }
}

/// Base language-model pretraining: a dense model fit on full traces with
/// every parameter trainable. The curriculum's later stages specialize
/// this backbone, mirroring the usual start from a pretrained dense model.
pub fn pretrain_dense(
    store: &mut ParamStore,
    cfg: &ComeConfig,
    vocab: &Vocab,
    train: &[StepRecord],
    val: &[StepRecord],
    tc: &TrainConfig,
) -> Result<Vec<ReportRow>> {
    if train.is_empty() {
        return Err(Error::InvalidArgument("empty pretraining set".into()));
    }
    let seqs = build_full_seqs(train, vocab, cfg)?;
    let val_seqs = build_full_seqs(val, vocab, cfg)?;
    let mut rows = Vec::new();
    for epoch in 0..tc.epochs {
        let one = TrainConfig {
            epochs: 1,
            seed: tc.seed.wrapping_add(epoch as u64),
            ..*tc
        };
        let losses = sft_fit(store, cfg, Arch::Dense, &seqs, &|_| true, &one, 0.0)?;
        let mut row = ReportRow::new("pretrain", epoch, "train");
        row.loss_sft = losses[0];
        rows.push(row);
        if !val_seqs.is_empty() {
            let (v, _) = eval_losses(store, cfg, Arch::Dense, &val_seqs, 0.0)?;
            let mut row = ReportRow::new("pretrain", epoch, "val");
            row.loss_sft = v;
            rows.push(row);
        }
    }
    Ok(rows)
}

/// Specialist fine-tuning: only FFN parameters train; everything else is
/// bit-identical afterwards.
pub fn expert_ft(
    store: &mut ParamStore,
    cfg: &ComeConfig,
    vocab: &Vocab,
    stage: StageId,
    train: &[StepRecord],
    val: &[StepRecord],
    tc: &TrainConfig,
) -> Result<Vec<ReportRow>> {
    if train.is_empty() {
        return Err(Error::InvalidArgument("empty specialist dataset".into()));
    }
    let seqs = build_expert_seqs(train, vocab, cfg, stage)?;
    let val_seqs = build_expert_seqs(val, vocab, cfg, stage)?;
    let name = format!("expert-{}", stage.name());
    let mut rows = Vec::new();
    for epoch in 0..tc.epochs {
        let one = TrainConfig {
            epochs: 1,
            seed: tc.seed.wrapping_add(epoch as u64),
            ..*tc
        };
        let losses = sft_fit(store, cfg, Arch::Dense, &seqs, &model::is_ffn_param, &one, 0.0)?;
        let mut row = ReportRow::new(&name, epoch, "train");
        row.loss_sft = losses[0];
        rows.push(row);
        if !val_seqs.is_empty() {
            let (v, _) = eval_losses(store, cfg, Arch::Dense, &val_seqs, 0.0)?;
            let mut row = ReportRow::new(&name, epoch, "val");
            row.loss_sft = v;
            rows.push(row);
        }
    }
    Ok(rows)
}

/// Router fine-tuning: the trunk runs forward-only; the only trainable
/// tensor is the channel router projection. Loss is the cross-entropy to
/// the stage labels plus the squared distance between routing weights and
/// their one-hot targets.
pub fn router_ft(
    store: &mut ParamStore,
    cfg: &ComeConfig,
    vocab: &Vocab,
    train: &[StepRecord],
    val: &[StepRecord],
    tc: &TrainConfig,
) -> Result<Vec<ReportRow>> {
    if train.is_empty() {
        return Err(Error::InvalidArgument("empty router dataset".into()));
    }
    if cfg.experts != STAGES.len() {
        return Err(Error::InvalidArgument(format!(
            "router supervision needs one expert per stage, model has {}",
            cfg.experts
        )));
    }
    let seqs = build_full_seqs(train, vocab, cfg)?;
    // trunk features are router-independent, so they are computed once
    let frozen: &ParamStore = store;
    let feats = par_map(&seqs, |s| router_features(frozen, cfg, s));
    let mut rows_data: Vec<(Vec<f32>, usize)> = Vec::new();
    for f in feats {
        let (flat_rows, labels) = f?;
        for (row, lab) in flat_rows.into_iter().zip(labels) {
            rows_data.push((row, lab));
        }
    }
    let width = cfg.experts * cfg.hidden;
    let labels: Vec<usize> = rows_data.iter().map(|(_, l)| *l).collect();
    let mut flat = Vec::with_capacity(rows_data.len() * width);
    for (row, _) in &rows_data {
        flat.extend_from_slice(row);
    }
    let features = Tensor::new(vec![labels.len(), width], flat)?;
    let mask = vec![true; labels.len()];

    let adam = AdamConfig::default();
    let mut rows = Vec::new();
    for epoch in 0..tc.epochs {
        // full-batch update on the feature matrix
        let mut tape = crate::tape::Tape::new();
        let x = tape.constant(features.clone());
        let wc = tape.named_param(ROUTER_PARAM, store.get(ROUTER_PARAM)?.clone());
        let logits = tape.matmul(x, wc)?;
        let ce = tape.cross_entropy(logits, &labels, &mask)?;
        let probs = tape.softmax_rows(logits);
        let rnorm = tape.onehot_sqdist(probs, &labels, &mask)?;
        let loss = tape.add(ce, rnorm)?;
        let grads = tape.backward(loss)?;
        let named = tape.param_grads(&grads);
        let lr = cosine_lr(tc.peak_lr, epoch, tc.epochs);
        store.adam_step(&named, lr, adam)?;
        let mut row = ReportRow::new("router", epoch, "train");
        row.loss_rce = tape.value(ce).item() as f64;
        row.loss_rnorm = tape.value(rnorm).item() as f64;
        rows.push(row);
        // the held-out diagnostic needs a full forward per step, so it
        // runs once, after the final update
        if !val.is_empty() && epoch + 1 == tc.epochs {
            let (acc, _) = crate::eval::router_selection_accuracy(store, cfg, vocab, val)?;
            let mut row = ReportRow::new("router", epoch, "val");
            row.selection_acc = acc;
            rows.push(row);
        }
    }
    Ok(rows)
}

/// Last-layer concatenated channel features and router labels for the
/// supervised positions of one sequence.
fn router_features(
    store: &ParamStore,
    cfg: &ComeConfig,
    seq: &SeqExample,
) -> Result<(Vec<Vec<f32>>, Vec<usize>)> {
    let outs = model::prefill_outputs(store, cfg, Arch::Come, &seq.tokens)?;
    let labels = seq.router_labels();
    let mask = seq.sft_mask();
    let mut flat_rows = Vec::new();
    let mut out_labels = Vec::new();
    for (i, o) in outs.into_iter().enumerate() {
        if mask[i] {
            flat_rows.push(o.flat);
            out_labels.push(labels[i]);
        }
    }
    Ok((flat_rows, out_labels))
}

/// Chain-of-thought fine-tuning: all parameters train on the full trace
/// with the routing regularizer weighted by gamma.
pub fn cot_ft(
    store: &mut ParamStore,
    cfg: &ComeConfig,
    vocab: &Vocab,
    train: &[StepRecord],
    val: &[StepRecord],
    tc: &TrainConfig,
) -> Result<Vec<ReportRow>> {
    if train.is_empty() {
        return Err(Error::InvalidArgument("empty trace dataset".into()));
    }
    let seqs = build_full_seqs(train, vocab, cfg)?;
    let val_seqs = build_full_seqs(val, vocab, cfg)?;
    let mut rows = Vec::new();
    for epoch in 0..tc.epochs {
        let one = TrainConfig {
            epochs: 1,
            seed: tc.seed.wrapping_add(epoch as u64),
            ..*tc
        };
        let losses = sft_fit(store, cfg, Arch::Come, &seqs, &|_| true, &one, tc.gamma)?;
        let mut row = ReportRow::new("cot", epoch, "train");
        row.loss_sft = losses[0];
        rows.push(row);
        if !val_seqs.is_empty() {
            let (v, rn) = eval_losses(store, cfg, Arch::Come, &val_seqs, tc.gamma.max(f32::MIN_POSITIVE))?;
            let (acc, _) = crate::eval::router_selection_accuracy(store, cfg, vocab, val)?;
            let mut row = ReportRow::new("cot", epoch, "val");
            row.loss_sft = v;
            row.loss_rnorm = rn;
            row.selection_acc = acc;
            rows.push(row);
        }
    }
    Ok(rows)
}

/// Curriculum switches; skipping a stage reproduces the corresponding
/// ablation arm.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CurriculumConfig {
    pub init_seed: u64,
    pub skip_expert_ft: bool,
    pub skip_router_ft: bool,
    pub pretrain: TrainConfig,
    pub expert: TrainConfig,
    pub router: TrainConfig,
    pub cot: TrainConfig,
}

/// Pretrain the dense backbone, specialize all four stages from it,
/// assemble, align the router, then chain-of-thought fine-tune. Returns
/// the final channel checkpoint and all stage report rows.
pub fn run_curriculum(
    cfg: &ComeConfig,
    vocab: &Vocab,
    train: &[StepRecord],
    val: &[StepRecord],
    cc: &CurriculumConfig,
) -> Result<(ParamStore, Vec<ReportRow>)> {
    let mut rows = Vec::new();
    let mut base = model::init_params(cfg, Arch::Dense, cc.init_seed)?;
    if cc.pretrain.epochs > 0 {
        let r = pretrain_dense(&mut base, cfg, vocab, train, val, &cc.pretrain)
            .map_err(|e| Error::InvalidArgument(format!("pretrain: {e}")))?;
        rows.extend(r);
    }
    let mut specialists = Vec::with_capacity(STAGES.len());
    for stage in STAGES {
        let mut s = base.clone();
        if !cc.skip_expert_ft && cc.expert.epochs > 0 {
            let r = expert_ft(&mut s, cfg, vocab, stage, train, val, &cc.expert)
                .map_err(|e| Error::InvalidArgument(format!("expert-ft({}): {e}", stage.name())))?;
            rows.extend(r);
        }
        specialists.push(s);
    }
    let refs: Vec<&ParamStore> = specialists.iter().collect();
    let mut come = assemble_checked(&refs, cfg, cc.init_seed)?;
    if !cc.skip_router_ft && cc.router.epochs > 0 {
        let r = router_ft(&mut come, cfg, vocab, train, val, &cc.router)
            .map_err(|e| Error::InvalidArgument(format!("router-ft: {e}")))?;
        rows.extend(r);
    }
    if cc.cot.epochs > 0 {
        let r = cot_ft(&mut come, cfg, vocab, train, val, &cc.cot)
            .map_err(|e| Error::InvalidArgument(format!("cot-ft: {e}")))?;
        rows.extend(r);
    }
    Ok((come, rows))
}

fn assemble_checked(
    specialists: &[&ParamStore],
    cfg: &ComeConfig,
    seed: u64,
) -> Result<ParamStore> {
    model::assemble_from_experts(specialists, cfg, seed)
        .map_err(|e| Error::InvalidArgument(format!("assemble: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthgui::{gen_episodes, Difficulty};

    fn tiny() -> (ComeConfig, Vocab, Vec<StepRecord>, Vec<StepRecord>) {
        let vocab = Vocab::new();
        let cfg = ComeConfig {
            vocab_size: vocab.len(),
            hidden: 16,
            layers: 1,
            heads: 2,
            experts: 4,
            intermediate: 24,
            max_seq: 192,
        };
        let eps = gen_episodes(50, 8, Difficulty::Easy);
        let steps: Vec<StepRecord> = eps.iter().flat_map(|e| e.steps.clone()).collect();
        let (train, val) = steps.split_at(steps.len() - 4);
        (cfg, vocab, train.to_vec(), val.to_vec())
    }

    #[test]
    fn full_seq_masks_prompt_and_supervises_trace() {
        let (cfg, vocab, train, _) = tiny();
        let seq = build_full_seq(&train[0], &vocab, &cfg).unwrap();
        assert_eq!(seq.tokens[0], vocab.bos());
        assert_eq!(*seq.tokens.last().unwrap(), vocab.eos());
        let mask = seq.sft_mask();
        // prompt positions unsupervised, trace + eos supervised
        let trace_len = train[0].gold_trace.to_trace(&vocab).unwrap().render(&vocab).len();
        assert_eq!(mask.iter().filter(|&&m| m).count(), trace_len + 1);
        // supervision starts exactly where the trace starts
        let first = mask.iter().position(|&m| m).unwrap();
        assert_eq!(vocab.word(seq.targets[first]), "<SS>");
    }

    #[test]
    fn expert_seq_supervises_only_its_stage() {
        let (cfg, vocab, train, _) = tiny();
        for stage in STAGES {
            let seq = build_expert_seq(&train[0], &vocab, &cfg, stage).unwrap();
            let n = seq.supervised_tokens();
            assert!(n > 0);
            for (i, &s) in seq.supervise.iter().enumerate() {
                assert!(
                    s == StageId::Prompt || s == stage,
                    "position {i} supervised as {s:?}"
                );
            }
        }
    }

    #[test]
    fn zero_lr_leaves_checkpoint_unchanged() {
        let (cfg, vocab, train, val) = tiny();
        let mut store = model::init_params(&cfg, Arch::Dense, 4).unwrap();
        let before = store.clone();
        let tc = TrainConfig {
            peak_lr: 0.0,
            epochs: 1,
            batch_size: 4,
            gamma: 0.0,
            seed: 1,
        };
        expert_ft(&mut store, &cfg, &vocab, StageId::Ss, &train, &val, &tc).unwrap();
        for (name, t) in before.iter() {
            assert_eq!(store.get(name).unwrap().data(), t.data(), "{name}");
        }
    }

    #[test]
    fn expert_ft_freezes_everything_but_ffn() {
        let (cfg, vocab, train, val) = tiny();
        let mut store = model::init_params(&cfg, Arch::Dense, 5).unwrap();
        let before = store.clone();
        let tc = TrainConfig {
            peak_lr: 1e-2,
            epochs: 1,
            batch_size: 4,
            gamma: 0.0,
            seed: 2,
        };
        expert_ft(&mut store, &cfg, &vocab, StageId::Sp, &train, &val, &tc).unwrap();
        let mut ffn_changed = false;
        for (name, t) in before.iter() {
            let now = store.get(name).unwrap();
            if model::is_ffn_param(name) {
                if now.data() != t.data() {
                    ffn_changed = true;
                }
            } else {
                // bitwise frozen
                for (a, b) in now.data().iter().zip(t.data()) {
                    assert_eq!(a.to_bits(), b.to_bits(), "{name}");
                }
            }
        }
        assert!(ffn_changed);
    }

    #[test]
    fn router_ft_touches_only_the_router() {
        let (cfg, vocab, train, val) = tiny();
        let base = model::init_params(&cfg, Arch::Dense, 6).unwrap();
        let refs = [&base, &base, &base, &base];
        let mut come = model::assemble_from_experts(&refs, &cfg, 6).unwrap();
        let before = come.clone();
        let tc = TrainConfig {
            peak_lr: 5e-2,
            epochs: 2,
            batch_size: 8,
            gamma: 0.0,
            seed: 3,
        };
        let rows = router_ft(&mut come, &cfg, &vocab, &train, &val, &tc).unwrap();
        for (name, t) in before.iter() {
            let now = come.get(name).unwrap();
            if name == ROUTER_PARAM {
                assert_ne!(now.data(), t.data());
            } else {
                for (a, b) in now.data().iter().zip(t.data()) {
                    assert_eq!(a.to_bits(), b.to_bits(), "{name}");
                }
            }
        }
        // training reduces the router loss
        let first = rows.iter().find(|r| r.split == "train").unwrap();
        let last = rows.iter().rev().find(|r| r.split == "train").unwrap();
        assert!(last.loss_rce <= first.loss_rce);
    }

    #[test]
    fn router_losses_closed_forms() {
        // uniform logits over 4: ce = ln 4, rnorm = 0.75 per token;
        // one-hot-correct margin-20 logits: both effectively zero
        let mut tape = crate::tape::Tape::new();
        let labels = [2usize, 0];
        let mask = [true, true];
        let uniform = tape.constant(Tensor::zeros(vec![2, 4]));
        let ce = tape.cross_entropy(uniform, &labels, &mask).unwrap();
        assert!((tape.value(ce).item() - 4.0f32.ln()).abs() < 1e-6);
        let p = tape.softmax_rows(uniform);
        let rn = tape.onehot_sqdist(p, &labels, &mask).unwrap();
        assert!((tape.value(rn).item() - 0.75).abs() < 1e-6);

        let mut hot = Tensor::zeros(vec![2, 4]);
        hot.data_mut()[2] = 20.0;
        hot.data_mut()[4] = 20.0;
        let hot = tape.constant(hot);
        let ce = tape.cross_entropy(hot, &labels, &mask).unwrap();
        assert!(tape.value(ce).item() < 1e-8);
        let p = tape.softmax_rows(hot);
        let rn = tape.onehot_sqdist(p, &labels, &mask).unwrap();
        assert!(tape.value(rn).item() < 1e-8);
    }

    #[test]
    fn cot_gamma_zero_reduces_to_pure_sft() {
        let (cfg, vocab, train, _) = tiny();
        let come = model::init_params(&cfg, Arch::Come, 8).unwrap();
        let seqs = build_full_seqs(&train[..4], &vocab, &cfg).unwrap();
        let run = |gamma: f32, seed: u64| -> Vec<f32> {
            let mut s = come.clone();
            let tc = TrainConfig {
                peak_lr: 1e-3,
                epochs: 1,
                batch_size: 4,
                gamma,
                seed,
            };
            sft_fit(&mut s, &cfg, Arch::Come, &seqs, &|_| true, &tc, gamma).unwrap();
            // the regularizer's gradient reaches the router projection
            s.get(ROUTER_PARAM).unwrap().data().to_vec()
        };
        // gamma = 0 must equal a loss with the regularizer absent entirely
        let a = run(0.0, 9);
        let b = run(0.0, 9);
        assert_eq!(a, b);
        // and differ from a gamma > 0 run
        let c = run(0.5, 9);
        assert_ne!(a, c);
    }

    #[test]
    fn cot_training_reduces_loss() {
        let (cfg, vocab, train, _) = tiny();
        let base = model::init_params(&cfg, Arch::Dense, 10).unwrap();
        let refs = [&base, &base, &base, &base];
        let mut come = model::assemble_from_experts(&refs, &cfg, 10).unwrap();
        let seqs = build_full_seqs(&train, &vocab, &cfg).unwrap();
        let (before, _) = eval_losses(&come, &cfg, Arch::Come, &seqs, 0.0).unwrap();
        let tc = TrainConfig {
            peak_lr: 5e-3,
            epochs: 2,
            batch_size: 8,
            gamma: 0.1,
            seed: 4,
        };
        cot_ft(&mut come, &cfg, &vocab, &train, &[], &tc).unwrap();
        let (after, _) = eval_losses(&come, &cfg, Arch::Come, &seqs, 0.0).unwrap();
        assert!(after < before, "{after} !< {before}");
    }

    #[test]
    fn curriculum_zero_epochs_returns_assembled_init() {
        let (cfg, vocab, train, val) = tiny();
        let zero = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        let cc = CurriculumConfig {
            init_seed: 21,
            skip_expert_ft: false,
            skip_router_ft: false,
            pretrain: zero,
            expert: zero,
            router: zero,
            cot: zero,
        };
        let (got, rows) = run_curriculum(&cfg, &vocab, &train, &val, &cc).unwrap();
        assert!(rows.is_empty());
        let base = model::init_params(&cfg, Arch::Dense, 21).unwrap();
        let refs = [&base, &base, &base, &base];
        let want = model::assemble_from_experts(&refs, &cfg, 21).unwrap();
        for (name, t) in want.iter() {
            assert_eq!(got.get(name).unwrap().data(), t.data(), "{name}");
        }
    }

    #[test]
    fn curriculum_skip_flags_reproduce_ablation_structure() {
        let (cfg, vocab, train, val) = tiny();
        let fast = TrainConfig {
            peak_lr: 2e-3,
            epochs: 1,
            batch_size: 8,
            gamma: 0.1,
            seed: 6,
        };
        // skipping specialist training assembles identical channels
        let cc = CurriculumConfig {
            init_seed: 51,
            skip_expert_ft: true,
            skip_router_ft: true,
            pretrain: TrainConfig { epochs: 0, ..fast },
            expert: fast,
            router: fast,
            cot: TrainConfig { epochs: 0, ..fast },
        };
        let (come, _) = run_curriculum(&cfg, &vocab, &train, &val, &cc).unwrap();
        for l in 0..cfg.layers {
            for e in 1..cfg.experts {
                assert_eq!(
                    come.get(&format!("layers.{l:02}.expert.0.w_up")).unwrap().data(),
                    come.get(&format!("layers.{l:02}.expert.{e}.w_up")).unwrap().data()
                );
            }
        }
        // with specialist training enabled the channels differ
        let cc2 = CurriculumConfig {
            skip_expert_ft: false,
            ..cc
        };
        let (come2, _) = run_curriculum(&cfg, &vocab, &train, &val, &cc2).unwrap();
        assert_ne!(
            come2.get("layers.00.expert.0.w_up").unwrap().data(),
            come2.get("layers.00.expert.1.w_up").unwrap().data()
        );
    }

    #[test]
    fn expert_ft_beats_its_init_on_stage_loss() {
        let (cfg, vocab, train, _) = tiny();
        let mut store = model::init_params(&cfg, Arch::Dense, 61).unwrap();
        let seqs = build_expert_seqs(&train, &vocab, &cfg, StageId::Ss).unwrap();
        let (before, _) = eval_losses(&store, &cfg, Arch::Dense, &seqs, 0.0).unwrap();
        let tc = TrainConfig {
            peak_lr: 3e-3,
            epochs: 3,
            batch_size: 8,
            gamma: 0.0,
            seed: 8,
        };
        expert_ft(&mut store, &cfg, &vocab, StageId::Ss, &train, &[], &tc).unwrap();
        let (after, _) = eval_losses(&store, &cfg, Arch::Dense, &seqs, 0.0).unwrap();
        assert!(after < before, "{after} !< {before}");
    }

    #[test]
    fn same_seed_training_is_bit_identical() {
        let (cfg, vocab, train, _) = tiny();
        let run = || {
            let mut s = model::init_params(&cfg, Arch::Dense, 33).unwrap();
            let tc = TrainConfig {
                peak_lr: 2e-3,
                epochs: 1,
                batch_size: 4,
                gamma: 0.0,
                seed: 7,
            };
            expert_ft(&mut s, &cfg, &vocab, StageId::Af, &train, &[], &tc).unwrap();
            s.get("layers.00.ffn.w_up").unwrap().data().to_vec()
        };
        let a = run();
        let b = run();
        assert_eq!(a, b);
    }
}
