//! Diagnostics: action-match metrics, router selection accuracy, reward
//! distribution statistics, and the analytic/measured per-layer cost
//! model.

use serde::Serialize;

use crate::action::{parse_action, Action, ActionKind};
use crate::model::{self, Arch, ComeConfig, ModelTape};
use crate::params::ParamStore;
use crate::par::par_map;
use crate::reward::RewardBundle;
use crate::rng::Rng;
use crate::synthgui::{serialize_step, StepRecord, Widget};
use crate::tensor::{Error, Result, Tensor};
use crate::trace::{parse_trace, StageId, STAGES};
use crate::training::build_full_seq;
use crate::vocab::Vocab;

/// Evaluation match rule. Clicks match when the predicted point lies
/// within `click_threshold` of the gold point on the 0-1000 grid, or when
/// both points fall inside one widget's box. Typed text matches above 0.5
/// token F1; everything else is exact. A malformed prediction never
/// matches.
pub fn matches_action(
    pred: Option<&Action>,
    gold: &Action,
    click_threshold: f64,
    widgets: &[Widget],
) -> bool {
    let Some(p) = pred else { return false };
    if p.kind() != gold.kind() {
        return false;
    }
    match (p, gold) {
        (Action::Click { x, y }, Action::Click { x: gx, y: gy }) => {
            let dx = *x as f64 - *gx as f64;
            let dy = *y as f64 - *gy as f64;
            if (dx * dx + dy * dy).sqrt() < click_threshold {
                return true;
            }
            widgets
                .iter()
                .any(|w| w.contains(*x, *y) && w.contains(*gx, *gy))
        }
        (Action::Type(t), Action::Type(gt)) => crate::reward::token_f1(t, gt) > 0.5,
        (p, g) => p == g,
    }
}

/// Default click-distance threshold of the evaluation match rule.
pub const MATCH_THRESHOLD: f64 = 140.0;

#[derive(Debug, Clone, Copy, Default, Serialize)]
pub struct TypeStats {
    pub count: usize,
    pub type_correct: usize,
    pub match_correct: usize,
}

impl TypeStats {
    pub fn type_acc(&self) -> f64 {
        if self.count == 0 {
            f64::NAN
        } else {
            self.type_correct as f64 / self.count as f64
        }
    }

    pub fn match_acc(&self) -> f64 {
        if self.count == 0 {
            f64::NAN
        } else {
            self.match_correct as f64 / self.count as f64
        }
    }
}

/// Per-action-type and overall accuracies; overall values are the
/// support-weighted means of the per-type ones.
#[derive(Debug, Clone, Serialize)]
pub struct MetricReport {
    pub per_type: Vec<(ActionKind, TypeStats)>,
    pub count: usize,
    pub type_acc: f64,
    pub match_acc: f64,
}

/// Aggregate per-step outcomes into a [`MetricReport`].
pub fn aggregate_matches(
    items: &[(Option<Action>, Action, Vec<Widget>)],
    click_threshold: f64,
) -> MetricReport {
    let mut stats: Vec<(ActionKind, TypeStats)> = ActionKind::ALL
        .iter()
        .map(|&k| (k, TypeStats::default()))
        .collect();
    let mut type_total = 0usize;
    let mut match_total = 0usize;
    for (pred, gold, widgets) in items {
        let slot = &mut stats
            .iter_mut()
            .find(|(k, _)| *k == gold.kind())
            .expect("all kinds present")
            .1;
        slot.count += 1;
        let type_ok = pred.as_ref().map(|p| p.kind()) == Some(gold.kind());
        let match_ok = matches_action(pred.as_ref(), gold, click_threshold, widgets);
        if type_ok {
            slot.type_correct += 1;
            type_total += 1;
        }
        if match_ok {
            slot.match_correct += 1;
            match_total += 1;
        }
    }
    let count = items.len();
    MetricReport {
        per_type: stats,
        count,
        type_acc: type_total as f64 / count.max(1) as f64,
        match_acc: match_total as f64 / count.max(1) as f64,
    }
}

/// Greedy-decode every step and score the parsed actions.
pub fn evaluate_policy(
    store: &ParamStore,
    cfg: &ComeConfig,
    vocab: &Vocab,
    steps: &[StepRecord],
    click_threshold: f64,
) -> Result<MetricReport> {
    let outs = par_map(steps, |step| -> Result<(Option<Action>, Action, Vec<Widget>)> {
        let gold = parse_action(&step.gold_action)
            .map_err(|m| Error::Parse(format!("gold action: {:?}", m.text)))?;
        let pred = predict_action(store, cfg, vocab, step)?;
        Ok((pred, gold, step.screen.widgets.clone()))
    });
    let mut items = Vec::with_capacity(steps.len());
    for o in outs {
        items.push(o?);
    }
    Ok(aggregate_matches(&items, click_threshold))
}

/// Greedy decode of one step's trace; returns the parsed action if the
/// trace and its action-function segment are well formed.
pub fn predict_action(
    store: &ParamStore,
    cfg: &ComeConfig,
    vocab: &Vocab,
    step: &StepRecord,
) -> Result<Option<Action>> {
    let gen = predict_trace_tokens(store, cfg, vocab, step, 0.0, 0)?;
    Ok(parse_trace(&gen, vocab)
        .ok()
        .and_then(|t| parse_action(&t.af_text(vocab)).ok()))
}

/// Decode a trace for one step at the given temperature.
pub fn predict_trace_tokens(
    store: &ParamStore,
    cfg: &ComeConfig,
    vocab: &Vocab,
    step: &StepRecord,
    temperature: f32,
    seed: u64,
) -> Result<Vec<usize>> {
    let budget = cfg.max_seq.saturating_sub(cfg.max_seq / 3);
    let (prompt, _) = serialize_step(step, vocab, budget)?;
    let mut prefix = vec![vocab.bos()];
    prefix.extend(prompt);
    let max_new = cfg.max_seq - prefix.len();
    let gen = model::generate(
        store,
        cfg,
        Arch::Come,
        &prefix,
        temperature,
        seed,
        max_new,
        vocab.eos(),
    )?;
    Ok(gen.tokens)
}

/// Teacher-forced router diagnostic: fraction of supervised positions
/// whose argmax channel matches the stage's expert, plus the stage-by-
/// channel histogram of argmax choices.
pub fn router_selection_accuracy(
    store: &ParamStore,
    cfg: &ComeConfig,
    vocab: &Vocab,
    steps: &[StepRecord],
) -> Result<(f64, Vec<Vec<u64>>)> {
    let outs = par_map(steps, |step| -> Result<(u64, u64, Vec<Vec<u64>>)> {
        let seq = build_full_seq(step, vocab, cfg)?;
        let decoded = model::prefill_outputs(store, cfg, Arch::Come, &seq.tokens)?;
        let mut confusion = vec![vec![0u64; cfg.experts]; STAGES.len()];
        let mut hit = 0u64;
        let mut total = 0u64;
        for (i, o) in decoded.iter().enumerate() {
            let stage = seq.supervise[i];
            if stage == StageId::Prompt {
                continue;
            }
            let want = stage.expert().expect("non-prompt");
            confusion[want][o.expert] += 1;
            total += 1;
            if o.expert == want {
                hit += 1;
            }
        }
        Ok((hit, total, confusion))
    });
    let mut hit = 0u64;
    let mut total = 0u64;
    let mut confusion = vec![vec![0u64; cfg.experts]; STAGES.len()];
    for o in outs {
        let (h, t, c) = o?;
        hit += h;
        total += t;
        for (rowa, rowb) in confusion.iter_mut().zip(c) {
            for (a, b) in rowa.iter_mut().zip(rowb) {
                *a += b;
            }
        }
    }
    if total == 0 {
        return Err(Error::InvalidArgument("no supervised positions".into()));
    }
    Ok((hit as f64 / total as f64, confusion))
}

/// Per-stage mean/std of information gain for chosen vs rejected traces.
#[derive(Debug, Clone, Serialize)]
pub struct IgStatsRow {
    pub side: String,
    pub stage: String,
    pub mean: f64,
    pub std: f64,
}

pub fn infogain_stats(chosen: &[RewardBundle], rejected: &[RewardBundle]) -> Result<Vec<IgStatsRow>> {
    if chosen.is_empty() || rejected.is_empty() {
        return Err(Error::InvalidArgument("empty reward sets".into()));
    }
    let mut rows = Vec::new();
    for (side, bundles) in [("chosen", chosen), ("rejected", rejected)] {
        for (stage, pick) in [
            ("ss", 0usize),
            ("sp", 1),
            ("ad", 2),
            ("total", 3),
        ] {
            let vals: Vec<f64> = bundles
                .iter()
                .map(|b| match pick {
                    0 => b.ig_ss,
                    1 => b.ig_sp,
                    2 => b.ig_ad,
                    _ => b.r_ig,
                })
                .collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / vals.len() as f64;
            rows.push(IgStatsRow {
                side: side.to_string(),
                stage: stage.to_string(),
                mean,
                std: var.sqrt(),
            });
        }
    }
    Ok(rows)
}

/// Inputs to the per-layer cost model.
#[derive(Debug, Clone, Copy)]
pub struct CostModelInput {
    pub hidden: u64,
    pub seq_len: u64,
    pub intermediate: u64,
    pub experts: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerCost {
    pub attn: u64,
    pub ffn: u64,
}

impl LayerCost {
    pub fn total(&self) -> u64 {
        self.attn + self.ffn
    }
}

/// Multiply-add count of one dense layer: four projections, score and
/// mixing products, and the two feed-forward products. Softmax,
/// normalization and activation work is excluded by the accounting
/// contract.
pub fn flops_analytic_dense(c: CostModelInput) -> LayerCost {
    let (h, l, i) = (c.hidden, c.seq_len, c.intermediate);
    LayerCost {
        attn: 4 * l * h * h + 2 * l * l * h,
        ffn: 2 * l * h * i,
    }
}

/// Per-layer cost of the channel architecture: every term scales by E.
pub fn flops_analytic_come(c: CostModelInput) -> LayerCost {
    let dense = flops_analytic_dense(c);
    LayerCost {
        attn: c.experts * dense.attn,
        ffn: c.experts * dense.ffn,
    }
}

/// Measured multiply-add count of one layer, from the tape's instrumented
/// matrix products.
pub fn flops_measured_layer(cfg: &ComeConfig, arch: Arch, seq_len: usize) -> Result<u64> {
    let store = model::init_params(cfg, arch, 0)?;
    let mut mt = ModelTape::frozen(&store);
    let x0 = mt
        .tape
        .constant(Tensor::randn(vec![seq_len, cfg.hidden], 1.0, &mut Rng::new(1)));
    match arch {
        Arch::Dense => {
            model::block_forward(&mut mt, cfg, x0, 0, "ffn")?;
        }
        Arch::Come => {
            for e in 0..cfg.experts {
                model::block_forward(&mut mt, cfg, x0, 0, &format!("expert.{e}"))?;
            }
        }
        Arch::Moe => {
            return Err(Error::InvalidArgument(
                "cost model covers dense and channel layers".into(),
            ))
        }
    }
    Ok(mt.tape.macs())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::action::{PressKey, ScrollDir};

    fn widget(bbox: [u32; 4]) -> Widget {
        Widget {
            id: 0,
            kind: "button".into(),
            label: "wifi".into(),
            bbox,
        }
    }

    #[test]
    fn click_distance_rule() {
        let gold = Action::Click { x: 150, y: 100 };
        let pred = Action::Click { x: 100, y: 100 };
        assert!(matches_action(Some(&pred), &gold, MATCH_THRESHOLD, &[]));
        let far = Action::Click { x: 600, y: 100 };
        assert!(!matches_action(Some(&far), &gold, MATCH_THRESHOLD, &[]));
        // boundary is strict
        let edge = Action::Click { x: 290, y: 100 };
        assert!(!matches_action(Some(&edge), &gold, 140.0, &[]));
    }

    #[test]
    fn click_same_bbox_rule() {
        let gold = Action::Click { x: 100, y: 100 };
        let pred = Action::Click { x: 900, y: 900 };
        let screen_wide = widget([0, 0, 1000, 1000]);
        assert!(matches_action(
            Some(&pred),
            &gold,
            MATCH_THRESHOLD,
            &[screen_wide]
        ));
        let small = widget([50, 50, 150, 150]);
        assert!(!matches_action(Some(&pred), &gold, MATCH_THRESHOLD, &[small]));
    }

    #[test]
    fn type_and_exact_rules() {
        let gold = Action::Type("wifi password".into());
        let ok = Action::Type("wifi password backup".into());
        assert!(matches_action(Some(&ok), &gold, MATCH_THRESHOLD, &[]));
        let half = Action::Type("wifi theme".into());
        assert!(!matches_action(Some(&half), &gold, MATCH_THRESHOLD, &[]));
        assert!(!matches_action(
            Some(&Action::Scroll(ScrollDir::Up)),
            &Action::Press(PressKey::Back),
            MATCH_THRESHOLD,
            &[]
        ));
        assert!(!matches_action(None, &Action::Stop, MATCH_THRESHOLD, &[]));
    }

    #[test]
    fn match_implies_type_in_aggregates() {
        let mut rng = Rng::new(3);
        let mut items = Vec::new();
        for _ in 0..300 {
            let gold = Action::Click {
                x: rng.below(1001) as u32,
                y: rng.below(1001) as u32,
            };
            let pred = match rng.below(3) {
                0 => None,
                1 => Some(Action::Scroll(ScrollDir::Down)),
                _ => Some(Action::Click {
                    x: rng.below(1001) as u32,
                    y: rng.below(1001) as u32,
                }),
            };
            items.push((pred, gold, vec![]));
        }
        let report = aggregate_matches(&items, MATCH_THRESHOLD);
        for (kind, stats) in &report.per_type {
            assert!(
                stats.match_correct <= stats.type_correct,
                "{kind:?}: match exceeds type"
            );
        }
        assert!(report.match_acc <= report.type_acc);
        // overall equals support-weighted mean of per-type accuracies
        let weighted: f64 = report
            .per_type
            .iter()
            .filter(|(_, s)| s.count > 0)
            .map(|(_, s)| s.match_acc() * s.count as f64)
            .sum::<f64>()
            / report.count as f64;
        assert!((weighted - report.match_acc).abs() < 1e-12);
    }

    #[test]
    fn selection_accuracy_scale_invariance_and_counts() {
        // argmax is invariant to positive rescaling of router logits
        let mut rng = Rng::new(9);
        for _ in 0..100 {
            let row: Vec<f32> = (0..4).map(|_| rng.gauss(2.0)).collect();
            let scaled: Vec<f32> = row.iter().map(|&v| v * 3.5).collect();
            assert_eq!(model::argmax(&row), model::argmax(&scaled));
        }
    }

    #[test]
    fn uniform_random_logits_score_one_in_four() {
        let mut rng = Rng::new(13);
        let n = 40_000;
        let mut hits = 0;
        for _ in 0..n {
            let row: Vec<f32> = (0..4).map(|_| rng.gauss(1.0)).collect();
            if model::argmax(&row) == rng.below(4) {
                hits += 1;
            }
        }
        let acc = hits as f64 / n as f64;
        assert!((acc - 0.25).abs() < 0.01, "{acc}");
    }

    #[test]
    fn forced_onehot_router_scores_perfectly() {
        let vocab = Vocab::new();
        let cfg = ComeConfig {
            vocab_size: vocab.len(),
            hidden: 16,
            layers: 1,
            heads: 2,
            experts: 4,
            intermediate: 16,
            max_seq: 192,
        };
        let eps = crate::synthgui::gen_episodes(7, 2, crate::synthgui::Difficulty::Easy);
        let steps: Vec<StepRecord> = eps.iter().flat_map(|e| e.steps.clone()).collect();
        let store = model::init_params(&cfg, Arch::Come, 3).unwrap();
        let (acc_random, confusion) =
            router_selection_accuracy(&store, &cfg, &vocab, &steps).unwrap();
        assert!((0.0..=1.0).contains(&acc_random));
        // confusion rows sum to per-stage token counts
        let total: u64 = confusion.iter().flatten().sum();
        let want: usize = steps
            .iter()
            .map(|s| {
                build_full_seq(s, &vocab, &cfg)
                    .unwrap()
                    .supervised_tokens()
            })
            .sum();
        assert_eq!(total as usize, want);
    }

    #[test]
    fn infogain_stats_degenerate_and_linear() {
        let b = RewardBundle {
            ig_ss: 0.1,
            ig_sp: 0.2,
            ig_ad: 0.3,
            r_ig: 0.6,
            r_ig_plus: true,
            r_acc: 1.0,
            r_cot: 0.6,
        };
        let rows = infogain_stats(&[b, b], &[b]).unwrap();
        for r in &rows {
            assert_eq!(r.std, 0.0);
        }
        let total = rows
            .iter()
            .find(|r| r.side == "chosen" && r.stage == "total")
            .unwrap();
        let parts: f64 = ["ss", "sp", "ad"]
            .iter()
            .map(|s| {
                rows.iter()
                    .find(|r| r.side == "chosen" && r.stage == *s)
                    .unwrap()
                    .mean
            })
            .sum();
        assert!((total.mean - parts).abs() < 1e-12);
        assert!(infogain_stats(&[], &[b]).is_err());
    }

    #[test]
    fn analytic_flops_reference_values() {
        let c = CostModelInput {
            hidden: 64,
            seq_len: 128,
            intermediate: 128,
            experts: 4,
        };
        let dense = flops_analytic_dense(c);
        assert_eq!(dense.attn, 4_194_304);
        assert_eq!(dense.ffn, 2_097_152);
        assert_eq!(dense.total(), 6_291_456);
        let come = flops_analytic_come(c);
        assert_eq!(come.total(), 25_165_824);
        // E = 1 channel cost equals dense cost
        let c1 = CostModelInput { experts: 1, ..c };
        assert_eq!(flops_analytic_come(c1), flops_analytic_dense(c1));
        // doubling L quadruples the quadratic attention term
        let c2 = CostModelInput {
            seq_len: 256,
            ..c
        };
        let d2 = flops_analytic_dense(c2);
        assert_eq!(d2.attn - 2 * dense.attn, 2 * (2 * 128u64.pow(2) * 64));
        assert_eq!(d2.ffn, 2 * dense.ffn);
    }

    #[test]
    fn measured_flops_equal_analytic_exactly() {
        for (h, l, i) in [(64usize, 128usize, 128usize), (32, 64, 48), (16, 96, 40)] {
            let cfg = ComeConfig {
                vocab_size: 11,
                hidden: h,
                layers: 1,
                heads: 2,
                experts: 4,
                intermediate: i,
                max_seq: l,
            };
            let cmi = CostModelInput {
                hidden: h as u64,
                seq_len: l as u64,
                intermediate: i as u64,
                experts: 4,
            };
            let dense = flops_measured_layer(&cfg, Arch::Dense, l).unwrap();
            assert_eq!(dense, flops_analytic_dense(cmi).total(), "dense {h}x{l}x{i}");
            let come = flops_measured_layer(&cfg, Arch::Come, l).unwrap();
            assert_eq!(come, flops_analytic_come(cmi).total(), "come {h}x{l}x{i}");
            assert_eq!(come, 4 * dense);
        }
    }
}
