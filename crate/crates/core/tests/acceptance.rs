//! Acceptance suite: one test per release criterion, each printing a
//! PASS/FAIL line (run with `--nocapture` to see them all).
//!
//! The slow end-to-end direction checks live in `direction_checks`; the
//! rest complete in seconds.

use std::collections::BTreeMap;

use come_core::action::{parse_action, Action};
use come_core::dpo::{self, DpoHyper, DpoPair, SampledSet, SampledTrace, Strategy};
use come_core::eval;
use come_core::gradcheck::{grad_check, LossEval};
use come_core::model::{self, Arch, ComeConfig, ModelTape, ROUTER_PARAM};
use come_core::params::{load_checkpoint, save_checkpoint, AdamConfig, ParamStore};
use come_core::reward::{self, RewardBundle, RewardConfig, RewardMode, RewardModelSet};
use come_core::rng::Rng;
use come_core::synthgui::{self, Difficulty};
use come_core::tensor::Tensor;
use come_core::trace::StageId;
use come_core::training::{self, TrainConfig};
use come_core::vocab::Vocab;

fn verdict(name: &str, pass: bool, detail: &str) {
    println!(
        "criterion {name}: {} — {detail}",
        if pass { "PASS" } else { "FAIL" }
    );
    assert!(pass, "criterion {name} failed: {detail}");
}

fn tiny_cfg(experts: usize) -> ComeConfig {
    ComeConfig {
        vocab_size: 23,
        hidden: 8,
        layers: 1,
        heads: 2,
        experts,
        intermediate: 12,
        max_seq: 16,
    }
}

fn toy_tokens(n: usize, seed: u64, v: usize) -> Vec<usize> {
    let mut rng = Rng::new(seed);
    (0..n).map(|_| rng.below(v)).collect()
}

/// Criterion 1: every differentiable primitive and each training loss
/// passes a central finite-difference check at eps = 1e-3, tol 1e-3.
#[test]
fn criterion_1_gradient_correctness() {
    let started = std::time::Instant::now();
    let eps = 1e-3;
    let tol = 1e-3;
    let mut worst: f64 = 0.0;

    // primitives, each reduced to a scalar by summation
    let mut store = ParamStore::new();
    let mut rng = Rng::new(12);
    store.insert("a", Tensor::randn(vec![3, 4], 0.8, &mut rng)).unwrap();
    store.insert("b", Tensor::randn(vec![4, 3], 0.8, &mut rng)).unwrap();
    store.insert("c", Tensor::randn(vec![3, 4], 0.8, &mut rng)).unwrap();
    store.insert("gain", Tensor::randn(vec![4], 0.3, &mut rng)).unwrap();
    store.insert("table", Tensor::randn(vec![5, 4], 0.8, &mut rng)).unwrap();
    store.insert("sq", Tensor::randn(vec![4, 4], 0.8, &mut rng)).unwrap();
    store.insert("rows", Tensor::randn(vec![4], 0.5, &mut rng)).unwrap();

    type BuildFn = fn(&ParamStore) -> come_core::Result<LossEval>;
    let primitives: Vec<(&str, BuildFn)> = vec![
        ("matmul", |s| {
            let mut t = come_core::tape::Tape::new();
            let a = t.named_param("a", s.get("a")?.clone());
            let b = t.named_param("b", s.get("b")?.clone());
            let m = t.matmul(a, b)?;
            let l = t.sum(m);
            let g = t.backward(l)?;
            Ok(LossEval { loss: t.value(l).item() as f64, grads: t.param_grads(&g) })
        }),
        ("softmax", |s| {
            let mut t = come_core::tape::Tape::new();
            let a = t.named_param("a", s.get("a")?.clone());
            let p = t.softmax_rows(a);
            let w = t.constant(Tensor::new(vec![3, 4], (0..12).map(|i| (i as f32).sin()).collect())?);
            let m = t.mul(p, w)?;
            let l = t.sum(m);
            let g = t.backward(l)?;
            Ok(LossEval { loss: t.value(l).item() as f64, grads: t.param_grads(&g) })
        }),
        ("cross_entropy", |s| {
            let mut t = come_core::tape::Tape::new();
            let a = t.named_param("a", s.get("a")?.clone());
            let l = t.cross_entropy(a, &[1, 3, 0], &[true, true, true])?;
            let g = t.backward(l)?;
            Ok(LossEval { loss: t.value(l).item() as f64, grads: t.param_grads(&g) })
        }),
        ("add_mul", |s| {
            let mut t = come_core::tape::Tape::new();
            let a = t.named_param("a", s.get("a")?.clone());
            let c = t.named_param("c", s.get("c")?.clone());
            let sum = t.add(a, c)?;
            let prod = t.mul(sum, a)?;
            let l = t.sum(prod);
            let g = t.backward(l)?;
            Ok(LossEval { loss: t.value(l).item() as f64, grads: t.param_grads(&g) })
        }),
        ("silu", |s| {
            let mut t = come_core::tape::Tape::new();
            let a = t.named_param("a", s.get("a")?.clone());
            let y = t.silu(a);
            let l = t.sum(y);
            let g = t.backward(l)?;
            Ok(LossEval { loss: t.value(l).item() as f64, grads: t.param_grads(&g) })
        }),
        ("rmsnorm", |s| {
            let mut t = come_core::tape::Tape::new();
            let a = t.named_param("a", s.get("a")?.clone());
            let gain = t.named_param("gain", s.get("gain")?.clone());
            let y = t.rmsnorm(a, gain)?;
            let w = t.constant(Tensor::new(vec![3, 4], (0..12).map(|i| (i as f32).cos()).collect())?);
            let m = t.mul(y, w)?;
            let l = t.sum(m);
            let g = t.backward(l)?;
            Ok(LossEval { loss: t.value(l).item() as f64, grads: t.param_grads(&g) })
        }),
        ("embedding", |s| {
            let mut t = come_core::tape::Tape::new();
            let table = t.named_param("table", s.get("table")?.clone());
            let y = t.embedding(table, &[0, 2, 4, 2])?;
            let sq = t.mul(y, y)?;
            let l = t.sum(sq);
            let g = t.backward(l)?;
            Ok(LossEval { loss: t.value(l).item() as f64, grads: t.param_grads(&g) })
        }),
        ("slice_concat", |s| {
            let mut t = come_core::tape::Tape::new();
            let a = t.named_param("a", s.get("a")?.clone());
            let left = t.slice_cols(a, 0, 2)?;
            let right = t.slice_cols(a, 2, 2)?;
            let swapped = t.concat_cols(&[right, left])?;
            let m = t.mul(swapped, a)?;
            let l = t.sum(m);
            let g = t.backward(l)?;
            Ok(LossEval { loss: t.value(l).item() as f64, grads: t.param_grads(&g) })
        }),
        ("causal_softmax_scale_rows", |s| {
            let mut t = come_core::tape::Tape::new();
            let a = t.named_param("sq", s.get("sq")?.clone());
            let rows = t.named_param("rows", s.get("rows")?.clone());
            let p = t.causal_softmax(a)?;
            let picked = t.slice_cols(p, 0, 3)?;
            let sc = t.scale_rows(picked, rows)?;
            let l = t.sum(sc);
            let g = t.backward(l)?;
            Ok(LossEval { loss: t.value(l).item() as f64, grads: t.param_grads(&g) })
        }),
        ("logprob_neg_logsigmoid", |s| {
            let mut t = come_core::tape::Tape::new();
            let a = t.named_param("a", s.get("a")?.clone());
            let lp = t.logprob_sum(a, &[0, 1, 2], &[true, false, true])?;
            let sc = t.scale(lp, 0.25);
            let l = t.neg_logsigmoid(sc);
            let g = t.backward(l)?;
            Ok(LossEval { loss: t.value(l).item() as f64, grads: t.param_grads(&g) })
        }),
        ("onehot_sqdist", |s| {
            let mut t = come_core::tape::Tape::new();
            let a = t.named_param("a", s.get("a")?.clone());
            let p = t.softmax_rows(a);
            let l = t.onehot_sqdist(p, &[1, 0, 3], &[true, true, true])?;
            let g = t.backward(l)?;
            Ok(LossEval { loss: t.value(l).item() as f64, grads: t.param_grads(&g) })
        }),
    ];
    for (name, f) in primitives {
        let report = grad_check(&store, &[], f, eps, tol).unwrap();
        worst = worst.max(report.max_rel_err);
        assert!(report.passed, "{name}: max rel err {}", report.max_rel_err);
    }

    // stage losses over the full tiny models
    let cfg = tiny_cfg(4);
    let tokens = toy_tokens(10, 5, cfg.vocab_size);
    let targets: Vec<usize> = tokens.iter().skip(1).copied().chain([0]).collect();
    let mut mask = vec![true; tokens.len()];
    mask[0] = false;
    *mask.last_mut().unwrap() = false;
    let labels: Vec<usize> = (0..tokens.len()).map(|i| i % 4).collect();

    // specialist loss: masked NLL through the dense model
    let dense = model::init_params(&cfg, Arch::Dense, 31).unwrap();
    let expert_loss = {
        let tokens = tokens.clone();
        let targets = targets.clone();
        let mask = mask.clone();
        move |s: &ParamStore| -> come_core::Result<LossEval> {
            let mut mt = ModelTape::new(s);
            let f = model::forward_tape(&mut mt, &tiny_cfg(4), Arch::Dense, &tokens, None)?;
            let l = mt.tape.cross_entropy(f.logits, &targets, &mask)?;
            let g = mt.tape.backward(l)?;
            Ok(LossEval { loss: mt.tape.value(l).item() as f64, grads: mt.tape.param_grads(&g) })
        }
    };
    let report = grad_check(&dense, &[], expert_loss, eps, tol).unwrap();
    worst = worst.max(report.max_rel_err);
    assert!(report.passed, "specialist loss: {}", report.max_rel_err);

    // router loss: cross-entropy plus squared-distance regularizer
    let come = model::init_params(&cfg, Arch::Come, 37).unwrap();
    let router_loss = {
        let tokens = tokens.clone();
        let labels = labels.clone();
        let mask = mask.clone();
        move |s: &ParamStore| -> come_core::Result<LossEval> {
            let mut mt = ModelTape::new(s);
            let f = model::forward_tape(&mut mt, &tiny_cfg(4), Arch::Come, &tokens, None)?;
            let router = f.router_logits.unwrap();
            let ce = mt.tape.cross_entropy(router, &labels, &mask)?;
            let p = mt.tape.softmax_rows(router);
            let rn = mt.tape.onehot_sqdist(p, &labels, &mask)?;
            let l = mt.tape.add(ce, rn)?;
            let g = mt.tape.backward(l)?;
            Ok(LossEval { loss: mt.tape.value(l).item() as f64, grads: mt.tape.param_grads(&g) })
        }
    };
    let report = grad_check(&come, &[], router_loss, eps, tol).unwrap();
    worst = worst.max(report.max_rel_err);
    assert!(report.passed, "router loss: {}", report.max_rel_err);

    // trace loss: masked NLL plus weighted router regularizer
    let cot_loss = {
        let tokens = tokens.clone();
        let targets = targets.clone();
        let labels = labels.clone();
        let mask = mask.clone();
        move |s: &ParamStore| -> come_core::Result<LossEval> {
            let mut mt = ModelTape::new(s);
            let f = model::forward_tape(&mut mt, &tiny_cfg(4), Arch::Come, &tokens, None)?;
            let nll = mt.tape.cross_entropy(f.logits, &targets, &mask)?;
            let p = mt.tape.softmax_rows(f.router_logits.unwrap());
            let rn = mt.tape.onehot_sqdist(p, &labels, &mask)?;
            let wrn = mt.tape.scale(rn, 0.1);
            let l = mt.tape.add(nll, wrn)?;
            let g = mt.tape.backward(l)?;
            Ok(LossEval { loss: mt.tape.value(l).item() as f64, grads: mt.tape.param_grads(&g) })
        }
    };
    let report = grad_check(&come, &[], cot_loss, eps, tol).unwrap();
    worst = worst.max(report.max_rel_err);
    assert!(report.passed, "trace loss: {}", report.max_rel_err);

    // preference loss: sigmoid margin + SFT + regularizer over two forwards
    let reference = model::init_params(&cfg, Arch::Come, 41).unwrap();
    let chosen = toy_tokens(5, 7, cfg.vocab_size);
    let rejected = toy_tokens(4, 11, cfg.vocab_size);
    let prompt = toy_tokens(4, 13, cfg.vocab_size);
    let delta_ref = {
        let c = model::sequence_logprob(&reference, &cfg, Arch::Come, &prompt, &chosen).unwrap() as f32;
        let r = model::sequence_logprob(&reference, &cfg, Arch::Come, &prompt, &rejected).unwrap() as f32;
        c - r
    };
    let dpo_loss = {
        let (prompt, chosen, rejected) = (prompt.clone(), chosen.clone(), rejected.clone());
        move |s: &ParamStore| -> come_core::Result<LossEval> {
            let cfg = tiny_cfg(4);
            let mut mt = ModelTape::new(s);
            let seq = |p: &mut ModelTape, toks: &[usize]| -> come_core::Result<(come_core::tape::Var, Vec<usize>, Vec<bool>)> {
                let mut full = prompt.clone();
                full.extend_from_slice(toks);
                let f = model::forward_tape(p, &cfg, Arch::Come, &full, None)?;
                let mut targets = vec![0usize; full.len()];
                let mut mask = vec![false; full.len()];
                for i in 0..full.len() - 1 {
                    targets[i] = full[i + 1];
                    mask[i] = i + 1 >= prompt.len();
                }
                Ok((f.logits, targets, mask))
            };
            let (lc, tc_, mc) = seq(&mut mt, &chosen)?;
            let lp_c = mt.tape.logprob_sum(lc, &tc_, &mc)?;
            let (lr, tr, mr) = seq(&mut mt, &rejected)?;
            let lp_r = mt.tape.logprob_sum(lr, &tr, &mr)?;
            let dm = mt.tape.sub(lp_c, lp_r)?;
            let dref = mt.tape.constant(Tensor::scalar(delta_ref));
            let margin = mt.tape.sub(dm, dref)?;
            let scaled = mt.tape.scale(margin, 0.1);
            let pref = mt.tape.neg_logsigmoid(scaled);
            let sft = mt.tape.cross_entropy(lc, &tc_, &mc)?;
            let l = mt.tape.add(pref, sft)?;
            let g = mt.tape.backward(l)?;
            Ok(LossEval { loss: mt.tape.value(l).item() as f64, grads: mt.tape.param_grads(&g) })
        }
    };
    let report = grad_check(&come, &[], dpo_loss, eps, tol).unwrap();
    worst = worst.max(report.max_rel_err);
    assert!(report.passed, "preference loss: {}", report.max_rel_err);

    let elapsed = started.elapsed();
    verdict(
        "1 (gradient correctness)",
        elapsed.as_secs() < 120,
        &format!("max rel err {worst:.2e} across primitives and losses in {elapsed:.2?}"),
    );
}

fn small_data() -> (ComeConfig, Vocab, Vec<synthgui::StepRecord>, Vec<synthgui::StepRecord>) {
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
    let eps = synthgui::gen_episodes(400, 10, Difficulty::Easy);
    let steps: Vec<_> = eps.iter().flat_map(|e| e.steps.clone()).collect();
    let (train, val) = steps.split_at(steps.len() - 5);
    (cfg, vocab, train.to_vec(), val.to_vec())
}

/// Criterion 2: per-stage freeze contracts are bitwise.
#[test]
fn criterion_2_freeze_contracts() {
    let (cfg, vocab, train, val) = small_data();
    let tc = TrainConfig {
        peak_lr: 1e-2,
        epochs: 1,
        batch_size: 4,
        gamma: 0.0,
        seed: 3,
    };
    let mut dense = model::init_params(&cfg, Arch::Dense, 5).unwrap();
    let before = dense.clone();
    training::expert_ft(&mut dense, &cfg, &vocab, StageId::Ad, &train[..8], &[], &tc).unwrap();
    let mut non_ffn_frozen = true;
    for (name, t) in before.iter() {
        if !model::is_ffn_param(name) {
            let now = dense.get(name).unwrap();
            non_ffn_frozen &= now
                .data()
                .iter()
                .zip(t.data())
                .all(|(a, b)| a.to_bits() == b.to_bits());
        }
    }

    let base = model::init_params(&cfg, Arch::Dense, 7).unwrap();
    let refs = [&base, &base, &base, &base];
    let mut come = model::assemble_from_experts(&refs, &cfg, 7).unwrap();
    let before = come.clone();
    training::router_ft(&mut come, &cfg, &vocab, &train[..8], &val, &tc).unwrap();
    let mut others_frozen = true;
    let mut router_moved = false;
    for (name, t) in before.iter() {
        let now = come.get(name).unwrap();
        let same = now
            .data()
            .iter()
            .zip(t.data())
            .all(|(a, b)| a.to_bits() == b.to_bits());
        if name == ROUTER_PARAM {
            router_moved = !same;
        } else {
            others_frozen &= same;
        }
    }
    verdict(
        "2 (freeze contracts)",
        non_ffn_frozen && others_frozen && router_moved,
        &format!("non-FFN frozen {non_ffn_frozen}, router-only update {others_frozen}"),
    );
}

/// Criterion 3: architecture identities.
#[test]
fn criterion_3_architecture_identities() {
    // (a) single-channel model equals the dense forward bitwise
    let cfg1 = ComeConfig { experts: 1, ..tiny_cfg(1) };
    let dense = model::init_params(&cfg1, Arch::Dense, 3).unwrap();
    let come1 = model::assemble_from_experts(&[&dense], &cfg1, 9).unwrap();
    let tokens = toy_tokens(12, 17, cfg1.vocab_size);
    let a = model::dense_logits(&dense, &cfg1, &tokens).unwrap();
    let b = model::come_logits(&come1, &cfg1, &tokens).unwrap();
    let ident_a = a.data() == b.data();

    // (b) one-hot routing reproduces each specialist bitwise
    let cfg = tiny_cfg(4);
    let base = model::init_params(&cfg, Arch::Dense, 19).unwrap();
    let mut specs = Vec::new();
    for e in 0..4u64 {
        let mut s = base.clone();
        let mut rng = Rng::new(500 + e);
        let name = "layers.00.ffn.w_down";
        let t = Tensor::randn(s.get(name).unwrap().shape().to_vec(), 0.05, &mut rng);
        s.set(name, t).unwrap();
        specs.push(s);
    }
    let refs: Vec<&ParamStore> = specs.iter().collect();
    let come = model::assemble_from_experts(&refs, &cfg, 3).unwrap();
    let tokens4 = toy_tokens(10, 23, cfg.vocab_size);
    let (ch, _) = model::forward_channels(&come, &cfg, &tokens4).unwrap();
    let mut ident_b = true;
    for (e, spec) in specs.iter().enumerate() {
        let mut mt = ModelTape::frozen(spec);
        let f = model::forward_tape(&mut mt, &cfg, Arch::Dense, &tokens4, None).unwrap();
        let want = mt.tape.value(f.channels[0]).clone();
        ident_b &= model::route_one_hot(&ch, e).data() == want.data();
    }

    // (c) margin-20 fusion matches the selected channel within 1e-5
    let n = tokens4.len();
    let mut logits = vec![0.0f32; n * 4];
    for i in 0..n {
        logits[i * 4 + 2] = 20.0;
    }
    let rl = model::RouterLogits(Tensor::new(vec![n, 4], logits).unwrap());
    let fused = model::route_and_fuse(&ch, &rl).unwrap();
    let ident_c = fused.max_abs_diff(&ch.per_expert[2]) < 1e-5;

    verdict(
        "3 (architecture identities)",
        ident_a && ident_b && ident_c,
        &format!("dense-equivalence {ident_a}, one-hot assembly {ident_b}, margin fusion {ident_c}"),
    );
}

/// Criterion 5: total information gain equals an independent
/// recomputation, and identical scorers with identical contexts give 0.
#[test]
fn criterion_5_infogain_oracle() {
    let vocab = Vocab::new();
    let cfg = ComeConfig {
        vocab_size: vocab.len(),
        hidden: 16,
        layers: 1,
        heads: 2,
        experts: 1,
        intermediate: 16,
        max_seq: 200,
    };
    let stores: Vec<ParamStore> = (0..4)
        .map(|k| model::init_params(&cfg, Arch::Dense, 600 + k).unwrap())
        .collect();
    let set = RewardModelSet::training_based(stores, cfg.clone()).unwrap();
    let rc = RewardConfig::default();
    let episodes = synthgui::gen_episodes(900, 210, Difficulty::Easy);
    let steps: Vec<_> = episodes.iter().flat_map(|e| e.steps.clone()).collect();

    // independent recomputation: teacher-forced log-probabilities via the
    // taped forward (a different code path from the scorer's decoder)
    let tape_logprob = |store: &ParamStore, context: &[usize], target: &[usize]| -> f64 {
        let mut mt = ModelTape::frozen(store);
        let mut full = context.to_vec();
        full.extend_from_slice(target);
        let f = model::forward_tape(&mut mt, &cfg, Arch::Dense, &full, None).unwrap();
        let logits = mt.tape.value(f.logits);
        let mut total = 0.0f64;
        for (i, &t) in target.iter().enumerate() {
            let row = logits.row(context.len() + i - 1);
            total += come_core::kernels::log_softmax_at(row, t);
        }
        total
    };

    let mut checked = 0;
    let mut max_err = 0.0f64;
    for step in steps.iter().take(500) {
        let (prompt, _) = synthgui::serialize_step(step, &vocab, 120).unwrap();
        let trace = step.gold_trace.to_trace(&vocab).unwrap();
        let gold = parse_action(&step.gold_action).unwrap();
        let bundle = reward::score_bundle(&set, &prompt, &trace, &gold, &rc, &vocab).unwrap();
        // recompute the sum of the three stage differences independently
        let target = trace.af_span_tokens(&vocab);
        let mut lp = [0.0f64; 4];
        for (k, slot) in lp.iter_mut().enumerate() {
            let mut ctx = prompt.clone();
            ctx.extend(trace.stage_prefix_tokens(&vocab, k));
            *slot = tape_logprob(set.rm(k), &ctx, &target);
        }
        let want = (lp[1] - lp[0]) + (lp[2] - lp[1]) + (lp[3] - lp[2]);
        max_err = max_err.max((bundle.r_ig - want).abs());
        checked += 1;
    }
    let recompute_ok = checked == 500 && max_err < 1e-6;

    // identical scorers and coinciding contexts: the gain is exactly zero
    let step = &steps[0];
    let (prompt, _) = synthgui::serialize_step(step, &vocab, 120).unwrap();
    let mut trace = step.gold_trace.to_trace(&vocab).unwrap();
    trace.segments[1].clear();
    let mut same = RewardModelSet::training_based(
        vec![
            set.rm(0).clone(),
            set.rm(1).clone(),
            set.rm(1).clone(),
            set.rm(3).clone(),
        ],
        cfg.clone(),
    )
    .unwrap();
    same.stores[2] = same.stores[1].clone();
    let target = trace.af_span_tokens(&vocab);
    let mut ctx = prompt.clone();
    ctx.extend(trace.stage_prefix_tokens(&vocab, 1));
    let a = reward::seq_logprob(same.rm(1), &cfg, &ctx, &target).unwrap();
    let b = reward::seq_logprob(same.rm(2), &cfg, &ctx, &target).unwrap();
    let exact_zero = (b - a) == 0.0;

    verdict(
        "5 (information-gain oracle)",
        recompute_ok && exact_zero,
        &format!("max |r_ig - recomputation| {max_err:.2e} over {checked} traces; identical-pair gain exactly {}", b - a),
    );
}

/// Criterion 6: pair construction agrees with a brute-force enumerator of
/// the case rules on randomized sets, including none-pair outcomes and
/// tie-breaks.
#[test]
fn criterion_6_pair_selection_oracle() {
    fn bundle(ig: [f64; 3], acc: f64) -> RewardBundle {
        let r_ig = ig[0] + ig[1] + ig[2];
        RewardBundle {
            ig_ss: ig[0],
            ig_sp: ig[1],
            ig_ad: ig[2],
            r_ig,
            r_ig_plus: ig.iter().all(|&v| v > 0.0),
            r_acc: acc,
            r_cot: r_ig * acc,
        }
    }
    fn sample(i: usize, b: RewardBundle, correct: bool) -> SampledTrace {
        SampledTrace {
            tokens: vec![i],
            text: format!("s{i}"),
            bundle: b,
            correct,
        }
    }
    // brute-force enumerator, written straight from the case definitions
    fn enumerate(s: &SampledSet) -> Option<(Strategy, Vec<usize>, usize)> {
        let k = s.samples.len();
        let correct: Vec<usize> = (0..k).filter(|&i| s.samples[i].correct).collect();
        let wrong: Vec<usize> = (0..k).filter(|&i| !s.samples[i].correct).collect();
        let best = |c: &[usize], f: &dyn Fn(usize) -> f64| -> Option<usize> {
            c.iter().copied().fold(None, |acc, i| match acc {
                None => Some(i),
                Some(j) => Some(if f(i) > f(j) { i } else { j }),
            })
        };
        if wrong.is_empty() {
            let plus: Vec<usize> = correct.iter().copied().filter(|&i| s.samples[i].bundle.r_ig_plus).collect();
            let minus: Vec<usize> = correct.iter().copied().filter(|&i| !s.samples[i].bundle.r_ig_plus).collect();
            let c = best(&plus, &|i| s.samples[i].bundle.r_cot)?;
            let r = best(&minus, &|i| -s.samples[i].bundle.r_ig)?;
            Some((Strategy::Cc, vec![c], r))
        } else if !correct.is_empty() {
            let plus: Vec<usize> = correct.iter().copied().filter(|&i| s.samples[i].bundle.r_ig_plus).collect();
            let c = if plus.is_empty() {
                best(&correct, &|i| s.samples[i].bundle.r_cot)?
            } else {
                best(&plus, &|i| s.samples[i].bundle.r_cot)?
            };
            let r = best(&wrong, &|i| -s.samples[i].bundle.r_ig)?;
            Some((Strategy::Cw, vec![c], r))
        } else {
            let all: Vec<usize> = (0..k).collect();
            let r = best(&all, &|i| -s.samples[i].bundle.r_ig)?;
            Some((Strategy::Lw, vec![], r))
        }
    }

    let mut rng = Rng::new(606);
    let mut agreements = 0;
    let mut nones = 0;
    let quant = |v: f64| (v * 3.0).round() / 3.0;
    for case in 0..250 {
        let k = 2 + rng.below(9);
        let samples: Vec<SampledTrace> = (0..k)
            .map(|i| {
                let ig = [
                    quant(rng.gauss(0.5) as f64),
                    quant(rng.gauss(0.5) as f64),
                    quant(rng.gauss(0.5) as f64),
                ];
                let acc = if rng.next_f32() < 0.4 { 0.0 } else { quant(rng.next_f64()) };
                sample(i, bundle(ig, acc), rng.next_f32() < 0.5)
            })
            .collect();
        let set = SampledSet {
            episode_id: case,
            step_idx: 0,
            samples,
            gold: sample(usize::MAX, bundle([0.4, 0.4, 0.4], 1.0), true),
        };
        let got = dpo::build_pair(&set);
        let want = enumerate(&set);
        match (&got, &want) {
            (None, None) => {
                nones += 1;
                agreements += 1;
            }
            (Some(g), Some((strat, chosen_idx, rej_idx))) => {
                let chosen_ok = if *strat == Strategy::Lw {
                    g.chosen.tokens == set.gold.tokens
                } else {
                    g.chosen.tokens == set.samples[chosen_idx[0]].tokens
                };
                assert!(g.strategy == *strat && chosen_ok && g.rejected.tokens == set.samples[*rej_idx].tokens,
                        "case {case}: {:?} vs {:?}", g.strategy, strat);
                agreements += 1;
            }
            _ => panic!("case {case}: agreement broken: {:?} vs {:?}",
                        got.map(|p| p.strategy), want.map(|w| w.0)),
        }
    }
    verdict(
        "6 (pair-selection oracle)",
        agreements == 250 && nones > 0,
        &format!("{agreements}/250 randomized sets agree ({nones} none-pair outcomes)"),
    );
}

/// Criterion 7: action-accuracy reward fixed points at the configured
/// thresholds.
#[test]
fn criterion_7_reward_fixed_points() {
    let rc = RewardConfig::default();
    assert_eq!(rc.delta_d, 50.0);
    assert_eq!(rc.delta_f, 0.5);
    let gold = Action::Click { x: 400, y: 300 };
    let exact = reward::r_acc(Some(&Action::Click { x: 400, y: 300 }), &gold, &rc) == 1.0;
    let at_thresh = reward::r_acc(Some(&Action::Click { x: 450, y: 300 }), &gold, &rc) == 0.0;
    let half = reward::r_acc(Some(&Action::Click { x: 425, y: 300 }), &gold, &rc) == 0.5;
    let gold_t = Action::Type("wifi password".into());
    let f1_at_thresh = reward::r_acc(Some(&Action::Type("wifi theme".into())), &gold_t, &rc) == 0.0;
    let press_hit = reward::r_acc(
        Some(&Action::Press(come_core::action::PressKey::Back)),
        &Action::Press(come_core::action::PressKey::Back),
        &rc,
    ) == 1.0;
    let press_miss = reward::r_acc(
        Some(&Action::Press(come_core::action::PressKey::Home)),
        &Action::Press(come_core::action::PressKey::Back),
        &rc,
    ) == 0.0;
    let mut disc = rc;
    disc.mode = RewardMode::Discrete;
    let discrete_ok = reward::r_acc(Some(&Action::Click { x: 430, y: 300 }), &gold, &disc) == 1.0
        && reward::r_acc(Some(&Action::Click { x: 450, y: 300 }), &gold, &disc) == 0.0;
    verdict(
        "7 (reward fixed points)",
        exact && at_thresh && half && f1_at_thresh && press_hit && press_miss && discrete_ok,
        "dis=0->1, dis=delta->0, dis=delta/2->0.5, f1<=delta_f->0, exact-match indicator, discrete collapse",
    );
}

/// Criterion 8: measured multiply-add counts equal the analytic per-layer
/// costs exactly at three geometry settings.
#[test]
fn criterion_8_flops() {
    let mut all_ok = true;
    let mut detail = String::new();
    for (h, l, i) in [(64usize, 128usize, 128usize), (48, 96, 80), (32, 200, 64)] {
        let cfg = ComeConfig {
            vocab_size: 11,
            hidden: h,
            layers: 1,
            heads: 4,
            experts: 4,
            intermediate: i,
            max_seq: l,
        };
        let cmi = eval::CostModelInput {
            hidden: h as u64,
            seq_len: l as u64,
            intermediate: i as u64,
            experts: 4,
        };
        let dense_measured = eval::flops_measured_layer(&cfg, Arch::Dense, l).unwrap();
        let come_measured = eval::flops_measured_layer(&cfg, Arch::Come, l).unwrap();
        let dense_analytic = eval::flops_analytic_dense(cmi).total();
        let come_analytic = eval::flops_analytic_come(cmi).total();
        all_ok &= dense_measured == dense_analytic && come_measured == come_analytic;
        if h == 64 {
            all_ok &= dense_analytic == 6_291_456 && come_analytic == 25_165_824;
            detail = format!(
                "H=64,L=128,I=128: dense {dense_measured} (want 6291456), channel {come_measured} (want 25165824)"
            );
        }
    }
    verdict("8 (cost model)", all_ok, &detail);
}

/// Criterion 10: the full pipeline re-run with identical config and seed
/// produces byte-identical checkpoints, data files and reports.
#[test]
fn criterion_10_determinism() {
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
    let run = |dir: &std::path::Path| {
        std::fs::create_dir_all(dir).unwrap();
        let episodes = synthgui::gen_episodes(3000, 12, Difficulty::Easy);
        let (train, val, _) = synthgui::split_episodes(&episodes);
        synthgui::write_jsonl(&train, &dir.join("train.jsonl")).unwrap();

        let cc = training::CurriculumConfig {
            init_seed: 44,
            skip_expert_ft: false,
            skip_router_ft: false,
            pretrain: TrainConfig { peak_lr: 3e-3, epochs: 1, batch_size: 8, gamma: 0.0, seed: 1 },
            expert: TrainConfig { peak_lr: 2e-3, epochs: 1, batch_size: 8, gamma: 0.0, seed: 2 },
            router: TrainConfig { peak_lr: 0.1, epochs: 5, batch_size: 8, gamma: 0.0, seed: 3 },
            cot: TrainConfig { peak_lr: 2e-3, epochs: 1, batch_size: 8, gamma: 0.1, seed: 4 },
        };
        let (come, rows) = training::run_curriculum(&cfg, &vocab, &train, &val, &cc).unwrap();
        save_checkpoint(&come, &cfg.to_json(), &dir.join("policy")).unwrap();
        std::fs::write(dir.join("stage.csv"), come_core::report::stage_report_csv(&rows)).unwrap();

        let rm_tc = TrainConfig { peak_lr: 2e-3, epochs: 1, batch_size: 8, gamma: 0.0, seed: 5 };
        let mut rms = Vec::new();
        for k in 0..4 {
            let init = model::init_params(&cfg, Arch::Dense, 80 + k).unwrap();
            let (rm, _) = reward::train_rm(init, &cfg, &vocab, k as usize, &train, &rm_tc).unwrap();
            rms.push(rm);
        }
        let set = RewardModelSet::training_based(rms, cfg.clone()).unwrap();
        let sc = dpo::SampleConfig { k: 3, temperature: 1.0, hit_threshold: 140.0 };
        let sets = dpo::sample_steps(&come, &cfg, &set, &vocab, &train[..10], &RewardConfig::default(), &sc, 99).unwrap();
        dpo::write_sets_jsonl(&sets, &dir.join("samples.jsonl")).unwrap();
        let pairs = dpo::build_dpo_dataset(&sets, &[Strategy::Cc, Strategy::Cw, Strategy::Lw]);
        dpo::write_pairs_jsonl(&pairs, &dir.join("pairs.jsonl")).unwrap();
        if !pairs.is_empty() {
            let mut policy = come.clone();
            let tc = TrainConfig { peak_lr: 5e-4, epochs: 1, batch_size: 4, gamma: 0.1, seed: 6 };
            dpo::dpo_train(&mut policy, &come, &cfg, &vocab, &pairs, &train, &tc, &DpoHyper::default()).unwrap();
            save_checkpoint(&policy, &cfg.to_json(), &dir.join("dpo")).unwrap();
        }
        let metrics = eval::evaluate_policy(&come, &cfg, &vocab, &val, eval::MATCH_THRESHOLD).unwrap();
        std::fs::write(dir.join("metrics.csv"), come_core::report::metrics_csv(&metrics)).unwrap();
    };
    let base = std::env::temp_dir().join(format!("det_{}", std::process::id()));
    let (d1, d2) = (base.join("run1"), base.join("run2"));
    run(&d1);
    run(&d2);
    let mut all_same = true;
    let mut checked = 0;
    for entry in std::fs::read_dir(&d1).unwrap() {
        let name = entry.unwrap().file_name();
        let a = std::fs::read(d1.join(&name)).unwrap();
        let b = std::fs::read(d2.join(&name)).unwrap();
        all_same &= a == b;
        checked += 1;
    }
    std::fs::remove_dir_all(&base).ok();
    verdict(
        "10 (determinism)",
        all_same && checked >= 6,
        &format!("{checked} artifacts byte-identical across re-runs"),
    );
}

/// Round-trip and loading checks that the preference records and sampled
/// sets written by the pipeline can be read back identically.
#[test]
fn artifact_roundtrips() {
    let vocab = Vocab::new();
    let ep = synthgui::gen_episode(5, Difficulty::Medium);
    let trace = ep.steps[0].gold_trace.to_trace(&vocab).unwrap();
    let pair = DpoPair {
        episode_id: 5,
        step_idx: 0,
        strategy: Strategy::Cw,
        chosen: SampledTrace {
            tokens: trace.render(&vocab),
            text: vocab.decode(&trace.render(&vocab)),
            bundle: RewardBundle::zero(),
            correct: true,
        },
        rejected: SampledTrace {
            tokens: vec![vocab.id("STOP").unwrap()],
            text: "STOP".into(),
            bundle: RewardBundle::zero(),
            correct: false,
        },
    };
    let dir = std::env::temp_dir().join(format!("pairs_{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let path = dir.join("pairs.jsonl");
    dpo::write_pairs_jsonl(std::slice::from_ref(&pair), &path).unwrap();
    let back = dpo::read_pairs_jsonl(&path, &vocab).unwrap();
    assert_eq!(back.len(), 1);
    assert_eq!(back[0].chosen.tokens, pair.chosen.tokens);
    assert_eq!(back[0].rejected.tokens, pair.rejected.tokens);
    std::fs::remove_dir_all(&dir).ok();
}

/// Checkpoint round-trips stay bit-exact through the manifest format.
#[test]
fn checkpoint_roundtrip_for_models() {
    let cfg = tiny_cfg(4);
    let store = model::init_params(&cfg, Arch::Come, 77).unwrap();
    let dir = std::env::temp_dir().join(format!("ckpt_acc_{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let stem = dir.join("m");
    save_checkpoint(&store, &cfg.to_json(), &stem).unwrap();
    let (loaded, cfg_json) = load_checkpoint(&stem).unwrap();
    assert_eq!(ComeConfig::from_json(&cfg_json).unwrap(), cfg);
    for (name, t) in store.iter() {
        let l = loaded.get(name).unwrap();
        assert!(l.data().iter().zip(t.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }
    // adam state is fresh after loading: identical updates on both stores
    let mut a = store.clone();
    let mut b = loaded;
    let mut grads = BTreeMap::new();
    grads.insert(
        ROUTER_PARAM.to_string(),
        Tensor::full(vec![cfg.experts * cfg.hidden, cfg.experts], 0.01),
    );
    a.adam_step(&grads, 0.01, AdamConfig::default()).unwrap();
    b.adam_step(&grads, 0.01, AdamConfig::default()).unwrap();
    assert_eq!(a.get(ROUTER_PARAM).unwrap().data(), b.get(ROUTER_PARAM).unwrap().data());
    std::fs::remove_dir_all(&dir).ok();
}
