//! The channel-of-experts network, its dense and token-routed baselines,
//! assembly from dense specialists, and autoregressive decoding.
//!
//! Architecture: a pre-norm transformer whose embedding output is
//! replicated into E parallel channels. Every layer applies one shared
//! causal self-attention to each channel independently, then channel e's
//! own feed-forward block. After the last layer a channel router projects
//! the concatenated per-channel states to E logits per position; their
//! softmax fuses the channels into one stream that feeds the shared LM
//! head, so the expert a token uses is chosen per *output* position. The
//! token-routed baseline instead gates each input token to one expert
//! inside every layer.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::kernels;
use crate::params::ParamStore;
use crate::rng::Rng;
use crate::tape::{Tape, Var};
use crate::tensor::{Error, Result, Tensor};
use crate::vocab::TokenId;

/// Model dimensions. The stage-to-expert mapping is fixed: screen summary
/// is channel 0, subtask plan 1, action decision 2, action function 3.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComeConfig {
    pub vocab_size: usize,
    pub hidden: usize,
    pub layers: usize,
    pub heads: usize,
    pub experts: usize,
    pub intermediate: usize,
    pub max_seq: usize,
}

impl ComeConfig {
    /// Desk-scale defaults: trains on CPU in minutes.
    pub fn desk(vocab_size: usize) -> Self {
        ComeConfig {
            vocab_size,
            hidden: 64,
            layers: 4,
            heads: 4,
            experts: 4,
            intermediate: 128,
            max_seq: 256,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden % self.heads != 0 {
            return Err(Error::InvalidArgument(format!(
                "hidden {} not divisible by heads {}",
                self.hidden, self.heads
            )));
        }
        if self.experts == 0 || self.layers == 0 || self.vocab_size == 0 {
            return Err(Error::InvalidArgument("zero-sized model".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }

    pub fn from_json(v: &serde_json::Value) -> Result<Self> {
        serde_json::from_value(v.clone()).map_err(|e| Error::Parse(format!("model config: {e}")))
    }
}

/// Which parameter layout / forward path a store uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arch {
    /// Single FFN per layer, no router.
    Dense,
    /// E channels with per-output-position fusion.
    Come,
    /// E expert FFNs with per-input-token gates.
    Moe,
}

pub fn is_ffn_param(name: &str) -> bool {
    name.contains(".ffn.") || name.contains(".expert.")
}

pub const ROUTER_PARAM: &str = "router.w_c";

fn layer_prefix(l: usize) -> String {
    format!("layers.{l:02}")
}

/// Initialize a parameter store for the given architecture. Parameters are
/// drawn in a fixed order from independent substreams so layouts sharing a
/// seed share their common tensors' values.
pub fn init_params(cfg: &ComeConfig, arch: Arch, seed: u64) -> Result<ParamStore> {
    cfg.validate()?;
    let base = Rng::new(seed).fork(0x90de1);
    let mut store = ParamStore::new();
    let mut stream = 0u64;
    let mut draw = |store: &mut ParamStore, name: &str, shape: Vec<usize>, std: f32| -> Result<()> {
        stream += 1;
        let mut rng = base.fork(stream);
        store.insert(name, Tensor::randn(shape, std, &mut rng))
    };
    let d = cfg.hidden;
    draw(&mut store, "tok_emb", vec![cfg.vocab_size, d], 0.02)?;
    draw(&mut store, "pos_emb", vec![cfg.max_seq, d], 0.02)?;
    for l in 0..cfg.layers {
        let p = layer_prefix(l);
        for w in ["wq", "wk", "wv", "wo"] {
            draw(&mut store, &format!("{p}.attn.{w}"), vec![d, d], 0.02)?;
        }
        store.insert(&format!("{p}.norm1.g"), Tensor::full(vec![d], 1.0))?;
        store.insert(&format!("{p}.norm2.g"), Tensor::full(vec![d], 1.0))?;
        match arch {
            Arch::Dense => {
                draw(&mut store, &format!("{p}.ffn.w_up"), vec![d, cfg.intermediate], 0.02)?;
                draw(&mut store, &format!("{p}.ffn.w_down"), vec![cfg.intermediate, d], 0.02)?;
            }
            Arch::Come | Arch::Moe => {
                for e in 0..cfg.experts {
                    draw(
                        &mut store,
                        &format!("{p}.expert.{e}.w_up"),
                        vec![d, cfg.intermediate],
                        0.02,
                    )?;
                    draw(
                        &mut store,
                        &format!("{p}.expert.{e}.w_down"),
                        vec![cfg.intermediate, d],
                        0.02,
                    )?;
                }
                if arch == Arch::Moe {
                    draw(&mut store, &format!("{p}.gate.w"), vec![d, cfg.experts], 0.02)?;
                }
            }
        }
    }
    store.insert("final_norm.g", Tensor::full(vec![d], 1.0))?;
    draw(&mut store, "lm_head.w", vec![d, cfg.vocab_size], 0.02)?;
    if arch == Arch::Come {
        draw(&mut store, ROUTER_PARAM, vec![cfg.experts * d, cfg.experts], 0.02)?;
    }
    Ok(store)
}

/// A tape plus lazy parameter registration against a store. Parameters
/// passing the `trainable` filter become gradient leaves; the rest enter
/// as constants, which makes per-stage freeze contracts structural.
pub struct ModelTape<'a> {
    pub tape: Tape,
    store: &'a ParamStore,
    vars: HashMap<String, Var>,
    trainable: Box<dyn Fn(&str) -> bool + 'a>,
}

impl<'a> ModelTape<'a> {
    pub fn new(store: &'a ParamStore) -> Self {
        Self::with_filter(store, |_| true)
    }

    pub fn with_filter(store: &'a ParamStore, trainable: impl Fn(&str) -> bool + 'a) -> Self {
        ModelTape {
            tape: Tape::new(),
            store,
            vars: HashMap::new(),
            trainable: Box::new(trainable),
        }
    }

    /// All parameters as constants: forward values only.
    pub fn frozen(store: &'a ParamStore) -> Self {
        Self::with_filter(store, |_| false)
    }

    pub fn p(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.vars.get(name) {
            return Ok(v);
        }
        let value = self.store.get(name)?.clone();
        let v = if (self.trainable)(name) {
            self.tape.named_param(name, value)
        } else {
            self.tape.constant(value)
        };
        self.vars.insert(name.to_string(), v);
        Ok(v)
    }
}

/// Pre-norm attention + feed-forward block on one stream. The feed-forward
/// parameter prefix selects dense (`ffn`) or a specific expert
/// (`expert.<e>`).
pub(crate) fn block_forward(
    mt: &mut ModelTape,
    cfg: &ComeConfig,
    x: Var,
    layer: usize,
    ffn: &str,
) -> Result<Var> {
    let x = attention_sublayer(mt, cfg, x, layer)?;
    ffn_sublayer(mt, cfg, x, layer, ffn)
}

fn attention_sublayer(mt: &mut ModelTape, cfg: &ComeConfig, x: Var, layer: usize) -> Result<Var> {
    let p = layer_prefix(layer);
    let g1 = mt.p(&format!("{p}.norm1.g"))?;
    let n1 = mt.tape.rmsnorm(x, g1)?;
    let wq = mt.p(&format!("{p}.attn.wq"))?;
    let wk = mt.p(&format!("{p}.attn.wk"))?;
    let wv = mt.p(&format!("{p}.attn.wv"))?;
    let wo = mt.p(&format!("{p}.attn.wo"))?;
    let q = mt.tape.matmul(n1, wq)?;
    let k = mt.tape.matmul(n1, wk)?;
    let v = mt.tape.matmul(n1, wv)?;
    let dh = cfg.head_dim();
    let inv = 1.0 / (dh as f32).sqrt();
    let mut head_outs = Vec::with_capacity(cfg.heads);
    for h in 0..cfg.heads {
        let qh = mt.tape.slice_cols(q, h * dh, dh)?;
        let kh = mt.tape.slice_cols(k, h * dh, dh)?;
        let vh = mt.tape.slice_cols(v, h * dh, dh)?;
        let scores = mt.tape.matmul_nt(qh, kh)?;
        let scaled = mt.tape.scale(scores, inv);
        let probs = mt.tape.causal_softmax(scaled)?;
        head_outs.push(mt.tape.matmul(probs, vh)?);
    }
    let concat = mt.tape.concat_cols(&head_outs)?;
    let attn = mt.tape.matmul(concat, wo)?;
    mt.tape.add(x, attn)
}

fn ffn_sublayer(mt: &mut ModelTape, cfg: &ComeConfig, x: Var, layer: usize, ffn: &str) -> Result<Var> {
    let _ = cfg;
    let p = layer_prefix(layer);
    let g2 = mt.p(&format!("{p}.norm2.g"))?;
    let n2 = mt.tape.rmsnorm(x, g2)?;
    let w_up = mt.p(&format!("{p}.{ffn}.w_up"))?;
    let w_down = mt.p(&format!("{p}.{ffn}.w_down"))?;
    let up = mt.tape.matmul(n2, w_up)?;
    let act = mt.tape.silu(up);
    let down = mt.tape.matmul(act, w_down)?;
    mt.tape.add(x, down)
}

fn embed(mt: &mut ModelTape, cfg: &ComeConfig, tokens: &[TokenId]) -> Result<Var> {
    if tokens.is_empty() {
        return Err(Error::InvalidArgument("empty token sequence".into()));
    }
    if tokens.len() > cfg.max_seq {
        return Err(Error::InvalidArgument(format!(
            "sequence length {} exceeds max {}",
            tokens.len(),
            cfg.max_seq
        )));
    }
    if let Some(&bad) = tokens.iter().find(|&&t| t >= cfg.vocab_size) {
        return Err(Error::InvalidArgument(format!(
            "token id {bad} outside vocabulary {}",
            cfg.vocab_size
        )));
    }
    let te = mt.p("tok_emb")?;
    let pe = mt.p("pos_emb")?;
    let tok = mt.tape.embedding(te, tokens)?;
    let positions: Vec<usize> = (0..tokens.len()).collect();
    let pos = mt.tape.embedding(pe, &positions)?;
    mt.tape.add(tok, pos)
}

/// Everything a taped forward produces.
pub struct TapeForward {
    /// Last-layer stream per channel (one entry for dense / token-routed).
    pub channels: Vec<Var>,
    /// Channel router logits, present for the channel architecture.
    pub router_logits: Option<Var>,
    /// Fused (or sole) stream before the final norm.
    pub fused: Var,
    /// LM logits, `[N, V]`.
    pub logits: Var,
    /// Per-layer expert choice per token for the token-routed baseline.
    pub moe_picks: Vec<Vec<usize>>,
}

/// Run the full forward for any architecture on one sequence.
/// `moe_force` pins the token-routed gate to a fixed expert.
pub fn forward_tape(
    mt: &mut ModelTape,
    cfg: &ComeConfig,
    arch: Arch,
    tokens: &[TokenId],
    moe_force: Option<usize>,
) -> Result<TapeForward> {
    let emb = embed(mt, cfg, tokens)?;
    let mut moe_picks = Vec::new();
    let (channels, router_logits, fused) = match arch {
        Arch::Dense => {
            let mut x = emb;
            for l in 0..cfg.layers {
                x = block_forward(mt, cfg, x, l, "ffn")?;
            }
            (vec![x], None, x)
        }
        Arch::Come => {
            // replicate the embedded stream into E channels
            let mut xs = vec![emb; cfg.experts];
            for l in 0..cfg.layers {
                for (e, x) in xs.iter_mut().enumerate() {
                    *x = block_forward(mt, cfg, *x, l, &format!("expert.{e}"))?;
                }
            }
            let flat = mt.tape.concat_cols(&xs)?;
            let wc = mt.p(ROUTER_PARAM)?;
            let logits = mt.tape.matmul(flat, wc)?;
            let fused = fuse_channels(mt, &xs, logits)?;
            (xs, Some(logits), fused)
        }
        Arch::Moe => {
            let mut x = emb;
            for l in 0..cfg.layers {
                x = attention_sublayer(mt, cfg, x, l)?;
                x = moe_ffn_sublayer(mt, cfg, x, l, moe_force, &mut moe_picks)?;
            }
            (vec![x], None, x)
        }
    };
    let gf = mt.p("final_norm.g")?;
    let normed = mt.tape.rmsnorm(fused, gf)?;
    let head = mt.p("lm_head.w")?;
    let logits = mt.tape.matmul(normed, head)?;
    Ok(TapeForward {
        channels,
        router_logits,
        fused,
        logits,
        moe_picks,
    })
}

/// Convex combination of channels under softmax of the router logits.
fn fuse_channels(mt: &mut ModelTape, channels: &[Var], router_logits: Var) -> Result<Var> {
    let weights = mt.tape.softmax_rows(router_logits);
    let mut fused: Option<Var> = None;
    for (e, &ch) in channels.iter().enumerate() {
        let w = mt.tape.slice_cols(weights, e, 1)?;
        let term = mt.tape.scale_rows(ch, w)?;
        fused = Some(match fused {
            None => term,
            Some(acc) => mt.tape.add(acc, term)?,
        });
    }
    Ok(fused.expect("at least one channel"))
}

/// Token-routed feed-forward: each token goes through the expert its gate
/// picks from the token's own hidden state.
fn moe_ffn_sublayer(
    mt: &mut ModelTape,
    cfg: &ComeConfig,
    x: Var,
    layer: usize,
    force: Option<usize>,
    picks_out: &mut Vec<Vec<usize>>,
) -> Result<Var> {
    let p = layer_prefix(layer);
    let g2 = mt.p(&format!("{p}.norm2.g"))?;
    let n2 = mt.tape.rmsnorm(x, g2)?;
    let gate_w = mt.p(&format!("{p}.gate.w"))?;
    let gate = mt.tape.matmul(n2, gate_w)?;
    let rows = mt.tape.value(n2).rows();
    let picks: Vec<usize> = match force {
        Some(e) => vec![e; rows],
        None => {
            let gl = mt.tape.value(gate);
            (0..rows).map(|i| argmax(gl.row(i))).collect()
        }
    };
    let mut outs = Vec::with_capacity(cfg.experts);
    for e in 0..cfg.experts {
        let w_up = mt.p(&format!("{p}.expert.{e}.w_up"))?;
        let w_down = mt.p(&format!("{p}.expert.{e}.w_down"))?;
        let up = mt.tape.matmul(n2, w_up)?;
        let act = mt.tape.silu(up);
        outs.push(mt.tape.matmul(act, w_down)?);
    }
    let selected = mt.tape.row_select(&outs, &picks)?;
    picks_out.push(picks);
    mt.tape.add(x, selected)
}

/// Argmax with lowest-index tie-break.
pub fn argmax(row: &[f32]) -> usize {
    let mut best = 0usize;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

// ---------------------------------------------------------------------------
// Plain-tensor entry points (tape used internally, values extracted)
// ---------------------------------------------------------------------------

/// Per-channel last-layer hidden states for one sequence; conceptually the
/// `[B, N, E, D]` channel state with the batch axis mapped over call sites.
pub struct ChannelHiddenState {
    pub per_expert: Vec<Tensor>,
}

pub struct RouterLogits(pub Tensor);

/// Channel states and router logits for one sequence.
pub fn forward_channels(
    store: &ParamStore,
    cfg: &ComeConfig,
    tokens: &[TokenId],
) -> Result<(ChannelHiddenState, RouterLogits)> {
    let mut mt = ModelTape::frozen(store);
    let f = forward_tape(&mut mt, cfg, Arch::Come, tokens, None)?;
    Ok((
        ChannelHiddenState {
            per_expert: f.channels.iter().map(|&c| mt.tape.value(c).clone()).collect(),
        },
        RouterLogits(mt.tape.value(f.router_logits.expect("come has router")).clone()),
    ))
}

/// Softmax fusion of channel states under the router logits.
pub fn route_and_fuse(ch: &ChannelHiddenState, rl: &RouterLogits) -> Result<Tensor> {
    let mut tape = Tape::new();
    let logits = tape.constant(rl.0.clone());
    let weights = tape.softmax_rows(logits);
    let mut fused: Option<Var> = None;
    for (e, t) in ch.per_expert.iter().enumerate() {
        let c = tape.constant(t.clone());
        let w = tape.slice_cols(weights, e, 1)?;
        let term = tape.scale_rows(c, w)?;
        fused = Some(match fused {
            None => term,
            Some(acc) => tape.add(acc, term)?,
        });
    }
    Ok(tape.value(fused.expect("at least one channel")).clone())
}

/// Hard one-hot selection of a single channel (the assembly identity:
/// channel e under one-hot routing is exactly specialist e's stream).
pub fn route_one_hot(ch: &ChannelHiddenState, expert: usize) -> Tensor {
    ch.per_expert[expert].clone()
}

/// Final norm + LM head over a fused stream.
pub fn lm_logits(fused: &Tensor, store: &ParamStore) -> Result<Tensor> {
    let mut mt = ModelTape::frozen(store);
    let x = mt.tape.constant(fused.clone());
    let g = mt.p("final_norm.g")?;
    let normed = mt.tape.rmsnorm(x, g)?;
    let head = mt.p("lm_head.w")?;
    let logits = mt.tape.matmul(normed, head)?;
    Ok(mt.tape.value(logits).clone())
}

pub fn come_logits(store: &ParamStore, cfg: &ComeConfig, tokens: &[TokenId]) -> Result<Tensor> {
    let mut mt = ModelTape::frozen(store);
    let f = forward_tape(&mut mt, cfg, Arch::Come, tokens, None)?;
    Ok(mt.tape.value(f.logits).clone())
}

pub fn dense_logits(store: &ParamStore, cfg: &ComeConfig, tokens: &[TokenId]) -> Result<Tensor> {
    let mut mt = ModelTape::frozen(store);
    let f = forward_tape(&mut mt, cfg, Arch::Dense, tokens, None)?;
    Ok(mt.tape.value(f.logits).clone())
}

/// Token-routed forward; returns logits and per-layer expert picks.
pub fn moe_logits(
    store: &ParamStore,
    cfg: &ComeConfig,
    tokens: &[TokenId],
    force: Option<usize>,
) -> Result<(Tensor, Vec<Vec<usize>>)> {
    let mut mt = ModelTape::frozen(store);
    let f = forward_tape(&mut mt, cfg, Arch::Moe, tokens, force)?;
    Ok((mt.tape.value(f.logits).clone(), f.moe_picks))
}

// ---------------------------------------------------------------------------
// Assembly from dense specialists
// ---------------------------------------------------------------------------

/// Build a channel model from E dense specialist checkpoints: channel e
/// receives specialist e's feed-forward stack; every non-FFN tensor must be
/// bit-identical across specialists and is stored once, from the first
/// (donor) specialist. The router projection is freshly initialized from
/// `router_seed`.
pub fn assemble_from_experts(
    specialists: &[&ParamStore],
    cfg: &ComeConfig,
    router_seed: u64,
) -> Result<ParamStore> {
    if specialists.is_empty() {
        return Err(Error::InvalidArgument("no specialists".into()));
    }
    if specialists.len() != cfg.experts {
        return Err(Error::InvalidArgument(format!(
            "{} specialists for {} experts",
            specialists.len(),
            cfg.experts
        )));
    }
    let donor = specialists[0];
    for (e, s) in specialists.iter().enumerate() {
        let names_match =
            s.len() == donor.len() && s.names().zip(donor.names()).all(|(a, b)| a == b);
        if !names_match {
            return Err(Error::InvalidArgument(format!(
                "specialist {e} has a different parameter layout"
            )));
        }
        for (name, tensor) in s.iter() {
            let dt = donor.get(name)?;
            if dt.shape() != tensor.shape() {
                return Err(Error::InvalidArgument(format!(
                    "specialist {e} shape mismatch for {name}"
                )));
            }
            if !is_ffn_param(name) && dt.data() != tensor.data() {
                return Err(Error::InvalidArgument(format!(
                    "specialist {e} differs from donor outside the FFN stack at {name}"
                )));
            }
        }
    }
    let mut out = ParamStore::new();
    for (name, tensor) in donor.iter() {
        if !is_ffn_param(name) {
            out.insert(name, tensor.clone())?;
        }
    }
    for l in 0..cfg.layers {
        let p = layer_prefix(l);
        for (e, s) in specialists.iter().enumerate() {
            for w in ["w_up", "w_down"] {
                out.insert(
                    &format!("{p}.expert.{e}.{w}"),
                    s.get(&format!("{p}.ffn.{w}"))?.clone(),
                )?;
            }
        }
    }
    let mut rng = Rng::new(router_seed).fork(0xc0);
    out.insert(
        ROUTER_PARAM,
        Tensor::randn(vec![cfg.experts * cfg.hidden, cfg.experts], 0.02, &mut rng),
    )?;
    Ok(out)
}

// ---------------------------------------------------------------------------
// Incremental decoding
// ---------------------------------------------------------------------------

/// Incremental decoder with per-channel key/value caches. Produces values
/// bit-identical to the taped forward at every position (the kernels fix
/// their accumulation orders to make this hold).
pub struct Decoder<'a> {
    store: &'a ParamStore,
    cfg: &'a ComeConfig,
    arch: Arch,
    k_cache: Vec<Vec<f32>>,
    v_cache: Vec<Vec<f32>>,
    pos: usize,
}

pub struct DecodeOut {
    pub logits: Vec<f32>,
    /// Argmax channel weight at this position (0 for dense).
    pub expert: usize,
    /// Concatenated per-channel hidden state, `E*D` wide.
    pub flat: Vec<f32>,
}

impl<'a> Decoder<'a> {
    pub fn new(store: &'a ParamStore, cfg: &'a ComeConfig, arch: Arch) -> Result<Self> {
        if arch == Arch::Moe {
            return Err(Error::InvalidArgument(
                "incremental decoding supports dense and channel models".into(),
            ));
        }
        let channels = if arch == Arch::Come { cfg.experts } else { 1 };
        Ok(Decoder {
            store,
            cfg,
            arch,
            k_cache: vec![Vec::new(); cfg.layers * channels],
            v_cache: vec![Vec::new(); cfg.layers * channels],
            pos: 0,
        })
    }

    pub fn pos(&self) -> usize {
        self.pos
    }

    fn channels(&self) -> usize {
        if self.arch == Arch::Come {
            self.cfg.experts
        } else {
            1
        }
    }

    /// Feed one token; returns next-token logits, the selected expert and
    /// the concatenated last-layer channel state at this position.
    pub fn step(&mut self, token: TokenId) -> Result<DecodeOut> {
        let cfg = self.cfg;
        if self.pos >= cfg.max_seq {
            return Err(Error::InvalidArgument(format!(
                "decode position {} exceeds max {}",
                self.pos, cfg.max_seq
            )));
        }
        if token >= cfg.vocab_size {
            return Err(Error::InvalidArgument(format!("token id {token} out of vocab")));
        }
        let d = cfg.hidden;
        let dh = cfg.head_dim();
        let inv = 1.0 / (dh as f32).sqrt();
        let te = self.store.get("tok_emb")?;
        let pe = self.store.get("pos_emb")?;
        let mut x0 = vec![0.0f32; d];
        for (j, x) in x0.iter_mut().enumerate() {
            *x = te.row(token)[j] + pe.row(self.pos)[j];
        }
        let channels = self.channels();
        let mut xs = vec![x0; channels];
        let t_new = self.pos + 1;
        for l in 0..cfg.layers {
            let p = layer_prefix(l);
            let g1 = self.store.get(&format!("{p}.norm1.g"))?;
            let g2 = self.store.get(&format!("{p}.norm2.g"))?;
            let wq = self.store.get(&format!("{p}.attn.wq"))?;
            let wk = self.store.get(&format!("{p}.attn.wk"))?;
            let wv = self.store.get(&format!("{p}.attn.wv"))?;
            let wo = self.store.get(&format!("{p}.attn.wo"))?;
            for (e, x) in xs.iter_mut().enumerate() {
                let mut n1 = vec![0.0f32; d];
                kernels::rmsnorm_row(x, g1.data(), &mut n1);
                let q = kernels::matmul_row(&n1, wq.data(), d, d);
                let krow = kernels::matmul_row(&n1, wk.data(), d, d);
                let vrow = kernels::matmul_row(&n1, wv.data(), d, d);
                let cache = l * channels + e;
                self.k_cache[cache].extend_from_slice(&krow);
                self.v_cache[cache].extend_from_slice(&vrow);
                let kc = &self.k_cache[cache];
                let vc = &self.v_cache[cache];
                let mut concat = vec![0.0f32; d];
                for h in 0..cfg.heads {
                    let qh = &q[h * dh..(h + 1) * dh];
                    let mut scores = Vec::with_capacity(t_new);
                    for t in 0..t_new {
                        scores
                            .push(kernels::dot(qh, &kc[t * d + h * dh..t * d + (h + 1) * dh]) * inv);
                    }
                    kernels::softmax_row(&mut scores);
                    let out = &mut concat[h * dh..(h + 1) * dh];
                    for (t, &pr) in scores.iter().enumerate() {
                        let vh = &vc[t * d + h * dh..t * d + (h + 1) * dh];
                        for (o, &vv) in out.iter_mut().zip(vh) {
                            *o += pr * vv;
                        }
                    }
                }
                let attn = kernels::matmul_row(&concat, wo.data(), d, d);
                for (xv, &a) in x.iter_mut().zip(&attn) {
                    *xv += a;
                }
                let mut n2 = vec![0.0f32; d];
                kernels::rmsnorm_row(x, g2.data(), &mut n2);
                let ffn = match self.arch {
                    Arch::Come => format!("expert.{e}"),
                    _ => "ffn".to_string(),
                };
                let w_up = self.store.get(&format!("{p}.{ffn}.w_up"))?;
                let w_down = self.store.get(&format!("{p}.{ffn}.w_down"))?;
                let mut up = kernels::matmul_row(&n2, w_up.data(), d, cfg.intermediate);
                for u in up.iter_mut() {
                    *u = kernels::silu(*u);
                }
                let down = kernels::matmul_row(&up, w_down.data(), cfg.intermediate, d);
                for (xv, &dn) in x.iter_mut().zip(&down) {
                    *xv += dn;
                }
            }
        }
        let mut flat = Vec::with_capacity(channels * d);
        for x in &xs {
            flat.extend_from_slice(x);
        }
        let (fused, expert) = if self.arch == Arch::Come {
            let wc = self.store.get(ROUTER_PARAM)?;
            let mut weights = kernels::matmul_row(&flat, wc.data(), channels * d, channels);
            kernels::softmax_row(&mut weights);
            let expert = argmax(&weights);
            let mut fused = vec![0.0f32; d];
            for (e, x) in xs.iter().enumerate() {
                for (f, &xv) in fused.iter_mut().zip(x) {
                    *f += weights[e] * xv;
                }
            }
            (fused, expert)
        } else {
            (xs.swap_remove(0), 0)
        };
        let gf = self.store.get("final_norm.g")?;
        let mut normed = vec![0.0f32; d];
        kernels::rmsnorm_row(&fused, gf.data(), &mut normed);
        let head = self.store.get("lm_head.w")?;
        let logits = kernels::matmul_row(&normed, head.data(), d, cfg.vocab_size);
        self.pos += 1;
        Ok(DecodeOut {
            logits,
            expert,
            flat,
        })
    }

    /// Feed a prefix, returning the last position's output.
    pub fn prefill(&mut self, tokens: &[TokenId]) -> Result<DecodeOut> {
        if tokens.is_empty() {
            return Err(Error::InvalidArgument("empty prefill".into()));
        }
        let mut last = None;
        for &t in tokens {
            last = Some(self.step(t)?);
        }
        Ok(last.expect("non-empty"))
    }
}

/// Teacher-forced sequence log-probability of `target` given `context`,
/// summed over target tokens in nats, with no length normalization.
pub fn sequence_logprob(
    store: &ParamStore,
    cfg: &ComeConfig,
    arch: Arch,
    context: &[TokenId],
    target: &[TokenId],
) -> Result<f64> {
    if target.is_empty() {
        return Err(Error::InvalidArgument("empty scoring target".into()));
    }
    let mut dec = Decoder::new(store, cfg, arch)?;
    let mut out = dec.prefill(context)?;
    let mut total = 0.0f64;
    for &t in target {
        if t >= cfg.vocab_size {
            return Err(Error::InvalidArgument(format!("token id {t} out of vocab")));
        }
        total += kernels::log_softmax_at(&out.logits, t);
        out = dec.step(t)?;
    }
    Ok(total)
}

/// Teacher-forced per-position outputs over a full sequence, via the
/// incremental path.
pub fn prefill_outputs(
    store: &ParamStore,
    cfg: &ComeConfig,
    arch: Arch,
    tokens: &[TokenId],
) -> Result<Vec<DecodeOut>> {
    let mut dec = Decoder::new(store, cfg, arch)?;
    tokens.iter().map(|&t| dec.step(t)).collect()
}

pub struct GenOut {
    /// Generated tokens, stop token excluded.
    pub tokens: Vec<TokenId>,
    /// Argmax channel at the position that emitted each token.
    pub experts: Vec<usize>,
    /// Whether generation ended by emitting the stop token.
    pub stopped: bool,
}

/// Autoregressive decoding. Temperature 0 is greedy (argmax with
/// lowest-index tie-break); positive temperatures sample from
/// `softmax(logits / temperature)` with a stream derived from `seed`.
pub fn generate(
    store: &ParamStore,
    cfg: &ComeConfig,
    arch: Arch,
    prefix: &[TokenId],
    temperature: f32,
    seed: u64,
    max_new: usize,
    stop: TokenId,
) -> Result<GenOut> {
    if temperature < 0.0 {
        return Err(Error::InvalidArgument("negative temperature".into()));
    }
    let mut dec = Decoder::new(store, cfg, arch)?;
    let mut out = dec.prefill(prefix)?;
    let mut rng = Rng::new(seed).fork(0x9e4);
    let mut tokens = Vec::new();
    let mut experts = Vec::new();
    let mut stopped = false;
    for _ in 0..max_new {
        if dec.pos() >= cfg.max_seq {
            break;
        }
        let next = if temperature == 0.0 {
            argmax(&out.logits)
        } else {
            let mut probs: Vec<f32> = out.logits.iter().map(|&l| l / temperature).collect();
            kernels::softmax_row(&mut probs);
            rng.categorical(&probs)
        };
        if next == stop {
            stopped = true;
            break;
        }
        tokens.push(next);
        experts.push(out.expert);
        out = dec.step(next)?;
    }
    Ok(GenOut {
        tokens,
        experts,
        stopped,
    })
}
