//! Forward pass expressed on the autodiff graph.
//!
//! The same builder serves the float model, fake quantization, statistics
//! collection and calibration; they differ only in the [`QuantHook`] that
//! sees every activation tap and every linear weight.

use super::config::{Activation, ModelConfig};
use super::qconfig::{QConfig, QuantParams};
use super::taps::{Linear, LinearKind, Tap, TapKind};
use super::weights::{Block, Model};
use crate::error::{Error, Result};
use crate::numeric::{Graph, Tensor, Var};
use crate::quant;

pub trait QuantHook {
    /// Called with every tapped activation; returns its replacement.
    fn act(&mut self, g: &mut Graph, tap: Tap, x: Var) -> Result<Var>;

    /// Called with every linear weight before it is used.
    fn weight(&mut self, g: &mut Graph, lin: Linear, w: Var) -> Result<Var>;
}

/// Leaves everything in float.
pub struct NoQuant;

impl QuantHook for NoQuant {
    fn act(&mut self, _: &mut Graph, _: Tap, x: Var) -> Result<Var> {
        Ok(x)
    }

    fn weight(&mut self, _: &mut Graph, _: Linear, w: Var) -> Result<Var> {
        Ok(w)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BlockVars {
    pub attn_norm: Var,
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
    pub mlp_norm: Var,
    pub w_gate: Var,
    pub w_up: Var,
    pub w_down: Var,
}

impl BlockVars {
    pub fn constants(g: &mut Graph, b: &Block) -> Self {
        Self {
            attn_norm: g.constant(b.attn_norm.clone()),
            wq: g.constant(b.wq.clone()),
            wk: g.constant(b.wk.clone()),
            wv: g.constant(b.wv.clone()),
            wo: g.constant(b.wo.clone()),
            mlp_norm: g.constant(b.mlp_norm.clone()),
            w_gate: g.constant(b.w_gate.clone()),
            w_up: g.constant(b.w_up.clone()),
            w_down: g.constant(b.w_down.clone()),
        }
    }

    fn linear(&self, kind: LinearKind) -> Var {
        match kind {
            LinearKind::Q => self.wq,
            LinearKind::K => self.wk,
            LinearKind::V => self.wv,
            LinearKind::O => self.wo,
            LinearKind::Gate => self.w_gate,
            LinearKind::Up => self.w_up,
            LinearKind::Down => self.w_down,
            LinearKind::Head => unreachable!("head is not a block weight"),
        }
    }
}

#[derive(Clone, Debug)]
pub struct ModelVars {
    pub embed: Var,
    pub blocks: Vec<BlockVars>,
    pub final_norm: Var,
    pub head: Var,
}

impl ModelVars {
    pub fn constants(g: &mut Graph, m: &Model) -> Self {
        let embed = g.constant(m.embed.clone());
        let blocks = m.blocks.iter().map(|b| BlockVars::constants(g, b)).collect();
        let final_norm = g.constant(m.final_norm.clone());
        let head = g.constant(m.head_weight());
        Self {
            embed,
            blocks,
            final_norm,
            head,
        }
    }
}

fn check_shape(cfg: &ModelConfig, tokens: &[u32], batch: usize) -> Result<usize> {
    if batch == 0 || tokens.is_empty() || tokens.len() % batch != 0 {
        return Err(Error::shape(
            "forward",
            format!("{} tokens for batch {batch}", tokens.len()),
        ));
    }
    let seq = tokens.len() / batch;
    if seq > cfg.max_seq {
        return Err(Error::Config(format!(
            "sequence length {seq} exceeds maximum {}",
            cfg.max_seq
        )));
    }
    Ok(seq)
}

fn linear(
    g: &mut Graph,
    hook: &mut dyn QuantHook,
    block: Option<usize>,
    kind: LinearKind,
    x: Var,
    w: Var,
) -> Result<Var> {
    let w = hook.weight(g, Linear { block, kind }, w)?;
    g.matmul(x, w)
}

/// One transformer block on the residual stream `x: [batch*seq, d]`.
#[allow(clippy::too_many_arguments)]
pub fn block_forward(
    g: &mut Graph,
    cfg: &ModelConfig,
    bv: &BlockVars,
    bi: usize,
    x: Var,
    seq: usize,
    hook: &mut dyn QuantHook,
) -> Result<Var> {
    let tap = |k| Tap::block(bi, k);
    let b = Some(bi);
    let heads = cfg.n_heads;

    let x = hook.act(g, tap(TapKind::AttnNormIn), x)?;
    let n = g.rmsnorm(x, bv.attn_norm, cfg.norm_eps)?;
    let n = hook.act(g, tap(TapKind::QkvIn), n)?;
    let q = linear(g, hook, b, LinearKind::Q, n, bv.linear(LinearKind::Q))?;
    let q = hook.act(g, tap(TapKind::QOut), q)?;
    let k = linear(g, hook, b, LinearKind::K, n, bv.linear(LinearKind::K))?;
    let k = hook.act(g, tap(TapKind::KOut), k)?;
    let v = linear(g, hook, b, LinearKind::V, n, bv.linear(LinearKind::V))?;
    let v = hook.act(g, tap(TapKind::VOut), v)?;

    let qh = g.split_heads(q, seq, heads)?;
    let kh = g.split_heads(k, seq, heads)?;
    let vh = g.split_heads(v, seq, heads)?;
    let qr = g.rope(qh, 0, cfg.rope_base)?;
    let qr = hook.act(g, tap(TapKind::QRope), qr)?;
    let kr = g.rope(kh, 0, cfg.rope_base)?;
    let kr = hook.act(g, tap(TapKind::KRope), kr)?;
    let s = g.batch_matmul(qr, kr, true)?;
    let s = g.scale(s, 1.0 / (cfg.head_dim() as f64).sqrt());
    let s = g.causal_zero(s)?;
    let s = hook.act(g, tap(TapKind::Scores), s)?;
    let p = g.causal_softmax(s)?;
    let p = hook.act(g, tap(TapKind::Probs), p)?;
    let o = g.batch_matmul(p, vh, false)?;
    let o = g.merge_heads(o, heads)?;
    let o = hook.act(g, tap(TapKind::OIn), o)?;
    let a = linear(g, hook, b, LinearKind::O, o, bv.linear(LinearKind::O))?;
    let a = hook.act(g, tap(TapKind::OOut), a)?;
    let h = g.add(x, a)?;

    let h = hook.act(g, tap(TapKind::MlpNormIn), h)?;
    let n = g.rmsnorm(h, bv.mlp_norm, cfg.norm_eps)?;
    let n = hook.act(g, tap(TapKind::GateUpIn), n)?;
    let gt = linear(g, hook, b, LinearKind::Gate, n, bv.linear(LinearKind::Gate))?;
    let gt = hook.act(g, tap(TapKind::GateOut), gt)?;
    let up = linear(g, hook, b, LinearKind::Up, n, bv.linear(LinearKind::Up))?;
    let up = hook.act(g, tap(TapKind::UpOut), up)?;
    let act = match cfg.activation {
        Activation::Silu => g.silu(gt),
        Activation::Gelu => g.gelu(gt),
    };
    let act = hook.act(g, tap(TapKind::ActOut), act)?;
    let m = g.mul(act, up)?;
    let m = hook.act(g, tap(TapKind::DownIn), m)?;
    let d = linear(g, hook, b, LinearKind::Down, m, bv.linear(LinearKind::Down))?;
    let d = hook.act(g, tap(TapKind::DownOut), d)?;
    g.add(h, d)
}

/// Final norm up to and including the head-input tap.
pub fn final_hidden(
    g: &mut Graph,
    cfg: &ModelConfig,
    vars: &ModelVars,
    h: Var,
    hook: &mut dyn QuantHook,
) -> Result<Var> {
    let h = hook.act(g, Tap::last(TapKind::FinalNormIn), h)?;
    let n = g.rmsnorm(h, vars.final_norm, cfg.norm_eps)?;
    hook.act(g, Tap::last(TapKind::HeadIn), n)
}

pub fn head_logits(
    g: &mut Graph,
    vars: &ModelVars,
    hidden: Var,
    hook: &mut dyn QuantHook,
) -> Result<Var> {
    let l = linear(g, hook, None, LinearKind::Head, hidden, vars.head)?;
    hook.act(g, Tap::last(TapKind::Logits), l)
}

/// Full forward pass over `batch` equal-length sequences laid out
/// contiguously in `tokens`. Returns logits `[batch*seq, vocab]`.
pub fn forward_graph(
    g: &mut Graph,
    cfg: &ModelConfig,
    vars: &ModelVars,
    tokens: &[u32],
    batch: usize,
    hook: &mut dyn QuantHook,
) -> Result<Var> {
    let seq = check_shape(cfg, tokens, batch)?;
    let mut h = g.embedding(vars.embed, tokens)?;
    for (i, bv) in vars.blocks.iter().enumerate() {
        h = block_forward(g, cfg, bv, i, h, seq, hook)?;
    }
    let n = final_hidden(g, cfg, vars, h, hook)?;
    head_logits(g, vars, n, hook)
}

pub fn forward_float(model: &Model, tokens: &[u32], batch: usize) -> Result<Tensor> {
    model.check_tokens(tokens)?;
    let mut g = Graph::new();
    let vars = ModelVars::constants(&mut g, model);
    let out = forward_graph(&mut g, &model.config, &vars, tokens, batch, &mut NoQuant)?;
    Ok(g.value(out).clone())
}

/// Fake quantization with fixed parameters: activations use the snapped
/// ranges, weights are clipped and quantized ahead of time.
pub struct FakeQuantHook<'a> {
    qconfig: &'a QConfig,
    params: QuantParams,
}

impl<'a> FakeQuantHook<'a> {
    pub fn new(qconfig: &'a QConfig, params: &QuantParams) -> Self {
        Self {
            qconfig,
            params: params.snapped(),
        }
    }
}

impl QuantHook for FakeQuantHook<'_> {
    fn act(&mut self, g: &mut Graph, tap: Tap, x: Var) -> Result<Var> {
        let rp = self.params.range(tap)?;
        let qmax = quant::qmax(self.qconfig.act_bits(tap)) as f64;
        let (a, b) = rp.tensors(&[1]);
        let a = g.constant(a);
        let b = g.constant(b);
        g.fake_quant(x, a, b, qmax)
    }

    fn weight(&mut self, g: &mut Graph, lin: Linear, w: Var) -> Result<Var> {
        let fq = fake_quant_weight(g.value(w), self.qconfig, &self.params, lin)?;
        Ok(g.constant(fq))
    }
}

/// Clipped, snapped fake quantization of one weight, exactly as exported.
pub fn fake_quant_weight(w: &Tensor, qconfig: &QConfig, params: &QuantParams, lin: Linear) -> Result<Tensor> {
    let scheme = qconfig.weight(lin);
    let (wc, rp) = quant::clip_weights(w, params.clip(lin)?, &scheme)?;
    quant::fake_quant(&wc, &rp.snapped(), &scheme)
}

/// Fake-quant forward of an already fused model.
pub fn forward_fakequant(
    model: &Model,
    tokens: &[u32],
    batch: usize,
    qconfig: &QConfig,
    params: &QuantParams,
) -> Result<Tensor> {
    model.check_tokens(tokens)?;
    let mut g = Graph::new();
    let vars = ModelVars::constants(&mut g, model);
    let mut hook = FakeQuantHook::new(qconfig, params);
    let out = forward_graph(&mut g, &model.config, &vars, tokens, batch, &mut hook)?;
    Ok(g.value(out).clone())
}

/// Summed next-token negative log-likelihood over rows of `logits` whose
/// target is given; `targets[i] = None` skips row `i`.
pub fn nll_sum(logits: &Tensor, targets: &[Option<u32>]) -> Result<(f64, usize)> {
    let v = logits.last_dim();
    if logits.rows() != targets.len() {
        return Err(Error::shape("nll", format!("{} rows, {} targets", logits.rows(), targets.len())));
    }
    let mut total = 0.0;
    let mut n = 0;
    for (r, t) in targets.iter().enumerate() {
        let Some(t) = *t else { continue };
        if t as usize >= v {
            return Err(Error::Token { id: t, vocab: v });
        }
        let row = logits.row(r);
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
        total += lse - row[t as usize];
        n += 1;
    }
    Ok((total, n))
}

/// Perplexity over non-overlapping windows of `window` inputs. Window `c`
/// reads tokens `[c*w, c*w + w)` and predicts `[c*w + 1, c*w + w]`, so every
/// token after the first is predicted exactly once. Full windows are run
/// `batch` at a time through `logits_fn(tokens, batch)`.
pub fn perplexity_with(
    tokens: &[u32],
    window: usize,
    batch: usize,
    mut logits_fn: impl FnMut(&[u32], usize) -> Result<Tensor>,
) -> Result<f64> {
    if tokens.len() < 2 {
        return Err(Error::Config("perplexity needs at least 2 tokens".into()));
    }
    if window == 0 || batch == 0 {
        return Err(Error::Config("window and batch must be positive".into()));
    }
    let preds = tokens.len() - 1;
    let full = preds / window;
    let mut total = 0.0;
    let mut count = 0;
    let mut c = 0;
    while c < full {
        let nb = batch.min(full - c);
        let mut inp = Vec::with_capacity(nb * window);
        let mut tg = Vec::with_capacity(nb * window);
        for j in 0..nb {
            let s = (c + j) * window;
            inp.extend_from_slice(&tokens[s..s + window]);
            tg.extend(tokens[s + 1..s + window + 1].iter().map(|&t| Some(t)));
        }
        let logits = logits_fn(&inp, nb)?;
        let (s, n) = nll_sum(&logits, &tg)?;
        total += s;
        count += n;
        c += nb;
    }
    let rest = preds - full * window;
    if rest > 0 {
        let s = full * window;
        let logits = logits_fn(&tokens[s..s + rest], 1)?;
        let tg: Vec<_> = tokens[s + 1..].iter().map(|&t| Some(t)).collect();
        let (a, n) = nll_sum(&logits, &tg)?;
        total += a;
        count += n;
    }
    let ppl = (total / count as f64).exp();
    if !ppl.is_finite() {
        return Err(Error::NonFinite(format!("perplexity {ppl}")));
    }
    Ok(ppl)
}

pub const EVAL_WINDOW: usize = 64;
const EVAL_BATCH: usize = 16;

pub fn perplexity_float(model: &Model, tokens: &[u32]) -> Result<f64> {
    perplexity_with(tokens, EVAL_WINDOW, EVAL_BATCH, |t, b| forward_float(model, t, b))
}

pub fn perplexity_fakequant(
    model: &Model,
    tokens: &[u32],
    qconfig: &QConfig,
    params: &QuantParams,
) -> Result<f64> {
    // Quantize weights once rather than per window batch.
    let prepared = prequantize_weights(model, qconfig, params)?;
    let act_only = ActOnly(FakeQuantHook::new(qconfig, params));
    let mut hook = act_only;
    perplexity_with(tokens, EVAL_WINDOW, EVAL_BATCH, |t, b| {
        prepared.check_tokens(t)?;
        let mut g = Graph::new();
        let vars = ModelVars::constants(&mut g, &prepared);
        let out = forward_graph(&mut g, &prepared.config, &vars, t, b, &mut hook)?;
        Ok(g.value(out).clone())
    })
}

struct ActOnly<'a>(FakeQuantHook<'a>);

impl QuantHook for ActOnly<'_> {
    fn act(&mut self, g: &mut Graph, tap: Tap, x: Var) -> Result<Var> {
        self.0.act(g, tap, x)
    }

    fn weight(&mut self, _: &mut Graph, _: Linear, w: Var) -> Result<Var> {
        Ok(w)
    }
}

/// A copy of `model` whose linear weights are replaced by their fake-quant
/// values. The head is untied in the copy.
pub fn prequantize_weights(model: &Model, qconfig: &QConfig, params: &QuantParams) -> Result<Model> {
    let mut m = model.clone();
    for (bi, b) in m.blocks.iter_mut().enumerate() {
        for kind in LinearKind::BLOCK {
            let lin = Linear { block: Some(bi), kind };
            let w = b.get_mut(kind.field()).expect("block field");
            *w = fake_quant_weight(w, qconfig, params, lin)?;
        }
    }
    let head = Linear { block: None, kind: LinearKind::Head };
    m.head = Some(fake_quant_weight(&model.head_weight(), qconfig, params, head)?);
    m.config.tied_head = false;
    Ok(m)
}

/// Index of the largest entry; the first one wins ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Greedy decoding under fake quantization. Every step recomputes the
/// whole prefix.
pub fn generate_greedy_fakequant(
    model: &Model,
    qconfig: &QConfig,
    params: &QuantParams,
    prompt: &[u32],
    n: usize,
) -> Result<Vec<u32>> {
    let prepared = prequantize_weights(model, qconfig, params)?;
    let mut hook = ActOnly(FakeQuantHook::new(qconfig, params));
    let mut seq = prompt.to_vec();
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        prepared.check_tokens(&seq)?;
        let mut g = Graph::new();
        let vars = ModelVars::constants(&mut g, &prepared);
        let logits = forward_graph(&mut g, &prepared.config, &vars, &seq, 1, &mut hook)?;
        let v = g.value(logits);
        let t = argmax(v.row(v.rows() - 1)) as u32;
        out.push(t);
        seq.push(t);
    }
    Ok(out)
}
