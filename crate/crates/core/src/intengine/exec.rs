use std::collections::BTreeMap;

use serde::Serialize;

use super::compile::{ActQuant, QBlock, QLinear, QuantizedModel};
use super::requant::apply_sum;
use crate::error::{Error, Result};
use crate::model::{argmax, perplexity_with, Activation, Tap, TapKind, EVAL_WINDOW};
use crate::numeric::kernels::{gelu, rmsnorm_row, rope_angles, rope_apply, silu, softmax_row};
use crate::numeric::Tensor;

/// Where a computation happens. The first four are integer-only.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Region {
    Linear,
    Attention,
    Residual,
    Gating,
    Norm,
    Rope,
    Softmax,
    Activation,
    Logits,
}

impl Region {
    pub const ALL: [Region; 9] = [
        Region::Linear,
        Region::Attention,
        Region::Residual,
        Region::Gating,
        Region::Norm,
        Region::Rope,
        Region::Softmax,
        Region::Activation,
        Region::Logits,
    ];

    pub fn is_integer(self) -> bool {
        matches!(self, Region::Linear | Region::Attention | Region::Residual | Region::Gating)
    }
}

/// Float values computed per region. Only the island helpers below touch
/// floats, and each one records what it produced.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct Instrument {
    pub float_ops: BTreeMap<Region, u64>,
}

impl Instrument {
    fn add(&mut self, r: Region, n: usize) {
        *self.float_ops.entry(r).or_insert(0) += n as u64;
    }

    pub fn get(&self, r: Region) -> u64 {
        self.float_ops.get(&r).copied().unwrap_or(0)
    }

    pub fn integer_paths_clean(&self) -> bool {
        Region::ALL.iter().filter(|r| r.is_integer()).all(|&r| self.get(r) == 0)
    }
}

fn dequant_row(codes: &[i32], a: &ActQuant, out: &mut [f64]) {
    for (o, &c) in out.iter_mut().zip(codes) {
        *o = a.dequantize(c);
    }
}

fn quant_row(x: &[f64], a: &ActQuant, out: &mut [i32]) {
    for (o, &v) in out.iter_mut().zip(x) {
        *o = a.quantize(v);
    }
}

/// Integer linear layer on row-major input codes `[rows, k]`.
///
/// `y = clamp(requant(sum (x - z_x)(w - z_w) + bias) + z_y, 0, qmax)`.
pub fn int_linear(x: &[i32], x_act: &ActQuant, layer: &QLinear, y_act: &ActQuant) -> Result<Vec<i32>> {
    int_linear_centered(x, x_act, layer, &layer.centered(), y_act)
}

fn int_linear_centered(
    x: &[i32],
    x_act: &ActQuant,
    layer: &QLinear,
    w: &[i32],
    y_act: &ActQuant,
) -> Result<Vec<i32>> {
    let (k, n) = (layer.k, layer.n);
    if x.len() % k != 0 || w.len() != k * n {
        return Err(Error::shape("int_linear", format!("{} inputs for {k}x{n} layer {}", x.len(), layer.name)));
    }
    let rows = x.len() / k;
    let mut out = vec![0i32; rows * n];
    let mut acc = vec![0i64; n];
    for r in 0..rows {
        for (a, &b) in acc.iter_mut().zip(&layer.bias) {
            *a = b as i64;
        }
        for (i, &xc) in x[r * k..(r + 1) * k].iter().enumerate() {
            let xi = (xc - x_act.zero) as i64;
            if xi == 0 {
                continue;
            }
            for (a, &wv) in acc.iter_mut().zip(&w[i * n..(i + 1) * n]) {
                *a += xi * wv as i64;
            }
        }
        for (j, &a) in acc.iter().enumerate() {
            check_acc(a, &layer.name)?;
            out[r * n + j] = y_act.clamp(layer.requant[layer.group(j)].apply(a));
        }
    }
    Ok(out)
}

#[inline]
fn check_acc(a: i64, what: &str) -> Result<()> {
    if a >= 1 << 31 || a < -(1 << 31) {
        return Err(Error::Overflow(format!("{what}: accumulator {a}")));
    }
    Ok(())
}

struct Prepared {
    /// Centered weights per block, in `QBlock::linears` order.
    blocks: Vec<[Vec<i32>; 7]>,
    head: Vec<i32>,
}

impl Prepared {
    fn new(q: &QuantizedModel) -> Self {
        Self {
            blocks: q.blocks.iter().map(|b| b.linears().map(|l| l.centered())).collect(),
            head: q.head.centered(),
        }
    }
}

#[derive(Default)]
struct LayerCache {
    /// Rotated key codes, `[pos, d]`.
    k: Vec<i32>,
    /// Value codes, `[pos, d]`.
    v: Vec<i32>,
}

/// Logits for the rows processed, plus the code trace when requested.
#[derive(Clone, Debug)]
pub struct IntOutput {
    pub logits: Tensor,
    pub trace: Option<BTreeMap<String, Vec<i32>>>,
}

/// Incremental execution of one sequence with a key/value cache. Prompt
/// encoding is one `step` over the prompt; generation steps one token at
/// a time.
pub struct Session<'a> {
    q: &'a QuantizedModel,
    prep: Prepared,
    pos: usize,
    cache: Vec<LayerCache>,
    trace: Option<BTreeMap<String, Vec<i32>>>,
    pub instrument: Instrument,
}

impl<'a> Session<'a> {
    pub fn new(q: &'a QuantizedModel) -> Self {
        Self {
            q,
            prep: Prepared::new(q),
            pos: 0,
            cache: (0..q.blocks.len()).map(|_| LayerCache::default()).collect(),
            trace: None,
            instrument: Instrument::default(),
        }
    }

    /// Records every activation code by tap name from now on.
    pub fn with_trace(mut self) -> Self {
        self.trace = Some(BTreeMap::new());
        self
    }

    pub fn position(&self) -> usize {
        self.pos
    }

    pub fn take_trace(&mut self) -> Option<BTreeMap<String, Vec<i32>>> {
        self.trace.as_mut().map(std::mem::take)
    }

    fn record(&mut self, tap: Tap, codes: &[i32]) {
        if let Some(t) = self.trace.as_mut() {
            t.entry(tap.name()).or_default().extend_from_slice(codes);
        }
    }

    /// Runs `tokens` at the next positions and returns their logits
    /// `[tokens.len(), vocab]`.
    pub fn step(&mut self, tokens: &[u32]) -> Result<Tensor> {
        let cfg = &self.q.config;
        if tokens.is_empty() {
            return Err(Error::Config("empty step".into()));
        }
        if let Some(&id) = tokens.iter().find(|&&t| t as usize >= cfg.vocab) {
            return Err(Error::Token { id, vocab: cfg.vocab });
        }
        if self.pos + tokens.len() > cfg.max_seq {
            return Err(Error::Config(format!(
                "sequence length {} exceeds maximum {}",
                self.pos + tokens.len(),
                cfg.max_seq
            )));
        }
        let d = cfg.d_model;
        let mut x = Vec::with_capacity(tokens.len() * d);
        for &t in tokens {
            let t = t as usize;
            x.extend(self.q.embed[t * d..(t + 1) * d].iter().map(|&c| c as i32));
        }
        self.record(Tap::block(0, TapKind::AttnNormIn), &x);
        for bi in 0..self.q.blocks.len() {
            x = self.block(bi, x)?;
            let tap = self.q.block_out_tap(bi);
            self.record(tap, &x);
        }
        let logits = self.head(&x)?;
        self.pos += tokens.len();
        Ok(logits)
    }

    fn norm(&mut self, x: &[i32], w: &[f64], from: Tap, to: Tap) -> Vec<i32> {
        let q = self.q;
        let (a_in, a_out) = (*q.act(from), *q.act(to));
        let d = w.len();
        let mut row = vec![0.0; d];
        let mut out_f = vec![0.0; d];
        let mut out = vec![0i32; x.len()];
        for (xr, yr) in x.chunks(d).zip(out.chunks_mut(d)) {
            dequant_row(xr, &a_in, &mut row);
            rmsnorm_row(&row, w, q.config.norm_eps, &mut out_f);
            quant_row(&out_f, &a_out, yr);
        }
        self.instrument.add(Region::Norm, 3 * x.len());
        self.record(to, &out);
        out
    }

    fn linear(&mut self, bi: usize, li: usize, layer: &QLinear, x: &[i32], from: Tap, to: Tap) -> Result<Vec<i32>> {
        let q = self.q;
        let y = int_linear_centered(x, q.act(from), layer, &self.prep.blocks[bi][li], q.act(to))?;
        self.record(to, &y);
        Ok(y)
    }

    /// Rotary embedding of `[rows, d]` codes at positions `pos..`.
    fn rope(&mut self, x: &[i32], from: Tap, to: Tap) -> Vec<i32> {
        let q = self.q;
        let cfg = &q.config;
        let (a_in, a_out) = (*q.act(from), *q.act(to));
        let (d, hd) = (cfg.d_model, cfg.head_dim());
        let mut buf = vec![0.0; hd];
        let mut out = vec![0i32; x.len()];
        for (t, (xr, yr)) in x.chunks(d).zip(out.chunks_mut(d)).enumerate() {
            let angles = rope_angles(self.pos + t, hd, cfg.rope_base);
            for h in 0..cfg.n_heads {
                dequant_row(&xr[h * hd..(h + 1) * hd], &a_in, &mut buf);
                rope_apply(&mut buf, &angles);
                quant_row(&buf, &a_out, &mut yr[h * hd..(h + 1) * hd]);
            }
        }
        self.instrument.add(Region::Rope, 4 * x.len());
        self.record(to, &out);
        out
    }

    fn attention(&mut self, bi: usize, qr: &[i32]) -> Result<Vec<i32>> {
        let q = self.q;
        let cfg = &q.config;
        let b: &QBlock = &q.blocks[bi];
        let t = |k| *q.act(Tap::block(bi, k));
        let (aq, ak, av, a_s, ap, ao) = (
            t(TapKind::QRope),
            t(TapKind::KRope),
            t(TapKind::VOut),
            t(TapKind::Scores),
            t(TapKind::Probs),
            t(TapKind::OIn),
        );
        let (d, hd, heads) = (cfg.d_model, cfg.head_dim(), cfg.n_heads);
        let rows = qr.len() / d;
        let cache = &self.cache[bi];
        let mut out = vec![0i32; rows * d];
        let mut s_codes = Vec::new();
        let mut p_codes = Vec::new();
        let mut sf = Vec::new();
        let mut acc = vec![0i64; hd];
        let mut n_float = 0;
        for r in 0..rows {
            let len = self.pos + r + 1;
            for h in 0..heads {
                let qv = &qr[r * d + h * hd..r * d + (h + 1) * hd];
                let mut sc = Vec::with_capacity(len);
                for j in 0..len {
                    let kv = &cache.k[j * d + h * hd..j * d + (h + 1) * hd];
                    let mut a = 0i64;
                    for (&x, &y) in qv.iter().zip(kv) {
                        a += (x - aq.zero) as i64 * (y - ak.zero) as i64;
                    }
                    check_acc(a, "attention scores")?;
                    sc.push(a_s.clamp(b.score.apply(a)));
                }
                // Softmax island over the visible keys.
                sf.resize(len, 0.0);
                dequant_row(&sc, &a_s, &mut sf);
                softmax_row(&mut sf, len);
                let mut pc = vec![0i32; len];
                quant_row(&sf, &ap, &mut pc);
                n_float += 4 * len;

                acc.iter_mut().for_each(|a| *a = 0);
                for (j, &p) in pc.iter().enumerate() {
                    let pj = (p - ap.zero) as i64;
                    if pj == 0 {
                        continue;
                    }
                    let vv = &cache.v[j * d + h * hd..j * d + (h + 1) * hd];
                    for (a, &v) in acc.iter_mut().zip(vv) {
                        *a += pj * (v - av.zero) as i64;
                    }
                }
                for (i, &a) in acc.iter().enumerate() {
                    check_acc(a, "attention values")?;
                    out[r * d + h * hd + i] = ao.clamp(b.pv.apply(a));
                }
                s_codes.extend_from_slice(&sc);
                p_codes.extend_from_slice(&pc);
            }
        }
        self.instrument.add(Region::Softmax, n_float);
        self.record(Tap::block(bi, TapKind::Scores), &s_codes);
        self.record(Tap::block(bi, TapKind::Probs), &p_codes);
        self.record(Tap::block(bi, TapKind::OIn), &out);
        Ok(out)
    }

    fn residual(&mut self, x: &[i32], xa: &ActQuant, y: &[i32], ya: &ActQuant, r: &[super::FixedPointRequant; 2], to: Tap) -> Vec<i32> {
        let oa = *self.q.act(to);
        let out: Vec<i32> = x
            .iter()
            .zip(y)
            .map(|(&a, &b)| oa.clamp(apply_sum((a - xa.zero) as i64, r[0], (b - ya.zero) as i64, r[1])))
            .collect();
        self.record(to, &out);
        out
    }

    fn block(&mut self, bi: usize, x: Vec<i32>) -> Result<Vec<i32>> {
        let q = self.q;
        let b = &q.blocks[bi];
        let tap = |k| Tap::block(bi, k);
        let a = |k| *q.act(Tap::block(bi, k));

        let n = self.norm(&x, &b.attn_norm, tap(TapKind::AttnNormIn), tap(TapKind::QkvIn));
        let qo = self.linear(bi, 0, &b.wq, &n, tap(TapKind::QkvIn), tap(TapKind::QOut))?;
        let ko = self.linear(bi, 1, &b.wk, &n, tap(TapKind::QkvIn), tap(TapKind::KOut))?;
        let vo = self.linear(bi, 2, &b.wv, &n, tap(TapKind::QkvIn), tap(TapKind::VOut))?;
        let qr = self.rope(&qo, tap(TapKind::QOut), tap(TapKind::QRope));
        let kr = self.rope(&ko, tap(TapKind::KOut), tap(TapKind::KRope));
        self.cache[bi].k.extend_from_slice(&kr);
        self.cache[bi].v.extend_from_slice(&vo);
        let o = self.attention(bi, &qr)?;
        let ao = self.linear(bi, 3, &b.wo, &o, tap(TapKind::OIn), tap(TapKind::OOut))?;
        let h = self.residual(&x, &a(TapKind::AttnNormIn), &ao, &a(TapKind::OOut), &b.attn_residual, tap(TapKind::MlpNormIn));

        let n = self.norm(&h, &b.mlp_norm, tap(TapKind::MlpNormIn), tap(TapKind::GateUpIn));
        let g = self.linear(bi, 4, &b.w_gate, &n, tap(TapKind::GateUpIn), tap(TapKind::GateOut))?;
        let u = self.linear(bi, 5, &b.w_up, &n, tap(TapKind::GateUpIn), tap(TapKind::UpOut))?;

        let (ga, aa) = (a(TapKind::GateOut), a(TapKind::ActOut));
        let f: fn(f64) -> f64 = match q.config.activation {
            Activation::Silu => silu,
            Activation::Gelu => gelu,
        };
        let act: Vec<i32> = g.iter().map(|&c| aa.quantize(f(ga.dequantize(c)))).collect();
        self.instrument.add(Region::Activation, 3 * g.len());
        self.record(tap(TapKind::ActOut), &act);

        let (ua, da) = (a(TapKind::UpOut), a(TapKind::DownIn));
        let m: Vec<i32> = act
            .iter()
            .zip(&u)
            .map(|(&x, &y)| da.clamp(b.gate_mul.apply((x - aa.zero) as i64 * (y - ua.zero) as i64)))
            .collect();
        self.record(tap(TapKind::DownIn), &m);

        let dn = self.linear(bi, 6, &b.w_down, &m, tap(TapKind::DownIn), tap(TapKind::DownOut))?;
        let out_tap = q.block_out_tap(bi);
        let oa = *q.act(out_tap);
        let out: Vec<i32> = h
            .iter()
            .zip(&dn)
            .map(|(&x, &y)| {
                let (ma, dna) = (a(TapKind::MlpNormIn), a(TapKind::DownOut));
                oa.clamp(apply_sum((x - ma.zero) as i64, b.mlp_residual[0], (y - dna.zero) as i64, b.mlp_residual[1]))
            })
            .collect();
        Ok(out)
    }

    fn head(&mut self, x: &[i32]) -> Result<Tensor> {
        let q = self.q;
        let n = self.norm(x, &q.final_norm, Tap::last(TapKind::FinalNormIn), Tap::last(TapKind::HeadIn));
        let (hin, lo) = (Tap::last(TapKind::HeadIn), Tap::last(TapKind::Logits));
        let codes = int_linear_centered(&n, q.act(hin), &q.head, &self.prep.head, q.act(lo))?;
        self.record(lo, &codes);
        let la = *q.act(lo);
        let mut logits = vec![0.0; codes.len()];
        dequant_row(&codes, &la, &mut logits);
        self.instrument.add(Region::Logits, codes.len());
        let v = q.config.vocab;
        Tensor::new(&[codes.len() / v, v], logits)
    }
}

/// Integer forward of `batch` equal-length sequences laid out
/// contiguously; logits are `[batch*seq, vocab]`.
pub fn int_forward(q: &QuantizedModel, tokens: &[u32], batch: usize, trace: bool) -> Result<IntOutput> {
    if batch == 0 || tokens.is_empty() || tokens.len() % batch != 0 {
        return Err(Error::shape("int_forward", format!("{} tokens for batch {batch}", tokens.len())));
    }
    let seq = tokens.len() / batch;
    let mut data = Vec::with_capacity(tokens.len() * q.config.vocab);
    let mut traces: Option<BTreeMap<String, Vec<i32>>> = trace.then(BTreeMap::new);
    for s in tokens.chunks(seq) {
        let mut run = Session::new(q);
        if trace {
            run = run.with_trace();
        }
        data.extend(run.step(s)?.into_data());
        if let (Some(all), Some(t)) = (traces.as_mut(), run.take_trace()) {
            for (k, v) in t {
                all.entry(k).or_default().extend(v);
            }
        }
    }
    Ok(IntOutput {
        logits: Tensor::new(&[tokens.len(), q.config.vocab], data)?,
        trace: traces,
    })
}

/// Perplexity on the same windows as the float and fake-quant paths.
pub fn perplexity_int(q: &QuantizedModel, tokens: &[u32]) -> Result<f64> {
    perplexity_with(tokens, EVAL_WINDOW, 16, |t, b| Ok(int_forward(q, t, b, false)?.logits))
}

/// Greedy decoding with the key/value cache: one prompt step, then one
/// step per generated token.
pub fn generate_greedy(q: &QuantizedModel, prompt: &[u32], n: usize) -> Result<Vec<u32>> {
    let mut run = Session::new(q);
    let mut logits = run.step(prompt)?;
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let t = argmax(logits.row(logits.rows() - 1)) as u32;
        out.push(t);
        if i + 1 < n {
            logits = run.step(&[t])?;
        }
    }
    Ok(out)
}
