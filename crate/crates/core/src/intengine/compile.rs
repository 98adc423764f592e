use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::requant::FixedPointRequant;
use crate::calibrate::Calibrated;
use crate::error::{Error, Result};
use crate::model::{tap_list, Linear, LinearKind, Model, ModelConfig, QConfig, QuantParams, SchemeName, Tap, TapKind};
use crate::numeric::Tensor;
use crate::quant::{self, Granularity};

/// Static quantization of one activation tap: `x = (code - zero) * alpha`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActQuant {
    pub bits: u32,
    pub alpha: f64,
    pub zero: i32,
}

impl ActQuant {
    pub fn qmax(&self) -> i32 {
        quant::qmax(self.bits) as i32
    }

    /// Largest `|code - zero|` over valid codes.
    pub fn max_dev(&self) -> i64 {
        (self.zero as i64).max(self.qmax() as i64 - self.zero as i64)
    }

    #[inline]
    pub fn dequantize(&self, c: i32) -> f64 {
        (c - self.zero) as f64 * self.alpha
    }

    #[inline]
    pub fn quantize(&self, x: f64) -> i32 {
        quant::code(x, self.alpha, -(self.zero as f64), self.qmax() as f64) as i32
    }

    #[inline]
    pub fn clamp(&self, v: i64) -> i32 {
        (v + self.zero as i64).clamp(0, self.qmax() as i64) as i32
    }
}

/// An integer linear layer `[k] -> [n]` with weight codes `[k, n]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QLinear {
    pub name: String,
    pub k: usize,
    pub n: usize,
    pub bits: u32,
    pub symmetric: bool,
    pub per_channel: bool,
    /// Weight scale and zero-point per group (one group, or one per output).
    #[serde(skip)]
    pub alpha: Vec<f64>,
    #[serde(skip)]
    pub zero: Vec<i32>,
    /// Input-to-output scale ratio per group.
    #[serde(skip)]
    pub requant: Vec<FixedPointRequant>,
    #[serde(skip)]
    pub codes: Vec<u16>,
    /// Accumulator offset per output.
    #[serde(skip)]
    pub bias: Vec<i32>,
}

impl QLinear {
    #[inline]
    pub fn group(&self, j: usize) -> usize {
        if self.per_channel {
            j
        } else {
            0
        }
    }

    /// Weight codes minus their zero-point, row-major `[k, n]`.
    pub fn centered(&self) -> Vec<i32> {
        self.codes
            .iter()
            .enumerate()
            .map(|(i, &c)| c as i32 - self.zero[self.group(i % self.n)])
            .collect()
    }

    /// Worst-case `|accumulator|` over every input whose codes deviate from
    /// the zero-point by at most `x_dev`.
    pub fn worst_case_acc(&self, x_dev: i64) -> i64 {
        let c = self.centered();
        (0..self.n)
            .map(|j| {
                let s: i64 = (0..self.k).map(|i| c[i * self.n + j].unsigned_abs() as i64).sum();
                x_dev * s + self.bias[j].unsigned_abs() as i64
            })
            .max()
            .unwrap_or(0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QBlock {
    #[serde(skip)]
    pub attn_norm: Vec<f64>,
    #[serde(skip)]
    pub mlp_norm: Vec<f64>,
    pub wq: QLinear,
    pub wk: QLinear,
    pub wv: QLinear,
    pub wo: QLinear,
    pub w_gate: QLinear,
    pub w_up: QLinear,
    pub w_down: QLinear,
    /// Query-key product to attention scores.
    pub score: FixedPointRequant,
    /// Probability-value product to the output-projection input.
    pub pv: FixedPointRequant,
    /// Block input and attention output to the MLP residual stream.
    pub attn_residual: [FixedPointRequant; 2],
    /// Activation times up projection to the down-projection input.
    pub gate_mul: FixedPointRequant,
    /// MLP residual stream and down projection to the block output.
    pub mlp_residual: [FixedPointRequant; 2],
}

impl QBlock {
    pub fn linears(&self) -> [&QLinear; 7] {
        [&self.wq, &self.wk, &self.wv, &self.wo, &self.w_gate, &self.w_up, &self.w_down]
    }

    pub fn linears_mut(&mut self) -> [&mut QLinear; 7] {
        [
            &mut self.wq,
            &mut self.wk,
            &mut self.wv,
            &mut self.wo,
            &mut self.w_gate,
            &mut self.w_up,
            &mut self.w_down,
        ]
    }

    pub fn linear(&self, kind: LinearKind) -> &QLinear {
        match kind {
            LinearKind::Q => &self.wq,
            LinearKind::K => &self.wk,
            LinearKind::V => &self.wv,
            LinearKind::O => &self.wo,
            LinearKind::Gate => &self.w_gate,
            LinearKind::Up => &self.w_up,
            LinearKind::Down => &self.w_down,
            LinearKind::Head => unreachable!("head is not a block layer"),
        }
    }
}

/// A compiled integer model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantizedModel {
    pub config: ModelConfig,
    pub scheme: SchemeName,
    #[serde(default)]
    pub down_per_tensor: bool,
    /// Activation quantization by tap name.
    pub acts: BTreeMap<String, ActQuant>,
    pub blocks: Vec<QBlock>,
    pub head: QLinear,
    /// Token embeddings as codes of the first block's input tap, `[vocab, d]`.
    #[serde(skip)]
    pub embed: Vec<u16>,
    #[serde(skip)]
    pub final_norm: Vec<f64>,
}

impl QuantizedModel {
    pub fn act(&self, tap: Tap) -> &ActQuant {
        &self.acts[&tap.name()]
    }

    pub fn linears(&self) -> Vec<&QLinear> {
        let mut out: Vec<&QLinear> = self.blocks.iter().flat_map(|b| b.linears()).collect();
        out.push(&self.head);
        out
    }

    /// Tap consuming the output of block `bi`.
    pub fn block_out_tap(&self, bi: usize) -> Tap {
        if bi + 1 < self.blocks.len() {
            Tap::block(bi + 1, TapKind::AttnNormIn)
        } else {
            Tap::last(TapKind::FinalNormIn)
        }
    }

    /// Checks code ranges, zero-points and the accumulator bounds.
    pub fn validate(&self) -> Result<()> {
        let cfg = &self.config;
        cfg.validate()?;
        let bad = |m: String| Err(Error::Format(m));
        for (name, a) in &self.acts {
            if !(a.alpha > 0.0 && a.alpha.is_finite()) || a.zero < 0 || a.zero > a.qmax() {
                return bad(format!("tap {name}: alpha {}, zero {}", a.alpha, a.zero));
            }
        }
        for t in tap_list(cfg.n_layers) {
            if !self.acts.contains_key(&t.name()) {
                return bad(format!("missing tap {t}"));
            }
        }
        if self.blocks.len() != cfg.n_layers {
            return bad(format!("{} blocks for {} layers", self.blocks.len(), cfg.n_layers));
        }
        let in0 = self.act(Tap::block(0, TapKind::AttnNormIn));
        if self.embed.len() != cfg.vocab * cfg.d_model || self.embed.iter().any(|&c| c as i32 > in0.qmax()) {
            return bad("embedding codes".into());
        }
        for l in self.linears() {
            let q = quant::qmax(l.bits) as u16;
            let groups = if l.per_channel { l.n } else { 1 };
            if l.codes.len() != l.k * l.n
                || l.bias.len() != l.n
                || l.codes.iter().any(|&c| c > q)
                || l.alpha.len() != groups
                || l.zero.len() != groups
                || l.requant.len() != groups
                || l.zero.iter().any(|&z| z < 0 || z > q as i32)
                || l.requant.iter().any(|r| !r.is_valid())
            {
                return bad(format!("linear {}", l.name));
            }
        }
        for b in &self.blocks {
            if b.attn_norm.len() != cfg.d_model || b.mlp_norm.len() != cfg.d_model {
                return bad("norm weights".into());
            }
        }
        if self.final_norm.len() != cfg.d_model {
            return bad("final norm weights".into());
        }
        check_accumulators(self)
    }
}

fn act_quant(params: &QuantParams, qconfig: &QConfig, tap: Tap) -> Result<ActQuant> {
    let rp = params.range(tap)?.snapped();
    rp.validate()?;
    if rp.groups() != 1 {
        return Err(Error::Quant(format!("tap {tap} must have a single range")));
    }
    let bits = qconfig.act_bits(tap);
    let zero = -rp.beta[0];
    if zero < 0.0 || zero > quant::qmax(bits) as f64 {
        return Err(Error::Quant(format!(
            "tap {tap}: zero-point {zero} outside the code range; real zero must be representable"
        )));
    }
    Ok(ActQuant {
        bits,
        alpha: rp.alpha[0],
        zero: zero as i32,
    })
}

fn requant(r: f64, what: &str) -> Result<FixedPointRequant> {
    FixedPointRequant::from_real(r).map_err(|e| match e {
        Error::Requant(r) => Error::Config(format!("{what}: scale ratio {r:e} is not representable")),
        e => e,
    })
}

/// Both ratios of a residual addition. The sum is formed at the finer of
/// the two shifts, so the shifts may not be too far apart.
fn residual(r0: f64, r1: f64, what: &str) -> Result<[FixedPointRequant; 2]> {
    let (a, b) = (requant(r0, what)?, requant(r1, what)?);
    if (a.shift - b.shift).abs() > 48 {
        return Err(Error::Config(format!("{what}: scale ratios {r0:e} and {r1:e} are too far apart")));
    }
    Ok([a, b])
}

fn qlinear(
    w: &Tensor,
    lin: Linear,
    qconfig: &QConfig,
    params: &QuantParams,
    input: &ActQuant,
    output: &ActQuant,
) -> Result<QLinear> {
    let scheme = qconfig.weight(lin);
    let per_channel = match scheme.granularity {
        Granularity::PerTensor => false,
        Granularity::PerChannel(1) => true,
        Granularity::PerChannel(ax) => {
            return Err(Error::Config(format!("{}: unsupported channel axis {ax}", lin.name())))
        }
    };
    let (wc, rp) = quant::clip_weights(w, params.clip(lin)?, &scheme)?;
    let rp = rp.snapped();
    let codes = quant::quantize(&wc, &rp, &scheme)?;
    let (k, n) = (w.shape()[0], w.shape()[1]);
    let requant = rp
        .alpha
        .iter()
        .map(|&aw| self::requant(input.alpha * aw / output.alpha, &lin.name()))
        .collect::<Result<Vec<_>>>()?;
    Ok(QLinear {
        name: lin.name(),
        k,
        n,
        bits: scheme.bits,
        symmetric: scheme.symmetric,
        per_channel,
        alpha: rp.alpha.clone(),
        zero: rp.beta.iter().map(|&b| -b as i32).collect(),
        requant,
        codes: codes.data().iter().map(|&c| c as u16).collect(),
        bias: vec![0; n],
    })
}

/// Compiles a calibrated model. Ranges are snapped to integral
/// zero-points exactly as fake-quant evaluation does.
pub fn compile(model: &Model, cal: &Calibrated) -> Result<QuantizedModel> {
    let fused = cal.fused(model)?;
    let qconfig = cal.qconfig(model.config.n_layers);
    let mut q = compile_fused(&fused, &qconfig, &cal.params)?;
    q.down_per_tensor = cal.down_per_tensor;
    Ok(q)
}

/// Compiles an already fused model under `qconfig`.
pub fn compile_fused(model: &Model, qconfig: &QConfig, params: &QuantParams) -> Result<QuantizedModel> {
    let cfg = &model.config;
    let n = cfg.n_layers;
    let mut acts = BTreeMap::new();
    for tap in tap_list(n) {
        acts.insert(tap.name(), act_quant(params, qconfig, tap)?);
    }
    let a = |tap: Tap| acts[&tap.name()];
    let mut blocks = Vec::with_capacity(n);
    for (bi, b) in model.blocks.iter().enumerate() {
        let t = |k| a(Tap::block(bi, k));
        let lin = |kind: LinearKind, input: TapKind, output: TapKind| {
            let l = Linear { block: Some(bi), kind };
            qlinear(b.get(kind.field()).expect("block field"), l, qconfig, params, &t(input), &t(output))
        };
        let out_tap = if bi + 1 < n {
            a(Tap::block(bi + 1, TapKind::AttnNormIn))
        } else {
            a(Tap::last(TapKind::FinalNormIn))
        };
        let name = |s: &str| format!("block{bi}.{s}");
        let hd = cfg.head_dim() as f64;
        blocks.push(QBlock {
            attn_norm: b.attn_norm.data().to_vec(),
            mlp_norm: b.mlp_norm.data().to_vec(),
            wq: lin(LinearKind::Q, TapKind::QkvIn, TapKind::QOut)?,
            wk: lin(LinearKind::K, TapKind::QkvIn, TapKind::KOut)?,
            wv: lin(LinearKind::V, TapKind::QkvIn, TapKind::VOut)?,
            wo: lin(LinearKind::O, TapKind::OIn, TapKind::OOut)?,
            w_gate: lin(LinearKind::Gate, TapKind::GateUpIn, TapKind::GateOut)?,
            w_up: lin(LinearKind::Up, TapKind::GateUpIn, TapKind::UpOut)?,
            w_down: lin(LinearKind::Down, TapKind::DownIn, TapKind::DownOut)?,
            score: requant(
                t(TapKind::QRope).alpha * t(TapKind::KRope).alpha * (1.0 / hd.sqrt()) / t(TapKind::Scores).alpha,
                &name("scores"),
            )?,
            pv: requant(
                t(TapKind::Probs).alpha * t(TapKind::VOut).alpha / t(TapKind::OIn).alpha,
                &name("attn_values"),
            )?,
            attn_residual: residual(
                t(TapKind::AttnNormIn).alpha / t(TapKind::MlpNormIn).alpha,
                t(TapKind::OOut).alpha / t(TapKind::MlpNormIn).alpha,
                &name("attn_residual"),
            )?,
            gate_mul: requant(
                t(TapKind::ActOut).alpha * t(TapKind::UpOut).alpha / t(TapKind::DownIn).alpha,
                &name("gate_mul"),
            )?,
            mlp_residual: residual(
                t(TapKind::MlpNormIn).alpha / out_tap.alpha,
                t(TapKind::DownOut).alpha / out_tap.alpha,
                &name("mlp_residual"),
            )?,
        });
    }
    let head = qlinear(
        &model.head_weight(),
        Linear { block: None, kind: LinearKind::Head },
        qconfig,
        params,
        &a(Tap::last(TapKind::HeadIn)),
        &a(Tap::last(TapKind::Logits)),
    )?;
    let in0 = a(Tap::block(0, TapKind::AttnNormIn));
    let embed = model.embed.data().iter().map(|&x| in0.quantize(x) as u16).collect();
    let q = QuantizedModel {
        config: cfg.clone(),
        scheme: qconfig.scheme,
        down_per_tensor: false,
        acts,
        blocks,
        head,
        embed,
        final_norm: model.final_norm.data().to_vec(),
    };
    q.validate()?;
    Ok(q)
}

const ACC_LIMIT: i64 = 1 << 31;

/// Rejects models whose integer matmuls could leave the 32-bit range for
/// some input. The probability-value bound uses that probabilities are
/// non-negative and sum to one, so each row's codes sum to at most
/// `1/alpha + len/2`.
fn check_accumulators(q: &QuantizedModel) -> Result<()> {
    let over = |what: String, bound: i64| {
        if bound >= ACC_LIMIT {
            Err(Error::Overflow(format!("{what}: worst-case accumulator {bound} exceeds 2^31")))
        } else {
            Ok(())
        }
    };
    let cfg = &q.config;
    for (bi, b) in q.blocks.iter().enumerate() {
        let t = |k| *q.act(Tap::block(bi, k));
        let inputs = [
            TapKind::QkvIn,
            TapKind::QkvIn,
            TapKind::QkvIn,
            TapKind::OIn,
            TapKind::GateUpIn,
            TapKind::GateUpIn,
            TapKind::DownIn,
        ];
        for (l, input) in b.linears().into_iter().zip(inputs) {
            over(l.name.clone(), l.worst_case_acc(t(input).max_dev()))?;
        }
        let hd = cfg.head_dim() as i64;
        over(
            format!("block{bi} scores"),
            hd * t(TapKind::QRope).max_dev() * t(TapKind::KRope).max_dev(),
        )?;
        let p = t(TapKind::Probs);
        let row_sum = (1.0 / p.alpha).ceil() as i64 + cfg.max_seq as i64 / 2 + 1;
        over(format!("block{bi} attention values"), row_sum * t(TapKind::VOut).max_dev())?;
    }
    over(
        q.head.name.clone(),
        q.head.worst_case_acc(q.act(Tap::last(TapKind::HeadIn)).max_dev()),
    )
}
