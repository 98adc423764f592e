//! Operation counts for one forward pass, weighted by operand bitwidths.

use serde::{Deserialize, Serialize};

use super::compile::QuantizedModel;
use crate::model::{Tap, TapKind};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CostMode {
    /// Encode `seq_len` tokens at once.
    Prefill,
    /// Produce one token at position `seq_len - 1`.
    Decode,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerCost {
    pub name: String,
    /// True for weight-by-activation products, false for activation
    /// products (attention and gating).
    pub weight_operand: bool,
    pub macs: u64,
    /// Bitwidth of the weight operand, or of the second activation.
    pub w_bits: u32,
    pub a_bits: u32,
    pub bit_macs: u64,
    pub weight_bytes: u64,
    pub act_bytes: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub scheme: String,
    pub mode: CostMode,
    pub seq_len: usize,
    pub layers: Vec<LayerCost>,
    pub total_macs: u64,
    pub weight_bit_macs: u64,
    pub act_bit_macs: u64,
    pub total_bit_macs: u64,
    pub weight_bytes: u64,
    pub act_bytes: u64,
}

fn bytes(n: u64, bits: u32) -> u64 {
    (n * bits as u64).div_ceil(8)
}

pub fn cost_report(q: &QuantizedModel, seq_len: usize, mode: CostMode) -> CostReport {
    let cfg = &q.config;
    let l = seq_len as u64;
    // Rows computed and query-key pairs visited.
    let (rows, pairs) = match mode {
        CostMode::Prefill => (l, l * (l + 1) / 2),
        CostMode::Decode => (l.min(1), l),
    };
    let bits = |t: Tap| q.act(t).bits;
    let mut layers = Vec::new();
    let mut linear = |name: &str, k: usize, n: usize, w_bits: u32, x: Tap, y: Tap| {
        let (k, n) = (k as u64, n as u64);
        let macs = rows * k * n;
        let a_bits = bits(x);
        layers.push(LayerCost {
            name: name.to_string(),
            weight_operand: true,
            macs,
            w_bits,
            a_bits,
            bit_macs: macs * (w_bits * a_bits) as u64,
            weight_bytes: bytes(k * n, w_bits),
            act_bytes: bytes(rows * k, a_bits) + bytes(rows * n, bits(y)),
        });
    };
    let (d, ff, heads) = (cfg.d_model as u64, cfg.d_ff as u64, cfg.n_heads as u64);
    let mut products = Vec::new();
    for (bi, b) in q.blocks.iter().enumerate() {
        let t = |k| Tap::block(bi, k);
        for (lin, x, y) in [
            (&b.wq, TapKind::QkvIn, TapKind::QOut),
            (&b.wk, TapKind::QkvIn, TapKind::KOut),
            (&b.wv, TapKind::QkvIn, TapKind::VOut),
            (&b.wo, TapKind::OIn, TapKind::OOut),
            (&b.w_gate, TapKind::GateUpIn, TapKind::GateOut),
            (&b.w_up, TapKind::GateUpIn, TapKind::UpOut),
            (&b.w_down, TapKind::DownIn, TapKind::DownOut),
        ] {
            linear(&lin.name, lin.k, lin.n, lin.bits, t(x), t(y));
        }
        let (bq, bk, bs, bp, bv, bo) = (
            bits(t(TapKind::QRope)),
            bits(t(TapKind::KRope)),
            bits(t(TapKind::Scores)),
            bits(t(TapKind::Probs)),
            bits(t(TapKind::VOut)),
            bits(t(TapKind::OIn)),
        );
        let macs = pairs * d;
        products.push(LayerCost {
            name: format!("block{bi}.scores"),
            weight_operand: false,
            macs,
            w_bits: bk,
            a_bits: bq,
            bit_macs: macs * (bq * bk) as u64,
            weight_bytes: 0,
            act_bytes: bytes(rows * d, bq) + bytes(l * d, bk) + bytes(pairs * heads, bs),
        });
        products.push(LayerCost {
            name: format!("block{bi}.attn_values"),
            weight_operand: false,
            macs,
            w_bits: bv,
            a_bits: bp,
            bit_macs: macs * (bp * bv) as u64,
            weight_bytes: 0,
            act_bytes: bytes(pairs * heads, bp) + bytes(l * d, bv) + bytes(rows * d, bo),
        });
        let (ba, bu, bm) = (
            bits(t(TapKind::ActOut)),
            bits(t(TapKind::UpOut)),
            bits(t(TapKind::DownIn)),
        );
        let macs = rows * ff;
        products.push(LayerCost {
            name: format!("block{bi}.gate_mul"),
            weight_operand: false,
            macs,
            w_bits: bu,
            a_bits: ba,
            bit_macs: macs * (ba * bu) as u64,
            weight_bytes: 0,
            act_bytes: bytes(macs, ba) + bytes(macs, bu) + bytes(macs, bm),
        });
    }
    let h = &q.head;
    linear(&h.name, h.k, h.n, h.bits, Tap::last(TapKind::HeadIn), Tap::last(TapKind::Logits));
    layers.extend(products);
    let sum = |f: &dyn Fn(&LayerCost) -> u64| layers.iter().map(f).sum::<u64>();
    let weight_bit_macs = sum(&|c| if c.weight_operand { c.bit_macs } else { 0 });
    let act_bit_macs = sum(&|c| if c.weight_operand { 0 } else { c.bit_macs });
    CostReport {
        scheme: q.scheme.to_string(),
        mode,
        seq_len,
        total_macs: sum(&|c| c.macs),
        weight_bit_macs,
        act_bit_macs,
        total_bit_macs: weight_bit_macs + act_bit_macs,
        weight_bytes: sum(&|c| c.weight_bytes),
        act_bytes: sum(&|c| c.act_bytes),
        layers,
    }
}

impl CostReport {
    /// Aligned-column rendering.
    pub fn to_text(&self) -> String {
        let mut s = format!("{} {:?} seq_len={}\n", self.scheme, self.mode, self.seq_len);
        s += &format!(
            "{:<20} {:>12} {:>6} {:>14} {:>10} {:>10}\n",
            "layer", "macs", "bits", "bit_macs", "w_bytes", "a_bytes"
        );
        for c in &self.layers {
            s += &format!(
                "{:<20} {:>12} {:>6} {:>14} {:>10} {:>10}\n",
                c.name,
                c.macs,
                format!("{}x{}", c.w_bits, c.a_bits),
                c.bit_macs,
                c.weight_bytes,
                c.act_bytes
            );
        }
        s += &format!(
            "{:<20} {:>12} {:>6} {:>14} {:>10} {:>10}\n",
            "total", self.total_macs, "", self.total_bit_macs, self.weight_bytes, self.act_bytes
        );
        s
    }
}
