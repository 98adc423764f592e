//! Activation taps and linear layer identifiers.
//!
//! A tap is a point in the forward pass where an activation tensor is
//! quantized. Each block has [`BLOCK_TAPS`] taps; the model ends with three
//! more around the final norm and output head.

use std::fmt;

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TapKind {
    AttnNormIn,
    QkvIn,
    QOut,
    KOut,
    VOut,
    QRope,
    KRope,
    Scores,
    Probs,
    OIn,
    OOut,
    MlpNormIn,
    GateUpIn,
    GateOut,
    UpOut,
    ActOut,
    DownIn,
    DownOut,
    FinalNormIn,
    HeadIn,
    Logits,
}

pub const BLOCK_TAPS: usize = 18;
pub const FINAL_TAPS: usize = 3;

const ALL_KINDS: [TapKind; BLOCK_TAPS + FINAL_TAPS] = [
    TapKind::AttnNormIn,
    TapKind::QkvIn,
    TapKind::QOut,
    TapKind::KOut,
    TapKind::VOut,
    TapKind::QRope,
    TapKind::KRope,
    TapKind::Scores,
    TapKind::Probs,
    TapKind::OIn,
    TapKind::OOut,
    TapKind::MlpNormIn,
    TapKind::GateUpIn,
    TapKind::GateOut,
    TapKind::UpOut,
    TapKind::ActOut,
    TapKind::DownIn,
    TapKind::DownOut,
    TapKind::FinalNormIn,
    TapKind::HeadIn,
    TapKind::Logits,
];

impl TapKind {
    pub fn suffix(self) -> &'static str {
        match self {
            TapKind::AttnNormIn => "attn.norm_in",
            TapKind::QkvIn => "attn.qkv_in",
            TapKind::QOut => "attn.q_out",
            TapKind::KOut => "attn.k_out",
            TapKind::VOut => "attn.v_out",
            TapKind::QRope => "attn.q_rope",
            TapKind::KRope => "attn.k_rope",
            TapKind::Scores => "attn.scores",
            TapKind::Probs => "attn.probs",
            TapKind::OIn => "attn.o_in",
            TapKind::OOut => "attn.o_out",
            TapKind::MlpNormIn => "mlp.norm_in",
            TapKind::GateUpIn => "mlp.gate_up_in",
            TapKind::GateOut => "mlp.gate_out",
            TapKind::UpOut => "mlp.up_out",
            TapKind::ActOut => "mlp.act_out",
            TapKind::DownIn => "mlp.down_in",
            TapKind::DownOut => "mlp.down_out",
            TapKind::FinalNormIn => "norm_in",
            TapKind::HeadIn => "head_in",
            TapKind::Logits => "logits",
        }
    }

    /// Taps feeding a linear layer or an integer matmul as its activation
    /// operand. These are 8-bit in the default schemes.
    pub fn is_linear_input(self) -> bool {
        matches!(
            self,
            TapKind::QkvIn
                | TapKind::QRope
                | TapKind::Probs
                | TapKind::OIn
                | TapKind::GateUpIn
                | TapKind::DownIn
                | TapKind::HeadIn
        )
    }

    pub fn is_final(self) -> bool {
        matches!(self, TapKind::FinalNormIn | TapKind::HeadIn | TapKind::Logits)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Tap {
    /// `None` for the final taps.
    pub block: Option<usize>,
    pub kind: TapKind,
}

impl Tap {
    pub fn block(block: usize, kind: TapKind) -> Self {
        Self {
            block: Some(block),
            kind,
        }
    }

    pub fn last(kind: TapKind) -> Self {
        Self { block: None, kind }
    }

    /// Position in [`tap_list`] for a model with `n_layers` blocks.
    pub fn index(self, n_layers: usize) -> usize {
        let k = ALL_KINDS.iter().position(|&x| x == self.kind).expect("listed");
        match self.block {
            Some(b) => b * BLOCK_TAPS + k,
            None => n_layers * BLOCK_TAPS + (k - BLOCK_TAPS),
        }
    }

    pub fn name(self) -> String {
        self.to_string()
    }
}

impl fmt::Display for Tap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.block {
            Some(b) => write!(f, "block{b}.{}", self.kind.suffix()),
            None => write!(f, "final.{}", self.kind.suffix()),
        }
    }
}

/// Every tap of a model in forward order.
pub fn tap_list(n_layers: usize) -> Vec<Tap> {
    let mut out = Vec::with_capacity(n_layers * BLOCK_TAPS + FINAL_TAPS);
    for b in 0..n_layers {
        out.extend(ALL_KINDS[..BLOCK_TAPS].iter().map(|&k| Tap::block(b, k)));
    }
    out.extend(ALL_KINDS[BLOCK_TAPS..].iter().map(|&k| Tap::last(k)));
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum LinearKind {
    Q,
    K,
    V,
    O,
    Gate,
    Up,
    Down,
    Head,
}

impl LinearKind {
    pub const BLOCK: [LinearKind; 7] = [
        LinearKind::Q,
        LinearKind::K,
        LinearKind::V,
        LinearKind::O,
        LinearKind::Gate,
        LinearKind::Up,
        LinearKind::Down,
    ];

    /// Field name in [`super::Block`].
    pub fn field(self) -> &'static str {
        match self {
            LinearKind::Q => "wq",
            LinearKind::K => "wk",
            LinearKind::V => "wv",
            LinearKind::O => "wo",
            LinearKind::Gate => "w_gate",
            LinearKind::Up => "w_up",
            LinearKind::Down => "w_down",
            LinearKind::Head => "head",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Linear {
    pub block: Option<usize>,
    pub kind: LinearKind,
}

impl Linear {
    pub fn name(self) -> String {
        match self.block {
            Some(b) => format!("block{b}.{}", self.kind.field()),
            None => "head".into(),
        }
    }
}

pub fn linear_list(n_layers: usize) -> Vec<Linear> {
    let mut out = Vec::new();
    for b in 0..n_layers {
        out.extend(LinearKind::BLOCK.iter().map(|&kind| Linear {
            block: Some(b),
            kind,
        }));
    }
    out.push(Linear {
        block: None,
        kind: LinearKind::Head,
    });
    out
}
