use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::taps::{linear_list, tap_list, Linear, LinearKind, Tap, TapKind};
use crate::error::{Error, Result};
use crate::quant::{ClipParams, QuantScheme, RangeParams};

/// Named quantization schemes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SchemeName {
    #[serde(rename = "w8a8")]
    W8A8,
    #[serde(rename = "w4a8")]
    W4A8,
    #[serde(rename = "w4a8-sym")]
    W4A8Sym,
    #[serde(rename = "w8a16")]
    W8A16,
    #[serde(rename = "full-w8a8")]
    FullW8A8,
    /// Everything at 16 bits; a near-lossless reference.
    #[serde(rename = "w16a16")]
    W16A16,
}

impl SchemeName {
    pub const ALL: [SchemeName; 6] = [
        SchemeName::W8A8,
        SchemeName::W4A8,
        SchemeName::W4A8Sym,
        SchemeName::W8A16,
        SchemeName::FullW8A8,
        SchemeName::W16A16,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            SchemeName::W8A8 => "w8a8",
            SchemeName::W4A8 => "w4a8",
            SchemeName::W4A8Sym => "w4a8-sym",
            SchemeName::W8A16 => "w8a16",
            SchemeName::FullW8A8 => "full-w8a8",
            SchemeName::W16A16 => "w16a16",
        }
    }
}

impl fmt::Display for SchemeName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SchemeName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|n| n.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown scheme {s:?}")))
    }
}

/// One weight scheme per linear layer and one activation bitwidth per tap.
#[derive(Clone, Debug, PartialEq)]
pub struct QConfig {
    pub scheme: SchemeName,
    weights: BTreeMap<Linear, QuantScheme>,
    acts: BTreeMap<Tap, u32>,
}

/// Output-channel axis of a `[in, out]` weight.
pub const OUT_AXIS: usize = 1;

impl QConfig {
    pub fn new(scheme: SchemeName, n_layers: usize) -> Self {
        let weight = |kind: LinearKind| match scheme {
            SchemeName::W8A8 | SchemeName::W8A16 | SchemeName::FullW8A8 => {
                if kind == LinearKind::Down {
                    QuantScheme::per_channel(8, OUT_AXIS)
                } else {
                    QuantScheme::per_tensor(8)
                }
            }
            SchemeName::W4A8 => QuantScheme::per_channel(4, OUT_AXIS),
            SchemeName::W4A8Sym => QuantScheme::per_channel(4, OUT_AXIS).symmetric(),
            SchemeName::W16A16 => QuantScheme::per_tensor(16),
        };
        let act = |kind: TapKind| match scheme {
            SchemeName::W8A8 | SchemeName::W4A8 | SchemeName::W4A8Sym => {
                if kind.is_linear_input() {
                    8
                } else {
                    16
                }
            }
            SchemeName::W8A16 => {
                if matches!(kind, TapKind::QRope | TapKind::Probs) {
                    8
                } else {
                    16
                }
            }
            SchemeName::FullW8A8 => 8,
            SchemeName::W16A16 => 16,
        };
        Self {
            scheme,
            weights: linear_list(n_layers)
                .into_iter()
                .map(|l| (l, weight(l.kind)))
                .collect(),
            acts: tap_list(n_layers)
                .into_iter()
                .map(|t| (t, act(t.kind)))
                .collect(),
        }
    }

    pub fn n_layers(&self) -> usize {
        self.weights.keys().filter_map(|l| l.block).max().map_or(0, |b| b + 1)
    }

    pub fn weight(&self, lin: Linear) -> QuantScheme {
        self.weights[&lin]
    }

    pub fn act_bits(&self, tap: Tap) -> u32 {
        self.acts[&tap]
    }

    pub fn weights(&self) -> impl Iterator<Item = (&Linear, &QuantScheme)> {
        self.weights.iter()
    }

    pub fn acts(&self) -> impl Iterator<Item = (&Tap, &u32)> {
        self.acts.iter()
    }

    pub fn set_weight(&mut self, lin: Linear, scheme: QuantScheme) {
        self.weights.insert(lin, scheme);
    }

    /// Drops the per-channel exception for down projections.
    pub fn with_down_per_tensor(mut self) -> Self {
        for (l, s) in self.weights.iter_mut() {
            if l.kind == LinearKind::Down {
                *s = QuantScheme::per_tensor(s.bits);
            }
        }
        self
    }
}

/// Quantization parameters for a fused model: one range per tap and one
/// clip setting per linear layer, keyed by name.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct QuantParams {
    pub ranges: BTreeMap<String, RangeParams>,
    pub clips: BTreeMap<String, ClipParams>,
}

impl QuantParams {
    pub fn range(&self, tap: Tap) -> Result<&RangeParams> {
        self.ranges
            .get(&tap.name())
            .ok_or_else(|| Error::Config(format!("missing range for tap {tap}")))
    }

    pub fn clip(&self, lin: Linear) -> Result<&ClipParams> {
        self.clips
            .get(&lin.name())
            .ok_or_else(|| Error::Config(format!("missing clip parameters for {}", lin.name())))
    }

    /// Every range with an integral offset, as used for export and for
    /// fake-quant evaluation.
    pub fn snapped(&self) -> Self {
        Self {
            ranges: self
                .ranges
                .iter()
                .map(|(k, v)| (k.clone(), v.snapped()))
                .collect(),
            clips: self.clips.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_tap_and_linear_has_one_assignment() {
        for s in SchemeName::ALL {
            let q = QConfig::new(s, 2);
            let taps: Vec<Tap> = q.acts().map(|(t, _)| *t).collect();
            let mut listed = tap_list(2);
            listed.sort();
            assert_eq!(taps, listed);
            assert_eq!(q.weights().count(), linear_list(2).len());
            assert_eq!(s.as_str().parse::<SchemeName>().unwrap(), s);
        }
        assert!("w3a3".parse::<SchemeName>().is_err());
    }

    #[test]
    fn scheme_defaults() {
        let q = QConfig::new(SchemeName::W8A8, 1);
        let down = Linear { block: Some(0), kind: LinearKind::Down };
        let up = Linear { block: Some(0), kind: LinearKind::Up };
        assert_eq!(q.weight(down), QuantScheme::per_channel(8, 1));
        assert_eq!(q.weight(up), QuantScheme::per_tensor(8));
        assert_eq!(q.act_bits(Tap::block(0, TapKind::QkvIn)), 8);
        assert_eq!(q.act_bits(Tap::block(0, TapKind::ActOut)), 16);
        let q = q.with_down_per_tensor();
        assert_eq!(q.weight(down), QuantScheme::per_tensor(8));
        let full = QConfig::new(SchemeName::FullW8A8, 1);
        assert!(full.acts().all(|(_, &b)| b == 8));
        let w816 = QConfig::new(SchemeName::W8A16, 1);
        assert_eq!(w816.acts().filter(|(_, &b)| b == 8).count(), 2);
    }
}
