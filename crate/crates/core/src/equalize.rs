//! Weight-equivalent scaling: `Y = X·W = (X / S)·(S·W)` with a positive
//! per-channel vector `S` folded into the producer and consumer weights.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{forward_float, BlockVars, Model};
use crate::numeric::{Graph, Tensor, Var};

/// Where a scale vector sits. The producer's output side is divided by `S`,
/// the consumer's input rows are multiplied by it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Placement {
    /// Attention norm affine -> rows of wq, wk, wv.
    NormQkv,
    /// MLP norm affine -> rows of w_gate, w_up.
    NormMlp,
    /// Columns of w_up -> rows of w_down.
    UpDown,
    /// Columns of wv -> rows of wo.
    VO,
    /// Columns of w_gate -> rows of w_down. Not equivalence-preserving: the
    /// gate passes through the activation function. Always rejected.
    GateDown,
}

impl Placement {
    pub const LEGAL: [Placement; 4] = [
        Placement::NormQkv,
        Placement::NormMlp,
        Placement::UpDown,
        Placement::VO,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Placement::NormQkv => "norm_qkv",
            Placement::NormMlp => "norm_mlp",
            Placement::UpDown => "up_down",
            Placement::VO => "v_o",
            Placement::GateDown => "gate_down",
        }
    }

    pub fn check(self) -> Result<()> {
        if self == Placement::GateDown {
            return Err(Error::Placement(
                "gate_down crosses the activation nonlinearity".into(),
            ));
        }
        Ok(())
    }

    /// Length of the scale vector for a model.
    pub fn dim(self, model: &Model) -> usize {
        match self {
            Placement::UpDown | Placement::GateDown => model.config.d_ff,
            _ => model.config.d_model,
        }
    }
}

impl fmt::Display for Placement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Placement {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [
            Placement::NormQkv,
            Placement::NormMlp,
            Placement::UpDown,
            Placement::VO,
            Placement::GateDown,
        ]
        .into_iter()
        .find(|p| p.as_str() == s)
        .ok_or_else(|| Error::Config(format!("unknown placement {s:?}")))
    }
}

/// Placements enabled in every block.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlacementPlan {
    pub placements: BTreeSet<Placement>,
}

impl Default for PlacementPlan {
    /// Both norm placements plus up -> down.
    fn default() -> Self {
        Self::of(&[Placement::NormQkv, Placement::NormMlp, Placement::UpDown])
    }
}

impl PlacementPlan {
    pub fn of(ps: &[Placement]) -> Self {
        Self {
            placements: ps.iter().copied().collect(),
        }
    }

    /// Norm placements only, no up -> down scale.
    pub fn without_edge() -> Self {
        Self::of(&[Placement::NormQkv, Placement::NormMlp])
    }

    pub fn all_legal() -> Self {
        Self::of(&Placement::LEGAL)
    }

    pub fn none() -> Self {
        Self::of(&[])
    }

    pub fn validate(&self) -> Result<()> {
        self.placements.iter().try_for_each(|p| p.check())
    }

    pub fn contains(&self, p: Placement) -> bool {
        self.placements.contains(&p)
    }
}

/// A positive scale vector stored as natural logarithms.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScaleVector {
    pub block: usize,
    pub placement: Placement,
    pub log: Vec<f64>,
}

impl ScaleVector {
    pub fn ones(block: usize, placement: Placement, n: usize) -> Self {
        Self {
            block,
            placement,
            log: vec![0.0; n],
        }
    }

    pub fn values(&self) -> Vec<f64> {
        self.log.iter().map(|l| l.exp()).collect()
    }

    pub fn key(&self) -> String {
        scale_key(self.block, self.placement)
    }
}

pub fn scale_key(block: usize, p: Placement) -> String {
    format!("block{block}.{p}")
}

pub type Scales = BTreeMap<String, ScaleVector>;

/// `s_i = max|X_i|^a / max|W_i|^(1-a)`, both statistics floored at 1e-8.
pub fn smoothquant_init(act_absmax: &[f64], w_absmax: &[f64], alpha_hyper: f64) -> Result<Vec<f64>> {
    if act_absmax.len() != w_absmax.len() {
        return Err(Error::shape(
            "smoothquant_init",
            format!("{} activation vs {} weight statistics", act_absmax.len(), w_absmax.len()),
        ));
    }
    if !(0.0..=1.0).contains(&alpha_hyper) {
        return Err(Error::Config(format!("alpha_hyper {alpha_hyper} outside [0, 1]")));
    }
    Ok(act_absmax
        .iter()
        .zip(w_absmax)
        .map(|(&a, &w)| alpha_hyper * a.max(1e-8).ln() - (1.0 - alpha_hyper) * w.max(1e-8).ln())
        .collect())
}

/// Per-row absolute maximum over one or more `[in, out]` weights.
pub fn row_absmax(ws: &[&Tensor]) -> Vec<f64> {
    let n = ws[0].shape()[0];
    let mut out = vec![0.0f64; n];
    for w in ws {
        for (i, o) in out.iter_mut().enumerate() {
            for &v in w.row(i) {
                *o = o.max(v.abs());
            }
        }
    }
    out
}

/// Row-wise absolute maxima of the consumer weights of a placement.
pub fn consumer_absmax(model: &Model, block: usize, p: Placement) -> Vec<f64> {
    let b = &model.blocks[block];
    match p {
        Placement::NormQkv => row_absmax(&[&b.wq, &b.wk, &b.wv]),
        Placement::NormMlp => row_absmax(&[&b.w_gate, &b.w_up]),
        Placement::UpDown | Placement::GateDown => row_absmax(&[&b.w_down]),
        Placement::VO => row_absmax(&[&b.wo]),
    }
}

fn scale_rows(w: &mut Tensor, s: &[f64]) {
    let n = w.last_dim();
    for (i, row) in w.data_mut().chunks_mut(n).enumerate() {
        for v in row.iter_mut() {
            *v *= s[i];
        }
    }
}

fn unscale_cols(w: &mut Tensor, s: &[f64]) {
    let n = w.last_dim();
    for row in w.data_mut().chunks_mut(n) {
        for (v, si) in row.iter_mut().zip(s) {
            *v /= si;
        }
    }
}

fn unscale_vec(w: &mut Tensor, s: &[f64]) {
    for (v, si) in w.data_mut().iter_mut().zip(s) {
        *v /= si;
    }
}

/// Folds every scale of the plan into a copy of the model. Placements not
/// in `scales` are an error; scales outside the plan are ignored.
pub fn fuse(model: &Model, plan: &PlacementPlan, scales: &Scales) -> Result<Model> {
    let values: BTreeMap<String, Vec<f64>> = scales.iter().map(|(k, v)| (k.clone(), v.values())).collect();
    fuse_values(model, plan, &values)
}

/// [`fuse`] with scales given directly as positive values.
pub fn fuse_values(model: &Model, plan: &PlacementPlan, scales: &BTreeMap<String, Vec<f64>>) -> Result<Model> {
    plan.validate()?;
    let mut out = model.clone();
    for bi in 0..model.blocks.len() {
        for &p in &plan.placements {
            let key = scale_key(bi, p);
            let s = scales
                .get(&key)
                .ok_or_else(|| Error::Placement(format!("no scale for {key}")))?;
            let n = p.dim(model);
            if s.len() != n {
                return Err(Error::Placement(format!("{key} has {} entries, expected {n}", s.len())));
            }
            if s.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
                return Err(Error::NonFinite(format!("scale {key} not positive and finite")));
            }
            let b = &mut out.blocks[bi];
            match p {
                Placement::NormQkv => {
                    unscale_vec(&mut b.attn_norm, s);
                    scale_rows(&mut b.wq, s);
                    scale_rows(&mut b.wk, s);
                    scale_rows(&mut b.wv, s);
                }
                Placement::NormMlp => {
                    unscale_vec(&mut b.mlp_norm, s);
                    scale_rows(&mut b.w_gate, s);
                    scale_rows(&mut b.w_up, s);
                }
                Placement::UpDown => {
                    unscale_cols(&mut b.w_up, s);
                    scale_rows(&mut b.w_down, s);
                }
                Placement::VO => {
                    unscale_cols(&mut b.wv, s);
                    scale_rows(&mut b.wo, s);
                }
                Placement::GateDown => unreachable!("rejected by validate"),
            }
        }
    }
    Ok(out)
}

/// Graph form of [`fuse`] for one block, with the scales given as
/// log-space graph variables. Produces the same values as [`fuse`].
pub fn fuse_block_graph(
    g: &mut Graph,
    base: &BlockVars,
    log_scales: &BTreeMap<Placement, Var>,
) -> Result<BlockVars> {
    let mut b = *base;
    for (&p, &ls) in log_scales {
        p.check()?;
        let s = g.exp(ls);
        let n = g.value(s).len();
        let col = g.reshape(s, &[n, 1])?;
        match p {
            Placement::NormQkv => {
                b.attn_norm = g.div(b.attn_norm, s)?;
                b.wq = g.mul(b.wq, col)?;
                b.wk = g.mul(b.wk, col)?;
                b.wv = g.mul(b.wv, col)?;
            }
            Placement::NormMlp => {
                b.mlp_norm = g.div(b.mlp_norm, s)?;
                b.w_gate = g.mul(b.w_gate, col)?;
                b.w_up = g.mul(b.w_up, col)?;
            }
            Placement::UpDown => {
                b.w_up = g.div(b.w_up, s)?;
                b.w_down = g.mul(b.w_down, col)?;
            }
            Placement::VO => {
                b.wv = g.div(b.wv, s)?;
                b.wo = g.mul(b.wo, col)?;
            }
            Placement::GateDown => unreachable!("rejected by check"),
        }
    }
    Ok(b)
}

/// Scales of one for every placement of the plan.
pub fn unit_scales(model: &Model, plan: &PlacementPlan) -> Scales {
    let mut out = Scales::new();
    for bi in 0..model.blocks.len() {
        for &p in &plan.placements {
            let sv = ScaleVector::ones(bi, p, p.dim(model));
            out.insert(sv.key(), sv);
        }
    }
    out
}

/// Independent log-uniform scales in `[lo, hi]`.
pub fn random_scales(model: &Model, plan: &PlacementPlan, rng: &mut impl Rng, lo: f64, hi: f64) -> Scales {
    let mut out = unit_scales(model, plan);
    for sv in out.values_mut() {
        for l in sv.log.iter_mut() {
            *l = rng.gen_range(lo.ln()..=hi.ln());
        }
    }
    out
}

/// Scales that, once fused, make `count` random channels of every
/// placement's activation `factor` times larger and jitter the rest
/// log-uniformly within `[1/jitter, jitter]`. The float function is unchanged.
pub fn outlier_scales(
    model: &Model,
    plan: &PlacementPlan,
    rng: &mut impl Rng,
    count: usize,
    factor: f64,
    jitter: f64,
) -> Scales {
    let mut out = unit_scales(model, plan);
    let j = jitter.ln();
    for sv in out.values_mut() {
        for l in sv.log.iter_mut() {
            *l = rng.gen_range(-j..=j);
        }
        let n = sv.log.len();
        for c in rand::seq::index::sample(rng, n, count.min(n)) {
            sv.log[c] = -factor.ln();
        }
    }
    out
}

/// `max |Δlogit| / (1 + |logit|)` over the trial sequences, with `m1` as
/// the reference.
pub fn verify_equivalence(m1: &Model, m2: &Model, trials: &[Vec<u32>]) -> Result<f64> {
    if m1.config != m2.config {
        return Err(Error::Config("models differ in topology".into()));
    }
    let mut worst = 0.0f64;
    for seq in trials {
        let a = forward_float(m1, seq, 1)?;
        let b = forward_float(m2, seq, 1)?;
        for (x, y) in a.data().iter().zip(b.data()) {
            worst = worst.max((x - y).abs() / (1.0 + x.abs()));
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small() -> Model {
        let cfg = ModelConfig {
            vocab: 32,
            d_model: 16,
            n_layers: 2,
            n_heads: 2,
            d_ff: 32,
            max_seq: 64,
            massive: None,
            ..Default::default()
        };
        Model::init(cfg, 3).unwrap()
    }

    fn trials(rng: &mut ChaCha8Rng, n: usize) -> Vec<Vec<u32>> {
        (0..n).map(|_| (0..12).map(|_| rng.gen_range(0..32)).collect()).collect()
    }

    #[test]
    fn smoothquant_examples() {
        let s = smoothquant_init(&[4.0], &[1.0], 0.5).unwrap();
        assert!((s[0].exp() - 2.0).abs() < 1e-12);
        let s = smoothquant_init(&[3.0, 0.5], &[7.0, 2.0], 1.0).unwrap();
        assert!((s[0].exp() - 3.0).abs() < 1e-12 && (s[1].exp() - 0.5).abs() < 1e-12);
        let s = smoothquant_init(&[3.0], &[4.0], 0.0).unwrap();
        assert!((s[0].exp() - 0.25).abs() < 1e-12);
        assert!(smoothquant_init(&[1.0], &[1.0], 1.5).is_err());
    }

    #[test]
    fn unit_scales_leave_weights_unchanged() {
        let m = small();
        let f = fuse(&m, &PlacementPlan::all_legal(), &unit_scales(&m, &PlacementPlan::all_legal())).unwrap();
        assert_eq!(f, m);
    }

    #[test]
    fn random_scales_preserve_logits() {
        let m = small();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let plan = PlacementPlan::all_legal();
        let s = random_scales(&m, &plan, &mut rng, 0.1, 10.0);
        let f = fuse(&m, &plan, &s).unwrap();
        let tr = trials(&mut rng, 4);
        assert!(verify_equivalence(&m, &f, &tr).unwrap() <= 1e-5);
        assert_eq!(verify_equivalence(&m, &m, &tr).unwrap(), 0.0);

        let mut broken = f.clone();
        for v in broken.blocks[0].w_down.data_mut().iter_mut() {
            *v += 1e-3;
        }
        assert!(verify_equivalence(&m, &broken, &tr).unwrap() > 1e-5);
    }

    #[test]
    fn gate_down_is_rejected() {
        let m = small();
        let plan = PlacementPlan::of(&[Placement::GateDown]);
        let s = unit_scales(&m, &PlacementPlan::all_legal());
        assert!(matches!(fuse(&m, &plan, &s), Err(Error::Placement(_))));
        assert!(matches!(fuse(&m, &PlacementPlan::default(), &Scales::new()), Err(Error::Placement(_))));
    }

    #[test]
    fn up_down_identity_on_the_gated_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut rt = |shape: &[usize], lo: f64, hi: f64| {
            let n = shape.iter().product();
            Tensor::new(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
        };
        let x = rt(&[5, 4], -1.0, 1.0);
        let wg = rt(&[4, 6], -1.0, 1.0);
        let wu = rt(&[4, 6], -1.0, 1.0);
        let wd = rt(&[6, 3], -1.0, 1.0);
        let s = rt(&[6], 0.1, 10.0);
        let mlp = |wu: &Tensor, wd: &Tensor| {
            let mut g = Graph::new();
            let (xv, gv, uv, dv) = (g.constant(x.clone()), g.constant(wg.clone()), g.constant(wu.clone()), g.constant(wd.clone()));
            let a = g.matmul(xv, gv).unwrap();
            let a = g.silu(a);
            let u = g.matmul(xv, uv).unwrap();
            let h = g.mul(a, u).unwrap();
            let y = g.matmul(h, dv).unwrap();
            g.value(y).clone()
        };
        let mut wu2 = wu.clone();
        unscale_cols(&mut wu2, s.data());
        let mut wd2 = wd.clone();
        scale_rows(&mut wd2, s.data());
        let d = mlp(&wu, &wd).max_abs_diff(&mlp(&wu2, &wd2));
        assert!(d < 1e-12, "{d}");
    }

    #[test]
    fn graph_fusion_matches_direct_fusion() {
        let m = small();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let plan = PlacementPlan::all_legal();
        let s = random_scales(&m, &plan, &mut rng, 0.1, 10.0);
        let f = fuse(&m, &plan, &s).unwrap();
        let mut g = Graph::new();
        let base = BlockVars::constants(&mut g, &m.blocks[1]);
        let logs: BTreeMap<Placement, Var> = plan
            .placements
            .iter()
            .map(|&p| (p, g.constant(Tensor::vector(s[&scale_key(1, p)].log.clone()))))
            .collect();
        let fb = fuse_block_graph(&mut g, &base, &logs).unwrap();
        assert_eq!(g.value(fb.wv), &f.blocks[1].wv);
        assert_eq!(g.value(fb.w_up), &f.blocks[1].w_up);
        assert_eq!(g.value(fb.attn_norm), &f.blocks[1].attn_norm);
        assert_eq!(g.value(fb.wo), &f.blocks[1].wo);
    }

    #[test]
    fn fusing_twice_composes() {
        let m = small();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let plan = PlacementPlan::default();
        let vals = |s: Scales| -> BTreeMap<String, Vec<f64>> { s.into_iter().map(|(k, v)| (k, v.values())).collect() };
        let s1 = vals(random_scales(&m, &plan, &mut rng, 0.5, 2.0));
        let s2 = vals(random_scales(&m, &plan, &mut rng, 0.5, 2.0));
        let prod: BTreeMap<String, Vec<f64>> = s1
            .iter()
            .map(|(k, a)| (k.clone(), a.iter().zip(&s2[k]).map(|(x, y)| x * y).collect()))
            .collect();
        let twice = fuse_values(&fuse_values(&m, &plan, &s1).unwrap(), &plan, &s2).unwrap();
        let once = fuse_values(&m, &plan, &prod).unwrap();
        for ((_, a), (_, b)) in twice.named_tensors().iter().zip(once.named_tensors().iter()) {
            for (x, y) in a.data().iter().zip(b.data()) {
                let ulps = (x.to_bits() as i64 - y.to_bits() as i64).unsigned_abs();
                assert!(ulps <= 4 || x == y, "{x} vs {y}: {ulps} ulp");
            }
        }
    }
}
