//! Activation statistics and learning of the quantization-facing
//! parameters: equalization scales, weight clipping and activation ranges.

pub mod ablate;
pub mod stats;
mod train;

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::equalize::{self, consumer_absmax, fuse, scale_key, Placement, PlacementPlan, ScaleVector, Scales};
use crate::error::{Error, Result};
use crate::model::{linear_list, tap_list, LinearKind, Model, QConfig, QuantParams, SchemeName, TapKind};
use crate::quant::{self, ClipParams, RangeParams};

pub use ablate::{ablate, AblationRow};
pub use stats::{collect_stats, coverage, merge_maps, ActStats, StatsMap};
pub use train::{reestimate_ranges, train_blockwise, train_end2end};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CalibMode {
    Blockwise,
    End2end,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibConfig {
    pub num_samples: usize,
    pub epochs: usize,
    pub seq_len: usize,
    pub batch: usize,
    /// Learning rate of the log-scales and clip logits.
    pub lr_scale: f64,
    /// Learning rate of the activation ranges, in units of the initial
    /// step size (alpha) and of the code range (beta).
    pub lr_range: f64,
    pub mode: CalibMode,
    pub arl: bool,
    pub seed: u64,
    /// Size of the fixed evaluation subset used for checkpointing.
    pub eval_samples: usize,
    /// Migration strength of the scale initialization.
    pub smooth_alpha: f64,
    pub clip_init: f64,
    pub grad_clip: f64,
}

impl Default for CalibConfig {
    fn default() -> Self {
        Self {
            num_samples: 128,
            epochs: 20,
            seq_len: 8,
            batch: 32,
            lr_scale: 5e-3,
            lr_range: 1e-2,
            mode: CalibMode::End2end,
            arl: true,
            seed: 0,
            eval_samples: 64,
            smooth_alpha: 0.5,
            clip_init: quant::THETA_INIT,
            grad_clip: 1.0,
        }
    }
}

impl CalibConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("calibration: {m}")));
        if self.num_samples == 0 {
            return bad("num_samples must be at least 1");
        }
        if self.seq_len < 2 {
            return bad("seq_len must be at least 2");
        }
        if self.batch == 0 || self.eval_samples == 0 {
            return bad("batch and eval_samples must be positive");
        }
        for (n, v) in [
            ("lr_scale", self.lr_scale),
            ("lr_range", self.lr_range),
            ("grad_clip", self.grad_clip),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(&format!("{n} must be finite and non-negative"));
            }
        }
        if !(0.0..=1.0).contains(&self.smooth_alpha) {
            return bad("smooth_alpha must lie in [0, 1]");
        }
        if !self.clip_init.is_finite() {
            return bad("clip_init must be finite");
        }
        Ok(())
    }
}

/// Everything learned for one model: the scales to fuse and the
/// quantization parameters of the fused model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Calibrated {
    pub scheme: SchemeName,
    /// Drops the per-channel exception of the down projections.
    #[serde(default)]
    pub down_per_tensor: bool,
    pub plan: PlacementPlan,
    pub scales: Scales,
    pub params: QuantParams,
}

impl Calibrated {
    /// The original model with every scale folded in.
    pub fn fused(&self, model: &Model) -> Result<Model> {
        fuse(model, &self.plan, &self.scales)
    }

    pub fn qconfig(&self, n_layers: usize) -> QConfig {
        let q = QConfig::new(self.scheme, n_layers);
        if self.down_per_tensor {
            q.with_down_per_tensor()
        } else {
            q
        }
    }

    /// The same starting point with one clip group per down projection.
    pub fn with_down_per_tensor(mut self) -> Self {
        self.down_per_tensor = true;
        for (k, cp) in self.params.clips.iter_mut() {
            if k.ends_with(LinearKind::Down.field()) {
                cp.theta_min.truncate(1);
                cp.theta_max.truncate(1);
            }
        }
        self
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub epoch: usize,
    pub mean_train_loss: f64,
    pub eval_loss: f64,
    pub best_eval_loss: f64,
}

/// Training curve of one optimization problem: a block in block-wise mode,
/// the whole model end to end.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Curve {
    pub block: Option<usize>,
    pub initial_eval_loss: f64,
    pub points: Vec<CurvePoint>,
}

impl Curve {
    pub fn best_eval_loss(&self) -> f64 {
        self.points
            .last()
            .map_or(self.initial_eval_loss, |p| p.best_eval_loss)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibReport {
    pub config: CalibConfig,
    pub curves: Vec<Curve>,
    pub steps: usize,
}

impl CalibReport {
    /// Final calibration loss: best held-out loss, summed over blocks in
    /// block-wise mode.
    pub fn final_loss(&self) -> f64 {
        self.curves.iter().map(Curve::best_eval_loss).sum()
    }
}

/// `n` random windows of `len` tokens.
pub fn sample_windows(tokens: &[u32], n: usize, len: usize, rng: &mut impl Rng) -> Result<Vec<Vec<u32>>> {
    if tokens.len() < len {
        return Err(Error::Config(format!(
            "corpus of {} tokens is shorter than one window of {len}",
            tokens.len()
        )));
    }
    Ok((0..n)
        .map(|_| {
            let s = rng.gen_range(0..=tokens.len() - len);
            tokens[s..s + len].to_vec()
        })
        .collect())
}

const EVAL_SEED: u64 = 0x5eed_e7a1;

/// Calibration windows for `cfg.seed` and the seed-independent evaluation
/// windows used for checkpoint selection.
pub fn calibration_sets(tokens: &[u32], cfg: &CalibConfig) -> Result<(Vec<Vec<u32>>, Vec<Vec<u32>>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let calib = sample_windows(tokens, cfg.num_samples, cfg.seq_len, &mut rng)?;
    let mut erng = ChaCha8Rng::seed_from_u64(EVAL_SEED);
    let eval = sample_windows(tokens, cfg.eval_samples, cfg.seq_len, &mut erng)?;
    Ok((calib, eval))
}

fn consumer_tap(p: Placement) -> TapKind {
    match p {
        Placement::NormQkv => TapKind::QkvIn,
        Placement::NormMlp => TapKind::GateUpIn,
        Placement::UpDown | Placement::GateDown => TapKind::DownIn,
        Placement::VO => TapKind::OIn,
    }
}

/// Scales from activation statistics of the unscaled model.
pub fn init_scales(model: &Model, plan: &PlacementPlan, stats: &StatsMap, alpha_hyper: f64) -> Result<Scales> {
    plan.validate()?;
    let mut out = Scales::new();
    for bi in 0..model.blocks.len() {
        for &p in &plan.placements {
            let tap = crate::model::Tap::block(bi, consumer_tap(p));
            let st = stats
                .get(&tap.name())
                .ok_or_else(|| Error::Config(format!("no statistics for {tap}")))?;
            let log = equalize::smoothquant_init(&st.channel_absmax, &consumer_absmax(model, bi, p), alpha_hyper)?;
            out.insert(scale_key(bi, p), ScaleVector { block: bi, placement: p, log });
        }
    }
    Ok(out)
}

/// Min-max ranges of every tap at the bitwidth `qconfig` assigns, widened
/// to include zero.
pub fn ranges_from_stats(qconfig: &QConfig, n_layers: usize, stats: &StatsMap) -> Result<BTreeMap<String, RangeParams>> {
    let mut out = BTreeMap::new();
    for tap in tap_list(n_layers) {
        let st = stats
            .get(&tap.name())
            .ok_or_else(|| Error::Config(format!("no statistics for {tap}")))?;
        out.insert(tap.name(), quant::range_from_minmax(st.min.min(0.0), st.max.max(0.0), qconfig.act_bits(tap))?);
    }
    Ok(out)
}

/// Starting point of calibration: scales from statistics of the original
/// model, ranges from statistics of the fused one, uniform clipping.
pub fn initialize(
    model: &Model,
    scheme: SchemeName,
    plan: &PlacementPlan,
    samples: &[Vec<u32>],
    cfg: &CalibConfig,
) -> Result<Calibrated> {
    cfg.validate()?;
    let n = model.config.n_layers;
    let qconfig = QConfig::new(scheme, n);
    let raw = collect_stats(model, samples, cfg.batch)?;
    let scales = init_scales(model, plan, &raw, cfg.smooth_alpha)?;
    let fused = fuse(model, plan, &scales)?;
    let stats = collect_stats(&fused, samples, cfg.batch)?;
    let ranges = ranges_from_stats(&qconfig, n, &stats)?;
    let mut clips = BTreeMap::new();
    for lin in linear_list(n) {
        let scheme = qconfig.weight(lin);
        let w = match lin.block {
            Some(b) => fused.blocks[b].get(lin.kind.field()).expect("block field").clone(),
            None => fused.head_weight(),
        };
        clips.insert(lin.name(), ClipParams::uniform(scheme.groups(w.shape()), cfg.clip_init));
    }
    Ok(Calibrated {
        scheme,
        down_per_tensor: false,
        plan: plan.clone(),
        scales,
        params: QuantParams { ranges, clips },
    })
}

/// Draws the calibration sets, initializes and trains in `cfg.mode`.
pub fn calibrate(
    model: &Model,
    scheme: SchemeName,
    plan: &PlacementPlan,
    tokens: &[u32],
    cfg: &CalibConfig,
) -> Result<(Calibrated, CalibReport)> {
    cfg.validate()?;
    let (calib, eval) = calibration_sets(tokens, cfg)?;
    let init = initialize(model, scheme, plan, &calib, cfg)?;
    match cfg.mode {
        CalibMode::Blockwise => train_blockwise(model, &init, &calib, &eval, cfg),
        CalibMode::End2end => train_end2end(model, &init, &calib, &eval, cfg),
    }
}

fn shuffled(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::equalize::verify_equivalence;
    use crate::model::ModelConfig;

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
        Model::init(cfg, 5).unwrap()
    }

    fn corpus() -> Vec<u32> {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        (0..2000).map(|_| rng.gen_range(0..32)).collect()
    }

    fn cfg(mode: CalibMode, epochs: usize) -> CalibConfig {
        CalibConfig {
            num_samples: 16,
            epochs,
            batch: 8,
            eval_samples: 8,
            mode,
            ..CalibConfig::default()
        }
    }

    fn run(mode: CalibMode, epochs: usize, arl: bool) -> (Calibrated, CalibReport, Calibrated) {
        let m = small();
        let c = CalibConfig { arl, ..cfg(mode, epochs) };
        let (calib, _) = calibration_sets(&corpus(), &c).unwrap();
        let init = initialize(&m, SchemeName::W8A8, &PlacementPlan::default(), &calib, &c).unwrap();
        let (cal, rep) = calibrate(&m, SchemeName::W8A8, &PlacementPlan::default(), &corpus(), &c).unwrap();
        (cal, rep, init)
    }

    #[test]
    fn zero_epochs_return_the_initialization() {
        for mode in [CalibMode::Blockwise, CalibMode::End2end] {
            let (cal, rep, init) = run(mode, 0, true);
            assert_eq!(cal, init);
            assert_eq!(rep.steps, 0);
        }
    }

    #[test]
    fn training_is_deterministic() {
        for mode in [CalibMode::Blockwise, CalibMode::End2end] {
            let (a, ra, _) = run(mode, 2, true);
            let (b, rb, _) = run(mode, 2, true);
            assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
            assert_eq!(ra, rb);
        }
    }

    #[test]
    fn ranges_move_only_with_arl() {
        for mode in [CalibMode::Blockwise, CalibMode::End2end] {
            let (cal, _, init) = run(mode, 3, false);
            assert_eq!(cal.params.ranges, init.params.ranges);
            assert_ne!(cal.scales, init.scales);
            let (cal, _, init) = run(mode, 3, true);
            assert_ne!(cal.params.ranges, init.params.ranges);
            let qc = cal.qconfig(2);
            for (tap, &bits) in qc.acts() {
                let rp = &cal.params.ranges[&tap.name()];
                let (lo, hi) = (rp.f_min(0), rp.f_max(0, bits));
                assert!(lo.is_finite() && hi.is_finite() && lo < hi, "{tap}: [{lo}, {hi}]");
            }
        }
    }

    #[test]
    fn best_loss_never_increases() {
        for mode in [CalibMode::Blockwise, CalibMode::End2end] {
            let (_, rep, _) = run(mode, 4, true);
            for c in &rep.curves {
                let mut prev = c.initial_eval_loss;
                for p in &c.points {
                    assert!(p.best_eval_loss <= prev);
                    assert!(p.best_eval_loss <= p.eval_loss);
                    prev = p.best_eval_loss;
                }
            }
        }
    }

    #[test]
    fn calibrated_float_model_stays_equivalent() {
        let m = small();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let trials: Vec<Vec<u32>> = (0..16).map(|_| (0..12).map(|_| rng.gen_range(0..32)).collect()).collect();
        for epochs in [0, 1, 3] {
            let (cal, _, _) = run(CalibMode::End2end, epochs, true);
            let dev = verify_equivalence(&m, &cal.fused(&m).unwrap(), &trials).unwrap();
            assert!(dev <= 1e-5, "epochs {epochs}: {dev}");
        }
    }

    #[test]
    fn non_finite_loss_names_the_tap() {
        let m = small();
        let c = CalibConfig { arl: false, ..cfg(CalibMode::End2end, 1) };
        let (calib, eval) = calibration_sets(&corpus(), &c).unwrap();
        let mut init = initialize(&m, SchemeName::W8A8, &PlacementPlan::default(), &calib, &c).unwrap();
        init.params.ranges.get_mut("block1.attn.k_out").unwrap().alpha[0] = f64::NAN;
        let err = train_end2end(&m, &init, &calib, &eval, &c).unwrap_err();
        assert_eq!(err.exit_code(), 3);
        assert!(err.to_string().contains("block1.attn.k_out"), "{err}");
    }

    #[test]
    fn config_validation_and_json() {
        assert!(CalibConfig { num_samples: 0, ..Default::default() }.validate().is_err());
        assert!(CalibConfig { smooth_alpha: 2.0, ..Default::default() }.validate().is_err());
        let c: CalibConfig = serde_json::from_str(r#"{"mode": "blockwise", "epochs": 3}"#).unwrap();
        assert_eq!((c.mode, c.epochs, c.num_samples), (CalibMode::Blockwise, 3, 128));
        assert!(serde_json::from_str::<CalibConfig>(r#"{"epoch": 3}"#).is_err());
    }

    #[test]
    fn ablation_rows() {
        let m = small();
        let toks = corpus();
        let one = ablate(&m, SchemeName::W8A8, &PlacementPlan::default(), &toks, &toks[..300], &[cfg(CalibMode::End2end, 1)]).unwrap();
        assert_eq!(one.len(), 1);
        let grid = [
            CalibConfig { num_samples: 16, ..cfg(CalibMode::End2end, 1) },
            CalibConfig { num_samples: 8, ..cfg(CalibMode::Blockwise, 1) },
            CalibConfig { num_samples: 8, ..cfg(CalibMode::End2end, 0) },
        ];
        let rows = ablate(&m, SchemeName::W8A8, &PlacementPlan::default(), &toks, &toks[..300], &grid).unwrap();
        let keys: Vec<_> = rows.iter().map(|r| (r.num_samples, r.epochs)).collect();
        assert_eq!(keys, [(8, 0), (8, 1), (16, 1)]);
        assert!(ablate(&m, SchemeName::W8A8, &PlacementPlan::default(), &toks, &toks, &[]).is_err());
        let table = ablate::format_table(&rows);
        assert_eq!(table.lines().count(), 4);
    }

    #[test]
    fn scaling_grid_shape() {
        let g = ablate::scaling_grid(&CalibConfig::default());
        assert_eq!(g.len(), 10);
        let pts: Vec<_> = g.iter().step_by(2).map(|c| (c.num_samples, c.epochs)).collect();
        assert_eq!(pts, [(128, 20), (128, 60), (128, 120), (256, 60), (1024, 60)]);
    }
}
