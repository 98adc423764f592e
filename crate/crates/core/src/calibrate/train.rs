use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{shuffled, CalibConfig, CalibMode, CalibReport, Calibrated, Curve, CurvePoint};
use crate::equalize::{fuse_block_graph, scale_key};
use crate::error::{Error, Result};
use crate::model::{
    forward::{block_forward, final_hidden},
    forward_graph, tap_list, BlockVars, Linear, LinearKind, Model, ModelVars, NoQuant,
    QConfig, QuantHook, Tap, TapKind,
};
use crate::numeric::{Graph, Tensor, Var};
use crate::optim::{clip_global_norm, cosine_lr, Adam};
use crate::quant::{self, Granularity, QuantScheme, ALPHA_FLOOR};

/// Fake quantization of a weight with learnable clip logits, built on the
/// graph so that gradients reach `theta_min` and `theta_max`. Groups must
/// be the whole tensor or output channels of an `[in, out]` matrix.
pub(crate) fn weight_fake_quant(
    g: &mut Graph,
    w: Var,
    scheme: &QuantScheme,
    theta_min: Var,
    theta_max: Var,
) -> Result<Var> {
    let axis = match scheme.granularity {
        Granularity::PerTensor => None,
        Granularity::PerChannel(1) if g.value(w).rank() == 2 => Some(0),
        Granularity::PerChannel(ax) => {
            return Err(Error::Config(format!(
                "learnable clipping supports output-channel groups only, got axis {ax}"
            )))
        }
    };
    let mn = g.reduce_min(w, axis)?;
    let mx = g.reduce_max(w, axis)?;
    let q = scheme.qmax();
    let gshape = g.value(mn).shape().to_vec();
    let floor = g.constant(Tensor::full(&gshape, ALPHA_FLOOR));
    if scheme.symmetric {
        let neg = g.scale(mn, -1.0);
        let am = g.maximum(mx, neg)?;
        let gm = g.sigmoid(theta_max);
        let hi = g.mul(gm, am)?;
        let lo = g.scale(hi, -1.0);
        let wc = g.clamp_var(w, lo, hi)?;
        let a = g.scale(hi, 2.0 / q);
        let a = g.maximum(a, floor)?;
        let b = g.constant(Tensor::full(&gshape, quant::symmetric_beta(scheme.bits)));
        g.fake_quant(wc, a, b, q)
    } else {
        let gl = g.sigmoid(theta_min);
        let gh = g.sigmoid(theta_max);
        let lo = g.mul(gl, mn)?;
        let hi = g.mul(gh, mx)?;
        let wc = g.clamp_var(w, lo, hi)?;
        let span = g.sub(hi, lo)?;
        let a = g.scale(span, 1.0 / q);
        let a = g.maximum(a, floor)?;
        let b = g.div(lo, a)?;
        g.fake_quant(wc, a, b, q)
    }
}

/// One trainable vector. `unit` is its natural scale: gradients are taken
/// with respect to `value / unit`, so clipping and step sizes are comparable
/// across parameters of very different magnitudes. Values are projected
/// onto `bounds` after every update.
#[derive(Clone, Debug)]
struct Param {
    name: String,
    value: Vec<f64>,
    lr: f64,
    unit: f64,
    bounds: (f64, f64),
}

const FREE: (f64, f64) = (f64::NEG_INFINITY, f64::INFINITY);

fn scale_name(key: &str) -> String {
    format!("scale/{key}")
}

fn clip_names(lin: Linear) -> (String, String) {
    (format!("clip_min/{}", lin.name()), format!("clip_max/{}", lin.name()))
}

fn range_names(tap: Tap) -> (String, String) {
    (format!("alpha/{tap}"), format!("beta/{tap}"))
}

/// Trainable parameters of `blocks`, plus the final taps when `final_taps`.
fn gather(cal: &Calibrated, qconfig: &QConfig, blocks: &[usize], final_taps: bool, cfg: &CalibConfig) -> Result<Vec<Param>> {
    let mut out = Vec::new();
    let n_layers = qconfig.n_layers();
    for &b in blocks {
        for &p in &cal.plan.placements {
            let key = scale_key(b, p);
            let sv = cal
                .scales
                .get(&key)
                .ok_or_else(|| Error::Placement(format!("no scale for {key}")))?;
            out.push(Param {
                name: scale_name(&key),
                value: sv.log.clone(),
                lr: cfg.lr_scale,
                unit: 1.0,
                bounds: FREE,
            });
        }
        for kind in LinearKind::BLOCK {
            let lin = Linear { block: Some(b), kind };
            let cp = cal.params.clip(lin)?;
            let (a, z) = clip_names(lin);
            out.push(Param {
                name: a,
                value: cp.theta_min.clone(),
                lr: cfg.lr_scale,
                unit: 1.0,
                bounds: FREE,
            });
            out.push(Param {
                name: z,
                value: cp.theta_max.clone(),
                lr: cfg.lr_scale,
                unit: 1.0,
                bounds: FREE,
            });
        }
    }
    if cfg.arl {
        let taps = tap_list(n_layers).into_iter().filter(|t| match t.block {
            Some(b) => blocks.contains(&b),
            None => final_taps && t.kind != TapKind::Logits,
        });
        for tap in taps {
            let rp = cal.params.range(tap)?;
            let q = quant::qmax(qconfig.act_bits(tap)) as f64;
            let (a, b) = range_names(tap);
            out.push(Param {
                name: a,
                value: rp.alpha.clone(),
                lr: cfg.lr_range,
                unit: rp.alpha[0],
                bounds: (ALPHA_FLOOR, f64::INFINITY),
            });
            out.push(Param {
                name: b,
                value: rp.beta.clone(),
                lr: cfg.lr_range,
                unit: q,
                // Real zero stays representable; masked attention
                // probabilities must dequantize to exactly zero.
                bounds: (-q, 0.0),
            });
        }
    }
    Ok(out)
}

fn store(cal: &mut Calibrated, params: &[Param]) -> Result<()> {
    for p in params {
        let (kind, key) = p.name.split_once('/').expect("param names carry a prefix");
        let missing = || Error::Config(format!("unknown parameter {}", p.name));
        match kind {
            "scale" => cal.scales.get_mut(key).ok_or_else(missing)?.log = p.value.clone(),
            "clip_min" => cal.params.clips.get_mut(key).ok_or_else(missing)?.theta_min = p.value.clone(),
            "clip_max" => cal.params.clips.get_mut(key).ok_or_else(missing)?.theta_max = p.value.clone(),
            "alpha" => cal.params.ranges.get_mut(key).ok_or_else(missing)?.alpha = p.value.clone(),
            "beta" => cal.params.ranges.get_mut(key).ok_or_else(missing)?.beta = p.value.clone(),
            _ => return Err(missing()),
        }
    }
    Ok(())
}

/// Fake quantization driven by graph variables where trainable and by the
/// current calibrated values elsewhere. Ranges keep fractional offsets.
struct TrainHook<'a> {
    qconfig: &'a QConfig,
    cal: &'a Calibrated,
    vars: &'a BTreeMap<String, Var>,
    trace: Vec<(Tap, Var)>,
}

impl QuantHook for TrainHook<'_> {
    fn act(&mut self, g: &mut Graph, tap: Tap, x: Var) -> Result<Var> {
        let (an, bn) = range_names(tap);
        let (a, b) = match (self.vars.get(&an), self.vars.get(&bn)) {
            (Some(&a), Some(&b)) => (a, b),
            _ => {
                let (a, b) = self.cal.params.range(tap)?.tensors(&[1]);
                (g.constant(a), g.constant(b))
            }
        };
        let q = quant::qmax(self.qconfig.act_bits(tap)) as f64;
        let y = g.fake_quant(x, a, b, q)?;
        self.trace.push((tap, y));
        Ok(y)
    }

    fn weight(&mut self, g: &mut Graph, lin: Linear, w: Var) -> Result<Var> {
        let scheme = self.qconfig.weight(lin);
        let (mn, mx) = clip_names(lin);
        let (tmin, tmax) = match (self.vars.get(&mn), self.vars.get(&mx)) {
            (Some(&a), Some(&b)) => (a, b),
            _ => {
                let cp = self.cal.params.clip(lin)?;
                (
                    g.constant(Tensor::vector(cp.theta_min.clone())),
                    g.constant(Tensor::vector(cp.theta_max.clone())),
                )
            }
        };
        weight_fake_quant(g, w, &scheme, tmin, tmax)
    }
}

/// Inputs of one optimization problem, one entry per sample.
enum Inputs<'a> {
    Tokens(&'a [Vec<u32>]),
    /// Block index and per-sample float block inputs `[seq, d]`.
    Hidden(usize, &'a [Vec<f64>]),
}

impl Inputs<'_> {
    fn len(&self) -> usize {
        match self {
            Inputs::Tokens(t) => t.len(),
            Inputs::Hidden(_, h) => h.len(),
        }
    }
}

struct Problem<'a> {
    model: &'a Model,
    qconfig: &'a QConfig,
    seq: usize,
    inputs: Inputs<'a>,
    targets: &'a [Vec<f64>],
}

fn concat<T: Copy>(rows: &[Vec<T>], idx: &[usize]) -> Vec<T> {
    idx.iter().flat_map(|&i| rows[i].iter().copied()).collect()
}

impl Problem<'_> {
    /// Builds the loss for samples `idx`. Returns the loss and the tap trace.
    fn build(
        &self,
        g: &mut Graph,
        cal: &Calibrated,
        params: &[Param],
        idx: &[usize],
    ) -> Result<(Var, Vec<(Tap, Var)>, Vec<Var>)> {
        let pvars: Vec<Var> = params
            .iter()
            .map(|p| g.param(p.name.clone(), Tensor::vector(p.value.clone())))
            .collect();
        let vars: BTreeMap<String, Var> = params.iter().map(|p| p.name.clone()).zip(pvars.iter().copied()).collect();
        let cfg = &self.model.config;
        let d = cfg.d_model;
        let fused_block = |g: &mut Graph, bi: usize| -> Result<BlockVars> {
            let base = BlockVars::constants(g, &self.model.blocks[bi]);
            let mut logs = BTreeMap::new();
            for &p in &cal.plan.placements {
                let key = scale_key(bi, p);
                let v = match vars.get(&scale_name(&key)) {
                    Some(&v) => v,
                    None => {
                        let sv = cal
                            .scales
                            .get(&key)
                            .ok_or_else(|| Error::Placement(format!("no scale for {key}")))?;
                        g.constant(Tensor::vector(sv.log.clone()))
                    }
                };
                logs.insert(p, v);
            }
            fuse_block_graph(g, &base, &logs)
        };
        let mut hook = TrainHook {
            qconfig: self.qconfig,
            cal,
            vars: &vars,
            trace: Vec::new(),
        };
        let target = Tensor::new(&[idx.len() * self.seq, d], concat(self.targets, idx))?;
        let out = match &self.inputs {
            Inputs::Tokens(samples) => {
                let tokens = concat(samples, idx);
                let embed = g.constant(self.model.embed.clone());
                let mut blocks = Vec::with_capacity(cfg.n_layers);
                for bi in 0..cfg.n_layers {
                    blocks.push(fused_block(g, bi)?);
                }
                let final_norm = g.constant(self.model.final_norm.clone());
                let mv = ModelVars {
                    embed,
                    blocks,
                    final_norm,
                    head: embed,
                };
                let mut h = g.embedding(embed, &tokens)?;
                for (bi, bv) in mv.blocks.iter().enumerate() {
                    h = block_forward(g, cfg, bv, bi, h, self.seq, &mut hook)?;
                }
                final_hidden(g, cfg, &mv, h, &mut hook)?
            }
            Inputs::Hidden(bi, xs) => {
                let x = g.constant(Tensor::new(&[idx.len() * self.seq, d], concat(xs, idx))?);
                let bv = fused_block(g, *bi)?;
                block_forward(g, cfg, &bv, *bi, x, self.seq, &mut hook)?
            }
        };
        let loss = g.mse(out, &target)?;
        Ok((loss, hook.trace, pvars))
    }

    fn eval(&self, cal: &Calibrated, params: &[Param], batch: usize) -> Result<f64> {
        let n = self.inputs.len();
        let idx: Vec<usize> = (0..n).collect();
        let mut total = 0.0;
        for chunk in idx.chunks(batch) {
            let mut g = Graph::new();
            let (loss, trace, _) = self.build(&mut g, cal, params, chunk)?;
            let l = g.value(loss).item();
            if !l.is_finite() {
                return Err(diagnose(&g, &trace, l));
            }
            total += l * chunk.len() as f64;
        }
        Ok(total / n as f64)
    }
}

fn diagnose(g: &Graph, trace: &[(Tap, Var)], loss: f64) -> Error {
    match trace.iter().find(|(_, v)| !g.value(*v).is_finite()) {
        Some((tap, _)) => Error::NonFinite(format!("calibration loss is {loss}; first non-finite activation at tap {tap}")),
        None => Error::NonFinite(format!("calibration loss is {loss}; every tap is finite")),
    }
}

/// Adam over `params` with cosine decay and global-norm clipping. Keeps
/// the parameters with the lowest held-out loss, including the start.
fn optimize(
    train: &Problem,
    eval: &Problem,
    cal: &Calibrated,
    mut params: Vec<Param>,
    cfg: &CalibConfig,
    block: Option<usize>,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<Param>, Curve, usize)> {
    let n = train.inputs.len();
    let per_epoch = n.div_ceil(cfg.batch);
    let total = per_epoch * cfg.epochs;
    let initial = eval.eval(cal, &params, cfg.batch)?;
    let mut best = initial;
    let mut best_params = params.clone();
    let mut adam = Adam::new();
    let mut points = Vec::with_capacity(cfg.epochs);
    let mut step = 0;
    for epoch in 1..=cfg.epochs {
        let order = shuffled(n, rng);
        let mut sum = 0.0;
        for chunk in order.chunks(cfg.batch) {
            let mut g = Graph::new();
            let (loss, trace, pvars) = train.build(&mut g, cal, &params, chunk)?;
            let l = g.value(loss).item();
            if !l.is_finite() {
                return Err(diagnose(&g, &trace, l));
            }
            sum += l * chunk.len() as f64;
            let grads = g.backward(loss)?;
            let mut gv: Vec<Vec<f64>> = pvars
                .iter()
                .zip(&params)
                .map(|(&v, p)| {
                    grads
                        .get(v)
                        .map_or_else(|| vec![0.0; p.value.len()], |t| t.data().iter().map(|x| x * p.unit).collect())
                })
                .collect();
            if cfg.grad_clip > 0.0 {
                clip_global_norm(gv.iter_mut().map(|v| v.as_mut_slice()), cfg.grad_clip);
            }
            let decay = cosine_lr(1.0, step, total);
            adam.begin_step();
            for (p, gr) in params.iter_mut().zip(&gv) {
                adam.update(&p.name, &mut p.value, gr, p.lr * p.unit * decay);
                for v in p.value.iter_mut() {
                    *v = v.clamp(p.bounds.0, p.bounds.1);
                }
            }
            step += 1;
        }
        let ev = eval.eval(cal, &params, cfg.batch)?;
        if ev < best {
            best = ev;
            best_params = params.clone();
        }
        points.push(CurvePoint {
            epoch,
            mean_train_loss: sum / n as f64,
            eval_loss: ev,
            best_eval_loss: best,
        });
    }
    let curve = Curve {
        block,
        initial_eval_loss: initial,
        points,
    };
    Ok((best_params, curve, step))
}

/// Float activations needed as calibration inputs and targets.
struct FloatTrace {
    /// `[block][sample]` residual stream entering each block.
    block_in: Vec<Vec<Vec<f64>>>,
    /// Residual stream after the last block.
    final_in: Vec<Vec<f64>>,
    /// Output of the final norm.
    head_in: Vec<Vec<f64>>,
}

struct Recorder {
    seen: BTreeMap<Tap, Tensor>,
}

impl QuantHook for Recorder {
    fn act(&mut self, g: &mut Graph, tap: Tap, x: Var) -> Result<Var> {
        if matches!(tap.kind, TapKind::AttnNormIn | TapKind::FinalNormIn | TapKind::HeadIn) {
            self.seen.insert(tap, g.value(x).clone());
        }
        Ok(x)
    }

    fn weight(&mut self, g: &mut Graph, lin: Linear, w: Var) -> Result<Var> {
        NoQuant.weight(g, lin, w)
    }
}

fn float_trace(model: &Model, samples: &[Vec<u32>], batch: usize) -> Result<FloatTrace> {
    let nl = model.config.n_layers;
    let mut tr = FloatTrace {
        block_in: vec![Vec::with_capacity(samples.len()); nl],
        final_in: Vec::with_capacity(samples.len()),
        head_in: Vec::with_capacity(samples.len()),
    };
    for chunk in samples.chunks(batch) {
        let tokens: Vec<u32> = chunk.iter().flatten().copied().collect();
        model.check_tokens(&tokens)?;
        let mut rec = Recorder { seen: BTreeMap::new() };
        let mut g = Graph::new();
        let vars = ModelVars::constants(&mut g, model);
        forward_graph(&mut g, &model.config, &vars, &tokens, chunk.len(), &mut rec)?;
        let per = |t: &Tensor| -> Vec<Vec<f64>> {
            t.data().chunks(t.len() / chunk.len()).map(<[f64]>::to_vec).collect()
        };
        for (b, dst) in tr.block_in.iter_mut().enumerate() {
            dst.extend(per(&rec.seen[&Tap::block(b, TapKind::AttnNormIn)]));
        }
        tr.final_in.extend(per(&rec.seen[&Tap::last(TapKind::FinalNormIn)]));
        tr.head_in.extend(per(&rec.seen[&Tap::last(TapKind::HeadIn)]));
    }
    Ok(tr)
}

fn seq_of(samples: &[Vec<u32>]) -> Result<usize> {
    let seq = samples.first().map_or(0, Vec::len);
    if seq == 0 || samples.iter().any(|s| s.len() != seq) {
        return Err(Error::Config("calibration samples must be non-empty and of equal length".into()));
    }
    Ok(seq)
}

/// Block by block, in order: each block sees float inputs and is trained
/// to reproduce its float output. Only that block's parameters move.
pub fn train_blockwise(
    model: &Model,
    init: &Calibrated,
    calib: &[Vec<u32>],
    eval: &[Vec<u32>],
    cfg: &CalibConfig,
) -> Result<(Calibrated, CalibReport)> {
    cfg.validate()?;
    let seq = seq_of(calib)?;
    seq_of(eval)?;
    let qconfig = init.qconfig(model.config.n_layers);
    let ct = float_trace(model, calib, cfg.batch)?;
    let et = float_trace(model, eval, cfg.batch)?;
    let mut cal = init.clone();
    let mut curves = Vec::new();
    let mut steps = 0;
    let nl = model.config.n_layers;
    for bi in 0..nl {
        fn target(t: &FloatTrace, bi: usize, nl: usize) -> &[Vec<f64>] {
            if bi + 1 < nl {
                &t.block_in[bi + 1]
            } else {
                &t.final_in
            }
        }
        let train = Problem {
            model,
            qconfig: &qconfig,
            seq,
            inputs: Inputs::Hidden(bi, &ct.block_in[bi]),
            targets: target(&ct, bi, nl),
        };
        let ev = Problem {
            model,
            qconfig: &qconfig,
            seq: eval[0].len(),
            inputs: Inputs::Hidden(bi, &et.block_in[bi]),
            targets: target(&et, bi, nl),
        };
        let params = gather(&cal, &qconfig, &[bi], false, cfg)?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(bi as u64 + 1));
        let (best, curve, s) = optimize(&train, &ev, &cal, params, cfg, Some(bi), &mut rng)?;
        store(&mut cal, &best)?;
        curves.push(curve);
        steps += s;
    }
    let config = CalibConfig {
        mode: CalibMode::Blockwise,
        ..cfg.clone()
    };
    Ok((cal, CalibReport { config, curves, steps }))
}

/// All blocks at once against the float output of the final norm.
pub fn train_end2end(
    model: &Model,
    init: &Calibrated,
    calib: &[Vec<u32>],
    eval: &[Vec<u32>],
    cfg: &CalibConfig,
) -> Result<(Calibrated, CalibReport)> {
    cfg.validate()?;
    let seq = seq_of(calib)?;
    seq_of(eval)?;
    let qconfig = init.qconfig(model.config.n_layers);
    let ct = float_trace(model, calib, cfg.batch)?;
    let et = float_trace(model, eval, cfg.batch)?;
    let train = Problem {
        model,
        qconfig: &qconfig,
        seq,
        inputs: Inputs::Tokens(calib),
        targets: &ct.head_in,
    };
    let ev = Problem {
        model,
        qconfig: &qconfig,
        seq: eval[0].len(),
        inputs: Inputs::Tokens(eval),
        targets: &et.head_in,
    };
    let blocks: Vec<usize> = (0..model.config.n_layers).collect();
    let params = gather(init, &qconfig, &blocks, true, cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (best, curve, steps) = optimize(&train, &ev, init, params, cfg, None, &mut rng)?;
    let mut cal = init.clone();
    store(&mut cal, &best)?;
    let config = CalibConfig {
        mode: CalibMode::End2end,
        ..cfg.clone()
    };
    Ok((cal, CalibReport { config, curves: vec![curve], steps }))
}

/// One-shot min-max ranges of a fused model, for diagnostics.
pub fn reestimate_ranges(
    fused: &Model,
    qconfig: &QConfig,
    samples: &[Vec<u32>],
    batch: usize,
) -> Result<BTreeMap<String, quant::RangeParams>> {
    let stats = super::collect_stats(fused, samples, batch)?;
    super::ranges_from_stats(qconfig, fused.config.n_layers, &stats)
}
