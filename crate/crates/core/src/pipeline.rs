//! The command-line subcommands as library calls. Each one reads its
//! inputs from a [`RunConfig`], writes its artifacts, and returns a JSON
//! report. Artifacts depend only on the inputs and seeds.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::calibrate::ablate::{format_table, scaling_grid};
use crate::calibrate::{ablate, calibrate, CalibConfig, CalibMode, CalibReport, Calibrated};
use crate::corpus;
use crate::equalize::PlacementPlan;
use crate::error::{Error, Result};
use crate::format::{load_model, save_model};
use crate::intengine::{
    compile, cost_report, generate_greedy, int_forward, load_quantized, perplexity_int, quantized_model_file,
    CostMode, QuantizedModel,
};
use crate::model::{
    argmax, forward_fakequant, forward_float, generate_greedy_fakequant, perplexity_fakequant, perplexity_float,
    pretrain, Model, PretrainConfig, SchemeName,
};
use crate::toy;

/// Everything a subcommand may read. Paths left unset fall back to the
/// defaults noted per field.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Float model file. Written by `pretrain`, read by the others.
    pub model: PathBuf,
    /// Training and calibration text (or `.tok` file); the bundled
    /// training corpus when unset.
    pub corpus: Option<PathBuf>,
    /// Evaluation text; the bundled held-out corpus when unset.
    pub eval_corpus: Option<PathBuf>,
    pub scheme: SchemeName,
    pub plan: PlacementPlan,
    pub calib: CalibConfig,
    pub pretrain: PretrainConfig,
    /// Calibration artifact. Written by `calibrate`, read by `export`,
    /// `eval` and `cost`.
    pub params: PathBuf,
    /// Integer model file. Written by `export`; `eval` and `cost` use it
    /// when present and compile from `params` otherwise.
    pub quantized: Option<PathBuf>,
    /// Output path of the subcommand's artifact.
    pub out: Option<PathBuf>,
    pub seed: u64,
    /// Folds seeded outlier channels into the loaded model.
    pub outlier_seed: Option<u64>,
    /// Modes evaluated by `eval`: any of `float`, `fakequant`, `int`.
    pub eval_modes: Vec<String>,
    /// Greedy tokens generated by `eval` for the parity check; 0 skips it.
    pub generate: usize,
    /// Sentence-final prediction items need this much context.
    pub min_context: usize,
    /// `(samples, epochs)` points for `ablate`; the standard grid when unset.
    pub grid: Option<Vec<(usize, usize)>>,
    pub cost_mode: CostMode,
    pub seq_len: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: "model.qfg".into(),
            corpus: None,
            eval_corpus: None,
            scheme: SchemeName::W8A8,
            plan: PlacementPlan::default(),
            calib: CalibConfig::default(),
            pretrain: PretrainConfig::default(),
            params: "calib.json".into(),
            quantized: None,
            out: None,
            seed: 0,
            outlier_seed: None,
            eval_modes: vec!["float".into(), "fakequant".into(), "int".into()],
            generate: 128,
            min_context: 16,
            grid: None,
            cost_mode: CostMode::Prefill,
            seq_len: 256,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let c: Self = serde_json::from_str(text).map_err(|e| Error::Config(format!("run config: {e}")))?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&read_to_string(path)?)
    }

    /// Copies the run seed into the pretraining and calibration settings.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.pretrain.seed = seed;
        self.calib.seed = seed;
        self
    }

    /// Applies a `--mode` flag: a calibration mode for `calibrate` and
    /// `ablate`, a cost mode for `cost`, a comma-separated mode list for
    /// `eval`.
    pub fn with_mode(mut self, command: &str, mode: &str) -> Result<Self> {
        let bad = || Error::Config(format!("mode {mode:?} does not apply to {command}"));
        match command {
            "calibrate" | "ablate" => {
                self.calib.mode = serde_json::from_value(json!(mode)).map_err(|_| bad())?;
            }
            "cost" => self.cost_mode = serde_json::from_value(json!(mode)).map_err(|_| bad())?,
            "eval" => self.eval_modes = mode.split(',').map(str::to_string).collect(),
            _ => return Err(bad()),
        }
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        self.calib.validate()?;
        self.plan.validate()?;
        for m in &self.eval_modes {
            if !["float", "fakequant", "int"].contains(&m.as_str()) {
                return Err(Error::Config(format!("unknown evaluation mode {m:?}")));
            }
        }
        Ok(())
    }

    fn train_tokens(&self) -> Result<Vec<u32>> {
        match &self.corpus {
            Some(p) => at(p, corpus::load(p)),
            None => Ok(corpus::train_tokens()),
        }
    }

    fn eval_tokens(&self) -> Result<Vec<u32>> {
        match &self.eval_corpus {
            Some(p) => at(p, corpus::load(p)),
            None => Ok(corpus::heldout_tokens()),
        }
    }

    fn out_or(&self, default: &Path) -> PathBuf {
        self.out.clone().unwrap_or_else(|| default.to_path_buf())
    }

    fn load_model(&self) -> Result<Model> {
        let m = at(&self.model, load_model(&self.model))?;
        match self.outlier_seed {
            Some(s) => toy::seeded_variant(&m, s),
            None => Ok(m),
        }
    }

    fn has(&self, mode: &str) -> bool {
        self.eval_modes.iter().any(|m| m == mode)
    }
}

/// Names the file in I/O errors.
fn at<T>(path: &Path, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::Io(e) => Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))),
        e => e,
    })
}

fn read_to_string(path: &Path) -> Result<String> {
    at(path, std::fs::read_to_string(path).map_err(Error::from))
}

fn write_json(path: &Path, v: &impl Serialize) -> Result<()> {
    let mut s = serde_json::to_string_pretty(v)?;
    s.push('\n');
    std::fs::write(path, s)?;
    Ok(())
}

/// Calibration artifact: the learned parameters and the training report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibArtifact {
    pub calibrated: Calibrated,
    pub report: CalibReport,
}

pub fn load_calibrated(path: &Path) -> Result<Calibrated> {
    let text = read_to_string(path)?;
    let a: CalibArtifact = serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    Ok(a.calibrated)
}

pub fn cmd_pretrain(cfg: &RunConfig) -> Result<Value> {
    cfg.validate()?;
    let train = cfg.train_tokens()?;
    let eval = cfg.eval_tokens()?;
    let untrained = Model::init(cfg.pretrain.model.clone(), cfg.pretrain.seed)?;
    let (model, report) = pretrain(&cfg.pretrain, &train)?;
    let out = cfg.out_or(&cfg.model);
    save_model(&model, &out)?;
    Ok(json!({
        "model": out,
        "vocab": model.config.vocab,
        "final_train_perplexity": report.final_train_perplexity,
        "initial_loss": report.initial_loss,
        "final_loss": report.final_loss,
        "untrained_eval_perplexity": perplexity_float(&untrained, &eval)?,
        "eval_perplexity": perplexity_float(&model, &eval)?,
    }))
}

pub fn cmd_calibrate(cfg: &RunConfig) -> Result<Value> {
    cfg.validate()?;
    let model = cfg.load_model()?;
    let (calibrated, report) = calibrate(&model, cfg.scheme, &cfg.plan, &cfg.train_tokens()?, &cfg.calib)?;
    let out = cfg.out_or(&cfg.params);
    let final_loss = report.final_loss();
    let curves = serde_json::to_value(&report.curves)?;
    write_json(&out, &CalibArtifact { calibrated, report })?;
    Ok(json!({
        "params": out,
        "scheme": cfg.scheme,
        "mode": cfg.calib.mode,
        "final_loss": final_loss,
        "curves": curves,
    }))
}

/// Compiles and writes the integer model, then reads it back and checks
/// that a second export is byte-identical.
pub fn cmd_export(cfg: &RunConfig) -> Result<Value> {
    cfg.validate()?;
    let model = cfg.load_model()?;
    let cal = load_calibrated(&cfg.params)?;
    let q = compile(&model, &cal)?;
    let out = cfg.out_or(cfg.quantized.as_deref().unwrap_or(Path::new("model.int.qfg")));
    let bytes = quantized_model_file(&q)?.to_bytes()?;
    std::fs::write(&out, &bytes)?;
    let back = load_quantized(&out)?;
    if quantized_model_file(&back)?.to_bytes()? != bytes {
        return Err(Error::Format("re-exported model differs from the written file".into()));
    }
    let weight_bytes: usize = q.linears().iter().map(|l| (l.codes.len() * l.bits as usize).div_ceil(8)).sum();
    Ok(json!({
        "quantized": out,
        "scheme": q.scheme,
        "file_bytes": bytes.len(),
        "weight_code_bytes": weight_bytes,
    }))
}

fn quantized(cfg: &RunConfig, model: &Model, cal: Option<&Calibrated>) -> Result<QuantizedModel> {
    match (&cfg.quantized, cal) {
        (Some(p), _) if p.exists() => at(p, load_quantized(p)),
        (_, Some(cal)) => compile(model, cal),
        _ => Err(Error::Config("no quantized model or calibration parameters given".into())),
    }
}

/// Fraction of sentence-final characters predicted by `logits_fn`.
fn last_token_accuracy(items: &[(Vec<u32>, u32)], mut logits_fn: impl FnMut(&[u32]) -> Result<Vec<f64>>) -> Result<f64> {
    if items.is_empty() {
        return Err(Error::Config("no sentence-final items in the evaluation corpus".into()));
    }
    let mut hit = 0;
    for (ctx, t) in items {
        let last = logits_fn(ctx)?;
        hit += (argmax(&last) as u32 == *t) as usize;
    }
    Ok(hit as f64 / items.len() as f64)
}

fn last_row(t: crate::numeric::Tensor) -> Vec<f64> {
    t.row(t.rows() - 1).to_vec()
}

/// Metrics JSON:
///
/// ```text
/// { "scheme": str,
///   "perplexity": { "float"?: num, "fakequant"?: num, "int"?: num },
///   "last_token_accuracy": { same keys },
///   "parity"?: { "perplexity_rel_diff": num, "greedy_tokens": int,
///                "greedy_agreement": num } }
/// ```
pub fn cmd_eval(cfg: &RunConfig) -> Result<Value> {
    cfg.validate()?;
    let model = cfg.load_model()?;
    let eval = cfg.eval_tokens()?;
    let max = model.config.max_seq;
    let items: Vec<(Vec<u32>, u32)> = corpus::last_token_items(&eval, cfg.min_context)
        .into_iter()
        .map(|(c, t)| (c[c.len().saturating_sub(max)..].to_vec(), t))
        .collect();
    let needs_cal = cfg.has("fakequant") || (cfg.has("int") && !cfg.quantized.as_ref().is_some_and(|p| p.exists()));
    let cal = if needs_cal { Some(load_calibrated(&cfg.params)?) } else { None };
    let mut ppl = serde_json::Map::new();
    let mut acc = serde_json::Map::new();
    if cfg.has("float") {
        ppl.insert("float".into(), json!(perplexity_float(&model, &eval)?));
        acc.insert(
            "float".into(),
            json!(last_token_accuracy(&items, |c| Ok(last_row(forward_float(&model, c, 1)?)))?),
        );
    }
    let fq = match &cal {
        Some(cal) if cfg.has("fakequant") => Some((cal.fused(&model)?, cal.qconfig(model.config.n_layers), cal)),
        _ => None,
    };
    if let Some((fused, qc, cal)) = &fq {
        ppl.insert("fakequant".into(), json!(perplexity_fakequant(fused, &eval, qc, &cal.params)?));
        acc.insert(
            "fakequant".into(),
            json!(last_token_accuracy(&items, |c| Ok(last_row(forward_fakequant(
                fused,
                c,
                1,
                qc,
                &cal.params
            )?)))?),
        );
    }
    let mut report = json!({ "scheme": cal.as_ref().map_or(cfg.scheme, |c| c.scheme) });
    if cfg.has("int") {
        let q = quantized(cfg, &model, cal.as_ref())?;
        report["scheme"] = json!(q.scheme);
        let pi = perplexity_int(&q, &eval)?;
        ppl.insert("int".into(), json!(pi));
        acc.insert(
            "int".into(),
            json!(last_token_accuracy(&items, |c| Ok(last_row(int_forward(&q, c, 1, false)?.logits)))?),
        );
        if let Some((fused, qc, cal)) = &fq {
            let pf = ppl["fakequant"].as_f64().expect("number");
            let mut parity = json!({ "perplexity_rel_diff": (pi - pf).abs() / pf });
            if cfg.generate > 0 {
                let prompt = &eval[..cfg.min_context.clamp(1, eval.len())];
                let n = cfg.generate.min(max - prompt.len());
                let gi = generate_greedy(&q, prompt, n)?;
                let gf = generate_greedy_fakequant(fused, qc, &cal.params, prompt, n)?;
                let same = gi.iter().zip(&gf).filter(|(a, b)| a == b).count();
                parity["greedy_tokens"] = json!(n);
                parity["greedy_agreement"] = json!(same as f64 / n.max(1) as f64);
            }
            report["parity"] = parity;
        }
    }
    report["perplexity"] = Value::Object(ppl);
    report["last_token_accuracy"] = Value::Object(acc);
    if let Some(out) = &cfg.out {
        write_json(out, &report)?;
    }
    Ok(report)
}

pub fn cmd_ablate(cfg: &RunConfig) -> Result<Value> {
    cfg.validate()?;
    let model = cfg.load_model()?;
    let grid: Vec<CalibConfig> = match &cfg.grid {
        Some(points) => points
            .iter()
            .flat_map(|&(num_samples, epochs)| {
                [CalibMode::Blockwise, CalibMode::End2end].map(|mode| CalibConfig {
                    num_samples,
                    epochs,
                    mode,
                    ..cfg.calib.clone()
                })
            })
            .collect(),
        None => scaling_grid(&cfg.calib),
    };
    let rows = ablate(&model, cfg.scheme, &cfg.plan, &cfg.train_tokens()?, &cfg.eval_tokens()?, &grid)?;
    let report = json!({ "scheme": cfg.scheme, "rows": rows, "table": format_table(&rows) });
    if let Some(out) = &cfg.out {
        write_json(out, &report)?;
    }
    Ok(report)
}

pub fn cmd_cost(cfg: &RunConfig) -> Result<Value> {
    cfg.validate()?;
    let q = match &cfg.quantized {
        Some(p) if p.exists() => at(p, load_quantized(p))?,
        _ => compile(&cfg.load_model()?, &load_calibrated(&cfg.params)?)?,
    };
    let report = cost_report(&q, cfg.seq_len, cfg.cost_mode);
    if let Some(out) = &cfg.out {
        write_json(out, &report)?;
    }
    Ok(serde_json::to_value(&report)?)
}
