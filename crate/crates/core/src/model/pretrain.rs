use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::forward::{forward_graph, BlockVars, ModelVars, NoQuant};
use super::weights::{Model, BLOCK_TENSORS};
use crate::error::{Error, Result};
use crate::numeric::Graph;
use crate::optim::{clip_global_norm, cosine_lr, Adam};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub model: ModelConfig,
    pub steps: usize,
    pub batch: usize,
    pub seq: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            steps: 600,
            batch: 16,
            seq: 64,
            lr: 3e-3,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub initial_loss: f64,
    pub final_loss: f64,
    /// Exponential of the mean loss over the last tenth of the steps.
    pub final_train_perplexity: f64,
    pub losses: Vec<f64>,
}

/// Registers every model tensor as a trainable graph parameter.
fn param_vars(g: &mut Graph, m: &Model) -> Result<ModelVars> {
    let embed = g.param("embed", m.embed.clone());
    let mut blocks = Vec::new();
    for (i, b) in m.blocks.iter().enumerate() {
        let mut p = |n: &str| g.param(format!("block{i}.{n}"), b.get(n).expect("field").clone());
        blocks.push(BlockVars {
            attn_norm: p(BLOCK_TENSORS[0]),
            wq: p(BLOCK_TENSORS[1]),
            wk: p(BLOCK_TENSORS[2]),
            wv: p(BLOCK_TENSORS[3]),
            wo: p(BLOCK_TENSORS[4]),
            mlp_norm: p(BLOCK_TENSORS[5]),
            w_gate: p(BLOCK_TENSORS[6]),
            w_up: p(BLOCK_TENSORS[7]),
            w_down: p(BLOCK_TENSORS[8]),
        });
    }
    let final_norm = g.param("final_norm", m.final_norm.clone());
    let head = match &m.head {
        Some(h) => g.param("head", h.clone()),
        None => g.transpose(embed)?,
    };
    Ok(ModelVars {
        embed,
        blocks,
        final_norm,
        head,
    })
}

/// Next-token training on random windows of `tokens`. A configured massive
/// channel is held fixed in the embedding.
pub fn pretrain(cfg: &PretrainConfig, tokens: &[u32]) -> Result<(Model, PretrainReport)> {
    if tokens.len() < cfg.seq + 2 {
        return Err(Error::Config(format!(
            "corpus of {} tokens is shorter than one training window",
            tokens.len()
        )));
    }
    if cfg.batch == 0 || cfg.seq == 0 {
        return Err(Error::Config("batch and seq must be positive".into()));
    }
    let mut model = Model::init(cfg.model.clone(), cfg.seed)?;
    model.check_tokens(tokens)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
    let mut opt = Adam::new();
    let mut losses = Vec::with_capacity(cfg.steps);
    let d = cfg.model.d_model;
    for step in 0..cfg.steps {
        let mut inp = Vec::with_capacity(cfg.batch * cfg.seq);
        let mut tgt = Vec::with_capacity(cfg.batch * cfg.seq);
        for _ in 0..cfg.batch {
            let s = rng.gen_range(0..tokens.len() - cfg.seq - 1);
            inp.extend_from_slice(&tokens[s..s + cfg.seq]);
            tgt.extend_from_slice(&tokens[s + 1..s + cfg.seq + 1]);
        }
        let mut g = Graph::new();
        let vars = param_vars(&mut g, &model)?;
        let logits = forward_graph(&mut g, &model.config, &vars, &inp, cfg.batch, &mut NoQuant)?;
        let loss = g.cross_entropy(logits, &tgt)?;
        losses.push(g.value(loss).item());
        let mut grads = g.backward(loss)?.by_name();
        if let Some(mc) = model.config.massive {
            let e = grads.get_mut("embed").expect("embed grad");
            for r in 0..model.config.vocab {
                e.data_mut()[r * d + mc.channel] = 0.0;
            }
        }
        clip_global_norm(grads.values_mut().map(|t| t.data_mut()), 1.0);
        opt.begin_step();
        let lr = cosine_lr(cfg.lr, step, cfg.steps);
        for (name, grad) in &grads {
            let p = model.tensor_mut(name).expect("named parameter");
            opt.update(name, p.data_mut(), grad.data(), lr);
        }
    }
    let tail = (cfg.steps / 10).max(1).min(losses.len().max(1));
    let final_train_perplexity = if losses.is_empty() {
        f64::NAN
    } else {
        (losses[losses.len() - tail..].iter().sum::<f64>() / tail as f64).exp()
    };
    let report = PretrainReport {
        initial_loss: losses.first().copied().unwrap_or(f64::NAN),
        final_loss: losses.last().copied().unwrap_or(f64::NAN),
        final_train_perplexity,
        losses,
    };
    Ok((model, report))
}
