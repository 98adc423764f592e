use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::config::ModelConfig;
use crate::error::{Error, Result};
use crate::numeric::Tensor;

/// One transformer block. Linear weights are `[in, out]` so `Y = X·W`.
#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub attn_norm: Tensor,
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub mlp_norm: Tensor,
    pub w_gate: Tensor,
    pub w_up: Tensor,
    pub w_down: Tensor,
}

pub const BLOCK_TENSORS: [&str; 9] = [
    "attn_norm", "wq", "wk", "wv", "wo", "mlp_norm", "w_gate", "w_up", "w_down",
];

impl Block {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        Some(match name {
            "attn_norm" => &self.attn_norm,
            "wq" => &self.wq,
            "wk" => &self.wk,
            "wv" => &self.wv,
            "wo" => &self.wo,
            "mlp_norm" => &self.mlp_norm,
            "w_gate" => &self.w_gate,
            "w_up" => &self.w_up,
            "w_down" => &self.w_down,
            _ => return None,
        })
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        Some(match name {
            "attn_norm" => &mut self.attn_norm,
            "wq" => &mut self.wq,
            "wk" => &mut self.wk,
            "wv" => &mut self.wv,
            "wo" => &mut self.wo,
            "mlp_norm" => &mut self.mlp_norm,
            "w_gate" => &mut self.w_gate,
            "w_up" => &mut self.w_up,
            "w_down" => &mut self.w_down,
            _ => return None,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub embed: Tensor,
    pub blocks: Vec<Block>,
    pub final_norm: Tensor,
    /// `[d_model, vocab]`; `None` when tied to the embedding.
    pub head: Option<Tensor>,
}

fn normal(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            std * z
        })
        .collect();
    Tensor::from_raw(shape.to_vec(), data)
}

impl Model {
    /// Random initialization. With a massive channel configured, norm
    /// weights start at the RMS the channel induces so normalized outputs
    /// are O(1).
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d, f, v) = (config.d_model, config.d_ff, config.vocab);
        let lin = 1.0 / (d as f64).sqrt();
        let out = lin / (2.0 * config.n_layers as f64).sqrt();
        let (norm_w, massive_w) = match config.massive {
            Some(m) => ((((m.value * m.value) + (d - 1) as f64) / d as f64).sqrt(), 0.1),
            None => (1.0, 1.0),
        };
        let massive = config.massive;
        let norm = || {
            let mut t = Tensor::full(&[d], norm_w);
            if let Some(m) = massive {
                t.data_mut()[m.channel] = massive_w;
            }
            t
        };
        let mut embed = normal(&mut rng, &[v, d], 1.0);
        let mut blocks = Vec::with_capacity(config.n_layers);
        for _ in 0..config.n_layers {
            blocks.push(Block {
                attn_norm: norm(),
                wq: normal(&mut rng, &[d, d], lin),
                wk: normal(&mut rng, &[d, d], lin),
                wv: normal(&mut rng, &[d, d], lin),
                wo: normal(&mut rng, &[d, d], out),
                mlp_norm: norm(),
                w_gate: normal(&mut rng, &[d, f], lin),
                w_up: normal(&mut rng, &[d, f], lin),
                w_down: normal(&mut rng, &[f, d], 1.0 / (f as f64).sqrt() / (2.0 * config.n_layers as f64).sqrt()),
            });
        }
        let head = if config.tied_head {
            None
        } else {
            Some(normal(&mut rng, &[d, v], lin))
        };
        let mut m = Self {
            config,
            embed: Tensor::zeros(&[1]),
            blocks,
            final_norm: norm(),
            head,
        };
        if let Some(mc) = m.config.massive {
            for r in 0..v {
                embed.data_mut()[r * d + mc.channel] = mc.value;
            }
        }
        m.embed = embed;
        Ok(m)
    }

    /// The output projection, materialized from the embedding when tied.
    pub fn head_weight(&self) -> Tensor {
        match &self.head {
            Some(h) => h.clone(),
            None => self.embed.transpose2().expect("embedding is 2-D"),
        }
    }

    /// Every tensor with a stable dotted name, in a fixed order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![("embed".to_string(), &self.embed)];
        for (i, b) in self.blocks.iter().enumerate() {
            for n in BLOCK_TENSORS {
                out.push((format!("block{i}.{n}"), b.get(n).expect("known name")));
            }
        }
        out.push(("final_norm".into(), &self.final_norm));
        if let Some(h) = &self.head {
            out.push(("head".into(), h));
        }
        out
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        match name {
            "embed" => Some(&mut self.embed),
            "final_norm" => Some(&mut self.final_norm),
            "head" => self.head.as_mut(),
            _ => {
                let rest = name.strip_prefix("block")?;
                let (idx, field) = rest.split_once('.')?;
                let i: usize = idx.parse().ok()?;
                self.blocks.get_mut(i)?.get_mut(field)
            }
        }
    }

    /// Rebuilds a model from named tensors, checking every shape.
    pub fn from_named(config: ModelConfig, mut tensors: std::collections::BTreeMap<String, Tensor>) -> Result<Self> {
        config.validate()?;
        let mut m = Self::init(config.clone(), 0)?;
        let names: Vec<(String, Vec<usize>)> = m
            .named_tensors()
            .into_iter()
            .map(|(n, t)| (n, t.shape().to_vec()))
            .collect();
        for (name, shape) in names {
            let t = tensors
                .remove(&name)
                .ok_or_else(|| Error::Format(format!("missing tensor {name}")))?;
            if t.shape() != shape.as_slice() {
                return Err(Error::Format(format!(
                    "tensor {name} has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
            *m.tensor_mut(&name).expect("known name") = t;
        }
        if let Some(extra) = tensors.keys().next() {
            return Err(Error::Format(format!("unexpected tensor {extra}")));
        }
        Ok(m)
    }

    pub fn check_tokens(&self, tokens: &[u32]) -> Result<()> {
        if let Some(&id) = tokens.iter().find(|&&t| t as usize >= self.config.vocab) {
            return Err(Error::Token {
                id,
                vocab: self.config.vocab,
            });
        }
        Ok(())
    }
}
