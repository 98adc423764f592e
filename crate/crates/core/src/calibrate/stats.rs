use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::model::{forward_graph, Linear, Model, ModelVars, QuantHook, Tap};
use crate::numeric::{Graph, Var};

/// Running statistics of one activation tap.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActStats {
    pub min: f64,
    pub max: f64,
    pub absmax: f64,
    /// Per-channel absolute maximum over the last axis.
    pub channel_absmax: Vec<f64>,
    pub count: u64,
}

impl ActStats {
    pub fn empty(channels: usize) -> Self {
        Self {
            min: f64::INFINITY,
            max: f64::NEG_INFINITY,
            absmax: 0.0,
            channel_absmax: vec![0.0; channels],
            count: 0,
        }
    }

    pub fn observe(&mut self, data: &[f64], channels: usize) {
        if self.channel_absmax.len() != channels {
            self.channel_absmax = vec![0.0; channels];
        }
        for row in data.chunks(channels) {
            for (c, &v) in row.iter().enumerate() {
                self.min = self.min.min(v);
                self.max = self.max.max(v);
                let a = v.abs();
                self.absmax = self.absmax.max(a);
                if a > self.channel_absmax[c] {
                    self.channel_absmax[c] = a;
                }
            }
        }
        self.count += data.len() as u64;
    }

    /// Associative, commutative merge.
    pub fn merge(&self, other: &ActStats) -> ActStats {
        if self.count == 0 {
            return other.clone();
        }
        if other.count == 0 {
            return self.clone();
        }
        ActStats {
            min: self.min.min(other.min),
            max: self.max.max(other.max),
            absmax: self.absmax.max(other.absmax),
            channel_absmax: self
                .channel_absmax
                .iter()
                .zip(&other.channel_absmax)
                .map(|(a, b)| a.max(*b))
                .collect(),
            count: self.count + other.count,
        }
    }
}

pub type StatsMap = BTreeMap<String, ActStats>;

pub fn merge_maps(a: &StatsMap, b: &StatsMap) -> StatsMap {
    let mut out = a.clone();
    for (k, v) in b {
        let merged = match out.get(k) {
            Some(x) => x.merge(v),
            None => v.clone(),
        };
        out.insert(k.clone(), merged);
    }
    out
}

struct StatsHook {
    stats: StatsMap,
}

impl QuantHook for StatsHook {
    fn act(&mut self, g: &mut Graph, tap: Tap, x: Var) -> Result<Var> {
        let t = g.value(x);
        let ch = t.last_dim();
        let e = self
            .stats
            .entry(tap.name())
            .or_insert_with(|| ActStats::empty(ch));
        e.observe(t.data(), ch);
        Ok(x)
    }

    fn weight(&mut self, _: &mut Graph, _: Linear, w: Var) -> Result<Var> {
        Ok(w)
    }
}

/// Exact per-tap statistics of the float model over `samples`, run
/// `batch` sequences at a time. Samples in one batch must share a length.
pub fn collect_stats(model: &Model, samples: &[Vec<u32>], batch: usize) -> Result<StatsMap> {
    let mut hook = StatsHook {
        stats: StatsMap::new(),
    };
    for chunk in samples.chunks(batch.max(1)) {
        let tokens: Vec<u32> = chunk.iter().flatten().copied().collect();
        model.check_tokens(&tokens)?;
        let mut g = Graph::new();
        let vars = ModelVars::constants(&mut g, model);
        forward_graph(&mut g, &model.config, &vars, &tokens, chunk.len(), &mut hook)?;
    }
    Ok(hook.stats)
}

struct CoverageHook<'a> {
    stats: &'a StatsMap,
    inside: u64,
    total: u64,
}

impl QuantHook for CoverageHook<'_> {
    fn act(&mut self, g: &mut Graph, tap: Tap, x: Var) -> Result<Var> {
        if let Some(s) = self.stats.get(&tap.name()) {
            for &v in g.value(x).data() {
                self.total += 1;
                if v >= s.min && v <= s.max {
                    self.inside += 1;
                }
            }
        }
        Ok(x)
    }

    fn weight(&mut self, _: &mut Graph, _: Linear, w: Var) -> Result<Var> {
        Ok(w)
    }
}

/// Fraction of activations on fresh `samples` that fall inside the
/// recorded `[min, max]` of their tap.
pub fn coverage(model: &Model, stats: &StatsMap, samples: &[Vec<u32>], batch: usize) -> Result<f64> {
    let mut hook = CoverageHook {
        stats,
        inside: 0,
        total: 0,
    };
    for chunk in samples.chunks(batch.max(1)) {
        let tokens: Vec<u32> = chunk.iter().flatten().copied().collect();
        let mut g = Graph::new();
        let vars = ModelVars::constants(&mut g, model);
        forward_graph(&mut g, &model.config, &vars, &tokens, chunk.len(), &mut hook)?;
    }
    Ok(hook.inside as f64 / hook.total.max(1) as f64)
}
