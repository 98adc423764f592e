//! The toy model used by experiments: a pretrained base plus per-seed
//! variants with activation outlier channels.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::corpus;
use crate::equalize::{fuse, outlier_scales, PlacementPlan};
use crate::error::Result;
use crate::format::{load_model, save_model};
use crate::model::{pretrain, Model, PretrainConfig};

pub const OUTLIER_CHANNELS: usize = 4;
pub const OUTLIER_FACTOR: f64 = 20.0;
pub const OUTLIER_JITTER: f64 = 2.0;

/// The base model pretrained with default settings on the bundled corpus,
/// loaded from `cache` when present and written there otherwise.
pub fn base_model(cache: &Path) -> Result<Model> {
    if cache.exists() {
        if let Ok(m) = load_model(cache) {
            return Ok(m);
        }
    }
    let (m, _) = pretrain(&PretrainConfig::default(), &corpus::train_tokens())?;
    if let Some(dir) = cache.parent() {
        std::fs::create_dir_all(dir)?;
    }
    save_model(&m, cache)?;
    Ok(m)
}

/// `base` with per-seed outlier channels folded into every equalization
/// point. The float function is unchanged; the activations feeding each
/// linear layer get a few channels `OUTLIER_FACTOR` times larger.
pub fn seeded_variant(base: &Model, seed: u64) -> Result<Model> {
    let plan = PlacementPlan::all_legal();
    let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
    let s = outlier_scales(base, &plan, &mut rng, OUTLIER_CHANNELS, OUTLIER_FACTOR, OUTLIER_JITTER);
    fuse(base, &plan, &s)
}
