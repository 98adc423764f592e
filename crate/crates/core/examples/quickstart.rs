//! Pretrain (or load) the toy model, calibrate W8A8, compile it to integers
//! and compare perplexities.
//!
//!     cargo run --release --example quickstart -- [cache-dir]

use std::path::PathBuf;

use edgequant::calibrate::{calibrate, CalibConfig};
use edgequant::corpus;
use edgequant::equalize::PlacementPlan;
use edgequant::intengine::{compile, cost_report, load_quantized, perplexity_int, save_quantized, CostMode};
use edgequant::model::{perplexity_fakequant, perplexity_float, SchemeName};
use edgequant::toy;

fn main() -> edgequant::Result<()> {
    edgequant::tune_allocator();
    let dir = std::env::args().nth(1).map_or_else(std::env::temp_dir, PathBuf::from);
    let model = toy::base_model(&dir.join("toy_base.qfg"))?;
    let train = corpus::train_tokens();
    let held = corpus::heldout_tokens();

    let cfg = CalibConfig::default();
    let (cal, report) = calibrate(&model, SchemeName::W8A8, &PlacementPlan::default(), &train, &cfg)?;
    println!("calibrated in {} steps, final loss {:.4e}", report.steps, report.final_loss());

    let fused = cal.fused(&model)?;
    let q = compile(&model, &cal)?;
    let path = dir.join("toy_w8a8.qfg");
    save_quantized(&q, &path)?;
    let q = load_quantized(&path)?;

    println!("float      {:.4}", perplexity_float(&model, &held)?);
    println!("fake-quant {:.4}", perplexity_fakequant(&fused, &held, &cal.qconfig(2), &cal.params)?);
    println!("integer    {:.4}", perplexity_int(&q, &held)?);
    println!("{}", cost_report(&q, 256, CostMode::Prefill).to_text());
    Ok(())
}
