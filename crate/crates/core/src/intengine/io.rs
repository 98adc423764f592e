//! Compiled models in the `QFG1` container.
//!
//! The header meta holds the model structure and the activation scales
//! and zero-points. Payloads hold the embedding codes, norm weights, and
//! per linear layer the weight codes (nibble-packed at 4 bits), biases,
//! weight scales, zero-points and requantization descriptors.

use std::collections::BTreeMap;

use super::compile::{QLinear, QuantizedModel};
use super::requant::FixedPointRequant;
use crate::error::{Error, Result};
use crate::format::{Entry, ModelFile, TensorData};
use crate::model::{Tap, TapKind};

pub const QUANTIZED_KIND: &str = "quantized";

fn codes_data(codes: &[u16], bits: u32) -> TensorData {
    match bits {
        0..=4 => TensorData::U4(codes.iter().map(|&c| c as u8).collect()),
        5..=8 => TensorData::U8(codes.iter().map(|&c| c as u8).collect()),
        _ => TensorData::U16(codes.to_vec()),
    }
}

fn codes_from(e: &Entry) -> Result<Vec<u16>> {
    Ok(match &e.data {
        TensorData::U4(v) | TensorData::U8(v) => v.iter().map(|&c| c as u16).collect(),
        TensorData::U16(v) => v.clone(),
        _ => return Err(Error::Format(format!("tensor {} does not hold codes", e.name))),
    })
}

fn entry(name: String, shape: Vec<usize>, data: TensorData) -> Entry {
    Entry { name, shape, data }
}

fn linear_entries(l: &QLinear, out: &mut Vec<Entry>) {
    out.push(entry(format!("{}.codes", l.name), vec![l.k, l.n], codes_data(&l.codes, l.bits)));
    out.push(entry(format!("{}.bias", l.name), vec![l.n], TensorData::I32(l.bias.clone())));
    let g = l.alpha.len();
    out.push(entry(format!("{}.alpha", l.name), vec![g], TensorData::F64(l.alpha.clone())));
    out.push(entry(format!("{}.zero", l.name), vec![g], TensorData::I32(l.zero.clone())));
    let rq = l.requant.iter().flat_map(|r| [r.multiplier, r.shift]).collect();
    out.push(entry(format!("{}.requant", l.name), vec![g, 2], TensorData::I32(rq)));
}

pub fn quantized_model_file(q: &QuantizedModel) -> Result<ModelFile> {
    q.validate()?;
    let cfg = &q.config;
    let mut tensors = Vec::new();
    let embed_bits = q.act(Tap::block(0, TapKind::AttnNormIn)).bits;
    tensors.push(entry("embed".into(), vec![cfg.vocab, cfg.d_model], codes_data(&q.embed, embed_bits)));
    for (bi, b) in q.blocks.iter().enumerate() {
        tensors.push(entry(format!("block{bi}.attn_norm"), vec![cfg.d_model], TensorData::F64(b.attn_norm.clone())));
        tensors.push(entry(format!("block{bi}.mlp_norm"), vec![cfg.d_model], TensorData::F64(b.mlp_norm.clone())));
        for l in b.linears() {
            linear_entries(l, &mut tensors);
        }
    }
    tensors.push(entry("final_norm".into(), vec![cfg.d_model], TensorData::F64(q.final_norm.clone())));
    linear_entries(&q.head, &mut tensors);
    Ok(ModelFile {
        kind: QUANTIZED_KIND.into(),
        meta: serde_json::to_value(q)?,
        tensors,
    })
}

struct Tensors<'a>(BTreeMap<&'a str, &'a Entry>);

impl<'a> Tensors<'a> {
    fn take(&mut self, name: &str) -> Result<&'a Entry> {
        self.0
            .remove(name)
            .ok_or_else(|| Error::Format(format!("missing tensor {name}")))
    }

    fn floats(&mut self, name: &str) -> Result<Vec<f64>> {
        match &self.take(name)?.data {
            TensorData::F64(v) => Ok(v.clone()),
            _ => Err(Error::Format(format!("tensor {name} is not f64"))),
        }
    }

    fn fill(&mut self, l: &mut QLinear) -> Result<()> {
        let c = self.take(&format!("{}.codes", l.name))?;
        if c.shape != [l.k, l.n] {
            return Err(Error::Format(format!("tensor {} has shape {:?}", c.name, c.shape)));
        }
        l.codes = codes_from(c)?;
        l.bias = self.ints(&format!("{}.bias", l.name))?;
        l.alpha = self.floats(&format!("{}.alpha", l.name))?;
        l.zero = self.ints(&format!("{}.zero", l.name))?;
        let rq = self.ints(&format!("{}.requant", l.name))?;
        l.requant = rq
            .chunks_exact(2)
            .map(|p| FixedPointRequant { multiplier: p[0], shift: p[1] })
            .collect();
        Ok(())
    }

    fn ints(&mut self, name: &str) -> Result<Vec<i32>> {
        match &self.take(name)?.data {
            TensorData::I32(v) => Ok(v.clone()),
            _ => Err(Error::Format(format!("tensor {name} is not i32"))),
        }
    }
}

pub fn quantized_from_file(f: &ModelFile) -> Result<QuantizedModel> {
    if f.kind != QUANTIZED_KIND {
        return Err(Error::Format(format!("expected a quantized model file, found kind {:?}", f.kind)));
    }
    let mut q: QuantizedModel = serde_json::from_value(f.meta.clone())?;
    let mut t = Tensors(f.tensors.iter().map(|e| (e.name.as_str(), e)).collect());
    q.embed = codes_from(t.take("embed")?)?;
    for (bi, b) in q.blocks.iter_mut().enumerate() {
        b.attn_norm = t.floats(&format!("block{bi}.attn_norm"))?;
        b.mlp_norm = t.floats(&format!("block{bi}.mlp_norm"))?;
        for l in b.linears_mut() {
            t.fill(l)?;
        }
    }
    q.final_norm = t.floats("final_norm")?;
    t.fill(&mut q.head)?;
    if let Some(extra) = t.0.keys().next() {
        return Err(Error::Format(format!("unexpected tensor {extra}")));
    }
    q.validate()?;
    Ok(q)
}

pub fn save_quantized(q: &QuantizedModel, path: &std::path::Path) -> Result<()> {
    quantized_model_file(q)?.save(path)
}

pub fn load_quantized(path: &std::path::Path) -> Result<QuantizedModel> {
    quantized_from_file(&ModelFile::load(path)?)
}
