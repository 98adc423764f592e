//! `QFG1` container: magic, version, JSON header, 64-byte aligned
//! little-endian payloads, CRC32 trailer.
//!
//! ```text
//! "QFG1" | u16 version | u32 header_len | header (JSON) | pad
//! | payload 0 | pad | payload 1 | ... | u32 crc32(all preceding bytes)
//! ```
//!
//! Payload offsets in the header are relative to the first aligned byte
//! after the header. `u4` payloads pack two codes per byte, low nibble first.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::numeric::Tensor;

pub const MAGIC: &[u8; 4] = b"QFG1";
pub const VERSION: u16 = 1;
const ALIGN: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F64,
    U8,
    U16,
    I32,
    U4,
}

#[derive(Clone, Debug, PartialEq)]
pub enum TensorData {
    F64(Vec<f64>),
    U8(Vec<u8>),
    U16(Vec<u16>),
    I32(Vec<i32>),
    /// One code in `0..16` per element; packed on disk.
    U4(Vec<u8>),
}

impl TensorData {
    pub fn dtype(&self) -> DType {
        match self {
            TensorData::F64(_) => DType::F64,
            TensorData::U8(_) => DType::U8,
            TensorData::U16(_) => DType::U16,
            TensorData::I32(_) => DType::I32,
            TensorData::U4(_) => DType::U4,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            TensorData::F64(v) => v.len(),
            TensorData::U8(v) | TensorData::U4(v) => v.len(),
            TensorData::U16(v) => v.len(),
            TensorData::I32(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn encode(&self) -> Result<Vec<u8>> {
        Ok(match self {
            TensorData::F64(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
            TensorData::U8(v) => v.clone(),
            TensorData::U16(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
            TensorData::I32(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
            TensorData::U4(v) => {
                if let Some(x) = v.iter().find(|&&x| x > 15) {
                    return Err(Error::Format(format!("u4 value {x} out of range")));
                }
                v.chunks(2)
                    .map(|p| p[0] | (p.get(1).copied().unwrap_or(0) << 4))
                    .collect()
            }
        })
    }

    fn byte_len(dtype: DType, n: usize) -> usize {
        match dtype {
            DType::F64 => 8 * n,
            DType::U8 => n,
            DType::U16 => 2 * n,
            DType::I32 => 4 * n,
            DType::U4 => n.div_ceil(2),
        }
    }

    fn decode(dtype: DType, n: usize, b: &[u8]) -> TensorData {
        match dtype {
            DType::F64 => TensorData::F64(
                b.chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                    .collect(),
            ),
            DType::U8 => TensorData::U8(b.to_vec()),
            DType::U16 => TensorData::U16(
                b.chunks_exact(2)
                    .map(|c| u16::from_le_bytes([c[0], c[1]]))
                    .collect(),
            ),
            DType::I32 => TensorData::I32(
                b.chunks_exact(4)
                    .map(|c| i32::from_le_bytes(c.try_into().expect("4 bytes")))
                    .collect(),
            ),
            DType::U4 => TensorData::U4(
                b.iter()
                    .flat_map(|&x| [x & 15, x >> 4])
                    .take(n)
                    .collect(),
            ),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: TensorData,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TableEntry {
    name: String,
    dtype: DType,
    shape: Vec<usize>,
    offset: usize,
    nbytes: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    kind: String,
    meta: serde_json::Value,
    tensors: Vec<TableEntry>,
}

/// In-memory form of a model file.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelFile {
    pub kind: String,
    pub meta: serde_json::Value,
    pub tensors: Vec<Entry>,
}

fn pad_to(buf: &mut Vec<u8>, align: usize) {
    while buf.len() % align != 0 {
        buf.push(0);
    }
}

impl ModelFile {
    pub fn get(&self, name: &str) -> Result<&Entry> {
        self.tensors
            .iter()
            .find(|e| e.name == name)
            .ok_or_else(|| Error::Format(format!("missing tensor {name}")))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut payload = Vec::new();
        let mut table = Vec::with_capacity(self.tensors.len());
        for e in &self.tensors {
            if e.shape.iter().product::<usize>() != e.data.len() {
                return Err(Error::Format(format!("tensor {} shape {:?} does not match its data", e.name, e.shape)));
            }
            pad_to(&mut payload, ALIGN);
            let bytes = e.data.encode()?;
            table.push(TableEntry {
                name: e.name.clone(),
                dtype: e.data.dtype(),
                shape: e.shape.clone(),
                offset: payload.len(),
                nbytes: bytes.len(),
            });
            payload.extend(bytes);
        }
        let header = serde_json::to_vec(&Header {
            kind: self.kind.clone(),
            meta: self.meta.clone(),
            tensors: table,
        })?;
        let mut out = Vec::with_capacity(header.len() + payload.len() + 2 * ALIGN);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend(header);
        pad_to(&mut out, ALIGN);
        out.extend(payload);
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let fmt = |m: String| Error::Format(m);
        if bytes.len() < 14 || &bytes[..4] != MAGIC {
            return Err(fmt("not a QFG1 file".into()));
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version > VERSION {
            return Err(fmt(format!(
                "file version {version} is newer than the supported version {VERSION}"
            )));
        }
        let body = &bytes[..bytes.len() - 4];
        let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().expect("4 bytes"));
        let computed = crc32fast::hash(body);
        if stored != computed {
            return Err(Error::Crc { stored, computed });
        }
        let hlen = u32::from_le_bytes(bytes[6..10].try_into().expect("4 bytes")) as usize;
        let hend = 10usize
            .checked_add(hlen)
            .filter(|&e| e <= body.len())
            .ok_or_else(|| fmt("header length exceeds file".into()))?;
        let header: Header = serde_json::from_slice(&body[10..hend])
            .map_err(|e| fmt(format!("bad header: {e}")))?;
        let start = hend.div_ceil(ALIGN) * ALIGN;
        if start > body.len() {
            return Err(fmt("payload section missing".into()));
        }
        let payload = &body[start..];
        let mut spans: Vec<(usize, usize, &str)> = Vec::new();
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for t in &header.tensors {
            let n: usize = t.shape.iter().product();
            let want = TensorData::byte_len(t.dtype, n);
            let end = t.offset.checked_add(t.nbytes);
            if t.nbytes != want || end.is_none_or(|e| e > payload.len()) {
                return Err(fmt(format!("tensor {} has an invalid byte range", t.name)));
            }
            spans.push((t.offset, t.offset + t.nbytes, &t.name));
            tensors.push(Entry {
                name: t.name.clone(),
                shape: t.shape.clone(),
                data: TensorData::decode(t.dtype, n, &payload[t.offset..t.offset + t.nbytes]),
            });
        }
        spans.sort();
        for w in spans.windows(2) {
            if w[1].0 < w[0].1 {
                return Err(fmt(format!("tensors {} and {} overlap", w[0].2, w[1].2)));
            }
        }
        Ok(Self {
            kind: header.kind,
            meta: header.meta,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

pub const FLOAT_KIND: &str = "float";

/// Float model as a `float` file; the header meta is the model config.
pub fn float_model_file(model: &Model) -> Result<ModelFile> {
    Ok(ModelFile {
        kind: FLOAT_KIND.into(),
        meta: serde_json::to_value(&model.config)?,
        tensors: model
            .named_tensors()
            .into_iter()
            .map(|(name, t)| Entry {
                name,
                shape: t.shape().to_vec(),
                data: TensorData::F64(t.data().to_vec()),
            })
            .collect(),
    })
}

pub fn model_from_file(f: &ModelFile) -> Result<Model> {
    if f.kind != FLOAT_KIND {
        return Err(Error::Format(format!("expected a float model file, found kind {:?}", f.kind)));
    }
    let config: ModelConfig = serde_json::from_value(f.meta.clone())?;
    let mut named = BTreeMap::new();
    for e in &f.tensors {
        let TensorData::F64(v) = &e.data else {
            return Err(Error::Format(format!("tensor {} is not f64", e.name)));
        };
        named.insert(e.name.clone(), Tensor::new(&e.shape, v.clone())?);
    }
    Model::from_named(config, named)
}

pub fn save_model(model: &Model, path: &Path) -> Result<()> {
    float_model_file(model)?.save(path)
}

pub fn load_model(path: &Path) -> Result<Model> {
    model_from_file(&ModelFile::load(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn sample() -> ModelFile {
        ModelFile {
            kind: "test".into(),
            meta: serde_json::json!({"a": 1, "b": [0.1, 2.5]}),
            tensors: vec![
                Entry {
                    name: "x".into(),
                    shape: vec![3],
                    data: TensorData::F64(vec![0.1, -2.0, 1e-300]),
                },
                Entry {
                    name: "n".into(),
                    shape: vec![5],
                    data: TensorData::U4(vec![1, 15, 0, 7, 9]),
                },
                Entry {
                    name: "h".into(),
                    shape: vec![2, 2],
                    data: TensorData::U16(vec![0, 65535, 3, 4]),
                },
                Entry {
                    name: "b".into(),
                    shape: vec![2],
                    data: TensorData::I32(vec![i32::MIN, 7]),
                },
            ],
        }
    }

    #[test]
    fn round_trip_is_exact_and_aligned() {
        let f = sample();
        let bytes = f.to_bytes().unwrap();
        let g = ModelFile::from_bytes(&bytes).unwrap();
        assert_eq!(f, g);
        assert_eq!(g.to_bytes().unwrap(), bytes);
        let hlen = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
        let header: Header = serde_json::from_slice(&bytes[10..10 + hlen]).unwrap();
        for t in &header.tensors {
            assert_eq!(t.offset % ALIGN, 0);
        }
        assert_eq!(header.tensors[1].nbytes, 3);
    }

    #[test]
    fn nibbles_are_low_first() {
        let d = TensorData::U4(vec![1, 15, 2]);
        assert_eq!(d.encode().unwrap(), vec![0xF1, 0x02]);
        assert!(TensorData::U4(vec![16]).encode().is_err());
    }

    #[test]
    fn corruption_and_versions_are_detected() {
        let bytes = sample().to_bytes().unwrap();
        let mut bad = bytes.clone();
        let i = bad.len() - 10;
        bad[i] ^= 1;
        assert!(matches!(ModelFile::from_bytes(&bad), Err(Error::Crc { .. })));

        let mut newer = bytes.clone();
        newer[4..6].copy_from_slice(&2u16.to_le_bytes());
        let n = newer.len() - 4;
        let crc = crc32fast::hash(&newer[..n]);
        newer[n..].copy_from_slice(&crc.to_le_bytes());
        let err = ModelFile::from_bytes(&newer).unwrap_err();
        assert!(err.to_string().contains("newer"), "{err}");

        assert!(matches!(ModelFile::from_bytes(b"NOPE0000000000"), Err(Error::Format(_))));
    }

    #[test]
    fn float_model_round_trips() {
        let cfg = ModelConfig {
            n_layers: 1,
            ..ModelConfig::default()
        };
        let m = Model::init(cfg, 3).unwrap();
        let f = float_model_file(&m).unwrap();
        let back = model_from_file(&ModelFile::from_bytes(&f.to_bytes().unwrap()).unwrap()).unwrap();
        assert_eq!(back, m);
        assert_eq!(f.meta["vocab"], 256);
    }
}
