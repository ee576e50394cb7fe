//! Binary checkpoint format, little-endian throughout:
//!
//! ```text
//! "SAAM" | version u32 | config_len u32 | config (key=value text)
//! | tensor_count u32
//! | per tensor: name_len u32 | name | dtype u8 (0 = f32) | rank u8 | dims u32 × rank | data f32 × numel
//! | crc32 u32 over every preceding byte
//! ```

use std::path::Path;

use crate::error::{CheckpointError, Error, Result};
use crate::model::{Model, ModelConfig};
use crate::tensor::{numel, Tensor};

pub const MAGIC: &[u8; 4] = b"SAAM";
pub const VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;

#[derive(Clone, Debug, PartialEq)]
pub struct TensorRecord {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Decoded {
    pub version: u32,
    pub config: String,
    pub tensors: Vec<TensorRecord>,
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

pub fn encode(model: &Model<f32>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let cfg = model.config().to_kv();
    put_u32(&mut out, cfg.len());
    out.extend_from_slice(cfg.as_bytes());
    let entries = model.params.entries();
    put_u32(&mut out, entries.len());
    for e in entries {
        put_u32(&mut out, e.name.len());
        out.extend_from_slice(e.name.as_bytes());
        out.push(DTYPE_F32);
        out.push(4);
        for d in e.value.shape() {
            put_u32(&mut out, d);
        }
        for v in e.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        if self.buf.len() - self.pos < n {
            return Err(CheckpointError::Malformed(format!(
                "unexpected end of data at byte {}",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, CheckpointError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn text(&mut self, n: usize) -> Result<String, CheckpointError> {
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| CheckpointError::Malformed("invalid UTF-8".into()))
    }
}

/// Checks magic, then CRC, then version, then parses the tensor table.
pub fn decode(bytes: &[u8]) -> Result<Decoded, CheckpointError> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(CheckpointError::BadMagic {
            found: bytes[..bytes.len().min(4)].to_vec(),
        });
    }
    if bytes.len() < 12 {
        let stored = 0;
        return Err(CheckpointError::Crc {
            stored,
            computed: crc32fast::hash(bytes),
        });
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().unwrap());
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(CheckpointError::Crc { stored, computed });
    }
    let mut r = Reader { buf: body, pos: 4 };
    let version = r.u32()?;
    if version != VERSION {
        return Err(CheckpointError::Version {
            found: version,
            expected: VERSION,
        });
    }
    let clen = r.u32()? as usize;
    let config = r.text(clen)?;
    let count = r.u32()? as usize;
    let mut tensors = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let nlen = r.u32()? as usize;
        let name = r.text(nlen)?;
        let dtype = r.u8()?;
        if dtype != DTYPE_F32 {
            return Err(CheckpointError::Dtype(dtype));
        }
        let rank = r.u8()? as usize;
        let dims = (0..rank)
            .map(|_| r.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>, _>>()?;
        let n: usize = dims.iter().product();
        let raw = r.take(
            n.checked_mul(4)
                .ok_or_else(|| CheckpointError::Malformed("tensor too large".into()))?,
        )?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        tensors.push(TensorRecord { name, dims, data });
    }
    if r.pos != body.len() {
        return Err(CheckpointError::Malformed(format!(
            "{} trailing bytes",
            body.len() - r.pos
        )));
    }
    Ok(Decoded {
        version,
        config,
        tensors,
    })
}

/// Copies every tensor into `model`, requiring an exact name and shape match.
fn fill(model: &mut Model<f32>, tensors: Vec<TensorRecord>) -> Result<(), CheckpointError> {
    let mut seen = vec![false; model.params.len()];
    for t in tensors {
        let id = model
            .params
            .find(&t.name)
            .ok_or_else(|| CheckpointError::UnexpectedTensor(t.name.clone()))?;
        let expected = model.params.get(id).shape();
        if t.dims != expected {
            return Err(CheckpointError::ShapeMismatch {
                name: t.name,
                expected: expected.to_vec(),
                found: t.dims,
            });
        }
        debug_assert_eq!(numel(&expected), t.data.len());
        *model.params.get_mut(id) = Tensor::from_vec(expected, t.data).expect("checked shape");
        seen[id.0] = true;
    }
    if let Some(i) = seen.iter().position(|s| !s) {
        return Err(CheckpointError::MissingTensor(
            model.params.entries()[i].name.clone(),
        ));
    }
    Ok(())
}

/// Rebuilds the model described by the stored configuration.
pub fn from_bytes(bytes: &[u8]) -> Result<Model<f32>> {
    let d = decode(bytes)?;
    let cfg = ModelConfig::from_kv(&d.config)
        .map_err(|e| CheckpointError::Malformed(format!("stored config: {e}")))?;
    let mut model = Model::build(&cfg)?;
    fill(&mut model, d.tensors)?;
    Ok(model)
}

/// Loads into the architecture `cfg`: tensor shapes are checked first, then
/// every configuration field except the seed must agree with the stored one.
pub fn from_bytes_into(bytes: &[u8], cfg: &ModelConfig) -> Result<Model<f32>> {
    let d = decode(bytes)?;
    let mut model = Model::build(cfg)?;
    fill(&mut model, d.tensors)?;
    let stored = crate::config::parse_pairs(&d.config)
        .map_err(|e| CheckpointError::Malformed(e.to_string()))?;
    let requested = crate::config::parse_pairs(&cfg.to_kv()).expect("own echo parses");
    for (_, k, v) in &stored {
        if k == "seed" {
            continue;
        }
        let want = requested
            .iter()
            .find(|r| &r.1 == k)
            .map(|r| r.2.clone())
            .unwrap_or_default();
        if &want != v {
            return Err(CheckpointError::ConfigMismatch {
                field: k.clone(),
                stored: v.clone(),
                requested: want,
            }
            .into());
        }
    }
    Ok(model)
}

pub fn save(model: &Model<f32>, path: &Path) -> Result<()> {
    std::fs::write(path, encode(model)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Model<f32>> {
    from_bytes(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
}

pub fn load_into(path: &Path, cfg: &ModelConfig) -> Result<Model<f32>> {
    from_bytes_into(&std::fs::read(path).map_err(|e| Error::io(path, e))?, cfg)
}
