//! Checkpoint file: `BIMSACKP`, u32 version, u32 header length, JSON header
//! (model config + strategy), then every parameter as
//! `u32 name_len, name, u32 rank, u64 dims.., f64 values..`, little endian.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig};
use crate::error::{Error, Result};
use crate::fusion::StrategyId;

const MAGIC: &[u8; 8] = b"BIMSACKP";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    strategy: String,
}

fn ck(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

pub fn save_checkpoint(model: &Model, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    let header = serde_json::to_vec(&Header {
        config: model.config().clone(),
        strategy: model.strategy().to_string(),
    })
    .map_err(|e| ck(e.to_string()))?;
    buf.extend_from_slice(&(header.len() as u32).to_le_bytes());
    buf.extend_from_slice(&header);
    buf.extend_from_slice(&(model.params().len() as u32).to_le_bytes());
    for p in model.params().iter() {
        buf.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        buf.extend_from_slice(p.name.as_bytes());
        let dims = p.var.dims();
        buf.extend_from_slice(&(dims.len() as u32).to_le_bytes());
        for d in dims {
            buf.extend_from_slice(&(*d as u64).to_le_bytes());
        }
        let values: Vec<f64> = p
            .var
            .as_tensor()
            .to_dtype(candle_core::DType::F64)?
            .flatten_all()?
            .to_vec1()?;
        for v in values {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let tmp = path.with_extension("tmp");
    fs::File::create(&tmp)
        .and_then(|mut f| f.write_all(&buf))
        .map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.pos.checked_add(n).filter(|e| *e <= self.buf.len()).ok_or_else(|| ck("truncated file"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Rebuilds the model described by the checkpoint header and loads its
/// parameters. When `expected` is given the stored config must match it.
pub fn load_checkpoint(path: &Path, expected: Option<&ModelConfig>) -> Result<Model> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let mut r = Reader { buf: &bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(ck("bad magic"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(ck(format!("unsupported version {version}")));
    }
    let hlen = r.u32()? as usize;
    let header: Header = serde_json::from_slice(r.take(hlen)?).map_err(|e| ck(e.to_string()))?;
    if let Some(exp) = expected {
        if exp != &header.config {
            return Err(ck(format!(
                "config mismatch: checkpoint has {:?}, expected {:?}",
                header.config, exp
            )));
        }
    }
    let strategy: StrategyId = header.strategy.parse()?;
    let model = Model::new(&header.config, strategy, 0)?;
    let n = r.u32()? as usize;
    if n != model.params().len() {
        return Err(ck(format!("{n} parameters stored, model has {}", model.params().len())));
    }
    for _ in 0..n {
        let len = r.u32()? as usize;
        let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| ck("bad parameter name"))?;
        let rank = r.u32()? as usize;
        let dims = (0..rank).map(|_| Ok(r.u64()? as usize)).collect::<Result<Vec<_>>>()?;
        let count: usize = dims.iter().product();
        let raw = r.take(count * 8)?;
        let values: Vec<f64> = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        let var = model.params().get(&name).ok_or_else(|| ck(format!("unknown parameter `{name}`")))?;
        if var.dims() != dims.as_slice() {
            return Err(ck(format!("shape mismatch for `{name}`: {dims:?} vs {:?}", var.dims())));
        }
        let t = Tensor::from_vec(values, dims, var.device())?.to_dtype(var.dtype())?;
        var.set(&t)?;
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Mode;

    #[test]
    fn save_load_preserves_outputs() {
        let cfg = ModelConfig { trunk_width: 8, head_width: 8, ..ModelConfig::default() };
        let m = Model::new(&cfg, StrategyId::Bimsa, 17).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ckpt");
        save_checkpoint(&m, &p).unwrap();
        let back = load_checkpoint(&p, Some(&cfg)).unwrap();
        assert_eq!(back.strategy(), StrategyId::Bimsa);
        let x = Tensor::randn(0f32, 1.0, (1, 3, 32, 32), &candle_core::Device::Cpu).unwrap();
        let a = m.forward(&x, &[0.5, 1.0, 2.0], Mode::Eval).unwrap();
        let b = back.forward(&x, &[0.5, 1.0, 2.0], Mode::Eval).unwrap();
        let d = (a - b).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap();
        assert_eq!(d, 0.0);

        let other = ModelConfig { d: 2, ..cfg };
        assert!(matches!(load_checkpoint(&p, Some(&other)), Err(Error::Checkpoint(_))));
        std::fs::write(&p, b"garbage").unwrap();
        assert!(load_checkpoint(&p, None).is_err());
    }
}
