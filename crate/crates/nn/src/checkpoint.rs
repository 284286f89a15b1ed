//! Binary checkpoint format.
//!
//! All integers little-endian:
//!
//! ```text
//! magic     8 bytes  "SDNCKPT\0"
//! version   u32      1
//! count     u32      number of tensors
//! tensor    repeated `count` times:
//!   name_len u16, name (utf-8)
//!   dtype    u8      0 = f32, 1 = f64
//!   ndim     u8, dims u64 x ndim
//!   data     element bytes, row-major
//! meta_len  u64
//! meta      utf-8 JSON: {"arch", "train", "epoch", "rng"}
//! ```

use std::fs;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::model::{ArchConfig, Model, Param};
use crate::scalar::Scalar;
use crate::train::TrainConfig;
use crate::NnError;

pub const MAGIC: &[u8; 8] = b"SDNCKPT\0";
pub const VERSION: u32 = 1;

/// Resumable position of the training random stream.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: String,
    pub stream: u64,
    pub word_pos: String,
}

impl RngState {
    pub fn from_rng(rng: &ChaCha8Rng) -> Self {
        RngState { seed: hex(&rng.get_seed()), stream: rng.get_stream(), word_pos: rng.get_word_pos().to_string() }
    }

    /// State of the stream the trainer derives for `(seed, epoch)`.
    pub fn from_seed(seed: u64, epoch: u64) -> Self {
        use rand::SeedableRng;
        let rng = ChaCha8Rng::seed_from_u64(sdn_core::dataset::pair_seed(seed, "shuffle", epoch));
        Self::from_rng(&rng)
    }

    pub fn to_rng(&self) -> Result<ChaCha8Rng, NnError> {
        use rand::SeedableRng;
        let bytes = unhex(&self.seed).ok_or_else(|| NnError::Checkpoint("bad rng seed".into()))?;
        let seed: [u8; 32] = bytes.try_into().map_err(|_| NnError::Checkpoint("rng seed must be 32 bytes".into()))?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos.parse().map_err(|_| NnError::Checkpoint("bad rng position".into()))?);
        Ok(rng)
    }
}

fn hex(b: &[u8]) -> String {
    b.iter().map(|x| format!("{x:02x}")).collect()
}

fn unhex(s: &str) -> Option<Vec<u8>> {
    if s.len() % 2 != 0 {
        return None;
    }
    (0..s.len()).step_by(2).map(|i| u8::from_str_radix(s.get(i..i + 2)?, 16).ok()).collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Meta {
    arch: ArchConfig,
    train: Option<TrainConfig>,
    epoch: usize,
    rng: Option<RngState>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint<T> {
    pub model: Model<T>,
    pub train: Option<TrainConfig>,
    pub epoch: usize,
    pub rng: Option<RngState>,
}

pub fn encode<T: Scalar>(model: &Model<T>, train: Option<&TrainConfig>, epoch: usize, rng: Option<&RngState>) -> Result<Vec<u8>, NnError> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(model.params.len() as u32).to_le_bytes());
    for p in &model.params {
        out.extend_from_slice(&(p.name.len() as u16).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.push(T::DTYPE);
        out.push(p.shape.len() as u8);
        for &d in &p.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in &p.data {
            v.to_le(&mut out);
        }
    }
    let meta = Meta { arch: model.arch.clone(), train: train.cloned(), epoch, rng: rng.cloned() };
    let json = serde_json::to_vec(&meta).map_err(|e| NnError::Checkpoint(e.to_string()))?;
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    Ok(out)
}

struct Reader<'a> {
    b: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], NnError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.b.len());
        let end = end.ok_or_else(|| NnError::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.b[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8, NnError> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16, NnError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32, NnError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64, NnError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode<T: Scalar>(bytes: &[u8]) -> Result<Checkpoint<T>, NnError> {
    let mut r = Reader { b: bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(NnError::Checkpoint("not a checkpoint (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(NnError::Checkpoint(format!("unsupported version {version}")));
    }
    let count = r.u32()? as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let len = r.u16()? as usize;
        let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| NnError::Checkpoint("tensor name not utf-8".into()))?;
        let dtype = r.u8()?;
        if dtype != T::DTYPE {
            return Err(NnError::Checkpoint(format!("tensor {name} has dtype {dtype}, expected {}", T::NAME)));
        }
        let ndim = r.u8()? as usize;
        let shape = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
        let n: usize = shape.iter().product();
        let width = std::mem::size_of::<T>();
        let raw = r.take(n * width)?;
        let data = raw.chunks_exact(width).map(T::from_le).collect();
        tensors.push(Param { name, shape, data });
    }
    let meta_len = r.u64()? as usize;
    let meta: Meta = serde_json::from_slice(r.take(meta_len)?).map_err(|e| NnError::Checkpoint(format!("metadata: {e}")))?;
    if r.pos != bytes.len() {
        return Err(NnError::Checkpoint("trailing bytes".into()));
    }
    let model = Model::from_params(meta.arch, tensors)?;
    Ok(Checkpoint { model, train: meta.train, epoch: meta.epoch, rng: meta.rng })
}

pub fn save<T: Scalar>(path: &Path, model: &Model<T>, train: Option<&TrainConfig>, epoch: usize, rng: Option<&RngState>) -> Result<(), NnError> {
    let bytes = encode(model, train, epoch, rng)?;
    let io = |e: std::io::Error| NnError::Io(format!("{}: {e}", path.display()));
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(io)?;
    }
    // write-then-rename so readers never see a partial file
    let tmp = path.with_extension("ckpt.partial");
    fs::write(&tmp, bytes).map_err(io)?;
    fs::rename(&tmp, path).map_err(io)
}

pub fn load<T: Scalar>(path: &Path) -> Result<Checkpoint<T>, NnError> {
    let bytes = fs::read(path).map_err(|e| NnError::Io(format!("{}: {e}", path.display())))?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Mechanism;
    use rand::RngCore;

    #[test]
    fn roundtrip_bit_identical_forward() {
        let m = Model::<f32>::new(ArchConfig::desk(Mechanism::GcaMsa), 4).unwrap();
        let mut rng = <ChaCha8Rng as rand::SeedableRng>::seed_from_u64(3);
        rng.next_u64();
        let st = RngState::from_rng(&rng);
        let bytes = encode(&m, Some(&TrainConfig::default()), 7, Some(&st)).unwrap();
        let ck = decode::<f32>(&bytes).unwrap();
        assert_eq!(ck.model.params, m.params);
        assert_eq!(ck.epoch, 7);
        assert_eq!(ck.train, Some(TrainConfig::default()));
        let mut back = ck.rng.unwrap().to_rng().unwrap();
        assert_eq!(back.next_u64(), rng.next_u64());
        let x: Vec<f32> = (0..3 * 64 * 64).map(|i| (i % 17) as f32 / 17.0).collect();
        assert_eq!(m.forward(&x, &x).unwrap(), ck.model.forward(&x, &x).unwrap());
    }

    #[test]
    fn rejects_corruption() {
        let m = Model::<f32>::new(ArchConfig::desk(Mechanism::Gca), 1).unwrap();
        let bytes = encode(&m, None, 0, None).unwrap();
        assert!(decode::<f32>(&bytes[..bytes.len() - 3]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode::<f32>(&bad).is_err());
        assert!(decode::<f64>(&bytes).is_err());
    }
}
