//! Model weight file.
//!
//! ```text
//! "MCNN"  u16 version
//! u32 input_bits, words, word_size, block1_filters, residual_blocks,
//!     block1_kernel, block2_kernel, dense count, dense widths...
//! per tensor, in declared layer order: u64 length, f32 values
//! u64 provenance length, provenance JSON (UTF-8)
//! ```
//! All integers and floats little-endian.

use std::fs;
use std::path::Path;

use super::model::{ModelConfig, ModelParams, Network};
use super::tensor::Tensor;
use super::train::{TrainedModel, TrainingProvenance};
use crate::error::{Error, Result};

pub const MODEL_MAGIC: [u8; 4] = *b"MCNN";
pub const MODEL_VERSION: u16 = 1;

pub fn encode_model(model: &TrainedModel) -> Result<Vec<u8>> {
    let c = model.config();
    let mut out = Vec::new();
    out.extend_from_slice(&MODEL_MAGIC);
    out.extend_from_slice(&MODEL_VERSION.to_le_bytes());
    let mut put = |v: usize| out.extend_from_slice(&(v as u32).to_le_bytes());
    put(c.input_bits);
    put(c.words);
    put(c.word_size);
    put(c.block1_filters);
    put(c.residual_blocks);
    put(c.block1_kernel);
    put(c.block2_kernel);
    put(c.dense_widths.len());
    for &w in &c.dense_widths {
        put(w);
    }
    for (_, t, _) in model.network.params.named_tensors() {
        out.extend_from_slice(&(t.len() as u64).to_le_bytes());
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let meta = serde_json::to_vec(&model.provenance)?;
    out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
    out.extend_from_slice(&meta);
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Truncated(format!("model file ends inside {what}")))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()) as usize)
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

pub fn decode_model(bytes: &[u8]) -> Result<TrainedModel> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let magic: [u8; 4] = r.take(4, "magic")?.try_into().unwrap();
    if magic != MODEL_MAGIC {
        return Err(Error::BadMagic {
            expected: MODEL_MAGIC,
            found: magic,
        });
    }
    let version = u16::from_le_bytes(r.take(2, "version")?.try_into().unwrap());
    if version != MODEL_VERSION {
        return Err(Error::UnsupportedVersion {
            found: version,
            supported: MODEL_VERSION,
        });
    }
    let mut config = ModelConfig {
        input_bits: r.u32("config")?,
        words: r.u32("config")?,
        word_size: r.u32("config")?,
        block1_filters: r.u32("config")?,
        residual_blocks: r.u32("config")?,
        block1_kernel: r.u32("config")?,
        block2_kernel: r.u32("config")?,
        dense_widths: Vec::new(),
    };
    let nd = r.u32("config")?;
    if nd > 64 {
        return Err(Error::Malformed(format!("{nd} dense layers")));
    }
    for _ in 0..nd {
        config.dense_widths.push(r.u32("dense widths")?);
    }
    config
        .validate()
        .map_err(|e| Error::Malformed(e.to_string()))?;
    if config.block1_filters > 4096 || config.residual_blocks > 256 {
        return Err(Error::Malformed("implausible model dimensions".into()));
    }

    let mut params = ModelParams::<f32>::init(&config, 0)?;
    for (t, _) in params.tensors_mut() {
        let len = r.u64("tensor length")? as usize;
        if len != t.len() {
            return Err(Error::Malformed(format!(
                "tensor of {len} values where the config implies {}",
                t.len()
            )));
        }
        let raw = r.take(len * 4, "tensor data")?;
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        *t = Tensor::from_vec(t.shape(), data)?;
    }
    let meta_len = r.u64("provenance length")? as usize;
    let meta = r.take(meta_len, "provenance")?;
    if r.pos != bytes.len() {
        return Err(Error::Malformed("trailing bytes after provenance".into()));
    }
    let provenance: TrainingProvenance = serde_json::from_slice(meta)?;
    Ok(TrainedModel {
        network: Network::from_parts(config, params)?,
        provenance,
    })
}

pub fn save_model(model: &TrainedModel, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_model(model)?)?;
    Ok(())
}

pub fn load_model(path: impl AsRef<Path>) -> Result<TrainedModel> {
    decode_model(&fs::read(path)?)
}
