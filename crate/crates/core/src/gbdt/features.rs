//! Flatten-boundary activations of a trained distinguisher.
//!
//! Feature file layout (little-endian):
//! ```text
//! "MCFM"  u16 version  u64 rows  u32 cols
//! rows * cols f32 values (row-major)
//! rows label bytes
//! ```

use std::fs;
use std::path::Path;

use crate::data::{ClassLabel, Dataset};
use crate::error::{Error, Result};
use crate::nn::model::dataset_inputs;
use crate::nn::{Tensor, TrainedModel};

pub const FEATURES_MAGIC: [u8; 4] = *b"MCFM";
pub const FEATURES_VERSION: u16 = 1;

const CHUNK: usize = 4096;

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix {
    rows: usize,
    cols: usize,
    values: Vec<f32>,
    labels: Vec<ClassLabel>,
}

impl FeatureMatrix {
    pub fn new(
        rows: usize,
        cols: usize,
        values: Vec<f32>,
        labels: Vec<ClassLabel>,
    ) -> Result<Self> {
        if cols == 0 || values.len() != rows * cols || labels.len() != rows {
            return Err(Error::Shape(format!(
                "{} values and {} labels for a {rows} x {cols} matrix",
                values.len(),
                labels.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Malformed(format!(
                "non-finite feature at row {}, column {}",
                i / cols,
                i % cols
            )));
        }
        Ok(FeatureMatrix {
            rows,
            cols,
            values,
            labels,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn labels(&self) -> &[ClassLabel] {
        &self.labels
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.values[i * self.cols..(i + 1) * self.cols]
    }

    pub fn select(&self, indices: &[usize]) -> FeatureMatrix {
        let mut values = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            values.extend_from_slice(self.row(i));
        }
        FeatureMatrix {
            rows: indices.len(),
            cols: self.cols,
            values,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }
}

/// Inference-mode activations after the last residual block, flattened
/// channel-major. The model is only read.
pub fn extract_features(model: &TrainedModel, ds: &Dataset) -> Result<FeatureMatrix> {
    if ds.header.message_pair != model.provenance.train_data.message_pair {
        return Err(Error::Incompatible(format!(
            "model was trained on message pair {:?}, dataset uses {:?}",
            model.provenance.train_data.message_pair, ds.header.message_pair
        )));
    }
    let cols = model.config().feature_dim();
    let x: Tensor<f32> = dataset_inputs(ds);
    let mut values = Vec::with_capacity(ds.len() * cols);
    for chunk in x.data().chunks(CHUNK * 32) {
        let t = Tensor::from_vec(&[chunk.len() / 32, 2, 16], chunk.to_vec())?;
        let f = model.network.features(&t)?;
        if f.shape()[1] != cols {
            return Err(Error::Shape(format!(
                "extractor produced {} features, config implies {cols}",
                f.shape()[1]
            )));
        }
        values.extend_from_slice(f.data());
    }
    FeatureMatrix::new(ds.len(), cols, values, ds.labels())
}

pub fn encode_features(fm: &FeatureMatrix) -> Vec<u8> {
    let mut out = Vec::with_capacity(18 + fm.values.len() * 4 + fm.rows);
    out.extend_from_slice(&FEATURES_MAGIC);
    out.extend_from_slice(&FEATURES_VERSION.to_le_bytes());
    out.extend_from_slice(&(fm.rows as u64).to_le_bytes());
    out.extend_from_slice(&(fm.cols as u32).to_le_bytes());
    for v in &fm.values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend(fm.labels.iter().map(|l| l.as_u8()));
    out
}

pub fn decode_features(bytes: &[u8]) -> Result<FeatureMatrix> {
    if bytes.len() < 18 {
        return Err(Error::Truncated("feature file header".into()));
    }
    let magic: [u8; 4] = bytes[..4].try_into().unwrap();
    if magic != FEATURES_MAGIC {
        return Err(Error::BadMagic {
            expected: FEATURES_MAGIC,
            found: magic,
        });
    }
    let version = u16::from_le_bytes(bytes[4..6].try_into().unwrap());
    if version != FEATURES_VERSION {
        return Err(Error::UnsupportedVersion {
            found: version,
            supported: FEATURES_VERSION,
        });
    }
    let rows = u64::from_le_bytes(bytes[6..14].try_into().unwrap()) as usize;
    let cols = u32::from_le_bytes(bytes[14..18].try_into().unwrap()) as usize;
    let need = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(4))
        .and_then(|n| n.checked_add(rows + 18))
        .ok_or_else(|| Error::Malformed("feature matrix dimensions overflow".into()))?;
    if bytes.len() < need {
        return Err(Error::Truncated(format!(
            "feature file holds {} bytes, header implies {need}",
            bytes.len()
        )));
    }
    if bytes.len() > need {
        return Err(Error::Malformed("trailing bytes after labels".into()));
    }
    let split = 18 + rows * cols * 4;
    let values = bytes[18..split]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    let labels = bytes[split..]
        .iter()
        .map(|&b| ClassLabel::from_u8(b))
        .collect::<Result<Vec<_>>>()?;
    FeatureMatrix::new(rows, cols, values, labels)
}

pub fn save_features(fm: &FeatureMatrix, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_features(fm))?;
    Ok(())
}

pub fn load_features(path: impl AsRef<Path>) -> Result<FeatureMatrix> {
    decode_features(&fs::read(path)?)
}
