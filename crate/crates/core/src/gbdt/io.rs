//! Ensemble file.
//!
//! ```text
//! "MCGB"  u16 version
//! f64 lambda, alpha  u32 max_depth, n_estimators
//! f64 learning_rate, subsample, colsample_bytree, gamma, min_child_weight,
//!     reg_alpha, reg_lambda
//! u32 n_features  f64 base_score  u32 tree count
//! per tree: u32 node count, nodes in preorder:
//!     0u8 f64 weight                  (leaf)
//!     1u8 u32 feature  f64 threshold  (split; children follow)
//! ```
//! All values little-endian.

use std::fs;
use std::path::Path;

use super::tree::{BoostedEnsemble, GbdtHyperParams, Node, RegressionTree};
use crate::error::{Error, Result};

pub const ENSEMBLE_MAGIC: [u8; 4] = *b"MCGB";
pub const ENSEMBLE_VERSION: u16 = 1;

pub fn encode_ensemble(ens: &BoostedEnsemble) -> Vec<u8> {
    let mut out = Vec::new();
    let p = &ens.params;
    out.extend_from_slice(&ENSEMBLE_MAGIC);
    out.extend_from_slice(&ENSEMBLE_VERSION.to_le_bytes());
    let f = |out: &mut Vec<u8>, v: f64| out.extend_from_slice(&v.to_le_bytes());
    let u = |out: &mut Vec<u8>, v: usize| out.extend_from_slice(&(v as u32).to_le_bytes());
    f(&mut out, p.lambda);
    f(&mut out, p.alpha);
    u(&mut out, p.max_depth);
    u(&mut out, p.n_estimators);
    for v in [
        p.learning_rate,
        p.subsample,
        p.colsample_bytree,
        p.gamma,
        p.min_child_weight,
        p.reg_alpha,
        p.reg_lambda,
    ] {
        f(&mut out, v);
    }
    u(&mut out, ens.n_features);
    f(&mut out, ens.base_score);
    u(&mut out, ens.trees.len());
    for t in &ens.trees {
        u(&mut out, t.nodes().len());
        for n in t.nodes() {
            match *n {
                Node::Leaf { weight } => {
                    out.push(0);
                    f(&mut out, weight);
                }
                Node::Split {
                    feature, threshold, ..
                } => {
                    out.push(1);
                    u(&mut out, feature);
                    f(&mut out, threshold);
                }
            }
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take<const N: usize>(&mut self, what: &str) -> Result<[u8; N]> {
        let s = self
            .buf
            .get(self.pos..self.pos + N)
            .ok_or_else(|| Error::Truncated(format!("ensemble file ends inside {what}")))?;
        self.pos += N;
        Ok(s.try_into().unwrap())
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(what)?))
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(what)?) as usize)
    }
}

/// Rebuilds child links from a preorder node list. Returns the index one
/// past the subtree rooted at `raw[i]`.
fn link(raw: &[(u8, usize, f64)], i: usize, out: &mut Vec<Node>, depth: usize) -> Result<()> {
    if depth > 64 {
        return Err(Error::Malformed("tree deeper than 64".into()));
    }
    let (tag, feature, value) = *raw
        .get(i)
        .ok_or_else(|| Error::Malformed("tree ends inside a split".into()))?;
    let me = out.len();
    match tag {
        0 => out.push(Node::Leaf { weight: value }),
        1 => {
            out.push(Node::Leaf { weight: 0.0 });
            let left = out.len();
            link(raw, left, out, depth + 1)?;
            let right = out.len();
            link(raw, right, out, depth + 1)?;
            out[me] = Node::Split {
                feature,
                threshold: value,
                left,
                right,
            };
        }
        t => return Err(Error::Malformed(format!("node tag {t}"))),
    }
    Ok(())
}

pub fn decode_ensemble(bytes: &[u8]) -> Result<BoostedEnsemble> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let magic: [u8; 4] = r.take("magic")?;
    if magic != ENSEMBLE_MAGIC {
        return Err(Error::BadMagic {
            expected: ENSEMBLE_MAGIC,
            found: magic,
        });
    }
    let version = u16::from_le_bytes(r.take("version")?);
    if version != ENSEMBLE_VERSION {
        return Err(Error::UnsupportedVersion {
            found: version,
            supported: ENSEMBLE_VERSION,
        });
    }
    let params = GbdtHyperParams {
        lambda: r.f64("params")?,
        alpha: r.f64("params")?,
        max_depth: r.u32("params")?,
        n_estimators: r.u32("params")?,
        learning_rate: r.f64("params")?,
        subsample: r.f64("params")?,
        colsample_bytree: r.f64("params")?,
        gamma: r.f64("params")?,
        min_child_weight: r.f64("params")?,
        reg_alpha: r.f64("params")?,
        reg_lambda: r.f64("params")?,
    };
    params
        .validate()
        .map_err(|e| Error::Malformed(e.to_string()))?;
    let n_features = r.u32("feature count")?;
    let base_score = r.f64("base score")?;
    let n_trees = r.u32("tree count")?;
    let mut trees = Vec::with_capacity(n_trees.min(1 << 16));
    for _ in 0..n_trees {
        let count = r.u32("node count")?;
        let mut raw = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let [tag] = r.take::<1>("node")?;
            match tag {
                0 => raw.push((0, 0, r.f64("leaf")?)),
                1 => {
                    let f = r.u32("split")?;
                    raw.push((1, f, r.f64("split")?));
                }
                t => return Err(Error::Malformed(format!("node tag {t}"))),
            }
        }
        let mut nodes = Vec::with_capacity(raw.len());
        link(&raw, 0, &mut nodes, 0)?;
        if nodes.len() != raw.len() {
            return Err(Error::Malformed("extra nodes after tree".into()));
        }
        let tree = RegressionTree::from_nodes(nodes)?;
        if tree.max_feature().is_some_and(|f| f >= n_features) {
            return Err(Error::Malformed(
                "split on a feature beyond the feature count".into(),
            ));
        }
        trees.push(tree);
    }
    if r.pos != bytes.len() {
        return Err(Error::Malformed("trailing bytes after trees".into()));
    }
    Ok(BoostedEnsemble {
        params,
        n_features,
        base_score,
        trees,
    })
}

pub fn save_ensemble(ens: &BoostedEnsemble, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_ensemble(ens))?;
    Ok(())
}

pub fn load_ensemble(path: impl AsRef<Path>) -> Result<BoostedEnsemble> {
    decode_ensemble(&fs::read(path)?)
}
