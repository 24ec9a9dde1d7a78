//! Residual convolutional distinguisher.
//!
//! ```text
//! input [N, 2, 16]         L word and R word as two channels
//! conv k=1 -> BN -> ReLU   block 1
//! repeat residual_blocks:  block 2
//!     h + ReLU(BN(conv k=3(ReLU(BN(conv k=3(h))))))
//! flatten [N, filters * 16]   <- transfer features
//! (dense -> BN -> ReLU) per dense width
//! dense 1 -> sigmoid
//! ```

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::{
    relu_backward_inplace, relu_inplace, sigmoid, BatchNorm, BnCache, Conv1d, Dense,
};
use super::tensor::{Real, Tensor};
use crate::data::{BitVector32, ClassLabel, Dataset};
use crate::error::{Error, Result};

pub const BCE_CLAMP: f64 = 1e-7;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub input_bits: usize,
    pub words: usize,
    pub word_size: usize,
    pub block1_filters: usize,
    pub residual_blocks: usize,
    pub block1_kernel: usize,
    pub block2_kernel: usize,
    pub dense_widths: Vec<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            input_bits: 32,
            words: 2,
            word_size: 16,
            block1_filters: 32,
            residual_blocks: 1,
            block1_kernel: 1,
            block2_kernel: 3,
            dense_widths: vec![64, 64],
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("model: {m}")));
        if self.words * self.word_size != self.input_bits {
            return bad("words * word_size must equal input_bits");
        }
        if self.input_bits != 32 {
            return bad("input_bits must be 32 for SPECK32/64 ciphertexts");
        }
        if self.dense_widths.is_empty() || self.dense_widths.contains(&0) {
            return bad("dense_widths must be a nonempty list of positive widths");
        }
        if self.block1_filters == 0 {
            return bad("block1_filters must be positive");
        }
        for k in [self.block1_kernel, self.block2_kernel] {
            if k % 2 == 0 {
                return bad("convolution kernels must be odd for same padding");
            }
        }
        Ok(())
    }

    /// Width of the flattened block-2 output.
    pub fn feature_dim(&self) -> usize {
        self.block1_filters * self.word_size
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ResidualBlock<T> {
    pub conv_a: Conv1d<T>,
    pub bn_a: BatchNorm<T>,
    pub conv_b: Conv1d<T>,
    pub bn_b: BatchNorm<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenseBlock<T> {
    pub dense: Dense<T>,
    pub bn: BatchNorm<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T> {
    pub stem_conv: Conv1d<T>,
    pub stem_bn: BatchNorm<T>,
    pub blocks: Vec<ResidualBlock<T>>,
    pub dense: Vec<DenseBlock<T>>,
    pub head: Dense<T>,
}

/// Whether batch-norm layers use batch statistics or running estimates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Inference,
}

impl<T: Real> ModelParams<T> {
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f = cfg.block1_filters;
        let stem_conv = Conv1d::new(cfg.words, f, cfg.block1_kernel, &mut rng);
        let blocks = (0..cfg.residual_blocks)
            .map(|_| ResidualBlock {
                conv_a: Conv1d::new(f, f, cfg.block2_kernel, &mut rng),
                bn_a: BatchNorm::new(f),
                conv_b: Conv1d::new(f, f, cfg.block2_kernel, &mut rng),
                bn_b: BatchNorm::new(f),
            })
            .collect();
        let mut width = cfg.feature_dim();
        let mut dense = Vec::new();
        for &w in &cfg.dense_widths {
            dense.push(DenseBlock {
                dense: Dense::new(width, w, &mut rng),
                bn: BatchNorm::new(w),
            });
            width = w;
        }
        let head = Dense::new(width, 1, &mut rng);
        Ok(ModelParams {
            stem_conv,
            stem_bn: BatchNorm::new(f),
            blocks,
            dense,
            head,
        })
    }

    /// Every tensor in declared layer order, with a stable name and
    /// whether it is trainable (batch-norm running statistics are not).
    pub fn named_tensors(&self) -> Vec<(String, &Tensor<T>, bool)> {
        type Named<'a, T> = Vec<(String, &'a Tensor<T>, bool)>;
        fn conv<'a, T>(out: &mut Named<'a, T>, p: &str, c: &'a Conv1d<T>) {
            out.push((format!("{p}.weight"), &c.weight, true));
            out.push((format!("{p}.bias"), &c.bias, true));
        }
        fn bn<'a, T>(out: &mut Named<'a, T>, p: &str, b: &'a BatchNorm<T>) {
            out.push((format!("{p}.gamma"), &b.gamma, true));
            out.push((format!("{p}.beta"), &b.beta, true));
            out.push((format!("{p}.running_mean"), &b.running_mean, false));
            out.push((format!("{p}.running_var"), &b.running_var, false));
        }
        let mut out = Vec::new();
        conv(&mut out, "stem.conv", &self.stem_conv);
        bn(&mut out, "stem.bn", &self.stem_bn);
        for (i, b) in self.blocks.iter().enumerate() {
            conv(&mut out, &format!("res{i}.conv_a"), &b.conv_a);
            bn(&mut out, &format!("res{i}.bn_a"), &b.bn_a);
            conv(&mut out, &format!("res{i}.conv_b"), &b.conv_b);
            bn(&mut out, &format!("res{i}.bn_b"), &b.bn_b);
        }
        for (i, d) in self.dense.iter().enumerate() {
            out.push((format!("dense{i}.weight"), &d.dense.weight, true));
            out.push((format!("dense{i}.bias"), &d.dense.bias, true));
            bn(&mut out, &format!("dense{i}.bn"), &d.bn);
        }
        out.push(("head.weight".into(), &self.head.weight, true));
        out.push(("head.bias".into(), &self.head.bias, true));
        out
    }

    /// Mutable counterpart of [`named_tensors`](Self::named_tensors), same order.
    pub fn tensors_mut(&mut self) -> Vec<(&mut Tensor<T>, bool)> {
        let mut out: Vec<(&mut Tensor<T>, bool)> = Vec::new();
        fn conv<'a, T>(out: &mut Vec<(&'a mut Tensor<T>, bool)>, c: &'a mut Conv1d<T>) {
            out.push((&mut c.weight, true));
            out.push((&mut c.bias, true));
        }
        fn bn<'a, T>(out: &mut Vec<(&'a mut Tensor<T>, bool)>, b: &'a mut BatchNorm<T>) {
            out.push((&mut b.gamma, true));
            out.push((&mut b.beta, true));
            out.push((&mut b.running_mean, false));
            out.push((&mut b.running_var, false));
        }
        conv(&mut out, &mut self.stem_conv);
        bn(&mut out, &mut self.stem_bn);
        for b in &mut self.blocks {
            conv(&mut out, &mut b.conv_a);
            bn(&mut out, &mut b.bn_a);
            conv(&mut out, &mut b.conv_b);
            bn(&mut out, &mut b.bn_b);
        }
        for d in &mut self.dense {
            out.push((&mut d.dense.weight, true));
            out.push((&mut d.dense.bias, true));
            bn(&mut out, &mut d.bn);
        }
        out.push((&mut self.head.weight, true));
        out.push((&mut self.head.bias, true));
        out
    }

    pub fn trainable_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.tensors_mut()
            .into_iter()
            .filter_map(|(t, train)| train.then_some(t))
            .collect()
    }

    pub fn trainable(&self) -> Vec<(String, &Tensor<T>)> {
        self.named_tensors()
            .into_iter()
            .filter_map(|(n, t, train)| train.then_some((n, t)))
            .collect()
    }

    /// Zero tensors shaped like the trainable parameters.
    pub fn zero_grads(&self) -> Vec<Tensor<T>> {
        self.trainable()
            .into_iter()
            .map(|(_, t)| Tensor::zeros(t.shape()))
            .collect()
    }

    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        let conv = |c: &Conv1d<T>| Conv1d {
            weight: c.weight.cast(),
            bias: c.bias.cast(),
        };
        let bn = |b: &BatchNorm<T>| BatchNorm {
            gamma: b.gamma.cast(),
            beta: b.beta.cast(),
            running_mean: b.running_mean.cast(),
            running_var: b.running_var.cast(),
        };
        ModelParams {
            stem_conv: conv(&self.stem_conv),
            stem_bn: bn(&self.stem_bn),
            blocks: self
                .blocks
                .iter()
                .map(|b| ResidualBlock {
                    conv_a: conv(&b.conv_a),
                    bn_a: bn(&b.bn_a),
                    conv_b: conv(&b.conv_b),
                    bn_b: bn(&b.bn_b),
                })
                .collect(),
            dense: self
                .dense
                .iter()
                .map(|d| DenseBlock {
                    dense: Dense {
                        weight: d.dense.weight.cast(),
                        bias: d.dense.bias.cast(),
                    },
                    bn: bn(&d.bn),
                })
                .collect(),
            head: Dense {
                weight: self.head.weight.cast(),
                bias: self.head.bias.cast(),
            },
        }
    }

    pub fn all_finite(&self) -> bool {
        self.named_tensors().iter().all(|(_, t, _)| t.all_finite())
    }

    fn check_structure(&self, cfg: &ModelConfig) -> Result<()> {
        let reference = ModelParams::<T>::init(cfg, 0)?;
        let a = self.named_tensors();
        let b = reference.named_tensors();
        if a.len() != b.len()
            || a.iter()
                .zip(&b)
                .any(|((_, x, _), (_, y, _))| x.shape() != y.shape())
        {
            return Err(Error::Shape("parameters do not match model config".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct BlockCache<T> {
    input: Vec<T>,
    bn_a: BnCache<T>,
    act_a: Vec<T>,
    bn_b: BnCache<T>,
    act_b: Vec<T>,
}

#[derive(Clone, Debug)]
struct DenseCache<T> {
    input: Vec<T>,
    bn: BnCache<T>,
    act: Vec<T>,
}

/// Everything the backward pass needs from a forward pass.
#[derive(Clone, Debug)]
pub struct ForwardCache<T> {
    n: usize,
    input: Vec<T>,
    stem_bn: BnCache<T>,
    stem_act: Vec<T>,
    blocks: Vec<BlockCache<T>>,
    flat: Vec<T>,
    dense: Vec<DenseCache<T>>,
    head_in: Vec<T>,
    pub probs: Vec<T>,
}

impl<T: Real> ForwardCache<T> {
    /// Which ReLU units are active, in forward order. Two passes with the same
    /// pattern lie in the same linear region of every ReLU.
    pub fn relu_pattern(&self) -> Vec<bool> {
        let mut out = Vec::new();
        let mut push = |v: &[T]| out.extend(v.iter().map(|&a| a > T::zero()));
        push(&self.stem_act);
        for b in &self.blocks {
            push(&b.act_a);
            push(&b.act_b);
        }
        for d in &self.dense {
            push(&d.act);
        }
        out
    }
}

/// Result of one forward/backward pass.
#[derive(Clone, Debug)]
pub struct Backward<T> {
    pub loss: f64,
    /// One tensor per trainable parameter, in `ModelParams::trainable` order.
    pub grads: Vec<Tensor<T>>,
    pub cache: ForwardCache<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Network<T> {
    pub config: ModelConfig,
    pub params: ModelParams<T>,
}

/// Packs bit vectors into a `[N, words, word_size]` tensor: row 0 holds the
/// L word, row 1 the R word, each MSB-first.
pub fn reshape_input<T: Real>(vectors: &[BitVector32]) -> Tensor<T> {
    let data = vectors
        .iter()
        .flat_map(|v| {
            v.bits()
                .iter()
                .map(|&b| if b == 1 { T::one() } else { T::zero() })
        })
        .collect();
    Tensor::from_vec(&[vectors.len(), 2, 16], data).expect("32 values per vector")
}

/// Inverse of [`reshape_input`] for one sample.
pub fn flatten_input<T: Real>(t: &Tensor<T>, sample: usize) -> Result<BitVector32> {
    let mut bits = [0u8; 32];
    let row = t
        .data()
        .get(sample * 32..(sample + 1) * 32)
        .ok_or_else(|| Error::Shape(format!("sample {sample} out of range")))?;
    for (b, &v) in bits.iter_mut().zip(row) {
        *b = if v > T::lit(0.5) { 1 } else { 0 };
    }
    BitVector32::from_bits(bits)
}

pub fn dataset_inputs<T: Real>(ds: &Dataset) -> Tensor<T> {
    let v: Vec<BitVector32> = ds.records.iter().map(|r| r.ciphertext).collect();
    reshape_input(&v)
}

pub fn dataset_targets<T: Real>(ds: &Dataset) -> Vec<T> {
    ds.records
        .iter()
        .map(|r| T::lit(r.label.target()))
        .collect()
}

/// Mean binary cross-entropy with probabilities clamped to `[1e-7, 1 - 1e-7]`,
/// accumulated in `f64`.
pub fn bce_loss<T: Real>(probs: &[T], targets: &[T]) -> f64 {
    let n = probs.len().max(1) as f64;
    probs
        .iter()
        .zip(targets)
        .map(|(&p, &y)| {
            let p = p.f64().clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
            let y = y.f64();
            -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
        })
        .sum::<f64>()
        / n
}

/// `p > 0.5` predicts the second message.
pub fn predict_label(p: f64) -> ClassLabel {
    if p > 0.5 {
        ClassLabel::Second
    } else {
        ClassLabel::First
    }
}

impl<T: Real> Network<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let params = ModelParams::init(&config, seed)?;
        Ok(Network { config, params })
    }

    pub fn from_parts(config: ModelConfig, params: ModelParams<T>) -> Result<Self> {
        config.validate()?;
        params.check_structure(&config)?;
        Ok(Network { config, params })
    }

    pub fn cast<U: Real>(&self) -> Network<U> {
        Network {
            config: self.config.clone(),
            params: self.params.cast(),
        }
    }

    fn check_batch(&self, x: &Tensor<T>, mode: Mode) -> Result<usize> {
        let c = &self.config;
        let s = x.shape();
        if s.len() != 3 || s[1] != c.words || s[2] != c.word_size {
            return Err(Error::Shape(format!(
                "expected input [N, {}, {}], got {s:?}",
                c.words, c.word_size
            )));
        }
        if mode == Mode::Train && s[0] < 2 {
            return Err(Error::Shape(
                "train-mode batch normalization needs at least 2 samples".into(),
            ));
        }
        Ok(s[0])
    }

    fn conv_stack(
        &self,
        x: &[T],
        n: usize,
        mode: Mode,
        keep: bool,
    ) -> (Vec<T>, Option<ConvTrace<T>>) {
        let len = self.config.word_size;
        let train = mode == Mode::Train;
        let p = &self.params;
        let z = p.stem_conv.forward(x, n, len);
        let (mut h, stem_bn) = p.stem_bn.forward(&z, n, len, train);
        relu_inplace(&mut h);
        let stem_act = if keep { h.clone() } else { Vec::new() };
        let mut blocks = Vec::new();
        for b in &p.blocks {
            let za = b.conv_a.forward(&h, n, len);
            let (mut a, bn_a) = b.bn_a.forward(&za, n, len, train);
            relu_inplace(&mut a);
            let zb = b.conv_b.forward(&a, n, len);
            let (mut r, bn_b) = b.bn_b.forward(&zb, n, len, train);
            relu_inplace(&mut r);
            let out: Vec<T> = h.iter().zip(&r).map(|(&u, &v)| u + v).collect();
            if keep {
                blocks.push(BlockCache {
                    input: std::mem::take(&mut h),
                    bn_a,
                    act_a: a,
                    bn_b,
                    act_b: r,
                });
            }
            h = out;
        }
        let trace = keep.then_some(ConvTrace {
            stem_bn,
            stem_act,
            blocks,
        });
        (h, trace)
    }

    /// Flattened block-2 activations `[N, filters * word_size]`, channel-major
    /// (`feature = channel * word_size + position`), inference mode.
    pub fn features(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let n = self.check_batch(x, Mode::Inference)?;
        let (h, _) = self.conv_stack(x.data(), n, Mode::Inference, false);
        Tensor::from_vec(&[n, self.config.feature_dim()], h)
    }

    pub fn forward_cached(&self, x: &Tensor<T>, mode: Mode) -> Result<ForwardCache<T>> {
        let n = self.check_batch(x, mode)?;
        let train = mode == Mode::Train;
        let (flat, trace) = self.conv_stack(x.data(), n, mode, true);
        let trace = trace.expect("kept");
        let mut h = flat.clone();
        let mut dense = Vec::new();
        for d in &self.params.dense {
            let z = d.dense.forward(&h, n);
            let (mut a, bn) = d.bn.forward(&z, n, 1, train);
            relu_inplace(&mut a);
            dense.push(DenseCache {
                input: std::mem::replace(&mut h, a.clone()),
                bn,
                act: a,
            });
        }
        let logits = self.params.head.forward(&h, n);
        let probs = logits.iter().map(|&z| sigmoid(z)).collect();
        Ok(ForwardCache {
            n,
            input: x.data().to_vec(),
            stem_bn: trace.stem_bn,
            stem_act: trace.stem_act,
            blocks: trace.blocks,
            flat,
            dense,
            head_in: h,
            probs,
        })
    }

    /// Probabilities of the second message, shape `[N]`.
    pub fn forward(&self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let cache = self.forward_cached(x, mode)?;
        let n = cache.n;
        Tensor::from_vec(&[n], cache.probs)
    }

    /// Mean BCE loss and its exact gradient with respect to every trainable
    /// parameter. The logit gradient is `(p - y) / N`.
    pub fn backward(&self, x: &Tensor<T>, targets: &[T], mode: Mode) -> Result<Backward<T>> {
        let cache = self.forward_cached(x, mode)?;
        let n = cache.n;
        if targets.len() != n {
            return Err(Error::Shape(format!(
                "{} targets for a batch of {n}",
                targets.len()
            )));
        }
        let len = self.config.word_size;
        let loss = bce_loss(&cache.probs, targets);
        let mut grads = self.params.zero_grads();
        let p = &self.params;
        // Gradient slots follow `named_tensors` order, trainable only.
        let mut slot = grads.len();

        let inv_n = T::lit(1.0 / n as f64);
        let dz: Vec<T> = cache
            .probs
            .iter()
            .zip(targets)
            .map(|(&pr, &y)| (pr - y) * inv_n)
            .collect();

        slot -= 2;
        let (gw, gb) = pair(&mut grads, slot);
        let mut dh = p.head.backward(&cache.head_in, &dz, n, gw, gb);

        for (d, dc) in p.dense.iter().zip(&cache.dense).rev() {
            relu_backward_inplace(&dc.act, &mut dh);
            slot -= 2;
            let (gg, gbeta) = pair(&mut grads, slot);
            let dzd = d.bn.backward(&dc.bn, &dh, n, 1, gg, gbeta);
            slot -= 2;
            let (gw, gb) = pair(&mut grads, slot);
            dh = d.dense.backward(&dc.input, &dzd, n, gw, gb);
        }

        for (b, bc) in p.blocks.iter().zip(&cache.blocks).rev() {
            // out = input + branch
            let mut dr = dh.clone();
            relu_backward_inplace(&bc.act_b, &mut dr);
            slot -= 2;
            let (gg, gbeta) = pair(&mut grads, slot);
            let dzb = b.bn_b.backward(&bc.bn_b, &dr, n, len, gg, gbeta);
            slot -= 2;
            let (gw, gb) = pair(&mut grads, slot);
            let mut da = b.conv_b.backward(&bc.act_a, &dzb, n, len, gw, gb);
            relu_backward_inplace(&bc.act_a, &mut da);
            slot -= 2;
            let (gg, gbeta) = pair(&mut grads, slot);
            let dza = b.bn_a.backward(&bc.bn_a, &da, n, len, gg, gbeta);
            slot -= 2;
            let (gw, gb) = pair(&mut grads, slot);
            let dx = b.conv_a.backward(&bc.input, &dza, n, len, gw, gb);
            for (a, v) in dh.iter_mut().zip(dx) {
                *a += v;
            }
        }

        relu_backward_inplace(&cache.stem_act, &mut dh);
        slot -= 2;
        let (gg, gbeta) = pair(&mut grads, slot);
        let dzs = p.stem_bn.backward(&cache.stem_bn, &dh, n, len, gg, gbeta);
        slot -= 2;
        debug_assert_eq!(slot, 0);
        let (gw, gb) = pair(&mut grads, slot);
        p.stem_conv.backward(&cache.input, &dzs, n, len, gw, gb);

        Ok(Backward { loss, grads, cache })
    }

    /// Folds the batch statistics of a train-mode pass into the running
    /// estimates.
    pub fn update_running_stats(&mut self, cache: &ForwardCache<T>) {
        let p = &mut self.params;
        p.stem_bn.update_running(&cache.stem_bn);
        for (b, bc) in p.blocks.iter_mut().zip(&cache.blocks) {
            b.bn_a.update_running(&bc.bn_a);
            b.bn_b.update_running(&bc.bn_b);
        }
        for (d, dc) in p.dense.iter_mut().zip(&cache.dense) {
            d.bn.update_running(&dc.bn);
        }
    }

    pub fn flat_features_of(cache: &ForwardCache<T>) -> &[T] {
        &cache.flat
    }
}

struct ConvTrace<T> {
    stem_bn: BnCache<T>,
    stem_act: Vec<T>,
    blocks: Vec<BlockCache<T>>,
}

fn pair<T>(grads: &mut [Tensor<T>], i: usize) -> (&mut Tensor<T>, &mut Tensor<T>) {
    let (a, b) = grads[i..].split_at_mut(1);
    (&mut a[0], &mut b[0])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::to_bit_vector;
    use rand::Rng;

    fn small_cfg() -> ModelConfig {
        ModelConfig {
            block1_filters: 4,
            dense_widths: vec![6, 5],
            ..ModelConfig::default()
        }
    }

    fn random_batch<T: Real>(n: usize, seed: u64) -> Tensor<T> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v: Vec<_> = (0..n).map(|_| to_bit_vector(rng.gen())).collect();
        reshape_input(&v)
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig::default().validate().is_ok());
        let mut c = ModelConfig::default();
        c.word_size = 8;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::default();
        c.dense_widths.clear();
        assert!(c.validate().is_err());
        assert_eq!(ModelConfig::default().feature_dim(), 512);
    }

    #[test]
    fn reshape_layout() {
        let z: Tensor<f32> = reshape_input(&[to_bit_vector(0)]);
        assert_eq!(z.shape(), &[1, 2, 16]);
        assert!(z.data().iter().all(|&v| v == 0.0));
        let one: Tensor<f32> = reshape_input(&[to_bit_vector(1)]);
        // row 1, column 15
        assert_eq!(one.data()[16 + 15], 1.0);
        assert_eq!(one.data().iter().filter(|&&v| v == 1.0).count(), 1);
        let hi: Tensor<f32> = reshape_input(&[to_bit_vector(0x8000_0000)]);
        assert_eq!(hi.data()[0], 1.0);
    }

    #[test]
    fn flatten_inverts_reshape() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let v: Vec<_> = (0..1000).map(|_| to_bit_vector(rng.gen())).collect();
        let t: Tensor<f32> = reshape_input(&v);
        for (i, bv) in v.iter().enumerate() {
            assert_eq!(&flatten_input(&t, i).unwrap(), bv);
        }
    }

    #[test]
    fn outputs_are_probabilities() {
        let net = Network::<f32>::new(ModelConfig::default(), 1).unwrap();
        let x = random_batch::<f32>(16, 3);
        for mode in [Mode::Inference, Mode::Train] {
            let p = net.forward(&x, mode).unwrap();
            assert_eq!(p.shape(), &[16]);
            assert!(p.data().iter().all(|&v| v > 0.0 && v < 1.0));
        }
    }

    #[test]
    fn duplicate_rows_agree_in_inference() {
        let net = Network::<f32>::new(small_cfg(), 1).unwrap();
        let v = [to_bit_vector(7), to_bit_vector(0xabcdef), to_bit_vector(7)];
        let p = net.forward(&reshape_input(&v), Mode::Inference).unwrap();
        assert_eq!(p.data()[0], p.data()[2]);
    }

    #[test]
    fn inference_independent_of_batch_composition() {
        let net = Network::<f32>::new(small_cfg(), 4).unwrap();
        let x = random_batch::<f32>(8, 9);
        let all = net.forward(&x, Mode::Inference).unwrap();
        let first = Tensor::from_vec(&[1, 2, 16], x.data()[..32].to_vec()).unwrap();
        let alone = net.forward(&first, Mode::Inference).unwrap();
        assert_eq!(all.data()[0], alone.data()[0]);
    }

    #[test]
    fn shape_and_batch_errors() {
        let net = Network::<f32>::new(small_cfg(), 1).unwrap();
        let bad = Tensor::<f32>::zeros(&[3, 4, 8]);
        assert!(matches!(
            net.forward(&bad, Mode::Inference),
            Err(Error::Shape(_))
        ));
        let one = random_batch::<f32>(1, 1);
        assert!(matches!(
            net.forward(&one, Mode::Train),
            Err(Error::Shape(_))
        ));
        assert!(net.forward(&one, Mode::Inference).is_ok());
    }

    #[test]
    fn zeroed_residual_branch_is_identity() {
        let cfg = small_cfg();
        let mut net = Network::<f32>::new(cfg.clone(), 5).unwrap();
        for b in &mut net.params.blocks {
            for t in [
                &mut b.conv_a.weight,
                &mut b.conv_a.bias,
                &mut b.bn_a.gamma,
                &mut b.bn_a.beta,
                &mut b.conv_b.weight,
                &mut b.conv_b.bias,
                &mut b.bn_b.gamma,
                &mut b.bn_b.beta,
            ] {
                t.fill(0.0);
            }
        }
        let mut stem_only = net.clone();
        stem_only.config.residual_blocks = 0;
        stem_only.params.blocks.clear();
        let x = random_batch::<f32>(10, 6);
        assert_eq!(net.features(&x).unwrap(), stem_only.features(&x).unwrap());
        let a = net.forward_cached(&x, Mode::Train).unwrap();
        let b = stem_only.forward_cached(&x, Mode::Train).unwrap();
        assert_eq!(a.flat, b.flat);
    }

    #[test]
    fn bce_values() {
        let half = vec![0.5f64; 6];
        let y = vec![0.0, 1.0, 0.0, 1.0, 1.0, 0.0];
        assert!((bce_loss(&half, &y) - std::f64::consts::LN_2).abs() < 1e-12);
        assert!(bce_loss(&y, &y) < 1e-6);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p: Vec<f32> = (0..50).map(|_| rng.gen_range(0.01..0.99)).collect();
        let t: Vec<f32> = (0..50).map(|_| rng.gen_range(0..2) as f32).collect();
        let mut acc = 0.0f64;
        for i in 0..50 {
            let (pi, ti) = (p[i] as f64, t[i] as f64);
            acc += if ti == 1.0 {
                -pi.ln()
            } else {
                -(1.0 - pi).ln()
            };
        }
        assert!((bce_loss(&p, &t) - acc / 50.0).abs() < 1e-12);
    }

    #[test]
    fn threshold_is_half() {
        assert_eq!(predict_label(0.5), ClassLabel::First);
        assert_eq!(predict_label(0.5000001), ClassLabel::Second);
    }

    #[test]
    fn structure_check_rejects_mismatch() {
        let net = Network::<f32>::new(small_cfg(), 1).unwrap();
        assert!(Network::from_parts(small_cfg(), net.params.clone()).is_ok());
        assert!(Network::from_parts(ModelConfig::default(), net.params).is_err());
    }
}
