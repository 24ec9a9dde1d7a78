use log::info;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::model::{
    dataset_inputs, dataset_targets, predict_label, Mode, ModelConfig, ModelParams, Network,
};
use super::tensor::{Real, Tensor};
use crate::data::{ClassLabel, Dataset, DatasetHeader};
use crate::error::{Error, Result};
use crate::metrics::ConfusionCounts;
use crate::seed::{derive_seed, stream_rng};

/// Samples per inference chunk.
const EVAL_CHUNK: usize = 4096;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_high: f64,
    pub lr_low: f64,
    pub lr_cycle_epochs: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            batch_size: 500,
            lr_high: 2e-3,
            lr_low: 1e-4,
            lr_cycle_epochs: 10,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Full-scale schedule: 200 epochs at batch 5000.
    pub fn full_scale() -> Self {
        TrainConfig {
            epochs: 200,
            batch_size: 5000,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("train: {m}")));
        if self.batch_size < 2 {
            return bad("batch_size must be at least 2 (batch normalization)");
        }
        if self.epochs == 0 {
            return bad("epochs must be positive");
        }
        if !(self.lr_low > 0.0 && self.lr_low <= self.lr_high) {
            return bad("need 0 < lr_low <= lr_high");
        }
        if self.lr_cycle_epochs == 0 {
            return bad("lr_cycle_epochs must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("moment decays must lie in [0, 1)");
        }
        if self.epsilon <= 0.0 {
            return bad("epsilon must be positive");
        }
        Ok(())
    }
}

/// Sawtooth from `lr_high` at the start of each cycle down to `lr_low` at
/// its last epoch.
pub fn cyclic_lr(epoch: usize, cfg: &TrainConfig) -> f64 {
    let c = cfg.lr_cycle_epochs;
    if c <= 1 {
        return cfg.lr_high;
    }
    let pos = (c - 1 - epoch % c) as f64 / (c - 1) as f64;
    cfg.lr_low + pos * (cfg.lr_high - cfg.lr_low)
}

/// Adaptive-moment optimizer state, one slot per trainable tensor.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
    step: i32,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
}

impl<T: Real> Adam<T> {
    pub fn new(params: &ModelParams<T>, cfg: &TrainConfig) -> Self {
        Adam {
            m: params.zero_grads(),
            v: params.zero_grads(),
            step: 0,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            epsilon: cfg.epsilon,
        }
    }

    pub fn apply(&mut self, params: &mut ModelParams<T>, grads: &[Tensor<T>], lr: f64) {
        self.step += 1;
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let (one_b1, one_b2) = (T::one() - b1, T::one() - b2);
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        let step_size = T::lit(lr * c2.sqrt() / c1);
        let eps = T::lit(self.epsilon * c2.sqrt());
        for (((p, g), m), v) in params
            .trainable_mut()
            .into_iter()
            .zip(grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            for (((pv, &gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mv = b1 * *mv + one_b1 * gv;
                *vv = b2 * *vv + one_b2 * gv * gv;
                *pv -= step_size * *mv / (vv.sqrt() + eps);
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingProvenance {
    pub train_data: DatasetHeader,
    pub val_data: DatasetHeader,
    pub train_config: TrainConfig,
    pub epochs: Vec<EpochLog>,
    pub best_epoch: usize,
    pub train_loss: f64,
    pub val_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainedModel {
    pub network: Network<f32>,
    pub provenance: TrainingProvenance,
}

impl TrainedModel {
    pub fn config(&self) -> &ModelConfig {
        &self.network.config
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Evaluation {
    pub counts: ConfusionCounts,
    pub accuracy: f64,
}

fn check_trainable_dataset(ds: &Dataset, what: &str) -> Result<()> {
    if ds.is_empty() {
        return Err(Error::Config(format!("{what} dataset is empty")));
    }
    if ds.header.class_counts.contains(&0) {
        return Err(Error::DegenerateLabels);
    }
    Ok(())
}

/// Mini-batch training with the cyclic schedule. Returns the parameters of
/// the epoch with the highest validation accuracy (earliest on ties).
pub fn train(
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    train_ds: &Dataset,
    val_ds: &Dataset,
) -> Result<TrainedModel> {
    model_cfg.validate()?;
    train_cfg.validate()?;
    check_trainable_dataset(train_ds, "training")?;
    check_trainable_dataset(val_ds, "validation")?;

    let mut net = Network::<f32>::new(model_cfg.clone(), derive_seed(train_cfg.seed, "init"))?;
    let mut adam = Adam::new(&net.params, train_cfg);
    let x_all: Tensor<f32> = dataset_inputs(train_ds);
    let y_all: Vec<f32> = dataset_targets(train_ds);
    let n = train_ds.len();
    let shuffle_seed = derive_seed(train_cfg.seed, "shuffle");

    let mut order: Vec<usize> = (0..n).collect();
    let mut log = Vec::with_capacity(train_cfg.epochs);
    let mut best: Option<(f64, usize, f64, ModelParams<f32>)> = None;
    let mut xb = Vec::with_capacity(train_cfg.batch_size * 32);
    let mut yb = Vec::with_capacity(train_cfg.batch_size);

    for epoch in 0..train_cfg.epochs {
        let lr = cyclic_lr(epoch, train_cfg);
        order.shuffle(&mut stream_rng(shuffle_seed, epoch as u64));
        let mut loss_sum = 0.0;
        let mut seen = 0usize;
        for (step, batch) in order.chunks(train_cfg.batch_size).enumerate() {
            if batch.len() < 2 {
                continue;
            }
            xb.clear();
            yb.clear();
            for &i in batch {
                xb.extend_from_slice(&x_all.data()[i * 32..(i + 1) * 32]);
                yb.push(y_all[i]);
            }
            let x = Tensor::from_vec(&[batch.len(), 2, 16], std::mem::take(&mut xb))?;
            let out = net.backward(&x, &yb, Mode::Train)?;
            xb = x.into_data();
            if !out.loss.is_finite() || out.grads.iter().any(|g| !g.all_finite()) {
                return Err(Error::Divergence {
                    epoch,
                    step,
                    loss: out.loss,
                });
            }
            adam.apply(&mut net.params, &out.grads, lr);
            net.update_running_stats(&out.cache);
            loss_sum += out.loss * batch.len() as f64;
            seen += batch.len();
        }
        if !net.params.all_finite() {
            return Err(Error::Divergence {
                epoch,
                step: 0,
                loss: f64::NAN,
            });
        }
        let train_loss = loss_sum / seen.max(1) as f64;
        let val_accuracy = evaluate_network(&net, val_ds)?.accuracy;
        info!(
            "epoch {epoch:>3}  lr {lr:.6}  train loss {train_loss:.6}  val acc {val_accuracy:.4}"
        );
        log.push(EpochLog {
            epoch,
            lr,
            train_loss,
            val_accuracy,
        });
        if best.as_ref().map_or(true, |b| val_accuracy > b.0) {
            best = Some((val_accuracy, epoch, train_loss, net.params.clone()));
        }
    }

    let (val_accuracy, best_epoch, train_loss, params) = best.expect("at least one epoch");
    Ok(TrainedModel {
        network: Network {
            config: model_cfg.clone(),
            params,
        },
        provenance: TrainingProvenance {
            train_data: train_ds.header.clone(),
            val_data: val_ds.header.clone(),
            train_config: train_cfg.clone(),
            epochs: log,
            best_epoch,
            train_loss,
            val_accuracy,
        },
    })
}

/// Inference-mode probabilities for every record, in dataset order.
pub fn predict_dataset<T: Real>(net: &Network<T>, ds: &Dataset) -> Result<Vec<T>> {
    let x: Tensor<T> = dataset_inputs(ds);
    let mut out = Vec::with_capacity(ds.len());
    for chunk in x.data().chunks(EVAL_CHUNK * 32) {
        let t = Tensor::from_vec(&[chunk.len() / 32, 2, 16], chunk.to_vec())?;
        out.extend_from_slice(net.forward(&t, Mode::Inference)?.data());
    }
    Ok(out)
}

pub fn evaluate_network<T: Real>(net: &Network<T>, ds: &Dataset) -> Result<Evaluation> {
    let probs = predict_dataset(net, ds)?;
    let counts = ConfusionCounts::from_pairs(
        ds.records
            .iter()
            .zip(&probs)
            .map(|(r, p)| (r.label, predict_label(p.f64()))),
    );
    let total = counts.total();
    if total == 0 {
        return Err(Error::EmptyEvaluation);
    }
    Ok(Evaluation {
        counts,
        accuracy: (counts.tp + counts.tn) as f64 / total as f64,
    })
}

/// Threshold-0.5 evaluation of a trained model on `ds`.
pub fn evaluate(model: &TrainedModel, ds: &Dataset) -> Result<Evaluation> {
    if ds.header.message_pair != model.provenance.train_data.message_pair {
        return Err(Error::Incompatible(format!(
            "model was trained on message pair {:?}, dataset uses {:?}",
            model.provenance.train_data.message_pair, ds.header.message_pair
        )));
    }
    evaluate_network(&model.network, ds)
}

/// Labels predicted for `ds`, in order.
pub fn predict_labels(model: &TrainedModel, ds: &Dataset) -> Result<Vec<ClassLabel>> {
    Ok(predict_dataset(&model.network, ds)?
        .into_iter()
        .map(|p| predict_label(p as f64))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_dataset, GeneratorConfig, IvMode, NamedKey};
    use crate::metrics::compute_metrics;
    use rand::Rng;

    fn lr_cfg(cycle: usize) -> TrainConfig {
        TrainConfig {
            lr_cycle_epochs: cycle,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn cyclic_schedule_shape() {
        let c = lr_cfg(10);
        assert_eq!(cyclic_lr(0, &c), c.lr_high);
        assert_eq!(cyclic_lr(10, &c), c.lr_high);
        assert!((cyclic_lr(9, &c) - c.lr_low).abs() < 1e-18);
        for e in 1..10 {
            assert!(cyclic_lr(e, &c) < cyclic_lr(e - 1, &c));
        }
        let odd = lr_cfg(11);
        assert!((cyclic_lr(5, &odd) - 0.5 * (odd.lr_high + odd.lr_low)).abs() < 1e-15);
        assert_eq!(cyclic_lr(3, &lr_cfg(1)), c.lr_high);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let mut c = TrainConfig::default();
        c.lr_low = 1.0;
        assert!(c.validate().is_err());
        let mut c = TrainConfig::default();
        c.batch_size = 1;
        assert!(c.validate().is_err());
    }

    fn tiny_model() -> ModelConfig {
        ModelConfig {
            block1_filters: 4,
            dense_widths: vec![8, 8],
            ..ModelConfig::default()
        }
    }

    fn fixed_iv(n: u64, seed: u64) -> Dataset {
        let mut g = GeneratorConfig::new(NamedKey::k1(), 5, n, seed);
        g.iv_mode = IvMode::Fixed(0x0bad_cafe);
        generate_dataset(&g).unwrap()
    }

    #[test]
    fn learns_two_constant_classes() {
        let tc = TrainConfig {
            epochs: 5,
            batch_size: 64,
            ..TrainConfig::default()
        };
        let m = train(&tiny_model(), &tc, &fixed_iv(200, 1), &fixed_iv(100, 2)).unwrap();
        assert!(m.provenance.val_accuracy >= 0.99);
        let e = evaluate(&m, &fixed_iv(100, 3)).unwrap();
        assert!(e.accuracy >= 0.99);
        assert_eq!(e.counts.total(), 200);
    }

    #[test]
    fn training_is_deterministic() {
        let tc = TrainConfig {
            epochs: 2,
            batch_size: 32,
            seed: 9,
            ..TrainConfig::default()
        };
        let tr = generate_dataset(&GeneratorConfig::new(NamedKey::k1(), 5, 100, 1)).unwrap();
        let va = generate_dataset(&GeneratorConfig::new(NamedKey::k1(), 5, 50, 2)).unwrap();
        let a = train(&tiny_model(), &tc, &tr, &va).unwrap();
        let b = train(&tiny_model(), &tc, &tr, &va).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.provenance.epochs.len(), 2);
    }

    #[test]
    fn best_epoch_tie_goes_to_earlier() {
        let tc = TrainConfig {
            epochs: 4,
            batch_size: 64,
            ..TrainConfig::default()
        };
        let m = train(&tiny_model(), &tc, &fixed_iv(200, 1), &fixed_iv(100, 2)).unwrap();
        let best = m.provenance.val_accuracy;
        let first = m
            .provenance
            .epochs
            .iter()
            .find(|e| e.val_accuracy == best)
            .unwrap();
        assert_eq!(first.epoch, m.provenance.best_epoch);
    }

    #[test]
    fn rejects_single_class_data() {
        let ds = fixed_iv(10, 1);
        let first_only = ds.select(
            &(0..ds.len())
                .filter(|&i| ds.records[i].label == ClassLabel::First)
                .collect::<Vec<_>>(),
        );
        assert!(matches!(
            train(&tiny_model(), &TrainConfig::default(), &first_only, &ds),
            Err(Error::DegenerateLabels)
        ));
    }

    #[test]
    fn diverging_learning_rate_is_reported() {
        let tc = TrainConfig {
            epochs: 3,
            batch_size: 16,
            lr_high: 1e30,
            lr_low: 1e30,
            ..TrainConfig::default()
        };
        let r = train(&tiny_model(), &tc, &fixed_iv(64, 1), &fixed_iv(16, 2));
        assert!(matches!(r, Err(Error::Divergence { .. })), "{r:?}");
    }

    #[test]
    fn coin_flip_predictions_score_half() {
        let mut rng = stream_rng(77, 0);
        let pairs = (0..20_000).map(|i| {
            let actual = if i % 2 == 0 {
                ClassLabel::First
            } else {
                ClassLabel::Second
            };
            let guess = if rng.gen::<bool>() {
                ClassLabel::First
            } else {
                ClassLabel::Second
            };
            (actual, guess)
        });
        let r = compute_metrics(&ConfusionCounts::from_pairs(pairs)).unwrap();
        assert!((r.accuracy - 0.5).abs() < 0.02);
    }
}
