//! Fourth-order central finite-difference verification of [`Network::backward`].
//!
//! Reference derivatives are always taken on an `f64` copy of the network,
//! so a `f32` check measures the error of the `f32` reverse pass itself.
//! Coordinates whose probes switch any ReLU are skipped: the loss is
//! not differentiable between them and the difference quotient is meaningless.

use super::model::{Mode, Network};
use super::tensor::{Real, Tensor};
use crate::error::Result;

/// Gradient entries smaller than this are compared on absolute error.
pub const GRADCHECK_FLOOR: f64 = 1e-3;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
    /// Coordinates skipped because a probe crossed a ReLU kink.
    pub skipped: usize,
}

/// `|a - b| / max(|a|, |b|, GRADCHECK_FLOOR)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(GRADCHECK_FLOOR)
}

/// Checks every trainable scalar of `net`.
pub fn gradient_check<T: Real>(
    net: &Network<T>,
    x: &Tensor<T>,
    targets: &[T],
    mode: Mode,
    step: f64,
) -> Result<GradCheckReport> {
    let analytic = net.backward(x, targets, mode)?.grads;
    let mut probe: Network<f64> = net.cast();
    let x64: Tensor<f64> = x.cast();
    let y64: Vec<f64> = targets.iter().map(|v| v.f64()).collect();
    let names: Vec<String> = net.params.trainable().into_iter().map(|(n, _)| n).collect();
    let base_pattern = probe.forward_cached(&x64, mode)?.relu_pattern();

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
        skipped: 0,
    };
    for (pi, name) in names.iter().enumerate() {
        let len = analytic[pi].len();
        for i in 0..len {
            let orig = probe.params.trainable_mut()[pi].data()[i];
            let mut f = [0.0f64; 4];
            let mut crossed = false;
            for (slot, k) in [2.0, 1.0, -1.0, -2.0].into_iter().enumerate() {
                probe.params.trainable_mut()[pi].data_mut()[i] = orig + k * step;
                let (loss, pattern) = probe.loss_and_pattern(&x64, &y64, mode)?;
                f[slot] = loss;
                crossed |= pattern != base_pattern;
            }
            probe.params.trainable_mut()[pi].data_mut()[i] = orig;
            if crossed {
                report.skipped += 1;
                continue;
            }
            let numeric = (-f[0] + 8.0 * f[1] - 8.0 * f[2] + f[3]) / (12.0 * step);
            let a = analytic[pi].data()[i].f64();
            let err = relative_error(a, numeric);
            report.checked += 1;
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst_param = name.clone();
                report.worst_index = i;
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}

impl Network<f64> {
    fn loss_and_pattern(&self, x: &Tensor<f64>, y: &[f64], mode: Mode) -> Result<(f64, Vec<bool>)> {
        let c = self.forward_cached(x, mode)?;
        Ok((super::model::bce_loss(&c.probs, y), c.relu_pattern()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::to_bit_vector;
    use crate::nn::model::{reshape_input, ModelConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> ModelConfig {
        ModelConfig {
            block1_filters: 3,
            residual_blocks: 1,
            dense_widths: vec![4, 3],
            ..ModelConfig::default()
        }
    }

    fn batch(seed: u64) -> (Tensor<f64>, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v: Vec<_> = (0..4).map(|_| to_bit_vector(rng.gen())).collect();
        (reshape_input(&v), vec![0.0, 1.0, 1.0, 0.0])
    }

    #[test]
    fn f64_train_mode_gradients() {
        let net = Network::<f64>::new(tiny(), 3).unwrap();
        let (x, y) = batch(1);
        let r = gradient_check(&net, &x, &y, Mode::Train, 1e-5).unwrap();
        assert!(r.max_rel_error <= 1e-6, "{r:?}");
    }

    #[test]
    fn f64_inference_mode_gradients() {
        let mut net = Network::<f64>::new(tiny(), 8).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for (t, train) in net.params.tensors_mut() {
            if !train {
                for v in t.data_mut() {
                    *v = rng.gen_range(0.2..1.5);
                }
            }
        }
        let (x, y) = batch(2);
        let r = gradient_check(&net, &x, &y, Mode::Inference, 1e-5).unwrap();
        assert!(r.max_rel_error <= 1e-6, "{r:?}");
    }

    #[test]
    fn f32_gradients_on_random_models() {
        for seed in 0..6u64 {
            let cfg = ModelConfig {
                block1_filters: 2 + seed as usize % 3,
                residual_blocks: 1 + seed as usize % 2,
                ..tiny()
            };
            let net = Network::<f32>::new(cfg, seed).unwrap();
            let (x, y) = batch(seed);
            let y: Vec<f32> = y.iter().map(|&v| v as f32).collect();
            let r = gradient_check(&net, &x.cast(), &y, Mode::Train, 1e-5).unwrap();
            assert!(r.max_rel_error <= 1e-3, "seed {seed}: {r:?}");
            assert!(r.skipped * 10 < r.checked);
        }
    }

    #[test]
    fn bias_before_batchnorm_has_no_gradient() {
        // Train-mode batch norm removes any per-channel constant, so the
        // preceding convolution bias receives no upstream signal.
        let net = Network::<f64>::new(tiny(), 3).unwrap();
        let (x, y) = batch(1);
        let g = net.backward(&x, &y, Mode::Train).unwrap().grads;
        let names: Vec<_> = net.params.trainable().into_iter().map(|(n, _)| n).collect();
        let i = names.iter().position(|n| n == "stem.conv.bias").unwrap();
        assert!(g[i].data().iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn half_batch_gradients_average_to_full_batch() {
        // Inference-mode batch norm makes per-sample losses independent, so
        // the mean gradient is exactly linear in the batch.
        let net = Network::<f64>::new(tiny(), 9).unwrap();
        let (x, y) = batch(5);
        let full = net.backward(&x, &y, Mode::Inference).unwrap().grads;
        let xa = Tensor::from_vec(&[2, 2, 16], x.data()[..64].to_vec()).unwrap();
        let xb = Tensor::from_vec(&[2, 2, 16], x.data()[64..].to_vec()).unwrap();
        let ga = net.backward(&xa, &y[..2], Mode::Inference).unwrap().grads;
        let gb = net.backward(&xb, &y[2..], Mode::Inference).unwrap().grads;
        for ((f, a), b) in full.iter().zip(&ga).zip(&gb) {
            for ((fv, av), bv) in f.data().iter().zip(a.data()).zip(b.data()) {
                assert!((fv - 0.5 * (av + bv)).abs() < 1e-12);
            }
        }
    }
}
