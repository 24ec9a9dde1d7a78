//! Randomized hyperparameter search with median pruning.
//!
//! Trial `i` draws its parameters from counter stream `i`, so the sampled
//! sequence does not depend on how earlier trials ended. A trial reports
//! validation accuracy at evenly spaced tree counts; from the second
//! checkpoint on it stops when its value is strictly below the median of the
//! values that completed trials reported at the same checkpoint.

use std::fmt::Write as _;
use std::ops::ControlFlow;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::features::FeatureMatrix;
use super::fit::GbdtTrainer;
use super::tree::GbdtHyperParams;
use crate::error::{Error, Result};
use crate::nn::layers::sigmoid;
use crate::seed::{derive_seed, stream_rng};

/// Closed bounds per hyperparameter. Rates, regularizers and
/// `min_child_weight` are drawn log-uniformly, the two sampling fractions
/// uniformly, depth and tree count uniformly over integers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SearchSpace {
    pub lambda: (f64, f64),
    pub alpha: (f64, f64),
    pub max_depth: (usize, usize),
    pub n_estimators: (usize, usize),
    pub learning_rate: (f64, f64),
    pub subsample: (f64, f64),
    pub colsample_bytree: (f64, f64),
    pub gamma: (f64, f64),
    pub min_child_weight: (f64, f64),
    pub reg_alpha: (f64, f64),
    pub reg_lambda: (f64, f64),
}

impl Default for SearchSpace {
    fn default() -> Self {
        SearchSpace {
            lambda: (1e-3, 10.0),
            alpha: (1e-3, 10.0),
            max_depth: (3, 9),
            n_estimators: (50, 1000),
            learning_rate: (0.01, 1.0),
            subsample: (0.5, 1.0),
            colsample_bytree: (0.5, 1.0),
            gamma: (1e-8, 1.0),
            min_child_weight: (1.0, 10.0),
            reg_alpha: (1e-8, 1.0),
            reg_lambda: (1e-8, 1.0),
        }
    }
}

impl SearchSpace {
    fn log_ranges(&self) -> [(&'static str, (f64, f64)); 7] {
        [
            ("lambda", self.lambda),
            ("alpha", self.alpha),
            ("learning_rate", self.learning_rate),
            ("gamma", self.gamma),
            ("min_child_weight", self.min_child_weight),
            ("reg_alpha", self.reg_alpha),
            ("reg_lambda", self.reg_lambda),
        ]
    }

    pub fn validate(&self) -> Result<()> {
        for (name, (lo, hi)) in self.log_ranges() {
            if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
                return Err(Error::Config(format!(
                    "{name} range [{lo}, {hi}] is not a positive interval"
                )));
            }
        }
        for (name, (lo, hi)) in [
            ("subsample", self.subsample),
            ("colsample_bytree", self.colsample_bytree),
        ] {
            if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
                return Err(Error::Config(format!(
                    "{name} range [{lo}, {hi}] must lie in (0, 1]"
                )));
            }
        }
        for (name, (lo, hi)) in [
            ("max_depth", self.max_depth),
            ("n_estimators", self.n_estimators),
        ] {
            if lo == 0 || lo > hi {
                return Err(Error::Config(format!(
                    "{name} range [{lo}, {hi}] is empty or starts at 0"
                )));
            }
        }
        if self.max_depth.1 > 32 {
            return Err(Error::Config("max_depth above 32".into()));
        }
        Ok(())
    }
}

fn log_uniform<R: Rng>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        return lo;
    }
    rng.gen_range(lo.ln()..hi.ln()).exp().clamp(lo, hi)
}

fn uniform<R: Rng>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        return lo;
    }
    rng.gen_range(lo..=hi)
}

/// One draw from `space`, in field declaration order.
pub fn sample_hyperparams<R: Rng>(space: &SearchSpace, rng: &mut R) -> GbdtHyperParams {
    GbdtHyperParams {
        lambda: log_uniform(rng, space.lambda),
        alpha: log_uniform(rng, space.alpha),
        max_depth: rng.gen_range(space.max_depth.0..=space.max_depth.1),
        n_estimators: rng.gen_range(space.n_estimators.0..=space.n_estimators.1),
        learning_rate: log_uniform(rng, space.learning_rate),
        subsample: uniform(rng, space.subsample),
        colsample_bytree: uniform(rng, space.colsample_bytree),
        gamma: log_uniform(rng, space.gamma),
        min_child_weight: log_uniform(rng, space.min_child_weight),
        reg_alpha: log_uniform(rng, space.reg_alpha),
        reg_lambda: log_uniform(rng, space.reg_lambda),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TuneConfig {
    pub trials: usize,
    pub checkpoints: usize,
    pub seed: u64,
    pub space: SearchSpace,
}

impl Default for TuneConfig {
    fn default() -> Self {
        TuneConfig {
            trials: 50,
            checkpoints: 5,
            seed: 0,
            space: SearchSpace::default(),
        }
    }
}

impl TuneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.trials == 0 {
            return Err(Error::Config(
                "at least one tuning trial is required".into(),
            ));
        }
        if self.checkpoints == 0 {
            return Err(Error::Config("at least one checkpoint is required".into()));
        }
        self.space.validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub id: usize,
    pub params: GbdtHyperParams,
    /// Tree counts at which validation accuracy was taken.
    pub checkpoint_trees: Vec<usize>,
    pub checkpoint_scores: Vec<f64>,
    /// `None` for pruned trials.
    pub final_score: Option<f64>,
    pub pruned: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TuneOutcome {
    pub best: GbdtHyperParams,
    pub best_trial: usize,
    pub best_score: f64,
    pub trials: Vec<TrialRecord>,
}

/// Checkpoint values of completed trials, by checkpoint index.
#[derive(Clone, Debug, Default)]
pub struct MedianPruner {
    completed: Vec<Vec<f64>>,
}

impl MedianPruner {
    pub fn should_prune(&self, checkpoint: usize, value: f64) -> bool {
        if checkpoint == 0 {
            return false;
        }
        let mut vals: Vec<f64> = self
            .completed
            .iter()
            .filter_map(|t| t.get(checkpoint).copied())
            .collect();
        if vals.is_empty() {
            return false;
        }
        vals.sort_by(f64::total_cmp);
        let m = vals.len();
        let median = if m % 2 == 1 {
            vals[m / 2]
        } else {
            (vals[m / 2 - 1] + vals[m / 2]) / 2.0
        };
        value < median
    }

    pub fn complete(&mut self, scores: Vec<f64>) {
        self.completed.push(scores);
    }
}

/// Tree counts `max(1, round(n * k / c))` for `k = 1..=c`.
pub fn checkpoint_schedule(n_estimators: usize, checkpoints: usize) -> Vec<usize> {
    (1..=checkpoints)
        .map(|k| {
            ((n_estimators * k) as f64 / checkpoints as f64)
                .round()
                .max(1.0) as usize
        })
        .collect()
}

/// Runs `cfg.trials` sampled trials fitted on `train` and scored by accuracy
/// on `val`.
pub fn tune(train: &FeatureMatrix, val: &FeatureMatrix, cfg: &TuneConfig) -> Result<TuneOutcome> {
    cfg.validate()?;
    let param_seed = derive_seed(cfg.seed, "tune/params");
    let params = (0..cfg.trials)
        .map(|id| sample_hyperparams(&cfg.space, &mut stream_rng(param_seed, id as u64)))
        .collect();
    let trainer = GbdtTrainer::new(train)?;
    run_trials(&trainer, val, params, cfg.checkpoints, cfg.seed)
}

/// Runs one trial per parameter set, in order, under a shared median
/// pruner. The best trial has the highest final score; ties go to the
/// earlier trial.
pub fn run_trials(
    trainer: &GbdtTrainer,
    val: &FeatureMatrix,
    params: Vec<GbdtHyperParams>,
    checkpoints: usize,
    seed: u64,
) -> Result<TuneOutcome> {
    if params.is_empty() || checkpoints == 0 {
        return Err(Error::Config(
            "need at least one trial and one checkpoint".into(),
        ));
    }
    let train = trainer.features();
    if val.cols() != train.cols() {
        return Err(Error::Shape(format!(
            "validation matrix has {} features, training matrix {}",
            val.cols(),
            train.cols()
        )));
    }
    if val.rows() == 0 {
        return Err(Error::EmptyEvaluation);
    }
    let mut pruner = MedianPruner::default();
    let mut trials = Vec::with_capacity(params.len());
    let targets: Vec<bool> = val.labels().iter().map(|l| l.target() == 1.0).collect();

    for (id, params) in params.into_iter().enumerate() {
        let schedule = checkpoint_schedule(params.n_estimators, checkpoints);
        let mut sums = vec![0.0f64; val.rows()];
        let mut scores = Vec::new();
        let mut pruned = false;
        let fit_seed = derive_seed(seed, &format!("tune/fit/{id}"));
        trainer.fit_with(&params, fit_seed, |round, ens| {
            let tree = ens.trees.last().expect("one tree per round");
            for (i, s) in sums.iter_mut().enumerate() {
                *s += tree.eval(val.row(i));
            }
            let done = round + 1;
            while scores.len() < schedule.len() && schedule[scores.len()] == done {
                let correct = sums
                    .iter()
                    .zip(&targets)
                    .filter(|(&s, &t)| (sigmoid(ens.margin_from_sum(s)) > 0.5) == t)
                    .count();
                let acc = correct as f64 / val.rows() as f64;
                let stop = pruner.should_prune(scores.len(), acc);
                scores.push(acc);
                if stop {
                    pruned = true;
                    return ControlFlow::Break(());
                }
            }
            ControlFlow::Continue(())
        })?;
        let final_score = (!pruned).then(|| *scores.last().expect("final checkpoint"));
        if !pruned {
            pruner.complete(scores.clone());
        }
        log::debug!("trial {id}: {scores:?} pruned={pruned}");
        trials.push(TrialRecord {
            id,
            params,
            checkpoint_trees: schedule[..scores.len()].to_vec(),
            checkpoint_scores: scores,
            final_score,
            pruned,
        });
    }

    let (best_trial, best_score) = trials
        .iter()
        .filter_map(|t| t.final_score.map(|s| (t.id, s)))
        .fold(None, |acc: Option<(usize, f64)>, (id, s)| match acc {
            Some((_, b)) if s <= b => acc,
            _ => Some((id, s)),
        })
        .expect("the first trial is never pruned");
    Ok(TuneOutcome {
        best: trials[best_trial].params.clone(),
        best_trial,
        best_score,
        trials,
    })
}

pub const TRIALS_HEADER: &str = "trial,lambda,alpha,max_depth,n_estimators,learning_rate,subsample,colsample_bytree,gamma,min_child_weight,reg_alpha,reg_lambda,checkpoint_trees,checkpoint_scores,final_score,pruned";

/// One comma-separated row per trial; checkpoint lists are `;`-separated and
/// a missing final score is written `NA`.
pub fn trials_csv(trials: &[TrialRecord]) -> String {
    let mut out = String::from(TRIALS_HEADER);
    out.push('\n');
    for t in trials {
        let p = &t.params;
        let join = |v: Vec<String>| v.join(";");
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            t.id,
            p.lambda,
            p.alpha,
            p.max_depth,
            p.n_estimators,
            p.learning_rate,
            p.subsample,
            p.colsample_bytree,
            p.gamma,
            p.min_child_weight,
            p.reg_alpha,
            p.reg_lambda,
            join(t.checkpoint_trees.iter().map(|v| v.to_string()).collect()),
            join(t.checkpoint_scores.iter().map(|v| v.to_string()).collect()),
            t.final_score.map_or("NA".to_string(), |v| v.to_string()),
            t.pruned
        );
    }
    out
}
