//! Scenario matrix, both pipelines end to end, and report emission.
//!
//! Every dataset seed is derived from the run's master seed and a label that
//! names the stage, side, key and rounds, so a row can be regenerated from
//! its provenance alone.

use std::collections::HashMap;
use std::fmt::{self, Write as _};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::data::{
    generate_dataset, split_dataset, Dataset, DatasetHeader, GeneratorConfig, IvMode, NamedKey,
};
use crate::error::{Error, Result};
use crate::gbdt::tree::predict_labels as gbdt_labels;
use crate::gbdt::{extract_features, fit_gbdt, tune, GbdtHyperParams, SearchSpace, TuneConfig};
use crate::metrics::{compute_metrics, ConfusionCounts, Rates};
use crate::nn::io::encode_model;
use crate::nn::{evaluate, train, ModelConfig, TrainConfig, TrainedModel};
use crate::seed::{derive_seed, sha256_hex};
use crate::speck::{check_rounds, CipherKey, MAX_ROUNDS};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Pipeline {
    #[serde(rename = "DL")]
    Dl,
    #[serde(rename = "TL")]
    Tl,
}

impl Pipeline {
    pub fn name(self) -> &'static str {
        match self {
            Pipeline::Dl => "DL",
            Pipeline::Tl => "TL",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "DL" => Ok(Pipeline::Dl),
            "TL" => Ok(Pipeline::Tl),
            _ => Err(Error::Malformed(format!("unknown pipeline {s:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioKind {
    SameKeySameRound,
    SameRoundDiffKey,
    DiffRoundSameKey,
    DiffRoundDiffKey,
}

impl ScenarioKind {
    pub const ALL: [ScenarioKind; 4] = [
        ScenarioKind::SameKeySameRound,
        ScenarioKind::SameRoundDiffKey,
        ScenarioKind::DiffRoundSameKey,
        ScenarioKind::DiffRoundDiffKey,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ScenarioKind::SameKeySameRound => "same_key_same_round",
            ScenarioKind::SameRoundDiffKey => "same_round_diff_key",
            ScenarioKind::DiffRoundSameKey => "diff_round_same_key",
            ScenarioKind::DiffRoundDiffKey => "diff_round_diff_key",
        }
    }

    pub fn title(self) -> &'static str {
        match self {
            ScenarioKind::SameKeySameRound => "Same Round, Same Key",
            ScenarioKind::SameRoundDiffKey => "Same Round, Different Key",
            ScenarioKind::DiffRoundSameKey => "Different Round, Same Key",
            ScenarioKind::DiffRoundDiffKey => "Different Round, Different Key",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Malformed(format!("unknown scenario {s:?}")))
    }

    pub fn of(same_key: bool, same_rounds: bool) -> Self {
        match (same_key, same_rounds) {
            (true, true) => ScenarioKind::SameKeySameRound,
            (false, true) => ScenarioKind::SameRoundDiffKey,
            (true, false) => ScenarioKind::DiffRoundSameKey,
            (false, false) => ScenarioKind::DiffRoundDiffKey,
        }
    }
}

/// Train side and evaluation side of one cell of the matrix. The kind is
/// always derived from the keys and rounds.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Scenario {
    pub train_key: NamedKey,
    pub eval_key: NamedKey,
    pub train_rounds: usize,
    pub eval_rounds: usize,
}

impl Scenario {
    /// Evaluation rounds must equal the training rounds or differ by one.
    pub fn new(
        train_key: NamedKey,
        eval_key: NamedKey,
        train_rounds: usize,
        eval_rounds: usize,
    ) -> Result<Self> {
        check_rounds(train_rounds)?;
        check_rounds(eval_rounds)?;
        if train_rounds.abs_diff(eval_rounds) > 1 {
            return Err(Error::Config(format!(
                "evaluation rounds {eval_rounds} must be {train_rounds} or {train_rounds} +/- 1"
            )));
        }
        Ok(Scenario {
            train_key,
            eval_key,
            train_rounds,
            eval_rounds,
        })
    }

    pub fn kind(&self) -> ScenarioKind {
        ScenarioKind::of(
            self.train_key.key == self.eval_key.key,
            self.train_rounds == self.eval_rounds,
        )
    }

    /// Stable text id used in seed labels.
    pub fn id(&self) -> String {
        format!(
            "{}/{}/{}/{}",
            self.train_key.label(),
            self.train_rounds,
            self.eval_key.label(),
            self.eval_rounds
        )
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} ({} r{} -> {} r{})",
            self.kind().name(),
            self.train_key.label(),
            self.train_rounds,
            self.eval_key.label(),
            self.eval_rounds
        )
    }
}

/// The matrix for each training round count `r`: same key and different
/// key at `r`, then both at `r + 1` and `r - 1` where those are valid.
pub fn scenario_matrix(
    train_key: NamedKey,
    other_key: NamedKey,
    rounds: &[usize],
) -> Result<Vec<Scenario>> {
    let mut out = Vec::new();
    for &r in rounds {
        check_rounds(r)?;
        out.push(Scenario::new(train_key, train_key, r, r)?);
        out.push(Scenario::new(train_key, other_key, r, r)?);
        for e in [r + 1, r.wrapping_sub(1)] {
            if (1..=MAX_ROUNDS).contains(&e) {
                out.push(Scenario::new(train_key, train_key, r, e)?);
                out.push(Scenario::new(train_key, other_key, r, e)?);
            }
        }
    }
    Ok(out)
}

/// Samples-per-class points of a transfer sweep, each repeated per seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSpec {
    pub samples_per_class: Vec<u64>,
    pub seeds: Vec<u64>,
}

impl Default for SweepSpec {
    fn default() -> Self {
        SweepSpec {
            samples_per_class: vec![5_000, 10_000, 100_000, 200_000, 290_000],
            seeds: vec![0],
        }
    }
}

impl SweepSpec {
    pub fn validate(&self) -> Result<()> {
        if self.samples_per_class.is_empty() || self.seeds.is_empty() {
            return Err(Error::Config(
                "sweep needs at least one count and one seed".into(),
            ));
        }
        if self.samples_per_class[0] == 0 || self.samples_per_class.windows(2).any(|w| w[0] >= w[1])
        {
            return Err(Error::Config(
                "sweep counts must be positive and strictly ascending".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum RowResult {
    Metrics(Rates),
    Failed,
}

/// One line of the machine-readable report.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ReportRow {
    pub pipeline: Pipeline,
    pub scenario: Scenario,
    /// Transfer sweep point; `None` for deep-learning rows.
    pub samples_per_class: Option<u64>,
    pub result: RowResult,
    pub seed: u64,
}

impl ReportRow {
    pub fn rates(&self) -> Option<Rates> {
        match self.result {
            RowResult::Metrics(r) => Some(r),
            RowResult::Failed => None,
        }
    }

    fn sort_key(&self) -> impl Ord {
        (
            self.pipeline,
            self.scenario.kind(),
            self.scenario.train_rounds,
            self.scenario.eval_rounds,
            self.scenario.train_key.label(),
            self.scenario.eval_key.label(),
            self.samples_per_class,
            self.seed,
        )
    }
}

/// A row with its confusion counts and everything needed to regenerate it.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub row: ReportRow,
    pub counts: Option<ConfusionCounts>,
    pub provenance: serde_json::Value,
}

impl MetricsReport {
    pub fn failed(
        pipeline: Pipeline,
        scenario: Scenario,
        samples_per_class: Option<u64>,
        seed: u64,
        err: &Error,
    ) -> Self {
        MetricsReport {
            row: ReportRow {
                pipeline,
                scenario,
                samples_per_class,
                result: RowResult::Failed,
                seed,
            },
            counts: None,
            provenance: json!({ "error": err.to_string() }),
        }
    }
}

pub fn sort_reports(reports: &mut [MetricsReport]) {
    reports.sort_by(|a, b| a.row.sort_key().cmp(&b.row.sort_key()));
}

/// Refuses evaluation data generated from the same stream as training data.
pub fn ensure_disjoint(train: &DatasetHeader, eval: &DatasetHeader) -> Result<()> {
    if train.same_source(eval) {
        return Err(Error::Config(format!(
            "evaluation data shares its generation stream (seed {}) with training data",
            eval.seed
        )));
    }
    Ok(())
}

fn model_hash(model: &TrainedModel) -> Result<String> {
    Ok(sha256_hex(&encode_model(model)?))
}

fn metrics_report(
    pipeline: Pipeline,
    scenario: Scenario,
    samples_per_class: Option<u64>,
    seed: u64,
    counts: ConfusionCounts,
    provenance: serde_json::Value,
) -> Result<MetricsReport> {
    Ok(MetricsReport {
        row: ReportRow {
            pipeline,
            scenario,
            samples_per_class,
            result: RowResult::Metrics(compute_metrics(&counts)?),
            seed,
        },
        counts: Some(counts),
        provenance,
    })
}

// ---------------------------------------------------------------------------
// Experiment A

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentAConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub train_samples_per_class: u64,
    pub val_samples_per_class: u64,
    pub eval_samples_per_class: u64,
}

impl Default for ExperimentAConfig {
    fn default() -> Self {
        ExperimentAConfig {
            model: ModelConfig::default(),
            train: TrainConfig {
                epochs: 10,
                ..TrainConfig::default()
            },
            train_samples_per_class: 50_000,
            val_samples_per_class: 5_000,
            eval_samples_per_class: 10_000,
        }
    }
}

impl ExperimentAConfig {
    /// Full training scale: 10^7 training samples.
    pub fn full_scale() -> Self {
        ExperimentAConfig {
            model: ModelConfig::default(),
            train: TrainConfig::full_scale(),
            train_samples_per_class: 5_000_000,
            val_samples_per_class: 500_000,
            eval_samples_per_class: 500_000,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if self.train_samples_per_class == 0
            || self.val_samples_per_class == 0
            || self.eval_samples_per_class == 0
        {
            return Err(Error::Config("sample counts must be positive".into()));
        }
        Ok(())
    }
}

/// Trains the distinguisher for one train side (`key`, `rounds`).
pub fn train_side_model(
    key: NamedKey,
    rounds: usize,
    cfg: &ExperimentAConfig,
    master_seed: u64,
) -> Result<TrainedModel> {
    cfg.validate()?;
    let side = format!("{}/{rounds}", key.label());
    let tr = generate_dataset(&GeneratorConfig::new(
        key,
        rounds,
        cfg.train_samples_per_class,
        derive_seed(master_seed, &format!("A/train/{side}")),
    ))?;
    let va = generate_dataset(&GeneratorConfig::new(
        key,
        rounds,
        cfg.val_samples_per_class,
        derive_seed(master_seed, &format!("A/val/{side}")),
    ))?;
    let tc = TrainConfig {
        seed: derive_seed(master_seed, &format!("A/init/{side}")),
        ..cfg.train.clone()
    };
    train(&cfg.model, &tc, &tr, &va)
}

/// Evaluates a model trained on the scenario's train side against freshly
/// generated evaluation-side data.
pub fn evaluate_dl(
    model: &TrainedModel,
    scenario: Scenario,
    cfg: &ExperimentAConfig,
    master_seed: u64,
) -> Result<MetricsReport> {
    let p = &model.provenance;
    if p.train_data.named_key().key != scenario.train_key.key
        || p.train_data.rounds() != scenario.train_rounds
    {
        return Err(Error::Incompatible(format!(
            "model was trained on {} r{}, scenario expects {} r{}",
            p.train_data.named_key().label(),
            p.train_data.rounds(),
            scenario.train_key.label(),
            scenario.train_rounds
        )));
    }
    let eval = generate_dataset(&GeneratorConfig::new(
        scenario.eval_key,
        scenario.eval_rounds,
        cfg.eval_samples_per_class,
        derive_seed(master_seed, &format!("A/eval/{}", scenario.id())),
    ))?;
    ensure_disjoint(&p.train_data, &eval.header)?;
    ensure_disjoint(&p.val_data, &eval.header)?;
    let ev = evaluate(model, &eval)?;
    let provenance = json!({
        "train_data": p.train_data,
        "val_data": p.val_data,
        "eval_data": eval.header,
        "model_sha256": model_hash(model)?,
        "model_config": model.config(),
        "train_config": p.train_config,
        "best_epoch": p.best_epoch,
        "val_accuracy": p.val_accuracy,
    });
    metrics_report(
        Pipeline::Dl,
        scenario,
        None,
        master_seed,
        ev.counts,
        provenance,
    )
}

pub fn run_experiment_a(
    scenario: Scenario,
    cfg: &ExperimentAConfig,
    master_seed: u64,
) -> Result<MetricsReport> {
    let model = train_side_model(scenario.train_key, scenario.train_rounds, cfg, master_seed)?;
    evaluate_dl(&model, scenario, cfg, master_seed)
}

/// Runs every scenario, training one model per train side and reusing it
/// across evaluation sides. Failures become failed rows.
pub fn run_dl_matrix(
    scenarios: &[Scenario],
    cfg: &ExperimentAConfig,
    master_seed: u64,
) -> Vec<MetricsReport> {
    run_matrix(scenarios, &[], cfg, None, master_seed)
}

/// Deep-learning rows for `dl`, transfer sweeps for `tl`, sharing one
/// trained model per train side. Rows come back in input order, deep rows
/// first. A failure marks the affected rows and the run continues.
pub fn run_matrix(
    dl: &[Scenario],
    tl: &[Scenario],
    a: &ExperimentAConfig,
    b: Option<&ExperimentBConfig>,
    master_seed: u64,
) -> Vec<MetricsReport> {
    let mut models: HashMap<(CipherKey, usize), std::result::Result<TrainedModel, String>> =
        HashMap::new();
    let mut model_for = |s: &Scenario| -> Result<TrainedModel> {
        models
            .entry((s.train_key.key, s.train_rounds))
            .or_insert_with(|| {
                log::info!("training {} r{}", s.train_key.label(), s.train_rounds);
                train_side_model(s.train_key, s.train_rounds, a, master_seed)
                    .map_err(|e| e.to_string())
            })
            .clone()
            .map_err(|msg| Error::Config(format!("training failed: {msg}")))
    };
    let mut out = Vec::new();
    for &s in dl {
        let report = model_for(&s).and_then(|m| evaluate_dl(&m, s, a, master_seed));
        out.push(report.unwrap_or_else(|e| {
            log::warn!("{s} failed: {e}");
            MetricsReport::failed(Pipeline::Dl, s, None, master_seed, &e)
        }));
    }
    let Some(b) = b else { return out };
    for &s in tl {
        match model_for(&s).and_then(|m| run_experiment_b(s, &m, b, master_seed)) {
            Ok(rows) => out.extend(rows),
            Err(e) => {
                log::warn!("{s} failed: {e}");
                for &seed in &b.sweep.seeds {
                    let seed = derive_seed(master_seed, &format!("B/seed/{seed}"));
                    for &n in &b.sweep.samples_per_class {
                        out.push(MetricsReport::failed(Pipeline::Tl, s, Some(n), seed, &e));
                    }
                }
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Experiment B

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentBConfig {
    pub sweep: SweepSpec,
    /// Share of each sweep point's data held out for the reported metrics.
    pub holdout_fraction: f64,
    /// Share of the remaining data used as the tuning validation set.
    pub tune_val_fraction: f64,
    pub trials: usize,
    pub checkpoints: usize,
    pub space: SearchSpace,
}

impl Default for ExperimentBConfig {
    fn default() -> Self {
        ExperimentBConfig {
            sweep: SweepSpec::default(),
            holdout_fraction: 0.2,
            tune_val_fraction: 0.2,
            trials: 50,
            checkpoints: 5,
            space: SearchSpace::default(),
        }
    }
}

impl ExperimentBConfig {
    pub fn validate(&self) -> Result<()> {
        self.sweep.validate()?;
        for (name, v) in [
            ("holdout_fraction", self.holdout_fraction),
            ("tune_val_fraction", self.tune_val_fraction),
        ] {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::Config(format!(
                    "{name} must lie strictly between 0 and 1"
                )));
            }
        }
        self.tune_config(0).validate()
    }

    fn tune_config(&self, seed: u64) -> TuneConfig {
        TuneConfig {
            trials: self.trials,
            checkpoints: self.checkpoints,
            seed,
            space: self.space.clone(),
        }
    }
}

/// One sweep point: generate evaluation-condition data, hold out a share,
/// tune on the rest, refit the best parameters on all of it and score the
/// holdout.
pub fn transfer_point(
    model: &TrainedModel,
    scenario: Scenario,
    samples_per_class: u64,
    cfg: &ExperimentBConfig,
    seed: u64,
) -> Result<MetricsReport> {
    let point = format!("{}/{samples_per_class}", scenario.id());
    let data = generate_dataset(&GeneratorConfig::new(
        scenario.eval_key,
        scenario.eval_rounds,
        samples_per_class,
        derive_seed(seed, &format!("B/data/{point}")),
    ))?;
    let p = &model.provenance;
    ensure_disjoint(&p.train_data, &data.header)?;
    ensure_disjoint(&p.val_data, &data.header)?;
    let (holdout, rest) = split_dataset(
        &data,
        cfg.holdout_fraction,
        derive_seed(seed, &format!("B/holdout/{point}")),
    )?;
    let (val, fit) = split_dataset(
        &rest,
        cfg.tune_val_fraction,
        derive_seed(seed, &format!("B/tuneval/{point}")),
    )?;

    let fm_fit = extract_features(model, &fit)?;
    let fm_val = extract_features(model, &val)?;
    let tuned = tune(
        &fm_fit,
        &fm_val,
        &cfg.tune_config(derive_seed(seed, &format!("B/tune/{point}"))),
    )?;
    drop((fm_fit, fm_val));
    let fm_rest = extract_features(model, &rest)?;
    let fit_seed = derive_seed(seed, &format!("B/refit/{point}"));
    let ens = fit_gbdt(&fm_rest, &tuned.best, fit_seed)?;
    drop(fm_rest);
    let fm_hold = extract_features(model, &holdout)?;
    let predicted = gbdt_labels(&ens, &fm_hold)?;
    let counts = ConfusionCounts::from_pairs(holdout.labels().into_iter().zip(predicted));

    let provenance = json!({
        "extractor_sha256": model_hash(model)?,
        "extractor_train_data": p.train_data,
        "sweep_data": data.header,
        "holdout_fraction": cfg.holdout_fraction,
        "tune_val_fraction": cfg.tune_val_fraction,
        "holdout_records": holdout.len(),
        "refit_records": rest.len(),
        "best_params": tuned.best,
        "best_trial": tuned.best_trial,
        "best_val_accuracy": tuned.best_score,
        "trials": tuned.trials.len(),
        "pruned_trials": tuned.trials.iter().filter(|t| t.pruned).count(),
        "refit_seed": fit_seed,
        "trees": ens.trees.len(),
    });
    metrics_report(
        Pipeline::Tl,
        scenario,
        Some(samples_per_class),
        seed,
        counts,
        provenance,
    )
}

/// Runs every sweep point and seed for one scenario. A failing point becomes
/// a failed row and the sweep continues.
pub fn run_experiment_b(
    scenario: Scenario,
    model: &TrainedModel,
    cfg: &ExperimentBConfig,
    master_seed: u64,
) -> Result<Vec<MetricsReport>> {
    cfg.validate()?;
    let mut out = Vec::new();
    for &s in &cfg.sweep.seeds {
        let seed = derive_seed(master_seed, &format!("B/seed/{s}"));
        for &n in &cfg.sweep.samples_per_class {
            let report = transfer_point(model, scenario, n, cfg, seed).unwrap_or_else(|e| {
                log::warn!("{scenario} at {n}/class failed: {e}");
                MetricsReport::failed(Pipeline::Tl, scenario, Some(n), seed, &e)
            });
            out.push(report);
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Learnability oracle

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OracleConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval_samples_per_class: u64,
    pub gbdt: GbdtHyperParams,
}

impl Default for OracleConfig {
    fn default() -> Self {
        OracleConfig {
            model: ModelConfig {
                block1_filters: 8,
                dense_widths: vec![16],
                ..ModelConfig::default()
            },
            train: TrainConfig {
                epochs: 3,
                batch_size: 100,
                ..TrainConfig::default()
            },
            eval_samples_per_class: 5_000,
            gbdt: GbdtHyperParams {
                n_estimators: 10,
                max_depth: 2,
                ..GbdtHyperParams::default()
            },
        }
    }
}

/// Both pipelines on the degenerate fixed-IV data, plus the same runs with
/// shuffled labels on both the training and evaluation side.
#[derive(Clone, Debug, PartialEq)]
pub struct OracleReport {
    pub dl: Rates,
    pub tl: Rates,
    pub dl_shuffled: Rates,
    pub tl_shuffled: Rates,
    pub eval_records: usize,
}

pub fn fixed_iv_learnability_oracle(
    key: NamedKey,
    rounds: usize,
    n: u64,
    cfg: &OracleConfig,
    seed: u64,
) -> Result<OracleReport> {
    if n < 100 {
        return Err(Error::Config(
            "the oracle needs at least 100 samples per class".into(),
        ));
    }
    let iv = derive_seed(seed, "oracle/iv") as u32;
    let gen = |count: u64, label: &str| {
        let mut g = GeneratorConfig::new(key, rounds, count, derive_seed(seed, label));
        g.iv_mode = IvMode::Fixed(iv);
        generate_dataset(&g)
    };
    let tr = gen(n, "oracle/train")?;
    let va = gen((n / 5).max(50), "oracle/val")?;
    let ev = gen(cfg.eval_samples_per_class, "oracle/eval")?;
    ensure_disjoint(&tr.header, &ev.header)?;

    let run = |tr: &Dataset, va: &Dataset, ev: &Dataset, init: &str| -> Result<(Rates, Rates)> {
        let tc = TrainConfig {
            seed: derive_seed(seed, init),
            ..cfg.train.clone()
        };
        let model = train(&cfg.model, &tc, tr, va)?;
        let dl = compute_metrics(&evaluate(&model, ev)?.counts)?;
        let ens = fit_gbdt(
            &extract_features(&model, tr)?,
            &cfg.gbdt,
            derive_seed(seed, "oracle/gbdt"),
        )?;
        let predicted = gbdt_labels(&ens, &extract_features(&model, ev)?)?;
        let tl = compute_metrics(&ConfusionCounts::from_pairs(
            ev.labels().into_iter().zip(predicted),
        ))?;
        Ok((dl, tl))
    };
    let (dl, tl) = run(&tr, &va, &ev, "oracle/init")?;
    let (dl_shuffled, tl_shuffled) = run(
        &tr.with_shuffled_labels(derive_seed(seed, "oracle/shuffle/train")),
        &va.with_shuffled_labels(derive_seed(seed, "oracle/shuffle/val")),
        &ev.with_shuffled_labels(derive_seed(seed, "oracle/shuffle/eval")),
        "oracle/init/shuffled",
    )?;
    Ok(OracleReport {
        dl,
        tl,
        dl_shuffled,
        tl_shuffled,
        eval_records: ev.len(),
    })
}

// ---------------------------------------------------------------------------
// Reports

pub const REPORT_HEADER: &str =
    "pipeline,scenario,train_key,eval_key,train_rounds,eval_rounds,samples_per_class,accuracy,tpr,tnr,seed";

fn opt_f64(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| x.to_string())
}

/// Comma-separated rows under [`REPORT_HEADER`], in the given order.
/// Floats use the shortest representation that parses back exactly.
pub fn machine_rows(rows: &[ReportRow]) -> String {
    let mut out = String::from(REPORT_HEADER);
    out.push('\n');
    for r in rows {
        let (acc, tpr, tnr) = match r.result {
            RowResult::Metrics(m) => (m.accuracy.to_string(), opt_f64(m.tpr), opt_f64(m.tnr)),
            RowResult::Failed => ("FAILED".into(), "FAILED".into(), "FAILED".into()),
        };
        let s = &r.scenario;
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{}",
            r.pipeline.name(),
            s.kind().name(),
            s.train_key.label(),
            s.eval_key.label(),
            s.train_rounds,
            s.eval_rounds,
            r.samples_per_class
                .map_or("NA".to_string(), |n| n.to_string()),
            acc,
            tpr,
            tnr,
            r.seed
        );
    }
    out
}

pub fn parse_rows(text: &str) -> Result<Vec<ReportRow>> {
    let mut lines = text.lines();
    if lines.next() != Some(REPORT_HEADER) {
        return Err(Error::Malformed("report header mismatch".into()));
    }
    let bad = |line: &str, what: &str| Error::Malformed(format!("{what} in report row {line:?}"));
    let mut rows = Vec::new();
    for line in lines {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 11 {
            return Err(bad(line, "wrong column count"));
        }
        let num = |s: &str| s.parse::<usize>().map_err(|_| bad(line, "bad integer"));
        let float = |s: &str| s.parse::<f64>().map_err(|_| bad(line, "bad number"));
        let opt = |s: &str| {
            if s == "NA" {
                Ok(None)
            } else {
                float(s).map(Some)
            }
        };
        let scenario = Scenario::new(
            NamedKey::parse(f[2])?,
            NamedKey::parse(f[3])?,
            num(f[4])?,
            num(f[5])?,
        )?;
        if scenario.kind() != ScenarioKind::parse(f[1])? {
            return Err(bad(line, "scenario kind disagrees with keys and rounds"));
        }
        let result = if f[7] == "FAILED" {
            RowResult::Failed
        } else {
            RowResult::Metrics(Rates {
                accuracy: float(f[7])?,
                tpr: opt(f[8])?,
                tnr: opt(f[9])?,
            })
        };
        rows.push(ReportRow {
            pipeline: Pipeline::parse(f[0])?,
            scenario,
            samples_per_class: if f[6] == "NA" {
                None
            } else {
                Some(num(f[6])? as u64)
            },
            result,
            seed: f[10].parse().map_err(|_| bad(line, "bad seed"))?,
        });
    }
    Ok(rows)
}

fn fmt4(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| format!("{x:.4}"))
}

fn table(out: &mut String, header: &[&str], rows: &[Vec<String>]) {
    let mut w: Vec<usize> = header.iter().map(|h| h.len()).collect();
    for r in rows {
        for (i, c) in r.iter().enumerate() {
            w[i] = w[i].max(c.len());
        }
    }
    let line = |cells: &[String]| {
        let mut s = String::from("|");
        for (c, w) in cells.iter().zip(&w) {
            let _ = write!(s, " {c:>w$} |");
        }
        s
    };
    let rule: String = {
        let mut s = String::from("|");
        for w in &w {
            s.push_str(&"-".repeat(w + 2));
            s.push('|');
        }
        s
    };
    let _ = writeln!(
        out,
        "{}",
        line(&header.iter().map(|s| s.to_string()).collect::<Vec<_>>())
    );
    let _ = writeln!(out, "{rule}");
    for r in rows {
        let _ = writeln!(out, "{}", line(r));
    }
}

/// Fixed-width tables, one per pipeline and scenario kind, four decimals.
pub fn human_tables(rows: &[ReportRow]) -> String {
    let mut sorted = rows.to_vec();
    sorted.sort_by(|a, b| a.sort_key().cmp(&b.sort_key()));
    let mut out = String::new();
    for pipeline in [Pipeline::Dl, Pipeline::Tl] {
        for kind in ScenarioKind::ALL {
            let group: Vec<&ReportRow> = sorted
                .iter()
                .filter(|r| r.pipeline == pipeline && r.scenario.kind() == kind)
                .collect();
            if group.is_empty() {
                continue;
            }
            if !out.is_empty() {
                out.push('\n');
            }
            let _ = writeln!(out, "{} - {}", pipeline.name(), kind.title());
            let metrics = |r: &ReportRow| match r.result {
                RowResult::Metrics(m) => vec![fmt4(Some(m.accuracy)), fmt4(m.tpr), fmt4(m.tnr)],
                RowResult::Failed => vec!["FAILED".into(), "FAILED".into(), "FAILED".into()],
            };
            let mut cells = Vec::new();
            for r in group {
                let s = &r.scenario;
                let mut row = Vec::new();
                if pipeline == Pipeline::Tl {
                    let k = r.samples_per_class.map_or(0.0, |n| n as f64 / 1000.0);
                    row.push(format!("{k}"));
                }
                row.extend([
                    s.train_rounds.to_string(),
                    s.eval_rounds.to_string(),
                    s.train_key.label(),
                    s.eval_key.label(),
                ]);
                row.extend(metrics(r));
                cells.push(row);
            }
            let mut header = vec![];
            if pipeline == Pipeline::Tl {
                header.push("Samples/class (1000s)");
            }
            header.extend([
                "Train rounds",
                "Eval rounds",
                "Train key",
                "Eval key",
                "Accuracy",
                "TPR",
                "TNR",
            ]);
            table(&mut out, &header, &cells);
        }
    }
    out
}

/// Writes `<stem>.csv` (machine rows), `<stem>.txt` (human tables) and
/// `<stem>.provenance.json` next to each other, rows sorted, and returns the
/// human tables.
pub fn emit_report(reports: &[MetricsReport], stem: impl AsRef<Path>) -> Result<String> {
    let mut reports = reports.to_vec();
    sort_reports(&mut reports);
    let rows: Vec<ReportRow> = reports.iter().map(|r| r.row).collect();
    let stem = stem.as_ref();
    let with_ext = |ext: &str| {
        let mut s = stem.as_os_str().to_owned();
        s.push(ext);
        std::path::PathBuf::from(s)
    };
    let csv = machine_rows(&rows);
    let human = human_tables(&rows);
    let lines: Vec<&str> = csv.lines().skip(1).collect();
    let sidecar: Vec<serde_json::Value> = reports
        .iter()
        .zip(lines)
        .map(|(r, line)| json!({ "row": line, "counts": r.counts, "provenance": r.provenance }))
        .collect();
    fs::write(with_ext(".csv"), &csv)?;
    fs::write(with_ext(".txt"), &human)?;
    fs::write(
        with_ext(".provenance.json"),
        serde_json::to_string_pretty(&sidecar)? + "\n",
    )?;
    Ok(human)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rates(a: f64, t: Option<f64>, n: Option<f64>) -> RowResult {
        RowResult::Metrics(Rates {
            accuracy: a,
            tpr: t,
            tnr: n,
        })
    }

    fn rows() -> Vec<ReportRow> {
        let k1 = NamedKey::k1();
        let k2 = NamedKey::k2();
        let custom = NamedKey::parse("0123456789abcdef").unwrap();
        vec![
            ReportRow {
                pipeline: Pipeline::Tl,
                scenario: Scenario::new(k1, k2, 5, 5).unwrap(),
                samples_per_class: Some(5000),
                result: rates(0.5372, Some(0.5379), Some(0.5366)),
                seed: 7,
            },
            ReportRow {
                pipeline: Pipeline::Dl,
                scenario: Scenario::new(k1, k1, 5, 5).unwrap(),
                samples_per_class: None,
                result: rates(0.99435, Some(0.9933), Some(0.9954)),
                seed: 7,
            },
            ReportRow {
                pipeline: Pipeline::Dl,
                scenario: Scenario::new(k1, k1, 6, 5).unwrap(),
                samples_per_class: None,
                result: rates(0.1 + 0.2, None, Some(1.0 / 3.0)),
                seed: u64::MAX,
            },
            ReportRow {
                pipeline: Pipeline::Dl,
                scenario: Scenario::new(k1, custom, 21, 22).unwrap(),
                samples_per_class: None,
                result: RowResult::Failed,
                seed: 0,
            },
        ]
    }

    #[test]
    fn kind_follows_keys_and_rounds() {
        let (k1, k2) = (NamedKey::k1(), NamedKey::k2());
        assert_eq!(
            Scenario::new(k1, k1, 5, 5).unwrap().kind(),
            ScenarioKind::SameKeySameRound
        );
        assert_eq!(
            Scenario::new(k1, k2, 5, 5).unwrap().kind(),
            ScenarioKind::SameRoundDiffKey
        );
        assert_eq!(
            Scenario::new(k1, k1, 5, 6).unwrap().kind(),
            ScenarioKind::DiffRoundSameKey
        );
        assert_eq!(
            Scenario::new(k1, k2, 22, 21).unwrap().kind(),
            ScenarioKind::DiffRoundDiffKey
        );
        assert!(Scenario::new(k1, k1, 5, 7).is_err());
        assert!(Scenario::new(k1, k1, 22, 23).is_err());
        // A custom key equal to K1 is the same key.
        let same = NamedKey {
            id: crate::data::KeyId::Custom,
            key: k1.key,
        };
        assert_eq!(
            Scenario::new(k1, same, 5, 5).unwrap().kind(),
            ScenarioKind::SameKeySameRound
        );
        let other = NamedKey {
            id: crate::data::KeyId::Custom,
            key: CipherKey::new([1, 2, 3, 4]),
        };
        assert_eq!(
            Scenario::new(k1, other, 5, 5).unwrap().kind(),
            ScenarioKind::SameRoundDiffKey
        );
    }

    #[test]
    fn matrix_covers_both_directions() {
        let m = scenario_matrix(NamedKey::k1(), NamedKey::k2(), &[5, 22]).unwrap();
        let evals: Vec<(usize, usize)> =
            m.iter().map(|s| (s.train_rounds, s.eval_rounds)).collect();
        assert_eq!(m.len(), 6 + 4);
        assert!(evals.contains(&(5, 6)) && evals.contains(&(5, 4)));
        assert!(evals.contains(&(22, 21)) && !evals.contains(&(22, 23)));
        for kind in ScenarioKind::ALL {
            assert!(m.iter().any(|s| s.kind() == kind));
        }
    }

    #[test]
    fn machine_rows_roundtrip() {
        let rows = rows();
        let text = machine_rows(&rows);
        assert_eq!(parse_rows(&text).unwrap(), rows);
        assert!(text.lines().all(|l| l.split(',').count() == 11));
        assert_eq!(text.lines().count(), rows.len() + 1);
    }

    #[test]
    fn parse_rejects_inconsistent_rows() {
        let text = format!("{REPORT_HEADER}\nDL,same_key_same_round,k1,k2,5,5,NA,0.5,0.5,0.5,0\n");
        assert!(parse_rows(&text).is_err());
        let text = format!("{REPORT_HEADER}\nDL,same_key_same_round,k1,k1,5,5,NA,0.5,0.5\n");
        assert!(parse_rows(&text).is_err());
        assert!(parse_rows("pipeline\n").is_err());
    }

    #[test]
    fn human_tables_golden() {
        let got = human_tables(&rows());
        let want = include_str!("../tests/golden/human_tables.txt");
        assert_eq!(got, want);
    }

    #[test]
    fn emit_sorts_and_writes_three_files() {
        let reports: Vec<MetricsReport> = rows()
            .into_iter()
            .map(|row| MetricsReport {
                row,
                counts: None,
                provenance: json!({}),
            })
            .collect();
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("report");
        emit_report(&reports, &stem).unwrap();
        let csv = fs::read_to_string(dir.path().join("report.csv")).unwrap();
        let parsed = parse_rows(&csv).unwrap();
        let mut want = rows();
        want.sort_by(|a, b| a.sort_key().cmp(&b.sort_key()));
        assert_eq!(parsed, want);
        assert_eq!(parsed[0].pipeline, Pipeline::Dl);
        assert_eq!(parsed[3].pipeline, Pipeline::Tl);
        let side: serde_json::Value = serde_json::from_str(
            &fs::read_to_string(dir.path().join("report.provenance.json")).unwrap(),
        )
        .unwrap();
        assert_eq!(side.as_array().unwrap().len(), 4);
        assert!(dir.path().join("report.txt").exists());
    }

    #[test]
    fn sweep_spec_validation() {
        SweepSpec::default().validate().unwrap();
        let bad = SweepSpec {
            samples_per_class: vec![10, 5],
            seeds: vec![0],
        };
        assert!(bad.validate().is_err());
        let bad = SweepSpec {
            samples_per_class: vec![0, 5],
            seeds: vec![0],
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn overlapping_streams_are_refused() {
        let a = generate_dataset(&GeneratorConfig::new(NamedKey::k1(), 5, 4, 9)).unwrap();
        let b = generate_dataset(&GeneratorConfig::new(NamedKey::k1(), 5, 8, 9)).unwrap();
        let c = generate_dataset(&GeneratorConfig::new(NamedKey::k1(), 5, 8, 10)).unwrap();
        assert!(ensure_disjoint(&a.header, &b.header).is_err());
        ensure_disjoint(&a.header, &c.header).unwrap();
    }

    #[test]
    fn experiment_a_smoke() {
        let cfg = ExperimentAConfig {
            model: ModelConfig {
                block1_filters: 4,
                dense_widths: vec![8],
                ..ModelConfig::default()
            },
            train: TrainConfig {
                epochs: 1,
                batch_size: 100,
                ..TrainConfig::default()
            },
            train_samples_per_class: 200,
            val_samples_per_class: 50,
            eval_samples_per_class: 100,
        };
        let s = Scenario::new(NamedKey::k1(), NamedKey::k2(), 5, 5).unwrap();
        let r = run_experiment_a(s, &cfg, 3).unwrap();
        let m = r.row.rates().unwrap();
        assert!((0.0..=1.0).contains(&m.accuracy));
        assert_eq!(r.counts.unwrap().total(), 200);
        assert_eq!(r, run_experiment_a(s, &cfg, 3).unwrap());
        // A model from another train side is refused.
        let model = train_side_model(NamedKey::k1(), 6, &cfg, 3).unwrap();
        assert!(matches!(
            evaluate_dl(&model, s, &cfg, 3),
            Err(Error::Incompatible(_))
        ));
        // The matrix trains once per train side.
        let m = scenario_matrix(NamedKey::k1(), NamedKey::k2(), &[5]).unwrap();
        let reports = run_dl_matrix(&m, &cfg, 3);
        assert_eq!(reports.len(), 6);
        assert_eq!(reports[1], r);
        let hashes: std::collections::HashSet<_> = reports
            .iter()
            .map(|r| r.provenance["model_sha256"].clone())
            .collect();
        assert_eq!(hashes.len(), 1);
    }

    #[test]
    fn experiment_b_smoke_and_failed_rows() {
        let acfg = ExperimentAConfig {
            model: ModelConfig {
                block1_filters: 2,
                dense_widths: vec![4],
                ..ModelConfig::default()
            },
            train: TrainConfig {
                epochs: 1,
                batch_size: 100,
                ..TrainConfig::default()
            },
            train_samples_per_class: 200,
            val_samples_per_class: 50,
            eval_samples_per_class: 50,
        };
        let model = train_side_model(NamedKey::k1(), 5, &acfg, 1).unwrap();
        let s = Scenario::new(NamedKey::k1(), NamedKey::k2(), 5, 6).unwrap();
        let bcfg = ExperimentBConfig {
            sweep: SweepSpec {
                samples_per_class: vec![2, 100, 200],
                seeds: vec![0],
            },
            trials: 2,
            space: SearchSpace {
                n_estimators: (5, 10),
                max_depth: (2, 3),
                ..SearchSpace::default()
            },
            ..ExperimentBConfig::default()
        };
        let reports = run_experiment_b(s, &model, &bcfg, 4).unwrap();
        assert_eq!(reports.len(), 3);
        // Two records per class cannot be split three ways.
        assert_eq!(reports[0].row.result, RowResult::Failed);
        for r in &reports[1..] {
            let m = r.row.rates().unwrap();
            assert!((0.0..=1.0).contains(&m.accuracy));
        }
        assert_eq!(reports[2].counts.unwrap().total(), 80);
        assert_eq!(reports, run_experiment_b(s, &model, &bcfg, 4).unwrap());
    }
}
