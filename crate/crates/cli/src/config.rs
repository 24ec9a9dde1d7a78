//! Run configuration: one TOML document with a section per stage.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use speckind::data::{GeneratorConfig, IvMode, MessagePair, NamedKey};
use speckind::gbdt::{GbdtHyperParams, SearchSpace, TuneConfig};
use speckind::harness::{
    scenario_matrix, ExperimentAConfig, ExperimentBConfig, Scenario, ScenarioKind, SweepSpec,
};
use speckind::nn::{ModelConfig, TrainConfig};
use speckind::seed::derive_seed;
use speckind::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Master seed; every stage derives its own seed from it.
    pub seed: u64,
    pub data: DataSection,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub gbdt: GbdtHyperParams,
    pub tune: TuneSection,
    pub experiment: ExperimentSection,
    pub sweep: SweepSpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        let a = ExperimentAConfig::default();
        RunConfig {
            seed: 0,
            data: DataSection::default(),
            model: a.model,
            train: a.train,
            gbdt: GbdtHyperParams::default(),
            tune: TuneSection::default(),
            experiment: ExperimentSection::default(),
            sweep: SweepSpec::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    /// `k1`, `k2` or 16 hex digits.
    pub key: String,
    pub rounds: usize,
    pub samples_per_class: u64,
    pub message_pair: MessagePair,
    pub iv_mode: IvMode,
    pub store_ivs: bool,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            key: "k1".into(),
            rounds: 5,
            samples_per_class: 10_000,
            message_pair: MessagePair::default(),
            iv_mode: IvMode::Random,
            store_ivs: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TuneSection {
    pub trials: usize,
    pub checkpoints: usize,
    pub space: SearchSpace,
}

impl Default for TuneSection {
    fn default() -> Self {
        let t = TuneConfig::default();
        TuneSection {
            trials: t.trials,
            checkpoints: t.checkpoints,
            space: t.space,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentSection {
    pub train_key: String,
    pub other_key: String,
    /// Training round counts; each is evaluated at the same count and one
    /// round either side.
    pub rounds: Vec<usize>,
    /// Scenario kinds run through the deep-learning pipeline.
    pub dl_kinds: Vec<ScenarioKind>,
    /// Scenario kinds run through the transfer sweep.
    pub tl_kinds: Vec<ScenarioKind>,
    pub train_samples_per_class: u64,
    pub val_samples_per_class: u64,
    pub eval_samples_per_class: u64,
    pub holdout_fraction: f64,
    pub tune_val_fraction: f64,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        let a = ExperimentAConfig::default();
        let b = ExperimentBConfig::default();
        ExperimentSection {
            train_key: "k1".into(),
            other_key: "k2".into(),
            rounds: vec![5, 6, 21, 22],
            dl_kinds: ScenarioKind::ALL.to_vec(),
            tl_kinds: vec![
                ScenarioKind::SameRoundDiffKey,
                ScenarioKind::DiffRoundSameKey,
                ScenarioKind::DiffRoundDiffKey,
            ],
            train_samples_per_class: a.train_samples_per_class,
            val_samples_per_class: a.val_samples_per_class,
            eval_samples_per_class: a.eval_samples_per_class,
            holdout_fraction: b.holdout_fraction,
            tune_val_fraction: b.tune_val_fraction,
        }
    }
}

/// Command-line values that replace configuration entries.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub rounds: Option<usize>,
    pub key: Option<String>,
    pub samples_per_class: Option<u64>,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Reads `path` (or starts from defaults), applies overrides and
    /// validates the result.
    pub fn load(path: Option<&Path>, ov: &Overrides) -> Result<Self> {
        let mut cfg = match path {
            Some(p) => Self::parse(&fs::read_to_string(p)?)?,
            None => RunConfig::default(),
        };
        if let Some(s) = ov.seed {
            cfg.seed = s;
        }
        if let Some(r) = ov.rounds {
            cfg.data.rounds = r;
            cfg.experiment.rounds = vec![r];
        }
        if let Some(k) = &ov.key {
            cfg.data.key = k.clone();
            cfg.experiment.train_key = k.clone();
        }
        if let Some(n) = ov.samples_per_class {
            cfg.data.samples_per_class = n;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.generator("check")?.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        self.gbdt.validate()?;
        self.tune_config(0).validate()?;
        self.experiment_a().validate()?;
        self.experiment_b().validate()?;
        if self.experiment.rounds.is_empty() {
            return Err(Error::Config("experiment.rounds is empty".into()));
        }
        self.scenarios()?;
        Ok(())
    }

    /// Full configuration as TOML, defaults included.
    pub fn echo(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }

    /// Generator for the `[data]` section, seeded for `role`.
    pub fn generator(&self, role: &str) -> Result<GeneratorConfig> {
        let mut g = GeneratorConfig::new(
            NamedKey::parse(&self.data.key)?,
            self.data.rounds,
            self.data.samples_per_class,
            derive_seed(self.seed, &format!("gen-data/{role}")),
        );
        g.message_pair = self.data.message_pair;
        g.iv_mode = self.data.iv_mode;
        g.store_ivs = self.data.store_ivs;
        Ok(g)
    }

    pub fn train_config(&self, stage: &str) -> TrainConfig {
        TrainConfig {
            seed: derive_seed(self.seed, &format!("{stage}/init")),
            ..self.train.clone()
        }
    }

    pub fn tune_config(&self, seed: u64) -> TuneConfig {
        TuneConfig {
            trials: self.tune.trials,
            checkpoints: self.tune.checkpoints,
            seed,
            space: self.tune.space.clone(),
        }
    }

    pub fn experiment_a(&self) -> ExperimentAConfig {
        ExperimentAConfig {
            model: self.model.clone(),
            train: self.train.clone(),
            train_samples_per_class: self.experiment.train_samples_per_class,
            val_samples_per_class: self.experiment.val_samples_per_class,
            eval_samples_per_class: self.experiment.eval_samples_per_class,
        }
    }

    pub fn experiment_b(&self) -> ExperimentBConfig {
        ExperimentBConfig {
            sweep: self.sweep.clone(),
            holdout_fraction: self.experiment.holdout_fraction,
            tune_val_fraction: self.experiment.tune_val_fraction,
            trials: self.tune.trials,
            checkpoints: self.tune.checkpoints,
            space: self.tune.space.clone(),
        }
    }

    /// Deep-learning and transfer scenarios selected by `[experiment]`.
    pub fn scenarios(&self) -> Result<(Vec<Scenario>, Vec<Scenario>)> {
        let e = &self.experiment;
        let all = scenario_matrix(
            NamedKey::parse(&e.train_key)?,
            NamedKey::parse(&e.other_key)?,
            &e.rounds,
        )?;
        let pick = |kinds: &[ScenarioKind]| {
            all.iter()
                .copied()
                .filter(|s| kinds.contains(&s.kind()))
                .collect()
        };
        Ok((pick(&e.dl_kinds), pick(&e.tl_kinds)))
    }
}

pub fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_echo_roundtrips() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        assert_eq!(RunConfig::parse(&cfg.echo()).unwrap(), cfg);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::parse("sed = 3\n").is_err());
        assert!(RunConfig::parse("[data]\nround = 3\n").is_err());
        assert!(RunConfig::parse("[model]\nfilters = 3\n").is_err());
        let cfg = RunConfig::parse("seed = 3\n[data]\nrounds = 7\n").unwrap();
        assert_eq!((cfg.seed, cfg.data.rounds), (3, 7));
        assert_eq!(cfg.model, ModelConfig::default());
    }

    #[test]
    fn overrides_apply_and_validate() {
        let ov = Overrides {
            seed: Some(9),
            rounds: Some(6),
            key: Some("k2".into()),
            samples_per_class: Some(12),
        };
        let cfg = RunConfig::load(None, &ov).unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.experiment.rounds, vec![6]);
        assert_eq!(cfg.data.key, "k2");
        assert_eq!(cfg.data.samples_per_class, 12);
        let bad = Overrides {
            rounds: Some(0),
            ..Overrides::default()
        };
        assert!(matches!(
            RunConfig::load(None, &bad),
            Err(Error::InvalidRoundCount(0))
        ));
        let bad = Overrides {
            key: Some("k3".into()),
            ..Overrides::default()
        };
        assert!(RunConfig::load(None, &bad).is_err());
    }

    #[test]
    fn shipped_presets_parse() {
        let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
        for name in ["desk.toml", "full_scale.toml", "smoke.toml"] {
            let text = fs::read_to_string(root.join(name)).unwrap();
            let cfg = RunConfig::parse(&text).unwrap();
            cfg.validate().unwrap();
            assert_eq!(RunConfig::parse(&cfg.echo()).unwrap(), cfg, "{name}");
        }
        let full =
            RunConfig::parse(&fs::read_to_string(root.join("full_scale.toml")).unwrap()).unwrap();
        assert_eq!(full.experiment_a(), ExperimentAConfig::full_scale());
        assert_eq!(full.sweep, SweepSpec::default());
        assert_eq!(full.tune.space, SearchSpace::default());
        assert_eq!(full.tune.trials, TuneConfig::default().trials);
    }

    #[test]
    fn stage_seeds_differ() {
        let cfg = RunConfig::default();
        assert_ne!(
            cfg.generator("a").unwrap().seed,
            cfg.generator("b").unwrap().seed
        );
        assert_ne!(cfg.train_config("train-dl").seed, cfg.train.seed);
    }
}
