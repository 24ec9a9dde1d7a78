//! Transfer stage: frozen-distinguisher features and a gradient-boosted
//! tree classifier with randomized search and median pruning.

pub mod features;
pub mod fit;
pub mod io;
pub mod tree;
pub mod tune;

pub use features::{extract_features, load_features, save_features, FeatureMatrix};
pub use fit::{fit_gbdt, GbdtTrainer};
pub use io::{load_ensemble, save_ensemble};
pub use tree::{predict_proba, BoostedEnsemble, GbdtHyperParams, Node, RegressionTree};
pub use tune::{sample_hyperparams, tune, SearchSpace, TrialRecord, TuneConfig, TuneOutcome};
