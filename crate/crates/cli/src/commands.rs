use std::fs;
use std::path::Path;

use serde_json::json;
use speckind::data::{generate_dataset, load_dataset, save_dataset, DatasetHeader};
use speckind::gbdt::tree::predict_labels;
use speckind::gbdt::{
    extract_features, fit_gbdt, load_ensemble, load_features, save_ensemble, save_features, tune,
};
use speckind::harness::{emit_report, ensure_disjoint, run_matrix};
use speckind::metrics::{compute_metrics, ConfusionCounts, Rates};
use speckind::nn::io::encode_model;
use speckind::nn::{evaluate, load_model, save_model, train};
use speckind::seed::{derive_seed, sha256_hex};
use speckind::Result;

use crate::config::{with_suffix, RunConfig};

fn describe(h: &DatasetHeader) -> String {
    format!(
        "key {} rounds {} records {} (first {}, second {}) seed {} iv {:?}",
        h.named_key().label(),
        h.rounds,
        h.record_count,
        h.class_counts[0],
        h.class_counts[1],
        h.seed,
        h.iv_mode
    )
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".into(), |x| format!("{x:.4}"))
}

fn print_rates(r: &Rates, c: &ConfusionCounts) {
    println!("accuracy {:.4}", r.accuracy);
    println!("tpr {}", opt(r.tpr));
    println!("tnr {}", opt(r.tnr));
    println!("counts tp {} tn {} fp {} fn {}", c.tp, c.tn, c.fp, c.fn_);
}

fn write_json(path: Option<&Path>, v: serde_json::Value) -> Result<()> {
    if let Some(p) = path {
        fs::write(p, serde_json::to_string_pretty(&v)? + "\n")?;
    }
    Ok(())
}

pub fn gen_data(cfg: &RunConfig, out: &Path) -> Result<()> {
    let ds = generate_dataset(&cfg.generator("data")?)?;
    save_dataset(&ds, out)?;
    println!("{}", describe(&ds.header));
    Ok(())
}

pub fn train_dl(cfg: &RunConfig, train_path: &Path, val_path: &Path, out: &Path) -> Result<()> {
    let tr = load_dataset(train_path)?;
    let va = load_dataset(val_path)?;
    ensure_disjoint(&tr.header, &va.header)?;
    let model = train(&cfg.model, &cfg.train_config("train-dl"), &tr, &va)?;
    save_model(&model, out)?;
    let p = &model.provenance;
    println!(
        "best epoch {} val accuracy {:.4} train loss {:.6}",
        p.best_epoch, p.val_accuracy, p.train_loss
    );
    Ok(())
}

pub fn eval_dl(model_path: &Path, data_path: &Path, out: Option<&Path>) -> Result<()> {
    let model = load_model(model_path)?;
    let ds = load_dataset(data_path)?;
    ensure_disjoint(&model.provenance.train_data, &ds.header)?;
    let ev = evaluate(&model, &ds)?;
    let rates = compute_metrics(&ev.counts)?;
    print_rates(&rates, &ev.counts);
    write_json(
        out,
        json!({
            "rates": rates,
            "counts": ev.counts,
            "model_sha256": sha256_hex(&encode_model(&model)?),
            "model_train_data": model.provenance.train_data,
            "eval_data": ds.header,
        }),
    )
}

pub fn extract(model_path: &Path, data_path: &Path, out: &Path) -> Result<()> {
    let model = load_model(model_path)?;
    let ds = load_dataset(data_path)?;
    let fm = extract_features(&model, &ds)?;
    save_features(&fm, out)?;
    println!("{} rows x {} features", fm.rows(), fm.cols());
    Ok(())
}

pub fn train_tl(
    cfg: &RunConfig,
    train_path: &Path,
    val_path: Option<&Path>,
    out: &Path,
) -> Result<()> {
    let tr = load_features(train_path)?;
    let params = match val_path {
        Some(v) => {
            let va = load_features(v)?;
            let outcome = tune(
                &tr,
                &va,
                &cfg.tune_config(derive_seed(cfg.seed, "train-tl/tune")),
            )?;
            println!(
                "best trial {} of {} val accuracy {:.4}",
                outcome.best_trial,
                outcome.trials.len(),
                outcome.best_score
            );
            fs::write(
                with_suffix(out, ".trials.csv"),
                speckind::gbdt::tune::trials_csv(&outcome.trials),
            )?;
            outcome.best
        }
        None => cfg.gbdt.clone(),
    };
    let ens = fit_gbdt(&tr, &params, derive_seed(cfg.seed, "train-tl/fit"))?;
    save_ensemble(&ens, out)?;
    println!(
        "{} trees; params {}",
        ens.trees.len(),
        serde_json::to_string(&params)?
    );
    Ok(())
}

pub fn eval_tl(model_path: &Path, features_path: &Path, out: Option<&Path>) -> Result<()> {
    let ens = load_ensemble(model_path)?;
    let fm = load_features(features_path)?;
    let predicted = predict_labels(&ens, &fm)?;
    let counts = ConfusionCounts::from_pairs(fm.labels().iter().copied().zip(predicted));
    let rates = compute_metrics(&counts)?;
    print_rates(&rates, &counts);
    write_json(
        out,
        json!({ "rates": rates, "counts": counts, "params": ens.params }),
    )
}

pub fn run_experiment(cfg: &RunConfig, out: &Path) -> Result<()> {
    fs::create_dir_all(out)?;
    fs::write(out.join("config.toml"), cfg.echo())?;
    let (dl, tl) = cfg.scenarios()?;
    let b = cfg.experiment_b();
    let reports = run_matrix(&dl, &tl, &cfg.experiment_a(), Some(&b), cfg.seed);
    let human = emit_report(&reports, out.join("report"))?;
    print!("{human}");
    Ok(())
}
