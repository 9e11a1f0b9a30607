//! Toy-dataset experiment: for each seed, generate the default split, train
//! the full model and the shape-only ablation on patterns 1 to 3, and score
//! both on patterns 4 to 6. The record is rewritten after every run.
//!
//! ```text
//! cargo run --release -p combimatch --example toy_experiment -- [OUT] [EPOCHS] [POINTS_PER_PART]
//! ```

use std::path::PathBuf;
use std::time::Instant;

use combimatch::dataset::store::{generate_toy_split, load_split, SplitConfig};
use combimatch::dataset::Split;
use combimatch::losses::LossConfig;
use combimatch::metrics::{evaluate, EvalConfig, Metrics};
use combimatch::model::ModelConfig;
use combimatch::train::{EpochLog, TrainConfig, Trainer};
use serde::Serialize;

const SEEDS: [u64; 3] = [0, 1, 2];

#[derive(Serialize)]
struct Run {
    seed: u64,
    variant: String,
    crd: f64,
    cd: f64,
    rmse_r: f64,
    rmse_t: f64,
    pa_crd: f64,
    pa_cd: f64,
    test_objects: usize,
    train_seconds: f64,
    eval_seconds: f64,
    history: Vec<EpochLog>,
}

#[derive(Serialize)]
struct Record {
    epochs: usize,
    points_per_part: usize,
    precision: &'static str,
    train: TrainConfig,
    split: SplitConfig,
    runs: Vec<Run>,
}

fn main() -> combimatch::Result<()> {
    let mut args = std::env::args().skip(1);
    let out = args.next().map(PathBuf::from).unwrap_or_else(|| PathBuf::from("results/toy_experiment.json"));
    let epochs: usize = args.next().map_or(2, |s| s.parse().expect("EPOCHS is an integer"));
    let ppp: usize = args.next().map_or(256, |s| s.parse().expect("POINTS_PER_PART is an integer"));
    let train_cfg = TrainConfig {
        epochs,
        points_per_part: Some(ppp),
        ..Default::default()
    };
    let mut record = Record {
        epochs,
        points_per_part: ppp,
        precision: "f32",
        train: train_cfg.clone(),
        split: SplitConfig::default(),
        runs: Vec::new(),
    };
    if let Some(dir) = out.parent() {
        std::fs::create_dir_all(dir).map_err(|e| combimatch::Error::io(dir, e))?;
    }
    for seed in SEEDS {
        let data = tempfile::tempdir().map_err(|e| combimatch::Error::io("<tempdir>", e))?;
        let split = SplitConfig {
            master_seed: seed,
            ..Default::default()
        };
        generate_toy_split(&split, data.path())?;
        let train = load_split(data.path(), Split::Train)?;
        let test = load_split(data.path(), Split::Test)?;
        for (variant, shape_only) in [("full", false), ("shape-only", true)] {
            let mut model = ModelConfig::default();
            model.matcher.shape_only = shape_only;
            let cfg = TrainConfig {
                seed,
                ..train_cfg.clone()
            };
            let mut trainer = Trainer::<f32>::new(model, LossConfig::default(), cfg)?;
            let t0 = Instant::now();
            while trainer.epoch < epochs {
                let log = trainer.run_epoch(&train)?;
                eprintln!("seed {seed} {variant} epoch {}: total {:.3} ({:.0} s)", log.epoch, log.total, t0.elapsed().as_secs_f64());
            }
            let train_seconds = t0.elapsed().as_secs_f64();
            let t1 = Instant::now();
            let eval = EvalConfig {
                points_per_part: Some(ppp),
                seed,
                ..Default::default()
            };
            let report = evaluate(&trainer.trained_model()?, "test", &test, &eval)?;
            let Metrics { crd, cd, rmse_r, rmse_t, pa_crd, pa_cd, .. } = report.metrics;
            eprintln!("seed {seed} {variant}: CRD {crd:.4} CD {cd:.5} RMSE(R) {rmse_r:.2} RMSE(T) {rmse_t:.4}");
            record.runs.push(Run {
                seed,
                variant: variant.into(),
                crd,
                cd,
                rmse_r,
                rmse_t,
                pa_crd,
                pa_cd,
                test_objects: report.n_objects,
                train_seconds,
                eval_seconds: t1.elapsed().as_secs_f64(),
                history: trainer.history.clone(),
            });
            let text = serde_json::to_string_pretty(&record)? + "\n";
            std::fs::write(&out, text).map_err(|e| combimatch::Error::io(&out, e))?;
        }
    }
    Ok(())
}
