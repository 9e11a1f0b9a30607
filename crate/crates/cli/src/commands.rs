//! Command implementations.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::ArgMatches;
use combimatch::assembler::assemble;
use combimatch::dataset::ply::read_ply;
use combimatch::dataset::store::{generate_toy_split, load_object, load_split};
use combimatch::dataset::Split;
use combimatch::geom::PointCloud;
use combimatch::metrics::{evaluate, evaluate_poses, model_inputs, object_metrics, MetricsReport};
use combimatch::model::TrainedModel;
use combimatch::train::Trainer;
use combimatch::Real;
use log::info;

use crate::config::{resolve, Precision, RunConfig};
use crate::{Cli, CliError, Command, ConfigAction};

type Result<T> = std::result::Result<T, CliError>;

/// Values of the dotted-key flags, taken from the deepest subcommand that
/// saw them.
pub fn key_flags<'a>(matches: &ArgMatches, keys: impl Iterator<Item = &'a String>) -> Vec<(String, String)> {
    let mut chain = vec![matches];
    while let Some((_, sub)) = chain.last().and_then(|m| m.subcommand()) {
        chain.push(sub);
    }
    keys.filter_map(|k| {
        chain
            .iter()
            .rev()
            .find_map(|m| m.try_get_one::<String>(k).ok().flatten())
            .map(|v| (k.clone(), v.clone()))
    })
    .collect()
}

pub fn run(cli: Cli, flags: &[(String, String)]) -> Result<()> {
    if cli.threads == 0 {
        return Err(CliError::Usage("--threads must be at least 1".into()));
    }
    let resolved = resolve(cli.config.as_deref(), cli.seed, flags)?;
    let cfg = &resolved.config;
    match cli.command {
        Command::GenToy { out } => gen_toy(cfg, &out),
        Command::Train { data, out, log, resume } => {
            let log = log.unwrap_or_else(|| PathBuf::from(format!("{}.log.jsonl", out.display())));
            match cfg.train.precision {
                Precision::F32 => train::<f32>(cfg, &data, &out, &log, resume.as_deref()),
                Precision::F64 => train::<f64>(cfg, &data, &out, &log, resume.as_deref()),
            }
        }
        Command::Eval {
            checkpoint,
            data,
            split,
            out,
            oracle,
        } => eval(cfg, checkpoint.as_deref(), &data, &split, &out, oracle),
        Command::Assemble {
            checkpoint,
            object,
            parts,
            out,
        } => assemble_cmd(cfg, &checkpoint, object.as_deref(), &parts, &out),
        Command::ExportHeatmap {
            checkpoint,
            object,
            source,
            source_part,
            target_part,
            out_dir,
        } => export_heatmap(&checkpoint, &object, source, source_part, target_part, &out_dir),
        Command::Config { action: ConfigAction::Show } => {
            print!("{}", resolved.show());
            Ok(())
        }
    }
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Core(combimatch::Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn gen_toy(cfg: &RunConfig, out: &Path) -> Result<()> {
    let manifest = generate_toy_split(&cfg.data.split_config(), out)?;
    info!("generated {} objects under {}", manifest.objects.len(), out.display());
    println!("{} objects written to {}", manifest.objects.len(), out.display());
    Ok(())
}

fn train<T: Real>(cfg: &RunConfig, data: &Path, out: &Path, log_path: &Path, resume: Option<&Path>) -> Result<()> {
    let objects = load_split(data, Split::Train)?;
    info!("loaded {} training objects", objects.len());
    let mut trainer = match resume {
        Some(path) => Trainer::<T>::load(path, Some(cfg.train.config.epochs))?,
        None => Trainer::<T>::new(cfg.model.clone(), cfg.loss.clone(), cfg.train.config.clone())?,
    };
    let file = std::fs::OpenOptions::new()
        .create(true)
        .write(true)
        .append(resume.is_some())
        .truncate(resume.is_none())
        .open(log_path)
        .map_err(|e| io_err(log_path, e))?;
    let mut log = BufWriter::new(file);
    trainer.fit(&objects, &mut log, |t, entry| {
        t.save(out)?;
        info!("{}", serde_json::to_string(entry)?);
        Ok(())
    })?;
    log.flush().map_err(|e| io_err(log_path, e))?;
    if let Some(last) = trainer.history.last() {
        println!(
            "trained {} epochs: total {:.4} (orientation {:.4}, shape {:.4}, occupancy {:.4}, point {:.4})",
            trainer.epoch, last.total, last.orientation, last.shape, last.occupancy, last.point
        );
    }
    println!("checkpoint written to {}", out.display());
    Ok(())
}

fn summary(r: &MetricsReport) -> String {
    let m = &r.metrics;
    format!(
        "split {} ({} objects)\n  CRD       {:.5}\n  CD        {:.6}\n  RMSE(R)   {:.3} deg\n  RMSE(T)   {:.5}\n  geodesic  {:.3} deg\n  PA(CRD < {}) {:.3}\n  PA(CD < {})  {:.3}\n",
        r.split, r.n_objects, m.crd, m.cd, m.rmse_r, m.rmse_t, m.geodesic_deg, r.thresholds.crd, m.pa_crd, r.thresholds.cd, m.pa_cd
    )
}

fn eval(cfg: &RunConfig, checkpoint: Option<&Path>, data: &Path, split: &str, out: &Path, oracle: bool) -> Result<()> {
    let split: Split = split.parse().map_err(|e: combimatch::Error| CliError::Usage(e.to_string()))?;
    let objects = load_split(data, split)?;
    let report = if oracle {
        let poses: Vec<_> = objects.iter().map(|o| o.gt_poses.clone()).collect();
        evaluate_poses(split.name(), &objects, &poses, cfg.eval.thresholds)?
    } else {
        let path = checkpoint.ok_or_else(|| CliError::Usage("--checkpoint is required without --oracle".into()))?;
        let model = TrainedModel::load(path)?;
        evaluate(&model, split.name(), &objects, &cfg.eval)?
    };
    report.save(out)?;
    print!("{}", summary(&report));
    Ok(())
}

fn assemble_cmd(cfg: &RunConfig, checkpoint: &Path, object: Option<&Path>, parts: &[PathBuf], out: &Path) -> Result<()> {
    let model = TrainedModel::load(checkpoint)?;
    let (clouds, obj, seed) = match object {
        Some(path) => {
            let obj = load_object(path)?;
            (obj.parts.clone(), Some(obj.clone()), cfg.eval.seed ^ obj.seed)
        }
        None => {
            let clouds = parts
                .iter()
                .enumerate()
                .map(|(k, p)| {
                    let mut c = read_ply(p)?;
                    c.part_id = k;
                    Ok(c)
                })
                .collect::<std::result::Result<Vec<PointCloud<f64>>, combimatch::Error>>()?;
            (clouds, None, cfg.eval.seed)
        }
    };
    if clouds.len() < 2 {
        return Err(CliError::Usage(format!("assembly needs at least two parts, got {}", clouds.len())));
    }
    let inputs = model_inputs(&clouds, cfg.eval.points_per_part, seed);
    let (poses, report) = assemble(&inputs, &model, cfg.eval.top_k)?;
    report.save(out)?;
    println!("{} parts assembled ({}), anchor {}; result written to {}", clouds.len(), report.method, report.anchor, out.display());
    if let Some(obj) = obj {
        let m = object_metrics(&obj, &poses.placements)?;
        println!("  CRD {:.5}  CD {:.6}  RMSE(R) {:.3} deg  RMSE(T) {:.5}", m.crd, m.cd, m.rmse_r, m.rmse_t);
    }
    Ok(())
}

fn csv_writer(path: &Path) -> Result<csv::Writer<File>> {
    csv::Writer::from_path(path).map_err(|e| CliError::Core(combimatch::Error::Io {
        path: path.to_path_buf(),
        source: e.into(),
    }))
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> CliError + '_ {
    move |e| {
        CliError::Core(combimatch::Error::Io {
            path: path.to_path_buf(),
            source: e.into(),
        })
    }
}

fn export_heatmap(checkpoint: &Path, object: &Path, source: usize, sp: usize, tp: usize, out_dir: &Path) -> Result<()> {
    let model = TrainedModel::load(checkpoint)?;
    let obj = load_object(object)?;
    let n = obj.parts.len();
    if sp >= n || tp >= n || sp == tp {
        return Err(CliError::Usage(format!("source and target parts must be distinct indices below {n}")));
    }
    let (p, q) = (&obj.parts[sp], &obj.parts[tp]);
    if source >= p.len() {
        return Err(CliError::Usage(format!("source index {source} out of range for {} points", p.len())));
    }
    let inf = model.infer(&p.points, &q.points)?;
    std::fs::create_dir_all(out_dir).map_err(|e| io_err(out_dir, e))?;
    for (name, scores) in [("shape", &inf.cost.shape), ("occupancy", &inf.cost.occupancy), ("combined", &inf.cost.combined)] {
        let path = out_dir.join(format!("{name}.csv"));
        let mut w = csv_writer(&path)?;
        w.write_record(["target", "x", "y", "z", "score"]).map_err(csv_err(&path))?;
        for (j, x) in q.points.iter().enumerate() {
            let row = [j.to_string(), x[0].to_string(), x[1].to_string(), x[2].to_string(), scores[[source, j]].to_string()];
            w.write_record(&row).map_err(csv_err(&path))?;
        }
        w.flush().map_err(|e| io_err(&path, e))?;
    }
    let path = out_dir.join("orientation.csv");
    let mut w = csv_writer(&path)?;
    let header = ["part", "point", "x", "y", "z", "xaxis_x", "xaxis_y", "xaxis_z", "yaxis_x", "yaxis_y", "yaxis_z", "magnitude_x", "magnitude_y"];
    w.write_record(header).map_err(csv_err(&path))?;
    for (part, cloud, field) in [(sp, p, &inf.frames_p), (tp, q, &inf.frames_q)] {
        for (i, (x, frame)) in cloud.points.iter().zip(&field.frames).enumerate() {
            let m = frame.matrix();
            let mag = field.magnitudes.as_ref().map_or([f64::NAN; 2], |v| v[i]);
            let mut row = vec![part.to_string(), i.to_string()];
            row.extend(x.iter().map(f64::to_string));
            for a in 0..2 {
                row.extend((0..3).map(|s| m[(a, s)].to_string()));
            }
            row.extend(mag.iter().map(f64::to_string));
            w.write_record(&row).map_err(csv_err(&path))?;
        }
    }
    w.flush().map_err(|e| io_err(&path, e))?;
    println!("heat maps for point {source} of part {sp} written to {}", out_dir.display());
    Ok(())
}
