//! Command-line surface: dataset generation, training, tracking,
//! evaluation and frame-rate sweeps.

use clap::{Parser, Subcommand};
use qmot::config::RunConfig;
use qmot::manifest::RunManifest;
use qmot::metrics::{evaluate, MetricReport};
use qmot::nn::{init_model_params, load_checkpoint, save_checkpoint, ParamStore};
use qmot::synthgen::{
    downsample, file_fingerprint, generate_split, load_dataset, load_motchallenge, resize_frame,
    save_dataset,
};
use qmot::tracker::{run as track_video, TrackFile};
use qmot::trainer::train;
use qmot::types::{Dataset, VideoItem};
use qmot::{Error, Result};
use rayon::prelude::*;
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(
    name = "qmot",
    version,
    about = "Query-based multi-object tracker with collaborative temporal queries"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate synthetic train/val dataset archives.
    Gen {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Validation videos to generate alongside the training split.
        #[arg(long, default_value_t = 20)]
        val_videos: usize,
    },
    /// Train a model on a dataset archive.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Training archive produced by `gen`.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Override the configured memory size.
        #[arg(long)]
        n_max: Option<usize>,
        /// Override the configured refinement-module count.
        #[arg(long)]
        num_irms: Option<usize>,
    },
    /// Track videos with a trained checkpoint.
    Track {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset archive or a MOTChallenge sequence directory.
        #[arg(long)]
        data: PathBuf,
        /// Frame downsampling interval.
        #[arg(long, default_value_t = 1)]
        n: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Evaluate track files against ground truth.
    Eval {
        /// Directory holding track_XXX.txt files from `track`.
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 1)]
        n: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Metric-vs-interval sweep over one or more checkpoints.
    Sweep {
        #[arg(long, required = true)]
        checkpoint: Vec<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        /// Downsampling intervals, e.g. `1,2,3,6,10`.
        #[arg(long, value_delimiter = ',', default_value = "1,6,10")]
        n: Vec<usize>,
        /// Inference-time memory sizes to sweep; empty keeps each
        /// checkpoint's configured value.
        #[arg(long, value_delimiter = ',')]
        n_max: Vec<usize>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn load_config(path: &Option<PathBuf>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Load either a dataset archive or a single MOTChallenge sequence.
fn load_items(data: &Path) -> Result<Dataset> {
    if data.is_dir() {
        let item = load_motchallenge(data)?;
        Ok(Dataset {
            items: vec![item],
            split: "mot".into(),
        })
    } else {
        load_dataset(data)
    }
}

/// Downsample and resize one video to the model's input size, keeping the
/// original dimensions for serialization.
fn prepare_item(
    item: &VideoItem,
    n: usize,
    cfg: &qmot::config::Config,
) -> Result<(VideoItem, (usize, usize))> {
    let down = downsample(item, n)?;
    let orig = (down.frames[0].width, down.frames[0].height);
    let frames = down
        .frames
        .iter()
        .map(|f| resize_frame(f, cfg.image_width, cfg.image_height))
        .collect();
    Ok((
        VideoItem {
            frames,
            annotations: down.annotations,
        },
        orig,
    ))
}

fn track_dataset(
    ds: &Dataset,
    params: &ParamStore,
    cfg: &qmot::config::Config,
    n: usize,
) -> Result<Vec<(TrackFile, (usize, usize), VideoItem)>> {
    ds.items
        .par_iter()
        .map(|item| {
            let (prepared, orig) = prepare_item(item, n, cfg)?;
            let tf = track_video(&prepared.frames, params, cfg)?;
            Ok((tf, orig, prepared))
        })
        .collect()
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = values.collect();
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

fn cmd_gen(config: &Option<PathBuf>, out: &Path, seed: u64, val_videos: usize) -> Result<()> {
    let rc = load_config(config)?;
    ensure_dir(out)?;
    let train_ds = generate_split(&rc.scene, seed, rc.train.num_videos, "train");
    let val_ds = generate_split(&rc.scene, seed.wrapping_add(0x5eed), val_videos, "val");
    let train_path = out.join("train.bin");
    let val_path = out.join("val.bin");
    save_dataset(&train_path, &train_ds)?;
    save_dataset(&val_path, &val_ds)?;
    std::fs::write(out.join("config.toml"), rc.to_toml())
        .map_err(|e| Error::io(out.join("config.toml"), e))?;

    let mut manifest = RunManifest::new("gen", rc, seed);
    manifest.dataset_fingerprints = vec![
        file_fingerprint(&train_path)?,
        file_fingerprint(&val_path)?,
    ];
    manifest.outputs = vec!["train.bin".into(), "val.bin".into(), "config.toml".into()];
    manifest.write(out)?;
    println!(
        "wrote {} train and {} val videos to {}",
        train_ds.items.len(),
        val_ds.items.len(),
        out.display()
    );
    Ok(())
}

fn cmd_train(
    config: &Option<PathBuf>,
    data: &Path,
    out: &Path,
    seed: u64,
    n_max: Option<usize>,
    num_irms: Option<usize>,
) -> Result<()> {
    let mut rc = load_config(config)?;
    if let Some(m) = n_max {
        rc.model.n_max = m;
    }
    if let Some(k) = num_irms {
        rc.model.num_irms = Some(k);
    }
    rc.validate()?;
    ensure_dir(out)?;
    let ds = load_dataset(data)?;
    let mut store = init_model_params(&rc.model, seed);
    eprintln!(
        "training: {} videos, {} epochs, {} params",
        ds.items.len(),
        rc.train.epochs,
        store.num_scalars()
    );
    let curve = train(&mut store, &ds, &rc, seed, |epoch, loss| {
        eprintln!("epoch {epoch:3}: mean clip loss {loss:.4}");
    })?;

    let ckpt_path = out.join("model.ckpt");
    save_checkpoint(&ckpt_path, &rc, &store)?;
    let mut csv = String::from("epoch,loss\n");
    for (i, l) in curve.iter().enumerate() {
        csv.push_str(&format!("{i},{l}\n"));
    }
    std::fs::write(out.join("loss_curve.csv"), csv)
        .map_err(|e| Error::io(out.join("loss_curve.csv"), e))?;
    qmot::plot::line_chart(
        &out.join("loss_curve.svg"),
        "training loss",
        "epoch",
        "mean clip loss",
        &[(
            "loss".into(),
            curve.iter().enumerate().map(|(i, &l)| (i as f64, l)).collect(),
        )],
    )?;

    let mut manifest = RunManifest::new("train", rc, seed);
    manifest.checkpoint = Some(ckpt_path.display().to_string());
    manifest.dataset_fingerprints = vec![file_fingerprint(data)?];
    manifest.outputs = vec![
        "model.ckpt".into(),
        "loss_curve.csv".into(),
        "loss_curve.svg".into(),
    ];
    manifest.write(out)?;
    println!("checkpoint written to {}", ckpt_path.display());
    Ok(())
}

fn cmd_track(checkpoint: &Path, data: &Path, n: usize, out: &Path, seed: u64) -> Result<()> {
    if n < 1 {
        return Err(Error::Invalid("downsample interval must be >= 1".into()));
    }
    let (rc, store) = load_checkpoint(checkpoint)?;
    ensure_dir(out)?;
    let ds = load_items(data)?;
    let results = track_dataset(&ds, &store, &rc.model, n)?;
    for (i, (tf, orig, _)) in results.iter().enumerate() {
        tf.write_mot(&out.join(format!("track_{i:03}.txt")), orig.0, orig.1)?;
    }

    let mut manifest = RunManifest::new("track", rc, seed);
    manifest.checkpoint = Some(checkpoint.display().to_string());
    if data.is_file() {
        manifest.dataset_fingerprints = vec![file_fingerprint(data)?];
    }
    manifest.outputs = (0..results.len())
        .map(|i| format!("track_{i:03}.txt"))
        .collect();
    manifest.write(out)?;
    println!(
        "tracked {} videos at interval {n}; outputs in {}",
        results.len(),
        out.display()
    );
    Ok(())
}

fn cmd_eval(pred: &Path, data: &Path, n: usize, out: &Path) -> Result<()> {
    let ds = load_items(data)?;
    ensure_dir(out)?;
    let mut reports: Vec<MetricReport> = Vec::new();
    let mut table = String::from("item,mota,idf1,hota,det_a,ass_a,fp,fn,idsw\n");
    for (i, item) in ds.items.iter().enumerate() {
        let down = downsample(item, n)?;
        let (w, h) = (down.frames[0].width, down.frames[0].height);
        let path = pred.join(format!("track_{i:03}.txt"));
        let tf = TrackFile::read_mot(&path, w, h)?;
        let report = evaluate(&tf, &down.annotations, 0.5);
        table.push_str(&format!(
            "{i},{:.4},{:.4},{:.4},{:.4},{:.4},{},{},{}\n",
            report.mota,
            report.idf1,
            report.hota,
            report.det_a,
            report.ass_a,
            report.fp,
            report.fn_,
            report.idsw
        ));
        reports.push(report);
    }
    let summary = serde_json::json!({
        "items": reports,
        "mean": {
            "mota": mean(reports.iter().map(|r| r.mota)),
            "idf1": mean(reports.iter().map(|r| r.idf1)),
            "hota": mean(reports.iter().map(|r| r.hota)),
        },
    });
    std::fs::write(
        out.join("metrics.json"),
        serde_json::to_string_pretty(&summary).expect("serializable"),
    )
    .map_err(|e| Error::io(out.join("metrics.json"), e))?;
    std::fs::write(out.join("metrics.csv"), &table)
        .map_err(|e| Error::io(out.join("metrics.csv"), e))?;
    print!("{table}");
    println!(
        "mean: mota {:.4} idf1 {:.4} hota {:.4}",
        mean(reports.iter().map(|r| r.mota)),
        mean(reports.iter().map(|r| r.idf1)),
        mean(reports.iter().map(|r| r.hota)),
    );

    let manifest = RunManifest::new("eval", RunConfig::default(), 0);
    manifest.write(out)?;
    Ok(())
}

fn cmd_sweep(
    checkpoints: &[PathBuf],
    data: &Path,
    ns: &[usize],
    n_maxes: &[usize],
    out: &Path,
    seed: u64,
) -> Result<()> {
    ensure_dir(out)?;
    let ds = load_items(data)?;
    let mut table = String::from("checkpoint,n,n_max,mota,idf1,hota\n");
    let mut series: Vec<(String, Vec<(f64, f64)>)> = Vec::new();
    let mut first_rc: Option<RunConfig> = None;
    let mut fingerprints = Vec::new();

    for ckpt in checkpoints {
        let (rc, store) = load_checkpoint(ckpt)?;
        fingerprints.push(file_fingerprint(ckpt)?);
        if first_rc.is_none() {
            first_rc = Some(rc.clone());
        }
        let n_max_values: Vec<usize> = if n_maxes.is_empty() {
            vec![rc.model.n_max]
        } else {
            n_maxes.to_vec()
        };
        let name = ckpt
            .file_stem()
            .map(|s| s.to_string_lossy().to_string())
            .unwrap_or_else(|| ckpt.display().to_string());
        for &n_max in &n_max_values {
            let mut cfg = rc.model.clone();
            cfg.n_max = n_max;
            cfg.validate()?;
            let mut curve = Vec::new();
            for &n in ns {
                let results = track_dataset(&ds, &store, &cfg, n)?;
                let reports: Vec<MetricReport> = results
                    .iter()
                    .map(|(tf, _, prepared)| evaluate(tf, &prepared.annotations, 0.5))
                    .collect();
                let (mota, idf1v, hotav) = (
                    mean(reports.iter().map(|r| r.mota)),
                    mean(reports.iter().map(|r| r.idf1)),
                    mean(reports.iter().map(|r| r.hota)),
                );
                table.push_str(&format!(
                    "{name},{n},{n_max},{mota:.4},{idf1v:.4},{hotav:.4}\n"
                ));
                curve.push((n as f64, idf1v));
            }
            let label = if n_max_values.len() > 1 {
                format!("{name} n_max={n_max}")
            } else {
                name.clone()
            };
            series.push((label, curve));
        }
    }

    std::fs::write(out.join("sweep.csv"), &table)
        .map_err(|e| Error::io(out.join("sweep.csv"), e))?;
    qmot::plot::line_chart(
        &out.join("sweep.svg"),
        "IDF1 vs downsampling interval",
        "n",
        "idf1",
        &series,
    )?;
    print!("{table}");

    let mut manifest = RunManifest::new("sweep", first_rc.unwrap_or_default(), seed);
    manifest.dataset_fingerprints = fingerprints;
    manifest.outputs = vec!["sweep.csv".into(), "sweep.svg".into()];
    manifest.write(out)?;
    Ok(())
}

fn run_cli(cli: Cli) -> Result<()> {
    match &cli.cmd {
        Cmd::Gen {
            config,
            out,
            seed,
            val_videos,
        } => cmd_gen(config, out, *seed, *val_videos),
        Cmd::Train {
            config,
            data,
            out,
            seed,
            n_max,
            num_irms,
        } => cmd_train(config, data, out, *seed, *n_max, *num_irms),
        Cmd::Track {
            checkpoint,
            data,
            n,
            out,
            seed,
        } => cmd_track(checkpoint, data, *n, out, *seed),
        Cmd::Eval { pred, data, n, out } => cmd_eval(pred, data, *n, out),
        Cmd::Sweep {
            checkpoint,
            data,
            n,
            n_max,
            out,
            seed,
        } => cmd_sweep(checkpoint, data, n, n_max, out, *seed),
    }
}

fn main() {
    let cli = Cli::parse();
    match run_cli(cli) {
        Ok(()) => {}
        Err(e) => {
            eprintln!("error: {e}");
            let code = match e {
                Error::Config(_)
                | Error::Invalid(_)
                | Error::ParseLine { .. }
                | Error::Shape(_) => 2,
                _ => 1,
            };
            std::process::exit(code);
        }
    }
}
