//! The `hardmine` command line.
//!
//! ```text
//! hardmine generate --config run.toml --out data/
//! hardmine train    --config run.toml --variant combined --data data/train --out combined.model
//! hardmine evaluate --config run.toml --model combined.model --data data/test --out combined.jsonl
//! hardmine compare  --m1 bce.jsonl --m2 combined.jsonl --gt data/test/ground_truth.jsonl
//! hardmine report   --gt data/test/ground_truth.jsonl --detections bce=bce.jsonl combined=combined.jsonl
//! ```
//!
//! Exit codes: 0 success, 2 config error, 3 data error, 4 numeric failure.

pub mod config;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::detector::store::GROUND_TRUTH_FILE;
use crate::detector::{detect_all, generate_dataset, load_model, read_dataset, save_model, train, write_dataset};
use crate::eval::io::{
    metrics_csv, metrics_table, pairwise_csv, pairwise_table, read_detections, read_ground_truth, write_jsonl,
};
use crate::eval::{classify_frames, pair_outcomes, pairwise_report, MetricsReport};
use crate::loss::LossVariant;
use crate::{Error, Result};

pub use config::RunConfig;

#[derive(Debug, Parser)]
#[command(name = "hardmine", version, about = "Hard-example-mining losses on a toy grid detector")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// TOML (or .json) run configuration; defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

impl Common {
    fn load(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        Ok(cfg)
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Writes a seeded synthetic dataset as `<out>/train` and `<out>/test`.
    Generate {
        #[command(flatten)]
        common: Common,
        /// Output directory; `train/` and `test/` are created inside.
        #[arg(long)]
        out: PathBuf,
    },
    /// Trains one loss variant and writes the model plus a JSON-lines log.
    Train {
        #[command(flatten)]
        common: Common,
        /// bce (alias: default), focal, balanced_focal, lrm or combined.
        #[arg(long)]
        variant: Option<LossVariant>,
        /// Training dataset directory.
        #[arg(long)]
        data: PathBuf,
        /// Model file to write.
        #[arg(long)]
        out: PathBuf,
        /// Training log; defaults to `<out>.log.jsonl`.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Runs a model over a dataset, writes detections and prints metrics.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Model file written by `train`.
        #[arg(long)]
        model: PathBuf,
        /// Dataset directory to evaluate on.
        #[arg(long)]
        data: PathBuf,
        /// Detections file (JSON lines) to write.
        #[arg(long)]
        out: PathBuf,
        /// Also write the metrics as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Pairwise frame-by-frame comparison of two detection files.
    Compare {
        #[command(flatten)]
        common: Common,
        /// Detections of the first method (JSON lines).
        #[arg(long)]
        m1: PathBuf,
        /// Detections of the second method (JSON lines).
        #[arg(long)]
        m2: PathBuf,
        /// Ground-truth file (JSON lines).
        #[arg(long)]
        gt: PathBuf,
        /// Also write the report as CSV.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Precision, recall and mAP table for several detection files.
    Report {
        #[command(flatten)]
        common: Common,
        /// Ground-truth file (JSON lines).
        #[arg(long)]
        gt: PathBuf,
        /// `NAME=PATH` or `PATH` (named after the file stem).
        #[arg(long, num_args = 1.., required = true)]
        detections: Vec<String>,
        /// Also write the table as CSV.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Runs a parsed command, printing human-readable output to `out`.
pub fn run(cli: Cli, out: &mut dyn Write) -> Result<()> {
    match cli.command {
        Command::Generate { common, out: dir } => generate(&common.load()?, &dir, out),
        Command::Train { common, variant, data, out: model, log } => {
            let mut cfg = common.load()?;
            if let Some(v) = variant {
                cfg.loss.variant = v;
            }
            let log = log.unwrap_or_else(|| sibling(&model, ".log.jsonl"));
            train_cmd(&cfg, &data, &model, &log, out)
        }
        Command::Evaluate { common, model, data, out: dets, csv } => {
            evaluate(&common.load()?, &model, &data, &dets, csv.as_deref(), out)
        }
        Command::Compare { common, m1, m2, gt, out: csv } => compare(&common.load()?, &m1, &m2, &gt, csv.as_deref(), out),
        Command::Report { common, gt, detections, out: csv } => {
            report(&common.load()?, &gt, &detections, csv.as_deref(), out)
        }
    }
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(suffix);
    path.with_file_name(name)
}

fn say(out: &mut dyn Write, text: impl AsRef<str>) -> Result<()> {
    out.write_all(text.as_ref().as_bytes())
        .map_err(|e| Error::io("<stdout>", e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn generate(cfg: &RunConfig, dir: &Path, out: &mut dyn Write) -> Result<()> {
    let scene = cfg.scene_spec();
    let (n_train, n_test) = (cfg.data.train_frames, cfg.data.test_frames);
    let mut frames = generate_dataset(&scene, n_train + n_test)?;
    let test = frames.split_off(n_train);
    for (name, split) in [("train", &frames), ("test", &test)] {
        let manifest = write_dataset(&dir.join(name), &scene, split)?;
        let ratio = 100.0 * manifest.positives as f64 / manifest.frames as f64;
        say(
            out,
            format!(
                "{name}: {} frames, {} with a target ({ratio:.1}% positive)\n",
                manifest.frames, manifest.positives
            ),
        )?;
    }
    Ok(())
}

pub fn train_cmd(cfg: &RunConfig, data: &Path, model_path: &Path, log_path: &Path, out: &mut dyn Write) -> Result<()> {
    let frames = read_dataset(data)?;
    let spec = cfg.model_spec();
    let tc = cfg.train_config();
    let outcome = train(&frames, &spec, &tc)?;
    save_model(model_path, &outcome.model, tc.seed, tc.loss.variant)?;
    write_jsonl(log_path, &outcome.history)?;
    let last = outcome.history.last().expect("epochs >= 1");
    say(
        out,
        format!(
            "trained {} for {} epochs on {} frames: loss {:.4} (box {:.4}, objectness {:.4})\nmodel: {}\nlog: {}\n",
            tc.loss.variant,
            tc.epochs,
            frames.len(),
            last.total,
            last.box_loss,
            last.objectness,
            model_path.display(),
            log_path.display()
        ),
    )
}

pub fn evaluate(
    cfg: &RunConfig,
    model_path: &Path,
    data: &Path,
    dets_path: &Path,
    csv: Option<&Path>,
    out: &mut dyn Write,
) -> Result<()> {
    let (header, model) = load_model::<f64>(model_path)?;
    let frames = read_dataset(data)?;
    if let Some(f) = frames.first() {
        if f.size != header.spec.grid.image_size {
            return Err(Error::structural(format!(
                "model {} expects {} px frames, dataset {} has {} px",
                model_path.display(),
                header.spec.grid.image_size,
                data.display(),
                f.size
            )));
        }
    }
    let dets = detect_all(&model, &frames, &cfg.inference())?;
    write_jsonl(dets_path, &dets)?;
    let gts: Vec<_> = frames.iter().map(|f| f.ground_truth()).collect();
    let metrics = MetricsReport::compute(&dets, &gts, &cfg.thresholds())?;
    let name = header.variant.name();
    if let Some(path) = csv {
        write_text(path, &metrics_csv(&[(name, metrics)]))?;
    }
    say(out, metrics_table(&[(name, metrics)]))
}

pub fn compare(cfg: &RunConfig, m1: &Path, m2: &Path, gt: &Path, csv: Option<&Path>, out: &mut dyn Write) -> Result<()> {
    let gts = read_ground_truth(gt)?;
    let th = cfg.thresholds();
    let o1 = classify_frames(&read_detections(m1)?, &gts, &th)?;
    let o2 = classify_frames(&read_detections(m2)?, &gts, &th)?;
    let report = pairwise_report(&pair_outcomes(&o1, &o2)?)?;
    if let Some(path) = csv {
        write_text(path, &pairwise_csv(&report))?;
    }
    say(out, pairwise_table(&report, &label(m1), &label(m2)))
}

fn label(path: &Path) -> String {
    path.file_stem().map_or_else(|| path.display().to_string(), |s| s.to_string_lossy().into_owned())
}

pub fn report(cfg: &RunConfig, gt: &Path, detections: &[String], csv: Option<&Path>, out: &mut dyn Write) -> Result<()> {
    let gts = read_ground_truth(gt)?;
    let mut rows = Vec::with_capacity(detections.len());
    for arg in detections {
        let (name, path) = match arg.split_once('=') {
            Some((name, path)) => (name.to_string(), PathBuf::from(path)),
            None => (label(Path::new(arg)), PathBuf::from(arg)),
        };
        let metrics = MetricsReport::compute(&read_detections(&path)?, &gts, &cfg.thresholds())?;
        rows.push((name, metrics));
    }
    let named: Vec<(&str, MetricsReport<f64>)> = rows.iter().map(|(n, m)| (n.as_str(), *m)).collect();
    if let Some(path) = csv {
        write_text(path, &metrics_csv(&named))?;
    }
    say(out, metrics_table(&named))
}

/// Ground-truth file inside a dataset directory.
pub fn ground_truth_path(dataset: &Path) -> PathBuf {
    dataset.join(GROUND_TRUTH_FILE)
}
