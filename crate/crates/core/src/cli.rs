//! Command-line front end. Exit codes: 0 ok, 2 configuration or checkpoint,
//! 3 data, 4 numeric.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::error::{Error, Result};
use crate::image::{load_image, save_image};
use crate::metrics::{desk_model, psnr, ssim, NiqeModel};
use crate::model::Stage;
use crate::pipeline::checkpoint::{Checkpoint, Container};
use crate::pipeline::data::{list_pngs, load_image_folder, PairedDataset};
use crate::pipeline::{enhance_image, model_from_checkpoint, Config, Trainer};

#[derive(Debug, Parser)]
#[command(
    name = "vqlight",
    version,
    about = "Low-light image enhancement with a vector-quantized prior"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train the autoencoder and codebook on normal-light images.
    Pretrain(TrainArgs),
    /// Fine-tune on low/normal pairs from a pretrain checkpoint.
    Train(TrainArgs),
    /// Enhance every PNG of a directory with a fine-tuned checkpoint.
    Enhance(EnhanceArgs),
    /// Score a directory: PSNR/SSIM against references, or NIQE without.
    Evaluate(EvaluateArgs),
    /// Print a container's manifest.
    Inspect(InspectArgs),
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    /// TOML configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one configuration key, e.g. `--set lr=2e-4`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub device: Option<String>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Dataset root; overrides `data_dir`.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Number of steps; overrides `pretrain_iters` / `finetune_iters`.
    #[arg(long)]
    pub iters: Option<u64>,
    /// Output directory for checkpoints and the training log.
    #[arg(long)]
    pub out: PathBuf,
    /// Pretrain checkpoint to start fine-tuning from (`train` only).
    #[arg(long)]
    pub init: Option<PathBuf>,
    /// Use the small CPU preset as the base configuration.
    #[arg(long)]
    pub toy: bool,
}

#[derive(Debug, Args)]
pub struct EnhanceArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub device: Option<String>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Directory of images to score.
    #[arg(long)]
    pub input: PathBuf,
    /// Reference directory with matching file names (paired mode).
    #[arg(long, conflicts_with = "niqe_model")]
    pub gt: Option<PathBuf>,
    /// NIQE model file; the bundled model is used when absent.
    #[arg(long)]
    pub niqe_model: Option<PathBuf>,
    /// CSV report path.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub device: Option<String>,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    pub path: PathBuf,
}

/// Per-image scores with a trailing mean row.
#[derive(Clone, Debug, PartialEq)]
pub struct Report {
    pub columns: Vec<String>,
    pub rows: Vec<(String, Vec<f64>)>,
}

impl Report {
    pub fn means(&self) -> Vec<f64> {
        let n = self.rows.len() as f64;
        (0..self.columns.len())
            .map(|c| self.rows.iter().map(|(_, v)| v[c]).sum::<f64>() / n)
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("image,{}\n", self.columns.join(","));
        // Shortest round-trip form, so the mean row can be recomputed exactly.
        let fmt = |v: &[f64]| v.iter().map(|x| format!("{x}")).collect::<Vec<_>>().join(",");
        for (name, v) in &self.rows {
            let _ = writeln!(s, "{name},{}", fmt(v));
        }
        let _ = writeln!(s, "mean,{}", fmt(&self.means()));
        s
    }

    pub fn to_table(&self) -> String {
        let width = self.rows.iter().map(|(n, _)| n.len()).max().unwrap_or(0).max(5);
        let mut s = format!("{:<width$}", "image");
        for c in &self.columns {
            let _ = write!(s, "  {c:>10}");
        }
        s.push('\n');
        let mut line = |name: &str, v: &[f64]| {
            let _ = write!(s, "{name:<width$}");
            for x in v {
                let _ = write!(s, "  {x:>10.4}");
            }
            s.push('\n');
        };
        for (name, v) in &self.rows {
            line(name, v);
        }
        line("mean", &self.means());
        s
    }
}

fn check_device(device: &Option<String>) -> Result<()> {
    match device.as_deref() {
        None | Some("cpu") => Ok(()),
        Some(d) => Err(Error::Config(format!("device {d:?} is not available; only \"cpu\""))),
    }
}

fn build_config(common: &CommonArgs, toy: bool) -> Result<Config> {
    let mut cfg = match &common.config {
        Some(p) => Config::load(p)?,
        None if toy => Config::toy(),
        None => Config::default(),
    };
    for o in &common.overrides {
        cfg.set(o)?;
    }
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(d) = &common.device {
        cfg.device = d.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn data_root(cfg: &Config, arg: &Option<PathBuf>) -> Result<PathBuf> {
    let root = arg
        .clone()
        .or_else(|| cfg.data_dir.clone())
        .ok_or_else(|| Error::Config("no dataset: pass --data or set data_dir".into()))?;
    if !root.is_dir() {
        return Err(Error::data(&root, "dataset directory does not exist"));
    }
    Ok(root)
}

fn cmd_pretrain(a: &TrainArgs) -> Result<()> {
    let mut cfg = build_config(&a.common, a.toy)?;
    let root = data_root(&cfg, &a.data)?;
    cfg.data_dir = Some(root.clone());
    let (_, images) = load_image_folder(&root)?;
    if let Some(n) = a.iters {
        cfg.pretrain_iters = n;
    }
    let iters = cfg.pretrain_iters;
    let mut t = Trainer::pretrain(cfg, images)?;
    let (logs, path) = t.run(iters, Some(&a.out))?;
    report_run(&logs, path.as_deref());
    Ok(())
}

fn cmd_train(a: &TrainArgs) -> Result<()> {
    let mut cfg = build_config(&a.common, a.toy)?;
    let init = a
        .init
        .as_ref()
        .ok_or_else(|| Error::Config("train needs --init <pretrain checkpoint>".into()))?;
    let ckpt = Checkpoint::load(init)?;
    if ckpt.stage != Stage::Pretrain {
        return Err(Error::Checkpoint(format!(
            "{}: expected a pretrain checkpoint",
            init.display()
        )));
    }
    let root = data_root(&cfg, &a.data)?;
    cfg.data_dir = Some(root.clone());
    let ds = PairedDataset::load(&root)?;
    if let Some(n) = a.iters {
        cfg.finetune_iters = n;
    }
    let iters = cfg.finetune_iters;
    let mut t = Trainer::finetune(cfg, ds.low, ds.high, &ckpt)?;
    let (logs, path) = t.run(iters, Some(&a.out))?;
    report_run(&logs, path.as_deref());
    Ok(())
}

fn report_run(logs: &[crate::pipeline::StepLog], path: Option<&Path>) {
    if let Some(last) = logs.last() {
        println!("iteration {} losses {:?}", last.iteration, last.losses);
    }
    if let Some(p) = path {
        println!("checkpoint {}", p.display());
    }
}

fn file_name(p: &Path) -> String {
    p.file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

fn cmd_enhance(a: &EnhanceArgs) -> Result<()> {
    check_device(&a.device)?;
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    if ckpt.stage != Stage::Finetune {
        return Err(Error::Checkpoint(format!(
            "{}: enhance needs a fine-tuned checkpoint",
            a.checkpoint.display()
        )));
    }
    let model = model_from_checkpoint(&ckpt)?;
    std::fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    for path in list_pngs(&a.input)? {
        let img = load_image(&path)?;
        let out = enhance_image(&model, &img)?;
        save_image(&out, a.out.join(file_name(&path)))?;
        println!("{}", file_name(&path));
    }
    Ok(())
}

/// Paired PSNR/SSIM report over matching file names.
pub fn evaluate_paired(input: &Path, gt: &Path) -> Result<Report> {
    let outs = list_pngs(input)?;
    let refs = list_pngs(gt)?;
    let (on, rn): (Vec<String>, Vec<String>) = (
        outs.iter().map(|p| file_name(p)).collect(),
        refs.iter().map(|p| file_name(p)).collect(),
    );
    if on != rn {
        let unmatched: Vec<&String> = on
            .iter()
            .filter(|n| !rn.contains(n))
            .chain(rn.iter().filter(|n| !on.contains(n)))
            .collect();
        return Err(Error::data(
            input,
            format!("file names do not match {}: {unmatched:?}", gt.display()),
        ));
    }
    if on.is_empty() {
        return Err(Error::data(input, "no PNG files"));
    }
    let mut rows = Vec::with_capacity(on.len());
    for ((name, o), r) in on.into_iter().zip(&outs).zip(&refs) {
        let (a, b) = (load_image(o)?, load_image(r)?);
        if !a.same_dims(&b) {
            return Err(Error::data(o, "dimensions differ from the reference"));
        }
        rows.push((name, vec![psnr(&a, &b)?, ssim(&a, &b)?]));
    }
    Ok(Report {
        columns: vec!["psnr".into(), "ssim".into()],
        rows,
    })
}

/// NIQE report for every image of a directory.
pub fn evaluate_niqe(input: &Path, model: &NiqeModel) -> Result<Report> {
    let files = list_pngs(input)?;
    if files.is_empty() {
        return Err(Error::data(input, "no PNG files"));
    }
    let mut rows = Vec::with_capacity(files.len());
    for f in &files {
        rows.push((file_name(f), vec![model.score(&load_image(f)?)?]));
    }
    Ok(Report {
        columns: vec!["niqe".into()],
        rows,
    })
}

fn cmd_evaluate(a: &EvaluateArgs) -> Result<()> {
    check_device(&a.device)?;
    let report = match &a.gt {
        Some(gt) => evaluate_paired(&a.input, gt)?,
        None => {
            let model = match &a.niqe_model {
                Some(p) => NiqeModel::load(p)?,
                None => desk_model(),
            };
            evaluate_niqe(&a.input, &model)?
        }
    };
    print!("{}", report.to_table());
    if let Some(out) = &a.out {
        if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(out, report.to_csv()).map_err(|e| Error::io(out, e))?;
    }
    Ok(())
}

fn cmd_inspect(a: &InspectArgs) -> Result<()> {
    let bytes = std::fs::read(&a.path).map_err(|e| Error::io(&a.path, e))?;
    let c = Container::from_bytes(&bytes, &a.path)?;
    let mlen = u64::from_le_bytes(bytes[8..16].try_into().expect("checked by parser")) as usize;
    let manifest: serde_json::Value = serde_json::from_slice(&bytes[16..16 + mlen]).expect("checked by parser");
    println!("format_version {}", manifest["format_version"]);
    let mut meta = c.meta.clone();
    if let Some(m) = meta.as_object_mut() {
        m.remove("config");
    }
    println!("meta {meta}");
    println!(
        "{:<48} {:>16} {:>12} {:>10} {:>10}",
        "name", "shape", "offset", "bytes", "crc32"
    );
    for e in manifest["tensors"].as_array().into_iter().flatten() {
        let shape: Vec<String> = e["shape"]
            .as_array()
            .into_iter()
            .flatten()
            .map(|d| d.to_string())
            .collect();
        println!(
            "{:<48} {:>16} {:>12} {:>10} {:>10}",
            e["name"].as_str().unwrap_or_default(),
            shape.join("x"),
            e["offset"],
            e["nbytes"],
            format!("{:08x}", e["crc32"].as_u64().unwrap_or_default())
        );
    }
    Ok(())
}

pub fn execute(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Pretrain(a) => cmd_pretrain(a),
        Command::Train(a) => cmd_train(a),
        Command::Enhance(a) => cmd_enhance(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Inspect(a) => cmd_inspect(a),
    }
}

/// Parse, run, and map the outcome to an exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
