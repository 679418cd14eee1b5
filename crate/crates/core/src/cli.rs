//! Command-line front end: `gen-data`, `train`, `infer`, `eval`, `inspect`.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::cdgan::{self, Discriminator, DiscriminatorConfig, Generator, GeneratorConfig};
use crate::data::{checkpoint, io};
use crate::error::{Error, Result};
use crate::metrics::{self, ConfusionCounts, Rates};
use crate::optim::{LrSchedule, DEFAULT_BETA1, DEFAULT_LR};
use crate::rng::RngStream;
use crate::tiling::{DEFAULT_PATCH, DEFAULT_STRIDE, DEFAULT_THRESHOLD};
use crate::train::{self, Detector, LogRow, ModelKind, TrainConfig};
use crate::wnet::{self, WNet, WNetConfig};

pub const RUN_CONFIG_FILE: &str = "run_config.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.cdck";
pub const TRAIN_LOG_FILE: &str = "train_log.csv";

#[derive(Debug, Parser)]
#[command(name = "wnet", version, about = "Bi-temporal change detection with W-Net and CDGAN")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(tag = "subcommand", rename_all = "kebab-case")]
pub enum Command {
    /// Generate a synthetic bi-temporal dataset.
    GenData(GenDataArgs),
    /// Train a model on a dataset directory.
    Train(TrainArgs),
    /// Tiled inference on one image pair.
    Infer(InferArgs),
    /// Score a binary change map against ground truth.
    Eval(EvalArgs),
    /// Print the layer manifest and parameter counts.
    Inspect(InspectArgs),
}

#[derive(Debug, Args, Serialize)]
pub struct GenDataArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 10)]
    pub pairs: usize,
    #[arg(long, default_value_t = 256)]
    pub size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long = "change-frac", default_value_t = 0.4)]
    pub change_frac: f64,
}

#[derive(Debug, Args, Serialize)]
pub struct TrainArgs {
    #[arg(long, default_value = "wnet", value_parser = parse_kind)]
    pub model: ModelKind,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 10)]
    pub epochs: usize,
    #[arg(long, default_value_t = 4)]
    pub batch: usize,
    #[arg(long = "base-width", default_value_t = 0.125)]
    pub base_width: f64,
    #[arg(long, default_value_t = DEFAULT_LR)]
    pub lr: f64,
    #[arg(long, default_value_t = DEFAULT_BETA1)]
    pub beta1: f64,
    #[arg(long, default_value_t = cdgan::DEFAULT_LAMBDA)]
    pub lambda: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// Training crop size; defaults to the largest multiple of 16 up to 256.
    #[arg(long)]
    pub patch: Option<usize>,
    /// Stop after this many optimizer steps.
    #[arg(long = "max-steps")]
    pub max_steps: Option<u64>,
    /// Generator updates per discriminator update (cdgan only).
    #[arg(long = "g-per-d", default_value_t = cdgan::DEFAULT_G_PER_D)]
    pub g_per_d: usize,
    /// Epochs without validation improvement before the learning rate decays.
    #[arg(long, default_value_t = LrSchedule::default().patience)]
    pub patience: usize,
    #[arg(long, default_value_t = LrSchedule::default().factor)]
    pub decay: f64,
}

#[derive(Debug, Args, Serialize)]
pub struct InferArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub t1: PathBuf,
    #[arg(long)]
    pub t2: PathBuf,
    #[arg(long, default_value_t = DEFAULT_STRIDE)]
    pub stride: usize,
    #[arg(long, default_value_t = DEFAULT_PATCH)]
    pub patch: usize,
    #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
    pub threshold: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct EvalArgs {
    /// Binary change map (0/255 PNG).
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long)]
    pub gt: PathBuf,
    /// Raw probability map written by `infer`; enables the threshold sweep.
    #[arg(long)]
    pub prob: Option<PathBuf>,
    /// Directory for the curve CSVs; requires `--prob`.
    #[arg(long)]
    pub curves: Option<PathBuf>,
    #[arg(long)]
    pub summary: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct InspectArgs {
    #[arg(long, default_value = "wnet", value_parser = parse_kind)]
    pub model: ModelKind,
    #[arg(long = "base-width", default_value_t = 1.0)]
    pub base_width: f64,
    #[arg(long = "input-size", default_value_t = 256)]
    pub input_size: usize,
}

fn parse_kind(s: &str) -> std::result::Result<ModelKind, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

/// Metrics written by `eval`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalSummary {
    pub width: u32,
    pub height: u32,
    pub counts: ConfusionCounts,
    pub rates: Rates,
    pub fm_auc: Option<f64>,
    pub pr_auc: Option<f64>,
    pub dropped_pr_points: Option<usize>,
}

#[derive(Serialize)]
struct RunRecord<'a> {
    #[serde(flatten)]
    command: &'a Command,
    version: &'static str,
    rng: &'static str,
}

fn write_run_record(dir: &Path, command: &Command) -> Result<()> {
    fs::create_dir_all(dir)?;
    let record = RunRecord {
        command,
        version: env!("CARGO_PKG_VERSION"),
        rng: RngStream::new(0).algorithm(),
    };
    fs::write(dir.join(RUN_CONFIG_FILE), serde_json::to_string_pretty(&record)? + "\n")?;
    Ok(())
}

/// Parse `argv` (including the program name) and run the subcommand.
pub fn run<I, S>(argv: I) -> anyhow::Result<()>
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = Cli::try_parse_from(argv)?;
    execute(&cli.command)?;
    Ok(())
}

pub fn execute(command: &Command) -> Result<()> {
    match command {
        Command::GenData(a) => gen_data(a, command),
        Command::Train(a) => train_cmd(a, command),
        Command::Infer(a) => infer(a, command),
        Command::Eval(a) => eval(a, command).map(|_| ()),
        Command::Inspect(a) => inspect(a),
    }
}

fn gen_data(a: &GenDataArgs, command: &Command) -> Result<()> {
    if !(0.0..=1.0).contains(&a.change_frac) {
        return Err(Error::InvalidConfig(format!(
            "--change-frac {} is outside [0, 1]",
            a.change_frac
        )));
    }
    let ds = io::generate_dataset(&a.out, a.pairs, a.size, a.seed, a.change_frac)?;
    write_run_record(&a.out, command)?;
    let train = ds.records.iter().filter(|r| r.split == io::Split::Train).count();
    println!(
        "wrote {} pairs ({} train, {} val) of {}x{} to {}",
        ds.records.len(),
        train,
        ds.records.len() - train,
        a.size,
        a.size,
        a.out.display()
    );
    Ok(())
}

fn train_cmd(a: &TrainArgs, command: &Command) -> Result<()> {
    let config = TrainConfig {
        model: a.model,
        epochs: a.epochs,
        batch: a.batch,
        base_width: a.base_width,
        patch: a.patch,
        lr: a.lr,
        beta1: a.beta1,
        lambda: a.lambda,
        seed: a.seed,
        g_per_d: a.g_per_d,
        patience: a.patience,
        decay: a.decay,
        max_steps: a.max_steps,
    };
    config.validate()?;
    let outcome = train::train_from_dir(&config, &a.data)?;
    fs::create_dir_all(&a.out)?;
    write_run_record(&a.out, command)?;
    fs::write(a.out.join(CHECKPOINT_FILE), {
        let ck = &outcome.checkpoint;
        let mut params = crate::nn::ParamSet::new();
        for (name, t) in &ck.tensors {
            params.push(name.clone(), t.clone());
        }
        checkpoint::encode(&ck.meta, &params)
    })?;
    let mut log = String::from(LogRow::header(a.model));
    log.push('\n');
    for row in &outcome.log {
        log.push_str(&row.csv());
        log.push('\n');
    }
    fs::write(a.out.join(TRAIN_LOG_FILE), log)?;
    let last = outcome.log.last().map(|r| r.csv()).unwrap_or_default();
    println!(
        "trained {} for {} steps; last log row: {}",
        a.model, outcome.steps, last
    );
    if a.model == ModelKind::Cdgan {
        println!(
            "discriminator updates: {}, generator updates: {}",
            outcome.d_updates, outcome.g_updates
        );
    }
    println!("checkpoint written to {}", a.out.join(CHECKPOINT_FILE).display());
    Ok(())
}

fn infer(a: &InferArgs, command: &Command) -> Result<()> {
    let ck = checkpoint::load_checkpoint(&a.checkpoint)?;
    let t1 = io::load_rgb(&a.t1)?;
    let t2 = io::load_rgb(&a.t2)?;
    if !(0.0..=1.0).contains(&a.threshold) {
        return Err(Error::InvalidConfig(format!(
            "--threshold {} is outside [0, 1]",
            a.threshold
        )));
    }
    let plan = crate::tiling::plan_tiles(t1.width() as usize, t1.height() as usize, a.patch, a.stride)?;
    println!(
        "tile plan: {} windows, x origins {:?}, y origins {:?}",
        plan.len(),
        plan.x_origins,
        plan.y_origins
    );
    let detector = Detector::from_checkpoint(&ck, a.patch)?;
    let out = train::infer_images(&detector, &t1, &t2, a.patch, a.stride, a.threshold)?;
    let (w, h) = t1.dimensions();
    fs::create_dir_all(&a.out)?;
    write_run_record(&a.out, command)?;
    io::save_gray(&io::prob_to_gray(&out.prob, w, h)?, &a.out.join("prob.png"))?;
    io::save_gray(&io::bools_to_mask(&out.binary, w, h)?, &a.out.join("change.png"))?;
    io::write_prob_map(&a.out.join("prob.f32"), &out.prob, w, h)?;
    let changed = out.binary.iter().filter(|&&b| b).count();
    println!(
        "{} inference on {w}x{h}: {changed} changed pixels at threshold {}",
        detector.kind(),
        a.threshold
    );
    Ok(())
}

/// Compute and write the evaluation summary (and curves when requested).
pub fn eval(a: &EvalArgs, command: &Command) -> Result<EvalSummary> {
    let pred = io::load_mask(&a.pred)?;
    let gt = io::load_mask(&a.gt)?;
    if pred.dimensions() != gt.dimensions() {
        return Err(Error::shape(
            "eval",
            &[pred.width() as usize, pred.height() as usize],
            &[gt.width() as usize, gt.height() as usize],
        ));
    }
    if a.curves.is_some() && a.prob.is_none() {
        return Err(Error::InvalidArgument("--curves requires --prob".into()));
    }
    let gt_bools = io::mask_to_bools(&gt);
    let counts = metrics::confusion(&io::mask_to_bools(&pred), &gt_bools)?;
    let mut summary = EvalSummary {
        width: gt.width(),
        height: gt.height(),
        counts,
        rates: metrics::rates(&counts),
        fm_auc: None,
        pr_auc: None,
        dropped_pr_points: None,
    };
    if let Some(prob_path) = &a.prob {
        let (prob, w, h) = io::read_prob_map(prob_path)?;
        if (w, h) != gt.dimensions() {
            return Err(Error::shape(
                "eval",
                &[w as usize, h as usize],
                &[gt.width() as usize, gt.height() as usize],
            ));
        }
        let sweep = metrics::sweep_curves(&prob, &gt_bools, metrics::DEFAULT_THRESHOLDS)?;
        summary.fm_auc = Some(sweep.fm.auc);
        summary.pr_auc = Some(sweep.pr.auc);
        summary.dropped_pr_points = Some(sweep.dropped_pr_points);
        if let Some(dir) = &a.curves {
            fs::create_dir_all(dir)?;
            fs::write(dir.join("sweep.csv"), metrics::sweep_csv(&sweep))?;
            let curve_csv = |header: &str, curve: &metrics::Curve| {
                let mut s = format!("{header}\n");
                for p in &curve.points {
                    s.push_str(&format!("{:.2},{:.6},{:.6}\n", p.threshold, p.x, p.y));
                }
                s
            };
            fs::write(dir.join("fm_curve.csv"), curve_csv("threshold,mar,far", &sweep.fm))?;
            fs::write(
                dir.join("pr_curve.csv"),
                curve_csv("threshold,recall,precision", &sweep.pr),
            )?;
            write_run_record(dir, command)?;
        }
    }
    let summary_dir = match a.summary.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    fs::create_dir_all(&summary_dir)?;
    fs::write(&a.summary, serde_json::to_string_pretty(&summary)? + "\n")?;
    write_run_record(&summary_dir, command)?;
    let show = |v: Option<f64>| v.map(|v| format!("{v:.6}")).unwrap_or_else(|| "undefined".into());
    println!(
        "kappa {} oer {} mar {} far {}",
        show(summary.rates.kappa),
        show(summary.rates.oer),
        show(summary.rates.mar),
        show(summary.rates.far)
    );
    Ok(summary)
}

fn print_manifest(rows: &[wnet::LayerRow]) {
    print!("{}", wnet::manifest_csv(rows));
}

fn inspect(a: &InspectArgs) -> Result<()> {
    let mut rng = RngStream::new(0);
    match a.model {
        ModelKind::Wnet => {
            let net = WNet::<f32>::new(WNetConfig::scaled(a.base_width, a.input_size), &mut rng)?;
            print_manifest(net.manifest());
            let from_rows: usize = net.manifest().iter().map(|r| r.param_count).sum();
            let closed = net.closed_form_param_count();
            println!("total parameters (layer sum): {from_rows}");
            println!("total parameters (closed form): {closed}");
            println!(
                "reference count {}: delta {}",
                wnet::REFERENCE_PARAM_COUNT,
                closed as i64 - wnet::REFERENCE_PARAM_COUNT as i64
            );
        }
        ModelKind::Cdgan => {
            let g = Generator::<f32>::new(GeneratorConfig::scaled(a.base_width, a.input_size), &mut rng)?;
            let d = Discriminator::<f32>::new(DiscriminatorConfig::scaled(a.base_width, a.input_size), &mut rng)?;
            print_manifest(g.net().manifest());
            println!(
                "discriminator: {} conv layers, dense inputs {}",
                d.layers().len(),
                d.config().dense_inputs()
            );
            let g_count = g.net().closed_form_param_count();
            let d_count = d.closed_form_param_count();
            println!("generator parameters (layer sum): {}", g.params().numel());
            println!("generator parameters (closed form): {g_count}");
            println!("discriminator parameters (tensor sum): {}", d.params().numel());
            println!("discriminator parameters (closed form): {d_count}");
            let total = g_count + d_count;
            println!("total parameters: {total}");
            println!(
                "reference count {}: delta {}",
                cdgan::REFERENCE_PARAM_COUNT,
                total as i64 - cdgan::REFERENCE_PARAM_COUNT as i64
            );
        }
    }
    Ok(())
}

/// Entry point used by the binary: one-line diagnostic and exit code.
pub fn main_with_args<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    match run(argv) {
        Ok(()) => 0,
        Err(e) => {
            if let Some(ce) = e.downcast_ref::<clap::Error>() {
                use clap::error::ErrorKind;
                if matches!(ce.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                    print!("{ce}");
                    return 0;
                }
                let msg = ce.to_string();
                eprintln!("{}", msg.lines().next().unwrap_or("invalid arguments"));
                return 2;
            }
            eprintln!("error: {e}");
            1
        }
    }
}
