//! `coarse`: generate data, train, evaluate, check the bounds, and rerun
//! the synthetic patch experiment.
//!
//! Exit codes: 0 success (bounds hold), 1 internal error or a failed bound,
//! 2 usage or bad config, 3 I/O or file format, 4 unsupported data.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use coarse_core::data::{
    gen_blob_dataset, gen_patch_dataset, load_csv, load_dataset, save_csv, save_dataset, BlobConfig,
    Dataset, ImageShape, PatchConfig,
};
use coarse_core::eval::evaluate;
use coarse_core::experiment::{run_synthetic, ExperimentSpec};
use coarse_core::model::{load_checkpoint, save_checkpoint};
use coarse_core::theory::{model_matrices, verify_lemma1, verify_model};
use coarse_core::trainer::{train, write_metrics_jsonl, Objective, TrainConfig};
use coarse_core::Error;

#[derive(Parser, Debug)]
#[command(name = "coarse", version, about = "Representation learning from coarse labels")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset.
    GenData(GenDataArgs),
    /// Train a model and write a checkpoint plus a JSONL metrics log.
    Train(TrainArgs),
    /// Compute Recall@k, top-k accuracy and fine-class probabilities.
    Eval(EvalArgs),
    /// Measure the bound constants and check the fine-class lower bounds.
    VerifyBounds(VerifyArgs),
    /// Train every objective on the patch dataset for several seeds and
    /// tabulate fine-label retrieval.
    ReproduceSynthetic(ReproduceArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Kind {
    Patch,
    Blob,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Format {
    Cfds,
    Csv,
}

#[derive(Args, Debug)]
struct GenDataArgs {
    #[arg(long, value_enum)]
    kind: Kind,
    /// Number of images (patch).
    #[arg(long, default_value_t = 512)]
    n: usize,
    /// Big patches, i.e. coarse classes (patch).
    #[arg(long, default_value_t = 32)]
    big: usize,
    /// Small patches, i.e. fine classes (patch).
    #[arg(long, default_value_t = 128)]
    small: usize,
    #[arg(long, default_value_t = 32)]
    img_h: usize,
    #[arg(long, default_value_t = 32)]
    img_w: usize,
    #[arg(long, default_value_t = 12)]
    big_size: usize,
    #[arg(long, default_value_t = 4)]
    small_size: usize,
    /// Coarse classes (blob).
    #[arg(long, default_value_t = 4)]
    coarse: usize,
    /// Fine classes per coarse class (blob).
    #[arg(long, default_value_t = 5)]
    fine_per_coarse: usize,
    /// Examples per fine class (blob).
    #[arg(long, default_value_t = 10)]
    z: usize,
    #[arg(long, default_value_t = 16)]
    dim: usize,
    #[arg(long, default_value_t = 4.0)]
    coarse_spread: f64,
    #[arg(long, default_value_t = 1.0)]
    fine_spread: f64,
    #[arg(long, default_value_t = 0.2)]
    noise: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum)]
    format: Option<Format>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct DataArgs {
    /// Dataset file (CFDS1, or CSV with `--format csv` or a `.csv` name).
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum)]
    format: Option<Format>,
    /// Image shape `HxW`, `auto` (infer from the data) or `none`.
    #[arg(long, default_value = "auto")]
    image: String,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    /// JSON training config; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    objective: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Epoch M after which the instance-proxy loss is added.
    #[arg(long)]
    m_epoch: Option<usize>,
    /// Number of proxies P.
    #[arg(long)]
    clusters: Option<usize>,
    #[arg(long)]
    lambda_i: Option<f64>,
    #[arg(long)]
    lambda_p: Option<f64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    momentum: Option<f64>,
    #[arg(long)]
    wd: Option<f64>,
    /// Comma-separated epochs at which the learning rate is divided.
    #[arg(long, value_delimiter = ',')]
    decay_epochs: Option<Vec<usize>>,
    #[arg(long)]
    decay_factor: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    cosine: bool,
    #[arg(long)]
    mlp_head: bool,
    #[arg(long)]
    temp: Option<f64>,
    /// Comma-separated encoder widths; the last one is the embedding size.
    #[arg(long, value_delimiter = ',')]
    hidden: Option<Vec<usize>>,
    /// Crop padding for image data.
    #[arg(long)]
    pad: Option<usize>,
    #[arg(long)]
    no_augment: bool,
    /// Checkpoint path.
    #[arg(long)]
    out: PathBuf,
    /// Metrics log path (default: `<out>.metrics.jsonl`).
    #[arg(long)]
    metrics: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "1,2,4,8")]
    recall_at: Vec<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct VerifyArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
    theorem: u8,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct ReproduceArgs {
    #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
    seeds: Vec<u64>,
    /// Output directory for `results.csv` and `results.json`.
    #[arg(long)]
    out: PathBuf,
    /// JSON experiment spec; `--seeds` and `--epochs` override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Comma-separated objectives (default: all six).
    #[arg(long, value_delimiter = ',')]
    objectives: Option<Vec<String>>,
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<Error>() {
            return match e {
                Error::InvalidArgument(_) => 2,
                Error::Io(_) | Error::Format { .. } | Error::Json(_) => 3,
                Error::Unsupported(_) => 4,
                _ => 1,
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return 3;
        }
        if cause.downcast_ref::<Usage>().is_some() {
            return 2;
        }
    }
    1
}

/// A usage problem found after argument parsing.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<u8> {
    match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::VerifyBounds(a) => verify_cmd(a),
        Command::ReproduceSynthetic(a) => reproduce_cmd(a),
    }
}

fn pick_format(explicit: Option<Format>, path: &Path) -> Format {
    explicit.unwrap_or_else(|| {
        if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv")) {
            Format::Csv
        } else {
            Format::Cfds
        }
    })
}

fn gen_data(a: GenDataArgs) -> anyhow::Result<u8> {
    let data = match a.kind {
        Kind::Patch => gen_patch_dataset(&PatchConfig {
            n: a.n,
            n_big: a.big,
            n_small: a.small,
            img_h: a.img_h,
            img_w: a.img_w,
            big_size: a.big_size,
            small_size: a.small_size,
            seed: a.seed,
        })?,
        Kind::Blob => gen_blob_dataset(&BlobConfig {
            num_coarse: a.coarse,
            fine_per_coarse: a.fine_per_coarse,
            per_fine: a.z,
            dim: a.dim,
            coarse_spread: a.coarse_spread,
            fine_spread: a.fine_spread,
            noise: a.noise,
            seed: a.seed,
        })?,
    };
    match pick_format(a.format, &a.out) {
        Format::Cfds => save_dataset(&data, &a.out),
        Format::Csv => save_csv(&data, &a.out),
    }
    .with_context(|| format!("writing {}", a.out.display()))?;
    println!(
        "n={} C={} F={} dim={} -> {}",
        data.len(),
        data.num_coarse,
        data.num_fine,
        data.dim(),
        a.out.display()
    );
    Ok(0)
}

fn parse_image(spec: &str) -> anyhow::Result<Option<Option<ImageShape>>> {
    match spec {
        "auto" => Ok(None),
        "none" => Ok(Some(None)),
        s => {
            let (h, w) = s
                .split_once(['x', 'X'])
                .ok_or_else(|| usage(format!("--image must be auto, none or HxW, got {s:?}")))?;
            let height = h.parse().map_err(|_| usage(format!("bad image height {h:?}")))?;
            let width = w.parse().map_err(|_| usage(format!("bad image width {w:?}")))?;
            Ok(Some(Some(ImageShape { height, width })))
        }
    }
}

fn load_data(a: &DataArgs) -> anyhow::Result<Dataset> {
    let image = parse_image(&a.image)?;
    let data = match pick_format(a.format, &a.data) {
        Format::Cfds => load_dataset(&a.data),
        Format::Csv => load_csv(&a.data),
    }
    .with_context(|| format!("reading {}", a.data.display()))?;
    Ok(match image {
        None => match data.infer_image_shape() {
            Some(shape) => data.with_image(shape)?,
            None => data,
        },
        Some(None) => data,
        Some(Some(shape)) => data.with_image(shape)?,
    })
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> anyhow::Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).map_err(|e| usage(format!("parsing {}: {e}", path.display())))
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> anyhow::Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn train_config(a: &TrainArgs) -> anyhow::Result<TrainConfig> {
    let mut cfg: TrainConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => TrainConfig::default(),
    };
    if let Some(o) = &a.objective {
        cfg.objective = o.parse::<Objective>().map_err(|e| usage(e.to_string()))?;
    }
    macro_rules! set {
        ($field:ident, $value:expr) => {
            if let Some(v) = $value.clone() {
                cfg.$field = v;
            }
        };
    }
    set!(epochs, a.epochs);
    set!(lambda_i, a.lambda_i);
    set!(lambda_p, a.lambda_p);
    set!(lr, a.lr);
    set!(momentum, a.momentum);
    set!(weight_decay, a.wd);
    set!(lr_decay_epochs, a.decay_epochs);
    set!(lr_decay_factor, a.decay_factor);
    set!(batch_size, a.batch);
    set!(seed, a.seed);
    set!(temperature, a.temp);
    set!(hidden, a.hidden);
    set!(augment_pad, a.pad);
    if a.m_epoch.is_some() {
        cfg.ip_start_epoch = a.m_epoch;
    }
    if a.clusters.is_some() {
        cfg.clusters = a.clusters;
    }
    cfg.cosine |= a.cosine;
    cfg.mlp_head |= a.mlp_head;
    if a.no_augment {
        cfg.augment = false;
    }
    Ok(cfg)
}

fn train_cmd(a: TrainArgs) -> anyhow::Result<u8> {
    let cfg = train_config(&a)?;
    let data = load_data(&a.data)?;
    let out = train(&cfg, &data)?;
    save_checkpoint(&out.params, &a.out).with_context(|| format!("writing {}", a.out.display()))?;
    let metrics_path = a.metrics.clone().unwrap_or_else(|| {
        let mut p = a.out.clone().into_os_string();
        p.push(".metrics.jsonl");
        PathBuf::from(p)
    });
    write_metrics_jsonl(&out.metrics, &metrics_path)
        .with_context(|| format!("writing {}", metrics_path.display()))?;
    if let Some(last) = out.metrics.last() {
        println!(
            "objective={} epochs={} loss_total={:.6} -> {}",
            cfg.objective,
            cfg.epochs,
            last.loss_total,
            a.out.display()
        );
    }
    Ok(0)
}

fn eval_cmd(a: EvalArgs) -> anyhow::Result<u8> {
    let data = load_data(&a.data)?;
    let params = load_checkpoint(&a.checkpoint).with_context(|| format!("reading {}", a.checkpoint.display()))?;
    let report = evaluate(&params, &data, &a.recall_at)?;
    write_json(&a.out, &report)?;
    let recall: Vec<String> = report
        .recall_at
        .iter()
        .map(|(k, v)| format!("R@{k}={v:.4}"))
        .collect();
    println!("{} ({} queries)", recall.join(" "), report.n_queries);
    Ok(0)
}

fn verify_cmd(a: VerifyArgs) -> anyhow::Result<u8> {
    let data = load_data(&a.data)?;
    let params = load_checkpoint(&a.checkpoint).with_context(|| format!("reading {}", a.checkpoint.display()))?;
    let report = verify_model(&params, &data, a.theorem)?;
    let (e, _, wi) = model_matrices(&params, &data)?;
    let fine = data.fine_labels.as_deref().unwrap_or_default();
    let lemma = verify_lemma1(&e, &wi, fine)?;
    let mut json = serde_json::to_value(&report)?;
    json["lemma1"] = serde_json::json!({
        "jensen_all_hold": lemma.jensen_all_hold,
        "lemma_all_hold": lemma.lemma_all_hold,
        "jensen_slack_min": lemma.jensen_slack_min,
        "lemma_slack_min": lemma.lemma_slack_min,
    });
    write_json(&a.out, &json)?;
    let ok = report.all_hold && lemma.jensen_all_hold && lemma.lemma_all_hold;
    println!(
        "theorem {}: all_hold={} vacuous={} slack_min={:e} log_rhs={:.4}",
        a.theorem,
        report.all_hold,
        report.vacuous,
        report.slack_min,
        report.rhs_log.first().copied().unwrap_or(f64::NAN)
    );
    Ok(if ok { 0 } else { 1 })
}

fn reproduce_cmd(a: ReproduceArgs) -> anyhow::Result<u8> {
    let mut spec: ExperimentSpec = match &a.config {
        Some(p) => read_json(p)?,
        None => ExperimentSpec::default(),
    };
    spec.seeds = a.seeds.clone();
    if let Some(e) = a.epochs {
        spec.train.epochs = e;
    }
    if let Some(objs) = &a.objectives {
        spec.objectives = objs
            .iter()
            .map(|o| o.parse::<Objective>().map_err(|e| usage(e.to_string())))
            .collect::<anyhow::Result<_>>()?;
    }
    if spec.seeds.is_empty() {
        bail!(usage("--seeds must not be empty"));
    }
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let result = run_synthetic(&spec)?;
    let csv_path = a.out.join("results.csv");
    fs::write(&csv_path, result.to_csv()?).with_context(|| format!("writing {}", csv_path.display()))?;
    write_json(
        &a.out.join("results.json"),
        &serde_json::json!({ "spec": spec, "result": result }),
    )?;
    for o in &spec.objectives {
        if let Some(m) = result.medians.get(o.name()) {
            let cells: Vec<String> = m.iter().map(|(k, v)| format!("R@{k}={:.1}", 100.0 * v)).collect();
            println!("{:<10} {}", o.name(), cells.join(" "));
        }
    }
    Ok(0)
}
