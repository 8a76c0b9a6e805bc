mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;
use serde::{Deserialize, Serialize};

use wfd::detector::{detect_traces, DetectionRecord, DetectorModel, Extractor, ExtractorConfig};
use wfd::eval::{cells_to_mb, map_report, pair_detections, throughput, EvalConfig};
use wfd::synth::{gen_dataset, SignatureBank, SynthConfig};
use wfd::trace::{cell_count, read_jsonl, write_jsonl, MultiTabTrace};
use wfd::train::{pretrain_extractor, train_detector, write_loss_csv, LossConfig, PretrainConfig, TrainConfig};
use wfd::Error;

use config::ConfigError;

#[derive(Parser)]
#[command(name = "wfd", version, about = "Multi-tab website fingerprint detection")]
struct Cli {
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// TOML file with defaults for the subcommand's flags; flags win.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Log progress to stderr.
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic multi-tab dataset.
    Synth(SynthArgs),
    /// Pretrain the feature extractor on single-tab traces.
    Pretrain(PretrainArgs),
    /// Train the detection head on multi-tab traces.
    Train(TrainArgs),
    /// Run a trained model over a dataset.
    Detect(DetectArgs),
    /// Score detections against ground truths.
    Eval(EvalArgs),
    /// Measure detection throughput.
    Bench(BenchArgs),
}

#[derive(Args, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct SynthArgs {
    /// Number of monitored websites [default: 5]
    #[arg(long)]
    classes: Option<u32>,
    /// Unmonitored visits per monitored visit [default: 10]
    #[arg(long)]
    base_rate: Option<f64>,
    /// Single-tab traces per multi-tab trace [default: 2]
    #[arg(long)]
    tabs: Option<usize>,
    /// Training-split traces [default: 100]
    #[arg(long)]
    count: Option<usize>,
    /// Test-split traces [default: 100]
    #[arg(long)]
    test_count: Option<usize>,
    /// Seed for trace sampling [default: 0]
    #[arg(long)]
    seed: Option<u64>,
    /// Seed of the website signatures; keep it fixed across datasets that share classes [default: 0]
    #[arg(long)]
    world_seed: Option<u64>,
    /// How far class signatures deviate from each other [default: 1.0]
    #[arg(long)]
    separation: Option<f64>,
    /// Allow overlap proportions outside the standard grid, including zero
    #[arg(long)]
    #[serde(default)]
    free_overlap: bool,
    /// Output directory
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct PretrainArgs {
    /// Dataset directory of single-tab traces (reads train.jsonl)
    #[arg(long)]
    data: Option<PathBuf>,
    /// Extractor checkpoint to write
    #[arg(long)]
    out: Option<PathBuf>,
    /// [default: 20]
    #[arg(long)]
    epochs: Option<usize>,
    /// [default: 0.05]
    #[arg(long)]
    lr: Option<f64>,
    /// [default: 16]
    #[arg(long)]
    batch: Option<usize>,
    /// Seed for initialisation and shuffling [default: 0]
    #[arg(long)]
    seed: Option<u64>,
    /// Channels of the first stage [default: 16]
    #[arg(long)]
    width: Option<usize>,
    /// Temporal down-sampling rate [default: 16]
    #[arg(long)]
    r_ds: Option<usize>,
}

#[derive(Args, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct TrainArgs {
    /// Dataset directory (reads train.jsonl)
    #[arg(long)]
    data: Option<PathBuf>,
    /// Pretrained extractor checkpoint
    #[arg(long)]
    pretrained: Option<PathBuf>,
    /// Detector checkpoint to write
    #[arg(long)]
    out: Option<PathBuf>,
    /// [default: 2000]
    #[arg(long)]
    iters: Option<usize>,
    /// [default: 0.12]
    #[arg(long)]
    lr: Option<f64>,
    /// [default: 8]
    #[arg(long)]
    batch: Option<usize>,
    /// [default: 0]
    #[arg(long)]
    seed: Option<u64>,
    /// Anchor lengths per position [default: 8]
    #[arg(long)]
    anchors: Option<usize>,
    /// Monitored classes; inferred from the labels when absent
    #[arg(long)]
    classes: Option<usize>,
    /// Range of the center offset, in bursts [default: 1.0]
    #[arg(long)]
    center_scale: Option<f64>,
    /// Gradient norm cap per step [default: 1.0]
    #[arg(long)]
    clip_norm: Option<f64>,
    /// Disable gradient clipping
    #[arg(long)]
    #[serde(default)]
    no_clip: bool,
    /// Heavy-ball momentum [default: 0.0]
    #[arg(long)]
    momentum: Option<f64>,
    /// Fraction of the run after which the learning rate drops tenfold [default: never]
    #[arg(long)]
    decay_at: Option<f64>,
    /// Channels of the head convolutions [default: extractor output channels]
    #[arg(long)]
    head_channels: Option<usize>,
    /// Ignore ambiguous proposals on every class, not only the overlapped ground truths' classes
    #[arg(long)]
    #[serde(default)]
    no_class_ignore: bool,
    /// Loss log (iteration, loss, cls, reg) [default: loss.csv beside --out]
    #[arg(long)]
    loss_csv: Option<PathBuf>,
}

#[derive(Args, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct DetectArgs {
    /// Detector checkpoint
    #[arg(long)]
    model: Option<PathBuf>,
    /// Traces to scan (JSON lines)
    #[arg(long)]
    input: Option<PathBuf>,
    /// Detections to write (JSON lines)
    #[arg(long)]
    out: Option<PathBuf>,
    /// Minimum class score kept [default: 0.05]
    #[arg(long)]
    score_thresh: Option<f64>,
    /// IoUT above which lower-scored same-class detections are suppressed [default: 0.5]
    #[arg(long)]
    nms_thresh: Option<f64>,
}

#[derive(Args, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct EvalArgs {
    /// Detections (JSON lines)
    #[arg(long)]
    pred: Option<PathBuf>,
    /// Ground-truth traces (JSON lines)
    #[arg(long)]
    gt: Option<PathBuf>,
    /// Report to write
    #[arg(long)]
    out: Option<PathBuf>,
    /// Score threshold for the reported precision, recall and counts [default: 0.5]
    #[arg(long)]
    tau: Option<f64>,
    /// Timing file from `detect`, used to fill in MBps [default: timing.json beside --pred, if present]
    #[arg(long)]
    timing: Option<PathBuf>,
}

#[derive(Args, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct BenchArgs {
    /// Detector checkpoint
    #[arg(long)]
    model: Option<PathBuf>,
    /// Traces to scan (JSON lines)
    #[arg(long)]
    input: Option<PathBuf>,
    /// [default: 0.05]
    #[arg(long)]
    score_thresh: Option<f64>,
    /// [default: 0.5]
    #[arg(long)]
    nms_thresh: Option<f64>,
    /// Directory for bench.json and run_config.json
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Cells scanned and wall time of one detection pass.
#[derive(Debug, Serialize, Deserialize)]
struct Timing {
    traces: usize,
    cells: u64,
    megabytes: f64,
    seconds: f64,
    mbps: f64,
}

fn required<T: Clone>(v: &Option<T>, flag: &str) -> Result<T> {
    v.clone()
        .ok_or_else(|| ConfigError(format!("--{flag} is required")).into())
}

fn parent_dir(p: &Path) -> PathBuf {
    match p.parent() {
        Some(d) if !d.as_os_str().is_empty() => d.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

fn synth(args: SynthArgs) -> Result<()> {
    let d = SynthConfig::default();
    let cfg = SynthConfig {
        classes: args.classes.unwrap_or(d.classes),
        base_rate: args.base_rate.unwrap_or(d.base_rate),
        tabs: args.tabs.unwrap_or(d.tabs),
        count: args.count.unwrap_or(d.count),
        test_count: args.test_count.unwrap_or(d.test_count),
        seed: args.seed.unwrap_or(d.seed),
        bank: SignatureBank {
            world_seed: args.world_seed.unwrap_or(d.bank.world_seed),
            separation: args.separation.unwrap_or(d.bank.separation),
            ..d.bank
        },
        free_overlap: args.free_overlap,
    };
    let out = required(&args.out, "out")?;
    config::echo(&out, "synth", &serde_json::json!({ "out": out, "synth": cfg }))?;
    let m = gen_dataset(&cfg, &out)?;
    println!(
        "wrote {} train and {} test traces to {} (mean {:.1} cells, {:.1} bursts)",
        m.train.traces,
        m.test.traces,
        out.display(),
        m.train.mean_cells,
        m.train.mean_bursts
    );
    Ok(())
}

fn pretrain(args: PretrainArgs) -> Result<()> {
    let data = required(&args.data, "data")?;
    let out = required(&args.out, "out")?;
    let d = PretrainConfig::default();
    let cfg = PretrainConfig {
        epochs: args.epochs.unwrap_or(d.epochs),
        lr: args.lr.unwrap_or(d.lr),
        batch: args.batch.unwrap_or(d.batch),
        seed: args.seed.unwrap_or(d.seed),
    };
    let de = ExtractorConfig::default();
    let ex_cfg = ExtractorConfig {
        width: args.width.unwrap_or(de.width),
        r_ds: args.r_ds.unwrap_or(de.r_ds),
        seed: cfg.seed,
        ..de
    };
    let dir = parent_dir(&out);
    config::echo(
        &dir,
        "pretrain",
        &serde_json::json!({ "data": data, "out": out, "pretrain": cfg, "extractor": ex_cfg }),
    )?;
    let records = read_jsonl(data.join("train.jsonl"))?;
    let (ex, report) = pretrain_extractor::<f32>(&records, ex_cfg, &cfg)?;
    ex.save(&out)?;
    let path = dir.join("pretrain_report.json");
    std::fs::write(&path, serde_json::to_string_pretty(&report)?).map_err(|e| Error::io(&path, e))?;
    println!(
        "pretrained on {} traces, final accuracy {:.3}",
        records.len(),
        report.accuracy.last().copied().unwrap_or(0.0)
    );
    Ok(())
}

fn train(args: TrainArgs) -> Result<()> {
    let data = required(&args.data, "data")?;
    let pretrained = required(&args.pretrained, "pretrained")?;
    let out = required(&args.out, "out")?;
    let d = TrainConfig::default();
    let cfg = TrainConfig {
        lr: args.lr.unwrap_or(d.lr),
        batch: args.batch.unwrap_or(d.batch),
        iterations: args.iters.unwrap_or(d.iterations),
        seed: args.seed.unwrap_or(d.seed),
        anchors: args.anchors.unwrap_or(d.anchors),
        classes: args.classes.or(d.classes),
        head_channels: args.head_channels.or(d.head_channels),
        center_scale: args.center_scale.unwrap_or(d.center_scale),
        clip_norm: if args.no_clip {
            None
        } else {
            args.clip_norm.or(d.clip_norm)
        },
        momentum: args.momentum.unwrap_or(d.momentum),
        decay_at: args.decay_at.or(d.decay_at),
        loss: LossConfig {
            class_ignore: !args.no_class_ignore,
            ..d.loss
        },
    };
    let dir = parent_dir(&out);
    let csv = args.loss_csv.clone().unwrap_or_else(|| dir.join("loss.csv"));
    config::echo(
        &dir,
        "train",
        &serde_json::json!({
            "data": data, "pretrained": pretrained, "out": out, "loss_csv": csv, "train": cfg,
        }),
    )?;
    let extractor = Extractor::<f32>::load(&pretrained)?;
    let records = read_jsonl(data.join("train.jsonl"))?;
    let (model, log) = train_detector(&records, extractor, &cfg)?;
    model.save(&out)?;
    write_loss_csv(&csv, &log)?;
    if let Some(last) = log.last() {
        println!("trained {} iterations, final loss {:.4}", log.len(), last.loss);
    }
    Ok(())
}

fn run_detection(
    model: &Path,
    input: &Path,
    score_thresh: f64,
    nms_thresh: f64,
) -> Result<(Vec<DetectionRecord>, Timing)> {
    if !(0.0..=1.0).contains(&score_thresh) || !(0.0..=1.0).contains(&nms_thresh) {
        return Err(ConfigError("thresholds must lie in [0, 1]".into()).into());
    }
    let model = DetectorModel::<f32>::load(model)?;
    let traces = read_jsonl(input)?;
    let start = Instant::now();
    let dets = detect_traces(&model, &traces, score_thresh, nms_thresh)?;
    let seconds = start.elapsed().as_secs_f64();
    let cells: u64 = traces.iter().map(|t: &MultiTabTrace| cell_count(&t.bursts)).sum();
    let mbps = if seconds > 0.0 {
        throughput(cells, seconds)?
    } else {
        0.0
    };
    let timing = Timing {
        traces: traces.len(),
        cells,
        megabytes: cells_to_mb(cells),
        seconds,
        mbps,
    };
    Ok((dets, timing))
}

fn detect(args: DetectArgs) -> Result<()> {
    let model = required(&args.model, "model")?;
    let input = required(&args.input, "input")?;
    let out = required(&args.out, "out")?;
    let score_thresh = args.score_thresh.unwrap_or(0.05);
    let nms_thresh = args.nms_thresh.unwrap_or(0.5);
    let dir = parent_dir(&out);
    config::echo(
        &dir,
        "detect",
        &serde_json::json!({
            "model": model, "input": input, "out": out,
            "score_thresh": score_thresh, "nms_thresh": nms_thresh,
        }),
    )?;
    let (dets, timing) = run_detection(&model, &input, score_thresh, nms_thresh)?;
    write_jsonl(&out, &dets)?;
    let path = dir.join("timing.json");
    std::fs::write(&path, serde_json::to_string_pretty(&timing)?).map_err(|e| Error::io(&path, e))?;
    println!(
        "{} detections over {} traces ({:.2} MB in {:.3} s)",
        dets.len(),
        timing.traces,
        timing.megabytes,
        timing.seconds
    );
    Ok(())
}

fn read_detections(path: &Path) -> Result<Vec<DetectionRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| {
            serde_json::from_str(l).map_err(|e| Error::Data(format!("{}:{}: {e}", path.display(), n + 1)).into())
        })
        .collect()
}

fn eval(args: EvalArgs) -> Result<()> {
    let pred = required(&args.pred, "pred")?;
    let gt = required(&args.gt, "gt")?;
    let out = required(&args.out, "out")?;
    let cfg = EvalConfig {
        tau: args.tau.unwrap_or(EvalConfig::default().tau),
        ..Default::default()
    };
    let timing_path = args.timing.clone().or_else(|| {
        let p = parent_dir(&pred).join("timing.json");
        p.exists().then_some(p)
    });
    config::echo(
        &parent_dir(&out),
        "eval",
        &serde_json::json!({ "pred": pred, "gt": gt, "out": out, "timing": timing_path, "eval": cfg }),
    )?;
    let dets = read_detections(&pred)?;
    let gts = read_jsonl(&gt)?;
    let mut report = map_report(&pair_detections(&gts, &dets)?, &cfg)?;
    if let Some(p) = timing_path {
        let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        let t: Timing = serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", p.display())))?;
        report.mbps = Some(t.mbps);
    }
    std::fs::write(&out, serde_json::to_string_pretty(&report)?).map_err(|e| Error::io(&out, e))?;
    println!(
        "mAP {:.4}  mAP_.50 {:.4}  mAP_.75 {:.4}  precision {:.4}  recall {:.4}",
        report.map, report.map_50, report.map_75, report.precision, report.recall
    );
    Ok(())
}

fn bench(args: BenchArgs) -> Result<()> {
    let model = required(&args.model, "model")?;
    let input = required(&args.input, "input")?;
    let score_thresh = args.score_thresh.unwrap_or(0.05);
    let nms_thresh = args.nms_thresh.unwrap_or(0.5);
    if let Some(dir) = &args.out {
        config::echo(
            dir,
            "bench",
            &serde_json::json!({
                "model": model, "input": input, "score_thresh": score_thresh, "nms_thresh": nms_thresh,
            }),
        )?;
    }
    let (_, timing) = run_detection(&model, &input, score_thresh, nms_thresh)?;
    println!("MBps {:.2}", timing.mbps);
    println!("total MB {:.2}", timing.megabytes);
    if let Some(dir) = &args.out {
        let path = dir.join("bench.json");
        std::fs::write(&path, serde_json::to_string_pretty(&timing)?).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(ConfigError("--threads must be positive".into()).into());
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the thread pool")?;
    }
    let file = cli.config.as_deref();
    match cli.command {
        Command::Synth(a) => synth(config::merge(&a, file, "synth")?),
        Command::Pretrain(a) => pretrain(config::merge(&a, file, "pretrain")?),
        Command::Train(a) => train(config::merge(&a, file, "train")?),
        Command::Detect(a) => detect(config::merge(&a, file, "detect")?),
        Command::Eval(a) => eval(config::merge(&a, file, "eval")?),
        Command::Bench(a) => bench(config::merge(&a, file, "bench")?),
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<ConfigError>().is_some() {
        return 2;
    }
    match err.downcast_ref::<Error>() {
        Some(Error::Config(_)) => 2,
        Some(Error::Checkpoint(_)) => 4,
        Some(_) => 3,
        None => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    info!("wfd {}", env!("CARGO_PKG_VERSION"));
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
