//! Command-line surface over the binlite pipeline.
//!
//! [`run`] parses arguments, dispatches one verb and returns the process exit
//! code: 0 success, 1 usage error, 2 data error, 3 numeric error.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use binlite::data::{load_image, preprocess, scan_directory};
use binlite::layers::ParamData;
use binlite::model::{load, save, write_model};
use binlite::quant::{bench, quantize, InferenceEngine};
use binlite::train::{evaluate, fit, EpochRecord, Monitor, StopReason};
use binlite::{
    Arch, ArchPreset, AugmentConfig, Dataset, DatasetManifest, Error, ModelGraph, ParamFilter,
    QuantMode, Split, SplitRatios, Tensor, TrainConfig, TrainReport,
};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "binlite", version, about = "Train, quantize and run small image classifiers on the CPU")]
struct Cli {
    /// Emit machine-readable JSON on standard output.
    #[arg(long, global = true)]
    json: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Scan a class-per-folder directory, split it and train a model.
    Train(TrainArgs),
    /// Loss, accuracy and confusion matrix of a model on one split.
    Eval(EvalArgs),
    /// Rank the classes of a single image.
    Classify(ClassifyArgs),
    /// Convert model weights to f16 or i8.
    Quantize(QuantizeArgs),
    /// Time single-image inference per thread count.
    Bench(BenchArgs),
    /// Describe a model file.
    Inspect(InspectArgs),
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    /// scratch, vgg16, mobilenet or transfer.
    #[arg(long, default_value = "scratch")]
    arch: String,
    /// AUTO takes class names from the folder names; otherwise a
    /// comma-separated list that must match them.
    #[arg(long, default_value = "AUTO")]
    classes: String,
    #[arg(long, default_value_t = 50)]
    epochs: usize,
    #[arg(long, default_value_t = 0.001)]
    lr: f32,
    #[arg(long, default_value_t = 0.9)]
    momentum: f32,
    #[arg(long, default_value_t = 3)]
    patience: usize,
    #[arg(long, default_value_t = 32)]
    batch: usize,
    #[arg(long, default_value_t = 1.0)]
    width: f64,
    /// Defaults to $BINLITE_SEED, then 0.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = binlite::model::DEFAULT_INPUT_SIZE)]
    input_size: usize,
    /// Model file whose body weights initialise the new model.
    #[arg(long)]
    backbone: Option<PathBuf>,
    /// Comma-separated learning rates; trains once per rate.
    #[arg(long)]
    lr_sweep: Option<String>,
    /// val_accuracy or val_loss.
    #[arg(long, default_value = "val_accuracy")]
    monitor: String,
    #[arg(long)]
    no_augment: bool,
    /// Decode images on every pass instead of caching them.
    #[arg(long)]
    stream: bool,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// val or test.
    #[arg(long, default_value = "test")]
    split: String,
    /// Split seed; defaults to the seed stored in the model.
    #[arg(long)]
    seed: Option<u64>,
    /// Manifest written by `train`; replaces scanning and splitting.
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long, default_value_t = 32)]
    batch: usize,
}

#[derive(Debug, Args)]
struct ClassifyArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    image: PathBuf,
    #[arg(long, default_value_t = 1)]
    threads: usize,
    #[arg(long, default_value_t = 5)]
    topk: usize,
}

#[derive(Debug, Args)]
struct QuantizeArgs {
    #[arg(long = "in")]
    input: PathBuf,
    /// f16 or i8.
    #[arg(long)]
    mode: String,
    #[arg(long)]
    out: PathBuf,
    /// Directory of class folders; reports top-1 agreement with the original.
    #[arg(long)]
    verify: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct BenchArgs {
    #[arg(long)]
    model: PathBuf,
    /// Comma-separated, strictly increasing.
    #[arg(long, default_value = "1,2,4")]
    threads: String,
    #[arg(long, default_value_t = 20)]
    iters: usize,
    #[arg(long, default_value_t = 2)]
    warmup: usize,
}

#[derive(Debug, Args)]
struct InspectArgs {
    #[arg(long)]
    model: PathBuf,
}

/// A failed command with its exit code.
#[derive(Debug)]
struct Failure {
    code: i32,
    message: String,
}

impl Failure {
    fn usage(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_USAGE,
            message: message.into(),
        }
    }

    fn data(e: impl std::fmt::Display) -> Self {
        Self {
            code: EXIT_DATA,
            message: e.to_string(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Ingestion { .. }
            | Error::Decode { .. }
            | Error::Io { .. }
            | Error::Format(_)
            | Error::Json(_)
            | Error::Label { .. } => EXIT_DATA,
            Error::Numeric { .. } => EXIT_NUMERIC,
            Error::Shape(_) | Error::Config(_) | Error::State(_) | Error::Precision(_) => EXIT_USAGE,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::data(e)
    }
}

type CmdResult = Result<(), Failure>;

/// Runs one invocation. `args` includes the program name.
pub fn run<I, A>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = A>,
    A: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let text = e.render().to_string();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = write!(out, "{text}");
                    EXIT_OK
                }
                _ => {
                    let _ = write!(err, "{text}");
                    EXIT_USAGE
                }
            };
        }
    };
    let json = cli.json;
    let result = match cli.command {
        Command::Train(a) => cmd_train(a, json, out, err),
        Command::Eval(a) => cmd_eval(a, json, out),
        Command::Classify(a) => cmd_classify(a, json, out),
        Command::Quantize(a) => cmd_quantize(a, json, out),
        Command::Bench(a) => cmd_bench(a, json, out),
        Command::Inspect(a) => cmd_inspect(a, json, out),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(f) => {
            let _ = writeln!(err, "error: {}", f.message);
            f.code
        }
    }
}

fn resolve_seed(flag: Option<u64>) -> Result<u64, Failure> {
    if let Some(seed) = flag {
        return Ok(seed);
    }
    match std::env::var(binlite::SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| Failure::usage(format!("{} must be an unsigned integer, got {v:?}", binlite::SEED_ENV))),
        Err(_) => Ok(0),
    }
}

fn parse_list<T: std::str::FromStr>(flag: &str, s: &str) -> Result<Vec<T>, Failure> {
    let items: Result<Vec<T>, _> = s.split(',').map(|p| p.trim().parse::<T>()).collect();
    match items {
        Ok(v) if !v.is_empty() => Ok(v),
        _ => Err(Failure::usage(format!("--{flag} expects a comma-separated list, got {s:?}"))),
    }
}

fn write_json(out: &mut dyn Write, value: &impl Serialize) -> CmdResult {
    let text = serde_json::to_string_pretty(value).map_err(|e| Failure::usage(e.to_string()))?;
    writeln!(out, "{text}")?;
    Ok(())
}

fn write_json_file(path: &Path, value: &impl Serialize) -> CmdResult {
    let text = serde_json::to_string_pretty(value).map_err(|e| Failure::usage(e.to_string()))?;
    std::fs::write(path, text + "\n").map_err(|e| Failure::data(format!("{}: {e}", path.display())))
}

/// `<out>` with `suffix` appended to the file name.
pub fn sidecar(out: &Path, suffix: &str) -> PathBuf {
    let mut name = out.file_name().map(OsString::from).unwrap_or_default();
    name.push(suffix);
    out.with_file_name(name)
}

fn load_model(path: &Path) -> Result<ModelGraph, Failure> {
    load(path).map_err(Failure::data)
}

fn file_size(path: &Path) -> Result<u64, Failure> {
    std::fs::metadata(path)
        .map(|m| m.len())
        .map_err(|e| Failure::data(format!("{}: {e}", path.display())))
}

#[derive(Debug, Serialize)]
struct SplitSizes {
    train: usize,
    val: usize,
    test: usize,
}

impl SplitSizes {
    fn of(m: &DatasetManifest) -> Self {
        Self {
            train: m.split_len(Split::Train),
            val: m.split_len(Split::Val),
            test: m.split_len(Split::Test),
        }
    }
}

#[derive(Debug, Serialize)]
struct SweepRow {
    lr: f32,
    epochs: usize,
    best_epoch: usize,
    best_metric: Option<f64>,
    final_val_loss: Option<f64>,
    final_val_acc: Option<f64>,
    /// Set when the run diverged.
    failure: Option<String>,
}

#[derive(Debug, Serialize)]
struct TrainOutput {
    model: PathBuf,
    manifest: PathBuf,
    input_size: usize,
    class_names: Vec<String>,
    split_sizes: SplitSizes,
    body_params: usize,
    #[serde(flatten)]
    report: TrainReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    lr_sweep: Option<Vec<SweepRow>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    best_lr: Option<f32>,
}

struct TrainSetup<'a> {
    preset: ArchPreset,
    class_names: Vec<String>,
    seed: u64,
    backbone: Option<ModelGraph>,
    data: &'a Dataset,
}

impl TrainSetup<'_> {
    fn run(
        &self,
        cfg: &TrainConfig,
        err: &mut dyn Write,
    ) -> Result<(ModelGraph, TrainReport), Error> {
        let mut graph = self.preset.build_with_classes(self.class_names.clone(), self.seed)?;
        if let Some(source) = &self.backbone {
            graph.transplant_body(source)?;
        }
        let report = fit(&mut graph, self.data, cfg, |r: &EpochRecord| {
            let _ = writeln!(err, "{r}");
        })?;
        Ok((graph, report))
    }
}

fn cmd_train(a: TrainArgs, json: bool, out: &mut dyn Write, err: &mut dyn Write) -> CmdResult {
    let seed = resolve_seed(a.seed)?;
    let arch: Arch = a.arch.parse()?;
    let monitor: Monitor = a.monitor.parse()?;
    let sweep = a.lr_sweep.as_deref().map(|s| parse_list::<f32>("lr-sweep", s)).transpose()?;

    let scanned = scan_directory(&a.data).map_err(Failure::data)?;
    if a.classes != "AUTO" {
        let wanted: Vec<String> = a.classes.split(',').map(|s| s.trim().to_string()).collect();
        if wanted != scanned.class_names {
            return Err(Failure::usage(format!(
                "--classes {:?} do not match the folders {:?}",
                wanted, scanned.class_names
            )));
        }
    }
    let manifest = scanned.split(SplitRatios::default(), seed)?;
    let manifest_path = sidecar(&a.out, ".manifest.jsonl");
    manifest.export(&manifest_path).map_err(Failure::data)?;

    let preset = ArchPreset::new(arch, a.width, manifest.num_classes()).with_input_size(a.input_size);
    preset.validate()?;
    let data = if a.stream {
        Dataset::streaming(manifest.clone(), a.input_size)
    } else {
        Dataset::cached(manifest.clone(), a.input_size)
    }
    .map_err(Failure::data)?;
    let backbone = a.backbone.as_deref().map(load_model).transpose()?;
    let setup = TrainSetup {
        preset,
        class_names: manifest.class_names.clone(),
        seed,
        backbone,
        data: &data,
    };
    let base = TrainConfig {
        lr: a.lr,
        momentum: a.momentum,
        batch_size: a.batch,
        max_epochs: a.epochs,
        patience: a.patience,
        seed,
        monitor,
        augment: if a.no_augment {
            AugmentConfig::disabled()
        } else {
            AugmentConfig::default()
        },
        checkpoint: None,
    };
    base.validate()?;
    let report_path = sidecar(&a.out, ".report.json");

    let (graph, report, rows, best_lr) = match sweep {
        None => {
            let cfg = TrainConfig {
                checkpoint: Some(a.out.clone()),
                ..base
            };
            match setup.run(&cfg, err) {
                Ok((g, r)) => (g, r, None, None),
                Err(Error::Numeric { detail, partial }) => {
                    if let Some(partial) = partial {
                        write_json_file(&report_path, &partial)?;
                    }
                    return Err(Failure {
                        code: EXIT_NUMERIC,
                        message: format!("numeric failure: {detail}"),
                    });
                }
                Err(e) => return Err(e.into()),
            }
        }
        Some(lrs) => {
            let mut rows = Vec::with_capacity(lrs.len());
            let mut best: Option<(f64, f32, ModelGraph, TrainReport)> = None;
            for lr in lrs {
                let cfg = TrainConfig { lr, ..base.clone() };
                writeln!(err, "learning rate {lr}")?;
                match setup.run(&cfg, err) {
                    Ok((g, r)) => {
                        let last = r.records.last();
                        rows.push(SweepRow {
                            lr,
                            epochs: r.records.len(),
                            best_epoch: r.best_epoch,
                            best_metric: r.best_metric,
                            final_val_loss: last.map(|x| x.val_loss),
                            final_val_acc: last.map(|x| x.val_acc),
                            failure: None,
                        });
                        let score = match (monitor, r.best_metric) {
                            (_, None) => f64::NEG_INFINITY,
                            (Monitor::ValAccuracy, Some(m)) => m,
                            (Monitor::ValLoss, Some(m)) => -m,
                        };
                        if best.as_ref().is_none_or(|b| score > b.0) {
                            best = Some((score, lr, g, r));
                        }
                    }
                    Err(Error::Numeric { detail, partial }) => rows.push(SweepRow {
                        lr,
                        epochs: partial.as_ref().map_or(0, |p| p.records.len()),
                        best_epoch: 0,
                        best_metric: None,
                        final_val_loss: None,
                        final_val_acc: None,
                        failure: Some(detail),
                    }),
                    Err(e) => return Err(e.into()),
                }
            }
            let Some((_, lr, g, r)) = best else {
                return Err(Failure {
                    code: EXIT_NUMERIC,
                    message: "every learning rate in the sweep diverged".into(),
                });
            };
            (g, r, Some(rows), Some(lr))
        }
    };
    save(&graph, &a.out).map_err(Failure::data)?;

    let output = TrainOutput {
        model: a.out.clone(),
        manifest: manifest_path,
        input_size: a.input_size,
        class_names: manifest.class_names.clone(),
        split_sizes: SplitSizes::of(&manifest),
        body_params: graph.body_param_count(),
        report,
        lr_sweep: rows,
        best_lr,
    };
    write_json_file(&report_path, &output)?;
    if json {
        return write_json(out, &output);
    }
    let r = &output.report;
    writeln!(out, "arch             {}", r.arch)?;
    writeln!(
        out,
        "split            train {}  val {}  test {}",
        output.split_sizes.train, output.split_sizes.val, output.split_sizes.test
    )?;
    writeln!(out, "trainable params {}", r.trainable_params)?;
    writeln!(out, "frozen params    {}", r.frozen_params)?;
    if let Some(rows) = &output.lr_sweep {
        writeln!(out, "{:>10}  {:>6}  {:>10}  {:>12}  {:>14}  {:>13}", "lr", "epochs", "best_epoch", "best_metric", "final_val_loss", "final_val_acc")?;
        for row in rows {
            match &row.failure {
                Some(f) => writeln!(out, "{:>10}  {:>6}  diverged: {f}", row.lr, row.epochs)?,
                None => writeln!(
                    out,
                    "{:>10}  {:>6}  {:>10}  {:>12.4}  {:>14.4}  {:>13.4}",
                    row.lr,
                    row.epochs,
                    row.best_epoch,
                    row.best_metric.unwrap_or(f64::NAN),
                    row.final_val_loss.unwrap_or(f64::NAN),
                    row.final_val_acc.unwrap_or(f64::NAN)
                )?,
            }
        }
        if let Some(lr) = output.best_lr {
            writeln!(out, "best lr          {lr}")?;
        }
    }
    let stop = match r.stop_reason {
        Some(StopReason::EarlyStopped) => "early stopping",
        _ => "max epochs",
    };
    writeln!(out, "stopped          {stop} after {} epochs", r.records.len())?;
    writeln!(
        out,
        "best epoch       {} ({} {:.4})",
        r.best_epoch,
        a.monitor,
        r.best_metric.unwrap_or(f64::NAN)
    )?;
    writeln!(out, "model            {}", a.out.display())?;
    writeln!(out, "report           {}", report_path.display())?;
    Ok(())
}

#[derive(Debug, Serialize)]
struct EvalOutput {
    split: String,
    count: usize,
    loss: f64,
    accuracy: f64,
    class_names: Vec<String>,
    confusion: Vec<Vec<usize>>,
}

fn cmd_eval(a: EvalArgs, json: bool, out: &mut dyn Write) -> CmdResult {
    let split: Split = match a.split.as_str() {
        "val" => Split::Val,
        "test" => Split::Test,
        other => return Err(Failure::usage(format!("--split must be val or test, got {other:?}"))),
    };
    let graph = load_model(&a.model)?;
    let manifest = match &a.manifest {
        Some(path) => {
            let mut m = DatasetManifest::import(path).map_err(Failure::data)?;
            m.root = a.data.clone();
            m
        }
        None => {
            let seed = match a.seed {
                Some(s) => s,
                None => graph.metadata.seed,
            };
            scan_directory(&a.data).map_err(Failure::data)?.split(SplitRatios::default(), seed)?
        }
    };
    let data = Dataset::streaming(manifest, graph.input_shape[0]).map_err(Failure::data)?;
    let e = evaluate(&graph, &data, split, a.batch)?;
    let output = EvalOutput {
        split: a.split,
        count: e.count,
        loss: e.loss,
        accuracy: e.accuracy,
        class_names: graph.class_names.clone(),
        confusion: e.confusion,
    };
    if json {
        return write_json(out, &output);
    }
    writeln!(out, "split     {} ({} images)", output.split, output.count)?;
    writeln!(out, "loss      {:.4}", output.loss)?;
    writeln!(out, "accuracy  {:.4}", output.accuracy)?;
    let width = output.class_names.iter().map(String::len).max().unwrap_or(0).max(5);
    write!(out, "{:<width$}", "truth")?;
    for i in 0..output.class_names.len() {
        write!(out, " {i:>6}")?;
    }
    writeln!(out)?;
    for (i, row) in output.confusion.iter().enumerate() {
        write!(out, "{:<width$}", format!("{i}:{}", output.class_names[i]).chars().take(width).collect::<String>())?;
        for v in row {
            write!(out, " {v:>6}")?;
        }
        writeln!(out)?;
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct Prediction {
    class: String,
    probability: f32,
}

#[derive(Debug, Serialize)]
struct ClassifyOutput {
    image: PathBuf,
    predictions: Vec<Prediction>,
    latency_ms: f64,
    threads: usize,
}

fn cmd_classify(a: ClassifyArgs, json: bool, out: &mut dyn Write) -> CmdResult {
    if a.topk == 0 {
        return Err(Failure::usage("--topk must be at least 1"));
    }
    let engine = InferenceEngine::new(a.threads)?;
    let graph = load_model(&a.model)?;
    let img = load_image(&a.image).map_err(Failure::data)?;
    let [h, w, c] = graph.input_shape;
    let x = preprocess(&img, h)?.reshape(&[1, h, w, c])?;
    let (probs, latency_ms) = engine.infer(&graph, &x)?;
    let mut ranked: Vec<(usize, f32)> = probs.data().iter().copied().enumerate().collect();
    ranked.sort_by(|x, y| y.1.total_cmp(&x.1).then(x.0.cmp(&y.0)));
    ranked.truncate(a.topk);
    let output = ClassifyOutput {
        image: a.image,
        predictions: ranked
            .into_iter()
            .map(|(i, p)| Prediction {
                class: graph.class_names[i].clone(),
                probability: p,
            })
            .collect(),
        latency_ms,
        threads: a.threads,
    };
    if json {
        return write_json(out, &output);
    }
    let width = output.predictions.iter().map(|p| p.class.len()).max().unwrap_or(0);
    for p in &output.predictions {
        writeln!(out, "{:<width$}  {:.6}", p.class, p.probability)?;
    }
    writeln!(out, "latency_ms {:.3}", output.latency_ms)?;
    Ok(())
}

#[derive(Debug, Serialize)]
struct QuantizeOutput {
    mode: QuantMode,
    input: PathBuf,
    output: PathBuf,
    input_bytes: u64,
    output_bytes: u64,
    size_ratio: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    verify_images: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    top1_agreement: Option<f64>,
}

/// Fraction of images under `dir` on which both models pick the same class.
fn top1_agreement(reference: &ModelGraph, other: &ModelGraph, dir: &Path) -> Result<(usize, f64), Failure> {
    let manifest = scan_directory(dir).map_err(Failure::data)?;
    let [h, w, c] = reference.input_shape;
    let mut agree = 0usize;
    for chunk in manifest.entries.chunks(32) {
        let images = chunk
            .iter()
            .map(|e| {
                let img = load_image(manifest.full_path(e)).map_err(Failure::data)?;
                Ok(preprocess(&img, h)?)
            })
            .collect::<Result<Vec<Tensor>, Failure>>()?;
        let batch = Tensor::stack(&images)?.reshape(&[images.len(), h, w, c])?;
        let a = reference.predict(&batch)?.argmax_rows()?;
        let b = other.predict(&batch)?.argmax_rows()?;
        agree += a.iter().zip(&b).filter(|(x, y)| x == y).count();
    }
    let n = manifest.entries.len();
    Ok((n, agree as f64 / n as f64))
}

fn cmd_quantize(a: QuantizeArgs, json: bool, out: &mut dyn Write) -> CmdResult {
    let mode: QuantMode = a.mode.parse()?;
    let graph = load_model(&a.input)?;
    let q = quantize(&graph, mode)?;
    save(&q, &a.out).map_err(Failure::data)?;
    let input_bytes = file_size(&a.input)?;
    let output_bytes = file_size(&a.out)?;
    let verify = a
        .verify
        .as_deref()
        .map(|dir| top1_agreement(&graph, &q, dir))
        .transpose()?;
    let output = QuantizeOutput {
        mode,
        input: a.input,
        output: a.out,
        input_bytes,
        output_bytes,
        size_ratio: output_bytes as f64 / input_bytes as f64,
        verify_images: verify.map(|v| v.0),
        top1_agreement: verify.map(|v| v.1),
    };
    if json {
        return write_json(out, &output);
    }
    writeln!(out, "mode           {}", output.mode)?;
    writeln!(out, "input          {} ({} bytes)", output.input.display(), output.input_bytes)?;
    writeln!(out, "output         {} ({} bytes)", output.output.display(), output.output_bytes)?;
    writeln!(out, "size ratio     {:.4}", output.size_ratio)?;
    if let (Some(n), Some(rate)) = (output.verify_images, output.top1_agreement) {
        writeln!(out, "top-1 agreement {rate:.4} over {n} images")?;
    }
    Ok(())
}

fn cmd_bench(a: BenchArgs, json: bool, out: &mut dyn Write) -> CmdResult {
    let threads = parse_list::<usize>("threads", &a.threads)?;
    if threads.contains(&0) || threads.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Failure::usage(format!(
            "--threads must be positive and strictly increasing, got {:?}",
            a.threads
        )));
    }
    let graph = load_model(&a.model)?;
    let report = bench(&graph, &threads, a.iters, a.warmup)?;
    if json {
        return write_json(out, &report);
    }
    write!(out, "{report}")?;
    Ok(())
}

struct CountingWriter(u64);

impl Write for CountingWriter {
    fn write(&mut self, buf: &[u8]) -> std::io::Result<usize> {
        self.0 += buf.len() as u64;
        Ok(buf.len())
    }

    fn flush(&mut self) -> std::io::Result<()> {
        Ok(())
    }
}

/// Serialized size of `graph` with every quantized parameter stored as f32.
fn f32_equivalent_bytes(graph: &ModelGraph, file_bytes: u64) -> Result<u64, Failure> {
    let quantized = graph
        .layers
        .iter()
        .flat_map(|l| &l.state.params)
        .any(|p| matches!(p.data, ParamData::Quantized(_)));
    if !quantized {
        return Ok(file_bytes);
    }
    let mut g = graph.clone();
    for layer in &mut g.layers {
        for p in &mut layer.state.params {
            if let ParamData::Quantized(q) = &p.data {
                p.data = ParamData::Dense(q.dequantize());
            }
        }
    }
    let mut w = CountingWriter(0);
    write_model(&g, &mut w)?;
    Ok(w.0)
}

#[derive(Debug, Serialize)]
struct LayerRow {
    index: usize,
    kind: String,
    output_shape: Vec<usize>,
    params: usize,
    trainable: bool,
    dtype: String,
}

#[derive(Debug, Serialize)]
struct InspectOutput {
    arch: String,
    width_multiplier: f64,
    seed: u64,
    input_shape: [usize; 3],
    class_names: Vec<String>,
    layers: Vec<LayerRow>,
    total_params: usize,
    trainable_params: usize,
    frozen_params: usize,
    body_params: usize,
    dtype: String,
    file_bytes: u64,
    f32_bytes: u64,
    size_ratio: f64,
}

fn cmd_inspect(a: InspectArgs, json: bool, out: &mut dyn Write) -> CmdResult {
    let graph = load_model(&a.model)?;
    let file_bytes = file_size(&a.model)?;
    let f32_bytes = f32_equivalent_bytes(&graph, file_bytes)?;
    let shapes = graph.shapes()?;
    let layers = graph
        .layers
        .iter()
        .enumerate()
        .map(|(i, l)| LayerRow {
            index: i,
            kind: l.kind().name().to_string(),
            output_shape: shapes[i + 1].clone(),
            params: l.param_count(),
            trainable: l.trainable(),
            dtype: l
                .state
                .params
                .iter()
                .find(|p| p.name == "weight")
                .map(|p| match &p.data {
                    ParamData::Dense(_) => "f32".to_string(),
                    ParamData::Quantized(q) => q.dtype().to_string(),
                })
                .unwrap_or_else(|| "-".into()),
        })
        .collect();
    let output = InspectOutput {
        arch: graph.metadata.arch.clone(),
        width_multiplier: graph.metadata.width_multiplier,
        seed: graph.metadata.seed,
        input_shape: graph.input_shape,
        class_names: graph.class_names.clone(),
        layers,
        total_params: graph.param_count(ParamFilter::All),
        trainable_params: graph.param_count(ParamFilter::Trainable),
        frozen_params: graph.param_count(ParamFilter::Frozen),
        body_params: graph.body_param_count(),
        dtype: graph.weight_dtype().to_string(),
        file_bytes,
        f32_bytes,
        size_ratio: file_bytes as f64 / f32_bytes as f64,
    };
    if json {
        return write_json(out, &output);
    }
    let [h, w, c] = output.input_shape;
    writeln!(out, "arch             {} (width {})", output.arch, output.width_multiplier)?;
    writeln!(out, "input            {h}x{w}x{c}")?;
    writeln!(out, "classes          {}", output.class_names.join(", "))?;
    writeln!(out, "index  {:<16} {:<18} {:>12}  {:<9} dtype", "kind", "output", "params", "trainable")?;
    for r in &output.layers {
        writeln!(
            out,
            "{:>5}  {:<16} {:<18} {:>12}  {:<9} {}",
            r.index,
            r.kind,
            format!("{:?}", r.output_shape),
            r.params,
            if r.trainable { "yes" } else { "no" },
            r.dtype
        )?;
    }
    writeln!(out, "total params     {}", output.total_params)?;
    writeln!(out, "trainable params {}", output.trainable_params)?;
    writeln!(out, "frozen params    {}", output.frozen_params)?;
    writeln!(out, "body params      {}", output.body_params)?;
    writeln!(out, "weight dtype     {}", output.dtype)?;
    writeln!(out, "file size        {} bytes", output.file_bytes)?;
    writeln!(out, "size vs f32      {:.4}", output.size_ratio)?;
    Ok(())
}
