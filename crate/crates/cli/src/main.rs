use std::fs;
use std::io::ErrorKind;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use distillnet::data::{parse_cifar, parse_class_list, parse_idx_images, ClassSubset, Dataset, LabeledSample};
use distillnet::distill::{load_plan, save_plan, DistillConfig, Distiller, RemovalPlan, CALIBRATION_STRIDE};
use distillnet::exec::{benchmark, forward_distilled, plan_cost, CompressionReport};
use distillnet::model::{load_model, save_model, Architecture, Model};
use distillnet::sparsity::{histogram, measure_sparsity, search_thresholds};
use distillnet::tensor::Tensor3;
use distillnet::train::{evaluate_accuracy, train, TrainConfig};
use distillnet::{Error, FormatError};

/// Exit codes, one per error class.
mod code {
    pub const OTHER: u8 = 1;
    pub const USAGE: u8 = 2;
    pub const MISSING_FILE: u8 = 3;
    pub const INVALID_ARGUMENT: u8 = 4;
    pub const BAD_FILE: u8 = 5;
    pub const PLAN_MISMATCH: u8 = 6;
    pub const DIVERGED: u8 = 7;
}

#[derive(Parser, Debug)]
#[command(
    name = "distillnet",
    version,
    about = "Train, analyze and distill small CNNs for class subsets"
)]
struct Cli {
    #[arg(long, value_enum, global = true, default_value_t = DatasetId::Mnist)]
    dataset: DatasetId,
    /// Directory with the dataset files [default: data/<dataset>]
    #[arg(long, global = true, env = "DISTILLNET_DATA_DIR")]
    data_dir: Option<PathBuf>,
    /// Seed for weight initialization and shuffling.
    #[arg(long, global = true, default_value_t = 1)]
    seed: u64,
    /// Worker threads for per-class heatmaps.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum DatasetId {
    Mnist,
    Cifar10,
}

impl DatasetId {
    fn arch(self) -> Architecture {
        match self {
            DatasetId::Mnist => Architecture::Mnist,
            DatasetId::Cifar10 => Architecture::Cifar10,
        }
    }

    fn dir_name(self) -> &'static str {
        match self {
            DatasetId::Mnist => "mnist",
            DatasetId::Cifar10 => "cifar10",
        }
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a randomly initialized reference model.
    Init {
        /// Output DNET file.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the reference model and report its test accuracy.
    Train {
        /// Output DNET file.
        #[arg(long)]
        out: PathBuf,
        /// Passes over the training data [default: 2].
        #[arg(long)]
        epochs: Option<usize>,
        /// Samples per SGD step [default: 32].
        #[arg(long)]
        batch_size: Option<usize>,
        /// Learning rate [default: 0.01].
        #[arg(long)]
        lr: Option<f32>,
        /// SGD momentum [default: 0.9].
        #[arg(long)]
        momentum: Option<f32>,
        /// Use only the first N training samples.
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Test accuracy, optionally restricted to classes or run through a plan.
    Eval {
        /// Trained DNET model.
        #[arg(long)]
        model: PathBuf,
        /// Comma-separated class ids; only their test samples are scored.
        #[arg(long)]
        classes: Option<String>,
        /// DBMP plan to run the model through.
        #[arg(long)]
        bitmap: Option<PathBuf>,
        /// Use only the first N test samples.
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Search cutoffs and report per-layer sparsity.
    Analyze {
        /// Trained DNET model.
        #[arg(long)]
        model: PathBuf,
        /// Comma-separated cutoffs, one per conv layer; searched when absent.
        #[arg(long)]
        thresholds: Option<String>,
        /// Allowed accuracy loss as a fraction.
        #[arg(long, default_value_t = 0.01)]
        budget: f64,
        /// Sparsity table as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
        /// Activation histogram as CSV.
        #[arg(long)]
        histogram: Option<PathBuf>,
        /// Histogram bins per layer.
        #[arg(long, default_value_t = 50)]
        bins: usize,
        #[command(flatten)]
        limit: TrainLimit,
    },
    /// Build a removal plan for a class subset and write it as DBMP.
    Distill {
        /// Trained DNET model.
        #[arg(long)]
        model: PathBuf,
        /// Comma-separated class ids the distilled model must still recognize.
        #[arg(long)]
        keep_classes: String,
        /// Allowed kept-class accuracy loss as a fraction.
        #[arg(long, default_value_t = 0.01)]
        budget: f64,
        /// Comma-separated cutoffs, one per conv layer; searched when absent.
        #[arg(long)]
        thresholds: Option<String>,
        /// Output DBMP file.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        limit: TrainLimit,
    },
    /// Classify images from an IDX image file (MNIST) or CIFAR record file.
    Run {
        /// Trained DNET model.
        #[arg(long)]
        model: PathBuf,
        /// IDX image file or CIFAR-10 record file.
        #[arg(long)]
        input: PathBuf,
        /// DBMP plan; dense inference when absent.
        #[arg(long)]
        bitmap: Option<PathBuf>,
    },
    /// Time dense against distilled inference on test images.
    Bench {
        /// Trained DNET model.
        #[arg(long)]
        model: PathBuf,
        /// DBMP plan.
        #[arg(long)]
        bitmap: PathBuf,
        /// Test images per repetition.
        #[arg(long, default_value_t = 200)]
        inputs: usize,
        /// Timed passes over the inputs, at least 3.
        #[arg(long, default_value_t = 10)]
        repetitions: usize,
    },
    /// Compression, cost and optionally accuracy and timing of a plan.
    Report {
        /// Trained DNET model.
        #[arg(long)]
        model: PathBuf,
        /// DBMP plan.
        #[arg(long)]
        bitmap: PathBuf,
        /// Human-readable report.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Key-value report.
        #[arg(long)]
        kv: Option<PathBuf>,
        /// Measure kept-class test accuracy.
        #[arg(long)]
        accuracy: bool,
        /// Benchmark with this many repetitions.
        #[arg(long)]
        bench: Option<usize>,
    },
}

#[derive(Args, Debug)]
struct TrainLimit {
    /// Use only the first N training samples.
    #[arg(long)]
    limit: Option<usize>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { code::USAGE } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if let Some(err) = cause.downcast_ref::<Error>() {
            return match err {
                Error::Io(io) if io.kind() == ErrorKind::NotFound => code::MISSING_FILE,
                Error::Io(_) => code::OTHER,
                Error::InvalidArgument(_) | Error::Empty(_) => code::INVALID_ARGUMENT,
                Error::Format(_) => code::BAD_FILE,
                Error::PlanMismatch(_) | Error::Shape { .. } => code::PLAN_MISMATCH,
                Error::Diverged { .. } => code::DIVERGED,
            };
        }
        if let Some(io) = cause.downcast_ref::<std::io::Error>() {
            return if io.kind() == ErrorKind::NotFound {
                code::MISSING_FILE
            } else {
                code::OTHER
            };
        }
    }
    code::OTHER
}

struct Ctx {
    arch: Architecture,
    data_dir: PathBuf,
    seed: u64,
    threads: usize,
}

impl Ctx {
    fn dataset(&self) -> anyhow::Result<Dataset> {
        log::info!("loading {:?} from {}", self.arch, self.data_dir.display());
        Ok(Dataset::load(self.arch, &self.data_dir)?)
    }

    fn model(&self, path: &Path) -> anyhow::Result<Model> {
        let model = load_model(path).with_context(|| format!("loading model {}", path.display()))?;
        if model.input_shape() != self.arch.input_shape() {
            return Err(Error::InvalidArgument(format!(
                "model input {} does not match the {:?} dataset",
                model.input_shape(),
                self.arch
            ))
            .into());
        }
        Ok(model)
    }

    fn plan(&self, path: &Path, model: &Model) -> anyhow::Result<RemovalPlan> {
        let plan = load_plan(path).with_context(|| format!("loading bitmap {}", path.display()))?;
        plan.check(model)?;
        Ok(plan)
    }
}

fn classes(list: &str, universe: usize) -> anyhow::Result<ClassSubset> {
    Ok(ClassSubset::new(parse_class_list(list)?, universe)?)
}

fn thresholds(list: &str) -> anyhow::Result<Vec<f32>> {
    list.split(',')
        .map(|t| {
            t.trim()
                .parse::<f32>()
                .map_err(|_| Error::InvalidArgument(format!("`{t}` is not a threshold")).into())
        })
        .collect()
}

fn truncate(mut ds: Dataset, limit: Option<usize>) -> Dataset {
    if let Some(n) = limit {
        ds.train.truncate(n);
    }
    ds
}

fn run(cli: Cli) -> anyhow::Result<()> {
    if cli.threads == 0 {
        bail!(Error::InvalidArgument("--threads must be at least 1".into()));
    }
    let ctx = Ctx {
        arch: cli.dataset.arch(),
        data_dir: cli
            .data_dir
            .clone()
            .unwrap_or_else(|| Path::new("data").join(cli.dataset.dir_name())),
        seed: cli.seed,
        threads: cli.threads,
    };
    log::info!(
        "seed={} threads={} dataset={:?} data_dir={}",
        ctx.seed,
        ctx.threads,
        ctx.arch,
        ctx.data_dir.display()
    );
    log::info!("command: {:?}", cli.command);
    match cli.command {
        Command::Init { out } => {
            save_model(&ctx.arch.build(ctx.seed), &out)?;
            println!("wrote {}", out.display());
        }
        Command::Train {
            out,
            epochs,
            batch_size,
            lr,
            momentum,
            limit,
        } => {
            let ds = truncate(ctx.dataset()?, limit);
            let mut cfg = TrainConfig::for_dataset(ctx.arch);
            cfg.seed = ctx.seed;
            cfg.epochs = epochs.unwrap_or(cfg.epochs);
            cfg.batch_size = batch_size.unwrap_or(cfg.batch_size);
            cfg.learning_rate = lr.unwrap_or(cfg.learning_rate);
            cfg.momentum = momentum.unwrap_or(cfg.momentum);
            log::info!("train config: {cfg:?}");
            // The calibration slice used by `distill` stays unseen.
            let (fit, held) = ds.holdout(CALIBRATION_STRIDE);
            println!(
                "training on {} samples, {} held out for calibration",
                fit.len(),
                held.len()
            );
            let outcome = train(&ctx.arch.build(ctx.seed), &fit, &cfg)?;
            for (i, loss) in outcome.epoch_losses.iter().enumerate() {
                println!("epoch {}: loss {loss:.5}", i + 1);
            }
            let acc = evaluate_accuracy(&outcome.model, &ds.test, None)?;
            println!("test accuracy: {:.2}%", 100.0 * acc);
            save_model(&outcome.model, &out)?;
            println!("wrote {}", out.display());
        }
        Command::Eval {
            model,
            classes: list,
            bitmap,
            limit,
        } => {
            let model = ctx.model(&model)?;
            let subset = list.as_deref().map(|l| classes(l, model.num_classes())).transpose()?;
            let plan = bitmap.as_deref().map(|p| ctx.plan(p, &model)).transpose()?;
            let mut ds = ctx.dataset()?;
            if let Some(n) = limit {
                ds.test.truncate(n);
            }
            let samples: Vec<&LabeledSample> = ds
                .test
                .iter()
                .filter(|s| subset.as_ref().is_none_or(|c| c.contains(s.label)))
                .collect();
            let acc = match &plan {
                None => evaluate_accuracy(&model, &samples, None)?,
                Some(p) => distilled_accuracy(&model, p, &samples)?,
            };
            let scope = subset.map_or_else(|| "all classes".to_string(), |c| format!("classes {c}"));
            println!(
                "accuracy on {} test samples ({scope}): {:.2}%",
                samples.len(),
                100.0 * acc
            );
        }
        Command::Analyze {
            model,
            thresholds: given,
            budget,
            csv,
            histogram: hist_path,
            bins,
            limit,
        } => {
            let model = ctx.model(&model)?;
            let ds = truncate(ctx.dataset()?, limit.limit);
            let (_, calib) = ds.holdout(CALIBRATION_STRIDE);
            let th = match given {
                Some(t) => thresholds(&t)?,
                None => {
                    let r = search_thresholds(&model, &calib, &calib, budget)?;
                    println!(
                        "searched cutoffs on {} calibration samples: accuracy {:.2}% -> {:.2}%",
                        calib.len(),
                        100.0 * r.baseline,
                        100.0 * r.accuracy
                    );
                    r.thresholds
                }
            };
            let profile = measure_sparsity(&model, &calib, &th)?;
            print!("{}", profile.to_csv());
            if let Some(p) = csv {
                fs::write(&p, profile.to_csv())?;
            }
            if let Some(p) = hist_path {
                fs::write(&p, histogram(&model, &calib, bins)?.to_csv())?;
            }
        }
        Command::Distill {
            model,
            keep_classes,
            budget,
            thresholds: given,
            out,
            limit,
        } => {
            let model = ctx.model(&model)?;
            let kept = classes(&keep_classes, model.num_classes())?;
            let cfg = DistillConfig {
                budget,
                thresholds: given.as_deref().map(thresholds).transpose()?,
                threads: ctx.threads,
            };
            let ds = truncate(ctx.dataset()?, limit.limit);
            let d = Distiller::prepare(&model, &ds, &kept, &cfg)?;
            let o = d.distill(&kept, budget)?;
            for w in &o.warnings {
                eprintln!("warning: {w}");
            }
            save_plan(&o.plan, &out)?;
            let cost = plan_cost(&model, &o.plan)?;
            println!(
                "kept classes {kept}, cutoffs {:?} × {:.4}",
                d.thresholds(),
                o.multiplier
            );
            println!(
                "calibration accuracy ({} samples): {:.2}% -> {:.2}%",
                o.calibration_samples,
                100.0 * o.baseline_accuracy,
                100.0 * o.accuracy
            );
            let test: Vec<&LabeledSample> = ds.test.iter().filter(|s| kept.contains(s.label)).collect();
            if !test.is_empty() {
                println!(
                    "test accuracy ({} samples): {:.2}% -> {:.2}%",
                    test.len(),
                    100.0 * evaluate_accuracy(&model, &test, None)?,
                    100.0 * distilled_accuracy(&model, &o.plan, &test)?
                );
            }
            println!(
                "skipped FLOPs: {:.2}% (ideal speedup {:.2}X)",
                100.0 * cost.skipped_fraction(),
                cost.ideal_speedup()
            );
            println!("wrote {}", out.display());
        }
        Command::Run { model, input, bitmap } => {
            let model = ctx.model(&model)?;
            let plan = match bitmap {
                Some(p) => ctx.plan(&p, &model)?,
                None => RemovalPlan::all_ones(&model, ClassSubset::all(model.num_classes())),
            };
            for (i, x) in read_inputs(ctx.arch, &input)?.iter().enumerate() {
                let out = forward_distilled(&model, &plan, x)?;
                let label = &model.class_labels()[out.predicted];
                let logits: Vec<String> = out.logits.iter().map(|v| format!("{v:.4}")).collect();
                println!(
                    "{i}: class {} ({label}) macs {} logits [{}]",
                    out.predicted,
                    out.macs,
                    logits.join(", ")
                );
            }
        }
        Command::Bench {
            model,
            bitmap,
            inputs,
            repetitions,
        } => {
            let model = ctx.model(&model)?;
            let plan = ctx.plan(&bitmap, &model)?;
            let images = test_images(&ctx, &plan, inputs)?;
            let r = benchmark(&model, &plan, &images, repetitions)?;
            println!("baseline:  {}", r.baseline);
            println!("distilled: {}", r.distilled);
            println!("speedup:   {:.2}X", r.speedup());
            println!("ideal:     {:.2}X", plan_cost(&model, &plan)?.ideal_speedup());
        }
        Command::Report {
            model,
            bitmap,
            out,
            kv,
            accuracy,
            bench,
        } => {
            let model = ctx.model(&model)?;
            let plan = ctx.plan(&bitmap, &model)?;
            let mut report = CompressionReport::new(plan.kept().clone(), plan_cost(&model, &plan)?);
            if accuracy || bench.is_some() {
                let ds = ctx.dataset()?;
                let kept: Vec<&LabeledSample> = ds.test.iter().filter(|s| plan.kept().contains(s.label)).collect();
                if accuracy {
                    report.accuracy = Some((
                        evaluate_accuracy(&model, &kept, None)?,
                        distilled_accuracy(&model, &plan, &kept)?,
                    ));
                }
                if let Some(reps) = bench {
                    let images: Vec<Tensor3> = kept.iter().take(200).map(|s| s.image.clone()).collect();
                    report.timing = Some(benchmark(&model, &plan, &images, reps)?);
                }
            }
            print!("{}", report.to_text());
            if let Some(p) = out {
                fs::write(&p, report.to_text())?;
            }
            if let Some(p) = kv {
                fs::write(&p, report.to_key_values())?;
            }
        }
    }
    Ok(())
}

fn distilled_accuracy(model: &Model, plan: &RemovalPlan, samples: &[&LabeledSample]) -> anyhow::Result<f64> {
    if samples.is_empty() {
        bail!(Error::Empty("no samples to evaluate".into()));
    }
    let mut correct = 0usize;
    for s in samples {
        if forward_distilled(model, plan, &s.image)?.predicted == s.label {
            correct += 1;
        }
    }
    Ok(correct as f64 / samples.len() as f64)
}

fn test_images(ctx: &Ctx, plan: &RemovalPlan, n: usize) -> anyhow::Result<Vec<Tensor3>> {
    let ds = ctx.dataset()?;
    Ok(ds
        .test
        .iter()
        .filter(|s| plan.kept().contains(s.label))
        .take(n)
        .map(|s| s.image.clone())
        .collect())
}

fn read_inputs(arch: Architecture, path: &Path) -> anyhow::Result<Vec<Tensor3>> {
    let bytes = fs::read(path)
        .map_err(Error::from)
        .with_context(|| format!("reading {}", path.display()))?;
    let images = match arch {
        Architecture::Mnist => parse_idx_images(&bytes)?,
        Architecture::Cifar10 => parse_cifar(&bytes)?.into_iter().map(|s| s.image).collect(),
    };
    if images.is_empty() {
        bail!(Error::Format(FormatError::Invalid(format!(
            "{} holds no images",
            path.display()
        ))));
    }
    Ok(images)
}
