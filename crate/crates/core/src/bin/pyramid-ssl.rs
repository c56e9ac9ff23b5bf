use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use pyramid_ssl::checkpoint::Checkpoint;
use pyramid_ssl::config::RunConfig;
use pyramid_ssl::curves::{loss_series, parse_losses_csv, render_svg};
use pyramid_ssl::data::{list_ids, load_dir, load_subset, make_splits, write_synth, Sample, SplitPlan, SynthConfig, SynthKind};
use pyramid_ssl::trainer::{evaluate, finetune, DumpOptions, FinetuneModel, Pretrainer, Task};
use pyramid_ssl::Error;

#[derive(Parser)]
#[command(name = "pyramid-ssl", version, about = "Feature-pyramid self-supervised pre-training for medical images")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset in the raw container format.
    Synth {
        #[arg(long, value_parser = parse_kind)]
        kind: SynthKind,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Partition a dataset into train/val/test and pretrain/finetune ids.
    Split {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ratio: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output JSON file.
        #[arg(long)]
        out: PathBuf,
    },
    /// Self-supervised pre-training.
    Pretrain {
        #[command(flatten)]
        run: RunArgs,
        /// Continue from a pre-training checkpoint (its stored config wins).
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Validate the configuration and inputs, then exit.
        #[arg(long)]
        dry_run: bool,
        /// Append every step's crop boxes to crops.jsonl.
        #[arg(long)]
        dump_crops: bool,
        /// Append every step's augmentation parameters to augment_params.jsonl.
        #[arg(long)]
        dump_augment_params: bool,
    },
    /// Fine-tune on labelled data from a checkpoint or from scratch.
    Finetune {
        #[arg(long, value_enum)]
        task: TaskArg,
        #[arg(long, conflicts_with = "scratch", required_unless_present = "scratch")]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        scratch: bool,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Recompute metrics of a fine-tuned model.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        split: Option<PathBuf>,
        /// Which split list to evaluate on.
        #[arg(long, value_enum, default_value_t = Subset::Test)]
        subset: Subset,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render losses.csv as an SVG chart.
    Curves {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct RunArgs {
    /// JSON configuration document.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Base configuration the document and overrides apply to.
    #[arg(long, default_value = "default")]
    preset: String,
    #[arg(long)]
    data: PathBuf,
    /// Split plan JSON; without it every sample in --data is used.
    #[arg(long)]
    split: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Dotted config override, e.g. `--set trainer.epochs=5`.
    #[arg(long = "set", value_parser = parse_kv)]
    overrides: Vec<(String, String)>,
}

#[derive(Clone, Copy, ValueEnum)]
enum TaskArg {
    Classify,
    Segment,
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum Subset {
    Train,
    Val,
    Test,
    Pretrain,
    Finetune,
    All,
}

fn parse_kind(s: &str) -> Result<SynthKind, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_kv(s: &str) -> Result<(String, String), String> {
    s.split_once('=').map(|(k, v)| (k.to_string(), v.to_string())).ok_or_else(|| format!("expected key=value, got {s:?}"))
}

/// Failure with its exit code.
struct Fail {
    code: u8,
    msg: String,
}

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        let code = if matches!(e, Error::Config(_)) { 2 } else { 1 };
        Fail { code, msg: e.to_string() }
    }
}

fn usage(msg: impl Into<String>) -> Fail {
    Fail { code: 2, msg: msg.into() }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.msg);
            ExitCode::from(f.code)
        }
    }
}

fn run(cmd: Command) -> Result<(), Fail> {
    match cmd {
        Command::Synth { kind, n, seed, out } => {
            let m = write_synth(&out, kind, n, seed, &SynthConfig::default())?;
            log::info!("wrote {} samples to {}", m.ids.len(), out.display());
        }
        Command::Split { data, ratio, seed, out } => {
            require_dir(&data)?;
            let plan = make_splits(&list_ids(&data)?, ratio, seed)?;
            write_json(&out, &serde_json::to_value(&plan).map_err(Error::from)?)?;
            log::info!("train {} / val {} / test {}; finetune {}", plan.train_ids.len(), plan.val_ids.len(), plan.test_ids.len(), plan.finetune_ids.len());
        }
        Command::Pretrain { run, resume, dry_run, dump_crops, dump_augment_params } => {
            require_dir(&run.data)?;
            let mut trainer = match &resume {
                Some(path) => {
                    let ckpt = Checkpoint::load(path)?;
                    let cfg: RunConfig = serde_json::from_value(ckpt.config.clone()).map_err(|e| Error::Format(format!("checkpoint config: {e}")))?;
                    let samples = load_samples(&run, Subset::Pretrain)?;
                    if dry_run {
                        cfg.validate()?;
                        return Ok(());
                    }
                    Pretrainer::resume(&ckpt, &samples)?
                }
                None => {
                    let cfg = resolve_config(&run)?;
                    if dry_run {
                        let ids = selected_ids(&run.data, run.split.as_deref(), Subset::Pretrain)?;
                        println!("{}", serde_json::to_string_pretty(&cfg).map_err(Error::from)?);
                        log::info!("config valid; {} pre-training samples", ids.len());
                        return Ok(());
                    }
                    let samples = load_samples(&run, Subset::Pretrain)?;
                    Pretrainer::new(cfg, &samples)?
                }
            };
            trainer.dump = DumpOptions { crops: dump_crops, augment_params: dump_augment_params };
            trainer.cfg.persist(&run.out)?;
            let report = trainer.run(Some(&run.out))?;
            let summary = json!({
                "steps": trainer.step,
                "epochs": report.epochs,
                "wall_clock_secs": report.wall_clock_secs,
                "checkpoint": report.checkpoint_path,
            });
            write_json(&run.out.join("pretrain_report.json"), &summary)?;
        }
        Command::Finetune { task, checkpoint, scratch, run } => {
            require_dir(&run.data)?;
            let cfg = resolve_config(&run)?;
            let ckpt = match (&checkpoint, scratch) {
                (Some(p), false) => Some(Checkpoint::load(p)?),
                (None, true) => None,
                _ => return Err(usage("pass exactly one of --checkpoint and --scratch")),
            };
            let task = match task {
                TaskArg::Classify => Task::Classify,
                TaskArg::Segment => Task::Segment,
            };
            let samples = load_samples(&run, Subset::Finetune)?;
            cfg.persist(&run.out)?;
            let (model, report) = finetune(&cfg, task, ckpt.as_ref(), &samples)?;
            model.to_checkpoint(report.losses.len()).save(&run.out.join("model.ckpt"))?;
            let metrics = json!({
                "split": "finetune",
                "pretrained": ckpt.is_some(),
                "metrics": report.train_metrics,
                "final_loss": report.losses.last(),
                "steps": report.losses.len(),
                "wall_clock_secs": report.wall_clock_secs,
            });
            write_json(&run.out.join("metrics.json"), &metrics)?;
        }
        Command::Eval { model, data, split, subset, out } => {
            require_dir(&data)?;
            let fm = FinetuneModel::from_checkpoint(&Checkpoint::load(&model)?)?;
            let ids = selected_ids(&data, split.as_deref(), subset)?;
            let samples = load_subset(&data, &ids)?;
            let metrics = evaluate(&fm, &samples)?;
            let name = subset.to_possible_value().map(|v| v.get_name().to_string());
            write_json(&out.join("metrics.json"), &json!({"split": name, "metrics": metrics}))?;
            println!("{metrics}");
        }
        Command::Curves { input, out } => {
            let text = std::fs::read_to_string(&input).map_err(Error::from)?;
            let rows = parse_losses_csv(&text)?;
            if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir).map_err(Error::from)?;
            }
            std::fs::write(&out, render_svg(&loss_series(&rows))).map_err(Error::from)?;
        }
    }
    Ok(())
}

fn require_dir(p: &Path) -> Result<(), Fail> {
    if p.is_dir() {
        Ok(())
    } else {
        Err(usage(format!("data directory {} does not exist", p.display())))
    }
}

fn resolve_config(run: &RunArgs) -> Result<RunConfig, Fail> {
    let base = RunConfig::preset(&run.preset)?;
    let mut overrides = Vec::new();
    if let Some(seed) = run.seed {
        overrides.push(("seed".to_string(), seed.to_string()));
    }
    if let Ok(w) = std::env::var("PCRL_NUM_WORKERS") {
        let w: usize = w.trim().parse().map_err(|_| usage(format!("PCRL_NUM_WORKERS={w:?} is not a count")))?;
        overrides.push(("trainer.num_workers".to_string(), w.to_string()));
    }
    overrides.extend(run.overrides.iter().cloned());
    let cfg = match &run.config {
        Some(path) if !path.is_file() => return Err(usage(format!("config file {} does not exist", path.display()))),
        Some(path) => RunConfig::load(path, &base, &overrides)?,
        None => RunConfig::resolve(&base, None, &overrides)?,
    };
    Ok(cfg)
}

fn selected_ids(data: &Path, split: Option<&Path>, subset: Subset) -> Result<Vec<String>, Fail> {
    let Some(path) = split else {
        return Ok(list_ids(data)?);
    };
    if !path.is_file() {
        return Err(usage(format!("split file {} does not exist", path.display())));
    }
    let text = std::fs::read_to_string(path).map_err(Error::from)?;
    let plan: SplitPlan = serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    Ok(match subset {
        Subset::Train => plan.train_ids,
        Subset::Val => plan.val_ids,
        Subset::Test => plan.test_ids,
        Subset::Pretrain => plan.pretrain_ids,
        Subset::Finetune => plan.finetune_ids,
        Subset::All => [plan.train_ids, plan.val_ids, plan.test_ids].concat(),
    })
}

fn load_samples(run: &RunArgs, subset: Subset) -> Result<Vec<Sample>, Fail> {
    match &run.split {
        Some(_) => Ok(load_subset(&run.data, &selected_ids(&run.data, run.split.as_deref(), subset)?)?),
        None => Ok(load_dir(&run.data)?),
    }
}

fn write_json(path: &Path, v: &serde_json::Value) -> Result<(), Fail> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(Error::from)?;
    }
    std::fs::write(path, serde_json::to_vec_pretty(v).map_err(Error::from)?).map_err(Error::from)?;
    Ok(())
}
