use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use pdse::data::{generate_phantoms, read_phantom_job};
use pdse::eval::{write_detections_csv, EvalReport};
use pdse::tensor::OpKind;
use pdse::train::gradsuite::{run_suite, SuiteConfig};
use pdse::train::{detect_images, evaluate_checkpoint, run_ablation, train, write_report, DetectOptions, TrainConfig};
use pdse::{PdseError, Result};

#[derive(Parser)]
#[command(name = "pdse", version, about = "Phantom-scale CT lesion detector: data, training, evaluation")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write a synthetic phantom dataset
    GeneratePhantoms {
        /// TOML or JSON file: `output_dir` plus any phantom spec fields
        #[arg(long)]
        spec: PathBuf,
    },
    /// Train one model from a TOML config
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Score a checkpoint on a dataset split
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        /// Dataset root; defaults to the one recorded next to the checkpoint
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Directory for `eval_<split>.json` / `.txt` (default: checkpoint directory)
        #[arg(long)]
        output_dir: Option<PathBuf>,
    },
    /// Train the three architecture variants and tabulate their AP
    Ablation {
        #[arg(long)]
        config: PathBuf,
    },
    /// Run a checkpoint on image files
    Detect {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(required = true)]
        images: Vec<PathBuf>,
        #[arg(long)]
        overlay_dir: Option<PathBuf>,
        #[arg(long)]
        score_thresh: Option<f64>,
        /// CSV destination (default: stdout)
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Finite-difference check of every differentiable operation
    Gradcheck {
        #[arg(long, default_value_t = 100)]
        instances: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Only these ops (comma-separated)
        #[arg(long, value_delimiter = ',')]
        only: Vec<String>,
        /// Also write the report as JSON
        #[arg(long)]
        json: Option<PathBuf>,
        /// Negate one gradient rule (mutation testing)
        #[arg(long, hide = true)]
        inject_fault: Option<String>,
    },
}

enum Outcome {
    Ok,
    CheckFailed,
}

fn generate(job: &Path) -> Result<Outcome> {
    let (spec, out) = read_phantom_job(job)?;
    let m = generate_phantoms(&spec, &out)?;
    println!("wrote {} images to {} (content hash {})", m.count, out.display(), m.content_hash);
    Ok(Outcome::Ok)
}

fn dataset_for(checkpoint: &Path) -> Result<PathBuf> {
    let cfg = checkpoint.parent().unwrap_or(Path::new(".")).join("train_config.json");
    let text = fs::read_to_string(&cfg)
        .map_err(|_| PdseError::Config(format!("no --dataset given and {} is missing", cfg.display())))?;
    let c: TrainConfig = serde_json::from_str(&text)?;
    Ok(c.dataset)
}

fn print_report(r: &EvalReport) {
    print!("{}", r.to_table());
}

fn parse_fault(name: &str) -> Result<OpKind> {
    use OpKind::*;
    let all = [
        Add, Sub, Mul, Scale, Relu, Sigmoid, Sum, Mean, Reshape, MatMul, Linear, Conv2d, DeformConv2d, MaxPool2d,
        AvgPool2d, GlobalAvgPool, Upsample2x, Concat, BatchNorm, FocalLoss, SmoothL1,
    ];
    all.into_iter()
        .find(|k| format!("{k:?}").eq_ignore_ascii_case(&name.replace('_', "")))
        .ok_or_else(|| PdseError::Config(format!("unknown op kind {name:?}")))
}

fn run(cmd: Cmd) -> Result<Outcome> {
    match cmd {
        Cmd::GeneratePhantoms { spec } => generate(&spec),
        Cmd::Train { config } => {
            let cfg = TrainConfig::load(&config)?;
            let run = train(&cfg)?;
            match &run.test_report {
                Some(r) => print_report(r),
                None => println!("no test split; best val mAP {:?}", run.best_val_map),
            }
            println!("best checkpoint: {}", run.best_checkpoint.display());
            Ok(Outcome::Ok)
        }
        Cmd::Eval {
            checkpoint,
            split,
            dataset,
            output_dir,
        } => {
            let dataset = match dataset {
                Some(d) => d,
                None => dataset_for(&checkpoint)?,
            };
            let report = evaluate_checkpoint(&checkpoint, &dataset, &split)?;
            let dir = output_dir.unwrap_or_else(|| checkpoint.parent().unwrap_or(Path::new(".")).to_path_buf());
            fs::create_dir_all(&dir)?;
            write_report(&dir, &format!("eval_{split}"), &report)?;
            print_report(&report);
            Ok(Outcome::Ok)
        }
        Cmd::Ablation { config } => {
            let cfg = TrainConfig::load(&config)?;
            let res = run_ablation(&cfg)?;
            print!("{}", res.table);
            Ok(Outcome::Ok)
        }
        Cmd::Detect {
            checkpoint,
            images,
            overlay_dir,
            score_thresh,
            output,
        } => {
            let res = detect_images(&checkpoint, &images, &DetectOptions { score_thresh, overlay_dir })?;
            match output {
                Some(p) => write_detections_csv(fs::File::create(p)?, &res.detections)?,
                None => {
                    let mut out = std::io::stdout().lock();
                    write_detections_csv(&mut out, &res.detections)?;
                    out.flush()?;
                }
            }
            Ok(Outcome::Ok)
        }
        Cmd::Gradcheck {
            instances,
            seed,
            only,
            json,
            inject_fault,
        } => {
            let cfg = SuiteConfig {
                instances,
                seed,
                only,
                fault: inject_fault.as_deref().map(parse_fault).transpose()?,
                ..SuiteConfig::default()
            };
            let report = run_suite(&cfg)?;
            print!("{}", report.to_table());
            if let Some(p) = json {
                fs::write(p, serde_json::to_string_pretty(&report)? + "\n")?;
            }
            Ok(if report.passed { Outcome::Ok } else { Outcome::CheckFailed })
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Ok(n) = std::env::var("PDSE_THREADS") {
        match n.parse::<usize>() {
            Ok(n) if n > 0 => {
                if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
                    eprintln!("error: {e}");
                    return ExitCode::from(1);
                }
            }
            _ => {
                eprintln!("error: PDSE_THREADS must be a positive integer, got {n:?}");
                return ExitCode::from(1);
            }
        }
    }
    let cli = Cli::parse();
    match run(cli.cmd) {
        Ok(Outcome::Ok) => ExitCode::SUCCESS,
        Ok(Outcome::CheckFailed) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}
