//! Command-line entry point: dataset generation, training, evaluation,
//! single-image prediction and the verification suites.
//!
//! Exit codes: 0 success, 2 configuration error, 3 training divergence,
//! 4 I/O or file-format error.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use canet::checkpoint::Checkpoint;
use canet::config::RunConfig;
use canet::data::dataset::{write_dataset, Dataset};
use canet::data::{pnm, Sample};
use canet::error::Error;
use canet::evaluate::{evaluate, predict_mask, EvalOptions};
use canet::graph::ModelGraph;
use canet::metrics::AbsentClassPolicy;
use canet::model::{Canet, Component};
use canet::optim::SgdOptimizer;
use canet::trainer::train;
use canet::verify;

#[derive(Parser)]
#[command(name = "canet", version, about = "Chained context aggregation segmentation network")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset from the [scene] section of a config file.
    GenData {
        /// Run configuration holding the [scene] section.
        #[arg(long)]
        spec: PathBuf,
        /// Output dataset directory.
        #[arg(long)]
        out: PathBuf,
        /// Number of samples to generate.
        #[arg(long, default_value_t = 100)]
        count: u64,
    },
    /// Train a model as described by a config file.
    Train {
        /// Run configuration file.
        #[arg(long)]
        config: PathBuf,
    },
    /// Evaluate a checkpoint on a dataset and print PA / mIoU / per-class IoU.
    Eval {
        /// Checkpoint produced by `train`.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset directory.
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated test-time scales.
        #[arg(long, default_value = "1.0")]
        scales: String,
        /// Also average over horizontally mirrored inputs.
        #[arg(long, default_value_t = false)]
        flip: bool,
    },
    /// Segment one PPM image into a PGM class mask.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Input image (binary PPM).
        #[arg(long)]
        image: PathBuf,
        /// Output mask (binary PGM, pixel value = class id).
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated test-time scales.
        #[arg(long, default_value = "1.0")]
        scales: String,
        /// Also average over horizontally mirrored inputs.
        #[arg(long, default_value_t = false)]
        flip: bool,
    },
    /// Run a verification suite.
    Verify {
        /// One of: gradcheck, shapes, metrics, params.
        #[arg(long)]
        suite: String,
    },
}

fn main() -> ExitCode {
    canet::runtime::init_thread_pool();
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(match err {
                Error::Config(_) | Error::Invalid { .. } => 2,
                Error::Diverged { .. } => 3,
                Error::Io { .. } | Error::Parse { .. } => 4,
                Error::Shape { .. } => 1,
            })
        }
    }
}

fn run(cli: Cli) -> canet::Result<ExitCode> {
    match cli.command {
        Command::GenData { spec, out, count } => {
            let cfg = read_config(&spec)?;
            write_dataset(&out, &cfg.scene, count)?;
            println!("wrote {count} samples to {}", out.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Train { config } => cmd_train(&config),
        Command::Eval { checkpoint, data, scales, flip } => cmd_eval(&checkpoint, &data, &scales, flip),
        Command::Predict { checkpoint, image, out, scales, flip } => {
            cmd_predict(&checkpoint, &image, &out, &scales, flip)
        }
        Command::Verify { suite } => cmd_verify(&suite),
    }
}

fn read_config(path: &Path) -> canet::Result<RunConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let cfg = RunConfig::parse(&text)?;
    cfg.validate()?;
    Ok(cfg)
}

fn load_samples(dir: &Path) -> canet::Result<Vec<Sample>> {
    let ds = Dataset::open(dir)?;
    (0..ds.len()).map(|i| ds.load(i)).collect()
}

fn parse_scales(text: &str) -> canet::Result<Vec<f64>> {
    let scales: Vec<f64> = text
        .split(',')
        .map(|s| s.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::Config(format!("cannot parse scales {text:?}")))?;
    if scales.is_empty() || scales.iter().any(|s| *s <= 0.0) {
        return Err(Error::Config("scales must be positive".into()));
    }
    Ok(scales)
}

fn cmd_train(config_path: &Path) -> canet::Result<ExitCode> {
    let cfg = read_config(config_path)?;
    let dataset_dir = cfg
        .dataset_dir
        .clone()
        .ok_or_else(|| Error::Config("dataset_dir missing from [paths]".into()))?;
    let output_dir = cfg
        .output_dir
        .clone()
        .ok_or_else(|| Error::Config("output_dir missing from [paths]".into()))?;

    let train_samples = load_samples(&dataset_dir)?;
    let eval_samples = match &cfg.eval_dir {
        Some(dir) => Some(load_samples(dir)?),
        None => None,
    };

    let mut graph = ModelGraph::new();
    let model = Canet::build(&mut graph, &cfg.model_config(), cfg.train.seed)?;
    println!("params.total={}", Canet::count_params(&graph, Component::All));
    println!(
        "params.backbone_and_flows={} topology={}",
        Canet::count_params(&graph, Component::BackboneAndFlows),
        cfg.cam.topology.as_str()
    );

    let mut optimizer = SgdOptimizer::new(&graph, cfg.train.momentum, cfg.train.weight_decay);
    let outcome = train(
        &model,
        &mut graph,
        &mut optimizer,
        &train_samples,
        eval_samples.as_deref(),
        cfg.num_classes,
        &cfg.train,
    )?;
    for line in &outcome.log {
        println!("{line}");
    }

    fs::create_dir_all(&output_dir).map_err(|e| Error::io(&output_dir, e))?;
    let log_path = output_dir.join("train_log.txt");
    fs::write(&log_path, outcome.log.join("\n") + "\n").map_err(|e| Error::io(&log_path, e))?;
    let ckpt = Checkpoint::capture(&graph, Some(&optimizer), outcome.iterations_run, &cfg.serialize());
    let ckpt_path = output_dir.join("checkpoint.cant");
    ckpt.save(&ckpt_path)?;
    println!("checkpoint={}", ckpt_path.display());
    Ok(ExitCode::SUCCESS)
}

/// Rebuilds the model a checkpoint was trained with from its config echo.
fn restore_model(ckpt: &Checkpoint) -> canet::Result<(RunConfig, ModelGraph, Canet)> {
    let cfg = RunConfig::parse(&ckpt.config_text)?;
    let mut graph = ModelGraph::new();
    let model = Canet::build(&mut graph, &cfg.model_config(), cfg.train.seed)?;
    ckpt.restore(&mut graph, None)?;
    Ok((cfg, graph, model))
}

fn cmd_eval(checkpoint: &Path, data: &Path, scales: &str, flip: bool) -> canet::Result<ExitCode> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let (cfg, mut graph, model) = restore_model(&ckpt)?;
    let samples = load_samples(data)?;
    let opts = EvalOptions {
        scales: parse_scales(scales)?,
        flip,
        ignore_index: cfg.train.ignore_index,
        policy: AbsentClassPolicy::Exclude,
    };
    let res = evaluate(&model, &mut graph, &samples, cfg.num_classes, &opts)?;

    println!("samples evaluated : {}", samples.len());
    println!("pixel accuracy    : {:.4}", res.pixel_accuracy);
    println!("mean IoU          : {:.4}", res.mean_iou);
    for (class, iou) in res.per_class_iou.iter().enumerate() {
        match iou {
            Some(v) => println!("class {class:>2} IoU      : {v:.4}"),
            None => println!("class {class:>2} IoU      : absent"),
        }
    }
    println!("metric.pa={:.6}", res.pixel_accuracy);
    println!("metric.miou={:.6}", res.mean_iou);
    for (class, iou) in res.per_class_iou.iter().enumerate() {
        if let Some(v) = iou {
            println!("metric.class{class}.iou={v:.6}");
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_predict(checkpoint: &Path, image: &Path, out: &Path, scales: &str, flip: bool) -> canet::Result<ExitCode> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let (cfg, mut graph, model) = restore_model(&ckpt)?;
    let img = pnm::read_ppm(image)?;
    let opts = EvalOptions {
        scales: parse_scales(scales)?,
        flip,
        ignore_index: cfg.train.ignore_index,
        policy: AbsentClassPolicy::Exclude,
    };
    let mask = predict_mask(&model, &mut graph, &img, &opts)?;
    pnm::write_pgm(out, &mask)?;
    println!("wrote {}", out.display());
    Ok(ExitCode::SUCCESS)
}

fn cmd_verify(suite: &str) -> canet::Result<ExitCode> {
    let reports = match suite {
        "gradcheck" => vec![verify::gradcheck_ops(1e-4)?, verify::gradcheck_model(1e-4, 64)?],
        "shapes" => vec![verify::shapes_suite(50)?],
        "metrics" => vec![verify::metrics_suite(200)?],
        "params" => vec![verify::params_suite()?],
        other => {
            return Err(Error::Config(format!(
                "unknown suite {other:?} (expected gradcheck, shapes, metrics or params)"
            )))
        }
    };
    let mut all_ok = true;
    for report in &reports {
        for line in &report.details {
            println!("[{}] {line}", report.name);
        }
        all_ok &= report.passed;
    }
    println!("{}", if all_ok { "PASS" } else { "FAIL" });
    Ok(if all_ok { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}
