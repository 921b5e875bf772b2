//! Experiment driver: dataset generation, the two training stages,
//! pseudo-label harvesting, evaluation, the ablation suite, hyper-parameter
//! sweeps, and gradient verification. All heavy lifting lives in the
//! library; this binary only parses arguments, wires files to calls, and
//! prints results.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use cosalign::checkpoint::{self, TensorBag};
use cosalign::checks;
use cosalign::config::RunConfig;
use cosalign::metrics::ConfusionMatrix;
use cosalign::net::SegNet;
use cosalign::pseudolabel::argmax_with_confidence;
use cosalign::suite::{self, SweepParam};
use cosalign::synthdata::{self, DatasetSpec, Domain, SceneParams, ShiftParams};
use cosalign::trainer::{generate_pseudo_labels, TrainData, Trainer};
use cosalign::Scalar;

#[derive(Parser)]
#[command(
    name = "cosalign",
    version,
    about = "Domain adaptation by class-wise cosine feature alignment, at desk scale"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic two-domain dataset with ground-truth masks.
    GenData {
        /// Dataset root directory (created if missing).
        #[arg(long)]
        out: PathBuf,
        /// Training scenes per domain.
        #[arg(long)]
        seeds: usize,
        /// Evaluation scenes per domain.
        #[arg(long, default_value_t = 25)]
        eval: usize,
        /// Appearance gap applied to the target domain: "default", "none",
        /// or a comma list like "hue=40,contrast=-0.25,noise=0.05"
        /// (keys: hue, contrast, brightness, texture, noise; components
        /// not mentioned are disabled).
        #[arg(long, default_value = "default")]
        shift: String,
        /// Object classes per scene (ids 1..=classes; 0 is ignore).
        #[arg(long, default_value_t = 5)]
        classes: usize,
        /// Scene size as HxW.
        #[arg(long, default_value = "64x64")]
        size: String,
        /// Reserve this class id for target-domain scenes only, so source
        /// images never contain it.
        #[arg(long)]
        target_only_class: Option<u8>,
    },

    /// Train one stage and write metrics, per-class curves, and a checkpoint.
    Train {
        /// 1 = source + alignment; 2 = adds pseudo-labeled target loss.
        #[arg(long)]
        stage: u8,
        /// Flat key = value config file.
        #[arg(long)]
        config: PathBuf,
        /// Override one config key (repeatable).
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        /// Continue from a full training checkpoint (parameters, optimizer,
        /// dictionary) instead of starting fresh.
        #[arg(long)]
        resume: Option<PathBuf>,
    },

    /// Harvest pseudo labels for every target training image.
    PseudoLabel {
        /// Trained checkpoint to predict with.
        #[arg(long)]
        ckpt: PathBuf,
        /// Dataset root (reads train.manifest).
        #[arg(long)]
        data: PathBuf,
        /// Output directory for pseudo_<seed>.pgm files and thresholds.txt.
        #[arg(long)]
        out: PathBuf,
    },

    /// Evaluate a checkpoint on the held-out scenes of both domains.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        /// Dataset root (reads eval.manifest).
        #[arg(long)]
        data: PathBuf,
    },

    /// Run the six-variant ablation suite from one template config.
    Ablate {
        /// Config file every run starts from.
        #[arg(long)]
        template: PathBuf,
        /// Comma-separated seeds; each variant runs once per seed.
        #[arg(long)]
        seeds: String,
        /// Suite output directory (default: the template's out key).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Override one template key (repeatable).
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },

    /// Sweep one hyper-parameter over a list of values.
    Sweep {
        /// Which knob: "tcos" (similarity threshold) or "dict" (capacity).
        #[arg(long)]
        param: String,
        /// Comma-separated values to try.
        #[arg(long)]
        values: String,
        /// Config file every run starts from (default: built-in defaults).
        #[arg(long)]
        template: Option<PathBuf>,
        /// Sweep output directory (default: the template's out key).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Override one template key (repeatable).
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },

    /// Verify analytic gradients against central differences: every
    /// differentiable primitive, then the full stage-1 and stage-2
    /// objectives.
    Gradcheck {
        /// Probe every parameter component of the objectives instead of
        /// every fifth (slower, same tolerance).
        #[arg(long)]
        full: bool,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(message) => {
            eprintln!("error: {message}");
            ExitCode::FAILURE
        }
    }
}

fn dispatch(command: Command) -> Result<(), String> {
    match command {
        Command::GenData { out, seeds, eval, shift, classes, size, target_only_class } => {
            gen_data(&out, seeds, eval, &shift, classes, &size, target_only_class)
        }
        Command::Train { stage, config, set, resume } => {
            train(stage, &config, &set, resume.as_deref())
        }
        Command::PseudoLabel { ckpt, data, out } => pseudo_label(&ckpt, &data, &out),
        Command::Eval { ckpt, data } => eval_checkpoint(&ckpt, &data),
        Command::Ablate { template, seeds, out, set } => ablate(&template, &seeds, out, &set),
        Command::Sweep { param, values, template, out, set } => {
            sweep(&param, &values, template.as_deref(), out, &set)
        }
        Command::Gradcheck { full } => gradcheck(full),
    }
}

// ---------------------------------------------------------------------------
// gen-data

fn parse_shift(spec: &str) -> Result<ShiftParams, String> {
    match spec {
        "default" => return Ok(ShiftParams::default()),
        "none" => return Ok(ShiftParams::NONE),
        _ => {}
    }
    let mut shift = ShiftParams::NONE;
    for part in spec.split(',') {
        let (key, value) = part
            .split_once('=')
            .ok_or_else(|| format!("shift component {part:?} must look like key=value"))?;
        let v: f64 = value
            .trim()
            .parse()
            .map_err(|_| format!("cannot parse shift value {value:?}"))?;
        match key.trim() {
            "hue" => shift.hue_degrees = v,
            "contrast" => shift.contrast = v,
            "brightness" => shift.brightness = v,
            "texture" => shift.texture_freq = v,
            "noise" => shift.noise_sigma = v,
            other => {
                return Err(format!(
                    "unknown shift key {other:?}; expected hue, contrast, brightness, texture, or noise"
                ))
            }
        }
    }
    Ok(shift)
}

fn parse_size(size: &str) -> Result<(usize, usize), String> {
    let (h, w) = size
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("size {size:?} must look like HxW"))?;
    let height = h.parse().map_err(|_| format!("bad height {h:?}"))?;
    let width = w.parse().map_err(|_| format!("bad width {w:?}"))?;
    Ok((height, width))
}

fn gen_data(
    out: &Path,
    seeds: usize,
    eval: usize,
    shift: &str,
    classes: usize,
    size: &str,
    target_only_class: Option<u8>,
) -> Result<(), String> {
    let (height, width) = parse_size(size)?;
    let spec = DatasetSpec {
        scene: SceneParams { classes, height, width },
        shift: parse_shift(shift)?,
        source_train: seeds,
        target_train: seeds,
        eval_per_domain: eval,
        target_only_class,
        ..DatasetSpec::default()
    };
    let (train, eval_manifest) =
        synthdata::generate_dataset(out, &spec).map_err(|e| e.to_string())?;
    println!(
        "wrote {} training and {} evaluation scenes under {}",
        train.entries.len(),
        eval_manifest.entries.len(),
        out.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// train

fn train(
    stage: u8,
    config: &Path,
    overrides: &[String],
    resume: Option<&Path>,
) -> Result<(), String> {
    let mut cfg = RunConfig::load(config).map_err(|e| e.to_string())?;
    cfg.apply("stage", &stage.to_string()).map_err(|e| e.to_string())?;
    cfg.apply_overrides(overrides).map_err(|e| e.to_string())?;

    let mut trainer: Trainer<Scalar> = Trainer::new(cfg).map_err(|e| e.to_string())?;
    let cfg = trainer.cfg.clone();
    let data = TrainData::load(&cfg).map_err(|e| e.to_string())?;

    if let Some(ckpt) = resume {
        trainer.load_checkpoint(ckpt).map_err(|e| e.to_string())?;
        println!(
            "resumed from {} at iteration {}",
            ckpt.display(),
            trainer.opt.iteration()
        );
    } else if !cfg.checkpoint.as_os_str().is_empty() {
        trainer.load_parameters(&cfg.checkpoint).map_err(|e| e.to_string())?;
        println!("warm-started parameters from {}", cfg.checkpoint.display());
    }

    std::fs::create_dir_all(&cfg.out).map_err(|e| e.to_string())?;
    std::fs::write(cfg.out.join("config.txt"), cfg.encode()).map_err(|e| e.to_string())?;

    let log = trainer.run(&data).map_err(|e| e.to_string())?;
    log.save(&cfg.out.join("metrics.csv"), &cfg.out.join("per_class.jsonl"))
        .map_err(|e| e.to_string())?;
    trainer
        .save_checkpoint(&cfg.out.join("final.ckpt"))
        .map_err(|e| e.to_string())?;

    println!(
        "stage {} {} run finished: final mIoU {:.4} over {} eval points; outputs in {}",
        cfg.stage,
        cfg.variant.display_name(),
        log.last_miou().unwrap_or(f64::NAN),
        log.rows.len(),
        cfg.out.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// pseudo-label / eval

/// Read classes and feature width from the head convolution, so evaluation
/// never needs the original config file.
fn net_from_checkpoint(path: &Path) -> Result<(SegNet<Scalar>, usize), String> {
    let bag: TensorBag<Scalar> = TensorBag::load(path).map_err(|e| e.to_string())?;
    let (shape, _) = bag
        .get("net/head/weight")
        .ok_or_else(|| format!("{} has no net/head/weight tensor", path.display()))?;
    if shape.len() != 4 {
        return Err(format!(
            "net/head/weight should be a 4-d convolution kernel, found rank {}",
            shape.len()
        ));
    }
    let (classes, feature_dim) = (shape[0], shape[1]);
    let net = SegNet::new(classes, feature_dim, 0);
    checkpoint::unpack_parameters(&bag, &net.parameters()).map_err(|e| e.to_string())?;
    Ok((net, classes))
}

fn pseudo_label(ckpt: &Path, data: &Path, out: &Path) -> Result<(), String> {
    let (net, classes) = net_from_checkpoint(ckpt)?;
    let thresholds = generate_pseudo_labels(&net, classes, data, out).map_err(|e| e.to_string())?;
    println!("harvested pseudo labels into {}", out.display());
    print!("{}", thresholds.encode());
    Ok(())
}

fn eval_checkpoint(ckpt: &Path, data: &Path) -> Result<(), String> {
    let (net, classes) = net_from_checkpoint(ckpt)?;
    let manifest =
        synthdata::Manifest::load(&data.join("eval.manifest")).map_err(|e| e.to_string())?;

    for domain in [Domain::Source, Domain::Target] {
        let entries = manifest.domain_entries(domain);
        if entries.is_empty() {
            continue;
        }
        let mut cm = ConfusionMatrix::new(classes);
        for entry in entries {
            let (image, labels) =
                synthdata::load_sample::<Scalar>(data, entry).map_err(|e| e.to_string())?;
            let logits = net
                .predict(&image, labels.height(), labels.width())
                .map_err(|e| e.to_string())?;
            let (pred, _) = argmax_with_confidence(&logits);
            cm.update(&pred, &labels).map_err(|e| e.to_string())?;
        }
        println!("{} mIoU {:.4}", domain.as_str(), cm.mean_iou());
        for (i, iou) in cm.per_class_iou().iter().enumerate() {
            match iou {
                Some(v) => println!("  class {} IoU {:.4}", i + 1, v),
                None => println!("  class {} IoU n/a (absent)", i + 1),
            }
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// ablate / sweep

fn load_template(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig, String> {
    let mut cfg = match path {
        Some(p) => RunConfig::load(p).map_err(|e| e.to_string())?,
        None => RunConfig::default(),
    };
    cfg.apply_overrides(overrides).map_err(|e| e.to_string())?;
    Ok(cfg)
}

fn parse_seed_list(list: &str) -> Result<Vec<u64>, String> {
    list.split(',')
        .map(|s| {
            s.trim()
                .parse::<u64>()
                .map_err(|_| format!("bad seed {s:?} in list"))
        })
        .collect()
}

fn ablate(
    template: &Path,
    seeds: &str,
    out: Option<PathBuf>,
    overrides: &[String],
) -> Result<(), String> {
    let cfg = load_template(Some(template), overrides)?;
    let seeds = parse_seed_list(seeds)?;
    let out_dir = out.unwrap_or_else(|| cfg.out.clone());

    let report =
        suite::run_ablation_suite::<Scalar>(&cfg, &seeds, &out_dir).map_err(|e| e.to_string())?;
    println!(
        "{} runs complete ({} variants x {} seeds); outputs in {}",
        report.runs.len(),
        report.table.len(),
        seeds.len(),
        out_dir.display()
    );
    println!("median final mIoU per variant:");
    for (variant, miou) in &report.table {
        println!("  {:<22} {:.4}", variant.display_name(), miou);
    }
    Ok(())
}

fn sweep(
    param: &str,
    values: &str,
    template: Option<&Path>,
    out: Option<PathBuf>,
    overrides: &[String],
) -> Result<(), String> {
    let parsed = SweepParam::parse(param)
        .ok_or_else(|| format!("unknown sweep parameter {param:?}; expected tcos or dict"))?;
    let cfg = load_template(template, overrides)?;
    let values: Vec<String> = values.split(',').map(|v| v.trim().to_string()).collect();
    let out_dir = out.unwrap_or_else(|| cfg.out.clone());

    let rows =
        suite::run_sweep::<Scalar>(&cfg, parsed, &values, &out_dir).map_err(|e| e.to_string())?;
    println!("{} = value -> final mIoU (outputs in {})", parsed.key(), out_dir.display());
    for (value, miou) in &rows {
        println!("  {value:<8} {miou:.4}");
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// gradcheck

fn gradcheck(full: bool) -> Result<(), String> {
    let mut all_passed = true;
    for report in checks::primitive_gradient_reports() {
        all_passed &= report.passed();
        println!("{report}");
    }
    let stride = if full { 1 } else { 5 };
    let reports = checks::objective_gradient_reports(checks::PRIMITIVE_TOLERANCE, stride)
        .map_err(|e| e.to_string())?;
    for report in reports {
        all_passed &= report.passed();
        println!("{report}");
    }
    if all_passed {
        Ok(())
    } else {
        Err("at least one gradient check failed".into())
    }
}
