//! Experiment suites: the six-variant ablation table and one-dimensional
//! hyper-parameter sweeps. Both fan a template config out into full
//! training runs and collect the final target mIoU of each, writing
//! results to disk as they complete so a failing member never destroys
//! the finished ones.

use std::fs;
use std::path::Path;

use crate::config::{RunConfig, Variant};
use crate::real::Real;
use crate::trainer::{TrainData, TrainError, Trainer};

/// One completed member of a suite.
#[derive(Debug, Clone)]
pub struct SuiteRun {
    pub variant: Variant,
    pub seed: u64,
    pub final_miou: f64,
}

/// Per-run results plus the per-variant medians that make up the summary
/// table.
#[derive(Debug, Clone)]
pub struct AblationReport {
    pub runs: Vec<SuiteRun>,
    /// Variant paired with its median final mIoU over all seeds, in the
    /// canonical variant order.
    pub table: Vec<(Variant, f64)>,
}

/// Median of a nonempty sample; averages the middle pair for even sizes.
pub fn median(values: &[f64]) -> f64 {
    assert!(!values.is_empty(), "median of an empty sample");
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("non-finite value"));
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

/// Train every variant for every seed from one template config.
///
/// Each run's mIoU-vs-iteration curve lands in
/// `out_dir/curves/<variant>_<seed>.csv` (with a per-class `.jsonl` next
/// to it) the moment the run finishes, and `out_dir/runs.csv` grows one
/// `variant,seed,final_miou` line at a time, so an error part-way through
/// leaves every completed result on disk. On success `out_dir/table.csv`
/// maps each variant's display name to its median final mIoU.
pub fn run_ablation_suite<T: Real>(
    template: &RunConfig,
    seeds: &[u64],
    out_dir: &Path,
) -> Result<AblationReport, TrainError> {
    if seeds.is_empty() {
        return Err(TrainError::EmptyDataset("ablation seeds"));
    }
    let curves = out_dir.join("curves");
    fs::create_dir_all(&curves)?;
    let runs_path = out_dir.join("runs.csv");
    let mut runs_body = String::from("variant,seed,final_miou\n");
    fs::write(&runs_path, &runs_body)?;

    // The manifests and pseudo-labels do not depend on seed or variant,
    // so the dataset is loaded exactly once.
    let data = TrainData::<T>::load(template)?;

    let mut runs: Vec<SuiteRun> = Vec::new();
    for &seed in seeds {
        for variant in Variant::ALL {
            let mut cfg = template.with_variant(variant);
            cfg.seed = seed;
            let mut trainer = Trainer::new(cfg)?;
            let log = trainer.run(&data)?;
            let final_miou = log.last_miou().unwrap_or(0.0);
            let stem = format!("{}_{seed}", variant.key());
            log.save(
                &curves.join(format!("{stem}.csv")),
                &curves.join(format!("{stem}.jsonl")),
            )?;
            runs_body.push_str(&format!("{},{seed},{final_miou:.6}\n", variant.key()));
            fs::write(&runs_path, &runs_body)?;
            runs.push(SuiteRun {
                variant,
                seed,
                final_miou,
            });
        }
    }

    let mut table = Vec::new();
    let mut table_body = String::from("variant,median_final_miou\n");
    for variant in Variant::ALL {
        let sample: Vec<f64> = runs
            .iter()
            .filter(|r| r.variant == variant)
            .map(|r| r.final_miou)
            .collect();
        let m = median(&sample);
        table_body.push_str(&format!("{},{m:.6}\n", variant.display_name()));
        table.push((variant, m));
    }
    fs::write(out_dir.join("table.csv"), table_body)?;

    Ok(AblationReport { runs, table })
}

/// Which knob a sweep varies.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepParam {
    CosineThreshold,
    DictionarySize,
}

impl SweepParam {
    pub fn parse(s: &str) -> Option<SweepParam> {
        match s {
            "tcos" => Some(SweepParam::CosineThreshold),
            "dict" => Some(SweepParam::DictionarySize),
            _ => None,
        }
    }

    /// The config key the sweep rewrites per value.
    pub fn key(&self) -> &'static str {
        match self {
            SweepParam::CosineThreshold => "t_cos",
            SweepParam::DictionarySize => "dict_size",
        }
    }
}

/// Train once per value of a single hyper-parameter and record each run's
/// final mIoU, mirroring a sensitivity table. `out_dir/sweep.csv` holds
/// `value,miou` rows and is rewritten after every completed run, so a bad
/// value late in the list preserves the earlier rows.
pub fn run_sweep<T: Real>(
    template: &RunConfig,
    param: SweepParam,
    values: &[String],
    out_dir: &Path,
) -> Result<Vec<(String, f64)>, TrainError> {
    if values.is_empty() {
        return Err(TrainError::EmptyDataset("sweep values"));
    }
    fs::create_dir_all(out_dir)?;
    let data = TrainData::<T>::load(template)?;
    let sweep_path = out_dir.join("sweep.csv");
    let mut body = String::from("value,miou\n");
    fs::write(&sweep_path, &body)?;

    let mut results = Vec::new();
    for value in values {
        let mut cfg = template.clone();
        cfg.apply(param.key(), value)?;
        let mut trainer = Trainer::new(cfg)?;
        let log = trainer.run(&data)?;
        let miou = log.last_miou().unwrap_or(0.0);
        body.push_str(&format!("{value},{miou:.6}\n"));
        fs::write(&sweep_path, &body)?;
        results.push((value.clone(), miou));
    }
    Ok(results)
}
