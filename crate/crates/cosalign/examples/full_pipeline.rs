//! The complete two-stage protocol, end to end: generate the benchmark,
//! train stage 1 with alignment, harvest pseudo labels from its checkpoint,
//! train stage 2 on source truth plus target pseudo labels, and compare
//! against the source-only baseline. A miniature of the experiment driver.
//!
//!     cargo run --release --example full_pipeline

use cosalign::config::RunConfig;
use cosalign::trainer::{generate_pseudo_labels, TrainData, Trainer};
use cosalign::Scalar;

mod support;

fn base_config(root: &std::path::Path) -> RunConfig {
    let mut cfg = RunConfig::default();
    for (k, v) in [
        ("classes", "5"),
        ("feature_dim", "16"),
        ("lambda_cos", "0.01"),
        ("dict_size", "128"),
        ("max_iter", "150"),
        ("eval_every", "150"),
        ("seed", "5"),
    ] {
        cfg.apply(k, v).unwrap();
    }
    cfg.apply("data", root.to_str().unwrap()).unwrap();
    cfg
}

fn run(mut cfg: RunConfig, label: &str) -> (f64, Trainer<Scalar>) {
    cfg.validate().unwrap();
    let mut trainer: Trainer<Scalar> = Trainer::new(cfg).unwrap();
    let data = TrainData::load(&trainer.cfg).unwrap();
    let log = trainer.run(&data).unwrap();
    let miou = log.last_miou().unwrap();
    println!("{label}: final target mIoU {miou:.4}");
    (miou, trainer)
}

fn main() {
    let root = support::dataset(48, 12, "pipeline");
    let work = root.join("work");

    // Source-only baseline: no target data is touched at all.
    // with_variant drops the template's explicit lambda_cos, which the
    // alignment-free variant would otherwise reject.
    let src_cfg = base_config(&root).with_variant(cosalign::config::Variant::OnlySsl);
    let (source_only, _) = run(src_cfg, "source-only");

    // Stage 1: source supervision plus class-wise cosine alignment.
    let (stage1, stage1_trainer) = run(base_config(&root), "stage 1   ");

    // Pseudo labels from the stage-1 model.
    let pseudo_dir = work.join("pseudo");
    let thresholds =
        generate_pseudo_labels(&stage1_trainer.net, 5, &root, &pseudo_dir).unwrap();
    println!("thresholds: {:?}", thresholds.values());
    let ckpt = work.join("stage1.ckpt");
    stage1_trainer.save_checkpoint(&ckpt).unwrap();

    // Stage 2: adds the pseudo-labeled target loss, warm-started from the
    // stage-1 parameters. Fine-tuning restarts the poly schedule, so it
    // runs at a reduced learning rate instead of the from-scratch default.
    let mut s2 = base_config(&root);
    s2.apply("stage", "2").unwrap();
    s2.apply("lr", "1e-4").unwrap();
    s2.apply("pseudo_dir", pseudo_dir.to_str().unwrap()).unwrap();
    let mut s2_cfg = s2.clone();
    s2_cfg.validate().unwrap();
    let mut trainer: Trainer<Scalar> = Trainer::new(s2_cfg).unwrap();
    trainer.load_parameters(&ckpt).unwrap();
    let data = TrainData::load(&trainer.cfg).unwrap();
    let stage2 = trainer.run(&data).unwrap().last_miou().unwrap();
    println!("stage 2   : final target mIoU {stage2:.4}");

    println!(
        "\nsource-only {source_only:.4} -> stage 1 {stage1:.4} -> stage 2 {stage2:.4}"
    );
    support::cleanup(&root);
}
