//! One stage-1 training run, traced iteration by iteration: source
//! cross-entropy plus the weighted alignment loss, SGD with the polynomial
//! schedule, periodic evaluation on held-out target scenes.
//!
//!     cargo run --release --example train_stage1

use cosalign::config::RunConfig;
use cosalign::trainer::{TrainData, Trainer};
use cosalign::Scalar;

mod support;

fn main() {
    let root = support::dataset(48, 10, "stage1");

    let mut cfg = RunConfig::default();
    for (k, v) in [
        ("classes", "5"),
        ("feature_dim", "16"),
        ("t_cos", "0.6"),
        ("lambda_cos", "0.1"),
        ("dict_size", "128"),
        ("max_iter", "120"),
        ("eval_every", "30"),
        ("seed", "11"),
    ] {
        cfg.apply(k, v).unwrap();
    }
    cfg.apply("data", root.to_str().unwrap()).unwrap();

    let mut trainer: Trainer<Scalar> = Trainer::new(cfg).unwrap();
    let data = TrainData::load(&trainer.cfg).unwrap();
    println!(
        "{} source / {} target training scenes, {} eval scenes",
        data.source.len(),
        data.target.len(),
        data.eval.len()
    );

    // Trainer::run would drive the same loop; stepping manually exposes
    // the per-iteration statistics.
    let mut selected_history = Vec::new();
    while trainer.opt.iteration() < trainer.cfg.max_iter {
        let iter = trainer.opt.iteration();
        if iter % trainer.cfg.eval_every == 0 {
            let (miou, _) = trainer.evaluate(&data.eval).unwrap();
            println!("iter {iter:>4}: target mIoU {miou:.4}, lr {:.6}", trainer.opt.lr());
        }
        let stats = trainer.step(&data).unwrap();
        selected_history.push(stats.outcome.selected_pairs);
        if iter % trainer.cfg.eval_every == 0 {
            println!(
                "           loss_seg {:.3}, loss_cos {:.4}, {} pairs selected",
                stats.loss_seg, stats.loss_cos, stats.outcome.selected_pairs
            );
        }
    }
    let (miou, per_class) = trainer.evaluate(&data.eval).unwrap();
    println!("final target mIoU {miou:.4}");
    for (i, iou) in per_class.iter().enumerate() {
        if let Some(v) = iou {
            println!("  class {}: IoU {:.4}", i + 1, v);
        }
    }
    println!(
        "dictionary filled to {} rows; alignment selected {} pairs in the last step",
        trainer.dicts[0].total_len(),
        selected_history.last().unwrap()
    );
    support::cleanup(&root);
}
