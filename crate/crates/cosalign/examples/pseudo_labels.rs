//! Pseudo-label harvesting: pool prediction confidences over the target
//! split, derive per-class thresholds (median confidence, capped at 0.9),
//! and keep only the pixels that clear them.
//!
//!     cargo run --example pseudo_labels

use cosalign::config::RunConfig;
use cosalign::pseudolabel::{argmax_with_confidence, harvest, ConfidenceCollector};
use cosalign::tensor::ops;
use cosalign::trainer::{TrainData, Trainer};
use cosalign::Scalar;

mod support;

fn main() {
    // A briefly trained stage-1 model gives meaningful confidences.
    let root = support::dataset(32, 6, "pseudo_labels");
    let mut cfg = RunConfig::default();
    for (k, v) in [
        ("classes", "5"),
        ("feature_dim", "16"),
        ("max_iter", "60"),
        ("eval_every", "60"),
        ("dict_size", "64"),
    ] {
        cfg.apply(k, v).unwrap();
    }
    cfg.apply("data", root.to_str().unwrap()).unwrap();
    let mut trainer: Trainer<Scalar> = Trainer::new(cfg).unwrap();
    let data = TrainData::load(&trainer.cfg).unwrap();
    trainer.run(&data).unwrap();

    // Pool confidences over every target training image.
    let mut collector = ConfidenceCollector::new(5);
    for sample in &data.target {
        let logits = trainer.net.predict(&sample.image, 32, 32).unwrap();
        let probs = ops::softmax_channels(&logits).unwrap();
        collector.observe_probs(&probs);
    }
    let thresholds = collector.finish();
    println!("derived thresholds:\n{}", thresholds.encode());

    // Harvest one image and measure coverage: sub-threshold pixels fall
    // back to the ignore id and are excluded from the stage-2 loss.
    let probs = ops::softmax_channels(
        &trainer.net.predict(&data.target[0].image, 32, 32).unwrap(),
    )
    .unwrap();
    let pseudo = harvest(&probs, &thresholds);
    let kept = pseudo.data().iter().filter(|&&c| c != 0).count();
    println!(
        "image 0: kept {kept}/{} pixels ({:.1}%)",
        pseudo.data().len(),
        100.0 * kept as f64 / pseudo.data().len() as f64
    );

    // Every kept pixel's confidence clears its class threshold.
    let (argmax, confidence) = argmax_with_confidence(&probs);
    for (i, &c) in pseudo.data().iter().enumerate() {
        if c != 0 {
            assert_eq!(c, argmax.data()[i]);
            assert!(confidence[i] > thresholds.for_class(c));
        }
    }
    println!("all kept pixels beat their class threshold");
    support::cleanup(&root);
}
