//! The output-space adversarial baseline: a 5-layer discriminator learns to
//! tell source prediction maps from target ones while the segmenter earns a
//! bonus for fooling it. Two optimizer families advance in alternation.
//!
//!     cargo run --release --example adversarial_baseline

use cosalign::adversarial::{adversarial_loss, discriminator_loss, Discriminator};
use cosalign::config::RunConfig;
use cosalign::tensor::{ops, Tensor};
use cosalign::trainer::{TrainData, Trainer};
use cosalign::Scalar;

mod support;

fn main() {
    // The discriminator on its own: it maps class-probability maps to
    // per-patch source/target scores through five stride-2 convolutions,
    // so inputs must be at least 32x32.
    let disc: Discriminator<f64> = Discriminator::new(5, 3);
    let probs = ops::softmax_channels(
        &Tensor::new(&[5, 32, 32], (0..5 * 32 * 32).map(|i| (i % 7) as f64 * 0.1).collect())
            .unwrap(),
    )
    .unwrap();
    let scores = disc.forward(&probs).unwrap();
    println!("discriminator: probs {:?} -> scores {:?}", probs.shape(), scores.shape());

    // Generator side: reward for making target predictions look source-like
    // (the discriminator's weights are frozen inside this loss).
    let adv = adversarial_loss(&disc, &probs).unwrap();
    // Discriminator side: spot source maps as source, target maps as target.
    let d_loss = discriminator_loss(&disc, &probs, &probs).unwrap();
    println!("adversarial loss {:.4}, discriminator loss {:.4}", adv.value(), d_loss.value());

    // The full baseline variant inside the trainer.
    let root = support::dataset(32, 6, "adv");
    let mut cfg = RunConfig::default();
    for (k, v) in [
        ("classes", "5"),
        ("feature_dim", "16"),
        ("variant", "with_adv"),
        ("max_iter", "30"),
        ("eval_every", "30"),
        ("dict_size", "64"),
    ] {
        cfg.apply(k, v).unwrap();
    }
    cfg.apply("data", root.to_str().unwrap()).unwrap();

    let mut trainer: Trainer<Scalar> = Trainer::new(cfg).unwrap();
    assert!(trainer.disc.is_some(), "the variant owns a discriminator");
    let data = TrainData::load(&trainer.cfg).unwrap();

    for _ in 0..30 {
        let stats = trainer.step(&data).unwrap();
        if stats.iteration % 10 == 0 {
            println!(
                "iter {:>3}: loss_seg {:.3}, loss_adv {:.4}",
                stats.iteration, stats.loss_seg, stats.loss_adv
            );
        }
    }
    let (miou, _) = trainer.evaluate(&data.eval).unwrap();
    println!("final target mIoU {miou:.4} (structural demo, not a claim of quality)");
    support::cleanup(&root);
}
