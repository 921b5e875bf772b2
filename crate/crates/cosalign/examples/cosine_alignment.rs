//! The alignment loss, built up by hand on numbers small enough to follow:
//! split pixels by class, compare live features to stored rows with a
//! cosine matrix, keep the confident pairs, pull them toward similarity 1.
//!
//!     cargo run --example cosine_alignment

use cosalign::align::{cosine_matrix, selected_l1_sum, split_by_class};
use cosalign::labelmap::LabelMap;
use cosalign::tensor::{ops, Tensor};

fn main() {
    // A 2x3 feature map, two channels per pixel.
    let feats = Tensor::<f64>::parameter(
        &[2, 2, 3],
        vec![
            1.0, 0.9, 0.1, 0.2, 0.8, 0.7, // channel 0
            0.0, 0.1, 0.9, 0.8, 0.2, 0.1, // channel 1
        ],
    )
    .unwrap();

    // Prediction and reference agree on four pixels; pixels where they
    // disagree (or carry the ignore id 0) are excluded from alignment.
    let pred = LabelMap::new(2, 3, vec![1, 1, 2, 2, 1, 0]).unwrap();
    let reference = LabelMap::new(2, 3, vec![1, 1, 2, 1, 1, 2]).unwrap();
    let split = split_by_class(&pred, &reference, 2);
    println!("agreed pixels per class: {split:?}");

    // Class 1: gather its pixels as rows, compare against two stored
    // source vectors.
    let rows = ops::gather_pixels(&feats, &split[&1]).unwrap();
    let bank: Vec<Vec<f64>> = vec![vec![1.0, 0.0], vec![0.6, 0.8]];
    let bank_refs: Vec<&[f64]> = bank.iter().map(|r| r.as_slice()).collect();
    let m = cosine_matrix(&rows, &bank_refs).unwrap();

    println!("cosine matrix [{} live x {} stored]:", m.shape()[0], m.shape()[1]);
    for i in 0..m.shape()[0] {
        let row: Vec<String> = (0..m.shape()[1])
            .map(|j| format!("{:+.4}", m.data()[i * m.shape()[1] + j]))
            .collect();
        println!("  [{}]", row.join(", "));
    }

    // Only similarities strictly above the threshold are pulled toward 1;
    // the rest are presumed different instances and left alone.
    for threshold in [0.3, 0.8, 0.99] {
        let (loss, selected) = selected_l1_sum(&m, threshold);
        println!(
            "threshold {threshold}: {selected} of {} pairs selected, loss {:.6}",
            m.numel(),
            loss.value()
        );
    }

    // The loss is differentiable end to end: gradients land on the feature
    // map, concentrated on the gathered class-1 pixels.
    let (loss, _) = selected_l1_sum(&m, 0.3);
    loss.backward().unwrap();
    let g = feats.grad().unwrap();
    let touched: Vec<usize> = (0..6).filter(|p| g[*p] != 0.0 || g[6 + *p] != 0.0).collect();
    println!("feature pixels receiving gradient: {touched:?} (class-1 agreement set)");
    assert_eq!(touched, split[&1]);
}
