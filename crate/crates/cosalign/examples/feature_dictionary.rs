//! The source-feature dictionary: a class-keyed FIFO of recent feature
//! vectors. It exists to solve one concrete failure, shown at the bottom:
//! a class visible in the target image but missing from the current source
//! image would otherwise have nothing to align against.
//!
//!     cargo run --example feature_dictionary

use cosalign::align::{class_wise_cosine_loss, split_by_class, FeatureDictionary};
use cosalign::labelmap::LabelMap;
use cosalign::tensor::Tensor;

fn main() {
    // Capacity 3 per class, 2-dimensional features for readability.
    let mut dict: FeatureDictionary<f64> = FeatureDictionary::new(3, 2).unwrap();

    for i in 0..5 {
        let v = i as f64;
        dict.enqueue(1, vec![vec![v, v + 0.5]]).unwrap();
    }
    // Five pushes through capacity 3: the two oldest rows fell out.
    let kept: Vec<f64> = dict.rows(1).iter().map(|r| r[0]).collect();
    println!("class 1 after 5 enqueues at capacity 3: {kept:?}");
    assert_eq!(kept, vec![2.0, 3.0, 4.0]);

    dict.enqueue(2, vec![vec![9.0, 1.0], vec![8.0, 2.0]]).unwrap();
    println!("stored classes: {:?}, total rows {}", dict.classes(), dict.total_len());

    // --- The unmatching problem ------------------------------------------
    // Target features on a 1x4 strip, all labeled class 2.
    let target = Tensor::<f64>::parameter(
        &[2, 1, 4],
        vec![
            0.9, 0.8, 0.7, 0.6, // channel 0
            0.1, 0.2, 0.3, 0.4, // channel 1
        ],
    )
    .unwrap();
    let labels = LabelMap::new(1, 4, vec![2, 2, 2, 2]).unwrap();
    let split = split_by_class(&labels, &labels, 3);

    // An empty dictionary mimics "class 2 absent from this source image":
    // the class is skipped, contributing nothing.
    let empty: FeatureDictionary<f64> = FeatureDictionary::new(3, 2).unwrap();
    let (_, outcome) = class_wise_cosine_loss(&target, &split, &empty, 0.0, 3).unwrap();
    println!(
        "without stored features: matched={:?} skipped={:?}",
        outcome.matched, outcome.skipped
    );
    assert_eq!(outcome.skipped, vec![2]);

    // The dictionary still remembers class 2 from earlier source images,
    // so alignment proceeds.
    let (loss, outcome) = class_wise_cosine_loss(&target, &split, &dict, 0.0, 3).unwrap();
    println!(
        "with the dictionary: matched={:?}, {} pairs selected, loss {:.6}",
        outcome.matched,
        outcome.selected_pairs,
        loss.value()
    );
    assert_eq!(outcome.matched, vec![2]);

    // Stored rows are alignment anchors, not trainable state: backward
    // leaves them bitwise unchanged.
    let before: Vec<Vec<f64>> = dict.rows(2).iter().map(|r| r.to_vec()).collect();
    loss.backward().unwrap();
    let after: Vec<Vec<f64>> = dict.rows(2).iter().map(|r| r.to_vec()).collect();
    assert_eq!(before, after);
    println!("backward reached the live features but not the stored rows");
}
