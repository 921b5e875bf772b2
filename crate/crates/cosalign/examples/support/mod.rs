//! Shared helpers for the runnable examples: small throwaway datasets in
//! the system temp directory.

use std::path::PathBuf;

use cosalign::synthdata::{generate_dataset, DatasetSpec, SceneParams};

/// Generate a small two-domain dataset and return its root.
pub fn dataset(side: usize, scenes: usize, tag: &str) -> PathBuf {
    let root = std::env::temp_dir().join(format!("cosalign_ex_{tag}_{}", std::process::id()));
    let spec = DatasetSpec {
        scene: SceneParams { classes: 5, height: side, width: side },
        source_train: scenes,
        target_train: scenes,
        eval_per_domain: scenes.min(4),
        ..DatasetSpec::default()
    };
    generate_dataset(&root, &spec).expect("example dataset");
    root
}

pub fn cleanup(root: &std::path::Path) {
    std::fs::remove_dir_all(root).ok();
}
