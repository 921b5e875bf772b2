//! Segmentation quality metrics and run logs.
//!
//! The confusion matrix ignores every pixel whose ground-truth id is 0.
//! Intersection-over-union is undefined for a class that appears in neither
//! the prediction nor the ground truth; such classes are skipped by the mean
//! rather than counted as zero.

use std::fmt;
use std::path::Path;

use crate::labelmap::{LabelMap, IGNORE};

#[derive(Debug, Clone, PartialEq)]
pub enum MetricsError {
    SizeMismatch {
        pred: (usize, usize),
        truth: (usize, usize),
    },
    ClassOutOfRange {
        class: u8,
        classes: usize,
    },
}

impl fmt::Display for MetricsError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MetricsError::SizeMismatch { pred, truth } => write!(
                f,
                "prediction is {}x{} but ground truth is {}x{}",
                pred.0, pred.1, truth.0, truth.1
            ),
            MetricsError::ClassOutOfRange { class, classes } => {
                write!(f, "class id {class} outside 1..={classes}")
            }
        }
    }
}

impl std::error::Error for MetricsError {}

/// Pixel counts indexed by `(truth, prediction)`, classes 1..=C.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<usize>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        ConfusionMatrix {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    fn idx(&self, truth: u8, pred: u8) -> usize {
        (truth as usize - 1) * self.classes + (pred as usize - 1)
    }

    pub fn count(&self, truth: u8, pred: u8) -> usize {
        self.counts[self.idx(truth, pred)]
    }

    /// Accumulate one image pair. Ground-truth ignore pixels contribute
    /// nothing; neither map may contain a class id above the configured
    /// count, and predictions may not contain the ignore id at all.
    pub fn update(&mut self, pred: &LabelMap, truth: &LabelMap) -> Result<(), MetricsError> {
        if pred.height() != truth.height() || pred.width() != truth.width() {
            return Err(MetricsError::SizeMismatch {
                pred: (pred.height(), pred.width()),
                truth: (truth.height(), truth.width()),
            });
        }
        for (&p, &t) in pred.data().iter().zip(truth.data()) {
            if t == IGNORE {
                continue;
            }
            if t as usize > self.classes {
                return Err(MetricsError::ClassOutOfRange {
                    class: t,
                    classes: self.classes,
                });
            }
            if p == IGNORE || p as usize > self.classes {
                return Err(MetricsError::ClassOutOfRange {
                    class: p,
                    classes: self.classes,
                });
            }
            let cell = self.idx(t, p);
            self.counts[cell] += 1;
        }
        Ok(())
    }

    /// Intersection over union for one class, or `None` when the class
    /// appears nowhere.
    pub fn iou(&self, class: u8) -> Option<f64> {
        let c = class as usize - 1;
        let inter = self.counts[c * self.classes + c];
        let mut union = 0usize;
        for other in 0..self.classes {
            union += self.counts[c * self.classes + other]; // truth == class
            union += self.counts[other * self.classes + c]; // pred == class
        }
        union -= inter; // the diagonal cell was added twice
        if union == 0 {
            None
        } else {
            Some(inter as f64 / union as f64)
        }
    }

    pub fn per_class_iou(&self) -> Vec<Option<f64>> {
        (1..=self.classes as u8).map(|c| self.iou(c)).collect()
    }

    /// Mean IoU over the classes whose IoU is defined; 0 when none are.
    pub fn mean_iou(&self) -> f64 {
        let defined: Vec<f64> = self.per_class_iou().into_iter().flatten().collect();
        if defined.is_empty() {
            0.0
        } else {
            defined.iter().sum::<f64>() / defined.len() as f64
        }
    }

    pub fn pixel_accuracy(&self) -> f64 {
        let total: usize = self.counts.iter().sum();
        if total == 0 {
            return 0.0;
        }
        let correct: usize = (0..self.classes)
            .map(|c| self.counts[c * self.classes + c])
            .sum();
        correct as f64 / total as f64
    }
}

// ---------------------------------------------------------------------------
// Run logs.

pub const METRICS_HEADER: &str = "iter,miou,loss_seg,loss_cos,loss_adv";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsRow {
    pub iter: usize,
    pub miou: f64,
    pub loss_seg: f64,
    pub loss_cos: f64,
    pub loss_adv: f64,
}

impl MetricsRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{:.6},{:.6},{:.6},{:.6}",
            self.iter, self.miou, self.loss_seg, self.loss_cos, self.loss_adv
        )
    }
}

/// Evaluation history for a run: one summary row plus the per-class IoU
/// breakdown for each evaluation point.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricsLog {
    pub rows: Vec<MetricsRow>,
    pub per_class: Vec<(usize, Vec<Option<f64>>)>,
}

impl MetricsLog {
    pub fn push(&mut self, row: MetricsRow, per_class_iou: Vec<Option<f64>>) {
        self.per_class.push((row.iter, per_class_iou));
        self.rows.push(row);
    }

    pub fn last_miou(&self) -> Option<f64> {
        self.rows.last().map(|r| r.miou)
    }

    pub fn encode_csv(&self) -> String {
        let mut out = String::from(METRICS_HEADER);
        out.push('\n');
        for row in &self.rows {
            out.push_str(&row.to_csv());
            out.push('\n');
        }
        out
    }

    /// One JSON object per evaluation point:
    /// `{"iter":N,"iou":{"1":0.5,"2":null,...}}`.
    pub fn encode_jsonl(&self) -> String {
        let mut out = String::new();
        for (iter, ious) in &self.per_class {
            let mut iou_map = serde_json::Map::new();
            for (i, iou) in ious.iter().enumerate() {
                let value = match iou {
                    Some(v) => serde_json::json!(v),
                    None => serde_json::Value::Null,
                };
                iou_map.insert((i + 1).to_string(), value);
            }
            let obj = serde_json::json!({ "iter": iter, "iou": iou_map });
            out.push_str(&obj.to_string());
            out.push('\n');
        }
        out
    }

    pub fn save(&self, csv_path: &Path, jsonl_path: &Path) -> std::io::Result<()> {
        std::fs::write(csv_path, self.encode_csv())?;
        std::fs::write(jsonl_path, self.encode_jsonl())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map(h: usize, w: usize, data: &[u8]) -> LabelMap {
        LabelMap::new(h, w, data.to_vec()).unwrap()
    }

    #[test]
    fn two_class_strip() {
        let pred = map(1, 4, &[1, 1, 2, 2]);
        let truth = map(1, 4, &[1, 2, 2, 2]);
        let mut cm = ConfusionMatrix::new(2);
        cm.update(&pred, &truth).unwrap();
        assert_eq!(cm.iou(1), Some(0.5));
        assert!((cm.iou(2).unwrap() - 2.0 / 3.0).abs() < 1e-12);
        assert!((cm.mean_iou() - 7.0 / 12.0).abs() < 1e-12);
        assert_eq!(cm.pixel_accuracy(), 0.75);
    }

    #[test]
    fn ignore_pixels_do_not_count() {
        let pred = map(1, 4, &[1, 2, 2, 2]);
        let truth = map(1, 4, &[0, 0, 2, 2]);
        let mut cm = ConfusionMatrix::new(2);
        cm.update(&pred, &truth).unwrap();
        assert_eq!(cm.iou(1), None, "class 1 only appeared under ignore");
        assert_eq!(cm.iou(2), Some(1.0));
        assert_eq!(cm.mean_iou(), 1.0);
    }

    #[test]
    fn absent_classes_are_skipped_by_the_mean() {
        let pred = map(1, 2, &[1, 1]);
        let truth = map(1, 2, &[1, 1]);
        let mut cm = ConfusionMatrix::new(3);
        cm.update(&pred, &truth).unwrap();
        assert_eq!(cm.per_class_iou(), vec![Some(1.0), None, None]);
        assert_eq!(cm.mean_iou(), 1.0);
    }

    #[test]
    fn empty_matrix_reports_zero() {
        let cm = ConfusionMatrix::new(4);
        assert_eq!(cm.mean_iou(), 0.0);
        assert_eq!(cm.pixel_accuracy(), 0.0);
    }

    #[test]
    fn update_rejects_bad_shapes_and_classes() {
        let mut cm = ConfusionMatrix::new(2);
        let a = map(1, 2, &[1, 1]);
        let b = map(2, 1, &[1, 1]);
        assert!(matches!(
            cm.update(&a, &b),
            Err(MetricsError::SizeMismatch { .. })
        ));
        let high = map(1, 2, &[3, 1]);
        assert!(matches!(
            cm.update(&high, &a),
            Err(MetricsError::ClassOutOfRange { class: 3, .. })
        ));
        let zero_pred = map(1, 2, &[0, 1]);
        assert!(cm.update(&zero_pred, &a).is_err());
    }

    #[test]
    fn accumulates_across_updates() {
        let mut cm = ConfusionMatrix::new(2);
        cm.update(&map(1, 2, &[1, 1]), &map(1, 2, &[1, 1])).unwrap();
        cm.update(&map(1, 2, &[2, 1]), &map(1, 2, &[1, 1])).unwrap();
        assert_eq!(cm.count(1, 1), 3);
        assert_eq!(cm.count(1, 2), 1);
    }

    #[test]
    fn csv_layout_is_stable() {
        let mut log = MetricsLog::default();
        log.push(
            MetricsRow {
                iter: 0,
                miou: 0.5,
                loss_seg: 2.0,
                loss_cos: 0.25,
                loss_adv: 0.0,
            },
            vec![Some(0.5), None],
        );
        assert_eq!(
            log.encode_csv(),
            "iter,miou,loss_seg,loss_cos,loss_adv\n0,0.500000,2.000000,0.250000,0.000000\n"
        );
    }

    #[test]
    fn jsonl_has_one_object_per_eval() {
        let mut log = MetricsLog::default();
        log.push(
            MetricsRow {
                iter: 10,
                miou: 0.75,
                loss_seg: 1.0,
                loss_cos: 0.0,
                loss_adv: 0.0,
            },
            vec![Some(0.75), None],
        );
        let line = log.encode_jsonl();
        let parsed: serde_json::Value = serde_json::from_str(line.trim()).unwrap();
        assert_eq!(parsed["iter"], 10);
        assert_eq!(parsed["iou"]["1"], 0.75);
        assert!(parsed["iou"]["2"].is_null());
    }
}
