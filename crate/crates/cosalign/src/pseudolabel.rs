//! Pseudo-label harvesting with per-class confidence thresholds.
//!
//! Thresholds come from the unlabeled-set statistics themselves: for each
//! class, take every pixel the model assigns to that class, sort those
//! confidences descending, and threshold at the midpoint entry (index
//! `n / 2`), capped at [`THRESHOLD_CAP`]. A pixel then earns a pseudo label
//! only when its confidence is *strictly* above its class threshold;
//! everything else stays at the ignore id 0. Classes the model never
//! predicts get the cap, so nothing is harvested for them by accident.

use std::fmt;
use std::path::Path;

use crate::labelmap::{LabelMap, IGNORE};
use crate::real::Real;
use crate::tensor::Tensor;

/// Upper bound on every class threshold.
pub const THRESHOLD_CAP: f64 = 0.9;

#[derive(Debug)]
pub enum ThresholdError {
    Io(std::io::Error),
    Parse { line: usize, message: String },
    /// Loaded file does not cover exactly the expected classes.
    WrongClasses { expected: usize, got: Vec<u8> },
}

impl fmt::Display for ThresholdError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ThresholdError::Io(e) => write!(f, "io error: {e}"),
            ThresholdError::Parse { line, message } => write!(f, "line {line}: {message}"),
            ThresholdError::WrongClasses { expected, got } => {
                write!(f, "expected thresholds for classes 1..={expected}, found {got:?}")
            }
        }
    }
}

impl std::error::Error for ThresholdError {}

impl From<std::io::Error> for ThresholdError {
    fn from(e: std::io::Error) -> Self {
        ThresholdError::Io(e)
    }
}

/// One confidence threshold per real class.
#[derive(Debug, Clone, PartialEq)]
pub struct ThresholdSet {
    /// Index `c` holds the threshold for class id `c + 1`.
    per_class: Vec<f64>,
}

impl ThresholdSet {
    pub fn uniform(classes: usize, value: f64) -> Self {
        ThresholdSet {
            per_class: vec![value; classes],
        }
    }

    pub fn from_values(per_class: Vec<f64>) -> Self {
        assert!(!per_class.is_empty());
        ThresholdSet { per_class }
    }

    pub fn classes(&self) -> usize {
        self.per_class.len()
    }

    pub fn for_class(&self, class: u8) -> f64 {
        assert!(class != IGNORE, "ignore label has no threshold");
        self.per_class[(class - 1) as usize]
    }

    pub fn values(&self) -> &[f64] {
        &self.per_class
    }

    /// Plain-text form, one `tau.<class> = <value>` line per class.
    pub fn encode(&self) -> String {
        let mut out = String::new();
        for (i, v) in self.per_class.iter().enumerate() {
            out.push_str(&format!("tau.{} = {v}\n", i + 1));
        }
        out
    }

    pub fn decode(text: &str, classes: usize) -> Result<Self, ThresholdError> {
        let mut per_class = vec![f64::NAN; classes];
        let mut seen: Vec<u8> = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let trimmed = raw.trim();
            if trimmed.is_empty() {
                continue;
            }
            let (key, value) = trimmed.split_once('=').ok_or(ThresholdError::Parse {
                line,
                message: "expected `tau.<class> = <value>`".into(),
            })?;
            let class: usize = key
                .trim()
                .strip_prefix("tau.")
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| ThresholdError::Parse {
                    line,
                    message: format!("bad key {:?}", key.trim()),
                })?;
            if class == 0 || class > classes {
                return Err(ThresholdError::Parse {
                    line,
                    message: format!("class {class} outside 1..={classes}"),
                });
            }
            let v: f64 = value.trim().parse().map_err(|_| ThresholdError::Parse {
                line,
                message: format!("bad value {:?}", value.trim()),
            })?;
            per_class[class - 1] = v;
            seen.push(class as u8);
        }
        if per_class.iter().any(|v| v.is_nan()) {
            return Err(ThresholdError::WrongClasses {
                expected: classes,
                got: seen,
            });
        }
        Ok(ThresholdSet { per_class })
    }

    pub fn save(&self, path: &Path) -> Result<(), ThresholdError> {
        Ok(std::fs::write(path, self.encode())?)
    }

    pub fn load(path: &Path, classes: usize) -> Result<Self, ThresholdError> {
        Self::decode(&std::fs::read_to_string(path)?, classes)
    }
}

/// Accumulates per-class confidence samples across a set of images.
#[derive(Debug, Clone)]
pub struct ConfidenceCollector {
    per_class: Vec<Vec<f64>>,
}

impl ConfidenceCollector {
    pub fn new(classes: usize) -> Self {
        assert!(classes >= 1);
        ConfidenceCollector {
            per_class: vec![Vec::new(); classes],
        }
    }

    /// Record one pixel's winning class and confidence.
    pub fn observe(&mut self, class: u8, confidence: f64) {
        assert!(class != IGNORE && (class as usize) <= self.per_class.len());
        self.per_class[(class - 1) as usize].push(confidence);
    }

    /// Record every pixel of a `[classes, h, w]` probability map.
    pub fn observe_probs<T: Real>(&mut self, probs: &Tensor<T>) {
        let (winners, confidences) = argmax_with_confidence(probs);
        for (w, c) in winners.data().iter().zip(&confidences) {
            self.observe(*w, *c);
        }
    }

    pub fn samples(&self, class: u8) -> usize {
        self.per_class[(class - 1) as usize].len()
    }

    /// Sort each class's confidences descending and take the midpoint entry,
    /// capped at [`THRESHOLD_CAP`]; classes with no samples get the cap.
    pub fn finish(&self) -> ThresholdSet {
        let per_class = self
            .per_class
            .iter()
            .map(|samples| {
                if samples.is_empty() {
                    return THRESHOLD_CAP;
                }
                let mut sorted = samples.clone();
                sorted.sort_unstable_by(|a, b| b.total_cmp(a));
                sorted[sorted.len() / 2].min(THRESHOLD_CAP)
            })
            .collect();
        ThresholdSet { per_class }
    }
}

/// Per-pixel winning class (as a label map, channel `c` -> class `c + 1`)
/// and its probability. Ties go to the lower class id.
pub fn argmax_with_confidence<T: Real>(probs: &Tensor<T>) -> (LabelMap, Vec<f64>) {
    assert_eq!(probs.rank(), 3, "need [classes, h, w]");
    let (c, h, w) = (probs.shape()[0], probs.shape()[1], probs.shape()[2]);
    let hw = h * w;
    let d = probs.data();
    let mut labels = vec![0u8; hw];
    let mut confs = vec![0.0f64; hw];
    for p in 0..hw {
        let mut best = 0usize;
        let mut best_v = d[p].as_f64();
        for ch in 1..c {
            let v = d[ch * hw + p].as_f64();
            if v > best_v {
                best_v = v;
                best = ch;
            }
        }
        labels[p] = (best + 1) as u8;
        confs[p] = best_v;
    }
    (LabelMap::new(h, w, labels).unwrap(), confs)
}

/// Harvest pseudo labels from a probability map: the winning class where its
/// confidence is strictly above that class's threshold, ignore otherwise.
pub fn harvest<T: Real>(probs: &Tensor<T>, thresholds: &ThresholdSet) -> LabelMap {
    let (winners, confidences) = argmax_with_confidence(probs);
    let data = winners
        .data()
        .iter()
        .zip(&confidences)
        .map(|(&class, &conf)| {
            if conf > thresholds.for_class(class) {
                class
            } else {
                IGNORE
            }
        })
        .collect();
    LabelMap::new(winners.height(), winners.width(), data).unwrap()
}

/// Fill the holes of a pseudo-label map with the model's current argmax:
/// pixels keep their pseudo label where one exists, and fall back to the
/// prediction everywhere else. Used when splitting target features in the
/// second stage.
pub fn augment_with_argmax(pseudo: &LabelMap, argmax: &LabelMap) -> LabelMap {
    assert_eq!(pseudo.height(), argmax.height());
    assert_eq!(pseudo.width(), argmax.width());
    let data = pseudo
        .data()
        .iter()
        .zip(argmax.data())
        .map(|(&p, &a)| if p != IGNORE { p } else { a })
        .collect();
    LabelMap::new(pseudo.height(), pseudo.width(), data).unwrap()
}
