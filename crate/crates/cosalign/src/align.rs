//! Class-wise feature alignment.
//!
//! The pieces, in the order the training loop uses them:
//!
//! 1. [`split_by_class`] groups feature-map pixels by class, keeping only
//!    pixels where the network's own argmax agrees with the reference map
//!    (ground truth, pseudo labels, or the argmax itself for unlabeled
//!    images).
//! 2. [`FeatureDictionary`] is a per-class FIFO of source feature vectors,
//!    stored detached: bank entries never receive gradients and survive
//!    across iterations.
//! 3. [`cosine_matrix`] compares current feature rows against a class
//!    bucket, giving an `[n, m]` similarity matrix differentiable w.r.t.
//!    the rows only.
//! 4. [`selected_l1_sum`] / [`class_wise_cosine_loss`] turn the matrices
//!    into the alignment loss: pairs already more similar than a threshold
//!    are pulled the rest of the way toward 1, everything else is left
//!    alone.

use std::collections::BTreeMap;
use std::collections::VecDeque;
use std::fmt;
use std::rc::Rc;

use crate::labelmap::{LabelMap, IGNORE};
use crate::real::Real;
use crate::tensor::{ops, Tensor, TensorError};

/// Norm floor inside cosine computations, so zero vectors divide cleanly.
pub const NORM_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub enum AlignError {
    ZeroCapacity,
    ZeroDim,
    DimMismatch { expected: usize, got: usize },
    /// The ignore id (0) can never own a dictionary bucket.
    IgnoreClass,
    Tensor(TensorError),
}

impl fmt::Display for AlignError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AlignError::ZeroCapacity => write!(f, "dictionary capacity must be at least 1"),
            AlignError::ZeroDim => write!(f, "feature dimension must be at least 1"),
            AlignError::DimMismatch { expected, got } => {
                write!(f, "feature row has dim {got}, dictionary stores dim {expected}")
            }
            AlignError::IgnoreClass => write!(f, "class 0 is the ignore label"),
            AlignError::Tensor(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for AlignError {}

impl From<TensorError> for AlignError {
    fn from(e: TensorError) -> Self {
        AlignError::Tensor(e)
    }
}

/// Flat spatial indices of each class's agreed pixels.
///
/// A pixel at `y * w + x` lands in class `c`'s bucket iff
/// `pred == reference == c` and `c` is a real class in `1..=classes`.
/// Passing the same map twice splits purely by that map. Index lists are in
/// ascending scan order, so downstream math is order-deterministic.
pub fn split_by_class(
    pred: &LabelMap,
    reference: &LabelMap,
    classes: usize,
) -> BTreeMap<u8, Vec<usize>> {
    assert_eq!(pred.height(), reference.height(), "split: height mismatch");
    assert_eq!(pred.width(), reference.width(), "split: width mismatch");
    let mut out: BTreeMap<u8, Vec<usize>> = BTreeMap::new();
    for (i, (&p, &r)) in pred.data().iter().zip(reference.data()).enumerate() {
        if p == r && p != IGNORE && (p as usize) <= classes {
            out.entry(p).or_default().push(i);
        }
    }
    out
}

/// Copy the rows of an `[n, k]` tensor into plain vectors (detached by
/// construction — the copies have no connection to the graph).
pub fn tensor_rows<T: Real>(t: &Tensor<T>) -> Vec<Vec<T>> {
    assert_eq!(t.rank(), 2, "tensor_rows needs [n, k]");
    let k = t.shape()[1];
    t.data().chunks_exact(k).map(|c| c.to_vec()).collect()
}

/// Per-class FIFO buffer of source feature vectors.
///
/// Every class id in `1..=255` gets an independent bucket of up to
/// `capacity` rows; pushing past capacity drops the oldest rows first.
/// Stored rows are plain copies: training steps that later mutate the
/// network cannot reach back into the dictionary.
#[derive(Debug, Clone)]
pub struct FeatureDictionary<T: Real> {
    capacity: usize,
    dim: usize,
    buckets: BTreeMap<u8, VecDeque<Vec<T>>>,
}

impl<T: Real> FeatureDictionary<T> {
    pub fn new(capacity: usize, dim: usize) -> Result<Self, AlignError> {
        if capacity == 0 {
            return Err(AlignError::ZeroCapacity);
        }
        if dim == 0 {
            return Err(AlignError::ZeroDim);
        }
        Ok(FeatureDictionary {
            capacity,
            dim,
            buckets: BTreeMap::new(),
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Append rows to a class bucket, evicting oldest-first past capacity.
    /// Returns how many rows the bucket holds afterwards.
    pub fn enqueue(
        &mut self,
        class: u8,
        rows: impl IntoIterator<Item = Vec<T>>,
    ) -> Result<usize, AlignError> {
        if class == IGNORE {
            return Err(AlignError::IgnoreClass);
        }
        let bucket = self.buckets.entry(class).or_default();
        for row in rows {
            if row.len() != self.dim {
                return Err(AlignError::DimMismatch {
                    expected: self.dim,
                    got: row.len(),
                });
            }
            bucket.push_back(row);
            if bucket.len() > self.capacity {
                bucket.pop_front();
            }
        }
        Ok(bucket.len())
    }

    /// Rows of one class, oldest first. Empty when the class was never seen.
    pub fn rows(&self, class: u8) -> Vec<&[T]> {
        self.buckets
            .get(&class)
            .map(|b| b.iter().map(|r| r.as_slice()).collect())
            .unwrap_or_default()
    }

    pub fn len(&self, class: u8) -> usize {
        self.buckets.get(&class).map_or(0, |b| b.len())
    }

    pub fn total_len(&self) -> usize {
        self.buckets.values().map(|b| b.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.total_len() == 0
    }

    /// Classes with at least one stored row, ascending.
    pub fn classes(&self) -> Vec<u8> {
        self.buckets
            .iter()
            .filter(|(_, b)| !b.is_empty())
            .map(|(&c, _)| c)
            .collect()
    }

    pub fn clear(&mut self) {
        self.buckets.clear();
    }

    /// `(class, slot, row)` triples in serialization order: classes
    /// ascending, slots oldest-first.
    pub fn entries(&self) -> impl Iterator<Item = (u8, usize, &[T])> {
        self.buckets.iter().flat_map(|(&c, b)| {
            b.iter().enumerate().map(move |(s, r)| (c, s, r.as_slice()))
        })
    }
}

/// Cosine similarities between `n` live feature rows and `m` bank rows.
///
/// `rows` is `[n, k]` and differentiable; `bank` rows are plain slices and
/// receive no gradient. Norms are floored at [`NORM_FLOOR`], and entries are
/// computed with f64 accumulation in a fixed order. Result is `[n, m]`.
pub fn cosine_matrix<T: Real>(
    rows: &Tensor<T>,
    bank: &[&[T]],
) -> Result<Tensor<T>, AlignError> {
    if rows.rank() != 2 {
        return Err(TensorError::RankMismatch {
            op: "cosine_matrix",
            expected: 2,
            got: rows.shape().to_vec(),
        }
        .into());
    }
    let (n, k) = (rows.shape()[0], rows.shape()[1]);
    let m = bank.len();
    for b in bank {
        if b.len() != k {
            return Err(AlignError::DimMismatch {
                expected: k,
                got: b.len(),
            });
        }
    }

    // Flatten the bank once; the backward closure shares it.
    let mut bank_flat = Vec::with_capacity(m * k);
    for b in bank {
        bank_flat.extend(b.iter().map(|v| v.as_f64()));
    }
    let bank_flat = Rc::new(bank_flat);

    let mut bank_norms = Vec::with_capacity(m);
    for j in 0..m {
        let mut s = 0.0f64;
        for ch in 0..k {
            let v = bank_flat[j * k + ch];
            s += v * v;
        }
        bank_norms.push(s.sqrt().max(NORM_FLOOR));
    }
    let bank_norms = Rc::new(bank_norms);

    let mut row_norms_raw = Vec::with_capacity(n);
    {
        let d = rows.data();
        for i in 0..n {
            let mut s = 0.0f64;
            for ch in 0..k {
                let v = d[i * k + ch].as_f64();
                s += v * v;
            }
            row_norms_raw.push(s.sqrt());
        }
    }

    let mut cos = vec![0.0f64; n * m];
    {
        let d = rows.data();
        for i in 0..n {
            let nt = row_norms_raw[i].max(NORM_FLOOR);
            for j in 0..m {
                let mut dot = 0.0f64;
                for ch in 0..k {
                    dot += d[i * k + ch].as_f64() * bank_flat[j * k + ch];
                }
                cos[i * m + j] = dot / (nt * bank_norms[j]);
            }
        }
    }
    let out: Vec<T> = cos.iter().map(|&v| T::from_f64(v)).collect();
    let cos = Rc::new(cos);

    let prows = rows.clone();
    Ok(Tensor::from_op(
        vec![n, m],
        out,
        vec![rows.clone()],
        move |g| {
            let d = prows.data();
            prows.with_grad_mut(|buf| {
                let mut acc = vec![0.0f64; k];
                for i in 0..n {
                    let raw = {
                        let mut s = 0.0f64;
                        for ch in 0..k {
                            let v = d[i * k + ch].as_f64();
                            s += v * v;
                        }
                        s.sqrt()
                    };
                    let nt = raw.max(NORM_FLOOR);
                    acc.iter_mut().for_each(|a| *a = 0.0);
                    let mut along_row = 0.0f64;
                    for j in 0..m {
                        let gv = g[i * m + j].as_f64();
                        if gv == 0.0 {
                            continue;
                        }
                        let coef = gv / (nt * bank_norms[j]);
                        for ch in 0..k {
                            acc[ch] += coef * bank_flat[j * k + ch];
                        }
                        along_row += gv * cos[i * m + j];
                    }
                    // d cos / d t has a second term only while the norm is
                    // live (above the floor, where the norm is constant).
                    if raw > NORM_FLOOR {
                        let inv_sq = 1.0 / (nt * nt);
                        for ch in 0..k {
                            acc[ch] -= along_row * d[i * k + ch].as_f64() * inv_sq;
                        }
                    }
                    for ch in 0..k {
                        buf[i * k + ch] = buf[i * k + ch] + T::from_f64(acc[ch]);
                    }
                }
            });
        },
    ))
}

/// Sum of `|v - 1|` over the entries of `values` strictly above `threshold`,
/// as a `[1]` tensor, plus how many entries were selected.
///
/// Selection happens on the forward values and is frozen: gradients flow
/// only through the selected entries (as `sign(v - 1)`, zero exactly at 1).
pub fn selected_l1_sum<T: Real>(
    values: &Tensor<T>,
    threshold: f64,
) -> (Tensor<T>, usize) {
    let selected: Vec<bool> = values
        .data()
        .iter()
        .map(|v| v.as_f64() > threshold)
        .collect();
    let count = selected.iter().filter(|&&s| s).count();
    let mut total = 0.0f64;
    {
        let d = values.data();
        for (i, &sel) in selected.iter().enumerate() {
            if sel {
                total += (d[i].as_f64() - 1.0).abs();
            }
        }
    }
    let pv = values.clone();
    let loss = Tensor::from_op(
        vec![1],
        vec![T::from_f64(total)],
        vec![values.clone()],
        move |g| {
            let g0 = g[0].as_f64();
            let d = pv.data();
            pv.with_grad_mut(|buf| {
                for (i, &sel) in selected.iter().enumerate() {
                    if sel {
                        let v = d[i].as_f64();
                        let sign = if v > 1.0 {
                            1.0
                        } else if v < 1.0 {
                            -1.0
                        } else {
                            0.0
                        };
                        buf[i] = buf[i] + T::from_f64(g0 * sign);
                    }
                }
            });
        },
    );
    (loss, count)
}

/// Per-iteration bookkeeping from the class-wise loss, used by training
/// stats and the dictionary-unmatching regression tests.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AlignmentOutcome {
    /// Classes that had pixels and a non-empty dictionary bucket.
    pub matched: Vec<u8>,
    /// Classes that had pixels but nothing in the dictionary to compare to.
    pub skipped: Vec<u8>,
    /// Similarity entries above threshold, across all matched classes.
    pub selected_pairs: usize,
}

/// The class-wise alignment loss for one image.
///
/// For every class in `split`, gathers that class's feature rows from the
/// `[k, h, w]` map, compares them against the class's dictionary bucket,
/// and sums `|cos - 1|` over pairs above `threshold`. The total is scaled
/// by `1 / num_classes` — by the number of real classes in the task, not
/// the number of classes that happened to match.
pub fn class_wise_cosine_loss<T: Real>(
    feats: &Tensor<T>,
    split: &BTreeMap<u8, Vec<usize>>,
    dict: &FeatureDictionary<T>,
    threshold: f64,
    num_classes: usize,
) -> Result<(Tensor<T>, AlignmentOutcome), AlignError> {
    assert!(num_classes > 0);
    let mut outcome = AlignmentOutcome::default();
    let mut per_class: Vec<Tensor<T>> = Vec::new();
    for (&class, indices) in split {
        if indices.is_empty() {
            continue;
        }
        let bank = dict.rows(class);
        if bank.is_empty() {
            outcome.skipped.push(class);
            continue;
        }
        let rows = ops::gather_pixels(feats, indices)?;
        let sims = cosine_matrix(&rows, &bank)?;
        let (class_loss, selected) = selected_l1_sum(&sims, threshold);
        outcome.selected_pairs += selected;
        outcome.matched.push(class);
        per_class.push(class_loss);
    }
    let loss = match per_class.split_first() {
        None => Tensor::scalar(T::zero()),
        Some((first, rest)) => {
            let mut acc = first.clone();
            for l in rest {
                acc = ops::add(&acc, l)?;
            }
            ops::scale(&acc, T::from_f64(1.0 / num_classes as f64))
        }
    };
    Ok((loss, outcome))
}

/// Multi-layer mode raises the similarity threshold by this much per tap,
/// moving from the deepest feature map toward shallower ones: shallow
/// features carry less semantics, so only nearer pairs count as alike.
pub const TAP_THRESHOLD_STEP: f64 = 0.1;

/// Threshold for tap `i`, where tap 0 (the deepest) uses the configured
/// baseline: `baseline`, `baseline + 0.1`, `baseline + 0.2`, ...
pub fn tap_threshold(baseline: f64, tap: usize) -> f64 {
    baseline + TAP_THRESHOLD_STEP * tap as f64
}

/// Class-wise alignment across a stack of feature taps (deepest first).
///
/// Each tap resizes the governing map to its own grid, splits the pixels by
/// class, and pays [`class_wise_cosine_loss`] against its own dictionary at
/// [`tap_threshold`]`(baseline, i)`. The per-tap losses — each already
/// carrying the `1/classes` factor — are averaged, so the total is scaled
/// by `1 / (taps * classes)`.
///
/// Matched/skipped bookkeeping reports the deepest tap; selected pairs sum
/// across taps. A single-tap stack is exactly `class_wise_cosine_loss` at
/// the baseline threshold.
pub fn multi_tap_cosine_loss<T: Real>(
    taps: &[Tensor<T>],
    map: &LabelMap,
    dicts: &[FeatureDictionary<T>],
    baseline: f64,
    classes: usize,
) -> Result<(Tensor<T>, AlignmentOutcome), AlignError> {
    assert_eq!(taps.len(), dicts.len(), "one dictionary per tap");
    assert!(!taps.is_empty(), "need at least one tap");
    let mut total = Tensor::scalar(T::zero());
    let mut outcome = AlignmentOutcome::default();
    for (i, tap) in taps.iter().enumerate() {
        let shape = tap.shape();
        let resized = map.nearest_resize(shape[1], shape[2]);
        let split = split_by_class(&resized, &resized, classes);
        let (loss, tap_outcome) =
            class_wise_cosine_loss(tap, &split, &dicts[i], tap_threshold(baseline, i), classes)?;
        total = ops::add(&total, &loss)?;
        if i == 0 {
            outcome.matched = tap_outcome.matched;
            outcome.skipped = tap_outcome.skipped;
        }
        outcome.selected_pairs += tap_outcome.selected_pairs;
    }
    if taps.len() > 1 {
        total = ops::scale(&total, T::from_f64(1.0 / taps.len() as f64));
    }
    Ok((total, outcome))
}

/// Class-agnostic variant for the "no split" ablation: every listed pixel is
/// compared against every provided source row in one big matrix, with no
/// per-class bookkeeping and no `1/num_classes` scaling.
pub fn unsplit_cosine_loss<T: Real>(
    feats: &Tensor<T>,
    indices: &[usize],
    source_rows: &[&[T]],
    threshold: f64,
) -> Result<(Tensor<T>, usize), AlignError> {
    if indices.is_empty() || source_rows.is_empty() {
        return Ok((Tensor::scalar(T::zero()), 0));
    }
    let rows = ops::gather_pixels(feats, indices)?;
    let sims = cosine_matrix(&rows, source_rows)?;
    Ok(selected_l1_sum(&sims, threshold))
}
