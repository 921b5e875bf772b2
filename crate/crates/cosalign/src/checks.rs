//! Ready-made gradient-verification batteries: one finite-difference check
//! per differentiable primitive, plus the complete stage-1 and stage-2
//! training objectives probed end to end through the real network,
//! dictionary, and alignment losses.
//!
//! Everything here instantiates `f64`. Central differences in `f32` carry
//! more rounding noise than the tolerances being enforced, so a failure
//! there would say nothing about the gradients.

use std::cell::RefCell;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::align::{
    class_wise_cosine_loss, cosine_matrix, selected_l1_sum, split_by_class, FeatureDictionary,
};
use crate::config::RunConfig;
use crate::imageio::rgb_to_tensor;
use crate::labelmap::LabelMap;
use crate::synthdata::{render_scene, Domain, SceneParams, ShiftParams};
use crate::tensor::gradcheck::{grad_check, grad_check_sampled, GradCheckReport};
use crate::tensor::{ops, Tensor};
use crate::trainer::{Sample, TargetSample, TrainData, TrainError, Trainer};

/// Tolerance for the primitive-op battery.
pub const PRIMITIVE_TOLERANCE: f64 = 1e-3;
/// Central-difference step for the primitive battery.
pub const STEP: f64 = 1e-5;
/// Step for the end-to-end objective batteries. The objective is only
/// piecewise smooth (argmax splits and threshold selections jump), so the
/// probe step is kept small enough that no component's perturbation
/// crosses a selection boundary, while f64 keeps the difference quotient
/// far above rounding noise.
pub const OBJECTIVE_STEP: f64 = 1e-6;

fn filled(shape: &[usize], seed: u64, lo: f64, hi: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor::parameter(shape, data).unwrap()
}

/// Values bounded away from zero, so activations with a corner there
/// (the relu family) are never probed across it.
fn filled_off_zero(shape: &[usize], seed: u64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data: Vec<f64> = (0..n)
        .map(|_| {
            let mag = rng.gen_range(0.2..1.5);
            if rng.gen_bool(0.5) {
                mag
            } else {
                -mag
            }
        })
        .collect();
    Tensor::parameter(shape, data).unwrap()
}

/// Collapse an arbitrary output to a scalar through fixed weights, so every
/// output component reaches the objective with a distinct coefficient.
fn weighted(out: &Tensor<f64>, seed: u64) -> Tensor<f64> {
    let n = out.numel();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let coeffs: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let w = Tensor::new(out.shape(), coeffs).unwrap();
    ops::sum(&ops::mul(out, &w).unwrap())
}

/// One finite-difference check per differentiable primitive, on small
/// fixed-seed fixtures.
pub fn primitive_gradient_reports() -> Vec<GradCheckReport> {
    let tol = PRIMITIVE_TOLERANCE;
    let mut out = Vec::new();

    out.push(grad_check(
        "add",
        |i| weighted(&ops::add(&i[0], &i[1]).unwrap(), 90),
        &[filled(&[2, 3], 1, -1.0, 1.0), filled(&[2, 3], 2, -1.0, 1.0)],
        tol,
        STEP,
    ));
    out.push(grad_check(
        "mul",
        |i| weighted(&ops::mul(&i[0], &i[1]).unwrap(), 91),
        &[filled(&[2, 3], 3, -1.0, 1.0), filled(&[2, 3], 4, -1.0, 1.0)],
        tol,
        STEP,
    ));
    out.push(grad_check(
        "affine",
        |i| weighted(&ops::affine(&i[0], 1.3, -0.7), 92),
        &[filled(&[5], 5, -1.0, 1.0)],
        tol,
        STEP,
    ));
    out.push(grad_check(
        "scale",
        |i| weighted(&ops::scale(&i[0], -2.2), 93),
        &[filled(&[4], 6, -1.0, 1.0)],
        tol,
        STEP,
    ));
    out.push(grad_check(
        "sum",
        |i| ops::sum(&i[0]),
        &[filled(&[7], 7, -1.0, 1.0)],
        tol,
        STEP,
    ));
    out.push(grad_check(
        "relu",
        |i| weighted(&ops::relu(&i[0]), 94),
        &[filled_off_zero(&[3, 4], 8)],
        tol,
        STEP,
    ));
    out.push(grad_check(
        "leaky_relu",
        |i| weighted(&ops::leaky_relu(&i[0], 0.2), 95),
        &[filled_off_zero(&[3, 4], 9)],
        tol,
        STEP,
    ));
    out.push(grad_check(
        "sigmoid",
        |i| weighted(&ops::sigmoid(&i[0]), 96),
        &[filled(&[2, 5], 10, -2.0, 2.0)],
        tol,
        STEP,
    ));
    out.push(grad_check(
        "neg_log_sum",
        |i| ops::neg_log_sum(&i[0], 1e-8),
        &[filled(&[6], 11, 0.05, 0.95)],
        tol,
        STEP,
    ));
    out.push(grad_check(
        "conv2d-3x3-s1",
        |i| weighted(&ops::conv2d(&i[0], &i[1], &i[2], 1, 1).unwrap(), 97),
        &[
            filled(&[2, 5, 5], 12, -1.0, 1.0),
            filled(&[3, 2, 3, 3], 13, -0.5, 0.5),
            filled(&[3], 14, -0.3, 0.3),
        ],
        tol,
        STEP,
    ));
    out.push(grad_check(
        "conv2d-4x4-s2",
        |i| weighted(&ops::conv2d(&i[0], &i[1], &i[2], 2, 1).unwrap(), 98),
        &[
            filled(&[2, 6, 6], 15, -1.0, 1.0),
            filled(&[3, 2, 4, 4], 16, -0.5, 0.5),
            filled(&[3], 17, -0.3, 0.3),
        ],
        tol,
        STEP,
    ));
    out.push(grad_check(
        "bilinear-up",
        |i| weighted(&ops::bilinear_resize(&i[0], 7, 5).unwrap(), 99),
        &[filled(&[2, 4, 4], 18, -1.0, 1.0)],
        tol,
        STEP,
    ));
    out.push(grad_check(
        "bilinear-down",
        |i| weighted(&ops::bilinear_resize(&i[0], 3, 3).unwrap(), 100),
        &[filled(&[2, 5, 7], 19, -1.0, 1.0)],
        tol,
        STEP,
    ));
    out.push(grad_check(
        "softmax-channels",
        |i| weighted(&ops::softmax_channels(&i[0]).unwrap(), 101),
        &[filled(&[3, 2, 2], 20, -2.0, 2.0)],
        tol,
        STEP,
    ));
    let ce_labels = LabelMap::new(2, 3, vec![1, 2, 0, 3, 1, 2]).unwrap();
    out.push(grad_check(
        "softmax-cross-entropy",
        move |i| ops::softmax_cross_entropy(&i[0], &ce_labels).unwrap(),
        &[filled(&[3, 2, 3], 21, -2.0, 2.0)],
        tol,
        STEP,
    ));
    out.push(grad_check(
        "gather-pixels",
        |i| weighted(&ops::gather_pixels(&i[0], &[0, 4, 7, 8]).unwrap(), 102),
        &[filled(&[4, 3, 3], 22, -1.0, 1.0)],
        tol,
        STEP,
    ));

    // Alignment kernels. The bank rows are constants by design; gradients
    // are probed through the live rows only.
    let bank_t = filled(&[3, 4], 23, 0.1, 1.0);
    let bank_rows: Vec<Vec<f64>> = (0..3)
        .map(|r| bank_t.to_vec()[r * 4..(r + 1) * 4].to_vec())
        .collect();
    {
        let bank = bank_rows.clone();
        out.push(grad_check(
            "cosine-matrix",
            move |i| {
                let refs: Vec<&[f64]> = bank.iter().map(|r| r.as_slice()).collect();
                weighted(&cosine_matrix(&i[0], &refs).unwrap(), 103)
            },
            &[filled(&[5, 4], 24, 0.1, 1.0)],
            tol,
            STEP,
        ));
    }
    {
        let bank = bank_rows.clone();
        out.push(grad_check(
            "selected-l1-sum",
            move |i| {
                let refs: Vec<&[f64]> = bank.iter().map(|r| r.as_slice()).collect();
                let m = cosine_matrix(&i[0], &refs).unwrap();
                selected_l1_sum(&m, 0.35).0
            },
            &[filled(&[5, 4], 25, 0.1, 1.0)],
            tol,
            STEP,
        ));
    }
    {
        // Class 3 is present in the map but absent from the dictionary, so
        // the skip path is part of the checked graph.
        let map = LabelMap::new(3, 3, vec![1, 1, 2, 2, 3, 3, 1, 2, 0]).unwrap();
        let split = split_by_class(&map, &map, 3);
        let mut dict = FeatureDictionary::<f64>::new(8, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(26);
        for class in [1u8, 2u8] {
            let rows: Vec<Vec<f64>> = (0..3)
                .map(|_| (0..3).map(|_| rng.gen_range(0.1..1.0)).collect())
                .collect();
            dict.enqueue(class, rows).unwrap();
        }
        out.push(grad_check(
            "class-wise-cosine-loss",
            move |i| class_wise_cosine_loss(&i[0], &split, &dict, 0.3, 3).unwrap().0,
            &[filled(&[3, 3, 3], 27, 0.1, 1.0)],
            tol,
            STEP,
        ));
    }
    out
}

/// Build a one-scene-per-domain 32x32 dataset directly in memory. Stage 2
/// attaches pseudo labels derived from the target ground truth with a third
/// of the pixels knocked out to the ignore symbol, so both the masked
/// cross-entropy and the augmentation path get exercised.
fn tiny_objective_data(stage: u8) -> TrainData<f64> {
    let params = SceneParams {
        classes: 5,
        height: 32,
        width: 32,
    };
    let shift = ShiftParams::default();
    let src = render_scene(&params, &shift, 11, Domain::Source, None).unwrap();
    let tgt = render_scene(&params, &shift, 23, Domain::Target, None).unwrap();

    let pseudo = (stage == 2).then(|| {
        let data: Vec<u8> = tgt
            .labels
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| if i % 3 == 0 { 0 } else { v })
            .collect();
        LabelMap::new(32, 32, data).unwrap()
    });

    TrainData {
        source: vec![Sample {
            seed: 11,
            image: rgb_to_tensor(src.width, src.height, &src.rgb),
            labels: src.labels,
        }],
        target: vec![TargetSample {
            seed: 23,
            image: rgb_to_tensor(tgt.width, tgt.height, &tgt.rgb),
            pseudo,
        }],
        eval: Vec::new(),
    }
}

/// Gradient-check the complete stage-1 or stage-2 objective with respect to
/// the network parameters, at the state reached by `warmup_steps` real
/// optimization steps (which also populate the feature dictionary).
///
/// `stride` probes every `stride`-th component of each parameter tensor;
/// 1 probes all of them. The alignment loss is required to have selected
/// feature pairs, so an inert cosine path cannot masquerade as a pass.
pub fn objective_report(
    stage: u8,
    warmup_steps: usize,
    tolerance: f64,
    stride: usize,
) -> Result<GradCheckReport, TrainError> {
    let mut cfg = RunConfig::default();
    cfg.stage = stage;
    cfg.classes = 5;
    cfg.feature_dim = 8;
    cfg.dict_size = 64;
    cfg.t_cos = 0.2;
    cfg.lambda_cos = 0.5;
    cfg.lr = 0.01;
    cfg.max_iter = 100;
    cfg.seed = 40 + stage as u64;

    let data = tiny_objective_data(stage);
    let mut trainer = Trainer::new(cfg)?;
    for _ in 0..warmup_steps {
        trainer.step(&data)?;
    }
    let (_, stats) = trainer.objective(&data)?;
    assert!(
        stats.outcome.selected_pairs > 0,
        "stage-{stage} objective check would be vacuous: no feature pairs selected"
    );

    let params: Vec<Tensor<f64>> = trainer
        .net
        .parameters()
        .into_iter()
        .map(|(_, t)| t)
        .collect();
    let cell = RefCell::new(trainer);
    let name = format!("stage{stage}-objective");
    Ok(grad_check_sampled(
        &name,
        |_| cell.borrow_mut().objective(&data).unwrap().0,
        &params,
        tolerance,
        OBJECTIVE_STEP,
        stride,
    ))
}

/// The two full-objective checks (stage 1 then stage 2) at the standard
/// tolerance.
pub fn objective_gradient_reports(
    tolerance: f64,
    stride: usize,
) -> Result<Vec<GradCheckReport>, TrainError> {
    Ok(vec![
        objective_report(1, 2, tolerance, stride)?,
        objective_report(2, 2, tolerance, stride)?,
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn primitive_battery_passes() {
        for report in primitive_gradient_reports() {
            assert!(report.passed(), "{report}");
            assert!(report.checked > 0, "{report}");
        }
    }

    #[test]
    fn battery_covers_each_primitive_once() {
        let reports = primitive_gradient_reports();
        let mut names: Vec<&str> = reports.iter().map(|r| r.name.as_str()).collect();
        let before = names.len();
        names.dedup();
        assert_eq!(names.len(), before);
        assert!(before >= 18);
    }

    #[test]
    fn stage1_objective_gradients_match() {
        let report = objective_report(1, 2, 1e-3, 29).unwrap();
        assert!(report.passed(), "{report}");
    }

    #[test]
    fn stage2_objective_gradients_match() {
        let report = objective_report(2, 2, 1e-3, 29).unwrap();
        assert!(report.passed(), "{report}");
    }
}
