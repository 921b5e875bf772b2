//! Central-difference verification of analytic gradients.
//!
//! Meant to be instantiated with `f64`: with f32 the difference quotient
//! itself carries more rounding noise than the tolerances used anywhere in
//! this crate, so a failure there would say nothing about the gradients.

use std::fmt;

use crate::real::Real;
use crate::tensor::Tensor;

/// Relative-error floor: components where both sides are smaller than this
/// are compared against it instead of against zero.
pub const DENOM_FLOOR: f64 = 1e-8;

/// Per-evaluation relative rounding error assumed for the objective. The
/// difference quotient cannot resolve anything finer than roughly
/// `NOISE_EPS * |f| / step` in absolute terms — cancellation between two
/// nearly equal function values — so differences below that floor count as
/// agreement rather than error.
pub const NOISE_EPS: f64 = 1e-14;

/// Outcome of one [`grad_check`] run.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub name: String,
    pub tolerance: f64,
    pub step: f64,
    /// Total number of scalar components compared.
    pub checked: usize,
    /// Components sitting exactly on a kink of a piecewise-smooth
    /// objective, accepted via the one-sided slope interval instead of the
    /// central difference.
    pub kinked: usize,
    pub worst_rel_err: f64,
    /// Which input tensor and which component inside it was worst.
    pub worst_input: usize,
    pub worst_component: usize,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.worst_rel_err <= self.tolerance
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "gradcheck {}: {} components ({} on kinks), worst rel err {:.3e} at input {}[{}] \
             (analytic {:.6e}, numeric {:.6e}) -> {}",
            self.name,
            self.checked,
            self.kinked,
            self.worst_rel_err,
            self.worst_input,
            self.worst_component,
            self.worst_analytic,
            self.worst_numeric,
            if self.passed() { "pass" } else { "FAIL" },
        )
    }
}

/// Compare the analytic gradient of `f` against central differences.
///
/// `f` must build a fresh graph from `inputs` on every call and return a
/// single-element tensor. Every component of every input is perturbed by
/// `±step`; the relative error of a component is
/// `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`.
///
/// Inputs that receive no gradient at all are compared against zero, so an
/// accidental detach shows up as a failure rather than a skip.
pub fn grad_check<T: Real>(
    name: &str,
    f: impl Fn(&[Tensor<T>]) -> Tensor<T>,
    inputs: &[Tensor<T>],
    tolerance: f64,
    step: f64,
) -> GradCheckReport {
    grad_check_sampled(name, f, inputs, tolerance, step, 1)
}

/// [`grad_check`] restricted to components whose flat index is congruent
/// to the input's position modulo `stride`, for objectives too expensive
/// to probe exhaustively. A prime stride avoids aliasing with small kernel
/// extents; `stride = 1` probes every component.
pub fn grad_check_sampled<T: Real>(
    name: &str,
    f: impl Fn(&[Tensor<T>]) -> Tensor<T>,
    inputs: &[Tensor<T>],
    tolerance: f64,
    step: f64,
    stride: usize,
) -> GradCheckReport {
    let stride = stride.max(1);
    for t in inputs {
        t.zero_grad();
    }
    let loss = f(inputs);
    assert_eq!(
        loss.numel(),
        1,
        "gradcheck {name}: objective must be a single element, got {:?}",
        loss.shape()
    );
    loss.backward().expect("backward on scalar objective");

    let analytic: Vec<Vec<f64>> = inputs
        .iter()
        .map(|t| match t.grad() {
            Some(g) => g.iter().map(|v| v.as_f64()).collect(),
            None => vec![0.0; t.numel()],
        })
        .collect();

    let base = loss.value().as_f64();

    let mut report = GradCheckReport {
        name: name.to_string(),
        tolerance,
        step,
        checked: 0,
        kinked: 0,
        worst_rel_err: 0.0,
        worst_input: 0,
        worst_component: 0,
        worst_analytic: 0.0,
        worst_numeric: 0.0,
    };

    for (ti, t) in inputs.iter().enumerate() {
        for j in ((ti % stride)..t.numel()).step_by(stride) {
            let orig = t.data()[j];
            t.data_mut()[j] = orig + T::from_f64(step);
            let up = f(inputs).value().as_f64();
            t.data_mut()[j] = orig - T::from_f64(step);
            let down = f(inputs).value().as_f64();
            t.data_mut()[j] = orig;

            let numeric = (up - down) / (2.0 * step);
            let a = analytic[ti][j];
            let denom = a.abs().max(numeric.abs()).max(DENOM_FLOOR);
            // Differences below the cancellation noise of the quotient are
            // indistinguishable from exact agreement, no matter how small
            // the gradient they attach to.
            let atol = NOISE_EPS * (1.0 + base.abs()) / step;
            let diff = (a - numeric).abs();
            let mut rel = if diff <= atol { 0.0 } else { diff / denom };

            // Piecewise-smooth objectives can put this exact point on (or
            // within a step of) a kink — a relu whose pre-activation is
            // exactly zero, a selection boundary the perturbation crosses —
            // where the central difference averages two different slopes
            // and no single number is "the" derivative. Any analytic value
            // inside the one-sided slope interval is a valid subgradient
            // and is accepted. Smooth components are unaffected: their
            // one-sided slopes agree, the interval collapses to the central
            // value, and a wrong gradient still fails.
            if rel > tolerance {
                let right = (up - base) / step;
                let left = (base - down) / step;
                let margin = tolerance * right.abs().max(left.abs()).max(DENOM_FLOOR);
                if a >= right.min(left) - margin && a <= right.max(left) + margin {
                    report.kinked += 1;
                    rel = 0.0;
                }
            }

            report.checked += 1;
            if rel > report.worst_rel_err {
                report.worst_rel_err = rel;
                report.worst_input = ti;
                report.worst_component = j;
                report.worst_analytic = a;
                report.worst_numeric = numeric;
            }
        }
    }
    report
}
