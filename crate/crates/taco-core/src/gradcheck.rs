//! Central finite-difference gradient checking.
//!
//! The numeric side never touches the tape: callers hand over a plain
//! forward closure evaluated at perturbed inputs, so agreement with
//! [`crate::autodiff::Tape::backward`] is evidence, not circularity.

/// Tolerances for comparing analytic against numeric gradients.
#[derive(Debug, Clone)]
pub struct GradCheckConfig {
    /// Central-difference step.
    pub epsilon: f64,
    /// Maximum allowed `|a - n| / max(|a|, |n|, floor)`.
    pub rel_tolerance: f64,
    /// Denominator floor; below this both gradients count as zero-ish.
    pub floor: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            epsilon: 1e-5,
            rel_tolerance: 1e-4,
            floor: 1e-6,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub checked: usize,
    pub pass: bool,
}

/// Central differences of `f` at `x`, one coordinate at a time.
pub fn central_diff<F: FnMut(&[f64]) -> f64>(x: &[f64], mut f: F, epsilon: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    let mut out = vec![0.0; x.len()];
    for i in 0..x.len() {
        let keep = probe[i];
        probe[i] = keep + epsilon;
        let hi = f(&probe);
        probe[i] = keep - epsilon;
        let lo = f(&probe);
        probe[i] = keep;
        out[i] = (hi - lo) / (2.0 * epsilon);
    }
    out
}

pub fn compare(analytic: &[f64], numeric: &[f64], cfg: &GradCheckConfig) -> GradCheckReport {
    assert_eq!(analytic.len(), numeric.len(), "gradient length mismatch");
    let mut max_rel_err = 0.0;
    let mut worst_index = 0;
    for (i, (&a, &n)) in analytic.iter().zip(numeric).enumerate() {
        let denom = a.abs().max(n.abs()).max(cfg.floor);
        let err = (a - n).abs() / denom;
        if err > max_rel_err {
            max_rel_err = err;
            worst_index = i;
        }
    }
    GradCheckReport {
        max_rel_err,
        worst_index,
        checked: analytic.len(),
        pass: max_rel_err < cfg.rel_tolerance,
    }
}

/// Convenience wrapper: numeric gradient of `f` at `x` against `analytic`.
pub fn check<F: FnMut(&[f64]) -> f64>(
    x: &[f64],
    f: F,
    analytic: &[f64],
    cfg: &GradCheckConfig,
) -> GradCheckReport {
    let numeric = central_diff(x, f, cfg.epsilon);
    compare(analytic, &numeric, cfg)
}
