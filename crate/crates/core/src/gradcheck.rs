//! Central finite-difference gradient verification. Lives in the library so
//! both module tests and the acceptance suite can drive it, but it is a
//! verification oracle: nothing in the training path calls it.

/// Result of a finite-difference sweep.
#[derive(Clone, Copy, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub checked: usize,
}

/// Compare `analytic` against central differences of `f` at `x0`.
///
/// `stride` checks every `stride`-th coordinate (1 = all). The relative
/// error per coordinate is `|a - fd| / max(|a|, |fd|, floor)`; coordinates
/// where both magnitudes fall below `floor` are counted but contribute zero
/// error (both sides agree the gradient vanishes).
pub fn central_diff_check<F>(
    mut f: F,
    x0: &[f64],
    analytic: &[f64],
    stride: usize,
) -> GradCheckReport
where
    F: FnMut(&[f64]) -> f64,
{
    assert_eq!(x0.len(), analytic.len());
    assert!(stride >= 1);
    const FLOOR: f64 = 1e-7;
    let mut x = x0.to_vec();
    let mut max_rel_err = 0.0f64;
    let mut checked = 0usize;
    let mut i = 0;
    while i < x.len() {
        let eps = 1e-5 * x0[i].abs().max(1.0);
        let orig = x[i];
        x[i] = orig + eps;
        let fp = f(&x);
        x[i] = orig - eps;
        let fm = f(&x);
        x[i] = orig;
        let fd = (fp - fm) / (2.0 * eps);
        let a = analytic[i];
        let denom = a.abs().max(fd.abs()).max(FLOOR);
        let rel = if a.abs() < FLOOR && fd.abs() < FLOOR {
            0.0
        } else {
            (a - fd).abs() / denom
        };
        max_rel_err = max_rel_err.max(rel);
        checked += 1;
        i += stride;
    }
    GradCheckReport {
        max_rel_err,
        checked,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn detects_correct_and_incorrect_gradients() {
        // f(x) = x0^2 + sin(x1)
        let f = |x: &[f64]| x[0] * x[0] + x[1].sin();
        let x0 = [0.7, -0.3];
        let good = [2.0 * 0.7, (-0.3f64).cos()];
        let rep = central_diff_check(f, &x0, &good, 1);
        assert!(rep.max_rel_err < 1e-8, "rel err {}", rep.max_rel_err);

        let bad = [2.0 * 0.7 + 0.05, (-0.3f64).cos()];
        let rep = central_diff_check(f, &x0, &bad, 1);
        assert!(rep.max_rel_err > 1e-3);
    }
}
