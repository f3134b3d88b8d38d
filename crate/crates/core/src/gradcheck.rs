//! Central finite-difference gradient checking.
//!
//! Everything here is deliberately independent of the analytic backward
//! passes it is used to verify: it only ever evaluates a scalar function at
//! perturbed inputs.

/// Central-difference derivative of `f` with respect to `x[i]`.
pub fn central_diff<F>(f: &mut F, x: &mut [f64], i: usize, step: f64) -> f64
where
    F: FnMut(&[f64]) -> f64,
{
    let orig = x[i];
    x[i] = orig + step;
    let plus = f(x);
    x[i] = orig - step;
    let minus = f(x);
    x[i] = orig;
    (plus - minus) / (2.0 * step)
}

/// Relative error between an analytic and a numeric derivative, guarded
/// against tiny denominators.
pub fn rel_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Result of checking a full gradient vector.
#[derive(Debug, Clone, Copy)]
pub struct CheckReport {
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub checked: usize,
}

/// Compare an analytic gradient against central differences of `f` at `x`.
///
/// `indices` selects which coordinates to probe (probing all of them is fine
/// for small problems, wasteful for big ones). `floor` guards the relative
/// error against near-zero gradient pairs.
pub fn check_gradient<F>(
    f: &mut F,
    x: &mut [f64],
    analytic: &[f64],
    indices: &[usize],
    step: f64,
    floor: f64,
) -> CheckReport
where
    F: FnMut(&[f64]) -> f64,
{
    assert_eq!(x.len(), analytic.len());
    let mut report = CheckReport {
        max_rel_error: 0.0,
        worst_index: 0,
        checked: 0,
    };
    for &i in indices {
        let numeric = central_diff(f, x, i, step);
        let err = rel_error(analytic[i], numeric, floor);
        if err > report.max_rel_error {
            report.max_rel_error = err;
            report.worst_index = i;
        }
        report.checked += 1;
    }
    report
}

/// Convenience: check every coordinate.
pub fn check_gradient_full<F>(
    f: &mut F,
    x: &mut [f64],
    analytic: &[f64],
    step: f64,
    floor: f64,
) -> CheckReport
where
    F: FnMut(&[f64]) -> f64,
{
    let all: Vec<usize> = (0..x.len()).collect();
    check_gradient(f, x, analytic, &all, step, floor)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient_matches() {
        // f(x) = sum x_i^2, df/dx_i = 2 x_i
        let mut f = |x: &[f64]| x.iter().map(|v| v * v).sum::<f64>();
        let mut x = vec![0.5, -1.25, 3.0];
        let analytic: Vec<f64> = x.iter().map(|v| 2.0 * v).collect();
        let report = check_gradient_full(&mut f, &mut x, &analytic, 1e-5, 1e-8);
        assert!(report.max_rel_error < 1e-9, "{report:?}");
    }

    #[test]
    fn detects_wrong_gradient() {
        let mut f = |x: &[f64]| x[0] * x[0];
        let mut x = vec![2.0];
        let wrong = vec![3.9]; // truth is 4.0
        let report = check_gradient_full(&mut f, &mut x, &wrong, 1e-5, 1e-8);
        assert!(report.max_rel_error > 1e-3);
    }
}
