/// Outcome of comparing an analytic gradient against central differences.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// Central difference `(f(x + h e_i) - f(x - h e_i)) / 2h` for every coordinate.
pub fn central_difference<F>(params: &[f64], step: f64, mut loss: F) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut work = params.to_vec();
    (0..params.len())
        .map(|i| {
            let orig = work[i];
            work[i] = orig + step;
            let up = loss(&work);
            work[i] = orig - step;
            let down = loss(&work);
            work[i] = orig;
            (up - down) / (2.0 * step)
        })
        .collect()
}

/// Max over coordinates of `|analytic - numeric| / max(1, |analytic|, |numeric|)`.
pub fn grad_check<F>(params: &[f64], analytic: &[f64], step: f64, loss: F) -> GradCheckReport
where
    F: FnMut(&[f64]) -> f64,
{
    assert!(step > 0.0, "finite-difference step must be positive");
    assert_eq!(params.len(), analytic.len());
    let numeric = central_difference(params, step, loss);
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
    };
    for (i, (a, n)) in analytic.iter().zip(&numeric).enumerate() {
        let err = (a - n).abs() / 1f64.max(a.abs()).max(n.abs());
        if err > report.max_relative_error || !err.is_finite() {
            report = GradCheckReport {
                max_relative_error: if err.is_finite() { err } else { f64::INFINITY },
                worst_index: i,
                analytic: *a,
                numeric: *n,
            };
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_loss_is_exact() {
        let w = [0.3, -1.2, 4.0];
        let c = [2.0, -0.5, 1.5];
        let loss = |p: &[f64]| p.iter().zip(&c).map(|(a, b)| a * b).sum::<f64>();
        let report = grad_check(&w, &c, 1e-3, loss);
        assert!(report.max_relative_error < 1e-8, "{report:?}");
    }

    #[test]
    fn corrupted_gradient_is_caught() {
        let w = [0.5, 1.5, -0.7];
        let loss = |p: &[f64]| p.iter().map(|x| x * x * x).sum::<f64>();
        let mut grad: Vec<f64> = w.iter().map(|x| 3.0 * x * x).collect();
        grad[1] *= 2.0;
        let report = grad_check(&w, &grad, 1e-5, loss);
        assert!(report.max_relative_error >= 0.3, "{report:?}");
        assert_eq!(report.worst_index, 1);
    }
}
