use std::f64::consts::PI;

use ndarray::{Array2, ArrayView2};

use super::GaussianOutput;
use crate::error::{MoanError, Result};

/// Negative log-likelihood of `target` under a diagonal Gaussian, summed over dimensions.
pub fn gaussian_nll(out: &GaussianOutput, target: &[f64]) -> Result<f64> {
    if target.len() != out.mean.len() {
        return Err(MoanError::dim("nll target", out.mean.len(), target.len()));
    }
    if out.log_variance.len() != out.mean.len() {
        return Err(MoanError::dim(
            "nll log-variance",
            out.mean.len(),
            out.log_variance.len(),
        ));
    }
    let half_log_2pi = 0.5 * (2.0 * PI).ln();
    let mut total = 0.0;
    for ((m, lv), t) in out.mean.iter().zip(&out.log_variance).zip(target) {
        if !(m.is_finite() && lv.is_finite() && t.is_finite()) {
            return Err(MoanError::NonFinite("gaussian_nll input".into()));
        }
        let r = t - m;
        total += half_log_2pi + 0.5 * lv + 0.5 * r * r / lv.exp();
    }
    Ok(total)
}

/// Batch NLL: `loss` is the mean over rows of the per-row summed NLL, with
/// gradients of that mean.
#[derive(Debug, Clone)]
pub struct NllBatch {
    pub loss: f64,
    pub d_mean: Array2<f64>,
    pub d_log_var: Array2<f64>,
}

pub fn gaussian_nll_batch(
    mean: ArrayView2<f64>,
    log_var: ArrayView2<f64>,
    target: ArrayView2<f64>,
) -> NllBatch {
    let n = mean.nrows() as f64;
    let half_log_2pi = 0.5 * (2.0 * PI).ln();
    let mut loss = 0.0;
    let mut d_mean = Array2::zeros(mean.raw_dim());
    let mut d_log_var = Array2::zeros(mean.raw_dim());
    ndarray::Zip::from(&mut d_mean)
        .and(&mut d_log_var)
        .and(mean)
        .and(log_var)
        .and(target)
        .for_each(|dm, dl, &m, &lv, &t| {
            let inv_var = (-lv).exp();
            let r = t - m;
            loss += half_log_2pi + 0.5 * lv + 0.5 * r * r * inv_var;
            *dm = -r * inv_var / n;
            *dl = (0.5 - 0.5 * r * r * inv_var) / n;
        });
    NllBatch {
        loss: loss / n,
        d_mean,
        d_log_var,
    }
}

fn check_open_unit(d: f64) -> Result<()> {
    if d > 0.0 && d < 1.0 {
        Ok(())
    } else {
        Err(MoanError::Domain(format!(
            "probability {d} outside the open interval (0, 1)"
        )))
    }
}

/// `log d`, the discriminator's reward for scoring a real tuple.
pub fn bce_real_term(d: f64) -> Result<f64> {
    check_open_unit(d)?;
    Ok(d.ln())
}

/// `log(1 - d)`, the discriminator's reward for scoring a generated tuple.
pub fn bce_fake_term(d: f64) -> Result<f64> {
    check_open_unit(d)?;
    Ok((-d).ln_1p())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    const HALF_LOG_2PI: f64 = 0.918_938_533_204_672_7;

    #[test]
    fn nll_at_standard_normal_mode() {
        let out = GaussianOutput {
            mean: vec![0.0],
            log_variance: vec![0.0],
        };
        assert!((gaussian_nll(&out, &[0.0]).unwrap() - HALF_LOG_2PI).abs() < 1e-15);
        let out = GaussianOutput {
            mean: vec![3.5, -1.25, 7.0],
            log_variance: vec![0.0; 3],
        };
        let v = gaussian_nll(&out, &[3.5, -1.25, 7.0]).unwrap();
        assert!((v - 3.0 * HALF_LOG_2PI).abs() < 1e-14);
    }

    #[test]
    fn nll_hand_value() {
        let out = GaussianOutput {
            mean: vec![0.0, 0.0],
            log_variance: vec![0.0, 0.0],
        };
        // 2 * 0.918938533 + 0.5 * (1 + 4)
        let v = gaussian_nll(&out, &[1.0, 2.0]).unwrap();
        assert!((v - 4.337_877_066_409_345).abs() < 1e-12);
        assert!((v - 4.3379).abs() < 1e-4);
    }

    #[test]
    fn nll_rejects_bad_inputs() {
        let out = GaussianOutput {
            mean: vec![0.0, f64::NAN],
            log_variance: vec![0.0, 0.0],
        };
        assert!(gaussian_nll(&out, &[0.0, 0.0]).is_err());
        assert!(gaussian_nll(&out, &[0.0]).is_err());
    }

    #[test]
    fn nll_batch_matches_single() {
        let mean = array![[0.1, -0.2], [1.0, 0.5]];
        let lv = array![[0.3, -1.0], [0.0, 1.5]];
        let t = array![[0.0, 0.0], [2.0, -1.0]];
        let batch = gaussian_nll_batch(mean.view(), lv.view(), t.view());
        let mut expected = 0.0;
        for i in 0..2 {
            expected += gaussian_nll(
                &GaussianOutput {
                    mean: mean.row(i).to_vec(),
                    log_variance: lv.row(i).to_vec(),
                },
                &t.row(i).to_vec(),
            )
            .unwrap();
        }
        assert!((batch.loss - expected / 2.0).abs() < 1e-14);
    }

    #[test]
    fn bce_terms() {
        assert!((bce_real_term(0.5).unwrap() - 0.5f64.ln()).abs() < 1e-15);
        assert!((bce_fake_term(0.5).unwrap() - 0.5f64.ln()).abs() < 1e-15);
        assert!((bce_real_term(0.8).unwrap() + 0.2231).abs() < 1e-4);
        assert!((bce_fake_term(0.8).unwrap() + 1.6094).abs() < 1e-4);
        assert!(bce_real_term(1.0 - 1e-12).unwrap().abs() < 1e-11);
        for bad in [0.0, 1.0, -0.1, 1.5, f64::NAN] {
            assert!(bce_real_term(bad).is_err());
            assert!(bce_fake_term(bad).is_err());
        }
    }
}
