//! Output heads: diagonal Gaussian with bounded log-variance, and a clamped
//! sigmoid probability.

use ndarray::{s, Array2, ArrayView2};

pub const LOGVAR_MIN: f64 = -10.0;
pub const LOGVAR_MAX: f64 = 2.0;
/// Discriminator logits are squashed into `(-LOGIT_CLAMP, LOGIT_CLAMP)`.
pub const LOGIT_CLAMP: f64 = 15.0;

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianOutput {
    pub mean: Vec<f64>,
    pub log_variance: Vec<f64>,
}

impl GaussianOutput {
    pub fn variance(&self) -> Vec<f64> {
        self.log_variance.iter().map(|lv| lv.exp()).collect()
    }
}

/// Batch Gaussian head. `d_log_var_d_raw` holds the derivative of the soft
/// clamp so gradients can be chained back to the raw network output.
#[derive(Debug, Clone)]
pub struct GaussianBatch {
    pub mean: Array2<f64>,
    pub log_var: Array2<f64>,
    pub d_log_var_d_raw: Array2<f64>,
}

impl GaussianBatch {
    /// Gradient with respect to the raw head input given gradients with
    /// respect to mean and (clamped) log-variance.
    pub fn chain(&self, d_mean: ArrayView2<f64>, d_log_var: ArrayView2<f64>) -> Array2<f64> {
        let (rows, half) = self.mean.dim();
        let mut out = Array2::zeros((rows, 2 * half));
        out.slice_mut(s![.., ..half]).assign(&d_mean);
        let mut lv = out.slice_mut(s![.., half..]);
        lv.assign(&d_log_var);
        lv *= &self.d_log_var_d_raw;
        out
    }
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log(sigmoid(z))`, stable for large |z|.
pub fn log_sigmoid(z: f64) -> f64 {
    -softplus(-z)
}

/// `log(1 - sigmoid(z))`, stable for large |z|.
pub fn log_one_minus_sigmoid(z: f64) -> f64 {
    -softplus(z)
}

/// Differentiable squashing of a raw log-variance into `[LOGVAR_MIN, LOGVAR_MAX]`.
/// Returns the clamped value and its derivative.
pub fn soft_clamp_logvar(raw: f64) -> (f64, f64) {
    let upper = LOGVAR_MAX - softplus(LOGVAR_MAX - raw);
    // softplus overshoots its asymptote by at most ~6e-6 at the far edges
    let value = (LOGVAR_MIN + softplus(upper - LOGVAR_MIN)).clamp(LOGVAR_MIN, LOGVAR_MAX);
    let deriv = sigmoid(LOGVAR_MAX - raw) * sigmoid(upper - LOGVAR_MIN);
    (value, deriv)
}

/// Smooth logit clamp `c * tanh(z / c)`. Returns the clamped logit and its derivative.
pub fn clamp_logit(z: f64) -> (f64, f64) {
    let t = (z / LOGIT_CLAMP).tanh();
    (LOGIT_CLAMP * t, 1.0 - t * t)
}

/// Splits raw output columns into mean (first half) and clamped log-variance.
pub fn gaussian_head(raw: ArrayView2<f64>) -> GaussianBatch {
    let half = raw.ncols() / 2;
    let mean = raw.slice(s![.., ..half]).to_owned();
    let raw_lv = raw.slice(s![.., half..]);
    let mut log_var = Array2::zeros(raw_lv.raw_dim());
    let mut d_log_var_d_raw = Array2::zeros(raw_lv.raw_dim());
    ndarray::Zip::from(&mut log_var)
        .and(&mut d_log_var_d_raw)
        .and(raw_lv)
        .for_each(|lv, d, &r| {
            let (v, g) = soft_clamp_logvar(r);
            *lv = v;
            *d = g;
        });
    GaussianBatch {
        mean,
        log_var,
        d_log_var_d_raw,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn logvar_clamp_is_bounded_and_near_identity_inside() {
        for raw in [-1e6, -50.0, -10.0, -3.0, 0.0, 1.0, 2.0, 40.0, 1e6] {
            let (v, d) = soft_clamp_logvar(raw);
            assert!((LOGVAR_MIN..=LOGVAR_MAX).contains(&v), "{raw} -> {v}");
            assert!((0.0..=1.0).contains(&d));
        }
        let (v, d) = soft_clamp_logvar(-4.0);
        assert!((v + 4.0).abs() < 0.01);
        assert!(d > 0.95);
        let (zero, _) = soft_clamp_logvar(0.0);
        assert!(zero.abs() < 0.15);
    }

    #[test]
    fn logvar_clamp_derivative_matches_finite_difference() {
        for raw in [-12.0, -9.0, -2.5, 0.3, 1.7, 3.0] {
            let h = 1e-6;
            let fd = (soft_clamp_logvar(raw + h).0 - soft_clamp_logvar(raw - h).0) / (2.0 * h);
            assert!((fd - soft_clamp_logvar(raw).1).abs() < 1e-8);
        }
    }

    #[test]
    fn sigmoid_head_stays_inside_open_interval() {
        let eps = sigmoid(-LOGIT_CLAMP);
        for z in [-1e300, -1e3, -15.0, 0.0, 15.0, 1e3, 1e300] {
            let p = sigmoid(clamp_logit(z).0);
            assert!(p >= eps && p <= 1.0 - eps && p > 0.0 && p < 1.0, "{z} -> {p}");
        }
        assert_eq!(sigmoid(0.0), 0.5);
    }

    #[test]
    fn log_sigmoid_terms_are_consistent() {
        for z in [-30.0, -2.0, 0.0, 0.7, 25.0] {
            let p = sigmoid(z);
            assert!((log_sigmoid(z) - p.ln()).abs() < 1e-12);
            if z < 20.0 {
                assert!((log_one_minus_sigmoid(z) - (1.0 - p).ln()).abs() < 1e-12);
            }
        }
    }
}
