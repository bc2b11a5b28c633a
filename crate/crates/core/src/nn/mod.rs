//! Dense feed-forward networks with hand-written reverse mode.
//!
//! Parameters live in one flat `Vec<f64>` so optimizers, checkpoints and
//! finite-difference checks can treat them uniformly. Layer weights are stored
//! row-major as `fan_in x fan_out`, so a batch forward pass is `x · W + b`.

mod adam;
mod gradcheck;
mod head;
mod loss;

use std::ops::Range;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{MoanError, Result};

pub use adam::{AdamConfig, AdamState};
pub use gradcheck::{central_difference, grad_check, GradCheckReport};
pub use head::{
    clamp_logit, gaussian_head, log_one_minus_sigmoid, log_sigmoid, sigmoid, soft_clamp_logvar, softplus,
    GaussianBatch, GaussianOutput, LOGIT_CLAMP, LOGVAR_MAX, LOGVAR_MIN,
};
pub use loss::{bce_fake_term, bce_real_term, gaussian_nll, gaussian_nll_batch, NllBatch};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Relu,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Relu => x.max(0.0),
        }
    }

    /// Derivative expressed through the activation output.
    fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - y * y,
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputHead {
    Linear,
    GaussianDiag,
    SigmoidScalar,
}

/// Architecture of a multilayer perceptron.
///
/// `layer_widths` lists every layer including input and output, so a net with
/// one hidden layer has three entries. `activations[i]` applies after hidden
/// layer `i`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetSpec {
    pub layer_widths: Vec<usize>,
    pub activations: Vec<Activation>,
    pub head: OutputHead,
}

impl NetSpec {
    pub fn mlp(
        input: usize,
        hidden: &[usize],
        output: usize,
        activation: Activation,
        head: OutputHead,
    ) -> Self {
        let mut layer_widths = Vec::with_capacity(hidden.len() + 2);
        layer_widths.push(input);
        layer_widths.extend_from_slice(hidden);
        layer_widths.push(output);
        NetSpec {
            layer_widths,
            activations: vec![activation; hidden.len()],
            head,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_widths.len() < 3 {
            return Err(MoanError::InvalidSpec(
                "at least one hidden layer is required".into(),
            ));
        }
        if let Some(i) = self.layer_widths.iter().position(|&w| w == 0) {
            return Err(MoanError::InvalidSpec(format!("layer {i} has width 0")));
        }
        if self.activations.len() != self.layer_widths.len() - 2 {
            return Err(MoanError::InvalidSpec(format!(
                "{} activations for {} hidden layers",
                self.activations.len(),
                self.layer_widths.len() - 2
            )));
        }
        let out = self.output_width();
        match self.head {
            OutputHead::GaussianDiag if !out.is_multiple_of(2) => Err(MoanError::InvalidSpec(format!(
                "gaussian_diag head needs an even output width, got {out}"
            ))),
            OutputHead::SigmoidScalar if out != 1 => Err(MoanError::InvalidSpec(format!(
                "sigmoid_scalar head needs output width 1, got {out}"
            ))),
            _ => Ok(()),
        }
    }

    pub fn input_width(&self) -> usize {
        self.layer_widths[0]
    }

    pub fn output_width(&self) -> usize {
        *self.layer_widths.last().expect("validated spec")
    }

    pub fn layout(&self) -> Layout {
        let mut slots = Vec::with_capacity(self.layer_widths.len() - 1);
        let mut offset = 0;
        for pair in self.layer_widths.windows(2) {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let weight = offset..offset + fan_in * fan_out;
            let bias = weight.end..weight.end + fan_out;
            offset = bias.end;
            slots.push(LayerSlot {
                fan_in,
                fan_out,
                weight,
                bias,
            });
        }
        Layout { slots, len: offset }
    }

    pub fn param_count(&self) -> usize {
        self.layout().len
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerSlot {
    pub fan_in: usize,
    pub fan_out: usize,
    pub weight: Range<usize>,
    pub bias: Range<usize>,
}

/// Index ranges of every weight matrix and bias vector in the flat parameters.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    pub slots: Vec<LayerSlot>,
    pub len: usize,
}

/// Values recorded by a forward pass, consumed by [`Network::backward`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// Input to each affine layer; entry 0 is the network input.
    layer_inputs: Vec<Array2<f64>>,
}

/// Single-sample output, interpreted through the network's head.
#[derive(Debug, Clone, PartialEq)]
pub enum HeadOutput {
    Linear(Vec<f64>),
    Gaussian(GaussianOutput),
    Probability(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    spec: NetSpec,
    layout: Layout,
    params: Vec<f64>,
}

impl Network {
    pub fn zeros(spec: NetSpec) -> Result<Self> {
        spec.validate()?;
        let layout = spec.layout();
        let params = vec![0.0; layout.len];
        Ok(Network {
            spec,
            layout,
            params,
        })
    }

    /// Uniform fan-in initialization: every weight and bias of a layer is drawn
    /// from `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    pub fn init<R: Rng + ?Sized>(spec: NetSpec, rng: &mut R) -> Result<Self> {
        let mut net = Network::zeros(spec)?;
        for slot in &net.layout.slots {
            let bound = 1.0 / (slot.fan_in as f64).sqrt();
            for p in &mut net.params[slot.weight.start..slot.bias.end] {
                *p = rng.random_range(-bound..bound);
            }
        }
        Ok(net)
    }

    pub fn from_params(spec: NetSpec, params: Vec<f64>) -> Result<Self> {
        spec.validate()?;
        let layout = spec.layout();
        if params.len() != layout.len {
            return Err(MoanError::dim("parameter vector", layout.len, params.len()));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(MoanError::NonFinite("parameter vector".into()));
        }
        Ok(Network {
            spec,
            layout,
            params,
        })
    }

    pub fn spec(&self) -> &NetSpec {
        &self.spec
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(MoanError::dim(
                "parameter vector",
                self.params.len(),
                params.len(),
            ));
        }
        self.params.copy_from_slice(params);
        Ok(())
    }

    /// Polyak averaging toward `source`: `self = tau * source + (1 - tau) * self`.
    pub fn soft_update_from(&mut self, source: &Network, tau: f64) {
        debug_assert_eq!(self.params.len(), source.params.len());
        for (t, s) in self.params.iter_mut().zip(&source.params) {
            *t = tau * s + (1.0 - tau) * *t;
        }
    }

    fn weight(&self, layer: usize) -> ArrayView2<'_, f64> {
        let slot = &self.layout.slots[layer];
        ArrayView2::from_shape((slot.fan_in, slot.fan_out), &self.params[slot.weight.clone()])
            .expect("layout matches parameter vector")
    }

    fn bias(&self, layer: usize) -> ndarray::ArrayView1<'_, f64> {
        let slot = &self.layout.slots[layer];
        ndarray::ArrayView1::from(&self.params[slot.bias.clone()])
    }

    fn check_input(&self, input: &ArrayView2<f64>) -> Result<()> {
        let expected = self.spec.input_width();
        if input.ncols() != expected {
            return Err(MoanError::dim("layer 0 input", expected, input.ncols()));
        }
        Ok(())
    }

    /// Batch forward pass returning the raw (pre-head) output, one row per input row.
    pub fn forward(&self, input: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_input(&input)?;
        let last = self.layout.slots.len() - 1;
        let mut x = input.to_owned();
        for layer in 0..=last {
            let mut z = x.dot(&self.weight(layer));
            z += &self.bias(layer);
            if layer < last {
                let act = self.spec.activations[layer];
                z.mapv_inplace(|v| act.apply(v));
            }
            x = z;
        }
        Ok(x)
    }

    pub fn forward_cached(&self, input: ArrayView2<f64>) -> Result<(Array2<f64>, ForwardCache)> {
        self.check_input(&input)?;
        let last = self.layout.slots.len() - 1;
        let mut layer_inputs = Vec::with_capacity(last + 1);
        let mut x = input.to_owned();
        for layer in 0..=last {
            let mut z = x.dot(&self.weight(layer));
            z += &self.bias(layer);
            if layer < last {
                let act = self.spec.activations[layer];
                z.mapv_inplace(|v| act.apply(v));
            }
            layer_inputs.push(x);
            x = z;
        }
        Ok((x, ForwardCache { layer_inputs }))
    }

    /// Reverse pass for a scalar loss whose gradient with respect to the raw
    /// output is `d_out`. Returns the parameter gradient (same layout as
    /// [`Network::params`]) and the gradient with respect to the input batch.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        d_out: ArrayView2<f64>,
    ) -> Result<(Vec<f64>, Array2<f64>)> {
        let last = self.layout.slots.len() - 1;
        let batch = cache.layer_inputs[0].nrows();
        if d_out.nrows() != batch {
            return Err(MoanError::dim("output gradient rows", batch, d_out.nrows()));
        }
        if d_out.ncols() != self.spec.output_width() {
            return Err(MoanError::dim(
                format!("layer {last} output gradient"),
                self.spec.output_width(),
                d_out.ncols(),
            ));
        }
        let mut grad = vec![0.0; self.layout.len];
        let mut delta = d_out.to_owned();
        for layer in (0..=last).rev() {
            let slot = &self.layout.slots[layer];
            let input = &cache.layer_inputs[layer];
            let g_w = input.t().dot(&delta);
            let g_b = delta.sum_axis(Axis(0));
            grad[slot.weight.clone()]
                .iter_mut()
                .zip(g_w.iter())
                .for_each(|(g, v)| *g = *v);
            grad[slot.bias.clone()]
                .iter_mut()
                .zip(g_b.iter())
                .for_each(|(g, v)| *g = *v);
            let mut d_in = delta.dot(&self.weight(layer).t());
            if layer > 0 {
                let act = self.spec.activations[layer - 1];
                ndarray::Zip::from(&mut d_in)
                    .and(input)
                    .for_each(|d, &y| *d *= act.derivative_from_output(y));
            }
            delta = d_in;
        }
        Ok((grad, delta))
    }

    /// Single-sample forward pass interpreted through the configured head.
    pub fn predict(&self, input: &[f64]) -> Result<HeadOutput> {
        let view = ArrayView2::from_shape((1, input.len()), input)
            .map_err(|_| MoanError::dim("layer 0 input", self.spec.input_width(), input.len()))?;
        let raw = self.forward(view)?;
        let row: Array1<f64> = raw.row(0).to_owned();
        Ok(match self.spec.head {
            OutputHead::Linear => HeadOutput::Linear(row.to_vec()),
            OutputHead::GaussianDiag => {
                let g = gaussian_head(raw.view());
                HeadOutput::Gaussian(GaussianOutput {
                    mean: g.mean.row(0).to_vec(),
                    log_variance: g.log_var.row(0).to_vec(),
                })
            }
            OutputHead::SigmoidScalar => HeadOutput::Probability(sigmoid(clamp_logit(row[0]).0)),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn spec_241() -> NetSpec {
        NetSpec::mlp(2, &[4], 1, Activation::Tanh, OutputHead::Linear)
    }

    #[test]
    fn spec_validation() {
        assert!(NetSpec {
            layer_widths: vec![2, 3],
            activations: vec![],
            head: OutputHead::Linear
        }
        .validate()
        .is_err());
        assert!(NetSpec::mlp(2, &[0], 1, Activation::Relu, OutputHead::Linear)
            .validate()
            .is_err());
        assert!(NetSpec::mlp(2, &[4], 3, Activation::Relu, OutputHead::GaussianDiag)
            .validate()
            .is_err());
        assert!(NetSpec::mlp(2, &[4], 2, Activation::Relu, OutputHead::SigmoidScalar)
            .validate()
            .is_err());
        assert_eq!(spec_241().param_count(), 2 * 4 + 4 + 4 + 1);
    }

    #[test]
    fn zero_net_outputs() {
        let net = Network::zeros(NetSpec::mlp(3, &[5], 2, Activation::Relu, OutputHead::Linear))
            .unwrap();
        assert_eq!(
            net.predict(&[1.0, -2.0, 3.0]).unwrap(),
            HeadOutput::Linear(vec![0.0, 0.0])
        );
        let disc =
            Network::zeros(NetSpec::mlp(3, &[5], 1, Activation::Tanh, OutputHead::SigmoidScalar))
                .unwrap();
        assert_eq!(
            disc.predict(&[0.3, 0.1, 9.0]).unwrap(),
            HeadOutput::Probability(0.5)
        );
    }

    #[test]
    fn forward_matches_straight_line_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let net = Network::init(spec_241(), &mut rng).unwrap();
        let p = net.params();
        // straight-line recomputation from the documented layout
        let x = [1.0, 1.0];
        let mut expected = p[16];
        for j in 0..4 {
            let pre = x[0] * p[j] + x[1] * p[4 + j] + p[8 + j];
            expected += pre.tanh() * p[12 + j];
        }
        match net.predict(&x).unwrap() {
            HeadOutput::Linear(out) => assert!((out[0] - expected).abs() < 1e-14),
            other => panic!("unexpected head {other:?}"),
        }
    }

    #[test]
    fn input_dimension_error_names_layer() {
        let net = Network::zeros(spec_241()).unwrap();
        let err = net.predict(&[1.0, 2.0, 3.0]).unwrap_err();
        assert!(err.to_string().contains("layer 0"), "{err}");
    }

    #[test]
    fn constant_loss_has_zero_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = Network::init(spec_241(), &mut rng).unwrap();
        let x = Array2::from_shape_vec((2, 2), vec![0.1, 0.2, -0.3, 0.4]).unwrap();
        let (_, cache) = net.forward_cached(x.view()).unwrap();
        let (g, d_in) = net.backward(&cache, Array2::zeros((2, 1)).view()).unwrap();
        assert!(g.iter().all(|v| *v == 0.0));
        assert!(d_in.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn squared_weight_gradient() {
        // one hidden unit, relu, identity path: output = w2 * relu(w1 * x)
        let spec = NetSpec::mlp(1, &[1], 1, Activation::Relu, OutputHead::Linear);
        let net = Network::from_params(spec, vec![1.0, 0.0, 3.0, 0.0]).unwrap();
        let x = Array2::from_elem((1, 1), 1.0);
        let (out, cache) = net.forward_cached(x.view()).unwrap();
        // loss = out^2 = w2^2 at w1 = x = 1
        let d = out.mapv(|o| 2.0 * o);
        let (g, _) = net.backward(&cache, d.view()).unwrap();
        assert_eq!(g[2], 6.0);
    }

    #[test]
    fn backward_matches_finite_differences_on_gaussian_nll() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let spec = NetSpec::mlp(2, &[8], 2, Activation::Tanh, OutputHead::GaussianDiag);
        let net = Network::init(spec, &mut rng).unwrap();
        let x = Array2::from_shape_fn((5, 2), |(i, j)| ((i * 2 + j) as f64 * 0.37).sin());
        let y = Array2::from_shape_fn((5, 1), |(i, _)| (i as f64 * 0.71).cos());
        let loss = |n: &Network| {
            let raw = n.forward(x.view()).unwrap();
            let g = gaussian_head(raw.view());
            gaussian_nll_batch(g.mean.view(), g.log_var.view(), y.view()).loss
        };
        let (raw, cache) = net.forward_cached(x.view()).unwrap();
        let g = gaussian_head(raw.view());
        let nll = gaussian_nll_batch(g.mean.view(), g.log_var.view(), y.view());
        let d_raw = g.chain(nll.d_mean.view(), nll.d_log_var.view());
        let (analytic, _) = net.backward(&cache, d_raw.view()).unwrap();
        let report = grad_check(net.params(), &analytic, 1e-5, |p| {
            let mut n = net.clone();
            n.set_params(p).unwrap();
            loss(&n)
        });
        assert!(report.max_relative_error < 1e-4, "{report:?}");
    }
}
