//! Tanh-squashed Gaussian policy.
//!
//! The network maps a state to `(mean, log_std)` per action dimension.
//! Actions are `a = tanh(mean + std·ε)` with `ε ~ N(0, I)` drawn outside,
//! so every quantity below is a deterministic function of the parameters
//! given `ε` and can be differentiated exactly.

use std::f64::consts::{LN_2, PI};

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{check_dim, Result};
use crate::nn::{Activation, DenseNet, Gradients, Trace};

pub const LOG_STD_MIN: f64 = -5.0;
pub const LOG_STD_MAX: f64 = 2.0;

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianPolicy {
    net: DenseNet,
    action_dim: usize,
}

/// A reparameterized batch of actions with everything needed for backprop.
#[derive(Debug, Clone)]
pub struct PolicySample {
    pub actions: Array2<f64>,
    pub log_probs: Array1<f64>,
    noise: Array2<f64>,
    std: Array2<f64>,
    /// 1 where the raw log-std lies inside the clamp range, else 0.
    log_std_live: Array2<f64>,
    trace: Trace,
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

/// `ln(1 − tanh²u)` evaluated without cancellation.
fn log_one_minus_tanh_sq(u: f64) -> f64 {
    2.0 * (LN_2 - u - softplus(-2.0 * u))
}

impl GaussianPolicy {
    pub fn new<R: Rng + ?Sized>(state_dim: usize, action_dim: usize, hidden: &[usize], rng: &mut R) -> Result<Self> {
        let mut dims = vec![state_dim];
        dims.extend_from_slice(hidden);
        dims.push(2 * action_dim);
        let net = DenseNet::new(&dims, Activation::Relu, Activation::Identity, rng)?;
        Ok(Self { net, action_dim })
    }

    pub fn from_net(net: DenseNet) -> Result<Self> {
        let out = net.output_dim();
        if !out.is_multiple_of(2) {
            return Err(crate::Error::Config(format!("policy net output {out} is not 2·action_dim")));
        }
        Ok(Self { net, action_dim: out / 2 })
    }

    pub fn net(&self) -> &DenseNet {
        &self.net
    }

    pub fn net_mut(&mut self) -> &mut DenseNet {
        &mut self.net
    }

    pub fn action_dim(&self) -> usize {
        self.action_dim
    }

    pub fn state_dim(&self) -> usize {
        self.net.input_dim()
    }

    pub fn noise<R: Rng + ?Sized>(&self, rows: usize, rng: &mut R) -> Array2<f64> {
        Array2::from_shape_simple_fn((rows, self.action_dim), || rng.sample(StandardNormal))
    }

    /// `tanh(mean)` for each state: the deterministic evaluation action.
    pub fn mean_action(&self, states: ArrayView2<f64>) -> Result<Array2<f64>> {
        let out = self.net.forward_batch(states)?;
        Ok(out.slice(s![.., ..self.action_dim]).mapv(f64::tanh))
    }

    pub fn act_deterministic(&self, state: &[f64]) -> Result<Vec<f64>> {
        let out = self.net.forward(state)?;
        Ok(out[..self.action_dim].iter().map(|m| m.tanh()).collect())
    }

    /// Reparameterized sample for the given standard-normal `noise`.
    pub fn sample(&self, states: ArrayView2<f64>, noise: ArrayView2<f64>) -> Result<PolicySample> {
        check_dim("policy noise rows", states.nrows(), noise.nrows())?;
        check_dim("policy noise width", self.action_dim, noise.ncols())?;
        let trace = self.net.forward_traced(states)?;
        let out = trace.output();
        let d = self.action_dim;
        let mean = out.slice(s![.., ..d]);
        let raw_log_std = out.slice(s![.., d..]);
        let log_std = raw_log_std.mapv(|v| v.clamp(LOG_STD_MIN, LOG_STD_MAX));
        let log_std_live = raw_log_std.mapv(|v| f64::from(u8::from((LOG_STD_MIN..=LOG_STD_MAX).contains(&v))));
        let std = log_std.mapv(f64::exp);
        let pre = &mean + &(&std * &noise);
        let actions = pre.mapv(f64::tanh);
        let n = states.nrows();
        let mut log_probs = Array1::zeros(n);
        for i in 0..n {
            let mut lp = 0.0;
            for j in 0..d {
                let e = noise[[i, j]];
                lp += -0.5 * e * e - log_std[[i, j]] - 0.5 * (2.0 * PI).ln() - log_one_minus_tanh_sq(pre[[i, j]]);
            }
            log_probs[i] = lp;
        }
        Ok(PolicySample {
            actions,
            log_probs,
            noise: noise.to_owned(),
            std,
            log_std_live,
            trace,
        })
    }

    /// Parameter gradient of a loss given `dL/da` (one row per sample) and
    /// `dL/d log π` (one entry per sample).
    pub fn backward(&self, sample: &PolicySample, grad_actions: ArrayView2<f64>, grad_log_probs: &[f64]) -> Gradients {
        let d = self.action_dim;
        let n = sample.actions.nrows();
        let mut grad_out = Array2::zeros((n, 2 * d));
        for i in 0..n {
            for j in 0..d {
                let a = sample.actions[[i, j]];
                let sd = sample.std[[i, j]];
                let e = sample.noise[[i, j]];
                let ga = grad_actions[[i, j]];
                let gl = grad_log_probs[i];
                // da/du = 1 − a², d logπ/du = 2a, u = mean + std·ε.
                let du = ga * (1.0 - a * a) + gl * 2.0 * a;
                grad_out[[i, j]] = du;
                grad_out[[i, d + j]] = sample.log_std_live[[i, j]] * (du * sd * e - gl);
            }
        }
        self.net.backward(&sample.trace, grad_out.view()).0
    }
}

/// Mean of `log π` over the batch.
pub fn mean_log_prob(sample: &PolicySample) -> f64 {
    sample.log_probs.mean_axis(Axis(0)).map_or(0.0, |m| m.into_scalar())
}
