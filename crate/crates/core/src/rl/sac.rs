//! Twin-critic soft actor-critic with the count-based OOD penalty.
//!
//! One [`SacAgent::update`] performs, in order: temperature adjustment,
//! sampling of `a_new ~ π(s)` and `a'_new ~ π(s')`, pseudo-counting,
//! penalty computation, the critic step, the actor step and the soft
//! target update.

use std::io::{Read, Write};

use ndarray::{concatenate, s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;

use super::policy::{GaussianPolicy, PolicySample};
use crate::counting::{PseudoCounter, Quantizer};
use crate::error::{check_dim, Error, Result};
use crate::nn::{read_f64s, read_u32, read_u64, Activation, Adam, DenseNet, Gradients};
use crate::penalty::{ood_targets, PenaltyConfig};

const AGENT_MAGIC: &[u8; 4] = b"VQAG";
const AGENT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct SacConfig {
    pub hidden: Vec<usize>,
    pub gamma: f64,
    pub tau: f64,
    pub batch_size: usize,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub alpha_lr: f64,
    pub init_temperature: f64,
    /// Defaults to `−action_dim` when unset.
    pub target_entropy: Option<f64>,
}

impl Default for SacConfig {
    fn default() -> Self {
        Self {
            hidden: vec![256, 256],
            gamma: 0.99,
            tau: 0.005,
            batch_size: 256,
            actor_lr: 3e-4,
            critic_lr: 3e-4,
            alpha_lr: 3e-4,
            init_temperature: 1.0,
            target_entropy: None,
        }
    }
}

impl SacConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::Config(what.to_string()));
        if !(0.0..=1.0).contains(&self.gamma) {
            return bad("discount must lie in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return bad("soft-update rate must lie in [0, 1]");
        }
        if self.batch_size == 0 {
            return bad("batch size must be positive");
        }
        if !(self.init_temperature > 0.0) {
            return bad("initial temperature must be positive");
        }
        if [self.actor_lr, self.critic_lr, self.alpha_lr].iter().any(|lr| !(*lr > 0.0)) {
            return bad("learning rates must be positive");
        }
        Ok(())
    }
}

/// A minibatch of transitions.
#[derive(Debug, Clone)]
pub struct Batch {
    pub states: Array2<f64>,
    pub actions: Array2<f64>,
    pub rewards: Array1<f64>,
    pub next_states: Array2<f64>,
    pub dones: Array1<f64>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.states.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Concatenates states and actions column-wise into critic inputs.
pub fn critic_input(states: ArrayView2<f64>, actions: ArrayView2<f64>) -> Array2<f64> {
    concatenate![Axis(1), states, actions]
}

pub fn q_values(critic: &DenseNet, states: ArrayView2<f64>, actions: ArrayView2<f64>) -> Result<Array1<f64>> {
    let out = critic.forward_batch(critic_input(states, actions).view())?;
    Ok(out.column(0).to_owned())
}

/// `y = r + γ(1 − done)(min_i Q̄_i(s', a'_new) − α log π(a'_new | s'))`.
pub fn bellman_target(
    rewards: ArrayView1<f64>,
    dones: ArrayView1<f64>,
    next_min_q: ArrayView1<f64>,
    next_log_probs: ArrayView1<f64>,
    alpha: f64,
    gamma: f64,
) -> Array1<f64> {
    let mut y = Array1::zeros(rewards.len());
    for i in 0..rewards.len() {
        y[i] = rewards[i] + gamma * (1.0 - dones[i]) * (next_min_q[i] - alpha * next_log_probs[i]);
    }
    y
}

/// Detached regression targets for one critic.
#[derive(Debug, Clone)]
pub struct CriticTargets {
    pub bellman: Array1<f64>,
    pub ood_current: Array1<f64>,
    pub ood_next: Array1<f64>,
}

/// Inputs at which one critic is evaluated.
#[derive(Debug, Clone, Copy)]
pub struct CriticInputs<'a> {
    pub states: ArrayView2<'a, f64>,
    pub actions: ArrayView2<'a, f64>,
    pub new_actions: ArrayView2<'a, f64>,
    pub next_states: ArrayView2<'a, f64>,
    pub next_new_actions: ArrayView2<'a, f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct CriticLoss {
    pub bellman: f64,
    pub ood: f64,
}

impl CriticLoss {
    pub fn total(&self) -> f64 {
        self.bellman + self.ood
    }
}

/// Loss of one critic and its parameter gradient:
/// `mean[(Q(s,a_new) − t_cur)² + (Q(s',a'_new) − t_next)²] + mean[(Q(s,a) − y)²]`.
pub fn critic_loss_and_grad(
    critic: &DenseNet,
    inputs: CriticInputs<'_>,
    targets: &CriticTargets,
) -> Result<(CriticLoss, Gradients)> {
    let n = inputs.states.nrows();
    check_dim("bellman targets", n, targets.bellman.len())?;
    check_dim("ood targets", n, targets.ood_current.len())?;
    check_dim("next ood targets", n, targets.ood_next.len())?;
    let x = concatenate![
        Axis(0),
        critic_input(inputs.states, inputs.actions),
        critic_input(inputs.states, inputs.new_actions),
        critic_input(inputs.next_states, inputs.next_new_actions)
    ];
    let trace = critic.forward_traced(x.view())?;
    let q = trace.output().column(0).to_owned();
    let mut grad = Array2::zeros((3 * n, 1));
    let mut loss = CriticLoss::default();
    let scale = 1.0 / n as f64;
    for i in 0..n {
        let gb = q[i] - targets.bellman[i];
        let gc = q[n + i] - targets.ood_current[i];
        let gn = q[2 * n + i] - targets.ood_next[i];
        loss.bellman += gb * gb * scale;
        loss.ood += (gc * gc + gn * gn) * scale;
        grad[[i, 0]] = 2.0 * gb * scale;
        grad[[n + i, 0]] = 2.0 * gc * scale;
        grad[[2 * n + i, 0]] = 2.0 * gn * scale;
    }
    let (grads, _) = critic.backward(&trace, grad.view());
    Ok((loss, grads))
}

/// `min(Q₁, Q₂)` per row and its gradient with respect to the action.
pub fn min_q_and_action_grad(
    critics: &[DenseNet; 2],
    states: ArrayView2<f64>,
    actions: ArrayView2<f64>,
) -> Result<(Array1<f64>, Array2<f64>)> {
    let x = critic_input(states, actions);
    let traces = [critics[0].forward_traced(x.view())?, critics[1].forward_traced(x.view())?];
    let n = states.nrows();
    let q1 = traces[0].output().column(0);
    let q2 = traces[1].output().column(0);
    let mut min_q = Array1::zeros(n);
    let mut sel = [Array2::zeros((n, 1)), Array2::zeros((n, 1))];
    for i in 0..n {
        // Ties go to the first critic.
        let k = usize::from(q2[i] < q1[i]);
        min_q[i] = q1[i].min(q2[i]);
        sel[k][[i, 0]] = 1.0;
    }
    let sd = states.ncols();
    let mut grad = Array2::zeros(actions.raw_dim());
    for k in 0..2 {
        let (_, gx) = critics[k].backward(&traces[k], sel[k].view());
        grad += &gx.slice(s![.., sd..]);
    }
    Ok((min_q, grad))
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ActorLoss {
    pub loss: f64,
    pub mean_log_prob: f64,
}

/// `L_π = mean[α log π(a_new|s) − Q(s, a_new)]` for a reparameterized
/// sample, with `q_fn` returning `Q` and `∂Q/∂a` per row.
pub fn actor_loss_and_grad(
    policy: &GaussianPolicy,
    sample: &PolicySample,
    states: ArrayView2<f64>,
    alpha: f64,
    q_fn: impl Fn(ArrayView2<f64>, ArrayView2<f64>) -> Result<(Array1<f64>, Array2<f64>)>,
) -> Result<(ActorLoss, Gradients)> {
    let n = states.nrows();
    let (q, dq_da) = q_fn(states, sample.actions.view())?;
    let scale = 1.0 / n as f64;
    let mut out = ActorLoss::default();
    for i in 0..n {
        out.loss += (alpha * sample.log_probs[i] - q[i]) * scale;
        out.mean_log_prob += sample.log_probs[i] * scale;
    }
    let grad_actions = dq_da.mapv(|g| -g * scale);
    let grad_log_probs = vec![alpha * scale; n];
    Ok((out, policy.backward(sample, grad_actions.view(), &grad_log_probs)))
}

/// Gradient of `−log α · mean(log π + H̄)` with respect to `log α`; zero
/// when the policy entropy equals the target.
pub fn temperature_grad(log_probs: ArrayView1<f64>, target_entropy: f64) -> f64 {
    -(log_probs.mean().unwrap_or(0.0) + target_entropy)
}

/// Per-update diagnostics.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct StepMetrics {
    pub critic_loss: f64,
    pub ood_loss: f64,
    pub actor_loss: f64,
    pub mean_penalty: f64,
    pub mean_count: f64,
    pub alpha: f64,
    /// Smallest OOD regression target in the batch.
    pub min_ood_target: f64,
}

#[derive(Debug, Clone)]
pub struct SacAgent {
    config: SacConfig,
    pub policy: GaussianPolicy,
    pub critics: [DenseNet; 2],
    pub targets: [DenseNet; 2],
    log_alpha: f64,
    policy_opt: Adam,
    critic_opts: [Adam; 2],
    alpha_opt: Adam,
    step: u64,
}

impl SacAgent {
    pub fn new<R: Rng + ?Sized>(state_dim: usize, action_dim: usize, config: SacConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let policy = GaussianPolicy::new(state_dim, action_dim, &config.hidden, rng)?;
        let mut dims = vec![state_dim + action_dim];
        dims.extend_from_slice(&config.hidden);
        dims.push(1);
        let c1 = DenseNet::new(&dims, Activation::Relu, Activation::Identity, rng)?;
        let c2 = DenseNet::new(&dims, Activation::Relu, Activation::Identity, rng)?;
        Ok(Self::assemble(config, policy, [c1.clone(), c2.clone()], [c1, c2], 0.0, 0))
    }

    fn assemble(
        config: SacConfig,
        policy: GaussianPolicy,
        critics: [DenseNet; 2],
        targets: [DenseNet; 2],
        log_alpha_offset: f64,
        step: u64,
    ) -> Self {
        let log_alpha = config.init_temperature.ln() + log_alpha_offset;
        Self {
            policy_opt: Adam::for_net(policy.net(), config.actor_lr),
            critic_opts: [
                Adam::for_net(&critics[0], config.critic_lr),
                Adam::for_net(&critics[1], config.critic_lr),
            ],
            alpha_opt: Adam::new(1, config.alpha_lr),
            config,
            policy,
            critics,
            targets,
            log_alpha,
            step,
        }
    }

    pub fn config(&self) -> &SacConfig {
        &self.config
    }

    pub fn alpha(&self) -> f64 {
        self.log_alpha.exp()
    }

    pub fn log_alpha(&self) -> f64 {
        self.log_alpha
    }

    pub fn set_log_alpha(&mut self, v: f64) {
        self.log_alpha = v;
    }

    /// Number of completed updates; the penalty clock is `step + 1`.
    pub fn steps_done(&self) -> u64 {
        self.step
    }

    pub fn target_entropy(&self) -> f64 {
        self.config
            .target_entropy
            .unwrap_or(-(self.policy.action_dim() as f64))
    }

    pub fn is_finite(&self) -> bool {
        self.log_alpha.is_finite()
            && self.policy.net().is_finite()
            && self.critics.iter().chain(&self.targets).all(DenseNet::is_finite)
    }

    /// One adaptive-temperature step from a batch of log-probabilities.
    pub fn temperature_update(&mut self, log_probs: ArrayView1<f64>) -> f64 {
        let g = temperature_grad(log_probs, self.target_entropy());
        let mut p = [self.log_alpha];
        self.alpha_opt.step_slice(&mut p, &[g]);
        self.log_alpha = p[0];
        self.alpha()
    }

    /// θ̄ ← τθ + (1 − τ)θ̄ for both critics.
    pub fn soft_update(&mut self) {
        let tau = self.config.tau;
        for (t, c) in self.targets.iter_mut().zip(&self.critics) {
            t.soft_update_from(c, tau);
        }
    }

    /// Runs one full update on `batch`.
    pub fn update<Q: Quantizer, R: Rng + ?Sized>(
        &mut self,
        batch: &Batch,
        counter: &PseudoCounter<Q>,
        penalty: &PenaltyConfig,
        rng: &mut R,
    ) -> Result<StepMetrics> {
        let n = batch.len();
        let clock = self.step + 1;
        let noise = self.policy.noise(n, rng);
        let next_noise = self.policy.noise(n, rng);
        let current = self.policy.sample(batch.states.view(), noise.view())?;
        let alpha = self.temperature_update(current.log_probs.view());
        let next = self.policy.sample(batch.next_states.view(), next_noise.view())?;

        let counts = counter.counts(batch.states.view(), current.actions.view())?;
        let next_counts = counter.counts(batch.next_states.view(), next.actions.view())?;
        let p: Vec<f64> = counts.iter().map(|&c| penalty.penalty(c, clock)).collect();
        let p_next: Vec<f64> = next_counts.iter().map(|&c| penalty.penalty(c, clock)).collect();

        let q_bar = [
            q_values(&self.targets[0], batch.next_states.view(), next.actions.view())?,
            q_values(&self.targets[1], batch.next_states.view(), next.actions.view())?,
        ];
        let next_min = ndarray::Zip::from(&q_bar[0]).and(&q_bar[1]).map_collect(|a, b| a.min(*b));
        let y = bellman_target(
            batch.rewards.view(),
            batch.dones.view(),
            next_min.view(),
            next.log_probs.view(),
            alpha,
            self.config.gamma,
        );

        let inputs = CriticInputs {
            states: batch.states.view(),
            actions: batch.actions.view(),
            new_actions: current.actions.view(),
            next_states: batch.next_states.view(),
            next_new_actions: next.actions.view(),
        };
        let mut metrics = StepMetrics {
            alpha,
            mean_penalty: p.iter().sum::<f64>() / n as f64,
            mean_count: counts.iter().sum::<f64>() / n as f64,
            min_ood_target: f64::INFINITY,
            ..StepMetrics::default()
        };
        for k in 0..2 {
            let q_cur = q_values(&self.critics[k], batch.states.view(), current.actions.view())?;
            let mut ood_current = Array1::zeros(n);
            let mut ood_next = Array1::zeros(n);
            for i in 0..n {
                let t = ood_targets(q_cur[i], q_bar[k][i], p[i], p_next[i]);
                ood_current[i] = t.current;
                ood_next[i] = t.next;
                metrics.min_ood_target = metrics.min_ood_target.min(t.current.min(t.next));
            }
            let targets = CriticTargets {
                bellman: y.clone(),
                ood_current,
                ood_next,
            };
            let (loss, grads) = critic_loss_and_grad(&self.critics[k], inputs, &targets)?;
            if !loss.total().is_finite() || !grads.is_finite() {
                return Err(Error::NonFinite(format!("critic {k} loss at step {clock}")));
            }
            metrics.critic_loss += loss.total();
            metrics.ood_loss += loss.ood;
            self.critic_opts[k].step_net(&mut self.critics[k], &grads);
        }

        let critics = &self.critics;
        let (actor, grads) = actor_loss_and_grad(&self.policy, &current, batch.states.view(), alpha, |s, a| {
            min_q_and_action_grad(critics, s, a)
        })?;
        if !actor.loss.is_finite() || !grads.is_finite() {
            return Err(Error::NonFinite(format!("actor loss at step {clock}")));
        }
        metrics.actor_loss = actor.loss;
        self.policy_opt.step_net(self.policy.net_mut(), &grads);

        self.soft_update();
        self.step = clock;
        if !self.is_finite() {
            return Err(Error::NonFinite(format!("parameters after step {clock}")));
        }
        Ok(metrics)
    }

    /// Inference checkpoint: policy, critics, targets, temperature and
    /// step clock. Optimizer moments are not stored.
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(AGENT_MAGIC)?;
        w.write_all(&AGENT_VERSION.to_le_bytes())?;
        w.write_all(&self.step.to_le_bytes())?;
        w.write_all(&self.log_alpha.to_le_bytes())?;
        self.policy.net().write_to(w)?;
        for net in self.critics.iter().chain(&self.targets) {
            net.write_to(w)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R, config: SacConfig) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != AGENT_MAGIC {
            return Err(Error::Format("bad agent magic".into()));
        }
        let version = read_u32(r)?;
        if version != AGENT_VERSION {
            return Err(Error::Format(format!("unsupported agent version {version}")));
        }
        let step = read_u64(r)?;
        let log_alpha = read_f64s(r, 1)?[0];
        let policy = GaussianPolicy::from_net(DenseNet::read_from(r)?)?;
        let mut nets = (0..4).map(|_| DenseNet::read_from(r)).collect::<Result<Vec<_>>>()?;
        let targets = [nets.remove(2), nets.remove(2)];
        let critics = [nets.remove(0), nets.remove(0)];
        let offset = log_alpha - config.init_temperature.ln();
        Ok(Self::assemble(config, policy, critics, targets, offset, step))
    }
}
