//! Epoch loop around [`SacAgent::update`] with periodic evaluation.

use std::fmt::Write as _;

use ndarray::{Array1, Axis};
use rand::Rng;

use super::sac::{Batch, SacAgent, StepMetrics};
use crate::counting::{PseudoCounter, Quantizer};
use crate::env::dataset::DatasetArrays;
use crate::env::pointmass::PointMass;
use crate::error::{Error, Result};
use crate::penalty::PenaltyConfig;
use crate::rng::{Rng64, SeedStream};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub eval_episodes: usize,
    pub penalty: PenaltyConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 1000,
            steps_per_epoch: 1000,
            eval_episodes: 10,
            penalty: PenaltyConfig::default(),
        }
    }
}

/// One row of the metrics log; losses and penalties are epoch means.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub critic_loss: f64,
    pub ood_loss: f64,
    pub actor_loss: f64,
    pub mean_penalty: f64,
    pub mean_count: f64,
    pub eval_return_mean: f64,
    pub eval_return_std: f64,
    pub alpha: f64,
    pub min_ood_target: f64,
}

pub const METRICS_HEADER: &str =
    "epoch,critic_loss,ood_loss,actor_loss,mean_penalty,mean_count,eval_return_mean,eval_return_std,alpha";

pub fn metrics_csv(rows: &[EpochMetrics]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for m in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            m.epoch,
            m.critic_loss,
            m.ood_loss,
            m.actor_loss,
            m.mean_penalty,
            m.mean_count,
            m.eval_return_mean,
            m.eval_return_std,
            m.alpha
        );
    }
    out
}

/// Population mean and standard deviation.
pub fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (0.0, 0.0);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Draws a minibatch uniformly with replacement.
pub fn sample_batch<R: Rng + ?Sized>(data: &DatasetArrays, size: usize, rng: &mut R) -> Batch {
    let n = data.states.nrows();
    let idx: Vec<usize> = (0..size).map(|_| rng.random_range(0..n)).collect();
    Batch {
        states: data.states.select(Axis(0), &idx),
        actions: data.actions.select(Axis(0), &idx),
        rewards: Array1::from_iter(idx.iter().map(|&i| data.rewards[i])),
        next_states: data.next_states.select(Axis(0), &idx),
        dones: Array1::from_iter(idx.iter().map(|&i| data.dones[i])),
    }
}

/// Returns of `episodes` rollouts of the deterministic policy mean.
pub fn evaluate_pointmass(env: &PointMass, agent: &SacAgent, episodes: usize, rng: &mut Rng64) -> Result<Vec<f64>> {
    (0..episodes)
        .map(|_| {
            let mut err = None;
            let ret = env.rollout(rng, |s| match agent.policy.act_deterministic(s) {
                Ok(a) => a,
                Err(e) => {
                    err.get_or_insert(e);
                    vec![0.0; s.len().min(2)]
                }
            })?;
            err.map_or(Ok(ret), Err)
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub agent: SacAgent,
    pub metrics: Vec<EpochMetrics>,
}

/// Training stopped on a non-finite value; `last_good` is the agent as of
/// the last completed epoch.
#[derive(Debug, thiserror::Error)]
#[error("training aborted in epoch {epoch}: {source}")]
pub struct TrainAbort {
    pub epoch: usize,
    pub source: Error,
    pub last_good: Box<SacAgent>,
    pub metrics: Vec<EpochMetrics>,
}

/// Runs the epoch loop. Minibatches and policy noise come from the
/// `training` substream; each evaluation from `eval/<epoch>`.
pub fn train_sac<Q: Quantizer>(
    mut agent: SacAgent,
    data: &DatasetArrays,
    counter: &PseudoCounter<Q>,
    env: &PointMass,
    cfg: &TrainConfig,
    seeds: &SeedStream,
) -> std::result::Result<TrainOutcome, TrainAbort> {
    let mut rng = seeds.rng("training");
    let eval_seeds = seeds.child("eval");
    let mut metrics = Vec::with_capacity(cfg.epochs);
    let mut last_good = agent.clone();
    let batch_size = agent.config().batch_size;
    for epoch in 1..=cfg.epochs {
        let abort = |source: Error, last_good: &SacAgent, metrics: &Vec<EpochMetrics>| TrainAbort {
            epoch,
            source,
            last_good: Box::new(last_good.clone()),
            metrics: metrics.clone(),
        };
        if data.states.nrows() == 0 {
            return Err(abort(Error::Config("empty dataset".into()), &last_good, &metrics));
        }
        let mut acc = StepMetrics::default();
        let mut min_target = f64::INFINITY;
        for _ in 0..cfg.steps_per_epoch {
            let batch = sample_batch(data, batch_size, &mut rng);
            let m = match agent.update(&batch, counter, &cfg.penalty, &mut rng) {
                Ok(m) => m,
                Err(e) => return Err(abort(e, &last_good, &metrics)),
            };
            acc.critic_loss += m.critic_loss;
            acc.ood_loss += m.ood_loss;
            acc.actor_loss += m.actor_loss;
            acc.mean_penalty += m.mean_penalty;
            acc.mean_count += m.mean_count;
            min_target = min_target.min(m.min_ood_target);
        }
        let k = cfg.steps_per_epoch.max(1) as f64;
        let mut eval_rng = eval_seeds.rng(&epoch.to_string());
        let returns = match evaluate_pointmass(env, &agent, cfg.eval_episodes, &mut eval_rng) {
            Ok(r) => r,
            Err(e) => return Err(abort(e, &last_good, &metrics)),
        };
        let (eval_mean, eval_std) = mean_std(&returns);
        metrics.push(EpochMetrics {
            epoch,
            critic_loss: acc.critic_loss / k,
            ood_loss: acc.ood_loss / k,
            actor_loss: acc.actor_loss / k,
            mean_penalty: acc.mean_penalty / k,
            mean_count: acc.mean_count / k,
            eval_return_mean: eval_mean,
            eval_return_std: eval_std,
            alpha: agent.alpha(),
            min_ood_target: min_target,
        });
        last_good = agent.clone();
    }
    Ok(TrainOutcome { agent, metrics })
}
