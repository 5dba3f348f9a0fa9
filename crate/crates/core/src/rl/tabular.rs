//! Tabular counterpart of the learner for Grid World tasks.
//!
//! The Q-table starts optimistic, which plays the role of extrapolation
//! error: actions absent from the data keep their inflated initial value
//! unless something pushes them down. The penalized variant applies the
//! same OOD regression as the neural learner, with the greedy policy
//! standing in for `π`.

use rand::Rng;

use crate::counting::PseudoCounter;
use crate::env::dataset::OfflineDataset;
use crate::env::grid::{GridAction, GridQuantizer, GridTask, NUM_ACTIONS};
use crate::error::{Error, Result};
use crate::penalty::{ood_targets, PenaltyConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct TabularConfig {
    pub gamma: f64,
    pub tau: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub steps: u64,
    pub initial_value: f64,
    pub penalty: PenaltyConfig,
}

impl Default for TabularConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            tau: 0.05,
            lr: 0.5,
            batch_size: 32,
            steps: 5_000,
            initial_value: 20.0,
            penalty: PenaltyConfig {
                beta: 0.3,
                count_floor: 1.0,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TabularAgent {
    size: usize,
    q: Vec<[f64; NUM_ACTIONS]>,
    target: Vec<[f64; NUM_ACTIONS]>,
}

fn argmax(row: &[f64; NUM_ACTIONS]) -> usize {
    let mut best = 0;
    for a in 1..NUM_ACTIONS {
        if row[a] > row[best] {
            best = a;
        }
    }
    best
}

fn cell(v: &[f64]) -> (usize, usize) {
    (v[0] as usize, v[1] as usize)
}

impl TabularAgent {
    pub fn new(size: usize, initial_value: f64) -> Self {
        let q = vec![[initial_value; NUM_ACTIONS]; size * size];
        Self {
            size,
            target: q.clone(),
            q,
        }
    }

    fn idx(&self, c: (usize, usize)) -> usize {
        c.1 * self.size + c.0
    }

    pub fn q(&self, c: (usize, usize)) -> [f64; NUM_ACTIONS] {
        self.q[self.idx(c)]
    }

    pub fn target_q(&self, c: (usize, usize)) -> [f64; NUM_ACTIONS] {
        self.target[self.idx(c)]
    }

    /// Greedy action; ties go to the lowest action id.
    pub fn greedy(&self, c: (usize, usize)) -> GridAction {
        GridAction::ALL[argmax(&self.q(c))]
    }

    /// One penalized update on the transitions at `indices`, at clock `step ≥ 1`.
    pub fn update(
        &mut self,
        dataset: &OfflineDataset,
        indices: &[usize],
        counter: &PseudoCounter<GridQuantizer>,
        cfg: &TabularConfig,
        step: u64,
    ) -> Result<()> {
        for &i in indices {
            let t = &dataset.transitions[i];
            let (s, s2) = (cell(&t.state), cell(&t.next_state));
            let a = t.action[0] as usize;
            let a_new = self.greedy(s);
            let a2_new = self.greedy(s2);
            let n = f64::from(crate::counting::query_count(counter.quantizer(), counter.filter(), &t.state, &[a_new.index() as f64])?);
            let n2 = f64::from(crate::counting::query_count(counter.quantizer(), counter.filter(), &t.next_state, &[a2_new.index() as f64])?);
            let p = cfg.penalty.penalty(n, step);
            let p2 = cfg.penalty.penalty(n2, step);
            let (si, s2i) = (self.idx(s), self.idx(s2));
            let q_bar_next = self.target[s2i][a2_new.index()];
            let y = t.reward + cfg.gamma * (1.0 - f64::from(u8::from(t.done))) * q_bar_next;
            let ood = ood_targets(self.q[si][a_new.index()], q_bar_next, p, p2);
            // Gradient steps on the three squared errors.
            self.q[si][a] += cfg.lr * (y - self.q[si][a]);
            self.q[si][a_new.index()] += cfg.lr * (ood.current - self.q[si][a_new.index()]);
            self.q[s2i][a2_new.index()] += cfg.lr * (ood.next - self.q[s2i][a2_new.index()]);
        }
        for (tr, q) in self.target.iter_mut().zip(&self.q) {
            for a in 0..NUM_ACTIONS {
                tr[a] = cfg.tau * q[a] + (1.0 - cfg.tau) * tr[a];
            }
        }
        if self.q.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("tabular Q at step {step}")));
        }
        Ok(())
    }
}

/// Trains a tabular agent on a grid dataset with uniform minibatches.
pub fn train_tabular<R: Rng + ?Sized>(
    size: usize,
    dataset: &OfflineDataset,
    counter: &PseudoCounter<GridQuantizer>,
    cfg: &TabularConfig,
    rng: &mut R,
) -> Result<TabularAgent> {
    if dataset.is_empty() {
        return Err(Error::Config("cannot train on an empty dataset".into()));
    }
    cfg.penalty.validate()?;
    let mut agent = TabularAgent::new(size, cfg.initial_value);
    let mut idx = vec![0; cfg.batch_size];
    for step in 1..=cfg.steps {
        for i in idx.iter_mut() {
            *i = rng.random_range(0..dataset.len());
        }
        agent.update(dataset, &idx, counter, cfg, step)?;
    }
    Ok(agent)
}

/// Return of the greedy policy on `task`.
pub fn evaluate_tabular(task: &GridTask, agent: &TabularAgent) -> f64 {
    task.rollout(|c| agent.greedy(c))
}
