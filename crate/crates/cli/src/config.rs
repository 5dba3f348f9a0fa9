//! Flat `key = value` run configuration.
//!
//! Files hold one assignment per line; `#` starts a comment. Command-line
//! overrides use the same keys. The fully resolved configuration is
//! written next to every command's outputs.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};

use vqcount::counting::{DEFAULT_FILTER_COUNTERS, DEFAULT_FILTER_HASHES, DEFAULT_FILTER_SEED};
use vqcount::penalty::PenaltyConfig;
use vqcount::rl::{SacConfig, TabularConfig, TrainConfig};
use vqcount::vqvae::VqConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub env: String,
    pub policy: String,
    pub episodes: usize,
    pub grid_steps: usize,
    pub seed: u64,
    pub out: PathBuf,
    /// Optional input files; when empty, the inputs are regenerated from
    /// this configuration.
    pub dataset: Option<PathBuf>,
    pub vqvae: Option<PathBuf>,

    pub latent_dim: usize,
    pub codebooks: usize,
    pub codebook_size: usize,
    pub commitment: f64,
    pub usage_decay: f64,
    pub lr: f64,
    pub vq_hidden: Vec<usize>,
    pub vq_steps: usize,
    pub vq_batch: usize,
    pub use_fcm: bool,

    pub filter_counters: usize,
    pub filter_hashes: usize,
    pub filter_seed: u64,

    /// Unset means 0.3 on grid tasks and 0.2 elsewhere.
    pub beta: Option<f64>,
    pub count_floor: f64,

    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub batch_size: usize,
    pub hidden: Vec<usize>,
    pub gamma: f64,
    pub tau: f64,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub alpha_lr: f64,
    pub init_temperature: f64,
    pub eval_episodes: usize,

    pub tabular_steps: u64,
    pub tabular_lr: f64,
    pub tabular_tau: f64,
    pub tabular_batch: usize,
    pub tabular_init: f64,
    pub behavior_noise: f64,

    pub queries: usize,
    pub histogram_bins: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let vq = VqConfig::new(1, 1);
        let sac = SacConfig::default();
        let tab = TabularConfig::default();
        Self {
            env: "pointmass".into(),
            policy: "medium".into(),
            episodes: 200,
            grid_steps: 10_000,
            seed: 0,
            out: PathBuf::from("out"),
            dataset: None,
            vqvae: None,
            latent_dim: vq.latent_dim,
            codebooks: vq.codebooks,
            codebook_size: vq.codebook_size,
            commitment: vq.commitment,
            usage_decay: vq.usage_decay,
            lr: vq.lr,
            vq_hidden: vq.hidden,
            vq_steps: 3000,
            vq_batch: 256,
            use_fcm: vq.use_fcm,
            filter_counters: DEFAULT_FILTER_COUNTERS,
            filter_hashes: DEFAULT_FILTER_HASHES,
            filter_seed: DEFAULT_FILTER_SEED,
            beta: None,
            count_floor: 1.0,
            epochs: 1000,
            steps_per_epoch: 1000,
            batch_size: sac.batch_size,
            hidden: sac.hidden,
            gamma: sac.gamma,
            tau: sac.tau,
            actor_lr: sac.actor_lr,
            critic_lr: sac.critic_lr,
            alpha_lr: sac.alpha_lr,
            init_temperature: sac.init_temperature,
            eval_episodes: 10,
            tabular_steps: tab.steps,
            tabular_lr: tab.lr,
            tabular_tau: tab.tau,
            tabular_batch: tab.batch_size,
            tabular_init: tab.initial_value,
            behavior_noise: 0.3,
            queries: 100_000,
            histogram_bins: 50,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| anyhow!("invalid value '{value}' for '{key}': {e}"))
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>> {
    value
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| parse(key, s.trim()))
        .collect()
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => bail!("invalid boolean '{value}' for '{key}'"),
    }
}

fn optional_path(value: &str) -> Option<PathBuf> {
    (!value.is_empty()).then(|| PathBuf::from(value))
}

fn join_list(v: &[usize]) -> String {
    v.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    pub fn is_grid(&self) -> bool {
        self.env.starts_with("grid")
    }

    pub fn resolved_beta(&self) -> f64 {
        self.beta.unwrap_or(if self.is_grid() { 0.3 } else { 0.2 })
    }

    /// Applies one `key=value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "env" => self.env = v.to_string(),
            "policy" => self.policy = v.to_string(),
            "episodes" => self.episodes = parse(key, v)?,
            "grid_steps" => self.grid_steps = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "out" => self.out = PathBuf::from(v),
            "dataset" => self.dataset = optional_path(v),
            "vqvae" => self.vqvae = optional_path(v),
            "latent_dim" => self.latent_dim = parse(key, v)?,
            "codebooks" => self.codebooks = parse(key, v)?,
            "codebook_size" => self.codebook_size = parse(key, v)?,
            "commitment" => self.commitment = parse(key, v)?,
            "usage_decay" => self.usage_decay = parse(key, v)?,
            "lr" => self.lr = parse(key, v)?,
            "vq_hidden" => self.vq_hidden = parse_list(key, v)?,
            "vq_steps" => self.vq_steps = parse(key, v)?,
            "vq_batch" => self.vq_batch = parse(key, v)?,
            "use_fcm" => self.use_fcm = parse_bool(key, v)?,
            "filter_counters" => self.filter_counters = parse(key, v)?,
            "filter_hashes" => self.filter_hashes = parse(key, v)?,
            "filter_seed" => self.filter_seed = parse(key, v)?,
            "beta" => self.beta = if v.is_empty() { None } else { Some(parse(key, v)?) },
            "count_floor" => self.count_floor = parse(key, v)?,
            "epochs" => self.epochs = parse(key, v)?,
            "steps_per_epoch" => self.steps_per_epoch = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "hidden" => self.hidden = parse_list(key, v)?,
            "gamma" => self.gamma = parse(key, v)?,
            "tau" => self.tau = parse(key, v)?,
            "actor_lr" => self.actor_lr = parse(key, v)?,
            "critic_lr" => self.critic_lr = parse(key, v)?,
            "alpha_lr" => self.alpha_lr = parse(key, v)?,
            "init_temperature" => self.init_temperature = parse(key, v)?,
            "eval_episodes" => self.eval_episodes = parse(key, v)?,
            "tabular_steps" => self.tabular_steps = parse(key, v)?,
            "tabular_lr" => self.tabular_lr = parse(key, v)?,
            "tabular_tau" => self.tabular_tau = parse(key, v)?,
            "tabular_batch" => self.tabular_batch = parse(key, v)?,
            "tabular_init" => self.tabular_init = parse(key, v)?,
            "behavior_noise" => self.behavior_noise = parse(key, v)?,
            "queries" => self.queries = parse(key, v)?,
            "histogram_bins" => self.histogram_bins = parse(key, v)?,
            other => bail!("unknown config key '{other}'"),
        }
        Ok(())
    }

    /// Applies a `key=value` string.
    pub fn set_pair(&mut self, pair: &str) -> Result<()> {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| anyhow!("expected key=value, got '{pair}'"))?;
        self.set(k, v)
    }

    pub fn parse_str(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            cfg.set_pair(line).with_context(|| format!("config line {}", i + 1))?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::parse_str(&text)
    }

    /// Every key with its resolved value, one per line in a fixed order.
    pub fn echo(&self) -> String {
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        let mut out = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(out, "{k}={v}");
        };
        kv("env", self.env.clone());
        kv("policy", self.policy.clone());
        kv("episodes", self.episodes.to_string());
        kv("grid_steps", self.grid_steps.to_string());
        kv("seed", self.seed.to_string());
        kv("out", self.out.display().to_string());
        kv("dataset", path(&self.dataset));
        kv("vqvae", path(&self.vqvae));
        kv("latent_dim", self.latent_dim.to_string());
        kv("codebooks", self.codebooks.to_string());
        kv("codebook_size", self.codebook_size.to_string());
        kv("commitment", self.commitment.to_string());
        kv("usage_decay", self.usage_decay.to_string());
        kv("lr", self.lr.to_string());
        kv("vq_hidden", join_list(&self.vq_hidden));
        kv("vq_steps", self.vq_steps.to_string());
        kv("vq_batch", self.vq_batch.to_string());
        kv("use_fcm", self.use_fcm.to_string());
        kv("filter_counters", self.filter_counters.to_string());
        kv("filter_hashes", self.filter_hashes.to_string());
        kv("filter_seed", self.filter_seed.to_string());
        kv("beta", self.resolved_beta().to_string());
        kv("count_floor", self.count_floor.to_string());
        kv("epochs", self.epochs.to_string());
        kv("steps_per_epoch", self.steps_per_epoch.to_string());
        kv("batch_size", self.batch_size.to_string());
        kv("hidden", join_list(&self.hidden));
        kv("gamma", self.gamma.to_string());
        kv("tau", self.tau.to_string());
        kv("actor_lr", self.actor_lr.to_string());
        kv("critic_lr", self.critic_lr.to_string());
        kv("alpha_lr", self.alpha_lr.to_string());
        kv("init_temperature", self.init_temperature.to_string());
        kv("eval_episodes", self.eval_episodes.to_string());
        kv("tabular_steps", self.tabular_steps.to_string());
        kv("tabular_lr", self.tabular_lr.to_string());
        kv("tabular_tau", self.tabular_tau.to_string());
        kv("tabular_batch", self.tabular_batch.to_string());
        kv("tabular_init", self.tabular_init.to_string());
        kv("behavior_noise", self.behavior_noise.to_string());
        kv("queries", self.queries.to_string());
        kv("histogram_bins", self.histogram_bins.to_string());
        out
    }

    pub fn vq_config(&self, state_dim: usize, action_dim: usize) -> VqConfig {
        VqConfig {
            state_dim,
            action_dim,
            latent_dim: self.latent_dim,
            codebooks: self.codebooks,
            codebook_size: self.codebook_size,
            commitment: self.commitment,
            usage_decay: self.usage_decay,
            lr: self.lr,
            hidden: self.vq_hidden.clone(),
            use_fcm: self.use_fcm,
        }
    }

    pub fn penalty(&self) -> PenaltyConfig {
        PenaltyConfig {
            beta: self.resolved_beta(),
            count_floor: self.count_floor,
        }
    }

    pub fn sac_config(&self) -> SacConfig {
        SacConfig {
            hidden: self.hidden.clone(),
            gamma: self.gamma,
            tau: self.tau,
            batch_size: self.batch_size,
            actor_lr: self.actor_lr,
            critic_lr: self.critic_lr,
            alpha_lr: self.alpha_lr,
            init_temperature: self.init_temperature,
            target_entropy: None,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            steps_per_epoch: self.steps_per_epoch,
            eval_episodes: self.eval_episodes,
            penalty: self.penalty(),
        }
    }

    pub fn tabular_config(&self) -> TabularConfig {
        TabularConfig {
            gamma: self.gamma,
            tau: self.tabular_tau,
            lr: self.tabular_lr,
            batch_size: self.tabular_batch,
            steps: self.tabular_steps,
            initial_value: self.tabular_init,
            penalty: self.penalty(),
        }
    }
}
