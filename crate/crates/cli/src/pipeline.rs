//! The experiment pipeline as plain functions; commands add file I/O.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use anyhow::{bail, Context, Result};
use ndarray::{Array2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use vqcount::counting::{CountingBloomFilter, PseudoCounter};
use vqcount::env::grid::{self, CountTable, GridAction, GridMap, GridQuantizer, GridTask};
use vqcount::env::pointmass::{self, BehaviorPolicy, PointMass};
use vqcount::env::OfflineDataset;
use vqcount::rl::{self, SacAgent, TabularAgent, TrainAbort, TrainOutcome};
use vqcount::rng::SeedStream;
use vqcount::vqvae::{use_rate, UseRate, VqLoss, VqTrainer, VqVae};

use crate::config::RunConfig;

/// Rows used to seed codebooks before training.
const WARMUP_ROWS: usize = 4096;

pub fn seeds(cfg: &RunConfig) -> SeedStream {
    SeedStream::new(cfg.seed)
}

#[derive(Debug, Clone)]
pub struct GeneratedData {
    pub dataset: OfflineDataset,
    /// Exact counts recorded during generation, for the count maps.
    pub counts: Option<CountTable>,
}

pub fn generate_dataset(cfg: &RunConfig) -> Result<GeneratedData> {
    let mut rng = seeds(cfg).rng("dataset");
    if cfg.env == pointmass::ENV_ID {
        let policy = BehaviorPolicy::from_tag(&cfg.policy)?;
        let data = pointmass::generate_pointmass_dataset(&PointMass::default(), policy, cfg.episodes, &mut rng, cfg.seed)?;
        return Ok(GeneratedData { dataset: data.dataset, counts: None });
    }
    if cfg.env == GridTask::ENV_ID {
        let task = GridTask::standard();
        let dataset = task.generate_dataset(cfg.episodes, cfg.behavior_noise, &mut rng, cfg.seed);
        return Ok(GeneratedData { dataset, counts: None });
    }
    let map = GridMap::from_id(&cfg.env)?;
    let (dataset, counts) = grid::generate_grid_dataset(map, cfg.grid_steps, &mut rng, cfg.seed);
    Ok(GeneratedData { dataset, counts: Some(counts) })
}

pub fn write_dataset(path: &Path, dataset: &OfflineDataset) -> Result<()> {
    let mut w = BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
    dataset.write_to(&mut w)?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<OfflineDataset> {
    let mut r = BufReader::new(File::open(path).with_context(|| format!("opening {}", path.display()))?);
    Ok(OfflineDataset::read_from(&mut r)?)
}

/// The configured dataset file, or a fresh dataset from the config.
pub fn load_or_generate_dataset(cfg: &RunConfig) -> Result<OfflineDataset> {
    match &cfg.dataset {
        Some(path) => read_dataset(path),
        None => Ok(generate_dataset(cfg)?.dataset),
    }
}

/// Per-step loss record of VQVAE pretraining.
#[derive(Debug, Clone, Copy)]
pub struct VqLogRow {
    pub step: usize,
    pub loss: VqLoss,
}

pub fn vq_loss_csv(rows: &[VqLogRow]) -> String {
    let mut out = String::from("step,total,reconstruction,codebook,commitment\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.step, r.loss.total, r.loss.reconstruction, r.loss.codebook, r.loss.commitment
        ));
    }
    out
}

fn sample_rows<R: Rng + ?Sized>(n: usize, count: usize, rng: &mut R) -> Vec<usize> {
    (0..count).map(|_| rng.random_range(0..n)).collect()
}

/// Trains a VQVAE on the dataset's state–action pairs.
pub fn pretrain_vqvae(cfg: &RunConfig, dataset: &OfflineDataset) -> Result<(VqVae, Vec<VqLogRow>)> {
    if dataset.is_empty() {
        bail!("cannot pretrain on an empty dataset");
    }
    let s = seeds(cfg);
    let arrays = dataset.arrays();
    let vq_cfg = cfg.vq_config(dataset.meta.state_dim, dataset.meta.action_dim);
    let mut model = VqVae::new(vq_cfg, &mut s.rng("init"))?;
    let mut rng = s.rng("vq-training");
    let warm = sample_rows(dataset.len(), WARMUP_ROWS.min(dataset.len().max(cfg.codebook_size)), &mut rng);
    model.init_codebooks(
        arrays.states.select(Axis(0), &warm).view(),
        arrays.actions.select(Axis(0), &warm).view(),
        &mut rng,
    )?;
    let mut trainer = VqTrainer::new(model);
    let mut log = Vec::with_capacity(cfg.vq_steps);
    for step in 1..=cfg.vq_steps {
        let idx = sample_rows(dataset.len(), cfg.vq_batch, &mut rng);
        let loss = trainer.train_step(
            arrays.states.select(Axis(0), &idx).view(),
            arrays.actions.select(Axis(0), &idx).view(),
        )?;
        log.push(VqLogRow { step, loss });
    }
    Ok((trainer.into_model(), log))
}

pub fn write_vqvae(path: &Path, model: &VqVae) -> Result<()> {
    let mut w = BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
    model.write_to(&mut w)?;
    Ok(())
}

pub fn read_vqvae(path: &Path, cfg: &RunConfig, dataset: &OfflineDataset) -> Result<VqVae> {
    let mut r = BufReader::new(File::open(path).with_context(|| format!("opening {}", path.display()))?);
    Ok(VqVae::read_from(&mut r, cfg.vq_config(dataset.meta.state_dim, dataset.meta.action_dim))?)
}

/// The configured checkpoint, or a freshly pretrained model.
pub fn load_or_pretrain_vqvae(cfg: &RunConfig, dataset: &OfflineDataset) -> Result<VqVae> {
    match &cfg.vqvae {
        Some(path) => read_vqvae(path, cfg, dataset),
        None => Ok(pretrain_vqvae(cfg, dataset)?.0),
    }
}

pub fn new_filter(cfg: &RunConfig) -> Result<CountingBloomFilter> {
    Ok(CountingBloomFilter::new(cfg.filter_counters, cfg.filter_hashes, cfg.filter_seed)?)
}

/// Wraps `quantizer` with a filter holding every dataset pair once.
pub fn build_counter<Q: vqcount::counting::Quantizer>(
    cfg: &RunConfig,
    quantizer: Q,
    dataset: &OfflineDataset,
) -> Result<PseudoCounter<Q>> {
    let mut counter = PseudoCounter::new(quantizer, new_filter(cfg)?);
    let arrays = dataset.arrays();
    counter.insert_batch(arrays.states.view(), arrays.actions.view())?;
    Ok(counter)
}

/// Trains the neural agent on point-mass data.
pub fn train_pointmass_agent(
    cfg: &RunConfig,
    dataset: &OfflineDataset,
    vq: VqVae,
) -> Result<std::result::Result<TrainOutcome, TrainAbort>> {
    if dataset.meta.env_id != pointmass::ENV_ID {
        bail!("neural agent training expects point-mass data, got '{}'", dataset.meta.env_id);
    }
    let counter = build_counter(cfg, vq, dataset)?;
    let s = seeds(cfg);
    let agent = SacAgent::new(
        dataset.meta.state_dim,
        dataset.meta.action_dim,
        cfg.sac_config(),
        &mut s.rng("agent-init"),
    )?;
    Ok(rl::train_sac(
        agent,
        &dataset.arrays(),
        &counter,
        &PointMass::default(),
        &cfg.train_config(),
        &s,
    ))
}

#[derive(Debug, Clone)]
pub struct TabularResult {
    pub agent: TabularAgent,
    pub eval_return: f64,
    pub dataset_best_return: f64,
}

/// Trains the tabular agent on the Grid World trap task.
pub fn train_grid_agent(cfg: &RunConfig, dataset: &OfflineDataset) -> Result<TabularResult> {
    if dataset.meta.env_id != GridTask::ENV_ID {
        bail!("tabular training expects '{}' data, got '{}'", GridTask::ENV_ID, dataset.meta.env_id);
    }
    let task = GridTask::standard();
    let counter = build_counter(cfg, GridQuantizer::new(GridTask::SIZE), dataset)?;
    let agent = rl::train_tabular(
        GridTask::SIZE,
        dataset,
        &counter,
        &cfg.tabular_config(),
        &mut seeds(cfg).rng("training"),
    )?;
    Ok(TabularResult {
        eval_return: rl::evaluate_tabular(&task, &agent),
        dataset_best_return: dataset.meta.best_return,
        agent,
    })
}

/// Outcome of comparing filter counts with the exact table on one map.
#[derive(Debug, Clone)]
pub struct CountEval {
    pub exact: CountTable,
    pub estimated: CountTable,
    pub visited_pairs: usize,
    pub exact_pairs: usize,
    pub over_pairs: usize,
    pub under_pairs: usize,
    pub max_over: u64,
}

impl CountEval {
    pub fn exact_rate(&self) -> f64 {
        if self.visited_pairs == 0 {
            1.0
        } else {
            self.exact_pairs as f64 / self.visited_pairs as f64
        }
    }

    pub fn over_rate(&self) -> f64 {
        if self.visited_pairs == 0 {
            0.0
        } else {
            self.over_pairs as f64 / self.visited_pairs as f64
        }
    }

    pub fn report_csv(&self, env: &str) -> String {
        format!(
            "env,visited_pairs,exact_pairs,over_pairs,under_pairs,exact_rate,over_rate,max_over,total_exact,total_estimated\n\
             {env},{},{},{},{},{},{},{},{},{}\n",
            self.visited_pairs,
            self.exact_pairs,
            self.over_pairs,
            self.under_pairs,
            self.exact_rate(),
            self.over_rate(),
            self.max_over,
            self.exact.total(),
            self.estimated.total()
        )
    }
}

/// Generates the map's random-walk data, counts it through the filter and
/// compares every `(x, y, action)` entry with the exact table.
pub fn count_eval(cfg: &RunConfig) -> Result<CountEval> {
    let map = GridMap::from_id(&cfg.env)?;
    let generated = generate_dataset(cfg)?;
    let exact = grid::exact_count_oracle(&generated.dataset)?;
    let quantizer = GridQuantizer::new(map.size());
    let counter = build_counter(cfg, quantizer, &generated.dataset)?;
    let mut estimated = CountTable::new(map.size());
    let mut eval = CountEval {
        exact: exact.clone(),
        estimated: CountTable::new(0),
        visited_pairs: 0,
        exact_pairs: 0,
        over_pairs: 0,
        under_pairs: 0,
        max_over: 0,
    };
    for (x, y, a, truth) in exact.entries() {
        let est = u64::from(vqcount::counting::query_count(
            counter.quantizer(),
            counter.filter(),
            &[x as f64, y as f64],
            &[a.index() as f64],
        )?);
        estimated.set(x, y, a, est);
        if truth > 0 {
            eval.visited_pairs += 1;
            match est.cmp(&truth) {
                std::cmp::Ordering::Equal => eval.exact_pairs += 1,
                std::cmp::Ordering::Greater => eval.over_pairs += 1,
                std::cmp::Ordering::Less => eval.under_pairs += 1,
            }
        }
        eval.max_over = eval.max_over.max(est.saturating_sub(truth));
    }
    eval.estimated = estimated;
    Ok(eval)
}

/// Per-state count totals (summed over actions) as a P2 graymap, top row
/// is the highest y.
pub fn state_heatmap_pgm(size: usize, value: impl Fn(usize, usize) -> u64, max_value: u64) -> String {
    let max = max_value.max(1);
    let mut out = format!("P2\n{size} {size}\n255\n");
    for y in (0..size).rev() {
        let row: Vec<String> = (0..size).map(|x| (value(x, y) * 255 / max).min(255).to_string()).collect();
        out.push_str(&row.join(" "));
        out.push('\n');
    }
    out
}

pub fn state_total(table: &CountTable, x: usize, y: usize) -> u64 {
    GridAction::ALL.iter().map(|&a| table.get(x, y, a)).sum()
}

/// Input perturbation conditions of the OOD loss study.
pub const OOD_CONDITIONS: [&str; 4] = ["clean", "noise_0.25", "noise_0.5", "random"];

#[derive(Debug, Clone)]
pub struct OodEval {
    /// Per-sample total loss, one vector per entry of [`OOD_CONDITIONS`].
    pub losses: Vec<Vec<f64>>,
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

impl OodEval {
    pub fn medians(&self) -> Vec<f64> {
        self.losses.iter().map(|l| median(l)).collect()
    }

    pub fn summary_csv(&self) -> String {
        let mut out = String::from("condition,samples,median,mean\n");
        for (name, l) in OOD_CONDITIONS.iter().zip(&self.losses) {
            let mean = l.iter().sum::<f64>() / l.len().max(1) as f64;
            out.push_str(&format!("{name},{},{},{mean}\n", l.len(), median(l)));
        }
        out
    }

    /// Equal-width bins over `[0, max loss]`; the last bin is closed.
    pub fn histogram_csv(&self, bins: usize) -> String {
        let bins = bins.max(1);
        let max = self.losses.iter().flatten().copied().fold(0.0, f64::max);
        let width = if max > 0.0 { max / bins as f64 } else { 1.0 };
        let mut counts = vec![vec![0usize; self.losses.len()]; bins];
        for (c, l) in self.losses.iter().enumerate() {
            for &v in l {
                let b = ((v / width) as usize).min(bins - 1);
                counts[b][c] += 1;
            }
        }
        let mut out = format!("bin_lo,bin_hi,{}\n", OOD_CONDITIONS.join(","));
        for (b, row) in counts.iter().enumerate() {
            let cells: Vec<String> = row.iter().map(usize::to_string).collect();
            out.push_str(&format!("{},{},{}\n", b as f64 * width, (b + 1) as f64 * width, cells.join(",")));
        }
        out
    }
}

/// Per-sample VQVAE loss on `queries` dataset pairs: as recorded, with
/// Gaussian noise of variance 0.25 and 0.5 added to state and action, and
/// random pairs drawn independently of the data from a standard normal.
pub fn ood_eval(cfg: &RunConfig, vq: &VqVae, dataset: &OfflineDataset) -> Result<OodEval> {
    if dataset.is_empty() {
        bail!("cannot evaluate on an empty dataset");
    }
    let mut rng = seeds(cfg).rng("ood-eval");
    let arrays = dataset.arrays();
    let idx = sample_rows(dataset.len(), cfg.queries, &mut rng);
    let states = arrays.states.select(Axis(0), &idx);
    let actions = arrays.actions.select(Axis(0), &idx);
    let mut losses = Vec::with_capacity(OOD_CONDITIONS.len());
    losses.push(chunked_losses(vq, &states, &actions)?);
    for variance in [0.25f64, 0.5] {
        let noise = Normal::new(0.0, variance.sqrt())?;
        let ns = states.mapv(|v| v + noise.sample(&mut rng));
        let na = actions.mapv(|v| v + noise.sample(&mut rng));
        losses.push(chunked_losses(vq, &ns, &na)?);
    }
    let unit = Normal::new(0.0, 1.0)?;
    let rs = Array2::from_shape_simple_fn(states.raw_dim(), || unit.sample(&mut rng));
    let ra = Array2::from_shape_simple_fn(actions.raw_dim(), || unit.sample(&mut rng));
    losses.push(chunked_losses(vq, &rs, &ra)?);
    Ok(OodEval { losses })
}

fn chunked_losses(vq: &VqVae, states: &Array2<f64>, actions: &Array2<f64>) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(states.nrows());
    for (s, a) in states
        .axis_chunks_iter(Axis(0), 4096)
        .zip(actions.axis_chunks_iter(Axis(0), 4096))
    {
        out.extend(vq.loss_batch(s, a)?.iter().map(|l| l.total));
    }
    Ok(out)
}

/// Codebook use rate over `queries` pairs drawn from the dataset.
pub fn usage_report(cfg: &RunConfig, vq: &VqVae, dataset: &OfflineDataset) -> Result<UseRate> {
    if dataset.is_empty() {
        bail!("cannot query an empty dataset");
    }
    let mut rng = seeds(cfg).rng("queries");
    let arrays = dataset.arrays();
    let idx = sample_rows(dataset.len(), cfg.queries, &mut rng);
    Ok(use_rate(
        vq,
        arrays.states.select(Axis(0), &idx).view(),
        arrays.actions.select(Axis(0), &idx).view(),
    )?)
}

pub fn usage_csv(u: &UseRate) -> String {
    let mut out = String::from("codebook,used,size,rate\n");
    let mut used_total = 0;
    for (h, &used) in u.per_codebook.iter().enumerate() {
        used_total += used;
        out.push_str(&format!("{h},{used},{},{}\n", u.codebook_size, used as f64 / u.codebook_size as f64));
    }
    let size_total = u.codebook_size * u.per_codebook.len();
    out.push_str(&format!("total,{used_total},{size_total},{}\n", u.rate));
    out
}
