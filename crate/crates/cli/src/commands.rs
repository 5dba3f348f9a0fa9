//! Subcommands. Each resolves its configuration, writes it to
//! `config.txt` in the output directory and then writes its artifacts.

use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use vqcount::env::grid::{GridAction, GridMap, GridTask};
use vqcount::env::pointmass;
use vqcount::rl::metrics_csv;

use crate::config::RunConfig;
use crate::pipeline;

#[derive(Debug, Parser)]
#[command(name = "vqcount", version, about = "Pseudo-count anti-exploration experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate an offline dataset (and exact counts for grid maps).
    GenData(CommonArgs),
    /// Pretrain the multi-codebook VQVAE and write its loss log.
    PretrainVqvae(CommonArgs),
    /// Train the penalized agent (neural on point-mass, tabular on grid8-trap).
    TrainAgent(CommonArgs),
    /// Compare filter counts with exact counts on a grid map.
    CountEval(CommonArgs),
    /// Per-sample VQVAE loss on clean, noisy and random inputs.
    OodEval(CommonArgs),
    /// Codebook use rate over a query set.
    UsageReport(CommonArgs),
}

#[derive(Debug, Clone, Args)]
pub struct CommonArgs {
    /// Config file with one key=value per line.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override a config key; may be repeated.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Move codebooks by gradient descent instead of fuzzy c-means.
    #[arg(long)]
    pub no_fcm: bool,
    /// Number of codebooks H.
    #[arg(long)]
    pub codebooks: Option<usize>,
}

impl CommonArgs {
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        for pair in &self.overrides {
            cfg.set_pair(pair)?;
        }
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(out) = &self.out {
            cfg.out = out.clone();
        }
        if self.no_fcm {
            cfg.use_fcm = false;
        }
        if let Some(h) = self.codebooks {
            cfg.codebooks = h;
        }
        Ok(cfg)
    }
}

fn prepare(cfg: &RunConfig) -> Result<()> {
    fs::create_dir_all(&cfg.out).with_context(|| format!("creating {}", cfg.out.display()))?;
    write(&cfg.out.join("config.txt"), &cfg.echo())
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(a) => gen_data(&a.resolve()?),
        Command::PretrainVqvae(a) => pretrain_vqvae(&a.resolve()?),
        Command::TrainAgent(a) => train_agent(&a.resolve()?),
        Command::CountEval(a) => count_eval(&a.resolve()?),
        Command::OodEval(a) => ood_eval(&a.resolve()?),
        Command::UsageReport(a) => usage_report(&a.resolve()?),
    }
}

pub fn gen_data(cfg: &RunConfig) -> Result<()> {
    prepare(cfg)?;
    let generated = pipeline::generate_dataset(cfg)?;
    pipeline::write_dataset(&cfg.out.join("dataset.bin"), &generated.dataset)?;
    write(&cfg.out.join("dataset.csv"), &generated.dataset.to_csv())?;
    if let Some(counts) = &generated.counts {
        write(&cfg.out.join("counts.csv"), &counts.to_csv())?;
    }
    println!(
        "{} transitions from {} ({}), best trajectory return {}",
        generated.dataset.len(),
        generated.dataset.meta.env_id,
        generated.dataset.meta.policy,
        generated.dataset.meta.best_return
    );
    Ok(())
}

pub fn pretrain_vqvae(cfg: &RunConfig) -> Result<()> {
    prepare(cfg)?;
    let dataset = pipeline::load_or_generate_dataset(cfg)?;
    let (model, log) = pipeline::pretrain_vqvae(cfg, &dataset)?;
    pipeline::write_vqvae(&cfg.out.join("vqvae.bin"), &model)?;
    write(&cfg.out.join("vq_loss.csv"), &pipeline::vq_loss_csv(&log))?;
    let usage = pipeline::usage_report(cfg, &model, &dataset)?;
    write(&cfg.out.join("usage.csv"), &pipeline::usage_csv(&usage))?;
    if let Some(last) = log.last() {
        println!("final loss {} (use rate {:.4})", last.loss.total, usage.rate);
    }
    Ok(())
}

pub fn train_agent(cfg: &RunConfig) -> Result<()> {
    prepare(cfg)?;
    let dataset = pipeline::load_or_generate_dataset(cfg)?;
    if dataset.meta.env_id == GridTask::ENV_ID {
        let result = pipeline::train_grid_agent(cfg, &dataset)?;
        let mut q = String::from("x,y,up,down,left,right\n");
        for y in 0..GridTask::SIZE {
            for x in 0..GridTask::SIZE {
                let row = result.agent.q((x, y));
                q.push_str(&format!("{x},{y},{},{},{},{}\n", row[0], row[1], row[2], row[3]));
            }
        }
        write(&cfg.out.join("q_table.csv"), &q)?;
        write(
            &cfg.out.join("metrics.csv"),
            &format!(
                "eval_return,dataset_best_return,beta\n{},{},{}\n",
                result.eval_return,
                result.dataset_best_return,
                cfg.resolved_beta()
            ),
        )?;
        println!("greedy return {}", result.eval_return);
        return Ok(());
    }
    if dataset.meta.env_id != pointmass::ENV_ID {
        bail!("train-agent supports '{}' and '{}'", pointmass::ENV_ID, GridTask::ENV_ID);
    }
    let vq = pipeline::load_or_pretrain_vqvae(cfg, &dataset)?;
    pipeline::write_vqvae(&cfg.out.join("vqvae.bin"), &vq)?;
    let filter_path = cfg.out.join("filter.bin");
    {
        let counter = pipeline::build_counter(cfg, vq.clone(), &dataset)?;
        let mut w = BufWriter::new(fs::File::create(&filter_path)?);
        counter.filter().write_to(&mut w)?;
    }
    match pipeline::train_pointmass_agent(cfg, &dataset, vq)? {
        Ok(outcome) => {
            write(&cfg.out.join("metrics.csv"), &metrics_csv(&outcome.metrics))?;
            let mut w = BufWriter::new(fs::File::create(cfg.out.join("agent.bin"))?);
            outcome.agent.write_to(&mut w)?;
            if let Some(last) = outcome.metrics.last() {
                println!(
                    "final eval return {} ± {} (dataset best {})",
                    last.eval_return_mean, last.eval_return_std, dataset.meta.best_return
                );
            }
            Ok(())
        }
        Err(abort) => {
            write(&cfg.out.join("metrics.csv"), &metrics_csv(&abort.metrics))?;
            let mut w = BufWriter::new(fs::File::create(cfg.out.join("agent_last_good.bin"))?);
            abort.last_good.write_to(&mut w)?;
            Err(abort.into())
        }
    }
}

pub fn count_eval(cfg: &RunConfig) -> Result<()> {
    prepare(cfg)?;
    let map = GridMap::from_id(&cfg.env)?;
    let start = Instant::now();
    let eval = pipeline::count_eval(cfg)?;
    let elapsed = start.elapsed();
    let size = map.size();
    write(&cfg.out.join("counts_true.csv"), &eval.exact.to_csv())?;
    write(&cfg.out.join("counts_cbf.csv"), &eval.estimated.to_csv())?;
    let max = (0..size)
        .flat_map(|y| (0..size).map(move |x| (x, y)))
        .map(|(x, y)| pipeline::state_total(&eval.exact, x, y).max(pipeline::state_total(&eval.estimated, x, y)))
        .max()
        .unwrap_or(0);
    write(
        &cfg.out.join("heatmap_true.pgm"),
        &pipeline::state_heatmap_pgm(size, |x, y| pipeline::state_total(&eval.exact, x, y), max),
    )?;
    write(
        &cfg.out.join("heatmap_cbf.pgm"),
        &pipeline::state_heatmap_pgm(size, |x, y| pipeline::state_total(&eval.estimated, x, y), max),
    )?;
    let diff = |x, y| {
        GridAction::ALL
            .iter()
            .map(|&a| eval.estimated.get(x, y, a).abs_diff(eval.exact.get(x, y, a)))
            .sum::<u64>()
    };
    write(&cfg.out.join("heatmap_diff.pgm"), &pipeline::state_heatmap_pgm(size, diff, max))?;
    write(&cfg.out.join("report.csv"), &eval.report_csv(&cfg.env))?;
    println!(
        "{}: {} visited pairs, exact {:.6}, over-count rate {:.6}, {:.3}s",
        cfg.env,
        eval.visited_pairs,
        eval.exact_rate(),
        eval.over_rate(),
        elapsed.as_secs_f64()
    );
    Ok(())
}

pub fn ood_eval(cfg: &RunConfig) -> Result<()> {
    prepare(cfg)?;
    let dataset = pipeline::load_or_generate_dataset(cfg)?;
    let vq = pipeline::load_or_pretrain_vqvae(cfg, &dataset)?;
    let eval = pipeline::ood_eval(cfg, &vq, &dataset)?;
    write(&cfg.out.join("ood_hist.csv"), &eval.histogram_csv(cfg.histogram_bins))?;
    write(&cfg.out.join("ood_summary.csv"), &eval.summary_csv())?;
    print!("{}", eval.summary_csv());
    Ok(())
}

pub fn usage_report(cfg: &RunConfig) -> Result<()> {
    prepare(cfg)?;
    let dataset = pipeline::load_or_generate_dataset(cfg)?;
    let vq = pipeline::load_or_pretrain_vqvae(cfg, &dataset)?;
    let usage = pipeline::usage_report(cfg, &vq, &dataset)?;
    write(&cfg.out.join("usage.csv"), &pipeline::usage_csv(&usage))?;
    println!("use rate {:.4} over {} queries", usage.rate, usage.queries);
    Ok(())
}
