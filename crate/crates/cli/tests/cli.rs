//! End-to-end runs of the `vqcount` binary with small settings.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

const SMALL_VQ: &[&str] = &[
    "--set",
    "vq_hidden=16",
    "--set",
    "vq_steps=30",
    "--set",
    "vq_batch=64",
    "--set",
    "codebook_size=16",
    "--set",
    "latent_dim=16",
    "--set",
    "episodes=10",
    "--set",
    "queries=2000",
];

fn vqcount(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vqcount"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = vqcount(args);
    assert!(
        out.status.success(),
        "vqcount {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn run_in(dir: &Path, cmd: &str, extra: &[&str]) -> String {
    let out = dir.to_str().unwrap();
    let mut args = vec![cmd, "--out", out];
    args.extend_from_slice(extra);
    ok(&args)
}

fn read(dir: &Path, name: &str) -> String {
    fs::read_to_string(dir.join(name)).unwrap_or_else(|e| panic!("{name}: {e}"))
}

fn csv_rows(text: &str) -> Vec<Vec<String>> {
    text.lines().skip(1).map(|l| l.split(',').map(str::to_string).collect()).collect()
}

#[test]
fn gen_data_on_grid_writes_dataset_and_counts() {
    let dir = TempDir::new().unwrap();
    run_in(dir.path(), "gen-data", &["--set", "env=grid8", "--seed", "4"]);
    for f in ["dataset.bin", "dataset.csv", "counts.csv", "config.txt"] {
        assert!(dir.path().join(f).exists(), "{f} missing");
    }
    let counts = read(dir.path(), "counts.csv");
    assert!(counts.starts_with("x,y,action,count\n"));
    let total: u64 = csv_rows(&counts).iter().map(|r| r[3].parse::<u64>().unwrap()).sum();
    assert_eq!(total, 10_000);
    assert_eq!(read(dir.path(), "dataset.csv").lines().count(), 10_001);
}

#[test]
fn gen_data_rerun_is_byte_identical() {
    let (a, b) = (TempDir::new().unwrap(), TempDir::new().unwrap());
    for d in [&a, &b] {
        run_in(d.path(), "gen-data", &["--set", "episodes=15", "--seed", "9"]);
    }
    for f in ["dataset.csv", "dataset.bin"] {
        assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap(), "{f}");
    }
}

#[test]
fn expert_metadata_return_matches_resum() {
    let dir = TempDir::new().unwrap();
    let stdout = run_in(dir.path(), "gen-data", &["--set", "policy=expert", "--set", "episodes=12", "--seed", "2"]);
    let reported: f64 = stdout.trim().rsplit(' ').next().unwrap().parse().unwrap();
    let mut best = f64::NEG_INFINITY;
    let mut ret = 0.0;
    let rows = csv_rows(&read(dir.path(), "dataset.csv"));
    for (i, r) in rows.iter().enumerate() {
        ret += r[6].parse::<f64>().unwrap();
        let done = r[11] == "1";
        // An episode also ends where the next row does not continue it.
        let cut = rows.get(i + 1).is_none_or(|n| n[0] != r[7] || n[1] != r[8] || n[2] != r[9] || n[3] != r[10]);
        if done || cut {
            best = best.max(ret);
            ret = 0.0;
        }
    }
    assert!((best - reported).abs() < 1e-9, "re-sum {best} vs metadata {reported}");
}

#[test]
fn pretrain_sweep_over_codebook_counts() {
    for h in ["1", "2", "4", "8"] {
        let dir = TempDir::new().unwrap();
        run_in(dir.path(), "pretrain-vqvae", &[SMALL_VQ, &["--codebooks", h, "--seed", "3"]].concat());
        let log = read(dir.path(), "vq_loss.csv");
        assert_eq!(log.lines().count(), 31, "H={h}");
        let usage = csv_rows(&read(dir.path(), "usage.csv"));
        assert_eq!(usage.len(), h.parse::<usize>().unwrap() + 1, "H={h}");
        assert!(read(dir.path(), "config.txt").contains(&format!("codebooks={h}\n")));
    }
}

#[test]
fn usage_report_breakdown_sums_to_total_and_no_fcm_is_recorded() {
    for flag in [None, Some("--no-fcm")] {
        let dir = TempDir::new().unwrap();
        let mut extra = SMALL_VQ.to_vec();
        extra.extend(["--seed", "6"]);
        extra.extend(flag);
        run_in(dir.path(), "usage-report", &extra);
        let rows = csv_rows(&read(dir.path(), "usage.csv"));
        let (total, per) = rows.split_last().unwrap();
        assert_eq!(total[0], "total");
        let used: usize = per.iter().map(|r| r[1].parse::<usize>().unwrap()).sum();
        let size: usize = per.iter().map(|r| r[2].parse::<usize>().unwrap()).sum();
        assert_eq!(used, total[1].parse::<usize>().unwrap());
        assert_eq!(size, total[2].parse::<usize>().unwrap());
        let rate: f64 = total[3].parse().unwrap();
        assert!((rate - used as f64 / size as f64).abs() < 1e-12);
        let fcm = if flag.is_some() { "use_fcm=false\n" } else { "use_fcm=true\n" };
        assert!(read(dir.path(), "config.txt").contains(fcm));
    }
}

#[test]
fn ood_histogram_counts_every_sample() {
    let dir = TempDir::new().unwrap();
    run_in(dir.path(), "ood-eval", &[SMALL_VQ, &["--seed", "1", "--set", "histogram_bins=20"]].concat());
    let hist = read(dir.path(), "ood_hist.csv");
    assert!(hist.starts_with("bin_lo,bin_hi,clean,noise_0.25,noise_0.5,random\n"));
    let rows = csv_rows(&hist);
    assert_eq!(rows.len(), 20);
    for c in 2..6 {
        let n: usize = rows.iter().map(|r| r[c].parse::<usize>().unwrap()).sum();
        assert_eq!(n, 2000);
    }
    let summary = csv_rows(&read(dir.path(), "ood_summary.csv"));
    assert_eq!(summary.len(), 4);
}

#[test]
fn count_eval_writes_tables_heatmaps_and_report() {
    let dir = TempDir::new().unwrap();
    run_in(dir.path(), "count-eval", &["--set", "env=grid16-obstacles", "--seed", "2"]);
    for f in ["counts_true.csv", "counts_cbf.csv", "heatmap_true.pgm", "heatmap_cbf.pgm", "heatmap_diff.pgm", "report.csv"] {
        assert!(dir.path().join(f).exists(), "{f} missing");
    }
    assert!(read(dir.path(), "heatmap_true.pgm").starts_with("P2\n16 16\n"));
    assert_eq!(read(dir.path(), "counts_true.csv"), read(dir.path(), "counts_cbf.csv"));
}

#[test]
fn train_agent_on_grid_and_point_mass() {
    let grid = TempDir::new().unwrap();
    run_in(grid.path(), "train-agent", &["--set", "env=grid8-trap", "--set", "tabular_steps=200", "--seed", "1"]);
    assert_eq!(read(grid.path(), "q_table.csv").lines().count(), 65);
    assert!(read(grid.path(), "metrics.csv").starts_with("eval_return,dataset_best_return,beta\n"));

    let pm = TempDir::new().unwrap();
    let mut extra = SMALL_VQ.to_vec();
    extra.extend([
        "--set", "hidden=16", "--set", "epochs=2", "--set", "steps_per_epoch=10", "--set", "batch_size=16",
        "--set", "eval_episodes=2", "--seed", "1",
    ]);
    run_in(pm.path(), "train-agent", &extra);
    for f in ["agent.bin", "filter.bin", "vqvae.bin", "metrics.csv"] {
        assert!(pm.path().join(f).exists(), "{f} missing");
    }
    let metrics = read(pm.path(), "metrics.csv");
    assert!(metrics.starts_with(
        "epoch,critic_loss,ood_loss,actor_loss,mean_penalty,mean_count,eval_return_mean,eval_return_std,alpha\n"
    ));
    assert_eq!(metrics.lines().count(), 3);
}

#[test]
fn saved_dataset_and_model_are_reused() {
    let first = TempDir::new().unwrap();
    run_in(first.path(), "pretrain-vqvae", &[SMALL_VQ, &["--seed", "5"]].concat());
    let data = first.path().join("dataset.bin");
    run_in(first.path(), "gen-data", &["--set", "episodes=10", "--seed", "5"]);
    let model = first.path().join("vqvae.bin");
    let second = TempDir::new().unwrap();
    let data_kv = format!("dataset={}", data.display());
    let model_kv = format!("vqvae={}", model.display());
    let mut extra = SMALL_VQ.to_vec();
    extra.extend(["--set", &data_kv, "--set", &model_kv, "--seed", "5"]);
    run_in(second.path(), "usage-report", &extra);
    assert_eq!(read(first.path(), "usage.csv"), read(second.path(), "usage.csv"));
}

#[test]
fn bad_input_exits_nonzero_with_message() {
    let dir = TempDir::new().unwrap();
    let out_dir = dir.path().to_str().unwrap();
    for args in [
        vec!["gen-data", "--out", out_dir, "--set", "env=nowhere"],
        vec!["gen-data", "--out", out_dir, "--set", "no_such_key=1"],
        vec!["pretrain-vqvae", "--out", out_dir, "--set", "latent_dim=10", "--codebooks", "3"],
        vec!["usage-report", "--out", out_dir, "--set", "vqvae=/nonexistent/model.bin"],
    ] {
        let out = vqcount(&args);
        assert!(!out.status.success(), "{args:?} should fail");
        assert!(!out.stderr.is_empty(), "{args:?} printed no diagnostic");
    }
}
