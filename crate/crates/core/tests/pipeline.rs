use std::fs;
use std::path::Path;
use std::process::Command;

use headsel::analysis::{parse_metrics_csv, spearman};
use headsel::experiment::{
    cmd_ablation_encdec, cmd_analyze, cmd_dump_data, cmd_eval, cmd_sweep_hprime, cmd_train, read_masks, run_on,
    ExperimentConfig, Method, Suite, SuiteData,
};
use headsel::model::checkpoint::Checkpoint;
use headsel::tasks::{interference_suite, parse_samples, zero_shot_suite, TaskSpec};
use headsel::training::{checkpoint_average, LOG_HEADER};
use tempfile::tempdir;

const TINY: &str = "d_model = 16\nffn = 16\nenc_layers = 1\ndec_layers = 1\nhprime = 8\n\
                    lr = 0.003\nmax_steps = 150\nbatch_size = 32\neval_batch = 128\n";

fn tiny(method: &str, out: &Path) -> ExperimentConfig {
    let mut c = ExperimentConfig::parse(TINY).unwrap();
    c.set("strategy", method).unwrap();
    c.out = out.to_path_buf();
    c
}

fn shrink(tasks: Vec<TaskSpec>, n_train: usize) -> Vec<TaskSpec> {
    tasks
        .into_iter()
        .map(|t| TaskSpec {
            n_train,
            n_valid: 16,
            n_test: 16,
            ..t
        })
        .collect()
}

fn assert_run_dir(dir: &Path, tasks: usize, layers: usize, heads: usize) {
    for f in ["config.txt", "train_log.tsv", "metrics.csv", "model.ckpt"] {
        assert!(dir.join(f).is_file(), "{f} missing in {}", dir.display());
    }
    let log = fs::read_to_string(dir.join("train_log.tsv")).unwrap();
    assert_eq!(log.lines().next(), Some(LOG_HEADER));
    assert!(log.lines().count() >= 2);
    let metrics = parse_metrics_csv(&fs::read_to_string(dir.join("metrics.csv")).unwrap()).unwrap();
    assert_eq!(metrics.len(), tasks);
    let masks = read_masks(dir).unwrap();
    assert_eq!(masks.len(), tasks);
    for (_, m) in &masks {
        assert_eq!((m.layers(), m.heads()), (layers, heads));
    }
    let ckpts = fs::read_dir(dir.join("checkpoints")).unwrap().count();
    assert!(ckpts >= 1);
    Checkpoint::read(&dir.join("model.ckpt")).unwrap();
}

#[test]
fn every_strategy_fills_the_results_directory() {
    let tmp = tempdir().unwrap();
    for (method, heads) in [("shared", 4), ("subset", 8), ("group", 8), ("adapter", 4)] {
        let dir = tmp.path().join(method);
        let mut cfg = tiny(method, &dir);
        cfg.adapter_steps = 40;
        let run = cmd_train(&cfg).unwrap();
        assert_run_dir(&dir, 4, 2, heads);
        assert_eq!(ExperimentConfig::load(&dir.join("config.txt")).unwrap(), cfg);
        assert_eq!(run.metrics.iter().filter(|m| m.samples > 0).count(), 4);
        if method == "adapter" {
            assert!(dir.join("adapter_log.tsv").is_file());
        }
        if method == "shared" {
            assert!(run.masks.iter().all(|(_, m)| m.bits().iter().all(|&b| b)));
        }
    }
}

#[test]
fn runs_are_reproducible_from_the_seed_and_eval_matches() {
    let tmp = tempdir().unwrap();
    let a = cmd_train(&tiny("group", &tmp.path().join("a"))).unwrap();
    let b = cmd_train(&tiny("group", &tmp.path().join("b"))).unwrap();
    let bytes = |p: &Path| fs::read(p).unwrap();
    assert_eq!(bytes(&a.dir.join("model.ckpt")), bytes(&b.dir.join("model.ckpt")));
    assert_eq!(bytes(&a.dir.join("metrics.csv")), bytes(&b.dir.join("metrics.csv")));
    assert_eq!(bytes(&a.dir.join("train_log.tsv")), bytes(&b.dir.join("train_log.tsv")));

    let other = cmd_train(&tiny("group", &tmp.path().join("c")).with_seed(2)).unwrap();
    assert_ne!(bytes(&a.dir.join("model.ckpt")), bytes(&other.dir.join("model.ckpt")));

    let cfg = tiny("group", &tmp.path().join("eval"));
    let again = cmd_eval(&cfg, &a.dir.join("model.ckpt")).unwrap();
    assert_eq!(again, a.metrics);
}

#[test]
fn averaging_a_checkpoint_with_itself_is_the_identity() {
    let tmp = tempdir().unwrap();
    let run = cmd_train(&tiny("subset", &tmp.path().join("r"))).unwrap();
    let p = run.dir.join("model.ckpt");
    let avg = checkpoint_average(&[&p, &p, &p]).unwrap();
    assert_eq!(avg.params(), run.model.params());
}

#[test]
fn analyze_is_idempotent_and_isolates_failures() {
    let tmp = tempdir().unwrap();
    let a = cmd_train(&tiny("group", &tmp.path().join("g"))).unwrap();
    let b = cmd_train(&tiny("shared", &tmp.path().join("s"))).unwrap();
    let broken = tmp.path().join("broken");
    fs::create_dir_all(broken.join("masks")).unwrap();
    fs::write(broken.join("masks/00_x.csv"), "layer,0\n0,7\n").unwrap();
    let dirs = vec![a.dir.clone(), broken, b.dir.clone()];
    let combined = tmp.path().join("combined");

    let first = cmd_analyze(&dirs, Some(&combined)).unwrap();
    assert!(first[0].is_ok() && first[1].is_err() && first[2].is_ok());
    let snapshot = |d: &Path| ["sharing.csv", "head_load.csv", "balance.csv"].map(|f| fs::read(d.join(f)).unwrap());
    let before = (
        snapshot(&a.dir),
        snapshot(&b.dir),
        fs::read(combined.join("sharing_long.csv")).unwrap(),
    );
    let second = cmd_analyze(&dirs, Some(&combined)).unwrap();
    let after = (
        snapshot(&a.dir),
        snapshot(&b.dir),
        fs::read(combined.join("sharing_long.csv")).unwrap(),
    );
    assert_eq!(before, after);
    assert_eq!(first[0].as_ref().unwrap(), second[0].as_ref().unwrap());

    let shared = first[2].as_ref().unwrap();
    assert!(shared.balance.iter().all(|&cv| cv == 0.0));
    let load = fs::read_to_string(combined.join("head_load_long.csv")).unwrap();
    assert!(load.starts_with("run,layer,head,load\n"));
    assert!(load.contains(&format!("{},0,0,", a.dir.display())));
}

#[test]
fn sweep_records_skipped_cells_and_ablation_varies_layers() {
    let tmp = tempdir().unwrap();
    let mut cfg = tiny("group", &tmp.path().join("sweep"));
    cfg.hprimes = vec![4, 6, 8];
    cfg.seeds = vec![1];
    cfg.train.max_steps = 40;
    let rows = cmd_sweep_hprime(&cfg).unwrap();
    assert_eq!(rows.len(), 3);
    assert!(rows[0].result.is_some() && rows[1].result.is_none() && rows[2].result.is_some());
    let csv = fs::read_to_string(cfg.out.join("sweep_hprime.csv")).unwrap();
    assert!(csv.lines().nth(2).unwrap().starts_with("group,6,1,skipped"));
    assert!(cfg.out.join("sweep_hprime_means.csv").is_file());
    assert!(cfg.out.join("group_h8_s1/metrics.csv").is_file());

    cfg.out = tmp.path().join("ablation");
    let rows = cmd_ablation_encdec(&cfg).unwrap();
    let layers: Vec<usize> = rows.iter().map(|r| r.selective_layers).collect();
    assert_eq!(layers, vec![2, 1, 1]);
    assert_eq!(rows[0].selection_params, 2 * rows[1].selection_params);
    assert!(cfg.out.join("ablation_encdec.csv").is_file());

    cfg.method = Method::Shared;
    assert!(cmd_sweep_hprime(&cfg).is_err());
}

#[test]
fn dump_data_writes_parseable_tsv() {
    let tmp = tempdir().unwrap();
    let mut cfg = tiny("group", tmp.path());
    cfg.suite = Suite::ZeroShot;
    let files = cmd_dump_data(&cfg).unwrap();
    // Seven trained pairs with three splits, two test-only pairs.
    assert_eq!(files.len(), 7 * 3 + 2);
    let test = files
        .iter()
        .find(|p| p.ends_with("reversed_to_shifted.test.tsv"))
        .unwrap();
    let samples = parse_samples(&fs::read_to_string(test).unwrap()).unwrap();
    assert_eq!(samples.len(), 300);
    assert!(samples.iter().all(|s| (s.src_tag, s.tgt_tag) == (1, 2)));
}

#[test]
fn negated_elbo_trends_down_for_every_strategy_and_suite() {
    let (zs_train, zs_test) = zero_shot_suite();
    let suites = [
        (
            "interference",
            SuiteData::new(shrink(interference_suite(), 64), Vec::new(), 1).unwrap(),
        ),
        (
            "zero_shot",
            SuiteData::new(shrink(zs_train, 40), shrink(zs_test, 0), 1).unwrap(),
        ),
    ];
    let tmp = tempdir().unwrap();
    for (name, data) in &suites {
        for method in ["shared", "subset", "group"] {
            let mut cfg = tiny(method, &tmp.path().join(format!("{name}_{method}")));
            let per_epoch: usize = headsel::training::group_by_keys(&data.train)
                .iter()
                .map(|(_, v)| v.len().div_ceil(cfg.train.batch_size))
                .sum();
            cfg.train.max_steps = 8 * per_epoch;
            cfg.train.patience = 100;
            let run = run_on(&cfg, data).unwrap();
            let losses: Vec<f64> = run.report.epochs.iter().map(|e| e.train_loss).collect();
            let epochs: Vec<f64> = (0..losses.len()).map(|i| i as f64).collect();
            let rho = spearman(&epochs, &losses);
            assert!(losses.len() >= 6, "{name}/{method}: only {} epochs", losses.len());
            assert!(rho < -0.8, "{name}/{method}: rho {rho}, losses {losses:?}");
        }
    }
}

fn cli(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_headsel")).args(args).output().unwrap()
}

#[test]
fn command_line_runs_and_flags_override_the_config_file() {
    let tmp = tempdir().unwrap();
    let conf = tmp.path().join("exp.conf");
    fs::write(&conf, format!("{TINY}strategy = shared\nseed = 9\nbeta = 0.5\n")).unwrap();
    let out = tmp.path().join("run");
    let o = cli(&[
        "train",
        "--config",
        conf.to_str().unwrap(),
        "--strategy",
        "subset",
        "--seed",
        "3",
        "--beta",
        "0.02",
        "--tau-schedule",
        "linear:2:0.5:0.5",
        "--set",
        "max_steps=30",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let echo = ExperimentConfig::load(&out.join("config.txt")).unwrap();
    assert_eq!(echo.method, Method::Subset);
    assert_eq!(echo.train.seed, 3);
    assert_eq!(echo.train.kl_weight, 0.02);
    assert_eq!(echo.train.max_steps, 30);
    assert_eq!(echo.model.d_model, 16);
    assert_eq!(
        String::from_utf8(o.stdout).unwrap(),
        fs::read_to_string(out.join("metrics.csv")).unwrap()
    );

    let o = cli(&["analyze", out.to_str().unwrap()]);
    assert!(o.status.success());
    let o = cli(&[
        "analyze",
        out.to_str().unwrap(),
        tmp.path().join("nope").to_str().unwrap(),
    ]);
    assert!(!o.status.success());
    assert!(out.join("sharing.csv").is_file());

    assert!(!cli(&["train", "--strategy", "mixture"]).status.success());
    assert!(!cli(&["train", "--set", "no_such_key=1"]).status.success());
    assert!(!cli(&["frobnicate"]).status.success());
}
