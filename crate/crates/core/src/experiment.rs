//! Experiment runner behind the command line: configuration, results
//! directories, sweeps, ablations and post-hoc analysis.
//!
//! A run directory holds `config.txt` (echo that reproduces the run),
//! `train_log.tsv`, `metrics.csv`, `masks/NN_task.csv`, the last epoch
//! checkpoints under `checkpoints/` and the averaged `model.ckpt`.

use std::collections::BTreeMap;
use std::fmt;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::analysis::{self, metrics_csv, TaskMetrics};
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig, TaskKeys};
use crate::rng::derive_seed;
use crate::selection::{HeadMask, Strategy};
use crate::tasks::{self, generate_all, Sample, Split, TaskSpec, TokenLayout};
use crate::training::{self, train, TrainConfig, TrainReport};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Suite {
    Interference,
    ZeroShot,
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(match self {
            Suite::Interference => "interference",
            Suite::ZeroShot => "zero_shot",
        })
    }
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "interference" => Ok(Suite::Interference),
            "zero_shot" | "zero-shot" => Ok(Suite::ZeroShot),
            _ => Err(Error::config(format!("unknown suite `{s}`"))),
        }
    }
}

/// What to train: a selection strategy or the adapter baseline on top of a
/// shared backbone.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Method {
    Shared,
    Subset,
    Group,
    Adapter,
}

impl Method {
    pub fn strategy(self) -> Strategy {
        match self {
            Method::Shared | Method::Adapter => Strategy::Shared,
            Method::Subset => Strategy::Subset,
            Method::Group => Strategy::Group,
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Method::Adapter => f.pad("adapter"),
            m => m.strategy().fmt(f),
        }
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "adapter" => Method::Adapter,
            other => match other.parse::<Strategy>()? {
                Strategy::Shared => Method::Shared,
                Strategy::Subset => Method::Subset,
                Strategy::Group => Method::Group,
            },
        })
    }
}

/// Generated data of one suite for one seed.
#[derive(Clone, Debug)]
pub struct SuiteData {
    pub tasks: Vec<TaskSpec>,
    /// Tasks that only have a test split (zero-shot directions).
    pub test_only: Vec<TaskSpec>,
    pub layout: TokenLayout,
    pub train: Vec<Sample>,
    pub valid: Vec<Sample>,
    pub test: Vec<Sample>,
}

impl SuiteData {
    pub fn new(tasks: Vec<TaskSpec>, test_only: Vec<TaskSpec>, seed: u64) -> Result<Self> {
        let all: Vec<TaskSpec> = tasks.iter().chain(&test_only).cloned().collect();
        let layout = TokenLayout::for_tasks(&all);
        let data_seed = derive_seed(seed, "data");
        let (mut train, mut valid, mut test) = (Vec::new(), Vec::new(), Vec::new());
        for t in &tasks {
            let [a, b, c] = generate_all(t, data_seed)?;
            train.extend(a);
            valid.extend(b);
            test.extend(c);
        }
        for t in &test_only {
            test.extend(tasks::generate(t, Split::Test, data_seed)?);
        }
        Ok(SuiteData {
            tasks,
            test_only,
            layout,
            train,
            valid,
            test,
        })
    }

    pub fn load(suite: Suite, seed: u64) -> Result<Self> {
        match suite {
            Suite::Interference => Self::new(tasks::interference_suite(), Vec::new(), seed),
            Suite::ZeroShot => {
                let (train, test) = tasks::zero_shot_suite();
                Self::new(train, test, seed)
            }
        }
    }

    pub fn all_tasks(&self) -> impl Iterator<Item = &TaskSpec> {
        self.tasks.iter().chain(&self.test_only)
    }

    pub fn name_of(&self, keys: TaskKeys) -> String {
        self.all_tasks()
            .find(|t| t.keys() == keys)
            .map(|t| t.name.clone())
            .unwrap_or_else(|| format!("{}_{}", keys.encoder, keys.decoder))
    }

    pub fn task_keys(&self) -> usize {
        self.layout.tags
    }

    /// Restricts to one training task (for separately trained models).
    pub fn only(&self, name: &str) -> Result<SuiteData> {
        let spec = self
            .tasks
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| Error::config(format!("no task `{name}` in suite")))?;
        let keep = |v: &[Sample]| -> Vec<Sample> {
            v.iter()
                .filter(|s| (s.src_tag, s.tgt_tag) == (spec.src_tag, spec.tgt_tag))
                .cloned()
                .collect()
        };
        Ok(SuiteData {
            tasks: vec![spec.clone()],
            test_only: Vec::new(),
            layout: self.layout,
            train: keep(&self.train),
            valid: keep(&self.valid),
            test: keep(&self.test),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub suite: Suite,
    pub method: Method,
    /// Candidate counts for `sweep-hprime`.
    pub hprimes: Vec<usize>,
    /// Seeds for sweeps and ablations; single runs use `train.seed`.
    pub seeds: Vec<u64>,
    pub out: PathBuf,
    pub adapter_dim: usize,
    pub adapter_steps: usize,
    pub eval_batch: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            suite: Suite::Interference,
            method: Method::Group,
            hprimes: vec![4, 8, 12, 16],
            seeds: vec![1, 2, 3, 4, 5],
            out: PathBuf::from("results"),
            adapter_dim: 16,
            adapter_steps: 1000,
            eval_batch: 64,
        }
    }
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value
        .split(',')
        .map(|s| s.trim().parse::<T>())
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|_| Error::config(format!("bad list `{value}` for `{key}`")))
}

impl ExperimentConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = || Error::config(format!("bad value `{value}` for `{key}`"));
        match key {
            "suite" => self.suite = value.parse()?,
            "strategy" | "method" => {
                self.method = value.parse()?;
                self.model.strategy = self.method.strategy();
            }
            "hprimes" => self.hprimes = parse_list(key, value)?,
            "seeds" => self.seeds = parse_list(key, value)?,
            "out" => self.out = PathBuf::from(value),
            "adapter_dim" => self.adapter_dim = value.parse().map_err(|_| bad())?,
            "adapter_steps" => self.adapter_steps = value.parse().map_err(|_| bad())?,
            "eval_batch" => self.eval_batch = value.parse().map_err(|_| bad())?,
            _ => {
                if !self.model.set(key, value)? && !self.train.set(key, value)? {
                    return Err(Error::config(format!("unknown config key `{key}`")));
                }
            }
        }
        Ok(())
    }

    /// Parses `key = value` lines; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut c = ExperimentConfig::default();
        c.apply_text(text)?;
        Ok(c)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {}: expected key = value", n + 1)))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }

    /// Full echo; parsing it yields an equal config.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut line = |k: &str, v: String| writeln!(s, "{k} = {v}").unwrap();
        line("suite", self.suite.to_string());
        line("strategy", self.method.to_string());
        line("hprimes", join(&self.hprimes));
        line("seeds", join(&self.seeds));
        line("out", self.out.display().to_string());
        line("adapter_dim", self.adapter_dim.to_string());
        line("adapter_steps", self.adapter_steps.to_string());
        line("eval_batch", self.eval_batch.to_string());
        for (k, v) in self.model.to_pairs() {
            if k != "adapter_dim" && k != "strategy" {
                line(&k, v);
            }
        }
        for (k, v) in self.train.to_pairs() {
            line(&k, v);
        }
        s
    }

    /// Model configuration for this method on `data`.
    pub fn model_config(&self, data: &SuiteData) -> ModelConfig {
        let mut m = self.model.clone();
        m.strategy = self.method.strategy();
        if m.strategy == Strategy::Shared {
            m.candidates = m.heads;
        }
        m.vocab_src = data.layout.model_vocab();
        m.vocab_tgt = data.layout.model_vocab();
        m.task_keys = data.task_keys();
        m.adapter_dim = None;
        m
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        let mut c = self.clone();
        c.train.seed = seed;
        c
    }

    pub fn with_out(&self, out: impl Into<PathBuf>) -> Self {
        let mut c = self.clone();
        c.out = out.into();
        c
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if self.eval_batch == 0 || self.adapter_dim == 0 {
            return Err(Error::config("eval_batch and adapter_dim must be positive"));
        }
        if self.seeds.is_empty() {
            return Err(Error::config("seed list is empty"));
        }
        Ok(())
    }
}

/// Everything a finished run produced.
#[derive(Debug)]
pub struct RunOutcome {
    pub dir: PathBuf,
    pub model: Model,
    pub report: TrainReport,
    pub adapter_report: Option<TrainReport>,
    /// Test metrics per task in suite order; NaN rows for tasks the method
    /// cannot serve.
    pub metrics: Vec<TaskMetrics>,
    pub masks: Vec<(String, HeadMask)>,
}

impl RunOutcome {
    fn mean_over<'a>(&self, rows: impl Iterator<Item = &'a TaskMetrics>, f: fn(&TaskMetrics) -> f64) -> f64 {
        let v: Vec<f64> = rows.map(f).collect();
        analysis::mean(&v)
    }

    /// Mean test sequence accuracy over `names` (all evaluable tasks when
    /// empty).
    pub fn mean_accuracy(&self, names: &[&str]) -> f64 {
        self.mean_over(self.select(names), |m| m.sequence_accuracy)
    }

    pub fn mean_edit_error(&self, names: &[&str]) -> f64 {
        self.mean_over(self.select(names), |m| m.edit_error)
    }

    fn select<'a>(&'a self, names: &'a [&str]) -> impl Iterator<Item = &'a TaskMetrics> {
        self.metrics
            .iter()
            .filter(move |m| (names.is_empty() && m.samples > 0) || names.contains(&m.task.as_str()))
    }

    pub fn metric(&self, task: &str) -> Option<&TaskMetrics> {
        self.metrics.iter().find(|m| m.task == task)
    }
}

fn write_log(path: &Path, report: &TrainReport) -> Result<()> {
    fs::write(path, report.log_tsv())?;
    Ok(())
}

/// Trains one model for `cfg.train.seed` and fills `cfg.out` with the run
/// directory contract.
pub fn cmd_train(cfg: &ExperimentConfig) -> Result<RunOutcome> {
    cfg.validate()?;
    let data = SuiteData::load(cfg.suite, cfg.train.seed)?;
    run_on(cfg, &data)
}

/// Like [`cmd_train`] on caller-provided data.
pub fn run_on(cfg: &ExperimentConfig, data: &SuiteData) -> Result<RunOutcome> {
    let seed = cfg.train.seed;
    let dir = cfg.out.clone();
    let ckpt_dir = dir.join("checkpoints");
    fs::create_dir_all(&ckpt_dir)?;
    fs::write(dir.join("config.txt"), cfg.to_text())?;

    let mut model = Model::new(cfg.model_config(data), derive_seed(seed, "model"))?;
    let keep = cfg.train.avg_last_k;
    let mut hook = checkpoint_hook(ckpt_dir.clone(), "", keep);
    let report = train(
        &mut model,
        &data.train,
        &data.valid,
        &data.layout,
        &cfg.train,
        &mut hook,
    )?;
    write_log(&dir.join("train_log.tsv"), &report)?;

    let mut adapter_report = None;
    if cfg.method == Method::Adapter {
        let directions: Vec<TaskKeys> = data.tasks.iter().map(TaskSpec::keys).collect();
        model.adapter_mode(cfg.adapter_dim, &directions, derive_seed(seed, "adapters"))?;
        let mut tc = cfg.train.clone();
        tc.max_steps = cfg.adapter_steps;
        tc.seed = derive_seed(seed, "adapter_training");
        let mut hook = checkpoint_hook(ckpt_dir.clone(), "adapter_", keep);
        let r = train(&mut model, &data.train, &data.valid, &data.layout, &tc, &mut hook)?;
        write_log(&dir.join("adapter_log.tsv"), &r)?;
        adapter_report = Some(r);
    }

    model.save(&dir.join("model.ckpt"), &[("seed".into(), seed.to_string())])?;
    let metrics = evaluate_suite(&model, data, cfg.eval_batch)?;
    fs::write(dir.join("metrics.csv"), metrics_csv(&metrics))?;
    let masks = write_masks(&model, data, &dir.join("masks"))?;
    Ok(RunOutcome {
        dir,
        model,
        report,
        adapter_report,
        metrics,
        masks,
    })
}

/// Saves every epoch and keeps only the newest `keep` files on disk.
fn checkpoint_hook(
    dir: PathBuf,
    prefix: &'static str,
    keep: usize,
) -> impl FnMut(&training::EpochLog, &Model) -> Result<()> {
    let mut saved: Vec<PathBuf> = Vec::new();
    move |log, m| {
        let p = dir.join(format!("{prefix}epoch_{:03}.ckpt", log.epoch));
        m.save(&p, &[("epoch".into(), log.epoch.to_string())])?;
        saved.push(p);
        if saved.len() > keep {
            fs::remove_file(saved.remove(0))?;
        }
        Ok(())
    }
}

/// Test metrics per task of the suite, in suite order. Directions without
/// an adapter in an adapter model get a NaN row with zero samples.
pub fn evaluate_suite(model: &Model, data: &SuiteData, batch: usize) -> Result<Vec<TaskMetrics>> {
    let mut rows = Vec::new();
    for spec in data.all_tasks() {
        let keys = spec.keys();
        if model.adapter_directions().is_some() && !model.has_adapter_for(keys) {
            rows.push(TaskMetrics {
                task: spec.name.clone(),
                sequence_accuracy: f64::NAN,
                token_accuracy: f64::NAN,
                edit_error: f64::NAN,
                samples: 0,
            });
            continue;
        }
        let samples: Vec<Sample> = data
            .test
            .iter()
            .filter(|s| (s.src_tag, s.tgt_tag) == (keys.encoder, keys.decoder))
            .cloned()
            .collect();
        let name = spec.name.clone();
        let mut m = training::evaluate(model, &samples, &data.layout, batch, &|_| name.clone())?;
        rows.append(&mut m);
    }
    Ok(rows)
}

fn write_masks(model: &Model, data: &SuiteData, dir: &Path) -> Result<Vec<(String, HeadMask)>> {
    fs::create_dir_all(dir)?;
    let mut out = Vec::new();
    for (i, spec) in data.all_tasks().enumerate() {
        let mask = model.layer_masks(spec.keys())?;
        mask.write_csv(&dir.join(format!("{i:02}_{}.csv", spec.name)))?;
        out.push((spec.name.clone(), mask));
    }
    Ok(out)
}

/// Evaluates a checkpoint on the test split of the configured suite and
/// seed; writes `eval_metrics.csv` into `cfg.out`.
pub fn cmd_eval(cfg: &ExperimentConfig, checkpoint: &Path) -> Result<Vec<TaskMetrics>> {
    let model = Model::load(checkpoint)?;
    let data = SuiteData::load(cfg.suite, cfg.train.seed)?;
    let metrics = evaluate_suite(&model, &data, cfg.eval_batch)?;
    fs::create_dir_all(&cfg.out)?;
    fs::write(cfg.out.join("eval_metrics.csv"), metrics_csv(&metrics))?;
    Ok(metrics)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub strategy: Method,
    pub hprime: usize,
    pub seed: u64,
    /// `None` when the cell was skipped.
    pub result: Option<(f64, f64)>,
    pub note: String,
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = String::from("strategy,hprime,seed,status,sequence_accuracy,edit_error\n");
    for r in rows {
        match r.result {
            Some((acc, err)) => writeln!(s, "{},{},{},ok,{acc:.6},{err:.6}", r.strategy, r.hprime, r.seed),
            None => writeln!(s, "{},{},{},skipped: {},,", r.strategy, r.hprime, r.seed, r.note),
        }
        .unwrap();
    }
    s
}

type SweepCell = (Method, Vec<f64>, Vec<f64>);

/// Per (strategy, H') means over completed seeds.
pub fn sweep_means(rows: &[SweepRow]) -> Vec<(Method, usize, usize, f64, f64)> {
    let mut cells: BTreeMap<(String, usize), SweepCell> = BTreeMap::new();
    for r in rows {
        if let Some((acc, err)) = r.result {
            let e = cells
                .entry((r.strategy.to_string(), r.hprime))
                .or_insert_with(|| (r.strategy, Vec::new(), Vec::new()));
            e.1.push(acc);
            e.2.push(err);
        }
    }
    cells
        .into_iter()
        .map(|((_, hp), (m, a, e))| (m, hp, a.len(), analysis::mean(&a), analysis::mean(&e)))
        .collect()
}

/// Trains the configured strategy at every H' and seed. Group cells whose
/// H' is not a multiple of H are skipped and recorded.
pub fn cmd_sweep_hprime(cfg: &ExperimentConfig) -> Result<Vec<SweepRow>> {
    cfg.validate()?;
    if !matches!(cfg.method, Method::Subset | Method::Group) {
        return Err(Error::config("sweep-hprime needs strategy subset or group"));
    }
    let mut rows = Vec::new();
    for &hp in &cfg.hprimes {
        for &seed in &cfg.seeds {
            let mut c = cfg
                .with_seed(seed)
                .with_out(cfg.out.join(format!("{}_h{hp}_s{seed}", cfg.method)));
            c.model.candidates = hp;
            let mut row = SweepRow {
                strategy: cfg.method,
                hprime: hp,
                seed,
                result: None,
                note: String::new(),
            };
            let data = SuiteData::load(c.suite, seed)?;
            if let Err(e) = c.model_config(&data).validate() {
                row.note = e.to_string().replace(',', ";");
                rows.push(row);
                continue;
            }
            let out = run_on(&c, &data)?;
            row.result = Some((out.mean_accuracy(&[]), out.mean_edit_error(&[])));
            rows.push(row);
        }
    }
    fs::create_dir_all(&cfg.out)?;
    fs::write(cfg.out.join("sweep_hprime.csv"), sweep_csv(&rows))?;
    let mut means = String::from("strategy,hprime,runs,mean_sequence_accuracy,mean_edit_error\n");
    for (m, hp, n, a, e) in sweep_means(&rows) {
        writeln!(means, "{m},{hp},{n},{a:.6},{e:.6}").unwrap();
    }
    fs::write(cfg.out.join("sweep_hprime_means.csv"), means)?;
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub variant: &'static str,
    pub seed: u64,
    pub selective_layers: usize,
    pub selection_params: usize,
    pub sequence_accuracy: f64,
    pub edit_error: f64,
}

pub const ABLATION_VARIANTS: [(&str, bool, bool); 3] = [
    ("enc_dec", true, true),
    ("enc_only", true, false),
    ("dec_only", false, true),
];

/// Selection in encoder and decoder, encoder only, decoder only; same seeds.
pub fn cmd_ablation_encdec(cfg: &ExperimentConfig) -> Result<Vec<AblationRow>> {
    cfg.validate()?;
    if !matches!(cfg.method, Method::Subset | Method::Group) {
        return Err(Error::config("ablation-encdec needs strategy subset or group"));
    }
    let mut rows = Vec::new();
    for (variant, enc, dec) in ABLATION_VARIANTS {
        for &seed in &cfg.seeds {
            let mut c = cfg.with_seed(seed).with_out(cfg.out.join(format!("{variant}_s{seed}")));
            c.model.select_in_encoder = enc;
            c.model.select_in_decoder = dec;
            let out = cmd_train(&c)?;
            rows.push(AblationRow {
                variant,
                seed,
                selective_layers: out.model.config().selective_layers(),
                selection_params: out.model.selection_param_count(),
                sequence_accuracy: out.mean_accuracy(&[]),
                edit_error: out.mean_edit_error(&[]),
            });
        }
    }
    let mut s = String::from("variant,seed,selective_layers,selection_params,sequence_accuracy,edit_error\n");
    for r in &rows {
        writeln!(
            s,
            "{},{},{},{},{:.6},{:.6}",
            r.variant, r.seed, r.selective_layers, r.selection_params, r.sequence_accuracy, r.edit_error
        )
        .unwrap();
    }
    fs::create_dir_all(&cfg.out)?;
    fs::write(cfg.out.join("ablation_encdec.csv"), s)?;
    Ok(rows)
}

/// Analyses of one run directory.
#[derive(Clone, Debug, PartialEq)]
pub struct DirAnalysis {
    pub dir: PathBuf,
    pub sharing: analysis::SharingMatrix,
    pub load: analysis::HeadLoad,
    pub balance: Vec<f64>,
}

/// Reads `masks/*.csv` in file-name order.
pub fn read_masks(dir: &Path) -> Result<Vec<(String, HeadMask)>> {
    let mask_dir = dir.join("masks");
    let mut files: Vec<PathBuf> = fs::read_dir(&mask_dir)
        .map_err(|e| Error::Input(format!("{}: {e}", mask_dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "csv"))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::Input(format!("{}: no mask files", mask_dir.display())));
    }
    files
        .iter()
        .map(|p| {
            let stem = p.file_stem().unwrap_or_default().to_string_lossy();
            let name = stem.split_once('_').map_or(stem.as_ref(), |(_, n)| n).to_string();
            Ok((name, HeadMask::read_csv(p)?))
        })
        .collect()
}

pub fn analyze_dir(dir: &Path) -> Result<DirAnalysis> {
    let masks = read_masks(dir)?;
    let sharing = analysis::sharing_matrix(&masks)?;
    let plain: Vec<HeadMask> = masks.into_iter().map(|(_, m)| m).collect();
    let load = analysis::head_load(&plain)?;
    let balance = analysis::load_balance_score(&load);
    fs::write(dir.join("sharing.csv"), sharing.to_csv())?;
    fs::write(dir.join("head_load.csv"), load.to_csv())?;
    let mut b = String::from("layer,cv\n");
    for (l, cv) in balance.iter().enumerate() {
        writeln!(b, "{l},{cv:.6}").unwrap();
    }
    fs::write(dir.join("balance.csv"), b)?;
    Ok(DirAnalysis {
        dir: dir.to_path_buf(),
        sharing,
        load,
        balance,
    })
}

/// Analyses each directory independently; a failure in one does not stop
/// the others. With `combined`, writes long-format tables with a run column
/// covering every successful directory.
pub fn cmd_analyze(dirs: &[PathBuf], combined: Option<&Path>) -> Result<Vec<Result<DirAnalysis>>> {
    let results: Vec<Result<DirAnalysis>> = dirs.iter().map(|d| analyze_dir(d)).collect();
    if let Some(out) = combined {
        fs::create_dir_all(out)?;
        let (mut sharing, mut load, mut balance) = (
            String::from("run,task_a,task_b,shared_heads\n"),
            String::from("run,layer,head,load\n"),
            String::from("run,layer,cv\n"),
        );
        for a in results.iter().flatten() {
            let run = a.dir.display().to_string();
            for (i, row) in a.sharing.counts.iter().enumerate() {
                for (j, c) in row.iter().enumerate() {
                    writeln!(sharing, "{run},{},{},{c}", a.sharing.names[i], a.sharing.names[j]).unwrap();
                }
            }
            for l in 0..a.load.layers {
                for (h, v) in a.load.layer(l).iter().enumerate() {
                    writeln!(load, "{run},{l},{h},{v}").unwrap();
                }
            }
            for (l, cv) in a.balance.iter().enumerate() {
                writeln!(balance, "{run},{l},{cv:.6}").unwrap();
            }
        }
        fs::write(out.join("sharing_long.csv"), sharing)?;
        fs::write(out.join("head_load_long.csv"), load)?;
        fs::write(out.join("balance_long.csv"), balance)?;
    }
    Ok(results)
}

/// Writes `data/<task>.<split>.tsv` for every task of the suite.
pub fn cmd_dump_data(cfg: &ExperimentConfig) -> Result<Vec<PathBuf>> {
    let data = SuiteData::load(cfg.suite, cfg.train.seed)?;
    let dir = cfg.out.join("data");
    fs::create_dir_all(&dir)?;
    let mut written = Vec::new();
    for spec in data.all_tasks() {
        for (split, set) in [
            (Split::Train, &data.train),
            (Split::Valid, &data.valid),
            (Split::Test, &data.test),
        ] {
            let rows: Vec<Sample> = set
                .iter()
                .filter(|s| (s.src_tag, s.tgt_tag) == (spec.src_tag, spec.tgt_tag))
                .cloned()
                .collect();
            if rows.is_empty() {
                continue;
            }
            let p = dir.join(format!("{}.{}.tsv", spec.name, split.name()));
            tasks::write_samples(&p, &rows)?;
            written.push(p);
        }
    }
    Ok(written)
}
