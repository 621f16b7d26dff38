//! ELBO training: sampled head selections, KL regularisation, Adam with
//! global-norm clipping, early stopping and checkpoint averaging.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

use crate::analysis::TaskMetrics;
use crate::error::{Error, Result};
use crate::model::checkpoint::Checkpoint;
use crate::model::params::{Binder, ParamId, ParamStore};
use crate::model::{Batch, ForwardOptions, Model, NoiseMode, SelectionTrace, TaskKeys};
use crate::rng::stream;
use crate::tasks::{Sample, TokenLayout};
use crate::tensor::{grad_check_with, Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum TauSchedule {
    Fixed(f64),
    /// From `from` to `to` over the first `frac` of training, then flat.
    Linear {
        from: f64,
        to: f64,
        frac: f64,
    },
}

impl TauSchedule {
    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            TauSchedule::Fixed(t) => t > 0.0,
            TauSchedule::Linear { from, to, frac } => from > 0.0 && to > 0.0 && frac > 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::config(format!("invalid temperature schedule {self}")))
        }
    }
}

impl fmt::Display for TauSchedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TauSchedule::Fixed(t) => write!(f, "fixed:{t}"),
            TauSchedule::Linear { from, to, frac } => write!(f, "linear:{from}:{to}:{frac}"),
        }
    }
}

impl FromStr for TauSchedule {
    type Err = Error;

    /// `fixed:T` or `linear:FROM:TO:FRAC`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::config(format!("bad temperature schedule `{s}`"));
        let parts: Vec<&str> = s.split(':').collect();
        let num = |i: usize| parts.get(i).and_then(|p| p.parse::<f64>().ok()).ok_or_else(bad);
        let sched = match (parts[0], parts.len()) {
            ("fixed", 2) => TauSchedule::Fixed(num(1)?),
            ("linear", 4) => TauSchedule::Linear {
                from: num(1)?,
                to: num(2)?,
                frac: num(3)?,
            },
            _ => return Err(bad()),
        };
        sched.validate()?;
        Ok(sched)
    }
}

pub fn tau_at(schedule: TauSchedule, step: usize, max_steps: usize) -> f64 {
    match schedule {
        TauSchedule::Fixed(t) => t,
        TauSchedule::Linear { from, to, frac } => {
            let span = frac * max_steps as f64;
            let progress = if span > 0.0 { (step as f64 / span).min(1.0) } else { 1.0 };
            from + (to - from) * progress
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub betas: (f64, f64),
    pub adam_eps: f64,
    pub batch_size: usize,
    pub max_steps: usize,
    pub kl_weight: f64,
    pub tau: TauSchedule,
    /// Epochs without improvement before stopping.
    pub patience: usize,
    pub avg_last_k: usize,
    pub clip_norm: f64,
    /// Learning-rate multiplier for selection logits.
    pub selection_lr_scale: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 3e-4,
            betas: (0.9, 0.98),
            adam_eps: 1e-9,
            batch_size: 32,
            max_steps: 4000,
            kl_weight: 0.01,
            tau: TauSchedule::Fixed(1.0),
            patience: 10,
            avg_last_k: 5,
            clip_norm: 1.0,
            selection_lr_scale: 1.0,
            seed: 1,
        }
    }
}

impl TrainConfig {
    // Negated comparisons also reject NaN.
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || self.batch_size == 0 || self.max_steps == 0 {
            return Err(Error::config("lr, batch_size and max_steps must be positive"));
        }
        if !(self.selection_lr_scale > 0.0) {
            return Err(Error::config("selection_lr_scale must be positive"));
        }
        if !(self.kl_weight >= 0.0) {
            return Err(Error::config("kl_weight must be non-negative"));
        }
        if self.patience == 0 || self.avg_last_k == 0 {
            return Err(Error::config("patience and avg_last_k must be at least 1"));
        }
        let (b1, b2) = self.betas;
        if !(0.0..1.0).contains(&b1) || !(0.0..1.0).contains(&b2) {
            return Err(Error::config("Adam betas must lie in [0, 1)"));
        }
        self.tau.validate()
    }

    pub fn to_pairs(&self) -> Vec<(String, String)> {
        [
            ("lr", self.lr.to_string()),
            ("beta1", self.betas.0.to_string()),
            ("beta2", self.betas.1.to_string()),
            ("adam_eps", self.adam_eps.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("max_steps", self.max_steps.to_string()),
            ("kl_weight", self.kl_weight.to_string()),
            ("tau_schedule", self.tau.to_string()),
            ("patience", self.patience.to_string()),
            ("avg_last_k", self.avg_last_k.to_string()),
            ("clip_norm", self.clip_norm.to_string()),
            ("selection_lr_scale", self.selection_lr_scale.to_string()),
            ("seed", self.seed.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }

    /// Sets one field from text; `false` for unknown keys.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        let bad = || Error::config(format!("bad value `{value}` for `{key}`"));
        let real = || value.parse::<f64>().map_err(|_| bad());
        let int = || value.parse::<usize>().map_err(|_| bad());
        match key {
            "lr" => self.lr = real()?,
            "beta1" => self.betas.0 = real()?,
            "beta2" => self.betas.1 = real()?,
            "adam_eps" => self.adam_eps = real()?,
            "batch_size" => self.batch_size = int()?,
            "max_steps" => self.max_steps = int()?,
            "kl_weight" | "beta" => self.kl_weight = real()?,
            "tau_schedule" => self.tau = value.parse()?,
            "patience" => self.patience = int()?,
            "avg_last_k" => self.avg_last_k = int()?,
            "clip_norm" => self.clip_norm = real()?,
            "selection_lr_scale" => self.selection_lr_scale = real()?,
            "seed" => self.seed = value.parse().map_err(|_| bad())?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn from_pairs(pairs: &BTreeMap<String, String>) -> Result<Self> {
        let mut c = TrainConfig::default();
        for (k, v) in pairs {
            c.set(k, v)?;
        }
        Ok(c)
    }
}

/// Mean token cross-entropy plus `beta * kl / token_count`.
pub fn elbo_loss(
    g: &mut Graph,
    logits: Var,
    targets: &[usize],
    kl: Option<Var>,
    beta: f64,
    token_count: usize,
) -> Result<Var> {
    if token_count == 0 {
        return Err(Error::contract("token_count must be positive"));
    }
    let ce = g.cross_entropy(logits, targets)?;
    match kl {
        Some(kl) if beta != 0.0 => {
            let reg = g.scale(kl, beta / token_count as f64);
            g.add(ce, reg)
        }
        _ => Ok(ce),
    }
}

#[derive(Clone, Debug)]
pub struct Adam {
    moments: Vec<Option<(Vec<f64>, Vec<f64>)>>,
    t: u64,
}

impl Adam {
    pub fn new(store: &ParamStore) -> Self {
        Adam {
            moments: vec![None; store.len()],
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One bias-corrected update of every parameter with a gradient;
    /// `lr_scale` multiplies the learning rate per parameter.
    pub fn update(
        &mut self,
        store: &mut ParamStore,
        grads: &[(ParamId, Vec<f64>)],
        cfg: &TrainConfig,
        lr_scale: &dyn Fn(ParamId) -> f64,
    ) {
        if self.moments.len() < store.len() {
            self.moments.resize(store.len(), None);
        }
        self.t += 1;
        let (b1, b2) = cfg.betas;
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        for (id, grad) in grads {
            let (m, v) = self.moments[id.index()].get_or_insert_with(|| (vec![0.0; grad.len()], vec![0.0; grad.len()]));
            let lr = cfg.lr * lr_scale(*id);
            let data = store.tensor_mut(*id).data_mut();
            for i in 0..grad.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * grad[i];
                v[i] = b2 * v[i] + (1.0 - b2) * grad[i] * grad[i];
                let mh = m[i] / c1;
                let vh = v[i] / c2;
                data[i] -= lr * mh / (vh.sqrt() + cfg.adam_eps);
            }
        }
    }
}

/// Scales gradients so their global L2 norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut [(ParamId, Vec<f64>)], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|(_, g)| g.iter())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        grads.iter_mut().flat_map(|(_, g)| g.iter_mut()).for_each(|x| *x *= s);
    }
    norm
}

#[derive(Clone, Debug)]
pub struct TrainState {
    pub step: usize,
    pub adam: Adam,
    pub best_valid: Option<f64>,
    pub epochs_since_improve: usize,
    /// Gumbel noise and dropout.
    pub rng: ChaCha8Rng,
    /// Batch order.
    pub data_rng: ChaCha8Rng,
}

impl TrainState {
    pub fn new(model: &Model, seed: u64) -> Self {
        TrainState {
            step: 0,
            adam: Adam::new(model.params()),
            best_valid: None,
            epochs_since_improve: 0,
            rng: stream(seed, "train/noise"),
            data_rng: stream(seed, "train/batches"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    pub kl: f64,
    pub grad_norm: f64,
    pub tau: f64,
}

/// One optimisation step on a batch whose samples share task keys.
pub fn train_step(model: &mut Model, batch: &Batch, state: &mut TrainState, cfg: &TrainConfig) -> Result<StepStats> {
    let tau = tau_at(cfg.tau, state.step, cfg.max_steps);
    let (loss, kl, mut grads) = {
        let mut g = Graph::new();
        let mut b = Binder::new(model.params(), true);
        let mut opts = ForwardOptions {
            tau,
            noise: NoiseMode::Sample,
            dropout: true,
            rng: Some(&mut state.rng),
        };
        let (logits, rec) = model.forward(&mut g, &mut b, batch, &mut opts)?;
        let targets: Vec<usize> = batch.tgt_out.iter().flatten().copied().collect();
        let loss = elbo_loss(&mut g, logits, &targets, rec.kl, cfg.kl_weight, batch.target_tokens())?;
        let kl = rec.kl.map_or(0.0, |k| g.scalar_value(k));
        let value = g.scalar_value(loss);
        if !value.is_finite() {
            return Err(non_finite(model, state.step, None));
        }
        g.backward(loss)?;
        (value, kl, b.grads(&g))
    };
    if let Some((id, _)) = grads.iter().find(|(_, gr)| gr.iter().any(|x| !x.is_finite())) {
        return Err(non_finite(model, state.step, Some(*id)));
    }
    let grad_norm = clip_grad_norm(&mut grads, cfg.clip_norm);
    let selection = model.selection_param_ids();
    let scale = |id: ParamId| {
        if selection.contains(&id) {
            cfg.selection_lr_scale
        } else {
            1.0
        }
    };
    state.adam.update(model.params_mut(), &grads, cfg, &scale);
    state.step += 1;
    if model.params().first_non_finite().is_some() {
        return Err(non_finite(model, state.step, None));
    }
    Ok(StepStats {
        loss,
        kl,
        grad_norm,
        tau,
    })
}

fn non_finite(model: &Model, step: usize, grad_of: Option<ParamId>) -> Error {
    let param = model
        .params()
        .first_non_finite()
        .map(str::to_string)
        .or_else(|| grad_of.map(|id| format!("{} (gradient)", model.params().param(id).name)))
        .unwrap_or_else(|| "loss".to_string());
    Error::NonFinite { step, param }
}

/// Records a validation score (higher is better) and reports whether
/// training should stop.
pub fn early_stop(state: &mut TrainState, valid_metric: f64, patience: usize) -> bool {
    match state.best_valid {
        Some(best) if valid_metric <= best => state.epochs_since_improve += 1,
        _ => {
            state.best_valid = Some(valid_metric);
            state.epochs_since_improve = 0;
        }
    }
    state.epochs_since_improve >= patience
}

/// Element-wise mean of checkpoints that share one configuration.
pub fn average_checkpoints(ckpts: &[Checkpoint]) -> Result<Checkpoint> {
    let first = ckpts
        .first()
        .ok_or_else(|| Error::Checkpoint("nothing to average".into()))?;
    let config_of = |c: &Checkpoint| -> BTreeMap<String, String> {
        crate::model::ModelConfig::from_pairs(&c.meta_map())
            .map(|m| m.to_pairs().into_iter().collect())
            .unwrap_or_default()
    };
    let reference = config_of(first);
    let mut params = first.params.clone();
    for c in &ckpts[1..] {
        if config_of(c) != reference || c.get("adapter_directions") != first.get("adapter_directions") {
            return Err(Error::Checkpoint("checkpoints have different configurations".into()));
        }
    }
    let stores: Vec<&ParamStore> = ckpts.iter().map(|c| &c.params).collect();
    average_stores(&mut params, &stores)?;
    Ok(Checkpoint {
        meta: first.meta.clone(),
        params,
    })
}

fn average_stores(out: &mut ParamStore, stores: &[&ParamStore]) -> Result<()> {
    let ids: Vec<ParamId> = out.ids().collect();
    for id in ids {
        let name = out.param(id).name.clone();
        let shape = out.tensor(id).shape().to_vec();
        let mut acc = vec![0.0; out.tensor(id).numel()];
        let mut tensors = Vec::with_capacity(stores.len());
        for s in stores {
            let sid = s
                .id(&name)
                .ok_or_else(|| Error::Checkpoint(format!("parameter `{name}` missing")))?;
            let t = s.tensor(sid);
            if t.shape() != shape.as_slice() {
                return Err(Error::Checkpoint(format!("parameter `{name}` changes shape")));
            }
            acc.iter_mut().zip(t.data()).for_each(|(a, x)| *a += x);
            tensors.push(t);
        }
        // Frozen parameters must come back bit-identical; summing and
        // dividing would round.
        let bits = |t: &Tensor| t.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        if tensors.windows(2).all(|w| bits(w[0]) == bits(w[1])) {
            *out.tensor_mut(id) = tensors[0].clone();
            continue;
        }
        let k = stores.len() as f64;
        acc.iter_mut().for_each(|a| *a /= k);
        *out.tensor_mut(id) = Tensor::new(shape, acc)?;
    }
    Ok(())
}

pub fn checkpoint_average(paths: &[&Path]) -> Result<Model> {
    let ckpts = paths.iter().map(|p| Checkpoint::read(p)).collect::<Result<Vec<_>>>()?;
    Model::from_checkpoint(&average_checkpoints(&ckpts)?)
}

/// Groups samples by task keys, preserving first-seen order.
pub fn group_by_keys(samples: &[Sample]) -> Vec<(TaskKeys, Vec<&Sample>)> {
    let mut groups: Vec<(TaskKeys, Vec<&Sample>)> = Vec::new();
    for s in samples {
        let k = TaskKeys {
            encoder: s.src_tag,
            decoder: s.tgt_tag,
        };
        match groups.iter_mut().find(|(g, _)| *g == k) {
            Some((_, v)) => v.push(s),
            None => groups.push((k, vec![s])),
        }
    }
    groups
}

/// One epoch of key-homogeneous batches in random order.
pub fn epoch_batches(
    groups: &[(TaskKeys, Vec<&Sample>)],
    layout: &TokenLayout,
    batch_size: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Batch>> {
    let mut batches = Vec::new();
    for (_, samples) in groups {
        let mut order: Vec<&Sample> = samples.clone();
        order.shuffle(rng);
        for chunk in order.chunks(batch_size) {
            batches.push(layout.batch(chunk)?);
        }
    }
    batches.shuffle(rng);
    Ok(batches)
}

/// Teacher-forced token accuracy of every key group, without noise or
/// dropout, averaged over groups.
pub fn teacher_forced_accuracy(
    model: &Model,
    samples: &[Sample],
    layout: &TokenLayout,
    batch_size: usize,
) -> Result<f64> {
    let groups = group_by_keys(samples);
    if groups.is_empty() {
        return Err(Error::Input("no validation samples".into()));
    }
    let mut total = 0.0;
    for (_, group) in &groups {
        let (mut hit, mut count) = (0usize, 0usize);
        for chunk in group.chunks(batch_size) {
            let batch = layout.batch(chunk)?;
            let mut g = Graph::new();
            let mut b = Binder::new(model.params(), false);
            let (logits, _) = model.forward(&mut g, &mut b, &batch, &mut ForwardOptions::inference())?;
            let values = g.value(logits);
            for (r, &t) in batch.tgt_out.iter().flatten().enumerate() {
                let row = values.row(r);
                let best = (0..row.len()).fold(0, |a, i| if row[i] > row[a] { i } else { a });
                hit += usize::from(best == t);
                count += 1;
            }
        }
        total += hit as f64 / count as f64;
    }
    Ok(total / groups.len() as f64)
}

/// Greedy-decoding metrics per key group, named by `name_of`.
pub fn evaluate(
    model: &Model,
    samples: &[Sample],
    layout: &TokenLayout,
    batch_size: usize,
    name_of: &dyn Fn(TaskKeys) -> String,
) -> Result<Vec<TaskMetrics>> {
    let mut out = Vec::new();
    for (keys, group) in group_by_keys(samples) {
        let mut hyps = Vec::with_capacity(group.len());
        let mut refs = Vec::with_capacity(group.len());
        for chunk in group.chunks(batch_size) {
            let srcs: Vec<Vec<usize>> = chunk.iter().map(|s| layout.source(s)).collect();
            let max_len = chunk.iter().map(|s| s.tgt.len()).max().unwrap_or(0) + 2;
            let outs = model.greedy_generate_batch(&srcs, keys, layout.tag_token(keys.decoder), max_len)?;
            for (s, o) in chunk.iter().zip(outs) {
                hyps.push(o.iter().map(|&t| layout.symbol(t).unwrap_or(usize::MAX)).collect());
                refs.push(s.tgt.clone());
            }
        }
        out.push(TaskMetrics::compute(&name_of(keys), &hyps, &refs)?);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub kl: f64,
    pub valid_metric: f64,
    pub tau: f64,
}

pub const LOG_HEADER: &str = "epoch\ttrain_loss\tkl\tvalid_metric\ttau";

impl fmt::Display for EpochLog {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}\t{:.6}\t{:.6}\t{:.6}\t{:.4}",
            self.epoch, self.train_loss, self.kl, self.valid_metric, self.tau
        )
    }
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub epochs: Vec<EpochLog>,
    pub steps: usize,
    pub stopped_early: bool,
    /// Number of epoch snapshots averaged into the final parameters.
    pub averaged: usize,
}

impl TrainReport {
    pub fn log_tsv(&self) -> String {
        let mut s = format!("{LOG_HEADER}\n");
        for e in &self.epochs {
            s.push_str(&format!("{e}\n"));
        }
        s
    }
}

/// Trains until `max_steps` or early stopping, then replaces the parameters
/// with the mean of the last `avg_last_k` epoch snapshots. `on_epoch` sees
/// each epoch's log line and parameters.
pub fn train(
    model: &mut Model,
    train_set: &[Sample],
    valid_set: &[Sample],
    layout: &TokenLayout,
    cfg: &TrainConfig,
    on_epoch: &mut dyn FnMut(&EpochLog, &Model) -> Result<()>,
) -> Result<TrainReport> {
    cfg.validate()?;
    let groups = group_by_keys(train_set);
    if groups.is_empty() {
        return Err(Error::Input("empty training set".into()));
    }
    for (k, _) in &groups {
        model.mark_seen(k.encoder)?;
        model.mark_seen(k.decoder)?;
    }
    let mut state = TrainState::new(model, cfg.seed);
    let mut epochs = Vec::new();
    let mut snapshots: Vec<ParamStore> = Vec::new();
    let mut stopped_early = false;
    while state.step < cfg.max_steps {
        let batches = epoch_batches(&groups, layout, cfg.batch_size, &mut state.data_rng)?;
        let (mut loss_sum, mut kl_sum, mut n, mut tau) = (0.0, 0.0, 0usize, 0.0);
        for batch in &batches {
            if state.step >= cfg.max_steps {
                break;
            }
            let s = train_step(model, batch, &mut state, cfg)?;
            loss_sum += s.loss;
            kl_sum += s.kl;
            tau = s.tau;
            n += 1;
        }
        let valid = teacher_forced_accuracy(model, valid_set, layout, cfg.batch_size.max(32))?;
        let log = EpochLog {
            epoch: epochs.len() + 1,
            train_loss: loss_sum / n as f64,
            kl: kl_sum / n as f64,
            valid_metric: valid,
            tau,
        };
        on_epoch(&log, model)?;
        epochs.push(log);
        snapshots.push(model.params().clone());
        if snapshots.len() > cfg.avg_last_k {
            snapshots.remove(0);
        }
        if early_stop(&mut state, valid, cfg.patience) {
            stopped_early = true;
            break;
        }
    }
    let averaged = snapshots.len();
    if averaged > 1 {
        let refs: Vec<&ParamStore> = snapshots.iter().collect();
        average_stores(model.params_mut(), &refs)?;
    }
    Ok(TrainReport {
        epochs,
        steps: state.step,
        stopped_early,
        averaged,
    })
}

/// Largest relative error between the analytic gradient of the ELBO and
/// central differences, over every parameter of `model`. Selection noise is
/// drawn once from `seed` and replayed, so the objective is smooth in the
/// selection logits; dropout is off.
pub fn model_grad_check(model: &Model, batch: &Batch, tau: f64, beta: f64, seed: u64, eps: f64) -> Result<f64> {
    // Unseen keys read a constant fallback row; mark the batch keys seen as
    // training would, so the selection logits are on the tape.
    let mut model = model.clone();
    model.mark_seen(batch.keys.encoder)?;
    model.mark_seen(batch.keys.decoder)?;
    let model = &model;
    let mut rng = stream(seed, "gradcheck");
    let trace: SelectionTrace = {
        let mut g = Graph::new();
        let mut b = Binder::new(model.params(), false);
        let mut opts = ForwardOptions {
            tau,
            noise: NoiseMode::Sample,
            dropout: false,
            rng: Some(&mut rng),
        };
        model.forward(&mut g, &mut b, batch, &mut opts)?.1.trace
    };
    let targets: Vec<usize> = batch.tgt_out.iter().flatten().copied().collect();
    let inputs: Vec<Tensor> = model.params().iter().map(|p| p.tensor.clone()).collect();
    grad_check_with(
        |g, xs| {
            let mut b = Binder::with_vars(model.params(), xs)?;
            let mut opts = ForwardOptions {
                tau,
                noise: NoiseMode::Replay(&trace),
                dropout: false,
                rng: None,
            };
            let (logits, rec) = model.forward(g, &mut b, batch, &mut opts)?;
            elbo_loss(g, logits, &targets, rec.kl, beta, batch.target_tokens())
        },
        &inputs,
        eps,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tau_schedule_examples() {
        let lin = TauSchedule::Linear {
            from: 2.0,
            to: 0.5,
            frac: 0.5,
        };
        assert_eq!(tau_at(TauSchedule::Fixed(1.0), 77, 100), 1.0);
        assert_eq!(tau_at(lin, 0, 100), 2.0);
        assert_eq!(tau_at(lin, 50, 100), 0.5);
        assert_eq!(tau_at(lin, 100, 100), 0.5);
        assert!((tau_at(lin, 25, 100) - 1.25).abs() < 1e-12);
        assert_eq!("linear:2:0.5:0.5".parse::<TauSchedule>().unwrap(), lin);
        assert_eq!(lin.to_string().parse::<TauSchedule>().unwrap(), lin);
        assert!("fixed:0".parse::<TauSchedule>().is_err());
        assert!("cosine:1".parse::<TauSchedule>().is_err());
    }

    #[test]
    fn elbo_examples() {
        let mut g = Graph::new();
        let logits = g.constant(Tensor::new(vec![2, 5], vec![0.0; 10]).unwrap());
        let loss = elbo_loss(&mut g, logits, &[1, 3], None, 1.0, 2).unwrap();
        assert!((g.scalar_value(loss) - 5f64.ln()).abs() < 1e-12);

        let q = g.constant(Tensor::vector(vec![0.9]));
        let kl = g.kl_bernoulli(q, 0.5).unwrap();
        let one = g.constant(Tensor::new(vec![1, 5], vec![0.0; 5]).unwrap());
        let plain = elbo_loss(&mut g, one, &[2], Some(kl), 0.0, 1).unwrap();
        let with_kl = elbo_loss(&mut g, one, &[2], Some(kl), 1.0, 1).unwrap();
        assert_eq!(g.scalar_value(plain), 5f64.ln());
        assert!((g.scalar_value(with_kl) - 5f64.ln() - 0.36803).abs() < 1e-4);
        assert!(elbo_loss(&mut g, one, &[2], None, 1.0, 0).is_err());
    }

    #[test]
    fn early_stop_examples() {
        let m = Model::new(
            crate::model::ModelConfig {
                d_model: 8,
                ffn: 8,
                ..Default::default()
            },
            0,
        )
        .unwrap();
        let mut s = TrainState::new(&m, 0);
        assert!((0..20).all(|i| !early_stop(&mut s, i as f64, 3)));

        let mut s = TrainState::new(&m, 0);
        assert!(!early_stop(&mut s, 0.5, 3));
        assert!(!early_stop(&mut s, 0.5, 3));
        assert!(!early_stop(&mut s, 0.5, 3));
        assert!(early_stop(&mut s, 0.5, 3));

        let mut s = TrainState::new(&m, 0);
        early_stop(&mut s, 0.5, 3);
        early_stop(&mut s, 0.4, 3);
        early_stop(&mut s, 0.5, 3);
        assert!(!early_stop(&mut s, 0.6, 3));
        assert_eq!(s.epochs_since_improve, 0);
    }

    #[test]
    fn clipping_scales_to_the_bound() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::zeros(&[2]));
        let mut g = vec![(id, vec![3.0, 4.0])];
        assert_eq!(clip_grad_norm(&mut g, 1.0), 5.0);
        assert!((g[0].1[0] - 0.6).abs() < 1e-15 && (g[0].1[1] - 0.8).abs() < 1e-15);
        let mut small = vec![(id, vec![0.3])];
        clip_grad_norm(&mut small, 1.0);
        assert_eq!(small[0].1, vec![0.3]);
    }

    #[test]
    fn config_pairs_round_trip() {
        let c = TrainConfig {
            tau: TauSchedule::Linear {
                from: 2.0,
                to: 0.5,
                frac: 0.5,
            },
            kl_weight: 0.1,
            ..TrainConfig::default()
        };
        let map = c.to_pairs().into_iter().collect();
        assert_eq!(TrainConfig::from_pairs(&map).unwrap(), c);
    }
}
