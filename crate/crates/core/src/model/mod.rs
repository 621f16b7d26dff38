//! Encoder-decoder transformer whose self-attention layers select heads per
//! task, plus the residual adapter baseline.
//!
//! Sequences in a batch are packed back to back along the row axis; every
//! sample in a batch shares the same encoder and decoder task keys, so one
//! selection draw per (key, layer, head) serves the whole batch.

pub mod checkpoint;
mod config;
pub mod params;

pub use config::ModelConfig;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{cross_segments, self_segments, AttentionPool, LayerGates};
use crate::error::{Error, Result};
use crate::rng::stream;
use crate::selection::{self, draw_noise, HeadMask, RelaxedPosterior, SelectionLogits, SelectionPrior};
use crate::tensor::{Graph, Tensor, Var};
use params::{uniform, xavier, Binder, ParamId, ParamStore};

pub const EOS: usize = 0;
pub const PAD: usize = 1;

/// Task keys used to index selection logits on each side of the model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TaskKeys {
    pub encoder: usize,
    pub decoder: usize,
}

/// Model-level token ids for one batch. `tgt_in` starts with the decoder
/// start token; `tgt_out` is `tgt_in` shifted left and ends with EOS.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub src: Vec<Vec<usize>>,
    pub tgt_in: Vec<Vec<usize>>,
    pub tgt_out: Vec<Vec<usize>>,
    pub keys: TaskKeys,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.src.len()
    }

    pub fn is_empty(&self) -> bool {
        self.src.is_empty()
    }

    pub fn target_tokens(&self) -> usize {
        self.tgt_out.iter().map(Vec::len).sum()
    }
}

/// Where the Gumbel noise of a forward pass comes from.
#[derive(Clone, Copy, Debug)]
pub enum NoiseMode<'t> {
    /// Noise-free posterior (inference).
    Off,
    /// Fresh draws from the options' random stream.
    Sample,
    /// Noise and masks recorded by an earlier pass; gates become smooth
    /// functions of the logits around the recorded point.
    Replay(&'t SelectionTrace),
}

pub struct ForwardOptions<'r> {
    pub tau: f64,
    pub noise: NoiseMode<'r>,
    pub dropout: bool,
    pub rng: Option<&'r mut ChaCha8Rng>,
}

impl ForwardOptions<'_> {
    /// Deterministic evaluation: no noise, no dropout.
    pub fn inference() -> Self {
        ForwardOptions {
            tau: 1.0,
            noise: NoiseMode::Off,
            dropout: false,
            rng: None,
        }
    }
}

/// Draw made for one selective layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerDraw {
    pub noise: Vec<f64>,
    pub q: Vec<f64>,
    pub bits: Vec<bool>,
}

/// Selection draws of one forward pass, encoder layers first.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SelectionTrace {
    pub layers: Vec<LayerDraw>,
}

#[derive(Debug, Default)]
pub struct ForwardRecord {
    pub trace: SelectionTrace,
    /// KL of the noise-free posterior from the prior, summed over layers.
    pub kl: Option<Var>,
    /// Heads evaluated by each self-attention layer (encoder then decoder).
    pub head_evals: Vec<usize>,
}

#[derive(Clone, Debug)]
struct Norm {
    gain: ParamId,
    bias: ParamId,
}

impl Norm {
    fn new(store: &mut ParamStore, prefix: &str, d: usize) -> Self {
        Norm {
            gain: store.add(format!("{prefix}.gain"), Tensor::new(vec![d], vec![1.0; d]).unwrap()),
            bias: store.add(format!("{prefix}.bias"), Tensor::zeros(&[d])),
        }
    }

    fn forward(&self, g: &mut Graph, b: &mut Binder<'_>, x: Var) -> Result<Var> {
        let (gain, bias) = (b.var(g, self.gain), b.var(g, self.bias));
        g.layer_norm(x, gain, bias)
    }
}

#[derive(Clone, Debug)]
struct Ffn {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

impl Ffn {
    fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, prefix: &str, d: usize, hidden: usize) -> Self {
        Ffn {
            w1: store.add(format!("{prefix}.w1"), xavier(rng, d, hidden)),
            b1: store.add(format!("{prefix}.b1"), Tensor::zeros(&[hidden])),
            w2: store.add(format!("{prefix}.w2"), xavier(rng, hidden, d)),
            b2: store.add(format!("{prefix}.b2"), Tensor::zeros(&[d])),
        }
    }

    fn forward(&self, g: &mut Graph, b: &mut Binder<'_>, x: Var) -> Result<Var> {
        let (w1, b1, w2, b2) = (
            b.var(g, self.w1),
            b.var(g, self.b1),
            b.var(g, self.w2),
            b.var(g, self.b2),
        );
        let h = g.matmul(x, w1)?;
        let h = g.add_bias(h, b1)?;
        let h = g.relu(h);
        let o = g.matmul(h, w2)?;
        g.add_bias(o, b2)
    }
}

/// Residual bottleneck `x + up(relu(down(norm(x))))`.
#[derive(Clone, Debug)]
pub struct AdapterLayer {
    norm: Norm,
    down: ParamId,
    b_down: ParamId,
    up: ParamId,
    b_up: ParamId,
}

impl AdapterLayer {
    fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, prefix: &str, d: usize, dim: usize) -> Self {
        AdapterLayer {
            norm: Norm::new(store, &format!("{prefix}.norm"), d),
            down: store.add(format!("{prefix}.down"), xavier(rng, d, dim)),
            b_down: store.add(format!("{prefix}.b_down"), Tensor::zeros(&[dim])),
            // Zero up-projection: the adapter starts as the identity.
            up: store.add(format!("{prefix}.up"), Tensor::zeros(&[dim, d])),
            b_up: store.add(format!("{prefix}.b_up"), Tensor::zeros(&[d])),
        }
    }

    fn forward(&self, g: &mut Graph, b: &mut Binder<'_>, x: Var) -> Result<Var> {
        let h = self.norm.forward(g, b, x)?;
        let (down, bd, up, bu) = (
            b.var(g, self.down),
            b.var(g, self.b_down),
            b.var(g, self.up),
            b.var(g, self.b_up),
        );
        let h = g.matmul(h, down)?;
        let h = g.add_bias(h, bd)?;
        let h = g.relu(h);
        let h = g.matmul(h, up)?;
        let h = g.add_bias(h, bu)?;
        g.add(x, h)
    }
}

#[derive(Clone, Debug)]
struct Adapters {
    dim: usize,
    /// Directions (encoder key, decoder key) that own an adapter stack.
    directions: Vec<TaskKeys>,
    encoder: Vec<Vec<AdapterLayer>>,
    decoder: Vec<Vec<AdapterLayer>>,
}

#[derive(Clone, Debug)]
struct EncoderLayer {
    attn: AttentionPool,
    logits: Option<ParamId>,
    norm1: Norm,
    ffn: Ffn,
    norm2: Norm,
}

#[derive(Clone, Debug)]
struct DecoderLayer {
    attn: AttentionPool,
    logits: Option<ParamId>,
    norm1: Norm,
    cross: AttentionPool,
    norm2: Norm,
    ffn: Ffn,
    norm3: Norm,
}

#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    params: ParamStore,
    src_embed: ParamId,
    tgt_embed: ParamId,
    out_w: ParamId,
    out_b: ParamId,
    encoder: Vec<EncoderLayer>,
    decoder: Vec<DecoderLayer>,
    /// 0/1 flags of task keys seen in training; non-trainable.
    seen_keys: ParamId,
    adapters: Option<Adapters>,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = stream(seed, "init");
        let mut store = ParamStore::new();
        let d = config.d_model;
        let src_embed = store.add("src_embed", uniform(&mut rng, &[config.vocab_src, d], 0.1));
        let tgt_embed = store.add("tgt_embed", uniform(&mut rng, &[config.vocab_tgt, d], 0.1));

        let selective_pool = |sel: bool| {
            if sel {
                (config.candidates, config.strategy)
            } else {
                (config.heads, selection::Strategy::Shared)
            }
        };

        let mut encoder = Vec::with_capacity(config.enc_layers);
        for l in 0..config.enc_layers {
            let p = format!("enc{l}");
            let sel = config.encoder_selective();
            let (cands, strategy) = selective_pool(sel);
            let attn = AttentionPool::new(
                &mut store,
                &mut rng,
                &format!("{p}.self"),
                d,
                config.heads,
                cands,
                strategy,
            )?;
            let logits = sel.then(|| store.add(format!("{p}.select"), Tensor::zeros(&[config.task_keys, cands])));
            let norm1 = Norm::new(&mut store, &format!("{p}.norm1"), d);
            let ffn = Ffn::new(&mut store, &mut rng, &format!("{p}.ffn"), d, config.ffn);
            let norm2 = Norm::new(&mut store, &format!("{p}.norm2"), d);
            encoder.push(EncoderLayer {
                attn,
                logits,
                norm1,
                ffn,
                norm2,
            });
        }

        let mut decoder = Vec::with_capacity(config.dec_layers);
        for l in 0..config.dec_layers {
            let p = format!("dec{l}");
            let sel = config.decoder_selective();
            let (cands, strategy) = selective_pool(sel);
            let attn = AttentionPool::new(
                &mut store,
                &mut rng,
                &format!("{p}.self"),
                d,
                config.heads,
                cands,
                strategy,
            )?;
            let logits = sel.then(|| store.add(format!("{p}.select"), Tensor::zeros(&[config.task_keys, cands])));
            let norm1 = Norm::new(&mut store, &format!("{p}.norm1"), d);
            let cross = AttentionPool::new(
                &mut store,
                &mut rng,
                &format!("{p}.cross"),
                d,
                config.heads,
                config.heads,
                selection::Strategy::Shared,
            )?;
            let norm2 = Norm::new(&mut store, &format!("{p}.norm2"), d);
            let ffn = Ffn::new(&mut store, &mut rng, &format!("{p}.ffn"), d, config.ffn);
            let norm3 = Norm::new(&mut store, &format!("{p}.norm3"), d);
            decoder.push(DecoderLayer {
                attn,
                logits,
                norm1,
                cross,
                norm2,
                ffn,
                norm3,
            });
        }

        let out_w = store.add("out_w", xavier(&mut rng, d, config.vocab_tgt));
        let out_b = store.add("out_b", Tensor::zeros(&[config.vocab_tgt]));
        let seen_keys = store.add("seen_keys", Tensor::zeros(&[config.task_keys]));
        store.set_trainable(seen_keys, false);

        let mut model = Model {
            config,
            params: store,
            src_embed,
            tgt_embed,
            out_w,
            out_b,
            encoder,
            decoder,
            seen_keys,
            adapters: None,
        };
        // Selection logits are pinned when there is no choice to make.
        if model.config.candidates == model.config.heads {
            for id in model.selection_param_ids() {
                model.params.set_trainable(id, false);
            }
        }
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.numel() - self.config.task_keys
    }

    pub fn selection_param_ids(&self) -> Vec<ParamId> {
        self.encoder
            .iter()
            .filter_map(|l| l.logits)
            .chain(self.decoder.iter().filter_map(|l| l.logits))
            .collect()
    }

    /// Number of stored selection logit scalars.
    pub fn selection_param_count(&self) -> usize {
        self.selection_param_ids()
            .into_iter()
            .map(|id| self.params.tensor(id).numel())
            .sum()
    }

    /// Freezes or unfreezes every selection logit.
    pub fn set_selection_trainable(&mut self, flag: bool) {
        for id in self.selection_param_ids() {
            self.params.set_trainable(id, flag);
        }
    }

    /// Selection logits as a `[task][layer][head]` array.
    pub fn selection_logits(&self) -> Option<SelectionLogits> {
        let ids = self.selection_param_ids();
        if ids.is_empty() {
            return None;
        }
        let (t, h) = (self.config.task_keys, self.config.candidates);
        let mut values = Vec::with_capacity(t * ids.len() * h);
        for task in 0..t {
            for &id in &ids {
                values.extend_from_slice(self.params.tensor(id).row(task));
            }
        }
        SelectionLogits::from_values(t, ids.len(), h, values).ok()
    }

    pub fn mark_seen(&mut self, key: usize) -> Result<()> {
        if key >= self.config.task_keys {
            return Err(Error::Input(format!(
                "task key {key} outside the {} configured keys",
                self.config.task_keys
            )));
        }
        self.params.tensor_mut(self.seen_keys).data_mut()[key] = 1.0;
        Ok(())
    }

    pub fn is_seen(&self, key: usize) -> bool {
        key < self.config.task_keys && self.params.tensor(self.seen_keys).data()[key] > 0.5
    }

    fn selection_prior(&self) -> Option<SelectionPrior> {
        SelectionPrior::new(self.config.heads, self.config.candidates).ok()
    }

    /// Logit row of `key`, or the mean of the seen rows for keys the model
    /// was never trained on.
    fn logit_row(&self, g: &mut Graph, b: &mut Binder<'_>, id: ParamId, key: usize) -> Result<Var> {
        if self.is_seen(key) {
            let table = b.var(g, id);
            return g.gather(table, &[key]);
        }
        let table = self.params.tensor(id);
        let seen: Vec<usize> = (0..self.config.task_keys).filter(|&k| self.is_seen(k)).collect();
        let rows: Vec<usize> = if seen.is_empty() {
            (0..self.config.task_keys).collect()
        } else {
            seen
        };
        let h = table.last_dim();
        let mut mean = vec![0.0; h];
        for &r in &rows {
            mean.iter_mut().zip(table.row(r)).for_each(|(m, v)| *m += v);
        }
        mean.iter_mut().for_each(|m| *m /= rows.len() as f64);
        Ok(g.constant(Tensor::new(vec![1, h], mean)?))
    }

    fn layer_gates(
        &self,
        g: &mut Graph,
        b: &mut Binder<'_>,
        logits: ParamId,
        key: usize,
        record: &mut ForwardRecord,
        opts: &mut ForwardOptions<'_>,
    ) -> Result<LayerGates> {
        let h = self.config.candidates;
        let row = self.logit_row(g, b, logits, key)?;
        // Draws are recorded encoder layers first, matching replay order.
        let index = record.trace.layers.len();
        let pinned = self.config.candidates == self.config.heads;
        let (noise, replay) = match opts.noise {
            // With H' == H every head is selected; drawing noise would only
            // advance the stream that dropout also uses.
            NoiseMode::Off => (vec![0.0; h], None),
            NoiseMode::Sample if pinned => (vec![0.0; h], None),
            NoiseMode::Sample => {
                let rng = opts
                    .rng
                    .as_deref_mut()
                    .ok_or_else(|| Error::contract("sampling selection needs a random stream"))?;
                (draw_noise(rng, h), None)
            }
            NoiseMode::Replay(trace) => {
                let d = trace
                    .layers
                    .get(index)
                    .ok_or_else(|| Error::contract("replay trace shorter than model"))?;
                (d.noise.clone(), Some(d))
            }
        };
        let q = g.gumbel_sigmoid(row, &noise, opts.tau)?;
        let q_vals = g.value(q).data().to_vec();
        let bits = match replay {
            Some(d) => d.bits.clone(),
            None => {
                let post = RelaxedPosterior::new(1, h, q_vals.clone(), !matches!(opts.noise, NoiseMode::Off))?;
                selection::select(self.config.strategy, &post, self.config.heads)?
                    .bits()
                    .to_vec()
            }
        };
        let gates = selection::straight_through_gates(g, q, &bits, replay.map(|d| d.q.as_slice()))?;

        if let Some(prior) = self.selection_prior() {
            let clean = g.gumbel_sigmoid(row, &vec![0.0; h], opts.tau)?;
            let kl = g.kl_bernoulli(clean, prior.p_select())?;
            record.kl = Some(match record.kl {
                Some(acc) => g.add(acc, kl)?,
                None => kl,
            });
        }
        record.trace.layers.push(LayerDraw {
            noise,
            q: q_vals,
            bits: bits.clone(),
        });
        Ok(LayerGates { bits, gates })
    }

    fn embed(
        &self,
        g: &mut Graph,
        b: &mut Binder<'_>,
        table: ParamId,
        seqs: &[Vec<usize>],
        vocab: usize,
        opts: &mut ForwardOptions<'_>,
    ) -> Result<Var> {
        if seqs.is_empty() || seqs.iter().any(Vec::is_empty) {
            return Err(Error::Input("empty sequence".into()));
        }
        let flat: Vec<usize> = seqs.iter().flatten().copied().collect();
        if let Some(&bad) = flat.iter().find(|&&t| t >= vocab) {
            return Err(Error::Input(format!("token id {bad} outside vocabulary of {vocab}")));
        }
        let d = self.config.d_model;
        let t = b.var(g, table);
        let e = g.gather(t, &flat)?;
        let e = g.scale(e, (d as f64).sqrt());
        let lens: Vec<usize> = seqs.iter().map(Vec::len).collect();
        let pe = g.constant(positional_encoding(&lens, d));
        let x = g.add(e, pe)?;
        self.dropout(g, x, opts)
    }

    fn dropout(&self, g: &mut Graph, x: Var, opts: &mut ForwardOptions<'_>) -> Result<Var> {
        let p = self.config.dropout;
        if !opts.dropout || p == 0.0 {
            return Ok(x);
        }
        let rng = opts
            .rng
            .as_deref_mut()
            .ok_or_else(|| Error::contract("dropout needs a random stream"))?;
        let keep = 1.0 / (1.0 - p);
        let mask = (0..g.value(x).numel())
            .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep })
            .collect();
        g.dropout(x, mask)
    }

    fn adapter_index(&self, keys: TaskKeys) -> Result<Option<usize>> {
        match &self.adapters {
            None => Ok(None),
            Some(a) => a
                .directions
                .iter()
                .position(|&d| d == keys)
                .map(Some)
                .ok_or_else(|| Error::Input(format!("no adapter for direction {}->{}", keys.encoder, keys.decoder))),
        }
    }

    /// Encoder over packed source sequences.
    pub fn encode_graph(
        &self,
        g: &mut Graph,
        b: &mut Binder<'_>,
        src: &[Vec<usize>],
        keys: TaskKeys,
        opts: &mut ForwardOptions<'_>,
        record: &mut ForwardRecord,
    ) -> Result<Var> {
        let adapter = self.adapter_index(keys)?;
        let mut x = self.embed(g, b, self.src_embed, src, self.config.vocab_src, opts)?;
        let lens: Vec<usize> = src.iter().map(Vec::len).collect();
        let segs = self_segments(&lens);
        for (l, layer) in self.encoder.iter().enumerate() {
            let gates = match layer.logits {
                Some(id) => Some(self.layer_gates(g, b, id, keys.encoder, record, opts)?),
                None => None,
            };
            let a = layer.attn.forward(g, b, x, x, &segs, false, gates.as_ref())?;
            record.head_evals.push(a.head_evals);
            let a = self.dropout(g, a.output, opts)?;
            let r = g.add(x, a)?;
            x = layer.norm1.forward(g, b, r)?;
            let f = layer.ffn.forward(g, b, x)?;
            let f = self.dropout(g, f, opts)?;
            let r = g.add(x, f)?;
            x = layer.norm2.forward(g, b, r)?;
            if let (Some(ai), Some(ad)) = (adapter, &self.adapters) {
                x = ad.encoder[ai][l].forward(g, b, x)?;
            }
        }
        Ok(x)
    }

    /// Decoder over packed target prefixes; returns `[rows, vocab_tgt]`
    /// logits.
    #[allow(clippy::too_many_arguments)]
    pub fn decode_graph(
        &self,
        g: &mut Graph,
        b: &mut Binder<'_>,
        tgt_in: &[Vec<usize>],
        enc_out: Var,
        src_lens: &[usize],
        keys: TaskKeys,
        opts: &mut ForwardOptions<'_>,
        record: &mut ForwardRecord,
    ) -> Result<Var> {
        if tgt_in.len() != src_lens.len() {
            return Err(Error::contract("source and target batch sizes differ"));
        }
        let adapter = self.adapter_index(keys)?;
        let mut x = self.embed(g, b, self.tgt_embed, tgt_in, self.config.vocab_tgt, opts)?;
        let lens: Vec<usize> = tgt_in.iter().map(Vec::len).collect();
        let segs = self_segments(&lens);
        let xsegs = cross_segments(&lens, src_lens);
        for (l, layer) in self.decoder.iter().enumerate() {
            let gates = match layer.logits {
                Some(id) => Some(self.layer_gates(g, b, id, keys.decoder, record, opts)?),
                None => None,
            };
            let a = layer.attn.forward(g, b, x, x, &segs, true, gates.as_ref())?;
            record.head_evals.push(a.head_evals);
            let a = self.dropout(g, a.output, opts)?;
            let r = g.add(x, a)?;
            x = layer.norm1.forward(g, b, r)?;
            let c = layer.cross.forward(g, b, x, enc_out, &xsegs, false, None)?;
            let c = self.dropout(g, c.output, opts)?;
            let r = g.add(x, c)?;
            x = layer.norm2.forward(g, b, r)?;
            let f = layer.ffn.forward(g, b, x)?;
            let f = self.dropout(g, f, opts)?;
            let r = g.add(x, f)?;
            x = layer.norm3.forward(g, b, r)?;
            if let (Some(ai), Some(ad)) = (adapter, &self.adapters) {
                x = ad.decoder[ai][l].forward(g, b, x)?;
            }
        }
        let (w, bias) = (b.var(g, self.out_w), b.var(g, self.out_b));
        let logits = g.matmul(x, w)?;
        g.add_bias(logits, bias)
    }

    /// Full teacher-forced forward pass of a batch.
    pub fn forward(
        &self,
        g: &mut Graph,
        b: &mut Binder<'_>,
        batch: &Batch,
        opts: &mut ForwardOptions<'_>,
    ) -> Result<(Var, ForwardRecord)> {
        if batch.is_empty() || batch.tgt_in.len() != batch.len() || batch.tgt_out.len() != batch.len() {
            return Err(Error::Input("malformed batch".into()));
        }
        if batch.tgt_in.iter().zip(&batch.tgt_out).any(|(a, b)| a.len() != b.len()) {
            return Err(Error::Input("target input and output lengths differ".into()));
        }
        let mut record = ForwardRecord::default();
        let enc = self.encode_graph(g, b, &batch.src, batch.keys, opts, &mut record)?;
        let src_lens: Vec<usize> = batch.src.iter().map(Vec::len).collect();
        let logits = self.decode_graph(g, b, &batch.tgt_in, enc, &src_lens, batch.keys, opts, &mut record)?;
        Ok((logits, record))
    }

    /// Deterministic encoder output for one source sequence.
    pub fn encode(&self, tokens: &[usize], keys: TaskKeys) -> Result<Tensor> {
        let mut g = Graph::new();
        let mut b = Binder::new(&self.params, false);
        let mut rec = ForwardRecord::default();
        let out = self.encode_graph(
            &mut g,
            &mut b,
            &[tokens.to_vec()],
            keys,
            &mut ForwardOptions::inference(),
            &mut rec,
        )?;
        Ok(g.value(out).clone())
    }

    /// Deterministic decoder logits `[prefix_len, vocab_tgt]` for one
    /// target prefix against a precomputed encoder output.
    pub fn decode(&self, prefix: &[usize], enc_out: &Tensor, keys: TaskKeys) -> Result<Tensor> {
        let mut g = Graph::new();
        let mut b = Binder::new(&self.params, false);
        let mut rec = ForwardRecord::default();
        let enc = g.constant(enc_out.clone());
        let mut opts = ForwardOptions::inference();
        let out = self.decode_graph(
            &mut g,
            &mut b,
            &[prefix.to_vec()],
            enc,
            &[enc_out.shape()[0]],
            keys,
            &mut opts,
            &mut rec,
        )?;
        Ok(g.value(out).clone())
    }

    /// Greedy decoding from `start` until EOS or `max_len` tokens.
    pub fn greedy_generate(&self, src: &[usize], keys: TaskKeys, start: usize, max_len: usize) -> Result<Vec<usize>> {
        Ok(self
            .greedy_generate_batch(&[src.to_vec()], keys, start, max_len)?
            .remove(0))
    }

    /// Batched greedy decoding; all sources share the task keys. Outputs
    /// exclude the start token and the terminating EOS.
    pub fn greedy_generate_batch(
        &self,
        srcs: &[Vec<usize>],
        keys: TaskKeys,
        start: usize,
        max_len: usize,
    ) -> Result<Vec<Vec<usize>>> {
        if max_len == 0 {
            return Err(Error::contract("max_len must be at least 1"));
        }
        if srcs.is_empty() {
            return Ok(Vec::new());
        }
        let mut g = Graph::new();
        let mut b = Binder::new(&self.params, false);
        let mut opts = ForwardOptions::inference();
        let mut rec = ForwardRecord::default();
        let enc = self.encode_graph(&mut g, &mut b, srcs, keys, &mut opts, &mut rec)?;
        let enc_draws = rec.trace.layers.len();
        let src_lens: Vec<usize> = srcs.iter().map(Vec::len).collect();
        let mut prefixes: Vec<Vec<usize>> = vec![vec![start]; srcs.len()];
        let mut done = vec![false; srcs.len()];
        let vocab = self.config.vocab_tgt;
        for _ in 0..max_len {
            rec.trace.layers.truncate(enc_draws);
            let logits = self.decode_graph(&mut g, &mut b, &prefixes, enc, &src_lens, keys, &mut opts, &mut rec)?;
            let values = g.value(logits);
            let step = prefixes[0].len();
            for (i, p) in prefixes.iter_mut().enumerate() {
                let next = if done[i] {
                    EOS
                } else {
                    let row = values.row(i * step + step - 1);
                    argmax(&row[..vocab])
                };
                if next == EOS {
                    done[i] = true;
                }
                p.push(next);
            }
            if done.iter().all(|&d| d) {
                break;
            }
        }
        Ok(prefixes
            .into_iter()
            .map(|p| p[1..].iter().copied().take_while(|&t| t != EOS).collect())
            .collect())
    }

    /// Noise-free masks of one direction over all selective layers,
    /// encoder layers (keyed by `keys.encoder`) first. `None` for a model
    /// without selection.
    pub fn masks(&self, keys: TaskKeys) -> Result<Option<HeadMask>> {
        let layers: Vec<(ParamId, usize)> = self
            .encoder
            .iter()
            .filter_map(|l| l.logits.map(|id| (id, keys.encoder)))
            .chain(
                self.decoder
                    .iter()
                    .filter_map(|l| l.logits.map(|id| (id, keys.decoder))),
            )
            .collect();
        if layers.is_empty() {
            return Ok(None);
        }
        let mut g = Graph::new();
        let mut b = Binder::new(&self.params, false);
        let h = self.config.candidates;
        let mut parts = Vec::with_capacity(layers.len());
        for (id, key) in layers {
            let row = self.logit_row(&mut g, &mut b, id, key)?;
            let q = g.gumbel_sigmoid(row, &vec![0.0; h], 1.0)?;
            let post = RelaxedPosterior::new(1, h, g.value(q).data().to_vec(), false)?;
            parts.push(selection::select(self.config.strategy, &post, self.config.heads)?);
        }
        Ok(Some(HeadMask::stack(&parts)?))
    }

    /// Masks of the self-attention layers that would run for `keys`; all
    /// heads for layers without selection.
    pub fn layer_masks(&self, keys: TaskKeys) -> Result<HeadMask> {
        if let Some(m) = self.masks(keys)? {
            return Ok(m);
        }
        let layers = self.config.enc_layers + self.config.dec_layers;
        Ok(HeadMask::all(layers, self.config.heads))
    }

    /// Attaches one adapter stack per direction after every encoder and
    /// decoder layer and freezes everything else.
    pub fn adapter_mode(&mut self, adapter_dim: usize, directions: &[TaskKeys], seed: u64) -> Result<()> {
        if self.adapters.is_some() {
            return Err(Error::contract("adapters already attached"));
        }
        if adapter_dim == 0 || directions.is_empty() {
            return Err(Error::config(
                "adapter mode needs a positive width and at least one direction",
            ));
        }
        let ids: Vec<ParamId> = self.params.ids().collect();
        for id in ids {
            self.params.set_trainable(id, false);
        }
        let mut rng = stream(seed, "adapters");
        let d = self.config.d_model;
        let mut encoder = Vec::new();
        let mut decoder = Vec::new();
        for (t, dir) in directions.iter().enumerate() {
            let tag = format!("adapter{t}_{}_{}", dir.encoder, dir.decoder);
            encoder.push(
                (0..self.config.enc_layers)
                    .map(|l| AdapterLayer::new(&mut self.params, &mut rng, &format!("{tag}.enc{l}"), d, adapter_dim))
                    .collect(),
            );
            decoder.push(
                (0..self.config.dec_layers)
                    .map(|l| AdapterLayer::new(&mut self.params, &mut rng, &format!("{tag}.dec{l}"), d, adapter_dim))
                    .collect(),
            );
        }
        self.config.adapter_dim = Some(adapter_dim);
        self.adapters = Some(Adapters {
            dim: adapter_dim,
            directions: directions.to_vec(),
            encoder,
            decoder,
        });
        Ok(())
    }

    pub fn adapter_directions(&self) -> Option<&[TaskKeys]> {
        self.adapters.as_ref().map(|a| a.directions.as_slice())
    }

    pub fn adapter_dim(&self) -> Option<usize> {
        self.adapters.as_ref().map(|a| a.dim)
    }

    pub fn has_adapter_for(&self, keys: TaskKeys) -> bool {
        self.adapter_directions().is_some_and(|d| d.contains(&keys))
    }
}

fn argmax(row: &[f64]) -> usize {
    row.iter()
        .enumerate()
        .fold(
            (0, f64::NEG_INFINITY),
            |best, (i, &v)| if v > best.1 { (i, v) } else { best },
        )
        .0
}

/// Sinusoidal position table for packed sequences (positions restart at 0
/// for every sequence).
pub fn positional_encoding(lens: &[usize], d: usize) -> Tensor {
    let total: usize = lens.iter().sum();
    let mut data = Vec::with_capacity(total * d);
    for &n in lens {
        for pos in 0..n {
            for i in 0..d {
                let rate = 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
                let angle = pos as f64 / rate;
                data.push(if i % 2 == 0 { angle.sin() } else { angle.cos() });
            }
        }
    }
    Tensor::new(vec![total, d], data).expect("positional table shape")
}
