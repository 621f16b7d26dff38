//! Multi-head attention over a pool of candidate heads.
//!
//! Each candidate owns its query/key/value projections. The layer owns one
//! `d x d` output projection whose row blocks belong to output *positions*:
//! block `k` projects whatever head output lands in position `k` of the
//! concatenation. Under the subset rule that is the `k`-th smallest selected
//! head index, under the group rule it is the winner of group `k`.

use rand::Rng;

use crate::error::{Error, Result};
use crate::model::params::{xavier, Binder, ParamId, ParamStore};
use crate::selection::{GroupPartition, Strategy};
use crate::tensor::{AttentionSegment, Graph, Tensor, Var};

/// Projections of one candidate head. Keys carry no bias: a key bias shifts
/// every score of a query by the same amount and cancels in the softmax.
#[derive(Clone, Debug)]
pub struct HeadParams {
    pub wq: ParamId,
    pub bq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub bv: ParamId,
}

#[derive(Clone, Debug)]
pub struct AttentionPool {
    pub heads: Vec<HeadParams>,
    pub wo: ParamId,
    pub bo: ParamId,
    pub active: usize,
    pub strategy: Strategy,
    pub d_model: usize,
}

/// Hard mask and straight-through gates of one layer for one task.
#[derive(Clone, Debug)]
pub struct LayerGates {
    pub bits: Vec<bool>,
    pub gates: Vec<Var>,
}

#[derive(Clone, Copy, Debug)]
pub struct MhaOutput {
    /// Head outputs in output-position order, before projection.
    pub concat: Var,
    pub output: Var,
    /// Number of heads whose attention was actually evaluated.
    pub head_evals: usize,
}

impl AttentionPool {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        prefix: &str,
        d_model: usize,
        active: usize,
        candidates: usize,
        strategy: Strategy,
    ) -> Result<Self> {
        if active == 0 || !d_model.is_multiple_of(active) {
            return Err(Error::config(format!(
                "model width {d_model} not divisible by {active} heads"
            )));
        }
        if candidates < active {
            return Err(Error::config("fewer candidates than active heads"));
        }
        if strategy == Strategy::Shared && candidates != active {
            return Err(Error::config("shared attention needs H' == H"));
        }
        if strategy == Strategy::Group {
            GroupPartition::new(active, candidates)?;
        }
        let dh = d_model / active;
        let heads = (0..candidates)
            .map(|h| HeadParams {
                wq: store.add(format!("{prefix}.head{h}.wq"), xavier(rng, d_model, dh)),
                bq: store.add(format!("{prefix}.head{h}.bq"), Tensor::zeros(&[dh])),
                wk: store.add(format!("{prefix}.head{h}.wk"), xavier(rng, d_model, dh)),
                wv: store.add(format!("{prefix}.head{h}.wv"), xavier(rng, d_model, dh)),
                bv: store.add(format!("{prefix}.head{h}.bv"), Tensor::zeros(&[dh])),
            })
            .collect();
        let wo = store.add(format!("{prefix}.wo"), xavier(rng, d_model, d_model));
        let bo = store.add(format!("{prefix}.bo"), Tensor::zeros(&[d_model]));
        Ok(AttentionPool {
            heads,
            wo,
            bo,
            active,
            strategy,
            d_model,
        })
    }

    pub fn candidates(&self) -> usize {
        self.heads.len()
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.active
    }

    /// Positions in the output concatenation and the head filling each one.
    fn assignment(&self, gates: Option<&LayerGates>) -> Result<Vec<usize>> {
        let Some(lg) = gates else {
            if self.strategy != Strategy::Shared && self.candidates() != self.active {
                return Err(Error::contract("selective attention called without gates"));
            }
            return Ok((0..self.active).collect());
        };
        if lg.bits.len() != self.candidates() || lg.gates.len() != self.candidates() {
            return Err(Error::contract("gate count differs from candidate count"));
        }
        let selected: Vec<usize> = (0..self.candidates()).filter(|&h| lg.bits[h]).collect();
        if selected.len() != self.active {
            return Err(Error::contract(format!(
                "mask selects {} heads, layer needs exactly {}",
                selected.len(),
                self.active
            )));
        }
        if self.strategy == Strategy::Group {
            let part = GroupPartition::new(self.active, self.candidates())?;
            // With exactly H selected, one per group also means sorted order
            // matches group order.
            for (g, &h) in selected.iter().enumerate() {
                if part.group_of(h) != g {
                    return Err(Error::contract(format!(
                        "group mask must select exactly one head per group, group {g} violated"
                    )));
                }
            }
        }
        Ok(selected)
    }

    /// Multi-head attention with queries from `x_q` and keys/values from
    /// `x_kv` (the same tensor for self-attention). Only the selected heads
    /// are evaluated; each selected head output is scaled by its gate.
    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        g: &mut Graph,
        binder: &mut Binder<'_>,
        x_q: Var,
        x_kv: Var,
        segments: &[AttentionSegment],
        causal: bool,
        gates: Option<&LayerGates>,
    ) -> Result<MhaOutput> {
        let order = self.assignment(gates)?;
        let mut blocks = Vec::with_capacity(order.len());
        for &h in &order {
            let out = attention_head(g, binder, x_q, x_kv, &self.heads[h], segments, causal)?;
            let out = match gates {
                Some(lg) => g.mul_scalar(out, lg.gates[h])?,
                None => out,
            };
            blocks.push(out);
        }
        let concat = g.concat(&blocks)?;
        let wo = binder.var(g, self.wo);
        let bo = binder.var(g, self.bo);
        let proj = g.matmul(concat, wo)?;
        let output = g.add_bias(proj, bo)?;
        Ok(MhaOutput {
            concat,
            output,
            head_evals: order.len(),
        })
    }
}

/// One head: `softmax(Q K^T / sqrt(d_head)) V`.
pub fn attention_head(
    g: &mut Graph,
    binder: &mut Binder<'_>,
    x_q: Var,
    x_kv: Var,
    head: &HeadParams,
    segments: &[AttentionSegment],
    causal: bool,
) -> Result<Var> {
    let (wq, bq, wk, wv, bv) = (
        binder.var(g, head.wq),
        binder.var(g, head.bq),
        binder.var(g, head.wk),
        binder.var(g, head.wv),
        binder.var(g, head.bv),
    );
    let q = g.matmul(x_q, wq)?;
    let q = g.add_bias(q, bq)?;
    let k = g.matmul(x_kv, wk)?;
    let v = g.matmul(x_kv, wv)?;
    let v = g.add_bias(v, bv)?;
    g.attention(q, k, v, segments, causal)
}

/// Segments for self-attention over sequences packed back to back.
pub fn self_segments(lens: &[usize]) -> Vec<AttentionSegment> {
    let mut start = 0;
    lens.iter()
        .map(|&n| {
            let s = AttentionSegment {
                q_start: start,
                q_len: n,
                k_start: start,
                k_len: n,
            };
            start += n;
            s
        })
        .collect()
}

/// Segments for cross-attention between two packed batches.
pub fn cross_segments(q_lens: &[usize], k_lens: &[usize]) -> Vec<AttentionSegment> {
    let (mut qs, mut ks) = (0, 0);
    q_lens
        .iter()
        .zip(k_lens)
        .map(|(&qn, &kn)| {
            let s = AttentionSegment {
                q_start: qs,
                q_len: qn,
                k_start: ks,
                k_len: kn,
            };
            qs += qn;
            ks += kn;
            s
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::selection::straight_through_gates;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_input(g: &mut Graph, rng: &mut ChaCha8Rng, n: usize, d: usize) -> Var {
        let t = crate::model::params::uniform(rng, &[n, d], 1.0);
        g.constant(t)
    }

    fn hard_gates(g: &mut Graph, bits: &[bool]) -> LayerGates {
        let q = g.constant(Tensor::vector(vec![0.5; bits.len()]));
        let gates = straight_through_gates(g, q, bits, None).unwrap();
        LayerGates {
            bits: bits.to_vec(),
            gates,
        }
    }

    #[test]
    fn single_token_returns_its_value() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let pool = AttentionPool::new(&mut store, &mut rng, "a", 8, 4, 4, Strategy::Shared).unwrap();
        let mut g = Graph::new();
        let mut b = Binder::new(&store, false);
        let x = random_input(&mut g, &mut rng, 1, 8);
        let segs = self_segments(&[1]);
        let out = attention_head(&mut g, &mut b, x, x, &pool.heads[0], &segs, false).unwrap();
        let wv = b.var(&mut g, pool.heads[0].wv);
        let v = g.matmul(x, wv).unwrap();
        assert!(g.value(out).max_abs_diff(g.value(v)) < 1e-12);
    }

    #[test]
    fn identical_tokens_give_identical_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let pool = AttentionPool::new(&mut store, &mut rng, "a", 8, 4, 4, Strategy::Shared).unwrap();
        let mut g = Graph::new();
        let mut b = Binder::new(&store, false);
        let row = crate::model::params::uniform(&mut rng, &[8], 1.0);
        let x = g.constant(Tensor::new(vec![2, 8], [row.data(), row.data()].concat()).unwrap());
        let out = attention_head(&mut g, &mut b, x, x, &pool.heads[1], &self_segments(&[2]), false).unwrap();
        let o = g.value(out);
        assert_eq!(o.row(0), o.row(1));
    }

    #[test]
    fn cardinality_violation_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let pool = AttentionPool::new(&mut store, &mut rng, "a", 8, 2, 4, Strategy::Group).unwrap();
        let mut g = Graph::new();
        let mut b = Binder::new(&store, false);
        let x = random_input(&mut g, &mut rng, 3, 8);
        let segs = self_segments(&[3]);
        // Both heads from group 0.
        let gates = hard_gates(&mut g, &[true, true, false, false]);
        assert!(pool.forward(&mut g, &mut b, x, x, &segs, false, Some(&gates)).is_err());
        let gates = hard_gates(&mut g, &[true, false, false, false]);
        assert!(pool.forward(&mut g, &mut b, x, x, &segs, false, Some(&gates)).is_err());
        let gates = hard_gates(&mut g, &[false, true, true, false]);
        let out = pool.forward(&mut g, &mut b, x, x, &segs, false, Some(&gates)).unwrap();
        assert_eq!(out.head_evals, 2);
    }
}
