//! Latent head selection: relaxed Bernoulli posteriors over head candidates,
//! the subset and group masking rules, straight-through gates and the KL
//! regulariser against the uniform selection prior.
//!
//! Each (task, layer, candidate) triple owns a single logit. The logit of
//! the "not selected" class is pinned to zero, so the noise-free posterior
//! is `sigmoid(logit / tau)` and a noisy draw adds the difference of two
//! independent Gumbel(0, 1) samples to the logit.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::gumbel;
use crate::tensor::{bernoulli_kl, relaxed_select_prob, Graph, Var};

/// How a layer's `H'` candidates are turned into `H` active heads.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Strategy {
    /// Plain multi-head attention, `H' == H`, no selection logits.
    Shared,
    Subset,
    Group,
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(match self {
            Strategy::Shared => "shared",
            Strategy::Subset => "subset",
            Strategy::Group => "group",
        })
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "shared" => Ok(Strategy::Shared),
            "subset" => Ok(Strategy::Subset),
            "group" => Ok(Strategy::Group),
            other => Err(Error::config(format!("unknown strategy `{other}`"))),
        }
    }
}

/// Selection logits for every (task key, selective layer, candidate).
#[derive(Clone, Debug, PartialEq)]
pub struct SelectionLogits {
    tasks: usize,
    layers: usize,
    heads: usize,
    values: Vec<f64>,
}

impl SelectionLogits {
    pub fn zeros(tasks: usize, layers: usize, heads: usize) -> Self {
        SelectionLogits {
            tasks,
            layers,
            heads,
            values: vec![0.0; tasks * layers * heads],
        }
    }

    pub fn from_values(tasks: usize, layers: usize, heads: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != tasks * layers * heads {
            return Err(Error::Dimension {
                op: "selection_logits",
                left: vec![tasks, layers, heads],
                right: vec![values.len()],
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::contract("selection logits must be finite"));
        }
        Ok(SelectionLogits {
            tasks,
            layers,
            heads,
            values,
        })
    }

    pub fn tasks(&self) -> usize {
        self.tasks
    }

    pub fn layers(&self) -> usize {
        self.layers
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, task: usize, layer: usize, head: usize) -> f64 {
        self.values[(task * self.layers + layer) * self.heads + head]
    }

    /// Logits of one task laid out as `[layer][head]`.
    pub fn task(&self, task: usize) -> &[f64] {
        let n = self.layers * self.heads;
        &self.values[task * n..(task + 1) * n]
    }
}

/// Bernoulli prior with every candidate equally likely to be chosen.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SelectionPrior {
    p_select: f64,
}

impl SelectionPrior {
    /// `p(z = 1) = H / H'`. Requires `H < H'`; with `H == H'` there is no
    /// choice to regularise.
    pub fn new(active: usize, candidates: usize) -> Result<Self> {
        if active == 0 || active >= candidates {
            return Err(Error::contract(format!(
                "selection prior needs 0 < H < H', got H={active}, H'={candidates}"
            )));
        }
        Ok(SelectionPrior {
            p_select: active as f64 / candidates as f64,
        })
    }

    pub fn p_select(&self) -> f64 {
        self.p_select
    }
}

/// Relaxed posterior values laid out as `[layer][head]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RelaxedPosterior {
    layers: usize,
    heads: usize,
    q: Vec<f64>,
    noisy: bool,
}

impl RelaxedPosterior {
    pub fn new(layers: usize, heads: usize, q: Vec<f64>, noisy: bool) -> Result<Self> {
        if q.len() != layers * heads {
            return Err(Error::Dimension {
                op: "posterior",
                left: vec![layers, heads],
                right: vec![q.len()],
            });
        }
        if q.iter().any(|&v| !(v > 0.0 && v < 1.0)) {
            return Err(Error::contract("posterior entries must lie strictly in (0, 1)"));
        }
        Ok(RelaxedPosterior {
            layers,
            heads,
            q,
            noisy,
        })
    }

    pub fn layers(&self) -> usize {
        self.layers
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn values(&self) -> &[f64] {
        &self.q
    }

    pub fn layer(&self, l: usize) -> &[f64] {
        &self.q[l * self.heads..(l + 1) * self.heads]
    }

    pub fn is_noisy(&self) -> bool {
        self.noisy
    }
}

/// Binary head assignment laid out as `[layer][head]`.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct HeadMask {
    layers: usize,
    heads: usize,
    bits: Vec<bool>,
}

impl HeadMask {
    pub fn new(layers: usize, heads: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != layers * heads {
            return Err(Error::Dimension {
                op: "head_mask",
                left: vec![layers, heads],
                right: vec![bits.len()],
            });
        }
        Ok(HeadMask { layers, heads, bits })
    }

    pub fn all(layers: usize, heads: usize) -> Self {
        HeadMask {
            layers,
            heads,
            bits: vec![true; layers * heads],
        }
    }

    /// Mask that selects exactly the given head indices in every layer.
    pub fn from_selected(layers: usize, heads: usize, per_layer: &[Vec<usize>]) -> Result<Self> {
        if per_layer.len() != layers {
            return Err(Error::contract("one head list per layer required"));
        }
        let mut bits = vec![false; layers * heads];
        for (l, sel) in per_layer.iter().enumerate() {
            for &h in sel {
                if h >= heads {
                    return Err(Error::contract(format!("head {h} out of range")));
                }
                bits[l * heads + h] = true;
            }
        }
        Ok(HeadMask { layers, heads, bits })
    }

    pub fn layers(&self) -> usize {
        self.layers
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, layer: usize, head: usize) -> bool {
        self.bits[layer * self.heads + head]
    }

    pub fn layer(&self, l: usize) -> &[bool] {
        &self.bits[l * self.heads..(l + 1) * self.heads]
    }

    /// Selected head indices of a layer, ascending.
    pub fn selected(&self, l: usize) -> Vec<usize> {
        self.layer(l)
            .iter()
            .enumerate()
            .filter_map(|(h, &b)| b.then_some(h))
            .collect()
    }

    pub fn popcount(&self, l: usize) -> usize {
        self.layer(l).iter().filter(|&&b| b).count()
    }

    /// Stacks masks of consecutive layer ranges (e.g. encoder then decoder).
    pub fn stack(parts: &[HeadMask]) -> Result<Self> {
        let heads = parts.first().map_or(0, |m| m.heads);
        if parts.iter().any(|m| m.heads != heads) {
            return Err(Error::contract("stacked masks need equal head counts"));
        }
        Ok(HeadMask {
            layers: parts.iter().map(|m| m.layers).sum(),
            heads,
            bits: parts.iter().flat_map(|m| m.bits.iter().copied()).collect(),
        })
    }

    /// CSV with a `layer,0,1,...` header and one `{0,1}` row per layer.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer");
        for h in 0..self.heads {
            out.push_str(&format!(",{h}"));
        }
        out.push('\n');
        for l in 0..self.layers {
            out.push_str(&l.to_string());
            for &b in self.layer(l) {
                out.push_str(if b { ",1" } else { ",0" });
            }
            out.push('\n');
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines.next().ok_or_else(|| Error::Input("empty mask csv".into()))?;
        let heads = header.split(',').count() - 1;
        let mut bits = Vec::new();
        let mut layers = 0;
        for line in lines {
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != heads + 1 {
                return Err(Error::Input(format!("mask row has {} fields", fields.len())));
            }
            for f in &fields[1..] {
                bits.push(match f.trim() {
                    "0" => false,
                    "1" => true,
                    other => return Err(Error::Input(format!("mask value `{other}`"))),
                });
            }
            layers += 1;
        }
        HeadMask::new(layers, heads, bits)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv())?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        HeadMask::from_csv(&fs::read_to_string(path)?)
    }
}

/// Contiguous partition of `H'` candidates into `H` groups of `r = H'/H`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GroupPartition {
    groups: usize,
    group_size: usize,
}

impl GroupPartition {
    pub fn new(active: usize, candidates: usize) -> Result<Self> {
        if active == 0 || !candidates.is_multiple_of(active) {
            return Err(Error::contract(format!(
                "group strategy needs H' divisible by H, got H={active}, H'={candidates}"
            )));
        }
        Ok(GroupPartition {
            groups: active,
            group_size: candidates / active,
        })
    }

    pub fn groups(&self) -> usize {
        self.groups
    }

    pub fn group_size(&self) -> usize {
        self.group_size
    }

    pub fn candidates(&self) -> usize {
        self.groups * self.group_size
    }

    pub fn group_of(&self, head: usize) -> usize {
        head / self.group_size
    }

    pub fn members(&self, group: usize) -> std::ops::Range<usize> {
        group * self.group_size..(group + 1) * self.group_size
    }
}

/// Difference of the select and deselect Gumbel draws, one per entry.
pub fn draw_noise<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n).map(|_| gumbel(rng) - gumbel(rng)).collect()
}

/// Relaxed posterior for per-(layer, head) logits. With `noisy == false`
/// the Gumbel terms are zero and `rng` is not touched.
pub fn gumbel_posterior<R: Rng + ?Sized>(
    logits: &[f64],
    layers: usize,
    tau: f64,
    rng: &mut R,
    noisy: bool,
) -> Result<RelaxedPosterior> {
    if tau <= 0.0 || !tau.is_finite() {
        return Err(Error::contract(format!("temperature must be positive, got {tau}")));
    }
    if layers == 0 || !logits.len().is_multiple_of(layers) {
        return Err(Error::contract("logit count not divisible by layer count"));
    }
    let noise = if noisy {
        draw_noise(rng, logits.len())
    } else {
        vec![0.0; logits.len()]
    };
    let q = logits
        .iter()
        .zip(&noise)
        .map(|(&phi, &g)| relaxed_select_prob(phi, g, tau))
        .collect();
    RelaxedPosterior::new(layers, logits.len() / layers, q, noisy)
}

/// Top-`H` candidates of every layer; ties go to the lower head index.
pub fn subset_mask(posterior: &RelaxedPosterior, active: usize) -> Result<HeadMask> {
    let heads = posterior.heads();
    if active > heads {
        return Err(Error::contract(format!("cannot select H={active} of H'={heads} heads")));
    }
    let mut bits = vec![false; posterior.layers() * heads];
    for l in 0..posterior.layers() {
        let q = posterior.layer(l);
        let mut order: Vec<usize> = (0..heads).collect();
        // Stable sort keeps ascending index order among equal values.
        order.sort_by(|&a, &b| q[b].total_cmp(&q[a]));
        for &h in &order[..active] {
            bits[l * heads + h] = true;
        }
    }
    HeadMask::new(posterior.layers(), heads, bits)
}

/// Argmax within each group; ties go to the lower head index.
pub fn group_mask(posterior: &RelaxedPosterior, partition: &GroupPartition) -> Result<HeadMask> {
    let heads = posterior.heads();
    if partition.candidates() != heads {
        return Err(Error::contract(format!(
            "partition covers {} heads, posterior has {heads}",
            partition.candidates()
        )));
    }
    let mut bits = vec![false; posterior.layers() * heads];
    for l in 0..posterior.layers() {
        let q = posterior.layer(l);
        for g in 0..partition.groups() {
            let best = partition
                .members(g)
                .reduce(|best, h| if q[h] > q[best] { h } else { best })
                .expect("groups are non-empty");
            bits[l * heads + best] = true;
        }
    }
    HeadMask::new(posterior.layers(), heads, bits)
}

/// Applies the mask rule of `strategy`. `Shared` selects every head.
pub fn select(strategy: Strategy, posterior: &RelaxedPosterior, active: usize) -> Result<HeadMask> {
    match strategy {
        Strategy::Shared => Ok(HeadMask::all(posterior.layers(), posterior.heads())),
        Strategy::Subset => subset_mask(posterior, active),
        Strategy::Group => group_mask(posterior, &GroupPartition::new(active, posterior.heads())?),
    }
}

/// Straight-through gates for one layer: the forward value of gate `h` is
/// the hard bit and its gradient is routed to `q[h]` unchanged.
///
/// When `reference` holds the posterior values the bits were computed from,
/// the forward value becomes `q[h] + (bit - reference[h])`. This equals the
/// bit at the reference point and turns the gate into a smooth function of
/// the logits, which is what finite-difference checks need.
pub fn straight_through_gates(g: &mut Graph, q: Var, bits: &[bool], reference: Option<&[f64]>) -> Result<Vec<Var>> {
    let current = g.value(q).data().to_vec();
    if current.len() != bits.len() {
        return Err(Error::contract("gate mask and posterior differ in length"));
    }
    bits.iter()
        .enumerate()
        .map(|(h, &bit)| {
            let hard = if bit { 1.0 } else { 0.0 };
            let forward = match reference {
                Some(r) => current[h] + (hard - r[h]),
                None => hard,
            };
            g.straight_through(q, h, forward)
        })
        .collect()
}

/// KL divergence of the posterior from the prior, summed over all entries.
pub fn kl_bernoulli(posterior: &RelaxedPosterior, prior: &SelectionPrior) -> f64 {
    posterior
        .values()
        .iter()
        .map(|&q| bernoulli_kl(q, prior.p_select()))
        .sum()
}

/// Number of selection logits added to a model: `T * H' * L`.
pub fn selection_param_count(tasks: usize, candidates: usize, layers: usize) -> usize {
    tasks * candidates * layers
}

/// Number of distinct head assignments available to one task in one layer.
pub fn search_space_size(strategy: Strategy, active: usize, candidates: usize) -> Result<u128> {
    match strategy {
        Strategy::Shared => Ok(1),
        Strategy::Subset => {
            if active > candidates {
                return Err(Error::contract("subset strategy needs H <= H'"));
            }
            Ok(binomial(candidates as u128, active as u128))
        }
        Strategy::Group => {
            let p = GroupPartition::new(active, candidates)?;
            Ok((p.group_size() as u128).pow(active as u32))
        }
    }
}

fn binomial(n: u128, k: u128) -> u128 {
    let k = k.min(n - k);
    (0..k).fold(1, |acc, i| acc * (n - i) / (i + 1))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn post(q: &[f64]) -> RelaxedPosterior {
        RelaxedPosterior::new(1, q.len(), q.to_vec(), false).unwrap()
    }

    #[test]
    fn noise_free_posterior_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = gumbel_posterior(&[0.0, 2.0], 1, 1.0, &mut rng, false).unwrap();
        assert_eq!(p.values()[0], 0.5);
        assert!((p.values()[1] - 0.8808).abs() < 1e-4);
        assert!(gumbel_posterior(&[0.0], 1, 0.0, &mut rng, false).is_err());
        assert!(gumbel_posterior(&[0.0], 1, -1.0, &mut rng, true).is_err());
    }

    #[test]
    fn subset_examples() {
        let m = subset_mask(&post(&[0.9, 0.8, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6]), 4).unwrap();
        assert_eq!(m.selected(0), vec![0, 1, 6, 7]);
        let m = subset_mask(&post(&[0.5; 8]), 4).unwrap();
        assert_eq!(m.selected(0), vec![0, 1, 2, 3]);
        let m = subset_mask(&post(&[0.2, 0.9, 0.4, 0.1]), 4).unwrap();
        assert_eq!(m.selected(0), vec![0, 1, 2, 3]);
        assert!(subset_mask(&post(&[0.5; 4]), 5).is_err());
    }

    #[test]
    fn group_examples() {
        let part = GroupPartition::new(4, 8).unwrap();
        let m = group_mask(&post(&[0.1, 0.9, 0.6, 0.4, 0.5, 0.5, 0.2, 0.8]), &part).unwrap();
        assert_eq!(m.selected(0), vec![1, 2, 4, 7]);

        let part = GroupPartition::new(4, 4).unwrap();
        let m = group_mask(&post(&[0.3, 0.1, 0.7, 0.2]), &part).unwrap();
        assert_eq!(m.bits(), &[true; 4]);

        let part = GroupPartition::new(3, 9).unwrap();
        let inc: Vec<f64> = (1..=9).map(|i| i as f64 / 10.0).collect();
        let m = group_mask(&post(&inc), &part).unwrap();
        assert_eq!(m.selected(0), vec![2, 5, 8]);

        assert!(GroupPartition::new(4, 6).is_err());
    }

    #[test]
    fn straight_through_forward_and_gradient() {
        let mut g = Graph::new();
        let phi = g.leaf(Tensor::vector(vec![0.8473, -0.8473]).with_requires_grad(true));
        let q = g.gumbel_sigmoid(phi, &[0.0, 0.0], 1.0).unwrap();
        let gates = straight_through_gates(&mut g, q, &[true, false], None).unwrap();
        assert_eq!(g.scalar_value(gates[0]), 1.0);
        assert_eq!(g.scalar_value(gates[1]), 0.0);

        // d(gate)/d(phi) equals d(q)/d(phi) for both the kept and dropped head.
        for h in 0..2 {
            let x = Tensor::vector(vec![0.8473, -0.8473]);
            let gate_grad = {
                let mut g = Graph::new();
                let phi = g.leaf(x.clone().with_requires_grad(true));
                let q = g.gumbel_sigmoid(phi, &[0.0, 0.0], 1.0).unwrap();
                let gates = straight_through_gates(&mut g, q, &[true, false], None).unwrap();
                g.backward(gates[h]).unwrap();
                g.grad(phi).unwrap().to_vec()
            };
            let q_val = 1.0 / (1.0 + (-x.data()[h]).exp());
            let mut want = vec![0.0, 0.0];
            want[h] = q_val * (1.0 - q_val);
            for (a, b) in gate_grad.iter().zip(&want) {
                assert!((a - b).abs() < 1e-12);
            }
        }

        // The reference form is smooth, so finite differences agree.
        let x = Tensor::vector(vec![0.8473, -0.8473]);
        let reference = [0.7, 0.3];
        let err = grad_check(
            |g, phi| {
                let q = g.gumbel_sigmoid(phi, &[0.0, 0.0], 1.0)?;
                let gates = straight_through_gates(g, q, &[true, false], Some(&reference))?;
                let both = g.concat(&gates)?;
                Ok(g.sum(both))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn kl_examples() {
        let prior = SelectionPrior::new(4, 8).unwrap();
        assert_eq!(kl_bernoulli(&post(&[0.5; 8]), &prior), 0.0);
        let v = kl_bernoulli(&post(&[0.9]), &prior);
        assert!((v - 0.36803).abs() < 1e-4);
        assert!(SelectionPrior::new(4, 4).is_err());
    }

    #[test]
    fn parameter_and_search_space_counts() {
        assert_eq!(selection_param_count(8, 8, 18), 1152);
        assert_eq!(selection_param_count(1, 8, 5), 40);
        assert_eq!(search_space_size(Strategy::Subset, 4, 8).unwrap(), 70);
        assert_eq!(search_space_size(Strategy::Group, 4, 8).unwrap(), 16);
        assert_eq!(search_space_size(Strategy::Group, 4, 4).unwrap(), 1);
        assert!(search_space_size(Strategy::Group, 4, 10).is_err());
    }

    #[test]
    fn mask_csv_round_trip() {
        let m = HeadMask::from_selected(2, 4, &[vec![0, 3], vec![1, 2]]).unwrap();
        let csv = m.to_csv();
        assert!(csv.starts_with("layer,0,1,2,3\n0,1,0,0,1\n"));
        assert_eq!(HeadMask::from_csv(&csv).unwrap(), m);
    }
}
