//! Metrics and post-hoc analyses of learned head masks.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::selection::HeadMask;

pub fn levenshtein(a: &[usize], b: &[usize]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Edit distance normalised by the reference length; may exceed 1.
pub fn edit_error_rate(hyp: &[usize], reference: &[usize]) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::contract("edit error rate needs a non-empty reference"));
    }
    Ok(levenshtein(hyp, reference) as f64 / reference.len() as f64)
}

/// Exact-match rate over paired hypotheses and references.
pub fn sequence_accuracy(hyps: &[Vec<usize>], refs: &[Vec<usize>]) -> f64 {
    if refs.is_empty() {
        return 0.0;
    }
    let hits = hyps.iter().zip(refs).filter(|(h, r)| h == r).count();
    hits as f64 / refs.len() as f64
}

/// Position-wise matches over total reference length.
pub fn token_accuracy(hyps: &[Vec<usize>], refs: &[Vec<usize>]) -> f64 {
    let total: usize = refs.iter().map(Vec::len).sum();
    if total == 0 {
        return 0.0;
    }
    let hits: usize = hyps
        .iter()
        .zip(refs)
        .map(|(h, r)| h.iter().zip(r).filter(|(a, b)| a == b).count())
        .sum();
    hits as f64 / total as f64
}

/// Mean edit error rate over a corpus.
pub fn mean_edit_error(hyps: &[Vec<usize>], refs: &[Vec<usize>]) -> Result<f64> {
    if refs.is_empty() {
        return Err(Error::contract("no references"));
    }
    let sum = hyps
        .iter()
        .zip(refs)
        .map(|(h, r)| edit_error_rate(h, r))
        .sum::<Result<f64>>()?;
    Ok(sum / refs.len() as f64)
}

/// Co-selected head counts between every pair of tasks.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SharingMatrix {
    pub names: Vec<String>,
    pub counts: Vec<Vec<usize>>,
}

impl SharingMatrix {
    pub fn is_symmetric(&self) -> bool {
        let n = self.counts.len();
        (0..n).all(|i| (0..n).all(|j| self.counts[i][j] == self.counts[j][i]))
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("task");
        for n in &self.names {
            write!(s, ",{n}").unwrap();
        }
        s.push('\n');
        for (n, row) in self.names.iter().zip(&self.counts) {
            s.push_str(n);
            for c in row {
                write!(s, ",{c}").unwrap();
            }
            s.push('\n');
        }
        s
    }
}

fn check_same_shape<'a>(masks: impl IntoIterator<Item = &'a HeadMask>) -> Result<(usize, usize)> {
    let mut shape = None;
    for m in masks {
        let s = (m.layers(), m.heads());
        match shape {
            None => shape = Some(s),
            Some(prev) if prev != s => {
                return Err(Error::Input(format!("masks of different shapes: {prev:?} and {s:?}")))
            }
            _ => {}
        }
    }
    shape.ok_or_else(|| Error::Input("no masks".into()))
}

/// `counts[i][j]` = number of (layer, head) bits set in both masks.
pub fn sharing_matrix(masks: &[(String, HeadMask)]) -> Result<SharingMatrix> {
    check_same_shape(masks.iter().map(|(_, m)| m))?;
    let counts = masks
        .iter()
        .map(|(_, a)| {
            masks
                .iter()
                .map(|(_, b)| a.bits().iter().zip(b.bits()).filter(|(x, y)| **x && **y).count())
                .collect()
        })
        .collect();
    Ok(SharingMatrix {
        names: masks.iter().map(|(n, _)| n.clone()).collect(),
        counts,
    })
}

/// Number of tasks selecting each (layer, head).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HeadLoad {
    pub layers: usize,
    pub heads: usize,
    pub load: Vec<usize>,
}

impl HeadLoad {
    pub fn layer(&self, l: usize) -> &[usize] {
        &self.load[l * self.heads..(l + 1) * self.heads]
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("layer");
        for h in 0..self.heads {
            write!(s, ",{h}").unwrap();
        }
        s.push('\n');
        for l in 0..self.layers {
            write!(s, "{l}").unwrap();
            for v in self.layer(l) {
                write!(s, ",{v}").unwrap();
            }
            s.push('\n');
        }
        s
    }
}

pub fn head_load(masks: &[HeadMask]) -> Result<HeadLoad> {
    let (layers, heads) = check_same_shape(masks)?;
    let mut load = vec![0; layers * heads];
    for m in masks {
        for (slot, &b) in load.iter_mut().zip(m.bits()) {
            *slot += usize::from(b);
        }
    }
    Ok(HeadLoad { layers, heads, load })
}

/// Per-layer coefficient of variation (population std / mean) of the load.
pub fn load_balance_score(load: &HeadLoad) -> Vec<f64> {
    (0..load.layers)
        .map(|l| {
            let row = load.layer(l);
            let n = row.len() as f64;
            let mean = row.iter().sum::<usize>() as f64 / n;
            if mean == 0.0 {
                return 0.0;
            }
            let var = row.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
            var.sqrt() / mean
        })
        .collect()
}

pub fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    values.iter().sum::<f64>() / values.len() as f64
}

/// Spearman rank correlation; ties receive their average rank.
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0 + 1.0;
            for &k in &idx[i..=j] {
                r[k] = avg;
            }
            i = j + 1;
        }
        r
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let (mx, my) = (mean(&rx), mean(&ry));
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum::<f64>().sqrt();
    let sy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum::<f64>().sqrt();
    cov / (sx * sy)
}

/// Metrics of one task on one split.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskMetrics {
    pub task: String,
    pub sequence_accuracy: f64,
    pub token_accuracy: f64,
    pub edit_error: f64,
    pub samples: usize,
}

impl TaskMetrics {
    pub fn compute(task: &str, hyps: &[Vec<usize>], refs: &[Vec<usize>]) -> Result<Self> {
        Ok(TaskMetrics {
            task: task.to_string(),
            sequence_accuracy: sequence_accuracy(hyps, refs),
            token_accuracy: token_accuracy(hyps, refs),
            edit_error: mean_edit_error(hyps, refs)?,
            samples: refs.len(),
        })
    }
}

pub const METRICS_HEADER: &str = "task,samples,sequence_accuracy,token_accuracy,edit_error";

pub fn metrics_csv(rows: &[TaskMetrics]) -> String {
    let mut s = format!("{METRICS_HEADER}\n");
    for m in rows {
        writeln!(
            s,
            "{},{},{:.6},{:.6},{:.6}",
            m.task, m.samples, m.sequence_accuracy, m.token_accuracy, m.edit_error
        )
        .unwrap();
    }
    s
}

pub fn parse_metrics_csv(text: &str) -> Result<Vec<TaskMetrics>> {
    let mut lines = text.lines();
    if lines.next() != Some(METRICS_HEADER) {
        return Err(Error::Input("unexpected metrics header".into()));
    }
    lines
        .filter(|l| !l.is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            let bad = || Error::Input(format!("bad metrics row `{l}`"));
            if f.len() != 5 {
                return Err(bad());
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| bad());
            Ok(TaskMetrics {
                task: f[0].to_string(),
                samples: f[1].parse().map_err(|_| bad())?,
                sequence_accuracy: num(f[2])?,
                token_accuracy: num(f[3])?,
                edit_error: num(f[4])?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(heads: usize, selected: &[usize]) -> HeadMask {
        HeadMask::from_selected(1, heads, &[selected.to_vec()]).unwrap()
    }

    #[test]
    fn edit_error_examples() {
        assert_eq!(edit_error_rate(&[1, 2, 3], &[1, 2, 3]).unwrap(), 0.0);
        assert_eq!(edit_error_rate(&[], &[1, 2, 3, 4]).unwrap(), 1.0);
        assert_eq!(edit_error_rate(&[1, 2, 3], &[1, 3]).unwrap(), 0.5);
        assert_eq!(edit_error_rate(&[5, 5, 5, 5], &[1]).unwrap(), 4.0);
        assert!(edit_error_rate(&[1], &[]).is_err());
    }

    #[test]
    fn sharing_examples() {
        let m = sharing_matrix(&[
            ("a".into(), mask(8, &[0, 1, 2, 3])),
            ("b".into(), mask(8, &[2, 3, 4, 5])),
            ("c".into(), mask(8, &[4, 5, 6, 7])),
        ])
        .unwrap();
        assert_eq!(m.counts[0][1], 2);
        assert_eq!(m.counts[0][2], 0);
        assert_eq!(m.counts[1][1], 4);
        assert!(m.is_symmetric());
        assert_eq!(m.to_csv().lines().next(), Some("task,a,b,c"));
        assert!(sharing_matrix(&[("a".into(), mask(8, &[0])), ("b".into(), mask(4, &[0]))]).is_err());
    }

    #[test]
    fn load_examples() {
        let single = head_load(&[mask(8, &[1, 4])]).unwrap();
        assert_eq!(
            single.load,
            mask(8, &[1, 4])
                .bits()
                .iter()
                .map(|&b| usize::from(b))
                .collect::<Vec<_>>()
        );
        let same = head_load(&[mask(4, &[0, 2]), mask(4, &[0, 2]), mask(4, &[0, 2])]).unwrap();
        assert_eq!(same.load, vec![3, 0, 3, 0]);
        assert_eq!(same.layer(0).iter().sum::<usize>(), 6);
    }

    #[test]
    fn balance_examples() {
        let uniform = HeadLoad {
            layers: 1,
            heads: 4,
            load: vec![2; 4],
        };
        assert_eq!(load_balance_score(&uniform), vec![0.0]);
        let mut load = vec![0; 8];
        load[0] = 4;
        let skew = HeadLoad {
            layers: 1,
            heads: 8,
            load,
        };
        assert!((load_balance_score(&skew)[0] - 7f64.sqrt()).abs() < 1e-12);
        let mut perm = skew.clone();
        perm.load.rotate_left(3);
        assert_eq!(load_balance_score(&perm), load_balance_score(&skew));
    }

    #[test]
    fn spearman_examples() {
        assert!((spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]) + 1.0).abs() < 1e-12);
        assert!((spearman(&[1.0, 2.0, 3.0, 4.0], &[10.0, 20.0, 30.0, 45.0]) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn metrics_round_trip() {
        let m = TaskMetrics::compute("copy", &[vec![1, 2], vec![3]], &[vec![1, 2], vec![4, 5]]).unwrap();
        assert_eq!(m.sequence_accuracy, 0.5);
        assert_eq!(m.token_accuracy, 2.0 / 4.0);
        assert_eq!(m.edit_error, 0.5);
        let back = parse_metrics_csv(&metrics_csv(std::slice::from_ref(&m))).unwrap();
        assert_eq!(back[0].task, "copy");
        assert!((back[0].edit_error - m.edit_error).abs() < 1e-6);
    }
}
