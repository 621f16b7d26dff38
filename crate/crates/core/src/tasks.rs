//! Synthetic multi-task sequence transduction data.
//!
//! Data symbols are `0..vocab`. In the model vocabulary they are shifted
//! past EOS, PAD and the tag tokens; see [`TokenLayout`].

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;

use crate::error::{Error, Result};
use crate::model::{Batch, TaskKeys, EOS};
use crate::rng::stream;

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Transform {
    Copy,
    Reverse,
    Shift(usize),
    SortAsc,
    SwapAdjacent,
    /// Perfect shuffle of the two halves: `a0 b0 a1 b1 ...`; an odd middle
    /// element stays last.
    Interleave,
    /// Applies each step in order.
    Chain(Vec<Transform>),
}

impl Transform {
    pub fn apply(&self, src: &[usize], vocab: usize) -> Vec<usize> {
        match self {
            Transform::Copy => src.to_vec(),
            Transform::Reverse => src.iter().rev().copied().collect(),
            Transform::Shift(k) => src.iter().map(|&t| (t + k) % vocab).collect(),
            Transform::SortAsc => {
                let mut v = src.to_vec();
                v.sort_unstable();
                v
            }
            Transform::SwapAdjacent => {
                let mut v = src.to_vec();
                for pair in v.chunks_exact_mut(2) {
                    pair.swap(0, 1);
                }
                v
            }
            Transform::Interleave => {
                let half = src.len() / 2;
                let (a, b) = (&src[..half], &src[half..2 * half]);
                let mut v: Vec<usize> = a.iter().zip(b).flat_map(|(&x, &y)| [x, y]).collect();
                v.extend_from_slice(&src[2 * half..]);
                v
            }
            Transform::Chain(steps) => steps.iter().fold(src.to_vec(), |acc, t| t.apply(&acc, vocab)),
        }
    }

    fn max_shift(&self) -> usize {
        match self {
            Transform::Shift(k) => *k,
            Transform::Chain(steps) => steps.iter().map(Transform::max_shift).max().unwrap_or(0),
            _ => 0,
        }
    }
}

impl fmt::Display for Transform {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Transform::Copy => f.write_str("copy"),
            Transform::Reverse => f.write_str("reverse"),
            Transform::Shift(k) => write!(f, "shift_{k}"),
            Transform::SortAsc => f.write_str("sort_asc"),
            Transform::SwapAdjacent => f.write_str("swap_adjacent"),
            Transform::Interleave => f.write_str("interleave"),
            Transform::Chain(steps) => {
                let parts: Vec<String> = steps.iter().map(ToString::to_string).collect();
                f.write_str(&parts.join("+"))
            }
        }
    }
}

impl FromStr for Transform {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s.contains('+') {
            return Ok(Transform::Chain(s.split('+').map(str::parse).collect::<Result<_>>()?));
        }
        Ok(match s {
            "copy" => Transform::Copy,
            "reverse" => Transform::Reverse,
            "sort_asc" => Transform::SortAsc,
            "swap_adjacent" => Transform::SwapAdjacent,
            "interleave" => Transform::Interleave,
            _ => match s.strip_prefix("shift_").map(str::parse) {
                Some(Ok(k)) => Transform::Shift(k),
                _ => return Err(Error::config(format!("unknown transform `{s}`"))),
            },
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Valid, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskSpec {
    pub name: String,
    pub transform: Transform,
    pub src_tag: usize,
    pub tgt_tag: usize,
    pub n_train: usize,
    pub n_valid: usize,
    pub n_test: usize,
    pub len_range: (usize, usize),
    pub vocab: usize,
}

impl TaskSpec {
    pub fn count(&self, split: Split) -> usize {
        match split {
            Split::Train => self.n_train,
            Split::Valid => self.n_valid,
            Split::Test => self.n_test,
        }
    }

    pub fn keys(&self) -> TaskKeys {
        TaskKeys {
            encoder: self.src_tag,
            decoder: self.tgt_tag,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.len_range;
        if lo == 0 || lo > hi {
            return Err(Error::config(format!(
                "task {}: bad length range {lo}..={hi}",
                self.name
            )));
        }
        if self.vocab < 2 || self.vocab <= self.transform.max_shift() {
            return Err(Error::config(format!(
                "task {}: vocabulary {} too small for {}",
                self.name, self.vocab, self.transform
            )));
        }
        // Distinct sources available; generation rejects repeats.
        let capacity: f64 = (lo..=hi).map(|n| (self.vocab as f64).powi(n as i32)).sum();
        let needed = (self.n_train + self.n_valid + self.n_test) as f64;
        if needed > capacity / 2.0 {
            return Err(Error::config(format!(
                "task {}: {needed} samples requested from only {capacity} distinct sources",
                self.name
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Sample {
    pub src: Vec<usize>,
    pub tgt: Vec<usize>,
    pub src_tag: usize,
    pub tgt_tag: usize,
}

/// Samples of one split. Each split has its own random stream; sources
/// already used by an earlier split (train, then valid, then test) or
/// earlier in the same split are redrawn, so splits are disjoint.
pub fn generate(spec: &TaskSpec, split: Split, seed: u64) -> Result<Vec<Sample>> {
    spec.validate()?;
    let mut used = HashSet::new();
    for s in Split::ALL {
        let out = draw_split(spec, s, seed, &mut used);
        if s == split {
            return Ok(out);
        }
    }
    unreachable!("split list covers every split")
}

/// All three splits at once.
pub fn generate_all(spec: &TaskSpec, seed: u64) -> Result<[Vec<Sample>; 3]> {
    spec.validate()?;
    let mut used = HashSet::new();
    Ok(Split::ALL.map(|s| draw_split(spec, s, seed, &mut used)))
}

fn draw_split(spec: &TaskSpec, split: Split, seed: u64, used: &mut HashSet<Vec<usize>>) -> Vec<Sample> {
    let mut rng = stream(seed, &format!("data/{}/{}", spec.name, split.name()));
    let (lo, hi) = spec.len_range;
    let mut out = Vec::with_capacity(spec.count(split));
    while out.len() < spec.count(split) {
        let n = rng.gen_range(lo..=hi);
        let src: Vec<usize> = (0..n).map(|_| rng.gen_range(0..spec.vocab)).collect();
        if !used.insert(src.clone()) {
            continue;
        }
        out.push(Sample {
            tgt: spec.transform.apply(&src, spec.vocab),
            src,
            src_tag: spec.src_tag,
            tgt_tag: spec.tgt_tag,
        });
    }
    out
}

/// Two high-resource tasks with opposite alignment (copy, reverse) and two
/// low-resource tasks, each with its own tag on both sides.
pub fn interference_suite() -> Vec<TaskSpec> {
    let task = |i: usize, name: &str, transform, n_train| TaskSpec {
        name: name.to_string(),
        transform,
        src_tag: i,
        tgt_tag: i,
        n_train,
        n_valid: 100,
        n_test: 400,
        len_range: (4, 10),
        vocab: 32,
    };
    vec![
        task(0, "copy", Transform::Copy, 2000),
        task(1, "reverse", Transform::Reverse, 2000),
        task(2, "sort_asc", Transform::SortAsc, 200),
        task(3, "swap_adjacent", Transform::SwapAdjacent, 200),
    ]
}

/// Encodings used as "languages" in the zero-shot suite. A direction
/// `(a, b)` maps text written in encoding `a` to the same text in `b`.
pub const ZERO_SHOT_ENCODINGS: [&str; 3] = ["plain", "reversed", "shifted"];
const ZERO_SHOT_SHIFT: usize = 5;
const ZERO_SHOT_VOCAB: usize = 32;

fn encoding(lang: usize) -> Transform {
    match lang {
        0 => Transform::Copy,
        1 => Transform::Reverse,
        _ => Transform::Shift(ZERO_SHOT_SHIFT),
    }
}

fn decoding(lang: usize) -> Transform {
    match lang {
        0 => Transform::Copy,
        1 => Transform::Reverse,
        _ => Transform::Shift(ZERO_SHOT_VOCAB - ZERO_SHOT_SHIFT),
    }
}

fn direction(src: usize, tgt: usize, n_train: usize) -> TaskSpec {
    TaskSpec {
        name: format!("{}_to_{}", ZERO_SHOT_ENCODINGS[src], ZERO_SHOT_ENCODINGS[tgt]),
        transform: Transform::Chain(vec![decoding(src), encoding(tgt)]),
        src_tag: src,
        tgt_tag: tgt,
        n_train,
        n_valid: 100,
        n_test: 300,
        len_range: (4, 8),
        vocab: ZERO_SHOT_VOCAB,
    }
}

/// Training directions and test-only directions. Every encoding occurs as
/// a source and as a target in training, but `reversed -> shifted` and
/// `shifted -> reversed` never do.
pub fn zero_shot_suite() -> (Vec<TaskSpec>, Vec<TaskSpec>) {
    let train = [(0, 0), (0, 1), (0, 2), (1, 0), (2, 0), (1, 1), (2, 2)]
        .into_iter()
        .map(|(a, b)| direction(a, b, 800))
        .collect();
    let test = [(1, 2), (2, 1)].into_iter().map(|(a, b)| direction(a, b, 0)).collect();
    (train, test)
}

/// Number of distinct tags used by a task list.
pub fn tag_count(tasks: &[TaskSpec]) -> usize {
    tasks.iter().map(|t| t.src_tag.max(t.tgt_tag) + 1).max().unwrap_or(0)
}

/// Mapping between data symbols, tags and model token ids:
/// `0 = EOS`, `1 = PAD`, then one token per tag, then the data symbols.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TokenLayout {
    pub tags: usize,
    pub vocab: usize,
}

impl TokenLayout {
    pub fn new(tags: usize, vocab: usize) -> Self {
        TokenLayout { tags, vocab }
    }

    pub fn for_tasks(tasks: &[TaskSpec]) -> Self {
        let vocab = tasks.iter().map(|t| t.vocab).max().unwrap_or(0);
        TokenLayout::new(tag_count(tasks), vocab)
    }

    pub fn model_vocab(&self) -> usize {
        2 + self.tags + self.vocab
    }

    pub fn tag_token(&self, tag: usize) -> usize {
        2 + tag
    }

    pub fn data_token(&self, symbol: usize) -> usize {
        2 + self.tags + symbol
    }

    /// Symbol of a model token, `None` for EOS, PAD and tags.
    pub fn symbol(&self, token: usize) -> Option<usize> {
        token.checked_sub(2 + self.tags).filter(|&s| s < self.vocab)
    }

    pub fn source(&self, s: &Sample) -> Vec<usize> {
        std::iter::once(self.tag_token(s.src_tag))
            .chain(s.src.iter().map(|&t| self.data_token(t)))
            .collect()
    }

    pub fn target(&self, s: &Sample) -> Vec<usize> {
        s.tgt.iter().map(|&t| self.data_token(t)).collect()
    }

    /// Teacher-forced batch; every sample must share the task keys.
    pub fn batch(&self, samples: &[&Sample]) -> Result<Batch> {
        let first = samples.first().ok_or_else(|| Error::Input("empty batch".into()))?;
        let keys = TaskKeys {
            encoder: first.src_tag,
            decoder: first.tgt_tag,
        };
        let mut batch = Batch {
            src: Vec::with_capacity(samples.len()),
            tgt_in: Vec::with_capacity(samples.len()),
            tgt_out: Vec::with_capacity(samples.len()),
            keys,
        };
        for s in samples {
            if (s.src_tag, s.tgt_tag) != (keys.encoder, keys.decoder) {
                return Err(Error::Input("batch mixes task keys".into()));
            }
            let tgt = self.target(s);
            batch.src.push(self.source(s));
            batch.tgt_in.push(
                std::iter::once(self.tag_token(s.tgt_tag))
                    .chain(tgt.iter().copied())
                    .collect(),
            );
            batch
                .tgt_out
                .push(tgt.into_iter().chain(std::iter::once(EOS)).collect());
        }
        Ok(batch)
    }
}

/// One sample per line: `src_tag \t tgt_tag \t src ids \t tgt ids`.
pub fn dump_samples(samples: &[Sample]) -> String {
    let join = |v: &[usize]| v.iter().map(ToString::to_string).collect::<Vec<_>>().join(" ");
    samples
        .iter()
        .map(|s| format!("{}\t{}\t{}\t{}\n", s.src_tag, s.tgt_tag, join(&s.src), join(&s.tgt)))
        .collect()
}

pub fn parse_samples(text: &str) -> Result<Vec<Sample>> {
    text.lines()
        .filter(|l| !l.is_empty())
        .map(|line| {
            let f: Vec<&str> = line.split('\t').collect();
            let bad = || Error::Input(format!("bad sample line `{line}`"));
            if f.len() != 4 {
                return Err(bad());
            }
            let ids = |s: &str| {
                s.split_whitespace()
                    .map(|t| t.parse::<usize>().map_err(|_| bad()))
                    .collect::<Result<Vec<_>>>()
            };
            Ok(Sample {
                src_tag: f[0].parse().map_err(|_| bad())?,
                tgt_tag: f[1].parse().map_err(|_| bad())?,
                src: ids(f[2])?,
                tgt: ids(f[3])?,
            })
        })
        .collect()
}

pub fn write_samples(path: &Path, samples: &[Sample]) -> Result<()> {
    fs::write(path, dump_samples(samples))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn transform_examples() {
        assert_eq!(Transform::Reverse.apply(&[3, 5, 7], 10), vec![7, 5, 3]);
        assert_eq!(Transform::Shift(1).apply(&[9], 10), vec![0]);
        assert_eq!(Transform::SortAsc.apply(&[4, 1, 3, 1], 10), vec![1, 1, 3, 4]);
        assert_eq!(Transform::SwapAdjacent.apply(&[1, 2, 3, 4, 5], 10), vec![2, 1, 4, 3, 5]);
        assert_eq!(
            Transform::Interleave.apply(&[1, 2, 3, 4, 5, 6], 10),
            vec![1, 4, 2, 5, 3, 6]
        );
        assert_eq!(Transform::Interleave.apply(&[1, 2, 3, 4, 5], 10), vec![1, 3, 2, 4, 5]);
        let c = Transform::Chain(vec![Transform::Reverse, Transform::Shift(2)]);
        assert_eq!(c.apply(&[0, 9], 10), vec![1, 2]);
    }

    #[test]
    fn transform_names_round_trip() {
        for t in [
            Transform::Copy,
            Transform::Shift(3),
            Transform::Interleave,
            Transform::Chain(vec![Transform::Reverse, Transform::Shift(27)]),
        ] {
            assert_eq!(t.to_string().parse::<Transform>().unwrap(), t);
        }
        assert!("shift_x".parse::<Transform>().is_err());
    }

    #[test]
    fn generation_is_deterministic_and_disjoint() {
        let spec = &interference_suite()[2];
        let a = generate(spec, Split::Test, 4).unwrap();
        assert_eq!(a, generate(spec, Split::Test, 4).unwrap());
        assert_ne!(a, generate(spec, Split::Test, 5).unwrap());
        let [tr, va, te] = generate_all(spec, 4).unwrap();
        assert_eq!(te, a);
        let train: HashSet<_> = tr.iter().map(|s| &s.src).collect();
        assert!(va.iter().chain(&te).all(|s| !train.contains(&s.src)));
        assert!(tr.iter().all(|s| s.tgt == spec.transform.apply(&s.src, spec.vocab)));
    }

    #[test]
    fn invalid_specs_are_config_errors() {
        let mut spec = interference_suite()[0].clone();
        spec.len_range = (1, 1);
        spec.vocab = 4;
        assert!(matches!(generate(&spec, Split::Train, 0), Err(Error::Config(_))));
        let mut spec = interference_suite()[0].clone();
        spec.transform = Transform::Shift(32);
        assert!(spec.validate().is_err());
    }

    #[test]
    fn suites_have_the_declared_shape() {
        let s = interference_suite();
        assert_eq!(s.len(), 4);
        assert_eq!(s[0].n_train / s[2].n_train, 10);
        let (train, test) = zero_shot_suite();
        let pairs: HashSet<_> = train.iter().map(|t| (t.src_tag, t.tgt_tag)).collect();
        for t in &test {
            assert!(!pairs.contains(&(t.src_tag, t.tgt_tag)));
            assert!(train.iter().any(|x| x.src_tag == t.src_tag));
            assert!(train.iter().any(|x| x.tgt_tag == t.tgt_tag));
            for s in generate(t, Split::Test, 1).unwrap() {
                assert_eq!(s.tgt, t.transform.apply(&s.src, t.vocab));
            }
        }
    }

    #[test]
    fn zero_shot_directions_translate_between_encodings() {
        let (_, test) = zero_shot_suite();
        // reversed -> shifted: undo the reversal, then shift by 5.
        assert_eq!(test[0].transform.apply(&[1, 2, 30], 32), vec![3, 7, 6]);
    }

    #[test]
    fn layout_and_batches() {
        let l = TokenLayout::new(4, 32);
        assert_eq!(l.model_vocab(), 38);
        let s = Sample {
            src: vec![0, 5],
            tgt: vec![5, 0],
            src_tag: 1,
            tgt_tag: 1,
        };
        let b = l.batch(&[&s]).unwrap();
        assert_eq!(b.src, vec![vec![3, 6, 11]]);
        assert_eq!(b.tgt_in, vec![vec![3, 11, 6]]);
        assert_eq!(b.tgt_out, vec![vec![11, 6, EOS]]);
        assert_eq!(l.symbol(11), Some(5));
        assert_eq!(l.symbol(3), None);
        let other = Sample {
            src_tag: 2,
            ..s.clone()
        };
        assert!(l.batch(&[&s, &other]).is_err());
    }

    #[test]
    fn dump_round_trip() {
        let spec = &interference_suite()[3];
        let samples = generate(spec, Split::Valid, 0).unwrap();
        assert_eq!(parse_samples(&dump_samples(&samples)).unwrap(), samples);
    }
}
