//! Parallel and monolingual corpora, sampling strategies, disjoint sharding
//! and token-budget batching.

mod batch;
mod io;
mod synthetic;

pub use batch::{build_batches, pair_lengths, Batch, BatchPlan};
pub use io::{read_lines, read_parallel_tsv, read_shard_manifest, write_lines, write_parallel_tsv, write_shard_manifest};
pub use synthetic::{SyntheticTask, SyntheticTaskSpec, Transformation};

use crate::error::{Error, Result};
use crate::seed;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

pub type Sentence = Vec<u32>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Natural,
    BackTranslated,
    DistilledEnsemble,
    DistilledR2l,
}

impl Provenance {
    pub fn is_synthetic(self) -> bool {
        self != Provenance::Natural
    }
}

/// Where a run of pairs came from.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Origin {
    pub provenance: Provenance,
    /// Checkpoint (or ensemble) id of the generator, for synthetic data.
    pub generator: Option<String>,
    pub shard: Option<usize>,
    pub stage: Option<String>,
}

impl Origin {
    pub fn natural() -> Self {
        Origin { provenance: Provenance::Natural, generator: None, shard: None, stage: None }
    }

    pub fn synthetic(provenance: Provenance, generator: &str, shard: Option<usize>, stage: &str) -> Self {
        Origin { provenance, generator: Some(generator.to_string()), shard, stage: Some(stage.to_string()) }
    }
}

/// A contiguous run of pairs sharing one origin.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Span {
    pub len: usize,
    pub origin: Origin,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Direction {
    pub source: String,
    pub target: String,
}

impl Direction {
    pub fn new(source: &str, target: &str) -> Self {
        Direction { source: source.into(), target: target.into() }
    }

    pub fn reversed(&self) -> Self {
        Direction { source: self.target.clone(), target: self.source.clone() }
    }
}

impl std::fmt::Display for Direction {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}-{}", self.source, self.target)
    }
}

/// Aligned sentence pairs. A corpus built directly has a single origin;
/// [`ParallelCorpus::concat`] keeps per-span origins.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParallelCorpus {
    pub direction: Direction,
    pairs: Vec<(Sentence, Sentence)>,
    spans: Vec<Span>,
}

impl ParallelCorpus {
    pub fn new(direction: Direction, pairs: Vec<(Sentence, Sentence)>, origin: Origin) -> Result<Self> {
        if let Some(i) = pairs.iter().position(|(s, t)| s.is_empty() || t.is_empty()) {
            return Err(Error::invalid(format!("pair {i} has an empty side")));
        }
        let spans = if pairs.is_empty() { Vec::new() } else { vec![Span { len: pairs.len(), origin }] };
        Ok(ParallelCorpus { direction, pairs, spans })
    }

    pub fn natural(direction: Direction, pairs: Vec<(Sentence, Sentence)>) -> Result<Self> {
        Self::new(direction, pairs, Origin::natural())
    }

    pub fn empty(direction: Direction) -> Self {
        ParallelCorpus { direction, pairs: Vec::new(), spans: Vec::new() }
    }

    pub fn pairs(&self) -> &[(Sentence, Sentence)] {
        &self.pairs
    }

    pub fn spans(&self) -> &[Span] {
        &self.spans
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// The single provenance of the corpus, or `None` when it mixes several (or is empty).
    pub fn provenance(&self) -> Option<Provenance> {
        let first = self.spans.first()?.origin.provenance;
        self.spans.iter().all(|s| s.origin.provenance == first).then_some(first)
    }

    pub fn has_provenance(&self, p: Provenance) -> bool {
        self.spans.iter().any(|s| s.origin.provenance == p)
    }

    /// Origin of pair `i`.
    pub fn origin_of(&self, mut i: usize) -> Option<&Origin> {
        for s in &self.spans {
            if i < s.len {
                return Some(&s.origin);
            }
            i -= s.len;
        }
        None
    }

    pub fn sources(&self) -> impl Iterator<Item = &Sentence> {
        self.pairs.iter().map(|(s, _)| s)
    }

    pub fn targets(&self) -> impl Iterator<Item = &Sentence> {
        self.pairs.iter().map(|(_, t)| t)
    }

    /// Concatenation that records per-span provenance.
    pub fn concat<'a>(parts: impl IntoIterator<Item = &'a ParallelCorpus>) -> Result<Self> {
        let mut iter = parts.into_iter();
        let Some(first) = iter.next() else {
            return Err(Error::EmptyCorpus("nothing to concatenate".into()));
        };
        let mut out = first.clone();
        for p in iter {
            if p.direction != out.direction {
                return Err(Error::invalid(format!("cannot concatenate {} with {}", out.direction, p.direction)));
            }
            out.pairs.extend(p.pairs.iter().cloned());
            out.spans.extend(p.spans.iter().cloned());
        }
        Ok(out)
    }

    /// Same origins, new pair list of equal length (used by order-preserving maps).
    pub fn with_pairs(&self, pairs: Vec<(Sentence, Sentence)>) -> Self {
        assert_eq!(pairs.len(), self.pairs.len());
        ParallelCorpus { direction: self.direction.clone(), pairs, spans: self.spans.clone() }
    }

    /// Keeps the pairs at `indices` (in that order); the result carries a single
    /// origin when the input did, otherwise per-pair spans.
    pub(crate) fn select(&self, indices: &[usize]) -> Self {
        let pairs: Vec<_> = indices.iter().map(|&i| self.pairs[i].clone()).collect();
        let spans = if let (Some(first), true) = (self.spans.first(), self.spans.len() == 1) {
            if pairs.is_empty() {
                Vec::new()
            } else {
                vec![Span { len: pairs.len(), origin: first.origin.clone() }]
            }
        } else {
            let mut spans: Vec<Span> = Vec::new();
            for &i in indices {
                let o = self.origin_of(i).expect("index in range").clone();
                match spans.last_mut() {
                    Some(s) if s.origin == o => s.len += 1,
                    _ => spans.push(Span { len: 1, origin: o }),
                }
            }
            spans
        };
        ParallelCorpus { direction: self.direction.clone(), pairs, spans }
    }

    /// Copy of the corpus with every span's origin replaced.
    pub fn relabel(&self, origin: Origin) -> Self {
        let spans = if self.pairs.is_empty() { Vec::new() } else { vec![Span { len: self.pairs.len(), origin }] };
        ParallelCorpus { direction: self.direction.clone(), pairs: self.pairs.clone(), spans }
    }

    /// Source and target swapped (the training data for the reverse direction).
    pub fn swapped(&self) -> Self {
        ParallelCorpus {
            direction: self.direction.reversed(),
            pairs: self.pairs.iter().map(|(s, t)| (t.clone(), s.clone())).collect(),
            spans: self.spans.clone(),
        }
    }

    pub fn take(&self, n: usize) -> Self {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.select(&idx)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MonoCorpus {
    pub language: String,
    pub sentences: Vec<Sentence>,
    /// Line numbers of `sentences` in the corpus this one was cut from.
    pub lines: Vec<usize>,
    pub shard_id: Option<usize>,
}

impl MonoCorpus {
    pub fn new(language: &str, sentences: Vec<Sentence>) -> Self {
        let lines = (0..sentences.len()).collect();
        MonoCorpus { language: language.into(), sentences, lines, shard_id: None }
    }

    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }
}

/// `round(x)` with halves rounded up.
pub fn round_half_up(x: f64) -> usize {
    (x + 0.5).floor().max(0.0) as usize
}

/// Sampling with replacement that keeps every original pair: the output holds
/// all `N` originals plus `round(ratio*N) - N` uniform extras, shuffled together.
pub fn upsample(corpus: &ParallelCorpus, ratio: f64, seed: u64) -> Result<ParallelCorpus> {
    if !(ratio >= 1.0) {
        return Err(Error::invalid(format!("up-sampling ratio {ratio} < 1.0; use bagging_sample")));
    }
    let n = corpus.len();
    let total = round_half_up(ratio * n as f64);
    if total == n {
        return Ok(corpus.clone());
    }
    let mut rng = seed::rng_for(seed, "upsample");
    let mut idx: Vec<usize> = (0..n).collect();
    idx.extend((n..total).map(|_| rng.gen_range(0..n)));
    idx.shuffle(&mut rng);
    Ok(corpus.select(&idx))
}

/// Plain bootstrap: `round(ratio*N)` i.i.d. draws with replacement.
pub fn bagging_sample(corpus: &ParallelCorpus, ratio: f64, seed: u64) -> Result<ParallelCorpus> {
    if !(ratio > 0.0) {
        return Err(Error::invalid(format!("bagging ratio {ratio} must be positive")));
    }
    let n = corpus.len();
    if n == 0 {
        return Ok(corpus.clone());
    }
    let total = round_half_up(ratio * n as f64);
    let mut rng = seed::rng_for(seed, "bagging");
    let idx: Vec<usize> = (0..total).map(|_| rng.gen_range(0..n)).collect();
    Ok(corpus.select(&idx))
}

/// Sampling strategy applied to a model's natural training data.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "ratio", rename_all = "snake_case")]
pub enum Sampling {
    None,
    Upsample(f64),
    Bagging(f64),
}

impl Sampling {
    pub fn apply(&self, corpus: &ParallelCorpus, seed: u64) -> Result<ParallelCorpus> {
        match *self {
            Sampling::None => Ok(corpus.clone()),
            Sampling::Upsample(r) => upsample(corpus, r, seed),
            Sampling::Bagging(r) => bagging_sample(corpus, r, seed),
        }
    }

    pub fn label(&self) -> String {
        match self {
            Sampling::None => "none".into(),
            Sampling::Upsample(r) => format!("up{}", (r * 100.0).round()),
            Sampling::Bagging(r) => format!("bag{}", (r * 100.0).round()),
        }
    }
}

/// Seeded shuffle, then round-robin assignment into `n_parts` disjoint shards.
/// Each shard keeps its sentences in original corpus order.
pub fn split_disjoint(mono: &MonoCorpus, n_parts: usize, seed: u64) -> Result<Vec<MonoCorpus>> {
    if n_parts == 0 {
        return Err(Error::invalid("n_parts must be at least 1"));
    }
    if n_parts > mono.len() {
        return Err(Error::invalid(format!("cannot split {} sentences into {n_parts} parts", mono.len())));
    }
    let mut order: Vec<usize> = (0..mono.len()).collect();
    order.shuffle(&mut seed::rng_for(seed, "split_disjoint"));
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); n_parts];
    for (j, &i) in order.iter().enumerate() {
        members[j % n_parts].push(i);
    }
    Ok(members
        .into_iter()
        .enumerate()
        .map(|(part, mut idx)| {
            idx.sort_unstable();
            MonoCorpus {
                language: mono.language.clone(),
                sentences: idx.iter().map(|&i| mono.sentences[i].clone()).collect(),
                lines: idx.iter().map(|&i| mono.lines[i]).collect(),
                shard_id: Some(part),
            }
        })
        .collect())
}

/// Shard reuse policy: with fewer shards than consumers, consumer `i` reads shard `i mod n_parts`.
pub fn consumer_part(consumer: usize, n_parts: usize) -> usize {
    consumer % n_parts
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn corpus(n: usize) -> ParallelCorpus {
        let pairs = (0..n as u32).map(|i| (vec![i + 10], vec![i + 1000])).collect();
        ParallelCorpus::natural(Direction::new("a", "b"), pairs).unwrap()
    }

    #[test]
    fn upsample_identity_at_ratio_one() {
        let c = corpus(10);
        assert_eq!(upsample(&c, 1.0, 3).unwrap(), c);
    }

    #[test]
    fn upsample_keeps_all_originals() {
        let c = corpus(10);
        let u = upsample(&c, 1.2, 3).unwrap();
        assert_eq!(u.len(), 12);
        let seen: HashSet<_> = u.pairs().iter().collect();
        assert!(c.pairs().iter().all(|p| seen.contains(p)));
        assert_eq!(u.provenance(), Some(Provenance::Natural));
    }

    #[test]
    fn upsample_rejects_ratio_below_one() {
        assert!(upsample(&corpus(4), 0.9, 0).is_err());
    }

    #[test]
    fn upsample_seeds_vary_extras_only() {
        let c = corpus(50);
        let a = upsample(&c, 1.4, 1).unwrap();
        let b = upsample(&c, 1.4, 2).unwrap();
        assert_eq!(a.len(), b.len());
        assert_eq!(a.len(), 70);
        assert_ne!(a, b);
    }

    #[test]
    fn bagging_single_pair() {
        let c = corpus(1);
        let b = bagging_sample(&c, 3.0, 9).unwrap();
        assert_eq!(b.len(), 3);
        assert!(b.pairs().iter().all(|p| p == &c.pairs()[0]));
        assert_eq!(bagging_sample(&c, 3.0, 9).unwrap(), b);
    }

    #[test]
    fn split_errors_and_trivial_case() {
        let m = MonoCorpus::new("x", (0..5).map(|i| vec![i]).collect());
        assert!(split_disjoint(&m, 6, 0).is_err());
        assert!(split_disjoint(&m, 0, 0).is_err());
        let one = split_disjoint(&m, 1, 0).unwrap();
        assert_eq!(one.len(), 1);
        assert_eq!(one[0].sentences, m.sentences);
        assert_eq!(one[0].shard_id, Some(0));
    }

    #[test]
    fn ninety_into_nine() {
        let m = MonoCorpus::new("x", (0..90).map(|i| vec![i]).collect());
        let parts = split_disjoint(&m, 9, 4).unwrap();
        let mut all = HashSet::new();
        for p in &parts {
            assert_eq!(p.len(), 10);
            for &l in &p.lines {
                assert!(all.insert(l));
            }
        }
        assert_eq!(all.len(), 90);
    }

    #[test]
    fn shard_reuse_policy() {
        let got: Vec<usize> = (0..9).map(|i| consumer_part(i, 3)).collect();
        assert_eq!(got, vec![0, 1, 2, 0, 1, 2, 0, 1, 2]);
    }

    #[test]
    fn concat_records_spans() {
        let a = corpus(2);
        let b = corpus(3).relabel(Origin::synthetic(Provenance::BackTranslated, "m1", Some(0), "bt"));
        let c = ParallelCorpus::concat([&a, &b]).unwrap();
        assert_eq!(c.len(), 5);
        assert_eq!(c.provenance(), None);
        assert_eq!(c.origin_of(1).unwrap().provenance, Provenance::Natural);
        assert_eq!(c.origin_of(4).unwrap().generator.as_deref(), Some("m1"));
    }

    #[test]
    fn empty_side_rejected() {
        assert!(ParallelCorpus::natural(Direction::new("a", "b"), vec![(vec![], vec![1])]).is_err());
    }

    proptest::proptest! {
        #[test]
        fn upsample_size_and_coverage(n in 1usize..200, ratio in 1.0f64..3.0, seed in 0u64..1000) {
            let c = corpus(n);
            let u = upsample(&c, ratio, seed).unwrap();
            proptest::prop_assert_eq!(u.len(), round_half_up(ratio * n as f64));
            let seen: HashSet<_> = u.pairs().iter().collect();
            proptest::prop_assert!(c.pairs().iter().all(|p| seen.contains(p)));
        }

        #[test]
        fn bagging_draws_from_corpus(n in 1usize..200, ratio in 0.1f64..2.0, seed in 0u64..1000) {
            let c = corpus(n);
            let b = bagging_sample(&c, ratio, seed).unwrap();
            proptest::prop_assert_eq!(b.len(), round_half_up(ratio * n as f64));
            let orig: HashSet<_> = c.pairs().iter().collect();
            proptest::prop_assert!(b.pairs().iter().all(|p| orig.contains(p)));
        }

        #[test]
        fn split_partitions_and_balances(n in 1usize..300, parts in 1usize..12, seed in 0u64..1000) {
            proptest::prop_assume!(parts <= n);
            let m = MonoCorpus::new("x", (0..n as u32).map(|i| vec![i]).collect());
            let shards = split_disjoint(&m, parts, seed).unwrap();
            let mut lines: Vec<usize> = shards.iter().flat_map(|s| s.lines.iter().copied()).collect();
            lines.sort_unstable();
            proptest::prop_assert_eq!(lines, (0..n).collect::<Vec<_>>());
            let sizes: Vec<usize> = shards.iter().map(|s| s.len()).collect();
            proptest::prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
            for s in &shards {
                proptest::prop_assert!(s.lines.windows(2).all(|w| w[0] < w[1]));
            }
        }
    }
}
