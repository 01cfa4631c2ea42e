//! Seeded artificial language pairs small enough to train on in minutes.
//!
//! Each language has a lexicon of `vocab_size` words named `<lang><index>`.
//! Sentences are drawn from a Zipfian unigram process; the target side is a
//! deterministic, invertible transformation of the source word indices.

use super::{Direction, MonoCorpus, Origin, ParallelCorpus, Sentence};
use crate::error::{Error, Result};
use crate::seed;
use crate::textkit::{learn_bpe, BpeOptions, Vocabulary};
use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::{HashMap, HashSet};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Transformation {
    /// Target is the source word sequence reversed.
    Reverse,
    /// Word-for-word substitution through a seeded permutation of the lexicon.
    #[default]
    SubstitutionCipher,
    /// Adjacent word pairs swapped and every index shifted by one.
    ShiftReorder,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTaskSpec {
    pub source_language: String,
    pub target_language: String,
    pub vocab_size: usize,
    pub min_len: usize,
    pub max_len: usize,
    #[serde(default)]
    pub transformation: Transformation,
    #[serde(default)]
    pub noise_rate: f64,
    #[serde(default = "default_zipf")]
    pub zipf_exponent: f64,
    /// Reorders the unigram ranking; `0` keeps the natural order. Distinct
    /// values give domain-shifted samples of the same language pair.
    #[serde(default)]
    pub domain: u64,
    pub seed: u64,
}

fn default_zipf() -> f64 {
    1.0
}

impl SyntheticTaskSpec {
    pub fn cipher(source: &str, target: &str, vocab_size: usize, seed: u64) -> Self {
        SyntheticTaskSpec {
            source_language: source.into(),
            target_language: target.into(),
            vocab_size,
            min_len: 3,
            max_len: 10,
            transformation: Transformation::SubstitutionCipher,
            noise_rate: 0.0,
            zipf_exponent: 1.0,
            domain: 0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 2 {
            return Err(Error::invalid("synthetic vocab_size must be at least 2"));
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(Error::invalid(format!("bad synthetic length range {}..={}", self.min_len, self.max_len)));
        }
        if !(0.0..=1.0).contains(&self.noise_rate) {
            return Err(Error::invalid(format!("noise_rate {} outside [0, 1]", self.noise_rate)));
        }
        if self.source_language == self.target_language {
            return Err(Error::invalid("source and target languages must differ"));
        }
        Ok(())
    }
}

pub fn lexicon_word(language: &str, index: usize) -> String {
    format!("{language}{index}")
}

pub struct SyntheticTask {
    spec: SyntheticTaskSpec,
    vocab: Vocabulary,
    permutation: Vec<usize>,
    inverse_permutation: Vec<usize>,
    unigram: WeightedIndex<f64>,
    source_ids: Vec<Vec<u32>>,
    target_ids: Vec<Vec<u32>>,
    source_index: HashMap<String, usize>,
    target_index: HashMap<String, usize>,
}

impl SyntheticTask {
    /// Builds the task with its own vocabulary: one token per lexicon word.
    pub fn new(spec: SyntheticTaskSpec) -> Result<Self> {
        spec.validate()?;
        let vocab = Self::lexicon_vocabulary(&[&spec], &[])?;
        Self::with_vocabulary(spec, vocab)
    }

    /// Vocabulary with every word of the given tasks' lexicons as a single token.
    pub fn lexicon_vocabulary(specs: &[&SyntheticTaskSpec], direction_languages: &[String]) -> Result<Vocabulary> {
        let mut lines = Vec::new();
        let mut seen = HashSet::new();
        for spec in specs {
            for lang in [&spec.source_language, &spec.target_language] {
                if seen.insert((lang.clone(), spec.vocab_size)) {
                    lines.push((0..spec.vocab_size).map(|i| lexicon_word(lang, i)).collect::<Vec<_>>().join(" "));
                }
            }
        }
        let opts = BpeOptions { merges: usize::MAX, min_frequency: 1, direction_languages: direction_languages.to_vec(), ..Default::default() };
        learn_bpe(&[lines], &opts)
    }

    /// Builds the task over an existing (possibly shared) vocabulary.
    pub fn with_vocabulary(spec: SyntheticTaskSpec, vocab: Vocabulary) -> Result<Self> {
        spec.validate()?;
        let v = spec.vocab_size;
        let mut permutation: Vec<usize> = (0..v).collect();
        permutation.shuffle(&mut seed::rng_for(spec.seed, "cipher"));
        let mut inverse_permutation = vec![0; v];
        for (i, &p) in permutation.iter().enumerate() {
            inverse_permutation[p] = i;
        }
        let mut ranking: Vec<usize> = (0..v).collect();
        if spec.domain != 0 {
            ranking.shuffle(&mut seed::rng_for(spec.domain, "domain"));
        }
        let mut weights = vec![0.0; v];
        for (rank, &word) in ranking.iter().enumerate() {
            weights[word] = 1.0 / ((rank + 1) as f64).powf(spec.zipf_exponent);
        }
        let unigram = WeightedIndex::new(&weights).map_err(|e| Error::invalid(format!("unigram weights: {e}")))?;
        let encode_lexicon = |lang: &str| -> Result<Vec<Vec<u32>>> {
            (0..v)
                .map(|i| {
                    let ids = vocab.encode(&lexicon_word(lang, i));
                    if ids.contains(&crate::textkit::UNK) {
                        Err(Error::VocabMismatch(format!("word {} is not covered by the vocabulary", lexicon_word(lang, i))))
                    } else {
                        Ok(ids)
                    }
                })
                .collect()
        };
        let source_ids = encode_lexicon(&spec.source_language)?;
        let target_ids = encode_lexicon(&spec.target_language)?;
        let source_index = (0..v).map(|i| (lexicon_word(&spec.source_language, i), i)).collect();
        let target_index = (0..v).map(|i| (lexicon_word(&spec.target_language, i), i)).collect();
        Ok(SyntheticTask { spec, vocab, permutation, inverse_permutation, unigram, source_ids, target_ids, source_index, target_index })
    }

    pub fn spec(&self) -> &SyntheticTaskSpec {
        &self.spec
    }

    pub fn vocabulary(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn direction(&self) -> Direction {
        Direction::new(&self.spec.source_language, &self.spec.target_language)
    }

    /// Noise-free transformation of a word-index sentence.
    pub fn transform(&self, words: &[usize]) -> Vec<usize> {
        let v = self.spec.vocab_size;
        match self.spec.transformation {
            Transformation::Reverse => words.iter().rev().copied().collect(),
            Transformation::SubstitutionCipher => words.iter().map(|&w| self.permutation[w]).collect(),
            Transformation::ShiftReorder => {
                let mut out: Vec<usize> = words.iter().map(|&w| (w + 1) % v).collect();
                for pair in out.chunks_exact_mut(2) {
                    pair.swap(0, 1);
                }
                out
            }
        }
    }

    pub fn invert(&self, words: &[usize]) -> Vec<usize> {
        let v = self.spec.vocab_size;
        match self.spec.transformation {
            Transformation::Reverse => words.iter().rev().copied().collect(),
            Transformation::SubstitutionCipher => words.iter().map(|&w| self.inverse_permutation[w]).collect(),
            Transformation::ShiftReorder => {
                let mut out = words.to_vec();
                for pair in out.chunks_exact_mut(2) {
                    pair.swap(0, 1);
                }
                out.into_iter().map(|w| (w + v - 1) % v).collect()
            }
        }
    }

    fn draw_source<R: Rng>(&self, rng: &mut R) -> Vec<usize> {
        let len = rng.gen_range(self.spec.min_len..=self.spec.max_len);
        (0..len).map(|_| self.unigram.sample(rng)).collect()
    }

    fn corrupt<R: Rng>(&self, words: &mut [usize], rng: &mut R) {
        if self.spec.noise_rate <= 0.0 {
            return;
        }
        for w in words.iter_mut() {
            if rng.gen::<f64>() < self.spec.noise_rate {
                *w = rng.gen_range(0..self.spec.vocab_size);
            }
        }
    }

    fn ids(table: &[Vec<u32>], words: &[usize]) -> Sentence {
        words.iter().flat_map(|&w| table[w].iter().copied()).collect()
    }

    pub fn source_sentence(&self, words: &[usize]) -> Sentence {
        Self::ids(&self.source_ids, words)
    }

    pub fn target_sentence(&self, words: &[usize]) -> Sentence {
        Self::ids(&self.target_ids, words)
    }

    fn words_of(&self, ids: &[u32], index: &HashMap<String, usize>) -> Option<Vec<usize>> {
        self.vocab.decode(ids).split_whitespace().map(|w| index.get(w).copied()).collect()
    }

    /// Oracle translation of source ids (noise-free). `None` if the input is
    /// not a well-formed source sentence.
    pub fn oracle_translate(&self, source: &[u32]) -> Option<Sentence> {
        let words = self.words_of(source, &self.source_index)?;
        Some(self.target_sentence(&self.transform(&words)))
    }

    /// Oracle back-translation of target ids.
    pub fn oracle_back_translate(&self, target: &[u32]) -> Option<Sentence> {
        let words = self.words_of(target, &self.target_index)?;
        Some(self.source_sentence(&self.invert(&words)))
    }

    /// `n` fresh parallel pairs from the named random stream.
    pub fn sample_parallel(&self, n: usize, stream: &str) -> ParallelCorpus {
        self.sample_parallel_excluding(n, stream, &HashSet::new()).0
    }

    fn sample_parallel_excluding(&self, n: usize, stream: &str, exclude: &HashSet<Vec<usize>>) -> (ParallelCorpus, HashSet<Vec<usize>>) {
        let mut rng = seed::rng_for(self.spec.seed, stream);
        let mut drawn = HashSet::new();
        let mut pairs = Vec::with_capacity(n);
        while pairs.len() < n {
            let src = self.draw_source(&mut rng);
            if exclude.contains(&src) {
                continue;
            }
            let mut tgt = self.transform(&src);
            self.corrupt(&mut tgt, &mut rng);
            pairs.push((self.source_sentence(&src), self.target_sentence(&tgt)));
            drawn.insert(src);
        }
        let corpus = ParallelCorpus::new(self.direction(), pairs, Origin::natural()).expect("synthetic sentences are non-empty");
        (corpus, drawn)
    }

    /// Parallel training data plus source- and target-side monolingual data
    /// whose underlying sentences never occur in the parallel set.
    pub fn generate(&self, n_parallel: usize, n_mono_src: usize, n_mono_tgt: usize) -> (ParallelCorpus, MonoCorpus, MonoCorpus) {
        let (parallel, used) = self.sample_parallel_excluding(n_parallel, "parallel", &HashSet::new());
        let mono_src = {
            let mut rng = seed::rng_for(self.spec.seed, "mono_src");
            let mut out = Vec::with_capacity(n_mono_src);
            while out.len() < n_mono_src {
                let s = self.draw_source(&mut rng);
                if !used.contains(&s) {
                    out.push(self.source_sentence(&s));
                }
            }
            MonoCorpus::new(&self.spec.source_language, out)
        };
        let mono_tgt = {
            let mut rng = seed::rng_for(self.spec.seed, "mono_tgt");
            let mut out = Vec::with_capacity(n_mono_tgt);
            while out.len() < n_mono_tgt {
                let s = self.draw_source(&mut rng);
                if used.contains(&s) {
                    continue;
                }
                let mut t = self.transform(&s);
                self.corrupt(&mut t, &mut rng);
                out.push(self.target_sentence(&t));
            }
            MonoCorpus::new(&self.spec.target_language, out)
        };
        (parallel, mono_src, mono_tgt)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(t: Transformation) -> SyntheticTaskSpec {
        SyntheticTaskSpec { transformation: t, ..SyntheticTaskSpec::cipher("xx", "yy", 30, 5) }
    }

    #[test]
    fn lexicon_words_are_single_tokens() {
        let task = SyntheticTask::new(spec(Transformation::SubstitutionCipher)).unwrap();
        for i in 0..30 {
            assert_eq!(task.source_sentence(&[i]).len(), 1);
            assert_eq!(task.target_sentence(&[i]).len(), 1);
        }
        assert_eq!(task.vocabulary().len(), task.vocabulary().num_specials() + 60);
    }

    #[test]
    fn reverse_task_targets_are_reversed_sources() {
        let task = SyntheticTask::new(spec(Transformation::Reverse)).unwrap();
        let (par, _, _) = task.generate(50, 0, 0);
        for (s, t) in par.pairs() {
            let words_s: Vec<String> = task.vocabulary().decode(s).split(' ').map(|w| w[2..].to_string()).collect();
            let mut words_t: Vec<String> = task.vocabulary().decode(t).split(' ').map(|w| w[2..].to_string()).collect();
            words_t.reverse();
            assert_eq!(words_s, words_t);
        }
    }

    #[test]
    fn transformations_invert() {
        for t in [Transformation::Reverse, Transformation::SubstitutionCipher, Transformation::ShiftReorder] {
            let task = SyntheticTask::new(spec(t)).unwrap();
            let words = vec![3, 29, 0, 7, 7];
            assert_eq!(task.invert(&task.transform(&words)), words);
        }
    }

    #[test]
    fn oracle_reproduces_noise_free_targets() {
        let task = SyntheticTask::new(spec(Transformation::SubstitutionCipher)).unwrap();
        let dev = task.sample_parallel(40, "dev");
        for (s, t) in dev.pairs() {
            assert_eq!(task.oracle_translate(s).as_ref(), Some(t));
            assert_eq!(task.oracle_back_translate(t).as_ref(), Some(s));
        }
    }

    #[test]
    fn generation_is_deterministic_and_mono_is_fresh() {
        let a = SyntheticTask::new(spec(Transformation::SubstitutionCipher)).unwrap();
        let b = SyntheticTask::new(spec(Transformation::SubstitutionCipher)).unwrap();
        let ga = a.generate(100, 80, 80);
        let gb = b.generate(100, 80, 80);
        assert_eq!(ga, gb);
        let par_src: HashSet<_> = ga.0.sources().cloned().collect();
        assert!(ga.1.sentences.iter().all(|s| !par_src.contains(s)));
        let par_tgt: HashSet<_> = ga.0.targets().cloned().collect();
        assert!(ga.2.sentences.iter().all(|s| !par_tgt.contains(s)));
    }

    #[test]
    fn noise_corrupts_some_targets() {
        let mut s = spec(Transformation::SubstitutionCipher);
        s.noise_rate = 0.3;
        let task = SyntheticTask::new(s).unwrap();
        let (par, _, _) = task.generate(100, 0, 0);
        let wrong = par.pairs().iter().filter(|(s, t)| task.oracle_translate(s).as_ref() != Some(t)).count();
        assert!(wrong > 30);
    }
}
