//! Corpus BLEU and the dev-set scoring harness.

use crate::corpus::ParallelCorpus;
use crate::error::{Error, Result};
use crate::model::{beam_decode_batch, BeamOptions, Checkpoint, Model};
use crate::textkit::{is_punct_or_symbol, localize_quotes, QuoteStyle, Vocabulary};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::fmt;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

pub const MAX_ORDER: usize = 4;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tokenization {
    /// Punctuation and symbols split off as their own tokens, case kept.
    #[default]
    Intl,
    /// Every non-space character is a token.
    Char,
    /// Whitespace split only.
    None,
}

impl Tokenization {
    pub fn tag(self) -> &'static str {
        match self {
            Tokenization::Intl => "intl",
            Tokenization::Char => "char",
            Tokenization::None => "none",
        }
    }

    pub fn tokenize(self, text: &str) -> Vec<String> {
        match self {
            Tokenization::None => text.split_whitespace().map(str::to_owned).collect(),
            Tokenization::Char => text.chars().filter(|c| !c.is_whitespace()).map(String::from).collect(),
            Tokenization::Intl => {
                let mut out = Vec::new();
                for word in text.split_whitespace() {
                    let mut cur = String::new();
                    for c in word.chars() {
                        if is_punct_or_symbol(c) {
                            if !cur.is_empty() {
                                out.push(std::mem::take(&mut cur));
                            }
                            out.push(c.to_string());
                        } else {
                            cur.push(c);
                        }
                    }
                    if !cur.is_empty() {
                        out.push(cur);
                    }
                }
                out
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BleuReport {
    pub bleu: f64,
    pub precisions: [f64; MAX_ORDER],
    pub brevity_penalty: f64,
    pub hyp_len: usize,
    pub ref_len: usize,
    pub tokenization: Tokenization,
}

impl BleuReport {
    pub fn signature(&self) -> String {
        format!("nrefs:1|tok:{}|n:{}|smooth:none", self.tokenization.tag(), MAX_ORDER)
    }
}

impl fmt::Display for BleuReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let p: Vec<String> = self.precisions.iter().map(|p| format!("{:.1}", 100.0 * p)).collect();
        write!(
            f,
            "BLEU {:.2} {} (BP {:.3} hyp_len {} ref_len {}) {}",
            self.bleu,
            p.join("/"),
            self.brevity_penalty,
            self.hyp_len,
            self.ref_len,
            self.signature()
        )
    }
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut m = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// Corpus-level 4-gram BLEU with clipped counts, no smoothing.
pub fn bleu<H: AsRef<str>, R: AsRef<str>>(hyps: &[H], refs: &[R], tokenization: Tokenization) -> Result<BleuReport> {
    if hyps.len() != refs.len() {
        return Err(Error::invalid(format!("{} hypotheses for {} references", hyps.len(), refs.len())));
    }
    if hyps.is_empty() {
        return Err(Error::invalid("BLEU needs at least one sentence"));
    }
    let mut matches = [0usize; MAX_ORDER];
    let mut totals = [0usize; MAX_ORDER];
    let (mut hyp_len, mut ref_len) = (0, 0);
    for (i, (h, r)) in hyps.iter().zip(refs).enumerate() {
        let h = tokenization.tokenize(h.as_ref());
        let r = tokenization.tokenize(r.as_ref());
        if r.is_empty() {
            return Err(Error::invalid(format!("reference {i} is empty")));
        }
        hyp_len += h.len();
        ref_len += r.len();
        for n in 1..=MAX_ORDER {
            let rc = ngram_counts(&r, n);
            for (g, c) in ngram_counts(&h, n) {
                matches[n - 1] += c.min(rc.get(g).copied().unwrap_or(0));
            }
            totals[n - 1] += h.len().saturating_sub(n - 1);
        }
    }
    let mut precisions = [0.0; MAX_ORDER];
    for n in 0..MAX_ORDER {
        precisions[n] = if totals[n] == 0 { 0.0 } else { matches[n] as f64 / totals[n] as f64 };
    }
    let brevity_penalty = if hyp_len == 0 {
        0.0
    } else if hyp_len >= ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    };
    let bleu = if precisions.iter().any(|&p| p == 0.0) {
        0.0
    } else {
        100.0 * brevity_penalty * (precisions.iter().map(|p| p.ln()).sum::<f64>() / MAX_ORDER as f64).exp()
    };
    Ok(BleuReport { bleu, precisions, brevity_penalty, hyp_len, ref_len, tokenization })
}

/// Detokenizes hypotheses and references and scores them.
pub fn score_ids<H: AsRef<[u32]>>(hyps: &[H], dev: &ParallelCorpus, vocab: &Vocabulary, quotes: QuoteStyle, tokenization: Tokenization) -> Result<BleuReport> {
    let hyp_text: Vec<String> = hyps.iter().map(|h| localize_quotes(&vocab.decode(h.as_ref()), quotes)).collect();
    let ref_text: Vec<String> = dev.targets().map(|t| vocab.decode(t)).collect();
    bleu(&hyp_text, &ref_text, tokenization)
}

fn corpus_hash(dev: &ParallelCorpus) -> String {
    let mut bytes = Vec::new();
    for (s, t) in dev.pairs() {
        for side in [s, t] {
            bytes.extend((side.len() as u32).to_le_bytes());
            side.iter().for_each(|id| bytes.extend(id.to_le_bytes()));
        }
    }
    crate::seed::content_hash(&bytes)
}

/// Decodes dev sources with one model or an ensemble and scores the output.
/// Reports are cached by (model set, dev set, decoding options).
pub struct DevScorer {
    pub vocab: Vocabulary,
    pub quotes: QuoteStyle,
    pub tokenization: Tokenization,
    cache: Mutex<HashMap<String, BleuReport>>,
    decodes: AtomicUsize,
}

impl DevScorer {
    pub fn new(vocab: Vocabulary, quotes: QuoteStyle, tokenization: Tokenization) -> Self {
        DevScorer { vocab, quotes, tokenization, cache: Mutex::new(HashMap::new()), decodes: AtomicUsize::new(0) }
    }

    /// Number of decoding passes run so far (cache misses).
    pub fn decodes(&self) -> usize {
        self.decodes.load(Ordering::Relaxed)
    }

    pub fn score(&self, models: &[&Checkpoint], dev: &ParallelCorpus, opts: &BeamOptions) -> Result<BleuReport> {
        if dev.is_empty() {
            return Err(Error::EmptyCorpus("dev set".into()));
        }
        if models.is_empty() {
            return Err(Error::invalid("scoring needs at least one model"));
        }
        let mut key = String::new();
        for m in models {
            key.push_str(&m.param_hash());
            key.push('+');
        }
        key.push_str(&format!(
            "{}|{}|{:?}|{:?}|{}|{}|{}",
            corpus_hash(dev),
            opts.beam,
            self.quotes,
            self.tokenization,
            opts.max_len_ratio,
            opts.max_len_extra,
            opts.length_penalty
        ));
        if let Some(hit) = self.cache.lock().expect("cache lock").get(&key) {
            return Ok(hit.clone());
        }
        let nets = models.iter().map(|c| Model::new(c)).collect::<Result<Vec<Model>>>()?;
        let refs: Vec<&Model> = nets.iter().collect();
        let sources: Vec<&[u32]> = dev.sources().map(|s| s.as_slice()).collect();
        let hyps = beam_decode_batch(&refs, &sources, opts)?;
        self.decodes.fetch_add(1, Ordering::Relaxed);
        let report = score_ids(&hyps, dev, &self.vocab, self.quotes, self.tokenization)?;
        self.cache.lock().expect("cache lock").insert(key, report.clone());
        Ok(report)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn round4(x: f64) -> f64 {
        (x * 1e4).round() / 1e4
    }

    #[test]
    fn identical_corpus_scores_100() {
        let x = ["the cat sat on the mat .", "a dog , barking loudly !"];
        let r = bleu(&x, &x, Tokenization::Intl).unwrap();
        assert_eq!(r.bleu, 100.0);
        assert_eq!(r.brevity_penalty, 1.0);
    }

    #[test]
    fn hand_counted_oracle() {
        // p1 5/6, p2 3/5, p3 1/4, p4 0/3
        let r = bleu(&["the cat sat on the mat"], &["the cat is on the mat"], Tokenization::None).unwrap();
        assert_eq!(r.precisions, [5.0 / 6.0, 0.6, 0.25, 0.0]);
        assert_eq!(r.bleu, 0.0);
        // adding "a b c d" twice: p = 9/10, 6/8, 3/6, 1/4, BP 1
        let r = bleu(&["the cat sat on the mat", "a b c d"], &["the cat is on the mat", "a b c d"], Tokenization::None).unwrap();
        assert_eq!(r.precisions, [0.9, 0.75, 0.5, 0.25]);
        assert_eq!(round4(r.bleu), 53.8956);
        // all precisions 1, hyp 4 ref 6: BP exp(-1/2)
        let r = bleu(&["a b c d"], &["a b c d e f"], Tokenization::None).unwrap();
        assert_eq!(round4(r.bleu), 60.6531);
    }

    #[test]
    fn errors_and_degenerate_inputs() {
        assert!(bleu(&["a"], &["a", "b"], Tokenization::None).is_err());
        assert!(bleu::<&str, &str>(&[], &[], Tokenization::None).is_err());
        assert!(bleu(&["a"], &[""], Tokenization::None).is_err());
        assert_eq!(bleu(&[""], &["a b c d"], Tokenization::None).unwrap().bleu, 0.0);
    }

    #[test]
    fn tokenizations() {
        assert_eq!(Tokenization::Intl.tokenize("Hi, there!"), ["Hi", ",", "there", "!"]);
        assert_eq!(Tokenization::Char.tokenize("ab c"), ["a", "b", "c"]);
        assert_eq!(Tokenization::None.tokenize("Hi, there!"), ["Hi,", "there!"]);
        let r = bleu(&["x"], &["x"], Tokenization::Char).unwrap();
        assert!(r.to_string().contains("tok:char|n:4"));
    }

    fn sentence() -> impl Strategy<Value = Vec<u8>> {
        prop::collection::vec(0u8..6, 4..12)
    }

    fn text(ws: &[u8]) -> String {
        ws.iter().map(|w| format!("w{w}")).collect::<Vec<_>>().join(" ")
    }

    proptest! {
        #[test]
        fn self_bleu_is_100(c in prop::collection::vec(sentence(), 1..6)) {
            let x: Vec<String> = c.iter().map(|s| text(s)).collect();
            prop_assert_eq!(bleu(&x, &x, Tokenization::Intl).unwrap().bleu, 100.0);
        }

        #[test]
        fn corruption_never_helps(c in prop::collection::vec(sentence(), 1..5), seed in any::<u64>()) {
            use rand::{Rng, SeedableRng};
            let refs: Vec<String> = c.iter().map(|s| text(s)).collect();
            let mut hyp: Vec<Vec<String>> = c.iter().map(|s| s.iter().map(|w| format!("w{w}")).collect()).collect();
            let slots: Vec<(usize, usize)> = hyp.iter().enumerate().flat_map(|(i, s)| (0..s.len()).map(move |j| (i, j))).collect();
            let mut order = slots.clone();
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            for i in (1..order.len()).rev() {
                order.swap(i, rng.gen_range(0..=i));
            }
            let mut prev = 100.0;
            for (k, &(i, j)) in order.iter().enumerate() {
                hyp[i][j] = format!("oov{k}");
                let h: Vec<String> = hyp.iter().map(|s| s.join(" ")).collect();
                let b = bleu(&h, &refs, Tokenization::Intl).unwrap().bleu;
                prop_assert!(b <= prev + 1e-9);
                prev = b;
            }
        }

        #[test]
        fn pair_order_does_not_matter(c in prop::collection::vec((sentence(), sentence()), 2..6), rot in 1usize..5) {
            let h: Vec<String> = c.iter().map(|(a, _)| text(a)).collect();
            let r: Vec<String> = c.iter().map(|(_, b)| text(b)).collect();
            let base = bleu(&h, &r, Tokenization::Intl).unwrap();
            let k = rot % c.len();
            let mut h2 = h.clone();
            let mut r2 = r.clone();
            h2.rotate_left(k);
            r2.rotate_left(k);
            let moved = bleu(&h2, &r2, Tokenization::Intl).unwrap();
            prop_assert_eq!(base.bleu, moved.bleu);
        }
    }

    #[test]
    fn shuffling_hypotheses_against_references_changes_score() {
        let h = ["a b c d e", "f g h i j"];
        let r = ["a b c d e", "f g h i j"];
        let swapped = ["f g h i j", "a b c d e"];
        assert_eq!(bleu(&h, &r, Tokenization::None).unwrap().bleu, 100.0);
        assert_eq!(bleu(&swapped, &r, Tokenization::None).unwrap().bleu, 0.0);
    }

    fn cipher() -> (crate::corpus::SyntheticTask, ParallelCorpus) {
        let mut spec = crate::corpus::SyntheticTaskSpec::cipher("xx", "yy", 20, 3);
        spec.max_len = 6;
        let task = crate::corpus::SyntheticTask::new(spec).unwrap();
        let dev = task.sample_parallel(12, "dev");
        (task, dev)
    }

    #[test]
    fn oracle_output_scores_100() {
        let (task, dev) = cipher();
        let hyps: Vec<Vec<u32>> = dev.sources().map(|s| task.oracle_translate(s).unwrap()).collect();
        let r = score_ids(&hyps, &dev, task.vocabulary(), QuoteStyle::AsIs, Tokenization::Intl).unwrap();
        assert_eq!(r.bleu, 100.0);
    }

    #[test]
    fn dev_scores_are_cached_per_beam() {
        let (task, dev) = cipher();
        let mut cfg = crate::model::preset_config("base", task.vocabulary().len()).unwrap();
        cfg.embed_dim = 16;
        cfg.ffn_dim = 32;
        cfg.heads = 2;
        cfg.head_dim = 8;
        let ckpt = Checkpoint::init(&cfg, 3).unwrap();
        let scorer = DevScorer::new(task.vocabulary().clone(), QuoteStyle::AsIs, Tokenization::Intl);
        let a = scorer.score(&[&ckpt], &dev, &BeamOptions::with_beam(2)).unwrap();
        let b = scorer.score(&[&ckpt], &dev, &BeamOptions::with_beam(2)).unwrap();
        assert_eq!(a, b);
        assert_eq!(scorer.decodes(), 1);
        scorer.score(&[&ckpt], &dev, &BeamOptions::with_beam(3)).unwrap();
        assert_eq!(scorer.decodes(), 2);
        assert!(scorer.score(&[&ckpt], &dev.take(0), &BeamOptions::with_beam(2)).is_err());
    }
}
