//! Beam search over one model or an ensemble.

use super::config::TargetOrder;
use super::infer::{DecoderState, Encoded, Model};
use crate::error::{Error, Result};
use crate::textkit::{BOS, EOS};
use serde::{Deserialize, Serialize};

/// Anything that yields next-token log-probabilities for a set of hypotheses.
pub trait StepScorer {
    type State: Clone;
    fn vocab_size(&self) -> usize;
    /// Number of reserved ids at the bottom of the vocabulary; all but EOS are never emitted.
    fn num_specials(&self) -> usize;
    fn step(&self, states: &mut [Self::State], tokens: &[u32]) -> Vec<Vec<f64>>;
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BeamOptions {
    pub beam: usize,
    /// Output length cap is `ceil(max_len_ratio * src_len) + max_len_extra`.
    pub max_len_ratio: f64,
    pub max_len_extra: usize,
    pub length_penalty: f64,
}

impl Default for BeamOptions {
    fn default() -> Self {
        BeamOptions { beam: 4, max_len_ratio: 1.5, max_len_extra: 5, length_penalty: 1.0 }
    }
}

impl BeamOptions {
    pub fn with_beam(beam: usize) -> Self {
        BeamOptions { beam, ..Default::default() }
    }

    pub fn max_len(&self, src_len: usize) -> usize {
        ((self.max_len_ratio * src_len as f64).ceil() as usize + self.max_len_extra).max(1)
    }
}

#[derive(Clone)]
struct Hyp<S> {
    tokens: Vec<u32>,
    score: f64,
    state: S,
}

/// Runs beam search from `init` and returns the best finished sequence without EOS.
///
/// Scores are summed log-probabilities divided by `len^length_penalty`, where
/// `len` counts the EOS. Ties go to the lower token id, then the lower hypothesis index.
pub fn beam_search<S: StepScorer>(scorer: &S, init: S::State, beam: usize, max_len: usize, length_penalty: f64) -> Vec<u32> {
    assert!(beam >= 1 && max_len >= 1);
    let specials = scorer.num_specials() as u32;
    let vocab = scorer.vocab_size();
    let mut live = vec![Hyp { tokens: Vec::new(), score: 0.0, state: init }];
    let mut finished: Vec<(f64, Vec<u32>)> = Vec::new();
    for t in 0..max_len {
        let mut states: Vec<S::State> = live.iter().map(|h| h.state.clone()).collect();
        let last: Vec<u32> = live.iter().map(|h| h.tokens.last().copied().unwrap_or(BOS)).collect();
        let logp = scorer.step(&mut states, &last);
        let force_eos = t + 1 == max_len;
        let mut cands: Vec<(f64, u32, usize)> = Vec::with_capacity(live.len() * vocab);
        for (hi, lp) in logp.iter().enumerate() {
            for tok in 0..vocab as u32 {
                let allowed = if tok == EOS { t > 0 || force_eos } else { tok >= specials && !force_eos };
                if allowed {
                    cands.push((live[hi].score + lp[tok as usize], tok, hi));
                }
            }
        }
        cands.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        let mut next = Vec::with_capacity(beam);
        for (rank, &(score, tok, hi)) in cands.iter().enumerate() {
            if next.len() == beam || (rank >= beam && tok == EOS) {
                if next.len() == beam {
                    break;
                }
                continue;
            }
            if tok == EOS {
                let len = live[hi].tokens.len() + 1;
                finished.push((score / (len as f64).powf(length_penalty), live[hi].tokens.clone()));
            } else {
                let mut tokens = live[hi].tokens.clone();
                tokens.push(tok);
                next.push(Hyp { tokens, score, state: states[hi].clone() });
            }
        }
        live = next;
        if finished.len() >= beam || live.is_empty() {
            break;
        }
    }
    // first maximum wins, so earlier finishers take ties
    let mut best: Option<&(f64, Vec<u32>)> = None;
    for f in &finished {
        if best.map_or(true, |b| f.0 > b.0) {
            best = Some(f);
        }
    }
    best.map(|b| b.1.clone()).unwrap_or_default()
}

/// One or more models decoding the same sentence; log-probabilities are averaged.
pub struct EnsembleScorer<'a> {
    members: Vec<(&'a Model, &'a Encoded)>,
}

impl StepScorer for EnsembleScorer<'_> {
    type State = Vec<DecoderState>;

    fn vocab_size(&self) -> usize {
        self.members[0].0.vocab_size()
    }

    fn num_specials(&self) -> usize {
        self.members[0].0.cfg.num_specials
    }

    fn step(&self, states: &mut [Self::State], tokens: &[u32]) -> Vec<Vec<f64>> {
        let k = self.members.len() as f64;
        let mut total: Vec<Vec<f64>> = vec![vec![0.0; self.vocab_size()]; states.len()];
        for (m, (model, enc)) in self.members.iter().enumerate() {
            let mut own: Vec<DecoderState> = states.iter().map(|s| s[m].clone()).collect();
            let lp = model.step(enc, &mut own, tokens);
            for ((acc, row), (s, st)) in total.iter_mut().zip(&lp).zip(states.iter_mut().zip(own)) {
                for (a, &x) in acc.iter_mut().zip(row) {
                    *a += x;
                }
                s[m] = st;
            }
        }
        for row in &mut total {
            row.iter_mut().for_each(|x| *x /= k);
        }
        total
    }
}

fn check_compatible(models: &[&Model]) -> Result<()> {
    let first = models.first().ok_or_else(|| Error::invalid("no models to decode with"))?;
    for m in &models[1..] {
        if m.vocab_size() != first.vocab_size() || m.cfg.num_specials != first.cfg.num_specials {
            return Err(Error::VocabMismatch(format!("vocab sizes {} and {}", first.vocab_size(), m.vocab_size())));
        }
        if m.cfg.target_order != first.cfg.target_order {
            return Err(Error::invalid("ensemble members disagree on target order"));
        }
    }
    Ok(())
}

/// Decodes each source with the (ensemble of) models. Output is in normal
/// left-to-right order even for right-to-left models.
pub fn beam_decode_batch<S: AsRef<[u32]> + Sync>(models: &[&Model], sources: &[S], opts: &BeamOptions) -> Result<Vec<Vec<u32>>> {
    beam_decode_padded(models, sources, opts, 0)
}

/// As [`beam_decode_batch`] with extra encoder padding (results must not change).
pub fn beam_decode_padded<S: AsRef<[u32]> + Sync>(models: &[&Model], sources: &[S], opts: &BeamOptions, extra_pad: usize) -> Result<Vec<Vec<u32>>> {
    check_compatible(models)?;
    if opts.beam == 0 {
        return Err(Error::invalid("beam must be at least 1"));
    }
    const CHUNK: usize = 64;
    let chunks: Vec<&[S]> = sources.chunks(CHUNK).collect();
    let decoded = crate::par::map(&chunks, |chunk| {
        let encoded: Vec<Encoded> = models.iter().map(|m| m.encode_padded(chunk, extra_pad)).collect();
        let scorer = EnsembleScorer { members: models.iter().copied().zip(encoded.iter()).collect() };
        let mut out = Vec::with_capacity(chunk.len());
        for (i, src) in chunk.iter().enumerate() {
            let init = models.iter().map(|m| m.start(i)).collect();
            let mut hyp = beam_search(&scorer, init, opts.beam, opts.max_len(src.as_ref().len()), opts.length_penalty);
            if models[0].cfg.target_order == TargetOrder::R2l {
                hyp.reverse();
            }
            out.push(hyp);
        }
        out
    });
    Ok(decoded.into_iter().flatten().collect())
}

pub fn beam_decode(models: &[&Model], src: &[u32], opts: &BeamOptions) -> Result<Vec<u32>> {
    Ok(beam_decode_batch(models, &[src], opts)?.remove(0))
}
