//! Checkpoint selection, top-k averaging and random ensemble search.

use crate::corpus::ParallelCorpus;
use crate::error::{Error, Result};
use crate::eval::DevScorer;
use crate::model::{BeamOptions, Checkpoint};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashSet;
use std::fmt::Write as _;

/// Indices of the `k` best scores, best first; ties go to the later step.
pub fn rank_by_bleu(steps: &[u64], bleus: &[f64], k: usize) -> Result<Vec<usize>> {
    if steps.is_empty() {
        return Err(Error::invalid("no checkpoints to rank"));
    }
    if k == 0 || k > steps.len() {
        return Err(Error::invalid(format!("k = {k} with {} checkpoints", steps.len())));
    }
    let mut idx: Vec<usize> = (0..steps.len()).collect();
    idx.sort_by(|&a, &b| bleus[b].total_cmp(&bleus[a]).then(steps[b].cmp(&steps[a])).then(b.cmp(&a)));
    idx.truncate(k);
    Ok(idx)
}

/// Scores every checkpoint of a run on `dev` and returns the `k` best with `dev_bleu` set.
pub fn topk_checkpoints(run: &[Checkpoint], dev: &ParallelCorpus, k: usize, scorer: &DevScorer, opts: &BeamOptions) -> Result<Vec<Checkpoint>> {
    if run.is_empty() {
        return Err(Error::invalid("empty run"));
    }
    let mut scored = Vec::with_capacity(run.len());
    for c in run {
        let mut c = c.clone();
        c.dev_bleu = Some(scorer.score(&[&c], dev, opts)?.bleu);
        scored.push(c);
    }
    let steps: Vec<u64> = scored.iter().map(|c| c.step).collect();
    let bleus: Vec<f64> = scored.iter().map(|c| c.dev_bleu.unwrap_or(0.0)).collect();
    Ok(rank_by_bleu(&steps, &bleus, k)?.into_iter().map(|i| scored[i].clone()).collect())
}

/// Element-wise mean of every tensor. Step is the latest input step.
pub fn average_checkpoints(ckpts: &[&Checkpoint]) -> Result<Checkpoint> {
    let first = *ckpts.first().ok_or_else(|| Error::invalid("nothing to average"))?;
    for c in &ckpts[1..] {
        if c.config != first.config || c.tensors.len() != first.tensors.len() {
            return Err(Error::invalid(format!("checkpoint {} has a different model config", c.id())));
        }
        for (a, b) in first.tensors.iter().zip(&c.tensors) {
            if a.name != b.name || a.rows != b.rows || a.cols != b.cols {
                return Err(Error::invalid(format!("tensor `{}` does not match `{}` {}x{}", a.name, b.name, b.rows, b.cols)));
            }
        }
    }
    let n = ckpts.len() as f64;
    let mut out = first.clone();
    for (t, tensor) in out.tensors.iter_mut().enumerate() {
        for (i, x) in tensor.data.iter_mut().enumerate() {
            let sum: f64 = ckpts.iter().map(|c| c.tensors[t].data[i] as f64).sum();
            *x = (sum / n) as f32;
        }
    }
    out.step = ckpts.iter().map(|c| c.step).max().unwrap_or(0);
    out.dev_bleu = None;
    out.meta.remove("id");
    if ckpts.len() > 1 {
        let ids: Vec<String> = ckpts.iter().map(|c| c.id()).collect();
        out.meta.insert("averaged".into(), ids.join(","));
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnsembleCandidate {
    /// Position within each model's top-k list.
    pub selection: Vec<usize>,
    pub ids: Vec<String>,
    pub dev_bleu: f64,
    pub draw: usize,
}

/// The winner and every evaluated candidate in draw order.
#[derive(Clone, Debug, PartialEq)]
pub struct SearchOutcome {
    pub best: EnsembleCandidate,
    pub log: Vec<EnsembleCandidate>,
}

impl SearchOutcome {
    pub fn log_text(&self) -> String {
        let mut s = String::new();
        for c in &self.log {
            let _ = writeln!(s, "{}\t{}\t{:.4}", c.draw, c.ids.join(","), c.dev_bleu);
        }
        s
    }
}

fn space_size(sizes: &[usize]) -> Option<usize> {
    sizes.iter().try_fold(1usize, |acc, &k| acc.checked_mul(k))
}

/// Distinct selections, one index per model. Enumerates the whole product
/// space in mixed-radix order when `n_draws` covers it; otherwise draws
/// uniformly without replacement, so a larger `n_draws` extends a smaller one.
pub fn draw_selections<R: Rng>(sizes: &[usize], n_draws: usize, rng: &mut R) -> Result<Vec<Vec<usize>>> {
    if sizes.is_empty() || sizes.contains(&0) {
        return Err(Error::invalid("every model needs at least one checkpoint"));
    }
    if n_draws == 0 {
        return Err(Error::invalid("n_draws must be at least 1"));
    }
    match space_size(sizes) {
        Some(space) if n_draws >= space => {
            if n_draws > space {
                log::warn!("{n_draws} draws exceed the {space} possible ensembles; searching exhaustively");
            }
            Ok((0..space)
                .map(|mut code| {
                    let mut sel = vec![0; sizes.len()];
                    for (slot, &k) in sel.iter_mut().zip(sizes).rev() {
                        *slot = code % k;
                        code /= k;
                    }
                    sel
                })
                .collect())
        }
        _ => {
            let mut seen = HashSet::new();
            let mut out = Vec::with_capacity(n_draws);
            while out.len() < n_draws {
                let sel: Vec<usize> = sizes.iter().map(|&k| rng.gen_range(0..k)).collect();
                if seen.insert(sel.clone()) {
                    out.push(sel);
                }
            }
            Ok(out)
        }
    }
}

/// Evaluates each drawn selection with `eval` and keeps the best; ties go to the earlier draw.
pub fn search_with<F>(ids: &[Vec<String>], n_draws: usize, seed: u64, mut eval: F) -> Result<SearchOutcome>
where
    F: FnMut(&[usize]) -> Result<f64>,
{
    let sizes: Vec<usize> = ids.iter().map(Vec::len).collect();
    let mut rng = crate::seed::rng(seed);
    let draws = draw_selections(&sizes, n_draws, &mut rng)?;
    let mut log: Vec<EnsembleCandidate> = Vec::with_capacity(draws.len());
    for (draw, selection) in draws.into_iter().enumerate() {
        let dev_bleu = eval(&selection)?;
        let ids = selection.iter().zip(ids).map(|(&i, list)| list[i].clone()).collect();
        log.push(EnsembleCandidate { selection, ids, dev_bleu, draw });
    }
    let best = log.iter().fold(&log[0], |b, c| if c.dev_bleu > b.dev_bleu { c } else { b }).clone();
    Ok(SearchOutcome { best, log })
}

/// Random ensemble search over one top-k checkpoint list per model.
pub fn random_ensemble_search(
    models: &[Vec<Checkpoint>],
    n_draws: usize,
    dev: &ParallelCorpus,
    scorer: &DevScorer,
    opts: &BeamOptions,
    seed: u64,
) -> Result<SearchOutcome> {
    let ids: Vec<Vec<String>> = models.iter().map(|m| m.iter().map(Checkpoint::id).collect()).collect();
    search_with(&ids, n_draws, seed, |sel| {
        let members: Vec<&Checkpoint> = sel.iter().zip(models).map(|(&i, m)| &m[i]).collect();
        Ok(scorer.score(&members, dev, opts)?.bleu)
    })
}

/// Kinds of submission, simplest first; this is also the tie-break order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinalKind {
    Single,
    Average,
    Ensemble,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinalCandidate {
    pub kind: FinalKind,
    pub ids: Vec<String>,
    pub dev_bleu: f64,
}

/// Highest dev BLEU wins; equal scores go to the simpler kind.
pub fn select_final(candidates: &[FinalCandidate]) -> Option<&FinalCandidate> {
    candidates.iter().min_by(|a, b| b.dev_bleu.total_cmp(&a.dev_bleu).then(a.kind.cmp(&b.kind)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::preset_config;
    use proptest::prelude::*;

    fn tiny(seed: u64) -> Checkpoint {
        let mut cfg = preset_config("base", 12).unwrap();
        cfg.embed_dim = 8;
        cfg.ffn_dim = 16;
        cfg.heads = 2;
        cfg.head_dim = 4;
        cfg.enc_layers = 1;
        cfg.dec_layers = 1;
        Checkpoint::init(&cfg, seed).unwrap()
    }

    #[test]
    fn ranking_sorts_and_breaks_ties_by_step() {
        assert_eq!(rank_by_bleu(&[1, 2, 3], &[10.0, 30.0, 20.0], 2).unwrap(), [1, 2]);
        assert_eq!(rank_by_bleu(&[1, 2, 3], &[10.0, 30.0, 20.0], 1).unwrap(), [1]);
        assert_eq!(rank_by_bleu(&[1, 2, 3], &[10.0, 30.0, 20.0], 3).unwrap(), [1, 2, 0]);
        assert_eq!(rank_by_bleu(&[5, 9, 7], &[20.0, 20.0, 20.0], 3).unwrap(), [1, 2, 0]);
        assert!(rank_by_bleu(&[], &[], 1).is_err());
        assert!(rank_by_bleu(&[1], &[1.0], 2).is_err());
    }

    #[test]
    fn averaging_matches_elementwise_mean() {
        let cs: Vec<Checkpoint> = (0..4).map(tiny).collect();
        let refs: Vec<&Checkpoint> = cs.iter().collect();
        let avg = average_checkpoints(&refs).unwrap();
        for (t, tensor) in avg.tensors.iter().enumerate() {
            for (i, &x) in tensor.data.iter().enumerate() {
                let mut s = 0.0f64;
                for c in &cs {
                    s += c.tensors[t].data[i] as f64;
                }
                assert!((x as f64 - s / 4.0).abs() <= 1e-7);
            }
        }
        assert_eq!(avg.dev_bleu, None);
    }

    #[test]
    fn averaging_one_or_copies_is_identity() {
        let mut c = tiny(1);
        c.step = 7;
        assert_eq!(average_checkpoints(&[&c]).unwrap().tensors, c.tensors);
        assert_eq!(average_checkpoints(&[&c, &c, &c]).unwrap().tensors, c.tensors);
    }

    #[test]
    fn averaging_simple_values_and_step() {
        let mut a = tiny(1);
        let mut b = a.clone();
        a.tensors[0].data[0] = 1.0;
        b.tensors[0].data[0] = 3.0;
        a.step = 4;
        b.step = 9;
        let avg = average_checkpoints(&[&a, &b]).unwrap();
        assert_eq!(avg.tensors[0].data[0], 2.0);
        assert_eq!(avg.step, 9);
    }

    #[test]
    fn averaging_rejects_mismatched_shapes() {
        let a = tiny(1);
        let mut b = a.clone();
        b.tensors[3].rows += 1;
        let err = average_checkpoints(&[&a, &b]).unwrap_err().to_string();
        assert!(err.contains(&a.tensors[3].name), "{err}");
        assert!(average_checkpoints(&[]).is_err());
    }

    #[test]
    fn exhaustive_when_draws_cover_space() {
        let mut rng = crate::seed::rng(0);
        let d = draw_selections(&[2, 2, 2], 8, &mut rng).unwrap();
        assert_eq!(d.len(), 8);
        assert_eq!(d.iter().collect::<HashSet<_>>().len(), 8);
        assert_eq!(draw_selections(&[2, 2, 2], 50, &mut rng).unwrap().len(), 8);
        assert_eq!(draw_selections(&[1, 1], 3, &mut rng).unwrap(), vec![vec![0, 0]]);
        assert!(draw_selections(&[2, 0], 3, &mut rng).is_err());
    }

    #[test]
    fn larger_budgets_extend_smaller_ones() {
        let ids: Vec<Vec<String>> = (0..4).map(|m| (0..3).map(|k| format!("{m}:{k}")).collect()).collect();
        let score = |s: &[usize]| Ok(s.iter().enumerate().map(|(i, &k)| ((i * 7 + k * 3) % 5) as f64).sum());
        let mut prev = f64::NEG_INFINITY;
        let mut prev_log: Vec<EnsembleCandidate> = Vec::new();
        for n in 1..30 {
            let out = search_with(&ids, n, 11, score).unwrap();
            assert_eq!(&out.log[..prev_log.len()], &prev_log[..]);
            assert!(out.best.dev_bleu >= prev);
            prev = out.best.dev_bleu;
            prev_log = out.log;
        }
    }

    #[test]
    fn final_selection_prefers_simpler_on_ties() {
        let c = |kind, b| FinalCandidate { kind, ids: vec![], dev_bleu: b };
        let pick = |v: Vec<FinalCandidate>| select_final(&v).unwrap().kind;
        assert_eq!(pick(vec![c(FinalKind::Single, 30.0), c(FinalKind::Ensemble, 29.0)]), FinalKind::Single);
        assert_eq!(pick(vec![c(FinalKind::Ensemble, 30.0), c(FinalKind::Average, 30.0), c(FinalKind::Single, 30.0)]), FinalKind::Single);
        assert_eq!(pick(vec![c(FinalKind::Ensemble, 31.0), c(FinalKind::Single, 30.0)]), FinalKind::Ensemble);
        assert_eq!(pick(vec![c(FinalKind::Average, 1.0)]), FinalKind::Average);
        assert!(select_final(&[]).is_none());
    }

    proptest! {
        #[test]
        fn exhaustive_search_finds_argmax(table in prop::collection::vec(0.0f64..100.0, 8)) {
            let ids: Vec<Vec<String>> = (0..3).map(|m| vec![format!("{m}a"), format!("{m}b")]).collect();
            let out = search_with(&ids, 8, 3, |s| Ok(table[s[0] * 4 + s[1] * 2 + s[2]])).unwrap();
            let best = table.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            prop_assert_eq!(out.best.dev_bleu, best);
            prop_assert_eq!(out.log.len(), 8);
        }

        #[test]
        fn average_is_order_invariant(seeds in prop::collection::vec(0u64..50, 1..4)) {
            let cs: Vec<Checkpoint> = seeds.iter().map(|&s| tiny(s)).collect();
            let fwd: Vec<&Checkpoint> = cs.iter().collect();
            let rev: Vec<&Checkpoint> = cs.iter().rev().collect();
            prop_assert_eq!(average_checkpoints(&fwd).unwrap().tensors, average_checkpoints(&rev).unwrap().tensors);
        }
    }
}
