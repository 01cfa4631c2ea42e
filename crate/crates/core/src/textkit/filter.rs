use crate::corpus::ParallelCorpus;
use std::collections::HashSet;

/// Rule-based pair cleaning: both sides at most `max_len` tokens, length ratio
/// (longer / shorter) at most `max_ratio`, and optionally only the first copy
/// of each exact pair. Survivors keep their order.
pub fn filter_pairs(corpus: &ParallelCorpus, max_len: usize, max_ratio: f64, dedup: bool) -> ParallelCorpus {
    let mut seen = HashSet::new();
    let keep: Vec<usize> = corpus
        .pairs()
        .iter()
        .enumerate()
        .filter(|(_, (s, t))| {
            let (a, b) = (s.len(), t.len());
            a <= max_len && b <= max_len && (a.max(b) as f64) <= max_ratio * a.min(b) as f64
        })
        .filter(|(_, p)| !dedup || seen.insert(*p))
        .map(|(i, _)| i)
        .collect();
    corpus.select(&keep)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Direction;

    fn corpus(pairs: Vec<(Vec<u32>, Vec<u32>)>) -> ParallelCorpus {
        ParallelCorpus::natural(Direction::new("a", "b"), pairs).unwrap()
    }

    #[test]
    fn unbounded_filter_is_identity() {
        let c = corpus(vec![(vec![1; 10], vec![2]), (vec![1], vec![2]), (vec![1], vec![2])]);
        assert_eq!(filter_pairs(&c, usize::MAX, f64::INFINITY, false), c);
    }

    #[test]
    fn ratio_and_length_limits() {
        let c = corpus(vec![(vec![1; 10], vec![2]), (vec![1; 3], vec![2]), (vec![1; 6], vec![2; 6])]);
        let out = filter_pairs(&c, 5, 3.0, false);
        assert_eq!(out.pairs(), &c.pairs()[1..2]);
    }

    #[test]
    fn dedup_keeps_first() {
        let c = corpus(vec![(vec![1], vec![2]), (vec![3], vec![4]), (vec![1], vec![2])]);
        let out = filter_pairs(&c, usize::MAX, f64::INFINITY, true);
        assert_eq!(out.pairs(), &c.pairs()[..2]);
    }
}
