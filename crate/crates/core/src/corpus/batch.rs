use super::ParallelCorpus;
use crate::error::{Error, Result};

/// Sentences grouped for one forward/backward pass.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    /// Indices into the corpus, shortest first.
    pub indices: Vec<usize>,
    /// Padded length of every row.
    pub width: usize,
}

impl Batch {
    pub fn padded_tokens(&self) -> usize {
        self.indices.len() * self.width
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BatchPlan {
    pub batches: Vec<Batch>,
    pub max_tokens: usize,
    /// Batches consumed per optimizer step.
    pub accumulation: usize,
}

impl BatchPlan {
    /// Token budget of one optimizer step.
    pub fn effective_tokens(&self) -> usize {
        self.max_tokens * self.accumulation
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.batches.len().div_ceil(self.accumulation)
    }
}

/// Length used for batching a pair: the longer side plus its end-of-sentence token.
pub fn pair_lengths(corpus: &ParallelCorpus) -> Vec<usize> {
    corpus.pairs().iter().map(|(s, t)| s.len().max(t.len()) + 1).collect()
}

/// Buckets sequences by length so that each batch's padded size stays within
/// `max_tokens`.
pub fn build_batches(lengths: &[usize], max_tokens: usize, accumulation: usize) -> Result<BatchPlan> {
    if accumulation == 0 {
        return Err(Error::invalid("accumulation must be at least 1"));
    }
    if let Some((line, &len)) = lengths.iter().enumerate().find(|(_, &l)| l > max_tokens) {
        return Err(Error::SentenceTooLong { line, len, max: max_tokens });
    }
    let mut order: Vec<usize> = (0..lengths.len()).collect();
    order.sort_by_key(|&i| (lengths[i], i));
    let mut batches = Vec::new();
    let mut current = Batch { indices: Vec::new(), width: 0 };
    for i in order {
        let len = lengths[i];
        let width = current.width.max(len);
        if !current.indices.is_empty() && (current.indices.len() + 1) * width > max_tokens {
            batches.push(std::mem::replace(&mut current, Batch { indices: Vec::new(), width: 0 }));
        }
        current.width = current.width.max(len);
        current.indices.push(i);
    }
    if !current.indices.is_empty() {
        batches.push(current);
    }
    Ok(BatchPlan { batches, max_tokens, accumulation })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;
    use rand::Rng;

    #[test]
    fn equal_lengths_fill_exactly() {
        let plan = build_batches(&[7; 100], 64, 1).unwrap();
        for b in &plan.batches[..plan.batches.len() - 1] {
            assert_eq!(b.indices.len(), 64 / 7);
            assert_eq!(b.padded_tokens(), 9 * 7);
        }
        let total: usize = plan.batches.iter().map(|b| b.indices.len()).sum();
        assert_eq!(total, 100);
    }

    #[test]
    fn effective_batch_arithmetic() {
        let plan = build_batches(&[10, 20], 8192, 64).unwrap();
        assert_eq!(plan.effective_tokens(), 8192 * 8 * 8);
        assert_eq!(plan.effective_tokens(), 524_288);
    }

    #[test]
    fn too_long_sentence_names_line() {
        match build_batches(&[3, 9, 4], 8, 1) {
            Err(Error::SentenceTooLong { line, len, max }) => assert_eq!((line, len, max), (1, 9, 8)),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn conservation_and_low_padding_on_mixed_lengths() {
        let mut rng = seed::rng(11);
        let lengths: Vec<usize> = (0..2000).map(|_| rng.gen_range(3..40)).collect();
        let plan = build_batches(&lengths, 512, 4).unwrap();
        let mut seen: Vec<usize> = plan.batches.iter().flat_map(|b| b.indices.clone()).collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..2000).collect::<Vec<_>>());
        for b in &plan.batches {
            assert!(b.padded_tokens() <= 512);
            let real: usize = b.indices.iter().map(|&i| lengths[i]).sum();
            let waste = (b.padded_tokens() - real) as f64 / b.padded_tokens() as f64;
            assert!(waste < 0.5, "padding overhead {waste}");
        }
        assert_eq!(plan.steps_per_epoch(), plan.batches.len().div_ceil(4));
    }
}
