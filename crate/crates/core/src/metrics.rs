//! Edit-distance based error accounting.

use crate::error::{Error, Result};

/// Substitution/insertion/deletion decomposition of one alignment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ErrorCounts {
    pub substitutions: usize,
    pub insertions: usize,
    pub deletions: usize,
}

impl ErrorCounts {
    pub fn total(&self) -> usize {
        self.substitutions + self.insertions + self.deletions
    }

    pub fn add(&mut self, other: &ErrorCounts) {
        self.substitutions += other.substitutions;
        self.insertions += other.insertions;
        self.deletions += other.deletions;
    }
}

/// Levenshtein alignment of `hyp` against `reference` with unit costs.
///
/// Insertions are hypothesis tokens with no reference counterpart; deletions
/// are reference tokens the hypothesis missed. Cost ties are broken by
/// preferring substitution, then insertion, then deletion, which makes the
/// decomposition deterministic.
pub fn edit_distance<T: PartialEq>(reference: &[T], hyp: &[T]) -> ErrorCounts {
    let (rl, hl) = (reference.len(), hyp.len());
    // dp[j] holds the counts for the current reference prefix vs hyp prefix j.
    let mut prev: Vec<ErrorCounts> = (0..=hl)
        .map(|j| ErrorCounts { insertions: j, ..Default::default() })
        .collect();
    let mut cur = vec![ErrorCounts::default(); hl + 1];
    for i in 1..=rl {
        cur[0] = ErrorCounts { deletions: i, ..Default::default() };
        for j in 1..=hl {
            let matched = reference[i - 1] == hyp[j - 1];
            let mut diag = prev[j - 1];
            if !matched {
                diag.substitutions += 1;
            }
            let mut ins = cur[j - 1];
            ins.insertions += 1;
            let mut del = prev[j];
            del.deletions += 1;
            // On equal totals prefer the substitution-heavy path. At a fixed
            // cell I - D = j - i, so (total, substitutions) pins the whole
            // decomposition, and the rule is symmetric under swapping the
            // sequences.
            let mut best = diag;
            for cand in [ins, del] {
                if cand.total() < best.total()
                    || (cand.total() == best.total()
                        && cand.substitutions > best.substitutions)
                {
                    best = cand;
                }
            }
            cur[j] = best;
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[hl]
}

/// Corpus error rate: summed edit operations over summed reference length.
///
/// Pairs are aligned by position; mismatched list lengths or an empty total
/// reference are errors rather than silent zeros.
pub fn corpus_error_rate<T: PartialEq>(
    references: &[Vec<T>],
    hyps: &[Vec<T>],
) -> Result<(f64, ErrorCounts)> {
    if references.len() != hyps.len() {
        return Err(Error::Argument(format!(
            "{} references vs {} hypotheses",
            references.len(),
            hyps.len()
        )));
    }
    if references.is_empty() {
        return Err(Error::Argument("empty corpus".into()));
    }
    let mut counts = ErrorCounts::default();
    let mut ref_len = 0usize;
    for (r, h) in references.iter().zip(hyps) {
        counts.add(&edit_distance(r, h));
        ref_len += r.len();
    }
    if ref_len == 0 {
        return Err(Error::Argument("total reference length is zero".into()));
    }
    Ok((counts.total() as f64 / ref_len as f64, counts))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn toks(s: &str) -> Vec<char> {
        s.chars().collect()
    }

    #[test]
    fn identical_sequences_have_zero_errors() {
        let c = edit_distance(&toks("abc"), &toks("abc"));
        assert_eq!(c.total(), 0);
    }

    #[test]
    fn classic_kitten_sitting() {
        // kitten -> sitting: 2 substitutions + 1 insertion.
        let c = edit_distance(&toks("kitten"), &toks("sitting"));
        assert_eq!(c.total(), 3);
        assert_eq!(c.substitutions, 2);
        assert_eq!(c.insertions, 1);
        assert_eq!(c.deletions, 0);
    }

    #[test]
    fn empty_reference_counts_insertions() {
        let c = edit_distance(&toks(""), &toks("ab"));
        assert_eq!(c.insertions, 2);
        assert_eq!(c.total(), 2);
    }

    #[test]
    fn empty_hypothesis_counts_deletions() {
        let c = edit_distance(&toks("ab"), &toks(""));
        assert_eq!(c.deletions, 2);
        assert_eq!(c.total(), 2);
    }

    #[test]
    fn corpus_rate_pools_counts() {
        let refs = vec![toks("ab"), toks("cd")];
        let hyps = vec![toks("ab"), toks("ce")];
        let (rate, counts) = corpus_error_rate(&refs, &hyps).unwrap();
        assert_eq!(counts.total(), 1);
        assert!((rate - 0.25).abs() < 1e-15);
    }

    #[test]
    fn corpus_rate_rejects_mismatched_lengths_and_empty() {
        assert!(corpus_error_rate(&[toks("a")], &[]).is_err());
        let none: [Vec<char>; 0] = [];
        assert!(corpus_error_rate(&none, &none).is_err());
        assert!(corpus_error_rate(&[toks("")], &[toks("")]).is_err());
    }

    proptest! {
        /// Swapping arguments swaps insertions and deletions and preserves
        /// the total.
        #[test]
        fn swap_symmetry(
            a in proptest::collection::vec(0u8..4, 0..12),
            b in proptest::collection::vec(0u8..4, 0..12),
        ) {
            let ab = edit_distance(&a, &b);
            let ba = edit_distance(&b, &a);
            prop_assert_eq!(ab.total(), ba.total());
            prop_assert_eq!(ab.insertions, ba.deletions);
            prop_assert_eq!(ab.deletions, ba.insertions);
        }

        /// Distance never exceeds the longer sequence.
        #[test]
        fn bounded_by_longer_side(
            a in proptest::collection::vec(0u8..4, 0..12),
            b in proptest::collection::vec(0u8..4, 0..12),
        ) {
            let d = edit_distance(&a, &b).total();
            prop_assert!(d <= a.len().max(b.len()));
        }
    }

    #[test]
    fn triangle_inequality_on_random_triples() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(99);
        for _ in 0..500 {
            let mut sample = || {
                let n = rng.gen_range(0..10);
                (0..n).map(|_| rng.gen_range(0u8..4)).collect::<Vec<_>>()
            };
            let (a, b, c) = (sample(), sample(), sample());
            let ab = edit_distance(&a, &b).total();
            let bc = edit_distance(&b, &c).total();
            let ac = edit_distance(&a, &c).total();
            assert!(ac <= ab + bc, "triangle violated: {ac} > {ab} + {bc}");
        }
    }
}
