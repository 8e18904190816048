//! Property tests for the schedule closed forms, batching, and the
//! container round trips.

use proptest::prelude::*;

use dfbf_core::data::batch_indices;
use dfbf_core::distill::mu_schedule;

proptest! {
    #[test]
    fn mu_schedule_matches_closed_form(n in 1usize..12, gamma in 0.0f64..10.0) {
        let s = mu_schedule(n, gamma).unwrap();
        prop_assert_eq!(s.mu.len(), n);
        for (i, &mu) in s.mu.iter().enumerate() {
            let expect = (i + 1) as f64 / (n + 1) as f64 * gamma + 1.0;
            prop_assert_eq!(mu.to_bits(), expect.to_bits());
        }
        prop_assert_eq!(s.mu_out.to_bits(), (gamma + 1.0).to_bits());
        if gamma > 0.0 {
            for w in s.mu.windows(2) {
                prop_assert!(w[0] < w[1]);
            }
            prop_assert!(*s.mu.last().unwrap() < s.mu_out);
        }
    }

    #[test]
    fn batches_partition_without_duplicates(len in 1usize..200, batch in 1usize..40, seed in proptest::option::of(0u64..1000)) {
        let batches = batch_indices(len, batch, seed);
        let mut all: Vec<usize> = batches.iter().flatten().copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..len).collect::<Vec<_>>());
        for b in &batches[..batches.len() - 1] {
            prop_assert_eq!(b.len(), batch.min(len));
        }
    }

    #[test]
    fn selection_matches_stable_sort_oracle(scores in proptest::collection::vec(-100.0f64..100.0, 1..40), keep_frac in 0.0f64..1.0) {
        let keep = ((scores.len() as f64 * keep_frac) as usize).clamp(1, scores.len());
        let kept = dfbf_core::prune::select_kept(&scores, keep).unwrap();
        let mut order: Vec<usize> = (0..scores.len()).collect();
        order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
        let mut expect = order[..keep].to_vec();
        expect.sort_unstable();
        prop_assert_eq!(kept, expect);
    }
}
