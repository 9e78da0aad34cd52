use std::collections::HashMap;

use dexprint_core::asmparse::{AppRepresentation, MethodSequence};
use dexprint_core::fragment::{fragment_batch, make_fragment, permutation_count};
use dexprint_core::seed;
use num_bigint::BigUint;
use proptest::prelude::*;

fn app(seqs: &[&[u32]]) -> AppRepresentation {
    AppRepresentation {
        sequences: seqs
            .iter()
            .map(|s| MethodSequence { tokens: s.to_vec() })
            .collect(),
    }
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for pos in 0..=p.len() {
            let mut q = p.clone();
            q.insert(pos, n - 1);
            out.push(q);
        }
    }
    out
}

#[test]
fn three_sequence_example_yields_a_truncated_permutation() {
    let (a, b, c, d, e) = (2, 3, 4, 5, 6);
    let p = app(&[&[a, b], &[c], &[d, e]]);
    let allowed: Vec<Vec<u32>> = permutations(3)
        .into_iter()
        .map(|perm| {
            let mut t: Vec<u32> = perm
                .iter()
                .flat_map(|&i| p.sequences[i].tokens.clone())
                .collect();
            t.truncate(4);
            t
        })
        .collect();
    assert!(allowed.contains(&vec![d, e, a, b]));
    let mut rng = seed::rng(3);
    for _ in 0..200 {
        let f = make_fragment(&p, 4, &mut rng).unwrap();
        assert!(allowed.contains(&f.tokens), "{:?}", f.tokens);
        assert_eq!(f.tokens.len(), 4);
    }
}

#[test]
fn short_app_is_padded() {
    let f = make_fragment(&app(&[&[7]]), 4, &mut seed::rng(1)).unwrap();
    assert_eq!(f.tokens, vec![7, 0, 0, 0]);
    assert_eq!(f.pad_count, 3);
    assert!(!f.degenerate);
}

#[test]
fn empty_app_is_flagged() {
    let f = make_fragment(&app(&[]), 5, &mut seed::rng(1)).unwrap();
    assert_eq!(f.tokens, vec![0; 5]);
    assert_eq!(f.pad_count, 5);
    assert!(f.degenerate);
    assert!(make_fragment(&app(&[&[2]]), 0, &mut seed::rng(1)).is_err());
}

#[test]
fn first_slot_is_uniform_within_three_sigma() {
    let p = app(&[&[2, 3], &[4], &[5, 6]]);
    let mut rng = seed::rng(11);
    let draws = 10_000;
    let mut counts = [[0usize; 3]; 3];
    for _ in 0..draws {
        let f = make_fragment(&p, 5, &mut rng).unwrap();
        for (slot, &s) in f.order().iter().enumerate() {
            counts[slot][s] += 1;
        }
    }
    let sigma = (draws as f64 * (1.0 / 3.0) * (2.0 / 3.0)).sqrt();
    for slot in counts {
        for c in slot {
            assert!(
                (c as f64 - draws as f64 / 3.0).abs() <= 3.0 * sigma,
                "{counts:?}"
            );
        }
    }
}

#[test]
fn permutation_law_passes_chi_square() {
    let p = app(&[&[2, 3], &[4], &[5, 6]]);
    let mut rng = seed::rng(5);
    let draws = 12_000;
    let mut counts: HashMap<Vec<usize>, usize> = HashMap::new();
    for _ in 0..draws {
        *counts
            .entry(make_fragment(&p, 8, &mut rng).unwrap().order())
            .or_insert(0) += 1;
    }
    assert_eq!(counts.len(), 6);
    let expected = draws as f64 / 6.0;
    let chi2: f64 = counts
        .values()
        .map(|&c| (c as f64 - expected).powi(2) / expected)
        .sum();
    // 99th percentile of chi-square with 5 degrees of freedom
    assert!(chi2 < 15.086, "chi2 = {chi2}");
}

#[test]
fn partial_selection_covers_ordered_pairs_uniformly() {
    // five single-token sequences, fragment of 2: support is 5!/3! = 20 ordered pairs
    let p = app(&[&[2], &[3], &[4], &[5], &[6]]);
    let support = permutation_count(5, 2).unwrap();
    assert_eq!(support, BigUint::from(20u32));
    let mut rng = seed::rng(9);
    let draws = 20_000;
    let mut counts: HashMap<Vec<u32>, usize> = HashMap::new();
    for _ in 0..draws {
        *counts
            .entry(make_fragment(&p, 2, &mut rng).unwrap().tokens)
            .or_insert(0) += 1;
    }
    assert_eq!(counts.len(), 20);
    let expected = draws as f64 / 20.0;
    let chi2: f64 = counts
        .values()
        .map(|&c| (c as f64 - expected).powi(2) / expected)
        .sum();
    // 99th percentile of chi-square with 19 degrees of freedom
    assert!(chi2 < 36.191, "chi2 = {chi2}");
}

#[test]
fn permutation_counts() {
    assert_eq!(permutation_count(3, 3).unwrap(), BigUint::from(6u32));
    assert_eq!(permutation_count(5, 2).unwrap(), BigUint::from(20u32));
    assert_eq!(permutation_count(10, 0).unwrap(), BigUint::from(1u32));
    assert!(permutation_count(2, 3).is_err());
    let big = permutation_count(100, 50).unwrap();
    let oracle: BigUint = (51u32..=100).map(BigUint::from).product();
    assert_eq!(big, oracle);
}

#[test]
fn batches_are_sized_and_reproducible() {
    let a = app(&[&[2, 3], &[4]]);
    let b = app(&[&[5], &[6], &[7]]);
    let batch = fragment_batch(&[&a, &b], 3, 3, 42).unwrap();
    assert_eq!(batch.len(), 6);
    assert_eq!(batch.iter().filter(|(i, _)| *i == 0).count(), 3);
    assert_eq!(batch, fragment_batch(&[&a, &b], 3, 3, 42).unwrap());
    assert!(fragment_batch(&[&a], 3, 0, 42).is_err());
}

#[test]
fn repeat_draws_collide_at_the_inverse_permutation_count() {
    let p = app(&[&[2], &[3], &[4], &[5]]);
    let mut rng = seed::rng(21);
    let trials = 24_000;
    let mut same = 0;
    for _ in 0..trials {
        let x = make_fragment(&p, 4, &mut rng).unwrap();
        let y = make_fragment(&p, 4, &mut rng).unwrap();
        same += usize::from(x == y);
    }
    let q = 1.0 / 24.0;
    let sigma = (trials as f64 * q * (1.0 - q)).sqrt();
    assert!(
        (same as f64 - trials as f64 * q).abs() <= 3.0 * sigma,
        "{same}"
    );
}

fn app_strategy() -> impl Strategy<Value = AppRepresentation> {
    proptest::collection::vec(proptest::collection::vec(2u32..40, 1..8), 0..8).prop_map(|seqs| {
        let refs: Vec<&[u32]> = seqs.iter().map(|s| s.as_slice()).collect();
        app(&refs)
    })
}

proptest! {
    #[test]
    fn fragments_keep_method_runs_intact(p in app_strategy(), len in 1usize..40, s in any::<u64>()) {
        let f = make_fragment(&p, len, &mut seed::rng(s)).unwrap();
        prop_assert_eq!(f.tokens.len(), len);
        prop_assert_eq!(f.tokens[len - f.pad_count..].iter().filter(|&&t| t != 0).count(), 0);
        let mut pos = 0;
        for (i, seg) in f.segments.iter().enumerate() {
            prop_assert_eq!(seg.start, pos);
            let src = &p.sequences[seg.sequence].tokens;
            prop_assert_eq!(&f.tokens[seg.start..seg.start + seg.len], &src[..seg.len]);
            if seg.truncated {
                prop_assert_eq!(i, f.segments.len() - 1);
            } else {
                prop_assert_eq!(seg.len, src.len());
            }
            pos += seg.len;
        }
        prop_assert_eq!(pos + f.pad_count, len);
        if p.total_tokens() > 0 {
            prop_assert!(f.pad_count < len);
        }
    }

    #[test]
    fn short_apps_keep_every_token(p in app_strategy(), s in any::<u64>()) {
        let len = p.total_tokens() + 3;
        let f = make_fragment(&p, len, &mut seed::rng(s)).unwrap();
        let mut got: Vec<u32> = f.tokens.iter().copied().filter(|&t| t != 0).collect();
        got.sort_unstable();
        prop_assert_eq!(got, p.token_multiset());
        let mut order = f.order();
        order.sort_unstable();
        prop_assert_eq!(order, (0..p.sequences.len()).collect::<Vec<_>>());
    }
}
