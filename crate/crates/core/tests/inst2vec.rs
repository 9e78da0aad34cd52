use dexprint_core::inst2vec::{
    context_pairs, embed_fragment, init_table, objective_gradients, train_embeddings,
    EmbeddingTable, Inst2VecConfig, Objective, UnigramSampler,
};
use dexprint_core::seed;
use dexprint_core::Error;
use dexprint_nn::Tensor;
use proptest::prelude::*;
use rand::Rng;

fn config(dim: usize, window: usize, epochs: usize) -> Inst2VecConfig {
    Inst2VecConfig {
        dim,
        window,
        epochs,
        learning_rate: 1e-2,
        batch_size: 64,
        objective: None,
        seed: 4,
    }
}

#[test]
fn adjacent_pair_predicts_its_partner() {
    let seqs: Vec<Vec<u32>> = (0..20)
        .map(|i| if i % 2 == 0 { vec![2, 3] } else { vec![3, 2] })
        .collect();
    let streams: Vec<&[u32]> = seqs.iter().map(|s| s.as_slice()).collect();
    let table = train_embeddings(&streams, 6, &config(8, 1, 200)).unwrap();
    let p = table.context_distribution(2);
    let best = (0..p.len()).max_by(|&a, &b| p[a].total_cmp(&p[b])).unwrap();
    assert_eq!(best, 3);
    let q = table.context_distribution(3);
    assert_eq!(
        (0..q.len()).max_by(|&a, &b| q[a].total_cmp(&q[b])).unwrap(),
        2
    );
}

#[test]
fn no_context_pairs_is_an_error() {
    let seqs = [vec![2u32], vec![3]];
    let streams: Vec<&[u32]> = seqs.iter().map(|s| s.as_slice()).collect();
    assert!(matches!(
        train_embeddings(&streams, 4, &config(4, 2, 1)),
        Err(Error::Degenerate(_))
    ));
    assert!(train_embeddings(&[], 4, &config(4, 2, 1)).is_err());
}

fn toy_corpus(seed_value: u64) -> Vec<Vec<u32>> {
    let mut rng = seed::rng(seed_value);
    (0..60)
        .map(|_| {
            let start = rng.gen_range(2..12u32);
            (0..rng.gen_range(3..12))
                .map(|k| 2 + (start + k * 3) % 10)
                .collect()
        })
        .collect()
}

#[test]
fn context_distributions_sum_to_one() {
    let seqs = toy_corpus(1);
    let streams: Vec<&[u32]> = seqs.iter().map(|s| s.as_slice()).collect();
    let table = train_embeddings(&streams, 12, &config(8, 2, 3)).unwrap();
    for c in 0..12 {
        let s: f64 = table.context_distribution(c).iter().sum();
        assert!((s - 1.0).abs() <= 1e-6);
    }
    assert!(table.vector(0).iter().all(|&v| v == 0.0));
}

fn moving_average(v: &[f64], w: usize) -> Vec<f64> {
    v.windows(w)
        .map(|x| x.iter().sum::<f64>() / w as f64)
        .collect()
}

#[test]
fn loss_decreases_under_both_objectives() {
    let seqs = toy_corpus(2);
    let streams: Vec<&[u32]> = seqs.iter().map(|s| s.as_slice()).collect();
    for objective in [Objective::FullSoftmax, Objective::NegativeSampling { k: 5 }] {
        let mut c = config(8, 2, 12);
        c.learning_rate = 5e-3;
        c.objective = Some(objective);
        let table = train_embeddings(&streams, 12, &c).unwrap();
        assert_eq!(table.epoch_losses.len(), 12);
        let avg = moving_average(&table.epoch_losses, 5);
        assert!(
            avg.windows(2).all(|w| w[1] < w[0]),
            "{objective:?}: {:?}",
            table.epoch_losses
        );
        assert!(table.input.is_finite() && table.output.is_finite());
    }
}

#[test]
fn training_is_reproducible() {
    let seqs = toy_corpus(3);
    let streams: Vec<&[u32]> = seqs.iter().map(|s| s.as_slice()).collect();
    let a = train_embeddings(&streams, 12, &config(8, 2, 2)).unwrap();
    let b = train_embeddings(&streams, 12, &config(8, 2, 2)).unwrap();
    assert_eq!(a, b);
}

#[test]
fn checkpoint_round_trip() {
    let seqs = toy_corpus(4);
    let streams: Vec<&[u32]> = seqs.iter().map(|s| s.as_slice()).collect();
    let a = train_embeddings(&streams, 12, &config(8, 2, 1)).unwrap();
    let mut buf = Vec::new();
    a.to_checkpoint().write_to(&mut buf).unwrap();
    let back =
        EmbeddingTable::from_checkpoint(&dexprint_nn::Checkpoint::read_from(&buf[..]).unwrap())
            .unwrap();
    assert_eq!(a, back);
}

fn table_with(rows: usize, d: usize, seed_value: u64) -> EmbeddingTable {
    let mut rng = seed::rng(seed_value);
    let mut input = Tensor::uniform(&[rows, d], 1.0, &mut rng);
    input.data_mut()[..d].iter_mut().for_each(|v| *v = 0.0);
    EmbeddingTable {
        input,
        output: Tensor::uniform(&[rows, d], 1.0, &mut rng),
        window: 1,
        objective: Objective::FullSoftmax,
        epoch_losses: vec![],
    }
}

#[test]
fn fragment_columns_are_input_rows() {
    let t = table_with(6, 3, 1);
    let z = embed_fragment(&[0, 0, 0], &t).unwrap();
    assert_eq!(z.shape(), &[3, 3]);
    assert!(z.data().iter().all(|&v| v == 0.0));

    let e = embed_fragment(&[4, 0], &t).unwrap();
    for k in 0..3 {
        assert_eq!(e.data()[k * 2], t.vector(4)[k]);
        assert_eq!(e.data()[k * 2 + 1], 0.0);
    }

    let ab = embed_fragment(&[2, 5, 3], &t).unwrap();
    let ba = embed_fragment(&[5, 2, 3], &t).unwrap();
    for k in 0..3 {
        assert_eq!(ab.data()[k * 3], ba.data()[k * 3 + 1]);
        assert_eq!(ab.data()[k * 3 + 1], ba.data()[k * 3]);
        assert_eq!(ab.data()[k * 3 + 2], ba.data()[k * 3 + 2]);
    }
    assert!(embed_fragment(&[6], &t).is_err());
}

/// Fraction of draws whose sampled gradient (both tables) has a positive
/// inner product with the exact softmax gradient.
fn sign_agreement(table: &EmbeddingTable, streams: &[&[u32]], k: usize, draws: usize) -> f64 {
    let pairs: Vec<(u32, u32)> = streams.iter().flat_map(|s| context_pairs(s, 2)).collect();
    let sampler = UnigramSampler::new(streams, table.rows());
    let mut rng = seed::rng(99);
    let (fi, fo) =
        objective_gradients(table, &pairs, Objective::FullSoftmax, &sampler, &mut rng).unwrap();
    let mut agree = 0;
    for _ in 0..draws {
        let (ni, no) = objective_gradients(
            table,
            &pairs,
            Objective::NegativeSampling { k },
            &sampler,
            &mut rng,
        )
        .unwrap();
        let dot: f64 = fi
            .data()
            .iter()
            .zip(ni.data())
            .chain(fo.data().iter().zip(no.data()))
            .map(|(&a, &b)| a as f64 * b as f64)
            .sum();
        agree += usize::from(dot > 0.0);
    }
    agree as f64 / draws as f64
}

#[test]
fn negative_sampling_points_along_the_softmax_gradient() {
    // five-token toy corpus, ids 2..=6; one negative per pair balances
    // attraction and repulsion the way the softmax does
    let seqs: Vec<Vec<u32>> = vec![vec![2, 3, 4, 5, 6], vec![6, 5, 2, 3], vec![4, 2, 6, 3, 5]];
    let streams: Vec<&[u32]> = seqs.iter().map(|s| s.as_slice()).collect();
    for epochs in [0, 1, 3] {
        let cfg = Inst2VecConfig {
            dim: 8,
            window: 2,
            epochs,
            learning_rate: 1e-2,
            batch_size: 8,
            objective: Some(Objective::FullSoftmax),
            seed: 1,
        };
        let table = if epochs == 0 {
            init_table(7, &cfg, Objective::FullSoftmax)
        } else {
            train_embeddings(&streams, 7, &cfg).unwrap()
        };
        let rate = sign_agreement(&table, &streams, 1, 400);
        assert!(rate >= 0.95, "after {epochs} epochs: {rate}");
    }
}

fn brute_pairs(seq: &[u32], m: usize) -> Vec<(u32, u32)> {
    let mut out = Vec::new();
    for i in 0..seq.len() {
        for j in 0..seq.len() {
            let d = i.abs_diff(j);
            if d > 0 && d <= m {
                out.push((seq[i], seq[j]));
            }
        }
    }
    out
}

proptest! {
    #[test]
    fn context_pairs_match_enumeration(seq in proptest::collection::vec(2u32..9, 0..=10), m in 1usize..6) {
        let got = context_pairs(&seq, m);
        let expected_len: usize = (0..seq.len())
            .map(|i| (0..seq.len()).filter(|&j| j != i && i.abs_diff(j) <= m).count())
            .sum();
        prop_assert_eq!(got.len(), expected_len);
        prop_assert_eq!(got, brute_pairs(&seq, m));
    }
}
