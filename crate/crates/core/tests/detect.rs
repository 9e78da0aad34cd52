use dexprint_core::asmparse::{AppRepresentation, MethodSequence};
use dexprint_core::detect::*;
use dexprint_core::seed;
use dexprint_core::Error;
use dexprint_nn::Tensor;
use proptest::prelude::{
    any, prop_assert, prop_assert_eq, prop_assume, proptest, BoxedStrategy, Strategy as _,
};
use rand::Rng;

fn app(seqs: Vec<Vec<u32>>) -> AppRepresentation {
    AppRepresentation {
        sequences: seqs
            .into_iter()
            .map(|tokens| MethodSequence { tokens })
            .collect(),
    }
}

fn table(rows: usize, d: usize, s: u64) -> Tensor<f32> {
    let mut t = Tensor::uniform(&[rows, d], 0.5, &mut seed::rng(s));
    t.data_mut()[..d].iter_mut().for_each(|v| *v = 0.0);
    t
}

/// Malware uses tokens 2..12, benign 12..22, both share 22..30.
fn separable_set(n: usize, s: u64) -> (Vec<AppRepresentation>, Vec<bool>) {
    let mut rng = seed::rng(s);
    let mut apps = Vec::new();
    let mut labels = Vec::new();
    for i in 0..n {
        let mal = i % 2 == 0;
        let base = if mal { 2 } else { 12 };
        let seqs = (0..rng.gen_range(3..7))
            .map(|_| {
                (0..rng.gen_range(3..9))
                    .map(|_| {
                        if rng.gen_bool(0.5) {
                            base + rng.gen_range(0..10)
                        } else {
                            22 + rng.gen_range(0..8)
                        }
                    })
                    .collect()
            })
            .collect();
        apps.push(app(seqs));
        labels.push(mal);
    }
    (apps, labels)
}

fn small_config(epochs: usize) -> TrainConfig {
    TrainConfig {
        fragment_len: 24,
        epochs,
        filters: 16,
        hidden: [32, 16],
        valid_fragments: 2,
        learning_rate: 3e-3,
        seed: 5,
        ..TrainConfig::default()
    }
}

#[test]
fn fast_path_matches_tape_eval() {
    let mut rng = seed::rng(2);
    for shape in [
        CnnShape::standard(8),
        CnnShape {
            embed_dim: 3,
            filters: 5,
            kernel: 2,
            hidden: [7, 4],
        },
    ] {
        let mut w = CnnWeights::<f32>::init(shape, &mut rng);
        w.running_mean = (0..shape.filters)
            .map(|_| rng.gen_range(-0.2..0.5))
            .collect();
        w.running_var = (0..shape.filters)
            .map(|_| rng.gen_range(0.1..2.0))
            .collect();
        // a negative scale exercises the min branch of pooling
        w.params.get_mut(2).data_mut()[0] = -0.7;
        let t = table(20, shape.embed_dim, 3);
        let frags: Vec<Vec<u32>> = (0..6)
            .map(|_| {
                (0..30)
                    .map(|_| {
                        if rng.gen_bool(0.2) {
                            0
                        } else {
                            rng.gen_range(2..20)
                        }
                    })
                    .collect()
            })
            .collect();
        let refs: Vec<&[u32]> = frags.iter().map(|f| f.as_slice()).collect();
        let slow = w.predict_graph(&t, &refs).unwrap();
        let fast = InferenceCnn::new(&w, &t).unwrap().predict(&refs).unwrap();
        for (a, b) in slow.iter().zip(&fast) {
            assert!((a - b).abs() < 1e-5, "{a} vs {b}");
            assert!(*b > 0.0 && *b < 1.0);
        }
    }
}

#[test]
fn whole_network_passes_finite_differences() {
    let mut rng = seed::rng(17);
    for _ in 0..20 {
        let r = gradient_check(&mut rng).unwrap();
        assert!(r.passes(1e-4), "{r:?}");
    }
}

#[test]
fn minibatches_never_leave_a_single_sample() {
    let order: Vec<usize> = (0..65).collect();
    let b = minibatches(&order, 32);
    assert_eq!(b.iter().map(|x| x.len()).collect::<Vec<_>>(), vec![32, 33]);
    let order: Vec<usize> = (0..64).collect();
    assert_eq!(minibatches(&order, 32).len(), 2);
    let order: Vec<usize> = (0..5).collect();
    assert_eq!(minibatches(&order, 32).len(), 1);
}

#[test]
fn training_separates_a_separable_set() {
    let (apps, labels) = separable_set(200, 1);
    let refs: Vec<&AppRepresentation> = apps.iter().collect();
    let (tr, va) = (160, 40);
    let t = table(30, 8, 1);
    let snaps = train_single(
        &refs[..tr],
        &labels[..tr],
        &refs[tr..tr + va],
        &labels[tr..],
        &t,
        &small_config(20),
        0,
    )
    .unwrap();
    assert_eq!(snaps.len(), 20);
    let last = snaps.last().unwrap().clone();
    let ens = Ensemble::new(vec![last], &t, 24, 6).unwrap();
    let scores: Vec<f64> = refs[tr..]
        .iter()
        .enumerate()
        .map(|(i, a)| ens.score(a, i as u64).unwrap().y_hat)
        .collect();
    let m = metrics(
        scores
            .iter()
            .zip(&labels[tr..])
            .map(|(&s, &y)| (general_verdict(s, 0.5), y)),
    );
    assert!(m.f1 >= 0.99, "{m:?}");
}

#[test]
fn one_epoch_one_snapshot_and_reproducible_losses() {
    let (apps, labels) = separable_set(40, 2);
    let refs: Vec<&AppRepresentation> = apps.iter().collect();
    let t = table(30, 4, 2);
    let one = train_single(
        &refs[..30],
        &labels[..30],
        &refs[30..],
        &labels[30..],
        &t,
        &small_config(1),
        0,
    )
    .unwrap();
    assert_eq!(one.len(), 1);
    let run = || {
        train_single(
            &refs[..30],
            &labels[..30],
            &refs[30..],
            &labels[30..],
            &t,
            &small_config(3),
            0,
        )
        .unwrap()
        .iter()
        .map(|s| s.loss_v)
        .collect::<Vec<_>>()
    };
    assert_eq!(run(), run());
}

#[test]
fn fine_tuning_moves_embeddings_but_not_pad() {
    let (apps, labels) = separable_set(40, 3);
    let refs: Vec<&AppRepresentation> = apps.iter().collect();
    let t = table(30, 4, 3);
    let mut cfg = small_config(2);
    cfg.fine_tune_embeddings = true;
    let snaps = train_single(
        &refs[..30],
        &labels[..30],
        &refs[30..],
        &labels[30..],
        &t,
        &cfg,
        0,
    )
    .unwrap();
    let e = snaps[1].embedding.as_ref().unwrap();
    assert_ne!(e, &t);
    assert!(e.data()[..4].iter().all(|&v| v == 0.0));
    let frozen = train_single(
        &refs[..30],
        &labels[..30],
        &refs[30..],
        &labels[30..],
        &t,
        &small_config(2),
        0,
    )
    .unwrap();
    assert!(frozen[1].embedding.is_none());
}

#[test]
fn single_class_training_is_rejected() {
    let (apps, _) = separable_set(10, 4);
    let refs: Vec<&AppRepresentation> = apps.iter().collect();
    let y = vec![true; 10];
    let t = table(30, 4, 4);
    assert!(matches!(
        train_single(
            &refs[..8],
            &y[..8],
            &refs[8..],
            &y[8..],
            &t,
            &small_config(1),
            0
        ),
        Err(Error::Degenerate(_))
    ));
}

fn fake_snapshot(loss_v: f64, loss_t: f64, epoch: usize) -> Snapshot {
    let shape = CnnShape {
        embed_dim: 2,
        filters: 2,
        kernel: 2,
        hidden: [2, 2],
    };
    Snapshot {
        run: 0,
        epoch,
        loss_t,
        loss_v,
        weights: CnnWeights::init(shape, &mut seed::rng(epoch as u64)),
        embedding: None,
    }
}

#[test]
fn ranking_prefers_validation_then_training_loss() {
    let snaps = vec![
        fake_snapshot(0.5, 0.2, 0),
        fake_snapshot(0.4, 0.2, 1),
        fake_snapshot(0.4, 0.1, 2),
    ];
    let top = select_ensemble(snaps.clone(), 2).unwrap();
    assert_eq!((top[0].loss_v, top[0].loss_t), (0.4, 0.1));
    assert_eq!((top[1].loss_v, top[1].loss_t), (0.4, 0.2));
    assert_eq!(select_ensemble(snaps.clone(), 1).unwrap()[0].epoch, 2);
    assert_eq!(select_ensemble(snaps.clone(), 3).unwrap().len(), 3);
    assert!(select_ensemble(snaps, 4).is_err());
}

#[test]
fn ensemble_score_is_the_mean_of_member_means() {
    let t = table(12, 2, 9);
    let members: Vec<Snapshot> = (0..3).map(|i| fake_snapshot(0.1, 0.1, i)).collect();
    let ens = Ensemble::new(members.clone(), &t, 10, 4).unwrap();
    let a = app(vec![vec![2, 3, 4], vec![5, 6, 7, 8], vec![9, 10, 11]]);
    let s = ens.score(&a, 77).unwrap();
    let direct: f64 = s.fragment_scores.iter().flatten().sum::<f64>() / 12.0;
    assert!((s.y_hat - direct).abs() <= 1e-6);
    assert!(s.y_hat > 0.0 && s.y_hat < 1.0);

    let single = Ensemble::new(members[..1].to_vec(), &t, 10, 1).unwrap();
    let one = single.score(&a, 3).unwrap();
    assert_eq!(one.y_hat, one.fragment_scores[0][0]);

    assert!(matches!(
        ens.score(&app(vec![]), 1),
        Err(Error::Degenerate(_))
    ));
}

#[test]
fn ensemble_checkpoints_round_trip() {
    let t = table(12, 2, 9);
    let members: Vec<Snapshot> = (0..2).map(|i| fake_snapshot(0.3, 0.2, i)).collect();
    let ens = Ensemble::new(members, &t, 10, 4).unwrap();
    let dir = tempfile::tempdir().unwrap();
    ens.save(dir.path()).unwrap();
    let back = Ensemble::load(dir.path(), 2, &t).unwrap();
    assert_eq!(back.members, ens.members);
    let a = app(vec![vec![2, 3, 4, 5]]);
    assert_eq!(back.score(&a, 1).unwrap(), ens.score(&a, 1).unwrap());
    assert!(matches!(
        Ensemble::load(dir.path(), 3, &t),
        Err(Error::MissingInput(_))
    ));
}

#[test]
fn general_threshold_examples() {
    let z = fit_general_threshold(&[0.9, 0.8, 0.1, 0.2], &[true, true, false, false]).unwrap();
    assert_eq!(z, 0.5);
    assert_eq!(
        fit_general_threshold(&[0.4, 0.6], &[false, true]).unwrap(),
        0.5
    );
    assert!(matches!(
        fit_general_threshold(&[0.4, 0.6], &[false, false]),
        Err(Error::Degenerate(_))
    ));
}

#[test]
fn confidence_threshold_examples() {
    let scores = [0.99, 0.02, 0.97, 0.01];
    let labels = [true, false, true, false];
    let fit = fit_confidence_threshold(&scores, &labels, 0.01).unwrap();
    assert!(fit.qualified);
    assert_eq!((fit.eta, fit.coverage), (0.5, 1.0));

    // 25 malware at .99, 24 benign at .01, one benign at .95
    let mut s = vec![0.99; 25];
    let mut y = vec![true; 25];
    s.extend(vec![0.01; 24]);
    y.extend(vec![false; 24]);
    s.push(0.95);
    y.push(false);
    for eta in eta_grid().filter(|&e| e <= 0.95) {
        let m = confidence_metrics(&s, &y, eta);
        assert!(m.false_positive_rate() >= 0.01);
    }
    let fit = fit_confidence_threshold(&s, &y, 0.01).unwrap();
    assert!(fit.qualified);
    assert_eq!(fit.eta, 0.951);
    assert_eq!(fit.f1, 1.0);
    assert_eq!(fit.coverage, 49.0 / 50.0);

    // nothing can reach the bound: a benign app scored 1.0
    let fit = fit_confidence_threshold(&[1.0, 1.0, 0.0], &[false, true, false], 0.01).unwrap();
    assert!(!fit.qualified);
    assert_eq!(fit.eta, 1.0);
}

#[test]
fn vacuous_error_bound_reduces_to_best_confident_f1() {
    let mut rng = seed::rng(8);
    let s: Vec<f64> = (0..60).map(|_| rng.gen()).collect();
    let y: Vec<bool> = s.iter().map(|&v| rng.gen_bool(v)).collect();
    let fit = fit_confidence_threshold(&s, &y, 1.0).unwrap();
    let best = eta_grid()
        .map(|e| confidence_metrics(&s, &y, e).f1)
        .fold(0.0, f64::max);
    assert_eq!(fit.f1, best);
}

#[test]
fn decision_rules() {
    let th = Thresholds {
        zeta: 0.5,
        eta: 0.8,
        target_error: 0.01,
        eta_unqualified: false,
    };
    assert_eq!(
        decide(0.7, &th, Strategy::General).verdict,
        Verdict::Malware
    );
    assert_eq!(decide(0.5, &th, Strategy::General).verdict, Verdict::Benign);
    assert_eq!(
        decide(0.6, &th, Strategy::Confidence).verdict,
        Verdict::Uncertain
    );
    assert_eq!(
        decide(0.9, &th, Strategy::Confidence).verdict,
        Verdict::Malware
    );
    assert_eq!(
        decide(0.1, &th, Strategy::Confidence).verdict,
        Verdict::Benign
    );
    let d = decide(0.3, &th, Strategy::Confidence);
    assert_eq!(d.prob_ben, 1.0 - d.prob_mal);
    let half = Thresholds { eta: 0.5, ..th };
    assert_eq!(
        decide(0.5, &half, Strategy::Confidence).verdict,
        Verdict::Uncertain
    );
}

#[test]
fn metric_examples() {
    let mut pairs = vec![(Verdict::Malware, true); 9];
    pairs.push((Verdict::Malware, false));
    pairs.push((Verdict::Benign, true));
    let m = metrics(pairs);
    assert!(
        (m.precision - 0.9).abs() < 1e-12
            && (m.recall - 0.9).abs() < 1e-12
            && (m.f1 - 0.9).abs() < 1e-12
    );

    let m = metrics(vec![(Verdict::Benign, true), (Verdict::Benign, false)]);
    assert_eq!(m.precision, 0.0);
    assert!(m.no_positive_predictions);
    assert_eq!(m.f1, 0.0);

    let mut pairs = vec![(Verdict::Malware, true); 80];
    pairs.extend(vec![(Verdict::Uncertain, false); 20]);
    let m = metrics(pairs);
    assert_eq!(m.coverage, 0.8);
    assert_eq!(m.f1, 1.0);
}

fn scored_set() -> BoxedStrategy<(Vec<f64>, Vec<bool>)> {
    proptest::collection::vec((0u32..=100, any::<bool>()), 1..40)
        .prop_map(|v| {
            let s = v.iter().map(|&(x, _)| x as f64 / 100.0).collect();
            let mut y: Vec<bool> = v.iter().map(|&(_, y)| y).collect();
            y[0] = true;
            (s, y)
        })
        .boxed()
}

/// Well-behaved validation sets: scores drift with the label, errors rare.
fn separated_set() -> BoxedStrategy<(Vec<f64>, Vec<bool>)> {
    proptest::collection::vec((any::<bool>(), 0.0f64..0.45, 0u8..100), 10..80)
        .prop_map(|v| {
            let mut s = Vec::new();
            let mut y = Vec::new();
            for (mal, off, flip) in v {
                let base = if mal { 1.0 - off } else { off };
                s.push(if flip < 3 { 1.0 - base } else { base });
                y.push(mal);
            }
            y[0] = true;
            (s, y)
        })
        .boxed()
}

proptest! {
    #[test]
    fn general_threshold_is_optimal((s, y) in scored_set()) {
        let z = fit_general_threshold(&s, &y).unwrap();
        let mut all: Vec<f64> = s.clone();
        all.extend([0.0, 1.0]);
        let brute = all.iter().flat_map(|&a| all.iter().map(move |&b| 0.5 * (a + b)))
            .filter(|t| (0.0..=1.0).contains(t))
            .map(|t| general_f1(&s, &y, t)).fold(0.0, f64::max);
        prop_assert_eq!(general_f1(&s, &y, z), brute);
    }

    #[test]
    fn coverage_shrinks_as_eta_grows((s, y) in scored_set()) {
        let covs: Vec<f64> = eta_grid().map(|e| confidence_metrics(&s, &y, e).coverage).collect();
        prop_assert!(covs.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn confident_f1_dominates_general_f1((s, y) in separated_set()) {
        let z = fit_general_threshold(&s, &y).unwrap();
        let fit = fit_confidence_threshold(&s, &y, 0.05).unwrap();
        prop_assume!(fit.qualified);
        prop_assert!(fit.f1 >= general_f1(&s, &y, z) - 1e-9, "{:?} vs {}", fit, general_f1(&s, &y, z));
    }

    #[test]
    fn verdicts_survive_monotone_rescaling((s, _y) in scored_set(), z in 0.0f64..1.0) {
        let f = |x: f64| x.powi(3) * 0.5 + 0.1;
        for &v in &s {
            prop_assert_eq!(general_verdict(v, z), general_verdict(f(v), f(z)));
        }
    }
}
