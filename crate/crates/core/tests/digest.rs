use dexprint_core::digest::*;
use dexprint_core::seed;
use dexprint_core::Error;
use proptest::prelude::*;
use rand::Rng;

fn unit(v: Vec<f32>) -> Vec<f32> {
    let n = v.iter().map(|x| x * x).sum::<f32>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

/// `families` prototypes with sparse noisy members, all unit norm.
fn families(families: usize, per: usize, dim: usize, s: u64) -> (Vec<Vec<f32>>, Vec<usize>) {
    let mut rng = seed::rng(s);
    let protos: Vec<Vec<f32>> = (0..families)
        .map(|_| {
            (0..dim)
                .map(|_| {
                    if rng.gen_bool(0.1) {
                        rng.gen_range(-1.0..1.0)
                    } else {
                        0.0
                    }
                })
                .collect()
        })
        .collect();
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for (f, p) in protos.iter().enumerate() {
        for _ in 0..per {
            xs.push(unit(
                p.iter()
                    .map(|&x| {
                        x + if rng.gen_bool(0.05) {
                            rng.gen_range(-0.5..0.5)
                        } else {
                            0.0
                        }
                    })
                    .collect(),
            ));
            ys.push(f);
        }
    }
    (xs, ys)
}

fn dist(a: &[f32], b: &[f32]) -> f32 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f32>()
        .sqrt()
}

fn nn_accuracy(xs: &[Vec<f32>], ys: &[usize]) -> f64 {
    let hits = (0..xs.len())
        .filter(|&i| {
            let j = (0..xs.len())
                .filter(|&j| j != i)
                .min_by(|&a, &b| dist(&xs[i], &xs[a]).total_cmp(&dist(&xs[i], &xs[b])))
                .unwrap();
            ys[i] == ys[j]
        })
        .count();
    hits as f64 / xs.len() as f64
}

#[test]
fn standard_architecture_has_the_fixed_widths() {
    let ae = AutoEncoder::<f32>::new(300, &mut seed::rng(1)).unwrap();
    let shapes: Vec<Vec<usize>> = (0..ae.params.len())
        .step_by(2)
        .map(|i| ae.params.get(i).shape().to_vec())
        .collect();
    assert_eq!(
        shapes,
        vec![
            vec![512, 300],
            vec![256, 512],
            vec![128, 256],
            vec![64, 128],
            vec![128, 64],
            vec![256, 128],
            vec![512, 256],
            vec![300, 512]
        ]
    );
    assert_eq!(ae.digest_dim(), DIGEST_DIM);
}

#[test]
fn memorizes_a_repeated_vector() {
    let mut rng = seed::rng(3);
    let v = unit((0..200).map(|_| rng.gen_range(-1.0..1.0)).collect());
    let rows: Vec<&[f32]> = vec![&v; 8];
    let cfg = DigestConfig {
        epochs: 200,
        ..DigestConfig::default()
    };
    let ae = train_autoencoder(&rows, &cfg).unwrap();
    let last = *ae.epoch_losses.last().unwrap();
    assert!(last < 1e-3, "final loss {last}");
    assert!(ae.reconstruction_loss(&rows).unwrap() < 1e-3);
}

#[test]
fn zero_vector_digest_is_finite_and_reconstruction_small() {
    let (xs, _) = families(3, 10, 120, 4);
    let mut rows: Vec<&[f32]> = xs.iter().map(|v| v.as_slice()).collect();
    let zero = vec![0.0f32; 120];
    rows.extend(std::iter::repeat(zero.as_slice()).take(10));
    let ae = train_autoencoder(
        &rows,
        &DigestConfig {
            epochs: 60,
            ..DigestConfig::default()
        },
    )
    .unwrap();
    let z = ae.encode(&zero).unwrap();
    assert!(z.iter().all(|v| v.is_finite() && v.abs() < 1.0));
    let r = ae.reconstruct(&zero).unwrap();
    let err: f32 = r.iter().map(|x| x * x).sum();
    assert!(err < 0.05, "reconstruction energy {err}");
}

#[test]
fn seeded_training_is_reproducible_and_encoding_deterministic() {
    let (xs, _) = families(2, 8, 64, 5);
    let rows: Vec<&[f32]> = xs.iter().map(|v| v.as_slice()).collect();
    let cfg = DigestConfig {
        epochs: 5,
        ..DigestConfig::default()
    };
    let a = train_autoencoder(&rows, &cfg).unwrap();
    let b = train_autoencoder(&rows, &cfg).unwrap();
    assert_eq!(a.epoch_losses, b.epoch_losses);
    assert_eq!(a.encode(rows[0]).unwrap(), a.encode(rows[0]).unwrap());
    assert_eq!(a.encode(rows[0]).unwrap(), b.encode(rows[0]).unwrap());
    let batch = a.encode_batch(&rows).unwrap();
    for (r, z) in rows.iter().zip(&batch) {
        let single = a.encode(r).unwrap();
        for (x, y) in single.iter().zip(z) {
            assert!((x - y).abs() < 1e-6);
        }
    }
}

#[test]
fn loss_moving_average_decreases() {
    let (xs, _) = families(4, 10, 100, 6);
    let rows: Vec<&[f32]> = xs.iter().map(|v| v.as_slice()).collect();
    let ae = train_autoencoder(
        &rows,
        &DigestConfig {
            epochs: 40,
            ..DigestConfig::default()
        },
    )
    .unwrap();
    let ma: Vec<f64> = ae
        .epoch_losses
        .windows(5)
        .map(|w| w.iter().sum::<f64>() / 5.0)
        .collect();
    assert!(ma.windows(2).all(|w| w[1] <= w[0]), "{:?}", ae.epoch_losses);
}

#[test]
fn digests_keep_families_apart() {
    let (xs, ys) = families(5, 12, 256, 7);
    let rows: Vec<&[f32]> = xs.iter().map(|v| v.as_slice()).collect();
    let ae = train_autoencoder(
        &rows,
        &DigestConfig {
            epochs: 100,
            ..DigestConfig::default()
        },
    )
    .unwrap();
    let zs = ae.encode_batch(&rows).unwrap();
    assert!(zs.iter().flatten().all(|v| v.abs() < 1.0));
    let (mut intra, mut inter, mut ni, mut ne) = (0.0, 0.0, 0, 0);
    for i in 0..zs.len() {
        for j in i + 1..zs.len() {
            let d = dist(&zs[i], &zs[j]) as f64;
            if ys[i] == ys[j] {
                intra += d;
                ni += 1;
            } else {
                inter += d;
                ne += 1;
            }
        }
    }
    assert!(intra / (ni as f64) < inter / (ne as f64));
    let raw = nn_accuracy(&xs, &ys);
    let compressed = nn_accuracy(&zs, &ys);
    assert!(compressed >= raw - 0.05, "digest {compressed} vs raw {raw}");
}

#[test]
fn input_validation() {
    let a = vec![0.5f32; 10];
    let b = vec![0.5f32; 11];
    assert!(matches!(
        train_autoencoder(&[&a], &DigestConfig::default()),
        Err(Error::InvalidArgument(_))
    ));
    assert!(matches!(
        train_autoencoder(&[&a, &b], &DigestConfig::default()),
        Err(Error::InvalidArgument(_))
    ));
    let ae = AutoEncoder::<f32>::new(10, &mut seed::rng(0)).unwrap();
    assert!(ae.encode(&b).is_err());
}

#[test]
fn checkpoint_round_trip() {
    let (xs, _) = families(2, 4, 32, 8);
    let rows: Vec<&[f32]> = xs.iter().map(|v| v.as_slice()).collect();
    let ae = train_with_widths(
        &rows,
        &[16, 8],
        &DigestConfig {
            epochs: 3,
            ..DigestConfig::default()
        },
    )
    .unwrap();
    let mut buf = Vec::new();
    ae.to_checkpoint().write_to(&mut buf).unwrap();
    let back =
        AutoEncoder::from_checkpoint(&dexprint_nn::Checkpoint::read_from(buf.as_slice()).unwrap())
            .unwrap();
    assert_eq!(back, ae);
}

#[test]
fn encoder_decoder_passes_finite_differences() {
    let mut rng = seed::rng(11);
    for _ in 0..25 {
        let r = gradient_check(&mut rng).unwrap();
        assert!(r.passes(1e-4), "{r:?}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]
    #[test]
    fn digest_width_is_fixed(dim in 1usize..200, s in any::<u64>()) {
        let ae = AutoEncoder::<f32>::new(dim, &mut seed::rng(s)).unwrap();
        let v: Vec<f32> = (0..dim).map(|i| ((i as f32) * 0.37).sin()).collect();
        let z = ae.encode(&v).unwrap();
        prop_assert_eq!(z.len(), 64);
        prop_assert!(z.iter().all(|x| x.abs() < 1.0));
    }
}
