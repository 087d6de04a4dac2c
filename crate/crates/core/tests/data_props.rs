use proptest::prelude::*;
use selectroscope::data::{generate, load_idx, parse_idx, write_idx, Dataset, Split, SyntheticSpec};
use selectroscope::{Error, Tensor};

/// Nearest class mean with means estimated on the train split. The decision
/// rule `argmin ‖x − m_k‖²` is linear in `x`.
fn nearest_mean_accuracy(train: &Dataset, eval: &Dataset) -> f64 {
    let k = train.num_classes();
    let p: usize = train.image_shape().iter().product();
    let mut means = vec![vec![0.0; p]; k];
    let mut counts = vec![0usize; k];
    for (i, &l) in train.labels().iter().enumerate() {
        counts[l] += 1;
        for (m, v) in means[l].iter_mut().zip(&train.images().data()[i * p..(i + 1) * p]) {
            *m += v;
        }
    }
    for (m, &c) in means.iter_mut().zip(&counts) {
        m.iter_mut().for_each(|v| *v /= c as f64);
    }
    let correct = eval
        .labels()
        .iter()
        .enumerate()
        .filter(|&(i, &l)| {
            let x = &eval.images().data()[i * p..(i + 1) * p];
            let dist = |m: &Vec<f64>| x.iter().zip(m).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
            let best = (0..k).min_by(|&a, &b| dist(&means[a]).total_cmp(&dist(&means[b]))).unwrap();
            best == l
        })
        .count();
    correct as f64 / eval.len() as f64
}

#[test]
fn default_task_is_linearly_separable() {
    let (train, eval) = generate(&SyntheticSpec::default()).unwrap();
    let acc = nearest_mean_accuracy(&train, &eval);
    assert!(acc > 0.95, "linear oracle accuracy {acc}");
}

#[test]
fn histogram_is_exact() {
    let spec = SyntheticSpec {
        train_per_class: 100,
        eval_per_class: 7,
        ..SyntheticSpec::default()
    };
    let (train, eval) = generate(&spec).unwrap();
    assert_eq!(train.class_histogram(), vec![100; 10]);
    assert_eq!(eval.class_histogram(), vec![7; 10]);
}

#[test]
fn splits_use_different_noise() {
    let spec = SyntheticSpec {
        train_per_class: 2,
        eval_per_class: 2,
        ..SyntheticSpec::default()
    };
    let (train, eval) = generate(&spec).unwrap();
    assert_ne!(train.images().data(), eval.images().data());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn generation_is_pure_and_in_range(seed in 0u64..1000, k in 2usize..6, sigma in 0.0f64..1.5, h in 1usize..6) {
        let spec = SyntheticSpec {
            num_classes: k,
            train_per_class: 3,
            eval_per_class: 2,
            image_shape: [2, h, 3],
            template_seed: seed,
            noise_sigma: sigma,
        };
        let (a, b) = generate(&spec).unwrap();
        let (c, d) = generate(&spec).unwrap();
        let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        prop_assert_eq!(bits(a.images()), bits(c.images()));
        prop_assert_eq!(bits(b.images()), bits(d.images()));
        prop_assert_eq!(a.labels(), c.labels());
        for ds in [&a, &b] {
            prop_assert!(ds.images().data().iter().all(|v| (0.0..=1.0).contains(v)));
            prop_assert!(ds.labels().iter().all(|&l| l < k));
        }
    }

    #[test]
    fn idx_round_trip_within_half_a_quantum(seed in 0u64..1000, c in 1usize..3, sigma in 0.0f64..0.6) {
        let spec = SyntheticSpec {
            num_classes: 3,
            train_per_class: 2,
            eval_per_class: 1,
            image_shape: [c, 4, 5],
            template_seed: seed,
            noise_sigma: sigma,
        };
        let (train, _) = generate(&spec).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = (dir.path().join("img.idx"), dir.path().join("lab.idx"));
        write_idx(&train, &ip, &lp).unwrap();
        let back = load_idx(&ip, &lp, Some(3), Split::Train).unwrap();
        prop_assert_eq!(back.labels(), train.labels());
        prop_assert_eq!(back.images().shape(), train.images().shape());
        let err = back.images().data().iter().zip(train.images().data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        prop_assert!(err <= 0.5 / 255.0 + 1e-12, "max error {}", err);
    }
}

fn idx(dims: &[u32], payload: &[u8]) -> Vec<u8> {
    let mut out = vec![0, 0, 8, dims.len() as u8];
    for d in dims {
        out.extend(d.to_be_bytes());
    }
    out.extend(payload);
    out
}

#[test]
fn endpoint_pixels_map_to_zero_and_one() {
    let dir = tempfile::tempdir().unwrap();
    let (ip, lp) = (dir.path().join("i"), dir.path().join("l"));
    std::fs::write(&ip, idx(&[1, 2, 2], &[0, 255, 0, 255])).unwrap();
    std::fs::write(&lp, idx(&[1], &[0])).unwrap();
    let ds = load_idx(&ip, &lp, None, Split::Eval).unwrap();
    assert_eq!(ds.images().shape(), &[1, 1, 2, 2]);
    assert_eq!(ds.images().data(), &[0.0, 1.0, 0.0, 1.0]);
}

#[test]
fn count_mismatch_is_a_format_error() {
    let dir = tempfile::tempdir().unwrap();
    let (ip, lp) = (dir.path().join("i"), dir.path().join("l"));
    std::fs::write(&ip, idx(&[2, 1, 1], &[0, 255])).unwrap();
    std::fs::write(&lp, idx(&[3], &[0, 1, 1])).unwrap();
    assert!(matches!(load_idx(&ip, &lp, None, Split::Eval), Err(Error::Format { .. })));
}

#[test]
fn malformed_headers_report_offsets() {
    let offset = |bytes: &[u8]| match parse_idx(bytes) {
        Err(Error::Format { offset, .. }) => offset,
        other => panic!("expected a format error, got {other:?}"),
    };
    assert_eq!(offset(&[1, 0, 8, 1, 0, 0, 0, 1, 7]), 0);
    assert_eq!(offset(&[0, 0, 0x0d, 1, 0, 0, 0, 1, 7]), 2);
    // header promises 4 bytes, only 3 present
    assert_eq!(offset(&idx(&[4], &[1, 2, 3])), 11);
    assert_eq!(offset(&[0, 0, 8]), 3);
    assert_eq!(offset(&[0, 0, 8, 2, 0, 0]), 6);
    assert_eq!(parse_idx(&idx(&[2, 1], &[5, 6])).unwrap(), (vec![2, 1], &[5u8, 6][..]));
}
