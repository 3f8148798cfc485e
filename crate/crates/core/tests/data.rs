use homefl::data::{self, SynthSpec, REFERENCE_TEST_TOTAL, REFERENCE_TRAIN_COUNTS};
use homefl::nn::LabeledBatch;
use nalgebra::{DMatrix, DVector};

fn class_counts(b: &LabeledBatch) -> [usize; 5] {
    let mut c = [0; 5];
    for &l in &b.labels {
        c[l] += 1;
    }
    c
}

#[test]
fn partitions_have_reference_counts() {
    let parts = data::generate(&SynthSpec::default()).unwrap();
    assert_eq!(parts.len(), 3);
    for (user, counts) in REFERENCE_TRAIN_COUNTS {
        assert_eq!(class_counts(&parts[user].train), counts, "user {user}");
        assert_eq!(parts[user].train.dim(), 32);
    }
    assert_eq!(parts["A"].train.len(), 2605);
    assert_eq!(parts["B"].train.len(), 2043);
    assert_eq!(parts["C"].train.len(), 2272);
    let test_total: usize = parts.values().map(|p| p.test.len()).sum();
    assert_eq!(test_total, REFERENCE_TEST_TOTAL);
    assert_eq!(data::pooled_test(&parts).len(), REFERENCE_TEST_TOTAL);
}

#[test]
fn generation_is_deterministic_per_seed() {
    let spec = SynthSpec::default();
    assert_eq!(data::generate(&spec).unwrap(), data::generate(&spec).unwrap());
    assert_eq!(data::source_task(&spec).unwrap(), data::source_task(&spec).unwrap());
    let other = SynthSpec { seed: 1, ..SynthSpec::default() };
    assert_ne!(data::generate(&spec).unwrap()["A"].train, data::generate(&other).unwrap()["A"].train);
}

#[test]
fn near_noiseless_data_is_classified_by_nearest_center() {
    let spec = SynthSpec {
        noise_std: 1e-9,
        ..SynthSpec::default()
    };
    let geo = spec.geometry().unwrap();
    let parts = data::generate(&spec).unwrap();
    for (u, user) in spec.users.iter().enumerate() {
        let batch = &parts[&user.user].train;
        for i in 0..batch.len() {
            let x = batch.row(i);
            let nearest = (0..5)
                .min_by(|&a, &b| {
                    let d = |k: usize| -> f64 {
                        x.iter()
                            .zip(&geo.class_centers[k])
                            .zip(&geo.user_offsets[u])
                            .map(|((v, c), o)| (v - c - o).powi(2))
                            .sum()
                    };
                    d(a).total_cmp(&d(b))
                })
                .unwrap();
            assert_eq!(nearest, batch.labels[i]);
        }
    }
}

#[test]
fn source_centers_are_far_from_target_centers() {
    let spec = SynthSpec::default();
    let geo = spec.geometry().unwrap();
    assert_eq!(geo.source_centers.len(), spec.source_classes);
    for s in &geo.source_centers {
        for t in &geo.class_centers {
            let d: f64 = s.iter().zip(t).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            assert!(d > 4.0 * spec.noise_std, "distance {d}");
        }
    }
    let source = data::source_task(&spec).unwrap();
    assert_eq!(source.len(), spec.source_classes * spec.source_per_class);
}

#[test]
fn csv_round_trip_is_exact() {
    let parts = data::generate(&SynthSpec::default()).unwrap();
    let rows: Vec<(&str, &LabeledBatch)> = parts.iter().map(|(u, p)| (u.as_str(), &p.train)).collect();
    let mut buf = Vec::new();
    data::write_csv(&mut buf, &rows).unwrap();
    let back = data::read_csv(buf.as_slice()).unwrap();
    assert_eq!(back.len(), 3);
    for (u, p) in &parts {
        assert_eq!(&back[u], &p.train);
    }
    assert!(data::read_csv("a,b\n1,2\n".as_bytes()).is_err());
}

/// Least-squares linear classifier on one-hot targets.
fn least_squares_accuracy(train: &LabeledBatch, test: &LabeledBatch) -> f64 {
    let d = train.dim() + 1;
    let design = |b: &LabeledBatch| DMatrix::from_fn(b.len(), d, |i, j| if j == 0 { 1.0 } else { b.row(i)[j - 1] });
    let x = design(train);
    let xt = x.transpose();
    let gram = &xt * &x;
    let chol = gram.cholesky().expect("full-rank design");
    let xtest = design(test);
    let mut scores = DMatrix::zeros(test.len(), 5);
    for k in 0..5 {
        let y = DVector::from_fn(train.len(), |i, _| f64::from(u8::from(train.labels[i] == k)));
        let w = chol.solve(&(&xt * y));
        scores.set_column(k, &(&xtest * w));
    }
    let correct = (0..test.len())
        .filter(|&i| scores.row(i).transpose().argmax().0 == test.labels[i])
        .count();
    correct as f64 / test.len() as f64
}

#[test]
fn default_task_is_hard_but_learnable_for_a_linear_model() {
    let parts = data::generate(&SynthSpec::default()).unwrap();
    let acc = least_squares_accuracy(&data::pooled_train(&parts), &data::pooled_test(&parts));
    assert!((0.85..=0.99).contains(&acc), "linear accuracy {acc}");
}
