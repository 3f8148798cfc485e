use homefl::data::{self, SynthSpec};
use homefl::nn::{self, Activation, Dense, Gradients, LabeledBatch, Matrix, ModelParams};
use homefl::seed;
use homefl::train::{self, run_round_schedule, Optimizer, Phase, PretrainConfig, RoundSchedule, SchedulePlan};
use proptest::prelude::*;
use rand::Rng;

fn random_batch(rng: &mut impl Rng, n: usize, dim: usize, classes: usize) -> LabeledBatch {
    let data: Vec<f64> = (0..n * dim).map(|_| rng.random_range(-2.0..2.0)).collect();
    let labels = (0..n).map(|_| rng.random_range(0..classes)).collect();
    LabeledBatch::new(Matrix::new(n, dim, data).unwrap(), labels).unwrap()
}

fn loss(params: &ModelParams, batch: &LabeledBatch) -> f64 {
    nn::loss_and_grad(params, batch).unwrap().0
}

fn param_mut(params: &mut ModelParams, layer: usize, idx: usize) -> &mut f64 {
    let l = &mut params.layers[layer];
    let nw = l.weights.len();
    if idx < nw {
        &mut l.weights[idx]
    } else {
        &mut l.bias[idx - nw]
    }
}

fn grad_at(g: &Gradients, layer: usize, idx: usize) -> f64 {
    let l = &g.layers[layer];
    let nw = l.weights.len();
    if idx < nw {
        l.weights[idx]
    } else {
        l.bias[idx - nw]
    }
}

#[test]
fn gradients_match_central_differences_on_50_models() {
    let mut rng = seed::rng(11);
    let h = 1e-4;
    let mut checked = 0;
    let (mut compared, mut kinks) = (0usize, 0usize);
    while checked < 50 {
        let depth = rng.random_range(1..=3);
        let mut dims = vec![rng.random_range(2..=6)];
        for _ in 1..depth {
            dims.push(rng.random_range(2..=8));
        }
        dims.push(rng.random_range(2..=5));
        let model = ModelParams::glorot(&dims, &mut rng);
        if model.num_params() > 200 {
            continue;
        }
        let batch = random_batch(&mut rng, 4, dims[0], *dims.last().unwrap());
        let (_, grad) = nn::loss_and_grad(&model, &batch).unwrap();
        for k in 0..model.num_layers() {
            let count = model.layers[k].weights.len() + model.layers[k].bias.len();
            for i in 0..count {
                let mut plus = model.clone();
                *param_mut(&mut plus, k, i) += h;
                let mut minus = model.clone();
                *param_mut(&mut minus, k, i) -= h;
                let (fp, f0, fm) = (loss(&plus, &batch), loss(&model, &batch), loss(&minus, &batch));
                // One-sided slopes disagree when the step crosses a relu kink.
                let (fwd, bwd) = ((fp - f0) / h, (f0 - fm) / h);
                if (fwd - bwd).abs() > 1e-2 * fwd.abs().max(bwd.abs()).max(1e-3) {
                    kinks += 1;
                    continue;
                }
                compared += 1;
                let numeric = (fp - fm) / (2.0 * h);
                let analytic = grad_at(&grad, k, i);
                let scale = analytic.abs().max(numeric.abs()).max(1e-7);
                let rel = (analytic - numeric).abs() / scale;
                assert!(
                    rel < 1e-4,
                    "model {checked} dims {dims:?} layer {k} param {i}: analytic {analytic} numeric {numeric}"
                );
            }
        }
        checked += 1;
    }
    assert!(kinks * 50 < compared, "{kinks} kinks vs {compared} compared");
}

/// Dense forward pass written out with plain loops.
fn oracle_forward(model: &ModelParams, x: &[f64]) -> Vec<f64> {
    let mut a = x.to_vec();
    for layer in &model.layers {
        let mut z = vec![0.0; layer.outputs];
        for o in 0..layer.outputs {
            let mut s = layer.bias[o];
            for i in 0..layer.inputs {
                s += layer.weights[o * layer.inputs + i] * a[i];
            }
            z[o] = s;
        }
        a = match layer.activation {
            Activation::Relu => z.iter().map(|v| v.max(0.0)).collect(),
            Activation::Softmax => {
                let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
                let s: f64 = e.iter().sum();
                e.iter().map(|v| v / s).collect()
            }
        };
    }
    a
}

#[test]
fn forward_matches_hand_rolled_oracle() {
    let mut rng = seed::rng(5);
    let model = ModelParams::glorot(&[32, 16, 5], &mut rng);
    let batch = random_batch(&mut rng, 4, 32, 5);
    let probs = nn::forward(&model, &batch.features).unwrap();
    for i in 0..4 {
        let want = oracle_forward(&model, batch.row(i));
        for (a, b) in probs.row(i).iter().zip(&want) {
            assert!((a - b).abs() < 1e-9);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_are_distributions(seed_v in any::<u64>(), scale in 0.1f64..20.0) {
        let mut rng = seed::rng(seed_v);
        let model = ModelParams::glorot(&[6, 8, 5], &mut rng);
        let x: Vec<f64> = (0..6 * 3).map(|_| rng.random_range(-scale..scale)).collect();
        let probs = nn::forward(&model, &Matrix::new(3, 6, x).unwrap()).unwrap();
        for i in 0..3 {
            let row = probs.row(i);
            prop_assert!(row.iter().all(|p| (0.0..=1.0).contains(p)));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn frozen_layers_stay_bit_identical(seed_v in any::<u64>(), steps in 1usize..20) {
        let mut rng = seed::rng(seed_v);
        let mut model = ModelParams::glorot(&[4, 6, 3], &mut rng);
        let start = model.clone();
        let batch = random_batch(&mut rng, 8, 4, 3);
        let mask = [true, false];
        for _ in 0..steps {
            let (_, g) = nn::loss_and_grad(&model, &batch).unwrap();
            model = nn::sgd_step(&model, &g, 0.1, &mask).unwrap();
        }
        prop_assert_eq!(&model.layers[0], &start.layers[0]);
    }

    #[test]
    fn delta_plus_initial_is_returned_params(seed_v in any::<u64>()) {
        let mut rng = seed::rng(seed_v);
        let model = ModelParams::glorot(&[4, 6, 3], &mut rng);
        let batch = random_batch(&mut rng, 40, 4, 3);
        let sched = RoundSchedule {
            round: 2,
            phases: vec![Phase { epochs: 2, learning_rate: 0.05, batch_size: 8, freeze_mask: vec![false, false] }],
        };
        let out = run_round_schedule(&model, &batch, &sched, 2, &Optimizer::Sgd, seed_v).unwrap();
        prop_assert_eq!(model.apply_delta(&out.delta).unwrap(), out.params.clone());
        let again = run_round_schedule(&model, &batch, &sched, 2, &Optimizer::Sgd, seed_v).unwrap();
        prop_assert_eq!(again, out);
    }
}

#[test]
fn zero_epoch_schedule_gives_zero_delta() {
    let mut rng = seed::rng(1);
    let model = ModelParams::glorot(&[4, 6, 3], &mut rng);
    let batch = random_batch(&mut rng, 10, 4, 3);
    let sched = SchedulePlan::zero_epochs().for_round(1, 2);
    let out = run_round_schedule(&model, &batch, &sched, 1, &Optimizer::Sgd, 0).unwrap();
    assert!(out.delta.is_zero());
    assert_eq!(out.params, model);
}

#[test]
fn round_one_freezes_body_during_head_phase() {
    let spec = SynthSpec::default();
    let parts = data::generate(&spec).unwrap();
    let a = &parts["A"].train;
    let model = train::random_init(&[32, 64, 32, 5], 2);
    let mut sched = RoundSchedule::reference(1, 3);
    sched.phases[1].epochs = 0;
    let out = run_round_schedule(&model, a, &sched, 1, &Optimizer::Sgd, 3).unwrap();
    assert_eq!(out.params.layers[0], model.layers[0]);
    assert_eq!(out.params.layers[1], model.layers[1]);
    assert_ne!(out.params.layers[2], model.layers[2]);
}

#[test]
fn round_one_on_separable_data_trains_well() {
    let spec = SynthSpec {
        center_radius: 12.0,
        ..SynthSpec::default()
    };
    let parts = data::generate(&spec).unwrap();
    let a = &parts["A"].train;
    let model = train::random_init(&[32, 64, 32, 5], 9);
    let out = run_round_schedule(&model, a, &RoundSchedule::reference(1, 3), 1, &Optimizer::Sgd, 4).unwrap();
    let acc = nn::accuracy(&out.params, a).unwrap();
    assert!(acc > 0.9, "training accuracy {acc}");
}

#[test]
fn pretraining_with_zero_epochs_is_random_init() {
    let spec = SynthSpec::default();
    let source = data::source_task(&spec).unwrap();
    let cfg = PretrainConfig {
        epochs: 0,
        seed: 42,
        ..PretrainConfig::default()
    };
    let model = train::train_source_model(&source, 8, &cfg).unwrap();
    assert_eq!(model, train::random_init(&[32, 64, 32, 8], 42));
}

#[test]
fn transfer_model_swaps_only_the_head() {
    let spec = SynthSpec::default();
    let source = data::source_task(&spec).unwrap();
    let cfg = PretrainConfig::default();
    let trained = train::train_source_model(&source, 8, &cfg).unwrap();
    let tl = train::pretrain_transfer_model(&source, 8, 32, 5, &cfg).unwrap();
    assert_eq!(tl.layers[..2], trained.layers[..2]);
    assert_eq!(tl.num_classes(), 5);
    assert!(train::pretrain_transfer_model(&source, 8, 16, 5, &cfg).unwrap_err().is_config());
}

#[test]
fn pretrained_body_beats_random_init_in_head_phase() {
    // Source task drawn from the target distribution itself.
    let spec = SynthSpec::default();
    let parts = data::generate(&spec).unwrap();
    let pooled = data::pooled_train(&parts);
    let cfg = PretrainConfig::default();
    let tl = train::pretrain_transfer_model(&pooled, 5, 32, 5, &cfg).unwrap();
    let rnd = train::random_init(&[32, 64, 32, 5], 1);
    let mut sched = RoundSchedule::reference(1, 3);
    sched.phases[1].epochs = 0;
    let a = &parts["A"];
    let acc = |m: &ModelParams| {
        let out = run_round_schedule(m, &a.train, &sched, 1, &Optimizer::Sgd, 7).unwrap();
        nn::accuracy(&out.params, &a.test).unwrap()
    };
    let (t, r) = (acc(&tl), acc(&rnd));
    assert!(t > r, "pretrained {t} vs random {r}");
}

#[test]
fn sgd_freeze_contract_with_dense_layers() {
    let layer = Dense::zeros(2, 2, Activation::Softmax);
    let model = ModelParams::new(vec![layer], 0).unwrap();
    let mut g = Gradients::zeros_like(&model);
    g.layers[0].weights[0] = 1.0;
    let out = nn::sgd_step(&model, &g, 0.5, &[false]).unwrap();
    assert_eq!(out.layers[0].weights[0], -0.5);
    assert_eq!(nn::sgd_step(&model, &g, 0.5, &[true]).unwrap(), model);
}
