mod common;

use nsn_core::data::{synth_clusters, Checkpoint, Dataset, Split};
use nsn_core::surgery::{surgical_replace, SurgeryPlan};
use nsn_core::training::{
    cross_entropy, evaluate, parameter_slices_mut, total_objective, train, AblationMode, CurriculumSampler, ModeKind, ObjectiveSpec,
    TrainConfig, UncertaintyParams,
};
use nsn_core::{seeded_rng, Activation, Matrix, Model, RankSpec};
use proptest::prelude::*;

fn toy(seed: u64, max_rank: usize) -> (Model, Matrix, Vec<usize>) {
    let mut rng = seeded_rng(seed);
    let model = Model::mlp(&[7, 9, 4], Some(max_rank), Activation::Gelu, &mut rng).unwrap();
    let x = Matrix::random_gaussian(10, 7, 1.0, &mut rng);
    let y = (0..10).map(|_| rng.below(4)).collect();
    (model, x, y)
}

fn spec(kind: ModeKind, anchor: usize, variant: Option<usize>) -> ObjectiveSpec {
    ObjectiveSpec {
        anchor,
        variant,
        mode: AblationMode::plain(kind),
        use_uncertainty: true,
        detach_anchor: false,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn components_above_rank_have_no_effect(seed in any::<u64>(), r in 1usize..6, delta in -5.0f64..5.0) {
        let (model, x, y) = toy(seed, 6);
        let mut moved = model.clone();
        for block in moved.blocks_mut() {
            if let nsn_core::Layer::Nsn(l) = &mut block.layer {
                for j in r..l.max_rank() {
                    for v in l.a.row_mut(j) {
                        *v += delta;
                    }
                    for i in 0..l.b.rows() {
                        l.b.row_mut(i)[j] -= delta;
                    }
                }
            }
        }
        let before = model.forward(&x, RankSpec::Rank(r)).unwrap();
        let after = moved.forward(&x, RankSpec::Rank(r)).unwrap();
        prop_assert_eq!(&before, &after);
        prop_assert_eq!(cross_entropy(&before, &y).unwrap().0, cross_entropy(&after, &y).unwrap().0);
    }

    #[test]
    fn halving_uncertainty_doubles_a_rank_contribution(seed in any::<u64>(), s_a in -1.0f64..1.0, s_v in -1.0f64..1.0) {
        let (model, x, y) = toy(seed, 6);
        let spec = spec(ModeKind::TwoCe, 6, Some(2));
        let grads_at = |sv: f64| {
            let u = UncertaintyParams::from_values([(6, s_a), (2, sv)].into_iter().collect());
            total_objective(&model, &x, &y, &spec, &u).unwrap().grads.flat_weights()
        };
        let ln2 = std::f64::consts::LN_2;
        let (low, mid, high) = (grads_at(s_v - ln2), grads_at(s_v), grads_at(s_v + ln2));
        // g(s) = w_a G_a + e^{-s} G_v, so the two differences isolate the variant term
        let scale = mid.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for i in 0..mid.len() {
            let doubled = low[i] - mid[i];
            let halved = mid[i] - high[i];
            prop_assert!((doubled - 2.0 * halved).abs() <= 1e-12 * scale.max(1.0));
        }
    }

    #[test]
    fn curriculum_horizon_grows_and_variants_stay_below_anchor(pool in proptest::collection::btree_set(1usize..32, 1..8), epochs in 1usize..40, seed in any::<u64>()) {
        let pool: Vec<usize> = pool.into_iter().collect();
        let mut sampler = CurriculumSampler::new(32, &pool, epochs, true, seed).unwrap();
        let mut last = 0;
        for e in 0..epochs {
            let h = sampler.horizon(e);
            prop_assert!(h >= last && h >= 1 && h <= pool.len());
            last = h;
            let (anchor, variant) = sampler.sample(e).unwrap();
            prop_assert_eq!(anchor, 32);
            prop_assert!(variant < anchor && pool.contains(&variant));
        }
        prop_assert_eq!(last, pool.len());
    }

    #[test]
    fn cross_entropy_is_root_two_lipschitz(seed in any::<u64>(), classes in 2usize..12, spread in 0.01f64..50.0) {
        let mut rng = seeded_rng(seed);
        let z = Matrix::random_gaussian(1, classes, spread, &mut rng);
        let w = z.add(&Matrix::random_gaussian(1, classes, spread * rng.uniform(), &mut rng)).unwrap();
        let label = rng.below(classes);
        let gap = (cross_entropy(&z, &[label]).unwrap().0 - cross_entropy(&w, &[label]).unwrap().0).abs();
        prop_assert!(gap <= std::f64::consts::SQRT_2 * z.sub(&w).unwrap().frobenius_norm() + 1e-12);
    }
}

#[test]
fn log_variance_descends_to_log_cross_entropy() {
    let (model, x, y) = toy(3, 6);
    let spec = spec(ModeKind::CeOnly, 6, None);
    let ce = cross_entropy(&model.forward(&x, RankSpec::Rank(6)).unwrap(), &y).unwrap().0;
    let mut u = UncertaintyParams::default();
    u.set(6, 2.0);
    for _ in 0..2000 {
        let ds = total_objective(&model, &x, &y, &spec, &u).unwrap().grads.ds[&6];
        u.set(6, u.get(6) - 0.5 * ds);
    }
    assert!((u.get(6) - ce.ln()).abs() < 1e-4, "s = {}, ln CE = {}", u.get(6), ce.ln());
}

#[test]
fn final_epoch_variants_are_uniform() {
    let pool = [1, 2, 4, 8, 16];
    let mut sampler = CurriculumSampler::new(32, &pool, 10, true, 9).unwrap();
    assert!((0..10).all(|_| sampler.sample(0).unwrap().1 == 16));
    let n = 10_000;
    let mut counts = [0usize; 5];
    for _ in 0..n {
        let v = sampler.sample(9).unwrap().1;
        counts[pool.iter().position(|&p| p == v).unwrap()] += 1;
    }
    let p = 0.2;
    let sigma = (n as f64 * p * (1.0 - p)).sqrt();
    for c in counts {
        assert!((c as f64 - n as f64 * p).abs() < 3.0 * sigma, "{counts:?}");
    }
}

/// Plain softmax regression trained by full-batch gradient descent.
fn logistic_regression_accuracy(train: &Dataset, test: &Dataset) -> f64 {
    let (d, c) = (train.dim(), train.num_classes);
    let mut w = Matrix::zeros(c, d);
    for _ in 0..300 {
        let logits = train.features.matmul_t(&w).unwrap();
        let (_, g) = cross_entropy(&logits, &train.labels).unwrap();
        w = w.sub(&g.t_matmul(&train.features).unwrap().scale(0.5)).unwrap();
    }
    let logits = test.features.matmul_t(&w).unwrap();
    nsn_core::training::accuracy(&logits, &test.labels)
}

#[test]
fn separable_blobs_are_learned() {
    let data = synth_clusters(11, 2, 16, 200, 6.0).unwrap();
    let (train_set, test_set) = data.stratified_split(0.25, 0).unwrap();
    let oracle = logistic_regression_accuracy(&train_set, &test_set);
    assert!(oracle >= 0.95, "oracle accuracy {oracle}");

    let model = Model::mlp(&[16, 32, 2], Some(8), Activation::Relu, &mut seeded_rng(1)).unwrap();
    let cfg = TrainConfig {
        epochs: 30,
        batch_size: 32,
        anchor_rank: 8,
        rank_pool: vec![1, 2, 4],
        interpolated_eval_ranks: vec![3],
        ..TrainConfig::default()
    };
    let out = train(&model, &train_set, Some(&test_set), &cfg).unwrap();
    let (_, acc) = evaluate(&out.model, &test_set, RankSpec::Rank(8)).unwrap();
    assert!(acc >= 0.95, "anchor accuracy {acc} vs oracle {oracle}");
}

#[test]
fn training_is_deterministic() {
    let data = synth_clusters(2, 3, 8, 30, 3.0).unwrap();
    let model = Model::mlp(&[8, 12, 3], Some(6), Activation::Relu, &mut seeded_rng(4)).unwrap();
    let cfg = TrainConfig {
        epochs: 3,
        batch_size: 16,
        anchor_rank: 6,
        rank_pool: vec![1, 2, 4],
        interpolated_eval_ranks: vec![3, 5],
        ..TrainConfig::default()
    };
    let a = train(&model, &data, None, &cfg).unwrap();
    let b = train(&model, &data, None, &cfg).unwrap();
    assert_eq!(a.log, b.log);
    assert_eq!(a.model, b.model);
    let c = train(&model, &data, None, &TrainConfig { seed: 1, ..cfg }).unwrap();
    assert_ne!(a.log, c.log);
}

#[test]
fn surgery_then_zero_epochs_keeps_predictions() {
    let dense = Model::mlp(&[8, 12, 3], None, Activation::Relu, &mut seeded_rng(6)).unwrap();
    let (ckpt, _) = surgical_replace(&Checkpoint::new(dense.clone()), &SurgeryPlan::all_dense(&dense)).unwrap();
    let data = Dataset::new(Matrix::random_gaussian(20, 8, 1.0, &mut seeded_rng(7)), vec![0; 20], 3, Split::Train).unwrap();
    let cfg = TrainConfig {
        epochs: 0,
        anchor_rank: 3,
        rank_pool: vec![1, 2],
        interpolated_eval_ranks: Vec::new(),
        ..TrainConfig::default()
    };
    let tuned = train(&ckpt.model, &data, None, &cfg).unwrap().model;
    assert_eq!(tuned, ckpt.model);
    let before = dense.forward(&data.features, RankSpec::Full).unwrap();
    let after = tuned.forward(&data.features, RankSpec::Full).unwrap();
    assert!(before.sub(&after).unwrap().frobenius_norm() <= 1e-10 * before.frobenius_norm());
}

#[test]
fn parameter_views_cover_every_weight() {
    let (mut model, _, _) = toy(1, 5);
    let total: usize = parameter_slices_mut(&mut model).iter().map(|s| s.len()).sum();
    assert_eq!(total, model.parameter_count());
}
