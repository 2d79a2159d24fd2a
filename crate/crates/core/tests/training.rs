mod common;

use libra_mil::data::{kshot_split, synth_generate, Bag, Dataset, SynthSpec};
use libra_mil::fusion::BagPriors;
use libra_mil::model::ModelKind;
use libra_mil::numkernel::{dot, l2_norm, Matrix};
use libra_mil::training::{evaluate, init_model, predict, train, train_model, TrainConfig};

fn mean_pool(b: &Bag) -> Vec<f64> {
    b.features.col_means().unwrap()
}

/// Nearest class centroid of mean-pooled bags, by cosine.
fn nearest_centroid_accuracy(bags: &[Bag], classes: usize) -> f64 {
    let dim = bags[0].features.cols();
    let mut centroids = vec![vec![0.0; dim]; classes];
    for b in bags {
        for (c, v) in centroids[b.label].iter_mut().zip(mean_pool(b)) {
            *c += v;
        }
    }
    let hits = bags
        .iter()
        .filter(|b| {
            let m = mean_pool(b);
            let score = |c: &Vec<f64>| dot(&m, c) / (l2_norm(&m) * l2_norm(c));
            let best = (0..classes)
                .max_by(|&x, &y| score(&centroids[x]).total_cmp(&score(&centroids[y])))
                .unwrap();
            best == b.label
        })
        .count();
    hits as f64 / bags.len() as f64
}

fn two_class() -> Dataset {
    let spec = SynthSpec {
        classes: 2,
        bags_per_class: 40,
        ..SynthSpec::default()
    };
    synth_generate(&spec, 17).unwrap()
}

#[test]
fn separable_sixteen_shot_set_is_fit() {
    let ds = two_class();
    let plan = kshot_split(&ds, 16, 0).unwrap();
    let fold = &plan.folds[0];
    let pick = |idx: &[usize]| idx.iter().map(|&i| ds.bags[i].clone()).collect::<Vec<_>>();
    let (tr, va) = (pick(&fold.train), pick(&fold.val));
    assert_eq!(tr.len(), 32);
    // Separability first, with a model-free classifier.
    assert_eq!(nearest_centroid_accuracy(&tr, 2), 1.0);

    let priors = BagPriors::new(ds.bag_priors.clone(), 2).unwrap();
    let cfg = TrainConfig {
        k_shot: 16,
        ..TrainConfig::default()
    };
    let (params, history) = train(&tr, &va, &priors, &ds.instance_priors, &cfg).unwrap();
    assert!(history.len() <= 80);
    let m = evaluate(&tr, &priors, &params.model, &cfg.forward_config()).unwrap();
    assert!(m.accuracy >= 0.95, "training accuracy {}", m.accuracy);
}

#[test]
fn worsening_validation_stops_after_patience() {
    // Validation bags are the training bags with flipped labels, so every
    // step that helps training hurts validation.
    let ds = two_class();
    let tr: Vec<Bag> = ds.bags.iter().step_by(4).cloned().collect();
    let va: Vec<Bag> = tr
        .iter()
        .map(|b| Bag {
            label: 1 - b.label,
            ..b.clone()
        })
        .collect();
    let priors = BagPriors::new(ds.bag_priors.clone(), 2).unwrap();
    for kind in [ModelKind::Maxpool, ModelKind::Libra] {
        let cfg = TrainConfig {
            model_kind: kind,
            patience: 1,
            max_epochs: 10,
            learning_rate: 1e-2,
            hidden: 16,
            heads: 2,
            ..TrainConfig::default()
        };
        let start = init_model(&tr, ds.dim, 2, &ds.instance_priors, &cfg).unwrap();
        let (best, history) = train_model(start, &tr, &va, &priors, &cfg).unwrap();
        assert!(history[1].val_loss > history[0].val_loss, "{kind}: premise");
        assert_eq!(history.len(), 2, "{kind}");
        assert_eq!(history[1].early_stop_counter, 1);
        // The returned checkpoint is the epoch-1 state.
        assert_eq!(best.optimizer.step as usize, tr.len());
    }
}

#[test]
fn best_checkpoint_has_lowest_validation_loss() {
    let ds = synth_generate(
        &SynthSpec {
            classes: 3,
            bags_per_class: 12,
            dim: 16,
            ..SynthSpec::default()
        },
        2,
    )
    .unwrap();
    let plan = kshot_split(&ds, 4, 1).unwrap();
    let pick = |idx: &[usize]| idx.iter().map(|&i| ds.bags[i].clone()).collect::<Vec<_>>();
    let (tr, va) = (pick(&plan.folds[2].train), pick(&plan.folds[2].val));
    let priors = BagPriors::new(ds.bag_priors.clone(), 3).unwrap();
    let cfg = TrainConfig {
        max_epochs: 12,
        patience: 3,
        learning_rate: 3e-3,
        hidden: 32,
        heads: 4,
        k_v: 6,
        ..TrainConfig::default()
    };
    let (params, history) = train(&tr, &va, &priors, &ds.instance_priors, &cfg).unwrap();
    let best = history
        .iter()
        .map(|r| r.val_loss)
        .fold(f64::INFINITY, f64::min);
    let got =
        libra_mil::training::mean_loss(&va, &priors, &params.model, &cfg.forward_config()).unwrap();
    assert_eq!(got, best);
    for w in history.windows(2) {
        assert_eq!(w[1].epoch, w[0].epoch + 1);
    }
}

#[test]
fn same_seed_gives_bitwise_identical_parameters() {
    let ds = two_class();
    let tr: Vec<Bag> = ds.bags.iter().step_by(5).cloned().collect();
    let va: Vec<Bag> = ds.bags.iter().skip(1).step_by(5).cloned().collect();
    let priors = BagPriors::new(ds.bag_priors.clone(), 2).unwrap();
    let cfg = TrainConfig {
        max_epochs: 5,
        patience: 2,
        hidden: 32,
        heads: 4,
        batch_size: 3,
        seed: 99,
        ..TrainConfig::default()
    };
    let bits = |m: &libra_mil::model::Model| -> Vec<u64> {
        m.tensors()
            .iter()
            .flat_map(|(_, t)| t.as_slice().iter().map(|v| v.to_bits()))
            .collect()
    };
    let (a, ha) = train(&tr, &va, &priors, &ds.instance_priors, &cfg).unwrap();
    let (b, hb) = train(&tr, &va, &priors, &ds.instance_priors, &cfg).unwrap();
    assert_eq!(bits(&a.model), bits(&b.model));
    assert_eq!(ha, hb);
    let (c, _) = train(
        &tr,
        &va,
        &priors,
        &ds.instance_priors,
        &TrainConfig { seed: 100, ..cfg },
    )
    .unwrap();
    assert_ne!(bits(&a.model), bits(&c.model));
}

#[test]
fn evaluation_ignores_test_order() {
    let ds = two_class();
    let priors = BagPriors::new(ds.bag_priors.clone(), 2).unwrap();
    let model = common::random_libra(3, ds.dim, 4, 4, 16, 2, 2);
    let cfg = TrainConfig::default().forward_config();
    let test: Vec<Bag> = ds.bags.iter().take(20).cloned().collect();
    let mut rev = test.clone();
    rev.reverse();
    assert_eq!(
        evaluate(&test, &priors, &model, &cfg).unwrap(),
        evaluate(&rev, &priors, &model, &cfg).unwrap()
    );
    let probs = predict(&test, &priors, &model, &cfg).unwrap();
    assert!(probs.iter().all(|p| (p.sum() - 1.0).abs() < 1e-12));
    assert!(evaluate(&[], &priors, &model, &cfg).is_err());
}

#[test]
fn textual_bank_starts_from_instance_priors() {
    let ds = two_class();
    let cfg = TrainConfig::default();
    let m = init_model(&ds.bags[..8], ds.dim, 2, &ds.instance_priors, &cfg).unwrap();
    let libra_mil::model::Model::Libra(p) = &m else {
        panic!()
    };
    assert_eq!(p.bank.textual, ds.instance_priors);
    assert_eq!(p.bank.visual.shape(), (10, ds.dim));
    let zero = Matrix::zeros(2, ds.dim);
    assert!(init_model(&ds.bags[..8], ds.dim, 2, &zero, &cfg).is_err());
}
