use fedsnn::config::ExperimentConfig;
use fedsnn::experiment::{prepare, Prepared};
use fedsnn::federated::*;
use fedsnn::nn::ParamSet;
use fedsnn::rng::rng_from;
use fedsnn::snn::stack_trains;
use fedsnn::Tensor;
use rand::Rng as _;

fn tiny(model: &str) -> ExperimentConfig {
    ExperimentConfig {
        synth_classes: 3,
        synth_per_class: 8,
        synth_test_per_class: 4,
        synth_side: 8,
        clients: 2,
        per_class_per_client: 4,
        rounds: 2,
        time_steps: 4,
        ..ExperimentConfig::default()
    }
    .with_override("model", model)
    .unwrap()
}

#[test]
fn zero_learning_rate_leaves_weights_alone() {
    for kind in ["snn", "cnn"] {
        let Prepared { setup, shards, test } = prepare(&tiny(kind).with_override("learning_rate", "0").unwrap()).unwrap();
        let mut state = FederatedState::new(&setup, shards, &test).unwrap();
        let before = state.global.clone();
        state.run_round(&setup).unwrap();
        for ((name, a), (_, b)) in before.iter().zip(state.global.iter()) {
            // running statistics still move; learned tensors must not
            if name.ends_with(".weight") || name.ends_with(".gamma") {
                assert_eq!(a, b, "{kind}: {name} changed");
            }
        }
    }
}

#[test]
fn single_client_federation_equals_centralized_training() {
    for kind in ["snn", "cnn"] {
        let config = ExperimentConfig {
            clients: 1,
            fraction: 1.0,
            rounds: 5,
            batch_size: 5,
            ..tiny(kind)
        };
        let Prepared { setup, shards, test } = prepare(&config).unwrap();
        let shard = shards[0].clone();
        let fed = run_experiment(&setup, shards, &test).unwrap();

        let mut model = setup.init_model().unwrap();
        for round in 1..=5 {
            let encoded: Vec<_> = (0..shard.len()).map(|i| setup.encode_train(&shard, round, 0, i).unwrap()).collect();
            for epoch in 0..setup.fed.local_epochs {
                for batch in setup.epoch_order(shard.len(), round, 0, epoch).chunks(setup.fed.batch_size) {
                    let trains: Vec<_> = batch.iter().map(|&i| &encoded[i]).collect();
                    let labels: Vec<usize> = batch.iter().map(|&i| shard.labels[i]).collect();
                    model.train_batch(&stack_trains(&trains).unwrap(), &labels, setup.fed.learning_rate).unwrap();
                }
            }
        }
        assert_eq!(fed.model.param_set(), model.param_set(), "{kind}");
    }
}

fn random_set(seed: u64) -> ParamSet {
    let mut rng = rng_from(seed);
    let mut set = ParamSet::new();
    set.push("a.weight", Tensor::from_fn(&[2, 3], |_| rng.random_range(-1.0..1.0)));
    set.push("b.gamma", Tensor::from_fn(&[4], |_| rng.random_range(-1.0..1.0)));
    set
}

#[test]
fn aggregation_ignores_update_order() {
    let sets: Vec<ParamSet> = (0..5).map(random_set).collect();
    let sizes = [3, 9, 1, 4, 7];
    let forward: Vec<(&ParamSet, usize)> = sets.iter().zip(sizes).collect();
    let mut reversed = forward.clone();
    reversed.reverse();
    let (a, b) = (aggregate(&forward).unwrap(), aggregate(&reversed).unwrap());
    for ((_, x), (_, y)) in a.iter().zip(b.iter()) {
        assert!(x.data().iter().zip(y.data()).all(|(p, q)| (p - q).abs() <= 1e-6));
    }
}

#[test]
fn identical_updates_aggregate_to_themselves() {
    let w = random_set(1);
    let updates: Vec<(&ParamSet, usize)> = [3, 5, 11].iter().map(|&n| (&w, n)).collect();
    assert_eq!(aggregate(&updates).unwrap(), w);
    let mut other = random_set(2);
    other.push("extra", Tensor::zeros(&[1]));
    assert!(aggregate(&[(&w, 1), (&other, 1)]).is_err());
}

#[test]
fn runs_are_deterministic_and_add_one_row_per_round() {
    let config = tiny("snn");
    let csv = |c: &ExperimentConfig| {
        let Prepared { setup, shards, test } = prepare(c).unwrap();
        let r = run_experiment(&setup, shards, &test).unwrap();
        assert_eq!(r.metrics.len(), setup.fed.rounds + 1);
        metrics_csv(&r.metrics, setup.arch.activated_layers())
    };
    assert_eq!(csv(&config), csv(&config));
    let zero = csv(&config.with_override("rounds", "0").unwrap());
    assert_eq!(zero.lines().count(), 2);
}

#[test]
fn identical_shards_give_identical_local_updates() {
    let Prepared { setup, shards, test } = prepare(&tiny("snn")).unwrap();
    let state = FederatedState::new(&setup, shards.clone(), &test).unwrap();
    let template = state.global_model().unwrap();
    let a = client_update(&setup, &template, &state.global, &shards[0], 1, 0).unwrap();
    let b = client_update(&setup, &template, &state.global, &shards[0], 1, 0).unwrap();
    assert_eq!(a.params, b.params);
    assert!(client_update(&setup, &template, &state.global, &shards[0].subset(&[]), 1, 0).is_err());
}

#[test]
fn accuracy_ignores_test_order() {
    let Prepared { setup, shards, test } = prepare(&tiny("snn")).unwrap();
    let mut model = run_experiment(&setup, shards, &test).unwrap().model;
    let encoded = setup.encode_test(&test).unwrap();
    let base = evaluate(&mut model, &encoded, &test.labels, 5).unwrap().accuracy;
    let order: Vec<usize> = (0..test.len()).rev().collect();
    let shuffled: Vec<_> = order.iter().map(|&i| encoded[i].clone()).collect();
    let labels: Vec<usize> = order.iter().map(|&i| test.labels[i]).collect();
    assert_eq!(evaluate(&mut model, &shuffled, &labels, 5).unwrap().accuracy, base);
    assert!(evaluate(&mut model, &[], &[], 5).is_err());
}

#[test]
fn selection_size_and_stability() {
    let fed = FedConfig::default();
    assert_eq!(select_clients(&fed, 9, 3).len(), 10);
    assert_eq!(select_clients(&fed, 9, 3), select_clients(&fed, 9, 3));
    let sparse = FedConfig { fraction: 0.01, ..fed };
    assert_eq!(select_clients(&sparse, 9, 3).len(), 1);
}
