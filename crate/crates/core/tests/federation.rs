mod common;

use proptest::prelude::*;

use common::{random_updates, rng};
use semanticfl::data::{synthetic_dataset, Dataset, Split, SyntheticDataSpec};
use semanticfl::fl::{
    aggregation_weights, evaluate, fedavg_aggregate, initial_state, local_train, run_rounds, select_clients, Algorithm,
    ClientData, ClientUpdate, Federation, GlobalState, RoundConfig, RunOptions,
};
use semanticfl::losses::{cross_entropy_grad, LossWeights};
use semanticfl::nn::{build_model, Architecture, BackboneSpec};
use semanticfl::partition::{partition, PartitionSpec};
use semanticfl::Error;

fn small_data(split: Split) -> Dataset {
    let spec = SyntheticDataSpec {
        num_classes: 3,
        train_per_class: 20,
        test_per_class: 10,
        image_size: 8,
        ..Default::default()
    };
    synthetic_dataset(&spec, split).unwrap()
}

fn linear_spec() -> BackboneSpec {
    BackboneSpec::new(Architecture::Linear, 3, 6, 5).with_input(3, 8)
}

fn fedavg_cfg() -> RoundConfig {
    RoundConfig {
        algorithm: Algorithm::Fedavg,
        clients_per_round: 1,
        local_epochs: 1,
        batch_size: 8,
        momentum: 0.0,
        weight_decay: 0.0,
        lr: 0.05,
        ..RoundConfig::default()
    }
}

#[test]
fn fedavg_reproduces_hand_computed_means() {
    let mk = |id, params: Vec<f64>, n| ClientUpdate {
        client_id: id,
        params,
        num_samples: n,
        loss_trace: Vec::new(),
    };
    let ups = vec![mk(0, vec![1.0, -2.0, 0.0], 10), mk(1, vec![3.0, 2.0, 4.0], 30)];
    // (10 * w0 + 30 * w1) / 40
    assert_eq!(fedavg_aggregate(&ups).unwrap(), vec![2.5, 1.0, 3.0]);

    let ups = vec![mk(0, vec![0.0], 1), mk(1, vec![6.0], 1), mk(2, vec![3.0], 4)];
    assert_eq!(fedavg_aggregate(&ups).unwrap(), vec![3.0]);

    let same = vec![mk(0, vec![0.1, 0.7], 3), mk(1, vec![0.1, 0.7], 11), mk(2, vec![0.1, 0.7], 5)];
    assert_eq!(fedavg_aggregate(&same).unwrap(), vec![0.1, 0.7]);
}

#[test]
fn fedavg_rejects_malformed_updates() {
    let mut r = rng(0);
    let mut ups = random_updates(&mut r, 3, 4);
    assert!(matches!(fedavg_aggregate(&[]), Err(Error::InvalidInput(_))));
    ups[1].params.pop();
    assert!(matches!(fedavg_aggregate(&ups), Err(Error::InvalidInput(_))));
    let mut ups = random_updates(&mut r, 3, 4);
    ups[2].num_samples = 0;
    assert!(matches!(fedavg_aggregate(&ups), Err(Error::InvalidInput(_))));
}

#[test]
fn fedavg_convexity_on_random_instances() {
    let mut r = rng(1);
    for _ in 0..100 {
        let k = 1 + (r.next_u32_mod(8) as usize);
        let ups = random_updates(&mut r, k, 16);
        let w = aggregation_weights(&ups);
        assert!((w.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        assert!(w.iter().all(|&c| c > 0.0));
        let agg = fedavg_aggregate(&ups).unwrap();
        for j in 0..16 {
            let lo = ups.iter().map(|u| u.params[j]).fold(f64::INFINITY, f64::min);
            let hi = ups.iter().map(|u| u.params[j]).fold(f64::NEG_INFINITY, f64::max);
            assert!(lo <= agg[j] && agg[j] <= hi);
            let direct: f64 = ups.iter().zip(&w).map(|(u, c)| c * u.params[j]).sum();
            assert!((agg[j] - direct).abs() < 1e-12 * (1.0 + direct.abs()));
        }
    }
}

trait Draw {
    fn next_u32_mod(&mut self, m: u32) -> u32;
}

impl Draw for rand_chacha::ChaCha8Rng {
    fn next_u32_mod(&mut self, m: u32) -> u32 {
        rand::Rng::gen_range(self, 0..m)
    }
}

proptest! {
    #[test]
    fn fedavg_is_permutation_invariant(seed in 0u64..1000, k in 1usize..6) {
        let mut r = rng(seed);
        let ups = random_updates(&mut r, k, 5);
        let mut rev = ups.clone();
        rev.reverse();
        let a = fedavg_aggregate(&ups).unwrap();
        let b = fedavg_aggregate(&rev).unwrap();
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() < 1e-12 * (1.0 + x.abs()));
        }
    }

    #[test]
    fn selection_is_sorted_distinct_and_in_range(k in 1usize..30, round in 0usize..100, seed in any::<u64>()) {
        let m = 1 + round % k;
        let s = select_clients(k, m, round, seed).unwrap();
        prop_assert_eq!(s.len(), m);
        prop_assert!(s.windows(2).all(|w| w[0] < w[1]));
        prop_assert!(s.iter().all(|&c| c < k));
        prop_assert_eq!(&s, &select_clients(k, m, round, seed).unwrap());
    }
}

#[test]
fn selection_is_uniform() {
    let (k, m, rounds) = (10, 3, 4000);
    let mut hits = vec![0usize; k];
    for r in 1..=rounds {
        for c in select_clients(k, m, r, 17).unwrap() {
            hits[c] += 1;
        }
    }
    let p = m as f64 / k as f64;
    let se = (p * (1.0 - p) / rounds as f64).sqrt();
    for (c, &h) in hits.iter().enumerate() {
        let f = h as f64 / rounds as f64;
        assert!((f - p).abs() < 4.0 * se, "client {c}: frequency {f}");
    }
    assert!(select_clients(3, 4, 1, 0).is_err());
    assert!(select_clients(3, 0, 1, 0).is_err());
}

#[test]
fn evaluate_matches_constant_predictor() {
    let test = small_data(Split::Test);
    let mut model = build_model(&linear_spec()).unwrap();
    // All logits zero: argmax picks class 0 for every sample.
    let zeros = vec![0.0; model.param_len()];
    let acc = evaluate(&mut model, &zeros, &test).unwrap();
    let expect = test.labels.iter().filter(|&&y| y == 0).count() as f64 / test.len() as f64;
    assert_eq!(acc, expect);

    // A classifier bias favouring class 2 predicts class 2 everywhere.
    let blocks = model.blocks();
    let mut params = zeros.clone();
    let mut offset = 0;
    for b in &blocks {
        let len: usize = b.shape.iter().product();
        if b.name == "classifier.bias" {
            params[offset + 2] = 1.0;
        }
        offset += len;
    }
    let acc = evaluate(&mut model, &params, &test).unwrap();
    let expect = test.labels.iter().filter(|&&y| y == 2).count() as f64 / test.len() as f64;
    assert_eq!(acc, expect);
}

#[test]
fn one_full_batch_step_is_plain_gradient_descent() {
    let train = small_data(Split::Train);
    let spec = linear_spec();
    let mut model = build_model(&spec).unwrap();
    let global = model.params().to_vec();
    let indices: Vec<usize> = (0..train.len()).collect();
    let cfg = RoundConfig {
        batch_size: train.len(),
        ..fedavg_cfg()
    };
    let client = ClientData {
        client_id: 0,
        dataset: &train,
        indices: &indices,
        anchors: None,
    };
    let update = local_train(&mut model, &global, client, &cfg, 1).unwrap();

    let oracle = build_model(&spec).unwrap();
    let (out, cache) = oracle.forward_train(&train.batch(&indices)).unwrap();
    let (_, g) = cross_entropy_grad(&out.logits, &train.labels).unwrap();
    let zero = semanticfl::nn::Tensor::zeros(out.features.shape);
    let grad = oracle.backward(&cache, &g, &zero);
    for (j, ((&w1, &w0), &gj)) in update.params.iter().zip(&global).zip(&grad).enumerate() {
        let expect = w0 - cfg.lr * gj;
        assert!((w1 - expect).abs() < 1e-12, "coordinate {j}: {w1} vs {expect}");
    }
    assert_eq!(update.num_samples, train.len());
    assert_eq!(update.loss_trace.len(), 1);
}

#[test]
fn local_training_reduces_loss() {
    let train = small_data(Split::Train);
    let mut model = build_model(&linear_spec()).unwrap();
    let global = model.params().to_vec();
    let indices: Vec<usize> = (0..train.len()).collect();
    let cfg = RoundConfig {
        local_epochs: 15,
        momentum: 0.9,
        lr: 0.01,
        ..fedavg_cfg()
    };
    let client = ClientData {
        client_id: 0,
        dataset: &train,
        indices: &indices,
        anchors: None,
    };
    let u = local_train(&mut model, &global, client, &cfg, 1).unwrap();
    let first = u.loss_trace.first().unwrap().ce;
    let last = u.loss_trace.last().unwrap().ce;
    assert!(last < 0.8 * first, "ce went from {first} to {last}");
    assert!(u.loss_trace.iter().all(|b| b.kd == 0.0 && b.con == 0.0));
}

#[test]
fn semantic_training_requires_anchors() {
    let train = small_data(Split::Train);
    let mut model = build_model(&linear_spec()).unwrap();
    let global = model.params().to_vec();
    let indices = [0, 1, 2];
    let cfg = RoundConfig {
        algorithm: Algorithm::Semanticfl,
        ..fedavg_cfg()
    };
    let client = ClientData {
        client_id: 4,
        dataset: &train,
        indices: &indices,
        anchors: None,
    };
    assert!(matches!(local_train(&mut model, &global, client, &cfg, 1), Err(Error::State(_))));
}

#[test]
fn diverging_client_is_reported() {
    let train = small_data(Split::Train);
    let mut model = build_model(&linear_spec()).unwrap();
    let global = model.params().to_vec();
    let indices: Vec<usize> = (0..train.len()).collect();
    let cfg = RoundConfig {
        lr: 1e308,
        local_epochs: 3,
        ..fedavg_cfg()
    };
    let client = ClientData {
        client_id: 2,
        dataset: &train,
        indices: &indices,
        anchors: None,
    };
    match local_train(&mut model, &global, client, &cfg, 1) {
        Err(Error::TrainingDiverged { client, .. }) => assert_eq!(client, 2),
        other => panic!("expected divergence, got {other:?}"),
    }
}

fn federation_parts(k: usize) -> (Dataset, Dataset, semanticfl::partition::PartitionMap) {
    let train = small_data(Split::Train);
    let test = small_data(Split::Test);
    let map = partition(&train.labels, &PartitionSpec::dirichlet(k, 1.0, 3)).unwrap();
    (train, test, map)
}

#[test]
fn zero_rounds_return_the_initial_model() {
    let (train, test, map) = federation_parts(2);
    let spec = linear_spec();
    let fed = Federation {
        spec: &spec,
        train: &train,
        test: &test,
        partition: &map,
        store: None,
    };
    let init = initial_state(&spec).unwrap();
    let out = run_rounds(init.clone(), fed, &fedavg_cfg(), 0, &RunOptions::default()).unwrap();
    assert_eq!(out, init);
}

#[test]
fn single_client_round_equals_local_training() {
    let (train, test, map) = federation_parts(1);
    let spec = linear_spec();
    let fed = Federation {
        spec: &spec,
        train: &train,
        test: &test,
        partition: &map,
        store: None,
    };
    let cfg = RoundConfig {
        local_epochs: 2,
        momentum: 0.9,
        ..fedavg_cfg()
    };
    let init = initial_state(&spec).unwrap();
    let state = run_rounds(init.clone(), fed, &cfg, 1, &RunOptions::default()).unwrap();

    let mut model = build_model(&spec).unwrap();
    let client = ClientData {
        client_id: 0,
        dataset: &train,
        indices: &map.client_indices[0],
        anchors: None,
    };
    let u = local_train(&mut model, &init.params, client, &cfg, 1).unwrap();
    assert_eq!(state.params, u.params);
    assert_eq!(state.round, 1);
    assert_eq!(state.history.len(), 1);
    assert_eq!(state.history[0].clients, vec![0]);
    assert_eq!(state.history[0].test_acc, evaluate(&mut model, &u.params, &test).unwrap());
}

#[test]
fn run_rounds_rejects_bad_configuration() {
    let (train, test, map) = federation_parts(2);
    let spec = linear_spec();
    let fed = Federation {
        spec: &spec,
        train: &train,
        test: &test,
        partition: &map,
        store: None,
    };
    let init = initial_state(&spec).unwrap();
    let too_many = RoundConfig {
        clients_per_round: 3,
        ..fedavg_cfg()
    };
    assert!(run_rounds(init.clone(), fed, &too_many, 1, &RunOptions::default())
        .unwrap_err()
        .is_config());
    let semantic = RoundConfig {
        algorithm: Algorithm::Semanticfl,
        ..fedavg_cfg()
    };
    assert!(matches!(
        run_rounds(init.clone(), fed, &semantic, 1, &RunOptions::default()),
        Err(Error::State(_))
    ));
    let short = GlobalState::new(vec![0.0; 3]);
    assert!(run_rounds(short, fed, &fedavg_cfg(), 1, &RunOptions::default()).is_err());
    let bad_tau = RoundConfig {
        weights: LossWeights {
            tau: 0.0,
            ..LossWeights::default()
        },
        ..fedavg_cfg()
    };
    assert!(run_rounds(init, fed, &bad_tau, 1, &RunOptions::default()).unwrap_err().is_config());
}
