use ksynth::autograd::Tape;
use ksynth::data::{default_classes, generate_dataset, Dataset};
use ksynth::losses::LossWeights;
use ksynth::model::{build_network, NetworkConfig};
use ksynth::params::Ctx;
use ksynth::train::{batch_objective, grid_search_rfs, run_experiment, train, Sgd, TrainConfig, LOG_HEADER};

fn tiny_data(seed: u64) -> Dataset {
    generate_dataset(&default_classes(8, 32, 32, 0.05), 3, 2, seed).unwrap()
}

fn short(seed: u64) -> TrainConfig {
    TrainConfig {
        epochs: 3,
        batch_size: 4,
        decay_epochs: vec![2],
        seed,
        ..TrainConfig::default()
    }
}

#[test]
fn small_step_lowers_the_batch_objective() {
    let data = tiny_data(1);
    let cfg = NetworkConfig::default();
    let (net, mut store) = build_network(&cfg, 2).unwrap();
    let (x, labels) = data.train.batch(&[0, 1, 2, 3, 4, 5, 6, 7]).unwrap();
    let weights = LossWeights::default();
    let eval = |store: &ksynth::params::ParamStore| {
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, store, true);
        let t = batch_objective(&net, &ctx, &x, &labels, weights, None).unwrap();
        let v = t.total.item().unwrap();
        let g = tape.backward(t.total).unwrap();
        (v, ctx.gradients(&g))
    };
    let (before, grads) = eval(&store);
    Sgd::new(0.0).step(&mut store, &grads, 1e-4).unwrap();
    let (after, _) = eval(&store);
    assert!(after < before, "{before} -> {after}");
}

#[test]
fn same_seed_reproduces_weights_and_log() {
    let data = tiny_data(4);
    let cfg = NetworkConfig::default();
    let a = run_experiment(&cfg, &short(7), &data).unwrap();
    let b = run_experiment(&cfg, &short(7), &data).unwrap();
    assert!(a.store.bit_eq(&b.store));
    assert_eq!(a.log.to_csv(), b.log.to_csv());
    let c = run_experiment(&cfg, &short(8), &data).unwrap();
    assert!(!a.store.bit_eq(&c.store));
}

#[test]
fn progress_stream_matches_returned_log() {
    let data = tiny_data(2);
    let (net, mut store) = build_network(&NetworkConfig::default(), 0).unwrap();
    let mut out = Vec::new();
    let log = train(&net, &mut store, &data, &short(0), Some(&mut out)).unwrap();
    let text = String::from_utf8(out).unwrap();
    assert_eq!(text, log.to_csv());
    assert_eq!(text.lines().next(), Some(LOG_HEADER));
    assert_eq!(text.lines().count(), 4);
    let last: Vec<&str> = text.lines().last().unwrap().split(',').collect();
    assert_eq!(last[0], "3");
    assert_eq!(last.len(), LOG_HEADER.split(',').count());
}

#[test]
fn single_candidate_grid_equals_direct_run() {
    let data = tiny_data(3);
    let cfg = NetworkConfig::default();
    let train_cfg = TrainConfig { epochs: 1, ..short(5) };
    let direct = run_experiment(&cfg, &train_cfg, &data).unwrap();
    let rows = grid_search_rfs(&[(5, 5)], &cfg, &train_cfg, &data).unwrap();
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0].top1, direct.eval.top1);

    let twice = grid_search_rfs(&[(3, 3), (3, 3)], &cfg, &train_cfg, &data).unwrap();
    assert_eq!(twice[0].top1, twice[1].top1);
    assert!(grid_search_rfs(&[], &cfg, &train_cfg, &data).is_err());
}

#[test]
fn empty_training_split_is_rejected() {
    let mut data = tiny_data(0);
    data.train.samples.clear();
    let (net, mut store) = build_network(&NetworkConfig::default(), 0).unwrap();
    assert!(train(&net, &mut store, &data, &short(0), None).is_err());
}
