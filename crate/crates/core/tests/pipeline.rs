use std::sync::Arc;

use proptest::prelude::*;
use sgdrf_core::io::{load_checkpoint, save_checkpoint};
use sgdrf_core::{
    generate_synthetic, make_grid, pkl_checkpoint, predict, streaming_fit, EngineConfig, GdrfModel, KernelParams,
    Location, ModelHyperparams, PredictMode, StreamingEngine, VariationalState, WorldBounds,
};

fn hyper(k: usize, w: usize) -> ModelHyperparams {
    let b = WorldBounds::new(vec![0.0], vec![20.0]).unwrap();
    ModelHyperparams {
        k,
        w,
        beta: vec![0.2; w],
        gp_mean: 0.0,
        kernel: KernelParams::new(2.0, vec![3.0]).unwrap(),
        inducing: make_grid(&b, &[12]).unwrap(),
    }
}

#[test]
fn streaming_fit_beats_the_prior_on_held_out_records() {
    let h = hyper(2, 8);
    let locs: Vec<Location> = (0..120).map(|i| Location::x(i as f64 / 6.0)).collect();
    let data = generate_synthetic(&h, &locs, 80, 4).unwrap();
    // every third record is held out
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (i, r) in data.dataset.iter().enumerate() {
        if i % 3 == 0 { test.push(r.clone()) } else { train.push(r.clone()) }
    }
    let model = Arc::new(GdrfModel::new(h.clone()).unwrap());
    let mut cfg = EngineConfig::default();
    cfg.subsampler.decay = 1.0;
    cfg.iters_per_obs = 10;
    cfg.adam.learning_rate = 0.02;
    let state = streaming_fit(train, model.clone(), cfg, 1, |_, _| {}).unwrap();

    let queries: Vec<Location> = test.iter().map(|r| r.location().clone()).collect();
    let prior = VariationalState::init(2, 12, &h.beta);
    let before = pkl_checkpoint(&predict(&prior, &queries, &model, PredictMode::PlugIn).unwrap(), &test, 1e-3).unwrap();
    let after = pkl_checkpoint(&predict(&state, &queries, &model, PredictMode::PlugIn).unwrap(), &test, 1e-3).unwrap();
    assert!(after.median < 0.5 * before.median, "median PKL {} -> {}", before.median, after.median);
    let truth = pkl_checkpoint(&data.truth, &data.dataset, 1e-3).unwrap();
    assert!(after.median < 3.0 * truth.median + 0.05, "fit {} vs truth {}", after.median, truth.median);
}

#[test]
fn checkpoint_round_trip_keeps_state_and_optimizer() {
    let h = hyper(3, 5);
    let locs: Vec<Location> = (0..15).map(|i| Location::x(i as f64)).collect();
    let data = generate_synthetic(&h, &locs, 20, 9).unwrap();
    let model = Arc::new(GdrfModel::new(h).unwrap());
    let mut engine = StreamingEngine::new(model.clone(), EngineConfig::default(), 2).unwrap();
    for r in data.dataset {
        engine.ingest(r, &mut |_, _| {}).unwrap();
    }
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("s.sgdrf");
    save_checkpoint(&path, engine.state(), Some(engine.optimizer()), "abc").unwrap();
    let back = load_checkpoint(&path).unwrap();
    assert_eq!(&back.state, engine.state());
    assert_eq!(back.optimizer.as_ref(), Some(engine.optimizer()));
    assert_eq!(back.header.config_hash, "abc");

    let mut fresh = StreamingEngine::new(model, EngineConfig::default(), 2).unwrap();
    fresh.restore(back.state, back.optimizer.unwrap()).unwrap();
    assert_eq!(fresh.state(), engine.state());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn predictions_are_distributions_for_any_state(
        shift in proptest::collection::vec(-2.0f64..2.0, 1..64),
        x in proptest::collection::vec(0.0f64..20.0, 1..6),
    ) {
        let h = hyper(2, 4);
        let model = GdrfModel::new(h.clone()).unwrap();
        let mut state = VariationalState::init(2, 12, &h.beta);
        let mut flat = state.to_flat();
        for (i, s) in shift.iter().enumerate() {
            let j = (i * 37) % flat.len();
            flat[j] += s;
        }
        state.set_flat(&flat).unwrap();
        let queries: Vec<Location> = x.iter().map(|&v| Location::x(v)).collect();
        for mode in [PredictMode::PlugIn, PredictMode::MonteCarlo { samples: 5, seed: 1 }] {
            let pred = predict(&state, &queries, &model, mode).unwrap();
            for i in 0..queries.len() {
                prop_assert!((pred.p_obs_row(i).iter().sum::<f64>() - 1.0).abs() < 1e-9);
                prop_assert!((pred.theta_row(i).iter().sum::<f64>() - 1.0).abs() < 1e-9);
                prop_assert!(pred.p_obs_row(i).iter().all(|p| *p >= 0.0));
            }
        }
    }
}
