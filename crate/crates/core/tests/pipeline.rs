//! Generation, training, scoring, matching and bounds chained together.

use nsm_core::bounds::linear_bounds;
use nsm_core::dgp::{self, DgpConfig, SplitSpec};
use nsm_core::matching::{estimate_att, ground_truth_att, knn_match};
use nsm_core::metrics::{calibration_error, discrepancy, sample_imbalance};
use nsm_core::nn::{default_architecture, train, TrainConfig};
use nsm_core::scores::ScoreProvider;
use nsm_core::{Discrepancy, EmpiricalPair, MatchWeights};

fn small() -> DgpConfig {
    DgpConfig {
        n: 1500,
        d_observed: 10,
        d_latent: 2,
        assignment_strength: 2.0,
        seed: 7,
        ..DgpConfig::default()
    }
}

#[test]
fn trained_network_scores_beat_no_matching() {
    let ds = dgp::generate(&small()).unwrap();
    let (tr, va, _) = dgp::split(&ds, &SplitSpec::default()).unwrap();
    let mut m = default_architecture(ds.dim()).unwrap();
    m.initialize(1);
    let cfg = TrainConfig {
        max_epochs: 60,
        early_stopping_patience: Some(10),
        rng_seed: 1,
        ..TrainConfig::default()
    };
    let out = train(&m, &tr, Some(&va), &cfg).unwrap();
    assert!(out.history[out.best_epoch].val_loss < out.history[0].val_loss);

    let layer1 = ScoreProvider::nn_layer(out.model.clone(), 1).unwrap();
    assert_eq!(layer1.score_dim(), 5);
    let fit = tr.concat(&va).unwrap();
    let scores = layer1.score(&fit.x).unwrap();
    let w = knn_match(&scores, &fit.t, 1, true).unwrap();
    let naive = MatchWeights::uniform_controls(&fit.t).unwrap();
    assert!(sample_imbalance(&fit, &w).unwrap() < sample_imbalance(&fit, &naive).unwrap());

    let truth = ground_truth_att(&fit).unwrap();
    let arm_mean = |idx: Vec<usize>| idx.iter().map(|&i| fit.y[i]).sum::<f64>() / idx.len() as f64;
    let naive_est = arm_mean(fit.treated_indices()) - arm_mean(fit.control_indices());
    let naive_err = (naive_est - truth).abs();
    let matched_err = (estimate_att(&fit, &w).unwrap() - truth).abs();
    assert!(matched_err < naive_err, "{matched_err} vs {naive_err}");

    let ps = ScoreProvider::NnPs(out.model);
    let e_hat = ps.propensity(&fit.x).unwrap().unwrap();
    assert!(calibration_error(&e_hat, fit.e_true.as_ref().unwrap()).unwrap() < 0.1);
}

#[test]
fn first_layer_lower_bound_holds_on_samples() {
    // the lower bound needs no balancing assumption
    let ds = dgp::generate(&DgpConfig { n: 300, ..small() }).unwrap();
    let mut m = default_architecture(ds.dim()).unwrap();
    m.initialize(3);
    let provider = ScoreProvider::nn_layer(m, 1).unwrap();
    let map = provider.linear_map().unwrap();
    let pair = EmpiricalPair::new(
        ds.x.select_rows(&ds.treated_indices()),
        ds.x.select_rows(&ds.control_indices()),
    )
    .unwrap();
    let scored = pair.map_linear(&map.weights, Some(&map.bias)).unwrap();
    for metric in [Discrepancy::LinearMmd, Discrepancy::Wass] {
        let cov = discrepancy(&pair, metric).unwrap();
        let r = linear_bounds(&map.weights, discrepancy(&scored, metric).unwrap(), metric).unwrap();
        assert!(r.lower <= cov * (1.0 + 1e-12), "{metric:?}: {} > {cov}", r.lower);
    }
}

#[test]
fn csv_round_trip_preserves_ground_truth() {
    let ds = dgp::generate(&DgpConfig { n: 50, ..small() }).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.csv");
    nsm_core::save_csv(&ds, &path).unwrap();
    assert_eq!(nsm_core::load_csv(&path, Default::default()).unwrap(), ds);
}
