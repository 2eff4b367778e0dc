use std::sync::Arc;

use gformer::data::Trajectory;
use gformer::datagen::hemo::gen_hemo_observational;
use gformer::datagen::{HemoSimConfig, LinearGaussianToy, ToyConfig};
use gformer::gcomp::{build_residual_bank, simulate_mc, ResidualMode, SimulationConfig, TreatmentRegime};
use gformer::gtransformer::{fit_observational_policy, ModelConfig, TrainConfig};
use gformer::metrics::predictive_check;

/// Average ranks, ties shared.
fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        for &k in &idx[i..=j] {
            r[k] = (i + j) as f64 / 2.0;
        }
        i = j + 1;
    }
    r
}

fn spearman(x: &[f64], y: &[f64]) -> f64 {
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    cov / (vx * vy).sqrt()
}

#[test]
fn simulated_mean_matches_linear_gaussian_closed_form() {
    let toy = LinearGaussianToy::new(ToyConfig::default()).unwrap();
    let c = toy.config.clone();
    let holdout = toy.generate(1_000_000, 4000, "val");
    let bank = build_residual_bank(&toy, &holdout.units, 1, ResidualMode::Independent).unwrap();
    let units = toy.generate(0, 5, "test");
    let (start, end, m) = (4, c.steps, 2000);
    for (regime, a) in [
        (TreatmentRegime::withhold("withhold"), 0.0),
        (TreatmentRegime::static_sequence("always", vec![vec![1.0]]), 1.0),
    ] {
        let cfg = SimulationConfig::new(m, start, end, 9);
        let mut kept = cfg.clone();
        kept.keep_draws = true;
        let res = simulate_mc(&toy, &units.units, &regime, &bank, &kept).unwrap();
        for (u, sim) in units.units.iter().zip(&res.units) {
            let mut expected = u.covariate(start - 1, 0);
            let draws = sim.draws.as_ref().unwrap();
            let steps = end - start;
            for s in 0..steps {
                expected = c.coef * expected + c.effect * a;
                let col: Vec<f64> = (0..m).map(|r| draws[r * steps + s]).collect();
                let mean = col.iter().sum::<f64>() / m as f64;
                let sd = (col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (m - 1) as f64).sqrt();
                assert!((sim.mean[s] - mean).abs() < 1e-9);
                assert!(
                    (mean - expected).abs() < 3.0 * sd / (m as f64).sqrt(),
                    "{} unit {} step {s}: {mean} vs {expected}",
                    regime.id,
                    u.id
                );
            }
        }
    }
}

fn small_hemo() -> HemoSimConfig {
    HemoSimConfig {
        num_observational: 400,
        num_counterfactual: 20,
        steps: 20,
        switch_time: 10,
        seed: 5,
        ..HemoSimConfig::default()
    }
}

fn small_model() -> (ModelConfig, TrainConfig) {
    (
        ModelConfig {
            hidden_dim: 16,
            num_layers: 1,
            num_heads: 2,
            feedforward_dim: 32,
            dropout: 0.0,
            max_sequence_length: 32,
        },
        TrainConfig {
            max_epochs: 8,
            patience: 8,
            learning_rate: 1e-3,
            eta_min: 1e-4,
            ..TrainConfig::default()
        },
    )
}

#[test]
fn fitted_policy_treats_less_as_map_rises() {
    let [train, val, test] = gen_hemo_observational(&small_hemo()).unwrap();
    let (mc, tc) = small_model();
    let (policy, log) = fit_observational_policy(&train, &val, &mc, &tc, &mut |_| {}).unwrap();
    assert!(log.best_val_total < log.initial_val_total);
    let map = train.schema.index_of("map").unwrap();
    let fluid = train.schema.treatments.iter().position(|t| t.name == "fluid").unwrap();
    let units: Vec<&Trajectory> = test.units.iter().collect();
    let (mut maps, mut probs) = (Vec::new(), Vec::new());
    for t in 0..small_hemo().steps {
        let p = policy.treat_probabilities(&units, t).unwrap();
        for (b, u) in units.iter().enumerate() {
            maps.push(u.covariate(t, map));
            probs.push(p[b * 2 + fluid]);
        }
    }
    assert!(probs.iter().all(|p| (0.0..=1.0).contains(p)));
    let rho = spearman(&maps, &probs);
    assert!(rho < -0.3, "rank correlation {rho}");
}

#[test]
fn predictive_check_edges() {
    let cfg = small_hemo();
    let [train, val, test] = gen_hemo_observational(&cfg).unwrap();
    let (mc, mut tc) = small_model();
    tc.max_epochs = 1;
    tc.patience = 1;
    let (policy, _) = fit_observational_policy(&train, &val, &mc, &tc, &mut |_| {}).unwrap();
    let policy = Arc::new(policy);
    let toy_est = gformer::gcomp::fit_linear_gcomp(&train, &Default::default()).unwrap();
    let bank = build_residual_bank(&toy_est, &val.units, 1, ResidualMode::Independent).unwrap();
    let small = test.slice(0..8, "test");
    let k = cfg.steps;
    let empty = predictive_check(&toy_est, policy.clone(), &bank, &small, k, k, 20, 1, "h").unwrap();
    assert!(empty.is_empty());
    let a = predictive_check(&toy_est, policy.clone(), &bank, &small, 15, k, 20, 1, "h").unwrap();
    let b = predictive_check(&toy_est, policy, &bank, &small, 15, k, 20, 1, "h").unwrap();
    assert_eq!(a, b);
    assert_eq!(a.iter().map(|r| r.metric.as_str()).collect::<Vec<_>>(), ["individual_rmse", "population_rmse", "calibration"]);
    assert_eq!(a[0].times, (15..k).collect::<Vec<_>>());
}
