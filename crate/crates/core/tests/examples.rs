//! Every example under `examples/` runs as part of the test suite.

macro_rules! example {
    ($module:ident, $file:literal) => {
        #[allow(dead_code)]
        mod $module {
            include!(concat!(env!("CARGO_MANIFEST_DIR"), "/examples/", $file));
        }
    };
}

example!(mask_kronecker, "mask_kronecker.rs");
example!(time_attention, "time_attention.rs");
example!(gradient_check, "gradient_check.rs");
example!(complexity_table, "complexity_table.rs");
example!(rolling_forecast, "rolling_forecast.rs");
example!(covariate_forecast, "covariate_forecast.rs");
example!(checkpoint_roundtrip, "checkpoint_roundtrip.rs");
example!(train_lagged_copy, "train_lagged_copy.rs");

#[test]
fn mask_example_lists_causal_sources() {
    let sources = mask_kronecker::run_example().unwrap();
    assert_eq!(sources[1], vec![1, 2, 4, 5]);
    assert_eq!(sources[0], vec![1, 4]);
}

#[test]
fn attention_example_rows_are_distributions() {
    let probs = time_attention::run_example().unwrap();
    for row in probs.data().chunks(6) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
    // Token 1 of variable 1 cannot see token 2 of either variable.
    assert_eq!(probs.at(&[0, 0, 1]), 0.0);
    assert_eq!(probs.at(&[1, 0, 4]), 0.0);
}

#[test]
fn gradient_example_agrees_with_finite_differences() {
    assert!(gradient_check::run_example().unwrap() <= 1e-4);
}

#[test]
fn complexity_example_has_both_modes() {
    let rows = complexity_table::run_example().unwrap();
    assert_eq!(rows.len(), 8);
    assert!(rows[4..].iter().zip(&rows[..4]).all(|(dep, ind)| dep.flops > ind.flops));
}

#[test]
fn rolling_example_reports_every_horizon() {
    let report = rolling_forecast::run_example().unwrap();
    assert_eq!(report.rows.len(), 3);
    assert!(report.rows.iter().all(|r| r.n_windows > 0 && r.metrics.mse.is_finite()));
}

#[test]
fn covariate_example_scores_only_the_target() {
    let report = covariate_forecast::run_example().unwrap();
    assert!(report.rows.iter().all(|r| r.per_variable.len() == 1));
}

#[test]
fn checkpoint_example_round_trips() {
    assert!(checkpoint_roundtrip::run_example().unwrap() > 0);
}

#[test]
fn lagged_copy_example_favours_dependence() {
    let run = train_lagged_copy::run_example().unwrap();
    assert!(run.dependent_mse_b < run.independent_mse_b, "{run:?}");
}
