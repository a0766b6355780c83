// Forecasting one target with two covariates. The target row of the
// dependency graph sees everything, the covariates only see themselves,
// and only the target is supervised.
//
// `cargo run --release --example covariate_forecast`

use timer_xl::data::{make_synthetic, SyntheticKind, SyntheticParams};
use timer_xl::inference::{evaluate, EvalReport, EvalSettings, ModelForecaster};
use timer_xl::masking::VariableDependencyGraph;
use timer_xl::model::{Model, ModelConfig};
use timer_xl::training::{chronological_split, train, SplitSpec, TrainConfig};

pub fn run_example() -> timer_xl::Result<EvalReport> {
    let p = 4;
    // Variable 0 leads variables 1 and 2 by one patch. Reordered so a
    // lagged copy is the target and the leading series is a covariate.
    let raw = make_synthetic(SyntheticKind::LaggedCopy, 3, 1600, 5, &SyntheticParams { lag: p, ..SyntheticParams::default() })?;
    let series = raw.select(&[1, 0, 2])?;
    let graph = VariableDependencyGraph::covariate(2)?;
    println!("dependency rows: {:?}, targets: {:?}", graph.rows(), graph.target_flags());

    let split = chronological_split(series.len(), &SplitSpec::Ratios([0.7, 0.1, 0.2]))?;
    let tc = TrainConfig {
        lookback_points: 16,
        batch_size: 16,
        learning_rate: 1e-3,
        epochs: 4,
        seed: 2,
        normalize: false,
        ..TrainConfig::default()
    };
    let mut model = Model::<f32>::new(ModelConfig::timer_xl(1, 16, 2, p), 3)?;
    train(&mut model, &series.slice(split.train.start, split.train.end)?, None, &graph, &tc)?;
    let forecaster = ModelForecaster {
        model: &model,
        graph: graph.clone(),
        normalize: false,
    };
    let settings = EvalSettings {
        lookback_points: tc.lookback_points,
        horizons: vec![p, 2 * p],
        stride: p,
        dataset: "covariate".into(),
    };
    let report = evaluate(&forecaster, &series, split.test, graph.target_flags(), &settings)?;
    print!("{report}");
    Ok(report)
}

fn main() -> timer_xl::Result<()> {
    run_example().map(|_| ())
}
