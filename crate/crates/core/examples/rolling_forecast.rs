// Trains a small model on a sine mixture and rolls it forward past the
// training context, scoring several horizons with one model.
//
// `cargo run --release --example rolling_forecast`

use timer_xl::data::{make_synthetic, SyntheticKind, SyntheticParams};
use timer_xl::inference::{evaluate, EvalReport, EvalSettings, ModelForecaster};
use timer_xl::masking::VariableDependencyGraph;
use timer_xl::model::{Model, ModelConfig};
use timer_xl::training::{chronological_split, train, SplitSpec, TrainConfig};

pub fn run_example() -> timer_xl::Result<EvalReport> {
    let p = 8;
    let series = make_synthetic(SyntheticKind::SineMix, 2, 1200, 3, &SyntheticParams::default())?;
    let split = chronological_split(series.len(), &SplitSpec::Ratios([0.7, 0.1, 0.2]))?;
    let tc = TrainConfig {
        lookback_points: 48,
        batch_size: 16,
        learning_rate: 2e-3,
        epochs: 6,
        seed: 4,
        normalize: true,
        ..TrainConfig::default()
    };
    let graph = VariableDependencyGraph::full(2)?;
    let mut model = Model::<f32>::new(ModelConfig::timer_xl(1, 16, 2, p), 9)?;
    let log = train(&mut model, &series.slice(split.train.start, split.train.end)?, None, &graph, &tc)?;
    println!("train loss per epoch: {:?}", log.train_losses());

    let forecaster = ModelForecaster {
        model: &model,
        graph: graph.clone(),
        normalize: tc.normalize,
    };
    let settings = EvalSettings {
        lookback_points: tc.lookback_points,
        horizons: vec![p, 2 * p, 4 * p],
        stride: p,
        dataset: "sine_mix".into(),
    };
    let report = evaluate(&forecaster, &series, split.test, graph.target_flags(), &settings)?;
    print!("{report}");
    Ok(report)
}

fn main() -> timer_xl::Result<()> {
    run_example().map(|_| ())
}
