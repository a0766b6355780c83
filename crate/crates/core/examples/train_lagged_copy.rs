// Paired training run on the lagged-copy series: B repeats A one patch
// later, so only a model that lets B attend to A can anticipate B.
//
// `cargo run --release --example train_lagged_copy`

use std::time::Instant;

use timer_xl::data::{make_synthetic, SyntheticKind, SyntheticParams};
use timer_xl::inference::{evaluate, EvalSettings, ModelForecaster};
use timer_xl::masking::VariableDependencyGraph;
use timer_xl::model::{Model, ModelConfig};
use timer_xl::training::{chronological_split, train, SplitSpec, TrainConfig};

#[derive(Debug)]
pub struct PairedRun {
    pub dependent_mse_b: f64,
    pub independent_mse_b: f64,
    pub dependent_secs: f64,
    pub independent_secs: f64,
}

pub fn run_example() -> timer_xl::Result<PairedRun> {
    let p = 4;
    let params = SyntheticParams {
        lag: p,
        noise: 0.05,
        ..SyntheticParams::default()
    };
    let series = make_synthetic(SyntheticKind::LaggedCopy, 2, 4000, 7, &params)?;
    let split = chronological_split(series.len(), &SplitSpec::Ratios([0.6, 0.2, 0.2]))?;
    let train_part = series.slice(split.train.start, split.train.end)?;
    let val_part = series.slice(split.val.start, split.val.end)?;
    let tc = TrainConfig {
        lookback_points: 16,
        batch_size: 16,
        learning_rate: 1e-3,
        epochs: 20,
        seed: 11,
        normalize: false,
        ..TrainConfig::default()
    };
    let mut base = ModelConfig::timer_xl(1, 16, 2, p);
    base.ffn_ratio = 2;
    let graph = VariableDependencyGraph::full(2)?;
    let settings = EvalSettings {
        lookback_points: tc.lookback_points,
        horizons: vec![p],
        stride: p,
        dataset: "lagged_copy".into(),
    };

    let run = |config: ModelConfig| -> timer_xl::Result<(f64, f64)> {
        let start = Instant::now();
        let mut model = Model::<f32>::new(config, 5)?;
        let log = train(&mut model, &train_part, Some(&val_part), &graph, &tc)?;
        let forecaster = ModelForecaster {
            model: &model,
            graph: graph.clone(),
            normalize: tc.normalize,
        };
        let report = evaluate(&forecaster, &series, split.test.clone(), graph.target_flags(), &settings)?;
        let row = report.row(p).expect("horizon P fits in the test split");
        let mse_b = row.per_variable.iter().find(|(name, _)| name == "B").expect("variable B").1.mse;
        println!(
            "{:?}: train loss {:.4} -> {:.4}, test MSE on B {:.4}",
            model.config.channel_mode,
            log.train_losses()[0],
            log.train_losses().last().unwrap(),
            mse_b
        );
        Ok((mse_b, start.elapsed().as_secs_f64()))
    };

    let (dependent_mse_b, dependent_secs) = run(base.clone())?;
    let (independent_mse_b, independent_secs) = run(base.channel_independent())?;
    Ok(PairedRun {
        dependent_mse_b,
        independent_mse_b,
        dependent_secs,
        independent_secs,
    })
}

fn main() -> timer_xl::Result<()> {
    let out = run_example()?;
    println!("{out:#?}");
    Ok(())
}
