// Saves a model, reloads it and confirms identical bytes and predictions.
//
// `cargo run --example checkpoint_roundtrip`

use timer_xl::checkpoint;
use timer_xl::data::{make_synthetic, patchify, SyntheticKind, SyntheticParams};
use timer_xl::masking::VariableDependencyGraph;
use timer_xl::model::{Census, Model, ModelConfig};

/// Size of the checkpoint in bytes.
pub fn run_example() -> timer_xl::Result<usize> {
    let model = Model::<f32>::new(ModelConfig::timer_xl(2, 16, 4, 8), 42)?;
    let dir = std::env::temp_dir().join(format!("timer-xl-ckpt-{}", std::process::id()));
    std::fs::create_dir_all(&dir)?;
    let path = dir.join("model.ckpt");
    checkpoint::save(&model, &path)?;
    let restored = checkpoint::load(&path)?;

    let series = make_synthetic(SyntheticKind::SineMix, 3, 64, 0, &SyntheticParams::default())?;
    let grid = patchify(&series, 8, 64)?;
    let c = VariableDependencyGraph::full(3)?;
    assert_eq!(model.forward(&grid, &c)?, restored.forward(&grid, &c)?);

    let bytes = std::fs::read(&path)?;
    assert_eq!(bytes, checkpoint::to_bytes(&restored)?);
    println!(
        "{} parameters ({} in the closed-form census), {} bytes on disk",
        model.count_parameters(Census::Full),
        model.count_parameters(Census::ClosedForm),
        bytes.len()
    );
    std::fs::remove_dir_all(&dir)?;
    Ok(bytes.len())
}

fn main() -> timer_xl::Result<()> {
    run_example().map(|_| ())
}
