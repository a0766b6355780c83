// Compares reverse-mode gradients of a one-block model against central
// finite differences for a sample of parameter entries.
//
// `cargo run --release --example gradient_check`

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use timer_xl::autodiff::Tape;
use timer_xl::data::PatchTokenGrid;
use timer_xl::masking::VariableDependencyGraph;
use timer_xl::model::{Model, ModelConfig};
use timer_xl::tensor::Tensor;
use timer_xl::training::mntp_loss;

fn loss(model: &Model<f64>, grid: &PatchTokenGrid, target: &Tensor<f64>, c: &VariableDependencyGraph) -> timer_xl::Result<f64> {
    let pred = model.forward(grid, c)?;
    Ok(pred.data().iter().zip(target.data()).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / pred.numel() as f64)
}

/// Largest relative error over the sampled entries.
pub fn run_example() -> timer_xl::Result<f64> {
    let (n, t, p) = (2, 3, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut model = Model::<f64>::new(ModelConfig::timer_xl(1, 8, 2, p), 2)?;
    // Nonzero biases and variable scalars so every path carries gradient.
    for param in model.params.values_mut() {
        for x in param.data_mut() {
            *x += rng.random_range(-0.2..0.2);
        }
    }
    let grid = PatchTokenGrid::new(n, t, p, (0..n * t * p).map(|_| rng.random_range(-1.0..1.0)).collect())?;
    let target = Tensor::from_fn(&[n, t, p], |_| rng.random_range(-1.0..1.0));
    let c = VariableDependencyGraph::full(n)?;

    let mut tape = Tape::new();
    let trace = model.forward_on_tape(&mut tape, &grid, &c)?;
    let l = mntp_loss(&mut tape, trace.prediction, &target, c.target_flags())?;
    tape.backward(l)?;
    let grads: Vec<(String, Tensor<f64>)> = trace
        .params
        .named()
        .into_iter()
        .map(|(name, &v)| (name, tape.grad(v).expect("parameter gradient")))
        .collect();

    let h = 1e-5;
    let mut worst = 0.0f64;
    for (k, (name, g)) in grads.iter().enumerate() {
        let idx = rng.random_range(0..g.numel());
        let mut plus = model.clone();
        plus.params.values_mut()[k].data_mut()[idx] += h;
        let mut minus = model.clone();
        minus.params.values_mut()[k].data_mut()[idx] -= h;
        let numeric = (loss(&plus, &grid, &target, &c)? - loss(&minus, &grid, &target, &c)?) / (2.0 * h);
        let analytic = g.data()[idx];
        let rel = (numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(1e-8);
        worst = worst.max(rel);
        println!("{name:<22} [{idx:>3}] analytic {analytic:+.6e} numeric {numeric:+.6e} rel {rel:.1e}");
    }
    println!("worst relative error {worst:.2e}");
    Ok(worst)
}

fn main() -> timer_xl::Result<()> {
    run_example().map(|_| ())
}
