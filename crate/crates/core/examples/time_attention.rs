// One TimeAttention layer on random tokens, printing each head's
// attention map. Masked entries come out as exact zeros.
//
// `cargo run --example time_attention`

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use timer_xl::attention::{time_attention, AttentionParams, AttentionSettings, PreparedMask, DEFAULT_THETA_BASE};
use timer_xl::autodiff::Tape;
use timer_xl::masking::{build_temporal_mask, kronecker_mask, VariableDependencyGraph};
use timer_xl::tensor::Tensor;

/// Returns the `[H, NT, NT]` attention probabilities.
pub fn run_example() -> timer_xl::Result<Tensor<f64>> {
    let (n, t, d, heads) = (2, 3, 8, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut rand_t = |shape: &[usize]| Tensor::<f64>::from_fn(shape, |_| rng.random_range(-0.5..0.5));

    let mask = PreparedMask::new(kronecker_mask(
        &VariableDependencyGraph::full(n)?,
        &build_temporal_mask(t, true)?,
    ));
    let mut tape = Tape::new();
    let h = tape.constant(rand_t(&[n * t, d]));
    let params = AttentionParams {
        w_q: tape.param(rand_t(&[d, d])),
        w_k: tape.param(rand_t(&[d, d])),
        w_v: tape.param(rand_t(&[d, d])),
        w_o: tape.param(rand_t(&[d, d])),
        u: Some(tape.param(Tensor::from_f64(&[heads], &[0.3, -0.3])?)),
        v: Some(tape.param(Tensor::zeros(&[heads]))),
    };
    let settings = AttentionSettings {
        heads,
        theta_base: DEFAULT_THETA_BASE,
        use_rope: true,
    };
    let out = time_attention(&mut tape, h, &mask, &params, &settings)?;
    let probs = tape.value(out.probs).clone();
    for (head, map) in probs.data().chunks(n * t * n * t).enumerate() {
        println!("head {head}");
        for row in map.chunks(n * t) {
            let cells: Vec<String> = row.iter().map(|p| format!("{p:.3}")).collect();
            println!("  {}", cells.join(" "));
        }
    }
    Ok(probs)
}

fn main() -> timer_xl::Result<()> {
    run_example().map(|_| ())
}
