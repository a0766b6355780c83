// Builds the flat token mask for two variables of three tokens and lists
// what each token may attend to.
//
// `cargo run --example mask_kronecker`

use std::collections::BTreeSet;

use timer_xl::masking::{build_temporal_mask, dependency_oracle, kronecker_mask, VariableDependencyGraph};

/// Sources (1-based) of every destination token, plus a check that the
/// Kronecker construction agrees with the pairwise definition.
pub fn run_example() -> timer_xl::Result<Vec<Vec<usize>>> {
    let (n, t) = (2, 3);
    let c = VariableDependencyGraph::full(n)?;
    let temporal = build_temporal_mask(t, true)?;
    let flat = kronecker_mask(&c, &temporal);

    let mut pairs = BTreeSet::new();
    for dst in 1..=n * t {
        for src in flat.sources_of(dst) {
            pairs.insert((dst, src));
        }
    }
    assert_eq!(pairs, dependency_oracle(&c, &temporal));

    for row in flat.additive::<f64>().data().chunks(n * t) {
        let cells: Vec<String> = row.iter().map(|&x| if x == 0.0 { "0".into() } else { "-inf".into() }).collect();
        println!("{}", cells.join("\t"));
    }
    let sources: Vec<Vec<usize>> = (1..=n * t).map(|k| flat.sources_of(k)).collect();
    for (k, s) in sources.iter().enumerate() {
        println!("token {} <- {:?}", k + 1, s);
    }
    Ok(sources)
}

fn main() -> timer_xl::Result<()> {
    run_example().map(|_| ())
}
