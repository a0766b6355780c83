// Closed-form cost of the reference configuration as the context grows,
// for channel-independent and channel-dependent attention.
//
// `cargo run --example complexity_table`

use timer_xl::complexity::{complexity_table, write_table_csv, ComplexityRow};
use timer_xl::model::ModelConfig;

pub fn run_example() -> timer_xl::Result<Vec<ComplexityRow>> {
    let config = ModelConfig::timer_xl(4, 512, 8, 96);
    let rows = complexity_table(&config, 7, &[1, 7, 30, 100]);
    write_table_csv(&rows, std::io::stdout().lock())?;
    Ok(rows)
}

fn main() -> timer_xl::Result<()> {
    run_example().map(|_| ())
}
