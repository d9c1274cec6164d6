//! The accuracy-comparison report: published reference figures for
//! foggy-image detectors rendered as a table, with an optional measured
//! detection time attached to this configuration's row.
//!
//! Usage: cargo run --release --example comparison_report -- [TIMING_MS]

use fogdet::evalbench::{comparison_table, parse_comparison_table, reference_rows};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let timing_ms: Option<f64> = match std::env::args().nth(1) {
        Some(s) => Some(s.parse()?),
        None => None,
    };

    let mut rows = reference_rows();
    if let Some(t) = timing_ms {
        rows.last_mut().expect("reference rows are never empty").timing_ms = Some(t);
    }

    let text = comparison_table(&rows)?;
    print!("{text}");

    let parsed = parse_comparison_table(&text)?;
    assert_eq!(parsed, rows);
    println!();
    println!("(the text table parses back to the identical rows)");
    Ok(())
}
