//! Drive an experiment through the same configuration path as the
//! `uqr-lab` binary, without writing files.
//!
//! ```bash
//! cargo run --release --example run_config
//! ```

use uqr_lab::cli::{execute, RunConfig};

fn main() -> uqr_lab::Result<()> {
    let config = RunConfig::from_json(
        r#"{
            "experiment": "balanced-measure",
            "seed": 2024,
            "map": { "family": "sphere_power", "degree": 2 },
            "budgets": { "balanced": { "k": 6, "m": 500, "atom_cap": 1000000 } }
        }"#,
    )?;
    let resolved = config.resolve()?;
    let out = execute(&resolved)?;
    print!("{}", String::from_utf8_lossy(&out.csv));
    println!("verdict: {}", out.report.verdict);
    Ok(())
}
