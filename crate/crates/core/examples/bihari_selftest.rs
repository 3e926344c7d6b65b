//! Randomized check of the Bihari–LaSalle inequality on sampled
//! functions satisfying its integral hypothesis.
//!
//! ```bash
//! cargo run --example bihari_selftest
//! ```

use uqr_lab::audits::{bihari_check, bihari_instance, bihari_selftest};
use uqr_lab::SeedStream;

fn main() -> uqr_lab::Result<()> {
    let mut rng = SeedStream::new(4).rng();
    let inst = bihari_instance(3, &mut rng);
    let one = bihari_check(&inst.g, inst.a, inst.c, 3)?;
    println!("one instance (a {:.3}, c {:.3}, {} points): pass {}", inst.a, inst.c, inst.g.len(), one.pass);
    let all = bihari_selftest(100, SeedStream::new(5))?;
    println!("{}", serde_json::to_string_pretty(&all)?);
    Ok(())
}
