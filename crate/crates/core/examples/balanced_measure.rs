//! Preimage-tree approximations of the balanced measure.
//!
//! On the torus the measure is Lebesgue measure; on the sphere it
//! concentrates on the unit circle, the Julia set of `z^2`.
//!
//! ```bash
//! cargo run --release --example balanced_measure
//! ```

use uqr_lab::dynamics::{MapHandle, SpherePowerMap, ToralEndo};
use uqr_lab::measures::{
    balanced_iterate, balancedness_residual, box_mass, pole_mass_table, DefaultFamily, Region,
};
use uqr_lab::SeedStream;

fn main() -> uqr_lab::Result<()> {
    let torus = MapHandle::Toral(ToralEndo::diagonal(&[2, 2])?);
    let mu = balanced_iterate(&torus, 4, 2000, SeedStream::new(1), 10_000_000)?;
    let quarter = Region::TorusBox { lo: vec![0.25, 0.5], hi: vec![0.5, 0.75] };
    let r = balancedness_residual(&torus, &mu, &DefaultFamily::for_manifold(torus.manifold()))?;
    println!("2Id, k=4: {} atoms, box mass {:.6} (1/16 = 0.0625), residual {:.1e}", mu.len(), box_mass(&mu, &quarter), r.value);

    let sphere = MapHandle::Sphere(SpherePowerMap::new(2)?);
    let mu = balanced_iterate(&sphere, 8, 1000, SeedStream::new(2), 10_000_000)?;
    let band = box_mass(&mu, &Region::EquatorBand { chordal: 0.1 });
    println!("z^2, k=8: {} atoms, mass within 0.1 of the equator {band:.8}", mu.len());
    for (r, m) in pole_mass_table(&mu, &[0.5, 0.1, 0.01])? {
        println!("  pole caps of chordal radius {r}: {m:.3e}");
    }
    Ok(())
}
