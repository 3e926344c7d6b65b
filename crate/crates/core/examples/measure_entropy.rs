//! Lower bound and Kolmogorov–Sinai estimate of the entropy of the
//! balanced measure.
//!
//! ```bash
//! cargo run --release --example measure_entropy
//! ```

use uqr_lab::audits::reference_balanced_measure;
use uqr_lab::dynamics::{MapHandle, SpherePowerMap, ToralEndo};
use uqr_lab::entropy_measure::{entropy_lower_bound_report, ks_entropy_estimate, PartitionSpec};
use uqr_lab::geometry::Point;
use uqr_lab::measures::{balanced_iterate, EmpiricalMeasure};
use uqr_lab::SeedStream;

fn main() -> uqr_lab::Result<()> {
    let f = MapHandle::Toral(ToralEndo::diagonal(&[2, 3])?);
    let mu = reference_balanced_measure(&f, 1_000_000, SeedStream::new(3))?;
    let lower = entropy_lower_bound_report(&f, &mu, 0.02)?;
    let ks = ks_entropy_estimate(&f, &mu, PartitionSpec::Dyadic { depth: 3 }, 4)?;
    println!("diag(2,3): bound {:.6}, KS {:.4}, log 6 = {:.4}", lower.bound, ks.value, 6f64.ln());
    println!("  conditional entropies {:?}", ks.sequence.iter().map(|h| format!("{h:.4}")).collect::<Vec<_>>());

    // The branch term: a Dirac mass at the fixed critical point gives 0.
    let s = MapHandle::Sphere(SpherePowerMap::new(2)?);
    let dirac = entropy_lower_bound_report(&s, &EmpiricalMeasure::dirac(&Point::north_pole()), 0.02)?;
    let tree = entropy_lower_bound_report(&s, &balanced_iterate(&s, 8, 1000, SeedStream::new(4), 10_000_000)?, 0.02)?;
    println!("z^2: Dirac at a pole {:.3}, balanced measure {:.6} (log 2 = {:.6})", dirac.bound, tree.bound, 2f64.ln());
    Ok(())
}
