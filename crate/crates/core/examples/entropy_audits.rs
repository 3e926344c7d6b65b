//! The entropy audits on a sheared toral map, which is uniformly
//! quasiregular but not linear.
//!
//! ```bash
//! cargo run --release --example entropy_audits
//! ```

use uqr_lab::audits::{audit_upper_bound, distortion_growth, DistortionConfig, UpperBoundConfig};
use uqr_lab::dynamics::{MapHandle, ShearProfile, ShearedEndo, ToralEndo};
use uqr_lab::entropy_top::{audit_volume_density, VolumeDensityConfig};
use uqr_lab::SeedStream;

fn main() -> uqr_lab::Result<()> {
    let f = MapHandle::Sheared(ShearedEndo::new(ToralEndo::diagonal(&[2, 2])?, 0.1, ShearProfile::Sin)?);
    let growth = distortion_growth(&f, &DistortionConfig::default(), SeedStream::new(1))?;
    println!("log K(f^k): {:?}, slope {:.5}", growth.log_k.iter().map(|v| format!("{v:.4}")).collect::<Vec<_>>(), growth.slope);

    let upper = audit_upper_bound(&f, &UpperBoundConfig::default_for(&f), SeedStream::new(2))?;
    println!("upper bound: h {:.4} <= {:.4} + {}: {}", upper.lhs, upper.rhs, upper.tolerance, upper.pass);

    let vd = audit_volume_density(&f, &VolumeDensityConfig::default_for(f.manifold()), SeedStream::new(3))?;
    println!("volume density: h {:.4} <= lov - lodn {:.4} + {}: {}", vd.lhs, vd.rhs, vd.tolerance, vd.pass);
    Ok(())
}
