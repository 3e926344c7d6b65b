//! Ahlfors regularity scan: `vol(B(x, r) ∩ Chain_k) / r^n` over radii.
//!
//! ```bash
//! cargo run --release --example ahlfors_scan
//! ```

use uqr_lab::dynamics::{MapHandle, SpherePowerMap};
use uqr_lab::graph_geometry::ahlfors_scan;
use uqr_lab::SeedStream;

fn main() -> uqr_lab::Result<()> {
    let f = MapHandle::Sphere(SpherePowerMap::new(2)?);
    let mut rng = SeedStream::new(1).rng();
    let centers: Vec<_> = (0..4).map(|_| f.sample_regular(&mut rng)).collect();
    let radii: Vec<f64> = (0..8).map(|i| 0.3 * (0.01f64 / 0.3).powf(i as f64 / 7.0)).collect();
    let scan = ahlfors_scan(&f, 2, &centers, &radii, 5000, 1.5, SeedStream::new(2))?;
    println!("slope {:.4} (n = 2), ratio spread {:.3}, pass {}", scan.slope, scan.spread, scan.pass);
    scan.write_csv(std::io::stdout())
}
