//! Volumes of the chain graphs `{(x, f x, ..., f^k x)}` and their growth rate.
//!
//! For `2 Id` the Jacobian of the chain map is constant, so the Monte
//! Carlo estimate is exact: `vol = 1 + 4 + ... + 4^k`.
//!
//! ```bash
//! cargo run --release --example chain_volume
//! ```

use uqr_lab::dynamics::{MapHandle, SpherePowerMap, ToralEndo};
use uqr_lab::entropy_top::lov_estimate;
use uqr_lab::graph_geometry::{chain_volume, check_pointwise_bound, iterate_components};
use uqr_lab::SeedStream;

fn main() -> uqr_lab::Result<()> {
    let f = MapHandle::Toral(ToralEndo::diagonal(&[2, 2])?);
    for k in 0..=4 {
        let v = chain_volume(&f, k, 1000, SeedStream::new(k as u64))?;
        let exact: f64 = (0..=k).map(|j| 4f64.powi(j as i32)).sum();
        println!("k={k}: volume {:.10} exact {exact}", v.value);
    }
    let lov = lov_estimate(&f, &[2, 3, 4, 5, 6], 1000, SeedStream::new(9))?;
    println!("lov slope {:.4} (log 4 = {:.4})", lov.slope, 4f64.ln());

    let s = MapHandle::Sphere(SpherePowerMap::new(2)?);
    let report = check_pointwise_bound(&iterate_components(&s, 3), 10_000, SeedStream::new(10))?;
    println!("pointwise Jacobian bound on z^2, (f, f^2, f^3): pass = {}", report.pass);
    Ok(())
}
