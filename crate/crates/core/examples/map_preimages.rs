//! Degree, preimages and local indices of the three map families.
//!
//! ```bash
//! cargo run --example map_preimages
//! ```

use uqr_lab::dynamics::{MapSpec, SpherePowerMap, MapHandle};
use uqr_lab::geometry::{dist, sample_uniform, Point};
use uqr_lab::SeedStream;

fn main() -> uqr_lab::Result<()> {
    let specs = [
        r#"{"family":"toral_endo","matrix":[[2,0],[0,3]]}"#,
        r#"{"family":"toral_endo","matrix":[[2,1],[0,2]]}"#,
        r#"{"family":"sheared_endo","matrix":[[2,0],[0,2]],"amplitude":0.1}"#,
        r#"{"family":"sphere_power","degree":3}"#,
    ];
    let mut rng = SeedStream::new(11).rng();
    for spec in specs {
        let f = serde_json::from_str::<MapSpec>(spec)?.build()?;
        let y = sample_uniform(f.manifold(), &mut rng);
        let pre = f.preimages(&y)?;
        let index_sum: u32 = pre.iter().map(|(_, i)| i).sum();
        let worst = pre.iter().map(|(x, _)| dist(&f.eval(x), &y)).collect::<uqr_lab::Result<Vec<_>>>()?;
        println!(
            "{:<13} deg {}  preimages {}  index sum {}  max |f(x) - y| {:.1e}",
            f.family(),
            f.degree(),
            pre.len(),
            index_sum,
            worst.iter().copied().fold(0.0, f64::max)
        );
    }

    // At a pole of z^d the whole degree sits on one preimage.
    let f = MapHandle::Sphere(SpherePowerMap::new(3)?);
    let pre = f.preimages(&Point::north_pole())?;
    println!("z^3 over the north pole: {:?}", pre.iter().map(|(_, i)| *i).collect::<Vec<_>>());
    Ok(())
}
