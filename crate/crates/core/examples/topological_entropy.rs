//! Separated-set estimates of topological entropy, compared with `log deg f`.
//!
//! ```bash
//! cargo run --release --example topological_entropy
//! ```

use uqr_lab::dynamics::{MapHandle, ToralEndo};
use uqr_lab::entropy_top::{topological_entropy_estimate, BaseSource, EntropyConfig};
use uqr_lab::SeedStream;

fn main() -> uqr_lab::Result<()> {
    for (name, f) in [
        ("2Id", MapHandle::Toral(ToralEndo::diagonal(&[2, 2])?)),
        ("identity", MapHandle::Toral(ToralEndo::identity(2)?)),
    ] {
        // a coarser grid than the default keeps this quick
        let mut config = EntropyConfig::default_for(f.manifold());
        config.source = BaseSource::Grid { per_axis: 384 };
        let est = topological_entropy_estimate(&f, &config, SeedStream::new(5))?;
        println!("{name}: h = {:.4} at eps {} (log deg = {:.4})", est.value, est.eps_used, (f.degree() as f64).ln());
        for run in &est.per_eps {
            let counts: Vec<usize> = run.runs.iter().map(|r| r.count).collect();
            println!("  eps {:<5} counts {counts:?} window {:?} slope {:.4}{}", run.eps, run.window, run.slope, if run.flagged { " (flagged)" } else { "" });
        }
    }
    Ok(())
}
