//! Volumes of chain graphs.
//!
//! The chain map `g_k = (id, f, ..., f^k)` embeds `M` as an `n`-dimensional
//! graph in the product `M^{k+1}`. Its Hausdorff volume is computed on the
//! pulled-back side with the area formula: `g_k` is injective, so the
//! volume of `g_k(A)` is the integral of the `n`-Jacobian
//! `|J_g| = sqrt(det sum_j (Df^j)^T Df^j)` over `A`.
//!
//! Volumes use the normalized measure of `M` (total mass 1); multiply by
//! [`VolumeEstimate::riemannian_factor`] for Riemannian units.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::audits::AuditReport;
use crate::dynamics::{matrix_distortion, MapHandle, MapSpec};
use crate::error::{domain, LabError, Result};
use crate::geometry::{coord_dist, sample_ball, sample_uniform, ChainMetric, ManifoldId, Point, ProductPoint};
use crate::reduce::det_vec_sum_by;
use crate::rng::SeedStream;

/// A Monte Carlo volume with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VolumeEstimate {
    pub value: f64,
    pub stderr: f64,
    pub samples: usize,
    /// Samples that contributed a non-zero term.
    pub hits: usize,
    /// Set when the standard error exceeds 10% of the value.
    pub flagged: bool,
    /// Riemannian volume of `M`; 1 on the torus, `4 pi` on the sphere.
    pub riemannian_factor: f64,
}

impl VolumeEstimate {
    fn new(m: ManifoldId, value: f64, stderr: f64, samples: usize, hits: usize) -> Self {
        VolumeEstimate {
            value,
            stderr,
            samples,
            hits,
            flagged: stderr > 0.1 * value.abs(),
            riemannian_factor: m.riemannian_volume(),
        }
    }
}

/// `Df^j(x)` for `j = 0..=k`.
pub fn chain_differentials(f: &MapHandle, x: &Point, k: usize) -> Vec<DMatrix<f64>> {
    let n = f.dim();
    let mut out = Vec::with_capacity(k + 1);
    out.push(DMatrix::identity(n, n));
    let mut p = x.clone();
    for _ in 0..k {
        let next = f.differential(&p) * out.last().expect("non-empty");
        out.push(next);
        p = f.eval(&p);
    }
    out
}

/// `sqrt(det sum_j D_j^T D_j)` for a stack of differentials.
pub fn gram_jacobian(ds: &[DMatrix<f64>]) -> f64 {
    let n = ds[0].ncols();
    let g = ds.iter().fold(DMatrix::zeros(n, n), |acc, d| acc + d.transpose() * d);
    g.determinant().max(0.0).sqrt()
}

/// `n`-Jacobian of `g_k = (id, f, ..., f^k)` at `x`.
pub fn n_jacobian(f: &MapHandle, k: usize, x: &Point) -> f64 {
    gram_jacobian(&chain_differentials(f, x, k))
}

/// Mean and standard error from a sum and a sum of squares.
fn mean_stderr(sum: f64, sum2: f64, n: usize) -> (f64, f64) {
    let nf = n as f64;
    let mean = sum / nf;
    let var = if n > 1 { ((sum2 - nf * mean * mean) / (nf - 1.0)).max(0.0) } else { 0.0 };
    (mean, (var / nf).sqrt())
}

/// Volume of the chain graph, `∫ |J_g| dvol`, by plain Monte Carlo.
pub fn chain_volume(f: &MapHandle, k: usize, samples: usize, stream: SeedStream) -> Result<VolumeEstimate> {
    if samples < 1000 {
        return domain(format!("chain_volume needs at least 1000 samples, got {samples}"));
    }
    let m = f.manifold();
    let sums = det_vec_sum_by(samples, 2, |i, out| {
        let x = sample_uniform(m, &mut stream.split(i as u64).rng());
        let j = n_jacobian(f, k, &x);
        out[0] += j;
        out[1] += j * j;
    });
    let (mean, se) = mean_stderr(sums[0], sums[1], samples);
    Ok(VolumeEstimate::new(m, mean, se, samples, samples))
}

fn flat_chain(f: &MapHandle, x: &Point, k: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity((k + 1) * x.coords().len());
    let mut p = x.clone();
    out.extend_from_slice(p.coords());
    for _ in 0..k {
        p = f.eval(&p);
        out.extend_from_slice(p.coords());
    }
    out
}

fn covers(m: ManifoldId, r: f64) -> bool {
    m.ball_volume(r) >= 1.0
}

/// Largest stretching of `g_k` in the given metric near `x`, estimated
/// from the operator norms of `Df^j` at `x` and a few points around it.
fn expansion(f: &MapHandle, k: usize, x: &Point, r: f64, metric: ChainMetric, stream: SeedStream) -> f64 {
    let mut rng = stream.rng();
    let mut best: f64 = 1.0;
    for s in 0..9 {
        let p = if s == 0 { x.clone() } else { sample_ball(x, r, &mut rng) };
        let norms = chain_differentials(f, &p, k)
            .into_iter()
            .map(|d| d.svd(false, false).singular_values.max());
        let lam = match metric {
            ChainMetric::Sup => norms.fold(0.0, f64::max),
            ChainMetric::Product => norms.map(|v| v * v).sum::<f64>().sqrt(),
        };
        best = best.max(lam);
    }
    best
}

/// Volumes of `Gamma ∩ B(g_k(x0), r)` for every `r` in `radii`, from one
/// shared importance sample, so the profile is exactly non-decreasing in
/// `r`.
///
/// Since the first chain coordinate is the identity, the ball pulls back
/// into the geodesic ball `B(x0, r_max)`. The proposal is a fixed mixture
/// of uniform distributions on `B(x0, r_max / 2^i)`, with 10% of the
/// samples on the outermost ball and the inner radii reaching below
/// `r_min / Lambda` for the sampled expansion `Lambda` of `g_k`. Terms are
/// weighted by the inverse mixture density, which keeps the estimator
/// unbiased.
pub fn local_volume_profile(
    f: &MapHandle,
    k: usize,
    x0: &Point,
    radii: &[f64],
    metric: ChainMetric,
    samples: usize,
    stream: SeedStream,
) -> Result<Vec<VolumeEstimate>> {
    let m = f.manifold();
    if x0.manifold() != m {
        return domain("center is not on the map's manifold");
    }
    if radii.is_empty() || radii.iter().any(|r| !(*r > 0.0 && r.is_finite())) {
        return domain("radii must be positive and finite");
    }
    if samples < 10 {
        return domain("local_volume needs at least 10 samples");
    }
    let r_max = radii.iter().copied().fold(0.0, f64::max);
    let r_min = radii.iter().copied().fold(f64::INFINITY, f64::min);
    let lambda = expansion(f, k, x0, r_min, metric, stream.split_named("expansion"));
    let levels = ((r_max * lambda / r_min).log2().ceil() as usize).clamp(1, 40);
    let shells: Vec<f64> = (0..=levels).map(|i| r_max / 2f64.powi(i as i32)).collect();

    let outer = (samples / 10).max(1);
    let inner = samples - outer;
    let mut counts = vec![outer];
    for i in 0..levels {
        counts.push(inner / levels + usize::from(i < inner % levels));
    }
    let probs: Vec<f64> = counts.iter().map(|&c| c as f64 / samples as f64).collect();
    let vols: Vec<f64> = shells.iter().map(|&r| m.ball_volume(r)).collect();
    let density = |x: &Point| -> f64 {
        let d = coord_dist(m, x.coords(), x0.coords());
        shells
            .iter()
            .zip(probs.iter().zip(&vols))
            .filter(|(r, _)| covers(m, **r) || d < **r)
            .map(|(_, (p, v))| p / v)
            .sum()
    };

    let y = flat_chain(f, x0, k);
    let nr = radii.len();
    let mut sums = vec![0.0; nr];
    let mut var = vec![0.0; nr];
    let mut hits = vec![0usize; nr];
    let strata = stream.split_named("strata");
    for (s, (&count, &radius)) in counts.iter().zip(&shells).enumerate() {
        if count == 0 {
            continue;
        }
        let st = strata.split(s as u64);
        // per radius: sum, sum of squares, hit count
        let acc = det_vec_sum_by(count, 3 * nr, |i, out| {
            let x = sample_ball(x0, radius, &mut st.split(i as u64).rng());
            let d = metric.chain_dist(m, &flat_chain(f, &x, k), &y);
            if d >= r_max {
                return;
            }
            let term = n_jacobian(f, k, &x) / density(&x);
            for (j, &r) in radii.iter().enumerate() {
                if d < r {
                    out[3 * j] += term;
                    out[3 * j + 1] += term * term;
                    out[3 * j + 2] += 1.0;
                }
            }
        });
        for j in 0..nr {
            let (mean, se) = mean_stderr(acc[3 * j], acc[3 * j + 1], count);
            let w = count as f64 / samples as f64;
            sums[j] += w * mean;
            var[j] += w * w * se * se;
            hits[j] += acc[3 * j + 2] as usize;
        }
    }
    radii
        .iter()
        .enumerate()
        .map(|(j, &r)| {
            if hits[j] == 0 {
                return Err(LabError::Budget(format!(
                    "no sample landed in the chain ball of radius {r}; use a larger radius or more samples"
                )));
            }
            Ok(VolumeEstimate::new(m, sums[j], var[j].sqrt(), samples, hits[j]))
        })
        .collect()
}

/// Volume of `Gamma ∩ B(g_k(x0), r)` in the given metric.
pub fn local_volume(
    f: &MapHandle,
    k: usize,
    x0: &Point,
    r: f64,
    metric: ChainMetric,
    samples: usize,
    stream: SeedStream,
) -> Result<VolumeEstimate> {
    Ok(local_volume_profile(f, k, x0, &[r], metric, samples, stream)?[0])
}

/// One row of an Ahlfors scan.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AhlforsRow {
    pub center: usize,
    pub r: f64,
    pub volume: f64,
    pub stderr: f64,
    pub ratio: f64,
    pub flagged: bool,
}

/// Volume growth of product-metric balls about chain points.
#[derive(Debug, Clone, PartialEq)]
pub struct AhlforsScan {
    pub k: usize,
    pub centers: Vec<ProductPoint>,
    pub radii: Vec<f64>,
    pub rows: Vec<AhlforsRow>,
    /// Mean over centers of the least-squares slope of `log V` on `log r`.
    pub slope: f64,
    pub center_slopes: Vec<f64>,
    /// Largest max/min ratio of `V / r^n` over the radii, across centers.
    pub spread: f64,
    pub pass: bool,
}

impl AhlforsScan {
    pub fn write_csv<W: std::io::Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["center", "r", "volume", "stderr", "ratio", "flagged"])?;
        for row in &self.rows {
            w.write_record(&[
                row.center.to_string(),
                format!("{:.16e}", row.r),
                format!("{:.16e}", row.volume),
                format!("{:.16e}", row.stderr),
                format!("{:.16e}", row.ratio),
                row.flagged.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Least-squares slope of `ys` on `xs`.
pub fn ls_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    sxy / sxx
}

/// Scan `V(r) = vol(Gamma ∩ B(g_k(x), r))` over centers and strictly
/// decreasing radii. Passes when the log-log slope is within `n ± 0.2`
/// and `V / r^n` varies by at most `spread_bound` (as a max/min ratio)
/// about every center.
pub fn ahlfors_scan(
    f: &MapHandle,
    k: usize,
    centers: &[Point],
    radii: &[f64],
    samples: usize,
    spread_bound: f64,
    stream: SeedStream,
) -> Result<AhlforsScan> {
    if radii.len() < 2 || radii.windows(2).any(|w| w[1] >= w[0]) {
        return domain("Ahlfors radii must be strictly decreasing with at least two values");
    }
    let m = f.manifold();
    let diam = m.diameter() * ((k + 1) as f64).sqrt();
    if radii[0] > diam || radii[radii.len() - 1] <= 0.0 {
        return domain(format!("Ahlfors radii must lie in (0, {diam}]"));
    }
    if centers.is_empty() {
        return domain("Ahlfors scan needs at least one center");
    }
    let profiles: Vec<Result<Vec<VolumeEstimate>>> = centers
        .par_iter()
        .enumerate()
        .map(|(c, x)| local_volume_profile(f, k, x, radii, ChainMetric::Product, samples, stream.split(c as u64)))
        .collect();
    let n = m.dim() as i32;
    let mut rows = Vec::new();
    let mut center_slopes = Vec::new();
    let mut spread: f64 = 1.0;
    let log_r: Vec<f64> = radii.iter().map(|r| r.ln()).collect();
    for (c, prof) in profiles.into_iter().enumerate() {
        let prof = prof?;
        let ratios: Vec<f64> = prof.iter().zip(radii).map(|(v, r)| v.value / r.powi(n)).collect();
        for ((v, &r), &ratio) in prof.iter().zip(radii).zip(&ratios) {
            rows.push(AhlforsRow { center: c, r, volume: v.value, stderr: v.stderr, ratio, flagged: v.flagged });
        }
        let log_v: Vec<f64> = prof.iter().map(|v| v.value.ln()).collect();
        center_slopes.push(ls_slope(&log_r, &log_v));
        let hi = ratios.iter().copied().fold(0.0, f64::max);
        let lo = ratios.iter().copied().fold(f64::INFINITY, f64::min);
        spread = spread.max(hi / lo);
    }
    let slope = center_slopes.iter().sum::<f64>() / center_slopes.len() as f64;
    let pass = (slope - n as f64).abs() <= 0.2 && spread <= spread_bound;
    Ok(AhlforsScan {
        k,
        centers: centers.iter().map(|x| f.chain_point(x, k)).collect(),
        radii: radii.to_vec(),
        rows,
        slope,
        center_slopes,
        spread,
        pass,
    })
}

/// One component `f_j = map^power` of a map into a product.
#[derive(Debug, Clone, PartialEq)]
pub struct Component {
    pub map: MapHandle,
    pub power: usize,
}

impl Component {
    fn differential(&self, x: &Point) -> DMatrix<f64> {
        self.map.iterate_differential(x, self.power)
    }

    fn analytic_bound(&self) -> Option<f64> {
        if self.power == 0 {
            Some(1.0)
        } else {
            self.map.uniform_distortion_bound()
        }
    }
}

/// The components `f, f^2, ..., f^k` of the chain map (without the
/// identity).
pub fn iterate_components(f: &MapHandle, k: usize) -> Vec<Component> {
    (1..=k).map(|p| Component { map: f.clone(), power: p }).collect()
}

/// Check `|J_g| <= n^{n/2} K k^{n/2 - 1} sum_j J_{f_j}` for
/// `g = (f_1, ..., f_k)` at uniform samples, with `K` the larger of the
/// sampled distortion and any analytic bound. Violations beyond `1e-9`
/// fail the report.
pub fn check_pointwise_bound(components: &[Component], samples: usize, stream: SeedStream) -> Result<AuditReport> {
    if components.is_empty() || samples == 0 {
        return domain("pointwise bound needs components and samples");
    }
    let m = components[0].map.manifold();
    if components.iter().any(|c| c.map.manifold() != m) {
        return domain("components act on different manifolds");
    }
    let n = m.dim() as f64;
    let k = components.len() as f64;
    // (|J_g|, sum of J_{f_j}, largest pointwise distortion) per sample
    let rows: Vec<(f64, f64, f64)> = (0..samples)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream.split(i as u64).rng();
            loop {
                let x = sample_uniform(m, &mut rng);
                let ds: Vec<DMatrix<f64>> = components.iter().map(|c| c.differential(&x)).collect();
                let dist: Option<Vec<f64>> = ds.iter().map(matrix_distortion).collect();
                if let Some(dist) = dist {
                    let sum_j: f64 = ds.iter().map(|d| d.determinant()).sum();
                    break (gram_jacobian(&ds), sum_j, dist.into_iter().fold(1.0, f64::max));
                }
            }
        })
        .collect();
    let sampled_k = rows.iter().map(|r| r.2).fold(1.0, f64::max);
    let analytic = components.iter().map(Component::analytic_bound).try_fold(1.0f64, |a, b| b.map(|b| a.max(b)));
    let big_k = analytic.map_or(sampled_k, |a| a.max(sampled_k));
    let factor = n.powf(n / 2.0) * big_k * k.powf(n / 2.0 - 1.0);
    let mut worst = f64::NEG_INFINITY;
    let mut worst_ratio: f64 = 0.0;
    let mut violations = 0usize;
    for &(jg, sum_j, _) in &rows {
        let bound = factor * sum_j;
        worst = worst.max(jg - bound);
        worst_ratio = worst_ratio.max(jg / bound);
        if jg > bound + 1e-9 {
            violations += 1;
        }
    }
    let config = serde_json::json!({
        "components": components.iter().map(|c| (MapSpec::from(&c.map), c.power)).collect::<Vec<_>>(),
        "samples": samples,
        "seed": stream.seed(),
    });
    Ok(AuditReport::inequality("pointwise_jacobian_bound", worst, 0.0, 1e-9, &config)
        .and(violations == 0)
        .with_details(serde_json::json!({
            "K": big_k,
            "K_sampled": sampled_k,
            "K_analytic": analytic,
            "violations": violations,
            "samples": samples,
            "max_ratio": worst_ratio,
        })))
}
