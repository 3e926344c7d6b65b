//! Bowen–Dinaburg entropy from separated chain sets, and the volume and
//! density growth rates that bound it.
//!
//! `N_eps(Chain_k)` is approximated by a greedy maximal `eps`-separated
//! subset of a finite chain cloud. Greedy sets are sandwiched as
//! `N_{2 eps} <= count <= N_eps`, which the entropy limit does not see.
//! The `limsup` over `k` becomes a least-squares slope over a window of
//! chain lengths, and the `eps -> 0` limit becomes a plateau rule: the
//! slope at the smallest `eps` whose run is not flagged.

use rayon::prelude::*;
use rustc_hash::FxHashMap;
use serde::{Deserialize, Serialize};
use smallvec::SmallVec;

use crate::audits::AuditReport;
use crate::dynamics::{MapHandle, MapSpec};
use crate::error::{domain, LabError, Result};
use crate::geometry::{sample_uniform, ChainMetric, ManifoldId, Point, ProductPoint};
use crate::graph_geometry::{chain_volume, local_volume, ls_slope, VolumeEstimate};
use crate::rng::SeedStream;

/// Where the base points of a chain cloud come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum BaseSource {
    /// Lattice points `i / per_axis` on the torus.
    Grid { per_axis: usize },
    /// Independent uniform samples.
    Uniform { count: usize },
}

impl BaseSource {
    pub fn count(&self, m: ManifoldId) -> usize {
        match *self {
            BaseSource::Grid { per_axis } => per_axis.pow(m.dim() as u32),
            BaseSource::Uniform { count } => count,
        }
    }
}

/// Orbit segments `(x, f x, ..., f^k_max x)` of a set of base points,
/// stored flat. Shorter chains are prefixes.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainCloud {
    manifold: ManifoldId,
    width: usize,
    k_max: usize,
    data: Vec<f64>,
}

impl ChainCloud {
    pub fn len(&self) -> usize {
        self.data.len() / (self.width * (self.k_max + 1))
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn k_max(&self) -> usize {
        self.k_max
    }

    pub fn manifold(&self) -> ManifoldId {
        self.manifold
    }

    /// Flat coordinates of chain `i` truncated to length `k`.
    pub fn chain(&self, i: usize, k: usize) -> &[f64] {
        let stride = self.width * (self.k_max + 1);
        &self.data[i * stride..i * stride + self.width * (k + 1)]
    }

    pub fn product_point(&self, i: usize, k: usize) -> ProductPoint {
        let entries = self.chain(i, k).chunks_exact(self.width).map(|c| Point::from_raw(self.manifold, c)).collect();
        ProductPoint::new(entries).expect("chain entries share the manifold")
    }

    /// Cloud from explicit base points.
    pub fn from_points(f: &MapHandle, k_max: usize, points: &[Point]) -> Result<Self> {
        let m = f.manifold();
        if points.iter().any(|p| p.manifold() != m) {
            return domain("base points are not on the map's manifold");
        }
        let width = m.ambient_dim();
        let stride = width * (k_max + 1);
        let mut data = vec![0.0; points.len() * stride];
        data.par_chunks_mut(stride).zip(points.par_iter()).for_each(|(slot, p)| fill_chain(f, p, slot));
        Ok(ChainCloud { manifold: m, width, k_max, data })
    }
}

fn fill_chain(f: &MapHandle, x: &Point, slot: &mut [f64]) {
    let mut p = x.clone();
    for c in slot.chunks_exact_mut(x.coords().len()) {
        c.copy_from_slice(p.coords());
        p = f.eval(&p);
    }
}

/// Chains of length `k` over the base points of `source`.
pub fn chain_cloud(f: &MapHandle, k: usize, source: &BaseSource, stream: SeedStream) -> Result<ChainCloud> {
    let m = f.manifold();
    let width = m.ambient_dim();
    let stride = width * (k + 1);
    let count = source.count(m);
    if count == 0 {
        return domain("chain cloud needs at least one base point");
    }
    let mut data = vec![0.0; count * stride];
    match *source {
        BaseSource::Grid { per_axis } => {
            let ManifoldId::Torus(n) = m else {
                return domain("grid base points are only available on the torus");
            };
            data.par_chunks_mut(stride).enumerate().for_each(|(i, slot)| {
                let mut c = i;
                let coords: Vec<f64> = (0..n)
                    .map(|_| {
                        let v = (c % per_axis) as f64 / per_axis as f64;
                        c /= per_axis;
                        v
                    })
                    .collect();
                fill_chain(f, &Point::from_raw(m, &coords), slot);
            });
        }
        BaseSource::Uniform { .. } => {
            data.par_chunks_mut(stride * crate::reduce::CHUNK).enumerate().for_each(|(c, block)| {
                let mut rng = stream.split(c as u64).rng();
                for slot in block.chunks_exact_mut(stride) {
                    fill_chain(f, &sample_uniform(m, &mut rng), slot);
                }
            });
        }
    }
    Ok(ChainCloud { manifold: m, width, k_max: k, data })
}

/// Outcome of one greedy packing.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeparatedSetResult {
    pub eps: f64,
    pub k: usize,
    pub count: usize,
    pub base_samples: usize,
    pub metric: ChainMetric,
    /// The count exceeds half the base samples, so the cloud no longer
    /// resolves `eps`-separation at this chain length.
    pub saturated: bool,
}

/// Cell grid on one coordinate with side at least `eps`, so points closer
/// than `eps` sit in adjacent cells.
#[derive(Debug, Clone, Copy)]
enum CellGrid {
    Torus { cells: i64 },
    Sphere { side: f64, cells: i64 },
}

impl CellGrid {
    fn new(m: ManifoldId, eps: f64) -> Self {
        match m {
            ManifoldId::Torus(_) => CellGrid::Torus { cells: ((1.0 / eps).floor() as i64).clamp(1, 1 << 20) },
            ManifoldId::Sphere2 => {
                let side = eps.min(2.0);
                CellGrid::Sphere { side, cells: (2.0 / side).floor() as i64 + 1 }
            }
        }
    }

    fn cell(&self, x: &[f64], out: &mut [i64]) {
        match *self {
            CellGrid::Torus { cells, .. } => {
                for (o, v) in out.iter_mut().zip(x) {
                    *o = ((v * cells as f64) as i64).min(cells - 1);
                }
            }
            CellGrid::Sphere { side, cells } => {
                for (o, v) in out.iter_mut().zip(x) {
                    *o = (((v + 1.0) / side) as i64).clamp(0, cells - 1);
                }
            }
        }
    }

    fn key(&self, c: &[i64]) -> u64 {
        let base = match *self {
            CellGrid::Torus { cells, .. } | CellGrid::Sphere { cells, .. } => cells as u64,
        };
        c.iter().rev().fold(0u64, |acc, &v| acc * base + v as u64)
    }

    fn own_key(&self, x: &[f64]) -> u64 {
        let mut c = [0i64; 8];
        let d = x.len();
        self.cell(x, &mut c[..d]);
        self.key(&c[..d])
    }

    /// Keys of the cell of `x` and its neighbours, without duplicates.
    fn neighbour_keys(&self, x: &[f64], out: &mut SmallVec<[u64; 27]>) {
        out.clear();
        let d = x.len();
        let mut c = [0i64; 8];
        self.cell(x, &mut c[..d]);
        let mut shift = [0i64; 8];
        let mut nb = [0i64; 8];
        let total = 3usize.pow(d as u32);
        'outer: for code in 0..total {
            let mut t = code;
            for s in shift.iter_mut().take(d) {
                *s = (t % 3) as i64 - 1;
                t /= 3;
            }
            for a in 0..d {
                let v = c[a] + shift[a];
                nb[a] = match *self {
                    CellGrid::Torus { cells, .. } => v.rem_euclid(cells),
                    CellGrid::Sphere { cells, .. } => {
                        if v < 0 || v >= cells {
                            continue 'outer;
                        }
                        v
                    }
                };
            }
            let key = self.key(&nb[..d]);
            if !out.contains(&key) {
                out.push(key);
            }
        }
    }
}

/// Cell trie over the chain coordinates, last coordinate first. A kept
/// chain is stored under the cells of all its coordinates; a query only
/// descends into neighbouring cells, so it meets just the kept chains that
/// are close in every coordinate.
struct CellTrie {
    children: FxHashMap<(u32, u64), u32>,
    leaves: Vec<Vec<u32>>,
    next_node: u32,
}

impl CellTrie {
    fn new() -> Self {
        CellTrie { children: FxHashMap::default(), leaves: Vec::new(), next_node: 1 }
    }

    fn insert(&mut self, own: &[u64], id: u32) {
        let mut node = 0u32;
        let last = own.len() - 1;
        for (level, &key) in own.iter().enumerate() {
            if level == last {
                let leaf = *self.children.entry((node, key)).or_insert_with(|| {
                    self.leaves.push(Vec::new());
                    (self.leaves.len() - 1) as u32
                });
                self.leaves[leaf as usize].push(id);
            } else {
                let next = &mut self.next_node;
                node = *self.children.entry((node, key)).or_insert_with(|| {
                    *next += 1;
                    *next - 1
                });
            }
        }
    }

    fn any_leaf(&self, node: u32, level: usize, keys: &[SmallVec<[u64; 27]>], hit: &mut dyn FnMut(&[u32]) -> bool) -> bool {
        let last = keys.len() - 1;
        for &key in &keys[level] {
            if let Some(&child) = self.children.get(&(node, key)) {
                let found = if level == last {
                    hit(&self.leaves[child as usize])
                } else {
                    self.any_leaf(child, level + 1, keys, hit)
                };
                if found {
                    return true;
                }
            }
        }
        false
    }
}

/// Greedy maximal `eps`-separated subset of the length-`k` chains, in
/// input order: a chain is kept iff it is at distance `>= eps` from every
/// chain kept before it. Returns the kept indices.
pub fn greedy_separated(cloud: &ChainCloud, k: usize, eps: f64, metric: ChainMetric) -> Result<Vec<usize>> {
    if !(eps > 0.0 && eps.is_finite()) {
        return domain(format!("separation scale must be positive, got {eps}"));
    }
    if k > cloud.k_max {
        return domain(format!("cloud holds chains up to k = {}, asked for {k}", cloud.k_max));
    }
    let m = cloud.manifold;
    let w = cloud.width;
    let grid = CellGrid::new(m, eps);
    let mut trie = CellTrie::new();
    let mut kept: Vec<usize> = Vec::new();
    let mut keys: Vec<SmallVec<[u64; 27]>> = vec![SmallVec::new(); k + 1];
    let mut own = vec![0u64; k + 1];
    for i in 0..cloud.len() {
        let x = cloud.chain(i, k);
        for (level, j) in (0..=k).rev().enumerate() {
            let c = &x[j * w..(j + 1) * w];
            grid.neighbour_keys(c, &mut keys[level]);
            own[level] = grid.own_key(c);
        }
        let mut close = |ids: &[u32]| {
            ids.iter().any(|&id| metric.chain_dist(m, x, cloud.chain(id as usize, k)) < eps)
        };
        if !trie.any_leaf(0, 0, &keys, &mut close) {
            trie.insert(&own, i as u32);
            kept.push(i);
        }
    }
    Ok(kept)
}

/// Size of the greedy maximal `eps`-separated set of length-`k` chains.
pub fn pack_separated(cloud: &ChainCloud, k: usize, eps: f64, metric: ChainMetric) -> Result<SeparatedSetResult> {
    let count = greedy_separated(cloud, k, eps, metric)?.len();
    Ok(SeparatedSetResult {
        eps,
        k,
        count,
        base_samples: cloud.len(),
        metric,
        saturated: 2 * count > cloud.len(),
    })
}

/// Entropy slope at one scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpsRun {
    pub eps: f64,
    pub runs: Vec<SeparatedSetResult>,
    /// Chain lengths used in the fit.
    pub window: Vec<usize>,
    pub slope: f64,
    /// Largest deviation of `log count` from the fitted line.
    pub residual: f64,
    /// Fewer than three resolved chain lengths were available.
    pub flagged: bool,
}

/// Default cap on `count / base samples` for a run to enter the fit.
///
/// A packing of `N` points out of `B` base points has about `B / N` base
/// points per separation ball. Once that drops to a few dozen, the
/// lattice spacing is a sizeable fraction of the pulled-back separation
/// and counts grow visibly slower than the true rate, long before the
/// 50% saturation flag trips.
pub const DEFAULT_RESOLUTION: f64 = 0.02;

/// Whether a run enters the fit: unsaturated, and `count <= resolution * base`.
pub fn is_resolved(r: &SeparatedSetResult, resolution: f64) -> bool {
    !r.saturated && r.count as f64 <= resolution * r.base_samples as f64
}

/// Least-squares fit of `log count` on `k` over the resolved runs.
pub fn fit_eps_run(eps: f64, runs: Vec<SeparatedSetResult>, resolution: f64) -> EpsRun {
    let used: Vec<&SeparatedSetResult> = runs.iter().filter(|r| is_resolved(r, resolution)).collect();
    let window: Vec<usize> = used.iter().map(|r| r.k).collect();
    let pts: Vec<(f64, f64)> = used.iter().map(|r| (r.k as f64, (r.count as f64).ln())).collect();
    let (slope, residual) = if pts.len() >= 2 {
        let xs: Vec<f64> = pts.iter().map(|p| p.0).collect();
        let ys: Vec<f64> = pts.iter().map(|p| p.1).collect();
        let s = ls_slope(&xs, &ys);
        let mx = xs.iter().sum::<f64>() / xs.len() as f64;
        let my = ys.iter().sum::<f64>() / ys.len() as f64;
        let res = pts.iter().map(|(x, y)| (y - (my + s * (x - mx))).abs()).fold(0.0, f64::max);
        (s, res)
    } else {
        (f64::NAN, f64::NAN)
    };
    EpsRun { eps, flagged: window.len() < 3, window, runs, slope, residual }
}

/// `h_eps` estimate: slope of `log N_eps(Chain_k)` over `k_range`.
pub fn h_eps_estimate(
    cloud: &ChainCloud,
    eps: f64,
    k_range: &[usize],
    metric: ChainMetric,
    resolution: f64,
) -> Result<EpsRun> {
    if k_range.len() < 3 {
        return domain("k range needs at least three values");
    }
    let runs = k_range
        .par_iter()
        .map(|&k| pack_separated(cloud, k, eps, metric))
        .collect::<Result<Vec<_>>>()?;
    Ok(fit_eps_run(eps, runs, resolution))
}

/// Topological entropy estimate with its scale sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntropyEstimate {
    pub value: f64,
    /// Scale whose slope was taken as the value.
    pub eps_used: f64,
    pub per_eps: Vec<EpsRun>,
    /// Slopes are non-decreasing as `eps` decreases (within 0.05).
    pub slopes_monotone: bool,
    pub base_samples: usize,
    pub note: String,
}

impl EntropyEstimate {
    /// One row per `(eps, k)` run: `k, eps, count, slope, residual, flags`.
    pub fn write_csv<W: std::io::Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["k", "eps", "count", "slope", "residual", "flags"])?;
        for run in &self.per_eps {
            for r in &run.runs {
                let mut flags = Vec::new();
                if r.saturated {
                    flags.push("saturated");
                } else if !run.window.contains(&r.k) {
                    flags.push("unresolved");
                }
                if run.flagged {
                    flags.push("eps_flagged");
                }
                w.write_record(&[
                    r.k.to_string(),
                    format!("{:.16e}", run.eps),
                    r.count.to_string(),
                    format!("{:.16e}", run.slope),
                    format!("{:.16e}", run.residual),
                    flags.join("|"),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Settings of a topological entropy estimate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EntropyConfig {
    pub eps: Vec<f64>,
    pub k_range: Vec<usize>,
    pub source: BaseSource,
    #[serde(default)]
    pub metric: ChainMetric,
    /// Largest `count / base samples` admitted into a slope fit.
    #[serde(default = "default_resolution")]
    pub resolution: f64,
}

fn default_resolution() -> f64 {
    DEFAULT_RESOLUTION
}

impl EntropyConfig {
    /// Desk-scale defaults: a 512^2 grid on the torus, `3 * 10^5` uniform
    /// samples on the sphere, `k = 1..=6`, `eps in {0.2, 0.1, 0.05}`.
    pub fn default_for(m: ManifoldId) -> Self {
        let source = match m {
            ManifoldId::Torus(2) => BaseSource::Grid { per_axis: 512 },
            ManifoldId::Torus(_) => BaseSource::Grid { per_axis: 64 },
            ManifoldId::Sphere2 => BaseSource::Uniform { count: 300_000 },
        };
        EntropyConfig {
            eps: vec![0.2, 0.1, 0.05],
            k_range: (1..=6).collect(),
            source,
            metric: ChainMetric::Sup,
            resolution: DEFAULT_RESOLUTION,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.eps.len() < 3 || self.eps.windows(2).any(|w| w[1] >= w[0]) || self.eps.iter().any(|e| *e <= 0.0) {
            return Err(LabError::Config("eps schedule must be positive, strictly decreasing, with at least 3 values".into()));
        }
        if !(self.resolution > 0.0 && self.resolution <= 0.5) {
            return Err(LabError::Config("resolution must lie in (0, 0.5]".into()));
        }
        if self.k_range.len() < 3 || self.k_range.windows(2).any(|w| w[1] <= w[0]) {
            return Err(LabError::Config("k range must be strictly increasing with at least 3 values".into()));
        }
        Ok(())
    }
}

/// `h(f)` by the plateau rule over the `eps` schedule.
pub fn topological_entropy_estimate(f: &MapHandle, config: &EntropyConfig, stream: SeedStream) -> Result<EntropyEstimate> {
    config.validate()?;
    let k_max = *config.k_range.last().expect("validated");
    let cloud = chain_cloud(f, k_max, &config.source, stream.split_named("base"))?;
    let pairs: Vec<(f64, usize)> =
        config.eps.iter().flat_map(|&e| config.k_range.iter().map(move |&k| (e, k))).collect();
    let runs = pairs
        .par_iter()
        .map(|&(e, k)| pack_separated(&cloud, k, e, config.metric))
        .collect::<Result<Vec<_>>>()?;
    let per_eps: Vec<EpsRun> = runs
        .chunks(config.k_range.len())
        .zip(&config.eps)
        .map(|(r, &e)| fit_eps_run(e, r.to_vec(), config.resolution))
        .collect();
    let Some(best) = per_eps.iter().rev().find(|r| !r.flagged) else {
        return Err(LabError::Budget(
            "no eps run has three resolved chain lengths; use a finer grid or more samples".into(),
        ));
    };
    let slopes: Vec<f64> = per_eps.iter().filter(|r| !r.flagged).map(|r| r.slope).collect();
    Ok(EntropyEstimate {
        value: best.slope,
        eps_used: best.eps,
        slopes_monotone: slopes.windows(2).all(|w| w[1] >= w[0] - 0.05),
        base_samples: cloud.len(),
        note: "slope of log count over the resolved chain lengths (at least 3) at the smallest eps whose run is not flagged".into(),
        per_eps,
    })
}

/// Growth rate of the chain-graph volume.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LovEstimate {
    pub slope: f64,
    pub volumes: Vec<(usize, VolumeEstimate)>,
}

/// `lov`: slope of `log vol(Chain_k)` over `k_range`.
pub fn lov_estimate(f: &MapHandle, k_range: &[usize], samples: usize, stream: SeedStream) -> Result<LovEstimate> {
    if k_range.len() < 3 {
        return domain("k range needs at least three values");
    }
    let volumes = k_range
        .iter()
        .map(|&k| Ok((k, chain_volume(f, k, samples, stream.split(k as u64))?)))
        .collect::<Result<Vec<_>>>()?;
    let xs: Vec<f64> = volumes.iter().map(|v| v.0 as f64).collect();
    let ys: Vec<f64> = volumes.iter().map(|v| v.1.value.ln()).collect();
    Ok(LovEstimate { slope: ls_slope(&xs, &ys), volumes })
}

/// Smallest sampled local volume at one chain length.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DensityRow {
    pub k: usize,
    pub min_volume: f64,
    pub stderr: f64,
    pub center: usize,
    pub flagged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LodnEstimate {
    pub eps: f64,
    pub slope: f64,
    pub rows: Vec<DensityRow>,
}

/// Minimum over `centers` of the chain volume inside the sup-metric
/// polydisc of radius `eps` about `g_k(x)`.
pub fn density_at(
    f: &MapHandle,
    k: usize,
    eps: f64,
    centers: &[Point],
    samples: usize,
    stream: SeedStream,
) -> Result<DensityRow> {
    let vols = centers
        .par_iter()
        .enumerate()
        .map(|(c, x)| local_volume(f, k, x, eps, ChainMetric::Sup, samples, stream.split(c as u64)))
        .collect::<Result<Vec<_>>>()?;
    let (center, v) = vols
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.value.total_cmp(&b.1.value))
        .expect("at least one center");
    Ok(DensityRow { k, min_volume: v.value, stderr: v.stderr, center, flagged: vols.iter().any(|v| v.flagged) })
}

/// `lodn_eps`: slope over `k_range` of the log of the smallest local
/// chain volume at scale `eps`, over `centers` uniform centers.
pub fn lodn_estimate(
    f: &MapHandle,
    eps: f64,
    k_range: &[usize],
    centers: usize,
    samples: usize,
    stream: SeedStream,
) -> Result<LodnEstimate> {
    if centers < 10 {
        return domain("lodn needs at least 10 centers");
    }
    if k_range.len() < 3 {
        return domain("k range needs at least three values");
    }
    let mut rng = stream.split_named("centers").rng();
    let pts: Vec<Point> = (0..centers).map(|_| f.sample_regular(&mut rng)).collect();
    let rows = k_range
        .iter()
        .map(|&k| density_at(f, k, eps, &pts, samples, stream.split(k as u64)))
        .collect::<Result<Vec<_>>>()?;
    let xs: Vec<f64> = rows.iter().map(|r| r.k as f64).collect();
    let ys: Vec<f64> = rows.iter().map(|r| r.min_volume.ln()).collect();
    Ok(LodnEstimate { eps, slope: ls_slope(&xs, &ys), rows })
}

/// Settings of the volume-density audit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VolumeDensityConfig {
    pub entropy: EntropyConfig,
    pub volume_samples: usize,
    pub density_centers: usize,
    pub density_samples: usize,
    pub tolerance: f64,
}

impl VolumeDensityConfig {
    pub fn default_for(m: ManifoldId) -> Self {
        VolumeDensityConfig {
            entropy: EntropyConfig::default_for(m),
            volume_samples: 20_000,
            density_centers: 10,
            density_samples: 4000,
            tolerance: 0.1,
        }
    }
}

/// One finite-`k` check of `vol(Chain_k) >= N_{2 eps} * Dens_eps`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FiniteCheck {
    pub k: usize,
    pub eps: f64,
    pub volume: f64,
    /// Greedy `2 eps`-separated count (a lower bound for `N_{2 eps}`).
    pub separated: usize,
    /// Smallest local volume about points of the separated set.
    pub density: f64,
    pub rhs: f64,
    /// Three standard errors of `volume - rhs`.
    pub slack: f64,
    pub pass: bool,
}

/// `h <= lov - lodn` at the limit level, and
/// `vol(Chain_k) >= N_{2 eps}(Chain_k) Dens_eps(Chain_k)` at every
/// unsaturated `(k, eps)` of the entropy run.
pub fn audit_volume_density(f: &MapHandle, config: &VolumeDensityConfig, stream: SeedStream) -> Result<AuditReport> {
    let ent = topological_entropy_estimate(f, &config.entropy, stream.split_named("entropy"))?;
    let k_range = &config.entropy.k_range;
    let lov = lov_estimate(f, k_range, config.volume_samples, stream.split_named("lov"))?;
    let lodn = lodn_estimate(
        f,
        ent.eps_used,
        k_range,
        config.density_centers,
        config.density_samples,
        stream.split_named("lodn"),
    )?;

    let cloud = chain_cloud(f, *k_range.last().expect("validated"), &config.entropy.source, stream.split_named("entropy").split_named("base"))?;
    let mut checks = Vec::new();
    for run in ent.per_eps.iter() {
        for &k in &run.window {
            let kept = greedy_separated(&cloud, k, 2.0 * run.eps, ChainMetric::Sup)?;
            let step = (kept.len() / config.density_centers).max(1);
            let centers: Vec<Point> = kept
                .iter()
                .step_by(step)
                .take(config.density_centers)
                .map(|&i| Point::from_raw(cloud.manifold(), &cloud.chain(i, 0)[..]))
                .collect();
            let dens = density_at(f, k, run.eps, &centers, config.density_samples, stream.split_named("finite").split(k as u64))?;
            let vol = chain_volume(f, k, config.volume_samples, stream.split_named("finite_vol").split(k as u64))?;
            let rhs = kept.len() as f64 * dens.min_volume;
            let slack = 3.0 * (vol.stderr + kept.len() as f64 * dens.stderr);
            checks.push(FiniteCheck {
                k,
                eps: run.eps,
                volume: vol.value,
                separated: kept.len(),
                density: dens.min_volume,
                rhs,
                slack,
                pass: vol.value >= rhs - slack,
            });
        }
    }
    let finite_ok = checks.iter().all(|c| c.pass);
    let cfg = serde_json::json!({ "map": MapSpec::from(f), "config": config, "seed": stream.seed() });
    Ok(AuditReport::inequality("volume_density", ent.value, lov.slope - lodn.slope, config.tolerance, &cfg)
        .and(finite_ok)
        .with_details(serde_json::json!({
            "h_estimate": ent.value,
            "eps_used": ent.eps_used,
            "lov": lov.slope,
            "lodn": lodn.slope,
            "lov_volumes": lov.volumes,
            "lodn_rows": lodn.rows,
            "finite_checks": checks,
            "finite_pass": finite_ok,
        })))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{SpherePowerMap, ToralEndo};

    fn diag(a: i64, b: i64) -> MapHandle {
        MapHandle::Toral(ToralEndo::diagonal(&[a, b]).unwrap())
    }

    fn t2(x: f64, y: f64) -> Point {
        Point::torus(&[x, y]).unwrap()
    }

    #[test]
    fn chain_cloud_examples() {
        let id = diag(1, 1);
        let c = chain_cloud(&id, 3, &BaseSource::Grid { per_axis: 4 }, SeedStream::new(1)).unwrap();
        assert_eq!(c.len(), 16);
        for i in 0..c.len() {
            let ch = c.chain(i, 3);
            assert!(ch.chunks(2).all(|p| p == &ch[..2]));
        }
        let f = diag(2, 2);
        let pts = [t2(0.3, 0.4), t2(0.9, 0.1)];
        let c = ChainCloud::from_points(&f, 1, &pts).unwrap();
        for (i, p) in pts.iter().enumerate() {
            assert_eq!(c.product_point(i, 1), f.chain_point(p, 1));
            assert_eq!(c.chain(i, 1)[2..], *f.eval(p).coords());
        }
    }

    #[test]
    fn packing_examples() {
        let pts = [t2(0.0, 0.0), t2(0.5, 0.0), t2(0.0, 0.5), t2(0.5, 0.5)];
        let c = ChainCloud::from_points(&diag(2, 2), 0, &pts).unwrap();
        assert_eq!(pack_separated(&c, 0, 0.4, ChainMetric::Sup).unwrap().count, 4);
        // the diagonal pair (0,0), (0.5,0.5) is sqrt(0.5) apart, so it
        // survives eps = 0.6; at eps = 0.75 only the first point is kept
        assert_eq!(pack_separated(&c, 0, 0.6, ChainMetric::Sup).unwrap().count, 2);
        assert_eq!(pack_separated(&c, 0, 0.75, ChainMetric::Sup).unwrap().count, 1);
    }

    /// Size of a largest `eps`-separated subset, by branch and bound.
    fn exhaustive(cloud: &ChainCloud, k: usize, eps: f64, metric: ChainMetric) -> usize {
        let n = cloud.len();
        let m = cloud.manifold();
        let adj: Vec<Vec<bool>> = (0..n)
            .map(|i| (0..n).map(|j| i != j && metric.chain_dist(m, cloud.chain(i, k), cloud.chain(j, k)) < eps).collect())
            .collect();
        // greedy clique cover: an independent set meets each clique once
        fn cover(cands: &[usize], adj: &[Vec<bool>]) -> usize {
            let mut cliques: Vec<Vec<usize>> = Vec::new();
            for &v in cands {
                match cliques.iter_mut().find(|c| c.iter().all(|&u| adj[v][u])) {
                    Some(c) => c.push(v),
                    None => cliques.push(vec![v]),
                }
            }
            cliques.len()
        }
        fn go(cands: Vec<usize>, size: usize, best: &mut usize, adj: &[Vec<bool>]) {
            if size + cands.len() <= *best || size + cover(&cands, adj) <= *best {
                return;
            }
            let Some(&v) = cands.iter().max_by_key(|&&v| cands.iter().filter(|&&u| adj[v][u]).count()) else {
                *best = (*best).max(size);
                return;
            };
            if cands.iter().all(|&u| !adj[v][u]) {
                *best = (*best).max(size + cands.len());
                return;
            }
            let with: Vec<usize> = cands.iter().copied().filter(|&u| u != v && !adj[v][u]).collect();
            go(with, size + 1, best, adj);
            let without: Vec<usize> = cands.into_iter().filter(|&u| u != v).collect();
            go(without, size, best, adj);
        }
        let mut best = 0;
        go((0..n).collect(), 0, &mut best, &adj);
        best
    }

    #[test]
    fn greedy_is_bracketed_by_exhaustive_search() {
        let f = diag(2, 2);
        let mut rng = SeedStream::new(2).rng();
        let pts: Vec<Point> = (0..60).map(|_| sample_uniform(ManifoldId::Torus(2), &mut rng)).collect();
        let c = ChainCloud::from_points(&f, 1, &pts).unwrap();
        for k in [0, 1] {
            for eps in [0.45, 0.35, 0.3] {
                let g = pack_separated(&c, k, eps, ChainMetric::Sup).unwrap().count;
                let hi = exhaustive(&c, k, eps, ChainMetric::Sup);
                let lo = exhaustive(&c, k, 2.0 * eps, ChainMetric::Sup);
                assert!(lo <= g && g <= hi, "k={k} eps={eps}: {lo} <= {g} <= {hi}");
            }
        }
    }

    #[test]
    fn greedy_matches_brute_force_greedy() {
        // same decisions as the quadratic greedy pass, on both manifolds
        // and both metrics
        for f in [diag(2, 3), MapHandle::Sphere(SpherePowerMap::new(2).unwrap())] {
            let mut rng = SeedStream::new(3).rng();
            let pts: Vec<Point> = (0..1500).map(|_| sample_uniform(f.manifold(), &mut rng)).collect();
            let c = ChainCloud::from_points(&f, 3, &pts).unwrap();
            for metric in [ChainMetric::Sup, ChainMetric::Product] {
                for eps in [0.3, 0.1, 0.05] {
                    let mut kept: Vec<usize> = Vec::new();
                    for i in 0..c.len() {
                        if kept.iter().all(|&j| metric.chain_dist(c.manifold(), c.chain(i, 3), c.chain(j, 3)) >= eps) {
                            kept.push(i);
                        }
                    }
                    assert_eq!(greedy_separated(&c, 3, eps, metric).unwrap(), kept);
                }
            }
        }
    }

    #[test]
    fn counts_fall_as_eps_grows() {
        let f = diag(2, 2);
        let c = chain_cloud(&f, 3, &BaseSource::Grid { per_axis: 64 }, SeedStream::new(1)).unwrap();
        let counts: Vec<usize> =
            [0.05, 0.07, 0.1, 0.15, 0.2, 0.3].iter().map(|&e| pack_separated(&c, 3, e, ChainMetric::Sup).unwrap().count).collect();
        assert!(counts.windows(2).all(|w| w[1] <= w[0]), "{counts:?}");
    }

    #[test]
    fn identity_has_zero_entropy() {
        let id = diag(1, 1);
        let cfg = EntropyConfig {
            eps: vec![0.2, 0.1, 0.05],
            k_range: vec![2, 3, 4, 5, 6],
            source: BaseSource::Grid { per_axis: 128 },
            metric: ChainMetric::Sup,
            resolution: DEFAULT_RESOLUTION,
        };
        let est = topological_entropy_estimate(&id, &cfg, SeedStream::new(1)).unwrap();
        assert!(est.value.abs() <= 0.01, "{est:?}");
    }

    #[test]
    fn saturated_runs_are_flagged() {
        let cfg = EntropyConfig {
            eps: vec![0.2, 0.1, 0.05],
            k_range: vec![2, 3, 4],
            source: BaseSource::Grid { per_axis: 16 },
            metric: ChainMetric::Sup,
            resolution: DEFAULT_RESOLUTION,
        };
        let err = topological_entropy_estimate(&diag(2, 2), &cfg, SeedStream::new(1)).unwrap_err();
        assert!(matches!(err, LabError::Budget(_)));
        let bad = EntropyConfig { eps: vec![0.1, 0.2, 0.05], ..cfg };
        assert!(matches!(topological_entropy_estimate(&diag(2, 2), &bad, SeedStream::new(1)), Err(LabError::Config(_))));
    }

    #[test]
    fn lov_of_doubling_and_identity() {
        let ks = [2, 3, 4, 5, 6];
        let l = lov_estimate(&diag(2, 2), &ks, 1000, SeedStream::new(1)).unwrap();
        let xs: Vec<f64> = ks.iter().map(|&k| k as f64).collect();
        let ys: Vec<f64> = ks.iter().map(|&k| ((4f64.powi(k as i32 + 1) - 1.0) / 3.0).ln()).collect();
        assert!((l.slope - ls_slope(&xs, &ys)).abs() < 1e-9);
        assert!((l.slope - 4f64.ln()).abs() < 0.05);
        // identity: volume (k + 1) is polynomial, so the slope shrinks
        // like 1/k
        let id = lov_estimate(&diag(1, 1), &[20, 40, 80], 1000, SeedStream::new(1)).unwrap();
        assert!(id.slope < 0.03);
    }

    #[test]
    fn lodn_of_doubling_is_flat() {
        let ks = [1, 2, 3, 4];
        let l = lodn_estimate(&diag(2, 2), 0.1, &ks, 10, 4000, SeedStream::new(4)).unwrap();
        for r in &l.rows {
            let want = std::f64::consts::PI * 0.01 * (4.0 - 4f64.powi(-(r.k as i32))) / 3.0;
            assert!((r.min_volume - want).abs() < 0.1 * want, "{r:?} vs {want}");
        }
        assert!(l.slope.abs() < 0.1, "{}", l.slope);
    }
}
