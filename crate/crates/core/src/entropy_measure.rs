//! Measure-theoretic entropy: the Jacobian `deg f / i(x, f)`, the
//! lower bound `log deg f - ∫ log i dμ`, and a plug-in Kolmogorov–Sinai
//! estimator over finite partitions.

use std::f64::consts::PI;

use rayon::prelude::*;
use rustc_hash::FxHashMap;
use serde::{Deserialize, Serialize};

use crate::dynamics::MapHandle;
use crate::error::{domain, LabError, Result};
use crate::geometry::{ManifoldId, Point};
use crate::measures::{balancedness_residual, DefaultFamily, EmpiricalMeasure};
use crate::reduce::{det_sum, det_sum_by};

/// A finite partition into half-open cells.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PartitionSpec {
    /// Dyadic boxes of side `2^-depth` on the torus.
    Dyadic { depth: u32 },
    /// Equal-area cells on the sphere: `lon` longitude sectors times `lat`
    /// bands of equal height in `z`.
    LonLat { lon: u32, lat: u32 },
}

impl PartitionSpec {
    /// Default partition: 64 dyadic boxes on the 2-torus, 128 cells on the sphere.
    pub fn default_for(m: ManifoldId) -> Self {
        match m {
            ManifoldId::Torus(_) => PartitionSpec::Dyadic { depth: 3 },
            ManifoldId::Sphere2 => PartitionSpec::LonLat { lon: 16, lat: 8 },
        }
    }

    pub fn check(&self, m: ManifoldId) -> Result<()> {
        match (*self, m) {
            (PartitionSpec::Dyadic { depth }, ManifoldId::Torus(n)) if depth >= 1 && depth as usize * n <= 40 => Ok(()),
            (PartitionSpec::LonLat { lon, lat }, ManifoldId::Sphere2) if lon >= 1 && lat >= 1 && lon * lat <= 1 << 20 => {
                Ok(())
            }
            _ => domain(format!("partition {self:?} does not fit {m}")),
        }
    }

    pub fn cell_count(&self, m: ManifoldId) -> u64 {
        match (*self, m) {
            (PartitionSpec::Dyadic { depth }, ManifoldId::Torus(n)) => 1u64 << (depth as usize * n),
            (PartitionSpec::LonLat { lon, lat }, _) => lon as u64 * lat as u64,
            _ => 0,
        }
    }

    /// Cell id in `0..cell_count`. The manifold must have passed [`check`](Self::check).
    pub fn cell(&self, x: &[f64]) -> u64 {
        match *self {
            PartitionSpec::Dyadic { depth } => {
                let side = 1u64 << depth;
                x.iter().rev().fold(0, |acc, &v| {
                    let c = ((v * side as f64).floor() as u64).min(side - 1);
                    acc * side + c
                })
            }
            PartitionSpec::LonLat { lon, lat } => {
                let mut angle = x[1].atan2(x[0]);
                if angle < 0.0 {
                    angle += 2.0 * PI;
                }
                let a = ((angle / (2.0 * PI) * lon as f64).floor() as u64).min(lon as u64 - 1);
                let b = (((x[2] + 1.0) / 2.0 * lat as f64).floor().max(0.0) as u64).min(lat as u64 - 1);
                b * lon as u64 + a
            }
        }
    }
}

/// Measure-theoretic Jacobian `deg f / i(x, f)` of a balanced measure.
pub fn mt_jacobian(f: &MapHandle, x: &Point) -> f64 {
    f.degree() as f64 / f.local_index(x) as f64
}

/// `log deg f - ∫ log i(x, f) dμ` with the mass carried by the branch set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LowerBound {
    pub bound: f64,
    pub branch_mass: f64,
    /// Balancedness residual of `mu` on the default test family.
    pub residual: f64,
    pub warnings: Vec<String>,
}

/// Lower bound for `h_mu(f)`. Warns when `mu` is not a probability
/// measure or its balancedness residual exceeds `residual_threshold`.
pub fn entropy_lower_bound_report(f: &MapHandle, mu: &EmpiricalMeasure, residual_threshold: f64) -> Result<LowerBound> {
    if f.manifold() != mu.manifold() {
        return domain(format!("measure on {} but map acts on {}", mu.manifold(), f.manifold()));
    }
    let mut warnings = Vec::new();
    let total = mu.total();
    if (total - 1.0).abs() > 1e-9 {
        warnings.push(format!("measure has total mass {total}; masses below are normalized"));
    }
    let log_i = det_sum_by(mu.len(), |i| mu.weight(i) * (f.local_index_coords(mu.coords(i)) as f64).ln()) / total;
    let branch_mass = det_sum_by(mu.len(), |i| {
        if f.local_index_coords(mu.coords(i)) > 1 {
            mu.weight(i)
        } else {
            0.0
        }
    }) / total;
    let residual = balancedness_residual(f, mu, &DefaultFamily::for_manifold(f.manifold()))?.value;
    if residual > residual_threshold {
        warnings.push(format!(
            "balancedness residual {residual:.3e} exceeds {residual_threshold:.3e}; the bound assumes a balanced measure"
        ));
    }
    Ok(LowerBound { bound: (f.degree() as f64).ln() - log_i, branch_mass, residual, warnings })
}

/// Plug-in estimates of `H(xi | f^-1 xi v ... v f^-k xi)` for `k = 0..=k_max`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KsEstimate {
    /// Value at `k_max`.
    pub value: f64,
    /// Entry `k` is the conditional entropy given `k` future labels.
    pub sequence: Vec<f64>,
    pub cells: u64,
    /// Mass in conditioning classes holding fewer than [`KS_MIN_CLASS_ATOMS`] atoms.
    pub undersampled_mass: f64,
    pub warnings: Vec<String>,
}

/// Atoms per cell required before estimating.
pub const KS_ATOMS_PER_CELL: usize = 100;

/// Conditioning classes below this many atoms count as undersampled.
pub const KS_MIN_CLASS_ATOMS: usize = 10;

/// Weighted Shannon entropy of the classes given by `keys`.
fn class_entropy(keys: &[u128], weights: &[f64], total: f64) -> (f64, Vec<(u128, usize, f64)>) {
    let mut classes: FxHashMap<u128, (usize, f64)> = FxHashMap::default();
    for (k, w) in keys.iter().zip(weights) {
        let e = classes.entry(*k).or_insert((0, 0.0));
        e.0 += 1;
        e.1 += w;
    }
    let mut list: Vec<(u128, usize, f64)> = classes.into_iter().map(|(k, (n, w))| (k, n, w)).collect();
    list.sort_unstable_by_key(|c| c.0);
    let terms: Vec<f64> = list
        .iter()
        .map(|c| {
            let p = c.2 / total;
            if p > 0.0 {
                -p * p.ln()
            } else {
                0.0
            }
        })
        .collect();
    (det_sum(&terms), list)
}

/// Kolmogorov–Sinai entropy of `mu` relative to `partition`, estimated as
/// `H(labels 0..=k) - H(labels 1..=k)` where label `j` is the cell of
/// `f^j x`. Requires at least 100 atoms per cell.
pub fn ks_entropy_estimate(f: &MapHandle, mu: &EmpiricalMeasure, partition: PartitionSpec, k_max: usize) -> Result<KsEstimate> {
    let m = mu.manifold();
    if f.manifold() != m {
        return domain(format!("measure on {m} but map acts on {}", f.manifold()));
    }
    partition.check(m)?;
    let cells = partition.cell_count(m);
    if (mu.len() as u128) < KS_ATOMS_PER_CELL as u128 * cells as u128 {
        return domain(format!(
            "{} atoms for {cells} cells; the plug-in estimate needs at least {KS_ATOMS_PER_CELL} atoms per cell",
            mu.len()
        ));
    }
    let bits = 64 - (cells - 1).leading_zeros().min(63);
    if bits as usize * (k_max + 1) > 128 {
        return Err(LabError::Config(format!("{cells} cells over {} labels do not fit a 128-bit key", k_max + 1)));
    }
    let width = m.ambient_dim();
    // labels[i * (k_max + 1) + j] = cell of f^j(x_i)
    let labels: Vec<u64> = (0..mu.len())
        .into_par_iter()
        .flat_map_iter(|i| {
            let mut x = mu.coords(i).to_vec();
            let mut y = vec![0.0; width];
            let mut row = Vec::with_capacity(k_max + 1);
            for j in 0..=k_max {
                if j > 0 {
                    f.eval_coords(&x, &mut y);
                    std::mem::swap(&mut x, &mut y);
                }
                row.push(partition.cell(&x));
            }
            row
        })
        .collect();
    let total = mu.total();
    let weights = mu.weights();
    let stride = k_max + 1;
    let key = |i: usize, from: usize, to: usize| -> u128 {
        labels[i * stride + from..=i * stride + to].iter().fold(0u128, |acc, &c| (acc << bits) | c as u128)
    };
    let mut sequence = Vec::with_capacity(stride);
    let mut undersampled_mass = 0.0;
    for k in 0..=k_max {
        let all: Vec<u128> = (0..mu.len()).map(|i| key(i, 0, k)).collect();
        let (h_all, _) = class_entropy(&all, weights, total);
        let h_rest = if k == 0 {
            0.0
        } else {
            let rest: Vec<u128> = (0..mu.len()).map(|i| key(i, 1, k)).collect();
            let (h, classes) = class_entropy(&rest, weights, total);
            if k == k_max {
                let thin: Vec<f64> =
                    classes.iter().filter(|c| c.1 < KS_MIN_CLASS_ATOMS).map(|c| c.2 / total).collect();
                undersampled_mass = det_sum(&thin);
            }
            h
        };
        sequence.push(h_all - h_rest);
    }
    let mut warnings = Vec::new();
    if undersampled_mass > 0.0 {
        warnings.push(format!(
            "conditioning classes with fewer than {KS_MIN_CLASS_ATOMS} atoms carry mass {undersampled_mass:.3e}"
        ));
    }
    Ok(KsEstimate { value: sequence[k_max], sequence, cells, undersampled_mass, warnings })
}

/// JSON summary of the measure-entropy checks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasureEntropyReport {
    pub bound: f64,
    pub branch_mass: f64,
    pub ks_sequence: Vec<f64>,
    pub warnings: Vec<String>,
}

impl MeasureEntropyReport {
    pub fn new(lower: &LowerBound, ks: &KsEstimate) -> Self {
        MeasureEntropyReport {
            bound: lower.bound,
            branch_mass: lower.branch_mass,
            ks_sequence: ks.sequence.clone(),
            warnings: lower.warnings.iter().chain(&ks.warnings).cloned().collect(),
        }
    }
}
