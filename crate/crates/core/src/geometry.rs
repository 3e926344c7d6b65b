//! Model manifolds: the flat torus `T^n = R^n / Z^n` and the round unit
//! 2-sphere, with their Riemannian distances, the sup and product metrics
//! on powers, and uniform sampling.

use std::f64::consts::PI;
use std::fmt;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use smallvec::SmallVec;

use crate::error::{domain, LabError, Result};

pub type Coords = SmallVec<[f64; 3]>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ManifoldId {
    /// Flat torus of the given dimension (at least 2).
    Torus(usize),
    /// Round unit sphere, embedded in R^3.
    Sphere2,
}

impl ManifoldId {
    pub fn torus(n: usize) -> Result<Self> {
        if n < 2 {
            return domain(format!("torus dimension must be at least 2, got {n}"));
        }
        Ok(ManifoldId::Torus(n))
    }

    /// Intrinsic dimension.
    pub fn dim(&self) -> usize {
        match *self {
            ManifoldId::Torus(n) => n,
            ManifoldId::Sphere2 => 2,
        }
    }

    /// Number of stored coordinates per point.
    pub fn ambient_dim(&self) -> usize {
        match *self {
            ManifoldId::Torus(n) => n,
            ManifoldId::Sphere2 => 3,
        }
    }

    pub fn diameter(&self) -> f64 {
        match *self {
            ManifoldId::Torus(n) => 0.5 * (n as f64).sqrt(),
            ManifoldId::Sphere2 => PI,
        }
    }

    /// Riemannian volume of the whole manifold. All measures in the crate
    /// are normalized by this so that `vol(M) = 1`.
    pub fn riemannian_volume(&self) -> f64 {
        match *self {
            ManifoldId::Torus(_) => 1.0,
            ManifoldId::Sphere2 => 4.0 * PI,
        }
    }

    /// Normalized volume of the open geodesic ball of radius `r`.
    pub fn ball_volume(&self, r: f64) -> f64 {
        match *self {
            ManifoldId::Torus(n) => {
                if r >= 0.5 {
                    // balls this large wrap; callers sample the whole torus
                    1.0
                } else {
                    unit_ball_volume(n) * r.powi(n as i32)
                }
            }
            ManifoldId::Sphere2 => {
                if r >= PI {
                    1.0
                } else {
                    0.5 * (1.0 - r.cos())
                }
            }
        }
    }
}

impl fmt::Display for ManifoldId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ManifoldId::Torus(n) => write!(f, "torus{n}"),
            ManifoldId::Sphere2 => write!(f, "sphere2"),
        }
    }
}

/// Volume of the Euclidean unit ball in R^n.
pub fn unit_ball_volume(n: usize) -> f64 {
    match n {
        0 => 1.0,
        1 => 2.0,
        _ => 2.0 * PI / n as f64 * unit_ball_volume(n - 2),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Point {
    manifold: ManifoldId,
    coords: Coords,
}

fn wrap_unit(x: f64) -> f64 {
    let r = x - x.floor();
    // tiny negative inputs round up to exactly 1.0
    if r >= 1.0 {
        0.0
    } else {
        r
    }
}

impl Point {
    /// Torus point; coordinates are reduced into `[0, 1)`.
    pub fn torus(coords: &[f64]) -> Result<Self> {
        if coords.len() < 2 {
            return domain("torus points need at least 2 coordinates");
        }
        if coords.iter().any(|c| !c.is_finite()) {
            return domain("non-finite torus coordinate");
        }
        Ok(Point {
            manifold: ManifoldId::Torus(coords.len()),
            coords: coords.iter().map(|&c| wrap_unit(c)).collect(),
        })
    }

    /// Sphere point from any non-zero vector of R^3 (renormalized).
    pub fn sphere(v: [f64; 3]) -> Result<Self> {
        let norm = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if !norm.is_finite() || norm == 0.0 {
            return domain("sphere point needs a finite non-zero vector");
        }
        Ok(Point {
            manifold: ManifoldId::Sphere2,
            coords: v.iter().map(|c| c / norm).collect(),
        })
    }

    pub fn north_pole() -> Self {
        Point { manifold: ManifoldId::Sphere2, coords: SmallVec::from_slice(&[0.0, 0.0, 1.0]) }
    }

    pub fn south_pole() -> Self {
        Point { manifold: ManifoldId::Sphere2, coords: SmallVec::from_slice(&[0.0, 0.0, -1.0]) }
    }

    pub fn new(manifold: ManifoldId, coords: &[f64]) -> Result<Self> {
        if coords.len() != manifold.ambient_dim() {
            return domain(format!(
                "{manifold} expects {} coordinates, got {}",
                manifold.ambient_dim(),
                coords.len()
            ));
        }
        match manifold {
            ManifoldId::Torus(_) => Point::torus(coords),
            ManifoldId::Sphere2 => Point::sphere([coords[0], coords[1], coords[2]]),
        }
    }

    /// Build from coordinates already known to satisfy the invariants.
    pub(crate) fn from_raw(manifold: ManifoldId, coords: &[f64]) -> Self {
        Point { manifold, coords: SmallVec::from_slice(coords) }
    }

    pub fn manifold(&self) -> ManifoldId {
        self.manifold
    }

    pub fn coords(&self) -> &[f64] {
        &self.coords
    }
}

/// Distance between raw coordinate slices on `m`. No validation.
#[inline]
pub fn coord_dist(m: ManifoldId, a: &[f64], b: &[f64]) -> f64 {
    match m {
        ManifoldId::Torus(_) => {
            // min over lattice shifts in {-1,0,1}^n factors per axis
            let mut s = 0.0;
            for (x, y) in a.iter().zip(b) {
                let d = (x - y).abs();
                let d = d.min(1.0 - d);
                s += d * d;
            }
            s.sqrt()
        }
        ManifoldId::Sphere2 => {
            let dot = a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
            let cx = a[1] * b[2] - a[2] * b[1];
            let cy = a[2] * b[0] - a[0] * b[2];
            let cz = a[0] * b[1] - a[1] * b[0];
            // same as arccos(clamp(dot)) but accurate near 0 and pi
            (cx * cx + cy * cy + cz * cz).sqrt().atan2(dot)
        }
    }
}

pub fn dist(a: &Point, b: &Point) -> Result<f64> {
    if a.manifold != b.manifold {
        return domain(format!("points on {} and {}", a.manifold, b.manifold));
    }
    Ok(coord_dist(a.manifold, &a.coords, &b.coords))
}

/// An element `(x_0, ..., x_k)` of the (k+1)-fold power of a manifold.
#[derive(Debug, Clone, PartialEq)]
pub struct ProductPoint {
    entries: Vec<Point>,
}

impl ProductPoint {
    pub fn new(entries: Vec<Point>) -> Result<Self> {
        let Some(first) = entries.first() else {
            return domain("product point needs at least one entry");
        };
        let m = first.manifold;
        if entries.iter().any(|p| p.manifold != m) {
            return domain("product point entries on different manifolds");
        }
        Ok(ProductPoint { entries })
    }

    pub fn entries(&self) -> &[Point] {
        &self.entries
    }

    /// The chain length `k`; the tuple has `k + 1` entries.
    pub fn k(&self) -> usize {
        self.entries.len() - 1
    }

    pub fn manifold(&self) -> ManifoldId {
        self.entries[0].manifold
    }
}

fn check_pair(x: &ProductPoint, y: &ProductPoint) -> Result<()> {
    if x.entries.len() != y.entries.len() {
        return domain(format!(
            "product points of lengths {} and {}",
            x.entries.len(),
            y.entries.len()
        ));
    }
    if x.manifold() != y.manifold() {
        return domain("product points on different manifolds");
    }
    Ok(())
}

/// `max_j d(x_j, y_j)`.
pub fn sup_dist(x: &ProductPoint, y: &ProductPoint) -> Result<f64> {
    check_pair(x, y)?;
    let m = x.manifold();
    Ok(x.entries
        .iter()
        .zip(&y.entries)
        .map(|(a, b)| coord_dist(m, &a.coords, &b.coords))
        .fold(0.0, f64::max))
}

/// Distance of the product Riemannian metric: `sqrt(sum_j d(x_j, y_j)^2)`.
pub fn product_dist(x: &ProductPoint, y: &ProductPoint) -> Result<f64> {
    check_pair(x, y)?;
    let m = x.manifold();
    Ok(x.entries
        .iter()
        .zip(&y.entries)
        .map(|(a, b)| coord_dist(m, &a.coords, &b.coords).powi(2))
        .sum::<f64>()
        .sqrt())
}

/// Metric on chain tuples.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ChainMetric {
    /// Maximum of the coordinate distances.
    #[default]
    Sup,
    /// Euclidean combination of the coordinate distances.
    Product,
}

impl ChainMetric {
    /// Distance between two flat chains of `k + 1` points of width `w`.
    pub fn chain_dist(&self, m: ManifoldId, a: &[f64], b: &[f64]) -> f64 {
        let w = m.ambient_dim();
        let parts = a.chunks_exact(w).zip(b.chunks_exact(w)).map(|(p, q)| coord_dist(m, p, q));
        match self {
            ChainMetric::Sup => parts.fold(0.0, f64::max),
            ChainMetric::Product => parts.map(|d| d * d).sum::<f64>().sqrt(),
        }
    }
}

/// Uniform sample from the normalized volume measure.
pub fn sample_uniform<R: Rng + ?Sized>(m: ManifoldId, rng: &mut R) -> Point {
    match m {
        ManifoldId::Torus(n) => {
            let coords: Coords = (0..n).map(|_| rng.random::<f64>()).collect();
            Point { manifold: m, coords }
        }
        ManifoldId::Sphere2 => loop {
            let v: [f64; 3] = [
                rng.sample(StandardNormal),
                rng.sample(StandardNormal),
                rng.sample(StandardNormal),
            ];
            if let Ok(p) = Point::sphere(v) {
                break p;
            }
        },
    }
}

/// Uniform sample from the open geodesic ball `B(center, r)`.
///
/// Balls that cover the manifold (torus `r >= 1/2`, sphere `r >= pi`)
/// fall back to the uniform measure on the whole manifold, matching
/// [`ManifoldId::ball_volume`].
pub fn sample_ball<R: Rng + ?Sized>(center: &Point, r: f64, rng: &mut R) -> Point {
    let m = center.manifold;
    match m {
        ManifoldId::Torus(n) => {
            if r >= 0.5 {
                return sample_uniform(m, rng);
            }
            let dir: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            let norm = dir.iter().map(|d| d * d).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
            let rad = r * rng.random::<f64>().powf(1.0 / n as f64);
            let coords: Coords = center
                .coords
                .iter()
                .zip(&dir)
                .map(|(c, d)| wrap_unit(c + rad * d / norm))
                .collect();
            Point { manifold: m, coords }
        }
        ManifoldId::Sphere2 => {
            if r >= PI {
                return sample_uniform(m, rng);
            }
            let z = 1.0 - rng.random::<f64>() * (1.0 - r.cos());
            let phi = 2.0 * PI * rng.random::<f64>();
            let s = (1.0 - z * z).max(0.0).sqrt();
            let local = [s * phi.cos(), s * phi.sin(), z];
            let (e1, e2) = tangent_frame(&center.coords);
            let c = &center.coords;
            let v = [
                local[0] * e1[0] + local[1] * e2[0] + local[2] * c[0],
                local[0] * e1[1] + local[1] * e2[1] + local[2] * c[1],
                local[0] * e1[2] + local[1] * e2[2] + local[2] * c[2],
            ];
            Point::sphere(v).unwrap_or_else(|_| center.clone())
        }
    }
}

/// Some orthonormal basis of the tangent plane at a unit vector.
fn tangent_frame(c: &[f64]) -> ([f64; 3], [f64; 3]) {
    let a = if c[0].abs() < 0.9 { [1.0, 0.0, 0.0] } else { [0.0, 1.0, 0.0] };
    let d = a[0] * c[0] + a[1] * c[1] + a[2] * c[2];
    let mut e1 = [a[0] - d * c[0], a[1] - d * c[1], a[2] - d * c[2]];
    let n1 = (e1[0] * e1[0] + e1[1] * e1[1] + e1[2] * e1[2]).sqrt();
    e1.iter_mut().for_each(|x| *x /= n1);
    let e2 = [
        c[1] * e1[2] - c[2] * e1[1],
        c[2] * e1[0] - c[0] * e1[2],
        c[0] * e1[1] - c[1] * e1[0],
    ];
    (e1, e2)
}

impl TryFrom<(ManifoldId, Vec<f64>)> for Point {
    type Error = LabError;
    fn try_from((m, c): (ManifoldId, Vec<f64>)) -> Result<Self> {
        Point::new(m, &c)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeedStream;
    use proptest::prelude::*;

    fn t2(x: f64, y: f64) -> Point {
        Point::torus(&[x, y]).unwrap()
    }

    #[test]
    fn torus_wraps_around() {
        assert!((dist(&t2(0.1, 0.0), &t2(0.9, 0.0)).unwrap() - 0.2).abs() < 1e-15);
    }

    #[test]
    fn antipodal_poles() {
        let d = dist(&Point::north_pole(), &Point::south_pole()).unwrap();
        assert!((d - PI).abs() < 1e-15);
    }

    #[test]
    fn self_distance_is_zero() {
        let p = Point::sphere([0.3, -0.2, 0.9]).unwrap();
        assert_eq!(dist(&p, &p).unwrap(), 0.0);
        let q = t2(0.3, 0.7);
        assert_eq!(dist(&q, &q).unwrap(), 0.0);
    }

    #[test]
    fn mismatched_manifolds_rejected() {
        assert!(matches!(dist(&t2(0.1, 0.1), &Point::north_pole()), Err(LabError::Domain(_))));
        assert!(ManifoldId::torus(1).is_err());
    }

    #[test]
    fn coordinates_reduced_on_construction() {
        let p = Point::torus(&[1.25, -0.25]).unwrap();
        assert_eq!(p.coords(), &[0.25, 0.75]);
        let q = Point::torus(&[-1e-18, 0.0]).unwrap();
        assert!(q.coords()[0] >= 0.0 && q.coords()[0] < 1.0);
        let s = Point::sphere([0.0, 3.0, 4.0]).unwrap();
        let norm: f64 = s.coords().iter().map(|c| c * c).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-12);
    }

    #[test]
    fn sup_and_product_metrics() {
        let x = ProductPoint::new(vec![t2(0.0, 0.0), t2(0.1, 0.0), t2(0.0, 0.0)]).unwrap();
        let y = ProductPoint::new(vec![t2(0.0, 0.0), t2(0.0, 0.0), t2(0.3, 0.0)]).unwrap();
        assert!((sup_dist(&x, &y).unwrap() - 0.3).abs() < 1e-15);
        let p = product_dist(&x, &y).unwrap();
        assert!((p - (0.01f64 + 0.09).sqrt()).abs() < 1e-15);
        assert_eq!(sup_dist(&x, &x).unwrap(), 0.0);
        assert_eq!(product_dist(&x, &x).unwrap(), 0.0);

        let a = ProductPoint::new(vec![t2(0.2, 0.3)]).unwrap();
        let b = ProductPoint::new(vec![t2(0.7, 0.1)]).unwrap();
        let d = dist(&a.entries()[0], &b.entries()[0]).unwrap();
        assert_eq!(sup_dist(&a, &b).unwrap(), d);

        let short = ProductPoint::new(vec![t2(0.0, 0.0)]).unwrap();
        assert!(sup_dist(&x, &short).is_err());
        assert!(product_dist(&x, &short).is_err());
    }

    #[test]
    fn uniform_torus_mean() {
        let mut rng = SeedStream::new(11).rng();
        let n = 1_000_000;
        let mut sum = [0.0; 2];
        for _ in 0..n {
            let p = sample_uniform(ManifoldId::Torus(2), &mut rng);
            sum[0] += p.coords()[0];
            sum[1] += p.coords()[1];
        }
        for s in sum {
            assert!((s / n as f64 - 0.5).abs() < 0.002);
        }
    }

    #[test]
    fn uniform_sphere_mean() {
        let mut rng = SeedStream::new(12).rng();
        let n = 1_000_000;
        let mut sum = [0.0; 3];
        for _ in 0..n {
            let p = sample_uniform(ManifoldId::Sphere2, &mut rng);
            for (s, c) in sum.iter_mut().zip(p.coords()) {
                *s += c;
            }
        }
        for s in sum {
            assert!((s / n as f64).abs() < 0.003);
        }
    }

    #[test]
    fn sampling_replays_under_fixed_seed() {
        let draw = |seed| {
            let mut rng = SeedStream::new(seed).rng();
            (0..10).map(|_| sample_uniform(ManifoldId::Sphere2, &mut rng)).collect::<Vec<_>>()
        };
        assert_eq!(draw(5), draw(5));
        assert_ne!(draw(5), draw(6));
    }

    #[test]
    fn ball_samples_stay_in_ball() {
        let mut rng = SeedStream::new(3).rng();
        let c = Point::sphere([1.0, 0.2, -0.4]).unwrap();
        let t = t2(0.95, 0.02);
        for _ in 0..10_000 {
            let p = sample_ball(&c, 0.3, &mut rng);
            assert!(dist(&p, &c).unwrap() < 0.3 + 1e-12);
            let q = sample_ball(&t, 0.1, &mut rng);
            assert!(dist(&q, &t).unwrap() < 0.1 + 1e-12);
        }
    }

    #[test]
    fn cap_sample_fraction_matches_volume() {
        // fraction of uniform sphere samples landing in a cap
        let mut rng = SeedStream::new(4).rng();
        let c = Point::north_pole();
        let r = 0.7;
        let n = 200_000;
        let hits = (0..n)
            .filter(|_| dist(&sample_uniform(ManifoldId::Sphere2, &mut rng), &c).unwrap() < r)
            .count();
        let frac = hits as f64 / n as f64;
        assert!((frac - ManifoldId::Sphere2.ball_volume(r)).abs() < 0.004);
        assert!((ManifoldId::Torus(2).ball_volume(0.1) - PI * 0.01).abs() < 1e-15);
    }

    fn torus_point() -> impl Strategy<Value = Point> {
        (0.0..1.0f64, 0.0..1.0f64).prop_map(|(x, y)| t2(x, y))
    }

    fn sphere_point() -> impl Strategy<Value = Point> {
        (-1.0..1.0f64, -1.0..1.0f64, -1.0..1.0f64)
            .prop_filter("non-zero", |(x, y, z)| x * x + y * y + z * z > 1e-6)
            .prop_map(|(x, y, z)| Point::sphere([x, y, z]).unwrap())
    }

    fn chain(len: usize) -> impl Strategy<Value = ProductPoint> {
        proptest::collection::vec(torus_point(), len).prop_map(|v| ProductPoint::new(v).unwrap())
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(10_000))]

        #[test]
        fn triangle_inequality_torus(a in torus_point(), b in torus_point(), c in torus_point()) {
            let ab = dist(&a, &b).unwrap();
            let bc = dist(&b, &c).unwrap();
            let ac = dist(&a, &c).unwrap();
            prop_assert!(ac <= ab + bc + 1e-12);
        }

        #[test]
        fn triangle_inequality_sphere(a in sphere_point(), b in sphere_point(), c in sphere_point()) {
            let ab = dist(&a, &b).unwrap();
            let bc = dist(&b, &c).unwrap();
            let ac = dist(&a, &c).unwrap();
            prop_assert!(ac <= ab + bc + 1e-12);
        }

        #[test]
        fn product_metrics_triangle_and_equivalence(x in chain(4), y in chain(4), z in chain(4)) {
            for d in [sup_dist, product_dist] {
                prop_assert!(d(&x, &z).unwrap() <= d(&x, &y).unwrap() + d(&y, &z).unwrap() + 1e-12);
            }
            let s = sup_dist(&x, &y).unwrap();
            let p = product_dist(&x, &y).unwrap();
            prop_assert!(s <= p + 1e-15);
            prop_assert!(p <= 2.0 * s + 1e-12);
        }

        #[test]
        fn torus_translation_invariance(a in torus_point(), b in torus_point(), t in (-3.0..3.0f64, -3.0..3.0f64)) {
            let shift = |p: &Point| t2(p.coords()[0] + t.0, p.coords()[1] + t.1);
            let d0 = dist(&a, &b).unwrap();
            let d1 = dist(&shift(&a), &shift(&b)).unwrap();
            prop_assert!((d0 - d1).abs() < 1e-12);
        }
    }
}
