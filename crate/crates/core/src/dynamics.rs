//! Concrete uniformly quasiregular self-maps.
//!
//! Three families are provided behind [`MapHandle`]:
//!
//! * [`ToralEndo`]: `x -> A x mod 1` for an integer matrix `A`;
//! * [`SpherePowerMap`]: `w -> w^d` in a stereographic chart of the
//!   round sphere, with both poles fixed branch points of index `d`;
//! * [`ShearedEndo`]: a toral endomorphism conjugated by a smooth shear
//!   diffeomorphism `h`, which is uniformly quasiregular but not linear.
//!
//! Differentials are expressed in orthonormal frames of the tangent spaces
//! (the standard frame on the torus, the chart-induced frame on the
//! sphere), so `det Df` is the Riemannian Jacobian and `|Df|` is the
//! Riemannian operator norm.

use std::f64::consts::PI;

use nalgebra::{Complex, DMatrix};
use rand::Rng;
use smallvec::SmallVec;
use serde::{Deserialize, Serialize};

use crate::error::{domain, LabError, Result};
use crate::geometry::{sample_uniform, ManifoldId, Point, ProductPoint};
use crate::rng::SeedStream;

/// Exact determinant of a small integer matrix (fraction-free Bareiss).
fn int_det(m: &[i64], n: usize) -> i128 {
    let mut a: Vec<i128> = m.iter().map(|&x| x as i128).collect();
    let mut sign = 1i128;
    let mut prev = 1i128;
    for k in 0..n.saturating_sub(1) {
        if a[k * n + k] == 0 {
            let Some(p) = (k + 1..n).find(|&r| a[r * n + k] != 0) else {
                return 0;
            };
            for c in 0..n {
                a.swap(k * n + c, p * n + c);
            }
            sign = -sign;
        }
        for i in k + 1..n {
            for j in k + 1..n {
                a[i * n + j] = (a[i * n + j] * a[k * n + k] - a[i * n + k] * a[k * n + j]) / prev;
            }
        }
        prev = a[k * n + k];
    }
    sign * a[n * n - 1]
}

fn minor(m: &[i64], n: usize, row: usize, col: usize) -> Vec<i64> {
    let mut out = Vec::with_capacity((n - 1) * (n - 1));
    for i in (0..n).filter(|&i| i != row) {
        for j in (0..n).filter(|&j| j != col) {
            out.push(m[i * n + j]);
        }
    }
    out
}

/// Linear toral endomorphism `x -> A x mod 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct ToralEndo {
    n: usize,
    matrix: Vec<i64>,
    det: i64,
    // sign(det) * adj(A), so that A^{-1} = inv_num / |det|
    inv_num: Vec<i64>,
    // inv_num * v for one representative v of each coset of A Z^n,
    // flattened; every entry lies in [0, |det|)
    coset_offsets: Vec<i64>,
}

impl ToralEndo {
    pub fn new(rows: &[Vec<i64>]) -> Result<Self> {
        let n = rows.len();
        if !(2..=8).contains(&n) {
            return domain("toral endomorphisms need dimension between 2 and 8");
        }
        if rows.iter().any(|r| r.len() != n) {
            return domain("matrix must be square");
        }
        let matrix: Vec<i64> = rows.iter().flatten().copied().collect();
        let det = int_det(&matrix, n);
        if det == 0 {
            return domain("degree undefined: singular matrix");
        }
        let det = i64::try_from(det).map_err(|_| LabError::Domain("determinant overflow".into()))?;
        let sign = det.signum();
        let mut inv_num = vec![0i64; n * n];
        for i in 0..n {
            for j in 0..n {
                let cof = int_det(&minor(&matrix, n, j, i), n - 1) as i64;
                let s = if (i + j) % 2 == 0 { 1 } else { -1 };
                inv_num[i * n + j] = sign * s * cof;
            }
        }

        // Coset representatives of Z^n / A Z^n: the lattice points v with
        // A^{-1} v in [0,1)^n, tested exactly as adj' v in [0, D)^n. The
        // candidates lie in the integer bounding box of A [0,1)^n.
        let d = det.abs();
        let ranges: Vec<(i64, i64)> = (0..n)
            .map(|i| {
                let row = &matrix[i * n..(i + 1) * n];
                let neg: i64 = row.iter().filter(|&&a| a < 0).sum();
                let pos: i64 = row.iter().filter(|&&a| a > 0).sum();
                (neg, pos)
            })
            .collect();
        let mut coset_offsets = Vec::with_capacity(d as usize * n);
        let mut v: Vec<i64> = ranges.iter().map(|r| r.0).collect();
        'outer: loop {
            let offset: Vec<i64> = (0..n)
                .map(|i| (0..n).map(|j| inv_num[i * n + j] * v[j]).sum())
                .collect();
            if offset.iter().all(|&o| (0..d).contains(&o)) {
                coset_offsets.extend(offset);
            }
            for i in 0..n {
                if v[i] < ranges[i].1 {
                    v[i] += 1;
                    continue 'outer;
                }
                v[i] = ranges[i].0;
            }
            break;
        }
        if coset_offsets.len() as i64 != d * n as i64 {
            return Err(LabError::Internal(format!(
                "coset enumeration found {} representatives, expected |det A| = {d}",
                coset_offsets.len() / n
            )));
        }
        Ok(ToralEndo { n, matrix, det, inv_num, coset_offsets })
    }

    pub fn diagonal(entries: &[i64]) -> Result<Self> {
        let n = entries.len();
        let rows: Vec<Vec<i64>> = (0..n)
            .map(|i| (0..n).map(|j| if i == j { entries[i] } else { 0 }).collect())
            .collect();
        Self::new(&rows)
    }

    pub fn identity(n: usize) -> Result<Self> {
        Self::diagonal(&vec![1; n])
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn det(&self) -> i64 {
        self.det
    }

    pub fn degree(&self) -> u64 {
        self.det.unsigned_abs()
    }

    pub fn rows(&self) -> Vec<Vec<i64>> {
        self.matrix.chunks(self.n).map(|r| r.to_vec()).collect()
    }

    /// `A^{-T} xi` if it is an integer vector. Exactly then the character
    /// `exp(2 pi i xi . x)` sums to `deg A * exp(2 pi i (A^{-T} xi) . y)`
    /// over the preimages `x` of `y`; otherwise the sum vanishes.
    pub fn dual_preimage(&self, xi: &[i32]) -> Option<SmallVec<[i64; 8]>> {
        let n = self.n;
        let d = self.degree() as i64;
        (0..n)
            .map(|j| {
                let s: i64 = (0..n).map(|i| self.inv_num[i * n + j] * xi[i] as i64).sum();
                (s % d == 0).then_some(s / d)
            })
            .collect()
    }

    pub fn matrix_f64(&self) -> DMatrix<f64> {
        DMatrix::from_row_iterator(self.n, self.n, self.matrix.iter().map(|&a| a as f64))
    }

    fn eval_coords(&self, x: &[f64], out: &mut [f64]) {
        let n = self.n;
        for (i, o) in out.iter_mut().enumerate() {
            let row = &self.matrix[i * n..(i + 1) * n];
            let mut s = 0.0;
            for (a, xj) in row.iter().zip(x) {
                // reduce each product separately to keep magnitudes small
                let t = *a as f64 * xj;
                s += t - t.floor();
            }
            *o = wrap(s);
        }
    }

    /// Visit the `|det A|` preimages of `y`: `x = wrap((adj' y + adj' v) / D)`
    /// over the coset representatives `v`. Reduction mod 1 is half-open
    /// with the lower boundary included, so the count is exact.
    fn for_each_preimage(&self, y: &[f64], mut visit: impl FnMut(&[f64])) {
        let n = self.n;
        let d = self.degree() as f64;
        let mut c = [0.0f64; 8];
        let mut x = [0.0f64; 8];
        debug_assert!(n <= 8);
        for i in 0..n {
            c[i] = (0..n).map(|j| self.inv_num[i * n + j] as f64 * y[j]).sum();
        }
        for m in self.coset_offsets.chunks_exact(n) {
            for i in 0..n {
                x[i] = wrap((c[i] + m[i] as f64) / d);
            }
            visit(&x[..n]);
        }
    }

    /// Whether `A^T A` is a multiple of the identity (all iterates are
    /// then 1-quasiregular).
    pub fn is_similarity(&self) -> bool {
        let a = self.matrix_f64();
        let g = a.transpose() * &a;
        let c = g[(0, 0)];
        (0..self.n).all(|i| (0..self.n).all(|j| g[(i, j)] == if i == j { c } else { 0.0 }))
    }
}

#[inline]
fn wrap(x: f64) -> f64 {
    let r = x - x.floor();
    if r >= 1.0 {
        0.0
    } else {
        r
    }
}

/// Chart value of a unit vector: the north chart `w = (x + iy)/(1 + z)`
/// (north pole at `w = 0`) on the closed northern hemisphere, and the
/// south chart `u = (x - iy)/(1 - z) = 1/w` elsewhere. Both charts keep
/// `|w| <= 1`.
fn sphere_chart(p: &[f64]) -> (bool, Complex<f64>) {
    if p[2] >= 0.0 {
        (true, Complex::new(p[0], p[1]) / (1.0 + p[2]))
    } else {
        (false, Complex::new(p[0], -p[1]) / (1.0 - p[2]))
    }
}

fn sphere_unchart(north: bool, w: Complex<f64>) -> [f64; 3] {
    let r2 = w.norm_sqr();
    let s = 1.0 + r2;
    if north {
        [2.0 * w.re / s, 2.0 * w.im / s, (1.0 - r2) / s]
    } else {
        [2.0 * w.re / s, -2.0 * w.im / s, (r2 - 1.0) / s]
    }
}

/// Chart-induced metric density of the unit sphere, `ds = rho |dw|`.
fn sphere_density(w: Complex<f64>) -> f64 {
    2.0 / (1.0 + w.norm_sqr())
}

/// `w -> w^d` on the Riemann sphere.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SpherePowerMap {
    d: u32,
}

impl SpherePowerMap {
    pub fn new(d: u32) -> Result<Self> {
        if d < 2 {
            return domain(format!("sphere power map needs d >= 2, got {d}"));
        }
        Ok(SpherePowerMap { d })
    }

    pub fn exponent(&self) -> u32 {
        self.d
    }

    fn eval_coords(&self, x: &[f64], out: &mut [f64]) {
        let (north, w) = sphere_chart(x);
        let v = sphere_unchart(north, w.powu(self.d));
        out.copy_from_slice(&v);
    }

    fn is_pole(x: &[f64]) -> bool {
        x[0] == 0.0 && x[1] == 0.0
    }

    fn differential(&self, x: &[f64]) -> DMatrix<f64> {
        let (_, w) = sphere_chart(x);
        let d = self.d;
        let c = w.powu(d - 1) * d as f64;
        let scale = sphere_density(w.powu(d)) / sphere_density(w);
        DMatrix::from_row_slice(2, 2, &[c.re * scale, -c.im * scale, c.im * scale, c.re * scale])
    }

    fn for_each_preimage(&self, y: &[f64], mut visit: impl FnMut(&[f64], u32)) {
        if Self::is_pole(y) {
            visit(y, self.d);
            return;
        }
        let (north, w) = sphere_chart(y);
        let r = w.norm().powf(1.0 / self.d as f64);
        let theta = w.arg();
        for j in 0..self.d {
            let a = (theta + 2.0 * PI * j as f64) / self.d as f64;
            let mut v = sphere_unchart(north, Complex::from_polar(r, a));
            let norm = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
            v.iter_mut().for_each(|c| *c /= norm);
            visit(&v, 1);
        }
    }
}

/// Shear profiles `psi` for [`ShearedEndo`]; all have `sup |psi'| = 1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShearProfile {
    /// `psi(t) = sin(2 pi t) / (2 pi)`.
    Sin,
}

impl ShearProfile {
    fn value(&self, t: f64) -> f64 {
        match self {
            ShearProfile::Sin => (2.0 * PI * t).sin() / (2.0 * PI),
        }
    }

    fn slope(&self, t: f64) -> f64 {
        match self {
            ShearProfile::Sin => (2.0 * PI * t).cos(),
        }
    }

    pub fn max_slope(&self) -> f64 {
        1.0
    }
}

/// `f = h o base o h^{-1}` with the shear `h(x) = (x_1 + s psi(x_2), x_2, ...)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ShearedEndo {
    base: ToralEndo,
    amplitude: f64,
    profile: ShearProfile,
}

impl ShearedEndo {
    pub fn new(base: ToralEndo, amplitude: f64, profile: ShearProfile) -> Result<Self> {
        if !(amplitude >= 0.0 && amplitude * profile.max_slope() < 1.0) {
            return domain(format!(
                "shear amplitude {amplitude} must satisfy 0 <= s * sup|psi'| < 1"
            ));
        }
        Ok(ShearedEndo { base, amplitude, profile })
    }

    pub fn base(&self) -> &ToralEndo {
        &self.base
    }

    pub fn amplitude(&self) -> f64 {
        self.amplitude
    }

    pub fn profile(&self) -> ShearProfile {
        self.profile
    }

    pub fn shear(&self, x: &Point) -> Point {
        let mut c = x.coords().to_vec();
        self.shear_coords(&mut c, 1.0);
        Point::from_raw(x.manifold(), &c)
    }

    pub fn unshear(&self, x: &Point) -> Point {
        let mut c = x.coords().to_vec();
        self.shear_coords(&mut c, -1.0);
        Point::from_raw(x.manifold(), &c)
    }

    fn shear_coords(&self, x: &mut [f64], sign: f64) {
        x[0] = wrap(x[0] + sign * self.amplitude * self.profile.value(x[1]));
    }

    fn shear_jacobian(&self, x: &[f64], sign: f64) -> DMatrix<f64> {
        let n = self.base.n;
        let mut m = DMatrix::identity(n, n);
        m[(0, 1)] = sign * self.amplitude * self.profile.slope(x[1]);
        m
    }

    /// Distortion `K(h) = |Dh|^n / J_h` bound of the shear (`J_h = 1`).
    pub fn shear_distortion_bound(&self) -> f64 {
        let a = self.amplitude * self.profile.max_slope();
        let sigma = 0.5 * (a + (a * a + 4.0).sqrt());
        sigma.powi(self.base.n as i32)
    }

    fn eval_coords(&self, x: &[f64], out: &mut [f64]) {
        let mut u = x.to_vec();
        self.shear_coords(&mut u, -1.0);
        self.base.eval_coords(&u, out);
        self.shear_coords(out, 1.0);
    }

    fn differential(&self, x: &[f64]) -> DMatrix<f64> {
        let mut u = x.to_vec();
        self.shear_coords(&mut u, -1.0);
        let mut v = vec![0.0; u.len()];
        self.base.eval_coords(&u, &mut v);
        self.shear_jacobian(&v, 1.0) * self.base.matrix_f64() * self.shear_jacobian(x, -1.0)
    }

    fn for_each_preimage(&self, y: &[f64], mut visit: impl FnMut(&[f64])) {
        let mut u = [0.0f64; 8];
        let n = y.len();
        u[..n].copy_from_slice(y);
        self.shear_coords(&mut u[..n], -1.0);
        let mut z = [0.0f64; 8];
        self.base.for_each_preimage(&u[..n], |x| {
            z[..n].copy_from_slice(x);
            self.shear_coords(&mut z[..n], 1.0);
            visit(&z[..n]);
        });
    }
}

/// A concrete dynamical system behind a uniform interface.
#[derive(Debug, Clone, PartialEq)]
pub enum MapHandle {
    Toral(ToralEndo),
    Sphere(SpherePowerMap),
    Sheared(ShearedEndo),
}

/// Sampled lower estimate of `K(f^k)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistortionEstimate {
    pub k: usize,
    pub value: f64,
    pub samples: usize,
    /// Draws rejected because they hit the branch set of `f^k`.
    pub resampled: usize,
}

impl MapHandle {
    pub fn manifold(&self) -> ManifoldId {
        match self {
            MapHandle::Toral(t) => ManifoldId::Torus(t.n),
            MapHandle::Sphere(_) => ManifoldId::Sphere2,
            MapHandle::Sheared(s) => ManifoldId::Torus(s.base.n),
        }
    }

    pub fn dim(&self) -> usize {
        self.manifold().dim()
    }

    pub fn degree(&self) -> u64 {
        match self {
            MapHandle::Toral(t) => t.degree(),
            MapHandle::Sphere(s) => s.d as u64,
            MapHandle::Sheared(s) => s.base.degree(),
        }
    }

    pub fn family(&self) -> &'static str {
        match self {
            MapHandle::Toral(_) => "toral_endo",
            MapHandle::Sphere(_) => "sphere_power",
            MapHandle::Sheared(_) => "sheared_endo",
        }
    }

    fn check(&self, x: &Point) {
        assert_eq!(x.manifold(), self.manifold(), "point is not on the map's manifold");
    }

    /// Evaluate on raw coordinates; `out` has the ambient dimension.
    pub fn eval_coords(&self, x: &[f64], out: &mut [f64]) {
        match self {
            MapHandle::Toral(t) => t.eval_coords(x, out),
            MapHandle::Sphere(s) => s.eval_coords(x, out),
            MapHandle::Sheared(s) => s.eval_coords(x, out),
        }
    }

    pub fn eval(&self, x: &Point) -> Point {
        self.check(x);
        let mut out = vec![0.0; x.coords().len()];
        self.eval_coords(x.coords(), &mut out);
        match self {
            // renormalize against rounding drift
            MapHandle::Sphere(_) => Point::sphere([out[0], out[1], out[2]]).expect("unit vector"),
            _ => Point::from_raw(x.manifold(), &out),
        }
    }

    pub fn iterate(&self, x: &Point, k: usize) -> Point {
        (0..k).fold(x.clone(), |p, _| self.eval(&p))
    }

    pub fn differential_coords(&self, x: &[f64]) -> DMatrix<f64> {
        match self {
            MapHandle::Toral(t) => t.matrix_f64(),
            MapHandle::Sphere(s) => s.differential(x),
            MapHandle::Sheared(s) => s.differential(x),
        }
    }

    /// `Df(x)` in orthonormal frames at `x` and `f(x)`.
    pub fn differential(&self, x: &Point) -> DMatrix<f64> {
        self.check(x);
        self.differential_coords(x.coords())
    }

    /// `Df^k(x)` by the chain rule.
    pub fn iterate_differential(&self, x: &Point, k: usize) -> DMatrix<f64> {
        self.check(x);
        let n = self.dim();
        let mut acc = DMatrix::identity(n, n);
        let mut p = x.clone();
        for _ in 0..k {
            acc = self.differential(&p) * acc;
            p = self.eval(&p);
        }
        acc
    }

    pub fn jacobian(&self, x: &Point) -> f64 {
        self.differential(x).determinant()
    }

    /// `|Df(x)|^n / J_f(x)`; `None` on the branch set where `J_f = 0`.
    pub fn pointwise_distortion(&self, x: &Point) -> Option<f64> {
        matrix_distortion(&self.differential(x))
    }

    /// Visit every preimage of the raw coordinates `y` together with its
    /// local index, without allocating.
    pub fn for_each_preimage(&self, y: &[f64], mut visit: impl FnMut(&[f64], u32)) {
        match self {
            MapHandle::Toral(t) => t.for_each_preimage(y, |x| visit(x, 1)),
            MapHandle::Sheared(s) => s.for_each_preimage(y, |x| visit(x, 1)),
            MapHandle::Sphere(s) => s.for_each_preimage(y, visit),
        }
    }

    /// All preimages of `y` with their local indices; the indices sum to
    /// the degree.
    pub fn preimages(&self, y: &Point) -> Result<Vec<(Point, u32)>> {
        self.check(y);
        let m = y.manifold();
        let mut out = Vec::with_capacity(self.degree() as usize);
        self.for_each_preimage(y.coords(), |x, i| out.push((Point::from_raw(m, x), i)));
        let total: u64 = out.iter().map(|(_, i)| *i as u64).sum();
        if total != self.degree() {
            return Err(LabError::Internal(format!(
                "preimage indices sum to {total}, expected degree {}",
                self.degree()
            )));
        }
        Ok(out)
    }

    /// Local index `i(x, f)`: 1 off the branch set.
    pub fn local_index(&self, x: &Point) -> u32 {
        self.check(x);
        self.local_index_coords(x.coords())
    }

    /// [`MapHandle::local_index`] on raw coordinates.
    pub fn local_index_coords(&self, x: &[f64]) -> u32 {
        match self {
            MapHandle::Sphere(s) if SpherePowerMap::is_pole(x) => s.d,
            _ => 1,
        }
    }

    pub fn branch_points(&self) -> Vec<Point> {
        match self {
            MapHandle::Sphere(_) => vec![Point::north_pole(), Point::south_pole()],
            _ => Vec::new(),
        }
    }

    /// `(x, f(x), ..., f^k(x))`.
    pub fn chain_point(&self, x: &Point, k: usize) -> ProductPoint {
        let mut entries = Vec::with_capacity(k + 1);
        entries.push(x.clone());
        for _ in 0..k {
            let next = self.eval(entries.last().expect("non-empty"));
            entries.push(next);
        }
        ProductPoint::new(entries).expect("entries share the manifold")
    }

    /// A `K` with `K(f^k) <= K` for every `k`, when one is known in closed
    /// form.
    pub fn uniform_distortion_bound(&self) -> Option<f64> {
        match self {
            MapHandle::Toral(t) => t.is_similarity().then_some(1.0),
            MapHandle::Sphere(_) => Some(1.0),
            MapHandle::Sheared(s) => {
                let base = MapHandle::Toral(s.base.clone()).uniform_distortion_bound()?;
                Some(s.shear_distortion_bound().powi(2) * base)
            }
        }
    }

    /// Sup of the pointwise distortion of `f^k` over `samples` uniform
    /// points; a lower estimate of `K(f^k)`.
    pub fn iterate_distortion(
        &self,
        k: usize,
        samples: usize,
        stream: SeedStream,
    ) -> Result<DistortionEstimate> {
        if k == 0 || samples == 0 {
            return domain("iterate_distortion needs k >= 1 and at least one sample");
        }
        let mut rng = stream.rng();
        let mut best: f64 = 1.0;
        let mut resampled = 0;
        let mut taken = 0;
        while taken < samples {
            let x = sample_uniform(self.manifold(), &mut rng);
            match matrix_distortion(&self.iterate_differential(&x, k)) {
                Some(v) => {
                    best = best.max(v);
                    taken += 1;
                }
                None => {
                    resampled += 1;
                    if resampled > 1000 + 10 * samples {
                        return Err(LabError::Internal("distortion sampling kept hitting the branch set".into()));
                    }
                }
            }
        }
        Ok(DistortionEstimate { k, value: best, samples, resampled })
    }

    /// Random point of the manifold that is not a branch point.
    pub fn sample_regular<R: Rng + ?Sized>(&self, rng: &mut R) -> Point {
        loop {
            let x = sample_uniform(self.manifold(), rng);
            if self.local_index(&x) == 1 {
                return x;
            }
        }
    }
}

/// Outer distortion `|D|^n / |det D|` of a square matrix; `None` if
/// `D` is singular.
pub fn matrix_distortion(d: &DMatrix<f64>) -> Option<f64> {
    let det = d.determinant().abs();
    if det == 0.0 || !det.is_finite() {
        return None;
    }
    let norm = d.clone().svd(false, false).singular_values.max();
    Some(norm.powi(d.nrows() as i32) / det)
}

/// JSON description of a map, as used in run configurations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum MapSpec {
    ToralEndo {
        matrix: Vec<Vec<i64>>,
    },
    SpherePower {
        degree: u32,
    },
    ShearedEndo {
        matrix: Vec<Vec<i64>>,
        amplitude: f64,
        #[serde(default = "default_profile")]
        profile: ShearProfile,
    },
}

fn default_profile() -> ShearProfile {
    ShearProfile::Sin
}

impl MapSpec {
    pub fn build(&self) -> Result<MapHandle> {
        Ok(match self {
            MapSpec::ToralEndo { matrix } => MapHandle::Toral(ToralEndo::new(matrix)?),
            MapSpec::SpherePower { degree } => MapHandle::Sphere(SpherePowerMap::new(*degree)?),
            MapSpec::ShearedEndo { matrix, amplitude, profile } => {
                MapHandle::Sheared(ShearedEndo::new(ToralEndo::new(matrix)?, *amplitude, *profile)?)
            }
        })
    }
}

impl From<&MapHandle> for MapSpec {
    fn from(f: &MapHandle) -> Self {
        match f {
            MapHandle::Toral(t) => MapSpec::ToralEndo { matrix: t.rows() },
            MapHandle::Sphere(s) => MapSpec::SpherePower { degree: s.d },
            MapHandle::Sheared(s) => MapSpec::ShearedEndo {
                matrix: s.base.rows(),
                amplitude: s.amplitude,
                profile: s.profile,
            },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::dist;

    fn t2(x: f64, y: f64) -> Point {
        Point::torus(&[x, y]).unwrap()
    }

    fn toral(rows: &[[i64; 2]; 2]) -> MapHandle {
        MapHandle::Toral(ToralEndo::new(&[rows[0].to_vec(), rows[1].to_vec()]).unwrap())
    }

    fn sphere(d: u32) -> MapHandle {
        MapHandle::Sphere(SpherePowerMap::new(d).unwrap())
    }

    fn sheared(s: f64) -> MapHandle {
        MapHandle::Sheared(
            ShearedEndo::new(ToralEndo::diagonal(&[2, 2]).unwrap(), s, ShearProfile::Sin).unwrap(),
        )
    }

    fn chart_point(w: Complex<f64>) -> Point {
        Point::sphere(sphere_unchart(true, w)).unwrap()
    }

    fn close(a: &Point, b: &Point, tol: f64) -> bool {
        dist(a, b).unwrap() <= tol
    }

    #[test]
    fn integer_determinants() {
        assert_eq!(int_det(&[2, 1, 0, 2], 2), 4);
        assert_eq!(int_det(&[0, 1, 1, 0], 2), -1);
        assert_eq!(int_det(&[1, 2, 3, 4, 5, 6, 7, 8, 10], 3), -3);
        assert_eq!(int_det(&[0, 0, 1, 0, 1, 0, 1, 0, 0], 3), -1);
        assert!(matches!(ToralEndo::diagonal(&[2, 0]), Err(LabError::Domain(m)) if m.contains("singular")));
    }

    #[test]
    fn toral_eval() {
        let f = toral(&[[2, 0], [0, 2]]);
        let y = f.eval(&t2(0.3, 0.4));
        assert!(close(&y, &t2(0.6, 0.8), 1e-15));
    }

    #[test]
    fn sphere_equator_fixed() {
        let f = sphere(2);
        let p = chart_point(Complex::new(1.0, 0.0));
        assert!(close(&f.eval(&p), &p, 1e-15));
    }

    #[test]
    fn zero_shear_is_base() {
        let f = sheared(0.0);
        let g = toral(&[[2, 0], [0, 2]]);
        let mut rng = SeedStream::new(1).rng();
        for _ in 0..100 {
            let x = sample_uniform(ManifoldId::Torus(2), &mut rng);
            assert!(close(&f.eval(&x), &g.eval(&x), 1e-15));
            assert_eq!(f.differential(&x), g.differential(&x));
        }
    }

    #[test]
    fn toral_differential_is_matrix() {
        let f = toral(&[[2, 1], [0, 2]]);
        let d = f.differential(&t2(0.7, 0.1));
        assert_eq!(d, DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 0.0, 2.0]));
    }

    #[test]
    fn sphere_differential_on_equator() {
        let f = sphere(2);
        let d = f.differential(&chart_point(Complex::new(1.0, 0.0)));
        // conformal: 2 times a rotation
        assert!((d[(0, 0)] - 2.0).abs() < 1e-12);
        assert!(d[(0, 1)].abs() < 1e-12 && d[(1, 0)].abs() < 1e-12);
        assert!((d[(1, 1)] - 2.0).abs() < 1e-12);
        let e = f.differential(&chart_point(Complex::from_polar(1.0, 0.7)));
        assert!((e.determinant() - 4.0).abs() < 1e-12);
    }

    #[test]
    fn jacobian_and_distortion() {
        let f = toral(&[[2, 0], [0, 3]]);
        let x = t2(0.2, 0.9);
        assert!((f.jacobian(&x) - 6.0).abs() < 1e-12);
        assert!((f.pointwise_distortion(&x).unwrap() - 1.5).abs() < 1e-12);
        let g = toral(&[[2, 0], [0, 2]]);
        assert!((g.pointwise_distortion(&x).unwrap() - 1.0).abs() < 1e-12);

        let s = sphere(2);
        let mut rng = SeedStream::new(2).rng();
        for _ in 0..100 {
            let p = s.sample_regular(&mut rng);
            assert!((s.pointwise_distortion(&p).unwrap() - 1.0).abs() < 1e-9);
        }
        assert_eq!(s.jacobian(&Point::north_pole()), 0.0);
        assert!(s.pointwise_distortion(&Point::north_pole()).is_none());
        assert!(s.pointwise_distortion(&Point::south_pole()).is_none());
    }

    #[test]
    fn sphere_jacobian_matches_area_ratio() {
        // J_f(x) ~ area(f(B)) / area(B) for a small cap B, checked with the
        // chordal area of a tiny triangle
        let f = sphere(3);
        let x = Point::sphere([0.4, -0.3, 0.5]).unwrap();
        let h = 1e-5;
        let c = x.coords();
        let (e1, e2) = {
            let a = [0.0, 0.0, 1.0];
            let d = c[2];
            let mut e1 = [a[0] - d * c[0], a[1] - d * c[1], a[2] - d * c[2]];
            let n = (e1.iter().map(|v| v * v).sum::<f64>()).sqrt();
            e1.iter_mut().for_each(|v| *v /= n);
            let e2 = [c[1] * e1[2] - c[2] * e1[1], c[2] * e1[0] - c[0] * e1[2], c[0] * e1[1] - c[1] * e1[0]];
            (e1, e2)
        };
        let p1 = Point::sphere([c[0] + h * e1[0], c[1] + h * e1[1], c[2] + h * e1[2]]).unwrap();
        let p2 = Point::sphere([c[0] + h * e2[0], c[1] + h * e2[1], c[2] + h * e2[2]]).unwrap();
        let area = |a: &Point, b: &Point, o: &Point| {
            let u: Vec<f64> = a.coords().iter().zip(o.coords()).map(|(p, q)| p - q).collect();
            let v: Vec<f64> = b.coords().iter().zip(o.coords()).map(|(p, q)| p - q).collect();
            let cr = [u[1] * v[2] - u[2] * v[1], u[2] * v[0] - u[0] * v[2], u[0] * v[1] - u[1] * v[0]];
            0.5 * cr.iter().map(|z| z * z).sum::<f64>().sqrt()
        };
        let ratio = area(&f.eval(&p1), &f.eval(&p2), &f.eval(&x)) / area(&p1, &p2, &x);
        assert!((ratio / f.jacobian(&x) - 1.0).abs() < 1e-3, "{ratio} vs {}", f.jacobian(&x));
    }

    #[test]
    fn preimage_examples() {
        let f = toral(&[[2, 0], [0, 2]]);
        let pre = f.preimages(&t2(0.0, 0.0)).unwrap();
        let mut got: Vec<(f64, f64)> = pre.iter().map(|(p, _)| (p.coords()[0], p.coords()[1])).collect();
        got.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_eq!(got, vec![(0.0, 0.0), (0.0, 0.5), (0.5, 0.0), (0.5, 0.5)]);
        assert!(pre.iter().all(|(_, i)| *i == 1));

        let s = sphere(2);
        let pole = s.preimages(&Point::north_pole()).unwrap();
        assert_eq!(pole.len(), 1);
        assert_eq!(pole[0].1, 2);
        assert_eq!(pole[0].0, Point::north_pole());

        let one = s.preimages(&chart_point(Complex::new(1.0, 0.0))).unwrap();
        assert_eq!(one.len(), 2);
        let targets = [chart_point(Complex::new(1.0, 0.0)), chart_point(Complex::new(-1.0, 0.0))];
        for t in &targets {
            assert!(one.iter().any(|(p, i)| *i == 1 && close(p, t, 1e-12)));
        }
    }

    fn families() -> Vec<MapHandle> {
        vec![
            toral(&[[2, 0], [0, 2]]),
            toral(&[[2, 0], [0, 3]]),
            toral(&[[2, 1], [0, 2]]),
            toral(&[[1, 2], [3, -1]]),
            toral(&[[0, 1], [1, 0]]),
            MapHandle::Toral(
                ToralEndo::new(&[vec![2, 1, 0], vec![0, 1, 1], vec![1, 0, 2]]).unwrap(),
            ),
            sphere(2),
            sphere(3),
            sheared(0.1),
            sheared(0.5),
        ]
    }

    #[test]
    fn degree_sum_and_round_trip() {
        let mut rng = SeedStream::new(9).rng();
        for f in families() {
            for _ in 0..100 {
                let y = sample_uniform(f.manifold(), &mut rng);
                let pre = f.preimages(&y).unwrap();
                let total: u64 = pre.iter().map(|(_, i)| *i as u64).sum();
                assert_eq!(total, f.degree(), "{f:?}");
                for (z, _) in &pre {
                    assert!(close(&f.eval(z), &y, 1e-9), "{f:?}");
                }
            }
            for b in f.branch_points() {
                let total: u64 = f.preimages(&b).unwrap().iter().map(|(_, i)| *i as u64).sum();
                assert_eq!(total, f.degree());
            }
        }
    }

    #[test]
    fn degree_sum_on_lattice_ties() {
        // targets on the dyadic lattice exercise the half-open tie-breaking
        for f in [toral(&[[2, 0], [0, 2]]), toral(&[[2, 1], [0, 2]]), toral(&[[2, 0], [0, 3]])] {
            for i in 0..12 {
                for j in 0..12 {
                    let y = t2(i as f64 / 12.0, j as f64 / 12.0);
                    assert_eq!(f.preimages(&y).unwrap().len() as u64, f.degree());
                }
            }
        }
    }

    fn preimage_tree(f: &MapHandle, y: &Point, depth: usize) -> u64 {
        if depth == 0 {
            return 1;
        }
        f.preimages(y)
            .unwrap()
            .iter()
            .map(|(z, i)| *i as u64 * preimage_tree(f, z, depth - 1))
            .sum()
    }

    #[test]
    fn preimage_tree_index_products() {
        let mut rng = SeedStream::new(10).rng();
        for f in families() {
            for _ in 0..10 {
                let y = sample_uniform(f.manifold(), &mut rng);
                for k in 1..=4 {
                    assert_eq!(preimage_tree(&f, &y, k), f.degree().pow(k as u32));
                }
            }
        }
        let s = sphere(2);
        assert_eq!(preimage_tree(&s, &Point::north_pole(), 3), 8);
    }

    #[test]
    fn chain_points() {
        let f = toral(&[[2, 0], [0, 2]]);
        let x = t2(0.3, 0.4);
        assert_eq!(f.chain_point(&x, 0).entries(), &[x.clone()]);
        let c = f.chain_point(&x, 2);
        let want = [t2(0.3, 0.4), t2(0.6, 0.8), t2(0.2, 0.6)];
        for (a, b) in c.entries().iter().zip(&want) {
            assert!(close(a, b, 1e-12));
        }
        let id = MapHandle::Toral(ToralEndo::identity(2).unwrap());
        assert!(id.chain_point(&x, 5).entries().iter().all(|p| p == &x));
        for g in families() {
            let mut rng = SeedStream::new(3).rng();
            let x = sample_uniform(g.manifold(), &mut rng);
            let c = g.chain_point(&x, 4);
            for (j, e) in c.entries().iter().enumerate() {
                assert_eq!(e, &g.iterate(&x, j));
            }
        }
    }

    #[test]
    fn sheared_conjugacy() {
        let s = ShearedEndo::new(ToralEndo::diagonal(&[2, 2]).unwrap(), 0.3, ShearProfile::Sin).unwrap();
        let base = MapHandle::Toral(s.base().clone());
        let f = MapHandle::Sheared(s.clone());
        let mut rng = SeedStream::new(4).rng();
        for _ in 0..1000 {
            let x = sample_uniform(ManifoldId::Torus(2), &mut rng);
            assert!(close(&f.eval(&s.shear(&x)), &s.shear(&base.eval(&x)), 1e-9));
            assert!(close(&s.unshear(&s.shear(&x)), &x, 1e-12));
        }
        assert!(ShearedEndo::new(ToralEndo::diagonal(&[2, 2]).unwrap(), 1.0, ShearProfile::Sin).is_err());
    }

    #[test]
    fn sheared_differential_matches_finite_differences() {
        let f = sheared(0.4);
        let x = t2(0.31, 0.77);
        let d = f.differential(&x);
        let h = 1e-6;
        for j in 0..2 {
            let mut a = x.coords().to_vec();
            let mut b = x.coords().to_vec();
            a[j] += h;
            b[j] -= h;
            let fa = f.eval(&Point::torus(&a).unwrap());
            let fb = f.eval(&Point::torus(&b).unwrap());
            for i in 0..2 {
                let mut diff = fa.coords()[i] - fb.coords()[i];
                diff -= diff.round();
                assert!((diff / (2.0 * h) - d[(i, j)]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn iterate_distortion_examples() {
        let f = toral(&[[2, 0], [0, 2]]);
        for k in 1..=5 {
            let e = f.iterate_distortion(k, 50, SeedStream::new(1)).unwrap();
            assert!((e.value - 1.0).abs() < 1e-12);
        }
        let s = sphere(3);
        for k in 1..=4 {
            let e = s.iterate_distortion(k, 200, SeedStream::new(2)).unwrap();
            assert!((e.value - 1.0).abs() < 1e-9, "{}", e.value);
        }
    }

    #[test]
    fn sheared_distortion_below_conjugation_bound() {
        // K_h for the shear I + a e1 e2^T with |a| <= s: largest singular
        // value (s + sqrt(s^2 + 4)) / 2, squared for n = 2
        let s = 0.1f64;
        let sigma = 0.5 * (s + (s * s + 4.0).sqrt());
        let k_h = sigma * sigma;
        let f = sheared(s);
        assert!((f.uniform_distortion_bound().unwrap() - k_h * k_h).abs() < 1e-12);
        for k in 1..=10 {
            let e = f.iterate_distortion(k, 500, SeedStream::new(k as u64)).unwrap();
            assert!(e.value >= 1.0 && e.value <= k_h * k_h + 1e-9, "k={k}: {}", e.value);
        }
    }

    #[test]
    fn map_spec_round_trip() {
        for f in families() {
            if f.dim() != 2 && !matches!(f, MapHandle::Sphere(_)) {
                continue;
            }
            let spec = MapSpec::from(&f);
            let json = serde_json::to_string(&spec).unwrap();
            let back: MapSpec = serde_json::from_str(&json).unwrap();
            assert_eq!(back.build().unwrap(), f);
        }
        let bad: MapSpec = serde_json::from_str(r#"{"family":"toral_endo","matrix":[[1,2],[2,4]]}"#).unwrap();
        assert!(bad.build().unwrap_err().to_string().contains("degree undefined: singular matrix"));
        assert!(serde_json::from_str::<MapSpec>(r#"{"family":"sphere_power","degree":2,"x":1}"#).is_err());
    }
}
