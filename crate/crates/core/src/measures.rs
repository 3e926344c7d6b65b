//! Weighted point clouds and the balanced-measure construction.
//!
//! An [`EmpiricalMeasure`] stores its atoms as flat coordinate and weight
//! arrays; clouds of tens of millions of atoms are routine here, so no
//! per-atom allocation happens anywhere on the hot paths.

use std::f64::consts::PI;
use std::io::{Read, Write};

use rayon::prelude::*;
use smallvec::SmallVec;

use crate::dynamics::MapHandle;
use crate::error::{domain, LabError, Result};
use crate::geometry::{sample_uniform, ManifoldId, Point};
use crate::reduce::{det_sum, det_sum_by, det_vec_sum_by};
use crate::rng::SeedStream;

/// Default cap on the number of atoms `balanced_iterate` may create.
pub const DEFAULT_ATOM_CAP: usize = 10_000_000;

/// A bounded function on a model manifold, evaluated on raw coordinates.
pub trait TestFunction: Sync {
    fn eval(&self, x: &[f64]) -> f64;
    fn sup_abs(&self) -> f64;
}

/// A finite family of bounded test functions evaluated together.
pub trait TestFamily: Sync {
    fn len(&self) -> usize;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
    /// Add `weight * eta_j(x)` to `out[j]` for every member `j`.
    fn accumulate(&self, x: &[f64], weight: f64, out: &mut [f64]);
    /// The family `f_* eta_j` itself, when it has a closed form cheaper
    /// than summing over preimages.
    fn pushed_forward<'a>(&'a self, _f: &'a MapHandle) -> Option<Box<dyn TestFamily + 'a>> {
        None
    }
    fn sup_abs(&self, j: usize) -> f64;
    fn label(&self, j: usize) -> String;
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Constant(pub f64);

impl TestFunction for Constant {
    fn eval(&self, _: &[f64]) -> f64 {
        self.0
    }
    fn sup_abs(&self) -> f64 {
        self.0.abs()
    }
}

/// Wraps a closure together with a bound on its absolute value.
pub struct FnTest<F> {
    pub f: F,
    pub sup: f64,
}

impl<F: Fn(&[f64]) -> f64 + Sync> TestFunction for FnTest<F> {
    fn eval(&self, x: &[f64]) -> f64 {
        (self.f)(x)
    }
    fn sup_abs(&self) -> f64 {
        self.sup
    }
}

/// A measurable region used for mass queries and indicator tests.
#[derive(Debug, Clone, PartialEq)]
pub enum Region {
    /// Half-open coordinate box `[lo, hi)` on the torus.
    TorusBox { lo: Vec<f64>, hi: Vec<f64> },
    /// Open chordal cap `|x - center| < chordal` on the sphere.
    Cap { center: [f64; 3], chordal: f64 },
    /// Points within chordal distance `chordal` of the unit-circle equator.
    EquatorBand { chordal: f64 },
    /// Union of the chordal caps of radius `chordal` about both poles.
    PoleCaps { chordal: f64 },
}

fn chord2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum()
}

impl Region {
    pub fn contains(&self, x: &[f64]) -> bool {
        match self {
            Region::TorusBox { lo, hi } => {
                x.iter().zip(lo.iter().zip(hi)).all(|(v, (l, h))| *v >= *l && *v < *h)
            }
            Region::Cap { center, chordal } => chord2(x, center) < chordal * chordal,
            Region::EquatorBand { chordal } => {
                // distance to the nearest equator point is 2 sin(|lat| / 2)
                let rho = (x[0] * x[0] + x[1] * x[1]).sqrt();
                let d2 = (1.0 - rho).powi(2) + x[2] * x[2];
                d2 < chordal * chordal
            }
            Region::PoleCaps { chordal } => {
                let r2 = chordal * chordal;
                chord2(x, &[0.0, 0.0, 1.0]) < r2 || chord2(x, &[0.0, 0.0, -1.0]) < r2
            }
        }
    }
}

impl TestFunction for Region {
    fn eval(&self, x: &[f64]) -> f64 {
        if self.contains(x) {
            1.0
        } else {
            0.0
        }
    }
    fn sup_abs(&self) -> f64 {
        1.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Cos,
    Sin,
}

/// `cos(2 pi xi . x)` or `sin(2 pi xi . x)` on the torus.
#[derive(Debug, Clone, PartialEq)]
pub struct FourierMode {
    pub freq: Vec<i32>,
    pub phase: Phase,
}

impl TestFunction for FourierMode {
    fn eval(&self, x: &[f64]) -> f64 {
        let t: f64 = 2.0 * PI * self.freq.iter().zip(x).map(|(k, v)| *k as f64 * v).sum::<f64>();
        match self.phase {
            Phase::Cos => t.cos(),
            Phase::Sin => t.sin(),
        }
    }
    fn sup_abs(&self) -> f64 {
        1.0
    }
}

// Tables up to this size live on the stack.
const INLINE_POWERS: usize = 32;

/// Calls `body` with the table of `exp(2 pi i k x_i)` for `|k| <= c`,
/// stored at `i * (2c + 1) + c + k`.
fn with_char_powers<R>(x: &[f64], c: usize, body: impl FnOnce(&[(f64, f64)]) -> R) -> R {
    let w = 2 * c + 1;
    let len = x.len() * w;
    let fill = |powers: &mut [(f64, f64)]| {
        for (i, xi) in x.iter().enumerate() {
            let (s, co) = (2.0 * PI * xi).sin_cos();
            let row = &mut powers[i * w..(i + 1) * w];
            row[c] = (1.0, 0.0);
            let mut p = (1.0, 0.0);
            for k in 1..=c {
                p = (p.0 * co - p.1 * s, p.0 * s + p.1 * co);
                row[c + k] = p;
                row[c - k] = (p.0, -p.1);
            }
        }
    };
    if len <= INLINE_POWERS {
        let mut buf = [(0.0, 0.0); INLINE_POWERS];
        fill(&mut buf[..len]);
        body(&buf[..len])
    } else {
        let mut buf = vec![(0.0, 0.0); len];
        fill(&mut buf);
        body(&buf)
    }
}

fn cmul(a: (f64, f64), b: (f64, f64)) -> (f64, f64) {
    (a.0 * b.0 - a.1 * b.1, a.0 * b.1 + a.1 * b.0)
}

/// Fourier modes `|xi_i| <= cutoff` (one of each `+-xi` pair, cosine and
/// sine) followed by indicators of the dyadic boxes of side `2^-depth`.
#[derive(Debug, Clone, PartialEq)]
pub struct FourierBoxFamily {
    n: usize,
    cutoff: i32,
    depth: u32,
    modes: Vec<Vec<i32>>,
    /// Per mode and axis, the slot of `exp(2 pi i xi_i x_i)` in the
    /// table built by `accumulate`.
    power_index: Vec<u32>,
}

impl FourierBoxFamily {
    pub fn new(n: usize, cutoff: i32, depth: u32) -> Self {
        let side = 2 * cutoff + 1;
        let mut modes = Vec::new();
        for code in 0..side.pow(n as u32) {
            let mut c = code;
            let xi: Vec<i32> = (0..n)
                .map(|_| {
                    let v = c % side - cutoff;
                    c /= side;
                    v
                })
                .collect();
            // keep the half-space representative of each +-xi pair
            if xi.iter().find(|&&v| v != 0).is_some_and(|&v| v > 0) {
                modes.push(xi);
            }
        }
        let w = side as usize;
        let power_index = modes
            .iter()
            .flat_map(|xi| xi.iter().enumerate().map(move |(i, k)| (i * w + (cutoff + k) as usize) as u32))
            .collect();
        FourierBoxFamily { n, cutoff, depth, modes, power_index }
    }

    pub fn modes(&self) -> &[Vec<i32>] {
        &self.modes
    }

    fn boxes_per_axis(&self) -> usize {
        1 << self.depth
    }

    fn n_boxes(&self) -> usize {
        self.boxes_per_axis().pow(self.n as u32)
    }

    fn accumulate_with(&self, powers: &[(f64, f64)], x: &[f64], weight: f64, out: &mut [f64]) {
        let (waves, boxes) = out.split_at_mut(2 * self.modes.len());
        for (idx, o) in self.power_index.chunks_exact(self.n).zip(waves.chunks_exact_mut(2)) {
            let z = idx[1..].iter().fold(powers[idx[0] as usize], |z, &p| cmul(z, powers[p as usize]));
            o[0] += weight * z.0;
            o[1] += weight * z.1;
        }
        let b = self.boxes_per_axis();
        let mut cell = 0;
        for v in x.iter().rev() {
            cell = cell * b + ((v * b as f64) as usize).min(b - 1);
        }
        boxes[cell] += weight;
    }
}

impl TestFamily for FourierBoxFamily {
    fn len(&self) -> usize {
        2 * self.modes.len() + self.n_boxes()
    }

    fn accumulate(&self, x: &[f64], weight: f64, out: &mut [f64]) {
        if self.modes.is_empty() {
            return self.accumulate_with(&[], x, weight, out);
        }
        with_char_powers(x, self.cutoff as usize, |powers| self.accumulate_with(powers, x, weight, out))
    }

    fn pushed_forward<'a>(&'a self, f: &'a MapHandle) -> Option<Box<dyn TestFamily + 'a>> {
        let MapHandle::Toral(t) = f else {
            return None;
        };
        let duals: Vec<(usize, SmallVec<[i64; 8]>)> =
            self.modes.iter().enumerate().filter_map(|(j, xi)| Some((j, t.dual_preimage(xi)?))).collect();
        let reach = duals.iter().flat_map(|(_, p)| p.iter()).map(|v| v.unsigned_abs() as usize).max().unwrap_or(0);
        let w = 2 * reach + 1;
        let duals = duals
            .into_iter()
            .map(|(j, p)| (j, p.iter().enumerate().map(|(i, &k)| i * w + (reach as i64 + k) as usize).collect()))
            .collect();
        Some(Box::new(PushedFourierBox { family: self, map: f, duals, reach }))
    }

    fn sup_abs(&self, _: usize) -> f64 {
        1.0
    }

    fn label(&self, j: usize) -> String {
        let m = self.modes.len();
        if j < 2 * m {
            let kind = if j % 2 == 0 { "cos" } else { "sin" };
            format!("{kind}{:?}", self.modes[j / 2])
        } else {
            let b = self.boxes_per_axis();
            let mut c = j - 2 * m;
            let idx: Vec<usize> = (0..self.n)
                .map(|_| {
                    let v = c % b;
                    c /= b;
                    v
                })
                .collect();
            format!("box{idx:?}/{b}")
        }
    }
}

/// `f_* eta` for a [`FourierBoxFamily`] under a linear toral map: the
/// character sums over preimages vanish except on modes `xi` with
/// `A^{-T} xi` integral, where they equal `deg A` times the dual
/// character. Only the boxes need the preimages themselves.
struct PushedFourierBox<'a> {
    family: &'a FourierBoxFamily,
    map: &'a MapHandle,
    /// `(mode, slots)` for the surviving modes, where `slots` index the
    /// table of [`with_char_powers`] at `y` with cutoff `reach`.
    duals: Vec<(usize, SmallVec<[usize; 8]>)>,
    reach: usize,
}

impl TestFamily for PushedFourierBox<'_> {
    fn len(&self) -> usize {
        self.family.len()
    }

    fn accumulate(&self, y: &[f64], weight: f64, out: &mut [f64]) {
        let (waves, boxes) = out.split_at_mut(2 * self.family.modes.len());
        let w = weight * self.map.degree() as f64;
        if !self.duals.is_empty() {
            with_char_powers(y, self.reach, |powers| {
                for (j, slots) in &self.duals {
                    let z = slots.iter().fold((1.0, 0.0), |z, &p| cmul(z, powers[p]));
                    waves[2 * j] += w * z.0;
                    waves[2 * j + 1] += w * z.1;
                }
            });
        }
        let b = self.family.boxes_per_axis();
        self.map.for_each_preimage(y, |z, _| {
            let mut cell = 0;
            for v in z.iter().rev() {
                cell = cell * b + ((v * b as f64) as usize).min(b - 1);
            }
            boxes[cell] += weight;
        });
    }

    fn sup_abs(&self, j: usize) -> f64 {
        self.map.degree() as f64 * self.family.sup_abs(j)
    }

    fn label(&self, j: usize) -> String {
        format!("push({})", self.family.label(j))
    }
}

/// Indicators of chordal caps at Fibonacci-spaced centers on the sphere.
#[derive(Debug, Clone, PartialEq)]
pub struct CapFamily {
    centers: Vec<[f64; 3]>,
    chordal: f64,
}

impl CapFamily {
    pub fn fibonacci(count: usize, chordal: f64) -> Self {
        let golden = PI * (3.0 - 5f64.sqrt());
        let centers = (0..count)
            .map(|i| {
                let z = 1.0 - (2 * i + 1) as f64 / count as f64;
                let r = (1.0 - z * z).sqrt();
                let phi = golden * i as f64;
                [r * phi.cos(), r * phi.sin(), z]
            })
            .collect();
        CapFamily { centers, chordal }
    }

    pub fn centers(&self) -> &[[f64; 3]] {
        &self.centers
    }
}

impl TestFamily for CapFamily {
    fn len(&self) -> usize {
        self.centers.len()
    }
    fn accumulate(&self, x: &[f64], weight: f64, out: &mut [f64]) {
        let r2 = self.chordal * self.chordal;
        for (o, c) in out.iter_mut().zip(&self.centers) {
            if chord2(x, c) < r2 {
                *o += weight;
            }
        }
    }
    fn sup_abs(&self, _: usize) -> f64 {
        1.0
    }
    fn label(&self, j: usize) -> String {
        format!("cap{j}")
    }
}

/// The default test family of a manifold: Fourier modes up to frequency 3
/// plus the 16 (or `4^n`) dyadic boxes of side 1/4 on the torus, caps of
/// chordal radius 0.5 at 20 Fibonacci centers on the sphere.
#[derive(Debug, Clone, PartialEq)]
pub enum DefaultFamily {
    Torus(FourierBoxFamily),
    Sphere(CapFamily),
}

impl DefaultFamily {
    pub fn for_manifold(m: ManifoldId) -> Self {
        match m {
            ManifoldId::Torus(n) => DefaultFamily::Torus(FourierBoxFamily::new(n, 3, 2)),
            ManifoldId::Sphere2 => DefaultFamily::Sphere(CapFamily::fibonacci(20, 0.5)),
        }
    }

    fn inner(&self) -> &dyn TestFamily {
        match self {
            DefaultFamily::Torus(f) => f,
            DefaultFamily::Sphere(f) => f,
        }
    }
}

impl TestFamily for DefaultFamily {
    fn len(&self) -> usize {
        self.inner().len()
    }
    fn accumulate(&self, x: &[f64], weight: f64, out: &mut [f64]) {
        self.inner().accumulate(x, weight, out)
    }
    fn pushed_forward<'a>(&'a self, f: &'a MapHandle) -> Option<Box<dyn TestFamily + 'a>> {
        self.inner().pushed_forward(f)
    }
    fn sup_abs(&self, j: usize) -> f64 {
        self.inner().sup_abs(j)
    }
    fn label(&self, j: usize) -> String {
        self.inner().label(j)
    }
}

/// A finite weighted point cloud on a model manifold.
#[derive(Debug, Clone, PartialEq)]
pub struct EmpiricalMeasure {
    manifold: ManifoldId,
    width: usize,
    coords: Vec<f64>,
    weights: Vec<f64>,
}

impl EmpiricalMeasure {
    pub fn new(manifold: ManifoldId) -> Self {
        EmpiricalMeasure { manifold, width: manifold.ambient_dim(), coords: Vec::new(), weights: Vec::new() }
    }

    pub fn with_capacity(manifold: ManifoldId, atoms: usize) -> Self {
        let width = manifold.ambient_dim();
        EmpiricalMeasure {
            manifold,
            width,
            coords: Vec::with_capacity(atoms * width),
            weights: Vec::with_capacity(atoms),
        }
    }

    pub fn from_atoms(manifold: ManifoldId, atoms: &[(Point, f64)]) -> Result<Self> {
        let mut m = Self::with_capacity(manifold, atoms.len());
        for (p, w) in atoms {
            m.push(p, *w)?;
        }
        Ok(m)
    }

    pub fn dirac(p: &Point) -> Self {
        let mut m = Self::new(p.manifold());
        m.push_raw(p.coords(), 1.0);
        m
    }

    /// `count` independent uniform samples of weight `1/count`.
    pub fn uniform(manifold: ManifoldId, count: usize, stream: SeedStream) -> Result<Self> {
        if count == 0 {
            return domain("uniform cloud needs at least one sample");
        }
        let w = 1.0 / count as f64;
        let width = manifold.ambient_dim();
        let mut coords = vec![0.0; count * width];
        coords
            .par_chunks_mut(crate::reduce::CHUNK * width)
            .enumerate()
            .for_each(|(c, block)| {
                let mut rng = stream.split(c as u64).rng();
                for slot in block.chunks_exact_mut(width) {
                    slot.copy_from_slice(sample_uniform(manifold, &mut rng).coords());
                }
            });
        Ok(EmpiricalMeasure { manifold, width, coords, weights: vec![w; count] })
    }

    /// Cell centers of the regular grid with `per_axis` points per axis.
    pub fn torus_grid(n: usize, per_axis: usize) -> Result<Self> {
        let manifold = ManifoldId::torus(n)?;
        if per_axis == 0 {
            return domain("grid needs at least one point per axis");
        }
        let count = per_axis.pow(n as u32);
        let mut coords = Vec::with_capacity(count * n);
        for i in 0..count {
            let mut c = i;
            for _ in 0..n {
                coords.push(((c % per_axis) as f64 + 0.5) / per_axis as f64);
                c /= per_axis;
            }
        }
        Ok(EmpiricalMeasure { manifold, width: n, coords, weights: vec![1.0 / count as f64; count] })
    }

    pub fn push(&mut self, p: &Point, weight: f64) -> Result<()> {
        if p.manifold() != self.manifold {
            return domain(format!("atom on {} pushed into a measure on {}", p.manifold(), self.manifold));
        }
        if !(weight >= 0.0 && weight.is_finite()) {
            return domain(format!("atom weight must be finite and non-negative, got {weight}"));
        }
        self.push_raw(p.coords(), weight);
        Ok(())
    }

    fn push_raw(&mut self, x: &[f64], weight: f64) {
        self.coords.extend_from_slice(x);
        self.weights.push(weight);
    }

    pub fn manifold(&self) -> ManifoldId {
        self.manifold
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn coords(&self, i: usize) -> &[f64] {
        &self.coords[i * self.width..(i + 1) * self.width]
    }

    pub fn weight(&self, i: usize) -> f64 {
        self.weights[i]
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn atom(&self, i: usize) -> (Point, f64) {
        (Point::from_raw(self.manifold, self.coords(i)), self.weights[i])
    }

    pub fn total(&self) -> f64 {
        det_sum(&self.weights)
    }

    /// Copy rescaled to total mass 1.
    pub fn normalized(&self) -> Result<Self> {
        let t = self.total();
        if t <= 0.0 {
            return domain("cannot normalize a measure of zero mass");
        }
        let mut out = self.clone();
        out.weights.iter_mut().for_each(|w| *w /= t);
        Ok(out)
    }

    /// Write one atom per row (`x0, .., weight`) with 17 significant digits.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header: Vec<String> = (0..self.width).map(|j| format!("x{j}")).collect();
        header.push("weight".into());
        w.write_record(&header)?;
        for i in 0..self.len() {
            let mut row: Vec<String> = self.coords(i).iter().map(|v| format!("{v:.16e}")).collect();
            row.push(format!("{:.16e}", self.weights[i]));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(manifold: ManifoldId, reader: R) -> Result<Self> {
        let mut r = csv::Reader::from_reader(reader);
        let width = manifold.ambient_dim();
        let mut m = Self::new(manifold);
        for record in r.records() {
            let record = record?;
            if record.len() != width + 1 {
                return domain(format!("expected {} columns, found {}", width + 1, record.len()));
            }
            let vals = record
                .iter()
                .map(|s| s.trim().parse::<f64>())
                .collect::<std::result::Result<Vec<f64>, _>>()
                .map_err(|e| LabError::Domain(format!("bad number in measure CSV: {e}")))?;
            // validate, but keep the stored bits so the round trip is exact
            let p = Point::new(manifold, &vals[..width])?;
            if chord2(p.coords(), &vals[..width]) > 1e-24 {
                return domain(format!("row {:?} is not a normalized point of {manifold}", &vals[..width]));
            }
            let w = vals[width];
            if !(w >= 0.0 && w.is_finite()) {
                return domain(format!("atom weight must be finite and non-negative, got {w}"));
            }
            m.push_raw(&vals[..width], w);
        }
        Ok(m)
    }
}

/// `∫ eta dmu`.
pub fn integrate(mu: &EmpiricalMeasure, eta: &dyn TestFunction) -> f64 {
    det_sum_by(mu.len(), |i| mu.weights[i] * eta.eval(mu.coords(i)))
}

/// `∫ eta_j dmu` for every member of a family.
pub fn integrate_family(mu: &EmpiricalMeasure, family: &dyn TestFamily) -> Vec<f64> {
    det_vec_sum_by(mu.len(), family.len(), |i, out| family.accumulate(mu.coords(i), mu.weights[i], out))
}

/// Mass of `mu` inside a region.
pub fn box_mass(mu: &EmpiricalMeasure, region: &Region) -> f64 {
    integrate(mu, region)
}

/// `(f_* eta)(x) = sum over z in f^{-1}(x) of i(z, f) eta(z)`.
pub fn pushforward_eval(f: &MapHandle, eta: &dyn TestFunction, x: &Point) -> f64 {
    assert_eq!(x.manifold(), f.manifold(), "point is not on the map's manifold");
    let mut s = 0.0;
    f.for_each_preimage(x.coords(), |z, i| s += i as f64 * eta.eval(z));
    s
}

/// `∫ f_* eta dmu`.
pub fn pushforward_integral(f: &MapHandle, mu: &EmpiricalMeasure, eta: &dyn TestFunction) -> f64 {
    det_sum_by(mu.len(), |i| {
        let mut s = 0.0;
        f.for_each_preimage(mu.coords(i), |z, idx| s += idx as f64 * eta.eval(z));
        mu.weights[i] * s
    })
}

fn check_manifold(f: &MapHandle, mu: &EmpiricalMeasure) -> Result<()> {
    if f.manifold() != mu.manifold() {
        return domain(format!("measure on {} but map acts on {}", mu.manifold(), f.manifold()));
    }
    Ok(())
}

/// `f^* mu`: every atom `(x, w)` becomes the atoms `(z, w i(z, f))` over
/// the preimages `z` of `x`. The total mass is multiplied by `deg f`.
pub fn pullback(f: &MapHandle, mu: &EmpiricalMeasure) -> Result<EmpiricalMeasure> {
    check_manifold(f, mu)?;
    let mut out = EmpiricalMeasure::with_capacity(mu.manifold, mu.len() * f.degree() as usize);
    for i in 0..mu.len() {
        let w = mu.weights[i];
        f.for_each_preimage(mu.coords(i), |z, idx| out.push_raw(z, w * idx as f64));
    }
    let (a, b) = (out.total(), f.degree() as f64 * mu.total());
    if (a - b).abs() > 1e-9 * b.max(1.0) {
        return Err(LabError::Internal(format!("pull-back mass {a} differs from deg f * mass = {b}")));
    }
    Ok(out)
}

/// Leaves of the depth-`k` preimage tree of `y`, with index products.
fn preimage_leaves(f: &MapHandle, y: &[f64], k: usize, coords: &mut Vec<f64>, index: &mut Vec<f64>) {
    let width = y.len();
    let mut level_c = y.to_vec();
    let mut level_i = vec![1.0];
    for _ in 0..k {
        let mut next_c = Vec::with_capacity(level_c.len() * f.degree() as usize);
        let mut next_i = Vec::with_capacity(level_i.len() * f.degree() as usize);
        for (x, w) in level_c.chunks_exact(width).zip(&level_i) {
            f.for_each_preimage(x, |z, i| {
                next_c.extend_from_slice(z);
                next_i.push(w * i as f64);
            });
        }
        level_c = next_c;
        level_i = next_i;
    }
    coords.extend_from_slice(&level_c);
    index.extend_from_slice(&level_i);
}

/// The pre-limit `(deg f^k)^{-1} (f^k)^* vol` of the balanced measure,
/// built from `m` uniform base samples expanded into depth-`k` preimage
/// trees. Each leaf weighs (product of local indices) / (m deg^k).
pub fn balanced_iterate(
    f: &MapHandle,
    k: usize,
    m: usize,
    stream: SeedStream,
    atom_cap: usize,
) -> Result<EmpiricalMeasure> {
    if m == 0 {
        return domain("balanced_iterate needs at least one base sample");
    }
    let manifold = f.manifold();
    if k == 0 {
        return EmpiricalMeasure::uniform(manifold, m, stream);
    }
    let leaves = (f.degree() as f64).powi(k as i32);
    if m as f64 * leaves > atom_cap as f64 {
        return Err(LabError::Budget(format!(
            "balanced_iterate would create {} atoms, above the cap of {atom_cap}; reduce k or m",
            m as f64 * leaves
        )));
    }
    let width = manifold.ambient_dim();
    const GROUP: usize = 16;
    let parts: Vec<(Vec<f64>, Vec<f64>)> = (0..m.div_ceil(GROUP))
        .into_par_iter()
        .map(|g| {
            let mut c = Vec::new();
            let mut w = Vec::new();
            for s in g * GROUP..((g + 1) * GROUP).min(m) {
                let mut rng = stream.split(s as u64).rng();
                let y = sample_uniform(manifold, &mut rng);
                preimage_leaves(f, y.coords(), k, &mut c, &mut w);
            }
            (c, w)
        })
        .collect();
    let atoms: usize = parts.iter().map(|p| p.1.len()).sum();
    let mut out = EmpiricalMeasure {
        manifold,
        width,
        coords: Vec::with_capacity(atoms * width),
        weights: Vec::with_capacity(atoms),
    };
    let scale = 1.0 / (m as f64 * leaves);
    for (c, w) in parts {
        out.coords.extend_from_slice(&c);
        out.weights.extend(w.iter().map(|v| v * scale));
    }
    let total = out.total();
    if (total - 1.0).abs() > 1e-9 {
        return Err(LabError::Internal(format!("balanced iterate has total mass {total}")));
    }
    Ok(out)
}

/// Outcome of [`balancedness_residual`].
#[derive(Debug, Clone, PartialEq)]
pub struct Residual {
    pub value: f64,
    pub worst: String,
}

/// `max_eta |∫ f_* eta dmu - deg f ∫ eta dmu| / (deg f sup|eta|)`; zero
/// exactly when `f^* mu = (deg f) mu` on the family.
pub fn balancedness_residual(f: &MapHandle, mu: &EmpiricalMeasure, family: &dyn TestFamily) -> Result<Residual> {
    check_manifold(f, mu)?;
    let deg = f.degree() as f64;
    let pushed = match family.pushed_forward(f) {
        Some(p) => integrate_family(mu, p.as_ref()),
        None => det_vec_sum_by(mu.len(), family.len(), |i, out| {
            let w = mu.weights[i];
            f.for_each_preimage(mu.coords(i), |z, idx| family.accumulate(z, w * idx as f64, out));
        }),
    };
    let plain = integrate_family(mu, family);
    let mut best = Residual { value: 0.0, worst: String::new() };
    for j in 0..family.len() {
        let r = (pushed[j] - deg * plain[j]).abs() / (deg * family.sup_abs(j));
        if r > best.value || best.worst.is_empty() {
            best = Residual { value: r.max(best.value), worst: family.label(j) };
        }
    }
    Ok(best)
}

/// Mass of `mu` within chordal distance `r` of either pole, per radius.
pub fn pole_mass_table(mu: &EmpiricalMeasure, radii: &[f64]) -> Result<Vec<(f64, f64)>> {
    if mu.manifold() != ManifoldId::Sphere2 {
        return domain("pole masses are defined on the sphere");
    }
    Ok(radii.iter().map(|&r| (r, box_mass(mu, &Region::PoleCaps { chordal: r }))).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{SpherePowerMap, ToralEndo};
    use nalgebra::Complex;

    fn doubling() -> MapHandle {
        MapHandle::Toral(ToralEndo::diagonal(&[2, 2]).unwrap())
    }

    fn families() -> Vec<MapHandle> {
        vec![
            doubling(),
            MapHandle::Toral(ToralEndo::diagonal(&[2, 3]).unwrap()),
            MapHandle::Toral(ToralEndo::new(&[vec![2, 1], vec![0, 2]]).unwrap()),
            MapHandle::Sphere(SpherePowerMap::new(2).unwrap()),
            MapHandle::Sphere(SpherePowerMap::new(3).unwrap()),
        ]
    }

    fn t2(x: f64, y: f64) -> Point {
        Point::torus(&[x, y]).unwrap()
    }

    fn quarter_box() -> Region {
        Region::TorusBox { lo: vec![0.0, 0.0], hi: vec![0.5, 0.5] }
    }

    #[test]
    fn pushforward_examples() {
        for f in families() {
            let x = sample_uniform(f.manifold(), &mut SeedStream::new(1).rng());
            assert_eq!(pushforward_eval(&f, &Constant(1.0), &x), f.degree() as f64);
        }
        assert_eq!(pushforward_eval(&doubling(), &quarter_box(), &t2(0.0, 0.0)), 1.0);
        let s = MapHandle::Sphere(SpherePowerMap::new(2).unwrap());
        let cap = Region::Cap { center: [0.0, 0.0, 1.0], chordal: 0.05 };
        assert_eq!(pushforward_eval(&s, &cap, &Point::north_pole()), 2.0);
    }

    #[test]
    fn pullback_examples() {
        let mu = EmpiricalMeasure::dirac(&t2(0.0, 0.0));
        let p = pullback(&doubling(), &mu).unwrap();
        assert_eq!(p.len(), 4);
        assert!(p.weights().iter().all(|&w| w == 1.0));
        assert_eq!(p.total(), 4.0);

        let s = MapHandle::Sphere(SpherePowerMap::new(2).unwrap());
        let p = pullback(&s, &EmpiricalMeasure::dirac(&Point::north_pole())).unwrap();
        assert_eq!(p.len(), 1);
        assert_eq!(p.atom(0), (Point::north_pole(), 2.0));
    }

    fn random_measure(m: ManifoldId, atoms: usize, stream: SeedStream) -> EmpiricalMeasure {
        let mut rng = stream.rng();
        let mut mu = EmpiricalMeasure::new(m);
        for _ in 0..atoms {
            let w: f64 = rand::Rng::random(&mut rng);
            mu.push(&sample_uniform(m, &mut rng), w).unwrap();
        }
        mu
    }

    #[test]
    fn mass_conservation_and_duality() {
        for (t, f) in families().iter().enumerate() {
            for trial in 0..50u64 {
                let stream = SeedStream::new(77).split(t as u64).split(trial);
                let mu = random_measure(f.manifold(), 20, stream.split(0));
                let p = pullback(f, &mu).unwrap();
                assert!((p.total() - f.degree() as f64 * mu.total()).abs() < 1e-9);
                // random smooth test function: a shifted cosine bump
                let c = sample_uniform(f.manifold(), &mut stream.split(1).rng());
                let a: f64 = rand::Rng::random(&mut stream.split(2).rng());
                let eta = FnTest {
                    f: |x: &[f64]| a * (3.0 * chord2(x, c.coords())).cos(),
                    sup: a,
                };
                let lhs = integrate(&p, &eta);
                let rhs = pushforward_integral(f, &mu, &eta);
                assert!((lhs - rhs).abs() < 1e-9, "{lhs} vs {rhs}");
            }
        }
    }

    #[test]
    fn integrate_examples() {
        let mu = EmpiricalMeasure::uniform(ManifoldId::Torus(2), 1000, SeedStream::new(3)).unwrap();
        assert!((integrate(&mu, &Constant(2.5)) - 2.5).abs() < 1e-12);
        let x = t2(0.2, 0.7);
        let eta = FourierMode { freq: vec![1, 2], phase: Phase::Sin };
        assert_eq!(integrate(&EmpiricalMeasure::dirac(&x), &eta), eta.eval(x.coords()));
    }

    #[test]
    fn uniform_box_mass() {
        let mu = EmpiricalMeasure::uniform(ManifoldId::Torus(2), 1_000_000, SeedStream::new(4)).unwrap();
        assert!((box_mass(&mu, &quarter_box()) - 0.25).abs() < 0.002);
        assert!((mu.total() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn balanced_toral_boxes_match_lebesgue() {
        let f = doubling();
        let mu = balanced_iterate(&f, 4, 10_000, SeedStream::new(5), DEFAULT_ATOM_CAP).unwrap();
        assert_eq!(mu.len(), 10_000 * 256);
        assert!((mu.total() - 1.0).abs() < 1e-9);
        // oracle: direct uniform sampling of the same boxes
        let lebesgue = EmpiricalMeasure::uniform(ManifoldId::Torus(2), 200_000, SeedStream::new(6)).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let r = Region::TorusBox {
                    lo: vec![i as f64 / 4.0, j as f64 / 4.0],
                    hi: vec![(i + 1) as f64 / 4.0, (j + 1) as f64 / 4.0],
                };
                let got = box_mass(&mu, &r);
                assert!((got - 1.0 / 16.0).abs() < 0.01);
                assert!((got - box_mass(&lebesgue, &r)).abs() < 0.01);
            }
        }
    }

    /// Leaves of the `w -> w^2` root tree computed directly in the chart.
    fn root_tree(w: Complex<f64>, k: usize) -> Vec<Complex<f64>> {
        let mut level = vec![w];
        for _ in 0..k {
            level = level.iter().flat_map(|z| { let r = z.sqrt(); [r, -r] }).collect();
        }
        level
    }

    #[test]
    fn balanced_sphere_matches_root_tree() {
        let f = MapHandle::Sphere(SpherePowerMap::new(2).unwrap());
        let mu = balanced_iterate(&f, 3, 1, SeedStream::new(8), DEFAULT_ATOM_CAP).unwrap();
        let seed = sample_uniform(ManifoldId::Sphere2, &mut SeedStream::new(8).split(0).rng());
        let c = seed.coords();
        let north = c[2] >= 0.0;
        let w = if north {
            Complex::new(c[0], c[1]) / (1.0 + c[2])
        } else {
            Complex::new(c[0], -c[1]) / (1.0 - c[2])
        };
        let leaves = root_tree(w, 3);
        assert_eq!(mu.len(), leaves.len());
        for z in leaves {
            let r2 = z.norm_sqr();
            let p = if north {
                [2.0 * z.re / (1.0 + r2), 2.0 * z.im / (1.0 + r2), (1.0 - r2) / (1.0 + r2)]
            } else {
                [2.0 * z.re / (1.0 + r2), -2.0 * z.im / (1.0 + r2), (r2 - 1.0) / (1.0 + r2)]
            };
            assert!((0..mu.len()).any(|i| chord2(mu.coords(i), &p) < 1e-20));
        }
    }

    #[test]
    fn balanced_sphere_concentrates_on_equator() {
        let f = MapHandle::Sphere(SpherePowerMap::new(2).unwrap());
        let mu = balanced_iterate(&f, 8, 1000, SeedStream::new(9), DEFAULT_ATOM_CAP).unwrap();
        assert!(box_mass(&mu, &Region::EquatorBand { chordal: 0.1 }) >= 0.95);
        let table = pole_mass_table(&mu, &[0.4, 0.2, 0.1, 0.05]).unwrap();
        assert!(table.windows(2).all(|w| w[1].1 <= w[0].1));
        assert!(table.last().unwrap().1 <= 1e-3);
    }

    #[test]
    fn zero_depth_is_uniform_cloud() {
        let f = doubling();
        let a = balanced_iterate(&f, 0, 500, SeedStream::new(10), DEFAULT_ATOM_CAP).unwrap();
        let b = EmpiricalMeasure::uniform(ManifoldId::Torus(2), 500, SeedStream::new(10)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn atom_cap_is_a_budget_error() {
        let err = balanced_iterate(&doubling(), 10, 100, SeedStream::new(1), 1000).unwrap_err();
        assert!(matches!(err, LabError::Budget(_)));
    }

    #[test]
    fn balanced_iterate_is_thread_count_invariant() {
        let f = doubling();
        let run = |threads| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| balanced_iterate(&f, 3, 2000, SeedStream::new(11), DEFAULT_ATOM_CAP).unwrap())
        };
        let (a, b) = (run(1), run(4));
        assert_eq!(a, b);
        assert_eq!(a.total().to_bits(), b.total().to_bits());
    }

    /// `(1/N^n) sum over grid centers of e(eta . x)`, per axis.
    fn grid_character(eta: &[f64], per_axis: usize) -> Complex<f64> {
        eta.iter().fold(Complex::new(1.0, 0.0), |acc, &e| {
            let s: Complex<f64> = (0..per_axis)
                .map(|j| Complex::from_polar(1.0, 2.0 * PI * e * (j as f64 + 0.5) / per_axis as f64))
                .sum();
            acc * s / per_axis as f64
        })
    }

    #[test]
    fn grid_residual_against_character_sums() {
        let f = doubling();
        let mu = EmpiricalMeasure::torus_grid(2, 64).unwrap();
        let fam = FourierBoxFamily::new(2, 3, 2);
        assert_eq!(fam.modes().len(), 24);
        let r = balancedness_residual(&f, &mu, &fam).unwrap();
        assert!(r.value <= 0.01, "{r:?}");
        // closed form: f_* e_xi = 4 e_{xi/2} when xi is even, 0 otherwise
        for xi in fam.modes() {
            let pushed = if xi.iter().all(|k| k % 2 == 0) {
                let half: Vec<f64> = xi.iter().map(|&k| k as f64 / 2.0).collect();
                grid_character(&half, 64) * 4.0
            } else {
                Complex::new(0.0, 0.0)
            };
            let full: Vec<f64> = xi.iter().map(|&k| k as f64).collect();
            let oracle = (pushed - grid_character(&full, 64) * 4.0).norm() / 4.0;
            assert!(oracle <= r.value + 1e-12);
        }
    }

    #[test]
    fn sphere_dirac_residuals() {
        let f = MapHandle::Sphere(SpherePowerMap::new(2).unwrap());
        let fam = DefaultFamily::for_manifold(ManifoldId::Sphere2);
        let pole = EmpiricalMeasure::dirac(&Point::north_pole());
        assert_eq!(balancedness_residual(&f, &pole, &fam).unwrap().value, 0.0);

        // two explicit preimages of a generic point
        let x = Point::sphere([0.6, 0.0, 0.8]).unwrap();
        let w = Complex::new(0.6 / 1.8, 0.0);
        let roots = [w.sqrt(), -w.sqrt()];
        let DefaultFamily::Sphere(caps) = &fam else { unreachable!() };
        let mut oracle: f64 = 0.0;
        for c in caps.centers() {
            let hit = |p: &[f64]| if chord2(p, c) < 0.25 { 1.0 } else { 0.0 };
            let pre: f64 = roots
                .iter()
                .map(|z| {
                    let r2 = z.norm_sqr();
                    hit(&[2.0 * z.re / (1.0 + r2), 2.0 * z.im / (1.0 + r2), (1.0 - r2) / (1.0 + r2)])
                })
                .sum();
            oracle = oracle.max((pre - 2.0 * hit(x.coords())).abs() / 2.0);
        }
        let got = balancedness_residual(&f, &EmpiricalMeasure::dirac(&x), &fam).unwrap().value;
        assert_eq!(got, oracle);
        assert!(got >= 0.5);
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let mu = random_measure(ManifoldId::Sphere2, 50, SeedStream::new(12));
        let mut buf = Vec::new();
        mu.write_csv(&mut buf).unwrap();
        let back = EmpiricalMeasure::read_csv(ManifoldId::Sphere2, buf.as_slice()).unwrap();
        assert_eq!(back.len(), mu.len());
        for i in 0..mu.len() {
            assert_eq!(back.weight(i).to_bits(), mu.weight(i).to_bits());
            for (a, b) in back.coords(i).iter().zip(mu.coords(i)) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
        let t = random_measure(ManifoldId::Torus(3), 20, SeedStream::new(13));
        let mut buf = Vec::new();
        t.write_csv(&mut buf).unwrap();
        assert_eq!(EmpiricalMeasure::read_csv(ManifoldId::Torus(3), buf.as_slice()).unwrap(), t);
    }

    #[test]
    fn fourier_family_matches_direct_evaluation() {
        let fam = FourierBoxFamily::new(2, 3, 2);
        let x = [0.137, 0.871];
        let mut out = vec![0.0; fam.len()];
        fam.accumulate(&x, 1.0, &mut out);
        for (j, xi) in fam.modes().iter().enumerate() {
            let c = FourierMode { freq: xi.clone(), phase: Phase::Cos }.eval(&x);
            let s = FourierMode { freq: xi.clone(), phase: Phase::Sin }.eval(&x);
            assert!((out[2 * j] - c).abs() < 1e-12 && (out[2 * j + 1] - s).abs() < 1e-12);
        }
        let boxes = &out[48..];
        assert_eq!(boxes.iter().sum::<f64>(), 1.0);
        // x lies in box (0, 3) of side 1/4
        assert_eq!(boxes[3 * 4], 1.0);
    }

    #[test]
    fn character_sums_match_explicit_preimages() {
        let fam = FourierBoxFamily::new(2, 3, 2);
        let maps = [
            ToralEndo::diagonal(&[2, 2]).unwrap(),
            ToralEndo::diagonal(&[2, 3]).unwrap(),
            ToralEndo::new(&[vec![2, 1], vec![0, 2]]).unwrap(),
            ToralEndo::new(&[vec![1, 2], vec![3, -1]]).unwrap(),
        ];
        let mut rng = SeedStream::new(6).rng();
        for t in maps {
            let f = MapHandle::Toral(t);
            for _ in 0..50 {
                let y = sample_uniform(f.manifold(), &mut rng);
                let mut fast = vec![0.0; fam.len()];
                let mut slow = vec![0.0; fam.len()];
                fam.pushed_forward(&f).unwrap().accumulate(y.coords(), 0.7, &mut fast);
                f.for_each_preimage(y.coords(), |z, i| fam.accumulate(z, 0.7 * i as f64, &mut slow));
                for (a, b) in fast.iter().zip(&slow) {
                    assert!((a - b).abs() < 1e-11, "{a} vs {b}");
                }
            }
        }
    }
}
