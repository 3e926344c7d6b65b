//! Audit reports and cross-module audits.

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dynamics::MapHandle;
use crate::entropy_measure::{entropy_lower_bound_report, ks_entropy_estimate, MeasureEntropyReport, PartitionSpec};
use crate::entropy_top::{topological_entropy_estimate, EntropyConfig, EntropyEstimate};
use crate::error::{domain, LabError, Result};
use crate::geometry::ManifoldId;
use crate::graph_geometry::ls_slope;
use crate::measures::{balanced_iterate, EmpiricalMeasure, DEFAULT_ATOM_CAP};
use crate::rng::SeedStream;

/// Pass/fail record of one inequality, with both sides and the tolerance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub name: String,
    pub lhs: f64,
    pub rhs: f64,
    pub tolerance: f64,
    pub pass: bool,
    pub config_digest: String,
    pub artifacts: Vec<String>,
    #[serde(default, skip_serializing_if = "serde_json::Value::is_null")]
    pub details: serde_json::Value,
}

/// SHA-256 of the canonical JSON form of a configuration value.
pub fn config_digest<C: Serialize + ?Sized>(config: &C) -> String {
    let json = serde_json::to_vec(config).expect("configuration serializes");
    hex::encode(Sha256::digest(&json))
}

impl AuditReport {
    /// Inequality audit `lhs <= rhs + tolerance`.
    pub fn inequality<C: Serialize + ?Sized>(name: &str, lhs: f64, rhs: f64, tolerance: f64, config: &C) -> Self {
        AuditReport {
            name: name.to_string(),
            lhs,
            rhs,
            tolerance,
            pass: lhs <= rhs + tolerance,
            config_digest: config_digest(config),
            artifacts: Vec::new(),
            details: serde_json::Value::Null,
        }
    }

    /// Equality audit `|lhs - rhs| <= tolerance`.
    pub fn equality<C: Serialize + ?Sized>(name: &str, lhs: f64, rhs: f64, tolerance: f64, config: &C) -> Self {
        let mut r = Self::inequality(name, lhs, rhs, tolerance, config);
        r.pass = (lhs - rhs).abs() <= tolerance;
        r
    }

    pub fn with_details(mut self, details: serde_json::Value) -> Self {
        self.details = details;
        self
    }

    /// Combine with a further condition that must also hold.
    pub fn and(mut self, ok: bool) -> Self {
        self.pass &= ok;
        self
    }
}

/// Result of a Bihari–LaSalle check on one sampled function.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BihariDetails {
    pub grid: usize,
    /// Grid points where the hypothesis holds up to quadrature error.
    pub hypothesis_points: usize,
    /// Length of the leading run of such points; the conclusion is
    /// asserted there.
    pub checked: usize,
    /// Times `t` in the checked run where the conclusion fails.
    pub violations: Vec<f64>,
    pub max_quadrature_error: f64,
}

/// Check `g(t) >= (C/n)^n t^n` wherever `g(s) >= C ∫_0^s g^((n-1)/n)` holds
/// for all grid points `s <= t`.
///
/// `g` holds samples on the uniform grid `t_i = i a / (len - 1)`. The
/// integral uses the trapezoid rule; its error is estimated by comparing
/// against the rule on every second point, and both the hypothesis and the
/// conclusion are granted that much slack plus `1e-9` relative.
pub fn bihari_check(g: &[f64], a: f64, c: f64, n: u32) -> Result<AuditReport> {
    if g.len() < 3 || !(a > 0.0 && a.is_finite()) || !(c > 0.0 && c.is_finite()) || n == 0 {
        return domain("bihari_check needs at least 3 samples, a > 0, C > 0 and n >= 1");
    }
    if !(g[0] >= 0.0) || g[1..].iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
        return domain("g must be positive on (0, a] and nonnegative at 0");
    }
    let len = g.len();
    let h = a / (len - 1) as f64;
    let p = (n - 1) as f64 / n as f64;
    let q: Vec<f64> = g.iter().map(|v| v.powf(p)).collect();
    let mut fine = vec![0.0; len];
    let mut coarse = vec![0.0; len];
    for i in 1..len {
        fine[i] = fine[i - 1] + 0.5 * h * (q[i - 1] + q[i]);
        if i % 2 == 0 {
            coarse[i] = coarse[i - 2] + h * (q[i - 2] + q[i]);
        }
    }
    // running quadrature error, taken from the next even point so odd
    // points are covered too
    let mut err = vec![0.0; len];
    let mut worst: f64 = 0.0;
    for i in 0..len {
        let j = if i % 2 == 0 { i } else { (i + 1).min(len - 1 - (len - 1) % 2) };
        worst = worst.max((fine[j] - coarse[j]).abs());
        err[i] = worst;
    }
    let scale = (c / n as f64).powi(n as i32);
    let mut hypothesis_points = 0;
    let mut checked = 0;
    let mut prefix = true;
    let mut violations = Vec::new();
    let mut excess = f64::NEG_INFINITY;
    for i in 0..len {
        let slack = c * err[i];
        let rhs = c * fine[i];
        let holds = g[i] >= rhs - slack - 1e-9 * rhs;
        if holds {
            hypothesis_points += 1;
        }
        prefix &= holds;
        if !prefix {
            continue;
        }
        checked += 1;
        let t = i as f64 * h;
        let bound = scale * t.powi(n as i32);
        let e = bound - g[i] - slack - 1e-9 * bound;
        excess = excess.max(e);
        if e > 0.0 {
            violations.push(t);
        }
    }
    let details = BihariDetails { grid: len, hypothesis_points, checked, violations, max_quadrature_error: worst };
    let config = serde_json::json!({ "a": a, "c": c, "n": n, "grid": len });
    Ok(AuditReport::inequality("bihari_lasalle", excess.max(0.0), 0.0, 0.0, &config)
        .and(details.violations.is_empty())
        .with_details(serde_json::to_value(&details)?))
}

/// Root of `x = a + b x^p` for `a >= 0`, `b >= 0`, `0 <= p < 1`; the
/// largest one when `a = 0`.
fn solve_fixed_point(a: f64, b: f64, p: f64) -> f64 {
    if p == 0.0 {
        return a + b;
    }
    // x - a - b x^p is convex with a single positive root past its
    // minimum, so Newton from the right converges monotonically
    let mut x = (2.0 * a).max((2.0 * b).powf(1.0 / (1.0 - p)));
    if x == 0.0 {
        return 0.0;
    }
    for _ in 0..200 {
        let fx = x - a - b * x.powf(p);
        let dx = 1.0 - b * p * x.powf(p - 1.0);
        let next = x - fx / dx;
        if !(next < x) || next <= 0.0 {
            break;
        }
        x = next;
    }
    x
}

/// A sampled function satisfying the trapezoid form of the Bihari–LaSalle
/// hypothesis with equality plus a nonnegative noise envelope.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BihariInstance {
    pub a: f64,
    pub c: f64,
    pub n: u32,
    pub g: Vec<f64>,
}

/// Random hypothesis-satisfying instance: `g_i` solves the implicit
/// trapezoid step `g_i = e_i + C T_i(g)` with `e >= 0`.
pub fn bihari_instance(n: u32, rng: &mut impl Rng) -> BihariInstance {
    let len = rng.random_range(200..=1000usize);
    let a = rng.random_range(0.5..2.0);
    let c = rng.random_range(0.5..4.0);
    let h = a / (len - 1) as f64;
    let p = (n - 1) as f64 / n as f64;
    let amp = rng.random_range(0.0..1.0) * (c * a / n as f64).powi(n as i32);
    let bumps: Vec<(f64, f64, f64)> =
        (0..4).map(|_| (rng.random_range(0.0..1.0), rng.random_range(0.0..a), rng.random_range(0.02..0.3))).collect();
    let mut g = vec![0.0f64; len];
    let mut integral = 0.0;
    for i in 1..len {
        let t = i as f64 * h;
        // smooth bumps plus a tiny floor keep g positive on (0, a]
        let noise: f64 = amp * bumps.iter().map(|(w, m, s)| w * (-((t - m) / s).powi(2)).exp()).sum::<f64>()
            + 1e-12 * t;
        let prev = g[i - 1].powf(p);
        let base = noise + c * (integral + 0.5 * h * prev);
        g[i] = solve_fixed_point(base, 0.5 * c * h, p);
        integral += 0.5 * h * (prev + g[i].powf(p));
    }
    BihariInstance { a, c, n, g }
}

/// Run [`bihari_check`] on `count` generated instances alternating
/// `n = 2, 3`.
pub fn bihari_selftest(count: usize, stream: SeedStream) -> Result<AuditReport> {
    let mut excess: f64 = 0.0;
    let mut failures = Vec::new();
    let mut checked = 0;
    for i in 0..count {
        let n = 2 + (i % 2) as u32;
        let inst = bihari_instance(n, &mut stream.split(i as u64).rng());
        let r = bihari_check(&inst.g, inst.a, inst.c, inst.n)?;
        excess = excess.max(r.lhs);
        checked += r.details["checked"].as_u64().unwrap_or(0) as usize;
        if !r.pass {
            failures.push(i);
        }
    }
    let config = serde_json::json!({ "instances": count, "seed": stream.seed() });
    Ok(AuditReport::inequality("bihari_selftest", excess, 0.0, 0.0, &config)
        .and(failures.is_empty())
        .with_details(serde_json::json!({ "instances": count, "checked_points": checked, "failed_instances": failures })))
}

/// All audit tolerances in one place.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Tolerances {
    /// `|h_est - log deg f|` for maps with a uniform distortion bound.
    pub entropy: f64,
    /// The same for torus maps that are not uniformly quasiregular,
    /// whose anisotropy slows the packing counts.
    pub entropy_anisotropic: f64,
    /// Kolmogorov–Sinai estimate against `log deg f`.
    pub ks: f64,
    /// Lower-bound report against `log deg f`.
    pub lower_bound: f64,
    /// Slack on the entropy side of `h <= log deg f + n * growth of log K`.
    pub upper_bound: f64,
    /// Slack in `h <= lov - lodn`.
    pub volume_density: f64,
    /// Balancedness residual above which measure reports warn.
    pub residual: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Tolerances {
            entropy: 0.15,
            entropy_anisotropic: 0.2,
            ks: 0.1,
            lower_bound: 0.01,
            upper_bound: 0.15,
            volume_density: 0.1,
            residual: 0.02,
        }
    }
}

impl Tolerances {
    pub fn entropy_for(&self, f: &MapHandle) -> f64 {
        if f.uniform_distortion_bound().is_some() {
            self.entropy
        } else {
            self.entropy_anisotropic
        }
    }
}

/// Settings of the distortion-growth part of the upper-bound audit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistortionConfig {
    pub k_range: Vec<usize>,
    pub samples: usize,
}

impl Default for DistortionConfig {
    fn default() -> Self {
        DistortionConfig { k_range: (1..=6).collect(), samples: 2000 }
    }
}

/// Settings of [`audit_upper_bound`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UpperBoundConfig {
    pub entropy: EntropyConfig,
    #[serde(default)]
    pub distortion: DistortionConfig,
    #[serde(default = "default_upper_tolerance")]
    pub tolerance: f64,
}

fn default_upper_tolerance() -> f64 {
    Tolerances::default().upper_bound
}

impl UpperBoundConfig {
    pub fn default_for(f: &MapHandle) -> Self {
        UpperBoundConfig {
            entropy: EntropyConfig::default_for(f.manifold()),
            distortion: DistortionConfig::default(),
            tolerance: default_upper_tolerance(),
        }
    }
}

/// Growth of `log K(f^k)` in `k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistortionGrowth {
    pub k: Vec<usize>,
    pub log_k: Vec<f64>,
    pub slope: f64,
}

/// Least-squares slope of the sampled `log K(f^k)` over `config.k_range`.
pub fn distortion_growth(f: &MapHandle, config: &DistortionConfig, stream: SeedStream) -> Result<DistortionGrowth> {
    if config.k_range.len() < 2 {
        return Err(LabError::Config("distortion k range needs at least two values".into()));
    }
    let log_k = config
        .k_range
        .iter()
        .map(|&k| Ok(f.iterate_distortion(k, config.samples, stream.split(k as u64))?.value.ln()))
        .collect::<Result<Vec<f64>>>()?;
    let xs: Vec<f64> = config.k_range.iter().map(|&k| k as f64).collect();
    Ok(DistortionGrowth { k: config.k_range.clone(), slope: ls_slope(&xs, &log_k), log_k })
}

fn upper_bound_report(
    f: &MapHandle,
    estimate: &EntropyEstimate,
    config: &UpperBoundConfig,
    stream: SeedStream,
) -> Result<AuditReport> {
    let growth = distortion_growth(f, &config.distortion, stream.split_named("distortion"))?;
    let n = f.dim() as f64;
    let log_deg = (f.degree() as f64).ln();
    let rhs = log_deg + n * growth.slope.max(0.0);
    let k1 = match f.uniform_distortion_bound() {
        Some(k) => k,
        None => f.iterate_distortion(1, config.distortion.samples, stream.split_named("k1"))?.value,
    };
    let coarse = log_deg + n * k1.ln();
    Ok(AuditReport::inequality("entropy_upper_bound", estimate.value, rhs, config.tolerance, config).with_details(
        serde_json::json!({
            "log_degree": log_deg,
            "distortion_growth": growth,
            "coarse_rhs": coarse,
            "coarse_pass": estimate.value <= coarse + config.tolerance,
            "eps_used": estimate.eps_used,
        }),
    ))
}

/// `h(f) <= log deg f + n * limsup log K(f^k) / k`: the entropy estimate
/// against the degree plus the fitted growth rate of the sampled
/// distortion of the iterates. The cruder `log deg f + n log K(f)` is
/// reported alongside.
pub fn audit_upper_bound(f: &MapHandle, config: &UpperBoundConfig, stream: SeedStream) -> Result<AuditReport> {
    let estimate = topological_entropy_estimate(f, &config.entropy, stream.split_named("entropy"))?;
    upper_bound_report(f, &estimate, config, stream)
}

/// Settings of [`audit_log_degree`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LogDegreeConfig {
    pub entropy: EntropyConfig,
    #[serde(default)]
    pub distortion: DistortionConfig,
    /// Depth and base samples of the balanced measure used by the lower bound.
    pub balanced_k: usize,
    pub balanced_m: usize,
    pub partition: PartitionSpec,
    /// Atoms of the measure fed to the Kolmogorov–Sinai estimate.
    pub ks_atoms: usize,
    pub ks_k: usize,
    #[serde(default)]
    pub tolerances: Tolerances,
}

impl LogDegreeConfig {
    pub fn default_for(f: &MapHandle) -> Self {
        let m = f.manifold();
        let torus = matches!(m, ManifoldId::Torus(_));
        LogDegreeConfig {
            entropy: EntropyConfig::default_for(m),
            distortion: DistortionConfig::default(),
            balanced_k: if torus { 3 } else { 8 },
            balanced_m: 1000,
            partition: PartitionSpec::default_for(m),
            ks_atoms: if torus { 1_000_000 } else { 256_000 },
            ks_k: 4,
            tolerances: Tolerances::default(),
        }
    }
}

/// Balanced measure with about `atoms` atoms: Lebesgue measure on the
/// torus (every torus family here preserves it and it is the balanced
/// measure), a preimage-tree measure on the sphere.
pub fn reference_balanced_measure(f: &MapHandle, atoms: usize, stream: SeedStream) -> Result<EmpiricalMeasure> {
    match f.manifold() {
        ManifoldId::Torus(_) => EmpiricalMeasure::uniform(f.manifold(), atoms, stream),
        ManifoldId::Sphere2 => {
            let deg = f.degree() as usize;
            let mut k = 0;
            while deg.pow(k as u32 + 1) * 100 <= atoms {
                k += 1;
            }
            balanced_iterate(f, k, atoms / deg.pow(k as u32), stream, DEFAULT_ATOM_CAP)
        }
    }
}

/// The statement `h(f) = log deg f` with the measure-theoretic checks
/// around it. Torus maps pass when the entropy estimate, the lower-bound
/// report and the Kolmogorov–Sinai estimate all match `log deg f` and the
/// upper-bound audit passes. Sphere maps only get the upper bound.
pub fn audit_log_degree(f: &MapHandle, config: &LogDegreeConfig, stream: SeedStream) -> Result<AuditReport> {
    let tol = &config.tolerances;
    let log_deg = (f.degree() as f64).ln();
    let estimate = topological_entropy_estimate(f, &config.entropy, stream.split_named("entropy"))?;
    let upper_config =
        UpperBoundConfig { entropy: config.entropy.clone(), distortion: config.distortion.clone(), tolerance: tol.upper_bound };
    let upper = upper_bound_report(f, &estimate, &upper_config, stream.clone())?;
    let balanced = balanced_iterate(f, config.balanced_k, config.balanced_m, stream.split_named("balanced"), DEFAULT_ATOM_CAP)?;
    let lower = entropy_lower_bound_report(f, &balanced, tol.residual)?;
    let reference = reference_balanced_measure(f, config.ks_atoms, stream.split_named("ks"))?;
    let ks = ks_entropy_estimate(f, &reference, config.partition, config.ks_k)?;
    let measure = MeasureEntropyReport::new(&lower, &ks);
    let entropy_tol = tol.entropy_for(f);
    let sphere = f.manifold() == ManifoldId::Sphere2;
    let (report, verdict) = if sphere {
        let ok = estimate.value <= log_deg + entropy_tol && upper.pass;
        let r = AuditReport::inequality("log_degree", estimate.value, log_deg, entropy_tol, config).and(upper.pass);
        (r, if ok { "upper bound verified; equality out of hypothesis" } else { "upper bound violated" })
    } else {
        let ok_lower = (lower.bound - log_deg).abs() <= tol.lower_bound && lower.branch_mass == 0.0;
        let ok_ks = (ks.value - log_deg).abs() <= tol.ks;
        let r = AuditReport::equality("log_degree", estimate.value, log_deg, entropy_tol, config)
            .and(ok_lower)
            .and(ok_ks)
            .and(upper.pass);
        let verdict = if r.pass { "pass" } else { "fail" };
        (r, verdict)
    };
    Ok(report.with_details(serde_json::json!({
        "verdict": verdict,
        "entropy": {
            "value": estimate.value,
            "eps_used": estimate.eps_used,
            "slopes_monotone": estimate.slopes_monotone,
            "note": estimate.note,
        },
        "upper_bound": upper,
        "measure": measure,
        "ks_value": ks.value,
        "residual": lower.residual,
    })))
}
