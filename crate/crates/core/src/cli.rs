//! Configuration-driven experiment runner behind the `uqr-lab` binary.
//!
//! A [`RunConfig`] names a map, an experiment and optional budgets.
//! [`RunConfig::resolve`] fills every missing budget with its default for
//! the map, producing a [`ResolvedConfig`] that is written next to the
//! outputs and can be fed back in to replay the run.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::audits::{
    audit_log_degree, bihari_check, bihari_instance, bihari_selftest, config_digest, distortion_growth,
    AuditReport, DistortionConfig, LogDegreeConfig, Tolerances, UpperBoundConfig,
};
use crate::dynamics::{MapHandle, MapSpec};
use crate::entropy_measure::{
    entropy_lower_bound_report, ks_entropy_estimate, MeasureEntropyReport, PartitionSpec, KS_ATOMS_PER_CELL,
};
use crate::entropy_top::{audit_volume_density, topological_entropy_estimate, EntropyConfig, VolumeDensityConfig};
use crate::error::{LabError, Result};
use crate::geometry::{ManifoldId, Point};
use crate::graph_geometry::{ahlfors_scan, chain_volume, check_pointwise_bound, iterate_components, ls_slope};
use crate::measures::{
    balanced_iterate, balancedness_residual, box_mass, integrate_family, pole_mass_table, DefaultFamily,
    FourierBoxFamily, Region,
};
use crate::rng::SeedStream;

/// Exit statuses of the runner.
pub const EXIT_PASS: i32 = 0;
pub const EXIT_AUDIT_FAIL: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_BUDGET: i32 = 3;

/// Environment variable that overrides the configured seed.
pub const SEED_ENV: &str = "UQR_LAB_SEED";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Experiment {
    EntropyTop,
    EntropyMeasure,
    BalancedMeasure,
    ChainVolume,
    AhlforsScan,
    BihariSelftest,
    AuditAll,
}

impl Experiment {
    pub fn name(self) -> &'static str {
        match self {
            Experiment::EntropyTop => "entropy-top",
            Experiment::EntropyMeasure => "entropy-measure",
            Experiment::BalancedMeasure => "balanced-measure",
            Experiment::ChainVolume => "chain-volume",
            Experiment::AhlforsScan => "ahlfors-scan",
            Experiment::BihariSelftest => "bihari-selftest",
            Experiment::AuditAll => "audit-all",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BalancedBudget {
    pub k: usize,
    pub m: usize,
    pub atom_cap: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeasureEntropyBudget {
    pub partition: PartitionSpec,
    pub atoms: usize,
    pub k_max: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChainVolumeBudget {
    pub k_range: Vec<usize>,
    pub samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AhlforsBudget {
    pub k: usize,
    pub centers: usize,
    pub radii: Vec<f64>,
    pub samples: usize,
    pub spread_bound: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VolumeDensityBudget {
    pub volume_samples: usize,
    pub density_centers: usize,
    pub density_samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PointwiseBudget {
    /// The chain map checked is `(f, f^2, ..., f^powers)`.
    pub powers: usize,
    pub samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BihariBudget {
    pub instances: usize,
}

/// Budgets as written by the user; anything left out takes its default.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Budgets {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub entropy: Option<EntropyConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub distortion: Option<DistortionConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub balanced: Option<BalancedBudget>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub measure_entropy: Option<MeasureEntropyBudget>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub chain_volume: Option<ChainVolumeBudget>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ahlfors: Option<AhlforsBudget>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub volume_density: Option<VolumeDensityBudget>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pointwise: Option<PointwiseBudget>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bihari: Option<BihariBudget>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tolerances: Option<Tolerances>,
}

/// Budgets with every section filled in.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResolvedBudgets {
    pub entropy: EntropyConfig,
    pub distortion: DistortionConfig,
    pub balanced: BalancedBudget,
    pub measure_entropy: MeasureEntropyBudget,
    pub chain_volume: ChainVolumeBudget,
    pub ahlfors: AhlforsBudget,
    pub volume_density: VolumeDensityBudget,
    pub pointwise: PointwiseBudget,
    pub bihari: BihariBudget,
    pub tolerances: Tolerances,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("uqr-lab-out")
}

/// A run configuration as read from disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Required except for `bihari-selftest`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub map: Option<MapSpec>,
    pub experiment: Experiment,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub budgets: Budgets,
}

/// Resolved budgets that also parse as a [`RunConfig`], so a resolved
/// config written beside the outputs replays the run.
pub type ResolvedConfig = RunConfig;

// Largest atom count the default balanced budget may request.
const DEFAULT_BALANCED_ATOMS: usize = 50_000_000;

impl BalancedBudget {
    /// Torus: `m = 10^4` and depth up to 6; sphere: `m = 10^3` and depth up
    /// to 8. The depth is lowered until `m deg^k` fits the atom budget.
    pub fn default_for(f: &MapHandle) -> Self {
        let (k_max, m) = match f.manifold() {
            ManifoldId::Torus(_) => (6, 10_000),
            ManifoldId::Sphere2 => (8, 1000),
        };
        let deg = f.degree() as f64;
        let mut k = k_max;
        while k > 1 && m as f64 * deg.powi(k as i32) > DEFAULT_BALANCED_ATOMS as f64 {
            k -= 1;
        }
        BalancedBudget { k, m, atom_cap: DEFAULT_BALANCED_ATOMS }
    }
}

impl MeasureEntropyBudget {
    pub fn default_for(m: ManifoldId) -> Self {
        let torus = matches!(m, ManifoldId::Torus(_));
        MeasureEntropyBudget {
            partition: PartitionSpec::default_for(m),
            atoms: if torus { 1_000_000 } else { 256_000 },
            k_max: 4,
        }
    }
}

impl AhlforsBudget {
    /// Eight radii geometric from 0.3 to 0.01.
    pub fn default_for(m: ManifoldId) -> Self {
        let radii = (0..8).map(|i| 0.3 * (0.01f64 / 0.3).powf(i as f64 / 7.0)).collect();
        AhlforsBudget {
            k: if m == ManifoldId::Sphere2 { 2 } else { 3 },
            centers: 8,
            radii,
            samples: 20_000,
            spread_bound: 1.5,
        }
    }
}

impl ResolvedBudgets {
    pub fn default_for(f: &MapHandle) -> Self {
        let m = f.manifold();
        let vd = VolumeDensityConfig::default_for(m);
        ResolvedBudgets {
            entropy: EntropyConfig::default_for(m),
            distortion: DistortionConfig::default(),
            balanced: BalancedBudget::default_for(f),
            measure_entropy: MeasureEntropyBudget::default_for(m),
            chain_volume: ChainVolumeBudget { k_range: (0..=6).collect(), samples: 20_000 },
            ahlfors: AhlforsBudget::default_for(m),
            volume_density: VolumeDensityBudget {
                volume_samples: vd.volume_samples,
                density_centers: vd.density_centers,
                density_samples: vd.density_samples,
            },
            pointwise: PointwiseBudget { powers: 3, samples: 10_000 },
            bihari: BihariBudget { instances: 100 },
            tolerances: Tolerances::default(),
        }
    }

    fn into_budgets(self) -> Budgets {
        Budgets {
            entropy: Some(self.entropy),
            distortion: Some(self.distortion),
            balanced: Some(self.balanced),
            measure_entropy: Some(self.measure_entropy),
            chain_volume: Some(self.chain_volume),
            ahlfors: Some(self.ahlfors),
            volume_density: Some(self.volume_density),
            pointwise: Some(self.pointwise),
            bihari: Some(self.bihari),
            tolerances: Some(self.tolerances),
        }
    }

    fn check(&self, m: ManifoldId) -> Result<()> {
        let bad = |msg: &str| Err(LabError::Config(msg.to_string()));
        self.entropy.validate()?;
        if self.distortion.k_range.len() < 2 || self.distortion.samples == 0 {
            return bad("distortion needs at least two k values and positive samples");
        }
        let b = &self.balanced;
        if b.m == 0 || b.atom_cap == 0 {
            return bad("balanced budget needs positive m and atom_cap");
        }
        let me = &self.measure_entropy;
        me.partition.check(m)?;
        if me.atoms < KS_ATOMS_PER_CELL * me.partition.cell_count(m) as usize {
            return bad("measure_entropy.atoms must be at least 100 per partition cell");
        }
        let cv = &self.chain_volume;
        if cv.k_range.len() < 2 || cv.k_range.windows(2).any(|w| w[1] <= w[0]) || cv.samples < 1000 {
            return bad("chain_volume needs a strictly increasing k range of length >= 2 and at least 1000 samples");
        }
        let a = &self.ahlfors;
        if a.centers == 0 || a.samples == 0 || !(a.spread_bound >= 1.0) {
            return bad("ahlfors needs centers, samples and a spread bound >= 1");
        }
        if a.radii.len() < 2 || a.radii.windows(2).any(|w| w[1] >= w[0]) || a.radii.iter().any(|r| *r <= 0.0) {
            return bad("ahlfors radii must be positive and strictly decreasing");
        }
        let vd = &self.volume_density;
        if vd.volume_samples < 1000 || vd.density_centers == 0 || vd.density_samples == 0 {
            return bad("volume_density needs volume_samples >= 1000 and positive density budgets");
        }
        if self.pointwise.powers == 0 || self.pointwise.samples == 0 {
            return bad("pointwise needs positive powers and samples");
        }
        if self.bihari.instances == 0 {
            return bad("bihari needs at least one instance");
        }
        let t = &self.tolerances;
        let all = [t.entropy, t.entropy_anisotropic, t.ks, t.lower_bound, t.upper_bound, t.volume_density, t.residual];
        if all.iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
            return bad("tolerances must be finite and non-negative");
        }
        Ok(())
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| LabError::Config(format!("invalid config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| LabError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    fn map_handle(&self) -> Result<Option<MapHandle>> {
        match &self.map {
            Some(spec) => spec.build().map(Some).map_err(|e| match e {
                LabError::Domain(m) => LabError::Config(m),
                other => other,
            }),
            None if self.experiment == Experiment::BihariSelftest => Ok(None),
            None => Err(LabError::Config(format!("experiment {} needs a map", self.experiment.name()))),
        }
    }

    /// Fill in default budgets and check the result. Bihari runs without
    /// a map resolve only the Bihari budget.
    pub fn resolve(&self) -> Result<ResolvedConfig> {
        let mut out = self.clone();
        let Some(f) = self.map_handle()? else {
            let bihari = self.budgets.bihari.clone().unwrap_or(BihariBudget { instances: 100 });
            if bihari.instances == 0 {
                return Err(LabError::Config("bihari needs at least one instance".into()));
            }
            out.budgets = Budgets { bihari: Some(bihari), ..Budgets::default() };
            return Ok(out);
        };
        let resolved = self.resolved_budgets(&f);
        resolved.check(f.manifold())?;
        out.budgets = resolved.into_budgets();
        Ok(out)
    }

    fn resolved_budgets(&self, f: &MapHandle) -> ResolvedBudgets {
        let b = self.budgets.clone();
        let d = ResolvedBudgets::default_for(f);
        ResolvedBudgets {
            entropy: b.entropy.unwrap_or(d.entropy),
            distortion: b.distortion.unwrap_or(d.distortion),
            balanced: b.balanced.unwrap_or(d.balanced),
            measure_entropy: b.measure_entropy.unwrap_or(d.measure_entropy),
            chain_volume: b.chain_volume.unwrap_or(d.chain_volume),
            ahlfors: b.ahlfors.unwrap_or(d.ahlfors),
            volume_density: b.volume_density.unwrap_or(d.volume_density),
            pointwise: b.pointwise.unwrap_or(d.pointwise),
            bihari: b.bihari.unwrap_or(d.bihari),
            tolerances: b.tolerances.unwrap_or(d.tolerances),
        }
    }
}

/// Contents of `report.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub experiment: Experiment,
    pub map: Option<MapSpec>,
    pub seed: u64,
    pub config_digest: String,
    pub verdict: String,
    pub pass: bool,
    pub audits: Vec<AuditReport>,
    pub summary: serde_json::Value,
}

/// What an experiment produced before it is written out.
#[derive(Debug)]
pub struct RunOutput {
    pub csv: Vec<u8>,
    pub report: RunReport,
}

/// Map a library error onto the runner's exit status.
pub fn exit_code(err: &LabError) -> i32 {
    match err {
        LabError::Config(_) | LabError::Domain(_) | LabError::Json(_) => EXIT_CONFIG,
        LabError::Budget(_) => EXIT_BUDGET,
        LabError::Internal(_) | LabError::Io(_) | LabError::Csv(_) => EXIT_AUDIT_FAIL,
    }
}

fn csv_float(v: f64) -> String {
    format!("{v:.16e}")
}

fn csv_bytes(header: &[&str], rows: &[Vec<String>]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    w.into_inner().map_err(|e| LabError::Io(e.into_error()))
}

fn audit_rows(audits: &[AuditReport]) -> Vec<Vec<String>> {
    audits
        .iter()
        .map(|a| vec![a.name.clone(), csv_float(a.lhs), csv_float(a.rhs), csv_float(a.tolerance), a.pass.to_string()])
        .collect()
}

const AUDIT_HEADER: [&str; 5] = ["audit", "lhs", "rhs", "tolerance", "pass"];

/// Execute a resolved configuration without touching the filesystem.
pub fn execute(config: &ResolvedConfig) -> Result<RunOutput> {
    let stream = SeedStream::new(config.seed).split_named(config.experiment.name());
    let Some(f) = config.map_handle()? else {
        return run_bihari(config, config.budgets.bihari.clone().unwrap_or(BihariBudget { instances: 100 }), stream);
    };
    let b = config.resolved_budgets(&f);
    b.check(f.manifold())?;
    let (csv, audits, summary) = match config.experiment {
        Experiment::EntropyTop => run_entropy_top(&f, &b, stream)?,
        Experiment::EntropyMeasure => run_entropy_measure(&f, &b, stream)?,
        Experiment::BalancedMeasure => run_balanced(&f, &b, stream)?,
        Experiment::ChainVolume => run_chain_volume(&f, &b, stream)?,
        Experiment::AhlforsScan => run_ahlfors(&f, &b, stream)?,
        Experiment::BihariSelftest => return run_bihari(config, b.bihari, stream),
        Experiment::AuditAll => run_audit_all(&f, &b, stream)?,
    };
    Ok(RunOutput { csv, report: make_report(config, audits, summary) })
}

fn make_report(config: &ResolvedConfig, mut audits: Vec<AuditReport>, summary: serde_json::Value) -> RunReport {
    for a in audits.iter_mut() {
        a.artifacts = vec!["results.csv".into(), "report.json".into(), "resolved-config.json".into()];
    }
    let pass = audits.iter().all(|a| a.pass);
    let sphere_verdict = audits
        .iter()
        .find(|a| a.name == "log_degree")
        .and_then(|a| a.details.get("verdict"))
        .and_then(|v| v.as_str())
        .filter(|v| *v != "pass" && *v != "fail");
    let verdict = match (pass, sphere_verdict) {
        (true, Some(v)) => v.to_string(),
        (true, None) => "pass".to_string(),
        (false, _) => "fail".to_string(),
    };
    RunReport {
        experiment: config.experiment,
        map: config.map.clone(),
        seed: config.seed,
        config_digest: config_digest(config),
        verdict,
        pass,
        audits,
        summary,
    }
}

type Parts = (Vec<u8>, Vec<AuditReport>, serde_json::Value);

fn log_degree(f: &MapHandle) -> f64 {
    (f.degree() as f64).ln()
}

fn run_entropy_top(f: &MapHandle, b: &ResolvedBudgets, stream: SeedStream) -> Result<Parts> {
    let estimate = topological_entropy_estimate(f, &b.entropy, stream.split_named("entropy"))?;
    let mut csv = Vec::new();
    estimate.write_csv(&mut csv)?;
    let upper_config = UpperBoundConfig {
        entropy: b.entropy.clone(),
        distortion: b.distortion.clone(),
        tolerance: b.tolerances.upper_bound,
    };
    let growth = distortion_growth(f, &b.distortion, stream.split_named("distortion"))?;
    let rhs = log_degree(f) + f.dim() as f64 * growth.slope.max(0.0);
    let upper = AuditReport::inequality("entropy_upper_bound", estimate.value, rhs, upper_config.tolerance, &upper_config)
        .with_details(serde_json::json!({ "distortion_growth": growth }));
    let summary = serde_json::json!({
        "h_estimate": estimate.value,
        "eps_used": estimate.eps_used,
        "log_degree": log_degree(f),
        "slopes_monotone": estimate.slopes_monotone,
        "base_samples": estimate.base_samples,
        "note": estimate.note,
    });
    Ok((csv, vec![upper], summary))
}

fn run_entropy_measure(f: &MapHandle, b: &ResolvedBudgets, stream: SeedStream) -> Result<Parts> {
    let tol = &b.tolerances;
    let bal = &b.balanced;
    let mu = balanced_iterate(f, bal.k, bal.m, stream.split_named("balanced"), bal.atom_cap)?;
    let lower = entropy_lower_bound_report(f, &mu, tol.residual)?;
    let me = &b.measure_entropy;
    let reference = crate::audits::reference_balanced_measure(f, me.atoms, stream.split_named("ks"))?;
    let ks = ks_entropy_estimate(f, &reference, me.partition, me.k_max)?;
    let rows: Vec<Vec<String>> =
        ks.sequence.iter().enumerate().map(|(k, h)| vec![k.to_string(), csv_float(*h)]).collect();
    let csv = csv_bytes(&["k", "conditional_entropy"], &rows)?;
    let ld = log_degree(f);
    let cfg = serde_json::json!({ "balanced": bal, "measure_entropy": me, "tolerances": tol });
    let mut audits = vec![AuditReport::inequality("branch_mass", lower.branch_mass, 0.0, 1e-3, &cfg)];
    // On the sphere the bound is reported, not asserted.
    if matches!(f.manifold(), ManifoldId::Torus(_)) {
        audits.push(AuditReport::equality("lower_bound", lower.bound, ld, tol.lower_bound, &cfg));
        audits.push(AuditReport::equality("ks_entropy", ks.value, ld, tol.ks, &cfg));
    }
    let summary = serde_json::json!({
        "log_degree": ld,
        "report": MeasureEntropyReport::new(&lower, &ks),
        "ks_value": ks.value,
        "ks_cells": ks.cells,
        "residual": lower.residual,
    });
    Ok((csv, audits, summary))
}

fn run_balanced(f: &MapHandle, b: &ResolvedBudgets, stream: SeedStream) -> Result<Parts> {
    let bal = &b.balanced;
    let mu = balanced_iterate(f, bal.k, bal.m, stream.split_named("balanced"), bal.atom_cap)?;
    let residual = balancedness_residual(f, &mu, &DefaultFamily::for_manifold(f.manifold()))?;
    let cfg = serde_json::json!({ "balanced": bal, "tolerances": b.tolerances });
    let mut rows = Vec::new();
    let mut audits = Vec::new();
    match f.manifold() {
        ManifoldId::Torus(n) => {
            // boxes of side 1/4, in the family's cell order
            let family = FourierBoxFamily::new(n, 0, 2);
            let masses = integrate_family(&mu, &family);
            let expect = 1.0 / masses.len() as f64;
            let mut worst: f64 = 0.0;
            for (j, m) in masses.iter().enumerate() {
                worst = worst.max((m - expect).abs());
                rows.push(vec![format!("box{j}"), csv_float(*m)]);
            }
            audits.push(AuditReport::inequality("box_mass_deviation", worst, 0.0, 0.01, &cfg));
        }
        ManifoldId::Sphere2 => {
            let band = box_mass(&mu, &Region::EquatorBand { chordal: 0.1 });
            rows.push(vec!["equator_band_0.1".into(), csv_float(band)]);
            let poles = pole_mass_table(&mu, &[0.5, 0.2, 0.1, 0.05, 0.02])?;
            for (r, m) in &poles {
                rows.push(vec![format!("pole_caps_{r}"), csv_float(*m)]);
            }
            let pole = poles.iter().find(|(r, _)| *r == 0.1).map(|p| p.1).unwrap_or(0.0);
            audits.push(AuditReport::inequality("equator_band_deficit", 1.0 - band, 0.05, 0.0, &cfg));
            audits.push(AuditReport::inequality("pole_cap_mass", pole, 1e-3, 0.0, &cfg));
        }
    }
    rows.push(vec!["residual".into(), csv_float(residual.value)]);
    audits.push(AuditReport::inequality("balancedness_residual", residual.value, b.tolerances.residual, 0.0, &cfg));
    let csv = csv_bytes(&["region", "mass"], &rows)?;
    let summary = serde_json::json!({
        "atoms": mu.len(),
        "total": mu.total(),
        "residual": residual.value,
        "worst_test": residual.worst,
    });
    Ok((csv, audits, summary))
}

fn run_chain_volume(f: &MapHandle, b: &ResolvedBudgets, stream: SeedStream) -> Result<Parts> {
    let cv = &b.chain_volume;
    let mut rows = Vec::new();
    let mut log_v = Vec::new();
    for &k in &cv.k_range {
        let v = chain_volume(f, k, cv.samples, stream.split_named("volume").split(k as u64))?;
        log_v.push(v.value.ln());
        rows.push(vec![
            k.to_string(),
            csv_float(v.value),
            csv_float(v.stderr),
            v.samples.to_string(),
            v.flagged.to_string(),
        ]);
    }
    let csv = csv_bytes(&["k", "volume", "stderr", "samples", "flagged"], &rows)?;
    let pw = &b.pointwise;
    let pointwise =
        check_pointwise_bound(&iterate_components(f, pw.powers), pw.samples, stream.split_named("pointwise"))?;
    let ks: Vec<f64> = cv.k_range.iter().map(|&k| k as f64).collect();
    let summary = serde_json::json!({ "lov": ls_slope(&ks, &log_v), "log_degree": log_degree(f) });
    Ok((csv, vec![pointwise], summary))
}

fn ahlfors_centers(f: &MapHandle, count: usize, stream: SeedStream) -> Vec<Point> {
    let mut rng = stream.rng();
    (0..count).map(|_| f.sample_regular(&mut rng)).collect()
}

fn run_ahlfors(f: &MapHandle, b: &ResolvedBudgets, stream: SeedStream) -> Result<Parts> {
    let a = &b.ahlfors;
    let centers = ahlfors_centers(f, a.centers, stream.split_named("centers"));
    let scan = ahlfors_scan(f, a.k, &centers, &a.radii, a.samples, a.spread_bound, stream.split_named("scan"))?;
    let mut csv = Vec::new();
    scan.write_csv(&mut csv)?;
    let n = f.dim() as f64;
    let audit = AuditReport::equality("ahlfors_slope", scan.slope, n, 0.2, a)
        .and(scan.spread <= a.spread_bound)
        .with_details(serde_json::json!({ "spread": scan.spread, "spread_bound": a.spread_bound, "center_slopes": scan.center_slopes }));
    let summary = serde_json::json!({ "slope": scan.slope, "spread": scan.spread, "k": a.k });
    Ok((csv, vec![audit], summary))
}

fn run_bihari(config: &ResolvedConfig, budget: BihariBudget, stream: SeedStream) -> Result<RunOutput> {
    let stream = stream.split_named("bihari");
    let mut rows = Vec::new();
    for i in 0..budget.instances {
        let n = 2 + (i % 2) as u32;
        let mut rng = stream.split(i as u64).rng();
        let inst = bihari_instance(n, &mut rng);
        let r = bihari_check(&inst.g, inst.a, inst.c, n)?;
        rows.push(vec![i.to_string(), n.to_string(), csv_float(inst.a), csv_float(inst.c), csv_float(r.lhs), r.pass.to_string()]);
    }
    let csv = csv_bytes(&["instance", "n", "a", "c", "excess", "pass"], &rows)?;
    let audit = bihari_selftest(budget.instances, stream)?;
    let summary = serde_json::json!({ "instances": budget.instances });
    Ok(RunOutput { csv, report: make_report(config, vec![audit], summary) })
}

fn run_audit_all(f: &MapHandle, b: &ResolvedBudgets, stream: SeedStream) -> Result<Parts> {
    let tol = &b.tolerances;
    let me = &b.measure_entropy;
    let ld_config = LogDegreeConfig {
        entropy: b.entropy.clone(),
        distortion: b.distortion.clone(),
        balanced_k: b.balanced.k.min(LogDegreeConfig::default_for(f).balanced_k),
        balanced_m: LogDegreeConfig::default_for(f).balanced_m,
        partition: me.partition,
        ks_atoms: me.atoms,
        ks_k: me.k_max,
        tolerances: tol.clone(),
    };
    let mut audits = vec![audit_log_degree(f, &ld_config, stream.split_named("log_degree"))?];
    let vd = &b.volume_density;
    let vd_config = VolumeDensityConfig {
        entropy: b.entropy.clone(),
        volume_samples: vd.volume_samples,
        density_centers: vd.density_centers,
        density_samples: vd.density_samples,
        tolerance: tol.volume_density,
    };
    audits.push(audit_volume_density(f, &vd_config, stream.split_named("volume_density"))?);
    let (_, balanced, balanced_summary) = run_balanced(f, b, stream.split_named("balanced"))?;
    audits.extend(balanced);
    let (_, ahlfors, _) = run_ahlfors(f, b, stream.split_named("ahlfors"))?;
    audits.extend(ahlfors);
    let pw = &b.pointwise;
    audits.push(check_pointwise_bound(&iterate_components(f, pw.powers), pw.samples, stream.split_named("pointwise"))?);
    audits.push(bihari_selftest(b.bihari.instances, stream.split_named("bihari"))?);
    let csv = csv_bytes(&AUDIT_HEADER, &audit_rows(&audits))?;
    let summary = serde_json::json!({ "log_degree": log_degree(f), "balanced": balanced_summary });
    Ok((csv, audits, summary))
}

fn write_atomic(dir: &Path, name: &str, bytes: &[u8]) -> Result<()> {
    let tmp = dir.join(format!(".{name}.tmp"));
    let mut file = fs::File::create(&tmp)?;
    file.write_all(bytes)?;
    file.sync_all()?;
    fs::rename(&tmp, dir.join(name))?;
    Ok(())
}

/// Write the three artifacts of a run into `dir`.
pub fn write_outputs(dir: &Path, config: &ResolvedConfig, output: &RunOutput) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_atomic(dir, "resolved-config.json", &serde_json::to_vec_pretty(config)?)?;
    write_atomic(dir, "results.csv", &output.csv)?;
    write_atomic(dir, "report.json", &serde_json::to_vec_pretty(&output.report)?)?;
    Ok(())
}

/// Resolve, execute and write a configuration; returns the report.
pub fn run(config: &RunConfig) -> Result<RunReport> {
    let resolved = config.resolve()?;
    let output = execute(&resolved)?;
    write_outputs(&resolved.output_dir, &resolved, &output)?;
    Ok(output.report)
}

/// The published JSON Schema of [`RunConfig`].
pub fn schema() -> serde_json::Value {
    use serde_json::json;
    let uint = json!({ "type": "integer", "minimum": 0 });
    let num = json!({ "type": "number" });
    let uints = json!({ "type": "array", "items": uint });
    let nums = json!({ "type": "array", "items": num });
    let matrix = json!({ "type": "array", "items": { "type": "array", "items": { "type": "integer" } } });
    let section = |props: serde_json::Value, required: &[&str]| {
        json!({ "type": "object", "additionalProperties": false, "properties": props, "required": required })
    };
    let map = json!({ "oneOf": [
        section(json!({ "family": { "const": "toral_endo" }, "matrix": matrix }), &["family", "matrix"]),
        section(json!({ "family": { "const": "sphere_power" }, "degree": uint }), &["family", "degree"]),
        section(json!({
            "family": { "const": "sheared_endo" },
            "matrix": matrix,
            "amplitude": num,
            "profile": { "enum": ["sin"] },
        }), &["family", "matrix", "amplitude"]),
    ]});
    let source = json!({ "oneOf": [
        section(json!({ "kind": { "const": "grid" }, "per_axis": uint }), &["kind", "per_axis"]),
        section(json!({ "kind": { "const": "uniform" }, "count": uint }), &["kind", "count"]),
    ]});
    let partition = json!({ "oneOf": [
        section(json!({ "kind": { "const": "dyadic" }, "depth": uint }), &["kind", "depth"]),
        section(json!({ "kind": { "const": "lon_lat" }, "lon": uint, "lat": uint }), &["kind", "lon", "lat"]),
    ]});
    let budgets = section(
        json!({
            "entropy": section(json!({
                "eps": nums, "k_range": uints, "source": source,
                "metric": { "enum": ["sup", "product"] }, "resolution": num,
            }), &["eps", "k_range", "source"]),
            "distortion": section(json!({ "k_range": uints, "samples": uint }), &["k_range", "samples"]),
            "balanced": section(json!({ "k": uint, "m": uint, "atom_cap": uint }), &["k", "m", "atom_cap"]),
            "measure_entropy": section(json!({ "partition": partition, "atoms": uint, "k_max": uint }), &["partition", "atoms", "k_max"]),
            "chain_volume": section(json!({ "k_range": uints, "samples": uint }), &["k_range", "samples"]),
            "ahlfors": section(json!({
                "k": uint, "centers": uint, "radii": nums, "samples": uint, "spread_bound": num,
            }), &["k", "centers", "radii", "samples", "spread_bound"]),
            "volume_density": section(json!({
                "volume_samples": uint, "density_centers": uint, "density_samples": uint,
            }), &["volume_samples", "density_centers", "density_samples"]),
            "pointwise": section(json!({ "powers": uint, "samples": uint }), &["powers", "samples"]),
            "bihari": section(json!({ "instances": uint }), &["instances"]),
            "tolerances": section(json!({
                "entropy": num, "entropy_anisotropic": num, "ks": num, "lower_bound": num,
                "upper_bound": num, "volume_density": num, "residual": num,
            }), &["entropy", "entropy_anisotropic", "ks", "lower_bound", "upper_bound", "volume_density", "residual"]),
        }),
        &[],
    );
    let mut root = section(
        json!({
            "map": map,
            "experiment": { "enum": [
                "entropy-top", "entropy-measure", "balanced-measure", "chain-volume",
                "ahlfors-scan", "bihari-selftest", "audit-all",
            ]},
            "seed": uint,
            "output_dir": { "type": "string" },
            "budgets": budgets,
        }),
        &["experiment"],
    );
    root["$schema"] = json!("https://json-schema.org/draft/2020-12/schema");
    root["title"] = json!("uqr-lab run configuration");
    root
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config(text: &str) -> RunConfig {
        RunConfig::from_json(text).unwrap()
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = RunConfig::from_json(r#"{"experiment":"audit-all","sede":1}"#).unwrap_err();
        assert_eq!(exit_code(&err), EXIT_CONFIG);
        let err = RunConfig::from_json(
            r#"{"experiment":"audit-all","map":{"family":"sphere_power","degree":2},"budgets":{"bihari":{"instances":3,"x":1}}}"#,
        )
        .unwrap_err();
        assert_eq!(exit_code(&err), EXIT_CONFIG);
    }

    #[test]
    fn singular_matrix_is_a_config_error() {
        let c = config(r#"{"experiment":"entropy-top","map":{"family":"toral_endo","matrix":[[1,2],[2,4]]}}"#);
        let err = c.resolve().unwrap_err();
        assert_eq!(exit_code(&err), EXIT_CONFIG);
        assert!(err.to_string().contains("degree undefined: singular matrix"));
    }

    #[test]
    fn resolved_config_round_trips() {
        let c = config(
            r#"{"experiment":"ahlfors-scan","seed":9,"map":{"family":"toral_endo","matrix":[[2,0],[0,2]]},
                "budgets":{"pointwise":{"powers":2,"samples":50}}}"#,
        );
        let r = c.resolve().unwrap();
        assert_eq!(r.budgets.pointwise, Some(PointwiseBudget { powers: 2, samples: 50 }));
        assert!(r.budgets.entropy.is_some() && r.budgets.tolerances.is_some());
        let text = serde_json::to_string(&r).unwrap();
        let back = RunConfig::from_json(&text).unwrap();
        assert_eq!(back, r);
        assert_eq!(back.resolve().unwrap(), r);
    }

    #[test]
    fn balanced_default_respects_atom_budget() {
        for (spec, k) in [
            (r#"{"family":"toral_endo","matrix":[[2,0],[0,2]]}"#, 6),
            (r#"{"family":"toral_endo","matrix":[[2,0],[0,3]]}"#, 4),
            (r#"{"family":"sphere_power","degree":2}"#, 8),
        ] {
            let f = serde_json::from_str::<MapSpec>(spec).unwrap().build().unwrap();
            let b = BalancedBudget::default_for(&f);
            assert_eq!(b.k, k, "{spec}");
            assert!(b.m as f64 * (f.degree() as f64).powi(b.k as i32) <= b.atom_cap as f64);
        }
    }

    #[test]
    fn missing_map_is_a_config_error_except_for_bihari() {
        assert_eq!(exit_code(&config(r#"{"experiment":"chain-volume"}"#).resolve().unwrap_err()), EXIT_CONFIG);
        let r = config(r#"{"experiment":"bihari-selftest","budgets":{"bihari":{"instances":4}}}"#).resolve().unwrap();
        let out = execute(&r).unwrap();
        assert!(out.report.pass);
        assert_eq!(out.report.verdict, "pass");
    }

    #[test]
    fn budget_errors_map_to_three() {
        let c = config(
            r#"{"experiment":"balanced-measure","map":{"family":"toral_endo","matrix":[[2,0],[0,2]]},
                "budgets":{"balanced":{"k":6,"m":100,"atom_cap":1000}}}"#,
        );
        let err = execute(&c.resolve().unwrap()).unwrap_err();
        assert_eq!(exit_code(&err), EXIT_BUDGET);
    }

    // Every key of a fully resolved config is named in the schema, and
    // every schema section is a key of the resolved config.
    #[test]
    fn schema_matches_resolved_config() {
        fn keys(v: &serde_json::Value) -> Vec<String> {
            let mut k: Vec<String> = v.as_object().unwrap().keys().cloned().collect();
            k.sort();
            k
        }
        let s = schema();
        let c = config(r#"{"experiment":"audit-all","map":{"family":"toral_endo","matrix":[[2,0],[0,2]]}}"#);
        let r = serde_json::to_value(c.resolve().unwrap()).unwrap();
        assert_eq!(keys(&r), keys(&s["properties"]));
        let sb = &s["properties"]["budgets"]["properties"];
        assert_eq!(keys(&r["budgets"]), keys(sb));
        for (name, section) in r["budgets"].as_object().unwrap() {
            let props = keys(&sb[name]["properties"]);
            for k in keys(section) {
                assert!(props.contains(&k), "{name}.{k} missing from schema");
            }
        }
    }

    #[test]
    fn small_runs_are_deterministic() {
        let c = config(
            r#"{"experiment":"chain-volume","seed":3,"map":{"family":"sphere_power","degree":2},
                "budgets":{"chain_volume":{"k_range":[0,1,2],"samples":1000},"pointwise":{"powers":2,"samples":200}}}"#,
        );
        let r = c.resolve().unwrap();
        let a = execute(&r).unwrap();
        let b = execute(&r).unwrap();
        assert_eq!(a.csv, b.csv);
        assert!(a.report.pass);
        let text = String::from_utf8(a.csv).unwrap();
        assert_eq!(text.lines().count(), 4);
        assert!(text.lines().nth(1).unwrap().starts_with("0,1.0000000000000000e0,0.0000000000000000e0,1000,false"));
    }
}
