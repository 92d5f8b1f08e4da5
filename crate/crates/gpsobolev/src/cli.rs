//! Config-file driven command implementations: analyze, spectrum, sample and
//! verify-identities, with JSON reports and 17-significant-digit CSV tables.

use crate::error::{Error, Result};
use crate::grid::{build_grid, BoxDomain, Grid, MultiIndex, QuadratureRule};
use crate::kernels::{Kernel, KernelSpec};
use crate::sampler::sample_paths;
use crate::spectral::{
    nystrom_decompose, DerivativeSource, TraceRegion, TruncationPolicy,
};
use crate::verdict::{analyze, verify_identities, AnalyzeConfig, RegularityReport, Verdict};
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

pub const DEFAULT_SEED: u64 = 42;

/// Box bounds section of the run config.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoxSection {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

/// Grid ladder section of the run config.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSection {
    #[serde(rename = "box")]
    pub bounds: BoxSection,
    pub base_n: usize,
    #[serde(default = "default_levels")]
    pub levels: usize,
    #[serde(default = "default_rule")]
    pub rule: QuadratureRule,
}

fn default_levels() -> usize {
    3
}

fn default_rule() -> QuadratureRule {
    QuadratureRule::Midpoint
}

/// Truncation section of the run config.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TruncationSection {
    #[serde(default = "default_mass")]
    pub mass: f64,
    #[serde(default = "default_max_modes")]
    pub max_modes: usize,
}

fn default_mass() -> f64 {
    0.9999
}

fn default_max_modes() -> usize {
    500
}

impl Default for TruncationSection {
    fn default() -> Self {
        TruncationSection {
            mass: default_mass(),
            max_modes: default_max_modes(),
        }
    }
}

/// Full run configuration; unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub kernel: KernelSpec,
    pub m: usize,
    pub p: f64,
    pub grid: GridSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub margin: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default = "default_n_paths")]
    pub n_paths: usize,
    #[serde(default)]
    pub truncation: TruncationSection,
}

fn default_n_paths() -> usize {
    10_000
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let cfg: RunConfig = serde_json::from_str(&text).map_err(|e| {
            Error::Config(format!("config {}: {e}", path.display()))
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn validate(&self) -> Result<()> {
        if self.m > 6 {
            return Err(Error::Config(format!("m = {} out of range (0..=6)", self.m)));
        }
        if !(self.p > 1.0) || !self.p.is_finite() {
            return Err(Error::Config(format!("p = {} out of range (1, inf)", self.p)));
        }
        if self.grid.base_n < 2 || self.grid.base_n > 1 << 20 {
            return Err(Error::Config(format!(
                "grid.base_n = {} out of range",
                self.grid.base_n
            )));
        }
        if self.grid.levels == 0 || self.grid.levels > 8 {
            return Err(Error::Config(format!(
                "grid.levels = {} out of range (1..=8)",
                self.grid.levels
            )));
        }
        if self.n_paths > 10_000_000 {
            return Err(Error::Config(format!("n_paths = {} out of range", self.n_paths)));
        }
        if !(self.truncation.mass > 0.0 && self.truncation.mass <= 1.0) {
            return Err(Error::Config(format!(
                "truncation.mass = {} out of range (0, 1]",
                self.truncation.mass
            )));
        }
        Ok(())
    }

    /// Seed precedence: CLI flag > config file > fixed default 42.
    pub fn effective_seed(&self, flag: Option<u64>) -> u64 {
        flag.or(self.seed).unwrap_or(DEFAULT_SEED)
    }

    pub fn kernel(&self) -> Result<Kernel> {
        self.kernel.resolve()
    }

    pub fn domain(&self) -> Result<BoxDomain> {
        BoxDomain::new(self.grid.bounds.lower.clone(), self.grid.bounds.upper.clone())
    }

    pub fn analyze_config(&self, seed_flag: Option<u64>) -> Result<AnalyzeConfig> {
        Ok(AnalyzeConfig {
            domain: self.domain()?,
            base_n: self.grid.base_n,
            levels: self.grid.levels,
            rule: self.grid.rule,
            margin: self.margin,
            seed: self.effective_seed(seed_flag),
            n_paths: self.n_paths,
            truncation: TruncationPolicy {
                mass_fraction: self.truncation.mass,
                max_modes: self.truncation.max_modes,
            },
        })
    }

    /// Single working grid (base size) for the spectrum/sample commands.
    fn single_grid(&self) -> Result<Arc<Grid>> {
        let cfg = self.analyze_config(None)?;
        let margin = self.margin.unwrap_or(0.0);
        Ok(Arc::new(build_grid(
            cfg.domain,
            self.grid.base_n,
            self.grid.rule,
            margin,
        )?))
    }
}

fn write_output(out: Option<&Path>, content: &str) -> Result<()> {
    match out {
        Some(path) => {
            std::fs::write(path, content)?;
            Ok(())
        }
        None => {
            std::io::stdout().write_all(content.as_bytes())?;
            Ok(())
        }
    }
}

/// 17 significant digits, enough to round-trip any f64.
fn sig17(v: f64) -> String {
    format!("{v:.16e}")
}

/// Runs the full regularity analysis and writes the report JSON.
pub fn cmd_analyze(
    config_path: &Path,
    out: Option<&Path>,
    seed_flag: Option<u64>,
) -> Result<RegularityReport> {
    let cfg = RunConfig::load(config_path)?;
    let kernel = cfg.kernel()?;
    let report = analyze(&kernel, cfg.m, cfg.p, &cfg.analyze_config(seed_flag)?)?;
    let json = serde_json::to_string_pretty(&report)?;
    write_output(out, &json)?;
    Ok(report)
}

/// Exit code for an analyze outcome: 0 PASS, 10 FAIL, 11 INCONCLUSIVE.
pub fn verdict_exit_code(v: Verdict) -> i32 {
    match v {
        Verdict::Pass => 0,
        Verdict::Fail => 10,
        Verdict::Inconclusive => 11,
    }
}

/// Writes the Nystrom spectrum as CSV: mode index, eigenvalue, and
/// eigenfunction samples at up to eight grid nodes.
pub fn cmd_spectrum(config_path: &Path, out: Option<&Path>) -> Result<()> {
    let cfg = RunConfig::load(config_path)?;
    let kernel = cfg.kernel()?;
    let grid = cfg.single_grid()?;
    let dec = nystrom_decompose(
        &kernel,
        &MultiIndex::zero(kernel.dim()),
        &grid,
        &DerivativeSource::Analytic,
        TraceRegion::FullBox,
        TruncationPolicy {
            mass_fraction: cfg.truncation.mass,
            max_modes: cfg.truncation.max_modes,
        },
    )?;
    let n_samples = 8.min(grid.node_count());
    let sample_nodes: Vec<usize> = (0..n_samples)
        .map(|i| i * (grid.node_count() - 1) / n_samples.max(1).max(1))
        .map(|i| i.min(grid.node_count() - 1))
        .collect();
    let mut csv = String::from("index,eigenvalue");
    for &i in &sample_nodes {
        let coords: Vec<String> = grid.node(i).iter().map(|c| format!("{c:.6}")).collect();
        csv.push_str(&format!(",phi_at_{}", coords.join("_")));
    }
    csv.push('\n');
    for (n, lam) in dec.eigenvalues.iter().enumerate() {
        csv.push_str(&format!("{},{}", n + 1, sig17(*lam)));
        for &i in &sample_nodes {
            csv.push_str(&format!(",{}", sig17(dec.eigenfunctions[n].values()[i])));
        }
        csv.push('\n');
    }
    write_output(out, &csv)
}

/// Writes sampled Karhunen-Loeve paths as CSV: node coordinates, one column
/// per path.
pub fn cmd_sample(config_path: &Path, out: Option<&Path>, seed_flag: Option<u64>) -> Result<()> {
    let cfg = RunConfig::load(config_path)?;
    let kernel = cfg.kernel()?;
    let grid = cfg.single_grid()?;
    let dec = Arc::new(nystrom_decompose(
        &kernel,
        &MultiIndex::zero(kernel.dim()),
        &grid,
        &DerivativeSource::Analytic,
        TraceRegion::FullBox,
        TruncationPolicy {
            mass_fraction: cfg.truncation.mass,
            max_modes: cfg.truncation.max_modes,
        },
    )?);
    let seed = cfg.effective_seed(seed_flag);
    let n_paths = cfg.n_paths;
    let mut csv = String::new();
    for d in 0..grid.dim() {
        csv.push_str(&format!("x{},", d + 1));
    }
    csv.push_str(
        &(0..n_paths)
            .map(|j| format!("path_{j}"))
            .collect::<Vec<_>>()
            .join(","),
    );
    csv.push('\n');
    if dec.truncation == 0 {
        // zero covariance: paths are identically zero
        for i in 0..grid.node_count() {
            for c in grid.node(i) {
                csv.push_str(&format!("{},", sig17(*c)));
            }
            csv.push_str(&vec!["0"; n_paths].join(","));
            csv.push('\n');
        }
        return write_output(out, &csv);
    }
    let batch = sample_paths(&dec, n_paths, seed, dec.truncation)?;
    for i in 0..grid.node_count() {
        for c in grid.node(i) {
            csv.push_str(&format!("{},", sig17(*c)));
        }
        let row: Vec<String> = batch
            .paths
            .iter()
            .map(|p| sig17(p.values()[i]))
            .collect();
        csv.push_str(&row.join(","));
        csv.push('\n');
    }
    write_output(out, &csv)
}

/// Runs the trace-identity table and writes it as JSON.
pub fn cmd_verify_identities(config_path: &Path, out: Option<&Path>) -> Result<()> {
    let cfg = RunConfig::load(config_path)?;
    let kernel = cfg.kernel()?;
    let report = verify_identities(&kernel, cfg.m, &cfg.analyze_config(None)?)?;
    let json = serde_json::to_string_pretty(&report)?;
    write_output(out, &json)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_parses_with_defaults() {
        let json = r#"{
            "kernel": {"name": "brownian"},
            "m": 0,
            "p": 2.0,
            "grid": {"box": {"lower": [0.0], "upper": [1.0]}, "base_n": 64}
        }"#;
        let cfg: RunConfig = serde_json::from_str(json).unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.grid.levels, 3);
        assert_eq!(cfg.grid.rule, QuadratureRule::Midpoint);
        assert_eq!(cfg.n_paths, 10_000);
        assert_eq!(cfg.effective_seed(None), 42);
        assert_eq!(cfg.effective_seed(Some(7)), 7);
    }

    #[test]
    fn config_rejects_unknown_keys_and_bad_ranges() {
        let json = r#"{
            "kernel": {"name": "brownian"},
            "m": 0,
            "p": 2.0,
            "grid": {"box": {"lower": [0.0], "upper": [1.0]}, "base_n": 64},
            "mystery": true
        }"#;
        let err = serde_json::from_str::<RunConfig>(json).unwrap_err();
        assert!(err.to_string().contains("mystery"));

        let json = r#"{
            "kernel": {"name": "brownian"},
            "m": 0,
            "p": 0.5,
            "grid": {"box": {"lower": [0.0], "upper": [1.0]}, "base_n": 64}
        }"#;
        let cfg: RunConfig = serde_json::from_str(json).unwrap();
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn seed_precedence() {
        let json = r#"{
            "kernel": {"name": "brownian"},
            "m": 0,
            "p": 2.0,
            "grid": {"box": {"lower": [0.0], "upper": [1.0]}, "base_n": 64},
            "seed": 1234
        }"#;
        let cfg: RunConfig = serde_json::from_str(json).unwrap();
        assert_eq!(cfg.effective_seed(None), 1234);
        assert_eq!(cfg.effective_seed(Some(9)), 9);
    }
}
