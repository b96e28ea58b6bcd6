//! Run configuration read from a TOML file.

use std::path::Path;

use anyhow::{bail, Context};
use avicert::{
    AviConfig, DMatrix, DomainBox, InnerConfig, PolynomialBasis, RidgePolicy, SystemModel,
};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelSection,
    pub basis: BasisSection,
    pub avi: AviSection,
    #[serde(default)]
    pub certify: CertifySection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelName {
    Orbital,
    Linear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub name: ModelName,
    #[serde(default = "default_dt")]
    pub dt: f64,
    #[serde(default = "default_q_scale")]
    pub q_scale: f64,
    #[serde(default = "one")]
    pub r_scale: f64,
    #[serde(default = "default_r_min")]
    pub r_min: f64,
    /// Symmetric box `[-h, h]ⁿ`; alternative to `lower`/`upper`.
    pub half_width: Option<f64>,
    pub lower: Option<Vec<f64>>,
    pub upper: Option<Vec<f64>>,
    // linear plants only
    pub a: Option<Vec<Vec<f64>>>,
    pub b: Option<Vec<Vec<f64>>>,
    pub q: Option<Vec<Vec<f64>>>,
    pub r: Option<Vec<Vec<f64>>>,
}

fn default_dt() -> f64 {
    0.01
}
fn default_q_scale() -> f64 {
    100.0
}
fn one() -> f64 {
    1.0
}
fn default_r_min() -> f64 {
    avicert::dynamics::DEFAULT_R_MIN
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BasisSection {
    pub critic_degrees: Vec<u32>,
    pub actor_degrees: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum BoundingC {
    Fixed(f64),
    Keyword(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AviSection {
    pub sample_count: usize,
    pub rng_seed: u64,
    #[serde(default = "default_outer_tolerance")]
    pub outer_tolerance: f64,
    #[serde(default = "default_max_outer")]
    pub max_outer_iterations: usize,
    #[serde(default = "default_inner_tolerance")]
    pub inner_tolerance: f64,
    #[serde(default = "default_inner_iterations")]
    pub inner_max_iterations: usize,
    /// Ridge term for the fit; automatic fallback when absent.
    pub ridge: Option<f64>,
    /// `c` for the bounding runs: a number, or `"auto"` to use the
    /// certified `c`. No bounding runs when absent.
    pub bounding_c: Option<BoundingC>,
}

fn default_outer_tolerance() -> f64 {
    0.01
}
fn default_max_outer() -> usize {
    1000
}
fn default_inner_tolerance() -> f64 {
    InnerConfig::default().tolerance
}
fn default_inner_iterations() -> usize {
    InnerConfig::default().max_iterations
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CertifySection {
    #[serde(default = "default_grid")]
    pub grid_per_axis: usize,
    #[serde(default = "default_exclusion")]
    pub exclusion_threshold: f64,
}

fn default_grid() -> usize {
    12
}
fn default_exclusion() -> f64 {
    avicert::CertifyOptions::default().exclusion_threshold
}

impl Default for CertifySection {
    fn default() -> Self {
        CertifySection {
            grid_per_axis: default_grid(),
            exclusion_threshold: default_exclusion(),
        }
    }
}

/// A configuration problem; the message carries the location when known.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError(format!("{}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| ConfigError(format!("{}: {}", path.display(), e.0)))
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| {
            // toml reports byte spans; turn them into a line number
            let line = e
                .span()
                .map(|s| text[..s.start.min(text.len())].matches('\n').count() + 1)
                .unwrap_or(1);
            ConfigError(format!("line {line}: {}", e.message()))
        })?;
        cfg.model()
            .and_then(|_| cfg.domain().map(|_| ()))
            .and_then(|_| cfg.critic_basis().map(|_| ()))
            .and_then(|_| cfg.actor_basis().map(|_| ()))
            .and_then(|_| cfg.bounding_c_checked())
            .map_err(|e| ConfigError(section_message(text, &e)))?;
        Ok(cfg)
    }

    pub fn model(&self) -> anyhow::Result<SystemModel> {
        let m = &self.model;
        match m.name {
            ModelName::Orbital => Ok(SystemModel::orbital_scaled(
                m.dt, m.q_scale, m.r_scale, m.r_min,
            )
            .context("[model]")?),
            ModelName::Linear => {
                let get = |name: &str, v: &Option<Vec<Vec<f64>>>| {
                    v.as_ref()
                        .map(|rows| rows_to_matrix(rows))
                        .transpose()?
                        .with_context(|| format!("[model] linear plant needs `{name}`"))
                };
                let a = get("a", &m.a)?;
                let b = get("b", &m.b)?;
                let q = get("q", &m.q)?;
                let r = get("r", &m.r)?;
                Ok(SystemModel::linear(a, b, q, r).context("[model]")?)
            }
        }
    }

    pub fn domain(&self) -> anyhow::Result<DomainBox> {
        let m = &self.model;
        let n = match m.name {
            ModelName::Orbital => 4,
            ModelName::Linear => m.a.as_ref().map_or(0, Vec::len),
        };
        let domain = match (m.half_width, &m.lower, &m.upper) {
            (Some(h), None, None) => DomainBox::symmetric(n, h),
            (None, Some(lo), Some(hi)) => DomainBox::new(lo.clone(), hi.clone()),
            _ => bail!("[model] give either `half_width` or both `lower` and `upper`"),
        }
        .context("[model]")?;
        if domain.dim() != n {
            bail!(
                "[model] domain has {} axes, the plant has {n} states",
                domain.dim()
            );
        }
        Ok(domain)
    }

    pub fn critic_basis(&self) -> anyhow::Result<PolynomialBasis> {
        let n = self.domain()?.dim();
        PolynomialBasis::new(n, &self.basis.critic_degrees).context("[basis] critic_degrees")
    }

    pub fn actor_basis(&self) -> anyhow::Result<PolynomialBasis> {
        let n = self.domain()?.dim();
        PolynomialBasis::new(n, &self.basis.actor_degrees).context("[basis] actor_degrees")
    }

    pub fn inner(&self) -> InnerConfig {
        InnerConfig {
            tolerance: self.avi.inner_tolerance,
            max_iterations: self.avi.inner_max_iterations,
        }
    }

    pub fn avi_config(&self) -> anyhow::Result<AviConfig> {
        let a = &self.avi;
        let mut cfg = AviConfig::new(self.domain()?, a.sample_count, a.rng_seed);
        cfg.outer_tolerance = a.outer_tolerance;
        cfg.max_outer_iterations = a.max_outer_iterations;
        cfg.inner = self.inner();
        if let Some(r) = a.ridge {
            cfg.ridge = RidgePolicy::Fixed(r);
        }
        Ok(cfg)
    }

    /// `Some(Some(c))` for a fixed constant, `Some(None)` for `"auto"`.
    pub fn bounding_c(&self) -> Option<Option<f64>> {
        match &self.avi.bounding_c {
            None => None,
            Some(BoundingC::Fixed(c)) => Some(Some(*c)),
            Some(BoundingC::Keyword(_)) => Some(None),
        }
    }

    fn bounding_c_checked(&self) -> anyhow::Result<()> {
        match &self.avi.bounding_c {
            Some(BoundingC::Fixed(c)) if !(0.0..1.0).contains(c) => {
                bail!("[avi] bounding_c must lie in [0, 1), got {c}")
            }
            Some(BoundingC::Keyword(k)) if k != "auto" => {
                bail!("[avi] bounding_c must be a number or \"auto\", got \"{k}\"")
            }
            _ => Ok(()),
        }
    }
}

fn rows_to_matrix(rows: &[Vec<f64>]) -> anyhow::Result<DMatrix<f64>> {
    let c = rows.first().map_or(0, Vec::len);
    if c == 0 || rows.iter().any(|row| row.len() != c) {
        bail!("matrix rows must be non-empty and of equal length");
    }
    Ok(DMatrix::from_fn(rows.len(), c, |i, j| rows[i][j]))
}

/// Prefixes a semantic error with the line of the section it names.
fn section_message(text: &str, err: &anyhow::Error) -> String {
    let msg = format!("{err:#}");
    let line = msg
        .strip_prefix('[')
        .and_then(|rest| rest.split_once(']'))
        .and_then(|(section, _)| {
            text.lines()
                .position(|l| l.trim() == format!("[{section}]"))
                .map(|i| i + 1)
        });
    match line {
        Some(l) => format!("line {l}: {msg}"),
        None => msg,
    }
}
