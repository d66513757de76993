//! Experiment configuration files.
//!
//! ```toml
//! seed = 7
//! potential = "(x^2-y^2)/2"
//!
//! [domain]
//! kind = "ball"            # ball | box | l_shape | star | polyline | flow_image
//! center = [0.0, 0.0]
//! radius = 1.0
//!
//! [grid]
//! h = 0.02
//!
//! [flow]
//! steps = 100
//!
//! [chain]
//! r = 0.2
//! steps = 10000
//! chains = 1000
//! ```
//!
//! Every section is optional; unknown keys are rejected.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use morphwalk::ballwalk::{ChainConfig, StartRule};
use morphwalk::flow::{build_map, FlowConfig, TransportMap};
use morphwalk::geometry::{Domain, Polyline, StarShape};
use morphwalk::pde::BoundaryScheme;
use morphwalk::potential::PotentialSpec;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, Default, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    /// Flow potential `c(t, x, y)`.
    #[serde(default = "default_potential")]
    pub potential: String,
    #[serde(default)]
    pub domain: DomainSpec,
    #[serde(default)]
    pub grid: GridKeys,
    #[serde(default)]
    pub pde: PdeKeys,
    #[serde(default)]
    pub flow: FlowKeys,
    #[serde(default)]
    pub chain: ChainKeys,
    #[serde(default)]
    pub diagnostics: DiagKeys,
}

fn default_potential() -> String {
    "0".into()
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct DomainSpec {
    #[serde(default = "default_kind")]
    pub kind: String,
    pub center: Option<Vec<f64>>,
    pub radius: Option<f64>,
    pub lo: Option<Vec<f64>>,
    pub hi: Option<Vec<f64>>,
    /// Star radii at equally spaced angles.
    pub radii: Option<Vec<f64>>,
    /// Polyline vertices, or a two-column CSV file.
    pub vertices: Option<Vec<[f64; 2]>>,
    pub file: Option<PathBuf>,
}

fn default_kind() -> String {
    "ball".into()
}

impl Default for DomainSpec {
    fn default() -> Self {
        DomainSpec { kind: default_kind(), center: None, radius: None, lo: None, hi: None, radii: None, vertices: None, file: None }
    }
}

#[derive(Debug, Clone, Default, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct GridKeys {
    pub h: Option<f64>,
    pub pad: Option<f64>,
}

#[derive(Debug, Clone, Default, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct PdeKeys {
    pub tol: Option<f64>,
    pub max_iter: Option<usize>,
    /// `ghost_fluid` or `staircase`.
    pub scheme: Option<String>,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct FlowKeys {
    #[serde(default = "default_flow_steps")]
    pub steps: usize,
    pub seed_spacing: Option<f64>,
    pub boundary_filter: Option<f64>,
    /// Base domain of the map; the unit disk when absent.
    pub base: Option<DomainSpec>,
    /// Tolerance on `max |det J − 1|` used by `flow verify`.
    #[serde(default = "default_det_tol")]
    pub det_tol: f64,
    #[serde(default = "default_pairs")]
    pub pairs: usize,
}

fn default_flow_steps() -> usize {
    100
}
fn default_det_tol() -> f64 {
    1e-2
}
fn default_pairs() -> usize {
    10_000
}

impl Default for FlowKeys {
    fn default() -> Self {
        FlowKeys {
            steps: default_flow_steps(),
            seed_spacing: None,
            boundary_filter: None,
            base: None,
            det_tol: default_det_tol(),
            pairs: default_pairs(),
        }
    }
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct ChainKeys {
    #[serde(default = "default_r")]
    pub r: f64,
    #[serde(default = "default_chain_steps")]
    pub steps: usize,
    #[serde(default)]
    pub lazy: bool,
    /// Chain stream seed; the global seed when absent.
    pub seed: Option<u64>,
    #[serde(default = "default_chains")]
    pub chains: usize,
    /// `uniform`, `point` or `subregion`.
    #[serde(default = "default_start")]
    pub start: String,
    pub point: Option<Vec<f64>>,
    pub subregion_lo: Option<Vec<f64>>,
    pub subregion_hi: Option<Vec<f64>>,
    /// Target warm-start constant; picks a corner box of volume `1/M` of the
    /// bounding box when no subregion is given.
    pub warm_m: Option<f64>,
}

fn default_r() -> f64 {
    0.2
}
fn default_chain_steps() -> usize {
    1000
}
fn default_chains() -> usize {
    100
}
fn default_start() -> String {
    "uniform".into()
}

impl Default for ChainKeys {
    fn default() -> Self {
        ChainKeys {
            r: default_r(),
            steps: default_chain_steps(),
            lazy: false,
            seed: None,
            chains: default_chains(),
            start: default_start(),
            point: None,
            subregion_lo: None,
            subregion_hi: None,
            warm_m: None,
        }
    }
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct DiagKeys {
    #[serde(default = "default_bins")]
    pub bins: usize,
    /// TV checkpoints; `0, 1, 2, 4, ...` up to `chain.steps` when absent.
    pub checkpoints: Option<Vec<usize>>,
    /// Monte-Carlo sample count per estimate.
    #[serde(default = "default_samples")]
    pub samples: usize,
    #[serde(default = "default_s")]
    pub s: f64,
    /// Half-space family `x_axis < offset` for flow and conductance.
    #[serde(default)]
    pub axis: usize,
    #[serde(default = "default_offsets")]
    pub offsets: Vec<f64>,
    /// Random parallel-plane partitions for the iso sweep.
    #[serde(default = "default_partitions")]
    pub partitions: usize,
    /// Exact-chain oracle: `path` or `grid`.
    #[serde(default = "default_oracle")]
    pub oracle: String,
    #[serde(default = "default_states")]
    pub states: usize,
    pub cols: Option<usize>,
    pub rows: Option<usize>,
    #[serde(default = "default_r_steps")]
    pub r_steps: u32,
    #[serde(default = "default_t_max")]
    pub t_max: usize,
    /// Factor applied to a sampled diameter, which is only a lower bound.
    #[serde(default = "default_diameter_safety")]
    pub diameter_safety: f64,
}

fn default_bins() -> usize {
    16
}
fn default_samples() -> usize {
    100_000
}
fn default_s() -> f64 {
    0.1
}
fn default_offsets() -> Vec<f64> {
    vec![0.5]
}
fn default_partitions() -> usize {
    1000
}
fn default_oracle() -> String {
    "path".into()
}
fn default_states() -> usize {
    3
}
fn default_r_steps() -> u32 {
    1
}
fn default_t_max() -> usize {
    100
}
fn default_diameter_safety() -> f64 {
    1.1
}

impl Default for DiagKeys {
    fn default() -> Self {
        DiagKeys {
            bins: default_bins(),
            checkpoints: None,
            samples: default_samples(),
            s: default_s(),
            axis: 0,
            offsets: default_offsets(),
            partitions: default_partitions(),
            oracle: default_oracle(),
            states: default_states(),
            cols: None,
            rows: None,
            r_steps: default_r_steps(),
            t_max: default_t_max(),
            diameter_safety: default_diameter_safety(),
        }
    }
}

fn invalid(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| invalid(e.message().to_string()))
    }

    pub fn load(path: &Path) -> Result<(Self, String), CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::parse(&text).map_err(|e| match e {
            CliError::Config(m) => invalid(format!("{}: {m}", path.display())),
            other => other,
        })?;
        // relative polyline files resolve against the config's directory
        let dir = path.parent().unwrap_or(Path::new("."));
        for spec in [Some(&mut cfg.domain), cfg.flow.base.as_mut()].into_iter().flatten() {
            if let Some(f) = spec.file.as_mut() {
                if f.is_relative() {
                    *f = dir.join(&*f);
                }
            }
        }
        Ok((cfg, text))
    }

    pub fn chain_seed(&self) -> u64 {
        self.chain.seed.unwrap_or(self.seed)
    }

    pub fn potential_spec(&self) -> Result<PotentialSpec, CliError> {
        Ok(PotentialSpec::parse(&self.potential)?)
    }

    pub fn flow_config(&self) -> Result<FlowConfig, CliError> {
        let base = match &self.flow.base {
            Some(spec) => {
                if spec.kind == "flow_image" {
                    return Err(invalid("flow.base cannot itself be a flow image"));
                }
                spec.build()?
            }
            None => Domain::unit_disk(),
        };
        let h = self.grid.h.unwrap_or(0.02);
        let mut cfg = FlowConfig::new(base, self.potential_spec()?, self.flow.steps, h);
        if let Some(p) = self.grid.pad {
            cfg.pad = p;
        }
        if let Some(t) = self.pde.tol {
            cfg.solver.tol = t;
        }
        if let Some(m) = self.pde.max_iter {
            cfg.solver.max_iter = m;
        }
        if let Some(s) = &self.pde.scheme {
            cfg.solver.scheme = match s.as_str() {
                "ghost_fluid" => BoundaryScheme::GhostFluid,
                "staircase" => BoundaryScheme::Staircase,
                other => return Err(invalid(format!("unknown pde.scheme `{other}`"))),
            };
        }
        if let Some(s) = self.flow.seed_spacing {
            cfg.seed_spacing = s;
        }
        if let Some(f) = self.flow.boundary_filter {
            cfg.boundary_filter = f;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn build_map(&self) -> Result<Arc<TransportMap>, CliError> {
        Ok(Arc::new(build_map(self.flow_config()?)?))
    }

    /// The sampling domain. A flow image is rebuilt from the flow keys;
    /// `map` reuses an already built one.
    pub fn domain(&self, map: Option<&Arc<TransportMap>>) -> Result<Domain, CliError> {
        if self.domain.kind == "flow_image" {
            let map = match map {
                Some(m) => m.clone(),
                None => self.build_map()?,
            };
            return Ok(map.image());
        }
        self.domain.build()
    }

    pub fn chain_config(&self, domain: &Domain) -> Result<ChainConfig, CliError> {
        let c = &self.chain;
        let start = match c.start.as_str() {
            "uniform" => StartRule::Uniform,
            "point" => StartRule::Point(c.point.clone().ok_or_else(|| invalid("chain.start = \"point\" needs chain.point"))?),
            "subregion" => {
                let bb = domain.bounding_box();
                let (lo, hi) = match (&c.subregion_lo, &c.subregion_hi, c.warm_m) {
                    (Some(lo), Some(hi), _) => (lo.clone(), hi.clone()),
                    (None, None, Some(m)) if m >= 1.0 => {
                        let f = (1.0 / m).powf(1.0 / bb.dim() as f64);
                        let hi = bb.lo.iter().zip(&bb.hi).map(|(a, b)| a + f * (b - a)).collect();
                        (bb.lo.clone(), hi)
                    }
                    _ => return Err(invalid("chain.start = \"subregion\" needs subregion_lo/subregion_hi or warm_m >= 1")),
                };
                StartRule::Subregion(Domain::cube(lo, hi)?)
            }
            other => return Err(invalid(format!("unknown chain.start `{other}`"))),
        };
        let mut cfg = ChainConfig::new(c.r, c.steps, self.chain_seed(), start);
        cfg.lazy = c.lazy;
        cfg.validate(domain)?;
        Ok(cfg)
    }

    /// Explicit checkpoints, or `0` and the powers of two below `chain.steps`
    /// followed by `chain.steps`.
    pub fn checkpoints(&self) -> Vec<usize> {
        if let Some(c) = &self.diagnostics.checkpoints {
            return c.clone();
        }
        let mut v = vec![0];
        let mut t = 1;
        while t < self.chain.steps {
            v.push(t);
            t *= 2;
        }
        if self.chain.steps > 0 {
            v.push(self.chain.steps);
        }
        v
    }
}

impl DomainSpec {
    fn build(&self) -> Result<Domain, CliError> {
        let d = match self.kind.as_str() {
            "ball" => Domain::ball(self.center.clone().unwrap_or(vec![0.0, 0.0]), self.radius.unwrap_or(1.0))?,
            "box" => Domain::cube(self.lo.clone().unwrap_or(vec![0.0, 0.0]), self.hi.clone().unwrap_or(vec![1.0, 1.0]))?,
            "l_shape" => Domain::LShape,
            "star" => {
                let c = self.center.clone().unwrap_or(vec![0.0, 0.0]);
                if c.len() != 2 {
                    return Err(invalid("star center must be 2D"));
                }
                let radii = self.radii.clone().ok_or_else(|| invalid("star domain needs `radii`"))?;
                Domain::Star(StarShape::from_samples([c[0], c[1]], radii)?)
            }
            "polyline" => {
                let pl = match (&self.vertices, &self.file) {
                    (Some(v), None) => Polyline::new(v.clone())?,
                    (None, Some(f)) => {
                        let text = std::fs::read_to_string(f).map_err(|e| CliError::Io(format!("{}: {e}", f.display())))?;
                        Polyline::from_csv_str(&text)?
                    }
                    _ => return Err(invalid("polyline domain needs exactly one of `vertices` or `file`")),
                };
                Domain::Polyline(pl)
            }
            "flow_image" => return Err(invalid("flow_image is only valid as the sampling domain")),
            other => return Err(invalid(format!("unknown domain kind `{other}`"))),
        };
        Ok(d)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_uses_defaults() {
        let c = ExperimentConfig::parse("").unwrap();
        assert_eq!(c.chain.r, 0.2);
        assert_eq!(c.diagnostics.bins, 16);
        assert!(matches!(c.domain(None).unwrap(), Domain::Ball { .. }));
    }

    #[test]
    fn unknown_key_is_named() {
        let e = ExperimentConfig::parse("[chain]\nradius = 0.1\n").unwrap_err();
        assert!(e.to_string().contains("radius"), "{e}");
        let e = ExperimentConfig::parse("bogus = 1\n").unwrap_err();
        assert!(e.to_string().contains("bogus"), "{e}");
    }

    #[test]
    fn default_checkpoints_end_at_steps() {
        let c = ExperimentConfig::parse("[chain]\nsteps = 10\n").unwrap();
        assert_eq!(c.checkpoints(), vec![0, 1, 2, 4, 8, 10]);
    }

    #[test]
    fn warm_m_picks_a_corner_box() {
        let c = ExperimentConfig::parse("[domain]\nkind = \"box\"\n[chain]\nstart = \"subregion\"\nwarm_m = 4.0\n").unwrap();
        let d = c.domain(None).unwrap();
        let cfg = c.chain_config(&d).unwrap();
        let StartRule::Subregion(Domain::Box { hi, .. }) = cfg.start else { panic!() };
        assert_eq!(hi, vec![0.5, 0.5]);
    }
}
