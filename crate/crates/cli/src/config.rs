//! Experiment configuration: a single versioned JSON file.

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};
use std::sync::Arc;

use carnot_core::group::{BracketCoeff, StratifiedAlgebra};
use carnot_core::lattice::{GridMeasure, Lattice};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema: u32,
    pub group: GroupSpec,
    pub lattice: LatticeSpec,
    pub initial: InitialSpec,
    #[serde(default)]
    pub solver: SolverSpec,
    #[serde(default)]
    pub ot: OtSpec,
    /// epsilon list for diagnostics and epsilon-Fisher columns
    #[serde(default = "default_eps_list")]
    pub eps_list: Vec<f64>,
    /// Ricci bound constant for HWI
    #[serde(default = "default_ricci_k")]
    pub ricci_k: f64,
    #[serde(default)]
    pub checks: Checks,
    #[serde(default)]
    pub seed: u64,
}

fn default_eps_list() -> Vec<f64> {
    vec![1.0, 0.5, 0.25]
}

fn default_ricci_k() -> f64 {
    1.0
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum GroupSpec {
    Preset(String),
    Custom {
        layers: Vec<usize>,
        /// 1-based basis indices
        brackets: Vec<BracketJson>,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BracketJson {
    pub i: usize,
    pub j: usize,
    pub k: usize,
    pub c: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatticeSpec {
    pub half_widths: Vec<f64>,
    pub counts: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "kebab-case", deny_unknown_fields)]
pub enum InitialSpec {
    UniformBox,
    GaussianBump {
        center: Vec<f64>,
        width: f64,
    },
    TwoBumps {
        centers: [Vec<f64>; 2],
        width: f64,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverSpec {
    pub t_end: f64,
    /// dt as a fraction of the Gershgorin stability bound
    pub dt_factor: f64,
    pub scheme: SchemeSpec,
    /// record every k-th step
    pub record_every: usize,
}

impl Default for SolverSpec {
    fn default() -> Self {
        SolverSpec {
            t_end: 0.5,
            dt_factor: 0.4,
            scheme: SchemeSpec::Explicit,
            record_every: 25,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SchemeSpec {
    Explicit,
    Implicit,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OtSpec {
    pub support_budget: usize,
    /// "box" or an epsilon for the Riemannian lattice backend
    #[serde(default)]
    pub riemannian_eps: Option<f64>,
    /// node counts of the distance lattice (defaults to the main lattice)
    #[serde(default)]
    pub distance_counts: Option<Vec<usize>>,
}

impl Default for OtSpec {
    fn default() -> Self {
        OtSpec {
            support_budget: 512,
            riemannian_eps: None,
            distance_counts: None,
        }
    }
}

/// Per-check tolerances; a check runs under `all` iff its block is present.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checks {
    #[serde(default)]
    pub kernel: Option<KernelTolerances>,
    #[serde(default)]
    pub dissipation: Option<DissipationTolerances>,
    #[serde(default)]
    pub edi: Option<EdiTolerances>,
    #[serde(default)]
    pub jko: Option<JkoTolerances>,
    #[serde(default)]
    pub cd: Option<CdTolerances>,
    #[serde(default)]
    pub hwi: Option<HwiTolerances>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelTolerances {
    pub mass_err: f64,
    pub symmetry_err: f64,
    pub scaling_err: f64,
    pub envelope_stability_factor: f64,
    #[serde(default = "default_kernel_times")]
    pub times: Vec<f64>,
    #[serde(default = "default_t_sym")]
    pub t_sym: f64,
    #[serde(default = "default_t_scale")]
    pub t_scale: f64,
}

fn default_kernel_times() -> Vec<f64> {
    vec![0.05, 0.1, 0.2, 0.4, 0.5]
}
fn default_t_sym() -> f64 {
    0.15
}
fn default_t_scale() -> f64 {
    0.4
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DissipationTolerances {
    pub rel_mismatch: f64,
    pub window: (f64, f64),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EdiTolerances {
    /// |equality residual| as a fraction of the entropy drop
    pub rel_residual: f64,
    pub window: (f64, f64),
    pub levels: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JkoTolerances {
    pub tau: f64,
    pub t_end: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CdTolerances {
    pub k_grid: Vec<f64>,
    pub times: Vec<f64>,
    /// require lambda_hat within this relative slack of [Q/2m1, Q/m1]
    pub lambda_window_slack: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HwiTolerances {
    pub eps: f64,
    pub pairs: usize,
}

impl ExperimentConfig {
    pub fn load(path: &std::path::Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let cfg: ExperimentConfig = serde_json::from_str(&text)
            .with_context(|| format!("parsing config {}", path.display()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        if self.schema != 1 {
            bail!("unsupported schema version {} (expected 1)", self.schema);
        }
        if self.lattice.half_widths.len() != self.lattice.counts.len() {
            bail!("lattice half_widths and counts must have equal length");
        }
        if self.solver.t_end <= 0.0 || self.solver.dt_factor <= 0.0 {
            bail!("solver t_end and dt_factor must be positive");
        }
        if self.eps_list.iter().any(|&e| e <= 0.0) {
            bail!("eps_list entries must be positive");
        }
        if let GroupSpec::Custom { brackets, .. } = &self.group {
            if brackets.iter().any(|b| b.i == 0 || b.j == 0 || b.k == 0) {
                bail!("bracket indices are 1-based; found index 0");
            }
        }
        Ok(())
    }

    pub fn build_group(&self) -> anyhow::Result<Arc<StratifiedAlgebra<f64>>> {
        let g = match &self.group {
            GroupSpec::Preset(name) => StratifiedAlgebra::preset(name)?,
            GroupSpec::Custom { layers, brackets } => {
                let coeffs: Vec<BracketCoeff> = brackets
                    .iter()
                    .map(|b| BracketCoeff {
                        i: b.i - 1,
                        j: b.j - 1,
                        k: b.k - 1,
                        c: b.c,
                    })
                    .collect();
                StratifiedAlgebra::new("custom", layers, &coeffs)?
            }
        };
        Ok(Arc::new(g))
    }

    pub fn build_lattice(&self) -> anyhow::Result<Arc<Lattice<f64>>> {
        Ok(Arc::new(Lattice::symmetric(
            &self.lattice.half_widths,
            &self.lattice.counts,
        )?))
    }

    pub fn build_initial(&self, lattice: Arc<Lattice<f64>>) -> anyhow::Result<GridMeasure<f64>> {
        let measure = match &self.initial {
            InitialSpec::UniformBox => GridMeasure::discretize(lattice, |_| 1.0)?.0,
            InitialSpec::GaussianBump { center, width } => {
                let c = center.clone();
                let w2 = width * width;
                GridMeasure::discretize(lattice, move |x| {
                    let r2: f64 = x.iter().zip(&c).map(|(xi, ci)| (xi - ci).powi(2)).sum();
                    (-r2 / (2.0 * w2)).exp()
                })?
                .0
            }
            InitialSpec::TwoBumps { centers, width } => {
                let c = centers.clone();
                let w2 = width * width;
                GridMeasure::discretize(lattice, move |x| {
                    let mut v = 0.0;
                    for center in &c {
                        let r2: f64 =
                            x.iter().zip(center).map(|(xi, ci)| (xi - ci).powi(2)).sum();
                        v += (-r2 / (2.0 * w2)).exp();
                    }
                    v
                })?
                .0
            }
        };
        Ok(measure)
    }
}
