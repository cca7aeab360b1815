//! Experiment manifests: one JSON document per run.

use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use hoplab_core::diffusion::EdgeSet;
use hoplab_core::pointproc::{EnergyLaw, SpacingLaw, DEFAULT_EPS_TRUNC};
use hoplab_core::rates::RateModel;
use hoplab_core::spectral::GapMethod;
use hoplab_core::walker::WalkKind;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Kind {
    #[serde(rename = "msd")]
    Msd,
    #[serde(rename = "variational")]
    Variational,
    #[serde(rename = "nn_analytic")]
    NnAnalytic,
    #[serde(rename = "spectral_scan")]
    SpectralScan,
    #[serde(rename = "cheeger_scan")]
    CheegerScan,
    #[serde(rename = "beta_sweep")]
    BetaSweep,
    #[serde(rename = "L_sweep")]
    LSweep,
    #[serde(rename = "certificate")]
    Certificate,
    #[serde(rename = "bounds_crosscheck")]
    BoundsCrosscheck,
}

/// What the values in `grid` stand for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GridAxis {
    Beta,
    BoxSize,
    Alpha,
}

impl Kind {
    pub fn tag(self) -> &'static str {
        match self {
            Kind::Msd => "msd",
            Kind::Variational => "variational",
            Kind::NnAnalytic => "nn_analytic",
            Kind::SpectralScan => "spectral_scan",
            Kind::CheegerScan => "cheeger_scan",
            Kind::BetaSweep => "beta_sweep",
            Kind::LSweep => "L_sweep",
            Kind::Certificate => "certificate",
            Kind::BoundsCrosscheck => "bounds_crosscheck",
        }
    }

    pub fn axis(self) -> GridAxis {
        match self {
            Kind::SpectralScan | Kind::CheegerScan | Kind::LSweep => GridAxis::BoxSize,
            Kind::Certificate => GridAxis::Alpha,
            _ => GridAxis::Beta,
        }
    }
}

/// Estimators a `beta_sweep` can run at every grid point.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepMethod {
    VariationalFull,
    VariationalNn,
    NnAnalytic,
    Msd,
}

fn default_methods() -> Vec<SweepMethod> {
    vec![SweepMethod::VariationalFull, SweepMethod::VariationalNn, SweepMethod::NnAnalytic]
}

/// Sample sizes and estimator knobs. Every field has a default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Samples {
    /// Finite-volume size `N`.
    pub n: usize,
    pub env_samples: usize,
    pub replicas: usize,
    pub horizon: f64,
    pub walk: WalkKind,
    pub edges: EdgeSet,
    /// Pair omission tolerance of the finite-volume problems.
    pub eps_trunc: f64,
    /// Environments per box size in spectral scans.
    pub seeds: usize,
    pub gap_method: GapMethod,
    /// Monte Carlo draws for `nn_analytic` and `certificate`.
    pub draws: usize,
    /// Order `M` of the certificate.
    pub order: usize,
    pub moment_samples: usize,
    /// Thinning cutoff; the `beta` schedule when absent.
    pub e_star: Option<f64>,
    pub upper_n: f64,
    pub upper_a: f64,
    pub upper_env_samples: usize,
}

impl Default for Samples {
    fn default() -> Self {
        Self {
            n: 300,
            env_samples: 30,
            replicas: 200,
            horizon: 1e4,
            walk: WalkKind::Vrh,
            edges: EdgeSet::Full,
            eps_trunc: DEFAULT_EPS_TRUNC,
            seeds: 8,
            gap_method: GapMethod::Auto,
            draws: 8000,
            order: 30,
            moment_samples: 100_000,
            e_star: None,
            upper_n: 200.0,
            upper_a: 2.0,
            upper_env_samples: 200,
        }
    }
}

fn default_energy() -> EnergyLaw {
    EnergyLaw::PowerLaw { delta: 1.0 }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentManifest {
    pub kind: Kind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    /// Master seed; every row's sub-seed derives from it.
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    pub laws: Vec<SpacingLaw>,
    #[serde(default = "default_energy")]
    pub energy: EnergyLaw,
    /// `beta` is replaced by the grid value for kinds that sweep `beta`.
    pub model: RateModel,
    /// `beta` values, box sizes `L`, or `alpha` values, depending on `kind`.
    pub grid: Vec<f64>,
    #[serde(default)]
    pub samples: Samples,
    #[serde(default = "default_methods")]
    pub methods: Vec<SweepMethod>,
    /// Overrides the default tolerance of every fitted exponent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tolerance: Option<f64>,
}

impl ExperimentManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading manifest {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("manifest {}", path.display()))
    }

    pub fn parse(text: &str) -> Result<Self> {
        let m: Self = serde_json::from_str(text).context("malformed manifest")?;
        Ok(m)
    }

    pub fn master_seed(&self) -> Result<u64> {
        self.seed.context("master seed missing: set \"seed\" in the manifest or pass --seed")
    }

    pub fn label(&self) -> String {
        self.name.clone().unwrap_or_else(|| self.kind.tag().to_string())
    }

    pub fn validate(&self) -> Result<()> {
        self.master_seed()?;
        ensure!(!self.laws.is_empty(), "laws must not be empty");
        for law in &self.laws {
            law.validate().with_context(|| format!("law {law:?}"))?;
        }
        self.energy.validate().context("energy law")?;
        ensure!(!self.grid.is_empty(), "grid must not be empty");
        ensure!(self.grid.iter().all(|g| g.is_finite()), "grid values must be finite");
        ensure!(self.grid.windows(2).all(|w| w[0] < w[1]), "grid must be strictly increasing");
        match self.kind.axis() {
            GridAxis::Beta => ensure!(self.grid[0] >= 0.0, "beta grid must be nonnegative"),
            GridAxis::BoxSize => ensure!(self.grid[0] > 0.0, "box sizes must be positive"),
            GridAxis::Alpha => ensure!(self.grid[0] > 0.0, "alpha grid must be positive"),
        }
        let s = &self.samples;
        ensure!(s.n >= 3, "samples.n must be at least 3");
        ensure!(s.env_samples >= 2, "samples.env_samples must be at least 2");
        ensure!(s.replicas >= 2, "samples.replicas must be at least 2");
        ensure!(s.horizon > 0.0 && s.horizon.is_finite(), "samples.horizon must be positive");
        ensure!(s.eps_trunc > 0.0 && s.eps_trunc < 1.0, "samples.eps_trunc must lie in (0, 1)");
        ensure!(s.seeds >= 1, "samples.seeds must be at least 1");
        ensure!(s.draws >= 2, "samples.draws must be at least 2");
        ensure!(s.order >= 1, "samples.order must be at least 1");
        if let Some(t) = self.tolerance {
            ensure!(t > 0.0 && t.is_finite(), "tolerance must be positive");
        }
        if let Some(e) = s.e_star {
            ensure!(e > 0.0 && e <= 1.0, "samples.e_star must lie in (0, 1]");
        }
        match self.kind {
            Kind::BetaSweep => ensure!(!self.methods.is_empty(), "methods must not be empty"),
            Kind::BoundsCrosscheck => {
                ensure!(self.model.alpha < 1.0, "bounds_crosscheck needs alpha < 1, got {}", self.model.alpha);
                if !matches!(self.energy, EnergyLaw::PowerLaw { .. }) {
                    bail!("bounds_crosscheck needs power_law energies");
                }
            }
            Kind::Certificate => {
                if let Some(law) = self.laws.iter().find(|l| !l.unbounded()) {
                    bail!("certificate needs unbounded spacings, got {law:?}");
                }
            }
            _ => {}
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form, without the output directory.
    pub fn hash(&self) -> Result<String> {
        let mut canon = self.clone();
        canon.output_dir = None;
        let text = serde_json::to_string(&canon).context("serializing manifest")?;
        let digest = Sha256::digest(text.as_bytes());
        Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
    }
}
