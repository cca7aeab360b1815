//! Marked renewal point processes on the line.
//!
//! Points are built outward from `x_0 = 0` by adding i.i.d. spacings, and each
//! point carries an i.i.d. energy mark in `[-1, 1]`. The right and left halves
//! draw from separate derived streams, so an environment can be grown lazily
//! and a wider build is always an extension of a narrower one.

use libm::erfc;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, HopError, Result};
use crate::seed;

/// Default truncation tolerance for rate sums.
pub const DEFAULT_EPS_TRUNC: f64 = 1e-12;

/// Prefactor `c` used for the lower tail bound `c e^{-lambda_* t}` of thinned spacings.
pub const THINNED_LOWER_PREFACTOR: f64 = 0.25;

/// Uniform draw in `(0, 1]`, safe for logarithms.
#[inline]
pub(crate) fn open_unit(rng: &mut ChaCha8Rng) -> f64 {
    1.0 - rng.random::<f64>()
}

/// Law of the i.i.d. spacings `Z_j = x_{j+1} - x_j`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SpacingLaw {
    /// Constant spacing `a`.
    Deterministic { a: f64 },
    /// Exponential with rate `lambda` (a Poisson process of density `lambda`).
    Exponential { lambda: f64 },
    /// `P(Z = k) = p (1 - p)^{k-1}` on `{1, 2, ...}`.
    Geometric { p: f64 },
    /// `P(Z > t) = exp(-lambda t^tau)`.
    Weibull { lambda: f64, tau: f64 },
    /// `|Y|` with `Y ~ N(0, sigma^2)`.
    HalfGaussian { sigma: f64 },
    /// `P(Z > t) = t^{-r}` for `t >= 1`.
    Pareto { r: f64 },
}

fn positive(name: &str, v: f64) -> Result<()> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        invalid(format!("{name} must be a positive finite number, got {v}"))
    }
}

impl SpacingLaw {
    pub fn validate(&self) -> Result<()> {
        match *self {
            SpacingLaw::Deterministic { a } => positive("a", a),
            SpacingLaw::Exponential { lambda } => positive("lambda", lambda),
            SpacingLaw::Geometric { p } => {
                if p > 0.0 && p < 1.0 {
                    Ok(())
                } else {
                    invalid(format!("geometric p must lie in (0,1), got {p}"))
                }
            }
            SpacingLaw::Weibull { lambda, tau } => {
                positive("lambda", lambda)?;
                positive("tau", tau)
            }
            SpacingLaw::HalfGaussian { sigma } => positive("sigma", sigma),
            SpacingLaw::Pareto { r } => {
                if r.is_finite() && r > 2.0 {
                    Ok(())
                } else {
                    invalid(format!("pareto r must exceed 2 (finite second moment), got {r}"))
                }
            }
        }
    }

    pub fn mean(&self) -> f64 {
        match *self {
            SpacingLaw::Deterministic { a } => a,
            SpacingLaw::Exponential { lambda } => 1.0 / lambda,
            SpacingLaw::Geometric { p } => 1.0 / p,
            SpacingLaw::Weibull { lambda, tau } => {
                lambda.powf(-1.0 / tau) * statrs::function::gamma::gamma(1.0 + 1.0 / tau)
            }
            SpacingLaw::HalfGaussian { sigma } => sigma * (2.0 / std::f64::consts::PI).sqrt(),
            SpacingLaw::Pareto { r } => r / (r - 1.0),
        }
    }

    /// Short label used in file names and CSV rows.
    pub fn label(&self) -> String {
        match *self {
            SpacingLaw::Deterministic { a } => format!("deterministic({a})"),
            SpacingLaw::Exponential { lambda } => format!("exponential({lambda})"),
            SpacingLaw::Geometric { p } => format!("geometric({p})"),
            SpacingLaw::Weibull { lambda, tau } => format!("weibull({lambda},{tau})"),
            SpacingLaw::HalfGaussian { sigma } => format!("half_gaussian({sigma})"),
            SpacingLaw::Pareto { r } => format!("pareto({r})"),
        }
    }

    /// One draw by inverse transform (`HalfGaussian` uses a normal draw).
    pub fn sample(&self, rng: &mut ChaCha8Rng) -> f64 {
        match *self {
            SpacingLaw::Deterministic { a } => a,
            SpacingLaw::Exponential { lambda } => -open_unit(rng).ln() / lambda,
            SpacingLaw::Geometric { p } => 1.0 + (open_unit(rng).ln() / (1.0 - p).ln()).floor(),
            SpacingLaw::Weibull { lambda, tau } => (-open_unit(rng).ln() / lambda).powf(1.0 / tau),
            SpacingLaw::HalfGaussian { sigma } => loop {
                let y: f64 = rng.sample(StandardNormal);
                let z = (sigma * y).abs();
                if z > 0.0 {
                    break z;
                }
            },
            SpacingLaw::Pareto { r } => open_unit(rng).powf(-1.0 / r),
        }
    }

    /// Survival function `psi(t) = P(Z > t)`.
    pub fn tail(&self, t: f64) -> f64 {
        if t < 0.0 {
            return 1.0;
        }
        match *self {
            SpacingLaw::Deterministic { a } => {
                if t < a {
                    1.0
                } else {
                    0.0
                }
            }
            SpacingLaw::Exponential { lambda } => (-lambda * t).exp(),
            SpacingLaw::Geometric { p } => (1.0 - p).powf(t.floor()),
            SpacingLaw::Weibull { lambda, tau } => (-lambda * t.powf(tau)).exp(),
            SpacingLaw::HalfGaussian { sigma } => erfc(t / (sigma * std::f64::consts::SQRT_2)),
            SpacingLaw::Pareto { r } => {
                if t < 1.0 {
                    1.0
                } else {
                    t.powf(-r)
                }
            }
        }
    }

    /// True when the support is unbounded above.
    pub fn unbounded(&self) -> bool {
        !matches!(self, SpacingLaw::Deterministic { .. })
    }

    /// Closed form of `E[exp(min(Z^alpha, kappa))]` where one is catalogued.
    ///
    /// Returns `Some(f64::INFINITY)` when the moment is known to diverge and
    /// `None` when no closed form is available.
    pub fn exp_moment(&self, alpha: f64, kappa: f64) -> Option<f64> {
        let untruncated = kappa.is_infinite();
        match *self {
            SpacingLaw::Deterministic { a } => Some(a.powf(alpha).min(kappa).exp()),
            SpacingLaw::Exponential { lambda } if alpha == 1.0 => {
                if untruncated {
                    Some(if lambda > 1.0 { lambda / (lambda - 1.0) } else { f64::INFINITY })
                } else if (lambda - 1.0).abs() < 1e-15 {
                    Some(1.0 + kappa)
                } else {
                    let decay = (-(lambda - 1.0) * kappa).exp();
                    Some(lambda / (lambda - 1.0) * (1.0 - decay) + decay)
                }
            }
            SpacingLaw::Geometric { p } if alpha == 1.0 && untruncated => {
                let q = (1.0 - p) * std::f64::consts::E;
                Some(if q < 1.0 { p * std::f64::consts::E / (1.0 - q) } else { f64::INFINITY })
            }
            _ if untruncated && self.exp_moment_diverges(alpha) => Some(f64::INFINITY),
            _ => None,
        }
    }

    /// Whether `E[exp(Z^alpha)] = infinity`, decided from the tail class.
    pub fn exp_moment_diverges(&self, alpha: f64) -> bool {
        let weibull_like = |lambda: f64, tau: f64| alpha > tau || (alpha == tau && lambda <= 1.0);
        match *self {
            SpacingLaw::Deterministic { .. } => false,
            SpacingLaw::Exponential { lambda } => weibull_like(lambda, 1.0),
            SpacingLaw::Geometric { p } => weibull_like(-(1.0 - p).ln(), 1.0),
            SpacingLaw::Weibull { lambda, tau } => weibull_like(lambda, tau),
            SpacingLaw::HalfGaussian { sigma } => weibull_like(1.0 / (2.0 * sigma * sigma), 2.0),
            SpacingLaw::Pareto { .. } => true,
        }
    }
}

/// Law of the energy marks on `[-1, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EnergyLaw {
    /// `nu[-E, E] = E^delta` on `[0, 1]`.
    PowerLaw { delta: f64 },
    /// Mass 1/2 at each of `+epsilon` and `-epsilon`.
    TwoPoint { epsilon: f64 },
    /// All marks equal to zero.
    PointMassZero,
}

impl EnergyLaw {
    pub fn validate(&self) -> Result<()> {
        match *self {
            EnergyLaw::PowerLaw { delta } => positive("delta", delta),
            EnergyLaw::TwoPoint { epsilon } => {
                if epsilon > 0.0 && epsilon <= 1.0 {
                    Ok(())
                } else {
                    invalid(format!("two-point epsilon must lie in (0,1], got {epsilon}"))
                }
            }
            EnergyLaw::PointMassZero => Ok(()),
        }
    }

    /// `|E| = U^{1/delta}` with an independent sign for the power law.
    pub fn sample(&self, rng: &mut ChaCha8Rng) -> f64 {
        match *self {
            EnergyLaw::PowerLaw { delta } => {
                let modulus = open_unit(rng).powf(1.0 / delta);
                if rng.random::<bool>() {
                    modulus
                } else {
                    -modulus
                }
            }
            EnergyLaw::TwoPoint { epsilon } => {
                if rng.random::<bool>() {
                    epsilon
                } else {
                    -epsilon
                }
            }
            EnergyLaw::PointMassZero => 0.0,
        }
    }

    /// `nu[-e, e]`.
    pub fn mass_within(&self, e: f64) -> f64 {
        if e < 0.0 {
            return 0.0;
        }
        match *self {
            EnergyLaw::PowerLaw { delta } => e.min(1.0).powf(delta),
            EnergyLaw::TwoPoint { epsilon } => {
                if e >= epsilon {
                    1.0
                } else {
                    0.0
                }
            }
            EnergyLaw::PointMassZero => 1.0,
        }
    }

    pub fn label(&self) -> String {
        match *self {
            EnergyLaw::PowerLaw { delta } => format!("power_law({delta})"),
            EnergyLaw::TwoPoint { epsilon } => format!("two_point({epsilon})"),
            EnergyLaw::PointMassZero => "point_mass_zero".to_string(),
        }
    }
}

/// Spacings that are sums of a geometric number of base spacings.
///
/// This is the spacing law of the points whose marks satisfy `|E| <= E_*`,
/// with `nu = nu[-E_*, E_*]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThinnedSpacingSampler {
    pub base: SpacingLaw,
    pub nu: f64,
}

impl ThinnedSpacingSampler {
    pub fn new(base: SpacingLaw, nu: f64) -> Result<Self> {
        base.validate()?;
        if !(nu > 0.0 && nu <= 1.0) {
            return invalid(format!("thinning probability must lie in (0,1], got {nu}"));
        }
        Ok(Self { base, nu })
    }

    /// `lambda_* = -(1/mu) log(1 - nu)`; infinite when `nu = 1`.
    pub fn lambda_star(&self) -> f64 {
        -(1.0 - self.nu).ln() / self.base.mean()
    }

    pub fn mean(&self) -> f64 {
        self.base.mean() / self.nu
    }

    /// Geometric count on `{1, 2, ...}` with success probability `nu`.
    pub fn sample_count(&self, rng: &mut ChaCha8Rng) -> u64 {
        if self.nu >= 1.0 {
            return 1;
        }
        1 + (open_unit(rng).ln() / (1.0 - self.nu).ln()).floor() as u64
    }

    pub fn sample(&self, rng: &mut ChaCha8Rng) -> f64 {
        let q = self.sample_count(rng);
        (0..q).map(|_| self.base.sample(rng)).sum()
    }
}

/// Where an environment's spacings come from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SpacingSource {
    Law(SpacingLaw),
    Thinned(ThinnedSpacingSampler),
}

impl SpacingSource {
    pub fn mean(&self) -> f64 {
        match self {
            SpacingSource::Law(l) => l.mean(),
            SpacingSource::Thinned(t) => t.mean(),
        }
    }

    pub fn sample(&self, rng: &mut ChaCha8Rng) -> f64 {
        match self {
            SpacingSource::Law(l) => l.sample(rng),
            SpacingSource::Thinned(t) => t.sample(rng),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            SpacingSource::Law(l) => l.validate(),
            SpacingSource::Thinned(t) => ThinnedSpacingSampler::new(t.base, t.nu).map(|_| ()),
        }
    }

    pub fn label(&self) -> String {
        match self {
            SpacingSource::Law(l) => l.label(),
            SpacingSource::Thinned(t) => format!("thinned({},{})", t.base.label(), t.nu),
        }
    }
}

impl From<SpacingLaw> for SpacingSource {
    fn from(l: SpacingLaw) -> Self {
        SpacingSource::Law(l)
    }
}

impl From<ThinnedSpacingSampler> for SpacingSource {
    fn from(t: ThinnedSpacingSampler) -> Self {
        SpacingSource::Thinned(t)
    }
}

#[derive(Debug, Clone)]
struct Streams {
    right_space: ChaCha8Rng,
    right_energy: ChaCha8Rng,
    left_space: ChaCha8Rng,
    left_energy: ChaCha8Rng,
}

impl Streams {
    fn new(seed: u64) -> Self {
        Self {
            right_space: seed::stream(seed, "spacing-right"),
            right_energy: seed::stream(seed, "energy-right"),
            left_space: seed::stream(seed, "spacing-left"),
            left_energy: seed::stream(seed, "energy-left"),
        }
    }
}

/// A finite window of a marked point process with `x_0 = 0`.
///
/// Point indices run over `min_index()..=max_index()`; index 0 is the origin.
#[derive(Debug, Clone)]
pub struct Environment {
    spacing: SpacingSource,
    energy: EnergyLaw,
    seed: u64,
    half_width: f64,
    positions: Vec<f64>,
    energies: Vec<f64>,
    origin: usize,
    thinned_cutoff: Option<f64>,
    streams: Option<Streams>,
}

/// Window margin `(ln(1/eps))^{1/alpha} + 5 mu` added on both sides of a build.
pub fn window_margin(alpha: f64, eps_trunc: f64, mean_spacing: f64) -> f64 {
    (1.0 / eps_trunc).ln().max(0.0).powf(1.0 / alpha) + 5.0 * mean_spacing
}

/// Build an environment covering `[-half_width, half_width]` plus the margin
/// for `alpha = 1` and the default truncation tolerance.
pub fn build_environment(spacing: SpacingLaw, energy: EnergyLaw, half_width: f64, seed: u64) -> Result<Environment> {
    build_environment_for(spacing.into(), energy, half_width, seed, 1.0, DEFAULT_EPS_TRUNC)
}

/// Build with the margin appropriate for rate exponent `alpha` and tolerance `eps_trunc`.
pub fn build_environment_for(
    spacing: SpacingSource,
    energy: EnergyLaw,
    half_width: f64,
    seed: u64,
    alpha: f64,
    eps_trunc: f64,
) -> Result<Environment> {
    if !(half_width > 0.0 && half_width.is_finite()) {
        return invalid(format!("half_width must be positive, got {half_width}"));
    }
    if !(alpha > 0.0) || !(eps_trunc > 0.0 && eps_trunc < 1.0) {
        return invalid("margin needs alpha > 0 and eps_trunc in (0,1)");
    }
    let mut env = Environment::empty(spacing, energy, seed)?;
    let reach = half_width + window_margin(alpha, eps_trunc, spacing.mean());
    env.half_width = half_width;
    env.ensure_covers(-reach, reach)?;
    Ok(env)
}

/// Build an environment with exactly `n_left` points left and `n_right`
/// points right of the origin.
pub fn build_environment_counts(
    spacing: SpacingSource,
    energy: EnergyLaw,
    n_left: usize,
    n_right: usize,
    seed: u64,
) -> Result<Environment> {
    let mut env = Environment::empty(spacing, energy, seed)?;
    env.extend_left(n_left)?;
    env.extend_right(n_right)?;
    env.half_width = env.x(1.min(env.max_index())).min(-env.x(-(1.min(n_left as i64))));
    Ok(env)
}

impl Environment {
    fn empty(spacing: SpacingSource, energy: EnergyLaw, seed: u64) -> Result<Self> {
        spacing.validate()?;
        energy.validate()?;
        let mut origin_rng = seed::stream(seed, "energy-origin");
        let e0 = energy.sample(&mut origin_rng);
        Ok(Self {
            spacing,
            energy,
            seed,
            half_width: 0.0,
            positions: vec![0.0],
            energies: vec![e0],
            origin: 0,
            thinned_cutoff: None,
            streams: Some(Streams::new(seed)),
        })
    }

    /// Environment from explicit points; not extendable.
    ///
    /// `points` must be strictly increasing and contain `0.0`, which becomes
    /// the origin.
    pub fn from_points(
        spacing: SpacingSource,
        energy: EnergyLaw,
        positions: Vec<f64>,
        energies: Vec<f64>,
    ) -> Result<Self> {
        if positions.len() != energies.len() || positions.is_empty() {
            return invalid("positions and energies must be nonempty and of equal length");
        }
        if positions.windows(2).any(|w| !(w[1] > w[0])) {
            return invalid("positions must be strictly increasing");
        }
        if energies.iter().any(|e| !(-1.0..=1.0).contains(e)) {
            return invalid("energies must lie in [-1, 1]");
        }
        let origin = positions
            .iter()
            .position(|&x| x == 0.0)
            .ok_or_else(|| HopError::InvalidParameter("positions must contain the origin".into()))?;
        let half_width = positions[positions.len() - 1].min(-positions[0]).max(0.0);
        Ok(Self {
            spacing,
            energy,
            seed: 0,
            half_width,
            positions,
            energies,
            origin,
            thinned_cutoff: None,
            streams: None,
        })
    }

    pub fn spacing(&self) -> SpacingSource {
        self.spacing
    }
    pub fn energy_law(&self) -> EnergyLaw {
        self.energy
    }
    pub fn seed(&self) -> u64 {
        self.seed
    }
    pub fn half_width(&self) -> f64 {
        self.half_width
    }
    pub fn thinned_cutoff(&self) -> Option<f64> {
        self.thinned_cutoff
    }
    pub fn len(&self) -> usize {
        self.positions.len()
    }
    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }
    pub fn min_index(&self) -> i64 {
        -(self.origin as i64)
    }
    pub fn max_index(&self) -> i64 {
        (self.positions.len() - 1 - self.origin) as i64
    }
    pub fn contains_index(&self, k: i64) -> bool {
        k >= self.min_index() && k <= self.max_index()
    }
    /// Vector slot of point index `k`.
    #[inline]
    pub fn slot(&self, k: i64) -> usize {
        (k + self.origin as i64) as usize
    }
    #[inline]
    pub fn x(&self, k: i64) -> f64 {
        self.positions[self.slot(k)]
    }
    #[inline]
    pub fn e(&self, k: i64) -> f64 {
        self.energies[self.slot(k)]
    }
    pub fn positions(&self) -> &[f64] {
        &self.positions
    }
    pub fn energies(&self) -> &[f64] {
        &self.energies
    }
    /// Vector slot of the origin.
    pub fn origin_slot(&self) -> usize {
        self.origin
    }
    pub fn left_edge(&self) -> f64 {
        self.positions[0]
    }
    pub fn right_edge(&self) -> f64 {
        self.positions[self.positions.len() - 1]
    }
    pub fn extendable(&self) -> bool {
        self.streams.is_some()
    }

    /// Spacings `Z_k = x_{k+1} - x_k` for `k` in `min_index()..max_index()`.
    pub fn spacings(&self) -> Vec<f64> {
        self.positions.windows(2).map(|w| w[1] - w[0]).collect()
    }

    /// Append `count` points on the right.
    pub fn extend_right(&mut self, count: usize) -> Result<()> {
        let streams = self
            .streams
            .as_mut()
            .ok_or_else(|| HopError::NotExtendable("environment has no generating streams".into()))?;
        self.positions.reserve(count);
        for _ in 0..count {
            let z = self.spacing.sample(&mut streams.right_space);
            let e = self.energy.sample(&mut streams.right_energy);
            let last = self.positions[self.positions.len() - 1];
            self.positions.push(last + z);
            self.energies.push(e);
        }
        Ok(())
    }

    /// Prepend `count` points on the left.
    pub fn extend_left(&mut self, count: usize) -> Result<()> {
        if count == 0 {
            return Ok(());
        }
        let streams = self
            .streams
            .as_mut()
            .ok_or_else(|| HopError::NotExtendable("environment has no generating streams".into()))?;
        let mut xs = Vec::with_capacity(count);
        let mut es = Vec::with_capacity(count);
        let mut x = self.positions[0];
        for _ in 0..count {
            x -= self.spacing.sample(&mut streams.left_space);
            xs.push(x);
            es.push(self.energy.sample(&mut streams.left_energy));
        }
        xs.reverse();
        es.reverse();
        xs.extend_from_slice(&self.positions);
        es.extend_from_slice(&self.energies);
        self.positions = xs;
        self.energies = es;
        self.origin += count;
        Ok(())
    }

    /// Grow until the outermost points lie at or beyond `lo` and `hi`, in
    /// chunks of at least ten spacings.
    pub fn ensure_covers(&mut self, lo: f64, hi: f64) -> Result<()> {
        const CHUNK: usize = 10;
        if (self.left_edge() > lo || self.right_edge() < hi) && !self.extendable() {
            return Err(HopError::WindowNotCovered { lo, hi });
        }
        let mean = self.spacing.mean();
        while self.right_edge() < hi {
            let need = ((hi - self.right_edge()) / mean).ceil() as usize;
            self.extend_right(need.max(CHUNK))?;
        }
        while self.left_edge() > lo {
            let need = ((self.left_edge() - lo) / mean).ceil() as usize;
            self.extend_left(need.max(CHUNK))?;
        }
        Ok(())
    }

    /// Largest number of points in any closed unit interval starting at a point.
    pub fn max_unit_count(&self) -> usize {
        let xs = &self.positions;
        let mut best = 1;
        let mut j = 0;
        for i in 0..xs.len() {
            if j < i {
                j = i;
            }
            while j + 1 < xs.len() && xs[j + 1] - xs[i] <= 1.0 {
                j += 1;
            }
            best = best.max(j - i + 1);
        }
        best
    }

    /// Serialize as `{spacing_law, energy_law, seed, half_width, points}`.
    pub fn to_json(&self) -> Result<String> {
        let doc = EnvironmentDoc {
            spacing_law: self.spacing,
            energy_law: self.energy,
            seed: self.seed,
            half_width: self.half_width,
            thinned_cutoff: self.thinned_cutoff,
            points: (self.min_index()..=self.max_index())
                .map(|k| PointDoc { index: k, x: self.x(k), energy: self.e(k) })
                .collect(),
        };
        serde_json::to_string_pretty(&doc).map_err(|e| HopError::Serde(e.to_string()))
    }

    /// Parse a document written by [`Environment::to_json`].
    ///
    /// Generated environments are regenerated from their seed and checked
    /// point by point, which also restores the ability to extend them.
    pub fn from_json(text: &str) -> Result<Self> {
        let doc: EnvironmentDoc = serde_json::from_str(text).map_err(|e| HopError::Serde(e.to_string()))?;
        let n_left = doc.points.iter().filter(|p| p.index < 0).count();
        let n_right = doc.points.iter().filter(|p| p.index > 0).count();
        let positions: Vec<f64> = doc.points.iter().map(|p| p.x).collect();
        let energies: Vec<f64> = doc.points.iter().map(|p| p.energy).collect();
        if doc.thinned_cutoff.is_some() {
            let mut env = Environment::from_points(doc.spacing_law, doc.energy_law, positions, energies)?;
            env.seed = doc.seed;
            env.half_width = doc.half_width;
            env.thinned_cutoff = doc.thinned_cutoff;
            return Ok(env);
        }
        let mut env = build_environment_counts(doc.spacing_law, doc.energy_law, n_left, n_right, doc.seed)?;
        env.half_width = doc.half_width;
        if env.positions != positions || env.energies != energies {
            return Err(HopError::Serde("points do not match the regeneration from (laws, seed)".into()));
        }
        Ok(env)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct PointDoc {
    index: i64,
    x: f64,
    #[serde(rename = "E")]
    energy: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct EnvironmentDoc {
    spacing_law: SpacingSource,
    energy_law: EnergyLaw,
    seed: u64,
    half_width: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    thinned_cutoff: Option<f64>,
    points: Vec<PointDoc>,
}

/// `n` i.i.d. spacings from `law`, deterministic in `seed`.
pub fn sample_spacings(law: SpacingLaw, n: usize, seed: u64) -> Result<Vec<f64>> {
    law.validate()?;
    if n == 0 {
        return invalid("need at least one sample");
    }
    let mut rng = seed::stream(seed, "spacings");
    Ok((0..n).map(|_| law.sample(&mut rng)).collect())
}

/// `n` draws of the thinned spacing `sum_{j=1}^Q Z_j`.
pub fn sample_thinned_spacing(s: ThinnedSpacingSampler, n: usize, seed: u64) -> Result<Vec<f64>> {
    let s = ThinnedSpacingSampler::new(s.base, s.nu)?;
    if n == 0 {
        return invalid("need at least one sample");
    }
    let mut rng = seed::stream(seed, "thinned-spacings");
    Ok((0..n).map(|_| s.sample(&mut rng)).collect())
}

/// Survival function of the spacing law.
pub fn tail_psi(law: SpacingLaw, t: f64) -> Result<f64> {
    law.validate()?;
    if !(t >= 0.0) {
        return invalid(format!("tail argument must be nonnegative, got {t}"));
    }
    Ok(law.tail(t))
}

/// Keep the origin and every point with `|E| <= cutoff`, re-indexed around the origin.
pub fn thin_environment(env: &Environment, cutoff: f64) -> Result<Environment> {
    if !(cutoff > 0.0 && cutoff <= 1.0) {
        return invalid(format!("energy cutoff must lie in (0,1], got {cutoff}"));
    }
    if cutoff >= 1.0 && env.thinned_cutoff.is_none() {
        return Ok(env.clone());
    }
    let mut positions = Vec::new();
    let mut energies = Vec::new();
    let (mut left, mut right) = (0usize, 0usize);
    for k in env.min_index()..=env.max_index() {
        let e = env.e(k);
        if k == 0 || e.abs() <= cutoff {
            positions.push(env.x(k));
            energies.push(e);
            if k < 0 {
                left += 1;
            } else if k > 0 {
                right += 1;
            }
        }
    }
    if left == 0 {
        return Err(HopError::EmptyThinning { cutoff, side: "left" });
    }
    if right == 0 {
        return Err(HopError::EmptyThinning { cutoff, side: "right" });
    }
    let mut out = Environment::from_points(env.spacing, env.energy, positions, energies)?;
    out.seed = env.seed;
    out.half_width = env.half_width;
    out.thinned_cutoff = Some(env.thinned_cutoff.map_or(cutoff, |c| c.min(cutoff)));
    Ok(out)
}

/// Empirical thinned tail together with its two analytic envelopes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ThinnedTail {
    /// Empirical `P(Z* >= t)`.
    pub empirical: f64,
    /// Standard error of `empirical`.
    pub stderr: f64,
    /// `c e^{-lambda_* t}` with `c = THINNED_LOWER_PREFACTOR`.
    pub lower: f64,
    /// `4 e^{-nu t / (4 mu)}`.
    pub upper: f64,
}

pub fn thinned_tail_bounds(s: ThinnedSpacingSampler, t: f64, samples: usize, seed: u64) -> Result<ThinnedTail> {
    if !(t >= 0.0) {
        return invalid("tail argument must be nonnegative");
    }
    let draws = sample_thinned_spacing(s, samples, seed)?;
    let hits = draws.iter().filter(|&&z| z >= t).count() as f64;
    let n = draws.len() as f64;
    let p = hits / n;
    let lambda_star = s.lambda_star();
    let lower = if t == 0.0 { THINNED_LOWER_PREFACTOR } else { THINNED_LOWER_PREFACTOR * (-lambda_star * t).exp() };
    let upper = 4.0 * (-s.nu * t / (4.0 * s.base.mean())).exp();
    Ok(ThinnedTail { empirical: p, stderr: (p * (1.0 - p) / n).sqrt(), lower, upper })
}

/// Empirical `P(xi(a, b) >= k)` for `k = 1..=k_max` under the process
/// conditioned to contain the origin; `xi(a, b)` counts points in the open
/// interval.
pub fn interval_count_tail(
    law: SpacingLaw,
    a: f64,
    b: f64,
    k_max: usize,
    samples: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    law.validate()?;
    if !(a < b) || samples == 0 {
        return invalid("need a < b and at least one sample");
    }
    let counts = crate::par::map_indexed(samples, |i| {
        let mut rng = seed::stream(seed, &format!("interval-count-{i}"));
        let mut count = usize::from(a < 0.0 && b > 0.0);
        let mut x = 0.0;
        while x < b {
            x += law.sample(&mut rng);
            if x > a && x < b {
                count += 1;
            }
        }
        x = 0.0;
        while x > a {
            x -= law.sample(&mut rng);
            if x > a && x < b {
                count += 1;
            }
        }
        count
    });
    let n = samples as f64;
    Ok((1..=k_max).map(|k| counts.iter().filter(|&&c| c >= k).count() as f64 / n).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_spacings_are_constant() {
        let z = sample_spacings(SpacingLaw::Deterministic { a: 1.0 }, 4, 1).unwrap();
        assert_eq!(z, vec![1.0; 4]);
    }

    #[test]
    fn exponential_sample_mean() {
        let z = sample_spacings(SpacingLaw::Exponential { lambda: 2.0 }, 100_000, 3).unwrap();
        let (m, se) = crate::stats::mean_stderr(&z);
        assert!((m - 0.5).abs() < 3.0 * se, "mean {m} se {se}");
    }

    #[test]
    fn pareto_tail_at_two() {
        let n = 200_000;
        let z = sample_spacings(SpacingLaw::Pareto { r: 3.0 }, n, 5).unwrap();
        let p = z.iter().filter(|&&v| v > 2.0).count() as f64 / n as f64;
        let se = (0.125 * 0.875 / n as f64).sqrt();
        assert!((p - 0.125).abs() < 3.0 * se, "p {p}");
    }

    #[test]
    fn invalid_laws_are_rejected() {
        assert!(SpacingLaw::Pareto { r: 2.0 }.validate().is_err());
        assert!(SpacingLaw::Geometric { p: 1.0 }.validate().is_err());
        assert!(SpacingLaw::Exponential { lambda: -1.0 }.validate().is_err());
        assert!(sample_spacings(SpacingLaw::Deterministic { a: 1.0 }, 0, 1).is_err());
        assert!(EnergyLaw::TwoPoint { epsilon: 1.5 }.validate().is_err());
    }

    #[test]
    fn lattice_environment() {
        let env = build_environment(SpacingLaw::Deterministic { a: 1.0 }, EnergyLaw::PointMassZero, 2.0, 9).unwrap();
        assert_eq!(env.x(0), 0.0);
        for k in -2..=2 {
            assert_eq!(env.x(k), k as f64);
        }
        assert!(env.left_edge() <= -2.0 && env.right_edge() >= 2.0);
    }

    #[test]
    fn differences_reproduce_spacing_draws() {
        let law = SpacingLaw::Exponential { lambda: 1.5 };
        let env = build_environment_counts(law.into(), EnergyLaw::PointMassZero, 0, 50, 11).unwrap();
        let mut rng = seed::stream(11, "spacing-right");
        for k in 0..50 {
            let z = law.sample(&mut rng);
            assert_eq!(env.x(k + 1), env.x(k) + z);
        }
    }

    #[test]
    fn rebuild_is_identical() {
        let law = SpacingLaw::Weibull { lambda: 1.0, tau: 0.7 };
        let en = EnergyLaw::PowerLaw { delta: 2.0 };
        let a = build_environment(law, en, 30.0, 4).unwrap();
        let b = build_environment(law, en, 30.0, 4).unwrap();
        assert_eq!(a.positions(), b.positions());
        assert_eq!(a.energies(), b.energies());
    }

    #[test]
    fn json_round_trip_regenerates() {
        let env =
            build_environment(SpacingLaw::Exponential { lambda: 2.0 }, EnergyLaw::PowerLaw { delta: 1.0 }, 5.0, 77)
                .unwrap();
        let text = env.to_json().unwrap();
        let back = Environment::from_json(&text).unwrap();
        assert_eq!(back.positions(), env.positions());
        assert_eq!(back.energies(), env.energies());
        assert!(back.extendable());
        let tampered = text.replacen("\"seed\": 77", "\"seed\": 78", 1);
        assert!(Environment::from_json(&tampered).is_err());
    }

    #[test]
    fn thinning_filters_by_energy() {
        let env = Environment::from_points(
            SpacingLaw::Deterministic { a: 1.0 }.into(),
            EnergyLaw::PowerLaw { delta: 1.0 },
            vec![-1.0, 0.0, 1.0, 2.0, 3.0, 4.0],
            vec![0.1, 0.5, 0.9, 0.1, -0.05, 0.7],
        )
        .unwrap();
        let thin = thin_environment(&env, 0.2).unwrap();
        assert_eq!(thin.positions(), &[-1.0, 0.0, 2.0, 3.0]);
        // origin kept although |E_0| = 0.5 > 0.2
        assert_eq!(thin.x(0), 0.0);
        assert_eq!(thin.e(0), 0.5);
        let same = thin_environment(&env, 1.0).unwrap();
        assert_eq!(same.positions(), env.positions());
        assert!(matches!(thin_environment(&env, 0.01), Err(HopError::EmptyThinning { .. })));
    }

    #[test]
    fn thinned_with_unit_probability_is_base() {
        let base = SpacingLaw::Exponential { lambda: 1.0 };
        let s = ThinnedSpacingSampler::new(base, 1.0).unwrap();
        let mut rng = seed::rng(1);
        for _ in 0..100 {
            assert_eq!(s.sample_count(&mut rng), 1);
        }
        assert!(ThinnedSpacingSampler::new(base, 0.0).is_err());
        assert!(ThinnedSpacingSampler::new(base, 1.2).is_err());
    }

    #[test]
    fn thinned_poisson_is_poisson() {
        // thinning a Poisson process of rate 1 with probability 0.3 gives rate 0.3
        let s = ThinnedSpacingSampler::new(SpacingLaw::Exponential { lambda: 1.0 }, 0.3).unwrap();
        let thinned = sample_thinned_spacing(s, 20_000, 2).unwrap();
        let direct = sample_spacings(SpacingLaw::Exponential { lambda: 0.3 }, 20_000, 8).unwrap();
        let d = crate::stats::ks_distance(&thinned, &direct);
        // 99.9% two-sample KS critical value: 1.95 sqrt(2/n)
        assert!(d < 1.95 * (2.0 / 20_000.0f64).sqrt(), "ks {d}");
    }

    #[test]
    fn tails() {
        let exp = SpacingLaw::Exponential { lambda: 3.0 };
        assert_eq!(tail_psi(exp, 0.0).unwrap(), 1.0);
        let w = SpacingLaw::Weibull { lambda: 0.7, tau: 1.8 };
        assert!((tail_psi(w, 1.3).unwrap() - (-0.7 * 1.3f64.powf(1.8)).exp()).abs() < 1e-15);
        // P(Z > 2.5) = P(Z >= 3) = 1 - p - p(1-p)
        let p = 0.3;
        let oracle = 1.0 - p - p * (1.0 - p);
        let g = tail_psi(SpacingLaw::Geometric { p }, 2.5).unwrap();
        assert!((g - oracle).abs() < 1e-14);
        assert!((g - 0.49).abs() < 1e-14);
        assert!(tail_psi(exp, -1.0).is_err());
    }

    #[test]
    fn thinned_tail_at_zero_is_one() {
        let s = ThinnedSpacingSampler::new(SpacingLaw::Exponential { lambda: 1.0 }, 0.5).unwrap();
        let t = thinned_tail_bounds(s, 0.0, 1000, 3).unwrap();
        assert_eq!(t.empirical, 1.0);
    }

    #[test]
    fn half_gaussian_mean_matches_samples() {
        let law = SpacingLaw::HalfGaussian { sigma: 1.3 };
        let z = sample_spacings(law, 100_000, 21).unwrap();
        let (m, se) = crate::stats::mean_stderr(&z);
        assert!((m - law.mean()).abs() < 3.0 * se);
        // survival at sigma: erfc(1/sqrt 2) = 0.3173105078629141
        assert!((law.tail(1.3) - 0.317_310_507_862_914_1).abs() < 1e-12, "{}", law.tail(1.3));
    }

    #[test]
    fn exp_moment_catalogue() {
        let e2 = SpacingLaw::Exponential { lambda: 2.0 };
        assert_eq!(e2.exp_moment(1.0, f64::INFINITY), Some(2.0));
        assert_eq!(SpacingLaw::Exponential { lambda: 0.5 }.exp_moment(1.0, f64::INFINITY), Some(f64::INFINITY));
        assert_eq!(SpacingLaw::Pareto { r: 3.0 }.exp_moment(1.0, f64::INFINITY), Some(f64::INFINITY));
        assert_eq!(SpacingLaw::Exponential { lambda: 2.0 }.exp_moment(0.5, f64::INFINITY), None);
        // truncated exponential moment against quadrature of the density
        let kappa = 1.7;
        let m = e2.exp_moment(1.0, kappa).unwrap();
        let steps = 200_000;
        let h = kappa / steps as f64;
        let mut quad = 0.0;
        for i in 0..steps {
            let z = (i as f64 + 0.5) * h;
            quad += z.exp() * 2.0 * (-2.0 * z).exp() * h;
        }
        quad += kappa.exp() * (-2.0 * kappa).exp();
        assert!((m - quad).abs() < 1e-8, "{m} vs {quad}");
    }
}
