//! Pair jump rates, energy penalties and truncated site rate sums.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use statrs::function::gamma::{gamma, gamma_ur};

use crate::error::{invalid, HopError, Result};
use crate::pointproc::Environment;

/// Penalty function `u(E_i, E_j)` with declared sandwich constants.
pub type PenaltyFn = dyn Fn(f64, f64) -> f64 + Send + Sync;

/// A user-supplied symmetric penalty, accepted only after [`validate_u`] passes.
#[derive(Clone)]
pub struct CustomPenalty {
    f: Arc<PenaltyFn>,
    c1: f64,
    c2: f64,
}

impl CustomPenalty {
    /// Grid resolution used when admitting a custom penalty.
    pub const CHECK_GRID: usize = 41;

    pub fn new(f: Arc<PenaltyFn>, c1: f64, c2: f64) -> Result<Self> {
        let check = validate_u(&*f, c1, c2, Self::CHECK_GRID)?;
        if !check.pass {
            return invalid(format!(
                "custom penalty fails {} check at {:?} (violation {:e})",
                check.worst_kind, check.worst_at, check.worst_violation
            ));
        }
        Ok(Self { f, c1, c2 })
    }
}

impl fmt::Debug for CustomPenalty {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CustomPenalty").field("c1", &self.c1).field("c2", &self.c2).finish()
    }
}

#[derive(Debug, Clone)]
pub enum Penalty {
    /// `|E_i| + |E_j| + |E_i - E_j|`.
    Standard,
    /// `|E_i| + |E_j|`.
    Sum,
    Custom(CustomPenalty),
}

impl Penalty {
    /// Sandwich constants `(c1, c2)` with `c1 (|a|+|b|) <= u(a,b) <= c2 (|a|+|b|)`.
    pub fn constants(&self) -> (f64, f64) {
        match self {
            Penalty::Standard => (1.0, 2.0),
            Penalty::Sum => (1.0, 1.0),
            Penalty::Custom(c) => (c.c1, c.c2),
        }
    }

    #[inline]
    pub fn eval(&self, a: f64, b: f64) -> f64 {
        match self {
            Penalty::Standard => a.abs() + b.abs() + (a - b).abs(),
            Penalty::Sum => a.abs() + b.abs(),
            Penalty::Custom(c) => (c.f)(a, b),
        }
    }

    fn name(&self) -> Option<&'static str> {
        match self {
            Penalty::Standard => Some("standard"),
            Penalty::Sum => Some("sum"),
            Penalty::Custom(_) => None,
        }
    }
}

/// Parameters of the pair rates `exp(-|x_i - x_j|^alpha - beta u(E_i, E_j))`.
#[derive(Debug, Clone)]
pub struct RateModel {
    pub alpha: f64,
    pub beta: f64,
    pub u: Penalty,
    /// Nearest-neighbor truncation level; `f64::INFINITY` means none.
    pub kappa: f64,
}

impl RateModel {
    pub fn new(alpha: f64, beta: f64, u: Penalty, kappa: f64) -> Result<Self> {
        let m = Self { alpha, beta, u, kappa };
        m.validate()?;
        Ok(m)
    }

    /// Standard penalty, no truncation.
    pub fn standard(alpha: f64, beta: f64) -> Result<Self> {
        Self::new(alpha, beta, Penalty::Standard, f64::INFINITY)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha.is_finite() && self.alpha > 0.0) {
            return invalid(format!("alpha must be positive, got {}", self.alpha));
        }
        if !(self.beta.is_finite() && self.beta >= 0.0) {
            return invalid(format!("beta must be nonnegative, got {}", self.beta));
        }
        if !(self.kappa > 0.0) {
            return invalid(format!("kappa must be positive or infinite, got {}", self.kappa));
        }
        Ok(())
    }

    pub fn with_beta(&self, beta: f64) -> Self {
        Self { beta, ..self.clone() }
    }

    pub fn with_kappa(&self, kappa: f64) -> Self {
        Self { kappa, ..self.clone() }
    }

    #[inline]
    pub fn penalty(&self, ei: f64, ej: f64) -> f64 {
        self.u.eval(ei, ej)
    }

    /// Rate for a pair at distance `d` with marks `ei`, `ej`.
    #[inline]
    pub fn rate_at(&self, d: f64, ei: f64, ej: f64) -> f64 {
        if d == 0.0 {
            return 0.0;
        }
        (-d.abs().powf(self.alpha) - self.beta * self.penalty(ei, ej)).exp()
    }

    /// Truncated nearest-neighbor rate for a pair at distance `d`.
    #[inline]
    pub fn nn_rate_at(&self, d: f64, ei: f64, ej: f64) -> f64 {
        if d == 0.0 {
            return 0.0;
        }
        (-d.abs().powf(self.alpha).min(self.kappa) - self.beta * self.penalty(ei, ej)).exp()
    }
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum KappaDoc {
    Finite(f64),
    Named(String),
}

#[derive(Serialize, Deserialize)]
struct RateModelDoc {
    alpha: f64,
    #[serde(default)]
    beta: f64,
    #[serde(default = "default_u")]
    u: String,
    #[serde(default = "default_kappa")]
    kappa: KappaDoc,
}

fn default_u() -> String {
    "standard".into()
}

fn default_kappa() -> KappaDoc {
    KappaDoc::Named("inf".into())
}

impl Serialize for RateModel {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let u = self.u.name().ok_or_else(|| serde::ser::Error::custom("custom penalties are not serializable"))?;
        let kappa = if self.kappa.is_infinite() { KappaDoc::Named("inf".into()) } else { KappaDoc::Finite(self.kappa) };
        RateModelDoc { alpha: self.alpha, beta: self.beta, u: u.into(), kappa }.serialize(s)
    }
}

impl<'de> Deserialize<'de> for RateModel {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        use serde::de::Error;
        let doc = RateModelDoc::deserialize(d)?;
        let u = match doc.u.as_str() {
            "standard" => Penalty::Standard,
            "sum" => Penalty::Sum,
            other => return Err(D::Error::custom(format!("unknown penalty {other:?}"))),
        };
        let kappa = match doc.kappa {
            KappaDoc::Finite(k) => k,
            KappaDoc::Named(s) if s == "inf" => f64::INFINITY,
            KappaDoc::Named(s) => return Err(D::Error::custom(format!("bad kappa {s:?}"))),
        };
        RateModel::new(doc.alpha, doc.beta, u, kappa).map_err(D::Error::custom)
    }
}

fn check_energy(e: f64) -> Result<()> {
    if (-1.0..=1.0).contains(&e) {
        Ok(())
    } else {
        invalid(format!("energy {e} outside [-1, 1]"))
    }
}

/// `|E_i| + |E_j| + |E_i - E_j|`.
pub fn u_standard(ei: f64, ej: f64) -> Result<f64> {
    check_energy(ei)?;
    check_energy(ej)?;
    Ok(Penalty::Standard.eval(ei, ej))
}

/// Pair rate between two marked points; zero on the diagonal.
pub fn jump_rate(model: &RateModel, xi: f64, ei: f64, xj: f64, ej: f64) -> f64 {
    model.rate_at(xi - xj, ei, ej)
}

/// Truncated rate `exp(-(d^alpha ∧ kappa) - beta u)`.
pub fn nn_rate(model: &RateModel, xi: f64, ei: f64, xj: f64, ej: f64) -> f64 {
    model.nn_rate_at(xi - xj, ei, ej)
}

/// Outcome of [`validate_u`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct UValidation {
    pub pass: bool,
    pub worst_violation: f64,
    pub worst_at: (f64, f64),
    /// `"symmetry"`, `"lower"` or `"upper"` for the worst violation.
    pub worst_kind: &'static str,
}

/// Check symmetry and the sandwich `c1 (|a|+|b|) <= u(a,b) <= c2 (|a|+|b|)`
/// on a `grid x grid` lattice of `[-1, 1]^2`.
pub fn validate_u<F>(u: &F, c1: f64, c2: f64, grid: usize) -> Result<UValidation>
where
    F: Fn(f64, f64) -> f64 + ?Sized,
{
    if !(c1 > 0.0 && c1 <= c2) {
        return invalid(format!("need 0 < c1 <= c2, got ({c1}, {c2})"));
    }
    if grid < 2 {
        return invalid("grid must have at least 2 nodes");
    }
    const SLACK: f64 = 1e-12;
    let node = |k: usize| -1.0 + 2.0 * k as f64 / (grid - 1) as f64;
    let mut worst = (0.0, (0.0, 0.0), "none");
    for i in 0..grid {
        for j in 0..grid {
            let (a, b) = (node(i), node(j));
            let v = u(a, b);
            let s = a.abs() + b.abs();
            let candidates = [((v - u(b, a)).abs(), "symmetry"), (c1 * s - v, "lower"), (v - c2 * s, "upper")];
            for (viol, kind) in candidates {
                let viol = if viol.is_nan() { f64::INFINITY } else { viol };
                if viol > worst.0 {
                    worst = (viol, (a, b), kind);
                }
            }
        }
    }
    Ok(UValidation { pass: worst.0 <= SLACK, worst_violation: worst.0, worst_at: worst.1, worst_kind: worst.2 })
}

/// `e^{-R^alpha} + Gamma(1/alpha, R^alpha)/alpha`, bounding `sum_k e^{-(R+k)^alpha}`.
pub fn unit_tail(alpha: f64, r: f64) -> f64 {
    let ra = r.max(0.0).powf(alpha);
    let a = 1.0 / alpha;
    (-ra).exp() + gamma_ur(a, ra) * gamma(a) / alpha
}

/// Smallest radius `R` on a geometric grid with `2 S unit_tail(R) <= eps`.
pub fn truncation_radius(alpha: f64, s_bound: usize, eps: f64) -> (f64, f64) {
    let s = s_bound.max(1) as f64;
    let mut r = (s / eps).ln().max(1.0).powf(1.0 / alpha);
    loop {
        let tail = 2.0 * s * unit_tail(alpha, r);
        if tail <= eps {
            return (r, tail);
        }
        r *= 1.02;
    }
}

/// Rates out of one site, restricted to the points within the truncation radius.
#[derive(Debug, Clone, PartialEq)]
pub struct SiteRates {
    pub site: i64,
    /// Truncated total rate.
    pub total: f64,
    pub targets: Vec<i64>,
    pub rates: Vec<f64>,
    /// Normalized cumulative distribution over `targets`; the last entry is 1.
    pub cumulative: Vec<f64>,
    /// Analytic bound on the omitted rate mass.
    pub tail_bound: f64,
    pub radius: f64,
}

impl SiteRates {
    pub fn probabilities(&self) -> Vec<f64> {
        self.rates.iter().map(|r| r / self.total).collect()
    }

    /// Target for a uniform draw `v` in `[0, 1)`.
    #[inline]
    pub fn pick(&self, v: f64) -> i64 {
        let k = self.cumulative.partition_point(|&c| c <= v);
        self.targets[k.min(self.targets.len() - 1)]
    }
}

/// Total rate and jump distribution at `site`, truncated to tolerance `eps_trunc`.
///
/// The point-count bound `S` is the largest number of points the environment
/// puts in any closed unit interval.
pub fn total_rate_and_jump_dist(model: &RateModel, env: &Environment, site: i64, eps_trunc: f64) -> Result<SiteRates> {
    site_rates_with_bound(model, env, site, eps_trunc, env.max_unit_count())
}

/// As [`total_rate_and_jump_dist`] with an explicit point-count bound `s_bound`.
pub fn site_rates_with_bound(
    model: &RateModel,
    env: &Environment,
    site: i64,
    eps_trunc: f64,
    s_bound: usize,
) -> Result<SiteRates> {
    if !(eps_trunc > 0.0 && eps_trunc < 1.0) {
        return invalid(format!("eps_trunc must lie in (0,1), got {eps_trunc}"));
    }
    if !env.contains_index(site) {
        return invalid(format!("site {site} outside the environment"));
    }
    let (radius, _) = truncation_radius(model.alpha, s_bound, eps_trunc);
    site_rates_at_radius(model, env, site, radius, eps_trunc, s_bound)
}

pub(crate) fn site_rates_at_radius(
    model: &RateModel,
    env: &Environment,
    site: i64,
    radius: f64,
    eps_trunc: f64,
    s_bound: usize,
) -> Result<SiteRates> {
    let x0 = env.x(site);
    let e0 = env.e(site);
    let s = s_bound.max(1) as f64;
    let reach_left = radius.min(x0 - env.left_edge());
    let reach_right = radius.min(env.right_edge() - x0);
    let tail_bound = s * (unit_tail(model.alpha, reach_left) + unit_tail(model.alpha, reach_right));
    if tail_bound > eps_trunc {
        return Err(HopError::Truncation { site, tolerance: eps_trunc, bound: tail_bound });
    }
    let mut targets = Vec::new();
    let mut rates = Vec::new();
    let mut k = site - 1;
    while k >= env.min_index() && x0 - env.x(k) <= radius {
        k -= 1;
    }
    for j in (k + 1)..=env.max_index() {
        if j == site {
            continue;
        }
        let d = env.x(j) - x0;
        if d > radius {
            break;
        }
        targets.push(j);
        rates.push(model.rate_at(d, e0, env.e(j)));
    }
    if targets.is_empty() {
        return invalid(format!("site {site} has no neighbors within the window"));
    }
    let total: f64 = rates.iter().sum();
    let mut acc = 0.0;
    let mut cumulative: Vec<f64> = rates
        .iter()
        .map(|r| {
            acc += r;
            acc / total
        })
        .collect();
    *cumulative.last_mut().unwrap() = 1.0;
    Ok(SiteRates { site, total, targets, rates, cumulative, tail_bound, radius })
}
