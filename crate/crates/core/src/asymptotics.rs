//! Extreme-value sequences for maximal spacings, least-squares scaling fits
//! and closed-form exponent predictions.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, HopError, Result};
use crate::par;
use crate::pointproc::SpacingLaw;
use crate::seed;

/// Default exponent `p` in the `a`/`b` sequences.
pub const DEFAULT_P: f64 = 2.0;

/// Tail terms decaying faster than `1/(n (log n)^HEURISTIC_POWER)` count as converging.
pub const HEURISTIC_POWER: f64 = 1.05;

/// `a(t)`, `b(t)` and `alpha_t = inf{y : psi(y) <= 1/t}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExtremeSequences {
    /// `None` for laws without a catalogued form.
    pub a: Option<f64>,
    pub b: Option<f64>,
    pub alpha_t: f64,
}

fn exponential_forms(lambda: f64, p: f64, t: f64) -> (f64, f64) {
    let lt = t.ln();
    ((t.ln() + p * lt.ln()) / lambda, (t.ln() - (p * lt.ln()).ln()) / lambda)
}

pub fn extreme_sequences(law: SpacingLaw, p: f64, t: f64) -> Result<ExtremeSequences> {
    law.validate()?;
    if !(p > 0.0) || !p.is_finite() {
        return invalid(format!("p must be positive, got {p}"));
    }
    if !(t.is_finite() && t.ln().ln() > 0.0) {
        return invalid(format!("t = {t} too small: need log log t > 0"));
    }
    let out = match law {
        SpacingLaw::Deterministic { .. } => {
            return invalid("deterministic spacings: psi vanishes beyond the atom, alpha_t undefined")
        }
        SpacingLaw::Exponential { lambda } => {
            let (a, b) = exponential_forms(lambda, p, t);
            ExtremeSequences { a: Some(a), b: Some(b), alpha_t: t.ln() / lambda }
        }
        SpacingLaw::Geometric { p: q } => {
            let lambda = -(1.0 - q).ln();
            let (a, b) = exponential_forms(lambda, p, t);
            ExtremeSequences { a: Some(a), b: Some(b), alpha_t: lattice_ceil(t.ln() / lambda) }
        }
        SpacingLaw::Weibull { lambda, tau } => {
            let (a, b) = exponential_forms(lambda, p, t);
            let root = |v: f64| v.max(0.0).powf(1.0 / tau);
            ExtremeSequences { a: Some(root(a)), b: Some(root(b)), alpha_t: root(t.ln() / lambda) }
        }
        SpacingLaw::Pareto { r } => {
            let lt = t.ln();
            ExtremeSequences {
                a: Some(t.powf(1.0 / r) * lt.powf(p / r)),
                b: Some((t / (p * lt.ln())).powf(1.0 / r)),
                alpha_t: t.powf(1.0 / r),
            }
        }
        SpacingLaw::HalfGaussian { .. } => ExtremeSequences { a: None, b: None, alpha_t: inverse_tail(law, 1.0 / t)? },
    };
    if out.b.is_some_and(|b| !(b > 0.0)) {
        return invalid(format!("t = {t} too small: b(t) is not positive"));
    }
    Ok(out)
}

// ln t / lambda can land a rounding error above an integer
fn lattice_ceil(v: f64) -> f64 {
    let r = v.round();
    if (v - r).abs() <= 1e-12 * v.abs().max(1.0) {
        r
    } else {
        v.ceil()
    }
}

/// `inf{y : psi(y) <= level}` by bisection on the survival function.
pub fn inverse_tail(law: SpacingLaw, level: f64) -> Result<f64> {
    law.validate()?;
    if !(level > 0.0 && level < 1.0) {
        return invalid(format!("tail level must lie in (0,1), got {level}"));
    }
    if !law.unbounded() {
        return invalid("deterministic spacings have no tail to invert");
    }
    let mut lo = 0.0;
    let mut hi = law.mean().max(1.0);
    while law.tail(hi) > level {
        lo = hi;
        hi *= 2.0;
        if !hi.is_finite() {
            return Err(HopError::NonConvergence { method: "tail bracketing", iterations: 0, residual: level });
        }
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if law.tail(mid) <= level {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(hi)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SeriesVerdict {
    Converging,
    Diverging,
}

/// Partial sums of the two series and a tail-decay heuristic.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeriesCheck {
    pub n_max: usize,
    /// Partial sum of `psi(a(n))` over `3 <= n <= n_max`.
    pub sum_a: f64,
    /// Partial sum of `psi(b(n)) exp(-n psi(b(n)))`.
    pub sum_b: f64,
    /// `n (log n)^1.05` times the term, at `n_max / 10` and at `n_max`.
    pub scaled_a: (f64, f64),
    pub scaled_b: (f64, f64),
    pub verdict_a: SeriesVerdict,
    pub verdict_b: SeriesVerdict,
    /// Always true: finite sums only indicate convergence.
    pub heuristic: bool,
}

/// Finite check of `sum psi(a(n)) < inf` and `sum psi(b(n)) e^{-n psi(b(n))} < inf`.
///
/// A series is reported converging when its scaled term is smaller at
/// `n_max` than at `n_max / 10`.
pub fn series_conditions_check(law: SpacingLaw, p: f64, n_max: usize) -> Result<SeriesCheck> {
    if n_max < 100 {
        return invalid(format!("n_max must be at least 100, got {n_max}"));
    }
    let cat = extreme_sequences(law, p, 100.0)?.a.is_some();
    let terms = |n: usize| -> Result<(f64, f64)> {
        let t = n as f64;
        let (a, b) = if cat {
            let s = extreme_sequences(law, p, t)?;
            (s.a.unwrap_or(f64::NAN), s.b.unwrap_or(f64::NAN))
        } else {
            let lt = t.ln();
            (inverse_tail(law, 1.0 / (t * lt.powf(p)))?, inverse_tail(law, (p * lt.ln() / t).min(0.5))?)
        };
        let pb = law.tail(b);
        Ok((law.tail(a), pb * (-t * pb).exp()))
    };
    let mut sum_a = 0.0;
    let mut sum_b = 0.0;
    for n in 3..=n_max {
        let (ta, tb) = terms(n)?;
        sum_a += ta;
        sum_b += tb;
    }
    let scale = |n: usize| {
        let t = n as f64;
        t * t.ln().powf(HEURISTIC_POWER)
    };
    let early = (n_max / 10).max(3);
    let (ea, eb) = terms(early)?;
    let (la, lb) = terms(n_max)?;
    let scaled_a = (ea * scale(early), la * scale(n_max));
    let scaled_b = (eb * scale(early), lb * scale(n_max));
    let verdict = |s: (f64, f64)| {
        if s.1 < s.0 {
            SeriesVerdict::Converging
        } else {
            SeriesVerdict::Diverging
        }
    };
    Ok(SeriesCheck {
        n_max,
        sum_a,
        sum_b,
        scaled_a,
        scaled_b,
        verdict_a: verdict(scaled_a),
        verdict_b: verdict(scaled_b),
        heuristic: true,
    })
}

/// `M_n / alpha_n` for `replicas` independent samples of `n` spacings.
pub fn empirical_max_ratio(law: SpacingLaw, n: usize, replicas: usize, seed: u64) -> Result<Vec<f64>> {
    law.validate()?;
    if !law.unbounded() {
        return invalid("maximal spacing ratio needs a law with unbounded support");
    }
    if n < 1000 {
        return invalid(format!("n must be at least 1000, got {n}"));
    }
    let alpha_n = extreme_sequences(law, DEFAULT_P, n as f64)?.alpha_t;
    Ok(par::map_indexed(replicas, |i| {
        let mut rng = seed::stream(seed, &format!("max-ratio-{i}"));
        let m = (0..n).map(|_| law.sample(&mut rng)).fold(0.0, f64::max);
        m / alpha_n
    }))
}

/// Ordinary least-squares line through `(x, y)` pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingFit {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
}

impl ScalingFit {
    pub const CSV_HEADER: &'static str = "experiment,slope,intercept,r2,n_points";

    pub fn n_points(&self) -> usize {
        self.x.len()
    }

    pub fn csv_row(&self, experiment: &str) -> String {
        let mut s = String::new();
        let _ = write!(
            s,
            "\"{}\",{:.16e},{:.16e},{:.16e},{}",
            experiment,
            self.slope,
            self.intercept,
            self.r2,
            self.n_points()
        );
        s
    }
}

pub fn scaling_fit(pairs: &[(f64, f64)]) -> Result<ScalingFit> {
    if pairs.len() < 3 {
        return Err(HopError::TooFewPoints { needed: 3, got: pairs.len() });
    }
    if pairs.iter().any(|(x, y)| !x.is_finite() || !y.is_finite()) {
        return invalid("fit data must be finite");
    }
    let mut xs: Vec<f64> = pairs.iter().map(|p| p.0).collect();
    xs.sort_by(f64::total_cmp);
    if xs.windows(2).any(|w| w[0] == w[1]) {
        return invalid("fit x values must be distinct");
    }
    let n = pairs.len() as f64;
    let mx = pairs.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pairs.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pairs.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pairs.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let syy: f64 = pairs.iter().map(|p| (p.1 - my).powi(2)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let sse: f64 = pairs.iter().map(|p| (p.1 - intercept - slope * p.0).powi(2)).sum();
    let r2 = if syy == 0.0 { 1.0 } else { (1.0 - sse / syy).clamp(0.0, 1.0) };
    Ok(ScalingFit {
        x: pairs.iter().map(|p| p.0).collect(),
        y: pairs.iter().map(|p| p.1).collect(),
        slope,
        intercept,
        r2,
    })
}

/// Fit of `log y` against `log x`.
pub fn log_log_fit(pairs: &[(f64, f64)]) -> Result<ScalingFit> {
    if pairs.iter().any(|(x, y)| !(*x > 0.0) || !(*y > 0.0)) {
        return invalid("log-log fit needs positive data");
    }
    let logs: Vec<(f64, f64)> = pairs.iter().map(|(x, y)| (x.ln(), y.ln())).collect();
    scaling_fit(&logs)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PredictedExponents {
    /// `delta alpha / (1 - alpha + delta alpha)`, the power of `beta` in the stretched regime.
    pub stretched: f64,
    /// `-1 - 1/lambda`.
    pub cheeger: f64,
    /// `-2` when `lambda > 1`, otherwise the Cheeger exponent.
    pub gap: f64,
}

pub fn predicted_exponents(alpha: f64, delta: f64, lambda: f64) -> Result<PredictedExponents> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return invalid(format!("stretched exponent needs alpha in (0,1], got {alpha}"));
    }
    if !(delta > 0.0) || !(lambda > 0.0) || !delta.is_finite() || !lambda.is_finite() {
        return invalid("delta and lambda must be positive");
    }
    let cheeger = -1.0 - 1.0 / lambda;
    Ok(PredictedExponents {
        stretched: delta * alpha / (1.0 - alpha + delta * alpha),
        cheeger,
        gap: if lambda > 1.0 { -2.0 } else { cheeger },
    })
}

/// Critical `alpha_c = tau` for Weibull spacings.
pub fn weibull_critical_alpha(tau: f64) -> Result<f64> {
    if tau > 0.0 && tau.is_finite() {
        Ok(tau)
    } else {
        invalid(format!("tau must be positive, got {tau}"))
    }
}
