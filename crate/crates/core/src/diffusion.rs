//! Diffusion coefficients: explicit nearest-neighbor formula, finite-volume
//! variational solves on a circle, and the thinning, certificate and
//! test-function bounds.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, HopError, Result};
use crate::linalg::{pcg, CsrMatrix};
use crate::pointproc::{
    build_environment_counts, build_environment_for, thin_environment, EnergyLaw, Environment, SpacingLaw,
    SpacingSource, ThinnedSpacingSampler,
};
use crate::rates::{Penalty, RateModel};
use crate::{par, seed, stats};

/// Default relative residual of the corrector solve.
pub const DEFAULT_SOLVER_TOL: f64 = 1e-10;

/// Growth factor across two doublings that flags a divergent running mean.
pub const DIVERGENCE_GROWTH: f64 = 1.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    VariationalFull,
    VariationalNn,
    NnAnalytic,
    Msd,
    UpperTestFunction,
    LowerThinning,
}

impl Method {
    pub fn tag(&self) -> &'static str {
        match self {
            Method::VariationalFull => "variational_full",
            Method::VariationalNn => "variational_nn",
            Method::NnAnalytic => "nn_analytic",
            Method::Msd => "msd",
            Method::UpperTestFunction => "upper_test_function",
            Method::LowerThinning => "lower_thinning",
        }
    }
}

/// Edges kept in the finite-volume problem.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EdgeSet {
    Full,
    NnOnly,
}

/// A diffusion coefficient estimate with its provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffusionEstimate {
    pub method: Method,
    pub value: f64,
    pub stderr: f64,
    pub values: Vec<f64>,
    pub n: usize,
    pub alpha: f64,
    pub beta: f64,
    pub delta: Option<f64>,
    pub law: String,
    pub seed: u64,
}

impl DiffusionEstimate {
    pub const CSV_HEADER: &'static str = "method,alpha,beta,delta,law,N,samples,value,stderr,seed";

    pub fn samples(&self) -> usize {
        self.values.len().max(1)
    }

    pub fn csv_row(&self) -> String {
        let mut s = String::new();
        let delta = self.delta.map_or(String::new(), |d| format!("{d:.16e}"));
        let _ = write!(
            s,
            "{},{:.16e},{:.16e},{},\"{}\",{},{},{:.16e},{:.16e},{}",
            self.method.tag(),
            self.alpha,
            self.beta,
            delta,
            self.law,
            self.n,
            self.samples(),
            self.value,
            self.stderr,
            self.seed
        );
        s
    }
}

fn delta_of(energy: EnergyLaw) -> Option<f64> {
    match energy {
        EnergyLaw::PowerLaw { delta } => Some(delta),
        _ => None,
    }
}

/// `sum_n c^n/n! * k/(n+k)`, which equals `int_0^1 e^{c m} k m^{k-1} dm`.
fn power_law_mgf(c: f64, k: f64) -> f64 {
    let mut term = 1.0;
    let mut sum = 0.0;
    for n in 0..10_000 {
        let add = term * k / (n as f64 + k);
        sum += add;
        if n as f64 > c && add < 1e-17 * sum {
            break;
        }
        term *= c / (n as f64 + 1.0);
    }
    sum
}

/// Closed form of `E[exp(beta u(E_0, E_1))]` for independent marks, when known.
pub fn energy_factor(energy: EnergyLaw, u: &Penalty, beta: f64) -> Option<f64> {
    if beta == 0.0 {
        return Some(1.0);
    }
    match (energy, u) {
        (EnergyLaw::PointMassZero, Penalty::Standard | Penalty::Sum) => Some(1.0),
        (EnergyLaw::TwoPoint { epsilon }, Penalty::Standard) => {
            Some(0.5 * (2.0 * epsilon * beta).exp() + 0.5 * (4.0 * epsilon * beta).exp())
        }
        (EnergyLaw::TwoPoint { epsilon }, Penalty::Sum) => Some((2.0 * epsilon * beta).exp()),
        // same signs give u = 2 max(|E_0|, |E_1|), opposite signs 2(|E_0| + |E_1|)
        (EnergyLaw::PowerLaw { delta }, Penalty::Standard) => {
            let same = power_law_mgf(2.0 * beta, 2.0 * delta);
            let opposite = power_law_mgf(2.0 * beta, delta).powi(2);
            Some(0.5 * (same + opposite))
        }
        (EnergyLaw::PowerLaw { delta }, Penalty::Sum) => Some(power_law_mgf(beta, delta).powi(2)),
        _ => None,
    }
}

/// Outcome of [`nn_diffusion_analytic`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NnAnalytic {
    pub estimate: DiffusionEstimate,
    /// `E[1/r]`, infinite when divergent.
    pub inverse_rate_mean: f64,
    pub divergent: bool,
    /// Both factors of `E[1/r]` were evaluated in closed form.
    pub closed_form: bool,
    /// Running means of the spacing factor at `samples/8 * {1,2,4,8}` when sampled.
    pub running_means: Vec<f64>,
}

fn divergent_growth(means: &[f64]) -> bool {
    means.windows(3).any(|w| w[2] >= DIVERGENCE_GROWTH * w[0])
}

fn doubling_checkpoints(samples: usize) -> Vec<usize> {
    let s = (samples / 8).max(1);
    vec![s, 2 * s, 4 * s, 8 * s]
}

/// `D_kappa = 2 E[Z]^2 / E[1/r^(kappa)]`.
///
/// `E[1/r]` factors into a spacing term `E[exp(min(Z^alpha, kappa))]` and an
/// energy term `E[exp(beta u)]`. Each is taken in closed form when available
/// and sampled with `samples` draws otherwise.
pub fn nn_diffusion_analytic(
    spacing: SpacingLaw,
    energy: EnergyLaw,
    model: &RateModel,
    samples: usize,
    seed: u64,
) -> Result<NnAnalytic> {
    spacing.validate()?;
    energy.validate()?;
    model.validate()?;
    if samples == 0 {
        return invalid("need at least one sample");
    }
    let (alpha, kappa) = (model.alpha, model.kappa);
    let mu = spacing.mean();
    let mut running_means = Vec::new();
    let mut var_parts = 0.0;
    let mut closed_form = true;
    let mut divergent = false;

    let z_factor = match spacing.exp_moment(alpha, kappa) {
        Some(v) => {
            divergent |= v.is_infinite();
            v
        }
        None => {
            closed_form = false;
            let mut rng = seed::stream(seed, "nn-spacing-factor");
            let draws: Vec<f64> = (0..samples).map(|_| spacing.sample(&mut rng).powf(alpha).min(kappa).exp()).collect();
            running_means = stats::running_means(&draws, &doubling_checkpoints(samples));
            divergent |= divergent_growth(&running_means);
            let (m, se) = stats::mean_stderr(&draws);
            var_parts += (se / m).powi(2);
            m
        }
    };
    let e_factor = match energy_factor(energy, &model.u, model.beta) {
        Some(v) => v,
        None => {
            closed_form = false;
            let mut rng = seed::stream(seed, "nn-energy-factor");
            let draws: Vec<f64> = (0..samples)
                .map(|_| {
                    let a = energy.sample(&mut rng);
                    let b = energy.sample(&mut rng);
                    (model.beta * model.penalty(a, b)).exp()
                })
                .collect();
            let (m, se) = stats::mean_stderr(&draws);
            var_parts += (se / m).powi(2);
            m
        }
    };
    let inv = z_factor * e_factor;
    let (value, stderr, inverse_rate_mean) = if divergent || !inv.is_finite() {
        divergent = true;
        (0.0, 0.0, f64::INFINITY)
    } else {
        let v = 2.0 * mu * mu / inv;
        (v, v * var_parts.sqrt(), inv)
    };
    Ok(NnAnalytic {
        estimate: DiffusionEstimate {
            method: Method::NnAnalytic,
            value,
            stderr,
            values: vec![value],
            n: samples,
            alpha,
            beta: model.beta,
            delta: delta_of(energy),
            law: spacing.label(),
            seed,
        },
        inverse_rate_mean,
        divergent,
        closed_form,
        running_means,
    })
}

/// Nearest-neighbor corrector `chi(x_n)` for all stored indices, in index order.
///
/// `C = E[Z]/E[1/r]` is computed as in [`nn_diffusion_analytic`] with a
/// fixed number of Monte Carlo draws where no closed form exists.
pub fn nn_corrector(env: &Environment, model: &RateModel) -> Result<Vec<f64>> {
    let spacing = match env.spacing() {
        SpacingSource::Law(l) => l,
        SpacingSource::Thinned(_) => return invalid("nearest-neighbor corrector needs an unthinned spacing law"),
    };
    let nn = nn_diffusion_analytic(spacing, env.energy_law(), model, 1 << 20, env.seed())?;
    if nn.divergent {
        return Err(HopError::Divergent("E[1/r] is infinite".into()));
    }
    let c = spacing.mean() / nn.inverse_rate_mean;
    Ok(nn_corrector_with_constant(env, model, c))
}

/// Corrector with an explicit constant `C`.
pub fn nn_corrector_with_constant(env: &Environment, model: &RateModel, c: f64) -> Vec<f64> {
    let incr = |k: i64| {
        let z = env.x(k + 1) - env.x(k);
        c / model.nn_rate_at(z, env.e(k), env.e(k + 1)) - z
    };
    let mut chi = vec![0.0; env.len()];
    let o = env.origin_slot();
    for k in 0..env.max_index() {
        chi[o + k as usize + 1] = chi[o + k as usize] + incr(k);
    }
    for k in (env.min_index()..0).rev() {
        let s = env.slot(k);
        chi[s] = chi[s + 1] - incr(k);
    }
    chi
}

/// Largest `|L_kappa (x + chi)|` over interior points, relative to `C`.
pub fn nn_harmonicity_residual(env: &Environment, model: &RateModel, chi: &[f64]) -> f64 {
    let phi = |k: i64| env.x(k) + chi[env.slot(k)];
    let mut worst: f64 = 0.0;
    let mut scale: f64 = 0.0;
    for k in (env.min_index() + 1)..env.max_index() {
        let rr = model.nn_rate_at(env.x(k + 1) - env.x(k), env.e(k), env.e(k + 1));
        let rl = model.nn_rate_at(env.x(k) - env.x(k - 1), env.e(k), env.e(k - 1));
        let (up, down) = (rr * (phi(k + 1) - phi(k)), rl * (phi(k - 1) - phi(k)));
        worst = worst.max((up + down).abs());
        scale = scale.max(up.abs());
    }
    if scale > 0.0 {
        worst / scale
    } else {
        worst
    }
}

/// A periodized conductance network on `n` points of a circle.
#[derive(Debug, Clone, PartialEq)]
pub struct FiniteVolumeProblem {
    pub n: usize,
    pub circumference: f64,
    pub positions: Vec<f64>,
    pub energies: Vec<f64>,
    /// Retained pairs `(i, j, c_ij, d_ij)` with `i < j`; `d_ji = -d_ij`.
    pub pairs: Vec<(usize, usize, f64, f64)>,
    /// Total rate of the omitted pairs.
    pub omitted_mass: f64,
    /// Declared bound on the omitted mass: omitted pair count times `eps/N^2`.
    pub omission_bound: f64,
}

impl FiniteVolumeProblem {
    /// Minimal-image signed displacement from `i` to `j`.
    pub fn displacement(&self, i: usize, j: usize) -> f64 {
        let raw = self.positions[j] - self.positions[i];
        let half = 0.5 * self.circumference;
        if raw > half {
            raw - self.circumference
        } else if raw < -half {
            raw + self.circumference
        } else {
            raw
        }
    }

    /// Per-node lists `(neighbor, c, d)`.
    pub fn adjacency(&self) -> Vec<Vec<(usize, f64, f64)>> {
        let mut adj = vec![Vec::new(); self.n];
        for &(i, j, c, d) in &self.pairs {
            adj[i].push((j, c, d));
            adj[j].push((i, c, -d));
        }
        adj
    }

    /// `(1/N) sum_{i != j} c_ij (d_ij + g_j - g_i)^2`.
    pub fn objective(&self, g: &[f64]) -> f64 {
        let s: f64 = self.pairs.iter().map(|&(i, j, c, d)| c * (d + g[j] - g[i]).powi(2)).sum();
        2.0 * s / self.n as f64
    }

    pub fn is_connected(&self) -> bool {
        let adj = self.adjacency();
        let mut seen = vec![false; self.n];
        let mut stack = vec![0];
        seen[0] = true;
        while let Some(i) = stack.pop() {
            for &(j, _, _) in &adj[i] {
                if !seen[j] {
                    seen[j] = true;
                    stack.push(j);
                }
            }
        }
        seen.iter().all(|&s| s)
    }
}

/// Periodize the points `x_0..x_{N-1}` on a circle of circumference `x_N - x_0`.
pub fn build_finite_volume(
    env: &Environment,
    model: &RateModel,
    n: usize,
    eps_trunc: f64,
    edges: EdgeSet,
) -> Result<FiniteVolumeProblem> {
    model.validate()?;
    if n < 3 {
        return Err(HopError::TooFewPoints { needed: 3, got: n });
    }
    if env.max_index() < n as i64 {
        return Err(HopError::TooFewPoints { needed: n + 1, got: env.max_index().max(0) as usize + 1 });
    }
    if !(eps_trunc > 0.0 && eps_trunc < 1.0) {
        return invalid(format!("eps_trunc must lie in (0,1), got {eps_trunc}"));
    }
    let x0 = env.x(0);
    let positions: Vec<f64> = (0..n as i64).map(|k| env.x(k) - x0).collect();
    let energies: Vec<f64> = (0..n as i64).map(|k| env.e(k)).collect();
    let mut p = FiniteVolumeProblem {
        n,
        circumference: env.x(n as i64) - x0,
        positions,
        energies,
        pairs: Vec::new(),
        omitted_mass: 0.0,
        omission_bound: 0.0,
    };
    let threshold = eps_trunc / (n * n) as f64;
    let mut omitted = 0usize;
    let consider = |i: usize, j: usize, p: &mut FiniteVolumeProblem, omitted: &mut usize| {
        let d = p.displacement(i, j);
        let (ei, ej) = (p.energies[i], p.energies[j]);
        let c = match edges {
            EdgeSet::Full => model.rate_at(d, ei, ej),
            EdgeSet::NnOnly => model.nn_rate_at(d, ei, ej),
        };
        if c >= threshold {
            p.pairs.push((i, j, c, d));
        } else {
            p.omitted_mass += c;
            *omitted += 1;
        }
    };
    match edges {
        EdgeSet::Full => {
            let cutoff = (1.0 / threshold).ln().powf(1.0 / model.alpha);
            for i in 0..n {
                for j in (i + 1)..n {
                    if p.displacement(i, j).abs() > cutoff {
                        omitted += 1;
                        continue;
                    }
                    consider(i, j, &mut p, &mut omitted);
                }
            }
        }
        EdgeSet::NnOnly => {
            for i in 0..n - 1 {
                consider(i, i + 1, &mut p, &mut omitted);
            }
            consider(0, n - 1, &mut p, &mut omitted);
        }
    }
    p.omission_bound = omitted as f64 * threshold;
    Ok(p)
}

/// Minimizing potential of a finite-volume problem.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrectorSolution {
    /// One value per point, `g[0] = 0`.
    pub g: Vec<f64>,
    pub d_n: f64,
    /// `||b - L g|| / ||b||` of the full Laplacian system, or relative to
    /// the size of the terms of `b` when `b` vanishes up to rounding.
    pub residual: f64,
    pub iterations: usize,
}

/// Solve `L g = b`, `b_k = sum_j c_kj d_kj`, with `g_0 = 0`, by Jacobi-preconditioned CG.
pub fn solve_corrector(problem: &FiniteVolumeProblem, tol: f64) -> Result<CorrectorSolution> {
    if !(tol > 0.0) {
        return invalid("solver tolerance must be positive");
    }
    if !problem.is_connected() {
        return Err(HopError::Disconnected);
    }
    let n = problem.n;
    let adj = problem.adjacency();
    let b: Vec<f64> = adj.iter().map(|row| row.iter().map(|&(_, c, d)| c * d).sum()).collect();
    // pinned system on nodes 1..n
    let rows: Vec<Vec<(usize, f64)>> = (1..n)
        .map(|i| {
            let mut row = vec![(i - 1, adj[i].iter().map(|e| e.1).sum::<f64>())];
            row.extend(adj[i].iter().filter(|e| e.0 != 0).map(|&(j, c, _)| (j - 1, -c)));
            row
        })
        .collect();
    let a = CsrMatrix::from_rows(rows);
    let bnorm = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    let scale = adj.iter().map(|row| row.iter().map(|&(_, c, d)| c * d.abs()).sum::<f64>().powi(2)).sum::<f64>().sqrt();
    // a right-hand side at rounding level of its own terms is zero
    let negligible = bnorm <= 1e-13 * scale;
    let (g, iterations) = if negligible {
        (vec![0.0; n], 0)
    } else {
        // sum(b) = 0, so the dropped row's residual is minus the sum of the
        // others; it can carry up to sqrt(n) times their norm
        let s = pcg(&a, &b[1..], tol * 0.5 / (n as f64).sqrt(), 50 * n + 1000)?;
        let mut g = Vec::with_capacity(n);
        g.push(0.0);
        g.extend(s.x);
        (g, s.iterations)
    };
    let mut res = 0.0;
    for (k, row) in adj.iter().enumerate() {
        let lg: f64 = row.iter().map(|&(j, c, _)| c * (g[k] - g[j])).sum();
        res += (b[k] - lg).powi(2);
    }
    let residual = if negligible { res.sqrt() / scale.max(f64::MIN_POSITIVE) } else { res.sqrt() / bnorm };
    if residual > tol {
        return Err(HopError::NonConvergence { method: "corrector solve", iterations, residual });
    }
    Ok(CorrectorSolution { d_n: problem.objective(&g), g, residual, iterations })
}

/// Closed-form minimum for a nearest-neighbor ring: `(2/N) l^2 / sum 1/r`.
pub fn nn_ring_value(problem: &FiniteVolumeProblem) -> f64 {
    let inv: f64 = problem.pairs.iter().map(|p| 1.0 / p.2).sum();
    let span: f64 = problem.pairs.iter().map(|&(i, j, _, d)| if j == i + 1 { d } else { -d }).sum();
    2.0 * span * span / (problem.n as f64 * inv)
}

/// Per-environment values of the finite-volume objective.
pub fn variational_values(
    spacing: impl Into<SpacingSource>,
    energy: EnergyLaw,
    model: &RateModel,
    n: usize,
    env_samples: usize,
    edges: EdgeSet,
    eps_trunc: f64,
    seed: u64,
) -> Result<Vec<f64>> {
    let spacing = spacing.into();
    par::try_map_indexed(env_samples, |k| {
        let env = build_environment_counts(spacing, energy, 0, n, seed::derive_seed(seed, &format!("fv-env-{k}")))?;
        let p = build_finite_volume(&env, model, n, eps_trunc, edges)?;
        solve_corrector(&p, DEFAULT_SOLVER_TOL).map(|s| s.d_n)
    })
}

/// Mean of the finite-volume objective over independent periodized environments.
///
/// Sample `k` uses the environment seed derived from `(seed, "fv-env-k")`, so
/// calls differing only in `edges` or `beta` see identical environments.
pub fn variational_diffusion_estimate(
    spacing: impl Into<SpacingSource>,
    energy: EnergyLaw,
    model: &RateModel,
    n: usize,
    env_samples: usize,
    edges: EdgeSet,
    seed: u64,
) -> Result<DiffusionEstimate> {
    variational_diffusion_estimate_eps(
        spacing,
        energy,
        model,
        n,
        env_samples,
        edges,
        crate::pointproc::DEFAULT_EPS_TRUNC,
        seed,
    )
}

/// [`variational_diffusion_estimate`] with an explicit pair omission tolerance.
pub fn variational_diffusion_estimate_eps(
    spacing: impl Into<SpacingSource>,
    energy: EnergyLaw,
    model: &RateModel,
    n: usize,
    env_samples: usize,
    edges: EdgeSet,
    eps_trunc: f64,
    seed: u64,
) -> Result<DiffusionEstimate> {
    if env_samples < 2 {
        return invalid(format!("need at least 2 environment samples, got {env_samples}"));
    }
    let spacing = spacing.into();
    let values = variational_values(spacing, energy, model, n, env_samples, edges, eps_trunc, seed)?;
    let (value, stderr) = stats::mean_stderr(&values);
    Ok(DiffusionEstimate {
        method: match edges {
            EdgeSet::Full => Method::VariationalFull,
            EdgeSet::NnOnly => Method::VariationalNn,
        },
        value,
        stderr,
        values,
        n,
        alpha: model.alpha,
        beta: model.beta,
        delta: delta_of(energy),
        law: spacing.label(),
        seed,
    })
}

/// `E_*(beta) = beta^{-(1-alpha)/(1-alpha+delta alpha)}`, capped at 1.
pub fn estar_schedule(alpha: f64, delta: f64, beta: f64) -> f64 {
    if beta <= 1.0 {
        return 1.0;
    }
    beta.powf(-(1.0 - alpha) / (1.0 - alpha + delta * alpha)).min(1.0)
}

/// Outcome of [`thinning_lower_bound`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThinningBound {
    /// `nu_* e^{-2 c2 beta E_*} D*`.
    pub estimate: DiffusionEstimate,
    pub nu_star: f64,
    pub e_star: f64,
    /// Variational estimate of `D*` at `beta = 0` on the thinned process.
    pub d_star: DiffusionEstimate,
    /// `2 E[Z*]^2 / E[exp((Z*)^alpha)]`.
    pub nn_floor: f64,
    /// Sample mean and standard error of `exp((Z*)^alpha)`.
    pub thinned_exp_moment: (f64, f64),
}

/// Lower bound on `D(beta)` by thinning to marks with `|E| <= E_*`.
#[allow(clippy::too_many_arguments)]
pub fn thinning_lower_bound(
    spacing: SpacingLaw,
    energy: EnergyLaw,
    model: &RateModel,
    e_star: f64,
    n: usize,
    env_samples: usize,
    moment_samples: usize,
    seed: u64,
) -> Result<ThinningBound> {
    if model.alpha >= 1.0 {
        return invalid(format!("thinning bound needs alpha < 1, got {}", model.alpha));
    }
    if !(e_star > 0.0 && e_star <= 1.0) {
        return invalid(format!("E_* must lie in (0,1], got {e_star}"));
    }
    let nu = energy.mass_within(e_star);
    let sampler = ThinnedSpacingSampler::new(spacing, nu)?;
    let d_star = variational_diffusion_estimate(
        sampler,
        EnergyLaw::PointMassZero,
        &model.with_beta(0.0),
        n,
        env_samples,
        EdgeSet::Full,
        seed::derive_seed(seed, "thinned-variational"),
    )?;
    let (_, c2) = model.u.constants();
    let factor = nu * (-2.0 * c2 * model.beta * e_star).exp();
    let draws = crate::pointproc::sample_thinned_spacing(
        sampler,
        moment_samples.max(1),
        seed::derive_seed(seed, "thinned-moment"),
    )?;
    let moments: Vec<f64> = draws.iter().map(|z| z.powf(model.alpha).exp()).collect();
    let thinned_exp_moment = stats::mean_stderr(&moments);
    let nn_floor = 2.0 * sampler.mean().powi(2) / thinned_exp_moment.0;
    let values: Vec<f64> = d_star.values.iter().map(|v| factor * v).collect();
    Ok(ThinningBound {
        estimate: DiffusionEstimate {
            method: Method::LowerThinning,
            value: factor * d_star.value,
            stderr: factor * d_star.stderr,
            values,
            n,
            alpha: model.alpha,
            beta: model.beta,
            delta: delta_of(energy),
            law: spacing.label(),
            seed,
        },
        nu_star: nu,
        e_star,
        d_star,
        nn_floor,
        thinned_exp_moment,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    /// Running means grew by at least [`DIVERGENCE_GROWTH`] across two doublings.
    Divergent,
    /// Every doubling ratio within 10% of one.
    Stable,
    Inconclusive,
}

/// Running means of `1/C_1` and the resulting heuristic verdict.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Certificate {
    pub checkpoints: Vec<usize>,
    pub running_means: Vec<f64>,
    /// Ratios of consecutive running means.
    pub ratios: Vec<f64>,
    pub verdict: Verdict,
    /// Largest share of `C_1` carried by the outermost row and column (`n = M` or `m = M`).
    pub boundary_fraction: f64,
    pub inverse_values: Vec<f64>,
}

/// `C_1 = sum_{n,m=0}^{M} (1+n+m) phi(Z_0 + sum_1^n Z_l + sum_1^m Z_{-l})`
/// with `phi(x) = exp(-|x|^alpha)`, from the spacings `z0`, `right[0..M]`, `left[0..M]`.
pub fn c1_value(alpha: f64, z0: f64, right: &[f64], left: &[f64]) -> (f64, f64) {
    let m_max = right.len().min(left.len());
    let mut pr = Vec::with_capacity(m_max + 1);
    let mut pl = Vec::with_capacity(m_max + 1);
    pr.push(0.0);
    pl.push(0.0);
    for k in 0..m_max {
        pr.push(pr[k] + right[k]);
        pl.push(pl[k] + left[k]);
    }
    let mut total = 0.0;
    let mut boundary = 0.0;
    for n in 0..=m_max {
        for m in 0..=m_max {
            let t = (1 + n + m) as f64 * (-(z0 + pr[n] + pl[m]).powf(alpha)).exp();
            total += t;
            if n == m_max || m == m_max {
                boundary += t;
            }
        }
    }
    (total, boundary)
}

/// Monte Carlo diagnostic for `E[1/C_1] = infinity`.
pub fn subdiffusivity_certificate(
    spacing: SpacingLaw,
    alpha: f64,
    order: usize,
    samples: usize,
    seed: u64,
) -> Result<Certificate> {
    spacing.validate()?;
    if order < 1 || samples < 2 {
        return invalid("certificate needs M >= 1 and at least 2 samples");
    }
    if !(alpha > 0.0) {
        return invalid("alpha must be positive");
    }
    let out = par::map_indexed(samples, |i| {
        let mut rng = seed::stream(seed, &format!("certificate-{i}"));
        let z0 = spacing.sample(&mut rng);
        let right: Vec<f64> = (0..order).map(|_| spacing.sample(&mut rng)).collect();
        let left: Vec<f64> = (0..order).map(|_| spacing.sample(&mut rng)).collect();
        let (c1, boundary) = c1_value(alpha, z0, &right, &left);
        (1.0 / c1, boundary / c1)
    });
    let inverse_values: Vec<f64> = out.iter().map(|o| o.0).collect();
    let boundary_fraction = out.iter().map(|o| o.1).fold(0.0, f64::max);
    let checkpoints = doubling_checkpoints(samples);
    let running_means = stats::running_means(&inverse_values, &checkpoints);
    let ratios: Vec<f64> = running_means.windows(2).map(|w| w[1] / w[0]).collect();
    let verdict = if divergent_growth(&running_means) {
        Verdict::Divergent
    } else if ratios.iter().all(|r| (r - 1.0).abs() <= 0.1) {
        Verdict::Stable
    } else {
        Verdict::Inconclusive
    };
    Ok(Certificate { checkpoints, running_means, ratios, verdict, boundary_fraction, inverse_values })
}

/// Cutoff `c(n)`: `a log n` for `alpha >= 1`, `(a log n)^{1/alpha}` otherwise.
pub fn test_function_cutoff(alpha: f64, a: f64, n: f64) -> f64 {
    let base = a * n.ln();
    if alpha >= 1.0 {
        base
    } else {
        base.powf(1.0 / alpha)
    }
}

/// `g` at every point of `env`: for the sequence starting at `x_j` and
/// continuing with the thinned points to its right, the left end of the first
/// gap of length at least `cutoff`, relative to `x_j` and capped at `n`.
///
/// Points whose forward scan runs off the window get `n`, which is exact when
/// the window reaches `x_j + n`.
pub fn test_function_values(env: &Environment, e_star: f64, cutoff: f64, n: f64) -> Vec<f64> {
    let thinned: Vec<f64> =
        (env.min_index()..=env.max_index()).filter(|&k| env.e(k).abs() <= e_star).map(|k| env.x(k)).collect();
    let t = thinned.len();
    // stop[k]: left end of the first big gap at or after thinned point k
    let mut stop = vec![f64::INFINITY; t];
    for k in (0..t.saturating_sub(1)).rev() {
        stop[k] = if thinned[k + 1] - thinned[k] >= cutoff { thinned[k] } else { stop[k + 1] };
    }
    let mut out = Vec::with_capacity(env.len());
    let mut next = 0usize;
    for &x in env.positions() {
        while next < t && thinned[next] <= x {
            next += 1;
        }
        let end = if next == t || thinned[next] - x >= cutoff { x } else { stop[next] };
        out.push((end - x).min(n));
    }
    out
}

/// Outcome of [`test_function_upper_bound`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UpperBound {
    pub estimate: DiffusionEstimate,
    pub cutoff: f64,
    /// Per sample: every thinned point between `y_{L^-}` and `y_{L^+}`
    /// inside `[-n/2, n/2]` has `y_j + grad g = 0`.
    pub interior_vanished: Vec<bool>,
    /// Per sample: number of such interior points.
    pub interior_points: Vec<usize>,
    /// Largest `|g|` seen.
    pub max_abs_g: f64,
}

/// Monte Carlo value of the variational objective at the explicit test function
/// `g = y_{L_n^+} ∧ n`.
#[allow(clippy::too_many_arguments)]
pub fn test_function_upper_bound(
    spacing: SpacingLaw,
    energy: EnergyLaw,
    model: &RateModel,
    e_star: f64,
    n: f64,
    a: f64,
    env_samples: usize,
    seed: u64,
) -> Result<UpperBound> {
    if !(n >= 3.0) || !(a > 0.0) {
        return invalid(format!("need n >= 3 and a > 0, got n = {n}, a = {a}"));
    }
    if !(e_star > 0.0 && e_star <= 1.0) {
        return invalid(format!("E_* must lie in (0,1], got {e_star}"));
    }
    if env_samples < 2 {
        return invalid("need at least 2 environment samples");
    }
    model.validate()?;
    let cutoff = test_function_cutoff(model.alpha, a, n);
    let eps = crate::pointproc::DEFAULT_EPS_TRUNC;
    let reach = (1.0 / eps).ln().powf(1.0 / model.alpha);
    let half_width = reach + n + cutoff;
    let per_sample = par::try_map_indexed(env_samples, |k| -> Result<(f64, bool, usize, f64)> {
        let env = build_environment_for(
            spacing.into(),
            energy,
            half_width,
            seed::derive_seed(seed, &format!("upper-env-{k}")),
            model.alpha,
            eps,
        )?;
        let g = test_function_values(&env, e_star, cutoff, n);
        let g0 = g[env.origin_slot()];
        let e0 = env.e(0);
        let mut sum = 0.0;
        for j in env.min_index()..=env.max_index() {
            let x = env.x(j);
            if j == 0 || x.abs() > reach {
                continue;
            }
            let c = model.rate_at(x, e0, env.e(j));
            sum += c * (x + g[env.slot(j)] - g0).powi(2);
        }
        let (vanished, count) = interior_check(&env, e_star, cutoff, n);
        let max_g = g.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        Ok((sum, vanished, count, max_g))
    })?;
    let values: Vec<f64> = per_sample.iter().map(|s| s.0).collect();
    let (value, stderr) = stats::mean_stderr(&values);
    Ok(UpperBound {
        estimate: DiffusionEstimate {
            method: Method::UpperTestFunction,
            value,
            stderr,
            values,
            n: n as usize,
            alpha: model.alpha,
            beta: model.beta,
            delta: delta_of(energy),
            law: spacing.label(),
            seed,
        },
        cutoff,
        interior_vanished: per_sample.iter().map(|s| s.1).collect(),
        interior_points: per_sample.iter().map(|s| s.2).collect(),
        max_abs_g: per_sample.iter().map(|s| s.3).fold(0.0, f64::max),
    })
}

/// Check that `y_j + grad_{y_j} g` vanishes on the interior thinned points.
fn interior_check(env: &Environment, e_star: f64, cutoff: f64, n: f64) -> (bool, usize) {
    let thin = match thin_environment(env, e_star) {
        Ok(t) => t,
        Err(_) => return (true, 0),
    };
    let g = test_function_values(&thin, 1.0, cutoff, n);
    let g0 = g[thin.origin_slot()];
    let mut lplus = None;
    for k in 0..thin.max_index() {
        if thin.x(k + 1) - thin.x(k) >= cutoff {
            lplus = Some(thin.x(k));
            break;
        }
    }
    let mut lminus = None;
    for k in ((thin.min_index() + 1)..=0).rev() {
        if thin.x(k) - thin.x(k - 1) >= cutoff {
            lminus = Some(thin.x(k));
            break;
        }
    }
    let (Some(hi), Some(lo)) = (lplus, lminus) else { return (true, 0) };
    if lo < -n / 2.0 || hi > n / 2.0 {
        return (true, 0);
    }
    let mut count = 0;
    let mut ok = true;
    for k in thin.min_index()..=thin.max_index() {
        let y = thin.x(k);
        if y < lo || y > hi {
            continue;
        }
        count += 1;
        let v = y + g[thin.slot(k)] - g0;
        ok &= v.abs() <= 1e-9 * n.max(1.0);
    }
    (ok, count)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pointproc::Environment;

    fn lattice_env(n: usize) -> Environment {
        build_environment_counts(SpacingLaw::Deterministic { a: 1.0 }.into(), EnergyLaw::PointMassZero, 0, n, 0)
            .unwrap()
    }

    #[test]
    fn lattice_formula() {
        let m = RateModel::standard(1.0, 0.0).unwrap();
        let r =
            nn_diffusion_analytic(SpacingLaw::Deterministic { a: 1.0 }, EnergyLaw::PointMassZero, &m, 1, 0).unwrap();
        assert!((r.estimate.value - 2.0 / std::f64::consts::E).abs() < 1e-15);
        assert!(r.closed_form);
    }

    #[test]
    fn pareto_diverges() {
        let m = RateModel::standard(1.0, 0.0).unwrap();
        let r = nn_diffusion_analytic(SpacingLaw::Pareto { r: 3.0 }, EnergyLaw::PointMassZero, &m, 1000, 0).unwrap();
        assert!(r.divergent);
        assert_eq!(r.estimate.value, 0.0);
    }

    #[test]
    fn energy_factor_against_sampling() {
        let en = EnergyLaw::PowerLaw { delta: 1.5 };
        let beta = 1.3;
        let closed = energy_factor(en, &Penalty::Standard, beta).unwrap();
        let mut rng = seed::rng(4);
        let draws: Vec<f64> = (0..400_000)
            .map(|_| {
                let a = en.sample(&mut rng);
                let b = en.sample(&mut rng);
                (beta * Penalty::Standard.eval(a, b)).exp()
            })
            .collect();
        let (m, se) = stats::mean_stderr(&draws);
        assert!((m - closed).abs() < 3.0 * se, "{m} vs {closed}");
        // delta = 1, c: int_0^1 e^{cm} dm = (e^c - 1)/c
        let c: f64 = 3.0;
        assert!((power_law_mgf(c, 1.0) - (c.exp() - 1.0) / c).abs() < 1e-13);
    }

    #[test]
    fn lattice_corrector_vanishes() {
        let env =
            build_environment_counts(SpacingLaw::Deterministic { a: 1.0 }.into(), EnergyLaw::PointMassZero, 20, 20, 0)
                .unwrap();
        let m = RateModel::standard(1.0, 0.0).unwrap();
        let chi = nn_corrector(&env, &m).unwrap();
        assert!(chi.iter().all(|c| c.abs() < 1e-12));
    }

    #[test]
    fn nn_corrector_is_harmonic() {
        let env = build_environment_counts(
            SpacingLaw::Exponential { lambda: 2.0 }.into(),
            EnergyLaw::PowerLaw { delta: 1.0 },
            50,
            50,
            3,
        )
        .unwrap();
        let m = RateModel::standard(1.0, 1.0).unwrap();
        let chi = nn_corrector(&env, &m).unwrap();
        assert_eq!(chi[env.origin_slot()], 0.0);
        assert!(nn_harmonicity_residual(&env, &m, &chi) <= 1e-10);
    }

    #[test]
    fn finite_volume_structure() {
        let env = lattice_env(5);
        let m = RateModel::standard(1.0, 0.0).unwrap();
        let p = build_finite_volume(&env, &m, 5, 1e-12, EdgeSet::Full).unwrap();
        assert_eq!(p.circumference, 5.0);
        assert_eq!(p.displacement(0, 4), -1.0);
        assert_eq!(p.displacement(4, 0), 1.0);
        for &(i, j, _, d) in &p.pairs {
            assert!(i < j);
            assert_eq!(d, p.displacement(i, j));
            assert_eq!(-d, p.displacement(j, i));
            assert!(d.abs() <= p.circumference / 2.0);
        }
        assert!(build_finite_volume(&env, &m, 2, 1e-12, EdgeSet::Full).is_err());
    }

    #[test]
    fn lattice_solution_is_translation_invariant() {
        let env = lattice_env(200);
        let m = RateModel::standard(1.0, 0.0).unwrap();
        let p = build_finite_volume(&env, &m, 200, 1e-12, EdgeSet::Full).unwrap();
        let s = solve_corrector(&p, 1e-10).unwrap();
        assert!(s.g.iter().all(|g| g.abs() < 1e-12));
        let x = (-1.0f64).exp();
        let oracle = 2.0 * x * (1.0 + x) / (1.0 - x).powi(3);
        assert!((s.d_n - oracle).abs() < 1e-6, "{}", s.d_n - oracle);
    }

    #[test]
    fn three_point_least_squares() {
        // points 0, 0.7, 1.9 on a circle of circumference 3.2
        let env = Environment::from_points(
            SpacingLaw::Exponential { lambda: 1.0 }.into(),
            EnergyLaw::PowerLaw { delta: 1.0 },
            vec![0.0, 0.7, 1.9, 3.2],
            vec![0.1, -0.4, 0.6, 0.0],
        )
        .unwrap();
        let m = RateModel::standard(1.0, 0.5).unwrap();
        let p = build_finite_volume(&env, &m, 3, 1e-12, EdgeSet::Full).unwrap();
        let s = solve_corrector(&p, 1e-12).unwrap();
        // f(g1, g2) = (2/3) sum_{i<j} c_ij (d_ij + g_j - g_i)^2 with g0 = 0;
        // normal equations of the weighted least squares in (g1, g2)
        let (c01, d01) = (p.pairs[0].2, p.pairs[0].3);
        let (c02, d02) = (p.pairs[1].2, p.pairs[1].3);
        let (c12, d12) = (p.pairs[2].2, p.pairs[2].3);
        let a11 = c01 + c12;
        let a22 = c02 + c12;
        let a12 = -c12;
        let r1 = -c01 * d01 + c12 * d12;
        let r2 = -c02 * d02 - c12 * d12;
        let det = a11 * a22 - a12 * a12;
        let g1 = (r1 * a22 - a12 * r2) / det;
        let g2 = (a11 * r2 - a12 * r1) / det;
        let f = (2.0 / 3.0) * (c01 * (d01 + g1).powi(2) + c02 * (d02 + g2).powi(2) + c12 * (d12 + g2 - g1).powi(2));
        assert!((s.d_n - f).abs() < 1e-12 * f);
        assert!((s.g[1] - g1).abs() < 1e-9 && (s.g[2] - g2).abs() < 1e-9);
        assert!(s.d_n <= p.objective(&[0.0; 3]));
    }

    #[test]
    fn nn_ring_matches_closed_form() {
        let env = build_environment_counts(
            SpacingLaw::Exponential { lambda: 2.0 }.into(),
            EnergyLaw::PowerLaw { delta: 1.0 },
            0,
            60,
            9,
        )
        .unwrap();
        let m = RateModel::standard(1.0, 1.0).unwrap();
        let p = build_finite_volume(&env, &m, 60, 1e-12, EdgeSet::NnOnly).unwrap();
        let s = solve_corrector(&p, 1e-10).unwrap();
        let exact = nn_ring_value(&p);
        assert!((s.d_n - exact).abs() < 1e-8 * exact);
    }

    #[test]
    fn guards() {
        let m = RateModel::standard(1.0, 0.0).unwrap();
        let law = SpacingLaw::Exponential { lambda: 2.0 };
        assert!(variational_diffusion_estimate(law, EnergyLaw::PointMassZero, &m, 10, 1, EdgeSet::Full, 0).is_err());
        assert!(thinning_lower_bound(law, EnergyLaw::PowerLaw { delta: 1.0 }, &m, 0.5, 20, 2, 10, 0).is_err());
    }

    #[test]
    fn certificate_lattice_series() {
        let z = vec![1.0; 40];
        let (c1, _) = c1_value(1.0, 1.0, &z, &z);
        let mut direct = 0.0;
        for n in 0..=40 {
            for m in 0..=40 {
                direct += (1.0 + n as f64 + m as f64) * (-(1.0 + n as f64 + m as f64)).exp();
            }
        }
        assert!((c1 - direct).abs() < 1e-8);
    }

    #[test]
    fn test_function_is_capped() {
        let env = build_environment_for(
            SpacingLaw::Exponential { lambda: 1.0 }.into(),
            EnergyLaw::PowerLaw { delta: 1.0 },
            60.0,
            2,
            1.0,
            1e-12,
        )
        .unwrap();
        let g = test_function_values(&env, 0.3, 2.5, 10.0);
        assert!(g.iter().all(|v| (0.0..=10.0).contains(v)));
    }

    #[test]
    fn schedule() {
        assert!((estar_schedule(0.5, 1.0, 4.0) - 0.5).abs() < 1e-15);
        assert_eq!(estar_schedule(0.5, 1.0, 0.5), 1.0);
    }
}
