//! Continuous-time hopping walks on a lazily extended environment.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::FiniteVolumeProblem;
use crate::error::{invalid, HopError, Result};
use crate::pointproc::{build_environment_for, open_unit, EnergyLaw, Environment, SpacingLaw};
use crate::rates::{site_rates_at_radius, truncation_radius, RateModel, SiteRates};
use crate::{par, seed, stats};

/// Which transitions a walk may make.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WalkKind {
    /// All pairs, rates `c_{x_i,x_j}`.
    Vrh,
    /// Consecutive points only, truncated rates `r^(kappa)`.
    Nn,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Kernel {
    Full,
    Nearest,
    /// Full rates with all non-adjacent pairs removed.
    FullAdjacentOnly,
}

/// Time-stamped visits `(time, index, position)` of one walk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub indices: Vec<i64>,
    pub positions: Vec<f64>,
    pub horizon: f64,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// Position at the horizon.
    pub fn terminal_position(&self) -> f64 {
        *self.positions.last().unwrap_or(&0.0)
    }

    /// Holding times of all completed visits.
    pub fn holding_times(&self) -> Vec<f64> {
        self.times.windows(2).map(|w| w[1] - w[0]).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("time,index,position\n");
        for k in 0..self.len() {
            let _ = writeln!(out, "{:.16e},{},{:.16e}", self.times[k], self.indices[k], self.positions[k]);
        }
        out
    }
}

struct Walk {
    env: Environment,
    model: RateModel,
    kernel: Kernel,
    eps: f64,
    s_bound: usize,
    radius: f64,
    cache: HashMap<i64, SiteRates>,
}

impl Walk {
    fn new(env: &Environment, model: &RateModel, kernel: Kernel, eps: f64) -> Result<Self> {
        model.validate()?;
        if !(eps > 0.0 && eps < 1.0) {
            return invalid(format!("eps_trunc must lie in (0,1), got {eps}"));
        }
        let s_bound = env.max_unit_count();
        let radius = match kernel {
            Kernel::Full => truncation_radius(model.alpha, s_bound, eps).0,
            _ => 0.0,
        };
        Ok(Self { env: env.clone(), model: model.clone(), kernel, eps, s_bound, radius, cache: HashMap::new() })
    }

    fn cover(&mut self, k: i64) -> Result<()> {
        match self.kernel {
            Kernel::Full => {
                let x = self.env.x(k);
                let r = self.radius;
                if x - r < self.env.left_edge() || x + r > self.env.right_edge() {
                    if !self.env.extendable() {
                        return Ok(());
                    }
                    let before = self.env.len();
                    self.env.ensure_covers(x - 2.0 * r, x + 2.0 * r)?;
                    if self.env.len() > before {
                        let s = self.env.max_unit_count();
                        if s > self.s_bound {
                            self.s_bound = s;
                            self.radius = truncation_radius(self.model.alpha, s, self.eps).0;
                        }
                    }
                }
            }
            Kernel::Nearest | Kernel::FullAdjacentOnly => {
                if k - 1 < self.env.min_index() {
                    self.env.extend_left(10)?;
                }
                if k + 1 > self.env.max_index() {
                    self.env.extend_right(10)?;
                }
            }
        }
        Ok(())
    }

    fn adjacent(&self, k: i64) -> SiteRates {
        let (x, e) = (self.env.x(k), self.env.e(k));
        let rate = |j: i64| {
            let d = self.env.x(j) - x;
            if self.kernel == Kernel::Nearest {
                self.model.nn_rate_at(d, e, self.env.e(j))
            } else {
                self.model.rate_at(d, e, self.env.e(j))
            }
        };
        let (rl, rr) = (rate(k - 1), rate(k + 1));
        let total = rl + rr;
        SiteRates {
            site: k,
            total,
            targets: vec![k - 1, k + 1],
            rates: vec![rl, rr],
            cumulative: vec![rl / total, 1.0],
            tail_bound: 0.0,
            radius: f64::NAN,
        }
    }

    fn rates(&mut self, k: i64) -> Result<&SiteRates> {
        if !self.cache.contains_key(&k) {
            self.cover(k)?;
            let s = match self.kernel {
                Kernel::Full => site_rates_at_radius(&self.model, &self.env, k, self.radius, self.eps, self.s_bound)?,
                _ => self.adjacent(k),
            };
            self.cache.insert(k, s);
        }
        Ok(&self.cache[&k])
    }

    /// Run to `horizon`; returns `(index, position, jumps)` at the horizon.
    fn run(
        &mut self,
        horizon: f64,
        rng: &mut ChaCha8Rng,
        mut record: Option<&mut Trajectory>,
    ) -> Result<(i64, f64, u64)> {
        let mut t = 0.0;
        let mut k = 0i64;
        let mut jumps = 0u64;
        loop {
            let (hold, next) = {
                let s = self.rates(k)?;
                let hold = -open_unit(rng).ln() / s.total;
                (hold, s.pick(rng.random::<f64>()))
            };
            if t + hold > horizon {
                break;
            }
            t += hold;
            k = next;
            jumps += 1;
            if !self.env.contains_index(k) {
                return Err(HopError::WindowNotCovered { lo: self.env.left_edge(), hi: self.env.right_edge() });
            }
            if let Some(rec) = record.as_deref_mut() {
                rec.times.push(t);
                rec.indices.push(k);
                rec.positions.push(self.env.x(k));
            }
        }
        Ok((k, self.env.x(k), jumps))
    }
}

fn check_horizon(t: f64) -> Result<()> {
    if t > 0.0 && t.is_finite() {
        Ok(())
    } else {
        invalid(format!("time horizon must be positive, got {t}"))
    }
}

fn simulate(
    env: &Environment,
    model: &RateModel,
    kernel: Kernel,
    horizon: f64,
    eps: f64,
    seed: u64,
) -> Result<Trajectory> {
    check_horizon(horizon)?;
    let mut walk = Walk::new(env, model, kernel, eps)?;
    let mut rng = seed::stream(seed, "walk");
    let mut traj = Trajectory { times: vec![0.0], indices: vec![0], positions: vec![0.0], horizon };
    walk.run(horizon, &mut rng, Some(&mut traj))?;
    Ok(traj)
}

/// Variable-range walk started at the origin, run to time `horizon`.
pub fn simulate_vrh(
    env: &Environment,
    model: &RateModel,
    horizon: f64,
    eps_trunc: f64,
    seed: u64,
) -> Result<Trajectory> {
    simulate(env, model, Kernel::Full, horizon, eps_trunc, seed)
}

/// Variable-range walk with every non-adjacent rate removed.
pub fn simulate_vrh_adjacent_only(env: &Environment, model: &RateModel, horizon: f64, seed: u64) -> Result<Trajectory> {
    simulate(env, model, Kernel::FullAdjacentOnly, horizon, 0.5, seed)
}

/// Nearest-neighbor walk with rates `r^(kappa)`.
pub fn simulate_nn(env: &Environment, model: &RateModel, horizon: f64, seed: u64) -> Result<Trajectory> {
    simulate(env, model, Kernel::Nearest, horizon, 0.5, seed)
}

/// Annealed mean-squared-displacement estimate of the diffusion coefficient.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MsdEstimate {
    pub d_hat: f64,
    pub stderr: f64,
    pub replicas: usize,
    pub horizon: f64,
    pub terminal_displacements: Vec<f64>,
}

impl MsdEstimate {
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| HopError::Serde(e.to_string()))
    }
}

/// Terminal displacements `X(T)` of `replicas` walks, each on its own environment.
pub fn terminal_displacements(
    spacing: SpacingLaw,
    energy: EnergyLaw,
    model: &RateModel,
    kind: WalkKind,
    horizon: f64,
    replicas: usize,
    eps_trunc: f64,
    seed: u64,
) -> Result<Vec<f64>> {
    check_horizon(horizon)?;
    model.validate()?;
    let kernel = match kind {
        WalkKind::Vrh => Kernel::Full,
        WalkKind::Nn => Kernel::Nearest,
    };
    let half_width = 10.0 * spacing.mean();
    par::try_map_indexed(replicas, |i| {
        let env = build_environment_for(
            spacing.into(),
            energy,
            half_width,
            seed::derive_seed(seed, &format!("msd-env-{i}")),
            model.alpha,
            eps_trunc,
        )?;
        let mut walk = Walk::new(&env, model, kernel, eps_trunc)?;
        let mut rng = seed::stream(seed, &format!("msd-walk-{i}"));
        walk.run(horizon, &mut rng, None).map(|(_, x, _)| x)
    })
}

/// `D = mean of X(T)^2 / T` over independent replicas.
pub fn msd_diffusion_estimate(
    spacing: SpacingLaw,
    energy: EnergyLaw,
    model: &RateModel,
    kind: WalkKind,
    horizon: f64,
    replicas: usize,
    seed: u64,
) -> Result<MsdEstimate> {
    if replicas < 2 {
        return invalid(format!("need at least 2 replicas, got {replicas}"));
    }
    let xs = terminal_displacements(
        spacing,
        energy,
        model,
        kind,
        horizon,
        replicas,
        crate::pointproc::DEFAULT_EPS_TRUNC,
        seed,
    )?;
    let sq: Vec<f64> = xs.iter().map(|x| x * x / horizon).collect();
    let (d_hat, stderr) = stats::mean_stderr(&sq);
    Ok(MsdEstimate { d_hat, stderr, replicas, horizon, terminal_displacements: xs })
}

/// Jump counts of the embedded chain on a finite periodized network.
#[derive(Debug, Clone, PartialEq)]
pub struct FluxCounts {
    pub steps: u64,
    /// `counts[(i, j)]` is the number of jumps from `i` to `j`.
    pub counts: BTreeMap<(usize, usize), u64>,
}

impl FluxCounts {
    pub fn get(&self, i: usize, j: usize) -> u64 {
        self.counts.get(&(i, j)).copied().unwrap_or(0)
    }
}

/// Run `steps` jumps of the walk on the network of `problem` from node 0.
pub fn network_flux(problem: &FiniteVolumeProblem, steps: u64, seed: u64) -> Result<FluxCounts> {
    let adj = problem.adjacency();
    if adj.iter().any(|row| row.is_empty()) {
        return Err(HopError::Disconnected);
    }
    let cumulative: Vec<Vec<f64>> = adj
        .iter()
        .map(|row| {
            let total: f64 = row.iter().map(|e| e.1).sum();
            let mut acc = 0.0;
            row.iter()
                .map(|e| {
                    acc += e.1;
                    acc / total
                })
                .collect()
        })
        .collect();
    let mut rng = seed::stream(seed, "network-walk");
    let mut counts = BTreeMap::new();
    let mut i = 0usize;
    for _ in 0..steps {
        let v: f64 = rng.random();
        let c = &cumulative[i];
        let k = c.partition_point(|&p| p <= v).min(c.len() - 1);
        let j = adj[i][k].0;
        *counts.entry((i, j)).or_insert(0u64) += 1;
        i = j;
    }
    Ok(FluxCounts { steps, counts })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pointproc::build_environment_counts;

    fn lattice(n: usize) -> Environment {
        build_environment_counts(SpacingLaw::Deterministic { a: 1.0 }.into(), EnergyLaw::PointMassZero, n, n, 1)
            .unwrap()
    }

    #[test]
    fn starts_at_origin() {
        let m = RateModel::standard(1.0, 0.0).unwrap();
        let t = simulate_vrh(&lattice(60), &m, 5.0, 1e-12, 3).unwrap();
        assert_eq!((t.times[0], t.indices[0], t.positions[0]), (0.0, 0, 0.0));
        assert!(t.times.windows(2).all(|w| w[1] > w[0]));
        assert!(t.indices.windows(2).all(|w| w[1] != w[0]));
    }

    #[test]
    fn vrh_holding_time_on_lattice() {
        let m = RateModel::standard(1.0, 0.0).unwrap();
        let t = simulate_vrh(&lattice(60), &m, 20_000.0, 1e-12, 4).unwrap();
        let h = t.holding_times();
        let (mean, se) = stats::mean_stderr(&h);
        let oracle = (std::f64::consts::E - 1.0) / 2.0;
        assert!((mean - oracle).abs() < 3.0 * se, "{mean} vs {oracle} se {se}");
    }

    #[test]
    fn nn_walk_moves_by_one() {
        let m = RateModel::standard(1.0, 0.0).unwrap();
        let t = simulate_nn(&lattice(5), &m, 5_000.0, 8).unwrap();
        assert!(t.indices.windows(2).all(|w| (w[1] - w[0]).abs() == 1));
        let right = t.indices.windows(2).filter(|w| w[1] > w[0]).count() as f64;
        let n = (t.len() - 1) as f64;
        let se = (0.25 / n).sqrt();
        assert!((right / n - 0.5).abs() < 3.0 * se);
    }

    #[test]
    fn truncated_nn_holding_time() {
        let m = RateModel::standard(1.0, 0.0).unwrap().with_kappa(0.5);
        let t = simulate_nn(&lattice(5), &m, 20_000.0, 9).unwrap();
        let (mean, se) = stats::mean_stderr(&t.holding_times());
        let oracle = 1.0 / (2.0 * (-0.5f64).exp());
        assert!((mean - oracle).abs() < 3.0 * se);
    }

    #[test]
    fn fixed_window_cannot_grow() {
        let env = Environment::from_points(
            SpacingLaw::Deterministic { a: 1.0 }.into(),
            EnergyLaw::PointMassZero,
            vec![-1.0, 0.0, 1.0],
            vec![0.0; 3],
        )
        .unwrap();
        let m = RateModel::standard(1.0, 0.0).unwrap();
        assert!(simulate_vrh(&env, &m, 1.0, 1e-12, 1).is_err());
    }

    #[test]
    fn replica_guard_and_csv() {
        let m = RateModel::standard(1.0, 0.0).unwrap();
        let law = SpacingLaw::Deterministic { a: 1.0 };
        assert!(msd_diffusion_estimate(law, EnergyLaw::PointMassZero, &m, WalkKind::Nn, 10.0, 1, 1).is_err());
        let t = simulate_nn(&lattice(5), &m, 2.0, 2).unwrap();
        let csv = t.to_csv();
        assert!(csv.starts_with("time,index,position\n0.0000000000000000e0,0,0.0000000000000000e0\n"));
        assert_eq!(csv.lines().count(), t.len() + 1);
    }
}
