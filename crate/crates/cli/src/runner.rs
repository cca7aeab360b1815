//! Dispatch a manifest to the estimators and write its outputs.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use hoplab_core::asymptotics::{predicted_exponents, scaling_fit, ScalingFit};
use hoplab_core::diffusion::{
    estar_schedule, nn_diffusion_analytic, subdiffusivity_certificate, test_function_upper_bound, thinning_lower_bound,
    variational_diffusion_estimate_eps, DiffusionEstimate, EdgeSet, Method, Verdict,
};
use hoplab_core::par;
use hoplab_core::pointproc::{build_environment, EnergyLaw, SpacingLaw};
use hoplab_core::seed::derive_seed;
use hoplab_core::spectral::{analyze_box, cheeger_interval_cut, restrict_to_box, zeta_max_gap};
use hoplab_core::walker::msd_diffusion_estimate;
use hoplab_core::HopError;

use crate::manifest::{ExperimentManifest, Kind, SweepMethod};
use crate::summary::*;

const STRETCHED_TOLERANCE: f64 = 0.2;
const GAP_TOLERANCE: f64 = 0.5;
const CHEEGER_TOLERANCE: f64 = 0.3;
const EXPONENTIAL_MIN_R2: f64 = 0.95;

/// Rows of one results file, already in output order.
struct Table {
    columns: String,
    rows: Vec<String>,
}

/// Row body, gap and Cheeger value of one box.
type BoxRow = (String, f64, f64);

struct Outcome {
    table: Table,
    fits: Vec<FitRecord>,
    checks: Vec<CheckRecord>,
    notes: Vec<String>,
}

/// Sub-seed label and derived seed of one task.
struct Sub {
    label: String,
    seed: u64,
}

struct Ctx<'a> {
    m: &'a ExperimentManifest,
    master: u64,
    hash: String,
}

impl Ctx<'_> {
    fn sub(&self, label: String) -> Sub {
        let seed = derive_seed(self.master, &label);
        Sub { label, seed }
    }

    fn provenance(&self, label: &str) -> String {
        format!("{},\"{}\",{}", self.master, label, self.hash)
    }

    fn row(&self, body: String, sub: &Sub) -> String {
        format!("{body},{}", self.provenance(&sub.label))
    }

    fn tolerance(&self, default: f64) -> f64 {
        self.m.tolerance.unwrap_or(default)
    }
}

fn columns(base: &str) -> String {
    format!("{base},{PROVENANCE_COLUMNS}")
}

fn delta_of(energy: EnergyLaw) -> Option<f64> {
    match energy {
        EnergyLaw::PowerLaw { delta } => Some(delta),
        _ => None,
    }
}

/// `(law, grid index)` tasks in grid-major order.
fn grid_tasks(m: &ExperimentManifest) -> Vec<(usize, usize)> {
    (0..m.grid.len()).flat_map(|g| (0..m.laws.len()).map(move |l| (l, g))).collect()
}

/// Run the manifest and write everything into `out`.
pub fn execute(manifest: &ExperimentManifest, out: &Path) -> Result<Summary> {
    manifest.validate()?;
    let ctx = Ctx { m: manifest, master: manifest.master_seed()?, hash: manifest.hash()? };
    let outcome = match manifest.kind {
        Kind::Msd => beta_kind(&ctx, &[SweepMethod::Msd])?,
        Kind::Variational => beta_kind(&ctx, &[variational_method(manifest.samples.edges)])?,
        Kind::NnAnalytic => beta_kind(&ctx, &[SweepMethod::NnAnalytic])?,
        Kind::BetaSweep => beta_kind(&ctx, &manifest.methods)?,
        Kind::SpectralScan => box_scan(&ctx, true, false)?,
        Kind::CheegerScan => box_scan(&ctx, false, true)?,
        Kind::LSweep => box_scan(&ctx, true, true)?,
        Kind::Certificate => certificate(&ctx)?,
        Kind::BoundsCrosscheck => bounds_crosscheck(&ctx)?,
    };
    write_outputs(&ctx, outcome, out)
}

fn variational_method(edges: EdgeSet) -> SweepMethod {
    match edges {
        EdgeSet::Full => SweepMethod::VariationalFull,
        EdgeSet::NnOnly => SweepMethod::VariationalNn,
    }
}

fn write_outputs(ctx: &Ctx, outcome: Outcome, out: &Path) -> Result<Summary> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let Outcome { table, fits, checks, notes } = outcome;
    let mut csv = String::with_capacity(table.rows.len() * 200);
    csv.push_str(&table.columns);
    csv.push('\n');
    for r in &table.rows {
        csv.push_str(r);
        csv.push('\n');
    }
    write(out, RESULTS_FILE, &csv)?;
    let mut fit_csv = format!("{}\n", ScalingFit::CSV_HEADER);
    for f in &fits {
        fit_csv.push_str(&format!(
            "{},{:.16e},{:.16e},{:.16e},{}\n",
            f.experiment, f.slope, f.intercept, f.r2, f.n_points
        ));
    }
    write(out, FITS_FILE, &fit_csv)?;
    let mut resolved = ctx.m.clone();
    resolved.output_dir = None;
    resolved.seed = Some(ctx.master);
    write(out, MANIFEST_FILE, &(serde_json::to_string_pretty(&resolved)? + "\n"))?;
    let summary = Summary {
        kind: ctx.m.kind.tag().into(),
        name: ctx.m.label(),
        manifest_hash: ctx.hash.clone(),
        master_seed: ctx.master,
        results_file: RESULTS_FILE.into(),
        columns: table.columns.split(',').map(str::to_string).collect(),
        rows: table.rows.len(),
        fits,
        checks,
        notes,
    };
    write(out, SUMMARY_FILE, &(serde_json::to_string_pretty(&summary)? + "\n"))?;
    Ok(summary)
}

fn write(dir: &Path, name: &str, text: &str) -> Result<()> {
    let path = dir.join(name);
    fs::write(&path, text).with_context(|| format!("writing {}", path.display()))
}

fn method_tag(method: SweepMethod) -> &'static str {
    match method {
        SweepMethod::VariationalFull => Method::VariationalFull.tag(),
        SweepMethod::VariationalNn => Method::VariationalNn.tag(),
        SweepMethod::NnAnalytic => Method::NnAnalytic.tag(),
        SweepMethod::Msd => Method::Msd.tag(),
    }
}

fn estimate(ctx: &Ctx, law: SpacingLaw, beta: f64, method: SweepMethod, seed: u64) -> Result<DiffusionEstimate> {
    let m = ctx.m;
    let s = &m.samples;
    let model = m.model.with_beta(beta);
    let est = match method {
        SweepMethod::VariationalFull => variational_diffusion_estimate_eps(
            law,
            m.energy,
            &model,
            s.n,
            s.env_samples,
            EdgeSet::Full,
            s.eps_trunc,
            seed,
        )?,
        SweepMethod::VariationalNn => variational_diffusion_estimate_eps(
            law,
            m.energy,
            &model,
            s.n,
            s.env_samples,
            EdgeSet::NnOnly,
            s.eps_trunc,
            seed,
        )?,
        SweepMethod::NnAnalytic => nn_diffusion_analytic(law, m.energy, &model, s.draws, seed)?.estimate,
        SweepMethod::Msd => {
            let e = msd_diffusion_estimate(law, m.energy, &model, s.walk, s.horizon, s.replicas, seed)?;
            let values = e.terminal_displacements.iter().map(|x| x * x / e.horizon).collect();
            DiffusionEstimate {
                method: Method::Msd,
                value: e.d_hat,
                stderr: e.stderr,
                values,
                n: 0,
                alpha: model.alpha,
                beta,
                delta: delta_of(m.energy),
                law: law.label(),
                seed,
            }
        }
    };
    Ok(est)
}

/// Kinds over a `beta` grid: one row per (grid point, law, method).
fn beta_kind(ctx: &Ctx, methods: &[SweepMethod]) -> Result<Outcome> {
    let m = ctx.m;
    let tasks: Vec<(usize, usize, SweepMethod)> =
        grid_tasks(m).into_iter().flat_map(|(l, g)| methods.iter().map(move |&meth| (l, g, meth))).collect();
    let results = par::try_map_indexed(tasks.len(), |i| -> Result<(Sub, DiffusionEstimate)> {
        let (l, g, meth) = tasks[i];
        let (law, beta) = (m.laws[l], m.grid[g]);
        let sub = ctx.sub(format!("{}/{}/beta={beta}", law.label(), method_tag(meth)));
        let est = estimate(ctx, law, beta, meth, sub.seed)
            .with_context(|| format!("{} at beta = {beta} on {}", method_tag(meth), law.label()))?;
        Ok((sub, est))
    })?;
    let rows = results.iter().map(|(sub, e)| ctx.row(e.csv_row(), sub)).collect();
    let mut fits = Vec::new();
    let mut notes = Vec::new();
    if m.grid.len() >= 3 {
        for (l, law) in m.laws.iter().enumerate() {
            for &meth in methods {
                let series: Vec<(f64, f64)> = tasks
                    .iter()
                    .zip(&results)
                    .filter(|((tl, _, tm), _)| *tl == l && *tm == meth)
                    .map(|((_, g, _), (_, e))| (m.grid[*g], e.value))
                    .collect();
                let name = format!("{}/{}", law.label(), method_tag(meth));
                match regime_fit(ctx, &name, &series)? {
                    Some(f) => fits.push(f),
                    None => notes.push(format!("{name}: too few usable grid points for a regime fit")),
                }
            }
        }
    }
    Ok(Outcome {
        table: Table { columns: columns(DiffusionEstimate::CSV_HEADER), rows },
        fits,
        checks: Vec::new(),
        notes,
    })
}

fn fit_record(experiment: String, fit: &ScalingFit, predicted: Option<f64>, tolerance: Option<f64>) -> FitRecord {
    let status = match (predicted, tolerance) {
        (Some(p), Some(t)) if (fit.slope - p).abs() <= t => Status::Pass,
        (Some(_), Some(_)) => Status::Fail,
        _ => Status::Info,
    };
    FitRecord {
        experiment,
        slope: fit.slope,
        intercept: fit.intercept,
        r2: fit.r2,
        n_points: fit.n_points(),
        predicted,
        tolerance,
        status,
        note: String::new(),
    }
}

/// `alpha >= 1`: `log D` vs `beta`. `alpha < 1`: `log(-log D)` vs `log beta` over `0 < D < 1`.
fn regime_fit(ctx: &Ctx, name: &str, series: &[(f64, f64)]) -> Result<Option<FitRecord>> {
    let alpha = ctx.m.model.alpha;
    let monotone = series.windows(2).all(|w| w[1].1 <= w[0].1);
    if alpha >= 1.0 {
        let pairs: Vec<(f64, f64)> = series.iter().filter(|p| p.1 > 0.0).map(|&(b, d)| (b, d.ln())).collect();
        if pairs.len() < 3 {
            return Ok(None);
        }
        let fit = scaling_fit(&pairs)?;
        let ok = fit.slope < 0.0 && fit.r2 >= EXPONENTIAL_MIN_R2;
        let mut rec = fit_record(format!("exponential_regime/{name}"), &fit, None, None);
        rec.status = if ok { Status::Pass } else { Status::Fail };
        rec.note = format!("log D vs beta; needs slope < 0 and R^2 >= {EXPONENTIAL_MIN_R2}");
        return Ok(Some(rec));
    }
    let pairs: Vec<(f64, f64)> =
        series.iter().filter(|p| p.0 > 0.0 && p.1 > 0.0 && p.1 < 1.0).map(|&(b, d)| (b.ln(), (-d.ln()).ln())).collect();
    if pairs.len() < 3 {
        return Ok(None);
    }
    let fit = scaling_fit(&pairs)?;
    let predicted = match delta_of(ctx.m.energy) {
        Some(delta) => Some(predicted_exponents(alpha, delta, 1.0)?.stretched),
        None => None,
    };
    let tol = ctx.tolerance(STRETCHED_TOLERANCE);
    let mut rec = fit_record(format!("stretched_regime/{name}"), &fit, predicted, Some(tol));
    rec.note = format!("log(-log D) vs log beta over {} of {} grid points", pairs.len(), series.len());
    if rec.status == Status::Fail && monotone {
        rec.status = Status::Deviation;
        rec.note.push_str("; outside the band, D decreases monotonically");
    } else if !monotone {
        rec.note.push_str("; D is not monotone in beta");
    }
    Ok(Some(rec))
}

/// One environment per (law, seed index), reused for every box size.
fn box_scan(ctx: &Ctx, want_gap: bool, want_cheeger: bool) -> Result<Outcome> {
    let m = ctx.m;
    let s = &m.samples;
    let alpha = m.model.alpha;
    let l_max = *m.grid.last().expect("validated nonempty grid");
    let tasks: Vec<(usize, usize)> = (0..m.laws.len()).flat_map(|l| (0..s.seeds).map(move |k| (l, k))).collect();
    // per task, one entry per box size
    let per_task = par::try_map_indexed(tasks.len(), |i| -> Result<(Sub, Vec<BoxRow>)> {
        let (l, k) = tasks[i];
        let law = m.laws[l];
        let sub = ctx.sub(format!("{}/env={k}", law.label()));
        let env = build_environment(law, EnergyLaw::PointMassZero, 0.5 * l_max + 1.0, sub.seed)?;
        let mut out = Vec::with_capacity(m.grid.len());
        for &side in &m.grid {
            let b = restrict_to_box(&env, side, alpha)?;
            if want_gap {
                let r = analyze_box(&b, &law.label(), sub.seed, s.gap_method)
                    .with_context(|| format!("box L = {side} of {}", sub.label))?;
                out.push((r.csv_row(), r.gap, r.cheeger));
            } else {
                let c = cheeger_interval_cut(&b)?;
                let body = format!(
                    "\"{}\",{:.16e},{:.16e},{},{},{:.16e},{:.16e},interval_cut",
                    law.label(),
                    alpha,
                    side,
                    sub.seed,
                    b.len(),
                    zeta_max_gap(&b)?,
                    c.value
                );
                out.push((body, f64::NAN, c.value));
            }
        }
        Ok((sub, out))
    })?;
    let header = if want_gap {
        hoplab_core::spectral::SpectralResult::CSV_HEADER
    } else {
        "law,alpha,L,seed,n_points,zeta,cheeger,cheeger_method"
    };
    let mut rows = Vec::new();
    for g in 0..m.grid.len() {
        for (sub, per_l) in &per_task {
            rows.push(ctx.row(per_l[g].0.clone(), sub));
        }
    }
    let mut fits = Vec::new();
    let mut notes = Vec::new();
    if m.grid.len() >= 3 {
        for (l, law) in m.laws.iter().enumerate() {
            let mine: Vec<&Vec<BoxRow>> =
                tasks.iter().zip(&per_task).filter(|((tl, _), _)| *tl == l).map(|(_, (_, v))| v).collect();
            let mean_log = |g: usize, pick: fn(&BoxRow) -> f64| {
                mine.iter().map(|v| pick(&v[g]).ln()).sum::<f64>() / mine.len() as f64
            };
            let predicted = match law {
                SpacingLaw::Exponential { lambda } if alpha == 1.0 => Some(predicted_exponents(1.0, 1.0, *lambda)?),
                _ => None,
            };
            if want_gap {
                let pairs: Vec<(f64, f64)> =
                    (0..m.grid.len()).map(|g| (m.grid[g].ln(), mean_log(g, |r| r.1))).collect();
                let fit = scaling_fit(&pairs)?;
                fits.push(fit_record(
                    format!("gap_exponent/{}", law.label()),
                    &fit,
                    predicted.map(|p| p.gap),
                    predicted.map(|_| ctx.tolerance(GAP_TOLERANCE)),
                ));
            }
            if want_cheeger {
                let pairs: Vec<(f64, f64)> =
                    (0..m.grid.len()).map(|g| (m.grid[g].ln(), mean_log(g, |r| r.2))).collect();
                let fit = scaling_fit(&pairs)?;
                fits.push(fit_record(
                    format!("cheeger_exponent/{}", law.label()),
                    &fit,
                    predicted.map(|p| p.cheeger),
                    predicted.map(|_| ctx.tolerance(CHEEGER_TOLERANCE)),
                ));
            }
            if predicted.is_none() {
                notes.push(format!("{}: no predicted exponent (needs exponential spacings, alpha = 1)", law.label()));
            }
        }
    } else {
        notes.push("fewer than 3 box sizes: no exponent fit".into());
    }
    Ok(Outcome { table: Table { columns: columns(header), rows }, fits, checks: Vec::new(), notes })
}

fn verdict_tag(v: Verdict) -> &'static str {
    match v {
        Verdict::Divergent => "divergent",
        Verdict::Stable => "stable",
        Verdict::Inconclusive => "inconclusive",
    }
}

/// Grid values are `alpha`; one row per running-mean checkpoint.
fn certificate(ctx: &Ctx) -> Result<Outcome> {
    let m = ctx.m;
    let s = &m.samples;
    let tasks = grid_tasks(m);
    let results = par::try_map_indexed(tasks.len(), |i| -> Result<_> {
        let (l, g) = tasks[i];
        let (law, alpha) = (m.laws[l], m.grid[g]);
        let sub = ctx.sub(format!("{}/certificate/alpha={alpha}", law.label()));
        let cert = subdiffusivity_certificate(law, alpha, s.order, s.draws, sub.seed)?;
        Ok((law, alpha, sub, cert))
    })?;
    let mut rows = Vec::new();
    let mut checks = Vec::new();
    for (law, alpha, sub, cert) in &results {
        for (k, (&n, &mean)) in cert.checkpoints.iter().zip(&cert.running_means).enumerate() {
            let ratio = if k == 0 { String::new() } else { format!("{:.16e}", cert.ratios[k - 1]) };
            let body = format!(
                "\"{}\",{:.16e},{},{},{:.16e},{},{},{}",
                law.label(),
                alpha,
                s.order,
                n,
                mean,
                ratio,
                verdict_tag(cert.verdict),
                sub.seed
            );
            rows.push(ctx.row(body, sub));
        }
        let diverges = law.exp_moment_diverges(*alpha);
        let expected = if diverges { Verdict::Divergent } else { Verdict::Stable };
        let ratios: Vec<String> = cert.ratios.iter().map(|r| format!("{r:.3}")).collect();
        checks.push(CheckRecord {
            name: format!("certificate/{}/alpha={alpha}", law.label()),
            passed: cert.verdict == expected,
            detail: format!(
                "verdict {} (expected {} since E[exp(Z^alpha)] {}); doubling ratios [{}]",
                verdict_tag(cert.verdict),
                verdict_tag(expected),
                if diverges { "diverges" } else { "is finite" },
                ratios.join(", ")
            ),
        });
    }
    Ok(Outcome {
        table: Table { columns: columns("law,alpha,order,checkpoint,running_mean,ratio,verdict,seed"), rows },
        fits: Vec::new(),
        checks,
        notes: vec!["certificate verdicts are a Monte Carlo heuristic, not a proof".into()],
    })
}

/// Lower thinning bound, variational value and test-function upper bound per grid point.
fn bounds_crosscheck(ctx: &Ctx) -> Result<Outcome> {
    let m = ctx.m;
    let s = &m.samples;
    let delta = delta_of(m.energy).expect("validated power-law energies");
    let tasks = grid_tasks(m);
    let results = par::try_map_indexed(tasks.len(), |i| -> Result<_> {
        let (l, g) = tasks[i];
        let (law, beta) = (m.laws[l], m.grid[g]);
        let model = m.model.with_beta(beta);
        let e_star = s.e_star.unwrap_or_else(|| estar_schedule(model.alpha, delta, beta));
        let sub = ctx.sub(format!("{}/bounds/beta={beta}", law.label()));
        let lower = thinning_lower_bound(law, m.energy, &model, e_star, s.n, s.env_samples, s.moment_samples, sub.seed)
            .context("thinning lower bound")?
            .estimate;
        let var = variational_diffusion_estimate_eps(
            law,
            m.energy,
            &model,
            s.n,
            s.env_samples,
            EdgeSet::Full,
            s.eps_trunc,
            sub.seed,
        )
        .context("variational estimate")?;
        let upper = test_function_upper_bound(
            law,
            m.energy,
            &model,
            e_star,
            s.upper_n,
            s.upper_a,
            s.upper_env_samples,
            sub.seed,
        )
        .context("test-function upper bound")?
        .estimate;
        Ok((law, beta, e_star, sub, [lower, var, upper]))
    })?;
    let mut rows = Vec::new();
    let mut checks = Vec::new();
    for (law, beta, e_star, sub, ests) in &results {
        for e in ests {
            rows.push(ctx.row(e.csv_row(), sub));
        }
        let [lower, var, upper] = ests;
        let slack = |a: &DiffusionEstimate, b: &DiffusionEstimate| 3.0 * a.stderr.hypot(b.stderr);
        let low_ok = lower.value <= var.value + slack(lower, var);
        let up_ok = var.value <= upper.value + slack(var, upper);
        checks.push(CheckRecord {
            name: format!("ordering/{}/beta={beta}", law.label()),
            passed: low_ok && up_ok,
            detail: format!(
                "E_* = {e_star:.4}: lower {:.4e} ± {:.1e} <= variational {:.4e} ± {:.1e} <= upper {:.4e} ± {:.1e} (3 sigma slack)",
                lower.value, lower.stderr, var.value, var.stderr, upper.value, upper.stderr
            ),
        });
    }
    Ok(Outcome {
        table: Table { columns: columns(DiffusionEstimate::CSV_HEADER), rows },
        fits: Vec::new(),
        checks,
        notes: Vec::new(),
    })
}

/// Output directory: the command-line value, else the manifest's.
pub fn output_dir(manifest: &ExperimentManifest, flag: Option<PathBuf>) -> Result<PathBuf> {
    flag.or_else(|| manifest.output_dir.clone())
        .context("no output directory: set \"output_dir\" in the manifest or pass --out")
}

/// Whether an error came from a certified truncation or a solver.
pub fn is_numerical_failure(err: &anyhow::Error) -> bool {
    err.chain().any(|e| {
        matches!(
            e.downcast_ref::<HopError>(),
            Some(HopError::Truncation { .. } | HopError::NonConvergence { .. } | HopError::Disconnected)
        )
    })
}
