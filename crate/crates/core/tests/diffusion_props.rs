use hoplab_core::asymptotics::scaling_fit;
use hoplab_core::diffusion::{
    build_finite_volume, solve_corrector, test_function_upper_bound, thinning_lower_bound,
    variational_diffusion_estimate, EdgeSet,
};
use hoplab_core::pointproc::{
    build_environment_counts, sample_thinned_spacing, EnergyLaw, SpacingLaw, ThinnedSpacingSampler,
};
use hoplab_core::rates::{Penalty, RateModel};
use hoplab_core::seed;
use hoplab_core::stats::{ks_distance, mean_stderr};
use hoplab_core::walker::{msd_diffusion_estimate, WalkKind};
use proptest::prelude::*;
use rand::Rng;
use rand_distr::{Distribution, Exp};

fn law_strategy() -> impl Strategy<Value = SpacingLaw> {
    prop_oneof![
        (0.5f64..3.0).prop_map(|lambda| SpacingLaw::Exponential { lambda }),
        (0.1f64..0.9).prop_map(|p| SpacingLaw::Geometric { p }),
        (0.5f64..2.0, 0.5f64..3.0).prop_map(|(lambda, tau)| SpacingLaw::Weibull { lambda, tau }),
        (0.3f64..2.0).prop_map(|sigma| SpacingLaw::HalfGaussian { sigma }),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn adding_pairs_never_lowers_d_n(
        law in law_strategy(),
        alpha in 0.5f64..2.0,
        beta in 0.0f64..4.0,
        n in 8usize..40,
        s in any::<u64>(),
        mask in any::<u64>(),
    ) {
        let env = build_environment_counts(law.into(), EnergyLaw::PowerLaw { delta: 1.0 }, 0, n, s).unwrap();
        let m = RateModel::standard(alpha, beta).unwrap();
        let full = build_finite_volume(&env, &m, n, 1e-12, EdgeSet::Full).unwrap();
        prop_assume!(full.is_connected());
        // keep the ring so the reduced graph stays connected, drop other pairs by mask bits
        let mut sub = full.clone();
        let mut bits = seed::rng(mask);
        sub.pairs.retain(|&(i, j, _, _)| j == i + 1 || (i == 0 && j == n - 1) || bits.random::<bool>());
        let big = solve_corrector(&full, 1e-12).unwrap().d_n;
        let small = solve_corrector(&sub, 1e-12).unwrap().d_n;
        let scale = full.objective(&vec![0.0; n]);
        prop_assert!(big >= small - 1e-9 * scale, "full {big} < subset {small}");
    }

    #[test]
    fn d_n_nonincreasing_in_beta(
        law in law_strategy(),
        alpha in 0.5f64..2.0,
        n in 8usize..60,
        s in any::<u64>(),
        u in prop_oneof![Just(Penalty::Standard), Just(Penalty::Sum)],
    ) {
        let env = build_environment_counts(law.into(), EnergyLaw::PowerLaw { delta: 1.0 }, 0, n, s).unwrap();
        let mut last = f64::INFINITY;
        for beta in [0.0, 0.5, 1.0, 2.0, 4.0, 8.0] {
            let m = RateModel::new(alpha, beta, u.clone(), f64::INFINITY).unwrap();
            let p = build_finite_volume(&env, &m, n, 1e-12, EdgeSet::Full).unwrap();
            // omitted pairs only multiply with beta, so a cut ring stays cut
            if !p.is_connected() {
                break;
            }
            let d = solve_corrector(&p, 1e-12).unwrap().d_n;
            // a relative residual fixes D_N only to a fraction of the uncorrected objective
            let slack = 1e-9 * p.objective(&vec![0.0; n]);
            prop_assert!(d <= last + slack, "beta {beta}: {d} > {last}");
            last = d;
        }
    }
}

#[test]
fn cross_method_ordering_at_alpha_one() {
    let law = SpacingLaw::Exponential { lambda: 2.0 };
    let energy = EnergyLaw::PowerLaw { delta: 1.0 };
    for beta in [0.0, 1.0, 2.0] {
        let m = RateModel::standard(1.0, beta).unwrap();
        let s = seed::derive_seed(31, &format!("beta-{beta}"));
        let var = variational_diffusion_estimate(law, energy, &m, 400, 40, EdgeSet::Full, s).unwrap();
        let upper = test_function_upper_bound(law, energy, &m, 1.0, 200.0, 2.0, 400, s).unwrap().estimate;
        let slack = 3.0 * var.stderr.hypot(upper.stderr);
        assert!(var.value <= upper.value + slack, "beta {beta}: variational {} vs upper {}", var.value, upper.value);
        let msd = msd_diffusion_estimate(law, energy, &m, WalkKind::Vrh, 8000.0, 3000, s).unwrap();
        let gap = (msd.d_hat - var.value).abs();
        let tol = 3.0 * msd.stderr.hypot(var.stderr);
        assert!(
            gap <= tol,
            "beta {beta}: msd {} ± {} vs variational {} ± {}",
            msd.d_hat,
            msd.stderr,
            var.value,
            var.stderr
        );
    }
}

#[test]
fn energy_law_is_irrelevant_at_zero_temperature() {
    let law = SpacingLaw::Weibull { lambda: 1.0, tau: 2.0 };
    let m = RateModel::standard(0.7, 0.0).unwrap();
    let a =
        variational_diffusion_estimate(law, EnergyLaw::PowerLaw { delta: 1.0 }, &m, 200, 30, EdgeSet::Full, 8).unwrap();
    let b = variational_diffusion_estimate(law, EnergyLaw::TwoPoint { epsilon: 0.5 }, &m, 200, 30, EdgeSet::Full, 8)
        .unwrap();
    assert!((a.value - b.value).abs() <= 3.0 * a.stderr.hypot(b.stderr), "{} vs {}", a.value, b.value);
}

#[test]
fn thinned_spacings_of_poisson_points_are_exponential() {
    for nu in [0.5, 0.1, 0.02] {
        let sampler = ThinnedSpacingSampler::new(SpacingLaw::Exponential { lambda: 1.0 }, nu).unwrap();
        let draws = sample_thinned_spacing(sampler, 20_000, 3).unwrap();
        let mut rng = seed::stream(4, "exp-reference");
        let reference: Vec<f64> = Exp::new(nu).unwrap().sample_iter(&mut rng).take(20_000).collect();
        let ks = ks_distance(&draws, &reference);
        assert!(ks <= 1.95 * (2.0f64 / 20_000.0).sqrt(), "nu {nu}: KS {ks}");
    }
}

/// `E[exp(sqrt Z)]` for `Z ~ Exp(nu)` by importance sampling from `Exp(q)`,
/// with `q` putting the proposal mean at the integrand's peak `1/(4 nu^2)`.
fn thinned_root_moment(nu: f64, samples: usize, rng: &mut impl Rng) -> (f64, f64) {
    let q = (4.0 * nu * nu).min(nu);
    let proposal = Exp::new(q).unwrap();
    let terms: Vec<f64> = (0..samples)
        .map(|_| {
            let z: f64 = proposal.sample(rng);
            (z.sqrt() - (nu - q) * z).exp() * nu / q
        })
        .collect();
    mean_stderr(&terms)
}

#[test]
fn importance_sampler_agrees_with_plain_moment() {
    let nu = 0.5;
    let m = RateModel::standard(0.5, 0.0).unwrap();
    let law = SpacingLaw::Exponential { lambda: 1.0 };
    let plain = thinning_lower_bound(law, EnergyLaw::PowerLaw { delta: 1.0 }, &m, nu, 50, 2, 400_000, 6)
        .unwrap()
        .thinned_exp_moment;
    let is = thinned_root_moment(nu, 400_000, &mut seed::stream(6, "is"));
    assert!((plain.0 - is.0).abs() <= 3.0 * plain.1.hypot(is.1), "{plain:?} vs {is:?}");
}

#[test]
fn thinned_exp_moment_scaling_exponent() {
    let alpha: f64 = 0.5;
    let claimed = alpha / (1.0 - alpha);
    let mut rng = seed::stream(12, "moment-scaling");
    let pairs: Vec<(f64, f64)> = [1.0 / 16.0, 1.0 / 32.0, 1.0 / 64.0, 1.0 / 128.0]
        .iter()
        .map(|&nu| {
            let (m, se) = thinned_root_moment(nu, 1_000_000, &mut rng);
            assert!(se < 0.05 * m, "nu {nu}: relative error {}", se / m);
            ((1.0 / nu).ln(), m.ln().ln())
        })
        .collect();
    let fit = scaling_fit(&pairs).unwrap();
    assert!((fit.slope - claimed).abs() <= 0.2 * claimed, "slope {} vs {claimed}", fit.slope);
}
