//! Finite-box generators, spectral gaps and Cheeger constants.

use std::cmp::Ordering;
use std::fmt::Write as _;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, HopError, Result};
use crate::linalg::{lanczos_largest, BandCholesky};
use crate::par;
use crate::pointproc::Environment;

/// Largest box handled by the dense eigensolver in [`GapMethod::Auto`].
pub const DENSE_LIMIT: usize = 2000;

/// Largest box accepted by [`cheeger_bruteforce`].
pub const BRUTEFORCE_LIMIT: usize = 22;

/// Iterative gap tolerance.
pub const ITERATIVE_TOL: f64 = 1e-8;

/// Pairs with `|x - y|^alpha` above this are dropped by the iterative solver.
const BAND_CUTOFF: f64 = 60.0;

/// Points of one environment inside `[-L/2, L/2]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FiniteBox {
    pub points: Vec<f64>,
    pub l: f64,
    pub alpha: f64,
}

impl FiniteBox {
    pub fn new(points: Vec<f64>, l: f64, alpha: f64) -> Result<Self> {
        if !(alpha > 0.0) || !(l >= 0.0) {
            return invalid("box needs alpha > 0 and L >= 0");
        }
        if points.windows(2).any(|w| !(w[1] > w[0])) {
            return invalid("box points must be strictly increasing");
        }
        Ok(Self { points, l, alpha })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    #[inline]
    pub fn weight(&self, i: usize, j: usize) -> f64 {
        if i == j {
            0.0
        } else {
            (-(self.points[i] - self.points[j]).abs().powf(self.alpha)).exp()
        }
    }

    fn need(&self, k: usize) -> Result<()> {
        if self.len() < k {
            Err(HopError::TooFewPoints { needed: k, got: self.len() })
        } else {
            Ok(())
        }
    }

    fn weights(&self) -> Vec<f64> {
        let n = self.len();
        let mut w = vec![0.0; n * n];
        for i in 0..n {
            for j in (i + 1)..n {
                let v = self.weight(i, j);
                w[i * n + j] = v;
                w[j * n + i] = v;
            }
        }
        w
    }
}

/// `xi ∩ [-L/2, L/2]`.
pub fn restrict_to_box(env: &Environment, l: f64, alpha: f64) -> Result<FiniteBox> {
    let half = 0.5 * l;
    if env.left_edge() > -half || env.right_edge() < half {
        return Err(HopError::WindowNotCovered { lo: -half, hi: half });
    }
    let points = env.positions().iter().copied().filter(|x| x.abs() <= half).collect();
    FiniteBox::new(points, l, alpha)
}

/// Largest spacing between consecutive points of the box.
pub fn zeta_max_gap(b: &FiniteBox) -> Result<f64> {
    b.need(2)?;
    Ok(b.points.windows(2).map(|w| w[1] - w[0]).fold(0.0, f64::max))
}

/// Generator with off-diagonal entries `exp(-|x - y|^alpha)` and zero row sums.
pub fn generator_matrix(b: &FiniteBox) -> Result<DMatrix<f64>> {
    b.need(2)?;
    let n = b.len();
    let w = b.weights();
    let mut m = DMatrix::from_row_slice(n, n, &w);
    for i in 0..n {
        let s: f64 = (0..n).map(|j| w[i * n + j]).sum();
        m[(i, i)] = -s;
    }
    Ok(m)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GapMethod {
    Dense,
    Iterative,
    /// Dense up to [`DENSE_LIMIT`] points, iterative beyond.
    Auto,
}

/// Smallest nonzero eigenvalue of `-L`.
pub fn spectral_gap(b: &FiniteBox, method: GapMethod) -> Result<f64> {
    b.need(2)?;
    match method {
        GapMethod::Dense => gap_dense(b),
        GapMethod::Iterative => gap_iterative(b),
        GapMethod::Auto if b.len() <= DENSE_LIMIT => gap_dense(b),
        GapMethod::Auto => gap_iterative(b),
    }
}

fn gap_dense(b: &FiniteBox) -> Result<f64> {
    let neg = -generator_matrix(b)?;
    let mut ev: Vec<f64> = neg.symmetric_eigenvalues().iter().copied().collect();
    ev.sort_by(|a, b| a.total_cmp(b));
    Ok(ev[1])
}

/// Lanczos on the pseudo-inverse of `-L` restricted to mean-zero vectors;
/// each application is a band Cholesky solve of the Laplacian grounded at point 0.
fn gap_iterative(b: &FiniteBox) -> Result<f64> {
    let n = b.len();
    if n == 2 {
        return gap_dense(b);
    }
    let reach = BAND_CUTOFF.powf(1.0 / b.alpha);
    let mut w = 1;
    let mut deg = vec![0.0; n];
    for i in 0..n {
        for j in (i + 1)..n {
            if b.points[j] - b.points[i] > reach {
                break;
            }
            w = w.max(j - i);
            let c = b.weight(i, j);
            deg[i] += c;
            deg[j] += c;
        }
    }
    // grounded system on points 1..n, stored as the lower band
    let m = n - 1;
    let width = w + 1;
    let mut lower = vec![0.0; m * width];
    for r in 0..m {
        let i = r + 1;
        lower[r * width + w] = deg[i];
        for k in 1..=w.min(r) {
            let j = i - k;
            if b.points[i] - b.points[j] <= reach {
                lower[r * width + (w - k)] = -b.weight(i, j);
            }
        }
    }
    let chol = BandCholesky::factor(m, w, lower)?;
    let mean_free = |v: &mut [f64]| {
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        v.iter_mut().for_each(|x| *x -= mean);
    };
    let apply = |v: &[f64], out: &mut [f64]| {
        let mut y = v[1..].to_vec();
        chol.solve_in_place(&mut y);
        out[0] = 0.0;
        out[1..].copy_from_slice(&y);
        mean_free(out);
    };
    let start: Vec<f64> =
        b.points.iter().enumerate().map(|(i, x)| x + 1e-3 * ((i as f64) * 0.618_033_988_749_895).fract()).collect();
    let theta = lanczos_largest(n, apply, mean_free, start, ITERATIVE_TOL, n.min(400))?;
    Ok(1.0 / theta)
}

/// `I_U = (1/#U) sum_{x in U, y not in U} exp(-|x - y|^alpha)`.
pub fn isoperimetric_ratio(b: &FiniteBox, subset: &[usize]) -> f64 {
    let mut inside = vec![false; b.len()];
    for &i in subset {
        inside[i] = true;
    }
    let mut s = 0.0;
    for &i in subset {
        for (j, &inj) in inside.iter().enumerate() {
            if !inj {
                s += b.weight(i, j);
            }
        }
    }
    s / subset.len() as f64
}

/// Cheeger value with the subset that attains it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cheeger {
    pub value: f64,
    /// Sorted point indices of the optimizing subset.
    pub subset: Vec<usize>,
}

fn mask_indices(mask: u32, n: usize) -> Vec<usize> {
    (0..n).filter(|&i| mask >> i & 1 == 1).collect()
}

const TIE: f64 = 1e-12;

/// `Less` when candidate `(v, m)` should replace the incumbent `(bv, bm)`.
fn compare(v: f64, m: u32, bv: f64, bm: u32, n: usize) -> Ordering {
    if v < bv * (1.0 - TIE) {
        Ordering::Less
    } else if v <= bv * (1.0 + TIE) {
        mask_indices(m, n).cmp(&mask_indices(bm, n))
    } else {
        Ordering::Greater
    }
}

/// Exact `Phi_L` by enumerating all subsets with `1 <= #U <= #xi_L / 2`.
///
/// Subsets are visited in Gray-code order in fixed chunks, keeping running sums of
/// the weights into `U`. Ties within a relative `1e-12` go to the
/// lexicographically smallest index list.
pub fn cheeger_bruteforce(b: &FiniteBox) -> Result<Cheeger> {
    b.need(2)?;
    let n = b.len();
    if n > BRUTEFORCE_LIMIT {
        return Err(HopError::TooManyPoints { max: BRUTEFORCE_LIMIT, got: n });
    }
    let w = b.weights();
    let deg: Vec<f64> = (0..n).map(|i| (0..n).map(|j| w[i * n + j]).sum()).collect();
    let half = n / 2;
    let total: u64 = 1 << n;
    let chunk_bits = n.saturating_sub(6).max(1).min(n);
    let chunk: u64 = 1 << chunk_bits;
    let chunks = (total / chunk) as usize;
    let best = par::map_indexed(chunks, |c| {
        let start = c as u64 * chunk;
        let gray = |k: u64| (k ^ (k >> 1)) as u32;
        let mut mask = gray(start);
        let mut into = vec![0.0; n];
        let mut size = 0usize;
        let mut boundary = 0.0;
        for i in 0..n {
            if mask >> i & 1 == 1 {
                size += 1;
                for j in 0..n {
                    into[j] += w[j * n + i];
                }
            }
        }
        for i in 0..n {
            if mask >> i & 1 == 1 {
                boundary += deg[i] - into[i];
            }
        }
        let mut local: Option<(f64, u32)> = None;
        let consider = |mask: u32, size: usize, boundary: f64, local: &mut Option<(f64, u32)>| {
            if size == 0 || size > half {
                return;
            }
            let v = boundary / size as f64;
            match *local {
                Some((bv, bm)) if compare(v, mask, bv, bm, n) != Ordering::Less => {}
                _ => *local = Some((v, mask)),
            }
        };
        consider(mask, size, boundary, &mut local);
        for k in (start + 1)..(start + chunk) {
            let bit = k.trailing_zeros() as usize;
            let adding = mask >> bit & 1 == 0;
            if adding {
                boundary += deg[bit] - 2.0 * into[bit];
                size += 1;
                for j in 0..n {
                    into[j] += w[j * n + bit];
                }
            } else {
                for j in 0..n {
                    into[j] -= w[j * n + bit];
                }
                boundary -= deg[bit] - 2.0 * into[bit];
                size -= 1;
            }
            mask ^= 1 << bit;
            consider(mask, size, boundary, &mut local);
        }
        local
    });
    let mut winner: Option<(f64, u32)> = None;
    for (v, m) in best.into_iter().flatten() {
        match winner {
            Some((bv, bm)) if compare(v, m, bv, bm, n) != Ordering::Less => {}
            _ => winner = Some((v, m)),
        }
    }
    let (_, mask) = winner.expect("a box with two points has a singleton subset");
    let subset = mask_indices(mask, n);
    Ok(Cheeger { value: isoperimetric_ratio(b, &subset), subset })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CutSide {
    Left,
    Right,
}

/// Best interval cut: `U` is a prefix or suffix of the box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntervalCut {
    pub value: f64,
    pub side: CutSide,
    /// Number of points in `U`.
    pub size: usize,
    /// Midpoint between the last point of `U` and the first point outside it.
    pub cut: f64,
}

impl IntervalCut {
    pub fn subset(&self, n: usize) -> Vec<usize> {
        match self.side {
            CutSide::Left => (0..self.size).collect(),
            CutSide::Right => (n - self.size..n).collect(),
        }
    }
}

/// Minimum of `I_U` over prefixes and suffixes with `#U <= #xi_L / 2`.
pub fn cheeger_interval_cut(b: &FiniteBox) -> Result<IntervalCut> {
    b.need(2)?;
    let n = b.len();
    let half = n / 2;
    // cross[k] = total weight between the first k points and the rest.
    // into[j] accumulates the weight from the first k points to j; only
    // nonnegative terms are added, so tiny cuts keep full relative precision.
    let mut cross = vec![0.0; n + 1];
    let mut into = vec![0.0; n];
    for k in 1..n {
        let i = k - 1;
        for (j, w) in into.iter_mut().enumerate().skip(k) {
            *w += b.weight(i, j);
        }
        cross[k] = into[k..].iter().sum();
    }
    let mut best: Option<IntervalCut> = None;
    let mut offer = |c: IntervalCut| {
        if best.as_ref().is_none_or(|b| c.value < b.value * (1.0 - TIE)) {
            best = Some(c);
        }
    };
    for k in 1..=half {
        offer(IntervalCut {
            value: cross[k] / k as f64,
            side: CutSide::Left,
            size: k,
            cut: 0.5 * (b.points[k - 1] + b.points[k]),
        });
        offer(IntervalCut {
            value: cross[n - k] / k as f64,
            side: CutSide::Right,
            size: k,
            cut: 0.5 * (b.points[n - k - 1] + b.points[n - k]),
        });
    }
    Ok(best.expect("at least one admissible cut"))
}

/// One row of a spectral scan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectralResult {
    pub law: String,
    pub alpha: f64,
    pub l: f64,
    pub seed: u64,
    pub n_points: usize,
    pub zeta: f64,
    pub gap: f64,
    pub gap_method: GapMethod,
    pub cheeger: f64,
    /// `"bruteforce"` or `"interval_cut"`.
    pub cheeger_method: String,
    pub subset: Vec<usize>,
}

impl SpectralResult {
    pub const CSV_HEADER: &'static str = "law,alpha,L,seed,n_points,zeta,gap,cheeger,cheeger_method";

    /// `gap^{-1}`.
    pub fn relaxation_time(&self) -> f64 {
        1.0 / self.gap
    }

    pub fn csv_row(&self) -> String {
        let mut s = String::new();
        let _ = write!(
            s,
            "\"{}\",{:.16e},{:.16e},{},{},{:.16e},{:.16e},{:.16e},{}",
            self.law,
            self.alpha,
            self.l,
            self.seed,
            self.n_points,
            self.zeta,
            self.gap,
            self.cheeger,
            self.cheeger_method
        );
        s
    }
}

/// Gap, `zeta_L` and a Cheeger value for one box; brute force when small enough.
pub fn analyze_box(b: &FiniteBox, law: &str, seed: u64, method: GapMethod) -> Result<SpectralResult> {
    let gap = spectral_gap(b, method)?;
    let zeta = zeta_max_gap(b)?;
    let (cheeger, cheeger_method, subset) = if b.len() <= BRUTEFORCE_LIMIT {
        let c = cheeger_bruteforce(b)?;
        (c.value, "bruteforce", c.subset)
    } else {
        let c = cheeger_interval_cut(b)?;
        (c.value, "interval_cut", c.subset(b.len()))
    };
    Ok(SpectralResult {
        law: law.to_string(),
        alpha: b.alpha,
        l: b.l,
        seed,
        n_points: b.len(),
        zeta,
        gap,
        gap_method: method,
        cheeger,
        cheeger_method: cheeger_method.into(),
        subset,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pointproc::{build_environment, EnergyLaw, SpacingLaw};
    use std::f64::consts::E;

    fn boxed(points: &[f64], alpha: f64) -> FiniteBox {
        FiniteBox::new(points.to_vec(), 10.0, alpha).unwrap()
    }

    #[test]
    fn restriction() {
        let env = build_environment(SpacingLaw::Deterministic { a: 1.0 }, EnergyLaw::PointMassZero, 3.0, 0).unwrap();
        let b = restrict_to_box(&env, 4.0, 1.0).unwrap();
        assert_eq!(b.points, vec![-2.0, -1.0, 0.0, 1.0, 2.0]);
        let tiny = restrict_to_box(&env, 0.5, 1.0).unwrap();
        assert_eq!(tiny.points, vec![0.0]);
        assert!(zeta_max_gap(&tiny).is_err());
        assert!(restrict_to_box(&env, 1e4, 1.0).is_err());
    }

    #[test]
    fn zeta() {
        assert_eq!(zeta_max_gap(&boxed(&[-1.0, 0.0, 2.0], 1.0)).unwrap(), 2.0);
    }

    #[test]
    fn generator_rows() {
        let b = boxed(&[-1.3, -0.2, 0.0, 0.9, 2.5], 0.7);
        let m = generator_matrix(&b).unwrap();
        for i in 0..5 {
            assert!(m.row(i).sum().abs() < 1e-14);
        }
        assert_eq!(m, m.transpose());
        let two = generator_matrix(&boxed(&[0.0, 1.5], 1.0)).unwrap();
        assert_eq!(two[(0, 1)], (-1.5f64).exp());
    }

    #[test]
    fn small_gaps() {
        let d: f64 = 1.7;
        let g = spectral_gap(&boxed(&[0.0, d], 1.0), GapMethod::Dense).unwrap();
        assert!((g - 2.0 * (-d).exp()).abs() < 1e-15);
        let g3 = spectral_gap(&boxed(&[-1.0, 0.0, 1.0], 1.0), GapMethod::Dense).unwrap();
        assert!((g3 - (1.0 / E + 2.0 / (E * E))).abs() < 1e-14);
        let g3i = spectral_gap(&boxed(&[-1.0, 0.0, 1.0], 1.0), GapMethod::Iterative).unwrap();
        assert!((g3i - g3).abs() < 1e-10);
    }

    #[test]
    fn dense_and_iterative_agree() {
        for (seed, alpha) in [(1u64, 1.0), (2, 0.5), (3, 2.0)] {
            let env = build_environment(SpacingLaw::Exponential { lambda: 1.0 }, EnergyLaw::PointMassZero, 60.0, seed)
                .unwrap();
            let mut b = restrict_to_box(&env, 200.0, alpha).unwrap_or_else(|_| {
                let pts: Vec<f64> = env.positions().to_vec();
                FiniteBox::new(pts, 200.0, alpha).unwrap()
            });
            b.points.truncate(100);
            let d = spectral_gap(&b, GapMethod::Dense).unwrap();
            let i = spectral_gap(&b, GapMethod::Iterative).unwrap();
            assert!((d - i).abs() <= 1e-8, "{d} vs {i}");
            assert!((d - i).abs() <= 1e-6 * d, "{d} vs {i}");
        }
    }

    #[test]
    fn cheeger_small() {
        let d: f64 = 0.8;
        let c = cheeger_bruteforce(&boxed(&[0.0, d], 1.5)).unwrap();
        assert!((c.value - (-d.powf(1.5)).exp()).abs() < 1e-15);
        let c3 = cheeger_bruteforce(&boxed(&[-1.0, 0.0, 1.0], 1.0)).unwrap();
        assert!((c3.value - (1.0 / E + 1.0 / (E * E))).abs() < 1e-15);
        assert_eq!(c3.subset, vec![0]);
        let cut = cheeger_interval_cut(&boxed(&[-1.0, 0.0, 1.0], 1.0)).unwrap();
        assert!((cut.value - c3.value).abs() < 1e-15);
        assert_eq!(cut.subset(3), vec![0]);
        let many: Vec<f64> = (0..23).map(f64::from).collect();
        assert!(matches!(cheeger_bruteforce(&boxed(&many, 1.0)), Err(HopError::TooManyPoints { .. })));
    }

    #[test]
    fn bruteforce_matches_naive_enumeration() {
        let b = boxed(&[-2.1, -1.7, -0.3, 0.0, 0.4, 1.9, 2.2, 3.8, 4.0], 0.8);
        let n = b.len();
        let mut best = f64::INFINITY;
        for mask in 1u32..(1 << n) {
            let s = mask_indices(mask, n);
            if s.len() <= n / 2 {
                best = best.min(isoperimetric_ratio(&b, &s));
            }
        }
        let c = cheeger_bruteforce(&b).unwrap();
        assert!((c.value - best).abs() < 1e-13 * best);
        assert!((isoperimetric_ratio(&b, &c.subset) - c.value).abs() == 0.0);
    }

    #[test]
    fn lattice_cut_is_central() {
        let pts: Vec<f64> = (-10..=10).map(f64::from).collect();
        let b = boxed(&pts, 1.0);
        let cut = cheeger_interval_cut(&b).unwrap();
        let n = b.len();
        let mut sweep = f64::INFINITY;
        for k in 1..=n / 2 {
            let prefix: Vec<usize> = (0..k).collect();
            sweep = sweep.min(isoperimetric_ratio(&b, &prefix));
        }
        assert!((cut.value - sweep).abs() < 1e-14);
        assert_eq!(cut.size, n / 2);
    }
}
