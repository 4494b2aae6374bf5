//! Control-functional quadrature with a Langevin Stein kernel.
//!
//! Samples are split into `D0` (first `m`) and `D1` (the rest). A kernel
//! surrogate fitted on `D0` integrates to a known value under `p`; the residual
//! is averaged over `D1`. The estimate is linear in the function values, so it
//! is exposed as a weight vector that sums to one.

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::stats::{linear_fit, median};
use crate::util::{derive_seed, rng_for, Rng};

pub const DEFAULT_RIDGE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub enum Density {
    StandardNormal { dim: usize },
    /// Isotropic Gaussian mixture with a shared component standard deviation.
    Mixture {
        weights: Vec<f64>,
        means: Vec<Vec<f64>>,
        std: f64,
    },
}

impl Density {
    pub fn dim(&self) -> usize {
        match self {
            Density::StandardNormal { dim } => *dim,
            Density::Mixture { means, .. } => means.first().map_or(0, Vec::len),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Density::StandardNormal { dim } if *dim >= 1 => Ok(()),
            Density::Mixture { weights, means, std }
                if !weights.is_empty()
                    && weights.len() == means.len()
                    && weights.iter().all(|w| *w > 0.0)
                    && *std > 0.0
                    && means.iter().all(|m| !m.is_empty() && m.len() == means[0].len()) =>
            {
                Ok(())
            }
            _ => Err(Error::invalid("cfquad", "malformed density")),
        }
    }

    /// `∇ log p(x)`.
    pub fn score(&self, x: &[f64]) -> Vec<f64> {
        match self {
            Density::StandardNormal { .. } => x.iter().map(|v| -v).collect(),
            Density::Mixture { weights, means, std } => {
                let s2 = std * std;
                let logs: Vec<f64> = weights
                    .iter()
                    .zip(means)
                    .map(|(w, m)| w.ln() - sq_dist(x, m) / (2.0 * s2))
                    .collect();
                let top = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let resp: Vec<f64> = logs.iter().map(|l| (l - top).exp()).collect();
                let z: f64 = resp.iter().sum();
                let mut g = vec![0.0; x.len()];
                for (r, m) in resp.iter().zip(means) {
                    for d in 0..x.len() {
                        g[d] -= r / z * (x[d] - m[d]) / s2;
                    }
                }
                g
            }
        }
    }

    pub fn sample(&self, rng: &mut Rng) -> Vec<f64> {
        match self {
            Density::StandardNormal { dim } => (0..*dim).map(|_| StandardNormal.sample(rng)).collect(),
            Density::Mixture { weights, means, std } => {
                let total: f64 = weights.iter().sum();
                let mut u = rng.gen_range(0.0..total);
                let mut c = weights.len() - 1;
                for (i, w) in weights.iter().enumerate() {
                    if u < *w {
                        c = i;
                        break;
                    }
                    u -= w;
                }
                means[c]
                    .iter()
                    .map(|m| {
                        let e: f64 = StandardNormal.sample(rng);
                        m + std * e
                    })
                    .collect()
            }
        }
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Gaussian RBF `κ(x, y) = exp(−‖x − y‖² / 2ℓ²)`.
pub fn rbf(x: &[f64], y: &[f64], ell: f64) -> f64 {
    (-sq_dist(x, y) / (2.0 * ell * ell)).exp()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SteinTarget {
    pub density: Density,
    pub lengthscale: f64,
    pub ridge: f64,
}

impl SteinTarget {
    pub fn new(density: Density, lengthscale: f64, ridge: f64) -> Result<Self> {
        density.validate()?;
        if !(lengthscale > 0.0 && lengthscale.is_finite()) {
            return Err(Error::invalid("cfquad", "lengthscale must be positive"));
        }
        if !(ridge >= 0.0) {
            return Err(Error::invalid("cfquad", "ridge must be non-negative"));
        }
        Ok(SteinTarget {
            density,
            lengthscale,
            ridge,
        })
    }

    /// Langevin Stein kernel built from the RBF and the target score.
    pub fn stein_kernel(&self, x: &[f64], y: &[f64]) -> f64 {
        self.stein_kernel_with_scores(x, y, &self.density.score(x), &self.density.score(y))
    }

    fn stein_kernel_with_scores(&self, x: &[f64], y: &[f64], ux: &[f64], uy: &[f64]) -> f64 {
        let l2 = self.lengthscale * self.lengthscale;
        let d = x.len() as f64;
        let r2 = sq_dist(x, y);
        let k = (-r2 / (2.0 * l2)).exp();
        let mut t = d / l2 - r2 / (l2 * l2);
        for i in 0..x.len() {
            let r = x[i] - y[i];
            // ∇ₓκ·u(y) + ∇ᵧκ·u(x) + κ u(x)·u(y), with κ factored out
            t += -r / l2 * uy[i] + r / l2 * ux[i] + ux[i] * uy[i];
        }
        k * t
    }

    fn gram(&self, a: &[Vec<f64>], ua: &[Vec<f64>], b: &[Vec<f64>], ub: &[Vec<f64>]) -> DMatrix<f64> {
        DMatrix::from_fn(a.len(), b.len(), |i, j| {
            self.stein_kernel_with_scores(&a[i], &b[j], &ua[i], &ub[j])
        })
    }
}

/// Split point `m = ⌈N/2⌉`.
pub fn default_split(n: usize) -> usize {
    n.div_ceil(2)
}

/// Median pairwise Euclidean distance.
pub fn median_heuristic(xs: &[Vec<f64>]) -> f64 {
    let mut d = Vec::with_capacity(xs.len() * xs.len().saturating_sub(1) / 2);
    for i in 0..xs.len() {
        for j in i + 1..xs.len() {
            d.push(sq_dist(&xs[i], &xs[j]).sqrt());
        }
    }
    median(&d)
}

struct Split {
    /// Cholesky factor of `K0 + λ m I`.
    chol: Cholesky<f64, nalgebra::Dyn>,
    k10: DMatrix<f64>,
    m: usize,
    n1: usize,
}

fn prepare(samples: &[Vec<f64>], m: usize, target: &SteinTarget) -> Result<Split> {
    let n = samples.len();
    if n < 4 {
        return Err(Error::invalid("cfquad", "need at least 4 samples"));
    }
    if m == 0 || m >= n {
        return Err(Error::invalid("cfquad", format!("split {m} must satisfy 1 <= m < {n}")));
    }
    let dim = target.density.dim();
    if samples.iter().any(|x| x.len() != dim || x.iter().any(|v| !v.is_finite())) {
        return Err(Error::invalid("cfquad", "samples must be finite points of the target dimension"));
    }
    let scores: Vec<Vec<f64>> = samples.iter().map(|x| target.density.score(x)).collect();
    let (d0, d1) = samples.split_at(m);
    let (u0, u1) = scores.split_at(m);
    let mut a = target.gram(d0, u0, d0, u0);
    for i in 0..m {
        a[(i, i)] += target.ridge * m as f64;
    }
    let chol = Cholesky::new(a).ok_or_else(|| Error::Linalg {
        module: "cfquad",
        msg: "kernel system is not positive definite; increase the ridge".into(),
    })?;
    let k10 = target.gram(d1, u1, d0, u0);
    Ok(Split { chol, k10, m, n1: n - m })
}

/// Quadrature weights over all samples, `D0` first.
pub fn cf_weights(samples: &[Vec<f64>], m: usize, target: &SteinTarget) -> Result<DVector<f64>> {
    let s = prepare(samples, m, target)?;
    let n1 = s.n1 as f64;
    let ones0 = DVector::from_element(s.m, 1.0);
    let ones1 = DVector::from_element(s.n1, 1.0);
    let r = s.chol.solve(&ones0);
    let u0 = &r / r.sum();
    let q = s.chol.solve(&s.k10.tr_mul(&ones1));
    let c = ones1.dot(&(&s.k10 * &r)) / n1;
    let w0 = -q / n1 + u0 * c;
    let mut w = DVector::from_element(samples.len(), 1.0 / n1);
    w.rows_mut(0, s.m).copy_from(&w0);
    if !w.iter().all(|v| v.is_finite()) {
        return Err(Error::non_finite("cfquad", "quadrature weights"));
    }
    Ok(w)
}

/// The estimator evaluated directly from its surrogate, without forming weights.
pub fn cf_estimate_direct(samples: &[Vec<f64>], f: &[f64], m: usize, target: &SteinTarget) -> Result<f64> {
    if f.len() != samples.len() {
        return Err(Error::shape("cfquad", "one function value per sample"));
    }
    let s = prepare(samples, m, target)?;
    let f0 = DVector::from_column_slice(&f[..s.m]);
    let f1 = DVector::from_column_slice(&f[s.m..]);
    let ones0 = DVector::from_element(s.m, 1.0);
    let ones1 = DVector::from_element(s.n1, 1.0);
    let a_f0 = s.chol.solve(&f0);
    let a_1 = s.chol.solve(&ones0);
    let mu0 = ones0.dot(&a_f0) / ones0.dot(&a_1);
    let fhat1 = &s.k10 * &a_f0 + (&ones1 - &s.k10 * &a_1) * mu0;
    Ok((f1 - fhat1).sum() / s.n1 as f64 + mu0)
}

pub fn cf_estimate(weights: &DVector<f64>, f: &[f64]) -> Result<f64> {
    if f.len() != weights.len() {
        return Err(Error::shape("cfquad", "one function value per weight"));
    }
    Ok(weights.iter().zip(f).map(|(w, v)| w * v).sum())
}

/// Componentwise estimates for a vector-valued function (`f` has one row per sample).
pub fn cf_estimate_vector(weights: &DVector<f64>, f: &DMatrix<f64>) -> Result<DVector<f64>> {
    if f.nrows() != weights.len() {
        return Err(Error::shape("cfquad", "one function row per weight"));
    }
    Ok(f.tr_mul(weights))
}

#[derive(Debug, Clone, PartialEq)]
pub struct RatePoint {
    pub n: usize,
    pub cf_err: f64,
    pub mc_err: f64,
    pub trials: usize,
    /// Largest `|Σw − 1|` seen at this size.
    pub max_weight_sum_dev: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RateReport {
    pub points: Vec<RatePoint>,
    pub cf_slope: f64,
    pub mc_slope: f64,
}

impl RateReport {
    /// `N,cf_err,mc_err,trials` rows followed by a `slope` footer row.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let io = |e: csv::Error| Error::Io(std::io::Error::other(e));
        w.write_record(["N", "cf_err", "mc_err", "trials"]).map_err(io)?;
        for p in &self.points {
            w.write_record([
                p.n.to_string(),
                p.cf_err.to_string(),
                p.mc_err.to_string(),
                p.trials.to_string(),
            ])
            .map_err(io)?;
        }
        let trials = self.points.first().map_or(0, |p| p.trials);
        w.write_record([
            "slope".to_string(),
            self.cf_slope.to_string(),
            self.mc_slope.to_string(),
            trials.to_string(),
        ])
        .map_err(io)?;
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RateSettings {
    pub grid: Vec<usize>,
    pub trials: usize,
    /// `None` selects the median heuristic on `D0` per trial.
    pub lengthscale: Option<f64>,
    pub ridge: f64,
    pub seed: u64,
}

/// Mean absolute error of CF and plain Monte Carlo across trials and sizes.
pub fn rate_experiment<F>(density: &Density, f: F, truth: f64, settings: &RateSettings) -> Result<RateReport>
where
    F: Fn(&[f64]) -> f64,
{
    density.validate()?;
    if settings.grid.len() < 2 || settings.trials == 0 {
        return Err(Error::invalid("cfquad", "need at least 2 sizes and 1 trial"));
    }
    let mut points = Vec::new();
    for &n in &settings.grid {
        let (mut cf, mut mc, mut dev) = (0.0, 0.0, 0.0f64);
        for t in 0..settings.trials {
            let mut rng = rng_for(derive_seed(settings.seed, n as u64), t as u64);
            let xs: Vec<Vec<f64>> = (0..n).map(|_| density.sample(&mut rng)).collect();
            let fx: Vec<f64> = xs.iter().map(|x| f(x)).collect();
            let m = default_split(n);
            let ell = match settings.lengthscale {
                Some(l) => l,
                None => median_heuristic(&xs[..m]),
            };
            let target = SteinTarget::new(density.clone(), ell, settings.ridge)?;
            let w = cf_weights(&xs, m, &target)?;
            dev = dev.max((w.sum() - 1.0).abs());
            cf += (cf_estimate(&w, &fx)? - truth).abs();
            mc += (fx.iter().sum::<f64>() / n as f64 - truth).abs();
        }
        let k = settings.trials as f64;
        points.push(RatePoint {
            n,
            cf_err: cf / k,
            mc_err: mc / k,
            trials: settings.trials,
            max_weight_sum_dev: dev,
        });
    }
    let ln_n: Vec<f64> = points.iter().map(|p| (p.n as f64).ln()).collect();
    let ln_cf: Vec<f64> = points.iter().map(|p| p.cf_err.ln()).collect();
    let ln_mc: Vec<f64> = points.iter().map(|p| p.mc_err.ln()).collect();
    Ok(RateReport {
        cf_slope: linear_fit(&ln_n, &ln_cf).0,
        mc_slope: linear_fit(&ln_n, &ln_mc).0,
        points,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::util::rng_from;
    use proptest::prelude::*;

    fn normal_target(ell: f64) -> SteinTarget {
        SteinTarget::new(Density::StandardNormal { dim: 1 }, ell, DEFAULT_RIDGE).unwrap()
    }

    fn normal_samples(n: usize, dim: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = rng_from(seed);
        let d = Density::StandardNormal { dim };
        (0..n).map(|_| d.sample(&mut rng)).collect()
    }

    /// Trapezoid rule over `[-12, 12]`.
    fn integrate(f: impl Fn(f64) -> f64) -> f64 {
        let n = 24_000;
        let h = 24.0 / n as f64;
        (0..=n)
            .map(|i| {
                let x = -12.0 + i as f64 * h;
                let w = if i == 0 || i == n { 0.5 } else { 1.0 };
                w * f(x)
            })
            .sum::<f64>()
            * h
    }

    fn normal_pdf(y: f64) -> f64 {
        (-0.5 * y * y).exp() / (2.0 * std::f64::consts::PI).sqrt()
    }

    #[test]
    fn stein_kernel_has_zero_mean_under_p() {
        let t = normal_target(0.8);
        for x in [-1.5, 0.0, 0.3, 2.0] {
            let v = integrate(|y| t.stein_kernel(&[x], &[y]) * normal_pdf(y));
            assert!(v.abs() < 1e-4, "x={x}: {v}");
        }
    }

    #[test]
    fn stein_kernel_zero_mean_for_mixture() {
        let mix = Density::Mixture {
            weights: vec![0.3, 0.7],
            means: vec![vec![-1.0], vec![1.5]],
            std: 0.7,
        };
        let pdf = |y: f64| {
            let g = |m: f64| (-(y - m) * (y - m) / (2.0 * 0.49)).exp() / (0.7 * (2.0 * std::f64::consts::PI).sqrt());
            0.3 * g(-1.0) + 0.7 * g(1.5)
        };
        let t = SteinTarget::new(mix, 0.9, DEFAULT_RIDGE).unwrap();
        for x in [-1.0, 0.5] {
            let v = integrate(|y| t.stein_kernel(&[x], &[y]) * pdf(y));
            assert!(v.abs() < 1e-4, "x={x}: {v}");
        }
    }

    #[test]
    fn stein_kernel_terms_match_finite_differences() {
        // Rebuild k0 from finite differences of κ and compare.
        let t = SteinTarget::new(Density::StandardNormal { dim: 2 }, 0.7, 0.0).unwrap();
        let x = [0.3, -0.4];
        let y = [-0.2, 0.5];
        let e = 1e-4;
        let kap = |a: &[f64], b: &[f64]| rbf(a, b, 0.7);
        let shift = |p: &[f64; 2], i: usize, h: f64| {
            let mut q = *p;
            q[i] += h;
            q
        };
        let mut total = 0.0;
        let (ux, uy) = ([-x[0], -x[1]], [-y[0], -y[1]]);
        for i in 0..2 {
            let gx = (kap(&shift(&x, i, e), &y) - kap(&shift(&x, i, -e), &y)) / (2.0 * e);
            let gy = (kap(&x, &shift(&y, i, e)) - kap(&x, &shift(&y, i, -e))) / (2.0 * e);
            let gxy = (kap(&shift(&x, i, e), &shift(&y, i, e)) - kap(&shift(&x, i, e), &shift(&y, i, -e))
                - kap(&shift(&x, i, -e), &shift(&y, i, e))
                + kap(&shift(&x, i, -e), &shift(&y, i, -e)))
                / (4.0 * e * e);
            total += gxy + gx * uy[i] + gy * ux[i];
        }
        total += kap(&x, &y) * (ux[0] * uy[0] + ux[1] * uy[1]);
        let exact = t.stein_kernel(&x, &y);
        assert!(((total - exact) / exact).abs() < 1e-6, "{total} vs {exact}");
    }

    #[test]
    fn weights_sum_to_one_and_match_direct_path() {
        for (n, seed) in [(16, 1), (33, 2), (128, 3)] {
            let xs = normal_samples(n, 1, seed);
            let m = default_split(n);
            let t = normal_target(median_heuristic(&xs[..m]));
            let w = cf_weights(&xs, m, &t).unwrap();
            assert!((w.sum() - 1.0).abs() < 1e-8);
            let fns: [fn(f64) -> f64; 10] = [
                |x| x * x,
                |x| x,
                |x| x.sin(),
                |x| x.cos(),
                |x| x.powi(3),
                |x| x.abs(),
                |x| (0.5 * x).exp(),
                |x| 1.0 / (1.0 + x * x),
                |x| x.tanh(),
                |x| if x > 0.0 { 1.0 } else { 0.0 },
            ];
            for f in fns {
                let fx: Vec<f64> = xs.iter().map(|x| f(x[0])).collect();
                let via_w = cf_estimate(&w, &fx).unwrap();
                let direct = cf_estimate_direct(&xs, &fx, m, &t).unwrap();
                assert!((via_w - direct).abs() < 1e-10, "{via_w} vs {direct}");
            }
        }
    }

    #[test]
    fn constants_are_exact() {
        let xs = normal_samples(40, 2, 4);
        let t = SteinTarget::new(Density::StandardNormal { dim: 2 }, 1.0, DEFAULT_RIDGE).unwrap();
        let w = cf_weights(&xs, 20, &t).unwrap();
        assert!((cf_estimate(&w, &[5.0; 40]).unwrap() - 5.0).abs() < 1e-8);
        let f = DMatrix::from_fn(40, 2, |_, j| [5.0, -2.0][j]);
        let v = cf_estimate_vector(&w, &f).unwrap();
        assert!((v[0] - 5.0).abs() < 1e-8 && (v[1] + 2.0).abs() < 1e-8);
    }

    #[test]
    fn antisymmetric_samples_give_zero_for_odd_function() {
        let base = normal_samples(16, 1, 5);
        let xs: Vec<Vec<f64>> = base.iter().cloned().chain(base.iter().map(|x| vec![-x[0]])).collect();
        // Interleave so each half holds ± pairs.
        let mut inter = Vec::new();
        for i in 0..16 {
            inter.push(xs[i].clone());
            inter.push(xs[i + 16].clone());
        }
        let t = normal_target(1.0);
        let fx: Vec<f64> = inter.iter().map(|x| x[0]).collect();
        let w = cf_weights(&inter, 16, &t).unwrap();
        assert!(cf_estimate(&w, &fx).unwrap().abs() < 1e-10);
    }

    #[test]
    fn second_moment_beats_monte_carlo_at_256() {
        let xs = normal_samples(256, 1, 6);
        let m = default_split(256);
        let t = normal_target(median_heuristic(&xs[..m]));
        let fx: Vec<f64> = xs.iter().map(|x| x[0] * x[0]).collect();
        let cf = cf_estimate(&cf_weights(&xs, m, &t).unwrap(), &fx).unwrap();
        let mc = fx.iter().sum::<f64>() / 256.0;
        assert!((cf - 1.0).abs() < (mc - 1.0).abs(), "cf {cf} mc {mc}");
    }

    #[test]
    fn rejects_bad_inputs() {
        let xs = normal_samples(8, 1, 7);
        let t = normal_target(1.0);
        assert!(cf_weights(&xs[..3], 1, &t).is_err());
        assert!(cf_weights(&xs, 0, &t).is_err());
        assert!(cf_weights(&xs, 8, &t).is_err());
        assert!(SteinTarget::new(Density::StandardNormal { dim: 1 }, 0.0, 1e-6).is_err());
        assert!(SteinTarget::new(Density::StandardNormal { dim: 1 }, 1.0, -1.0).is_err());
        let bad = vec![vec![0.0]; 8];
        let singular = SteinTarget::new(Density::StandardNormal { dim: 1 }, 1.0, 0.0).unwrap();
        assert!(matches!(cf_weights(&bad, 4, &singular), Err(Error::Linalg { .. })));
    }

    #[test]
    fn rate_csv_has_footer() {
        let s = RateSettings {
            grid: vec![8, 16],
            trials: 3,
            lengthscale: None,
            ridge: DEFAULT_RIDGE,
            seed: 0,
        };
        let r = rate_experiment(&Density::StandardNormal { dim: 1 }, |x| x[0] * x[0], 1.0, &s).unwrap();
        let csv = r.to_csv().unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "N,cf_err,mc_err,trials");
        assert_eq!(lines.len(), 4);
        assert!(lines[3].starts_with("slope,"));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn stein_kernel_symmetric(x in -3.0f64..3.0, y in -3.0f64..3.0, ell in 0.2f64..3.0) {
            let t = normal_target(ell);
            prop_assert_eq!(t.stein_kernel(&[x], &[y]), t.stein_kernel(&[y], &[x]));
        }

        #[test]
        fn weight_sum_is_one(seed in 0u64..1000, n in 6usize..80, ell in 0.3f64..3.0) {
            let xs = normal_samples(n, 1, seed);
            let w = cf_weights(&xs, default_split(n), &normal_target(ell)).unwrap();
            prop_assert!((w.sum() - 1.0).abs() < 1e-8);
        }
    }
}
