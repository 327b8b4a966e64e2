//! Oracles with call accounting: exact first-order, noisy first-order and
//! biased zeroth-order values with two-point gradient estimation.

use nalgebra::DVector;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use crate::rng::{rng_from_seed, Rng};

/// A function of one vector argument with a (sub)gradient.
pub trait Objective: Send + Sync {
    fn dim(&self) -> usize;
    fn value(&self, x: &DVector<f64>) -> f64;
    /// Gradient, or the documented subgradient selection for nonsmooth functions.
    fn gradient(&self, x: &DVector<f64>) -> DVector<f64>;
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct NoiseConfig {
    /// Gradient noise level; per-coordinate std is `sigma/sqrt(n)`.
    pub sigma: f64,
    /// Norm of the fixed gradient bias vector.
    pub bias: f64,
    /// Std of the additive value noise `xi` in zeroth-order calls.
    pub value_sigma: f64,
    /// Bound of the adversarial value perturbation.
    pub delta: f64,
    /// Seed fixing the direction of the bias vector.
    pub bias_seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct OracleCounters {
    pub value: u64,
    pub gradient: u64,
    pub stochastic_gradient: u64,
    pub zeroth: u64,
}

/// `Delta * sign(sin(sum x))`.
pub fn adversarial_noise(delta: f64, x: &DVector<f64>) -> f64 {
    if delta == 0.0 {
        return 0.0;
    }
    let s = x.sum().sin();
    if s > 0.0 {
        delta
    } else if s < 0.0 {
        -delta
    } else {
        0.0
    }
}

pub struct OracleSuite<'a> {
    f: &'a dyn Objective,
    noise: NoiseConfig,
    bias_vec: DVector<f64>,
    counters: OracleCounters,
}

impl<'a> OracleSuite<'a> {
    pub fn new(f: &'a dyn Objective, noise: NoiseConfig) -> Self {
        let n = f.dim();
        let bias_vec = if noise.bias > 0.0 {
            let u = sphere_sample(n, &mut rng_from_seed(noise.bias_seed));
            u * noise.bias
        } else {
            DVector::zeros(n)
        };
        Self { f, noise, bias_vec, counters: OracleCounters::default() }
    }

    pub fn exact(f: &'a dyn Objective) -> Self {
        Self::new(f, NoiseConfig::default())
    }

    pub fn dim(&self) -> usize {
        self.f.dim()
    }

    pub fn noise(&self) -> &NoiseConfig {
        &self.noise
    }

    pub fn counters(&self) -> OracleCounters {
        self.counters
    }

    pub fn value(&mut self, x: &DVector<f64>) -> f64 {
        self.counters.value += 1;
        self.f.value(x)
    }

    pub fn gradient(&mut self, x: &DVector<f64>) -> DVector<f64> {
        self.counters.gradient += 1;
        self.f.gradient(x)
    }

    /// Gradient plus Gaussian noise and the fixed bias. With `sigma = bias = 0`
    /// no randomness is drawn and the exact gradient is returned.
    pub fn stochastic_gradient(&mut self, x: &DVector<f64>, rng: &mut Rng) -> DVector<f64> {
        self.counters.stochastic_gradient += 1;
        let mut g = self.f.gradient(x);
        if self.noise.sigma > 0.0 {
            let s = self.noise.sigma / (g.len() as f64).sqrt();
            for v in g.iter_mut() {
                let z: f64 = StandardNormal.sample(rng);
                *v += s * z;
            }
        }
        if self.noise.bias > 0.0 {
            g += &self.bias_vec;
        }
        g
    }

    /// Draw the random argument `xi` shared by a pair of zeroth-order calls.
    pub fn draw_xi(&self, rng: &mut Rng) -> f64 {
        if self.noise.value_sigma > 0.0 {
            let z: f64 = StandardNormal.sample(rng);
            z * self.noise.value_sigma
        } else {
            0.0
        }
    }

    /// `f(x, xi) + Delta(x)` with `f(x, xi) = f(x) + xi`.
    pub fn zeroth_value_with(&mut self, x: &DVector<f64>, xi: f64) -> f64 {
        self.counters.zeroth += 1;
        self.f.value(x) + xi + adversarial_noise(self.noise.delta, x)
    }

    pub fn zeroth_value(&mut self, x: &DVector<f64>, rng: &mut Rng) -> f64 {
        let xi = self.draw_xi(rng);
        self.zeroth_value_with(x, xi)
    }
}

/// Uniform point on the unit sphere (normalised Gaussian).
pub fn sphere_sample(n: usize, rng: &mut Rng) -> DVector<f64> {
    if n == 1 {
        return DVector::from_element(1, if rng.random::<bool>() { 1.0 } else { -1.0 });
    }
    loop {
        let v = DVector::<f64>::from_fn(n, |_, _| StandardNormal.sample(rng));
        let norm = v.norm();
        if norm > 1e-300 {
            return v / norm;
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TwoPointEstimate {
    pub direction: DVector<f64>,
    pub radius: f64,
    pub estimate: DVector<f64>,
}

/// `(n/2r) (f~(x+re, xi) - f~(x-re, xi)) e` with a fresh direction.
pub fn two_point_estimate(suite: &mut OracleSuite<'_>, x: &DVector<f64>, r: f64, rng: &mut Rng) -> TwoPointEstimate {
    let e = sphere_sample(x.len(), rng);
    two_point_estimate_along(suite, x, r, e, rng)
}

/// Two-point estimate along a given unit direction.
pub fn two_point_estimate_along(
    suite: &mut OracleSuite<'_>,
    x: &DVector<f64>,
    r: f64,
    e: DVector<f64>,
    rng: &mut Rng,
) -> TwoPointEstimate {
    assert!(r > 0.0, "smoothing radius must be positive");
    let n = x.len() as f64;
    let xi = suite.draw_xi(rng);
    let plus = suite.zeroth_value_with(&(x + &e * r), xi);
    let minus = suite.zeroth_value_with(&(x - &e * r), xi);
    let estimate = &e * (n / (2.0 * r) * (plus - minus));
    TwoPointEstimate { direction: e, radius: r, estimate }
}

/// Central differences along every coordinate: `2n` zeroth-order calls.
pub fn full_finite_diff(suite: &mut OracleSuite<'_>, x: &DVector<f64>, r: f64, rng: &mut Rng) -> DVector<f64> {
    assert!(r > 0.0, "smoothing radius must be positive");
    let n = x.len();
    let mut g = DVector::zeros(n);
    for i in 0..n {
        let xi = suite.draw_xi(rng);
        let mut xp = x.clone();
        xp[i] += r;
        let mut xm = x.clone();
        xm[i] -= r;
        let plus = suite.zeroth_value_with(&xp, xi);
        let minus = suite.zeroth_value_with(&xm, xi);
        g[i] = (plus - minus) / (2.0 * r);
    }
    g
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McEstimate {
    pub mean: f64,
    pub stderr: f64,
}

/// Monte-Carlo estimate of `E_e f(x + r e)` over the unit sphere.
pub fn smoothed_value_mc(
    suite: &mut OracleSuite<'_>,
    x: &DVector<f64>,
    r: f64,
    samples: usize,
    rng: &mut Rng,
) -> McEstimate {
    let samples = samples.max(1);
    let mut sum = 0.0;
    let mut sq = 0.0;
    for _ in 0..samples {
        let e = sphere_sample(x.len(), rng);
        let v = suite.value(&(x + e * r));
        sum += v;
        sq += v * v;
    }
    let k = samples as f64;
    let mean = sum / k;
    let var = if samples > 1 { ((sq - k * mean * mean) / (k - 1.0)).max(0.0) } else { 0.0 };
    McEstimate { mean, stderr: (var / k).sqrt() }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problems::NodeFunction;
    use crate::rng::rng_from_seed;
    use nalgebra::DMatrix;
    use proptest::prelude::*;

    fn v(s: &[f64]) -> DVector<f64> {
        DVector::from_row_slice(s)
    }

    fn half_sq(n: usize) -> NodeFunction {
        NodeFunction::quadratic(DMatrix::identity(n, n), DVector::zeros(n))
    }

    #[test]
    fn sphere_basics() {
        let mut rng = rng_from_seed(0);
        let mut plus = 0;
        for _ in 0..2000 {
            let e = sphere_sample(1, &mut rng);
            assert!(e[0] == 1.0 || e[0] == -1.0);
            plus += (e[0] > 0.0) as usize;
        }
        assert!((plus as f64 / 2000.0 - 0.5).abs() < 0.05);
        for n in [2, 5, 17] {
            assert!((sphere_sample(n, &mut rng).norm() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn sphere_moments() {
        let mut rng = rng_from_seed(11);
        let n = 5;
        let k = 100_000;
        let mut mean = DVector::zeros(n);
        let mut second = DMatrix::zeros(n, n);
        for _ in 0..k {
            let e = sphere_sample(n, &mut rng);
            mean += &e;
            second += &e * e.transpose();
        }
        mean /= k as f64;
        second /= k as f64;
        assert!(mean.norm() <= 0.02);
        assert!((second - DMatrix::identity(n, n) / n as f64).amax() <= 0.02);
    }

    #[test]
    fn two_point_exact_cases() {
        let lin = NodeFunction::linear(v(&[1.0, 0.0]));
        let mut s = OracleSuite::exact(&lin);
        let mut rng = rng_from_seed(1);
        let est = two_point_estimate_along(&mut s, &v(&[0.3, -0.2]), 0.1, v(&[1.0, 0.0]), &mut rng);
        assert!((est.estimate - v(&[2.0, 0.0])).amax() < 1e-12);
        assert_eq!(s.counters().zeroth, 2);

        let c = NodeFunction::constant(2, 3.5);
        let mut s = OracleSuite::exact(&c);
        let est = two_point_estimate(&mut s, &v(&[1.0, 2.0]), 0.5, &mut rng);
        assert_eq!(est.estimate, DVector::zeros(2));
        assert!((est.direction.norm() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn two_point_mean_on_quadratic() {
        // For f = |x|^2/2 the smoothed gradient is x itself.
        let f = half_sq(2);
        let mut s = OracleSuite::exact(&f);
        let mut rng = rng_from_seed(2);
        let x = v(&[1.0, 1.0]);
        let k = 100_000;
        let mut acc = DVector::zeros(2);
        for _ in 0..k {
            acc += two_point_estimate(&mut s, &x, 0.1, &mut rng).estimate;
        }
        acc /= k as f64;
        assert!((acc - &x).amax() <= 0.02);
        assert_eq!(s.counters().zeroth, 2 * k as u64);
    }

    #[test]
    fn finite_differences() {
        let mut rng = rng_from_seed(3);
        let f = half_sq(3);
        let mut s = OracleSuite::exact(&f);
        let x = v(&[0.5, -1.5, 2.0]);
        assert!((full_finite_diff(&mut s, &x, 0.3, &mut rng) - &x).amax() < 1e-12);
        assert_eq!(s.counters().zeroth, 6);
        let c = v(&[1.0, -2.0, 0.5]);
        let lin = NodeFunction::linear(c.clone());
        let mut s = OracleSuite::exact(&lin);
        assert!((full_finite_diff(&mut s, &x, 0.7, &mut rng) - &c).amax() < 1e-12);

        let logi = NodeFunction::logistic(
            DMatrix::from_row_slice(3, 3, &[1.0, 0.5, -0.2, -0.3, 1.2, 0.8, 0.1, -0.9, 0.4]),
            v(&[1.0, -1.0, 1.0]),
            0.1,
        );
        let mut s = OracleSuite::exact(&logi);
        for _ in 0..10 {
            let x = sphere_sample(3, &mut rng) * 2.0;
            let g = full_finite_diff(&mut s, &x, 1e-5, &mut rng);
            assert!((g - logi.gradient(&x)).amax() <= 1e-6);
        }
    }

    #[test]
    fn smoothed_values() {
        let mut rng = rng_from_seed(4);
        let lin = NodeFunction::linear(v(&[1.0, 2.0]));
        let mut s = OracleSuite::exact(&lin);
        let x = v(&[0.5, 0.5]);
        let est = smoothed_value_mc(&mut s, &x, 0.5, 10_000, &mut rng);
        assert!((est.mean - lin.value(&x)).abs() <= 3.0 * est.stderr + 1e-12);
        let c = NodeFunction::constant(2, -1.25);
        let mut s = OracleSuite::exact(&c);
        assert_eq!(smoothed_value_mc(&mut s, &x, 0.5, 100, &mut rng).mean, -1.25);
        let abs = NodeFunction::l1_regression(DMatrix::identity(1, 1), DVector::zeros(1), 1.0);
        let mut s = OracleSuite::exact(&abs);
        let est = smoothed_value_mc(&mut s, &DVector::zeros(1), 1.0, 1000, &mut rng);
        assert_eq!(est.mean, 1.0);
        assert!((est.mean - 0.0).abs() <= 1.0 * 1.0 + 1e-12);
    }

    #[test]
    fn noise_free_reduces_to_exact() {
        let f = half_sq(3);
        let mut s = OracleSuite::exact(&f);
        let mut rng = rng_from_seed(5);
        let x = v(&[1.0, 2.0, 3.0]);
        assert_eq!(s.stochastic_gradient(&x, &mut rng), f.gradient(&x));
        assert_eq!(s.zeroth_value(&x, &mut rng), f.value(&x));
        let g = full_finite_diff(&mut s, &x, 1e-7, &mut rng);
        assert!((g - f.gradient(&x)).amax() <= 1e-5);
    }

    #[test]
    fn biased_noise_mean() {
        let f = half_sq(4);
        let noise = NoiseConfig { sigma: 1.0, bias: 0.3, ..Default::default() };
        let mut s = OracleSuite::new(&f, noise);
        let mut rng = rng_from_seed(6);
        let x = v(&[1.0, 0.0, -1.0, 2.0]);
        let k = 40_000;
        let mut err = DVector::zeros(4);
        let mut sq = 0.0;
        for _ in 0..k {
            let d = s.stochastic_gradient(&x, &mut rng) - f.gradient(&x);
            err += &d;
            sq += d.norm_squared();
        }
        err /= k as f64;
        assert!((err.norm() - 0.3).abs() < 0.03);
        // E|noise|^2 = sigma^2 + bias^2
        assert!((sq / k as f64 - 1.09).abs() < 0.05);
        assert_eq!(s.counters().stochastic_gradient, k as u64);
    }

    #[test]
    fn adversarial_bounded() {
        assert_eq!(adversarial_noise(0.5, &v(&[1.0])), 0.5);
        assert_eq!(adversarial_noise(0.5, &v(&[-1.0])), -0.5);
        assert_eq!(adversarial_noise(0.5, &v(&[0.0])), 0.0);
    }

    proptest! {
        #[test]
        fn counters_monotone(calls in proptest::collection::vec(0u8..4, 1..40), seed in 0u64..100) {
            let f = half_sq(3);
            let mut s = OracleSuite::new(&f, NoiseConfig { sigma: 0.1, value_sigma: 0.1, delta: 0.01, ..Default::default() });
            let mut rng = rng_from_seed(seed);
            let x = v(&[0.1, 0.2, 0.3]);
            let mut prev = s.counters();
            for c in calls {
                let before = s.counters();
                match c {
                    0 => { s.value(&x); }
                    1 => { s.gradient(&x); }
                    2 => { two_point_estimate(&mut s, &x, 0.01, &mut rng); }
                    _ => { full_finite_diff(&mut s, &x, 0.01, &mut rng); }
                }
                let now = s.counters();
                let dz = now.zeroth - before.zeroth;
                match c {
                    2 => prop_assert_eq!(dz, 2),
                    3 => prop_assert_eq!(dz, 6),
                    _ => prop_assert_eq!(dz, 0),
                }
                prop_assert!(now.value >= prev.value && now.gradient >= prev.gradient && now.zeroth >= prev.zeroth);
                prev = now;
            }
        }

        #[test]
        fn sphere_unit(n in 1usize..30, seed in 0u64..1000) {
            let e = sphere_sample(n, &mut rng_from_seed(seed));
            prop_assert!((e.norm() - 1.0).abs() <= 1e-12);
        }
    }
}
