//! Backward nonlinearities `g(a)` and the functional correlation `η`.
//!
//! Four families are supported: the LIF surrogate derivative `f′`, positive
//! random Fourier series (PRFS), a Gaussian bump and the optical `cos²`
//! response. `η` is the centred, normalized inner product of two functions
//! over a finite interval, evaluated by trapezoidal quadrature.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lif::LifParams;
use crate::rng::{stream_rng, Stream};
use crate::scalar::Real;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields, bound = "T: Real")]
pub enum BackwardFnSpec<T> {
    /// Smoothed derivative of the LIF rate response.
    LifSurrogate { h_th: T, t_ref: T, tau: T },
    /// `|m| + Σ_k p_k sin(ωkπa) + q_k cos(ωkπa)`, `k = 1..=p.len()`.
    Prfs { omega: T, p: Vec<T>, q: Vec<T>, m: T },
    /// `a · exp(−(x − b)² / 2c²)`.
    Gaussian { a: T, b: T, c: T },
    /// `cos²(ωx + θ)`.
    Opto { omega: T, theta: T },
}

impl<T: Real> BackwardFnSpec<T> {
    pub fn surrogate(params: &LifParams<T>) -> Self {
        Self::LifSurrogate {
            h_th: params.h_th,
            t_ref: params.t_ref,
            tau: params.tau,
        }
    }

    pub fn gaussian(b: T, c: T) -> Self {
        Self::Gaussian { a: T::one(), b, c }
    }

    pub fn opto(omega: T, theta: T) -> Self {
        Self::Opto { omega, theta }
    }

    pub fn family(&self) -> &'static str {
        match self {
            Self::LifSurrogate { .. } => "lif_surrogate",
            Self::Prfs { .. } => "prfs",
            Self::Gaussian { .. } => "gaussian",
            Self::Opto { .. } => "opto",
        }
    }

    pub fn is_surrogate(&self) -> bool {
        matches!(self, Self::LifSurrogate { .. })
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidParameter(m.to_string()));
        match self {
            Self::LifSurrogate { h_th, t_ref, tau } => {
                if !(*h_th > T::zero() && *t_ref >= T::zero() && *tau > T::zero()) {
                    return bad("surrogate needs h_th > 0, t_ref >= 0, tau > 0");
                }
            }
            Self::Prfs { omega, p, q, m } => {
                if p.is_empty() || p.len() != q.len() {
                    return bad("PRFS needs k >= 1 sine and cosine coefficients");
                }
                if !omega.is_finite() || *omega <= T::zero() {
                    return bad("PRFS omega must be > 0");
                }
                if !m.is_finite() || p.iter().chain(q).any(|x| !x.is_finite()) {
                    return bad("PRFS coefficients must be finite");
                }
            }
            Self::Gaussian { a, b, c } => {
                if !(*a > T::zero() && *c > T::zero() && b.is_finite()) {
                    return bad("Gaussian needs a > 0 and c > 0");
                }
            }
            Self::Opto { omega, theta } => {
                if !(omega.is_finite() && theta.is_finite()) {
                    return bad("Opto parameters must be finite");
                }
            }
        }
        Ok(())
    }

    /// Checked evaluation.
    pub fn eval(&self, a: T) -> Result<T> {
        if !a.is_finite() {
            return Err(Error::NonFinite {
                context: "backward function argument",
                index: 0,
            });
        }
        Ok(self.value(a))
    }

    /// Unchecked evaluation, for hot loops whose inputs are already known
    /// to be finite.
    #[inline]
    pub fn value(&self, a: T) -> T {
        match self {
            Self::LifSurrogate { h_th, t_ref, tau } => {
                if a <= *h_th {
                    return T::zero();
                }
                let log_term = *t_ref + *tau * (a / (a - *h_th)).ln();
                *h_th * *t_ref * *tau / (a * (a - *h_th) * log_term * log_term)
            }
            Self::Prfs { omega, p, q, m } => {
                // sin/cos of kθ by angle addition from θ = ωπa
                let theta = *omega * T::PI() * a;
                let (s1, c1) = theta.sin_cos();
                let (mut s, mut c) = (s1, c1);
                let mut acc = m.abs();
                for (pk, qk) in p.iter().zip(q) {
                    acc += *pk * s + *qk * c;
                    let next_s = s * c1 + c * s1;
                    c = c * c1 - s * s1;
                    s = next_s;
                }
                acc
            }
            Self::Gaussian { a: height, b, c } => {
                let d = a - *b;
                *height * (-(d * d) / (T::lit(2.0) * *c * *c)).exp()
            }
            Self::Opto { omega, theta } => {
                let c = (*omega * a + *theta).cos();
                c * c
            }
        }
    }

    /// `Σ_k |p_k| + |q_k|` for a PRFS, `None` otherwise.
    pub fn coefficient_mass(&self) -> Option<T> {
        match self {
            Self::Prfs { p, q, .. } => Some(p.iter().chain(q).map(|x| x.abs()).sum()),
            _ => None,
        }
    }

    /// Rescales PRFS coefficients so that their absolute values sum to one.
    /// Returns `false` (leaving the spec untouched) when every coefficient is zero.
    pub fn normalize(&mut self) -> bool {
        if let Self::Prfs { p, q, .. } = self {
            let mass: T = p.iter().chain(q.iter()).map(|x| x.abs()).sum();
            if mass <= T::zero() || !mass.is_finite() {
                return false;
            }
            p.iter_mut().chain(q.iter_mut()).for_each(|x| *x /= mass);
        }
        true
    }
}

/// Draws a PRFS with `k` harmonics, coefficients uniform on `[−1, 1]` then
/// normalized, and shift `m`.
pub fn sample_prfs_with_shift<T: Real>(seed: u64, k: usize, omega: T, m: T) -> Result<BackwardFnSpec<T>> {
    if k == 0 {
        return Err(Error::InvalidParameter("PRFS needs k >= 1".into()));
    }
    if !(omega > T::zero()) {
        return Err(Error::InvalidParameter("PRFS omega must be > 0".into()));
    }
    let mut rng = stream_rng(seed, Stream::Prfs, 0);
    let mut draw = || T::lit(rng.random_range(-1.0..=1.0));
    let p: Vec<T> = (0..k).map(|_| draw()).collect();
    let q: Vec<T> = (0..k).map(|_| draw()).collect();
    let mut spec = BackwardFnSpec::Prfs { omega, p, q, m };
    if !spec.normalize() {
        // all-zero draw; probability zero with a continuous sampler
        return Err(Error::InvalidParameter("degenerate PRFS draw".into()));
    }
    Ok(spec)
}

/// [`sample_prfs_with_shift`] with the default shift `m = 1`, which keeps
/// the function nonnegative everywhere.
pub fn sample_prfs<T: Real>(seed: u64, k: usize, omega: T) -> Result<BackwardFnSpec<T>> {
    sample_prfs_with_shift(seed, k, omega, T::one())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, bound = "T: Real")]
pub struct CorrelationConfig<T> {
    pub lo: T,
    pub hi: T,
    pub step: T,
    /// Offset of the first node from `lo`, as a fraction of `step`. The
    /// default half-step keeps nodes off the surrogate's singular point.
    pub grid_offset: T,
}

impl<T: Real> Default for CorrelationConfig<T> {
    fn default() -> Self {
        Self {
            lo: T::lit(-100.0),
            hi: T::lit(100.0),
            step: T::lit(0.01),
            grid_offset: T::lit(0.5),
        }
    }
}

impl<T: Real> CorrelationConfig<T> {
    pub fn validate(&self) -> Result<()> {
        if !(self.lo < self.hi && self.step > T::zero()) {
            return Err(Error::InvalidParameter(
                "correlation needs lo < hi and step > 0".into(),
            ));
        }
        if !(self.grid_offset >= T::zero() && self.grid_offset < T::one()) {
            return Err(Error::InvalidParameter("grid_offset must be in [0, 1)".into()));
        }
        Ok(())
    }

    /// Quadrature nodes `lo + (i + offset)·step` that lie in `[lo, hi]`.
    pub fn nodes(&self) -> Result<Vec<T>> {
        self.validate()?;
        let span = ((self.hi - self.lo) / self.step).as_f64();
        let offset = self.grid_offset.as_f64();
        let count = (span - offset + 1e-9).floor() as usize + 1;
        if count < 2 {
            return Err(Error::InvalidParameter("fewer than two quadrature nodes".into()));
        }
        Ok((0..count)
            .map(|i| self.lo + (T::from_usize(i).unwrap() + self.grid_offset) * self.step)
            .collect())
    }
}

/// Trapezoid rule on uniform nodes.
fn trapezoid<T: Real>(ys: impl ExactSizeIterator<Item = T>, step: T) -> T {
    let n = ys.len();
    let half = T::lit(0.5);
    let mut acc = T::zero();
    for (i, y) in ys.enumerate() {
        acc += if i == 0 || i + 1 == n { half * y } else { y };
    }
    acc * step
}

/// A reference function sampled on the quadrature grid, centred and with its
/// norm precomputed, so many candidates can be correlated against it cheaply.
#[derive(Debug, Clone)]
pub struct CorrelationGrid<T> {
    nodes: Vec<T>,
    step: T,
    centred_reference: Vec<T>,
    reference_norm: T,
}

impl<T: Real> CorrelationGrid<T> {
    pub fn new(reference: &BackwardFnSpec<T>, cfg: &CorrelationConfig<T>) -> Result<Self> {
        Self::from_fn(|a| reference.value(a), cfg)
    }

    pub fn from_fn(reference: impl Fn(T) -> T, cfg: &CorrelationConfig<T>) -> Result<Self> {
        let nodes = cfg.nodes()?;
        let values: Vec<T> = nodes.iter().map(|&a| reference(a)).collect();
        crate::error::ensure_finite("reference function samples", &values)?;
        let (centred_reference, reference_norm) = centre(&values, cfg.step);
        if !(reference_norm > T::zero()) {
            return Err(Error::UndefinedCorrelation("reference function"));
        }
        Ok(Self {
            nodes,
            step: cfg.step,
            centred_reference,
            reference_norm,
        })
    }

    pub fn nodes(&self) -> &[T] {
        &self.nodes
    }

    pub fn eta(&self, g: &BackwardFnSpec<T>) -> Result<T> {
        self.eta_fn(|a| g.value(a))
    }

    pub fn eta_fn(&self, g: impl Fn(T) -> T) -> Result<T> {
        let values: Vec<T> = self.nodes.iter().map(|&a| g(a)).collect();
        crate::error::ensure_finite("candidate function samples", &values)?;
        let (centred, norm) = centre(&values, self.step);
        if !(norm > T::zero()) {
            return Err(Error::UndefinedCorrelation("candidate function"));
        }
        let cross = trapezoid(
            centred
                .iter()
                .zip(&self.centred_reference)
                .map(|(x, y)| *x * *y),
            self.step,
        );
        let eta = cross / (norm * self.reference_norm);
        // clamp rounding excursions beyond ±1
        Ok(eta.max(-T::one()).min(T::one()))
    }
}

/// Subtracts the quadrature mean and returns the centred samples with their
/// L2 norm.
fn centre<T: Real>(values: &[T], step: T) -> (Vec<T>, T) {
    let length = trapezoid(values.iter().map(|_| T::one()), step);
    let mean = trapezoid(values.iter().copied(), step) / length;
    let centred: Vec<T> = values.iter().map(|&v| v - mean).collect();
    let norm = trapezoid(centred.iter().map(|&c| c * c), step).sqrt();
    (centred, norm)
}

/// Correlation `η(g, reference)` over `[cfg.lo, cfg.hi]`.
pub fn correlation<T: Real>(
    g: &BackwardFnSpec<T>,
    reference: &BackwardFnSpec<T>,
    cfg: &CorrelationConfig<T>,
) -> Result<T> {
    CorrelationGrid::new(reference, cfg)?.eta(g)
}

/// Contiguous intervals over `η` defined by increasing edges.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bins {
    edges: Vec<f64>,
}

impl Bins {
    pub fn new(edges: Vec<f64>) -> Result<Self> {
        if edges.len() < 2 || edges.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::InvalidParameter(
                "bin edges must be strictly increasing with at least two entries".into(),
            ));
        }
        Ok(Self { edges })
    }

    /// Six bins of width 0.2 covering `[−0.6, 0.6]`.
    pub fn eta_default() -> Self {
        Self::new(vec![-0.6, -0.4, -0.2, 0.0, 0.2, 0.4, 0.6]).unwrap()
    }

    pub fn len(&self) -> usize {
        self.edges.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn edges(&self) -> &[f64] {
        &self.edges
    }

    pub fn bounds(&self, bin: usize) -> (f64, f64) {
        (self.edges[bin], self.edges[bin + 1])
    }

    /// Bin index of `x`. Each bin is `[lo, hi)`, so a value on an interior
    /// edge goes to the upper bin; the last bin also includes its right edge.
    /// `None` for values outside `[first, last]`.
    pub fn locate(&self, x: f64) -> Option<usize> {
        let last = *self.edges.last().unwrap();
        if !(x >= self.edges[0] && x <= last) {
            return None;
        }
        if x == last {
            return Some(self.len() - 1);
        }
        Some(self.edges.partition_point(|&e| e <= x) - 1)
    }
}

/// Specs grouped by the bin their `η` falls in.
#[derive(Debug, Clone)]
pub struct BinnedSpecs<T> {
    pub bins: Bins,
    /// `members[b]` holds `(index into input, η)` pairs in input order.
    pub members: Vec<Vec<(usize, f64)>>,
    /// Inputs whose `η` fell outside every bin.
    pub overflow: Vec<(usize, f64)>,
    /// Inputs whose `η` was undefined.
    pub undefined: Vec<usize>,
    _marker: std::marker::PhantomData<T>,
}

impl<T> BinnedSpecs<T> {
    pub fn total(&self) -> usize {
        self.members.iter().map(Vec::len).sum::<usize>() + self.overflow.len() + self.undefined.len()
    }
}

pub fn bin_by_correlation<T: Real>(
    specs: &[BackwardFnSpec<T>],
    reference: &BackwardFnSpec<T>,
    bins: &Bins,
    cfg: &CorrelationConfig<T>,
) -> Result<BinnedSpecs<T>> {
    let grid = CorrelationGrid::new(reference, cfg)?;
    let etas: Vec<Option<f64>> = specs
        .iter()
        .map(|s| grid.eta(s).ok().map(Real::as_f64))
        .collect();
    Ok(bin_etas(&etas, bins))
}

/// Buckets precomputed `η` values (`None` = undefined).
pub fn bin_etas<T>(etas: &[Option<f64>], bins: &Bins) -> BinnedSpecs<T> {
    let mut out = BinnedSpecs {
        bins: bins.clone(),
        members: vec![Vec::new(); bins.len()],
        overflow: Vec::new(),
        undefined: Vec::new(),
        _marker: std::marker::PhantomData,
    };
    for (i, eta) in etas.iter().enumerate() {
        match eta {
            None => out.undefined.push(i),
            Some(e) => match bins.locate(*e) {
                Some(b) => out.members[b].push((i, *e)),
                None => out.overflow.push((i, *e)),
            },
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fprime() -> BackwardFnSpec<f64> {
        BackwardFnSpec::surrogate(&LifParams::default())
    }

    #[test]
    fn surrogate_branches() {
        let f = fprime();
        assert_eq!(f.eval(0.3).unwrap(), 0.0);
        assert_eq!(f.eval(0.4).unwrap(), 0.0);
        assert_eq!(f.eval(-7.0).unwrap(), 0.0);
        // 0.4·1·20 / (0.8·0.4·(1 + 20 ln 2)²)
        let expected = 8.0 / (0.32 * (1.0 + 20.0 * std::f64::consts::LN_2).powi(2));
        assert!((f.eval(0.8).unwrap() - expected).abs() < 1e-15);
        assert!((f.eval(0.8).unwrap() - 0.11316).abs() < 1e-5);
        assert!(f.eval(f64::NAN).is_err());
        assert!(f.eval(f64::INFINITY).is_err());
    }

    #[test]
    fn opto_is_a_unit_interval_squared_cosine() {
        let g = BackwardFnSpec::opto(0.1, 150.0);
        for i in -500..500 {
            let v = g.eval(i as f64 * 0.37).unwrap();
            assert!((0.0..=1.0).contains(&v));
        }
        for n in [48, 49, 50] {
            let a = (n as f64 * std::f64::consts::PI - 150.0) / 0.1;
            assert_eq!(g.eval(a).unwrap(), 1.0);
        }
    }

    #[test]
    fn prfs_value_matches_direct_series() {
        let spec = sample_prfs::<f64>(3, 4, 0.05).unwrap();
        let BackwardFnSpec::Prfs { omega, p, q, m } = &spec else { unreachable!() };
        for &a in &[-97.3, -1.0, 0.0, 0.4, 12.5, 88.8] {
            let direct: f64 = m.abs()
                + (0..4)
                    .map(|k| {
                        let x = omega * (k + 1) as f64 * std::f64::consts::PI * a;
                        p[k] * x.sin() + q[k] * x.cos()
                    })
                    .sum::<f64>();
            assert!((spec.value(a) - direct).abs() < 1e-13);
        }
    }

    #[test]
    fn sampled_prfs_is_normalized_and_nonnegative() {
        for seed in 0..200 {
            let spec = sample_prfs::<f64>(seed, 4, 0.01).unwrap();
            assert!((spec.coefficient_mass().unwrap() - 1.0).abs() < 1e-12);
            for i in -1000..=1000 {
                assert!(spec.value(i as f64 * 0.1) >= -1e-15);
            }
        }
        assert!(sample_prfs::<f64>(0, 0, 0.01).is_err());
        assert!(sample_prfs::<f64>(0, 4, 0.0).is_err());
    }

    #[test]
    fn prfs_fundamental_period_is_two_over_omega() {
        let spec = sample_prfs::<f64>(9, 4, 0.01).unwrap();
        for &a in &[-50.0, 0.0, 3.3, 71.0] {
            assert!((spec.value(a) - spec.value(a + 200.0)).abs() < 1e-12);
        }
    }

    #[test]
    fn self_correlation_is_one() {
        let cfg = CorrelationConfig::default();
        let eta = correlation(&fprime(), &fprime(), &cfg).unwrap();
        assert!((eta - 1.0).abs() < 1e-9);
    }

    #[test]
    fn constant_function_has_undefined_correlation() {
        let cfg = CorrelationConfig::default();
        let flat = BackwardFnSpec::Prfs {
            omega: 0.01,
            p: vec![0.0],
            q: vec![0.0],
            m: 1.0,
        };
        assert!(matches!(
            correlation(&flat, &fprime(), &cfg),
            Err(Error::UndefinedCorrelation(_))
        ));
        assert!(matches!(
            correlation(&fprime(), &flat, &cfg),
            Err(Error::UndefinedCorrelation(_))
        ));
    }

    #[test]
    fn default_grid_avoids_the_threshold() {
        let nodes = CorrelationConfig::<f64>::default().nodes().unwrap();
        assert_eq!(nodes.len(), 20_000);
        assert!((nodes[0] + 99.995).abs() < 1e-12);
        let f = fprime();
        assert!(nodes.iter().all(|&a| f.value(a).is_finite() && f.value(a) < 1.0));
    }

    #[test]
    fn surrogate_norm_grows_under_refinement() {
        // ∫ f′² diverges at the threshold, so refining the grid inflates it.
        let norm = |step: f64| {
            let cfg = CorrelationConfig { step, ..Default::default() };
            let f = fprime();
            let nodes = cfg.nodes().unwrap();
            trapezoid(nodes.iter().map(|&a| f.value(a).powi(2)), step)
        };
        assert!(norm(0.005) > norm(0.01));
        assert!(norm(0.0025) > norm(0.005));
    }

    #[test]
    fn bin_membership_and_edges() {
        let bins = Bins::eta_default();
        assert_eq!(bins.len(), 6);
        assert_eq!(bins.locate(0.45), Some(5));
        assert_eq!(bins.bounds(5), (0.4, 0.6));
        assert_eq!(bins.locate(0.2), Some(4));
        assert_eq!(bins.locate(-0.6), Some(0));
        assert_eq!(bins.locate(0.6), Some(5));
        assert_eq!(bins.locate(0.61), None);
        assert_eq!(bins.locate(-0.7), None);
        assert!(Bins::new(vec![0.0, 0.0]).is_err());
    }

    #[test]
    fn spec_serializes_as_tagged_toml() {
        let spec = BackwardFnSpec::opto(0.15, 155.0);
        let text = toml::to_string(&spec).unwrap();
        assert!(text.contains("family = \"opto\""));
        let back: BackwardFnSpec<f64> = toml::from_str(&text).unwrap();
        assert_eq!(back, spec);
        let bad = "family = \"opto\"\nomega = 0.1\ntheta = 1.0\nphase = 2.0\n";
        assert!(toml::from_str::<BackwardFnSpec<f64>>(bad).is_err());
    }
}
