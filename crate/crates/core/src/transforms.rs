//! Feature-generating nonlinearities and their seeded hyperparameters.
//!
//! A [`TransformSpec`] is never stored by value in a payload: it is fully
//! determined by `(family, count, seed, bounds)` and re-sampled on load.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::real::Real;
use crate::rng::Xoshiro256;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TransformFamily {
    Monomial,
    ChebyshevPoly,
    HermitePoly,
    LegendrePoly,
    GaussianRbf,
    MultiquadraticRbf,
    InverseQuadraticRbf,
    InverseMultiquadraticRbf,
    Sinusoidal,
}

impl TransformFamily {
    pub const ALL: [TransformFamily; 9] = [
        TransformFamily::Monomial,
        TransformFamily::ChebyshevPoly,
        TransformFamily::HermitePoly,
        TransformFamily::LegendrePoly,
        TransformFamily::GaussianRbf,
        TransformFamily::MultiquadraticRbf,
        TransformFamily::InverseQuadraticRbf,
        TransformFamily::InverseMultiquadraticRbf,
        TransformFamily::Sinusoidal,
    ];

    /// Wire tag used by the seed payload.
    pub fn tag(self) -> u8 {
        self as u8
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        Self::ALL.get(tag as usize).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            TransformFamily::Monomial => "monomial",
            TransformFamily::ChebyshevPoly => "chebyshev",
            TransformFamily::HermitePoly => "hermite",
            TransformFamily::LegendrePoly => "legendre",
            TransformFamily::GaussianRbf => "gaussian",
            TransformFamily::MultiquadraticRbf => "multiquadratic",
            TransformFamily::InverseQuadraticRbf => "inverse-quadratic",
            TransformFamily::InverseMultiquadraticRbf => "inverse-multiquadratic",
            TransformFamily::Sinusoidal => "sinusoidal",
        }
    }

    pub fn is_polynomial(self) -> bool {
        matches!(
            self,
            TransformFamily::ChebyshevPoly | TransformFamily::HermitePoly | TransformFamily::LegendrePoly
        )
    }

    pub fn is_rbf(self) -> bool {
        matches!(
            self,
            TransformFamily::GaussianRbf
                | TransformFamily::MultiquadraticRbf
                | TransformFamily::InverseQuadraticRbf
                | TransformFamily::InverseMultiquadraticRbf
        )
    }
}

impl fmt::Display for TransformFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TransformFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.trim().to_ascii_lowercase().replace('_', "-");
        Self::ALL
            .iter()
            .copied()
            .find(|f| f.name() == key)
            .or(match key.as_str() {
                "sin" | "sine" => Some(TransformFamily::Sinusoidal),
                "mono" => Some(TransformFamily::Monomial),
                _ => None,
            })
            .ok_or_else(|| Error::arg(format!("unknown transform family '{s}'")))
    }
}

/// Closed interval a sampled hyperparameter is drawn from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bounds {
    pub lower: f64,
    pub upper: f64,
}

impl Bounds {
    pub const fn new(lower: f64, upper: f64) -> Self {
        Self { lower, upper }
    }

    fn validate(&self, what: &str) -> Result<()> {
        if !(self.lower.is_finite() && self.upper.is_finite()) || self.lower > self.upper {
            return Err(Error::arg(format!(
                "{what} bounds [{}, {}] are not an ordered finite interval",
                self.lower, self.upper
            )));
        }
        Ok(())
    }
}

impl fmt::Display for Bounds {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.lower, self.upper)
    }
}

impl FromStr for Bounds {
    type Err = Error;

    /// Parses `lo:hi`.
    fn from_str(s: &str) -> Result<Self> {
        let (lo, hi) = s
            .split_once(':')
            .ok_or_else(|| Error::arg(format!("bounds '{s}' must look like lo:hi")))?;
        let parse = |v: &str| {
            v.trim()
                .parse::<f64>()
                .map_err(|_| Error::arg(format!("bad bound '{v}'")))
        };
        let b = Bounds::new(parse(lo)?, parse(hi)?);
        b.validate("parsed")?;
        Ok(b)
    }
}

/// Sampling ranges for every family's hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HyperBounds {
    /// Monomial exponent.
    pub beta: Bounds,
    /// RBF width.
    pub epsilon: Bounds,
    /// Polynomial degree, integral and inclusive on both ends.
    pub degree: Bounds,
    /// Sinusoid angular frequency.
    pub omega: Bounds,
    /// Sinusoid phase.
    pub psi: Bounds,
}

impl Default for HyperBounds {
    fn default() -> Self {
        Self {
            beta: Bounds::new(1.0, 5.0),
            epsilon: Bounds::new(1.0, 2.0),
            degree: Bounds::new(1.0, 5.0),
            omega: Bounds::new(1.0, 2.0),
            psi: Bounds::new(1.0, 5.0),
        }
    }
}

impl HyperBounds {
    pub fn validate(&self) -> Result<()> {
        self.beta.validate("beta")?;
        self.epsilon.validate("epsilon")?;
        self.degree.validate("degree")?;
        self.omega.validate("omega")?;
        self.psi.validate("psi")?;
        if self.degree.lower < 0.0
            || self.degree.lower.fract() != 0.0
            || self.degree.upper.fract() != 0.0
        {
            return Err(Error::arg("degree bounds must be non-negative integers"));
        }
        Ok(())
    }

    /// The intervals a family actually draws from, in draw order.
    pub fn for_family(&self, family: TransformFamily) -> Vec<Bounds> {
        use TransformFamily::*;
        match family {
            Monomial => vec![self.beta],
            ChebyshevPoly | HermitePoly | LegendrePoly => vec![self.degree],
            GaussianRbf | MultiquadraticRbf | InverseQuadraticRbf | InverseMultiquadraticRbf => {
                vec![self.epsilon]
            }
            Sinusoidal => vec![self.omega, self.psi],
        }
    }

    /// Inverse of [`for_family`](Self::for_family): defaults with the family's
    /// intervals replaced.
    pub fn with_family_bounds(family: TransformFamily, pairs: &[Bounds]) -> Result<Self> {
        use TransformFamily::*;
        let want = Self::default().for_family(family).len();
        if pairs.len() != want {
            return Err(Error::arg(format!(
                "{family} takes {want} bound pair(s), got {}",
                pairs.len()
            )));
        }
        let mut b = Self::default();
        match family {
            Monomial => b.beta = pairs[0],
            ChebyshevPoly | HermitePoly | LegendrePoly => b.degree = pairs[0],
            GaussianRbf | MultiquadraticRbf | InverseQuadraticRbf | InverseMultiquadraticRbf => {
                b.epsilon = pairs[0]
            }
            Sinusoidal => {
                b.omega = pairs[0];
                b.psi = pairs[1];
            }
        }
        b.validate()?;
        Ok(b)
    }

    /// True when the family's intervals equal the defaults.
    pub fn is_default_for(&self, family: TransformFamily) -> bool {
        self.for_family(family) == Self::default().for_family(family)
    }
}

/// Hyperparameters of one generated channel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ChannelParams {
    Monomial { beta: f64 },
    Polynomial { degree: u32 },
    Rbf { epsilon: f64 },
    Sinusoidal { omega: f64, psi: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransformSpec {
    family: TransformFamily,
    params: Vec<ChannelParams>,
    seed: u64,
    bounds: HyperBounds,
}

/// Draws `count` channels of hyperparameters for `family` from `seed`.
///
/// Channels are drawn in order; sinusoids draw ω then ψ. The result depends
/// only on the arguments.
pub fn sample_hyperparams(
    seed: u64,
    family: TransformFamily,
    count: usize,
    bounds: &HyperBounds,
) -> Result<TransformSpec> {
    if count < 1 {
        return Err(Error::arg("transform channel count must be at least 1"));
    }
    bounds.validate()?;
    let mut rng = Xoshiro256::seed_from_u64(seed);
    let params = (0..count)
        .map(|_| match family {
            TransformFamily::Monomial => ChannelParams::Monomial {
                beta: rng.uniform(bounds.beta.lower, bounds.beta.upper),
            },
            f if f.is_polynomial() => ChannelParams::Polynomial {
                degree: rng.uniform_int(bounds.degree.lower as u32, bounds.degree.upper as u32),
            },
            f if f.is_rbf() => ChannelParams::Rbf {
                epsilon: rng.uniform(bounds.epsilon.lower, bounds.epsilon.upper),
            },
            _ => {
                let omega = rng.uniform(bounds.omega.lower, bounds.omega.upper);
                let psi = rng.uniform(bounds.psi.lower, bounds.psi.upper);
                ChannelParams::Sinusoidal { omega, psi }
            }
        })
        .collect();
    Ok(TransformSpec {
        family,
        params,
        seed,
        bounds: *bounds,
    })
}

impl TransformSpec {
    pub fn sample(seed: u64, family: TransformFamily, count: usize, bounds: &HyperBounds) -> Result<Self> {
        sample_hyperparams(seed, family, count, bounds)
    }

    pub fn family(&self) -> TransformFamily {
        self.family
    }

    pub fn params(&self) -> &[ChannelParams] {
        &self.params
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn bounds(&self) -> &HyperBounds {
        &self.bounds
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// `φ_channel(x)`.
    #[inline]
    pub fn eval<T: Real>(&self, channel: usize, x: T) -> T {
        self.eval_with_derivative(channel, x).0
    }

    /// `(φ(x), φ'(x))` for one channel.
    #[inline]
    pub fn eval_with_derivative<T: Real>(&self, channel: usize, x: T) -> (T, T) {
        let c = |v: f64| T::from_f64_lossy(v);
        match self.params[channel] {
            ChannelParams::Monomial { beta } => monomial(x, c(beta)),
            ChannelParams::Polynomial { degree } => polynomial(self.family, degree, x),
            ChannelParams::Rbf { epsilon } => rbf(self.family, c(epsilon), x),
            ChannelParams::Sinusoidal { omega, psi } => {
                let (w, p) = (c(omega), c(psi));
                let arg = w * x + p;
                (arg.sin(), w * arg.cos())
            }
        }
    }

    /// Compact serialisation: family tag (u8), channel count (u32 LE), seed
    /// (u64 LE), then the family's bound pairs as f64 LE. Parameters are not
    /// written; [`from_bytes`](Self::from_bytes) re-samples them.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(13 + 32);
        out.push(self.family.tag());
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        out.extend_from_slice(&self.seed.to_le_bytes());
        for b in self.bounds.for_family(self.family) {
            out.extend_from_slice(&b.lower.to_le_bytes());
            out.extend_from_slice(&b.upper.to_le_bytes());
        }
        out
    }

    /// Returns the decoded transform and the number of bytes consumed.
    pub fn from_bytes(bytes: &[u8]) -> Result<(Self, usize)> {
        let short = || Error::Format("truncated transform record".into());
        let tag = *bytes.first().ok_or_else(short)?;
        let family = TransformFamily::from_tag(tag)
            .ok_or_else(|| Error::Version(format!("unknown transform family tag {tag}")))?;
        let count = u32::from_le_bytes(bytes.get(1..5).ok_or_else(short)?.try_into().unwrap());
        let seed = u64::from_le_bytes(bytes.get(5..13).ok_or_else(short)?.try_into().unwrap());
        let npairs = HyperBounds::default().for_family(family).len();
        let mut pairs = Vec::with_capacity(npairs);
        let mut off = 13;
        for _ in 0..npairs {
            let lo = f64::from_le_bytes(bytes.get(off..off + 8).ok_or_else(short)?.try_into().unwrap());
            let hi = f64::from_le_bytes(bytes.get(off + 8..off + 16).ok_or_else(short)?.try_into().unwrap());
            pairs.push(Bounds::new(lo, hi));
            off += 16;
        }
        let bounds = HyperBounds::with_family_bounds(family, &pairs)?;
        Ok((sample_hyperparams(seed, family, count as usize, &bounds)?, off))
    }
}

impl fmt::Display for ChannelParams {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ChannelParams::Monomial { beta } => write!(f, "beta={beta}"),
            ChannelParams::Polynomial { degree } => write!(f, "n={degree}"),
            ChannelParams::Rbf { epsilon } => write!(f, "epsilon={epsilon}"),
            ChannelParams::Sinusoidal { omega, psi } => write!(f, "omega={omega} psi={psi}"),
        }
    }
}

#[inline]
fn monomial<T: Real>(x: T, beta: T) -> (T, T) {
    if x == T::zero() {
        // sign(0) = 0; slope is 1 only for the identity exponent, clamped to 0 below it.
        let d = if beta == T::one() { T::one() } else { T::zero() };
        return (T::zero(), d);
    }
    let ax = x.abs();
    let v = x.signum() * ax.powf(beta);
    (v, beta * ax.powf(beta - T::one()))
}

fn polynomial<T: Real>(family: TransformFamily, n: u32, x: T) -> (T, T) {
    let two = T::from_f64_lossy(2.0);
    let (mut p0, mut d0) = (T::one(), T::zero());
    if n == 0 {
        return (p0, d0);
    }
    let (mut p1, mut d1) = match family {
        TransformFamily::HermitePoly => (two * x, two),
        _ => (x, T::one()),
    };
    for k in 1..n {
        let kf = T::from_f64_lossy(k as f64);
        let (p2, d2) = match family {
            TransformFamily::ChebyshevPoly => (two * x * p1 - p0, two * p1 + two * x * d1 - d0),
            TransformFamily::HermitePoly => (
                two * x * p1 - two * kf * p0,
                two * p1 + two * x * d1 - two * kf * d0,
            ),
            _ => {
                let a = two * kf + T::one();
                let k1 = kf + T::one();
                ((a * x * p1 - kf * p0) / k1, (a * (p1 + x * d1) - kf * d0) / k1)
            }
        };
        p0 = p1;
        d0 = d1;
        p1 = p2;
        d1 = d2;
    }
    (p1, d1)
}

#[inline]
fn rbf<T: Real>(family: TransformFamily, eps: T, x: T) -> (T, T) {
    let two = T::from_f64_lossy(2.0);
    let e2 = eps * eps;
    let r2 = e2 * x * x;
    let q = T::one() + r2;
    match family {
        TransformFamily::GaussianRbf => {
            let v = (-r2).exp();
            (v, -two * e2 * x * v)
        }
        TransformFamily::MultiquadraticRbf => {
            let s = q.sqrt();
            (s, e2 * x / s)
        }
        TransformFamily::InverseQuadraticRbf => {
            let v = T::one() / q;
            (v, -two * e2 * x * v * v)
        }
        _ => {
            let v = T::one() / q.sqrt();
            (v, -e2 * x * v * v * v)
        }
    }
}

/// Evaluates a Chebyshev (first kind), physicists' Hermite or Legendre
/// polynomial of degree `n` by its three-term recurrence.
pub fn eval_polynomial_recurrence(family: TransformFamily, n: i64, x: f64) -> Result<f64> {
    if !family.is_polynomial() {
        return Err(Error::arg(format!("{family} is not a polynomial family")));
    }
    if n < 0 {
        return Err(Error::arg(format!("polynomial degree must be non-negative, got {n}")));
    }
    let n = u32::try_from(n).map_err(|_| Error::arg("polynomial degree too large"))?;
    Ok(polynomial(family, n, x).0)
}

/// Applies channel `channel_index` of `spec` elementwise to `x`.
pub fn eval_transform<T: Real>(spec: &TransformSpec, channel_index: usize, x: &Tensor<T>) -> Result<Tensor<T>> {
    if channel_index >= spec.len() {
        return Err(Error::arg(format!(
            "channel {channel_index} out of range for a transform with {} channels",
            spec.len()
        )));
    }
    Ok(x.map(|v| spec.eval(channel_index, v)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(family: TransformFamily, pairs: &[Bounds]) -> TransformSpec {
        let b = HyperBounds::with_family_bounds(family, pairs).unwrap();
        sample_hyperparams(0, family, 1, &b).unwrap()
    }

    #[test]
    fn sinusoid_at_origin() {
        let s = single(TransformFamily::Sinusoidal, &[Bounds::new(1.0, 1.0), Bounds::new(0.0, 0.0)]);
        assert_eq!(s.eval(0, 0.0f64), 0.0);
    }

    #[test]
    fn monomial_identity() {
        let s = single(TransformFamily::Monomial, &[Bounds::new(1.0, 1.0)]);
        for x in [-3.5f64, -1.0, 0.0, 0.25, 7.0] {
            assert_eq!(s.eval(0, x), x);
        }
    }

    #[test]
    fn monomial_kink_conventions() {
        let s = single(TransformFamily::Monomial, &[Bounds::new(0.5, 0.5)]);
        assert_eq!(s.eval_with_derivative(0, 0.0f64), (0.0, 0.0));
        let (v, _) = s.eval_with_derivative(0, -4.0f64);
        assert_eq!(v, -2.0);
    }

    #[test]
    fn closed_form_spot_values() {
        let legendre = single(TransformFamily::LegendrePoly, &[Bounds::new(2.0, 2.0)]);
        assert!((legendre.eval(0, 0.0f64) + 0.5).abs() < 1e-15);
        let cheb = single(TransformFamily::ChebyshevPoly, &[Bounds::new(3.0, 3.0)]);
        assert!((cheb.eval(0, 0.5f64) + 1.0).abs() < 1e-12);
        let gauss = single(TransformFamily::GaussianRbf, &[Bounds::new(1.7, 1.7)]);
        assert_eq!(gauss.eval(0, 0.0f64), 1.0);
    }

    #[test]
    fn recurrence_base_and_known_values() {
        for f in [
            TransformFamily::ChebyshevPoly,
            TransformFamily::HermitePoly,
            TransformFamily::LegendrePoly,
        ] {
            assert_eq!(eval_polynomial_recurrence(f, 0, 0.3).unwrap(), 1.0);
            assert!(eval_polynomial_recurrence(f, -1, 0.3).is_err());
        }
        assert_eq!(eval_polynomial_recurrence(TransformFamily::HermitePoly, 2, 1.0).unwrap(), 2.0);
        assert_eq!(eval_polynomial_recurrence(TransformFamily::LegendrePoly, 3, 1.0).unwrap(), 1.0);
        assert!(eval_polynomial_recurrence(TransformFamily::GaussianRbf, 1, 1.0).is_err());
    }

    #[test]
    fn recurrences_match_closed_forms() {
        // Explicit low-degree polynomials, written out independently.
        let h = [
            |_x: f64| 1.0,
            |x: f64| 2.0 * x,
            |x: f64| 4.0 * x * x - 2.0,
            |x: f64| 8.0 * x.powi(3) - 12.0 * x,
            |x: f64| 16.0 * x.powi(4) - 48.0 * x * x + 12.0,
        ];
        let p = [
            |_x: f64| 1.0,
            |x: f64| x,
            |x: f64| (3.0 * x * x - 1.0) / 2.0,
            |x: f64| (5.0 * x.powi(3) - 3.0 * x) / 2.0,
            |x: f64| (35.0 * x.powi(4) - 30.0 * x * x + 3.0) / 8.0,
        ];
        for i in 0..=40 {
            let x = -2.0 + 0.1 * i as f64;
            for n in 0..5 {
                let hv = eval_polynomial_recurrence(TransformFamily::HermitePoly, n as i64, x).unwrap();
                assert!((hv - h[n](x)).abs() < 1e-9 * (1.0 + h[n](x).abs()));
                let pv = eval_polynomial_recurrence(TransformFamily::LegendrePoly, n as i64, x).unwrap();
                assert!((pv - p[n](x)).abs() < 1e-12 * (1.0 + p[n](x).abs()));
            }
            // Chebyshev outside [-1, 1] via the cosh branches.
            if x.abs() > 1.0 {
                for n in 0..8i32 {
                    let t = eval_polynomial_recurrence(TransformFamily::ChebyshevPoly, n as i64, x).unwrap();
                    let closed = if x >= 1.0 {
                        (n as f64 * x.acosh()).cosh()
                    } else {
                        (-1f64).powi(n) * (n as f64 * (-x).acosh()).cosh()
                    };
                    assert!((t - closed).abs() < 1e-9 * (1.0 + closed.abs()));
                }
            }
        }
    }

    #[test]
    fn sampling_respects_bounds_and_count() {
        let s = sample_hyperparams(7, TransformFamily::Sinusoidal, 4, &HyperBounds::default()).unwrap();
        assert_eq!(s.len(), 4);
        for p in s.params() {
            let ChannelParams::Sinusoidal { omega, psi } = *p else { panic!() };
            assert!((1.0..=2.0).contains(&omega));
            assert!((1.0..=5.0).contains(&psi));
        }
        assert!(sample_hyperparams(7, TransformFamily::Sinusoidal, 0, &HyperBounds::default()).is_err());
        let bad = HyperBounds {
            omega: Bounds::new(2.0, 1.0),
            ..HyperBounds::default()
        };
        assert!(sample_hyperparams(7, TransformFamily::Sinusoidal, 1, &bad).is_err());
    }

    #[test]
    fn eval_transform_checks_channel() {
        let s = sample_hyperparams(1, TransformFamily::GaussianRbf, 2, &HyperBounds::default()).unwrap();
        let x = Tensor::<f64>::vector(&[0.0, 1.0]).unwrap();
        assert!(eval_transform(&s, 2, &x).is_err());
        let y = eval_transform(&s, 1, &x).unwrap();
        assert_eq!(y.data()[0], 1.0);
    }

    #[test]
    fn bytes_round_trip() {
        let b = HyperBounds::with_family_bounds(TransformFamily::Sinusoidal, &[Bounds::new(0.5, 3.0), Bounds::new(0.0, 1.0)]).unwrap();
        let s = sample_hyperparams(99, TransformFamily::Sinusoidal, 12, &b).unwrap();
        let bytes = s.to_bytes();
        assert_eq!(bytes.len(), 1 + 4 + 8 + 32);
        let (back, used) = TransformSpec::from_bytes(&bytes).unwrap();
        assert_eq!(used, bytes.len());
        assert_eq!(back, s);
        let mut bad = bytes.clone();
        bad[0] = 42;
        assert!(matches!(TransformSpec::from_bytes(&bad), Err(Error::Version(_))));
    }

    #[test]
    fn family_names_parse() {
        for f in TransformFamily::ALL {
            assert_eq!(f.name().parse::<TransformFamily>().unwrap(), f);
            assert_eq!(TransformFamily::from_tag(f.tag()), Some(f));
        }
        assert!("cosine".parse::<TransformFamily>().is_err());
    }
}
