//! The sign forward rule and the backward rules that stand in for its
//! zero-almost-everywhere derivative.
//!
//! The Fourier estimator replaces `sign` in the backward pass with the
//! derivative of the truncated square-wave series
//!
//! ```text
//! ŝₙ(t)  = 4/π  · Σ_{i=0..n} sin((2i+1)ωt) / (2i+1)
//! ŝₙ′(t) = 4ω/π · Σ_{i=0..n} cos((2i+1)ωt)
//! ```
//!
//! With the default `ω = π` (period 2) the square wave coincides with `sign`
//! on `|t| < 1`, which is why activations are clipped to `[-1, 1]` before
//! binarization.

use std::f64::consts::PI;

use crate::autograd::{Graph, Op, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const DEFAULT_OMEGA: f64 = PI;

/// Backward rule used in place of `d sign / dt`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum SurrogateSpec {
    /// Straight-through estimator. `gated = false` clips the incoming gradient
    /// value to `[-1, 1]`; `gated = true` passes it through only where
    /// `|t| <= 1`.
    Ste { gated: bool },
    /// Truncated Fourier series with `terms = n` (indices `0..=n`).
    Fda { terms: usize, omega: f64 },
    /// Derivative of `tanh(βt)`.
    TanhAlike { beta: f64 },
    /// Derivative of the SignSwish function with steepness `β`.
    SignSwish { beta: f64 },
}

impl Default for SurrogateSpec {
    fn default() -> Self {
        SurrogateSpec::Fda {
            terms: 10,
            omega: DEFAULT_OMEGA,
        }
    }
}

impl SurrogateSpec {
    pub fn ste() -> Self {
        SurrogateSpec::Ste { gated: false }
    }

    pub fn fda(terms: usize) -> Self {
        SurrogateSpec::Fda {
            terms,
            omega: DEFAULT_OMEGA,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            SurrogateSpec::Fda { omega, .. } if !(omega > 0.0 && omega.is_finite()) => {
                Err(Error::invalid(format!("omega must be positive, got {omega}")))
            }
            SurrogateSpec::TanhAlike { beta } | SurrogateSpec::SignSwish { beta }
                if !(beta > 0.0 && beta.is_finite()) =>
            {
                Err(Error::invalid(format!("beta must be positive, got {beta}")))
            }
            _ => Ok(()),
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            SurrogateSpec::Ste { gated: false } => "ste",
            SurrogateSpec::Ste { gated: true } => "ste_gated",
            SurrogateSpec::Fda { .. } => "fda",
            SurrogateSpec::TanhAlike { .. } => "tanh",
            SurrogateSpec::SignSwish { .. } => "signswish",
        }
    }

    pub fn terms(&self) -> Option<usize> {
        match self {
            SurrogateSpec::Fda { terms, .. } => Some(*terms),
            _ => None,
        }
    }

    /// Returns the same rule with a new term count. Only the Fourier rule has
    /// one; for every other kind the spec is returned unchanged.
    pub fn with_terms(self, n: usize) -> Self {
        match self {
            SurrogateSpec::Fda { omega, .. } => SurrogateSpec::Fda { terms: n, omega },
            other => other,
        }
    }

    /// Compact text form, e.g. `fda:10:3.141592653589793`; inverse of
    /// [`SurrogateSpec::decode`].
    pub fn encode(&self) -> String {
        match *self {
            SurrogateSpec::Ste { gated: false } => "ste".into(),
            SurrogateSpec::Ste { gated: true } => "ste_gated".into(),
            SurrogateSpec::Fda { terms, omega } => format!("fda:{terms}:{omega}"),
            SurrogateSpec::TanhAlike { beta } => format!("tanh:{beta}"),
            SurrogateSpec::SignSwish { beta } => format!("signswish:{beta}"),
        }
    }

    pub fn decode(s: &str) -> Result<Self> {
        let bad = || Error::invalid(format!("malformed surrogate spec '{s}'"));
        let parts: Vec<&str> = s.split(':').collect();
        let num = |i: usize| parts.get(i).ok_or_else(bad)?.parse::<f64>().map_err(|_| bad());
        let spec = match parts[0] {
            "ste" if parts.len() == 1 => SurrogateSpec::ste(),
            "ste_gated" if parts.len() == 1 => SurrogateSpec::Ste { gated: true },
            "fda" if parts.len() == 3 => SurrogateSpec::Fda {
                terms: parts[1].parse().map_err(|_| bad())?,
                omega: num(2)?,
            },
            "tanh" if parts.len() == 2 => SurrogateSpec::TanhAlike { beta: num(1)? },
            "signswish" if parts.len() == 2 => SurrogateSpec::SignSwish { beta: num(1)? },
            _ => return Err(bad()),
        };
        spec.validate()?;
        Ok(spec)
    }

    /// `upstream ⊙ surrogate′(t)`, or the clipped pass-through for STE.
    pub fn backward<T: Scalar>(&self, upstream: &Tensor<T>, t: &Tensor<T>) -> Result<Tensor<T>> {
        match *self {
            SurrogateSpec::Ste { gated } => ste_backward(upstream, t, gated),
            SurrogateSpec::Fda { terms, omega } => fda_backward(upstream, t, terms, omega),
            SurrogateSpec::TanhAlike { beta } => baseline_backward(Baseline::TanhAlike, upstream, t, beta),
            SurrogateSpec::SignSwish { beta } => baseline_backward(Baseline::SignSwish, upstream, t, beta),
        }
    }

    /// The scalar derivative used by the backward rule, where one exists.
    /// STE is a rule on the gradient value, not a derivative, so it has none.
    pub fn derivative(&self, t: f64) -> Option<f64> {
        match *self {
            SurrogateSpec::Ste { .. } => None,
            SurrogateSpec::Fda { terms, omega } => Some(fda_derivative(t, terms, omega)),
            SurrogateSpec::TanhAlike { beta } => Some(tanh_alike_derivative(t, beta)),
            SurrogateSpec::SignSwish { beta } => Some(sign_swish_derivative(t, beta)),
        }
    }
}

/// `+1` for `t > 0`, `-1` otherwise (zero maps to `-1`).
#[inline]
pub fn sign<T: Scalar>(t: T) -> T {
    if t > T::ZERO {
        T::ONE
    } else {
        -T::ONE
    }
}

pub fn sign_forward<T: Scalar>(t: &Tensor<T>) -> Result<Tensor<T>> {
    t.check_finite("sign")?;
    Ok(t.map(sign))
}

fn check_pair<T: Scalar>(op: &'static str, upstream: &Tensor<T>, t: &Tensor<T>) -> Result<()> {
    if upstream.shape() != t.shape() {
        return Err(Error::shape(op, t.shape(), upstream.shape()));
    }
    Ok(())
}

pub fn ste_backward<T: Scalar>(upstream: &Tensor<T>, t: &Tensor<T>, gated: bool) -> Result<Tensor<T>> {
    check_pair("ste_backward", upstream, t)?;
    if gated {
        upstream.zip_map(t, "ste_backward", |u, x| if x.abs() <= T::ONE { u } else { T::ZERO })
    } else {
        Ok(upstream.map(|u| u.max(-T::ONE).min(T::ONE)))
    }
}

/// Runs the odd-harmonic recurrence `h_{i+1} = 2cos(2θ)·h_i − h_{i−1}` and
/// returns `(Σ sin((2i+1)θ)/(2i+1), Σ cos((2i+1)θ))` over `i = 0..=n`.
fn odd_harmonic_sums(theta: f64, n: usize) -> (f64, f64) {
    let (s1, c1) = theta.sin_cos();
    let two_cos2 = 2.0 * (2.0 * theta).cos();
    let (mut s_prev, mut s) = (-s1, s1);
    let (mut c_prev, mut c) = (c1, c1);
    let mut sin_sum = s1;
    let mut cos_sum = c1;
    for i in 1..=n {
        let s_next = two_cos2 * s - s_prev;
        let c_next = two_cos2 * c - c_prev;
        s_prev = s;
        s = s_next;
        c_prev = c;
        c = c_next;
        sin_sum += s / (2 * i + 1) as f64;
        cos_sum += c;
    }
    (sin_sum, cos_sum)
}

/// `ŝₙ(t)`.
pub fn fda_value(t: f64, n: usize, omega: f64) -> f64 {
    4.0 / PI * odd_harmonic_sums(omega * t, n).0
}

/// `ŝₙ′(t)`.
pub fn fda_derivative(t: f64, n: usize, omega: f64) -> f64 {
    4.0 * omega / PI * odd_harmonic_sums(omega * t, n).1
}

fn check_omega(omega: f64) -> Result<()> {
    if omega > 0.0 && omega.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid(format!("omega must be positive, got {omega}")))
    }
}

pub fn fda_partial_sum<T: Scalar>(t: &Tensor<T>, n: usize, omega: f64) -> Result<Tensor<T>> {
    check_omega(omega)?;
    t.check_finite("fda_partial_sum")?;
    Ok(t.map(|x| T::from_f64(fda_value(x.to_f64(), n, omega))))
}

pub fn fda_backward<T: Scalar>(upstream: &Tensor<T>, t: &Tensor<T>, n: usize, omega: f64) -> Result<Tensor<T>> {
    check_omega(omega)?;
    check_pair("fda_backward", upstream, t)?;
    upstream.zip_map(t, "fda_backward", |u, x| {
        u * T::from_f64(fda_derivative(x.to_f64(), n, omega))
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Baseline {
    TanhAlike,
    SignSwish,
}

pub fn tanh_alike(t: f64, beta: f64) -> f64 {
    (beta * t).tanh()
}

pub fn tanh_alike_derivative(t: f64, beta: f64) -> f64 {
    let th = (beta * t).tanh();
    beta * (1.0 - th * th)
}

fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `2σ(βt)(1 + βt(1 − σ(βt))) − 1`.
pub fn sign_swish(t: f64, beta: f64) -> f64 {
    let x = beta * t;
    let s = logistic(x);
    2.0 * s * (1.0 + x * (1.0 - s)) - 1.0
}

/// `2βσ(1−σ)(2 + βt(1 − 2σ))` with `σ = σ(βt)`.
pub fn sign_swish_derivative(t: f64, beta: f64) -> f64 {
    let x = beta * t;
    let s = logistic(x);
    2.0 * beta * s * (1.0 - s) * (2.0 + x * (1.0 - 2.0 * s))
}

pub fn baseline_backward<T: Scalar>(
    kind: Baseline,
    upstream: &Tensor<T>,
    t: &Tensor<T>,
    beta: f64,
) -> Result<Tensor<T>> {
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(Error::invalid(format!("beta must be positive, got {beta}")));
    }
    check_pair("baseline_backward", upstream, t)?;
    let d = match kind {
        Baseline::TanhAlike => tanh_alike_derivative,
        Baseline::SignSwish => sign_swish_derivative,
    };
    upstream.zip_map(t, "baseline_backward", |u, x| u * T::from_f64(d(x.to_f64(), beta)))
}

/// Tape node: `sign` forward, surrogate backward.
struct SignOp(SurrogateSpec);

impl<T: Scalar> Op<T> for SignOp {
    fn name(&self) -> &'static str {
        "surrogate_sign"
    }

    fn forward(&mut self, inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
        sign_forward(inputs[0])
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        upstream: &[T],
        _needs: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let up = Tensor::from_parts(inputs[0].shape().to_vec(), upstream.to_vec());
        Ok(vec![Some(self.0.backward(&up, inputs[0])?)])
    }
}

impl<T: Scalar> Graph<T> {
    pub fn surrogate_sign(&mut self, t: Var, surrogate: SurrogateSpec) -> Result<Var> {
        surrogate.validate()?;
        self.apply(SignOp(surrogate), &[t])
    }
}
