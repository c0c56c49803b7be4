//! Numerical checks of the truncated series: mean-square error against the
//! square wave, projection spectra, pointwise residuals and finite-difference
//! gradient checks.
//!
//! All quadratures use a uniform grid shifted by half a step, so with an even
//! sample count no sample lands on a jump of the square wave (`t = 0`,
//! `t = ±T/2`). For trigonometric polynomials of degree below `N/2` this rule
//! is exact.

use std::f64::consts::PI;

use crate::adapter::{hidden_width, NoiseAdapter, ShortcutKind};
use crate::error::{Error, Result};
use crate::surrogate::{fda_value, sign, sign_swish, tanh_alike, SurrogateSpec};
use crate::tensor::Tensor;

pub const MIN_SAMPLES: usize = 10_000;
/// Default grid for spectra, fine enough for 1e-9 coefficient agreement on
/// the first few dozen harmonics.
pub const SPECTRUM_SAMPLES: usize = 1 << 20;

/// Square wave of period `2π/ω` that equals `sign` on `(-T/2, T/2)`;
/// `s(0) = -1`.
pub fn square_wave(t: f64, omega: f64) -> f64 {
    let period = 2.0 * PI / omega;
    let u = t - period * (t / period + 0.5).floor();
    if u > 0.0 {
        1.0
    } else {
        -1.0
    }
}

/// `r(t) = s(t) − ŝₙ(t)`, elementwise.
pub fn residual(t: &Tensor<f64>, n: usize, omega: f64) -> Result<Tensor<f64>> {
    if !(omega > 0.0 && omega.is_finite()) {
        return Err(Error::invalid(format!("omega must be positive, got {omega}")));
    }
    Ok(t.map(|x| square_wave(x, omega) - fda_value(x, n, omega)))
}

fn grid(omega: f64, samples: usize) -> impl Iterator<Item = f64> {
    let period = 2.0 * PI / omega;
    let h = period / samples as f64;
    (0..samples).map(move |j| -period / 2.0 + (j as f64 + 0.5) * h)
}

fn check_samples(samples: usize) -> Result<()> {
    if samples < MIN_SAMPLES || samples % 2 == 1 {
        return Err(Error::invalid(format!(
            "quadrature needs an even sample count >= {MIN_SAMPLES}, got {samples}"
        )));
    }
    Ok(())
}

/// `(1/T)∫_T (s(t) − ŝₙ(t))² dt` on the offset grid.
pub fn fs_mse(n: usize, omega: f64, samples: usize) -> Result<f64> {
    check_samples(samples)?;
    if !(omega > 0.0 && omega.is_finite()) {
        return Err(Error::invalid(format!("omega must be positive, got {omega}")));
    }
    let sum: f64 = grid(omega, samples)
        .map(|t| {
            let r = square_wave(t, omega) - fda_value(t, n, omega);
            r * r
        })
        .sum();
    Ok(sum / samples as f64)
}

/// Residual energy from Parseval: `1 − (8/π²)·Σ_{i=0..n} (2i+1)⁻²`.
pub fn parseval_mse(n: usize) -> f64 {
    1.0 - 8.0 / (PI * PI) * (0..=n).map(|i| 1.0 / ((2 * i + 1) as f64).powi(2)).sum::<f64>()
}

/// Function whose spectrum is taken.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum SpectrumFn {
    Sign,
    Fda { n: usize },
    TanhAlike { beta: f64 },
    SignSwish { beta: f64 },
}

impl SpectrumFn {
    pub fn label(&self) -> String {
        match self {
            SpectrumFn::Sign => "sign".into(),
            SpectrumFn::Fda { n } => format!("fda_n{n}"),
            SpectrumFn::TanhAlike { beta } => format!("tanh_b{beta}"),
            SpectrumFn::SignSwish { beta } => format!("signswish_b{beta}"),
        }
    }

    /// Value on one period centred at zero; the series uses `ω = 2π/T`.
    pub fn eval(&self, t: f64, omega: f64) -> f64 {
        match *self {
            SpectrumFn::Sign => sign(t),
            SpectrumFn::Fda { n } => fda_value(t, n, omega),
            SpectrumFn::TanhAlike { beta } => tanh_alike(t, beta),
            SpectrumFn::SignSwish { beta } => sign_swish(t, beta),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Harmonic {
    pub index: usize,
    pub sine: f64,
    pub cosine: f64,
}

impl Harmonic {
    pub fn amplitude(&self) -> f64 {
        self.sine.hypot(self.cosine)
    }

    pub fn energy(&self) -> f64 {
        self.sine * self.sine + self.cosine * self.cosine
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpectrumReport {
    pub function: SpectrumFn,
    pub harmonics: Vec<Harmonic>,
    pub period: f64,
    pub sample_count: usize,
}

/// Projection coefficients `b_i = (2/T)∫ f sin(iωt)`, `a_i = (2/T)∫ f cos(iωt)`
/// for `i = 1..=max_harmonic`, over one period `[-T/2, T/2)`.
pub fn spectrum(f: SpectrumFn, period: f64, max_harmonic: usize, samples: usize) -> Result<SpectrumReport> {
    if max_harmonic == 0 {
        return Err(Error::invalid("max_harmonic must be >= 1"));
    }
    if !(period > 0.0 && period.is_finite()) {
        return Err(Error::invalid(format!("period must be positive, got {period}")));
    }
    check_samples(samples)?;
    let omega = 2.0 * PI / period;
    let mut sine = vec![0.0; max_harmonic];
    let mut cosine = vec![0.0; max_harmonic];
    for t in grid(omega, samples) {
        let v = f.eval(t, omega);
        // sin(iθ), cos(iθ) by the Chebyshev recurrence.
        let (s1, c1) = (omega * t).sin_cos();
        let (mut s_prev, mut c_prev) = (0.0, 1.0);
        let (mut s, mut c) = (s1, c1);
        for i in 0..max_harmonic {
            sine[i] += v * s;
            cosine[i] += v * c;
            let (s_next, c_next) = (2.0 * c1 * s - s_prev, 2.0 * c1 * c - c_prev);
            (s_prev, c_prev, s, c) = (s, c, s_next, c_next);
        }
    }
    let k = 2.0 / samples as f64;
    let harmonics = (0..max_harmonic)
        .map(|i| Harmonic {
            index: i + 1,
            sine: sine[i] * k,
            cosine: cosine[i] * k,
        })
        .collect();
    Ok(SpectrumReport {
        function: f,
        harmonics,
        period,
        sample_count: samples,
    })
}

/// Rows of `(harmonic, sine, cosine, amplitude delta, energy delta)` of `f`
/// relative to `reference`, the two readings of a "difference" spectrum.
pub fn spectrum_deltas(f: &SpectrumReport, reference: &SpectrumReport) -> Result<Vec<(Harmonic, f64, f64)>> {
    if f.harmonics.len() != reference.harmonics.len() {
        return Err(Error::shape(
            "spectrum_deltas",
            &[reference.harmonics.len()],
            &[f.harmonics.len()],
        ));
    }
    Ok(f.harmonics
        .iter()
        .zip(&reference.harmonics)
        .map(|(h, r)| (*h, h.amplitude() - r.amplitude(), h.energy() - r.energy()))
        .collect())
}

/// A scalar function with an analytic gradient.
pub trait GradientProbe {
    fn dim(&self) -> usize;
    fn value(&self, x: &[f64]) -> f64;
    fn gradient(&self, x: &[f64]) -> Result<Vec<f64>>;

    /// `f(x + step·e_i) − f(x)`. Override when the difference can be formed
    /// without subtracting two nearly equal values.
    fn shift(&self, x: &[f64], i: usize, step: f64) -> f64 {
        let mut y = x.to_vec();
        y[i] += step;
        self.value(&y) - self.value(x)
    }
}

/// Largest per-coordinate `|analytic − numeric| / max(|analytic|, 1e−12)`.
///
/// The numeric derivative is the fourth-order central difference
/// `(8(f(x+h) − f(x−h)) − (f(x+2h) − f(x−2h))) / 12h`.
pub fn finite_diff_check(probe: &dyn GradientProbe, point: &[f64], eps: f64) -> Result<f64> {
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::invalid(format!("eps must lie in [1e-7, 1e-3], got {eps}")));
    }
    if point.len() != probe.dim() {
        return Err(Error::shape("finite_diff_check", &[probe.dim()], &[point.len()]));
    }
    let f0 = probe.value(point);
    if !f0.is_finite() {
        return Err(Error::Numerical(format!("probe value {f0} at the base point")));
    }
    let analytic = probe.gradient(point)?;
    let mut worst = 0.0f64;
    for i in 0..point.len() {
        let d = [-2.0 * eps, -eps, eps, 2.0 * eps].map(|h| probe.shift(point, i, h));
        if let Some(v) = d.iter().find(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!("probe value {v} near coordinate {i}")));
        }
        let numeric = (8.0 * (d[2] - d[1]) - (d[3] - d[0])) / (12.0 * eps);
        let err = (analytic[i] - numeric).abs() / analytic[i].abs().max(1e-12);
        worst = worst.max(err);
    }
    Ok(worst)
}

/// `ŝₙ(t + step) − ŝₙ(t)` through `sin a − sin b = 2 cos((a+b)/2) sin((a−b)/2)`.
pub fn fda_shift(t: f64, step: f64, n: usize, omega: f64) -> f64 {
    let mid = omega * (t + 0.5 * step);
    let half = 0.5 * omega * step;
    let sum: f64 = (0..=n)
        .map(|i| {
            let k = (2 * i + 1) as f64;
            2.0 * (k * mid).cos() * (k * half).sin() / k
        })
        .sum();
    4.0 / PI * sum
}

/// `Σ_j u_j · ŝₙ(x_j)` with gradient `u_j · ŝₙ′(x_j)` taken from the
/// surrogate backward rule.
pub struct SeriesProbe {
    pub n: usize,
    pub omega: f64,
    pub weights: Vec<f64>,
}

impl GradientProbe for SeriesProbe {
    fn dim(&self) -> usize {
        self.weights.len()
    }

    fn value(&self, x: &[f64]) -> f64 {
        x.iter()
            .zip(&self.weights)
            .map(|(&t, &u)| u * fda_value(t, self.n, self.omega))
            .sum()
    }

    fn gradient(&self, x: &[f64]) -> Result<Vec<f64>> {
        let spec = SurrogateSpec::Fda {
            terms: self.n,
            omega: self.omega,
        };
        let t = Tensor::new(vec![x.len()], x.to_vec())?;
        let u = Tensor::new(vec![x.len()], self.weights.clone())?;
        Ok(spec.backward(&u, &t)?.into_data())
    }

    fn shift(&self, x: &[f64], i: usize, step: f64) -> f64 {
        self.weights[i] * fda_shift(x[i], step, self.n, self.omega)
    }
}

/// `Σ U ⊙ (ŝₙ(t) + α·ê(t))` over the flat vector `[t (1×d), W1 (d×h), W2 (h×d)]`.
///
/// Values come from a direct loop evaluation of the forward formula; the
/// gradient is the composite binarizer's backward rule.
pub struct CompositeProbe {
    pub d: usize,
    pub reduction: usize,
    pub shortcut: ShortcutKind,
    pub gain: f64,
    pub alpha: f64,
    pub n: usize,
    pub omega: f64,
    pub upstream: Vec<f64>,
}

impl CompositeProbe {
    pub fn hidden(&self) -> usize {
        hidden_width(self.d, self.reduction)
    }

    /// Pre-activations `t·W1` at `x`, for keeping probes away from ReLU kinks.
    pub fn pre_activations(&self, x: &[f64]) -> Vec<f64> {
        let (d, h) = (self.d, self.hidden());
        let w1 = &x[d..d + d * h];
        (0..h).map(|j| (0..d).map(|i| x[i] * w1[i * h + j]).sum()).collect()
    }

    /// `ê(t)` for the parameters packed in `x`.
    fn adapter_out(&self, x: &[f64]) -> Vec<f64> {
        let (d, h) = (self.d, self.hidden());
        let w2 = &x[d + d * h..];
        let hidden: Vec<f64> = self.pre_activations(x).into_iter().map(|p| p.max(0.0)).collect();
        (0..d)
            .map(|j| (0..h).map(|k| hidden[k] * w2[k * d + j]).sum::<f64>() + self.shortcut.eval(self.gain, x[j]))
            .collect()
    }

    fn tensors(&self, x: &[f64]) -> Result<(Tensor<f64>, NoiseAdapter<f64>)> {
        let (d, h) = (self.d, self.hidden());
        let t = Tensor::new(vec![1, d], x[..d].to_vec())?;
        let w1 = Tensor::new(vec![d, h], x[d..d + d * h].to_vec())?;
        let w2 = Tensor::new(vec![h, d], x[d + d * h..].to_vec())?;
        let adapter = NoiseAdapter::from_weights(w1, w2, self.reduction, self.shortcut, self.gain)?;
        Ok((t, adapter))
    }
}

impl GradientProbe for CompositeProbe {
    fn dim(&self) -> usize {
        let h = self.hidden();
        self.d + 2 * self.d * h
    }

    fn value(&self, x: &[f64]) -> f64 {
        let e = self.adapter_out(x);
        (0..self.d)
            .map(|j| self.upstream[j] * (fda_value(x[j], self.n, self.omega) + self.alpha * e[j]))
            .sum()
    }

    fn gradient(&self, x: &[f64]) -> Result<Vec<f64>> {
        let (t, adapter) = self.tensors(x)?;
        let (_, cache) = adapter.composite_forward(&t, self.alpha)?;
        let up = Tensor::new(vec![1, self.d], self.upstream.clone())?;
        let spec = SurrogateSpec::Fda {
            terms: self.n,
            omega: self.omega,
        };
        let g = adapter.composite_backward(&up, &t, &cache, self.alpha, &spec)?;
        let mut out = g.grad_t.into_data();
        out.extend(g.grad_w1.into_data());
        out.extend(g.grad_w2.into_data());
        Ok(out)
    }

    fn shift(&self, x: &[f64], i: usize, step: f64) -> f64 {
        let mut y = x.to_vec();
        y[i] += step;
        let (e0, e1) = (self.adapter_out(x), self.adapter_out(&y));
        let adapter: f64 = (0..self.d).map(|j| self.upstream[j] * (e1[j] - e0[j])).sum();
        let series = if i < self.d {
            self.upstream[i] * fda_shift(x[i], step, self.n, self.omega)
        } else {
            0.0
        };
        series + self.alpha * adapter
    }
}
