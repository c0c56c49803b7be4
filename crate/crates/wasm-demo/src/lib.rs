//! Browser bindings for the demo page in `www/`.
//!
//! Build with `wasm-pack build crates/wasm-demo --target web --out-dir www/pkg`.

use std::f64::consts::PI;

use fdabnn::analysis::{fs_mse, parseval_mse, spectrum, SpectrumFn};
use fdabnn::surrogate::{
    fda_derivative, fda_value, sign, sign_swish, sign_swish_derivative, tanh_alike, tanh_alike_derivative,
};
use wasm_bindgen::prelude::*;

const DEMO_SAMPLES: usize = 1 << 15;

fn pick(kind: &str, terms: usize, beta: f64) -> Result<SpectrumFn, JsError> {
    match kind {
        "sign" => Ok(SpectrumFn::Sign),
        "fda" => Ok(SpectrumFn::Fda { n: terms }),
        "tanh" => Ok(SpectrumFn::TanhAlike { beta }),
        "signswish" => Ok(SpectrumFn::SignSwish { beta }),
        other => Err(JsError::new(&format!("unknown function '{other}'"))),
    }
}

/// Values and derivatives at `ts`, interleaved as `[f(t0), f'(t0), f(t1), ...]`.
/// The series uses ω = π (period 2). `sign` reports a zero derivative.
#[wasm_bindgen]
pub fn surrogate_curve(kind: &str, terms: usize, beta: f64, ts: &[f64]) -> Result<Vec<f64>, JsError> {
    let f = pick(kind, terms, beta)?;
    let mut out = Vec::with_capacity(2 * ts.len());
    for &t in ts {
        let (v, d) = match f {
            SpectrumFn::Sign => (sign(t), 0.0),
            SpectrumFn::Fda { n } => (fda_value(t, n, PI), fda_derivative(t, n, PI)),
            SpectrumFn::TanhAlike { beta } => (tanh_alike(t, beta), tanh_alike_derivative(t, beta)),
            SpectrumFn::SignSwish { beta } => (sign_swish(t, beta), sign_swish_derivative(t, beta)),
        };
        out.push(v);
        out.push(d);
    }
    Ok(out)
}

/// Sine coefficients of harmonics `1..=max_harmonic` over one period of 2,
/// followed by the same coefficients for `sign`.
#[wasm_bindgen]
pub fn sine_spectrum(kind: &str, terms: usize, beta: f64, max_harmonic: usize) -> Result<Vec<f64>, JsError> {
    let f = pick(kind, terms, beta)?;
    let a = spectrum(f, 2.0, max_harmonic, DEMO_SAMPLES).map_err(|e| JsError::new(&e.to_string()))?;
    let s = spectrum(SpectrumFn::Sign, 2.0, max_harmonic, DEMO_SAMPLES).map_err(|e| JsError::new(&e.to_string()))?;
    Ok(a.harmonics.iter().chain(&s.harmonics).map(|h| h.sine).collect())
}

/// `[quadrature, closed form]` pairs of the series MSE for `n = 0..=max_terms`.
#[wasm_bindgen]
pub fn mse_curve(max_terms: usize) -> Result<Vec<f64>, JsError> {
    let mut out = Vec::with_capacity(2 * (max_terms + 1));
    for n in 0..=max_terms {
        out.push(fs_mse(n, PI, DEMO_SAMPLES).map_err(|e| JsError::new(&e.to_string()))?);
        out.push(parseval_mse(n));
    }
    Ok(out)
}
