//! Learnable error compensation for the truncated-series gradient.
//!
//! For a row vector `t ∈ R^{1×d}` the adapter computes
//! `ê(t) = σ(t·W1)·W2 + η(t)` with a `d/k`-wide bottleneck. During training the
//! binarizer becomes `z = sign(t) + α·ê(t)` in the forward pass while the
//! backward pass uses the surrogate derivative in place of `sign′`. A batch
//! of rows shares one adapter.

use rand::Rng;

use crate::autograd::{Graph, Op, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::surrogate::{sign, SurrogateSpec};
use crate::tensor::Tensor;

pub const DEFAULT_REDUCTION: usize = 64;
pub const DEFAULT_SHORTCUT_GAIN: f64 = 0.1;

/// Shortcut branch `η` of the adapter.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShortcutKind {
    Zero,
    Linear,
    Sine,
}

impl ShortcutKind {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "zero" | "none" => Some(ShortcutKind::Zero),
            "linear" => Some(ShortcutKind::Linear),
            "sine" | "sin" => Some(ShortcutKind::Sine),
            _ => None,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            ShortcutKind::Zero => "zero",
            ShortcutKind::Linear => "linear",
            ShortcutKind::Sine => "sine",
        }
    }

    pub fn eval(self, gain: f64, x: f64) -> f64 {
        match self {
            ShortcutKind::Zero => 0.0,
            ShortcutKind::Linear => gain * x,
            ShortcutKind::Sine => gain * x.sin(),
        }
    }

    pub fn derivative(self, gain: f64, x: f64) -> f64 {
        match self {
            ShortcutKind::Zero => 0.0,
            ShortcutKind::Linear => gain,
            ShortcutKind::Sine => gain * x.cos(),
        }
    }
}

/// Bottleneck width `⌈d/k⌉`, never below one.
pub fn hidden_width(d: usize, k: usize) -> usize {
    d.div_ceil(k.max(1)).max(1)
}

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseAdapter<T> {
    pub w1: Tensor<T>,
    pub w2: Tensor<T>,
    reduction: usize,
    shortcut: ShortcutKind,
    gain: f64,
}

/// Pre-activation `t·W1` saved by the forward pass.
#[derive(Clone, Debug)]
pub struct AdapterCache<T> {
    pub pre: Tensor<T>,
}

#[derive(Clone, Debug)]
pub struct CompositeGrads<T> {
    pub grad_t: Tensor<T>,
    pub grad_w1: Tensor<T>,
    pub grad_w2: Tensor<T>,
}

impl<T: Scalar> NoiseAdapter<T> {
    /// `W1 ~ U(±1/√d)`, `W2 = 0`, so `ê(t) = η(t)` at initialization.
    pub fn new(d: usize, reduction: usize, shortcut: ShortcutKind, gain: f64, rng: &mut impl Rng) -> Result<Self> {
        if d == 0 || reduction == 0 {
            return Err(Error::invalid(format!(
                "adapter needs d >= 1 and k >= 1, got d={d} k={reduction}"
            )));
        }
        let h = hidden_width(d, reduction);
        let bound = 1.0 / (d as f64).sqrt();
        let w1 = Tensor::from_fn(&[d, h], |_| T::from_f64(rng.gen_range(-bound..bound)));
        Ok(NoiseAdapter {
            w1,
            w2: Tensor::zeros(&[h, d]),
            reduction,
            shortcut,
            gain,
        })
    }

    pub fn from_weights(
        w1: Tensor<T>,
        w2: Tensor<T>,
        reduction: usize,
        shortcut: ShortcutKind,
        gain: f64,
    ) -> Result<Self> {
        let (s1, s2) = (w1.shape(), w2.shape());
        if s1.len() != 2 || s2.len() != 2 || s1[1] != s2[0] || s1[0] != s2[1] {
            return Err(Error::shape("noise_adapter", s1, s2));
        }
        if reduction == 0 {
            return Err(Error::invalid("adapter reduction factor must be >= 1"));
        }
        Ok(NoiseAdapter {
            w1,
            w2,
            reduction,
            shortcut,
            gain,
        })
    }

    pub fn width(&self) -> usize {
        self.w1.shape()[0]
    }

    pub fn hidden(&self) -> usize {
        self.w1.shape()[1]
    }

    pub fn reduction(&self) -> usize {
        self.reduction
    }

    pub fn shortcut(&self) -> ShortcutKind {
        self.shortcut
    }

    pub fn gain(&self) -> f64 {
        self.gain
    }

    pub fn param_count(&self) -> usize {
        self.w1.numel() + self.w2.numel()
    }

    fn check_rows(&self, t: &Tensor<T>) -> Result<usize> {
        let d = self.width();
        if t.rank() != 2 || t.shape()[1] != d {
            return Err(Error::shape("adapter", &[t.shape()[0], d], t.shape()));
        }
        Ok(t.shape()[0])
    }

    /// `ê(t)` for every row of `t: b×d`, plus the cache needed for backward.
    pub fn forward_with_cache(&self, t: &Tensor<T>) -> Result<(Tensor<T>, AdapterCache<T>)> {
        let b = self.check_rows(t)?;
        let (d, h) = (self.width(), self.hidden());
        let mut pre = vec![T::ZERO; b * h];
        T::gemm(b, d, h, t.data(), false, self.w1.data(), false, &mut pre, false);
        let act: Vec<T> = pre.iter().map(|&v| v.max(T::ZERO)).collect();
        let mut out: Vec<T> = t
            .data()
            .iter()
            .map(|&x| T::from_f64(self.shortcut.eval(self.gain, x.to_f64())))
            .collect();
        T::gemm(b, h, d, &act, false, self.w2.data(), false, &mut out, true);
        Ok((
            Tensor::from_parts(vec![b, d], out),
            AdapterCache {
                pre: Tensor::from_parts(vec![b, h], pre),
            },
        ))
    }

    pub fn forward(&self, t: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.forward_with_cache(t)?.0)
    }

    /// `z = sign(t) + α·ê(t)`.
    pub fn composite_forward(&self, t: &Tensor<T>, alpha: f64) -> Result<(Tensor<T>, AdapterCache<T>)> {
        if !(alpha >= 0.0 && alpha.is_finite()) {
            return Err(Error::invalid(format!("alpha must be >= 0, got {alpha}")));
        }
        let (e, cache) = self.forward_with_cache(t)?;
        let a = T::from_f64(alpha);
        let z = t.zip_map(&e, "composite_forward", |x, ev| sign(x) + a * ev)?;
        Ok((z, cache))
    }

    /// Gradients of the composite binarizer for upstream `∂ℓ/∂z`:
    ///
    /// ```text
    /// ∂ℓ/∂t  = α·[(U·W2ᵀ ⊙ 1[tW1 ≥ 0])·W1ᵀ + U ⊙ η′(t)] + surrogate_backward(U, t)
    /// ∂ℓ/∂W1 = α·tᵀ·(U·W2ᵀ ⊙ 1[tW1 ≥ 0])
    /// ∂ℓ/∂W2 = α·σ(tW1)ᵀ·U
    /// ```
    pub fn composite_backward(
        &self,
        upstream: &Tensor<T>,
        t: &Tensor<T>,
        cache: &AdapterCache<T>,
        alpha: f64,
        surrogate: &SurrogateSpec,
    ) -> Result<CompositeGrads<T>> {
        let b = self.check_rows(t)?;
        let (d, h) = (self.width(), self.hidden());
        if upstream.shape() != t.shape() {
            return Err(Error::shape("composite_backward", t.shape(), upstream.shape()));
        }
        if cache.pre.shape() != [b, h] {
            return Err(Error::shape("composite_backward", &[b, h], cache.pre.shape()));
        }
        let a = T::from_f64(alpha);
        let u = upstream.data();

        // U·W2ᵀ gated by the ReLU mask.
        let mut gated = vec![T::ZERO; b * h];
        T::gemm(b, d, h, u, false, self.w2.data(), true, &mut gated, false);
        for (g, &p) in gated.iter_mut().zip(cache.pre.data()) {
            *g = if p >= T::ZERO { *g * a } else { T::ZERO };
        }

        let mut grad_t = surrogate.backward(upstream, t)?.into_data();
        for ((g, &x), &uv) in grad_t.iter_mut().zip(t.data()).zip(u) {
            *g += a * uv * T::from_f64(self.shortcut.derivative(self.gain, x.to_f64()));
        }
        T::gemm(b, h, d, &gated, false, self.w1.data(), true, &mut grad_t, true);

        let mut grad_w1 = vec![T::ZERO; d * h];
        T::gemm(d, b, h, t.data(), true, &gated, false, &mut grad_w1, false);

        let act: Vec<T> = cache.pre.data().iter().map(|&v| v.max(T::ZERO) * a).collect();
        let mut grad_w2 = vec![T::ZERO; h * d];
        T::gemm(h, b, d, &act, true, u, false, &mut grad_w2, false);

        Ok(CompositeGrads {
            grad_t: Tensor::from_parts(vec![b, d], grad_t),
            grad_w1: Tensor::from_parts(vec![d, h], grad_w1),
            grad_w2: Tensor::from_parts(vec![h, d], grad_w2),
        })
    }
}

/// Tape node for the composite binarizer with inputs `[t, W1, W2]`.
struct CompositeSignOp<T> {
    reduction: usize,
    shortcut: ShortcutKind,
    gain: f64,
    alpha: f64,
    surrogate: SurrogateSpec,
    cache: Option<AdapterCache<T>>,
}

impl<T: Scalar> CompositeSignOp<T> {
    fn adapter(&self, w1: &Tensor<T>, w2: &Tensor<T>) -> Result<NoiseAdapter<T>> {
        NoiseAdapter::from_weights(w1.clone(), w2.clone(), self.reduction, self.shortcut, self.gain)
    }
}

impl<T: Scalar> Op<T> for CompositeSignOp<T> {
    fn name(&self) -> &'static str {
        "composite_sign"
    }

    fn forward(&mut self, inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
        let adapter = self.adapter(inputs[1], inputs[2])?;
        let (z, cache) = adapter.composite_forward(inputs[0], self.alpha)?;
        self.cache = Some(cache);
        Ok(z)
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        upstream: &[T],
        _needs: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let cache = self
            .cache
            .as_ref()
            .ok_or_else(|| Error::invalid("composite_sign: missing saved forward state"))?;
        let adapter = self.adapter(inputs[1], inputs[2])?;
        let up = Tensor::from_parts(inputs[0].shape().to_vec(), upstream.to_vec());
        let g = adapter.composite_backward(&up, inputs[0], cache, self.alpha, &self.surrogate)?;
        Ok(vec![Some(g.grad_t), Some(g.grad_w1), Some(g.grad_w2)])
    }
}

impl<T: Scalar> Graph<T> {
    /// Records `z = sign(t) + α·ê(t)` for `t: b×d` whose backward rule is the
    /// surrogate derivative plus the adapter branch.
    #[allow(clippy::too_many_arguments)]
    pub fn composite_sign(
        &mut self,
        t: Var,
        w1: Var,
        w2: Var,
        adapter: &NoiseAdapter<T>,
        alpha: f64,
        surrogate: SurrogateSpec,
    ) -> Result<Var> {
        self.apply(
            CompositeSignOp {
                reduction: adapter.reduction(),
                shortcut: adapter.shortcut(),
                gain: adapter.gain(),
                alpha,
                surrogate,
                cache: None,
            },
            &[t, w1, w2],
        )
    }
}

/// Linear decay of the adapter weight `α` to zero at `total_epochs`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AlphaSchedule {
    pub alpha0: f64,
    pub total_epochs: usize,
}

impl AlphaSchedule {
    pub fn new(alpha0: f64, total_epochs: usize) -> Result<Self> {
        if !(alpha0 >= 0.0 && alpha0.is_finite()) {
            return Err(Error::invalid(format!("alpha0 must be >= 0, got {alpha0}")));
        }
        if total_epochs == 0 {
            return Err(Error::invalid("alpha schedule needs at least one epoch"));
        }
        Ok(AlphaSchedule { alpha0, total_epochs })
    }

    /// `alpha0·(1 − epoch/total_epochs)`; exactly zero at the last epoch.
    pub fn alpha_at(&self, epoch: usize) -> Result<f64> {
        if epoch > self.total_epochs {
            return Err(Error::invalid(format!(
                "epoch {epoch} outside alpha schedule of {} epochs",
                self.total_epochs
            )));
        }
        if epoch == self.total_epochs {
            return Ok(0.0);
        }
        Ok(self.alpha0 * (1.0 - epoch as f64 / self.total_epochs as f64))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn zero_adapter(d: usize, k: usize, shortcut: ShortcutKind, gain: f64) -> NoiseAdapter<f64> {
        let h = hidden_width(d, k);
        NoiseAdapter::from_weights(Tensor::zeros(&[d, h]), Tensor::zeros(&[h, d]), k, shortcut, gain).unwrap()
    }

    fn row(data: &[f64]) -> Tensor<f64> {
        Tensor::new(vec![1, data.len()], data.to_vec()).unwrap()
    }

    #[test]
    fn zero_weights_and_shortcut() {
        let a = zero_adapter(3, 1, ShortcutKind::Zero, 0.1);
        assert_eq!(a.forward(&row(&[0.5, -0.2, 0.9])).unwrap().data(), &[0.0; 3]);
        let a = zero_adapter(1, 1, ShortcutKind::Sine, 0.1);
        let e = a.forward(&row(&[PI / 2.0])).unwrap();
        assert!((e.data()[0] - 0.1).abs() < 1e-15);
    }

    #[test]
    fn forward_matches_hand_composition() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut a = NoiseAdapter::<f64>::new(6, 2, ShortcutKind::Linear, 0.1, &mut rng).unwrap();
        a.w2 = Tensor::from_fn(&[3, 6], |i| ((i * 7 % 5) as f64 - 2.0) * 0.3);
        let t = Tensor::from_fn(&[2, 6], |i| (i as f64 * 0.77).sin());
        let got = a.forward(&t).unwrap();
        for r in 0..2 {
            for j in 0..6 {
                let mut acc = 0.1 * t.data()[r * 6 + j];
                for k in 0..3 {
                    let mut pre = 0.0;
                    for i in 0..6 {
                        pre += t.data()[r * 6 + i] * a.w1.data()[i * 3 + k];
                    }
                    acc += pre.max(0.0) * a.w2.data()[k * 6 + j];
                }
                assert!((got.data()[r * 6 + j] - acc).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn width_mismatch_is_an_error() {
        let a = zero_adapter(4, 2, ShortcutKind::Zero, 0.1);
        assert!(a.forward(&row(&[1.0, 2.0])).is_err());
        assert!(NoiseAdapter::from_weights(
            Tensor::<f64>::zeros(&[4, 2]),
            Tensor::zeros(&[3, 4]),
            2,
            ShortcutKind::Zero,
            0.1
        )
        .is_err());
    }

    #[test]
    fn composite_forward_cases() {
        let a = zero_adapter(3, 1, ShortcutKind::Zero, 0.1);
        let t = row(&[0.4, -0.1, 0.0]);
        assert_eq!(a.composite_forward(&t, 0.0).unwrap().0.data(), &[1.0, -1.0, -1.0]);
        assert_eq!(a.composite_forward(&t, 1.0).unwrap().0.data(), &[1.0, -1.0, -1.0]);
        // Adapter returning exactly 0.2 for t = 0.3: linear shortcut with gain 2/3.
        let a = zero_adapter(1, 1, ShortcutKind::Linear, 0.2 / 0.3);
        let z = a.composite_forward(&row(&[0.3]), 0.5).unwrap().0;
        assert!((z.data()[0] - 1.1).abs() < 1e-15);
        assert!(a.composite_forward(&row(&[0.3]), -0.5).is_err());
    }

    #[test]
    fn alpha_zero_reduces_to_pure_fda() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut a = NoiseAdapter::<f64>::new(8, 4, ShortcutKind::Sine, 0.1, &mut rng).unwrap();
        a.w2 = Tensor::from_fn(&[2, 8], |i| i as f64 * 0.1 - 0.5);
        let t = Tensor::from_fn(&[3, 8], |i| (i as f64 * 0.31).cos() * 0.9);
        let up = Tensor::from_fn(&[3, 8], |i| (i as f64 * 0.13).sin());
        let (_, cache) = a.composite_forward(&t, 0.0).unwrap();
        let fda = SurrogateSpec::fda(5);
        let g = a.composite_backward(&up, &t, &cache, 0.0, &fda).unwrap();
        assert_eq!(g.grad_t, fda.backward(&up, &t).unwrap());
        assert!(g.grad_w1.data().iter().all(|&x| x == 0.0));
        assert!(g.grad_w2.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn linear_shortcut_adds_constant_gradient_bias() {
        let a = zero_adapter(4, 2, ShortcutKind::Linear, 0.1);
        let t = row(&[0.2, -0.7, 0.5, 0.05]);
        let up = row(&[1.0, -2.0, 0.5, 3.0]);
        let (_, cache) = a.composite_forward(&t, 0.5).unwrap();
        let fda = SurrogateSpec::fda(3);
        let with = a.composite_backward(&up, &t, &cache, 0.5, &fda).unwrap().grad_t;
        let without = fda.backward(&up, &t).unwrap();
        for ((w, o), u) in with.data().iter().zip(without.data()).zip(up.data()) {
            assert!((w - o - 0.5 * 0.1 * u).abs() < 1e-14);
        }
    }

    #[test]
    fn sine_shortcut_gradient_positive_on_clip_range() {
        for k in 0..=200 {
            let x = -1.0 + k as f64 * 0.01;
            assert!(ShortcutKind::Sine.derivative(0.1, x) > 0.0);
        }
    }

    #[test]
    fn parameter_count_uses_ceil_with_floor_of_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = NoiseAdapter::<f32>::new(4608, DEFAULT_REDUCTION, ShortcutKind::Sine, 0.1, &mut rng).unwrap();
        assert_eq!(a.hidden(), 72);
        assert_eq!(a.param_count(), 2 * 4608 * 72);
        let a = NoiseAdapter::<f32>::new(100, DEFAULT_REDUCTION, ShortcutKind::Sine, 0.1, &mut rng).unwrap();
        assert_eq!(a.param_count(), 2 * 100 * 2);
        assert_eq!(hidden_width(10, 64), 1);
    }

    #[test]
    fn alpha_schedule_endpoints() {
        let s = AlphaSchedule::new(0.1, 10).unwrap();
        assert_eq!(s.alpha_at(0).unwrap(), 0.1);
        assert!((s.alpha_at(5).unwrap() - 0.05).abs() < 1e-15);
        assert_eq!(s.alpha_at(10).unwrap(), 0.0);
        assert!(s.alpha_at(11).is_err());
        let mut prev = f64::INFINITY;
        for e in 0..=10 {
            let a = s.alpha_at(e).unwrap();
            assert!(a <= prev);
            prev = a;
        }
    }
}
