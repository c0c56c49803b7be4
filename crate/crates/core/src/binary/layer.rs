//! Binary convolution with latent full-precision weights.

use rand::Rng;

use crate::adapter::{NoiseAdapter, ShortcutKind};
use crate::autograd::kernels::{self, ConvGeometry};
use crate::autograd::{Graph, Var};
use crate::binary::pack::{pack_activations, pack_weights, xnor_popcount_conv};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::surrogate::{sign, SurrogateSpec};
use crate::tensor::Tensor;

/// Scalar applied to a binarized operand.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScaleMode {
    None,
    /// `mean(|t|)` over the whole tensor.
    LayerMean,
}

impl ScaleMode {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "none" => Some(ScaleMode::None),
            "layer_mean" | "mean" => Some(ScaleMode::LayerMean),
            _ => None,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            ScaleMode::None => "none",
            ScaleMode::LayerMean => "layer_mean",
        }
    }

    pub fn scale_of<T: Scalar>(self, t: &Tensor<T>) -> f64 {
        match self {
            ScaleMode::None => 1.0,
            ScaleMode::LayerMean => t.data().iter().map(|v| v.to_f64().abs()).sum::<f64>() / t.numel() as f64,
        }
    }
}

/// `(sign(t), scale)`.
pub fn binarize<T: Scalar>(t: &Tensor<T>, mode: ScaleMode) -> Result<(Tensor<T>, f64)> {
    if t.numel() == 0 {
        return Err(Error::Empty("binarize"));
    }
    t.check_finite("binarize")?;
    Ok((t.map(sign), mode.scale_of(t)))
}

/// Hyper-parameters of an adapter attached to one operand of a layer.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdapterConfig {
    pub reduction: usize,
    pub shortcut: ShortcutKind,
    pub gain: f64,
}

#[derive(Clone, Debug)]
pub struct BinaryConv2d<T> {
    /// Latent weights, `O×I×k×k`, kept in `[-1, 1]`.
    pub weight: Tensor<T>,
    pub weight_surrogate: SurrogateSpec,
    pub act_surrogate: SurrogateSpec,
    /// Rows are output filters (`d = I·k·k`).
    pub weight_adapter: Option<NoiseAdapter<T>>,
    /// Rows are per-pixel channel vectors (`d = C`).
    pub act_adapter: Option<NoiseAdapter<T>>,
    pub weight_scale: ScaleMode,
    pub act_scale: ScaleMode,
    pub geom: ConvGeometry,
    pub alpha: f64,
}

/// Graph handles for one layer's trainable tensors.
#[derive(Clone, Copy, Debug)]
pub struct BinaryVars {
    pub weight: Var,
    pub weight_adapter: Option<(Var, Var)>,
    pub act_adapter: Option<(Var, Var)>,
}

pub struct BinaryLayerOptions {
    pub weight_surrogate: SurrogateSpec,
    pub act_surrogate: SurrogateSpec,
    pub weight_adapter: Option<AdapterConfig>,
    pub act_adapter: Option<AdapterConfig>,
    pub weight_scale: ScaleMode,
    pub act_scale: ScaleMode,
}

impl<T: Scalar> BinaryConv2d<T> {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        geom: ConvGeometry,
        opts: &BinaryLayerOptions,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        opts.weight_surrogate.validate()?;
        opts.act_surrogate.validate()?;
        let fan_in = in_channels * kernel * kernel;
        let bound = (1.0 / fan_in as f64).sqrt();
        let weight = Tensor::from_fn(&[out_channels, in_channels, kernel, kernel], |_| {
            T::from_f64(rng.gen_range(-bound..bound))
        });
        let weight_adapter = opts
            .weight_adapter
            .map(|c| NoiseAdapter::new(fan_in, c.reduction, c.shortcut, c.gain, rng))
            .transpose()?;
        let act_adapter = opts
            .act_adapter
            .map(|c| NoiseAdapter::new(in_channels, c.reduction, c.shortcut, c.gain, rng))
            .transpose()?;
        Ok(BinaryConv2d {
            weight,
            weight_surrogate: opts.weight_surrogate,
            act_surrogate: opts.act_surrogate,
            weight_adapter,
            act_adapter,
            weight_scale: opts.weight_scale,
            act_scale: opts.act_scale,
            geom,
            alpha: 0.0,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    /// Sets the Fourier term count (ignored by other surrogates) and `α`.
    pub fn set_schedule(&mut self, n: usize, alpha: f64) {
        self.weight_surrogate = self.weight_surrogate.with_terms(n);
        self.act_surrogate = self.act_surrogate.with_terms(n);
        self.alpha = alpha;
    }

    pub fn clip_weights(&mut self) {
        for w in self.weight.data_mut() {
            *w = w.max(-T::ONE).min(T::ONE);
        }
    }

    /// Records the layer's trainable tensors in `g`.
    pub fn register(&self, g: &mut Graph<T>) -> Result<BinaryVars> {
        let weight = g.param(self.weight.clone())?;
        let mut adapter_vars = |a: &Option<NoiseAdapter<T>>| -> Result<Option<(Var, Var)>> {
            a.as_ref()
                .map(|a| Ok((g.param(a.w1.clone())?, g.param(a.w2.clone())?)))
                .transpose()
        };
        let weight_adapter = adapter_vars(&self.weight_adapter)?;
        let act_adapter = adapter_vars(&self.act_adapter)?;
        Ok(BinaryVars {
            weight,
            weight_adapter,
            act_adapter,
        })
    }

    fn binarize_weights(&self, g: &mut Graph<T>, w: Var, vars: &BinaryVars) -> Result<Var> {
        let (Some(adapter), Some((w1, w2))) = (&self.weight_adapter, vars.weight_adapter) else {
            return g.surrogate_sign(w, self.weight_surrogate);
        };
        let shape = g.shape(w).to_vec();
        let flat = g.reshape(w, &[shape[0], shape[1..].iter().product()])?;
        let z = g.composite_sign(flat, w1, w2, adapter, self.alpha, self.weight_surrogate)?;
        g.reshape(z, &shape)
    }

    fn binarize_acts(&self, g: &mut Graph<T>, a: Var, vars: &BinaryVars) -> Result<Var> {
        let (Some(adapter), Some((w1, w2))) = (&self.act_adapter, vars.act_adapter) else {
            return g.surrogate_sign(a, self.act_surrogate);
        };
        let shape = g.shape(a).to_vec();
        let rows = g.custom(
            &[a],
            |x| Ok(nchw_to_rows(x[0])),
            move |_, up| Ok(vec![Some(rows_to_nchw(up, &shape))]),
        )?;
        let z = g.composite_sign(rows, w1, w2, adapter, self.alpha, self.act_surrogate)?;
        let shape = g.shape(a).to_vec();
        g.custom(
            &[z],
            move |x| Ok(rows_to_nchw(x[0], &shape)),
            |_, up| Ok(vec![Some(nchw_to_rows(up))]),
        )
    }

    /// Training forward: clip the input, binarize both operands with their
    /// surrogate (and adapter) backward rules, convolve, scale.
    pub fn forward_graph(&self, g: &mut Graph<T>, x: Var, vars: &BinaryVars) -> Result<Var> {
        let xc = g.hardtanh(x)?;
        let act_scale = self.act_scale.scale_of(g.value(xc));
        let ab = self.binarize_acts(g, xc, vars)?;
        let weight_scale = self.weight_scale.scale_of(&self.weight);
        let wb = self.binarize_weights(g, vars.weight, vars)?;
        let y = g.conv2d(ab, wb, self.geom)?;
        let s = act_scale * weight_scale;
        if s == 1.0 {
            Ok(y)
        } else {
            g.scale(y, T::from_f64(s))
        }
    }

    fn binary_operands(&self, x: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>, f64)> {
        let xc = x.map(|v| v.max(-T::ONE).min(T::ONE));
        let (ab, sa) = binarize(&xc, self.act_scale)?;
        let (wb, sw) = binarize(&self.weight, self.weight_scale)?;
        Ok((ab, wb, sa * sw))
    }

    /// Inference with a float convolution of the `±1` operands.
    pub fn forward_float(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (ab, wb, s) = self.binary_operands(x)?;
        let y = kernels::conv2d(&ab, &wb, self.geom)?;
        Ok(scaled(y, s))
    }

    /// Inference through the bit-packed XNOR-popcount kernel.
    pub fn forward_packed(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (ab, wb, s) = self.binary_operands(x)?;
        let counts = xnor_popcount_conv(&pack_weights(&wb)?, &pack_activations(&ab)?, self.geom)?;
        Ok(scaled(counts.to_tensor(), s))
    }
}

/// `N×C×H×W` to `(N·H·W)×C`.
fn nchw_to_rows<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let s = x.shape();
    let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
    let src = x.data();
    let mut out = vec![T::ZERO; x.numel()];
    for b in 0..n {
        for ch in 0..c {
            for p in 0..hw {
                out[(b * hw + p) * c + ch] = src[(b * c + ch) * hw + p];
            }
        }
    }
    Tensor::from_parts(vec![n * hw, c], out)
}

fn rows_to_nchw<T: Scalar>(x: &Tensor<T>, shape: &[usize]) -> Tensor<T> {
    let (n, c, hw) = (shape[0], shape[1], shape[2] * shape[3]);
    let src = x.data();
    let mut out = vec![T::ZERO; x.numel()];
    for b in 0..n {
        for ch in 0..c {
            for p in 0..hw {
                out[(b * c + ch) * hw + p] = src[(b * hw + p) * c + ch];
            }
        }
    }
    Tensor::from_parts(shape.to_vec(), out)
}

fn scaled<T: Scalar>(y: Tensor<T>, s: f64) -> Tensor<T> {
    if s == 1.0 {
        y
    } else {
        let s = T::from_f64(s);
        y.map(|v| v * s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn opts(surrogate: SurrogateSpec) -> BinaryLayerOptions {
        BinaryLayerOptions {
            weight_surrogate: surrogate,
            act_surrogate: surrogate,
            weight_adapter: None,
            act_adapter: None,
            weight_scale: ScaleMode::None,
            act_scale: ScaleMode::None,
        }
    }

    #[test]
    fn binarize_examples() {
        let t = Tensor::<f64>::new(vec![2], vec![0.5, -0.5]).unwrap();
        let (b, s) = binarize(&t, ScaleMode::LayerMean).unwrap();
        assert_eq!((b.data(), s), (&[1.0, -1.0][..], 0.5));
        assert_eq!(binarize(&t, ScaleMode::None).unwrap().1, 1.0);
        let neg = Tensor::<f64>::new(vec![3], vec![-0.1, -2.0, -0.0]).unwrap();
        assert_eq!(binarize(&neg, ScaleMode::None).unwrap().0.data(), &[-1.0; 3]);
    }

    #[test]
    fn outputs_have_receptive_field_parity() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let layer =
            BinaryConv2d::<f64>::new(3, 4, 3, ConvGeometry::new(1, 0), &opts(SurrogateSpec::ste()), &mut rng).unwrap();
        let x = Tensor::from_fn(&[2, 3, 6, 6], |i| ((i * 37 % 11) as f64 - 5.0) * 0.2);
        let y = layer.forward_float(&x).unwrap();
        for &v in y.data() {
            assert_eq!(v.fract(), 0.0);
            assert_eq!((v as i64).rem_euclid(2), 27 % 2);
        }
        assert_eq!(y, layer.forward_packed(&x).unwrap());
    }

    #[test]
    fn ste_weight_gradient_is_clipped_upstream() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let layer =
            BinaryConv2d::<f64>::new(2, 3, 3, ConvGeometry::new(1, 1), &opts(SurrogateSpec::ste()), &mut rng).unwrap();
        let x = Tensor::from_fn(&[2, 2, 5, 5], |i| (i as f64 * 0.9).sin());
        let r = Tensor::from_fn(&[2, 3, 5, 5], |i| (i as f64 * 0.41).cos() * 3.0);

        let mut g = Graph::new();
        let xv = g.constant(x.clone()).unwrap();
        let vars = layer.register(&mut g).unwrap();
        let y = layer.forward_graph(&mut g, xv, &vars).unwrap();
        let rv = g.constant(r.clone()).unwrap();
        let prod = g.mul(y, rv).unwrap();
        let loss = g.reduce_sum(prod).unwrap();
        g.backward(loss).unwrap();

        let ab = x.map(|v| sign(v.clamp(-1.0, 1.0)));
        let (_, dwb) =
            kernels::conv2d_backward(&ab, &layer.weight.map(sign), r.data(), layer.geom, false, true).unwrap();
        let expect = dwb.unwrap().map(|v| v.clamp(-1.0, 1.0));
        assert_eq!(g.grad(vars.weight).unwrap(), expect.data());
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut o = opts(SurrogateSpec::fda(4));
        let ac = AdapterConfig {
            reduction: 4,
            shortcut: ShortcutKind::Sine,
            gain: 0.1,
        };
        o.weight_adapter = Some(ac);
        o.act_adapter = Some(ac);
        let mut layer = BinaryConv2d::<f64>::new(2, 2, 3, ConvGeometry::new(1, 1), &o, &mut rng).unwrap();
        layer.alpha = 0.5;
        let mut g = Graph::new();
        let xv = g
            .param(Tensor::from_fn(&[1, 2, 4, 4], |i| (i as f64).cos() * 0.5))
            .unwrap();
        let vars = layer.register(&mut g).unwrap();
        let y = layer.forward_graph(&mut g, xv, &vars).unwrap();
        let zero = g.constant(Tensor::zeros(&[1, 2, 4, 4])).unwrap();
        let prod = g.mul(y, zero).unwrap();
        let loss = g.reduce_sum(prod).unwrap();
        g.backward(loss).unwrap();
        let (w1, w2) = vars.act_adapter.unwrap();
        for v in [xv, vars.weight, w1, w2] {
            assert!(g.grad(v).unwrap().iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn clip_keeps_latent_weights_in_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut layer =
            BinaryConv2d::<f32>::new(1, 1, 3, ConvGeometry::new(1, 1), &opts(SurrogateSpec::ste()), &mut rng).unwrap();
        layer.weight.data_mut()[0] = 3.0;
        layer.weight.data_mut()[1] = -1.5;
        layer.clip_weights();
        assert_eq!(&layer.weight.data()[..2], &[1.0, -1.0]);
    }
}
