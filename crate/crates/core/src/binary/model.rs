//! Architectures built from a small layer vocabulary, with a tape-recorded
//! training forward and two tape-free inference paths.

use rand::Rng;

use crate::autograd::kernels::{self, ConvGeometry};
use crate::autograd::{Graph, Var};
use crate::binary::layer::{AdapterConfig, BinaryConv2d, BinaryLayerOptions, BinaryVars, ScaleMode};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::surrogate::SurrogateSpec;
use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Arch {
    ToyCnn,
    VggSmall,
    ResNet20,
}

impl Arch {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "toycnn" => Some(Arch::ToyCnn),
            "vggsmall" | "vgg-small" => Some(Arch::VggSmall),
            "resnet20" | "resnet-20" => Some(Arch::ResNet20),
            _ => None,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Arch::ToyCnn => "toycnn",
            Arch::VggSmall => "vggsmall",
            Arch::ResNet20 => "resnet20",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModelConfig {
    pub arch: Arch,
    pub in_channels: usize,
    pub image_size: usize,
    pub num_classes: usize,
    pub weight_surrogate: SurrogateSpec,
    pub act_surrogate: SurrogateSpec,
    pub weight_adapter: Option<AdapterConfig>,
    pub act_adapter: Option<AdapterConfig>,
    pub weight_scale: ScaleMode,
    pub act_scale: ScaleMode,
}

impl ModelConfig {
    /// Fourier surrogate everywhere, no adapters, mean-scaled weights.
    pub fn new(arch: Arch, in_channels: usize, image_size: usize, num_classes: usize) -> Self {
        ModelConfig {
            arch,
            in_channels,
            image_size,
            num_classes,
            weight_surrogate: SurrogateSpec::default(),
            act_surrogate: SurrogateSpec::default(),
            weight_adapter: None,
            act_adapter: None,
            weight_scale: ScaleMode::LayerMean,
            act_scale: ScaleMode::None,
        }
    }

    fn layer_options(&self) -> BinaryLayerOptions {
        BinaryLayerOptions {
            weight_surrogate: self.weight_surrogate,
            act_surrogate: self.act_surrogate,
            weight_adapter: self.weight_adapter,
            act_adapter: self.act_adapter,
            weight_scale: self.weight_scale,
            act_scale: self.act_scale,
        }
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm<T> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
}

impl<T: Scalar> BatchNorm<T> {
    fn new(c: usize) -> Self {
        BatchNorm {
            gamma: Tensor::full(&[c], T::ONE),
            beta: Tensor::zeros(&[c]),
            running_mean: Tensor::zeros(&[c]),
            running_var: Tensor::full(&[c], T::ONE),
        }
    }

    fn eval(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let eps = T::from_f64(BN_EPS);
        let scale: Vec<T> = self
            .gamma
            .data()
            .iter()
            .zip(self.running_var.data())
            .map(|(&g, &v)| g / (v + eps).sqrt())
            .collect();
        let shift: Vec<T> = self
            .beta
            .data()
            .iter()
            .zip(self.running_mean.data())
            .zip(&scale)
            .map(|((&b, &m), &s)| b - m * s)
            .collect();
        kernels::channel_affine(x, &scale, &shift)
    }
}

#[derive(Clone, Debug)]
pub enum Layer<T> {
    /// Full-precision convolution.
    Conv {
        weight: Tensor<T>,
        geom: ConvGeometry,
    },
    Binary(BinaryConv2d<T>),
    BatchNorm(BatchNorm<T>),
    MaxPool(usize),
    GlobalAvgPool,
    Flatten,
    Linear {
        weight: Tensor<T>,
        bias: Tensor<T>,
    },
    /// `body(x) + shortcut(x)`; an empty shortcut is the identity.
    Residual {
        body: Vec<Layer<T>>,
        shortcut: Vec<Layer<T>>,
    },
}

/// How a tensor is treated by the optimizer and the checkpoint.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    /// Trainable, with weight decay.
    Weight,
    /// Trainable, no weight decay (batch-norm affine, biases, adapters).
    NoDecay,
    /// Running statistics; saved but not trained.
    Buffer,
}

impl ParamKind {
    pub fn trainable(self) -> bool {
        self != ParamKind::Buffer
    }
}

/// Which convolution the inference forward uses for binary layers.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InferencePath {
    FloatSign,
    Packed,
}

#[derive(Clone, Debug)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub layers: Vec<Layer<T>>,
}

struct Builder<'a, R> {
    rng: &'a mut R,
    opts: BinaryLayerOptions,
    /// Current per-sample shape.
    shape: Vec<usize>,
}

impl<R: Rng> Builder<'_, R> {
    fn uniform<T: Scalar>(&mut self, shape: &[usize], fan_in: usize) -> Tensor<T> {
        let bound = (1.0 / fan_in as f64).sqrt();
        Tensor::from_fn(shape, |_| T::from_f64(self.rng.gen_range(-bound..bound)))
    }

    fn advance_conv(&mut self, out: usize, k: usize, geom: ConvGeometry) -> Result<()> {
        let h = geom.output_extent(self.shape[1], k)?;
        let w = geom.output_extent(self.shape[2], k)?;
        self.shape = vec![out, h, w];
        Ok(())
    }

    fn conv<T: Scalar>(&mut self, out: usize, k: usize, geom: ConvGeometry) -> Result<Layer<T>> {
        let c = self.shape[0];
        let weight = self.uniform(&[out, c, k, k], c * k * k);
        self.advance_conv(out, k, geom)?;
        Ok(Layer::Conv { weight, geom })
    }

    fn binary<T: Scalar>(&mut self, out: usize, stride: usize) -> Result<Layer<T>> {
        let geom = ConvGeometry::new(stride, 1);
        let layer = BinaryConv2d::new(self.shape[0], out, 3, geom, &self.opts, self.rng)?;
        self.advance_conv(out, 3, geom)?;
        Ok(Layer::Binary(layer))
    }

    fn bn<T: Scalar>(&self) -> Layer<T> {
        Layer::BatchNorm(BatchNorm::new(self.shape[0]))
    }

    fn pool<T: Scalar>(&mut self) -> Layer<T> {
        self.shape[1] /= 2;
        self.shape[2] /= 2;
        Layer::MaxPool(2)
    }

    fn flatten<T: Scalar>(&mut self) -> Layer<T> {
        self.shape = vec![self.shape.iter().product()];
        Layer::Flatten
    }

    fn global_pool<T: Scalar>(&mut self) -> Layer<T> {
        self.shape = vec![self.shape[0]];
        Layer::GlobalAvgPool
    }

    fn linear<T: Scalar>(&mut self, out: usize) -> Layer<T> {
        let d = self.shape[0];
        let weight = self.uniform(&[out, d], d);
        let bias = self.uniform(&[out], d);
        self.shape = vec![out];
        Layer::Linear { weight, bias }
    }

    fn basic_block<T: Scalar>(&mut self, out: usize, stride: usize) -> Result<Layer<T>> {
        let input = self.shape.clone();
        let body = vec![self.binary(out, stride)?, self.bn(), self.binary(out, 1)?, self.bn()];
        let after = self.shape.clone();
        let shortcut = if stride != 1 || input[0] != out {
            self.shape = input;
            let sc = vec![self.conv(out, 1, ConvGeometry::new(stride, 0))?, self.bn()];
            debug_assert_eq!(self.shape, after);
            sc
        } else {
            Vec::new()
        };
        Ok(Layer::Residual { body, shortcut })
    }
}

/// First convolution and classifier stay full precision; every other
/// convolution except ResNet down-sampling shortcuts is binary.
pub fn build_model<T: Scalar>(config: &ModelConfig, rng: &mut impl Rng) -> Result<Model<T>> {
    if config.in_channels == 0 || config.num_classes == 0 || config.image_size == 0 {
        return Err(Error::Config(format!("degenerate model geometry: {config:?}")));
    }
    let mut b = Builder {
        rng,
        opts: config.layer_options(),
        shape: vec![config.in_channels, config.image_size, config.image_size],
    };
    let same = ConvGeometry::new(1, 1);
    let mut layers = Vec::new();
    match config.arch {
        Arch::ToyCnn => {
            layers.push(b.conv(16, 3, same)?);
            layers.push(b.bn());
            layers.push(b.pool());
            layers.push(b.binary(32, 1)?);
            layers.push(b.bn());
            layers.push(b.pool());
            layers.push(b.binary(32, 1)?);
            layers.push(b.bn());
            layers.push(b.pool());
            layers.push(b.flatten());
            layers.push(b.linear(config.num_classes));
        }
        Arch::VggSmall => {
            layers.push(b.conv(128, 3, same)?);
            layers.push(b.bn());
            for (out, pool) in [(128, true), (256, false), (256, true), (512, false), (512, true)] {
                layers.push(b.binary(out, 1)?);
                if pool {
                    layers.push(b.pool());
                }
                layers.push(b.bn());
            }
            layers.push(b.flatten());
            layers.push(b.linear(config.num_classes));
        }
        Arch::ResNet20 => {
            layers.push(b.conv(16, 3, same)?);
            layers.push(b.bn());
            for (stage, width) in [16, 32, 64].into_iter().enumerate() {
                for block in 0..3 {
                    let stride = if stage > 0 && block == 0 { 2 } else { 1 };
                    layers.push(b.basic_block(width, stride)?);
                }
            }
            layers.push(b.global_pool());
            layers.push(b.linear(config.num_classes));
        }
    }
    if b.shape.iter().any(|&s| s == 0) {
        return Err(Error::Geometry(format!(
            "{} cannot take {}x{} inputs",
            config.arch.label(),
            config.image_size,
            config.image_size
        )));
    }
    Ok(Model {
        config: *config,
        layers,
    })
}

fn visit_layers<T: Scalar>(layers: &mut [Layer<T>], prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>, ParamKind)) {
    for (i, layer) in layers.iter_mut().enumerate() {
        let p = format!("{prefix}{i}");
        match layer {
            Layer::Conv { weight, .. } => f(&format!("{p}.weight"), weight, ParamKind::Weight),
            Layer::Binary(b) => {
                f(&format!("{p}.weight"), &mut b.weight, ParamKind::Weight);
                if let Some(a) = b.weight_adapter.as_mut() {
                    f(&format!("{p}.weight_adapter.w1"), &mut a.w1, ParamKind::NoDecay);
                    f(&format!("{p}.weight_adapter.w2"), &mut a.w2, ParamKind::NoDecay);
                }
                if let Some(a) = b.act_adapter.as_mut() {
                    f(&format!("{p}.act_adapter.w1"), &mut a.w1, ParamKind::NoDecay);
                    f(&format!("{p}.act_adapter.w2"), &mut a.w2, ParamKind::NoDecay);
                }
            }
            Layer::BatchNorm(bn) => {
                f(&format!("{p}.gamma"), &mut bn.gamma, ParamKind::NoDecay);
                f(&format!("{p}.beta"), &mut bn.beta, ParamKind::NoDecay);
                f(&format!("{p}.running_mean"), &mut bn.running_mean, ParamKind::Buffer);
                f(&format!("{p}.running_var"), &mut bn.running_var, ParamKind::Buffer);
            }
            Layer::Linear { weight, bias } => {
                f(&format!("{p}.weight"), weight, ParamKind::Weight);
                f(&format!("{p}.bias"), bias, ParamKind::NoDecay);
            }
            Layer::Residual { body, shortcut } => {
                visit_layers(body, &format!("{p}.body."), f);
                visit_layers(shortcut, &format!("{p}.shortcut."), f);
            }
            Layer::MaxPool(_) | Layer::GlobalAvgPool | Layer::Flatten => {}
        }
    }
}

fn for_each_binary<T: Scalar>(layers: &mut [Layer<T>], f: &mut dyn FnMut(&mut BinaryConv2d<T>)) {
    for layer in layers {
        match layer {
            Layer::Binary(b) => f(b),
            Layer::Residual { body, shortcut } => {
                for_each_binary(body, f);
                for_each_binary(shortcut, f);
            }
            _ => {}
        }
    }
}

/// Output of a recorded training forward.
pub struct TrainForward {
    pub logits: Var,
    /// Trainable parameters in [`Model::visit`] order.
    pub params: Vec<Var>,
}

impl<T: Scalar> Model<T> {
    /// Visits every named tensor in a fixed order.
    pub fn visit(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<T>, ParamKind)) {
        visit_layers(&mut self.layers, "layers.", f);
    }

    pub fn tensor_names(&mut self) -> Vec<(String, ParamKind)> {
        let mut out = Vec::new();
        self.visit(&mut |name, _, kind| out.push((name.to_string(), kind)));
        out
    }

    pub fn binary_layer_count(&mut self) -> usize {
        let mut n = 0;
        for_each_binary(&mut self.layers, &mut |_| n += 1);
        n
    }

    pub fn parameter_count(&mut self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, t, kind| {
            if kind.trainable() {
                n += t.numel();
            }
        });
        n
    }

    pub fn set_schedule(&mut self, n: usize, alpha: f64) {
        for_each_binary(&mut self.layers, &mut |b| b.set_schedule(n, alpha));
    }

    pub fn clip_binary_weights(&mut self) {
        for_each_binary(&mut self.layers, &mut |b| b.clip_weights());
    }

    pub fn binary_layers(&mut self) -> Vec<&mut BinaryConv2d<T>> {
        fn collect<'a, T>(layers: &'a mut [Layer<T>], out: &mut Vec<&'a mut BinaryConv2d<T>>) {
            for layer in layers {
                match layer {
                    Layer::Binary(b) => out.push(b),
                    Layer::Residual { body, shortcut } => {
                        collect(body, out);
                        collect(shortcut, out);
                    }
                    _ => {}
                }
            }
        }
        let mut out = Vec::new();
        collect(&mut self.layers, &mut out);
        out
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        let c = &self.config;
        let want = [x.shape()[0], c.in_channels, c.image_size, c.image_size];
        if x.shape() != want {
            return Err(Error::shape("model input", &want, x.shape()));
        }
        Ok(())
    }

    /// Records a training-mode forward (batch statistics in batch norm) and
    /// updates the running statistics.
    pub fn forward_train(&mut self, g: &mut Graph<T>, x: Var) -> Result<TrainForward> {
        self.check_input(g.value(x))?;
        let mut params = Vec::new();
        let logits = train_layers(&mut self.layers, g, x, &mut params)?;
        Ok(TrainForward { logits, params })
    }

    /// Inference forward using running batch-norm statistics.
    pub fn forward_eval(&self, x: &Tensor<T>, path: InferencePath) -> Result<Tensor<T>> {
        self.check_input(x)?;
        eval_layers(&self.layers, x.clone(), path)
    }

    /// `±1` operands every binary layer would see for input `x` in
    /// inference mode, in layer order.
    pub fn binary_operands(&self, x: &Tensor<T>) -> Result<Vec<(Tensor<T>, Tensor<T>)>> {
        self.check_input(x)?;
        let mut out = Vec::new();
        probe_layers(&self.layers, x.clone(), &mut out)?;
        Ok(out)
    }
}

fn train_layers<T: Scalar>(
    layers: &mut [Layer<T>],
    g: &mut Graph<T>,
    mut x: Var,
    params: &mut Vec<Var>,
) -> Result<Var> {
    for layer in layers {
        x = match layer {
            Layer::Conv { weight, geom } => {
                let w = g.param(weight.clone())?;
                params.push(w);
                g.conv2d(x, w, *geom)?
            }
            Layer::Binary(b) => {
                let vars: BinaryVars = b.register(g)?;
                params.push(vars.weight);
                for (w1, w2) in vars.weight_adapter.into_iter().chain(vars.act_adapter) {
                    params.push(w1);
                    params.push(w2);
                }
                b.forward_graph(g, x, &vars)?
            }
            Layer::BatchNorm(bn) => {
                let gamma = g.param(bn.gamma.clone())?;
                let beta = g.param(bn.beta.clone())?;
                params.push(gamma);
                params.push(beta);
                let (y, stats) = g.batch_norm(x, gamma, beta, T::from_f64(BN_EPS))?;
                let shape = g.shape(x);
                let count = (shape[0] * shape[2..].iter().product::<usize>()) as f64;
                let unbias = if count > 1.0 { count / (count - 1.0) } else { 1.0 };
                let m = T::from_f64(BN_MOMENTUM);
                for (r, &v) in bn.running_mean.data_mut().iter_mut().zip(&stats.mean) {
                    *r = (T::ONE - m) * *r + m * v;
                }
                for (r, &v) in bn.running_var.data_mut().iter_mut().zip(&stats.var) {
                    *r = (T::ONE - m) * *r + m * v * T::from_f64(unbias);
                }
                y
            }
            Layer::MaxPool(s) => g.max_pool2d(x, *s)?,
            Layer::GlobalAvgPool => g.global_avg_pool(x)?,
            Layer::Flatten => {
                let s = g.shape(x).to_vec();
                g.reshape(x, &[s[0], s[1..].iter().product()])?
            }
            Layer::Linear { weight, bias } => {
                let w = g.param(weight.clone())?;
                let b = g.param(bias.clone())?;
                params.push(w);
                params.push(b);
                g.linear(x, w, b)?
            }
            Layer::Residual { body, shortcut } => {
                let y = train_layers(body, g, x, params)?;
                let s = if shortcut.is_empty() {
                    x
                } else {
                    train_layers(shortcut, g, x, params)?
                };
                g.add(y, s)?
            }
        };
    }
    Ok(x)
}

fn eval_layer<T: Scalar>(layer: &Layer<T>, x: Tensor<T>, path: InferencePath) -> Result<Tensor<T>> {
    match layer {
        Layer::Conv { weight, geom } => kernels::conv2d(&x, weight, *geom),
        Layer::Binary(b) => match path {
            InferencePath::FloatSign => b.forward_float(&x),
            InferencePath::Packed => b.forward_packed(&x),
        },
        Layer::BatchNorm(bn) => bn.eval(&x),
        Layer::MaxPool(s) => Ok(kernels::max_pool2d(&x, *s)?.0),
        Layer::GlobalAvgPool => {
            let s = x.shape();
            let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
            let inv = T::from_f64(1.0 / hw as f64);
            let data: Vec<T> = x
                .data()
                .chunks(hw)
                .map(|p| p.iter().fold(T::ZERO, |a, &v| a + v) * inv)
                .collect();
            Tensor::new(vec![n, c], data)
        }
        Layer::Flatten => {
            let s = x.shape().to_vec();
            x.reshape(&[s[0], s[1..].iter().product()])
        }
        Layer::Linear { weight, bias } => {
            let (n, d) = (x.shape()[0], x.shape()[1]);
            let o = weight.shape()[0];
            if weight.shape()[1] != d {
                return Err(Error::shape("linear", &[o, d], weight.shape()));
            }
            let mut out: Vec<T> = (0..n).flat_map(|_| bias.data().iter().copied()).collect();
            T::gemm(n, d, o, x.data(), false, weight.data(), true, &mut out, true);
            Tensor::new(vec![n, o], out)
        }
        Layer::Residual { body, shortcut } => {
            let y = eval_layers(body, x.clone(), path)?;
            let s = if shortcut.is_empty() {
                x
            } else {
                eval_layers(shortcut, x, path)?
            };
            y.zip_map(&s, "residual", |a, b| a + b)
        }
    }
}

fn eval_layers<T: Scalar>(layers: &[Layer<T>], mut x: Tensor<T>, path: InferencePath) -> Result<Tensor<T>> {
    for layer in layers {
        x = eval_layer(layer, x, path)?;
    }
    Ok(x)
}

fn probe_layers<T: Scalar>(
    layers: &[Layer<T>],
    mut x: Tensor<T>,
    out: &mut Vec<(Tensor<T>, Tensor<T>)>,
) -> Result<Tensor<T>> {
    for layer in layers {
        x = match layer {
            Layer::Binary(b) => {
                let xc = x.map(|v| v.max(-T::ONE).min(T::ONE));
                out.push((
                    crate::binary::layer::binarize(&xc, ScaleMode::None)?.0,
                    crate::binary::layer::binarize(&b.weight, ScaleMode::None)?.0,
                ));
                b.forward_float(&x)?
            }
            Layer::Residual { body, shortcut } => {
                let y = probe_layers(body, x.clone(), out)?;
                let s = if shortcut.is_empty() {
                    x
                } else {
                    probe_layers(shortcut, x, out)?
                };
                y.zip_map(&s, "residual", |a, b| a + b)?
            }
            other => eval_layer(other, x, InferencePath::FloatSign)?,
        };
    }
    Ok(x)
}
