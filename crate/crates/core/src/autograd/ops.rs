use super::kernels::{self, ConvGeometry};
use super::{Graph, Op, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{numel, Tensor};

type Grads<T> = Result<Vec<Option<Tensor<T>>>>;

fn like<T: Scalar>(t: &Tensor<T>, data: Vec<T>) -> Tensor<T> {
    Tensor::from_parts(t.shape().to_vec(), data)
}

struct MatMul;

impl<T: Scalar> Op<T> for MatMul {
    fn name(&self) -> &'static str {
        "matmul"
    }

    fn forward(&mut self, inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
        let (a, b) = (inputs[0], inputs[1]);
        if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
            return Err(Error::shape("matmul", a.shape(), b.shape()));
        }
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let mut c = vec![T::ZERO; m * n];
        T::gemm(m, k, n, a.data(), false, b.data(), false, &mut c, false);
        Ok(Tensor::from_parts(vec![m, n], c))
    }

    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, up: &[T], needs: &[bool]) -> Grads<T> {
        let (a, b) = (inputs[0], inputs[1]);
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let da = needs[0].then(|| {
            let mut g = vec![T::ZERO; m * k];
            T::gemm(m, n, k, up, false, b.data(), true, &mut g, false);
            like(a, g)
        });
        let db = needs[1].then(|| {
            let mut g = vec![T::ZERO; k * n];
            T::gemm(k, m, n, a.data(), true, up, false, &mut g, false);
            like(b, g)
        });
        Ok(vec![da, db])
    }
}

struct Conv2d(ConvGeometry);

impl<T: Scalar> Op<T> for Conv2d {
    fn name(&self) -> &'static str {
        "conv2d"
    }

    fn forward(&mut self, inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
        kernels::conv2d(inputs[0], inputs[1], self.0)
    }

    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, up: &[T], needs: &[bool]) -> Grads<T> {
        let (dx, dw) = kernels::conv2d_backward(inputs[0], inputs[1], up, self.0, needs[0], needs[1])?;
        Ok(vec![dx, dw])
    }
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// For every flat index of `out`, the flat index of the broadcast source.
fn broadcast_map(out: &[usize], src: &[usize]) -> Vec<usize> {
    let rank = out.len();
    let offset = rank - src.len();
    let mut strides = vec![0; rank];
    let mut acc = 1;
    for i in (0..src.len()).rev() {
        strides[i + offset] = if src[i] == 1 { 0 } else { acc };
        acc *= src[i];
    }
    let total = numel(out);
    let mut map = Vec::with_capacity(total);
    let mut idx = vec![0usize; rank];
    for _ in 0..total {
        map.push(idx.iter().zip(&strides).map(|(i, s)| i * s).sum());
        for d in (0..rank).rev() {
            idx[d] += 1;
            if idx[d] < out[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    map
}

#[derive(Clone, Copy)]
enum Binary {
    Add,
    Mul,
}

struct Elementwise {
    kind: Binary,
    map_a: Vec<usize>,
    map_b: Vec<usize>,
}

impl<T: Scalar> Op<T> for Elementwise {
    fn name(&self) -> &'static str {
        match self.kind {
            Binary::Add => "add",
            Binary::Mul => "mul",
        }
    }

    fn forward(&mut self, inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
        let (a, b) = (inputs[0], inputs[1]);
        let out = broadcast_shape(a.shape(), b.shape())
            .ok_or_else(|| Error::shape(<Self as Op<T>>::name(self), a.shape(), b.shape()))?;
        self.map_a = broadcast_map(&out, a.shape());
        self.map_b = broadcast_map(&out, b.shape());
        let (ad, bd) = (a.data(), b.data());
        let data = self
            .map_a
            .iter()
            .zip(&self.map_b)
            .map(|(&i, &j)| match self.kind {
                Binary::Add => ad[i] + bd[j],
                Binary::Mul => ad[i] * bd[j],
            })
            .collect();
        Ok(Tensor::from_parts(out, data))
    }

    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, up: &[T], needs: &[bool]) -> Grads<T> {
        let (a, b) = (inputs[0], inputs[1]);
        let reduce = |target: &Tensor<T>, map: &[usize], other: Option<(&Tensor<T>, &[usize])>| {
            let mut g = vec![T::ZERO; target.numel()];
            for (k, &u) in up.iter().enumerate() {
                let factor = match other {
                    Some((o, omap)) => o.data()[omap[k]],
                    None => T::ONE,
                };
                g[map[k]] += u * factor;
            }
            like(target, g)
        };
        let (ga, gb) = match self.kind {
            Binary::Add => (
                needs[0].then(|| reduce(a, &self.map_a, None)),
                needs[1].then(|| reduce(b, &self.map_b, None)),
            ),
            Binary::Mul => (
                needs[0].then(|| reduce(a, &self.map_a, Some((b, &self.map_b)))),
                needs[1].then(|| reduce(b, &self.map_b, Some((a, &self.map_a)))),
            ),
        };
        Ok(vec![ga, gb])
    }
}

struct Scale<T>(T);

impl<T: Scalar> Op<T> for Scale<T> {
    fn name(&self) -> &'static str {
        "scale"
    }

    fn forward(&mut self, inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
        let c = self.0;
        Ok(inputs[0].map(|x| x * c))
    }

    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, up: &[T], _: &[bool]) -> Grads<T> {
        Ok(vec![Some(like(inputs[0], up.iter().map(|&u| u * self.0).collect()))])
    }
}

struct Relu;

impl<T: Scalar> Op<T> for Relu {
    fn name(&self) -> &'static str {
        "relu"
    }

    fn forward(&mut self, inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
        Ok(inputs[0].map(|x| x.max(T::ZERO)))
    }

    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, up: &[T], _: &[bool]) -> Grads<T> {
        let x = inputs[0];
        let g = x
            .data()
            .iter()
            .zip(up)
            .map(|(&v, &u)| if v > T::ZERO { u } else { T::ZERO })
            .collect();
        Ok(vec![Some(like(x, g))])
    }
}

/// Clamp to `[-1, 1]`; gradient passes where the input lies inside the band.
struct HardTanh;

impl<T: Scalar> Op<T> for HardTanh {
    fn name(&self) -> &'static str {
        "hardtanh"
    }

    fn forward(&mut self, inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
        Ok(inputs[0].map(|x| x.max(-T::ONE).min(T::ONE)))
    }

    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, up: &[T], _: &[bool]) -> Grads<T> {
        let x = inputs[0];
        let g = x
            .data()
            .iter()
            .zip(up)
            .map(|(&v, &u)| if v.abs() <= T::ONE { u } else { T::ZERO })
            .collect();
        Ok(vec![Some(like(x, g))])
    }
}

struct ReduceSum;

impl<T: Scalar> Op<T> for ReduceSum {
    fn name(&self) -> &'static str {
        "reduce_sum"
    }

    fn forward(&mut self, inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
        Ok(Tensor::scalar(inputs[0].sum()))
    }

    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, up: &[T], _: &[bool]) -> Grads<T> {
        Ok(vec![Some(Tensor::full(inputs[0].shape(), up[0]))])
    }
}

struct Reshape(Vec<usize>);

impl<T: Scalar> Op<T> for Reshape {
    fn name(&self) -> &'static str {
        "reshape"
    }

    fn forward(&mut self, inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
        inputs[0].reshape(&self.0)
    }

    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, up: &[T], _: &[bool]) -> Grads<T> {
        Ok(vec![Some(like(inputs[0], up.to_vec()))])
    }
}

/// Batch mean and biased variance seen by a training-mode batch norm.
#[derive(Clone, Debug)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

struct BatchNorm<T> {
    eps: T,
    xhat: Vec<T>,
    inv_std: Vec<T>,
    stats: BatchStats<T>,
}

fn check_bn_params<T: Scalar>(x: &Tensor<T>, gamma: &Tensor<T>, beta: &Tensor<T>) -> Result<usize> {
    if x.rank() < 2 {
        return Err(Error::Geometry(format!("batch_norm on shape {:?}", x.shape())));
    }
    let c = x.shape()[1];
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(Error::shape("batch_norm", &[c], gamma.shape()));
    }
    Ok(c)
}

impl<T: Scalar> Op<T> for BatchNorm<T> {
    fn name(&self) -> &'static str {
        "batch_norm"
    }

    fn forward(&mut self, inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
        let (x, gamma, beta) = (inputs[0], inputs[1], inputs[2]);
        let c = check_bn_params(x, gamma, beta)?;
        let BatchStats { mean, var } = &self.stats;
        if mean.len() != c {
            return Err(Error::shape("batch_norm", &[c], &[mean.len()]));
        }
        self.inv_std = var.iter().map(|&v| T::ONE / (v + self.eps).sqrt()).collect();
        let inner: usize = x.shape()[2..].iter().product();
        let mut xhat = x.data().to_vec();
        let mut y = vec![T::ZERO; x.numel()];
        for (i, (chunk, ychunk)) in xhat.chunks_mut(inner).zip(y.chunks_mut(inner)).enumerate() {
            let ch = i % c;
            for (v, out) in chunk.iter_mut().zip(ychunk) {
                *v = (*v - mean[ch]) * self.inv_std[ch];
                *out = gamma.data()[ch] * *v + beta.data()[ch];
            }
        }
        self.xhat = xhat;
        Ok(like(x, y))
    }

    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, up: &[T], needs: &[bool]) -> Grads<T> {
        let (x, gamma, beta) = (inputs[0], inputs[1], inputs[2]);
        let c = x.shape()[1];
        let inner: usize = x.shape()[2..].iter().product();
        let count = T::from_f64((x.numel() / c) as f64);
        let mut sum_dy = vec![T::ZERO; c];
        let mut sum_dy_xhat = vec![T::ZERO; c];
        for (i, (u, xh)) in up.chunks(inner).zip(self.xhat.chunks(inner)).enumerate() {
            let ch = i % c;
            for (&a, &b) in u.iter().zip(xh) {
                sum_dy[ch] += a;
                sum_dy_xhat[ch] += a * b;
            }
        }
        let dx = needs[0].then(|| {
            let mut g = vec![T::ZERO; x.numel()];
            for (i, ((gc, u), xh)) in g
                .chunks_mut(inner)
                .zip(up.chunks(inner))
                .zip(self.xhat.chunks(inner))
                .enumerate()
            {
                let ch = i % c;
                let k = gamma.data()[ch] * self.inv_std[ch] / count;
                for ((o, &a), &b) in gc.iter_mut().zip(u).zip(xh) {
                    *o = k * (count * a - sum_dy[ch] - b * sum_dy_xhat[ch]);
                }
            }
            like(x, g)
        });
        Ok(vec![
            dx,
            needs[1].then(|| like(gamma, sum_dy_xhat.clone())),
            needs[2].then(|| like(beta, sum_dy.clone())),
        ])
    }
}

/// Batch norm with frozen statistics: `gamma * (x - mean) / sqrt(var + eps) + beta`.
struct BatchNormEval<T> {
    scale: Vec<T>,
    xhat: Vec<T>,
    mean: Vec<T>,
    var: Vec<T>,
    eps: T,
}

impl<T: Scalar> Op<T> for BatchNormEval<T> {
    fn name(&self) -> &'static str {
        "batch_norm_eval"
    }

    fn forward(&mut self, inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
        let (x, gamma, beta) = (inputs[0], inputs[1], inputs[2]);
        let c = check_bn_params(x, gamma, beta)?;
        if self.mean.len() != c || self.var.len() != c {
            return Err(Error::shape("batch_norm_eval", &[c], &[self.mean.len()]));
        }
        let inv: Vec<T> = self.var.iter().map(|&v| T::ONE / (v + self.eps).sqrt()).collect();
        let xhat = kernels::channel_affine(
            x,
            &inv,
            &self.mean.iter().zip(&inv).map(|(&m, &i)| -m * i).collect::<Vec<_>>(),
        )?;
        let y = kernels::channel_affine(&xhat, gamma.data(), beta.data())?;
        self.scale = inv.iter().zip(gamma.data()).map(|(&i, &g)| i * g).collect();
        self.xhat = xhat.into_data();
        Ok(y)
    }

    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, up: &[T], needs: &[bool]) -> Grads<T> {
        let (x, gamma, beta) = (inputs[0], inputs[1], inputs[2]);
        let c = x.shape()[1];
        let inner: usize = x.shape()[2..].iter().product();
        let mut dgamma = vec![T::ZERO; c];
        let mut dbeta = vec![T::ZERO; c];
        let mut dx = vec![T::ZERO; x.numel()];
        for (i, ((u, xh), g)) in up
            .chunks(inner)
            .zip(self.xhat.chunks(inner))
            .zip(dx.chunks_mut(inner))
            .enumerate()
        {
            let ch = i % c;
            for ((&a, &b), o) in u.iter().zip(xh).zip(g) {
                dgamma[ch] += a * b;
                dbeta[ch] += a;
                *o = a * self.scale[ch];
            }
        }
        Ok(vec![
            needs[0].then(|| like(x, dx)),
            needs[1].then(|| like(gamma, dgamma)),
            needs[2].then(|| like(beta, dbeta)),
        ])
    }
}

struct MaxPool2d {
    size: usize,
    arg: Vec<usize>,
}

impl<T: Scalar> Op<T> for MaxPool2d {
    fn name(&self) -> &'static str {
        "max_pool2d"
    }

    fn forward(&mut self, inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
        let (y, arg) = kernels::max_pool2d(inputs[0], self.size)?;
        self.arg = arg;
        Ok(y)
    }

    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, up: &[T], _: &[bool]) -> Grads<T> {
        let mut g = vec![T::ZERO; inputs[0].numel()];
        for (&i, &u) in self.arg.iter().zip(up) {
            g[i] += u;
        }
        Ok(vec![Some(like(inputs[0], g))])
    }
}

struct GlobalAvgPool;

impl<T: Scalar> Op<T> for GlobalAvgPool {
    fn name(&self) -> &'static str {
        "global_avg_pool"
    }

    fn forward(&mut self, inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
        let x = inputs[0];
        if x.rank() != 4 {
            return Err(Error::Geometry(format!("global_avg_pool on {:?}", x.shape())));
        }
        let inner = x.shape()[2] * x.shape()[3];
        let denom = T::from_f64(inner as f64);
        let data = x
            .data()
            .chunks(inner)
            .map(|c| c.iter().copied().sum::<T>() / denom)
            .collect();
        Ok(Tensor::from_parts(vec![x.shape()[0], x.shape()[1]], data))
    }

    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, up: &[T], _: &[bool]) -> Grads<T> {
        let x = inputs[0];
        let inner = x.shape()[2] * x.shape()[3];
        let denom = T::from_f64(inner as f64);
        let mut g = Vec::with_capacity(x.numel());
        for &u in up {
            g.extend(std::iter::repeat(u / denom).take(inner));
        }
        Ok(vec![Some(like(x, g))])
    }
}

/// `y = x Wᵀ + b` with `x: N×in`, `W: out×in`, `b: out`.
struct Linear;

impl<T: Scalar> Op<T> for Linear {
    fn name(&self) -> &'static str {
        "linear"
    }

    fn forward(&mut self, inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
        let (x, w, b) = (inputs[0], inputs[1], inputs[2]);
        if x.rank() != 2 || w.rank() != 2 || x.shape()[1] != w.shape()[1] || b.shape() != [w.shape()[0]] {
            return Err(Error::shape("linear", w.shape(), x.shape()));
        }
        let (n, k, m) = (x.shape()[0], x.shape()[1], w.shape()[0]);
        let mut y = Vec::with_capacity(n * m);
        for _ in 0..n {
            y.extend_from_slice(b.data());
        }
        T::gemm(n, k, m, x.data(), false, w.data(), true, &mut y, true);
        Ok(Tensor::from_parts(vec![n, m], y))
    }

    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, up: &[T], needs: &[bool]) -> Grads<T> {
        let (x, w, b) = (inputs[0], inputs[1], inputs[2]);
        let (n, k, m) = (x.shape()[0], x.shape()[1], w.shape()[0]);
        let dx = needs[0].then(|| {
            let mut g = vec![T::ZERO; n * k];
            T::gemm(n, m, k, up, false, w.data(), false, &mut g, false);
            like(x, g)
        });
        let dw = needs[1].then(|| {
            let mut g = vec![T::ZERO; m * k];
            T::gemm(m, n, k, up, true, x.data(), false, &mut g, false);
            like(w, g)
        });
        let db = needs[2].then(|| {
            let mut g = vec![T::ZERO; m];
            for row in up.chunks(m) {
                for (a, &u) in g.iter_mut().zip(row) {
                    *a += u;
                }
            }
            like(b, g)
        });
        Ok(vec![dx, dw, db])
    }
}

/// Mean softmax cross-entropy of `N×C` logits against integer labels.
struct SoftmaxCrossEntropy<T> {
    labels: Vec<usize>,
    probs: Vec<T>,
}

impl<T: Scalar> Op<T> for SoftmaxCrossEntropy<T> {
    fn name(&self) -> &'static str {
        "softmax_cross_entropy"
    }

    fn forward(&mut self, inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
        let z = inputs[0];
        if z.rank() != 2 || z.shape()[0] != self.labels.len() {
            return Err(Error::shape("softmax_cross_entropy", &[self.labels.len()], z.shape()));
        }
        let c = z.shape()[1];
        if let Some(&bad) = self.labels.iter().find(|&&l| l >= c) {
            return Err(Error::invalid(format!("label {bad} out of range for {c} classes")));
        }
        let mut probs = Vec::with_capacity(z.numel());
        let mut loss = T::ZERO;
        for (row, &label) in z.data().chunks(c).zip(&self.labels) {
            let max = row.iter().copied().fold(row[0], T::max);
            let exps: Vec<T> = row.iter().map(|&v| (v - max).exp()).collect();
            let total: T = exps.iter().copied().sum();
            loss += total.ln() - (row[label] - max);
            probs.extend(exps.iter().map(|&e| e / total));
        }
        self.probs = probs;
        Ok(Tensor::scalar(loss / T::from_f64(self.labels.len() as f64)))
    }

    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, up: &[T], _: &[bool]) -> Grads<T> {
        let z = inputs[0];
        let c = z.shape()[1];
        let k = up[0] / T::from_f64(self.labels.len() as f64);
        let mut g = self.probs.clone();
        for (row, &label) in g.chunks_mut(c).zip(&self.labels) {
            row[label] -= T::ONE;
            for v in row.iter_mut() {
                *v *= k;
            }
        }
        Ok(vec![Some(like(z, g))])
    }
}

impl<T: Scalar> Graph<T> {
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(MatMul, &[a, b])
    }

    /// NCHW input, OIHW kernel.
    pub fn conv2d(&mut self, x: Var, w: Var, geom: ConvGeometry) -> Result<Var> {
        self.apply(Conv2d(geom), &[x, w])
    }

    /// Elementwise sum with trailing-axis broadcasting.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(
            Elementwise {
                kind: Binary::Add,
                map_a: Vec::new(),
                map_b: Vec::new(),
            },
            &[a, b],
        )
    }

    /// Elementwise product with trailing-axis broadcasting.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(
            Elementwise {
                kind: Binary::Mul,
                map_a: Vec::new(),
                map_b: Vec::new(),
            },
            &[a, b],
        )
    }

    pub fn scale(&mut self, a: Var, c: T) -> Result<Var> {
        self.apply(Scale(c), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.apply(Relu, &[a])
    }

    pub fn hardtanh(&mut self, a: Var) -> Result<Var> {
        self.apply(HardTanh, &[a])
    }

    pub fn reduce_sum(&mut self, a: Var) -> Result<Var> {
        self.apply(ReduceSum, &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        self.apply(Reshape(shape.to_vec()), &[a])
    }

    /// Training-mode batch norm over axis 1; also returns the batch statistics
    /// so the caller can update its running averages.
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<(Var, BatchStats<T>)> {
        let (mean, var) = kernels::channel_moments(self.value(x))?;
        let stats = BatchStats { mean, var };
        let out = self.apply(
            BatchNorm {
                eps,
                xhat: Vec::new(),
                inv_std: Vec::new(),
                stats: stats.clone(),
            },
            &[x, gamma, beta],
        )?;
        Ok((out, stats))
    }

    pub fn batch_norm_eval(&mut self, x: Var, gamma: Var, beta: Var, mean: &[T], var: &[T], eps: T) -> Result<Var> {
        self.apply(
            BatchNormEval {
                scale: Vec::new(),
                xhat: Vec::new(),
                mean: mean.to_vec(),
                var: var.to_vec(),
                eps,
            },
            &[x, gamma, beta],
        )
    }

    pub fn max_pool2d(&mut self, x: Var, size: usize) -> Result<Var> {
        self.apply(MaxPool2d { size, arg: Vec::new() }, &[x])
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        self.apply(GlobalAvgPool, &[x])
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        self.apply(Linear, &[x, w, b])
    }

    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        self.apply(
            SoftmaxCrossEntropy {
                labels: labels.to_vec(),
                probs: Vec::new(),
            },
            &[logits],
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_matmul() {
        let x = Tensor::<f64>::from_fn(&[3, 3], |i| i as f64 * 0.5 - 1.0);
        let mut g = Graph::new();
        let i = g.constant(Tensor::eye(3)).unwrap();
        let xv = g.constant(x.clone()).unwrap();
        let y = g.matmul(i, xv).unwrap();
        assert_eq!(g.value(y), &x);
    }

    #[test]
    fn relu_definition() {
        let mut g = Graph::new();
        let x = g
            .constant(Tensor::<f64>::new(vec![3], vec![-1.0, 0.0, 2.0]).unwrap())
            .unwrap();
        let y = g.relu(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn broadcasting_add_and_mismatch() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::<f64>::from_fn(&[2, 3], |i| i as f64)).unwrap();
        let b = g
            .constant(Tensor::<f64>::new(vec![3], vec![10.0, 20.0, 30.0]).unwrap())
            .unwrap();
        let c = g.add(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[10.0, 21.0, 32.0, 13.0, 24.0, 35.0]);
        let d = g.constant(Tensor::<f64>::zeros(&[2])).unwrap();
        assert!(matches!(g.add(a, d), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn reshape_rejects_wrong_count() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::<f64>::zeros(&[2, 3])).unwrap();
        assert!(g.reshape(a, &[4]).is_err());
        let r = g.reshape(a, &[3, 2]).unwrap();
        assert_eq!(g.shape(r), &[3, 2]);
    }

    #[test]
    fn cross_entropy_of_uniform_logits_is_log_classes() {
        let mut g = Graph::new();
        let z = g.param(Tensor::<f64>::zeros(&[2, 4])).unwrap();
        let loss = g.softmax_cross_entropy(z, &[1, 3]).unwrap();
        assert!((g.value(loss).data()[0] - 4f64.ln()).abs() < 1e-12);
        assert!(g.softmax_cross_entropy(z, &[1, 4]).is_err());
    }
}
