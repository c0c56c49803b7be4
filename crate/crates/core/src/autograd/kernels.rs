//! Tape-free numeric kernels shared by the autograd primitives and the
//! inference paths.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Stride and symmetric zero padding of a 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub const fn new(stride: usize, padding: usize) -> Self {
        ConvGeometry { stride, padding }
    }

    pub fn output_extent(&self, input: usize, kernel: usize) -> Result<usize> {
        if self.stride == 0 {
            return Err(Error::Geometry("stride must be positive".into()));
        }
        let padded = input + 2 * self.padding;
        if padded < kernel {
            return Err(Error::Geometry(format!(
                "kernel {kernel} larger than padded input {padded}"
            )));
        }
        Ok((padded - kernel) / self.stride + 1)
    }
}

/// Shapes of a conv2d call, validated once.
#[derive(Clone, Copy, Debug)]
pub struct ConvDims {
    pub batch: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kh: usize,
    pub kw: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub geom: ConvGeometry,
}

impl ConvDims {
    pub fn new(x_shape: &[usize], w_shape: &[usize], geom: ConvGeometry) -> Result<Self> {
        if x_shape.len() != 4 || w_shape.len() != 4 {
            return Err(Error::Geometry(format!(
                "conv2d expects NCHW input and OIHW kernel, got {x_shape:?} and {w_shape:?}"
            )));
        }
        if x_shape[1] != w_shape[1] {
            return Err(Error::shape("conv2d", &[w_shape[1]], &[x_shape[1]]));
        }
        let out_h = geom.output_extent(x_shape[2], w_shape[2])?;
        let out_w = geom.output_extent(x_shape[3], w_shape[3])?;
        Ok(ConvDims {
            batch: x_shape[0],
            in_channels: x_shape[1],
            height: x_shape[2],
            width: x_shape[3],
            out_channels: w_shape[0],
            kh: w_shape[2],
            kw: w_shape[3],
            out_h,
            out_w,
            geom,
        })
    }

    pub fn patch_len(&self) -> usize {
        self.in_channels * self.kh * self.kw
    }

    pub fn out_pixels(&self) -> usize {
        self.out_h * self.out_w
    }

    pub fn output_shape(&self) -> [usize; 4] {
        [self.batch, self.out_channels, self.out_h, self.out_w]
    }
}

/// Unfolds one CHW image into a `patch_len × out_pixels` matrix.
fn im2col<T: Scalar>(d: &ConvDims, x: &[T], cols: &mut [T]) {
    let (s, p) = (d.geom.stride as isize, d.geom.padding as isize);
    let pixels = d.out_pixels();
    for c in 0..d.in_channels {
        for ky in 0..d.kh {
            for kx in 0..d.kw {
                let row = (c * d.kh + ky) * d.kw + kx;
                let dst = &mut cols[row * pixels..(row + 1) * pixels];
                for oy in 0..d.out_h {
                    let iy = oy as isize * s + ky as isize - p;
                    let line = &mut dst[oy * d.out_w..(oy + 1) * d.out_w];
                    if iy < 0 || iy >= d.height as isize {
                        line.fill(T::ZERO);
                        continue;
                    }
                    let src = &x[(c * d.height + iy as usize) * d.width..][..d.width];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = ox as isize * s + kx as isize - p;
                        *v = if ix < 0 || ix >= d.width as isize {
                            T::ZERO
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Scatters a column matrix back onto a CHW gradient buffer (adds).
fn col2im<T: Scalar>(d: &ConvDims, cols: &[T], dx: &mut [T]) {
    let (s, p) = (d.geom.stride as isize, d.geom.padding as isize);
    let pixels = d.out_pixels();
    for c in 0..d.in_channels {
        for ky in 0..d.kh {
            for kx in 0..d.kw {
                let row = (c * d.kh + ky) * d.kw + kx;
                let src = &cols[row * pixels..(row + 1) * pixels];
                for oy in 0..d.out_h {
                    let iy = oy as isize * s + ky as isize - p;
                    if iy < 0 || iy >= d.height as isize {
                        continue;
                    }
                    let dst = &mut dx[(c * d.height + iy as usize) * d.width..][..d.width];
                    for ox in 0..d.out_w {
                        let ix = ox as isize * s + kx as isize - p;
                        if ix >= 0 && ix < d.width as isize {
                            dst[ix as usize] += src[oy * d.out_w + ox];
                        }
                    }
                }
            }
        }
    }
}

pub fn conv2d<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, geom: ConvGeometry) -> Result<Tensor<T>> {
    let d = ConvDims::new(x.shape(), w.shape(), geom)?;
    let (k, pixels) = (d.patch_len(), d.out_pixels());
    let in_len = d.in_channels * d.height * d.width;
    let out_len = d.out_channels * pixels;
    let mut cols = vec![T::ZERO; k * pixels];
    let mut y = vec![T::ZERO; d.batch * out_len];
    for n in 0..d.batch {
        im2col(&d, &x.data()[n * in_len..(n + 1) * in_len], &mut cols);
        T::gemm(
            d.out_channels,
            k,
            pixels,
            w.data(),
            false,
            &cols,
            false,
            &mut y[n * out_len..(n + 1) * out_len],
            false,
        );
    }
    Ok(Tensor::from_parts(d.output_shape().to_vec(), y))
}

/// Returns `(dx, dw)` for upstream `dy`; either side is skipped when not needed.
pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &[T],
    geom: ConvGeometry,
    need_x: bool,
    need_w: bool,
) -> Result<(Option<Tensor<T>>, Option<Tensor<T>>)> {
    let d = ConvDims::new(x.shape(), w.shape(), geom)?;
    let (k, pixels) = (d.patch_len(), d.out_pixels());
    let in_len = d.in_channels * d.height * d.width;
    let out_len = d.out_channels * pixels;
    if dy.len() != d.batch * out_len {
        return Err(Error::shape("conv2d_backward", &d.output_shape(), &[dy.len()]));
    }
    let mut cols = vec![T::ZERO; k * pixels];
    let mut dw = need_w.then(|| vec![T::ZERO; w.numel()]);
    let mut dx = need_x.then(|| vec![T::ZERO; x.numel()]);
    for n in 0..d.batch {
        let dy_n = &dy[n * out_len..(n + 1) * out_len];
        if let Some(dw) = dw.as_mut() {
            im2col(&d, &x.data()[n * in_len..(n + 1) * in_len], &mut cols);
            T::gemm(d.out_channels, pixels, k, dy_n, false, &cols, true, dw, true);
        }
        if let Some(dx) = dx.as_mut() {
            T::gemm(k, d.out_channels, pixels, w.data(), true, dy_n, false, &mut cols, false);
            col2im(&d, &cols, &mut dx[n * in_len..(n + 1) * in_len]);
        }
    }
    Ok((
        dx.map(|v| Tensor::from_parts(x.shape().to_vec(), v)),
        dw.map(|v| Tensor::from_parts(w.shape().to_vec(), v)),
    ))
}

/// Non-overlapping `size×size` max pooling (floor on ragged edges).
/// Returns the pooled tensor and the flat input index of each maximum.
pub fn max_pool2d<T: Scalar>(x: &Tensor<T>, size: usize) -> Result<(Tensor<T>, Vec<usize>)> {
    let s = x.shape();
    if s.len() != 4 || size == 0 || s[2] < size || s[3] < size {
        return Err(Error::Geometry(format!("max_pool2d({size}) on shape {s:?}")));
    }
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let (oh, ow) = (h / size, w / size);
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut arg = Vec::with_capacity(n * c * oh * ow);
    let data = x.data();
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + oy * size * w + ox * size;
                for dy in 0..size {
                    for dx in 0..size {
                        let idx = base + (oy * size + dy) * w + ox * size + dx;
                        if data[idx] > data[best] {
                            best = idx;
                        }
                    }
                }
                out.push(data[best]);
                arg.push(best);
            }
        }
    }
    Ok((Tensor::from_parts(vec![n, c, oh, ow], out), arg))
}

/// Per-channel mean and biased variance over every axis but axis 1.
pub fn channel_moments<T: Scalar>(x: &Tensor<T>) -> Result<(Vec<T>, Vec<T>)> {
    let s = x.shape();
    if s.len() < 2 {
        return Err(Error::Geometry(format!("channel statistics need rank >= 2, got {s:?}")));
    }
    let (n, c) = (s[0], s[1]);
    let inner: usize = s[2..].iter().product();
    let count = T::from_f64((n * inner) as f64);
    let data = x.data();
    let mut mean = vec![T::ZERO; c];
    let mut var = vec![T::ZERO; c];
    for ch in 0..c {
        let mut acc = T::ZERO;
        for b in 0..n {
            let off = (b * c + ch) * inner;
            for &v in &data[off..off + inner] {
                acc += v;
            }
        }
        let m = acc / count;
        let mut sq = T::ZERO;
        for b in 0..n {
            let off = (b * c + ch) * inner;
            for &v in &data[off..off + inner] {
                sq += (v - m) * (v - m);
            }
        }
        mean[ch] = m;
        var[ch] = sq / count;
    }
    Ok((mean, var))
}

/// `y = scale[c] * x + shift[c]` over axis 1.
pub fn channel_affine<T: Scalar>(x: &Tensor<T>, scale: &[T], shift: &[T]) -> Result<Tensor<T>> {
    let s = x.shape();
    if s.len() < 2 || s[1] != scale.len() || s[1] != shift.len() {
        return Err(Error::shape("channel_affine", &[scale.len()], s));
    }
    let c = s[1];
    let inner: usize = s[2..].iter().product();
    let mut out = x.data().to_vec();
    for (i, chunk) in out.chunks_mut(inner).enumerate() {
        let ch = i % c;
        for v in chunk {
            *v = scale[ch] * *v + shift[ch];
        }
    }
    Ok(Tensor::from_parts(s.to_vec(), out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, g: ConvGeometry) -> Vec<f64> {
        let d = ConvDims::new(x.shape(), w.shape(), g).unwrap();
        let mut y = vec![0.0; d.batch * d.out_channels * d.out_pixels()];
        for n in 0..d.batch {
            for o in 0..d.out_channels {
                for oy in 0..d.out_h {
                    for ox in 0..d.out_w {
                        let mut acc = 0.0;
                        for c in 0..d.in_channels {
                            for ky in 0..d.kh {
                                for kx in 0..d.kw {
                                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                                    let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                                    if iy < 0 || ix < 0 || iy >= d.height as isize || ix >= d.width as isize {
                                        continue;
                                    }
                                    let xv = x.data()
                                        [((n * d.in_channels + c) * d.height + iy as usize) * d.width + ix as usize];
                                    let wv = w.data()[((o * d.in_channels + c) * d.kh + ky) * d.kw + kx];
                                    acc += xv * wv;
                                }
                            }
                        }
                        y[((n * d.out_channels + o) * d.out_h + oy) * d.out_w + ox] = acc;
                    }
                }
            }
        }
        y
    }

    fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn conv_matches_six_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = random(&mut rng, &[1, 1, 4, 4]);
        let w = random(&mut rng, &[1, 1, 3, 3]);
        let g = ConvGeometry::new(1, 0);
        let y = conv2d(&x, &w, g).unwrap();
        assert_eq!(y.shape(), &[1, 1, 2, 2]);
        for (a, b) in y.data().iter().zip(naive_conv(&x, &w, g)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn conv_matches_oracle_with_stride_and_padding() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for (stride, padding) in [(1, 1), (2, 1), (2, 0), (1, 2)] {
            let x = random(&mut rng, &[2, 3, 7, 6]);
            let w = random(&mut rng, &[4, 3, 3, 3]);
            let g = ConvGeometry::new(stride, padding);
            let y = conv2d(&x, &w, g).unwrap();
            for (a, b) in y.data().iter().zip(naive_conv(&x, &w, g)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let x = Tensor::<f64>::zeros(&[1, 2, 4, 4]);
        let w = Tensor::<f64>::zeros(&[1, 3, 3, 3]);
        assert!(conv2d(&x, &w, ConvGeometry::new(1, 0)).is_err());
    }

    #[test]
    fn max_pool_picks_window_maximum() {
        let x = Tensor::<f64>::from_fn(&[1, 1, 4, 4], |i| i as f64);
        let (y, arg) = max_pool2d(&x, 2).unwrap();
        assert_eq!(y.data(), &[5.0, 7.0, 13.0, 15.0]);
        assert_eq!(arg, vec![5, 7, 13, 15]);
    }
}
