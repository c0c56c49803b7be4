//! Bit-packed ±1 tensors and the XNOR-popcount convolution.
//!
//! Packing runs along the last axis. Element `j` of a row lands in word
//! `j / 64`, bit `j % 64` (low bit first); `+1` is stored as 1 and `-1` as 0.
//! So `[1, -1, 1, 1]` packs to the word `0b1101`. Each row is padded with zero
//! bits up to the next word boundary.

use crate::autograd::kernels::ConvGeometry;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const WORD_BITS: usize = 64;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PackedTensor {
    shape: Vec<usize>,
    words: Vec<u64>,
    words_per_row: usize,
    pad_count: usize,
}

impl PackedTensor {
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn words(&self) -> &[u64] {
        &self.words
    }

    pub fn words_per_row(&self) -> usize {
        self.words_per_row
    }

    /// Padding bits at the end of every row.
    pub fn pad_count(&self) -> usize {
        self.pad_count
    }

    pub fn row_len(&self) -> usize {
        *self.shape.last().expect("packed tensors have rank >= 1")
    }

    pub fn row(&self, r: usize) -> &[u64] {
        &self.words[r * self.words_per_row..(r + 1) * self.words_per_row]
    }

    /// Mask of the valid bits in a row's last word.
    fn tail_mask(&self) -> u64 {
        let used = WORD_BITS - self.pad_count;
        if used == WORD_BITS {
            u64::MAX
        } else {
            (1u64 << used) - 1
        }
    }
}

/// Packs a tensor whose every element is exactly `+1` or `-1`.
pub fn bitpack<T: Scalar>(t: &Tensor<T>) -> Result<PackedTensor> {
    let row_len = *t.shape().last().ok_or(Error::Empty("bitpack"))?;
    let words_per_row = row_len.div_ceil(WORD_BITS);
    let rows = t.numel() / row_len;
    let mut words = vec![0u64; rows * words_per_row];
    for (i, &v) in t.data().iter().enumerate() {
        let bit = if v == T::ONE {
            1
        } else if v == -T::ONE {
            0
        } else {
            return Err(Error::NotBinary {
                index: i,
                value: v.to_f64(),
            });
        };
        let (r, j) = (i / row_len, i % row_len);
        words[r * words_per_row + j / WORD_BITS] |= bit << (j % WORD_BITS);
    }
    Ok(PackedTensor {
        shape: t.shape().to_vec(),
        words,
        words_per_row,
        pad_count: words_per_row * WORD_BITS - row_len,
    })
}

pub fn unpack<T: Scalar>(p: &PackedTensor) -> Tensor<T> {
    let row_len = p.row_len();
    Tensor::from_fn(&p.shape, |i| {
        let (r, j) = (i / row_len, i % row_len);
        if (p.words[r * p.words_per_row + j / WORD_BITS] >> (j % WORD_BITS)) & 1 == 1 {
            T::ONE
        } else {
            -T::ONE
        }
    })
}

/// Number of positions where two packed rows agree, ignoring padding.
pub fn agreements(a: &[u64], b: &[u64], tail_mask: u64) -> u32 {
    let last = a.len() - 1;
    let mut n = 0;
    for i in 0..last {
        n += (!(a[i] ^ b[i])).count_ones();
    }
    n + (!(a[last] ^ b[last]) & tail_mask).count_ones()
}

/// ±1 dot product of two packed rows.
pub fn xnor_dot(a: &PackedTensor, ra: usize, b: &PackedTensor, rb: usize) -> Result<i64> {
    if a.row_len() != b.row_len() {
        return Err(Error::shape("xnor_dot", &[a.row_len()], &[b.row_len()]));
    }
    let agree = agreements(a.row(ra), b.row(rb), a.tail_mask()) as i64;
    Ok(2 * agree - a.row_len() as i64)
}

/// NCHW ±1 activations packed per pixel along channels (NHWC order).
pub fn pack_activations<T: Scalar>(a: &Tensor<T>) -> Result<PackedTensor> {
    let s = a.shape();
    if s.len() != 4 {
        return Err(Error::Geometry(format!("activations must be NCHW, got {s:?}")));
    }
    bitpack(&permute_channels_last(a))
}

/// OIHW ±1 kernels packed per tap along input channels (OHWI order).
pub fn pack_weights<T: Scalar>(w: &Tensor<T>) -> Result<PackedTensor> {
    let s = w.shape();
    if s.len() != 4 {
        return Err(Error::Geometry(format!("kernels must be OIHW, got {s:?}")));
    }
    bitpack(&permute_channels_last(w))
}

fn permute_channels_last<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let s = x.shape();
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let src = x.data();
    let mut out = Vec::with_capacity(x.numel());
    for b in 0..n {
        for y in 0..h {
            for xx in 0..w {
                for ch in 0..c {
                    out.push(src[((b * c + ch) * h + y) * w + xx]);
                }
            }
        }
    }
    Tensor::from_parts(vec![n, h, w, c], out)
}

/// Integer output of a packed convolution, NCHW.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IntTensor {
    pub shape: Vec<usize>,
    pub data: Vec<i32>,
}

impl IntTensor {
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        Tensor::from_fn(&self.shape, |i| T::from_f64(self.data[i] as f64))
    }
}

/// Convolution of packed kernels `w` (O,kh,kw,I) over packed activations `a`
/// (N,H,W,C). Each output is `2·agree − L`, where `L` counts only the taps
/// that fall inside the image; zero-padded taps contribute nothing, exactly
/// as in the float convolution of the unpacked operands.
pub fn xnor_popcount_conv(w: &PackedTensor, a: &PackedTensor, geom: ConvGeometry) -> Result<IntTensor> {
    let (ws, as_) = (w.shape(), a.shape());
    if ws.len() != 4 || as_.len() != 4 {
        return Err(Error::Geometry(format!(
            "packed conv needs rank-4 operands, got {ws:?} and {as_:?}"
        )));
    }
    let (o, kh, kw, ci) = (ws[0], ws[1], ws[2], ws[3]);
    let (n, h, wd, c) = (as_[0], as_[1], as_[2], as_[3]);
    if ci != c {
        return Err(Error::shape("xnor_popcount_conv", &[c], &[ci]));
    }
    let oh = geom.output_extent(h, kh)?;
    let ow = geom.output_extent(wd, kw)?;
    let wpr = a.words_per_row();
    let mask = a.tail_mask();
    let (pad, stride) = (geom.padding as isize, geom.stride as isize);
    let mut out = vec![0i32; n * o * oh * ow];
    for b in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                let y0 = oy as isize * stride - pad;
                let x0 = ox as isize * stride - pad;
                for oc in 0..o {
                    let mut agree = 0u32;
                    let mut taps = 0usize;
                    for dy in 0..kh {
                        let y = y0 + dy as isize;
                        if y < 0 || y >= h as isize {
                            continue;
                        }
                        for dx in 0..kw {
                            let x = x0 + dx as isize;
                            if x < 0 || x >= wd as isize {
                                continue;
                            }
                            let arow = (b * h + y as usize) * wd + x as usize;
                            let wrow = (oc * kh + dy) * kw + dx;
                            agree += agreements(
                                &a.words()[arow * wpr..(arow + 1) * wpr],
                                &w.words()[wrow * wpr..(wrow + 1) * wpr],
                                mask,
                            );
                            taps += 1;
                        }
                    }
                    out[((b * o + oc) * oh + oy) * ow + ox] = 2 * agree as i32 - (taps * c) as i32;
                }
            }
        }
    }
    Ok(IntTensor {
        shape: vec![n, o, oh, ow],
        data: out,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn low_to_high_bit_order() {
        let p = bitpack(&t(&[4], &[1.0, -1.0, 1.0, 1.0])).unwrap();
        assert_eq!(p.words(), &[0b1101]);
        assert_eq!(p.pad_count(), 60);
    }

    #[test]
    fn word_boundary_arithmetic() {
        let p = bitpack(&Tensor::<f64>::full(&[65], 1.0)).unwrap();
        assert_eq!(p.words().len(), 2);
        assert_eq!(p.pad_count(), 63);
        assert_eq!(p.words()[1], 1);
        let p = bitpack(&Tensor::<f64>::full(&[3, 64], -1.0)).unwrap();
        assert_eq!((p.words().len(), p.pad_count()), (3, 0));
    }

    #[test]
    fn non_binary_element_reports_index() {
        let err = bitpack(&t(&[3], &[1.0, -1.0, 0.0])).unwrap_err();
        assert!(matches!(err, Error::NotBinary { index: 2, .. }));
    }

    #[test]
    fn dot_of_row_with_itself_and_negation() {
        let x = t(
            &[2, 70],
            &(0..140)
                .map(|i| if i % 3 == 0 { 1.0 } else { -1.0 })
                .collect::<Vec<_>>(),
        );
        let neg = x.map(|v| -v);
        let (p, q) = (bitpack(&x).unwrap(), bitpack(&neg).unwrap());
        assert_eq!(xnor_dot(&p, 1, &p, 1).unwrap(), 70);
        assert_eq!(xnor_dot(&p, 0, &q, 0).unwrap(), -70);
    }

    #[test]
    fn all_ones_interior_is_nine() {
        let a = pack_activations(&Tensor::<f32>::full(&[1, 1, 5, 5], 1.0)).unwrap();
        let w = pack_weights(&Tensor::<f32>::full(&[1, 1, 3, 3], 1.0)).unwrap();
        let y = xnor_popcount_conv(&w, &a, ConvGeometry::new(1, 1)).unwrap();
        assert_eq!(y.shape, vec![1, 1, 5, 5]);
        assert_eq!(y.data[6], 9);
        assert_eq!(y.data[0], 4);
    }
}
