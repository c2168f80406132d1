//! Forward kernels and the multiply-accumulate counter.
//!
//! Only convolution, dense layers and matrix products count toward the MAC
//! total; elementwise work (activations, bias adds, softmax) is excluded.
//! The counter is thread-local, so concurrent forward passes on separate
//! threads keep separate tallies.

use std::cell::Cell;

use crate::error::{Error, Result};

use super::Tensor;

thread_local! {
    static MACS: Cell<u64> = const { Cell::new(0) };
}

/// Multiply-accumulates recorded on this thread since the last reset.
pub fn mac_total() -> u64 {
    MACS.with(|m| m.get())
}

pub fn reset_mac_counter() {
    MACS.with(|m| m.set(0));
}

pub(crate) fn count_macs(n: u64) {
    MACS.with(|m| m.set(m.get() + n));
}

/// Strided view of a row-major or transposed matrix for [`gemm`].
#[derive(Clone, Copy)]
pub(crate) struct MatRef<'a> {
    pub data: &'a [f64],
    pub rows: usize,
    pub cols: usize,
    pub row_stride: isize,
    pub col_stride: isize,
}

impl<'a> MatRef<'a> {
    pub fn new(data: &'a [f64], rows: usize, cols: usize) -> Self {
        Self {
            data,
            rows,
            cols,
            row_stride: cols as isize,
            col_stride: 1,
        }
    }

    /// Transposed view of a row-major `[rows, cols]` buffer.
    pub fn t(data: &'a [f64], rows: usize, cols: usize) -> Self {
        Self {
            data,
            rows: cols,
            cols: rows,
            row_stride: 1,
            col_stride: cols as isize,
        }
    }

    fn max_offset(&self) -> usize {
        if self.rows == 0 || self.cols == 0 {
            return 0;
        }
        (self.rows - 1) * self.row_stride as usize + (self.cols - 1) * self.col_stride as usize
    }
}

/// `c = a·b + beta·c` where `c` is row-major `[a.rows, b.cols]`. Not counted.
pub(crate) fn gemm(a: MatRef<'_>, b: MatRef<'_>, beta: f64, c: &mut [f64]) {
    assert_eq!(a.cols, b.rows, "gemm inner dimension");
    let (m, k, n) = (a.rows, a.cols, b.cols);
    assert_eq!(c.len(), m * n, "gemm output size");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    assert!(a.max_offset() < a.data.len() && b.max_offset() < b.data.len());
    // SAFETY: extents and strides were checked against the slice lengths above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            a.row_stride,
            a.col_stride,
            b.data.as_ptr(),
            b.row_stride,
            b.col_stride,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new(input: &[usize], kernel: &[usize], stride: usize, pad: usize) -> Result<Self> {
        if input.len() != 3 || kernel.len() != 4 {
            return Err(Error::dim(
                "conv2d",
                format!("input {input:?} must be [C,H,W], kernel {kernel:?} must be [Co,Ci,kh,kw]"),
            ));
        }
        let (c_in, h, w) = (input[0], input[1], input[2]);
        let (c_out, kc, kh, kw) = (kernel[0], kernel[1], kernel[2], kernel[3]);
        if kc != c_in {
            return Err(Error::dim(
                "conv2d",
                format!("input has {c_in} channels but kernel expects {kc}"),
            ));
        }
        if stride == 0 {
            return Err(Error::dim("conv2d", "stride must be positive"));
        }
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(Error::dim(
                "conv2d",
                format!("kernel {kh}x{kw} larger than padded input {h}x{w} (pad {pad})"),
            ));
        }
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (w + 2 * pad - kw) / stride + 1;
        Ok(Self {
            c_in,
            h,
            w,
            c_out,
            kh,
            kw,
            stride,
            pad,
            ho,
            wo,
        })
    }

    pub fn patch_len(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    pub fn out_len(&self) -> usize {
        self.ho * self.wo
    }

    pub fn macs(&self) -> u64 {
        (self.c_out * self.patch_len() * self.out_len()) as u64
    }

    /// 1×1, stride 1, no padding: the input already is its own column matrix.
    pub fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    pub fn im2col(&self, input: &[f64]) -> Vec<f64> {
        let p = self.out_len();
        let mut cols = vec![0.0; self.patch_len() * p];
        for ci in 0..self.c_in {
            let plane = &input[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let r = (ci * self.kh + ki) * self.kw + kj;
                    let dst = &mut cols[r * p..(r + 1) * p];
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + ki) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let src = &plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        let row = &mut dst[oy * self.wo..(oy + 1) * self.wo];
                        for (ox, d) in row.iter_mut().enumerate() {
                            let ix = (ox * self.stride + kj) as isize - self.pad as isize;
                            if ix >= 0 && ix < self.w as isize {
                                *d = src[ix as usize];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    /// Scatter-add a column-matrix gradient back onto the input layout.
    pub fn col2im(&self, cols: &[f64], out: &mut [f64]) {
        let p = self.out_len();
        for ci in 0..self.c_in {
            let plane = &mut out[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let r = (ci * self.kh + ki) * self.kw + kj;
                    let src = &cols[r * p..(r + 1) * p];
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + ki) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        for ox in 0..self.wo {
                            let ix = (ox * self.stride + kj) as isize - self.pad as isize;
                            if ix >= 0 && ix < self.w as isize {
                                dst[ix as usize] += src[oy * self.wo + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Raw convolution used by both the tape and [`conv2d`]. Returns the output
/// buffer and, when requested, the column matrix for the backward pass.
pub(crate) fn conv2d_raw(
    geom: &ConvGeom,
    input: &[f64],
    kernel: &[f64],
    keep_cols: bool,
) -> (Vec<f64>, Option<Vec<f64>>) {
    let k = geom.patch_len();
    let p = geom.out_len();
    let mut out = vec![0.0; geom.c_out * p];
    count_macs(geom.macs());
    if geom.is_pointwise() {
        gemm(MatRef::new(kernel, geom.c_out, k), MatRef::new(input, k, p), 0.0, &mut out);
        return (out, keep_cols.then(|| input.to_vec()));
    }
    let cols = geom.im2col(input);
    gemm(MatRef::new(kernel, geom.c_out, k), MatRef::new(&cols, k, p), 0.0, &mut out);
    (out, keep_cols.then_some(cols))
}

/// 2-D cross-correlation of a `[C_in,H,W]` input with a `[C_out,C_in,kh,kw]`
/// kernel, zero padded.
pub fn conv2d(input: &Tensor, kernel: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
    let geom = ConvGeom::new(input.shape(), kernel.shape(), stride, padding)?;
    let (out, _) = conv2d_raw(&geom, input.data(), kernel.data(), false);
    Tensor::new(&[geom.c_out, geom.ho, geom.wo], out)
}

/// `weight·input + bias` for a single vector.
pub fn dense(input: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    input.expect_rank("dense", 1)?;
    weight.expect_rank("dense", 2)?;
    bias.expect_rank("dense", 1)?;
    let (m, n) = (weight.shape()[0], weight.shape()[1]);
    if input.len() != n || bias.len() != m {
        return Err(Error::dim(
            "dense",
            format!(
                "weight {:?}, input {:?}, bias {:?}",
                weight.shape(),
                input.shape(),
                bias.shape()
            ),
        ));
    }
    let mut out = bias.data().to_vec();
    gemm(MatRef::new(weight.data(), m, n), MatRef::new(input.data(), n, 1), 1.0, &mut out);
    count_macs((m * n) as u64);
    Tensor::new(&[m], out)
}

pub(crate) fn softmax_in_place(v: &mut [f64]) {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in v.iter_mut() {
        *x /= sum;
    }
}

/// `ln Σ exp(v)` with max subtraction.
pub(crate) fn log_sum_exp(v: &[f64]) -> f64 {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + v.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Softmax of a non-empty vector.
pub fn softmax(input: &Tensor) -> Result<Tensor> {
    input.expect_rank("softmax", 1)?;
    let mut out = input.data().to_vec();
    softmax_in_place(&mut out);
    Tensor::new(input.shape(), out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tensor(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    /// Direct six-loop convolution, counting its own multiply-accumulates.
    fn naive_conv(input: &Tensor, kernel: &Tensor, stride: usize, pad: usize) -> (Vec<f64>, u64) {
        let (ci, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
        let (co, kh, kw) = (kernel.shape()[0], kernel.shape()[2], kernel.shape()[3]);
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (w + 2 * pad - kw) / stride + 1;
        let mut out = vec![0.0; co * ho * wo];
        let mut macs = 0u64;
        for o in 0..co {
            for y in 0..ho {
                for x in 0..wo {
                    let mut acc = 0.0;
                    for c in 0..ci {
                        for i in 0..kh {
                            for j in 0..kw {
                                macs += 1;
                                let iy = (y * stride + i) as isize - pad as isize;
                                let ix = (x * stride + j) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                acc += kernel.data()[((o * ci + c) * kh + i) * kw + j]
                                    * input.data()[(c * h + iy as usize) * w + ix as usize];
                            }
                        }
                    }
                    out[(o * ho + y) * wo + x] = acc;
                }
            }
        }
        (out, macs)
    }

    #[test]
    fn identity_pointwise_conv_is_identity() {
        let input = tensor(&[3, 2, 4], &(0..24).map(|v| v as f64 * 0.5 - 3.0).collect::<Vec<_>>());
        let mut k = vec![0.0; 9];
        for c in 0..3 {
            k[c * 3 + c] = 1.0;
        }
        let kernel = tensor(&[3, 3, 1, 1], &k);
        let out = conv2d(&input, &kernel, 1, 0).unwrap();
        assert_eq!(out, input);
    }

    #[test]
    fn zero_kernel_gives_zero_output() {
        let input = Tensor::full(&[2, 5, 5], 1.5);
        let kernel = Tensor::zeros(&[4, 2, 3, 3]);
        let out = conv2d(&input, &kernel, 2, 1).unwrap();
        assert_eq!(out.shape(), &[4, 3, 3]);
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv_matches_naive_loops() {
        let input = tensor(&[2, 7, 6], &(0..84).map(|v| ((v * 37 % 11) as f64) - 5.0).collect::<Vec<_>>());
        let kernel = tensor(&[3, 2, 3, 3], &(0..54).map(|v| ((v * 13 % 7) as f64) * 0.25 - 0.75).collect::<Vec<_>>());
        for (stride, pad) in [(1, 0), (1, 1), (2, 1), (3, 2)] {
            reset_mac_counter();
            let out = conv2d(&input, &kernel, stride, pad).unwrap();
            let (expected, macs) = naive_conv(&input, &kernel, stride, pad);
            assert_eq!(mac_total(), macs);
            for (a, b) in out.data().iter().zip(&expected) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn reduction_conv_mac_count() {
        // Loop-count oracle: one MAC per (out channel, in channel, output pixel).
        let mut loops = 0u64;
        for _co in 0..64 {
            for _ci in 0..512 {
                for _y in 0..12 {
                    for _x in 0..20 {
                        loops += 1;
                    }
                }
            }
        }
        assert_eq!(loops, 7_864_320);
        let input = Tensor::zeros(&[512, 12, 20]);
        let kernel = Tensor::zeros(&[64, 512, 1, 1]);
        reset_mac_counter();
        conv2d(&input, &kernel, 1, 0).unwrap();
        assert_eq!(mac_total(), loops);
    }

    #[test]
    fn conv_channel_mismatch_is_structured() {
        let err = conv2d(&Tensor::zeros(&[3, 4, 4]), &Tensor::zeros(&[2, 4, 1, 1]), 1, 0).unwrap_err();
        assert!(matches!(err, Error::Dimension { op: "conv2d", .. }));
        let err = conv2d(&Tensor::zeros(&[3, 2, 2]), &Tensor::zeros(&[2, 3, 5, 5]), 1, 0).unwrap_err();
        assert!(matches!(err, Error::Dimension { .. }));
    }

    #[test]
    fn dense_cases() {
        let eye = tensor(&[3, 3], &[1., 0., 0., 0., 1., 0., 0., 0., 1.]);
        let x = tensor(&[3], &[1.5, -2.0, 0.25]);
        assert_eq!(dense(&x, &eye, &Tensor::zeros(&[3])).unwrap(), x);

        let w = tensor(&[2, 3], &[1., 2., 3., 4., 5., 6.]);
        let b = tensor(&[2], &[0.5, -1.0]);
        assert_eq!(dense(&Tensor::zeros(&[3]), &w, &b).unwrap(), b);

        let w = tensor(&[2, 2], &[1., 2., 3., 4.]);
        let out = dense(&tensor(&[2], &[1., 1.]), &w, &Tensor::zeros(&[2])).unwrap();
        assert_eq!(out.data(), &[3.0, 7.0]);

        let err = dense(&tensor(&[3], &[1., 1., 1.]), &w, &Tensor::zeros(&[2])).unwrap_err();
        assert!(matches!(err, Error::Dimension { op: "dense", .. }));
    }

    #[test]
    fn mac_counter_examples() {
        reset_mac_counter();
        assert_eq!(mac_total(), 0);
        let w = Tensor::zeros(&[2, 3]);
        dense(&Tensor::zeros(&[3]), &w, &Tensor::zeros(&[2])).unwrap();
        assert_eq!(mac_total(), 6);

        reset_mac_counter();
        let input = Tensor::zeros(&[2, 9, 9]);
        let kernel = Tensor::zeros(&[3, 2, 3, 3]);
        conv2d(&input, &kernel, 2, 1).unwrap();
        let once = mac_total();
        conv2d(&input, &kernel, 2, 1).unwrap();
        assert_eq!(mac_total(), 2 * once);
    }

    #[test]
    fn softmax_examples() {
        assert_eq!(softmax(&tensor(&[1], &[-42.0])).unwrap().data(), &[1.0]);
        let s = softmax(&Tensor::full(&[4], 3.3)).unwrap();
        assert!(s.data().iter().all(|&p| (p - 0.25).abs() < 1e-15));
        let s = softmax(&tensor(&[2], &[0.0, 3f64.ln()])).unwrap();
        assert!((s.data()[0] - 0.25).abs() < 1e-15);
        assert!((s.data()[1] - 0.75).abs() < 1e-15);
        let s = softmax(&tensor(&[3], &[1000.0, 999.0, -1000.0])).unwrap();
        assert!(s.data().iter().all(|p| p.is_finite()));
    }
}
