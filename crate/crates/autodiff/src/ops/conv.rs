use crate::element::Element;
use crate::error::TensorError;
use crate::Result;

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub o: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new(x: &[usize], k: &[usize], stride: usize, pad: usize) -> Result<Self> {
        let (n, c, h, w) = match *x {
            [n, c, h, w] => (n, c, h, w),
            _ => return Err(TensorError::contract("conv2d", format!("input must be NCHW, got {x:?}"))),
        };
        let (o, i, kh, kw) = match *k {
            [o, i, kh, kw] => (o, i, kh, kw),
            _ => return Err(TensorError::contract("conv2d", format!("kernels must be OIHW, got {k:?}"))),
        };
        if i != c {
            return Err(TensorError::mismatch("conv2d", x, k));
        }
        if stride == 0 {
            return Err(TensorError::contract("conv2d", "stride must be at least 1"));
        }
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(TensorError::mismatch("conv2d", x, k));
        }
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (w + 2 * pad - kw) / stride + 1;
        Ok(ConvGeom { n, c, h, w, o, kh, kw, stride, pad, ho, wo })
    }

    pub fn patch_len(&self) -> usize {
        self.c * self.kh * self.kw
    }

    pub fn out_hw(&self) -> usize {
        self.ho * self.wo
    }

    pub fn in_len(&self) -> usize {
        self.c * self.h * self.w
    }

    /// 1×1 stride-1 unpadded kernels read the input directly as the column matrix.
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    /// Valid `ox` range for kernel column `kj` when stride is 1.
    fn valid_cols(&self, kj: usize) -> (usize, usize) {
        let lo = self.pad.saturating_sub(kj);
        let hi = (self.w + self.pad).saturating_sub(kj).min(self.wo);
        (lo.min(hi), hi)
    }
}

fn im2col<T: Element>(g: &ConvGeom, x: &[T], cols: &mut [T]) {
    let hw = g.out_hw();
    for c in 0..g.c {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                for oy in 0..g.ho {
                    let seg = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy as usize >= g.h {
                        seg.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    if g.stride == 1 {
                        let (lo, hi) = g.valid_cols(kj);
                        seg[..lo].fill(T::zero());
                        seg[hi..].fill(T::zero());
                        if hi > lo {
                            let start = lo + kj - g.pad;
                            seg[lo..hi].copy_from_slice(&src[start..start + (hi - lo)]);
                        }
                    } else {
                        for (ox, v) in seg.iter_mut().enumerate() {
                            let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                            *v = if ix < 0 || ix as usize >= g.w {
                                T::zero()
                            } else {
                                src[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }
}

fn col2im_add<T: Element>(g: &ConvGeom, cols: &[T], dx: &mut [T]) {
    let hw = g.out_hw();
    for c in 0..g.c {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * hw..(row + 1) * hw];
                for oy in 0..g.ho {
                    let seg = &src[oy * g.wo..(oy + 1) * g.wo];
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy as usize >= g.h {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    if g.stride == 1 {
                        let (lo, hi) = g.valid_cols(kj);
                        if hi > lo {
                            let start = lo + kj - g.pad;
                            for (d, &s) in dst[start..start + (hi - lo)].iter_mut().zip(&seg[lo..hi]) {
                                *d = *d + s;
                            }
                        }
                    } else {
                        for (ox, &s) in seg.iter().enumerate() {
                            let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                            if ix >= 0 && (ix as usize) < g.w {
                                dst[ix as usize] = dst[ix as usize] + s;
                            }
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn forward<T: Element>(g: &ConvGeom, x: &[T], k: &[T]) -> Vec<T> {
    let hw = g.out_hw();
    let plen = g.patch_len();
    let mut out = vec![T::zero(); g.n * g.o * hw];
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); plen * hw] };
    for n in 0..g.n {
        let xn = &x[n * g.in_len()..(n + 1) * g.in_len()];
        let cols_ref: &[T] = if g.is_pointwise() {
            xn
        } else {
            im2col(g, xn, &mut cols);
            &cols
        };
        let yn = &mut out[n * g.o * hw..(n + 1) * g.o * hw];
        T::gemm(g.o, plen, hw, T::one(), k, false, cols_ref, false, T::zero(), yn);
    }
    out
}

/// Returns `(d_input, d_kernels)`; either is skipped when not requested.
pub(crate) fn backward<T: Element>(
    g: &ConvGeom,
    x: &[T],
    k: &[T],
    gout: &[T],
    want_dx: bool,
    want_dk: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let hw = g.out_hw();
    let plen = g.patch_len();
    let mut dk = want_dk.then(|| vec![T::zero(); k.len()]);
    let mut dx = want_dx.then(|| vec![T::zero(); x.len()]);
    let pointwise = g.is_pointwise();
    let mut cols = if pointwise { Vec::new() } else { vec![T::zero(); plen * hw] };
    for n in 0..g.n {
        let xn = &x[n * g.in_len()..(n + 1) * g.in_len()];
        let gn = &gout[n * g.o * hw..(n + 1) * g.o * hw];
        if let Some(dk) = dk.as_mut() {
            let cols_ref: &[T] = if pointwise {
                xn
            } else {
                im2col(g, xn, &mut cols);
                &cols
            };
            T::gemm(g.o, hw, plen, T::one(), gn, false, cols_ref, true, T::one(), dk);
        }
        if let Some(dx) = dx.as_mut() {
            let dxn = &mut dx[n * g.in_len()..(n + 1) * g.in_len()];
            if pointwise {
                T::gemm(plen, g.o, hw, T::one(), k, true, gn, false, T::one(), dxn);
            } else {
                T::gemm(plen, g.o, hw, T::one(), k, true, gn, false, T::zero(), &mut cols);
                col2im_add(g, &cols, dxn);
            }
        }
    }
    (dx, dk)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct seven-loop convolution.
    fn direct(g: &ConvGeom, x: &[f64], k: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; g.n * g.o * g.out_hw()];
        for n in 0..g.n {
            for o in 0..g.o {
                for oy in 0..g.ho {
                    for ox in 0..g.wo {
                        let mut acc = 0.0;
                        for c in 0..g.c {
                            for ki in 0..g.kh {
                                for kj in 0..g.kw {
                                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                                    let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                                    if iy < 0 || ix < 0 || iy as usize >= g.h || ix as usize >= g.w {
                                        continue;
                                    }
                                    acc += x[((n * g.c + c) * g.h + iy as usize) * g.w + ix as usize]
                                        * k[((o * g.c + c) * g.kh + ki) * g.kw + kj];
                                }
                            }
                        }
                        out[((n * g.o + o) * g.ho + oy) * g.wo + ox] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn lowered_conv_matches_direct_loops() {
        for &(stride, pad, kh) in &[(1, 0, 3), (1, 1, 3), (2, 1, 3), (1, 0, 1), (2, 0, 2), (3, 2, 3)] {
            let xs = [2, 3, 7, 6];
            let ks = [4, 3, kh, kh];
            let g = ConvGeom::new(&xs, &ks, stride, pad).unwrap();
            let x: Vec<f64> = (0..xs.iter().product()).map(|i: usize| ((i * 7 % 13) as f64) - 6.0).collect();
            let k: Vec<f64> = (0..ks.iter().product()).map(|i: usize| ((i * 5 % 11) as f64) * 0.1 - 0.5).collect();
            let got = forward(&g, &x, &k);
            let want = direct(&g, &x, &k);
            for (a, b) in got.iter().zip(&want) {
                assert!((a - b).abs() < 1e-10, "stride {stride} pad {pad} k {kh}");
            }
        }
    }

    #[test]
    fn output_size_formula() {
        let g = ConvGeom::new(&[1, 1, 80, 80], &[1, 1, 3, 3], 2, 1).unwrap();
        assert_eq!((g.ho, g.wo), ((80 + 2 - 3) / 2 + 1, (80 + 2 - 3) / 2 + 1));
    }
}
