//! Slice-level numeric kernels shared by the graph ops.

/// `c = a·b` (or `c += a·b` when `accumulate`), with `a` logically `m×k` and `b` logically `k×n`.
///
/// `a_t`/`b_t` mark operands stored transposed (`k×m` / `n×k` row-major).
#[allow(clippy::too_many_arguments)]
pub fn gemm(m: usize, k: usize, n: usize, a: &[f64], a_t: bool, b: &[f64], b_t: bool, c: &mut [f64], accumulate: bool) {
    assert!(a.len() >= m * k, "gemm: lhs too short");
    assert!(b.len() >= k * n, "gemm: rhs too short");
    assert!(c.len() >= m * n, "gemm: output too short");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c[..m * n].iter_mut().for_each(|v| *v = 0.0);
        }
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: bounds on all three buffers are asserted above and the strides
    // describe dense row-major (or transposed) layouts within those bounds.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Geometry of one 2-D sliding-window pass over a `channels×height×width` image.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Window2d {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub padding: (usize, usize),
}

impl Window2d {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.padding.0 - self.kernel.0) / self.stride.0 + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.padding.1 - self.kernel.1) / self.stride.1 + 1
    }

    pub fn col_rows(&self) -> usize {
        self.channels * self.kernel.0 * self.kernel.1
    }

    pub fn col_cols(&self) -> usize {
        self.out_height() * self.out_width()
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == (1, 1) && self.stride == (1, 1) && self.padding == (0, 0)
    }
}

/// Output positions `[lo, hi)` along one axis whose input index
/// `o·stride + k - pad` lands inside `0..len`.
fn valid_range(out: usize, len: usize, k: usize, stride: usize, pad: usize) -> (usize, usize) {
    let lo = if pad > k { (pad - k).div_ceil(stride) } else { 0 };
    let hi = if len + pad > k { ((len + pad - k - 1) / stride + 1).min(out) } else { 0 };
    (lo.min(hi), hi)
}

/// Unfolds an image into a `(C·kh·kw) × (Ho·Wo)` column matrix whose rows
/// are `ld` apart in `cols` (`ld = Ho·Wo` for a dense matrix).
pub fn im2col(img: &[f64], g: &Window2d, cols: &mut [f64], ld: usize) {
    let (kh, kw) = g.kernel;
    let (sh, sw) = g.stride;
    let (ph, pw) = g.padding;
    let (ho, wo) = (g.out_height(), g.out_width());
    let (h, w) = (g.height, g.width);
    let l = ho * wo;
    debug_assert!(ld >= l);
    debug_assert!(cols.len() + ld >= g.col_rows() * ld + l);
    if g.is_pointwise() {
        for c in 0..g.channels {
            cols[c * ld..c * ld + l].copy_from_slice(&img[c * l..(c + 1) * l]);
        }
        return;
    }
    for c in 0..g.channels {
        let plane = &img[c * h * w..(c + 1) * h * w];
        for ki in 0..kh {
            let (ylo, yhi) = valid_range(ho, h, ki, sh, ph);
            for kj in 0..kw {
                let (xlo, xhi) = valid_range(wo, w, kj, sw, pw);
                let row = (c * kh + ki) * kw + kj;
                let dst = &mut cols[row * ld..row * ld + l];
                dst[..ylo * wo].fill(0.0);
                dst[yhi * wo..].fill(0.0);
                for oy in ylo..yhi {
                    let iy = oy * sh + ki - ph;
                    let src = &plane[iy * w..(iy + 1) * w];
                    let line = &mut dst[oy * wo..(oy + 1) * wo];
                    line[..xlo].fill(0.0);
                    line[xhi..].fill(0.0);
                    if xlo < xhi {
                        let x0 = xlo * sw + kj - pw;
                        if sw == 1 {
                            line[xlo..xhi].copy_from_slice(&src[x0..x0 + xhi - xlo]);
                        } else {
                            let src = &src[x0..=x0 + (xhi - xlo - 1) * sw];
                            for (j, v) in line[xlo..xhi].iter_mut().enumerate() {
                                *v = src[j * sw];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters (adds) a column matrix with row stride
/// `ld` back into an image.
pub fn col2im(cols: &[f64], g: &Window2d, img: &mut [f64], ld: usize) {
    let (kh, kw) = g.kernel;
    let (sh, sw) = g.stride;
    let (ph, pw) = g.padding;
    let (ho, wo) = (g.out_height(), g.out_width());
    let (h, w) = (g.height, g.width);
    let l = ho * wo;
    if g.is_pointwise() {
        for c in 0..g.channels {
            for (d, s) in img[c * l..(c + 1) * l].iter_mut().zip(&cols[c * ld..c * ld + l]) {
                *d += s;
            }
        }
        return;
    }
    for c in 0..g.channels {
        let plane = &mut img[c * h * w..(c + 1) * h * w];
        for ki in 0..kh {
            let (ylo, yhi) = valid_range(ho, h, ki, sh, ph);
            for kj in 0..kw {
                let (xlo, xhi) = valid_range(wo, w, kj, sw, pw);
                if xlo >= xhi {
                    continue;
                }
                let row = (c * kh + ki) * kw + kj;
                let src = &cols[row * ld..row * ld + l];
                let x0 = xlo * sw + kj - pw;
                for oy in ylo..yhi {
                    let iy = oy * sh + ki - ph;
                    let dst = &mut plane[iy * w + x0..(iy + 1) * w];
                    let line = &src[oy * wo + xlo..oy * wo + xhi];
                    if sw == 1 {
                        dst[..line.len()].iter_mut().zip(line).for_each(|(d, v)| *d += v);
                    } else {
                        for (d, v) in dst.iter_mut().step_by(sw).zip(line) {
                            *d += v;
                        }
                    }
                }
            }
        }
    }
}

/// `[B, C, L]` to `[C, B·L]`.
pub fn batch_to_channels(x: &[f64], batch: usize, c: usize, l: usize) -> Vec<f64> {
    let mut out = vec![0.0; batch * c * l];
    batch_to_channels_into(x, batch, c, l, &mut out);
    out
}

/// [`batch_to_channels`] writing into the first `B·C·L` entries of `out`.
pub fn batch_to_channels_into(x: &[f64], batch: usize, c: usize, l: usize, out: &mut [f64]) {
    for bi in 0..batch {
        for ch in 0..c {
            out[(ch * batch + bi) * l..(ch * batch + bi + 1) * l].copy_from_slice(&x[(bi * c + ch) * l..(bi * c + ch + 1) * l]);
        }
    }
}

thread_local! {
    static SCRATCH: std::cell::RefCell<Vec<Vec<f64>>> = const { std::cell::RefCell::new(Vec::new()) };
}

/// A reusable per-thread buffer of at least `len` values with unspecified
/// contents. Callers must overwrite every entry they read.
pub struct Scratch(Vec<f64>);

impl Scratch {
    pub fn take(len: usize) -> Self {
        let mut v = SCRATCH.with(|s| s.borrow_mut().pop()).unwrap_or_default();
        if v.len() < len {
            v.resize(len, 0.0);
        }
        Scratch(v)
    }
}

impl std::ops::Deref for Scratch {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl std::ops::DerefMut for Scratch {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

impl Drop for Scratch {
    fn drop(&mut self) {
        let v = std::mem::take(&mut self.0);
        let _ = SCRATCH.try_with(|s| s.borrow_mut().push(v));
    }
}

/// `[C, B·L]` to `[B, C, L]`, added into `out`.
pub fn channels_to_batch_add(x: &[f64], batch: usize, c: usize, l: usize, out: &mut [f64]) {
    for bi in 0..batch {
        for ch in 0..c {
            let src = &x[(ch * batch + bi) * l..(ch * batch + bi + 1) * l];
            out[(bi * c + ch) * l..(bi * c + ch + 1) * l]
                .iter_mut()
                .zip(src)
                .for_each(|(d, s)| *d += s);
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Pooling bin `[start, end)` for output index `i` of `out` bins over `len` inputs.
pub fn adaptive_bin(i: usize, out: usize, len: usize) -> (usize, usize) {
    let start = i * len / out;
    let end = ((i + 1) * len).div_ceil(out);
    (start, end)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_transposes_agree() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2x3
        let at = [1.0, 4.0, 2.0, 5.0, 3.0, 6.0]; // stored 3x2
        let b = [1.0, 0.0, 0.0, 1.0, 1.0, 1.0]; // 3x2
        let mut c1 = [0.0; 4];
        let mut c2 = [0.0; 4];
        gemm(2, 3, 2, &a, false, &b, false, &mut c1, false);
        gemm(2, 3, 2, &at, true, &b, false, &mut c2, false);
        assert_eq!(c1, [4.0, 5.0, 10.0, 11.0]);
        assert_eq!(c1, c2);
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let g = Window2d {
            channels: 2,
            height: 5,
            width: 4,
            kernel: (3, 2),
            stride: (2, 1),
            padding: (1, 1),
        };
        let img: Vec<f64> = (0..40).map(|i| (i as f64 * 0.37).sin()).collect();
        let n = g.col_rows() * g.col_cols();
        let y: Vec<f64> = (0..n).map(|i| (i as f64 * 0.11).cos()).collect();
        let mut cols = vec![0.0; n];
        im2col(&img, &g, &mut cols, g.col_cols());
        let mut back = vec![0.0; 40];
        col2im(&y, &g, &mut back, g.col_cols());
        let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = img.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    fn naive_im2col(img: &[f64], g: &Window2d) -> Vec<f64> {
        let (ho, wo) = (g.out_height(), g.out_width());
        let mut cols = vec![0.0; g.col_rows() * ho * wo];
        for c in 0..g.channels {
            for ki in 0..g.kernel.0 {
                for kj in 0..g.kernel.1 {
                    let row = (c * g.kernel.0 + ki) * g.kernel.1 + kj;
                    for oy in 0..ho {
                        for ox in 0..wo {
                            let iy = (oy * g.stride.0 + ki) as isize - g.padding.0 as isize;
                            let ix = (ox * g.stride.1 + kj) as isize - g.padding.1 as isize;
                            if iy >= 0 && ix >= 0 && (iy as usize) < g.height && (ix as usize) < g.width {
                                cols[row * ho * wo + oy * wo + ox] = img[(c * g.height + iy as usize) * g.width + ix as usize];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    #[test]
    fn im2col_matches_naive_unfold() {
        for (h, w, k, s, p) in [(5, 7, 3, 1, 1), (9, 6, 4, 2, 1), (2, 2, 4, 2, 1), (1, 1, 3, 1, 1), (11, 8, 8, 4, 4), (4, 4, 1, 1, 0), (6, 5, 2, 3, 0)] {
            let g = Window2d {
                channels: 2,
                height: h,
                width: w,
                kernel: (k, k),
                stride: (s, s),
                padding: (p, p),
            };
            let img: Vec<f64> = (0..2 * h * w).map(|i| i as f64 + 1.0).collect();
            let l = g.col_cols();
            let mut cols = vec![f64::NAN; g.col_rows() * (l + 3)];
            im2col(&img, &g, &mut cols, l + 3);
            let want = naive_im2col(&img, &g);
            for r in 0..g.col_rows() {
                assert_eq!(&cols[r * (l + 3)..r * (l + 3) + l], &want[r * l..(r + 1) * l], "{h}x{w} k{k} s{s} p{p}");
            }
        }
    }

    #[test]
    fn batch_layout_round_trip() {
        let x: Vec<f64> = (0..24).map(f64::from).collect();
        let t = batch_to_channels(&x, 2, 3, 4);
        assert_eq!(&t[..8], &[0.0, 1.0, 2.0, 3.0, 12.0, 13.0, 14.0, 15.0]);
        let mut back = vec![0.0; 24];
        channels_to_batch_add(&t, 2, 3, 4, &mut back);
        assert_eq!(back, x);
    }

    #[test]
    fn adaptive_bins_cover_input() {
        assert_eq!(adaptive_bin(0, 1, 5), (0, 5));
        assert_eq!(adaptive_bin(1, 2, 5), (2, 5));
        assert_eq!(adaptive_bin(0, 2, 5), (0, 3));
    }
}
