//! Dense row-major `f64` tensors and the raw kernels the autograd layer is
//! built on. Nothing in here tracks gradients.

use std::fmt;

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn contiguous_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

/// Left-pads `shape` with ones up to `rank`.
fn padded(shape: &[usize], rank: usize) -> Vec<usize> {
    let mut out = vec![1; rank - shape.len()];
    out.extend_from_slice(shape);
    out
}

/// Numpy-style broadcast of two shapes, `None` if incompatible.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let (pa, pb) = (padded(a, rank), padded(b, rank));
    pa.iter()
        .zip(&pb)
        .map(|(&x, &y)| match (x, y) {
            _ if x == y => Some(x),
            (1, _) => Some(y),
            (_, 1) => Some(x),
            _ => None,
        })
        .collect()
}

/// Visits every multi-index of `shape` in row-major order and yields the
/// flat offset under `strides`.
fn for_each_offset(shape: &[usize], strides: &[usize], mut f: impl FnMut(usize, usize)) {
    for_each_run(shape, strides, |flat, base, len, step| {
        for j in 0..len {
            f(flat + j, base + j * step);
        }
    });
}

/// Like [`for_each_offset`] but yields whole innermost rows as
/// `(flat_start, offset_start, len, inner_stride)`.
fn for_each_run(shape: &[usize], strides: &[usize], mut f: impl FnMut(usize, usize, usize, usize)) {
    let n = numel(shape);
    if n == 0 {
        return;
    }
    let rank = shape.len();
    if rank == 0 {
        f(0, 0, 1, 0);
        return;
    }
    let inner = shape[rank - 1];
    let inner_stride = strides[rank - 1];
    let mut idx = vec![0usize; rank];
    let mut base = 0usize;
    let mut flat = 0usize;
    loop {
        f(flat, base, inner, inner_stride);
        flat += inner;
        if flat == n {
            return;
        }
        let mut d = rank - 1;
        loop {
            d -= 1;
            idx[d] += 1;
            base += strides[d];
            if idx[d] < shape[d] {
                break;
            }
            base -= strides[d] * shape[d];
            idx[d] = 0;
        }
    }
}

/// Geometry of a 2D sliding-window lowering (im2col / col2im).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeometry {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn input_shape(&self) -> Vec<usize> {
        vec![self.batch, self.channels, self.height, self.width]
    }

    /// Output columns `lo..hi` whose input column for kernel offset `kj`
    /// falls inside the image.
    fn valid_cols(&self, kj: usize) -> (usize, usize) {
        let wo = self.out_width();
        let lo = if self.pad > kj { (self.pad - kj).div_ceil(self.stride) } else { 0 };
        let hi = ((self.width + self.pad).saturating_sub(kj)).div_ceil(self.stride).min(wo);
        (lo.min(hi), hi)
    }

    /// `[C*k*k, B*Ho*Wo]`
    pub fn cols_shape(&self) -> Vec<usize> {
        vec![
            self.channels * self.kernel * self.kernel,
            self.batch * self.out_height() * self.out_width(),
        ]
    }
}

/// `c = op(a)·op(b) + beta·c` for row-major `op(a) [m,k]`, `op(b) [k,n]`,
/// `c [m,n]`.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], trans_a: bool, b: &[f64], trans_b: bool, beta: f64, c: &mut [f64]) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n, "gemm operand too small");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c[..m * n].iter_mut().for_each(|v| *v *= beta);
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the strides describe in-bounds views of `a`, `b` and `c` for
    // the dimensions asserted above.
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

thread_local! {
    static SCRATCH: std::cell::RefCell<Vec<f64>> = const { std::cell::RefCell::new(Vec::new()) };
}

/// Runs `f` with a reused per-thread column buffer of at least `len` entries
/// (empty for pointwise convolutions, which read the input directly). The
/// contents are stale; callers overwrite before reading.
fn with_scratch<R>(g: &ConvGeometry, len: usize, f: impl FnOnce(&mut [f64]) -> R) -> R {
    if g.is_pointwise() {
        return f(&mut []);
    }
    SCRATCH.with(|cell| {
        let mut buf = cell.take();
        if buf.len() < len {
            buf.resize(len, 0.0);
        }
        let r = f(&mut buf[..len]);
        cell.replace(buf);
        r
    })
}

impl ConvGeometry {
    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }

    /// Unfolds one image `[C,H,W]` into `dst [C*k*k, Ho*Wo]`, overwriting
    /// every entry.
    fn unfold(&self, src: &[f64], dst: &mut [f64]) {
        let (ho, wo, k) = (self.out_height(), self.out_width(), self.kernel);
        let plane = self.height * self.width;
        for c in 0..self.channels {
            let src = &src[c * plane..][..plane];
            for ki in 0..k {
                for kj in 0..k {
                    let row = (c * k + ki) * k + kj;
                    let (lo, hi) = self.valid_cols(kj);
                    for oy in 0..ho {
                        let drow = &mut dst[(row * ho + oy) * wo..][..wo];
                        let iy = (oy * self.stride + ki) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.height as isize {
                            drow.fill(0.0);
                            continue;
                        }
                        let srow = &src[iy as usize * self.width..][..self.width];
                        drow[..lo].fill(0.0);
                        drow[hi..].fill(0.0);
                        if self.stride == 1 {
                            let ix0 = lo + kj - self.pad;
                            drow[lo..hi].copy_from_slice(&srow[ix0..ix0 + hi - lo]);
                        } else {
                            for ox in lo..hi {
                                drow[ox] = srow[ox * self.stride + kj - self.pad];
                            }
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`ConvGeometry::unfold`]: accumulates `cols` into `dst [C,H,W]`.
    fn fold_add(&self, cols: &[f64], dst: &mut [f64]) {
        let (ho, wo, k) = (self.out_height(), self.out_width(), self.kernel);
        let plane = self.height * self.width;
        for c in 0..self.channels {
            let dst = &mut dst[c * plane..][..plane];
            for ki in 0..k {
                for kj in 0..k {
                    let row = (c * k + ki) * k + kj;
                    let (lo, hi) = self.valid_cols(kj);
                    for oy in 0..ho {
                        let iy = (oy * self.stride + ki) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.height as isize {
                            continue;
                        }
                        let srow = &cols[(row * ho + oy) * wo..][..wo];
                        let drow = &mut dst[iy as usize * self.width..][..self.width];
                        if self.stride == 1 {
                            let ix0 = lo + kj - self.pad;
                            for (d, &v) in drow[ix0..ix0 + hi - lo].iter_mut().zip(&srow[lo..hi]) {
                                *d += v;
                            }
                        } else {
                            for ox in lo..hi {
                                drow[ox * self.stride + kj - self.pad] += srow[ox];
                            }
                        }
                    }
                }
            }
        }
    }

    fn check_weight(&self, w: &Tensor) -> usize {
        let ck = self.channels * self.kernel * self.kernel;
        assert!(w.shape.len() == 2 && w.shape[1] == ck, "conv weight {:?} does not match {ck} columns", w.shape);
        w.shape[0]
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        assert_eq!(
            numel(&shape),
            data.len(),
            "tensor data length does not match shape {shape:?}"
        );
        Self { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Self { shape: shape.to_vec(), data: vec![value; numel(shape)] }
    }

    pub fn scalar(value: f64) -> Self {
        Self { shape: vec![], data: vec![value] }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let data = (0..numel(shape)).map(&mut f).collect();
        Self { shape: shape.to_vec(), data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Self {
        assert_eq!(self.shape, other.shape, "zip_map shape mismatch");
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Self { shape: self.shape.clone(), data }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn reshape(&self, shape: &[usize]) -> Self {
        assert_eq!(numel(shape), self.len(), "reshape {:?} -> {:?}", self.shape, shape);
        Self { shape: shape.to_vec(), data: self.data.clone() }
    }

    pub fn broadcast_to(&self, shape: &[usize]) -> Self {
        if self.shape == shape {
            return self.clone();
        }
        let rank = shape.len();
        assert!(self.shape.len() <= rank, "cannot broadcast {:?} to {:?}", self.shape, shape);
        let src = padded(&self.shape, rank);
        let base = contiguous_strides(&src);
        let strides: Vec<usize> = src
            .iter()
            .zip(shape)
            .zip(&base)
            .map(|((&s, &t), &st)| {
                assert!(s == t || s == 1, "cannot broadcast {:?} to {:?}", self.shape, shape);
                if s == 1 { 0 } else { st }
            })
            .collect();
        let mut data = vec![0.0; numel(shape)];
        for_each_run(shape, &strides, |flat, off, len, step| {
            let dst = &mut data[flat..flat + len];
            match step {
                0 => dst.fill(self.data[off]),
                1 => dst.copy_from_slice(&self.data[off..off + len]),
                _ => dst.iter_mut().enumerate().for_each(|(j, d)| *d = self.data[off + j * step]),
            }
        });
        Self { shape: shape.to_vec(), data }
    }

    /// Sums over broadcast dimensions so the result has `shape`; the adjoint
    /// of [`Tensor::broadcast_to`].
    pub fn sum_to(&self, shape: &[usize]) -> Self {
        if self.shape == shape {
            return self.clone();
        }
        let rank = self.shape.len();
        assert!(shape.len() <= rank, "cannot reduce {:?} to {:?}", self.shape, shape);
        let dst = padded(shape, rank);
        let base = contiguous_strides(&dst);
        let strides: Vec<usize> = dst
            .iter()
            .zip(&self.shape)
            .zip(&base)
            .map(|((&d, &s), &st)| {
                assert!(d == s || d == 1, "cannot reduce {:?} to {:?}", self.shape, shape);
                if d == 1 { 0 } else { st }
            })
            .collect();
        let mut data = vec![0.0; numel(shape)];
        for_each_run(&self.shape, &strides, |flat, off, len, step| {
            let src = &self.data[flat..flat + len];
            match step {
                0 => data[off] += src.iter().sum::<f64>(),
                1 => data[off..off + len].iter_mut().zip(src).for_each(|(d, &v)| *d += v),
                _ => src.iter().enumerate().for_each(|(j, &v)| data[off + j * step] += v),
            }
        });
        Self { shape: shape.to_vec(), data }
    }

    pub fn permute(&self, axes: &[usize]) -> Self {
        assert_eq!(axes.len(), self.shape.len());
        let src_strides = contiguous_strides(&self.shape);
        let shape: Vec<usize> = axes.iter().map(|&a| self.shape[a]).collect();
        let strides: Vec<usize> = axes.iter().map(|&a| src_strides[a]).collect();
        let mut data = vec![0.0; self.len()];
        for_each_offset(&shape, &strides, |flat, off| data[flat] = self.data[off]);
        Self { shape, data }
    }

    /// `op(a) · op(b)` for 2D operands, where `op` optionally transposes.
    pub fn matmul(a: &Self, b: &Self, trans_a: bool, trans_b: bool) -> Self {
        assert_eq!(a.shape.len(), 2, "matmul lhs must be 2D, got {:?}", a.shape);
        assert_eq!(b.shape.len(), 2, "matmul rhs must be 2D, got {:?}", b.shape);
        let (ar, ac) = (a.shape[0], a.shape[1]);
        let (br, bc) = (b.shape[0], b.shape[1]);
        let (m, k) = if trans_a { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if trans_b { (bc, br) } else { (br, bc) };
        assert_eq!(k, k2, "matmul inner dimension mismatch {:?} x {:?}", a.shape, b.shape);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, &a.data, trans_a, &b.data, trans_b, 0.0, &mut out);
        Self::new(vec![m, n], out)
    }

    /// 2D cross-correlation of `x [B,C,H,W]` with `w [O, C*k*k]`, giving
    /// `[B,O,Ho,Wo]`.
    pub fn conv2d(x: &Self, w: &Self, g: &ConvGeometry) -> Self {
        assert_eq!(x.shape, g.input_shape(), "conv2d input shape");
        let o = g.check_weight(w);
        let ck = w.shape[1];
        let hw = g.out_height() * g.out_width();
        let plane = g.channels * g.height * g.width;
        let mut out = vec![0.0; g.batch * o * hw];
        with_scratch(g, ck * hw, |cols| {
            for (xb, ob) in x.data.chunks_exact(plane).zip(out.chunks_exact_mut(o * hw)) {
                let cb: &[f64] = if g.is_pointwise() {
                    xb
                } else {
                    g.unfold(xb, cols);
                    cols
                };
                gemm(o, ck, hw, &w.data, false, cb, false, 0.0, ob);
            }
        });
        Self::new(vec![g.batch, o, g.out_height(), g.out_width()], out)
    }

    /// Vector-Jacobian product of [`Tensor::conv2d`] with respect to its
    /// input: `gy [B,O,Ho,Wo]` to `[B,C,H,W]`.
    pub fn conv2d_input_grad(gy: &Self, w: &Self, g: &ConvGeometry) -> Self {
        let o = g.check_weight(w);
        let ck = w.shape[1];
        let hw = g.out_height() * g.out_width();
        assert_eq!(gy.shape, [g.batch, o, g.out_height(), g.out_width()], "conv2d_input_grad shape");
        let plane = g.channels * g.height * g.width;
        let mut out = vec![0.0; g.batch * plane];
        with_scratch(g, ck * hw, |cols| {
            for (gb, ob) in gy.data.chunks_exact(o * hw).zip(out.chunks_exact_mut(plane)) {
                if g.is_pointwise() {
                    gemm(ck, o, hw, &w.data, true, gb, false, 0.0, ob);
                } else {
                    gemm(ck, o, hw, &w.data, true, gb, false, 0.0, cols);
                    g.fold_add(cols, ob);
                }
            }
        });
        Self::new(g.input_shape(), out)
    }

    /// Vector-Jacobian product of [`Tensor::conv2d`] with respect to its
    /// weight: `[O, C*k*k]`.
    pub fn conv2d_weight_grad(gy: &Self, x: &Self, g: &ConvGeometry) -> Self {
        assert_eq!(x.shape, g.input_shape(), "conv2d_weight_grad input shape");
        let [b_, o, ho, wo] = gy.dims4();
        assert_eq!((b_, ho, wo), (g.batch, g.out_height(), g.out_width()), "conv2d_weight_grad shape");
        let ck = g.channels * g.kernel * g.kernel;
        let hw = ho * wo;
        let plane = g.channels * g.height * g.width;
        let mut out = vec![0.0; o * ck];
        with_scratch(g, ck * hw, |cols| {
            for (gb, xb) in gy.data.chunks_exact(o * hw).zip(x.data.chunks_exact(plane)) {
                let cb: &[f64] = if g.is_pointwise() {
                    xb
                } else {
                    g.unfold(xb, cols);
                    cols
                };
                gemm(o, hw, ck, gb, false, cb, true, 1.0, &mut out);
            }
        });
        Self::new(vec![o, ck], out)
    }

    /// Adds a per-channel bias `[C]` to `[B,C,H,W]`.
    pub fn add_channel_bias(&self, bias: &Self) -> Self {
        let [_, c, h, w] = self.dims4();
        assert_eq!(bias.shape, [c], "channel bias shape");
        let plane = h * w;
        let mut out = self.clone();
        for (i, chunk) in out.data.chunks_mut(plane).enumerate() {
            let v = bias.data[i % c];
            chunk.iter_mut().for_each(|x| *x += v);
        }
        out
    }

    pub fn im2col(&self, g: &ConvGeometry) -> Self {
        assert_eq!(self.shape, g.input_shape(), "im2col input shape");
        let (ho, wo) = (g.out_height(), g.out_width());
        let k = g.kernel;
        let ncols = g.batch * ho * wo;
        let mut out = vec![0.0; g.channels * k * k * ncols];
        let plane = g.height * g.width;
        for c in 0..g.channels {
            for ki in 0..k {
                for kj in 0..k {
                    let row = (c * k + ki) * k + kj;
                    let dst = &mut out[row * ncols..(row + 1) * ncols];
                    for b in 0..g.batch {
                        let src = &self.data[(b * g.channels + c) * plane..][..plane];
                        for oy in 0..ho {
                            let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                            if iy < 0 || iy >= g.height as isize {
                                continue;
                            }
                            let srow = &src[iy as usize * g.width..][..g.width];
                            let drow = &mut dst[(b * ho + oy) * wo..][..wo];
                            let (lo, hi) = g.valid_cols(kj);
                            if g.stride == 1 {
                                let ix0 = lo + kj - g.pad;
                                drow[lo..hi].copy_from_slice(&srow[ix0..ix0 + hi - lo]);
                            } else {
                                for ox in lo..hi {
                                    drow[ox] = srow[ox * g.stride + kj - g.pad];
                                }
                            }
                        }
                    }
                }
            }
        }
        Self::new(g.cols_shape(), out)
    }

    /// Scatter-add adjoint of [`Tensor::im2col`].
    pub fn col2im(&self, g: &ConvGeometry) -> Self {
        assert_eq!(self.shape, g.cols_shape(), "col2im input shape");
        let (ho, wo) = (g.out_height(), g.out_width());
        let k = g.kernel;
        let ncols = g.batch * ho * wo;
        let plane = g.height * g.width;
        let mut out = vec![0.0; g.batch * g.channels * plane];
        for c in 0..g.channels {
            for ki in 0..k {
                for kj in 0..k {
                    let row = (c * k + ki) * k + kj;
                    let src = &self.data[row * ncols..(row + 1) * ncols];
                    for b in 0..g.batch {
                        let dst = &mut out[(b * g.channels + c) * plane..][..plane];
                        for oy in 0..ho {
                            let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                            if iy < 0 || iy >= g.height as isize {
                                continue;
                            }
                            let drow = &mut dst[iy as usize * g.width..][..g.width];
                            let srow = &src[(b * ho + oy) * wo..][..wo];
                            let (lo, hi) = g.valid_cols(kj);
                            if g.stride == 1 {
                                let ix0 = lo + kj - g.pad;
                                for (d, &s) in drow[ix0..ix0 + hi - lo].iter_mut().zip(&srow[lo..hi]) {
                                    *d += s;
                                }
                            } else {
                                for ox in lo..hi {
                                    drow[ox * g.stride + kj - g.pad] += srow[ox];
                                }
                            }
                        }
                    }
                }
            }
        }
        Self::new(g.input_shape(), out)
    }

    /// Sum over non-overlapping `f×f` windows of a `[B,C,H,W]` tensor.
    pub fn sum_pool(&self, f: usize) -> Self {
        let [b, c, h, w] = self.dims4();
        assert!(h % f == 0 && w % f == 0, "sum_pool: {h}x{w} not divisible by {f}");
        let (ho, wo) = (h / f, w / f);
        let mut out = vec![0.0; b * c * ho * wo];
        for p in 0..b * c {
            let src = &self.data[p * h * w..][..h * w];
            let dst = &mut out[p * ho * wo..][..ho * wo];
            for y in 0..h {
                let drow = &mut dst[(y / f) * wo..][..wo];
                for (x, &v) in src[y * w..][..w].iter().enumerate() {
                    drow[x / f] += v;
                }
            }
        }
        Self::new(vec![b, c, ho, wo], out)
    }

    /// Nearest-neighbour upsampling by `f`; adjoint of [`Tensor::sum_pool`].
    pub fn upsample(&self, f: usize) -> Self {
        let [b, c, h, w] = self.dims4();
        let (ho, wo) = (h * f, w * f);
        let mut out = vec![0.0; b * c * ho * wo];
        for p in 0..b * c {
            let src = &self.data[p * h * w..][..h * w];
            let dst = &mut out[p * ho * wo..][..ho * wo];
            for y in 0..ho {
                let srow = &src[(y / f) * w..][..w];
                for (x, d) in dst[y * wo..][..wo].iter_mut().enumerate() {
                    *d = srow[x / f];
                }
            }
        }
        Self::new(vec![b, c, ho, wo], out)
    }

    pub(crate) fn dims4(&self) -> [usize; 4] {
        assert_eq!(self.shape.len(), 4, "expected a 4D tensor, got {:?}", self.shape);
        [self.shape[0], self.shape[1], self.shape[2], self.shape[3]]
    }

    fn outer_inner(&self, axis: usize) -> (usize, usize) {
        let outer = numel(&self.shape[..axis]);
        let inner = numel(&self.shape[axis + 1..]);
        (outer, inner)
    }

    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Self {
        let dim = self.shape[axis];
        assert!(start + len <= dim, "narrow {start}+{len} out of range {dim}");
        let (outer, inner) = self.outer_inner(axis);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * dim + start) * inner;
            data.extend_from_slice(&self.data[base..base + len * inner]);
        }
        let mut shape = self.shape.clone();
        shape[axis] = len;
        Self::new(shape, data)
    }

    /// Zero-pads along `axis` so this tensor occupies `[start, start+len)` of
    /// a dimension of size `full`; adjoint of [`Tensor::narrow`].
    pub fn pad_axis(&self, axis: usize, start: usize, full: usize) -> Self {
        let len = self.shape[axis];
        assert!(start + len <= full);
        let (outer, inner) = self.outer_inner(axis);
        let mut shape = self.shape.clone();
        shape[axis] = full;
        let mut data = vec![0.0; numel(&shape)];
        for o in 0..outer {
            let dst = (o * full + start) * inner;
            let src = o * len * inner;
            data[dst..dst + len * inner].copy_from_slice(&self.data[src..src + len * inner]);
        }
        Self::new(shape, data)
    }

    pub fn concat(parts: &[&Self], axis: usize) -> Self {
        assert!(!parts.is_empty());
        let first = parts[0];
        let mut shape = first.shape.clone();
        shape[axis] = parts.iter().map(|p| p.shape[axis]).sum();
        for p in parts {
            assert_eq!(p.shape.len(), shape.len());
            for (d, (&a, &b)) in p.shape.iter().zip(&first.shape).enumerate() {
                assert!(d == axis || a == b, "concat shape mismatch {:?} vs {:?}", p.shape, first.shape);
            }
        }
        let (outer, _) = first.outer_inner(axis);
        let mut data = Vec::with_capacity(numel(&shape));
        for o in 0..outer {
            for p in parts {
                let chunk = p.shape[axis] * numel(&p.shape[axis + 1..]);
                data.extend_from_slice(&p.data[o * chunk..(o + 1) * chunk]);
            }
        }
        Self::new(shape, data)
    }
}
