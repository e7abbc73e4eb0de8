//! Layers with hand-written backward passes.
//!
//! Every layer offers `infer` (no caching, `&self`), `forward` (training
//! mode, caches what `backward` needs) and `backward`, which consumes the
//! upstream gradient, accumulates parameter gradients and returns the
//! gradient with respect to the layer input.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::tensor::{gemm, with_buffer, Scalar, Tensor};

/// Upper bound on im2col buffer elements; larger batches are processed in
/// sample chunks.
const COL_BUDGET: usize = 1 << 24;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Learnable,
    /// Running statistics: saved in checkpoints, never optimized.
    Buffer,
}

#[derive(Debug, Clone)]
pub struct Param<T> {
    pub value: Vec<T>,
    pub grad: Vec<T>,
    pub shape: Vec<usize>,
    pub kind: ParamKind,
}

impl<T: Scalar> Param<T> {
    pub fn new(shape: Vec<usize>, value: Vec<T>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        let grad = vec![T::zero(); value.len()];
        Self {
            value,
            grad,
            shape,
            kind: ParamKind::Learnable,
        }
    }

    pub fn buffer(shape: Vec<usize>, value: Vec<T>) -> Self {
        Self {
            value,
            grad: Vec::new(),
            shape,
            kind: ParamKind::Buffer,
        }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self::new(shape, vec![T::zero(); n])
    }

    /// Kaiming-style normal init with standard deviation `sqrt(2 / fan_in)`.
    pub fn kaiming(shape: Vec<usize>, fan_in: usize, rng: &mut impl Rng) -> Self {
        let std = (2.0 / fan_in as f64).sqrt();
        let n = shape.iter().product();
        let value = (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                T::from_f(z * std)
            })
            .collect();
        Self::new(shape, value)
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = T::zero());
    }
}

/// Anything owning parameters.
pub trait Layer<T: Scalar> {
    fn params(&self) -> Vec<(&'static str, &Param<T>)>;
    fn params_mut(&mut self) -> Vec<(&'static str, &mut Param<T>)>;
}

// ---------------------------------------------------------------------------
// convolution

#[derive(Debug, Clone)]
pub struct Conv2d<T> {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    /// `[out, in, k, k]`
    pub weight: Param<T>,
    pub bias: Param<T>,
    /// Forces a particular algorithm; chosen per layer shape when `None`.
    pub algo: Option<ConvAlgo>,
    input: Option<Tensor<T>>,
}

/// Convolution strategies. All compute the same function; they differ in
/// speed depending on the layer shape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConvAlgo {
    /// Unfold patches into a matrix and multiply once.
    Im2col,
    /// Stride 1 only: one product per kernel tap over a zero-padded copy of
    /// the input, reading shifted windows in place.
    Shift,
    /// Stride 1 only: row-wise multiply-accumulate, for very few outputs.
    Direct,
}

impl<T: Scalar> Conv2d<T> {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = in_channels * kernel * kernel;
        Self {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            weight: Param::kaiming(vec![out_channels, in_channels, kernel, kernel], fan_in, rng),
            bias: Param::zeros(vec![out_channels]),
            algo: None,
            input: None,
        }
    }

    pub fn algorithm(&self) -> ConvAlgo {
        match self.algo {
            Some(a) if self.stride == 1 || a == ConvAlgo::Im2col => a,
            _ if self.stride != 1 => ConvAlgo::Im2col,
            _ if self.out_channels <= 4 => ConvAlgo::Direct,
            _ if self.in_channels >= 8 => ConvAlgo::Shift,
            _ => ConvAlgo::Im2col,
        }
    }

    /// Stride-1 convolution preserving spatial size (odd kernels).
    pub fn same(in_channels: usize, out_channels: usize, kernel: usize, rng: &mut impl Rng) -> Self {
        Self::new(in_channels, out_channels, kernel, 1, kernel / 2, rng)
    }

    pub fn output_hw(&self, h: usize, w: usize) -> (usize, usize) {
        let o = |x: usize| (x + 2 * self.padding - self.kernel) / self.stride + 1;
        (o(h), o(w))
    }

    fn chunk_samples(&self, ho: usize, wo: usize) -> usize {
        let per_sample = self.in_channels * self.kernel * self.kernel * ho * wo;
        (COL_BUDGET / per_sample.max(1)).max(1)
    }

    pub fn infer(&self, x: &Tensor<T>) -> Tensor<T> {
        assert_eq!(x.channels(), self.in_channels, "conv input channels");
        match self.algorithm() {
            ConvAlgo::Im2col => self.infer_im2col(x),
            ConvAlgo::Shift => self.infer_shift(x),
            ConvAlgo::Direct => self.infer_direct(x),
        }
    }

    pub fn forward(&mut self, x: &Tensor<T>) -> Tensor<T> {
        let y = self.infer(x);
        self.input = Some(x.clone());
        y
    }

    pub fn backward(&mut self, dy: &Tensor<T>) -> Tensor<T> {
        let x = self.input.take().expect("conv backward without forward");
        assert_eq!(dy.channels(), self.out_channels);
        for (g, o) in self.bias.grad.iter_mut().zip(0..) {
            let mut acc = T::zero();
            for i in 0..dy.batch() {
                acc += dy.sample(i)[o * dy.plane_len()..(o + 1) * dy.plane_len()].iter().copied().sum::<T>();
            }
            *g += acc;
        }
        match self.algorithm() {
            ConvAlgo::Im2col => self.backward_im2col(&x, dy),
            ConvAlgo::Shift => self.backward_shift(&x, dy),
            ConvAlgo::Direct => self.backward_direct(&x, dy),
        }
    }

    fn infer_im2col(&self, x: &Tensor<T>) -> Tensor<T> {
        let [n, c, h, w] = x.shape();
        let (ho, wo) = self.output_hw(h, w);
        let hw = ho * wo;
        let ckk = c * self.kernel * self.kernel;
        let oc = self.out_channels;
        let mut out = Tensor::zeros([n, oc, ho, wo]);
        let chunk = self.chunk_samples(ho, wo).min(n);
        with_buffer::<T, _>(0, ckk * chunk * hw, |col_buf| {
            with_buffer::<T, _>(1, oc * chunk * hw, |mat_buf| {
                let mut start = 0;
                while start < n {
                    let end = (start + chunk).min(n);
                    let cols = (end - start) * hw;
                    let col = &mut col_buf[..ckk * cols];
                    let mat = &mut mat_buf[..oc * cols];
                    im2col(x, start..end, self.kernel, self.stride, self.padding, ho, wo, col);
                    gemm(false, false, oc, cols, ckk, &self.weight.value, col, T::zero(), mat);
                    for (s, i) in (start..end).enumerate() {
                        let dst = out.sample_mut(i);
                        for o in 0..oc {
                            let b = self.bias.value[o];
                            let src = &mat[o * cols + s * hw..o * cols + (s + 1) * hw];
                            for (d, &v) in dst[o * hw..(o + 1) * hw].iter_mut().zip(src) {
                                *d = v + b;
                            }
                        }
                    }
                    start = end;
                }
            })
        });
        out
    }

    fn backward_im2col(&mut self, x: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
        let [n, c, h, w] = x.shape();
        let [_, oc, ho, wo] = dy.shape();
        let hw = ho * wo;
        let ckk = c * self.kernel * self.kernel;
        let mut dx = Tensor::zeros([n, c, h, w]);
        let chunk = self.chunk_samples(ho, wo).min(n);
        let (k, stride, pad) = (self.kernel, self.stride, self.padding);
        let weight = &mut self.weight;
        with_buffer::<T, _>(0, ckk * chunk * hw, |col_buf| {
            with_buffer::<T, _>(1, oc * chunk * hw, |dmat_buf| {
                with_buffer::<T, _>(2, ckk * chunk * hw, |dcol_buf| {
                    let mut start = 0;
                    while start < n {
                        let end = (start + chunk).min(n);
                        let cols = (end - start) * hw;
                        let col = &mut col_buf[..ckk * cols];
                        let dmat = &mut dmat_buf[..oc * cols];
                        let dcol = &mut dcol_buf[..ckk * cols];
                        im2col(x, start..end, k, stride, pad, ho, wo, col);
                        for (s, i) in (start..end).enumerate() {
                            let src = dy.sample(i);
                            for o in 0..oc {
                                dmat[o * cols + s * hw..o * cols + (s + 1) * hw]
                                    .copy_from_slice(&src[o * hw..(o + 1) * hw]);
                            }
                        }
                        // dW += dY · colᵀ
                        gemm(false, true, oc, ckk, cols, dmat, col, T::one(), &mut weight.grad);
                        // dcol = Wᵀ · dY
                        gemm(true, false, ckk, cols, oc, &weight.value, dmat, T::zero(), dcol);
                        col2im(dcol, &mut dx, start..end, k, stride, pad, ho, wo);
                        start = end;
                    }
                })
            })
        });
        dx
    }
    /// Geometry of the padded layout used by [`ConvAlgo::Shift`]: padded
    /// width, per-sample stride, and number of computed columns.
    fn shift_geometry(&self, n: usize, h: usize, w: usize) -> (usize, usize, usize) {
        let (k, p) = (self.kernel, self.padding);
        let (hp, wp) = (h + 2 * p, w + 2 * p);
        let (ho, _) = self.output_hw(h, w);
        // Slack of k elements keeps the last tap's window in bounds.
        let stride = hp * wp + k;
        (wp, stride, (n - 1) * stride + ho * wp)
    }

    /// Copy `x` into `buf[c][sample][padded plane]`, zeroing the border.
    fn pad_into(&self, x: &Tensor<T>, buf: &mut [T], wp: usize, stride: usize) {
        let [n, c, h, w] = x.shape();
        let p = self.padding;
        buf.fill(T::zero());
        for s in 0..n {
            let sample = x.sample(s);
            for ci in 0..c {
                let base = (ci * n + s) * stride;
                for iy in 0..h {
                    let dst = base + (iy + p) * wp + p;
                    buf[dst..dst + w].copy_from_slice(&sample[(ci * h + iy) * w..(ci * h + iy + 1) * w]);
                }
            }
        }
    }

    fn infer_shift(&self, x: &Tensor<T>) -> Tensor<T> {
        let [n, c, h, w] = x.shape();
        let (k, oc) = (self.kernel, self.out_channels);
        let (ho, wo) = self.output_hw(h, w);
        let (wp, stride, ncols) = self.shift_geometry(n, h, w);
        let len = n * stride;
        let (kk, ckk) = (k * k, c * k * k);
        let mut out = Tensor::zeros([n, oc, ho, wo]);
        with_buffer::<T, _>(0, c * len, |xpad| {
            self.pad_into(x, xpad, wp, stride);
            with_buffer::<T, _>(1, oc * len, |ypad| {
                for ky in 0..k {
                    for kx in 0..k {
                        let tap = ky * k + kx;
                        let off = ky * wp + kx;
                        let beta = if tap == 0 { T::zero() } else { T::one() };
                        T::gemm_raw(
                            oc, c, ncols, T::one(),
                            &self.weight.value[tap..], ckk as isize, kk as isize,
                            &xpad[off..], len as isize, 1,
                            beta, ypad, len as isize, 1,
                        );
                    }
                }
                for s in 0..n {
                    let dst = out.sample_mut(s);
                    for o in 0..oc {
                        let b = self.bias.value[o];
                        for oy in 0..ho {
                            let src = o * len + s * stride + oy * wp;
                            for (d, &v) in dst[(o * ho + oy) * wo..(o * ho + oy + 1) * wo]
                                .iter_mut()
                                .zip(&ypad[src..src + wo])
                            {
                                *d = v + b;
                            }
                        }
                    }
                }
            })
        });
        out
    }

    fn backward_shift(&mut self, x: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
        let [n, c, h, w] = x.shape();
        let (k, oc, p) = (self.kernel, self.out_channels, self.padding);
        let (ho, wo) = self.output_hw(h, w);
        let (wp, stride, ncols) = self.shift_geometry(n, h, w);
        let len = n * stride;
        let (kk, ckk) = (k * k, c * k * k);
        let mut dx = Tensor::zeros([n, c, h, w]);
        with_buffer::<T, _>(0, c * len, |xpad| {
            self.pad_into(x, xpad, wp, stride);
            with_buffer::<T, _>(1, oc * len, |dypad| {
                // Columns outside the valid output grid must contribute nothing.
                dypad.fill(T::zero());
                for s in 0..n {
                    let src = dy.sample(s);
                    for o in 0..oc {
                        for oy in 0..ho {
                            let dst = o * len + s * stride + oy * wp;
                            dypad[dst..dst + wo].copy_from_slice(&src[(o * ho + oy) * wo..(o * ho + oy + 1) * wo]);
                        }
                    }
                }
                with_buffer::<T, _>(2, c * len, |dxpad| {
                    dxpad.fill(T::zero());
                    for ky in 0..k {
                        for kx in 0..k {
                            let tap = ky * k + kx;
                            let off = ky * wp + kx;
                            // dW[:, :, tap] += dY · X_tapᵀ
                            T::gemm_raw(
                                oc, ncols, c, T::one(),
                                dypad, len as isize, 1,
                                &xpad[off..], 1, len as isize,
                                T::one(), &mut self.weight.grad[tap..], ckk as isize, kk as isize,
                            );
                            // dX_tap += W[:, :, tap]ᵀ · dY
                            T::gemm_raw(
                                c, oc, ncols, T::one(),
                                &self.weight.value[tap..], kk as isize, ckk as isize,
                                dypad, len as isize, 1,
                                T::one(), &mut dxpad[off..], len as isize, 1,
                            );
                        }
                    }
                    for s in 0..n {
                        let dst = dx.sample_mut(s);
                        for ci in 0..c {
                            for iy in 0..h {
                                let src = (ci * n + s) * stride + (iy + p) * wp + p;
                                dst[(ci * h + iy) * w..(ci * h + iy + 1) * w].copy_from_slice(&dxpad[src..src + w]);
                            }
                        }
                    }
                })
            })
        });
        dx
    }

    /// Valid output columns `[lo, hi)` for kernel column `kx` (stride 1),
    /// and the matching input column of `lo`.
    fn direct_span(&self, kx: usize, w: usize, wo: usize) -> Option<(usize, usize, usize)> {
        let p = self.padding;
        let lo = p.saturating_sub(kx).min(wo);
        let hi = (w + p).saturating_sub(kx).min(wo).max(lo);
        (lo < hi).then(|| (lo, hi, lo + kx - p))
    }

    fn infer_direct(&self, x: &Tensor<T>) -> Tensor<T> {
        let [n, c, h, w] = x.shape();
        let (k, oc, p) = (self.kernel, self.out_channels, self.padding);
        let (ho, wo) = self.output_hw(h, w);
        let mut out = Tensor::zeros([n, oc, ho, wo]);
        for s in 0..n {
            let xs = x.sample(s);
            let ys = out.sample_mut(s);
            for o in 0..oc {
                let plane = &mut ys[o * ho * wo..(o + 1) * ho * wo];
                plane.fill(self.bias.value[o]);
                for ci in 0..c {
                    let xp = &xs[ci * h * w..(ci + 1) * h * w];
                    for ky in 0..k {
                        for kx in 0..k {
                            let wv = self.weight.value[((o * c + ci) * k + ky) * k + kx];
                            let Some((lo, hi, i0)) = self.direct_span(kx, w, wo) else { continue };
                            for oy in 0..ho {
                                let iy = (oy + ky) as isize - p as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                let src = &xp[iy as usize * w + i0..iy as usize * w + i0 + (hi - lo)];
                                for (d, &v) in plane[oy * wo + lo..oy * wo + hi].iter_mut().zip(src) {
                                    *d += wv * v;
                                }
                            }
                        }
                    }
                }
            }
        }
        out
    }

    fn backward_direct(&mut self, x: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
        let [n, c, h, w] = x.shape();
        let (k, oc, p) = (self.kernel, self.out_channels, self.padding);
        let (ho, wo) = self.output_hw(h, w);
        let mut dx = Tensor::zeros([n, c, h, w]);
        for s in 0..n {
            let xs = x.sample(s);
            let gs = dy.sample(s);
            let dxs = dx.sample_mut(s);
            for o in 0..oc {
                let gplane = &gs[o * ho * wo..(o + 1) * ho * wo];
                for ci in 0..c {
                    let xp = &xs[ci * h * w..(ci + 1) * h * w];
                    let dxp = &mut dxs[ci * h * w..(ci + 1) * h * w];
                    for ky in 0..k {
                        for kx in 0..k {
                            let idx = ((o * c + ci) * k + ky) * k + kx;
                            let wv = self.weight.value[idx];
                            let Some((lo, hi, i0)) = self.direct_span(kx, w, wo) else { continue };
                            let mut acc = T::zero();
                            for oy in 0..ho {
                                let iy = (oy + ky) as isize - p as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                let g = &gplane[oy * wo + lo..oy * wo + hi];
                                let row = iy as usize * w + i0;
                                for ((d, &xv), &gv) in dxp[row..row + (hi - lo)]
                                    .iter_mut()
                                    .zip(&xp[row..row + (hi - lo)])
                                    .zip(g)
                                {
                                    *d += wv * gv;
                                    acc += xv * gv;
                                }
                            }
                            self.weight.grad[idx] += acc;
                        }
                    }
                }
            }
        }
        dx
    }
}

impl<T: Scalar> Layer<T> for Conv2d<T> {
    fn params(&self) -> Vec<(&'static str, &Param<T>)> {
        vec![("weight", &self.weight), ("bias", &self.bias)]
    }
    fn params_mut(&mut self) -> Vec<(&'static str, &mut Param<T>)> {
        vec![("weight", &mut self.weight), ("bias", &mut self.bias)]
    }
}

/// Unfold samples `range` of `x` into `col[(c, ky, kx), (sample, oy, ox)]`.
/// Every element of `col` is written, padding included.
#[allow(clippy::too_many_arguments)]
fn im2col<T: Scalar>(
    x: &Tensor<T>,
    range: std::ops::Range<usize>,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    col: &mut [T],
) {
    let [_, c, h, w] = x.shape();
    let hw = ho * wo;
    let cols = range.len() * hw;
    debug_assert_eq!(col.len(), c * k * k * cols);
    for (s, i) in range.enumerate() {
        let sample = x.sample(i);
        for ci in 0..c {
            let plane = &sample[ci * h * w..(ci + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let dst = &mut col[row * cols + s * hw..row * cols + (s + 1) * hw];
                    for oy in 0..ho {
                        let dst_row = &mut dst[oy * wo..(oy + 1) * wo];
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            dst_row.fill(T::zero());
                            continue;
                        }
                        let src_row = &plane[iy as usize * w..(iy as usize + 1) * w];
                        if stride == 1 {
                            // valid ox range: 0 <= ox + kx - pad < w
                            let lo = pad.saturating_sub(kx).min(wo);
                            let hi = (w + pad).saturating_sub(kx).min(wo).max(lo);
                            dst_row[..lo].fill(T::zero());
                            if lo < hi {
                                let s0 = lo + kx - pad;
                                dst_row[lo..hi].copy_from_slice(&src_row[s0..s0 + (hi - lo)]);
                            }
                            dst_row[hi..].fill(T::zero());
                        } else {
                            for (ox, d) in dst_row.iter_mut().enumerate() {
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                *d = if ix >= 0 && ix < w as isize {
                                    src_row[ix as usize]
                                } else {
                                    T::zero()
                                };
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulate `col` back into `dx`.
#[allow(clippy::too_many_arguments)]
fn col2im<T: Scalar>(
    col: &[T],
    dx: &mut Tensor<T>,
    range: std::ops::Range<usize>,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) {
    let [_, c, h, w] = dx.shape();
    let hw = ho * wo;
    let cols = range.len() * hw;
    for (s, i) in range.enumerate() {
        let sample = dx.sample_mut(i);
        for ci in 0..c {
            let plane = &mut sample[ci * h * w..(ci + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let src = &col[row * cols + s * hw..row * cols + (s + 1) * hw];
                    for oy in 0..ho {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let dst_row = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                        let src_row = &src[oy * wo..(oy + 1) * wo];
                        if stride == 1 {
                            let lo = pad.saturating_sub(kx).min(wo);
                            let hi = (w + pad).saturating_sub(kx).min(wo).max(lo);
                            if lo < hi {
                                let d0 = lo + kx - pad;
                                for (d, &v) in dst_row[d0..d0 + (hi - lo)].iter_mut().zip(&src_row[lo..hi]) {
                                    *d += v;
                                }
                            }
                        } else {
                            for (ox, &v) in src_row.iter().enumerate() {
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if ix >= 0 && ix < w as isize {
                                    dst_row[ix as usize] += v;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// 2×2 transposed convolution with stride 2 (exact spatial doubling).
#[derive(Debug, Clone)]
pub struct ConvTranspose2x2<T> {
    pub in_channels: usize,
    pub out_channels: usize,
    /// `[in, out, 2, 2]`
    pub weight: Param<T>,
    pub bias: Param<T>,
    input: Option<Tensor<T>>,
}

impl<T: Scalar> ConvTranspose2x2<T> {
    pub fn new(in_channels: usize, out_channels: usize, rng: &mut impl Rng) -> Self {
        Self {
            in_channels,
            out_channels,
            // every output pixel receives exactly one tap per input channel
            weight: Param::kaiming(vec![in_channels, out_channels, 2, 2], in_channels, rng),
            bias: Param::zeros(vec![out_channels]),
            input: None,
        }
    }

    pub fn infer(&self, x: &Tensor<T>) -> Tensor<T> {
        let [n, c, h, w] = x.shape();
        assert_eq!(c, self.in_channels, "transposed conv input channels");
        let oc = self.out_channels;
        let hw = h * w;
        let mut out = Tensor::zeros([n, oc, 2 * h, 2 * w]);
        let mut mat = vec![T::zero(); oc * 4 * hw];
        for i in 0..n {
            // Y[(o,a,b), pix] = Wᵀ · X
            gemm(true, false, oc * 4, hw, c, &self.weight.value, x.sample(i), T::zero(), &mut mat);
            let dst = out.sample_mut(i);
            for o in 0..oc {
                let b = self.bias.value[o];
                for a in 0..2 {
                    for bb in 0..2 {
                        let src = &mat[((o * 2 + a) * 2 + bb) * hw..][..hw];
                        for y in 0..h {
                            let row = &mut dst[o * 4 * hw + (2 * y + a) * 2 * w..][..2 * w];
                            for xx in 0..w {
                                row[2 * xx + bb] = src[y * w + xx] + b;
                            }
                        }
                    }
                }
            }
        }
        out
    }

    pub fn forward(&mut self, x: &Tensor<T>) -> Tensor<T> {
        let y = self.infer(x);
        self.input = Some(x.clone());
        y
    }

    pub fn backward(&mut self, dy: &Tensor<T>) -> Tensor<T> {
        let x = self.input.take().expect("transposed conv backward without forward");
        let [n, c, h, w] = x.shape();
        let oc = self.out_channels;
        let hw = h * w;
        let mut dx = Tensor::zeros([n, c, h, w]);
        let mut dmat = vec![T::zero(); oc * 4 * hw];
        for i in 0..n {
            let src = dy.sample(i);
            for o in 0..oc {
                let mut bsum = T::zero();
                for a in 0..2 {
                    for bb in 0..2 {
                        let dst = &mut dmat[((o * 2 + a) * 2 + bb) * hw..][..hw];
                        for y in 0..h {
                            let row = &src[o * 4 * hw + (2 * y + a) * 2 * w..][..2 * w];
                            for xx in 0..w {
                                let v = row[2 * xx + bb];
                                dst[y * w + xx] = v;
                                bsum += v;
                            }
                        }
                    }
                }
                self.bias.grad[o] += bsum;
            }
            // dX = W · dY ; dW += X · dYᵀ
            gemm(false, false, c, hw, oc * 4, &self.weight.value, &dmat, T::zero(), dx.sample_mut(i));
            gemm(false, true, c, oc * 4, hw, x.sample(i), &dmat, T::one(), &mut self.weight.grad);
        }
        dx
    }
}

impl<T: Scalar> Layer<T> for ConvTranspose2x2<T> {
    fn params(&self) -> Vec<(&'static str, &Param<T>)> {
        vec![("weight", &self.weight), ("bias", &self.bias)]
    }
    fn params_mut(&mut self) -> Vec<(&'static str, &mut Param<T>)> {
        vec![("weight", &mut self.weight), ("bias", &mut self.bias)]
    }
}

#[derive(Debug, Clone)]
pub struct Dense<T> {
    pub in_features: usize,
    pub out_features: usize,
    /// `[out, in]`
    pub weight: Param<T>,
    pub bias: Param<T>,
    input: Option<Tensor<T>>,
}

impl<T: Scalar> Dense<T> {
    pub fn new(in_features: usize, out_features: usize, rng: &mut impl Rng) -> Self {
        Self {
            in_features,
            out_features,
            weight: Param::kaiming(vec![out_features, in_features], in_features, rng),
            bias: Param::zeros(vec![out_features]),
            input: None,
        }
    }

    /// `x` is `[N, in, 1, 1]` (or any shape with `in` elements per sample).
    pub fn infer(&self, x: &Tensor<T>) -> Tensor<T> {
        let n = x.batch();
        assert_eq!(x.sample_len(), self.in_features, "dense input features");
        let mut out = Tensor::zeros([n, self.out_features, 1, 1]);
        gemm(false, true, n, self.out_features, self.in_features, x.data(), &self.weight.value, T::zero(), out.data_mut());
        for row in out.data_mut().chunks_mut(self.out_features) {
            for (v, &b) in row.iter_mut().zip(&self.bias.value) {
                *v += b;
            }
        }
        out
    }

    pub fn forward(&mut self, x: &Tensor<T>) -> Tensor<T> {
        let y = self.infer(x);
        self.input = Some(x.clone());
        y
    }

    pub fn backward(&mut self, dy: &Tensor<T>) -> Tensor<T> {
        let x = self.input.take().expect("dense backward without forward");
        let n = x.batch();
        for row in dy.data().chunks(self.out_features) {
            for (g, &v) in self.bias.grad.iter_mut().zip(row) {
                *g += v;
            }
        }
        gemm(true, false, self.out_features, self.in_features, n, dy.data(), x.data(), T::one(), &mut self.weight.grad);
        let mut dx = Tensor::zeros(x.shape());
        gemm(false, false, n, self.in_features, self.out_features, dy.data(), &self.weight.value, T::zero(), dx.data_mut());
        dx
    }
}

impl<T: Scalar> Layer<T> for Dense<T> {
    fn params(&self) -> Vec<(&'static str, &Param<T>)> {
        vec![("weight", &self.weight), ("bias", &self.bias)]
    }
    fn params_mut(&mut self) -> Vec<(&'static str, &mut Param<T>)> {
        vec![("weight", &mut self.weight), ("bias", &mut self.bias)]
    }
}

// ---------------------------------------------------------------------------
// normalization

#[derive(Debug, Clone)]
pub struct BatchNorm2d<T> {
    pub channels: usize,
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: Param<T>,
    pub running_var: Param<T>,
    momentum: f64,
    eps: f64,
    cache: Option<BnCache<T>>,
}

#[derive(Debug, Clone)]
struct BnCache<T> {
    xhat: Tensor<T>,
    inv_std: Vec<T>,
}

impl<T: Scalar> BatchNorm2d<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            channels,
            gamma: Param::new(vec![channels], vec![T::one(); channels]),
            beta: Param::zeros(vec![channels]),
            running_mean: Param::buffer(vec![channels], vec![T::zero(); channels]),
            running_var: Param::buffer(vec![channels], vec![T::one(); channels]),
            momentum: 0.1,
            eps: 1e-5,
            cache: None,
        }
    }

    pub fn infer(&self, x: &Tensor<T>) -> Tensor<T> {
        let [n, c, h, w] = x.shape();
        assert_eq!(c, self.channels);
        let hw = h * w;
        let mut out = x.clone();
        let eps = T::from_f(self.eps);
        for ch in 0..c {
            let scale = self.gamma.value[ch] / (self.running_var.value[ch] + eps).sqrt();
            let shift = self.beta.value[ch] - self.running_mean.value[ch] * scale;
            for i in 0..n {
                for v in &mut out.sample_mut(i)[ch * hw..(ch + 1) * hw] {
                    *v = *v * scale + shift;
                }
            }
        }
        out
    }

    /// Normalizes with batch statistics and updates the running estimates.
    pub fn forward(&mut self, x: &Tensor<T>) -> Tensor<T> {
        let [n, c, h, w] = x.shape();
        assert_eq!(c, self.channels);
        let hw = h * w;
        let count = (n * hw) as f64;
        let mut xhat = x.clone();
        let mut out = x.clone();
        let mut inv_stds = Vec::with_capacity(c);
        let m = T::from_f(self.momentum);
        for ch in 0..c {
            let mut sum = 0.0;
            for i in 0..n {
                sum += x.sample(i)[ch * hw..(ch + 1) * hw].iter().map(|v| v.as_f64()).sum::<f64>();
            }
            let mean = sum / count;
            let mut sq = 0.0;
            for i in 0..n {
                sq += x.sample(i)[ch * hw..(ch + 1) * hw]
                    .iter()
                    .map(|v| (v.as_f64() - mean).powi(2))
                    .sum::<f64>();
            }
            let var = sq / count;
            let inv_std = T::from_f(1.0 / (var + self.eps).sqrt());
            let mean_t = T::from_f(mean);
            let (g, b) = (self.gamma.value[ch], self.beta.value[ch]);
            for i in 0..n {
                let range = ch * hw..(ch + 1) * hw;
                let xs = &mut xhat.sample_mut(i)[range.clone()];
                for v in xs.iter_mut() {
                    *v = (*v - mean_t) * inv_std;
                }
                let xs = xhat.sample(i)[range.clone()].to_vec();
                for (o, xh) in out.sample_mut(i)[range].iter_mut().zip(xs) {
                    *o = g * xh + b;
                }
            }
            inv_stds.push(inv_std);
            let unbiased = if count > 1.0 { var * count / (count - 1.0) } else { var };
            let rm = &mut self.running_mean.value[ch];
            *rm = (T::one() - m) * *rm + m * mean_t;
            let rv = &mut self.running_var.value[ch];
            *rv = (T::one() - m) * *rv + m * T::from_f(unbiased);
        }
        self.cache = Some(BnCache {
            xhat,
            inv_std: inv_stds,
        });
        out
    }

    pub fn backward(&mut self, dy: &Tensor<T>) -> Tensor<T> {
        let BnCache { xhat, inv_std } = self.cache.take().expect("batch-norm backward without forward");
        let [n, c, h, w] = dy.shape();
        let hw = h * w;
        let count = T::from_usize(n * hw).unwrap();
        let mut dx = Tensor::zeros(dy.shape());
        for ch in 0..c {
            let range = ch * hw..(ch + 1) * hw;
            let (mut sum_dy, mut sum_dy_xhat) = (T::zero(), T::zero());
            for i in 0..n {
                for (&g, &xh) in dy.sample(i)[range.clone()].iter().zip(&xhat.sample(i)[range.clone()]) {
                    sum_dy += g;
                    sum_dy_xhat += g * xh;
                }
            }
            self.beta.grad[ch] += sum_dy;
            self.gamma.grad[ch] += sum_dy_xhat;
            let k = self.gamma.value[ch] * inv_std[ch] / count;
            for i in 0..n {
                let xs = &xhat.sample(i)[range.clone()];
                let gs = &dy.sample(i)[range.clone()];
                for ((d, &g), &xh) in dx.sample_mut(i)[range.clone()].iter_mut().zip(gs).zip(xs) {
                    *d = k * (count * g - sum_dy - xh * sum_dy_xhat);
                }
            }
        }
        dx
    }
}

impl<T: Scalar> Layer<T> for BatchNorm2d<T> {
    fn params(&self) -> Vec<(&'static str, &Param<T>)> {
        vec![
            ("gamma", &self.gamma),
            ("beta", &self.beta),
            ("running_mean", &self.running_mean),
            ("running_var", &self.running_var),
        ]
    }
    fn params_mut(&mut self) -> Vec<(&'static str, &mut Param<T>)> {
        vec![
            ("gamma", &mut self.gamma),
            ("beta", &mut self.beta),
            ("running_mean", &mut self.running_mean),
            ("running_var", &mut self.running_var),
        ]
    }
}

// ---------------------------------------------------------------------------
// activations

#[derive(Debug, Clone, Default)]
pub struct Relu<T> {
    output: Option<Tensor<T>>,
}

impl<T: Scalar> Relu<T> {
    pub fn new() -> Self {
        Self { output: None }
    }

    pub fn infer(&self, x: &Tensor<T>) -> Tensor<T> {
        x.map(|v| if v > T::zero() { v } else { T::zero() })
    }

    pub fn forward(&mut self, x: &Tensor<T>) -> Tensor<T> {
        let y = self.infer(x);
        self.output = Some(y.clone());
        y
    }

    pub fn backward(&mut self, dy: &Tensor<T>) -> Tensor<T> {
        let y = self.output.take().expect("relu backward without forward");
        let mut dx = dy.clone();
        for (d, &v) in dx.data_mut().iter_mut().zip(y.data()) {
            if v <= T::zero() {
                *d = T::zero();
            }
        }
        dx
    }
}

#[derive(Debug, Clone)]
pub struct LeakyRelu<T> {
    slope: T,
    input: Option<Tensor<T>>,
}

impl<T: Scalar> LeakyRelu<T> {
    pub fn new(slope: f64) -> Self {
        Self {
            slope: T::from_f(slope),
            input: None,
        }
    }

    pub fn infer(&self, x: &Tensor<T>) -> Tensor<T> {
        let s = self.slope;
        x.map(|v| if v > T::zero() { v } else { v * s })
    }

    pub fn forward(&mut self, x: &Tensor<T>) -> Tensor<T> {
        self.input = Some(x.clone());
        self.infer(x)
    }

    pub fn backward(&mut self, dy: &Tensor<T>) -> Tensor<T> {
        let x = self.input.take().expect("leaky relu backward without forward");
        let mut dx = dy.clone();
        for (d, &v) in dx.data_mut().iter_mut().zip(x.data()) {
            if v <= T::zero() {
                *d *= self.slope;
            }
        }
        dx
    }
}

/// Parametric ReLU with one learnable slope per channel.
#[derive(Debug, Clone)]
pub struct Prelu<T> {
    pub alpha: Param<T>,
    input: Option<Tensor<T>>,
}

impl<T: Scalar> Prelu<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            alpha: Param::new(vec![channels], vec![T::from_f(0.25); channels]),
            input: None,
        }
    }

    pub fn infer(&self, x: &Tensor<T>) -> Tensor<T> {
        let [n, c, h, w] = x.shape();
        assert_eq!(c, self.alpha.len());
        let hw = h * w;
        let mut out = x.clone();
        for i in 0..n {
            for (ch, plane) in out.sample_mut(i).chunks_mut(hw).enumerate() {
                let a = self.alpha.value[ch];
                for v in plane {
                    if *v <= T::zero() {
                        *v *= a;
                    }
                }
            }
        }
        out
    }

    pub fn forward(&mut self, x: &Tensor<T>) -> Tensor<T> {
        self.input = Some(x.clone());
        self.infer(x)
    }

    pub fn backward(&mut self, dy: &Tensor<T>) -> Tensor<T> {
        let x = self.input.take().expect("prelu backward without forward");
        let [n, _, h, w] = x.shape();
        let hw = h * w;
        let mut dx = dy.clone();
        for i in 0..n {
            let xs = x.sample(i);
            for (ch, plane) in dx.sample_mut(i).chunks_mut(hw).enumerate() {
                let a = self.alpha.value[ch];
                let mut ga = T::zero();
                for (d, &v) in plane.iter_mut().zip(&xs[ch * hw..(ch + 1) * hw]) {
                    if v <= T::zero() {
                        ga += *d * v;
                        *d *= a;
                    }
                }
                self.alpha.grad[ch] += ga;
            }
        }
        dx
    }
}

impl<T: Scalar> Layer<T> for Prelu<T> {
    fn params(&self) -> Vec<(&'static str, &Param<T>)> {
        vec![("alpha", &self.alpha)]
    }
    fn params_mut(&mut self) -> Vec<(&'static str, &mut Param<T>)> {
        vec![("alpha", &mut self.alpha)]
    }
}

#[derive(Debug, Clone, Default)]
pub struct Sigmoid<T> {
    output: Option<Tensor<T>>,
}

impl<T: Scalar> Sigmoid<T> {
    pub fn new() -> Self {
        Self { output: None }
    }

    pub fn infer(&self, x: &Tensor<T>) -> Tensor<T> {
        x.map(|v| T::one() / (T::one() + (-v).exp()))
    }

    pub fn forward(&mut self, x: &Tensor<T>) -> Tensor<T> {
        let y = self.infer(x);
        self.output = Some(y.clone());
        y
    }

    pub fn backward(&mut self, dy: &Tensor<T>) -> Tensor<T> {
        let y = self.output.take().expect("sigmoid backward without forward");
        let mut dx = dy.clone();
        for (d, &p) in dx.data_mut().iter_mut().zip(y.data()) {
            *d *= p * (T::one() - p);
        }
        dx
    }
}

// ---------------------------------------------------------------------------
// pooling, dropout, rearrangement

#[derive(Debug, Clone, Default)]
pub struct MaxPool2<T> {
    argmax: Vec<u32>,
    input_shape: Option<[usize; 4]>,
    _marker: std::marker::PhantomData<T>,
}

impl<T: Scalar> MaxPool2<T> {
    pub fn new() -> Self {
        Self {
            argmax: Vec::new(),
            input_shape: None,
            _marker: std::marker::PhantomData,
        }
    }

    fn pool(x: &Tensor<T>, mut argmax: Option<&mut Vec<u32>>) -> Tensor<T> {
        let [n, c, h, w] = x.shape();
        assert!(h % 2 == 0 && w % 2 == 0, "max-pool needs even spatial dims");
        let (ho, wo) = (h / 2, w / 2);
        let mut out = Tensor::zeros([n, c, ho, wo]);
        if let Some(a) = argmax.as_deref_mut() {
            a.clear();
            a.reserve(n * c * ho * wo);
        }
        for i in 0..n {
            let src = x.sample(i);
            let dst = out.sample_mut(i);
            for ch in 0..c {
                let plane = &src[ch * h * w..(ch + 1) * h * w];
                for y in 0..ho {
                    for xx in 0..wo {
                        let base = 2 * y * w + 2 * xx;
                        let mut best = base;
                        for off in [1, w, w + 1] {
                            // first maximum wins on ties
                            if plane[base + off] > plane[best] {
                                best = base + off;
                            }
                        }
                        dst[(ch * ho + y) * wo + xx] = plane[best];
                        if let Some(a) = argmax.as_deref_mut() {
                            a.push(best as u32);
                        }
                    }
                }
            }
        }
        out
    }

    pub fn infer(&self, x: &Tensor<T>) -> Tensor<T> {
        Self::pool(x, None)
    }

    pub fn forward(&mut self, x: &Tensor<T>) -> Tensor<T> {
        self.input_shape = Some(x.shape());
        Self::pool(x, Some(&mut self.argmax))
    }

    pub fn backward(&mut self, dy: &Tensor<T>) -> Tensor<T> {
        let shape = self.input_shape.take().expect("max-pool backward without forward");
        let [n, c, h, w] = shape;
        let mut dx = Tensor::zeros(shape);
        let per_plane = (h / 2) * (w / 2);
        for i in 0..n {
            let g = dy.sample(i);
            let d = dx.sample_mut(i);
            for ch in 0..c {
                let plane = &mut d[ch * h * w..(ch + 1) * h * w];
                for j in 0..per_plane {
                    let idx = (i * c + ch) * per_plane + j;
                    plane[self.argmax[idx] as usize] += g[ch * per_plane + j];
                }
            }
        }
        dx
    }
}

/// Inverted dropout: surviving activations are scaled by `1 / (1 - rate)`.
#[derive(Debug, Clone)]
pub struct Dropout<T> {
    pub rate: f64,
    mask: Option<Vec<T>>,
}

impl<T: Scalar> Dropout<T> {
    pub fn new(rate: f64) -> Self {
        Self { rate, mask: None }
    }

    pub fn forward(&mut self, x: &Tensor<T>, rng: &mut impl Rng) -> Tensor<T> {
        if self.rate <= 0.0 {
            self.mask = None;
            return x.clone();
        }
        let keep = 1.0 - self.rate;
        let scale = T::from_f(1.0 / keep);
        let mask: Vec<T> = (0..x.data().len())
            .map(|_| if rng.random::<f64>() < keep { scale } else { T::zero() })
            .collect();
        let mut y = x.clone();
        for (v, &m) in y.data_mut().iter_mut().zip(&mask) {
            *v *= m;
        }
        self.mask = Some(mask);
        y
    }

    pub fn backward(&mut self, dy: &Tensor<T>) -> Tensor<T> {
        match self.mask.take() {
            None => dy.clone(),
            Some(mask) => {
                let mut dx = dy.clone();
                for (v, &m) in dx.data_mut().iter_mut().zip(&mask) {
                    *v *= m;
                }
                dx
            }
        }
    }
}

/// `[N, C·r², H, W] → [N, C, H·r, W·r]`, with
/// `out[n, c, h·r + i, w·r + j] = in[n, c·r² + i·r + j, h, w]`.
pub fn depth_to_space<T: Scalar>(x: &Tensor<T>, r: usize) -> Tensor<T> {
    let [n, cr, h, w] = x.shape();
    assert!(r >= 1 && cr % (r * r) == 0, "depth-to-space needs channels divisible by r²");
    let c = cr / (r * r);
    let (ho, wo) = (h * r, w * r);
    let mut out = Tensor::zeros([n, c, ho, wo]);
    for b in 0..n {
        let src = x.sample(b);
        let dst = out.sample_mut(b);
        for ch in 0..c {
            for i in 0..r {
                for j in 0..r {
                    let plane = &src[((ch * r + i) * r + j) * h * w..][..h * w];
                    for y in 0..h {
                        for xx in 0..w {
                            dst[(ch * ho + y * r + i) * wo + xx * r + j] = plane[y * w + xx];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Exact inverse of [`depth_to_space`].
pub fn space_to_depth<T: Scalar>(x: &Tensor<T>, r: usize) -> Tensor<T> {
    let [n, c, h, w] = x.shape();
    assert!(r >= 1 && h % r == 0 && w % r == 0, "space-to-depth needs dims divisible by r");
    let (ho, wo) = (h / r, w / r);
    let mut out = Tensor::zeros([n, c * r * r, ho, wo]);
    for b in 0..n {
        let src = x.sample(b);
        let dst = out.sample_mut(b);
        for ch in 0..c {
            for i in 0..r {
                for j in 0..r {
                    let plane = &mut dst[((ch * r + i) * r + j) * ho * wo..][..ho * wo];
                    for y in 0..ho {
                        for xx in 0..wo {
                            plane[y * wo + xx] = src[(ch * h + y * r + i) * w + xx * r + j];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Spatial mean per channel: `[N, C, H, W] → [N, C, 1, 1]`.
pub fn global_avg_pool<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let [n, c, h, w] = x.shape();
    let hw = h * w;
    let denom = T::from_usize(hw).unwrap();
    let mut out = Tensor::zeros([n, c, 1, 1]);
    for i in 0..n {
        let src = x.sample(i);
        for ch in 0..c {
            out.sample_mut(i)[ch] = src[ch * hw..(ch + 1) * hw].iter().copied().sum::<T>() / denom;
        }
    }
    out
}

pub fn global_avg_pool_backward<T: Scalar>(dy: &Tensor<T>, input_shape: [usize; 4]) -> Tensor<T> {
    let [n, c, h, w] = input_shape;
    let hw = h * w;
    let denom = T::from_usize(hw).unwrap();
    let mut dx = Tensor::zeros(input_shape);
    for i in 0..n {
        for ch in 0..c {
            let g = dy.sample(i)[ch] / denom;
            dx.sample_mut(i)[ch * hw..(ch + 1) * hw].iter_mut().for_each(|v| *v = g);
        }
    }
    dx
}
