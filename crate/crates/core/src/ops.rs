//! Forward and backward kernels on raw channels-last buffers.
//!
//! The autodiff graph owns bookkeeping; everything here is a plain function
//! from slices to freshly allocated buffers. Reductions accumulate in a fixed
//! order so repeated runs are bit-identical.

use crate::error::{shape_err, Error, Result};
use crate::tensor::Real;

/// Geometry of a 2-D convolution over a `(B, H, W, Cin)` input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub in_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub out_channels: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_height: usize,
    pub out_width: usize,
}

impl ConvGeometry {
    pub fn new(input: [usize; 4], filter: [usize; 4], stride: usize, padding: usize) -> Result<Self> {
        let [batch, height, width, in_channels] = input;
        let [kernel_h, kernel_w, filter_in, out_channels] = filter;
        if filter_in != in_channels {
            return Err(shape_err(
                "conv2d",
                format!("filter expects {filter_in} input channels, input has {in_channels}"),
            ));
        }
        if stride == 0 {
            return Err(Error::InvalidArgument("conv2d stride must be at least 1".into()));
        }
        let out_dim = |size: usize, k: usize| -> Result<usize> {
            let padded = size + 2 * padding;
            if padded < k || !(padded - k).is_multiple_of(stride) {
                return Err(shape_err(
                    "conv2d",
                    format!("size {size} with kernel {k}, padding {padding}, stride {stride} gives a non-integer output size"),
                ));
            }
            Ok((padded - k) / stride + 1)
        };
        let out_height = out_dim(height, kernel_h)?;
        let out_width = out_dim(width, kernel_w)?;
        Ok(Self {
            batch,
            height,
            width,
            in_channels,
            kernel_h,
            kernel_w,
            out_channels,
            stride,
            padding,
            out_height,
            out_width,
        })
    }

    fn rows(&self) -> usize {
        self.batch * self.out_height * self.out_width
    }

    fn patch(&self) -> usize {
        self.kernel_h * self.kernel_w * self.in_channels
    }

    /// A 1×1, stride-1, unpadded convolution is a plain matrix product.
    fn is_pointwise(&self) -> bool {
        self.kernel_h == 1 && self.kernel_w == 1 && self.stride == 1 && self.padding == 0
    }
}

/// Stride-1 convolution as one matrix product per kernel tap.
///
/// The input is zero-padded and viewed as a flat list of pixels. Output pixel
/// `(y, x)` of image `b` lives at flat index `(b·Hp + y)·Wp + x` of the padded
/// grid, and tap `(ky, kx)` reads the input `ky·Wp + kx` pixels further on.
/// Grid positions past the valid output window are computed and discarded.
struct TapGrid {
    hp: usize,
    wp: usize,
    rows: usize,
}

impl TapGrid {
    fn new(g: &ConvGeometry) -> Self {
        let hp = g.height + 2 * g.padding;
        let wp = g.width + 2 * g.padding;
        let span = (g.kernel_h - 1) * wp + (g.kernel_w - 1);
        Self { hp, wp, rows: g.batch * hp * wp - span }
    }

    fn offset(&self, ky: usize, kx: usize) -> usize {
        ky * self.wp + kx
    }

    fn pad<T: Real>(&self, x: &[T], g: &ConvGeometry) -> Vec<T> {
        let c = g.in_channels;
        let p = g.padding;
        let mut xp = vec![T::zero(); g.batch * self.hp * self.wp * c];
        for b in 0..g.batch {
            for y in 0..g.height {
                let src = ((b * g.height + y) * g.width) * c;
                let dst = ((b * self.hp + y + p) * self.wp + p) * c;
                xp[dst..dst + g.width * c].copy_from_slice(&x[src..src + g.width * c]);
            }
        }
        xp
    }

    /// Valid-window pixels of a grid tensor, `(B, Ho, Wo, C)`.
    fn gather<T: Real>(&self, grid: &[T], c: usize, g: &ConvGeometry) -> Vec<T> {
        let mut out = Vec::with_capacity(g.rows() * c);
        for b in 0..g.batch {
            for y in 0..g.out_height {
                let start = ((b * self.hp + y) * self.wp) * c;
                out.extend_from_slice(&grid[start..start + g.out_width * c]);
            }
        }
        out
    }

    /// Inverse of [`gather`](Self::gather); other grid positions are zero.
    fn scatter<T: Real>(&self, dense: &[T], c: usize, g: &ConvGeometry) -> Vec<T> {
        let mut grid = vec![T::zero(); self.rows * c];
        for b in 0..g.batch {
            for y in 0..g.out_height {
                let start = ((b * self.hp + y) * self.wp) * c;
                let src = ((b * g.out_height + y) * g.out_width) * c;
                grid[start..start + g.out_width * c].copy_from_slice(&dense[src..src + g.out_width * c]);
            }
        }
        grid
    }

    fn forward<T: Real>(&self, x: &[T], filter: &[T], g: &ConvGeometry) -> Vec<T> {
        let (cin, cout) = (g.in_channels, g.out_channels);
        let xp = self.pad(x, g);
        let mut grid = vec![T::zero(); self.rows * cout];
        for ky in 0..g.kernel_h {
            for kx in 0..g.kernel_w {
                let a = &xp[self.offset(ky, kx) * cin..];
                let w = &filter[(ky * g.kernel_w + kx) * cin * cout..][..cin * cout];
                T::gemm(self.rows, cin, cout, T::one(), a, cin as isize, 1, w, cout as isize, 1, T::one(), &mut grid, cout as isize, 1);
            }
        }
        self.gather(&grid, cout, g)
    }

    fn backward<T: Real>(&self, x: &[T], filter: &[T], grad_out: &[T], g: &ConvGeometry, want_input: bool, want_filter: bool) -> (Option<Vec<T>>, Option<Vec<T>>) {
        let (cin, cout) = (g.in_channels, g.out_channels);
        let dgrid = self.scatter(grad_out, cout, g);
        let dw = want_filter.then(|| {
            let xp = self.pad(x, g);
            let mut dw = vec![T::zero(); filter.len()];
            for ky in 0..g.kernel_h {
                for kx in 0..g.kernel_w {
                    let a = &xp[self.offset(ky, kx) * cin..];
                    let d = &mut dw[(ky * g.kernel_w + kx) * cin * cout..][..cin * cout];
                    // dW_tap = X_tapᵀ · dY
                    T::gemm(cin, self.rows, cout, T::one(), a, 1, cin as isize, &dgrid, cout as isize, 1, T::zero(), d, cout as isize, 1);
                }
            }
            dw
        });
        let dx = want_input.then(|| {
            let mut dxp = vec![T::zero(); g.batch * self.hp * self.wp * cin];
            for ky in 0..g.kernel_h {
                for kx in 0..g.kernel_w {
                    let w = &filter[(ky * g.kernel_w + kx) * cin * cout..][..cin * cout];
                    let c = &mut dxp[self.offset(ky, kx) * cin..];
                    // dX_tap += dY · W_tapᵀ
                    T::gemm(self.rows, cout, cin, T::one(), &dgrid, cout as isize, 1, w, 1, cout as isize, T::one(), c, cin as isize, 1);
                }
            }
            let p = g.padding;
            let mut dx = Vec::with_capacity(x.len());
            for b in 0..g.batch {
                for y in 0..g.height {
                    let start = ((b * self.hp + y + p) * self.wp + p) * cin;
                    dx.extend_from_slice(&dxp[start..start + g.width * cin]);
                }
            }
            dx
        });
        (dx, dw)
    }
}

fn im2col<T: Real>(x: &[T], g: &ConvGeometry) -> Vec<T> {
    let (cin, patch) = (g.in_channels, g.patch());
    let mut cols = vec![T::zero(); g.rows() * patch];
    let mut row = 0;
    for b in 0..g.batch {
        for oy in 0..g.out_height {
            for ox in 0..g.out_width {
                let dst = &mut cols[row * patch..(row + 1) * patch];
                for ky in 0..g.kernel_h {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    for kx in 0..g.kernel_w {
                        let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                        if ix < 0 || ix >= g.width as isize {
                            continue;
                        }
                        let src = ((b * g.height + iy as usize) * g.width + ix as usize) * cin;
                        let off = (ky * g.kernel_w + kx) * cin;
                        dst[off..off + cin].copy_from_slice(&x[src..src + cin]);
                    }
                }
                row += 1;
            }
        }
    }
    cols
}

fn col2im<T: Real>(cols: &[T], g: &ConvGeometry) -> Vec<T> {
    let (cin, patch) = (g.in_channels, g.patch());
    let mut dx = vec![T::zero(); g.batch * g.height * g.width * cin];
    let mut row = 0;
    for b in 0..g.batch {
        for oy in 0..g.out_height {
            for ox in 0..g.out_width {
                let src = &cols[row * patch..(row + 1) * patch];
                for ky in 0..g.kernel_h {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    for kx in 0..g.kernel_w {
                        let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                        if ix < 0 || ix >= g.width as isize {
                            continue;
                        }
                        let dst = ((b * g.height + iy as usize) * g.width + ix as usize) * cin;
                        let off = (ky * g.kernel_w + kx) * cin;
                        for (d, &s) in dx[dst..dst + cin].iter_mut().zip(&src[off..off + cin]) {
                            *d += s;
                        }
                    }
                }
                row += 1;
            }
        }
    }
    dx
}

/// Cross-correlation plus per-output-channel bias.
pub fn conv2d_forward<T: Real>(x: &[T], filter: &[T], bias: Option<&[T]>, g: &ConvGeometry) -> Vec<T> {
    let (m, k, n) = (g.rows(), g.patch(), g.out_channels);
    if g.stride == 1 && !g.is_pointwise() {
        let mut out = TapGrid::new(g).forward(x, filter, g);
        if let Some(bias) = bias {
            for row in out.chunks_exact_mut(n) {
                for (o, &b) in row.iter_mut().zip(bias) {
                    *o += b;
                }
            }
        }
        return out;
    }
    let mut out = vec![T::zero(); m * n];
    if let Some(bias) = bias {
        for row in out.chunks_exact_mut(n) {
            row.copy_from_slice(bias);
        }
    }
    let owned;
    let cols: &[T] = if g.is_pointwise() {
        x
    } else {
        owned = im2col(x, g);
        &owned
    };
    T::gemm(m, k, n, T::one(), cols, k as isize, 1, filter, n as isize, 1, T::one(), &mut out, n as isize, 1);
    out
}

/// Gradients of [`conv2d_forward`]. Each output is computed only when requested.
pub struct ConvGrads<T> {
    pub input: Option<Vec<T>>,
    pub filter: Option<Vec<T>>,
    pub bias: Option<Vec<T>>,
}

pub fn conv2d_backward<T: Real>(
    x: &[T],
    filter: &[T],
    grad_out: &[T],
    g: &ConvGeometry,
    want: [bool; 3],
) -> ConvGrads<T> {
    let (m, k, n) = (g.rows(), g.patch(), g.out_channels);
    let bias = want[2].then(|| {
        let mut db = vec![T::zero(); n];
        for row in grad_out.chunks_exact(n) {
            for (d, &v) in db.iter_mut().zip(row) {
                *d += v;
            }
        }
        db
    });
    if g.stride == 1 && !g.is_pointwise() {
        let (input, filter) = TapGrid::new(g).backward(x, filter, grad_out, g, want[0], want[1]);
        return ConvGrads { input, filter, bias };
    }
    let filter_grad = want[1].then(|| {
        let owned;
        let cols: &[T] = if g.is_pointwise() {
            x
        } else {
            owned = im2col(x, g);
            &owned
        };
        let mut dw = vec![T::zero(); k * n];
        // dW = colsᵀ · dY
        T::gemm(k, m, n, T::one(), cols, 1, k as isize, grad_out, n as isize, 1, T::zero(), &mut dw, n as isize, 1);
        dw
    });
    let input = want[0].then(|| {
        let mut dcols = vec![T::zero(); m * k];
        // dcols = dY · Wᵀ
        T::gemm(m, n, k, T::one(), grad_out, n as isize, 1, filter, 1, n as isize, T::zero(), &mut dcols, k as isize, 1);
        if g.is_pointwise() {
            dcols
        } else {
            col2im(&dcols, g)
        }
    });
    ConvGrads { input, filter: filter_grad, bias }
}

/// Per-channel running statistics of a batch-norm layer.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
    /// Number of training batches folded into the statistics; zero means unpopulated.
    pub updates: u64,
}

impl<T: Real> BatchNormStats<T> {
    pub fn new(channels: usize) -> Self {
        Self { mean: vec![T::zero(); channels], var: vec![T::one(); channels], updates: 0 }
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    pub fn is_populated(&self) -> bool {
        self.updates > 0
    }
}

/// Normalization constants shared by every batch-norm layer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchNormConfig {
    pub eps: f64,
    /// Weight kept on the old running statistics at each update.
    pub momentum: f64,
}

impl Default for BatchNormConfig {
    fn default() -> Self {
        Self { eps: 1e-5, momentum: 0.9 }
    }
}

pub(crate) struct BatchNormForward<T> {
    pub out: Vec<T>,
    pub xhat: Vec<T>,
    pub inv_std: Vec<T>,
}

/// Training-mode normalization with batch statistics; folds them into `stats`.
pub(crate) fn batch_norm_train<T: Real>(
    x: &[T],
    channels: usize,
    gamma: &[T],
    beta: &[T],
    stats: &mut BatchNormStats<T>,
    cfg: BatchNormConfig,
) -> Result<BatchNormForward<T>> {
    let n = x.len() / channels;
    if n < 2 {
        return Err(Error::InvalidArgument(format!(
            "batch norm in training mode needs at least 2 values per channel, got {n}"
        )));
    }
    let mut sum = vec![0.0f64; channels];
    for row in x.chunks_exact(channels) {
        for (s, &v) in sum.iter_mut().zip(row) {
            *s += v.as_f64();
        }
    }
    let mean: Vec<f64> = sum.iter().map(|s| s / n as f64).collect();
    let mut sq = vec![0.0f64; channels];
    for row in x.chunks_exact(channels) {
        for ((s, &v), &m) in sq.iter_mut().zip(row).zip(&mean) {
            let d = v.as_f64() - m;
            *s += d * d;
        }
    }
    let var: Vec<f64> = sq.iter().map(|s| s / n as f64).collect();
    let inv_std_f: Vec<f64> = var.iter().map(|v| 1.0 / (v + cfg.eps).sqrt()).collect();

    let mut xhat = vec![T::zero(); x.len()];
    let mut out = vec![T::zero(); x.len()];
    for ((xr, hr), or) in x.chunks_exact(channels).zip(xhat.chunks_exact_mut(channels)).zip(out.chunks_exact_mut(channels)) {
        for c in 0..channels {
            let h = T::from_f64((xr[c].as_f64() - mean[c]) * inv_std_f[c]);
            hr[c] = h;
            or[c] = gamma[c] * h + beta[c];
        }
    }

    let keep = cfg.momentum;
    let unbias = n as f64 / (n as f64 - 1.0);
    for c in 0..channels {
        stats.mean[c] = T::from_f64(keep * stats.mean[c].as_f64() + (1.0 - keep) * mean[c]);
        stats.var[c] = T::from_f64(keep * stats.var[c].as_f64() + (1.0 - keep) * var[c] * unbias);
    }
    stats.updates += 1;

    Ok(BatchNormForward { out, xhat, inv_std: inv_std_f.into_iter().map(T::from_f64).collect() })
}

/// Inference-mode normalization with running statistics.
pub(crate) fn batch_norm_eval<T: Real>(
    x: &[T],
    channels: usize,
    gamma: &[T],
    beta: &[T],
    stats: &BatchNormStats<T>,
    cfg: BatchNormConfig,
) -> Result<BatchNormForward<T>> {
    if !stats.is_populated() {
        return Err(Error::BatchNormNotReady);
    }
    let inv_std: Vec<T> = stats.var.iter().map(|&v| T::from_f64(1.0 / (v.as_f64() + cfg.eps).sqrt())).collect();
    let mut xhat = vec![T::zero(); x.len()];
    let mut out = vec![T::zero(); x.len()];
    for ((xr, hr), or) in x.chunks_exact(channels).zip(xhat.chunks_exact_mut(channels)).zip(out.chunks_exact_mut(channels)) {
        for c in 0..channels {
            let h = (xr[c] - stats.mean[c]) * inv_std[c];
            hr[c] = h;
            or[c] = gamma[c] * h + beta[c];
        }
    }
    Ok(BatchNormForward { out, xhat, inv_std })
}

pub(crate) struct BatchNormGrads<T> {
    pub input: Vec<T>,
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
}

pub(crate) fn batch_norm_backward<T: Real>(
    grad_out: &[T],
    xhat: &[T],
    inv_std: &[T],
    gamma: &[T],
    batch_stats: bool,
) -> BatchNormGrads<T> {
    let channels = gamma.len();
    let n = grad_out.len() / channels;
    let mut sum_dy = vec![0.0f64; channels];
    let mut sum_dy_xhat = vec![0.0f64; channels];
    for (dr, hr) in grad_out.chunks_exact(channels).zip(xhat.chunks_exact(channels)) {
        for c in 0..channels {
            let dy = dr[c].as_f64();
            sum_dy[c] += dy;
            sum_dy_xhat[c] += dy * hr[c].as_f64();
        }
    }
    let mut input = vec![T::zero(); grad_out.len()];
    for ((ir, dr), hr) in input.chunks_exact_mut(channels).zip(grad_out.chunks_exact(channels)).zip(xhat.chunks_exact(channels)) {
        for c in 0..channels {
            let scale = gamma[c].as_f64() * inv_std[c].as_f64();
            let dy = dr[c].as_f64();
            ir[c] = T::from_f64(if batch_stats {
                scale / n as f64 * (n as f64 * dy - sum_dy[c] - hr[c].as_f64() * sum_dy_xhat[c])
            } else {
                scale * dy
            });
        }
    }
    BatchNormGrads {
        input,
        gamma: sum_dy_xhat.into_iter().map(T::from_f64).collect(),
        beta: sum_dy.into_iter().map(T::from_f64).collect(),
    }
}

pub(crate) fn concat_channels_forward<T: Real>(a: &[T], ca: usize, b: &[T], cb: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(a.len() + b.len());
    for (ra, rb) in a.chunks_exact(ca).zip(b.chunks_exact(cb)) {
        out.extend_from_slice(ra);
        out.extend_from_slice(rb);
    }
    out
}

pub(crate) fn concat_channels_backward<T: Real>(grad: &[T], ca: usize, cb: usize) -> (Vec<T>, Vec<T>) {
    let rows = grad.len() / (ca + cb);
    let mut ga = Vec::with_capacity(rows * ca);
    let mut gb = Vec::with_capacity(rows * cb);
    for r in grad.chunks_exact(ca + cb) {
        ga.extend_from_slice(&r[..ca]);
        gb.extend_from_slice(&r[ca..]);
    }
    (ga, gb)
}

pub(crate) fn avg_pool_2x2_forward<T: Real>(x: &[T], dims: (usize, usize, usize, usize)) -> Vec<T> {
    let (b, h, w, c) = dims;
    let (ho, wo) = (h / 2, w / 2);
    let quarter = T::from_f64(0.25);
    let mut out = vec![T::zero(); b * ho * wo * c];
    for bi in 0..b {
        for oy in 0..ho {
            for ox in 0..wo {
                let o = ((bi * ho + oy) * wo + ox) * c;
                let i00 = ((bi * h + 2 * oy) * w + 2 * ox) * c;
                let i01 = i00 + c;
                let i10 = i00 + w * c;
                let i11 = i10 + c;
                for ch in 0..c {
                    out[o + ch] = (x[i00 + ch] + x[i01 + ch] + x[i10 + ch] + x[i11 + ch]) * quarter;
                }
            }
        }
    }
    out
}

pub(crate) fn avg_pool_2x2_backward<T: Real>(grad: &[T], dims: (usize, usize, usize, usize)) -> Vec<T> {
    let (b, h, w, c) = dims;
    let (ho, wo) = (h / 2, w / 2);
    let quarter = T::from_f64(0.25);
    let mut dx = vec![T::zero(); b * h * w * c];
    for bi in 0..b {
        for y in 0..h {
            for x in 0..w {
                let i = ((bi * h + y) * w + x) * c;
                let o = ((bi * ho + y / 2) * wo + x / 2) * c;
                for ch in 0..c {
                    dx[i + ch] = grad[o + ch] * quarter;
                }
            }
        }
    }
    dx
}

pub(crate) fn global_avg_pool_forward<T: Real>(x: &[T], dims: (usize, usize, usize, usize)) -> Vec<T> {
    let (b, h, w, c) = dims;
    let area = T::from_f64((h * w) as f64);
    let mut out = vec![T::zero(); b * c];
    for (bi, img) in x.chunks_exact(h * w * c).enumerate() {
        let o = &mut out[bi * c..(bi + 1) * c];
        for px in img.chunks_exact(c) {
            for (s, &v) in o.iter_mut().zip(px) {
                *s += v;
            }
        }
        for s in o.iter_mut() {
            *s = *s / area;
        }
    }
    out
}

pub(crate) fn global_avg_pool_backward<T: Real>(grad: &[T], dims: (usize, usize, usize, usize)) -> Vec<T> {
    let (b, h, w, c) = dims;
    let area = T::from_f64((h * w) as f64);
    let mut dx = Vec::with_capacity(b * h * w * c);
    for bi in 0..b {
        let g: Vec<T> = grad[bi * c..(bi + 1) * c].iter().map(|&v| v / area).collect();
        for _ in 0..h * w {
            dx.extend_from_slice(&g);
        }
    }
    dx
}

pub(crate) fn linear_forward<T: Real>(x: &[T], weight: &[T], bias: &[T], rows: usize, fin: usize, fout: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(rows * fout);
    for _ in 0..rows {
        out.extend_from_slice(bias);
    }
    T::gemm(rows, fin, fout, T::one(), x, fin as isize, 1, weight, fout as isize, 1, T::one(), &mut out, fout as isize, 1);
    out
}

/// Row-wise softmax with max subtraction.
pub(crate) fn softmax_rows<T: Real>(logits: &[T], k: usize) -> Vec<T> {
    let mut out = vec![T::zero(); logits.len()];
    for (row, o) in logits.chunks_exact(k).zip(out.chunks_exact_mut(k)) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for (d, &z) in o.iter_mut().zip(row) {
            *d = (z - max).exp();
            sum += *d;
        }
        for d in o.iter_mut() {
            *d = *d / sum;
        }
    }
    out
}

pub(crate) fn softmax_backward<T: Real>(probs: &[T], grad: &[T], k: usize) -> Vec<T> {
    let mut dx = vec![T::zero(); probs.len()];
    for ((p, g), d) in probs.chunks_exact(k).zip(grad.chunks_exact(k)).zip(dx.chunks_exact_mut(k)) {
        let dot: T = p.iter().zip(g).map(|(&a, &b)| a * b).sum();
        for i in 0..k {
            d[i] = p[i] * (g[i] - dot);
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(x: &[f64], w: &[f64], g: &ConvGeometry) -> Vec<f64> {
        let mut out = vec![0.0; g.rows() * g.out_channels];
        for b in 0..g.batch {
            for oy in 0..g.out_height {
                for ox in 0..g.out_width {
                    for co in 0..g.out_channels {
                        let mut s = 0.0;
                        for ky in 0..g.kernel_h {
                            for kx in 0..g.kernel_w {
                                let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                                let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                                if iy < 0 || ix < 0 || iy >= g.height as isize || ix >= g.width as isize {
                                    continue;
                                }
                                for ci in 0..g.in_channels {
                                    let xi = ((b * g.height + iy as usize) * g.width + ix as usize) * g.in_channels + ci;
                                    let wi = ((ky * g.kernel_w + kx) * g.in_channels + ci) * g.out_channels + co;
                                    s += x[xi] * w[wi];
                                }
                            }
                        }
                        out[((b * g.out_height + oy) * g.out_width + ox) * g.out_channels + co] = s;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn im2col_conv_matches_direct_loops() {
        for (stride, pad, k) in [(1, 1, 3), (2, 1, 3), (1, 0, 1), (2, 0, 1), (1, 0, 3)] {
            let h = if stride == 2 { 5 } else { 6 };
            let g = ConvGeometry::new([2, h, h, 3], [k, k, 3, 4], stride, pad).unwrap();
            let x: Vec<f64> = (0..2 * h * h * 3).map(|i| ((i * 37 % 23) as f64 - 11.0) / 7.0).collect();
            let w: Vec<f64> = (0..k * k * 12).map(|i| ((i * 13 % 17) as f64 - 8.0) / 5.0).collect();
            let got = conv2d_forward(&x, &w, None, &g);
            let want = naive_conv(&x, &w, &g);
            for (a, b) in got.iter().zip(&want) {
                assert!((a - b).abs() < 1e-12, "stride {stride} pad {pad} k {k}");
            }
        }
    }

    #[test]
    fn conv_geometry_rejects_fractional_output() {
        assert!(ConvGeometry::new([1, 4, 4, 1], [3, 3, 1, 1], 2, 0).is_err());
        assert!(ConvGeometry::new([1, 4, 4, 2], [3, 3, 1, 1], 1, 1).is_err());
        assert!(ConvGeometry::new([1, 5, 5, 1], [3, 3, 1, 1], 2, 0).is_ok());
    }
}
