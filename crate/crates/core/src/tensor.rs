//! Dense activations and the few kernels the network is built from.
//!
//! Activations use a channel-major batch layout `[C][N][H][W]`. With this
//! layout an im2col matrix has one row per `(cin, ky, kx)` tap and one column
//! per `(n, y, x)` output site, so a convolution over a whole batch is a single
//! GEMM whose result is already in `[Cout][N][H][W]` order.

use std::fmt::Debug;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating point scalar the network can run in (`f32` for training, `f64`
/// for identity and gradient checks).
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + Default
    + Debug
    + Send
    + Sync
    + 'static
{
    /// `c = alpha * a * b + beta * c`, all operands described by raw strides.
    ///
    /// # Safety
    /// Every index reachable from the given dimensions and strides must be in
    /// bounds for the corresponding pointer.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    fn lit(x: f64) -> Self {
        <Self as FromPrimitive>::from_f64(x).expect("representable literal")
    }

    fn as_f64(self) -> f64 {
        ToPrimitive::to_f64(&self).unwrap_or(f64::NAN)
    }
}

impl Real for f32 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

impl Real for f64 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

/// Borrowed matrix view: `rows × cols` with arbitrary (non-negative) strides.
#[derive(Clone, Copy)]
pub(crate) struct MatRef<'a, T> {
    data: &'a [T],
    rows: usize,
    cols: usize,
    rs: usize,
    cs: usize,
}

impl<'a, T> MatRef<'a, T> {
    /// Row-major `rows × cols`.
    pub fn new(data: &'a [T], rows: usize, cols: usize) -> Self {
        Self {
            data,
            rows,
            cols,
            rs: cols,
            cs: 1,
        }
    }

    pub fn t(self) -> Self {
        Self {
            data: self.data,
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
        }
    }

    fn check(&self) {
        if self.rows > 0 && self.cols > 0 {
            let last = (self.rows - 1) * self.rs + (self.cols - 1) * self.cs;
            assert!(last < self.data.len(), "matrix view out of bounds");
        }
    }
}

/// `c (row-major m×n) = alpha·a·b + beta·c`.
pub(crate) fn gemm<T: Real>(alpha: T, a: MatRef<'_, T>, b: MatRef<'_, T>, beta: T, c: &mut [T]) {
    assert_eq!(a.cols, b.rows, "inner dimensions differ");
    let (m, k, n) = (a.rows, a.cols, b.cols);
    assert_eq!(c.len(), m * n, "output buffer size");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in c.iter_mut() {
            *v *= beta;
        }
        return;
    }
    a.check();
    b.check();
    // SAFETY: bounds of a and b checked above, c is exactly m*n row-major.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr(),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr(),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Activation tensor in `[C][N][H][W]` layout.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    pub c: usize,
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn zeros(c: usize, n: usize, h: usize, w: usize) -> Self {
        Self {
            c,
            n,
            h,
            w,
            data: vec![T::zero(); c * n * h * w],
        }
    }

    pub fn from_vec(c: usize, n: usize, h: usize, w: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), c * n * h * w, "tensor data length");
        Self { c, n, h, w, data }
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.c == other.c && self.n == other.n && self.h == other.h && self.w == other.w
    }

    pub fn shape(&self) -> [usize; 4] {
        [self.c, self.n, self.h, self.w]
    }

    /// Number of `(n, y, x)` sites.
    pub fn sites(&self) -> usize {
        self.n * self.h * self.w
    }

    #[inline]
    pub fn at(&self, c: usize, n: usize, y: usize, x: usize) -> T {
        self.data[((c * self.n + n) * self.h + y) * self.w + x]
    }

    pub fn add_assign(&mut self, other: &Self) {
        assert!(self.same_shape(other), "add_assign shape mismatch");
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&mut self, s: T) {
        for v in &mut self.data {
            *v *= s;
        }
    }

    pub fn scaled(&self, s: T) -> Self {
        let mut out = self.clone();
        out.scale(s);
        out
    }

    /// Copy out batch item `n` as a single-item tensor.
    pub fn item(&self, n: usize) -> Self {
        let plane = self.h * self.w;
        let mut data = Vec::with_capacity(self.c * plane);
        for c in 0..self.c {
            let start = (c * self.n + n) * plane;
            data.extend_from_slice(&self.data[start..start + plane]);
        }
        Self::from_vec(self.c, 1, self.h, self.w, data)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert!(self.same_shape(other), "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max)
    }
}

/// Stack single-channel images (`h×w` each, row-major) into a `[1][N][H][W]` tensor.
pub fn stack_images<T: Real>(images: &[&[f32]], h: usize, w: usize) -> Tensor<T> {
    let mut data = Vec::with_capacity(images.len() * h * w);
    for img in images {
        assert_eq!(img.len(), h * w, "image size");
        data.extend(img.iter().map(|&v| T::lit(v as f64)));
    }
    Tensor::from_vec(1, images.len(), h, w, data)
}

/// Sliding-window geometry of a square-kernel convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Window {
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Window {
    pub fn out_len(&self, len: usize) -> usize {
        (len + 2 * self.pad - self.k) / self.stride + 1
    }

    /// Input length a transposed convolution with this window produces from `len`.
    pub fn transposed_len(&self, len: usize) -> usize {
        (len - 1) * self.stride + self.k - 2 * self.pad
    }

    fn is_identity(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Output columns `x0..x1` whose input column `ox·stride + kx − pad` lies
/// inside `0..w`.
fn valid_span(w: usize, wo: usize, win: Window, kx: usize) -> (usize, usize) {
    let s = win.stride;
    let x0 = win.pad.saturating_sub(kx).div_ceil(s);
    let x1 = if w + win.pad > kx {
        (w + win.pad - kx).div_ceil(s).min(wo)
    } else {
        0
    };
    (x0, x1)
}

/// Unfold `x` into a `(c·k·k) × (n·ho·wo)` row-major matrix.
pub(crate) fn im2col<T: Real>(x: &Tensor<T>, win: Window, ho: usize, wo: usize) -> Vec<T> {
    let (c, n, h, w) = (x.c, x.n, x.h, x.w);
    let k = win.k;
    let mut out = Vec::with_capacity(c * k * k * n * ho * wo);
    // rows are produced in order, so the matrix is filled by appending
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let (x0, x1) = valid_span(w, wo, win, kx);
                let x1 = x1.max(x0);
                for b in 0..n {
                    let src = &x.data[(ci * n + b) * h * w..(ci * n + b + 1) * h * w];
                    for oy in 0..ho {
                        let iy = (oy * win.stride + ky) as isize - win.pad as isize;
                        if iy < 0 || iy >= h as isize || x0 == x1 {
                            out.resize(out.len() + wo, T::zero());
                            continue;
                        }
                        let srow = &src[iy as usize * w..(iy as usize + 1) * w];
                        let ix0 = x0 * win.stride + kx - win.pad;
                        out.resize(out.len() + x0, T::zero());
                        if win.stride == 1 {
                            out.extend_from_slice(&srow[ix0..ix0 + (x1 - x0)]);
                        } else {
                            let base = out.len();
                            out.resize(base + (x1 - x0), T::zero());
                            let seg = &srow[ix0..ix0 + (x1 - x0 - 1) * win.stride + 1];
                            for (i, d) in out[base..].iter_mut().enumerate() {
                                *d = seg[i * win.stride];
                            }
                        }
                        out.resize(out.len() + (wo - x1), T::zero());
                    }
                }
            }
        }
    }
    out
}

/// Adjoint of [`im2col`]: fold a `(c·k·k) × (n·ho·wo)` matrix back onto a
/// `[c][n][h][w]` tensor, summing overlapping taps.
pub(crate) fn col2im<T: Real>(
    cols_mat: &[T],
    c: usize,
    n: usize,
    h: usize,
    w: usize,
    win: Window,
    ho: usize,
    wo: usize,
) -> Tensor<T> {
    let k = win.k;
    let cols = n * ho * wo;
    assert_eq!(cols_mat.len(), c * k * k * cols, "col2im matrix size");
    let mut out = Tensor::zeros(c, n, h, w);
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cols_mat[row * cols..(row + 1) * cols];
                for b in 0..n {
                    let dst = &mut out.data[(ci * n + b) * h * w..(ci * n + b + 1) * h * w];
                    for oy in 0..ho {
                        let iy = (oy * win.stride + ky) as isize - win.pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let srow = &src[(b * ho + oy) * wo..(b * ho + oy + 1) * wo];
                        let drow = &mut dst[iy as usize * w..(iy as usize + 1) * w];
                        let (x0, x1) = valid_span(w, wo, win, kx);
                        if x0 >= x1 {
                            continue;
                        }
                        let ix0 = x0 * win.stride + kx - win.pad;
                        if win.stride == 1 {
                            for (d, &v) in drow[ix0..ix0 + (x1 - x0)].iter_mut().zip(&srow[x0..x1])
                            {
                                *d += v;
                            }
                        } else {
                            for (d, &v) in drow[ix0..].chunks_mut(win.stride).zip(&srow[x0..x1]) {
                                d[0] += v;
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// The im2col matrix of `x` for a convolution with window `win`, or `None`
/// for a 1×1 stride-1 window, whose matrix is `x` itself.
pub(crate) fn unfold<T: Real>(x: &Tensor<T>, win: Window) -> Option<Vec<T>> {
    (!win.is_identity()).then(|| im2col(x, win, win.out_len(x.h), win.out_len(x.w)))
}

/// Forward convolution: `w` is `cout × (cin·k·k)` row-major. `cols` is the
/// result of [`unfold`] on `x` when the caller already has it.
pub(crate) fn conv2d<T: Real>(
    x: &Tensor<T>,
    cols: Option<&[T]>,
    weight: &[T],
    bias: Option<&[T]>,
    cout: usize,
    win: Window,
) -> Tensor<T> {
    let (ho, wo) = (win.out_len(x.h), win.out_len(x.w));
    let kdim = x.c * win.k * win.k;
    assert_eq!(weight.len(), cout * kdim, "conv weight size");
    let mut out = Tensor::zeros(cout, x.n, ho, wo);
    let sites = x.n * ho * wo;
    let owned;
    let cols: &[T] = match cols {
        _ if win.is_identity() => &x.data,
        Some(c) => c,
        None => {
            owned = im2col(x, win, ho, wo);
            &owned
        }
    };
    gemm(
        T::one(),
        MatRef::new(weight, cout, kdim),
        MatRef::new(cols, kdim, sites),
        T::zero(),
        &mut out.data,
    );
    if let Some(b) = bias {
        add_channel_bias(&mut out, b);
    }
    out
}

/// Gradients of [`conv2d`]. Accumulates into `dweight`/`dbias`; returns the
/// input gradient when `want_dx`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_backward<T: Real>(
    x: &Tensor<T>,
    cols: Option<&[T]>,
    weight: &[T],
    dout: &Tensor<T>,
    win: Window,
    dweight: &mut [T],
    dbias: Option<&mut [T]>,
    want_dx: bool,
) -> Option<Tensor<T>> {
    let cout = dout.c;
    let kdim = x.c * win.k * win.k;
    let sites = dout.sites();
    let dmat = MatRef::new(&dout.data, cout, sites);
    let owned;
    let cols: &[T] = match cols {
        _ if win.is_identity() => &x.data,
        Some(c) => c,
        None => {
            owned = im2col(x, win, dout.h, dout.w);
            &owned
        }
    };
    gemm(
        T::one(),
        dmat,
        MatRef::new(cols, kdim, sites).t(),
        T::one(),
        dweight,
    );
    if let Some(db) = dbias {
        accumulate_channel_sums(dout, db);
    }
    if !want_dx {
        return None;
    }
    let mut dcols = vec![T::zero(); kdim * sites];
    gemm(
        T::one(),
        MatRef::new(weight, cout, kdim).t(),
        dmat,
        T::zero(),
        &mut dcols,
    );
    if win.is_identity() {
        return Some(Tensor::from_vec(x.c, x.n, x.h, x.w, dcols));
    }
    Some(col2im(&dcols, x.c, x.n, x.h, x.w, win, dout.h, dout.w))
}

/// Transposed convolution: `weight` is `cin × (cout·k·k)` row-major.
pub(crate) fn conv_transpose2d<T: Real>(
    x: &Tensor<T>,
    weight: &[T],
    bias: Option<&[T]>,
    cout: usize,
    win: Window,
) -> Tensor<T> {
    let (ho, wo) = (win.transposed_len(x.h), win.transposed_len(x.w));
    let kdim = cout * win.k * win.k;
    assert_eq!(weight.len(), x.c * kdim, "transposed conv weight size");
    let sites = x.sites();
    let mut cols = vec![T::zero(); kdim * sites];
    gemm(
        T::one(),
        MatRef::new(weight, x.c, kdim).t(),
        MatRef::new(&x.data, x.c, sites),
        T::zero(),
        &mut cols,
    );
    let mut out = col2im(&cols, cout, x.n, ho, wo, win, x.h, x.w);
    if let Some(b) = bias {
        add_channel_bias(&mut out, b);
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_transpose2d_backward<T: Real>(
    x: &Tensor<T>,
    weight: &[T],
    dout: &Tensor<T>,
    win: Window,
    dweight: &mut [T],
    dbias: Option<&mut [T]>,
    want_dx: bool,
) -> Option<Tensor<T>> {
    let cout = dout.c;
    let kdim = cout * win.k * win.k;
    let sites = x.sites();
    let dcols = im2col(dout, win, x.h, x.w);
    gemm(
        T::one(),
        MatRef::new(&x.data, x.c, sites),
        MatRef::new(&dcols, kdim, sites).t(),
        T::one(),
        dweight,
    );
    if let Some(db) = dbias {
        accumulate_channel_sums(dout, db);
    }
    if !want_dx {
        return None;
    }
    let mut dx = Tensor::zeros(x.c, x.n, x.h, x.w);
    gemm(
        T::one(),
        MatRef::new(weight, x.c, kdim),
        MatRef::new(&dcols, kdim, sites),
        T::zero(),
        &mut dx.data,
    );
    Some(dx)
}

fn add_channel_bias<T: Real>(t: &mut Tensor<T>, bias: &[T]) {
    assert_eq!(bias.len(), t.c, "bias length");
    let per = t.sites();
    for (chunk, &b) in t.data.chunks_mut(per).zip(bias) {
        for v in chunk {
            *v += b;
        }
    }
}

fn accumulate_channel_sums<T: Real>(t: &Tensor<T>, acc: &mut [T]) {
    assert_eq!(acc.len(), t.c, "bias gradient length");
    let per = t.sites();
    for (chunk, a) in t.data.chunks(per).zip(acc.iter_mut()) {
        let mut s = T::zero();
        for &v in chunk {
            s += v;
        }
        *a += s;
    }
}

/// Rectifier with slope `slope` below zero (0 gives a plain ReLU).
pub(crate) fn leaky_relu<T: Real>(z: &Tensor<T>, slope: T) -> Tensor<T> {
    let mut out = z.clone();
    for v in &mut out.data {
        *v = if *v < T::zero() { *v * slope } else { *v };
    }
    out
}

/// Multiply `grad` by the rectifier derivative, read off the activation
/// output `y`: `y > 0` exactly when the pre-activation is positive.
pub(crate) fn leaky_relu_backward<T: Real>(y: &Tensor<T>, grad: &mut Tensor<T>, slope: T) {
    assert!(y.same_shape(grad), "leaky_relu_backward shape mismatch");
    for (g, &v) in grad.data.iter_mut().zip(&y.data) {
        *g = if v <= T::zero() { *g * slope } else { *g };
    }
}

/// Softmax over the channel axis at every site.
pub fn softmax_channels<T: Real>(logits: &Tensor<T>) -> Tensor<T> {
    let k = logits.c;
    let sites = logits.sites();
    let mut out = logits.clone();
    for s in 0..sites {
        let mut m = T::neg_infinity();
        for j in 0..k {
            m = m.max(logits.data[j * sites + s]);
        }
        let mut z = T::zero();
        for j in 0..k {
            let e = (logits.data[j * sites + s] - m).exp();
            out.data[j * sites + s] = e;
            z += e;
        }
        for j in 0..k {
            out.data[j * sites + s] = out.data[j * sites + s] / z;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(x: &Tensor<f64>, w: &[f64], cout: usize, win: Window) -> Tensor<f64> {
        let (ho, wo) = (win.out_len(x.h), win.out_len(x.w));
        let mut out = Tensor::zeros(cout, x.n, ho, wo);
        for co in 0..cout {
            for b in 0..x.n {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut s = 0.0;
                        for ci in 0..x.c {
                            for ky in 0..win.k {
                                for kx in 0..win.k {
                                    let iy = (oy * win.stride + ky) as isize - win.pad as isize;
                                    let ix = (ox * win.stride + kx) as isize - win.pad as isize;
                                    if iy < 0 || ix < 0 || iy >= x.h as isize || ix >= x.w as isize
                                    {
                                        continue;
                                    }
                                    s += w[((co * x.c + ci) * win.k + ky) * win.k + kx]
                                        * x.at(ci, b, iy as usize, ix as usize);
                                }
                            }
                        }
                        out.data[((co * x.n + b) * ho + oy) * wo + ox] = s;
                    }
                }
            }
        }
        out
    }

    fn ramp(len: usize, scale: f64) -> Vec<f64> {
        (0..len)
            .map(|i| ((i * 37 % 101) as f64 / 50.0 - 1.0) * scale)
            .collect()
    }

    #[test]
    fn conv_matches_direct_summation() {
        for win in [
            Window {
                k: 3,
                stride: 1,
                pad: 1,
            },
            Window {
                k: 3,
                stride: 2,
                pad: 1,
            },
            Window {
                k: 1,
                stride: 1,
                pad: 0,
            },
        ] {
            let x = Tensor::from_vec(2, 2, 6, 8, ramp(2 * 2 * 6 * 8, 1.0));
            let w = ramp(3 * 2 * win.k * win.k, 0.5);
            let fast = conv2d(&x, None, &w, None, 3, win);
            let slow = naive_conv(&x, &w, 3, win);
            assert!(fast.max_abs_diff(&slow) < 1e-12, "{win:?}");
        }
    }

    #[test]
    fn transposed_conv_is_adjoint_of_conv() {
        // <conv(x), y> == <x, convT(y)> with the same kernel.
        let win = Window {
            k: 4,
            stride: 2,
            pad: 1,
        };
        let (cin, cout) = (3, 2);
        let big = Tensor::from_vec(cin, 1, 8, 8, ramp(cin * 64, 1.0));
        let small = Tensor::from_vec(cout, 1, 4, 4, ramp(cout * 16, 0.7));
        let w = ramp(cout * cin * 16, 0.3);
        let down = conv2d(&big, None, &w, None, cout, win);
        assert_eq!(down.shape(), [cout, 1, 4, 4]);
        // conv weight is cout × (cin·k·k); the same buffer read as cin' × (cout'·k·k)
        // with cin' = cout is the transposed operator.
        let up = conv_transpose2d(&small, &w, None, cin, win);
        assert_eq!(up.shape(), [cin, 1, 8, 8]);
        let lhs: f64 = down.data.iter().zip(&small.data).map(|(a, b)| a * b).sum();
        let rhs: f64 = big.data.iter().zip(&up.data).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let t = Tensor::from_vec(4, 1, 2, 3, ramp(24, 5.0));
        let p = softmax_channels(&t);
        for s in 0..6 {
            let sum: f64 = (0..4).map(|j| p.data[j * 6 + s]).sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
    }
}
