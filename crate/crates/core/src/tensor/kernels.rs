//! Forward and backward kernels on raw row-major buffers.
//!
//! Everything here is single-threaded with a fixed reduction order, so results
//! are bit-reproducible for a given input.

use crate::scalar::Scalar;

/// A strided matrix operand inside a batched buffer.
#[derive(Clone, Copy, Debug)]
pub(crate) struct MatRef {
    pub batch_stride: usize,
    pub rs: isize,
    pub cs: isize,
}

impl MatRef {
    /// Row-major `rows × cols` storage, optionally read transposed.
    pub fn dense(rows: usize, cols: usize, batched: bool, transposed: bool) -> Self {
        let (rs, cs) = if transposed {
            (1, cols as isize)
        } else {
            (cols as isize, 1)
        };
        MatRef {
            batch_stride: if batched { rows * cols } else { 0 },
            rs,
            cs,
        }
    }
}

/// `c[i] += a[i] · b[i]` for every batch entry; a zero `c` batch stride sums into one matrix.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm_acc<T: Scalar>(
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    ar: MatRef,
    b: &[T],
    br: MatRef,
    c: &mut [T],
    cr: MatRef,
) {
    if m == 0 || n == 0 {
        return;
    }
    for bi in 0..batch {
        let (ao, bo, co) = (bi * ar.batch_stride, bi * br.batch_stride, bi * cr.batch_stride);
        // SAFETY: offsets and strides describe in-bounds m×k, k×n and m×n views; callers size
        // the buffers from the same extents.
        unsafe {
            T::gemm(
                m,
                k,
                n,
                T::one(),
                a.as_ptr().add(ao),
                ar.rs,
                ar.cs,
                b.as_ptr().add(bo),
                br.rs,
                br.cs,
                T::one(),
                c.as_mut_ptr().add(co),
                cr.rs,
                cr.cs,
            );
        }
    }
}

/// Geometry of a 3-D convolution with SAME padding.
#[derive(Clone, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub cin: usize,
    pub cout: usize,
    pub input: [usize; 3],
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub output: [usize; 3],
}

impl ConvGeom {
    pub fn new(
        batch: usize,
        cin: usize,
        cout: usize,
        input: [usize; 3],
        kernel: [usize; 3],
        stride: [usize; 3],
    ) -> Self {
        let mut output = [0; 3];
        for d in 0..3 {
            let pad = kernel[d] / 2;
            output[d] = (input[d] + 2 * pad - kernel[d]) / stride[d] + 1;
        }
        ConvGeom {
            batch,
            cin,
            cout,
            input,
            kernel,
            stride,
            output,
        }
    }

    fn pad(&self) -> [usize; 3] {
        [self.kernel[0] / 2, self.kernel[1] / 2, self.kernel[2] / 2]
    }

    fn in_vol(&self) -> usize {
        self.input.iter().product()
    }

    fn out_vol(&self) -> usize {
        self.output.iter().product()
    }

    fn taps(&self) -> usize {
        self.kernel.iter().product()
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == [1, 1, 1] && self.stride == [1, 1, 1]
    }

    /// Valid output range along one axis for kernel tap `k`: the `o` with `0 <= o*s + k - p < n`.
    fn range(&self, d: usize, k: usize) -> (usize, usize) {
        let (n, s, p, on) = (self.input[d], self.stride[d], self.pad()[d], self.output[d]);
        let lo = if k >= p { 0 } else { (p - k).div_ceil(s) };
        let hi = if n + p > k { ((n + p - k - 1) / s + 1).min(on) } else { 0 };
        (lo, hi.max(lo))
    }
}

fn im2col<T: Scalar>(g: &ConvGeom, x: &[T], col: &mut [T]) {
    let [kt, kh, kw] = g.kernel;
    let [st, sh, sw] = g.stride;
    let [_, ih, iw] = g.input;
    let [_, oh, ow] = g.output;
    let p = g.pad();
    let n = g.out_vol();
    col.iter_mut().for_each(|v| *v = T::zero());
    let ivol = g.in_vol();
    for ci in 0..g.cin {
        let xc = &x[ci * ivol..(ci + 1) * ivol];
        for dt in 0..kt {
            let (t0, t1) = g.range(0, dt);
            for dh in 0..kh {
                let (h0, h1) = g.range(1, dh);
                for dw in 0..kw {
                    let (w0, w1) = g.range(2, dw);
                    let row = ((ci * kt + dt) * kh + dh) * kw + dw;
                    let dst = &mut col[row * n..(row + 1) * n];
                    for to in t0..t1 {
                        let ti = to * st + dt - p[0];
                        for ho in h0..h1 {
                            let hi = ho * sh + dh - p[1];
                            let src = (ti * ih + hi) * iw;
                            let drow = (to * oh + ho) * ow;
                            for wo in w0..w1 {
                                dst[drow + wo] = xc[src + wo * sw + dw - p[2]];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(g: &ConvGeom, col: &[T], dx: &mut [T]) {
    let [kt, kh, kw] = g.kernel;
    let [st, sh, sw] = g.stride;
    let [_, ih, iw] = g.input;
    let [_, oh, ow] = g.output;
    let p = g.pad();
    let n = g.out_vol();
    let ivol = g.in_vol();
    for ci in 0..g.cin {
        let xc = &mut dx[ci * ivol..(ci + 1) * ivol];
        for dt in 0..kt {
            let (t0, t1) = g.range(0, dt);
            for dh in 0..kh {
                let (h0, h1) = g.range(1, dh);
                for dw in 0..kw {
                    let (w0, w1) = g.range(2, dw);
                    let row = ((ci * kt + dt) * kh + dh) * kw + dw;
                    let src = &col[row * n..(row + 1) * n];
                    for to in t0..t1 {
                        let ti = to * st + dt - p[0];
                        for ho in h0..h1 {
                            let hi = ho * sh + dh - p[1];
                            let dst = (ti * ih + hi) * iw;
                            let srow = (to * oh + ho) * ow;
                            for wo in w0..w1 {
                                xc[dst + wo * sw + dw - p[2]] += src[srow + wo];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Dense convolution. `w` is `cout × cin × kt × kh × kw`.
pub(crate) fn conv_dense_forward<T: Scalar>(g: &ConvGeom, x: &[T], w: &[T], bias: Option<&[T]>) -> Vec<T> {
    let k = g.cin * g.taps();
    let n = g.out_vol();
    let mut out = vec![T::zero(); g.batch * g.cout * n];
    let mut col = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); k * n] };
    for b in 0..g.batch {
        let xb = &x[b * g.cin * g.in_vol()..(b + 1) * g.cin * g.in_vol()];
        let ob = &mut out[b * g.cout * n..(b + 1) * g.cout * n];
        if let Some(bias) = bias {
            for (co, row) in ob.chunks_mut(n).enumerate() {
                row.iter_mut().for_each(|v| *v = bias[co]);
            }
        }
        let src: &[T] = if g.is_pointwise() {
            xb
        } else {
            im2col(g, xb, &mut col);
            &col
        };
        gemm_acc(
            1,
            g.cout,
            k,
            n,
            w,
            MatRef::dense(g.cout, k, false, false),
            src,
            MatRef::dense(k, n, false, false),
            ob,
            MatRef::dense(g.cout, n, false, false),
        );
    }
    out
}

/// Accumulates input, weight and bias gradients of a dense convolution.
pub(crate) fn conv_dense_backward<T: Scalar>(
    g: &ConvGeom,
    x: &[T],
    w: &[T],
    dout: &[T],
    dx: Option<&mut [T]>,
    dw: Option<&mut [T]>,
    dbias: Option<&mut [T]>,
) {
    let k = g.cin * g.taps();
    let n = g.out_vol();
    let xvol = g.cin * g.in_vol();
    if let Some(db) = dbias {
        for b in 0..g.batch {
            for co in 0..g.cout {
                let off = (b * g.cout + co) * n;
                db[co] += dout[off..off + n].iter().copied().sum::<T>();
            }
        }
    }
    let mut col = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); k * n] };
    if let Some(dw) = dw {
        for b in 0..g.batch {
            let xb = &x[b * xvol..(b + 1) * xvol];
            let src: &[T] = if g.is_pointwise() {
                xb
            } else {
                im2col(g, xb, &mut col);
                &col
            };
            gemm_acc(
                1,
                g.cout,
                n,
                k,
                &dout[b * g.cout * n..],
                MatRef::dense(g.cout, n, false, false),
                src,
                MatRef::dense(k, n, false, true),
                dw,
                MatRef::dense(g.cout, k, false, false),
            );
        }
    }
    if let Some(dx) = dx {
        for b in 0..g.batch {
            let dxb = &mut dx[b * xvol..(b + 1) * xvol];
            if g.is_pointwise() {
                gemm_acc(
                    1,
                    k,
                    g.cout,
                    n,
                    w,
                    MatRef::dense(g.cout, k, false, true),
                    &dout[b * g.cout * n..],
                    MatRef::dense(g.cout, n, false, false),
                    dxb,
                    MatRef::dense(k, n, false, false),
                );
            } else {
                col.iter_mut().for_each(|v| *v = T::zero());
                gemm_acc(
                    1,
                    k,
                    g.cout,
                    n,
                    w,
                    MatRef::dense(g.cout, k, false, true),
                    &dout[b * g.cout * n..],
                    MatRef::dense(g.cout, n, false, false),
                    &mut col,
                    MatRef::dense(k, n, false, false),
                );
                col2im(g, &col, dxb);
            }
        }
    }
}

/// Depthwise convolution: `w` is `c × 1 × kt × kh × kw`, `cin == cout`.
pub(crate) fn conv_depthwise_forward<T: Scalar>(
    g: &ConvGeom,
    x: &[T],
    w: &[T],
    bias: Option<&[T]>,
) -> Vec<T> {
    let (ivol, ovol, taps) = (g.in_vol(), g.out_vol(), g.taps());
    let mut out = vec![T::zero(); g.batch * g.cout * ovol];
    for b in 0..g.batch {
        for c in 0..g.cin {
            let xc = &x[(b * g.cin + c) * ivol..][..ivol];
            let oc = &mut out[(b * g.cin + c) * ovol..][..ovol];
            if let Some(bias) = bias {
                oc.iter_mut().for_each(|v| *v = bias[c]);
            }
            depthwise_taps(g, &w[c * taps..][..taps], |tap, xi, oi| {
                oc[oi] += tap * xc[xi];
            });
        }
    }
    out
}

pub(crate) fn conv_depthwise_backward<T: Scalar>(
    g: &ConvGeom,
    x: &[T],
    w: &[T],
    dout: &[T],
    mut dx: Option<&mut [T]>,
    mut dw: Option<&mut [T]>,
    mut dbias: Option<&mut [T]>,
) {
    let (ivol, ovol, taps) = (g.in_vol(), g.out_vol(), g.taps());
    for b in 0..g.batch {
        for c in 0..g.cin {
            let xc = &x[(b * g.cin + c) * ivol..][..ivol];
            let dc = &dout[(b * g.cin + c) * ovol..][..ovol];
            if let Some(db) = dbias.as_deref_mut() {
                db[c] += dc.iter().copied().sum::<T>();
            }
            if let Some(dx) = dx.as_deref_mut() {
                let dxc = &mut dx[(b * g.cin + c) * ivol..][..ivol];
                depthwise_taps(g, &w[c * taps..][..taps], |tap, xi, oi| {
                    dxc[xi] += tap * dc[oi];
                });
            }
            if let Some(dw) = dw.as_deref_mut() {
                let dwc = &mut dw[c * taps..][..taps];
                depthwise_tap_indices(g, |t, xi, oi| {
                    dwc[t] += xc[xi] * dc[oi];
                });
            }
        }
    }
}

fn depthwise_taps<T: Scalar>(g: &ConvGeom, w: &[T], mut f: impl FnMut(T, usize, usize)) {
    depthwise_tap_indices(g, |t, xi, oi| f(w[t], xi, oi));
}

/// Calls `f(tap, input_offset, output_offset)` for every in-bounds (tap, output) pair.
fn depthwise_tap_indices(g: &ConvGeom, mut f: impl FnMut(usize, usize, usize)) {
    let [kt, kh, kw] = g.kernel;
    let [st, sh, sw] = g.stride;
    let [_, ih, iw] = g.input;
    let [_, oh, ow] = g.output;
    let p = g.pad();
    for dt in 0..kt {
        let (t0, t1) = g.range(0, dt);
        for dh in 0..kh {
            let (h0, h1) = g.range(1, dh);
            for dw in 0..kw {
                let (w0, w1) = g.range(2, dw);
                let tap = (dt * kh + dh) * kw + dw;
                for to in t0..t1 {
                    let ti = to * st + dt - p[0];
                    for ho in h0..h1 {
                        let hi = ho * sh + dh - p[1];
                        let xrow = (ti * ih + hi) * iw;
                        let orow = (to * oh + ho) * ow;
                        for wo in w0..w1 {
                            f(tap, xrow + wo * sw + dw - p[2], orow + wo);
                        }
                    }
                }
            }
        }
    }
}

/// Source taps for half-pixel bilinear resampling along one axis.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Tap<T> {
    pub i0: usize,
    pub i1: usize,
    pub frac: T,
}

pub(crate) fn bilinear_taps<T: Scalar>(input: usize, output: usize) -> Vec<Tap<T>> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(input - 1);
            let i1 = (i0 + 1).min(input - 1);
            let frac = if i0 == i1 { 0.0 } else { src - i0 as f64 };
            Tap {
                i0,
                i1,
                frac: T::of(frac),
            }
        })
        .collect()
}

/// Bilinear resampling of the two trailing axes. `planes` independent `ih × iw` planes.
pub(crate) fn upsample_forward<T: Scalar>(
    x: &[T],
    planes: usize,
    (ih, iw): (usize, usize),
    (oh, ow): (usize, usize),
) -> Vec<T> {
    if (ih, iw) == (oh, ow) {
        return x.to_vec();
    }
    let ty = bilinear_taps::<T>(ih, oh);
    let tx = bilinear_taps::<T>(iw, ow);
    let mut out = vec![T::zero(); planes * oh * ow];
    for p in 0..planes {
        let xp = &x[p * ih * iw..][..ih * iw];
        let op = &mut out[p * oh * ow..][..oh * ow];
        for (y, ry) in ty.iter().enumerate() {
            let (r0, r1) = (&xp[ry.i0 * iw..][..iw], &xp[ry.i1 * iw..][..iw]);
            for (xx, rx) in tx.iter().enumerate() {
                let top = r0[rx.i0] + rx.frac * (r0[rx.i1] - r0[rx.i0]);
                let bot = r1[rx.i0] + rx.frac * (r1[rx.i1] - r1[rx.i0]);
                op[y * ow + xx] = top + ry.frac * (bot - top);
            }
        }
    }
    out
}

pub(crate) fn upsample_backward<T: Scalar>(
    dout: &[T],
    planes: usize,
    (ih, iw): (usize, usize),
    (oh, ow): (usize, usize),
    dx: &mut [T],
) {
    if (ih, iw) == (oh, ow) {
        for (d, &g) in dx.iter_mut().zip(dout) {
            *d += g;
        }
        return;
    }
    let ty = bilinear_taps::<T>(ih, oh);
    let tx = bilinear_taps::<T>(iw, ow);
    for p in 0..planes {
        let gp = &dout[p * oh * ow..][..oh * ow];
        let dp = &mut dx[p * ih * iw..][..ih * iw];
        for (y, ry) in ty.iter().enumerate() {
            for (xx, rx) in tx.iter().enumerate() {
                let g = gp[y * ow + xx];
                let (gt, gb) = (g * (T::one() - ry.frac), g * ry.frac);
                dp[ry.i0 * iw + rx.i0] += gt * (T::one() - rx.frac);
                dp[ry.i0 * iw + rx.i1] += gt * rx.frac;
                dp[ry.i1 * iw + rx.i0] += gb * (T::one() - rx.frac);
                dp[ry.i1 * iw + rx.i1] += gb * rx.frac;
            }
        }
    }
}

/// Normalizes over the middle axis of an `outer × c × inner` view.
/// Returns `(xhat, rstd)` with `rstd` laid out `outer × inner`.
pub(crate) fn layer_norm_stats<T: Scalar>(
    x: &[T],
    outer: usize,
    c: usize,
    inner: usize,
    eps: T,
) -> (Vec<T>, Vec<T>) {
    let mut xhat = vec![T::zero(); x.len()];
    let mut rstd = vec![T::zero(); outer * inner];
    let cn = T::of(c as f64);
    for o in 0..outer {
        let base = o * c * inner;
        for i in 0..inner {
            let mut mean = T::zero();
            for ch in 0..c {
                mean += x[base + ch * inner + i];
            }
            mean /= cn;
            let mut var = T::zero();
            for ch in 0..c {
                let d = x[base + ch * inner + i] - mean;
                var += d * d;
            }
            var /= cn;
            let r = T::one() / (var + eps).sqrt();
            rstd[o * inner + i] = r;
            for ch in 0..c {
                let idx = base + ch * inner + i;
                xhat[idx] = (x[idx] - mean) * r;
            }
        }
    }
    (xhat, rstd)
}

/// Gradient of the normalization step only (before the affine transform).
pub(crate) fn layer_norm_backward<T: Scalar>(
    dxhat: &[T],
    xhat: &[T],
    rstd: &[T],
    outer: usize,
    c: usize,
    inner: usize,
    dx: &mut [T],
) {
    let cn = T::of(c as f64);
    for o in 0..outer {
        let base = o * c * inner;
        for i in 0..inner {
            let (mut m1, mut m2) = (T::zero(), T::zero());
            for ch in 0..c {
                let idx = base + ch * inner + i;
                m1 += dxhat[idx];
                m2 += dxhat[idx] * xhat[idx];
            }
            m1 /= cn;
            m2 /= cn;
            let r = rstd[o * inner + i];
            for ch in 0..c {
                let idx = base + ch * inner + i;
                dx[idx] += r * (dxhat[idx] - m1 - xhat[idx] * m2);
            }
        }
    }
}

pub(crate) fn softmax_rows<T: Scalar>(x: &[T], row: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for (xr, or) in x.chunks(row).zip(out.chunks_mut(row)) {
        let max = xr.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for (o, &v) in or.iter_mut().zip(xr) {
            *o = (v - max).exp();
            sum += *o;
        }
        let inv = T::one() / sum;
        or.iter_mut().for_each(|o| *o *= inv);
    }
    out
}

pub(crate) fn softmax_rows_backward<T: Scalar>(y: &[T], dy: &[T], row: usize, dx: &mut [T]) {
    for ((yr, gr), dr) in y.chunks(row).zip(dy.chunks(row)).zip(dx.chunks_mut(row)) {
        let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
        for ((d, &yv), &g) in dr.iter_mut().zip(yr).zip(gr) {
            *d += yv * (g - dot);
        }
    }
}
