//! Raw slice kernels behind the graph operations.
//!
//! Volumes are laid out `[channels, depth, height, width]`. All loops run in a
//! fixed order so results are bitwise reproducible.

use crate::scalar::Scalar;

/// Geometry of a cubic-kernel 3-D convolution with "same"-style padding `k / 2`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub input: [usize; 3],
    pub output: [usize; 3],
}

impl ConvGeom {
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize, stride: usize, input: [usize; 3]) -> Self {
        assert!(kernel % 2 == 1, "conv3d kernel must be odd, got {kernel}");
        assert!(stride == 1 || stride == 2, "conv3d stride must be 1 or 2, got {stride}");
        let pad = kernel / 2;
        let output = input.map(|n| (n + 2 * pad - kernel) / stride + 1);
        Self {
            in_channels,
            out_channels,
            kernel,
            stride,
            input,
            output,
        }
    }

    fn pad(&self) -> usize {
        self.kernel / 2
    }

    fn in_len(&self) -> usize {
        self.input.iter().product()
    }

    fn out_len(&self) -> usize {
        self.output.iter().product()
    }

    /// Input index along one axis for output position `o` and tap `k`.
    #[inline]
    fn src(&self, o: usize, k: usize, extent: usize) -> Option<usize> {
        let i = (o * self.stride + k) as isize - self.pad() as isize;
        (i >= 0 && (i as usize) < extent).then_some(i as usize)
    }
}

/// Dot product with eight independent partial sums (vectorizes without
/// reassociation flags, and the summation order stays fixed).
#[inline]
fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [T::zero(); 8];
    let mut ca = a.chunks_exact(8);
    let mut cb = b.chunks_exact(8);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut tail = T::zero();
    for (x, y) in ca.remainder().iter().zip(cb.remainder()) {
        tail += *x * *y;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

#[inline]
fn axpy<T: Scalar>(y: &mut [T], a: T, x: &[T]) {
    for (o, &v) in y.iter_mut().zip(x) {
        *o += a * v;
    }
}

/// 3-tap stride-1 update over a block of whole rows of width `w`:
/// `out[j] += t0·inp[j-1] + t1·inp[j] + t2·inp[j+1]`, with zero padding at
/// each row end. Runs as one long pass, then removes the wrap-around terms.
#[inline]
fn block3<T: Scalar>(out: &mut [T], inp: &[T], t: [T; 3], w: usize) {
    let n = out.len();
    debug_assert!(n == inp.len() && n % w == 0 && w >= 3);
    let [t0, t1, t2] = t;
    out[0] += t1 * inp[0] + t2 * inp[1];
    for ((o, l), (c, r)) in out[1..n - 1]
        .iter_mut()
        .zip(&inp[..n - 2])
        .zip(inp[1..n - 1].iter().zip(&inp[2..]))
    {
        *o += t0 * *l + t1 * *c + t2 * *r;
    }
    out[n - 1] += t0 * inp[n - 2] + t1 * inp[n - 1];
    for j in (w..n).step_by(w) {
        out[j] -= t0 * inp[j - 1];
        out[j - 1] -= t2 * inp[j];
    }
}

/// Valid output-row range `[lo, hi)` for 3-tap offset `k` along an axis of extent `n`.
#[inline]
fn valid3(k: usize, n: usize) -> (usize, usize) {
    (usize::from(k == 0), if k == 2 { n - 1 } else { n })
}

/// Stride-1 row update `out[x] += Σ_k taps[k] * inp[x + k - pad]` over the valid range.
#[inline]
fn row_forward_s1<T: Scalar>(out: &mut [T], inp: &[T], taps: &[T]) {
    let n = out.len();
    debug_assert_eq!(n, inp.len());
    let pad = taps.len() / 2;
    for (k, &wv) in taps.iter().enumerate() {
        let shift = k as isize - pad as isize;
        let lo = (-shift).max(0) as usize;
        let hi = (n as isize - shift).min(n as isize);
        if hi <= lo as isize {
            continue;
        }
        let hi = hi as usize;
        let src = &inp[(lo as isize + shift) as usize..(hi as isize + shift) as usize];
        axpy(&mut out[lo..hi], wv, src);
    }
}

/// Stride-1 transpose of [`row_forward_s1`]: `gin[x] += Σ_k taps[k] * gout[x - k + pad]`.
#[inline]
fn row_backward_s1<T: Scalar>(gin: &mut [T], gout: &[T], taps: &[T]) {
    let n = gin.len();
    let pad = taps.len() / 2;
    for (k, &wv) in taps.iter().enumerate() {
        // gin[x] receives gout[x - shift]
        let shift = k as isize - pad as isize;
        let lo = shift.max(0) as usize;
        let hi = (n as isize + shift).min(n as isize);
        if hi <= lo as isize {
            continue;
        }
        let hi = hi as usize;
        let src = &gout[(lo as isize - shift) as usize..(hi as isize - shift) as usize];
        axpy(&mut gin[lo..hi], wv, src);
    }
}

pub fn conv3d_forward<T: Scalar>(x: &[T], w: &[T], b: &[T], g: &ConvGeom) -> Vec<T> {
    let [d, h, wd] = g.input;
    let [od, oh, ow] = g.output;
    let k = g.kernel;
    let k3 = k * k * k;
    let (isz, osz) = (g.in_len(), g.out_len());
    let mut out = vec![T::zero(); g.out_channels * osz];
    for (o, out_o) in out.chunks_exact_mut(osz).enumerate() {
        out_o.fill(b[o]);
        for i in 0..g.in_channels {
            let x_i = &x[i * isz..(i + 1) * isz];
            let w_oi = &w[(o * g.in_channels + i) * k3..][..k3];
            for kz in 0..k {
                for ky in 0..k {
                    let taps = &w_oi[(kz * k + ky) * k..][..k];
                    if g.stride == 1 && k == 3 && ow >= 3 {
                        let (lo, hi) = valid3(ky, oh);
                        if hi <= lo {
                            continue;
                        }
                        let len = (hi - lo) * ow;
                        for oz in 0..od {
                            let Some(iz) = g.src(oz, kz, d) else { continue };
                            let ob = &mut out_o[(oz * oh + lo) * ow..][..len];
                            let ib = &x_i[(iz * h + lo + ky - 1) * wd..][..len];
                            block3(ob, ib, [taps[0], taps[1], taps[2]], ow);
                        }
                        continue;
                    }
                    for oz in 0..od {
                        let Some(iz) = g.src(oz, kz, d) else { continue };
                        for oy in 0..oh {
                            let Some(iy) = g.src(oy, ky, h) else { continue };
                            let orow = &mut out_o[(oz * oh + oy) * ow..][..ow];
                            let irow = &x_i[(iz * h + iy) * wd..][..wd];
                            if g.stride == 1 {
                                row_forward_s1(orow, irow, taps);
                            } else {
                                for (kx, &wv) in taps.iter().enumerate() {
                                    for (ox, o) in orow.iter_mut().enumerate() {
                                        if let Some(ix) = g.src(ox, kx, wd) {
                                            *o += wv * irow[ix];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Gradients of a convolution: `(d input, d weight, d bias)`.
pub fn conv3d_backward<T: Scalar>(
    x: &[T],
    w: &[T],
    gy: &[T],
    g: &ConvGeom,
    need_input: bool,
    need_params: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>, Option<Vec<T>>) {
    let [d, h, wd] = g.input;
    let [od, oh, ow] = g.output;
    let k = g.kernel;
    let k3 = k * k * k;
    let (isz, osz) = (g.in_len(), g.out_len());

    let gx = need_input.then(|| {
        let mut gx = vec![T::zero(); g.in_channels * isz];
        for (i, gx_i) in gx.chunks_exact_mut(isz).enumerate() {
            for o in 0..g.out_channels {
                let gy_o = &gy[o * osz..(o + 1) * osz];
                let w_oi = &w[(o * g.in_channels + i) * k3..][..k3];
                for kz in 0..k {
                    for ky in 0..k {
                        let taps = &w_oi[(kz * k + ky) * k..][..k];
                        if g.stride == 1 && k == 3 && ow >= 3 {
                            let (lo, hi) = valid3(ky, oh);
                            if hi <= lo {
                                continue;
                            }
                            let len = (hi - lo) * ow;
                            for oz in 0..od {
                                let Some(iz) = g.src(oz, kz, d) else { continue };
                                let gb = &gy_o[(oz * oh + lo) * ow..][..len];
                                let xb = &mut gx_i[(iz * h + lo + ky - 1) * wd..][..len];
                                block3(xb, gb, [taps[2], taps[1], taps[0]], ow);
                            }
                            continue;
                        }
                        for oz in 0..od {
                            let Some(iz) = g.src(oz, kz, d) else { continue };
                            for oy in 0..oh {
                                let Some(iy) = g.src(oy, ky, h) else { continue };
                                let grow = &gy_o[(oz * oh + oy) * ow..][..ow];
                                let xrow = &mut gx_i[(iz * h + iy) * wd..][..wd];
                                if g.stride == 1 {
                                    row_backward_s1(xrow, grow, taps);
                                } else {
                                    for (kx, &wv) in taps.iter().enumerate() {
                                        for (ox, &gv) in grow.iter().enumerate() {
                                            if let Some(ix) = g.src(ox, kx, wd) {
                                                xrow[ix] += wv * gv;
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        gx
    });

    let (gw, gb) = if need_params {
        let mut gw = vec![T::zero(); g.out_channels * g.in_channels * k3];
        let mut gb = vec![T::zero(); g.out_channels];
        for o in 0..g.out_channels {
            let gy_o = &gy[o * osz..(o + 1) * osz];
            gb[o] = gy_o.iter().fold(T::zero(), |a, &v| a + v);
            for i in 0..g.in_channels {
                let x_i = &x[i * isz..(i + 1) * isz];
                let gw_oi = &mut gw[(o * g.in_channels + i) * k3..][..k3];
                for kz in 0..k {
                    for ky in 0..k {
                        if g.stride == 1 && k == 3 && ow >= 3 {
                            let mut acc = [T::zero(); 3];
                            // Valid output rows for this ky form one contiguous
                            // block per plane, so each block is a single long
                            // shifted dot; wrap-around terms at row ends are removed.
                            let (lo, hi) = valid3(ky, oh);
                            if hi > lo {
                                for oz in 0..od {
                                    let Some(iz) = g.src(oz, kz, d) else { continue };
                                    let iy0 = lo + ky - 1;
                                    let len = (hi - lo) * ow;
                                    let gs = &gy_o[(oz * oh + lo) * ow..][..len];
                                    let xs = &x_i[(iz * h + iy0) * wd..][..len];
                                    let mut r = [
                                        dot(&gs[1..], &xs[..len - 1]),
                                        dot(gs, xs),
                                        dot(&gs[..len - 1], &xs[1..]),
                                    ];
                                    for row in 1..hi - lo {
                                        r[0] -= gs[row * ow] * xs[row * ow - 1];
                                        r[2] -= gs[row * ow - 1] * xs[row * ow];
                                    }
                                    for t in 0..3 {
                                        acc[t] += r[t];
                                    }
                                }
                            }
                            gw_oi[(kz * k + ky) * k..][..3].copy_from_slice(&acc);
                            continue;
                        }
                        for kx in 0..k {
                            let mut acc = T::zero();
                            for oz in 0..od {
                                let Some(iz) = g.src(oz, kz, d) else { continue };
                                for oy in 0..oh {
                                    let Some(iy) = g.src(oy, ky, h) else { continue };
                                    let grow = &gy_o[(oz * oh + oy) * ow..][..ow];
                                    let xrow = &x_i[(iz * h + iy) * wd..][..wd];
                                    if g.stride == 1 {
                                        let shift = kx as isize - g.pad() as isize;
                                        let lo = (-shift).max(0) as usize;
                                        let hi = (ow as isize).min(wd as isize - shift);
                                        if hi > lo as isize {
                                            let hi = hi as usize;
                                            acc += dot(
                                                &grow[lo..hi],
                                                &xrow[(lo as isize + shift) as usize..(hi as isize + shift) as usize],
                                            );
                                        }
                                    } else {
                                        for (ox, &gv) in grow.iter().enumerate() {
                                            if let Some(ix) = g.src(ox, kx, wd) {
                                                acc += gv * xrow[ix];
                                            }
                                        }
                                    }
                                }
                            }
                            gw_oi[(kz * k + ky) * k + kx] = acc;
                        }
                    }
                }
            }
        }
        (Some(gw), Some(gb))
    } else {
        (None, None)
    };
    (gx, gw, gb)
}

/// 2×2×2 max pooling with floor semantics. Returns values and the flat input
/// index of each maximum (first maximum wins on ties).
pub fn max_pool2<T: Scalar>(x: &[T], channels: usize, input: [usize; 3]) -> (Vec<T>, Vec<u32>, [usize; 3]) {
    let [d, h, w] = input;
    let out = input.map(|n| n / 2);
    let [od, oh, ow] = out;
    let isz = d * h * w;
    let mut vals = Vec::with_capacity(channels * od * oh * ow);
    let mut idx = Vec::with_capacity(vals.capacity());
    for c in 0..channels {
        for z in 0..od {
            for y in 0..oh {
                for xo in 0..ow {
                    let mut best_i = c * isz + ((2 * z) * h + 2 * y) * w + 2 * xo;
                    let mut best = x[best_i];
                    for dz in 0..2 {
                        for dy in 0..2 {
                            for dx in 0..2 {
                                let i = c * isz + ((2 * z + dz) * h + 2 * y + dy) * w + 2 * xo + dx;
                                if x[i] > best {
                                    best = x[i];
                                    best_i = i;
                                }
                            }
                        }
                    }
                    vals.push(best);
                    idx.push(best_i as u32);
                }
            }
        }
    }
    (vals, idx, out)
}

/// Nearest-neighbour 2× upsampling along all three spatial axes.
pub fn upsample2<T: Scalar>(x: &[T], channels: usize, input: [usize; 3]) -> Vec<T> {
    let [d, h, w] = input;
    let (od, oh, ow) = (2 * d, 2 * h, 2 * w);
    let mut out = vec![T::zero(); channels * od * oh * ow];
    for c in 0..channels {
        for z in 0..od {
            for y in 0..oh {
                let src = &x[((c * d + z / 2) * h + y / 2) * w..][..w];
                let dst = &mut out[((c * od + z) * oh + y) * ow..][..ow];
                for (xo, v) in dst.iter_mut().enumerate() {
                    *v = src[xo / 2];
                }
            }
        }
    }
    out
}

pub fn upsample2_backward<T: Scalar>(gy: &[T], channels: usize, input: [usize; 3]) -> Vec<T> {
    let [d, h, w] = input;
    let (od, oh, ow) = (2 * d, 2 * h, 2 * w);
    let mut gx = vec![T::zero(); channels * d * h * w];
    for c in 0..channels {
        for z in 0..od {
            for y in 0..oh {
                let src = &gy[((c * od + z) * oh + y) * ow..][..ow];
                let dst = &mut gx[((c * d + z / 2) * h + y / 2) * w..][..w];
                for (xo, &g) in src.iter().enumerate() {
                    dst[xo / 2] += g;
                }
            }
        }
    }
    gx
}

/// `[m, k] × [k, n]`.
pub fn matmul<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            axpy(row, a[i * k + p], &b[p * n..(p + 1) * n]);
        }
    }
    out
}

pub fn transpose<T: Scalar>(a: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

/// Splits a shape around `axis` into `(outer, len, inner)`.
pub fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub fn log_softmax<T: Scalar>(x: &[T], outer: usize, n: usize, inner: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for o in 0..outer {
        for j in 0..inner {
            let at = |c: usize| o * n * inner + c * inner + j;
            let mut mx = T::neg_infinity();
            for c in 0..n {
                mx = mx.max(x[at(c)]);
            }
            let mut s = T::zero();
            for c in 0..n {
                s += (x[at(c)] - mx).exp();
            }
            let lse = mx + s.ln();
            for c in 0..n {
                out[at(c)] = x[at(c)] - lse;
            }
        }
    }
    out
}

/// Backward of log-softmax given its output `y`: `gx = gy - softmax * Σ gy`.
pub fn log_softmax_backward<T: Scalar>(y: &[T], gy: &[T], outer: usize, n: usize, inner: usize) -> Vec<T> {
    let mut gx = vec![T::zero(); y.len()];
    for o in 0..outer {
        for j in 0..inner {
            let at = |c: usize| o * n * inner + c * inner + j;
            let mut s = T::zero();
            for c in 0..n {
                s += gy[at(c)];
            }
            for c in 0..n {
                gx[at(c)] = gy[at(c)] - y[at(c)].exp() * s;
            }
        }
    }
    gx
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct definition of the convolution used as an oracle for the row kernels.
    fn conv_naive(x: &[f64], w: &[f64], b: &[f64], g: &ConvGeom) -> Vec<f64> {
        let [d, h, wd] = g.input;
        let [od, oh, ow] = g.output;
        let k = g.kernel;
        let p = k as isize / 2;
        let mut out = vec![0.0; g.out_channels * od * oh * ow];
        for o in 0..g.out_channels {
            for z in 0..od {
                for y in 0..oh {
                    for xo in 0..ow {
                        let mut s = b[o];
                        for i in 0..g.in_channels {
                            for kz in 0..k {
                                for ky in 0..k {
                                    for kx in 0..k {
                                        let iz = (z * g.stride + kz) as isize - p;
                                        let iy = (y * g.stride + ky) as isize - p;
                                        let ix = (xo * g.stride + kx) as isize - p;
                                        if iz < 0 || iy < 0 || ix < 0 || iz >= d as isize || iy >= h as isize || ix >= wd as isize {
                                            continue;
                                        }
                                        let xi = ((i * d + iz as usize) * h + iy as usize) * wd + ix as usize;
                                        let wi = (((o * g.in_channels + i) * k + kz) * k + ky) * k + kx;
                                        s += w[wi] * x[xi];
                                    }
                                }
                            }
                        }
                        out[((o * od + z) * oh + y) * ow + xo] = s;
                    }
                }
            }
        }
        out
    }

    fn ramp(n: usize, scale: f64) -> Vec<f64> {
        (0..n).map(|i| ((i * 37 % 101) as f64 / 101.0 - 0.5) * scale).collect()
    }

    #[test]
    fn conv_matches_direct_definition() {
        for &(k, s, ext) in &[(3, 1, [4, 5, 6]), (3, 2, [5, 4, 7]), (1, 1, [3, 3, 3]), (5, 1, [4, 6, 5]), (3, 1, [2, 2, 2])] {
            let g = ConvGeom::new(2, 3, k, s, ext);
            let x = ramp(2 * ext.iter().product::<usize>(), 2.0);
            let w = ramp(3 * 2 * k * k * k, 1.0);
            let b = vec![0.1, -0.2, 0.3];
            let fast = conv3d_forward(&x, &w, &b, &g);
            let slow = conv_naive(&x, &w, &b, &g);
            for (a, e) in fast.iter().zip(&slow) {
                assert!((a - e).abs() < 1e-12, "k={k} s={s}: {a} vs {e}");
            }
        }
    }

    #[test]
    fn conv_backward_is_adjoint_of_forward() {
        // <conv(x), gy> is bilinear: its x-gradient must equal the adjoint applied to gy.
        for &(k, s, ext) in &[(3, 1, [4, 5, 6]), (3, 2, [5, 4, 7]), (5, 1, [3, 4, 6])] {
            let g = ConvGeom::new(2, 3, k, s, ext);
            let nx = 2 * ext.iter().product::<usize>();
            let x = ramp(nx, 2.0);
            let w = ramp(3 * 2 * k * k * k, 1.0);
            let b = vec![0.0; 3];
            let gy = ramp(3 * g.output.iter().product::<usize>(), 3.0);
            let (gx, gw, gb) = conv3d_backward(&x, &w, &gy, &g, true, true);
            let (gx, gw, gb) = (gx.unwrap(), gw.unwrap(), gb.unwrap());
            for (idx, &gxi) in gx.iter().enumerate() {
                let mut e = vec![0.0; nx];
                e[idx] = 1.0;
                let y = conv_naive(&e, &w, &b, &g);
                let expect: f64 = y.iter().zip(&gy).map(|(a, b)| a * b).sum();
                assert!((gxi - expect).abs() < 1e-10);
            }
            for (idx, &gwi) in gw.iter().enumerate() {
                let mut e = vec![0.0; w.len()];
                e[idx] = 1.0;
                let y = conv_naive(&x, &e, &b, &g);
                let expect: f64 = y.iter().zip(&gy).map(|(a, b)| a * b).sum();
                assert!((gwi - expect).abs() < 1e-10);
            }
            let per = g.output.iter().product::<usize>();
            for o in 0..3 {
                let expect: f64 = gy[o * per..(o + 1) * per].iter().sum();
                assert!((gb[o] - expect).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn pool_and_upsample_shapes() {
        let x: Vec<f64> = (0..2 * 5 * 4 * 3).map(|v| v as f64).collect();
        let (v, idx, out) = max_pool2(&x, 2, [5, 4, 3]);
        assert_eq!(out, [2, 2, 1]);
        assert_eq!(v.len(), 8);
        for (val, &i) in v.iter().zip(&idx) {
            assert_eq!(*val, x[i as usize]);
        }
        let up = upsample2(&v, 2, out);
        assert_eq!(up.len(), 2 * 4 * 4 * 2);
        let back = upsample2_backward(&up, 2, out);
        for (b, a) in back.iter().zip(&v) {
            assert_eq!(*b, 8.0 * a);
        }
    }

    #[test]
    fn log_softmax_rows_normalize() {
        let x = vec![1.0f64, 2.0, 3.0, -1.0, 0.0, 5.0];
        let y = log_softmax(&x, 2, 3, 1);
        for r in 0..2 {
            let s: f64 = y[r * 3..r * 3 + 3].iter().map(|v| v.exp()).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }
}
