//! Pure forward/backward kernels on flat row-major buffers.
//!
//! Image tensors are NCHW. Nothing here allocates shared state, so every
//! function is safe to call from concurrent runs.

use super::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dGeom {
    pub batch: usize,
    pub in_ch: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_ch: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2dGeom {
    pub fn out_h(&self) -> usize {
        (self.in_h + 2 * self.pad - self.kh) / self.stride + 1
    }
    pub fn out_w(&self) -> usize {
        (self.in_w + 2 * self.pad - self.kw) / self.stride + 1
    }
    fn col_rows(&self) -> usize {
        self.in_ch * self.kh * self.kw
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PoolGeom {
    pub batch: usize,
    pub ch: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub k: usize,
    pub stride: usize,
}

impl PoolGeom {
    pub fn out_h(&self) -> usize {
        (self.in_h - self.k) / self.stride + 1
    }
    pub fn out_w(&self) -> usize {
        (self.in_w - self.k) / self.stride + 1
    }
}

/// `out[m,n] += a[m,k] * b[k,n]`
pub fn gemm_acc<F: Scalar>(a: &[F], b: &[F], out: &mut [F], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == F::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out[m,n] += a[m,k] * b[n,k]^T`
pub fn gemm_bt_acc<F: Scalar>(a: &[F], b: &[F], out: &mut [F], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut s = F::zero();
            for (&x, &y) in arow.iter().zip(brow) {
                s += x * y;
            }
            out[i * n + j] += s;
        }
    }
}

/// `out[m,n] += a[k,m]^T * b[k,n]`
pub fn gemm_at_acc<F: Scalar>(a: &[F], b: &[F], out: &mut [F], m: usize, k: usize, n: usize) {
    for p in 0..k {
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let av = a[p * m + i];
            if av == F::zero() {
                continue;
            }
            let row = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

pub fn matmul<F: Scalar>(a: &[F], b: &[F], m: usize, k: usize, n: usize) -> Vec<F> {
    let mut out = vec![F::zero(); m * n];
    gemm_acc(a, b, &mut out, m, k, n);
    out
}

/// Returns `(grad_a, grad_b)` for `c = a @ b`.
pub fn matmul_backward<F: Scalar>(
    a: &[F],
    b: &[F],
    g: &[F],
    m: usize,
    k: usize,
    n: usize,
) -> (Vec<F>, Vec<F>) {
    let mut ga = vec![F::zero(); m * k];
    gemm_bt_acc(g, b, &mut ga, m, n, k);
    let mut gb = vec![F::zero(); k * n];
    gemm_at_acc(a, g, &mut gb, k, m, n);
    (ga, gb)
}

/// `y[N,out] = x[N,in] w[out,in]^T + b[out]`
pub fn linear<F: Scalar>(
    x: &[F],
    w: &[F],
    b: Option<&[F]>,
    rows: usize,
    inp: usize,
    out: usize,
) -> Vec<F> {
    let mut y = vec![F::zero(); rows * out];
    if let Some(b) = b {
        for r in 0..rows {
            y[r * out..(r + 1) * out].copy_from_slice(b);
        }
    }
    gemm_bt_acc(x, w, &mut y, rows, inp, out);
    y
}

/// Returns `(grad_x, grad_w, grad_b)`.
pub fn linear_backward<F: Scalar>(
    x: &[F],
    w: &[F],
    g: &[F],
    rows: usize,
    inp: usize,
    out: usize,
) -> (Vec<F>, Vec<F>, Vec<F>) {
    let mut gx = vec![F::zero(); rows * inp];
    gemm_acc(g, w, &mut gx, rows, out, inp);
    let mut gw = vec![F::zero(); out * inp];
    gemm_at_acc(g, x, &mut gw, out, rows, inp);
    let mut gb = vec![F::zero(); out];
    for r in 0..rows {
        for (o, &v) in gb.iter_mut().zip(&g[r * out..(r + 1) * out]) {
            *o += v;
        }
    }
    (gx, gw, gb)
}

fn im2col<F: Scalar>(x: &[F], geom: &Conv2dGeom, cols: &mut [F]) {
    let (oh, ow) = (geom.out_h(), geom.out_w());
    let plane = oh * ow;
    for c in 0..geom.in_ch {
        for ki in 0..geom.kh {
            for kj in 0..geom.kw {
                let row = (c * geom.kh + ki) * geom.kw + kj;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..oh {
                    let iy = (oy * geom.stride + ki) as isize - geom.pad as isize;
                    for ox in 0..ow {
                        let ix = (ox * geom.stride + kj) as isize - geom.pad as isize;
                        dst[oy * ow + ox] = if iy >= 0
                            && ix >= 0
                            && (iy as usize) < geom.in_h
                            && (ix as usize) < geom.in_w
                        {
                            x[(c * geom.in_h + iy as usize) * geom.in_w + ix as usize]
                        } else {
                            F::zero()
                        };
                    }
                }
            }
        }
    }
}

fn col2im<F: Scalar>(cols: &[F], geom: &Conv2dGeom, gx: &mut [F]) {
    let (oh, ow) = (geom.out_h(), geom.out_w());
    let plane = oh * ow;
    for c in 0..geom.in_ch {
        for ki in 0..geom.kh {
            for kj in 0..geom.kw {
                let row = (c * geom.kh + ki) * geom.kw + kj;
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..oh {
                    let iy = (oy * geom.stride + ki) as isize - geom.pad as isize;
                    if iy < 0 || iy as usize >= geom.in_h {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * geom.stride + kj) as isize - geom.pad as isize;
                        if ix < 0 || ix as usize >= geom.in_w {
                            continue;
                        }
                        gx[(c * geom.in_h + iy as usize) * geom.in_w + ix as usize] +=
                            src[oy * ow + ox];
                    }
                }
            }
        }
    }
}

pub fn conv2d<F: Scalar>(x: &[F], w: &[F], b: Option<&[F]>, geom: &Conv2dGeom) -> Vec<F> {
    let plane = geom.out_h() * geom.out_w();
    let in_sz = geom.in_ch * geom.in_h * geom.in_w;
    let out_sz = geom.out_ch * plane;
    let krows = geom.col_rows();
    let mut cols = vec![F::zero(); krows * plane];
    let mut y = vec![F::zero(); geom.batch * out_sz];
    for n in 0..geom.batch {
        im2col(&x[n * in_sz..(n + 1) * in_sz], geom, &mut cols);
        let yn = &mut y[n * out_sz..(n + 1) * out_sz];
        if let Some(b) = b {
            for (o, &bv) in b.iter().enumerate() {
                yn[o * plane..(o + 1) * plane]
                    .iter_mut()
                    .for_each(|v| *v = bv);
            }
        }
        gemm_acc(w, &cols, yn, geom.out_ch, krows, plane);
    }
    y
}

/// Returns `(grad_x, grad_w, grad_b)`.
pub fn conv2d_backward<F: Scalar>(
    x: &[F],
    w: &[F],
    g: &[F],
    geom: &Conv2dGeom,
) -> (Vec<F>, Vec<F>, Vec<F>) {
    let plane = geom.out_h() * geom.out_w();
    let in_sz = geom.in_ch * geom.in_h * geom.in_w;
    let out_sz = geom.out_ch * plane;
    let krows = geom.col_rows();
    let mut cols = vec![F::zero(); krows * plane];
    let mut dcols = vec![F::zero(); krows * plane];
    let mut gx = vec![F::zero(); x.len()];
    let mut gw = vec![F::zero(); w.len()];
    let mut gb = vec![F::zero(); geom.out_ch];
    for n in 0..geom.batch {
        let gn = &g[n * out_sz..(n + 1) * out_sz];
        im2col(&x[n * in_sz..(n + 1) * in_sz], geom, &mut cols);
        gemm_bt_acc(gn, &cols, &mut gw, geom.out_ch, plane, krows);
        dcols.iter_mut().for_each(|v| *v = F::zero());
        gemm_at_acc(w, gn, &mut dcols, krows, geom.out_ch, plane);
        col2im(&dcols, geom, &mut gx[n * in_sz..(n + 1) * in_sz]);
        for (o, gbv) in gb.iter_mut().enumerate() {
            *gbv += gn[o * plane..(o + 1) * plane].iter().copied().sum::<F>();
        }
    }
    (gx, gw, gb)
}

pub fn avgpool2d<F: Scalar>(x: &[F], geom: &PoolGeom) -> Vec<F> {
    let (oh, ow) = (geom.out_h(), geom.out_w());
    let inv = F::lit(1.0 / (geom.k * geom.k) as f64);
    let mut y = vec![F::zero(); geom.batch * geom.ch * oh * ow];
    for nc in 0..geom.batch * geom.ch {
        let xp = &x[nc * geom.in_h * geom.in_w..(nc + 1) * geom.in_h * geom.in_w];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut s = F::zero();
                for i in 0..geom.k {
                    let row = (oy * geom.stride + i) * geom.in_w + ox * geom.stride;
                    for j in 0..geom.k {
                        s += xp[row + j];
                    }
                }
                y[(nc * oh + oy) * ow + ox] = s * inv;
            }
        }
    }
    y
}

pub fn avgpool2d_backward<F: Scalar>(g: &[F], geom: &PoolGeom) -> Vec<F> {
    let (oh, ow) = (geom.out_h(), geom.out_w());
    let inv = F::lit(1.0 / (geom.k * geom.k) as f64);
    let mut gx = vec![F::zero(); geom.batch * geom.ch * geom.in_h * geom.in_w];
    for nc in 0..geom.batch * geom.ch {
        let base = nc * geom.in_h * geom.in_w;
        for oy in 0..oh {
            for ox in 0..ow {
                let gv = g[(nc * oh + oy) * ow + ox] * inv;
                for i in 0..geom.k {
                    let row = base + (oy * geom.stride + i) * geom.in_w + ox * geom.stride;
                    for j in 0..geom.k {
                        gx[row + j] += gv;
                    }
                }
            }
        }
    }
    gx
}

/// Returns the pooled values and, per output, the flat input index that won.
pub fn maxpool2d<F: Scalar>(x: &[F], geom: &PoolGeom) -> (Vec<F>, Vec<usize>) {
    let (oh, ow) = (geom.out_h(), geom.out_w());
    let n_out = geom.batch * geom.ch * oh * ow;
    let mut y = vec![F::zero(); n_out];
    let mut arg = vec![0usize; n_out];
    for nc in 0..geom.batch * geom.ch {
        let base = nc * geom.in_h * geom.in_w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = F::neg_infinity();
                let mut best_i = base;
                for i in 0..geom.k {
                    let row = base + (oy * geom.stride + i) * geom.in_w + ox * geom.stride;
                    for j in 0..geom.k {
                        if x[row + j] > best {
                            best = x[row + j];
                            best_i = row + j;
                        }
                    }
                }
                let o = (nc * oh + oy) * ow + ox;
                y[o] = best;
                arg[o] = best_i;
            }
        }
    }
    (y, arg)
}

pub fn maxpool2d_backward<F: Scalar>(g: &[F], argmax: &[usize], in_len: usize) -> Vec<F> {
    let mut gx = vec![F::zero(); in_len];
    for (&gv, &i) in g.iter().zip(argmax) {
        gx[i] += gv;
    }
    gx
}

/// Row-wise softmax over the trailing axis of length `cols`.
pub fn softmax_rows<F: Scalar>(x: &[F], cols: usize) -> Vec<F> {
    let mut y = vec![F::zero(); x.len()];
    for (row, out) in x.chunks(cols).zip(y.chunks_mut(cols)) {
        let mx = row.iter().copied().fold(F::neg_infinity(), F::max);
        let mut s = F::zero();
        for (o, &v) in out.iter_mut().zip(row) {
            *o = (v - mx).exp();
            s += *o;
        }
        out.iter_mut().for_each(|o| *o /= s);
    }
    y
}

pub const L2_EPS: f64 = 1e-12;

/// Row-wise `x / max(|x|, eps)`; also returns the clamped norms.
pub fn l2_normalize_rows<F: Scalar>(x: &[F], cols: usize) -> (Vec<F>, Vec<F>) {
    let mut out = Vec::with_capacity(x.len());
    let mut norms = Vec::with_capacity(x.len() / cols.max(1));
    for row in x.chunks(cols) {
        let n = row
            .iter()
            .map(|&v| v.as_f64() * v.as_f64())
            .sum::<f64>()
            .sqrt()
            .max(L2_EPS);
        let nf = F::lit(n);
        out.extend(row.iter().map(|&v| v / nf));
        norms.push(nf);
    }
    (out, norms)
}

/// Gradient of [`l2_normalize_rows`]: `(g - y (y·g)) / |x|`.
pub fn l2_normalize_backward<F: Scalar>(y: &[F], g: &[F], norms: &[F], cols: usize) -> Vec<F> {
    let mut out = Vec::with_capacity(y.len());
    for ((yr, gr), &n) in y.chunks(cols).zip(g.chunks(cols)).zip(norms) {
        let dot: F = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
        out.extend(yr.iter().zip(gr).map(|(&a, &b)| (b - a * dot) / n));
    }
    out
}

pub fn log_softmax_rows<F: Scalar>(x: &[F], cols: usize) -> Vec<F> {
    let mut y = vec![F::zero(); x.len()];
    for (row, out) in x.chunks(cols).zip(y.chunks_mut(cols)) {
        let mx = row.iter().copied().fold(F::neg_infinity(), F::max);
        let lse = mx + row.iter().map(|&v| (v - mx).exp()).sum::<F>().ln();
        for (o, &v) in out.iter_mut().zip(row) {
            *o = v - lse;
        }
    }
    y
}

/// Given softmax output `y` and upstream `g`: `dx = y * (g - <g, y>)`.
pub fn softmax_backward<F: Scalar>(y: &[F], g: &[F], cols: usize) -> Vec<F> {
    let mut gx = vec![F::zero(); y.len()];
    for ((yr, gr), out) in y.chunks(cols).zip(g.chunks(cols)).zip(gx.chunks_mut(cols)) {
        let dot: F = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
        for ((o, &yv), &gv) in out.iter_mut().zip(yr).zip(gr) {
            *o = yv * (gv - dot);
        }
    }
    gx
}

/// Given log-softmax output `y` and upstream `g`: `dx = g - softmax * sum(g)`.
pub fn log_softmax_backward<F: Scalar>(y: &[F], g: &[F], cols: usize) -> Vec<F> {
    let mut gx = vec![F::zero(); y.len()];
    for ((yr, gr), out) in y.chunks(cols).zip(g.chunks(cols)).zip(gx.chunks_mut(cols)) {
        let s: F = gr.iter().copied().sum();
        for ((o, &yv), &gv) in out.iter_mut().zip(yr).zip(gr) {
            *o = gv - yv.exp() * s;
        }
    }
    gx
}

/// Bilinear sampling taps for one output axis (half-pixel centres, edge clamped).
pub fn bilinear_taps(in_len: usize, out_len: usize) -> Vec<(usize, usize, f64)> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(in_len - 1);
            let i1 = (i0 + 1).min(in_len - 1);
            let frac = if i1 == i0 { 0.0 } else { src - i0 as f64 };
            (i0, i1, frac)
        })
        .collect()
}

pub fn bilinear_resize<F: Scalar>(
    x: &[F],
    planes: usize,
    in_h: usize,
    in_w: usize,
    out_h: usize,
    out_w: usize,
) -> Vec<F> {
    let ty = bilinear_taps(in_h, out_h);
    let tx = bilinear_taps(in_w, out_w);
    let mut y = vec![F::zero(); planes * out_h * out_w];
    for p in 0..planes {
        let xp = &x[p * in_h * in_w..(p + 1) * in_h * in_w];
        let yp = &mut y[p * out_h * out_w..(p + 1) * out_h * out_w];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            let fy = F::lit(fy);
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let fx = F::lit(fx);
                let top = xp[y0 * in_w + x0] * (F::one() - fx) + xp[y0 * in_w + x1] * fx;
                let bot = xp[y1 * in_w + x0] * (F::one() - fx) + xp[y1 * in_w + x1] * fx;
                yp[oy * out_w + ox] = top * (F::one() - fy) + bot * fy;
            }
        }
    }
    y
}

pub fn bilinear_resize_backward<F: Scalar>(
    g: &[F],
    planes: usize,
    in_h: usize,
    in_w: usize,
    out_h: usize,
    out_w: usize,
) -> Vec<F> {
    let ty = bilinear_taps(in_h, out_h);
    let tx = bilinear_taps(in_w, out_w);
    let mut gx = vec![F::zero(); planes * in_h * in_w];
    for p in 0..planes {
        let gp = &g[p * out_h * out_w..(p + 1) * out_h * out_w];
        let xp = &mut gx[p * in_h * in_w..(p + 1) * in_h * in_w];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            let fy = F::lit(fy);
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let fx = F::lit(fx);
                let gv = gp[oy * out_w + ox];
                let (one_x, one_y) = (F::one() - fx, F::one() - fy);
                xp[y0 * in_w + x0] += gv * one_y * one_x;
                xp[y0 * in_w + x1] += gv * one_y * fx;
                xp[y1 * in_w + x0] += gv * fy * one_x;
                xp[y1 * in_w + x1] += gv * fy * fx;
            }
        }
    }
    gx
}
