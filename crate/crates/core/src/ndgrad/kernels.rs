// Dense loops behind the graph ops. Row-major everywhere.

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `max(z, 0) - z t + ln(1 + e^{-|z|})`
pub(crate) fn bce_logit(z: f64, t: f64) -> f64 {
    z.max(0.0) - z * t + (-z.abs()).exp().ln_1p()
}

pub fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

pub fn softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

pub(crate) fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &aip) in a[i * k..(i + 1) * k].iter().enumerate() {
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
    out
}

/// Row-major `[m, n]` to `[n, m]`.
pub(crate) fn transpose(v: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = v[i * n + j];
        }
    }
    out
}

/// `ga += g b^T`
pub(crate) fn matmul_grad_a(g: &[f64], b: &[f64], ga: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            ga[i * k + p] += dot(grow, &b[p * n..(p + 1) * n]);
        }
    }
}

/// Four independent partial sums so the loop vectorizes.
fn dot(x: &[f64], y: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (xc, yc) = (x.chunks_exact(4), y.chunks_exact(4));
    let tail: f64 = xc.remainder().iter().zip(yc.remainder()).map(|(a, b)| a * b).sum();
    for (a, b) in xc.zip(yc) {
        for l in 0..4 {
            acc[l] += a[l] * b[l];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// `gb += a^T g`
pub(crate) fn matmul_grad_b(a: &[f64], g: &[f64], gb: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for (p, &aip) in a[i * k..(i + 1) * k].iter().enumerate() {
            if aip == 0.0 {
                continue;
            }
            for (d, gv) in gb[p * n..(p + 1) * n].iter_mut().zip(grow) {
                *d += aip * gv;
            }
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvDims {
    pub ci: usize,
    pub co: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
}

// Visits every (output pixel, input pixel, kernel tap) triple inside the
// zero-padded support.
#[inline]
fn conv_taps(d: &ConvDims, mut f: impl FnMut(usize, usize, usize)) {
    let pad = (d.k / 2) as isize;
    for o in 0..d.co {
        for c in 0..d.ci {
            for dy in 0..d.k {
                for dx in 0..d.k {
                    let kidx = ((o * d.ci + c) * d.k + dy) * d.k + dx;
                    let oy = dy as isize - pad;
                    let ox = dx as isize - pad;
                    let y_lo = (-oy).max(0) as usize;
                    let y_hi = (d.h as isize - oy).min(d.h as isize).max(0) as usize;
                    let x_lo = (-ox).max(0) as usize;
                    let x_hi = (d.w as isize - ox).min(d.w as isize).max(0) as usize;
                    for y in y_lo..y_hi {
                        let iy = (y as isize + oy) as usize;
                        for x in x_lo..x_hi {
                            let ix = (x as isize + ox) as usize;
                            f((o * d.h + y) * d.w + x, (c * d.h + iy) * d.w + ix, kidx);
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d(x: &[f64], kernel: &[f64], d: &ConvDims) -> Vec<f64> {
    let mut out = vec![0.0; d.co * d.h * d.w];
    conv_taps(d, |oi, ii, ki| out[oi] += kernel[ki] * x[ii]);
    out
}

pub(crate) fn conv2d_grad_input(g: &[f64], kernel: &[f64], gx: &mut [f64], d: &ConvDims) {
    conv_taps(d, |oi, ii, ki| gx[ii] += kernel[ki] * g[oi]);
}

pub(crate) fn conv2d_grad_kernel(g: &[f64], x: &[f64], gk: &mut [f64], d: &ConvDims) {
    conv_taps(d, |oi, ii, ki| gk[ki] += x[ii] * g[oi]);
}

#[derive(Clone, Debug)]
pub(crate) struct UpsampleDims {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub out_h: usize,
    pub out_w: usize,
    rows: Vec<(usize, usize, f64)>,
    cols: Vec<(usize, usize, f64)>,
}

fn axis_taps(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    (0..dst)
        .map(|i| {
            let pos = if dst > 1 { i as f64 * (src - 1) as f64 / (dst - 1) as f64 } else { 0.0 };
            let lo = (pos.floor() as usize).min(src - 1);
            let hi = (lo + 1).min(src - 1);
            (lo, hi, pos - lo as f64)
        })
        .collect()
}

impl UpsampleDims {
    pub(crate) fn new(c: usize, h: usize, w: usize, out_h: usize, out_w: usize) -> Self {
        UpsampleDims { c, h, w, out_h, out_w, rows: axis_taps(h, out_h), cols: axis_taps(w, out_w) }
    }
}

// Lerp form so that equal corner values reproduce exactly.
pub(crate) fn upsample(x: &[f64], d: &UpsampleDims) -> Vec<f64> {
    let mut out = Vec::with_capacity(d.c * d.out_h * d.out_w);
    for c in 0..d.c {
        let plane = &x[c * d.h * d.w..(c + 1) * d.h * d.w];
        for &(r0, r1, fr) in &d.rows {
            for &(c0, c1, fc) in &d.cols {
                let a = plane[r0 * d.w + c0];
                let b = plane[r0 * d.w + c1];
                let cc = plane[r1 * d.w + c0];
                let dd = plane[r1 * d.w + c1];
                let top = a + fc * (b - a);
                let bottom = cc + fc * (dd - cc);
                out.push(top + fr * (bottom - top));
            }
        }
    }
    out
}

pub(crate) fn upsample_grad(g: &[f64], gx: &mut [f64], d: &UpsampleDims) {
    let mut idx = 0;
    for c in 0..d.c {
        let base = c * d.h * d.w;
        for &(r0, r1, fr) in &d.rows {
            for &(c0, c1, fc) in &d.cols {
                let gv = g[idx];
                idx += 1;
                gx[base + r0 * d.w + c0] += gv * (1.0 - fr) * (1.0 - fc);
                gx[base + r0 * d.w + c1] += gv * (1.0 - fr) * fc;
                gx[base + r1 * d.w + c0] += gv * fr * (1.0 - fc);
                gx[base + r1 * d.w + c1] += gv * fr * fc;
            }
        }
    }
}
