//! Forward and backward kernels for the operator set.
//!
//! Kernels work on raw row-major buffers; shape validation happens in the
//! graph layer. Layout conventions: images are `[C, H, W]`, convolution
//! weights `[Cout, Cin, KH, KW]`, linear weights `[Out, In]`.

use super::Element;

/// Inclusive-exclusive output-row/column range for a kernel offset, so that
/// the input index `o + k - pad` stays in `[0, extent)`.
#[inline]
fn valid_range(out_extent: usize, in_extent: usize, k: usize, pad: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(k);
    let hi = (in_extent + pad).saturating_sub(k).min(out_extent);
    (lo.min(hi), hi)
}

pub fn conv2d_out_shape(
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    same: bool,
) -> Option<(usize, usize, usize, usize)> {
    if same {
        if kh % 2 == 0 || kw % 2 == 0 {
            return None;
        }
        Some((h, w, kh / 2, kw / 2))
    } else {
        if kh > h || kw > w {
            return None;
        }
        Some((h - kh + 1, w - kw + 1, 0, 0))
    }
}

/// Direct convolution, kept as the independent reference for the im2col
/// path (and for odd shapes in tests). Accumulates per output in
/// `(ci, ki, kj)` order.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_fwd_direct<T: Element>(
    x: &[T],
    w: &[T],
    b: Option<&[T]>,
    cin: usize,
    h: usize,
    wd: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    hout: usize,
    wout: usize,
    ph: usize,
    pw: usize,
) -> Vec<T> {
    let mut out = vec![T::ZERO; cout * hout * wout];
    for co in 0..cout {
        let out_ch = &mut out[co * hout * wout..(co + 1) * hout * wout];
        if let Some(bias) = b {
            out_ch.fill(bias[co]);
        }
        for ci in 0..cin {
            let x_ch = &x[ci * h * wd..(ci + 1) * h * wd];
            for ki in 0..kh {
                let (i0, i1) = valid_range(hout, h, ki, ph);
                for kj in 0..kw {
                    let wv = w[((co * cin + ci) * kh + ki) * kw + kj];
                    let (j0, j1) = valid_range(wout, wd, kj, pw);
                    if j1 <= j0 {
                        continue;
                    }
                    for i in i0..i1 {
                        let src = &x_ch[(i + ki - ph) * wd + (j0 + kj - pw)..];
                        let dst = &mut out_ch[i * wout + j0..i * wout + j1];
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d += wv * *s;
                        }
                    }
                }
            }
        }
    }
    out
}

/// Lower the input to the `[cin*kh*kw, hout*wout]` patch matrix. Row `k`
/// corresponds to `(ci, ki, kj)` in that nesting order; out-of-bounds taps
/// stay zero.
#[allow(clippy::too_many_arguments)]
fn im2col<T: Element>(
    x: &[T],
    cin: usize,
    h: usize,
    wd: usize,
    kh: usize,
    kw: usize,
    hout: usize,
    wout: usize,
    ph: usize,
    pw: usize,
) -> Vec<T> {
    let n = hout * wout;
    let mut col = vec![T::ZERO; cin * kh * kw * n];
    for ci in 0..cin {
        let x_ch = &x[ci * h * wd..(ci + 1) * h * wd];
        for ki in 0..kh {
            let (i0, i1) = valid_range(hout, h, ki, ph);
            for kj in 0..kw {
                let (j0, j1) = valid_range(wout, wd, kj, pw);
                if j1 <= j0 {
                    continue;
                }
                let row = &mut col[((ci * kh + ki) * kw + kj) * n..((ci * kh + ki) * kw + kj + 1) * n];
                for i in i0..i1 {
                    let src = &x_ch[(i + ki - ph) * wd + (j0 + kj - pw)..];
                    let dst = &mut row[i * wout + j0..i * wout + j1];
                    dst.copy_from_slice(&src[..dst.len()]);
                }
            }
        }
    }
    col
}

/// Scatter-add a patch-matrix gradient back to input layout.
#[allow(clippy::too_many_arguments)]
fn col2im_add<T: Element>(
    col: &[T],
    cin: usize,
    h: usize,
    wd: usize,
    kh: usize,
    kw: usize,
    hout: usize,
    wout: usize,
    ph: usize,
    pw: usize,
) -> Vec<T> {
    let n = hout * wout;
    let mut dx = vec![T::ZERO; cin * h * wd];
    for ci in 0..cin {
        let dx_ch = &mut dx[ci * h * wd..(ci + 1) * h * wd];
        for ki in 0..kh {
            let (i0, i1) = valid_range(hout, h, ki, ph);
            for kj in 0..kw {
                let (j0, j1) = valid_range(wout, wd, kj, pw);
                if j1 <= j0 {
                    continue;
                }
                let row = &col[((ci * kh + ki) * kw + kj) * n..((ci * kh + ki) * kw + kj + 1) * n];
                for i in i0..i1 {
                    let src = &row[i * wout + j0..i * wout + j1];
                    let dst = &mut dx_ch[(i + ki - ph) * wd + (j0 + kj - pw)..];
                    for (d, s) in dst.iter_mut().zip(src) {
                        *d += *s;
                    }
                }
            }
        }
    }
    dx
}

#[allow(clippy::too_many_arguments)]
pub fn conv2d_fwd<T: Element>(
    x: &[T],
    w: &[T],
    b: Option<&[T]>,
    cin: usize,
    h: usize,
    wd: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    hout: usize,
    wout: usize,
    ph: usize,
    pw: usize,
) -> Vec<T> {
    let n = hout * wout;
    let k_total = cin * kh * kw;
    let col = im2col(x, cin, h, wd, kh, kw, hout, wout, ph, pw);
    let mut out = vec![T::ZERO; cout * n];
    for co in 0..cout {
        let out_ch = &mut out[co * n..(co + 1) * n];
        if let Some(bias) = b {
            out_ch.fill(bias[co]);
        }
        let w_row = &w[co * k_total..(co + 1) * k_total];
        for (k, &wv) in w_row.iter().enumerate() {
            if wv == T::ZERO {
                continue;
            }
            let col_row = &col[k * n..(k + 1) * n];
            for (d, s) in out_ch.iter_mut().zip(col_row) {
                *d += wv * *s;
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub fn conv2d_bwd<T: Element>(
    x: &[T],
    w: &[T],
    dy: &[T],
    cin: usize,
    h: usize,
    wd: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    hout: usize,
    wout: usize,
    ph: usize,
    pw: usize,
    need_dx: bool,
    need_dw: bool,
    need_db: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>, Option<Vec<T>>) {
    let n = hout * wout;
    let k_total = cin * kh * kw;

    let db = need_db.then(|| {
        (0..cout)
            .map(|co| dy[co * n..(co + 1) * n].iter().copied().sum())
            .collect()
    });
    if !need_dx && !need_dw {
        return (None, None, db);
    }

    let col = (need_dw).then(|| im2col(x, cin, h, wd, kh, kw, hout, wout, ph, pw));

    // dW[co, k] = <dy[co, :], col[k, :]>
    let dw = col.as_ref().map(|col| {
        let mut dw = vec![T::ZERO; cout * k_total];
        for co in 0..cout {
            let dy_ch = &dy[co * n..(co + 1) * n];
            let dw_row = &mut dw[co * k_total..(co + 1) * k_total];
            for (k, d) in dw_row.iter_mut().enumerate() {
                let col_row = &col[k * n..(k + 1) * n];
                let mut acc = T::ZERO;
                for (gv, sv) in dy_ch.iter().zip(col_row) {
                    acc += *gv * *sv;
                }
                *d = acc;
            }
        }
        dw
    });

    // dcol[k, :] = sum_co w[co, k] * dy[co, :], then scatter back to x layout.
    let dx = need_dx.then(|| {
        let mut dcol = vec![T::ZERO; k_total * n];
        for co in 0..cout {
            let dy_ch = &dy[co * n..(co + 1) * n];
            let w_row = &w[co * k_total..(co + 1) * k_total];
            for (k, &wv) in w_row.iter().enumerate() {
                if wv == T::ZERO {
                    continue;
                }
                let dcol_row = &mut dcol[k * n..(k + 1) * n];
                for (d, g) in dcol_row.iter_mut().zip(dy_ch) {
                    *d += wv * *g;
                }
            }
        }
        col2im_add(&dcol, cin, h, wd, kh, kw, hout, wout, ph, pw)
    });

    (dx, dw, db)
}

pub fn linear_fwd<T: Element>(x: &[T], w: &[T], b: Option<&[T]>, out: usize, inp: usize) -> Vec<T> {
    let mut y = vec![T::ZERO; out];
    for o in 0..out {
        let row = &w[o * inp..(o + 1) * inp];
        let mut acc = T::ZERO;
        for (wv, xv) in row.iter().zip(x) {
            acc += *wv * *xv;
        }
        y[o] = acc + b.map_or(T::ZERO, |b| b[o]);
    }
    y
}

pub fn linear_bwd<T: Element>(
    x: &[T],
    w: &[T],
    dy: &[T],
    out: usize,
    inp: usize,
    need_dx: bool,
    need_dw: bool,
    need_db: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>, Option<Vec<T>>) {
    let dx = need_dx.then(|| {
        let mut dx = vec![T::ZERO; inp];
        for o in 0..out {
            let g = dy[o];
            let row = &w[o * inp..(o + 1) * inp];
            for (d, wv) in dx.iter_mut().zip(row) {
                *d += g * *wv;
            }
        }
        dx
    });
    let dw = need_dw.then(|| {
        let mut dw = vec![T::ZERO; out * inp];
        for o in 0..out {
            let g = dy[o];
            let row = &mut dw[o * inp..(o + 1) * inp];
            for (d, xv) in row.iter_mut().zip(x) {
                *d = g * *xv;
            }
        }
        dw
    });
    let db = need_db.then(|| dy.to_vec());
    (dx, dw, db)
}

#[inline]
fn sigmoid<T: Element>(x: T) -> T {
    T::ONE / (T::ONE + (-x).exp())
}

pub fn silu_fwd<T: Element>(x: &[T]) -> Vec<T> {
    x.iter().map(|&v| v * sigmoid(v)).collect()
}

pub fn silu_bwd<T: Element>(x: &[T], dy: &[T]) -> Vec<T> {
    x.iter()
        .zip(dy)
        .map(|(&v, &g)| {
            let s = sigmoid(v);
            g * s * (T::ONE + v * (T::ONE - s))
        })
        .collect()
}

/// Group normalization over `[C, H, W]`; statistics are per group of
/// `C/groups` channels, biased variance. Returns `(y, mean, inv_std)` with
/// the per-group statistics saved for backward.
pub fn group_norm_fwd<T: Element>(
    x: &[T],
    c: usize,
    hw: usize,
    groups: usize,
    eps: f64,
    gamma: &[T],
    beta: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let cpg = c / groups;
    let m = cpg * hw;
    let mut y = vec![T::ZERO; c * hw];
    let mut means = Vec::with_capacity(groups);
    let mut inv_stds = Vec::with_capacity(groups);
    let m_t = T::from_f64(m as f64);
    for g in 0..groups {
        let xg = &x[g * cpg * hw..(g + 1) * cpg * hw];
        let mean = xg.iter().copied().sum::<T>() / m_t;
        let mut var = T::ZERO;
        for &v in xg {
            let d = v - mean;
            var += d * d;
        }
        var /= m_t;
        let inv_std = T::ONE / (var + T::from_f64(eps)).sqrt();
        for cl in 0..cpg {
            let ch = g * cpg + cl;
            let ga = gamma[ch];
            let be = beta[ch];
            let src = &x[ch * hw..(ch + 1) * hw];
            let dst = &mut y[ch * hw..(ch + 1) * hw];
            for (d, &v) in dst.iter_mut().zip(src) {
                *d = ga * ((v - mean) * inv_std) + be;
            }
        }
        means.push(mean);
        inv_stds.push(inv_std);
    }
    (y, means, inv_stds)
}

#[allow(clippy::too_many_arguments)]
pub fn group_norm_bwd<T: Element>(
    x: &[T],
    gamma: &[T],
    means: &[T],
    inv_stds: &[T],
    dy: &[T],
    c: usize,
    hw: usize,
    groups: usize,
    need_dx: bool,
    need_dgamma: bool,
    need_dbeta: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>, Option<Vec<T>>) {
    let cpg = c / groups;
    let m = cpg * hw;
    let m_t = T::from_f64(m as f64);
    let mut dx = need_dx.then(|| vec![T::ZERO; c * hw]);
    let mut dgamma = need_dgamma.then(|| vec![T::ZERO; c]);
    let mut dbeta = need_dbeta.then(|| vec![T::ZERO; c]);

    for g in 0..groups {
        let mean = means[g];
        let inv_std = inv_stds[g];
        // Per-group reductions of dxhat and dxhat * xhat.
        let mut s1 = T::ZERO;
        let mut s2 = T::ZERO;
        for cl in 0..cpg {
            let ch = g * cpg + cl;
            let ga = gamma[ch];
            let xs = &x[ch * hw..(ch + 1) * hw];
            let gys = &dy[ch * hw..(ch + 1) * hw];
            let mut db = T::ZERO;
            let mut dg = T::ZERO;
            for (&v, &gy) in xs.iter().zip(gys) {
                let xhat = (v - mean) * inv_std;
                let dxhat = gy * ga;
                s1 += dxhat;
                s2 += dxhat * xhat;
                db += gy;
                dg += gy * xhat;
            }
            if let Some(dbeta) = dbeta.as_mut() {
                dbeta[ch] = db;
            }
            if let Some(dgamma) = dgamma.as_mut() {
                dgamma[ch] = dg;
            }
        }
        if let Some(dx) = dx.as_mut() {
            let c1 = s1 / m_t;
            let c2 = s2 / m_t;
            for cl in 0..cpg {
                let ch = g * cpg + cl;
                let ga = gamma[ch];
                let xs = &x[ch * hw..(ch + 1) * hw];
                let gys = &dy[ch * hw..(ch + 1) * hw];
                let dst = &mut dx[ch * hw..(ch + 1) * hw];
                for ((d, &v), &gy) in dst.iter_mut().zip(xs).zip(gys) {
                    let xhat = (v - mean) * inv_std;
                    *d = inv_std * (gy * ga - c1 - xhat * c2);
                }
            }
        }
    }
    (dx, dgamma, dbeta)
}

pub fn upsample2x_fwd<T: Element>(x: &[T], c: usize, h: usize, w: usize) -> Vec<T> {
    let (h2, w2) = (2 * h, 2 * w);
    let mut y = vec![T::ZERO; c * h2 * w2];
    for ch in 0..c {
        for i in 0..h {
            let src = &x[ch * h * w + i * w..ch * h * w + (i + 1) * w];
            for di in 0..2 {
                let row = &mut y[ch * h2 * w2 + (2 * i + di) * w2..ch * h2 * w2 + (2 * i + di + 1) * w2];
                for (j, &v) in src.iter().enumerate() {
                    row[2 * j] = v;
                    row[2 * j + 1] = v;
                }
            }
        }
    }
    y
}

pub fn upsample2x_bwd<T: Element>(dy: &[T], c: usize, h: usize, w: usize) -> Vec<T> {
    let (h2, w2) = (2 * h, 2 * w);
    let mut dx = vec![T::ZERO; c * h * w];
    for ch in 0..c {
        for i in 0..h {
            let dst = &mut dx[ch * h * w + i * w..ch * h * w + (i + 1) * w];
            for di in 0..2 {
                let row = &dy[ch * h2 * w2 + (2 * i + di) * w2..ch * h2 * w2 + (2 * i + di + 1) * w2];
                for (j, d) in dst.iter_mut().enumerate() {
                    *d += row[2 * j] + row[2 * j + 1];
                }
            }
        }
    }
    dx
}

pub fn avgpool2x_fwd<T: Element>(x: &[T], c: usize, h: usize, w: usize) -> Vec<T> {
    let (ho, wo) = (h / 2, w / 2);
    let quarter = T::from_f64(0.25);
    let mut y = vec![T::ZERO; c * ho * wo];
    for ch in 0..c {
        for i in 0..ho {
            let r0 = &x[ch * h * w + (2 * i) * w..ch * h * w + (2 * i + 1) * w];
            let r1 = &x[ch * h * w + (2 * i + 1) * w..ch * h * w + (2 * i + 2) * w];
            let dst = &mut y[ch * ho * wo + i * wo..ch * ho * wo + (i + 1) * wo];
            for (j, d) in dst.iter_mut().enumerate() {
                *d = (r0[2 * j] + r0[2 * j + 1] + r1[2 * j] + r1[2 * j + 1]) * quarter;
            }
        }
    }
    y
}

pub fn avgpool2x_bwd<T: Element>(dy: &[T], c: usize, h: usize, w: usize) -> Vec<T> {
    let (ho, wo) = (h / 2, w / 2);
    let quarter = T::from_f64(0.25);
    let mut dx = vec![T::ZERO; c * h * w];
    for ch in 0..c {
        for i in 0..ho {
            let src = &dy[ch * ho * wo + i * wo..ch * ho * wo + (i + 1) * wo];
            for (j, &g) in src.iter().enumerate() {
                let v = g * quarter;
                let base = ch * h * w;
                dx[base + (2 * i) * w + 2 * j] += v;
                dx[base + (2 * i) * w + 2 * j + 1] += v;
                dx[base + (2 * i + 1) * w + 2 * j] += v;
                dx[base + (2 * i + 1) * w + 2 * j + 1] += v;
            }
        }
    }
    dx
}

/// Sinusoidal features of `0.25 * ln(t)` at geometrically spaced frequencies:
/// first `dim/2` entries are sines, the rest cosines. Computed in f64 and
/// narrowed so every element type sees the same values.
pub fn time_embed_values<T: Element>(t: f64, dim: usize) -> Vec<T> {
    let half = dim / 2;
    let u = 0.25 * t.ln();
    let mut out = Vec::with_capacity(dim);
    for i in 0..half {
        let freq = if half > 1 {
            (-(10000f64.ln()) * i as f64 / (half as f64 - 1.0)).exp()
        } else {
            1.0
        };
        out.push(T::from_f64((u * freq).sin()));
    }
    for i in 0..half {
        let freq = if half > 1 {
            (-(10000f64.ln()) * i as f64 / (half as f64 - 1.0)).exp()
        } else {
            1.0
        };
        out.push(T::from_f64((u * freq).cos()));
    }
    out
}
