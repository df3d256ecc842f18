//! Raw numeric kernels shared by forward and backward rules.
//!
//! Everything here works on flat row-major slices; shapes are validated by
//! the caller.

/// `c[m×n] = a[m×k] · b[k×n]`
pub fn matmul_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    matmul_nn_acc(a, b, &mut c, m, k, n);
    c
}

pub fn matmul_nn_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    if n < THIN && k >= THIN {
        // thin output: contiguous dots against the transposed right factor
        let bt = transpose(b, k, n);
        for i in 0..m {
            let arow = &a[i * k..(i + 1) * k];
            for j in 0..n {
                c[i * n + j] += dot(arow, &bt[j * k..(j + 1) * k]);
            }
        }
        return;
    }
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for (p, &aip) in arow.iter().enumerate() {
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += aip * bv;
            }
        }
    }
}

/// Extent below which a loop is too short to vectorize and the kernels
/// switch to a transposed layout.
const THIN: usize = 8;

/// `[r×c] -> [c×r]`
pub fn transpose(x: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = x[i * c + j];
        }
    }
    out
}

/// `c[m×n] = a[m×k] · b[n×k]ᵀ`
pub fn matmul_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    if k < THIN && n >= THIN {
        return matmul_nn(a, &transpose(b, n, k), m, k, n);
    }
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            c[i * n + j] = dot(arow, brow);
        }
    }
    c
}

/// `c[m×n] = a[k×m]ᵀ · b[k×n]`
pub fn matmul_tn(a: &[f64], b: &[f64], k: usize, m: usize, n: usize) -> Vec<f64> {
    if n < THIN && k >= THIN {
        let (at, bt) = (transpose(a, k, m), transpose(b, k, n));
        return matmul_nt(&at, &bt, m, k, n);
    }
    let mut c = vec![0.0; m * n];
    for p in 0..k {
        let arow = &a[p * m..(p + 1) * m];
        let brow = &b[p * n..(p + 1) * n];
        for (i, &api) in arow.iter().enumerate() {
            if api == 0.0 {
                continue;
            }
            let crow = &mut c[i * n..(i + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += api * bv;
            }
        }
    }
    c
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    // Four independent accumulators let the compiler vectorize; the
    // summation order is fixed so results stay deterministic.
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let i = c * 4;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in chunks * 4..a.len() {
        s += a[i] * b[i];
    }
    s
}

/// Softmax along the middle extent of an (outer, len, inner) view.
pub fn softmax(x: &[f64], outer: usize, len: usize, inner: usize) -> Vec<f64> {
    let mut y = vec![0.0; x.len()];
    if inner == 1 {
        for (xr, yr) in x.chunks(len).zip(y.chunks_mut(len)) {
            let max = xr.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for (yv, &xv) in yr.iter_mut().zip(xr) {
                *yv = (xv - max).exp();
                sum += *yv;
            }
            let inv = 1.0 / sum;
            for yv in yr.iter_mut() {
                *yv *= inv;
            }
        }
        return y;
    }
    for o in 0..outer {
        for j in 0..inner {
            let at = |i: usize| (o * len + i) * inner + j;
            let mut max = f64::NEG_INFINITY;
            for i in 0..len {
                max = max.max(x[at(i)]);
            }
            let mut sum = 0.0;
            for i in 0..len {
                let e = (x[at(i)] - max).exp();
                y[at(i)] = e;
                sum += e;
            }
            let inv = 1.0 / sum;
            for i in 0..len {
                y[at(i)] *= inv;
            }
        }
    }
    y
}

pub fn log_softmax(x: &[f64], outer: usize, len: usize, inner: usize) -> Vec<f64> {
    let mut y = vec![0.0; x.len()];
    for o in 0..outer {
        for j in 0..inner {
            let at = |i: usize| (o * len + i) * inner + j;
            let mut max = f64::NEG_INFINITY;
            for i in 0..len {
                max = max.max(x[at(i)]);
            }
            let mut sum = 0.0;
            for i in 0..len {
                sum += (x[at(i)] - max).exp();
            }
            let lse = max + sum.ln();
            for i in 0..len {
                y[at(i)] = x[at(i)] - lse;
            }
        }
    }
    y
}

/// `dx = y ⊙ (dy − Σ dy⊙y)` along the softmax axis.
pub fn softmax_backward(y: &[f64], dy: &[f64], outer: usize, len: usize, inner: usize) -> Vec<f64> {
    let mut dx = vec![0.0; y.len()];
    if inner == 1 {
        for ((yr, gr), dr) in y.chunks(len).zip(dy.chunks(len)).zip(dx.chunks_mut(len)) {
            let s = dot(gr, yr);
            for ((d, &yv), &gv) in dr.iter_mut().zip(yr).zip(gr) {
                *d = yv * (gv - s);
            }
        }
        return dx;
    }
    for o in 0..outer {
        for j in 0..inner {
            let at = |i: usize| (o * len + i) * inner + j;
            let mut s = 0.0;
            for i in 0..len {
                s += dy[at(i)] * y[at(i)];
            }
            for i in 0..len {
                dx[at(i)] = y[at(i)] * (dy[at(i)] - s);
            }
        }
    }
    dx
}

/// `dx = dy − softmax ⊙ Σ dy` along the axis, with softmax recovered from
/// the saved log-probabilities.
pub fn log_softmax_backward(
    logp: &[f64],
    dy: &[f64],
    outer: usize,
    len: usize,
    inner: usize,
) -> Vec<f64> {
    let mut dx = vec![0.0; logp.len()];
    for o in 0..outer {
        for j in 0..inner {
            let at = |i: usize| (o * len + i) * inner + j;
            let mut s = 0.0;
            for i in 0..len {
                s += dy[at(i)];
            }
            for i in 0..len {
                dx[at(i)] = dy[at(i)] - logp[at(i)].exp() * s;
            }
        }
    }
    dx
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Normalizes each row of length `d`; returns (y, xhat, rstd).
pub fn layer_norm(
    x: &[f64],
    gain: &[f64],
    bias: &[f64],
    d: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let rows = x.len() / d;
    let mut y = vec![0.0; x.len()];
    let mut xhat = vec![0.0; x.len()];
    let mut rstd = vec![0.0; rows];
    let inv_d = 1.0 / d as f64;
    for r in 0..rows {
        let xr = &x[r * d..(r + 1) * d];
        let mean = xr.iter().sum::<f64>() * inv_d;
        let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() * inv_d;
        let rs = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        rstd[r] = rs;
        for c in 0..d {
            let h = (xr[c] - mean) * rs;
            xhat[r * d + c] = h;
            y[r * d + c] = h * gain[c] + bias[c];
        }
    }
    (y, xhat, rstd)
}

/// Returns (dx, dgain, dbias).
pub fn layer_norm_backward(
    xhat: &[f64],
    rstd: &[f64],
    gain: &[f64],
    dy: &[f64],
    d: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let rows = xhat.len() / d;
    let mut dx = vec![0.0; xhat.len()];
    let mut dg = vec![0.0; d];
    let mut db = vec![0.0; d];
    let inv_d = 1.0 / d as f64;
    for r in 0..rows {
        let base = r * d;
        let mut mean_dh = 0.0;
        let mut mean_dh_h = 0.0;
        for c in 0..d {
            let g = dy[base + c];
            dg[c] += g * xhat[base + c];
            db[c] += g;
            let dh = g * gain[c];
            mean_dh += dh;
            mean_dh_h += dh * xhat[base + c];
        }
        mean_dh *= inv_d;
        mean_dh_h *= inv_d;
        for c in 0..d {
            let dh = dy[base + c] * gain[c];
            dx[base + c] = rstd[r] * (dh - mean_dh - xhat[base + c] * mean_dh_h);
        }
    }
    (dx, dg, db)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh approximation of GELU.
#[inline]
pub fn gelu(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

#[inline]
pub fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

/// Calls `f(linear_index, offset)` for every element of `shape` in row-major
/// order, where `offset` advances by `strides`.
pub fn for_each_offset(shape: &[usize], strides: &[usize], mut f: impl FnMut(usize, usize)) {
    let rank = shape.len();
    if rank == 0 {
        f(0, 0);
        return;
    }
    let total: usize = shape.iter().product();
    let last = shape[rank - 1];
    let last_stride = strides[rank - 1];
    let mut counter = vec![0usize; rank];
    let mut base = 0usize;
    let mut linear = 0usize;
    while linear < total {
        let mut off = base;
        for _ in 0..last {
            f(linear, off);
            linear += 1;
            off += last_stride;
        }
        // carry into the leading axes
        let mut axis = rank - 1;
        loop {
            if axis == 0 {
                return;
            }
            axis -= 1;
            counter[axis] += 1;
            base += strides[axis];
            if counter[axis] < shape[axis] {
                break;
            }
            base -= strides[axis] * shape[axis];
            counter[axis] = 0;
        }
    }
}

/// Transposes axes according to `perm`; returns the output shape and data.
pub fn permute(x: &[f64], shape: &[usize], perm: &[usize]) -> (Vec<usize>, Vec<f64>) {
    let in_strides = crate::tensor::strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = vec![0.0; x.len()];
    for_each_offset(&out_shape, &src_strides, |i, off| out[i] = x[off]);
    (out_shape, out)
}

/// Sums `x` over `axes`, keeping reduced axes with extent 1.
pub fn reduce_sum(x: &[f64], shape: &[usize], axes: &[usize]) -> (Vec<usize>, Vec<f64>) {
    let mut out_shape = shape.to_vec();
    for &a in axes {
        out_shape[a] = 1;
    }
    let out_strides = crate::tensor::strides(&out_shape);
    let dst_strides: Vec<usize> = (0..shape.len())
        .map(|a| if axes.contains(&a) { 0 } else { out_strides[a] })
        .collect();
    let mut out = vec![0.0; crate::tensor::numel(&out_shape)];
    for_each_offset(shape, &dst_strides, |i, off| out[off] += x[i]);
    (out_shape, out)
}

/// Expands size-1 axes of `shape` to `target`.
pub fn broadcast(x: &[f64], shape: &[usize], target: &[usize]) -> Vec<f64> {
    let in_strides = crate::tensor::strides(shape);
    let src_strides: Vec<usize> = (0..shape.len())
        .map(|a| if shape[a] == 1 && target[a] != 1 { 0 } else { in_strides[a] })
        .collect();
    let mut out = vec![0.0; crate::tensor::numel(target)];
    for_each_offset(target, &src_strides, |i, off| out[i] = x[off]);
    out
}
