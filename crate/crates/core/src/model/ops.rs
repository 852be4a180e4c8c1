//! Dense f32 kernels over row-major slices.

/// Strided read-only matrix view.
#[derive(Clone, Copy)]
pub(crate) struct View<'a> {
    pub data: &'a [f32],
    pub offset: usize,
    pub rs: usize,
    pub cs: usize,
}

impl<'a> View<'a> {
    pub fn rows(data: &'a [f32], cols: usize) -> Self {
        Self { data, offset: 0, rs: cols, cs: 1 }
    }

    /// Transpose of a row-major matrix with `cols` columns.
    pub fn transposed(data: &'a [f32], cols: usize) -> Self {
        Self { data, offset: 0, rs: 1, cs: cols }
    }

    fn check(&self, m: usize, n: usize) {
        if m > 0 && n > 0 {
            let last = self.offset + (m - 1) * self.rs + (n - 1) * self.cs;
            assert!(last < self.data.len(), "view out of bounds");
        }
    }
}

/// Strided mutable matrix view.
pub(crate) struct ViewMut<'a> {
    pub data: &'a mut [f32],
    pub offset: usize,
    pub rs: usize,
    pub cs: usize,
}

impl<'a> ViewMut<'a> {
    pub fn rows(data: &'a mut [f32], cols: usize) -> Self {
        Self { data, offset: 0, rs: cols, cs: 1 }
    }
}

/// `C = A (m x k) * B (k x n) + beta * C`.
pub(crate) fn gemm(m: usize, k: usize, n: usize, a: View, b: View, beta: f32, c: ViewMut) {
    if m == 0 || n == 0 {
        return;
    }
    let lastc = c.offset + (m - 1) * c.rs + (n - 1) * c.cs;
    assert!(lastc < c.data.len(), "output view out of bounds");
    if k == 0 {
        for i in 0..m {
            for j in 0..n {
                let v = &mut c.data[c.offset + i * c.rs + j * c.cs];
                *v *= beta;
            }
        }
        return;
    }
    a.check(m, k);
    b.check(k, n);
    // SAFETY: all three views were bounds-checked for the requested shapes above.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr().add(a.offset),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr().add(b.offset),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.data.as_mut_ptr().add(c.offset),
            c.rs as isize,
            c.cs as isize,
        );
    }
}

/// `y = x W + b` for `x: rows x din`, `W: din x dout`.
pub(crate) fn linear(x: &[f32], rows: usize, w: &[f32], b: &[f32], din: usize, dout: usize) -> Vec<f32> {
    let mut y = Vec::with_capacity(rows * dout);
    for _ in 0..rows {
        y.extend_from_slice(b);
    }
    gemm(rows, din, dout, View::rows(x, din), View::rows(w, dout), 1.0, ViewMut::rows(&mut y, dout));
    y
}

/// Backward of [`linear`]: accumulates `dW`, `db` and returns `dx`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn linear_backward(
    x: &[f32],
    dy: &[f32],
    rows: usize,
    w: &[f32],
    dw: &mut [f32],
    db: &mut [f32],
    din: usize,
    dout: usize,
) -> Vec<f32> {
    gemm(din, rows, dout, View::transposed(x, din), View::rows(dy, dout), 1.0, ViewMut::rows(dw, dout));
    for row in dy.chunks_exact(dout) {
        for (acc, g) in db.iter_mut().zip(row) {
            *acc += g;
        }
    }
    let mut dx = vec![0.0; rows * din];
    gemm(rows, dout, din, View::rows(dy, dout), View::transposed(w, dout), 0.0, ViewMut::rows(&mut dx, din));
    dx
}

pub(crate) const LN_EPS: f32 = 1e-5;

pub(crate) struct NormCache {
    pub xhat: Vec<f32>,
    pub rstd: Vec<f32>,
}

pub(crate) fn layer_norm(x: &[f32], d: usize, gain: &[f32], bias: &[f32]) -> (Vec<f32>, NormCache) {
    let rows = x.len() / d;
    let mut y = vec![0.0; x.len()];
    let mut xhat = vec![0.0; x.len()];
    let mut rstd = Vec::with_capacity(rows);
    for r in 0..rows {
        let row = &x[r * d..(r + 1) * d];
        let mean = row.iter().sum::<f32>() / d as f32;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / d as f32;
        let rs = 1.0 / (var + LN_EPS).sqrt();
        rstd.push(rs);
        for i in 0..d {
            let xh = (row[i] - mean) * rs;
            xhat[r * d + i] = xh;
            y[r * d + i] = xh * gain[i] + bias[i];
        }
    }
    (y, NormCache { xhat, rstd })
}

pub(crate) fn layer_norm_backward(
    cache: &NormCache,
    dy: &[f32],
    d: usize,
    gain: &[f32],
    dgain: &mut [f32],
    dbias: &mut [f32],
) -> Vec<f32> {
    let mut dx = vec![0.0; dy.len()];
    let mut dxhat = vec![0.0; d];
    for (r, &rs) in cache.rstd.iter().enumerate() {
        let xh = &cache.xhat[r * d..(r + 1) * d];
        let g = &dy[r * d..(r + 1) * d];
        for i in 0..d {
            dgain[i] += g[i] * xh[i];
            dbias[i] += g[i];
            dxhat[i] = g[i] * gain[i];
        }
        let mean_dxhat = dxhat.iter().sum::<f32>() / d as f32;
        let mean_dxhat_xhat = dxhat.iter().zip(xh).map(|(a, b)| a * b).sum::<f32>() / d as f32;
        for i in 0..d {
            dx[r * d + i] = rs * (dxhat[i] - mean_dxhat - xh[i] * mean_dxhat_xhat);
        }
    }
    dx
}

/// `exp(x)` within a few ulp, written without branches or libm calls so the
/// softmax loops vectorize. Inputs below -87 give 0.
#[inline(always)]
pub(crate) fn fast_exp(x: f32) -> f32 {
    const ROUND: f32 = 12_582_912.0; // 1.5 * 2^23
    let xc = x.clamp(-87.0, 88.0);
    let n = (xc * std::f32::consts::LOG2_E + ROUND) - ROUND;
    let r = xc - n * 0.693_359_4 + n * 2.121_944_4e-4;
    let mut p = 1.987_569_1e-4;
    p = p * r + 1.398_199_9e-3;
    p = p * r + 8.333_452e-3;
    p = p * r + 4.166_579_6e-2;
    p = p * r + 1.666_666_5e-1;
    p = p * r + 0.5;
    let y = p * r * r + r + 1.0;
    let scale = f32::from_bits(((n as i32 + 127) as u32) << 23);
    if x < -87.0 {
        0.0
    } else {
        y * scale
    }
}

pub(crate) fn softmax_in_place(row: &mut [f32]) {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    for v in row.iter_mut() {
        *v = fast_exp(*v - max);
    }
    let inv = 1.0 / row.iter().sum::<f32>();
    for v in row.iter_mut() {
        *v *= inv;
    }
}

pub(crate) fn log_softmax_in_place(row: &mut [f32]) {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let lse = row.iter().map(|v| fast_exp(v - max)).sum::<f32>().ln() + max;
    for v in row.iter_mut() {
        *v -= lse;
    }
}

pub(crate) fn add_in_place(acc: &mut [f32], x: &[f32]) {
    for (a, b) in acc.iter_mut().zip(x) {
        *a += b;
    }
}
