//! Dense kernels on row-major `f64` buffers.

/// `C = alpha * op(A) * op(B) + beta * C` where `C` is `m × n` and the inner
/// dimension is `k`. `A` is stored `m × k` (or `k × m` when `ta`), `B` is
/// stored `k × n` (or `n × k` when `tb`). All buffers are contiguous
/// row-major.
#[allow(clippy::too_many_arguments)]
pub fn gemm(m: usize, k: usize, n: usize, alpha: f64, a: &[f64], ta: bool, b: &[f64], tb: bool, beta: f64, c: &mut [f64]) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    gemm_strided(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, n as isize, 1);
}

/// General strided form; used for per-head views into wider matrices.
#[allow(clippy::too_many_arguments)]
pub fn gemm_strided(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    rsa: isize,
    csa: isize,
    b: &[f64],
    rsb: isize,
    csb: isize,
    beta: f64,
    c: &mut [f64],
    rsc: isize,
    csc: isize,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for i in 0..m {
            for j in 0..n {
                let idx = i as isize * rsc + j as isize * csc;
                let v = &mut c[idx as usize];
                *v = if beta == 0.0 { 0.0 } else { beta * *v };
            }
        }
        return;
    }
    // Bounds: the largest offset touched in each buffer must be in range.
    let last = |r: usize, cl: usize, rs: isize, cs: isize| (r as isize - 1) * rs + (cl as isize - 1) * cs;
    assert!((last(m, k, rsa, csa) as usize) < a.len());
    assert!((last(k, n, rsb, csb) as usize) < b.len());
    assert!((last(m, n, rsc, csc) as usize) < c.len());
    // SAFETY: the asserts above bound every element the kernel reads or
    // writes; all strides are non-negative.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            rsc,
            csc,
        );
    }
}

pub const LN_EPS: f64 = 1e-5;

/// Row-wise layer norm. Returns `(y, xhat, inv_std)`.
pub fn layer_norm(x: &[f64], d: usize, gain: &[f64], bias: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let rows = x.len() / d;
    let mut y = vec![0.0; x.len()];
    let mut xhat = vec![0.0; x.len()];
    let mut inv = vec![0.0; rows];
    for r in 0..rows {
        let row = &x[r * d..(r + 1) * d];
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let is = 1.0 / (var + LN_EPS).sqrt();
        inv[r] = is;
        for j in 0..d {
            let h = (row[j] - mean) * is;
            xhat[r * d + j] = h;
            y[r * d + j] = h * gain[j] + bias[j];
        }
    }
    (y, xhat, inv)
}

/// Backward of [`layer_norm`]; accumulates parameter grads and returns `dx`.
pub fn layer_norm_backward(
    dy: &[f64],
    xhat: &[f64],
    inv: &[f64],
    d: usize,
    gain: &[f64],
    dgain: &mut [f64],
    dbias: &mut [f64],
) -> Vec<f64> {
    let rows = dy.len() / d;
    let mut dx = vec![0.0; dy.len()];
    let mut g = vec![0.0; d];
    for r in 0..rows {
        let dyr = &dy[r * d..(r + 1) * d];
        let xr = &xhat[r * d..(r + 1) * d];
        let mut mean_g = 0.0;
        let mut mean_gx = 0.0;
        for j in 0..d {
            dgain[j] += dyr[j] * xr[j];
            dbias[j] += dyr[j];
            g[j] = dyr[j] * gain[j];
            mean_g += g[j];
            mean_gx += g[j] * xr[j];
        }
        mean_g /= d as f64;
        mean_gx /= d as f64;
        for j in 0..d {
            dx[r * d + j] = inv[r] * (g[j] - mean_g - xr[j] * mean_gx);
        }
    }
    dx
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Tanh approximation of GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

pub fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

/// In-place log-softmax of one row; returns log-sum-exp.
pub fn log_softmax_in_place(row: &mut [f64]) -> f64 {
    let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let sum: f64 = row.iter().map(|&v| (v - max).exp()).sum();
    let lse = max + sum.ln();
    row.iter_mut().for_each(|v| *v -= lse);
    lse
}

/// In-place softmax over the first `len` entries of `row`; entries beyond
/// `len` are set to zero.
pub fn softmax_prefix(row: &mut [f64], len: usize) {
    let max = row[..len].iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let mut sum = 0.0;
    for v in row[..len].iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    let inv = 1.0 / sum;
    row[..len].iter_mut().for_each(|v| *v *= inv);
    row[len..].iter_mut().for_each(|v| *v = 0.0);
}

pub fn add_in_place(a: &mut [f64], b: &[f64]) {
    for (x, y) in a.iter_mut().zip(b) {
        *x += y;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(m: usize, k: usize, n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                c[i * n + j] = (0..k).map(|l| a[i * k + l] * b[l * n + j]).sum();
            }
        }
        c
    }

    fn transpose(x: &[f64], r: usize, c: usize) -> Vec<f64> {
        let mut t = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                t[j * r + i] = x[i * c + j];
            }
        }
        t
    }

    #[test]
    fn gemm_matches_naive_in_all_layouts() {
        let (m, k, n) = (5, 7, 3);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.11).cos()).collect();
        let want = naive(m, k, n, &a, &b);
        let at = transpose(&a, m, k);
        let bt = transpose(&b, k, n);
        for (aa, ta, bb, tb) in [(&a, false, &b, false), (&at, true, &b, false), (&a, false, &bt, true), (&at, true, &bt, true)] {
            let mut c = vec![1.0; m * n];
            gemm(m, k, n, 1.0, aa, ta, bb, tb, 0.0, &mut c);
            for (x, y) in c.iter().zip(&want) {
                assert!((x - y).abs() < 1e-12);
            }
        }
        let mut c = vec![1.0; m * n];
        gemm(m, k, n, 2.0, &a, false, &b, false, 1.0, &mut c);
        for (x, y) in c.iter().zip(&want) {
            assert!((x - (1.0 + 2.0 * y)).abs() < 1e-12);
        }
    }

    #[test]
    fn activation_grads() {
        for &x in &[-3.0, -0.5, 0.0, 0.7, 2.5] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
            let fd = (silu(x + h) - silu(x - h)) / (2.0 * h);
            assert!((fd - silu_grad(x)).abs() < 1e-8);
        }
    }

    #[test]
    fn softmax_rows() {
        let mut r = vec![1.0, 2.0, 3.0, 100.0];
        softmax_prefix(&mut r, 3);
        assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert_eq!(r[3], 0.0);
        let mut l = vec![0.0; 4];
        let lse = log_softmax_in_place(&mut l);
        assert!((lse - 4f64.ln()).abs() < 1e-15);
    }
}
