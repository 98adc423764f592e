//! Scalar and row kernels shared by the autodiff graph and the integer
//! engine's float islands. Both paths must call the same code so that island
//! outputs agree bit for bit when fed identical inputs.

/// Round half to even. Used everywhere a real value becomes an integer code.
#[inline]
pub fn round_half_even(x: f64) -> f64 {
    // Adding 2^52 leaves no fractional bits, so the addition itself rounds
    // to nearest, ties to even. Magnitudes from 2^52 up are integers.
    const TWO52: f64 = 4_503_599_627_370_496.0;
    let a = x.abs();
    if a < TWO52 {
        ((a + TWO52) - TWO52).copysign(x)
    } else {
        x
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

#[inline]
pub fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Tanh approximation of GELU.
#[inline]
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

#[inline]
pub fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

/// Writes `rmsnorm(x) * w` for one row and returns the inverse RMS.
pub fn rmsnorm_row(x: &[f64], w: &[f64], eps: f64, out: &mut [f64]) -> f64 {
    let n = x.len() as f64;
    let ms = x.iter().map(|v| v * v).sum::<f64>() / n;
    let inv = 1.0 / (ms + eps).sqrt();
    for ((o, &xi), &wi) in out.iter_mut().zip(x).zip(w) {
        *o = xi * inv * wi;
    }
    inv
}

/// Backward of [`rmsnorm_row`]: accumulates into `dx` and `dw`.
pub fn rmsnorm_row_backward(
    x: &[f64],
    w: &[f64],
    inv: f64,
    g: &[f64],
    dx: Option<&mut [f64]>,
    dw: Option<&mut [f64]>,
) {
    let n = x.len() as f64;
    if let Some(dx) = dx {
        let dot: f64 = x.iter().zip(w).zip(g).map(|((xi, wi), gi)| xi * wi * gi).sum();
        let k = inv * inv * inv * dot / n;
        for i in 0..x.len() {
            dx[i] += inv * w[i] * g[i] - x[i] * k;
        }
    }
    if let Some(dw) = dw {
        for i in 0..x.len() {
            dw[i] += g[i] * x[i] * inv;
        }
    }
}

/// In-place softmax over the first `valid` entries of a row; the remainder
/// is set to zero.
pub fn softmax_row(row: &mut [f64], valid: usize) {
    let m = row[..valid].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for v in row[..valid].iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    for v in row[..valid].iter_mut() {
        *v /= s;
    }
    for v in row[valid..].iter_mut() {
        *v = 0.0;
    }
}

/// Rotary position embedding angles for one position, as `(cos, sin)` pairs
/// for each of the `head_dim / 2` rotation planes.
pub fn rope_angles(pos: usize, head_dim: usize, base: f64) -> Vec<(f64, f64)> {
    (0..head_dim / 2)
        .map(|i| {
            let freq = base.powf(-(2.0 * i as f64) / head_dim as f64);
            let a = pos as f64 * freq;
            (a.cos(), a.sin())
        })
        .collect()
}

/// Rotates interleaved pairs `(2i, 2i+1)` of one head vector in place.
pub fn rope_apply(v: &mut [f64], angles: &[(f64, f64)]) {
    for (i, &(c, s)) in angles.iter().enumerate() {
        let (a, b) = (v[2 * i], v[2 * i + 1]);
        v[2 * i] = a * c - b * s;
        v[2 * i + 1] = a * s + b * c;
    }
}

/// Transposed rotation, the backward of [`rope_apply`].
pub fn rope_apply_inverse(v: &mut [f64], angles: &[(f64, f64)]) {
    for (i, &(c, s)) in angles.iter().enumerate() {
        let (a, b) = (v[2 * i], v[2 * i + 1]);
        v[2 * i] = a * c + b * s;
        v[2 * i + 1] = -a * s + b * c;
    }
}

/// `c = a·b (+ c if accumulate)` for row-major `a: [m,k]`, `b: [k,n]`, with
/// optional transposition of either operand's storage.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: lengths were checked above and the strides describe exactly the
    // row-major (or transposed) layouts of those buffers.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}
