//! Low-level numeric kernels.
//!
//! Plain model evaluation and the reverse-mode tape both call these
//! functions, so a primal value computed on the tape is bit-identical to the
//! one computed without it.

/// Lorenz-96 tendency over `out.len() / n` independent rings of length `n`:
/// `x[i-1] * (x[i+1] - x[i-2]) - x[i] + forcing`.
pub fn l96(x: &[f64], n: usize, forcing: f64, out: &mut [f64]) {
    debug_assert!(n >= 4 && x.len() == out.len() && x.len().is_multiple_of(n));
    for (xr, or) in x.chunks_exact(n).zip(out.chunks_exact_mut(n)) {
        or[0] = xr[n - 1] * (xr[1] - xr[n - 2]) - xr[0] + forcing;
        or[1] = xr[0] * (xr[2] - xr[n - 1]) - xr[1] + forcing;
        for i in 2..n - 1 {
            or[i] = xr[i - 1] * (xr[i + 1] - xr[i - 2]) - xr[i] + forcing;
        }
        or[n - 1] = xr[n - 2] * (xr[0] - xr[n - 3]) - xr[n - 1] + forcing;
    }
}

/// Adjoint of [`l96`]: accumulates `J^T g` into `gx`.
pub fn l96_adjoint(x: &[f64], n: usize, g: &[f64], gx: &mut [f64]) {
    for ((xr, gr), ar) in x
        .chunks_exact(n)
        .zip(g.chunks_exact(n))
        .zip(gx.chunks_exact_mut(n))
    {
        for i in 0..n {
            let im1 = (i + n - 1) % n;
            let ip1 = (i + 1) % n;
            let im2 = (i + n - 2) % n;
            let gi = gr[i];
            ar[im1] += gi * (xr[ip1] - xr[im2]);
            ar[ip1] += gi * xr[im1];
            ar[im2] -= gi * xr[im1];
            ar[i] -= gi;
        }
    }
}

/// Coefficients of the two-scale (L05III) tendency, with the fast-to-slow
/// ownership map precomputed.
#[derive(Debug, Clone, PartialEq)]
pub struct TwoScaleCoeffs {
    pub nx: usize,
    pub nu: usize,
    pub forcing: f64,
    /// h * c / b
    pub coupling: f64,
    /// c / b
    pub time_ratio: f64,
    pub space_ratio: f64,
    /// b * b
    pub space_ratio_sq: f64,
    /// owner[m] = index of the slow variable driving fast variable m.
    pub owner: Vec<usize>,
}

impl TwoScaleCoeffs {
    pub fn new(nx: usize, nu: usize, forcing: f64, h: f64, c: f64, b: f64) -> Self {
        // 1-based x_{1 + (m-1) div N_u} for m = 1..N_x N_u becomes m0 / N_u.
        let owner = (0..nx * nu).map(|m| m / nu).collect();
        Self {
            nx,
            nu,
            forcing,
            coupling: h * c / b,
            time_ratio: c / b,
            space_ratio: b,
            space_ratio_sq: b * b,
            owner,
        }
    }

    pub fn dim(&self) -> usize {
        self.nx * (1 + self.nu)
    }
}

/// Two-scale tendency on the concatenated state `[x; u]`.
pub fn two_scale(c: &TwoScaleCoeffs, s: &[f64], out: &mut [f64]) {
    let (nx, nu) = (c.nx, c.nu);
    let (x, u) = s.split_at(nx);
    let (dx, du) = out.split_at_mut(nx);
    let m = nx * nu;
    for n in 0..nx {
        let im1 = (n + nx - 1) % nx;
        let ip1 = (n + 1) % nx;
        let im2 = (n + nx - 2) % nx;
        let mut sum = 0.0;
        for &v in &u[n * nu..(n + 1) * nu] {
            sum += v;
        }
        dx[n] = x[im1] * (x[ip1] - x[im2]) - x[n] + c.forcing - c.coupling * sum;
    }
    let (cb, b2, b, hcb) = (c.time_ratio, c.space_ratio_sq, c.space_ratio, c.coupling);
    let fast = |mm1: usize, i: usize, mp1: usize, mp2: usize| {
        cb * (b2 * u[mp1] * (u[mm1] - u[mp2]) - b * u[i]) + hcb * x[c.owner[i]]
    };
    du[0] = fast(m - 1, 0, 1, 2);
    #[allow(clippy::needless_range_loop)]
    for i in 1..m - 2 {
        du[i] = fast(i - 1, i, i + 1, i + 2);
    }
    du[m - 2] = fast(m - 3, m - 2, m - 1, 0);
    du[m - 1] = fast(m - 2, m - 1, 0, 1);
}

/// Adjoint of [`two_scale`].
pub fn two_scale_adjoint(c: &TwoScaleCoeffs, s: &[f64], g: &[f64], gs: &mut [f64]) {
    let (nx, nu) = (c.nx, c.nu);
    let (x, u) = s.split_at(nx);
    let (gdx, gdu) = g.split_at(nx);
    let (ax, au) = gs.split_at_mut(nx);
    let m = nx * nu;
    for n in 0..nx {
        let im1 = (n + nx - 1) % nx;
        let ip1 = (n + 1) % nx;
        let im2 = (n + nx - 2) % nx;
        let gi = gdx[n];
        ax[im1] += gi * (x[ip1] - x[im2]);
        ax[ip1] += gi * x[im1];
        ax[im2] -= gi * x[im1];
        ax[n] -= gi;
        let gc = gi * c.coupling;
        for a in &mut au[n * nu..(n + 1) * nu] {
            *a -= gc;
        }
    }
    let scale = c.time_ratio * c.space_ratio_sq;
    let damp = c.time_ratio * c.space_ratio;
    for i in 0..m {
        let mm1 = (i + m - 1) % m;
        let mp1 = (i + 1) % m;
        let mp2 = (i + 2) % m;
        let gi = gdu[i];
        let t = gi * scale;
        au[mp1] += t * (u[mm1] - u[mp2]);
        au[mm1] += t * u[mp1];
        au[mp2] -= t * u[mp1];
        au[i] -= gi * damp;
        ax[c.owner[i]] += gi * c.coupling;
    }
}

/// `out = base + h * dir`
#[inline]
pub fn axpy(base: &[f64], dir: &[f64], h: f64, out: &mut [f64]) {
    for ((o, &s), &d) in out.iter_mut().zip(base).zip(dir) {
        *o = s + h * d;
    }
}

/// Classical RK4 combination `base + dt/6 (k1 + 2 k2 + 2 k3 + k4)`.
#[inline]
pub fn rk4_combine(base: &[f64], k: [&[f64]; 4], dt: f64, out: &mut [f64]) {
    let w = dt / 6.0;
    for i in 0..out.len() {
        out[i] = base[i] + w * (k[0][i] + 2.0 * k[1][i] + 2.0 * k[2][i] + k[3][i]);
    }
}

/// Hyperbolic tangent from a single exponential of a non-positive argument.
/// Absolute error stays near one ulp of 1; about three times faster than
/// `f64::tanh`, which dominates nonlinear network cost.
#[inline]
pub fn tanh(x: f64) -> f64 {
    let e = (-2.0 * x.abs()).exp();
    ((1.0 - e) / (1.0 + e)).copysign(x)
}

/// Elementwise polynomial `sum_j coeffs[j] x^j` by Horner's rule.
#[inline]
pub fn poly(coeffs: &[f64], x: f64) -> f64 {
    coeffs.iter().rev().fold(0.0, |acc, &c| acc * x + c)
}

#[inline]
pub fn poly_derivative(coeffs: &[f64], x: f64) -> f64 {
    let deg = coeffs.len().saturating_sub(1);
    (1..=deg)
        .rev()
        .fold(0.0, |acc, j| acc * x + j as f64 * coeffs[j])
}

/// Shape of a periodic 1-D convolution over a batch of multi-channel rings.
///
/// Layouts: input `[batch][cin][n]`, weight `[cout][cin][window]`,
/// bias `[cout]`, output `[batch][cout][n]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvShape {
    pub batch: usize,
    pub cin: usize,
    pub cout: usize,
    pub n: usize,
    pub window: usize,
}

impl ConvShape {
    pub fn input_len(&self) -> usize {
        self.batch * self.cin * self.n
    }
    pub fn output_len(&self) -> usize {
        self.batch * self.cout * self.n
    }
    pub fn weight_len(&self) -> usize {
        self.cout * self.cin * self.window
    }
    fn padded(&self) -> usize {
        self.n + self.window - 1
    }
}

fn pad_periodic(src: &[f64], half: usize, dst: &mut [f64]) {
    let n = src.len();
    dst[..half].copy_from_slice(&src[n - half..]);
    dst[half..half + n].copy_from_slice(src);
    let tail = dst.len() - half - n;
    dst[half + n..].copy_from_slice(&src[..tail]);
}

/// Periodic cross-correlation with stride 1:
/// `out[b][f][i] = bias[f] + sum_c sum_j w[f][c][j] * in[b][c][(i + j - window/2) mod n]`.
pub fn conv_forward(
    shape: ConvShape,
    input: &[f64],
    weight: &[f64],
    bias: &[f64],
    out: &mut [f64],
) {
    let ConvShape {
        batch,
        cin,
        cout,
        n,
        window,
    } = shape;
    let half = window / 2;
    let width = shape.padded();
    let mut pad = vec![0.0; cin * width];
    for b in 0..batch {
        for c in 0..cin {
            let src = &input[(b * cin + c) * n..][..n];
            pad_periodic(src, half, &mut pad[c * width..(c + 1) * width]);
        }
        for f in 0..cout {
            let o = &mut out[(b * cout + f) * n..][..n];
            o.fill(bias[f]);
            for c in 0..cin {
                let p = &pad[c * width..(c + 1) * width];
                let wrow = &weight[(f * cin + c) * window..][..window];
                for (j, &w) in wrow.iter().enumerate() {
                    let pj = &p[j..j + n];
                    for i in 0..n {
                        o[i] += w * pj[i];
                    }
                }
            }
        }
    }
}

/// Adjoint of [`conv_forward`]. Each gradient buffer is optional and is
/// accumulated into, not overwritten.
/// Dot product with four independent partial sums, so the loop is not
/// bound by floating-point add latency.
#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for k in 0..4 {
            acc[k] += x[k] * y[k];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

pub fn conv_adjoint(
    shape: ConvShape,
    input: &[f64],
    weight: &[f64],
    gout: &[f64],
    mut gin: Option<&mut [f64]>,
    mut gw: Option<&mut [f64]>,
    mut gb: Option<&mut [f64]>,
) {
    let ConvShape {
        batch,
        cin,
        cout,
        n,
        window,
    } = shape;
    let half = window / 2;
    let width = shape.padded();
    let mut pad = vec![0.0; cin * width];
    let mut gpad = vec![0.0; cin * width];
    for b in 0..batch {
        if gw.is_some() {
            for c in 0..cin {
                let src = &input[(b * cin + c) * n..][..n];
                pad_periodic(src, half, &mut pad[c * width..(c + 1) * width]);
            }
        }
        if gin.is_some() {
            gpad.fill(0.0);
        }
        for f in 0..cout {
            let g = &gout[(b * cout + f) * n..][..n];
            if let Some(gb) = gb.as_deref_mut() {
                gb[f] += g.iter().sum::<f64>();
            }
            for c in 0..cin {
                let base = (f * cin + c) * window;
                if let Some(gw) = gw.as_deref_mut() {
                    let p = &pad[c * width..(c + 1) * width];
                    for j in 0..window {
                        gw[base + j] += dot(g, &p[j..j + n]);
                    }
                }
                if gin.is_some() {
                    let gp = &mut gpad[c * width..(c + 1) * width];
                    for j in 0..window {
                        let w = weight[base + j];
                        let gpj = &mut gp[j..j + n];
                        for i in 0..n {
                            gpj[i] += w * g[i];
                        }
                    }
                }
            }
        }
        if let Some(gin) = gin.as_deref_mut() {
            for c in 0..cin {
                let gp = &gpad[c * width..(c + 1) * width];
                let dst = &mut gin[(b * cin + c) * n..][..n];
                for (t, &v) in gp.iter().enumerate() {
                    dst[(t + n - half) % n] += v;
                }
            }
        }
    }
}
