use crate::dynamics::{ModelConfig, Rk4, TwoScale};
use crate::error::{Error, Result};
use crate::kernels;

/// Degree of the shared polynomial correction.
pub const WILKS_DEGREE: usize = 4;
pub const WILKS_PAIRS: usize = 2000;
pub const WILKS_SPACING: usize = 1000;

/// Consecutive snapshot pairs `(s(t), s(t + dt))` of the slow variables
/// from a truth run, `spacing` integration steps apart.
pub fn wilks_pairs(
    cfg: &ModelConfig,
    start: &[f64],
    n_pairs: usize,
    spacing: usize,
) -> Result<Vec<(Vec<f64>, Vec<f64>)>> {
    cfg.validate()?;
    if spacing == 0 {
        return Err(Error::Config("pair spacing must be at least one step".into()));
    }
    let f = TwoScale::new(cfg);
    let mut rk = Rk4::new(start.len());
    let mut s = start.to_vec();
    let mut out = Vec::with_capacity(n_pairs);
    for k in 0..n_pairs {
        if k > 0 {
            rk.advance(&f, &mut s, cfg.dt, spacing - 1);
        }
        let before = s[..cfg.nx].to_vec();
        rk.step(&f, &mut s, cfg.dt);
        if s.iter().any(|v| !v.is_finite()) {
            return Err(Error::Blowup {
                time: (k * spacing) as f64 * cfg.dt,
            });
        }
        out.push((before, s[..cfg.nx].to_vec()));
    }
    Ok(out)
}

/// Least-squares solution of `a x = b` for a tall `rows x cols` matrix
/// stored row-major, via Householder QR.
pub fn least_squares(a: &[f64], rows: usize, cols: usize, b: &[f64]) -> Result<Vec<f64>> {
    if a.len() != rows * cols || b.len() != rows || rows < cols {
        return Err(Error::Shape(format!("least squares on a {rows}x{cols} system")));
    }
    // Column-major copy for cache-friendly reflections.
    let mut q: Vec<Vec<f64>> = (0..cols).map(|j| (0..rows).map(|i| a[i * cols + j]).collect()).collect();
    let mut rhs = b.to_vec();
    let mut diag = vec![0.0; cols];
    for k in 0..cols {
        let norm = q[k][k..].iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(Error::RankDeficient { column: k });
        }
        let alpha = if q[k][k] > 0.0 { -norm } else { norm };
        let mut v = q[k][k..].to_vec();
        v[0] -= alpha;
        let vnorm2 = v.iter().map(|x| x * x).sum::<f64>();
        diag[k] = alpha;
        if vnorm2 > 0.0 {
            for col in q.iter_mut().skip(k + 1) {
                let s = 2.0 * v.iter().zip(&col[k..]).map(|(a, b)| a * b).sum::<f64>() / vnorm2;
                for (c, vi) in col[k..].iter_mut().zip(&v) {
                    *c -= s * vi;
                }
            }
            let s = 2.0 * v.iter().zip(&rhs[k..]).map(|(a, b)| a * b).sum::<f64>() / vnorm2;
            for (c, vi) in rhs[k..].iter_mut().zip(&v) {
                *c -= s * vi;
            }
        }
    }
    let scale = diag.iter().fold(0.0f64, |m, d| m.max(d.abs()));
    if let Some(j) = diag.iter().position(|d| d.abs() < 1e-10 * scale) {
        return Err(Error::RankDeficient { column: j });
    }
    // Back substitution with R (diagonal in `diag`, upper part in q).
    let mut x = vec![0.0; cols];
    for k in (0..cols).rev() {
        let mut s = rhs[k];
        for j in k + 1..cols {
            s -= q[j][k] * x[j];
        }
        x[k] = s / diag[k];
    }
    Ok(x)
}

/// Fits a polynomial `g` of degree four, shared by all sites, to the
/// residual between finite-difference tendencies `(s1 - s0) / dt` and the
/// L96 tendency at `s0`. Returns coefficients, constant term first.
pub fn wilks_fit(pairs: &[(Vec<f64>, Vec<f64>)], dt: f64, forcing: f64) -> Result<[f64; 5]> {
    let Some((first, _)) = pairs.first() else {
        return Err(Error::SeriesTooShort { needed: 1, got: 0 });
    };
    let n = first.len();
    let cols = WILKS_DEGREE + 1;
    let rows = pairs.len() * n;
    let mut a = Vec::with_capacity(rows * cols);
    let mut b = Vec::with_capacity(rows);
    let mut phys = vec![0.0; n];
    for (s0, s1) in pairs {
        if s0.len() != n || s1.len() != n {
            return Err(Error::Shape("snapshot pairs of unequal length".into()));
        }
        kernels::l96(s0, n, forcing, &mut phys);
        for i in 0..n {
            let mut p = 1.0;
            for _ in 0..cols {
                a.push(p);
                p *= s0[i];
            }
            b.push((s1[i] - s0[i]) / dt - phys[i]);
        }
    }
    let x = least_squares(&a, rows, cols, &b)?;
    Ok([x[0], x[1], x[2], x[3], x[4]])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::spin_up;
    use crate::seed;
    use rand::Rng as _;

    fn synthetic_pairs(s: u64, planted: &[f64; 5]) -> Vec<(Vec<f64>, Vec<f64>)> {
        let dt = 0.005;
        let mut rng = seed::rng_from(s);
        (0..200)
            .map(|_| {
                let x0: Vec<f64> = (0..36).map(|_| rng.random_range(-8.0..12.0)).collect();
                let mut t = vec![0.0; 36];
                kernels::l96(&x0, 36, 10.0, &mut t);
                let x1 = x0
                    .iter()
                    .zip(&t)
                    .map(|(x, f)| x + dt * (f + kernels::poly(planted, *x)))
                    .collect();
                (x0, x1)
            })
            .collect()
    }

    #[test]
    fn exact_physics_gives_zero_correction() {
        let c = wilks_fit(&synthetic_pairs(1, &[0.0; 5]), 0.005, 10.0).unwrap();
        assert!(c.iter().all(|v| v.abs() < 1e-8), "{c:?}");
    }

    #[test]
    fn planted_polynomial_is_recovered() {
        let planted = [2.0, 0.5, 0.0, 0.0, 0.0];
        let c = wilks_fit(&synthetic_pairs(2, &planted), 0.005, 10.0).unwrap();
        for (a, b) in c.iter().zip(&planted) {
            assert!((a - b).abs() < 1e-6, "{c:?}");
        }
        let planted = [-0.3, 0.1, 0.02, -0.004, 0.0002];
        let c = wilks_fit(&synthetic_pairs(3, &planted), 0.005, 10.0).unwrap();
        for (a, b) in c.iter().zip(&planted) {
            assert!((a - b).abs() < 1e-6, "{c:?}");
        }
    }

    #[test]
    fn site_rotation_does_not_change_the_fit() {
        let cfg = ModelConfig::l05iii();
        let start = spin_up(&cfg, 4, 10.0).unwrap();
        let pairs = wilks_pairs(&cfg, start.as_slice(), 50, 20).unwrap();
        let rotated: Vec<_> = pairs
            .iter()
            .map(|(a, b)| {
                let (mut a, mut b) = (a.clone(), b.clone());
                a.rotate_left(7);
                b.rotate_left(7);
                (a, b)
            })
            .collect();
        let c1 = wilks_fit(&pairs, cfg.dt, 8.0).unwrap();
        let c2 = wilks_fit(&rotated, cfg.dt, 8.0).unwrap();
        for (a, b) in c1.iter().zip(&c2) {
            assert!((a - b).abs() <= 1e-9 * (1.0 + a.abs()), "{c1:?} vs {c2:?}");
        }
    }

    #[test]
    fn degenerate_input_is_rank_deficient() {
        // Every site at the same value: the design matrix has rank one.
        let pairs = vec![(vec![1.0; 36], vec![1.0; 36]); 10];
        assert!(matches!(wilks_fit(&pairs, 0.005, 8.0), Err(Error::RankDeficient { .. })));
    }

    #[test]
    fn qr_solves_square_system() {
        let a = [2.0, 1.0, 1.0, 3.0];
        let x = least_squares(&a, 2, 2, &[3.0, 5.0]).unwrap();
        assert!((x[0] - 0.8).abs() < 1e-14 && (x[1] - 1.4).abs() < 1e-14);
    }
}
