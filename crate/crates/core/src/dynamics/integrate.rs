use super::Tendency;
use crate::kernels;

/// Reusable RK4 stage buffers.
#[derive(Debug, Clone)]
pub struct Rk4 {
    k: [Vec<f64>; 4],
    stage: Vec<f64>,
    next: Vec<f64>,
}

impl Rk4 {
    pub fn new(dim: usize) -> Self {
        Self {
            k: std::array::from_fn(|_| vec![0.0; dim]),
            stage: vec![0.0; dim],
            next: vec![0.0; dim],
        }
    }

    /// Advances `s` by one step in place.
    pub fn step<T: Tendency + ?Sized>(&mut self, f: &T, s: &mut [f64], dt: f64) {
        let half = 0.5 * dt;
        let [k1, k2, k3, k4] = &mut self.k;
        f.eval(s, k1);
        kernels::axpy(s, k1, half, &mut self.stage);
        f.eval(&self.stage, k2);
        kernels::axpy(s, k2, half, &mut self.stage);
        f.eval(&self.stage, k3);
        kernels::axpy(s, k3, dt, &mut self.stage);
        f.eval(&self.stage, k4);
        kernels::rk4_combine(s, [k1, k2, k3, k4], dt, &mut self.next);
        s.copy_from_slice(&self.next);
    }

    pub fn advance<T: Tendency + ?Sized>(&mut self, f: &T, s: &mut [f64], dt: f64, n_steps: usize) {
        for _ in 0..n_steps {
            self.step(f, s, dt);
        }
    }
}

/// One classical RK4 step `s + dt/6 (k1 + 2 k2 + 2 k3 + k4)`.
pub fn rk4_step<T: Tendency + ?Sized>(f: &T, s: &[f64], dt: f64) -> Vec<f64> {
    let mut out = s.to_vec();
    Rk4::new(s.len()).step(f, &mut out, dt);
    out
}

/// `n_steps`-fold composition of [`rk4_step`]; zero steps is the identity.
pub fn resolvent<T: Tendency + ?Sized>(f: &T, s: &[f64], dt: f64, n_steps: usize) -> Vec<f64> {
    let mut out = s.to_vec();
    Rk4::new(s.len()).advance(f, &mut out, dt, n_steps);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{FnTendency, L96, NX};
    use proptest::prelude::*;

    fn l96() -> L96 {
        L96 { n: NX, forcing: 8.0 }
    }

    fn climate_like_state() -> Vec<f64> {
        // Perturbed equilibrium pushed onto the attractor.
        let mut x = vec![8.0; NX];
        x[0] += 0.01;
        resolvent(&l96(), &x, 0.01, 2000)
    }

    #[test]
    fn zero_field_is_identity() {
        let f = FnTendency::new(3, |_: &[f64], out: &mut [f64]| out.fill(0.0));
        let s = vec![1.0, -2.0, 3.5];
        assert_eq!(rk4_step(&f, &s, 0.1), s);
    }

    #[test]
    fn exponential_decay_matches_taylor() {
        let f = FnTendency::new(1, |s: &[f64], out: &mut [f64]| out[0] = -s[0]);
        let h: f64 = 0.1;
        let got = rk4_step(&f, &[1.0], h)[0];
        // RK4 reproduces the 4th-order Taylor polynomial of exp(-h) exactly.
        let taylor = 1.0 - h + h * h / 2.0 - h.powi(3) / 6.0 + h.powi(4) / 24.0;
        assert!((got - taylor).abs() < 1e-15);
        assert!((got - (-h).exp()).abs() < h.powi(5));
    }

    #[test]
    fn constant_field_adds_dt_times_field() {
        let c = [0.75, -2.0];
        let f = FnTendency::new(2, move |_: &[f64], out: &mut [f64]| out.copy_from_slice(&c));
        let got = rk4_step(&f, &[1.0, 1.0], 0.05);
        assert!((got[0] - (1.0 + 0.75 * 0.05)).abs() < 4.0 * f64::EPSILON);
        assert!((got[1] - (1.0 - 2.0 * 0.05)).abs() < 4.0 * f64::EPSILON);
    }

    #[test]
    fn resolvent_identity_and_composition() {
        let x = climate_like_state();
        assert_eq!(resolvent(&l96(), &x, 0.05, 0), x);
        let twice = rk4_step(&l96(), &rk4_step(&l96(), &x, 0.05), 0.05);
        assert_eq!(resolvent(&l96(), &x, 0.05, 2), twice);
    }

    #[test]
    fn six_step_resolvent_matches_loop() {
        let x = climate_like_state();
        let mut looped = x.clone();
        for _ in 0..6 {
            looped = rk4_step(&l96(), &looped, 0.05);
        }
        assert_eq!(resolvent(&l96(), &x, 0.05, 6), looped);
    }

    #[test]
    fn equilibrium_is_fixed_point() {
        let x = vec![8.0; NX];
        let y = resolvent(&l96(), &x, 0.05, 200);
        assert!(y.iter().all(|v| (v - 8.0).abs() < 1e-10));
    }

    /// Error after one time unit at step `dt`, against a fine reference.
    fn global_error(x0: &[f64], dt: f64, reference: &[f64]) -> f64 {
        let n = (1.0 / dt).round() as usize;
        let y = resolvent(&l96(), x0, dt, n);
        y.iter()
            .zip(reference)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt()
    }

    #[test]
    fn fourth_order_self_convergence() {
        let x0 = climate_like_state();
        let reference = resolvent(&l96(), &x0, 1e-4, 10_000);
        let steps = [0.04, 0.02, 0.01];
        let errs: Vec<f64> = steps.iter().map(|&h| global_error(&x0, h, &reference)).collect();
        // Least-squares slope of log(err) against log(dt).
        let lx: Vec<f64> = steps.iter().map(|h| h.ln()).collect();
        let ly: Vec<f64> = errs.iter().map(|e| e.ln()).collect();
        let mx = lx.iter().sum::<f64>() / 3.0;
        let my = ly.iter().sum::<f64>() / 3.0;
        let slope = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum::<f64>()
            / lx.iter().map(|a| (a - mx).powi(2)).sum::<f64>();
        assert!((slope - 4.0).abs() < 0.2, "slope {slope}, errors {errs:?}");
        let ratio = errs[1] / errs[2];
        assert!((ratio - 16.0).abs() < 3.0, "halving ratio {ratio}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn resolvent_splits(a in 0usize..8, b in 0usize..8, seed in 0u64..100) {
            let mut x = climate_like_state();
            x[(seed % 36) as usize] += 0.1;
            let whole = resolvent(&l96(), &x, 0.05, a + b);
            let split = resolvent(&l96(), &resolvent(&l96(), &x, 0.05, a), 0.05, b);
            prop_assert_eq!(whole, split);
        }
    }
}
