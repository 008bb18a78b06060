use rand::Rng as _;
use rand_distr::{Distribution, Normal, StandardNormal};

use super::{FullState, ModelConfig, Rk4, Tendency};
use crate::error::{Error, Result};
use crate::seed;

/// Default spin-up length in model time units.
pub const SPIN_UP_DURATION: f64 = 30.0;

const SPIN_UP_NOISE: f64 = 0.01;
const FINITE_CHECK_EVERY: usize = 64;

fn check_finite(s: &[f64], time: f64) -> Result<()> {
    if s.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Blowup { time })
    }
}

/// Integrates `s` for `n_steps`, checking for blow-up periodically.
fn integrate_checked<T: Tendency + ?Sized>(
    f: &T,
    s: &mut [f64],
    dt: f64,
    n_steps: usize,
    t0: f64,
) -> Result<()> {
    let mut rk = Rk4::new(s.len());
    let mut done = 0;
    while done < n_steps {
        let chunk = FINITE_CHECK_EVERY.min(n_steps - done);
        rk.advance(f, s, dt, chunk);
        done += chunk;
        check_finite(s, t0 + done as f64 * dt)?;
    }
    Ok(())
}

/// Brings a model onto its attractor: zero state plus N(0, 0.01²) noise on
/// the slow variables, integrated for `duration` time units.
pub fn spin_up(cfg: &ModelConfig, seed_value: u64, duration: f64) -> Result<FullState> {
    cfg.validate()?;
    let mut rng = seed::rng_from(seed_value);
    let noise = Normal::new(0.0, SPIN_UP_NOISE).expect("valid sigma");
    let mut s = vec![0.0; cfg.state_dim()];
    for v in &mut s[..cfg.nx] {
        *v = noise.sample(&mut rng);
    }
    let steps = (duration / cfg.dt).round() as usize;
    integrate_checked(&cfg.tendency(), &mut s, cfg.dt, steps, 0.0)?;
    Ok(FullState::from_raw(s, cfg.nx))
}

/// Integrates from `start` and records the full state every `every` steps,
/// `count` samples in total; the first sample is `start` itself.
pub fn sample_trajectory(
    cfg: &ModelConfig,
    start: &[f64],
    every: usize,
    count: usize,
) -> Result<Vec<Vec<f64>>> {
    let f = cfg.tendency();
    let mut s = start.to_vec();
    let mut out = Vec::with_capacity(count);
    let mut rk = Rk4::new(s.len());
    for k in 0..count {
        if k > 0 {
            rk.advance(&f, &mut s, cfg.dt, every);
            check_finite(&s, (k * every) as f64 * cfg.dt)?;
        }
        out.push(s.clone());
    }
    Ok(out)
}

/// Standard deviation of the climatological distribution of each slow
/// variable, averaged over the slow variables. Samples every observation
/// interval over `duration` time units starting from `start`.
pub fn model_variability(cfg: &ModelConfig, start: &[f64], duration: f64) -> Result<f64> {
    let every = cfg.steps_per_obs().max(1);
    let count = (duration / (every as f64 * cfg.dt)).round() as usize;
    let f = cfg.tendency();
    let mut s = start.to_vec();
    let mut rk = Rk4::new(s.len());
    let nx = cfg.nx;
    let mut mean = vec![0.0; nx];
    let mut m2 = vec![0.0; nx];
    for k in 1..=count {
        rk.advance(&f, &mut s, cfg.dt, every);
        if k % FINITE_CHECK_EVERY == 0 {
            check_finite(&s, k as f64 * every as f64 * cfg.dt)?;
        }
        for i in 0..nx {
            let d = s[i] - mean[i];
            mean[i] += d / k as f64;
            m2[i] += d * (s[i] - mean[i]);
        }
    }
    let n = count as f64;
    Ok(m2.iter().map(|v| (v / (n - 1.0)).sqrt()).sum::<f64>() / nx as f64)
}

/// `count` states drawn every `interval` time units along one trajectory
/// started from `start`.
pub fn climatological_ensemble(
    cfg: &ModelConfig,
    start: &[f64],
    count: usize,
    interval: f64,
) -> Result<Vec<FullState>> {
    let every = (interval / cfg.dt).round() as usize;
    let mut s = start.to_vec();
    let f = cfg.tendency();
    let mut members = Vec::with_capacity(count);
    for k in 0..count {
        integrate_checked(&f, &mut s, cfg.dt, every, k as f64 * interval)?;
        members.push(FullState::from_raw(s.clone(), cfg.nx));
    }
    Ok(members)
}

/// Outcome of a leading Lyapunov exponent estimate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LyapunovEstimate {
    pub exponent: f64,
    pub duration: f64,
    /// Set when the averaging window is shorter than 500 time units.
    pub short_run: bool,
}

const LYAPUNOV_DELTA: f64 = 1e-7;
const LYAPUNOV_RENORM: f64 = 0.1;
const LYAPUNOV_MIN_DURATION: f64 = 500.0;

/// Benettin estimate with a finite-difference twin trajectory: the twin
/// starts `delta` away in a random direction and is pulled back to distance
/// `delta` every `renorm` time units; the exponent is the mean log growth
/// rate.
pub fn benettin<T: Tendency + ?Sized>(
    f: &T,
    start: &[f64],
    dt: f64,
    duration: f64,
    renorm: f64,
    delta: f64,
    rng: &mut seed::Rng,
) -> Result<LyapunovEstimate> {
    let dim = start.len();
    let mut dir: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
    if dir.iter().all(|v| *v == 0.0) {
        dir[rng.random_range(0..dim)] = 1.0;
    }
    let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
    let mut base = start.to_vec();
    let mut twin: Vec<f64> = base.iter().zip(&dir).map(|(b, d)| b + delta * d / norm).collect();
    let per_block = (renorm / dt).round().max(1.0) as usize;
    let blocks = (duration / (per_block as f64 * dt)).round() as usize;
    let mut rk = Rk4::new(dim);
    let mut log_sum = 0.0;
    for k in 0..blocks {
        rk.advance(f, &mut base, dt, per_block);
        rk.advance(f, &mut twin, dt, per_block);
        let dist = base
            .iter()
            .zip(&twin)
            .map(|(a, b)| (b - a) * (b - a))
            .sum::<f64>()
            .sqrt();
        if !dist.is_finite() || dist == 0.0 {
            return Err(Error::Blowup {
                time: (k + 1) as f64 * per_block as f64 * dt,
            });
        }
        log_sum += (dist / delta).ln();
        let scale = delta / dist;
        for (t, b) in twin.iter_mut().zip(&base) {
            *t = b + (*t - b) * scale;
        }
    }
    let total = blocks as f64 * per_block as f64 * dt;
    Ok(LyapunovEstimate {
        exponent: log_sum / total,
        duration: total,
        short_run: total < LYAPUNOV_MIN_DURATION,
    })
}

/// Leading Lyapunov exponent of `cfg` from a spun-up state.
pub fn leading_lyapunov(cfg: &ModelConfig, seed_value: u64, duration: f64) -> Result<LyapunovEstimate> {
    let start = spin_up(cfg, seed::child_seed(seed_value, "spin-up", 0), SPIN_UP_DURATION)?;
    let mut rng = seed::child_rng(seed_value, "lyapunov", 0);
    benettin(
        &cfg.tendency(),
        start.as_slice(),
        cfg.dt,
        duration,
        LYAPUNOV_RENORM,
        LYAPUNOV_DELTA,
        &mut rng,
    )
}
