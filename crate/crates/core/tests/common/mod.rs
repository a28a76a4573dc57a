#![allow(dead_code)]

//! Shared fixtures and independent oracles for the integration suites.

use lagpred::model::{rollout, JointState, Scenario, VehicleState};
use lagpred::sampler::{predict, SamplerConfig};
use lagpred::{neg_log_likelihood, ControllerParams, Hyperparams};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// Random lead/lag scenario. The lag follows a controller whose gains may be
/// negative, which pushes the nonnegative estimate onto the boundary.
pub fn random_scenario(rng: &mut ChaCha8Rng, k: usize, horizon: usize) -> Scenario {
    let dt = 0.1;
    let l = rng.random_range(3.5..6.0);
    let kv = rng.random_range(-0.3..1.2);
    let kg = rng.random_range(-0.2..0.6);
    let gs = rng.random_range(2.0..25.0);
    let noise = Normal::new(0.0, rng.random_range(0.0..0.6)).unwrap();
    let v0 = rng.random_range(6.0..22.0);
    let amp = rng.random_range(0.0..3.0);
    let w = rng.random_range(0.3..1.5);
    let ph = rng.random_range(0.0..std::f64::consts::TAU);
    let lead = |t: usize| {
        let tt = t as f64 * dt;
        VehicleState::new(
            40.0 + v0 * tt - amp / w * ((w * tt + ph).cos() - ph.cos()),
            v0 + amp * (w * tt + ph).sin(),
        )
    };
    let mut lag = VehicleState::new(rng.random_range(0.0..25.0), v0 + rng.random_range(-2.0..2.0));
    let mut observed = Vec::with_capacity(k);
    for t in 0..k {
        let s = JointState::new(lag, lead(t));
        observed.push(s);
        let g = s.lead.x - s.lag.x - l;
        let a = kv * (s.lead.v - s.lag.v) + kg * (g - gs) + noise.sample(rng);
        lag = VehicleState::new(lag.x + lag.v * dt + a * dt * dt / 2.0, lag.v + a * dt);
    }
    Scenario {
        dt,
        lead_length: l,
        observed,
        lead_future: (k..k + horizon).map(lead).collect(),
        truth_lag_future: None,
    }
}

/// Smooth part of the negative log-likelihood, written out term by term.
pub fn smooth_objective(s: &Scenario, th: &ControllerParams, gm: &Hyperparams) -> f64 {
    let mut sum = 0.0;
    for i in 0..s.observed.len() - 1 {
        let a = (s.observed[i + 1].lag.v - s.observed[i].lag.v) / s.dt;
        let o = &s.observed[i];
        let g = o.lead.x - o.lag.x - s.lead_length;
        let h = th.k_v * (o.lead.v - o.lag.v) + th.k_g * (g - th.g_star);
        sum += (a - h) * (a - h);
    }
    0.5 * sum + gm.alpha * (th.g_star - gm.g0).powi(2) + gm.beta * gm.g0 * gm.g0 * (th.k_v.powi(2) + th.k_g.powi(2))
}

/// Exact minimum over `k_v, k_g >= 0` at a fixed desired gap, by enumerating
/// the four sign patterns of the 2x2 normal equations.
pub fn profile(s: &Scenario, gm: &Hyperparams, g_star: f64) -> (f64, f64, f64) {
    let (mut spp, mut spq, mut sqq, mut spa, mut sqa) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for i in 0..s.observed.len() - 1 {
        let o = &s.observed[i];
        let a = (s.observed[i + 1].lag.v - o.lag.v) / s.dt;
        let p = o.lead.v - o.lag.v;
        let q = o.lead.x - o.lag.x - s.lead_length - g_star;
        spp += p * p;
        spq += p * q;
        sqq += q * q;
        spa += p * a;
        sqa += q * a;
    }
    let ridge = 2.0 * gm.beta * gm.g0 * gm.g0;
    let (a11, a12, a22) = (spp + ridge, spq, sqq + ridge);
    let mut cands = vec![(0.0, 0.0)];
    if a11 > 0.0 {
        cands.push(((spa / a11).max(0.0), 0.0));
    }
    if a22 > 0.0 {
        cands.push((0.0, (sqa / a22).max(0.0)));
    }
    let det = a11 * a22 - a12 * a12;
    if det > 1e-14 * (a11 * a22).max(1e-300) {
        let kv = (a22 * spa - a12 * sqa) / det;
        let kg = (a11 * sqa - a12 * spa) / det;
        if kv >= 0.0 && kg >= 0.0 {
            cands.push((kv, kg));
        }
    }
    cands
        .into_iter()
        .map(|(kv, kg)| {
            let th = ControllerParams::new(kv, kg, g_star);
            (smooth_objective(s, &th, gm), kv, kg)
        })
        .fold((f64::INFINITY, 0.0, 0.0), |best, c| if c.0 < best.0 { c } else { best })
}

/// Brute-force minimum of the smooth objective over `theta >= 0`:
/// a dense grid in `g_star` on `[0, g_max]` with exact inner minimization,
/// refined by golden-section search around the best grid cells.
pub fn brute_force_min(s: &Scenario, gm: &Hyperparams, g_max: f64, n_grid: usize) -> (f64, ControllerParams) {
    let step = g_max / n_grid as f64;
    let vals: Vec<f64> = (0..=n_grid).map(|i| profile(s, gm, i as f64 * step).0).collect();
    let mut order: Vec<usize> = (0..=n_grid).collect();
    order.sort_by(|&a, &b| vals[a].partial_cmp(&vals[b]).unwrap());
    let mut best = (f64::INFINITY, ControllerParams::new(0.0, 0.0, 0.0));
    for &i in order.iter().take(5) {
        let lo = (i as f64 - 1.0).max(0.0) * step;
        let hi = ((i as f64 + 1.0) * step).min(g_max);
        let g = golden(|g| profile(s, gm, g).0, lo, hi, 200);
        for cand in [g, i as f64 * step] {
            let (f, kv, kg) = profile(s, gm, cand);
            if f < best.0 {
                best = (f, ControllerParams::new(kv, kg, cand));
            }
        }
    }
    best
}

fn golden(f: impl Fn(f64) -> f64, mut a: f64, mut b: f64, iters: usize) -> f64 {
    let r = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - r * (b - a);
    let mut d = a + r * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    for _ in 0..iters {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - r * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + r * (b - a);
            fd = f(d);
        }
        if (b - a).abs() < 1e-13 * (1.0 + a.abs()) {
            break;
        }
    }
    0.5 * (a + b)
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Lag following (0.5, 0.4, 10) with noisy accelerations, short history so
/// the posterior stays wide enough to integrate on a grid.
pub fn test_scenario() -> (Scenario, Hyperparams) {
    let mut rng = rng(3);
    let mut s = random_scenario(&mut rng, 10, 8);
    let dt = s.dt;
    let l = s.lead_length;
    let theta = ControllerParams::new(0.5, 0.4, 10.0);
    let mut lag = VehicleState::new(s.observed[0].lead.x - l - 14.0, s.observed[0].lead.v - 1.5);
    let noise = [0.3, -0.2, 0.1, 0.4, -0.3, 0.0, 0.2, -0.1, 0.3, -0.4];
    for (t, o) in s.observed.iter_mut().enumerate() {
        o.lag = lag;
        let a = lagpred::model::controller_accel(o, &theta, l) + noise[t];
        lag = lagpred::model::step_lag(lag, a, dt);
    }
    (s, Hyperparams::new(1.0, 10.0, 0.05))
}

pub fn final_position(s: &Scenario, th: &ControllerParams) -> f64 {
    rollout(s, th, s.observed.last().unwrap().lag).last().unwrap().x
}

/// Posterior mean of the final lag position by midpoint quadrature over a
/// box wide enough to hold essentially all the mass.
pub fn quadrature_mean(s: &Scenario, gm: &Hyperparams) -> f64 {
    let hi = [2.5, 2.0, 25.0];
    let n = 70;
    let (mut z, mut m) = (0.0, 0.0);
    for i in 0..n {
        for j in 0..n {
            for k in 0..n {
                let c = |idx: usize, d: usize| (idx as f64 + 0.5) * hi[d] / n as f64;
                let th = ControllerParams::new(c(i, 0), c(j, 1), c(k, 2));
                let f = neg_log_likelihood(s, &th, gm).unwrap().total;
                if f.is_finite() {
                    let w = (-f).exp();
                    z += w;
                    m += w * final_position(s, &th);
                }
            }
        }
    }
    m / z
}

pub fn is_mean(s: &Scenario, gm: &Hyperparams, n: usize, seed: u64) -> (f64, f64) {
    let cfg = SamplerConfig { n, seed, ..SamplerConfig::default() };
    let set = predict(s, gm, &cfg).unwrap().set;
    let t = set.horizon() - 1;
    let mean = set.mean_position(t);
    let var: f64 = set
        .probabilities
        .iter()
        .zip(&set.trajectories)
        .map(|(p, tr)| p * p * (tr[t].x - mean).powi(2))
        .sum();
    (mean, var.sqrt())
}
