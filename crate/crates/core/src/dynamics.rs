//! State-evolution numerics: kernel flow, first-order evolution (RK4),
//! the damped second-order system and the integrated trajectory loss.
//!
//! The kernel flow treats the component index `j` of a state vector as a
//! one-dimensional manifold. The state is convolved with the kernel (zero
//! padding, same length) and the divergence of the result is taken with
//! central differences in the interior and one-sided differences at the two
//! ends:
//!
//! ```text
//! c      = K * s
//! out[0] = c[1] - c[0]
//! out[j] = (c[j+1] - c[j-1]) / 2        0 < j < d-1
//! out[d-1] = c[d-1] - c[d-2]
//! ```

use serde::{Deserialize, Serialize};

use crate::error::{NestError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Kernel {
    weights: Vec<f64>,
}

impl Kernel {
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty() || weights.len() % 2 == 0 {
            return Err(NestError::InvalidConfig(format!("kernel length must be odd, got {}", weights.len())));
        }
        if weights.iter().any(|w| !w.is_finite()) {
            return Err(NestError::InvalidConfig("kernel weights must be finite".into()));
        }
        Ok(Kernel { weights })
    }

    pub fn identity() -> Self {
        Kernel { weights: vec![1.0] }
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }
}

impl Default for Kernel {
    fn default() -> Self {
        Kernel {
            weights: vec![0.25, 0.5, 0.25],
        }
    }
}

/// Zero-padded, length-preserving convolution centered on the kernel.
pub fn convolve_same(state: &[f64], kernel: &Kernel) -> Vec<f64> {
    let d = state.len() as isize;
    let half = (kernel.len() / 2) as isize;
    (0..d)
        .map(|j| {
            kernel
                .weights
                .iter()
                .enumerate()
                .filter_map(|(k, w)| {
                    let idx = j + half - k as isize;
                    (0..d).contains(&idx).then(|| w * state[idx as usize])
                })
                .sum()
        })
        .collect()
}

/// Discrete divergence of the kernel-convolved state.
pub fn kernel_flow(state: &[f64], kernel: &Kernel) -> Result<Vec<f64>> {
    let d = state.len();
    if d < 2 {
        return Err(NestError::Shape(format!("kernel flow needs dimension >= 2, got {d}")));
    }
    let c = convolve_same(state, kernel);
    let mut out = vec![0.0; d];
    out[0] = c[1] - c[0];
    out[d - 1] = c[d - 1] - c[d - 2];
    for j in 1..d - 1 {
        out[j] = (c[j + 1] - c[j - 1]) / 2.0;
    }
    Ok(out)
}

fn check_finite(state: &[f64], step: usize) -> Result<()> {
    if state.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(NestError::Divergence { step })
    }
}

fn axpy(y: &[f64], a: f64, x: &[f64]) -> Vec<f64> {
    y.iter().zip(x).map(|(y, x)| y + a * x).collect()
}

/// Integrates `dS/dt = field(S, A)` with classical fourth-order Runge-Kutta.
///
/// The action signal is piecewise constant: step `i` uses `actions[i]`, and a
/// single-element signal is held for every step. Returns `steps + 1` states.
pub fn evolve_first_order<A, F>(initial: &[f64], actions: &[A], field: F, dt: f64, steps: usize) -> Result<Vec<Vec<f64>>>
where
    F: Fn(&[f64], &A) -> Vec<f64>,
{
    if !(dt > 0.0) {
        return Err(NestError::InvalidConfig(format!("dt must be positive, got {dt}")));
    }
    if actions.is_empty() || (actions.len() != 1 && actions.len() < steps) {
        return Err(NestError::Shape(format!(
            "action signal of length {} cannot drive {steps} steps",
            actions.len()
        )));
    }
    check_finite(initial, 0)?;
    let mut traj = Vec::with_capacity(steps + 1);
    traj.push(initial.to_vec());
    for i in 0..steps {
        let a = if actions.len() == 1 { &actions[0] } else { &actions[i] };
        let s = traj.last().expect("non-empty");
        let k1 = field(s, a);
        let k2 = field(&axpy(s, dt / 2.0, &k1), a);
        let k3 = field(&axpy(s, dt / 2.0, &k2), a);
        let k4 = field(&axpy(s, dt, &k3), a);
        let next: Vec<f64> = (0..s.len())
            .map(|j| s[j] + dt / 6.0 * (k1[j] + 2.0 * k2[j] + 2.0 * k3[j] + k4[j]))
            .collect();
        check_finite(&next, i + 1)?;
        traj.push(next);
    }
    Ok(traj)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DampedConfig {
    pub lambda: f64,
    pub dt: f64,
    pub steps: usize,
}

impl DampedConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) {
            return Err(NestError::InvalidConfig(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if !(self.dt > 0.0) {
            return Err(NestError::InvalidConfig(format!("dt must be positive, got {}", self.dt)));
        }
        if self.steps == 0 {
            return Err(NestError::InvalidConfig("steps must be positive".into()));
        }
        Ok(())
    }

    /// Step-size bound below which the damped linear system with largest
    /// natural frequency `omega_max` loses energy monotonically.
    pub fn stability_bound(lambda: f64, omega_max: f64) -> f64 {
        2.0 / (lambda + 2.0 * omega_max)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DampedTrajectory {
    pub positions: Vec<Vec<f64>>,
    pub velocities: Vec<Vec<f64>>,
}

/// Semi-implicit (symplectic) Euler for `S'' + lambda S' + h(S) = 0`:
///
/// ```text
/// v <- v - dt * (lambda * v + h(s))
/// s <- s + dt * v
/// ```
pub fn evolve_damped<H>(initial: &[f64], initial_velocity: &[f64], h: H, cfg: &DampedConfig) -> Result<DampedTrajectory>
where
    H: Fn(&[f64]) -> Vec<f64>,
{
    cfg.validate()?;
    if initial.len() != initial_velocity.len() {
        return Err(NestError::Shape(format!(
            "position has {} components, velocity {}",
            initial.len(),
            initial_velocity.len()
        )));
    }
    check_finite(initial, 0)?;
    check_finite(initial_velocity, 0)?;
    let mut s = initial.to_vec();
    let mut v = initial_velocity.to_vec();
    let mut positions = Vec::with_capacity(cfg.steps + 1);
    let mut velocities = Vec::with_capacity(cfg.steps + 1);
    positions.push(s.clone());
    velocities.push(v.clone());
    for step in 1..=cfg.steps {
        let force = h(&s);
        for j in 0..s.len() {
            v[j] -= cfg.dt * (cfg.lambda * v[j] + force[j]);
            s[j] += cfg.dt * v[j];
        }
        check_finite(&s, step)?;
        check_finite(&v, step)?;
        positions.push(s.clone());
        velocities.push(v.clone());
    }
    Ok(DampedTrajectory { positions, velocities })
}

/// Modified energy of the semi-implicit Euler scheme for a linear force
/// `h(s) = K s`, given `ks = K s`:
///
/// ```text
/// E = |v|^2 / 2 + s.Ks / 2 - dt (1 - dt lambda / 2) Ks.v / 2
/// ```
///
/// It is exactly conserved when `lambda = 0` and never increases for
/// `lambda > 0` and `dt` below [`DampedConfig::stability_bound`]. The plain
/// energy `|v|^2/2 + s.Ks/2` oscillates by O(dt) around it.
pub fn shadow_energy(s: &[f64], v: &[f64], ks: &[f64], lambda: f64, dt: f64) -> f64 {
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    0.5 * dot(v, v) + 0.5 * dot(s, ks) - 0.5 * dt * (1.0 - 0.5 * dt * lambda) * dot(ks, v)
}

/// Trapezoidal approximation of the integral of `|S(t) - S_hat(t)|^2`.
pub fn trajectory_loss(reference: &[Vec<f64>], estimate: &[Vec<f64>], dt: f64) -> Result<f64> {
    if reference.len() != estimate.len() {
        return Err(NestError::Shape(format!(
            "trajectory lengths differ: {} vs {}",
            reference.len(),
            estimate.len()
        )));
    }
    if reference.len() < 2 {
        return Err(NestError::Shape("trajectories need at least two samples".into()));
    }
    let n = reference.len();
    let mut total = 0.0;
    for (i, (r, e)) in reference.iter().zip(estimate).enumerate() {
        if r.len() != e.len() {
            return Err(NestError::Shape(format!("sample {i} dimension mismatch")));
        }
        let sq: f64 = r.iter().zip(e).map(|(a, b)| (a - b) * (a - b)).sum();
        let w = if i == 0 || i == n - 1 { 0.5 } else { 1.0 };
        total += w * sq;
    }
    Ok(total * dt)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_kernel_on_ramp_is_ones() {
        let out = kernel_flow(&[0.0, 1.0, 2.0, 3.0], &Kernel::identity()).unwrap();
        assert_eq!(out, vec![1.0; 4]);
    }

    #[test]
    fn identity_kernel_on_constant_is_zero() {
        let out = kernel_flow(&[2.5; 6], &Kernel::identity()).unwrap();
        assert_eq!(out, vec![0.0; 6]);
    }

    #[test]
    fn kernel_flow_rejects_scalar_state() {
        assert!(kernel_flow(&[1.0], &Kernel::identity()).is_err());
    }

    #[test]
    fn kernel_must_be_odd() {
        assert!(Kernel::new(vec![0.5, 0.5]).is_err());
        assert!(Kernel::new(vec![f64::NAN]).is_err());
    }

    #[test]
    fn zero_field_is_constant() {
        let traj = evolve_first_order(&[1.0, -2.0], &[()], |s, _| vec![0.0; s.len()], 0.1, 20).unwrap();
        assert_eq!(traj.len(), 21);
        assert!(traj.iter().all(|s| s == &vec![1.0, -2.0]));
    }

    #[test]
    fn first_order_reports_divergence_step() {
        let err = evolve_first_order(&[1.0], &[()], |s, _| vec![s[0] * s[0] * 1e200], 1.0, 10).unwrap_err();
        assert!(matches!(err, NestError::Divergence { step } if step >= 1));
    }

    #[test]
    fn damped_without_force_decays_geometrically() {
        let cfg = DampedConfig {
            lambda: 2.0,
            dt: 0.01,
            steps: 600,
        };
        let traj = evolve_damped(&[0.0], &[1.0], |s| vec![0.0; s.len()], &cfg).unwrap();
        let factor = 1.0 - cfg.dt * cfg.lambda;
        for w in traj.velocities.windows(2) {
            assert!(w[1][0].abs() < w[0][0].abs());
            assert!((w[1][0] - factor * w[0][0]).abs() < 1e-15);
        }
        // position converges to s0 + v0 * dt * factor / (1 - factor)
        let limit = cfg.dt * factor / (1.0 - factor);
        assert!((traj.positions[600][0] - limit).abs() < 1e-3);
    }

    #[test]
    fn damped_rejects_bad_config() {
        let bad = DampedConfig {
            lambda: -1.0,
            dt: 0.1,
            steps: 1,
        };
        assert!(evolve_damped(&[0.0], &[0.0], |s| s.to_vec(), &bad).is_err());
    }

    #[test]
    fn loss_of_identical_trajectories_is_zero() {
        let a = vec![vec![1.0, 2.0]; 5];
        assert_eq!(trajectory_loss(&a, &a, 0.1).unwrap(), 0.0);
    }

    #[test]
    fn loss_of_constant_offset() {
        let c = 0.3;
        let (d, n, dt) = (4, 11, 0.05);
        let r = vec![vec![0.0; d]; n];
        let e = vec![vec![c; d]; n];
        let expected = c * c * d as f64 * (n - 1) as f64 * dt;
        assert!((trajectory_loss(&r, &e, dt).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn loss_rejects_mismatch() {
        assert!(trajectory_loss(&[vec![0.0], vec![0.0]], &[vec![0.0]], 0.1).is_err());
    }
    fn decay(dt: f64) -> f64 {
        let steps = (1.0 / dt).round() as usize;
        let traj = evolve_first_order(&[1.0], &[()], |s, _| vec![-s[0]], dt, steps).unwrap();
        traj[steps][0]
    }

    #[test]
    fn rk4_matches_exponential_decay() {
        assert!((decay(1e-3) - (-1.0f64).exp()).abs() < 1e-6);
    }

    #[test]
    fn rk4_is_fourth_order() {
        let exact = (-1.0f64).exp();
        let errs: Vec<f64> = [0.1, 0.05, 0.025].iter().map(|dt| (decay(*dt) - exact).abs()).collect();
        for w in errs.windows(2) {
            let order = (w[0] / w[1]).log2();
            assert!(order >= 3.8, "order {order}");
        }
    }

    fn underdamped(lambda: f64, omega: f64, t: f64) -> f64 {
        let wd = (omega * omega - lambda * lambda / 4.0).sqrt();
        (-lambda * t / 2.0).exp() * ((wd * t).cos() + lambda / (2.0 * wd) * (wd * t).sin())
    }

    #[test]
    fn damped_oscillator_matches_closed_form() {
        let cfg = DampedConfig {
            lambda: 0.5,
            dt: 1e-3,
            steps: 10_000,
        };
        let traj = evolve_damped(&[1.0], &[0.0], |s| vec![s[0]], &cfg).unwrap();
        let want = underdamped(0.5, 1.0, 10.0);
        assert!((traj.positions[10_000][0] - want).abs() < 1e-3);
    }

    #[test]
    fn undamped_energy_drift_is_small() {
        let cfg = DampedConfig {
            lambda: 0.0,
            dt: 1e-3,
            steps: 10_000,
        };
        let traj = evolve_damped(&[1.0], &[0.0], |s| vec![s[0]], &cfg).unwrap();
        let energy = |s: f64, v: f64| 0.5 * v * v + 0.5 * s * s;
        let e0 = energy(1.0, 0.0);
        for (s, v) in traj.positions.iter().zip(&traj.velocities) {
            assert!((energy(s[0], v[0]) - e0).abs() < 1e-3);
        }
    }

    #[test]
    fn undamped_shadow_energy_is_conserved() {
        let cfg = DampedConfig {
            lambda: 0.0,
            dt: 0.05,
            steps: 2000,
        };
        let k = 1.7f64 * 1.7;
        let traj = evolve_damped(&[1.0], &[0.3], |s| vec![k * s[0]], &cfg).unwrap();
        let e = |i: usize| {
            let s = &traj.positions[i];
            shadow_energy(s, &traj.velocities[i], &[k * s[0]], 0.0, cfg.dt)
        };
        let e0 = e(0);
        for i in 0..=cfg.steps {
            assert!((e(i) - e0).abs() < 1e-12);
        }
    }

    fn trapezoid_oracle(r: &[Vec<f64>], e: &[Vec<f64>], dt: f64) -> f64 {
        let f: Vec<f64> = r.iter().zip(e).map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()).collect();
        (1..f.len()).map(|i| dt * (f[i - 1] + f[i]) / 2.0).sum()
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn vec_of(n: usize) -> impl Strategy<Value = Vec<f64>> {
            prop::collection::vec(-10.0f64..10.0, n)
        }

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(256))]

            #[test]
            fn kernel_flow_is_linear(
                (x, y, k) in (2usize..12, 0usize..4).prop_flat_map(|(d, h)| (vec_of(d), vec_of(d), vec_of(2 * h + 1))),
                a in -5.0f64..5.0,
                b in -5.0f64..5.0,
            ) {
                let k = Kernel::new(k).unwrap();
                let mix: Vec<f64> = x.iter().zip(&y).map(|(x, y)| a * x + b * y).collect();
                let lhs = kernel_flow(&mix, &k).unwrap();
                let fx = kernel_flow(&x, &k).unwrap();
                let fy = kernel_flow(&y, &k).unwrap();
                for j in 0..lhs.len() {
                    let rhs = a * fx[j] + b * fy[j];
                    prop_assert!((lhs[j] - rhs).abs() <= 1e-12 * (1.0 + rhs.abs().max(lhs[j].abs())));
                }
            }

            #[test]
            fn identity_kernel_on_any_ramp(d in 2usize..40, slope in -3.0f64..3.0, off in -5.0f64..5.0) {
                let ramp: Vec<f64> = (0..d).map(|j| off + slope * j as f64).collect();
                let out = kernel_flow(&ramp, &Kernel::identity()).unwrap();
                for v in out {
                    prop_assert!((v - slope).abs() < 1e-12);
                }
            }

            #[test]
            fn damped_shadow_energy_never_increases(
                omegas in prop::collection::vec(0.05f64..4.0, 1..4),
                lambda in 0.0f64..3.0,
                frac in 0.01f64..0.99,
                seed in any::<u64>(),
            ) {
                use rand::Rng;
                let wmax = omegas.iter().cloned().fold(0.0, f64::max);
                let dt = frac * DampedConfig::stability_bound(lambda, wmax);
                let k: Vec<f64> = omegas.iter().map(|w| w * w).collect();
                let mut rng = crate::seed::rng_for(seed, "energy", 0);
                let s0: Vec<f64> = (0..k.len()).map(|_| rng.random_range(-2.0..2.0)).collect();
                let v0: Vec<f64> = (0..k.len()).map(|_| rng.random_range(-2.0..2.0)).collect();
                let kk = k.clone();
                let force = move |s: &[f64]| s.iter().zip(&kk).map(|(s, k)| s * k).collect::<Vec<f64>>();
                let cfg = DampedConfig { lambda, dt, steps: 300 };
                let traj = evolve_damped(&s0, &v0, &force, &cfg).unwrap();
                let mut prev = f64::INFINITY;
                for (s, v) in traj.positions.iter().zip(&traj.velocities) {
                    let e = shadow_energy(s, v, &force(s), lambda, dt);
                    prop_assert!(e >= 0.0);
                    prop_assert!(e <= prev + 1e-12 * (1.0 + prev.abs().min(1e12)));
                    prev = e;
                }
            }

            #[test]
            fn trajectory_loss_matches_direct_sum(
                (r, e) in (2usize..20, 1usize..5).prop_flat_map(|(n, d)| (
                    prop::collection::vec(vec_of(d), n),
                    prop::collection::vec(vec_of(d), n),
                )),
                dt in 1e-3f64..1.0,
            ) {
                let got = trajectory_loss(&r, &e, dt).unwrap();
                let want = trapezoid_oracle(&r, &e, dt);
                prop_assert!(got >= 0.0);
                prop_assert!((got - want).abs() <= 1e-12 * (1.0 + want));
                prop_assert_eq!(trajectory_loss(&r, &r, dt).unwrap(), 0.0);
                prop_assert_eq!(got == 0.0, r == e);
            }
        }
    }
}
