//! Two-objective point-mass environment and a one-knob behavior family.
//!
//! The state is `(position, velocity)`, the action a scalar force. Objective 1
//! rewards forward velocity, objective 2 penalizes energy (`-a²`). The behavior
//! family tracks a target velocity set by the knob `ω ∈ [0, 1]`, so returns are
//! a smooth monotone function of `ω`.

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::util::{rng_from, Rng};

pub const STATE_DIM: usize = 2;
pub const ACTION_DIM: usize = 1;
pub const N_OBJECTIVES: usize = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnvConfig {
    pub dt: f64,
    pub drag: f64,
    pub gain: f64,
    pub ctrl_gain: f64,
    pub noise_sigma: f64,
    pub horizon: usize,
    pub seed: u64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        EnvConfig {
            dt: 1.0,
            drag: 0.05,
            gain: 0.2,
            ctrl_gain: 1.0,
            noise_sigma: 0.05,
            horizon: 64,
            seed: 0,
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.drag > 0.0
            && self.drag < 1.0
            && self.gain > 0.0
            && self.noise_sigma >= 0.0
            && self.horizon >= 2
            && self.dt.is_finite()
            && self.ctrl_gain.is_finite()
            && self.noise_sigma.is_finite();
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(
                "env",
                format!("invalid environment config {self:?}"),
            ))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct State {
    pub x: f64,
    pub v: f64,
}

impl State {
    pub const REST: State = State { x: 0.0, v: 0.0 };

    pub fn as_array(&self) -> [f64; STATE_DIM] {
        [self.x, self.v]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Transition {
    pub state: State,
    pub action: f64,
    pub reward: [f64; N_OBJECTIVES],
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub knob: f64,
    pub transitions: Vec<Transition>,
    pub returns: [f64; N_OBJECTIVES],
}

impl Trajectory {
    /// Builds a trajectory whose `returns` is the componentwise reward sum.
    pub fn from_transitions(knob: f64, transitions: Vec<Transition>) -> Self {
        let mut returns = [0.0; N_OBJECTIVES];
        for t in &transitions {
            for (r, x) in returns.iter_mut().zip(t.reward) {
                *r += x;
            }
        }
        Trajectory {
            knob,
            transitions,
            returns,
        }
    }

    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }
}

/// One transition of the dynamics. Returns the next state and the reward vector.
pub fn step(state: State, action: f64, cfg: &EnvConfig) -> Result<(State, [f64; N_OBJECTIVES])> {
    if !(state.x.is_finite() && state.v.is_finite() && action.is_finite()) {
        return Err(Error::invalid("env", "invalid state/action"));
    }
    let v = state.v + cfg.gain * action.clamp(-1.0, 1.0) - cfg.drag * state.v;
    let x = state.x + cfg.dt * v;
    Ok((State { x, v }, [v, -action * action]))
}

/// Deterministic part of the behavior family: track velocity `ω`.
pub fn knob_policy_mean(knob: f64, state: State, cfg: &EnvConfig) -> f64 {
    (cfg.ctrl_gain * (knob - state.v)).clamp(-1.0, 1.0)
}

pub fn check_knob(knob: f64) -> Result<()> {
    if (0.0..=1.0).contains(&knob) {
        Ok(())
    } else {
        Err(Error::invalid(
            "env",
            format!("behavior knob {knob} outside [0, 1]"),
        ))
    }
}

/// Runs one episode of the knob policy from rest.
pub fn rollout(knob: f64, cfg: &EnvConfig, rng: &mut Rng) -> Result<Trajectory> {
    check_knob(knob)?;
    cfg.validate()?;
    let noise = Normal::new(0.0, cfg.noise_sigma)
        .map_err(|e| Error::invalid("env", format!("noise distribution: {e}")))?;
    let mut state = State::REST;
    let mut transitions = Vec::with_capacity(cfg.horizon);
    for _ in 0..cfg.horizon {
        let eps = if cfg.noise_sigma > 0.0 {
            noise.sample(rng)
        } else {
            0.0
        };
        let action = knob_policy_mean(knob, state, cfg) + eps;
        let (next, reward) = step(state, action, cfg)?;
        transitions.push(Transition {
            state,
            action,
            reward,
        });
        state = next;
    }
    Ok(Trajectory::from_transitions(knob, transitions))
}

/// `P` equispaced knobs covering `[0, 1]`.
pub fn knob_grid(n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![0.0],
        _ => (0..n).map(|i| i as f64 / (n - 1) as f64).collect(),
    }
}

/// `traj_per_knob` rollouts for each knob, knob-major order.
pub fn population(
    cfg: &EnvConfig,
    knobs: &[f64],
    traj_per_knob: usize,
    rng: &mut Rng,
) -> Result<Vec<Trajectory>> {
    if knobs.is_empty() {
        return Err(Error::invalid("env", "empty knob list"));
    }
    if traj_per_knob == 0 {
        return Err(Error::invalid("env", "traj_per_knob must be at least 1"));
    }
    let mut out = Vec::with_capacity(knobs.len() * traj_per_knob);
    for &k in knobs {
        for _ in 0..traj_per_knob {
            out.push(rollout(k, cfg, rng)?);
        }
    }
    Ok(out)
}

/// Monte Carlo mean return of the knob policy; sample `i` uses seed `cfg.seed + i`.
pub fn oracle_return(knob: f64, cfg: &EnvConfig, n_mc: usize) -> Result<[f64; N_OBJECTIVES]> {
    if n_mc == 0 {
        return Err(Error::invalid("env", "n_mc must be at least 1"));
    }
    let mut acc = [0.0; N_OBJECTIVES];
    for i in 0..n_mc {
        let mut rng = rng_from(cfg.seed.wrapping_add(i as u64));
        let t = rollout(knob, cfg, &mut rng)?;
        for (a, r) in acc.iter_mut().zip(t.returns) {
            *a += r;
        }
    }
    Ok(acc.map(|a| a / n_mc as f64))
}

/// Uniform knob draw, used when sampling fresh behaviors.
pub fn sample_knob(rng: &mut Rng) -> f64 {
    rng.gen_range(0.0..=1.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quiet() -> EnvConfig {
        EnvConfig {
            noise_sigma: 0.0,
            ..EnvConfig::default()
        }
    }

    #[test]
    fn step_examples() {
        let cfg = EnvConfig::default();
        let (s, r) = step(State::REST, 0.0, &cfg).unwrap();
        assert_eq!((s.x, s.v), (0.0, 0.0));
        assert_eq!(r, [0.0, -0.0]);

        let (s, r) = step(State::REST, 1.0, &cfg).unwrap();
        assert!((s.v - 0.2).abs() < 1e-15);
        assert!((r[0] - 0.2).abs() < 1e-15);
        assert_eq!(r[1], -1.0);

        let (s, r) = step(State { x: 0.0, v: 4.0 }, 0.0, &cfg).unwrap();
        assert!((s.v - 3.8).abs() < 1e-12);
        assert!((r[0] - 3.8).abs() < 1e-12);
        assert_eq!(r[1], 0.0);
    }

    #[test]
    fn step_clips_actuation_but_not_penalty() {
        let cfg = EnvConfig::default();
        let (s, r) = step(State::REST, 3.0, &cfg).unwrap();
        assert!((s.v - 0.2).abs() < 1e-15);
        assert_eq!(r[1], -9.0);
    }

    #[test]
    fn step_rejects_non_finite() {
        let cfg = EnvConfig::default();
        let err = step(State { x: f64::NAN, v: 0.0 }, 0.0, &cfg).unwrap_err();
        assert!(err.to_string().contains("invalid state/action"));
        assert!(step(State::REST, f64::INFINITY, &cfg).is_err());
    }

    #[test]
    fn zero_knob_is_a_fixed_point() {
        let t = rollout(0.0, &quiet(), &mut rng_from(1)).unwrap();
        assert!(t.transitions.iter().all(|tr| tr.action == 0.0));
        assert_eq!(t.returns, [0.0, 0.0]);
    }

    #[test]
    fn full_knob_matches_direct_recursion() {
        let cfg = quiet();
        // Independent re-derivation of the closed-loop recursion.
        let (mut v, mut r1, mut r2) = (0.0_f64, 0.0_f64, 0.0_f64);
        for _ in 0..64 {
            let a = (1.0 - v).clamp(-1.0, 1.0);
            v = v + 0.2 * a - 0.05 * v;
            r1 += v;
            r2 -= a * a;
        }
        let t = rollout(1.0, &cfg, &mut rng_from(3)).unwrap();
        assert_eq!(t.returns, [r1, r2]);
        assert_eq!(t.len(), 64);
    }

    #[test]
    fn rollout_is_deterministic_and_sums_rewards() {
        let cfg = EnvConfig::default();
        let a = rollout(0.37, &cfg, &mut rng_from(11)).unwrap();
        let b = rollout(0.37, &cfg, &mut rng_from(11)).unwrap();
        assert_eq!(a, b);
        let mut sum = [0.0; 2];
        for t in &a.transitions {
            assert!(t.reward[1] <= 0.0);
            sum[0] += t.reward[0];
            sum[1] += t.reward[1];
        }
        assert_eq!(sum, a.returns);
    }

    #[test]
    fn rollout_rejects_out_of_range_knob() {
        assert!(rollout(1.5, &EnvConfig::default(), &mut rng_from(0)).is_err());
        assert!(rollout(-0.1, &EnvConfig::default(), &mut rng_from(0)).is_err());
    }

    #[test]
    fn population_counts() {
        let cfg = EnvConfig::default();
        let pop = population(&cfg, &[0.2, 0.8], 1, &mut rng_from(0)).unwrap();
        assert_eq!(pop.len(), 2);
        assert_ne!(pop[0].knob, pop[1].knob);

        let grid = knob_grid(40);
        let pop = population(&cfg, &grid, 20, &mut rng_from(0)).unwrap();
        assert_eq!(pop.len(), 800);
        assert_eq!(pop.iter().map(Trajectory::len).sum::<usize>(), 51_200);

        assert!(population(&cfg, &[], 3, &mut rng_from(0)).is_err());
    }

    #[test]
    fn return_landscape_is_monotone() {
        let cfg = quiet();
        let grid = knob_grid(40);
        let rs: Vec<_> = grid
            .iter()
            .map(|&k| oracle_return(k, &cfg, 1).unwrap())
            .collect();
        for w in rs.windows(2) {
            assert!(w[1][0] > w[0][0], "R1 not increasing: {:?}", w);
            assert!(w[1][1] <= w[0][1], "R2 not nonincreasing: {:?}", w);
        }
    }

    #[test]
    fn oracle_single_sample_equals_rollout() {
        let cfg = EnvConfig {
            seed: 42,
            ..EnvConfig::default()
        };
        let o = oracle_return(0.6, &cfg, 1).unwrap();
        let t = rollout(0.6, &cfg, &mut rng_from(42)).unwrap();
        assert_eq!(o, t.returns);
        assert_eq!(
            oracle_return(0.0, &quiet(), 17).unwrap(),
            [0.0, 0.0]
        );
    }

    #[test]
    fn oracle_fixture_at_half_knob() {
        // Frozen from a 10 000-sample run of this oracle (seed 0, default config).
        let o = oracle_return(0.5, &EnvConfig::default(), 10_000).unwrap();
        assert!((o[0] - ORACLE_HALF[0]).abs() < 1e-9, "{o:?}");
        assert!((o[1] - ORACLE_HALF[1]).abs() < 1e-9, "{o:?}");
    }

    const ORACLE_HALF: [f64; 2] = [24.39855452843242, -1.5005327232634904];
}
