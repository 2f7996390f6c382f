//! Planar reaching around a disc obstacle.
//!
//! The agent starts left of the obstacle and must reach a goal on its right.
//! Paths pass either above or below the disc, which makes expert behavior
//! bimodal at the start of every episode.

use rand::Rng as _;

use super::{Env, Step};
use crate::error::{ensure_dim, DmpoError, Result};
use crate::rng::{self, Rng};

#[derive(Clone, Debug, PartialEq)]
pub struct PointReachParams {
    pub start_x: f64,
    pub start_jitter: f64,
    pub goal: [f64; 2],
    pub goal_jitter: f64,
    /// Added to every sampled goal; visible in the observation.
    pub goal_shift: [f64; 2],
    pub obstacle: [f64; 2],
    pub radius: f64,
    pub max_action: f64,
    pub success_radius: f64,
    pub success_bonus: f64,
    pub contact_penalty: f64,
    pub max_steps: usize,
}

impl Default for PointReachParams {
    fn default() -> Self {
        PointReachParams {
            start_x: -0.7,
            start_jitter: 0.05,
            goal: [0.7, 0.0],
            goal_jitter: 0.1,
            goal_shift: [0.0, 0.0],
            obstacle: [0.0, 0.0],
            radius: 0.25,
            max_action: 0.2,
            success_radius: 0.05,
            success_bonus: 10.0,
            contact_penalty: 1.0,
            max_steps: 40,
        }
    }
}

impl PointReachParams {
    /// Goals moved 0.2 away from the demonstrated ones.
    pub fn shifted() -> Self {
        PointReachParams {
            goal_shift: [0.0, 0.2],
            ..PointReachParams::default()
        }
    }
}

/// Which side of the obstacle a path passed.
pub const ABOVE: usize = 0;
pub const BELOW: usize = 1;

#[derive(Clone, Debug)]
pub struct PointReach {
    params: PointReachParams,
    pos: [f64; 2],
    goal: [f64; 2],
    t: usize,
    done: bool,
    mode: Option<usize>,
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

impl PointReach {
    pub fn new(params: PointReachParams) -> Self {
        PointReach {
            pos: [params.start_x, 0.0],
            goal: params.goal,
            params,
            t: 0,
            done: true,
            mode: None,
        }
    }

    pub fn params(&self) -> &PointReachParams {
        &self.params
    }

    pub fn position(&self) -> [f64; 2] {
        self.pos
    }

    pub fn goal(&self) -> [f64; 2] {
        self.goal
    }

    /// Places the agent and goal directly; for tests and scripted scenarios.
    pub fn set_state(&mut self, pos: [f64; 2], goal: [f64; 2]) {
        self.pos = pos;
        self.goal = goal;
        self.t = 0;
        self.done = false;
        self.mode = None;
    }

    fn observation(&self) -> Vec<f64> {
        vec![self.pos[0], self.pos[1], self.goal[0], self.goal[1]]
    }
}

impl Env for PointReach {
    fn obs_dim(&self) -> usize {
        4
    }

    fn action_dim(&self) -> usize {
        2
    }

    fn action_bounds(&self) -> (f64, f64) {
        (-self.params.max_action, self.params.max_action)
    }

    fn max_steps(&self) -> usize {
        self.params.max_steps
    }

    fn reset(&mut self, seed: u64) -> Vec<f64> {
        let mut rng = rng::seeded(seed);
        let p = &self.params;
        let jitter = |rng: &mut Rng, w: f64| if w > 0.0 { rng.random_range(-w..=w) } else { 0.0 };
        let sy = jitter(&mut rng, p.start_jitter);
        let gy = jitter(&mut rng, p.goal_jitter);
        self.pos = [p.start_x, p.obstacle[1] + sy];
        self.goal = [p.goal[0] + p.goal_shift[0], p.goal[1] + gy + p.goal_shift[1]];
        self.t = 0;
        self.done = false;
        self.mode = None;
        self.observation()
    }

    fn step(&mut self, action: &[f64]) -> Result<Step> {
        if self.done {
            return Err(DmpoError::Env("step called after the episode ended".into()));
        }
        ensure_dim("action", 2, action.len())?;
        if action.iter().any(|a| !a.is_finite()) {
            return Err(DmpoError::Env(format!("non-finite action {action:?}")));
        }
        let p = &self.params;
        let a = [
            action[0].clamp(-p.max_action, p.max_action),
            action[1].clamp(-p.max_action, p.max_action),
        ];
        let mut next = [(self.pos[0] + a[0]).clamp(-1.0, 1.0), (self.pos[1] + a[1]).clamp(-1.0, 1.0)];
        let mut reward = 0.0;
        if dist(next, p.obstacle) < p.radius {
            next = self.pos;
            reward -= p.contact_penalty;
        }
        if self.mode.is_none() && self.pos[0] < p.obstacle[0] && next[0] >= p.obstacle[0] {
            self.mode = Some(if next[1] >= p.obstacle[1] { ABOVE } else { BELOW });
        }
        self.pos = next;
        self.t += 1;
        let d = dist(self.pos, self.goal);
        reward -= d;
        let success = d < p.success_radius;
        if success {
            reward += p.success_bonus;
        }
        let truncated = !success && self.t >= p.max_steps;
        self.done = success || truncated;
        Ok(Step {
            obs: self.observation(),
            reward,
            terminated: success,
            truncated,
            success,
        })
    }

    fn mode(&self) -> Option<usize> {
        self.mode
    }
}

/// Waypoint controller passing the obstacle on a fixed side.
#[derive(Clone, Debug)]
pub struct PointReachExpert {
    side: usize,
    stage: usize,
    clearance: f64,
}

impl PointReachExpert {
    pub fn new(side: usize) -> Self {
        PointReachExpert {
            side,
            stage: 0,
            clearance: 0.4,
        }
    }

    pub fn side(&self) -> usize {
        self.side
    }

    fn waypoint(&self, env: &PointReach) -> [f64; 2] {
        let c = env.params.obstacle;
        let dy = if self.side == ABOVE { self.clearance } else { -self.clearance };
        match self.stage {
            0 => [c[0] - 0.15, c[1] + dy],
            1 => [c[0] + 0.15, c[1] + dy],
            _ => env.goal,
        }
    }

    /// Moves toward the current waypoint at full speed, landing on it exactly
    /// when it is within one step.
    pub fn act(&mut self, env: &PointReach) -> [f64; 2] {
        let w = self.waypoint(env);
        let diff = [w[0] - env.pos[0], w[1] - env.pos[1]];
        let len = (diff[0] * diff[0] + diff[1] * diff[1]).sqrt();
        let max = env.params.max_action;
        if len <= max {
            if self.stage < 2 {
                self.stage += 1;
            }
            diff
        } else {
            [diff[0] * max / len, diff[1] * max / len]
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run_expert(seed: u64, side: usize) -> (bool, Option<usize>, usize) {
        let mut env = PointReach::new(PointReachParams::default());
        env.reset(seed);
        let mut expert = PointReachExpert::new(side);
        loop {
            let a = expert.act(&env);
            let s = env.step(&a).unwrap();
            if s.terminated || s.truncated {
                return (s.success, env.mode(), env.t);
            }
        }
    }

    #[test]
    fn expert_reaches_goal_on_both_sides() {
        for seed in 0..20 {
            for side in [ABOVE, BELOW] {
                let (ok, mode, len) = run_expert(seed, side);
                assert!(ok, "seed {seed} side {side}");
                assert_eq!(mode, Some(side));
                assert!(len < 20);
            }
        }
    }

    #[test]
    fn obstacle_blocks_and_penalizes() {
        let mut env = PointReach::new(PointReachParams::default());
        env.set_state([-0.35, 0.0], [0.7, 0.0]);
        let s = env.step(&[0.2, 0.0]).unwrap();
        assert_eq!(env.position(), [-0.35, 0.0]);
        assert!((s.reward - (-1.0 - 1.05)).abs() < 1e-12);
    }

    #[test]
    fn step_after_done_is_an_error() {
        let mut env = PointReach::new(PointReachParams::default());
        env.set_state([0.65, 0.0], [0.7, 0.0]);
        let s = env.step(&[0.05, 0.0]).unwrap();
        assert!(s.success && s.terminated);
        assert!(s.reward > 9.0);
        assert!(matches!(env.step(&[0.0, 0.0]), Err(DmpoError::Env(_))));
    }

    #[test]
    fn actions_and_positions_are_clamped() {
        let mut env = PointReach::new(PointReachParams::default());
        env.set_state([0.95, 0.95], [0.7, 0.0]);
        env.step(&[5.0, 0.1]).unwrap();
        assert_eq!(env.position(), [1.0, 1.0]);
    }

    #[test]
    fn reset_is_reproducible() {
        let mut a = PointReach::new(PointReachParams::default());
        let mut b = PointReach::new(PointReachParams::default());
        assert_eq!(a.reset(9), b.reset(9));
        assert_ne!(a.reset(9), a.reset(10));
    }

    #[test]
    fn shifted_goal_is_visible() {
        let mut a = PointReach::new(PointReachParams::default());
        let mut b = PointReach::new(PointReachParams::shifted());
        let oa = a.reset(4);
        let ob = b.reset(4);
        assert!((ob[3] - oa[3] - 0.2).abs() < 1e-12);
    }
}
