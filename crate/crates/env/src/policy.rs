//! Scripted demonstration controllers.
//!
//! A policy is a pure function of the world state plus a handful of
//! per-episode traits (pace, approach dither, detour side) drawn once
//! at episode start. The traits make demonstrations diverse without
//! costing reliability: the obstacle task in particular routes around
//! either side 50/50 by episode seed, which is what gives the action
//! distribution two genuine modes for the same initial observation.

use rand::Rng;

use crate::vec2::{add, clamp_axes, cross, dir, dist, dot, norm, perp, scale, seg_dist, sub};
use crate::world::{Task, WorldState, CONTACT_RADIUS, MAX_DELTA, OBSTACLE_CENTER, OBSTACLE_RADIUS};

/// Detour side for the obstacle task. Left is the counter-clockwise
/// side of the cube-to-target axis in arena coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Route {
    Left,
    Right,
}

impl Route {
    fn sign(self) -> f32 {
        match self {
            Route::Left => 1.0,
            Route::Right => -1.0,
        }
    }
}

/// Pushing starts from this far behind the cube along the push axis.
const PUSH_START: f32 = 0.085;
/// The controller first lines up at this staging distance, so the final
/// approach to the push start is a straight on-axis run.
const STAGING: f32 = 0.16;
/// Detour waypoints sit this far from the obstacle center.
const DETOUR_OFFSET: f32 = 0.26;

#[derive(Debug, Clone)]
pub struct ScriptedPolicy {
    task: Task,
    /// Pace in (0, 1]; scales the per-step displacement cap.
    speed: f32,
    /// Amplitude of the perpendicular dither on approach legs.
    wobble_amp: f32,
    wobble_phase: f32,
    route: Route,
}

impl ScriptedPolicy {
    /// Draw per-episode traits. Consumes the same number of rng values
    /// for every task, so seed streams stay aligned across tasks.
    pub fn sample(task: Task, rng: &mut impl Rng) -> Self {
        let speed = rng.gen_range(0.85..=1.0);
        let wobble_amp = rng.gen_range(0.004..0.012);
        let wobble_phase = rng.gen_range(0.0..std::f32::consts::TAU);
        let route = if rng.gen::<bool>() { Route::Left } else { Route::Right };
        ScriptedPolicy { task, speed, wobble_amp, wobble_phase, route }
    }

    /// Full-pace, dither-free controller with a forced detour side.
    /// Used to locate the demonstration modes when probing whether a
    /// model reproduces or averages them.
    pub fn nominal(task: Task, route: Route) -> Self {
        ScriptedPolicy { task, speed: 1.0, wobble_amp: 0.0, wobble_phase: 0.0, route }
    }

    pub fn route(&self) -> Route {
        self.route
    }

    pub fn act(&self, state: &WorldState) -> Vec<f32> {
        match self.task {
            Task::Push => {
                let d = self.push_plan(state, state.target);
                vec![d[0], d[1]]
            }
            Task::PushAroundObstacle => {
                let d = self.push_plan(state, self.leg_goal(state));
                vec![d[0], d[1]]
            }
            Task::Pick => self.pick_act(state),
        }
    }

    /// Drive the cube toward `goal` by pushing from behind. The cube and
    /// effector move rigidly while in contact, so lateral alignment must
    /// be established before engaging; once pushing, the controller
    /// steers by re-aiming the shared delta each step.
    fn push_plan(&self, s: &WorldState, goal: [f32; 2]) -> [f32; 2] {
        let cap = self.speed * MAX_DELTA;
        let err = sub(goal, s.cube);
        if norm(err) < 1e-6 {
            return [0.0, 0.0];
        }
        let u = dir(err);
        let v = sub(s.effector, s.cube);
        let along = dot(v, u);
        let lateral = cross(u, v);
        if (-(STAGING + 0.01)..0.0).contains(&along) && lateral.abs() <= 0.025 {
            let mut step = (0.9 * norm(err)).min(cap);
            if dist(s.effector, s.cube) >= CONTACT_RADIUS {
                // Engaging from out of contact: cap the advance so the
                // effector settles just behind the cube instead of
                // sailing past its center in one uncontacted step. In
                // contact the pair moves rigidly, so no cap is needed.
                step = step.min((-along - 0.012).max(0.0));
            }
            clamp_axes(scale(u, step), cap)
        } else if dist(s.effector, s.cube) < 0.09 && lateral.abs() > 0.04 {
            // Misaligned and nearly touching, as after an obstacle leg
            // switch rotates the push axis: back straight off first.
            // Radial retreat has no motion component toward the cube,
            // so it can never shove it.
            let out = if norm(v) < 1e-9 { perp(u) } else { dir(v) };
            clamp_axes(scale(out, cap), cap)
        } else if along > -0.02 {
            // Drifted in front of the cube: swing around on its own side
            // before lining up again.
            let side = if lateral >= 0.0 { 1.0 } else { -1.0 };
            let around = add(add(s.cube, scale(perp(u), 0.20 * side)), scale(u, -0.08));
            self.goto(s, around, cap, false)
        } else {
            let staging = add(s.cube, scale(u, -STAGING));
            if dist(s.effector, staging) > 0.03 {
                self.goto(s, staging, cap, true)
            } else {
                self.goto(s, add(s.cube, scale(u, -PUSH_START)), cap, false)
            }
        }
    }

    /// Obstacle task legs: push toward a side waypoint until the direct
    /// line from cube to target clears the obstacle by a cube-and-gap
    /// margin, then push for the target itself.
    fn leg_goal(&self, s: &WorldState) -> [f32; 2] {
        let clearance = OBSTACLE_RADIUS + CONTACT_RADIUS;
        if seg_dist(OBSTACLE_CENTER, s.cube, s.target) > clearance {
            return s.target;
        }
        let u = dir(sub(s.target, s.cube));
        add(OBSTACLE_CENTER, scale(perp(u), DETOUR_OFFSET * self.route.sign()))
    }

    fn pick_act(&self, s: &WorldState) -> Vec<f32> {
        let cap = self.speed * MAX_DELTA;
        if s.carried {
            if dist(s.effector, s.target) > 0.05 {
                let d = self.goto(s, s.target, cap, true);
                vec![d[0], d[1], 1.0]
            } else {
                vec![0.0, 0.0, -1.0]
            }
        } else if dist(s.cube, s.target) <= 0.06 {
            // Delivered; hold open so the cube stays put.
            vec![0.0, 0.0, -1.0]
        } else if dist(s.effector, s.cube) > 0.05 {
            let d = self.goto(s, s.cube, cap, true);
            vec![d[0], d[1], -1.0]
        } else {
            vec![0.0, 0.0, 1.0]
        }
    }

    fn goto(&self, s: &WorldState, p: [f32; 2], cap: f32, wobble: bool) -> [f32; 2] {
        let mut d = scale(sub(p, s.effector), 0.9);
        if wobble && norm(d) > 0.02 {
            let w = self.wobble_amp * (s.steps as f32 * 0.9 + self.wobble_phase).sin();
            d = add(d, scale(perp(dir(d)), w));
        }
        clamp_axes(d, cap)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::env_reset;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    #[test]
    fn sampled_traits_are_reproducible() {
        let (state, _) = env_reset(Task::Push, 8);
        let a = ScriptedPolicy::sample(Task::Push, &mut ChaCha12Rng::seed_from_u64(5));
        let b = ScriptedPolicy::sample(Task::Push, &mut ChaCha12Rng::seed_from_u64(5));
        assert_eq!(a.act(&state), b.act(&state));
        assert_eq!(a.route(), b.route());
    }

    #[test]
    fn actions_match_task_arity_and_bounds() {
        for task in Task::ALL {
            let (state, _) = env_reset(task, 2);
            let policy = ScriptedPolicy::sample(task, &mut ChaCha12Rng::seed_from_u64(9));
            let a = policy.act(&state);
            assert_eq!(a.len(), task.d_a());
            let bounds = task.action_bounds();
            for (v, b) in a.iter().zip(&bounds) {
                assert!(v.abs() <= *b + 1e-6, "{v} exceeds {b} on {task:?}");
            }
        }
    }

    #[test]
    fn forced_routes_diverge_from_the_first_action() {
        let (state, _) = env_reset(Task::PushAroundObstacle, 14);
        let left = ScriptedPolicy::nominal(Task::PushAroundObstacle, Route::Left).act(&state);
        let right = ScriptedPolicy::nominal(Task::PushAroundObstacle, Route::Right).act(&state);
        let gap = (0..2).map(|i| (left[i] - right[i]).powi(2)).sum::<f32>().sqrt();
        assert!(gap > 0.02, "detour sides should steer apart immediately, gap {gap}");
    }

    #[test]
    fn pick_controller_closes_over_the_cube() {
        let (mut state, _) = env_reset(Task::Pick, 21);
        let policy = ScriptedPolicy::nominal(Task::Pick, Route::Left);
        for _ in 0..32 {
            if state.carried {
                return;
            }
            let a = policy.act(&state);
            state = crate::world::env_step(Task::Pick, &state, &a);
        }
        panic!("never grabbed the cube");
    }
}
