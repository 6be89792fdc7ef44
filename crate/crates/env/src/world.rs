//! Arena state, seeded resets, and kinematic stepping.
//!
//! The arena is the unit square. Dynamics are kinematic: the effector
//! moves by a capped per-axis delta; a cube in contact moves rigidly
//! with it (push tasks) or rides in the gripper (pick task). No
//! velocities, no friction.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::render::env_render;
use crate::vec2::{add, clamp01, dir, dist, dot, scale, sub};

/// Per-axis effector displacement cap, in arena units.
pub const MAX_DELTA: f32 = 0.08;
/// Effector-cube distance below which motion toward the cube pushes it.
pub const CONTACT_RADIUS: f32 = 0.075;
/// Closing the gripper within this distance of the cube grabs it.
pub const GRAB_RADIUS: f32 = 0.06;
/// Cube-target distance at which a task counts as solved.
pub const SUCCESS_RADIUS: f32 = 0.08;
pub const OBSTACLE_CENTER: [f32; 2] = [0.5, 0.5];
pub const OBSTACLE_RADIUS: f32 = 0.07;
/// Resets place cube and target at least this far apart.
pub const MIN_SEPARATION: f32 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Task {
    /// Push the cube until it rests within the success radius of the
    /// target.
    Push,
    /// Grab the cube, carry it to the target, release it. Actions gain
    /// a third gripper channel; the cube only moves while carried.
    Pick,
    /// Push with a circular obstacle between cube and target, so every
    /// demonstration detours on one side or the other.
    PushAroundObstacle,
}

impl Task {
    pub const ALL: [Task; 3] = [Task::Push, Task::Pick, Task::PushAroundObstacle];

    pub fn id(self) -> usize {
        match self {
            Task::Push => 0,
            Task::Pick => 1,
            Task::PushAroundObstacle => 2,
        }
    }

    pub fn from_id(id: usize) -> Option<Task> {
        Task::ALL.get(id).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Task::Push => "push",
            Task::Pick => "pick",
            Task::PushAroundObstacle => "push-around-obstacle",
        }
    }

    pub fn parse(s: &str) -> Option<Task> {
        Task::ALL.into_iter().find(|t| t.name() == s)
    }

    /// Action dimensionality: (dx, dy) plus a gripper channel for pick.
    pub fn d_a(self) -> usize {
        if self == Task::Pick {
            3
        } else {
            2
        }
    }

    pub fn has_obstacle(self) -> bool {
        self == Task::PushAroundObstacle
    }

    /// Per-axis symmetric action bounds in arena units; normalization
    /// to [-1, 1] divides by these.
    pub fn action_bounds(self) -> Vec<f32> {
        match self {
            Task::Pick => vec![MAX_DELTA, MAX_DELTA, 1.0],
            _ => vec![MAX_DELTA, MAX_DELTA],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorldState {
    pub effector: [f32; 2],
    pub cube: [f32; 2],
    pub target: [f32; 2],
    pub gripper_closed: bool,
    /// carried implies gripper closed and cube co-located with the
    /// effector.
    pub carried: bool,
    pub steps: u32,
}

/// Deterministic initial state and its rendering. The same (task, seed)
/// always yields the same placement.
pub fn env_reset(task: Task, seed: u64) -> (WorldState, Vec<f32>) {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let (cube, target, effector) = match task {
        Task::Push => sample_push(&mut rng),
        Task::Pick => sample_pick(&mut rng),
        Task::PushAroundObstacle => sample_obstacle(&mut rng),
    };
    let state = WorldState {
        effector,
        cube,
        target,
        gripper_closed: false,
        carried: false,
        steps: 0,
    };
    let image = env_render(task, &state);
    (state, image)
}

fn sample_push(rng: &mut ChaCha12Rng) -> ([f32; 2], [f32; 2], [f32; 2]) {
    for _ in 0..100_000 {
        let cube = [rng.gen_range(0.30..0.70), rng.gen_range(0.30..0.70)];
        let target = [rng.gen_range(0.25..0.75), rng.gen_range(0.25..0.75)];
        let effector = [rng.gen_range(0.10..0.90), rng.gen_range(0.10..0.90)];
        if !(MIN_SEPARATION..=0.45).contains(&dist(cube, target)) {
            continue;
        }
        // The effector starts behind the cube relative to the push
        // direction, so the approach never has to cross it.
        let u = dir(sub(target, cube));
        let de = dist(effector, cube);
        if (0.12..=0.45).contains(&de) && dot(sub(effector, cube), u) < -0.02 {
            return (cube, target, effector);
        }
    }
    unreachable!("reset sampling failed to converge");
}

fn sample_pick(rng: &mut ChaCha12Rng) -> ([f32; 2], [f32; 2], [f32; 2]) {
    for _ in 0..100_000 {
        let cube = [rng.gen_range(0.25..0.75), rng.gen_range(0.25..0.75)];
        let target = [rng.gen_range(0.20..0.80), rng.gen_range(0.20..0.80)];
        let effector = [rng.gen_range(0.12..0.88), rng.gen_range(0.12..0.88)];
        if (MIN_SEPARATION..=0.50).contains(&dist(cube, target))
            && (0.10..=0.45).contains(&dist(effector, cube))
        {
            return (cube, target, effector);
        }
    }
    unreachable!("reset sampling failed to converge");
}

fn sample_obstacle(rng: &mut ChaCha12Rng) -> ([f32; 2], [f32; 2], [f32; 2]) {
    for _ in 0..100_000 {
        // Cube and target sit on near-opposite sides of the obstacle,
        // so the straight line between them always crosses its disk.
        let theta = rng.gen_range(0.0..std::f32::consts::TAU);
        let r1 = rng.gen_range(0.24..0.30);
        let jitter = rng.gen_range(-0.25..0.25);
        let r2 = rng.gen_range(0.24..0.30);
        let cube = add(OBSTACLE_CENTER, [r1 * theta.cos(), r1 * theta.sin()]);
        let phi = theta + std::f32::consts::PI + jitter;
        let target = add(OBSTACLE_CENTER, [r2 * phi.cos(), r2 * phi.sin()]);
        let effector = [rng.gen_range(0.10..0.90), rng.gen_range(0.10..0.90)];
        let de = dist(effector, cube);
        let away_from_ring = dot(sub(effector, cube), dir(sub(OBSTACLE_CENTER, cube))) < -0.02;
        if (0.12..=0.40).contains(&de)
            && away_from_ring
            && dist(effector, OBSTACLE_CENTER) > OBSTACLE_RADIUS + 0.05
        {
            return (cube, target, effector);
        }
    }
    unreachable!("reset sampling failed to converge");
}

/// Kinematic step. The per-axis delta is clamped to MAX_DELTA and the
/// effector to the arena before anything else reacts, so out-of-bound
/// actions are safe.
pub fn env_step(task: Task, state: &WorldState, action: &[f32]) -> WorldState {
    assert_eq!(action.len(), task.d_a(), "action arity for {}", task.name());
    let desired = [
        action[0].clamp(-MAX_DELTA, MAX_DELTA),
        action[1].clamp(-MAX_DELTA, MAX_DELTA),
    ];
    let mut next = state.clone();
    next.steps = state.steps + 1;
    next.effector = clamp01(add(state.effector, desired));
    // The cube reacts to the displacement that actually happened, not
    // the request, so a wall-pinned effector cannot fling it.
    let moved = sub(next.effector, state.effector);

    match task {
        Task::Push | Task::PushAroundObstacle => {
            let in_contact = dist(state.effector, state.cube) < CONTACT_RADIUS;
            let toward_cube = dot(moved, sub(state.cube, state.effector)) > 0.0;
            if in_contact && toward_cube {
                next.cube = clamp01(add(state.cube, moved));
            }
            if task.has_obstacle() {
                next.effector = project_out_of_obstacle(next.effector, moved);
                next.cube = project_out_of_obstacle(next.cube, moved);
            }
        }
        Task::Pick => {
            let closing = action[2] > 0.0;
            if state.carried {
                // Held through the motion; released only at step end.
                next.cube = next.effector;
            }
            if closing {
                if !state.carried && dist(next.effector, state.cube) <= GRAB_RADIUS {
                    next.carried = true;
                    next.cube = next.effector;
                }
            } else {
                next.carried = false;
            }
            next.gripper_closed = closing;
        }
    }
    next
}

/// Positions may not rest inside the obstacle disk; anything that lands
/// there slides to the rim. A point exactly at the center exits along
/// its motion direction.
fn project_out_of_obstacle(p: [f32; 2], moved: [f32; 2]) -> [f32; 2] {
    let v = sub(p, OBSTACLE_CENTER);
    let d = dot(v, v).sqrt();
    if d >= OBSTACLE_RADIUS {
        return p;
    }
    let out = if d < 1e-6 { dir(moved) } else { scale(v, 1.0 / d) };
    if out == [0.0, 0.0] {
        return add(OBSTACLE_CENTER, [OBSTACLE_RADIUS, 0.0]);
    }
    add(OBSTACLE_CENTER, scale(out, OBSTACLE_RADIUS))
}

/// Task predicate. Pick additionally requires the cube to be at rest
/// outside the gripper; it can only have reached the target by being
/// carried, since pick dynamics never push it.
pub fn task_success(task: Task, state: &WorldState) -> bool {
    let near = dist(state.cube, state.target) <= SUCCESS_RADIUS;
    match task {
        Task::Pick => near && !state.carried,
        _ => near,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn physical(s: &WorldState) -> ([f32; 2], [f32; 2], [f32; 2], bool, bool) {
        (s.effector, s.cube, s.target, s.gripper_closed, s.carried)
    }

    #[test]
    fn task_table_round_trips() {
        for t in Task::ALL {
            assert_eq!(Task::from_id(t.id()), Some(t));
            assert_eq!(Task::parse(t.name()), Some(t));
            assert_eq!(t.action_bounds().len(), t.d_a());
        }
        assert_eq!(Task::Pick.d_a(), 3);
        assert_eq!(Task::Push.d_a(), 2);
        assert!(Task::parse("juggle").is_none());
        assert!(Task::from_id(3).is_none());
    }

    #[test]
    fn reset_is_deterministic_and_respects_placement_rules() {
        for task in Task::ALL {
            let mut cubes = Vec::new();
            for seed in 0..25 {
                let (a, img_a) = env_reset(task, seed);
                let (b, img_b) = env_reset(task, seed);
                assert_eq!(a, b);
                assert_eq!(img_a, img_b);
                assert!(dist(a.cube, a.target) >= MIN_SEPARATION - 1e-6);
                for p in [a.effector, a.cube, a.target] {
                    assert!(p[0] >= 0.05 && p[0] <= 0.95 && p[1] >= 0.05 && p[1] <= 0.95);
                }
                if task.has_obstacle() {
                    for p in [a.effector, a.cube, a.target] {
                        assert!(dist(p, OBSTACLE_CENTER) > OBSTACLE_RADIUS + 0.04);
                    }
                }
                assert!(!a.gripper_closed && !a.carried && a.steps == 0);
                cubes.push(a.cube);
            }
            for i in 0..cubes.len() {
                for j in 0..i {
                    assert_ne!(cubes[i], cubes[j], "seeds {j} and {i} collide on {task:?}");
                }
            }
        }
    }

    #[test]
    fn zero_action_changes_nothing_physical() {
        let (s, _) = env_reset(Task::Push, 3);
        let n = env_step(Task::Push, &s, &[0.0, 0.0]);
        assert_eq!(physical(&n), physical(&s));
        assert_eq!(n.steps, s.steps + 1);

        let (s, _) = env_reset(Task::Pick, 3);
        let n = env_step(Task::Pick, &s, &[0.0, 0.0, 0.0]);
        assert_eq!(physical(&n), physical(&s));
    }

    #[test]
    fn distant_cube_never_moves() {
        let (mut s, _) = env_reset(Task::Push, 11);
        s.effector = [0.2, 0.2];
        s.cube = [0.6, 0.6];
        for a in [[0.08, 0.08], [-0.08, 0.0], [0.0, -0.05], [0.03, -0.08]] {
            let n = env_step(Task::Push, &s, &a);
            assert_eq!(n.cube, s.cube);
        }
    }

    #[test]
    fn contact_push_moves_cube_by_the_same_delta() {
        let s = WorldState {
            effector: [0.45, 0.5],
            cube: [0.5, 0.5],
            target: [0.8, 0.5],
            gripper_closed: false,
            carried: false,
            steps: 0,
        };
        let n = env_step(Task::Push, &s, &[0.06, 0.01]);
        // Away from walls the cube inherits the effector's displacement
        // exactly, by construction.
        assert_eq!(n.cube, add(s.cube, sub(n.effector, s.effector)));
        for (got, want) in n.cube.iter().zip([0.56, 0.51]) {
            assert!((got - want).abs() < 1e-6);
        }
        for (got, want) in n.effector.iter().zip([0.51, 0.51]) {
            assert!((got - want).abs() < 1e-6);
        }
        // Moving away from the cube breaks contact even when close.
        let away = env_step(Task::Push, &s, &[-0.06, 0.0]);
        assert_eq!(away.cube, s.cube);
        // Sideways motion has no component toward the cube.
        let sideways = env_step(Task::Push, &s, &[0.0, 0.08]);
        assert_eq!(sideways.cube, s.cube);
    }

    #[test]
    fn deltas_clamp_and_positions_stay_in_the_arena() {
        let s = WorldState {
            effector: [0.98, 0.02],
            cube: [0.5, 0.5],
            target: [0.8, 0.5],
            gripper_closed: false,
            carried: false,
            steps: 0,
        };
        let n = env_step(Task::Push, &s, &[5.0, -5.0]);
        assert_eq!(n.effector, [1.0, 0.0]);

        // A cube pinned against the wall absorbs only the in-bounds part.
        let s2 = WorldState {
            effector: [0.93, 0.5],
            cube: [0.97, 0.5],
            target: [0.2, 0.5],
            gripper_closed: false,
            carried: false,
            steps: 0,
        };
        let n2 = env_step(Task::Push, &s2, &[0.08, 0.0]);
        assert_eq!(n2.cube, [1.0, 0.5]);
    }

    #[test]
    fn wall_pinned_effector_does_not_push_through() {
        // The effector is already at the wall; the request would move it
        // 0.08 but it actually moves 0. The cube in contact must not move.
        let s = WorldState {
            effector: [1.0, 0.5],
            cube: [0.95, 0.5],
            target: [0.2, 0.5],
            gripper_closed: false,
            carried: false,
            steps: 0,
        };
        let n = env_step(Task::Push, &s, &[0.08, 0.0]);
        assert_eq!(n.effector, [1.0, 0.5]);
        assert_eq!(n.cube, [0.95, 0.5]);
    }

    #[test]
    fn pick_grabs_carries_and_releases() {
        let mut s = WorldState {
            effector: [0.40, 0.50],
            cube: [0.45, 0.50],
            target: [0.70, 0.50],
            gripper_closed: false,
            carried: false,
            steps: 0,
        };
        // Too far to grab: dist 0.05 < GRAB_RADIUS, but closing from
        // beyond the radius after the move must miss.
        let far = env_step(Task::Pick, &s, &[-0.05, 0.0, 1.0]);
        assert!(!far.carried && far.gripper_closed);

        s = env_step(Task::Pick, &s, &[0.0, 0.0, 1.0]);
        assert!(s.carried && s.gripper_closed);
        assert_eq!(s.cube, s.effector);

        for _ in 0..4 {
            s = env_step(Task::Pick, &s, &[0.08, 0.0, 1.0]);
            assert!(s.carried);
            assert_eq!(s.cube, s.effector, "carried cube rides the gripper");
        }
        assert!(!task_success(Task::Pick, &s), "still carried");

        let released = env_step(Task::Pick, &s, &[0.0, 0.0, -1.0]);
        assert!(!released.carried && !released.gripper_closed);
        assert_eq!(released.cube, released.effector);
        assert!(task_success(Task::Pick, &released));
    }

    #[test]
    fn pick_dynamics_never_push() {
        let s = WorldState {
            effector: [0.46, 0.50],
            cube: [0.50, 0.50],
            target: [0.80, 0.50],
            gripper_closed: false,
            carried: false,
            steps: 0,
        };
        let n = env_step(Task::Pick, &s, &[0.06, 0.0, -1.0]);
        assert_eq!(n.cube, s.cube, "open gripper slides past the cube");
    }

    #[test]
    fn obstacle_excludes_effector_and_cube() {
        let s = WorldState {
            effector: [0.40, 0.50],
            cube: [0.44, 0.50],
            target: [0.80, 0.50],
            gripper_closed: false,
            carried: false,
            steps: 0,
        };
        let mut cur = s.clone();
        for _ in 0..6 {
            cur = env_step(Task::PushAroundObstacle, &cur, &[0.05, 0.0]);
            for p in [cur.effector, cur.cube] {
                assert!(
                    dist(p, OBSTACLE_CENTER) >= OBSTACLE_RADIUS - 1e-6,
                    "{p:?} is inside the obstacle"
                );
            }
        }
        // Plain push has no obstacle: the same drive sails through.
        let mut free = WorldState { steps: 0, ..s };
        for _ in 0..2 {
            free = env_step(Task::Push, &free, &[0.05, 0.0]);
        }
        assert!(dist(free.cube, OBSTACLE_CENTER) < 0.05);
    }

    #[test]
    fn push_success_is_distance_to_target() {
        let (mut s, _) = env_reset(Task::Push, 0);
        assert!(!task_success(Task::Push, &s), "reset separation precludes success");
        s.cube = add(s.target, [0.05, 0.0]);
        assert!(task_success(Task::Push, &s));
        s.cube = add(s.target, [0.09, 0.0]);
        assert!(!task_success(Task::Push, &s));
    }
}
