//! A 2D tabletop arena for pushing and picking a cube, built for
//! training data generation and closed-loop policy evaluation.
//!
//! Everything is a pure function of its inputs: resets are seeded,
//! stepping maps (state, action) to the successor state, and rendering
//! maps state to pixels. Full episodes replay bit-exactly from
//! (task, seed, action list).

mod vec2;

pub mod policy;
pub mod render;
pub mod world;

pub use policy::{Route, ScriptedPolicy};
pub use render::{env_render, IMG_C, IMG_H, IMG_W};
pub use world::{
    env_reset, env_step, task_success, Task, WorldState, CONTACT_RADIUS, GRAB_RADIUS, MAX_DELTA,
    MIN_SEPARATION, OBSTACLE_CENTER, OBSTACLE_RADIUS, SUCCESS_RADIUS,
};
