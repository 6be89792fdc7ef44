//! Rasterizer for arena states: a 24x24 RGB image in [0, 1].
//!
//! Each pixel averages a 2x2 grid of sub-samples, so motion smaller
//! than one cell still changes pixel values. Draw order, top first:
//! effector, cube, obstacle, target, background.

use crate::vec2::dist;
use crate::world::{Task, WorldState, OBSTACLE_CENTER, OBSTACLE_RADIUS};

pub const IMG_H: usize = 24;
pub const IMG_W: usize = 24;
pub const IMG_C: usize = 3;

const BACKGROUND: [f32; 3] = [0.08, 0.09, 0.11];
const TARGET_COLOR: [f32; 3] = [0.15, 0.75, 0.30];
const OBSTACLE_COLOR: [f32; 3] = [0.46, 0.46, 0.52];
const CUBE_COLOR: [f32; 3] = [0.92, 0.26, 0.15];
const EFFECTOR_OPEN: [f32; 3] = [0.20, 0.45, 0.95];
const EFFECTOR_CLOSED: [f32; 3] = [0.60, 0.85, 0.95];

const TARGET_RADIUS: f32 = 0.06;
const CUBE_HALF: f32 = 0.045;
const EFFECTOR_RADIUS: f32 = 0.04;

/// Row-major H x W x C pixels; row 0 spans y in [0, 1/24).
pub fn env_render(task: Task, state: &WorldState) -> Vec<f32> {
    let mut img = vec![0.0f32; IMG_H * IMG_W * IMG_C];
    for py in 0..IMG_H {
        for px in 0..IMG_W {
            let mut acc = [0.0f32; 3];
            for sy in 0..2 {
                for sx in 0..2 {
                    let x = (px as f32 + 0.25 + 0.5 * sx as f32) / IMG_W as f32;
                    let y = (py as f32 + 0.25 + 0.5 * sy as f32) / IMG_H as f32;
                    let c = sample_color(task, state, [x, y]);
                    for k in 0..3 {
                        acc[k] += c[k];
                    }
                }
            }
            let at = (py * IMG_W + px) * IMG_C;
            for k in 0..3 {
                img[at + k] = acc[k] * 0.25;
            }
        }
    }
    img
}

fn sample_color(task: Task, state: &WorldState, p: [f32; 2]) -> [f32; 3] {
    if dist(p, state.effector) <= EFFECTOR_RADIUS {
        return if state.gripper_closed {
            EFFECTOR_CLOSED
        } else {
            EFFECTOR_OPEN
        };
    }
    if (p[0] - state.cube[0]).abs() <= CUBE_HALF && (p[1] - state.cube[1]).abs() <= CUBE_HALF {
        return CUBE_COLOR;
    }
    if task.has_obstacle() && dist(p, OBSTACLE_CENTER) <= OBSTACLE_RADIUS {
        return OBSTACLE_COLOR;
    }
    if dist(p, state.target) <= TARGET_RADIUS {
        return TARGET_COLOR;
    }
    BACKGROUND
}
