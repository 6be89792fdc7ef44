//! Fixed-size vector helpers for arena geometry.

pub(crate) fn add(a: [f32; 2], b: [f32; 2]) -> [f32; 2] {
    [a[0] + b[0], a[1] + b[1]]
}

pub(crate) fn sub(a: [f32; 2], b: [f32; 2]) -> [f32; 2] {
    [a[0] - b[0], a[1] - b[1]]
}

pub(crate) fn scale(a: [f32; 2], k: f32) -> [f32; 2] {
    [a[0] * k, a[1] * k]
}

pub(crate) fn dot(a: [f32; 2], b: [f32; 2]) -> f32 {
    a[0] * b[0] + a[1] * b[1]
}

/// z-component of a x b; positive when b lies counter-clockwise of a.
pub(crate) fn cross(a: [f32; 2], b: [f32; 2]) -> f32 {
    a[0] * b[1] - a[1] * b[0]
}

pub(crate) fn norm(a: [f32; 2]) -> f32 {
    dot(a, a).sqrt()
}

pub(crate) fn dist(a: [f32; 2], b: [f32; 2]) -> f32 {
    norm(sub(a, b))
}

/// Unit vector, or zero for a near-zero input.
pub(crate) fn dir(a: [f32; 2]) -> [f32; 2] {
    let n = norm(a);
    if n < 1e-9 {
        [0.0, 0.0]
    } else {
        scale(a, 1.0 / n)
    }
}

/// 90 degree counter-clockwise rotation.
pub(crate) fn perp(a: [f32; 2]) -> [f32; 2] {
    [-a[1], a[0]]
}

pub(crate) fn clamp01(p: [f32; 2]) -> [f32; 2] {
    [p[0].clamp(0.0, 1.0), p[1].clamp(0.0, 1.0)]
}

pub(crate) fn clamp_axes(d: [f32; 2], cap: f32) -> [f32; 2] {
    [d[0].clamp(-cap, cap), d[1].clamp(-cap, cap)]
}

/// Distance from point p to the segment a-b.
pub(crate) fn seg_dist(p: [f32; 2], a: [f32; 2], b: [f32; 2]) -> f32 {
    let ab = sub(b, a);
    let len2 = dot(ab, ab);
    if len2 < 1e-12 {
        return dist(p, a);
    }
    let t = (dot(sub(p, a), ab) / len2).clamp(0.0, 1.0);
    dist(p, add(a, scale(ab, t)))
}
