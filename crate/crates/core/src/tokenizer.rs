//! Continuous codecs between raw signals and model tokens.
//!
//! Frames: an image is cut into non-overlapping patches in raster order,
//! each patch flattened (row, column, channel innermost) and mapped to a
//! token by one learned linear map `W`. Decoding uses the Moore-Penrose
//! pseudo-inverse of `W`, recomputed from the current weights rather than
//! trained: `decode(encode(p))` is the orthogonal projection of `p` onto
//! the column space of `W`, and `encode(decode(z)) = z` exactly. The
//! decoder therefore can never drift away from the encoder.
//!
//! Actions: raw per-axis deltas are scaled into [-1, 1] by fixed bounds.
//! The normalized value is the stored source of truth; executing
//! `denormalize(normalize(raw))` instead of `raw` makes recorded chunks
//! replay bit for bit.

use crate::error::{CoreError, Result};
use crate::tensor::{kernels, Tensor};

/// Patch grid geometry. `h`, `w` must be multiples of `p`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchGeom {
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub p: usize,
}

impl PatchGeom {
    pub fn new(h: usize, w: usize, c: usize, p: usize) -> Self {
        assert!(p > 0 && h.is_multiple_of(p) && w.is_multiple_of(p), "patch size {p} must divide {h}x{w}");
        PatchGeom { h, w, c, p }
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.h / self.p, self.w / self.p)
    }

    pub fn n_patches(&self) -> usize {
        let (gh, gw) = self.grid();
        gh * gw
    }

    pub fn patch_dim(&self) -> usize {
        self.p * self.p * self.c
    }

    pub fn image_len(&self) -> usize {
        self.h * self.w * self.c
    }

    /// Image (HWC row-major) to patch matrix (n_patches, patch_dim),
    /// patches in raster order, pixels within a patch in raster order,
    /// channels innermost.
    pub fn patchify(&self, img: &[f32]) -> Tensor {
        assert_eq!(img.len(), self.image_len(), "image length mismatch");
        let (gh, gw) = self.grid();
        let pd = self.patch_dim();
        let mut out = vec![0.0f32; gh * gw * pd];
        for pr in 0..gh {
            for pc in 0..gw {
                let patch = (pr * gw + pc) * pd;
                for dy in 0..self.p {
                    let src = ((pr * self.p + dy) * self.w + pc * self.p) * self.c;
                    let dst = patch + dy * self.p * self.c;
                    out[dst..dst + self.p * self.c]
                        .copy_from_slice(&img[src..src + self.p * self.c]);
                }
            }
        }
        Tensor::new(&[gh * gw, pd], out)
    }

    /// Exact inverse of `patchify` for well-formed patch matrices.
    pub fn unpatchify(&self, patches: &Tensor) -> Vec<f32> {
        assert_eq!(patches.shape, vec![self.n_patches(), self.patch_dim()], "patch shape");
        let (_, gw) = self.grid();
        let pd = self.patch_dim();
        let mut out = vec![0.0f32; self.image_len()];
        for (k, patch) in patches.data.chunks_exact(pd).enumerate() {
            let (pr, pc) = (k / gw, k % gw);
            for dy in 0..self.p {
                let dst = ((pr * self.p + dy) * self.w + pc * self.p) * self.c;
                let src = dy * self.p * self.c;
                out[dst..dst + self.p * self.c].copy_from_slice(&patch[src..src + self.p * self.c]);
            }
        }
        out
    }
}

/// Patch matrix to tokens through the encoder weight (patch_dim, d).
pub fn encode_patches(patches: &Tensor, w_enc: &Tensor) -> Tensor {
    let (k, pd) = (patches.rows(), patches.cols());
    let (pd2, d) = (w_enc.rows(), w_enc.cols());
    assert_eq!(pd, pd2, "encoder expects patch_dim {pd2}, got {pd}");
    let mut out = vec![0.0f32; k * d];
    kernels::matmul(&mut out, &patches.data, &w_enc.data, k, pd, d);
    Tensor::new(&[k, d], out)
}

pub fn encode_frame(geom: &PatchGeom, img: &[f32], w_enc: &Tensor) -> Tensor {
    encode_patches(&geom.patchify(img), w_enc)
}

/// Pseudo-inverse decoder `(W^T W)^-1 W^T`, shape (d, patch_dim), built in
/// f64 through a Cholesky solve of the Gram matrix. Fails only if the
/// encoder has collapsed to rank-deficiency.
pub fn decoder_matrix(w_enc: &Tensor) -> Result<Tensor> {
    let (pd, d) = (w_enc.rows(), w_enc.cols());
    let w: Vec<f64> = w_enc.data.iter().map(|&v| v as f64).collect();
    let mut gram = vec![0.0f64; d * d];
    for a in 0..d {
        for b in a..d {
            let mut s = 0.0;
            for r in 0..pd {
                s += w[r * d + a] * w[r * d + b];
            }
            gram[a * d + b] = s;
            gram[b * d + a] = s;
        }
    }
    let chol = cholesky(&gram, d)?;
    // Solve (W^T W) X = W^T column by column; columns of W^T are rows of W.
    let mut out = vec![0.0f32; d * pd];
    let mut col = vec![0.0f64; d];
    for j in 0..pd {
        for a in 0..d {
            col[a] = w[j * d + a];
        }
        cholesky_solve_in_place(&chol, d, &mut col);
        for a in 0..d {
            out[a * pd + j] = col[a] as f32;
        }
    }
    Ok(Tensor::new(&[d, pd], out))
}

/// Tokens (k, d) back to a patch matrix (k, patch_dim).
pub fn decode_tokens(z: &Tensor, decoder: &Tensor) -> Tensor {
    let (k, d) = (z.rows(), z.cols());
    let (d2, pd) = (decoder.rows(), decoder.cols());
    assert_eq!(d, d2, "decoder expects token dim {d2}, got {d}");
    let mut out = vec![0.0f32; k * pd];
    kernels::matmul(&mut out, &z.data, &decoder.data, k, d, pd);
    Tensor::new(&[k, pd], out)
}

pub fn decode_frame(geom: &PatchGeom, z: &Tensor, decoder: &Tensor) -> Vec<f32> {
    geom.unpatchify(&decode_tokens(z, decoder))
}

/// Lower-triangular Cholesky factor of a symmetric positive definite
/// matrix, or a numeric error when the pivot degenerates.
fn cholesky(g: &[f64], n: usize) -> Result<Vec<f64>> {
    let mut l = vec![0.0f64; n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut s = g[i * n + j];
            for k in 0..j {
                s -= l[i * n + k] * l[j * n + k];
            }
            if i == j {
                if s <= 1e-12 {
                    return Err(CoreError::Numeric(format!(
                        "patch encoder Gram matrix is not positive definite (pivot {s:.3e} at {i})"
                    )));
                }
                l[i * n + i] = s.sqrt();
            } else {
                l[i * n + j] = s / l[j * n + j];
            }
        }
    }
    Ok(l)
}

fn cholesky_solve_in_place(l: &[f64], n: usize, b: &mut [f64]) {
    for i in 0..n {
        let mut s = b[i];
        for k in 0..i {
            s -= l[i * n + k] * b[k];
        }
        b[i] = s / l[i * n + i];
    }
    for i in (0..n).rev() {
        let mut s = b[i];
        for k in (i + 1)..n {
            s -= l[k * n + i] * b[k];
        }
        b[i] = s / l[i * n + i];
    }
}

/// Per-axis scale bounds mapping raw action deltas into [-1, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct ActionBounds(Vec<f32>);

impl ActionBounds {
    pub fn new(per_axis: &[f32]) -> Self {
        assert!(!per_axis.is_empty() && per_axis.iter().all(|&b| b > 0.0), "bounds must be positive");
        ActionBounds(per_axis.to_vec())
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.0
    }

    /// Raw deltas to [-1, 1], clamping anything outside the bounds.
    pub fn normalize(&self, raw: &[f32]) -> Vec<f32> {
        assert_eq!(raw.len() % self.dim(), 0, "action length not a multiple of dim");
        raw.iter()
            .enumerate()
            .map(|(i, &v)| (v / self.0[i % self.dim()]).clamp(-1.0, 1.0))
            .collect()
    }

    /// Normalized values back to raw scale. This is the executed action:
    /// one f32 multiply per axis, so replaying a stored normalized chunk
    /// reproduces the executed deltas bit for bit.
    pub fn denormalize(&self, norm: &[f32]) -> Vec<f32> {
        assert_eq!(norm.len() % self.dim(), 0, "action length not a multiple of dim");
        norm.iter().enumerate().map(|(i, &v)| v * self.0[i % self.dim()]).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn randn(rng: &mut ChaCha12Rng, n: usize, scale: f32) -> Vec<f32> {
        (0..n).map(|_| rng.sample::<f32, _>(rand_distr::StandardNormal) * scale).collect()
    }

    #[test]
    fn patchify_matches_hand_layout() {
        // 4x4 single-channel image holding 0..16 in raster order, 2x2
        // patches: each patch must read its quadrant row by row.
        let geom = PatchGeom::new(4, 4, 1, 2);
        let img: Vec<f32> = (0..16).map(|v| v as f32).collect();
        let p = geom.patchify(&img);
        assert_eq!(p.shape, vec![4, 4]);
        assert_eq!(&p.data[0..4], &[0.0, 1.0, 4.0, 5.0]);
        assert_eq!(&p.data[4..8], &[2.0, 3.0, 6.0, 7.0]);
        assert_eq!(&p.data[8..12], &[8.0, 9.0, 12.0, 13.0]);
        assert_eq!(&p.data[12..16], &[10.0, 11.0, 14.0, 15.0]);
    }

    #[test]
    fn patchify_keeps_channels_innermost() {
        // 2x2 image, 2 channels, one 2x2 patch: flattened order must be
        // (y, x, c) with c fastest.
        let geom = PatchGeom::new(2, 2, 2, 2);
        let img = vec![10.0, 11.0, 20.0, 21.0, 30.0, 31.0, 40.0, 41.0];
        let p = geom.patchify(&img);
        assert_eq!(p.data, img);
    }

    proptest! {
        #[test]
        fn unpatchify_inverts_patchify(gh in 1usize..5, gw in 1usize..5, c in 1usize..4, p in 1usize..4, seed in 0u64..1000) {
            let geom = PatchGeom::new(gh * p, gw * p, c, p);
            let mut rng = ChaCha12Rng::seed_from_u64(seed);
            let img = randn(&mut rng, geom.image_len(), 1.0);
            let back = geom.unpatchify(&geom.patchify(&img));
            prop_assert_eq!(img, back);
        }

        #[test]
        fn normalized_actions_stay_in_unit_box(seed in 0u64..1000) {
            let bounds = ActionBounds::new(&[0.08, 0.08, 1.0]);
            let mut rng = ChaCha12Rng::seed_from_u64(seed);
            let raw = randn(&mut rng, 12, 0.5);
            for v in bounds.normalize(&raw) {
                prop_assert!((-1.0..=1.0).contains(&v));
            }
        }
    }

    #[test]
    fn encode_of_decode_is_identity() {
        // decode then encode must return the token unchanged: the decoder
        // is a right inverse of the encoder by construction.
        let mut rng = ChaCha12Rng::seed_from_u64(21);
        let (pd, d) = (108, 64);
        let w = Tensor::new(&[pd, d], randn(&mut rng, pd * d, 0.1));
        let dec = decoder_matrix(&w).unwrap();
        let z = Tensor::new(&[16, d], randn(&mut rng, 16 * d, 1.0));
        let back = encode_patches(&decode_tokens(&z, &dec), &w);
        for (a, b) in back.data.iter().zip(&z.data) {
            assert!((a - b).abs() < 1e-4, "{a} vs {b}");
        }
    }

    #[test]
    fn reconstruction_residual_is_orthogonal_to_encoder_columns() {
        // decode(encode(p)) is the least-squares reconstruction if and
        // only if the residual is orthogonal to every encoder column;
        // that certificate needs no second pseudo-inverse to check.
        let mut rng = ChaCha12Rng::seed_from_u64(22);
        let (pd, d) = (108, 64);
        let w = Tensor::new(&[pd, d], randn(&mut rng, pd * d, 0.1));
        let dec = decoder_matrix(&w).unwrap();
        let p = Tensor::new(&[8, pd], randn(&mut rng, 8 * pd, 1.0));
        let phat = decode_tokens(&encode_patches(&p, &w), &dec);
        for row in 0..8 {
            for col in 0..d {
                let mut dot = 0.0f64;
                for j in 0..pd {
                    let r = (phat.data[row * pd + j] - p.data[row * pd + j]) as f64;
                    dot += r * w.data[j * d + col] as f64;
                }
                assert!(dot.abs() < 1e-3, "residual row {row} not orthogonal to col {col}: {dot}");
            }
        }
    }

    #[test]
    fn decoder_matches_independent_gauss_jordan_oracle() {
        // Same pseudo-inverse computed in the test by explicit Gauss-
        // Jordan inversion of the Gram matrix; only the final f32 values
        // are compared.
        let mut rng = ChaCha12Rng::seed_from_u64(23);
        let (pd, d) = (12, 5);
        let w = Tensor::new(&[pd, d], randn(&mut rng, pd * d, 0.5));
        let dec = decoder_matrix(&w).unwrap();

        let wd: Vec<f64> = w.data.iter().map(|&v| v as f64).collect();
        let mut g = vec![0.0f64; d * d];
        for a in 0..d {
            for b in 0..d {
                g[a * d + b] = (0..pd).map(|r| wd[r * d + a] * wd[r * d + b]).sum();
            }
        }
        let mut aug = vec![0.0f64; d * 2 * d];
        for i in 0..d {
            aug[i * 2 * d..i * 2 * d + d].copy_from_slice(&g[i * d..(i + 1) * d]);
            aug[i * 2 * d + d + i] = 1.0;
        }
        for col in 0..d {
            let piv = (col..d)
                .max_by(|&a, &b| {
                    aug[a * 2 * d + col].abs().partial_cmp(&aug[b * 2 * d + col].abs()).unwrap()
                })
                .unwrap();
            for j in 0..2 * d {
                aug.swap(col * 2 * d + j, piv * 2 * d + j);
            }
            let pivot = aug[col * 2 * d + col];
            for j in 0..2 * d {
                aug[col * 2 * d + j] /= pivot;
            }
            for r in 0..d {
                if r != col {
                    let f = aug[r * 2 * d + col];
                    for j in 0..2 * d {
                        aug[r * 2 * d + j] -= f * aug[col * 2 * d + j];
                    }
                }
            }
        }
        for a in 0..d {
            for j in 0..pd {
                let mut v = 0.0f64;
                for b in 0..d {
                    v += aug[a * 2 * d + d + b] * wd[j * d + b];
                }
                let got = dec.data[a * pd + j] as f64;
                assert!((got - v).abs() < 1e-6, "decoder[{a},{j}]: {got} vs oracle {v}");
            }
        }
    }

    #[test]
    fn reconstruction_matches_least_squares_oracle_under_mse_budget() {
        // Full-size geometry: reconstruction must sit on the oracle
        // least-squares solution well inside the 1e-3 MSE budget.
        let mut rng = ChaCha12Rng::seed_from_u64(24);
        let geom = PatchGeom::new(24, 24, 3, 6);
        let (pd, d) = (geom.patch_dim(), 64);
        assert_eq!(pd, 108);
        let w = Tensor::new(&[pd, d], randn(&mut rng, pd * d, 0.1));
        let dec = decoder_matrix(&w).unwrap();
        let img: Vec<f32> = (0..geom.image_len()).map(|_| rng.gen::<f32>()).collect();
        let p = geom.patchify(&img);
        let phat = decode_tokens(&encode_patches(&p, &w), &dec);

        // Oracle reconstruction: f64 normal equations solved by the
        // Gauss-Jordan inverse path above would duplicate code, so solve
        // per row with plain conjugate residual on the Gram system.
        let wd: Vec<f64> = w.data.iter().map(|&v| v as f64).collect();
        let mut mse = 0.0f64;
        let mut n = 0usize;
        for row in 0..geom.n_patches() {
            let pr: Vec<f64> =
                p.data[row * pd..(row + 1) * pd].iter().map(|&v| v as f64).collect();
            // Gram system G y = W^T p via dense LU-free Gauss elimination.
            let mut g = vec![0.0f64; d * (d + 1)];
            for a in 0..d {
                for b in 0..d {
                    g[a * (d + 1) + b] = (0..pd).map(|r| wd[r * d + a] * wd[r * d + b]).sum();
                }
                g[a * (d + 1) + d] = (0..pd).map(|r| wd[r * d + a] * pr[r]).sum();
            }
            for col in 0..d {
                let piv = (col..d)
                    .max_by(|&x, &y| {
                        g[x * (d + 1) + col].abs().partial_cmp(&g[y * (d + 1) + col].abs()).unwrap()
                    })
                    .unwrap();
                for j in 0..=d {
                    g.swap(col * (d + 1) + j, piv * (d + 1) + j);
                }
                let pv = g[col * (d + 1) + col];
                for j in 0..=d {
                    g[col * (d + 1) + j] /= pv;
                }
                for r in 0..d {
                    if r != col {
                        let f = g[r * (d + 1) + col];
                        for j in 0..=d {
                            g[r * (d + 1) + j] -= f * g[col * (d + 1) + j];
                        }
                    }
                }
            }
            let y: Vec<f64> = (0..d).map(|a| g[a * (d + 1) + d]).collect();
            for j in 0..pd {
                let oracle: f64 = (0..d).map(|a| wd[j * d + a] * y[a]).sum();
                let diff = phat.data[row * pd + j] as f64 - oracle;
                mse += diff * diff;
                n += 1;
            }
        }
        mse /= n as f64;
        assert!(mse < 1e-3, "reconstruction deviates from least-squares oracle: mse {mse:.3e}");
        assert!(mse < 1e-9, "pseudo-inverse path should be far tighter than the budget: {mse:.3e}");
    }

    #[test]
    fn rank_deficient_encoder_is_reported() {
        let w = Tensor::zeros(&[12, 5]);
        let err = decoder_matrix(&w).unwrap_err();
        assert!(err.to_string().contains("positive definite"), "got: {err}");
    }

    #[test]
    fn action_bounds_round_trip_and_clamp() {
        let bounds = ActionBounds::new(&[0.08, 0.08]);
        let raw = vec![0.05, -0.03, 0.08, -0.08];
        let norm = bounds.normalize(&raw);
        let back = bounds.denormalize(&norm);
        for (a, b) in raw.iter().zip(&back) {
            assert!((a - b).abs() < 1e-7, "{a} vs {b}");
        }
        assert_eq!(bounds.normalize(&[0.2, -0.5]), vec![1.0, -1.0]);
        // Executing the stored normalized value twice gives the same bits.
        let exec1 = bounds.denormalize(&norm);
        let exec2 = bounds.denormalize(&norm);
        assert_eq!(exec1, exec2);
    }
}
