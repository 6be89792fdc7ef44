//! Episode dataset files: demonstrations for one task, stored as raw
//! frames and normalized chunks.
//!
//! Layout (all integers and floats little-endian):
//! magic `PARD`, u32 version, u32 task id, u32 episode count, u32 image
//! height/width/channels, u32 actions per chunk, u32 action dims, one
//! f32 per-axis action bound, then per episode: u32 transition count N,
//! (N+1)*H*W*C image f32s, N*L*d_a chunk f32s, u8 success flag.

use std::path::Path;

use crate::error::{CoreError, Result};
use crate::io::{Reader, Writer};
use crate::model::Episode;
use crate::tokenizer::ActionBounds;

pub const DATASET_MAGIC: &[u8; 4] = b"PARD";
pub const DATASET_VERSION: u32 = 1;

/// One recorded episode: the reset observation plus one observation per
/// executed chunk, and whether the script reached the goal.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeRecord {
    /// `n_transitions + 1` images, each `h * w * c` floats in [0,1].
    pub images: Vec<Vec<f32>>,
    /// `n_transitions` chunks, each `l * d_a` floats in [-1,1].
    pub chunks: Vec<Vec<f32>>,
    pub success: bool,
}

impl EpisodeRecord {
    pub fn n_transitions(&self) -> usize {
        self.chunks.len()
    }
}

/// All demonstrations for one task, plus the geometry and normalization
/// needed to interpret them.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub task_id: usize,
    pub img_h: usize,
    pub img_w: usize,
    pub img_c: usize,
    /// Actions per chunk.
    pub l: usize,
    pub d_a: usize,
    pub bounds: ActionBounds,
    pub episodes: Vec<EpisodeRecord>,
}

impl Dataset {
    pub fn image_len(&self) -> usize {
        self.img_h * self.img_w * self.img_c
    }

    pub fn chunk_len(&self) -> usize {
        self.l * self.d_a
    }

    /// The record as a training episode (the dataset's task id attached).
    pub fn episode(&self, i: usize) -> Episode {
        let r = &self.episodes[i];
        Episode { task_id: self.task_id, images: r.images.clone(), chunks: r.chunks.clone() }
    }

    fn check(&self) {
        assert_eq!(self.bounds.dim(), self.d_a, "bounds dim");
        for (i, ep) in self.episodes.iter().enumerate() {
            assert_eq!(ep.images.len(), ep.chunks.len() + 1, "episode {i}: images vs chunks");
            assert!(!ep.chunks.is_empty(), "episode {i}: no transitions");
            for img in &ep.images {
                assert_eq!(img.len(), self.image_len(), "episode {i}: image length");
            }
            for c in &ep.chunks {
                assert_eq!(c.len(), self.chunk_len(), "episode {i}: chunk length");
            }
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.check();
        let mut w = Writer::new();
        w.bytes(DATASET_MAGIC);
        w.u32(DATASET_VERSION);
        w.u32(self.task_id as u32);
        w.u32(self.episodes.len() as u32);
        w.u32(self.img_h as u32);
        w.u32(self.img_w as u32);
        w.u32(self.img_c as u32);
        w.u32(self.l as u32);
        w.u32(self.d_a as u32);
        w.f32_slice(self.bounds.as_slice());
        for ep in &self.episodes {
            w.u32(ep.chunks.len() as u32);
            for img in &ep.images {
                w.f32_slice(img);
            }
            for c in &ep.chunks {
                w.f32_slice(c);
            }
            w.u8(ep.success as u8);
        }
        w.buf
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader::new(buf);
        r.expect_magic(DATASET_MAGIC, "dataset magic")?;
        let version = r.u32("dataset version")?;
        if version != DATASET_VERSION {
            return Err(CoreError::Corrupt {
                what: "dataset version".into(),
                offset: 4,
                detail: format!("version {version}, this build reads {DATASET_VERSION}"),
            });
        }
        let task_id = r.u32("task id")? as usize;
        let n_episodes = r.count("episode count", 1)?;
        let img_h = r.u32("image height")? as usize;
        let img_w = r.u32("image width")? as usize;
        let img_c = r.u32("image channels")? as usize;
        let l = r.u32("actions per chunk")? as usize;
        let d_a = r.u32("action dims")? as usize;
        for (name, v) in
            [("image height", img_h), ("image width", img_w), ("image channels", img_c), ("actions per chunk", l), ("action dims", d_a)]
        {
            if v == 0 || v > 1 << 16 {
                return Err(CoreError::Corrupt {
                    what: name.into(),
                    offset: r.offset() as u64,
                    detail: format!("implausible value {v}"),
                });
            }
        }
        let raw_bounds = r.f32_vec(d_a, "action bounds")?;
        if !raw_bounds.iter().all(|b| b.is_finite() && *b > 0.0) {
            return Err(CoreError::Corrupt {
                what: "action bounds".into(),
                offset: r.offset() as u64,
                detail: format!("bounds must be positive and finite, got {raw_bounds:?}"),
            });
        }
        let bounds = ActionBounds::new(&raw_bounds);
        let image_len = img_h * img_w * img_c;
        let chunk_len = l * d_a;
        let mut episodes = Vec::with_capacity(n_episodes);
        for i in 0..n_episodes {
            let n = r.count(&format!("episode {i} transition count"), image_len * 4)?;
            if n == 0 {
                return Err(CoreError::Corrupt {
                    what: format!("episode {i}"),
                    offset: r.offset() as u64,
                    detail: "zero transitions".into(),
                });
            }
            let mut images = Vec::with_capacity(n + 1);
            for j in 0..=n {
                images.push(r.f32_vec(image_len, &format!("episode {i} image {j}"))?);
            }
            let mut chunks = Vec::with_capacity(n);
            for j in 0..n {
                chunks.push(r.f32_vec(chunk_len, &format!("episode {i} chunk {j}"))?);
            }
            let success = match r.u8(&format!("episode {i} success flag"))? {
                0 => false,
                1 => true,
                other => {
                    return Err(CoreError::Corrupt {
                        what: format!("episode {i} success flag"),
                        offset: (r.offset() - 1) as u64,
                        detail: format!("flag byte {other}, expected 0 or 1"),
                    })
                }
            };
            episodes.push(EpisodeRecord { images, chunks, success });
        }
        r.finish("dataset")?;
        Ok(Dataset { task_id, img_h, img_w, img_c, l, d_a, bounds, episodes })
    }

    pub fn save<P: AsRef<Path>>(&self, path: P) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load<P: AsRef<Path>>(path: P) -> Result<Self> {
        let buf = std::fs::read(path)?;
        Self::from_bytes(&buf)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn sample_dataset(seed: u64) -> Dataset {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let (h, w, c, l, d_a) = (4, 4, 1, 2, 2);
        let episodes = (0..3)
            .map(|e| {
                let n = 1 + e % 2;
                EpisodeRecord {
                    images: (0..=n)
                        .map(|_| (0..h * w * c).map(|_| rng.gen::<f32>()).collect())
                        .collect(),
                    chunks: (0..n)
                        .map(|_| (0..l * d_a).map(|_| rng.gen_range(-1.0f32..1.0)).collect())
                        .collect(),
                    success: e != 1,
                }
            })
            .collect();
        Dataset {
            task_id: 2,
            img_h: h,
            img_w: w,
            img_c: c,
            l,
            d_a,
            bounds: ActionBounds::new(&[0.08, 0.05]),
            episodes,
        }
    }

    #[test]
    fn round_trip_preserves_everything() {
        let ds = sample_dataset(1);
        let bytes = ds.to_bytes();
        let back = Dataset::from_bytes(&bytes).unwrap();
        assert_eq!(back, ds);
        assert_eq!(back.to_bytes(), bytes, "serialization is canonical");
    }

    #[test]
    fn episode_view_attaches_task_id() {
        let ds = sample_dataset(2);
        let ep = ds.episode(0);
        assert_eq!(ep.task_id, ds.task_id);
        assert_eq!(ep.images, ds.episodes[0].images);
        assert_eq!(ep.chunks, ds.episodes[0].chunks);
    }

    #[test]
    fn rejects_bad_magic_version_and_truncation() {
        let ds = sample_dataset(3);
        let good = ds.to_bytes();

        let mut bad = good.clone();
        bad[0] = b'X';
        let err = Dataset::from_bytes(&bad).unwrap_err();
        assert!(format!("{err}").contains("magic"), "unexpected error: {err}");

        let mut bad = good.clone();
        bad[4] = 99;
        let err = Dataset::from_bytes(&bad).unwrap_err();
        assert!(format!("{err}").contains("version"), "unexpected error: {err}");

        for cut in [3, 9, 40, good.len() / 2, good.len() - 1] {
            let err = Dataset::from_bytes(&good[..cut]).unwrap_err();
            match err {
                CoreError::Corrupt { offset, .. } => {
                    assert!(offset as usize <= cut, "offset {offset} beyond cut {cut}")
                }
                other => panic!("wanted corruption error, got {other}"),
            }
        }

        let mut extra = good.clone();
        extra.push(0);
        let err = Dataset::from_bytes(&extra).unwrap_err();
        assert!(format!("{err}").contains("trailing"), "unexpected error: {err}");
    }

    #[test]
    fn rejects_bad_success_flag_and_bounds() {
        let ds = sample_dataset(4);
        let good = ds.to_bytes();
        let mut bad = good.clone();
        let last = bad.len() - 1;
        bad[last] = 7;
        let err = Dataset::from_bytes(&bad).unwrap_err();
        assert!(format!("{err}").contains("success"), "unexpected error: {err}");

        let mut bytes = ds.to_bytes();
        // First bound starts after magic, version, and 7 u32 header
        // fields.
        let bound_at = 4 + 4 + 7 * 4;
        bytes[bound_at..bound_at + 4].copy_from_slice(&f32::NAN.to_le_bytes());
        let err = Dataset::from_bytes(&bytes).unwrap_err();
        assert!(format!("{err}").contains("bounds"), "unexpected error: {err}");
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("demos.pard");
        let ds = sample_dataset(5);
        ds.save(&path).unwrap();
        assert_eq!(Dataset::load(&path).unwrap(), ds);
    }
}
